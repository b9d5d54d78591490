import init, { quantize, power_iteration, allocate, allocate_budget } from "./pkg/quantlab_wasm.js";

const $ = (id) => document.getElementById(id);

function show(id, f) {
  const out = $(id);
  try {
    const v = JSON.parse(f());
    out.className = "";
    out.textContent = JSON.stringify(v, null, 1);
    return v;
  } catch (e) {
    out.className = "err";
    out.textContent = String(e);
    return null;
  }
}

function bars(id, bits) {
  $(id).innerHTML = (bits || []).map((b) => `<span class="bar b${b}">${b}</span>`).join("");
}

function runQuantize() {
  $("q-bits-out").textContent = $("q-bits").value;
  const values = new Float64Array($("q-values").value.split(/[\s,]+/).filter(Boolean).map(Number));
  show("q-out", () => quantize(values, Number($("q-bits").value)));
}

function runPower() {
  const rows = $("p-matrix").value.trim().split("\n");
  const flat = rows.flatMap((r) => r.trim().split(/\s+/).map(Number));
  show("p-out", () =>
    power_iteration(new Float64Array(flat), rows.length, Number($("p-rho").value),
      Number($("p-iters").value), BigInt($("p-seed").value)));
}

function runAllocate() {
  const m = Number($("a-m").value);
  const p16 = Number($("a-p16").value);
  const p8 = Number($("a-p8").value);
  const p4 = Math.max(0, Math.round((1 - p16 - p8) * 1e9) / 1e9);
  const v = show("a-out", () => allocate(m, p16, p8, p4, $("a-tiers").value));
  bars("a-bars", v && v.bits);
  const target = Number($("a-budget").value);
  $("a-budget-out").textContent = target;
  const sizes = new Uint32Array(Array.from({ length: m }, () => 1));
  const b = show("b-out", () => allocate_budget(sizes, target));
  bars("b-bars", b && b.bits);
}

await init();
$("status").textContent = "Ready.";
for (const id of ["q-values", "q-bits"]) $(id).addEventListener("input", runQuantize);
$("p-run").addEventListener("click", runPower);
for (const id of ["a-m", "a-p16", "a-p8", "a-tiers", "a-budget"]) $(id).addEventListener("input", runAllocate);
runQuantize();
runPower();
runAllocate();
