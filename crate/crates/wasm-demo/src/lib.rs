//! Browser bindings. Each export takes plain numbers and returns a JSON
//! string; the `*_json` functions hold the logic so they can be tested
//! without a JavaScript host.

use quantlab::alloc::{assign_bits, cutoffs, ratios_for_budget, SplitRatios};
use quantlab::hawq::{power_iteration_sensitivity, EpsPolicy, QuadraticProbe, SensitivityConfig};
use quantlab::numerics::Tensor;
use quantlab::pipeline::parse_tiers;
use quantlab::quant::{qmax, quantize_group};
use serde_json::json;
use wasm_bindgen::prelude::*;

type Out = Result<String, String>;

fn err(e: quantlab::Error) -> String {
    e.to_string()
}

/// Symmetric quantization of one group: scale, codes, reconstruction and
/// per-element error.
pub fn quantize_group_json(values: &[f64], bits: u8) -> Out {
    let (scale, codes) = quantize_group(values, bits).map_err(err)?;
    let recon: Vec<f64> = codes.iter().map(|&c| c as f64 * scale).collect();
    let errors: Vec<f64> = values.iter().zip(&recon).map(|(v, r)| v - r).collect();
    let max_error = errors.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    Ok(json!({
        "bits": bits,
        "qmax": qmax(bits),
        "scale": scale,
        "codes": codes,
        "dequantized": recon,
        "errors": errors,
        "max_error": max_error,
    })
    .to_string())
}

/// Power iteration on the quadratic `½ wᵀAw` with `A` the symmetric part of
/// the row-major `n × n` input, using finite-difference Hessian-vector
/// products over a sparse random direction.
pub fn power_iteration_json(matrix: &[f64], n: usize, rho: f64, iters: usize, seed: u64) -> Out {
    if n == 0 || matrix.len() != n * n {
        return Err(format!("need {n}x{n} = {} entries, got {}", n * n, matrix.len()));
    }
    let sym: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            0.5 * (matrix[i * n + j] + matrix[j * n + i])
        })
        .collect();
    let a = Tensor::new(vec![n, n], sym).map_err(err)?;
    let mut probe = QuadraticProbe::new(vec![("w".into(), a, Tensor::vector(vec![0.0; n]))]).map_err(err)?;
    let cfg = SensitivityConfig {
        rho,
        n_power_iters: iters,
        eps: EpsPolicy::Fixed(1e-3),
        seed,
        ..SensitivityConfig::default()
    };
    let rec = power_iteration_sensitivity(&mut probe, "w", &cfg).map_err(err)?;
    Ok(json!({
        "lambda": rec.lambda,
        "trajectory": rec.trajectory,
        "converged": rec.converged,
        "eps": rec.eps,
    })
    .to_string())
}

/// Widths for `m` ranked modules under a three-way split.
pub fn allocate_json(m: usize, p16: f64, p8: f64, p4: f64, tiers: &str) -> Out {
    let ratios = SplitRatios::new(p16, p8, p4).map_err(err)?;
    let tiers = parse_tiers(tiers).map_err(err)?;
    let bits = assign_bits(m, &ratios, tiers).map_err(err)?;
    let (k16, k8) = cutoffs(&ratios, m);
    let avg = bits.iter().map(|&b| b as f64).sum::<f64>() / m.max(1) as f64;
    Ok(json!({ "bits": bits, "k16": k16, "k8": k8, "avg_bits": avg }).to_string())
}

/// Widths for ranked modules of the given sizes under a mean-bit budget.
pub fn budget_json(sizes: &[usize], target_avg_bits: f64) -> Out {
    let a = ratios_for_budget(sizes, target_avg_bits).map_err(err)?;
    Ok(json!({
        "bits": a.bits,
        "p16": a.ratios.p16,
        "p8": a.ratios.p8,
        "p4": a.ratios.p4,
        "avg_bits": a.achieved_avg_bits,
    })
    .to_string())
}

fn js(r: Out) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn quantize(values: &[f64], bits: u8) -> Result<String, JsValue> {
    js(quantize_group_json(values, bits))
}

#[wasm_bindgen]
pub fn power_iteration(matrix: &[f64], n: usize, rho: f64, iters: usize, seed: u64) -> Result<String, JsValue> {
    js(power_iteration_json(matrix, n, rho, iters, seed))
}

#[wasm_bindgen]
pub fn allocate(m: usize, p16: f64, p8: f64, p4: f64, tiers: &str) -> Result<String, JsValue> {
    js(allocate_json(m, p16, p8, p4, tiers))
}

#[wasm_bindgen]
pub fn allocate_budget(sizes: &[usize], target_avg_bits: f64) -> Result<String, JsValue> {
    js(budget_json(sizes, target_avg_bits))
}
