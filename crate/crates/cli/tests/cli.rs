use std::process::{Command, Output};

use quantlab::alloc::{assign_precision, SplitRatios, Tiers};

fn quantlab(args: &[&str], workspace: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quantlab"))
        .args(args)
        .current_dir(workspace)
        .env("QUANTLAB_WORKSPACE", workspace.join("ws"))
        .output()
        .unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantlab(&["reproduce", "--no-such-flag"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));
}

#[test]
fn dry_run_lists_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantlab(&["reproduce", "--dry-run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 22);
    assert_eq!(rows.iter().filter(|r| r.contains("\tbaseline\t16\t")).count(), 2);
    assert_eq!(rows.iter().filter(|r| r.contains("\thawq\t")).count(), 4);
    assert!(!dir.path().join("ws").exists(), "a dry run writes nothing");
}

#[test]
fn assign_matches_the_allocator() {
    let dir = tempfile::tempdir().unwrap();
    let modules = [
        "layers.0.ff.in",
        "layers.0.attn.q",
        "layers.1.ff.out",
        "layers.1.attn.v",
    ];
    std::fs::write(dir.path().join("ranking.txt"), modules.join("\n") + "\n").unwrap();
    let out = quantlab(
        &[
            "assign",
            "--ranking",
            "ranking.txt",
            "--ratios",
            "0.5,0.5,0",
            "--out",
            "plan.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ranked: Vec<String> = modules.iter().map(|s| s.to_string()).collect();
    let expected = assign_precision(
        &ranked,
        SplitRatios::new(0.5, 0.5, 0.0).unwrap(),
        Tiers::default(),
        128,
        false,
    )
    .unwrap()
    .to_json();
    assert_eq!(std::fs::read_to_string(dir.path().join("plan.json")).unwrap(), expected);
    let plan: serde_json::Value = serde_json::from_str(&expected).unwrap();
    let bits: Vec<u64> = plan["modules"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["bits"].as_u64().unwrap())
        .collect();
    // Modules are listed by path; the two most sensitive got 16 bits.
    assert_eq!(bits, [16, 16, 8, 8]);
}

#[test]
fn missing_artifact_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let out = quantlab(&["eval"], dir.path());
    assert!(!out.status.success());
    let v = stderr_json(&out);
    assert_eq!(v["error"]["kind"], "missing_artifact");
    assert_eq!(v["error"]["run"], "quantlab train");
}

#[test]
fn invalid_config_is_reported_before_any_stage() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nsteps = 0\n").unwrap();
    let out = quantlab(&["--config", "bad.toml", "train"], dir.path());
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"]["kind"], "parameter");
    assert!(!dir.path().join("ws").exists());
}

#[test]
fn shipped_configs_are_valid() {
    let dir = tempfile::tempdir().unwrap();
    let configs = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, cells) in [("default", 22), ("desk", 22), ("three_way", 26)] {
        let path = configs.join(format!("{name}.toml"));
        let out = quantlab(
            &["--config", path.to_str().unwrap(), "reproduce", "--dry-run"],
            dir.path(),
        );
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(
            String::from_utf8(out.stdout).unwrap().lines().count(),
            cells + 1,
            "{name}"
        );
    }
}
