use quantlab_wasm::{allocate_json, budget_json, power_iteration_json, quantize_group_json};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn quantize_reports_grid_and_error() {
    let v = parse(quantize_group_json(&[0.7, -0.35, 0.1, 0.0], 4).unwrap());
    assert_eq!(v["qmax"], 7);
    assert_eq!(v["scale"], 0.1);
    assert_eq!(v["codes"], serde_json::json!([7, -4, 1, 0]));
    assert!(v["max_error"].as_f64().unwrap() <= 0.05 + 1e-12);
    assert!(quantize_group_json(&[1.0], 1).is_err());
}

#[test]
fn power_iteration_finds_the_top_eigenvalue() {
    // Eigenvalues 5 and 1; the input is not symmetric, its symmetric part is.
    let m = [3.0, 4.0, 0.0, 3.0];
    let v = parse(power_iteration_json(&m, 2, 1.0, 40, 7).unwrap());
    assert!((v["lambda"].as_f64().unwrap() - 5.0).abs() < 1e-3, "{v}");
    assert!(power_iteration_json(&m, 3, 1.0, 5, 7).is_err());
}

#[test]
fn allocation_matches_the_floors() {
    let v = parse(allocate_json(10, 0.2, 0.3, 0.5, "16/8/4").unwrap());
    assert_eq!(v["bits"], serde_json::json!([16, 16, 8, 8, 8, 4, 4, 4, 4, 4]));
    assert_eq!((v["k16"].as_u64(), v["k8"].as_u64()), (Some(2), Some(5)));
    assert!(allocate_json(4, 0.5, 0.5, 0.5, "16/8/4").is_err());
    assert!(allocate_json(4, 0.5, 0.5, 0.0, "4/2").is_err());
}

#[test]
fn budget_stays_within_target() {
    let v = parse(budget_json(&[10, 10, 10, 10], 11.0).unwrap());
    assert_eq!(v["bits"], serde_json::json!([16, 8, 8, 8]));
    assert!(v["avg_bits"].as_f64().unwrap() <= 11.0);
}
