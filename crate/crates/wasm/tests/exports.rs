use memsgd_wasm::{eigen_locus, loss_curves, stability_map};
use serde_json::Value;

#[test]
fn loss_curves_shape() {
    let v: Value = serde_json::from_str(&loss_curves(3.0, 0.5, 200, 1, 2000)).unwrap();
    let curves = v["curves"].as_array().unwrap();
    assert_eq!(curves.len(), 3);
    for c in curves {
        assert_eq!(c["times"].as_array().unwrap().len(), c["values"].as_array().unwrap().len());
    }
    assert!(curves[0]["diverged_at"].is_null());
}

#[test]
fn bad_input_reports_error() {
    let v: Value = serde_json::from_str(&loss_curves(-1.0, 0.5, 200, 1, 100)).unwrap();
    assert!(v["error"].is_string());
    let v: Value = serde_json::from_str(&stability_map(3.0, 0.5, 100, 0.5, 1, 1)).unwrap();
    assert!(v["error"].is_string());
}

#[test]
fn stability_map_has_both_phases() {
    let v: Value = serde_json::from_str(&stability_map(3.0, 0.5, 300, 0.5, 1, 12)).unwrap();
    let sums = v["noise_sum"].as_array().unwrap();
    assert_eq!(sums.len(), 144);
    assert!(sums.iter().any(Value::is_null));
    assert!(sums.iter().any(Value::is_number));
}

#[test]
fn heavy_ball_locus_is_centered_circle() {
    let v: Value = serde_json::from_str(&eigen_locus(0.19, 3.0, 0.0, 1.0, 50)).unwrap();
    assert_eq!(v["locus"]["shape"]["kind"], "circle");
    assert_eq!(v["locus"]["shape"]["center"], 0.0);
    assert_eq!(v["stable"], true);
}
