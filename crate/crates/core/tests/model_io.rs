use ordlab_core::compressors::{self, CompressionOp};
use ordlab_core::model::{build_synthetic_model, evaluate, LayeredModel, Metric, MODEL_SCHEMA};

#[test]
fn compressed_models_round_trip_through_json() {
    let m = build_synthetic_model(&[8, 16, 8, 4], 21).unwrap();
    let run = compressors::run_pipeline(
        &m,
        &ordlab_core::model::Calibration::of(&m).unwrap(),
        &[CompressionOp::prune_row(0.25), CompressionOp::quant(5).stochastic(4), CompressionOp::prune_layer(0.34)],
    )
    .unwrap();
    let text = run.model.to_json().unwrap();
    let back = LayeredModel::from_json(&text).unwrap();
    assert_eq!(back, run.model);
    let metric = Metric::synthetic(1.0, 0.0).unwrap();
    assert_eq!(evaluate(&back, &m, &metric).unwrap(), evaluate(&run.model, &m, &metric).unwrap());
    assert_eq!(back.footprint_bits(), run.model.footprint_bits());
}

#[test]
fn model_files_are_reproducible_from_seed() {
    let a = build_synthetic_model(&[4, 4, 4], 5).unwrap().to_json().unwrap();
    let b = build_synthetic_model(&[4, 4, 4], 5).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, build_synthetic_model(&[4, 4, 4], 6).unwrap().to_json().unwrap());
    assert!(a.contains(MODEL_SCHEMA));
}

#[test]
fn malformed_model_files_are_rejected() {
    let m = build_synthetic_model(&[4, 4, 4], 5).unwrap();
    let text = m.to_json().unwrap();
    assert!(LayeredModel::from_json(&text.replacen(MODEL_SCHEMA, "other/v9", 1)).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["layers"][1]["weight"]["cols"] = serde_json::Value::from(3);
    assert!(LayeredModel::from_json(&v.to_string()).is_err());
    v["layers"][1]["weight"]["cols"] = serde_json::Value::from(4);
    v["layers"][1]["weight"]["rows"] = serde_json::Value::from(5);
    assert!(LayeredModel::from_json(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["layers"][0]["pruned"].as_array_mut().unwrap().pop();
    assert!(LayeredModel::from_json(&v.to_string()).is_err());
    assert!(LayeredModel::from_json("{}").is_err());
}
