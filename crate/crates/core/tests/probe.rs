//! The committed label probe and the toy feature extractor it sits on.

use std::path::Path;

use ttm_core::evaluation::{LinearProbe, ToyFeatureExtractor};
use ttm_core::synthdata::{generate_dataset, Dataset, DatasetSpec};

const FIT_SEED: u64 = 0x5052_4f42;

fn features(ex: &ToyFeatureExtractor, d: &Dataset) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    d.examples
        .iter()
        .map(|e| (ex.features(&e.latent).unwrap(), e.attributes.clone()))
        .unzip()
}

fn fit() -> LinearProbe {
    let ex = ToyFeatureExtractor::standard();
    let data = generate_dataset(&DatasetSpec::new(FIT_SEED, 0, 0, 1024)).unwrap();
    let (f, y) = features(&ex, &data);
    LinearProbe::fit(&ex.version(), &f, &y, &[4, 4, 4], 1500, 2.0, 1e-4).unwrap()
}

/// Rewrites `assets/probe_v1.json`; run with `--ignored` after changing the
/// extractor or the synthetic data.
#[test]
#[ignore]
fn regenerate_committed_probe() {
    let probe = fit();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/probe_v1.json");
    std::fs::write(path, serde_json::to_string(&probe).unwrap()).unwrap();
}

#[test]
fn committed_probe_matches_extractor() {
    let probe = LinearProbe::standard().unwrap();
    assert_eq!(probe.extractor_version, ToyFeatureExtractor::standard().version());
    assert_eq!(probe.num_classes(), 12);
}

#[test]
fn committed_probe_classifies_fresh_data() {
    let ex = ToyFeatureExtractor::standard();
    let probe = LinearProbe::standard().unwrap();
    let data = generate_dataset(&DatasetSpec::new(777, 0, 0, 512)).unwrap();
    let (f, y) = features(&ex, &data);
    let correct = f
        .iter()
        .zip(&y)
        .filter(|(fi, yi)| &probe.predict(fi).unwrap() == *yi)
        .count();
    let acc = correct as f64 / f.len() as f64;
    assert!(acc >= 0.95, "accuracy {acc}");
}
