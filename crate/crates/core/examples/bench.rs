//! Rough single-core timing probe for the expensive pipeline stages.

use erp_core::features::extract_all;
use erp_core::models::{Cnn, CnnConfig, Forest, ForestConfig};
use erp_core::preprocess::{preprocess_recording, PreprocessOptions};
use erp_core::stream::{record_session, LossModel};
use erp_core::synth::{default_roster, generate_session, GenerationOptions};
use erp_core::types::SessionSpec;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // one in-lab session end to end, without model training
    let roster = default_roster();
    let spec = SessionSpec::in_lab(7);
    let t = Instant::now();
    let (channels, markers) =
        generate_session(&spec, &roster[2], &GenerationOptions::default(), &mut rng).unwrap();
    println!("synthesize in-lab session: {:.2} s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let rec = record_session(
        &spec, &roster[2].subject_id, "ses-lab-01", &channels, &markers,
        &LossModel::in_lab(), 11,
    )
    .unwrap();
    println!("stream+record session: {:.2} s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let out = preprocess_recording(&rec, &PreprocessOptions::default()).unwrap();
    println!(
        "preprocess session ({} epochs): {:.2} s",
        out.epochs.len(),
        t.elapsed().as_secs_f64()
    );

    let t = Instant::now();
    let feats = extract_all(&out.epochs);
    println!(
        "features for {} epochs: {:.2} s",
        feats.len(),
        t.elapsed().as_secs_f64()
    );

    let n = 1980usize;

    // CNN: one training epoch over a hybrid-sized set
    let x: Array3<f32> = Array3::from_shape_fn((n, 2, 350), |_| rng.gen_range(-8.0..8.0));
    let y: Vec<bool> = (0..n).map(|i| i % 6 == 0).collect();
    let cfg = CnnConfig::default();
    let mut net: Cnn<f32> = Cnn::new(&cfg, &mut rng).unwrap();
    let t = Instant::now();
    net.fit(x.view(), &y, 1, &mut rng).unwrap();
    let per_epoch = t.elapsed().as_secs_f64();
    println!("cnn one epoch over {n} rows: {per_epoch:.2} s");

    let t = Instant::now();
    let _p = net.predict_proba(x.view()).unwrap();
    println!("cnn predict {n} rows: {:.2} s", t.elapsed().as_secs_f64());

    // forest fit over the same set with 44 features
    let xf: Array2<f64> = Array2::from_shape_fn((n, 44), |_| rng.gen_range(-10.0..10.0));
    for trees in [200, 1000] {
        let fc = ForestConfig { n_trees: trees, ..ForestConfig::default() };
        let t = Instant::now();
        let f = Forest::fit(xf.view(), &y, &fc, &mut rng).unwrap();
        let fit_s = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let _ = f.predict_proba(xf.view());
        println!(
            "forest {trees} trees: fit {fit_s:.2} s, predict {:.2} s",
            t.elapsed().as_secs_f64()
        );
    }
}
