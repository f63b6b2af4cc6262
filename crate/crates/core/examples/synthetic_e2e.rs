//! Pretrains on the default synthetic dataset, then fits and evaluates a probe.

use std::time::Instant;

use conmamba::augment::AugmentationSpec;
use conmamba::data::{generate_synthetic, Split, SyntheticSpec};
use conmamba::encoder::EncoderConfig;
use conmamba::probe::{embed_subset, evaluate, silhouette_score, train_probe, ProbeConfig};
use conmamba::train::{pretrain, TrainConfig, TrainState};

fn main() -> conmamba::error::Result<()> {
    let t0 = Instant::now();
    let data = generate_synthetic(&SyntheticSpec::default())?;
    let (train, test) = (data.split(Split::Train), data.split(Split::Test));
    let enc = EncoderConfig::default();
    let mut cfg = TrainConfig::default();
    if let Some(e) = std::env::args().nth(1) {
        cfg.epochs = e.parse().expect("epochs");
    }
    if let Some(b) = std::env::args().nth(2) {
        cfg.batch_size = b.parse().expect("batch size");
    }
    let init = TrainState::init(&enc, &cfg)?;
    let sil0 = silhouette_score(&embed_subset(&init.params, &enc, &test)?, &test.labels())?;
    let state = pretrain(&cfg, &enc, &AugmentationSpec::default(), &train)?;
    let last = state.history.last().expect("at least one step");
    println!("pretrain {:.1}s, {} steps, last {last:?}", t0.elapsed().as_secs_f64(), state.step);
    let sil1 = silhouette_score(&embed_subset(&state.params, &enc, &test)?, &test.labels())?;
    let head = train_probe(&state.params, &enc, &train, &ProbeConfig::default())?;
    let report = evaluate(&head, &state.params, &enc, &test)?;
    let head0 = train_probe(&init.params, &enc, &train, &ProbeConfig::default())?;
    let report0 = evaluate(&head0, &init.params, &enc, &test)?;
    println!("silhouette {sil0:.3} -> {sil1:.3}");
    let zs = |p| -> conmamba::error::Result<Vec<_>> {
        Ok(conmamba::encoder::encode_images(&test.images(), &enc, p)?.into_iter().map(|e| e.z).collect())
    };
    println!(
        "z silhouette {:.3} -> {:.3}",
        silhouette_score(&zs(&init.params)?, &test.labels())?,
        silhouette_score(&zs(&state.params)?, &test.labels())?
    );
    println!("random-init probe acc {:.3} f1 {:.3}", report0.accuracy, report0.macro_f1);
    println!("{}", report.to_table(&data.manifest.class_names));
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
