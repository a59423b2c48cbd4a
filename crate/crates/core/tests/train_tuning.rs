//! Manual tuning probe for the full-scale training configuration.
//! Run with:
//!   TUNE_LR=2e-4 TUNE_EPOCHS=3 cargo test -p supix --test train_tuning -- --ignored --nocapture

use std::time::Instant;

use supix::harness::model::ModelConfig;
use supix::harness::synth::synth_dataset;
use supix::harness::train::{train, StopRule, TrainOptions};

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

#[test]
#[ignore]
fn tune_full_scale_training() {
    let mut config = ModelConfig::default();
    config.learning_rate = env_f64("TUNE_LR", 2e-4);
    config.caps_init = env_f64("TUNE_CAPS", 0.1);
    config.epochs = env_usize("TUNE_EPOCHS", 3);
    config.batch_size = env_usize("TUNE_BATCH", 1);
    config.seed = env_usize("TUNE_SEED", 0) as u64;
    let n_per_class = env_usize("TUNE_N", 267);
    let data = synth_dataset(n_per_class, 7);
    let options = TrainOptions {
        stop: Some(StopRule {
            min_val_accuracy: 0.85,
            max_accuracy_gap: 0.08,
        }),
        verbose: true,
        ..TrainOptions::default()
    };
    let start = Instant::now();
    let result = train::<f32>(&config, &data, &options);
    match result {
        Ok((_, metrics)) => {
            eprintln!(
                "done in {:.1}s over {} epochs",
                start.elapsed().as_secs_f64(),
                metrics.rows.len() / 2
            );
        }
        Err(err) => eprintln!("failed after {:.1}s: {err}", start.elapsed().as_secs_f64()),
    }
}
