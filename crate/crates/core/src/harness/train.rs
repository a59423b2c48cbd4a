//! SGD training loop, evaluation, and metrics reporting.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsroute::predicted_class;
use crate::error::{Error, Result};
use crate::harness::dataset::{Dataset, Sample};
use crate::harness::model::{Model, ModelConfig, SampleCache};
use crate::real::Real;

/// Stop training once a validation epoch clears both bars.
#[derive(Debug, Clone, Copy)]
pub struct StopRule {
    pub min_val_accuracy: f64,
    pub max_accuracy_gap: f64,
}

/// Side effects of the training loop.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Saves `epoch_NNN.spct` here after every epoch when set, plus
    /// `diverged.spct` if training aborts on a non-finite loss.
    pub checkpoint_dir: Option<PathBuf>,
    pub stop: Option<StopRule>,
    /// Prints one line per epoch to stderr.
    pub verbose: bool,
}

/// One metrics table row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-epoch history plus the final validation confusion matrix
/// (classes x classes, row = true label, column = prediction).
#[derive(Debug, Clone, Default)]
pub struct Metrics {
    pub rows: Vec<MetricRow>,
    pub confusion: Vec<usize>,
    pub classes: usize,
    pub wall_seconds: f64,
}

impl Metrics {
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.epoch, row.split, row.loss, row.accuracy
            ));
        }
        out
    }

    /// Last row for a given split, if any epoch completed.
    pub fn last(&self, split: &str) -> Option<&MetricRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

/// Mean margin loss, argmax accuracy, and the confusion matrix over a
/// set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub confusion: Vec<usize>,
}

fn eval_cached<T: Real>(
    model: &Model<T>,
    samples: &[&Sample],
    caches: &[SampleCache],
) -> Result<EvalResult> {
    let classes = model.config.classes;
    let margin = model.config.margin();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut confusion = vec![0usize; classes * classes];
    for (sample, cache) in samples.iter().zip(caches) {
        let fwd = model.forward(&sample.image, cache)?;
        let loss = crate::capsroute::margin_loss(
            fwd.state.outputs(),
            classes,
            model.config.class_dim,
            sample.label,
            &margin,
        )?;
        loss_sum += loss.to_f64();
        let pred = predicted_class(&fwd.probs);
        if pred == sample.label {
            correct += 1;
        }
        confusion[sample.label * classes + pred] += 1;
    }
    let n = samples.len().max(1) as f64;
    Ok(EvalResult {
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
        confusion,
    })
}

/// Evaluates a model on every sample of a dataset (segmenting each
/// image on the fly).
pub fn evaluate<T: Real>(model: &Model<T>, dataset: &Dataset) -> Result<EvalResult> {
    let samples: Vec<&Sample> = dataset.samples.iter().collect();
    let caches = samples
        .iter()
        .map(|s| model.cache_for(&s.image))
        .collect::<Result<Vec<_>>>()?;
    eval_cached(model, &samples, &caches)
}

/// Initializes a model from the config and trains it on the dataset.
pub fn train<T: Real>(
    config: &ModelConfig,
    dataset: &Dataset,
    options: &TrainOptions,
) -> Result<(Model<T>, Metrics)> {
    let model = Model::init(config)?;
    train_model(model, dataset, options)
}

/// Trains an existing model: stratified split, seeded per-epoch
/// shuffles, minibatch SGD, per-epoch train/val metrics and checkpoints.
pub fn train_model<T: Real>(
    mut model: Model<T>,
    dataset: &Dataset,
    options: &TrainOptions,
) -> Result<(Model<T>, Metrics)> {
    let config = model.config.clone();
    if dataset.samples.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if dataset.classes != config.classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, config expects {}",
            dataset.classes, config.classes
        )));
    }
    let start = Instant::now();
    let (train_idx, val_idx) = dataset.split_stratified(config.val_fraction, config.seed);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::invalid("split left an empty train or validation set"));
    }
    let train_samples: Vec<&Sample> = train_idx.iter().map(|&i| &dataset.samples[i]).collect();
    let val_samples: Vec<&Sample> = val_idx.iter().map(|&i| &dataset.samples[i]).collect();
    let train_caches = train_samples
        .iter()
        .map(|s| model.cache_for(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let val_caches = val_samples
        .iter()
        .map(|s| model.cache_for(&s.image))
        .collect::<Result<Vec<_>>>()?;

    let mut metrics = Metrics {
        classes: config.classes,
        ..Metrics::default()
    };
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0x5f0f_0000 + epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<crate::harness::model::ModelGrads<T>> = None;
            for &si in batch {
                let sample = train_samples[si];
                let cache = &train_caches[si];
                let fwd = model.forward(&sample.image, cache)?;
                let (loss, grads) = model.gradients(&fwd, cache, sample.label)?;
                let loss = loss.to_f64();
                let blown = fwd.probs.iter().any(|&p| !p.to_f64().is_finite());
                if !loss.is_finite() || blown {
                    if let Some(dir) = &options.checkpoint_dir {
                        let _ = std::fs::create_dir_all(dir);
                        let _ = model.save(&dir.join("diverged.spct"), epoch);
                    }
                    return Err(Error::invalid(format!(
                        "training diverged at epoch {epoch}: non-finite loss"
                    )));
                }
                loss_sum += loss;
                if predicted_class(&fwd.probs) == sample.label {
                    correct += 1;
                }
                match &mut acc {
                    Some(into) => Model::accumulate(into, &grads),
                    None => acc = Some(grads),
                }
            }
            if let Some(grads) = acc {
                let step = T::from_f64(config.learning_rate / batch.len() as f64);
                model.apply(&grads, step);
            }
        }
        let train_row = MetricRow {
            epoch,
            split: "train",
            loss: loss_sum / train_samples.len() as f64,
            accuracy: correct as f64 / train_samples.len() as f64,
        };
        let val = eval_cached(&model, &val_samples, &val_caches)?;
        let val_row = MetricRow {
            epoch,
            split: "val",
            loss: val.loss,
            accuracy: val.accuracy,
        };
        if options.verbose {
            eprintln!(
                "epoch {epoch}: train loss {:.4} acc {:.3} | val loss {:.4} acc {:.3}",
                train_row.loss, train_row.accuracy, val_row.loss, val_row.accuracy
            );
        }
        metrics.rows.push(train_row.clone());
        metrics.rows.push(val_row.clone());
        metrics.confusion = val.confusion;
        if let Some(dir) = &options.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            model.save(&dir.join(format!("epoch_{epoch:03}.spct")), epoch)?;
        }
        if let Some(rule) = &options.stop {
            let gap = (train_row.accuracy - val_row.accuracy).abs();
            if val_row.accuracy >= rule.min_val_accuracy && gap <= rule.max_accuracy_gap {
                break;
            }
        }
    }
    metrics.wall_seconds = start.elapsed().as_secs_f64();
    Ok((model, metrics))
}
