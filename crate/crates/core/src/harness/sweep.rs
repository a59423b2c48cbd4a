//! Grid sweep over superpixel count and capsule width.

use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::harness::model::ModelConfig;
use crate::harness::train::{train, TrainOptions};
use crate::real::Real;

/// One trained grid cell. A cell whose training run failed keeps its
/// coordinates and parameter count but carries NaN metrics.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub superpixels: usize,
    pub class_dim: usize,
    pub params: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub error: Option<String>,
}

/// Trains one model per (S, Q) pair, all from the same template config
/// and seed. Failed cells are recorded rather than aborting the grid.
pub fn sweep<T: Real>(
    template: &ModelConfig,
    s_list: &[usize],
    q_list: &[usize],
    dataset: &Dataset,
    options: &TrainOptions,
) -> Result<Vec<SweepCell>> {
    if s_list.is_empty() || q_list.is_empty() {
        return Err(Error::invalid("sweep lists must be non-empty"));
    }
    let mut cells = Vec::with_capacity(s_list.len() * q_list.len());
    for &s in s_list {
        for &q in q_list {
            let mut config = template.clone();
            config.superpixels = s;
            config.class_dim = q;
            let params = config.param_count();
            let mut cell = SweepCell {
                superpixels: s,
                class_dim: q,
                params,
                train_loss: f64::NAN,
                train_acc: f64::NAN,
                val_loss: f64::NAN,
                val_acc: f64::NAN,
                error: None,
            };
            match train::<T>(&config, dataset, options) {
                Ok((_, metrics)) => {
                    if let Some(row) = metrics.last("train") {
                        cell.train_loss = row.loss;
                        cell.train_acc = row.accuracy;
                    }
                    if let Some(row) = metrics.last("val") {
                        cell.val_loss = row.loss;
                        cell.val_acc = row.accuracy;
                    }
                }
                Err(err) => cell.error = Some(err.to_string()),
            }
            if options.verbose {
                eprintln!(
                    "cell S={s} Q={q}: val acc {}",
                    if cell.val_acc.is_nan() { "failed".into() } else { format!("{:.3}", cell.val_acc) }
                );
            }
            cells.push(cell);
        }
    }
    Ok(cells)
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("S,Q,params,train_loss,train_acc,val_loss,val_acc\n");
    for cell in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            cell.superpixels,
            cell.class_dim,
            cell.params,
            cell.train_loss,
            cell.train_acc,
            cell.val_loss,
            cell.val_acc
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::crop_resize;
    use crate::harness::synth::synth_dataset;

    fn tiny_config() -> ModelConfig {
        let mut config = ModelConfig::default();
        config.input = 16;
        config.stages = vec![(1, 4)];
        config.superpixels = 6;
        config.class_dim = 4;
        config.learning_rate = 0.01;
        config.epochs = 1;
        config.seed = 9;
        config
    }

    fn tiny_dataset() -> Dataset {
        let mut data = synth_dataset(3, 21);
        for sample in data.samples.iter_mut() {
            sample.image = crop_resize(&sample.image, 16);
        }
        data
    }

    #[test]
    fn single_cell_matches_direct_training_run() {
        let config = tiny_config();
        let data = tiny_dataset();
        let cells =
            sweep::<f32>(&config, &[config.superpixels], &[config.class_dim], &data, &TrainOptions::default())
                .unwrap();
        assert_eq!(cells.len(), 1);
        let (_, metrics) = train::<f32>(&config, &data, &TrainOptions::default()).unwrap();
        let train_row = metrics.last("train").unwrap();
        let val_row = metrics.last("val").unwrap();
        assert_eq!(cells[0].train_loss, train_row.loss);
        assert_eq!(cells[0].train_acc, train_row.accuracy);
        assert_eq!(cells[0].val_loss, val_row.loss);
        assert_eq!(cells[0].val_acc, val_row.accuracy);
        assert_eq!(cells[0].params, config.param_count());
    }

    #[test]
    fn params_column_is_monotone_in_both_axes() {
        let config = tiny_config();
        let data = tiny_dataset();
        let cells =
            sweep::<f32>(&config, &[4, 6, 9], &[2, 4], &data, &TrainOptions::default()).unwrap();
        assert_eq!(cells.len(), 6);
        for q_pos in 0..2 {
            let by_s: Vec<usize> = cells.iter().skip(q_pos).step_by(2).map(|c| c.params).collect();
            assert!(by_s.windows(2).all(|w| w[0] < w[1]), "{by_s:?}");
        }
        for pair in cells.chunks(2) {
            assert!(pair[0].params < pair[1].params);
        }
    }

    #[test]
    fn failed_cell_becomes_nan_row_and_grid_continues() {
        let mut config = tiny_config();
        config.superpixels = 6;
        let data = tiny_dataset();
        // class_dim 0 fails validation inside that cell only
        let cells = sweep::<f32>(&config, &[6], &[0, 4], &data, &TrainOptions::default()).unwrap();
        assert_eq!(cells.len(), 2);
        assert!(cells[0].error.is_some());
        assert!(cells[0].val_acc.is_nan());
        assert!(cells[1].error.is_none());
        assert!(cells[1].val_acc.is_finite());
        let csv = sweep_csv(&cells);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "S,Q,params,train_loss,train_acc,val_loss,val_acc");
        assert!(lines[1].contains("NaN"));
    }

    #[test]
    fn empty_axis_is_rejected() {
        let config = tiny_config();
        let data = tiny_dataset();
        assert!(sweep::<f32>(&config, &[], &[4], &data, &TrainOptions::default()).is_err());
    }
}
