//! Dataset container, directory ingestion, and the train/val split.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::synth::ShapeSpec;
use crate::tensorio::{read_ppm, Image};

/// One labeled image. Synthetic samples carry their shape geometry so
/// tests can derive exact foreground masks.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub shape: Option<ShapeSpec>,
}

/// A labeled image collection with `classes` distinct labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits sample indices into (train, val) with `val_fraction` of
    /// each class (rounded) held out, shuffled deterministically.
    pub fn split_stratified(&self, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for class in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.samples.len())
                .filter(|&i| self.samples[i].label == class)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(0x5711 + class as u64);
            idx.shuffle(&mut rng);
            let n_val = (val_fraction * idx.len() as f64).round() as usize;
            let n_val = n_val.min(idx.len());
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        (train, val)
    }
}

/// Center-crops to a square and resizes to `size` with nearest-neighbor
/// sampling. A same-size input comes back bit-identical.
pub fn crop_resize(img: &Image, size: usize) -> Image {
    if img.height == size && img.width == size {
        return img.clone();
    }
    let side = img.height.min(img.width);
    let top = (img.height - side) / 2;
    let left = (img.width - side) / 2;
    let ch = img.channels();
    let mut out = Image::new(size, size, img.space);
    for y in 0..size {
        let sy = top + ((y as f64 + 0.5) * side as f64 / size as f64) as usize;
        for x in 0..size {
            let sx = left + ((x as f64 + 0.5) * side as f64 / size as f64) as usize;
            for c in 0..ch {
                out.data[(y * size + x) * ch + c] = img.data[(sy * img.width + sx) * ch + c];
            }
        }
    }
    out
}

/// Loads a dataset from a directory with one subdirectory per class,
/// labels assigned by sorted subdirectory name. Images are center-cropped
/// and nearest-resized to `input_size`. Returns the dataset and the
/// number of unreadable files that were skipped.
pub fn ingest_dir(path: impl AsRef<Path>, input_size: usize) -> Result<(Dataset, usize)> {
    let path = path.as_ref();
    let mut class_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::invalid(format!(
            "{} must contain at least 2 class subdirectories, found {}",
            path.display(),
            class_dirs.len()
        )));
    }
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map_or(false, |e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        files.sort();
        let mut loaded = 0usize;
        for f in files {
            match read_ppm(&f) {
                Ok(img) => {
                    samples.push(Sample {
                        image: crop_resize(&img, input_size),
                        label,
                        shape: None,
                    });
                    loaded += 1;
                }
                Err(_) => skipped += 1,
            }
        }
        if loaded == 0 {
            return Err(Error::invalid(format!(
                "class directory {} contains no readable PPM files",
                dir.display()
            )));
        }
    }
    let classes = class_dirs.len();
    Ok((Dataset { samples, classes }, skipped))
}

/// Writes a dataset to `dir` in the layout [`ingest_dir`] reads:
/// `class_<label>/<index>.ppm`.
pub fn export_dir(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut counters = vec![0usize; dataset.classes];
    for s in &dataset.samples {
        let class_dir = dir.join(format!("class_{}", s.label));
        std::fs::create_dir_all(&class_dir)?;
        let name = format!("{:05}.ppm", counters[s.label]);
        counters[s.label] += 1;
        crate::tensorio::write_ppm(class_dir.join(name), &s.image)?;
    }
    Ok(())
}
