//! Per-superpixel contribution scores and their rendering as heatmaps.
//!
//! A superpixel's contribution to a class is the scalar projection of its
//! prediction vector onto the class capsule's direction. Painting those
//! scores back over the segmentation shows which regions drove a
//! decision, at superpixel resolution, without any pixel-level labels.

use crate::capsroute::{class_probability, CapsuleState};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::slic::Segmentation;
use crate::sppool::unpool;
use crate::tensorio::{ColorSpace, Image};

/// Scalar projections z of every (superpixel, class) pair, with the
/// flags needed to interpret them: rows excluded by the input mask and
/// classes whose capsule collapsed to zero length.
#[derive(Debug, Clone)]
pub struct ContributionMap<T: Real> {
    pub z: Vec<T>,
    pub inputs: usize,
    pub classes: usize,
    pub mask: Vec<bool>,
    pub degenerate: Vec<bool>,
}

impl<T: Real> ContributionMap<T> {
    pub fn at(&self, i: usize, j: usize) -> T {
        self.z[i * self.classes + j]
    }

    /// One class's scores across all superpixels.
    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.inputs).map(|i| self.at(i, j)).collect()
    }
}

/// z_ij = û_ij · v_j / ‖v_j‖. Masked rows score zero; classes with a
/// zero-length capsule get a zero column and a degeneracy flag instead
/// of an error, since early training states produce them.
pub fn contribution<T: Real>(state: &CapsuleState<T>) -> ContributionMap<T> {
    let (s_n, j_n, k1) = (state.inputs, state.classes, state.out_dim);
    let v = state.outputs();
    let norms = class_probability(v, j_n, k1);
    let degenerate: Vec<bool> = norms.iter().map(|&n| n == T::zero()).collect();
    let mut z = vec![T::zero(); s_n * j_n];
    for i in 0..s_n {
        if !state.mask[i] {
            continue;
        }
        for j in 0..j_n {
            if degenerate[j] {
                continue;
            }
            let pred = state.prediction(i, j);
            let vj = &v[j * k1..(j + 1) * k1];
            let mut dot = T::zero();
            for q in 0..k1 {
                dot += pred[q] * vj[q];
            }
            z[i * j_n + j] = dot / norms[j];
        }
    }
    ContributionMap {
        z,
        inputs: s_n,
        classes: j_n,
        mask: state.mask.clone(),
        degenerate,
    }
}

/// A rendered heatmap plus whether the scores were flat (degenerate or
/// all equal), in which case the image is uniform mid-gray.
#[derive(Debug, Clone)]
pub struct RenderedContribution {
    pub heatmap: Image,
    pub flat: bool,
}

/// Min-max normalizes one class column over the unmasked superpixels to
/// [0, 255] and paints it over the segmentation.
pub fn render_contribution<T: Real>(
    map: &ContributionMap<T>,
    class: usize,
    seg: &Segmentation,
) -> Result<RenderedContribution> {
    if class >= map.classes {
        return Err(Error::invalid(format!(
            "class {class} out of range for {} classes",
            map.classes
        )));
    }
    if seg.count() != map.inputs {
        return Err(Error::invalid(format!(
            "segmentation has {} regions, contributions have {}",
            seg.count(),
            map.inputs
        )));
    }
    let column = map.column(class);
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for (i, &value) in column.iter().enumerate() {
        if map.mask[i] {
            lo = lo.min(value);
            hi = hi.max(value);
        }
    }
    let flat = map.degenerate[class] || !(hi > lo);
    let values: Vec<T> = if flat {
        vec![T::from_f64(128.0); map.inputs]
    } else {
        let span = hi - lo;
        column
            .iter()
            .enumerate()
            .map(|(i, &value)| {
                if map.mask[i] {
                    T::from_f64((((value - lo) / span).to_f64() * 255.0).round())
                } else {
                    T::zero()
                }
            })
            .collect()
    };
    let heatmap = unpool(&values, seg)?;
    Ok(RenderedContribution { heatmap, flat })
}

/// Blends a grayscale heatmap over an RGB image: 0.6 heat, 0.4 image.
pub fn overlay(heatmap: &Image, base: &Image) -> Result<Image> {
    if heatmap.space != ColorSpace::Gray || base.space != ColorSpace::Rgb8 {
        return Err(Error::invalid("overlay needs a gray heatmap and an RGB base"));
    }
    if heatmap.height != base.height || heatmap.width != base.width {
        return Err(Error::invalid("overlay dimensions do not match"));
    }
    let mut out = Image::new(base.height, base.width, ColorSpace::Rgb8);
    for p in 0..heatmap.data.len() {
        let h = heatmap.data[p];
        for ch in 0..3 {
            out.data[p * 3 + ch] = (0.6 * h + 0.4 * base.data[p * 3 + ch]).round();
        }
    }
    Ok(out)
}

/// Raw scores as CSV: one row per superpixel, one column per class, plus
/// the validity flag. Exported alongside the normalized images so
/// negative projections stay inspectable.
pub fn contribution_csv<T: Real>(map: &ContributionMap<T>) -> String {
    let mut out = String::from("superpixel");
    for j in 0..map.classes {
        out.push_str(&format!(",class_{j}"));
    }
    out.push_str(",masked\n");
    for i in 0..map.inputs {
        out.push_str(&format!("{i}"));
        for j in 0..map.classes {
            out.push_str(&format!(",{}", map.at(i, j).to_f64()));
        }
        out.push_str(if map.mask[i] { ",0\n" } else { ",1\n" });
    }
    out
}
