//! Pooling of convolutional feature maps into per-superpixel vectors.
//!
//! The feature grid is coarser than the image the segmentation lives on,
//! so each feature cell stands for a square tile of pixels. A region's
//! vector is the mean of the upscaled map over the region, computed
//! without materializing the upscale: every cell contributes with weight
//! `|region ∩ tile| / |region|`. The backward pass is the exact adjoint
//! of that linear map.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::slic::Segmentation;
use crate::tensorio::{ColorSpace, Image};

/// Correspondence between a feature grid and the image grid it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileAssociation {
    /// Edge length of the pixel tile behind one feature cell.
    pub tile: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub image_h: usize,
    pub image_w: usize,
}

/// Computes the tile association for a feature grid over an image grid.
/// The image must be an exact multiple of the feature grid with the same
/// ratio on both axes; callers pad the image beforehand when it is not.
pub fn tile_map(
    feat_h: usize,
    feat_w: usize,
    image_h: usize,
    image_w: usize,
) -> Result<TileAssociation> {
    if feat_h == 0 || feat_w == 0 {
        return Err(Error::invalid("feature grid must be non-empty"));
    }
    if image_h % feat_h != 0 || image_w % feat_w != 0 {
        return Err(Error::invalid(format!(
            "image {image_h}x{image_w} is not an integer multiple of feature grid {feat_h}x{feat_w}"
        )));
    }
    let (ty, tx) = (image_h / feat_h, image_w / feat_w);
    if ty != tx {
        return Err(Error::invalid(format!(
            "anisotropic tile {ty}x{tx}; pad the image to a common ratio"
        )));
    }
    Ok(TileAssociation {
        tile: ty,
        feat_h,
        feat_w,
        image_h,
        image_w,
    })
}

impl TileAssociation {
    /// Feature cell index covering pixel (y, x).
    pub fn cell_of(&self, y: usize, x: usize) -> usize {
        (y / self.tile) * self.feat_w + x / self.tile
    }
}

/// Dense feature map in row-major layout with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Real> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize) -> FeatureMap<T> {
        FeatureMap {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<T>) -> FeatureMap<T> {
        assert_eq!(data.len(), height * width * channels);
        FeatureMap {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel slice of one cell.
    pub fn cell(&self, index: usize) -> &[T] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }
}

/// Per-superpixel feature vectors. Rows of padded (empty) regions are
/// zero and flagged out in `mask`; the image dimensions record which
/// segmentation the rows were pooled over.
#[derive(Debug, Clone, PartialEq)]
pub struct SpFeatures<T: Real> {
    pub values: Vec<T>,
    pub regions: usize,
    pub channels: usize,
    pub mask: Vec<bool>,
    pub image_h: usize,
    pub image_w: usize,
}

impl<T: Real> SpFeatures<T> {
    pub fn zeros(regions: usize, channels: usize, image_h: usize, image_w: usize) -> SpFeatures<T> {
        SpFeatures {
            values: vec![T::zero(); regions * channels],
            regions,
            channels,
            mask: vec![false; regions],
            image_h,
            image_w,
        }
    }

    pub fn row(&self, j: usize) -> &[T] {
        &self.values[j * self.channels..(j + 1) * self.channels]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [T] {
        &mut self.values[j * self.channels..(j + 1) * self.channels]
    }
}

/// Precomputed pooling weights for one segmentation and tile association.
/// Entry `(cell, count)` of region `j` says `count` of the region's pixels
/// fall in feature cell `cell`; dividing by the region size turns counts
/// into the pooling weights. Building the plan once and reusing it across
/// forward and backward passes keeps repeated pooling over the same
/// segmentation cheap.
#[derive(Debug, Clone)]
pub struct PoolPlan {
    offsets: Vec<usize>,
    entries: Vec<(u32, u32)>,
    sizes: Vec<usize>,
    pub assoc: TileAssociation,
}

impl PoolPlan {
    pub fn new(seg: &Segmentation, assoc: &TileAssociation) -> Result<PoolPlan> {
        if seg.height != assoc.image_h || seg.width != assoc.image_w {
            return Err(Error::invalid(format!(
                "segmentation {}x{} does not cover image {}x{}",
                seg.height, seg.width, assoc.image_h, assoc.image_w
            )));
        }
        let s = seg.count();
        let cells = assoc.feat_h * assoc.feat_w;
        // counts[j][i] built sparsely: pixels arrive in row-major order,
        // so per-region cell indices come in runs
        let mut per_region: Vec<Vec<(u32, u32)>> = vec![Vec::new(); s];
        for y in 0..seg.height {
            for x in 0..seg.width {
                let j = seg.labels[y * seg.width + x] as usize;
                let cell = assoc.cell_of(y, x) as u32;
                let row = &mut per_region[j];
                match row.iter_mut().find(|e| e.0 == cell) {
                    Some(e) => e.1 += 1,
                    None => row.push((cell, 1)),
                }
            }
        }
        let mut offsets = Vec::with_capacity(s + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for row in &mut per_region {
            row.sort_unstable_by_key(|e| e.0);
            entries.extend_from_slice(row);
            offsets.push(entries.len());
        }
        let sizes = seg.region_sizes.clone();
        debug_assert!(entries.iter().all(|e| (e.0 as usize) < cells));
        Ok(PoolPlan {
            offsets,
            entries,
            sizes,
            assoc: *assoc,
        })
    }

    pub fn regions(&self) -> usize {
        self.sizes.len()
    }

    /// Cells and pixel counts of one region, in cell order.
    pub fn region_entries(&self, j: usize) -> &[(u32, u32)] {
        &self.entries[self.offsets[j]..self.offsets[j + 1]]
    }

    /// Pixel count of one region.
    pub fn region_size(&self, j: usize) -> usize {
        self.sizes[j]
    }

    fn check_features<T: Real>(&self, features: &FeatureMap<T>) -> Result<()> {
        if features.height != self.assoc.feat_h || features.width != self.assoc.feat_w {
            return Err(Error::invalid(format!(
                "feature map {}x{} does not match plan grid {}x{}",
                features.height, features.width, self.assoc.feat_h, self.assoc.feat_w
            )));
        }
        Ok(())
    }

    /// Mean of the tile-upscaled feature map over every region.
    pub fn forward<T: Real>(&self, features: &FeatureMap<T>) -> Result<SpFeatures<T>> {
        self.check_features(features)?;
        let k = features.channels;
        let s = self.regions();
        let mut out = SpFeatures::zeros(s, k, self.assoc.image_h, self.assoc.image_w);
        for j in 0..s {
            if self.sizes[j] == 0 {
                continue;
            }
            out.mask[j] = true;
            let inv = T::one() / T::from_f64(self.sizes[j] as f64);
            let row = &mut out.values[j * k..(j + 1) * k];
            for &(cell, count) in self.region_entries(j) {
                let w = T::from_f64(count as f64) * inv;
                let src = features.cell(cell as usize);
                for c in 0..k {
                    row[c] += w * src[c];
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`PoolPlan::forward`]: routes per-region gradients back
    /// onto the feature grid with the same weights.
    pub fn backward<T: Real>(&self, grad: &SpFeatures<T>) -> Result<FeatureMap<T>> {
        if grad.regions != self.regions() {
            return Err(Error::invalid(format!(
                "gradient has {} rows, plan has {} regions",
                grad.regions,
                self.regions()
            )));
        }
        let k = grad.channels;
        let mut out = FeatureMap::new(self.assoc.feat_h, self.assoc.feat_w, k);
        for j in 0..self.regions() {
            if self.sizes[j] == 0 {
                continue;
            }
            let inv = T::one() / T::from_f64(self.sizes[j] as f64);
            let row = grad.row(j);
            for &(cell, count) in self.region_entries(j) {
                let w = T::from_f64(count as f64) * inv;
                let dst =
                    &mut out.data[cell as usize * k..(cell as usize + 1) * k];
                for c in 0..k {
                    dst[c] += w * row[c];
                }
            }
        }
        Ok(out)
    }
}

/// One-shot pooling without keeping the plan around.
pub fn pool_forward<T: Real>(
    features: &FeatureMap<T>,
    seg: &Segmentation,
    assoc: &TileAssociation,
) -> Result<SpFeatures<T>> {
    PoolPlan::new(seg, assoc)?.forward(features)
}

/// One-shot adjoint of [`pool_forward`].
pub fn pool_backward<T: Real>(
    grad: &SpFeatures<T>,
    seg: &Segmentation,
    assoc: &TileAssociation,
) -> Result<FeatureMap<T>> {
    PoolPlan::new(seg, assoc)?.backward(grad)
}

/// Paints one value per region back onto the pixel grid.
pub fn unpool<T: Real>(values: &[T], seg: &Segmentation) -> Result<Image> {
    if values.len() != seg.count() {
        return Err(Error::invalid(format!(
            "{} values for {} regions",
            values.len(),
            seg.count()
        )));
    }
    let mut img = Image::new(seg.height, seg.width, ColorSpace::Gray);
    for (p, &label) in seg.labels.iter().enumerate() {
        img.data[p] = values[label as usize].to_f32();
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg_from_labels(height: usize, width: usize, labels: Vec<u32>, count: usize) -> Segmentation {
        Segmentation::from_parts(height, width, labels, count).unwrap()
    }

    /// Reference pooling: upscale the map tile by tile, then take plain
    /// per-region means pixel by pixel.
    fn brute_force<T: Real>(
        features: &FeatureMap<T>,
        seg: &Segmentation,
        assoc: &TileAssociation,
    ) -> Vec<T> {
        let k = features.channels;
        let mut sums = vec![T::zero(); seg.count() * k];
        for y in 0..seg.height {
            for x in 0..seg.width {
                let j = seg.labels[y * seg.width + x] as usize;
                let src = features.cell(assoc.cell_of(y, x));
                for c in 0..k {
                    sums[j * k + c] += src[c];
                }
            }
        }
        for j in 0..seg.count() {
            let n = seg.region_sizes[j];
            if n > 0 {
                let inv = T::one() / T::from_f64(n as f64);
                for c in 0..k {
                    sums[j * k + c] *= inv;
                }
            }
        }
        sums
    }

    #[test]
    fn tile_map_examples() {
        let a = tile_map(8, 8, 64, 64).unwrap();
        assert_eq!(a.tile, 8);
        let id = tile_map(5, 7, 5, 7).unwrap();
        assert_eq!(id.tile, 1);
        assert_eq!(id.cell_of(3, 4), 3 * 7 + 4);
        assert!(tile_map(8, 8, 65, 64).is_err());
        assert!(tile_map(8, 8, 64, 32).is_err());
        assert!(tile_map(0, 8, 64, 64).is_err());
    }

    #[test]
    fn single_region_means_every_channel() {
        let data: Vec<f64> = (0..4 * 4 * 2).map(|i| i as f64).collect();
        let f = FeatureMap::from_data(4, 4, 2, data);
        let seg = seg_from_labels(4, 4, vec![0; 16], 1);
        let assoc = tile_map(4, 4, 4, 4).unwrap();
        let y = pool_forward(&f, &seg, &assoc).unwrap();
        // channel 0 holds even numbers 0..32, channel 1 odd
        assert_eq!(y.row(0), &[15.0, 16.0]);
        assert!(y.mask[0]);
    }

    #[test]
    fn singleton_regions_reshuffle_identity() {
        let data: Vec<f64> = (0..3 * 3).map(|i| (i * i) as f64).collect();
        let f = FeatureMap::from_data(3, 3, 1, data.clone());
        let labels: Vec<u32> = (0..9).collect();
        let seg = seg_from_labels(3, 3, labels, 9);
        let assoc = tile_map(3, 3, 3, 3).unwrap();
        let y = pool_forward(&f, &seg, &assoc).unwrap();
        assert_eq!(y.values, data);
    }

    #[test]
    fn tile_weights_counted_by_hand() {
        // 4x4 image over 2x2 features (t=2); region 0 is the top row plus
        // pixel (1,0), region 1 the rest. Intersections with the four
        // tiles: R0 = {3 of tile0, 2 of tile1}, R1 = {1, 2, 4, 4}.
        let labels = vec![
            0, 0, 0, 0, //
            0, 1, 1, 1, //
            1, 1, 1, 1, //
            1, 1, 1, 1,
        ];
        let seg = seg_from_labels(4, 4, labels, 2);
        let assoc = tile_map(2, 2, 4, 4).unwrap();
        let plan = PoolPlan::new(&seg, &assoc).unwrap();
        assert_eq!(plan.region_entries(0), &[(0, 3), (1, 2)]);
        assert_eq!(plan.region_entries(1), &[(0, 1), (1, 2), (2, 4), (3, 4)]);
        let f = FeatureMap::from_data(2, 2, 1, vec![8.0f64, 4.0, -2.0, 6.0]);
        let y = plan.forward(&f).unwrap();
        assert_eq!(y.row(0), &[(3.0 * 8.0 + 2.0 * 4.0) / 5.0]);
        assert_eq!(y.row(1), &[(8.0 + 2.0 * 4.0 + 4.0 * -2.0 + 4.0 * 6.0) / 11.0]);
        let oracle = brute_force(&f, &seg, &assoc);
        for (a, b) in y.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_zero_is_zero_and_mean_adjoint_spreads() {
        let seg = seg_from_labels(2, 2, vec![0; 4], 1);
        let assoc = tile_map(2, 2, 2, 2).unwrap();
        let plan = PoolPlan::new(&seg, &assoc).unwrap();
        let mut g: SpFeatures<f64> = SpFeatures::zeros(1, 1, 2, 2);
        let zero = plan.backward(&g).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        g.values[0] = 1.0;
        g.mask[0] = true;
        let spread = plan.backward(&g).unwrap();
        assert_eq!(spread.data, vec![0.25; 4]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let assoc = tile_map(3, 3, 6, 6).unwrap();
        let labels: Vec<u32> = (0..36).map(|_| rng.gen_range(0..4)).collect();
        let seg = seg_from_labels(6, 6, labels, 4);
        let plan = PoolPlan::new(&seg, &assoc).unwrap();
        let k = 2;
        let data: Vec<f64> = (0..9 * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = FeatureMap::from_data(3, 3, k, data.clone());
        let mut g = plan.forward(&f).unwrap();
        for v in g.values.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let analytic = plan.backward(&g).unwrap();
        let loss = |d: &[f64]| -> f64 {
            let fm = FeatureMap::from_data(3, 3, k, d.to_vec());
            let y = plan.forward(&fm).unwrap();
            y.values.iter().zip(&g.values).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in 0..data.len() {
            let mut plus = data.clone();
            let mut minus = data.clone();
            plus[i] += eps;
            minus[i] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let a = analytic.data[i];
            let denom = fd.abs().max(a.abs()).max(1e-9);
            assert!(
                (fd - a).abs() / denom < 1e-6,
                "cell {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn unpool_paints_regions() {
        let seg = seg_from_labels(2, 3, vec![0, 0, 1, 1, 2, 2], 3);
        let constant = unpool(&[5.0f64, 5.0, 5.0], &seg).unwrap();
        assert!(constant.data.iter().all(|&v| v == 5.0));
        let ids = unpool(&[0.0f64, 1.0, 2.0], &seg).unwrap();
        let painted: Vec<u32> = ids.data.iter().map(|&v| v as u32).collect();
        assert_eq!(painted, seg.labels);
        assert!(unpool(&[1.0f64; 2], &seg).is_err());
    }

    #[test]
    fn pool_then_unpool_preserves_region_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 6;
        let w = 6;
        let labels: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..5)).collect();
        let seg = seg_from_labels(h, w, labels, 5);
        let assoc = tile_map(h, w, h, w).unwrap();
        let data: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let f = FeatureMap::from_data(h, w, 1, data.clone());
        let pooled = pool_forward(&f, &seg, &assoc).unwrap();
        let img = unpool(&pooled.values, &seg).unwrap();
        for j in 0..seg.count() {
            let members: Vec<usize> = (0..h * w)
                .filter(|&p| seg.labels[p] == j as u32)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean: f64 = members.iter().map(|&p| data[p]).sum::<f64>() / members.len() as f64;
            for &p in &members {
                assert!((img.data[p] as f64 - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn padded_regions_stay_masked_and_inert() {
        // region 2 is empty: forward must zero-mask it, backward must
        // ignore whatever sits in its gradient row
        let seg = seg_from_labels(2, 2, vec![0, 0, 1, 1], 3);
        let assoc = tile_map(2, 2, 2, 2).unwrap();
        let plan = PoolPlan::new(&seg, &assoc).unwrap();
        let f = FeatureMap::from_data(2, 2, 1, vec![1.0f64, 2.0, 3.0, 4.0]);
        let y = plan.forward(&f).unwrap();
        assert_eq!(y.mask, vec![true, true, false]);
        assert_eq!(y.row(2), &[0.0]);
        let mut g = y.clone();
        g.values = vec![0.0, 0.0, 7.0];
        let back = plan.backward(&g).unwrap();
        assert!(back.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let seg = seg_from_labels(4, 4, vec![0; 16], 1);
        let assoc = tile_map(2, 2, 4, 4).unwrap();
        let plan = PoolPlan::new(&seg, &assoc).unwrap();
        let f: FeatureMap<f64> = FeatureMap::new(3, 3, 1);
        assert!(plan.forward(&f).is_err());
        let wrong_seg = seg_from_labels(2, 2, vec![0; 4], 1);
        assert!(PoolPlan::new(&wrong_seg, &assoc).is_err());
        let g: SpFeatures<f64> = SpFeatures::zeros(2, 1, 4, 4);
        assert!(plan.backward(&g).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn weights_partition_each_region(
            seed in 0u64..1000,
            fh in 1usize..5,
            fw in 1usize..5,
            t in 1usize..4,
            s in 1usize..7,
        ) {
            let (h, w) = (fh * t, fw * t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..s as u32)).collect();
            let seg = seg_from_labels(h, w, labels, s);
            let assoc = tile_map(fh, fw, h, w).unwrap();
            let plan = PoolPlan::new(&seg, &assoc).unwrap();
            for j in 0..s {
                let total: u32 = plan.region_entries(j).iter().map(|e| e.1).sum();
                prop_assert_eq!(total as usize, seg.region_sizes[j]);
            }
        }

        #[test]
        fn forward_matches_upscaled_means_and_adjoint_holds(
            seed in 0u64..1000,
            fh in 1usize..5,
            fw in 1usize..5,
            t in 1usize..4,
            s in 1usize..7,
            k in 1usize..4,
        ) {
            let (h, w) = (fh * t, fw * t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..s as u32)).collect();
            let seg = seg_from_labels(h, w, labels, s);
            let assoc = tile_map(fh, fw, h, w).unwrap();
            let plan = PoolPlan::new(&seg, &assoc).unwrap();

            // integer-valued features keep both summation orders exact
            let data: Vec<f64> = (0..fh * fw * k).map(|_| rng.gen_range(-8i32..9) as f64).collect();
            let f = FeatureMap::from_data(fh, fw, k, data);
            let y = plan.forward(&f).unwrap();
            let oracle = brute_force(&f, &seg, &assoc);
            for j in 0..s {
                for c in 0..k {
                    let got = y.values[j * k + c];
                    let want = oracle[j * k + c];
                    prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
                }
            }
            for (j, &m) in y.mask.iter().enumerate() {
                prop_assert_eq!(m, seg.region_sizes[j] > 0);
                if !m {
                    prop_assert!(y.row(j).iter().all(|&v| v == 0.0));
                }
            }

            // <forward(X), G> = <X, backward(G)>
            let mut g = SpFeatures::zeros(s, k, h, w);
            g.mask.clone_from(&y.mask);
            for v in g.values.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let back = plan.backward(&g).unwrap();
            let lhs: f64 = y.values.iter().zip(&g.values).map(|(a, b)| a * b).sum();
            let rhs: f64 = f.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
            let denom = lhs.abs().max(rhs.abs()).max(1e-12);
            prop_assert!((lhs - rhs).abs() / denom < 1e-10);
        }

        #[test]
        fn pooling_is_linear(
            seed in 0u64..1000,
            fh in 1usize..4,
            fw in 1usize..4,
            s in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<u32> = (0..fh * fw).map(|_| rng.gen_range(0..s as u32)).collect();
            let seg = seg_from_labels(fh, fw, labels, s);
            let assoc = tile_map(fh, fw, fh, fw).unwrap();
            let plan = PoolPlan::new(&seg, &assoc).unwrap();
            let a: Vec<f64> = (0..fh * fw).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..fh * fw).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (alpha, beta) = (2.0, -3.0);
            let mixed: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
            let ya = plan.forward(&FeatureMap::from_data(fh, fw, 1, a)).unwrap();
            let yb = plan.forward(&FeatureMap::from_data(fh, fw, 1, b)).unwrap();
            let ym = plan.forward(&FeatureMap::from_data(fh, fw, 1, mixed)).unwrap();
            for j in 0..s {
                let want = alpha * ya.values[j] + beta * yb.values[j];
                prop_assert!((ym.values[j] - want).abs() < 1e-9);
            }
        }
    }
}
