//! Hue-histogram entropy of superpixels and sliding windows.
//!
//! All entropies are Shannon entropy in bits over a 256-bin histogram of
//! `floor(hue * 256)`. The headline quantity is the size-weighted mean
//! superpixel entropy and its fraction `M` of the whole-image entropy;
//! the sliding-window entropy at the equivalent window size `T` is the
//! fixed-grid baseline it is compared against.

use std::path::Path;

use crate::error::{Error, Result};
use crate::slic::{segment, Segmentation, SlicParams};
use crate::tensorio::{rgb_to_hue, ColorSpace, Image};

/// One row of the entropy sweep.
#[derive(Debug, Clone)]
pub struct EntropyReport {
    /// Requested superpixel count.
    pub s: usize,
    /// Equivalent square window size.
    pub t: usize,
    /// Size-weighted mean superpixel entropy, bits.
    pub sp_entropy: f64,
    /// Mean sliding-window entropy at `t`, bits.
    pub window_entropy: f64,
    /// Whole-image entropy, bits.
    pub global_entropy: f64,
    /// `sp_entropy / global_entropy` (1 when the global entropy is 0).
    pub m: f64,
    /// Pixel count of the analyzed image, for the compression columns.
    pub pixels: usize,
}

#[inline]
fn hue_bin(h: f32) -> usize {
    ((h * 256.0) as usize).min(255)
}

fn expect_hue(img: &Image) -> Result<()> {
    if img.space != ColorSpace::Hue {
        return Err(Error::invalid("expected a hue image"));
    }
    Ok(())
}

/// Entropy in bits of a histogram given its bin counts and total.
fn histogram_entropy(counts: &[u32], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let mut sum = 0.0; // sum of c*log2(c)
    for &c in counts {
        if c > 1 {
            let c = c as f64;
            sum += c * c.log2();
        }
    }
    (n.log2() - sum / n).max(0.0)
}

/// Shannon entropy (bits) of the 256-bin hue histogram over the given
/// pixel indices.
pub fn region_entropy(hue: &Image, region: &[usize]) -> Result<f64> {
    expect_hue(hue)?;
    if region.is_empty() {
        return Err(Error::invalid("region_entropy requires a non-empty region"));
    }
    let mut counts = [0u32; 256];
    for &p in region {
        if p >= hue.data.len() {
            return Err(Error::invalid(format!("pixel index {p} out of range")));
        }
        counts[hue_bin(hue.data[p])] += 1;
    }
    Ok(histogram_entropy(&counts, region.len()))
}

/// Entropy of the whole image's hue histogram.
pub fn global_entropy(hue: &Image) -> Result<f64> {
    expect_hue(hue)?;
    let mut counts = [0u32; 256];
    for &h in &hue.data {
        counts[hue_bin(h)] += 1;
    }
    Ok(histogram_entropy(&counts, hue.data.len()))
}

/// Size-weighted mean of region entropies: `sum_j (|R_j|/|V|) H(R_j)`.
/// Empty (padding) regions contribute neither entropy nor weight.
pub fn mean_superpixel_entropy(hue: &Image, seg: &Segmentation) -> Result<f64> {
    expect_hue(hue)?;
    if hue.height != seg.height || hue.width != seg.width {
        return Err(Error::invalid("segmentation does not match image dimensions"));
    }
    let s = seg.count();
    let mut counts = vec![0u32; s * 256];
    for (p, &l) in seg.labels.iter().enumerate() {
        counts[l as usize * 256 + hue_bin(hue.data[p])] += 1;
    }
    let total = hue.data.len() as f64;
    let mut acc = 0.0;
    for j in 0..s {
        let size = seg.region_sizes[j];
        if size > 0 {
            let h = histogram_entropy(&counts[j * 256..(j + 1) * 256], size);
            acc += size as f64 / total * h;
        }
    }
    Ok(acc)
}

/// Side length of the square window whose area matches the average
/// non-empty superpixel: `T = round(sqrt(H*W / S_nonempty))`, clamped to
/// the image.
pub fn equivalent_window(seg: &Segmentation) -> usize {
    let nonempty = seg.region_sizes.iter().filter(|&&s| s > 0).count().max(1);
    let t = ((seg.height * seg.width) as f64 / nonempty as f64).sqrt().round() as usize;
    t.clamp(1, seg.height.min(seg.width))
}

/// Mean entropy over all T x T windows at stride 1 (valid placement
/// only). Histograms slide incrementally: moving one column right
/// removes T pixels and adds T, so each window costs O(T) rather than
/// O(T^2).
pub fn sliding_window_entropy(hue: &Image, t: usize) -> Result<f64> {
    expect_hue(hue)?;
    let (h, w) = (hue.height, hue.width);
    if t == 0 || t > h.min(w) {
        return Err(Error::invalid(format!("window size {t} out of range 1..={}", h.min(w))));
    }
    let n = t * t;
    // c*log2(c) lookup for every possible bin count
    let table: Vec<f64> = (0..=n)
        .map(|c| if c > 1 { c as f64 * (c as f64).log2() } else { 0.0 })
        .collect();
    let log_n = (n as f64).log2();
    let inv_n = 1.0 / n as f64;

    let bins: Vec<u16> = hue.data.iter().map(|&v| hue_bin(v) as u16).collect();
    let mut acc = 0.0;
    let mut windows = 0usize;
    let mut counts = vec![0u32; 256];
    for y0 in 0..=(h - t) {
        counts.iter_mut().for_each(|c| *c = 0);
        let mut sum = 0.0; // sum of c*log2(c) for the current window
        for y in y0..y0 + t {
            for x in 0..t {
                let b = bins[y * w + x] as usize;
                sum += table[(counts[b] + 1) as usize] - table[counts[b] as usize];
                counts[b] += 1;
            }
        }
        acc += (log_n - sum * inv_n).max(0.0);
        windows += 1;
        for x0 in 1..=(w - t) {
            for y in y0..y0 + t {
                let out = bins[y * w + x0 - 1] as usize;
                sum += table[(counts[out] - 1) as usize] - table[counts[out] as usize];
                counts[out] -= 1;
                let inn = bins[y * w + x0 + t - 1] as usize;
                sum += table[(counts[inn] + 1) as usize] - table[counts[inn] as usize];
                counts[inn] += 1;
            }
            acc += (log_n - sum * inv_n).max(0.0);
            windows += 1;
        }
    }
    Ok(acc / windows as f64)
}

/// Segments the image at each count in `s_list` and reports superpixel
/// vs. window entropy. `base` supplies the SLIC parameters; its
/// `superpixels` field is overridden per entry.
pub fn entropy_sweep(image: &Image, s_list: &[usize], base: &SlicParams) -> Result<Vec<EntropyReport>> {
    let hue = rgb_to_hue(image)?;
    let global = global_entropy(&hue)?;
    let mut out = Vec::with_capacity(s_list.len());
    for &s in s_list {
        let mut params = base.clone();
        params.superpixels = s;
        let seg = segment(image, &params)?;
        let sp = mean_superpixel_entropy(&hue, &seg)?;
        let t = equivalent_window(&seg);
        let window = sliding_window_entropy(&hue, t)?;
        let m = if global > 0.0 { sp / global } else { 1.0 };
        out.push(EntropyReport {
            s,
            t,
            sp_entropy: sp,
            window_entropy: window,
            global_entropy: global,
            m,
            pixels: image.pixels(),
        });
    }
    Ok(out)
}

/// Formats sweep rows as CSV. The last two columns give the superpixel
/// count as a percentage of the pixel count and of an 8x8 feature grid;
/// both are interpretive conveniences, not inputs to anything.
pub fn report_csv(reports: &[EntropyReport]) -> String {
    let mut s = String::from("S,T,sp_entropy,conv_entropy,global_entropy,M,compression_input_pct,compression_conv_pct\n");
    for r in reports {
        let comp_input = r.s as f64 / r.pixels as f64 * 100.0;
        let comp_conv = r.s as f64 / 64.0 * 100.0;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.s, r.t, r.sp_entropy, r.window_entropy, r.global_entropy, r.m, comp_input, comp_conv
        ));
    }
    s
}

/// Writes [`report_csv`] to a file.
pub fn write_report_csv(path: impl AsRef<Path>, reports: &[EntropyReport]) -> Result<()> {
    std::fs::write(path, report_csv(reports))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hue_image(h: usize, w: usize, hues: &[f32]) -> Image {
        Image::from_data(h, w, ColorSpace::Hue, hues.to_vec()).unwrap()
    }

    fn bin_center(b: usize) -> f32 {
        (b as f32 + 0.5) / 256.0
    }

    #[test]
    fn constant_region_has_zero_entropy() {
        let img = hue_image(2, 2, &[0.3; 4]);
        let h = region_entropy(&img, &[0, 1, 2, 3]).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn uniform_histogram_reaches_eight_bits() {
        let hues: Vec<f32> = (0..256).map(bin_center).collect();
        let img = hue_image(16, 16, &hues);
        let h = region_entropy(&img, &(0..256).collect::<Vec<_>>()).unwrap();
        assert!((h - 8.0).abs() < 1e-12, "uniform 256 bins must give 8 bits, got {h}");
    }

    #[test]
    fn four_pixel_histogram_matches_hand_computation() {
        // bins {0, 0, 128, 200}: -(1/2 log 1/2 + 1/4 log 1/4 + 1/4 log 1/4)
        let img = hue_image(2, 2, &[bin_center(0), bin_center(0), bin_center(128), bin_center(200)]);
        let h = region_entropy(&img, &[0, 1, 2, 3]).unwrap();
        assert!((h - 1.5).abs() < 1e-12, "got {h}");
    }

    #[test]
    fn empty_region_is_rejected() {
        let img = hue_image(1, 1, &[0.0]);
        assert!(region_entropy(&img, &[]).is_err());
    }

    #[test]
    fn single_region_mean_equals_global_entropy() {
        let hues: Vec<f32> = (0..64).map(|i| bin_center(i * 3)).collect();
        let img = hue_image(8, 8, &hues);
        let seg = Segmentation::from_parts(8, 8, vec![0; 64], 1).unwrap();
        let mean = mean_superpixel_entropy(&img, &seg).unwrap();
        let global = global_entropy(&img).unwrap();
        assert!((mean - global).abs() < 1e-12);
    }

    #[test]
    fn singleton_regions_have_zero_mean_entropy() {
        let hues: Vec<f32> = (0..16).map(|i| bin_center(i * 7)).collect();
        let img = hue_image(4, 4, &hues);
        let seg = Segmentation::from_parts(4, 4, (0..16u32).collect(), 16).unwrap();
        assert_eq!(mean_superpixel_entropy(&img, &seg).unwrap(), 0.0);
    }

    #[test]
    fn two_region_split_matches_hand_computation() {
        // regions {bins 0,0} (0 bits) and {bins 5, 9} (1 bit), equal sizes
        let img = hue_image(2, 2, &[bin_center(0), bin_center(0), bin_center(5), bin_center(9)]);
        let seg = Segmentation::from_parts(2, 2, vec![0, 0, 1, 1], 2).unwrap();
        let mean = mean_superpixel_entropy(&img, &seg).unwrap();
        assert!((mean - 0.5).abs() < 1e-12, "want 0.5*0 + 0.5*1, got {mean}");
    }

    #[test]
    fn padded_regions_are_excluded_from_the_mean() {
        let img = hue_image(2, 2, &[bin_center(0), bin_center(0), bin_center(5), bin_center(9)]);
        let seg = Segmentation::from_parts(2, 2, vec![0, 0, 1, 1], 6).unwrap();
        let padded = mean_superpixel_entropy(&img, &seg).unwrap();
        assert!((padded - 0.5).abs() < 1e-12, "padding must not change the mean");
    }

    #[test]
    fn equivalent_window_matches_reference_rows() {
        // (S_nonempty, expected T) for a 256x256 image
        for (s, want) in [(1usize, 256usize), (13, 71), (24, 52), (145, 21), (425, 12), (894, 9), (7185, 3)] {
            let labels: Vec<u32> = (0..65536).map(|i| (i % s) as u32).collect();
            let seg = Segmentation::from_parts(256, 256, labels, s).unwrap();
            assert_eq!(equivalent_window(&seg), want, "S={s}");
        }
    }

    #[test]
    fn window_entropy_degenerate_cases() {
        let hues: Vec<f32> = (0..36).map(|i| bin_center((i * 11) % 256)).collect();
        let img = hue_image(6, 6, &hues);
        assert_eq!(sliding_window_entropy(&img, 1).unwrap(), 0.0);
        let flat = hue_image(6, 6, &[0.7; 36]);
        assert_eq!(sliding_window_entropy(&flat, 4).unwrap(), 0.0);
        assert!(sliding_window_entropy(&img, 0).is_err());
        assert!(sliding_window_entropy(&img, 7).is_err());
    }

    #[test]
    fn window_entropy_matches_enumerated_windows() {
        // 3x3 image with bins [0,0,1 / 2,2,3 / 0,3,3], T=2:
        //   {0,0,2,2} -> 1 bit          {0,1,2,3} -> 2 bits
        //   {2,2,0,3} -> 1.5 bits       {2,3,3,3} -> 2 - 0.75*log2(3)
        let bins = [0, 0, 1, 2, 2, 3, 0, 3, 3];
        let hues: Vec<f32> = bins.iter().map(|&b| bin_center(b)).collect();
        let img = hue_image(3, 3, &hues);
        let want = (1.0 + 2.0 + 1.5 + (2.0 - 0.75 * 3.0f64.log2())) / 4.0;
        let got = sliding_window_entropy(&img, 2).unwrap();
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn incremental_windows_match_direct_histograms() {
        // brute-force every window on a random image, several sizes
        let mut state = 99u64;
        let hues: Vec<f32> = (0..20 * 17)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                bin_center(((state >> 48) & 0xff) as usize)
            })
            .collect();
        let img = hue_image(20, 17, &hues);
        for t in [2usize, 3, 5, 8] {
            let mut acc = 0.0;
            let mut cnt = 0;
            for y in 0..=(20 - t) {
                for x in 0..=(17 - t) {
                    let mut idx = Vec::new();
                    for yy in y..y + t {
                        for xx in x..x + t {
                            idx.push(yy * 17 + xx);
                        }
                    }
                    acc += region_entropy(&img, &idx).unwrap();
                    cnt += 1;
                }
            }
            let want = acc / cnt as f64;
            let got = sliding_window_entropy(&img, t).unwrap();
            assert!((got - want).abs() < 1e-10, "T={t}: got {got}, want {want}");
        }
    }

    #[test]
    fn sweep_on_single_region_reports_m_equal_one() {
        let mut img = Image::new(8, 8, ColorSpace::Rgb8);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 53) % 256) as f32;
        }
        let reports = entropy_sweep(&img, &[1], &SlicParams::new(1)).unwrap();
        assert_eq!(reports.len(), 1);
        let r = &reports[0];
        assert_eq!((r.s, r.t), (1, 8));
        assert!((r.m - 1.0).abs() < 1e-12);
        assert!((r.window_entropy - r.global_entropy).abs() < 1e-12);
        let csv = report_csv(&reports);
        assert!(csv.starts_with("S,T,sp_entropy,conv_entropy,global_entropy,M,"));
        assert_eq!(csv.lines().count(), 2);
    }

    /// Splitting one region in two must never increase the weighted mean.
    #[test]
    fn refinement_never_increases_mean_entropy() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as usize
        };
        for _trial in 0..200 {
            let hues: Vec<f32> = (0..64).map(|_| bin_center(next() % 256)).collect();
            let img = hue_image(8, 8, &hues);
            let k = 1 + next() % 5;
            let labels: Vec<u32> = (0..64).map(|_| (next() % k) as u32).collect();
            let seg = Segmentation::from_parts(8, 8, labels.clone(), k).unwrap();
            let before = mean_superpixel_entropy(&img, &seg).unwrap();

            // split a random region: members chosen by coin flip join a new label
            let victim = (next() % k) as u32;
            let mut refined = labels;
            let mut moved = false;
            for l in refined.iter_mut() {
                if *l == victim && next() % 2 == 0 {
                    *l = k as u32;
                    moved = true;
                }
            }
            if !moved {
                continue;
            }
            let seg2 = Segmentation::from_parts(8, 8, refined, k + 1).unwrap();
            let after = mean_superpixel_entropy(&img, &seg2).unwrap();
            assert!(
                after <= before + 1e-12,
                "refinement increased mean entropy: {before} -> {after}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn entropy_bound_holds_for_random_partitions(
            h in 2usize..10,
            w in 2usize..10,
            k in 1usize..8,
            seed in 0u64..10_000,
        ) {
            let mut state = seed.wrapping_add(7);
            let mut next = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 33) as usize
            };
            let hues: Vec<f32> = (0..h * w).map(|_| bin_center(next() % 256)).collect();
            let img = hue_image(h, w, &hues);
            let labels: Vec<u32> = (0..h * w).map(|_| (next() % k) as u32).collect();
            let seg = Segmentation::from_parts(h, w, labels, k).unwrap();
            let mean = mean_superpixel_entropy(&img, &seg).unwrap();
            let global = global_entropy(&img).unwrap();
            prop_assert!(mean >= 0.0);
            prop_assert!(mean <= global + 1e-9, "mean {mean} exceeds global {global}");
        }
    }
}
