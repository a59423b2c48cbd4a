//! Synthetic data: the 4-class shape dataset and textured mosaic images.
//!
//! Shapes are rasterized from analytic geometry so tests (and the
//! explainability check) get exact foreground masks and areas for free.
//! The mosaic generator produces multi-scale hue structure with a
//! hue-histogram guarantee: every pixel of a mosaic cell lands in the
//! cell's hue bin, so histogram mixing only ever comes from region
//! boundaries, not from texture shading.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::dataset::{Dataset, Sample};
use crate::tensorio::{rgb_pixel_to_hue, ColorSpace, Image};

/// The four synthetic classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    FilledCircle,
    SquareOutline,
    Triangle,
    DotCluster,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::FilledCircle,
        ShapeKind::SquareOutline,
        ShapeKind::Triangle,
        ShapeKind::DotCluster,
    ];

    pub fn label(self) -> usize {
        match self {
            ShapeKind::FilledCircle => 0,
            ShapeKind::SquareOutline => 1,
            ShapeKind::Triangle => 2,
            ShapeKind::DotCluster => 3,
        }
    }
}

/// Analytic description of one rendered shape.
#[derive(Debug, Clone)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Center in pixel coordinates.
    pub cy: f64,
    pub cx: f64,
    /// Primary size: circle/dot radius, square half-side, triangle half-height.
    pub size: f64,
    /// Outline thickness (square) or dot offset (cluster); unused otherwise.
    pub extra: f64,
    /// Foreground hue in [0, 1).
    pub hue: f32,
}

impl ShapeSpec {
    /// Whether the point (continuous coordinates) is inside the shape.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.kind {
            ShapeKind::FilledCircle => dy * dy + dx * dx <= self.size * self.size,
            ShapeKind::SquareOutline => {
                let half = self.size;
                let inner = half - self.extra;
                dy.abs() <= half && dx.abs() <= half && !(dy.abs() < inner && dx.abs() < inner)
            }
            ShapeKind::Triangle => {
                // isoceles triangle: apex up, base below the center
                let h = 2.0 * self.size;
                let b = 2.2 * self.size;
                let apex = (-self.size, 0.0);
                let left = (self.size, -b / 2.0);
                let right = (self.size, b / 2.0);
                let _ = h;
                let sign = |a: (f64, f64), b: (f64, f64)| -> f64 {
                    (b.0 - a.0) * (dx - a.1) - (b.1 - a.1) * (dy - a.0)
                };
                let d1 = sign(apex, left);
                let d2 = sign(left, right);
                let d3 = sign(right, apex);
                (d1 <= 0.0 && d2 <= 0.0 && d3 <= 0.0) || (d1 >= 0.0 && d2 >= 0.0 && d3 >= 0.0)
            }
            ShapeKind::DotCluster => {
                let d = self.extra;
                let r2 = self.size * self.size;
                for (oy, ox) in [(-d, -d), (-d, d), (d, -d), (d, d)] {
                    let (ddy, ddx) = (dy - oy, dx - ox);
                    if ddy * ddy + ddx * ddx <= r2 {
                        return true;
                    }
                }
                false
            }
        }
    }

    /// Exact area of the continuous shape, in pixels.
    pub fn analytic_area(&self) -> f64 {
        match self.kind {
            ShapeKind::FilledCircle => std::f64::consts::PI * self.size * self.size,
            ShapeKind::SquareOutline => {
                let outer = 2.0 * self.size;
                let inner = 2.0 * (self.size - self.extra);
                outer * outer - inner * inner
            }
            ShapeKind::Triangle => {
                let h = 2.0 * self.size;
                let b = 2.2 * self.size;
                b * h / 2.0
            }
            ShapeKind::DotCluster => 4.0 * std::f64::consts::PI * self.size * self.size,
        }
    }

    /// Rasterized foreground mask, sampled at pixel centers.
    pub fn mask(&self, height: usize, width: usize) -> Vec<bool> {
        let mut m = vec![false; height * width];
        for y in 0..height {
            for x in 0..width {
                m[y * width + x] = self.contains(y as f64 + 0.5, x as f64 + 0.5);
            }
        }
        m
    }
}

// ---------------------------------------------------------------------------
// value noise
// ---------------------------------------------------------------------------

/// Smoothstep-interpolated lattice noise in [0, 1], `octaves` layers each
/// halving the cell size and the amplitude.
pub fn value_noise(height: usize, width: usize, cell: usize, octaves: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; height * width];
    let mut amplitude = 1.0f32;
    let mut total = 0.0f32;
    let mut cell = cell.max(1);
    for _ in 0..octaves {
        let gy = height / cell + 2;
        let gx = width / cell + 2;
        let lattice: Vec<f32> = (0..gy * gx).map(|_| rng.gen::<f32>()).collect();
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        for y in 0..height {
            let fy = y as f32 / cell as f32;
            let iy = fy as usize;
            let ty = smooth(fy - iy as f32);
            for x in 0..width {
                let fx = x as f32 / cell as f32;
                let ix = fx as usize;
                let tx = smooth(fx - ix as f32);
                let v00 = lattice[iy * gx + ix];
                let v01 = lattice[iy * gx + ix + 1];
                let v10 = lattice[(iy + 1) * gx + ix];
                let v11 = lattice[(iy + 1) * gx + ix + 1];
                let v = v00 * (1.0 - ty) * (1.0 - tx)
                    + v01 * (1.0 - ty) * tx
                    + v10 * ty * (1.0 - tx)
                    + v11 * ty * tx;
                out[y * width + x] += amplitude * v;
            }
        }
        total += amplitude;
        amplitude *= 0.5;
        cell = (cell / 2).max(1);
    }
    for v in out.iter_mut() {
        *v /= total;
    }
    out
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round().clamp(0.0, 255.0),
        (g * 255.0).round().clamp(0.0, 255.0),
        (b * 255.0).round().clamp(0.0, 255.0),
    ]
}

// ---------------------------------------------------------------------------
// shape dataset
// ---------------------------------------------------------------------------

const SHAPE_IMAGE_SIZE: usize = 64;

fn random_shape(kind: ShapeKind, rng: &mut ChaCha8Rng) -> ShapeSpec {
    // solid shapes run large so they overlap as many regions as the
    // stroke-like classes do
    let size = match kind {
        ShapeKind::FilledCircle => rng.gen_range(13.0..18.0),
        ShapeKind::SquareOutline => rng.gen_range(12.0..17.0),
        ShapeKind::Triangle => rng.gen_range(15.0..20.0),
        ShapeKind::DotCluster => rng.gen_range(5.0..7.0),
    };
    let extra: f64 = match kind {
        ShapeKind::SquareOutline => (size / 3.0f64).max(3.5),
        ShapeKind::DotCluster => rng.gen_range(size + 2.0..size + 5.0),
        _ => 0.0,
    };
    // keep the whole shape inside the frame with a small margin
    let reach = match kind {
        ShapeKind::FilledCircle => size,
        ShapeKind::SquareOutline => size,
        ShapeKind::Triangle => 1.1 * size,
        ShapeKind::DotCluster => extra + size,
    } + 3.0;
    let lo = reach;
    let hi = SHAPE_IMAGE_SIZE as f64 - reach;
    let cy = rng.gen_range(lo..hi);
    let cx = rng.gen_range(lo..hi);
    let hue = rng.gen_range(0.0f32..1.0);
    ShapeSpec { kind, cy, cx, size, extra, hue }
}

/// Renders one sample: a textured background with the shape painted flat in
/// a clearly separated hue. The flat fill is deliberate: a uniform saturated
/// region occurs nowhere in the background, so it reads as foreground. Solid
/// shapes get a darker rim just inside their boundary, giving them the same
/// kind of double-edged profile a stroke has.
fn render_shape(spec: &ShapeSpec, rng: &mut ChaCha8Rng) -> Image {
    let n = SHAPE_IMAGE_SIZE;
    let bg_hue = spec.hue + rng.gen_range(0.3f32..0.7);
    let bg_sat = rng.gen_range(0.45f32..0.75);
    let bg_val = rng.gen_range(0.55f32..0.8);
    let fg_sat = rng.gen_range(0.75f32..0.95);
    let fg_val = rng.gen_range(0.8f32..0.95);
    let noise = value_noise(n, n, 16, 3, rng);
    let core = match spec.kind {
        ShapeKind::FilledCircle | ShapeKind::Triangle => {
            let mut inner = spec.clone();
            inner.size = (spec.size - 2.5).max(0.0);
            Some(inner)
        }
        ShapeKind::SquareOutline | ShapeKind::DotCluster => None,
    };
    let mut img = Image::new(n, n, ColorSpace::Rgb8);
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let rgb = if spec.contains(yc, xc) {
                let rimmed = core.as_ref().is_some_and(|inner| !inner.contains(yc, xc));
                let mut val = fg_val;
                if spec.kind == ShapeKind::Triangle {
                    let t = ((yc - (spec.cy - spec.size)) / (2.0 * spec.size)).clamp(0.0, 1.0);
                    val *= 0.72 + 0.28 * t as f32;
                }
                if rimmed {
                    val *= 0.55;
                }
                hsv_to_rgb(spec.hue, fg_sat, val)
            } else {
                let m = noise[p] - 0.5;
                hsv_to_rgb(bg_hue + 0.06 * m, bg_sat + 0.1 * m, (bg_val + 0.15 * m).clamp(0.05, 1.0))
            };
            for c in 0..3 {
                img.data[p * 3 + c] = rgb[c];
            }
        }
    }
    img
}

/// Generates the 4-class shape dataset: `n_per_class` samples per class,
/// 64x64, deterministic in `seed`. Sample streams are independent, so
/// any prefix of a bigger dataset equals the smaller dataset.
pub fn synth_dataset(n_per_class: usize, seed: u64) -> Dataset {
    let mut samples = Vec::with_capacity(4 * n_per_class);
    for i in 0..n_per_class {
        for kind in ShapeKind::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((kind.label() as u64) << 32 | i as u64);
            let spec = random_shape(kind, &mut rng);
            let image = render_shape(&spec, &mut rng);
            samples.push(Sample {
                image,
                label: kind.label(),
                shape: Some(spec),
            });
        }
    }
    Dataset { samples, classes: 4 }
}

// ---------------------------------------------------------------------------
// mosaic textures
// ---------------------------------------------------------------------------

/// Side length of generated texture images.
pub const TEXTURE_SIZE: usize = 256;

/// Jittered-grid Voronoi sites: one site per grid cell, displaced
/// uniformly within it.
struct Sites {
    grid: usize,
    cell: f64,
    pos: Vec<(f64, f64)>,
}

impl Sites {
    fn new(size: usize, grid: usize, rng: &mut ChaCha8Rng) -> Sites {
        let cell = size as f64 / grid as f64;
        let mut pos = Vec::with_capacity(grid * grid);
        for gy in 0..grid {
            for gx in 0..grid {
                pos.push((
                    (gy as f64 + rng.gen_range(0.15..0.85)) * cell,
                    (gx as f64 + rng.gen_range(0.15..0.85)) * cell,
                ));
            }
        }
        Sites { grid, cell, pos }
    }

    /// Index of the nearest site (ties to the lowest index); searching
    /// the 3x3 grid neighborhood is exact for jitter < one cell.
    fn nearest(&self, y: f64, x: f64) -> usize {
        let gy = ((y / self.cell) as usize).min(self.grid - 1);
        let gx = ((x / self.cell) as usize).min(self.grid - 1);
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for ny in gy.saturating_sub(1)..=(gy + 1).min(self.grid - 1) {
            for nx in gx.saturating_sub(1)..=(gx + 1).min(self.grid - 1) {
                let i = ny * self.grid + nx;
                let (sy, sx) = self.pos[i];
                let d = (y - sy) * (y - sy) + (x - sx) * (x - sx);
                if d < best_d || (d == best_d && i < best) {
                    best_d = d;
                    best = i;
                }
            }
        }
        best
    }
}

/// Picks `n` distinct hue bins spread around the wheel.
fn hue_palette(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let golden = 0.618_033_988_749_895f64;
    let start: f64 = rng.gen();
    let mut bins: Vec<u8> = Vec::with_capacity(n);
    let mut h = start;
    while bins.len() < n {
        h = (h + golden).fract();
        let b = (h * 256.0) as u8;
        if !bins.contains(&b) {
            bins.push(b);
        }
    }
    bins
}

/// Generator knobs for [`texture_image_custom`].
#[derive(Debug, Clone)]
pub struct TextureParams {
    /// Voronoi cells per axis.
    pub grid: usize,
    /// Brightness modulation amplitude.
    pub noise_amp: f32,
    /// Value-noise octaves.
    pub octaves: usize,
    /// Hue-distinct disks scattered on top: (radius, count) per scale.
    pub patches: Vec<(f64, usize)>,
}

impl Default for TextureParams {
    fn default() -> TextureParams {
        TextureParams {
            grid: 4,
            noise_amp: 0.05,
            octaves: 1,
            patches: vec![(12.0, 2), (6.0, 4), (3.0, 4)],
        }
    }
}

/// A seeded 256x256 mosaic texture: a jittered Voronoi partition assigns
/// each cell a distinct hue bin, saturation, and brightness; a sparse
/// set of smaller hue-distinct disks adds structure between the cell
/// scale and the pixel scale; smooth value noise shades everything.
/// Shading is verified per pixel to stay inside the intended hue bin
/// (falling back to a flat safe color if byte rounding would leak into a
/// neighboring bin), so the hue histogram is exactly the cell/disk map's
/// histogram: entropy comes from region boundaries, never from shading.
pub fn texture_image(seed: u64) -> Image {
    texture_image_custom(seed, &TextureParams::default())
}

/// [`texture_image`] with the generator knobs exposed, for tuning
/// surveys; the [`TextureParams::default`] values are the supported
/// configuration.
pub fn texture_image_custom(seed: u64, params: &TextureParams) -> Image {
    let n = TEXTURE_SIZE;
    let grid = params.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7e87);
    let sites = Sites::new(n, grid, &mut rng);
    let n_patches: usize = params.patches.iter().map(|&(_, c)| c).sum();
    let bins = hue_palette(grid * grid + n_patches, &mut rng);
    let sat: Vec<f32> = (0..grid * grid).map(|_| rng.gen_range(0.65..0.9)).collect();
    let val: Vec<f32> = (0..grid * grid).map(|_| rng.gen_range(0.75..0.95)).collect();

    // scatter non-overlapping disks, biggest first
    struct Patch {
        cy: f64,
        cx: f64,
        r: f64,
        bin: u8,
        sat: f32,
        val: f32,
    }
    let mut patches: Vec<Patch> = Vec::with_capacity(n_patches);
    let mut bin_iter = bins[grid * grid..].iter();
    for &(r, count) in &params.patches {
        for _ in 0..count {
            let bin = *bin_iter.next().unwrap();
            let mut placed = false;
            for _attempt in 0..200 {
                let cy = rng.gen_range(r + 4.0..n as f64 - r - 4.0);
                let cx = rng.gen_range(r + 4.0..n as f64 - r - 4.0);
                let clear = patches.iter().all(|p| {
                    let (dy, dx) = (p.cy - cy, p.cx - cx);
                    (dy * dy + dx * dx).sqrt() >= p.r + r + 6.0
                });
                if clear {
                    patches.push(Patch {
                        cy,
                        cx,
                        r,
                        bin,
                        sat: rng.gen_range(0.7..0.9),
                        val: rng.gen_range(0.75..0.95),
                    });
                    placed = true;
                    break;
                }
            }
            // a full canvas just drops the patch; counts are small enough
            // that this never happens with the default parameters
            let _ = placed;
        }
    }

    let noise = value_noise(n, n, 32, params.octaves, &mut rng);
    let mut img = Image::new(n, n, ColorSpace::Rgb8);
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let (fy, fx) = (y as f64, x as f64);
            let (bin, base_sat, base_val) = match patches
                .iter()
                .find(|pa| (fy - pa.cy).powi(2) + (fx - pa.cx).powi(2) <= pa.r * pa.r)
            {
                Some(pa) => (pa.bin, pa.sat, pa.val),
                None => {
                    let c = sites.nearest(fy, fx);
                    (bins[c], sat[c], val[c])
                }
            };
            let hue = (bin as f32 + 0.5) / 256.0;
            let v = (base_val + params.noise_amp * (noise[p] - 0.5)).clamp(0.55, 1.0);
            let mut rgb = hsv_to_rgb(hue, base_sat, v);
            if hue_bin_of(&rgb) != bin {
                rgb = hsv_to_rgb(hue, 0.85, 0.9);
            }
            for ch in 0..3 {
                img.data[p * 3 + ch] = rgb[ch];
            }
        }
    }
    img
}

fn hue_bin_of(rgb: &[f32; 3]) -> u8 {
    let h = rgb_pixel_to_hue(rgb[0], rgb[1], rgb[2]);
    ((h * 256.0) as usize).min(255) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_prefix_stable() {
        let a = synth_dataset(3, 42);
        let b = synth_dataset(3, 42);
        assert_eq!(a.samples.len(), 12);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image.data, y.image.data);
            assert_eq!(x.label, y.label);
        }
        let small = synth_dataset(1, 42);
        for (x, y) in small.samples.iter().zip(&a.samples) {
            assert_eq!(x.image.data, y.image.data);
        }
        let c = synth_dataset(3, 43);
        assert!(
            a.samples.iter().zip(&c.samples).any(|(x, y)| x.image.data != y.image.data),
            "different seeds should give different data"
        );
    }

    #[test]
    fn one_per_class_covers_all_labels() {
        let d = synth_dataset(1, 7);
        assert_eq!(d.samples.len(), 4);
        let mut labels: Vec<usize> = d.samples.iter().map(|s| s.label).collect();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rendered_foreground_matches_analytic_area() {
        // the rendered mask is rasterized from the same geometry, so this
        // is really a discretization-error bound on every shape family
        for seed in 0..10u64 {
            let d = synth_dataset(2, 1000 + seed);
            for s in &d.samples {
                let spec = s.shape.as_ref().unwrap();
                let count = spec.mask(64, 64).iter().filter(|&&m| m).count() as f64;
                let area = spec.analytic_area();
                let err = (count - area).abs() / area;
                assert!(
                    err <= 0.10,
                    "{:?}: rasterized {count} vs analytic {area:.1} ({:.1}% off)",
                    spec.kind,
                    100.0 * err
                );
            }
        }
    }

    #[test]
    fn foreground_pixels_carry_the_shape_hue() {
        let d = synth_dataset(1, 5);
        for s in &d.samples {
            let spec = s.shape.as_ref().unwrap();
            let mask = spec.mask(64, 64);
            for (p, &fg) in mask.iter().enumerate() {
                if fg {
                    let h = rgb_pixel_to_hue(
                        s.image.data[p * 3],
                        s.image.data[p * 3 + 1],
                        s.image.data[p * 3 + 2],
                    );
                    let d = (h - spec.hue).abs();
                    let d = d.min(1.0 - d);
                    assert!(d < 0.02, "foreground hue {h} far from spec {}", spec.hue);
                }
            }
        }
    }

    #[test]
    fn textures_are_deterministic_and_bin_clean() {
        let a = texture_image(3);
        let b = texture_image(3);
        assert_eq!(a.data, b.data);
        // every pixel's hue bin must come from the cell or patch palette
        let params = TextureParams::default();
        let palette = params.grid * params.grid
            + params.patches.iter().map(|&(_, c)| c).sum::<usize>();
        let mut bins = std::collections::BTreeSet::new();
        for p in 0..a.pixels() {
            bins.insert(hue_bin_of(&[a.data[p * 3], a.data[p * 3 + 1], a.data[p * 3 + 2]]));
        }
        assert!(
            bins.len() <= palette,
            "shading leaked outside the palette: {} bins",
            bins.len()
        );
        assert!(bins.len() >= 2, "texture should have several hues");
    }
}
