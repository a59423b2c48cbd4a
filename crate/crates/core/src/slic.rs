//! SLIC superpixel segmentation.
//!
//! Localized k-means over (L, a, b, y, x) with the distance
//! `D = sqrt(d_c^2 + (d_s / s)^2 * m^2)` where `s = sqrt(H*W/S)` is the
//! sampling interval and `m` the compactness. Each seed only competes for
//! pixels inside a 2s x 2s window around it, assignment ties go to the
//! lowest seed index, and cluster centers move to the mean of their
//! pixels. Afterwards connectivity is enforced and the region count is
//! normalized so a segmentation always has exactly the requested number
//! of labels (possibly with trailing empty ones).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{rgb_to_lab, ColorSpace, Image};

/// Parameters for [`segment`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlicParams {
    /// Requested number of superpixels (exact in the output).
    pub superpixels: usize,
    /// Compactness `m`: larger values weigh spatial distance more.
    pub compactness: f64,
    /// Gaussian smoothing of the Lab planes before clustering; 0 disables.
    pub sigma: f64,
    /// Number of assignment/update iterations.
    pub iterations: usize,
    /// Move each initial seed to the lowest-gradient spot in its 3x3
    /// neighborhood so seeds avoid edges.
    pub seed_perturb: bool,
}

impl SlicParams {
    pub fn new(superpixels: usize) -> SlicParams {
        SlicParams {
            superpixels,
            compactness: 0.1,
            sigma: 0.0,
            iterations: 10,
            seed_perturb: true,
        }
    }

    fn validate(&self, pixels: usize) -> Result<()> {
        if self.superpixels == 0 || self.superpixels > pixels {
            return Err(Error::invalid(format!(
                "superpixel count {} must be in 1..={pixels}",
                self.superpixels
            )));
        }
        if !(self.compactness > 0.0) || !self.compactness.is_finite() {
            return Err(Error::invalid("compactness must be positive and finite"));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::invalid("sigma must be non-negative"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        Ok(())
    }
}

/// A labeling of every pixel into `count()` regions.
///
/// Labels are dense: `0..count()`. Regions are 4-connected except empty
/// (padding) ones, which own no pixels and have `region_sizes[j] == 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub region_sizes: Vec<usize>,
}

impl Segmentation {
    /// Builds a segmentation from a label map, validating density.
    pub fn from_parts(height: usize, width: usize, labels: Vec<u32>, count: usize) -> Result<Segmentation> {
        if labels.len() != height * width {
            return Err(Error::invalid("label map size does not match dimensions"));
        }
        let mut region_sizes = vec![0usize; count];
        for &l in &labels {
            let l = l as usize;
            if l >= count {
                return Err(Error::invalid(format!("label {l} out of range for count {count}")));
            }
            region_sizes[l] += 1;
        }
        Ok(Segmentation { height, width, labels, region_sizes })
    }

    /// Number of regions, including empty padding regions.
    pub fn count(&self) -> usize {
        self.region_sizes.len()
    }

    #[inline]
    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// The SLIC distance between two (L, a, b, y, x) points.
pub fn slic_distance(a: [f64; 5], b: [f64; 5], s: f64, m: f64) -> f64 {
    squared_distance(a, b, s, m).sqrt()
}

#[inline]
fn squared_distance(a: [f64; 5], b: [f64; 5], s: f64, m: f64) -> f64 {
    let dc2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
    let ds2 = (a[3] - b[3]).powi(2) + (a[4] - b[4]).powi(2);
    dc2 + ds2 / (s * s) * (m * m)
}

#[inline]
fn pixel5(lab: &Image, y: usize, x: usize) -> [f64; 5] {
    let i = (y * lab.width + x) * 3;
    [
        lab.data[i] as f64,
        lab.data[i + 1] as f64,
        lab.data[i + 2] as f64,
        y as f64,
        x as f64,
    ]
}

/// Squared Lab gradient magnitude with replicated borders.
fn gradient(lab: &Image, y: usize, x: usize) -> f64 {
    let (h, w) = (lab.height, lab.width);
    let yp = (y + 1).min(h - 1);
    let ym = y.saturating_sub(1);
    let xp = (x + 1).min(w - 1);
    let xm = x.saturating_sub(1);
    let mut g = 0.0;
    for c in 0..3 {
        let dx = (lab.get(y, xp, c) - lab.get(y, xm, c)) as f64;
        let dy = (lab.get(yp, x, c) - lab.get(ym, x, c)) as f64;
        g += dx * dx + dy * dy;
    }
    g
}

fn grid_offsets(dim: usize, s: f64) -> Vec<f64> {
    let mut v = Vec::new();
    let mut c = s / 2.0;
    while c < dim as f64 {
        v.push(c);
        c += s;
    }
    if v.is_empty() {
        v.push(dim as f64 / 2.0);
    }
    v
}

/// Places seeds on a regular grid at interval `s = sqrt(H*W/S)` and
/// optionally perturbs each one to the lowest-gradient pixel in its 3x3
/// neighborhood (the center wins ties). Returns (L, a, b, y, x) seeds.
pub fn init_seeds(lab: &Image, superpixels: usize, perturb: bool) -> Result<Vec<[f64; 5]>> {
    if lab.space != ColorSpace::Lab {
        return Err(Error::invalid("init_seeds expects a Lab image"));
    }
    let (h, w) = (lab.height, lab.width);
    if superpixels == 0 || superpixels > h * w {
        return Err(Error::invalid("superpixel count out of range"));
    }
    let s = ((h * w) as f64 / superpixels as f64).sqrt();
    let rows = grid_offsets(h, s);
    let cols = grid_offsets(w, s);
    let mut seeds = Vec::with_capacity(rows.len() * cols.len());
    for &ry in &rows {
        for &cx in &cols {
            let py = (ry.round() as usize).min(h - 1);
            let px = (cx.round() as usize).min(w - 1);
            if perturb {
                let mut best = (py, px);
                let mut best_g = gradient(lab, py, px);
                for ny in py.saturating_sub(1)..=(py + 1).min(h - 1) {
                    for nx in px.saturating_sub(1)..=(px + 1).min(w - 1) {
                        let g = gradient(lab, ny, nx);
                        if g < best_g {
                            best_g = g;
                            best = (ny, nx);
                        }
                    }
                }
                seeds.push(pixel5(lab, best.0, best.1));
            } else {
                let i = (py * w + px) * 3;
                seeds.push([
                    lab.data[i] as f64,
                    lab.data[i + 1] as f64,
                    lab.data[i + 2] as f64,
                    ry,
                    cx,
                ]);
            }
        }
    }
    Ok(seeds)
}

/// Runs the assignment/update loop. Returns the label map and the
/// clustering energy (sum of squared SLIC distances to the assigned
/// center) recorded at the end of every iteration.
fn run_clustering(
    lab: &Image,
    centers: &mut Vec<[f64; 5]>,
    s: f64,
    m: f64,
    iterations: usize,
) -> (Vec<u32>, Vec<f64>) {
    let (h, w) = (lab.height, lab.width);
    let n = h * w;
    let rows = grid_offsets(h, s);
    let cols = grid_offsets(w, s);
    let (ny, nx) = (rows.len(), cols.len());

    // initial assignment: nearest grid cell, independent of color
    let grid_index = |coord: usize, count: usize| -> usize {
        let k = ((coord as f64 - s / 2.0) / s).round();
        (k.max(0.0) as usize).min(count - 1)
    };
    let mut labels = vec![0u32; n];
    for y in 0..h {
        let ky = grid_index(y, ny);
        for x in 0..w {
            labels[y * w + x] = (ky * nx + grid_index(x, nx)) as u32;
        }
    }

    let mut dist = vec![0.0f64; n];
    let mut energies = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        // seed distances from the current centers, then let each seed
        // compete within its 2s x 2s window; strict < keeps the lowest
        // seed index on ties
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                dist[p] = squared_distance(pixel5(lab, y, x), centers[labels[p] as usize], s, m);
            }
        }
        for (k, c) in centers.iter().enumerate() {
            let y0 = (c[3] - s).floor().max(0.0) as usize;
            let y1 = ((c[3] + s).ceil() as usize).min(h - 1);
            let x0 = (c[4] - s).floor().max(0.0) as usize;
            let x1 = ((c[4] + s).ceil() as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let d = squared_distance(pixel5(lab, y, x), *c, s, m);
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k as u32;
                    }
                }
            }
        }

        // move centers to the mean of their pixels; empty clusters stay put
        let mut sums = vec![[0.0f64; 5]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for y in 0..h {
            for x in 0..w {
                let k = labels[y * w + x] as usize;
                let p5 = pixel5(lab, y, x);
                for c in 0..5 {
                    sums[k][c] += p5[c];
                }
                counts[k] += 1;
            }
        }
        for (k, c) in centers.iter_mut().enumerate() {
            if counts[k] > 0 {
                for i in 0..5 {
                    c[i] = sums[k][i] / counts[k] as f64;
                }
            }
        }

        let mut e = 0.0;
        for y in 0..h {
            for x in 0..w {
                e += squared_distance(pixel5(lab, y, x), centers[labels[y * w + x] as usize], s, m);
            }
        }
        energies.push(e);
    }
    (labels, energies)
}

// ---------------------------------------------------------------------------
// region graph: union-find over regions with shared-boundary lengths
// ---------------------------------------------------------------------------

struct RegionGraph {
    parent: Vec<u32>,
    /// Smallest original id in each union; stable tie-break identity.
    rep: Vec<u32>,
    size: Vec<usize>,
    /// Shared 4-neighbor edge counts; keys may be stale (non-roots) and
    /// are canonicalized lazily.
    nbrs: Vec<BTreeMap<u32, u32>>,
}

impl RegionGraph {
    fn build(comp: &[u32], h: usize, w: usize, count: usize, size: Vec<usize>) -> RegionGraph {
        let mut nbrs = vec![BTreeMap::new(); count];
        let add = |a: u32, b: u32, nbrs: &mut Vec<BTreeMap<u32, u32>>| {
            if a != b {
                *nbrs[a as usize].entry(b).or_insert(0) += 1;
                *nbrs[b as usize].entry(a).or_insert(0) += 1;
            }
        };
        for y in 0..h {
            for x in 0..w {
                let c = comp[y * w + x];
                if x + 1 < w {
                    add(c, comp[y * w + x + 1], &mut nbrs);
                }
                if y + 1 < h {
                    add(c, comp[(y + 1) * w + x], &mut nbrs);
                }
            }
        }
        RegionGraph {
            parent: (0..count as u32).collect(),
            rep: (0..count as u32).collect(),
            size,
            nbrs,
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    /// Rewrites `nbrs[r]` with canonical root keys and returns the merge
    /// target: the neighbor with the longest shared boundary, ties going
    /// to the lowest original id.
    fn merge_target(&mut self, r: u32) -> Option<u32> {
        let old = std::mem::take(&mut self.nbrs[r as usize]);
        let mut canon: BTreeMap<u32, u32> = BTreeMap::new();
        for (k, v) in old {
            let k = self.find(k);
            if k != r {
                *canon.entry(k).or_insert(0) += v;
            }
        }
        let mut best: Option<(u32, u32, u32)> = None; // (count, rep, root)
        for (&k, &v) in &canon {
            let krep = self.rep[k as usize];
            match best {
                Some((bc, br, _)) if v < bc || (v == bc && krep >= br) => {}
                _ => best = Some((v, krep, k)),
            }
        }
        self.nbrs[r as usize] = canon;
        best.map(|(_, _, root)| root)
    }

    /// Merges the unions of `a` and `b`; returns the surviving root.
    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (a, b) = (self.find(a), self.find(b));
        debug_assert_ne!(a, b);
        // keep the root with the bigger neighbor map to bound merge cost
        let (keep, drop) = if self.nbrs[a as usize].len() >= self.nbrs[b as usize].len() {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[drop as usize] = keep;
        self.size[keep as usize] += self.size[drop as usize];
        self.rep[keep as usize] = self.rep[keep as usize].min(self.rep[drop as usize]);
        let dropped = std::mem::take(&mut self.nbrs[drop as usize]);
        for (k, v) in dropped {
            if self.find(k) != keep {
                *self.nbrs[keep as usize].entry(k).or_insert(0) += v;
            }
        }
        keep
    }

    /// Densely relabels roots in order of their original first-scan id.
    /// Returns (per-original-comp new label, root count).
    fn relabel(&mut self, count: usize) -> (Vec<u32>, usize) {
        let mut roots: Vec<u32> = (0..count as u32).filter(|&c| self.parent[c as usize] == c).collect();
        roots.sort_by_key(|&r| self.rep[r as usize]);
        let mut new_of_root = vec![0u32; count];
        for (i, &r) in roots.iter().enumerate() {
            new_of_root[r as usize] = i as u32;
        }
        let map: Vec<u32> = (0..count as u32).map(|c| new_of_root[self.find(c) as usize]).collect();
        (map, roots.len())
    }
}

/// Connected components of equal labels under 4-connectivity, in scan
/// order. Returns (component map, component count, component sizes).
fn connected_components(labels: &[u32], h: usize, w: usize) -> (Vec<u32>, usize, Vec<usize>) {
    const UNSEEN: u32 = u32::MAX;
    let mut comp = vec![UNSEEN; labels.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    let mut next = 0u32;
    for start in 0..labels.len() {
        if comp[start] != UNSEEN {
            continue;
        }
        let id = next;
        next += 1;
        let label = labels[start];
        let mut size = 0usize;
        comp[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == UNSEEN && labels[q] == label {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        sizes.push(size);
    }
    (comp, next as usize, sizes)
}

/// Splits label regions into 4-connected components and absorbs every
/// component smaller than `min_size` into the adjacent region sharing
/// the longest boundary (ties to the lowest component id). Relabels the
/// map densely in scan order and returns the region count.
pub fn enforce_connectivity(labels: &mut [u32], h: usize, w: usize, min_size: usize) -> usize {
    let (comp, count, sizes) = connected_components(labels, h, w);
    let mut graph = RegionGraph::build(&comp, h, w, count, sizes);
    loop {
        let mut merged = false;
        for c in 0..count as u32 {
            if graph.parent[c as usize] != c || graph.size[c as usize] >= min_size {
                continue;
            }
            if let Some(target) = graph.merge_target(c) {
                graph.union(c, target);
                merged = true;
            }
        }
        if !merged {
            break;
        }
    }
    let (map, final_count) = graph.relabel(count);
    for (l, &c) in labels.iter_mut().zip(&comp) {
        *l = map[c as usize];
    }
    final_count
}

/// Forces a segmentation to exactly `target` regions. Excess regions are
/// removed by repeatedly merging the smallest region (ties to the lowest
/// label) into its longest-boundary neighbor; a shortfall is padded with
/// trailing empty labels.
pub fn normalize_count(seg: &mut Segmentation, target: usize) {
    let count = seg.count();
    if count > target {
        let (h, w) = (seg.height, seg.width);
        let mut graph = RegionGraph::build(&seg.labels, h, w, count, seg.region_sizes.clone());
        let mut heap = std::collections::BinaryHeap::new();
        for c in 0..count as u32 {
            heap.push(std::cmp::Reverse((graph.size[c as usize], c, c)));
        }
        let mut remaining = count;
        while remaining > target {
            let Some(std::cmp::Reverse((size, rep, root))) = heap.pop() else {
                break;
            };
            // skip stale heap entries
            if graph.parent[root as usize] != root
                || graph.size[root as usize] != size
                || graph.rep[root as usize] != rep
            {
                continue;
            }
            let Some(target_root) = graph.merge_target(root) else {
                break;
            };
            let kept = graph.union(root, target_root);
            heap.push(std::cmp::Reverse((
                graph.size[kept as usize],
                graph.rep[kept as usize],
                kept,
            )));
            remaining -= 1;
        }
        let (map, final_count) = graph.relabel(count);
        for l in seg.labels.iter_mut() {
            *l = map[*l as usize];
        }
        let mut sizes = vec![0usize; final_count];
        for &l in &seg.labels {
            sizes[l as usize] += 1;
        }
        seg.region_sizes = sizes;
    }
    // pad with empty regions up to the target
    while seg.region_sizes.len() < target {
        seg.region_sizes.push(0);
    }
}

/// Segments an RGB image into exactly `params.superpixels` regions.
pub fn segment(image: &Image, params: &SlicParams) -> Result<Segmentation> {
    if image.space != ColorSpace::Rgb8 {
        return Err(Error::invalid("segment expects an RGB image"));
    }
    let (h, w) = (image.height, image.width);
    params.validate(h * w)?;
    let mut lab = rgb_to_lab(image)?;
    if params.sigma > 0.0 {
        gaussian_blur(&mut lab, params.sigma);
    }
    let s = ((h * w) as f64 / params.superpixels as f64).sqrt();
    let mut centers = init_seeds(&lab, params.superpixels, params.seed_perturb)?;
    let (mut labels, _) = run_clustering(&lab, &mut centers, s, params.compactness, params.iterations);
    let min_size = ((h * w / params.superpixels) / 4).max(1);
    let count = enforce_connectivity(&mut labels, h, w, min_size);
    let mut seg = Segmentation::from_parts(h, w, labels, count)?;
    normalize_count(&mut seg, params.superpixels);
    Ok(seg)
}

/// Paints each region with its mean RGB color and darkens boundary
/// pixels, for eyeballing segmentations.
pub fn region_mean_image(image: &Image, seg: &Segmentation) -> Result<Image> {
    if image.space != ColorSpace::Rgb8 {
        return Err(Error::invalid("region_mean_image expects an RGB image"));
    }
    if image.height != seg.height || image.width != seg.width {
        return Err(Error::invalid("segmentation does not match image dimensions"));
    }
    let mut sums = vec![[0.0f64; 3]; seg.count()];
    for (i, &l) in seg.labels.iter().enumerate() {
        for c in 0..3 {
            sums[l as usize][c] += image.data[i * 3 + c] as f64;
        }
    }
    let mut out = Image::new(image.height, image.width, ColorSpace::Rgb8);
    for (i, &l) in seg.labels.iter().enumerate() {
        let n = seg.region_sizes[l as usize].max(1) as f64;
        let (y, x) = (i / seg.width, i % seg.width);
        let boundary = (x + 1 < seg.width && seg.labels[i + 1] != l)
            || (y + 1 < seg.height && seg.labels[i + seg.width] != l);
        for c in 0..3 {
            let v = (sums[l as usize][c] / n) as f32;
            out.data[i * 3 + c] = if boundary { v * 0.5 } else { v };
        }
    }
    Ok(out)
}

/// In-place separable Gaussian blur with replicated borders.
fn gaussian_blur(img: &mut Image, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return;
    }
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (h, w, ch) = (img.height, img.width, img.channels());
    let mut tmp = vec![0.0f32; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f64;
                for (ki, k) in kernel.iter().enumerate() {
                    let xx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += k * img.get(y, xx, c) as f64;
                }
                tmp[(y * w + x) * ch + c] = acc as f32;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f64;
                for (ki, k) in kernel.iter().enumerate() {
                    let yy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp[(yy * w + x) * ch + c] as f64;
                }
                img.set(y, x, c, acc as f32);
            }
        }
    }
}
