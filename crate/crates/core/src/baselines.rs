//! Classical comparators: Otsu thresholding, two-stage marker watershed,
//! k-means (k = 2) and k-means followed by an MRF pass.
//!
//! Foreground is the darker class unless `invert` is set.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HcrfError, Result};
use crate::imagedata::{luma_of, ImageGrid, LabelMask, Raster};
use crate::postprocess::{icm_sweep, MrfConfig};

/// Pixels sampled for k-means initialization.
pub const KMEANS_SAMPLE: usize = 256;
pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-4;
/// Lower bound on per-class luma variance in the k-means + MRF data term.
pub const VARIANCE_FLOOR: f64 = 1.0;
/// Fraction of the peak distance that seeds second-stage watershed markers.
pub const SPLIT_CORE_FRACTION: f64 = 0.65;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineMethod {
    Otsu,
    Watershed,
    Kmeans,
    KmeansMrf,
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMethod::Otsu => "otsu",
            BaselineMethod::Watershed => "watershed",
            BaselineMethod::Kmeans => "kmeans",
            BaselineMethod::KmeansMrf => "kmeans_mrf",
        })
    }
}

impl FromStr for BaselineMethod {
    type Err = HcrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "otsu" => Ok(BaselineMethod::Otsu),
            "watershed" => Ok(BaselineMethod::Watershed),
            "kmeans" => Ok(BaselineMethod::Kmeans),
            "kmeans_mrf" => Ok(BaselineMethod::KmeansMrf),
            other => Err(HcrfError::parameter(format!("unknown baseline method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Foreground is the lighter class when set.
    pub invert: bool,
    pub kmeans_seed: u64,
    pub mrf: MrfConfig,
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod) -> Self {
        BaselineConfig {
            method,
            invert: false,
            kmeans_seed: 0,
            mrf: MrfConfig::default(),
        }
    }
}

pub fn segment(image: &ImageGrid, cfg: &BaselineConfig) -> Result<LabelMask> {
    match cfg.method {
        BaselineMethod::Otsu => otsu_segment(image, cfg),
        BaselineMethod::Watershed => watershed_segment(image, cfg),
        BaselineMethod::Kmeans => kmeans_segment(image, cfg),
        BaselineMethod::KmeansMrf => kmeans_mrf_segment(image, cfg),
    }
}

fn oriented(mask: LabelMask, invert: bool) -> LabelMask {
    if invert {
        mask.complement()
    } else {
        mask
    }
}

pub fn histogram(values: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in values {
        h[v as usize] += 1;
    }
    h
}

/// Between-class variance `w0·w1·(μ0 − μ1)²` of the split `{v < t}`, `{v ≥ t}`.
pub fn between_class_variance(hist: &[u64; 256], t: usize) -> f64 {
    let total: u64 = hist.iter().sum();
    let (mut n0, mut s0) = (0u64, 0.0);
    for (v, &c) in hist.iter().enumerate().take(t) {
        n0 += c;
        s0 += v as f64 * c as f64;
    }
    let sum: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let n1 = total - n0;
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let (w0, w1) = (n0 as f64 / total as f64, n1 as f64 / total as f64);
    let (m0, m1) = (s0 / n0 as f64, (sum - s0) / n1 as f64);
    w0 * w1 * (m0 - m1).powi(2)
}

/// Threshold `t ∈ 1..=255` maximizing between-class variance; the first
/// maximum wins. Dark class is `v < t`.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(HcrfError::Degenerate(
            "histogram has a single intensity; Otsu threshold undefined".into(),
        ));
    }
    let total: u64 = hist.iter().sum();
    let sum: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let (mut n0, mut s0) = (0u64, 0.0);
    let (mut best_t, mut best) = (1usize, -1.0);
    for t in 1..=255usize {
        n0 += hist[t - 1];
        s0 += (t - 1) as f64 * hist[t - 1] as f64;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (w0, w1) = (n0 as f64 / total as f64, n1 as f64 / total as f64);
        let (m0, m1) = (s0 / n0 as f64, (sum - s0) / n1 as f64);
        let var = w0 * w1 * (m0 - m1).powi(2);
        if var > best {
            best = var;
            best_t = t;
        }
    }
    Ok(best_t as u8)
}

pub fn otsu_segment(image: &ImageGrid, cfg: &BaselineConfig) -> Result<LabelMask> {
    let luma = image.luma();
    let t = otsu_threshold(&histogram(&luma))?;
    let mask = LabelMask::new(
        image.width(),
        image.height(),
        luma.iter().map(|&v| (v < t) as u8).collect(),
    )?;
    Ok(oriented(mask, cfg.invert))
}

fn features(image: &ImageGrid) -> Vec<Vec<f64>> {
    (0..image.height())
        .flat_map(|y| (0..image.width()).map(move |x| (x, y)))
        .map(|(x, y)| image.pixel(x, y).iter().map(|&v| v as f64).collect())
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn feature_luma(c: &[f64]) -> f64 {
    if c.len() >= 3 {
        luma_of(c[0], c[1], c[2])
    } else {
        c[0]
    }
}

/// Result of two-cluster Lloyd iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct KmeansOutcome {
    /// Foreground-oriented mask (before `invert`).
    pub mask: LabelMask,
    pub centroids: [Vec<f64>; 2],
    /// Within-cluster sum of squares after each update step.
    pub wcss: Vec<f64>,
    pub iterations: usize,
}

/// Most distant pair among seeded samples; falls back to the pixel farthest
/// from the first sample when all samples coincide.
fn initial_centroids(feats: &[Vec<f64>], seed: u64) -> Result<[Vec<f64>; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = feats.len();
    let mut idx: Vec<usize> = if n <= KMEANS_SAMPLE {
        (0..n).collect()
    } else {
        sample(&mut rng, n, KMEANS_SAMPLE).into_vec()
    };
    idx.sort_unstable();
    let (mut bi, mut bj, mut best) = (idx[0], idx[0], 0.0);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let d = dist2(&feats[i], &feats[j]);
            if d > best {
                (bi, bj, best) = (i, j, d);
            }
        }
    }
    if best == 0.0 {
        for (j, f) in feats.iter().enumerate() {
            let d = dist2(&feats[bi], f);
            if d > best {
                (bj, best) = (j, d);
            }
        }
    }
    if best == 0.0 {
        return Err(HcrfError::Degenerate(
            "image has a single color; k-means needs two clusters".into(),
        ));
    }
    Ok([feats[bi].clone(), feats[bj].clone()])
}

fn assign(feats: &[Vec<f64>], c: &[Vec<f64>; 2]) -> Vec<u8> {
    feats
        .iter()
        .map(|f| (dist2(f, &c[1]) < dist2(f, &c[0])) as u8)
        .collect()
}

fn wcss(feats: &[Vec<f64>], labels: &[u8], c: &[Vec<f64>; 2]) -> f64 {
    feats.iter().zip(labels).map(|(f, &l)| dist2(f, &c[l as usize])).sum()
}

pub(crate) fn lloyd(feats: &[Vec<f64>], init: [Vec<f64>; 2]) -> ([Vec<f64>; 2], Vec<u8>, Vec<f64>, usize) {
    let dim = init[0].len();
    let mut c = init;
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let labels = assign(feats, &c);
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for (f, &l) in feats.iter().zip(&labels) {
            counts[l as usize] += 1;
            for (s, v) in sums[l as usize].iter_mut().zip(f) {
                *s += v;
            }
        }
        let mut next = c.clone();
        for k in 0..2 {
            if counts[k] > 0 {
                next[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
        let shift = (0..2).map(|k| dist2(&c[k], &next[k]).sqrt()).fold(0.0, f64::max);
        history.push(wcss(feats, &labels, &next));
        c = next;
        iterations += 1;
        if shift < KMEANS_TOLERANCE || iterations >= KMEANS_MAX_ITER {
            let labels = assign(feats, &c);
            return (c, labels, history, iterations);
        }
    }
}

fn foreground_from_clusters(labels: &[u8], c: &[Vec<f64>; 2]) -> Vec<u8> {
    let fg = if feature_luma(&c[1]) < feature_luma(&c[0]) {
        1
    } else {
        0
    };
    labels.iter().map(|&l| (l == fg) as u8).collect()
}

pub fn kmeans_cluster(image: &ImageGrid, seed: u64) -> Result<KmeansOutcome> {
    let feats = features(image);
    let init = initial_centroids(&feats, seed)?;
    let (centroids, labels, wcss, iterations) = lloyd(&feats, init);
    let mask = LabelMask::new(
        image.width(),
        image.height(),
        foreground_from_clusters(&labels, &centroids),
    )?;
    Ok(KmeansOutcome {
        mask,
        centroids,
        wcss,
        iterations,
    })
}

pub fn kmeans_segment(image: &ImageGrid, cfg: &BaselineConfig) -> Result<LabelMask> {
    Ok(oriented(kmeans_cluster(image, cfg.kmeans_seed)?.mask, cfg.invert))
}

/// Per-class luma mean and floored variance; `None` for an empty class.
fn class_stats(luma: &[f64], labels: &[u8]) -> [Option<(f64, f64)>; 2] {
    let mut out = [None, None];
    for (k, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = luma
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l as usize == k)
            .map(|(&v, _)| v)
            .collect();
        if !vals.is_empty() {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            *slot = Some((mean, var.max(VARIANCE_FLOOR)));
        }
    }
    out
}

/// Gaussian negative log-likelihood of `v` under `(mean, var)`.
pub(crate) fn gaussian_cost(v: f64, (mean, var): (f64, f64)) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * var).ln() + (v - mean).powi(2) / (2.0 * var)
}

/// ICM seeded by k-means, re-estimating per-class luma Gaussians each sweep.
pub fn kmeans_mrf_segment(image: &ImageGrid, cfg: &BaselineConfig) -> Result<LabelMask> {
    cfg.mrf.validate()?;
    let seed_mask = kmeans_cluster(image, cfg.kmeans_seed)?.mask;
    let (w, h) = (image.width(), image.height());
    let luma: Vec<f64> = features(image).iter().map(|f| feature_luma(f)).collect();
    let mut labels = seed_mask.labels().to_vec();
    let mut stats = class_stats(&luma, &labels);
    for _ in 0..cfg.mrf.max_sweeps {
        let fresh = class_stats(&luma, &labels);
        for k in 0..2 {
            if fresh[k].is_some() {
                stats[k] = fresh[k];
            }
        }
        let (Some(s0), Some(s1)) = (stats[0], stats[1]) else {
            break;
        };
        let costs: Vec<[f64; 2]> = luma
            .iter()
            .map(|&v| [gaussian_cost(v, s0), gaussian_cost(v, s1)])
            .collect();
        if icm_sweep(&mut labels, w, h, &costs, cfg.mrf.beta, cfg.mrf.neighborhood) == 0 {
            break;
        }
    }
    Ok(oriented(LabelMask::new(w, h, labels)?, cfg.invert))
}

/// 8-connected components of `mask`; labels start at 1, 0 is background.
pub fn connected_components(mask: &[bool], w: usize, h: usize) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next)
}

fn box3(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    s += values[yy * w + xx];
                    n += 1.0;
                }
            }
            out.push(s / n);
        }
    }
    out
}

/// Sobel gradient magnitude with replicated borders.
fn sobel(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at =
        |x: isize, y: isize| values[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

#[derive(PartialEq)]
struct QueueItem {
    priority: f64,
    seq: u64,
    index: usize,
}

impl Eq for QueueItem {}

impl Ord for QueueItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority.total_cmp(&other.priority).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const LINE: u32 = u32::MAX;

/// Marker-controlled priority flood (lowest priority first) over the pixels
/// where `allowed` holds. A pixel whose labeled 4-neighbors disagree becomes
/// a watershed line. Unreached allowed pixels are returned as lines too.
fn flood(priority: &[f64], allowed: &[bool], markers: &[u32], w: usize, h: usize) -> Vec<u32> {
    let mut labels = markers.to_vec();
    let mut queued = vec![false; w * h];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let neighbors = |i: usize| {
        let (x, y) = (i % w, i / w);
        let mut n = [usize::MAX; 4];
        if x > 0 {
            n[0] = i - 1;
        }
        if x + 1 < w {
            n[1] = i + 1;
        }
        if y > 0 {
            n[2] = i - w;
        }
        if y + 1 < h {
            n[3] = i + w;
        }
        n
    };
    let mut push = |heap: &mut BinaryHeap<Reverse<QueueItem>>, queued: &mut Vec<bool>, labels: &Vec<u32>, i: usize| {
        for j in neighbors(i) {
            if j != usize::MAX && allowed[j] && labels[j] == 0 && !queued[j] {
                queued[j] = true;
                heap.push(Reverse(QueueItem {
                    priority: priority[j],
                    seq,
                    index: j,
                }));
                seq += 1;
            }
        }
    };
    for i in 0..w * h {
        if labels[i] != 0 && labels[i] != LINE {
            push(&mut heap, &mut queued, &labels, i);
        }
    }
    while let Some(Reverse(item)) = heap.pop() {
        let i = item.index;
        let mut seen = 0u32;
        let mut conflict = false;
        for j in neighbors(i) {
            if j == usize::MAX {
                continue;
            }
            let l = labels[j];
            if l != 0 && l != LINE {
                if seen == 0 {
                    seen = l;
                } else if seen != l {
                    conflict = true;
                }
            }
        }
        if conflict || seen == 0 {
            labels[i] = LINE;
        } else {
            labels[i] = seen;
            push(&mut heap, &mut queued, &labels, i);
        }
    }
    for i in 0..w * h {
        if allowed[i] && labels[i] == 0 {
            labels[i] = LINE;
        }
    }
    labels
}

/// Marker per connected component: its 3×3 erosion, or the whole component
/// when erosion would erase it.
fn component_markers(region: &[bool], w: usize, h: usize, first_label: u32) -> (Vec<u32>, u32) {
    let (comp, count) = connected_components(region, w, h);
    let interior = |i: usize| {
        let (x, y) = (i % w, i / w);
        (y.saturating_sub(1)..=(y + 1).min(h - 1))
            .all(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).all(|xx| region[yy * w + xx]))
    };
    let mut has_interior = vec![false; count as usize + 1];
    for i in 0..w * h {
        if comp[i] != 0 && interior(i) {
            has_interior[comp[i] as usize] = true;
        }
    }
    let markers = (0..w * h)
        .map(|i| {
            let c = comp[i];
            if c != 0 && (interior(i) || !has_interior[c as usize]) {
                first_label + c - 1
            } else {
                0
            }
        })
        .collect();
    (markers, count)
}

/// Chamfer 3-4 distance to the nearest pixel outside `region` (the raster
/// exterior counts as outside).
fn chamfer(region: &[bool], w: usize, h: usize) -> Vec<f64> {
    let inf = u32::MAX / 2;
    let mut d: Vec<u32> = region.iter().map(|&r| if r { inf } else { 0 }).collect();
    let get = |d: &Vec<u32>, x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            d[y as usize * w + x as usize]
        }
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            if d[i] == 0 {
                continue;
            }
            let best = [
                get(&d, x - 1, y) + 3,
                get(&d, x - 1, y - 1) + 4,
                get(&d, x, y - 1) + 3,
                get(&d, x + 1, y - 1) + 4,
            ]
            .into_iter()
            .min()
            .unwrap();
            d[i] = d[i].min(best);
        }
    }
    for y in (0..h as isize).rev() {
        for x in (0..w as isize).rev() {
            let i = y as usize * w + x as usize;
            if d[i] == 0 {
                continue;
            }
            let best = [
                get(&d, x + 1, y) + 3,
                get(&d, x + 1, y + 1) + 4,
                get(&d, x, y + 1) + 3,
                get(&d, x - 1, y + 1) + 4,
            ]
            .into_iter()
            .min()
            .unwrap();
            d[i] = d[i].min(best);
        }
    }
    d.into_iter().map(|v| v as f64 / 3.0).collect()
}

/// Second stage: splits merged objects in `mask` along distance-transform
/// watershed lines. Components with a single distance core are unchanged.
pub fn watershed_split(mask: &LabelMask) -> LabelMask {
    let (w, h) = (mask.width(), mask.height());
    let region: Vec<bool> = mask.labels().iter().map(|&l| l == 1).collect();
    let (comp, count) = connected_components(&region, w, h);
    let dist = chamfer(&region, w, h);
    let mut out = mask.labels().to_vec();
    for c in 1..=count {
        let members: Vec<usize> = (0..w * h).filter(|&i| comp[i] == c).collect();
        let dmax = members.iter().map(|&i| dist[i]).fold(0.0, f64::max);
        let mut core = vec![false; w * h];
        for &i in &members {
            core[i] = dist[i] >= SPLIT_CORE_FRACTION * dmax;
        }
        let (markers, n_markers) = connected_components(&core, w, h);
        if n_markers < 2 {
            continue;
        }
        let mut allowed = vec![false; w * h];
        for &i in &members {
            allowed[i] = true;
        }
        let neg: Vec<f64> = dist.iter().map(|d| -d).collect();
        let labels = flood(&neg, &allowed, &markers, w, h);
        for &i in &members {
            if labels[i] == LINE {
                out[i] = 0;
            }
        }
    }
    LabelMask::new(w, h, out).expect("binary labels")
}

/// Stage 1 only: marker watershed on the gradient of smoothed luma.
pub fn watershed_stage1(image: &ImageGrid) -> Result<LabelMask> {
    let (w, h) = (image.width(), image.height());
    let luma: Vec<f64> = image.luma().iter().map(|&v| v as f64).collect();
    let smooth = box3(&luma, w, h);
    let grad = sobel(&smooth, w, h);
    if grad.iter().all(|&g| g == grad[0]) {
        return Err(HcrfError::Degenerate(
            "gradient magnitude is constant; watershed undefined".into(),
        ));
    }
    let quantized: Vec<u8> = smooth.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    let t = otsu_threshold(&histogram(&quantized))? as f64;
    let dark: Vec<bool> = quantized.iter().map(|&v| (v as f64) < t).collect();
    let bright: Vec<bool> = dark.iter().map(|d| !d).collect();
    let (dark_markers, n_dark) = component_markers(&dark, w, h, 1);
    let (bright_markers, n_bright) = component_markers(&bright, w, h, n_dark + 1);
    let markers: Vec<u32> = dark_markers
        .iter()
        .zip(&bright_markers)
        .map(|(&a, &b)| a.max(b))
        .collect();
    let allowed = vec![true; w * h];
    let basins = flood(&grad, &allowed, &markers, w, h);

    let n = (n_dark + n_bright) as usize + 1;
    let (mut sum, mut cnt) = (vec![0.0; n], vec![0usize; n]);
    for (i, &b) in basins.iter().enumerate() {
        if b != LINE {
            sum[b as usize] += smooth[i];
            cnt[b as usize] += 1;
        }
    }
    let dark_basin: Vec<bool> = (0..n).map(|b| cnt[b] > 0 && sum[b] / (cnt[b] as f64) < t).collect();
    let labels = basins
        .iter()
        .map(|&b| (b != LINE && dark_basin[b as usize]) as u8)
        .collect();
    LabelMask::new(w, h, labels)
}

pub fn watershed_segment(image: &ImageGrid, cfg: &BaselineConfig) -> Result<LabelMask> {
    let stage1 = watershed_stage1(image)?;
    Ok(oriented(watershed_split(&stage1), cfg.invert))
}
