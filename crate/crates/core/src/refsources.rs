//! Synthetic image/ground-truth pairs and seeded reference probability
//! sources standing in for trained pixel and patch classifiers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::PatchLabelGrid;
use crate::error::{HcrfError, Result};
use crate::imagedata::{clamp_prob, ImageGrid, LabelMask, ProbMap, DEFAULT_EPSILON};
use crate::potentials::{PatchProbGrid, SourceId};

/// Intensity of foreground tissue in synthetic images.
pub const FOREGROUND_LEVEL: f64 = 70.0;
pub const BACKGROUND_LEVEL: f64 = 200.0;
/// Distance of noiseless source probabilities from 0 and 1.
pub const BASE_SEPARATION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub n_blobs: usize,
    /// Inclusive range of ellipse semi-axes, in pixels.
    pub blob_radius_range: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        let side = width.min(height) as f64;
        SynthConfig {
            width,
            height,
            n_blobs: 4,
            blob_radius_range: ((side / 16.0).max(1.0), (side / 5.0).max(1.0)),
            noise_sigma: 12.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(HcrfError::parameter("synthetic raster must be nonempty"));
        }
        let (lo, hi) = self.blob_radius_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 1.0 && lo <= hi) {
            return Err(HcrfError::parameter(format!("invalid blob radius range ({lo}, {hi})")));
        }
        let limit = self.width.min(self.height) as f64 / 2.0;
        if hi > limit {
            return Err(HcrfError::parameter(format!(
                "blob radius {hi} exceeds half the raster side ({limit})"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(HcrfError::parameter(format!(
                "noise sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.rx * self.ry
    }
}

/// Ellipses of the synthetic scene, drawn from the config seed.
pub fn synth_blobs(cfg: &SynthConfig) -> Result<Vec<Ellipse>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.blob_radius_range;
    Ok((0..cfg.n_blobs)
        .map(|_| {
            let rx = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            let ry = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            Ellipse {
                cx: rng.random_range(0.0..cfg.width as f64),
                cy: rng.random_range(0.0..cfg.height as f64),
                rx,
                ry,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        })
        .collect())
}

/// Grayscale image and ground truth. Pixel `(x, y)` is sampled at its center.
pub fn synth_pair(cfg: &SynthConfig) -> Result<(ImageGrid, LabelMask)> {
    let blobs = synth_blobs(cfg)?;
    let mask = LabelMask::from_fn(cfg.width, cfg.height, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        blobs.iter().any(|e| e.contains(px, py))
    });
    // The noise stream is separate from the geometry stream.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| HcrfError::parameter(e.to_string()))?;
    let samples = mask
        .labels()
        .iter()
        .map(|&l| {
            let base = if l == 1 { FOREGROUND_LEVEL } else { BACKGROUND_LEVEL };
            let n = if cfg.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (base + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok((ImageGrid::gray(cfg.width, cfg.height, samples)?, mask))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceConfig {
    pub corruption_sigma: f64,
    pub smooth_radius: usize,
    pub bias: f64,
    pub seed: u64,
}

impl SourceConfig {
    pub fn noiseless(seed: u64) -> Self {
        SourceConfig {
            corruption_sigma: 0.0,
            smooth_radius: 0,
            bias: 0.0,
            seed,
        }
    }

    pub fn noisy(sigma: f64, seed: u64) -> Self {
        SourceConfig {
            corruption_sigma: sigma,
            ..SourceConfig::noiseless(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.corruption_sigma >= 0.0 && self.corruption_sigma.is_finite()) {
            return Err(HcrfError::parameter(format!(
                "corruption sigma {} must be >= 0",
                self.corruption_sigma
            )));
        }
        if !self.bias.is_finite() {
            return Err(HcrfError::parameter("source bias must be finite"));
        }
        Ok(())
    }
}

/// Mean over the clipped `(2r+1)²` box including the center.
fn box_smooth(values: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return values.to_vec();
    }
    let mut sat = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += values[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1) + 1);
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1) + 1);
            let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
            out.push(s / ((x1 - x0) * (y1 - y0)) as f64);
        }
    }
    out
}

fn corrupt(labels: &[u8], w: usize, h: usize, cfg: &SourceConfig) -> Result<ProbMap> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.corruption_sigma).map_err(|e| HcrfError::parameter(e.to_string()))?;
    let raw: Vec<f64> = labels
        .iter()
        .map(|&l| {
            let n = if cfg.corruption_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (l as f64 * (1.0 - 2.0 * BASE_SEPARATION) + BASE_SEPARATION + cfg.bias + n).clamp(0.0, 1.0)
        })
        .collect();
    let smoothed = box_smooth(&raw, w, h, cfg.smooth_radius);
    clamp_prob(&ProbMap::new(w, h, smoothed)?, DEFAULT_EPSILON)
}

/// Pixel-level probability map emulating a segmentation network.
pub fn reference_pixel_source(gt: &LabelMask, cfg: &SourceConfig) -> Result<ProbMap> {
    corrupt(gt.labels(), gt.width(), gt.height(), cfg)
}

/// Three patch-level probability grids emulating three patch classifiers.
pub fn reference_patch_sources(gt: &PatchLabelGrid, cfgs: &[SourceConfig]) -> Result<[PatchProbGrid; 3]> {
    if cfgs.len() != 3 {
        return Err(HcrfError::parameter(format!(
            "exactly three patch source configs are required, got {}",
            cfgs.len()
        )));
    }
    for i in 0..3 {
        for j in i + 1..3 {
            if cfgs[i] == cfgs[j] {
                return Err(HcrfError::parameter(format!(
                    "patch source configs {i} and {j} are identical"
                )));
            }
        }
    }
    let make = |k: usize| -> Result<PatchProbGrid> {
        let probs = corrupt(&gt.labels, gt.grid_width, gt.grid_height, &cfgs[k])?;
        Ok(PatchProbGrid::new(SourceId::ALL[k], probs))
    };
    Ok([make(0)?, make(1)?, make(2)?])
}
