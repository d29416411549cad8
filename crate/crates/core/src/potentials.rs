//! The four potential fields feeding the hierarchical CRF.
//!
//! Pixel-level: the unary term is the pixel classifier's probability map;
//! the binary term averages it over the 48-pixel neighborhood (7x7 window,
//! center excluded). Patch-level: three per-source probability grids are
//! fused by a weighted geometric product renormalized over the two classes;
//! the binary variant first averages each source over its 8 neighboring
//! patches. Border windows are clipped to the raster and stay proper means.

use crate::error::{HcrfError, Result};
use crate::imagedata::{clamp_prob, ProbMap, DEFAULT_EPSILON};

/// Half-width of the 7x7 pixel-binary window.
pub const PIXEL_BINARY_RADIUS: usize = 3;
/// Half-width of the 3x3 patch-binary window.
pub const PATCH_BINARY_RADIUS: usize = 1;

/// Identity of a patch-level probability source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceId {
    Alpha,
    Beta,
    Gamma,
}

impl SourceId {
    pub const ALL: [SourceId; 3] = [SourceId::Alpha, SourceId::Beta, SourceId::Gamma];

    pub fn name(self) -> &'static str {
        match self {
            SourceId::Alpha => "alpha",
            SourceId::Beta => "beta",
            SourceId::Gamma => "gamma",
        }
    }
}

impl std::str::FromStr for SourceId {
    type Err = HcrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SourceId::Alpha),
            "beta" => Ok(SourceId::Beta),
            "gamma" => Ok(SourceId::Gamma),
            other => Err(HcrfError::parameter(format!("unknown source {other:?}"))),
        }
    }
}

/// Per-patch foreground probability from one patch-level source.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchProbGrid {
    pub source: SourceId,
    /// One value per patch; width/height are the grid dimensions.
    pub probs: ProbMap,
}

impl PatchProbGrid {
    pub fn new(source: SourceId, probs: ProbMap) -> Self {
        PatchProbGrid { source, probs }
    }

    pub fn grid_width(&self) -> usize {
        self.probs.width()
    }

    pub fn grid_height(&self) -> usize {
        self.probs.height()
    }
}

/// Convex weights over the three patch sources.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl SourceWeights {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = SourceWeights { alpha, beta, gamma };
        if w.as_array().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(HcrfError::parameter(format!(
                "source weights ({alpha}, {beta}, {gamma}) must each lie in [0,1]"
            )));
        }
        if (alpha + beta + gamma - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(HcrfError::parameter(format!(
                "source weights ({alpha}, {beta}, {gamma}) must sum to 1"
            )));
        }
        Ok(w)
    }

    pub fn one_hot(source: SourceId) -> Self {
        let mut w = SourceWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        match source {
            SourceId::Alpha => w.alpha = 1.0,
            SourceId::Beta => w.beta = 1.0,
            SourceId::Gamma => w.gamma = 1.0,
        }
        w
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    pub fn sum(&self) -> f64 {
        self.alpha + self.beta + self.gamma
    }
}

impl std::fmt::Display for SourceWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:.4}, {:.4}, {:.4})", self.alpha, self.beta, self.gamma)
    }
}

/// Per-pixel class log-scores of one potential.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialField {
    pub width: usize,
    pub height: usize,
    pub fg_logscore: Vec<f64>,
    pub bg_logscore: Vec<f64>,
}

fn require_open_unit(map: &ProbMap, what: &str) -> Result<()> {
    if map.is_open_unit() {
        Ok(())
    } else {
        Err(HcrfError::Numeric(format!(
            "{what} contains 0 or 1; clamp probabilities before taking logs"
        )))
    }
}

/// `ln p` and `ln(1-p)` per pixel. The level weight is applied at fusion time.
pub fn pixel_unary(map: &ProbMap) -> Result<PotentialField> {
    require_open_unit(map, "pixel-unary map")?;
    Ok(PotentialField {
        width: map.width(),
        height: map.height(),
        fg_logscore: map.values().iter().map(|p| p.ln()).collect(),
        bg_logscore: map.values().iter().map(|p| (1.0 - p).ln()).collect(),
    })
}

/// Mean of each cell's `(2r+1)^2 - 1` neighbors, clipped to the raster.
/// A cell without any in-bounds neighbor (1x1 raster) keeps its own value.
pub(crate) fn neighborhood_mean(values: &[f64], width: usize, height: usize, radius: usize) -> Vec<f64> {
    // Summed-area table with a zero guard row/column.
    let sw = width + 1;
    let mut sat = vec![0.0f64; sw * (height + 1)];
    for y in 0..height {
        let mut row = 0.0;
        for x in 0..width {
            row += values[y * width + x];
            sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + row;
        }
    }
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let y0 = y.saturating_sub(radius);
        let y1 = (y + radius + 1).min(height);
        for x in 0..width {
            let x0 = x.saturating_sub(radius);
            let x1 = (x + radius + 1).min(width);
            let count = (y1 - y0) * (x1 - x0) - 1;
            let center = values[y * width + x];
            if count == 0 {
                out.push(center);
                continue;
            }
            let sum = sat[y1 * sw + x1] - sat[y0 * sw + x1] - sat[y1 * sw + x0] + sat[y0 * sw + x0];
            let mean = (sum - center) / count as f64;
            out.push(mean.clamp(0.0, 1.0));
        }
    }
    out
}

/// 48-neighborhood average of a clamped pixel probability map, re-clamped.
pub fn pixel_binary(map: &ProbMap) -> ProbMap {
    let values = neighborhood_mean(map.values(), map.width(), map.height(), PIXEL_BINARY_RADIUS);
    let averaged = ProbMap::from_unchecked(map.width(), map.height(), values);
    clamp_prob(&averaged, DEFAULT_EPSILON).expect("default epsilon is valid")
}

fn check_aligned(alpha: &PatchProbGrid, beta: &PatchProbGrid, gamma: &PatchProbGrid) -> Result<()> {
    if !alpha.probs.same_dims(&beta.probs) || !alpha.probs.same_dims(&gamma.probs) {
        return Err(HcrfError::parameter(format!(
            "patch grids differ in size: {}x{}, {}x{}, {}x{}",
            alpha.grid_width(),
            alpha.grid_height(),
            beta.grid_width(),
            beta.grid_height(),
            gamma.grid_width(),
            gamma.grid_height()
        )));
    }
    for g in [alpha, beta, gamma] {
        require_open_unit(&g.probs, &format!("patch source {}", g.source.name()))?;
    }
    Ok(())
}

/// Two-class renormalized weighted geometric product of three probabilities.
#[inline]
pub(crate) fn combine_three(p: [f64; 3], w: &[f64; 3]) -> f64 {
    let mut fg = 0.0;
    let mut bg = 0.0;
    for k in 0..3 {
        if w[k] != 0.0 {
            fg += w[k] * p[k].ln();
            bg += w[k] * (1.0 - p[k]).ln();
        }
    }
    // fg_score / (fg_score + bg_score) in the log domain
    1.0 / (1.0 + (bg - fg).exp())
}

fn combine_grids(a: &[f64], b: &[f64], c: &[f64], w: &SourceWeights) -> Vec<f64> {
    let wa = w.as_array();
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((&pa, &pb), &pc)| combine_three([pa, pb, pc], &wa))
        .collect()
}

/// Fused patch-unary probability: `Π p_s^w_s / (Π p_s^w_s + Π (1-p_s)^w_s)`.
/// The result carries `SourceId::Alpha` as a placeholder identity.
pub fn patch_unary_combined(
    alpha: &PatchProbGrid,
    beta: &PatchProbGrid,
    gamma: &PatchProbGrid,
    w: &SourceWeights,
) -> Result<PatchProbGrid> {
    check_aligned(alpha, beta, gamma)?;
    let values = combine_grids(alpha.probs.values(), beta.probs.values(), gamma.probs.values(), w);
    Ok(PatchProbGrid::new(
        SourceId::Alpha,
        ProbMap::from_unchecked(alpha.grid_width(), alpha.grid_height(), values),
    ))
}

/// 8-neighborhood average of one source grid, clamped.
pub fn patch_neighborhood_average(grid: &PatchProbGrid) -> PatchProbGrid {
    let (w, h) = (grid.grid_width(), grid.grid_height());
    let values = neighborhood_mean(grid.probs.values(), w, h, PATCH_BINARY_RADIUS);
    let averaged = ProbMap::from_unchecked(w, h, values);
    PatchProbGrid::new(
        grid.source,
        clamp_prob(&averaged, DEFAULT_EPSILON).expect("default epsilon is valid"),
    )
}

/// Fused patch-binary probability: each source is neighborhood-averaged
/// first, then the averaged grids are combined as in [`patch_unary_combined`].
pub fn patch_binary_combined(
    alpha: &PatchProbGrid,
    beta: &PatchProbGrid,
    gamma: &PatchProbGrid,
    w: &SourceWeights,
) -> Result<PatchProbGrid> {
    check_aligned(alpha, beta, gamma)?;
    patch_unary_combined(
        &patch_neighborhood_average(alpha),
        &patch_neighborhood_average(beta),
        &patch_neighborhood_average(gamma),
        w,
    )
}

/// Broadcasts every patch probability to its member pixels.
pub fn patch_to_pixel(grid: &PatchProbGrid, patch_size: usize) -> Result<ProbMap> {
    if patch_size == 0 {
        return Err(HcrfError::parameter("patch size must be positive"));
    }
    let (gw, gh) = (grid.grid_width(), grid.grid_height());
    let (w, h) = (gw * patch_size, gh * patch_size);
    let src = grid.probs.values();
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &src[(y / patch_size) * gw..(y / patch_size + 1) * gw];
        for x in 0..w {
            values.push(row[x / patch_size]);
        }
    }
    Ok(ProbMap::from_unchecked(w, h, values))
}
