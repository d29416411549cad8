//! MRF refinement by Iterated Conditional Modes and a single morphological
//! opening.

use std::fmt;
use std::str::FromStr;

use crate::error::{HcrfError, Result};
use crate::imagedata::{LabelMask, ProbMap};

pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_MAX_SWEEPS: usize = 10;
/// Opening radius at the reference 2048-pixel scale.
pub const REFERENCE_OPEN_RADIUS: usize = 5;
pub const REFERENCE_SCALE: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Neighborhood {
    Four,
    Eight,
}

impl Neighborhood {
    /// Half of the neighbor offsets; the other half are their negations.
    fn forward_offsets(self) -> &'static [(isize, isize)] {
        match self {
            Neighborhood::Four => &[(1, 0), (0, 1)],
            Neighborhood::Eight => &[(1, 0), (0, 1), (1, 1), (-1, 1)],
        }
    }

    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Neighborhood::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Neighborhood::Eight => &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)],
        }
    }
}

impl fmt::Display for Neighborhood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Neighborhood::Four => "4",
            Neighborhood::Eight => "8",
        })
    }
}

impl FromStr for Neighborhood {
    type Err = HcrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4" => Ok(Neighborhood::Four),
            "8" => Ok(Neighborhood::Eight),
            other => Err(HcrfError::parameter(format!(
                "neighborhood must be 4 or 8, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MrfConfig {
    pub beta: f64,
    pub max_sweeps: usize,
    pub neighborhood: Neighborhood,
}

impl Default for MrfConfig {
    fn default() -> Self {
        MrfConfig {
            beta: DEFAULT_BETA,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            neighborhood: Neighborhood::Eight,
        }
    }
}

impl MrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(HcrfError::parameter(format!(
                "beta {} must be finite and >= 0",
                self.beta
            )));
        }
        if self.max_sweeps < 1 {
            return Err(HcrfError::parameter("max_sweeps must be at least 1"));
        }
        Ok(())
    }
}

/// Refined labeling with the energy before the first sweep and after each sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct MrfOutcome {
    pub mask: LabelMask,
    pub energies: Vec<f64>,
    pub sweeps: usize,
}

/// Per-pixel data costs `[cost(0), cost(1)]` from a posterior.
pub(crate) fn posterior_costs(posterior: &ProbMap) -> Vec<[f64; 2]> {
    posterior.values().iter().map(|&p| [-(1.0 - p).ln(), -p.ln()]).collect()
}

pub(crate) fn energy(
    labels: &[u8],
    width: usize,
    height: usize,
    costs: &[[f64; 2]],
    beta: f64,
    nb: Neighborhood,
) -> f64 {
    let data: f64 = labels.iter().zip(costs).map(|(&l, c)| c[l as usize]).sum();
    if beta == 0.0 {
        return data;
    }
    let mut disagreements = 0u64;
    for y in 0..height {
        for x in 0..width {
            let l = labels[y * width + x];
            for &(dx, dy) in nb.forward_offsets() {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                    disagreements += (labels[ny as usize * width + nx as usize] != l) as u64;
                }
            }
        }
    }
    data + beta * disagreements as f64
}

/// One raster sweep of ICM; returns the number of changed labels. Ties
/// resolve to background.
pub(crate) fn icm_sweep(
    labels: &mut [u8],
    width: usize,
    height: usize,
    costs: &[[f64; 2]],
    beta: f64,
    nb: Neighborhood,
) -> usize {
    let mut changed = 0;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let mut fg_neighbors = 0usize;
            let mut total = 0usize;
            for &(dx, dy) in nb.offsets() {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                    total += 1;
                    fg_neighbors += labels[ny as usize * width + nx as usize] as usize;
                }
            }
            let cost0 = costs[i][0] + beta * fg_neighbors as f64;
            let cost1 = costs[i][1] + beta * (total - fg_neighbors) as f64;
            let new = (cost1 < cost0) as u8;
            if new != labels[i] {
                labels[i] = new;
                changed += 1;
            }
        }
    }
    changed
}

/// ICM on `E(X) = Σ −ln p(x_i) + β Σ_pairs 1[x_i ≠ x_j]`, keeping the energy trace.
pub fn mrf_refine_traced(labels: &LabelMask, posterior: &ProbMap, cfg: &MrfConfig) -> Result<MrfOutcome> {
    cfg.validate()?;
    let (w, h) = (posterior.width(), posterior.height());
    if !labels.same_dims(w, h) {
        return Err(HcrfError::parameter(format!(
            "labels are {}x{}, posterior is {w}x{h}",
            labels.width(),
            labels.height()
        )));
    }
    if !posterior.is_open_unit() {
        return Err(HcrfError::Numeric(
            "MRF posterior is not clamped away from 0 and 1".into(),
        ));
    }
    let costs = posterior_costs(posterior);
    let mut current = labels.labels().to_vec();
    let mut energies = vec![energy(&current, w, h, &costs, cfg.beta, cfg.neighborhood)];
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        let changed = icm_sweep(&mut current, w, h, &costs, cfg.beta, cfg.neighborhood);
        sweeps += 1;
        energies.push(energy(&current, w, h, &costs, cfg.beta, cfg.neighborhood));
        if changed == 0 {
            break;
        }
    }
    Ok(MrfOutcome {
        mask: LabelMask::new(w, h, current)?,
        energies,
        sweeps,
    })
}

pub fn mrf_refine(labels: &LabelMask, posterior: &ProbMap, cfg: &MrfConfig) -> Result<LabelMask> {
    mrf_refine_traced(labels, posterior, cfg).map(|o| o.mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SeShape {
    Disk,
    Square,
}

impl fmt::Display for SeShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeShape::Disk => "disk",
            SeShape::Square => "square",
        })
    }
}

impl FromStr for SeShape {
    type Err = HcrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(SeShape::Disk),
            "square" => Ok(SeShape::Square),
            other => Err(HcrfError::parameter(format!(
                "structuring element must be disk or square, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StructuringElement {
    pub shape: SeShape,
    pub radius: usize,
}

impl StructuringElement {
    pub fn new(shape: SeShape, radius: usize) -> Result<Self> {
        if radius < 1 {
            return Err(HcrfError::parameter("structuring element radius must be at least 1"));
        }
        Ok(StructuringElement { shape, radius })
    }

    /// Disk scaled from radius 5 at 2048 pixels to the shorter raster side.
    pub fn scaled_disk(width: usize, height: usize) -> Self {
        StructuringElement {
            shape: SeShape::Disk,
            radius: scaled_open_radius(width, height),
        }
    }

    /// Half-width of the element's row at vertical offset `dy`.
    fn half_width(&self, dy: usize) -> usize {
        match self.shape {
            SeShape::Square => self.radius,
            SeShape::Disk => {
                let r2 = self.radius * self.radius - dy * dy;
                let mut hw = (r2 as f64).sqrt() as usize;
                while (hw + 1) * (hw + 1) <= r2 {
                    hw += 1;
                }
                while hw * hw > r2 {
                    hw -= 1;
                }
                hw
            }
        }
    }

    /// Whether offset `(dx, dy)` belongs to the element.
    pub fn contains(&self, dx: isize, dy: isize) -> bool {
        let r = self.radius as isize;
        match self.shape {
            SeShape::Square => dx.abs() <= r && dy.abs() <= r,
            SeShape::Disk => dx * dx + dy * dy <= r * r,
        }
    }
}

pub fn scaled_open_radius(width: usize, height: usize) -> usize {
    let side = width.min(height) as f64;
    ((REFERENCE_OPEN_RADIUS as f64 * side / REFERENCE_SCALE as f64).round() as usize).max(1)
}

fn row_prefix(mask: &LabelMask) -> Vec<u32> {
    let (w, h) = (mask.width(), mask.height());
    let mut pre = vec![0u32; (w + 1) * h];
    for y in 0..h {
        for x in 0..w {
            pre[y * (w + 1) + x + 1] = pre[y * (w + 1) + x] + mask.labels()[y * w + x] as u32;
        }
    }
    pre
}

/// Foreground count of row `y` over `[x − hw, x + hw]` clipped, and the clipped length.
fn row_window(pre: &[u32], w: usize, y: usize, x: usize, hw: usize) -> (u32, u32) {
    let lo = x.saturating_sub(hw);
    let hi = (x + hw).min(w - 1);
    let base = y * (w + 1);
    (pre[base + hi + 1] - pre[base + lo], (hi - lo + 1) as u32)
}

/// Erosion; pixels outside the raster count as foreground.
pub fn erode(mask: &LabelMask, se: &StructuringElement) -> LabelMask {
    let (w, h) = (mask.width(), mask.height());
    let pre = row_prefix(mask);
    let r = se.radius;
    LabelMask::from_fn(w, h, |x, y| {
        (y.saturating_sub(r)..=(y + r).min(h - 1)).all(|yy| {
            let hw = se.half_width(yy.abs_diff(y));
            let (ones, len) = row_window(&pre, w, yy, x, hw);
            ones == len
        })
    })
}

/// Dilation; pixels outside the raster count as background.
pub fn dilate(mask: &LabelMask, se: &StructuringElement) -> LabelMask {
    let (w, h) = (mask.width(), mask.height());
    let pre = row_prefix(mask);
    let r = se.radius;
    LabelMask::from_fn(w, h, |x, y| {
        (y.saturating_sub(r)..=(y + r).min(h - 1)).any(|yy| {
            let hw = se.half_width(yy.abs_diff(y));
            row_window(&pre, w, yy, x, hw).0 > 0
        })
    })
}

/// Erosion followed by dilation with the same element.
pub fn morph_open(mask: &LabelMask, se: &StructuringElement) -> LabelMask {
    dilate(&erode(mask, se), se)
}

/// MRF refinement followed by one opening.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PostprocessConfig {
    pub mrf: MrfConfig,
    /// `None` selects the scaled disk for each raster.
    pub open: Option<StructuringElement>,
}

pub fn postprocess(labels: &LabelMask, posterior: &ProbMap, cfg: &PostprocessConfig) -> Result<LabelMask> {
    let refined = mrf_refine(labels, posterior, &cfg.mrf)?;
    let se = cfg
        .open
        .unwrap_or_else(|| StructuringElement::scaled_disk(refined.width(), refined.height()));
    Ok(morph_open(&refined, &se))
}
