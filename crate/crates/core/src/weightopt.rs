//! Patch-source weight search over the step-0.05 simplex, plus the 1:1:1
//! late-fusion baseline.
//!
//! A candidate is scored by pooled patch accuracy: every patch of every
//! sample is fused with the candidate weights, thresholded at 0.5 (ties to
//! background) and compared against its ground-truth patch label.
//! Candidates with equal accuracy are ordered by their worst-case margin,
//! the smallest signed fused log-odds over all patches (positive when the
//! patch is on the correct side), and remaining ties (within a relative
//! 1e-9) go to the first candidate in lexicographic order.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::dataset::PatchLabelGrid;
use crate::error::{HcrfError, Result};
use crate::potentials::{combine_three, patch_neighborhood_average, PatchProbGrid, SourceWeights};

/// Step length of the weight grid.
pub const DEFAULT_STEP: f64 = 0.05;

/// Which patch potential the weights are tuned for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PotentialKind {
    Unary,
    Binary,
}

impl PotentialKind {
    pub fn name(self) -> &'static str {
        match self {
            PotentialKind::Unary => "unary",
            PotentialKind::Binary => "binary",
        }
    }

    /// Conventional report file name.
    pub fn report_file(self) -> &'static str {
        match self {
            PotentialKind::Unary => "weights_unary.txt",
            PotentialKind::Binary => "weights_binary.txt",
        }
    }
}

impl FromStr for PotentialKind {
    type Err = HcrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unary" => Ok(PotentialKind::Unary),
            "binary" => Ok(PotentialKind::Binary),
            other => Err(HcrfError::parameter(format!("unknown potential kind {other:?}"))),
        }
    }
}

/// Enumerates all convex triples whose components are multiples of `step`,
/// in lexicographic order.
pub fn enumerate_simplex(step: f64) -> Result<Vec<SourceWeights>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(HcrfError::parameter(format!("simplex step {step} must lie in (0, 1]")));
    }
    let inv = 1.0 / step;
    let n = inv.round();
    if (inv - n).abs() > 1e-9 {
        return Err(HcrfError::parameter(format!("1/step = {inv} is not an integer")));
    }
    let n = n as usize;
    let mut out = Vec::with_capacity((n + 1) * (n + 2) / 2);
    for i in 0..=n {
        for j in 0..=n - i {
            let k = n - i - j;
            out.push(SourceWeights {
                alpha: i as f64 / n as f64,
                beta: j as f64 / n as f64,
                gamma: k as f64 / n as f64,
            });
        }
    }
    Ok(out)
}

/// The 1:1:1 late-fusion weights.
pub fn equal_weights() -> SourceWeights {
    let third = 1.0 / 3.0;
    SourceWeights {
        alpha: third,
        beta: third,
        gamma: third,
    }
}

/// Three aligned source grids and the ground truth for one image.
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub alpha: PatchProbGrid,
    pub beta: PatchProbGrid,
    pub gamma: PatchProbGrid,
    pub truth: PatchLabelGrid,
}

impl PatchSample {
    fn check(&self) -> Result<()> {
        let (gw, gh) = (self.truth.grid_width, self.truth.grid_height);
        for g in [&self.alpha, &self.beta, &self.gamma] {
            if g.grid_width() != gw || g.grid_height() != gh {
                return Err(HcrfError::parameter(format!(
                    "source {} grid is {}x{}, labels are {gw}x{gh}",
                    g.source.name(),
                    g.grid_width(),
                    g.grid_height()
                )));
            }
            if !g.probs.is_open_unit() {
                return Err(HcrfError::Numeric(format!(
                    "source {} grid is not clamped",
                    g.source.name()
                )));
            }
        }
        Ok(())
    }

    /// The sample with each source replaced by its 8-neighborhood average.
    pub fn neighborhood_averaged(&self) -> PatchSample {
        PatchSample {
            alpha: patch_neighborhood_average(&self.alpha),
            beta: patch_neighborhood_average(&self.beta),
            gamma: patch_neighborhood_average(&self.gamma),
            truth: self.truth.clone(),
        }
    }

    pub fn patch_count(&self) -> usize {
        self.truth.labels.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightCandidate {
    pub weights: SourceWeights,
    pub correct: u64,
    pub total: u64,
    /// Smallest signed fused log-odds over all patches.
    pub min_margin: f64,
}

impl WeightCandidate {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Correct-patch count and worst-case margin under fused weights `w`.
pub fn score(samples: &[PatchSample], w: &SourceWeights) -> (u64, f64) {
    let wa = w.as_array();
    let mut correct = 0u64;
    let mut margin = f64::INFINITY;
    for s in samples {
        let (a, b, c) = (s.alpha.probs.values(), s.beta.probs.values(), s.gamma.probs.values());
        for (i, &t) in s.truth.labels.iter().enumerate() {
            let p = [a[i], b[i], c[i]];
            let fused = combine_three(p, &wa);
            correct += ((fused > 0.5) as u8 == t) as u64;
            let log_odds: f64 = (0..3).map(|k| wa[k] * (p[k].ln() - (1.0 - p[k]).ln())).sum();
            margin = margin.min(if t == 1 { log_odds } else { -log_odds });
        }
    }
    (correct, margin)
}

fn candidate(samples: &[PatchSample], w: &SourceWeights, total: u64) -> WeightCandidate {
    let (correct, min_margin) = score(samples, w);
    WeightCandidate {
        weights: *w,
        correct,
        total,
        min_margin,
    }
}

fn prepared(samples: &[PatchSample], kind: PotentialKind) -> Result<Vec<PatchSample>> {
    if samples.is_empty() {
        return Err(HcrfError::parameter("weight optimization needs at least one sample"));
    }
    for s in samples {
        s.check()?;
    }
    Ok(match kind {
        PotentialKind::Unary => samples.to_vec(),
        PotentialKind::Binary => samples.iter().map(PatchSample::neighborhood_averaged).collect(),
    })
}

/// Scores the given weights on the samples (pooled accuracy).
pub fn evaluate_weights(samples: &[PatchSample], kind: PotentialKind, w: &SourceWeights) -> Result<WeightCandidate> {
    let prepared = prepared(samples, kind)?;
    let total = prepared.iter().map(|s| s.patch_count() as u64).sum();
    Ok(candidate(&prepared, w, total))
}

/// Scores every simplex candidate, in enumeration order.
pub fn evaluate_candidates(samples: &[PatchSample], kind: PotentialKind, step: f64) -> Result<Vec<WeightCandidate>> {
    let candidates = enumerate_simplex(step)?;
    let prepared = prepared(samples, kind)?;
    let total: u64 = prepared.iter().map(|s| s.patch_count() as u64).sum();
    Ok(candidates.par_iter().map(|w| candidate(&prepared, w, total)).collect())
}

/// Exhaustive search: highest accuracy, then largest worst-case margin, then
/// earliest in lexicographic order.
pub fn grid_optimize(samples: &[PatchSample], kind: PotentialKind, step: f64) -> Result<WeightCandidate> {
    let scored = evaluate_candidates(samples, kind, step)?;
    let mut best = scored[0];
    for c in &scored[1..] {
        let tol = 1e-9 * best.min_margin.abs().max(1.0);
        if c.correct > best.correct || (c.correct == best.correct && c.min_margin > best.min_margin + tol) {
            best = *c;
        }
    }
    Ok(best)
}

/// `alpha=… beta=… gamma=… accuracy=…` optimizer report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightReport {
    pub weights: SourceWeights,
    pub accuracy: f64,
}

impl fmt::Display for WeightReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "alpha={:.4} beta={:.4} gamma={:.4} accuracy={:.6}",
            self.weights.alpha, self.weights.beta, self.weights.gamma, self.accuracy
        )
    }
}

impl FromStr for WeightReport {
    type Err = HcrfError;

    fn from_str(s: &str) -> Result<Self> {
        let mut vals = [None; 4];
        for tok in s.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| HcrfError::format(format!("bad weight report token {tok:?}")))?;
            let idx = match k {
                "alpha" => 0,
                "beta" => 1,
                "gamma" => 2,
                "accuracy" => 3,
                other => return Err(HcrfError::format(format!("unknown weight report key {other:?}"))),
            };
            vals[idx] = Some(
                v.parse::<f64>()
                    .map_err(|_| HcrfError::format(format!("bad number {v:?} for {k}")))?,
            );
        }
        match vals {
            [Some(a), Some(b), Some(g), Some(acc)] => Ok(WeightReport {
                weights: SourceWeights::new(a, b, g)
                    .map_err(|e| HcrfError::format(format!("invalid weights in report: {e}")))?,
                accuracy: acc,
            }),
            _ => Err(HcrfError::format("weight report needs alpha, beta, gamma and accuracy")),
        }
    }
}

pub fn write_weight_report(report: &WeightReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report.to_string()).map_err(|e| HcrfError::io(path, e))
}

pub fn read_weight_report(path: impl AsRef<Path>) -> Result<WeightReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| HcrfError::io(path, e))?;
    text.parse()
        .map_err(|e: HcrfError| e.context(format!("reading {}", path.display())))
}
