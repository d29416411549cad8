//! End-to-end run: probability maps → potentials → fusion → MRF + opening →
//! metrics, written to a deterministic run directory.
//!
//! Run directory layout:
//!
//! ```text
//! config.resolved
//! masks/<stem>.hcrf.pgm        fused MAP labeling
//! masks/<stem>.post.pgm        after MRF and opening
//! posteriors/<stem>.posterior.hpm
//! reports/metrics.kv           final masks, key=value
//! reports/metrics.txt          final masks, table
//! reports/metrics_hcrf.kv      fused masks before post-processing
//! reports/level_weights.txt
//! reports/weights_unary.txt
//! reports/weights_binary.txt
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::dataset::{
    patch_labels, Manifest, ManifestEntry, DEFAULT_PATCH_SIZE, DEFAULT_PATCH_THRESHOLD, DEFAULT_TILE_SIZE,
};
use crate::error::{HcrfError, Result};
use crate::fusion::{derive_level_weights, hcrf_decode, Decoded, LevelAccuracies, WeightSet};
use crate::imagedata::{
    clamp_prob, read_image, read_mask, read_probmap, write_image, write_mask, write_probmap, ConfusionCounts,
    LabelMask, ProbMap, Raster, DEFAULT_EPSILON,
};
use crate::metrics::{aggregate, confusion, render_key_value, render_table, Aggregation, ImageEvaluation};
use crate::postprocess::{postprocess, MrfConfig, Neighborhood, PostprocessConfig, SeShape, StructuringElement};
use crate::potentials::{
    patch_binary_combined, patch_to_pixel, patch_unary_combined, pixel_binary, PatchProbGrid, SourceId, SourceWeights,
};
use crate::refsources::{reference_patch_sources, reference_pixel_source, synth_pair, SourceConfig, SynthConfig};
use crate::weightopt::{
    evaluate_weights, grid_optimize, write_weight_report, PatchSample, PotentialKind, WeightReport, DEFAULT_STEP,
};

/// Validation accuracies of the four potentials used when nothing else is configured.
pub const DEFAULT_LEVEL_ACCURACIES: LevelAccuracies = LevelAccuracies {
    pixel_unary: 0.7787,
    pixel_binary: 0.7793,
    patch_unary: 0.7450,
    patch_binary: 0.7540,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LevelSpec {
    Accuracies(LevelAccuracies),
    Weights(WeightSet),
    /// Accuracies measured on the optimization set.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SourceSpec {
    Fixed(SourceWeights),
    Optimize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub tile_size: usize,
    pub patch_size: usize,
    pub patch_threshold: usize,
    pub epsilon: f64,
    pub level: LevelSpec,
    pub unary_weights: SourceSpec,
    pub binary_weights: SourceSpec,
    /// Manifest used for weight optimization and `auto` levels; the run manifest when unset.
    pub optimize_manifest: Option<PathBuf>,
    pub mrf: MrfConfig,
    /// `None` scales a disk to each raster.
    pub open_radius: Option<usize>,
    pub open_shape: SeShape,
    pub aggregation: Aggregation,
    pub seed: u64,
    /// Generate missing probability maps from the ground truth.
    pub refsources: bool,
    pub pixel_source_sigma: f64,
    pub patch_source_sigmas: [f64; 3],
    pub source_smooth_radius: usize,
    pub manifest: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tile_size: DEFAULT_TILE_SIZE,
            patch_size: DEFAULT_PATCH_SIZE,
            patch_threshold: DEFAULT_PATCH_THRESHOLD,
            epsilon: DEFAULT_EPSILON,
            level: LevelSpec::Accuracies(DEFAULT_LEVEL_ACCURACIES),
            unary_weights: SourceSpec::Optimize,
            binary_weights: SourceSpec::Optimize,
            optimize_manifest: None,
            mrf: MrfConfig::default(),
            open_radius: None,
            open_shape: SeShape::Disk,
            aggregation: Aggregation::PerImageMean,
            seed: 0,
            refsources: false,
            pixel_source_sigma: 0.0,
            patch_source_sigmas: [0.0; 3],
            source_smooth_radius: 0,
            manifest: None,
        }
    }
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(HcrfError::parameter(format!(
            "{key} needs {N} comma-separated numbers, got {value:?}"
        )));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse()
            .map_err(|_| HcrfError::parameter(format!("{key}: {p:?} is not a number")))?;
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| HcrfError::parameter(format!("{key}: invalid value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(HcrfError::parameter(format!(
            "{key}: expected true or false, got {other:?}"
        ))),
    }
}

fn parse_source_spec(key: &str, value: &str) -> Result<SourceSpec> {
    if value.trim() == "optimize" {
        return Ok(SourceSpec::Optimize);
    }
    let [a, b, g] = parse_list::<3>(key, value)?;
    Ok(SourceSpec::Fixed(
        SourceWeights::new(a, b, g).map_err(|e| e.context(key.to_string()))?,
    ))
}

fn list(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "tile_size" => self.tile_size = parse_num(key, value)?,
            "patch_size" => self.patch_size = parse_num(key, value)?,
            "patch_threshold" => self.patch_threshold = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "level_weights" => {
                self.level = if value == "auto" {
                    LevelSpec::Auto
                } else {
                    let [a, b, c, d] = parse_list::<4>(key, value)?;
                    LevelSpec::Weights(WeightSet::new(a, b, c, d)?)
                }
            }
            "level_accuracies" => {
                let [a, b, c, d] = parse_list::<4>(key, value)?;
                self.level = LevelSpec::Accuracies(LevelAccuracies {
                    pixel_unary: a,
                    pixel_binary: b,
                    patch_unary: c,
                    patch_binary: d,
                });
            }
            "unary_weights" => self.unary_weights = parse_source_spec(key, value)?,
            "binary_weights" => self.binary_weights = parse_source_spec(key, value)?,
            "weights" => {
                let spec = parse_source_spec(key, value)?;
                self.unary_weights = spec;
                self.binary_weights = spec;
            }
            "optimize_manifest" => self.optimize_manifest = (!value.is_empty()).then(|| PathBuf::from(value)),
            "beta" => self.mrf.beta = parse_num(key, value)?,
            "max_sweeps" => self.mrf.max_sweeps = parse_num(key, value)?,
            "neighborhood" => self.mrf.neighborhood = value.parse::<Neighborhood>()?,
            "open_radius" => {
                self.open_radius = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                };
            }
            "open_shape" => self.open_shape = value.parse()?,
            "aggregation" => self.aggregation = value.parse()?,
            "seed" => self.seed = parse_num(key, value)?,
            "refsources" => self.refsources = parse_bool(key, value)?,
            "pixel_source_sigma" => self.pixel_source_sigma = parse_num(key, value)?,
            "patch_source_sigmas" => self.patch_source_sigmas = parse_list::<3>(key, value)?,
            "source_smooth_radius" => self.source_smooth_radius = parse_num(key, value)?,
            "manifest" => self.manifest = (!value.is_empty()).then(|| PathBuf::from(value)),
            other => return Err(HcrfError::parameter(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HcrfError::parameter(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v).map_err(|e| e.context(format!("line {}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HcrfError::io(path, e))?;
        PipelineConfig::parse(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.tile_size == 0 {
            return Err(HcrfError::parameter("tile and patch sizes must be positive"));
        }
        if !self.tile_size.is_multiple_of(self.patch_size) {
            return Err(HcrfError::parameter(format!(
                "tile size {} is not a multiple of patch size {}",
                self.tile_size, self.patch_size
            )));
        }
        if self.patch_threshold > self.patch_size * self.patch_size {
            return Err(HcrfError::parameter(format!(
                "patch threshold {} exceeds patch area {}",
                self.patch_threshold,
                self.patch_size * self.patch_size
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(HcrfError::parameter(format!(
                "epsilon {} must lie in (0, 0.5)",
                self.epsilon
            )));
        }
        self.mrf.validate()?;
        if self.open_radius == Some(0) {
            return Err(HcrfError::parameter("open_radius must be at least 1"));
        }
        Ok(())
    }

    /// Every setting as `key=value`, in a fixed order.
    pub fn render(&self) -> String {
        let mut kv: Vec<(&str, String)> = vec![
            ("tile_size", self.tile_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("patch_threshold", self.patch_threshold.to_string()),
            ("epsilon", self.epsilon.to_string()),
        ];
        match self.level {
            LevelSpec::Auto => kv.push(("level_weights", "auto".into())),
            LevelSpec::Weights(w) => kv.push(("level_weights", list(&w.as_array()))),
            LevelSpec::Accuracies(a) => kv.push(("level_accuracies", list(&a.as_array()))),
        }
        for (key, spec) in [
            ("unary_weights", self.unary_weights),
            ("binary_weights", self.binary_weights),
        ] {
            kv.push((
                key,
                match spec {
                    SourceSpec::Optimize => "optimize".into(),
                    SourceSpec::Fixed(w) => list(&w.as_array()),
                },
            ));
        }
        if let Some(p) = &self.optimize_manifest {
            kv.push(("optimize_manifest", p.display().to_string()));
        }
        kv.extend([
            ("beta", self.mrf.beta.to_string()),
            ("max_sweeps", self.mrf.max_sweeps.to_string()),
            ("neighborhood", self.mrf.neighborhood.to_string()),
            ("open_radius", self.open_radius.map_or("auto".into(), |r| r.to_string())),
            ("open_shape", self.open_shape.to_string()),
            ("aggregation", self.aggregation.to_string()),
            ("seed", self.seed.to_string()),
            ("refsources", self.refsources.to_string()),
            ("pixel_source_sigma", self.pixel_source_sigma.to_string()),
            ("patch_source_sigmas", list(&self.patch_source_sigmas)),
            ("source_smooth_radius", self.source_smooth_radius.to_string()),
        ]);
        if let Some(p) = &self.manifest {
            kv.push(("manifest", p.display().to_string()));
        }
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn postprocess_config(&self) -> Result<PostprocessConfig> {
        Ok(PostprocessConfig {
            mrf: self.mrf,
            open: match self.open_radius {
                Some(r) => Some(StructuringElement::new(self.open_shape, r)?),
                None => None,
            },
        })
    }

    /// Opening element for a `w`×`h` raster.
    pub fn structuring_element(&self, w: usize, h: usize) -> StructuringElement {
        StructuringElement {
            shape: self.open_shape,
            radius: self
                .open_radius
                .unwrap_or_else(|| StructuringElement::scaled_disk(w, h).radius),
        }
    }
}

/// Pixel map plus the three patch grids of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceMaps {
    pub pixel: ProbMap,
    pub patches: [PatchProbGrid; 3],
}

pub fn image_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `<dir>/<stem>.pixel.hpm`
pub fn pixel_map_path(image: &Path) -> PathBuf {
    image.with_file_name(format!("{}.pixel.hpm", image_stem(image)))
}

/// `<dir>/<stem>.patch.<source>.hpm`
pub fn patch_map_path(image: &Path, source: SourceId) -> PathBuf {
    image.with_file_name(format!("{}.patch.{}.hpm", image_stem(image), source.name()))
}

/// Deterministic per-image, per-source seed.
pub fn derive_seed(seed: u64, image_index: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(image_index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(stream.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn source_configs(cfg: &PipelineConfig, index: u64) -> (SourceConfig, [SourceConfig; 3]) {
    let mk = |sigma: f64, stream: u64| SourceConfig {
        corruption_sigma: sigma,
        smooth_radius: cfg.source_smooth_radius,
        bias: 0.0,
        seed: derive_seed(cfg.seed, index, stream),
    };
    let p = cfg.patch_source_sigmas;
    (mk(cfg.pixel_source_sigma, 0), [mk(p[0], 1), mk(p[1], 2), mk(p[2], 3)])
}

/// Generates reference maps for a ground-truth mask.
pub fn reference_maps(gt: &LabelMask, cfg: &PipelineConfig, index: u64) -> Result<SourceMaps> {
    let (pixel_cfg, patch_cfgs) = source_configs(cfg, index);
    let truth = patch_labels(gt, cfg.patch_size, cfg.patch_threshold)?;
    Ok(SourceMaps {
        pixel: reference_pixel_source(gt, &pixel_cfg)?,
        patches: reference_patch_sources(&truth, &patch_cfgs)?,
    })
}

/// Reads the four maps stored next to `image`.
pub fn read_source_maps(image: &Path) -> Result<SourceMaps> {
    let pixel = read_probmap(pixel_map_path(image))?;
    let mut grids = Vec::with_capacity(3);
    for s in SourceId::ALL {
        grids.push(PatchProbGrid::new(s, read_probmap(patch_map_path(image, s))?));
    }
    let [a, b, g]: [PatchProbGrid; 3] = grids.try_into().expect("three grids");
    Ok(SourceMaps {
        pixel,
        patches: [a, b, g],
    })
}

/// Rounds a posterior to its stored float32 precision.
pub fn stored_posterior(posterior: &ProbMap) -> ProbMap {
    ProbMap::from_unchecked(
        posterior.width(),
        posterior.height(),
        posterior.values().iter().map(|&v| v as f32 as f64).collect(),
    )
}

fn load_or_generate(entry: &ManifestEntry, gt: &LabelMask, cfg: &PipelineConfig, index: u64) -> Result<SourceMaps> {
    let pixel_path = pixel_map_path(&entry.image);
    let patch_paths = SourceId::ALL.map(|s| patch_map_path(&entry.image, s));
    let all_present = pixel_path.exists() && patch_paths.iter().all(|p| p.exists());
    if !all_present {
        if cfg.refsources {
            return reference_maps(gt, cfg, index);
        }
        let missing = std::iter::once(&pixel_path)
            .chain(patch_paths.iter())
            .find(|p| !p.exists())
            .expect("a map is missing");
        return Err(HcrfError::Io {
            path: missing.clone(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "probability map not found and refsources disabled",
            ),
        });
    }
    read_source_maps(&entry.image)
}

/// Checks geometry and clamps every map.
pub fn prepare_maps(maps: SourceMaps, width: usize, height: usize, cfg: &PipelineConfig) -> Result<SourceMaps> {
    if maps.pixel.width() != width || maps.pixel.height() != height {
        return Err(HcrfError::parameter(format!(
            "pixel map is {}x{}, image is {width}x{height}",
            maps.pixel.width(),
            maps.pixel.height()
        )));
    }
    let (gw, gh) = (width / cfg.patch_size, height / cfg.patch_size);
    let mut patches = Vec::with_capacity(3);
    for g in maps.patches {
        if g.grid_width() != gw || g.grid_height() != gh {
            return Err(HcrfError::parameter(format!(
                "patch map {} is {}x{}, expected {gw}x{gh}",
                g.source.name(),
                g.grid_width(),
                g.grid_height()
            )));
        }
        patches.push(PatchProbGrid::new(g.source, clamp_prob(&g.probs, cfg.epsilon)?));
    }
    let [a, b, g]: [PatchProbGrid; 3] = patches.try_into().expect("three grids");
    Ok(SourceMaps {
        pixel: clamp_prob(&maps.pixel, cfg.epsilon)?,
        patches: [a, b, g],
    })
}

/// Four pixel-aligned potential maps.
pub struct PotentialMaps {
    pub pixel_unary: ProbMap,
    pub pixel_binary: ProbMap,
    pub patch_unary: ProbMap,
    pub patch_binary: ProbMap,
}

pub fn potential_maps(
    maps: &SourceMaps,
    unary: &SourceWeights,
    binary: &SourceWeights,
    patch_size: usize,
) -> Result<PotentialMaps> {
    let [a, b, g] = &maps.patches;
    Ok(PotentialMaps {
        pixel_unary: maps.pixel.clone(),
        pixel_binary: pixel_binary(&maps.pixel),
        patch_unary: patch_to_pixel(&patch_unary_combined(a, b, g, unary)?, patch_size)?,
        patch_binary: patch_to_pixel(&patch_binary_combined(a, b, g, binary)?, patch_size)?,
    })
}

/// Potentials and MAP decoding of one image's clamped maps.
pub fn fuse_maps(
    maps: &SourceMaps,
    level: &WeightSet,
    unary: &SourceWeights,
    binary: &SourceWeights,
    patch_size: usize,
) -> Result<Decoded> {
    let p = potential_maps(maps, unary, binary, patch_size)?;
    hcrf_decode(&p.pixel_unary, &p.pixel_binary, &p.patch_unary, &p.patch_binary, level)
}

/// One loaded manifest entry.
struct Loaded {
    stem: String,
    gt: LabelMask,
    maps: SourceMaps,
}

fn load_entry(entry: &ManifestEntry, cfg: &PipelineConfig, index: u64) -> Result<Loaded> {
    let ctx = |e: HcrfError| e.context(format!("image {}", entry.image.display()));
    let image = read_image(&entry.image).map_err(ctx)?;
    let gt = read_mask(&entry.mask).map_err(|e| e.context(format!("mask {}", entry.mask.display())))?;
    let (w, h) = (image.width(), image.height());
    if !gt.same_dims(w, h) {
        return Err(ctx(HcrfError::parameter(format!(
            "mask {} is {}x{}, image is {w}x{h}",
            entry.mask.display(),
            gt.width(),
            gt.height()
        ))));
    }
    if w % cfg.tile_size != 0 || h % cfg.tile_size != 0 {
        return Err(ctx(HcrfError::parameter(format!(
            "{w}x{h} is not divisible by tile size {}",
            cfg.tile_size
        ))));
    }
    let maps = load_or_generate(entry, &gt, cfg, index).map_err(ctx)?;
    let maps = prepare_maps(maps, w, h, cfg).map_err(ctx)?;
    Ok(Loaded {
        stem: image_stem(&entry.image),
        gt,
        maps,
    })
}

fn load_all(manifest: &Manifest, cfg: &PipelineConfig) -> Result<Vec<Loaded>> {
    manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| load_entry(e, cfg, i as u64))
        .collect()
}

fn patch_samples(loaded: &[Loaded], cfg: &PipelineConfig) -> Result<Vec<PatchSample>> {
    loaded
        .iter()
        .map(|l| {
            let [alpha, beta, gamma] = l.maps.patches.clone();
            Ok(PatchSample {
                alpha,
                beta,
                gamma,
                truth: patch_labels(&l.gt, cfg.patch_size, cfg.patch_threshold)?,
            })
        })
        .collect()
}

fn resolve_sources(spec: SourceSpec, samples: &[PatchSample], kind: PotentialKind) -> Result<WeightReport> {
    let c = match spec {
        SourceSpec::Optimize => grid_optimize(samples, kind, DEFAULT_STEP)?,
        SourceSpec::Fixed(w) => evaluate_weights(samples, kind, &w)?,
    };
    Ok(WeightReport {
        weights: c.weights,
        accuracy: c.accuracy(),
    })
}

fn pixel_accuracy(map: &ProbMap, gt: &LabelMask) -> (u64, u64) {
    let t = map.threshold();
    let ok = t.labels().iter().zip(gt.labels()).filter(|(a, b)| a == b).count() as u64;
    (ok, gt.labels().len() as u64)
}

/// Pooled pixel accuracy of each thresholded potential.
fn measure_levels(
    loaded: &[Loaded],
    unary: &SourceWeights,
    binary: &SourceWeights,
    patch_size: usize,
) -> Result<LevelAccuracies> {
    let mut ok = [0u64; 4];
    let mut total = 0u64;
    for l in loaded {
        let p = potential_maps(&l.maps, unary, binary, patch_size)?;
        for (k, m) in [&p.pixel_unary, &p.pixel_binary, &p.patch_unary, &p.patch_binary]
            .iter()
            .enumerate()
        {
            ok[k] += pixel_accuracy(m, &l.gt).0;
        }
        total += l.gt.labels().len() as u64;
    }
    let a = ok.map(|c| c as f64 / total as f64);
    Ok(LevelAccuracies {
        pixel_unary: a[0],
        pixel_binary: a[1],
        patch_unary: a[2],
        patch_binary: a[3],
    })
}

/// Weights the run actually used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedWeights {
    pub level: WeightSet,
    pub level_accuracies: Option<LevelAccuracies>,
    pub unary: WeightReport,
    pub binary: WeightReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageOutcome {
    pub stem: String,
    pub hcrf: ConfusionCounts,
    pub post: ConfusionCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub weights: ResolvedWeights,
    pub images: Vec<ImageOutcome>,
    pub aggregate_hcrf: crate::metrics::AggregateReport,
    pub aggregate_post: crate::metrics::AggregateReport,
}

/// Resolves level and source weights against an optimization set.
pub fn resolve_weights(cfg: &PipelineConfig, manifest: &Manifest) -> Result<ResolvedWeights> {
    cfg.validate()?;
    let opt_manifest = match &cfg.optimize_manifest {
        Some(p) => Manifest::read(p)?,
        None => manifest.clone(),
    };
    if opt_manifest.is_empty() {
        return Err(HcrfError::parameter("optimization manifest is empty"));
    }
    let loaded = load_all(&opt_manifest, cfg)?;
    let samples = patch_samples(&loaded, cfg)?;
    let unary = resolve_sources(cfg.unary_weights, &samples, PotentialKind::Unary)?;
    let binary = resolve_sources(cfg.binary_weights, &samples, PotentialKind::Binary)?;
    let (level, level_accuracies) = match cfg.level {
        LevelSpec::Weights(w) => (w, None),
        LevelSpec::Accuracies(a) => (derive_level_weights(&a)?, Some(a)),
        LevelSpec::Auto => {
            let a = measure_levels(&loaded, &unary.weights, &binary.weights, cfg.patch_size)?;
            (
                derive_level_weights(&a).map_err(|e| e.context("measured level accuracies"))?,
                Some(a),
            )
        }
    };
    Ok(ResolvedWeights {
        level,
        level_accuracies,
        unary,
        binary,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| HcrfError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HcrfError::io(path, e))
}

/// Reads the first line of a `level_weights.txt` report.
pub fn parse_level_weights(text: &str) -> Result<WeightSet> {
    let line = text.lines().next().unwrap_or_default();
    let mut vals = [None; 4];
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| HcrfError::format(format!("bad level weight token {tok:?}")))?;
        let idx = match k {
            "pixel_unary" => 0,
            "pixel_binary" => 1,
            "patch_unary" => 2,
            "patch_binary" => 3,
            other => return Err(HcrfError::format(format!("unknown level weight key {other:?}"))),
        };
        vals[idx] = Some(
            v.parse::<f64>()
                .map_err(|_| HcrfError::format(format!("bad number {v:?} for {k}")))?,
        );
    }
    match vals {
        [Some(a), Some(b), Some(c), Some(d)] => WeightSet::new(a, b, c, d),
        _ => Err(HcrfError::format(
            "level weights need pixel_unary, pixel_binary, patch_unary and patch_binary",
        )),
    }
}

pub fn render_level_weights(w: &ResolvedWeights) -> String {
    let mut out = String::new();
    let l = w.level;
    writeln!(
        out,
        "pixel_unary={} pixel_binary={} patch_unary={} patch_binary={}",
        l.pixel_unary, l.pixel_binary, l.patch_unary, l.patch_binary
    )
    .unwrap();
    if let Some(a) = w.level_accuracies {
        writeln!(
            out,
            "accuracies pixel_unary={} pixel_binary={} patch_unary={} patch_binary={}",
            a.pixel_unary, a.pixel_binary, a.patch_unary, a.patch_binary
        )
        .unwrap();
    }
    out
}

/// Runs the full workflow and writes the run directory.
pub fn run_pipeline(cfg: &PipelineConfig, manifest: &Manifest, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    if manifest.is_empty() {
        return Err(HcrfError::parameter("run manifest is empty"));
    }
    let weights = resolve_weights(cfg, manifest)?;
    let loaded = load_all(manifest, cfg)?;
    let mut seen = BTreeMap::new();
    for (l, e) in loaded.iter().zip(&manifest.entries) {
        if let Some(prev) = seen.insert(l.stem.clone(), e.image.clone()) {
            return Err(HcrfError::parameter(format!(
                "images {} and {} share the stem {:?}",
                prev.display(),
                e.image.display(),
                l.stem
            )));
        }
    }

    struct Processed {
        decoded: Decoded,
        post: LabelMask,
    }
    let processed: Vec<Processed> = loaded
        .par_iter()
        .map(|l| {
            let ctx = |e: HcrfError| e.context(format!("image {}", l.stem));
            let mut decoded = fuse_maps(
                &l.maps,
                &weights.level,
                &weights.unary.weights,
                &weights.binary.weights,
                cfg.patch_size,
            )
            .map_err(ctx)?;
            decoded.posterior = stored_posterior(&decoded.posterior);
            let pp = PostprocessConfig {
                mrf: cfg.mrf,
                open: Some(cfg.structuring_element(l.gt.width(), l.gt.height())),
            };
            let clamped = clamp_prob(&decoded.posterior, cfg.epsilon).map_err(ctx)?;
            let post = postprocess(&decoded.mask, &clamped, &pp).map_err(ctx)?;
            Ok(Processed { decoded, post })
        })
        .collect::<Result<_>>()?;

    let masks = out_dir.join("masks");
    let posteriors = out_dir.join("posteriors");
    let reports = out_dir.join("reports");
    for d in [&masks, &posteriors, &reports] {
        create_dir(d)?;
    }
    let mut images = Vec::with_capacity(loaded.len());
    for (l, p) in loaded.iter().zip(&processed) {
        write_mask(&p.decoded.mask, masks.join(format!("{}.hcrf.pgm", l.stem)))?;
        write_mask(&p.post, masks.join(format!("{}.post.pgm", l.stem)))?;
        write_probmap(
            &p.decoded.posterior,
            posteriors.join(format!("{}.posterior.hpm", l.stem)),
        )?;
        images.push(ImageOutcome {
            stem: l.stem.clone(),
            hcrf: confusion(&p.decoded.mask, &l.gt)?,
            post: confusion(&p.post, &l.gt)?,
        });
    }

    let rows = |pick: fn(&ImageOutcome) -> ConfusionCounts| -> Vec<ImageEvaluation> {
        images
            .iter()
            .map(|i| ImageEvaluation::new(i.stem.clone(), pick(i)))
            .collect()
    };
    let post_rows = rows(|i| i.post);
    let hcrf_rows = rows(|i| i.hcrf);
    let aggregate_post = aggregate(&post_rows.iter().map(|r| r.counts).collect::<Vec<_>>(), cfg.aggregation)?;
    let aggregate_hcrf = aggregate(&hcrf_rows.iter().map(|r| r.counts).collect::<Vec<_>>(), cfg.aggregation)?;
    write_file(
        &reports.join("metrics.kv"),
        render_key_value(&post_rows, &aggregate_post),
    )?;
    write_file(&reports.join("metrics.txt"), render_table(&post_rows, &aggregate_post))?;
    write_file(
        &reports.join("metrics_hcrf.kv"),
        render_key_value(&hcrf_rows, &aggregate_hcrf),
    )?;
    write_file(&reports.join("level_weights.txt"), render_level_weights(&weights))?;
    write_weight_report(&weights.unary, reports.join(PotentialKind::Unary.report_file()))?;
    write_weight_report(&weights.binary, reports.join(PotentialKind::Binary.report_file()))?;
    write_file(&out_dir.join("config.resolved"), cfg.render())?;

    Ok(RunSummary {
        weights,
        images,
        aggregate_hcrf,
        aggregate_post,
    })
}

/// Settings for writing a synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthDatasetConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub n_blobs: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Writes `<stem>.pgm`, `<stem>.mask.pgm`, the four probability maps per
/// image and `manifest.tsv`; returns the manifest (paths relative to `dir`).
pub fn synth_dataset(dir: &Path, ds: &SynthDatasetConfig, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(ds.count);
    for i in 0..ds.count {
        let synth = SynthConfig {
            n_blobs: ds.n_blobs,
            noise_sigma: ds.noise_sigma,
            ..SynthConfig::new(ds.width, ds.height, derive_seed(ds.seed, i as u64, 7))
        };
        let (image, gt) = synth_pair(&synth)?;
        let stem = format!("synth_{i:04}");
        let image_path = dir.join(format!("{stem}.pgm"));
        let mask_path = dir.join(format!("{stem}.mask.pgm"));
        write_image(&image, &image_path)?;
        write_mask(&gt, &mask_path)?;
        let maps = reference_maps(&gt, cfg, i as u64)?;
        write_probmap(&maps.pixel, pixel_map_path(&image_path))?;
        for g in &maps.patches {
            write_probmap(&g.probs, patch_map_path(&image_path, g.source))?;
        }
        entries.push(ManifestEntry {
            image: image_path,
            mask: mask_path,
        });
    }
    let manifest = Manifest::new(entries);
    manifest.write(dir.join("manifest.tsv"))?;
    Ok(manifest)
}
