use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hcrf_core::baselines::{segment, BaselineConfig, BaselineMethod};
use hcrf_core::dataset::{augment_pair, patch_labels, split_dataset, stitch, tile, Dihedral, Manifest};
use hcrf_core::fusion::derive_level_weights;
use hcrf_core::imagedata::{
    clamp_prob, read_image, read_mask, read_probmap, write_image, write_mask, write_probmap, Raster,
};
use hcrf_core::metrics::{compute_metrics, confusion, Metric};
use hcrf_core::pipeline::{
    fuse_maps, image_stem, parse_level_weights, prepare_maps, read_source_maps, render_level_weights, resolve_weights,
    run_pipeline, stored_posterior, synth_dataset, LevelSpec, PipelineConfig, SourceSpec, SynthDatasetConfig,
};
use hcrf_core::postprocess::postprocess;
use hcrf_core::weightopt::{read_weight_report, write_weight_report, PotentialKind};
use hcrf_core::{HcrfError, Result};

#[derive(Parser)]
#[command(name = "hcrf", version, about = "Hierarchical CRF fusion for tissue segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus overrides shared by the pipeline-shaped subcommands.
#[derive(Args, Default)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Source weights for both potentials: `optimize` or a,b,c
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    max_sweeps: Option<usize>,
    /// 4 or 8
    #[arg(long)]
    neighborhood: Option<String>,
    /// Opening radius or `auto`
    #[arg(long)]
    open_radius: Option<String>,
    /// disk or square
    #[arg(long)]
    open_shape: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// per_image_mean or pooled
    #[arg(long)]
    aggregation: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::read(p)?,
            None => PipelineConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| HcrfError::parameter(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        let seed = self.seed.map(|s| s.to_string());
        let beta = self.beta.map(|b| b.to_string());
        let sweeps = self.max_sweeps.map(|s| s.to_string());
        let flags = [
            ("weights", self.weights.as_deref()),
            ("beta", beta.as_deref()),
            ("max_sweeps", sweeps.as_deref()),
            ("neighborhood", self.neighborhood.as_deref()),
            ("open_radius", self.open_radius.as_deref()),
            ("open_shape", self.open_shape.as_deref()),
            ("seed", seed.as_deref()),
            ("aggregation", self.aggregation.as_deref()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Partition a manifest 1:1:2 into train/val/test manifests
    Split {
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the six flip/rotation variants of an image and its mask
    Augment {
        image: PathBuf,
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop a PGM/PPM raster into square tiles
    Tile {
        input: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reassemble row-major tiles
    Stitch {
        #[arg(long)]
        cols: usize,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        tiles: Vec<PathBuf>,
    },
    /// Label each patch of a mask by its foreground count
    LabelPatches {
        mask: PathBuf,
        #[arg(long, default_value_t = 64)]
        patch: usize,
        #[arg(long, default_value_t = 2048)]
        threshold: usize,
        /// Write the grid as a mask with one pixel per patch
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse the stored probability maps of one image
    Fuse {
        image: PathBuf,
        /// Directory holding weights_unary.txt, weights_binary.txt and level_weights.txt
        #[arg(long)]
        weights_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Grid-search source weights and resolve level weights on a manifest
    OptimizeWeights {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// MRF refinement followed by morphological opening
    Postprocess {
        mask: PathBuf,
        posterior: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Classical segmentation baseline
    Baseline {
        image: PathBuf,
        /// otsu, watershed, kmeans or kmeans_mrf
        #[arg(long)]
        method: String,
        /// Treat the lighter class as foreground
        #[arg(long)]
        invert: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted mask with ground truth
    Evaluate { pred: PathBuf, gt: PathBuf },
    /// Write a synthetic dataset with reference probability maps
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 512)]
        height: usize,
        #[arg(long, default_value_t = 4)]
        blobs: usize,
        /// Gaussian noise on image intensities
        #[arg(long, default_value_t = 12.0)]
        noise: f64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the full workflow into a run directory
    Run {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HcrfError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HcrfError::io(path, e))
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| HcrfError::io(path, e))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |v| format!("{v:.6}"))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split { manifest, seed, out } => {
            let m = Manifest::read(&manifest)?;
            let split = split_dataset(&m, seed)?;
            create_dir(&out)?;
            let base = absolute(&out)?;
            for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
                let abs = Manifest::new(
                    part.entries
                        .iter()
                        .map(|e| {
                            Ok(hcrf_core::dataset::ManifestEntry {
                                image: absolute(&e.image)?,
                                mask: absolute(&e.mask)?,
                            })
                        })
                        .collect::<Result<_>>()?,
                );
                write_text(&out.join(format!("{name}.tsv")), &abs.render(Some(&base)))?;
                println!("{name}={}", part.len());
            }
        }
        Command::Augment { image, mask, out } => {
            let img = read_image(&image)?;
            let gt = read_mask(&mask)?;
            create_dir(&out)?;
            let stem = image_stem(&image);
            for ((a, m), d) in augment_pair(&img, &gt)?.into_iter().zip(Dihedral::ALL) {
                write_image(&a, out.join(format!("{stem}.{}.pgm", d.name())))?;
                write_mask(&m, out.join(format!("{stem}.{}.mask.pgm", d.name())))?;
            }
            println!("wrote {} pairs", Dihedral::ALL.len());
        }
        Command::Tile { input, size, out } => {
            let img = read_image(&input)?;
            let tiles = tile(&img, size)?;
            create_dir(&out)?;
            let (cols, rows) = (img.width() / size, img.height() / size);
            let stem = image_stem(&input);
            for (i, t) in tiles.iter().enumerate() {
                write_image(t, out.join(format!("{stem}.r{:03}c{:03}.pgm", i / cols, i % cols)))?;
            }
            println!("tiles={} cols={cols} rows={rows}", tiles.len());
        }
        Command::Stitch { cols, rows, out, tiles } => {
            let imgs = tiles.iter().map(read_image).collect::<Result<Vec<_>>>()?;
            let full = stitch(&imgs, (cols, rows))?;
            write_image(&full, &out)?;
            println!("width={} height={}", full.width(), full.height());
        }
        Command::LabelPatches {
            mask,
            patch,
            threshold,
            out,
        } => {
            let grid = patch_labels(&read_mask(&mask)?, patch, threshold)?;
            println!(
                "grid={}x{} patches={} positive={}",
                grid.grid_width,
                grid.grid_height,
                grid.labels.len(),
                grid.positive_count()
            );
            if let Some(out) = out {
                write_mask(&grid.to_mask(), out)?;
            }
        }
        Command::Fuse {
            image,
            weights_dir,
            out,
            config,
        } => {
            let mut cfg = config.load()?;
            let level = match &weights_dir {
                Some(dir) => {
                    let path = dir.join("level_weights.txt");
                    let text = fs::read_to_string(&path).map_err(|e| HcrfError::io(&path, e))?;
                    parse_level_weights(&text).map_err(|e| e.context(path.display().to_string()))?
                }
                None => match cfg.level {
                    LevelSpec::Weights(w) => w,
                    LevelSpec::Accuracies(a) => derive_level_weights(&a)?,
                    LevelSpec::Auto => {
                        return Err(HcrfError::parameter(
                            "level_weights=auto needs ground truth; use optimize-weights and --weights-dir",
                        ))
                    }
                },
            };
            if let Some(dir) = &weights_dir {
                cfg.unary_weights =
                    SourceSpec::Fixed(read_weight_report(dir.join(PotentialKind::Unary.report_file()))?.weights);
                cfg.binary_weights =
                    SourceSpec::Fixed(read_weight_report(dir.join(PotentialKind::Binary.report_file()))?.weights);
            }
            let (SourceSpec::Fixed(unary), SourceSpec::Fixed(binary)) = (cfg.unary_weights, cfg.binary_weights) else {
                return Err(HcrfError::parameter(
                    "fuse needs fixed source weights; pass --weights a,b,c or --weights-dir",
                ));
            };
            let img = read_image(&image)?;
            let maps = prepare_maps(read_source_maps(&image)?, img.width(), img.height(), &cfg)
                .map_err(|e| e.context(format!("image {}", image.display())))?;
            let decoded = fuse_maps(&maps, &level, &unary, &binary, cfg.patch_size)?;
            create_dir(&out)?;
            let stem = image_stem(&image);
            write_mask(&decoded.mask, out.join(format!("{stem}.hcrf.pgm")))?;
            write_probmap(
                &stored_posterior(&decoded.posterior),
                out.join(format!("{stem}.posterior.hpm")),
            )?;
            println!("foreground={}", decoded.mask.foreground_count());
        }
        Command::OptimizeWeights { manifest, out, config } => {
            let cfg = config.load()?;
            let m = Manifest::read(&manifest)?;
            let w = resolve_weights(&cfg, &m)?;
            create_dir(&out)?;
            write_weight_report(&w.unary, out.join(PotentialKind::Unary.report_file()))?;
            write_weight_report(&w.binary, out.join(PotentialKind::Binary.report_file()))?;
            write_text(&out.join("level_weights.txt"), &render_level_weights(&w))?;
            print!("unary {}binary {}", w.unary, w.binary);
        }
        Command::Postprocess {
            mask,
            posterior,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let labels = read_mask(&mask)?;
            let post = clamp_prob(&read_probmap(&posterior)?, cfg.epsilon)?;
            let pp = hcrf_core::postprocess::PostprocessConfig {
                mrf: cfg.mrf,
                open: Some(cfg.structuring_element(labels.width(), labels.height())),
            };
            let refined = postprocess(&labels, &post, &pp)?;
            write_mask(&refined, &out)?;
            println!("foreground={}", refined.foreground_count());
        }
        Command::Baseline {
            image,
            method,
            invert,
            seed,
            out,
        } => {
            let mut cfg = BaselineConfig::new(method.parse::<BaselineMethod>()?);
            cfg.invert = invert;
            cfg.kmeans_seed = seed;
            let mask = segment(&read_image(&image)?, &cfg)?;
            write_mask(&mask, &out)?;
            println!("method={} foreground={}", cfg.method, mask.foreground_count());
        }
        Command::Evaluate { pred, gt } => {
            let c = confusion(&read_mask(&pred)?, &read_mask(&gt)?)?;
            let r = compute_metrics(&c);
            println!("tp={} fp={} tn={} fn={}", c.tp, c.fp, c.tn, c.fn_);
            for m in Metric::ALL {
                println!("{}={}", m.name(), fmt_metric(r.get(m)));
            }
        }
        Command::Synth {
            out,
            count,
            width,
            height,
            blobs,
            noise,
            config,
        } => {
            let cfg = config.load()?;
            let ds = SynthDatasetConfig {
                count,
                width,
                height,
                n_blobs: blobs,
                noise_sigma: noise,
                seed: cfg.seed,
            };
            let m = synth_dataset(&out, &ds, &cfg)?;
            println!("images={} manifest={}", m.len(), out.join("manifest.tsv").display());
        }
        Command::Run { manifest, out, config } => {
            let mut cfg = config.load()?;
            let manifest_path = manifest
                .or_else(|| cfg.manifest.clone())
                .ok_or_else(|| HcrfError::parameter("no manifest: pass --manifest or set manifest= in the config"))?;
            cfg.manifest = Some(absolute(&manifest_path)?);
            if let Some(p) = &cfg.optimize_manifest {
                cfg.optimize_manifest = Some(absolute(p)?);
            }
            let m = Manifest::read(&manifest_path)?;
            let summary = run_pipeline(&cfg, &m, &out)?;
            let w = &summary.weights;
            print!("unary {}binary {}", w.unary, w.binary);
            let agg = &summary.aggregate_post;
            let line: Vec<String> = Metric::ALL
                .iter()
                .map(|&k| format!("{}={}", k.name(), fmt_metric(agg.report.get(k))))
                .collect();
            println!("images={} {}", agg.images, line.join(" "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            let prefix = format!("{} error", e.category());
            if msg.starts_with(&prefix) {
                eprintln!("{msg}");
            } else {
                eprintln!("{prefix}: {msg}");
            }
            ExitCode::FAILURE
        }
    }
}
