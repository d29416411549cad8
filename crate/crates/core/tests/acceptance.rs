//! Acceptance suite: runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any criterion fails.

use std::collections::HashSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use hcrf_core::dataset::{augment_pair, patch_labels, tile, Manifest};
use hcrf_core::fusion::{derive_level_weights, hcrf_decode, LevelAccuracies, WeightSet};
use hcrf_core::imagedata::{clamp_prob, ConfusionCounts, ImageGrid, LabelMask, ProbMap, DEFAULT_EPSILON};
use hcrf_core::metrics::{compute_metrics, confusion};
use hcrf_core::pipeline::{run_pipeline, synth_dataset, PipelineConfig, SynthDatasetConfig};
use hcrf_core::postprocess::{morph_open, mrf_refine_traced, MrfConfig, Neighborhood, SeShape, StructuringElement};
use hcrf_core::potentials::{pixel_binary, SourceId, SourceWeights};
use hcrf_core::refsources::{reference_patch_sources, synth_pair, SourceConfig, SynthConfig};
use hcrf_core::weightopt::{
    enumerate_simplex, equal_weights, evaluate_candidates, evaluate_weights, grid_optimize, PatchSample, PotentialKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> LabelMask {
    LabelMask::from_fn(w, h, |_, _| rng.random_bool(density))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let density_p = rng.random_range(0.0..1.0);
        let density_g = rng.random_range(0.0..1.0);
        let pred = random_mask(&mut rng, 16, 16, density_p);
        let gt = random_mask(&mut rng, 16, 16, density_g);
        let c = confusion(&pred, &gt).map_err(|e| e.to_string())?;
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..16 {
            for x in 0..16 {
                match (pred.get(x, y), gt.get(x, y)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fn_ += 1,
                }
            }
        }
        ensure(c == ConfusionCounts::new(tp, fp, tn, fn_), || {
            format!("trial {trial}: counts {c:?}")
        })?;
        let r = compute_metrics(&c);
        let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
        let div = |a: f64, b: f64| (b > 0.0).then(|| a / b);
        let oracle = [
            div(2.0 * tp, 2.0 * tp + fp + fn_),
            div(tp, tp + fp + fn_),
            div(tp, tp + fp),
            div(tp, tp + fn_),
            div(tn, tn + fp),
            div(fp + tp, tp + fn_).map(|v| v.abs() - 1.0),
            div(tp + tn, tp + tn + fp + fn_),
        ];
        let got = [r.dice, r.iou, r.precision, r.recall, r.specificity, r.rvd, r.accuracy];
        for (k, (g, o)) in got.iter().zip(oracle).enumerate() {
            let ok = match (g, o) {
                (Some(g), Some(o)) => (g - o).abs() <= 1e-12,
                (None, None) => true,
                _ => false,
            };
            ensure(ok, || format!("trial {trial}: metric {k} {g:?} vs {o:?}"))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed.as_secs_f64() < 5.0, || format!("took {elapsed:?}"))?;
    Ok(format!("1000 pairs agree, {:.3}s", elapsed.as_secs_f64()))
}

fn criterion_2() -> Outcome {
    let r = compute_metrics(&ConfusionCounts::new(4, 1, 10, 1));
    let expected = [
        ("dice", r.dice, 0.8),
        ("iou", r.iou, 2.0 / 3.0),
        ("precision", r.precision, 0.8),
        ("recall", r.recall, 0.8),
        ("specificity", r.specificity, 10.0 / 11.0),
        ("rvd", r.rvd, 0.0),
        ("accuracy", r.accuracy, 0.875),
    ];
    for (name, got, want) in expected {
        let got = got.ok_or(format!("{name} undefined"))?;
        ensure((got - want).abs() <= 1e-9, || {
            format!("{name} = {got}, expected {want}")
        })?;
    }
    Ok("all seven values within 1e-9".into())
}

fn criterion_3() -> Outcome {
    let one = ImageGrid::gray(2048, 2048, vec![0; 2048 * 2048]).map_err(|e| e.to_string())?;
    let tiles = tile(&one, 256).map_err(|e| e.to_string())?;
    ensure(tiles.len() == 64, || format!("{} tiles", tiles.len()))?;
    let mask = LabelMask::filled(2048, 2048, false);
    let patches = patch_labels(&mask, 64, 2048).map_err(|e| e.to_string())?;
    ensure(patches.labels.len() == 1024, || {
        format!("{} patches", patches.labels.len())
    })?;
    let mut total = 0;
    for _ in 0..2 {
        for (img, _) in augment_pair(&one, &mask).map_err(|e| e.to_string())? {
            total += tile(&img, 256).map_err(|e| e.to_string())?.len();
        }
    }
    ensure(total == 768, || format!("{total} augmented tiles for 2 images"))?;
    let full_set = 140 * (total / 2);
    ensure(full_set == 53760, || format!("{full_set} tiles for 140 images"))?;
    Ok("64 tiles, 1024 patches, 768 augmented tiles for 2 images, 53760 for 140".into())
}

fn criterion_4() -> Outcome {
    let grid = enumerate_simplex(0.05).map_err(|e| e.to_string())?;
    ensure(grid.len() == 231, || format!("{} candidates", grid.len()))?;
    let mut seen = HashSet::new();
    for w in &grid {
        ensure((w.sum() - 1.0).abs() <= 1e-9, || format!("{w} sums to {}", w.sum()))?;
        let key = w.as_array().map(|v| (v * 20.0).round() as i64);
        ensure(seen.insert(key), || format!("duplicate {w}"))?;
    }
    Ok("231 unique candidates summing to 1".into())
}

/// Classifies with the product form of the weighted geometric fusion.
fn oracle_correct(samples: &[PatchSample], w: &SourceWeights) -> u64 {
    let mut correct = 0;
    for s in samples {
        for (i, &t) in s.truth.labels.iter().enumerate() {
            let p = [
                s.alpha.probs.values()[i],
                s.beta.probs.values()[i],
                s.gamma.probs.values()[i],
            ];
            let wa = w.as_array();
            let num: f64 = (0..3).map(|k| p[k].powf(wa[k])).product();
            let den: f64 = num + (0..3).map(|k| (1.0 - p[k]).powf(wa[k])).product::<f64>();
            correct += ((num / den > 0.5) as u8 == t) as u64;
        }
    }
    correct
}

fn criterion_5() -> Outcome {
    let mut samples = Vec::new();
    for i in 0..10u64 {
        let (_, gt) = synth_pair(&SynthConfig::new(2048, 2048, 500 + i)).map_err(|e| e.to_string())?;
        let truth = patch_labels(&gt, 64, 2048).map_err(|e| e.to_string())?;
        let cfgs = [
            SourceConfig::noiseless(3 * i),
            SourceConfig::noisy(0.4, 3 * i + 1),
            SourceConfig::noisy(0.4, 3 * i + 2),
        ];
        let [alpha, beta, gamma] = reference_patch_sources(&truth, &cfgs).map_err(|e| e.to_string())?;
        samples.push(PatchSample {
            alpha,
            beta,
            gamma,
            truth,
        });
    }
    ensure(
        samples
            .iter()
            .all(|s| s.truth.grid_width == 32 && s.truth.grid_height == 32),
        || "grid size".into(),
    )?;
    let start = Instant::now();
    let best = grid_optimize(&samples, PotentialKind::Unary, 0.05).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(best.weights.as_array() == [1.0, 0.0, 0.0], || {
        format!("returned {}", best.weights)
    })?;
    let scored = evaluate_candidates(&samples, PotentialKind::Unary, 0.05).map_err(|e| e.to_string())?;
    let mut oracle_best = 0;
    for c in &scored {
        let o = oracle_correct(&samples, &c.weights);
        ensure(o == c.correct, || {
            format!("{}: optimizer {} vs oracle {o}", c.weights, c.correct)
        })?;
        oracle_best = oracle_best.max(o);
    }
    ensure(best.correct == oracle_best, || {
        format!("best {} vs oracle max {oracle_best}", best.correct)
    })?;
    ensure(elapsed.as_secs_f64() < 10.0, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "(1,0,0) at accuracy {:.4}, 231 candidates re-evaluated, {:.3}s",
        best.accuracy(),
        elapsed.as_secs_f64()
    ))
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::default();
    let ds = SynthDatasetConfig {
        count: 10,
        width: 512,
        height: 512,
        n_blobs: 4,
        noise_sigma: 12.0,
        seed: 6,
    };
    synth_dataset(&dir.path().join("data"), &ds, &cfg).map_err(|e| e.to_string())?;
    let manifest = Manifest::read(dir.path().join("data/manifest.tsv")).map_err(|e| e.to_string())?;
    let summary = run_pipeline(&cfg, &manifest, &dir.path().join("run")).map_err(|e| e.to_string())?;
    let mut failures = Vec::new();
    for img in &summary.images {
        let r = compute_metrics(&img.post);
        if r.dice != Some(1.0) || r.rvd != Some(0.0) {
            failures.push(format!(
                "{} dice={:.6} rvd={:.2e} fp={} fn={}",
                img.stem,
                r.dice.unwrap_or(f64::NAN),
                r.rvd.unwrap_or(f64::NAN),
                img.post.fp,
                img.post.fn_
            ));
        }
    }
    let agg = summary.aggregate_post.report;
    let detail = format!(
        "aggregate dice={:.6} rvd={:.2e}",
        agg.dice.unwrap_or(f64::NAN),
        agg.rvd.unwrap_or(f64::NAN)
    );
    if failures.is_empty() {
        Ok(format!("10/10 images exact, {detail}"))
    } else {
        Err(format!(
            "{}/10 images inexact ({}); {detail}",
            failures.len(),
            failures.join("; ")
        ))
    }
}

fn criterion_7() -> Outcome {
    let mut worst_vs_single = f64::INFINITY;
    let mut worst_vs_equal = f64::INFINITY;
    let mut equal_failures = Vec::new();
    for set in 0..20u64 {
        let mut samples = Vec::new();
        for i in 0..4u64 {
            let seed = 7000 + set * 10 + i;
            let (_, gt) = synth_pair(&SynthConfig::new(1024, 1024, seed)).map_err(|e| e.to_string())?;
            let truth = patch_labels(&gt, 64, 2048).map_err(|e| e.to_string())?;
            let cfgs = [
                SourceConfig::noisy(0.3, seed * 3),
                SourceConfig::noisy(0.3, seed * 3 + 1),
                SourceConfig::noisy(0.3, seed * 3 + 2),
            ];
            let [alpha, beta, gamma] = reference_patch_sources(&truth, &cfgs).map_err(|e| e.to_string())?;
            samples.push(PatchSample {
                alpha,
                beta,
                gamma,
                truth,
            });
        }
        let best = grid_optimize(&samples, PotentialKind::Unary, 0.05)
            .map_err(|e| e.to_string())?
            .accuracy();
        let single = SourceId::ALL
            .iter()
            .map(|&s| {
                evaluate_weights(&samples, PotentialKind::Unary, &SourceWeights::one_hot(s)).map(|c| c.accuracy())
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?
            .into_iter()
            .fold(0.0, f64::max);
        let equal = evaluate_weights(&samples, PotentialKind::Unary, &equal_weights())
            .map_err(|e| e.to_string())?
            .accuracy();
        ensure(best >= single, || {
            format!("set {set}: optimized {best} < best single {single}")
        })?;
        worst_vs_single = worst_vs_single.min(best - single);
        worst_vs_equal = worst_vs_equal.min(best - equal);
        if best < equal {
            equal_failures.push(format!("set {set}: optimized {best:.4} < equal {equal:.4}"));
        }
    }
    if equal_failures.is_empty() {
        Ok(format!(
            "20 sets; min margin over best single {worst_vs_single:.4}, over equal weights {worst_vs_equal:.4}"
        ))
    } else {
        Err(equal_failures.join("; "))
    }
}

fn criterion_8() -> Outcome {
    let mut before = 0usize;
    let mut after = 0usize;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let (w, h) = (256usize, 256usize);
        let target = w * h / 100;
        let mut salt = vec![false; w * h];
        let mut placed = 0;
        while placed < target {
            let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
            let crowded = (y.saturating_sub(1)..=(y + 1).min(h - 1))
                .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| salt[yy * w + xx]));
            if !crowded {
                salt[y * w + x] = true;
                placed += 1;
            }
        }
        let raw = ProbMap::new(w, h, salt.iter().map(|&s| s as u8 as f64).collect()).map_err(|e| e.to_string())?;
        let clamped = clamp_prob(&raw, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
        let isolated_fp = |m: &LabelMask| {
            let mut n = 0;
            for y in 0..h {
                for x in 0..w {
                    if !m.get(x, y) {
                        continue;
                    }
                    let alone = (y.saturating_sub(1)..=(y + 1).min(h - 1)).all(|yy| {
                        (x.saturating_sub(1)..=(x + 1).min(w - 1)).all(|xx| (xx, yy) == (x, y) || !m.get(xx, yy))
                    });
                    n += alone as usize;
                }
            }
            n
        };
        before += isolated_fp(&clamped.threshold());
        after += isolated_fp(&pixel_binary(&clamped).threshold());
    }
    let reduction = 1.0 - after as f64 / before as f64;
    ensure(before > 0 && reduction >= 0.95, || {
        format!("isolated FPs {before} -> {after}")
    })?;
    Ok(format!(
        "isolated FPs {before} -> {after} ({:.1}% reduction)",
        100.0 * reduction
    ))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut sweeps = 0;
    for trial in 0..100 {
        let vals: Vec<f64> = (0..64 * 64).map(|_| rng.random::<f64>()).collect();
        let post = clamp_prob(&ProbMap::new(64, 64, vals).map_err(|e| e.to_string())?, DEFAULT_EPSILON)
            .map_err(|e| e.to_string())?;
        let init = random_mask(&mut rng, 64, 64, 0.5);
        let cfg = MrfConfig {
            beta: rng.random_range(0.1..3.0),
            max_sweeps: 30,
            neighborhood: if trial % 2 == 0 {
                Neighborhood::Eight
            } else {
                Neighborhood::Four
            },
        };
        let out = mrf_refine_traced(&init, &post, &cfg).map_err(|e| e.to_string())?;
        for pair in out.energies.windows(2) {
            ensure(pair[1] <= pair[0], || {
                format!("trial {trial}: energy rose {} -> {}", pair[0], pair[1])
            })?;
        }
        sweeps += out.sweeps;
        let zero = MrfConfig { beta: 0.0, ..cfg };
        let flat = mrf_refine_traced(&init, &post, &zero).map_err(|e| e.to_string())?;
        ensure(flat.mask == post.threshold(), || {
            format!("trial {trial}: beta=0 differs from thresholding")
        })?;
    }
    Ok(format!(
        "100 problems, {sweeps} sweeps, energies non-increasing; beta=0 exact"
    ))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..100 {
        let density = rng.random_range(0.2..0.95);
        let m = random_mask(&mut rng, 64, 64, density);
        let shape = if trial % 2 == 0 { SeShape::Disk } else { SeShape::Square };
        let se = StructuringElement::new(shape, 1 + trial % 5).map_err(|e| e.to_string())?;
        let once = morph_open(&m, &se);
        ensure(once.labels().iter().zip(m.labels()).all(|(&o, &i)| o <= i), || {
            format!("trial {trial}: not anti-extensive")
        })?;
        ensure(morph_open(&once, &se) == once, || {
            format!("trial {trial}: not idempotent")
        })?;
    }
    let mut single = LabelMask::filled(9, 9, false);
    single.set(4, 4, true);
    let out = morph_open(
        &single,
        &StructuringElement::new(SeShape::Disk, 1).map_err(|e| e.to_string())?,
    );
    ensure(out.foreground_count() == 0, || "isolated pixel survived".into())?;
    Ok("100 masks idempotent and anti-extensive; isolated pixel removed".into())
}

fn criterion_11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..50 {
        let (w, h) = (rng.random_range(4..40), rng.random_range(4..40));
        let mut map = || -> Result<ProbMap, String> {
            let v: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
            clamp_prob(&ProbMap::new(w, h, v).map_err(|e| e.to_string())?, DEFAULT_EPSILON).map_err(|e| e.to_string())
        };
        let maps = [map()?, map()?, map()?, map()?];
        let ws = WeightSet::new(rng.random(), rng.random(), rng.random(), rng.random()).map_err(|e| e.to_string())?;
        let base = hcrf_decode(&maps[0], &maps[1], &maps[2], &maps[3], &ws).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let c = 10f64.powf(rng.random_range(-3.0..3.0));
            let scaled = ws.scaled(c).map_err(|e| e.to_string())?;
            let d = hcrf_decode(&maps[0], &maps[1], &maps[2], &maps[3], &scaled).map_err(|e| e.to_string())?;
            ensure(d.mask == base.mask, || {
                format!("trial {trial}: mask changed under scale {c}")
            })?;
        }
    }
    Ok("50 fixtures x 5 scales, masks unchanged".into())
}

fn criterion_12() -> Outcome {
    let w = derive_level_weights(&LevelAccuracies {
        pixel_unary: 0.7787,
        pixel_binary: 0.7793,
        patch_unary: 0.7450,
        patch_binary: 0.7540,
    })
    .map_err(|e| e.to_string())?;
    let want = [0.0787, 0.0793, 0.0450, 0.0540];
    for (g, e) in w.as_array().iter().zip(want) {
        ensure((g - e).abs() <= 1e-12, || format!("{g} vs {e}"))?;
    }
    Ok("(0.0787, 0.0793, 0.0450, 0.0540)".into())
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn criterion_13() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = PipelineConfig::default();
    cfg.set("tile_size", "128").map_err(|e| e.to_string())?;
    cfg.set("weights", "optimize").map_err(|e| e.to_string())?;
    cfg.set("pixel_source_sigma", "0.2").map_err(|e| e.to_string())?;
    cfg.set("patch_source_sigmas", "0.2,0.3,0.4")
        .map_err(|e| e.to_string())?;
    cfg.set("seed", "13").map_err(|e| e.to_string())?;
    let ds = SynthDatasetConfig {
        count: 4,
        width: 256,
        height: 256,
        n_blobs: 3,
        noise_sigma: 12.0,
        seed: 13,
    };
    synth_dataset(&dir.path().join("data"), &ds, &cfg).map_err(|e| e.to_string())?;
    let manifest = Manifest::read(dir.path().join("data/manifest.tsv")).map_err(|e| e.to_string())?;
    run_pipeline(&cfg, &manifest, &dir.path().join("a")).map_err(|e| e.to_string())?;
    run_pipeline(&cfg, &manifest, &dir.path().join("b")).map_err(|e| e.to_string())?;
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    ensure(!a.is_empty(), || "empty run directory".into())?;
    ensure(a.len() == b.len(), || format!("{} vs {} files", a.len(), b.len()))?;
    for ((na, ca), (nb, cb)) in a.iter().zip(&b) {
        ensure(na == nb && ca == cb, || format!("{na} differs from {nb}"))?;
    }
    for needed in ["masks", "posteriors", "reports", "config.resolved"] {
        ensure(a.iter().any(|(n, _)| n.starts_with(needed)), || {
            format!("missing {needed}")
        })?;
    }
    Ok(format!("{} files byte-identical across runs", a.len()))
}

fn main() {
    let criteria: [Criterion; 13] = [
        ("metric oracle equivalence", criterion_1),
        ("metric spot values", criterion_2),
        ("geometry arithmetic", criterion_3),
        ("simplex enumeration", criterion_4),
        ("grid-search oracle", criterion_5),
        ("fusion consistency on noiseless sources", criterion_6),
        ("fusion dominance", criterion_7),
        ("pixel-binary denoising", criterion_8),
        ("ICM monotonicity", criterion_9),
        ("morphology laws", criterion_10),
        ("argmax weight invariance", criterion_11),
        ("level weight rule", criterion_12),
        ("determinism", criterion_13),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|a| a == &n.to_string()) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
