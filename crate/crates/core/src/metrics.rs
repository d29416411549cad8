//! Confusion counting, the seven segmentation criteria and set aggregation.
//!
//! A metric whose denominator is zero is `None` rather than a number.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{HcrfError, Result};
use crate::imagedata::{ConfusionCounts, LabelMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Dice,
    Iou,
    Precision,
    Recall,
    Specificity,
    Rvd,
    Accuracy,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Dice,
        Metric::Iou,
        Metric::Precision,
        Metric::Recall,
        Metric::Specificity,
        Metric::Rvd,
        Metric::Accuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Iou => "iou",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::Specificity => "specificity",
            Metric::Rvd => "rvd",
            Metric::Accuracy => "accuracy",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MetricReport {
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub rvd: Option<f64>,
    pub accuracy: Option<f64>,
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Dice => self.dice,
            Metric::Iou => self.iou,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::Specificity => self.specificity,
            Metric::Rvd => self.rvd,
            Metric::Accuracy => self.accuracy,
        }
    }

    fn set(&mut self, m: Metric, v: Option<f64>) {
        let slot = match m {
            Metric::Dice => &mut self.dice,
            Metric::Iou => &mut self.iou,
            Metric::Precision => &mut self.precision,
            Metric::Recall => &mut self.recall,
            Metric::Specificity => &mut self.specificity,
            Metric::Rvd => &mut self.rvd,
            Metric::Accuracy => &mut self.accuracy,
        };
        *slot = v;
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Tallies pixels by (prediction, truth).
pub fn confusion(pred: &LabelMask, gt: &LabelMask) -> Result<ConfusionCounts> {
    if !pred.same_dims(gt.width(), gt.height()) {
        return Err(HcrfError::parameter(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let w = pred.width().max(1);
    Ok(pred
        .labels()
        .par_chunks(w)
        .zip(gt.labels().par_chunks(w))
        .map(|(p, g)| {
            let mut c = ConfusionCounts::default();
            for (&p, &g) in p.iter().zip(g) {
                match (p, g) {
                    (1, 1) => c.tp += 1,
                    (1, _) => c.fp += 1,
                    (_, 1) => c.fn_ += 1,
                    _ => c.tn += 1,
                }
            }
            c
        })
        .sum())
}

pub fn compute_metrics(c: &ConfusionCounts) -> MetricReport {
    let ConfusionCounts { tp, fp, tn, fn_ } = *c;
    MetricReport {
        dice: ratio(2 * tp, 2 * tp + fp + fn_),
        iou: ratio(tp, tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        rvd: ratio(fp + tp, tp + fn_).map(|r| r.abs() - 1.0),
        accuracy: ratio(tp + tn, tp + tn + fp + fn_),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Aggregation {
    #[default]
    PerImageMean,
    Pooled,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::PerImageMean => "per_image_mean",
            Aggregation::Pooled => "pooled",
        })
    }
}

impl FromStr for Aggregation {
    type Err = HcrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_image_mean" => Ok(Aggregation::PerImageMean),
            "pooled" => Ok(Aggregation::Pooled),
            other => Err(HcrfError::parameter(format!(
                "aggregation must be per_image_mean or pooled, got {other:?}"
            ))),
        }
    }
}

/// Set-level report plus, per metric, how many images had it undefined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregateReport {
    pub mode: Aggregation,
    pub report: MetricReport,
    pub undefined: [usize; 7],
    pub images: usize,
}

pub fn aggregate(counts: &[ConfusionCounts], mode: Aggregation) -> Result<AggregateReport> {
    if counts.is_empty() {
        return Err(HcrfError::parameter("cannot aggregate an empty list"));
    }
    let reports: Vec<MetricReport> = counts.iter().map(compute_metrics).collect();
    let mut undefined = [0usize; 7];
    for (k, m) in Metric::ALL.iter().enumerate() {
        undefined[k] = reports.iter().filter(|r| r.get(*m).is_none()).count();
    }
    let report = match mode {
        Aggregation::Pooled => compute_metrics(&counts.iter().copied().sum()),
        Aggregation::PerImageMean => mean_reports(&reports)?,
    };
    Ok(AggregateReport {
        mode,
        report,
        undefined,
        images: counts.len(),
    })
}

/// Mean of each metric over the reports where it is defined.
pub fn mean_reports(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(HcrfError::parameter("cannot aggregate an empty list"));
    }
    let mut out = MetricReport::default();
    for m in Metric::ALL {
        let defined: Vec<f64> = reports.iter().filter_map(|r| r.get(m)).collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        out.set(m, mean);
    }
    Ok(out)
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "undefined".to_string(),
    }
}

/// Per-image evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEvaluation {
    pub name: String,
    pub counts: ConfusionCounts,
    pub report: MetricReport,
}

impl ImageEvaluation {
    pub fn new(name: impl Into<String>, counts: ConfusionCounts) -> Self {
        ImageEvaluation {
            name: name.into(),
            counts,
            report: compute_metrics(&counts),
        }
    }
}

/// Machine-readable report: one `image=` line per image and one `aggregate` line.
pub fn render_key_value(rows: &[ImageEvaluation], agg: &AggregateReport) -> String {
    let mut out = String::new();
    for r in rows {
        let c = r.counts;
        write!(out, "image={} tp={} fp={} tn={} fn={}", r.name, c.tp, c.fp, c.tn, c.fn_).unwrap();
        for m in Metric::ALL {
            write!(out, " {}={}", m.name(), fmt_value(r.report.get(m))).unwrap();
        }
        out.push('\n');
    }
    write!(out, "aggregate mode={} images={}", agg.mode, agg.images).unwrap();
    for (k, m) in Metric::ALL.iter().enumerate() {
        write!(
            out,
            " {}={} {}_undefined={}",
            m.name(),
            fmt_value(agg.report.get(*m)),
            m.name(),
            agg.undefined[k]
        )
        .unwrap();
    }
    out.push('\n');
    out
}

/// Human-readable column table.
pub fn render_table(rows: &[ImageEvaluation], agg: &AggregateReport) -> String {
    let name_width = rows
        .iter()
        .map(|r| r.name.len())
        .chain([format!("aggregate ({})", agg.mode).len(), 5])
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    write!(out, "{:<name_width$}", "image").unwrap();
    for m in Metric::ALL {
        write!(out, " {:>11}", m.name()).unwrap();
    }
    out.push('\n');
    let mut line = |name: &str, rep: &MetricReport| {
        write!(out, "{name:<name_width$}").unwrap();
        for m in Metric::ALL {
            write!(out, " {:>11}", fmt_value(rep.get(m))).unwrap();
        }
        out.push('\n');
    };
    for r in rows {
        line(&r.name, &r.report);
    }
    line(&format!("aggregate ({})", agg.mode), &agg.report);
    if agg.undefined.iter().any(|&u| u > 0) {
        let notes: Vec<String> = Metric::ALL
            .iter()
            .zip(agg.undefined)
            .filter(|(_, u)| *u > 0)
            .map(|(m, u)| format!("{}: {u}", m.name()))
            .collect();
        writeln!(out, "undefined per image (excluded from means): {}", notes.join(", ")).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// The 4x4 fixture: prediction and truth overlap on a 2x2 block, each
    /// has one extra pixel of its own.
    fn fixture() -> (LabelMask, LabelMask) {
        let pred = LabelMask::new(4, 4, vec![1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0]).unwrap();
        let gt = LabelMask::new(4, 4, vec![1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1]).unwrap();
        (pred, gt)
    }

    fn close(a: Option<f64>, b: f64) -> bool {
        a.is_some_and(|a| (a - b).abs() < 1e-12)
    }

    #[test]
    fn fixture_counts_and_values() {
        let (pred, gt) = fixture();
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(c, ConfusionCounts::new(4, 1, 10, 1));
        let r = compute_metrics(&c);
        assert!(close(r.dice, 0.8));
        assert!(close(r.iou, 2.0 / 3.0));
        assert!(close(r.precision, 0.8));
        assert!(close(r.recall, 0.8));
        assert!(close(r.specificity, 10.0 / 11.0));
        assert!(close(r.rvd, 0.0));
        assert!(close(r.accuracy, 0.875));
    }

    #[test]
    fn trivial_cases() {
        let (_, gt) = fixture();
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let r = compute_metrics(&c);
        for m in Metric::ALL {
            let expect = if m == Metric::Rvd { 0.0 } else { 1.0 };
            assert!(close(r.get(m), expect), "{m:?}");
        }
        let c = confusion(&gt.complement(), &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));

        let empty = LabelMask::filled(4, 4, false);
        let r = compute_metrics(&confusion(&empty, &gt).unwrap());
        assert!(close(r.dice, 0.0));
        assert!(close(r.recall, 0.0));
        assert!(close(r.rvd, -1.0));
        assert_eq!(r.precision, None);

        let r = compute_metrics(&confusion(&empty, &empty).unwrap());
        assert_eq!(r.dice, None);
        assert_eq!(r.recall, None);
        assert_eq!(r.rvd, None);
        assert!(close(r.accuracy, 1.0));
        assert!(confusion(&empty, &LabelMask::filled(3, 4, false)).is_err());
    }

    #[test]
    fn aggregation_modes() {
        let a = ConfusionCounts::new(4, 1, 10, 1);
        let single = compute_metrics(&a);
        for mode in [Aggregation::PerImageMean, Aggregation::Pooled] {
            let r = aggregate(&[a], mode).unwrap().report;
            let r2 = aggregate(&[a, a], mode).unwrap().report;
            for m in Metric::ALL {
                assert!((r.get(m).unwrap() - single.get(m).unwrap()).abs() < 1e-12);
                assert!((r2.get(m).unwrap() - single.get(m).unwrap()).abs() < 1e-12);
            }
        }

        let pair = [ConfusionCounts::new(1, 0, 1, 0), ConfusionCounts::new(0, 1, 0, 1)];
        let mean = aggregate(&pair, Aggregation::PerImageMean).unwrap();
        let pooled = aggregate(&pair, Aggregation::Pooled).unwrap();
        assert!(close(mean.report.accuracy, 0.5));
        assert!(close(pooled.report.accuracy, 0.5));
        // Dice happens to agree here (1 and 0 average to 2/4); IoU separates the modes.
        assert!(close(mean.report.dice, 0.5));
        assert!(close(pooled.report.dice, 0.5));
        assert!(close(mean.report.iou, 0.5));
        assert!(close(pooled.report.iou, 1.0 / 3.0));
        assert_eq!(mean.undefined, [0; 7]);
        assert!(close(mean.report.precision, 0.5));

        // Undefined values are skipped by the mean and counted.
        let with_empty = [ConfusionCounts::new(4, 1, 10, 1), ConfusionCounts::new(0, 0, 16, 0)];
        let agg = aggregate(&with_empty, Aggregation::PerImageMean).unwrap();
        assert_eq!(agg.undefined, [1, 1, 1, 1, 0, 1, 0]);
        assert!(close(agg.report.dice, 0.8));
        assert!(close(agg.report.accuracy, (0.875 + 1.0) / 2.0));

        assert!(aggregate(&[], Aggregation::Pooled).is_err());
        assert_eq!("pooled".parse::<Aggregation>().unwrap(), Aggregation::Pooled);
        assert!("median".parse::<Aggregation>().is_err());
    }

    #[test]
    fn rendering() {
        let rows = vec![
            ImageEvaluation::new("a", ConfusionCounts::new(4, 1, 10, 1)),
            ImageEvaluation::new("b", ConfusionCounts::new(0, 0, 16, 0)),
        ];
        let agg = aggregate(&[rows[0].counts, rows[1].counts], Aggregation::PerImageMean).unwrap();
        let kv = render_key_value(&rows, &agg);
        let first = kv.lines().next().unwrap();
        assert_eq!(
            first,
            "image=a tp=4 fp=1 tn=10 fn=1 dice=0.800000 iou=0.666667 precision=0.800000 recall=0.800000 specificity=0.909091 rvd=0.000000 accuracy=0.875000"
        );
        assert!(kv.lines().nth(1).unwrap().contains("dice=undefined"));
        assert!(kv
            .lines()
            .nth(2)
            .unwrap()
            .starts_with("aggregate mode=per_image_mean images=2 dice=0.800000 dice_undefined=1"));
        let table = render_table(&rows, &agg);
        assert!(table.contains("undefined per image"));
        assert_eq!(table.lines().count(), 5);
    }

    fn masks(n: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (
            proptest::collection::vec(0u8..2, n),
            proptest::collection::vec(0u8..2, n),
        )
    }

    proptest! {
        #[test]
        fn prop_metric_identities((p, g) in masks(64)) {
            let pred = LabelMask::new(8, 8, p).unwrap();
            let gt = LabelMask::new(8, 8, g).unwrap();
            let c = confusion(&pred, &gt).unwrap();
            prop_assert_eq!(c.total(), 64);
            let r = compute_metrics(&c);
            if let (Some(d), Some(i)) = (r.dice, r.iou) {
                prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            }
            let s = compute_metrics(&confusion(&gt, &pred).unwrap());
            prop_assert_eq!(r.dice, s.dice);
            prop_assert_eq!(r.iou, s.iou);
            prop_assert_eq!(r.accuracy, s.accuracy);
            prop_assert_eq!(r.precision, s.recall);
            prop_assert_eq!(r.recall, s.precision);
            if c.tp + c.fn_ > 0 {
                let zero = r.rvd.unwrap().abs() < 1e-15;
                prop_assert_eq!(zero, pred.foreground_count() == gt.foreground_count());
            }
        }
    }
}
