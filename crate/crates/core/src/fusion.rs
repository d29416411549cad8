//! Level weighting and MAP decoding of the four-potential model.
//!
//! Per pixel the decoder sums weighted class log-probabilities of the
//! pixel-unary, pixel-binary, patch-unary and patch-binary maps and picks
//! the larger class score. The partition function cancels under argmax and
//! is never computed.

use crate::error::{HcrfError, Result};
use crate::imagedata::{LabelMask, ProbMap};

/// Offset subtracted from validation accuracies to spread the level weights.
pub const LEVEL_WEIGHT_OFFSET: f64 = 0.7;

/// Exponents of the four potentials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightSet {
    pub pixel_unary: f64,
    pub pixel_binary: f64,
    pub patch_unary: f64,
    pub patch_binary: f64,
}

impl WeightSet {
    pub fn new(pixel_unary: f64, pixel_binary: f64, patch_unary: f64, patch_binary: f64) -> Result<Self> {
        let w = WeightSet {
            pixel_unary,
            pixel_binary,
            patch_unary,
            patch_binary,
        };
        if w.as_array().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(HcrfError::DegenerateWeight(format!(
                "level weights {:?} must be finite and nonnegative",
                w.as_array()
            )));
        }
        if w.as_array().iter().all(|&v| v == 0.0) {
            return Err(HcrfError::DegenerateWeight("all level weights are zero".into()));
        }
        Ok(w)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.pixel_unary, self.pixel_binary, self.patch_unary, self.patch_binary]
    }

    /// Multiplies every weight by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<WeightSet> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(HcrfError::parameter(format!("scale factor {factor} must be positive")));
        }
        let [a, b, c, d] = self.as_array();
        WeightSet::new(a * factor, b * factor, c * factor, d * factor)
    }
}

/// Validation accuracies of the four potentials, in `WeightSet` order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelAccuracies {
    pub pixel_unary: f64,
    pub pixel_binary: f64,
    pub patch_unary: f64,
    pub patch_binary: f64,
}

impl LevelAccuracies {
    pub fn as_array(&self) -> [f64; 4] {
        [self.pixel_unary, self.pixel_binary, self.patch_unary, self.patch_binary]
    }
}

/// Each weight is its accuracy minus 0.7; accuracies at or below 0.7 are rejected.
pub fn derive_level_weights(acc: &LevelAccuracies) -> Result<WeightSet> {
    for (name, a) in ["pixel-unary", "pixel-binary", "patch-unary", "patch-binary"]
        .iter()
        .zip(acc.as_array())
    {
        if !(0.0..=1.0).contains(&a) {
            return Err(HcrfError::parameter(format!("{name} accuracy {a} outside [0,1]")));
        }
        if a <= LEVEL_WEIGHT_OFFSET {
            return Err(HcrfError::DegenerateWeight(format!(
                "{name} accuracy {a} does not exceed {LEVEL_WEIGHT_OFFSET}"
            )));
        }
    }
    let [a, b, c, d] = acc.as_array().map(|v| v - LEVEL_WEIGHT_OFFSET);
    WeightSet::new(a, b, c, d)
}

/// Decoded mask plus the normalized fused posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub mask: LabelMask,
    pub posterior: ProbMap,
}

/// Per-pixel MAP decode. All four maps must be pixel-aligned and clamped;
/// patch maps are broadcast beforehand. Ties decode to background.
pub fn hcrf_decode(pu: &ProbMap, pb: &ProbMap, qu: &ProbMap, qb: &ProbMap, w: &WeightSet) -> Result<Decoded> {
    for (name, m) in [("pixel-binary", pb), ("patch-unary", qu), ("patch-binary", qb)] {
        if !pu.same_dims(m) {
            return Err(HcrfError::parameter(format!(
                "{name} map is {}x{}, pixel-unary map is {}x{}",
                m.width(),
                m.height(),
                pu.width(),
                pu.height()
            )));
        }
    }
    // Re-validate in case the caller built the set by hand.
    let w = WeightSet::new(w.pixel_unary, w.pixel_binary, w.patch_unary, w.patch_binary)?;
    for (name, m) in [
        ("pixel-unary", pu),
        ("pixel-binary", pb),
        ("patch-unary", qu),
        ("patch-binary", qb),
    ] {
        if !m.is_open_unit() {
            return Err(HcrfError::Numeric(format!(
                "{name} map is not clamped away from 0 and 1"
            )));
        }
    }

    let weights = w.as_array();
    let maps = [pu.values(), pb.values(), qu.values(), qb.values()];
    let n = pu.values().len();
    let mut labels = Vec::with_capacity(n);
    let mut posterior = Vec::with_capacity(n);
    for i in 0..n {
        let mut fg = 0.0;
        let mut bg = 0.0;
        for (map, &wk) in maps.iter().zip(&weights) {
            if wk != 0.0 {
                let p = map[i];
                fg += wk * p.ln();
                bg += wk * (1.0 - p).ln();
            }
        }
        labels.push((fg > bg) as u8);
        posterior.push(1.0 / (1.0 + (bg - fg).exp()));
    }
    Ok(Decoded {
        mask: LabelMask::new(pu.width(), pu.height(), labels)?,
        posterior: ProbMap::from_unchecked(pu.width(), pu.height(), posterior),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn acc(a: f64, b: f64, c: f64, d: f64) -> LevelAccuracies {
        LevelAccuracies {
            pixel_unary: a,
            pixel_binary: b,
            patch_unary: c,
            patch_binary: d,
        }
    }

    fn fill(p: f64) -> ProbMap {
        ProbMap::filled(4, 3, p).unwrap()
    }

    #[test]
    fn level_weight_rule() {
        let w = derive_level_weights(&acc(0.7787, 0.7793, 0.7450, 0.7540)).unwrap();
        let expected = [0.0787, 0.0793, 0.0450, 0.0540];
        for (got, exp) in w.as_array().iter().zip(expected) {
            assert!((got - exp).abs() < 1e-12, "{got} vs {exp}");
        }
        let w = derive_level_weights(&acc(0.8, 0.8, 0.8, 0.8)).unwrap();
        assert!(w.as_array().iter().all(|v| (v - 0.1).abs() < 1e-12));
        assert!(matches!(
            derive_level_weights(&acc(0.70, 0.8, 0.8, 0.8)),
            Err(HcrfError::DegenerateWeight(_))
        ));
        assert!(matches!(
            derive_level_weights(&acc(0.9, 0.8, 0.5, 0.8)),
            Err(HcrfError::DegenerateWeight(_))
        ));
        assert!(matches!(
            derive_level_weights(&acc(1.2, 0.8, 0.8, 0.8)),
            Err(HcrfError::Parameter(_))
        ));
    }

    #[test]
    fn weightset_validation() {
        assert!(matches!(
            WeightSet::new(0.0, 0.0, 0.0, 0.0),
            Err(HcrfError::DegenerateWeight(_))
        ));
        assert!(WeightSet::new(-0.1, 0.2, 0.0, 0.0).is_err());
        assert!(WeightSet::new(f64::INFINITY, 0.2, 0.0, 0.0).is_err());
        assert!(WeightSet::new(0.0, 0.0, 0.0, 0.3).is_ok());
    }

    #[test]
    fn unanimous_evidence_is_foreground() {
        let w = WeightSet::new(0.0787, 0.0793, 0.0450, 0.0540).unwrap();
        let m = fill(0.9);
        let d = hcrf_decode(&m, &m, &m, &m, &w).unwrap();
        assert!(d.mask.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn mixed_evidence_hand_evaluation() {
        let w = WeightSet::new(0.08, 0.08, 0.05, 0.05).unwrap();
        let (hi, lo) = (fill(0.9), fill(0.1));
        let d = hcrf_decode(&hi, &hi, &lo, &lo, &w).unwrap();
        let fg = 0.16 * 0.9f64.ln() + 0.10 * 0.1f64.ln();
        let bg = 0.16 * 0.1f64.ln() + 0.10 * 0.9f64.ln();
        assert!((fg - -0.2471).abs() < 1e-4);
        assert!((bg - -0.3790).abs() < 1e-4);
        assert!(d.mask.labels().iter().all(|&l| l == 1));
        let expect = fg.exp() / (fg.exp() + bg.exp());
        assert!(d.posterior.values().iter().all(|p| (p - expect).abs() < 1e-12));
    }

    #[test]
    fn exact_tie_goes_to_background() {
        let w = WeightSet::new(0.3, 0.1, 0.2, 0.4).unwrap();
        let m = fill(0.5);
        let d = hcrf_decode(&m, &m, &m, &m, &w).unwrap();
        assert!(d.mask.labels().iter().all(|&l| l == 0));
        assert!(d.posterior.values().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn decode_errors() {
        let w = WeightSet::new(0.1, 0.1, 0.1, 0.1).unwrap();
        let m = fill(0.6);
        let other = ProbMap::filled(3, 3, 0.6).unwrap();
        assert!(matches!(
            hcrf_decode(&m, &other, &m, &m, &w),
            Err(HcrfError::Parameter(_))
        ));
        let zero = WeightSet {
            pixel_unary: 0.0,
            pixel_binary: 0.0,
            patch_unary: 0.0,
            patch_binary: 0.0,
        };
        assert!(matches!(
            hcrf_decode(&m, &m, &m, &m, &zero),
            Err(HcrfError::DegenerateWeight(_))
        ));
        let unclamped = fill(1.0);
        assert!(matches!(
            hcrf_decode(&m, &m, &unclamped, &m, &w),
            Err(HcrfError::Numeric(_))
        ));
    }

    fn maps_strategy(n: usize) -> impl Strategy<Value = [Vec<f64>; 4]> {
        let v = || proptest::collection::vec(1e-6f64..=1.0 - 1e-6, n);
        (v(), v(), v(), v()).prop_map(|(a, b, c, d)| [a, b, c, d])
    }

    proptest! {
        #[test]
        fn prop_one_hot_pixel_unary_thresholds(vals in proptest::collection::vec(1e-6f64..=1.0 - 1e-6, 12)) {
            let pu = ProbMap::new(4, 3, vals).unwrap();
            let other = fill(0.3);
            let w = WeightSet::new(1.0, 0.0, 0.0, 0.0).unwrap();
            let d = hcrf_decode(&pu, &other, &other, &other, &w).unwrap();
            prop_assert_eq!(d.mask, pu.threshold());
        }

        #[test]
        fn prop_majority_above_half_is_foreground(maps in maps_strategy(12), ws in proptest::array::uniform4(0.0f64..1.0)) {
            prop_assume!(ws.iter().any(|&w| w > 1e-3));
            let w = WeightSet::new(ws[0], ws[1], ws[2], ws[3]).unwrap();
            let m: Vec<ProbMap> = maps.iter().map(|v| ProbMap::new(4, 3, v.clone()).unwrap()).collect();
            let d = hcrf_decode(&m[0], &m[1], &m[2], &m[3], &w).unwrap();
            for (i, &label) in d.mask.labels().iter().enumerate() {
                let active: Vec<f64> = (0..4).filter(|&k| ws[k] > 0.0).map(|k| maps[k][i]).collect();
                if active.iter().all(|&p| p > 0.5) {
                    prop_assert_eq!(label, 1);
                }
                if active.iter().all(|&p| p < 0.5) {
                    prop_assert_eq!(label, 0);
                }
            }
        }

        #[test]
        fn prop_decoding_is_pixel_local(maps in maps_strategy(12), shift in 1usize..12) {
            let w = WeightSet::new(0.0787, 0.0793, 0.0450, 0.0540).unwrap();
            let m: Vec<ProbMap> = maps.iter().map(|v| ProbMap::new(12, 1, v.clone()).unwrap()).collect();
            let rotated: Vec<ProbMap> = maps
                .iter()
                .map(|v| {
                    let mut r = v.clone();
                    r.rotate_left(shift);
                    ProbMap::new(12, 1, r).unwrap()
                })
                .collect();
            let d = hcrf_decode(&m[0], &m[1], &m[2], &m[3], &w).unwrap();
            let dr = hcrf_decode(&rotated[0], &rotated[1], &rotated[2], &rotated[3], &w).unwrap();
            let mut expect = d.mask.labels().to_vec();
            expect.rotate_left(shift);
            prop_assert_eq!(dr.mask.labels(), &expect[..]);
        }
    }
}
