use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities at or above this are foreground.
pub const THRESHOLD: f64 = 0.5;

pub fn binarize(prob: &Tensor) -> Result<Tensor> {
    prob.map("binarize", |p| if p >= THRESHOLD { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn count(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::ShapeMismatch {
                op: "evaluate",
                lhs: pred.shape().clone(),
                rhs: gt.shape().clone(),
            });
        }
        let mut c = Confusion::default();
        for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
            match (p == 1.0, g == 1.0) {
                _ if (p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0) => {
                    return Err(Error::invalid(format!(
                        "masks must be binary, found ({p}, {g}) at flat index {i}"
                    )));
                }
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, other: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Overlap metrics derived from one confusion count. A ratio whose
/// denominator is zero is `None`; dice of two empty masks is 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub counts: Confusion,
    pub dice: f64,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricReport {
    pub fn from_counts(counts: Confusion) -> Result<Self> {
        if counts.total() == 0 {
            return Err(Error::invalid("metrics of an empty mask pair"));
        }
        let Confusion { tp, fp, tn, fn_ } = counts;
        Ok(MetricReport {
            counts,
            dice: ratio(2 * tp, 2 * tp + fp + fn_).unwrap_or(1.0),
            accuracy: (tp + tn) as f64 / counts.total() as f64,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
        })
    }

    /// The five metrics in reporting order: Dice, ACC, PRE, REC, SPE.
    pub fn values(&self) -> [Option<f64>; 5] {
        [
            Some(self.dice),
            Some(self.accuracy),
            self.precision,
            self.recall,
            self.specificity,
        ]
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let [d, a, p, r, s] = self.values();
        let Confusion { tp, fp, tn, fn_ } = self.counts;
        write!(
            f,
            "dice {} acc {} pre {} rec {} spe {} (tp {tp} fp {fp} tn {tn} fn {fn_})",
            show(d),
            show(a),
            show(p),
            show(r),
            show(s)
        )
    }
}

/// Metrics of a binary prediction against a binary ground truth.
pub fn evaluate(pred: &Tensor, gt: &Tensor) -> Result<MetricReport> {
    MetricReport::from_counts(Confusion::count(pred, gt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use proptest::prelude::*;

    const P: Precision = Precision::F64;

    fn mask(dims: &[usize], on: &[usize]) -> Tensor {
        Tensor::from_fn(dims, P, |i| if on.contains(&i) { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn identical_disjoint_and_empty() {
        let a = mask(&[3, 3, 3], &[1, 5, 9]);
        assert_eq!(evaluate(&a, &a).unwrap().dice, 1.0);
        let b = mask(&[3, 3, 3], &[2, 6]);
        assert_eq!(evaluate(&a, &b).unwrap().dice, 0.0);
        let empty = mask(&[3, 3, 3], &[]);
        let r = evaluate(&empty, &empty).unwrap();
        assert_eq!(r.dice, 1.0);
        assert_eq!((r.precision, r.recall), (None, None));
        assert_eq!(r.specificity, Some(1.0));
    }

    #[test]
    fn worked_overlap_case() {
        let gt = mask(&[3, 3, 3], &[0, 1, 2, 3]);
        let pred = mask(&[3, 3, 3], &[2, 3, 4, 5]);
        let r = evaluate(&pred, &gt).unwrap();
        assert_eq!(r.dice, 0.5);
        assert_eq!(r.counts, Confusion { tp: 2, fp: 2, tn: 21, fn_: 2 });
        assert_eq!(r.accuracy, 23.0 / 27.0);
        assert_eq!(r.precision, Some(0.5));
        assert_eq!(r.specificity, Some(21.0 / 23.0));
    }

    #[test]
    fn rejects_non_binary_and_mismatch() {
        let a = mask(&[4], &[0]);
        let half = Tensor::full(&[4], 0.5, P).unwrap();
        assert!(evaluate(&a, &half).is_err());
        assert!(evaluate(&a, &mask(&[5], &[])).is_err());
        assert_eq!(binarize(&half).unwrap(), Tensor::ones(&[4], P).unwrap());
    }

    proptest! {
        #[test]
        fn partition_symmetry_and_recompute(a in prop::collection::vec(0u8..2, 27), b in prop::collection::vec(0u8..2, 27)) {
            let ta = Tensor::from_fn(&[27], P, |i| a[i] as f64).unwrap();
            let tb = Tensor::from_fn(&[27], P, |i| b[i] as f64).unwrap();
            let ab = evaluate(&ta, &tb).unwrap();
            let ba = evaluate(&tb, &ta).unwrap();
            prop_assert_eq!(ab.counts.total(), 27);
            prop_assert_eq!(ab.dice, ba.dice);
            prop_assert_eq!(MetricReport::from_counts(ab.counts).unwrap(), ab);
            if a.contains(&1) {
                prop_assert_eq!(evaluate(&ta, &ta).unwrap().dice, 1.0);
            }
        }
    }
}
