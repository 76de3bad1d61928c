//! Probability-vector arithmetic shared by every method.
//!
//! Class indices are stored 0-based ([`ClassIndex`]) but the basis vectors
//! `e^(i)` in the docs are 1-based; [`ClassIndex::one_based`] is the only
//! place where the two meet.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Tolerance on `sum(p) == 1`.
pub const SUM_TOL: f64 = 1e-6;

/// Zero-based class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassIndex(pub usize);

impl ClassIndex {
    /// Index as used in `e^(i)` notation.
    pub fn one_based(self) -> usize {
        self.0 + 1
    }

    pub fn from_one_based(i: usize) -> Result<Self> {
        if i == 0 {
            return Err(Error::Domain("one-based class index must be >= 1".into()));
        }
        Ok(ClassIndex(i - 1))
    }
}

/// A distribution over `K >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Domain(format!(
                "probability vector needs K >= 2 entries, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Validation(format!(
                "probability entries must be finite and >= 0, found {bad}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::Validation(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        Ok(ProbVector(values))
    }

    /// The basis vector `e^(i)` of `R^K`.
    pub fn one_hot(class: ClassIndex, k: usize) -> Result<Self> {
        if class.0 >= k {
            return Err(Error::Domain(format!(
                "class {} out of range for K = {k}",
                class.one_based()
            )));
        }
        let mut v = vec![0.0; k];
        v[class.0] = 1.0;
        ProbVector::new(v)
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `Some(i)` when exactly one entry is 1 and the rest are 0.
    pub fn one_hot_index(&self) -> Option<ClassIndex> {
        let mut hot = None;
        for (i, &v) in self.0.iter().enumerate() {
            if v == 1.0 {
                if hot.is_some() {
                    return None;
                }
                hot = Some(ClassIndex(i));
            } else if v != 0.0 {
                return None;
            }
        }
        hot
    }
}

/// Confidence threshold `c` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Validation(format!("threshold {c} outside [0, 1]")));
        }
        Ok(Threshold(c))
    }

    /// Threshold without the `[0, 1]` range check. Values above 1 reject every
    /// sample, which is useful when probing the empty-batch convention.
    pub fn unchecked(c: f64) -> Self {
        Threshold(c)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// One-hot label over `K + 1` classes; index `K` is the open-set class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtendedLabel {
    index: ClassIndex,
    len: usize,
}

impl ExtendedLabel {
    /// The open-set class `e^(K+1)` for `K` known classes.
    pub fn open(k: usize) -> Self {
        ExtendedLabel {
            index: ClassIndex(k),
            len: k + 1,
        }
    }

    pub fn index(&self) -> ClassIndex {
        self.index
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_open(&self) -> bool {
        self.index.0 + 1 == self.len
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        v[self.index.0] = 1.0;
        v
    }
}

/// `-(sum p log p) / log K`, in `[0, 1]`.
///
/// Entries are clamped below at [`LOG_EPS`] inside the logarithm so exact
/// zeros contribute `0 * log(eps) = 0`.
pub fn normalized_entropy(p: &ProbVector) -> f64 {
    normalized_entropy_slice(p.as_slice())
}

/// [`normalized_entropy`] without the validation step, for hot loops over
/// classifier outputs that are normalized by construction.
pub fn normalized_entropy_slice(p: &[f64]) -> f64 {
    let k = p.len() as f64;
    let h: f64 = p.iter().map(|&v| -v * v.max(LOG_EPS).ln()).sum();
    (h / k.ln()).clamp(0.0, 1.0)
}

/// Index of the maximal entry; ties resolve to the lowest index.
pub fn argmax_label(p: &ProbVector) -> ClassIndex {
    ClassIndex(argmax_slice(p.as_slice()))
}

pub(crate) fn argmax_slice(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// True iff `max(p) >= c`: the sample is kept by the rejection rule.
pub fn reject_mask(p: &ProbVector, c: Threshold) -> bool {
    p.max() >= c.value()
}

/// Predicted class embedded in `K + 1` dimensions when confident, otherwise
/// the open-set class.
pub fn threshold_label_extended(p: &ProbVector, c: Threshold) -> ExtendedLabel {
    if reject_mask(p, c) {
        ExtendedLabel {
            index: argmax_label(p),
            len: p.k() + 1,
        }
    } else {
        ExtendedLabel::open(p.k())
    }
}

/// Appends a zero open-set coordinate to a one-hot label (`y^T I_{K,K+1}`).
pub fn pad_label(y: &ProbVector) -> Result<ExtendedLabel> {
    let index = y
        .one_hot_index()
        .ok_or_else(|| Error::Validation("pad_label expects a one-hot vector".into()))?;
    Ok(ExtendedLabel {
        index,
        len: y.k() + 1,
    })
}

/// `[1/K, ..., 1/K]`.
pub fn uniform_label(k: usize) -> Result<ProbVector> {
    if k < 2 {
        return Err(Error::Domain(format!("uniform label needs K >= 2, got {k}")));
    }
    ProbVector::new(vec![1.0 / k as f64; k])
}

/// Index-extraction vector `s = [0, 1, ..., K-1]`; `y^T s` is the 0-based
/// class of a one-hot `y`.
pub fn index_vector(k: usize) -> Vec<f64> {
    (0..k).map(|i| i as f64).collect()
}

pub fn scalar_class(y: &ProbVector) -> Result<ClassIndex> {
    if y.one_hot_index().is_none() {
        return Err(Error::Validation("scalar class needs a one-hot vector".into()));
    }
    let s = index_vector(y.k());
    let idx: f64 = y.as_slice().iter().zip(&s).map(|(a, b)| a * b).sum();
    Ok(ClassIndex(idx as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(normalized_entropy(&pv(&[0.25; 4])), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(normalized_entropy(&pv(&[1.0, 0.0, 0.0])), 0.0, epsilon = 1e-12);
        // log 2 / log 4
        let hand = -(2.0 * 0.5 * 0.5f64.ln()) / 4.0f64.ln();
        assert_abs_diff_eq!(hand, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            normalized_entropy(&pv(&[0.5, 0.5, 0.0, 0.0])),
            0.5,
            epsilon = 1e-10
        );
    }

    #[test]
    fn rejects_bad_vectors() {
        assert!(matches!(
            ProbVector::new(vec![0.5, 0.6]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(ProbVector::new(vec![1.0]), Err(Error::Domain(_))));
        assert!(matches!(
            ProbVector::new(vec![1.5, -0.5]),
            Err(Error::Validation(_))
        ));
        assert!(uniform_label(1).is_err());
        assert!(Threshold::new(1.2).is_err());
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_label(&pv(&[0.1, 0.8, 0.1])).one_based(), 2);
        assert_eq!(argmax_label(&pv(&[0.5, 0.5])).one_based(), 1);
        assert_eq!(argmax_label(&pv(&[0.2, 0.3, 0.5])).one_based(), 3);
    }

    #[test]
    fn threshold_examples() {
        let half = Threshold::new(0.5).unwrap();
        let l = threshold_label_extended(&pv(&[0.7, 0.2, 0.1]), half);
        assert_eq!(l.to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        let l = threshold_label_extended(&pv(&[0.4, 0.3, 0.3]), half);
        assert_eq!(l.to_vec(), vec![0.0, 0.0, 0.0, 1.0]);
        assert!(l.is_open());
        let zero = Threshold::new(0.0).unwrap();
        let l = threshold_label_extended(&pv(&[0.3, 0.3, 0.4]), zero);
        assert_eq!(l.index().one_based(), 3);

        assert!(reject_mask(&pv(&[0.9, 0.1]), half));
        assert!(!reject_mask(&pv(&[0.5, 0.5]), Threshold::new(0.7).unwrap()));
        assert!(reject_mask(&pv(&[0.5, 0.5]), half));
    }

    #[test]
    fn pad_examples() {
        let e2 = ProbVector::one_hot(ClassIndex(1), 3).unwrap();
        assert_eq!(pad_label(&e2).unwrap().to_vec(), vec![0.0, 1.0, 0.0, 0.0]);
        let e1 = ProbVector::one_hot(ClassIndex(0), 2).unwrap();
        assert_eq!(pad_label(&e1).unwrap().to_vec(), vec![1.0, 0.0, 0.0]);
        let ek = ProbVector::one_hot(ClassIndex(4), 5).unwrap();
        let padded = pad_label(&ek).unwrap().to_vec();
        assert_eq!(padded[4], 1.0);
        assert_eq!(padded[5], 0.0);
        assert!(pad_label(&pv(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_label(2).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(uniform_label(4).unwrap().as_slice(), &[0.25; 4]);
        for k in 2..40 {
            let h = normalized_entropy(&uniform_label(k).unwrap());
            assert_abs_diff_eq!(h, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn index_vector_extracts_class() {
        let y = ProbVector::one_hot(ClassIndex(3), 6).unwrap();
        assert_eq!(scalar_class(&y).unwrap(), ClassIndex(3));
        assert_eq!(index_vector(3), vec![0.0, 1.0, 2.0]);
    }

    fn simplex(k: usize) -> impl Strategy<Value = ProbVector> {
        prop::collection::vec(0.0f64..1.0, k).prop_filter_map("zero mass", |raw| {
            let s: f64 = raw.iter().sum();
            (s > 1e-6).then(|| ProbVector::new(raw.iter().map(|v| v / s).collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn entropy_in_unit_interval(p in (2usize..12).prop_flat_map(simplex)) {
            let h = normalized_entropy(&p);
            prop_assert!((0.0..=1.0).contains(&h));
        }

        #[test]
        fn entropy_is_base_invariant(p in (2usize..12).prop_flat_map(simplex)) {
            let k = p.k() as f64;
            let h2: f64 = p.as_slice().iter().map(|&v| -v * v.max(LOG_EPS).log2()).sum::<f64>() / k.log2();
            prop_assert!((h2 - normalized_entropy(&p)).abs() < 1e-9);
        }

        #[test]
        fn pad_preserves_argmax(k in 2usize..20, i in 0usize..20) {
            let i = i % k;
            let y = ProbVector::one_hot(ClassIndex(i), k).unwrap();
            let padded = pad_label(&y).unwrap();
            prop_assert_eq!(padded.index(), argmax_label(&y));
            prop_assert!(!padded.is_open());
        }
    }
}
