//! Ontology memory: one persistent unit-norm key per seen class, refreshed by
//! a momentum blend with the instance features of each batch.

use crate::diffcore::{Tensor, MIN_NORM};
use crate::error::{OanError, Result};
use crate::modality::Modality;
use crate::rng;
use crate::scalar::Scalar;

/// Default momentum `w` of the key update.
pub const DEFAULT_MOMENTUM: f64 = 0.01;

/// Instance features of one batch with their seen-class labels.
#[derive(Clone, Debug)]
pub struct BatchValues<T> {
    values: Tensor<T>,
    labels: Vec<usize>,
    modality: Vec<Modality>,
}

impl<T: Scalar> BatchValues<T> {
    pub fn new(values: Tensor<T>, labels: Vec<usize>, modality: Vec<Modality>) -> Result<Self> {
        if labels.len() != values.rows() || modality.len() != values.rows() {
            return Err(OanError::Shape {
                op: "batch_values",
                left: values.shape(),
                right: (labels.len(), modality.len()),
            });
        }
        if values.rows() == 0 {
            return Err(OanError::EmptyBatch);
        }
        Ok(Self {
            values: values.detached(),
            labels,
            modality,
        })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OntologyDictionary<T> {
    keys: Tensor<T>,
    momentum: T,
}

impl<T: Scalar> OntologyDictionary<T> {
    /// Isotropic Gaussian keys, row-normalized. Deterministic in `seed`.
    pub fn init(num_classes: usize, dim: usize, momentum: T, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(OanError::config("dictionary needs at least one class"));
        }
        if dim < 2 {
            return Err(OanError::config(format!("dictionary dim must be >= 2, got {dim}")));
        }
        let mut r = rng::seeded(seed);
        let mut keys = Tensor::zeros(num_classes, dim);
        for c in 0..num_classes {
            for (k, v) in keys.row_mut(c).iter_mut().zip(rng::unit_vector(&mut r, dim)) {
                *k = T::lit(v);
            }
        }
        Self::from_keys(keys, momentum)
    }

    /// Wraps existing keys (e.g. from a checkpoint); every row must be unit-norm.
    pub fn from_keys(keys: Tensor<T>, momentum: T) -> Result<Self> {
        if !(momentum >= T::zero() && momentum <= T::one()) {
            return Err(OanError::config(format!("momentum {momentum} outside [0, 1]")));
        }
        for c in 0..keys.rows() {
            let n = norm(keys.row(c));
            if (n - T::one()).abs() > T::lit(1e-9) {
                return Err(OanError::Degenerate {
                    context: "dictionary keys",
                    row: c,
                });
            }
        }
        Ok(Self {
            keys: keys.detached(),
            momentum,
        })
    }

    pub fn keys(&self) -> &Tensor<T> {
        &self.keys
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn num_classes(&self) -> usize {
        self.keys.rows()
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    /// For each instance in batch order: `K_c ← w·K_c + (1−w)·V_i`, then
    /// renormalize. Keys of absent classes are untouched. Either the whole
    /// batch applies or none of it does.
    pub fn update(&mut self, batch: &BatchValues<T>) -> Result<()> {
        if batch.values.cols() != self.dim() {
            return Err(OanError::Shape {
                op: "update_keys",
                left: self.keys.shape(),
                right: batch.values.shape(),
            });
        }
        for (row, &label) in batch.labels.iter().enumerate() {
            if label >= self.num_classes() {
                return Err(OanError::Label {
                    row,
                    label,
                    classes: self.num_classes(),
                });
            }
        }
        if !batch.values.is_finite() {
            return Err(OanError::Numeric("update_keys batch values".into()));
        }
        let w = self.momentum;
        let keep = T::one() - w;
        let mut keys = self.keys.clone();
        for (i, &c) in batch.labels.iter().enumerate() {
            let v = batch.values.row(i);
            let k = keys.row_mut(c);
            for (kk, &vv) in k.iter_mut().zip(v) {
                *kk = w * *kk + keep * vv;
            }
            let n = norm(k);
            if !(n >= T::lit(MIN_NORM)) {
                return Err(OanError::Degenerate {
                    context: "update_keys",
                    row: c,
                });
            }
            for kk in k.iter_mut() {
                *kk /= n;
            }
        }
        self.keys = keys;
        Ok(())
    }

    /// Key rows for `class_ids` in the given order, detached from any tape.
    pub fn lookup(&self, class_ids: &[usize]) -> Result<Tensor<T>> {
        self.keys.select_rows(class_ids)
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(values: &[f64], dim: usize, labels: Vec<usize>) -> BatchValues<f64> {
        let n = labels.len();
        BatchValues::new(
            Tensor::from_f64(n, dim, values).unwrap(),
            labels,
            vec![Modality::Sketch; n],
        )
        .unwrap()
    }

    fn max_norm_dev(d: &OntologyDictionary<f64>) -> f64 {
        (0..d.num_classes())
            .map(|c| (norm(d.keys().row(c)) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn init_is_unit_norm_and_seeded() {
        let a = OntologyDictionary::<f64>::init(10, 64, 0.01, 1).unwrap();
        let b = OntologyDictionary::<f64>::init(10, 64, 0.01, 1).unwrap();
        let c = OntologyDictionary::<f64>::init(10, 64, 0.01, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.keys(), c.keys());
        assert_eq!(a.keys().shape(), (10, 64));
        assert!(max_norm_dev(&a) < 1e-9);
        assert!(matches!(
            OntologyDictionary::<f64>::init(3, 1, 0.01, 1),
            Err(OanError::Config(_))
        ));
    }

    #[test]
    fn update_hand_example() {
        let keys = Tensor::from_f64(2, 2, &[1., 0., 0., 1.]).unwrap();
        let mut d = OntologyDictionary::from_keys(keys, 0.01).unwrap();
        d.update(&batch(&[0., 1.], 2, vec![0])).unwrap();
        let n = 0.9802f64.sqrt();
        assert!((d.keys().get(0, 0) - 0.01 / n).abs() < 1e-12);
        assert!((d.keys().get(0, 1) - 0.99 / n).abs() < 1e-12);
        assert!((d.keys().get(0, 0) - 0.010100).abs() < 1e-6);
        assert!((d.keys().get(0, 1) - 0.999949).abs() < 1e-6);
        // class 1 absent
        assert_eq!(d.keys().row(1), &[0., 1.]);
    }

    #[test]
    fn fixed_point_when_value_equals_key() {
        let mut d = OntologyDictionary::<f64>::init(3, 4, 0.01, 7).unwrap();
        let k = d.keys().row(2).to_vec();
        d.update(&batch(&k, 4, vec![2])).unwrap();
        for (a, b) in d.keys().row(2).iter().zip(&k) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_blend_is_rejected_atomically() {
        let keys = Tensor::from_f64(2, 2, &[1., 0., 0., 1.]).unwrap();
        let mut d = OntologyDictionary::from_keys(keys, 0.5).unwrap();
        let before = d.clone();
        // first instance fine, second cancels key 0 exactly
        let res = d.update(&batch(&[0., 1., -1., 0.], 2, vec![1, 0]));
        assert!(matches!(res, Err(OanError::Degenerate { row: 0, .. })));
        assert_eq!(d, before);
    }

    #[test]
    fn invalid_label_rejected() {
        let mut d = OntologyDictionary::<f64>::init(2, 2, 0.01, 1).unwrap();
        assert!(matches!(
            d.update(&batch(&[1., 0.], 2, vec![5])),
            Err(OanError::Label { label: 5, .. })
        ));
    }

    #[test]
    fn lookup_examples() {
        let d = OntologyDictionary::<f64>::init(4, 3, 0.01, 3).unwrap();
        assert_eq!(d.lookup(&[2]).unwrap().data(), d.keys().row(2));
        let dup = d.lookup(&[0, 0]).unwrap();
        assert_eq!(dup.row(0), dup.row(1));
        assert_eq!(&d.lookup(&[0, 1, 2, 3]).unwrap(), d.keys());
        assert!(matches!(d.lookup(&[4]), Err(OanError::Lookup { index: 4, len: 4 })));
        assert!(!d.lookup(&[1]).unwrap().requires_grad);
    }

    #[test]
    fn zero_momentum_keeps_last_instance() {
        let mut d = OntologyDictionary::<f64>::init(2, 2, 0.0, 3).unwrap();
        d.update(&batch(&[3., 4., 0., 2., 6., 8.], 2, vec![0, 1, 0])).unwrap();
        assert!((d.keys().get(0, 0) - 0.6).abs() < 1e-15);
        assert!((d.keys().get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_near_one_barely_moves() {
        let mut prev = f64::INFINITY;
        for w in [0.9, 0.99, 0.999, 0.9999] {
            let mut d = OntologyDictionary::<f64>::init(2, 3, w, 5).unwrap();
            let before = d.keys().clone();
            d.update(&batch(&[1., -2., 0.5], 3, vec![1])).unwrap();
            let delta: f64 = before
                .data()
                .iter()
                .zip(d.keys().data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(delta < prev);
            prev = delta;
        }
        assert!(prev < 1e-3);
    }

    proptest! {
        #[test]
        fn updates_preserve_unit_norm_and_locality(
            seed in 0u64..1000,
            vals in prop::collection::vec(-3.0f64..3.0, 24),
            labels in prop::collection::vec(0usize..3, 6),
        ) {
            let mut d = OntologyDictionary::<f64>::init(5, 4, 0.01, seed).unwrap();
            let before = d.clone();
            d.update(&batch(&vals, 4, labels.clone())).unwrap();
            prop_assert!(max_norm_dev(&d) < 1e-9);
            for c in 3..5 {
                prop_assert_eq!(d.keys().row(c), before.keys().row(c));
            }
        }
    }
}
