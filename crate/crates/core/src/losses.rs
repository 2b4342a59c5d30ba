//! Objective terms: smooth inter-class independence, hypersphere consistency
//! (self and teacher-student), classification, semantic distillation, and
//! their weighted sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{OanError, Result};
use crate::scalar::Scalar;

/// Probabilities are clamped into `[BCE_CLAMP, 1 − BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Tolerance on teacher distribution row sums.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterClassLossConfig<T> {
    /// Temperature on key/value inner products.
    pub beta: T,
    /// Label-smoothing mass.
    pub eta: T,
    /// Use the printed `ξ = −1/N − η` and `+η/N` coefficients instead of
    /// standard label smoothing.
    pub literal_coefficients: bool,
}

impl<T: Scalar> Default for InterClassLossConfig<T> {
    fn default() -> Self {
        Self {
            beta: T::lit(10.0),
            eta: T::lit(0.1),
            literal_coefficients: false,
        }
    }
}

impl<T: Scalar> InterClassLossConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > T::zero()) {
            return Err(OanError::config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.eta >= T::zero() && self.eta < T::one()) {
            return Err(OanError::config(format!("eta must be in [0, 1), got {}", self.eta)));
        }
        Ok(())
    }
}

/// Distinct classes of a batch (ascending) and each instance's position among them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchCategories {
    pub classes: Vec<usize>,
    pub local: Vec<usize>,
}

impl BatchCategories {
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut classes = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let local = labels.iter().map(|c| index[c]).collect();
        Self { classes, local }
    }
}

/// `Σ W ⊙ log_softmax(logits)` for a constant weight matrix `W`.
fn weighted_log_softmax<T: Scalar>(tape: &mut Tape<T>, logits: Var, weights: Tensor<T>) -> Result<Var> {
    let logp = tape.log_softmax_rows(logits)?;
    let w = tape.constant(weights);
    let prod = tape.mul_elem(w, logp)?;
    Ok(tape.sum(prod))
}

/// Smooth inter-class independence loss.
///
/// `values` are the batch instance features (N×d); `keys` holds the ontology
/// keys of the N_bc distinct batch categories and `local_labels[i]` is the key
/// row of instance `i`. Logits are `β·V·Kᵀ`; keys are constants.
pub fn inter_class_loss<T: Scalar>(
    tape: &mut Tape<T>,
    values: Var,
    local_labels: &[usize],
    keys: &Tensor<T>,
    cfg: &InterClassLossConfig<T>,
) -> Result<Var> {
    cfg.validate()?;
    let (n, d) = tape.shape(values);
    if n == 0 {
        return Err(OanError::EmptyBatch);
    }
    if local_labels.len() != n || keys.cols() != d {
        return Err(OanError::Shape {
            op: "inter_class_loss",
            left: (n, d),
            right: keys.shape(),
        });
    }
    let nbc = keys.rows();
    for (row, &l) in local_labels.iter().enumerate() {
        if l >= nbc {
            return Err(OanError::Label {
                row,
                label: l,
                classes: nbc,
            });
        }
    }
    let kt = tape.constant(keys.transpose());
    let sims = tape.matmul(values, kt)?;
    let logits = tape.scale(sims, cfg.beta);

    let nf = T::from_usize(n).unwrap();
    let kf = T::from_usize(nbc).unwrap();
    let eta = cfg.eta;
    // loss = Σ_ij W_ij · log p_i(j)
    let (hit, everywhere) = if cfg.literal_coefficients {
        let xi = -T::one() / nf - eta;
        (xi, eta / nf)
    } else {
        (-(T::one() - eta) / nf, -eta / (nf * kf))
    };
    let mut w = Tensor::full(n, nbc, everywhere);
    for (i, &l) in local_labels.iter().enumerate() {
        w.set(i, l, everywhere + hit);
    }
    weighted_log_softmax(tape, logits, w)
}

/// Gaussian similarity kernel `D(d) = ρ/(δ√2π)·exp(−(d−μ)²/(2δ²))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypersphereKernel<T> {
    pub mu: T,
    /// Variance δ².
    pub sigma_sq: T,
    pub rho: T,
}

impl<T: Scalar> HypersphereKernel<T> {
    /// Kernel whose peak value is exactly 1.
    pub fn normalized(mu: T, sigma_sq: T) -> Self {
        Self {
            mu,
            sigma_sq,
            rho: Self::peak_normalizer(sigma_sq),
        }
    }

    fn peak_normalizer(sigma_sq: T) -> T {
        sigma_sq.sqrt() * (T::lit(2.0) * T::lit(std::f64::consts::PI)).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_sq > T::zero()) {
            return Err(OanError::config(format!(
                "kernel variance must be > 0, got {}",
                self.sigma_sq
            )));
        }
        Ok(())
    }

    /// Prefactor `ρ/(δ√2π)`; exactly 1 for [`HypersphereKernel::normalized`].
    pub fn coefficient(&self) -> T {
        self.rho / Self::peak_normalizer(self.sigma_sq)
    }

    pub fn eval(&self, d: T) -> T {
        let z = d - self.mu;
        self.coefficient() * (-(z * z) / (self.sigma_sq + self.sigma_sq)).exp()
    }
}

impl<T: Scalar> Default for HypersphereKernel<T> {
    /// `μ = 0, δ² = ½`, which reduces to `D(d) = exp(−d²)`.
    fn default() -> Self {
        Self::normalized(T::zero(), T::lit(0.5))
    }
}

pub fn hypersphere_similarity<T: Scalar>(
    tape: &mut Tape<T>,
    dists: Var,
    kernel: &HypersphereKernel<T>,
) -> Result<Var> {
    kernel.validate()?;
    tape.gaussian_kernel(dists, kernel.mu, kernel.sigma_sq, kernel.coefficient())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HcrMode {
    SelfDistill,
    TeacherStudent,
}

/// Binary cross-entropy between kernel similarities of `target` (held
/// constant) and `pred`, averaged over ordered off-diagonal pairs.
pub fn hcr_loss<T: Scalar>(
    tape: &mut Tape<T>,
    target: Var,
    pred: Var,
    kernel: &HypersphereKernel<T>,
) -> Result<Var> {
    let n = tape.shape(pred).0;
    if tape.shape(target).0 != n {
        return Err(OanError::Shape {
            op: "hcr_loss",
            left: tape.shape(target),
            right: tape.shape(pred),
        });
    }
    if n < 2 {
        return Err(OanError::InsufficientPairs { op: "hcr_loss", rows: n });
    }
    let target = tape.detach(target);
    let dt = tape.pairwise_sq_dist(target)?;
    let t = hypersphere_similarity(tape, dt, kernel)?;
    let ds = tape.pairwise_sq_dist(pred)?;
    let s = hypersphere_similarity(tape, ds, kernel)?;
    let lo = T::lit(BCE_CLAMP);
    let s = tape.clamp(s, lo, T::one() - lo);

    let log_s = tape.ln(s);
    let neg_s = tape.scale(s, -T::one());
    let one_minus_s = tape.add_scalar(neg_s, T::one());
    let log_1ms = tape.ln(one_minus_s);

    let tv = tape.value(t).clone();
    let mut w_pos = Tensor::zeros(n, n);
    let mut w_neg = Tensor::zeros(n, n);
    let pairs = T::from_usize(n * (n - 1)).unwrap();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let ti = tv.get(i, j);
                w_pos.set(i, j, -ti / pairs);
                w_neg.set(i, j, -(T::one() - ti) / pairs);
            }
        }
    }
    let wp = tape.constant(w_pos);
    let wn = tape.constant(w_neg);
    let a = tape.mul_elem(wp, log_s)?;
    let b = tape.mul_elem(wn, log_1ms)?;
    let a = tape.sum(a);
    let b = tape.sum(b);
    tape.add(a, b)
}

/// Classification outputs guide the student's own logit layer.
pub fn self_distill_hcr<T: Scalar>(
    tape: &mut Tape<T>,
    classification_out: Var,
    student_logits: Var,
    kernel: &HypersphereKernel<T>,
) -> Result<Var> {
    hcr_loss(tape, classification_out, student_logits, kernel)
}

/// Frozen teacher logit similarities guide the classification outputs.
pub fn teacher_student_hcr<T: Scalar>(
    tape: &mut Tape<T>,
    classification_out: Var,
    teacher_logits: Var,
    kernel: &HypersphereKernel<T>,
) -> Result<Var> {
    hcr_loss(tape, teacher_logits, classification_out, kernel)
}

pub fn classification_loss<T: Scalar>(tape: &mut Tape<T>, class_logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, classes) = tape.shape(class_logits);
    if n == 0 {
        return Err(OanError::EmptyBatch);
    }
    if labels.len() != n {
        return Err(OanError::Shape {
            op: "classification_loss",
            left: (n, classes),
            right: (labels.len(), 1),
        });
    }
    let mut w = Tensor::zeros(n, classes);
    let scale = -T::one() / T::from_usize(n).unwrap();
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(OanError::Label { row, label, classes });
        }
        w.set(row, label, scale);
    }
    weighted_log_softmax(tape, class_logits, w)
}

/// Cross-entropy of the student logits against teacher distributions.
pub fn semantic_loss<T: Scalar>(tape: &mut Tape<T>, student_logits: Var, teacher_dist: &Tensor<T>) -> Result<Var> {
    let (n, m) = tape.shape(student_logits);
    if n == 0 {
        return Err(OanError::EmptyBatch);
    }
    if teacher_dist.shape() != (n, m) {
        return Err(OanError::Shape {
            op: "semantic_loss",
            left: (n, m),
            right: teacher_dist.shape(),
        });
    }
    for row in 0..n {
        let r = teacher_dist.row(row);
        let sum: T = r.iter().copied().sum();
        if r.iter().any(|&p| !(p >= T::zero())) || !((sum - T::one()).abs() <= T::lit(DISTRIBUTION_TOL)) {
            return Err(OanError::Distribution { row, sum: sum.as_f64() });
        }
    }
    let scale = -T::one() / T::from_usize(n).unwrap();
    weighted_log_softmax(tape, student_logits, teacher_dist.map(|p| p * scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights<T> {
    pub lambda1: T,
    pub lambda2: T,
    pub lambda3: T,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            lambda1: T::one(),
            lambda2: T::lit(0.001),
            lambda3: T::lit(0.1),
        }
    }
}

impl<T: Scalar> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= T::zero()) {
                return Err(OanError::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss terms of one batch; disabled terms are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub cls: Option<Var>,
    pub se: Option<Var>,
    pub inter: Option<Var>,
    pub s_hcr: Option<Var>,
    pub t_hcr: Option<Var>,
}

/// `L = L_cls + λ1·L_se + λ2·L_in + λ3·(L_s_hcr + L_t_hcr)`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, terms: &LossTerms, weights: &LossWeights<T>) -> Result<Var> {
    weights.validate()?;
    let named = [
        ("cls", terms.cls, T::one()),
        ("se", terms.se, weights.lambda1),
        ("in", terms.inter, weights.lambda2),
        ("s_hcr", terms.s_hcr, weights.lambda3),
        ("t_hcr", terms.t_hcr, weights.lambda3),
    ];
    let mut acc: Option<Var> = None;
    for (name, term, weight) in named {
        let Some(v) = term else { continue };
        if tape.shape(v) != (1, 1) {
            return Err(OanError::Shape {
                op: "total_loss",
                left: tape.shape(v),
                right: (1, 1),
            });
        }
        if !tape.value(v).item().is_finite() {
            return Err(OanError::Numeric(format!("loss term {name}")));
        }
        let scaled = if weight == T::one() { v } else { tape.scale(v, weight) };
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(T::zero())),
    })
}
