//! Seeded finite-difference checks over every loss and the full objective.

use serde::Serialize;

use crate::diffcore::{grad_check, Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::{self, HypersphereKernel, InterClassLossConfig, LossTerms, LossWeights};
use crate::memory::OntologyDictionary;
use crate::modality::Modality;
use crate::model::{ModelDims, ModelVars, OanModel, TeacherModel};
use crate::rng::{self, derive_seed, Rng};

pub const CHECK_NAMES: [&str; 6] = ["inter_class", "s_hcr", "t_hcr", "cls", "se", "total"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckSummary {
    pub name: &'static str,
    pub instances: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn labels(r: &mut Rng, n: usize, classes: usize) -> Vec<usize> {
    use rand::Rng as _;
    // every class appears at least once
    let mut l: Vec<usize> = (0..n).map(|i| if i < classes { i } else { r.random_range(0..classes) }).collect();
    l.rotate_left(r.random_range(0..n));
    l
}

fn distribution(r: &mut Rng, n: usize, m: usize) -> Tensor<f64> {
    let mut t = rng::gaussian_tensor::<f64>(r, n, m, 1.0).map(f64::exp);
    for i in 0..n {
        let s: f64 = t.row(i).iter().sum();
        t.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn check_one(name: &str, seed: u64, step: f64, tol: f64) -> Result<f64> {
    let mut r = rng::seeded(seed);
    let k = HypersphereKernel::default();
    let rep = match name {
        "inter_class" => {
            let v = rng::gaussian_tensor(&mut r, 6, 4, 1.0);
            let l = labels(&mut r, 6, 3);
            let keys = OntologyDictionary::<f64>::init(3, 4, 0.01, seed)?.lookup(&[0, 1, 2])?;
            let cfg = InterClassLossConfig::default();
            grad_check(|tp, p| losses::inter_class_loss(tp, p[0], &l, &keys, &cfg), &[v], step, tol)?
        }
        "s_hcr" | "t_hcr" => {
            // redraw until every predicted similarity is inside the margins
            let (target, pred) = loop {
                let target = rng::gaussian_tensor(&mut r, 5, 4, 0.5);
                let pred = rng::gaussian_tensor(&mut r, 5, 4, 0.5);
                if !off_margin(&similarities(&pred, &k, false)?) {
                    break (target, pred);
                }
            };
            let f = |tp: &mut Tape<f64>, p: &[Var]| {
                let t = tp.constant(target.clone());
                if name == "s_hcr" {
                    losses::self_distill_hcr(tp, t, p[0], &k)
                } else {
                    losses::teacher_student_hcr(tp, p[0], t, &k)
                }
            };
            grad_check(f, &[pred], step, tol)?
        }
        "cls" => {
            let c = rng::gaussian_tensor(&mut r, 6, 5, 1.0);
            let l = labels(&mut r, 6, 5);
            grad_check(|tp, p| losses::classification_loss(tp, p[0], &l), &[c], step, tol)?
        }
        "se" => {
            let g = rng::gaussian_tensor(&mut r, 6, 5, 1.0);
            let e = distribution(&mut r, 6, 5);
            grad_check(|tp, p| losses::semantic_loss(tp, p[0], &e), &[g], step, tol)?
        }
        "total" => return total_check(seed, step, tol),
        other => return Err(crate::error::OanError::config(format!("unknown check {other}"))),
    };
    Ok(rep.max_rel_err)
}

/// Smallest |pre-activation| below which a ReLU kink may fall inside the
/// finite-difference stencil.
const RELU_MARGIN: f64 = 1e-3;
/// Kernel similarities must stay this far inside (0, 1), away from the BCE
/// clamp and the log singularities.
const SIMILARITY_MARGIN: f64 = 1e-5;

struct TotalInstance {
    model: OanModel<f64>,
    teacher: TeacherModel<f64>,
    x: Tensor<f64>,
    labels: Vec<usize>,
    keys: Tensor<f64>,
}

const MODALITY: [Modality; 6] = [
    Modality::Sketch,
    Modality::Image,
    Modality::Sketch,
    Modality::Image,
    Modality::Sketch,
    Modality::Image,
];

fn total_instance(seed: u64) -> Result<TotalInstance> {
    let dims = ModelDims {
        d_in: 5,
        hidden: 10,
        embed: 6,
        semantic: 4,
        classes: 3,
    };
    let mut model = OanModel::<f64>::init(dims, derive_seed(seed, 1))?;
    // nonzero biases keep every row away from the normalization singularity
    let mut jitter = rng::seeded(derive_seed(seed, 5));
    for p in model.params_mut() {
        let noise = rng::gaussian_tensor::<f64>(&mut jitter, p.rows(), p.cols(), 0.3);
        p.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    let teacher = TeacherModel::<f64>::init(dims, 1.0, derive_seed(seed, 2))?;
    let mut r = rng::seeded(derive_seed(seed, 3));
    let x = rng::gaussian_tensor(&mut r, 6, 5, 1.0);
    let labels = labels(&mut r, 6, 3);
    let keys = OntologyDictionary::<f64>::init(3, 6, 0.01, derive_seed(seed, 4))?.lookup(&[0, 1, 2])?;
    Ok(TotalInstance {
        model,
        teacher,
        x,
        labels,
        keys,
    })
}

fn off_margin(s: &[f64]) -> bool {
    s.iter().any(|s| !(SIMILARITY_MARGIN..=1.0 - SIMILARITY_MARGIN).contains(s))
}

fn similarities(t: &Tensor<f64>, k: &HypersphereKernel<f64>, normalize: bool) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut v = tape.constant(t.clone());
    if normalize {
        v = tape.l2_normalize_rows(v)?;
    }
    let d = tape.pairwise_sq_dist(v)?;
    let s = losses::hypersphere_similarity(&mut tape, d, k)?;
    let n = t.rows();
    Ok(tape.value(s).data().iter().enumerate().filter(|(i, _)| i / n != i % n).map(|(_, &v)| v).collect())
}

/// The objective is differentiable in a neighbourhood of the instance: no
/// ReLU input near 0 and no predicted similarity near 0 or 1.
fn admissible(inst: &TotalInstance) -> Result<bool> {
    let mut tape = Tape::new();
    let vars = inst.model.bind(&mut tape);
    let ids: Vec<usize> = MODALITY.iter().map(|m| m.index()).collect();
    let offsets = tape.gather_rows(vars.trunk.modality, &ids)?;
    let xv = tape.constant(inst.x.clone());
    let shifted = tape.add(xv, offsets)?;
    let pre = vars.trunk.fc1.apply(&mut tape, shifted)?;
    if tape.value(pre).data().iter().any(|z| z.abs() < RELU_MARGIN) {
        return Ok(false);
    }
    let [_, g, c] = inst.model.forward_detached(&inst.x, &MODALITY)?;
    let k = HypersphereKernel::default();
    for t in [g, c] {
        if off_margin(&similarities(&t, &k, true)?) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// The whole objective through every model parameter. The self-distillation
/// target is frozen at the base point, as a stop-gradient prescribes.
/// Inadmissible draws are replaced by the next derived seed.
fn total_check(seed: u64, step: f64, tol: f64) -> Result<f64> {
    let mut attempt = 0;
    let inst = loop {
        let inst = total_instance(derive_seed(seed, 100 + attempt))?;
        if admissible(&inst)? {
            break inst;
        }
        attempt += 1;
    };
    let TotalInstance {
        model,
        teacher,
        x,
        labels: l,
        keys,
    } = inst;
    let [_, _, frozen_c] = model.forward_detached(&x, &MODALITY)?;
    let e = teacher.distribution(&x, &MODALITY)?;
    let teacher_logits = teacher.logits(&x, &MODALITY)?;
    let k = HypersphereKernel::default();
    let weights = LossWeights::default();
    let f = |tp: &mut Tape<f64>, p: &[Var]| {
        let vars = ModelVars::from_slice(p);
        let xv = tp.constant(x.clone());
        let emb = vars.embed(tp, xv, &MODALITY)?;
        let (g, c) = vars.heads(tp, emb)?;
        let v = tp.l2_normalize_rows(emb)?;
        let cn = tp.l2_normalize_rows(c)?;
        let gn = tp.l2_normalize_rows(g)?;
        let fc = tp.constant(frozen_c.clone());
        let fc = tp.l2_normalize_rows(fc)?;
        let tl = tp.constant(teacher_logits.clone());
        let tn = tp.l2_normalize_rows(tl)?;
        let terms = LossTerms {
            cls: Some(losses::classification_loss(tp, c, &l)?),
            se: Some(losses::semantic_loss(tp, g, &e)?),
            inter: Some(losses::inter_class_loss(tp, v, &l, &keys, &InterClassLossConfig::default())?),
            s_hcr: Some(losses::self_distill_hcr(tp, fc, gn, &k)?),
            t_hcr: Some(losses::teacher_student_hcr(tp, cn, tn, &k)?),
        };
        losses::total_loss(tp, &terms, &weights)
    };
    let params: Vec<Tensor<f64>> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    Ok(grad_check(f, &params, step, tol)?.max_rel_err)
}

/// Runs `instances` seeded checks for each name in [`CHECK_NAMES`].
pub fn run_gradchecks(instances: usize, seed: u64, step: f64, tolerance: f64) -> Result<Vec<CheckSummary>> {
    CHECK_NAMES
        .iter()
        .enumerate()
        .map(|(ci, &name)| {
            let mut worst = 0.0f64;
            let mut failures = 0;
            for i in 0..instances {
                let err = check_one(name, derive_seed(seed, (ci as u64) << 32 | i as u64), step, tolerance)?;
                if !(err <= tolerance) {
                    failures += 1;
                }
                worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
            }
            Ok(CheckSummary {
                name,
                instances,
                failures,
                max_rel_err: worst,
                tolerance,
                passed: failures == 0,
            })
        })
        .collect()
}
