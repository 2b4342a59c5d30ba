//! End-to-end training: teacher pre-training, the student loop with the
//! ontology memory, and zero-shot evaluation on unseen classes.

mod checkpoint;
mod config;
mod experiments;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{AblationRow, TrainConfig, ABLATION_GRID};
pub use experiments::{
    ablation_table, run_ablation, run_sweep, sweep_csv, AblationSummary, CellSummary, SeedResult, Stat, SweepCell,
    SWEEP_LAMBDA2, SWEEP_LAMBDA3,
};
pub use optim::sgd_step;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_split, CrossModalDataset, SeenUnseenSplit};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{OanError, Result};
use crate::eval::{evaluate_retrieval, RetrievalMode, RetrievalReport};
use crate::losses::{self, BatchCategories, LossTerms};
use crate::memory::{BatchValues, OntologyDictionary};
use crate::modality::Modality;
use crate::model::{ModelDims, OanModel, TeacherModel};
use crate::rng::{self, derive_seed};

const SEED_SPLIT: u64 = 1;
const SEED_TEACHER_INIT: u64 = 2;
const SEED_ANCHORS: u64 = 3;
const SEED_STUDENT_INIT: u64 = 4;
const SEED_DICTIONARY: u64 = 5;
const SEED_TEACHER_EPOCH: u64 = 0x100;
const SEED_EPOCH: u64 = 0x200;

/// Mean per-batch loss terms of one epoch. Disabled terms stay 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub cls: f64,
    pub se: f64,
    #[serde(rename = "in")]
    pub inter: f64,
    pub s_hcr: f64,
    pub t_hcr: f64,
    pub total: f64,
    pub lr: f64,
}

/// Mutable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: OanModel<f64>,
    pub teacher: TeacherModel<f64>,
    pub dictionary: OntologyDictionary<f64>,
    pub split: SeenUnseenSplit,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochMetrics>,
    pub real: RetrievalReport,
    pub binary: RetrievalReport,
}

/// Auxiliary semantic label per class: the nearest of `m` seeded random
/// directions to the class mean of its seen instances. Unseen classes get
/// labels too but are never used in training.
pub fn semantic_labels(ds: &CrossModalDataset, m: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::seeded(seed);
    let anchors: Vec<Vec<f64>> = (0..m).map(|_| rng::unit_vector(&mut r, ds.d_in())).collect();
    (0..ds.num_classes())
        .map(|c| {
            let ids = ds.select(&[c], None);
            let feats = ds.features(&ids);
            let mean: Vec<f64> = (0..ds.d_in())
                .map(|j| (0..feats.rows()).map(|i| feats.get(i, j)).sum::<f64>() / feats.rows() as f64)
                .collect();
            let score = |a: &Vec<f64>| a.iter().zip(&mean).map(|(x, y)| x * y).sum::<f64>();
            (0..m)
                .max_by(|&a, &b| score(&anchors[a]).total_cmp(&score(&anchors[b])).then(b.cmp(&a)))
                .unwrap_or(0)
        })
        .collect()
}

fn gradients(tape: &Tape<f64>, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| tape.grad(v).expect("parameter has gradient").to_vec())
        .collect()
}

/// Pre-trains the teacher on the seen classes with the auxiliary labels, then
/// returns it frozen.
pub fn pretrain_teacher(cfg: &TrainConfig, ds: &CrossModalDataset, split: &SeenUnseenSplit) -> Result<TeacherModel<f64>> {
    let dims = ModelDims {
        d_in: ds.d_in(),
        hidden: cfg.hidden,
        embed: cfg.embed_dim,
        semantic: cfg.semantic_dim,
        classes: 1,
    };
    let mut teacher = TeacherModel::init(dims, cfg.tau, derive_seed(cfg.seed, SEED_TEACHER_INIT))?;
    let sem = semantic_labels(ds, cfg.semantic_dim, derive_seed(cfg.seed, SEED_ANCHORS));
    for epoch in 0..cfg.teacher_epochs {
        let batches = ds.training_batches(split, cfg.batch_size, derive_seed(cfg.seed, SEED_TEACHER_EPOCH + epoch as u64))?;
        for batch in batches {
            let mut tape = Tape::new();
            let vars = teacher.bind_trainable(&mut tape);
            let x = tape.constant(ds.features(&batch));
            let g = vars.logits(&mut tape, x, &ds.modalities(&batch))?;
            let labels: Vec<usize> = ds.labels(&batch).iter().map(|&c| sem[c]).collect();
            let loss = losses::classification_loss(&mut tape, g, &labels)?;
            tape.backward(loss)?;
            let grads = gradients(&tape, &vars.all());
            let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let names: Vec<&str> = teacher.named_params().iter().map(|(n, _)| *n).collect();
            let mut params: Vec<(&str, &mut Tensor<f64>)> = names.into_iter().zip(teacher.params_mut()).collect();
            sgd_step(&mut params, &grads, cfg.learning_rate)?;
        }
    }
    Ok(teacher)
}

/// Split, frozen teacher, freshly initialized student and dictionary.
pub fn init_state(cfg: &TrainConfig, ds: &CrossModalDataset) -> Result<TrainState> {
    cfg.validate()?;
    let split = make_split(ds.num_classes(), cfg.num_unseen, derive_seed(cfg.seed, SEED_SPLIT))?;
    let teacher = pretrain_teacher(cfg, ds, &split)?;
    let dims = ModelDims {
        d_in: ds.d_in(),
        hidden: cfg.hidden,
        embed: cfg.embed_dim,
        semantic: cfg.semantic_dim,
        classes: split.seen().len(),
    };
    let model = OanModel::init(dims, derive_seed(cfg.seed, SEED_STUDENT_INIT))?;
    let dictionary = OntologyDictionary::init(
        split.seen().len(),
        cfg.embed_dim,
        cfg.momentum,
        derive_seed(cfg.seed, SEED_DICTIONARY),
    )?;
    Ok(TrainState {
        model,
        teacher,
        dictionary,
        split,
        epoch: 0,
        history: Vec::new(),
    })
}

/// Per-term values of one batch, 0 for disabled terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub cls: f64,
    pub se: f64,
    pub inter: f64,
    pub s_hcr: f64,
    pub t_hcr: f64,
    pub total: f64,
}

/// Builds the enabled loss terms for one batch on `tape`. Returns the terms,
/// the total, and the L2-normalized embeddings used as memory values.
pub fn batch_objective(
    tape: &mut Tape<f64>,
    state: &TrainState,
    cfg: &TrainConfig,
    params: &crate::model::ModelVars,
    inputs: &Tensor<f64>,
    modality: &[Modality],
    local_labels: &[usize],
) -> Result<(LossTerms, Var, Var)> {
    let kernel = cfg.kernel();
    let x = tape.constant(inputs.clone());
    let emb = params.embed(tape, x, modality)?;
    let (g, c) = params.heads(tape, emb)?;
    let values = tape.l2_normalize_rows(emb)?;

    let mut terms = LossTerms {
        cls: Some(losses::classification_loss(tape, c, local_labels)?),
        ..LossTerms::default()
    };
    if cfg.enable_se {
        let e = state.teacher.distribution(inputs, modality)?;
        terms.se = Some(losses::semantic_loss(tape, g, &e)?);
    }
    if cfg.enable_in {
        let cats = BatchCategories::from_labels(local_labels);
        let keys = state.dictionary.lookup(&cats.classes)?;
        terms.inter = Some(losses::inter_class_loss(tape, values, &cats.local, &keys, &cfg.inter_class())?);
    }
    if cfg.enable_s_hcr || cfg.enable_t_hcr {
        let cn = tape.l2_normalize_rows(c)?;
        if cfg.enable_s_hcr {
            let gn = tape.l2_normalize_rows(g)?;
            terms.s_hcr = Some(losses::self_distill_hcr(tape, cn, gn, &kernel)?);
        }
        if cfg.enable_t_hcr {
            let tl = tape.constant(state.teacher.logits(inputs, modality)?);
            let tn = tape.l2_normalize_rows(tl)?;
            terms.t_hcr = Some(losses::teacher_student_hcr(tape, cn, tn, &kernel)?);
        }
    }
    let total = losses::total_loss(tape, &terms, &cfg.weights)?;
    Ok((terms, total, values))
}

/// One optimizer step on `batch`, followed by the key update.
pub fn train_step(state: &mut TrainState, ds: &CrossModalDataset, cfg: &TrainConfig, batch: &[usize]) -> Result<StepLosses> {
    let labels = ds.labels(batch);
    let local: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(row, &c)| {
            state.split.seen_index(c).ok_or(OanError::Label {
                row,
                label: c,
                classes: ds.num_classes(),
            })
        })
        .collect::<Result<_>>()?;
    let inputs = ds.features(batch);
    let modality = ds.modalities(batch);

    let mut tape = Tape::new();
    let params = state.model.bind(&mut tape);
    let (terms, total, values) = batch_objective(&mut tape, state, cfg, &params, &inputs, &modality, &local)?;
    tape.backward(total)?;

    let value_of = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let out = StepLosses {
        cls: value_of(terms.cls),
        se: value_of(terms.se),
        inter: value_of(terms.inter),
        s_hcr: value_of(terms.s_hcr),
        t_hcr: value_of(terms.t_hcr),
        total: tape.value(total).item(),
    };

    let grads = gradients(&tape, &params.all());
    let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let names: Vec<&str> = state.model.named_params().iter().map(|(n, _)| *n).collect();
    let mut p: Vec<(&str, &mut Tensor<f64>)> = names.into_iter().zip(state.model.params_mut()).collect();
    sgd_step(&mut p, &grads, cfg.learning_rate)?;

    // keys move after the step and never feed this step's gradient
    let batch_values = BatchValues::new(tape.value(values).detached(), local, modality)?;
    state.dictionary.update(&batch_values)?;
    Ok(out)
}

/// Shuffles seen-class instances, trains on every batch, records epoch means.
pub fn train_epoch(state: &mut TrainState, ds: &CrossModalDataset, cfg: &TrainConfig) -> Result<EpochMetrics> {
    let seed = derive_seed(cfg.seed, SEED_EPOCH + state.epoch as u64);
    let batches = ds.training_batches(&state.split, cfg.batch_size, seed)?;
    let mut sum = StepLosses::default();
    for batch in &batches {
        let s = train_step(state, ds, cfg, batch)?;
        sum.cls += s.cls;
        sum.se += s.se;
        sum.inter += s.inter;
        sum.s_hcr += s.s_hcr;
        sum.t_hcr += s.t_hcr;
        sum.total += s.total;
    }
    let n = batches.len().max(1) as f64;
    state.epoch += 1;
    let m = EpochMetrics {
        epoch: state.epoch,
        cls: sum.cls / n,
        se: sum.se / n,
        inter: sum.inter / n,
        s_hcr: sum.s_hcr / n,
        t_hcr: sum.t_hcr / n,
        total: sum.total / n,
        lr: cfg.learning_rate,
    };
    log::debug!("epoch {} total {:.6}", m.epoch, m.total);
    state.history.push(m);
    Ok(m)
}

/// Unseen-class sketch queries against unseen-class images, real and binary.
pub fn evaluate_zero_shot(
    model: &OanModel<f64>,
    ds: &CrossModalDataset,
    split: &SeenUnseenSplit,
    ks: &[usize],
) -> Result<(RetrievalReport, RetrievalReport)> {
    let q = ds.select(split.unseen(), Some(Modality::Sketch));
    let g = ds.select(split.unseen(), Some(Modality::Image));
    let qe = model.embed_detached(&ds.features(&q), &ds.modalities(&q))?;
    let ge = model.embed_detached(&ds.features(&g), &ds.modalities(&g))?;
    let (ql, gl) = (ds.labels(&q), ds.labels(&g));
    let real = evaluate_retrieval(&qe, &ql, &ge, &gl, ks, RetrievalMode::Real)?;
    let binary = evaluate_retrieval(&qe, &ql, &ge, &gl, ks, RetrievalMode::Binary)?;
    Ok((real, binary))
}

/// Full run: split, teacher, student, all epochs, zero-shot evaluation.
pub fn run_training(cfg: &TrainConfig, ds: &CrossModalDataset) -> Result<TrainOutcome> {
    let mut state = init_state(cfg, ds)?;
    for _ in 0..cfg.epochs {
        let m = train_epoch(&mut state, ds, cfg)?;
        log::info!(
            "epoch {}: total {:.5} cls {:.5} se {:.5} in {:.5} s_hcr {:.5} t_hcr {:.5}",
            m.epoch, m.total, m.cls, m.se, m.inter, m.s_hcr, m.t_hcr
        );
    }
    let (real, binary) = evaluate_zero_shot(&state.model, ds, &state.split, &cfg.eval_ks)?;
    let log = state.history.clone();
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_state(cfg.clone(), state),
        log,
        real,
        binary,
    })
}

#[cfg(test)]
mod tests;
