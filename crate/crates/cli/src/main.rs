use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use oan_core::checks::run_gradchecks;
use oan_core::dataset::{generate_synthetic, CrossModalDataset, SyntheticConfig};
use oan_core::losses::LossWeights;
use oan_core::trainer::{
    ablation_table, evaluate_zero_shot, run_ablation, run_sweep, run_training, sweep_csv, Checkpoint, TrainConfig,
};
use oan_core::{OanError, Result};

#[derive(Parser, Debug)]
#[command(name = "oan", version, about = "Ontology-aware network for zero-shot sketch-based retrieval")]
struct Cli {
    /// Random seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config: {"train": {...}, "data": {...}}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "oan-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(DataArgs),
    /// Train one model and evaluate it on the unseen classes.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run the six-row loss ablation over several seeds.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
    /// Sweep lambda2 x lambda3 over several seeds.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of every loss and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    /// Load a dataset file instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    modality_shift: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Seed of the synthetic generator, independent of the training seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// lambda1,lambda2,lambda3
    #[arg(long, value_delimiter = ',', num_args = 1)]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    semantic_dim: Option<usize>,
    #[arg(long)]
    num_unseen: Option<usize>,
    #[arg(long)]
    teacher_epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    eval_ks: Option<Vec<usize>>,
    #[arg(long)]
    enable_se: Option<bool>,
    #[arg(long)]
    enable_in: Option<bool>,
    #[arg(long)]
    enable_s_hcr: Option<bool>,
    #[arg(long)]
    enable_t_hcr: Option<bool>,
    #[arg(long)]
    literal_coefficients: Option<bool>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    train: TrainConfig,
    data: SyntheticConfig,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(w) = &self.weights {
            if w.len() != 3 {
                return Err(OanError::config(format!("--weights takes lambda1,lambda2,lambda3; got {} values", w.len())));
            }
        }
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.learning_rate, self.lr);
        set(&mut cfg.beta, self.beta);
        set(&mut cfg.eta, self.eta);
        set(&mut cfg.momentum, self.momentum);
        set(&mut cfg.tau, self.tau);
        set(&mut cfg.hidden, self.hidden);
        set(&mut cfg.embed_dim, self.embed_dim);
        set(&mut cfg.semantic_dim, self.semantic_dim);
        set(&mut cfg.num_unseen, self.num_unseen);
        set(&mut cfg.teacher_epochs, self.teacher_epochs);
        set(&mut cfg.eval_ks, self.eval_ks.clone());
        set(&mut cfg.enable_se, self.enable_se);
        set(&mut cfg.enable_in, self.enable_in);
        set(&mut cfg.enable_s_hcr, self.enable_s_hcr);
        set(&mut cfg.enable_t_hcr, self.enable_t_hcr);
        set(&mut cfg.literal_coefficients, self.literal_coefficients);
        if let Some(w) = &self.weights {
            cfg.weights = LossWeights { lambda1: w[0], lambda2: w[1], lambda3: w[2] };
        }
        Ok(())
    }
}

impl DataArgs {
    fn apply(&self, cfg: &mut SyntheticConfig) {
        set(&mut cfg.num_classes, self.classes);
        set(&mut cfg.per_class_per_modality, self.per_class);
        set(&mut cfg.d_in, self.d_in);
        set(&mut cfg.modality_shift, self.modality_shift);
        set(&mut cfg.noise_std, self.noise);
        set(&mut cfg.seed, self.data_seed);
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| OanError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| OanError::config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| OanError::io(path, e))
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

struct Ctx {
    out: PathBuf,
    file: FileConfig,
    seed: Option<u64>,
}

impl Ctx {
    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| OanError::io(&self.out, e))?;
        Ok(&self.out)
    }

    fn train_config(&self, args: &TrainArgs) -> Result<TrainConfig> {
        let mut cfg = self.file.train.clone();
        args.apply(&mut cfg)?;
        set(&mut cfg.seed, self.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    fn synthetic(&self, args: &DataArgs) -> SyntheticConfig {
        let mut cfg = self.file.data;
        args.apply(&mut cfg);
        cfg
    }

    /// The dataset plus a JSON description of where it came from.
    fn dataset(&self, args: &DataArgs) -> Result<(CrossModalDataset, serde_json::Value)> {
        match &args.data {
            Some(path) => Ok((CrossModalDataset::load(path)?, json!({ "path": path }))),
            None => {
                let cfg = self.synthetic(args);
                Ok((generate_synthetic(&cfg)?, json!({ "synthetic": cfg })))
            }
        }
    }
}

fn print_resolved(v: serde_json::Value) {
    println!("resolved config:\n{}", pretty(&v).trim_end());
}

fn cmd_gen_data(ctx: &Ctx, args: &DataArgs) -> Result<()> {
    let mut cfg = ctx.synthetic(args);
    set(&mut cfg.seed, ctx.seed);
    print_resolved(json!({ "data": cfg }));
    let ds = generate_synthetic(&cfg)?;
    let path = ctx.out_dir()?.join("dataset.oands");
    ds.save(&path)?;
    let sketches: usize = ds.counts().iter().map(|c| c[0]).sum();
    println!(
        "wrote {}: {} instances ({} sketches, {} images), {} classes, d_in {}",
        path.display(),
        ds.len(),
        sketches,
        ds.len() - sketches,
        ds.num_classes(),
        ds.d_in()
    );
    Ok(())
}

fn write_reports(dir: &Path, real: &oan_core::eval::RetrievalReport, binary: &oan_core::eval::RetrievalReport) -> Result<()> {
    write(&dir.join("report_real.json"), pretty(&real.to_json()))?;
    write(&dir.join("report_binary.json"), pretty(&binary.to_json()))?;
    for r in [real, binary] {
        let prec: Vec<String> = r.prec_at.iter().map(|(k, v)| format!("Prec@{k} {v:.4}")).collect();
        println!("{:<6} mAP@all {:.4}  {}", r.mode.as_str(), r.map_all, prec.join("  "));
    }
    Ok(())
}

fn cmd_train(ctx: &Ctx, train: &TrainArgs, data: &DataArgs) -> Result<()> {
    let cfg = ctx.train_config(train)?;
    let (ds, source) = ctx.dataset(data)?;
    print_resolved(json!({ "train": cfg, "data": source }));
    let out = run_training(&cfg, &ds)?;
    let dir = ctx.out_dir()?;
    out.checkpoint.save(dir.join("checkpoint.oanck"))?;
    let log: String = out.log.iter().map(|m| serde_json::to_string(m).expect("serializable") + "\n").collect();
    write(&dir.join("metrics.jsonl"), log)?;
    write(&dir.join("config.json"), pretty(&cfg))?;
    write_reports(dir, &out.real, &out.binary)?;
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_eval(ctx: &Ctx, checkpoint: &Path, data: &DataArgs) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (ds, source) = ctx.dataset(data)?;
    print_resolved(json!({ "checkpoint": checkpoint, "train": ck.config, "data": source }));
    let st = &ck.state;
    let (real, binary) = evaluate_zero_shot(&st.model, &ds, &st.split, &ck.config.eval_ks)?;
    write_reports(ctx.out_dir()?, &real, &binary)
}

fn cmd_ablate(ctx: &Ctx, train: &TrainArgs, data: &DataArgs, seeds: &[u64]) -> Result<()> {
    let cfg = ctx.train_config(train)?;
    let (ds, source) = ctx.dataset(data)?;
    print_resolved(json!({ "train": cfg, "data": source, "seeds": seeds }));
    let rows = run_ablation(&cfg, &ds, seeds)?;
    let table = ablation_table(&rows);
    let dir = ctx.out_dir()?;
    write(&dir.join("ablation.json"), pretty(&json!({ "seeds": seeds, "rows": rows })))?;
    write(&dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, train: &TrainArgs, data: &DataArgs, seeds: &[u64]) -> Result<()> {
    let cfg = ctx.train_config(train)?;
    let (ds, source) = ctx.dataset(data)?;
    print_resolved(json!({ "train": cfg, "data": source, "seeds": seeds }));
    let cells = run_sweep(&cfg, &ds, seeds)?;
    let csv = sweep_csv(&cells, cfg.eval_ks[0]);
    let dir = ctx.out_dir()?;
    write(&dir.join("sweep.json"), pretty(&json!({ "seeds": seeds, "prec_k": cfg.eval_ks[0], "cells": cells })))?;
    write(&dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx, tolerance: f64, step: f64, instances: usize) -> Result<bool> {
    let seed = ctx.seed.unwrap_or(ctx.file.train.seed);
    print_resolved(json!({ "seed": seed, "tolerance": tolerance, "step": step, "instances": instances }));
    let results = run_gradchecks(instances, seed, step, tolerance)?;
    for r in &results {
        println!(
            "{:<12} {}  max rel err {:.3e}  ({} / {} failed)",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_err,
            r.failures,
            r.instances
        );
    }
    write(&ctx.out_dir()?.join("gradcheck.json"), pretty(&results))?;
    let ok = results.iter().all(|r| r.passed);
    if !ok {
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        eprintln!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let ctx = Ctx {
        file: load_file_config(cli.config.as_deref())?,
        out: cli.out,
        seed: cli.seed,
    };
    match &cli.command {
        Command::GenData(d) => cmd_gen_data(&ctx, d)?,
        Command::Train { train, data } => cmd_train(&ctx, train, data)?,
        Command::Eval { checkpoint, data } => cmd_eval(&ctx, checkpoint, data)?,
        Command::Ablate { train, data, seeds } => cmd_ablate(&ctx, train, data, seeds)?,
        Command::Sweep { train, data, seeds } => cmd_sweep(&ctx, train, data, seeds)?,
        Command::Gradcheck { tolerance, step, instances } => return cmd_gradcheck(&ctx, *tolerance, *step, *instances),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OAN_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
