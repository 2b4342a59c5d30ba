//! Multi-seed ablation grid and loss-weight sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::{run_training, AblationRow, TrainConfig, ABLATION_GRID};
use crate::dataset::CrossModalDataset;
use crate::error::Result;
use crate::losses::LossWeights;

pub const SWEEP_LAMBDA2: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];
pub const SWEEP_LAMBDA3: [f64; 3] = [1e-2, 1e-1, 1.0];

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub map_all: f64,
    pub binary_map_all: f64,
    pub prec: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub map_all: Stat,
    pub binary_map_all: Stat,
    pub prec: BTreeMap<usize, Stat>,
    pub per_seed: Vec<SeedResult>,
}

impl CellSummary {
    fn from_seeds(per_seed: Vec<SeedResult>) -> Self {
        let col = |f: &dyn Fn(&SeedResult) -> f64| Stat::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        let ks: Vec<usize> = per_seed.first().map(|s| s.prec.keys().copied().collect()).unwrap_or_default();
        let prec = ks.into_iter().map(|k| (k, col(&|s| s.prec[&k]))).collect();
        Self {
            map_all: col(&|s| s.map_all),
            binary_map_all: col(&|s| s.binary_map_all),
            prec,
            per_seed,
        }
    }

    pub fn maps(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.map_all).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationSummary {
    pub label: String,
    #[serde(flatten)]
    pub row: AblationRow,
    #[serde(flatten)]
    pub cell: CellSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub lambda2: f64,
    pub lambda3: f64,
    #[serde(flatten)]
    pub cell: CellSummary,
}

fn run_seeds(cfg: &TrainConfig, ds: &CrossModalDataset, seeds: &[u64]) -> Result<CellSummary> {
    let per_seed = seeds
        .iter()
        .map(|&seed| {
            let out = run_training(&TrainConfig { seed, ..cfg.clone() }, ds)?;
            Ok(SeedResult {
                seed,
                map_all: out.real.map_all,
                binary_map_all: out.binary.map_all,
                prec: out.real.prec_at,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CellSummary::from_seeds(per_seed))
}

/// Trains every row of [`ABLATION_GRID`] once per seed.
pub fn run_ablation(base: &TrainConfig, ds: &CrossModalDataset, seeds: &[u64]) -> Result<Vec<AblationSummary>> {
    ABLATION_GRID
        .iter()
        .map(|row| {
            log::info!("ablation row: {}", row.label());
            Ok(AblationSummary {
                label: row.label(),
                row: *row,
                cell: run_seeds(&row.apply(base), ds, seeds)?,
            })
        })
        .collect()
}

/// Trains the `λ2 × λ3` grid once per seed, other settings from `base`.
pub fn run_sweep(base: &TrainConfig, ds: &CrossModalDataset, seeds: &[u64]) -> Result<Vec<SweepCell>> {
    let mut out = Vec::new();
    for &lambda2 in &SWEEP_LAMBDA2 {
        for &lambda3 in &SWEEP_LAMBDA3 {
            log::info!("sweep cell lambda2={lambda2} lambda3={lambda3}");
            let cfg = TrainConfig {
                weights: LossWeights { lambda2, lambda3, ..base.weights },
                ..base.clone()
            };
            out.push(SweepCell {
                lambda2,
                lambda3,
                cell: run_seeds(&cfg, ds, seeds)?,
            });
        }
    }
    Ok(out)
}

/// Aligned plain-text table, one line per ablation row.
pub fn ablation_table(rows: &[AblationSummary]) -> String {
    let ks: Vec<usize> = rows.first().map(|r| r.cell.prec.keys().copied().collect()).unwrap_or_default();
    let mut header = format!("{:<34} {:>5} {:>5} {:>5}  {:>17}", "configuration", "L_in", "T_hcr", "S_hcr", "mAP@all");
    for k in &ks {
        let _ = write!(header, "  {:>17}", format!("Prec@{k}"));
    }
    let mut out = header.clone();
    out.push('\n');
    out.push_str(&"-".repeat(header.len()));
    out.push('\n');
    let mark = |b: bool| if b { "x" } else { "" };
    for r in rows {
        let _ = write!(
            out,
            "{:<34} {:>5} {:>5} {:>5}  {:>17}",
            r.label,
            mark(r.row.enable_in),
            mark(r.row.enable_t_hcr),
            mark(r.row.enable_s_hcr),
            format!("{:.4} ± {:.4}", r.cell.map_all.mean, r.cell.map_all.std)
        );
        for k in &ks {
            let s = r.cell.prec[k];
            let _ = write!(out, "  {:>17}", format!("{:.4} ± {:.4}", s.mean, s.std));
        }
        out.push('\n');
    }
    out
}

/// CSV with columns `lambda2,lambda3,map_all,prec`; `prec` is Prec@`k`.
pub fn sweep_csv(cells: &[SweepCell], k: usize) -> String {
    let mut out = String::from("lambda2,lambda3,map_all,prec\n");
    for c in cells {
        let p = c.cell.prec.get(&k).map_or(f64::NAN, |s| s.mean);
        let _ = writeln!(out, "{},{},{},{}", c.lambda2, c.lambda3, c.cell.map_all.mean, p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_matches_hand_values() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]), Stat { mean: 7.0, std: 0.0 });
    }

    #[test]
    fn sweep_grid_holds_default_point() {
        assert_eq!(SWEEP_LAMBDA2.len() * SWEEP_LAMBDA3.len(), 12);
        assert!(SWEEP_LAMBDA2.contains(&0.001) && SWEEP_LAMBDA3.contains(&0.1));
    }
}
