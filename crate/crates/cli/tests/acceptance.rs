//! End-to-end acceptance criteria. Each test writes one PASS/FAIL line to
//! stderr directly, so the verdicts show even when output is captured.

use std::io::Write;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng as _;
use sha2::{Digest, Sha256};

use oan_core::checks::run_gradchecks;
use oan_core::dataset::{generate_synthetic, CrossModalDataset, SyntheticConfig};
use oan_core::eval::{average_precision, binarize, evaluate_retrieval, RetrievalMode};
use oan_core::losses::{hypersphere_similarity, HypersphereKernel};
use oan_core::rng::{gaussian_tensor, seeded};
use oan_core::trainer::{run_ablation, run_training, AblationSummary, Checkpoint, TrainConfig};
use oan_core::{BatchValues, Modality, OntologyDictionary, Tape, Tensor};

fn verdict(name: &str, ok: bool, detail: String) {
    let line = format!("ACCEPTANCE [{}] {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{name}: {detail}");
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let res = run_gradchecks(20, 2024, 1e-5, 1e-4).unwrap();
    let took = start.elapsed();
    let parts: Vec<String> = res.iter().map(|r| format!("{} {:.1e}", r.name, r.max_rel_err)).collect();
    let ok = res.iter().all(|r| r.passed && r.instances >= 20) && took < Duration::from_secs(60);
    verdict("gradient correctness", ok, format!("20 instances each, max rel err [{}], {took:.2?}", parts.join(", ")));
}

#[test]
fn memory_invariant() {
    let (classes, touched, dim) = (12, 9, 16);
    let mut dict = OntologyDictionary::<f64>::init(classes, dim, 0.01, 5).unwrap();
    let init = dict.keys().clone();
    let mut r = seeded(17);
    let mut worst_norm = 0.0f64;
    let mut locality_ok = true;
    for step in 0..1000 {
        let n = r.random_range(1..8);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..touched)).collect();
        let values = gaussian_tensor::<f64>(&mut r, n, dim, 1.0 + step as f64 / 100.0);
        let modality = (0..n).map(|i| Modality::ALL[i % 2]).collect();
        let before = dict.keys().clone();
        dict.update(&BatchValues::new(values, labels.clone(), modality).unwrap()).unwrap();
        for c in (0..classes).filter(|c| !labels.contains(c)) {
            locality_ok &= before.row(c).iter().zip(dict.keys().row(c)).all(|(a, b)| a.to_bits() == b.to_bits());
        }
        for c in 0..classes {
            let norm = dict.keys().row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            worst_norm = worst_norm.max((norm - 1.0).abs());
        }
    }
    let untouched_ok = (touched..classes).all(|c| init.row(c).iter().zip(dict.keys().row(c)).all(|(a, b)| a.to_bits() == b.to_bits()));
    let ok = worst_norm <= 1e-9 && locality_ok && untouched_ok;
    verdict(
        "memory invariant",
        ok,
        format!("1000 updates, max |‖k‖−1| = {worst_norm:.1e}, untouched keys bit-identical: {}", locality_ok && untouched_ok),
    );
}

#[test]
fn kernel_identities() {
    let k = HypersphereKernel::<f64>::default();
    let peak = k.eval(0.0);
    let mut r = seeded(3);
    let ds: Vec<f64> = (0..1000).map(|_| r.random_range(0.0..4.0)).collect();
    let mut tape = Tape::new();
    let dv = tape.constant(Tensor::new(1000, 1, ds.clone()).unwrap());
    let sv = hypersphere_similarity(&mut tape, dv, &k).unwrap();
    let graph = tape.value(sv).data().to_vec();
    let worst = ds
        .iter()
        .zip(&graph)
        .map(|(&d, &g)| (g - (-d * d).exp()).abs().max((k.eval(d) - (-d * d).exp()).abs()))
        .fold(0.0, f64::max);
    let ok = peak == 1.0 && worst <= 1e-12;
    verdict("kernel identities", ok, format!("D(0) = {peak:?}, max |D(d)−exp(−d²)| over 1000 d = {worst:.1e}"));
}

/// Rank of each gallery item by counting the items ahead of it.
#[allow(clippy::needless_range_loop)]
fn naive_report(q: &Tensor<f64>, ql: &[usize], g: &Tensor<f64>, gl: &[usize], ks: &[usize], binary: bool) -> (f64, Vec<f64>) {
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        if binary {
            a.iter().zip(b).filter(|(x, y)| (**x >= 0.0) != (**y >= 0.0)).count() as f64
        } else {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        }
    };
    let mut ap_sum = 0.0;
    let mut prec = vec![0.0; ks.len()];
    for i in 0..q.rows() {
        let d: Vec<f64> = (0..g.rows()).map(|j| dist(q.row(i), g.row(j))).collect();
        let rank: Vec<usize> = (0..g.rows())
            .map(|j| 1 + (0..g.rows()).filter(|&m| d[m] < d[j] || (d[m] == d[j] && m < j)).count())
            .collect();
        let rel: Vec<usize> = (0..g.rows()).filter(|&j| gl[j] == ql[i]).collect();
        let mut ap = 0.0;
        for &j in &rel {
            ap += rel.iter().filter(|&&m| rank[m] <= rank[j]).count() as f64 / rank[j] as f64;
        }
        if !rel.is_empty() {
            ap_sum += ap / rel.len() as f64;
        }
        for (p, &k) in prec.iter_mut().zip(ks) {
            *p += rel.iter().filter(|&&m| rank[m] <= k).count() as f64 / k as f64;
        }
    }
    let n = q.rows() as f64;
    (ap_sum / n, prec.into_iter().map(|p| p / n).collect())
}

#[test]
fn metric_oracle() {
    let mut worst = 0.0f64;
    for inst in 0..50u64 {
        let mut r = seeded(1000 + inst);
        let (nq, ng, dim, classes) = (r.random_range(1..6), r.random_range(5..40), r.random_range(1..6), r.random_range(2..5));
        // coarse grid values force distance ties
        let grid = |t: Tensor<f64>| t.map(|v| (v * 2.0).round() / 2.0);
        let q = grid(gaussian_tensor(&mut r, nq, dim, 1.0));
        let g = grid(gaussian_tensor(&mut r, ng, dim, 1.0));
        let ql: Vec<usize> = (0..nq).map(|_| r.random_range(0..classes)).collect();
        let gl: Vec<usize> = (0..ng).map(|_| r.random_range(0..classes)).collect();
        let ks = [1, 3, ng];
        for (mode, binary) in [(RetrievalMode::Real, false), (RetrievalMode::Binary, true)] {
            let rep = evaluate_retrieval(&q, &ql, &g, &gl, &ks, mode).unwrap();
            let (map, prec) = naive_report(&q, &ql, &g, &gl, &ks, binary);
            worst = worst.max((rep.map_all - map).abs());
            for (k, p) in ks.iter().zip(prec) {
                worst = worst.max((rep.prec_at[k] - p).abs());
            }
        }
    }
    let ap = average_precision(&[true, false, true, false]);
    let ap_ok = (ap - 0.83333).abs() <= 1e-9 || (ap - 5.0 / 6.0).abs() <= 1e-9;

    // chance level: random embeddings over L classes. A finite gallery puts
    // E[AP] slightly above 1/L, by about (1 - 1/L)(H_G - 1)/G, so the gallery
    // is made large enough for that excess to sit well inside the sampling error.
    let (l, per_class, nq, seeds) = (5usize, 10_000usize, 5usize, 20u64);
    let g_n = l * per_class;
    let means: Vec<f64> = (0..seeds)
        .map(|s| {
            let mut r = seeded(50_000 + s);
            let g = gaussian_tensor::<f64>(&mut r, g_n, 8, 1.0);
            let q = gaussian_tensor::<f64>(&mut r, nq, 8, 1.0);
            let gl: Vec<usize> = (0..g_n).map(|i| i % l).collect();
            let ql: Vec<usize> = (0..nq).map(|i| i % l).collect();
            evaluate_retrieval(&q, &ql, &g, &gl, &[10], RetrievalMode::Real).unwrap().map_all
        })
        .collect();
    let mean = means.iter().sum::<f64>() / seeds as f64;
    let sd = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (seeds - 1) as f64).sqrt();
    let se = sd / (seeds as f64).sqrt();
    let chance = 1.0 / l as f64;
    let chance_ok = (mean - chance).abs() <= 3.0 * se;
    let (g_f, r_f) = (g_n as f64, per_class as f64);
    let harmonic: f64 = (1..=g_n).map(|k| 1.0 / k as f64).sum();
    let exact = (r_f - 1.0) / (g_f - 1.0) + harmonic * (g_f - r_f) / (g_f * (g_f - 1.0));

    let exact_ok = (mean - exact).abs() <= 3.0 * se;
    let ok = worst <= 1e-12 && ap_ok && chance_ok && exact_ok;
    verdict(
        "metric oracle",
        ok,
        format!(
            "50 instances max |Δ| = {worst:.1e}; AP[1,0,1,0] = {ap:.6}; chance mAP {mean:.5} vs 1/L = {chance}, |Δ| = {:.5} ≤ 3·SE = {:.5}: {chance_ok}; exact finite-gallery E[AP] {exact:.5} within 3·SE: {exact_ok}",
            (mean - chance).abs(),
            3.0 * se
        ),
    );
}

struct Grid {
    rows: Vec<AblationSummary>,
    took: Duration,
}

fn default_benchmark() -> CrossModalDataset {
    generate_synthetic(&SyntheticConfig {
        num_classes: 15,
        per_class_per_modality: 20,
        d_in: 16,
        modality_shift: 0.5,
        noise_std: 0.1,
        seed: 1,
    })
    .unwrap()
}

fn grid() -> &'static Grid {
    static GRID: OnceLock<Grid> = OnceLock::new();
    GRID.get_or_init(|| {
        let ds = default_benchmark();
        let start = Instant::now();
        let rows = run_ablation(&TrainConfig::default(), &ds, &[1, 2, 3, 4, 5]).unwrap();
        Grid { rows, took: start.elapsed() }
    })
}

fn row(g: &Grid, in_: bool, t: bool, s: bool) -> &AblationSummary {
    g.rows
        .iter()
        .find(|r| (r.row.enable_in, r.row.enable_t_hcr, r.row.enable_s_hcr) == (in_, t, s))
        .unwrap()
}

#[test]
fn ablation_trend() {
    let g = grid();
    let base = row(g, false, false, false);
    let with_in = row(g, true, false, false);
    let with_in_s = row(g, true, false, true);
    let paired = |a: &AblationSummary, b: &AblationSummary| {
        let d: Vec<f64> = a.cell.maps().iter().zip(b.cell.maps()).map(|(x, y)| y - x).collect();
        (d.iter().filter(|&&v| v > 0.0).count(), d.iter().sum::<f64>() / d.len() as f64)
    };
    let (wins1, gap1) = paired(base, with_in);
    let (wins2, gap2) = paired(with_in, with_in_s);
    let floor = 2.0 * 0.2;
    let min_row = g.rows.iter().map(|r| r.cell.map_all.mean).fold(f64::INFINITY, f64::min);
    let ok = gap1 > 0.0 && wins1 >= 4 && gap2 > 0.0 && wins2 >= 4 && min_row >= floor && g.took < Duration::from_secs(600);
    verdict(
        "ablation trend",
        ok,
        format!(
            "mAP baseline {:.5} → +L_in {:.5} (gap {gap1:+.2e}, {wins1}/5 seeds up) → +L_in+L_S_hcr {:.5} (gap {gap2:+.2e}, {wins2}/5 up); min row {min_row:.4} vs floor {floor}; grid {:.1?}",
            base.cell.map_all.mean, with_in.cell.map_all.mean, with_in_s.cell.map_all.mean, g.took
        ),
    );
}

#[test]
fn binary_retrieval_sanity() {
    let g = grid();
    let full = row(g, true, false, true);
    let real = full.cell.map_all.mean;
    let bin = full.cell.binary_map_all.mean;
    verdict("binary retrieval", bin >= 0.8 * real, format!("5-seed mean binary mAP {bin:.4} vs 0.8 × real {real:.4} = {:.4}", 0.8 * real));
}

#[test]
fn determinism() {
    let runs: Vec<(Vec<u8>, Vec<u8>)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let o = Command::new(env!("CARGO_BIN_EXE_oan"))
                .args(["--seed", "3", "--out"])
                .arg(dir.path())
                .args(["train", "--epochs", "3"])
                .output()
                .unwrap();
            assert!(o.status.success());
            let ck = Sha256::digest(std::fs::read(dir.path().join("checkpoint.oanck")).unwrap()).to_vec();
            (ck, std::fs::read(dir.path().join("metrics.jsonl")).unwrap())
        })
        .collect();
    let ok = runs[0] == runs[1];
    let hex: String = runs[0].0.iter().take(8).map(|b| format!("{b:02x}")).collect();
    verdict("determinism", ok, format!("two `oan train` runs: checkpoint sha256 {hex}… identical, metric logs identical: {ok}"));
}

#[test]
fn serialization() {
    let ds = default_benchmark();
    let bytes = ds.to_bytes();
    let ds_back = CrossModalDataset::from_bytes(&bytes).unwrap();
    let ds_ok = ds_back == ds && ds_back.to_bytes() == bytes;

    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let ck = run_training(&cfg, &ds).unwrap().checkpoint;
    let ck_bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&ck_bytes).unwrap();
    let ck_ok = back == ck && back.to_bytes() == ck_bytes;

    let probe: Vec<usize> = (0..ds.len()).step_by(7).collect();
    let (x, m) = (ds.features(&probe), ds.modalities(&probe));
    let a = ck.state.model.forward_detached(&x, &m).unwrap();
    let b = back.state.model.forward_detached(&x, &m).unwrap();
    let max_ulps = a
        .iter()
        .zip(&b)
        .flat_map(|(p, q)| p.data().iter().zip(q.data()).map(|(u, v)| (u.to_bits() as i64 - v.to_bits() as i64).unsigned_abs()))
        .max()
        .unwrap_or(0);
    let codes_ok = binarize(&a[0]) == binarize(&b[0]);
    let ok = ds_ok && ck_ok && max_ulps == 0 && codes_ok;
    verdict(
        "serialization",
        ok,
        format!("dataset bit-exact: {ds_ok}, checkpoint bit-exact: {ck_ok}, probe outputs max {max_ulps} ulps"),
    );
}
