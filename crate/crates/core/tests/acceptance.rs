//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.
//!
//! Simulation runs use n = 4000, p = 30, q = 0.2 and 10 repetitions with the
//! default pipeline settings. Expect several minutes on a single core.

mod common;

use std::time::Instant;

use common::Check;
use ko_interact::baselines::BaselineMethod;
use ko_interact::data::Pair;
use ko_interact::distill::{compute_pair_weights, fit_additive_surface, PairRecord, SplineConfig};
use ko_interact::harness::{run_pipeline, DataSource, MetricsReport, PipelineConfig, RunSummary};
use ko_interact::knockoffs::{default_shrinkage, diagnostics, fit_gaussian, sample_knockoffs, KnockoffMethod};
use ko_interact::linalg;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const N: usize = 4000;
const P: usize = 30;
const REPS: usize = 10;
const FDR_CEILING: f64 = 0.25;

fn simulation(function_id: u8) -> PipelineConfig {
    PipelineConfig {
        data: DataSource::Simulation { function_id, n_samples: N, n_features: P },
        repetitions: REPS,
        base_seed: 2024,
        workers: 0,
        ..PipelineConfig::default()
    }
}

fn run(cfg: &PipelineConfig, label: &str) -> (MetricsReport, RunSummary) {
    let start = Instant::now();
    let summary = run_pipeline(cfg).unwrap_or_else(|e| panic!("{label}: {e}"));
    let m = summary.metrics.clone().unwrap_or_else(|| panic!("{label}: no metrics"));
    eprintln!(
        "  [{label}] {}/{} reps in {:.0}s: FDP {:.3} power {:.3} raw FDP {:.3}",
        m.completed,
        cfg.repetitions,
        start.elapsed().as_secs_f64(),
        m.fdp.mean,
        m.power.mean,
        m.raw_fdp.mean
    );
    assert_eq!(m.completed, cfg.repetitions, "{label}: failed repetitions");
    (m, summary)
}

fn verdict(ok: bool, detail: String) -> Check {
    if ok { Ok(detail) } else { Err(detail) }
}

fn all(checks: Vec<Check>) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for c in checks {
        match c {
            Ok(s) => lines.push(s),
            Err(s) => {
                ok = false;
                lines.push(format!("FAILED {s}"));
            }
        }
    }
    verdict(ok, lines.join("; "))
}

fn ar1_moments() -> Check {
    let (n, p, rho) = (5000, 30, 0.5f64);
    let sigma = DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()));
    let l = sigma.cholesky().expect("AR(1) covariance is positive definite").l();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = DMatrix::from_fn(n, p, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    let x = z * l.transpose();
    let model = fit_gaussian(&x, default_shrinkage(n, p)).map_err(|e| e.to_string())?;
    let xt = sample_knockoffs(&model, &x, 8).map_err(|e| e.to_string())?;
    let report = diagnostics(&x, &xt).map_err(|e| e.to_string())?;
    // cross-covariance against the fitted Σ − diag(s)
    let target = &model.sigma - DMatrix::from_diagonal(&model.s);
    let cross_gap = (linalg::cross_covariance(&x, &xt) - target).amax();
    let worst = report.mean_gap.max(report.cov_gap).max(report.cross_cov_gap).max(cross_gap);
    verdict(
        worst < 0.1,
        format!(
            "mean {:.3}, cov {:.3}, cross-cov {:.3}, vs Σ−diag(s) {:.3}",
            report.mean_gap, report.cov_gap, report.cross_cov_gap, cross_gap
        ),
    )
}

fn surface_records(e1d: &[f64], surface: impl Fn(usize, usize) -> f64) -> Vec<PairRecord> {
    let d = e1d.len();
    let p = d / 2;
    let mut out = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            let pair = Pair::new(i, j);
            if pair.is_self_pair(p) {
                continue;
            }
            out.push(PairRecord {
                pair,
                e_ij: surface(i, j),
                e_i: e1d[i],
                e_j: e1d[j],
                category: pair.category(p),
                self_pair: false,
            });
        }
    }
    out
}

fn fit_residuals(records: &[PairRecord], dim: usize) -> Result<Vec<(Pair, f64)>, String> {
    let w = compute_pair_weights(records, 1.0).map_err(|e| e.to_string())?;
    let fit = fit_additive_surface(records, &w.weights, dim, &SplineConfig::default()).map_err(|e| e.to_string())?;
    Ok(fit.scores)
}

fn spike_recovery() -> Check {
    use rand::Rng;
    let d = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let e: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();

    let additive = fit_residuals(&surface_records(&e, |i, j| e[i] + e[j]), d)?;
    let worst_additive = additive.iter().map(|(_, s)| s.abs()).fold(0.0, f64::max);

    let spike = Pair::new(0, 1);
    let spiked = fit_residuals(&surface_records(&e, |i, j| e[i] + e[j] + if Pair::new(i, j) == spike { 10.0 } else { 0.0 }), d)?;
    let s12 = spiked.iter().find(|(pr, _)| *pr == spike).map(|&(_, s)| s).ok_or("spike pair missing")?;
    let worst_null = spiked.iter().filter(|(pr, _)| *pr != spike).map(|(_, s)| s.abs()).fold(0.0, f64::max);
    verdict(
        (s12 - 10.0).abs() <= 1.0 && worst_null < 1.0 && worst_additive < 1e-6,
        format!("s12 {s12:.3}, max null |s| {worst_null:.3}, additive residual {worst_additive:.1e}"),
    )
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = |out: &str| {
        let mut cfg = PipelineConfig {
            data: DataSource::Simulation { function_id: 2, n_samples: 600, n_features: 12 },
            repetitions: 2,
            base_seed: 99,
            output_dir: Some(dir.path().join(out)),
            ..PipelineConfig::default()
        };
        cfg.train.epochs = 20;
        cfg.attribution.draws = 8;
        cfg
    };
    let mut b = config("b");
    b.workers = 2;
    run_pipeline(&config("a")).map_err(|e| e.to_string())?;
    run_pipeline(&b).map_err(|e| e.to_string())?;
    let sa = std::fs::read(dir.path().join("a/summary.json")).map_err(|e| e.to_string())?;
    let sb = std::fs::read(dir.path().join("b/summary.json")).map_err(|e| e.to_string())?;
    verdict(sa == sb, format!("summary.json {} bytes, identical: {}", sa.len(), sa == sb))
}

fn main() {
    let started = Instant::now();
    // Fast oracle criteria first.
    let mut results: Vec<(usize, &str, Check)> = vec![
        (
            6,
            "attribution oracles",
            all(vec![common::bilinear_oracle(), common::completeness_oracle(), common::hessian_fd_oracle()]),
        ),
        (7, "knockoff moment matching", ar1_moments()),
        (
            8,
            "threshold oracles",
            all(vec![
                common::interaction_threshold_oracle(1000, 11),
                common::q_value_oracle(1000, 12),
                common::univariate_oracle(1000, 13),
                common::step_up_oracle(1000, 14),
                common::expected_fp_identities(100),
            ]),
        ),
        (9, "distillation spike recovery", spike_recovery()),
        (10, "determinism", determinism()),
    ];

    // F1 carries the undistilled scores and the permutation baseline
    // alongside the main selection.
    let mut f1_cfg = simulation(1);
    f1_cfg.baselines.methods = vec![BaselineMethod::PermBh];
    let (f1, f1_run) = run(&f1_cfg, "F1");
    let (f2, _) = run(&simulation(2), "F2");
    let (f3, _) = run(&simulation(3), "F3");
    let fdps = [("F1", f1.fdp.mean), ("F2", f2.fdp.mean), ("F3", f3.fdp.mean)];
    results.push((
        1,
        "FDR control",
        verdict(
            fdps.iter().all(|&(_, v)| v <= FDR_CEILING),
            fdps.iter().map(|(f, v)| format!("{f} FDP {v:.3}")).collect::<Vec<_>>().join(", "),
        ),
    ));
    results.push((
        2,
        "distillation necessity",
        verdict(
            f1.raw_fdp.mean > 0.2 && f1.raw_fdp.mean > f1.fdp.mean,
            format!("F1 undistilled FDP {:.3} vs distilled {:.3}", f1.raw_fdp.mean, f1.fdp.mean),
        ),
    ));
    let auroc = f1.auroc.as_ref().map_or(f64::NAN, |a| a.mean);
    results.push((
        3,
        "nontrivial power",
        verdict(f1.power.mean >= 0.3 && auroc >= 0.7, format!("F1 power {:.3}, AUROC {auroc:.3}", f1.power.mean)),
    ));

    let mut perm_cfg = simulation(1);
    perm_cfg.knockoffs.method = KnockoffMethod::Permutation;
    let (perm, _) = run(&perm_cfg, "F1 permutation knockoffs");
    results.push((
        4,
        "invalid-knockoff robustness",
        verdict(
            perm.fdp.mean <= FDR_CEILING && perm.power.mean < f1.power.mean,
            format!("FDP {:.3}, power {:.3} vs valid {:.3}", perm.fdp.mean, perm.power.mean, f1.power.mean),
        ),
    ));

    let bh_fdp = f1.baselines.get("perm-bh").and_then(|m| m.get("fdp")).map_or(f64::NAN, |s| s.mean);
    results.push((
        5,
        "baseline failure",
        verdict(
            bh_fdp > 0.2 && bh_fdp > f1.fdp.mean,
            format!("permutation-BH FDP {bh_fdp:.3} vs knockoff {:.3}", f1.fdp.mean),
        ),
    ));

    // Distillation should bring null original-only scores closer to the
    // knockoff-involving ones, measured by the KS distance.
    let ks: Vec<(f64, f64)> = f1_run.completed().filter_map(|d| Some((d.ks_before?, d.ks_after?))).collect();
    let improved = ks.iter().filter(|(b, a)| a < b).count();
    let repair = verdict(
        ks.len() == REPS && improved >= 8,
        format!(
            "KS shrank in {improved} of {} F1 repetitions (mean {:.3} -> {:.3})",
            ks.len(),
            ks.iter().map(|k| k.0).sum::<f64>() / ks.len().max(1) as f64,
            ks.iter().map(|k| k.1).sum::<f64>() / ks.len().max(1) as f64
        ),
    );

    results.sort_by_key(|r| r.0);
    println!();
    let mut failed = 0;
    for (id, name, check) in &results {
        match check {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    // sanity: every criterion reported exactly once
    assert_eq!(results.iter().map(|r| r.0).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
    println!("{} of {} criteria passed in {:.0}s", results.len() - failed, results.len(), started.elapsed().as_secs_f64());
    match &repair {
        Ok(detail) => println!("property    PASS  distributional repair: {detail}"),
        Err(detail) => println!("property    FAIL  distributional repair: {detail}"),
    }
    if failed > 0 || repair.is_err() {
        std::process::exit(1);
    }
}
