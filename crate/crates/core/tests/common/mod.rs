//! Brute-force and analytic oracles shared by the oracle suites and the
//! acceptance run. Each check returns a short description on success.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;

use ko_interact::attribution::{expected_attributions, integrated_attributions, Differentiable};
use ko_interact::baselines::{adjusted_pvalues, bh_select, by_select, harmonic, PValueTable};
use ko_interact::data::{row_major, Category, Pair, Task};
use ko_interact::fdr::{
    expected_fp, interaction_threshold, q_values, univariate_q_values, univariate_threshold,
    InteractionScoreSet, ScoreEntry,
};
use ko_interact::knockoffs::{permutation_knockoffs, AugmentedDataset};
use ko_interact::mlp::{train, CouplingMlp, TrainConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

// ---- knockoff filter -------------------------------------------------------

pub fn random_gamma(rng: &mut ChaCha8Rng) -> InteractionScoreSet {
    // 12 to 480 scored pairs
    let p = rng.random_range(3..17);
    let coarse = rng.random_bool(0.5);
    let mut entries = Vec::new();
    for i in 0..2 * p {
        for j in i + 1..2 * p {
            let pair = Pair::new(i, j);
            if pair.is_self_pair(p) || rng.random_bool(0.1) {
                continue;
            }
            let mut score: f64 = rng.random_range(-1.0..3.0);
            if coarse {
                // force ties
                score = (score * 4.0).round() / 4.0;
            }
            if pair.category(p) == Category::OO {
                score += rng.random_range(0.0..1.0);
            }
            entries.push(ScoreEntry { pair, score, category: pair.category(p), weight: 1.0 });
        }
    }
    InteractionScoreSet { p, entries }
}

/// Estimated FDP at threshold `t`, counted directly.
pub fn brute_ratio(g: &InteractionScoreSet, t: f64) -> f64 {
    let above = |c: Category| g.entries.iter().filter(|e| e.category == c && e.score >= t).count() as f64;
    let (oo, ok, kk) = (above(Category::OO), above(Category::OK), above(Category::KK));
    let fp = (ok + kk - 2.0 * kk).max(0.0);
    fp / oo.max(1.0)
}

fn candidates(g: &InteractionScoreSet) -> Vec<f64> {
    let mut t: Vec<f64> = g.entries.iter().map(|e| e.score).filter(|&s| s > 0.0).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

pub fn interaction_threshold_oracle(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nonempty = 0;
    for case in 0..cases {
        let g = random_gamma(&mut rng);
        if g.entries.is_empty() {
            continue;
        }
        let q = [0.05, 0.1, 0.2, 0.3, 0.5][case % 5];
        let expected_t = candidates(&g).into_iter().find(|&t| brute_ratio(&g, t) <= q);
        let sel = interaction_threshold(&g, q).map_err(|e| e.to_string())?;
        ensure!(sel.threshold == expected_t, "case {case}: threshold {:?} vs {:?}", sel.threshold, expected_t);
        let expected: BTreeSet<Pair> = match expected_t {
            Some(t) => g.original_only().filter(|e| e.score >= t).map(|e| e.pair).collect(),
            None => BTreeSet::new(),
        };
        let got: BTreeSet<Pair> = sel.selected_pairs().into_iter().collect();
        ensure!(got == expected, "case {case}: selection differs");
        if let Some(t) = expected_t {
            ensure!(sel.estimated_fdp == Some(brute_ratio(&g, t)), "case {case}: estimated FDP");
        }
        nonempty += usize::from(!expected.is_empty());
    }
    ensure!(nonempty > cases / 10, "too few informative cases: {nonempty}");
    Ok(format!("{cases} score sets, {nonempty} with selections"))
}

pub fn q_value_oracle(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let g = random_gamma(&mut rng);
        let qv = q_values(&g);
        let cands = candidates(&g);
        for e in g.original_only() {
            let expected = cands
                .iter()
                .filter(|&&t| t <= e.score)
                .map(|&t| brute_ratio(&g, t))
                .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.min(r))))
                .map_or(1.0, |r| r.clamp(0.0, 1.0));
            ensure!(qv[&e.pair] == expected, "case {case} pair {:?}: {} vs {expected}", e.pair, qv[&e.pair]);
        }
        ensure!(qv.len() == g.original_only().count(), "case {case}: q-value count");
    }
    Ok(format!("{cases} score sets"))
}

fn brute_univariate(w: &[f64], q: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for &v in w {
        let t = v.abs();
        if t == 0.0 {
            continue;
        }
        let neg = w.iter().filter(|&&x| x <= -t).count() as f64;
        let pos = w.iter().filter(|&&x| x >= t).count() as f64;
        if (1.0 + neg) / pos.max(1.0) <= q && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    }
    best
}

pub fn univariate_oracle(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.random_range(1..60);
        let shift = rng.random_range(0.0..2.0);
        let w: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-2.0..2.0) + shift;
                if rng.random_bool(0.3) { (v * 2.0).round() / 2.0 } else { v }
            })
            .collect();
        let q = [0.1, 0.2, 0.3][case % 3];
        let (t, selected) = univariate_threshold(&w, q).map_err(|e| e.to_string())?;
        let expected = brute_univariate(&w, q);
        ensure!(t == expected, "case {case}: threshold {t:?} vs {expected:?}");
        let expected_sel: Vec<usize> = match expected {
            Some(t) => (0..n).filter(|&j| w[j] >= t).collect(),
            None => vec![],
        };
        ensure!(selected == expected_sel, "case {case}: selection");
        // q-values agree with the selection at this level
        let qv = univariate_q_values(&w).map_err(|e| e.to_string())?;
        let by_q: Vec<usize> = (0..n).filter(|&j| qv[j] <= q).collect();
        ensure!(by_q == expected_sel, "case {case}: q-values");
    }
    Ok(format!("{cases} statistic vectors"))
}

fn brute_step_up(p: &[f64], level: f64) -> BTreeSet<usize> {
    let m = p.len();
    let mut k_max = 0;
    for k in 1..=m {
        let below = p.iter().filter(|&&v| v <= k as f64 * level / m as f64).count();
        if below >= k {
            k_max = k;
        }
    }
    if k_max == 0 {
        return BTreeSet::new();
    }
    let cut = k_max as f64 * level / m as f64;
    (0..m).filter(|&i| p[i] <= cut).collect()
}

pub fn step_up_oracle(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let m = rng.random_range(1..40);
        let b = 99;
        let p: Vec<f64> = (0..m)
            .map(|_| {
                if rng.random_bool(0.3) {
                    (1 + rng.random_range(0..5)) as f64 / (b + 1) as f64
                } else {
                    (1 + rng.random_range(0..=b)) as f64 / (b + 1) as f64
                }
            })
            .collect();
        let pairs: Vec<Pair> = (0..m).map(|k| Pair::new(k, 100 + k)).collect();
        let table = PValueTable { pairs, p: p.clone(), observed: vec![0.0; m], n_permutations: b };
        let q = [0.05, 0.1, 0.2][case % 3];
        let to_set = |v: Vec<Pair>| -> BTreeSet<usize> { v.into_iter().map(|pr| pr.i).collect() };
        let by_level = q / (1..=m).map(|k| 1.0 / k as f64).sum::<f64>();
        let bh = to_set(bh_select(&table, q).map_err(|e| e.to_string())?);
        ensure!(bh == brute_step_up(&p, q), "BH case {case}");
        let by = to_set(by_select(&table, q).map_err(|e| e.to_string())?);
        ensure!(by == brute_step_up(&p, by_level), "BY case {case}");
        // adjusted p-values reproduce the selections
        for (dependent, level_sel) in [(false, brute_step_up(&p, q)), (true, brute_step_up(&p, by_level))] {
            let adj = adjusted_pvalues(&p, dependent);
            // m·p/k and k·q/m round differently at exact ties
            let sel: BTreeSet<usize> = (0..m).filter(|&i| adj[i] <= q * (1.0 + 1e-12)).collect();
            ensure!(sel == level_sel, "adjusted case {case} dependent {dependent}");
        }
    }
    ensure!((harmonic(3) - 11.0 / 6.0).abs() < 1e-15, "harmonic(3)");
    Ok(format!("{cases} p-value vectors"))
}

pub fn expected_fp_identities(limit: usize) -> Check {
    for k in 0..=limit {
        for kk in 0..=limit {
            let got = expected_fp(k, kk);
            if kk > k {
                ensure!(got.is_err(), "K={k} KK={kk} accepted");
                continue;
            }
            let v = got.map_err(|e| e.to_string())?;
            ensure!(v == (k as f64 - 2.0 * kk as f64).max(0.0), "K={k} KK={kk}: {v}");
            // TC–!TC at 1:1 plus !TC–!TC at 1:3
            if k >= 3 * kk {
                let tc = (k - 3 * kk) as f64;
                let non_tc = 3.0 * kk as f64;
                ensure!(v == tc + non_tc / 3.0, "K={k} KK={kk}: accounting");
            }
            ensure!(v <= k as f64, "K={k} KK={kk}: exceeds K");
            if k > 0 && kk < k {
                ensure!(expected_fp(k - 1, kk).unwrap() <= v, "K={k} KK={kk}: not monotone");
            }
        }
    }
    Ok(format!("all counts up to {limit}"))
}

// ---- attribution -----------------------------------------------------------

/// f(x) = x₀·x₁ on two inputs.
pub struct Bilinear;

impl Differentiable for Bilinear {
    fn input_dim(&self) -> usize {
        2
    }
    fn value(&self, x: &[f64]) -> f64 {
        x[0] * x[1]
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) -> f64 {
        out[0] = x[1];
        out[1] = x[0];
        x[0] * x[1]
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 1.0, 1.0, 0.0]);
    }
}

pub fn trained_net(seed: u64) -> (CouplingMlp, AugmentedDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 800;
    let x = DMatrix::from_fn(n, 3, |_, _| rng.random::<f64>());
    let y: Vec<f64> = (0..n).map(|r| x[(r, 0)] * x[(r, 1)] + 0.3 * x[(r, 2)]).collect();
    let xt = permutation_knockoffs(&x, seed);
    let aug = AugmentedDataset::new(&x, &xt, y, Task::Regression).unwrap();
    let cfg = TrainConfig { epochs: 30, seed, ..TrainConfig::default() };
    (train(&aug, &cfg).unwrap(), aug)
}

pub fn bilinear_oracle() -> Check {
    let x = [1.0, 1.0];
    let zero = [0.0, 0.0];
    let ex = expected_attributions(&Bilinear, &x, &zero, 8192, 5).map_err(|e| e.to_string())?;
    let ig = integrated_attributions(&Bilinear, &x, &zero, 16).map_err(|e| e.to_string())?;
    let (a, b) = (ex.e2d[0][1], ig.e2d[0][1]);
    ensure!((a - 0.25).abs() / 0.25 < 0.05, "expected Hessian {a}");
    ensure!((b - 0.25).abs() / 0.25 < 0.05, "integrated Hessian {b}");
    // diagonal Hessian is zero
    ensure!(ig.e2d[0][0] == 0.0, "diagonal {}", ig.e2d[0][0]);
    Ok(format!("expected {a:.4}, integrated {b:.4}"))
}

pub fn completeness_oracle() -> Check {
    let (net, aug) = trained_net(1);
    let d = net.input_dim();
    let rows = row_major(&aug.columns);
    let zero = vec![0.0; d];
    let mut worst = 0.0f64;
    for r in 0..5 {
        let x = &rows[r * d..(r + 1) * d];
        let res = integrated_attributions(&net, x, &zero, 128).map_err(|e| e.to_string())?;
        let total: f64 = res.e1d_signed.iter().sum();
        let delta = net.value(x) - net.value(&zero);
        let rel = (total - delta).abs() / delta.abs();
        ensure!(rel <= 0.01, "row {r}: {total} vs {delta}");
        worst = worst.max(rel);
    }
    Ok(format!("worst relative gap {worst:.2e}"))
}

pub fn hessian_fd_oracle() -> Check {
    let (net, _) = trained_net(2);
    let d = net.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for point in 0..10 {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..1.5)).collect();
        let mut exact = vec![0.0; d * d];
        net.hessian(&x, &mut exact);
        let mut fd = vec![0.0; d * d];
        let (mut gp, mut gm) = (vec![0.0; d], vec![0.0; d]);
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            net.gradient(&xp, &mut gp);
            net.gradient(&xm, &mut gm);
            for i in 0..d {
                fd[i * d + j] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = exact.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        ensure!(err <= 1e-3 * scale, "point {point}: max error {err}, scale {scale}");
        worst = worst.max(err / scale);

        // gradient against differences of the value
        let mut g = vec![0.0; d];
        net.gradient(&x, &mut g);
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let num = (net.value(&xp) - net.value(&xm)) / (2.0 * h);
            ensure!((num - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0), "point {point}: gradient {j}");
        }
    }
    Ok(format!("worst relative error {worst:.2e}"))
}
