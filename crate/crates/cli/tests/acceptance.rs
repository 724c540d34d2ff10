//! End-to-end acceptance checks. Prints one PASS/FAIL line per check and
//! exits non-zero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use popmove::ctds::{
    self, ctds_loglik, ctds_loglik_grad, extract_pairs, simulate_ctds, CtdsDesign, CtdsModel,
    CtdsScenario, Direction, StayMovePairs,
};
use popmove::diagnostics::{compare_runs, effective_sample_size, quantile_sorted};
use popmove::fmm::{add_mixture_error, fit_fmm, FmmConfig};
use popmove::probdist::{
    MixtureErrorParams, MvnParams, SpdFactor, WishartParams, DEFAULT_ROTATION_ANGLE,
};
use popmove::raster::{Cell, RasterGrid};
use popmove::rng::master;
use popmove::rsf::{self, bin_counts, make_rsf_model, rsf_loglik, rsf_loglik_grad, RsfDesign, RsfScenario};
use popmove::stage1::{run_parallel, ChainConfig, DrawMatrix};
use popmove::stage2::{
    gibbs_update_mu, gibbs_update_sigma_inv, log_mh_ratio, mu_conditional, run_full_hierarchy,
    run_stage2, HierConfig, HyperPriors, Stage2Output,
};
use popmove::telemetry::{TelemetryRecord, Track};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, what: &str) {
        if !pass {
            self.failed += 1;
        }
        println!("{} [{id}] {what}", if pass { "PASS" } else { "FAIL" });
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn ess(v: &[f64]) -> f64 {
    effective_sample_size(v).expect("chain long enough")
}

struct RsfRuns {
    two_stage: Stage2Output,
    full: Stage2Output,
    stage1_secs: f64,
    stage2_secs: f64,
    full_secs: f64,
}

/// The simulated RSF study, fitted both ways with 20,000 retained draws.
fn rsf_runs() -> RsfRuns {
    let data = rsf::simulate_rsf_scenario(&RsfScenario::default(), &mut master(2024)).unwrap();
    let design = Arc::new(RsfDesign::from_rasters(std::slice::from_ref(&data.covariate), false).unwrap());
    let prior = MvnParams::isotropic(vec![0.0; 2], 100.0).unwrap();
    let models: Vec<_> = data
        .fixes
        .iter()
        .map(|f| {
            let y = bin_counts(f, &data.covariate).unwrap();
            make_rsf_model(&f.individual_id, &y, design.clone(), prior.clone()).unwrap()
        })
        .collect();
    let hyper = HyperPriors::standard(2).unwrap();
    let hier = HierConfig { iterations: 25_000, burnin: 5_000, ..Default::default() };

    let t = Instant::now();
    let pools = run_parallel(&models, &ChainConfig::new(25_000, 5_000, 1, 11).unwrap(), 4).unwrap();
    let stage1_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let two_stage = run_stage2(&pools, &hyper, &hier, &mut master(12)).unwrap();
    let stage2_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let full = run_full_hierarchy(&models, &hyper, &hier, &mut master(13)).unwrap();
    let full_secs = t.elapsed().as_secs_f64();
    RsfRuns { two_stage, full, stage1_secs, stage2_secs, full_secs }
}

fn criterion_1(r: &mut Report, runs: &RsfRuns) {
    let cmp = compare_runs(&runs.two_stage, &runs.full).unwrap();
    let mu: Vec<_> = cmp.iter().filter(|c| c.name.starts_with("mu_beta[")).collect();
    let smd = mu.iter().map(|c| c.standardized_mean_difference).fold(0.0, f64::max);
    let ivl = mu.iter().map(|c| c.interval_difference).fold(0.0, f64::max);
    r.line("1", smd < 0.15, &format!("mu_beta standardized mean difference, two-stage vs single chain: max {smd:.4} (< 0.15)"));
    r.line("1", ivl < 0.2, &format!("mu_beta 50%/95% interval endpoints: max difference {ivl:.4} pooled sd (< 0.2)"));
    let total = runs.stage1_secs + runs.stage2_secs + runs.full_secs;
    r.line("1", total < 300.0, &format!("RSF runtime {total:.1} s (< 300 s)"));
    println!(
        "INFO [1] wall time: stage one {:.2} s + stage two {:.2} s = {:.2} s; single chain {:.2} s; {} cpu(s) available",
        runs.stage1_secs,
        runs.stage2_secs,
        runs.stage1_secs + runs.stage2_secs,
        runs.full_secs,
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    );
}

fn criterion_2(r: &mut Report, runs: &RsfRuns) {
    let (a, b) = (&runs.two_stage, &runs.full);
    let mu_ratio = ess(&a.mu_column(1)) / ess(&b.mu_column(1));
    r.line("2", mu_ratio >= 1.5, &format!(
        "ESS(mu_beta[1]) two-stage {:.0} vs single chain {:.0}: ratio {mu_ratio:.2} (>= 1.5)",
        ess(&a.mu_column(1)),
        ess(&b.mu_column(1))
    ));
    let j = a.num_individuals();
    let mean_ess = |o: &Stage2Output| (0..j).map(|i| ess(&o.beta_column(i, 1).unwrap())).sum::<f64>() / j as f64;
    let (ea, eb) = (mean_ess(a), mean_ess(b));
    r.line("2", ea / eb >= 3.0, &format!(
        "mean ESS(beta_j[1]) two-stage {ea:.0} vs single chain {eb:.0}: ratio {:.2} (>= 3)",
        ea / eb
    ));
    println!(
        "INFO [2] ESS(mu_beta[0]) two-stage {:.0} vs single chain {:.0} of {} draws",
        ess(&a.mu_column(0)),
        ess(&b.mu_column(0)),
        a.num_draws()
    );
}

fn criterion_3(r: &mut Report) {
    // μ | β, Σ in one dimension, by brute-force integration on a grid
    let betas: Vec<Vec<f64>> = [0.3, -1.2, 2.1, 0.8, 1.4].iter().map(|&b| vec![b]).collect();
    let tau = 0.7;
    let (m0, v0) = (0.5, 4.0);
    let hyper = HyperPriors::with_s_nu(MvnParams::isotropic(vec![m0], v0).unwrap(), &SpdFactor::identity(1), 3.0).unwrap();
    let (mean_a, prec) = mu_conditional(&betas, &SpdFactor::diagonal(&[tau]).unwrap(), &hyper).unwrap();
    let var_a = 1.0 / prec.to_matrix()[(0, 0)];
    let log_post = |mu: f64| {
        betas.iter().map(|b| -0.5 * tau * (b[0] - mu).powi(2)).sum::<f64>() - 0.5 * (mu - m0).powi(2) / v0
    };
    let (lo, hi, n) = (-10.0, 10.0, 200_001);
    let h = (hi - lo) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
    let peak = grid.iter().map(|&m| log_post(m)).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = grid.iter().map(|&m| (log_post(m) - peak).exp()).collect();
    let z: f64 = w.iter().sum();
    let mean_g = grid.iter().zip(&w).map(|(m, w)| m * w).sum::<f64>() / z;
    let var_g = grid.iter().zip(&w).map(|(m, w)| (m - mean_g).powi(2) * w).sum::<f64>() / z;
    let err = (mean_a[0] - mean_g).abs().max((var_a - var_g).abs());
    r.line("3", err < 1e-3, &format!(
        "mu conditional vs grid oracle: mean {:.6}/{mean_g:.6}, var {var_a:.6}/{var_g:.6} (within 1e-3)",
        mean_a[0]
    ));
    let mut rng = master(31);
    let draws: Vec<f64> = (0..100_000)
        .map(|_| gibbs_update_mu(&betas, &SpdFactor::diagonal(&[tau]).unwrap(), &hyper, &mut rng).unwrap()[0])
        .collect();
    let se = (var_g / 1e5).sqrt();
    r.line("3", (mean(&draws) - mean_g).abs() < 4.0 * se && (variance(&draws) / var_g - 1.0).abs() < 0.02, &format!(
        "gibbs_update_mu draws: mean {:.4} (oracle {mean_g:.4}), var ratio {:.4}",
        mean(&draws),
        variance(&draws) / var_g
    ));

    // Σ⁻¹ | β, μ: E[W] = n V and Var(W_aa) = 2 n V_aa² for W ~ Wish(V, n)
    let betas: Vec<Vec<f64>> = vec![vec![0.5, 1.0], vec![-0.4, 0.2], vec![1.3, 0.9], vec![0.1, -0.7], vec![0.9, 1.6]];
    let mu = vec![0.3, 0.5];
    let hyper = HyperPriors::with_s_nu(MvnParams::isotropic(vec![0.0; 2], 100.0).unwrap(), &SpdFactor::identity(2), 3.0).unwrap();
    let mut scatter = nalgebra_free_scatter(&betas, &mu);
    scatter[0][0] += 3.0;
    scatter[1][1] += 3.0;
    let det = scatter[0][0] * scatter[1][1] - scatter[0][1] * scatter[1][0];
    let v = [[scatter[1][1] / det, -scatter[0][1] / det], [-scatter[1][0] / det, scatter[0][0] / det]];
    let dof = 3.0 + betas.len() as f64;
    let k = 100_000;
    let mut sum = [[0.0; 2]; 2];
    let mut sq = [0.0; 2];
    let mut rng = master(32);
    for _ in 0..k {
        let w = gibbs_update_sigma_inv(&betas, &mu, &hyper, &mut rng).unwrap().to_matrix();
        for a in 0..2 {
            for b in 0..2 {
                sum[a][b] += w[(a, b)];
            }
            sq[a] += w[(a, a)] * w[(a, a)];
        }
    }
    let mut worst: f64 = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let expect = dof * v[a][b];
            let scale = dof * (v[a][a] * v[b][b]).sqrt();
            worst = worst.max((sum[a][b] / k as f64 - expect).abs() / scale);
        }
        let m = sum[a][a] / k as f64;
        let var = sq[a] / k as f64 - m * m;
        worst = worst.max((var / (2.0 * dof * v[a][a] * v[a][a]) - 1.0).abs());
    }
    r.line("3", worst < 0.02, &format!("Wishart conditional moments at 1e5 draws: worst relative error {worst:.4} (< 0.02)"));
    let _: WishartParams = popmove::stage2::sigma_inv_conditional(&betas, &mu, &hyper).unwrap();
}

fn nalgebra_free_scatter(betas: &[Vec<f64>], mu: &[f64]) -> [[f64; 2]; 2] {
    let mut s = [[0.0; 2]; 2];
    for b in betas {
        let r = [b[0] - mu[0], b[1] - mu[1]];
        for a in 0..2 {
            for c in 0..2 {
                s[a][c] += r[a] * r[c];
            }
        }
    }
    s
}

fn criterion_4(r: &mut Report) {
    let mut rng = master(41);
    let mut exact = true;
    let mut unity = true;
    for _ in 0..2_000 {
        let v: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let process = MvnParams::new(vec![v[0], v[1]], SpdFactor::diagonal(&[0.5 + v[2].abs(), 0.2 + v[3].abs()]).unwrap()).unwrap();
        let prior = MvnParams::isotropic(vec![0.0; 2], 100.0).unwrap();
        let (a, b) = ([v[4], v[5]], [v[6], v[7]]);
        exact &= log_mh_ratio(&a, &b, &process, &prior) == -log_mh_ratio(&b, &a, &process, &prior);
        unity &= log_mh_ratio(&a, &b, &prior, &prior) == 0.0 && log_mh_ratio(&a, &a, &process, &prior) == 0.0;
    }
    r.line("4", exact, "log r(a, b) == -log r(b, a) bit-for-bit on 2,000 random cases");
    r.line("4", unity, "r == 1 exactly when the process equals the stage-one prior or the candidate is the current value");

    // y_j ~ N(β_j, 1), β_j ~ N(μ, 1) (Σ pinned by a huge ν), μ ~ N(0, 100):
    // μ | y ~ N((Σy / 2) / (J/2 + 1/100), 1 / (J/2 + 1/100))
    let ys = [0.4, -1.1, 2.3, 0.9, 1.7, -0.2, 0.6, 1.2];
    let prior = MvnParams::isotropic(vec![0.0], 100.0).unwrap();
    let post_var: f64 = 100.0 / 101.0;
    let mut rng = master(42);
    let pools: Vec<DrawMatrix> = ys
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            let m = y * post_var;
            let draws: Vec<f64> = (0..200_000)
                .map(|_| m + post_var.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            DrawMatrix::new(format!("t{j}"), 1, 0, draws, 1.0, prior.clone(), 0, 0, 1).unwrap()
        })
        .collect();
    let hyper = HyperPriors::with_s_nu(prior.clone(), &SpdFactor::identity(1), 1e8).unwrap();
    let cfg = HierConfig { iterations: 205_000, burnin: 5_000, thin: 10, store_betas: false, workers: 1 };
    let out = run_stage2(&pools, &hyper, &cfg, &mut master(43)).unwrap();
    let prec = ys.len() as f64 / 2.0 + 0.01;
    let exact_post = Normal::new(ys.iter().sum::<f64>() / 2.0 / prec, (1.0 / prec).sqrt()).unwrap();
    let mut mu = out.mu_column(0);
    mu.sort_by(f64::total_cmp);
    let n = mu.len() as f64;
    let ks = mu
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = exact_post.cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    r.line("4", ks < 0.02 && mu.len() == 20_000, &format!(
        "stage-two mu_beta vs closed-form posterior: KS {ks:.4} at {} retained draws (< 0.02)",
        mu.len()
    ));
}

/// Allowed rook directions and rates, computed without the library.
fn oracle_rates(covs: &[RasterGrid], beta: &[f64], cell: Cell) -> Vec<(Direction, f64)> {
    let g = &covs[0];
    let eta = beta[0] + covs.iter().zip(&beta[1..]).map(|(c, b)| c.value(cell) * b).sum::<f64>();
    let mut out = Vec::new();
    if cell.row > 0 {
        out.push((Direction::N, eta.exp()));
    }
    if cell.col + 1 < g.ncols() {
        out.push((Direction::E, eta.exp()));
    }
    if cell.row + 1 < g.nrows() {
        out.push((Direction::S, eta.exp()));
    }
    if cell.col > 0 {
        out.push((Direction::W, eta.exp()));
    }
    out
}

/// Discrete-time multinomial log-likelihood with steps `dt`: a residence of
/// `τ` is `round(τ / dt)` stay steps, then one move with probability `λ_d dt`.
fn multinomial_loglik(pairs: &StayMovePairs, covs: &[RasterGrid], beta: &[f64], dt: f64) -> f64 {
    let stay = |cell: Cell, tau: f64| {
        let total: f64 = oracle_rates(covs, beta, cell).iter().map(|r| r.1).sum();
        (tau / dt).round() * (1.0 - total * dt).ln()
    };
    let mut ll = 0.0;
    for p in &pairs.pairs {
        let rates = oracle_rates(covs, beta, p.cell);
        let lam = rates.iter().find(|r| r.0 == p.direction).expect("allowed move").1;
        ll += stay(p.cell, p.tau) + (lam * dt).ln();
    }
    ll + stay(pairs.final_cell, pairs.censored)
}

fn random_ctds_instance(seed: u64) -> (Vec<RasterGrid>, StayMovePairs, CtdsDesign, Vec<f64>) {
    let mut rng = master(seed);
    let covs: Vec<RasterGrid> = (0..2)
        .map(|_| {
            let v = (0..64).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            RasterGrid::new(8, 8, 0.0, 0.0, 1.0, v).unwrap()
        })
        .collect();
    let beta: Vec<f64> = (0..3).map(|_| rng.random::<f64>() - 0.5).collect();
    let path = simulate_ctds(&covs, &beta, Cell::new(4, 4), 0.0, 10.0, &mut rng).unwrap();
    let pairs = extract_pairs(&path, 10.0).unwrap();
    let design = CtdsDesign::build(&pairs, &covs).unwrap();
    let probe: Vec<f64> = (0..3).map(|_| rng.random::<f64>() - 0.5).collect();
    (covs, pairs, design, probe)
}

fn criterion_5(r: &mut Report) {
    let dt: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let (covs, pairs, design, beta) = random_ctds_instance(500 + seed);
        let poisson = ctds_loglik(&pairs, &design, &beta).unwrap() + pairs.pairs.len() as f64 * dt.ln();
        let multi = multinomial_loglik(&pairs, &covs, &beta, dt);
        worst = worst.max(((poisson - multi) / multi).abs());
    }
    r.line("5", worst < 1e-3, &format!(
        "Poisson vs dt = 1e-4 multinomial log-likelihood on 10 instances: worst relative error {worst:.2e} (< 1e-3)"
    ));
    let mut worst: f64 = 0.0;
    for &(lam, tau) in &[(0.5, 1.0), (1.0, 1.0), (2.0, 1.0), (4.0, 0.5), (1.0, 3.0), (0.1, 10.0)] {
        let steps = (tau / dt).round();
        let discrete = (1.0f64 - lam * dt).powf(steps);
        worst = worst.max((discrete - (-lam * tau as f64).exp()).abs());
    }
    r.line("5", worst < 1e-4, &format!("(1 - lambda dt)^(tau/dt) vs exp(-lambda tau): worst absolute difference {worst:.2e} (< 1e-4)"));
}

fn criterion_6(r: &mut Report) {
    let t = Instant::now();
    let scenario = CtdsScenario::default();
    let truth = scenario.mu_beta.clone();
    let p = truth.len();
    let mut covered = vec![0usize; p];
    let replicates = 20;
    for rep in 0..replicates {
        let data = ctds::simulate_ctds_scenario(&scenario, &mut master(600 + rep)).unwrap();
        let prior = MvnParams::isotropic(vec![0.0; p], 100.0).unwrap();
        let models: Vec<CtdsModel> = data
            .paths
            .iter()
            .zip(&data.truth.individuals)
            .map(|(path, ind)| {
                CtdsModel::from_cell_paths(&ind.id, std::slice::from_ref(path), ind.end_time, &data.covariates, prior.clone())
                    .unwrap()
            })
            .collect();
        let pools = run_parallel(&models, &ChainConfig::new(6_000, 1_000, 1, 700 + rep).unwrap(), 4).unwrap();
        let hier = HierConfig { iterations: 11_000, burnin: 1_000, store_betas: false, ..Default::default() };
        let out = run_stage2(&pools, &HyperPriors::standard(p).unwrap(), &hier, &mut master(800 + rep)).unwrap();
        for (i, c) in covered.iter_mut().enumerate() {
            let mut col = out.mu_column(i);
            col.sort_by(f64::total_cmp);
            let (lo, hi) = (quantile_sorted(&col, 0.025), quantile_sorted(&col, 0.975));
            if lo <= truth[i] && truth[i] <= hi {
                *c += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    for (i, c) in covered.iter().enumerate() {
        r.line("6", *c >= 18, &format!(
            "CTDS mu_beta[{i}] 95% interval covers the truth in {c} of {replicates} replicates (>= 18)"
        ));
    }
    r.line("6", secs < 600.0, &format!("CTDS recovery runtime {secs:.1} s (< 600 s)"));
}

fn smooth_path(t: f64) -> (f64, f64) {
    (20.0 + 8.0 * (t / 15.0).sin() + 0.1 * t, 30.0 + 6.0 * (t / 9.0).cos())
}

fn criterion_7(r: &mut Report) {
    let times: Vec<f64> = (0..5000).map(|i| i as f64 * 0.02).collect();
    let truth: Vec<(f64, f64)> = times.iter().map(|&t| smooth_path(t)).collect();
    let error = MixtureErrorParams::new(0.5, SpdFactor::diagonal(&[9.0, 1.0]).unwrap(), DEFAULT_ROTATION_ANGLE).unwrap();
    let (noisy, _) = add_mixture_error(&truth, &error, &mut master(71));
    let track = Track {
        id: "x".into(),
        records: times
            .iter()
            .zip(&noisy)
            .map(|(&t, &(x, y))| TelemetryRecord { id: "x".into(), t, x, y, error_class: None })
            .collect(),
    };
    let cfg = FmmConfig { iterations: 2_000, burnin: 500, num_knots: Some(12), ..FmmConfig::new(error) };
    let fit = fit_fmm(&track, &cfg, &mut master(72)).unwrap();
    let fitted = fit.mean_path(&times).unwrap();
    let n = times.len() as f64;
    let res: Vec<(f64, f64)> = noisy.iter().zip(&fitted).map(|(o, m)| (o.0 - m.0, o.1 - m.1)).collect();
    let sxx = res.iter().map(|e| e.0 * e.0).sum::<f64>() / n;
    let syy = res.iter().map(|e| e.1 * e.1).sum::<f64>() / n;
    let sxy = res.iter().map(|e| e.0 * e.1).sum::<f64>() / n;
    // mixture of diag(9, 1) and its quarter-turn rotation diag(1, 9)
    let rel = ((sxx - 5.0).powi(2) + (syy - 5.0).powi(2) + 2.0 * sxy * sxy).sqrt() / 50f64.sqrt();
    r.line("7", rel < 0.1, &format!(
        "residual covariance [[{sxx:.3}, {sxy:.3}], [{sxy:.3}, {syy:.3}]] vs diag(5, 5): relative error {rel:.4} (< 0.1)"
    ));
    let rmse = (fitted.iter().zip(&truth).map(|(a, b)| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sum::<f64>() / (2.0 * n)).sqrt();
    r.line("7", rmse < 5f64.sqrt(), &format!("posterior mean path RMSE {rmse:.4} (< noise sd {:.4})", 5f64.sqrt()));
}

fn popmove(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_popmove"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn data_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "config.txt")
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn criterion_8(r: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let covs = "covariates=c/elevation.asc,c/forest.asc";
    let steps: Vec<(&str, Vec<&str>)> = vec![
        ("r", vec!["simulate-rsf", "--set", "grid_size=15", "--set", "individuals=6"]),
        ("c", vec!["simulate-ctds", "--set", "individuals=3", "--set", "grid_size=30", "--set", "target_transitions=80"]),
        ("r1", vec!["fit-stage1", "--set", "model=rsf", "--set", "telemetry=r/telemetry.csv", "--set", "covariates=r/covariate.asc", "--iterations", "1500", "--burnin", "500"]),
        ("r2", vec!["fit-stage2", "--set", "pool=r1", "--iterations", "1500", "--burnin", "500"]),
        ("rf", vec!["fit-full", "--set", "model=rsf", "--set", "telemetry=r/telemetry.csv", "--set", "covariates=r/covariate.asc", "--iterations", "1000", "--burnin", "300"]),
        ("rd", vec!["diagnose", "--set", "input=r2", "--set", "compare=rf"]),
        ("ci", vec!["impute-paths", "--set", "telemetry=c/telemetry.csv", "--iterations", "400", "--burnin", "100", "--set", "paths_per_individual=4"]),
        ("cd", vec!["discretize", "--set", "paths=ci", "--set", covs, "--set", "outside=nearest"]),
        ("c1", vec!["fit-stage1", "--set", "model=ctds", "--set", "paths=ci", "--set", covs, "--set", "outside=nearest", "--iterations", "1500", "--burnin", "500"]),
        ("c2", vec!["fit-stage2", "--set", "pool=c1", "--iterations", "1500", "--burnin", "500"]),
        ("cf", vec!["fit-full", "--set", "model=ctds", "--set", "cell_paths=c/cell_paths.csv", "--set", covs, "--iterations", "1000", "--burnin", "300"]),
    ];
    let mut all = true;
    let mut names = Vec::new();
    for (out, args) in &steps {
        let mut first = args.clone();
        first.extend(["--seed", "17", "--workers", "1", "--out", out]);
        popmove(d, &first);
        let again = format!("{out}_again");
        let config = format!("{out}/config.txt");
        popmove(d, &[args[0], "--config", &config, "--workers", "4", "--out", &again]);
        let same = data_files(&d.join(out)) == data_files(&d.join(&again));
        if !same {
            names.push(args[0]);
        }
        all &= same;
    }
    r.line("8", all, &format!(
        "{} pipeline steps rerun from their dumped config with 4 workers reproduce every output byte{}",
        steps.len(),
        if all { String::new() } else { format!(" (differs: {names:?})") }
    ));
}

fn criterion_9(r: &mut Report) {
    let rel = |fd: &[f64], g: &[f64]| {
        let num: f64 = fd.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        num / g.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let fd = |f: &dyn Fn(&[f64]) -> f64, beta: &[f64]| -> Vec<f64> {
        let h = 1e-5;
        (0..beta.len())
            .map(|k| {
                let mut up = beta.to_vec();
                let mut dn = beta.to_vec();
                up[k] += h;
                dn[k] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    };
    let mut worst_rsf: f64 = 0.0;
    let mut rng = master(91);
    for _ in 0..10 {
        let cells = 50;
        let p = 3;
        let x: Vec<f64> = (0..cells * p)
            .map(|i| if i % p == 0 { 1.0 } else { rng.random::<f64>() * 2.0 - 1.0 })
            .collect();
        let design = RsfDesign::new(x, p, 1.0).unwrap();
        let y: Vec<u64> = (0..cells).map(|_| rng.random_range(0..4)).collect();
        let beta: Vec<f64> = (0..p).map(|_| rng.random::<f64>() - 0.5).collect();
        let g = rsf_loglik_grad(&y, &design, &beta).unwrap();
        let f = |b: &[f64]| rsf_loglik(&y, &design, b).unwrap();
        worst_rsf = worst_rsf.max(rel(&fd(&f, &beta), &g));
    }
    r.line("9", worst_rsf < 1e-6, &format!("rsf_loglik gradient vs central differences: worst relative error {worst_rsf:.2e} (< 1e-6)"));
    let mut worst_ctds: f64 = 0.0;
    for seed in 0..10 {
        let (_, pairs, design, beta) = random_ctds_instance(900 + seed);
        let g = ctds_loglik_grad(&pairs, &design, &beta).unwrap();
        let f = |b: &[f64]| ctds_loglik(&pairs, &design, b).unwrap();
        worst_ctds = worst_ctds.max(rel(&fd(&f, &beta), &g));
    }
    r.line("9", worst_ctds < 1e-6, &format!("ctds_loglik gradient vs central differences: worst relative error {worst_ctds:.2e} (< 1e-6)"));
}

fn main() {
    // `cargo test -- --list` and filters expect a harness; skip quietly
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut report = Report { failed: 0 };
    let start = Instant::now();
    let runs = rsf_runs();
    criterion_1(&mut report, &runs);
    criterion_2(&mut report, &runs);
    criterion_3(&mut report);
    criterion_4(&mut report);
    criterion_5(&mut report);
    criterion_6(&mut report);
    criterion_7(&mut report);
    criterion_8(&mut report);
    criterion_9(&mut report);
    println!("acceptance: {} failed, {:.1} s", report.failed, start.elapsed().as_secs_f64());
    if report.failed > 0 {
        std::process::exit(1);
    }
}
