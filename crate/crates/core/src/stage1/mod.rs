//! Stage one: independent individual-level posterior sampling.
//!
//! Each individual is fit by a random-walk Metropolis sampler with an
//! isotropic Gaussian proposal `N(current, exp(s) I)`. The single log-scale
//! `s` is adapted by Robbins–Monro steps `s += k^-0.6 (α_k − target)` during
//! burn-in and frozen afterwards, so the retained draws come from a
//! time-homogeneous Markov chain.

pub(crate) mod store;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::probdist::{mvn_sample, MvnParams};
use crate::rng::{substream, STAGE1_BASE};
use crate::{Error, Result};

pub use store::{load_draws, save_draws};

/// An individual-level model `[y_j | β_j, θ_j][β_j][θ_j]`.
///
/// Models whose data are a pool of interchangeable imputed realizations
/// report `num_datasets() > 1`; samplers then draw one realization per
/// iteration and evaluate both the current and proposed states against it.
pub trait IndividualModel: Send + Sync {
    fn id(&self) -> &str;

    /// Dimension `p` of the coefficient vector β.
    fn dim_beta(&self) -> usize;

    /// Dimension `q` of the auxiliary parameters θ.
    fn dim_theta(&self) -> usize {
        0
    }

    fn num_datasets(&self) -> usize {
        1
    }

    /// Log-likelihood of data realization `dataset`. May return `-inf`.
    fn log_likelihood(&self, beta: &[f64], theta: &[f64], dataset: usize) -> f64;

    /// The stage-one prior `[β_j] = N(μ0, Σ0)`.
    fn prior(&self) -> &MvnParams;

    fn log_prior_theta(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn initial_theta(&self) -> Vec<f64> {
        vec![0.0; self.dim_theta()]
    }
}

impl<T: IndividualModel + ?Sized> IndividualModel for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn dim_beta(&self) -> usize {
        (**self).dim_beta()
    }
    fn dim_theta(&self) -> usize {
        (**self).dim_theta()
    }
    fn num_datasets(&self) -> usize {
        (**self).num_datasets()
    }
    fn log_likelihood(&self, beta: &[f64], theta: &[f64], dataset: usize) -> f64 {
        (**self).log_likelihood(beta, theta, dataset)
    }
    fn prior(&self) -> &MvnParams {
        (**self).prior()
    }
    fn log_prior_theta(&self, theta: &[f64]) -> f64 {
        (**self).log_prior_theta(theta)
    }
    fn initial_theta(&self) -> Vec<f64> {
        (**self).initial_theta()
    }
}

/// Robbins–Monro step-size exponent.
pub const ADAPTATION_EXPONENT: f64 = 0.6;

/// Optimal-scaling acceptance targets: 0.44 in one dimension, 0.234 from
/// five dimensions on, linear in between.
pub fn default_target_acceptance(dim: usize) -> f64 {
    match dim {
        0 | 1 => 0.44,
        d if d >= 5 => 0.234,
        d => 0.44 + (0.234 - 0.44) * (d as f64 - 1.0) / 4.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// `None` selects [`default_target_acceptance`] for the chain dimension.
    pub target_acceptance: Option<f64>,
    pub initial_log_scale: f64,
    /// Store θ columns next to β (only meaningful when `q > 0`).
    pub keep_theta: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            iterations: 20_000,
            burnin: 5_000,
            thin: 1,
            seed: 0,
            target_acceptance: None,
            initial_log_scale: (0.1f64).ln(),
            keep_theta: false,
        }
    }
}

impl ChainConfig {
    pub fn new(iterations: usize, burnin: usize, thin: usize, seed: u64) -> Result<Self> {
        let cfg = ChainConfig {
            iterations,
            burnin,
            thin,
            seed,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.burnin >= self.iterations {
            return Err(Error::InvalidParameter(format!(
                "need iterations > burnin, got {} and {}",
                self.iterations, self.burnin
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("thin must be positive".into()));
        }
        if self.retained() == 0 {
            return Err(Error::InvalidParameter(
                "thinning leaves no retained draws".into(),
            ));
        }
        if let Some(t) = self.target_acceptance {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "target acceptance {t} outside (0, 1)"
                )));
            }
        }
        if !self.initial_log_scale.is_finite() {
            return Err(Error::NonFinite("initial log scale".into()));
        }
        Ok(())
    }

    /// Number of draws kept after burn-in and thinning.
    pub fn retained(&self) -> usize {
        (self.iterations - self.burnin.min(self.iterations)) / self.thin
    }

    pub(crate) fn keeps(&self, iteration: usize) -> bool {
        iteration > self.burnin && (iteration - self.burnin) % self.thin == 0
    }
}

/// Retained stage-one draws for one individual; the stage-two proposal pool.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawMatrix {
    individual_id: String,
    p: usize,
    q: usize,
    draws: Vec<f64>,
    acceptance_rate: f64,
    stage1_prior: MvnParams,
    seed: u64,
    burnin: usize,
    thin: usize,
}

impl DrawMatrix {
    /// `draws` is row-major `K × (p + q)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        individual_id: impl Into<String>,
        p: usize,
        q: usize,
        draws: Vec<f64>,
        acceptance_rate: f64,
        stage1_prior: MvnParams,
        seed: u64,
        burnin: usize,
        thin: usize,
    ) -> Result<Self> {
        let individual_id = individual_id.into();
        let width = p + q;
        if p == 0 {
            return Err(Error::Dimension(format!("{individual_id}: p must be positive")));
        }
        if draws.is_empty() || draws.len() % width != 0 {
            return Err(Error::Dimension(format!(
                "{individual_id}: {} values do not form a non-empty K x {width} matrix",
                draws.len()
            )));
        }
        if stage1_prior.dim() != p {
            return Err(Error::Dimension(format!(
                "{individual_id}: prior dimension {} differs from p = {p}",
                stage1_prior.dim()
            )));
        }
        if let Some(i) = draws.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{individual_id}: draw row {} is not finite",
                i / width
            )));
        }
        if !(0.0..=1.0).contains(&acceptance_rate) {
            return Err(Error::InvalidParameter(format!(
                "{individual_id}: acceptance rate {acceptance_rate}"
            )));
        }
        Ok(DrawMatrix {
            individual_id,
            p,
            q,
            draws,
            acceptance_rate,
            stage1_prior,
            seed,
            burnin,
            thin,
        })
    }

    pub fn individual_id(&self) -> &str {
        &self.individual_id
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Stored θ columns.
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn width(&self) -> usize {
        self.p + self.q
    }

    pub fn num_draws(&self) -> usize {
        self.draws.len() / self.width()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.width();
        &self.draws[k * w..(k + 1) * w]
    }

    /// The β part of row `k`.
    pub fn beta(&self, k: usize) -> &[f64] {
        &self.row(k)[..self.p]
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.num_draws()).map(|k| self.row(k)[i]).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.draws
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.acceptance_rate
    }

    pub fn stage1_prior(&self) -> &MvnParams {
        &self.stage1_prior
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn burnin(&self) -> usize {
        self.burnin
    }

    pub fn thin(&self) -> usize {
        self.thin
    }
}

pub(crate) fn sanitize_log_density(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// State of one adaptive random-walk Metropolis chain over `(β, θ)`.
pub(crate) struct RandomWalk {
    pub position: Vec<f64>,
    pub log_scale: f64,
    pub target: f64,
    proposal: Vec<f64>,
}

impl RandomWalk {
    pub fn new(position: Vec<f64>, log_scale: f64, target: f64) -> Self {
        let proposal = position.clone();
        RandomWalk {
            position,
            log_scale,
            target,
            proposal,
        }
    }

    /// One Metropolis step against `log_target`, whose value at the current
    /// position is `current`. Returns (accepted, acceptance probability, new
    /// current value).
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        current: f64,
        mut log_target: impl FnMut(&[f64]) -> f64,
    ) -> (bool, f64, f64) {
        let sd = (0.5 * self.log_scale).exp();
        for (p, c) in self.proposal.iter_mut().zip(&self.position) {
            let z: f64 = rng.sample(StandardNormal);
            *p = c + sd * z;
        }
        let proposed = sanitize_log_density(log_target(&self.proposal));
        let log_ratio = proposed - current;
        let alpha = if log_ratio >= 0.0 {
            1.0
        } else if log_ratio.is_nan() {
            0.0
        } else {
            log_ratio.exp()
        };
        let u: f64 = rng.random();
        if u < alpha {
            std::mem::swap(&mut self.position, &mut self.proposal);
            (true, alpha, proposed)
        } else {
            (false, alpha, current)
        }
    }

    /// Robbins–Monro update for burn-in iteration `k` (1-based).
    pub fn adapt(&mut self, k: usize, alpha: f64) {
        let gamma = (k as f64).powf(-ADAPTATION_EXPONENT);
        self.log_scale += gamma * (alpha - self.target);
    }
}

/// Fits one individual with the adaptive random-walk Metropolis sampler.
///
/// The chain starts from a draw of the stage-one prior (θ from
/// [`IndividualModel::initial_theta`]).
pub fn adaptive_rwmh_fit<M, R>(model: &M, config: &ChainConfig, rng: &mut R) -> Result<DrawMatrix>
where
    M: IndividualModel + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    let p = model.dim_beta();
    let q = model.dim_theta();
    let prior = model.prior();
    if prior.dim() != p {
        return Err(Error::Dimension(format!(
            "{}: prior dimension {} but model has p = {p}",
            model.id(),
            prior.dim()
        )));
    }
    let theta0 = model.initial_theta();
    if theta0.len() != q {
        return Err(Error::Dimension(format!(
            "{}: initial θ has length {} but q = {q}",
            model.id(),
            theta0.len()
        )));
    }
    let datasets = model.num_datasets();
    if datasets == 0 {
        return Err(Error::Data(format!("{}: model has no data realizations", model.id())));
    }

    let mut start = mvn_sample(rng, prior);
    start.extend(theta0);
    let log_post = |x: &[f64], dataset: usize| -> f64 {
        let (beta, theta) = x.split_at(p);
        model.log_likelihood(beta, theta, dataset)
            + prior.log_density(beta)
            + model.log_prior_theta(theta)
    };

    let mut dataset = if datasets > 1 { rng.random_range(0..datasets) } else { 0 };
    let mut current = log_post(&start, dataset);
    if !current.is_finite() {
        return Err(Error::NonFinite(format!(
            "{}: initial log-posterior is {current}",
            model.id()
        )));
    }

    let target = config
        .target_acceptance
        .unwrap_or_else(|| default_target_acceptance(p + q));
    let mut walk = RandomWalk::new(start, config.initial_log_scale, target);
    let keep_width = if config.keep_theta { p + q } else { p };
    let mut draws = Vec::with_capacity(config.retained() * keep_width);
    let mut accepted = 0usize;

    for it in 1..=config.iterations {
        if datasets > 1 {
            dataset = rng.random_range(0..datasets);
            current = sanitize_log_density(log_post(&walk.position, dataset));
        }
        let (acc, alpha, value) = walk.step(rng, current, |x| log_post(x, dataset));
        current = value;
        if it <= config.burnin {
            walk.adapt(it, alpha);
        } else if acc {
            accepted += 1;
        }
        if config.keeps(it) {
            draws.extend_from_slice(&walk.position[..keep_width]);
        }
    }

    let post = config.iterations - config.burnin;
    DrawMatrix::new(
        model.id(),
        p,
        keep_width - p,
        draws,
        accepted as f64 / post as f64,
        prior.clone(),
        config.seed,
        config.burnin,
        config.thin,
    )
}

/// Fits every model on a pool of `workers` threads. Individual `j` uses
/// stream `STAGE1_BASE + j` of `config.seed`, so the output does not depend
/// on the worker count.
pub fn run_parallel<M: IndividualModel>(
    models: &[M],
    config: &ChainConfig,
    workers: usize,
) -> Result<Vec<DrawMatrix>> {
    if models.is_empty() {
        return Err(Error::Data("no individual models to fit".into()));
    }
    if workers == 0 {
        return Err(Error::InvalidParameter("workers must be positive".into()));
    }
    config.validate()?;
    let fit = |(j, model): (usize, &M)| {
        let mut rng = substream(config.seed, STAGE1_BASE + j as u64);
        adaptive_rwmh_fit(model, config, &mut rng)
    };
    if workers == 1 {
        return models.iter().enumerate().map(fit).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(|| models.par_iter().enumerate().map(fit).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probdist::poisson_logpmf;
    use crate::rng::master;

    /// Standard normal target with a flat-ish prior that is irrelevant to the
    /// test because the likelihood carries the whole density.
    struct Gaussian1d {
        prior: MvnParams,
    }

    impl IndividualModel for Gaussian1d {
        fn id(&self) -> &str {
            "normal"
        }
        fn dim_beta(&self) -> usize {
            1
        }
        fn log_likelihood(&self, beta: &[f64], _: &[f64], _: usize) -> f64 {
            -0.5 * beta[0] * beta[0] - self.prior.log_density(beta)
        }
        fn prior(&self) -> &MvnParams {
            &self.prior
        }
    }

    fn gaussian() -> Gaussian1d {
        Gaussian1d {
            prior: MvnParams::isotropic(vec![0.0], 1.0).unwrap(),
        }
    }

    #[test]
    fn standard_normal_target() {
        let cfg = ChainConfig::new(20_000, 5_000, 1, 1).unwrap();
        let out = adaptive_rwmh_fit(&gaussian(), &cfg, &mut master(1)).unwrap();
        let xs = out.column(0);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert_eq!(xs.len(), 15_000);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
        assert!(
            (out.acceptance_rate() - 0.44).abs() < 0.1,
            "acceptance {}",
            out.acceptance_rate()
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = ChainConfig::new(2_000, 500, 3, 9).unwrap();
        let a = adaptive_rwmh_fit(&gaussian(), &cfg, &mut master(9)).unwrap();
        let b = adaptive_rwmh_fit(&gaussian(), &cfg, &mut master(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_draws(), 500);
    }

    #[test]
    fn config_errors() {
        assert!(ChainConfig::new(100, 100, 1, 0).is_err());
        assert!(ChainConfig::new(100, 10, 0, 0).is_err());
        assert!(ChainConfig::new(100, 10, 200, 0).is_err());
        let mut cfg = ChainConfig::default();
        cfg.target_acceptance = Some(1.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn target_defaults() {
        assert_eq!(default_target_acceptance(1), 0.44);
        assert_eq!(default_target_acceptance(5), 0.234);
        assert_eq!(default_target_acceptance(9), 0.234);
        assert!((default_target_acceptance(3) - 0.337).abs() < 1e-12);
    }

    struct Broken(MvnParams);

    impl IndividualModel for Broken {
        fn id(&self) -> &str {
            "broken"
        }
        fn dim_beta(&self) -> usize {
            1
        }
        fn log_likelihood(&self, _: &[f64], _: &[f64], _: usize) -> f64 {
            f64::NEG_INFINITY
        }
        fn prior(&self) -> &MvnParams {
            &self.0
        }
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let m = Broken(MvnParams::isotropic(vec![0.0], 1.0).unwrap());
        let err = adaptive_rwmh_fit(&m, &ChainConfig::default(), &mut master(0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    /// y ~ Poisson(exp(β)), β ~ N(0, 1).
    pub(crate) struct PoissonLog {
        pub y: u64,
        pub prior: MvnParams,
        pub id: String,
    }

    impl IndividualModel for PoissonLog {
        fn id(&self) -> &str {
            &self.id
        }
        fn dim_beta(&self) -> usize {
            1
        }
        fn log_likelihood(&self, beta: &[f64], _: &[f64], _: usize) -> f64 {
            poisson_logpmf(self.y, beta[0].exp()).unwrap_or(f64::NEG_INFINITY)
        }
        fn prior(&self) -> &MvnParams {
            &self.prior
        }
    }

    fn poisson_models(n: usize) -> Vec<PoissonLog> {
        (0..n)
            .map(|j| PoissonLog {
                y: (j % 7) as u64,
                prior: MvnParams::isotropic(vec![0.0], 1.0).unwrap(),
                id: format!("ind{j}"),
            })
            .collect()
    }

    #[test]
    fn posterior_matches_grid_integration() {
        let model = PoissonLog {
            y: 4,
            prior: MvnParams::isotropic(vec![0.0], 1.0).unwrap(),
            id: "p".into(),
        };
        // 2,001-point grid over [-8, 8].
        let grid: Vec<f64> = (0..2001).map(|i| -8.0 + 16.0 * i as f64 / 2000.0).collect();
        let logs: Vec<f64> = grid
            .iter()
            .map(|b| model.log_likelihood(&[*b], &[], 0) + model.prior.log_density(&[*b]))
            .collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        let mean: f64 = grid.iter().zip(&w).map(|(b, w)| b * w).sum::<f64>() / z;
        let sd = (grid.iter().zip(&w).map(|(b, w)| (b - mean).powi(2) * w).sum::<f64>() / z).sqrt();

        let cfg = ChainConfig::new(60_000, 5_000, 1, 4).unwrap();
        let out = adaptive_rwmh_fit(&model, &cfg, &mut master(4)).unwrap();
        let xs = out.column(0);
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let s = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let ess = crate::diagnostics::effective_sample_size(&xs).unwrap();
        let se_mean = sd / ess.sqrt();
        // sd of the sample sd is roughly sd / sqrt(2 ess)
        let se_sd = sd / (2.0 * ess).sqrt();
        assert!((m - mean).abs() < 3.0 * se_mean, "{m} vs {mean} (se {se_mean})");
        assert!((s - sd).abs() < 3.0 * se_sd, "{s} vs {sd} (se {se_sd})");
        assert!((out.acceptance_rate() - 0.44).abs() < 0.15);
    }

    #[test]
    fn parallel_matches_sequential() {
        let models = poisson_models(20);
        let cfg = ChainConfig::new(3_000, 1_000, 2, 77).unwrap();
        let one = run_parallel(&models, &cfg, 1).unwrap();
        let four = run_parallel(&models, &cfg, 4).unwrap();
        assert_eq!(one, four);
        assert_eq!(one[3].individual_id(), "ind3");
    }

    #[test]
    fn parallel_rejects_empty() {
        let models: Vec<PoissonLog> = Vec::new();
        assert!(run_parallel(&models, &ChainConfig::default(), 2).is_err());
    }

    #[test]
    fn draw_matrix_validation() {
        let prior = MvnParams::isotropic(vec![0.0, 0.0], 1.0).unwrap();
        assert!(DrawMatrix::new("a", 2, 0, vec![], 0.5, prior.clone(), 0, 0, 1).is_err());
        assert!(DrawMatrix::new("a", 2, 0, vec![1.0; 3], 0.5, prior.clone(), 0, 0, 1).is_err());
        assert!(DrawMatrix::new("a", 2, 0, vec![f64::NAN, 0.0], 0.5, prior.clone(), 0, 0, 1)
            .is_err());
        assert!(DrawMatrix::new("a", 1, 0, vec![1.0], 0.5, prior.clone(), 0, 0, 1).is_err());
        let d = DrawMatrix::new("a", 2, 0, vec![1.0, 2.0, 3.0, 4.0], 0.5, prior, 0, 0, 1).unwrap();
        assert_eq!(d.num_draws(), 2);
        assert_eq!(d.beta(1), &[3.0, 4.0]);
    }
}
