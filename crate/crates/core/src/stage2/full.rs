//! Full-hierarchy baseline: Metropolis-within-Gibbs on the joint model,
//! with an adaptive random walk for each individual's `(β_j, θ_j)`.

use rand::Rng;

use super::{
    for_each_individual, gibbs_update_mu, gibbs_update_sigma_inv, individual_rngs,
    initial_sigma_inv, HierConfig, HyperPriors, PopulationState, Recorder,
};
use crate::probdist::{mvn_sample, MvnParams};
use crate::rng::ChainRng;
use crate::stage1::{
    default_target_acceptance, sanitize_log_density, ChainConfig, IndividualModel, RandomWalk,
};
use crate::{Error, Result};

struct Walker {
    walk: RandomWalk,
    accepted: usize,
}

fn log_target<M: IndividualModel + ?Sized>(
    model: &M,
    process: &MvnParams,
    x: &[f64],
    dataset: usize,
) -> f64 {
    let (beta, theta) = x.split_at(model.dim_beta());
    sanitize_log_density(
        model.log_likelihood(beta, theta, dataset)
            + process.log_density(beta)
            + model.log_prior_theta(theta),
    )
}

fn update<M: IndividualModel + ?Sized>(
    model: &M,
    walker: &mut Walker,
    process: &MvnParams,
    iteration: usize,
    burnin: usize,
    rng: &mut ChainRng,
) {
    let datasets = model.num_datasets();
    let dataset = if datasets > 1 { rng.random_range(0..datasets) } else { 0 };
    let current = log_target(model, process, &walker.walk.position, dataset);
    let (acc, alpha, _) = walker
        .walk
        .step(rng, current, |x| log_target(model, process, x, dataset));
    if iteration <= burnin {
        walker.walk.adapt(iteration, alpha);
    } else if acc {
        walker.accepted += 1;
    }
}

/// Fits the joint hierarchical model directly. Individual `j` starts from a
/// draw of its own stage-one prior, as in stage one.
pub fn run_full_hierarchy<M, R>(
    models: &[M],
    hyper: &HyperPriors,
    config: &HierConfig,
    rng: &mut R,
) -> Result<super::Stage2Output>
where
    M: IndividualModel,
    R: Rng + ?Sized,
{
    config.validate()?;
    if models.is_empty() {
        return Err(Error::Data("no individual models to fit".into()));
    }
    let p = hyper.dim();
    for m in models {
        if m.dim_beta() != p || m.prior().dim() != p {
            return Err(Error::Dimension(format!(
                "{}: p = {} but the hyperpriors have p = {p}",
                m.id(),
                m.dim_beta()
            )));
        }
        if m.num_datasets() == 0 {
            return Err(Error::Data(format!("{}: model has no data realizations", m.id())));
        }
        if m.initial_theta().len() != m.dim_theta() {
            return Err(Error::Dimension(format!("{}: initial θ has the wrong length", m.id())));
        }
    }
    let j_count = models.len();
    let mut rngs = individual_rngs(rng, j_count);
    let thread_pool = config.thread_pool()?;
    let log_scale0 = ChainConfig::default().initial_log_scale;

    let mut walkers: Vec<Walker> = models
        .iter()
        .zip(rngs.iter_mut())
        .map(|(m, r)| {
            let mut start = mvn_sample(r, m.prior());
            start.extend(m.initial_theta());
            let target = default_target_acceptance(m.dim_beta() + m.dim_theta());
            Walker {
                walk: RandomWalk::new(start, log_scale0, target),
                accepted: 0,
            }
        })
        .collect();
    for (m, w) in models.iter().zip(&walkers) {
        let (beta, theta) = w.walk.position.split_at(p);
        let v = m.log_likelihood(beta, theta, 0);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "{}: initial log-likelihood is {v}",
                m.id()
            )));
        }
    }

    let betas: Vec<Vec<f64>> = walkers.iter().map(|w| w.walk.position[..p].to_vec()).collect();
    let sigma_inv = initial_sigma_inv(hyper)?;
    let mu = gibbs_update_mu(&betas, &sigma_inv, hyper, rng)?;
    let mut state = PopulationState::new(mu, sigma_inv, betas)?;
    let mut recorder = Recorder::new(config, p, j_count);

    for it in 1..=config.iterations {
        {
            let process = state.process();
            let slots: Vec<std::sync::Mutex<&mut Walker>> =
                walkers.iter_mut().map(std::sync::Mutex::new).collect();
            for_each_individual(thread_pool.as_ref(), &mut rngs, |j, r| {
                let mut w = slots[j].lock().expect("walker lock");
                update(&models[j], &mut w, process, it, config.burnin, r);
            });
        }
        for (b, w) in state.betas.iter_mut().zip(&walkers) {
            b.copy_from_slice(&w.walk.position[..p]);
        }
        let mu = gibbs_update_mu(&state.betas, state.sigma_inv(), hyper, rng)?;
        let sigma_inv = gibbs_update_sigma_inv(&state.betas, &mu, hyper, rng)?;
        state.set_population(mu, sigma_inv)?;
        if config.keeps(it) {
            recorder.record(&state);
        }
    }

    let post = (config.iterations - config.burnin) as f64;
    let rates = walkers.iter().map(|w| w.accepted as f64 / post).collect();
    let ids = models.iter().map(|m| m.id().to_string()).collect();
    recorder.finish("full", ids, rates, config)
}
