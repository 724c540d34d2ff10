//! Effective sample size, posterior summaries and run comparison.

use std::io::Write;
use std::path::Path;

use crate::stage2::Stage2Output;
use crate::{Error, Result};

/// Shortest chain accepted by [`effective_sample_size`].
pub const MIN_ESS_LENGTH: usize = 10;

/// Quantile levels reported by [`summarize`].
pub const QUANTILES: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

/// Effective sample size `N / (1 + 2 Σ ρ̂_t)`.
///
/// Autocorrelations are summed in adjacent pairs `ρ̂_{2k} + ρ̂_{2k+1}` until
/// the first non-positive pair (Geyer's initial positive sequence). A
/// constant chain has ESS 0; the result is capped at `N`.
pub fn effective_sample_size(chain: &[f64]) -> Result<f64> {
    let n = chain.len();
    if n < MIN_ESS_LENGTH {
        return Err(Error::InvalidParameter(format!(
            "ESS needs at least {MIN_ESS_LENGTH} draws, got {n}"
        )));
    }
    if chain.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("chain contains non-finite draws".into()));
    }
    let mean = chain.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = chain.iter().map(|v| v - mean).collect();
    let autocov = |lag: usize| -> f64 {
        centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
    };
    let gamma0 = autocov(0);
    if gamma0 <= 0.0 {
        return Ok(0.0);
    }
    // tau = -1 + 2 Σ_k (ρ_{2k} + ρ_{2k+1}) with ρ_0 = 1
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = (autocov(lag) + autocov(lag + 1)) / gamma0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    // strongly antithetic chains can push tau below one; report at most n
    Ok(n as f64 / tau.max(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Values at [`QUANTILES`].
    pub quantiles: [f64; 5],
    /// `None` for chains shorter than [`MIN_ESS_LENGTH`].
    pub ess: Option<f64>,
}

impl ChainSummary {
    pub fn q025(&self) -> f64 {
        self.quantiles[0]
    }
    pub fn q25(&self) -> f64 {
        self.quantiles[1]
    }
    pub fn median(&self) -> f64 {
        self.quantiles[2]
    }
    pub fn q75(&self) -> f64 {
        self.quantiles[3]
    }
    pub fn q975(&self) -> f64 {
        self.quantiles[4]
    }
}

/// Linear interpolation between order statistics (`h = (n − 1) q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summary of one chain. Mean, sd and quantiles are computed from the sorted
/// draws and are therefore exactly invariant to row order; ESS is not.
pub fn summarize_chain(name: &str, chain: &[f64]) -> Result<ChainSummary> {
    if chain.is_empty() {
        return Err(Error::Data(format!("no draws for `{name}`")));
    }
    if chain.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("draws for `{name}`")));
    }
    let mut sorted = chain.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = if sorted.len() > 1 {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let quantiles = QUANTILES.map(|q| quantile_sorted(&sorted, q));
    let ess = if chain.len() >= MIN_ESS_LENGTH {
        Some(effective_sample_size(chain)?)
    } else {
        None
    };
    Ok(ChainSummary {
        name: name.to_string(),
        mean,
        sd,
        quantiles,
        ess,
    })
}

/// Per-column summaries of a row-major `rows × names.len()` draw matrix.
pub fn summarize(draws: &[f64], names: &[String]) -> Result<Vec<ChainSummary>> {
    let width = names.len();
    if width == 0 || draws.is_empty() {
        return Err(Error::Data("nothing to summarize".into()));
    }
    if draws.len() % width != 0 {
        return Err(Error::Dimension(format!(
            "{} draws do not divide into {width} columns",
            draws.len()
        )));
    }
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let col: Vec<f64> = draws.iter().skip(i).step_by(width).copied().collect();
            summarize_chain(name, &col)
        })
        .collect()
}

/// Summaries of every named parameter of a hierarchical run.
pub fn summarize_output(output: &Stage2Output) -> Result<Vec<ChainSummary>> {
    output
        .parameters()
        .iter()
        .map(|(name, col)| summarize_chain(name, col))
        .collect()
}

/// Agreement of one parameter between two runs, in pooled-sd units.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterComparison {
    pub name: String,
    /// `|mean_a − mean_b| / pooled sd`.
    pub standardized_mean_difference: f64,
    /// Largest endpoint difference of the 50% and 95% intervals.
    pub interval_difference: f64,
}

fn scaled_difference(a: f64, b: f64, pooled: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / pooled
    }
}

/// Compares two summary lists parameter by parameter. The lists must name
/// the same parameters in the same order.
pub fn compare_summaries(a: &[ChainSummary], b: &[ChainSummary]) -> Result<Vec<ParameterComparison>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.name != y.name) {
        return Err(Error::Data("runs report different parameter sets".into()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| {
            let pooled = (0.5 * (x.sd * x.sd + y.sd * y.sd)).sqrt();
            let endpoints = [0usize, 1, 3, 4]
                .iter()
                .map(|&i| scaled_difference(x.quantiles[i], y.quantiles[i], pooled))
                .fold(0.0, f64::max);
            ParameterComparison {
                name: x.name.clone(),
                standardized_mean_difference: scaled_difference(x.mean, y.mean, pooled),
                interval_difference: endpoints,
            }
        })
        .collect())
}

/// Standardized differences between two hierarchical runs.
pub fn compare_runs(a: &Stage2Output, b: &Stage2Output) -> Result<Vec<ParameterComparison>> {
    compare_summaries(&summarize_output(a)?, &summarize_output(b)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "NA".into())
}

/// Summary CSV: `parameter,mean,sd,q2.5,q25,q50,q75,q97.5,ess`.
pub fn write_summary_csv(path: &Path, summaries: &[ChainSummary]) -> Result<()> {
    let mut out = String::from("parameter,mean,sd,q2.5,q25,q50,q75,q97.5,ess\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.name,
            s.mean,
            s.sd,
            s.quantiles[0],
            s.quantiles[1],
            s.quantiles[2],
            s.quantiles[3],
            s.quantiles[4],
            fmt_opt(s.ess)
        ));
    }
    write_text(path, &out)
}

/// Interval plot data: `parameter,mean,lo50,hi50,lo95,hi95`.
pub fn write_interval_csv(path: &Path, summaries: &[ChainSummary]) -> Result<()> {
    let mut out = String::from("parameter,mean,lo50,hi50,lo95,hi95\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.name, s.mean, s.quantiles[1], s.quantiles[3], s.quantiles[0], s.quantiles[4]
        ));
    }
    write_text(path, &out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
