//! Functional movement model: a B-spline regression of position on time
//! with two-component rotated-Gaussian measurement error, and the path
//! imputation distribution it induces.
//!
//! Both coordinates share one basis `W(t)` and have their own coefficient
//! vectors. Given the component indicators `z`, the coefficients have a
//! Gaussian full conditional; `z` and the mixture probability `p` follow by
//! Bernoulli and Beta draws.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::probdist::{mvn_sample_precision, symmetrize, MixtureErrorParams, SpdFactor};
use crate::stage1::store::{file_stem, read_f64s, read_json, write_f64s, write_json};
use crate::telemetry::Track;
use crate::{Error, Result};

/// Clamped B-spline basis.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    degree: usize,
    knots: Vec<f64>,
}

impl BSplineBasis {
    /// `knots` is the full clamped knot vector: the first and last values
    /// repeated `degree + 1` times.
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self> {
        let order = degree + 1;
        if knots.len() < 2 * order {
            return Err(Error::InvalidParameter(format!(
                "{} knots cannot carry a degree-{degree} basis",
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("knots must be finite and nondecreasing".into()));
        }
        let n = knots.len();
        if knots[..order].iter().any(|&k| k != knots[0])
            || knots[n - order..].iter().any(|&k| k != knots[n - 1])
        {
            return Err(Error::InvalidParameter("knot vector is not clamped".into()));
        }
        if knots[0] >= knots[n - 1] {
            return Err(Error::InvalidParameter("knot range is empty".into()));
        }
        Ok(BSplineBasis { degree, knots })
    }

    /// `count` equally spaced distinct knots over `[start, end]`, clamped.
    pub fn uniform(start: f64, end: f64, count: usize, degree: usize) -> Result<Self> {
        if count < 2 || !(end > start) {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 knots over a nonempty range, got {count} over [{start}, {end}]"
            )));
        }
        let mut knots = vec![start; degree];
        let step = (end - start) / (count - 1) as f64;
        knots.extend((0..count).map(|i| if i + 1 == count { end } else { start + step * i as f64 }));
        knots.extend(std::iter::repeat_n(end, degree));
        Self::new(degree, knots)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn start(&self) -> f64 {
        self.knots[0]
    }

    pub fn end(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    fn span(&self, t: f64) -> usize {
        let n = self.num_basis() - 1;
        if t >= self.knots[n + 1] {
            return n;
        }
        let (mut lo, mut hi) = (self.degree, n + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// The `degree + 1` possibly nonzero basis values at `t` and the index
    /// of the first.
    pub fn eval(&self, t: f64) -> Result<(usize, Vec<f64>)> {
        if !(t >= self.start() && t <= self.end()) {
            return Err(Error::Data(format!(
                "time {t} outside the basis range [{}, {}]",
                self.start(),
                self.end()
            )));
        }
        let p = self.degree;
        let u = &self.knots;
        let span = self.span(t);
        let mut values = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        values[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        Ok((span - p, values))
    }
}

/// Dense `|times| × num_basis` basis matrix.
pub fn build_basis(times: &[f64], basis: &BSplineBasis) -> Result<DMatrix<f64>> {
    let mut w = DMatrix::zeros(times.len(), basis.num_basis());
    for (i, &t) in times.iter().enumerate() {
        let (first, vals) = basis.eval(t)?;
        for (k, v) in vals.into_iter().enumerate() {
            w[(i, first + k)] = v;
        }
    }
    Ok(w)
}

/// Distinct-knot count used when none is configured: `max(10, n / 3)`.
pub fn default_knot_count(observations: usize) -> usize {
    (observations / 3).max(10)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmmConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub degree: usize,
    /// Distinct knots; `None` uses [`default_knot_count`].
    pub num_knots: Option<usize>,
    /// Ridge variance; `None` uses 100 × the mean coordinate variance.
    pub sigma_alpha_sq: Option<f64>,
    /// Error covariances. Its `p` is the starting value.
    pub error: MixtureErrorParams,
    /// Hold `p` at `error.p()` instead of updating it.
    pub fix_p: bool,
    /// Covariance multipliers keyed by `error_class`.
    pub class_scales: BTreeMap<String, f64>,
}

impl FmmConfig {
    pub fn new(error: MixtureErrorParams) -> Self {
        FmmConfig {
            iterations: 10_000,
            burnin: 2_000,
            thin: 1,
            degree: 3,
            num_knots: None,
            sigma_alpha_sq: None,
            error,
            fix_p: false,
            class_scales: BTreeMap::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.burnin >= self.iterations || self.thin == 0 {
            return Err(Error::InvalidParameter(format!(
                "bad iteration settings: iterations {}, burnin {}, thin {}",
                self.iterations, self.burnin, self.thin
            )));
        }
        if (self.iterations - self.burnin) / self.thin == 0 {
            return Err(Error::InvalidParameter("thinning leaves no retained draws".into()));
        }
        if let Some(s) = self.sigma_alpha_sq {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter(format!("ridge variance {s}")));
            }
        }
        if let Some((k, v)) = self.class_scales.iter().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!("error class `{k}` has scale {v}")));
        }
        Ok(())
    }
}

/// Retained posterior draws of one individual's path model.
#[derive(Debug, Clone, PartialEq)]
pub struct FmmFit {
    pub individual_id: String,
    pub basis: BSplineBasis,
    /// `K × 2m`: x coefficients then y coefficients, in data coordinates.
    pub alpha_draws: Vec<f64>,
    pub p_draws: Vec<f64>,
    /// Posterior mean of each observation's indicator.
    pub z_mean: Vec<f64>,
    pub sigma_alpha_sq: f64,
}

impl FmmFit {
    pub fn num_draws(&self) -> usize {
        self.p_draws.len()
    }

    pub fn alpha(&self, k: usize) -> (&[f64], &[f64]) {
        let m = self.basis.num_basis();
        let row = &self.alpha_draws[k * 2 * m..(k + 1) * 2 * m];
        row.split_at(m)
    }

    /// Position of draw `k` at time `t`.
    pub fn position(&self, k: usize, t: f64) -> Result<(f64, f64)> {
        let (first, vals) = self.basis.eval(t)?;
        let (ax, ay) = self.alpha(k);
        Ok(combine(first, &vals, ax, ay))
    }

    /// Posterior mean path at the given times.
    pub fn mean_path(&self, times: &[f64]) -> Result<Vec<(f64, f64)>> {
        let m = self.basis.num_basis();
        let k = self.num_draws();
        let mut mean = vec![0.0; 2 * m];
        for row in self.alpha_draws.chunks(2 * m) {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= k as f64);
        let (ax, ay) = mean.split_at(m);
        times
            .iter()
            .map(|&t| {
                let (first, vals) = self.basis.eval(t)?;
                Ok(combine(first, &vals, ax, ay))
            })
            .collect()
    }
}

fn combine(first: usize, vals: &[f64], ax: &[f64], ay: &[f64]) -> (f64, f64) {
    let mut x = 0.0;
    let mut y = 0.0;
    for (k, v) in vals.iter().enumerate() {
        x += v * ax[first + k];
        y += v * ay[first + k];
    }
    (x, y)
}

/// Probability that an observation came from the first component:
/// `p e₁ / (p e₁ + (1 − p) e₂)` from log densities. Equal densities give
/// `p` exactly.
pub fn indicator_probability(p: f64, log_e1: f64, log_e2: f64) -> f64 {
    if log_e1 == log_e2 {
        return p;
    }
    if p == 0.0 || p == 1.0 {
        return p;
    }
    let a = p.ln() + log_e1;
    let b = (1.0 - p).ln() + log_e2;
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return p;
    }
    let ea = (a - m).exp();
    ea / (ea + (b - m).exp())
}

struct Component {
    precision: DMatrix<f64>,
    log_det: f64,
}

impl Component {
    fn new(cov: &SpdFactor) -> Result<Self> {
        Ok(Component {
            precision: cov.inverse()?.to_matrix(),
            log_det: cov.log_det(),
        })
    }

    /// Log density of residual `r` under covariance `scale · Σ`.
    fn log_density(&self, r: (f64, f64), scale: f64) -> f64 {
        let q = &self.precision;
        let quad = r.0 * r.0 * q[(0, 0)] + 2.0 * r.0 * r.1 * q[(0, 1)] + r.1 * r.1 * q[(1, 1)];
        -(2.0 * std::f64::consts::PI).ln() - 0.5 * (self.log_det + 2.0 * scale.ln()) - 0.5 * quad / scale
    }
}

struct Observation {
    first: usize,
    w: Vec<f64>,
    s: (f64, f64),
    scale: f64,
}

/// Precision and linear term of `[α | z]` for centered data.
fn alpha_conditional(
    obs: &[Observation],
    z: &[bool],
    comps: [&Component; 2],
    m: usize,
    ridge: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut gram = [DMatrix::<f64>::zeros(m, m), DMatrix::<f64>::zeros(m, m)];
    let mut b = DVector::zeros(2 * m);
    for (o, &zi) in obs.iter().zip(z) {
        let c = if zi { 0 } else { 1 };
        let g = &mut gram[c];
        for (a, wa) in o.w.iter().enumerate() {
            for (bb, wb) in o.w.iter().enumerate() {
                g[(o.first + a, o.first + bb)] += wa * wb / o.scale;
            }
        }
        let p = &comps[c].precision;
        let ps = (
            (p[(0, 0)] * o.s.0 + p[(0, 1)] * o.s.1) / o.scale,
            (p[(1, 0)] * o.s.0 + p[(1, 1)] * o.s.1) / o.scale,
        );
        for (a, wa) in o.w.iter().enumerate() {
            b[o.first + a] += wa * ps.0;
            b[m + o.first + a] += wa * ps.1;
        }
    }
    let mut q = DMatrix::zeros(2 * m, 2 * m);
    for (c, g) in gram.iter().enumerate() {
        let p = &comps[c].precision;
        for bi in 0..2 {
            for bj in 0..2 {
                let coef = p[(bi, bj)];
                let mut block = q.view_mut((bi * m, bj * m), (m, m));
                block += g * coef;
            }
        }
    }
    for i in 0..2 * m {
        q[(i, i)] += 1.0 / ridge;
    }
    (symmetrize(&q), b)
}

/// Fits the path model to one track by Gibbs sampling.
pub fn fit_fmm<R: Rng + ?Sized>(track: &Track, config: &FmmConfig, rng: &mut R) -> Result<FmmFit> {
    config.validate()?;
    let n = track.records.len();
    if n < 2 {
        return Err(Error::Data(format!("{}: need at least two fixes", track.id)));
    }
    let times: Vec<f64> = track.records.iter().map(|r| r.t).collect();
    let t0 = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let t1 = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let knots = config.num_knots.unwrap_or_else(|| default_knot_count(n));
    let basis = BSplineBasis::uniform(t0, t1, knots, config.degree)
        .map_err(|e| Error::Data(format!("{}: {e}", track.id)))?;
    let m = basis.num_basis();
    if n < m {
        log::warn!("{}: {n} fixes for {m} basis functions per coordinate", track.id);
    }

    let cx = track.records.iter().map(|r| r.x).sum::<f64>() / n as f64;
    let cy = track.records.iter().map(|r| r.y).sum::<f64>() / n as f64;
    let ridge = match config.sigma_alpha_sq {
        Some(v) => v,
        None => {
            let vx = track.records.iter().map(|r| (r.x - cx).powi(2)).sum::<f64>() / n as f64;
            let vy = track.records.iter().map(|r| (r.y - cy).powi(2)).sum::<f64>() / n as f64;
            let v = 100.0 * 0.5 * (vx + vy);
            if v > 0.0 { v } else { 100.0 }
        }
    };

    let obs: Vec<Observation> = track
        .records
        .iter()
        .map(|r| {
            let (first, w) = basis.eval(r.t)?;
            let scale = match &r.error_class {
                Some(c) if !config.class_scales.is_empty() => *config.class_scales.get(c).ok_or_else(|| {
                    Error::Data(format!("{}: no scale configured for error class `{c}`", track.id))
                })?,
                _ => 1.0,
            };
            Ok(Observation {
                first,
                w,
                s: (r.x - cx, r.y - cy),
                scale,
            })
        })
        .collect::<Result<_>>()?;

    let c1 = Component::new(config.error.base_cov())?;
    let c2 = Component::new(config.error.rotated_cov())?;
    let mut p = config.error.p();
    let mut z: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < p).collect();
    let retained = (config.iterations - config.burnin) / config.thin;
    let mut alpha_draws = Vec::with_capacity(retained * 2 * m);
    let mut p_draws = Vec::with_capacity(retained);
    let mut z_count = vec![0usize; n];

    for it in 1..=config.iterations {
        let (q, b) = alpha_conditional(&obs, &z, [&c1, &c2], m, ridge);
        let factor = SpdFactor::from_matrix(&q)?;
        let mean = factor.solve(b.as_slice());
        let alpha = mvn_sample_precision(rng, &mean, &factor);
        let (ax, ay) = alpha.split_at(m);

        for (o, zi) in obs.iter().zip(z.iter_mut()) {
            let fit = combine(o.first, &o.w, ax, ay);
            let r = (o.s.0 - fit.0, o.s.1 - fit.1);
            let prob = indicator_probability(p, c1.log_density(r, o.scale), c2.log_density(r, o.scale));
            *zi = rng.random::<f64>() < prob;
        }
        if !config.fix_p {
            let ones = z.iter().filter(|&&v| v).count() as f64;
            let beta = Beta::new(1.0 + ones, 1.0 + n as f64 - ones)
                .map_err(|e| Error::NonFinite(format!("mixture probability update: {e}")))?;
            p = beta.sample(rng);
        }

        if it > config.burnin && (it - config.burnin) % config.thin == 0 {
            alpha_draws.extend(ax.iter().map(|v| v + cx));
            alpha_draws.extend(ay.iter().map(|v| v + cy));
            p_draws.push(p);
            for (c, &zi) in z_count.iter_mut().zip(&z) {
                *c += zi as usize;
            }
        }
    }

    Ok(FmmFit {
        individual_id: track.id.clone(),
        basis,
        alpha_draws,
        z_mean: z_count.iter().map(|&c| c as f64 / retained as f64).collect(),
        p_draws,
        sigma_alpha_sq: ridge,
    })
}

/// Evenly spaced time grid `start + i·dt`, `i < len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub start: f64,
    pub dt: f64,
    pub len: usize,
}

impl TimeGrid {
    pub fn new(start: f64, dt: f64, len: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite() && start.is_finite()) || len == 0 {
            return Err(Error::InvalidParameter(format!(
                "time grid start {start}, dt {dt}, length {len}"
            )));
        }
        Ok(TimeGrid { start, dt, len })
    }

    /// Grid from `start` in steps of `dt` up to `end` inclusive.
    pub fn spanning(start: f64, end: f64, dt: f64) -> Result<Self> {
        if !(end >= start) {
            return Err(Error::InvalidParameter(format!("time span [{start}, {end}]")));
        }
        let len = ((end - start) / dt + 1e-9).floor() as usize + 1;
        Self::new(start, dt, len)
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start + self.dt * i as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.time(i)).collect()
    }

    pub fn end(&self) -> f64 {
        self.time(self.len - 1)
    }
}

/// `M` path realizations on a common time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDraws {
    individual_id: String,
    grid: TimeGrid,
    /// `M × len × 2`.
    draws: Vec<f64>,
}

impl PathDraws {
    pub fn new(individual_id: impl Into<String>, grid: TimeGrid, draws: Vec<f64>) -> Result<Self> {
        let id = individual_id.into();
        let per = grid.len * 2;
        if draws.is_empty() || draws.len() % per != 0 {
            return Err(Error::Dimension(format!(
                "{id}: {} values do not form paths of {} points",
                draws.len(),
                grid.len
            )));
        }
        if draws.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{id}: path positions are not finite")));
        }
        Ok(PathDraws {
            individual_id: id,
            grid,
            draws,
        })
    }

    pub fn individual_id(&self) -> &str {
        &self.individual_id
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn times(&self) -> Vec<f64> {
        self.grid.times()
    }

    pub fn num_paths(&self) -> usize {
        self.draws.len() / (2 * self.grid.len)
    }

    /// Path `k` as interleaved `(x, y)` values.
    pub fn path(&self, k: usize) -> &[f64] {
        let per = 2 * self.grid.len;
        &self.draws[k * per..(k + 1) * per]
    }

    pub fn positions(&self, k: usize) -> Vec<(f64, f64)> {
        self.path(k).chunks(2).map(|c| (c[0], c[1])).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.draws
    }
}

/// Evaluates `M` evenly spaced posterior draws on `grid`.
pub fn impute_paths(fit: &FmmFit, grid: &TimeGrid, m: usize) -> Result<PathDraws> {
    let k = fit.num_draws();
    if m == 0 || m > k {
        return Err(Error::InvalidParameter(format!(
            "{}: cannot take {m} paths from {k} posterior draws",
            fit.individual_id
        )));
    }
    let rows: Vec<(usize, Vec<f64>)> = grid
        .times()
        .into_iter()
        .map(|t| fit.basis.eval(t))
        .collect::<Result<_>>()
        .map_err(|e| Error::Data(format!("{}: {e}", fit.individual_id)))?;
    let mut draws = Vec::with_capacity(m * grid.len * 2);
    for i in 0..m {
        let (ax, ay) = fit.alpha(i * k / m);
        for (first, vals) in &rows {
            let (x, y) = combine(*first, vals, ax, ay);
            draws.push(x);
            draws.push(y);
        }
    }
    PathDraws::new(fit.individual_id.clone(), *grid, draws)
}

/// Adds two-component error to true positions. Returns the noisy positions
/// and the component each came from (`true` for the unrotated one).
pub fn add_mixture_error<R: Rng + ?Sized>(
    positions: &[(f64, f64)],
    params: &MixtureErrorParams,
    rng: &mut R,
) -> (Vec<(f64, f64)>, Vec<bool>) {
    let l1 = params.base_cov().lower().clone();
    let l2 = params.rotated_cov().lower().clone();
    positions
        .iter()
        .map(|&(x, y)| {
            let first = rng.random::<f64>() < params.p();
            let l = if first { &l1 } else { &l2 };
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let e = (l[(0, 0)] * a, l[(1, 0)] * a + l[(1, 1)] * b);
            ((x + e.0, y + e.1), first)
        })
        .unzip()
}

pub const PATHS_INDEX: &str = "paths.json";

#[derive(Debug, Serialize, Deserialize)]
struct PathIndex {
    individuals: Vec<PathEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PathEntry {
    individual_id: String,
    manifest: String,
    payload: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PathManifest {
    individual_id: String,
    #[serde(rename = "M")]
    m: usize,
    grid_start: f64,
    grid_dt: f64,
    grid_len: usize,
}

pub fn save_path_draws(paths: &[PathDraws], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let stem = file_stem(i, &p.individual_id);
        let manifest = format!("{stem}.paths.json");
        let payload = format!("{stem}.paths.f64");
        write_json(
            &dir.join(&manifest),
            &PathManifest {
                individual_id: p.individual_id.clone(),
                m: p.num_paths(),
                grid_start: p.grid.start,
                grid_dt: p.grid.dt,
                grid_len: p.grid.len,
            },
        )?;
        write_f64s(&dir.join(&payload), &p.draws)?;
        entries.push(PathEntry {
            individual_id: p.individual_id.clone(),
            manifest,
            payload,
        });
    }
    write_json(&dir.join(PATHS_INDEX), &PathIndex { individuals: entries })
}

pub fn load_path_draws(dir: &Path) -> Result<Vec<PathDraws>> {
    let index: PathIndex = read_json(&dir.join(PATHS_INDEX))?;
    index
        .individuals
        .iter()
        .map(|e| {
            let mpath = dir.join(&e.manifest);
            let m: PathManifest = read_json(&mpath)?;
            let grid = TimeGrid::new(m.grid_start, m.grid_dt, m.grid_len)
                .map_err(|err| Error::format(&mpath, err.to_string()))?;
            let values = read_f64s(&dir.join(&e.payload), m.m * m.grid_len * 2, &m.individual_id)?;
            PathDraws::new(m.individual_id, grid, values).map_err(|err| Error::format(&mpath, err.to_string()))
        })
        .collect()
}
