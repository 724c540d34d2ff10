//! Resource selection: weighted-distribution point processes on a raster
//! and their Poisson grid-count approximation.
//!
//! Fixes are drawn with density proportional to `exp(x(s)'β)` over the
//! raster. Binning them into cell counts `y` gives the Poisson model
//! `y_i ~ Pois(exp(x_i'β))`, whose intercept absorbs the point-process
//! normalizing constant.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::probdist::{mvn_sample, MvnParams, SpdFactor};
use crate::raster::{Cell, RasterGrid};
use crate::stage1::IndividualModel;
use crate::telemetry::TelemetryRecord;
use crate::{Error, Result};

/// One individual's telemetry fixes.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub individual_id: String,
    pub points: Vec<(f64, f64)>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Fixes as telemetry records, with `t` set to the fix index.
    pub fn to_records(&self) -> Vec<TelemetryRecord> {
        self.points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| TelemetryRecord {
                id: self.individual_id.clone(),
                t: i as f64,
                x,
                y,
                error_class: None,
            })
            .collect()
    }
}

/// Cell-level design: an intercept column plus one column per covariate,
/// rows in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct RsfDesign {
    rows: usize,
    cols: usize,
    x: Vec<f64>,
    cell_area: f64,
}

fn check_aligned(covariates: &[RasterGrid]) -> Result<()> {
    let first = covariates
        .first()
        .ok_or_else(|| Error::Data("at least one covariate raster is required".into()))?;
    if covariates.iter().any(|c| !c.aligned_with(first)) {
        return Err(Error::Data("covariate rasters are not aligned".into()));
    }
    Ok(())
}

impl RsfDesign {
    /// `x` is row-major with `cols` columns, the first of which must be all
    /// ones.
    pub fn new(x: Vec<f64>, cols: usize, cell_area: f64) -> Result<Self> {
        if cols == 0 || x.is_empty() || x.len() % cols != 0 {
            return Err(Error::Dimension(format!(
                "{} design values do not form rows of {cols}",
                x.len()
            )));
        }
        if !(cell_area > 0.0 && cell_area.is_finite()) {
            return Err(Error::InvalidParameter(format!("cell area {cell_area}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrix has non-finite entries".into()));
        }
        if x.iter().step_by(cols).any(|&v| v != 1.0) {
            return Err(Error::Data("first design column must be all ones".into()));
        }
        Ok(RsfDesign {
            rows: x.len() / cols,
            cols,
            x,
            cell_area,
        })
    }

    /// Builds the design from aligned covariate rasters, standardizing each
    /// first when asked.
    pub fn from_rasters(covariates: &[RasterGrid], standardize: bool) -> Result<Self> {
        check_aligned(covariates)?;
        let layers: Vec<RasterGrid> = if standardize {
            covariates.iter().map(|c| c.standardized()).collect::<Result<_>>()?
        } else {
            covariates.to_vec()
        };
        let m = layers[0].len();
        let cols = layers.len() + 1;
        let mut x = Vec::with_capacity(m * cols);
        for i in 0..m {
            x.push(1.0);
            x.extend(layers.iter().map(|l| l.values()[i]));
        }
        let cs = layers[0].cellsize();
        Self::new(x, cols, cs * cs)
    }

    pub fn num_cells(&self) -> usize {
        self.rows
    }

    pub fn num_coefficients(&self) -> usize {
        self.cols
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_area
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.cols..(i + 1) * self.cols]
    }

    fn eta(&self, i: usize, beta: &[f64]) -> f64 {
        self.row(i).iter().zip(beta).map(|(a, b)| a * b).sum()
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.cols {
            return Err(Error::Dimension(format!(
                "β has length {} but the design has {} columns",
                beta.len(),
                self.cols
            )));
        }
        Ok(())
    }

    /// `X'y`.
    pub fn cross_counts(&self, y: &[u64]) -> Result<Vec<f64>> {
        self.check_counts(y)?;
        let mut out = vec![0.0; self.cols];
        for (i, &c) in y.iter().enumerate() {
            if c > 0 {
                for (o, v) in out.iter_mut().zip(self.row(i)) {
                    *o += c as f64 * v;
                }
            }
        }
        Ok(out)
    }

    fn check_counts(&self, y: &[u64]) -> Result<()> {
        if y.len() != self.rows {
            return Err(Error::Dimension(format!(
                "{} counts for {} cells",
                y.len(),
                self.rows
            )));
        }
        Ok(())
    }
}

/// Multinomial cell probabilities `∝ exp(x_i'β)`.
pub fn cell_probabilities(design: &RsfDesign, beta: &[f64]) -> Result<Vec<f64>> {
    design.check_beta(beta)?;
    let eta: Vec<f64> = (0..design.rows).map(|i| design.eta(i, beta)).collect();
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("cell intensities are not finite".into()));
    }
    let w: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Draws `n` fixes: a cell by its selection weight, then a uniform position
/// inside it. `beta[0]` multiplies the intercept and has no effect.
pub fn simulate_point_process<R: Rng + ?Sized>(
    id: &str,
    covariates: &[RasterGrid],
    beta: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<PointSet> {
    let design = RsfDesign::from_rasters(covariates, false)?;
    let probs = cell_probabilities(&design, beta)?;
    let grid = &covariates[0];
    let picker = WeightedIndex::new(&probs)
        .map_err(|e| Error::NonFinite(format!("cell weights: {e}")))?;
    let cs = grid.cellsize();
    let points = (0..n)
        .map(|_| {
            let (x0, y0) = grid.cell_origin(grid.cell_at(picker.sample(rng)));
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            (x0 + u * cs, y0 + v * cs)
        })
        .collect();
    Ok(PointSet {
        individual_id: id.to_string(),
        points,
    })
}

/// Counts of fixes per cell, in raster order.
pub fn bin_counts(points: &PointSet, grid: &RasterGrid) -> Result<Vec<u64>> {
    let mut y = vec![0u64; grid.len()];
    for (i, &(px, py)) in points.points.iter().enumerate() {
        let cell: Cell = grid.cell_of(px, py).ok_or_else(|| {
            Error::Data(format!(
                "{}: fix {i} at ({px}, {py}) lies outside the raster extent",
                points.individual_id
            ))
        })?;
        y[grid.index(cell)] += 1;
    }
    Ok(y)
}

/// `Σ_i [y_i x_i'β − exp(x_i'β)]`; the `−log y_i!` terms are dropped.
pub fn rsf_loglik(y: &[u64], design: &RsfDesign, beta: &[f64]) -> Result<f64> {
    design.check_beta(beta)?;
    let xty = design.cross_counts(y)?;
    Ok(loglik_with(&xty, design, beta))
}

fn loglik_with(xty: &[f64], design: &RsfDesign, beta: &[f64]) -> f64 {
    let linear: f64 = xty.iter().zip(beta).map(|(a, b)| a * b).sum();
    let mass: f64 = (0..design.rows).map(|i| design.eta(i, beta).exp()).sum();
    linear - mass
}

/// Gradient of [`rsf_loglik`]: `X'(y − exp(Xβ))`.
pub fn rsf_loglik_grad(y: &[u64], design: &RsfDesign, beta: &[f64]) -> Result<Vec<f64>> {
    design.check_beta(beta)?;
    let mut g = design.cross_counts(y)?;
    for i in 0..design.rows {
        let lam = design.eta(i, beta).exp();
        for (gk, xk) in g.iter_mut().zip(design.row(i)) {
            *gk -= lam * xk;
        }
    }
    Ok(g)
}

/// Poisson RSF likelihood for one individual with its stage-one prior.
#[derive(Debug, Clone)]
pub struct RsfModel {
    id: String,
    design: Arc<RsfDesign>,
    xty: Vec<f64>,
    prior: MvnParams,
}

impl RsfModel {
    pub fn design(&self) -> &RsfDesign {
        &self.design
    }
}

pub fn make_rsf_model(
    id: &str,
    y: &[u64],
    design: Arc<RsfDesign>,
    prior: MvnParams,
) -> Result<RsfModel> {
    if prior.dim() != design.cols {
        return Err(Error::Dimension(format!(
            "{id}: prior has dimension {} but the design has {} columns",
            prior.dim(),
            design.cols
        )));
    }
    let xty = design.cross_counts(y)?;
    Ok(RsfModel {
        id: id.to_string(),
        design,
        xty,
        prior,
    })
}

impl IndividualModel for RsfModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim_beta(&self) -> usize {
        self.design.cols
    }

    fn log_likelihood(&self, beta: &[f64], _theta: &[f64], _dataset: usize) -> f64 {
        loglik_with(&self.xty, &self.design, beta)
    }

    fn prior(&self) -> &MvnParams {
        &self.prior
    }
}

/// Settings of the simulated resource-selection study.
#[derive(Debug, Clone, PartialEq)]
pub struct RsfScenario {
    pub grid_size: usize,
    pub cellsize: f64,
    pub individuals: usize,
    /// Mean of the Poisson number of fixes per individual.
    pub mean_fixes: f64,
    pub blobs: usize,
    /// Population mean of `(intercept, slope)`; the intercept has no effect
    /// on the simulated fixes.
    pub mu_beta: Vec<f64>,
    /// Diagonal of `Σ_β`.
    pub sigma_beta_diag: Vec<f64>,
}

impl Default for RsfScenario {
    fn default() -> Self {
        RsfScenario {
            grid_size: 40,
            cellsize: 1.0,
            individuals: 20,
            mean_fixes: 30.0,
            blobs: 3,
            mu_beta: vec![0.0, 1.0],
            sigma_beta_diag: vec![0.25, 0.25],
        }
    }
}

/// True values for one simulated individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsfTruthIndividual {
    pub id: String,
    pub n: usize,
    /// Drawn coefficients, as used by the point process.
    pub beta: Vec<f64>,
    /// Intercept under which the Poisson count model has the same mean
    /// counts: `log n − log Σ_i exp(x_i'β_slope)`.
    pub poisson_intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsfTruth {
    pub mu_beta: Vec<f64>,
    pub sigma_beta: Vec<Vec<f64>>,
    pub individuals: Vec<RsfTruthIndividual>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsfDataset {
    /// Standardized covariate surface.
    pub covariate: RasterGrid,
    pub fixes: Vec<PointSet>,
    pub truth: RsfTruth,
}

impl RsfDataset {
    pub fn records(&self) -> Vec<TelemetryRecord> {
        self.fixes.iter().flat_map(|f| f.to_records()).collect()
    }
}

/// A smooth surface built from Gaussian bumps at random centers, then
/// standardized.
pub fn gaussian_blob_surface<R: Rng + ?Sized>(
    size: usize,
    cellsize: f64,
    blobs: usize,
    rng: &mut R,
) -> Result<RasterGrid> {
    let extent = size as f64 * cellsize;
    let centers: Vec<(f64, f64, f64, f64)> = (0..blobs.max(1))
        .map(|_| {
            let cx = rng.random::<f64>() * extent;
            let cy = rng.random::<f64>() * extent;
            let width = extent * (0.08 + 0.12 * rng.random::<f64>());
            let height = if rng.random::<bool>() { 1.0 } else { 0.6 };
            (cx, cy, width, height)
        })
        .collect();
    let raw = RasterGrid::from_fn(size, size, 0.0, 0.0, cellsize, |x, y| {
        centers
            .iter()
            .map(|&(cx, cy, w, h)| h * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * w * w)).exp())
            .sum()
    })?;
    raw.standardized()
}

/// Simulates a covariate surface, population, individual coefficients and
/// fixes.
pub fn simulate_rsf_scenario<R: Rng + ?Sized>(scenario: &RsfScenario, rng: &mut R) -> Result<RsfDataset> {
    if scenario.grid_size == 0 || scenario.individuals == 0 {
        return Err(Error::InvalidParameter("grid size and individual count must be positive".into()));
    }
    if !(scenario.mean_fixes > 0.0) {
        return Err(Error::InvalidParameter(format!("mean fixes {}", scenario.mean_fixes)));
    }
    if scenario.mu_beta.len() != 2 || scenario.sigma_beta_diag.len() != 2 {
        return Err(Error::Dimension("the scenario has one covariate, so β has length 2".into()));
    }
    let covariate = gaussian_blob_surface(scenario.grid_size, scenario.cellsize, scenario.blobs, rng)?;
    let design = RsfDesign::from_rasters(std::slice::from_ref(&covariate), false)?;
    let population = MvnParams::new(
        scenario.mu_beta.clone(),
        SpdFactor::diagonal(&scenario.sigma_beta_diag)?,
    )?;
    let counts = Poisson::new(scenario.mean_fixes)
        .map_err(|e| Error::InvalidParameter(format!("fix count distribution: {e}")))?;
    let mut fixes = Vec::with_capacity(scenario.individuals);
    let mut truth = Vec::with_capacity(scenario.individuals);
    for j in 0..scenario.individuals {
        let id = format!("ind{:02}", j + 1);
        let beta = mvn_sample(rng, &population);
        let n = (counts.sample(rng) as usize).max(1);
        let points = simulate_point_process(&id, std::slice::from_ref(&covariate), &beta, n, rng)?;
        let slope_only = [0.0, beta[1]];
        let log_mass = (0..design.rows)
            .map(|i| design.eta(i, &slope_only))
            .fold(LogSum::default(), LogSum::push)
            .value();
        truth.push(RsfTruthIndividual {
            id,
            n,
            poisson_intercept: (n as f64).ln() - log_mass,
            beta,
        });
        fixes.push(points);
    }
    let sigma_beta = (0..2)
        .map(|a| (0..2).map(|b| if a == b { scenario.sigma_beta_diag[a] } else { 0.0 }).collect())
        .collect();
    Ok(RsfDataset {
        covariate,
        fixes,
        truth: RsfTruth {
            mu_beta: scenario.mu_beta.clone(),
            sigma_beta,
            individuals: truth,
        },
    })
}

#[derive(Default, Clone, Copy)]
struct LogSum {
    max: f64,
    sum: f64,
    started: bool,
}

impl LogSum {
    fn push(mut self, v: f64) -> Self {
        if !self.started {
            return LogSum { max: v, sum: 1.0, started: true };
        }
        if v > self.max {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        } else {
            self.sum += (v - self.max).exp();
        }
        self
    }

    fn value(self) -> f64 {
        self.max + self.sum.ln()
    }
}

pub fn write_truth(path: &Path, truth: &RsfTruth) -> Result<()> {
    crate::stage1::store::write_json(path, truth)
}

pub fn read_truth(path: &Path) -> Result<RsfTruth> {
    crate::stage1::store::read_json(path)
}

/// Evaluates `X β` for every cell (handy for plotting fitted surfaces).
pub fn linear_predictor(design: &RsfDesign, beta: &[f64]) -> Result<DVector<f64>> {
    design.check_beta(beta)?;
    Ok(DVector::from_iterator(design.rows, (0..design.rows).map(|i| design.eta(i, beta))))
}
