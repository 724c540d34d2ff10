//! Continuous-time discrete-space movement.
//!
//! A path on the raster is a sequence of rook moves. Each stay in a cell
//! lasts an exponential time with rate `Σ_d λ_d` and ends with a move in
//! direction `d` with probability `λ_d / Σλ`. With static drivers the rate
//! is `λ_d = exp(x'β)` for the source cell's covariates `x`, and the
//! likelihood of the stays and moves is that of independent Poisson
//! indicators with offsets `log τ`:
//!
//! ```text
//! Σ_l Σ_d [y_dl x_dl'β − τ_l exp(x_dl'β)]
//! ```
//!
//! Only directions that stay on the raster enter the risk set, so paths
//! reflect at the boundary.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::fmm::PathDraws;
use crate::probdist::{mvn_sample, MvnParams, SpdFactor};
use crate::raster::{Cell, RasterGrid};
use crate::stage1::IndividualModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    N,
    E,
    S,
    W,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::N, Direction::E, Direction::S, Direction::W];

    /// Row and column offsets (row 0 is north).
    pub fn offset(self) -> (i64, i64) {
        match self {
            Direction::N => (-1, 0),
            Direction::E => (0, 1),
            Direction::S => (1, 0),
            Direction::W => (0, -1),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_step(from: Cell, to: Cell) -> Option<Direction> {
        let dr = to.row as i64 - from.row as i64;
        let dc = to.col as i64 - from.col as i64;
        Direction::ALL.into_iter().find(|d| d.offset() == (dr, dc))
    }

    pub fn neighbor(self, cell: Cell, grid: &RasterGrid) -> Option<Cell> {
        let (dr, dc) = self.offset();
        let r = cell.row as i64 + dr;
        let c = cell.col as i64 + dc;
        grid.contains_cell(r, c).then(|| Cell::new(r as usize, c as usize))
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Direction::N => "N",
            Direction::E => "E",
            Direction::S => "S",
            Direction::W => "W",
        };
        f.write_str(s)
    }
}

/// Directions whose neighbor lies on the raster.
pub fn allowed_directions(cell: Cell, grid: &RasterGrid) -> Vec<Direction> {
    Direction::ALL
        .into_iter()
        .filter(|d| d.neighbor(cell, grid).is_some())
        .collect()
}

/// Outcome of one short time step, in the order up, right, stay, down, left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Move(Direction),
    Stay,
}

/// Multinomial indicator of a step outcome.
pub fn encode_multinomial(outcome: StepOutcome) -> [u8; 5] {
    let slot = match outcome {
        StepOutcome::Move(Direction::N) => 0,
        StepOutcome::Move(Direction::E) => 1,
        StepOutcome::Stay => 2,
        StepOutcome::Move(Direction::S) => 3,
        StepOutcome::Move(Direction::W) => 4,
    };
    let mut y = [0; 5];
    y[slot] = 1;
    y
}

/// Decodes a single-character code: `N`/`U`, `E`/`R`, `X` (stay), `S`/`D`,
/// `W`/`L`.
pub fn parse_outcome(code: &str) -> Result<StepOutcome> {
    Ok(match code.trim().to_ascii_uppercase().as_str() {
        "N" | "U" | "UP" => StepOutcome::Move(Direction::N),
        "E" | "R" | "RIGHT" => StepOutcome::Move(Direction::E),
        "X" | "STAY" => StepOutcome::Stay,
        "S" | "D" | "DOWN" => StepOutcome::Move(Direction::S),
        "W" | "L" | "LEFT" => StepOutcome::Move(Direction::W),
        other => return Err(Error::InvalidParameter(format!("unknown step code `{other}`"))),
    })
}

/// Cells visited and the time each was entered.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPath {
    cells: Vec<Cell>,
    entry_times: Vec<f64>,
}

impl CellPath {
    /// Consecutive cells must be rook neighbors and entry times
    /// nondecreasing. (Equal times only arise when a path passes exactly
    /// through a cell corner.)
    pub fn new(cells: Vec<Cell>, entry_times: Vec<f64>) -> Result<Self> {
        if cells.is_empty() || cells.len() != entry_times.len() {
            return Err(Error::Dimension(format!(
                "{} cells with {} entry times",
                cells.len(),
                entry_times.len()
            )));
        }
        if entry_times.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("entry times".into()));
        }
        for (i, w) in cells.windows(2).enumerate() {
            if Direction::from_step(w[0], w[1]).is_none() {
                return Err(Error::Data(format!(
                    "cells {i} and {} are not rook neighbors",
                    i + 1
                )));
            }
            if entry_times[i + 1] < entry_times[i] {
                return Err(Error::Data(format!("entry time {} decreases", i + 1)));
            }
        }
        Ok(CellPath { cells, entry_times })
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn entry_times(&self) -> &[f64] {
        &self.entry_times
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn num_moves(&self) -> usize {
        self.cells.len() - 1
    }

    /// Cell occupied at time `t` (the first cell before the path starts).
    pub fn cell_at(&self, t: f64) -> Cell {
        let i = self.entry_times.partition_point(|&e| e <= t);
        self.cells[i.saturating_sub(1)]
    }
}

/// Maps a sampled path to cells, turning diagonal steps into two rook moves
/// ordered by which boundary the straight line between the samples crosses
/// first (x first on ties).
pub fn discretize_path(times: &[f64], positions: &[(f64, f64)], grid: &RasterGrid) -> Result<CellPath> {
    if times.is_empty() || times.len() != positions.len() {
        return Err(Error::Dimension(format!(
            "{} times with {} positions",
            times.len(),
            positions.len()
        )));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Data("path times must be strictly increasing".into()));
    }
    let locate = |i: usize| {
        let (x, y) = positions[i];
        grid.cell_of(x, y).ok_or_else(|| {
            Error::Data(format!("path leaves the raster at time {} (position ({x}, {y}))", times[i]))
        })
    };
    let cs = grid.cellsize();
    let mut cells = vec![locate(0)?];
    let mut entries = vec![times[0]];
    for i in 1..times.len() {
        let cell = locate(i)?;
        let prev = *cells.last().expect("nonempty");
        if cell == prev {
            continue;
        }
        let dr = cell.row as i64 - prev.row as i64;
        let dc = cell.col as i64 - prev.col as i64;
        if dr.abs() > 1 || dc.abs() > 1 {
            return Err(Error::Data(format!(
                "path jumps more than one cell between times {} and {}; refine the time grid",
                times[i - 1],
                times[i]
            )));
        }
        let (ta, tb) = (times[i - 1], times[i]);
        let (pa, pb) = (positions[i - 1], positions[i]);
        let (x0, y0) = grid.cell_origin(prev);
        let fraction = |a: f64, b: f64, boundary: f64| ((boundary - a) / (b - a)).clamp(0.0, 1.0);
        let fx = (dc != 0).then(|| fraction(pa.0, pb.0, if dc > 0 { x0 + cs } else { x0 }));
        // north means a smaller row index and a larger y
        let fy = (dr != 0).then(|| fraction(pa.1, pb.1, if dr < 0 { y0 + cs } else { y0 }));
        let last = *entries.last().expect("nonempty");
        let at = |f: f64| (ta + f * (tb - ta)).max(last);
        match (fx, fy) {
            (Some(f), None) | (None, Some(f)) => {
                cells.push(cell);
                entries.push(at(f));
            }
            (Some(fx), Some(fy)) => {
                let (mid, f1, f2) = if fx <= fy {
                    (Cell::new(prev.row, cell.col), fx, fy)
                } else {
                    (Cell::new(cell.row, prev.col), fy, fx)
                };
                cells.push(mid);
                entries.push(at(f1));
                let t1 = *entries.last().expect("nonempty");
                cells.push(cell);
                entries.push(at(f2).max(t1));
            }
            (None, None) => unreachable!("distinct cells differ in row or column"),
        }
    }
    CellPath::new(cells, entries)
}

/// What to do with path positions outside the raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Outside {
    /// Reject the path, reporting the time it left.
    #[default]
    Error,
    /// Move each outside position to the closest point of the nearest
    /// edge cell.
    Nearest,
}

/// Pulls positions onto the raster, just inside the half-open upper edges.
pub fn clamp_to_extent(positions: &[(f64, f64)], grid: &RasterGrid) -> Vec<(f64, f64)> {
    let inset = grid.cellsize() * 1e-9;
    positions
        .iter()
        .map(|&(x, y)| {
            (
                x.clamp(grid.xll(), grid.x_max() - inset),
                y.clamp(grid.yll(), grid.y_max() - inset),
            )
        })
        .collect()
}

/// Discretizes realization `k` of an imputation pool.
pub fn discretize_realization(paths: &PathDraws, k: usize, grid: &RasterGrid, outside: Outside) -> Result<CellPath> {
    let mut positions = paths.positions(k);
    if outside == Outside::Nearest {
        positions = clamp_to_extent(&positions, grid);
    }
    discretize_path(&paths.times(), &positions, grid)
        .map_err(|e| Error::Data(format!("{} path {k}: {e}", paths.individual_id())))
}

/// One stay in `cell` lasting `tau`, ended by a move in `direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StayMove {
    pub cell: Cell,
    pub tau: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StayMovePairs {
    pub pairs: Vec<StayMove>,
    /// Cell occupied when observation ends.
    pub final_cell: Cell,
    /// Time spent in `final_cell` with no observed exit.
    pub censored: f64,
    pub start_time: f64,
    pub end_time: f64,
}

impl StayMovePairs {
    pub fn total_time(&self) -> f64 {
        self.pairs.iter().map(|p| p.tau).sum::<f64>() + self.censored
    }
}

/// Residence times and moves of a cell path observed until `end_time`.
pub fn extract_pairs(path: &CellPath, end_time: f64) -> Result<StayMovePairs> {
    let last = *path.entry_times.last().expect("nonempty");
    if !(end_time >= last) {
        return Err(Error::Data(format!(
            "end time {end_time} precedes the last cell entry at {last}"
        )));
    }
    let pairs = path
        .cells
        .windows(2)
        .zip(path.entry_times.windows(2))
        .map(|(c, t)| StayMove {
            cell: c[0],
            tau: t[1] - t[0],
            direction: Direction::from_step(c[0], c[1]).expect("validated path"),
        })
        .collect();
    Ok(StayMovePairs {
        pairs,
        final_cell: *path.cells.last().expect("nonempty"),
        censored: end_time - last,
        start_time: path.entry_times[0],
        end_time,
    })
}

/// One Poisson row: a pair (or the censored stay) and a candidate
/// direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CtdsRow {
    /// Pair index; the censored stay uses `num_pairs`.
    pub pair: usize,
    pub direction: Direction,
    pub cell: Cell,
    pub tau: f64,
    pub y: u8,
    pub censored: bool,
}

/// Poisson design for one path: rows plus the covariate vector of each
/// source cell (intercept first).
#[derive(Debug, Clone, PartialEq)]
pub struct CtdsDesign {
    rows: Vec<CtdsRow>,
    num_pairs: usize,
    p: usize,
    /// Covariates per cell, keyed by raster index.
    x: BTreeMap<usize, Vec<f64>>,
    ncols: usize,
}

fn cell_covariates(covariates: &[RasterGrid], cell: Cell) -> Vec<f64> {
    let mut x = Vec::with_capacity(covariates.len() + 1);
    x.push(1.0);
    x.extend(covariates.iter().map(|c| c.value(cell)));
    x
}

fn check_covariates(covariates: &[RasterGrid]) -> Result<&RasterGrid> {
    let grid = covariates
        .first()
        .ok_or_else(|| Error::Data("at least one covariate raster is required".into()))?;
    if covariates.iter().any(|c| !c.aligned_with(grid)) {
        return Err(Error::Data("covariate rasters are not aligned".into()));
    }
    Ok(grid)
}

impl CtdsDesign {
    /// Rows for every allowed direction of every pair and of the censored
    /// stay. Covariates are read at the source cell.
    pub fn build(pairs: &StayMovePairs, covariates: &[RasterGrid]) -> Result<Self> {
        let grid = check_covariates(covariates)?;
        let mut rows = Vec::with_capacity(4 * (pairs.pairs.len() + 1));
        let mut x = BTreeMap::new();
        let mut add = |pair: usize, cell: Cell, tau: f64, moved: Option<Direction>| -> Result<()> {
            if cell.row >= grid.nrows() || cell.col >= grid.ncols() {
                return Err(Error::Data(format!("cell {cell:?} is off the raster")));
            }
            x.entry(grid.index(cell)).or_insert_with(|| cell_covariates(covariates, cell));
            let allowed = allowed_directions(cell, grid);
            if let Some(d) = moved {
                if !allowed.contains(&d) {
                    return Err(Error::Data(format!("pair {pair} moves off the raster")));
                }
            }
            for d in allowed {
                rows.push(CtdsRow {
                    pair,
                    direction: d,
                    cell,
                    tau,
                    y: (moved == Some(d)) as u8,
                    censored: moved.is_none(),
                });
            }
            Ok(())
        };
        for (l, pm) in pairs.pairs.iter().enumerate() {
            add(l, pm.cell, pm.tau, Some(pm.direction))?;
        }
        if pairs.censored > 0.0 {
            add(pairs.pairs.len(), pairs.final_cell, pairs.censored, None)?;
        }
        Ok(CtdsDesign {
            rows,
            num_pairs: pairs.pairs.len(),
            p: covariates.len() + 1,
            x,
            ncols: grid.ncols(),
        })
    }

    pub fn rows(&self) -> &[CtdsRow] {
        &self.rows
    }

    pub fn num_pairs(&self) -> usize {
        self.num_pairs
    }

    /// Coefficients: intercept plus one per covariate.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn covariates_of(&self, row: &CtdsRow) -> &[f64] {
        &self.x[&(row.cell.row * self.ncols + row.cell.col)]
    }

    fn check(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.p {
            return Err(Error::Dimension(format!(
                "β has length {} but the design has {} coefficients",
                beta.len(),
                self.p
            )));
        }
        Ok(())
    }

    /// Collapses rows sharing a source cell into move counts and exposure.
    pub fn sufficient_statistics(&self) -> CtdsStatistics {
        let mut acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry(r.cell.row * self.ncols + r.cell.col).or_insert((0.0, 0.0));
            e.0 += r.y as f64;
            e.1 += r.tau;
        }
        let mut x = Vec::with_capacity(acc.len() * self.p);
        let mut moves = Vec::with_capacity(acc.len());
        let mut exposure = Vec::with_capacity(acc.len());
        for (k, (m, e)) in acc {
            x.extend_from_slice(&self.x[&k]);
            moves.push(m);
            exposure.push(e);
        }
        CtdsStatistics { p: self.p, x, moves, exposure }
    }

    /// CSV with columns `pair,direction,y,tau,x1..xp`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("pair,direction,y,tau");
        for k in 1..=self.p {
            out.push_str(&format!(",x{k}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}", r.pair, r.direction, r.y, r.tau));
            for v in self.covariates_of(r) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_rows [y x'β − τ exp(x'β)]`.
pub fn ctds_loglik(pairs: &StayMovePairs, design: &CtdsDesign, beta: &[f64]) -> Result<f64> {
    check_pairs(pairs, design)?;
    design.check(beta)?;
    Ok(design
        .rows
        .iter()
        .map(|r| {
            let eta = dot(design.covariates_of(r), beta);
            r.y as f64 * eta - r.tau * eta.exp()
        })
        .sum())
}

/// Gradient of [`ctds_loglik`]: `Σ_rows x (y − τ exp(x'β))`.
pub fn ctds_loglik_grad(pairs: &StayMovePairs, design: &CtdsDesign, beta: &[f64]) -> Result<Vec<f64>> {
    check_pairs(pairs, design)?;
    design.check(beta)?;
    let mut g = vec![0.0; design.p];
    for r in &design.rows {
        let x = design.covariates_of(r);
        let w = r.y as f64 - r.tau * dot(x, beta).exp();
        for (gk, xk) in g.iter_mut().zip(x) {
            *gk += w * xk;
        }
    }
    Ok(g)
}

fn check_pairs(pairs: &StayMovePairs, design: &CtdsDesign) -> Result<()> {
    if pairs.pairs.len() != design.num_pairs {
        return Err(Error::Dimension(format!(
            "{} pairs but the design was built from {}",
            pairs.pairs.len(),
            design.num_pairs
        )));
    }
    Ok(())
}

/// Per-cell move counts and exposure; evaluates the same likelihood as
/// [`ctds_loglik`] in one pass over visited cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CtdsStatistics {
    p: usize,
    x: Vec<f64>,
    moves: Vec<f64>,
    exposure: Vec<f64>,
}

impl CtdsStatistics {
    pub fn loglik(&self, beta: &[f64]) -> f64 {
        self.x
            .chunks(self.p)
            .zip(self.moves.iter().zip(&self.exposure))
            .map(|(x, (m, e))| {
                let eta = dot(x, beta);
                m * eta - e * eta.exp()
            })
            .sum()
    }

    pub fn num_groups(&self) -> usize {
        self.moves.len()
    }

    pub fn total_moves(&self) -> f64 {
        self.moves.iter().sum()
    }
}

/// Simulates competing exponential risks from `start` for `duration`.
/// `rates(cell)` gives the rate towards each of N, E, S, W; directions off
/// the raster are dropped from the risk set.
pub fn simulate_competing_risks<R, F>(
    grid: &RasterGrid,
    start: Cell,
    start_time: f64,
    duration: f64,
    rates: F,
    rng: &mut R,
) -> Result<CellPath>
where
    R: Rng + ?Sized,
    F: Fn(Cell) -> [f64; 4],
{
    if !(duration >= 0.0) || !start_time.is_finite() {
        return Err(Error::InvalidParameter(format!("duration {duration}")));
    }
    if !grid.contains_cell(start.row as i64, start.col as i64) {
        return Err(Error::InvalidParameter(format!("start cell {start:?} is off the raster")));
    }
    let end = start_time + duration;
    let mut cells = vec![start];
    let mut entries = vec![start_time];
    let mut t = start_time;
    let mut cell = start;
    loop {
        let raw = rates(cell);
        let mut lam = [0.0; 4];
        for d in Direction::ALL {
            if d.neighbor(cell, grid).is_some() {
                lam[d.index()] = raw[d.index()];
            }
        }
        if lam.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite(format!("movement rates {lam:?} in cell {cell:?}")));
        }
        let total: f64 = lam.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidParameter(format!("all movement rates are zero in cell {cell:?}")));
        }
        let wait: f64 = Exp::new(total).expect("positive rate").sample(rng);
        if t + wait > end {
            break;
        }
        t += wait;
        let mut u = rng.random::<f64>() * total;
        let mut dir = Direction::ALL[0];
        for d in Direction::ALL {
            if lam[d.index()] > 0.0 {
                dir = d;
                if u < lam[d.index()] {
                    break;
                }
                u -= lam[d.index()];
            }
        }
        cell = dir.neighbor(cell, grid).expect("allowed direction");
        cells.push(cell);
        entries.push(t);
    }
    CellPath::new(cells, entries)
}

/// CTDS path with static drivers: every allowed direction has rate
/// `exp(β₀ + x'β)` for the current cell's covariates.
pub fn simulate_ctds<R: Rng + ?Sized>(
    covariates: &[RasterGrid],
    beta: &[f64],
    start: Cell,
    start_time: f64,
    duration: f64,
    rng: &mut R,
) -> Result<CellPath> {
    let grid = check_covariates(covariates)?;
    if beta.len() != covariates.len() + 1 {
        return Err(Error::Dimension(format!(
            "β has length {} for {} covariates plus intercept",
            beta.len(),
            covariates.len()
        )));
    }
    let rate = |cell: Cell| {
        let lam = dot(&cell_covariates(covariates, cell), beta).exp();
        [lam; 4]
    };
    simulate_competing_risks(grid, start, start_time, duration, rate, rng)
}

/// Stage-one model for one individual: a pool of imputed datasets, one of
/// which is chosen at random on every iteration.
#[derive(Debug, Clone)]
pub struct CtdsModel {
    id: String,
    datasets: Vec<CtdsStatistics>,
    prior: MvnParams,
}

impl CtdsModel {
    pub fn new(id: &str, designs: &[CtdsDesign], prior: MvnParams) -> Result<Self> {
        let first = designs
            .first()
            .ok_or_else(|| Error::Data(format!("{id}: empty imputation pool")))?;
        if designs.iter().any(|d| d.p != first.p) || prior.dim() != first.p {
            return Err(Error::Dimension(format!(
                "{id}: designs and prior must all have p = {}",
                first.p
            )));
        }
        Ok(CtdsModel {
            id: id.to_string(),
            datasets: designs.iter().map(|d| d.sufficient_statistics()).collect(),
            prior,
        })
    }

    /// Builds the model from cell paths observed until `end_time`.
    pub fn from_cell_paths(
        id: &str,
        paths: &[CellPath],
        end_time: f64,
        covariates: &[RasterGrid],
        prior: MvnParams,
    ) -> Result<Self> {
        let designs = paths
            .iter()
            .map(|p| CtdsDesign::build(&extract_pairs(p, end_time)?, covariates))
            .collect::<Result<Vec<_>>>()?;
        Self::new(id, &designs, prior)
    }

    pub fn datasets(&self) -> &[CtdsStatistics] {
        &self.datasets
    }
}

impl IndividualModel for CtdsModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim_beta(&self) -> usize {
        self.prior.dim()
    }

    fn num_datasets(&self) -> usize {
        self.datasets.len()
    }

    fn log_likelihood(&self, beta: &[f64], _theta: &[f64], dataset: usize) -> f64 {
        self.datasets[dataset].loglik(beta)
    }

    fn prior(&self) -> &MvnParams {
        &self.prior
    }
}

/// Discretizes every realization of an imputation pool and builds the
/// stage-one model.
pub fn make_ctds_model(
    paths: &PathDraws,
    covariates: &[RasterGrid],
    prior: MvnParams,
    outside: Outside,
) -> Result<CtdsModel> {
    let grid = check_covariates(covariates)?;
    let end = paths.grid().end();
    let designs = (0..paths.num_paths())
        .map(|k| {
            let cp = discretize_realization(paths, k, grid, outside)?;
            CtdsDesign::build(&extract_pairs(&cp, end)?, covariates)
        })
        .collect::<Result<Vec<_>>>()?;
    CtdsModel::new(paths.individual_id(), &designs, prior)
}

/// Settings of the simulated movement study.
#[derive(Debug, Clone, PartialEq)]
pub struct CtdsScenario {
    pub grid_size: usize,
    pub cellsize: f64,
    pub individuals: usize,
    /// Expected moves per individual at the population-mean intercept.
    pub target_transitions: f64,
    /// `(intercept, elevation, distance to forest)`.
    pub mu_beta: Vec<f64>,
    pub sigma_beta_diag: Vec<f64>,
    /// Time between telemetry fixes.
    pub fix_interval: f64,
    /// Telemetry error (variances in squared cell units).
    pub error: crate::probdist::MixtureErrorParams,
}

impl Default for CtdsScenario {
    fn default() -> Self {
        CtdsScenario {
            grid_size: 60,
            cellsize: 1.0,
            individuals: 18,
            target_transitions: 450.0,
            mu_beta: vec![0.0, 0.4, -0.4],
            sigma_beta_diag: vec![0.02, 0.02, 0.02],
            fix_interval: 0.25,
            error: crate::probdist::MixtureErrorParams::new(
                0.5,
                SpdFactor::diagonal(&[0.04, 0.01]).expect("positive variances"),
                crate::probdist::DEFAULT_ROTATION_ANGLE,
            )
            .expect("valid mixture"),
        }
    }
}

impl CtdsScenario {
    /// Observation length giving `target_transitions` expected moves for an
    /// interior cell at the mean intercept and average covariates.
    pub fn duration(&self) -> f64 {
        self.target_transitions / (4.0 * self.mu_beta[0].exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtdsTruthIndividual {
    pub id: String,
    pub beta: Vec<f64>,
    pub start_time: f64,
    pub end_time: f64,
    pub transitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtdsTruth {
    pub mu_beta: Vec<f64>,
    pub sigma_beta: Vec<Vec<f64>>,
    pub individuals: Vec<CtdsTruthIndividual>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtdsDataset {
    /// Elevation-like and distance-to-forest-like surfaces, standardized.
    pub covariates: Vec<RasterGrid>,
    pub paths: Vec<CellPath>,
    pub telemetry: Vec<crate::telemetry::Track>,
    pub truth: CtdsTruth,
}

/// Standardized distance to the nearest of a few random "forest" patches.
pub fn distance_surface<R: Rng + ?Sized>(size: usize, cellsize: f64, patches: usize, rng: &mut R) -> Result<RasterGrid> {
    let extent = size as f64 * cellsize;
    let centers: Vec<(f64, f64, f64)> = (0..patches.max(1))
        .map(|_| {
            (
                rng.random::<f64>() * extent,
                rng.random::<f64>() * extent,
                extent * (0.03 + 0.07 * rng.random::<f64>()),
            )
        })
        .collect();
    let raw = RasterGrid::from_fn(size, size, 0.0, 0.0, cellsize, |x, y| {
        centers
            .iter()
            .map(|&(cx, cy, r)| (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r).max(0.0))
            .fold(f64::INFINITY, f64::min)
    })?;
    raw.standardized()
}

/// Simulates covariates, individual coefficients, true cell paths and
/// noisy telemetry at the cell centers.
pub fn simulate_ctds_scenario<R: Rng + ?Sized>(scenario: &CtdsScenario, rng: &mut R) -> Result<CtdsDataset> {
    if scenario.mu_beta.len() != 3 || scenario.sigma_beta_diag.len() != 3 {
        return Err(Error::Dimension("the scenario has two covariates, so β has length 3".into()));
    }
    if scenario.grid_size < 4 || scenario.individuals == 0 {
        return Err(Error::InvalidParameter("grid size must be at least 4 with one or more individuals".into()));
    }
    if !(scenario.fix_interval > 0.0) || !(scenario.target_transitions > 0.0) {
        return Err(Error::InvalidParameter("fix interval and target transitions must be positive".into()));
    }
    let n = scenario.grid_size;
    let elevation = crate::rsf::gaussian_blob_surface(n, scenario.cellsize, 4, rng)?;
    let forest = distance_surface(n, scenario.cellsize, 5, rng)?;
    let covariates = vec![elevation, forest];
    let population = MvnParams::new(scenario.mu_beta.clone(), SpdFactor::diagonal(&scenario.sigma_beta_diag)?)?;
    let duration = scenario.duration();
    let fixes = (duration / scenario.fix_interval).floor() as usize + 1;
    let mut paths = Vec::new();
    let mut telemetry = Vec::new();
    let mut truth = Vec::new();
    for j in 0..scenario.individuals {
        let id = format!("ctds{:02}", j + 1);
        let beta = mvn_sample(rng, &population);
        let start = Cell::new(rng.random_range(n / 4..3 * n / 4), rng.random_range(n / 4..3 * n / 4));
        let path = simulate_ctds(&covariates, &beta, start, 0.0, duration, rng)?;
        let times: Vec<f64> = (0..fixes).map(|i| i as f64 * scenario.fix_interval).collect();
        let centers: Vec<(f64, f64)> = times.iter().map(|&t| covariates[0].cell_center(path.cell_at(t))).collect();
        let (noisy, _) = crate::fmm::add_mixture_error(&centers, &scenario.error, rng);
        telemetry.push(crate::telemetry::Track {
            id: id.clone(),
            records: times
                .iter()
                .zip(noisy)
                .map(|(&t, (x, y))| crate::telemetry::TelemetryRecord {
                    id: id.clone(),
                    t,
                    x,
                    y,
                    error_class: None,
                })
                .collect(),
        });
        truth.push(CtdsTruthIndividual {
            id,
            beta,
            start_time: 0.0,
            end_time: duration,
            transitions: path.num_moves(),
        });
        paths.push(path);
    }
    let sigma_beta = (0..3)
        .map(|a| (0..3).map(|b| if a == b { scenario.sigma_beta_diag[a] } else { 0.0 }).collect())
        .collect();
    Ok(CtdsDataset {
        covariates,
        paths,
        telemetry,
        truth: CtdsTruth {
            mu_beta: scenario.mu_beta.clone(),
            sigma_beta,
            individuals: truth,
        },
    })
}

/// One row of a cell-path file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellPathRecord {
    id: String,
    row: usize,
    col: usize,
    entry_time: f64,
    end_time: f64,
}

/// A labelled cell path with the end of its observation window.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedCellPath {
    pub id: String,
    pub path: CellPath,
    pub end_time: f64,
}

/// CSV with columns `id,row,col,entry_time,end_time`, one row per visited
/// cell.
pub fn write_cell_paths(path: &Path, paths: &[ObservedCellPath]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for p in paths {
        for (c, &t) in p.path.cells.iter().zip(&p.path.entry_times) {
            writer
                .serialize(CellPathRecord {
                    id: p.id.clone(),
                    row: c.row,
                    col: c.col,
                    entry_time: t,
                    end_time: p.end_time,
                })
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Reads paths written by [`write_cell_paths`], in order of first
/// appearance.
pub fn read_cell_paths(path: &Path) -> Result<Vec<ObservedCellPath>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut groups: Vec<(String, Vec<Cell>, Vec<f64>, f64)> = Vec::new();
    for (line, rec) in reader.deserialize::<CellPathRecord>().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, format!("record {}: {e}", line + 1)))?;
        match groups.iter_mut().find(|g| g.0 == rec.id) {
            Some(g) => {
                if g.3 != rec.end_time {
                    return Err(Error::format(path, format!("{}: end_time changes at record {}", rec.id, line + 1)));
                }
                g.1.push(Cell::new(rec.row, rec.col));
                g.2.push(rec.entry_time);
            }
            None => groups.push((rec.id, vec![Cell::new(rec.row, rec.col)], vec![rec.entry_time], rec.end_time)),
        }
    }
    groups
        .into_iter()
        .map(|(id, cells, times, end_time)| {
            let cp = CellPath::new(cells, times).map_err(|e| Error::format(path, format!("{id}: {e}")))?;
            Ok(ObservedCellPath { id, path: cp, end_time })
        })
        .collect()
}

pub fn write_truth(path: &Path, truth: &CtdsTruth) -> Result<()> {
    crate::stage1::store::write_json(path, truth)
}

pub fn read_truth(path: &Path) -> Result<CtdsTruth> {
    crate::stage1::store::read_json(path)
}
