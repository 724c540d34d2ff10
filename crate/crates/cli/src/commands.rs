//! The pipeline steps behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use popmove::ctds::{
    self, discretize_realization, extract_pairs, make_ctds_model, read_cell_paths, CtdsDesign,
    CtdsModel, CtdsScenario, ObservedCellPath, Outside,
};
use popmove::diagnostics::{
    compare_runs, summarize_output, write_interval_csv, write_summary_csv,
};
use popmove::fmm::{self, fit_fmm, impute_paths, FmmConfig, TimeGrid};
use popmove::probdist::{MixtureErrorParams, MvnParams, SpdFactor};
use popmove::raster::RasterGrid;
use popmove::rng::{master, substream, IMPUTE_BASE};
use popmove::rsf::{self, bin_counts, make_rsf_model, PointSet, RsfDesign, RsfModel, RsfScenario};
use popmove::stage1::{load_draws, run_parallel, save_draws, ChainConfig, IndividualModel};
use popmove::stage2::{
    load_output, run_full_hierarchy, run_stage2, save_output, HierConfig, HyperPriors,
};
use popmove::telemetry::{self, group_by_id};
use popmove::{Error, Result};

use crate::config::{key, Default, Key, Kind, RunConfig};

const COMMON: &[Key] = &[
    key("seed", Kind::UInt, Default::Value("1")),
    key("workers", Kind::UInt, Default::Value("1")),
    key("out", Kind::Path, Default::Required),
];

const SIMULATE_RSF: &[Key] = &[
    key("grid_size", Kind::UInt, Default::Value("40")),
    key("cellsize", Kind::Float, Default::Value("1")),
    key("individuals", Kind::UInt, Default::Value("20")),
    key("mean_fixes", Kind::Float, Default::Value("30")),
    key("blobs", Kind::UInt, Default::Value("3")),
    key("mu_beta", Kind::FloatList, Default::Value("0,1")),
    key("sigma_beta_diag", Kind::FloatList, Default::Value("0.25,0.25")),
];

const ERROR_KEYS: &[Key] = &[
    key("error_p", Kind::Float, Default::Value("0.5")),
    key("error_var", Kind::FloatList, Default::Value("0.04,0.01")),
    key("error_angle", Kind::Float, Default::Value("1.5707963267948966")),
];

const SIMULATE_CTDS: &[Key] = &[
    key("grid_size", Kind::UInt, Default::Value("60")),
    key("cellsize", Kind::Float, Default::Value("1")),
    key("individuals", Kind::UInt, Default::Value("18")),
    key("target_transitions", Kind::Float, Default::Value("450")),
    key("mu_beta", Kind::FloatList, Default::Value("0,0.4,-0.4")),
    key("sigma_beta_diag", Kind::FloatList, Default::Value("0.02,0.02,0.02")),
    key("fix_interval", Kind::Float, Default::Value("0.25")),
];

fn iteration_keys(iterations: &'static str, burnin: &'static str) -> [Key; 3] {
    [
        key("iterations", Kind::UInt, Default::Value(iterations)),
        key("burnin", Kind::UInt, Default::Value(burnin)),
        key("thin", Kind::UInt, Default::Value("1")),
    ]
}

const IMPUTE: &[Key] = &[
    key("telemetry", Kind::Path, Default::Required),
    key("degree", Kind::UInt, Default::Value("3")),
    key("knots", Kind::FloatOrAuto, Default::Value("auto")),
    key("ridge_variance", Kind::FloatOrAuto, Default::Value("auto")),
    key("fix_p", Kind::Bool, Default::Value("false")),
    key("dt", Kind::Float, Default::Value("0.05")),
    key("paths_per_individual", Kind::UInt, Default::Value("20")),
];

const DISCRETIZE: &[Key] = &[
    key("paths", Kind::Path, Default::Required),
    key("covariates", Kind::PathList, Default::Required),
    key("outside", Kind::Choice(&["error", "nearest"]), Default::Value("error")),
];

const MODEL: &[Key] = &[
    key("model", Kind::Choice(&["rsf", "ctds"]), Default::Required),
    key("telemetry", Kind::Path, Default::Optional),
    key("covariates", Kind::PathList, Default::Required),
    key("standardize", Kind::Bool, Default::Value("false")),
    key("paths", Kind::Path, Default::Optional),
    key("cell_paths", Kind::Path, Default::Optional),
    key("outside", Kind::Choice(&["error", "nearest"]), Default::Value("error")),
    key("prior_mean", Kind::FloatList, Default::Value("0")),
    key("prior_variance", Kind::FloatList, Default::Value("100")),
];

const HYPER: &[Key] = &[
    key("mu0", Kind::FloatList, Default::Value("0")),
    key("sigma0_diag", Kind::FloatList, Default::Value("100")),
    key("nu", Kind::FloatOrAuto, Default::Value("auto")),
    key("s_diag", Kind::FloatList, Default::Value("1")),
    key("store_betas", Kind::Bool, Default::Value("true")),
];

const STAGE2: &[Key] = &[key("pool", Kind::Path, Default::Required)];

const DIAGNOSE: &[Key] = &[
    key("input", Kind::Path, Default::Required),
    key("compare", Kind::Path, Default::Optional),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SimulateRsf,
    SimulateCtds,
    ImputePaths,
    Discretize,
    FitStage1,
    FitStage2,
    FitFull,
    Diagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SimulateRsf => "simulate-rsf",
            Command::SimulateCtds => "simulate-ctds",
            Command::ImputePaths => "impute-paths",
            Command::Discretize => "discretize",
            Command::FitStage1 => "fit-stage1",
            Command::FitStage2 => "fit-stage2",
            Command::FitFull => "fit-full",
            Command::Diagnose => "diagnose",
        }
    }

    pub fn schema(self) -> Vec<Key> {
        let mut s = COMMON.to_vec();
        match self {
            Command::SimulateRsf => s.extend_from_slice(SIMULATE_RSF),
            Command::SimulateCtds => {
                s.extend_from_slice(SIMULATE_CTDS);
                s.extend_from_slice(ERROR_KEYS);
            }
            Command::ImputePaths => {
                s.extend(iteration_keys("10000", "2000"));
                s.extend_from_slice(IMPUTE);
                s.extend_from_slice(ERROR_KEYS);
            }
            Command::Discretize => s.extend_from_slice(DISCRETIZE),
            Command::FitStage1 => {
                s.extend(iteration_keys("20000", "5000"));
                s.extend_from_slice(MODEL);
            }
            Command::FitStage2 => {
                s.extend(iteration_keys("20000", "5000"));
                s.extend_from_slice(STAGE2);
                s.extend_from_slice(HYPER);
            }
            Command::FitFull => {
                s.extend(iteration_keys("20000", "5000"));
                s.extend_from_slice(MODEL);
                s.extend_from_slice(HYPER);
            }
            Command::Diagnose => s.extend_from_slice(DIAGNOSE),
        }
        s
    }

    pub fn run(self, cfg: &RunConfig) -> Result<()> {
        let out = cfg.path("out")?;
        fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
        match self {
            Command::SimulateRsf => simulate_rsf(cfg, &out),
            Command::SimulateCtds => simulate_ctds(cfg, &out),
            Command::ImputePaths => impute(cfg, &out),
            Command::Discretize => discretize(cfg, &out),
            Command::FitStage1 => fit_stage1(cfg, &out),
            Command::FitStage2 => fit_stage2(cfg, &out),
            Command::FitFull => fit_full(cfg, &out),
            Command::Diagnose => diagnose(cfg, &out),
        }?;
        cfg.write(&out)
    }
}

/// Runs `f` and logs its wall time.
fn timed<T>(phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let value = f()?;
    info!("{phase}: {:.3} s", start.elapsed().as_secs_f64());
    Ok(value)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn error_params(cfg: &RunConfig) -> Result<MixtureErrorParams> {
    let var = cfg.floats_of_len("error_var", 2)?;
    MixtureErrorParams::new(cfg.float("error_p")?, SpdFactor::diagonal(&var)?, cfg.float("error_angle")?)
}

fn simulate_rsf(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scenario = RsfScenario {
        grid_size: cfg.uint("grid_size")?,
        cellsize: cfg.float("cellsize")?,
        individuals: cfg.uint("individuals")?,
        mean_fixes: cfg.float("mean_fixes")?,
        blobs: cfg.uint("blobs")?,
        mu_beta: cfg.floats("mu_beta")?,
        sigma_beta_diag: cfg.floats("sigma_beta_diag")?,
    };
    let data = timed("simulate", || rsf::simulate_rsf_scenario(&scenario, &mut master(cfg.u64("seed")?)))?;
    data.covariate.write_ascii(&out.join("covariate.asc"))?;
    telemetry::write_csv(&out.join("telemetry.csv"), &data.records())?;
    rsf::write_truth(&out.join("truth.json"), &data.truth)?;
    info!("{} individuals, {} fixes", data.fixes.len(), data.records().len());
    Ok(())
}

fn simulate_ctds(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scenario = CtdsScenario {
        grid_size: cfg.uint("grid_size")?,
        cellsize: cfg.float("cellsize")?,
        individuals: cfg.uint("individuals")?,
        target_transitions: cfg.float("target_transitions")?,
        mu_beta: cfg.floats("mu_beta")?,
        sigma_beta_diag: cfg.floats("sigma_beta_diag")?,
        fix_interval: cfg.float("fix_interval")?,
        error: error_params(cfg)?,
    };
    let data = timed("simulate", || ctds::simulate_ctds_scenario(&scenario, &mut master(cfg.u64("seed")?)))?;
    for (name, grid) in ["elevation", "forest"].iter().zip(&data.covariates) {
        grid.write_ascii(&out.join(format!("{name}.asc")))?;
    }
    let records: Vec<_> = data.telemetry.iter().flat_map(|t| t.records.clone()).collect();
    telemetry::write_csv(&out.join("telemetry.csv"), &records)?;
    let cells: Vec<ObservedCellPath> = data
        .paths
        .iter()
        .zip(&data.truth.individuals)
        .map(|(p, t)| ObservedCellPath { id: t.id.clone(), path: p.clone(), end_time: t.end_time })
        .collect();
    ctds::write_cell_paths(&out.join("cell_paths.csv"), &cells)?;
    ctds::write_truth(&out.join("truth.json"), &data.truth)?;
    let moves: usize = data.paths.iter().map(|p| p.num_moves()).sum();
    info!("{} individuals, {moves} transitions", data.paths.len());
    Ok(())
}

fn impute(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seed = cfg.u64("seed")?;
    let mut fmm_cfg = FmmConfig::new(error_params(cfg)?);
    fmm_cfg.iterations = cfg.uint("iterations")?;
    fmm_cfg.burnin = cfg.uint("burnin")?;
    fmm_cfg.thin = cfg.uint("thin")?;
    fmm_cfg.degree = cfg.uint("degree")?;
    fmm_cfg.num_knots = match cfg.float_or_auto("knots")? {
        None => None,
        Some(k) if k >= 2.0 && k.fract() == 0.0 => Some(k as usize),
        Some(k) => return Err(Error::InvalidParameter(format!("knots must be an integer of at least 2, got {k}"))),
    };
    fmm_cfg.sigma_alpha_sq = cfg.float_or_auto("ridge_variance")?;
    fmm_cfg.fix_p = cfg.boolean("fix_p")?;
    let dt = cfg.float("dt")?;
    let m = cfg.uint("paths_per_individual")?;
    let records = telemetry::read_csv(&cfg.path("telemetry")?)?;
    let tracks = group_by_id(&records);
    let mut all = Vec::with_capacity(tracks.len());
    for (j, track) in tracks.iter().enumerate() {
        let (t0, t1) = track
            .records
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.t), hi.max(r.t)));
        let grid = TimeGrid::spanning(t0, t1, dt)?;
        let mut rng = substream(seed, IMPUTE_BASE + j as u64);
        let paths = timed(&format!("impute {}", track.id), || {
            let fit = fit_fmm(track, &fmm_cfg, &mut rng)?;
            impute_paths(&fit, &grid, m)
        })?;
        all.push(paths);
    }
    fmm::save_path_draws(&all, out)
}

fn outside(cfg: &RunConfig) -> Result<Outside> {
    Ok(match cfg.text("outside")? {
        "nearest" => Outside::Nearest,
        _ => Outside::Error,
    })
}

fn read_covariates(cfg: &RunConfig) -> Result<Vec<RasterGrid>> {
    cfg.paths("covariates")?.iter().map(|p| RasterGrid::read_ascii(p)).collect()
}

fn discretize(cfg: &RunConfig, out: &Path) -> Result<()> {
    let covariates = read_covariates(cfg)?;
    let pools = fmm::load_path_draws(&cfg.path("paths")?)?;
    let policy = outside(cfg)?;
    let mut summary = String::from("individual,path,moves,censored,rows\n");
    for (j, pool) in pools.iter().enumerate() {
        let end = pool.grid().end();
        for k in 0..pool.num_paths() {
            let cells = discretize_realization(pool, k, &covariates[0], policy)?;
            let pairs = extract_pairs(&cells, end)?;
            let design = CtdsDesign::build(&pairs, &covariates)?;
            let file = out.join(format!("{j:03}_{}.{k:03}.design.csv", pool.individual_id()));
            design.write_csv(&file)?;
            summary.push_str(&format!(
                "{},{k},{},{},{}\n",
                pool.individual_id(),
                pairs.pairs.len(),
                pairs.censored,
                design.rows().len()
            ));
        }
    }
    let path = out.join("summary.csv");
    fs::write(&path, summary).map_err(io_err(&path))
}

fn stage1_prior(cfg: &RunConfig, p: usize) -> Result<MvnParams> {
    MvnParams::new(
        cfg.floats_of_len("prior_mean", p)?,
        SpdFactor::diagonal(&cfg.floats_of_len("prior_variance", p)?)?,
    )
}

enum Models {
    Rsf(Vec<RsfModel>),
    Ctds(Vec<CtdsModel>),
}

impl Models {
    fn dim(&self) -> usize {
        match self {
            Models::Rsf(m) => m[0].dim_beta(),
            Models::Ctds(m) => m[0].dim_beta(),
        }
    }
}

fn build_models(cfg: &RunConfig) -> Result<Models> {
    let covariates = read_covariates(cfg)?;
    let p = covariates.len() + 1;
    let prior = stage1_prior(cfg, p)?;
    let models = match cfg.text("model")? {
        "rsf" => {
            if cfg.has("paths") || cfg.has("cell_paths") {
                return Err(Error::InvalidParameter("the rsf model reads `telemetry`, not paths".into()));
            }
            let records = telemetry::read_csv(&cfg.path("telemetry")?)?;
            let design = Arc::new(RsfDesign::from_rasters(&covariates, cfg.boolean("standardize")?)?);
            let models = group_by_id(&records)
                .into_iter()
                .map(|t| {
                    let points = PointSet {
                        individual_id: t.id.clone(),
                        points: t.records.iter().map(|r| (r.x, r.y)).collect(),
                    };
                    let y = bin_counts(&points, &covariates[0])?;
                    make_rsf_model(&t.id, &y, design.clone(), prior.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            Models::Rsf(models)
        }
        _ => {
            if cfg.has("telemetry") || cfg.boolean("standardize")? {
                return Err(Error::InvalidParameter(
                    "the ctds model reads `paths` or `cell_paths` and raw covariates".into(),
                ));
            }
            let models = match (cfg.optional_path("paths"), cfg.optional_path("cell_paths")) {
                (Some(dir), None) => fmm::load_path_draws(&dir)?
                    .iter()
                    .map(|pool| make_ctds_model(pool, &covariates, prior.clone(), outside(cfg)?))
                    .collect::<Result<Vec<_>>>()?,
                (None, Some(file)) => read_cell_paths(&file)?
                    .into_iter()
                    .map(|c| {
                        CtdsModel::from_cell_paths(&c.id, &[c.path], c.end_time, &covariates, prior.clone())
                    })
                    .collect::<Result<Vec<_>>>()?,
                _ => {
                    return Err(Error::InvalidParameter(
                        "the ctds model needs exactly one of `paths` and `cell_paths`".into(),
                    ))
                }
            };
            Models::Ctds(models)
        }
    };
    let empty = match &models {
        Models::Rsf(m) => m.is_empty(),
        Models::Ctds(m) => m.is_empty(),
    };
    if empty {
        return Err(Error::Data("no individuals in the input".into()));
    }
    Ok(models)
}

fn fit_stage1(cfg: &RunConfig, out: &Path) -> Result<()> {
    let models = timed("load data", || build_models(cfg))?;
    let chain = ChainConfig::new(cfg.uint("iterations")?, cfg.uint("burnin")?, cfg.uint("thin")?, cfg.u64("seed")?)?;
    let workers = cfg.uint("workers")?;
    let pools = timed("stage one", || match &models {
        Models::Rsf(m) => run_parallel(m, &chain, workers),
        Models::Ctds(m) => run_parallel(m, &chain, workers),
    })?;
    for d in &pools {
        info!("{}: acceptance {:.3}", d.individual_id(), d.acceptance_rate());
    }
    save_draws(&pools, out)
}

fn hyperpriors(cfg: &RunConfig, p: usize) -> Result<HyperPriors> {
    let mu0 = MvnParams::new(
        cfg.floats_of_len("mu0", p)?,
        SpdFactor::diagonal(&cfg.floats_of_len("sigma0_diag", p)?)?,
    )?;
    let nu = cfg.float_or_auto("nu")?.unwrap_or(p.max(3) as f64);
    HyperPriors::with_s_nu(mu0, &SpdFactor::diagonal(&cfg.floats_of_len("s_diag", p)?)?, nu)
}

fn hier_config(cfg: &RunConfig) -> Result<HierConfig> {
    Ok(HierConfig {
        iterations: cfg.uint("iterations")?,
        burnin: cfg.uint("burnin")?,
        thin: cfg.uint("thin")?,
        store_betas: cfg.boolean("store_betas")?,
        workers: cfg.uint("workers")?,
    })
}

fn fit_stage2(cfg: &RunConfig, out: &Path) -> Result<()> {
    let pools = timed("load pools", || load_draws(&cfg.path("pool")?))?;
    let p = pools.first().map(|d| d.p()).ok_or_else(|| Error::Data("the pool index lists no individuals".into()))?;
    let hyper = hyperpriors(cfg, p)?;
    let hier = hier_config(cfg)?;
    let output = timed("stage two", || run_stage2(&pools, &hyper, &hier, &mut master(cfg.u64("seed")?)))?;
    save_output(&output, out)
}

fn fit_full(cfg: &RunConfig, out: &Path) -> Result<()> {
    let models = timed("load data", || build_models(cfg))?;
    let hyper = hyperpriors(cfg, models.dim())?;
    let hier = hier_config(cfg)?;
    let mut rng = master(cfg.u64("seed")?);
    let output = timed("full hierarchy", || match &models {
        Models::Rsf(m) => run_full_hierarchy(m, &hyper, &hier, &mut rng),
        Models::Ctds(m) => run_full_hierarchy(m, &hyper, &hier, &mut rng),
    })?;
    save_output(&output, out)
}

fn diagnose(cfg: &RunConfig, out: &Path) -> Result<()> {
    let output = load_output(&cfg.path("input")?)?;
    let summaries = summarize_output(&output)?;
    write_summary_csv(&out.join("summary.csv"), &summaries)?;
    let plotted: Vec<_> = summaries
        .iter()
        .filter(|s| s.name.starts_with("mu_beta[") || s.name.starts_with("beta["))
        .cloned()
        .collect();
    write_interval_csv(&out.join("intervals.csv"), &plotted)?;
    if let Some(other) = cfg.optional_path("compare") {
        let comparison = compare_runs(&output, &load_output(&other)?)?;
        let mut text = String::from("parameter,standardized_mean_difference,interval_difference\n");
        for c in &comparison {
            text.push_str(&format!("{},{},{}\n", c.name, c.standardized_mean_difference, c.interval_difference));
        }
        let path: PathBuf = out.join("comparison.csv");
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}
