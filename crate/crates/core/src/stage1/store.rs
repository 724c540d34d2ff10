//! Draw-pool files.
//!
//! A pool directory holds `pool.json` (the ordered list of individuals) and,
//! per individual, a JSON manifest plus a little-endian `f64` payload laid
//! out row-major as `K × (p + q)`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::DrawMatrix;
use crate::probdist::{MvnParams, SpdFactor};
use crate::{Error, Result};

pub const POOL_INDEX: &str = "pool.json";

#[derive(Debug, Serialize, Deserialize)]
struct PoolIndex {
    individuals: Vec<PoolEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolEntry {
    individual_id: String,
    manifest: String,
    payload: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DrawManifest {
    individual_id: String,
    p: usize,
    q: usize,
    #[serde(rename = "K")]
    k: usize,
    seed: u64,
    burnin: usize,
    thin: usize,
    acceptance_rate: f64,
    prior_mean: Vec<f64>,
    prior_cov: Vec<Vec<f64>>,
    /// Lower Cholesky factor of `prior_cov`, kept so the prior reloads
    /// bit-identically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior_cov_factor: Option<Vec<Vec<f64>>>,
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], path: &Path, what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::format(path, format!("`{what}` must be a non-empty square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

pub(crate) fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads exactly `expected` little-endian doubles; `owner` names the
/// individual (or output) in error messages.
pub(crate) fn read_f64s(path: &Path, expected: usize, owner: &str) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::format(
            path,
            format!(
                "payload for `{owner}` has {} bytes, manifest implies {} ({} values)",
                bytes.len(),
                expected * 8,
                expected
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, format!("malformed manifest: {e}")))
}

/// File stem for an individual: its position plus a filesystem-safe id.
pub(crate) fn file_stem(index: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:04}_{safe}")
}

/// Writes a pool to `dir`, creating it if needed.
pub fn save_draws(pool: &[DrawMatrix], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(pool.len());
    for (i, d) in pool.iter().enumerate() {
        let stem = file_stem(i, d.individual_id());
        let manifest_name = format!("{stem}.json");
        let payload_name = format!("{stem}.f64");
        let prior = d.stage1_prior();
        let manifest = DrawManifest {
            individual_id: d.individual_id().to_string(),
            p: d.p(),
            q: d.q(),
            k: d.num_draws(),
            seed: d.seed(),
            burnin: d.burnin(),
            thin: d.thin(),
            acceptance_rate: d.acceptance_rate(),
            prior_mean: prior.mean().to_vec(),
            prior_cov: rows_of(&prior.covariance().to_matrix()),
            prior_cov_factor: Some(rows_of(prior.covariance().lower())),
        };
        write_json(&dir.join(&manifest_name), &manifest)?;
        write_f64s(&dir.join(&payload_name), d.values())?;
        entries.push(PoolEntry {
            individual_id: d.individual_id().to_string(),
            manifest: manifest_name,
            payload: payload_name,
        });
    }
    write_json(&dir.join(POOL_INDEX), &PoolIndex { individuals: entries })
}

fn load_one(dir: &Path, entry: &PoolEntry) -> Result<DrawMatrix> {
    let manifest_path: PathBuf = dir.join(&entry.manifest);
    let m: DrawManifest = read_json(&manifest_path)?;
    if m.individual_id != entry.individual_id {
        return Err(Error::format(
            &manifest_path,
            format!(
                "manifest is for `{}` but the pool index lists `{}`",
                m.individual_id, entry.individual_id
            ),
        ));
    }
    if m.prior_mean.len() != m.p {
        return Err(Error::format(
            &manifest_path,
            format!("prior_mean has length {} but p = {}", m.prior_mean.len(), m.p),
        ));
    }
    let cov = matrix_from_rows(&m.prior_cov, &manifest_path, "prior_cov")?;
    if cov.nrows() != m.p {
        return Err(Error::format(
            &manifest_path,
            format!("prior_cov is {}x{} but p = {}", cov.nrows(), cov.nrows(), m.p),
        ));
    }
    let factor = match &m.prior_cov_factor {
        Some(rows) => {
            let l = matrix_from_rows(rows, &manifest_path, "prior_cov_factor")?;
            let f = SpdFactor::from_lower(l).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
            let diff = (f.to_matrix() - &cov).abs().max();
            let scale = cov.abs().max().max(1.0);
            if f.dim() != m.p || diff > 1e-9 * scale {
                return Err(Error::format(
                    &manifest_path,
                    "prior_cov_factor is inconsistent with prior_cov",
                ));
            }
            f
        }
        None => SpdFactor::from_matrix(&cov).map_err(|e| Error::format(&manifest_path, e.to_string()))?,
    };
    let prior = MvnParams::new(m.prior_mean.clone(), factor)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let payload_path = dir.join(&entry.payload);
    let values = read_f64s(&payload_path, m.k * (m.p + m.q), &m.individual_id)?;
    DrawMatrix::new(
        m.individual_id,
        m.p,
        m.q,
        values,
        m.acceptance_rate,
        prior,
        m.seed,
        m.burnin,
        m.thin,
    )
    .map_err(|e| Error::format(&manifest_path, e.to_string()))
}

/// Reads a pool written by [`save_draws`].
pub fn load_draws(dir: &Path) -> Result<Vec<DrawMatrix>> {
    let index: PoolIndex = read_json(&dir.join(POOL_INDEX))?;
    if index.individuals.is_empty() {
        return Err(Error::format(dir.join(POOL_INDEX), "pool lists no individuals"));
    }
    index.individuals.iter().map(|e| load_one(dir, e)).collect()
}
