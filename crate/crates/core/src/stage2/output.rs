//! Retained draws of a hierarchical chain and their on-disk form.
//!
//! An output directory holds `output.json` plus `mu.f64` (`K × p`),
//! `sigma_inv.f64` (`K × p × p`) and, when β draws were kept, `beta.f64`
//! (`K × J × p`), all little-endian row-major.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::stage1::store::{read_f64s, read_json, write_f64s, write_json};
use crate::{Error, Result};

pub const OUTPUT_MANIFEST: &str = "output.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Output {
    method: String,
    individual_ids: Vec<String>,
    p: usize,
    num_draws: usize,
    mu_draws: Vec<f64>,
    sigma_inv_draws: Vec<f64>,
    beta_draws: Option<Vec<f64>>,
    acceptance_rates: Vec<f64>,
    iterations: usize,
    burnin: usize,
    thin: usize,
}

impl Stage2Output {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        method: &str,
        individual_ids: Vec<String>,
        p: usize,
        mu_draws: Vec<f64>,
        sigma_inv_draws: Vec<f64>,
        beta_draws: Option<Vec<f64>>,
        acceptance_rates: Vec<f64>,
        iterations: usize,
        burnin: usize,
        thin: usize,
    ) -> Result<Self> {
        if p == 0 {
            return Err(Error::Dimension("p must be positive".into()));
        }
        if mu_draws.len() % p != 0 {
            return Err(Error::Dimension(format!(
                "{} μ values is not a multiple of p = {p}",
                mu_draws.len()
            )));
        }
        let k = mu_draws.len() / p;
        let j = individual_ids.len();
        if sigma_inv_draws.len() != k * p * p {
            return Err(Error::Dimension(format!(
                "{} precision values for {k} draws of a {p}x{p} matrix",
                sigma_inv_draws.len()
            )));
        }
        if let Some(b) = &beta_draws {
            if b.len() != k * j * p {
                return Err(Error::Dimension(format!(
                    "{} β values for {k} draws of {j} individuals",
                    b.len()
                )));
            }
        }
        if acceptance_rates.len() != j {
            return Err(Error::Dimension(format!(
                "{} acceptance rates for {j} individuals",
                acceptance_rates.len()
            )));
        }
        Ok(Stage2Output {
            method: method.to_string(),
            individual_ids,
            p,
            num_draws: k,
            mu_draws,
            sigma_inv_draws,
            beta_draws,
            acceptance_rates,
            iterations,
            burnin,
            thin,
        })
    }

    pub fn method(&self) -> &str {
        &self.method
    }

    pub fn individual_ids(&self) -> &[String] {
        &self.individual_ids
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn num_individuals(&self) -> usize {
        self.individual_ids.len()
    }

    pub fn num_draws(&self) -> usize {
        self.num_draws
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn burnin(&self) -> usize {
        self.burnin
    }

    pub fn thin(&self) -> usize {
        self.thin
    }

    /// `K × p`, row-major.
    pub fn mu_draws(&self) -> &[f64] {
        &self.mu_draws
    }

    pub fn mu_column(&self, i: usize) -> Vec<f64> {
        self.mu_draws.iter().skip(i).step_by(self.p).copied().collect()
    }

    /// `K × p × p`, row-major.
    pub fn sigma_inv_draws(&self) -> &[f64] {
        &self.sigma_inv_draws
    }

    pub fn sigma_inv(&self, k: usize) -> DMatrix<f64> {
        let pp = self.p * self.p;
        DMatrix::from_row_slice(self.p, self.p, &self.sigma_inv_draws[k * pp..(k + 1) * pp])
    }

    /// Draws of element `(a, b)` of `Σ_β⁻¹`.
    pub fn sigma_inv_column(&self, a: usize, b: usize) -> Vec<f64> {
        let pp = self.p * self.p;
        (0..self.num_draws)
            .map(|k| self.sigma_inv_draws[k * pp + a * self.p + b])
            .collect()
    }

    /// Draws of element `(a, b)` of `Σ_β` (inverting each precision draw).
    pub fn sigma_column(&self, a: usize, b: usize) -> Vec<f64> {
        (0..self.num_draws)
            .map(|k| {
                self.sigma_inv(k)
                    .try_inverse()
                    .map(|m| m[(a, b)])
                    .unwrap_or(f64::NAN)
            })
            .collect()
    }

    /// `K × J × p`, row-major, if β draws were kept.
    pub fn beta_draws(&self) -> Option<&[f64]> {
        self.beta_draws.as_deref()
    }

    /// Draws of component `i` of individual `j`.
    pub fn beta_column(&self, j: usize, i: usize) -> Option<Vec<f64>> {
        let stride = self.individual_ids.len() * self.p;
        self.beta_draws.as_ref().map(|b| {
            (0..self.num_draws)
                .map(|k| b[k * stride + j * self.p + i])
                .collect()
        })
    }

    pub fn acceptance_rates(&self) -> &[f64] {
        &self.acceptance_rates
    }

    /// Every monitored scalar with its draws: `mu_beta[i]`, the upper
    /// triangle `sigma_inv[a,b]` and, if kept, `beta[id][i]`.
    pub fn parameters(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for i in 0..self.p {
            out.push((format!("mu_beta[{i}]"), self.mu_column(i)));
        }
        for a in 0..self.p {
            for b in a..self.p {
                out.push((format!("sigma_inv[{a},{b}]"), self.sigma_inv_column(a, b)));
            }
        }
        if self.beta_draws.is_some() {
            for (j, id) in self.individual_ids.iter().enumerate() {
                for i in 0..self.p {
                    let col = self.beta_column(j, i).expect("β draws present");
                    out.push((format!("beta[{id}][{i}]"), col));
                }
            }
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct OutputManifest {
    method: String,
    individual_ids: Vec<String>,
    p: usize,
    #[serde(rename = "K")]
    k: usize,
    iterations: usize,
    burnin: usize,
    thin: usize,
    acceptance_rates: Vec<f64>,
    has_beta: bool,
}

pub fn save_output(output: &Stage2Output, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = OutputManifest {
        method: output.method.clone(),
        individual_ids: output.individual_ids.clone(),
        p: output.p,
        k: output.num_draws,
        iterations: output.iterations,
        burnin: output.burnin,
        thin: output.thin,
        acceptance_rates: output.acceptance_rates.clone(),
        has_beta: output.beta_draws.is_some(),
    };
    write_f64s(&dir.join("mu.f64"), &output.mu_draws)?;
    write_f64s(&dir.join("sigma_inv.f64"), &output.sigma_inv_draws)?;
    if let Some(b) = &output.beta_draws {
        write_f64s(&dir.join("beta.f64"), b)?;
    }
    write_json(&dir.join(OUTPUT_MANIFEST), &manifest)
}

pub fn load_output(dir: &Path) -> Result<Stage2Output> {
    let path = dir.join(OUTPUT_MANIFEST);
    let m: OutputManifest = read_json(&path)?;
    let (k, p, j) = (m.k, m.p, m.individual_ids.len());
    let mu = read_f64s(&dir.join("mu.f64"), k * p, "mu_beta")?;
    let sigma = read_f64s(&dir.join("sigma_inv.f64"), k * p * p, "sigma_inv")?;
    let beta = if m.has_beta {
        Some(read_f64s(&dir.join("beta.f64"), k * j * p, "beta")?)
    } else {
        None
    };
    Stage2Output::new(
        &m.method,
        m.individual_ids,
        p,
        mu,
        sigma,
        beta,
        m.acceptance_rates,
        m.iterations,
        m.burnin,
        m.thin,
    )
    .map_err(|e| Error::format(&path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Stage2Output {
        let k = 4;
        let mu: Vec<f64> = (0..k * 2).map(|i| i as f64 * 0.25).collect();
        let sigma: Vec<f64> = (0..k)
            .flat_map(|i| vec![2.0 + i as f64, 0.5, 0.5, 1.0])
            .collect();
        let beta: Vec<f64> = (0..k * 3 * 2).map(|i| (i as f64).sin()).collect();
        Stage2Output::new(
            "two-stage",
            vec!["a".into(), "b".into(), "c".into()],
            2,
            mu,
            sigma,
            Some(beta),
            vec![0.3, 0.4, 0.5],
            10,
            2,
            2,
        )
        .unwrap()
    }

    #[test]
    fn accessors() {
        let o = sample();
        assert_eq!(o.num_draws(), 4);
        assert_eq!(o.mu_column(1), vec![0.25, 0.75, 1.25, 1.75]);
        assert_eq!(o.sigma_inv_column(0, 0), vec![2.0, 3.0, 4.0, 5.0]);
        assert_eq!(o.sigma_inv_column(1, 0), vec![0.5; 4]);
        let s = o.sigma_column(0, 0);
        // inverse of [[2, .5], [.5, 1]] has (0,0) = 1 / 1.75
        assert!((s[0] - 1.0 / 1.75).abs() < 1e-12);
        assert_eq!(o.beta_column(2, 1).unwrap()[0], 5.0f64.sin());
        let names: Vec<String> = o.parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            &names[..5],
            ["mu_beta[0]", "mu_beta[1]", "sigma_inv[0,0]", "sigma_inv[0,1]", "sigma_inv[1,1]"]
        );
        assert_eq!(names.len(), 5 + 6);
        assert_eq!(names[5], "beta[a][0]");
    }

    #[test]
    fn shape_errors() {
        assert!(Stage2Output::new("x", vec![], 2, vec![0.0; 3], vec![], None, vec![], 1, 0, 1).is_err());
        assert!(Stage2Output::new("x", vec![], 1, vec![0.0; 2], vec![1.0], None, vec![], 1, 0, 1).is_err());
        assert!(Stage2Output::new("x", vec!["a".into()], 1, vec![0.0], vec![1.0], None, vec![], 1, 0, 1).is_err());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let o = sample();
        save_output(&o, dir.path()).unwrap();
        assert_eq!(load_output(dir.path()).unwrap(), o);
        fs::write(dir.path().join("beta.f64"), [0u8; 16]).unwrap();
        assert!(load_output(dir.path()).unwrap_err().to_string().contains("beta"));
    }
}
