//! Densities, samplers and the Cholesky factor shared by every model.
//!
//! All densities are returned on the log scale. Covariance and precision
//! matrices are carried around as [`SpdFactor`], i.e. their lower Cholesky
//! factor, so that no density ever requires an explicit inverse.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative tolerance for the symmetry check performed before factorizing.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Lower Cholesky factor `L` of a symmetric positive-definite matrix `L L'`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactor {
    lower: DMatrix<f64>,
    log_det: f64,
}

impl SpdFactor {
    /// Factorizes `m`. Fails if `m` is not square, not finite, asymmetric
    /// beyond [`SYMMETRY_TOL`] (relative to its largest entry) or not
    /// positive definite. No regularization is ever applied.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n == 0 || m.ncols() != n {
            return Err(Error::Dimension(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix has non-finite entries".into()));
        }
        let scale = m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        let mut sym = m.clone();
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if (a - b).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotSpd(format!(
                        "asymmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
                let avg = 0.5 * (a + b);
                sym[(i, j)] = avg;
                sym[(j, i)] = avg;
            }
        }
        let chol = sym
            .cholesky()
            .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
        Self::from_lower(chol.unpack())
    }

    /// Wraps an existing lower-triangular factor. The strict upper triangle
    /// is ignored; the diagonal must be strictly positive.
    pub fn from_lower(mut lower: DMatrix<f64>) -> Result<Self> {
        let n = lower.nrows();
        if n == 0 || lower.ncols() != n {
            return Err(Error::Dimension("factor must be square and non-empty".into()));
        }
        let mut log_det = 0.0;
        for i in 0..n {
            let d = lower[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotSpd(format!("factor diagonal entry {i} is {d}")));
            }
            log_det += d.ln();
            for j in (i + 1)..n {
                lower[(i, j)] = 0.0;
            }
        }
        if lower.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("factor has non-finite entries".into()));
        }
        Ok(SpdFactor {
            lower,
            log_det: 2.0 * log_det,
        })
    }

    pub fn identity(dim: usize) -> Self {
        SpdFactor {
            lower: DMatrix::identity(dim, dim),
            log_det: 0.0,
        }
    }

    /// Diagonal matrix with the given (positive) variances.
    pub fn diagonal(values: &[f64]) -> Result<Self> {
        let sd: Vec<f64> = values.iter().map(|v| v.sqrt()).collect();
        Self::from_lower(DMatrix::from_diagonal(&DVector::from_vec(sd)))
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `log det(L L')`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Reconstructs `L L'`, exactly symmetric.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let m = &self.lower * self.lower.transpose();
        symmetrize(&m)
    }

    /// Solves `L v = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut v = b.to_vec();
        for i in 0..n {
            let mut acc = v[i];
            for k in 0..i {
                acc -= self.lower[(i, k)] * v[k];
            }
            v[i] = acc / self.lower[(i, i)];
        }
        v
    }

    /// Solves `L' v = b` by back substitution.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut v = b.to_vec();
        for i in (0..n).rev() {
            let mut acc = v[i];
            for k in (i + 1)..n {
                acc -= self.lower[(k, i)] * v[k];
            }
            v[i] = acc / self.lower[(i, i)];
        }
        v
    }

    /// Solves `(L L') v = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Factor of the inverse matrix.
    pub fn inverse(&self) -> Result<SpdFactor> {
        let n = self.dim();
        let mut inv = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        SpdFactor::from_matrix(&symmetrize(&inv))
    }

    /// Factor of `c · L L'` for `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<SpdFactor> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidParameter(format!("scale must be positive, got {c}")));
        }
        SpdFactor::from_lower(&self.lower * c.sqrt())
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = m.clone();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = avg;
            out[(j, i)] = avg;
        }
    }
    out
}

/// Multivariate normal parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnParams {
    mean: Vec<f64>,
    covariance: SpdFactor,
}

impl MvnParams {
    pub fn new(mean: Vec<f64>, covariance: SpdFactor) -> Result<Self> {
        if mean.len() != covariance.dim() {
            return Err(Error::Dimension(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                covariance.dim(),
                covariance.dim()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mean has non-finite entries".into()));
        }
        Ok(MvnParams { mean, covariance })
    }

    /// `N(mean, variance · I)`.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let cov = SpdFactor::diagonal(&vec![variance; mean.len()])?;
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &SpdFactor {
        &self.covariance
    }

    /// Log density without argument validation.
    pub(crate) fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let z = self.covariance.solve_lower(&centered);
        let quad: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * (quad + self.covariance.log_det() + d as f64 * LN_2PI)
    }
}

/// `log N(x | mean, covariance)` evaluated through the Cholesky factor.
pub fn mvn_logpdf(x: &[f64], params: &MvnParams) -> Result<f64> {
    if x.len() != params.dim() {
        return Err(Error::Dimension(format!(
            "point has length {} but distribution has dimension {}",
            x.len(),
            params.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("point has non-finite entries".into()));
    }
    Ok(params.log_density(x))
}

fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `mean + L z` with `z` standard normal.
pub fn mvn_sample<R: Rng + ?Sized>(rng: &mut R, params: &MvnParams) -> Vec<f64> {
    let z = standard_normals(rng, params.dim());
    let l = params.covariance.lower();
    params
        .mean
        .iter()
        .enumerate()
        .map(|(i, m)| m + (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>())
        .collect()
}

/// Draws from `N(mean, P⁻¹)` given the factor of the precision `P`.
pub fn mvn_sample_precision<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &[f64],
    precision: &SpdFactor,
) -> Vec<f64> {
    let z = standard_normals(rng, precision.dim());
    let v = precision.solve_upper(&z);
    mean.iter().zip(v).map(|(m, e)| m + e).collect()
}

/// Wishart distribution with scale matrix `V` and `dof` degrees of freedom;
/// `E[W] = dof · V`.
#[derive(Debug, Clone, PartialEq)]
pub struct WishartParams {
    scale: SpdFactor,
    dof: f64,
}

impl WishartParams {
    pub fn new(scale: SpdFactor, dof: f64) -> Result<Self> {
        if !dof.is_finite() || dof < scale.dim() as f64 {
            return Err(Error::InvalidParameter(format!(
                "Wishart degrees of freedom {dof} must be at least the dimension {}",
                scale.dim()
            )));
        }
        Ok(WishartParams { scale, dof })
    }

    pub fn scale(&self) -> &SpdFactor {
        &self.scale
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn dim(&self) -> usize {
        self.scale.dim()
    }
}

/// Bartlett-decomposition Wishart draw, returned as its own Cholesky factor
/// `L A` where `V = L L'` and `A` is the Bartlett lower-triangular matrix.
pub fn wishart_sample<R: Rng + ?Sized>(rng: &mut R, params: &WishartParams) -> Result<SpdFactor> {
    let d = params.dim();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(params.dof - i as f64)
            .map_err(|e| Error::InvalidParameter(format!("chi-square: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    SpdFactor::from_lower(params.scale.lower() * a)
}

/// `y log λ − λ − log y!`.
pub fn poisson_logpmf(y: u64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "Poisson rate must be positive and finite, got {lambda}"
        )));
    }
    let yf = y as f64;
    let log_term = if y == 0 { 0.0 } else { yf * lambda.ln() };
    Ok(log_term - lambda - statrs::function::factorial::ln_factorial(y))
}

/// Two-component bivariate Gaussian error: covariance `Σ` with probability
/// `p`, and the rotated `H Σ H'` with probability `1 − p`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureErrorParams {
    p: f64,
    base_cov: SpdFactor,
    rotation_angle: f64,
    rotated_cov: SpdFactor,
}

/// Rotation angle used when none is configured.
pub const DEFAULT_ROTATION_ANGLE: f64 = PI / 2.0;

impl MixtureErrorParams {
    pub fn new(p: f64, base_cov: SpdFactor, rotation_angle: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!(
                "mixture probability {p} outside [0, 1]"
            )));
        }
        if !rotation_angle.is_finite() {
            return Err(Error::NonFinite("rotation angle".into()));
        }
        let rotated_cov = rotate_cov(&base_cov, rotation_angle)?;
        Ok(MixtureErrorParams {
            p,
            base_cov,
            rotation_angle,
            rotated_cov,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn base_cov(&self) -> &SpdFactor {
        &self.base_cov
    }

    pub fn rotated_cov(&self) -> &SpdFactor {
        &self.rotated_cov
    }

    pub fn rotation_angle(&self) -> f64 {
        self.rotation_angle
    }

    pub fn with_p(&self, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!(
                "mixture probability {p} outside [0, 1]"
            )));
        }
        Ok(MixtureErrorParams { p, ..self.clone() })
    }
}

/// The 2×2 rotation `H = [[cos θ, sin θ], [−sin θ, cos θ]]`.
pub fn rotation_matrix(angle: f64) -> DMatrix<f64> {
    let (s, c) = angle.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, s, -s, c])
}

/// `H Σ H'` for a 2×2 covariance.
pub fn rotate_cov(cov: &SpdFactor, angle: f64) -> Result<SpdFactor> {
    if cov.dim() != 2 {
        return Err(Error::Dimension(format!(
            "rotation needs a 2x2 covariance, got dimension {}",
            cov.dim()
        )));
    }
    let h = rotation_matrix(angle);
    let rotated = &h * cov.to_matrix() * h.transpose();
    SpdFactor::from_matrix(&symmetrize(&rotated))
}

pub(crate) fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `log[p N(x | mean, Σ) + (1 − p) N(x | mean, H Σ H')]`.
pub fn mixture2_logpdf(x: &[f64], mean: &[f64], params: &MixtureErrorParams) -> Result<f64> {
    if x.len() != 2 || mean.len() != 2 {
        return Err(Error::Dimension("mixture error density is bivariate".into()));
    }
    let first = mvn_logpdf(x, &MvnParams::new(mean.to_vec(), params.base_cov.clone())?)?;
    let second = mvn_logpdf(x, &MvnParams::new(mean.to_vec(), params.rotated_cov.clone())?)?;
    Ok(log_sum_exp2(
        params.p.ln() + first,
        (1.0 - params.p).ln() + second,
    ))
}
