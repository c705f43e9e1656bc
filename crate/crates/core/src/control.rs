//! Feedback-linearizing tracking control and its Lyapunov-based ultimate bound.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Gain `k_c`, Hurwitz coefficients `λ_1..λ_{d−1}` and the Lyapunov weight `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub gain: f64,
    pub lambda: Vec<f64>,
    pub q: DMatrix<f64>,
}

impl ControllerConfig {
    pub fn new(gain: f64, lambda: Vec<f64>, q: DMatrix<f64>) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::Config(format!("control gain must be positive, got {gain}")));
        }
        let d = lambda.len() + 1;
        if q.nrows() != d || q.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: q.nrows(),
            });
        }
        check_spd(&q, "Q")?;
        let a = companion_matrix(&lambda, gain);
        check_hurwitz(&a)?;
        Ok(ControllerConfig { gain, lambda, q })
    }

    pub fn with_identity_q(gain: f64, lambda: Vec<f64>) -> Result<Self> {
        let d = lambda.len() + 1;
        ControllerConfig::new(gain, lambda, DMatrix::identity(d, d))
    }

    pub fn dim(&self) -> usize {
        self.lambda.len() + 1
    }

    pub fn a(&self) -> DMatrix<f64> {
        companion_matrix(&self.lambda, self.gain)
    }

    /// `ν = −k_c [λ_1 ⋯ λ_{d−1} 1] e`.
    pub fn nu(&self, e: &[f64]) -> f64 {
        let d = self.dim();
        let s: f64 = self.lambda.iter().zip(e).map(|(l, e)| l * e).sum::<f64>() + e[d - 1];
        -self.gain * s
    }
}

/// Error dynamics matrix: `[0 I]` on top, `−k_c [λ_1 ⋯ λ_{d−1} 1]` at the bottom.
pub fn companion_matrix(lambda: &[f64], gain: f64) -> DMatrix<f64> {
    let d = lambda.len() + 1;
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d - 1 {
        a[(i, i + 1)] = 1.0;
    }
    for (j, l) in lambda.iter().enumerate() {
        a[(d - 1, j)] = -gain * l;
    }
    a[(d - 1, d - 1)] = -gain;
    a
}

/// Largest real part among the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn check_hurwitz(a: &DMatrix<f64>) -> Result<()> {
    let max_real = spectral_abscissa(a);
    if max_real < 0.0 {
        Ok(())
    } else {
        Err(Error::NotHurwitz { max_real })
    }
}

fn check_spd(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-12 * m.abs().max().max(1.0) {
        return Err(Error::NotPositiveDefinite(what));
    }
    if m.clone().symmetric_eigenvalues().min() > 0.0 {
        Ok(())
    } else {
        Err(Error::NotPositiveDefinite(what))
    }
}

/// Solves `AᵀP + PA = −Q` through the vectorized system
/// `(I ⊗ Aᵀ + Aᵀ ⊗ I) vec(P) = −vec(Q)` and symmetrizes the result.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if a.ncols() != d || q.nrows() != d || q.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: q.nrows(),
        });
    }
    check_hurwitz(a)?;
    let eye = DMatrix::<f64>::identity(d, d);
    let at = a.transpose();
    let k = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DVector::from_column_slice(q.as_slice());
    let vec_p = k.lu().solve(&rhs).ok_or(Error::Singular)?;
    let p = DMatrix::from_column_slice(d, d, vec_p.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

pub fn lyapunov_residual(a: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (a.transpose() * p + p * a + q).norm()
}

/// Outcome of `‖p_d‖ < λ_min(Q) / (2 (L_f + L_μ))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainCheck {
    pub satisfied: bool,
    /// Threshold minus `‖p_d‖`; positive iff satisfied.
    pub margin: f64,
}

pub fn gain_condition(p: &DMatrix<f64>, q: &DMatrix<f64>, lipschitz_f: f64, lipschitz_mu: f64) -> GainCheck {
    let pd = last_column_norm(p);
    let lmin_q = q.clone().symmetric_eigenvalues().min();
    let threshold = lmin_q / (2.0 * (lipschitz_f + lipschitz_mu));
    let margin = threshold - pd;
    GainCheck {
        satisfied: pd < threshold,
        margin,
    }
}

fn last_column_norm(p: &DMatrix<f64>) -> f64 {
    p.column(p.ncols() - 1).norm()
}

/// `u = (−μ̂ + ν + x_ref^{(d)}) / g` with `e = x − x_ref`.
pub fn fl_control(config: &ControllerConfig, e: &[f64], mu_hat: f64, feedforward: f64, g: f64) -> Result<f64> {
    if !(g > 0.0) {
        return Err(Error::NonPositiveInputGain(g));
    }
    if e.len() != config.dim() {
        return Err(Error::DimensionMismatch {
            expected: config.dim(),
            got: e.len(),
        });
    }
    Ok((-mu_hat + config.nu(e) + feedforward) / g)
}

/// Inputs of the ultimate bound ϑ.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingBoundParams {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub lipschitz_f: f64,
    pub lipschitz_mu: f64,
    pub eta_max: f64,
}

/// `ϑ = 2‖p_d‖ √λ_max(P) η_max / ((λ_min(Q) − 2‖p_d‖(L_f + L_μ)) √λ_min(P))`.
pub fn tracking_bound(params: &TrackingBoundParams) -> Result<f64> {
    LyapunovData::from_matrices(params.p.clone(), &params.q)?.theta(
        params.eta_max,
        params.lipschitz_f,
        params.lipschitz_mu,
    )
}

/// Precomputed eigen data of `P` and `Q` for repeated bound evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovData {
    pub p: DMatrix<f64>,
    pub pd_norm: f64,
    pub lambda_min_p: f64,
    pub lambda_max_p: f64,
    pub lambda_min_q: f64,
}

impl LyapunovData {
    pub fn new(config: &ControllerConfig) -> Result<Self> {
        let p = solve_lyapunov(&config.a(), &config.q)?;
        LyapunovData::from_matrices(p, &config.q)
    }

    pub fn from_matrices(p: DMatrix<f64>, q: &DMatrix<f64>) -> Result<Self> {
        let ev = p.clone().symmetric_eigenvalues();
        let lambda_min_p = ev.min();
        if !(lambda_min_p > 0.0) {
            return Err(Error::NotPositiveDefinite("P"));
        }
        Ok(LyapunovData {
            pd_norm: last_column_norm(&p),
            lambda_min_p,
            lambda_max_p: ev.max(),
            lambda_min_q: q.clone().symmetric_eigenvalues().min(),
            p,
        })
    }

    /// Denominator factor `λ_min(Q) − 2‖p_d‖(L_f + L_μ)`.
    pub fn margin(&self, lipschitz_f: f64, lipschitz_mu: f64) -> f64 {
        self.lambda_min_q - 2.0 * self.pd_norm * (lipschitz_f + lipschitz_mu)
    }

    pub fn theta(&self, eta_max: f64, lipschitz_f: f64, lipschitz_mu: f64) -> Result<f64> {
        let margin = self.margin(lipschitz_f, lipschitz_mu);
        if !(margin > 0.0) {
            return Err(Error::GainCondition { margin });
        }
        Ok(2.0 * self.pd_norm * self.lambda_max_p.sqrt() * eta_max / (margin * self.lambda_min_p.sqrt()))
    }

    /// Lyapunov function `eᵀ P e`.
    pub fn value(&self, e: &[f64]) -> f64 {
        let v = DVector::from_column_slice(e);
        (v.transpose() * &self.p * &v)[(0, 0)]
    }
}
