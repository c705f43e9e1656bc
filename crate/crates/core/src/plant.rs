//! Canonical-form plants `ẋ_i = x_{i+1}`, `ẋ_d = f(x) + g(x) u`, periodic
//! references and noisy measurements of `f`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::TrainingPair;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantModel {
    /// Two states, `f(x) = 1 − sin x₁ + 1/(1 + e^{−x₂})`, `g ≡ 1`.
    #[default]
    Desk,
    /// Chain of integrators, `f ≡ 0`, `g ≡ 1`.
    Integrator { dim: usize },
}

impl PlantModel {
    pub fn dim(&self) -> usize {
        match self {
            PlantModel::Desk => 2,
            PlantModel::Integrator { dim } => *dim,
        }
    }

    pub fn f(&self, x: &[f64]) -> f64 {
        match self {
            PlantModel::Desk => 1.0 - x[0].sin() + 1.0 / (1.0 + (-x[1]).exp()),
            PlantModel::Integrator { .. } => 0.0,
        }
    }

    pub fn g(&self, _x: &[f64]) -> f64 {
        1.0
    }

    /// Global Lipschitz constant of `f` (2-norm): `|cos| ≤ 1` and the
    /// logistic slope is at most ¼, so 1.25 is an upper bound.
    pub fn lipschitz_f(&self) -> f64 {
        match self {
            PlantModel::Desk => 1.25,
            PlantModel::Integrator { .. } => 0.0,
        }
    }

    pub fn dynamics(&self, x: &[f64], u: f64) -> Vec<f64> {
        let d = x.len();
        let mut dx = Vec::with_capacity(d);
        dx.extend_from_slice(&x[1..]);
        dx.push(self.f(x) + self.g(x) * u);
        dx
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PlantModel::Integrator { dim } if !(1..=4).contains(dim) => {
                Err(Error::Config(format!("integrator dimension must be 1..=4, got {dim}")))
            }
            _ => Ok(()),
        }
    }
}

/// One classic Runge–Kutta step of `ẋ = field(x)`.
pub fn rk4_step<F: Fn(&[f64]) -> Vec<f64>>(field: F, x: &[f64], h: f64) -> Vec<f64> {
    let axpy = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(a, b)| a + s * b).collect() };
    let k1 = field(x);
    let k2 = field(&axpy(x, h / 2.0, &k1));
    let k3 = field(&axpy(x, h / 2.0, &k2));
    let k4 = field(&axpy(x, h, &k3));
    x.iter()
        .enumerate()
        .map(|(i, xi)| xi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Advances the plant by `h` with the input held constant.
pub fn integrate_step(plant: &PlantModel, x: &[f64], u: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    let next = rk4_step(|s| plant.dynamics(s, u), x, h);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFinite("plant state"))
    }
}

/// `x_ref(t) = a sin(ω t)` with `ω = 2π/T_p`, stacked with its first `dim − 1`
/// derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub amplitude: f64,
    pub period: f64,
    pub dim: usize,
}

impl Reference {
    pub fn new(amplitude: f64, period: f64, dim: usize) -> Result<Self> {
        if !(period > 0.0) || !amplitude.is_finite() || dim == 0 {
            return Err(Error::Config("reference needs a positive period and dimension".into()));
        }
        Ok(Reference {
            amplitude,
            period,
            dim,
        })
    }

    pub fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.period
    }

    /// `d^k/dt^k x_ref(t) = a ω^k sin(ω t + kπ/2)`, evaluated on the phase
    /// reduced modulo the period so that results repeat exactly.
    pub fn derivative(&self, k: usize, t: f64) -> f64 {
        let w = self.omega();
        let phase = t.rem_euclid(self.period) / self.period;
        let s = match k % 4 {
            0 => (2.0 * std::f64::consts::PI * phase).sin(),
            1 => (2.0 * std::f64::consts::PI * phase).cos(),
            2 => -(2.0 * std::f64::consts::PI * phase).sin(),
            _ => -(2.0 * std::f64::consts::PI * phase).cos(),
        };
        self.amplitude * w.powi(k as i32) * s
    }

    pub fn state(&self, t: f64) -> Vec<f64> {
        (0..self.dim).map(|k| self.derivative(k, t)).collect()
    }

    /// Highest derivative `d^{dim}/dt^{dim} x_ref`, the feedforward term.
    pub fn feedforward(&self, t: f64) -> f64 {
        self.derivative(self.dim, t)
    }

    /// Lipschitz constant of `t ↦ state(t)`: `|a| ω √(Σ_{k<dim} ω^{2k})`.
    pub fn lipschitz(&self) -> f64 {
        let w = self.omega();
        let s: f64 = (0..self.dim).map(|k| w.powi(2 * k as i32)).sum();
        self.amplitude.abs() * w * s.sqrt()
    }
}

/// Training pair at the `n`-th sampling instant: exact input, target `f(x) + ε`.
pub fn sample_measurement<R: Rng + ?Sized>(
    plant: &PlantModel,
    x: &[f64],
    n: u64,
    tau: f64,
    noise_std: f64,
    rng: &mut R,
) -> TrainingPair {
    let noise = if noise_std > 0.0 {
        Normal::new(0.0, noise_std).expect("positive std").sample(rng)
    } else {
        0.0
    };
    TrainingPair::new(x.to_vec(), plant.f(x) + noise, n as f64 * tau)
}
