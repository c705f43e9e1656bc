//! Sampling-based identification of the leaves that may become active while
//! the state stays inside the tube around a reference segment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::domain::BoxDomain;
use crate::error::{Error, Result};
use crate::tree::{LeafSet, LogGpTree};

/// Smallest `r_min` ever reported.
pub const R_MIN_FLOOR: f64 = 1e-12;

/// Time window `[t1, t2]`, discretized with step `dt`, with `samples` draws per
/// discretization point and sampling slack `zeta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub t1: f64,
    pub t2: f64,
    pub dt: f64,
    pub samples: usize,
    pub zeta: f64,
}

impl WindowSpec {
    pub fn new(t1: f64, t2: f64, dt: f64, samples: usize, zeta: f64) -> Result<Self> {
        if !(t2 > t1) || !t1.is_finite() || !t2.is_finite() {
            return Err(Error::Config(format!("window needs t2 > t1, got [{t1}, {t2}]")));
        }
        if !(dt > 0.0 && dt <= t2 - t1 + 1e-12) {
            return Err(Error::Config(format!("window step {dt} must lie in (0, t2 - t1]")));
        }
        if !(zeta > 0.0) {
            return Err(Error::Config(format!("zeta must be positive, got {zeta}")));
        }
        Ok(WindowSpec {
            t1,
            t2,
            dt,
            samples,
            zeta,
        })
    }

    /// `⌈(t2 − t1)/Δt⌉`, robust to the rounding of exact multiples.
    pub fn steps(&self) -> usize {
        steps(self.t1, self.t2, self.dt)
    }
}

fn steps(t1: f64, t2: f64, dt: f64) -> usize {
    let r = (t2 - t1) / dt;
    let n = r.round();
    if (r - n).abs() < 1e-9 {
        n as usize
    } else {
        r.ceil() as usize
    }
}

/// Tube radius `ξ = 2ζ + L_xref Δt/2 + ϑ`.
pub fn compute_xi(zeta: f64, dt: f64, lipschitz_ref: f64, theta: f64) -> f64 {
    2.0 * zeta + lipschitz_ref * dt / 2.0 + theta
}

/// Writes a point drawn uniformly from the ball of `radius` around `center`.
pub fn sample_ball<R: Rng + ?Sized>(center: &[f64], radius: f64, rng: &mut R, out: &mut Vec<f64>) {
    out.clear();
    let mut norm2 = 0.0;
    for _ in center {
        let z: f64 = rng.sample(StandardNormal);
        norm2 += z * z;
        out.push(z);
    }
    let d = center.len() as f64;
    let u: f64 = rng.random();
    let scale = radius * u.powf(1.0 / d) / norm2.sqrt().max(f64::MIN_POSITIVE);
    for (o, c) in out.iter_mut().zip(center) {
        *o = c + *o * scale;
    }
}

/// Union of the leaves active at uniform samples from the balls `B_ξ(x_ref(t1 + jΔt))`,
/// `j = 0..=⌈(t2 − t1)/Δt⌉`, with `ξ` recomputed per `j` from `theta(t)`.
///
/// One base seed is drawn from `rng`; every `j` gets its own ChaCha stream, so
/// the union for a smaller `samples` is always a subset of the union for a
/// larger one.
pub fn active_models<F, G, R>(
    tree: &LogGpTree,
    window: &WindowSpec,
    lipschitz_ref: f64,
    mut reference: F,
    mut theta: G,
    rng: &mut R,
) -> LeafSet
where
    F: FnMut(f64) -> Vec<f64>,
    G: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    let base: u64 = rng.random();
    let mut seen = vec![false; tree.node_count()];
    let mut point = Vec::with_capacity(tree.dim());
    for j in 0..=window.steps() {
        let t = window.t1 + j as f64 * window.dt;
        let xi = compute_xi(window.zeta, window.dt, lipschitz_ref, theta(t));
        if !xi.is_finite() {
            return tree.leaf_ids();
        }
        let center = reference(t);
        let mut sub = ChaCha8Rng::seed_from_u64(base);
        sub.set_stream(j as u64);
        for _ in 0..window.samples {
            sample_ball(&center, xi, &mut sub, &mut point);
            tree.visit_active(&point, &mut |id| seen[id] = true);
        }
    }
    seen.iter()
        .enumerate()
        .filter_map(|(id, &s)| s.then_some(id))
        .collect()
}

/// Lower bound on the probability that [`active_models`] found every active
/// leaf, `1 − |𝕃| ⌈(t2 − t1)/Δt⌉ (1 − min(r_min, ζ)^d / ξ^d)^Ns`, clamped to `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn success_probability(
    leaf_count: usize,
    t1: f64,
    t2: f64,
    dt: f64,
    r_min: f64,
    zeta: f64,
    xi: f64,
    samples: usize,
    dim: usize,
) -> f64 {
    let d = dim as i32;
    let ratio = (r_min.min(zeta) / xi).powi(d).min(1.0);
    let windows = steps(t1, t2, dt) as f64;
    let miss = (1.0 - ratio).powf(samples as f64);
    (1.0 - leaf_count as f64 * windows * miss).clamp(0.0, 1.0)
}

/// Half the smallest side over all leaves of the region where the leaf has
/// weight one, intersected with `domain`.
pub fn estimate_r_min(tree: &LogGpTree, domain: &BoxDomain) -> f64 {
    let smallest = tree
        .saturated_boxes(domain)
        .into_iter()
        .flat_map(|(_, lo, hi)| lo.into_iter().zip(hi).map(|(l, h)| h - l).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min);
    (smallest / 2.0).max(R_MIN_FLOOR)
}
