//! Exact Gaussian process regression with a squared-exponential kernel.
//!
//! A [`LocalGp`] keeps the lower Cholesky factor of `K + σ_on² I` in packed
//! row-major form so that appending a training pair only adds one row
//! (O(N²)) instead of refactorizing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance floor applied before any division by a posterior variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Hyperparameters of the squared-exponential kernel plus observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub signal_std: f64,
    pub lengthscales: Vec<f64>,
    pub noise_std: f64,
}

impl KernelHyper {
    pub fn new(signal_std: f64, lengthscales: Vec<f64>, noise_std: f64) -> Result<Self> {
        let hyper = KernelHyper {
            signal_std,
            lengthscales,
            noise_std,
        };
        hyper.validate()?;
        Ok(hyper)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_std.is_finite() && self.signal_std > 0.0) {
            return Err(Error::InvalidHyper(format!(
                "signal_std must be positive, got {}",
                self.signal_std
            )));
        }
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidHyper("no lengthscales".into()));
        }
        if let Some(l) = self
            .lengthscales
            .iter()
            .find(|l| !(l.is_finite() && **l > 0.0))
        {
            return Err(Error::InvalidHyper(format!(
                "lengthscales must be positive, got {l}"
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidHyper(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_std * self.signal_std
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_std * self.noise_std
    }
}

/// `σ_f² exp(−Σ (x_i − x2_i)² / (2 l_i²))`.
pub fn se_kernel(x: &[f64], x2: &[f64], hyper: &KernelHyper) -> Result<f64> {
    let d = hyper.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    if x2.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x2.len(),
        });
    }
    let r2: f64 = x
        .iter()
        .zip(x2)
        .zip(&hyper.lengthscales)
        .map(|((a, b), l)| (a - b) * (a - b) / (2.0 * l * l))
        .sum();
    Ok(hyper.signal_var() * (-r2).exp())
}

/// Lipschitz constant of the SE kernel in one argument: `σ_f² / (min_i l_i · √e)`.
pub fn kernel_lipschitz(hyper: &KernelHyper) -> f64 {
    let lmin = hyper
        .lengthscales
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    hyper.signal_var() / (lmin * std::f64::consts::E.sqrt())
}

/// One streamed observation. `time` is the sampling instant `n τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub input: Vec<f64>,
    pub target: f64,
    pub time: f64,
}

impl TrainingPair {
    pub fn new(input: Vec<f64>, target: f64, time: f64) -> Self {
        TrainingPair {
            input,
            target,
            time,
        }
    }

    /// Sample index `n` for sampling time `tau`.
    pub fn index(&self, tau: f64) -> u64 {
        (self.time / tau).round() as u64
    }
}

/// Posterior mean and variance at a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

/// Exact GP over at most `capacity` pairs with an incrementally grown Cholesky factor.
#[derive(Debug, Clone)]
pub struct LocalGp {
    hyper: KernelHyper,
    inv_two_l2: Vec<f64>,
    capacity: usize,
    data: Vec<TrainingPair>,
    // packed lower-triangular rows: row i occupies [i(i+1)/2, i(i+1)/2 + i]
    chol: Vec<f64>,
    // L⁻¹ y, grows by one entry per update
    whitened: Vec<f64>,
    alpha: Vec<f64>,
    alpha_abs_sum: f64,
}

#[inline]
fn row_start(i: usize) -> usize {
    i * (i + 1) / 2
}

impl LocalGp {
    pub fn new(hyper: KernelHyper, capacity: usize) -> Self {
        let inv_two_l2 = hyper
            .lengthscales
            .iter()
            .map(|l| 1.0 / (2.0 * l * l))
            .collect();
        LocalGp {
            hyper,
            inv_two_l2,
            capacity,
            data: Vec::with_capacity(capacity),
            chol: Vec::with_capacity(row_start(capacity)),
            whitened: Vec::with_capacity(capacity),
            alpha: Vec::with_capacity(capacity),
            alpha_abs_sum: 0.0,
        }
    }

    pub fn from_pairs(
        hyper: KernelHyper,
        capacity: usize,
        pairs: impl IntoIterator<Item = TrainingPair>,
    ) -> Result<Self> {
        let mut gp = LocalGp::new(hyper, capacity);
        for p in pairs {
            gp.push(p)?;
        }
        Ok(gp)
    }

    pub fn hyper(&self) -> &KernelHyper {
        &self.hyper
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.data.len() >= self.capacity
    }

    pub fn pairs(&self) -> &[TrainingPair] {
        &self.data
    }

    pub fn into_pairs(self) -> Vec<TrainingPair> {
        self.data
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Row `i` of the Cholesky factor (entries `0..=i`).
    pub fn chol_row(&self, i: usize) -> &[f64] {
        let s = row_start(i);
        &self.chol[s..=s + i]
    }

    #[inline]
    fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((x, y), s) in a.iter().zip(b).zip(&self.inv_two_l2) {
            let d = x - y;
            r2 += d * d * s;
        }
        self.hyper.signal_var() * (-r2).exp()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.hyper.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.hyper.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn kernel_vector(&self, x: &[f64]) -> Vec<f64> {
        self.data.iter().map(|p| self.k(x, &p.input)).collect()
    }

    /// Solves `L c = b` in place.
    fn forward_solve(&self, b: &mut [f64]) {
        for i in 0..b.len() {
            let row = self.chol_row(i);
            let mut acc = b[i];
            for (l, c) in row[..i].iter().zip(&b[..i]) {
                acc -= l * c;
            }
            b[i] = acc / row[i];
        }
    }

    fn refresh_alpha(&mut self) {
        // α = L⁻ᵀ (L⁻¹ y), column-oriented back substitution over packed rows
        let n = self.whitened.len();
        self.alpha.clear();
        self.alpha.extend_from_slice(&self.whitened);
        for k in (0..n).rev() {
            let s = row_start(k);
            let ak = self.alpha[k] / self.chol[s + k];
            self.alpha[k] = ak;
            for i in 0..k {
                self.alpha[i] -= self.chol[s + i] * ak;
            }
        }
        self.alpha_abs_sum = self.alpha.iter().map(|a| a.abs()).sum();
    }

    /// Appends one pair by extending the Cholesky factor by a row.
    pub fn push(&mut self, pair: TrainingPair) -> Result<()> {
        if self.is_full() {
            return Err(Error::CapacityExceeded {
                capacity: self.capacity,
            });
        }
        self.check_input(&pair.input)?;
        if !pair.target.is_finite() {
            return Err(Error::NonFinite("training target"));
        }
        if pair.input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training input"));
        }

        let mut c = self.kernel_vector(&pair.input);
        self.forward_solve(&mut c);
        let kxx = self.hyper.signal_var() + self.hyper.noise_var();
        let jitter = 1e-10 * self.hyper.signal_var();
        let d2 = (kxx - c.iter().map(|v| v * v).sum::<f64>()).max(jitter);
        let d = d2.sqrt();

        let z = (pair.target - c.iter().zip(&self.whitened).map(|(a, b)| a * b).sum::<f64>()) / d;

        self.chol.extend_from_slice(&c);
        self.chol.push(d);
        self.whitened.push(z);
        self.data.push(pair);
        self.refresh_alpha();
        Ok(())
    }

    /// Posterior mean and (unclamped) variance. The empty model returns the prior.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        self.check_input(x)?;
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> Prediction {
        let prior = self.hyper.signal_var();
        if self.data.is_empty() {
            return Prediction {
                mean: 0.0,
                variance: prior,
            };
        }
        let mut kv = self.kernel_vector(x);
        let mean = kv.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        self.forward_solve(&mut kv);
        let variance = prior - kv.iter().map(|v| v * v).sum::<f64>();
        Prediction { mean, variance }
    }

    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data
            .iter()
            .zip(&self.alpha)
            .map(|(p, a)| a * self.k(x, &p.input))
            .sum()
    }

    /// Conservative Lipschitz constants `(L_μ, L_σ)` of the posterior mean and
    /// standard deviation.
    ///
    /// `L_μ = L_k Σ|α_i|`. `L_σ = √(2 L_k) (1 + 1/σ_on²) σ_f`, which is infinite
    /// for noise-free models. Both are zero for the empty model.
    pub fn lipschitz(&self) -> (f64, f64) {
        if self.data.is_empty() {
            return (0.0, 0.0);
        }
        let lk = kernel_lipschitz(&self.hyper);
        let l_mu = lk * self.alpha_abs_sum;
        let nv = self.hyper.noise_var();
        let l_sigma = if nv > 0.0 {
            (2.0 * lk).sqrt() * (1.0 + 1.0 / nv) * self.hyper.signal_std
        } else {
            f64::INFINITY
        };
        (l_mu, l_sigma)
    }
}

/// `(L_μ, L_σ)` for a model; see [`LocalGp::lipschitz`].
pub fn mean_std_lipschitz(model: &LocalGp) -> (f64, f64) {
    model.lipschitz()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hyper1() -> KernelHyper {
        KernelHyper::new(1.0, vec![1.0], 0.1).unwrap()
    }

    fn random_pairs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<TrainingPair> {
        (0..n)
            .map(|i| {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y = x.iter().map(|v| v.sin()).sum::<f64>() + 0.1 * rng.random::<f64>();
                TrainingPair::new(x, y, i as f64)
            })
            .collect()
    }

    // independent dense oracle: build K + σ²I and solve with LU
    fn dense_oracle(pairs: &[TrainingPair], hyper: &KernelHyper, x: &[f64]) -> (f64, f64) {
        let n = pairs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = se_kernel(&pairs[i].input, &pairs[j].input, hyper).unwrap();
            }
            k[(i, i)] += hyper.noise_var();
        }
        let y = DVector::from_iterator(n, pairs.iter().map(|p| p.target));
        let kx = DVector::from_iterator(
            n,
            pairs.iter().map(|p| se_kernel(x, &p.input, hyper).unwrap()),
        );
        let lu = k.lu();
        let a = lu.solve(&y).unwrap();
        let b = lu.solve(&kx).unwrap();
        (kx.dot(&a), hyper.signal_var() - kx.dot(&b))
    }

    #[test]
    fn kernel_zero_distance_is_signal_variance() {
        let h = KernelHyper::new(1.0, vec![0.7, 2.0], 0.0).unwrap();
        assert_eq!(se_kernel(&[0.3, -1.0], &[0.3, -1.0], &h).unwrap(), 1.0);
        let h2 = KernelHyper::new(2.0, vec![0.7, 2.0], 0.0).unwrap();
        assert_eq!(se_kernel(&[0.3, -1.0], &[0.3, -1.0], &h2).unwrap(), 4.0);
    }

    #[test]
    fn kernel_closed_form_value() {
        let v = se_kernel(&[0.0], &[2f64.sqrt()], &hyper1()).unwrap();
        assert_abs_diff_eq!(v, 0.367_879_441_171_442_3, epsilon = 1e-12);
    }

    #[test]
    fn kernel_symmetric_and_bounded() {
        let h = KernelHyper::new(1.3, vec![0.5, 2.0, 1.0], 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let kab = se_kernel(&a, &b, &h).unwrap();
            assert_eq!(kab, se_kernel(&b, &a, &h).unwrap());
            assert!(kab > 0.0 && kab <= 1.3 * 1.3);
        }
    }

    #[test]
    fn kernel_dimension_mismatch() {
        assert!(matches!(
            se_kernel(&[0.0, 1.0], &[0.0], &hyper1()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn kernel_lipschitz_matches_grid_search() {
        let h = KernelHyper::new(1.0, vec![1.0], 0.0).unwrap();
        let lk = kernel_lipschitz(&h);
        assert_abs_diff_eq!(lk, 0.606_530_659_712_633_4, epsilon = 1e-12);
        // |d/dr exp(-r²/2)| = r exp(-r²/2), maximized at r = 1
        let grid_max = (0..=40_000)
            .map(|i| {
                let r = i as f64 * 1e-4;
                r * (-r * r / 2.0).exp()
            })
            .fold(0.0, f64::max);
        assert_abs_diff_eq!(lk, grid_max, epsilon = 1e-8);
    }

    #[test]
    fn kernel_lipschitz_scaling_and_min_rule() {
        let base = kernel_lipschitz(&KernelHyper::new(1.0, vec![1.0], 0.0).unwrap());
        let scaled = kernel_lipschitz(&KernelHyper::new(3.0, vec![1.0], 0.0).unwrap());
        assert_abs_diff_eq!(scaled, 9.0 * base, epsilon = 1e-12);
        let aniso = kernel_lipschitz(&KernelHyper::new(1.0, vec![3.0, 1.0], 0.0).unwrap());
        assert_abs_diff_eq!(aniso, base, epsilon = 1e-15);
    }

    #[test]
    fn invalid_hyper_rejected() {
        assert!(KernelHyper::new(0.0, vec![1.0], 0.1).is_err());
        assert!(KernelHyper::new(1.0, vec![-1.0], 0.1).is_err());
        assert!(KernelHyper::new(1.0, vec![1.0], -0.1).is_err());
        assert!(KernelHyper::new(1.0, vec![], 0.1).is_err());
    }

    #[test]
    fn first_update_gives_scalar_factor() {
        let h = KernelHyper::new(1.0, vec![1.0], 0.1).unwrap();
        let mut gp = LocalGp::new(h, 10);
        gp.push(TrainingPair::new(vec![0.5], 2.0, 0.0)).unwrap();
        assert_abs_diff_eq!(gp.chol_row(0)[0], (1.0f64 + 0.01).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn empty_model_returns_prior() {
        let h = KernelHyper::new(1.5, vec![1.0], 0.1).unwrap();
        let gp = LocalGp::new(h, 10);
        let p = gp.predict(&[0.3]).unwrap();
        assert_eq!(p.mean, 0.0);
        assert_eq!(p.variance, 2.25);
        assert_eq!(gp.lipschitz(), (0.0, 0.0));
    }

    #[test]
    fn one_point_posterior() {
        let mut gp = LocalGp::new(hyper1(), 10);
        gp.push(TrainingPair::new(vec![0.0], 1.0, 0.0)).unwrap();
        let p = gp.predict(&[0.0]).unwrap();
        assert_abs_diff_eq!(p.mean, 1.0 / 1.01, epsilon = 1e-14);
        assert_abs_diff_eq!(p.variance, 1.0 - 1.0 / 1.01, epsilon = 1e-14);
    }

    #[test]
    fn one_point_lipschitz() {
        let mut gp = LocalGp::new(hyper1(), 10);
        gp.push(TrainingPair::new(vec![0.0], 1.0, 0.0)).unwrap();
        let (l_mu, _) = gp.lipschitz();
        assert_abs_diff_eq!(l_mu, 0.606_530_659_712_633_4 / 1.01, epsilon = 1e-12);
        assert_abs_diff_eq!(l_mu, 0.6005, epsilon = 1e-4);
    }

    #[test]
    fn matches_dense_oracle() {
        let h = KernelHyper::new(1.2, vec![0.8, 1.5], 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pairs = random_pairs(&mut rng, 5, 2);
        let gp = LocalGp::from_pairs(h.clone(), 10, pairs.clone()).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.5..2.5)).collect();
            let p = gp.predict(&x).unwrap();
            let (m, v) = dense_oracle(&pairs, &h, &x);
            assert_abs_diff_eq!(p.mean, m, epsilon = 1e-10);
            assert_abs_diff_eq!(p.variance, v, epsilon = 1e-10);
        }
    }

    #[test]
    fn sequential_updates_match_batch_factor() {
        let h = KernelHyper::new(1.0, vec![0.6], 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = random_pairs(&mut rng, 10, 1);
        let gp = LocalGp::from_pairs(h.clone(), 10, pairs.clone()).unwrap();
        // batch Cholesky from nalgebra on the same matrix
        let n = pairs.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            se_kernel(&pairs[i].input, &pairs[j].input, &h).unwrap()
                + if i == j { h.noise_var() } else { 0.0 }
        });
        let l = k.cholesky().unwrap().l();
        for i in 0..n {
            for j in 0..=i {
                assert_abs_diff_eq!(gp.chol_row(i)[j], l[(i, j)], epsilon = 1e-12);
            }
        }
        for _ in 0..20 {
            let x = [rng.random_range(-2.0..2.0)];
            let p = gp.predict(&x).unwrap();
            let (m, v) = dense_oracle(&pairs, &h, &x);
            assert!((p.mean - m).abs() < 1e-10);
            assert!((p.variance - v).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_non_finite_and_capacity() {
        let mut gp = LocalGp::new(hyper1(), 1);
        assert!(matches!(
            gp.push(TrainingPair::new(vec![0.0], f64::NAN, 0.0)),
            Err(Error::NonFinite(_))
        ));
        assert!(gp.is_empty());
        gp.push(TrainingPair::new(vec![0.0], 1.0, 0.0)).unwrap();
        assert!(matches!(
            gp.push(TrainingPair::new(vec![1.0], 1.0, 0.0)),
            Err(Error::CapacityExceeded { capacity: 1 })
        ));
        assert!(matches!(
            gp.push(TrainingPair::new(vec![1.0, 2.0], 1.0, 0.0)),
            Err(Error::CapacityExceeded { .. }) | Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mean_lipschitz_dominates_finite_differences() {
        let h = KernelHyper::new(1.0, vec![0.5, 1.0], 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pairs = random_pairs(&mut rng, 30, 2);
        let gp = LocalGp::from_pairs(h, 100, pairs).unwrap();
        let (l_mu, l_sigma) = gp.lipschitz();
        let mut max_mu: f64 = 0.0;
        let mut max_sd: f64 = 0.0;
        for _ in 0..1000 {
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
            let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let pa = gp.predict(&a).unwrap();
            let pb = gp.predict(&b).unwrap();
            max_mu = max_mu.max((pa.mean - pb.mean).abs() / dist);
            max_sd = max_sd
                .max((pa.variance.max(0.0).sqrt() - pb.variance.max(0.0).sqrt()).abs() / dist);
        }
        assert!(l_mu >= max_mu, "{l_mu} < {max_mu}");
        assert!(l_sigma >= max_sd, "{l_sigma} < {max_sd}");
    }

    #[test]
    fn noise_free_sigma_bound_is_infinite() {
        let h = KernelHyper::new(1.0, vec![1.0], 0.0).unwrap();
        let gp = LocalGp::from_pairs(h, 4, [TrainingPair::new(vec![0.0], 1.0, 0.0)]).unwrap();
        assert!(gp.lipschitz().1.is_infinite());
    }
}
