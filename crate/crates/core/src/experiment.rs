//! Experiment configuration and the closed-loop simulation that wires the
//! plant, the learner, the transmission scheme and the controller together.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::active_set::{self, WindowSpec};
use crate::control::{fl_control, ControllerConfig, LyapunovData};
use crate::domain::BoxDomain;
use crate::error::{Error, Result};
use crate::gp::KernelHyper;
use crate::network::{Channel, SchemeConfig, TraceEvent, TransmissionScheme};
use crate::plant::{integrate_step, sample_measurement, PlantModel, Reference};
use crate::rng::{stream_rng, sub_seed, Stream};
use crate::tree::{ErrorBoundParams, LeafSet, LogGpTree, SigmaLipschitzScale};

/// Columns of `steps.csv`.
pub const CSV_HEADER: &str = "t,err_norm,theta,eta_ref,u,mem,cov_miss";

/// Reference points used to probe the slope of the aggregated mean.
const SLOPE_PROBES: usize = 64;
const SLOPE_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Local memory limited, data exchanged with the cloud.
    Networked,
    /// All data local, no memory limit.
    Unconstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    LogGp,
    /// No learning in the loop, `μ̂ ≡ 0`.
    Zero,
    /// The true `f`.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub model: PlantModel,
    /// Initial state minus the reference state at `t = 0`.
    pub initial_offset: Vec<f64>,
}

impl Default for PlantSection {
    fn default() -> Self {
        PlantSection {
            model: PlantModel::Desk,
            initial_offset: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSection {
    pub amplitude: f64,
    pub period: f64,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        ReferenceSection {
            amplitude: 1.0,
            period: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Default for DomainSection {
    fn default() -> Self {
        DomainSection {
            lower: vec![-1.5, -1.5],
            upper: vec![1.5, 1.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub signal_std: f64,
    pub lengthscales: Vec<f64>,
    pub noise_std: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection {
            signal_std: 1.0,
            lengthscales: vec![1.0, 3.0],
            noise_std: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSection {
    pub capacity: usize,
    pub overlap_fraction: f64,
}

impl Default for TreeSection {
    fn default() -> Self {
        TreeSection {
            capacity: 100,
            overlap_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Pairs per second.
    pub bandwidth: f64,
    pub delay: f64,
    pub memory_cap: usize,
    /// Interval length; derived as the longest `T_p/q` meeting
    /// `ΔT ≥ M̄/B + 2T_d` when absent.
    pub interval: Option<f64>,
    /// Accept intervals that violate `ΔT ≥ M̄/B + 2T_d`.
    pub override_check: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            bandwidth: 10_000.0,
            delay: 0.1,
            memory_cap: 4000,
            interval: None,
            override_check: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveSetSection {
    pub samples: usize,
    pub dt: f64,
    pub zeta: f64,
    pub delta: f64,
    pub rho: f64,
    /// Scale `L_σ` in γ by the sampling time instead of ρ.
    pub literal_tau: bool,
}

impl Default for ActiveSetSection {
    fn default() -> Self {
        ActiveSetSection {
            samples: 1000,
            dt: 0.01,
            zeta: 0.02,
            delta: 0.05,
            rho: 1e-6,
            literal_tau: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub gain: f64,
    pub lambda: Vec<f64>,
    /// Row-major Lyapunov weight; identity when absent.
    pub q: Option<Vec<Vec<f64>>>,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection {
            gain: 400.0,
            lambda: vec![1.0],
            q: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingSection {
    /// Control and integration rate in Hz.
    pub control_rate: f64,
    /// Sampling time of training data.
    pub tau: f64,
}

impl Default for TimingSection {
    fn default() -> Self {
        TimingSection {
            control_rate: 1000.0,
            tau: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    /// Defaults to one reference period.
    pub warmup: Option<f64>,
    pub mode: Mode,
    pub predictor: PredictorKind,
    /// Run the conservation audit at every boundary and compare restricted
    /// with full predictions at every control step.
    pub audit: bool,
    pub plant: PlantSection,
    pub reference: ReferenceSection,
    pub domain: DomainSection,
    pub kernel: KernelSection,
    pub tree: TreeSection,
    pub network: NetworkSection,
    pub active_set: ActiveSetSection,
    pub controller: ControllerSection,
    pub timing: TimingSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            seed: 0,
            duration: 60.0,
            warmup: None,
            mode: Mode::Networked,
            predictor: PredictorKind::LogGp,
            audit: false,
            plant: PlantSection::default(),
            reference: ReferenceSection::default(),
            domain: DomainSection::default(),
            kernel: KernelSection::default(),
            tree: TreeSection::default(),
            network: NetworkSection::default(),
            active_set: ActiveSetSection::default(),
            controller: ControllerSection::default(),
            timing: TimingSection::default(),
        }
    }
}

fn integer_ratio(a: f64, b: f64, what: &str) -> Result<u64> {
    let r = a / b;
    if r >= 1.0 - 1e-9 && (r - r.round()).abs() < 1e-6 {
        Ok(r.round() as u64)
    } else {
        Err(Error::Config(format!("{what} must be a positive integer, got {r}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn warmup(&self) -> f64 {
        self.warmup.unwrap_or(self.reference.period)
    }

    pub fn channel(&self) -> Result<Channel> {
        Channel::new(self.network.bandwidth, self.network.delay)
    }

    /// Configured `ΔT`, or the longest `T_p/q` on the sampling grid with
    /// `ΔT ≥ M̄/B + 2T_d`.
    pub fn interval(&self) -> Result<f64> {
        if let Some(dt) = self.network.interval {
            return Ok(dt);
        }
        let min = self.channel()?.min_interval(self.network.memory_cap);
        let period = self.reference.period;
        let mut q = ((period / min) + 1e-9).floor().max(1.0) as u64;
        if !self.network.override_check && period / (q as f64) + 1e-9 < min {
            return Err(Error::Config(format!(
                "no interval T_p/q reaches M̄/B + 2T_d = {min}; pass an explicit interval with the override"
            )));
        }
        while q > 1 && integer_ratio(period / q as f64, self.timing.tau, "").is_err() {
            q -= 1;
        }
        Ok(period / q as f64)
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.timing.control_rate
    }

    pub fn kernel_hyper(&self) -> Result<KernelHyper> {
        KernelHyper::new(
            self.kernel.signal_std,
            self.kernel.lengthscales.clone(),
            self.kernel.noise_std,
        )
    }

    pub fn domain(&self) -> Result<BoxDomain> {
        BoxDomain::new(self.domain.lower.clone(), self.domain.upper.clone())
    }

    pub fn reference(&self) -> Result<Reference> {
        Reference::new(self.reference.amplitude, self.reference.period, self.plant.model.dim())
    }

    pub fn controller(&self) -> Result<ControllerConfig> {
        let d = self.controller.lambda.len() + 1;
        let q = match &self.controller.q {
            None => DMatrix::identity(d, d),
            Some(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Config(format!("controller.q must be {d}x{d}")));
                }
                DMatrix::from_fn(d, d, |i, j| rows[i][j])
            }
        };
        ControllerConfig::new(self.controller.gain, self.controller.lambda.clone(), q)
    }

    pub fn error_params(&self) -> Result<ErrorBoundParams> {
        let mut p = ErrorBoundParams::new(
            self.active_set.delta,
            self.active_set.rho,
            self.domain()?,
            self.plant.model.lipschitz_f(),
        )?;
        if self.active_set.literal_tau {
            p.sigma_scale = SigmaLipschitzScale::SamplingTime(self.timing.tau);
        }
        Ok(p)
    }

    pub fn scheme_config(&self) -> Result<SchemeConfig> {
        Ok(SchemeConfig {
            channel: self.channel()?,
            memory_cap: self.network.memory_cap,
            interval: self.interval()?,
            period: self.reference.period,
            tau: self.timing.tau,
            full_intervals: 2,
        })
    }

    /// Checks every hard precondition of a run.
    pub fn validate(&self) -> Result<()> {
        self.plant.model.validate()?;
        let d = self.plant.model.dim();
        if self.controller.lambda.len() + 1 != d {
            return Err(Error::Config(format!(
                "controller.lambda needs {} entries for a {d}-state plant",
                d - 1
            )));
        }
        if !self.plant.initial_offset.is_empty() && self.plant.initial_offset.len() != d {
            return Err(Error::Config(format!("plant.initial_offset needs {d} entries")));
        }
        let hyper = self.kernel_hyper()?;
        if hyper.dim() != d {
            return Err(Error::Config(format!("kernel.lengthscales needs {d} entries")));
        }
        let domain = self.domain()?;
        if domain.dim() != d {
            return Err(Error::Config(format!("domain needs {d} bounds")));
        }
        self.controller()?;
        self.error_params()?.beta(1)?;
        if !(self.duration > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if self.active_set.samples == 0 {
            return Err(Error::Config("active_set.samples must be at least 1".into()));
        }
        if !(self.active_set.dt > 0.0) || !(self.active_set.zeta > 0.0) {
            return Err(Error::Config("active_set.dt and zeta must be positive".into()));
        }
        integer_ratio(self.timing.tau, self.step_size(), "tau * control_rate")?;
        integer_ratio(self.duration, self.step_size(), "duration * control_rate")?;
        let interval = self.interval()?;
        integer_ratio(interval, self.timing.tau, "interval / tau")?;
        integer_ratio(self.reference.period, interval, "period / interval")?;
        if self.mode == Mode::Networked && !self.network.override_check {
            let min = self.channel()?.min_interval(self.network.memory_cap);
            if interval + 1e-9 < min {
                return Err(Error::Config(format!(
                    "interval {interval} is below M̄/B + 2T_d = {min}; set network.override_check to study violations"
                )));
            }
        }
        Ok(())
    }
}

/// One logged control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRow {
    pub t: f64,
    pub err_norm: f64,
    /// Ultimate bound `ϑ(κ_t)`; infinite while the gain condition fails.
    pub theta: f64,
    /// `η(x_ref(t))` under the current model.
    pub eta_ref: f64,
    pub u: f64,
    /// Pairs held locally.
    pub mem: usize,
    /// Cumulative number of steps with a coverage miss.
    pub cov_miss: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub mode: Mode,
    pub predictor: PredictorKind,
    pub interval: f64,
    pub q: usize,
    /// Time learning stopped, `ιΔT`; `None` if it ran the whole horizon.
    pub stop_time: Option<f64>,
    pub iota: Option<usize>,
    pub mbar: usize,
    /// Interval at whose end `|𝔻_j| > M̄/2 − m̄` first held.
    pub threshold_interval: Option<usize>,
    /// Mean `‖e‖` over the last reference period.
    pub final_error: f64,
    pub max_memory: usize,
    pub coverage_misses: u64,
    /// Miss fraction over control steps after the warm-up.
    pub miss_rate: f64,
    /// Steps after the warm-up where restricted and full predictions differ
    /// (audit runs only).
    pub restricted_mismatches: u64,
    pub post_warmup_steps: u64,
    pub overflow_faults: usize,
    pub late_transfers: usize,
    pub interval_sizes: Vec<usize>,
    /// Smallest success-probability bound over all planned windows.
    pub min_success_bound: Option<f64>,
    pub leaf_count: usize,
    pub total_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub rows: Vec<StepRow>,
    /// Tracking errors `e = x − x_ref`, one row of `dim` entries per step.
    pub errors: Vec<f64>,
    pub dim: usize,
    pub summary: RunSummary,
    pub trace: Vec<TraceEvent>,
    /// Memory ledger peaks per interval, for networked runs.
    pub interval_peaks: Vec<usize>,
}

impl RunRecord {
    pub fn error(&self, k: usize) -> &[f64] {
        &self.errors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn csv(&self) -> String {
        let mut s = String::with_capacity(self.rows.len() * 48);
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.t, r.err_norm, r.theta, r.eta_ref, r.u, r.mem, r.cov_miss
            );
        }
        s
    }

    pub fn events_log(&self) -> String {
        let mut s = String::new();
        for e in &self.trace {
            let _ = writeln!(s, "{e}");
        }
        s
    }

    /// Writes `steps.csv`, `summary.json` and `events.log` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("steps.csv"), self.csv())?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)?)?;
        fs::write(dir.join("events.log"), self.events_log())?;
        Ok(())
    }
}

/// `η` along one reference period, kept as a running maximum, plus the slope
/// estimate used in the gain condition. Rebuilt from the current model at
/// every interval boundary.
struct BoundState {
    grid_dt: f64,
    prefix_max: Vec<f64>,
    lipschitz_mu: f64,
    lipschitz_f: f64,
    lyap: LyapunovData,
}

impl BoundState {
    fn refresh(&mut self, tree: &LogGpTree, reference: &Reference, params: &ErrorBoundParams) -> Result<()> {
        let mut running = 0.0f64;
        for (k, slot) in self.prefix_max.iter_mut().enumerate() {
            let x = reference.state(k as f64 * self.grid_dt);
            running = running.max(tree.error_bound(&x, params)?);
            *slot = running;
        }
        let period = reference.period;
        let mut slope = 0.0f64;
        let mut probe = vec![0.0; reference.dim];
        for k in 0..SLOPE_PROBES {
            let x = reference.state(period * k as f64 / SLOPE_PROBES as f64);
            let mut g2 = 0.0;
            for i in 0..x.len() {
                probe.copy_from_slice(&x);
                probe[i] = x[i] + SLOPE_STEP;
                let up = tree.aggregate_predict(&probe).mean;
                probe[i] = x[i] - SLOPE_STEP;
                let down = tree.aggregate_predict(&probe).mean;
                g2 += ((up - down) / (2.0 * SLOPE_STEP)).powi(2);
            }
            slope = slope.max(g2.sqrt());
        }
        self.lipschitz_mu = slope;
        Ok(())
    }

    fn kappa(&self, t: f64) -> f64 {
        let k = ((t / self.grid_dt) + 1e-9).floor().max(0.0) as usize;
        self.prefix_max[k.min(self.prefix_max.len() - 1)]
    }

    fn theta(&self, t: f64) -> f64 {
        self.lyap
            .theta(self.kappa(t), self.lipschitz_f, self.lipschitz_mu)
            .unwrap_or(f64::INFINITY)
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let plant = config.plant.model.clone();
    let dim = plant.dim();
    let reference = config.reference()?;
    let hyper = config.kernel_hyper()?;
    let domain = config.domain()?;
    let controller = config.controller()?;
    let params = config.error_params()?;
    let interval = config.interval()?;
    let h = config.step_size();
    let tau = config.timing.tau;
    let steps_per_sample = integer_ratio(tau, h, "tau * control_rate")?;
    let total_steps = integer_ratio(config.duration, h, "duration * control_rate")?;
    let q = integer_ratio(config.reference.period, interval, "period / interval")? as usize;
    let spi = integer_ratio(interval, tau, "interval / tau")?;
    let l_ref = reference.lipschitz();
    let warmup = config.warmup();
    let aset = config.active_set.clone();

    let mut tree = LogGpTree::new(
        hyper,
        config.tree.capacity,
        config.tree.overlap_fraction,
        sub_seed(config.seed, Stream::Tree),
    )?;
    let mut noise = stream_rng(config.seed, Stream::Noise);
    let active_seed = sub_seed(config.seed, Stream::ActiveSet);

    let grid_len = integer_ratio(reference.period, aset.dt, "period / active_set.dt").unwrap_or_else(|_| {
        (reference.period / aset.dt).ceil() as u64
    }) as usize;
    let mut bounds = BoundState {
        grid_dt: aset.dt,
        prefix_max: vec![0.0; grid_len.max(1)],
        lipschitz_mu: 0.0,
        lipschitz_f: plant.lipschitz_f(),
        lyap: LyapunovData::new(&controller)?,
    };
    bounds.refresh(&tree, &reference, &params)?;

    let mut scheme = match config.mode {
        Mode::Networked => Some(TransmissionScheme::new(config.scheme_config()?)?),
        Mode::Unconstrained => None,
    };

    let mut x: Vec<f64> = reference.state(0.0);
    for (xi, off) in x.iter_mut().zip(&config.plant.initial_offset) {
        *xi += off;
    }

    let n_rows = total_steps as usize + 1;
    let mut rows = Vec::with_capacity(n_rows);
    let mut errors = Vec::with_capacity(n_rows * dim);
    let mut cov_miss = 0u64;
    let mut post_warmup = 0u64;
    let mut post_warmup_misses = 0u64;
    let mut mismatches = 0u64;
    let mut min_success: Option<f64> = None;
    let mut interval_peaks = Vec::new();
    let mut peak_this_interval = 0usize;

    for k in 0..=total_steps {
        let t = k as f64 * h;

        if let Some(s) = scheme.as_mut() {
            let mut planner = |tree: &LogGpTree, w: usize, t1: f64, t2: f64| -> LeafSet {
                let window = WindowSpec {
                    t1,
                    t2,
                    dt: aset.dt,
                    samples: aset.samples,
                    zeta: aset.zeta,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(active_seed);
                rng.set_stream((w % q) as u64);
                let mut xi_max = 0.0f64;
                let set = active_set::active_models(
                    tree,
                    &window,
                    l_ref,
                    |s| reference.state(s),
                    |s| {
                        let th = bounds.theta(s);
                        xi_max = xi_max.max(active_set::compute_xi(aset.zeta, aset.dt, l_ref, th));
                        th
                    },
                    &mut rng,
                );
                let r_min = active_set::estimate_r_min(tree, &domain);
                let p = active_set::success_probability(
                    tree.leaf_count(),
                    t1,
                    t2,
                    aset.dt,
                    r_min,
                    aset.zeta,
                    xi_max,
                    aset.samples,
                    dim,
                );
                min_success = Some(min_success.map_or(p, |m: f64| m.min(p)));
                set
            };
            s.process_events(t, &tree, &mut planner);
        }

        if k > 0 && k % steps_per_sample == 0 {
            let n = k / steps_per_sample;
            let pair = sample_measurement(&plant, &x, n, tau, config.kernel.noise_std, &mut noise);
            let allowed = scheme.as_ref().is_none_or(|s| s.learning_allowed(n));
            if allowed {
                let out = tree.insert(pair)?;
                if let Some(s) = scheme.as_mut() {
                    s.record_insert(&out);
                }
            }
            let boundary = match scheme.as_mut() {
                Some(s) => s.local_step(n, &tree).is_some(),
                None => n % spi == 0,
            };
            if boundary {
                bounds.refresh(&tree, &reference, &params)?;
                if let Some(s) = scheme.as_ref() {
                    if config.audit {
                        s.audit_conservation(&tree)?;
                    }
                    interval_peaks.push(peak_this_interval);
                    peak_this_interval = s.memory().total();
                }
            }
        }

        let xr = reference.state(t);
        let (mu_hat, missed) = match config.predictor {
            PredictorKind::Zero => (0.0, false),
            PredictorKind::Exact => (plant.f(&x), false),
            PredictorKind::LogGp => match scheme.as_ref().and_then(|s| s.predictor_set()) {
                Some(set) => {
                    let r = tree.restricted_predict(&x, set);
                    if config.audit && t >= warmup && r.prediction != tree.aggregate_predict(&x) {
                        mismatches += 1;
                    }
                    (r.prediction.mean, r.coverage_miss())
                }
                None => (tree.aggregate_predict(&x).mean, false),
            },
        };
        if missed {
            cov_miss += 1;
        }
        if t >= warmup {
            post_warmup += 1;
            post_warmup_misses += u64::from(missed);
        }

        let e: Vec<f64> = x.iter().zip(&xr).map(|(a, b)| a - b).collect();
        let err_norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u = fl_control(&controller, &e, mu_hat, reference.feedforward(t), plant.g(&x))?;
        let eta_ref = tree.error_bound(&xr, &params)?;
        let mem = match scheme.as_ref() {
            Some(s) => s.memory().total(),
            None => tree.total_pairs(),
        };
        peak_this_interval = peak_this_interval.max(mem);
        rows.push(StepRow {
            t,
            err_norm,
            theta: bounds.theta(t),
            eta_ref,
            u,
            mem,
            cov_miss,
        });
        errors.extend_from_slice(&e);

        if k < total_steps {
            x = integrate_step(&plant, &x, u, h)?;
        }
    }

    let period_steps = (reference.period / h).round() as usize;
    let tail = &rows[rows.len().saturating_sub(period_steps)..];
    let final_error = tail.iter().map(|r| r.err_norm).sum::<f64>() / tail.len() as f64;

    let (stop_time, iota, mbar, threshold_interval, overflow, late, sizes, trace, max_memory) = match &scheme {
        Some(s) => (
            s.stop_time().filter(|&ts| ts <= config.duration + 1e-9),
            s.iota(),
            s.schedule().mbar,
            s.threshold_interval(),
            s.memory().overflow_faults,
            s.late_transfers(),
            s.interval_sizes().to_vec(),
            s.trace().to_vec(),
            s.memory().peak.max(rows.iter().map(|r| r.mem).max().unwrap_or(0)),
        ),
        None => (
            None,
            None,
            0,
            None,
            0,
            0,
            Vec::new(),
            Vec::new(),
            rows.iter().map(|r| r.mem).max().unwrap_or(0),
        ),
    };

    let summary = RunSummary {
        name: config.name.clone(),
        seed: config.seed,
        mode: config.mode,
        predictor: config.predictor,
        interval,
        q,
        stop_time,
        iota,
        mbar,
        threshold_interval,
        final_error,
        max_memory,
        coverage_misses: cov_miss,
        miss_rate: if post_warmup > 0 {
            post_warmup_misses as f64 / post_warmup as f64
        } else {
            0.0
        },
        restricted_mismatches: mismatches,
        post_warmup_steps: post_warmup,
        overflow_faults: overflow,
        late_transfers: late,
        interval_sizes: sizes,
        min_success_bound: min_success,
        leaf_count: tree.leaf_count(),
        total_pairs: tree.total_pairs(),
    };

    Ok(RunRecord {
        config: config.clone(),
        rows,
        errors,
        dim,
        summary,
        trace,
        interval_peaks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub stop_time: Option<f64>,
    pub final_error: f64,
    pub max_memory: usize,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub records: Vec<RunRecord>,
}

impl Comparison {
    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>10} {:>14} {:>10}\n", "scenario", "T_s [s]", "final |e|", "max mem");
        for r in &self.rows {
            let ts = r.stop_time.map_or("never".to_string(), |t| format!("{t:.2}"));
            let _ = writeln!(s, "{:<24} {:>10} {:>14.6e} {:>10}", r.name, ts, r.final_error, r.max_memory);
        }
        s
    }
}

/// Runs scenarios that share plant, reference and seed and lines up their
/// stop times, final errors and memory peaks.
pub fn compare_scenarios(configs: &[ExperimentConfig]) -> Result<Comparison> {
    if configs.len() < 2 {
        return Err(Error::Config("comparison needs at least two scenarios".into()));
    }
    let first = &configs[0];
    for c in &configs[1..] {
        if c.plant != first.plant || c.reference != first.reference {
            return Err(Error::Mismatch(format!("scenario {} uses a different plant", c.name)));
        }
        if c.seed != first.seed {
            return Err(Error::Mismatch(format!("scenario {} uses a different seed", c.name)));
        }
    }
    let records = configs.iter().map(run_experiment).collect::<Result<Vec<_>>>()?;
    let rows = records
        .iter()
        .map(|r| ComparisonRow {
            name: r.summary.name.clone(),
            stop_time: r.summary.stop_time,
            final_error: r.summary.final_error,
            max_memory: r.summary.max_memory,
        })
        .collect();
    Ok(Comparison { rows, records })
}
