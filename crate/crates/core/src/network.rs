//! Discrete-event model of the data exchange between the local memory and
//! the cloud over a channel with bandwidth `B` (pairs per second) and delay
//! `T_d`.
//!
//! Time is split into intervals `W_b = [bΔT, (b+1)ΔT)`. At every boundary the
//! local side uploads the data set of the interval that just ended, and
//! activates the data set downloaded for the interval that starts. Once an
//! upload arrives, the cloud plans the active leaves for the interval after
//! next and sends their data down.
//!
//! The model keeps one authoritative tree. Which leaves are resident locally,
//! what is in flight and what the cloud holds is tracked by leaf ids and
//! sample-index cuts; the memory ledger counts training pairs.

use std::collections::VecDeque;
use std::fmt;

use crate::error::{Error, Result};
use crate::tree::{InsertOutcome, LeafId, LeafSet, LogGpTree};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Channel {
    pub bandwidth: f64,
    pub delay: f64,
}

impl Channel {
    pub fn new(bandwidth: f64, delay: f64) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if !(delay >= 0.0 && delay.is_finite()) {
            return Err(Error::Config(format!("delay must be non-negative, got {delay}")));
        }
        Ok(Channel { bandwidth, delay })
    }

    pub fn transfer_time(&self, size: usize) -> f64 {
        transfer_time(size, self)
    }

    /// Smallest interval length with `ΔT ≥ M̄/B + 2T_d`.
    pub fn min_interval(&self, memory_cap: usize) -> f64 {
        memory_cap as f64 / self.bandwidth + 2.0 * self.delay
    }
}

/// `|𝔻|/B + T_d`.
pub fn transfer_time(size: usize, channel: &Channel) -> f64 {
    size as f64 / channel.bandwidth + channel.delay
}

/// `ι = q + min{j : |𝔻_j| > M̄/2 − m̄}`, or `None` if no interval exceeds the threshold.
pub fn stopping_index(sizes: &[usize], q: usize, memory_cap: usize, mbar: usize) -> Option<usize> {
    let threshold = memory_cap as f64 / 2.0 - mbar as f64;
    sizes.iter().position(|&s| s as f64 > threshold).map(|j| q + j)
}

/// `⌈T_p/τ⌉`, treating near-integer ratios as exact.
pub fn mbar_cap(period: f64, tau: f64) -> usize {
    let r = period / tau;
    if (r - r.round()).abs() < 1e-9 {
        r.round() as usize
    } else {
        r.ceil() as usize
    }
}

/// Running `m̄ = max_j (|𝔻_{j+q}| − |𝔻_j|)`, clamped to `[0, ⌈T_p/τ⌉]`. Until
/// `q + 1` interval sizes are known the cap itself is reported.
#[derive(Debug, Clone, PartialEq)]
pub struct MbarTracker {
    q: usize,
    cap: usize,
    history: Vec<usize>,
    best: usize,
}

impl MbarTracker {
    pub fn new(q: usize, cap: usize) -> Self {
        MbarTracker {
            q: q.max(1),
            cap,
            history: Vec::new(),
            best: 0,
        }
    }

    pub fn push(&mut self, size: usize) {
        self.history.push(size);
        let n = self.history.len();
        if n > self.q {
            let growth = size.saturating_sub(self.history[n - 1 - self.q]);
            self.best = self.best.max(growth);
        }
    }

    pub fn value(&self) -> usize {
        if self.history.len() <= self.q {
            self.cap
        } else {
            self.best.min(self.cap)
        }
    }

    pub fn history(&self) -> &[usize] {
        &self.history
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToCloud,
    ToLocal,
}

/// What a transfer carries: leaf ids (downloads only), pair count and the
/// sample-index cut the payload is consistent with.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub leaves: Vec<LeafId>,
    pub pairs: usize,
    pub cut: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferJob {
    pub direction: Direction,
    /// Interval whose data set is carried.
    pub interval: usize,
    pub manifest: Manifest,
    pub dispatch: f64,
    pub completion: f64,
    pub deadline: f64,
    /// Pairs this job occupies in the local ledger while pending.
    pub reserved: usize,
    /// Newly measured pairs carried for the first time (uploads only).
    pub fresh: usize,
}

impl TransferJob {
    pub fn is_late(&self) -> bool {
        self.completion > self.deadline + TIME_EPS
    }
}

/// Local memory split into the active set, the buffer being uploaded and the
/// buffer being downloaded.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLedger {
    pub cap: usize,
    pub current: usize,
    pub outgoing: usize,
    pub incoming: usize,
    pub peak: usize,
    pub overflow_faults: usize,
}

impl MemoryLedger {
    pub fn new(cap: usize) -> Self {
        MemoryLedger {
            cap,
            current: 0,
            outgoing: 0,
            incoming: 0,
            peak: 0,
            overflow_faults: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.current + self.outgoing + self.incoming
    }

    /// Updates the peak and records an overflow fault if the cap is exceeded.
    pub fn check(&mut self) -> bool {
        let total = self.total();
        self.peak = self.peak.max(total);
        if total > self.cap {
            self.overflow_faults += 1;
            false
        } else {
            true
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Process {
    Local,
    Cloud,
}

impl fmt::Display for Process {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Process::Local => "local",
            Process::Cloud => "cloud",
        })
    }
}

/// One line of the event trace: `time process event size`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time: f64,
    pub process: Process,
    pub event: &'static str,
    pub size: usize,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} {} {} {}", self.time, self.process, self.event, self.size)
    }
}

/// Interval length `ΔT`, periodicity `q = T_p/ΔT`, stop index `ι` and `m̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub interval: f64,
    pub index: usize,
    pub q: usize,
    pub iota: Option<usize>,
    pub mbar: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub channel: Channel,
    pub memory_cap: usize,
    pub interval: f64,
    pub period: f64,
    pub tau: f64,
    /// Leading intervals during which all data stays local.
    pub full_intervals: usize,
}

impl SchemeConfig {
    /// Integer ratio `a/b`, or an error naming `what`.
    fn ratio(a: f64, b: f64, what: &str) -> Result<u64> {
        let r = a / b;
        if r >= 1.0 - 1e-9 && (r - r.round()).abs() < 1e-6 {
            Ok(r.round() as u64)
        } else {
            Err(Error::Config(format!("{what} must be a positive integer, got {r}")))
        }
    }

    pub fn samples_per_interval(&self) -> Result<u64> {
        Self::ratio(self.interval, self.tau, "interval / tau")
    }

    pub fn q(&self) -> Result<usize> {
        Self::ratio(self.period, self.interval, "period / interval").map(|q| q as usize)
    }

    pub fn interval_fits_channel(&self) -> bool {
        self.interval + TIME_EPS >= self.channel.min_interval(self.memory_cap)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum EventKind {
    Upload(TransferJob),
    Download(TransferJob),
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    time: f64,
    seq: u64,
    kind: EventKind,
}

/// Result of an interval boundary handled by [`TransmissionScheme::local_step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Boundary {
    pub index: usize,
    /// `|𝔻_{index−1}|`, the size of the data set of the interval that ended.
    pub closed_size: usize,
}

#[derive(Debug, Clone)]
pub struct TransmissionScheme {
    cfg: SchemeConfig,
    spi: u64,
    q: usize,
    index: usize,
    full_mode: bool,
    resident: LeafSet,
    memory: MemoryLedger,
    mbar: MbarTracker,
    iota: Option<usize>,
    stop_detected_at: Option<usize>,
    events: Vec<Pending>,
    seq: u64,
    last_arrival: [f64; 2],
    plan: Option<(usize, LeafSet)>,
    download_arrived: bool,
    reserved_download: usize,
    cloud_cut: u64,
    dispatched_cut: u64,
    cloud_pairs: usize,
    in_flight: VecDeque<(u64, usize)>,
    local_new: usize,
    late_transfers: usize,
    trace: Vec<TraceEvent>,
}

impl TransmissionScheme {
    pub fn new(cfg: SchemeConfig) -> Result<Self> {
        let spi = cfg.samples_per_interval()?;
        let q = cfg.q()?;
        let cap = mbar_cap(cfg.period, cfg.tau);
        Ok(TransmissionScheme {
            memory: MemoryLedger::new(cfg.memory_cap),
            mbar: MbarTracker::new(q, cap),
            full_mode: true,
            cfg,
            spi,
            q,
            index: 0,
            resident: LeafSet::new(),
            iota: None,
            stop_detected_at: None,
            events: Vec::new(),
            seq: 0,
            last_arrival: [f64::NEG_INFINITY; 2],
            plan: None,
            download_arrived: false,
            reserved_download: 0,
            cloud_cut: 0,
            dispatched_cut: 0,
            cloud_pairs: 0,
            in_flight: VecDeque::new(),
            local_new: 0,
            late_transfers: 0,
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> ScheduleState {
        ScheduleState {
            interval: self.cfg.interval,
            index: self.index,
            q: self.q,
            iota: self.iota,
            mbar: self.mbar.value(),
        }
    }

    pub fn memory(&self) -> &MemoryLedger {
        &self.memory
    }

    pub fn interval_sizes(&self) -> &[usize] {
        self.mbar.history()
    }

    pub fn iota(&self) -> Option<usize> {
        self.iota
    }

    /// Time learning stops, `ιΔT`.
    pub fn stop_time(&self) -> Option<f64> {
        self.iota.map(|i| i as f64 * self.cfg.interval)
    }

    /// Interval at whose end the threshold `M̄/2 − m̄` was first exceeded.
    pub fn threshold_interval(&self) -> Option<usize> {
        self.stop_detected_at
    }

    pub fn late_transfers(&self) -> usize {
        self.late_transfers
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    /// Pairs the cloud holds (all pairs up to the last completed upload cut).
    pub fn cloud_pairs(&self) -> usize {
        self.cloud_pairs
    }

    pub fn cloud_cut(&self) -> u64 {
        self.cloud_cut
    }

    /// Leaves usable for prediction, or `None` while all data is local.
    pub fn predictor_set(&self) -> Option<&LeafSet> {
        (!self.full_mode).then_some(&self.resident)
    }

    /// Guard `nτ ≤ ιΔT` for the `n`-th sample.
    pub fn learning_allowed(&self, n: u64) -> bool {
        self.iota.is_none_or(|i| n <= i as u64 * self.spi)
    }

    fn log(&mut self, time: f64, process: Process, event: &'static str, size: usize) {
        self.trace.push(TraceEvent {
            time,
            process,
            event,
            size,
        });
    }

    /// Books a pair accepted into the tree.
    pub fn record_insert(&mut self, outcome: &InsertOutcome) {
        self.memory.current += 1;
        self.local_new += 1;
        if let Some(split) = outcome.split {
            if self.resident.remove(&split.parent) {
                self.resident.insert(split.left);
                self.resident.insert(split.right);
            }
        }
        self.memory.check();
    }

    fn schedule_event(&mut self, job: TransferJob, upload: bool) {
        let time = job.completion;
        let kind = if upload {
            EventKind::Upload(job)
        } else {
            EventKind::Download(job)
        };
        self.seq += 1;
        self.events.push(Pending {
            time,
            seq: self.seq,
            kind,
        });
    }

    /// Jobs in one direction share the link and complete in dispatch order.
    fn dispatch(&mut self, direction: Direction, t: f64, size: usize) -> (f64, f64) {
        let slot = direction as usize;
        let start = t.max(self.last_arrival[slot]);
        let done = start + self.cfg.channel.transfer_time(size);
        self.last_arrival[slot] = done;
        (t, done)
    }

    /// Local process at the `n`-th sampling instant, after the sample (if any)
    /// has been inserted. Handles the interval boundary when `nτ = bΔT`.
    pub fn local_step(&mut self, n: u64, tree: &LogGpTree) -> Option<Boundary> {
        if n == 0 || !n.is_multiple_of(self.spi) {
            return None;
        }
        let b = (n / self.spi) as usize;
        let t = n as f64 * self.cfg.tau;
        self.index = b;

        let closed = self.memory.current;
        self.mbar.push(closed);
        self.log(t, Process::Local, "interval_close", closed);
        if self.iota.is_none() {
            let threshold = self.cfg.memory_cap as f64 / 2.0 - self.mbar.value() as f64;
            if closed as f64 > threshold {
                self.iota = Some(self.q + b - 1);
                self.stop_detected_at = Some(b - 1);
                self.log(t, Process::Local, "stop_index", self.q + b - 1);
            }
        }

        let next_full = b < self.cfg.full_intervals;
        let upload_size = if self.full_mode { self.local_new } else { closed };
        let reserved = if next_full { 0 } else { upload_size };
        let (dispatch, completion) = self.dispatch(Direction::ToCloud, t, upload_size);
        let job = TransferJob {
            direction: Direction::ToCloud,
            interval: b - 1,
            manifest: Manifest {
                leaves: Vec::new(),
                pairs: upload_size,
                cut: n,
            },
            dispatch,
            completion,
            deadline: t + self.cfg.interval / 2.0,
            reserved,
            fresh: self.local_new,
        };
        if job.is_late() {
            self.late_transfers += 1;
            self.log(t, Process::Local, "late_upload", upload_size);
        }
        self.in_flight.push_back((n, self.local_new));
        self.local_new = 0;
        self.dispatched_cut = n;
        self.memory.outgoing += reserved;
        self.log(t, Process::Local, "upload_dispatch", upload_size);
        self.schedule_event(job, true);

        if next_full {
            self.full_mode = true;
            self.memory.current = tree.total_pairs();
        } else {
            self.full_mode = false;
            match self.plan.take() {
                Some((w, set)) if w == b => {
                    if !self.download_arrived {
                        self.late_transfers += 1;
                        self.log(t, Process::Local, "download_missing", self.reserved_download);
                    }
                    self.resident = tree.expand(&set);
                }
                other => {
                    self.plan = other;
                    self.late_transfers += 1;
                    self.log(t, Process::Local, "plan_missing", 0);
                    self.resident = tree.leaf_ids();
                }
            }
            self.memory.incoming = self.memory.incoming.saturating_sub(self.reserved_download);
            self.reserved_download = 0;
            self.download_arrived = false;
            self.memory.current = tree.pairs_in(&self.resident);
            self.log(t, Process::Local, "activate", self.memory.current);
        }
        self.memory.check();
        Some(Boundary {
            index: b,
            closed_size: closed,
        })
    }

    /// Runs every pending channel event with completion time `≤ t`, in
    /// `(time, dispatch order)` order. `planner(tree, w, t1, t2)` is the cloud's
    /// active-model computation for window `W_w = [t1, t2)`.
    pub fn process_events<P>(&mut self, t: f64, tree: &LogGpTree, planner: &mut P)
    where
        P: FnMut(&LogGpTree, usize, f64, f64) -> LeafSet,
    {
        loop {
            let next = self
                .events
                .iter()
                .enumerate()
                .filter(|(_, e)| e.time <= t + TIME_EPS)
                .min_by(|a, b| a.1.time.total_cmp(&b.1.time).then(a.1.seq.cmp(&b.1.seq)))
                .map(|(i, _)| i);
            let Some(i) = next else { break };
            let ev = self.events.remove(i);
            match ev.kind {
                EventKind::Upload(job) => self.on_upload(ev.time, job, tree, planner),
                EventKind::Download(job) => {
                    self.download_arrived = true;
                    self.log(ev.time, Process::Local, "download_complete", job.manifest.pairs);
                }
            }
        }
    }

    fn on_upload<P>(&mut self, time: f64, job: TransferJob, tree: &LogGpTree, planner: &mut P)
    where
        P: FnMut(&LogGpTree, usize, f64, f64) -> LeafSet,
    {
        if let Some((cut, fresh)) = self.in_flight.pop_front() {
            debug_assert_eq!(cut, job.manifest.cut);
            self.cloud_cut = cut;
            self.cloud_pairs += fresh;
        }
        self.memory.outgoing = self.memory.outgoing.saturating_sub(job.reserved);
        self.log(time, Process::Cloud, "upload_complete", job.manifest.pairs);

        let w = job.interval + 2;
        if w < self.cfg.full_intervals {
            return;
        }
        let t1 = w as f64 * self.cfg.interval;
        let t2 = t1 + self.cfg.interval;
        let set = planner(tree, w, t1, t2);
        let expanded = tree.expand(&set);
        let size = tree.count_pairs(&expanded, self.cfg.tau, 0..=job.manifest.cut);
        self.log(time, Process::Cloud, "active_models", expanded.len());
        let (dispatch, completion) = self.dispatch(Direction::ToLocal, time, size);
        let dl = TransferJob {
            direction: Direction::ToLocal,
            interval: w,
            manifest: Manifest {
                leaves: expanded.iter().copied().collect(),
                pairs: size,
                cut: job.manifest.cut,
            },
            dispatch,
            completion,
            deadline: t1,
            reserved: size,
            fresh: 0,
        };
        if dl.is_late() {
            self.late_transfers += 1;
            self.log(time, Process::Cloud, "late_download", size);
        }
        self.memory.incoming += size;
        self.reserved_download = size;
        self.download_arrived = false;
        self.plan = Some((w, set));
        self.memory.check();
        self.log(time, Process::Cloud, "download_dispatch", size);
        self.schedule_event(dl, false);
    }

    /// Checks that every pair in the tree sits in exactly one place by its
    /// sample index: the cloud (up to the completed cut), in flight (up to the
    /// dispatched cut) or local only.
    pub fn audit_conservation(&self, tree: &LogGpTree) -> Result<()> {
        let ids = tree.leaf_ids();
        let tau = self.cfg.tau;
        let cloud = tree.count_pairs(&ids, tau, 0..=self.cloud_cut);
        let flight = if self.dispatched_cut > self.cloud_cut {
            tree.count_pairs(&ids, tau, self.cloud_cut + 1..=self.dispatched_cut)
        } else {
            0
        };
        let local = tree.count_pairs(&ids, tau, self.dispatched_cut + 1..=u64::MAX);
        let flight_expected: usize = self.in_flight.iter().map(|&(_, f)| f).sum();
        if cloud != self.cloud_pairs || flight != flight_expected || local != self.local_new {
            return Err(Error::Mismatch(format!(
                "conservation: cloud {cloud}/{}, in flight {flight}/{flight_expected}, local {local}/{}",
                self.cloud_pairs, self.local_new
            )));
        }
        if cloud + flight + local != tree.total_pairs() {
            return Err(Error::Mismatch(format!(
                "conservation: {} pairs located, tree holds {}",
                cloud + flight + local,
                tree.total_pairs()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{KernelHyper, TrainingPair};
    use approx::assert_abs_diff_eq;

    #[test]
    fn transfer_time_cases() {
        let ch = Channel::new(50.0, 0.5).unwrap();
        assert_eq!(transfer_time(0, &ch), 0.5);
        assert_abs_diff_eq!(transfer_time(100, &ch), 2.5, epsilon = 1e-15);
        let fast = Channel::new(f64::INFINITY, 0.5).unwrap();
        assert_eq!(fast.transfer_time(10_000), 0.5);
    }

    #[test]
    fn stopping_index_cases() {
        assert_eq!(stopping_index(&[10, 20, 30], 2, 4000, 600), None);
        assert_eq!(stopping_index(&[10, 20, 30, 1500, 1600], 2, 4000, 600), Some(5));
        assert_eq!(mbar_cap(6.0, 0.01), 600);
    }

    #[test]
    fn mbar_tracker_cases() {
        let mut m = MbarTracker::new(1, 600);
        assert_eq!(m.value(), 600);
        m.push(100);
        assert_eq!(m.value(), 600);
        for k in 2..6 {
            m.push(100 * k);
        }
        assert_eq!(m.value(), 100);
        let mut flat = MbarTracker::new(2, 600);
        for _ in 0..5 {
            flat.push(50);
        }
        assert_eq!(flat.value(), 0);
        let mut big = MbarTracker::new(1, 600);
        big.push(0);
        big.push(5000);
        assert_eq!(big.value(), 600);
    }

    fn scheme(interval: f64) -> TransmissionScheme {
        TransmissionScheme::new(SchemeConfig {
            channel: Channel::new(10_000.0, 0.1).unwrap(),
            memory_cap: 4000,
            interval,
            period: 6.0,
            tau: 0.01,
            full_intervals: 2,
        })
        .unwrap()
    }

    #[test]
    fn guard_blocks_samples_after_stop() {
        let mut s = scheme(1.0);
        s.iota = Some(3);
        assert!(s.learning_allowed(300));
        assert!(!s.learning_allowed(301));
    }

    #[test]
    fn protocol_shape_and_cloud_counts() {
        let hyper = KernelHyper::new(1.0, vec![1.0, 1.0], 0.05).unwrap();
        let mut tree = LogGpTree::new(hyper, 20, 0.1, 1).unwrap();
        let mut s = scheme(1.0);
        let mut planned = Vec::new();
        let mut planner = |tree: &LogGpTree, w: usize, _t1: f64, _t2: f64| {
            planned.push(w);
            tree.leaf_ids()
        };
        for n in 1..=450u64 {
            let t = n as f64 * 0.01;
            s.process_events(t, &tree, &mut planner);
            let x = vec![(t * 0.7).sin(), (t * 0.7).cos()];
            let out = tree.insert(TrainingPair::new(x, 0.0, t)).unwrap();
            s.record_insert(&out);
            let before = s.trace().len();
            if let Some(b) = s.local_step(n, &tree) {
                let uploads = s.trace()[before..].iter().filter(|e| e.event == "upload_dispatch").count();
                assert_eq!(uploads, 1);
                assert_eq!(b.index as u64, n / 100);
            } else {
                assert_eq!(s.trace().len(), before);
            }
            s.audit_conservation(&tree).unwrap();
            if n == 150 {
                // first upload (cut at n = 100) has landed
                assert_eq!(s.cloud_pairs(), 100);
            }
            if n == 250 {
                assert_eq!(s.cloud_pairs(), 200);
            }
        }
        assert_eq!(planned, vec![2, 3, 4, 5]);
        assert_eq!(s.memory().overflow_faults, 0);
        assert_eq!(s.late_transfers(), 0);
        assert!(s.predictor_set().is_some());
    }
}
