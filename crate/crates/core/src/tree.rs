//! Locally growing random tree of Gaussian processes.
//!
//! Leaves hold small exact GPs. When a leaf reaches its capacity its data is
//! split in two by sampling memberships from a saturating ramp on one input
//! coordinate, so every input has positive weight in only a handful of leaves.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::BoxDomain;
use crate::error::{Error, Result};
use crate::gp::{KernelHyper, LocalGp, Prediction, TrainingPair, VARIANCE_FLOOR};

/// Leaf identifier: index of the leaf's node in the tree arena. Stable for the
/// lifetime of the leaf; a leaf that splits becomes an internal node and its
/// data moves to two new ids.
pub type LeafId = usize;
pub type LeafSet = BTreeSet<LeafId>;

const ROOT: usize = 0;
const MAX_SPLIT_REDRAWS: usize = 10;

/// Split node with membership probability `p(x) = clamp(½ + (x_dim − center)/overlap, 0, 1)`
/// for the right child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitNode {
    pub dim: usize,
    pub center: f64,
    pub overlap: f64,
    pub left: usize,
    pub right: usize,
}

impl SplitNode {
    #[inline]
    pub fn prob_right(&self, x: &[f64]) -> f64 {
        (0.5 + (x[self.dim] - self.center) / self.overlap).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(LocalGp),
    Split(SplitNode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitEvent {
    pub parent: LeafId,
    pub left: LeafId,
    pub right: LeafId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertOutcome {
    pub leaf: LeafId,
    pub split: Option<SplitEvent>,
}

/// Result of a prediction restricted to a candidate leaf set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestrictedPrediction {
    pub prediction: Prediction,
    /// Positive-weight leaves that were not in the candidate set.
    pub missed: usize,
}

impl RestrictedPrediction {
    pub fn coverage_miss(&self) -> bool {
        self.missed > 0
    }
}

/// How the `L_σ` term of γ is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SigmaLipschitzScale {
    /// `L_σ ρ`.
    Rho,
    /// `L_σ τ` with the given sampling time, as literally printed.
    SamplingTime(f64),
}

/// Parameters of the uniform prediction-error bound η(x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundParams {
    pub delta: f64,
    pub rho: f64,
    pub domain: BoxDomain,
    pub lipschitz_f: f64,
    pub sigma_scale: SigmaLipschitzScale,
}

impl ErrorBoundParams {
    pub fn new(delta: f64, rho: f64, domain: BoxDomain, lipschitz_f: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0,1), got {delta}")));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {rho}")));
        }
        if !(lipschitz_f >= 0.0) {
            return Err(Error::Config(format!(
                "Lipschitz constant of f must be non-negative, got {lipschitz_f}"
            )));
        }
        Ok(ErrorBoundParams {
            delta,
            rho,
            domain,
            lipschitz_f,
            sigma_scale: SigmaLipschitzScale::Rho,
        })
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// `β(δ, ρ) = 2 log(d^{d/2} |𝕃| diam_∞(Ω)^d) − 2 log(δ 2^d ρ^d)`.
    pub fn beta(&self, leaf_count: usize) -> Result<f64> {
        let d = self.dim() as f64;
        let first = d / 2.0 * d.ln() + (leaf_count as f64).ln() + d * self.domain.diam_inf().ln();
        let second = self.delta.ln() + d * 2f64.ln() + d * self.rho.ln();
        let beta = 2.0 * first - 2.0 * second;
        if beta > 0.0 && beta.is_finite() {
            Ok(beta)
        } else {
            Err(Error::NonPositiveBeta { beta })
        }
    }

    fn sigma_factor(&self) -> f64 {
        match self.sigma_scale {
            SigmaLipschitzScale::Rho => self.rho,
            SigmaLipschitzScale::SamplingTime(tau) => tau,
        }
    }
}

/// Self-describing snapshot of a tree: split parameters, leaf datasets and
/// the splitting RNG position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub hyper: KernelHyper,
    pub capacity: usize,
    pub overlap_fraction: f64,
    pub seed: u64,
    pub rng_word_pos: u128,
    pub nodes: Vec<SnapshotNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SnapshotNode {
    Leaf { pairs: Vec<TrainingPair> },
    Split(SplitNode),
}

#[derive(Debug, Clone)]
pub struct LogGpTree {
    hyper: KernelHyper,
    capacity: usize,
    overlap_fraction: f64,
    nodes: Vec<Node>,
    leaf_count: usize,
    total_pairs: usize,
    seed: u64,
    rng: ChaCha8Rng,
}

impl LogGpTree {
    pub fn new(hyper: KernelHyper, capacity: usize, overlap_fraction: f64, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if capacity < 2 {
            return Err(Error::Config(format!("leaf capacity must be at least 2, got {capacity}")));
        }
        if !(overlap_fraction > 0.0 && overlap_fraction.is_finite()) {
            return Err(Error::Config(format!(
                "overlap fraction must be positive, got {overlap_fraction}"
            )));
        }
        let root = LocalGp::new(hyper.clone(), capacity);
        Ok(LogGpTree {
            hyper,
            capacity,
            overlap_fraction,
            nodes: vec![Node::Leaf(root)],
            leaf_count: 1,
            total_pairs: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn hyper(&self) -> &KernelHyper {
        &self.hyper
    }

    pub fn dim(&self) -> usize {
        self.hyper.dim()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn total_pairs(&self) -> usize {
        self.total_pairs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn leaf(&self, id: LeafId) -> Option<&LocalGp> {
        match self.nodes.get(id) {
            Some(Node::Leaf(gp)) => Some(gp),
            _ => None,
        }
    }

    pub fn is_leaf(&self, id: LeafId) -> bool {
        self.leaf(id).is_some()
    }

    pub fn split_node(&self, id: usize) -> Option<&SplitNode> {
        match self.nodes.get(id) {
            Some(Node::Split(s)) => Some(s),
            _ => None,
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = (LeafId, &LocalGp)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n {
            Node::Leaf(gp) => Some((i, gp)),
            Node::Split(_) => None,
        })
    }

    pub fn leaf_ids(&self) -> LeafSet {
        self.leaves().map(|(i, _)| i).collect()
    }

    /// Current leaves below node `id` (the node itself if it is still a leaf).
    pub fn descendant_leaves(&self, id: usize, out: &mut Vec<LeafId>) {
        match self.nodes.get(id) {
            Some(Node::Leaf(_)) => out.push(id),
            Some(Node::Split(s)) => {
                let (l, r) = (s.left, s.right);
                self.descendant_leaves(l, out);
                self.descendant_leaves(r, out);
            }
            None => {}
        }
    }

    /// Replaces every id in `ids` by its current descendant leaves.
    pub fn expand(&self, ids: &LeafSet) -> LeafSet {
        let mut buf = Vec::new();
        for &id in ids {
            self.descendant_leaves(id, &mut buf);
        }
        buf.into_iter().collect()
    }

    /// Streams one pair into the tree using the tree's own splitting RNG.
    pub fn insert(&mut self, pair: TrainingPair) -> Result<InsertOutcome> {
        let mut rng = self.rng.clone();
        let leaf = self.assign_and_update(pair, &mut rng)?;
        let split = self.maybe_split(leaf, &mut rng);
        self.rng = rng;
        Ok(InsertOutcome { leaf, split })
    }

    /// Routes `pair` to one leaf by sampling a child at every split node on
    /// the way down, then appends it to that leaf's GP.
    pub fn assign_and_update<R: Rng + ?Sized>(
        &mut self,
        pair: TrainingPair,
        rng: &mut R,
    ) -> Result<LeafId> {
        if pair.input.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: pair.input.len(),
            });
        }
        let mut id = ROOT;
        loop {
            match &self.nodes[id] {
                Node::Leaf(_) => break,
                Node::Split(s) => {
                    let p = s.prob_right(&pair.input);
                    let right = if p >= 1.0 {
                        true
                    } else if p <= 0.0 {
                        false
                    } else {
                        rng.random::<f64>() < p
                    };
                    id = if right { s.right } else { s.left };
                }
            }
        }
        match &mut self.nodes[id] {
            Node::Leaf(gp) => gp.push(pair)?,
            Node::Split(_) => unreachable!(),
        }
        self.total_pairs += 1;
        Ok(id)
    }

    /// Splits `leaf` if it has reached capacity.
    pub fn maybe_split<R: Rng + ?Sized>(&mut self, leaf: LeafId, rng: &mut R) -> Option<SplitEvent> {
        let full = self.leaf(leaf).is_some_and(|gp| gp.is_full());
        if !full {
            return None;
        }
        let placeholder = Node::Split(SplitNode {
            dim: 0,
            center: 0.0,
            overlap: 1.0,
            left: 0,
            right: 0,
        });
        let pairs = match std::mem::replace(&mut self.nodes[leaf], placeholder) {
            Node::Leaf(gp) => gp.into_pairs(),
            Node::Split(_) => unreachable!(),
        };

        let (dim, center, spread) = split_geometry(&pairs, self.dim());
        let overlap = (self.overlap_fraction * spread).max(1e-12);
        let mut split = SplitNode {
            dim,
            center,
            overlap,
            left: self.nodes.len(),
            right: self.nodes.len() + 1,
        };

        let members = sample_memberships(&pairs, &split, rng);
        let (left, right): (Vec<_>, Vec<_>) = pairs
            .into_iter()
            .zip(members)
            .partition(|(_, goes_right)| !goes_right);
        let left: Vec<TrainingPair> = left.into_iter().map(|(p, _)| p).collect();
        let right: Vec<TrainingPair> = right.into_iter().map(|(p, _)| p).collect();

        let build = |pairs: Vec<TrainingPair>| {
            LocalGp::from_pairs(self.hyper.clone(), self.capacity, pairs)
                .expect("re-inserting validated pairs below capacity")
        };
        let left_gp = build(left);
        let right_gp = build(right);
        split.left = self.nodes.len();
        split.right = self.nodes.len() + 1;
        let event = SplitEvent {
            parent: leaf,
            left: split.left,
            right: split.right,
        };
        self.nodes[leaf] = Node::Split(split);
        self.nodes.push(Node::Leaf(left_gp));
        self.nodes.push(Node::Leaf(right_gp));
        self.leaf_count += 1;
        Some(event)
    }

    /// Positive leaf weights `ω_l(x)`, the products of split probabilities
    /// along each root-to-leaf path.
    pub fn weights(&self, x: &[f64]) -> Vec<(LeafId, f64)> {
        let mut out = Vec::new();
        self.weights_into(x, &mut out);
        out
    }

    pub fn weights_into(&self, x: &[f64], out: &mut Vec<(LeafId, f64)>) {
        out.clear();
        self.collect_weights(ROOT, 1.0, x, out);
    }

    fn collect_weights(&self, id: usize, w: f64, x: &[f64], out: &mut Vec<(LeafId, f64)>) {
        match &self.nodes[id] {
            Node::Leaf(_) => out.push((id, w)),
            Node::Split(s) => {
                let p = s.prob_right(x);
                if p < 1.0 {
                    self.collect_weights(s.left, w * (1.0 - p), x, out);
                }
                if p > 0.0 {
                    self.collect_weights(s.right, w * p, x, out);
                }
            }
        }
    }

    /// Calls `f` for every leaf with positive weight at `x`, without allocating.
    pub fn visit_active<F: FnMut(LeafId)>(&self, x: &[f64], f: &mut F) {
        self.visit_from(ROOT, x, f);
    }

    fn visit_from<F: FnMut(LeafId)>(&self, id: usize, x: &[f64], f: &mut F) {
        match &self.nodes[id] {
            Node::Leaf(_) => f(id),
            Node::Split(s) => {
                let p = s.prob_right(x);
                if p < 1.0 {
                    self.visit_from(s.left, x, f);
                }
                if p > 0.0 {
                    self.visit_from(s.right, x, f);
                }
            }
        }
    }

    /// Number of arena nodes; every id is below this.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Pairs stored in `leaves` whose sample index (time / tau) lies in `range`.
    pub fn count_pairs<'a, I>(&self, leaves: I, tau: f64, range: std::ops::RangeInclusive<u64>) -> usize
    where
        I: IntoIterator<Item = &'a LeafId>,
    {
        leaves
            .into_iter()
            .filter_map(|&id| self.leaf(id))
            .map(|gp| gp.pairs().iter().filter(|p| range.contains(&p.index(tau))).count())
            .sum()
    }

    /// Pairs held by the given leaves.
    pub fn pairs_in<'a, I: IntoIterator<Item = &'a LeafId>>(&self, leaves: I) -> usize {
        leaves.into_iter().filter_map(|&id| self.leaf(id)).map(LocalGp::len).sum()
    }

    fn leaf_gp(&self, id: LeafId) -> &LocalGp {
        match &self.nodes[id] {
            Node::Leaf(gp) => gp,
            Node::Split(_) => panic!("node {id} is not a leaf"),
        }
    }

    fn combine<F: Fn(LeafId) -> bool>(&self, x: &[f64], include: F) -> RestrictedPrediction {
        let mut weights = Vec::with_capacity(4);
        self.weights_into(x, &mut weights);
        let mut experts = Vec::with_capacity(weights.len());
        let mut missed = 0;
        for &(id, w) in &weights {
            if include(id) {
                experts.push((w, self.leaf_gp(id).predict_unchecked(x)));
            } else {
                missed += 1;
            }
        }
        let prediction = combine_experts(&experts).unwrap_or(Prediction {
            mean: 0.0,
            variance: self.hyper.signal_var(),
        });
        RestrictedPrediction { prediction, missed }
    }

    /// Generalized product-of-experts prediction over all positive-weight leaves:
    /// `σ̃⁻² = Σ ω_l/σ_l²`, `μ̃ = Σ ω_l σ̃² μ_l / σ_l²`.
    pub fn aggregate_predict(&self, x: &[f64]) -> Prediction {
        debug_assert_eq!(x.len(), self.dim());
        self.combine(x, |_| true).prediction
    }

    /// Same aggregation summed over `candidates` only. Positive-weight leaves
    /// outside the set are counted in `missed`; if none remain the prior is
    /// returned.
    pub fn restricted_predict(&self, x: &[f64], candidates: &LeafSet) -> RestrictedPrediction {
        debug_assert_eq!(x.len(), self.dim());
        self.combine(x, |id| candidates.contains(&id))
    }

    /// Aggregated prediction together with the uniform error bound η(x).
    pub fn predict_with_bound(&self, x: &[f64], params: &ErrorBoundParams) -> Result<(Prediction, f64)> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if params.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: params.dim(),
            });
        }
        let beta = params.beta(self.leaf_count)?;
        let sqrt_beta = beta.sqrt();

        let weights = self.weights(x);
        let leaf_terms: Vec<_> = weights
            .iter()
            .map(|&(id, w)| {
                let gp = self.leaf_gp(id);
                let p = gp.predict_unchecked(x);
                let var = p.variance.max(VARIANCE_FLOOR);
                let (l_mu, l_sigma) = gp.lipschitz();
                (w, p.mean, var, l_mu, l_sigma)
            })
            .collect();
        let precision: f64 = leaf_terms.iter().map(|t| t.0 / t.2).sum();
        let agg_var = 1.0 / precision;
        let mean = leaf_terms.iter().map(|t| t.0 * agg_var * t.1 / t.2).sum();

        let spread: f64 = leaf_terms.iter().map(|t| t.0 * agg_var / t.2.sqrt()).sum();
        let rho = params.rho;
        let sigma_factor = params.sigma_factor();
        let gamma: f64 = leaf_terms
            .iter()
            .map(|&(w, _, var, l_mu, l_sigma)| {
                let lip = l_mu * rho + if l_sigma == 0.0 { 0.0 } else { sqrt_beta * l_sigma * sigma_factor };
                w * agg_var / var * lip
            })
            .sum::<f64>()
            + params.lipschitz_f * rho;
        let eta = sqrt_beta * spread + gamma;
        Ok((
            Prediction {
                mean,
                variance: agg_var,
            },
            eta,
        ))
    }

    /// Uniform error bound η(x) holding with probability 1 − δ on the domain.
    pub fn error_bound(&self, x: &[f64], params: &ErrorBoundParams) -> Result<f64> {
        self.predict_with_bound(x, params).map(|(_, eta)| eta)
    }

    /// Saturated region of every leaf (where its weight is exactly one),
    /// intersected with `domain`. Sides may be empty (upper < lower).
    pub fn saturated_boxes(&self, domain: &BoxDomain) -> Vec<(LeafId, Vec<f64>, Vec<f64>)> {
        let mut out = Vec::with_capacity(self.leaf_count);
        self.collect_boxes(ROOT, domain.lower.clone(), domain.upper.clone(), &mut out);
        out
    }

    fn collect_boxes(
        &self,
        id: usize,
        lower: Vec<f64>,
        upper: Vec<f64>,
        out: &mut Vec<(LeafId, Vec<f64>, Vec<f64>)>,
    ) {
        match &self.nodes[id] {
            Node::Leaf(_) => out.push((id, lower, upper)),
            Node::Split(s) => {
                let mut left_upper = upper.clone();
                left_upper[s.dim] = left_upper[s.dim].min(s.center - s.overlap / 2.0);
                let mut right_lower = lower.clone();
                right_lower[s.dim] = right_lower[s.dim].max(s.center + s.overlap / 2.0);
                self.collect_boxes(s.left, lower, left_upper, out);
                self.collect_boxes(s.right, right_lower, upper, out);
            }
        }
    }

    pub fn snapshot(&self) -> TreeSnapshot {
        TreeSnapshot {
            hyper: self.hyper.clone(),
            capacity: self.capacity,
            overlap_fraction: self.overlap_fraction,
            seed: self.seed,
            rng_word_pos: self.rng.get_word_pos(),
            nodes: self
                .nodes
                .iter()
                .map(|n| match n {
                    Node::Leaf(gp) => SnapshotNode::Leaf {
                        pairs: gp.pairs().to_vec(),
                    },
                    Node::Split(s) => SnapshotNode::Split(s.clone()),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snapshot: TreeSnapshot) -> Result<Self> {
        let mut tree = LogGpTree::new(
            snapshot.hyper,
            snapshot.capacity,
            snapshot.overlap_fraction,
            snapshot.seed,
        )?;
        tree.rng.set_word_pos(snapshot.rng_word_pos);
        tree.nodes.clear();
        tree.leaf_count = 0;
        tree.total_pairs = 0;
        let n = snapshot.nodes.len();
        for node in snapshot.nodes {
            match node {
                SnapshotNode::Leaf { pairs } => {
                    if pairs.len() >= tree.capacity {
                        return Err(Error::Config("snapshot leaf at or above capacity".into()));
                    }
                    tree.total_pairs += pairs.len();
                    tree.leaf_count += 1;
                    let gp = LocalGp::from_pairs(tree.hyper.clone(), tree.capacity, pairs)?;
                    tree.nodes.push(Node::Leaf(gp));
                }
                SnapshotNode::Split(s) => {
                    if s.left >= n || s.right >= n || s.dim >= tree.dim() || !(s.overlap > 0.0) {
                        return Err(Error::Config("malformed split node in snapshot".into()));
                    }
                    tree.nodes.push(Node::Split(s));
                }
            }
        }
        if tree.nodes.is_empty() {
            return Err(Error::Config("empty snapshot".into()));
        }
        Ok(tree)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.snapshot())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        LogGpTree::from_snapshot(serde_json::from_str(s)?)
    }
}

/// Split dimension (largest spread, ties to the lowest index), median center
/// and the spread along that dimension.
fn split_geometry(pairs: &[TrainingPair], dim: usize) -> (usize, f64, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for d in 0..dim {
        let (lo, hi) = pairs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.input[d]), hi.max(p.input[d]))
        });
        let spread = hi - lo;
        if spread > best.1 {
            best = (d, spread);
        }
    }
    let (d, spread) = best;
    let mut coords: Vec<f64> = pairs.iter().map(|p| p.input[d]).collect();
    coords.sort_by(f64::total_cmp);
    let n = coords.len();
    let median = if n % 2 == 1 {
        coords[n / 2]
    } else {
        0.5 * (coords[n / 2 - 1] + coords[n / 2])
    };
    (d, median, spread)
}

/// `true` means the pair goes to the right child.
fn sample_memberships<R: Rng + ?Sized>(
    pairs: &[TrainingPair],
    split: &SplitNode,
    rng: &mut R,
) -> Vec<bool> {
    let both_sides = |m: &[bool]| m.iter().any(|&r| r) && m.iter().any(|&r| !r);
    for _ in 0..MAX_SPLIT_REDRAWS {
        let members: Vec<bool> = pairs
            .iter()
            .map(|p| {
                let prob = split.prob_right(&p.input);
                if prob >= 1.0 {
                    true
                } else if prob <= 0.0 {
                    false
                } else {
                    rng.random::<f64>() < prob
                }
            })
            .collect();
        if both_sides(&members) {
            return members;
        }
    }
    let members: Vec<bool> = pairs.iter().map(|p| p.input[split.dim] >= split.center).collect();
    if both_sides(&members) {
        return members;
    }
    // all coordinates coincide: split by position
    let half = pairs.len() / 2;
    (0..pairs.len()).map(|i| i >= half).collect()
}

/// Weighted product of experts over `(ω, prediction)` pairs. Variances are
/// floored before inversion. `None` when no expert carries weight.
pub fn combine_experts(experts: &[(f64, Prediction)]) -> Option<Prediction> {
    let mut precision = 0.0;
    let mut weighted_mean = 0.0;
    for (w, p) in experts {
        let var = p.variance.max(VARIANCE_FLOOR);
        precision += w / var;
        weighted_mean += w * p.mean / var;
    }
    (precision > 0.0).then(|| {
        let variance = 1.0 / precision;
        Prediction {
            mean: variance * weighted_mean,
            variance,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn hyper(d: usize) -> KernelHyper {
        KernelHyper::new(1.0, vec![1.0; d], 0.1).unwrap()
    }

    fn pair(x: &[f64], y: f64) -> TrainingPair {
        TrainingPair::new(x.to_vec(), y, 0.0)
    }

    #[test]
    fn single_leaf_takes_everything() {
        let mut tree = LogGpTree::new(hyper(1), 10, 0.1, 1).unwrap();
        for i in 0..5 {
            let out = tree.insert(pair(&[i as f64], 0.0)).unwrap();
            assert_eq!(out.leaf, 0);
            assert!(out.split.is_none());
        }
        assert_eq!(tree.weights(&[3.3]), vec![(0, 1.0)]);
    }

    #[test]
    fn deterministic_median_split() {
        let mut tree = LogGpTree::new(hyper(1), 4, 0.1, 1).unwrap();
        let mut last = None;
        for i in 0..4 {
            last = tree.insert(pair(&[i as f64], i as f64)).unwrap().split;
        }
        let ev = last.expect("split at capacity");
        let s = tree.split_node(0).unwrap();
        assert_eq!(s.dim, 0);
        assert_eq!(s.center, 1.5);
        assert_abs_diff_eq!(s.overlap, 0.3, epsilon = 1e-15);
        let left: Vec<f64> = tree.leaf(ev.left).unwrap().pairs().iter().map(|p| p.input[0]).collect();
        let right: Vec<f64> = tree.leaf(ev.right).unwrap().pairs().iter().map(|p| p.input[0]).collect();
        assert_eq!(left, vec![0.0, 1.0]);
        assert_eq!(right, vec![2.0, 3.0]);
        assert_eq!(tree.leaf_count(), 2);
        assert_eq!(tree.total_pairs(), 4);
    }

    #[test]
    fn split_dimension_prefers_largest_spread_then_lowest_index() {
        let pts = [[0.0, 0.0], [1.0, 5.0], [2.0, 1.0], [3.0, 2.0]];
        let pairs: Vec<_> = pts.iter().map(|p| pair(p, 0.0)).collect();
        assert_eq!(split_geometry(&pairs, 2).0, 1);
        let tie = [[0.0, 0.0], [1.0, 1.0]];
        let pairs: Vec<_> = tie.iter().map(|p| pair(p, 0.0)).collect();
        assert_eq!(split_geometry(&pairs, 2).0, 0);
    }

    #[test]
    fn split_conserves_data_and_increments_leaves() {
        let mut tree = LogGpTree::new(hyper(2), 8, 0.5, 9).unwrap();
        let mut inserted = Vec::new();
        for i in 0..60 {
            let x = [((i * 37) % 17) as f64 / 17.0, ((i * 11) % 13) as f64 / 13.0];
            let before = tree.leaf_count();
            let out = tree.insert(TrainingPair::new(x.to_vec(), i as f64, i as f64)).unwrap();
            inserted.push(i as f64);
            let expected = before + usize::from(out.split.is_some());
            assert_eq!(tree.leaf_count(), expected);
            let mut seen: Vec<f64> = tree
                .leaves()
                .flat_map(|(_, gp)| gp.pairs().iter().map(|p| p.time))
                .collect();
            seen.sort_by(f64::total_cmp);
            assert_eq!(seen, inserted);
            assert!(tree.leaves().all(|(_, gp)| gp.len() < 8 && !gp.is_empty() || tree.leaf_count() == 1));
        }
    }

    #[test]
    fn saturated_point_has_single_weight() {
        let mut tree = LogGpTree::new(hyper(1), 4, 0.1, 1).unwrap();
        for i in 0..4 {
            tree.insert(pair(&[i as f64], 0.0)).unwrap();
        }
        let w = tree.weights(&[-5.0]);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].1, 1.0);
        let w = tree.weights(&[1.5 + 0.3 * 0.2 - 0.15]);
        // inside the band: p = ½ + (x − c)/o
        let p = 0.5 + (1.5 + 0.06 - 0.15 - 1.5) / 0.3;
        assert_eq!(w.len(), 2);
        assert_abs_diff_eq!(w[0].1, 1.0 - p, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1].1, p, epsilon = 1e-15);
    }

    #[test]
    fn aggregation_hand_values() {
        // two leaves with ω = 0.5 each: synthesize by querying the band center
        let mut tree = LogGpTree::new(hyper(1), 4, 0.1, 1).unwrap();
        for i in 0..4 {
            tree.insert(pair(&[i as f64], 0.0)).unwrap();
        }
        let w = tree.weights(&[1.5]);
        assert_eq!(w.iter().map(|p| p.1).collect::<Vec<_>>(), vec![0.5, 0.5]);
    }

    #[test]
    fn empty_candidate_set_returns_prior_and_counts_miss() {
        let mut tree = LogGpTree::new(hyper(1), 10, 0.1, 1).unwrap();
        tree.insert(pair(&[0.0], 1.0)).unwrap();
        let r = tree.restricted_predict(&[0.0], &LeafSet::new());
        assert!(r.coverage_miss());
        assert_eq!(r.prediction, Prediction { mean: 0.0, variance: 1.0 });
        let full = tree.restricted_predict(&[0.0], &tree.leaf_ids());
        assert!(!full.coverage_miss());
        assert_eq!(full.prediction, tree.aggregate_predict(&[0.0]));
    }

    #[test]
    fn beta_grows_by_two_log_two_when_leaves_double() {
        let params = ErrorBoundParams::new(0.05, 1e-3, BoxDomain::cube(2, 1.0), 1.0).unwrap();
        let b1 = params.beta(5).unwrap();
        let b2 = params.beta(10).unwrap();
        assert_abs_diff_eq!(b2 - b1, 2.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn beta_non_positive_is_an_error() {
        let params = ErrorBoundParams::new(0.9, 10.0, BoxDomain::cube(1, 0.01), 1.0).unwrap();
        assert!(matches!(params.beta(1), Err(Error::NonPositiveBeta { .. })));
    }

    #[test]
    fn bound_limit_for_tiny_rho_is_scaled_std() {
        let mut tree = LogGpTree::new(hyper(1), 10, 0.1, 1).unwrap();
        tree.insert(pair(&[0.0], 1.0)).unwrap();
        tree.insert(pair(&[0.5], 0.2)).unwrap();
        let params = ErrorBoundParams::new(0.05, 1e-12, BoxDomain::cube(1, 2.0), 1.0).unwrap();
        let x = [0.3];
        let (p, eta) = tree.predict_with_bound(&x, &params).unwrap();
        let beta = params.beta(1).unwrap();
        assert_abs_diff_eq!(eta, beta.sqrt() * p.variance.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn snapshot_round_trip_preserves_predictions_and_rng() {
        let mut tree = LogGpTree::new(hyper(2), 6, 0.3, 4).unwrap();
        for i in 0..40 {
            let x = [(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()];
            tree.insert(TrainingPair::new(x.to_vec(), x[0] * x[1], i as f64)).unwrap();
        }
        let mut restored = LogGpTree::from_json(&tree.to_json().unwrap()).unwrap();
        for q in [[0.1, 0.2], [-0.5, 0.9], [0.7, -0.3]] {
            assert_eq!(tree.aggregate_predict(&q), restored.aggregate_predict(&q));
        }
        let a = tree.insert(pair(&[0.05, 0.5], 0.0)).unwrap();
        let b = restored.insert(pair(&[0.05, 0.5], 0.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(tree.weights(&[0.0, 0.5]), restored.weights(&[0.0, 0.5]));
    }
}
