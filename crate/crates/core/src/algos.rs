//! Named configurations of the parallel search loop, and the BU-UCT
//! statistics (thresholded value, running-average incomplete count,
//! aggregation on first expansion).

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tree::{EdgeKey, EdgePolicy, EdgeStats, SearchTree, TreeLimits};
use crate::env::StateId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgoKind {
    Uct,
    Leafp,
    Rootp,
    Treep,
    WuUct,
    VlHard,
    VlSoft,
    BuUct,
}

impl AlgoKind {
    pub const ALL: [AlgoKind; 8] = [
        AlgoKind::Uct,
        AlgoKind::Leafp,
        AlgoKind::Rootp,
        AlgoKind::Treep,
        AlgoKind::WuUct,
        AlgoKind::VlHard,
        AlgoKind::VlSoft,
        AlgoKind::BuUct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgoKind::Uct => "uct",
            AlgoKind::Leafp => "leafp",
            AlgoKind::Rootp => "rootp",
            AlgoKind::Treep => "treep",
            AlgoKind::WuUct => "wu_uct",
            AlgoKind::VlHard => "vl_hard",
            AlgoKind::VlSoft => "vl_soft",
            AlgoKind::BuUct => "bu_uct",
        }
    }
}

impl fmt::Display for AlgoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgoKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        AlgoKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || k.name().replace('_', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown algorithm '{s}'")))
    }
}

/// Which of the M trees the next rollout works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeSelection {
    /// Always the first tree.
    First,
    /// (m' + 1) mod M.
    RoundRobin,
    /// The tree whose simulation slot freed up, oldest first.
    LastFreed,
    /// Uniform over the M trees, drawn from the coordinator stream.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncInterval {
    /// Synchronize after every k completed rollouts.
    Every(usize),
    /// Synchronize once, when the budget is exhausted.
    AtEnd,
}

/// How Q̄ is formed from Q and the in-flight count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ValueAdjust {
    /// Q̄ = Q.
    Plain,
    /// Q̄ = Q − O·r_VL.
    VirtualLoss { r_vl: f64 },
    /// Q̄ = (N·Q − r_VL·n_VL·O) / (N + n_VL·O).
    SoftVirtualLoss { r_vl: f64, n_vl: f64 },
    /// Q̄ = Q while Ō < m_max·M, otherwise the edge is unselectable.
    Threshold { m_max: f64 },
}

/// Pseudo count Ñ added to N.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum PseudoCount {
    Zero,
    /// Ñ = max(slope·O + intercept, 0).
    Linear { slope: f64, intercept: f64 },
    /// Ñ = factor·N; not a function of O alone.
    VisitScaled { factor: f64 },
}

impl PseudoCount {
    pub fn eval(&self, o: f64, n: f64) -> f64 {
        match *self {
            PseudoCount::Zero => 0.0,
            PseudoCount::Linear { slope, intercept } => (slope * o + intercept).max(0.0),
            PseudoCount::VisitScaled { factor } => factor * n,
        }
    }

    /// Ñ as a function of O alone, when it is one.
    pub fn as_fn_of_o(&self) -> Option<impl Fn(f64) -> f64 + '_> {
        match self {
            PseudoCount::VisitScaled { .. } => None,
            _ => Some(move |x| self.eval(x, 0.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "value")]
pub enum Exploration {
    /// Per node: standard deviation of the values backed up through it.
    NodeSpread,
    Fixed(f64),
}

/// Hyperparameters consumed by [`make_specialization`]. VL and BU kinds
/// require their entries; [`AlgoParams::defaults`] fills the usual values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgoParams {
    pub r_vl: Option<f64>,
    pub n_vl: Option<f64>,
    pub m_max: Option<f64>,
    pub exploration: Exploration,
    pub limits: TreeLimits,
}

pub const DEFAULT_R_VL: f64 = 1.0;
pub const ALT_R_VL: f64 = 5.0;
pub const DEFAULT_N_VL: f64 = 1.0;
pub const DEFAULT_M_MAX: f64 = 0.8;
/// Probability of stopping to expand at a partially expanded node (BU-UCT).
pub const BU_EXPAND_PROBABILITY: f64 = 0.5;

impl Default for AlgoParams {
    fn default() -> Self {
        Self { r_vl: None, n_vl: None, m_max: None, exploration: Exploration::NodeSpread, limits: TreeLimits::default() }
    }
}

impl AlgoParams {
    pub fn defaults() -> Self {
        Self { r_vl: Some(DEFAULT_R_VL), n_vl: Some(DEFAULT_N_VL), m_max: Some(DEFAULT_M_MAX), ..Self::default() }
    }

    pub fn with_exploration(mut self, e: Exploration) -> Self {
        self.exploration = e;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecializationConfig {
    pub name: String,
    pub kind: Option<AlgoKind>,
    pub workers: usize,
    pub tree_selection: TreeSelection,
    pub sync: SyncInterval,
    pub value: ValueAdjust,
    pub count: PseudoCount,
    pub exploration: Exploration,
    /// Chance of expanding at a node that still has unexpanded actions
    /// instead of descending through its expanded ones.
    pub expand_probability: f64,
    pub aggregate_on_first_expand: bool,
    pub track_o_bar: bool,
    pub limits: TreeLimits,
}

fn require(v: Option<f64>, what: &str, kind: AlgoKind) -> Result<f64> {
    v.ok_or_else(|| Error::Config(format!("{kind} needs parameter {what}")))
}

/// The parameter row of one named algorithm.
pub fn make_specialization(kind: AlgoKind, workers: usize, params: &AlgoParams) -> Result<SpecializationConfig> {
    if workers == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    let mut cfg = SpecializationConfig {
        name: kind.name().to_string(),
        kind: Some(kind),
        workers,
        tree_selection: TreeSelection::Uniform,
        sync: SyncInterval::Every(1),
        value: ValueAdjust::Plain,
        count: PseudoCount::Zero,
        exploration: params.exploration,
        expand_probability: 1.0,
        aggregate_on_first_expand: false,
        track_o_bar: false,
        limits: params.limits,
    };
    match kind {
        AlgoKind::Uct => {
            if workers != 1 {
                return Err(Error::Config(format!("uct runs with a single worker, got {workers}")));
            }
            cfg.tree_selection = TreeSelection::First;
        }
        AlgoKind::Leafp => {
            cfg.tree_selection = TreeSelection::RoundRobin;
            cfg.sync = SyncInterval::Every(workers);
        }
        AlgoKind::Rootp => {
            cfg.tree_selection = TreeSelection::LastFreed;
            cfg.sync = SyncInterval::AtEnd;
        }
        AlgoKind::Treep => {}
        AlgoKind::WuUct => cfg.count = PseudoCount::Linear { slope: 1.0, intercept: 0.0 },
        AlgoKind::VlHard => {
            let r_vl = require(params.r_vl, "r_vl", kind)?;
            cfg.value = ValueAdjust::VirtualLoss { r_vl };
        }
        AlgoKind::VlSoft => {
            let r_vl = require(params.r_vl, "r_vl", kind)?;
            let n_vl = require(params.n_vl, "n_vl", kind)?;
            cfg.value = ValueAdjust::SoftVirtualLoss { r_vl, n_vl };
            cfg.count = PseudoCount::Linear { slope: n_vl, intercept: 0.0 };
        }
        AlgoKind::BuUct => {
            let m_max = require(params.m_max, "m_max", kind)?;
            cfg.value = ValueAdjust::Threshold { m_max };
            cfg.count = PseudoCount::Linear { slope: 1.0, intercept: 0.0 };
            cfg.expand_probability = BU_EXPAND_PROBABILITY;
            cfg.aggregate_on_first_expand = true;
            cfg.track_o_bar = true;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

impl SpecializationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if let SyncInterval::Every(0) = self.sync {
            return Err(Error::Config("sync interval must be at least 1".into()));
        }
        if self.aggregate_on_first_expand && self.sync != SyncInterval::Every(1) {
            return Err(Error::Config("aggregation on first expansion needs a sync interval of 1".into()));
        }
        if !(self.expand_probability > 0.0 && self.expand_probability <= 1.0) {
            return Err(Error::Config(format!("expand probability {} outside (0, 1]", self.expand_probability)));
        }
        if self.limits.max_depth == 0 || self.limits.max_width == 0 {
            return Err(Error::Config("tree depth and width limits must be positive".into()));
        }
        match self.value {
            ValueAdjust::VirtualLoss { r_vl } if !(r_vl >= 0.0 && r_vl.is_finite()) => {
                return Err(Error::Config(format!("r_vl must be a nonnegative real, got {r_vl}")));
            }
            ValueAdjust::SoftVirtualLoss { r_vl, n_vl } if !(r_vl >= 0.0 && r_vl.is_finite() && n_vl >= 0.0 && n_vl.is_finite()) => {
                return Err(Error::Config(format!("soft virtual loss needs r_vl, n_vl >= 0, got {r_vl}, {n_vl}")));
            }
            ValueAdjust::Threshold { m_max } if !(m_max > 0.0 && m_max <= 1.0) => {
                return Err(Error::Config(format!("m_max must lie in (0, 1], got {m_max}")));
            }
            ValueAdjust::Threshold { .. } if !self.track_o_bar => {
                return Err(Error::Config("the incomplete-count threshold needs O-bar tracking".into()));
            }
            _ => {}
        }
        if let Exploration::Fixed(c) = self.exploration {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("exploration constant must be nonnegative, got {c}")));
            }
        }
        Ok(())
    }

    /// Number of completed rollouts between synchronizations.
    pub fn sync_interval(&self, n_max: usize) -> usize {
        match self.sync {
            SyncInterval::Every(k) => k,
            SyncInterval::AtEnd => n_max.max(1),
        }
    }

    /// Tree for the next rollout (0-based). `m_prev` is the tree of the
    /// previous rollout, `m_hat` the oldest tree whose worker slot is free.
    pub fn select_tree(&self, m_prev: usize, m_hat: usize, rng: &mut Rng) -> usize {
        match self.tree_selection {
            TreeSelection::First => 0,
            TreeSelection::RoundRobin => (m_prev + 1) % self.workers,
            TreeSelection::LastFreed => m_hat,
            TreeSelection::Uniform => rng.random_range(0..self.workers),
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match self.value {
            ValueAdjust::Threshold { m_max } => Some(m_max * self.workers as f64),
            _ => None,
        }
    }

    pub fn alpha(&self, e: &EdgeStats) -> f64 {
        match self.value {
            ValueAdjust::SoftVirtualLoss { n_vl, .. } => {
                let d = e.n as f64 + n_vl * e.o as f64;
                if d > 0.0 { e.n as f64 / d } else { 1.0 }
            }
            _ => 1.0,
        }
    }

    pub fn beta(&self, e: &EdgeStats) -> f64 {
        match self.value {
            ValueAdjust::VirtualLoss { .. } => e.o as f64,
            ValueAdjust::SoftVirtualLoss { n_vl, .. } => {
                let d = e.n as f64 + n_vl * e.o as f64;
                if d > 0.0 { n_vl * e.o as f64 / d } else { 0.0 }
            }
            _ => 0.0,
        }
    }

    pub fn pseudo_value(&self) -> f64 {
        match self.value {
            ValueAdjust::VirtualLoss { r_vl } | ValueAdjust::SoftVirtualLoss { r_vl, .. } => -r_vl,
            _ => 0.0,
        }
    }

    pub fn pseudo_count(&self, e: &EdgeStats) -> f64 {
        self.count.eval(e.o as f64, e.n as f64)
    }

    /// Eq.-10 value: Q below the incomplete-count threshold, −∞ at or above.
    pub fn bu_modified_q(&self, e: &EdgeStats) -> f64 {
        match self.threshold() {
            Some(t) if e.o_bar >= t => f64::NEG_INFINITY,
            _ => e.q,
        }
    }

    pub fn exploration_constant(&self, tree: &SearchTree, s: StateId) -> f64 {
        match self.exploration {
            Exploration::Fixed(c) => c,
            Exploration::NodeSpread => tree.value_spread(s),
        }
    }
}

impl EdgePolicy for SpecializationConfig {
    fn q_bar(&self, e: &EdgeStats) -> f64 {
        match self.value {
            ValueAdjust::Plain | ValueAdjust::Threshold { .. } => e.q,
            ValueAdjust::VirtualLoss { r_vl } => e.q - e.o as f64 * r_vl,
            ValueAdjust::SoftVirtualLoss { r_vl, n_vl } => {
                let (n, o) = (e.n as f64, e.o as f64);
                let d = n + n_vl * o;
                if d > 0.0 { (n * e.q - r_vl * n_vl * o) / d } else { e.q }
            }
        }
    }

    fn n_bar(&self, e: &EdgeStats) -> f64 {
        e.n as f64 + self.pseudo_count(e)
    }

    fn blocked(&self, e: &EdgeStats) -> bool {
        self.threshold().is_some_and(|t| e.o_bar >= t)
    }

    fn pseudo(&self, e: &EdgeStats) -> (f64, f64) {
        (self.pseudo_value(), self.pseudo_count(e))
    }

    fn on_begin(&self, e: &mut EdgeStats) {
        if self.track_o_bar {
            update_o_bar(e);
        }
    }
}

/// Ō ← ((N̄−1)/N̄)·Ō + O/N̄ with N̄ = N + O, after O was incremented.
pub fn update_o_bar(e: &mut EdgeStats) {
    let nb = (e.n + e.o) as f64;
    if nb > 0.0 {
        e.o_bar = (nb - 1.0) / nb * e.o_bar + e.o as f64 / nb;
    }
}

/// O += 1 and the running-average update on every path edge.
pub fn incomplete_update(tree: &mut SearchTree, path: &[EdgeKey]) -> Result<()> {
    for &key in path.iter().rev() {
        let edge = tree
            .edge_mut(key)
            .ok_or_else(|| Error::Precondition(format!("edge {key:?} is not in the tree")))?;
        edge.stats.begin();
        update_o_bar(&mut edge.stats);
    }
    Ok(())
}

/// N += 1, O −= 1, r̄ ← r + γ·r̄ and the incremental mean, child to root.
/// Returns r̄ at the first state of the path.
pub fn complete_update(tree: &mut SearchTree, path: &[EdgeKey], value: f64, sim_id: u64, cfg: &SpecializationConfig) -> Result<f64> {
    tree.backpropagate(path, value, sim_id, cfg)
}

/// Collapses the returns through `parent_edge` into one sample (N ← 1,
/// Q unchanged). Called when the edge's child gets its first expanded child.
pub fn aggregate_on_first_expand(tree: &mut SearchTree, parent_edge: EdgeKey) -> Result<()> {
    let edge = tree
        .edge_mut(parent_edge)
        .ok_or_else(|| Error::Precondition(format!("edge {parent_edge:?} is not in the tree")))?;
    edge.stats.collapse_records();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{complete_tree, depth_two_from_means};
    use crate::rng;
    use crate::tree::SelectKind;

    fn stats(q: f64, n: u64, o: u64) -> EdgeStats {
        let mut e = EdgeStats::default();
        e.q = q;
        e.n = n;
        e.o = o;
        e
    }

    fn cfg(kind: AlgoKind, m: usize) -> SpecializationConfig {
        make_specialization(kind, m, &AlgoParams::defaults()).unwrap()
    }

    #[test]
    fn table_rows() {
        let uct = cfg(AlgoKind::Uct, 1);
        assert_eq!((uct.tree_selection, uct.sync), (TreeSelection::First, SyncInterval::Every(1)));
        let leaf = cfg(AlgoKind::Leafp, 4);
        assert_eq!((leaf.tree_selection, leaf.sync), (TreeSelection::RoundRobin, SyncInterval::Every(4)));
        let root = cfg(AlgoKind::Rootp, 4);
        assert_eq!((root.tree_selection, root.sync), (TreeSelection::LastFreed, SyncInterval::AtEnd));
        assert_eq!(root.sync_interval(512), 512);
        let tp = cfg(AlgoKind::Treep, 4);
        assert_eq!((tp.tree_selection, tp.sync, tp.count), (TreeSelection::Uniform, SyncInterval::Every(1), PseudoCount::Zero));
        let wu = cfg(AlgoKind::WuUct, 4);
        assert_eq!(wu.count, PseudoCount::Linear { slope: 1.0, intercept: 0.0 });
        assert!(make_specialization(AlgoKind::Uct, 2, &AlgoParams::defaults()).is_err());
        assert!(make_specialization(AlgoKind::Treep, 0, &AlgoParams::defaults()).is_err());
    }

    #[test]
    fn vl_kinds_need_their_parameters() {
        let none = AlgoParams::default();
        assert!(matches!(make_specialization(AlgoKind::VlHard, 4, &none), Err(Error::Config(_))));
        assert!(matches!(make_specialization(AlgoKind::VlSoft, 4, &none), Err(Error::Config(_))));
        assert!(matches!(make_specialization(AlgoKind::BuUct, 4, &none), Err(Error::Config(_))));
        let bad = AlgoParams { m_max: Some(1.5), ..AlgoParams::defaults() };
        assert!(make_specialization(AlgoKind::BuUct, 4, &bad).is_err());
    }

    #[test]
    fn soft_virtual_loss_value() {
        let p = AlgoParams { r_vl: Some(1.0), n_vl: Some(2.0), ..AlgoParams::defaults() };
        let c = make_specialization(AlgoKind::VlSoft, 4, &p).unwrap();
        let e = stats(0.5, 4, 1);
        assert_eq!(c.q_bar(&e), (0.5 * 4.0 - 1.0 * 2.0 * 1.0) / (4.0 + 2.0));
        assert_eq!(c.q_bar(&e), 0.0);
        assert_eq!(c.n_bar(&e), 6.0);
        // Q̄ = α·Q + β·Q̃ agrees with the closed form.
        let combo = c.alpha(&e) * e.q + c.beta(&e) * c.pseudo_value();
        assert!((combo - c.q_bar(&e)).abs() < 1e-15);
    }

    #[test]
    fn hard_virtual_loss_value() {
        let p = AlgoParams { r_vl: Some(5.0), ..AlgoParams::defaults() };
        let c = make_specialization(AlgoKind::VlHard, 4, &p).unwrap();
        let e = stats(0.5, 4, 2);
        assert_eq!(c.q_bar(&e), 0.5 - 10.0);
        assert_eq!((c.pseudo_value(), c.beta(&e), c.n_bar(&e)), (-5.0, 2.0, 4.0));
    }

    #[test]
    fn wu_uct_counts_in_flight_work() {
        let c = cfg(AlgoKind::WuUct, 4);
        let e = stats(0.3, 3, 2);
        assert_eq!((c.n_bar(&e), c.q_bar(&e)), (5.0, 0.3));
    }

    #[test]
    fn treep_ignores_in_flight_work() {
        let c = cfg(AlgoKind::Treep, 8);
        let e = stats(0.3, 3, 7);
        assert_eq!((c.n_bar(&e), c.q_bar(&e)), (3.0, 0.3));
    }

    #[test]
    fn bu_threshold_is_strict() {
        let p = AlgoParams { m_max: Some(0.8), ..AlgoParams::defaults() };
        let c = make_specialization(AlgoKind::BuUct, 16, &p).unwrap();
        let mut e = stats(0.7, 3, 0);
        e.o_bar = 5.0;
        assert_eq!(c.bu_modified_q(&e), 0.7);
        e.o_bar = 12.9;
        assert_eq!(c.bu_modified_q(&e), f64::NEG_INFINITY);
        e.o_bar = 0.8 * 16.0;
        assert_eq!(c.bu_modified_q(&e), f64::NEG_INFINITY);
        assert!(c.blocked(&e));
    }

    #[test]
    fn saturated_edge_is_never_chosen_while_another_is_open() {
        let env = depth_two_from_means(&[0.5, 0.1], 1.0, 0).unwrap();
        let c = cfg(AlgoKind::BuUct, 4);
        let mut t = SearchTree::new(&env, 0, TreeLimits::default()).unwrap();
        t.expand(&env, 0, 0).unwrap();
        t.expand(&env, 0, 1).unwrap();
        let e0 = &mut t.edge_mut((0, 0)).unwrap().stats;
        (e0.q, e0.n, e0.o_bar) = (10.0, 1, 3.2);
        let e1 = &mut t.edge_mut((0, 1)).unwrap().stats;
        (e1.q, e1.n) = (-10.0, 50);
        assert_eq!(t.select_action(0, &c, 1.0).unwrap().0, 1);
    }

    #[test]
    fn all_saturated_takes_the_least_loaded_edge() {
        let env = depth_two_from_means(&[0.5, 0.1, 0.3], 1.0, 0).unwrap();
        let c = cfg(AlgoKind::BuUct, 4);
        let mut t = SearchTree::new(&env, 0, TreeLimits::default()).unwrap();
        for (a, (q, ob)) in [(9.0, 3.5), (0.0, 3.3), (5.0, 3.4)].into_iter().enumerate() {
            t.expand(&env, 0, a).unwrap();
            let e = &mut t.edge_mut((0, a)).unwrap().stats;
            (e.q, e.n, e.o_bar) = (q, 2, ob);
        }
        assert_eq!(t.select_action(0, &c, 1.0).unwrap(), (1, SelectKind::FailOpen));
    }

    #[test]
    fn running_average_incomplete_count() {
        let env = depth_two_from_means(&[0.5, 0.1], 1.0, 0).unwrap();
        let mut t = SearchTree::new(&env, 0, TreeLimits::default()).unwrap();
        t.expand(&env, 0, 0).unwrap();
        incomplete_update(&mut t, &[(0, 0)]).unwrap();
        assert_eq!(t.edge((0, 0)).unwrap().stats.o_bar, 1.0);
        incomplete_update(&mut t, &[(0, 0)]).unwrap();
        assert_eq!(t.edge((0, 0)).unwrap().stats.o_bar, 1.5);

        let mut e = stats(0.0, 0, 0);
        for _ in 0..2000 {
            e.o = 3;
            e.n += 1;
            update_o_bar(&mut e);
        }
        assert!((e.o_bar - 3.0).abs() < 1e-2, "{}", e.o_bar);
    }

    #[test]
    fn complete_update_first_sample_and_recursion() {
        let env = depth_two_from_means(&[0.5, 0.1], 1.0, 0).unwrap();
        let c = cfg(AlgoKind::BuUct, 4);
        let mut t = SearchTree::new(&env, 0, TreeLimits::default()).unwrap();
        t.expand(&env, 0, 0).unwrap();
        incomplete_update(&mut t, &[(0, 0)]).unwrap();
        complete_update(&mut t, &[(0, 0)], 2.0, 0, &c).unwrap();
        assert_eq!(t.edge((0, 0)).unwrap().stats.q, 2.0);
        assert!(matches!(complete_update(&mut t, &[(0, 0)], 2.0, 1, &c), Err(Error::Invariant(_))));

        let rewards = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let env = complete_tree(2, 2, &rewards, 0.0, 0.99, 1.0, (0.0, 1.0), 0).unwrap();
        let mut t = SearchTree::new(&env, 0, TreeLimits::default()).unwrap();
        let s1 = t.expand(&env, 0, 0).unwrap();
        t.expand(&env, s1, 0).unwrap();
        let path = [(0, 0), (s1, 0)];
        incomplete_update(&mut t, &path).unwrap();
        // Leaf value 0 through a unit-reward edge gives r̄ = 1 at s1.
        let top = complete_update(&mut t, &path, 0.0, 0, &c).unwrap();
        assert!((t.edge((s1, 0)).unwrap().stats.q - 1.0).abs() < 1e-15);
        assert!((top - 1.99).abs() < 1e-12);
    }

    #[test]
    fn aggregation_resets_visit_count_once() {
        let env = depth_two_from_means(&[0.5, 0.1], 1.0, 0).unwrap();
        let c = cfg(AlgoKind::BuUct, 4);
        let mut t = SearchTree::new(&env, 0, TreeLimits::default()).unwrap();
        t.expand(&env, 0, 0).unwrap();
        for (i, v) in [0.2, 0.4, 0.6].iter().enumerate() {
            incomplete_update(&mut t, &[(0, 0)]).unwrap();
            complete_update(&mut t, &[(0, 0)], *v, i as u64, &c).unwrap();
        }
        let before = t.edge((0, 0)).unwrap().stats.q;
        aggregate_on_first_expand(&mut t, (0, 0)).unwrap();
        let st = &t.edge((0, 0)).unwrap().stats;
        assert_eq!((st.n, st.q), (1, before));
        assert!((st.q - 0.4).abs() < 1e-12);
        aggregate_on_first_expand(&mut t, (0, 0)).unwrap();
        assert_eq!(t.edge((0, 0)).unwrap().stats.n, 1);
    }

    #[test]
    fn tree_selection_rules() {
        let mut r = rng::coordinator(1);
        let leaf = cfg(AlgoKind::Leafp, 4);
        // 1-based m' = 4 wraps to 1, i.e. 0-based 3 → 0.
        assert_eq!(leaf.select_tree(3, 0, &mut r), 0);
        let root = cfg(AlgoKind::Rootp, 4);
        assert_eq!(root.select_tree(0, 2, &mut r), 2);
        let tp = cfg(AlgoKind::Treep, 4);
        let a: Vec<usize> = (0..20).map(|_| tp.select_tree(0, 0, &mut r)).collect();
        let mut r2 = rng::coordinator(1);
        let _ = leaf.select_tree(3, 0, &mut r2);
        let _ = root.select_tree(0, 2, &mut r2);
        let b: Vec<usize> = (0..20).map(|_| tp.select_tree(0, 0, &mut r2)).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|m| *m < 4));
    }

    #[test]
    fn kinds_parse_from_names() {
        for k in AlgoKind::ALL {
            assert_eq!(k.name().parse::<AlgoKind>().unwrap(), k);
        }
        assert_eq!("WU-UCT".parse::<AlgoKind>().unwrap(), AlgoKind::WuUct);
        assert!("foo".parse::<AlgoKind>().is_err());
    }

    #[test]
    fn config_serializes() {
        let c = cfg(AlgoKind::VlSoft, 4);
        let back: SpecializationConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
