//! Regret, action-value gaps, surrogate gaps and the necessary-condition
//! checks. Everything here reads finished runs; nothing mutates a search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::algos::{make_specialization, AlgoKind, AlgoParams, SpecializationConfig};
use crate::env::{depth_two_from_means, Mdp};
use crate::error::{Error, Result};
use crate::framework::{run_search, RolloutRecord, RolloutTrace, RunOptions, RunOutput};
use crate::rng::{self, derive_seed};
use crate::stats::{self, Moments};
use crate::tree::{EdgeKey, EdgePolicy, EdgeStats, SearchTree};

/// Σ (V* − V_i) over the trace, using the sampled root returns.
pub fn cumulative_regret(trace: &RolloutTrace) -> Result<f64> {
    regret_by(trace, |r| r.value)
}

/// Same sum with each return replaced by its expectation given the path,
/// which removes simulation noise without changing the mean.
pub fn expected_cumulative_regret(trace: &RolloutTrace) -> Result<f64> {
    regret_by(trace, |r| r.expected_value)
}

fn regret_by(trace: &RolloutTrace, v: impl Fn(&RolloutRecord) -> f64) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::Precondition("empty trace".into()));
    }
    let mut total = 0.0;
    for r in &trace.records {
        if !r.optimal_value.is_finite() {
            return Err(Error::Env(format!("rollout {} has no oracle value", r.index)));
        }
        total += r.optimal_value - v(r);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcessRegret {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Mean regret of the parallel runs minus that of the sequential runs, with
/// a bootstrap interval over repetitions. Inputs are per-run regrets.
pub fn excess_regret(parallel: &[f64], sequential: &[f64], resamples: usize, seed: u64) -> Result<ExcessRegret> {
    if parallel.is_empty() || parallel.len() != sequential.len() {
        return Err(Error::Precondition(format!(
            "need matched nonempty repetition sets, got {} and {}",
            parallel.len(),
            sequential.len()
        )));
    }
    let mean = stats::mean(parallel) - stats::mean(sequential);
    let mut r = rng::stream(seed, 0);
    let (ci_low, ci_high) = stats::bootstrap_ci(parallel.len(), resamples, 0.95, &mut r, |pick| {
        pick.iter().map(|&i| parallel[i] - sequential[i]).sum::<f64>() / pick.len() as f64
    });
    Ok(ExcessRegret { mean, ci_low, ci_high })
}

/// Excess regret from whole traces; all traces must share one budget.
pub fn excess_regret_of_traces(parallel: &[RolloutTrace], sequential: &[RolloutTrace]) -> Result<f64> {
    let n = parallel.first().map(RolloutTrace::len);
    if parallel.iter().chain(sequential).any(|t| Some(t.len()) != n) {
        return Err(Error::Precondition("traces differ in rollout count".into()));
    }
    let p: Vec<f64> = parallel.iter().map(cumulative_regret).collect::<Result<_>>()?;
    let s: Vec<f64> = sequential.iter().map(cumulative_regret).collect::<Result<_>>()?;
    if p.len() != s.len() {
        return Err(Error::Precondition("repetition counts differ".into()));
    }
    Ok(stats::mean(&p) - stats::mean(&s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretBound {
    pub r_uct: f64,
    pub excess: f64,
}

impl RegretBound {
    pub fn total(&self) -> f64 {
        self.r_uct + self.excess
    }
}

/// Regret bound of sequential UCT on the depth-two task and the extra term
/// for running with M workers. Zero gaps are skipped.
pub fn wu_uct_regret_bound(deltas: &[f64], n: u64, workers: usize) -> Result<RegretBound> {
    if n <= 1 {
        return Err(Error::Precondition(format!("bound needs n >= 2, got {n}")));
    }
    if deltas.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::Precondition("gaps must be nonnegative".into()));
    }
    let ln = (n as f64).ln();
    let mut r_uct = 0.0;
    let mut sq = 0.0;
    for &d in deltas.iter().filter(|d| **d > 0.0) {
        r_uct += (8.0 / d + 2.0 * d) * ln + d;
        sq += d * d;
    }
    Ok(RegretBound { r_uct, excess: 4.0 * workers as f64 * sq / ln.sqrt() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub gap: f64,
    pub stderr: f64,
}

/// Sequential UCT on `env` used as the reference for action values.
#[derive(Clone, Debug)]
pub struct SequentialOracle {
    pub config: SpecializationConfig,
}

impl SequentialOracle {
    pub fn new(params: &AlgoParams) -> Result<Self> {
        Ok(Self { config: make_specialization(AlgoKind::Uct, 1, params)? })
    }

    /// Matches the exploration and limits of `cfg`.
    pub fn like(cfg: &SpecializationConfig) -> Result<Self> {
        let mut p = AlgoParams::defaults();
        p.exploration = cfg.exploration;
        p.limits = cfg.limits;
        Self::new(&p)
    }

    /// One sample of the edge value R(s,a) + γ·V after m sequential
    /// rollouts from the child, V being the mean backed-up return.
    pub fn sample(&self, env: &Mdp, edge: EdgeKey, m: usize, seed: u64) -> Result<f64> {
        let t = env.transition(edge.0, edge.1)?;
        let mut opts = RunOptions::virtual_default(&self.config, m, seed);
        opts.root = Some(t.next);
        let out = run_search(env, &self.config, &opts)?;
        let v = out.trace.records.iter().map(|r| r.value).sum::<f64>() / m as f64;
        Ok(t.reward + env.discount() * v)
    }
}

/// |mean(parallel Q̄) − mean(Q^seq_m)| with m = N + O, the sequential side
/// estimated from `trials` independent runs. `None` when m = 0.
pub fn action_value_gap(
    env: &Mdp,
    oracle: &SequentialOracle,
    edge: EdgeKey,
    parallel_q_bar: &[f64],
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<Option<GapEstimate>> {
    if m == 0 || parallel_q_bar.is_empty() {
        return Ok(None);
    }
    if trials == 0 {
        return Err(Error::Precondition("need at least one oracle trial".into()));
    }
    let seq: Vec<f64> = (0..trials)
        .map(|t| oracle.sample(env, edge, m, derive_seed(seed, t as u64)))
        .collect::<Result<_>>()?;
    let gap = (stats::mean(parallel_q_bar) - stats::mean(&seq)).abs();
    let var = |xs: &[f64]| stats::sample_std(xs).powi(2) / xs.len() as f64;
    Ok(Some(GapEstimate { gap, stderr: (var(parallel_q_bar) + var(&seq)).sqrt() }))
}

/// Eq.-9 style averages: for every edge, (1/n) Σ_i O_i over the rollouts
/// of the trace, from the snapshots recorded at dispatch.
pub fn mean_in_flight(trace: &RolloutTrace) -> BTreeMap<EdgeKey, f64> {
    let mut sum: BTreeMap<EdgeKey, u64> = BTreeMap::new();
    for r in &trace.records {
        for &(k, c) in &r.in_flight {
            *sum.entry(k).or_default() += c as u64;
        }
    }
    let n = trace.len().max(1) as f64;
    sum.into_iter().map(|(k, s)| (k, s as f64 / n)).collect()
}

/// Recomputes the same averages by replaying dispatch and completion times:
/// rollout j is in flight at rollout i's dispatch when it was dispatched
/// earlier and completed strictly later. Valid for virtual-time traces.
pub fn replay_mean_in_flight(trace: &RolloutTrace) -> BTreeMap<EdgeKey, f64> {
    let mut order: Vec<&RolloutRecord> = trace.records.iter().collect();
    order.sort_by_key(|r| r.task_id);
    let mut sum: BTreeMap<EdgeKey, f64> = BTreeMap::new();
    for (i, ri) in order.iter().enumerate() {
        for rj in &order[..i] {
            if rj.completed_at > ri.dispatched_at {
                for p in &rj.path {
                    *sum.entry((p.state, p.action)).or_default() += 1.0;
                }
            }
        }
    }
    let n = trace.len().max(1) as f64;
    sum.into_iter().map(|(k, s)| (k, s / n)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SurrogateGaps {
    /// Largest mean in-flight count among the child's edges.
    pub g_star: f64,
    /// Population std of the returns through the edge.
    pub g1: f64,
    /// Population std of the Q̄ values the edge showed at selection time.
    pub g2: f64,
    /// Coefficient of variation of the returns; absent for a zero mean.
    pub g3: Option<f64>,
    /// Mean in-flight count of the edge itself.
    pub g4: f64,
}

pub fn surrogate_gaps(
    tree: &SearchTree,
    q_bar_history: &BTreeMap<EdgeKey, Moments>,
    o_mean: &BTreeMap<EdgeKey, f64>,
    edge: EdgeKey,
) -> Result<SurrogateGaps> {
    let e = tree
        .edge(edge)
        .ok_or_else(|| Error::Precondition(format!("edge {edge:?} is not in the tree")))?;
    let g_star = tree
        .node(e.child)
        .map(|n| n.edges.iter().map(|c| o_mean.get(&(e.child, c.action)).copied().unwrap_or(0.0)).fold(0.0, f64::max))
        .unwrap_or(0.0);
    let log = e.stats.records();
    let (g1, g3) = if log.is_empty() {
        (0.0, None)
    } else {
        let n = log.len() as f64;
        let mean = log.sum() / n;
        let sd = (log.sum_sq() / n - mean * mean).max(0.0).sqrt();
        (sd, if mean == 0.0 { None } else { Some(sd / mean.abs()) })
    };
    Ok(SurrogateGaps {
        g_star,
        g1,
        g2: q_bar_history.get(&edge).map_or(0.0, Moments::population_std),
        g3,
        g4: o_mean.get(&edge).copied().unwrap_or(0.0),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeGap {
    pub edge: EdgeKey,
    pub n: u64,
    pub o: u64,
    pub q_bar: f64,
    pub gap: Option<GapEstimate>,
    pub surrogate: SurrogateGaps,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub edges: Vec<EdgeGap>,
    /// N-weighted means over edges that have a value.
    pub weighted_gap: f64,
    pub weighted_g_star: f64,
    pub weighted_g1: f64,
    pub weighted_g2: f64,
    pub weighted_g3: f64,
    pub weighted_g4: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GapOptions {
    pub trials: usize,
    pub seed: u64,
    /// Skip the oracle for edges with fewer completed visits.
    pub min_visits: u64,
}

impl Default for GapOptions {
    fn default() -> Self {
        Self { trials: 200, seed: 0, min_visits: 1 }
    }
}

/// Per-edge gaps of a finished run. Q̄ and m = N + O are read from the
/// probe taken right after the last dispatch; surrogates use the trace and
/// the final tree. Edges whose Q̄ is not finite are left out.
pub fn gap_report(env: &Mdp, run: &RunOutput, opts: &GapOptions) -> Result<GapReport> {
    let probe = run
        .probe
        .as_ref()
        .ok_or_else(|| Error::Precondition("run was made without a probe snapshot".into()))?;
    let oracle = SequentialOracle::like(&run.config)?;
    let o_mean = mean_in_flight(&run.trace);
    let mut edges = Vec::new();
    for (i, (key, e)) in probe.edges().enumerate() {
        if e.stats.n < opts.min_visits {
            continue;
        }
        let q_bar = run.config.q_bar(&e.stats);
        if !q_bar.is_finite() {
            continue;
        }
        let m = (e.stats.n + e.stats.o) as usize;
        let gap = action_value_gap(env, &oracle, key, &[q_bar], m, opts.trials, derive_seed(opts.seed, i as u64))?;
        let surrogate = surrogate_gaps(&run.tree, &run.trace.q_bar_history, &o_mean, key)?;
        edges.push(EdgeGap { edge: key, n: e.stats.n, o: e.stats.o, q_bar, gap, surrogate });
    }
    let weighted = |f: &dyn Fn(&EdgeGap) -> Option<f64>| {
        let (mut num, mut den) = (0.0, 0.0);
        for g in &edges {
            if let Some(v) = f(g) {
                num += g.n as f64 * v;
                den += g.n as f64;
            }
        }
        if den > 0.0 { num / den } else { 0.0 }
    };
    Ok(GapReport {
        weighted_gap: weighted(&|g| g.gap.map(|x| x.gap)),
        weighted_g_star: weighted(&|g| Some(g.surrogate.g_star)),
        weighted_g1: weighted(&|g| Some(g.surrogate.g1)),
        weighted_g2: weighted(&|g| Some(g.surrogate.g2)),
        weighted_g3: weighted(&|g| g.surrogate.g3),
        weighted_g4: weighted(&|g| Some(g.surrogate.g4)),
        edges,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum ConditionN {
    Pass,
    /// Ñ = f(O) with f(x) < x at this x.
    Fail { witness: u64, f_of_x: f64 },
    /// Ñ depends on more than O.
    NotCheckable,
}

/// Checks f(x) ≥ x for every integer x in [0, M−1].
pub fn check_condition_n(cfg: &SpecializationConfig) -> ConditionN {
    let Some(f) = cfg.count.as_fn_of_o() else { return ConditionN::NotCheckable };
    for x in 0..cfg.workers as u64 {
        let y = f(x as f64);
        if y < x as f64 {
            return ConditionN::Fail { witness: x, f_of_x: y };
        }
    }
    ConditionN::Pass
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionQProbe {
    pub n: u64,
    pub o: u64,
    pub gap: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub violated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionQ {
    pub probes: Vec<ConditionQProbe>,
    pub significance: f64,
    pub violated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionVerdict {
    pub name: String,
    pub condition_n: ConditionN,
    pub condition_q: ConditionQ,
}

/// Two-sided normal quantile by bisection on erfc; enough for CI widths.
fn normal_quantile(p: f64) -> f64 {
    let cdf = |x: f64| 0.5 * erfc(-x / std::f64::consts::SQRT_2);
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p { lo = mid } else { hi = mid }
    }
    0.5 * (lo + hi)
}

/// Complementary error function (Numerical Recipes erfcc, |error| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398 + t * (1.48851499 + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 { r } else { 2.0 - r }
}

/// Monte Carlo check of the Q̄ condition on a single terminal arm with mean
/// `mu` and noise `sigma`: at each (N, O) the edge holds N completed draws
/// and O in flight; its Q̄ is compared with the mean of N + O draws.
/// Verdicts use a normal interval at `significance` split over the probes.
pub fn check_condition_q(
    cfg: &SpecializationConfig,
    states: &[(u64, u64)],
    mu: f64,
    sigma: f64,
    trials: usize,
    significance: f64,
    seed: u64,
) -> Result<ConditionQ> {
    if trials < 2 {
        return Err(Error::Precondition("need at least two trials".into()));
    }
    let env = depth_two_from_means(&[mu, mu], sigma, seed)?;
    let z = normal_quantile(1.0 - significance / (2.0 * states.len().max(1) as f64));
    let mut probes = Vec::new();
    for (pi, &(n, o)) in states.iter().enumerate() {
        let mut r = rng::stream(derive_seed(seed, pi as u64), 0);
        let mut diffs = Vec::with_capacity(trials);
        for _ in 0..trials {
            let draws: Vec<f64> = (0..n + o).map(|_| env.simulate(1, &mut r)).collect::<Result<_>>()?;
            let mut e = EdgeStats::default();
            for (i, v) in draws[..n as usize].iter().enumerate() {
                e.begin();
                e.complete(*v, i as u64)?;
            }
            e.o = o;
            let q_bar = cfg.q_bar(&e);
            let q_seq = if n + o == 0 { 0.0 } else { stats::mean(&draws) };
            // Incremental and direct means may differ in the last bits.
            let d = q_bar - q_seq;
            diffs.push(if d.abs() < 1e-12 { 0.0 } else { d });
        }
        let mean = stats::mean(&diffs);
        let half = z * stats::std_error(&diffs);
        let (ci_low, ci_high) = (mean - half, mean + half);
        let violated = ci_low > 0.0 || ci_high < 0.0;
        probes.push(ConditionQProbe { n, o, gap: mean.abs(), ci_low, ci_high, violated });
    }
    let violated = probes.iter().any(|p| p.violated);
    Ok(ConditionQ { probes, significance, violated })
}

/// Both checks for one configuration, with a default (N, O) battery.
pub fn check_necessary_conditions(cfg: &SpecializationConfig, trials: usize, seed: u64) -> Result<ConditionVerdict> {
    let m = cfg.workers as u64;
    let mut states = Vec::new();
    for n in [1, 4, 16] {
        for o in 0..m.min(4) {
            states.push((n, o));
        }
    }
    Ok(ConditionVerdict {
        name: cfg.name.clone(),
        condition_n: check_condition_n(cfg),
        condition_q: check_condition_q(cfg, &states, 0.5, 1.0, trials, 0.05, seed)?,
    })
}
