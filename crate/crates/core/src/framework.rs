//! The coordinator loop: tree selection, node selection, expansion,
//! pre-update, dispatch, wait, backpropagation and periodic sync, driven
//! either by a deterministic virtual clock or by real worker threads.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::algos::{SpecializationConfig, SyncInterval};
use crate::env::{Action, Mdp, StateId};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::stats::Moments;
use crate::tree::{sync_trees, EdgeKey, SearchTree, SelectKind};

/// Stream index for random simulation intervals, disjoint from the
/// coordinator and worker streams.
const INTERVAL_STREAM: u64 = 1 << 40;

/// How the virtual clock advances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Each dispatch takes one rollout step; a simulation occupies its
    /// worker for the configured interval. With M workers and interval M
    /// exactly one task returns per step.
    Pipeline,
    /// Coordinator work takes no time, so tasks dispatched together finish
    /// together and every result of a batch is processed before the next
    /// batch starts.
    Lockstep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum SimInterval {
    Constant { steps: u64 },
    /// Uniform integer interval in [lo, hi].
    Uniform { lo: u64, hi: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualClock {
    pub timing: Timing,
    pub interval: SimInterval,
}

impl VirtualClock {
    /// Pipeline clock with interval M.
    pub fn pipeline(workers: usize) -> Self {
        Self { timing: Timing::Pipeline, interval: SimInterval::Constant { steps: workers as u64 } }
    }

    pub fn lockstep(workers: usize) -> Self {
        Self { timing: Timing::Lockstep, interval: SimInterval::Constant { steps: workers as u64 } }
    }

    /// Leaf parallelization simulates a batch of M together; every other
    /// configuration defaults to the pipeline.
    pub fn default_for(cfg: &SpecializationConfig) -> Self {
        match cfg.kind {
            Some(crate::algos::AlgoKind::Leafp) => Self::lockstep(cfg.workers),
            _ => Self::pipeline(cfg.workers),
        }
    }

    fn validate(&self) -> Result<()> {
        match self.interval {
            SimInterval::Constant { steps: 0 } => Err(Error::Config("simulation interval must be positive".into())),
            SimInterval::Uniform { lo, hi } if lo == 0 || lo > hi => {
                Err(Error::Config(format!("bad simulation interval range [{lo}, {hi}]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Mode {
    Virtual(VirtualClock),
    /// Real worker threads; each simulation sleeps `delay_ms` on top.
    Parallel { delay_ms: u64 },
}

pub const DEFAULT_DELAY_MS: u64 = 10;

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub n_rollouts: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Search root; the environment root when `None`.
    pub root: Option<StateId>,
    /// Record per-rollout in-flight snapshots and Q̄ histories.
    pub diagnostics: bool,
    /// Keep a merged copy of the trees right after the last dispatch.
    pub probe: bool,
    /// With a sync interval of one, keep one physical tree for all M slots.
    pub shared_tree: bool,
    /// Check flow and sync invariants at every dispatch (slow).
    pub check_invariants: bool,
}

impl RunOptions {
    pub fn new(n_rollouts: usize, seed: u64, mode: Mode) -> Self {
        Self {
            n_rollouts,
            seed,
            mode,
            root: None,
            diagnostics: false,
            probe: false,
            shared_tree: true,
            check_invariants: false,
        }
    }

    pub fn virtual_default(cfg: &SpecializationConfig, n_rollouts: usize, seed: u64) -> Self {
        Self::new(n_rollouts, seed, Mode::Virtual(VirtualClock::default_for(cfg)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub state: StateId,
    pub action: Action,
    pub kind: SelectKind,
    /// Ō of the chosen edge when it was chosen.
    pub o_bar: f64,
    /// The chosen edge was over the incomplete-count threshold.
    pub blocked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    /// 1-based completion order.
    pub index: usize,
    /// 0-based dispatch order; doubles as the simulation id.
    pub task_id: u64,
    pub tree: usize,
    pub worker: usize,
    pub root_action: Option<Action>,
    /// Backed-up return at the search root.
    pub value: f64,
    /// Expectation of `value` given the path and leaf.
    pub expected_value: f64,
    pub optimal_value: f64,
    pub dispatched_at: f64,
    pub completed_at: f64,
    pub leaf: StateId,
    pub path: Vec<PathStep>,
    /// In-flight simulations per edge when this rollout was selected,
    /// excluding itself. Empty unless diagnostics were requested.
    pub in_flight: Vec<(EdgeKey, u32)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    RolloutStep,
    Millis,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub records: Vec<RolloutRecord>,
    /// Per edge, moments of Q̄ over the rollouts that saw the edge visited.
    pub q_bar_history: BTreeMap<EdgeKey, Moments>,
    pub time_unit: Option<TimeUnit>,
}

impl RolloutTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub syncs: usize,
    pub fail_open_selections: usize,
    pub blocked_selections: usize,
    pub max_in_flight: usize,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: SpecializationConfig,
    pub tree: SearchTree,
    pub trace: RolloutTrace,
    pub probe: Option<SearchTree>,
    pub stats: RunStats,
}

impl RunOutput {
    pub fn recommend_action(&self) -> Result<Action> {
        self.tree.recommend_action()
    }
}

/// A completed simulation as seen by the coordinator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Completion {
    pub task_id: u64,
    pub state: StateId,
    pub value: f64,
    pub worker: usize,
    pub time: f64,
}

/// Deterministic stand-in for M simulation workers. Values are drawn from
/// the assigned worker's stream at dispatch; a task becomes collectible
/// once the clock reaches its ready time.
pub struct VirtualScheduler<'a> {
    env: &'a Mdp,
    clock: VirtualClock,
    now: u64,
    workers: Vec<Rng>,
    free: BTreeSet<usize>,
    pending: Vec<(u64, Completion)>,
    interval_rng: Rng,
}

impl<'a> VirtualScheduler<'a> {
    pub fn new(env: &'a Mdp, workers: usize, clock: VirtualClock, seed: u64) -> Result<Self> {
        clock.validate()?;
        Ok(Self {
            env,
            clock,
            now: 0,
            workers: (0..workers).map(|w| rng::worker(seed, w)).collect(),
            free: (0..workers).collect(),
            pending: Vec::new(),
            interval_rng: rng::stream(seed, INTERVAL_STREAM),
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    pub fn free_worker(&self) -> Option<usize> {
        self.free.first().copied()
    }

    /// Runs the simulation on the lowest free worker; returns (worker,
    /// dispatch time).
    pub fn submit(&mut self, task_id: u64, state: StateId) -> Result<(usize, f64)> {
        let w = self
            .free
            .pop_first()
            .ok_or_else(|| Error::Invariant("dispatch with every worker busy".into()))?;
        let value = self.env.simulate(state, &mut self.workers[w])?;
        let len = match self.clock.interval {
            SimInterval::Constant { steps } => steps,
            SimInterval::Uniform { lo, hi } => self.interval_rng.random_range(lo..=hi),
        };
        let at = self.now;
        let ready = at + len;
        self.pending.push((ready, Completion { task_id, state, value, worker: w, time: ready as f64 }));
        if self.clock.timing == Timing::Pipeline {
            self.now += 1;
        }
        Ok((w, at as f64))
    }

    fn take_earliest(&mut self, limit: Option<u64>) -> Option<Completion> {
        let i = (0..self.pending.len())
            .filter(|&i| limit.is_none_or(|l| self.pending[i].0 <= l))
            .min_by_key(|&i| (self.pending[i].0, self.pending[i].1.task_id))?;
        let (_, c) = self.pending.swap_remove(i);
        self.free.insert(c.worker);
        Some(c)
    }

    /// A task that has already finished, if any.
    pub fn try_collect(&mut self) -> Option<Completion> {
        self.take_earliest(Some(self.now))
    }

    /// Advances the clock to the next finishing task and returns it.
    pub fn wait(&mut self) -> Result<Completion> {
        let c = self
            .take_earliest(None)
            .ok_or_else(|| Error::Invariant("wait with no task in flight and no free worker".into()))?;
        self.now = self.now.max(c.time as u64);
        Ok(c)
    }
}

struct WorkerTask {
    task_id: u64,
    state: StateId,
}

/// M simulation threads, each with its own stream, fed through
/// per-worker queues and reporting on one shared result queue.
pub struct ThreadPool {
    senders: Vec<Sender<WorkerTask>>,
    results: Receiver<std::result::Result<Completion, String>>,
    handles: Vec<thread::JoinHandle<()>>,
    free: BTreeSet<usize>,
    start: Instant,
    in_flight: usize,
}

impl ThreadPool {
    pub fn new(env: Arc<Mdp>, workers: usize, delay: Duration, seed: u64) -> Self {
        let (rtx, results) = unbounded();
        let start = Instant::now();
        let mut senders = Vec::new();
        let mut handles = Vec::new();
        for w in 0..workers {
            let (tx, rx) = bounded::<WorkerTask>(1);
            let rtx = rtx.clone();
            let env = Arc::clone(&env);
            handles.push(thread::spawn(move || {
                let mut r = rng::worker(seed, w);
                while let Ok(task) = rx.recv() {
                    let out = env.simulate(task.state, &mut r).map_err(|e| e.to_string());
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    let msg = out.map(|value| Completion {
                        task_id: task.task_id,
                        state: task.state,
                        value,
                        worker: w,
                        time: start.elapsed().as_secs_f64() * 1e3,
                    });
                    if rtx.send(msg).is_err() {
                        break;
                    }
                }
            }));
            senders.push(tx);
        }
        Self { senders, results, handles, free: (0..workers).collect(), start, in_flight: 0 }
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn free_worker(&self) -> Option<usize> {
        self.free.first().copied()
    }

    pub fn submit(&mut self, task_id: u64, state: StateId) -> Result<(usize, f64)> {
        let w = self
            .free
            .pop_first()
            .ok_or_else(|| Error::Invariant("dispatch with every worker busy".into()))?;
        let at = self.start.elapsed().as_secs_f64() * 1e3;
        self.senders[w]
            .send(WorkerTask { task_id, state })
            .map_err(|_| Error::Worker(format!("worker {w} is gone")))?;
        self.in_flight += 1;
        Ok((w, at))
    }

    fn accept(&mut self, msg: std::result::Result<Completion, String>) -> Result<Completion> {
        let c = msg.map_err(Error::Worker)?;
        self.free.insert(c.worker);
        self.in_flight -= 1;
        Ok(c)
    }

    pub fn try_collect(&mut self) -> Result<Option<Completion>> {
        match self.results.try_recv() {
            Ok(msg) => self.accept(msg).map(Some),
            Err(_) => Ok(None),
        }
    }

    pub fn wait(&mut self) -> Result<Completion> {
        if self.in_flight == 0 {
            return Err(Error::Invariant("wait with no task in flight and no free worker".into()));
        }
        loop {
            match self.results.recv_timeout(Duration::from_millis(200)) {
                Ok(msg) => return self.accept(msg),
                Err(RecvTimeoutError::Timeout) => {
                    if let Some(w) = self.handles.iter().position(|h| h.is_finished()) {
                        return Err(Error::Worker(format!("worker {w} stopped unexpectedly")));
                    }
                }
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Worker("all workers stopped".into())),
            }
        }
    }
}

impl Drop for ThreadPool {
    fn drop(&mut self) {
        self.senders.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

enum Backend<'a> {
    Virtual(VirtualScheduler<'a>),
    Threads(ThreadPool),
}

impl Backend<'_> {
    fn free_worker(&self) -> Option<usize> {
        match self {
            Backend::Virtual(s) => s.free_worker(),
            Backend::Threads(p) => p.free_worker(),
        }
    }

    fn in_flight(&self) -> usize {
        match self {
            Backend::Virtual(s) => s.in_flight(),
            Backend::Threads(p) => p.in_flight(),
        }
    }

    fn submit(&mut self, id: u64, state: StateId) -> Result<(usize, f64)> {
        match self {
            Backend::Virtual(s) => s.submit(id, state),
            Backend::Threads(p) => p.submit(id, state),
        }
    }

    fn try_collect(&mut self) -> Result<Option<Completion>> {
        match self {
            Backend::Virtual(s) => Ok(s.try_collect()),
            Backend::Threads(p) => p.try_collect(),
        }
    }

    fn wait(&mut self) -> Result<Completion> {
        match self {
            Backend::Virtual(s) => s.wait(),
            Backend::Threads(p) => p.wait(),
        }
    }
}

struct InFlight {
    tree: usize,
    keys: Vec<EdgeKey>,
    path: Vec<PathStep>,
    leaf: StateId,
    expected: f64,
    dispatched_at: f64,
    snapshot: Vec<(EdgeKey, u32)>,
}

struct Selection {
    path: Vec<PathStep>,
    leaf: StateId,
    /// Edge into a node that just received its first child.
    first_expansion: Option<EdgeKey>,
}

/// Walks the tree policy from the root, expanding at most one edge.
fn select_path(tree: &mut SearchTree, env: &Mdp, cfg: &SpecializationConfig, rng: &mut Rng) -> Result<Selection> {
    let root = tree.root();
    let mut s = root;
    let mut path = Vec::new();
    let mut first_expansion = None;
    loop {
        if env.is_terminal(s) {
            break;
        }
        let node = tree.node(s).expect("path nodes are in the tree");
        if node.depth >= cfg.limits.max_depth {
            break;
        }
        let has_children = !node.edges.is_empty();
        let parent = node.parent;
        if let Some(a) = tree.next_unexpanded(env, s) {
            let expand = if s == root && !has_children {
                true
            } else if cfg.expand_probability >= 1.0 {
                true
            } else {
                rng.random::<f64>() < cfg.expand_probability
            };
            if expand {
                let child = tree.expand(env, s, a)?;
                if !has_children {
                    first_expansion = parent;
                }
                path.push(PathStep { state: s, action: a, kind: SelectKind::Expand, o_bar: 0.0, blocked: false });
                s = child;
                break;
            }
            if !has_children {
                break;
            }
        }
        if tree.node(s).is_none_or(|n| n.edges.is_empty()) {
            break;
        }
        let c = cfg.exploration_constant(tree, s);
        let (a, kind) = tree.select_action(s, cfg, c)?;
        let edge = tree.edge((s, a)).expect("selected edge exists");
        let blocked = cfg.threshold().is_some_and(|t| edge.stats.o_bar >= t);
        path.push(PathStep { state: s, action: a, kind, o_bar: edge.stats.o_bar, blocked });
        s = edge.child;
    }
    Ok(Selection { path, leaf: s, first_expansion })
}

struct Coordinator<'a> {
    env: &'a Mdp,
    cfg: &'a SpecializationConfig,
    trees: Vec<Arc<SearchTree>>,
    shared: bool,
    sync_on_dispatch: bool,
    stats: RunStats,
}

impl Coordinator<'_> {
    fn slot(&self, m: usize) -> usize {
        if self.shared { 0 } else { m }
    }

    /// Trees that differ from one another, the first tree leading.
    fn distinct(&self) -> Vec<&SearchTree> {
        let mut out: Vec<&Arc<SearchTree>> = Vec::new();
        for t in &self.trees {
            if !out.iter().any(|u| Arc::ptr_eq(u, t)) {
                out.push(t);
            }
        }
        out.into_iter().map(|a| a.as_ref()).collect()
    }

    fn merged(&self) -> Result<SearchTree> {
        let mut m = sync_trees(&self.distinct())?;
        m.refresh_pseudo(self.cfg);
        Ok(m)
    }

    fn sync(&mut self) -> Result<()> {
        if self.shared {
            return Ok(());
        }
        let merged = Arc::new(self.merged()?);
        for t in &mut self.trees {
            *t = Arc::clone(&merged);
        }
        self.stats.syncs += 1;
        Ok(())
    }

    fn check(&self, initiated: usize, flow: bool) -> Result<()> {
        if self.sync_on_dispatch && !self.shared && self.distinct().len() != 1 {
            return Err(Error::Invariant("trees differ at the start of a rollout".into()));
        }
        if flow {
            let m = self.merged()?;
            if m.root_flow() != initiated as u64 {
                return Err(Error::Invariant(format!(
                    "root flow {} differs from {initiated} initiated rollouts",
                    m.root_flow()
                )));
            }
        }
        Ok(())
    }
}

/// Runs `opts.n_rollouts` simulations under `cfg` and returns the merged
/// final tree with the rollout trace.
pub fn run_search(env: &Mdp, cfg: &SpecializationConfig, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let n = opts.n_rollouts;
    if n == 0 {
        return Err(Error::Config("rollout budget must be at least 1".into()));
    }
    let root = opts.root.unwrap_or(env.root());
    if !env.contains(root) {
        return Err(Error::Env(format!("unknown root state {root}")));
    }
    let m = cfg.workers;
    let tau = cfg.sync_interval(n);
    let shared = tau == 1 && (opts.shared_tree || cfg.aggregate_on_first_expand);
    let start = Instant::now();

    let base = Arc::new(SearchTree::new(env, root, cfg.limits)?);
    let mut co = Coordinator {
        env,
        cfg,
        trees: vec![base; if shared { 1 } else { m }],
        shared,
        sync_on_dispatch: tau == 1,
        stats: RunStats::default(),
    };
    let mut backend = match opts.mode {
        Mode::Virtual(clock) => Backend::Virtual(VirtualScheduler::new(env, m, clock, opts.seed)?),
        Mode::Parallel { delay_ms } => Backend::Threads(ThreadPool::new(
            Arc::new(env.clone()),
            m,
            Duration::from_millis(delay_ms),
            opts.seed,
        )),
    };
    let time_unit = match opts.mode {
        Mode::Virtual(_) => TimeUnit::RolloutStep,
        Mode::Parallel { .. } => TimeUnit::Millis,
    };

    let mut master = rng::coordinator(opts.seed);
    let v_star = env.optimal_value(root)?;
    let gamma = env.discount();
    let flow_checked = !cfg.aggregate_on_first_expand;

    let mut m_prev = m - 1;
    let mut freed: VecDeque<usize> = (0..m).collect();
    let mut in_flight: HashMap<u64, InFlight> = HashMap::new();
    let mut live: BTreeMap<EdgeKey, u32> = BTreeMap::new();
    let mut trace = RolloutTrace { time_unit: Some(time_unit), ..RolloutTrace::default() };
    let mut probe = None;
    let mut dispatched = 0usize;
    let mut completed = 0usize;

    while completed < n {
        if let Some(done) = backend.try_collect()? {
            complete(&mut co, &mut trace, &mut in_flight, &mut live, &mut freed, done, &mut completed, n, tau, v_star)?;
            continue;
        }
        if dispatched < n && backend.free_worker().is_some() {
            if opts.check_invariants {
                co.check(dispatched, flow_checked)?;
            }
            let m_hat = freed.pop_front().expect("a free worker implies a freed slot");
            let mi = cfg.select_tree(m_prev, m_hat, &mut master);
            m_prev = mi;
            let slot = co.slot(mi);

            if opts.diagnostics {
                let t = &co.trees[slot];
                for (key, e) in t.edges() {
                    if e.stats.n > 0 {
                        use crate::tree::EdgePolicy;
                        let qb = cfg.q_bar(&e.stats);
                        if qb.is_finite() && !cfg.blocked(&e.stats) {
                            trace.q_bar_history.entry(key).or_default().push(qb);
                        }
                    }
                }
            }

            let tree = Arc::make_mut(&mut co.trees[slot]);
            let sel = select_path(tree, env, cfg, &mut master)?;
            if let (true, Some(pe)) = (cfg.aggregate_on_first_expand, sel.first_expansion) {
                crate::algos::aggregate_on_first_expand(tree, pe)?;
            }
            let keys: Vec<EdgeKey> = sel.path.iter().map(|p| (p.state, p.action)).collect();
            tree.pre_update(&keys, cfg)?;
            co.stats.fail_open_selections += sel.path.iter().filter(|p| p.kind == SelectKind::FailOpen).count();
            co.stats.blocked_selections += sel.path.iter().filter(|p| p.blocked).count();

            let snapshot = if opts.diagnostics {
                live.iter().filter(|(_, c)| **c > 0).map(|(k, c)| (*k, *c)).collect()
            } else {
                Vec::new()
            };
            for k in &keys {
                *live.entry(*k).or_insert(0) += 1;
            }

            let mut expected = 0.0;
            let mut scale = 1.0;
            for k in &keys {
                expected += scale * env.transition(k.0, k.1)?.reward;
                scale *= gamma;
            }
            expected += scale * env.rollout_mean(sel.leaf);

            let id = dispatched as u64;
            let (_, at) = backend.submit(id, sel.leaf)?;
            in_flight.insert(
                id,
                InFlight { tree: mi, keys, path: sel.path, leaf: sel.leaf, expected, dispatched_at: at, snapshot },
            );
            dispatched += 1;
            co.stats.max_in_flight = co.stats.max_in_flight.max(backend.in_flight());
            if co.sync_on_dispatch {
                co.sync()?;
            }
            if opts.probe && dispatched == n {
                probe = Some(co.merged()?);
            }
            continue;
        }
        let done = backend.wait()?;
        complete(&mut co, &mut trace, &mut in_flight, &mut live, &mut freed, done, &mut completed, n, tau, v_star)?;
    }

    let mut tree = sync_trees(&co.distinct())?;
    tree.refresh_pseudo(cfg);
    co.stats.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(RunOutput { config: cfg.clone(), tree, trace, probe, stats: co.stats })
}

#[allow(clippy::too_many_arguments)]
fn complete(
    co: &mut Coordinator<'_>,
    trace: &mut RolloutTrace,
    in_flight: &mut HashMap<u64, InFlight>,
    live: &mut BTreeMap<EdgeKey, u32>,
    freed: &mut VecDeque<usize>,
    done: Completion,
    completed: &mut usize,
    n: usize,
    tau: usize,
    v_star: f64,
) -> Result<()> {
    let task = in_flight
        .remove(&done.task_id)
        .ok_or_else(|| Error::Invariant(format!("unknown task {}", done.task_id)))?;
    let slot = co.slot(task.tree);
    let tree = Arc::make_mut(&mut co.trees[slot]);
    let value = tree.backpropagate(&task.keys, done.value, done.task_id, co.cfg)?;
    for k in &task.keys {
        let c = live.get_mut(k).expect("live count for an in-flight edge");
        *c -= 1;
        if *c == 0 {
            live.remove(k);
        }
    }
    *completed += 1;
    let due = match co.cfg.sync {
        SyncInterval::Every(_) => *completed % tau == 0,
        SyncInterval::AtEnd => *completed == n,
    };
    if due {
        co.sync()?;
    }
    freed.push_back(task.tree);
    trace.records.push(RolloutRecord {
        index: *completed,
        task_id: done.task_id,
        tree: task.tree,
        worker: done.worker,
        root_action: task.path.first().map(|p| p.action),
        value,
        expected_value: task.expected,
        optimal_value: v_star,
        dispatched_at: task.dispatched_at,
        completed_at: done.time,
        leaf: task.leaf,
        path: task.path,
        in_flight: task.snapshot,
    });
    let _ = co.env;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algos::{make_specialization, AlgoKind, AlgoParams};
    use crate::env::{make_depth_two, make_random_tree, RandomTreeParams};

    fn cfg(kind: AlgoKind, m: usize) -> SpecializationConfig {
        make_specialization(kind, m, &AlgoParams::defaults()).unwrap()
    }

    #[test]
    fn pipeline_returns_one_task_per_step() {
        let env = make_depth_two(&[0.0, 0.5], 1.0, 1).unwrap();
        let mut s = VirtualScheduler::new(&env, 3, VirtualClock::pipeline(3), 9).unwrap();
        for id in 0..3 {
            assert_eq!(s.submit(id, 1).unwrap(), (id as usize, id as f64));
        }
        assert!(s.free_worker().is_none());
        // The clock stands at 3 after three dispatches, when task 0 is due.
        let c = s.try_collect().unwrap();
        assert_eq!((c.task_id, c.time, s.now()), (0, 3.0, 3));
        assert!(s.try_collect().is_none());
        s.submit(3, 1).unwrap();
        assert_eq!(s.try_collect().unwrap().task_id, 1);
    }

    #[test]
    fn lockstep_finishes_batches_together() {
        let env = make_depth_two(&[0.0, 0.5], 1.0, 1).unwrap();
        let mut s = VirtualScheduler::new(&env, 3, VirtualClock::lockstep(3), 9).unwrap();
        for id in 0..3 {
            assert_eq!(s.submit(id, 1).unwrap().1, 0.0);
        }
        assert_eq!(s.wait().unwrap().task_id, 0);
        assert_eq!(s.try_collect().unwrap().task_id, 1);
        assert_eq!(s.try_collect().unwrap().task_id, 2);
        assert!(s.try_collect().is_none());
        assert_eq!(s.now(), 3);
    }

    #[test]
    fn wait_without_work_is_an_error() {
        let env = make_depth_two(&[0.0, 0.5], 1.0, 1).unwrap();
        let mut s = VirtualScheduler::new(&env, 2, VirtualClock::pipeline(2), 0).unwrap();
        assert!(matches!(s.wait(), Err(Error::Invariant(_))));
        let bad = VirtualClock { timing: Timing::Pipeline, interval: SimInterval::Uniform { lo: 3, hi: 2 } };
        assert!(VirtualScheduler::new(&env, 2, bad, 0).is_err());
    }

    #[test]
    fn every_rollout_completes_and_flow_is_conserved() {
        let env = make_random_tree(&RandomTreeParams::new(4, 3, 5)).unwrap();
        for kind in AlgoKind::ALL {
            let m = if kind == AlgoKind::Uct { 1 } else { 4 };
            let c = cfg(kind, m);
            let mut opts = RunOptions::virtual_default(&c, 200, 11);
            opts.check_invariants = true;
            let out = run_search(&env, &c, &opts).unwrap();
            assert_eq!(out.trace.len(), 200, "{kind}");
            if !c.aggregate_on_first_expand {
                assert_eq!(out.tree.root_flow(), 200, "{kind}");
            }
            assert!(out.tree.edges().all(|(_, e)| e.stats.o == 0), "{kind}");
            assert!(out.stats.max_in_flight <= m);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let env = make_random_tree(&RandomTreeParams::new(3, 4, 2)).unwrap();
        let c = cfg(AlgoKind::WuUct, 4);
        let opts = RunOptions::virtual_default(&c, 300, 4);
        let a = run_search(&env, &c, &opts).unwrap();
        let b = run_search(&env, &c, &opts).unwrap();
        assert_eq!(a.trace.records, b.trace.records);
        assert_eq!(a.tree.dump(), b.tree.dump());
    }

    #[test]
    fn one_worker_collapses_to_uct() {
        let env = make_random_tree(&RandomTreeParams::new(3, 4, 5)).unwrap();
        let uct = cfg(AlgoKind::Uct, 1);
        let base = run_search(&env, &uct, &RunOptions::virtual_default(&uct, 200, 3)).unwrap();
        for kind in [AlgoKind::Leafp, AlgoKind::Rootp, AlgoKind::Treep, AlgoKind::VlHard, AlgoKind::VlSoft, AlgoKind::WuUct] {
            let c = cfg(kind, 1);
            let o = run_search(&env, &c, &RunOptions::virtual_default(&c, 200, 3)).unwrap();
            let stats = |t: &SearchTree| t.edges().map(|(k, e)| (k, e.stats.n, e.stats.q.to_bits())).collect::<Vec<_>>();
            assert_eq!(stats(&o.tree), stats(&base.tree), "{kind}");
        }
    }

    #[test]
    fn shared_tree_matches_per_worker_copies() {
        let env = make_random_tree(&RandomTreeParams::new(3, 3, 8)).unwrap();
        for kind in [AlgoKind::Treep, AlgoKind::WuUct, AlgoKind::VlHard, AlgoKind::VlSoft] {
            let c = cfg(kind, 4);
            let mut opts = RunOptions::virtual_default(&c, 250, 6);
            let fast = run_search(&env, &c, &opts).unwrap();
            opts.shared_tree = false;
            opts.check_invariants = true;
            let slow = run_search(&env, &c, &opts).unwrap();
            let paths = |o: &RunOutput| o.trace.records.iter().map(|r| r.path.clone()).collect::<Vec<_>>();
            assert_eq!(paths(&fast), paths(&slow), "{kind}");
            for ((k1, e1), (k2, e2)) in fast.tree.edges().zip(slow.tree.edges()) {
                assert_eq!((k1, e1.stats.n), (k2, e2.stats.n));
                assert!((e1.stats.q - e2.stats.q).abs() < 1e-9, "{kind} {k1:?}");
            }
        }
    }

    #[test]
    fn diagnostics_snapshot_counts_other_rollouts() {
        let env = make_depth_two(&[0.0, 0.3, 0.6], 1.0, 2).unwrap();
        let c = cfg(AlgoKind::WuUct, 3);
        let mut opts = RunOptions::virtual_default(&c, 60, 1);
        opts.diagnostics = true;
        opts.probe = true;
        let out = run_search(&env, &c, &opts).unwrap();
        let mut by_id = out.trace.records.clone();
        by_id.sort_by_key(|r| r.task_id);
        assert!(by_id[0].in_flight.is_empty());
        // In steady state two other simulations are running.
        for r in &by_id[3..] {
            assert_eq!(r.in_flight.iter().map(|(_, c)| c).sum::<u32>(), 2);
        }
        let probe = out.probe.unwrap();
        assert_eq!(probe.root_flow(), 60);
        assert!(!out.trace.q_bar_history.is_empty());
    }

    #[test]
    fn uniform_intervals_keep_every_rollout() {
        let env = make_random_tree(&RandomTreeParams::new(3, 3, 1)).unwrap();
        let c = cfg(AlgoKind::VlHard, 4);
        let clock = VirtualClock { timing: Timing::Pipeline, interval: SimInterval::Uniform { lo: 1, hi: 9 } };
        let out = run_search(&env, &c, &RunOptions::new(150, 3, Mode::Virtual(clock))).unwrap();
        assert_eq!(out.tree.root_flow(), 150);
        let mut ids: Vec<u64> = out.trace.records.iter().map(|r| r.task_id).collect();
        ids.sort();
        assert_eq!(ids, (0..150).collect::<Vec<_>>());
    }

    #[test]
    fn threads_complete_the_budget() {
        let env = make_random_tree(&RandomTreeParams::new(3, 3, 4)).unwrap();
        let c = cfg(AlgoKind::WuUct, 3);
        let out = run_search(&env, &c, &RunOptions::new(60, 2, Mode::Parallel { delay_ms: 0 })).unwrap();
        assert_eq!(out.tree.root_flow(), 60);
        assert_eq!(out.trace.time_unit, Some(TimeUnit::Millis));
    }

    #[test]
    fn bad_requests_are_rejected() {
        let env = make_depth_two(&[0.0, 0.5], 1.0, 1).unwrap();
        let c = cfg(AlgoKind::Treep, 2);
        assert!(matches!(run_search(&env, &c, &RunOptions::virtual_default(&c, 0, 1)), Err(Error::Config(_))));
        let mut o = RunOptions::virtual_default(&c, 5, 1);
        o.root = Some(99);
        assert!(matches!(run_search(&env, &c, &o), Err(Error::Env(_))));
    }
}
