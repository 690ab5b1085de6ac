//! Search tree with per-edge statistics, the modified tree policy,
//! backpropagation and multi-tree synchronization.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{Action, Mdp, StateId};
use crate::error::{Error, Result};

pub type EdgeKey = (StateId, Action);

pub const DEFAULT_MAX_DEPTH: usize = 100;
pub const DEFAULT_MAX_WIDTH: usize = 20;

/// One simulation return stored at an edge. `weight` counts how many
/// simulations were folded into this record (1 unless aggregated).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnRecord {
    pub value: f64,
    pub synced: bool,
    pub sim_id: u64,
    pub weight: u32,
}

#[derive(Debug)]
struct Chunk {
    records: Vec<ReturnRecord>,
    prev: Option<Arc<Chunk>>,
}

impl Drop for Chunk {
    // Long chains would otherwise drop recursively.
    fn drop(&mut self) {
        let mut next = self.prev.take();
        while let Some(arc) = next {
            match Arc::try_unwrap(arc) {
                Ok(mut chunk) => next = chunk.prev.take(),
                Err(_) => break,
            }
        }
    }
}

/// Return records of one edge. Synced records live in an immutable chain
/// shared between tree copies; unsynced ones are owned by the tree.
#[derive(Clone, Debug, Default)]
pub struct RecordLog {
    synced: Option<Arc<Chunk>>,
    synced_len: usize,
    synced_sum: f64,
    synced_sq: f64,
    pending: Vec<ReturnRecord>,
}

impl RecordLog {
    pub fn len(&self) -> usize {
        self.synced_len + self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn synced_len(&self) -> usize {
        self.synced_len
    }

    pub fn pending(&self) -> &[ReturnRecord] {
        &self.pending
    }

    /// All records, oldest first.
    pub fn to_vec(&self) -> Vec<ReturnRecord> {
        let mut chunks = Vec::new();
        let mut cur = self.synced.as_deref();
        while let Some(c) = cur {
            chunks.push(c);
            cur = c.prev.as_deref();
        }
        let mut out = Vec::with_capacity(self.len());
        for c in chunks.iter().rev() {
            out.extend_from_slice(&c.records);
        }
        out.extend_from_slice(&self.pending);
        out
    }

    pub fn sum(&self) -> f64 {
        self.pending.iter().fold(self.synced_sum, |acc, r| acc + r.value)
    }

    pub fn sum_sq(&self) -> f64 {
        self.pending.iter().fold(self.synced_sq, |acc, r| acc + r.value * r.value)
    }

    fn push(&mut self, r: ReturnRecord) {
        self.pending.push(r);
    }

    fn append_synced(&mut self, records: Vec<ReturnRecord>) {
        if records.is_empty() {
            return;
        }
        for r in &records {
            self.synced_sum += r.value;
            self.synced_sq += r.value * r.value;
        }
        self.synced_len += records.len();
        let prev = self.synced.take();
        self.synced = Some(Arc::new(Chunk { records, prev }));
    }

    fn replace_all(&mut self, records: Vec<ReturnRecord>, synced: bool) {
        *self = RecordLog::default();
        if synced {
            self.append_synced(records);
        } else {
            self.pending = records;
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EdgeStats {
    pub q: f64,
    pub n: u64,
    pub o: u64,
    pub q_tilde: f64,
    pub n_tilde: f64,
    pub o_bar: f64,
    o_at_sync: u64,
    log: RecordLog,
}

impl EdgeStats {
    pub fn records(&self) -> &RecordLog {
        &self.log
    }

    /// Marks one more simulation in flight through this edge.
    pub fn begin(&mut self) {
        self.o += 1;
    }

    /// Folds a completed simulation's value into the edge (incremental mean).
    pub fn complete(&mut self, value: f64, sim_id: u64) -> Result<()> {
        if self.o == 0 {
            return Err(Error::Invariant("incomplete count would become negative".into()));
        }
        self.o -= 1;
        self.n += 1;
        let n = self.n as f64;
        self.q = (n - 1.0) / n * self.q + value / n;
        self.log.push(ReturnRecord { value, synced: false, sim_id, weight: 1 });
        Ok(())
    }

    /// Replaces every record by a single one carrying the current mean.
    /// Q is unchanged; N becomes 1.
    pub fn collapse_records(&mut self) {
        if self.n <= 1 {
            return;
        }
        let all = self.log.to_vec();
        let weight = all.iter().map(|r| r.weight).sum();
        let sim_id = all.first().map_or(0, |r| r.sim_id);
        let rec = ReturnRecord { value: self.q, synced: true, sim_id, weight };
        self.log.replace_all(vec![rec], true);
        self.n = 1;
    }
}

#[derive(Clone, Debug)]
pub struct Edge {
    pub action: Action,
    pub child: StateId,
    pub reward: f64,
    pub stats: EdgeStats,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub state: StateId,
    pub depth: usize,
    pub parent: Option<EdgeKey>,
    /// Expanded edges, sorted by action.
    pub edges: Vec<Edge>,
}

impl Node {
    pub fn edge(&self, a: Action) -> Option<&Edge> {
        self.edges.binary_search_by_key(&a, |e| e.action).ok().map(|i| &self.edges[i])
    }

    fn edge_mut(&mut self, a: Action) -> Option<&mut Edge> {
        self.edges.binary_search_by_key(&a, |e| e.action).ok().map(move |i| &mut self.edges[i])
    }
}

/// How an action was chosen at a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectKind {
    /// Newly expanded by this rollout.
    Expand,
    /// Expanded edge with N̄ = 0, taken before any UCB comparison.
    FirstVisit,
    Ucb,
    /// Every edge was blocked; the one with the smallest Ō was taken.
    FailOpen,
}

/// Modified statistics Q̄, N̄ and pseudo-updates of one specialization.
pub trait EdgePolicy {
    fn q_bar(&self, e: &EdgeStats) -> f64;
    fn n_bar(&self, e: &EdgeStats) -> f64;
    /// Edges excluded from selection while an unblocked sibling exists.
    fn blocked(&self, _e: &EdgeStats) -> bool {
        false
    }
    /// (Q̃, Ñ) as functions of the edge's current statistics.
    fn pseudo(&self, _e: &EdgeStats) -> (f64, f64) {
        (0.0, 0.0)
    }
    /// Called after O has been incremented on a path edge.
    fn on_begin(&self, _e: &mut EdgeStats) {}
}

/// Plain UCT statistics: Q̄ = Q, N̄ = N.
pub struct PlainPolicy;

impl EdgePolicy for PlainPolicy {
    fn q_bar(&self, e: &EdgeStats) -> f64 {
        e.q
    }
    fn n_bar(&self, e: &EdgeStats) -> f64 {
        e.n as f64
    }
}

pub fn ucb_score(q_bar: f64, n_bar: f64, total: f64, c: f64) -> f64 {
    q_bar + c * (2.0 * total.max(1.0).ln() / n_bar).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeLimits {
    pub max_depth: usize,
    pub max_width: usize,
}

impl Default for TreeLimits {
    fn default() -> Self {
        Self { max_depth: DEFAULT_MAX_DEPTH, max_width: DEFAULT_MAX_WIDTH }
    }
}

#[derive(Clone, Debug)]
pub struct SearchTree {
    root: StateId,
    discount: f64,
    limits: TreeLimits,
    nodes: BTreeMap<StateId, Node>,
}

impl SearchTree {
    pub fn new(env: &Mdp, root: StateId, limits: TreeLimits) -> Result<Self> {
        if !env.contains(root) {
            return Err(Error::Env(format!("unknown root state {root}")));
        }
        let mut nodes = BTreeMap::new();
        nodes.insert(root, Node { state: root, depth: 0, parent: None, edges: Vec::new() });
        Ok(Self { root, discount: env.discount(), limits, nodes })
    }

    pub fn root(&self) -> StateId {
        self.root
    }

    pub fn limits(&self) -> TreeLimits {
        self.limits
    }

    pub fn node(&self, s: StateId) -> Option<&Node> {
        self.nodes.get(&s)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.values().map(|n| n.edges.len()).sum()
    }

    pub fn edge(&self, (s, a): EdgeKey) -> Option<&Edge> {
        self.nodes.get(&s)?.edge(a)
    }

    pub fn edge_mut(&mut self, (s, a): EdgeKey) -> Option<&mut Edge> {
        self.nodes.get_mut(&s)?.edge_mut(a)
    }

    pub fn edges(&self) -> impl Iterator<Item = (EdgeKey, &Edge)> {
        self.nodes.values().flat_map(|n| n.edges.iter().map(move |e| ((n.state, e.action), e)))
    }

    fn stats_mut(&mut self, key: EdgeKey) -> Result<&mut EdgeStats> {
        self.edge_mut(key)
            .map(|e| &mut e.stats)
            .ok_or_else(|| Error::Precondition(format!("edge {key:?} is not in the tree")))
    }

    /// Number of actions the node may eventually expand.
    pub fn expandable_width(&self, env: &Mdp, s: StateId) -> usize {
        env.action_count(s).min(self.limits.max_width)
    }

    /// Lowest-index action that may still be expanded at `s`.
    pub fn next_unexpanded(&self, env: &Mdp, s: StateId) -> Option<Action> {
        let node = self.nodes.get(&s)?;
        if node.depth >= self.limits.max_depth {
            return None;
        }
        (0..self.expandable_width(env, s)).find(|a| node.edge(*a).is_none())
    }

    pub fn expand(&mut self, env: &Mdp, s: StateId, a: Action) -> Result<StateId> {
        let limits = self.limits;
        let node = self
            .nodes
            .get(&s)
            .ok_or_else(|| Error::Precondition(format!("state {s} is not in the tree")))?;
        if node.edge(a).is_some() {
            return Err(Error::Precondition(format!("edge ({s}, {a}) already expanded")));
        }
        if node.depth >= limits.max_depth {
            return Err(Error::Capacity(format!("state {s} is at the depth limit {}", limits.max_depth)));
        }
        if a >= limits.max_width {
            return Err(Error::Capacity(format!("action {a} exceeds the width limit {}", limits.max_width)));
        }
        let t = env.transition(s, a)?;
        let depth = node.depth + 1;
        if self.nodes.contains_key(&t.next) {
            return Err(Error::Env(format!("state {} reached twice", t.next)));
        }
        let node = self.nodes.get_mut(&s).expect("checked above");
        let pos = node.edges.partition_point(|e| e.action < a);
        node.edges.insert(pos, Edge { action: a, child: t.next, reward: t.reward, stats: EdgeStats::default() });
        self.nodes.insert(t.next, Node { state: t.next, depth, parent: Some((s, a)), edges: Vec::new() });
        Ok(t.next)
    }

    /// Pre-update of a freshly selected path: O += 1 and pseudo statistics.
    pub fn pre_update(&mut self, path: &[EdgeKey], policy: &dyn EdgePolicy) -> Result<()> {
        for &key in path {
            let st = self.stats_mut(key)?;
            st.begin();
            policy.on_begin(st);
            (st.q_tilde, st.n_tilde) = policy.pseudo(st);
        }
        Ok(())
    }

    /// Backs a leaf value up the path; returns the value at the path's first
    /// state. Each edge averages R(s,a) + γ·V(s') and records that value.
    pub fn backpropagate(&mut self, path: &[EdgeKey], leaf_value: f64, sim_id: u64, policy: &dyn EdgePolicy) -> Result<f64> {
        let g = self.discount;
        let mut v = leaf_value;
        for &key in path.iter().rev() {
            let edge = self
                .edge_mut(key)
                .ok_or_else(|| Error::Precondition(format!("edge {key:?} is not in the tree")))?;
            v = edge.reward + g * v;
            edge.stats.complete(v, sim_id)?;
            (edge.stats.q_tilde, edge.stats.n_tilde) = policy.pseudo(&edge.stats);
        }
        Ok(v)
    }

    /// Population standard deviation of all values backed up through `s`.
    pub fn value_spread(&self, s: StateId) -> f64 {
        let Some(node) = self.nodes.get(&s) else { return 0.0 };
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for e in &node.edges {
            n += e.stats.log.len();
            sum += e.stats.log.sum();
            sq += e.stats.log.sum_sq();
        }
        if n < 2 {
            return 0.0;
        }
        let mean = sum / n as f64;
        (sq / n as f64 - mean * mean).max(0.0).sqrt()
    }

    /// Argmax of Q̄ + c·√(2 ln ΣN̄ / N̄) over expanded actions of `s`.
    pub fn select_action(&self, s: StateId, policy: &dyn EdgePolicy, c: f64) -> Result<(Action, SelectKind)> {
        let node = self
            .nodes
            .get(&s)
            .ok_or_else(|| Error::Precondition(format!("state {s} is not in the tree")))?;
        if node.edges.is_empty() {
            return Err(Error::Precondition(format!("state {s} has no expanded children")));
        }
        let mut total = 0.0;
        for e in &node.edges {
            let nb = policy.n_bar(&e.stats);
            if nb <= 0.0 {
                return Ok((e.action, SelectKind::FirstVisit));
            }
            total += nb;
        }
        let open = node.edges.iter().any(|e| !policy.blocked(&e.stats));
        if !open {
            let mut low = &node.edges[0];
            for e in &node.edges[1..] {
                if e.stats.o_bar < low.stats.o_bar {
                    low = e;
                }
            }
            return Ok((low.action, SelectKind::FailOpen));
        }
        let mut best: Option<(f64, Action)> = None;
        for e in &node.edges {
            if policy.blocked(&e.stats) {
                continue;
            }
            let score = ucb_score(policy.q_bar(&e.stats), policy.n_bar(&e.stats), total, c);
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, e.action));
            }
        }
        let (_, a) = best.expect("at least one candidate");
        Ok((a, SelectKind::Ucb))
    }

    /// Recomputes Q̃ and Ñ on every edge.
    pub fn refresh_pseudo(&mut self, policy: &dyn EdgePolicy) {
        for node in self.nodes.values_mut() {
            for e in &mut node.edges {
                (e.stats.q_tilde, e.stats.n_tilde) = policy.pseudo(&e.stats);
            }
        }
    }

    /// Root action with the most completed visits; ties go to the higher
    /// Q, then to the lower index.
    pub fn recommend_action(&self) -> Result<Action> {
        let root = &self.nodes[&self.root];
        let mut best: Option<(u64, f64, Action)> = None;
        for e in &root.edges {
            let (n, q) = (e.stats.n, e.stats.q);
            if n == 0 {
                continue;
            }
            if best.is_none_or(|(bn, bq, _)| n > bn || (n == bn && q > bq)) {
                best = Some((n, q, e.action));
            }
        }
        best.map(|(_, _, a)| a)
            .ok_or_else(|| Error::Precondition("root has no visited child".into()))
    }

    /// Sum of N + O over root edges.
    pub fn root_flow(&self) -> u64 {
        self.nodes[&self.root].edges.iter().map(|e| e.stats.n + e.stats.o).sum()
    }

    pub fn dump(&self) -> TreeDump {
        TreeDump {
            root: self.root,
            discount: self.discount,
            max_depth: self.limits.max_depth,
            max_width: self.limits.max_width,
            nodes: self
                .nodes
                .values()
                .map(|n| NodeDump {
                    state: n.state,
                    depth: n.depth,
                    parent: n.parent,
                    edges: n
                        .edges
                        .iter()
                        .map(|e| EdgeDump {
                            action: e.action,
                            child: e.child,
                            reward: e.reward,
                            q: e.stats.q,
                            n: e.stats.n,
                            o: e.stats.o,
                            q_tilde: e.stats.q_tilde,
                            n_tilde: e.stats.n_tilde,
                            o_bar: e.stats.o_bar,
                            records: e.stats.log.to_vec(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Merges M trees: topology union, then per edge the synced records of the
/// first tree plus every tree's unsynced records (re-flagged synced).
/// Q = mean, N = count, O = sum of in-flight counts added since the last sync.
///
/// With a single input tree Q and N are left as they are, so a one-tree run
/// keeps its incremental means bit for bit.
pub fn sync_trees(trees: &[&SearchTree]) -> Result<SearchTree> {
    let first = *trees.first().ok_or_else(|| Error::Precondition("no trees to synchronize".into()))?;
    for t in &trees[1..] {
        if t.root != first.root {
            return Err(Error::Env(format!("root mismatch: {} vs {}", first.root, t.root)));
        }
    }
    let mut out = first.clone();

    for t in &trees[1..] {
        for node in t.nodes.values() {
            let entry = out.nodes.entry(node.state).or_insert_with(|| Node {
                state: node.state,
                depth: node.depth,
                parent: node.parent,
                edges: Vec::new(),
            });
            if entry.parent != node.parent {
                return Err(Error::TopologyMismatch(format!("state {} has different parents", node.state)));
            }
            for e in &node.edges {
                match entry.edges.binary_search_by_key(&e.action, |x| x.action) {
                    Ok(i) => {
                        if entry.edges[i].child != e.child {
                            return Err(Error::TopologyMismatch(format!(
                                "edge ({}, {}) leads to different states",
                                node.state, e.action
                            )));
                        }
                    }
                    Err(i) => {
                        let stats = EdgeStats { o_bar: e.stats.o_bar, ..EdgeStats::default() };
                        entry.edges.insert(i, Edge { action: e.action, child: e.child, reward: e.reward, stats });
                    }
                }
            }
        }
    }

    let single = trees.len() == 1;
    for node in out.nodes.values_mut() {
        for e in &mut node.edges {
            let key = (node.state, e.action);
            let mut fresh = Vec::new();
            let mut o = e.stats.o_at_sync as i64;
            for (i, t) in trees.iter().enumerate() {
                let Some(src) = t.edge(key) else { continue };
                fresh.extend(src.stats.log.pending.iter().map(|r| ReturnRecord { synced: true, ..*r }));
                // The first tree's statistics already seeded `e`.
                let base = if i == 0 { e.stats.o_at_sync } else { src.stats.o_at_sync };
                o += src.stats.o as i64 - base as i64;
            }
            if o < 0 {
                return Err(Error::Invariant(format!("merged incomplete count of {key:?} is negative")));
            }
            let st = &mut e.stats;
            st.log.pending.clear();
            st.log.append_synced(fresh);
            st.o = o as u64;
            st.o_at_sync = st.o;
            if !single {
                st.n = st.log.len() as u64;
                st.q = if st.n == 0 { 0.0 } else { st.log.synced_sum / st.n as f64 };
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDump {
    pub action: Action,
    pub child: StateId,
    pub reward: f64,
    pub q: f64,
    pub n: u64,
    pub o: u64,
    pub q_tilde: f64,
    pub n_tilde: f64,
    pub o_bar: f64,
    pub records: Vec<ReturnRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDump {
    pub state: StateId,
    pub depth: usize,
    pub parent: Option<EdgeKey>,
    pub edges: Vec<EdgeDump>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeDump {
    pub root: StateId,
    pub discount: f64,
    pub max_depth: usize,
    pub max_width: usize,
    pub nodes: Vec<NodeDump>,
}
