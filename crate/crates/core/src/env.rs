//! Deterministic tree-shaped MDPs and the synthetic benchmark tasks.
//!
//! States are dense indices. Every state except the root has exactly one
//! incoming `(state, action)` edge, so a search tree keyed by state never
//! sees transpositions. A state with no actions is terminal and carries an
//! expected terminal value; simulation returns add Gaussian noise.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub type StateId = usize;
pub type Action = usize;

/// Upper bound on the number of states an environment may hold.
pub const MAX_STATES: usize = 4_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub next: StateId,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    #[serde(default)]
    pub actions: Vec<Transition>,
    #[serde(default)]
    pub terminal_mean: f64,
}

/// Serializable description of an MDP. `validate` turns it into an [`Mdp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub states: Vec<StateSpec>,
    #[serde(default)]
    pub root: StateId,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    pub reward_bounds: (f64, f64),
    /// Default-policy horizon; `None` rolls out to a terminal state.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_discount() -> f64 {
    1.0
}

fn default_sigma() -> f64 {
    1.0
}

#[derive(Clone, Debug)]
pub struct Mdp {
    spec: MdpSpec,
    depth: Vec<usize>,
    optimal: Vec<f64>,
    rollout_mean: Vec<f64>,
}

impl StateSpec {
    pub fn terminal(mean: f64) -> Self {
        Self { actions: Vec::new(), terminal_mean: mean }
    }
}

impl Mdp {
    pub fn new(spec: MdpSpec) -> Result<Self> {
        let n = spec.states.len();
        if n == 0 {
            return Err(Error::Env("no states".into()));
        }
        if n > MAX_STATES {
            return Err(Error::Capacity(format!("{n} states exceeds the limit of {MAX_STATES}")));
        }
        if spec.root >= n {
            return Err(Error::Env(format!("root {} is not a declared state", spec.root)));
        }
        if !(spec.discount > 0.0 && spec.discount <= 1.0) {
            return Err(Error::Env(format!("discount {} outside (0, 1]", spec.discount)));
        }
        if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
            return Err(Error::Env(format!("noise sigma {} must be a nonnegative real", spec.noise_sigma)));
        }
        let (lo, hi) = spec.reward_bounds;
        if !(lo <= hi) {
            return Err(Error::Env(format!("empty reward range [{lo}, {hi}]")));
        }
        let in_range = |x: f64| x.is_finite() && x >= lo && x <= hi;
        let mut parent = vec![usize::MAX; n];
        for (s, st) in spec.states.iter().enumerate() {
            if st.actions.is_empty() && !in_range(st.terminal_mean) {
                return Err(Error::Env(format!(
                    "terminal mean {} of state {s} outside [{lo}, {hi}]",
                    st.terminal_mean
                )));
            }
            for (a, t) in st.actions.iter().enumerate() {
                if t.next >= n {
                    return Err(Error::Env(format!("({s}, {a}) leads to undeclared state {}", t.next)));
                }
                if !in_range(t.reward) {
                    return Err(Error::Env(format!("reward {} of ({s}, {a}) outside [{lo}, {hi}]", t.reward)));
                }
                if t.next == spec.root || parent[t.next] != usize::MAX {
                    return Err(Error::Env(format!("state {} has more than one predecessor", t.next)));
                }
                parent[t.next] = s;
            }
        }

        // Breadth-first order from the root; also proves reachability.
        let mut order = Vec::with_capacity(n);
        let mut depth = vec![0usize; n];
        order.push(spec.root);
        let mut head = 0;
        while head < order.len() {
            let s = order[head];
            head += 1;
            for t in &spec.states[s].actions {
                depth[t.next] = depth[s] + 1;
                order.push(t.next);
            }
        }
        if order.len() != n {
            return Err(Error::Env(format!("{} states unreachable from the root", n - order.len())));
        }

        let g = spec.discount;
        let mut optimal = vec![0.0; n];
        let mut rollout_mean = vec![0.0; n];
        for &s in order.iter().rev() {
            let st = &spec.states[s];
            if st.actions.is_empty() {
                optimal[s] = st.terminal_mean;
                rollout_mean[s] = st.terminal_mean;
            } else {
                let mut best = f64::NEG_INFINITY;
                let mut sum = 0.0;
                for t in &st.actions {
                    best = best.max(t.reward + g * optimal[t.next]);
                    sum += t.reward + g * rollout_mean[t.next];
                }
                optimal[s] = best;
                rollout_mean[s] = sum / st.actions.len() as f64;
            }
        }
        Ok(Self { spec, depth, optimal, rollout_mean })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MdpSpec = serde_json::from_str(text).map_err(|e| Error::Env(e.to_string()))?;
        Self::new(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("mdp spec serializes")
    }

    pub fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    pub fn root(&self) -> StateId {
        self.spec.root
    }

    pub fn state_count(&self) -> usize {
        self.spec.states.len()
    }

    pub fn discount(&self) -> f64 {
        self.spec.discount
    }

    pub fn noise_sigma(&self) -> f64 {
        self.spec.noise_sigma
    }

    pub fn seed(&self) -> u64 {
        self.spec.seed
    }

    pub fn reward_bounds(&self) -> (f64, f64) {
        self.spec.reward_bounds
    }

    pub fn contains(&self, s: StateId) -> bool {
        s < self.spec.states.len()
    }

    pub fn action_count(&self, s: StateId) -> usize {
        self.spec.states.get(s).map_or(0, |st| st.actions.len())
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        self.action_count(s) == 0
    }

    /// Distance from the root.
    pub fn depth(&self, s: StateId) -> usize {
        self.depth[s]
    }

    pub fn terminal_mean(&self, s: StateId) -> f64 {
        self.spec.states[s].terminal_mean
    }

    pub fn transition(&self, s: StateId, a: Action) -> Result<Transition> {
        let st = self
            .spec
            .states
            .get(s)
            .ok_or_else(|| Error::Env(format!("unknown state {s}")))?;
        if st.actions.is_empty() {
            return Err(Error::Env(format!("state {s} is terminal")));
        }
        st.actions
            .get(a)
            .copied()
            .ok_or_else(|| Error::Env(format!("action {a} out of range for state {s} (K = {})", st.actions.len())))
    }

    /// Exact optimal value V*(s).
    pub fn optimal_value(&self, s: StateId) -> Result<f64> {
        self.optimal
            .get(s)
            .copied()
            .ok_or_else(|| Error::Env(format!("unknown state {s}")))
    }

    pub fn optimal_action(&self, s: StateId) -> Option<Action> {
        let st = self.spec.states.get(s)?;
        let mut best = None;
        let mut best_v = f64::NEG_INFINITY;
        for (a, t) in st.actions.iter().enumerate() {
            let v = t.reward + self.spec.discount * self.optimal[t.next];
            if v > best_v {
                best_v = v;
                best = Some(a);
            }
        }
        best
    }

    /// Expected value of `simulate(s)`.
    pub fn rollout_mean(&self, s: StateId) -> f64 {
        match self.spec.horizon {
            None => self.rollout_mean[s],
            Some(h) => self.truncated_mean(s, h),
        }
    }

    fn truncated_mean(&self, s: StateId, h: usize) -> f64 {
        let st = &self.spec.states[s];
        if st.actions.is_empty() {
            return st.terminal_mean;
        }
        if h == 0 {
            return 0.0;
        }
        let g = self.spec.discount;
        let sum: f64 = st
            .actions
            .iter()
            .map(|t| t.reward + g * self.truncated_mean(t.next, h - 1))
            .sum();
        sum / st.actions.len() as f64
    }

    /// One noisy return of the uniform-random default policy from `s`.
    pub fn simulate(&self, s: StateId, rng: &mut Rng) -> Result<f64> {
        if !self.contains(s) {
            return Err(Error::Env(format!("unknown state {s}")));
        }
        let g = self.spec.discount;
        let limit = self.spec.horizon.unwrap_or(usize::MAX);
        let mut state = s;
        let mut total = 0.0;
        let mut scale = 1.0;
        let mut steps = 0;
        loop {
            let st = &self.spec.states[state];
            if st.actions.is_empty() {
                total += scale * st.terminal_mean;
                break;
            }
            if steps == limit {
                break;
            }
            let t = st.actions[rng.random_range(0..st.actions.len())];
            total += scale * t.reward;
            scale *= g;
            state = t.next;
            steps += 1;
        }
        let z: f64 = rng.sample(StandardNormal);
        Ok(total + self.spec.noise_sigma * z)
    }
}

/// Mean of the optimal arm in depth-2 tasks built from gaps.
pub const DEPTH_TWO_BEST_MEAN: f64 = 1.0;

/// Root with K arms, each leading to a terminal state with mean `mu[k]`.
/// Edge rewards are zero, so all value sits in the terminal returns.
pub fn depth_two_from_means(mu: &[f64], sigma: f64, seed: u64) -> Result<Mdp> {
    if mu.len() < 2 {
        return Err(Error::Env(format!("depth-2 task needs K >= 2 arms, got {}", mu.len())));
    }
    if mu.iter().any(|m| !m.is_finite()) {
        return Err(Error::Env("arm means must be finite".into()));
    }
    let lo = mu.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let mut states = vec![StateSpec {
        actions: (0..mu.len()).map(|k| Transition { next: k + 1, reward: 0.0 }).collect(),
        terminal_mean: 0.0,
    }];
    states.extend(mu.iter().map(|&m| StateSpec { actions: Vec::new(), terminal_mean: m }));
    Mdp::new(MdpSpec {
        states,
        root: 0,
        discount: 1.0,
        noise_sigma: sigma,
        reward_bounds: (lo, hi),
        horizon: None,
        seed,
    })
}

/// Depth-2 task with arm gaps Δ_k: μ_k = 1 − Δ_k.
pub fn make_depth_two(gaps: &[f64], sigma: f64, seed: u64) -> Result<Mdp> {
    if gaps.len() < 2 {
        return Err(Error::Env(format!("depth-2 task needs K >= 2 arms, got {}", gaps.len())));
    }
    if gaps.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
        return Err(Error::Env("gaps must be nonnegative".into()));
    }
    if !gaps.iter().any(|g| *g == 0.0) {
        return Err(Error::Env("gaps need at least one zero entry for the optimal arm".into()));
    }
    let mu: Vec<f64> = gaps.iter().map(|g| DEPTH_TWO_BEST_MEAN - g).collect();
    depth_two_from_means(&mu, sigma, seed)
}

/// Arm gaps Δ_k = μ* − μ_k of a depth-2 task.
pub fn depth_two_gaps(env: &Mdp) -> Vec<f64> {
    let root = env.root();
    let mu: Vec<f64> = (0..env.action_count(root))
        .map(|a| {
            let t = env.transition(root, a).expect("root action");
            t.reward + env.discount() * env.rollout_mean(t.next)
        })
        .collect();
    let best = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mu.iter().map(|m| best - m).collect()
}

/// Complete K-ary tree of the given depth with explicit edge rewards in
/// breadth-first edge order. Leaves are terminal with mean `leaf_mean`.
pub fn complete_tree(
    depth: usize,
    branching: usize,
    rewards: &[f64],
    leaf_mean: f64,
    discount: f64,
    sigma: f64,
    reward_bounds: (f64, f64),
    seed: u64,
) -> Result<Mdp> {
    if branching < 1 || depth < 1 {
        return Err(Error::Env("random tree needs depth >= 1 and branching >= 1".into()));
    }
    let count = tree_state_count(depth, branching)
        .ok_or_else(|| Error::Capacity(format!("tree with depth {depth} and branching {branching}")))?;
    if count > MAX_STATES {
        return Err(Error::Capacity(format!(
            "tree with depth {depth} and branching {branching} has {count} states (limit {MAX_STATES})"
        )));
    }
    let internal = (count - 1) / branching;
    if rewards.len() != count - 1 {
        return Err(Error::Env(format!("expected {} edge rewards, got {}", count - 1, rewards.len())));
    }
    let mut states = Vec::with_capacity(count);
    for s in 0..count {
        if s < internal {
            let actions = (0..branching)
                .map(|a| {
                    let child = s * branching + a + 1;
                    Transition { next: child, reward: rewards[child - 1] }
                })
                .collect();
            states.push(StateSpec { actions, terminal_mean: 0.0 });
        } else {
            states.push(StateSpec { actions: Vec::new(), terminal_mean: leaf_mean });
        }
    }
    Mdp::new(MdpSpec { states, root: 0, discount, noise_sigma: sigma, reward_bounds, horizon: None, seed })
}

fn tree_state_count(depth: usize, branching: usize) -> Option<usize> {
    let mut total: usize = 1;
    let mut level: usize = 1;
    for _ in 0..depth {
        level = level.checked_mul(branching)?;
        total = total.checked_add(level)?;
        if total > MAX_STATES {
            return Some(total);
        }
    }
    Some(total)
}

#[derive(Clone, Debug)]
pub struct RandomTreeParams {
    pub depth: usize,
    pub branching: usize,
    pub seed: u64,
    pub reward_range: (f64, f64),
    pub discount: f64,
    pub sigma: f64,
}

impl RandomTreeParams {
    pub fn new(depth: usize, branching: usize, seed: u64) -> Self {
        Self { depth, branching, seed, reward_range: (0.0, 1.0), discount: 1.0, sigma: 1.0 }
    }
}

/// Complete random tree; edge rewards uniform on the declared range, leaves
/// terminal with mean 0.
pub fn make_random_tree(p: &RandomTreeParams) -> Result<Mdp> {
    if p.depth < 1 || p.branching < 1 {
        return Err(Error::Env("random tree needs depth >= 1 and branching >= 1".into()));
    }
    let (lo, hi) = p.reward_range;
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Env(format!("bad reward range [{lo}, {hi}]")));
    }
    let count = tree_state_count(p.depth, p.branching).filter(|c| *c <= MAX_STATES).ok_or_else(|| {
        Error::Capacity(format!("tree with depth {} and branching {} is too large", p.depth, p.branching))
    })?;
    let mut r = rng::stream(p.seed, u64::MAX);
    let rewards: Vec<f64> = (1..count).map(|_| lo + (hi - lo) * r.random::<f64>()).collect();
    let bounds = (lo.min(0.0), hi.max(0.0));
    complete_tree(p.depth, p.branching, &rewards, 0.0, p.discount, p.sigma, bounds, p.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(env: &Mdp, s: StateId) -> f64 {
        if env.is_terminal(s) {
            return env.terminal_mean(s);
        }
        (0..env.action_count(s))
            .map(|a| {
                let t = env.transition(s, a).unwrap();
                t.reward + env.discount() * brute_force(env, t.next)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn depth_two_edges_carry_no_reward() {
        let env = make_depth_two(&[0.0, 0.2, 0.3, 0.5], 1.0, 0).unwrap();
        for k in 0..4 {
            assert_eq!(env.transition(0, k).unwrap(), Transition { next: k + 1, reward: 0.0 });
        }
        assert!(env.transition(0, 4).is_err());
        assert!(env.transition(1, 0).is_err());
    }

    #[test]
    fn depth_two_means_follow_gaps() {
        let env = make_depth_two(&[0.0, 0.5], 1.0, 0).unwrap();
        assert_eq!(env.terminal_mean(1), DEPTH_TWO_BEST_MEAN);
        assert_eq!(env.terminal_mean(2), DEPTH_TWO_BEST_MEAN - 0.5);
        let env = make_depth_two(&[0.0, 0.2, 0.3, 0.5], 1.0, 0).unwrap();
        let mu: Vec<f64> = (1..5).map(|s| env.terminal_mean(s)).collect();
        assert!(mu.windows(2).all(|w| w[0] > w[1]));
        let gaps = depth_two_gaps(&env);
        for (g, want) in gaps.iter().zip([0.0, 0.2, 0.3, 0.5]) {
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_two_rejects_bad_gaps() {
        assert!(make_depth_two(&[0.1, 0.2], 1.0, 0).is_err());
        assert!(make_depth_two(&[0.0], 1.0, 0).is_err());
        assert!(make_depth_two(&[0.0, -0.1], 1.0, 0).is_err());
    }

    #[test]
    fn noiseless_simulation_returns_the_mean() {
        let env = depth_two_from_means(&[0.3, 0.1], 0.0, 0).unwrap();
        let mut r = rng::worker(1, 0);
        assert_eq!(env.simulate(1, &mut r).unwrap(), 0.3);
    }

    #[test]
    fn noisy_simulation_mean_within_clt_bound() {
        let env = depth_two_from_means(&[0.3, 0.1], 1.0, 0).unwrap();
        let mut r = rng::worker(11, 0);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| env.simulate(1, &mut r).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.3).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn simulation_noise_kurtosis_is_gaussian_like() {
        let env = depth_two_from_means(&[0.0, 0.0], 1.0, 0).unwrap();
        let mut r = rng::worker(5, 0);
        let xs: Vec<f64> = (0..50_000).map(|_| env.simulate(1, &mut r).unwrap()).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / xs.len() as f64;
        let kurt = m4 / (m2 * m2);
        assert!((kurt - 3.0).abs() < 0.15, "kurtosis {kurt}");
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let env = make_random_tree(&RandomTreeParams::new(3, 3, 7)).unwrap();
        let a = env.simulate(2, &mut rng::worker(3, 1)).unwrap();
        let b = env.simulate(2, &mut rng::worker(3, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transitions_are_deterministic() {
        let env = make_random_tree(&RandomTreeParams::new(3, 2, 7)).unwrap();
        assert_eq!(env.transition(1, 1).unwrap(), env.transition(1, 1).unwrap());
        let again = make_random_tree(&RandomTreeParams::new(3, 2, 7)).unwrap();
        assert_eq!(env.transition(1, 1).unwrap(), again.transition(1, 1).unwrap());
    }

    #[test]
    fn optimal_value_of_depth_two_is_best_mean() {
        let env = depth_two_from_means(&[0.1, 0.9, 0.5], 1.0, 0).unwrap();
        assert_eq!(env.optimal_value(0).unwrap(), 0.9);
        assert_eq!(env.optimal_value(3).unwrap(), 0.5);
        assert_eq!(env.optimal_action(0), Some(1));
    }

    #[test]
    fn optimal_value_matches_hand_enumeration() {
        // a0 pays 1 then at most 0.5; a1 pays 0 then at most 2.
        let rewards = [1.0, 0.0, 0.5, 0.25, 2.0, 1.5];
        let env = complete_tree(2, 2, &rewards, 0.0, 1.0, 1.0, (0.0, 2.0), 0).unwrap();
        assert_eq!(env.optimal_value(0).unwrap(), 2.0);
    }

    #[test]
    fn optimal_value_matches_brute_force_on_random_trees() {
        for seed in 0..20 {
            let p = RandomTreeParams { discount: 0.9, ..RandomTreeParams::new(1 + (seed as usize % 5), 2 + seed as usize % 4, seed) };
            let env = make_random_tree(&p).unwrap();
            for s in [0, 1, env.state_count() - 1] {
                let bf = brute_force(&env, s);
                assert!((env.optimal_value(s).unwrap() - bf).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rollout_mean_matches_monte_carlo() {
        let p = RandomTreeParams { sigma: 0.0, ..RandomTreeParams::new(3, 3, 2) };
        let env = make_random_tree(&p).unwrap();
        let mut r = rng::worker(9, 0);
        let n = 40_000;
        let mc = (0..n).map(|_| env.simulate(0, &mut r).unwrap()).sum::<f64>() / n as f64;
        assert!((mc - env.rollout_mean(0)).abs() < 0.02);
    }

    #[test]
    fn capacity_and_shape_errors() {
        let big = RandomTreeParams::new(40, 4, 0);
        assert!(matches!(make_random_tree(&big), Err(Error::Capacity(_))));
        let spec = MdpSpec {
            states: vec![
                StateSpec { actions: vec![Transition { next: 1, reward: 0.0 }, Transition { next: 1, reward: 0.0 }], terminal_mean: 0.0 },
                StateSpec::terminal(0.0),
            ],
            root: 0,
            discount: 1.0,
            noise_sigma: 1.0,
            reward_bounds: (0.0, 1.0),
            horizon: None,
            seed: 0,
        };
        assert!(Mdp::new(spec).is_err());
    }

    #[test]
    fn rewards_outside_bounds_are_rejected() {
        let r = [2.0, 0.0];
        assert!(complete_tree(1, 2, &r, 0.0, 1.0, 1.0, (0.0, 1.0), 0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let env = make_random_tree(&RandomTreeParams::new(2, 3, 4)).unwrap();
        let back = Mdp::from_json(&env.to_json()).unwrap();
        assert_eq!(back.spec(), env.spec());
    }

    #[test]
    fn horizon_truncates_rollouts() {
        let mut spec = make_random_tree(&RandomTreeParams { sigma: 0.0, ..RandomTreeParams::new(3, 2, 1) }).unwrap().spec().clone();
        spec.horizon = Some(1);
        let env = Mdp::new(spec).unwrap();
        let v = env.simulate(0, &mut rng::worker(0, 0)).unwrap();
        let firsts = [env.transition(0, 0).unwrap().reward, env.transition(0, 1).unwrap().reward];
        assert!(firsts.contains(&v));
        assert!((env.rollout_mean(0) - (firsts[0] + firsts[1]) / 2.0).abs() < 1e-15);
    }
}
