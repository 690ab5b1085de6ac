//! Checks the framework against a from-scratch sequential UCT that shares
//! nothing with the library except the environment and the RNG streams.

use std::collections::HashMap;

use pmcts::algos::{make_specialization, AlgoKind, AlgoParams};
use pmcts::env::{make_random_tree, Mdp, RandomTreeParams, StateId};
use pmcts::framework::{run_search, RunOptions};
use pmcts::rng::{self, Rng};

const MAX_DEPTH: usize = 100;
const MAX_WIDTH: usize = 20;

#[derive(Default, Clone)]
struct Arm {
    child: StateId,
    values: Vec<f64>,
}

impl Arm {
    fn n(&self) -> usize {
        self.values.len()
    }
    fn q(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Sequential UCT with batched leaf evaluation: every iteration descends
/// once and backs up `batch` simulations, one from each stream in turn.
struct Reference<'a> {
    env: &'a Mdp,
    root: StateId,
    arms: HashMap<StateId, Vec<Arm>>,
    depth: HashMap<StateId, usize>,
    choices: Vec<Vec<(StateId, usize)>>,
}

impl<'a> Reference<'a> {
    fn new(env: &'a Mdp) -> Self {
        let root = env.root();
        Self { env, root, arms: HashMap::from([(root, vec![])]), depth: HashMap::from([(root, 0)]), choices: vec![] }
    }

    fn spread(&self, s: StateId) -> f64 {
        let all: Vec<f64> = self.arms[&s].iter().flat_map(|a| a.values.iter().copied()).collect();
        if all.len() < 2 {
            return 0.0;
        }
        let m = all.iter().sum::<f64>() / all.len() as f64;
        (all.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / all.len() as f64).sqrt()
    }

    fn iterate(&mut self, streams: &mut [Rng]) {
        let mut s = self.root;
        let mut path = vec![];
        while !self.env.is_terminal(s) && self.depth[&s] < MAX_DEPTH {
            let width = self.env.action_count(s).min(MAX_WIDTH);
            let have = self.arms[&s].len();
            if have < width {
                let next = self.env.transition(s, have).unwrap().next;
                self.arms.get_mut(&s).unwrap().push(Arm { child: next, values: vec![] });
                self.arms.insert(next, vec![]);
                self.depth.insert(next, self.depth[&s] + 1);
                path.push((s, have));
                s = next;
                break;
            }
            let arms = &self.arms[&s];
            let total: usize = arms.iter().map(Arm::n).sum();
            let c = self.spread(s);
            let mut best = (f64::NEG_INFINITY, 0);
            for (a, arm) in arms.iter().enumerate() {
                let u = arm.q() + c * (2.0 * (total.max(1) as f64).ln() / arm.n() as f64).sqrt();
                if u > best.0 {
                    best = (u, a);
                }
            }
            path.push((s, best.1));
            s = arms[best.1].child;
        }
        for r in streams.iter_mut() {
            let mut v = self.env.simulate(s, r).unwrap();
            for &(p, a) in path.iter().rev() {
                v = self.env.transition(p, a).unwrap().reward + self.env.discount() * v;
                self.arms.get_mut(&p).unwrap()[a].values.push(v);
            }
        }
        self.choices.push(path);
    }
}

fn env() -> Mdp {
    make_random_tree(&RandomTreeParams::new(4, 4, 21)).unwrap()
}

#[test]
fn uct_matches_the_reference() {
    let env = env();
    let seed = 77;
    let n = 600;
    let cfg = make_specialization(AlgoKind::Uct, 1, &AlgoParams::defaults()).unwrap();
    let out = run_search(&env, &cfg, &RunOptions::virtual_default(&cfg, n, seed)).unwrap();

    let mut reference = Reference::new(&env);
    let mut streams = vec![rng::worker(seed, 0)];
    for _ in 0..n {
        reference.iterate(&mut streams);
    }
    for (rec, want) in out.trace.records.iter().zip(&reference.choices) {
        let got: Vec<(StateId, usize)> = rec.path.iter().map(|p| (p.state, p.action)).collect();
        assert_eq!(&got, want, "rollout {}", rec.index);
    }
    for ((s, a), e) in out.tree.edges() {
        let arm = &reference.arms[&s][a];
        assert_eq!(e.stats.n as usize, arm.n());
        assert!((e.stats.q - arm.q()).abs() < 1e-12);
    }
}

#[test]
fn leaf_parallel_is_batched_uct() {
    let env = env();
    let (seed, m, batches) = (5, 4, 120);
    let cfg = make_specialization(AlgoKind::Leafp, m, &AlgoParams::defaults()).unwrap();
    let out = run_search(&env, &cfg, &RunOptions::virtual_default(&cfg, m * batches, seed)).unwrap();

    let mut reference = Reference::new(&env);
    let mut streams: Vec<Rng> = (0..m).map(|w| rng::worker(seed, w)).collect();
    for _ in 0..batches {
        reference.iterate(&mut streams);
    }
    let mut by_id = out.trace.records.clone();
    by_id.sort_by_key(|r| r.task_id);
    for (i, rec) in by_id.iter().enumerate() {
        let got: Vec<(StateId, usize)> = rec.path.iter().map(|p| (p.state, p.action)).collect();
        assert_eq!(got, reference.choices[i / m], "rollout {i}");
    }
    for ((s, a), e) in out.tree.edges() {
        let arm = &reference.arms[&s][a];
        assert_eq!(e.stats.n as usize, arm.n());
        assert!((e.stats.q - arm.q()).abs() < 1e-9);
    }
}

#[test]
fn root_parallel_is_independent_searches() {
    let env = env();
    let (seed, m, each) = (13, 4, 150);
    let cfg = make_specialization(AlgoKind::Rootp, m, &AlgoParams::defaults()).unwrap();
    let out = run_search(&env, &cfg, &RunOptions::virtual_default(&cfg, m * each, seed)).unwrap();
    assert!(out.trace.records.iter().all(|r| r.worker == r.tree));

    let mut refs: Vec<Reference> = (0..m).map(|_| Reference::new(&env)).collect();
    for (w, r) in refs.iter_mut().enumerate() {
        let mut stream = vec![rng::worker(seed, w)];
        for _ in 0..each {
            r.iterate(&mut stream);
        }
    }
    for ((s, a), e) in out.tree.edges() {
        let vals: Vec<f64> = refs
            .iter()
            .filter_map(|r| r.arms.get(&s).and_then(|v| v.get(a)))
            .flat_map(|arm| arm.values.iter().copied())
            .collect();
        assert_eq!(e.stats.n as usize, vals.len(), "edge ({s}, {a})");
        let q = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((e.stats.q - q).abs() < 1e-9);
    }
}
