use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pmcts::algos::{make_specialization, AlgoKind, AlgoParams};
use pmcts::env::{make_random_tree, Mdp, RandomTreeParams};
use pmcts::tree::{sync_trees, ucb_score, EdgeKey, EdgePolicy, EdgeStats, PlainPolicy, SearchTree};

/// Random interleaving of dispatches, completions and full syncs over M
/// tree copies. Returns the merged tree and, per edge, the values of every
/// completed simulation keyed by simulation id.
fn random_schedule(env: &Mdp, m: usize, steps: usize, seed: u64) -> (SearchTree, BTreeMap<EdgeKey, HashMap<u64, f64>>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let base = Arc::new(SearchTree::new(env, env.root(), Default::default()).unwrap());
    let mut trees: Vec<Arc<SearchTree>> = vec![base; m];
    let mut flying: Vec<(usize, Vec<EdgeKey>, u64)> = vec![];
    let mut truth: BTreeMap<EdgeKey, HashMap<u64, f64>> = BTreeMap::new();
    let mut next_id = 0u64;
    let sync = |trees: &mut Vec<Arc<SearchTree>>| {
        let refs: Vec<&SearchTree> = trees.iter().map(|t| t.as_ref()).collect();
        let merged = Arc::new(sync_trees(&refs).unwrap());
        trees.iter_mut().for_each(|t| *t = Arc::clone(&merged));
    };
    let mut complete = |trees: &mut Vec<Arc<SearchTree>>, i: usize, r: &mut ChaCha8Rng, flying: &mut Vec<(usize, Vec<EdgeKey>, u64)>| {
        let (ti, path, id) = flying.swap_remove(i);
        let leaf: f64 = r.random_range(-1.0..1.0);
        let t = Arc::make_mut(&mut trees[ti]);
        t.backpropagate(&path, leaf, id, &PlainPolicy).unwrap();
        let mut v = leaf;
        for k in path.iter().rev() {
            v = env.transition(k.0, k.1).unwrap().reward + env.discount() * v;
            truth.entry(*k).or_default().insert(id, v);
        }
    };
    for _ in 0..steps {
        match r.random_range(0..10) {
            0..=4 => {
                let ti = r.random_range(0..m);
                let t = Arc::make_mut(&mut trees[ti]);
                let mut s = t.root();
                let mut path = vec![];
                while !env.is_terminal(s) {
                    if let Some(a) = t.next_unexpanded(env, s).filter(|_| r.random_bool(0.3)) {
                        path.push((s, a));
                        t.expand(env, s, a).unwrap();
                        break;
                    }
                    let edges = &t.node(s).unwrap().edges;
                    if edges.is_empty() {
                        break;
                    }
                    let e = &edges[r.random_range(0..edges.len())];
                    path.push((s, e.action));
                    s = e.child;
                }
                if !path.is_empty() {
                    t.pre_update(&path, &PlainPolicy).unwrap();
                    flying.push((ti, path, next_id));
                    next_id += 1;
                }
            }
            5..=8 if !flying.is_empty() => {
                let i = r.random_range(0..flying.len());
                complete(&mut trees, i, &mut r, &mut flying);
            }
            _ => sync(&mut trees),
        }
    }
    while !flying.is_empty() {
        complete(&mut trees, 0, &mut r, &mut flying);
    }
    sync(&mut trees);
    let refs: Vec<&SearchTree> = trees.iter().map(|t| t.as_ref()).collect();
    (sync_trees(&refs[..1]).unwrap(), truth)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sync_conserves_simulations(seed in any::<u64>(), wide in any::<bool>(), steps in 1usize..200) {
        let env = make_random_tree(&RandomTreeParams::new(3, 3, seed % 17)).unwrap();
        let m = if wide { 4 } else { 2 };
        let (tree, truth) = random_schedule(&env, m, steps, seed);
        let mut root_ids = std::collections::HashSet::new();
        for ((s, a), vals) in &truth {
            if *s == env.root() {
                root_ids.extend(vals.keys().copied());
            }
            let e = tree.edge((*s, *a)).unwrap();
            prop_assert_eq!(e.stats.n as usize, vals.len());
            prop_assert_eq!(e.stats.o, 0);
            let mean = vals.values().sum::<f64>() / vals.len() as f64;
            prop_assert!((e.stats.q - mean).abs() < 1e-9);
        }
        prop_assert_eq!(tree.root_flow() as usize, root_ids.len());
    }

    #[test]
    fn incremental_mean_matches_records(vals in prop::collection::vec(-10.0f64..10.0, 1..100)) {
        let mut e = EdgeStats::default();
        for (i, v) in vals.iter().enumerate() {
            e.begin();
            e.complete(*v, i as u64).unwrap();
        }
        let recs = e.records().to_vec();
        let mean = recs.iter().map(|r| r.value).sum::<f64>() / recs.len() as f64;
        prop_assert!((e.q - mean).abs() < 1e-9);
        prop_assert_eq!(e.n as usize, vals.len());
    }

    #[test]
    fn adjustments_vanish_without_in_flight(q in -5.0f64..5.0, n in 1u64..1000) {
        let mut e = EdgeStats::default();
        e.q = q;
        e.n = n;
        for kind in AlgoKind::ALL {
            let m = if kind == AlgoKind::Uct { 1 } else { 4 };
            let c = make_specialization(kind, m, &AlgoParams::defaults()).unwrap();
            prop_assert!((c.q_bar(&e) - q).abs() < 1e-12);
            prop_assert!((c.n_bar(&e) - n as f64).abs() < 1e-12);
        }
    }

    // Soft virtual loss pulls Q̄ toward −r_VL, so it only penalizes values
    // at or above that.
    #[test]
    fn in_flight_never_raises_the_score(q in -1.0f64..5.0, n in 1u64..100, o in 1u64..8, total in 1.0f64..1000.0, c in 0.0f64..3.0) {
        let mut idle = EdgeStats::default();
        idle.q = q;
        idle.n = n;
        let mut busy = idle.clone();
        busy.o = o;
        for kind in [AlgoKind::WuUct, AlgoKind::VlHard, AlgoKind::VlSoft] {
            let p = make_specialization(kind, 8, &AlgoParams::defaults()).unwrap();
            let a = ucb_score(p.q_bar(&idle), p.n_bar(&idle), total, c);
            let b = ucb_score(p.q_bar(&busy), p.n_bar(&busy), total, c);
            prop_assert!(b <= a + 1e-12, "{kind}: {b} > {a}");
        }
    }

    #[test]
    fn exploration_grows_with_the_parent_and_shrinks_with_visits(q in -1.0f64..1.0, n in 1.0f64..100.0, total in 2.0f64..1000.0, c in 0.01f64..3.0) {
        prop_assert!(ucb_score(q, n, total * 2.0, c) > ucb_score(q, n, total, c));
        prop_assert!(ucb_score(q, n * 2.0, total, c) < ucb_score(q, n, total, c));
        prop_assert!(ucb_score(q, n, total, c * 2.0) > ucb_score(q, n, total, c));
    }
}
