use std::collections::HashSet;

use proptest::prelude::*;

use super::*;
use crate::workbench::ExperimentConfig;

fn perm(v: &[usize]) -> Permutation {
    Permutation::new(v.to_vec()).unwrap()
}

fn policy(coarse: usize, fine: usize, seed: u64) -> SearchPolicy {
    SearchPolicy {
        coarse_budget: coarse,
        fine_budget: fine,
        top_m: 2,
        neighbors_per_candidate: 10,
        seed,
        parallel: false,
    }
}

#[test]
fn space_sizes() {
    assert_eq!(SearchSpace::new(6).size(), Some(720));
    assert_eq!(SearchSpace { n: 6, bijective: false }.size(), Some(46_656));
    assert_eq!(all_permutations(4).len(), 24);
    let set: HashSet<_> = all_permutations(5).into_iter().collect();
    assert_eq!(set.len(), 120);
}

#[test]
fn sampling_exhausts_small_spaces() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ledger = SearchLedger::new();
    for _ in 0..6 {
        let p = sample_permutation(&mut rng, 3, &ledger).unwrap();
        assert!(!ledger.contains(&p));
        ledger
            .push(LedgerEntry {
                perm: p.to_cli(),
                seed: 0,
                score: Some(0.0),
                phase: Phase::Coarse,
                timestamp: 0.0,
                wall_seconds: 0.0,
                error: None,
            })
            .unwrap();
    }
    assert_eq!(sample_permutation(&mut rng, 3, &ledger), None);
    assert_eq!(sample_permutation(&mut rng, 1, &SearchLedger::new()), Some(perm(&[0])));
    for n in [6, 10] {
        let p = sample_permutation(&mut rng, n, &SearchLedger::new()).unwrap();
        assert_eq!(p.len(), n);
    }
}

#[test]
fn neighbor_examples() {
    let got: HashSet<_> = swap_neighbors(&perm(&[0, 1, 2])).into_iter().collect();
    let want: HashSet<_> = [perm(&[1, 0, 2]), perm(&[2, 1, 0]), perm(&[0, 2, 1])].into_iter().collect();
    assert_eq!(got, want);
    assert_eq!(swap_neighbors(&Permutation::identity(6)).len(), 15);
}

proptest! {
    #[test]
    fn neighbor_relation_is_symmetric(v in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let p = perm(&v);
        let ns = swap_neighbors(&p);
        prop_assert_eq!(ns.len(), 15);
        for q in &ns {
            prop_assert_eq!(q.hamming(&p), 2);
            prop_assert!(swap_neighbors(q).contains(&p));
        }
    }
}

#[test]
fn zero_fine_budget_is_pure_random_search() {
    let target = perm(&[3, 1, 4, 0, 2]);
    let mut ledger = SearchLedger::new();
    run_search(SearchSpace::new(5), &policy(17, 0, 1), &HammingSurrogate { target }, &mut ledger).unwrap();
    assert_eq!(ledger.len(), 17);
    assert!(ledger.entries().iter().all(|e| e.phase == Phase::Coarse));
}

#[test]
fn ledger_graph_properties() {
    let target = perm(&[4, 2, 0, 3, 1]);
    let eval = HammingSurrogate { target };
    for seed in 0..5 {
        let p = policy(20, 20, seed);
        let mut ledger = SearchLedger::new();
        let ranked = run_search(SearchSpace::new(5), &p, &eval, &mut ledger).unwrap();
        assert!(ledger.len() <= 40);
        let perms: HashSet<_> = ledger.entries().iter().map(|e| e.perm.clone()).collect();
        assert_eq!(perms.len(), ledger.len());

        let mut coarse: Vec<_> = ledger.entries().iter().filter(|e| e.phase == Phase::Coarse).cloned().collect();
        assert_eq!(coarse.len(), 20);
        coarse.sort_by(|a, b| {
            b.score
                .unwrap()
                .total_cmp(&a.score.unwrap())
                .then(a.permutation().unwrap().cmp(&b.permutation().unwrap()))
        });
        let top: Vec<Permutation> = coarse[..2].iter().map(|e| e.permutation().unwrap()).collect();
        for e in ledger.entries().iter().filter(|e| e.phase == Phase::Fine) {
            let q = e.permutation().unwrap();
            assert!(top.iter().any(|t| t.hamming(&q) == 2), "{} not next to a top entry", e.perm);
        }
        // ranked best first
        for w in ranked.windows(2) {
            assert!(w[0].score.unwrap() >= w[1].score.unwrap());
        }
    }
}

#[test]
fn constant_scores_rank_lexicographically() {
    let flat = |_: &Permutation, _: u64| Ok(1.0);
    let mut ledger = SearchLedger::new();
    let ranked = run_search(SearchSpace::new(4), &policy(10, 0, 3), &flat, &mut ledger).unwrap();
    let order: Vec<Permutation> = ranked.iter().map(|e| e.permutation().unwrap()).collect();
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(order, sorted);
}

#[test]
fn failed_evaluations_consume_budget() {
    let flaky = |p: &Permutation, _: u64| {
        if p.as_slice()[0] == 0 {
            Err(MptError::Diverged { step: 3, loss: f64::NAN })
        } else {
            Ok(p.as_slice()[1] as f64)
        }
    };
    let mut ledger = SearchLedger::new();
    let ranked = run_search(SearchSpace::new(4), &policy(24, 0, 5), &flaky, &mut ledger).unwrap();
    assert_eq!(ranked.len(), 24);
    let failed: Vec<_> = ranked.iter().filter(|e| e.score.is_none()).collect();
    assert_eq!(failed.len(), 6);
    assert!(failed.iter().all(|e| e.error.as_deref().unwrap().contains("step 3")));
    // failures rank last
    assert!(ranked[18..].iter().all(|e| e.score.is_none()));
}

#[test]
fn seeds_depend_only_on_permutation() {
    let p = perm(&[2, 0, 1]);
    assert_eq!(candidate_seed(9, &p), candidate_seed(9, &p));
    assert_ne!(candidate_seed(9, &p), candidate_seed(10, &p));
    assert_ne!(candidate_seed(9, &p), candidate_seed(9, &perm(&[2, 1, 0])));
}

#[test]
fn parallel_matches_serial() {
    let eval = HammingSurrogate {
        target: perm(&[1, 3, 0, 2, 4]),
    };
    let strip = |v: Vec<LedgerEntry>| -> Vec<(String, u64, Option<f64>, Phase)> {
        v.into_iter().map(|e| (e.perm, e.seed, e.score, e.phase)).collect()
    };
    let mut a = SearchLedger::new();
    let mut b = SearchLedger::new();
    let serial = run_search(SearchSpace::new(5), &policy(15, 12, 2), &eval, &mut a).unwrap();
    let par = SearchPolicy {
        parallel: true,
        ..policy(15, 12, 2)
    };
    let parallel = run_search(SearchSpace::new(5), &par, &eval, &mut b).unwrap();
    assert_eq!(strip(serial), strip(parallel));
    assert_eq!(strip(a.entries().to_vec()), strip(b.entries().to_vec()));
}

#[test]
fn ledger_file_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.jsonl");
    let eval = HammingSurrogate {
        target: perm(&[2, 0, 3, 1]),
    };
    {
        let mut ledger = SearchLedger::open(&path).unwrap();
        run_search(SearchSpace::new(4), &policy(5, 0, 8), &eval, &mut ledger).unwrap();
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["perm", "seed", "score", "phase", "timestamp", "wall_seconds"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    let mut ledger = SearchLedger::open(&path).unwrap();
    assert_eq!(ledger.len(), 5);
    run_search(SearchSpace::new(4), &policy(12, 4, 8), &eval, &mut ledger).unwrap();
    let reopened = SearchLedger::open(&path).unwrap();
    assert_eq!(reopened.len(), 16);
    let unique: HashSet<_> = reopened.entries().iter().map(|e| e.perm.clone()).collect();
    assert_eq!(unique.len(), 16);
    assert!(ledger.push(reopened.entries()[0].clone()).is_err());
}

#[test]
fn enumeration_finds_the_optimum() {
    let target = perm(&[3, 0, 2, 1]);
    let mut ledger = SearchLedger::new();
    let ranked = run_enumeration(4, &policy(0, 0, 0), &HammingSurrogate { target: target.clone() }, &mut ledger).unwrap();
    assert_eq!(ranked.len(), 24);
    assert_eq!(ranked[0].permutation().unwrap(), target);
    assert_eq!(ranked[0].score, Some(0.0));
}

#[test]
fn toy_evaluator_is_deterministic_and_bounded() {
    let mut base = ExperimentConfig::tiny_copy();
    base.train.max_steps = 10;
    base.task.held_out = 10;
    let eval = ToyTaskEvaluator::new(base);
    let p = perm(&[2, 0, 1]);
    let a = eval.evaluate(&p, 4).unwrap();
    assert_eq!(a, eval.evaluate(&p, 4).unwrap());
    assert!((0.0..=1.0).contains(&a));
}
