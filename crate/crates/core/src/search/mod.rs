//! Coarse-to-fine random search over hard-connection permutations.

pub mod evaluator;

#[cfg(test)]
mod tests;

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use evaluator::{Evaluator, HammingSurrogate, ToyTaskEvaluator};

use crate::error::{MptError, Result};
use crate::model::Permutation;
use crate::seed;

/// Permutation space for `n` layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchSpace {
    pub n: usize,
    /// Restrict to bijections; otherwise any map `{0..n} -> {0..n}` counts.
    pub bijective: bool,
}

impl SearchSpace {
    pub fn new(n: usize) -> Self {
        SearchSpace { n, bijective: true }
    }

    /// `n!` for bijections, `n^n` otherwise; `None` on overflow.
    pub fn size(&self) -> Option<u128> {
        let n = self.n as u128;
        if self.bijective {
            (1..=n).try_fold(1u128, |acc, k| acc.checked_mul(k))
        } else {
            (0..n).try_fold(1u128, |acc, _| acc.checked_mul(n))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Coarse,
    Fine,
    Enumerate,
}

/// One evaluated candidate. A failed evaluation has `score == None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub perm: String,
    pub seed: u64,
    pub score: Option<f64>,
    pub phase: Phase,
    /// Seconds since the Unix epoch when the entry was recorded.
    pub timestamp: f64,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl LedgerEntry {
    pub fn permutation(&self) -> Result<Permutation> {
        self.perm.parse()
    }

    fn rank_score(&self) -> f64 {
        self.score.unwrap_or(f64::NEG_INFINITY)
    }
}

/// Append-only record of evaluations, optionally mirrored to a JSONL file.
#[derive(Debug, Default)]
pub struct SearchLedger {
    entries: Vec<LedgerEntry>,
    seen: HashSet<Permutation>,
    path: Option<PathBuf>,
}

impl SearchLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens the JSONL ledger at `path`, loading any entries already there so
    /// that a restarted search skips them.
    pub fn open(path: &Path) -> Result<Self> {
        let mut ledger = SearchLedger {
            path: Some(path.to_path_buf()),
            ..Self::default()
        };
        if path.exists() {
            let file = std::fs::File::open(path).map_err(|e| MptError::io(path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| MptError::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LedgerEntry = serde_json::from_str(&line)
                    .map_err(|e| MptError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
                let perm = entry.permutation()?;
                if !ledger.seen.insert(perm) {
                    return Err(MptError::Config(format!(
                        "{} line {}: duplicate permutation {}",
                        path.display(),
                        i + 1,
                        entry.perm
                    )));
                }
                ledger.entries.push(entry);
            }
        }
        Ok(ledger)
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, perm: &Permutation) -> bool {
        self.seen.contains(perm)
    }

    /// Appends `entry`, refusing permutations that were already evaluated.
    pub fn push(&mut self, entry: LedgerEntry) -> Result<()> {
        let perm = entry.permutation()?;
        if !self.seen.insert(perm) {
            return Err(MptError::Contract(format!("{} is already in the ledger", entry.perm)));
        }
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| MptError::io(path, e))?;
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| MptError::io(path, e))?;
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Entries by score, best first; failures last; ties go to the
    /// lexicographically smaller permutation.
    pub fn ranked(&self) -> Vec<LedgerEntry> {
        let mut out = self.entries.clone();
        sort_ranked(&mut out);
        out
    }
}

fn sort_ranked(entries: &mut [LedgerEntry]) {
    let key = |e: &LedgerEntry| e.permutation().map(|p| p.as_slice().to_vec()).unwrap_or_default();
    entries.sort_by(|a, b| {
        b.rank_score()
            .total_cmp(&a.rank_score())
            .then_with(|| key(a).cmp(&key(b)))
    });
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchPolicy {
    pub coarse_budget: usize,
    pub fine_budget: usize,
    pub top_m: usize,
    pub neighbors_per_candidate: usize,
    pub seed: u64,
    /// Evaluate candidates of one phase on parallel workers.
    #[serde(default)]
    pub parallel: bool,
}

impl SearchPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.fine_budget > 0 && self.top_m == 0 {
            return Err(MptError::schema("search.top_m", "must be at least 1 when fine_budget > 0"));
        }
        Ok(())
    }
}

/// All permutations of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Permutation> {
    let mut cur: Vec<usize> = (0..n).collect();
    let mut out = vec![Permutation::new(cur.clone()).expect("identity")];
    // standard next-permutation step
    loop {
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("pivot exists");
        cur.swap(i - 1, j);
        cur[i..].reverse();
        out.push(Permutation::new(cur.clone()).expect("permutation"));
    }
}

/// Space small enough to list the unevaluated permutations explicitly
/// instead of rejection sampling.
const ENUMERATE_BELOW: usize = 9;

/// Uniform draw over the permutations of `0..n` not yet in `ledger`;
/// `None` when every permutation has been evaluated.
pub fn sample_permutation(rng: &mut impl Rng, n: usize, ledger: &SearchLedger) -> Option<Permutation> {
    let excluded = |p: &Permutation| ledger.contains(p);
    sample_excluding(rng, n, &excluded)
}

fn sample_excluding(rng: &mut impl Rng, n: usize, excluded: &dyn Fn(&Permutation) -> bool) -> Option<Permutation> {
    if n < ENUMERATE_BELOW {
        let free: Vec<Permutation> = all_permutations(n).into_iter().filter(|p| !excluded(p)).collect();
        return free.choose(rng).cloned();
    }
    loop {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        let p = Permutation::new(v).expect("shuffled identity");
        if !excluded(&p) {
            return Some(p);
        }
    }
}

/// Every permutation reachable by exchanging two positions, in lexicographic order.
pub fn swap_neighbors(perm: &Permutation) -> Vec<Permutation> {
    let v = perm.as_slice();
    let mut out = Vec::with_capacity(v.len() * v.len().saturating_sub(1) / 2);
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            let mut w = v.to_vec();
            w.swap(i, j);
            out.push(Permutation::new(w).expect("swap preserves bijection"));
        }
    }
    out.sort();
    out
}

/// Evaluation seed for a candidate: a function of the search seed and the
/// permutation only, so it does not depend on evaluation order.
pub fn candidate_seed(search_seed: u64, perm: &Permutation) -> u64 {
    let parts: Vec<u64> = perm.as_slice().iter().map(|&v| v as u64).collect();
    seed::derive(search_seed, &parts)
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn evaluate_all(
    candidates: &[Permutation],
    policy: &SearchPolicy,
    phase: Phase,
    evaluator: &dyn Evaluator,
) -> Vec<LedgerEntry> {
    let run = |perm: &Permutation| {
        let seed = candidate_seed(policy.seed, perm);
        let start = Instant::now();
        let (score, error) = match evaluator.evaluate(perm, seed) {
            Ok(s) if s.is_finite() => (Some(s), None),
            Ok(s) => (None, Some(format!("non-finite score {s}"))),
            Err(e) => (None, Some(e.to_string())),
        };
        LedgerEntry {
            perm: perm.to_cli(),
            seed,
            score,
            phase,
            timestamp: now(),
            wall_seconds: start.elapsed().as_secs_f64(),
            error,
        }
    };
    if policy.parallel {
        candidates.par_iter().map(run).collect()
    } else {
        candidates.iter().map(run).collect()
    }
}

/// Coarse random sampling followed by swap-neighbor exploration around the
/// `top_m` best coarse candidates. Entries already in `ledger` are kept and
/// never re-evaluated. Returns the ledger ranked best first.
pub fn run_search(
    space: SearchSpace,
    policy: &SearchPolicy,
    evaluator: &dyn Evaluator,
    ledger: &mut SearchLedger,
) -> Result<Vec<LedgerEntry>> {
    policy.validate()?;
    if !space.bijective {
        return Err(MptError::Config("search runs over bijections only".into()));
    }
    let n = space.n;
    if let Some(e) = ledger.entries().iter().find(|e| e.perm.split(',').count() != n) {
        return Err(MptError::Config(format!("ledger entry {} does not have {n} layers", e.perm)));
    }

    let done_coarse = ledger.entries().iter().filter(|e| e.phase == Phase::Coarse).count();
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut batch = Vec::new();
    let mut picked: HashSet<Permutation> = HashSet::new();
    for _ in done_coarse..policy.coarse_budget {
        let excluded = |p: &Permutation| ledger.contains(p) || picked.contains(p);
        match sample_excluding(&mut rng, n, &excluded) {
            Some(p) => {
                picked.insert(p.clone());
                batch.push(p);
            }
            None => break,
        }
    }
    for entry in evaluate_all(&batch, policy, Phase::Coarse, evaluator) {
        ledger.push(entry)?;
    }

    let mut coarse: Vec<LedgerEntry> = ledger
        .entries()
        .iter()
        .filter(|e| e.phase == Phase::Coarse)
        .cloned()
        .collect();
    sort_ranked(&mut coarse);
    let mut remaining = policy
        .fine_budget
        .saturating_sub(ledger.entries().iter().filter(|e| e.phase == Phase::Fine).count());
    for parent in coarse.iter().filter(|e| e.score.is_some()).take(policy.top_m) {
        if remaining == 0 {
            break;
        }
        let fresh: Vec<Permutation> = swap_neighbors(&parent.permutation()?)
            .into_iter()
            .filter(|p| !ledger.contains(p))
            .take(policy.neighbors_per_candidate.min(remaining))
            .collect();
        remaining -= fresh.len();
        for entry in evaluate_all(&fresh, policy, Phase::Fine, evaluator) {
            ledger.push(entry)?;
        }
    }
    Ok(ledger.ranked())
}

/// Evaluates every permutation of `0..n` not already in `ledger`.
pub fn run_enumeration(
    n: usize,
    policy: &SearchPolicy,
    evaluator: &dyn Evaluator,
    ledger: &mut SearchLedger,
) -> Result<Vec<LedgerEntry>> {
    let todo: Vec<Permutation> = all_permutations(n).into_iter().filter(|p| !ledger.contains(p)).collect();
    for entry in evaluate_all(&todo, policy, Phase::Enumerate, evaluator) {
        ledger.push(entry)?;
    }
    Ok(ledger.ranked())
}
