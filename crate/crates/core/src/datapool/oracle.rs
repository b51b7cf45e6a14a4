//! Ground-truth side of the pool: simulated annotator, stratification and
//! evaluation access.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pool::Pool;
use super::sample::LabelProvenance;
use crate::error::{Error, Result};
use crate::labels::{LabelSet, Light, Weather};

/// Truth-reading access to a pool. Only evaluation and the simulated
/// annotator go through here.
pub struct OracleView<'a> {
    pool: &'a Pool,
}

impl<'a> OracleView<'a> {
    pub fn truth(&self, id: u64) -> Option<LabelSet> {
        self.pool.get(id).and_then(|s| s.truth())
    }

    /// `(id, image, truth)` for every sample that has truth, in id order.
    pub fn labeled_truth(&self) -> Vec<(u64, &'a [f32], LabelSet)> {
        self.pool
            .samples_sorted()
            .filter_map(|s| s.truth().map(|t| (s.id(), s.image().pixels(), t)))
            .collect()
    }

    /// Truth-bearing ids grouped by stratum, each list in id order.
    pub fn strata<I: IntoIterator<Item = u64>>(&self, ids: I) -> [Vec<u64>; 9] {
        let mut strata: [Vec<u64>; 9] = Default::default();
        for id in ids {
            if let Some(t) = self.truth(id) {
                strata[t.stratum()].push(id);
            }
        }
        strata.iter_mut().for_each(|s| s.sort_unstable());
        strata
    }
}

impl Pool {
    pub fn oracle(&self) -> OracleView<'_> {
        OracleView { pool: self }
    }

    /// Simulated annotation: writes truth as the working label, except that
    /// with probability `noise_rate` both categories are replaced by a
    /// uniformly drawn different value.
    pub fn oracle_label(&mut self, ids: &[u64], noise_rate: f64, seed: u64, provenance: LabelProvenance) -> Result<()> {
        if !(0.0..=1.0).contains(&noise_rate) {
            return Err(Error::InvalidArgument(format!("noise rate {noise_rate} outside [0, 1]")));
        }
        if !provenance.is_annotator() {
            return Err(Error::InvalidArgument("oracle labels must have bootstrap or human provenance".into()));
        }
        let mut truths = Vec::with_capacity(ids.len());
        for &id in ids {
            let sample = self.get(id).ok_or(Error::UnknownSample(id))?;
            truths.push(sample.truth().ok_or(Error::MissingTruth(id))?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (&id, truth) in ids.iter().zip(truths) {
            let label = if rng.gen_bool(noise_rate) {
                LabelSet::new(flip(truth.weather.index(), &mut rng, Weather::from_index), flip(truth.light.index(), &mut rng, Light::from_index))
            } else {
                truth
            };
            self.write_label(id, label, provenance)?;
        }
        Ok(())
    }

    /// Copy of the pool with every truth replaced by `sentinel`. Used to
    /// audit that the learner path never reads truth.
    pub fn with_poisoned_truths(&self, sentinel: LabelSet) -> Pool {
        let mut out = self.clone();
        let ids: Vec<u64> = out.ids().collect();
        for id in ids {
            let s = out.get_mut(id).expect("id from pool");
            if s.has_truth() {
                s.set_truth(Some(sentinel));
            }
        }
        out
    }

    /// Splits off a stratified evaluation pool holding `fraction` of the
    /// truth-bearing samples. Returns `(remaining, evaluation)`.
    pub fn split_stratified(self, fraction: f64, seed: u64) -> Result<(Pool, Pool)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("eval fraction {fraction} outside [0, 1)")));
        }
        let with_truth = self.samples_sorted().filter(|s| s.has_truth()).count();
        let n_eval = (fraction * with_truth as f64).round() as usize;
        let eval_ids: std::collections::BTreeSet<u64> = stratified_sample(&self, self.ids(), n_eval, seed)?.into_iter().collect();
        let (mut rest, mut eval) = (Pool::new(self.side()), Pool::new(self.side()));
        for s in self.samples_sorted() {
            if eval_ids.contains(&s.id()) {
                eval.insert(s.clone())?;
            } else {
                rest.insert(s.clone())?;
            }
        }
        Ok((rest, eval))
    }
}

fn flip<T>(current: usize, rng: &mut ChaCha8Rng, from_index: fn(usize) -> Option<T>) -> T {
    let shift = rng.gen_range(1..3);
    from_index((current + shift) % 3).expect("index in 0..3")
}

/// Largest-remainder allocation of `n` draws proportional to `sizes`.
/// Leftover units go to the largest fractional parts, ties to the lower index.
pub fn largest_remainder(sizes: &[usize], n: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 || n == 0 {
        return vec![0; sizes.len()];
    }
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| s * n / total).collect();
    let mut remainders: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, &s)| (s * n % total, i)).collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - alloc.iter().sum::<usize>();
    for &(_, i) in remainders.iter().take(short) {
        alloc[i] += 1;
    }
    alloc
}

/// Stratified draw of `n` ids out of `candidates` (truth-bearing only),
/// uniform without replacement inside each stratum. Result is sorted.
pub fn stratified_sample(pool: &Pool, candidates: impl IntoIterator<Item = u64>, n: usize, seed: u64) -> Result<Vec<u64>> {
    let strata = pool.oracle().strata(candidates);
    let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
    let available: usize = sizes.iter().sum();
    if n > available {
        return Err(Error::InvalidArgument(format!(
            "requested {n} samples but only {available} carry ground truth"
        )));
    }
    let alloc = largest_remainder(&sizes, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (stratum, take) in strata.iter().zip(alloc) {
        chosen.extend(stratum.choose_multiple(&mut rng, take).copied());
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Initial labeled set: stratified draw from the unlabeled index.
pub fn stratified_bootstrap(pool: &Pool, n: usize, seed: u64) -> Result<Vec<u64>> {
    if n > pool.len() {
        return Err(Error::InvalidArgument(format!("bootstrap size {n} exceeds pool size {}", pool.len())));
    }
    stratified_sample(pool, pool.unlabeled_ids().iter().copied(), n, seed)
}

/// Count of truth-bearing samples per stratum, for reports.
pub fn stratum_histogram(pool: &Pool) -> BTreeMap<String, usize> {
    let strata = pool.oracle().strata(pool.ids());
    strata
        .iter()
        .enumerate()
        .map(|(i, ids)| (LabelSet::from_stratum(i).expect("nine strata").to_string(), ids.len()))
        .collect()
}
