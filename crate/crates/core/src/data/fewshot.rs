use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{QAInstance, RelationType};
use crate::error::{Error, Result};

/// A seeded ordering of `train` whose every prefix is type-stratified.
///
/// Instances of each type are shuffled once; the ordering then repeatedly
/// takes the type whose count lags its corpus share the most. Prefixes are
/// nested by construction, so `subset(100) ⊂ subset(500)` for one seed.
pub fn stratified_order(train: &[QAInstance], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); RelationType::COUNT];
    for (i, inst) in train.iter().enumerate() {
        pools[inst.relation.code()].push(i);
    }
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    let total = train.len() as f64;
    let shares: Vec<f64> = pools.iter().map(|p| p.len() as f64 / total).collect();
    let mut taken = [0usize; RelationType::COUNT];
    let mut order = Vec::with_capacity(train.len());
    for step in 1..=train.len() {
        let pick = (0..RelationType::COUNT)
            .filter(|&t| taken[t] < pools[t].len())
            .max_by(|&a, &b| {
                let da = step as f64 * shares[a] - taken[a] as f64;
                let db = step as f64 * shares[b] - taken[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("instances remain");
        order.push(pools[pick][taken[pick]]);
        taken[pick] += 1;
    }
    order
}

/// Type-stratified sample of `n` training instances; `n == 0` is the
/// zero-shot condition.
pub fn few_shot_subset(train: &[QAInstance], n: usize, seed: u64) -> Result<Vec<QAInstance>> {
    if n > train.len() {
        return Err(Error::Parameter(format!(
            "few-shot size {n} exceeds training set of {}",
            train.len()
        )));
    }
    Ok(stratified_order(train, seed)
        .into_iter()
        .take(n)
        .map(|i| train[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthOptions, DEFAULT_PROPORTIONS};

    fn corpus() -> Vec<QAInstance> {
        synth_generate(2000, &DEFAULT_PROPORTIONS, 1, SynthOptions::default()).unwrap()
    }

    fn counts(set: &[QAInstance]) -> [usize; 5] {
        let mut c = [0; 5];
        set.iter().for_each(|i| c[i.relation.code()] += 1);
        c
    }

    #[test]
    fn zero_is_empty() {
        assert!(few_shot_subset(&corpus(), 0, 3).unwrap().is_empty());
    }

    #[test]
    fn five_hundred_within_one_of_proportional() {
        let train = corpus();
        let sub = few_shot_subset(&train, 500, 3).unwrap();
        assert_eq!(sub.len(), 500);
        let full = counts(&train);
        for (t, &c) in counts(&sub).iter().enumerate() {
            let expected = 500.0 * full[t] as f64 / train.len() as f64;
            assert!((c as f64 - expected).abs() <= 1.0, "type {t}: {c} vs {expected}");
        }
    }

    #[test]
    fn subsets_are_nested() {
        let train = corpus();
        let small = few_shot_subset(&train, 100, 9).unwrap();
        let large = few_shot_subset(&train, 500, 9).unwrap();
        assert!(small.iter().all(|s| large.iter().any(|l| l.id == s.id)));
    }

    #[test]
    fn oversized_request_fails() {
        let train = corpus();
        assert!(few_shot_subset(&train, train.len() + 1, 0).is_err());
        assert_eq!(few_shot_subset(&train, train.len(), 0).unwrap().len(), train.len());
    }
}
