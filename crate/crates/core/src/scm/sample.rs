use rand::seq::SliceRandom;
use rand::Rng;

use super::{joint_distribution, DiscreteScm, JointTable};
use crate::data::{Dataset, Record, LABEL_COLUMN};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Draw `n` i.i.d. samples from the joint of environment `env`.
///
/// Sampling inverts the cumulative distribution of the exact joint table,
/// so selection is honoured exactly. Feature columns are the observed
/// variables other than `y`, in declaration order.
pub fn sample(scm: &DiscreteScm, env: usize, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("sample size must be at least 1"));
    }
    let joint = joint_distribution(scm, env)?;
    let label = joint.position(LABEL_COLUMN)?;
    if joint.variables[label].arity != 2 {
        return Err(invalid("label variable must be binary"));
    }
    let columns: Vec<String> = joint
        .variables
        .iter()
        .filter(|v| v.name != LABEL_COLUMN)
        .map(|v| v.name.clone())
        .collect();
    let cdf = cumulative(&joint);
    let mut rng = rng_from_seed(seed);
    let mut ds = Dataset::new(columns);
    ds.records.reserve(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
        let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let a = joint.assignment(idx);
        let features = a
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != label)
            .map(|(_, &v)| v as f64)
            .collect();
        ds.records.push(Record {
            features,
            y: a[label] as u8,
            env,
        });
    }
    Ok(ds)
}

/// Draw `n` rows whose cell counts match `n * p` as closely as integers
/// allow (largest-remainder rounding), in seeded random order.
///
/// Evaluation sets built this way carry no sampling noise in their cell
/// frequencies, so accuracies on them are population accuracies up to
/// rounding of the counts.
pub fn sample_stratified(scm: &DiscreteScm, env: usize, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("sample size must be at least 1"));
    }
    let joint = joint_distribution(scm, env)?;
    let label = joint.position(LABEL_COLUMN)?;
    if joint.variables[label].arity != 2 {
        return Err(invalid("label variable must be binary"));
    }
    let columns: Vec<String> = joint
        .variables
        .iter()
        .filter(|v| v.name != LABEL_COLUMN)
        .map(|v| v.name.clone())
        .collect();
    let exact: Vec<f64> = joint.probabilities.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    order.iter().take(short).for_each(|&i| counts[i] += 1);

    let mut ds = Dataset::new(columns);
    ds.records.reserve(n);
    for (idx, &c) in counts.iter().enumerate() {
        let a = joint.assignment(idx);
        for _ in 0..c {
            ds.records.push(Record {
                features: a
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != label)
                    .map(|(_, &v)| v as f64)
                    .collect(),
                y: a[label] as u8,
                env,
            });
        }
    }
    ds.records.shuffle(&mut rng_from_seed(seed));
    Ok(ds)
}

/// Sample `n` rows from each environment in `envs`, concatenated in the
/// given order. Each environment draws from its own derived stream.
pub fn sample_environments(
    scm: &DiscreteScm,
    envs: &[usize],
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    let parts = envs
        .iter()
        .map(|&e| sample(scm, e, n, derive_seed(seed, &[e as u64])))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Dataset> = parts.iter().collect();
    Dataset::concat(&refs).map_err(|_| Error::InvalidArgument("no environments given".into()))
}

fn cumulative(joint: &JointTable) -> Vec<f64> {
    joint
        .probabilities
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::tests::chain;
    use super::super::FactorTable;
    use super::*;

    fn coin() -> DiscreteScm {
        let mut m = chain();
        m.factors[0] = FactorTable::prior("y", vec![0.5, 0.5]);
        m
    }

    #[test]
    fn single_sample_is_deterministic() {
        let a = sample(&coin(), 0, 1, 42).unwrap();
        let b = sample(&coin(), 0, 1, 42).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn fair_coin_frequency() {
        let d = sample(&coin(), 0, 100_000, 3).unwrap();
        let p = d.records.iter().filter(|r| r.y == 1).count() as f64 / 1e5;
        assert!((p - 0.5).abs() < 0.01, "{p}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = sample_environments(&chain(), &[0, 1], 500, 9).unwrap();
        let b = sample_environments(&chain(), &[0, 1], 500, 9).unwrap();
        assert_eq!(a.to_csv_bytes().unwrap(), b.to_csv_bytes().unwrap());
        let c = sample_environments(&chain(), &[0, 1], 500, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(sample(&coin(), 0, 0, 1).is_err());
        assert!(sample_stratified(&coin(), 0, 0, 1).is_err());
    }

    #[test]
    fn stratified_counts_are_exact() {
        let d = sample_stratified(&coin(), 0, 1001, 4).unwrap();
        let ones = d.records.iter().filter(|r| r.y == 1).count();
        assert_eq!(d.len(), 1001);
        assert!(ones == 500 || ones == 501);
        assert_eq!(d, sample_stratified(&coin(), 0, 1001, 4).unwrap());
    }
}
