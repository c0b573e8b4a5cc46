//! Likelihood-ratio (G) test of conditional independence for discrete data.
//!
//! The statistic is summed over the strata defined by the conditioning set.
//! When every expected cell count is at least `min_expected` the p-value
//! comes from the chi-square reference distribution; otherwise it comes from
//! permuting `b` within each stratum.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CiMethod {
    Asymptotic,
    Permutation { permutations: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiOptions {
    pub permutations: usize,
    pub seed: u64,
    pub min_expected: f64,
}

impl Default for CiOptions {
    fn default() -> Self {
        CiOptions {
            permutations: 2000,
            seed: 0x5EED_C1,
            min_expected: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub df: usize,
    pub method: CiMethod,
}

struct Stratum {
    a: Vec<usize>,
    b: Vec<usize>,
    na: usize,
    nb: usize,
}

impl Stratum {
    fn g(&self, b: &[usize]) -> f64 {
        let n = self.a.len() as f64;
        let mut obs = vec![0.0; self.na * self.nb];
        let mut ra = vec![0.0; self.na];
        let mut cb = vec![0.0; self.nb];
        for (&i, &j) in self.a.iter().zip(b) {
            obs[i * self.nb + j] += 1.0;
            ra[i] += 1.0;
            cb[j] += 1.0;
        }
        let mut g = 0.0;
        for i in 0..self.na {
            for j in 0..self.nb {
                let o = obs[i * self.nb + j];
                if o > 0.0 {
                    g += o * (o * n / (ra[i] * cb[j])).ln();
                }
            }
        }
        2.0 * g
    }

    fn min_expected(&self) -> f64 {
        let n = self.a.len() as f64;
        let mut ra = vec![0.0; self.na];
        let mut cb = vec![0.0; self.nb];
        self.a.iter().for_each(|&i| ra[i] += 1.0);
        self.b.iter().for_each(|&j| cb[j] += 1.0);
        let ma = ra.iter().cloned().fold(f64::INFINITY, f64::min);
        let mb = cb.iter().cloned().fold(f64::INFINITY, f64::min);
        ma * mb / n
    }
}

fn dense_codes(values: &[i64]) -> (Vec<usize>, usize) {
    let mut levels: Vec<i64> = values.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let codes = values
        .iter()
        .map(|v| levels.binary_search(v).expect("level present"))
        .collect();
    (codes, levels.len())
}

pub fn ci_test(data: &Dataset, a: &str, b: &str, given: &[&str]) -> Result<CiTestResult> {
    ci_test_with(data, a, b, given, &CiOptions::default())
}

pub fn ci_test_with(
    data: &Dataset,
    a: &str,
    b: &str,
    given: &[&str],
    opts: &CiOptions,
) -> Result<CiTestResult> {
    if data.is_empty() {
        return Err(invalid(
            "conditional independence test needs at least one stratum",
        ));
    }
    let av = data.discrete_column(a)?;
    let bv = data.discrete_column(b)?;
    let gv = given
        .iter()
        .map(|g| data.discrete_column(g))
        .collect::<Result<Vec<_>>>()?;

    let mut groups: BTreeMap<Vec<i64>, (Vec<i64>, Vec<i64>)> = BTreeMap::new();
    for i in 0..data.len() {
        let key: Vec<i64> = gv.iter().map(|c| c[i]).collect();
        let e = groups.entry(key).or_default();
        e.0.push(av[i]);
        e.1.push(bv[i]);
    }
    let strata: Vec<Stratum> = groups
        .into_values()
        .map(|(sa, sb)| {
            let (a, na) = dense_codes(&sa);
            let (b, nb) = dense_codes(&sb);
            Stratum { a, b, na, nb }
        })
        .collect();

    let statistic: f64 = strata.iter().map(|s| s.g(&s.b)).sum();
    let df: usize = strata.iter().map(|s| (s.na - 1) * (s.nb - 1)).sum();
    if df == 0 {
        return Ok(CiTestResult {
            statistic: 0.0,
            p_value: 1.0,
            df,
            method: CiMethod::Asymptotic,
        });
    }
    let sparse = strata
        .iter()
        .filter(|s| s.na > 1 && s.nb > 1)
        .any(|s| s.min_expected() < opts.min_expected);

    if !sparse {
        let chi = ChiSquared::new(df as f64).map_err(|e| invalid(e.to_string()))?;
        return Ok(CiTestResult {
            statistic,
            p_value: chi.sf(statistic),
            df,
            method: CiMethod::Asymptotic,
        });
    }

    let mut rng = rng_from_seed(opts.seed);
    let mut shuffled: Vec<Vec<usize>> = strata.iter().map(|s| s.b.clone()).collect();
    let tol = 1e-9 * statistic.abs().max(1.0);
    let mut exceed = 0usize;
    for _ in 0..opts.permutations {
        let mut g = 0.0;
        for (s, b) in strata.iter().zip(shuffled.iter_mut()) {
            b.shuffle(&mut rng);
            g += s.g(b);
        }
        if g >= statistic - tol {
            exceed += 1;
        }
    }
    Ok(CiTestResult {
        statistic,
        p_value: (1 + exceed) as f64 / (1 + opts.permutations) as f64,
        df,
        method: CiMethod::Permutation {
            permutations: opts.permutations,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;
    use crate::scm::{sample, DiscreteScm, FactorTable, Variable};

    fn coins() -> DiscreteScm {
        DiscreteScm {
            name: "coins".into(),
            environment: "e".into(),
            graph_tag: crate::scm::GraphTag::None,
            class_tag: Default::default(),
            variables: vec![
                Variable::binary("e"),
                Variable::binary("a"),
                Variable::binary("y"),
            ],
            factors: vec![
                FactorTable::prior("a", vec![0.5, 0.5]),
                FactorTable::prior("y", vec![0.5, 0.5]),
            ],
            selection: None,
        }
    }

    fn fork() -> DiscreteScm {
        // a <- c -> y
        DiscreteScm {
            name: "fork".into(),
            environment: "e".into(),
            graph_tag: crate::scm::GraphTag::None,
            class_tag: Default::default(),
            variables: vec![
                Variable::binary("e"),
                Variable::binary("c"),
                Variable::binary("a"),
                Variable::binary("y"),
            ],
            factors: vec![
                FactorTable::prior("c", vec![0.5, 0.5]),
                FactorTable::new("a", &["c"], vec![vec![0.8, 0.2], vec![0.2, 0.8]]),
                FactorTable::new("y", &["c"], vec![vec![0.8, 0.2], vec![0.2, 0.8]]),
            ],
            selection: None,
        }
    }

    #[test]
    fn independent_coins_rarely_rejected() {
        let mut rejections = 0;
        for seed in 0..100 {
            let d = sample(&coins(), 0, 10_000, seed).unwrap();
            let r = ci_test(&d, "a", "y", &[]).unwrap();
            assert_eq!(r.method, CiMethod::Asymptotic);
            if r.p_value <= 0.01 {
                rejections += 1;
            }
        }
        // nominal rate 1%; 5 of 100 is beyond 3 sigma
        assert!(rejections <= 5, "{rejections}");
    }

    #[test]
    fn copy_is_dependent() {
        let mut d = sample(&coins(), 0, 1000, 1).unwrap();
        for r in &mut d.records {
            r.features[0] = f64::from(r.y);
        }
        let r = ci_test(&d, "a", "y", &[]).unwrap();
        assert!(r.p_value < 1e-6, "{}", r.p_value);
    }

    #[test]
    fn fork_is_conditionally_independent() {
        let d = sample(&fork(), 0, 5000, 11).unwrap();
        let marginal = ci_test(&d, "a", "y", &[]).unwrap();
        assert!(marginal.p_value < 1e-6);
        let cond = ci_test(&d, "a", "y", &["c"]).unwrap();
        assert!(cond.p_value > 0.01, "{}", cond.p_value);
        assert_eq!(cond.df, 2);
    }

    #[test]
    fn sparse_tables_use_permutations() {
        let d = Dataset::with_records(
            vec!["a".into()],
            (0..12)
                .map(|i| Record {
                    features: vec![(i % 2) as f64],
                    y: (i % 2) as u8,
                    env: 0,
                })
                .collect(),
        )
        .unwrap();
        let r = ci_test(&d, "a", "y", &[]).unwrap();
        assert!(matches!(
            r.method,
            CiMethod::Permutation { permutations: 2000 }
        ));
        // perfect dependence in 12 samples: exact p = 2 / C(12, 6) ~= 0.0022
        assert!(r.p_value < 0.01, "{}", r.p_value);
        assert_eq!(r, ci_test(&d, "a", "y", &[]).unwrap());
    }

    #[test]
    fn empty_data_is_an_error() {
        let d = Dataset::new(vec!["a".into()]);
        assert!(ci_test(&d, "a", "y", &[]).is_err());
    }
}
