//! Boundedly-rational choice.
//!
//! A user scores an item by averaging its value over their subjective
//! belief about the unobserved attribute `x̄`,
//! `ṽ(x, r | e) = Σ_x̄ v(x, x̄, r) p(x̄ | x, r, e)`, and chooses it iff the
//! perceived value is strictly positive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Record};
use crate::error::{invalid, Error, Result};

const ROW_TOLERANCE: f64 = 1e-12;

/// `p(x̄ | x, r, e)`; rows ordered by `(x, r, e)` with `e` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefModel {
    pub x_arity: usize,
    pub r_arity: usize,
    pub env_arity: usize,
    pub xbar_arity: usize,
    pub rows: Vec<Vec<f64>>,
}

/// `v(x, x̄, r)`; entries ordered by `(x, x̄, r)` with `r` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueModel {
    pub x_arity: usize,
    pub xbar_arity: usize,
    pub r_arity: usize,
    pub values: Vec<f64>,
}

/// The observed context of one choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChoiceContext {
    pub user: u32,
    pub x: usize,
    pub r: usize,
    pub env: usize,
}

/// Belief and value tables as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserModel {
    pub belief: BeliefModel,
    pub value: ValueModel,
}

impl UserModel {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let m: UserModel = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        m.belief.check()?;
        m.value.check()?;
        if m.belief.x_arity != m.value.x_arity
            || m.belief.r_arity != m.value.r_arity
            || m.belief.xbar_arity != m.value.xbar_arity
        {
            return Err(invalid("belief and value tables disagree on domains"));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

impl BeliefModel {
    pub fn new(
        x_arity: usize,
        r_arity: usize,
        env_arity: usize,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let xbar_arity = rows.first().map(Vec::len).unwrap_or(0);
        let m = BeliefModel {
            x_arity,
            r_arity,
            env_arity,
            xbar_arity,
            rows,
        };
        m.check()?;
        Ok(m)
    }

    /// Belief that ignores the environment.
    pub fn environment_free(
        x_arity: usize,
        r_arity: usize,
        env_arity: usize,
        rows_xr: &[Vec<f64>],
    ) -> Result<Self> {
        let mut rows = Vec::with_capacity(rows_xr.len() * env_arity);
        for row in rows_xr {
            for _ in 0..env_arity {
                rows.push(row.clone());
            }
        }
        BeliefModel::new(x_arity, r_arity, env_arity, rows)
    }

    fn check(&self) -> Result<()> {
        if self.rows.len() != self.x_arity * self.r_arity * self.env_arity {
            return Err(invalid(format!(
                "belief table has {} rows, expected {}",
                self.rows.len(),
                self.x_arity * self.r_arity * self.env_arity
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.len() != self.xbar_arity
                || row.iter().any(|p| !(0.0..=1.0).contains(p))
                || (s - 1.0).abs() > ROW_TOLERANCE
            {
                return Err(invalid(format!(
                    "belief row {i} is not a probability vector"
                )));
            }
        }
        Ok(())
    }

    pub fn row(&self, x: usize, r: usize, env: usize) -> Result<&[f64]> {
        if x >= self.x_arity || r >= self.r_arity || env >= self.env_arity {
            return Err(invalid(format!(
                "context (x={x}, r={r}, e={env}) outside belief domain"
            )));
        }
        Ok(&self.rows[(x * self.r_arity + r) * self.env_arity + env])
    }
}

impl ValueModel {
    pub fn new(
        x_arity: usize,
        xbar_arity: usize,
        r_arity: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let m = ValueModel {
            x_arity,
            xbar_arity,
            r_arity,
            values,
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        if self.values.len() != self.x_arity * self.xbar_arity * self.r_arity {
            return Err(invalid("value table has the wrong number of entries"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("value table entries must be finite"));
        }
        Ok(())
    }

    pub fn get(&self, x: usize, xbar: usize, r: usize) -> f64 {
        self.values[(x * self.xbar_arity + xbar) * self.r_arity + r]
    }

    /// Entrywise sum of two value tables over the same domain.
    pub fn add(&self, other: &ValueModel) -> Result<ValueModel> {
        if self.values.len() != other.values.len() {
            return Err(invalid("value tables have different domains"));
        }
        ValueModel::new(
            self.x_arity,
            self.xbar_arity,
            self.r_arity,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }
}

pub fn perceived_value(
    belief: &BeliefModel,
    value: &ValueModel,
    x: usize,
    r: usize,
    env: usize,
) -> Result<f64> {
    if belief.xbar_arity != value.xbar_arity || x >= value.x_arity || r >= value.r_arity {
        return Err(invalid("belief and value domains do not match"));
    }
    let row = belief.row(x, r, env)?;
    Ok(row
        .iter()
        .enumerate()
        .map(|(xbar, p)| value.get(x, xbar, r) * p)
        .sum())
}

/// `1[ṽ > 0]`; zero is not chosen.
pub fn choose(v_tilde: f64) -> u8 {
    u8::from(v_tilde > 0.0)
}

/// Fill in each context's choice. Output columns are `u, x, r`.
pub fn simulate_choices(
    belief: &BeliefModel,
    value: &ValueModel,
    contexts: &[ChoiceContext],
) -> Result<Dataset> {
    let mut ds = Dataset::new(vec!["u".into(), "x".into(), "r".into()]);
    for c in contexts {
        let v = perceived_value(belief, value, c.x, c.r, c.env)?;
        ds.push(Record {
            features: vec![f64::from(c.user), c.x as f64, c.r as f64],
            y: choose(v),
            env: c.env,
        })?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_contexts(x: usize, r: usize, e: usize) -> Vec<ChoiceContext> {
        let mut out = Vec::new();
        for xi in 0..x {
            for ri in 0..r {
                for ei in 0..e {
                    out.push(ChoiceContext {
                        user: 0,
                        x: xi,
                        r: ri,
                        env: ei,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn degenerate_belief_picks_one_value() {
        let b = BeliefModel::environment_free(1, 1, 1, &[vec![0.0, 1.0]]).unwrap();
        let v = ValueModel::new(1, 2, 1, vec![3.0, -7.5]).unwrap();
        assert_eq!(perceived_value(&b, &v, 0, 0, 0).unwrap(), -7.5);
    }

    #[test]
    fn uniform_belief_averages() {
        let b = BeliefModel::environment_free(1, 1, 1, &[vec![0.5, 0.5]]).unwrap();
        let v = ValueModel::new(1, 2, 1, vec![2.0, -1.0]).unwrap();
        assert_eq!(perceived_value(&b, &v, 0, 0, 0).unwrap(), 0.5);
        let zero = ValueModel::new(1, 2, 1, vec![0.0, 0.0]).unwrap();
        assert_eq!(perceived_value(&b, &zero, 0, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let b = BeliefModel::environment_free(1, 1, 1, &[vec![0.5, 0.5]]).unwrap();
        let v = ValueModel::new(1, 2, 1, vec![2.0, -1.0]).unwrap();
        assert!(perceived_value(&b, &v, 1, 0, 0).is_err());
        assert!(perceived_value(&b, &v, 0, 0, 3).is_err());
    }

    #[test]
    fn choice_is_strict() {
        assert_eq!(choose(0.5), 1);
        assert_eq!(choose(0.0), 0);
        assert_eq!(choose(-3.2), 0);
    }

    #[test]
    fn environment_free_beliefs_give_environment_free_choices() {
        let b = BeliefModel::environment_free(
            2,
            2,
            3,
            &[
                vec![0.9, 0.1],
                vec![0.4, 0.6],
                vec![0.2, 0.8],
                vec![0.5, 0.5],
            ],
        )
        .unwrap();
        let v = ValueModel::new(2, 2, 2, vec![1.0, -2.0, 0.5, -0.1, -1.0, 3.0, 0.2, -0.4]).unwrap();
        let ds = simulate_choices(&b, &v, &all_contexts(2, 2, 3)).unwrap();
        for chunk in ds.records.chunks(3) {
            assert!(chunk.iter().all(|r| r.y == chunk[0].y));
        }
    }

    #[test]
    fn environment_dependent_beliefs_flip_choices() {
        // belief in x̄ = 1 rises from 0.2 to 0.8 across environments; the
        // value switches sign in x̄, so ṽ crosses zero
        let b = BeliefModel::new(1, 1, 2, vec![vec![0.8, 0.2], vec![0.2, 0.8]]).unwrap();
        let v = ValueModel::new(1, 2, 1, vec![-1.0, 1.0]).unwrap();
        let ds = simulate_choices(&b, &v, &all_contexts(1, 1, 2)).unwrap();
        assert_eq!(ds.records[0].y, 0);
        assert_eq!(ds.records[1].y, 1);
    }

    #[test]
    fn empty_contexts() {
        let b = BeliefModel::environment_free(1, 1, 1, &[vec![1.0]]).unwrap();
        let v = ValueModel::new(1, 1, 1, vec![1.0]).unwrap();
        assert!(simulate_choices(&b, &v, &[]).unwrap().is_empty());
    }

    #[test]
    fn loads_from_toml() {
        let src = r#"
            [belief]
            x_arity = 1
            r_arity = 1
            env_arity = 2
            xbar_arity = 2
            rows = [[0.5, 0.5], [0.1, 0.9]]
            [value]
            x_arity = 1
            xbar_arity = 2
            r_arity = 1
            values = [2.0, -1.0]
        "#;
        let m = UserModel::from_toml_str(src).unwrap();
        assert_eq!(perceived_value(&m.belief, &m.value, 0, 0, 0).unwrap(), 0.5);
        assert!(UserModel::from_toml_str(&src.replace("0.1, 0.9", "0.1, 0.8")).is_err());
    }

    fn table(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, n)
    }

    proptest! {
        #[test]
        fn perceived_value_is_linear_in_values(v1 in table(8), v2 in table(8), w in prop::collection::vec(0.01f64..1.0, 2)) {
            let s = w[0] + w[1];
            let row = vec![w[0] / s, 1.0 - w[0] / s];
            let b = BeliefModel::environment_free(2, 2, 1, &vec![row; 4]).unwrap();
            let a = ValueModel::new(2, 2, 2, v1).unwrap();
            let c = ValueModel::new(2, 2, 2, v2).unwrap();
            let sum = a.add(&c).unwrap();
            for x in 0..2 {
                for r in 0..2 {
                    let lhs = perceived_value(&b, &sum, x, r, 0).unwrap();
                    let rhs = perceived_value(&b, &a, x, r, 0).unwrap() + perceived_value(&b, &c, x, r, 0).unwrap();
                    prop_assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn choice_ignores_positive_scaling(v in -10.0f64..10.0, c in 1e-3f64..1e3) {
            prop_assert_eq!(choose(c * v), choose(v));
        }
    }
}
