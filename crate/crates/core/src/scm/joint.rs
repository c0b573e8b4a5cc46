use std::collections::BTreeMap;

use super::{DiscreteScm, Variable};
use crate::data::LABEL_COLUMN;
use crate::error::{invalid, Error, Result};

const JOINT_TOLERANCE: f64 = 1e-10;

/// Dense probability table over the full outcome space of `variables`.
/// Index is mixed radix with the last variable varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub variables: Vec<Variable>,
    pub probabilities: Vec<f64>,
}

impl JointTable {
    pub fn new(variables: Vec<Variable>, probabilities: Vec<f64>) -> Result<Self> {
        let size: usize = variables.iter().map(|v| v.arity).product();
        if size != probabilities.len() {
            return Err(Error::DimensionMismatch {
                expected: size,
                got: probabilities.len(),
            });
        }
        Ok(JointTable {
            variables,
            probabilities,
        })
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probabilities.iter().sum()
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.variables.iter().map(|v| v.name.as_str()).collect()
    }

    /// Decode a flat index into per-variable values.
    pub fn assignment(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.variables.len()];
        for (slot, v) in out.iter_mut().zip(&self.variables).rev() {
            *slot = index % v.arity;
            index /= v.arity;
        }
        out
    }

    pub fn index_of(&self, assignment: &[usize]) -> usize {
        assignment
            .iter()
            .zip(&self.variables)
            .fold(0, |acc, (&a, v)| acc * v.arity + a)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        self.probabilities
            .iter()
            .enumerate()
            .map(move |(i, &p)| (self.assignment(i), p))
    }

    /// Marginal over `names`, in that order.
    pub fn marginal(&self, names: &[&str]) -> Result<JointTable> {
        let pos = names
            .iter()
            .map(|n| self.position(n))
            .collect::<Result<Vec<_>>>()?;
        let vars: Vec<Variable> = pos.iter().map(|&i| self.variables[i].clone()).collect();
        let size: usize = vars.iter().map(|v| v.arity).product();
        let mut out = JointTable {
            variables: vars,
            probabilities: vec![0.0; size],
        };
        for (a, p) in self.iter() {
            let sub: Vec<usize> = pos.iter().map(|&i| a[i]).collect();
            let idx = out.index_of(&sub);
            out.probabilities[idx] += p;
        }
        Ok(out)
    }

    /// Probability of a partial assignment.
    pub fn probability(&self, event: &[(&str, usize)]) -> Result<f64> {
        let pos = event
            .iter()
            .map(|(n, _)| self.position(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .iter()
            .filter(|(a, _)| pos.iter().zip(event).all(|(&i, &(_, v))| a[i] == v))
            .map(|(_, p)| p)
            .sum())
    }

    /// Weighted combination of tables over identical variables.
    pub fn mixture(parts: &[(f64, &JointTable)]) -> Result<JointTable> {
        let (_, first) = parts.first().ok_or_else(|| invalid("empty mixture"))?;
        let mut out = JointTable {
            variables: first.variables.clone(),
            probabilities: vec![0.0; first.len()],
        };
        for (w, t) in parts {
            if t.variables != out.variables {
                return Err(invalid("mixture components have different variables"));
            }
            for (o, p) in out.probabilities.iter_mut().zip(&t.probabilities) {
                *o += w * p;
            }
        }
        Ok(out)
    }

    /// Prepend a variable whose value is fixed, e.g. to tag an
    /// environment-conditional table with its environment.
    fn with_fixed_leading(&self, var: Variable, value: usize) -> JointTable {
        let n = self.len();
        let mut probabilities = vec![0.0; n * var.arity];
        probabilities[value * n..(value + 1) * n].copy_from_slice(&self.probabilities);
        let mut variables = vec![var];
        variables.extend(self.variables.iter().cloned());
        JointTable {
            variables,
            probabilities,
        }
    }
}

fn factor_row(assign: &[usize], parent_pos: &[usize], arities: &[usize]) -> usize {
    parent_pos
        .iter()
        .fold(0, |acc, &p| acc * arities[p] + assign[p])
}

/// Exact joint over the non-environment variables given `e = env`: the
/// product of all factors, reweighted by the selection table when present
/// and renormalized.
pub fn joint_distribution(scm: &DiscreteScm, env: usize) -> Result<JointTable> {
    scm.ensure_valid()?;
    let env_arity = scm.environment_arity()?;
    if env >= env_arity {
        return Err(Error::EnvironmentOutOfRange {
            env,
            arity: env_arity,
        });
    }
    // index space: all declared variables, environment included but pinned
    let names: Vec<&str> = scm.variables.iter().map(|v| v.name.as_str()).collect();
    let arities: Vec<usize> = scm.variables.iter().map(|v| v.arity).collect();
    let pos = |n: &str| names.iter().position(|&m| m == n).expect("validated");
    let env_pos = pos(&scm.environment);
    let factors: Vec<(usize, Vec<usize>, &Vec<Vec<f64>>)> = scm
        .factors
        .iter()
        .map(|f| {
            (
                pos(&f.child),
                f.parents.iter().map(|p| pos(p)).collect(),
                &f.rows,
            )
        })
        .collect();
    let selection = scm
        .selection
        .as_ref()
        .map(|s| (pos(&s.label), &s.weights[env]));

    let observed = scm.observed_variables();
    let mut table = JointTable {
        probabilities: vec![0.0; observed.iter().map(|v| v.arity).product()],
        variables: observed,
    };
    let mut full = vec![0usize; names.len()];
    full[env_pos] = env;
    for idx in 0..table.len() {
        let sub = table.assignment(idx);
        let mut k = 0;
        for (i, slot) in full.iter_mut().enumerate() {
            if i != env_pos {
                *slot = sub[k];
                k += 1;
            }
        }
        let mut p = 1.0;
        for (child, parents, rows) in &factors {
            p *= rows[factor_row(&full, parents, &arities)][full[*child]];
            if p == 0.0 {
                break;
            }
        }
        if let Some((label_pos, w)) = selection {
            p *= w[full[label_pos]];
        }
        table.probabilities[idx] = p;
    }
    let z = table.total();
    if !(z > 0.0) {
        return Err(Error::DegenerateSelection(env));
    }
    for p in &mut table.probabilities {
        *p /= z;
    }
    debug_assert!((table.total() - 1.0).abs() < JOINT_TOLERANCE);
    Ok(table)
}

impl DiscreteScm {
    pub fn joint(&self, env: usize) -> Result<JointTable> {
        joint_distribution(self, env)
    }

    /// Equal-weight mixture of the per-environment joints over `envs`, with
    /// the environment variable kept as the leading variable.
    pub fn environment_joint(&self, envs: &[usize]) -> Result<JointTable> {
        if envs.is_empty() {
            return Err(invalid("no environments given"));
        }
        let env_var = self
            .variable(&self.environment)
            .cloned()
            .ok_or_else(|| Error::UnknownVariable(self.environment.clone()))?;
        let w = 1.0 / envs.len() as f64;
        let parts = envs
            .iter()
            .map(|&e| Ok(self.joint(e)?.with_fixed_leading(env_var.clone(), e)))
            .collect::<Result<Vec<_>>>()?;
        let weighted: Vec<(f64, &JointTable)> = parts.iter().map(|t| (w, t)).collect();
        JointTable::mixture(&weighted)
    }

    /// Observational joint pooled with equal weight over `envs`.
    pub fn pooled_joint(&self, envs: &[usize]) -> Result<JointTable> {
        let tagged = self.environment_joint(envs)?;
        let names: Vec<String> = self
            .observed_variables()
            .into_iter()
            .map(|v| v.name)
            .collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        tagged.marginal(&refs)
    }
}

/// Exact `p(target | given)`.
pub fn conditional(joint: &JointTable, target: &str, given: &[(&str, usize)]) -> Result<Vec<f64>> {
    let t = joint.position(target)?;
    let pos = given
        .iter()
        .map(|(n, _)| joint.position(n))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0; joint.variables[t].arity];
    for (a, p) in joint.iter() {
        if pos.iter().zip(given).all(|(&i, &(_, v))| a[i] == v) {
            out[a[t]] += p;
        }
    }
    let z: f64 = out.iter().sum();
    if !(z > 0.0) {
        return Err(Error::ZeroProbability);
    }
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

/// Argmax-posterior classifier over a feature subset.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesClassifier {
    pub features: Vec<String>,
    /// Predicted label for every feature assignment (mixed radix order).
    pub decisions: Vec<usize>,
    pub feature_arities: Vec<usize>,
    /// Exact accuracy on the joint the classifier was fitted to.
    pub accuracy: f64,
}

impl BayesClassifier {
    pub fn predict(&self, assignment: &[usize]) -> usize {
        let idx = assignment
            .iter()
            .zip(&self.feature_arities)
            .fold(0, |acc, (&a, &k)| acc * k + a);
        self.decisions[idx]
    }

    /// Exact accuracy of this fixed classifier on another joint.
    pub fn accuracy_on(&self, joint: &JointTable) -> Result<f64> {
        let y = joint.position(LABEL_COLUMN)?;
        let pos = self
            .features
            .iter()
            .map(|f| joint.position(f))
            .collect::<Result<Vec<_>>>()?;
        Ok(joint
            .iter()
            .filter(|(a, _)| {
                let feats: Vec<usize> = pos.iter().map(|&i| a[i]).collect();
                self.predict(&feats) == a[y]
            })
            .map(|(_, p)| p)
            .sum())
    }
}

/// Exact Bayes-optimal classifier for `y` from `features`. Ties go to the
/// larger label value (`y = 1` for binary labels).
pub fn bayes_optimal(joint: &JointTable, features: &[&str]) -> Result<BayesClassifier> {
    if features.contains(&LABEL_COLUMN) {
        return Err(invalid("feature subset must not contain the label"));
    }
    let mut names: Vec<&str> = features.to_vec();
    names.push(LABEL_COLUMN);
    let m = joint.marginal(&names)?;
    let ny = m.variables.last().map(|v| v.arity).unwrap_or(0);
    let feature_arities: Vec<usize> = m.variables[..features.len()]
        .iter()
        .map(|v| v.arity)
        .collect();
    let cells = m.len() / ny;
    let mut decisions = Vec::with_capacity(cells);
    let mut accuracy = 0.0;
    for c in 0..cells {
        let row = &m.probabilities[c * ny..(c + 1) * ny];
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p >= row[best] {
                best = k;
            }
        }
        accuracy += row[best];
        decisions.push(best);
    }
    Ok(BayesClassifier {
        features: features.iter().map(|s| s.to_string()).collect(),
        decisions,
        feature_arities,
        accuracy,
    })
}

/// `I(a; b | given)` in nats.
pub fn conditional_mutual_information(
    joint: &JointTable,
    a: &str,
    b: &str,
    given: &[&str],
) -> Result<f64> {
    let mut names = vec![a, b];
    names.extend_from_slice(given);
    let m = joint.marginal(&names)?;
    let mut p_abz: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut p_az: BTreeMap<(usize, Vec<usize>), f64> = BTreeMap::new();
    let mut p_bz: BTreeMap<(usize, Vec<usize>), f64> = BTreeMap::new();
    let mut p_z: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for (asg, p) in m.iter() {
        let z = asg[2..].to_vec();
        *p_abz.entry(asg.clone()).or_default() += p;
        *p_az.entry((asg[0], z.clone())).or_default() += p;
        *p_bz.entry((asg[1], z.clone())).or_default() += p;
        *p_z.entry(z).or_default() += p;
    }
    let mut cmi = 0.0;
    for (asg, &p) in &p_abz {
        if p <= 0.0 {
            continue;
        }
        let z = asg[2..].to_vec();
        let num = p * p_z[&z];
        let den = p_az[&(asg[0], z.clone())] * p_bz[&(asg[1], z)];
        cmi += p * (num / den).ln();
    }
    Ok(cmi.max(0.0))
}

/// Total variation distance; `q` is aligned to `p`'s variable order.
pub fn total_variation(p: &JointTable, q: &JointTable) -> Result<f64> {
    let names = p.names();
    if q.variables.len() != names.len() {
        return Err(invalid("tables cover different variables"));
    }
    let q = q.marginal(&names)?;
    Ok(0.5
        * p.probabilities
            .iter()
            .zip(&q.probabilities)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}
