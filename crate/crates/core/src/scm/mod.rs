//! Discrete structural causal models.
//!
//! A model is a set of small discrete variables, one of which is the
//! designated environment `e`. Every other variable has exactly one factor
//! table `p(child | parents)`; a factor that lists `e` among its parents is
//! environment-indexed. An optional selection table `w(e, y)` reweights the
//! per-environment joint, which is how label/environment confounding enters.
//!
//! Factor rows are ordered by parent assignment in mixed radix, last parent
//! varying fastest.

mod citest;
mod construct;
mod joint;
mod sample;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use citest::{ci_test, ci_test_with, CiMethod, CiOptions, CiTestResult};
pub use construct::{construct_believer_from_skeptic, Construction, SegmentChoice};
pub use joint::{
    bayes_optimal, conditional, conditional_mutual_information, joint_distribution,
    total_variation, BayesClassifier, JointTable,
};
pub use sample::{sample, sample_environments, sample_stratified};

const ROW_TOLERANCE: f64 = 1e-12;

fn default_arity() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    #[serde(default = "default_arity")]
    pub arity: usize,
}

impl Variable {
    pub fn new(name: impl Into<String>, arity: usize) -> Self {
        Variable {
            name: name.into(),
            arity,
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Variable::new(name, 2)
    }
}

/// `p(child | parents)`, one probability row per parent assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    pub child: String,
    #[serde(default)]
    pub parents: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FactorTable {
    pub fn new(child: impl Into<String>, parents: &[&str], rows: Vec<Vec<f64>>) -> Self {
        FactorTable {
            child: child.into(),
            parents: parents.iter().map(|s| s.to_string()).collect(),
            rows,
        }
    }

    /// Root factor with a single prior row.
    pub fn prior(child: impl Into<String>, probs: Vec<f64>) -> Self {
        FactorTable::new(child, &[], vec![probs])
    }
}

/// Selection weights indexed `weights[e][y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    #[serde(default = "default_label")]
    pub label: String,
    pub weights: Vec<Vec<f64>>,
}

fn default_label() -> String {
    crate::data::LABEL_COLUMN.to_string()
}

/// Direction of the edge between the spurious item feature and the
/// platform-supplied information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphTag {
    XspToR,
    RToXsp,
    None,
}

impl GraphTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            GraphTag::XspToR => "xsp_to_r",
            GraphTag::RToXsp => "r_to_xsp",
            GraphTag::None => "none",
        }
    }
}

impl fmt::Display for GraphTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassTag {
    Causal,
    #[default]
    AntiCausal,
}

fn default_graph_tag() -> GraphTag {
    GraphTag::None
}

fn default_environment() -> String {
    crate::data::ENV_COLUMN.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteScm {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_environment")]
    pub environment: String,
    #[serde(default = "default_graph_tag")]
    pub graph_tag: GraphTag,
    #[serde(default)]
    pub class_tag: ClassTag,
    pub variables: Vec<Variable>,
    pub factors: Vec<FactorTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionSpec>,
}

/// A single structural defect found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateVariable(String),
    BadArity {
        variable: String,
        arity: usize,
    },
    UnknownEnvironment(String),
    UnknownVariable {
        factor: String,
        name: String,
    },
    MissingFactor(String),
    DuplicateFactor(String),
    EnvironmentHasFactor,
    RowCount {
        factor: String,
        expected: usize,
        got: usize,
    },
    RowLength {
        factor: String,
        row: usize,
        expected: usize,
        got: usize,
    },
    EntryOutOfRange {
        factor: String,
        row: usize,
        column: usize,
        value: f64,
    },
    RowNotNormalized {
        factor: String,
        row: usize,
        sum: f64,
    },
    Cycle(Vec<String>),
    SelectionLabel(String),
    SelectionShape {
        expected_envs: usize,
        expected_labels: usize,
    },
    SelectionNegative {
        env: usize,
        label: usize,
        value: f64,
    },
    SelectionAllZero {
        env: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            DuplicateVariable(v) => write!(f, "variable `{v}` declared more than once"),
            BadArity { variable, arity } => {
                write!(f, "variable `{variable}` has arity {arity} (must be >= 2)")
            }
            UnknownEnvironment(e) => write!(f, "environment variable `{e}` is not declared"),
            UnknownVariable { factor, name } => {
                write!(f, "factor `{factor}` references undeclared variable `{name}`")
            }
            MissingFactor(v) => write!(f, "variable `{v}` has no factor"),
            DuplicateFactor(v) => write!(f, "variable `{v}` has more than one factor"),
            EnvironmentHasFactor => write!(f, "the environment variable must not have a factor"),
            RowCount { factor, expected, got } => {
                write!(f, "factor `{factor}` has {got} rows, expected {expected}")
            }
            RowLength { factor, row, expected, got } => write!(
                f,
                "factor `{factor}` row {row} has {got} entries, expected {expected}"
            ),
            EntryOutOfRange { factor, row, column, value } => write!(
                f,
                "factor `{factor}` row {row} entry {column} = {value} is outside [0, 1]"
            ),
            RowNotNormalized { factor, row, sum } => {
                write!(f, "factor `{factor}` row {row} sums to {sum}")
            }
            Cycle(path) => write!(f, "cycle: {}", path.join(" -> ")),
            SelectionLabel(l) => write!(f, "selection label `{l}` is not declared"),
            SelectionShape { expected_envs, expected_labels } => write!(
                f,
                "selection table must be {expected_envs} x {expected_labels} (environments x labels)"
            ),
            SelectionNegative { env, label, value } => write!(
                f,
                "selection weight for e={env}, {label} is negative ({value})"
            ),
            SelectionAllZero { env } => {
                write!(f, "selection weights for e={env} are all zero")
            }
        }
    }
}

impl DiscreteScm {
    pub fn variable(&self, name: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn arity(&self, name: &str) -> Result<usize> {
        self.variable(name)
            .map(|v| v.arity)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn factor(&self, child: &str) -> Option<&FactorTable> {
        self.factors.iter().find(|f| f.child == child)
    }

    pub fn environment_arity(&self) -> Result<usize> {
        self.arity(&self.environment)
    }

    /// Variables other than the environment, in declaration order.
    pub fn observed_variables(&self) -> Vec<Variable> {
        self.variables
            .iter()
            .filter(|v| v.name != self.environment)
            .cloned()
            .collect()
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }

    /// Error out unless the model is free of violations.
    pub fn ensure_valid(&self) -> Result<()> {
        let v = validate(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(
                v.iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join("\n"),
            ))
        }
    }

    pub fn from_toml_str(s: &str) -> Result<DiscreteScm> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Canonical text form; parsing it back yields an equal model.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DiscreteScm> {
        DiscreteScm::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

/// List every structural defect of `scm`; an empty list means the model is
/// acyclic, fully specified, normalized, and covers every environment.
pub fn validate(scm: &DiscreteScm) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut arity: BTreeMap<&str, usize> = BTreeMap::new();
    for v in &scm.variables {
        if arity.insert(v.name.as_str(), v.arity).is_some() {
            out.push(Violation::DuplicateVariable(v.name.clone()));
        }
        if v.arity < 2 {
            out.push(Violation::BadArity {
                variable: v.name.clone(),
                arity: v.arity,
            });
        }
    }
    if !arity.contains_key(scm.environment.as_str()) {
        out.push(Violation::UnknownEnvironment(scm.environment.clone()));
    }

    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for f in &scm.factors {
        if f.child == scm.environment {
            out.push(Violation::EnvironmentHasFactor);
            continue;
        }
        if !seen.insert(f.child.as_str()) {
            out.push(Violation::DuplicateFactor(f.child.clone()));
            continue;
        }
        let mut resolvable = true;
        for name in std::iter::once(&f.child).chain(f.parents.iter()) {
            if !arity.contains_key(name.as_str()) {
                out.push(Violation::UnknownVariable {
                    factor: f.child.clone(),
                    name: name.clone(),
                });
                resolvable = false;
            }
        }
        if !resolvable {
            continue;
        }
        let expected_rows: usize = f.parents.iter().map(|p| arity[p.as_str()]).product();
        let width = arity[f.child.as_str()];
        if f.rows.len() != expected_rows {
            out.push(Violation::RowCount {
                factor: f.child.clone(),
                expected: expected_rows,
                got: f.rows.len(),
            });
        }
        for (ri, row) in f.rows.iter().enumerate() {
            if row.len() != width {
                out.push(Violation::RowLength {
                    factor: f.child.clone(),
                    row: ri,
                    expected: width,
                    got: row.len(),
                });
                continue;
            }
            let mut in_range = true;
            for (ci, &p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    in_range = false;
                    out.push(Violation::EntryOutOfRange {
                        factor: f.child.clone(),
                        row: ri,
                        column: ci,
                        value: p,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if in_range && (sum - 1.0).abs() > ROW_TOLERANCE {
                out.push(Violation::RowNotNormalized {
                    factor: f.child.clone(),
                    row: ri,
                    sum,
                });
            }
        }
    }
    for v in &scm.variables {
        if v.name != scm.environment && !seen.contains(v.name.as_str()) {
            out.push(Violation::MissingFactor(v.name.clone()));
        }
    }

    if let Some(cycle) = find_cycle(scm) {
        out.push(Violation::Cycle(cycle));
    }

    if let Some(sel) = &scm.selection {
        match (
            arity.get(sel.label.as_str()),
            arity.get(scm.environment.as_str()),
        ) {
            (None, _) => out.push(Violation::SelectionLabel(sel.label.clone())),
            (Some(&ny), Some(&ne)) => {
                if sel.weights.len() != ne || sel.weights.iter().any(|r| r.len() != ny) {
                    out.push(Violation::SelectionShape {
                        expected_envs: ne,
                        expected_labels: ny,
                    });
                } else {
                    for (e, row) in sel.weights.iter().enumerate() {
                        for (y, &w) in row.iter().enumerate() {
                            if !(w >= 0.0) || !w.is_finite() {
                                out.push(Violation::SelectionNegative {
                                    env: e,
                                    label: y,
                                    value: w,
                                });
                            }
                        }
                        if row.iter().all(|&w| w <= 0.0) {
                            out.push(Violation::SelectionAllZero { env: e });
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Return one directed cycle among the factor edges, if any.
fn find_cycle(scm: &DiscreteScm) -> Option<Vec<String>> {
    let parents: BTreeMap<&str, Vec<&str>> = scm
        .factors
        .iter()
        .map(|f| {
            (
                f.child.as_str(),
                f.parents.iter().map(String::as_str).collect(),
            )
        })
        .collect();
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state: BTreeMap<&str, u8> = BTreeMap::new();
    let mut stack: Vec<&str> = Vec::new();

    fn visit<'a>(
        node: &'a str,
        parents: &BTreeMap<&'a str, Vec<&'a str>>,
        state: &mut BTreeMap<&'a str, u8>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        match state.get(node) {
            Some(2) => return None,
            Some(1) => {
                let start = stack.iter().position(|&n| n == node).unwrap_or(0);
                // stack runs child -> parent; report in edge direction parent -> child
                let mut cyc: Vec<String> =
                    stack[start..].iter().rev().map(|s| s.to_string()).collect();
                cyc.push(cyc[0].clone());
                return Some(cyc);
            }
            _ => {}
        }
        state.insert(node, 1);
        stack.push(node);
        if let Some(ps) = parents.get(node) {
            for &p in ps {
                if let Some(c) = visit(p, parents, state, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        state.insert(node, 2);
        None
    }

    for f in &scm.factors {
        if let Some(c) = visit(f.child.as_str(), &parents, &mut state, &mut stack) {
            return Some(c);
        }
    }
    None
}
