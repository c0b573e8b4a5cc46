//! Build a believer-subclass model that is observationally identical to a
//! skeptic-subclass model on the pooled training environments.
//!
//! The source has `y -> r`, `r -> x_sp <- e`, so `r ⊥ e | y` and any
//! predictor of `(r, x_ac)` is invariant for it. The constructed model has
//! `x_sp -> r` with `p(r | y, x_sp)` copied from the pooled source and new
//! per-environment `p^e(x_sp | y)` chosen so that
//!
//! ```text
//! sum_e p~(e, y) p^e(x_sp | y) = sum_e p~(e, y) D^e_src(x_sp | y),
//! p~(e, y) = pi_e D^e(y)
//! ```
//!
//! For each `y` this is one linear equation in `(p^0, p^1)` on the unit
//! square, so its solutions form a segment through the identity point
//! `p^e = D^e_src`. The chosen point sits at a quarter of the segment length
//! from the identity, towards the farther endpoint.

use super::{
    conditional, joint_distribution, total_variation, ClassTag, DiscreteScm, FactorTable, GraphTag,
    JointTable,
};
use crate::error::{Error, Result};

const TRAIN_ENVS: [usize; 2] = [0, 1];
const PERTURBATION_FRACTION: f64 = 0.25;
const SEGMENT_EPS: f64 = 1e-12;

/// Solution picked on one label's feasible segment, parameterized by
/// `(p^0(x_sp = 1 | y), p^1(x_sp = 1 | y))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentChoice {
    pub label: usize,
    pub identity: [f64; 2],
    pub chosen: [f64; 2],
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Construction {
    pub model: DiscreteScm,
    pub segments: Vec<SegmentChoice>,
    /// False when every feasible segment collapses to a point, in which case
    /// environment dependence could not be induced by perturbation.
    pub perturbed: bool,
    /// Total variation between pooled source and constructed joints over
    /// `(x_sp, x_ac, r, y)`.
    pub total_variation: f64,
    /// `max |D^0(y=1 | r, x_ac) - D^1(y=1 | r, x_ac)|` in the constructed model.
    pub conditional_gap: f64,
}

const OBSERVED: [&str; 4] = ["y", "x_ac", "x_sp", "r"];

fn check_source(src: &DiscreteScm) -> Result<()> {
    src.ensure_valid()?;
    let bad = |msg: String| Err(Error::InvalidArgument(msg));
    if src.graph_tag != GraphTag::RToXsp {
        return bad(format!(
            "source must be tagged r_to_xsp, got {}",
            src.graph_tag
        ));
    }
    for name in OBSERVED {
        match src.variable(name) {
            Some(v) if v.arity == 2 => {}
            Some(_) => return bad(format!("variable `{name}` must be binary")),
            None => return Err(Error::UnknownVariable(name.to_string())),
        }
    }
    if src.environment_arity()? < 2 {
        return bad("source needs two training environments".into());
    }
    if src.observed_variables().len() != OBSERVED.len() {
        return bad("source must contain exactly e, y, x_ac, x_sp, r".into());
    }
    let parents = |c: &str| src.factor(c).map(|f| f.parents.clone()).unwrap_or_default();
    if parents("y").iter().any(|p| *p != src.environment) {
        return bad("`y` may only depend on the environment".into());
    }
    if parents("x_ac") != ["y"] || parents("r") != ["y"] {
        return bad("`x_ac` and `r` must each have `y` as their only parent".into());
    }
    Ok(())
}

fn segment(a: [f64; 2], identity: [f64; 2]) -> (f64, f64, [f64; 2]) {
    // direction along {a0 p0 + a1 p1 = const}
    let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
    let d = [a[1] / norm, -a[0] / norm];
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for k in 0..2 {
        if d[k].abs() < SEGMENT_EPS {
            continue;
        }
        let t0 = (0.0 - identity[k]) / d[k];
        let t1 = (1.0 - identity[k]) / d[k];
        lo = lo.max(t0.min(t1));
        hi = hi.min(t0.max(t1));
    }
    (lo.min(0.0), hi.max(0.0), d)
}

pub fn construct_believer_from_skeptic(source: &DiscreteScm) -> Result<Construction> {
    check_source(source)?;
    let n_env = source.environment_arity()?;
    let per_env = (0..n_env)
        .map(|e| joint_distribution(source, e)?.marginal(&OBSERVED))
        .collect::<Result<Vec<JointTable>>>()?;
    let pi = 1.0 / TRAIN_ENVS.len() as f64;
    let train: Vec<(f64, &JointTable)> = TRAIN_ENVS.iter().map(|&e| (pi, &per_env[e])).collect();
    let pooled = JointTable::mixture(&train)?;

    // D^e(x_sp = 1 | y) for every environment
    let xsp_given_y = |e: usize, y: usize| -> Result<f64> {
        Ok(conditional(&per_env[e], "x_sp", &[("y", y)])?[1])
    };
    let degenerate = (0..2).all(|y| {
        TRAIN_ENVS.iter().all(|&e| {
            xsp_given_y(e, y)
                .map(|p| p == 0.0 || p == 1.0)
                .unwrap_or(true)
        }) && xsp_given_y(0, y).ok() == xsp_given_y(1, y).ok()
    });
    if degenerate {
        return Err(Error::NoConstruction(
            "x_sp is a deterministic, environment-free function of y".into(),
        ));
    }

    let mut segments = Vec::with_capacity(2);
    for y in 0..2 {
        let a = [
            pi * per_env[0].probability(&[("y", y)])?,
            pi * per_env[1].probability(&[("y", y)])?,
        ];
        let identity = [xsp_given_y(0, y)?, xsp_given_y(1, y)?];
        let (lo, hi, d) = segment(a, identity);
        let length = hi - lo;
        let chosen = if length < SEGMENT_EPS {
            identity
        } else {
            let t = if hi >= -lo {
                PERTURBATION_FRACTION * length
            } else {
                -PERTURBATION_FRACTION * length
            };
            [
                (identity[0] + t * d[0]).clamp(0.0, 1.0),
                (identity[1] + t * d[1]).clamp(0.0, 1.0),
            ]
        };
        segments.push(SegmentChoice {
            label: y,
            identity,
            chosen,
            length,
        });
    }
    let perturbed = segments.iter().any(|s| s.length >= SEGMENT_EPS);

    // p(x_sp | e, y): perturbed on training environments, identity elsewhere
    let mut xsp_rows = Vec::with_capacity(n_env * 2);
    for e in 0..n_env {
        for seg in &segments {
            let p1 = match e {
                0 => seg.chosen[0],
                1 => seg.chosen[1],
                _ => xsp_given_y(e, seg.label)?,
            };
            xsp_rows.push(vec![1.0 - p1, p1]);
        }
    }
    // p(r | y, x_sp) from the pooled source
    let mut r_rows = Vec::with_capacity(4);
    for y in 0..2 {
        for x in 0..2 {
            let row = conditional(&pooled, "r", &[("y", y), ("x_sp", x)])
                .unwrap_or_else(|_| vec![0.5, 0.5]);
            r_rows.push(row);
        }
    }

    let env = source.environment.as_str();
    let mut model = DiscreteScm {
        name: format!("{}_believer", source.name),
        environment: source.environment.clone(),
        graph_tag: GraphTag::XspToR,
        class_tag: ClassTag::AntiCausal,
        variables: source.variables.clone(),
        factors: vec![
            source.factor("y").cloned().expect("validated"),
            source.factor("x_ac").cloned().expect("validated"),
            FactorTable::new("x_sp", &[env, "y"], xsp_rows),
            FactorTable::new("r", &["y", "x_sp"], r_rows),
        ],
        selection: source.selection.clone(),
    };
    // keep the declaration order of the source
    model
        .factors
        .sort_by_key(|f| source.variables.iter().position(|v| v.name == f.child));
    model.ensure_valid()?;

    let built = TRAIN_ENVS
        .iter()
        .map(|&e| joint_distribution(&model, e)?.marginal(&OBSERVED))
        .collect::<Result<Vec<_>>>()?;
    let built_pooled = JointTable::mixture(&[(pi, &built[0]), (pi, &built[1])])?;
    let tv = total_variation(&pooled, &built_pooled)?;

    let mut gap: f64 = 0.0;
    for r in 0..2 {
        for x in 0..2 {
            let given = [("r", r), ("x_ac", x)];
            let p0 = conditional(&built[0], "y", &given)?[1];
            let p1 = conditional(&built[1], "y", &given)?[1];
            gap = gap.max((p0 - p1).abs());
        }
    }

    Ok(Construction {
        model,
        segments,
        perturbed,
        total_variation: tv,
        conditional_gap: gap,
    })
}
