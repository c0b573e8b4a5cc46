//! Three binary features `x_ac`, `x_sp`, `r` generated from `(e, y)` for
//! two user subclasses, with two training environments and one test
//! environment.
//!
//! * `XspToR`: `x_sp` agrees with `y` with an environment-dependent rate and
//!   the platform shows `r := x_sp`.
//! * `RToXsp`: `r` agrees with `y` with a fixed rate; `x_sp` copies `r` with
//!   probability `r_pull` and otherwise follows the same environment-dependent
//!   channel from `y`. This is the v-structure `r -> x_sp <- e`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, mix_subpopulations, ExperimentReport};
use crate::data::Dataset;
use crate::divergence::{Divergence, KernelSpec};
use crate::error::{invalid, Result};
use crate::model::{Architecture, Predictor};
use crate::rng::derive_seed;
use crate::scm::{
    construct_believer_from_skeptic, sample_environments, sample_stratified, ClassTag, DiscreteScm,
    FactorTable, GraphTag, SelectionSpec, Variable,
};
use crate::trainer::{
    train, verify_invariance, LambdaSchedule, Optimizer, PenaltyKind, TrainConfig, VerifyOptions,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubclassParams {
    /// `P(x_sp channel = y)` per environment: two train, one test.
    pub q_e: Vec<f64>,
    pub p_xac: f64,
    /// `P(y = 1 | e)` induced by selection.
    pub p_y_given_e: Vec<f64>,
    /// `P(r = y)` for the `RToXsp` subclass.
    pub p_r: f64,
    /// Probability that `x_sp` copies `r` in the `RToXsp` subclass.
    pub r_pull: f64,
    pub n_per_env: usize,
}

impl Default for SubclassParams {
    fn default() -> Self {
        SubclassParams {
            q_e: vec![0.90, 0.66, 0.50],
            p_xac: 0.75,
            p_y_given_e: vec![0.55, 0.45, 0.50],
            p_r: 0.85,
            r_pull: 0.2,
            n_per_env: 20_000,
        }
    }
}

impl SubclassParams {
    pub fn validate(&self) -> Result<()> {
        if self.q_e.len() != 3 || self.p_y_given_e.len() != 3 {
            return Err(invalid(
                "subclass experiment needs exactly 2 train + 1 test environment",
            ));
        }
        let probs =
            self.q_e
                .iter()
                .chain(&self.p_y_given_e)
                .chain([&self.p_xac, &self.p_r, &self.r_pull]);
        for &p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.p_y_given_e.iter().any(|&p| p == 0.0 || p == 1.0) {
            return Err(invalid("P(y | e) must be strictly inside (0, 1)"));
        }
        if self.n_per_env == 0 {
            return Err(invalid("n_per_env must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    XspToR,
    RToXsp,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::XspToR, Group::RToXsp];

    pub fn tag(self) -> GraphTag {
        match self {
            Group::XspToR => GraphTag::XspToR,
            Group::RToXsp => GraphTag::RToXsp,
        }
    }

    pub fn name(self) -> &'static str {
        self.tag().as_str()
    }

    fn index(self) -> u64 {
        match self {
            Group::XspToR => 0,
            Group::RToXsp => 1,
        }
    }
}

fn agree(p: f64) -> Vec<Vec<f64>> {
    vec![vec![p, 1.0 - p], vec![1.0 - p, p]]
}

/// The exact model for one subclass.
pub fn subclass_scm(params: &SubclassParams, group: Group) -> Result<DiscreteScm> {
    params.validate()?;
    let mut factors = vec![
        FactorTable::prior("y", vec![0.5, 0.5]),
        FactorTable::new("x_ac", &["y"], agree(params.p_xac)),
    ];
    match group {
        Group::XspToR => {
            let rows = params.q_e.iter().flat_map(|&q| agree(q)).collect();
            factors.push(FactorTable::new("x_sp", &["e", "y"], rows));
            factors.push(FactorTable::new("r", &["x_sp"], agree(1.0)));
        }
        Group::RToXsp => {
            factors.push(FactorTable::new("r", &["y"], agree(params.p_r)));
            let mut rows = Vec::new();
            for &q in &params.q_e {
                for y in 0..2 {
                    for r in 0..2 {
                        let channel = if y == 1 { q } else { 1.0 - q };
                        let p1 = params.r_pull * r as f64 + (1.0 - params.r_pull) * channel;
                        rows.push(vec![1.0 - p1, p1]);
                    }
                }
            }
            factors.push(FactorTable::new("x_sp", &["e", "y", "r"], rows));
        }
    }
    let scm = DiscreteScm {
        name: format!("subclass_{}", group.name()),
        environment: "e".into(),
        graph_tag: group.tag(),
        class_tag: ClassTag::AntiCausal,
        variables: vec![
            Variable::new("e", 3),
            Variable::binary("y"),
            Variable::binary("x_ac"),
            Variable::binary("x_sp"),
            Variable::binary("r"),
        ],
        factors,
        selection: Some(SelectionSpec {
            label: "y".into(),
            weights: params
                .p_y_given_e
                .iter()
                .map(|&p| vec![1.0 - p, p])
                .collect(),
        }),
    };
    scm.ensure_valid()?;
    Ok(scm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubclassData {
    pub scm: DiscreteScm,
    /// Environments 0 and 1, `n_per_env` rows each.
    pub train: Dataset,
    /// Held-out rows from environments 0 and 1 with exact cell counts.
    pub id_test: Dataset,
    /// Environment 2 with exact cell counts.
    pub test: Dataset,
}

pub fn gen_subclass_experiment(
    params: &SubclassParams,
    group: Group,
    seed: u64,
) -> Result<SubclassData> {
    let scm = subclass_scm(params, group)?;
    let n = params.n_per_env;
    let train = sample_environments(&scm, &[0, 1], n, derive_seed(seed, &[0]))?;
    let id0 = sample_stratified(&scm, 0, n, derive_seed(seed, &[1, 0]))?;
    let id1 = sample_stratified(&scm, 1, n, derive_seed(seed, &[1, 1]))?;
    let id_test = Dataset::concat(&[&id0, &id1])?;
    let test = sample_stratified(&scm, 2, n, derive_seed(seed, &[2]))?;
    Ok(SubclassData {
        scm,
        train,
        id_test,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Table1Config {
    /// Settings shared by every cell; penalty and lambda are overridden.
    pub train: TrainConfig,
    pub penalty: PenaltyKind,
    pub lambda: LambdaSchedule,
    pub verify_permutations: usize,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config {
            train: TrainConfig {
                divergence: Divergence::Mmd(KernelSpec::gaussian(1.0)),
                learning_rate: 0.01,
                epochs: 10,
                batch_size: 2048,
                optimizer: Optimizer::adam(),
                architecture: Architecture::Linear,
                ..TrainConfig::default()
            },
            penalty: PenaltyKind::Conditional,
            lambda: LambdaSchedule::TwoPhase {
                first: 0.0,
                epochs: 2,
                then: 10.0,
            },
            verify_permutations: 500,
        }
    }
}

impl Table1Config {
    fn cell_config(&self, regularized: bool, seed: u64) -> TrainConfig {
        let mut c = self.train.clone();
        c.seed = seed;
        if regularized {
            c.penalty = self.penalty;
            c.lambda = self.lambda;
        } else {
            c.penalty = PenaltyKind::None;
            c.lambda = LambdaSchedule::Constant(0.0);
        }
        c
    }
}

/// Which users a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Users {
    Only(Group),
    Both,
}

impl Users {
    const ALL: [Users; 3] = [
        Users::Only(Group::XspToR),
        Users::Only(Group::RToXsp),
        Users::Both,
    ];

    fn name(self) -> &'static str {
        match self {
            Users::Only(g) => g.name(),
            Users::Both => "both",
        }
    }

    fn index(self) -> u64 {
        match self {
            Users::Only(g) => g.index(),
            Users::Both => 2,
        }
    }
}

fn cell_seed(seed: u64, regularized: bool, users: Users) -> u64 {
    derive_seed(seed, &[20, u64::from(regularized), users.index()])
}

fn group_data(params: &SubclassParams, seed: u64) -> Result<[SubclassData; 2]> {
    let x = gen_subclass_experiment(params, Group::XspToR, derive_seed(seed, &[10, 0]))?;
    let r = gen_subclass_experiment(params, Group::RToXsp, derive_seed(seed, &[10, 1]))?;
    Ok([x, r])
}

fn train_condition(regularized: bool, users: Users) -> String {
    let reg = if regularized { "lambda>0" } else { "lambda=0" };
    format!("{reg}/train={}", users.name())
}

/// Train every (regularization, users) cell and evaluate it in and out of
/// distribution on each subclass.
pub fn run_table1(
    params: &SubclassParams,
    cfg: &Table1Config,
    seed: u64,
) -> Result<ExperimentReport> {
    let data = group_data(params, seed)?;
    let cells: Vec<(bool, Users)> = [false, true]
        .into_iter()
        .flat_map(|reg| Users::ALL.into_iter().map(move |u| (reg, u)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(reg, users)| {
            let train_set = match users {
                Users::Only(g) => data[g.index() as usize].train.clone(),
                Users::Both => Dataset::concat(&[&data[0].train, &data[1].train])?,
            };
            let (model, history) = train(
                &cfg.cell_config(reg, cell_seed(seed, reg, users)),
                &train_set,
            )?;
            let mut rows = Vec::new();
            for g in Group::ALL {
                let d = &data[g.index() as usize];
                rows.push((
                    format!("{}/id", g.name()),
                    "accuracy",
                    evaluate(&model, &d.id_test)?.accuracy,
                ));
                rows.push((
                    format!("{}/ood", g.name()),
                    "accuracy",
                    evaluate(&model, &d.test)?.accuracy,
                ));
                let opts = VerifyOptions {
                    permutations: cfg.verify_permutations,
                    seed: derive_seed(seed, &[30, g.index()]),
                    ..VerifyOptions::default()
                };
                let t = verify_invariance(&model, &d.id_test, PenaltyKind::Conditional, &opts)?;
                rows.push((format!("{}/id", g.name()), "invariance_p", t.p_value));
            }
            let last = history.epochs.last().map_or(0.0, |r| r.penalty);
            rows.push(("train".into(), "final_penalty", last));
            Ok((train_condition(reg, users), rows, history.skipped_cells))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = ExperimentReport::new(
        "table1",
        seed,
        serde_json::json!({ "params": params, "config": cfg }),
    );
    for (cond, rows, skipped) in results {
        for (test, metric, value) in rows {
            report.push(cond.clone(), test, metric, value);
        }
        report.skipped_cells += skipped;
    }
    Ok(report)
}

/// Train the conditional model for one subclass exactly as the per-group
/// regularized cell of [`run_table1`] does.
pub fn train_group_model(
    params: &SubclassParams,
    cfg: &Table1Config,
    group: Group,
    regularized: bool,
    seed: u64,
) -> Result<(Predictor, SubclassData)> {
    let [x, r] = group_data(params, seed)?;
    let d = if group == Group::XspToR { x } else { r };
    let (model, _) = train(
        &cfg.cell_config(
            regularized,
            cell_seed(seed, regularized, Users::Only(group)),
        ),
        &d.train,
    )?;
    Ok((model, d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureConfig {
    pub table: Table1Config,
    pub alphas: Vec<f64>,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            table: Table1Config::default(),
            alphas: vec![0.0, 0.1, 0.25],
        }
    }
}

/// Swap an `alpha` fraction of each subclass into the other, then compare
/// per-mixed-group regularized models against one pooled unregularized
/// model. Test users are mixed the same way, since the learner only knows
/// the coarse group at test time too.
pub fn run_mixture(
    params: &SubclassParams,
    cfg: &MixtureConfig,
    seed: u64,
) -> Result<ExperimentReport> {
    let data = group_data(params, seed)?;
    let results = cfg
        .alphas
        .par_iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let i = i as u64;
            let (train_a, train_b) = mix_subpopulations(
                &data[0].train,
                &data[1].train,
                alpha,
                derive_seed(seed, &[40, i]),
            )?;
            let (test_a, test_b) = mix_subpopulations(
                &data[0].test,
                &data[1].test,
                alpha,
                derive_seed(seed, &[41, i]),
            )?;
            let tc = &cfg.table;
            let (model_a, ha) = train(
                &tc.cell_config(true, cell_seed(seed, true, Users::Only(Group::XspToR))),
                &train_a,
            )?;
            let (model_b, hb) = train(
                &tc.cell_config(true, cell_seed(seed, true, Users::Only(Group::RToXsp))),
                &train_b,
            )?;
            let pooled_train = Dataset::concat(&[&train_a, &train_b])?;
            let (pooled, _) = train(
                &tc.cell_config(false, cell_seed(seed, false, Users::Both)),
                &pooled_train,
            )?;

            let acc_a = evaluate(&model_a, &test_a)?.accuracy;
            let acc_b = evaluate(&model_b, &test_b)?.accuracy;
            let na = test_a.len() as f64;
            let nb = test_b.len() as f64;
            let robust = (acc_a * na + acc_b * nb) / (na + nb);
            let baseline = evaluate(&pooled, &Dataset::concat(&[&test_a, &test_b])?)?.accuracy;
            Ok((
                alpha,
                acc_a,
                acc_b,
                robust,
                baseline,
                ha.skipped_cells + hb.skipped_cells,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = ExperimentReport::new(
        "mixture",
        seed,
        serde_json::json!({ "params": params, "config": cfg }),
    );
    for (alpha, acc_a, acc_b, robust, baseline, skipped) in results {
        let robust_cond = format!("alpha={alpha}/per_group");
        report.push(&robust_cond, "mixed_xsp_to_r/ood", "accuracy", acc_a);
        report.push(&robust_cond, "mixed_r_to_xsp/ood", "accuracy", acc_b);
        report.push(&robust_cond, "all/ood", "accuracy", robust);
        report.push(
            format!("alpha={alpha}/pooled"),
            "all/ood",
            "accuracy",
            baseline,
        );
        report.skipped_cells += skipped;
    }
    Ok(report)
}

/// Build the observationally equivalent counterpart of the default
/// `RToXsp` model and report the two certifying quantities.
pub fn run_appendix_a(params: &SubclassParams) -> Result<ExperimentReport> {
    let source = subclass_scm(params, Group::RToXsp)?;
    let c = construct_believer_from_skeptic(&source)?;
    let mut report = ExperimentReport::new("appendixA", 0, serde_json::json!({ "params": params }));
    let cond = "construction";
    report.push(cond, "pooled_e0_e1", "total_variation", c.total_variation);
    report.push(cond, "e0_vs_e1", "conditional_gap", c.conditional_gap);
    report.push(
        cond,
        "segments",
        "perturbed",
        f64::from(u8::from(c.perturbed)),
    );
    for s in &c.segments {
        report.push(cond, format!("y={}", s.label), "segment_length", s.length);
    }
    Ok(report)
}
