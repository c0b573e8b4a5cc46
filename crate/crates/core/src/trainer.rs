//! Penalized risk minimization across environments.
//!
//! The objective is the pooled mean log-loss plus `lambda` times an
//! invariance penalty on the predictor's representation. The marginal
//! penalty compares each environment against the pooled complement; the
//! conditional penalty does the same within each label stratum.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::divergence::{median_bandwidth, mmd2_one_vs_rest, Bandwidth, Divergence, SampleMatrix};
use crate::error::{invalid, Error, Result};
use crate::model::{Architecture, Predictor, Tap};
use crate::rng::{derive_seed, derived_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    #[default]
    None,
    Marginal,
    Conditional,
}

impl PenaltyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PenaltyKind::None => "none",
            PenaltyKind::Marginal => "marginal",
            PenaltyKind::Conditional => "conditional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant(f64),
    /// `first` for the first `epochs` epochs, `then` afterwards.
    TwoPhase {
        first: f64,
        epochs: usize,
        then: f64,
    },
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Constant(0.0)
    }
}

impl LambdaSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            LambdaSchedule::Constant(l) => l,
            LambdaSchedule::TwoPhase {
                first,
                epochs,
                then,
            } => {
                if epoch < epochs {
                    first
                } else {
                    then
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LambdaSchedule::Constant(l) => l >= 0.0 && l.is_finite(),
            LambdaSchedule::TwoPhase {
                first,
                epochs,
                then,
            } => {
                epochs >= 1 && first >= 0.0 && then >= 0.0 && first.is_finite() && then.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid lambda schedule {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub penalty: PenaltyKind,
    pub divergence: Divergence,
    pub lambda: LambdaSchedule,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub min_cell: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub architecture: Architecture,
    /// Representation layer; the architecture's default when absent.
    pub tap: Option<Tap>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            penalty: PenaltyKind::None,
            divergence: Divergence::default(),
            lambda: LambdaSchedule::default(),
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 256,
            min_cell: 4,
            seed: 0,
            optimizer: Optimizer::Sgd,
            architecture: Architecture::Linear,
            tap: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 || (self.penalty != PenaltyKind::None && self.batch_size < 2) {
            return Err(invalid(
                "batch size must be at least 2 when a penalty is used",
            ));
        }
        self.lambda.validate()
    }

    fn penalty_active(&self, lambda: f64) -> bool {
        self.penalty != PenaltyKind::None && lambda != 0.0
    }
}

/// Features and labels drawn from one environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnvBatch {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl EnvBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub type EnvBatches = BTreeMap<usize, EnvBatch>;

/// Group a dataset's records into per-environment batches.
pub fn batches_from(data: &Dataset) -> EnvBatches {
    let mut out = EnvBatches::new();
    for r in &data.records {
        let b = out.entry(r.env).or_default();
        b.features.push(r.features.clone());
        b.labels.push(r.y);
    }
    out
}

/// A comparison that was left out because one side was too small.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkippedCell {
    pub env: usize,
    pub label: Option<u8>,
    pub inside: usize,
    pub outside: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyEval {
    pub value: f64,
    /// Per environment, per sample gradient with respect to the
    /// representation, aligned with the batch order.
    pub grads: BTreeMap<usize, Vec<Vec<f64>>>,
    pub skipped: Vec<SkippedCell>,
}

/// Representations of every sample at the predictor's tap.
pub fn representations(
    p: &Predictor,
    batches: &EnvBatches,
) -> Result<BTreeMap<usize, Vec<Vec<f64>>>> {
    batches
        .iter()
        .map(|(&e, b)| {
            let reps = b
                .features
                .iter()
                .map(|x| Ok(p.forward(x)?.representation))
                .collect::<Result<Vec<_>>>()?;
            Ok((e, reps))
        })
        .collect()
}

pub fn penalty_value(
    p: &Predictor,
    batches: &EnvBatches,
    kind: PenaltyKind,
    div: &Divergence,
    min_cell: usize,
) -> Result<PenaltyEval> {
    let reps = representations(p, batches)?;
    penalty_from_representations(&reps, batches, kind, div, min_cell)
}

/// Penalty over precomputed representations. The MMD bandwidth, when
/// resolved by the median heuristic, is computed once over all rows.
pub fn penalty_from_representations(
    reps: &BTreeMap<usize, Vec<Vec<f64>>>,
    batches: &EnvBatches,
    kind: PenaltyKind,
    div: &Divergence,
    min_cell: usize,
) -> Result<PenaltyEval> {
    let mut grads: BTreeMap<usize, Vec<Vec<f64>>> = reps
        .iter()
        .map(|(&e, r)| (e, r.iter().map(|v| vec![0.0; v.len()]).collect()))
        .collect();
    let mut eval = PenaltyEval {
        value: 0.0,
        grads: BTreeMap::new(),
        skipped: Vec::new(),
    };
    if kind == PenaltyKind::None || reps.len() < 2 {
        eval.grads = grads;
        return Ok(eval);
    }

    let all: Vec<&Vec<f64>> = reps.values().flatten().collect();
    let sigma = match div {
        Divergence::Mmd(k) => match k.bandwidth {
            Bandwidth::Fixed(s) => Some(s),
            Bandwidth::Median => match median_bandwidth(&SampleMatrix::from_rows(&all)?) {
                Ok(s) => Some(s),
                // every representation coincides: nothing to penalize
                Err(_) => {
                    eval.grads = grads;
                    return Ok(eval);
                }
            },
        },
        Divergence::Coral => None,
    };
    let floor = min_cell.max(div.min_rows());

    let strata: Vec<Option<u8>> = match kind {
        PenaltyKind::Conditional => vec![Some(0), Some(1)],
        _ => vec![None],
    };
    for label in strata {
        // (env, index within env) of every row in this stratum
        let members: BTreeMap<usize, Vec<usize>> = batches
            .iter()
            .map(|(&e, b)| {
                let idx = (0..b.len())
                    .filter(|&i| label.is_none_or(|y| b.labels[i] == y))
                    .collect();
                (e, idx)
            })
            .collect();
        let total: usize = members.values().map(Vec::len).sum();
        let mut active = Vec::new();
        for (&k, inside) in &members {
            let outside = total - inside.len();
            if inside.len() < floor || outside < floor {
                eval.skipped.push(SkippedCell {
                    env: k,
                    label,
                    inside: inside.len(),
                    outside,
                });
            } else {
                active.push(k);
            }
        }
        if active.is_empty() {
            continue;
        }

        if let (Divergence::Mmd(_), Some(sigma)) = (div, sigma) {
            // one kernel pass over the stratum serves every environment
            let src: Vec<(usize, usize)> = members
                .iter()
                .flat_map(|(&e, idx)| idx.iter().map(move |&i| (e, i)))
                .collect();
            let envs: Vec<usize> = members.keys().copied().collect();
            let slot = |e: usize| envs.binary_search(&e).expect("env present");
            let rows: Vec<&Vec<f64>> = src.iter().map(|&(e, i)| &reps[&e][i]).collect();
            let group: Vec<usize> = src.iter().map(|&(e, _)| slot(e)).collect();
            let which: Vec<usize> = active.iter().map(|&k| slot(k)).collect();
            let (values, g) =
                mmd2_one_vs_rest(&SampleMatrix::from_rows(&rows)?, &group, &which, sigma)?;
            eval.value += values.iter().sum::<f64>();
            for (r, &(e, i)) in src.iter().enumerate() {
                let dst = grads.get_mut(&e).expect("env present");
                dst[i].iter_mut().zip(g.row(r)).for_each(|(x, y)| *x += y);
            }
            continue;
        }

        for k in active {
            let inside = &members[&k];
            let a_rows: Vec<&Vec<f64>> = inside.iter().map(|&i| &reps[&k][i]).collect();
            let b_src: Vec<(usize, usize)> = members
                .iter()
                .filter(|(&e, _)| e != k)
                .flat_map(|(&e, idx)| idx.iter().map(move |&i| (e, i)))
                .collect();
            let b_rows: Vec<&Vec<f64>> = b_src.iter().map(|&(e, i)| &reps[&e][i]).collect();
            let a = SampleMatrix::from_rows(&a_rows)?;
            let b = SampleMatrix::from_rows(&b_rows)?;
            let (v, (ga, gb)) = div.value_and_grad(&a, &b, sigma)?;
            eval.value += v;
            for (r, &i) in inside.iter().enumerate() {
                let g = grads.get_mut(&k).expect("env present");
                g[i].iter_mut().zip(ga.row(r)).for_each(|(x, y)| *x += y);
            }
            for (r, &(e, i)) in b_src.iter().enumerate() {
                let g = grads.get_mut(&e).expect("env present");
                g[i].iter_mut().zip(gb.row(r)).for_each(|(x, y)| *x += y);
            }
        }
    }
    eval.grads = grads;
    Ok(eval)
}

fn pooled<'a>(batches: &'a EnvBatches) -> (Vec<&'a [f64]>, Vec<u8>) {
    let feats = batches
        .values()
        .flat_map(|b| b.features.iter().map(Vec::as_slice))
        .collect();
    let labels = batches
        .values()
        .flat_map(|b| b.labels.iter().copied())
        .collect();
    (feats, labels)
}

/// Pooled mean log-loss plus `lambda` times the penalty.
pub fn objective(
    p: &Predictor,
    batches: &EnvBatches,
    lambda: f64,
    kind: PenaltyKind,
    div: &Divergence,
    min_cell: usize,
) -> Result<f64> {
    let (feats, labels) = pooled(batches);
    let loss = p.mean_loss(&feats, &labels)?;
    if lambda == 0.0 || kind == PenaltyKind::None {
        return Ok(loss);
    }
    Ok(loss + lambda * penalty_value(p, batches, kind, div, min_cell)?.value)
}

/// Value, gradient over the parameters, and the penalty evaluation.
pub fn objective_and_gradient(
    p: &Predictor,
    batches: &EnvBatches,
    lambda: f64,
    kind: PenaltyKind,
    div: &Divergence,
    min_cell: usize,
) -> Result<(f64, f64, Vec<f64>, PenaltyEval)> {
    let (feats, labels) = pooled(batches);
    let loss = p.mean_loss(&feats, &labels)?;
    let pen = if lambda != 0.0 && kind != PenaltyKind::None {
        penalty_value(p, batches, kind, div, min_cell)?
    } else {
        penalty_from_representations(&BTreeMap::new(), batches, PenaltyKind::None, div, min_cell)?
    };
    let grad = if pen.grads.is_empty() {
        p.backward(&feats, &labels, None)?
    } else {
        let tap: Vec<Vec<f64>> = pen
            .grads
            .values()
            .flatten()
            .map(|g| g.iter().map(|v| lambda * v).collect())
            .collect();
        p.backward(&feats, &labels, Some(&tap))?
    };
    Ok((loss, pen.value, grad, pen))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub penalty: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Penalty cells skipped over the whole run.
    pub skipped_cells: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,penalty,lambda\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", r.epoch, r.loss, r.penalty, r.lambda);
        }
        s
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn apply_update(p: &mut Predictor, grad: &[f64], cfg: &TrainConfig, adam: &mut Option<AdamState>) {
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        Optimizer::Sgd => {
            p.params
                .iter_mut()
                .zip(grad)
                .for_each(|(w, g)| *w -= lr * g);
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let st = adam.get_or_insert_with(|| AdamState {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            for i in 0..grad.len() {
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * grad[i];
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                p.params[i] -= lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Mini-batch training with environment-balanced batches.
///
/// Each step draws `batch_size / K` rows from each of the `K` environments,
/// cycling through a fresh per-epoch shuffle of each environment. An epoch
/// has `ceil(n / (K * sub))` steps for `n` total rows.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<(Predictor, TrainHistory)> {
    config.validate()?;
    if data.is_empty() {
        return Err(invalid("training data is empty"));
    }
    let by_env = data.by_env();
    let envs: Vec<usize> = by_env.keys().copied().collect();
    let k = envs.len();
    let sub = (config.batch_size / k).max(1);
    let steps = data.len().div_ceil(sub * k);

    let mut p = Predictor::init(
        config.architecture,
        data.dim(),
        derive_seed(config.seed, &[0]),
    )?;
    if let Some(tap) = config.tap {
        p = p.with_tap(tap)?;
    }
    let mut adam = None;
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let lambda = config.lambda.at(epoch);
        let orders: Vec<Vec<usize>> = envs
            .iter()
            .map(|&e| {
                let mut idx: Vec<usize> = (0..by_env[&e].len()).collect();
                idx.shuffle(&mut derived_rng(config.seed, &[1, epoch as u64, e as u64]));
                idx
            })
            .collect();
        let (mut loss_sum, mut pen_sum) = (0.0, 0.0);
        for step in 0..steps {
            let mut batches = EnvBatches::new();
            for (j, &e) in envs.iter().enumerate() {
                let rows = &by_env[&e];
                let order = &orders[j];
                let b = batches.entry(e).or_default();
                for t in 0..sub {
                    let r = &rows.records[order[(step * sub + t) % order.len()]];
                    b.features.push(r.features.clone());
                    b.labels.push(r.y);
                }
            }
            let kind = if config.penalty_active(lambda) {
                config.penalty
            } else {
                PenaltyKind::None
            };
            let (loss, pen, grad, eval) = objective_and_gradient(
                &p,
                &batches,
                lambda,
                kind,
                &config.divergence,
                config.min_cell,
            )?;
            let obj = loss
                + if kind == PenaltyKind::None {
                    0.0
                } else {
                    lambda * pen
                };
            if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    loss,
                    penalty: pen,
                });
            }
            history.skipped_cells += eval.skipped.len();
            loss_sum += loss;
            pen_sum += pen;
            apply_update(&mut p, &grad, config, &mut adam);
        }
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / steps as f64,
            penalty: pen_sum / steps as f64,
            lambda,
        });
    }
    Ok((p, history))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub permutations: usize,
    pub seed: u64,
    /// At most this many rows per environment (and label stratum) enter the
    /// test; larger groups keep a seeded random subset.
    pub max_per_env: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            permutations: 500,
            seed: 0x1A7E_57,
            max_per_env: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvarianceTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// Scores collapsed onto their distinct values.
struct Stratum {
    /// Atom index of every row.
    atoms: Vec<usize>,
    envs: Vec<usize>,
    n_atoms: usize,
}

/// Squared MMD on scores, summed over each environment against its
/// complement. With `counts[e][a]` rows of env `e` at atom `a`, the squared
/// MMD between two weighted atom sets is `(w_a - w_b)' K (w_a - w_b)`.
fn atom_statistic(counts: &[Vec<f64>], kernel: &[f64], n_atoms: usize) -> f64 {
    let total: Vec<f64> = (0..n_atoms)
        .map(|a| counts.iter().map(|c| c[a]).sum())
        .collect();
    let n: f64 = total.iter().sum();
    let mut s = 0.0;
    for c in counts {
        let nk: f64 = c.iter().sum();
        if nk == 0.0 || nk == n {
            continue;
        }
        let w: Vec<f64> = (0..n_atoms)
            .map(|a| c[a] / nk - (total[a] - c[a]) / (n - nk))
            .collect();
        for i in 0..n_atoms {
            for j in 0..n_atoms {
                s += w[i] * w[j] * kernel[i * n_atoms + j];
            }
        }
    }
    s.max(0.0)
}

fn weighted_median(mut pairs: Vec<(f64, f64)>) -> Option<f64> {
    pairs.retain(|&(_, w)| w > 0.0);
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for (d, w) in pairs {
        acc += w;
        if acc >= total / 2.0 {
            return Some(d);
        }
    }
    None
}

/// Permutation test of equal score distributions across environments,
/// within label strata for the conditional mode. Environment labels are
/// permuted within each stratum.
pub fn verify_invariance(
    p: &Predictor,
    heldout: &Dataset,
    mode: PenaltyKind,
    opts: &VerifyOptions,
) -> Result<InvarianceTest> {
    let envs = heldout.envs();
    if envs.len() < 2 {
        return Err(invalid("invariance check needs at least two environments"));
    }
    let labels: Vec<Option<u8>> = match mode {
        PenaltyKind::Conditional => vec![Some(0), Some(1)],
        PenaltyKind::Marginal => vec![None],
        PenaltyKind::None => {
            return Err(invalid("verification mode must be marginal or conditional"))
        }
    };

    // score every kept row
    let mut rows: Vec<(Option<u8>, usize, f64)> = Vec::new();
    for &label in &labels {
        for &e in &envs {
            let mut idx: Vec<usize> = (0..heldout.len())
                .filter(|&i| {
                    let r = &heldout.records[i];
                    r.env == e && label.is_none_or(|y| r.y == y)
                })
                .collect();
            if idx.len() > opts.max_per_env {
                let coord = [7, e as u64, label.map_or(2, u64::from)];
                idx.shuffle(&mut derived_rng(opts.seed, &coord));
                idx.truncate(opts.max_per_env);
                idx.sort_unstable();
            }
            for i in idx {
                rows.push((label, e, p.logit(&heldout.records[i].features)?));
            }
        }
    }
    let mut values: Vec<f64> = rows.iter().map(|r| r.2).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let n_atoms = values.len();
    let atom_of = |v: f64| {
        values
            .binary_search_by(|x| x.total_cmp(&v))
            .expect("value present")
    };

    let mut counts_all = vec![0.0; n_atoms];
    rows.iter().for_each(|r| counts_all[atom_of(r.2)] += 1.0);
    let mut pairs: Vec<(f64, f64)> = (0..n_atoms)
        .map(|a| (0.0, counts_all[a] * (counts_all[a] - 1.0) / 2.0))
        .collect();
    for i in 0..n_atoms {
        for j in i + 1..n_atoms {
            pairs.push(((values[i] - values[j]).abs(), counts_all[i] * counts_all[j]));
        }
    }
    let sigma = match weighted_median(pairs.clone()) {
        Some(m) if m > 0.0 => m,
        _ => match weighted_median(pairs.into_iter().filter(|p| p.0 > 0.0).collect()) {
            Some(m) => m,
            None => {
                return Ok(InvarianceTest {
                    statistic: 0.0,
                    p_value: 1.0,
                })
            }
        },
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let mut kernel = vec![0.0; n_atoms * n_atoms];
    for i in 0..n_atoms {
        for j in 0..n_atoms {
            kernel[i * n_atoms + j] = (-gamma * (values[i] - values[j]).powi(2)).exp();
        }
    }

    let env_pos = |e: usize| envs.binary_search(&e).expect("env present");
    let strata: Vec<Stratum> = labels
        .iter()
        .map(|&label| {
            let sel: Vec<&(Option<u8>, usize, f64)> =
                rows.iter().filter(|r| r.0 == label).collect();
            Stratum {
                atoms: sel.iter().map(|r| atom_of(r.2)).collect(),
                envs: sel.iter().map(|r| env_pos(r.1)).collect(),
                n_atoms,
            }
        })
        .collect();
    let stat_of = |s: &Stratum, env_labels: &[usize]| {
        let mut counts = vec![vec![0.0; s.n_atoms]; envs.len()];
        for (&a, &e) in s.atoms.iter().zip(env_labels) {
            counts[e][a] += 1.0;
        }
        atom_statistic(&counts, &kernel, s.n_atoms)
    };
    let statistic: f64 = strata.iter().map(|s| stat_of(s, &s.envs)).sum();

    let mut rng = derived_rng(opts.seed, &[8]);
    let mut shuffled: Vec<Vec<usize>> = strata.iter().map(|s| s.envs.clone()).collect();
    let tol = 1e-12 * statistic.abs().max(1e-12);
    let mut exceed = 0usize;
    for _ in 0..opts.permutations {
        let mut v = 0.0;
        for (s, lab) in strata.iter().zip(shuffled.iter_mut()) {
            lab.shuffle(&mut rng);
            v += stat_of(s, lab);
        }
        if v >= statistic - tol {
            exceed += 1;
        }
    }
    Ok(InvarianceTest {
        statistic,
        p_value: (1 + exceed) as f64 / (1 + opts.permutations) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;
    use crate::divergence::{coral, mmd2, KernelSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn linear(w: &[f64], b: f64) -> Predictor {
        let mut params = w.to_vec();
        params.push(b);
        Predictor {
            arch: Architecture::Linear,
            input_dim: w.len(),
            tap: Tap::Logit,
            params,
        }
    }

    fn batch(rows: &[(f64, u8)]) -> EnvBatch {
        EnvBatch {
            features: rows.iter().map(|r| vec![r.0]).collect(),
            labels: rows.iter().map(|r| r.1).collect(),
        }
    }

    fn two_envs() -> EnvBatches {
        let mut b = EnvBatches::new();
        b.insert(
            0,
            batch(&[(0.0, 0), (1.0, 1), (2.0, 1), (0.5, 0), (1.5, 1)]),
        );
        b.insert(1, batch(&[(3.0, 1), (-1.0, 0), (0.2, 0), (2.5, 1)]));
        b
    }

    #[test]
    fn single_environment_has_no_penalty() {
        let mut b = two_envs();
        b.remove(&1);
        let p = linear(&[1.0], 0.0);
        let e = penalty_value(&p, &b, PenaltyKind::Marginal, &Divergence::Coral, 2).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.grads[&0].iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn identical_environments_have_zero_penalty() {
        let mut b = two_envs();
        let first = b[&0].clone();
        b.insert(1, first);
        let p = linear(&[0.7], -0.2);
        for div in [Divergence::Coral, Divergence::Mmd(KernelSpec::median())] {
            let e = penalty_value(&p, &b, PenaltyKind::Marginal, &div, 2).unwrap();
            assert!(e.value.abs() < 1e-12, "{}", e.value);
        }
    }

    #[test]
    fn logit_tap_penalty_is_a_direct_two_sample_distance() {
        let b = two_envs();
        let p = linear(&[0.7], -0.2);
        let s0 = SampleMatrix::from_rows(
            &b[&0]
                .features
                .iter()
                .map(|x| vec![0.7 * x[0] - 0.2])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let s1 = SampleMatrix::from_rows(
            &b[&1]
                .features
                .iter()
                .map(|x| vec![0.7 * x[0] - 0.2])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let k = KernelSpec::gaussian(1.0);
        let e = penalty_value(&p, &b, PenaltyKind::Marginal, &Divergence::Mmd(k), 1).unwrap();
        assert!((e.value - 2.0 * mmd2(&s0, &s1, &k).unwrap()).abs() < 1e-12);
        let c = penalty_value(&p, &b, PenaltyKind::Marginal, &Divergence::Coral, 2).unwrap();
        assert!((c.value - 2.0 * coral(&s0, &s1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn conditional_penalty_sums_label_strata() {
        let b = two_envs();
        let p = linear(&[1.0], 0.0);
        let k = KernelSpec::gaussian(0.8);
        let strat = |y: u8, e: usize| {
            SampleMatrix::from_rows(
                &b[&e]
                    .features
                    .iter()
                    .zip(&b[&e].labels)
                    .filter(|(_, &l)| l == y)
                    .map(|(x, _)| x.clone())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let want: f64 = [0u8, 1]
            .iter()
            .map(|&y| 2.0 * mmd2(&strat(y, 0), &strat(y, 1), &k).unwrap())
            .sum();
        let e = penalty_value(&p, &b, PenaltyKind::Conditional, &Divergence::Mmd(k), 1).unwrap();
        assert!((e.value - want).abs() < 1e-12);
        // env 1 has two rows per label, so a floor of 3 skips every cell
        let s = penalty_value(&p, &b, PenaltyKind::Conditional, &Divergence::Mmd(k), 3).unwrap();
        assert_eq!(s.value, 0.0);
        assert_eq!(s.skipped.len(), 4);
    }

    #[test]
    fn objective_recomposes() {
        let b = two_envs();
        let p = linear(&[0.3], 0.1);
        let div = Divergence::Mmd(KernelSpec::gaussian(1.0));
        let (feats, labels) = pooled(&b);
        let loss = p.mean_loss(&feats, &labels).unwrap();
        assert_eq!(
            objective(&p, &b, 0.0, PenaltyKind::Marginal, &div, 1).unwrap(),
            loss
        );
        let pen = penalty_value(&p, &b, PenaltyKind::Marginal, &div, 1)
            .unwrap()
            .value;
        let v = objective(&p, &b, 2.5, PenaltyKind::Marginal, &div, 1).unwrap();
        assert!((v - (loss + 2.5 * pen)).abs() < 1e-15);
    }

    fn random_batches(rng: &mut impl Rng, envs: usize, d: usize) -> EnvBatches {
        (0..envs)
            .map(|e| {
                let n = rng.random_range(5..9);
                let b = EnvBatch {
                    features: (0..n)
                        .map(|_| {
                            (0..d)
                                .map(|_| rng.random_range(-2.0..2.0) + e as f64 * 0.3)
                                .collect()
                        })
                        .collect(),
                    labels: (0..n).map(|i| (i % 2) as u8).collect(),
                };
                (e, b)
            })
            .collect()
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let mut rng = derived_rng(5, &[]);
        let configs = [
            (
                Architecture::Linear,
                PenaltyKind::Marginal,
                Divergence::Mmd(KernelSpec::gaussian(0.9)),
            ),
            (
                Architecture::Linear,
                PenaltyKind::Conditional,
                Divergence::Coral,
            ),
            (
                Architecture::Mlp {
                    hidden_layers: 2,
                    hidden_dim: 3,
                },
                PenaltyKind::Conditional,
                Divergence::Mmd(KernelSpec::gaussian(1.3)),
            ),
            (
                Architecture::Mlp {
                    hidden_layers: 1,
                    hidden_dim: 4,
                },
                PenaltyKind::Marginal,
                Divergence::Coral,
            ),
            (
                Architecture::Mlp {
                    hidden_layers: 2,
                    hidden_dim: 2,
                },
                PenaltyKind::Marginal,
                Divergence::Mmd(KernelSpec::gaussian(0.7)),
            ),
        ];
        for (c, (arch, kind, div)) in configs.into_iter().enumerate() {
            let b = random_batches(&mut rng, 3, 2);
            let mut p = Predictor::init(arch, 2, c as u64).unwrap();
            // nonzero biases keep pre-activations away from the rectifier kink
            p.params
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.3..0.3));
            let lambda = 1.7;
            let (_, _, g, _) = objective_and_gradient(&p, &b, lambda, kind, &div, 2).unwrap();
            let f = |q: &Predictor| objective(q, &b, lambda, kind, &div, 2).unwrap();
            let h = 1e-6;
            for k in 0..p.params.len() {
                let mut a = p.clone();
                let mut m = p.clone();
                a.params[k] += h;
                m.params[k] -= h;
                let num = (f(&a) - f(&m)) / (2.0 * h);
                let err = (num - g[k]).abs() / num.abs().max(g[k].abs()).max(1e-4);
                assert!(err < 1e-4, "config {c} param {k}: {} vs {num}", g[k]);
            }
        }
    }

    fn toy_data(seed: u64, shift: f64) -> Dataset {
        let mut rng = derived_rng(seed, &[]);
        let records = (0..400)
            .map(|i| {
                let env = i % 2;
                let y = rng.random_range(0..2u8);
                let s = if y == 1 { 1.0 } else { -1.0 };
                Record {
                    features: vec![
                        s + rng.random_range(-1.5..1.5),
                        s * (1.0 + shift * env as f64) + rng.random_range(-1.0..1.0),
                    ],
                    y,
                    env,
                }
            })
            .collect();
        Dataset::with_records(vec!["a".into(), "b".into()], records).unwrap()
    }

    #[test]
    fn zero_lambda_matches_plain_erm() {
        let data = toy_data(1, 1.0);
        let erm = TrainConfig {
            epochs: 3,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let zero = TrainConfig {
            penalty: PenaltyKind::Conditional,
            lambda: LambdaSchedule::Constant(0.0),
            ..erm.clone()
        };
        let (a, ha) = train(&erm, &data).unwrap();
        let (b, hb) = train(&zero, &data).unwrap();
        assert!(a
            .params
            .iter()
            .zip(&b.params)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(ha, hb);
        assert!(hb.epochs.iter().all(|r| r.penalty == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(2, 1.0);
        let cfg = TrainConfig {
            penalty: PenaltyKind::Marginal,
            lambda: LambdaSchedule::TwoPhase {
                first: 5.0,
                epochs: 1,
                then: 1.0,
            },
            epochs: 2,
            batch_size: 40,
            optimizer: Optimizer::adam(),
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&cfg, &data).unwrap();
        let (b, hb) = train(&cfg, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.to_csv(), hb.to_csv());
        assert_eq!(ha.epochs.len(), 2);
        assert_eq!(ha.epochs[0].lambda, 5.0);
        assert_eq!(ha.epochs[1].lambda, 1.0);
    }

    #[test]
    fn penalty_shrinks_the_shifting_coordinate() {
        let data = toy_data(3, 2.0);
        let base = TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let (erm, _) = train(&base, &data).unwrap();
        let cfg = TrainConfig {
            penalty: PenaltyKind::Conditional,
            lambda: LambdaSchedule::Constant(20.0),
            divergence: Divergence::Mmd(KernelSpec::median()),
            ..base
        };
        let (inv, _) = train(&cfg, &data).unwrap();
        let ratio = |p: &Predictor| p.params[1].abs() / p.params[0].abs();
        assert!(
            ratio(&inv) < ratio(&erm),
            "{} vs {}",
            ratio(&inv),
            ratio(&erm)
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let data = toy_data(4, 0.0);
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&bad, &data).is_err());
        let bad = TrainConfig {
            penalty: PenaltyKind::Marginal,
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(train(&bad, &data).is_err());
        assert!(train(&TrainConfig::default(), &Dataset::new(vec!["a".into()])).is_err());
    }

    #[test]
    fn exploding_training_reports_the_step() {
        let mut data = toy_data(4, 0.0);
        data.records[17].features[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 400,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&cfg, &data), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn constant_predictor_is_never_rejected() {
        let data = toy_data(5, 2.0);
        let p = linear(&[0.0, 0.0], 0.3);
        let t =
            verify_invariance(&p, &data, PenaltyKind::Marginal, &VerifyOptions::default()).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.p_value, 1.0);
        let one_env = Dataset::with_records(
            data.columns.clone(),
            data.records
                .iter()
                .filter(|r| r.env == 0)
                .cloned()
                .collect(),
        )
        .unwrap();
        assert!(verify_invariance(
            &p,
            &one_env,
            PenaltyKind::Marginal,
            &VerifyOptions::default()
        )
        .is_err());
    }

    #[test]
    fn shifted_feature_is_rejected() {
        let data = toy_data(6, 2.0);
        let p = linear(&[0.0, 1.0], 0.0);
        let t = verify_invariance(
            &p,
            &data,
            PenaltyKind::Conditional,
            &VerifyOptions::default(),
        )
        .unwrap();
        assert!(t.p_value < 0.01, "{}", t.p_value);
        let q = linear(&[1.0, 0.0], 0.0);
        let t = verify_invariance(
            &q,
            &data,
            PenaltyKind::Conditional,
            &VerifyOptions::default(),
        )
        .unwrap();
        assert!(t.p_value > 0.01, "{}", t.p_value);
    }

    #[test]
    fn null_p_values_are_calibrated() {
        let opts = VerifyOptions {
            permutations: 199,
            ..VerifyOptions::default()
        };
        let p = linear(&[1.0], 0.0);
        let mut ps: Vec<f64> = (0..200)
            .map(|s| {
                let mut rng = derived_rng(77, &[s]);
                let records = (0..40)
                    .map(|i| Record {
                        features: vec![rng.random_range(-1.0..1.0)],
                        y: 0,
                        env: i % 2,
                    })
                    .collect();
                let d = Dataset::with_records(vec!["a".into()], records).unwrap();
                verify_invariance(&p, &d, PenaltyKind::Marginal, &opts)
                    .unwrap()
                    .p_value
            })
            .collect();
        ps.sort_by(f64::total_cmp);
        let n = ps.len() as f64;
        let ks = ps
            .iter()
            .enumerate()
            .map(|(i, &v)| ((i + 1) as f64 / n - v).abs().max((v - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.1, "{ks}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn penalties_are_nonnegative(seed in 0u64..10_000, coral_div in any::<bool>(), conditional in any::<bool>()) {
            let mut rng = derived_rng(seed, &[]);
            let b = random_batches(&mut rng, 3, 2);
            let p = Predictor::init(Architecture::Mlp { hidden_layers: 1, hidden_dim: 3 }, 2, seed).unwrap();
            let div = if coral_div { Divergence::Coral } else { Divergence::Mmd(KernelSpec::median()) };
            let kind = if conditional { PenaltyKind::Conditional } else { PenaltyKind::Marginal };
            let e = penalty_value(&p, &b, kind, &div, 2).unwrap();
            prop_assert!(e.value >= 0.0);
        }
    }
}
