//! Correlation sweep over a colorized synthetic item.
//!
//! A binary base attribute `x_g` predicts the choice `y` with fixed accuracy;
//! the item color `c` agrees with `y` at a per-environment rate. The item is
//! a short gray vector (one pixel carrying `x_g`, the rest noise) that is
//! colorized by `c`, so the predictor sees both signals only through pixel
//! intensities.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, ExperimentReport};
use crate::data::{Dataset, Record};
use crate::divergence::{Divergence, KernelSpec};
use crate::error::{invalid, Result};
use crate::model::{Architecture, Tap};
use crate::rng::{derive_seed, derived_rng};
use crate::scm::{
    sample_environments, sample_stratified, ClassTag, DiscreteScm, FactorTable, GraphTag, Variable,
};
use crate::trainer::{train, LambdaSchedule, Optimizer, PenaltyKind, TrainConfig};

/// Colorize gray values in `[0, 1]`, returning interleaved `(R, G, B)`.
///
/// `c = 1`: `R = 0.5 + 0.2 g`, `G = B = 0.7 g`.
/// `c = 0`: `G = 0.5 + 0.2 g`, `R = B = 0.7 g`.
pub fn colorize(gray: &[f64], c: u8) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(3 * gray.len());
    for &g in gray {
        if !(0.0..=1.0).contains(&g) {
            return Err(invalid(format!("gray value {g} outside [0, 1]")));
        }
        let (hi, lo) = (0.5 + 0.2 * g, 0.7 * g);
        match c {
            1 => out.extend([hi, lo, lo]),
            0 => out.extend([lo, hi, lo]),
            _ => return Err(invalid(format!("color must be 0 or 1, got {c}"))),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepParams {
    /// Mean train-time agreement `P(c = y)`.
    pub means: Vec<f64>,
    /// Per-environment offsets around each mean; one train environment each.
    pub offsets: Vec<f64>,
    pub test_correlation: f64,
    pub base_accuracy: f64,
    /// Gray pixels per item; each becomes three color features.
    pub pixels: usize,
    pub n_per_env: usize,
    pub n_test: usize,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams {
            means: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            offsets: vec![-0.025, 0.025, -0.05, 0.05, -0.1, 0.1],
            test_correlation: 0.8,
            base_accuracy: 0.75,
            pixels: 4,
            n_per_env: 2000,
            n_test: 20_000,
        }
    }
}

/// Agreement rates are kept inside `[0.01, 0.99]`.
const CORRELATION_FLOOR: f64 = 0.01;

impl SweepParams {
    pub fn validate(&self) -> Result<()> {
        let open = |p: f64| p > 0.0 && p < 1.0;
        if self.means.is_empty() || self.offsets.is_empty() {
            return Err(invalid("sweep needs at least one mean and one offset"));
        }
        if !self
            .means
            .iter()
            .chain([&self.test_correlation, &self.base_accuracy])
            .all(|&p| open(p))
        {
            return Err(invalid("correlations must lie in (0, 1)"));
        }
        if self.pixels == 0 || self.n_per_env == 0 || self.n_test == 0 {
            return Err(invalid("pixels and sample sizes must be at least 1"));
        }
        Ok(())
    }

    /// Train-environment agreement rates for one mean.
    pub fn env_correlations(&self, mean: f64) -> Vec<f64> {
        self.offsets
            .iter()
            .map(|o| (mean + o).clamp(CORRELATION_FLOOR, 1.0 - CORRELATION_FLOOR))
            .collect()
    }

    pub fn columns(&self) -> Vec<String> {
        (0..self.pixels)
            .flat_map(|i| ["r", "g", "b"].map(|ch| format!("p{i}_{ch}")))
            .collect()
    }
}

/// Exact model over `(x_g, y, c)`; environments `0..K` are the train
/// environments and `K` is the test environment.
pub fn sweep_scm(params: &SweepParams, mean: f64) -> Result<DiscreteScm> {
    params.validate()?;
    let mut rates = params.env_correlations(mean);
    rates.push(params.test_correlation);
    let agree = |p: f64| vec![vec![p, 1.0 - p], vec![1.0 - p, p]];
    let scm = DiscreteScm {
        name: format!("sweep_{mean}"),
        environment: "e".into(),
        graph_tag: GraphTag::None,
        class_tag: ClassTag::Causal,
        variables: vec![
            Variable::new("e", rates.len()),
            Variable::binary("x_g"),
            Variable::binary("y"),
            Variable::binary("c"),
        ],
        factors: vec![
            FactorTable::prior("x_g", vec![0.5, 0.5]),
            FactorTable::new("y", &["x_g"], agree(params.base_accuracy)),
            FactorTable::new(
                "c",
                &["e", "y"],
                rates.iter().flat_map(|&p| agree(p)).collect(),
            ),
        ],
        selection: None,
    };
    scm.ensure_valid()?;
    Ok(scm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepData {
    pub mean: f64,
    pub scm: DiscreteScm,
    pub train: Dataset,
    pub test: Dataset,
}

/// Turn `(x_g, c)` rows into colorized pixel vectors.
fn render(params: &SweepParams, latent: &Dataset, seed: u64) -> Result<Dataset> {
    let xg = latent.column_index("x_g")?;
    let c = latent.column_index("c")?;
    let mut rng = derived_rng(seed, &[]);
    let mut out = Dataset::new(params.columns());
    out.records.reserve(latent.len());
    for r in &latent.records {
        let mut gray = Vec::with_capacity(params.pixels);
        gray.push(0.2 + 0.6 * r.features[xg]);
        gray.extend((1..params.pixels).map(|_| rng.random::<f64>()));
        out.records.push(Record {
            features: colorize(&gray, r.features[c] as u8)?,
            y: r.y,
            env: r.env,
        });
    }
    Ok(out)
}

pub fn gen_correlation_sweep(params: &SweepParams, seed: u64) -> Result<Vec<SweepData>> {
    params
        .means
        .iter()
        .enumerate()
        .map(|(i, &mean)| {
            let i = i as u64;
            let scm = sweep_scm(params, mean)?;
            let k = params.offsets.len();
            let envs: Vec<usize> = (0..k).collect();
            let latent =
                sample_environments(&scm, &envs, params.n_per_env, derive_seed(seed, &[i, 0]))?;
            let test_latent =
                sample_stratified(&scm, k, params.n_test, derive_seed(seed, &[i, 1]))?;
            Ok(SweepData {
                mean,
                train: render(params, &latent, derive_seed(seed, &[i, 2]))?,
                test: render(params, &test_latent, derive_seed(seed, &[i, 3]))?,
                scm,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub conditional: TrainConfig,
    pub marginal: TrainConfig,
    pub none: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let base = TrainConfig {
            divergence: Divergence::Mmd(KernelSpec::gaussian(1.0)),
            learning_rate: 0.003,
            epochs: 25,
            batch_size: 1536,
            optimizer: Optimizer::adam(),
            architecture: Architecture::mlp(),
            tap: Some(Tap::Logit),
            ..TrainConfig::default()
        };
        let lambda = LambdaSchedule::Constant(3.0);
        SweepConfig {
            conditional: TrainConfig {
                penalty: PenaltyKind::Conditional,
                lambda,
                ..base.clone()
            },
            marginal: TrainConfig {
                penalty: PenaltyKind::Marginal,
                lambda,
                ..base.clone()
            },
            none: base,
        }
    }
}

impl SweepConfig {
    fn named(&self) -> [(&'static str, &TrainConfig); 3] {
        [
            ("conditional", &self.conditional),
            ("marginal", &self.marginal),
            ("none", &self.none),
        ]
    }
}

/// Train each configuration at each mean correlation and evaluate on the
/// test environment.
pub fn run_sweep(params: &SweepParams, cfg: &SweepConfig, seed: u64) -> Result<ExperimentReport> {
    let data = gen_correlation_sweep(params, derive_seed(seed, &[50]))?;
    let cells: Vec<(usize, usize)> = (0..data.len())
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(i, j)| {
            let (name, base) = cfg.named()[j];
            let mut c = base.clone();
            c.seed = derive_seed(seed, &[51, i as u64, j as u64]);
            let (model, history) = train(&c, &data[i].train)?;
            let acc = evaluate(&model, &data[i].test)?.accuracy;
            let train_acc = evaluate(&model, &data[i].train)?.accuracy;
            Ok((
                format!("mean={}/{name}", data[i].mean),
                acc,
                train_acc,
                history.skipped_cells,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = ExperimentReport::new(
        "sweep",
        seed,
        serde_json::json!({ "params": params, "config": cfg }),
    );
    let test = format!("test/corr={}", params.test_correlation);
    for (cond, acc, train_acc, skipped) in results {
        report.push(&cond, &test, "accuracy", acc);
        report.push(&cond, "train", "accuracy", train_acc);
        report.skipped_cells += skipped;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::bayes_optimal;

    #[test]
    fn colorize_formulas() {
        let v = colorize(&[0.5], 1).unwrap();
        for (a, b) in v.iter().zip([0.6, 0.35, 0.35]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(colorize(&[0.0], 0).unwrap(), vec![0.0, 0.5, 0.0]);
        assert!(colorize(&[1.2], 0).is_err());
        assert!(colorize(&[0.2], 2).is_err());
    }

    #[test]
    fn colorize_is_invertible_on_a_grid() {
        for k in 1..100 {
            let g = k as f64 / 100.0;
            for c in 0..2u8 {
                let v = colorize(&[g], c).unwrap();
                assert!(v.iter().all(|x| (0.0..=0.7).contains(x)));
                let dominant = u8::from(v[0] > v[1]);
                assert_eq!(dominant, c);
                let back = if c == 1 { v[1] / 0.7 } else { v[0] / 0.7 };
                assert!((back - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn environment_offsets() {
        let p = SweepParams::default();
        let got = p.env_correlations(0.5);
        for (a, b) in got.iter().zip([0.475, 0.525, 0.45, 0.55, 0.4, 0.6]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(p.env_correlations(0.1).iter().all(|&r| r > 0.0 && r < 1.0));
    }

    #[test]
    fn base_signal_oracle() {
        let p = SweepParams::default();
        let scm = sweep_scm(&p, 0.3).unwrap();
        let j = scm.pooled_joint(&[0, 1, 2, 3, 4, 5]).unwrap();
        let b = bayes_optimal(&j, &["x_g"]).unwrap();
        assert!((b.accuracy - 0.75).abs() < 1e-12);
    }

    #[test]
    fn color_rate_concentrates() {
        let p = SweepParams {
            means: vec![0.3],
            n_per_env: 50_000,
            n_test: 10,
            ..SweepParams::default()
        };
        let d = &gen_correlation_sweep(&p, 9).unwrap()[0];
        let rates = p.env_correlations(0.3);
        for (e, part) in d.train.by_env() {
            let agree = part
                .records
                .iter()
                .filter(|r| u8::from(r.features[0] > r.features[1]) == r.y)
                .count() as f64
                / part.len() as f64;
            assert!(
                (agree - rates[e]).abs() < 0.01,
                "env {e}: {agree} vs {}",
                rates[e]
            );
        }
        assert_eq!(d.train.dim(), 12);
    }
}
