//! Synthetic experiment generators and orchestrations.
//!
//! * [`subclass`]: the three-feature believer/skeptic data, the subclass
//!   table, the mixed-subpopulation study and the construction check.
//! * [`sweep`]: the colorized correlation sweep.
//!
//! Every experiment cell draws its randomness from a seed derived from the
//! master seed and the cell's coordinates, so cells can run in any order or
//! in parallel and still give identical reports.

pub mod subclass;
pub mod sweep;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::model::Predictor;
use crate::rng::rng_from_seed;

pub use subclass::{
    gen_subclass_experiment, run_appendix_a, run_mixture, run_table1, subclass_scm, Group,
    MixtureConfig, SubclassData, SubclassParams, Table1Config,
};
pub use sweep::{
    colorize, gen_correlation_sweep, run_sweep, sweep_scm, SweepConfig, SweepData, SweepParams,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub n: usize,
    pub per_env: BTreeMap<usize, f64>,
}

/// Fraction of rows whose predicted label matches, overall and per
/// environment.
pub fn evaluate(p: &Predictor, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in &data.records {
        let ok = usize::from(p.predict_label(&r.features)? == r.y);
        let h = hits.entry(r.env).or_default();
        h.0 += ok;
        h.1 += 1;
    }
    let correct: usize = hits.values().map(|h| h.0).sum();
    Ok(Metrics {
        accuracy: correct as f64 / data.len() as f64,
        n: data.len(),
        per_env: hits
            .into_iter()
            .map(|(e, (c, n))| (e, c as f64 / n as f64))
            .collect(),
    })
}

/// Move a uniformly chosen `floor(alpha * n)` subset of each dataset into
/// the other. Kept rows stay in their original order, followed by the
/// incoming rows.
pub fn mix_subpopulations(
    a: &Dataset,
    b: &Dataset,
    alpha: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..=0.5).contains(&alpha) {
        return Err(invalid(format!(
            "mixing fraction must lie in [0, 0.5], got {alpha}"
        )));
    }
    if a.columns != b.columns {
        return Err(invalid("datasets to mix have different columns"));
    }
    let mut rng = rng_from_seed(seed);
    let mut split = |d: &Dataset| {
        let k = (alpha * d.len() as f64).floor() as usize;
        let mut moved = vec![false; d.len()];
        for i in sample_indices(&mut rng, d.len(), k) {
            moved[i] = true;
        }
        let (mut stay, mut go) = (Vec::new(), Vec::new());
        for (r, m) in d.records.iter().zip(moved) {
            if m {
                go.push(r.clone());
            } else {
                stay.push(r.clone());
            }
        }
        (stay, go)
    };
    let (mut stay_a, go_a) = split(a);
    let (mut stay_b, go_b) = split(b);
    stay_a.extend(go_b);
    stay_b.extend(go_a);
    Ok((
        Dataset::with_records(a.columns.clone(), stay_a)?,
        Dataset::with_records(b.columns.clone(), stay_b)?,
    ))
}

/// One metric for one (train condition, test condition) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub train_condition: String,
    pub test_condition: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub rows: Vec<MetricRow>,
    /// Penalty cells skipped for being below the minimum size, over all
    /// training runs of the report.
    pub skipped_cells: usize,
}

impl ExperimentReport {
    pub fn new(experiment: &str, seed: u64, config: serde_json::Value) -> Self {
        ExperimentReport {
            experiment: experiment.to_string(),
            seed,
            config,
            rows: Vec::new(),
            skipped_cells: 0,
        }
    }

    pub fn push(
        &mut self,
        train: impl Into<String>,
        test: impl Into<String>,
        metric: &str,
        value: f64,
    ) {
        self.rows.push(MetricRow {
            train_condition: train.into(),
            test_condition: test.into(),
            metric: metric.to_string(),
            value,
        });
    }

    /// The value of a metric cell, if present.
    pub fn get(&self, train: &str, test: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.train_condition == train && r.test_condition == test && r.metric == metric)
            .map(|r| r.value)
    }

    /// Long-format rows: `experiment,seed,train_condition,test_condition,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("experiment,seed,train_condition,test_condition,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:?}",
                self.experiment, self.seed, r.train_condition, r.test_condition, r.metric, r.value
            );
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.experiment, self.seed)
    }

    /// Write `<experiment>_<seed>.csv` and `<experiment>_<seed>.json` into
    /// `dir`, returning both paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.file_stem()));
        let json = dir.join(format!("{}.json", self.file_stem()));
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(&json, self.summary_json() + "\n")?;
        Ok((csv, json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;
    use crate::model::{Architecture, Tap};

    fn ds(rows: &[(f64, u8, usize)]) -> Dataset {
        Dataset::with_records(
            vec!["a".into()],
            rows.iter()
                .map(|&(x, y, env)| Record {
                    features: vec![x],
                    y,
                    env,
                })
                .collect(),
        )
        .unwrap()
    }

    fn identity() -> Predictor {
        Predictor {
            arch: Architecture::Linear,
            input_dim: 1,
            tap: Tap::Logit,
            params: vec![1.0, -0.5],
        }
    }

    #[test]
    fn evaluate_counts_matches() {
        let d = ds(&[(1.0, 1, 0), (0.0, 0, 0), (1.0, 0, 1), (0.0, 0, 1)]);
        let m = evaluate(&identity(), &d).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.per_env[&0], 1.0);
        assert_eq!(m.per_env[&1], 0.5);
        let constant = Predictor {
            params: vec![0.0, 1.0],
            ..identity()
        };
        let balanced = ds(&[(1.0, 1, 0), (0.0, 0, 0)]);
        assert_eq!(evaluate(&constant, &balanced).unwrap().accuracy, 0.5);
        assert!(evaluate(&identity(), &Dataset::new(vec!["a".into()])).is_err());
    }

    #[test]
    fn mixing_moves_the_requested_fraction() {
        let a = ds(&(0..1000).map(|i| (i as f64, 0, 0)).collect::<Vec<_>>());
        let b = ds(&(0..1000).map(|i| (i as f64, 1, 1)).collect::<Vec<_>>());
        let (ma, mb) = mix_subpopulations(&a, &b, 0.25, 3).unwrap();
        assert_eq!(ma.len(), 1000);
        assert_eq!(ma.records.iter().filter(|r| r.env == 0).count(), 750);
        assert_eq!(mb.records.iter().filter(|r| r.env == 1).count(), 750);
        assert_eq!(
            (ma.clone(), mb.clone()),
            mix_subpopulations(&a, &b, 0.25, 3).unwrap()
        );
        let (ia, ib) = mix_subpopulations(&a, &b, 0.0, 3).unwrap();
        assert_eq!((ia, ib), (a.clone(), b.clone()));
        assert!(mix_subpopulations(&a, &b, 0.6, 3).is_err());
    }

    #[test]
    fn report_csv_is_long_format() {
        let mut r = ExperimentReport::new("demo", 7, serde_json::json!({"k": 1}));
        r.push("lambda=0", "ood", "accuracy", 0.5);
        assert_eq!(
            r.to_csv(),
            "experiment,seed,train_condition,test_condition,metric,value\ndemo,7,lambda=0,ood,accuracy,0.5\n"
        );
        assert_eq!(r.get("lambda=0", "ood", "accuracy"), Some(0.5));
        assert_eq!(r.file_stem(), "demo_7");
    }
}
