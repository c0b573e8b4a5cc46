//! `invrec`: generate data from discrete causal models, train penalized
//! predictors, verify their invariance and reproduce the synthetic
//! experiments.
//!
//! Exit codes: 0 success, 1 domain failure (invalid model, failed check,
//! shape mismatch), 2 usage or I/O failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use invrec_core::experiments::{
    evaluate, run_appendix_a, run_mixture, run_sweep, run_table1, ExperimentReport, MixtureConfig,
    SubclassParams, SweepConfig, SweepParams, Table1Config,
};
use invrec_core::gradcheck::{self, GradcheckOptions};
use invrec_core::scm::{sample_environments, sample_stratified, validate};
use invrec_core::trainer::{train, verify_invariance, VerifyOptions};
use invrec_core::{
    Dataset, DiscreteScm, Divergence, Error, KernelSpec, LambdaSchedule, PenaltyKind, Predictor,
    TrainConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "invrec",
    version,
    about = "Counterfactually-invariant relevance prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// TOML configuration: `[train]`, `[subclass]`, `[table1]`, `[mixture]`,
    /// `[sweep]` and `[sweep_train]` sections, all optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, env = "INVREC_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for experiment cells (default: all processors).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Constant penalty weight, replacing any schedule.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true, value_enum)]
    penalty: Option<PenaltyArg>,
    #[arg(long, global = true, value_enum)]
    divergence: Option<DivergenceArg>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a model file; lists each violation.
    Validate { model: PathBuf },
    /// Sample a dataset from a model file.
    Gen {
        model: PathBuf,
        /// Environments to sample, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        envs: Vec<usize>,
        /// Rows per environment.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Exact label counts per environment, rows shuffled.
        #[arg(long)]
        stratified: bool,
    },
    /// Train a predictor; writes `model.ckpt` and `history.csv`.
    Train { data: PathBuf },
    /// Accuracy of a checkpoint on a dataset.
    Eval { model: PathBuf, data: PathBuf },
    /// Permutation test of score invariance across environments.
    Verify {
        model: PathBuf,
        data: PathBuf,
        #[arg(long, value_enum, default_value = "conditional")]
        mode: PenaltyArg,
        #[arg(long, default_value_t = 500)]
        permutations: usize,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        cases: usize,
        /// Added to every analytic derivative (test fixture).
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb: f64,
    },
    /// Run one of the synthetic experiments.
    Reproduce {
        #[arg(value_enum)]
        which: Experiment,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PenaltyArg {
    None,
    Marginal,
    Conditional,
}

impl From<PenaltyArg> for PenaltyKind {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::None => PenaltyKind::None,
            PenaltyArg::Marginal => PenaltyKind::Marginal,
            PenaltyArg::Conditional => PenaltyKind::Conditional,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum DivergenceArg {
    Mmd,
    Coral,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Experiment {
    Table1,
    Sweep,
    Mixture,
    #[value(name = "appendixA", alias = "appendix-a")]
    AppendixA,
}

/// Configuration file contents; every section falls back to the defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    train: TrainConfig,
    subclass: SubclassParams,
    table1: Table1Config,
    mixture: MixtureConfig,
    sweep: SweepParams,
    sweep_train: SweepConfig,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn domain(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Csv(_) | Error::Parse(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn with_path<T>(path: &Path, r: invrec_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

impl Global {
    fn file_config(&self) -> Result<FileConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };
        // flags win over the file
        let lambda = self.lambda.map(LambdaSchedule::Constant);
        let penalty = self.penalty.map(PenaltyKind::from);
        let divergence = self.divergence.map(|d| match d {
            DivergenceArg::Mmd => Divergence::Mmd(KernelSpec::median()),
            DivergenceArg::Coral => Divergence::Coral,
        });
        let apply = |t: &mut TrainConfig| {
            if let Some(l) = lambda {
                t.lambda = l;
            }
            if let Some(p) = penalty {
                t.penalty = p;
            }
            if let Some(d) = divergence {
                t.divergence = d;
            }
        };
        apply(&mut cfg.train);
        for table in [&mut cfg.table1, &mut cfg.mixture.table] {
            if let Some(l) = lambda {
                table.lambda = l;
            }
            if let Some(p) = penalty {
                table.penalty = p;
            }
            if let Some(d) = divergence {
                table.train.divergence = d;
            }
        }
        for t in [
            &mut cfg.sweep_train.conditional,
            &mut cfg.sweep_train.marginal,
        ] {
            if let Some(l) = lambda {
                t.lambda = l;
            }
            if let Some(d) = divergence {
                t.divergence = d;
            }
        }
        cfg.train.seed = self.seed;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn cmd_validate(model: &Path) -> CmdResult {
    let text = std::fs::read_to_string(model)
        .map_err(|e| Failure::usage(format!("{}: {e}", model.display())))?;
    let scm = with_path(model, DiscreteScm::from_toml_str(&text))?;
    let violations = validate(&scm);
    if violations.is_empty() {
        println!("{}: ok", model.display());
        return Ok(());
    }
    for v in &violations {
        println!("{v}");
    }
    Err(Failure::domain(format!(
        "{}: {} violation(s)",
        model.display(),
        violations.len()
    )))
}

fn load_model_file(path: &Path) -> Result<DiscreteScm, Failure> {
    let scm = with_path(path, DiscreteScm::load(path))?;
    with_path(path, scm.ensure_valid())?;
    Ok(scm)
}

fn cmd_gen(g: &Global, model: &Path, envs: &[usize], n: usize, stratified: bool) -> CmdResult {
    let scm = load_model_file(model)?;
    let data = if stratified {
        let parts = envs
            .iter()
            .map(|&e| {
                sample_stratified(
                    &scm,
                    e,
                    n,
                    invrec_core::rng::derive_seed(g.seed, &[e as u64]),
                )
            })
            .collect::<invrec_core::Result<Vec<_>>>()?;
        Dataset::concat(&parts.iter().collect::<Vec<_>>())?
    } else {
        sample_environments(&scm, envs, n, g.seed)?
    };
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("data.csv"));
    with_path(&out, data.save(&out))?;
    println!("wrote {} rows to {}", data.len(), out.display());
    Ok(())
}

fn cmd_train(g: &Global, data: &Path) -> CmdResult {
    let cfg = g.file_config()?;
    let ds = with_path(data, Dataset::load(data))?;
    let (model, history) = train(&cfg.train, &ds)?;
    let dir = g.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    let ckpt = dir.join("model.ckpt");
    with_path(&ckpt, model.save(&ckpt))?;
    let hist = dir.join("history.csv");
    std::fs::write(&hist, history.to_csv())
        .map_err(|e| Failure::usage(format!("{}: {e}", hist.display())))?;
    if let Some(last) = history.epochs.last() {
        println!(
            "epoch {} loss {:.6} penalty {:.6}",
            last.epoch, last.loss, last.penalty
        );
    }
    if history.skipped_cells > 0 {
        println!("skipped penalty cells: {}", history.skipped_cells);
    }
    println!("wrote {} and {}", ckpt.display(), hist.display());
    Ok(())
}

fn load_pair(model: &Path, data: &Path) -> Result<(Predictor, Dataset), Failure> {
    let p = with_path(model, Predictor::load(model))?;
    let ds = with_path(data, Dataset::load(data))?;
    if ds.dim() != p.input_dim {
        return Err(Failure::domain(format!(
            "feature width mismatch: model expects {} features, data has {}",
            p.input_dim,
            ds.dim()
        )));
    }
    Ok((p, ds))
}

fn cmd_eval(model: &Path, data: &Path) -> CmdResult {
    let (p, ds) = load_pair(model, data)?;
    let m = evaluate(&p, &ds)?;
    println!("accuracy {:.6} (n = {})", m.accuracy, m.n);
    for (e, a) in &m.per_env {
        println!("  env {e}: {a:.6}");
    }
    Ok(())
}

fn cmd_verify(
    g: &Global,
    model: &Path,
    data: &Path,
    mode: PenaltyArg,
    permutations: usize,
) -> CmdResult {
    let (p, ds) = load_pair(model, data)?;
    let opts = VerifyOptions {
        permutations,
        seed: g.seed,
        ..VerifyOptions::default()
    };
    let t = verify_invariance(&p, &ds, mode.into(), &opts)?;
    println!("statistic {:.6e} p_value {:.6}", t.statistic, t.p_value);
    Ok(())
}

fn cmd_gradcheck(g: &Global, cases: usize, perturb: f64) -> CmdResult {
    let results = gradcheck::run(g.seed, &GradcheckOptions { cases, perturb })?;
    for s in gradcheck::SUITES {
        let worst = results
            .iter()
            .filter(|r| r.suite == s)
            .map(|r| r.rel_error)
            .fold(0.0, f64::max);
        println!("{s:<10} worst relative error {worst:.3e}");
    }
    let w =
        gradcheck::worst(&results).ok_or_else(|| Failure::usage("no gradient cases to check"))?;
    println!(
        "worst: {} case {} coordinate {} analytic {:e} numeric {:e} relative error {:.3e}",
        w.suite, w.case, w.coordinate, w.analytic, w.numeric, w.rel_error
    );
    if w.passed() {
        Ok(())
    } else {
        Err(Failure::domain(format!(
            "gradient check failed: relative error {:.3e} >= {:e}",
            w.rel_error,
            gradcheck::TOLERANCE
        )))
    }
}

/// Condensed view of a report for the terminal.
fn headline(r: &ExperimentReport) -> String {
    let mut s = String::new();
    for row in &r.rows {
        let keep = match r.experiment.as_str() {
            "table1" => row.metric == "accuracy",
            "sweep" => row.test_condition != "train",
            "mixture" => row.test_condition == "all/ood",
            _ => true,
        };
        if keep {
            let _ = writeln!(
                s,
                "{:<36} {:<22} {:<16} {:.4}",
                row.train_condition, row.test_condition, row.metric, row.value
            );
        }
    }
    s
}

fn cmd_reproduce(g: &Global, which: Experiment) -> CmdResult {
    let cfg = g.file_config()?;
    let report = match which {
        Experiment::Table1 => run_table1(&cfg.subclass, &cfg.table1, g.seed)?,
        Experiment::Sweep => run_sweep(&cfg.sweep, &cfg.sweep_train, g.seed)?,
        Experiment::Mixture => run_mixture(&cfg.subclass, &cfg.mixture, g.seed)?,
        Experiment::AppendixA => run_appendix_a(&cfg.subclass)?,
    };
    let dir = g.out_dir();
    let (csv, json) = with_path(&dir, report.write(&dir))?;
    print!("{}", headline(&report));
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let g = &cli.global;
    if let Some(j) = g.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Failure::usage(format!("--jobs: {e}")))?;
    }
    match &cli.command {
        Command::Validate { model } => cmd_validate(model),
        Command::Gen {
            model,
            envs,
            n,
            stratified,
        } => cmd_gen(g, model, envs, *n, *stratified),
        Command::Train { data } => cmd_train(g, data),
        Command::Eval { model, data } => cmd_eval(model, data),
        Command::Verify {
            model,
            data,
            mode,
            permutations,
        } => cmd_verify(g, model, data, *mode, *permutations),
        Command::Gradcheck { cases, perturb } => cmd_gradcheck(g, *cases, *perturb),
        Command::Reproduce { which } => cmd_reproduce(g, *which),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
