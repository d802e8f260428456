//! `clgp`: generate datasets, train CLGP/LGM models, impute and evaluate.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad arguments, 3 training
//! aborted on a non-finite bound, 4 answer key and predictions misaligned,
//! 5 rows unseen at training time.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use clgp_core::baselines::{Baseline, Concentration};
use clgp_core::data::{
    self, gen_pcfg_triplets, gen_xor, make_split, xor_answer_key, AnswerKey, PcfgGrammar, SplitSpec,
};
use clgp_core::eval::{export_latents, export_trace, perplexity, run_experiment, ExperimentReport, ModelSpec, RepetitionResult};
use clgp_core::model::{predictive_probs, Checkpoint, ModelError, DEFAULT_PREDICTIVE_SAMPLES};
use clgp_core::optimizer::{train, TrainConfig, TrainError};
use clgp_core::{CategoricalDataset, ModelKind};

const EXIT_FAILURE: u8 = 1;
const EXIT_BAD_ARGS: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;
const EXIT_MISALIGNED: u8 = 4;
const EXIT_UNSEEN_ROWS: u8 = 5;

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: EXIT_FAILURE, error }
    }
}

type CliResult<T> = Result<T, Failure>;

fn bad_args(msg: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_BAD_ARGS, anyhow!("{msg}"))
}

fn misaligned(msg: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_MISALIGNED, anyhow!("{msg}"))
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::NonFinite { iteration } => {
            Failure::new(EXIT_NON_FINITE, anyhow!("training aborted: lower bound became non-finite at iteration {iteration}"))
        }
        TrainError::Config(m) => bad_args(m),
        other => Failure::new(EXIT_FAILURE, other),
    }
}

#[derive(Parser)]
#[command(name = "clgp", version, about = "Categorical latent Gaussian process")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Gen {
        #[command(subcommand)]
        which: GenCommand,
    },
    /// Train a CLGP or LGM and write checkpoint, trace and latents.
    Train(TrainArgs),
    /// Predict every missing cell of a dataset from a checkpoint.
    Impute(ImputeArgs),
    /// Test-set perplexity of a model, averaged over repetitions.
    Eval(EvalArgs),
}

#[derive(Subcommand)]
enum GenCommand {
    /// XOR triplets plus four test rows with the third cell missing.
    Xor {
        /// Copies of each of the four relation triplets.
        #[arg(long, default_value_t = 25)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the answer key of the four test rows.
        #[arg(long)]
        key: Option<PathBuf>,
    },
    /// Letter triplets from strings of a probabilistic grammar.
    Pcfg {
        #[arg(long, default_value_t = 1000)]
        strings: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grammar file (`LHS -> RHS [prob]` per line); the built-in grammar by default.
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Clgp,
    Lgm,
    Uniform,
    Multinomial,
    DirMultUni,
    DirMultBi,
}

#[derive(Args, Clone)]
struct TrainOptions {
    #[arg(long, default_value_t = 2)]
    latent_dim: usize,
    /// Inducing points (default 50 for the CLGP, latent_dim + 1 for the LGM).
    #[arg(long)]
    inducing: Option<usize>,
    #[arg(long, default_value_t = 20)]
    mc_samples: usize,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    /// Hold kernel hyperparameters at their initial values.
    #[arg(long)]
    fix_hypers: bool,
}

impl TrainOptions {
    fn config(&self, kind: ModelKind, seed: u64) -> TrainConfig {
        TrainConfig {
            latent_dim: self.latent_dim,
            inducing: self.inducing,
            mc_samples: self.mc_samples,
            iterations: self.iters,
            seed,
            optimize_hyperparams: !self.fix_hypers,
            ..TrainConfig::for_model(kind)
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Clgp)]
    model: ModelArg,
    #[command(flatten)]
    opts: TrainOptions,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoint.json, trace.csv and latents.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImputeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PREDICTIVE_SAMPLES)]
    samples: usize,
    /// Seed of the predictive draws (the checkpoint's training seed by default).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Clgp)]
    model: ModelArg,
    /// Answer key of cells already missing in the data; otherwise random
    /// splits are drawn.
    #[arg(long)]
    key: Option<PathBuf>,
    /// Trained model to score instead of training (requires --key).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    splits: usize,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Dirichlet concentration (default 0.01 unigram, 1 bigram).
    #[arg(long)]
    alpha: Option<String>,
    #[command(flatten)]
    opts: TrainOptions,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_BAD_ARGS } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen { which } => cmd_gen(which),
        Command::Train(a) => cmd_train(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_data(path: &Path) -> CliResult<CategoricalDataset> {
    data::load_dataset(path).map_err(|e| match e {
        data::DataError::Io(_) => Failure::new(EXIT_FAILURE, anyhow!("reading {}: {e}", path.display())),
        other => bad_args(format!("{}: {other}", path.display())),
    })
}

fn load_key(path: &Path) -> CliResult<AnswerKey> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    AnswerKey::from_csv(&text).map_err(|e| bad_args(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| Failure::new(EXIT_FAILURE, anyhow!("{}: {e}", path.display())))
}

fn summary(data: &CategoricalDataset) -> String {
    format!("{} rows x {} variables, {} missing cells", data.n_rows(), data.n_vars(), data.n_missing())
}

fn cmd_gen(which: GenCommand) -> CliResult<()> {
    match which {
        GenCommand::Xor { n, out, key } => {
            if n == 0 {
                return Err(bad_args("--n must be positive"));
            }
            let data = gen_xor(n);
            write_file(&out, &data::format_dataset(&data))?;
            if let Some(key_path) = key {
                write_file(&key_path, &xor_answer_key(n).to_csv())?;
            }
            println!("wrote {}: {}", out.display(), summary(&data));
        }
        GenCommand::Pcfg { strings, seed, grammar, out } => {
            if strings == 0 {
                return Err(bad_args("--strings must be positive"));
            }
            let grammar = match grammar {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    PcfgGrammar::parse(&text).map_err(|e| bad_args(format!("{}: {e}", p.display())))?
                }
                None => PcfgGrammar::default_grammar(),
            };
            let data = gen_pcfg_triplets(&grammar, strings, seed).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
            write_file(&out, &data::format_dataset(&data))?;
            println!("wrote {}: {}", out.display(), summary(&data));
        }
    }
    Ok(())
}

fn gp_kind(model: ModelArg) -> Option<ModelKind> {
    match model {
        ModelArg::Clgp => Some(ModelKind::Clgp),
        ModelArg::Lgm => Some(ModelKind::Lgm),
        _ => None,
    }
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let kind = gp_kind(a.model).ok_or_else(|| bad_args("only clgp and lgm are trained; baselines are fitted by `eval`"))?;
    let data = load_data(&a.data)?;
    let config = a.opts.config(kind, a.seed);
    config.validate().map_err(train_failure)?;
    println!("training {} on {}", kind.name(), summary(&data));
    let every = (config.iterations / 10).max(1);
    let (state, trace) = train(&data, &config, &mut |r| {
        if r.iteration % every == 0 {
            println!("iter {:>5}  elbo {:>14.4}  mc_std {:.4}", r.iteration, r.elbo, r.mc_std);
        }
    })
    .map_err(train_failure)?;

    let checkpoint = Checkpoint { state, seed: a.seed };
    write_file(&a.out.join("checkpoint.json"), &checkpoint.to_json())?;
    write_file(&a.out.join("trace.csv"), &export_trace(&trace))?;
    write_file(&a.out.join("latents.csv"), &export_latents(&checkpoint.state))?;
    match trace.records.last() {
        Some(r) => println!("final elbo {}", r.elbo),
        None => println!("no iterations run; checkpoint holds the initial state"),
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn predict_failure(e: ModelError) -> Failure {
    match e {
        ModelError::UnknownRow { .. } => Failure::new(EXIT_UNSEEN_ROWS, e),
        ModelError::Shape(_) | ModelError::TargetObserved { .. } => Failure::new(EXIT_MISALIGNED, e),
        other => Failure::new(EXIT_FAILURE, other),
    }
}

fn cmd_impute(a: ImputeArgs) -> CliResult<()> {
    let data = load_data(&a.data)?;
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    if data.n_rows() > checkpoint.state.n_rows() {
        return Err(Failure::new(
            EXIT_UNSEEN_ROWS,
            anyhow!("data has {} rows but the model was trained on {}", data.n_rows(), checkpoint.state.n_rows()),
        ));
    }
    if a.samples == 0 {
        return Err(bad_args("--samples must be positive"));
    }
    let targets = data.missing_cells();
    let table = predictive_probs(&checkpoint.state, &data, &targets, a.samples, a.seed.unwrap_or(checkpoint.seed))
        .map_err(predict_failure)?;
    let mut out = String::from("row,var,probs\n");
    for p in &table.entries {
        write!(out, "{},{}", p.row, p.var).unwrap();
        p.probs.iter().for_each(|v| write!(out, ",{v}").unwrap());
        out.push('\n');
    }
    write_file(&a.out, &out)?;
    println!("imputed {} cells into {}", table.entries.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SplitReport {
    /// Seed of the random split; absent when an answer key was given.
    split_seed: Option<u64>,
    test_cells: usize,
    report: ExperimentReport,
}

#[derive(Serialize)]
struct EvalDocument {
    model: String,
    splits: Vec<SplitReport>,
}

fn model_spec(a: &EvalArgs) -> CliResult<ModelSpec> {
    let alpha = |default: &str| -> CliResult<Concentration> {
        a.alpha.as_deref().unwrap_or(default).parse().map_err(|e| bad_args(format!("--alpha: {e}")))
    };
    if a.alpha.is_some() && !matches!(a.model, ModelArg::DirMultUni | ModelArg::DirMultBi) {
        return Err(bad_args("--alpha applies only to dir-mult-uni and dir-mult-bi"));
    }
    Ok(match a.model {
        ModelArg::Clgp | ModelArg::Lgm => {
            let config = a.opts.config(gp_kind(a.model).expect("gp model"), a.seed);
            config.validate().map_err(train_failure)?;
            ModelSpec::gp(config)
        }
        ModelArg::Uniform => ModelSpec::Baseline { baseline: Baseline::Uniform },
        ModelArg::Multinomial => ModelSpec::Baseline { baseline: Baseline::Multinomial },
        ModelArg::DirMultUni => ModelSpec::Baseline { baseline: Baseline::DirMultUni { alpha: alpha("0.01")? } },
        ModelArg::DirMultBi => ModelSpec::Baseline { baseline: Baseline::DirMultBi { alpha: alpha("1")? } },
    })
}

/// Every key cell must be missing in `data` and hold a valid category.
fn check_key(data: &CategoricalDataset, key: &AnswerKey) -> CliResult<()> {
    if key.is_empty() {
        return Err(misaligned("answer key is empty"));
    }
    for e in &key.entries {
        if e.row >= data.n_rows() || e.var >= data.n_vars() {
            return Err(misaligned(format!("key cell ({}, {}) is outside the data", e.row, e.var)));
        }
        if data.cell(e.row, e.var).is_some() {
            return Err(misaligned(format!("key cell ({}, {}) is observed in the data", e.row, e.var)));
        }
        if e.value > data.cardinality(e.var) {
            return Err(misaligned(format!("key value {} at ({}, {}) exceeds the cardinality", e.value, e.row, e.var)));
        }
    }
    Ok(())
}

fn experiment_failure(e: clgp_core::eval::EvalError) -> Failure {
    use clgp_core::eval::EvalError;
    match e {
        EvalError::Repetition { source, .. } => experiment_failure(*source),
        EvalError::Train(t) => train_failure(t),
        EvalError::Model(m) => predict_failure(m),
        EvalError::MissingPrediction { .. } | EvalError::ValueOutOfRange { .. } | EvalError::EmptyKey => misaligned(e),
        other => Failure::new(EXIT_FAILURE, other),
    }
}

fn checkpoint_report(a: &EvalArgs, spec: &ModelSpec, data: &CategoricalDataset, key: &AnswerKey, path: &Path) -> CliResult<ExperimentReport> {
    let checkpoint = load_checkpoint(path)?;
    let expected = gp_kind(a.model).ok_or_else(|| bad_args("--checkpoint needs --model clgp or lgm"))?;
    if checkpoint.state.kind != expected {
        return Err(bad_args(format!("checkpoint holds a {} model", checkpoint.state.kind.name())));
    }
    if data.n_rows() > checkpoint.state.n_rows() {
        return Err(Failure::new(EXIT_UNSEEN_ROWS, anyhow!("data has rows the model was not trained on")));
    }
    let table = predictive_probs(&checkpoint.state, data, &key.targets(), DEFAULT_PREDICTIVE_SAMPLES, checkpoint.seed)
        .map_err(predict_failure)?;
    let p = perplexity(&table, key).map_err(experiment_failure)?;
    let mut hash_spec = spec.clone();
    if let ModelSpec::Gp { config, .. } = &mut hash_spec {
        config.seed = checkpoint.seed;
    }
    Ok(ExperimentReport {
        model: spec.name().to_string(),
        config_hash: clgp_core::eval::config_hash(&hash_spec, data, key, 1, checkpoint.seed),
        seed: checkpoint.seed,
        repetitions: vec![RepetitionResult {
            rep: 0,
            seed: checkpoint.seed,
            perplexity: p.perplexity,
            infinite: p.infinite,
            final_elbo: None,
            bigram_fallbacks: 0,
        }],
        mean: p.perplexity,
        std: 0.0,
    })
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    if a.reps == 0 {
        return Err(bad_args("--reps must be positive"));
    }
    let spec = model_spec(&a)?;
    let data = load_data(&a.data)?;
    let mut splits = Vec::new();
    match &a.key {
        Some(key_path) => {
            let key = load_key(key_path)?;
            check_key(&data, &key)?;
            let report = match &a.checkpoint {
                Some(ck) => checkpoint_report(&a, &spec, &data, &key, ck)?,
                None => run_experiment(&spec, &data, &key, a.reps, a.seed).map_err(experiment_failure)?,
            };
            splits.push(SplitReport { split_seed: None, test_cells: key.len(), report });
        }
        None => {
            if a.checkpoint.is_some() {
                return Err(bad_args("--checkpoint requires --key (a checkpoint is tied to one split)"));
            }
            if a.splits == 0 {
                return Err(bad_args("--splits must be positive"));
            }
            for i in 0..a.splits {
                let split_seed = a.seed.wrapping_add(i as u64);
                let split = make_split(&data, &SplitSpec::new(a.test_fraction, split_seed)).map_err(|e| bad_args(e))?;
                let report = run_experiment(&spec, &split.visible, &split.key, a.reps, a.seed).map_err(experiment_failure)?;
                splits.push(SplitReport { split_seed: Some(split_seed), test_cells: split.key.len(), report });
            }
        }
    }
    for (i, s) in splits.iter().enumerate() {
        println!("{} split {}: perplexity {:.4} ± {:.4} over {} repetition(s)", spec.name(), i, s.report.mean, s.report.std, s.report.repetitions.len());
    }
    let doc = EvalDocument { model: spec.name().to_string(), splits };
    let text = serde_json::to_string_pretty(&doc).context("serializing report")?;
    write_file(&a.out, &(text + "\n"))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failures_map_to_documented_exit_codes() {
        assert_eq!(train_failure(TrainError::NonFinite { iteration: 7 }).code, EXIT_NON_FINITE);
        assert!(format!("{}", train_failure(TrainError::NonFinite { iteration: 7 }).error).contains("iteration 7"));
        assert_eq!(train_failure(TrainError::Config("x".into())).code, EXIT_BAD_ARGS);
        assert_eq!(predict_failure(ModelError::UnknownRow { row: 3 }).code, EXIT_UNSEEN_ROWS);
        assert_eq!(predict_failure(ModelError::TargetObserved { row: 0, var: 0 }).code, EXIT_MISALIGNED);
        let nested = clgp_core::eval::EvalError::Repetition {
            rep: 1,
            source: Box::new(clgp_core::eval::EvalError::Train(TrainError::NonFinite { iteration: 2 })),
        };
        assert_eq!(experiment_failure(nested).code, EXIT_NON_FINITE);
        assert_eq!(experiment_failure(clgp_core::eval::EvalError::MissingPrediction { row: 0, var: 0 }).code, EXIT_MISALIGNED);
    }
}
