//! Command-line interface: task generation, training, evaluation,
//! sweeps, and report rendering.
//!
//! Every subcommand takes its settings from a TOML config file (see
//! [`crate::config`]) with `FAVOR_*` environment variables and flags
//! layered on top, derives all randomness from the configured seeds, and
//! writes only into its output location.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{load_config, RunConfig, RunMode};
use crate::error::{Error, Result};
use crate::fewshot::{generate_synthetic_task, save_manifest, split_few_shot};
use crate::train::{
    evaluate, evaluate_sampled, init_policy, sweep, train_grpo, train_sft, EvalReport, SweepAxis,
    SweepSpec, SweepTable, TrainOutcome,
};

#[derive(Parser)]
#[command(
    name = "favor",
    version,
    about = "Few-shot classification with group-relative policy optimization and verifiable rewards"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic classification task manifest.
    GenTask(GenTaskArgs),
    /// Train a policy with GRPO or the SFT baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split of the configured task.
    Eval(EvalArgs),
    /// Sweep group size or shots over several seeds.
    Sweep(SweepArgs),
    /// Render comparison tables from finished runs or sweep files.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenTaskArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Instances per class.
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    /// Noise scale around each class prototype.
    #[arg(long, default_value_t = 0.1)]
    noise_scale: f64,
    #[arg(long, default_value_t = 4)]
    seed: u64,
    /// Manifest file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured mode (grpo | sft).
    #[arg(long)]
    mode: Option<RunMode>,
    /// Override the configured run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitSide {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which side of the k-shot split to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitSide,
    /// Sample this many rounds per instance instead of greedy decoding.
    #[arg(long)]
    sampled: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Swept axis.
    #[arg(long, value_enum)]
    axis: SweepAxisArg,
    /// Comma-separated values, e.g. 2,4,8,16.
    #[arg(long)]
    values: String,
    /// Comma-separated run seeds, e.g. 0,1,2,3,4.
    #[arg(long)]
    seeds: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepAxisArg {
    GroupSize,
    Shots,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory of a finished GRPO training run.
    #[arg(long, requires = "sft", conflicts_with = "sweep")]
    grpo: Option<PathBuf>,
    /// Run directory of a finished SFT training run.
    #[arg(long, requires = "grpo", conflicts_with = "sweep")]
    sft: Option<PathBuf>,
    /// A sweep.json file to render instead.
    #[arg(long)]
    sweep: Option<PathBuf>,
    /// Directory for rendered report files (printed to stdout either way).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses argv, dispatches, and maps failures to a nonzero exit status
/// with a diagnostic on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/help text and picks the status.
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::GenTask(args) => gen_task(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Report(args) => report(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_task(args: GenTaskArgs) -> Result<()> {
    let task = generate_synthetic_task(
        args.classes,
        args.per_class,
        args.feature_dim,
        args.noise_scale,
        args.seed,
    )?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    save_manifest(&task, &args.out)?;
    println!(
        "wrote {} instances ({} classes, feature_dim {}) to {}",
        task.instances().len(),
        task.num_classes(),
        task.feature_dim(),
        args.out.display()
    );
    Ok(())
}

fn resolved_config(
    path: Option<&Path>,
    mode: Option<RunMode>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<RunConfig> {
    let mut config = load_config(path)?;
    if let Some(mode) = mode {
        config.mode = mode;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.out_dir = Some(out);
    }
    Ok(config)
}

/// Everything a run needs, resolved from one config.
struct RunSetup {
    config: RunConfig,
    task: crate::fewshot::TaskDefinition,
    vocab: crate::vocab::Vocabulary,
    split: crate::fewshot::EpisodeSplit,
}

fn setup_run(config: RunConfig) -> Result<RunSetup> {
    config.validate()?;
    let task = config.build_task()?;
    let vocab = config.vocabulary()?;
    let split = split_few_shot(&task, config.k, config.data_seed)?;
    for &c in &split.short_classes {
        eprintln!(
            "warning: class {c} ('{}') has at most k={} instances; all went to train, none to test",
            task.class_names()[c],
            config.k
        );
    }
    Ok(RunSetup {
        config,
        task,
        vocab,
        split,
    })
}

fn train(args: TrainArgs) -> Result<()> {
    let config = resolved_config(args.config.as_deref(), args.mode, args.seed, args.out)?;
    if !matches!(config.mode, RunMode::Grpo | RunMode::Sft) {
        return Err(Error::Config(format!(
            "train expects mode grpo or sft, got {}",
            config.mode
        )));
    }
    let out_dir = config
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", config.mode, config.seed)));

    let mut setup = setup_run(config)?;
    setup.config.out_dir = Some(out_dir.clone());
    let RunSetup {
        config,
        task,
        vocab,
        split,
    } = setup;

    let shape = config.policy_shape(&task)?;
    let initial = init_policy(
        &config.policy_init(),
        &shape,
        &vocab,
        task.num_classes(),
        config.seed,
    )?;
    let freeze = config.freeze_mask()?;
    let grpo_config = config.grpo_config();

    let outcome: TrainOutcome = match config.mode {
        RunMode::Grpo => train_grpo(
            &task,
            &vocab,
            &split,
            &grpo_config,
            &initial,
            config.seed,
            &freeze,
        )?,
        RunMode::Sft => train_sft(
            &task,
            &vocab,
            &split,
            &grpo_config,
            &initial,
            config.seed,
            &freeze,
        )?,
        _ => unreachable!("validated above"),
    };

    // Evaluate the initial (baseline) and trained parameters on the
    // held-out split before writing anything.
    let decoding = grpo_config.decoding();
    let eval_initial = evaluate(&initial, &vocab, &task, &split.test_ids, &decoding)?;
    let eval_final = evaluate(&outcome.params, &vocab, &task, &split.test_ids, &decoding)?;

    let mut metrics_text = String::new();
    for record in &outcome.metrics {
        metrics_text.push_str(&serde_json::to_string(record)?);
        metrics_text.push('\n');
    }

    ensure_dir(&out_dir)?;
    config.write_effective(&out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    fs::write(&metrics_path, metrics_text).map_err(|e| Error::io(&metrics_path, e))?;
    checkpoint::save(&outcome.params, out_dir.join("checkpoint.ckpt"))?;
    write_json(&out_dir.join("eval_initial.json"), &eval_initial)?;
    write_json(&out_dir.join("eval_final.json"), &eval_final)?;

    let last = outcome.metrics.last().expect("at least one step");
    println!(
        "{} run seed {}: {} steps, final mean reward {:.4}, final KL {:.6}",
        config.mode, config.seed, last.step, last.mean_reward, last.mean_kl
    );
    println!(
        "test accuracy {:.4} (baseline {:.4}), format rate {:.4}; outputs in {}",
        eval_final.accuracy,
        eval_initial.accuracy,
        eval_final.format_rate,
        out_dir.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let config = resolved_config(args.config.as_deref(), None, args.seed, args.out)?;
    let out_dir = config
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/eval-seed{}", config.seed)));
    let setup = setup_run(config)?;
    let RunSetup {
        config,
        task,
        vocab,
        split,
    } = setup;

    let params = checkpoint::load(&args.checkpoint)?;
    let expected = config.policy_shape(&task)?;
    if params.shape() != &expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint shape {:?} does not match configured task/policy {:?}",
            params.shape(),
            expected
        )));
    }

    let ids = match args.split {
        SplitSide::Train => &split.train_ids,
        SplitSide::Test => &split.test_ids,
    };
    let decoding = config.grpo_config().decoding();
    let report: EvalReport = match args.sampled {
        None => evaluate(&params, &vocab, &task, ids, &decoding)?,
        Some(rounds) => {
            evaluate_sampled(&params, &vocab, &task, ids, &decoding, config.seed, rounds)?
        }
    };

    ensure_dir(&out_dir)?;
    write_json(&out_dir.join("eval_report.json"), &report)?;
    println!(
        "evaluated {} instances: accuracy {:.4}, format rate {:.4}; report in {}",
        report.n_evaluated,
        report.accuracy,
        report.format_rate,
        out_dir.display()
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let mut values = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        values.push(
            part.parse()
                .map_err(|e| Error::Config(format!("bad {what} value '{part}': {e}")))?,
        );
    }
    if values.is_empty() {
        return Err(Error::Config(format!("{what} list is empty")));
    }
    Ok(values)
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let config = resolved_config(args.config.as_deref(), None, None, args.out)?;
    let axis = match args.axis {
        SweepAxisArg::GroupSize => SweepAxis::GroupSize,
        SweepAxisArg::Shots => SweepAxis::Shots,
    };
    let out_dir = config
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/sweep-{}", axis.name())));
    let setup = setup_run(config)?;
    let RunSetup {
        config,
        task,
        vocab,
        ..
    } = setup;

    let spec = SweepSpec {
        axis,
        values: parse_list("axis", &args.values)?,
        seeds: parse_list("seed", &args.seeds)?,
    };
    let shape = config.policy_shape(&task)?;
    let table: SweepTable = sweep(
        &task,
        &vocab,
        &shape,
        &config.grpo_config(),
        config.k,
        config.data_seed,
        &config.policy_init(),
        &spec,
    )?;

    ensure_dir(&out_dir)?;
    write_json(&out_dir.join("sweep.json"), &table)?;
    let text = table.render_text();
    let txt_path = out_dir.join("sweep.txt");
    fs::write(&txt_path, &text).map_err(|e| Error::io(&txt_path, e))?;
    print!("{text}");
    println!("sweep outputs in {}", out_dir.display());
    Ok(())
}

/// Comparison of one trained variant against the shared baseline, in
/// the Δ = variant − baseline convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline_accuracy: f64,
    pub sft_accuracy: f64,
    pub delta_sft: f64,
    pub grpo_accuracy: f64,
    pub delta_grpo: f64,
    pub baseline_format_rate: f64,
    pub sft_format_rate: f64,
    pub grpo_format_rate: f64,
}

impl ComparisonReport {
    pub fn from_reports(
        baseline: &EvalReport,
        sft: &EvalReport,
        grpo: &EvalReport,
    ) -> ComparisonReport {
        ComparisonReport {
            baseline_accuracy: baseline.accuracy,
            sft_accuracy: sft.accuracy,
            delta_sft: sft.accuracy - baseline.accuracy,
            grpo_accuracy: grpo.accuracy,
            delta_grpo: grpo.accuracy - baseline.accuracy,
            baseline_format_rate: baseline.format_rate,
            sft_format_rate: sft.format_rate,
            grpo_format_rate: grpo.format_rate,
        }
    }

    /// Plain-text table with Baseline, +SFT, ΔSFT, +FAVOR, ΔFAVOR columns.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "metric", "Baseline", "+SFT", "ΔSFT", "+FAVOR", "ΔFAVOR"
        ));
        out.push_str(&format!(
            "{:<10} {:>10.4} {:>10.4} {:>+10.4} {:>10.4} {:>+10.4}\n",
            "accuracy",
            self.baseline_accuracy,
            self.sft_accuracy,
            self.delta_sft,
            self.grpo_accuracy,
            self.delta_grpo
        ));
        out.push_str(&format!(
            "{:<10} {:>10.4} {:>10.4} {:>+10.4} {:>10.4} {:>+10.4}\n",
            "format",
            self.baseline_format_rate,
            self.sft_format_rate,
            self.sft_format_rate - self.baseline_format_rate,
            self.grpo_format_rate,
            self.grpo_format_rate - self.baseline_format_rate
        ));
        out
    }
}

fn report(args: ReportArgs) -> Result<()> {
    let rendered = match (&args.grpo, &args.sft, &args.sweep) {
        (Some(grpo_dir), Some(sft_dir), None) => {
            let grpo_baseline: EvalReport = read_json(&grpo_dir.join("eval_initial.json"))?;
            let sft_baseline: EvalReport = read_json(&sft_dir.join("eval_initial.json"))?;
            let grpo_final: EvalReport = read_json(&grpo_dir.join("eval_final.json"))?;
            let sft_final: EvalReport = read_json(&sft_dir.join("eval_final.json"))?;
            if (grpo_baseline.accuracy - sft_baseline.accuracy).abs() > 1e-9 {
                eprintln!(
                    "warning: baselines differ ({} vs {}); runs were not paired — using the GRPO run's baseline",
                    grpo_baseline.accuracy, sft_baseline.accuracy
                );
            }
            let comparison =
                ComparisonReport::from_reports(&grpo_baseline, &sft_final, &grpo_final);
            if let Some(out) = &args.out {
                ensure_dir(out)?;
                write_json(&out.join("report.json"), &comparison)?;
                let path = out.join("report.txt");
                fs::write(&path, comparison.render_text()).map_err(|e| Error::io(&path, e))?;
            }
            comparison.render_text()
        }
        (None, None, Some(sweep_path)) => {
            let table: SweepTable = read_json(sweep_path)?;
            let text = table.render_text();
            if let Some(out) = &args.out {
                ensure_dir(out)?;
                let path = out.join("sweep.txt");
                fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            }
            text
        }
        _ => {
            return Err(Error::Config(
                "report needs either --grpo and --sft run directories, or --sweep FILE"
                    .to_string(),
            ))
        }
    };
    print!("{rendered}");
    Ok(())
}
