//! Command line front end. Every subcommand writes into an output directory
//! and is reproducible for a fixed seed.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, DATA_ROOT_ENV};
use crate::data::{Split, Splits};
use crate::error::{Error, Result};
use crate::experiment::{count_report, run_search, train_arch, train_config_for, ArchFile};
use crate::io::model::{load_model, save_model};
use crate::io::Container;
use crate::pareto::{collect, pareto_front, row_from_metrics, write_csv};
use crate::quant::{export_quantized, summarize_bitwidths, verify_export, QuantPolicy};
use crate::train::{evaluate, train, Checkpoint};

pub const ARCH_FILE: &str = "arch.json";
pub const SEARCH_LOG: &str = "search.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.kwsn";
pub const MODEL_FILE: &str = "model.kwsn";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const BITWIDTH_CSV: &str = "bitwidths.csv";

#[derive(Debug, Parser)]
#[command(name = "kwsnas", version, about = "Keyword-spotting architecture search and quantization-aware training")]
pub struct Cli {
    /// Seed for data splits, initialization and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Root of the speech-commands folder.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search the supernet and write the derived architecture.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's ops penalty weight.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Train an architecture in full precision.
    Train(TrainArgs),
    /// Quantization-aware training with fixed bit-widths.
    QuantizeFixed {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        bw: u32,
        #[arg(long)]
        ba: u32,
    },
    /// Quantization-aware training with trained bit-widths.
    QuantizeTrained {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, default_value_t = 0.04)]
        lambda_w: f64,
        #[arg(long, default_value_t = 0.04)]
        lambda_a: f64,
    },
    /// Accuracy and confusion matrix of a saved model.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Exact parameter and operation counts.
    Count {
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        arch: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Integer export of a quantized model, verified bit for bit.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flags the accuracy/size frontier over metrics files.
    Pareto {
        /// Glob of metrics.json files.
        #[arg(long)]
        metrics: String,
        #[arg(long, default_value = "pareto.csv")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub arch: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn load_data(cfg: &ExperimentConfig, cli: &Cli) -> Result<Splits> {
    cfg.dataset.load(cli.data_root.as_deref(), cli.seed)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Search { config, out, beta } => cmd_search(cli, config, out, *beta),
        Command::Train(a) => cmd_train(cli, a, None, (0.0, 0.0)),
        Command::QuantizeFixed { common, bw, ba } => {
            cmd_train(cli, common, Some(QuantPolicy::Fixed { b_w: *bw, b_a: *ba }), (0.0, 0.0))
        }
        Command::QuantizeTrained {
            common,
            lambda_w,
            lambda_a,
        } => {
            if !(*lambda_w >= 0.0 && *lambda_a >= 0.0) {
                return Err(Error::Config("lambda-w and lambda-a must be >= 0".into()));
            }
            cmd_train(cli, common, Some(QuantPolicy::trained()), (*lambda_w, *lambda_a))
        }
        Command::Eval { config, model, split } => cmd_eval(cli, config, model, (*split).into()),
        Command::Count { arch, model, json } => cmd_count(arch.as_deref(), model.as_deref(), *json),
        Command::Export { model, out } => cmd_export(model, out),
        Command::Pareto { metrics, out } => cmd_pareto(metrics, out),
    }
}

fn cmd_search(cli: &Cli, config: &Path, out: &Path, beta: Option<f64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(b) = beta {
        cfg.beta = b;
        cfg.validate()?;
    }
    let data = load_data(&cfg, cli)?;
    create_dir(out)?;
    let log_path = out.join(SEARCH_LOG);
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let r = run_search(&cfg, &data, cli.seed, |e| {
        eprintln!(
            "search epoch {:>3}  loss {:.4}  valid {:.3}  E[ops] {:.0}",
            e.epoch, e.train_loss, e.valid_accuracy, e.expected_total_ops
        );
        writeln!(log, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(&log_path, err))
    })?;
    r.arch.save(&out.join(ARCH_FILE))?;
    let report = count_report(&r.outcome.derived)?;
    println!(
        "derived {}  params {}  ops {}",
        r.arch.choice_labels.join(" "),
        report.params,
        report.ops
    );
    Ok(())
}

fn run_tag(cfg: &ExperimentConfig, policy: Option<QuantPolicy>, seed: u64) -> String {
    let mode = match policy {
        None => "fp".to_string(),
        Some(QuantPolicy::Fixed { b_w, b_a }) => format!("w{b_w}a{b_a}"),
        Some(QuantPolicy::Trained { .. }) => "trained".to_string(),
    };
    let name = if cfg.name.is_empty() { "run" } else { &cfg.name };
    format!("{name}-{mode}-s{seed}")
}

fn cmd_train(cli: &Cli, a: &TrainArgs, policy: Option<QuantPolicy>, lambda: (f64, f64)) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    if let Some(p) = policy {
        p.validate()?;
    }
    let arch = ArchFile::load(&a.arch)?;
    let data = load_data(&cfg, cli)?;
    let tc = train_config_for(&cfg.train, policy, lambda, cli.seed);
    let tag = run_tag(&cfg, policy, cli.seed);
    create_dir(&a.out)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let log_path = a.out.join(METRICS_LOG);
    let on_epoch = |m: &crate::train::EpochMetrics, c: &Checkpoint| -> Result<()> {
        eprintln!(
            "epoch {:>3}  loss {:.4}  valid {:.3}{}",
            m.epoch,
            m.train_loss,
            m.valid_accuracy,
            match (m.b_w, m.b_a) {
                (Some(w), Some(b)) => format!("  B_w {w:.2}  B_a {b:.2}"),
                _ => String::new(),
            }
        );
        c.save(&ckpt_path)?;
        write_lines(&log_path, &c.state.history)
    };
    let outcome = if a.resume && ckpt_path.exists() {
        train(Checkpoint::load(&ckpt_path)?, &data, &tc, &tag, on_epoch)?
    } else {
        train_arch(&arch, &data, &tc, policy, &tag, on_epoch)?
    };
    let model = &outcome.checkpoint.model;
    save_model(
        model,
        json!({ "tag": tag, "seed": cli.seed, "config": cfg.name, "policy": policy, "lambda": [lambda.0, lambda.1] }),
        &a.out.join(MODEL_FILE),
    )?;
    write_json(&a.out.join(METRICS_FILE), &outcome.metrics)?;
    if policy.is_some() {
        let s = summarize_bitwidths(model);
        let path = a.out.join(BITWIDTH_CSV);
        std::fs::write(&path, s.units_csv()).map_err(|e| Error::io(&path, e))?;
    }
    let m = &outcome.metrics;
    println!(
        "{tag}  valid {:.4}  test {}  params {}  ops {}{}",
        m.valid_accuracy,
        m.test_accuracy.map_or("-".into(), |t| format!("{t:.4}")),
        m.params,
        m.ops,
        match (m.b_w, m.b_a) {
            (Some(w), Some(b)) => format!("  B_w {w:.3}  B_a {b:.3}"),
            _ => String::new(),
        }
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, config: &Path, model: &Path, split: Split) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let (mut graph, _) = load_model::<f32>(model)?;
    let data = load_data(&cfg, cli)?;
    let e = evaluate(&mut graph, data.get(split))?;
    println!("{}", serde_json::to_string_pretty(&json!({ "split": split, "accuracy": e.accuracy, "confusion": e.confusion }))?);
    Ok(())
}

fn cmd_count(arch: Option<&Path>, model: Option<&Path>, as_json: bool) -> Result<()> {
    let graph = match (arch, model) {
        (Some(a), _) => ArchFile::load(a)?.build(0)?,
        (None, Some(m)) => load_model::<f32>(m)?.0,
        (None, None) => return Err(Error::Config("count needs --arch or --model".into())),
    };
    let report = count_report(&graph)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.render());
    }
    Ok(())
}

fn cmd_export(model: &Path, out: &Path) -> Result<()> {
    let (graph, extra) = load_model::<f32>(model)?;
    if graph.layers.iter().all(|l| l.weight_quant.is_none()) {
        return Err(Error::Usage("model has no weight quantizers; train it with quantize-fixed or quantize-trained".into()));
    }
    export_quantized(&graph, extra)?.write(out)?;
    let report = verify_export(&graph, &Container::read(out)?)?;
    println!("{}", serde_json::to_string(&report)?);
    if !report.passed() {
        return Err(Error::Format(format!("{} re-expanded weights differ", report.mismatches)));
    }
    Ok(())
}

fn cmd_pareto(pattern: &str, out: &Path) -> Result<()> {
    let rows = pareto_front(collect(pattern)?.iter().map(|(_, m)| row_from_metrics(m)).collect());
    write_csv(&rows, out)?;
    for r in rows.iter().filter(|r| r.pareto) {
        println!("{:.4}  {:>8}  {:>12}  {}", r.accuracy, r.params, r.ops, r.tag);
    }
    Ok(())
}

/// Parses arguments, runs, and maps the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
