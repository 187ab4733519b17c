use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use classex::calibration::search_betas;
use classex::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use classex::comparison::{compare_cached, Comparison};
use classex::config::RunConfig;
use classex::costmodel::average_flops;
use classex::data::Dataset;
use classex::inference::{
    accuracy, collect_outputs, confidence_infer, dynamic_infer, evaluate_exclusion, read_jsonl, static_accuracy,
    write_jsonl, BetaSchedule, ConfidenceConfig, ExclusionOptions,
};
use classex::model::Model;
use classex::parallel::Execution;
use classex::report::build_report;
use classex::training::{train_with, Objective};

#[derive(Parser)]
#[command(name = "classex", version, about = "Class-exclusion early-exit CNNs: train, calibrate, evaluate")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Evaluate samples one after another instead of on the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train backbone and exit heads; writes the checkpoint.
    Train,
    /// Greedy per-exit beta search on the validation split; stores the
    /// schedule in the checkpoint.
    SearchBeta {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trace the inference of single test samples as JSON lines.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test-set indices.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        index: Vec<usize>,
        /// Use the confidence baseline with this uniform threshold.
        #[arg(long)]
        confidence: Option<f32>,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
    /// Accuracy and FLOPs of class exclusion on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Explicit schedule, comma separated.
        #[arg(long, value_delimiter = ',', conflicts_with = "zero_betas")]
        betas: Option<Vec<f64>>,
        /// Evaluate with every beta at zero.
        #[arg(long)]
        zero_betas: bool,
        /// Trace output; defaults to <out>/traces.jsonl.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Class exclusion against the confidence baseline at matched accuracy.
    CompareBaseline {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
    /// Exit statistics from a trace file.
    Report {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to <out>/traces.jsonl.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Comparison JSON written by compare-baseline, to include.
        #[arg(long)]
        comparison: Option<PathBuf>,
    },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    exec: Execution,
}

impl Ctx {
    fn checkpoint_path(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join("model.eecx"))
    }

    fn load(&self, given: &Option<PathBuf>) -> Result<(Model, CheckpointMeta, PathBuf)> {
        let path = self.checkpoint_path(given);
        let (model, meta) = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        Ok((model, meta, path))
    }

    /// Train, validation and test sets. Without a validation split the test
    /// set doubles as validation set.
    fn splits(&self) -> Result<(Dataset, Dataset, Dataset)> {
        let (train, test) = self.cfg.data.load(self.cfg.seed)?;
        if self.cfg.train.validation_split > 0.0 {
            let (tr, va) = train.split_validation(self.cfg.train.validation_split, self.cfg.train.seed)?;
            Ok((tr, va, test))
        } else {
            eprintln!("warning: no validation split configured, using the test set for validation");
            Ok((train, test.clone(), test))
        }
    }

    fn write(&self, name: &str, body: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

fn schedule(explicit: &Option<Vec<f64>>, meta: &CheckpointMeta, model: &Model) -> Result<BetaSchedule> {
    let b = match explicit {
        Some(v) => BetaSchedule::new(v.clone())?,
        None => meta.betas.clone().unwrap_or_else(|| BetaSchedule::zeros(model.num_exits())),
    };
    if b.len() != model.num_exits() {
        bail!("{} betas given for {} exits", b.len(), model.num_exits());
    }
    Ok(b)
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    cfg.train.execution = exec;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx { cfg, out: cli.out, exec };

    match cli.command {
        Command::Train => train(&ctx),
        Command::SearchBeta { checkpoint } => search(&ctx, &checkpoint),
        Command::Infer {
            checkpoint,
            index,
            confidence,
            betas,
        } => infer(&ctx, &checkpoint, &index, confidence, &betas),
        Command::Eval {
            checkpoint,
            betas,
            zero_betas,
            traces,
        } => eval(&ctx, &checkpoint, &betas, zero_betas, &traces),
        Command::CompareBaseline { checkpoint, betas } => compare(&ctx, &checkpoint, &betas),
        Command::Report {
            checkpoint,
            traces,
            comparison,
        } => report(&ctx, &checkpoint, &traces, &comparison),
    }
}

fn train(ctx: &Ctx) -> Result<()> {
    let (train, val, _) = ctx.splits()?;
    let mut model = Model::build(ctx.cfg.model.clone(), ctx.cfg.seed)?;
    println!(
        "training {} parameters on {} samples ({} validation)",
        model.param_count(),
        train.len(),
        val.len()
    );
    let history = train_with(&mut model, &train, Some(&val), &ctx.cfg.train, Objective::Composite(ctx.cfg.loss))?;
    for e in &history.epochs {
        println!(
            "epoch {:>3}  loss {:.4}  ce {:.4}  train_acc {:.4}  val_acc {:.4}",
            e.epoch,
            e.loss,
            e.cross_entropy,
            e.train_accuracy,
            e.val_accuracy.unwrap_or(f64::NAN)
        );
    }
    let meta = CheckpointMeta {
        loss_config: Some(ctx.cfg.loss),
        betas: None,
        history: Some(history),
    };
    let path = ctx.checkpoint_path(&None);
    save_checkpoint(&model, &meta, &path)?;
    ctx.write("config.json", &ctx.cfg.to_json()?)?;
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn search(ctx: &Ctx, checkpoint: &Option<PathBuf>) -> Result<()> {
    let (model, mut meta, path) = ctx.load(checkpoint)?;
    let (_, val, _) = ctx.splits()?;
    let result = search_betas(&model, &val, &ctx.cfg.search, ctx.exec)?;
    ctx.write("beta_audit.csv", &result.audit_csv())?;
    ctx.write("search.json", &serde_json::to_string_pretty(&result)?)?;
    println!("exit order: {:?}", result.order);
    println!("betas: {:?}", result.betas.as_slice());
    println!(
        "validation accuracy: {:.4} (all-zero {:.4})",
        result.final_accuracy, result.baseline_accuracy
    );
    meta.betas = Some(result.betas);
    save_checkpoint(&model, &meta, &path)?;
    Ok(())
}

fn infer(
    ctx: &Ctx,
    checkpoint: &Option<PathBuf>,
    index: &[usize],
    confidence: Option<f32>,
    betas: &Option<Vec<f64>>,
) -> Result<()> {
    let (model, meta, _) = ctx.load(checkpoint)?;
    let (_, _, test) = ctx.splits()?;
    let betas = schedule(betas, &meta, &model)?;
    let mut traces = Vec::with_capacity(index.len());
    for &i in index {
        if i >= test.len() {
            bail!("index {i} outside the test set of {} samples", test.len());
        }
        let mut t = match confidence {
            Some(th) => confidence_infer(
                &model,
                &test.image(i),
                &ConfidenceConfig::uniform(model.num_exits(), th, ctx.cfg.baseline.criterion),
            )?,
            None => dynamic_infer(&model, &test.image(i), &betas)?,
        };
        t.label = Some(test.label(i));
        traces.push(t);
    }
    let stdout = std::io::stdout();
    write_jsonl(&traces, stdout.lock())?;
    Ok(())
}

fn eval(
    ctx: &Ctx,
    checkpoint: &Option<PathBuf>,
    betas: &Option<Vec<f64>>,
    zero: bool,
    traces_path: &Option<PathBuf>,
) -> Result<()> {
    let (model, meta, _) = ctx.load(checkpoint)?;
    let (_, _, test) = ctx.splits()?;
    let betas = if zero {
        BetaSchedule::zeros(model.num_exits())
    } else {
        schedule(betas, &meta, &model)?
    };
    let traces = evaluate_exclusion(&model, &test, &betas, ExclusionOptions::default(), ctx.exec)?;
    let summary = average_flops(&traces, model.cost())?;
    let path = traces_path.clone().unwrap_or_else(|| ctx.out.join("traces.jsonl"));
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&traces, &mut w)?;
    w.flush()?;
    println!("betas: {:?}", betas.as_slice());
    println!("samples: {}", traces.len());
    println!("accuracy: {:.4}", accuracy(&traces));
    println!("static accuracy: {:.4}", static_accuracy(&model, &test, ctx.exec)?);
    println!("mean FLOPs: {:.1}", summary.mean_flops);
    println!("static FLOPs: {}", summary.static_flops);
    println!("mean MACs: {:.1}", summary.mean_macs);
    println!("reduction: {:.2}%", 100.0 * summary.flops_reduction);
    println!("traces: {}", path.display());
    Ok(())
}

fn compare(ctx: &Ctx, checkpoint: &Option<PathBuf>, betas: &Option<Vec<f64>>) -> Result<()> {
    let (model, meta, _) = ctx.load(checkpoint)?;
    let (_, _, test) = ctx.splits()?;
    let betas = schedule(betas, &meta, &model)?;
    let outputs = collect_outputs(&model, &test, ctx.exec)?;
    let c = compare_cached(&outputs, test.labels(), model.cost(), &betas, &ctx.cfg.baseline, ctx.exec)?;
    ctx.write("comparison.json", &serde_json::to_string_pretty(&c)?)?;
    ctx.write("comparison.csv", &c.to_csv())?;
    print!("{}", c.to_csv());
    if let Some(b) = &c.baseline {
        println!("baseline threshold: {}", b.threshold.unwrap_or(f32::NAN));
    }
    println!("matched: {}", c.matched);
    for w in &c.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn report(
    ctx: &Ctx,
    checkpoint: &Option<PathBuf>,
    traces_path: &Option<PathBuf>,
    comparison: &Option<PathBuf>,
) -> Result<()> {
    let (model, _, _) = ctx.load(checkpoint)?;
    let path = traces_path.clone().unwrap_or_else(|| ctx.out.join("traces.jsonl"));
    let traces = read_jsonl(BufReader::new(
        File::open(&path).with_context(|| format!("opening {}", path.display()))?,
    ))?;
    let mut r = build_report(&traces, model.cost())?;
    if let Some(p) = comparison {
        r.comparison = Some(read_comparison(p)?);
    }
    let dir = ctx.out.join("report");
    r.write_to(&dir)?;
    println!("exit histogram: {:?}", r.exit_histogram);
    println!("mean excluded per exit: {:?}", r.cumulative_excluded);
    println!("report: {}", dir.display());
    Ok(())
}

fn read_comparison(p: &Path) -> Result<Comparison> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}
