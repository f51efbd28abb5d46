use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tranclr::checks::{self, SuiteReport};
use tranclr::data::{load_dataset, save_dataset, synth_generate, LoadMode, SynthOptions, DEFAULT_PROPORTIONS};
use tranclr::harness::{
    evaluate, fewshot_sweep, load_checkpoint, project_embeddings, sweep_table, train, write_artifacts, write_projection,
    RunConfig, SweepRow,
};
use tranclr::{Setting, Tagging};

#[derive(Parser)]
#[command(name = "tranclr", version, about = "Event-centric question answering with contrastive event alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cue-phrase corpus.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, loss log and transform report.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate on nested few-shot subsets.
    Sweep(SweepArgs),
    /// Dump 2-D principal-component coordinates of event-space token vectors.
    Project(ProjectArgs),
    /// Run the gradient and event-map property suites.
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Generative,
    Extractive,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Generative => Setting::Generative,
            SettingArg::Extractive => Setting::Extractive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaggingArg {
    Io,
    Bio,
}

impl From<TaggingArg> for Tagging {
    fn from(t: TaggingArg) -> Self {
        match t {
            TaggingArg::Io => Tagging::Io,
            TaggingArg::Bio => Tagging::Bio,
        }
    }
}

/// Flags shared by every command that trains.
#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_prefix: bool,
    #[arg(long)]
    no_tc: bool,
    #[arg(long)]
    no_cl: bool,
    #[arg(long)]
    no_transm: bool,
    #[arg(long, value_enum)]
    setting: Option<SettingArg>,
    #[arg(long, value_enum)]
    tagging: Option<TaggingArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training set (JSON); overrides the config's path.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.model.seed = s;
        }
        cfg.ablation.no_prefix |= self.no_prefix;
        cfg.ablation.no_tc |= self.no_tc;
        cfg.ablation.no_cl |= self.no_cl;
        cfg.ablation.no_transm |= self.no_transm;
        if let Some(s) = self.setting {
            cfg.model.setting = s.into();
        }
        if let Some(t) = self.tagging {
            cfg.model.tagging = t.into();
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(p) = &self.train {
            cfg.train_path = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.out_dir = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Training instances.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Held-out instances written to eval.json.
    #[arg(long, default_value_t = 0)]
    eval: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Other-role event sentences per paragraph.
    #[arg(long, default_value_t = SynthOptions::default().distractors)]
    distractors: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    setting: Option<SettingArg>,
    #[arg(long, default_value_t = 32)]
    max_answer_len: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Held-out set (JSON); overrides the config's path.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,100,500,2000")]
    sizes: Vec<usize>,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Instances taken from the front of the dataset.
    #[arg(long, default_value_t = 20)]
    sample: usize,
    /// Label written into the epoch column.
    #[arg(long, default_value = "final")]
    epoch: String,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Smaller suites for a fast sanity pass.
    #[arg(long)]
    quick: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    out_dir(&args.out)?;
    let opts = SynthOptions {
        distractors: args.distractors,
    };
    let all = synth_generate(args.n + args.eval, &DEFAULT_PROPORTIONS, args.seed, opts)?;
    let (train_set, eval_set) = all.split_at(args.n);
    save_dataset(args.out.join("train.json"), train_set)?;
    if !eval_set.is_empty() {
        save_dataset(args.out.join("eval.json"), eval_set)?;
    }
    println!("wrote {} training and {} held-out instances to {}", train_set.len(), eval_set.len(), args.out.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = args.run.config()?;
    let path = cfg.train_path.clone().context("no training set: pass --train or set train_path")?;
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let data = load_dataset(&path, LoadMode::Lenient)?;
    let outcome = train(&cfg, &data, None)?;
    write_artifacts(&outcome, &out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!(
        "trained {} steps, final loss {}, det(M) {:.6e}; artifacts in {}",
        outcome.log.len(),
        outcome.final_loss.map_or_else(|| "-".into(), |l| format!("{l:.6}")),
        outcome.transform.det,
        out.display()
    );
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> anyhow::Result<()> {
    out_dir(&args.out)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data, LoadMode::Strict)?;
    let report = evaluate(&ckpt, &data, args.setting.map(Setting::from), args.max_answer_len)?;
    fs::write(args.out.join("metrics.json"), report.to_json()?)?;
    let o = &report.overall;
    println!("F1 {:.4}  HIT@1 {:.4}  EM {:.4}  over {} questions", o.f1t, o.hit1, o.em, o.count);
    if let Some(acc) = report.type_accuracy {
        println!("type accuracy {acc:.4}");
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> anyhow::Result<()> {
    let mut cfg = args.run.config()?;
    if let Some(p) = args.eval {
        cfg.eval_path = Some(p);
    }
    let train_path = cfg.train_path.clone().context("no training set: pass --train or set train_path")?;
    let eval_path = cfg.eval_path.clone().context("no held-out set: pass --eval or set eval_path")?;
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    out_dir(&out)?;
    let train_set = load_dataset(&train_path, LoadMode::Lenient)?;
    let eval_set = load_dataset(&eval_path, LoadMode::Strict)?;
    let reports = fewshot_sweep(&cfg, &train_set, &eval_set, &args.sizes, &[])?;
    let mut rows = Vec::with_capacity(reports.len());
    for (size, report) in &reports {
        fs::write(out.join(format!("metrics_{size}.json")), report.to_json()?)?;
        rows.push(SweepRow::from_report(*size, report));
    }
    let table = sweep_table(&rows);
    fs::write(out.join("sweep.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn project_cmd(args: ProjectArgs) -> anyhow::Result<()> {
    out_dir(&args.out)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data, LoadMode::Strict)?;
    let sample = &data[..args.sample.min(data.len())];
    let rows = project_embeddings(&ckpt, sample, &args.epoch)?;
    let path = args.out.join("projection.tsv");
    write_projection(&path, &rows)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn check_cmd(args: CheckArgs) -> anyhow::Result<()> {
    let suites: Vec<SuiteReport> = if args.quick {
        vec![
            checks::gradient_suite(2, 20)?,
            checks::property1_suite(12, args.seed)?,
            checks::monte_carlo_suite(1, 20_000, args.seed)?,
            checks::property2_suite(12, args.seed)?,
            checks::invertibility_suite(1000, 100, 64, args.seed)?,
        ]
    } else {
        checks::all_suites(args.seed)?
    };
    let mut failed = 0;
    for s in &suites {
        let worst = s.records.iter().map(|r| (r.observed - r.expected).abs()).fold(0.0, f64::max);
        let status = if s.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<22} {:>4} checks, {} failed, worst deviation {worst:.3e}", s.name, s.records.len(), s.failures());
        for r in s.records.iter().filter(|r| !r.pass) {
            println!("     {}: expected {} observed {} tol {}", r.name, r.expected, r.observed, r.tolerance);
        }
        failed += s.failures();
    }
    if let Some(out) = &args.out {
        out_dir(out)?;
        fs::write(out.join("check.json"), serde_json::to_string_pretty(&suites)?)?;
    }
    if failed > 0 {
        bail!("{failed} property checks failed");
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Project(a) => project_cmd(a),
        Command::Check(a) => check_cmd(a),
    }
}
