use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use resroute::cost::{Accounting, CostModel, Provenance};
use resroute::data::{generate, prepare, Dataset, DatasetSpec, PreparedVideo, Split};
use resroute::eval::{
    curve_export, evaluate, policy_histogram, run_baseline, write_curve_csv, write_usage_csv,
    BaselineKind, CurvePoint, Evaluation, GroupBy, Metrics,
};
use resroute::params::Checkpoint;
use resroute::router::{read_jsonl, write_jsonl};
use resroute::train::{
    compare_methods, train_three_stage, write_compare_csv, write_log_csv, LogRow,
    TrainConfig, TrainOutcome,
};

/// Adaptive-resolution video recognition on a synthetic benchmark.
#[derive(Parser, Debug)]
#[command(name = "resroute", version)]
struct Cli {
    /// Overrides the seed of the dataset spec, training config or random baseline.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cost table used for training losses and reported metrics.
    #[arg(long, global = true)]
    cost_table: Option<Provenance>,
    /// Which GFLOPS figures the summary line prints.
    #[arg(long, global = true, default_value = "paper")]
    accounting: Accounting,
    /// Multiplier on every training stage's epoch count.
    #[arg(long, global = true)]
    epoch_scale: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// The published recipe.
    Paper,
    /// Learning rates and gradient clipping tuned for training from scratch at desk scale.
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset from a spec JSON (defaults when omitted).
    Gen {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint and a per-epoch log CSV.
    Train {
        /// Training config JSON; the preset applies when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Evaluate a checkpoint; writes metrics JSON and optionally traces.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Run a comparison method with a checkpoint's networks.
    Baseline {
        #[arg(long)]
        kind: BaselineKind,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Per-action usage from traces.
    Hist {
        #[arg(long)]
        traces: PathBuf,
        /// Checkpoint whose action space the traces use (default model otherwise).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "dataset")]
        group_by: GroupBy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy against cost for a list of runs.
    Curve {
        /// JSON array of `{"label": ..., "checkpoint": ...}`; relative paths
        /// resolve against the list's directory.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with Gumbel sampling and with policy gradients under the same
    /// config and data, then tabulate both.
    CompareRl {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for both checkpoints and logs.
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunEntry {
    label: String,
    checkpoint: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { spec, out } => {
            let mut s: DatasetSpec = match spec {
                Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => DatasetSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let d = generate(&s)?;
            d.save(out)?;
            println!("wrote {} videos to {}", d.videos.len(), out.display());
        }
        Command::Train {
            config,
            preset,
            data,
            out,
            log,
        } => {
            let cfg = load_config(&cli, config.as_deref(), *preset)?;
            let ds = Dataset::load(data)?;
            let (train, val) = train_val(&ds, &cfg)?;
            let outcome = train_with_log(&cfg, &train, &val, log)?;
            outcome.checkpoint.save(out)?;
            println!("wrote {} and {}", out.display(), log.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            metrics,
            traces,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let videos = load_split(data, &ck, (*split).into())?;
            let costs = cost_model(&cli, &ck)?;
            let ev = evaluate(&ck, &videos, &costs)?;
            write_outputs(&cli, &ev, metrics, traces.as_deref())?;
        }
        Command::Baseline {
            kind,
            checkpoint,
            data,
            split,
            metrics,
            traces,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let videos = load_split(data, &ck, (*split).into())?;
            let costs = cost_model(&cli, &ck)?;
            let ev = run_baseline(*kind, &ck, &videos, &costs, cli.seed.unwrap_or(0))?;
            write_outputs(&cli, &ev, metrics, traces.as_deref())?;
        }
        Command::Hist {
            traces,
            checkpoint,
            group_by,
            out,
        } => {
            let arch = match checkpoint {
                Some(p) => Checkpoint::load(p)?.arch,
                None => Default::default(),
            };
            let tr = read_jsonl(BufReader::new(File::open(traces).with_context(|| format!("opening {}", traces.display()))?))?;
            let rows = policy_histogram(&tr, &arch, *group_by);
            write_usage_csv(&rows, &arch, BufWriter::new(File::create(out)?))?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Curve {
            runs,
            data,
            split,
            out,
        } => {
            let entries: Vec<RunEntry> = serde_json::from_str(&read(runs)?)
                .with_context(|| format!("parsing {}", runs.display()))?;
            if entries.is_empty() {
                bail!("{} lists no runs", runs.display());
            }
            let base = runs.parent().unwrap_or(Path::new("."));
            let ds = Dataset::load(data)?;
            let mut points = Vec::with_capacity(entries.len());
            for e in entries {
                let ck = Checkpoint::load(&base.join(&e.checkpoint))?;
                let videos = prepare(ds.split((*split).into()), &ck.arch.ladder)?;
                let m = evaluate(&ck, &videos, &cost_model(&cli, &ck)?)?.metrics;
                let (_, gv) = m.gflops(cli.accounting);
                points.push(CurvePoint {
                    label: e.label,
                    gflops_v: gv,
                    accuracy: m.top1,
                    map: m.map,
                });
            }
            let points = curve_export(points);
            write_curve_csv(&points, BufWriter::new(File::create(out)?))?;
            println!("wrote {} rows to {}", points.len(), out.display());
        }
        Command::CompareRl {
            config,
            preset,
            data,
            out,
            workdir,
        } => {
            let cfg = load_config(&cli, config.as_deref(), *preset)?;
            let ds = Dataset::load(data)?;
            let (train, val) = train_val(&ds, &cfg)?;
            let test = prepare(ds.split(Split::Test), &cfg.arch.ladder)?;
            let dir = workdir.clone().unwrap_or_else(|| out.with_extension("runs"));
            fs::create_dir_all(&dir)?;
            let results = compare_methods(&cfg, &train, &val, &test, cli.accounting, |_, _| {})?;
            let mut rows = Vec::with_capacity(results.len());
            for (row, outcome) in results {
                let name = row.method.to_string();
                write_log(&outcome.log, &dir.join(format!("{name}_log.csv")))?;
                outcome.checkpoint.save(&dir.join(format!("{name}.json")))?;
                println!(
                    "{name}: acc {:.4} mAP {:.4} GFLOPS/f {:.4} GFLOPS/V {:.4}",
                    row.accuracy, row.map, row.gflops_f, row.gflops_v
                );
                rows.push(row);
            }
            write_compare_csv(&rows, BufWriter::new(File::create(out)?))?;
        }
    }
    Ok(())
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn load_config(cli: &Cli, path: Option<&Path>, preset: Preset) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_json(&read(p)?).with_context(|| format!("loading {}", p.display()))?,
        None => match preset {
            Preset::Paper => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        },
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = cli.cost_table {
        cfg.cost_table = p;
    }
    if let Some(e) = cli.epoch_scale {
        cfg.epoch_scale = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_val(ds: &Dataset, cfg: &TrainConfig) -> Result<(Vec<PreparedVideo>, Vec<PreparedVideo>)> {
    Ok((
        prepare(ds.split(Split::Train), &cfg.arch.ladder)?,
        prepare(ds.split(Split::Val), &cfg.arch.ladder)?,
    ))
}

/// Train, streaming log rows to `log` as epochs finish so a diverged run
/// still leaves its history behind.
fn train_with_log(
    cfg: &TrainConfig,
    train: &[PreparedVideo],
    val: &[PreparedVideo],
    log: &Path,
) -> Result<TrainOutcome> {
    let mut rows: Vec<LogRow> = Vec::new();
    let mut write_err = None;
    let result = train_three_stage(cfg, train, val, |r| {
        rows.push(r.clone());
        if let Err(e) = write_log(&rows, log) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    if rows.is_empty() {
        write_log(&rows, log)?;
    }
    result.with_context(|| format!("training aborted; log so far in {}", log.display()))
}

fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_log_csv(rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn load_split(data: &Path, ck: &Checkpoint, split: Split) -> Result<Vec<PreparedVideo>> {
    let ds = Dataset::load(data)?;
    Ok(prepare(ds.split(split), &ck.arch.ladder)?)
}

fn cost_model(cli: &Cli, ck: &Checkpoint) -> Result<CostModel> {
    Ok(CostModel::for_provenance(cli.cost_table.unwrap_or(Provenance::Paper), &ck.arch)?)
}

fn write_outputs(cli: &Cli, ev: &Evaluation, metrics: &Path, traces: Option<&Path>) -> Result<()> {
    write_metrics(&ev.metrics, metrics)?;
    if let Some(t) = traces {
        let mut w = BufWriter::new(File::create(t)?);
        write_jsonl(&ev.traces, &mut w)?;
        w.flush()?;
    }
    let (gf, gv) = ev.metrics.gflops(cli.accounting);
    println!(
        "videos {} top1 {:.4} mAP {:.4} GFLOPS/f {:.4} GFLOPS/V {:.4} ({} accounting)",
        ev.metrics.videos, ev.metrics.top1, ev.metrics.map, gf, gv, cli.accounting
    );
    Ok(())
}

fn write_metrics(m: &Metrics, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
