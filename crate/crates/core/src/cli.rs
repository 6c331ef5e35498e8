//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! format error, 3 numerical failure or infeasible ceiling. Failures print
//! one `error,<kind>,<message>` line on standard error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use log::info;

use crate::dataset::{self, DatasetKind, Split};
use crate::error::{Error, Result};
use crate::network::{catalog, parse_shape3, Graph, Network};
use crate::planner::{
    compression_report, largest_fm_ratio, plan_ceiling, profile, render_svg, Bar, Ceiling, CeilingPlan,
    ReportFormat,
};
use crate::projection::InitMethod;
use crate::store::{self, export_folded};
use crate::trainer::{evaluate, progressive_compress, train_baseline, TrainConfig, TrainLog};

#[derive(Debug, Parser)]
#[command(name = "ceilcomp", version, about = "Feature-map ceiling compression for CNNs")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stored feature-map inventory and largest-map ratio.
    Profile(ProfileArgs),
    /// Ceiling plan: which maps to compress and to what rank.
    Plan(PlanArgs),
    /// Train a baseline network.
    TrainBaseline(TrainArgs),
    /// Insert and train projections on a baseline checkpoint.
    Compress(CompressArgs),
    /// Fold lifts into the following convolutions and export the model.
    Fold(FoldArgs),
    /// Accuracy of a checkpoint or model.
    Eval(EvalArgs),
    /// Before/after bar chart of stored feature-map sizes.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    /// Built-in architecture name or path to an architecture file.
    #[arg(long)]
    pub arch: String,
    /// Input shape as CxHxW; defaults to the architecture's own.
    #[arg(long)]
    pub input: Option<String>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value = "csv")]
    pub format: String,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("ceiling").required(true).args(["ceiling_factor", "ceiling_elements"])))]
pub struct PlanArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long)]
    pub ceiling_factor: Option<f64>,
    #[arg(long)]
    pub ceiling_elements: Option<u64>,
    /// Write the plan file here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a report (format from --format) here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset: String,
    /// Dataset directory; defaults to $CEILCOMP_DATA_DIR/<dataset>.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    /// Key-value file overriding training defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the per-epoch CSV log here.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub arch: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("planned").required(true).args(["plan", "ceiling_factor"])))]
pub struct CompressArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub ceiling_factor: Option<f64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Args)]
pub struct FoldArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep lifts as explicit maps where no convolution can absorb them.
    #[arg(long)]
    pub explicit_lift: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["ckpt", "model"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// test or val.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub ckpt_before: PathBuf,
    #[arg(long)]
    pub ckpt_after: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Maps an error to its process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Data(_) | Error::Format(_) | Error::Corruption(_) | Error::Io { .. } => 2,
        Error::Numerical(_) | Error::Infeasible { .. } => 3,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
                let first = text.lines().next().unwrap_or("invalid arguments");
                let _ = writeln!(err, "error,usage,{}", first.trim_start_matches("error: "));
            }
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).target(env_logger::Target::Stderr).try_init();
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error,{},{}", e.kind(), e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

fn resolve_arch(arch: &str, input: Option<&str>) -> Result<Graph> {
    let path = Path::new(arch);
    let graph = if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Graph::parse(&text)?
    } else {
        catalog::load(arch)?
    };
    let Some(input) = input else { return Ok(graph) };
    let shape = parse_shape3(input).map_err(Error::Parameter)?;
    if shape == graph.input_shape() {
        return Ok(graph);
    }
    Graph::new(graph.name(), shape, None, graph.layers().to_vec())
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn data_dir(args: &DataArgs, kind: DatasetKind) -> Result<PathBuf> {
    args.data_dir
        .clone()
        .or_else(|| kind.default_dir())
        .ok_or_else(|| {
            Error::Config(format!(
                "no --data-dir given and {} is not set",
                dataset::DATA_DIR_ENV
            ))
        })
}

fn load_data(args: &DataArgs, seed: u64) -> Result<dataset::DataBundle> {
    let kind: DatasetKind = args.dataset.parse()?;
    let dir = data_dir(args, kind)?;
    info!("loading {} from {}", kind.name(), dir.display());
    dataset::load(kind, &dir, seed)
}

fn train_config(kind: DatasetKind, opts: &TrainOpts) -> Result<TrainConfig> {
    let mut cfg = match kind {
        DatasetKind::Mnist => TrainConfig::mnist(),
        DatasetKind::Cifar10 => TrainConfig {
            hflip: true,
            ..TrainConfig::default()
        },
    };
    if let Some(p) = &opts.config {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.apply_text(&text)?;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_log(log: &TrainLog, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => fs::write(p, log.to_csv()).map_err(|e| Error::io(p, e)),
        None => Ok(()),
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Profile(a) => {
            let graph = resolve_arch(&a.arch.arch, a.arch.input.as_deref())?;
            let inv = profile(&graph)?;
            let format: ReportFormat = a.format.parse()?;
            let largest = inv
                .largest()
                .ok_or_else(|| Error::Config("architecture has no stored activations".into()))?;
            let noop = plan_ceiling(&inv, Ceiling::Elements(largest.elements()))?;
            let mut text = compression_report(&inv, &noop, format)?;
            if format == ReportFormat::Csv {
                let ratio = largest_fm_ratio(&inv)?;
                let _ = writeln!(text, "arch,{}", inv.arch);
                let _ = writeln!(text, "largest_site,{}", largest.site);
                let _ = writeln!(text, "largest_elements,{}", largest.elements());
                let _ = writeln!(text, "param_elements,{}", inv.param_elements);
                let _ = writeln!(text, "largest_fm_ratio,{:.1}%", ratio * 100.0);
            }
            emit(out, a.out.as_deref(), &text)
        }
        Command::Plan(a) => {
            let graph = resolve_arch(&a.arch.arch, a.arch.input.as_deref())?;
            let inv = profile(&graph)?;
            let ceiling = match (a.ceiling_factor, a.ceiling_elements) {
                (Some(f), _) => Ceiling::Factor(f),
                (None, Some(e)) => Ceiling::Elements(e),
                (None, None) => unreachable!("clap requires one ceiling"),
            };
            let format: ReportFormat = a.format.parse()?;
            let plan = plan_ceiling(&inv, ceiling)?;
            let mut text = String::from("site,k\n");
            for asg in &plan.assignments {
                let _ = writeln!(text, "{},{}", asg.site, asg.k);
            }
            text.push_str(&plan.summary());
            emit(out, None, &text)?;
            if let Some(p) = &a.out {
                fs::write(p, plan.to_text()).map_err(|e| Error::io(p, e))?;
            }
            if let Some(p) = &a.report {
                fs::write(p, compression_report(&inv, &plan, format)?).map_err(|e| Error::io(p, e))?;
            }
            Ok(())
        }
        Command::TrainBaseline(a) => {
            let kind: DatasetKind = a.data.dataset.parse()?;
            let mut cfg = train_config(kind, &a.opts)?;
            if let Some(e) = a.epochs {
                cfg.baseline_epochs = e;
            }
            cfg.validate()?;
            let graph = resolve_arch(&a.arch, None)?;
            let data = load_data(&a.data, cfg.seed)?;
            let net = Network::init(graph, cfg.seed)?;
            let mut log = TrainLog::default();
            let ckpt = train_baseline(net, &data, &cfg, &mut log)?;
            write_log(&log, a.opts.log.as_deref())?;
            store::save_checkpoint(&ckpt, &a.out)?;
            let test = evaluate(&ckpt.net, &data.test)?;
            let _ = writeln!(out, "val_accuracy,{:.4}\ntest_accuracy,{test:.4}", ckpt.val_accuracy);
            Ok(())
        }
        Command::Compress(a) => {
            let kind: DatasetKind = a.data.dataset.parse()?;
            let mut cfg = train_config(kind, &a.opts)?;
            if let Some(init) = &a.init {
                cfg.init = init.parse::<InitMethod>()?;
            }
            cfg.validate()?;
            let mut base = store::load_checkpoint(&a.ckpt)?;
            base.net.set_all_trainable(false);
            let plan = match (&a.plan, a.ceiling_factor) {
                (Some(p), _) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    CeilingPlan::parse(&text)?
                }
                (None, Some(f)) => plan_ceiling(&profile(base.net.graph())?, Ceiling::Factor(f))?,
                (None, None) => unreachable!("clap requires a plan source"),
            };
            let data = load_data(&a.data, cfg.seed)?;
            let mut log = TrainLog::default();
            let ckpt = progressive_compress(&base, &plan, &data, &cfg, &mut log)?;
            write_log(&log, a.opts.log.as_deref())?;
            store::save_checkpoint(&ckpt, &a.out)?;
            let test = evaluate(&ckpt.net, &data.test)?;
            let _ = writeln!(
                out,
                "sites,{}\nval_accuracy,{:.4}\ntest_accuracy,{test:.4}",
                plan.assignments.len(),
                ckpt.val_accuracy
            );
            Ok(())
        }
        Command::Fold(a) => {
            let file = store::load(&a.ckpt)?;
            let ex = export_folded(&file.net, a.explicit_lift, &a.out)?;
            let mut text = String::from("site,folded_into,param_delta,within_bound\n");
            for s in &ex.sites {
                let _ = writeln!(
                    text,
                    "{},{},{},{}",
                    s.site,
                    s.folded_into.join("+"),
                    s.param_delta,
                    s.within_bound
                );
            }
            let _ = writeln!(text, "unfolded_elements,{}", ex.unfolded_elements);
            let _ = writeln!(text, "folded_elements,{}", ex.folded_elements);
            emit(out, None, &text)
        }
        Command::Eval(a) => {
            let path = a.ckpt.as_ref().or(a.model.as_ref()).expect("clap requires a source");
            let file = store::load(path)?;
            let data = load_data(&a.data, a.seed)?;
            let split = match a.split.as_str() {
                "test" => Split::Test,
                "val" => Split::Val,
                other => return Err(Error::Parameter(format!("unknown split '{other}' (test|val)"))),
            };
            let acc = evaluate(&file.net, data.split(split))?;
            let _ = writeln!(out, "accuracy,{acc:.4}");
            Ok(())
        }
        Command::Report(a) => {
            let before = store::load(&a.ckpt_before)?;
            let after = store::load(&a.ckpt_after)?;
            let inv_before = profile(before.net.graph())?;
            let inv_after = profile(after.net.graph())?;
            let bars: Vec<Bar> = inv_before
                .entries
                .iter()
                .map(|e| Bar {
                    label: e.site.clone(),
                    original: e.elements(),
                    compressed: inv_after.entry(&e.site).map_or(e.elements(), |a| a.elements()),
                })
                .collect();
            let ceiling = after
                .plan
                .as_ref()
                .map(|p| p.ceiling_elements)
                .or_else(|| bars.iter().map(|b| b.compressed).max());
            let original: u64 = bars.iter().map(|b| b.original).sum();
            let compressed: u64 = bars.iter().map(|b| b.compressed).sum();
            let title = format!(
                "{}: stored feature maps before and after, overall {:.2}x",
                inv_before.arch,
                original as f64 / compressed as f64
            );
            fs::write(&a.out, render_svg(&title, &bars, ceiling)).map_err(|e| Error::io(&a.out, e))?;
            let _ = writeln!(out, "original_elements,{original}\ncompressed_elements,{compressed}");
            Ok(())
        }
    }
}
