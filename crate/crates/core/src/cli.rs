//! Command-line interface.

use std::fs::{self, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::adapt::{adaptation_step, AdaptLog};
use crate::bundle::{sha256_hex, ModelBundle};
use crate::config::Config;
use crate::dataset::{build_feedback_set, FeedbackDatum, SafetyAssessmentInput};
use crate::dynamics::{
    load_batch, rollout_batch, save_batch, ClosedLoopSystem, EpisodeBatch, SystemConfig, Variant,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, run_episode, Assessor};
use crate::json;
use crate::metric::distance_matrix;
use crate::pipeline::initialize;

#[derive(Debug, Parser)]
#[command(name = "saveri", version, about = "Learned safety assessment for closed-loop tracking systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Selects a system and, for the real variant, how large its gap is.
#[derive(Debug, Clone, clap::Args)]
pub struct SystemArgs {
    /// System name (point-mass or cart-pole).
    #[arg(long)]
    pub system: String,
    #[arg(long, default_value = "real")]
    pub variant: String,
    /// Multiplier on the real variant's parameter offsets; 0 removes the gap.
    #[arg(long, default_value_t = 1.0)]
    pub gap_scale: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out episodes and write them as a batch file.
    Gen {
        #[arg(long)]
        system: String,
        #[arg(long, default_value = "nominal")]
        variant: String,
        #[arg(long, default_value_t = 1.0)]
        gap_scale: f64,
        #[arg(long)]
        episodes: usize,
        /// Planning horizon in steps.
        #[arg(long, default_value_t = 60)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a model bundle from nominal episodes.
    Init {
        #[arg(long)]
        data: PathBuf,
        /// Hyperparameter file; defaults apply to anything it leaves out.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a bundle with real-system rollouts.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long)]
        episodes: usize,
        /// Feedback data per adaptation step (default from config).
        #[arg(long)]
        k_u: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON-lines log; appended to. Defaults to adapt.jsonl in the model.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Assess one input given as JSON {"state": [..], "desired": [[..], ..]}.
    Assess {
        #[arg(long)]
        model: PathBuf,
        /// Input file, or `-` for standard input.
        #[arg(long)]
        input: PathBuf,
    },
    /// Closed-loop episodes with receding-horizon assessment and a recovery trigger.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON-lines log with one trace per episode.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Planning-phase prediction accuracy on fresh episodes.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a model artifact in a plot-ready format.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        what: ExportWhat,
        #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportWhat {
    Grid,
    Embedding,
    Distances,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Csv,
    Bin,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = json::to_exact_string(value)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn system_config(name: &str, variant: &str, gap_scale: f64) -> Result<SystemConfig> {
    let variant: Variant = variant.parse()?;
    if !(gap_scale >= 0.0) || !gap_scale.is_finite() {
        return Err(Error::invalid("gap scale must be a non-negative number"));
    }
    let mut cfg = SystemConfig::new(name, variant)?;
    cfg.gap.scale = gap_scale;
    Ok(cfg)
}

/// The deployed system for a bundle: the bundle's own nominal system with the
/// requested variant and gap.
fn deployed_system(bundle: &ModelBundle, args: &SystemArgs) -> Result<ClosedLoopSystem> {
    let requested = system_config(&args.system, &args.variant, args.gap_scale)?;
    bundle.check_system(requested.kind)?;
    let mut cfg = bundle.meta.system.with_variant(requested.variant);
    cfg.gap.scale = requested.gap.scale;
    ClosedLoopSystem::from_config(&cfg)
}

fn nominal_system(bundle: &ModelBundle) -> Result<ClosedLoopSystem> {
    ClosedLoopSystem::from_config(&bundle.meta.system.with_variant(Variant::Nominal))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(Error::io(
                path,
                io::Error::new(io::ErrorKind::NotFound, "parent directory does not exist"),
            ));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct GenSummary {
    episodes: usize,
    safe: usize,
    r#unsafe: usize,
    out: String,
}

fn cmd_gen(
    system: &str,
    variant: &str,
    gap_scale: f64,
    episodes: usize,
    horizon: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let cfg = system_config(system, variant, gap_scale)?;
    let sys = ClosedLoopSystem::from_config(&cfg)?;
    if episodes == 0 {
        return Err(Error::invalid("--episodes must be at least 1"));
    }
    ensure_parent(out)?;
    let batch = EpisodeBatch::generate(&sys, horizon, seed, episodes)?;
    save_batch(&batch, out)?;
    let safe = batch.safe_count();
    print_json(&GenSummary {
        episodes,
        safe,
        r#unsafe: episodes - safe,
        out: out.display().to_string(),
    })
}

pub fn cmd_init(data: &Path, config: Option<&Path>, out: &Path) -> Result<ModelBundle> {
    let cfg = match config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let bytes = fs::read(data).map_err(|e| Error::io(data, e))?;
    let batch = load_batch(data)?;
    if batch.config.system.variant != Variant::Nominal {
        log::warn!("building a model from real-variant episodes");
    }
    let init = initialize(&batch, &cfg)?;
    let bundle = ModelBundle::from_init(
        init,
        cfg,
        batch.config.system.clone(),
        batch.config.horizon,
        sha256_hex(&bytes),
    )?;
    bundle.save(out)?;
    Ok(bundle)
}

/// Rolls out `episodes` real episodes and folds their feedback into the
/// bundle `k_u` data at a time; the last partial batch is folded in too.
pub fn adapt_bundle(
    bundle: &mut ModelBundle,
    real: &ClosedLoopSystem,
    episodes: usize,
    k_u: usize,
    seed: u64,
) -> Result<Vec<AdaptLog>> {
    if k_u == 0 {
        return Err(Error::invalid("--k-u must be at least 1"));
    }
    if episodes == 0 {
        return Ok(Vec::new());
    }
    let nominal = nominal_system(bundle)?;
    let cfg = bundle.config.clone();
    let rollouts = rollout_batch(real, bundle.meta.episode_steps, seed, episodes)?;
    let feedback: Vec<Vec<FeedbackDatum>> = rollouts
        .par_iter()
        .map(|ep| build_feedback_set(ep, &nominal, cfg.horizon, cfg.gamma, cfg.feedback_stride))
        .collect::<Result<_>>()?;
    let all: Vec<FeedbackDatum> = feedback.into_iter().flatten().collect();
    let mut adapt_cfg = cfg.adapt.clone();
    adapt_cfg.k_u = k_u;
    let mut logs = Vec::new();
    for batch in all.chunks(k_u) {
        let step = bundle.meta.adapt_steps + 1;
        if let Some(log) = adaptation_step(&mut bundle.grid, &mut bundle.gp, &bundle.net, batch, &adapt_cfg, step)? {
            info!("adaptation step {step}: n_f {}, {} cells moved", log.n_f, log.deltas.len());
            bundle.meta.adapt_steps = step;
            logs.push(log);
        }
    }
    bundle.meta.feedback_episodes += episodes;
    Ok(logs)
}

#[derive(Serialize)]
struct AdaptSummary {
    episodes: usize,
    steps: usize,
    n_f: usize,
    populated_cells: usize,
}

fn cmd_adapt(
    model: &Path,
    system: &SystemArgs,
    episodes: usize,
    k_u: Option<usize>,
    seed: u64,
    log: Option<&Path>,
) -> Result<()> {
    let mut bundle = ModelBundle::load(model)?;
    let real = deployed_system(&bundle, system)?;
    let k_u = k_u.unwrap_or(bundle.config.adapt.k_u);
    let logs = adapt_bundle(&mut bundle, &real, episodes, k_u, seed)?;
    if episodes > 0 {
        bundle.save(model)?;
        let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| model.join("adapt.jsonl"));
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        for entry in &logs {
            writeln!(file, "{}", json::to_exact_string(entry)?).map_err(|e| Error::io(&log_path, e))?;
        }
    }
    print_json(&AdaptSummary {
        episodes,
        steps: logs.len(),
        n_f: bundle.grid.n_f(),
        populated_cells: bundle.grid.populated_cells(),
    })
}

fn cmd_assess(model: &Path, input: &Path) -> Result<()> {
    let bundle = ModelBundle::load(model)?;
    let text = if input.as_os_str() == "-" {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s).map_err(|e| Error::io("<stdin>", e))?;
        s
    } else {
        fs::read_to_string(input).map_err(|e| Error::io(input, e))?
    };
    let x: SafetyAssessmentInput = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: input.to_path_buf(),
        source,
    })?;
    if !x.is_finite() {
        return Err(Error::invalid("input contains non-finite values"));
    }
    if x.desired.len() != bundle.config.horizon {
        return Err(Error::invalid(format!(
            "input has {} reference points, model uses {}",
            x.desired.len(),
            bundle.config.horizon
        )));
    }
    let a = bundle.grid.assess(&bundle.net, &x)?;
    print_json(&a)
}

#[derive(Serialize)]
struct RunSummary {
    episodes: usize,
    threshold: f64,
    triggered: usize,
    r#unsafe: usize,
}

fn cmd_run(
    model: &Path,
    system: &SystemArgs,
    threshold: Option<f64>,
    episodes: usize,
    seed: u64,
    log: Option<&Path>,
) -> Result<()> {
    let bundle = ModelBundle::load(model)?;
    let sys = deployed_system(&bundle, system)?;
    let threshold = threshold.unwrap_or(bundle.config.threshold);
    let assessor = Assessor {
        net: &bundle.net,
        grid: &bundle.grid,
        horizon: bundle.config.horizon,
    };
    let mut lines = Vec::new();
    let mut triggered = 0;
    let mut unsafe_count = 0;
    // strictly sequential: each episode's trigger depends on its own past only
    for i in 0..episodes {
        let trace = run_episode(&assessor, &sys, bundle.meta.episode_steps, seed.wrapping_add(i as u64), threshold)?;
        triggered += trace.trigger.is_some() as usize;
        unsafe_count += !trace.safe as usize;
        lines.push(json::to_exact_string(&trace)?);
    }
    if let Some(path) = log {
        ensure_parent(path)?;
        let mut text = lines.join("\n");
        text.push('\n');
        json::write_bytes(path, text.as_bytes())?;
    }
    print_json(&RunSummary {
        episodes,
        threshold,
        triggered,
        r#unsafe: unsafe_count,
    })
}

fn cmd_eval(
    model: &Path,
    system: &SystemArgs,
    episodes: usize,
    threshold: Option<f64>,
    seed: u64,
    report_path: Option<&Path>,
) -> Result<()> {
    let bundle = ModelBundle::load(model)?;
    let sys = deployed_system(&bundle, system)?;
    let threshold = threshold.unwrap_or(bundle.config.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid("threshold must lie in [0, 1]"));
    }
    let assessor = Assessor {
        net: &bundle.net,
        grid: &bundle.grid,
        horizon: bundle.config.horizon,
    };
    let (mut report, _, _) = evaluate(&assessor, &sys, bundle.meta.episode_steps, episodes, seed, threshold)?;
    report.model_settings = serde_json::json!({
        "embedding": bundle.config.embedding,
        "network": bundle.config.network,
        "grid": bundle.config.grid,
        "adapt": bundle.config.adapt,
        "adapt_steps": bundle.meta.adapt_steps,
    });
    if let Some(path) = report_path {
        ensure_parent(path)?;
        json::write_pretty(path, &report)?;
    }
    print_json(&report)
}

fn cmd_export(model: &Path, what: ExportWhat, format: ExportFormat, out: &Path) -> Result<()> {
    let bundle = ModelBundle::load(model)?;
    ensure_parent(out)?;
    let mut buf = Vec::new();
    match (what, format) {
        (ExportWhat::Grid, ExportFormat::Csv) => bundle.grid.write_csv(&mut buf).map_err(|e| Error::io(out, e))?,
        (ExportWhat::Embedding, ExportFormat::Csv) => {
            writeln!(buf, "i,tsne_0,tsne_1,mapped_0,mapped_1,lambda,mu").expect("in-memory write");
            for (i, (t, m)) in bundle.archive.embedding.iter().zip(&bundle.grid.training).enumerate() {
                writeln!(buf, "{i},{},{},{},{},{},{}", t[0], t[1], m.y[0], m.y[1], m.lambda, m.mu)
                    .expect("in-memory write");
            }
        }
        (ExportWhat::Distances, format) => {
            let dist = distance_matrix(&bundle.training(), bundle.config.distance_weight)?;
            match format {
                ExportFormat::Bin => dist.write_binary(&mut buf).map_err(|e| Error::io(out, e))?,
                ExportFormat::Csv => {
                    for i in 0..dist.len() {
                        let row: Vec<String> = dist.row(i).iter().map(|v| v.to_string()).collect();
                        writeln!(buf, "{}", row.join(",")).expect("in-memory write");
                    }
                }
            }
        }
        (other, ExportFormat::Bin) => {
            return Err(Error::invalid(format!("{other:?} export is only available as csv")));
        }
    }
    json::write_bytes(out, &buf)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            system,
            variant,
            gap_scale,
            episodes,
            horizon,
            seed,
            out,
        } => cmd_gen(&system, &variant, gap_scale, episodes, horizon, seed, &out),
        Command::Init { data, config, out } => {
            let bundle = cmd_init(&data, config.as_deref(), &out)?;
            print_json(&bundle.meta.init)
        }
        Command::Adapt {
            model,
            system,
            episodes,
            k_u,
            seed,
            log,
        } => cmd_adapt(&model, &system, episodes, k_u, seed, log.as_deref()),
        Command::Assess { model, input } => cmd_assess(&model, &input),
        Command::Run {
            model,
            system,
            threshold,
            episodes,
            seed,
            log,
        } => cmd_run(&model, &system, threshold, episodes, seed, log.as_deref()),
        Command::Eval {
            model,
            system,
            episodes,
            threshold,
            seed,
            report,
        } => cmd_eval(&model, &system, episodes, threshold, seed, report.as_deref()),
        Command::Export {
            model,
            what,
            format,
            out,
        } => cmd_export(&model, what, format, &out),
    }
}
