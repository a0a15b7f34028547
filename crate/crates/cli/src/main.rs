use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vmas::metrics::REFERENCE_K;
use vmas::neural::Arch;
use vmas::pipeline::OutlierMode;
use vmas::report::{parse_published, replicate, replication_table};
use vmas::simgen::LineSpec;
use vmas::stages::{self, RunConfig, StageError};

/// Production-line action-duration analysis: label anomalies, train forecasters, score them.
#[derive(Parser, Debug)]
#[command(name = "vmas", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding every artifact of the run.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Seed for generation, shuffling and initialization.
    #[arg(long, global = true, env = "VMAS_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic cycle-time and error-report logs with ground truth.
    Generate {
        /// Line description (TOML, or JSON with a .json extension).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of sequences.
        #[arg(long)]
        n: Option<usize>,
        /// Same as --work-dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Pair start/end events into sequences.
    Ingest {
        #[arg(long)]
        cycle_times: Option<PathBuf>,
        #[arg(long)]
        error_reports: Option<PathBuf>,
        /// JSON list of superordinate action ids to drop.
        #[arg(long)]
        hierarchy: Option<PathBuf>,
    },
    /// Fit duration distributions and label every sequence.
    Label {
        /// JSON list of expected action timings.
        #[arg(long)]
        actions: Option<PathBuf>,
        #[arg(long)]
        global_mult: Option<f64>,
    },
    /// Build normalized train/test windows.
    Prep {
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long, value_enum)]
        outlier_mode: Option<OutlierArg>,
        /// Keep sequences labelled misc.
        #[arg(long)]
        keep_misc: bool,
        /// Let windows cross sequence boundaries.
        #[arg(long)]
        no_separate: bool,
        /// Fit normalization on all rows rather than the training split.
        #[arg(long)]
        legacy_norm: bool,
        #[arg(long)]
        split_fraction: Option<f64>,
    },
    /// Train one model on the prepared windows.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a trained model on the test windows.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        tau: Option<f64>,
        /// Relative F1 threshold above the nominal duration.
        #[arg(long)]
        b: Option<f64>,
        /// Fixed RMSE normalizer; estimated from the data when omitted.
        #[arg(long)]
        k: Option<f64>,
    },
    /// Summarize every evaluated model, or recompute scores from a published table.
    Report {
        /// CSV `model,config,rmse,f1,tarmse,f1_mean,cta_percent` with space-separated step lists.
        #[arg(long)]
        replicate_table2: Option<PathBuf>,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        /// Exit with status 2 when any recomputed score misses its published value.
        #[arg(long)]
        strict: bool,
    },
    /// Run every stage in order.
    Run,
}

#[derive(Args, Debug, Default)]
struct WindowArgs {
    /// Named window configuration: 5-2, 5-5, 5-7, 7-5 or 7-7.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    n_back: Option<usize>,
    #[arg(long)]
    m_fwd: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchArg {
    Gru,
    Lstm,
    Transformer,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Gru => Arch::Gru,
            ArchArg::Lstm => Arch::Lstm,
            ArchArg::Transformer => Arch::Transformer,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutlierArg {
    None,
    Aa,
    Aps,
}

impl From<OutlierArg> for OutlierMode {
    fn from(o: OutlierArg) -> Self {
        match o {
            OutlierArg::None => OutlierMode::None,
            OutlierArg::Aa => OutlierMode::Aa,
            OutlierArg::Aps => OutlierMode::Aps,
        }
    }
}

/// Failure that maps to exit status 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Failure that maps to exit status 2 without an error message of its own.
#[derive(Debug)]
struct Mismatch;

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("recomputed scores differ from the published table")
    }
}

impl std::error::Error for Mismatch {}

fn apply_window(cfg: &mut RunConfig, w: &WindowArgs) {
    if let Some(p) = &w.preset {
        cfg.preset = Some(p.clone());
    }
    if let Some(n) = w.n_back {
        cfg.preset = None;
        cfg.pipeline.n_back = n;
    }
    if let Some(m) = w.m_fwd {
        cfg.preset = None;
        cfg.pipeline.m_fwd = m;
    }
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) {
    if let Some(a) = m.arch {
        cfg.model.arch = a.into();
    }
    apply_window(cfg, &m.window);
}

fn load_line_spec(path: &Path) -> Result<LineSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?
    };
    Ok(parsed)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn diagnostic_line(level: &str, value: serde_json::Value) {
    let mut line = serde_json::json!({ "level": level });
    if let (Some(obj), serde_json::Value::Object(extra)) = (line.as_object_mut(), value) {
        obj.extend(extra);
    }
    eprintln!("{line}");
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.work_dir {
        cfg.work_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Generate { spec, n, out_dir } => {
            if let Some(p) = spec {
                cfg.line = load_line_spec(p)?;
            }
            if let Some(n) = n {
                cfg.n_sequences = *n;
            }
            if let Some(d) = out_dir {
                cfg.work_dir = d.clone();
            }
        }
        Command::Ingest { cycle_times, error_reports, hierarchy } => {
            cfg.inputs.cycle_times = cycle_times.clone().or(cfg.inputs.cycle_times);
            cfg.inputs.error_reports = error_reports.clone().or(cfg.inputs.error_reports);
            cfg.inputs.hierarchy = hierarchy.clone().or(cfg.inputs.hierarchy);
        }
        Command::Label { actions, global_mult } => {
            cfg.inputs.actions = actions.clone().or(cfg.inputs.actions);
            if let Some(g) = global_mult {
                cfg.pipeline.global_mult = *g;
            }
        }
        Command::Prep { window, outlier_mode, keep_misc, no_separate, legacy_norm, split_fraction } => {
            apply_window(&mut cfg, window);
            if let Some(o) = outlier_mode {
                cfg.pipeline.outlier_mode = (*o).into();
            }
            if *keep_misc {
                cfg.pipeline.drop_misc = false;
            }
            if *no_separate {
                cfg.pipeline.separate = false;
            }
            if *legacy_norm {
                cfg.pipeline.legacy_norm = true;
            }
            if let Some(f) = split_fraction {
                cfg.pipeline.split_fraction = *f;
            }
        }
        Command::Train { model, epochs, batch_size, lr } => {
            apply_model(&mut cfg, model);
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = *b;
            }
            if let Some(lr) = lr {
                cfg.train.learning_rate = *lr;
            }
        }
        Command::Eval { model, tau, b, k } => {
            apply_model(&mut cfg, model);
            if let Some(t) = tau {
                cfg.metrics.tau = *t;
            }
            if let Some(b) = b {
                cfg.metrics.b = *b;
            }
            if let Some(k) = k {
                cfg.metrics.k = Some(*k);
            }
        }
        Command::Report { k, tau, .. } => {
            if let Some(t) = tau {
                cfg.metrics.tau = *t;
            }
            if let Some(k) = k {
                cfg.metrics.k = Some(*k);
            }
        }
        Command::Run => {}
    }
    Ok(cfg.resolved()?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    match &cli.command {
        Command::Generate { .. } => print_json(&stages::run_generate(&cfg)?)?,
        Command::Ingest { .. } => {
            let summary = stages::run_ingest(&cfg)?;
            for d in &summary.diagnostics {
                diagnostic_line("warning", serde_json::to_value(d)?);
            }
            print_json(&serde_json::json!({
                "events": summary.events,
                "tuples": summary.tuples,
                "sequences": summary.sequences,
                "error_reports": summary.error_reports,
                "diagnostics": summary.diagnostics.len(),
            }))?;
        }
        Command::Label { .. } => print_json(&stages::run_label(&cfg)?)?,
        Command::Prep { .. } => {
            let prep = stages::run_prep(&cfg)?;
            for d in &prep.diagnostics {
                diagnostic_line("warning", serde_json::json!({ "stage": "prep", "detail": d }));
            }
            print_json(&prep)?;
        }
        Command::Train { .. } => print_json(&stages::run_train(&cfg)?)?,
        Command::Eval { .. } => print_json(&stages::run_eval(&cfg)?)?,
        Command::Report { replicate_table2: Some(path), strict, .. } => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let rows = parse_published(&text).map_err(StageError::from)?;
            let k = cfg.metrics.k.unwrap_or(REFERENCE_K);
            let results = replicate(&rows, k, cfg.metrics.tau).map_err(StageError::from)?;
            print!("{}", replication_table(&results));
            for r in results.iter().filter(|r| !r.tarmse_ok || !r.cta_ok) {
                diagnostic_line("warning", serde_json::json!({ "stage": "report", "mismatch": r }));
            }
            if *strict && results.iter().any(|r| !r.tarmse_ok || !r.cta_ok) {
                return Err(Mismatch.into());
            }
        }
        Command::Report { .. } => {
            stages::run_report(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.path(stages::REPORT_TXT))?);
        }
        Command::Run => {
            stages::run_all(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.path(stages::REPORT_TXT))?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<StageError>() {
        Some(e) if e.is_usage() => 1,
        _ => 2,
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str().to_ascii_lowercase(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            if err.downcast_ref::<Mismatch>().is_none() {
                diagnostic_line("error", serde_json::json!({ "error": format!("{err:#}") }));
            }
            log::debug!("exit status {code}");
            ExitCode::from(code)
        }
    }
}
