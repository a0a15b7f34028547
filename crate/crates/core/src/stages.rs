//! File-based stages of a full run.
//!
//! Every stage reads its predecessor's artifacts from the run directory and
//! writes its own there, so any stage can be rerun in isolation and two runs
//! with the same [`RunConfig`] leave byte-identical files behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{classify_dataset, ClassificationReport, ClassifyConfig, ClassifyError};
use crate::domain::{ActionKey, ActionSequence, ActionSpec, ErrorReport, SequenceClass};
use crate::ingest::{
    self, assemble_sequences, pair_events, parse_cycle_times, parse_error_reports, strip_hierarchy, Diagnostic,
    HierarchySpec, IngestError,
};
use crate::metrics::{evaluate, estimate_k, tau_sweep, cta_svg, Crossover, EvalParams, F1Aggregation, MetricsError};
use crate::neural::{self, holdout_split, predict_dataset, Checkpoint, Model, ModelConfig, NeuralError, TrainConfig};
use crate::pipeline::{self, pairs_from_jsonl, pairs_to_jsonl, NormalizationParams, PipelineConfig, PipelineError};
use crate::report::{summary_table, EvaluatedModel, ReportError};
use crate::simgen::{self, ClassifierScore, GroundTruth, LineSpec, MatchScore, SimError};

pub const CYCLE_TIMES: &str = "cycle_times.csv";
pub const ERROR_REPORTS: &str = "error_reports.csv";
pub const TRUTH: &str = "truth.jsonl";
pub const ACTIONS: &str = "actions.json";
pub const SEQUENCES: &str = "sequences.jsonl";
pub const REPORTS: &str = "reports.jsonl";
pub const INGEST_DIAGNOSTICS: &str = "ingest_diagnostics.jsonl";
pub const LABELS: &str = "labels.jsonl";
pub const CLASSIFICATION: &str = "classification.json";
pub const LABEL_SUMMARY: &str = "label_summary.json";
pub const TRAIN_PAIRS: &str = "train.jsonl";
pub const TEST_PAIRS: &str = "test.jsonl";
pub const PREP: &str = "prep.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const CTA_SVG: &str = "cta.svg";

#[derive(Debug, Error)]
pub enum StageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl StageError {
    /// Errors caused by the invocation rather than by the data.
    pub fn is_usage(&self) -> bool {
        matches!(self, StageError::Config(_))
            || matches!(self, StageError::Sim(SimError::InvalidSpec(_)))
            || matches!(self, StageError::Neural(NeuralError::InvalidConfig(_)))
            || matches!(self, StageError::Pipeline(PipelineError::UnknownPreset(_) | PipelineError::InvalidWindow(..) | PipelineError::InvalidFraction(_)))
    }
}

/// External input files; unset entries fall back to the run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Inputs {
    pub cycle_times: Option<PathBuf>,
    pub error_reports: Option<PathBuf>,
    /// JSON list of expected action timings.
    pub actions: Option<PathBuf>,
    /// JSON object `{"superordinate_ids": [...]}`.
    pub hierarchy: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub tau: f64,
    pub b: f64,
    /// Fixed normalizer; estimated from the labelled durations when unset.
    pub k: Option<f64>,
    pub f1_aggregation: F1Aggregation,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let d = EvalParams::default();
        Self { tau: d.tau, b: d.b, k: None, f1_aggregation: d.f1_aggregation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    pub n_sequences: usize,
    /// Named window configuration such as `5-2`; overrides `pipeline.n_back/m_fwd`.
    pub preset: Option<String>,
    pub inputs: Inputs,
    pub line: LineSpec,
    pub classify: ClassifyConfig,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            work_dir: PathBuf::from("vmas-run"),
            n_sequences: 5000,
            preset: None,
            inputs: Inputs::default(),
            line: LineSpec::default(),
            classify: ClassifyConfig::default(),
            pipeline: PipelineConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, StageError> {
        toml::from_str(text).map_err(|e| StageError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, StageError> {
        Self::from_toml(&read(path)?)
    }

    /// Propagates the seed, preset, window sizes and shared classification settings.
    pub fn resolved(&self) -> Result<Self, StageError> {
        let mut cfg = self.clone();
        cfg.line.seed = cfg.seed;
        cfg.model.seed = cfg.seed;
        if let Some(p) = &cfg.preset {
            cfg.pipeline = cfg.pipeline.with_preset(p)?;
        }
        cfg.model.n_back = cfg.pipeline.n_back;
        cfg.model.m_fwd = cfg.pipeline.m_fwd;
        cfg.classify.global_mult = cfg.pipeline.global_mult;
        cfg.classify.boundary_action = Some(cfg.pipeline.boundary_action.clone());
        if cfg.n_sequences == 0 {
            return Err(StageError::Config("n_sequences must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }

    /// `arch-n-m`, used to name checkpoints and metric files.
    pub fn model_tag(&self) -> String {
        format!("{}-{}-{}", self.model.arch, self.pipeline.n_back, self.pipeline.m_fwd)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path(&format!("checkpoint-{}.json", self.model_tag()))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path(&format!("metrics-{}.json", self.model_tag()))
    }
}

fn read(path: &Path) -> Result<String, StageError> {
    fs::read_to_string(path).map_err(|source| StageError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, contents: &str) -> Result<(), StageError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| StageError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| StageError::Io { path: path.to_path_buf(), source })
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> StageError {
    StageError::Format { path: path.to_path_buf(), detail: e.to_string() }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StageError> {
    serde_json::from_str(&read(path)?).map_err(|e| format_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    text.push('\n');
    write(path, &text)
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("artifact serializes") + "\n").collect()
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StageError> {
    read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| format_err(path, e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub sequences: usize,
    pub error_reports: usize,
    pub classes: BTreeMap<SequenceClass, usize>,
}

/// Writes synthetic logs, ground truth and expected action timings.
pub fn run_generate(cfg: &RunConfig) -> Result<GenerateSummary, StageError> {
    let g = simgen::generate(&cfg.line, cfg.n_sequences)?;
    write(&cfg.path(CYCLE_TIMES), &g.cycle_csv())?;
    write(&cfg.path(ERROR_REPORTS), &g.error_csv())?;
    write(&cfg.path(TRUTH), &g.truth.to_jsonl())?;
    write_json(&cfg.path(ACTIONS), &g.specs)?;
    let mut classes = BTreeMap::new();
    for s in &g.truth.sequences {
        *classes.entry(s.class).or_insert(0) += 1;
    }
    Ok(GenerateSummary { sequences: g.sequences.len(), error_reports: g.reports.len(), classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub events: usize,
    pub tuples: usize,
    pub sequences: usize,
    pub error_reports: usize,
    pub diagnostics: Vec<Diagnostic>,
}

pub fn run_ingest(cfg: &RunConfig) -> Result<IngestSummary, StageError> {
    let cycle_path = cfg.inputs.cycle_times.clone().unwrap_or_else(|| cfg.path(CYCLE_TIMES));
    let error_path = cfg.inputs.error_reports.clone().unwrap_or_else(|| cfg.path(ERROR_REPORTS));
    let (events, mut diagnostics) = parse_cycle_times(read(&cycle_path)?.as_bytes())?;
    let (reports, report_diags) = parse_error_reports(read(&error_path)?.as_bytes())?;
    let (tuples, pair_diags) = pair_events(&events);
    diagnostics.extend(pair_diags);
    diagnostics.extend(report_diags);
    let n_tuples = tuples.len();
    let mut seqs = assemble_sequences(tuples, &cfg.pipeline.boundary_action);
    if let Some(h) = &cfg.inputs.hierarchy {
        let spec: HierarchySpec = read_json(h)?;
        seqs = strip_hierarchy(seqs, &spec, &cfg.pipeline.boundary_action);
    }
    write(&cfg.path(SEQUENCES), &ingest::sequences_to_jsonl(&seqs))?;
    write(&cfg.path(REPORTS), &jsonl(&reports))?;
    write(&cfg.path(INGEST_DIAGNOSTICS), &ingest::diagnostics_to_jsonl(&diagnostics))?;
    Ok(IngestSummary {
        events: events.len(),
        tuples: n_tuples,
        sequences: seqs.len(),
        error_reports: reports.len(),
        diagnostics,
    })
}

fn load_sequences(cfg: &RunConfig) -> Result<Vec<ActionSequence>, StageError> {
    let path = cfg.path(SEQUENCES);
    ingest::sequences_from_jsonl(&read(&path)?).map_err(|e| format_err(&path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub sequences: usize,
    pub counts: BTreeMap<SequenceClass, usize>,
    pub fractions: BTreeMap<SequenceClass, f64>,
    pub outlier_removed_count: usize,
    /// Present when ground truth for the same sequences is available.
    pub truth_score: Option<ClassifierScore>,
    pub source_matching: Option<MatchScore>,
}

pub fn run_label(cfg: &RunConfig) -> Result<LabelSummary, StageError> {
    let seqs = load_sequences(cfg)?;
    let reports: Vec<ErrorReport> = read_jsonl(&cfg.path(REPORTS))?;
    let actions_path = cfg.inputs.actions.clone().or_else(|| Some(cfg.path(ACTIONS)).filter(|p| p.exists()));
    let specs: Option<BTreeMap<ActionKey, ActionSpec>> = match actions_path {
        Some(p) => Some(read_json::<Vec<ActionSpec>>(&p)?.into_iter().map(|s| (s.key.clone(), s)).collect()),
        None => None,
    };
    let report = classify_dataset(&seqs, &reports, specs.as_ref(), &cfg.classify)?;
    write(&cfg.path(LABELS), &jsonl(&report.labels))?;
    write_json(&cfg.path(CLASSIFICATION), &report)?;

    let (truth_score, source_matching) = if cfg.path(TRUTH).exists() {
        let truth = GroundTruth::from_jsonl(&read(&cfg.path(TRUTH))?).map_err(|e| format_err(&cfg.path(TRUTH), e))?;
        match simgen::score_classifier(&truth, &report) {
            Ok(score) => (Some(score), Some(simgen::score_source_matching(&truth, &report))),
            Err(_) => (None, None),
        }
    } else {
        (None, None)
    };
    let summary = LabelSummary {
        sequences: report.labels.len(),
        counts: SequenceClass::ALL.iter().map(|c| (*c, report.count(*c))).collect(),
        fractions: report.fractions.clone(),
        outlier_removed_count: report.outlier_removed_count,
        truth_score,
        source_matching,
    };
    write_json(&cfg.path(LABEL_SUMMARY), &summary)?;
    Ok(summary)
}

/// Everything downstream stages need besides the pairs themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepArtifact {
    pub config: PipelineConfig,
    pub norm: NormalizationParams,
    pub action_codes: BTreeMap<String, u32>,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub removed_count: usize,
    pub diagnostics: Vec<String>,
}

pub fn run_prep(cfg: &RunConfig) -> Result<PrepArtifact, StageError> {
    let seqs = load_sequences(cfg)?;
    let report: ClassificationReport = read_json(&cfg.path(CLASSIFICATION))?;
    let data = pipeline::prepare(&seqs, &report, &cfg.pipeline)?;
    write(&cfg.path(TRAIN_PAIRS), &pairs_to_jsonl(&data.train))?;
    write(&cfg.path(TEST_PAIRS), &pairs_to_jsonl(&data.test))?;
    let artifact = PrepArtifact {
        config: cfg.pipeline.clone(),
        norm: data.norm,
        action_codes: data.action_codes,
        train_pairs: data.train.len(),
        test_pairs: data.test.len(),
        removed_count: data.removed_count,
        diagnostics: data.diagnostics,
    };
    write_json(&cfg.path(PREP), &artifact)?;
    Ok(artifact)
}

fn load_pairs(path: &Path) -> Result<Vec<pipeline::WindowedPair>, StageError> {
    pairs_from_jsonl(&read(path)?).map_err(|e| format_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: String,
    pub parameters: usize,
    pub epochs: usize,
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary, StageError> {
    let prep: PrepArtifact = read_json(&cfg.path(PREP))?;
    let pairs = load_pairs(&cfg.path(TRAIN_PAIRS))?;
    let (train, val) = holdout_split(&pairs, cfg.train.validation_fraction);
    let model = Model::new(cfg.model.clone())?;
    let parameters = model.parameter_count();
    let checkpoint = match neural::train(model, train, val, &cfg.train, Some(prep.norm)) {
        Ok(c) => c,
        Err(NeuralError::NonFiniteLoss { epoch, checkpoint }) => {
            write(&cfg.checkpoint_path(), &checkpoint.to_json()?)?;
            return Err(NeuralError::NonFiniteLoss { epoch, checkpoint }.into());
        }
        Err(e) => return Err(e.into()),
    };
    write(&cfg.checkpoint_path(), &checkpoint.to_json()?)?;
    let last = checkpoint.history.last().expect("at least one epoch");
    Ok(TrainSummary {
        model: cfg.model_tag(),
        parameters,
        epochs: checkpoint.history.len(),
        train_pairs: train.len(),
        validation_pairs: val.len(),
        final_train_loss: last.train_loss,
        final_val_loss: last.val_loss,
        checkpoint: cfg.checkpoint_path(),
    })
}

/// Durations per action at or below that action's expected maximum.
pub fn durations_within_max(seqs: &[ActionSequence], report: &ClassificationReport, boundary: &str) -> BTreeMap<String, Vec<f64>> {
    let d_max = report.d_max_by_action();
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in seqs.iter().flat_map(|s| &s.tuples) {
        if t.action_id() == boundary {
            continue;
        }
        if d_max.get(t.action_id()).is_some_and(|m| t.duration <= *m) {
            out.entry(t.action_id().to_string()).or_default().push(t.duration);
        }
    }
    out
}

pub fn run_eval(cfg: &RunConfig) -> Result<EvaluatedModel, StageError> {
    let checkpoint = Checkpoint::from_json(&read(&cfg.checkpoint_path())?)?;
    let test = load_pairs(&cfg.path(TEST_PAIRS))?;
    let report: ClassificationReport = read_json(&cfg.path(CLASSIFICATION))?;
    let k = match cfg.metrics.k {
        Some(k) => k,
        None => {
            let seqs = load_sequences(cfg)?;
            estimate_k(&durations_within_max(&seqs, &report, &cfg.pipeline.boundary_action))?.k
        }
    };
    let preds = predict_dataset(&checkpoint, &test)?;
    let norm = checkpoint.norm.as_ref().ok_or(NeuralError::MissingNormalization)?;
    let targets: Vec<Vec<f64>> = test.iter().map(|p| p.y.iter().map(|&v| norm.denormalize_duration(v)).collect()).collect();
    let actions: Vec<Vec<String>> = test.iter().map(|p| p.target_actions.clone()).collect();
    let params = EvalParams { tau: cfg.metrics.tau, b: cfg.metrics.b, k, f1_aggregation: cfg.metrics.f1_aggregation };
    let metrics = evaluate(&preds.seconds, &targets, &actions, &report.nominal_by_action(), &report.globalmax_by_action(), &params)?;
    let evaluated = EvaluatedModel {
        name: format!("{} {}-{}", cfg.model.arch, cfg.pipeline.n_back, cfg.pipeline.m_fwd),
        arch: cfg.model.arch.to_string(),
        config: format!("{}-{}", cfg.pipeline.n_back, cfg.pipeline.m_fwd),
        metrics,
    };
    write_json(&cfg.metrics_path(), &evaluated)?;
    Ok(evaluated)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub models: Vec<EvaluatedModel>,
    pub crossovers: Vec<Crossover>,
}

/// Collects every metrics file in the run directory into one table.
pub fn run_report(cfg: &RunConfig) -> Result<ReportSummary, StageError> {
    let dir = &cfg.work_dir;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| StageError::Io { path: dir.clone(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("metrics-") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(StageError::Format { path: dir.clone(), detail: "no metrics files; run eval first".into() });
    }
    let models = files.iter().map(|p| read_json(p)).collect::<Result<Vec<EvaluatedModel>, _>>()?;
    let scores: Vec<_> = models.iter().map(EvaluatedModel::score).collect();
    let summary = ReportSummary { crossovers: tau_sweep(&scores), models };
    write_json(&cfg.path(REPORT_JSON), &summary)?;
    let mut text = summary_table(&summary.models);
    for c in &summary.crossovers {
        let tau = c.tau.map_or("none".to_string(), |t| format!("{t:.3}"));
        text.push_str(&format!("crossover {} / {}: tau = {tau}\n", c.first, c.second));
    }
    write(&cfg.path(REPORT_TXT), &text)?;
    write(&cfg.path(CTA_SVG), &cta_svg(&scores, 100))?;
    Ok(summary)
}

/// Runs every stage in order; generation is skipped when external logs are configured.
pub fn run_all(cfg: &RunConfig) -> Result<ReportSummary, StageError> {
    if cfg.inputs.cycle_times.is_none() {
        run_generate(cfg)?;
    }
    run_ingest(cfg)?;
    run_label(cfg)?;
    run_prep(cfg)?;
    run_train(cfg)?;
    run_eval(cfg)?;
    run_report(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig { work_dir: dir.to_path_buf(), n_sequences: 120, ..RunConfig::default() };
        cfg.model.rnn = neural::RnnConfig { nodes_per_layer: 8, layers: 1, dropout: 0.0 };
        cfg.train = TrainConfig { epochs: 2, batch_size: 32, ..TrainConfig::default() };
        cfg.resolved().unwrap()
    }

    #[test]
    fn toml_overrides_and_resolution() {
        let cfg = RunConfig::from_toml(
            "seed = 7\npreset = \"7-5\"\n[pipeline]\nglobal_mult = 12.0\n[model]\narch = \"lstm\"\n",
        )
        .unwrap()
        .resolved()
        .unwrap();
        assert_eq!((cfg.line.seed, cfg.model.seed), (7, 7));
        assert_eq!((cfg.model.n_back, cfg.model.m_fwd), (7, 5));
        assert_eq!(cfg.classify.global_mult, 12.0);
        assert_eq!(cfg.model_tag(), "lstm-7-5");
        assert!(RunConfig::from_toml("seed = \"x\"").unwrap_err().is_usage());
        let bad = RunConfig { preset: Some("9-9".into()), ..RunConfig::default() };
        assert!(bad.resolved().unwrap_err().is_usage());
    }

    #[test]
    fn full_run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let summary = run_all(&cfg).unwrap();
        assert_eq!(summary.models.len(), 1);
        for name in [CYCLE_TIMES, ERROR_REPORTS, TRUTH, ACTIONS, SEQUENCES, REPORTS, LABELS, CLASSIFICATION, TRAIN_PAIRS, TEST_PAIRS, PREP, REPORT_JSON, REPORT_TXT, CTA_SVG] {
            assert!(cfg.path(name).exists(), "{name}");
        }
        assert!(cfg.checkpoint_path().exists() && cfg.metrics_path().exists());
        let label: LabelSummary = read_json(&cfg.path(LABEL_SUMMARY)).unwrap();
        assert!((label.fractions.values().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(label.fractions.len(), 5);
    }

    #[test]
    fn tau_zero_reports_f1() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.metrics.tau = 0.0;
        run_all(&cfg).unwrap();
        let m: EvaluatedModel = read_json(&cfg.metrics_path()).unwrap();
        assert_eq!(m.metrics.cta, m.metrics.f1_mean);
    }

    #[test]
    fn missing_predecessor_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        assert!(matches!(run_label(&cfg), Err(StageError::Io { .. })));
        assert!(!run_label(&cfg).unwrap_err().is_usage());
    }
}
