//! Error classification.
//!
//! Per action, durations are truncated to whole seconds and histogrammed. A
//! Gaussian is fitted with its mean pinned to the histogram mode, so only the
//! standard deviation is estimated by maximum likelihood. A duration bin whose
//! relative frequency exceeds the fitted density at that duration is
//! significant. Significant tuples are split into source errors (a matching
//! error report lies inside the action interval at the same station) and
//! knock-on errors (no such report), and every sequence receives one class.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    ActionKey, ActionSequence, ActionSpec, ErrorReport, SequenceClass, SequenceLabel, SignificantTuple,
    TupleCause,
};

/// Default multiplier turning `d_max` into the global outlier threshold.
pub const DEFAULT_GLOBAL_MULT: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("no durations for {0}")]
    EmptyInput(String),
    #[error("at least two samples are needed to fit {key}, found {total}")]
    InsufficientData { key: String, total: u64 },
    #[error("no action spec for `{0}`")]
    MissingSpec(String),
    #[error("global multiplier must exceed 1, got {0}")]
    InvalidMultiplier(f64),
}

/// Counts of whole-second durations for one action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationHistogram {
    pub key: ActionKey,
    pub bins: BTreeMap<i64, u64>,
    pub total: u64,
}

impl DurationHistogram {
    pub fn from_bins(key: ActionKey, bins: BTreeMap<i64, u64>) -> Self {
        let total = bins.values().sum();
        Self { key, bins, total }
    }

    /// Most frequent bin; ties go to the shorter duration.
    pub fn mode(&self) -> Option<i64> {
        let mut best: Option<(i64, u64)> = None;
        for (&d, &c) in &self.bins {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((d, c));
            }
        }
        best.map(|(d, _)| d)
    }

    pub fn frequency(&self, bin: i64) -> f64 {
        self.bins.get(&bin).copied().unwrap_or(0) as f64 / self.total as f64
    }
}

/// Whole-second bin of a duration.
pub fn duration_bin(duration: f64) -> i64 {
    duration.floor() as i64
}

pub fn build_histogram<I>(key: ActionKey, durations: I) -> Result<DurationHistogram, ClassifyError>
where
    I: IntoIterator<Item = f64>,
{
    let mut bins = BTreeMap::new();
    for d in durations {
        *bins.entry(duration_bin(d)).or_insert(0) += 1;
    }
    if bins.is_empty() {
        return Err(ClassifyError::EmptyInput(key.to_string()));
    }
    Ok(DurationHistogram::from_bins(key, bins))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedGaussian {
    /// Pinned to the histogram mode.
    pub mu: f64,
    /// Maximum-likelihood deviation around `mu`. Zero when degenerate.
    pub sigma: f64,
    pub n: u64,
    /// Every sample sits in the mode bin.
    pub degenerate: bool,
}

impl FittedGaussian {
    pub fn density(&self, x: f64) -> f64 {
        normal_density(x, self.mu, self.sigma)
    }

    /// Gaussian log-likelihood of the histogram under `sigma`, with the mean fixed at `mu`.
    pub fn log_likelihood(hist: &DurationHistogram, mu: f64, sigma: f64) -> f64 {
        hist.bins
            .iter()
            .map(|(&d, &c)| c as f64 * normal_density(d as f64, mu, sigma).ln())
            .sum()
    }
}

/// Normal probability density.
pub fn normal_density(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Closed-form maximizer of the likelihood in sigma with mu fixed at the mode:
/// `sigma^2 = (1/N) * sum(count * (d - mu)^2)`.
pub fn fit_mle(hist: &DurationHistogram) -> Result<FittedGaussian, ClassifyError> {
    if hist.total < 2 {
        return Err(ClassifyError::InsufficientData {
            key: hist.key.to_string(),
            total: hist.total,
        });
    }
    let mu = hist.mode().expect("non-empty histogram") as f64;
    let sum_sq: f64 = hist
        .bins
        .iter()
        .map(|(&d, &c)| c as f64 * (d as f64 - mu).powi(2))
        .sum();
    let sigma = (sum_sq / hist.total as f64).sqrt();
    Ok(FittedGaussian { mu, sigma, n: hist.total, degenerate: sigma == 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub key: ActionKey,
    pub significant_durations: BTreeSet<i64>,
    pub mode: i64,
    /// Fitted density at every occupied bin.
    pub threshold_curve: BTreeMap<i64, f64>,
}

impl SignificanceResult {
    pub fn is_significant(&self, duration: f64) -> bool {
        self.significant_durations.contains(&duration_bin(duration))
    }
}

/// Flags every non-mode bin whose relative frequency exceeds the fitted density.
/// A degenerate fit flags nothing.
pub fn detect_significant(hist: &DurationHistogram, g: &FittedGaussian) -> SignificanceResult {
    let mode = g.mu as i64;
    let mut result = SignificanceResult {
        key: hist.key.clone(),
        significant_durations: BTreeSet::new(),
        mode,
        threshold_curve: BTreeMap::new(),
    };
    if g.degenerate {
        return result;
    }
    for &d in hist.bins.keys() {
        let density = g.density(d as f64);
        result.threshold_curve.insert(d, density);
        if d != mode && hist.frequency(d) > density {
            result.significant_durations.insert(d);
        }
    }
    result
}

/// Error reports sorted by start time for interval lookups.
#[derive(Debug, Clone, Default)]
pub struct ReportIndex {
    reports: Vec<ErrorReport>,
}

impl ReportIndex {
    pub fn new(reports: &[ErrorReport]) -> Self {
        let mut reports = reports.to_vec();
        reports.sort_by(|a, b| (a.start_ts, &a.error_id).cmp(&(b.start_ts, &b.error_id)));
        Self { reports }
    }

    /// Reports whose interval lies inside `[start, end]`.
    pub fn within(&self, start: i64, end: i64) -> impl Iterator<Item = &ErrorReport> {
        let from = self.reports.partition_point(|r| r.start_ts < start);
        self.reports[from..]
            .iter()
            .take_while(move |r| r.start_ts <= end)
            .filter(move |r| r.end_ts <= end)
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    /// `d_globalmax = global_mult * d_max`.
    pub global_mult: f64,
    /// Sequence marker action, excluded from labelling.
    pub boundary_action: Option<String>,
    /// When an action id appears here, matching reports must also carry this area.
    pub action_areas: BTreeMap<String, String>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            global_mult: DEFAULT_GLOBAL_MULT,
            boundary_action: Some("AC000".into()),
            action_areas: BTreeMap::new(),
        }
    }
}

impl ClassifyConfig {
    fn is_boundary(&self, action_id: &str) -> bool {
        self.boundary_action.as_deref() == Some(action_id)
    }
}

/// Labels one sequence from its significant tuples and the error reports.
pub fn match_errors(
    seq: &ActionSequence,
    sig: &HashMap<ActionKey, SignificanceResult>,
    reports: &ReportIndex,
    cfg: &ClassifyConfig,
) -> SequenceLabel {
    let mut significant = Vec::new();
    for (index, t) in seq.tuples.iter().enumerate() {
        if cfg.is_boundary(t.action_id()) {
            continue;
        }
        let Some(result) = sig.get(&t.key) else { continue };
        if !result.is_significant(t.duration) {
            continue;
        }
        let area = cfg.action_areas.get(t.action_id());
        let matched_error_ids: Vec<String> = reports
            .within(t.start_ts, t.end_ts)
            .filter(|r| r.station == t.key.station && area.is_none_or(|a| *a == r.area))
            .map(|r| r.error_id.clone())
            .collect();
        let cause = if matched_error_ids.is_empty() { TupleCause::KnockOn } else { TupleCause::Source };
        significant.push(SignificantTuple {
            index,
            action_id: t.action_id().to_string(),
            duration: t.duration,
            cause,
            matched_error_ids,
        });
    }
    let has_source = significant.iter().any(|s| s.cause == TupleCause::Source);
    let has_knock_on = significant.iter().any(|s| s.cause == TupleCause::KnockOn);
    let class = match (has_source, has_knock_on) {
        (true, true) => SequenceClass::SourceAndKnockOn,
        (true, false) => SequenceClass::SourceError,
        (false, true) => SequenceClass::KnockOnError,
        (false, false) => SequenceClass::Normal,
    };
    SequenceLabel { sequence_id: seq.sequence_id.clone(), class, significant }
}

/// Everything learned about one action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionModel {
    pub key: ActionKey,
    /// Histogram over sequences that survived the global-threshold check.
    pub histogram: DurationHistogram,
    pub fit: Option<FittedGaussian>,
    pub significance: SignificanceResult,
    pub d_max: f64,
    pub d_nominal: f64,
    pub d_globalmax: f64,
}

impl ActionModel {
    /// Histogram dump as CSV: `duration,count,frequency,density,flagged`.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("duration,count,frequency,density,flagged\n");
        for (&d, &c) in &self.histogram.bins {
            let density = self.fit.filter(|f| !f.degenerate).map_or(0.0, |f| f.density(d as f64));
            let flagged = self.significance.significant_durations.contains(&d);
            let _ = writeln!(out, "{d},{c},{},{density},{flagged}", self.histogram.frequency(d));
        }
        out
    }

    /// A tuple exceeds the nominal duration when its bin lies above the nominal bin.
    pub fn exceeds_nominal(&self, duration: f64) -> bool {
        duration_bin(duration) > duration_bin(self.d_nominal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub labels: Vec<SequenceLabel>,
    /// Fraction of sequences per class; sums to one.
    pub fractions: BTreeMap<SequenceClass, f64>,
    /// Sequences with a duration above the global threshold.
    pub outlier_removed_count: usize,
    #[serde(with = "models_as_list")]
    pub actions: BTreeMap<ActionKey, ActionModel>,
}

/// Serializes the per-action map as a list of models.
mod models_as_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<ActionKey, ActionModel>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.values())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<ActionKey, ActionModel>, D::Error> {
        let list = Vec::<ActionModel>::deserialize(d)?;
        Ok(list.into_iter().map(|m| (m.key.clone(), m)).collect())
    }
}

impl ClassificationReport {
    pub fn label(&self, sequence_id: &str) -> Option<&SequenceLabel> {
        self.labels.iter().find(|l| l.sequence_id == sequence_id)
    }

    pub fn count(&self, class: SequenceClass) -> usize {
        self.labels.iter().filter(|l| l.class == class).count()
    }

    pub fn nominal_by_action(&self) -> BTreeMap<String, f64> {
        self.actions.iter().map(|(k, m)| (k.action_id.clone(), m.d_nominal)).collect()
    }

    pub fn globalmax_by_action(&self) -> BTreeMap<String, f64> {
        self.actions.iter().map(|(k, m)| (k.action_id.clone(), m.d_globalmax)).collect()
    }

    pub fn d_max_by_action(&self) -> BTreeMap<String, f64> {
        self.actions.iter().map(|(k, m)| (k.action_id.clone(), m.d_max)).collect()
    }
}

fn fit_action(hist: &DurationHistogram) -> (Option<FittedGaussian>, SignificanceResult) {
    match fit_mle(hist) {
        Ok(fit) => {
            let sig = detect_significant(hist, &fit);
            (Some(fit), sig)
        }
        Err(_) => (
            None,
            SignificanceResult {
                key: hist.key.clone(),
                significant_durations: BTreeSet::new(),
                mode: hist.mode().unwrap_or(0),
                threshold_curve: BTreeMap::new(),
            },
        ),
    }
}

/// Classifies every sequence.
///
/// With `specs` given, every labelled action must have an entry; missing
/// `d_nominal` values default to the histogram mode. Without specs, `d_max`
/// defaults to `mode + 3 sigma` (at least one bin above the mode) from a
/// first fit over all data. Sequences holding any duration above
/// `global_mult * d_max` are misc and are left out of the final fit.
pub fn classify_dataset(
    seqs: &[ActionSequence],
    reports: &[ErrorReport],
    specs: Option<&BTreeMap<ActionKey, ActionSpec>>,
    cfg: &ClassifyConfig,
) -> Result<ClassificationReport, ClassifyError> {
    if !(cfg.global_mult > 1.0) {
        return Err(ClassifyError::InvalidMultiplier(cfg.global_mult));
    }
    let labelled = |t: &crate::domain::ActionDurationTuple| !cfg.is_boundary(t.action_id());

    let mut all: BTreeMap<ActionKey, Vec<f64>> = BTreeMap::new();
    for t in seqs.iter().flat_map(|s| &s.tuples).filter(|t| labelled(t)) {
        all.entry(t.key.clone()).or_default().push(t.duration);
    }

    let mut d_max = BTreeMap::new();
    for (key, durations) in &all {
        let spec = match specs {
            Some(map) => Some(map.get(key).ok_or_else(|| ClassifyError::MissingSpec(key.action_id.clone()))?),
            None => None,
        };
        let value = match spec {
            Some(s) => s.d_max,
            None => {
                let hist = build_histogram(key.clone(), durations.iter().copied())?;
                let mode = hist.mode().unwrap() as f64;
                let sigma = fit_mle(&hist).map_or(0.0, |f| f.sigma);
                (mode + 3.0 * sigma).max(mode + 1.0)
            }
        };
        d_max.insert(key.clone(), value);
    }
    let globalmax: BTreeMap<&ActionKey, f64> = d_max.iter().map(|(k, v)| (k, v * cfg.global_mult)).collect();

    let over_global: Vec<bool> = seqs
        .iter()
        .map(|s| s.tuples.iter().filter(|t| labelled(t)).any(|t| t.duration > globalmax[&t.key]))
        .collect();

    let mut kept: BTreeMap<ActionKey, Vec<f64>> = all.keys().map(|k| (k.clone(), Vec::new())).collect();
    for (s, _) in seqs.iter().zip(&over_global).filter(|(_, &over)| !over) {
        for t in s.tuples.iter().filter(|t| labelled(t)) {
            kept.get_mut(&t.key).unwrap().push(t.duration);
        }
    }

    let mut actions = BTreeMap::new();
    let mut significance = HashMap::new();
    for (key, durations) in kept {
        // Every occurrence sat in a misc sequence: keep the histogram for
        // reporting but flag nothing.
        let (histogram, fit, sig) = if durations.is_empty() {
            let histogram = build_histogram(key.clone(), all[&key].iter().copied())?;
            let sig = SignificanceResult {
                key: key.clone(),
                significant_durations: BTreeSet::new(),
                mode: histogram.mode().unwrap(),
                threshold_curve: BTreeMap::new(),
            };
            (histogram, None, sig)
        } else {
            let histogram = build_histogram(key.clone(), durations.iter().copied())?;
            let (fit, sig) = fit_action(&histogram);
            (histogram, fit, sig)
        };
        let d_nominal = specs
            .and_then(|m| m.get(&key))
            .and_then(|s| s.d_nominal)
            .unwrap_or(sig.mode as f64);
        let model = ActionModel {
            key: key.clone(),
            histogram,
            fit,
            significance: sig.clone(),
            d_max: d_max[&key],
            d_nominal,
            d_globalmax: globalmax[&key],
        };
        significance.insert(key.clone(), sig);
        actions.insert(key, model);
    }

    let index = ReportIndex::new(reports);
    let mut labels = Vec::with_capacity(seqs.len());
    for (seq, &over) in seqs.iter().zip(&over_global) {
        if over {
            labels.push(SequenceLabel {
                sequence_id: seq.sequence_id.clone(),
                class: SequenceClass::Misc,
                significant: Vec::new(),
            });
            continue;
        }
        let mut label = match_errors(seq, &significance, &index, cfg);
        if label.class == SequenceClass::Normal {
            let mut body = seq.tuples.iter().filter(|t| labelled(t)).peekable();
            let all_exceed = body.peek().is_some() && body.all(|t| actions[&t.key].exceeds_nominal(t.duration));
            if all_exceed {
                label.class = SequenceClass::Misc;
            }
        }
        labels.push(label);
    }

    let n = labels.len().max(1) as f64;
    let fractions = SequenceClass::ALL
        .iter()
        .map(|&c| (c, labels.iter().filter(|l| l.class == c).count() as f64 / n))
        .collect();
    Ok(ClassificationReport {
        labels,
        fractions,
        outlier_removed_count: over_global.iter().filter(|&&o| o).count(),
        actions,
    })
}
