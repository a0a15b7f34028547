//! Synthetic interlinked production line.
//!
//! Each sequence is a boundary marker followed by the configured actions in
//! order. Durations are nominal plus Gaussian jitter. A source error adds a
//! delay to one action and logs an error report inside that action; the
//! following actions inherit the delay scaled by `decay^step` without any
//! report (knock-on). A misc event multiplies one duration far beyond the
//! global threshold. Every random draw comes from a per-sequence ChaCha
//! stream, so output does not depend on generation order.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{ClassificationReport, DEFAULT_GLOBAL_MULT};
use crate::domain::{
    ActionDurationTuple, ActionKey, ActionSequence, ActionSpec, ErrorReport, SequenceClass, TupleCause,
};

/// Shortest duration the generator emits, in seconds.
pub const MIN_DURATION: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid line spec: {0}")]
    InvalidSpec(String),
    #[error("sequence ids differ between truth and labels: {0}")]
    IdMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTemplate {
    pub action_id: String,
    /// Seconds.
    pub nominal: f64,
    /// Seconds.
    pub jitter_sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelaySpec {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Propagation {
    /// Number of downstream actions that inherit a source delay.
    pub horizon: usize,
    /// Per-step delay factor, in (0, 1).
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSpec {
    pub station: String,
    pub vehicle_code: String,
    pub actions: Vec<ActionTemplate>,
    pub boundary_action: String,
    /// Length of the boundary marker, seconds.
    pub boundary_duration: f64,
    /// Pause between consecutive sequences, seconds.
    pub gap: f64,
    /// Probability that a sequence carries one source error.
    pub source_rate: f64,
    pub source_delay: DelaySpec,
    pub propagation: Propagation,
    /// Probability that a sequence carries one misc duration.
    pub misc_rate: f64,
    pub misc_scale: f64,
    /// Expected maximum duration is `nominal + d_max_sigmas * jitter_sd`.
    pub d_max_sigmas: f64,
    pub seed: u64,
}

impl Default for LineSpec {
    fn default() -> Self {
        let nominals = [12.5, 8.5, 20.5, 6.5, 15.5, 10.5, 4.5, 18.5, 9.5, 14.5];
        Self {
            station: "ST7240".into(),
            vehicle_code: "0021".into(),
            actions: nominals
                .iter()
                .enumerate()
                .map(|(i, &nominal)| ActionTemplate {
                    action_id: format!("AC{:03}", i + 1),
                    nominal,
                    jitter_sd: 0.2,
                })
                .collect(),
            boundary_action: "AC000".into(),
            boundary_duration: 1.0,
            gap: 2.0,
            source_rate: 0.1,
            source_delay: DelaySpec { mean: 20.0, sd: 2.0 },
            propagation: Propagation { horizon: 2, decay: 0.5 },
            misc_rate: 0.01,
            misc_scale: 25.0,
            d_max_sigmas: 3.0,
            seed: 42,
        }
    }
}

impl LineSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidSpec(msg));
        if self.actions.is_empty() {
            return bad("no actions".into());
        }
        for p in [("source_rate", self.source_rate), ("misc_rate", self.misc_rate)] {
            if !(0.0..=1.0).contains(&p.1) {
                return bad(format!("{} must lie in [0, 1]", p.0));
            }
        }
        if !(self.propagation.decay > 0.0 && self.propagation.decay < 1.0) {
            return bad("decay must lie in (0, 1)".into());
        }
        if self.misc_rate > 0.0 && !(self.misc_scale > DEFAULT_GLOBAL_MULT) {
            return bad(format!("misc_scale must exceed {DEFAULT_GLOBAL_MULT}"));
        }
        let mut ids = HashSet::new();
        for a in &self.actions {
            if !(a.nominal > 0.0) || a.jitter_sd < 0.0 {
                return bad(format!("{}: nominal must be positive, jitter non-negative", a.action_id));
            }
            if a.action_id == self.boundary_action || !ids.insert(&a.action_id) {
                return bad(format!("duplicate action id {}", a.action_id));
            }
        }
        if self.source_delay.sd < 0.0 || self.boundary_duration < 0.0 || self.gap < 0.0 {
            return bad("negative delay sd, boundary duration or gap".into());
        }
        Ok(())
    }

    pub fn key(&self, action_id: &str) -> ActionKey {
        ActionKey::new(&self.station, &self.vehicle_code, action_id)
    }

    /// Expected timings for every generated action.
    pub fn action_specs(&self) -> Vec<ActionSpec> {
        self.actions
            .iter()
            .map(|a| ActionSpec {
                key: self.key(&a.action_id),
                d_max: a.nominal + self.d_max_sigmas * a.jitter_sd,
                d_nominal: Some(a.nominal),
            })
            .collect()
    }

    pub fn nominal_by_action(&self) -> BTreeMap<String, f64> {
        self.actions.iter().map(|a| (a.action_id.clone(), a.nominal)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectedCause {
    None,
    Source,
    KnockOn,
    Misc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleTruth {
    pub action_id: String,
    /// Seconds added on top of nominal plus jitter.
    pub delay: f64,
    pub cause: InjectedCause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTruth {
    pub sequence_id: String,
    pub class: SequenceClass,
    /// Index-aligned with the sequence tuples, boundary included.
    pub tuples: Vec<TupleTruth>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sequences: Vec<SequenceTruth>,
}

impl GroundTruth {
    pub fn to_jsonl(&self) -> String {
        self.sequences
            .iter()
            .map(|s| serde_json::to_string(s).expect("truth serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let sequences = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { sequences })
    }
}

/// Everything one generator run produces.
#[derive(Debug, Clone)]
pub struct Generated {
    pub sequences: Vec<ActionSequence>,
    pub reports: Vec<ErrorReport>,
    pub truth: GroundTruth,
    pub specs: Vec<ActionSpec>,
}

impl Generated {
    /// Cycle-times CSV: a start row and an end row per tuple.
    pub fn cycle_csv(&self) -> String {
        let mut out = crate::ingest::CYCLE_TIMES_HEADER.join(",");
        out.push('\n');
        for seq in &self.sequences {
            for t in &seq.tuples {
                let k = &t.key;
                let _ = writeln!(
                    out,
                    "{},{},{},{},start,{},",
                    seq.sequence_id, k.station, k.vehicle_code, k.action_id, t.start_ts
                );
                let _ = writeln!(
                    out,
                    "{},{},{},{},end,{},{}",
                    seq.sequence_id,
                    k.station,
                    k.vehicle_code,
                    k.action_id,
                    t.end_ts,
                    t.end_ts - t.start_ts
                );
            }
        }
        out
    }

    pub fn error_csv(&self) -> String {
        let mut out = crate::ingest::ERROR_REPORTS_HEADER.join(",");
        out.push('\n');
        for r in &self.reports {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.error_id, r.start_ts, r.end_ts, r.station, r.area, r.message
            );
        }
        out
    }
}

fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite, non-negative sd")
}

/// Generates `n_sequences` back-to-back sequences.
pub fn generate(spec: &LineSpec, n_sequences: usize) -> Result<Generated, SimError> {
    spec.validate()?;
    if n_sequences == 0 {
        return Err(SimError::InvalidSpec("n_sequences must be at least 1".into()));
    }
    let n_actions = spec.actions.len();
    let boundary_key = spec.key(&spec.boundary_action);
    let keys: Vec<ActionKey> = spec.actions.iter().map(|a| spec.key(&a.action_id)).collect();
    let to_ms = |s: f64| (s * 1000.0).round() as i64;

    let mut out = Generated {
        sequences: Vec::with_capacity(n_sequences),
        reports: Vec::new(),
        truth: GroundTruth::default(),
        specs: spec.action_specs(),
    };
    let mut cursor: i64 = 0;
    for index in 0..n_sequences {
        let mut rng = sequence_rng(spec.seed, index);
        let sequence_id = format!("seq-{index:06}");

        let mut durations: Vec<f64> = spec
            .actions
            .iter()
            .map(|a| a.nominal + normal(0.0, a.jitter_sd).sample(&mut rng))
            .collect();
        let mut delays = vec![0.0; n_actions];
        let mut causes = vec![InjectedCause::None; n_actions];

        let has_source = rng.random_bool(spec.source_rate);
        let source_at = rng.random_range(0..n_actions);
        let delay = normal(spec.source_delay.mean, spec.source_delay.sd).sample(&mut rng).max(0.0);
        let has_misc = rng.random_bool(spec.misc_rate);
        let misc_at = rng.random_range(0..n_actions);

        if has_source {
            delays[source_at] += delay;
            causes[source_at] = InjectedCause::Source;
            let mut factor = 1.0;
            for j in (source_at + 1..n_actions).take(spec.propagation.horizon) {
                factor *= spec.propagation.decay;
                delays[j] += delay * factor;
                causes[j] = InjectedCause::KnockOn;
            }
        }
        for (d, extra) in durations.iter_mut().zip(&delays) {
            *d = (*d + extra).max(MIN_DURATION);
        }
        if has_misc {
            let before = durations[misc_at];
            durations[misc_at] *= spec.misc_scale;
            delays[misc_at] += durations[misc_at] - before;
            causes[misc_at] = InjectedCause::Misc;
        }

        let mut tuples = Vec::with_capacity(n_actions + 1);
        let mut truth = Vec::with_capacity(n_actions + 1);
        let boundary_end = cursor + to_ms(spec.boundary_duration);
        tuples.push(ActionDurationTuple::from_timestamps(boundary_key.clone(), cursor, boundary_end));
        truth.push(TupleTruth { action_id: spec.boundary_action.clone(), delay: 0.0, cause: InjectedCause::None });
        cursor = boundary_end;

        for j in 0..n_actions {
            let dur_ms = to_ms(durations[j]).max(1);
            let t = ActionDurationTuple::from_timestamps(keys[j].clone(), cursor, cursor + dur_ms);
            if causes[j] == InjectedCause::Source {
                out.reports.push(ErrorReport {
                    error_id: format!("E{index:06}"),
                    start_ts: t.start_ts + dur_ms / 4,
                    end_ts: t.end_ts - dur_ms / 4,
                    station: spec.station.clone(),
                    area: "A1".into(),
                    message: format!("fault during {}", spec.actions[j].action_id),
                });
            }
            cursor = t.end_ts;
            tuples.push(t);
            truth.push(TupleTruth { action_id: spec.actions[j].action_id.clone(), delay: delays[j], cause: causes[j] });
        }
        cursor += to_ms(spec.gap);

        let class = if causes.contains(&InjectedCause::Misc) {
            SequenceClass::Misc
        } else if causes.contains(&InjectedCause::Source) {
            if causes.contains(&InjectedCause::KnockOn) {
                SequenceClass::SourceAndKnockOn
            } else {
                SequenceClass::SourceError
            }
        } else {
            SequenceClass::Normal
        };
        out.truth.sequences.push(SequenceTruth { sequence_id: sequence_id.clone(), class, tuples: truth });
        out.sequences.push(ActionSequence { sequence_id, vehicle_code: spec.vehicle_code.clone(), tuples });
    }
    Ok(out)
}

/// Classes used for scoring; source-with-knock-on counts as source.
pub const SCORED_CLASSES: [SequenceClass; 4] = [
    SequenceClass::Normal,
    SequenceClass::SourceError,
    SequenceClass::KnockOnError,
    SequenceClass::Misc,
];

fn scored(class: SequenceClass) -> usize {
    match class {
        SequenceClass::Normal => 0,
        SequenceClass::SourceError | SequenceClass::SourceAndKnockOn => 1,
        SequenceClass::KnockOnError => 2,
        SequenceClass::Misc => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierScore {
    /// `confusion[truth][predicted]` over [`SCORED_CLASSES`].
    pub confusion: [[usize; 4]; 4],
    pub accuracy: f64,
}

pub fn score_classifier(truth: &GroundTruth, report: &ClassificationReport) -> Result<ClassifierScore, SimError> {
    let predicted: BTreeMap<&str, SequenceClass> =
        report.labels.iter().map(|l| (l.sequence_id.as_str(), l.class)).collect();
    if predicted.len() != truth.sequences.len() {
        return Err(SimError::IdMismatch(format!(
            "{} labels for {} sequences",
            predicted.len(),
            truth.sequences.len()
        )));
    }
    let mut confusion = [[0usize; 4]; 4];
    for t in &truth.sequences {
        let p = predicted
            .get(t.sequence_id.as_str())
            .ok_or_else(|| SimError::IdMismatch(t.sequence_id.clone()))?;
        confusion[scored(t.class)][scored(*p)] += 1;
    }
    let correct: usize = (0..4).map(|i| confusion[i][i]).sum();
    Ok(ClassifierScore { confusion, accuracy: correct as f64 / truth.sequences.len().max(1) as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub true_positives: usize,
    pub predicted: usize,
    pub actual: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall of tuples labelled as source errors against injected sources.
///
/// Misc sequences are excluded on both sides.
pub fn score_source_matching(truth: &GroundTruth, report: &ClassificationReport) -> MatchScore {
    let mut actual = HashSet::new();
    for s in truth.sequences.iter().filter(|s| s.class != SequenceClass::Misc) {
        for (i, t) in s.tuples.iter().enumerate() {
            if t.cause == InjectedCause::Source {
                actual.insert((s.sequence_id.as_str(), i));
            }
        }
    }
    let mut predicted = HashSet::new();
    for l in report.labels.iter().filter(|l| l.class != SequenceClass::Misc) {
        for s in l.significant.iter().filter(|s| s.cause == TupleCause::Source) {
            predicted.insert((l.sequence_id.as_str(), s.index));
        }
    }
    let tp = predicted.intersection(&actual).count();
    let ratio = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
    MatchScore {
        true_positives: tp,
        predicted: predicted.len(),
        actual: actual.len(),
        precision: ratio(tp, predicted.len()),
        recall: ratio(tp, actual.len()),
    }
}
