//! Core data model: actions, executed action tuples, per-vehicle sequences,
//! error reports and sequence labels.
//!
//! Timestamps are integer milliseconds relative to a configurable epoch
//! (default `2020-01-01T00:00:00Z`); durations are real seconds.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Default epoch that all millisecond timestamps are relative to.
pub const DEFAULT_EPOCH: &str = "2020-01-01T00:00:00Z";

/// Tolerance between `duration` and `end_ts - start_ts`, in seconds.
pub const DURATION_TOLERANCE: f64 = 1e-6;

/// Identifies one automated production step: station, vehicle variant, action.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionKey {
    pub station: String,
    pub vehicle_code: String,
    pub action_id: String,
}

impl ActionKey {
    pub fn new(
        station: impl Into<String>,
        vehicle_code: impl Into<String>,
        action_id: impl Into<String>,
    ) -> Self {
        Self {
            station: station.into(),
            vehicle_code: vehicle_code.into(),
            action_id: action_id.into(),
        }
    }

    pub fn is_complete(&self) -> bool {
        !self.station.is_empty() && !self.vehicle_code.is_empty() && !self.action_id.is_empty()
    }
}

impl fmt::Display for ActionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.station, self.vehicle_code, self.action_id)
    }
}

/// One executed action with its measured duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDurationTuple {
    pub key: ActionKey,
    /// Start, in milliseconds since the epoch.
    pub start_ts: i64,
    /// End, in milliseconds since the epoch.
    pub end_ts: i64,
    /// Seconds.
    pub duration: f64,
}

impl ActionDurationTuple {
    /// Builds a tuple whose duration is derived from the timestamps.
    pub fn from_timestamps(key: ActionKey, start_ts: i64, end_ts: i64) -> Self {
        Self {
            key,
            start_ts,
            end_ts,
            duration: (end_ts - start_ts) as f64 / 1000.0,
        }
    }

    pub fn action_id(&self) -> &str {
        &self.key.action_id
    }

    /// Canonical ordering: start time, then action id.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.start_ts
            .cmp(&other.start_ts)
            .then_with(|| self.key.action_id.cmp(&other.key.action_id))
    }
}

/// Expected timing of an action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub key: ActionKey,
    /// Expected maximum allowed duration, seconds.
    pub d_max: f64,
    /// Nominal duration, seconds. Estimated from the histogram mode when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_nominal: Option<f64>,
}

impl ActionSpec {
    pub fn is_valid(&self) -> bool {
        self.d_max > 0.0
            && self
                .d_nominal
                .is_none_or(|nominal| nominal > 0.0 && nominal <= self.d_max)
    }
}

/// One complete per-vehicle chain of executed actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub sequence_id: String,
    pub vehicle_code: String,
    pub tuples: Vec<ActionDurationTuple>,
}

impl ActionSequence {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn first_start(&self) -> Option<i64> {
        self.tuples.first().map(|t| t.start_ts)
    }
}

/// A logged fault message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub error_id: String,
    pub start_ts: i64,
    pub end_ts: i64,
    pub station: String,
    pub area: String,
    pub message: String,
}

impl ErrorReport {
    /// True when the report interval lies inside `[start, end]`.
    pub fn within(&self, start: i64, end: i64) -> bool {
        self.start_ts >= start && self.end_ts <= end
    }
}

/// Sequence classes produced by the error classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceClass {
    Normal,
    SourceError,
    KnockOnError,
    SourceAndKnockOn,
    Misc,
}

impl SequenceClass {
    pub const ALL: [SequenceClass; 5] = [
        SequenceClass::Normal,
        SequenceClass::SourceError,
        SequenceClass::KnockOnError,
        SequenceClass::SourceAndKnockOn,
        SequenceClass::Misc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SequenceClass::Normal => "normal",
            SequenceClass::SourceError => "source_error",
            SequenceClass::KnockOnError => "knock_on_error",
            SequenceClass::SourceAndKnockOn => "source_and_knock_on",
            SequenceClass::Misc => "misc",
        }
    }

    pub fn has_source(self) -> bool {
        matches!(self, SequenceClass::SourceError | SequenceClass::SourceAndKnockOn)
    }
}

impl fmt::Display for SequenceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Cause assigned to a single significant tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleCause {
    Source,
    KnockOn,
}

/// A tuple flagged as significantly delayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificantTuple {
    pub index: usize,
    pub action_id: String,
    pub duration: f64,
    pub cause: TupleCause,
    pub matched_error_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLabel {
    pub sequence_id: String,
    pub class: SequenceClass,
    pub significant: Vec<SignificantTuple>,
}

impl SequenceLabel {
    pub fn matched_error_ids(&self) -> Vec<&str> {
        self.significant
            .iter()
            .flat_map(|s| s.matched_error_ids.iter().map(String::as_str))
            .collect()
    }

    pub fn significant_indices(&self) -> Vec<usize> {
        self.significant.iter().map(|s| s.index).collect()
    }

    /// Checks the label's own invariants.
    pub fn is_consistent(&self) -> bool {
        match self.class {
            SequenceClass::Normal => self.significant.is_empty(),
            SequenceClass::SourceError | SequenceClass::SourceAndKnockOn => {
                !self.matched_error_ids().is_empty()
            }
            _ => true,
        }
    }
}

/// Reports every violated invariant of `seq`. Empty when the sequence is well formed.
pub fn validate_sequence(seq: &ActionSequence) -> Vec<String> {
    let mut violations = Vec::new();
    if seq.sequence_id.is_empty() {
        violations.push("empty sequence_id".to_string());
    }
    if seq.tuples.is_empty() {
        violations.push("empty tuples".to_string());
    }
    for (i, t) in seq.tuples.iter().enumerate() {
        if !t.key.is_complete() {
            violations.push(format!("incomplete key at index {i}"));
        }
        let measured = (t.end_ts - t.start_ts) as f64 / 1000.0;
        if t.end_ts < t.start_ts || (measured - t.duration).abs() > DURATION_TOLERANCE {
            violations.push(format!("duration mismatch at index {i}"));
        }
        if !(t.duration >= 0.0) {
            violations.push(format!("negative duration at index {i}"));
        }
        if i > 0 && seq.tuples[i - 1].canonical_cmp(t) == Ordering::Greater {
            violations.push(format!("ordering violation at index {i}"));
        }
    }
    violations
}

/// Sorts tuples by `(start_ts, action_id)`. Stable, so idempotent.
pub fn sort_canonical(mut seq: ActionSequence) -> ActionSequence {
    seq.tuples.sort_by(ActionDurationTuple::canonical_cmp);
    seq
}
