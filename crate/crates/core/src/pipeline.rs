//! From labelled sequences to normalized `(x, y)` windows.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::ClassificationReport;
use crate::domain::{ActionSequence, SequenceClass, SequenceLabel, TupleCause};

pub const FEATURES: usize = 5;
pub const FEATURE_NAMES: [&str; FEATURES] = ["time", "action_code", "duration", "error_type", "error_count"];
pub const DURATION: usize = 2;

pub const ERROR_NORMAL: f64 = 1.0;
pub const ERROR_SOURCE: f64 = 2.0;
pub const ERROR_KNOCK_ON: f64 = 3.0;
pub const ERROR_UNDEFINED: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("no rows left to encode")]
    EmptyCorpus,
    #[error("window sizes must be at least 1 (n_back={0}, m_fwd={1})")]
    InvalidWindow(usize, usize),
    #[error("split fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("no label for sequence {0}")]
    MissingLabel(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("no windowed pairs produced")]
    NoPairs,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierMode {
    #[default]
    None,
    /// Remove only the offending tuples.
    Aa,
    /// Remove every sequence containing an outlier.
    Aps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub n_back: usize,
    pub m_fwd: usize,
    pub separate: bool,
    pub outlier_mode: OutlierMode,
    pub drop_misc: bool,
    pub global_mult: f64,
    pub split_fraction: f64,
    /// Fit normalization on the whole corpus instead of the training split.
    pub legacy_norm: bool,
    pub boundary_action: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_back: 5,
            m_fwd: 2,
            separate: true,
            outlier_mode: OutlierMode::None,
            drop_misc: true,
            global_mult: crate::classify::DEFAULT_GLOBAL_MULT,
            split_fraction: 0.8,
            legacy_norm: false,
            boundary_action: "AC000".into(),
        }
    }
}

pub const PRESETS: [(&str, usize, usize); 5] = [("5-2", 5, 2), ("5-5", 5, 5), ("5-7", 5, 7), ("7-5", 7, 5), ("7-7", 7, 7)];

/// `(n_back, m_fwd)` for a named look-back/forward configuration.
pub fn preset(name: &str) -> Result<(usize, usize), PipelineError> {
    PRESETS
        .iter()
        .find(|(p, _, _)| *p == name)
        .map(|&(_, n, m)| (n, m))
        .ok_or_else(|| PipelineError::UnknownPreset(name.to_string()))
}

impl PipelineConfig {
    pub fn with_preset(mut self, name: &str) -> Result<Self, PipelineError> {
        (self.n_back, self.m_fwd) = preset(name)?;
        Ok(self)
    }
}

/// Drops outlier tuples (AA) or whole sequences (APS).
///
/// Returns the kept sequences and the number of removed tuples.
pub fn filter_outliers(
    seqs: Vec<ActionSequence>,
    globalmax: &BTreeMap<String, f64>,
    mode: OutlierMode,
) -> (Vec<ActionSequence>, usize) {
    let is_outlier = |t: &crate::domain::ActionDurationTuple| {
        globalmax.get(t.action_id()).is_some_and(|g| t.duration > *g)
    };
    let mut removed = 0;
    let kept = match mode {
        OutlierMode::None => seqs,
        OutlierMode::Aa => seqs
            .into_iter()
            .map(|mut s| {
                let before = s.tuples.len();
                s.tuples.retain(|t| !is_outlier(t));
                removed += before - s.tuples.len();
                s
            })
            .collect(),
        OutlierMode::Aps => seqs
            .into_iter()
            .filter(|s| {
                let bad = s.tuples.iter().any(is_outlier);
                if bad {
                    removed += s.tuples.len();
                }
                !bad
            })
            .collect(),
    };
    (kept, removed)
}

pub fn drop_misc(seqs: Vec<ActionSequence>, labels: &[SequenceLabel]) -> Vec<ActionSequence> {
    let misc: std::collections::HashSet<&str> = labels
        .iter()
        .filter(|l| l.class == SequenceClass::Misc)
        .map(|l| l.sequence_id.as_str())
        .collect();
    let kept: Vec<_> = seqs.into_iter().filter(|s| !misc.contains(s.sequence_id.as_str())).collect();
    if kept.is_empty() {
        warn!("every sequence was misc; corpus is empty");
    }
    kept
}

/// Per-feature affine map onto [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: f64,
    pub max: f64,
    /// Constant feature; mapped by identity.
    pub constant: bool,
}

impl FeatureRange {
    pub fn normalize(&self, v: f64) -> f64 {
        if self.constant {
            v
        } else {
            2.0 * (v - self.min) / (self.max - self.min) - 1.0
        }
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        if self.constant {
            v
        } else {
            (v + 1.0) / 2.0 * (self.max - self.min) + self.min
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub features: [FeatureRange; FEATURES],
}

impl NormalizationParams {
    pub fn fit<'a, I>(rows: I) -> Result<Self, PipelineError>
    where
        I: IntoIterator<Item = &'a [f64; FEATURES]>,
    {
        let mut lo = [f64::INFINITY; FEATURES];
        let mut hi = [f64::NEG_INFINITY; FEATURES];
        let mut any = false;
        for row in rows {
            any = true;
            for f in 0..FEATURES {
                lo[f] = lo[f].min(row[f]);
                hi[f] = hi[f].max(row[f]);
            }
        }
        if !any {
            return Err(PipelineError::EmptyCorpus);
        }
        let features = std::array::from_fn(|f| {
            let constant = hi[f] <= lo[f];
            if constant {
                warn!("feature {} is constant; using identity map", FEATURE_NAMES[f]);
            }
            FeatureRange { min: lo[f], max: hi[f], constant }
        });
        Ok(Self { features })
    }

    /// Normalizes and clamps an input row.
    pub fn normalize_row(&self, row: &[f64; FEATURES]) -> [f64; FEATURES] {
        std::array::from_fn(|f| self.features[f].normalize(row[f]).clamp(-1.0, 1.0))
    }

    pub fn normalize_duration(&self, d: f64) -> f64 {
        self.features[DURATION].normalize(d)
    }

    pub fn denormalize_duration(&self, d: f64) -> f64 {
        self.features[DURATION].denormalize(d)
    }
}

/// One encoded tuple before normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedRow {
    pub values: [f64; FEATURES],
    pub action_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub sequence_id: String,
    pub rows: Vec<EncodedRow>,
}

/// Per-tuple error type and report count, keyed so that they survive tuple removal.
type TagKey = (String, i64, String);

fn tuple_tags(seqs: &[ActionSequence], labels: &[SequenceLabel]) -> Result<HashMap<TagKey, (f64, f64)>, PipelineError> {
    let by_id: HashMap<&str, &SequenceLabel> = labels.iter().map(|l| (l.sequence_id.as_str(), l)).collect();
    let mut tags = HashMap::new();
    for s in seqs {
        let label = by_id.get(s.sequence_id.as_str()).ok_or_else(|| PipelineError::MissingLabel(s.sequence_id.clone()))?;
        let fallback = if label.class == SequenceClass::Misc { ERROR_UNDEFINED } else { ERROR_NORMAL };
        for (i, t) in s.tuples.iter().enumerate() {
            let tag = match label.significant.iter().find(|st| st.index == i) {
                Some(st) => (
                    match st.cause {
                        TupleCause::Source => ERROR_SOURCE,
                        TupleCause::KnockOn => ERROR_KNOCK_ON,
                    },
                    st.matched_error_ids.len() as f64,
                ),
                None => (fallback, 0.0),
            };
            tags.insert((s.sequence_id.clone(), t.start_ts, t.action_id().to_string()), tag);
        }
    }
    Ok(tags)
}

/// Integer-codes action ids from 1 in first-appearance order.
pub fn action_codes(seqs: &[ActionSequence], boundary: &str) -> BTreeMap<String, u32> {
    let mut codes = BTreeMap::new();
    for t in seqs.iter().flat_map(|s| &s.tuples) {
        if t.action_id() != boundary && !codes.contains_key(t.action_id()) {
            let next = codes.len() as u32 + 1;
            codes.insert(t.action_id().to_string(), next);
        }
    }
    codes
}

/// Raw five-feature rows per sequence, boundary tuples excluded.
pub fn encode_features(
    seqs: &[ActionSequence],
    tag_source: &[ActionSequence],
    labels: &[SequenceLabel],
    codes: &BTreeMap<String, u32>,
    boundary: &str,
) -> Result<Vec<EncodedSequence>, PipelineError> {
    let tags = tuple_tags(tag_source, labels)?;
    let encoded: Vec<EncodedSequence> = seqs
        .iter()
        .map(|s| EncodedSequence {
            sequence_id: s.sequence_id.clone(),
            rows: s
                .tuples
                .iter()
                .filter(|t| t.action_id() != boundary)
                .map(|t| {
                    let key = (s.sequence_id.clone(), t.start_ts, t.action_id().to_string());
                    let (error_type, error_count) = tags.get(&key).copied().unwrap_or((ERROR_NORMAL, 0.0));
                    EncodedRow {
                        values: [
                            t.start_ts as f64 / 1000.0,
                            codes.get(t.action_id()).copied().unwrap_or(0) as f64,
                            t.duration,
                            error_type,
                            error_count,
                        ],
                        action_id: t.action_id().to_string(),
                    }
                })
                .collect(),
        })
        .collect();
    if encoded.iter().all(|s| s.rows.is_empty()) {
        return Err(PipelineError::EmptyCorpus);
    }
    Ok(encoded)
}

/// A window as row indices into the flattened corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpan {
    pub start: usize,
    pub n_back: usize,
    pub m_fwd: usize,
}

impl WindowSpan {
    pub fn inputs(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.n_back
    }

    pub fn targets(&self) -> std::ops::Range<usize> {
        self.start + self.n_back..self.start + self.n_back + self.m_fwd
    }
}

/// Window spans over sequences of the given lengths.
///
/// Indices refer to the rows of all sequences concatenated in order. The
/// second value lists the positions of sequences too short for one window.
pub fn make_windows(lengths: &[usize], n_back: usize, m_fwd: usize, separate: bool) -> Result<(Vec<WindowSpan>, Vec<usize>), PipelineError> {
    if n_back == 0 || m_fwd == 0 {
        return Err(PipelineError::InvalidWindow(n_back, m_fwd));
    }
    let span = n_back + m_fwd;
    let mut windows = Vec::new();
    let mut too_short = Vec::new();
    if separate {
        let mut offset = 0;
        for (i, &len) in lengths.iter().enumerate() {
            if len < span {
                too_short.push(i);
            }
            windows.extend((0..(len + 1).saturating_sub(span)).map(|s| WindowSpan { start: offset + s, n_back, m_fwd }));
            offset += len;
        }
    } else {
        let total: usize = lengths.iter().sum();
        windows.extend((0..(total + 1).saturating_sub(span)).map(|s| WindowSpan { start: s, n_back, m_fwd }));
    }
    Ok((windows, too_short))
}

/// First `ceil(f * N)` items train, the rest test.
pub fn split_train_test<T>(mut items: Vec<T>, fraction: f64) -> Result<(Vec<T>, Vec<T>), PipelineError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PipelineError::InvalidFraction(fraction));
    }
    let cut = ((fraction * items.len() as f64).ceil() as usize).min(items.len());
    let test = items.split_off(cut);
    if test.is_empty() {
        warn!("test split is empty ({} pairs)", items.len());
    }
    Ok((items, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedPair {
    pub x: Vec<[f64; FEATURES]>,
    pub y: Vec<f64>,
    pub target_actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedData {
    pub train: Vec<WindowedPair>,
    pub test: Vec<WindowedPair>,
    pub norm: NormalizationParams,
    pub action_codes: BTreeMap<String, u32>,
    pub removed_count: usize,
    pub diagnostics: Vec<String>,
}

impl PreparedData {
    pub fn denormalized_targets(&self, pairs: &[WindowedPair]) -> Vec<Vec<f64>> {
        pairs.iter().map(|p| p.y.iter().map(|&v| self.norm.denormalize_duration(v)).collect()).collect()
    }
}

pub fn pairs_to_jsonl(pairs: &[WindowedPair]) -> String {
    pairs.iter().map(|p| serde_json::to_string(p).expect("pair serializes") + "\n").collect()
}

pub fn pairs_from_jsonl(text: &str) -> Result<Vec<WindowedPair>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Runs misc removal, outlier filtering, encoding, windowing, splitting and normalization.
pub fn prepare(
    seqs: &[ActionSequence],
    report: &ClassificationReport,
    cfg: &PipelineConfig,
) -> Result<PreparedData, PipelineError> {
    let mut diagnostics = Vec::new();
    let mut kept = seqs.to_vec();
    if cfg.drop_misc {
        kept = drop_misc(kept, &report.labels);
    }
    let (kept, removed_count) = filter_outliers(kept, &report.globalmax_by_action(), cfg.outlier_mode);
    let codes = action_codes(seqs, &cfg.boundary_action);
    let encoded = encode_features(&kept, seqs, &report.labels, &codes, &cfg.boundary_action)?;

    let lengths: Vec<usize> = encoded.iter().map(|s| s.rows.len()).collect();
    let (spans, too_short) = make_windows(&lengths, cfg.n_back, cfg.m_fwd, cfg.separate)?;
    for i in too_short {
        diagnostics.push(format!(
            "sequence {} has {} rows, fewer than {}; skipped",
            encoded[i].sequence_id,
            lengths[i],
            cfg.n_back + cfg.m_fwd
        ));
    }
    if spans.is_empty() {
        return Err(PipelineError::NoPairs);
    }
    let rows: Vec<&EncodedRow> = encoded.iter().flat_map(|s| &s.rows).collect();
    let (train_spans, test_spans) = split_train_test(spans, cfg.split_fraction)?;
    if test_spans.is_empty() {
        diagnostics.push("test split is empty".into());
    }

    let norm = if cfg.legacy_norm {
        NormalizationParams::fit(rows.iter().map(|r| &r.values))?
    } else {
        let used = train_rows(&train_spans);
        NormalizationParams::fit(used.into_iter().map(|i| &rows[i].values))?
    };
    let to_pair = |w: &WindowSpan| WindowedPair {
        x: w.inputs().map(|i| norm.normalize_row(&rows[i].values)).collect(),
        y: w.targets().map(|i| norm.normalize_duration(rows[i].values[DURATION])).collect(),
        target_actions: w.targets().map(|i| rows[i].action_id.clone()).collect(),
    };
    Ok(PreparedData {
        train: train_spans.iter().map(to_pair).collect(),
        test: test_spans.iter().map(to_pair).collect(),
        norm,
        action_codes: codes,
        removed_count,
        diagnostics,
    })
}

/// Sorted, deduplicated row indices touched by the given windows.
pub fn train_rows(spans: &[WindowSpan]) -> Vec<usize> {
    let mut used: Vec<usize> = spans.iter().flat_map(|w| w.start..w.start + w.n_back + w.m_fwd).collect();
    used.sort_unstable();
    used.dedup();
    used
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ActionDurationTuple, ActionKey, SignificantTuple};
    use proptest::prelude::*;

    fn seq(id: &str, durations: &[f64], with_boundary: bool) -> ActionSequence {
        let mut t = 0i64;
        let mut tuples = Vec::new();
        if with_boundary {
            tuples.push(ActionDurationTuple::from_timestamps(ActionKey::new("S", "V", "AC000"), 0, 1000));
            t = 1000;
        }
        for (i, d) in durations.iter().enumerate() {
            let end = t + (d * 1000.0) as i64;
            tuples.push(ActionDurationTuple::from_timestamps(ActionKey::new("S", "V", &format!("AC{:03}", i + 1)), t, end));
            t = end;
        }
        ActionSequence { sequence_id: id.into(), vehicle_code: "V".into(), tuples }
    }

    fn label(id: &str, class: SequenceClass) -> SequenceLabel {
        SequenceLabel { sequence_id: id.into(), class, significant: vec![] }
    }

    /// Every window that fits, found by checking all start positions.
    fn brute_force_windows(lengths: &[usize], n: usize, m: usize, separate: bool) -> Vec<usize> {
        let total: usize = lengths.iter().sum();
        let owner: Vec<usize> = lengths.iter().enumerate().flat_map(|(i, &l)| std::iter::repeat_n(i, l)).collect();
        (0..total)
            .filter(|&s| s + n + m <= total)
            .filter(|&s| !separate || owner[s] == owner[s + n + m - 1])
            .collect()
    }

    #[test]
    fn aa_removes_tuple_aps_removes_sequence() {
        let s = seq("a", &[5.0, 90.0, 5.0], false);
        let gmax: BTreeMap<String, f64> = [("AC001", 50.0), ("AC002", 50.0), ("AC003", 50.0)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let (aa, removed) = filter_outliers(vec![s.clone()], &gmax, OutlierMode::Aa);
        assert_eq!(removed, 1);
        let ids: Vec<_> = aa[0].tuples.iter().map(|t| t.action_id()).collect();
        assert_eq!(ids, ["AC001", "AC003"]);
        let (aps, removed) = filter_outliers(vec![s.clone()], &gmax, OutlierMode::Aps);
        assert!(aps.is_empty());
        assert_eq!(removed, 3);
        let ok = seq("b", &[5.0, 5.0], false);
        for mode in [OutlierMode::Aa, OutlierMode::Aps, OutlierMode::None] {
            assert_eq!(filter_outliers(vec![ok.clone()], &gmax, mode), (vec![ok.clone()], 0));
        }
    }

    #[test]
    fn drop_misc_keeps_everything_else() {
        let seqs = vec![seq("n", &[1.0], false), seq("m", &[1.0], false), seq("k", &[1.0], false)];
        let labels = vec![
            label("n", SequenceClass::Normal),
            label("m", SequenceClass::Misc),
            label("k", SequenceClass::KnockOnError),
        ];
        let kept: Vec<_> = drop_misc(seqs, &labels).into_iter().map(|s| s.sequence_id).collect();
        assert_eq!(kept, ["n", "k"]);
        assert!(drop_misc(vec![seq("m", &[1.0], false)], &labels).is_empty());
    }

    #[test]
    fn normalization_examples() {
        let r = FeatureRange { min: 0.0, max: 10.0, constant: false };
        assert_eq!(r.normalize(5.0), 0.0);
        assert_eq!(r.normalize(0.0), -1.0);
        assert_eq!(r.normalize(10.0), 1.0);
        let c = FeatureRange { min: 3.0, max: 3.0, constant: true };
        assert_eq!(c.normalize(3.0), 3.0);
    }

    #[test]
    fn window_examples() {
        let (w, short) = make_windows(&[9], 5, 2, true).unwrap();
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(short.is_empty());
        let (w, short) = make_windows(&[3], 5, 2, true).unwrap();
        assert!(w.is_empty());
        assert_eq!(short, [0]);
        let (w, _) = make_windows(&[5, 5], 5, 2, false).unwrap();
        assert_eq!(w.len(), 4);
        assert!(w.iter().any(|w| w.start < 5 && w.start + 7 > 5));
        assert!(make_windows(&[5], 0, 2, true).is_err());
    }

    #[test]
    fn boundary_rows_do_not_count() {
        let s = seq("a", &[1.0; 9], true);
        assert_eq!(s.tuples.len(), 10);
        let codes = action_codes(std::slice::from_ref(&s), "AC000");
        let enc = encode_features(std::slice::from_ref(&s), std::slice::from_ref(&s), &[label("a", SequenceClass::Normal)], &codes, "AC000").unwrap();
        assert_eq!(enc[0].rows.len(), 9);
        assert_eq!(codes["AC001"], 1);
        assert!(!codes.contains_key("AC000"));
    }

    #[test]
    fn split_examples() {
        let (a, b) = split_train_test((0..10).collect(), 0.8).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a, b) = split_train_test(vec![0], 0.8).unwrap();
        assert_eq!((a.len(), b.len()), (1, 0));
        let (a, b) = split_train_test(vec![(); 137_605], 0.8).unwrap();
        assert_eq!((a.len(), b.len()), (110_084, 27_521));
        assert!(split_train_test(vec![1], 1.0).is_err());
    }

    #[test]
    fn error_tags_follow_labels() {
        let s = seq("a", &[1.0, 9.0, 4.0, 1.0], true);
        let mut l = label("a", SequenceClass::SourceAndKnockOn);
        l.significant = vec![
            SignificantTuple { index: 2, action_id: "AC002".into(), duration: 9.0, cause: TupleCause::Source, matched_error_ids: vec!["E1".into(), "E2".into()] },
            SignificantTuple { index: 3, action_id: "AC003".into(), duration: 4.0, cause: TupleCause::KnockOn, matched_error_ids: vec![] },
        ];
        let codes = action_codes(std::slice::from_ref(&s), "AC000");
        let enc = encode_features(std::slice::from_ref(&s), std::slice::from_ref(&s), &[l], &codes, "AC000").unwrap();
        let tags: Vec<(f64, f64)> = enc[0].rows.iter().map(|r| (r.values[3], r.values[4])).collect();
        assert_eq!(tags, [(1.0, 0.0), (2.0, 2.0), (3.0, 0.0), (1.0, 0.0)]);

        let m = seq("m", &[1.0, 1.0], false);
        let codes = action_codes(std::slice::from_ref(&m), "AC000");
        let enc = encode_features(std::slice::from_ref(&m), std::slice::from_ref(&m), &[label("m", SequenceClass::Misc)], &codes, "AC000").unwrap();
        assert!(enc[0].rows.iter().all(|r| r.values[3] == ERROR_UNDEFINED));
    }

    #[test]
    fn missing_label_is_an_error() {
        let s = seq("a", &[1.0], false);
        let codes = action_codes(std::slice::from_ref(&s), "AC000");
        assert_eq!(
            encode_features(std::slice::from_ref(&s), std::slice::from_ref(&s), &[], &codes, "AC000"),
            Err(PipelineError::MissingLabel("a".into()))
        );
    }

    #[test]
    fn presets_resolve() {
        assert_eq!(preset("7-5").unwrap(), (7, 5));
        assert_eq!(preset("5-7").unwrap(), (5, 7));
        assert!(preset("3-3").is_err());
    }

    fn report_for(seqs: &[ActionSequence]) -> ClassificationReport {
        ClassificationReport {
            labels: seqs.iter().map(|s| label(&s.sequence_id, SequenceClass::Normal)).collect(),
            fractions: BTreeMap::new(),
            outlier_removed_count: 0,
            actions: BTreeMap::new(),
        }
    }

    fn corpus(durations: &[Vec<f64>]) -> Vec<ActionSequence> {
        durations.iter().enumerate().map(|(i, d)| {
            let mut s = seq(&format!("s{i}"), d, true);
            let shift = i as i64 * 1_000_000;
            for t in &mut s.tuples {
                t.start_ts += shift;
                t.end_ts += shift;
            }
            s
        }).collect()
    }

    proptest! {
        #[test]
        fn window_count_matches_enumeration(
            lengths in prop::collection::vec(0usize..15, 1..8),
            n in 1usize..6,
            m in 1usize..6,
            separate: bool,
        ) {
            let (w, _) = make_windows(&lengths, n, m, separate).unwrap();
            let starts: Vec<usize> = w.iter().map(|w| w.start).collect();
            prop_assert_eq!(&starts, &brute_force_windows(&lengths, n, m, separate));
            if separate {
                let per_seq: usize = lengths.iter().map(|&l| (l + 1).saturating_sub(n + m)).sum();
                prop_assert_eq!(w.len(), per_seq);
            }
        }

        #[test]
        fn normalize_round_trips(min in -1e3f64..1e3, width in 1e-3f64..1e3, t in 0.0f64..1.0) {
            let r = FeatureRange { min, max: min + width, constant: false };
            let v = min + t * width;
            prop_assert!((r.denormalize(r.normalize(v)) - v).abs() <= 1e-9 * (1.0 + v.abs()));
            prop_assert!(r.normalize(v).abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn normalization_sees_train_rows_only(
            durations in prop::collection::vec(prop::collection::vec(0.5f64..50.0, 7..12), 3..8),
        ) {
            let seqs = corpus(&durations);
            let cfg = PipelineConfig { drop_misc: false, ..PipelineConfig::default() };
            let prepared = prepare(&seqs, &report_for(&seqs), &cfg).unwrap();

            let codes = action_codes(&seqs, "AC000");
            let labels = report_for(&seqs).labels;
            let enc = encode_features(&seqs, &seqs, &labels, &codes, "AC000").unwrap();
            let rows: Vec<[f64; FEATURES]> = enc.iter().flat_map(|s| s.rows.iter().map(|r| r.values)).collect();
            let lengths: Vec<usize> = enc.iter().map(|s| s.rows.len()).collect();
            let (spans, _) = make_windows(&lengths, 5, 2, true).unwrap();
            let n_train = (0.8 * spans.len() as f64).ceil() as usize;
            let refit = NormalizationParams::fit(train_rows(&spans[..n_train]).into_iter().map(|i| &rows[i])).unwrap();
            prop_assert_eq!(&prepared.norm, &refit);

            let last_row = rows.len() - 1;
            prop_assume!(!train_rows(&spans[..n_train]).contains(&last_row));
            let mut altered = durations.clone();
            let last = altered.len() - 1;
            let l = altered[last].len();
            altered[last][l - 1] *= 100.0;
            let seqs2 = corpus(&altered);
            let again = prepare(&seqs2, &report_for(&seqs2), &cfg).unwrap();
            prop_assert_eq!(&again.norm, &prepared.norm);
        }

        #[test]
        fn aps_output_respects_globalmax(
            durations in prop::collection::vec(prop::collection::vec(0.5f64..100.0, 1..6), 1..10),
            cap in 10.0f64..90.0,
        ) {
            let seqs: Vec<_> = durations.iter().enumerate().map(|(i, d)| seq(&format!("s{i}"), d, false)).collect();
            let gmax: BTreeMap<String, f64> = (1..=6).map(|i| (format!("AC{i:03}"), cap)).collect();
            let (kept, removed) = filter_outliers(seqs.clone(), &gmax, OutlierMode::Aps);
            prop_assert!(kept.iter().flat_map(|s| &s.tuples).all(|t| t.duration <= cap));
            let before: usize = seqs.iter().map(|s| s.tuples.len()).sum();
            let after: usize = kept.iter().map(|s| s.tuples.len()).sum();
            prop_assert_eq!(before - after, removed);
        }

        #[test]
        fn prepare_is_deterministic(
            durations in prop::collection::vec(prop::collection::vec(0.5f64..50.0, 7..12), 2..6),
        ) {
            let seqs = corpus(&durations);
            let cfg = PipelineConfig::default();
            let a = prepare(&seqs, &report_for(&seqs), &cfg).unwrap();
            let b = prepare(&seqs, &report_for(&seqs), &cfg).unwrap();
            prop_assert_eq!(pairs_to_jsonl(&a.train), pairs_to_jsonl(&b.train));
            prop_assert_eq!(pairs_to_jsonl(&a.test), pairs_to_jsonl(&b.test));
            prop_assert!(a.train.iter().chain(&a.test).flat_map(|p| &p.x).flatten().all(|v| v.abs() <= 1.0));
        }
    }
}
