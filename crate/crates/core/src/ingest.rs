//! CSV ingestion: cycle-time events and error reports, start/end pairing,
//! sequence assembly at boundary actions, and hierarchy removal.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{sort_canonical, ActionDurationTuple, ActionKey, ActionSequence, ErrorReport};

pub const CYCLE_TIMES_HEADER: [&str; 7] = [
    "sequence_id",
    "station",
    "vehicle_code",
    "action_id",
    "event",
    "timestamp_ms",
    "duration_ms",
];

pub const ERROR_REPORTS_HEADER: [&str; 6] =
    ["error_id", "start_ts_ms", "end_ts_ms", "station", "area", "message"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing or malformed header; expected `{expected}`")]
    MissingHeader { expected: String },
    #[error("csv read failed: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    FieldCount,
    ParseFailure,
    OrphanStart,
    OrphanEnd,
    DurationMismatch,
    Warning,
}

/// Non-fatal finding, emitted as a JSON line `{row, kind, detail}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub row: Option<u64>,
    pub kind: DiagnosticKind,
    pub detail: String,
}

impl Diagnostic {
    fn at(row: Option<u64>, kind: DiagnosticKind, detail: impl Into<String>) -> Self {
        Self { row, kind, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub sequence_id: String,
    pub station: String,
    pub vehicle_code: String,
    pub action_id: String,
    pub event: EventKind,
    pub timestamp_ms: i64,
    /// Present iff `event == End`.
    pub duration_ms: Option<i64>,
    /// 1-based line number in the source file, when parsed from CSV.
    #[serde(skip)]
    pub row: Option<u64>,
}

/// An action tuple that remembers which logged sequence it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcedTuple {
    pub sequence_id: String,
    pub tuple: ActionDurationTuple,
}

/// Action ids to drop because they aggregate the times of their sub-actions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub superordinate_ids: BTreeSet<String>,
}

fn check_header<R: Read>(
    reader: &mut csv::Reader<R>,
    expected: &[&str],
) -> Result<(), IngestError> {
    let missing = || IngestError::MissingHeader { expected: expected.join(",") };
    let header = reader.headers().map_err(|_| missing())?;
    if header.len() != expected.len() || header.iter().zip(expected).any(|(h, e)| h.trim() != *e) {
        return Err(missing());
    }
    Ok(())
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(input)
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<T, String> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| format!("cannot parse {name} from `{raw}`"))
}

fn parse_cycle_row(record: &csv::StringRecord, row: Option<u64>) -> Result<RawEvent, String> {
    let text = |i: usize| record.get(i).unwrap_or("").trim().to_string();
    let event = match record.get(4).map(str::trim) {
        Some("start") => EventKind::Start,
        Some("end") => EventKind::End,
        other => return Err(format!("unknown event `{}`", other.unwrap_or(""))),
    };
    let timestamp_ms = parse_field::<i64>(record, 5, "timestamp_ms")?;
    let duration_raw = record.get(6).unwrap_or("").trim();
    let duration_ms = match (event, duration_raw.is_empty()) {
        (EventKind::End, false) => Some(parse_field::<i64>(record, 6, "duration_ms")?),
        (EventKind::End, true) => return Err("end event without duration_ms".into()),
        (EventKind::Start, true) => None,
        (EventKind::Start, false) => return Err("start event carries duration_ms".into()),
    };
    if duration_ms.is_some_and(|d| d < 0) {
        return Err("negative duration_ms".into());
    }
    let ev = RawEvent {
        sequence_id: text(0),
        station: text(1),
        vehicle_code: text(2),
        action_id: text(3),
        event,
        timestamp_ms,
        duration_ms,
        row,
    };
    if ev.sequence_id.is_empty() || ev.station.is_empty() || ev.vehicle_code.is_empty() || ev.action_id.is_empty() {
        return Err("empty identifier field".into());
    }
    Ok(ev)
}

/// Parses the cycle-times CSV. Malformed rows become diagnostics.
pub fn parse_cycle_times<R: Read>(input: R) -> Result<(Vec<RawEvent>, Vec<Diagnostic>), IngestError> {
    let mut reader = csv_reader(input);
    check_header(&mut reader, &CYCLE_TIMES_HEADER)?;
    let mut events = Vec::new();
    let mut diags = Vec::new();
    for result in reader.records() {
        let record = result?;
        let row = record.position().map(|p| p.line());
        if record.len() != CYCLE_TIMES_HEADER.len() {
            diags.push(Diagnostic::at(
                row,
                DiagnosticKind::FieldCount,
                format!("expected {} fields, found {}", CYCLE_TIMES_HEADER.len(), record.len()),
            ));
            continue;
        }
        match parse_cycle_row(&record, row) {
            Ok(ev) => events.push(ev),
            Err(detail) => diags.push(Diagnostic::at(row, DiagnosticKind::ParseFailure, detail)),
        }
    }
    Ok((events, diags))
}

/// Parses the error-report CSV. Duplicate ids are kept and flagged.
pub fn parse_error_reports<R: Read>(input: R) -> Result<(Vec<ErrorReport>, Vec<Diagnostic>), IngestError> {
    let mut reader = csv_reader(input);
    check_header(&mut reader, &ERROR_REPORTS_HEADER)?;
    let mut reports = Vec::new();
    let mut diags = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for result in reader.records() {
        let record = result?;
        let row = record.position().map(|p| p.line());
        if record.len() != ERROR_REPORTS_HEADER.len() {
            diags.push(Diagnostic::at(
                row,
                DiagnosticKind::FieldCount,
                format!("expected {} fields, found {}", ERROR_REPORTS_HEADER.len(), record.len()),
            ));
            continue;
        }
        let parsed = (|| -> Result<ErrorReport, String> {
            let start_ts = parse_field::<i64>(&record, 1, "start_ts_ms")?;
            let end_ts = parse_field::<i64>(&record, 2, "end_ts_ms")?;
            if start_ts > end_ts {
                return Err(format!("start_ts_ms {start_ts} after end_ts_ms {end_ts}"));
            }
            let text = |i: usize| record.get(i).unwrap_or("").trim().to_string();
            Ok(ErrorReport {
                error_id: text(0),
                start_ts,
                end_ts,
                station: text(3),
                area: text(4),
                message: text(5),
            })
        })();
        match parsed {
            Ok(report) => {
                let first = *seen.entry(report.error_id.clone()).or_insert(row.unwrap_or(0));
                if first != row.unwrap_or(0) {
                    diags.push(Diagnostic::at(
                        row,
                        DiagnosticKind::Warning,
                        format!("duplicate error_id `{}` (first seen at row {first})", report.error_id),
                    ));
                }
                reports.push(report);
            }
            Err(detail) => diags.push(Diagnostic::at(row, DiagnosticKind::ParseFailure, detail)),
        }
    }
    Ok((reports, diags))
}

/// Matches each start with the next end of the same `(sequence_id, action_id)`.
///
/// Within one timestamp, ends that close an already-open start are applied
/// first, then starts, then the remaining ends; this makes the result
/// independent of the order of simultaneous events. A repeated start
/// supersedes the open one, which is reported as an orphan.
pub fn pair_events(events: &[RawEvent]) -> (Vec<SourcedTuple>, Vec<Diagnostic>) {
    let mut order: Vec<&RawEvent> = events.iter().collect();
    order.sort_by_key(|e| e.timestamp_ms);

    let mut open: HashMap<(&str, &str), &RawEvent> = HashMap::new();
    let mut tuples = Vec::new();
    let mut diags = Vec::new();

    let close = |start: &RawEvent, end: &RawEvent, tuples: &mut Vec<SourcedTuple>, diags: &mut Vec<Diagnostic>| {
        let duration_ms = end.duration_ms.unwrap_or(end.timestamp_ms - start.timestamp_ms);
        if (duration_ms - (end.timestamp_ms - start.timestamp_ms)).abs() > 1 {
            diags.push(Diagnostic::at(
                end.row,
                DiagnosticKind::DurationMismatch,
                format!(
                    "{}: duration_ms {} differs from end-start {}",
                    end.action_id,
                    duration_ms,
                    end.timestamp_ms - start.timestamp_ms
                ),
            ));
        }
        tuples.push(SourcedTuple {
            sequence_id: start.sequence_id.clone(),
            tuple: ActionDurationTuple {
                key: ActionKey::new(&start.station, &start.vehicle_code, &start.action_id),
                start_ts: start.timestamp_ms,
                end_ts: end.timestamp_ms,
                duration: duration_ms as f64 / 1000.0,
            },
        });
    };

    let mut i = 0;
    while i < order.len() {
        let ts = order[i].timestamp_ms;
        let mut j = i;
        while j < order.len() && order[j].timestamp_ms == ts {
            j += 1;
        }
        let group = &order[i..j];
        let mut pending_ends = Vec::new();
        for ev in group.iter().filter(|e| e.event == EventKind::End) {
            let key = (ev.sequence_id.as_str(), ev.action_id.as_str());
            match open.get(&key) {
                Some(start) if start.timestamp_ms < ts => {
                    let start = open.remove(&key).unwrap();
                    close(start, ev, &mut tuples, &mut diags);
                }
                _ => pending_ends.push(*ev),
            }
        }
        for ev in group.iter().filter(|e| e.event == EventKind::Start) {
            let key = (ev.sequence_id.as_str(), ev.action_id.as_str());
            if let Some(prev) = open.insert(key, ev) {
                diags.push(Diagnostic::at(
                    prev.row,
                    DiagnosticKind::OrphanStart,
                    format!("start of {} at {} superseded", prev.action_id, prev.timestamp_ms),
                ));
            }
        }
        for ev in pending_ends {
            let key = (ev.sequence_id.as_str(), ev.action_id.as_str());
            match open.remove(&key) {
                Some(start) => close(start, ev, &mut tuples, &mut diags),
                None => diags.push(Diagnostic::at(
                    ev.row,
                    DiagnosticKind::OrphanEnd,
                    format!("end of {} at {} without start", ev.action_id, ev.timestamp_ms),
                )),
            }
        }
        i = j;
    }

    let mut leftovers: Vec<_> = open.into_values().collect();
    leftovers.sort_by(|a, b| (a.timestamp_ms, &a.action_id).cmp(&(b.timestamp_ms, &b.action_id)));
    for start in leftovers {
        diags.push(Diagnostic::at(
            start.row,
            DiagnosticKind::OrphanStart,
            format!("start of {} at {} never ended", start.action_id, start.timestamp_ms),
        ));
    }

    tuples.sort_by(|a, b| {
        a.tuple
            .canonical_cmp(&b.tuple)
            .then_with(|| a.sequence_id.cmp(&b.sequence_id))
    });
    (tuples, diags)
}

/// Splits a canonically ordered tuple stream at every boundary action.
///
/// The boundary tuple opens (and stays in) its sequence. Tuples before the
/// first boundary form a sequence of their own. Sequence ids come from the
/// first tuple of each sequence.
pub fn assemble_sequences(tuples: Vec<SourcedTuple>, boundary_action: &str) -> Vec<ActionSequence> {
    let mut sequences: Vec<ActionSequence> = Vec::new();
    for sourced in tuples {
        let is_boundary = sourced.tuple.action_id() == boundary_action;
        if is_boundary || sequences.is_empty() {
            sequences.push(ActionSequence {
                sequence_id: sourced.sequence_id.clone(),
                vehicle_code: sourced.tuple.key.vehicle_code.clone(),
                tuples: Vec::new(),
            });
        }
        sequences.last_mut().unwrap().tuples.push(sourced.tuple);
    }
    sequences.into_iter().map(sort_canonical).collect()
}

/// Removes superordinate actions; the boundary action is always kept.
pub fn strip_hierarchy(
    seqs: Vec<ActionSequence>,
    spec: &HierarchySpec,
    boundary_action: &str,
) -> Vec<ActionSequence> {
    if spec.superordinate_ids.is_empty() {
        return seqs;
    }
    seqs.into_iter()
        .filter_map(|mut seq| {
            seq.tuples.retain(|t| {
                t.action_id() == boundary_action || !spec.superordinate_ids.contains(t.action_id())
            });
            (!seq.tuples.is_empty()).then_some(seq)
        })
        .collect()
}

/// Renders sequences as JSON lines, one sequence per line.
pub fn sequences_to_jsonl(seqs: &[ActionSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&serde_json::to_string(s).expect("sequence serializes"));
        out.push('\n');
    }
    out
}

pub fn sequences_from_jsonl(text: &str) -> Result<Vec<ActionSequence>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub fn diagnostics_to_jsonl(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| serde_json::to_string(d).expect("diagnostic serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "sequence_id,station,vehicle_code,action_id,event,timestamp_ms,duration_ms\n";

    fn ev(seq: &str, action: &str, kind: EventKind, ts: i64, dur: Option<i64>) -> RawEvent {
        RawEvent {
            sequence_id: seq.into(),
            station: "S1".into(),
            vehicle_code: "V1".into(),
            action_id: action.into(),
            event: kind,
            timestamp_ms: ts,
            duration_ms: dur,
            row: None,
        }
    }

    fn start(a: &str, ts: i64) -> RawEvent {
        ev("q", a, EventKind::Start, ts, None)
    }

    fn end(a: &str, ts: i64, d: i64) -> RawEvent {
        ev("q", a, EventKind::End, ts, Some(d))
    }

    #[test]
    fn parses_start_end_rows() {
        let csv = format!("{HEADER}q,S1,V1,A,start,1000,\nq,S1,V1,A,end,4000,3000\n");
        let (events, diags) = parse_cycle_times(csv.as_bytes()).unwrap();
        assert_eq!(events.len(), 2);
        assert!(diags.is_empty());
        assert_eq!(events[1].duration_ms, Some(3000));
        assert_eq!(events[0].row, Some(2));
    }

    #[test]
    fn unknown_event_is_a_row_failure() {
        let csv = format!("{HEADER}q,S1,V1,A,finish,1000,\n");
        let (events, diags) = parse_cycle_times(csv.as_bytes()).unwrap();
        assert!(events.is_empty());
        assert_eq!(diags[0].kind, DiagnosticKind::ParseFailure);
        assert_eq!(diags[0].row, Some(2));
    }

    #[test]
    fn header_only_file_is_empty() {
        let (events, diags) = parse_cycle_times(HEADER.as_bytes()).unwrap();
        assert!(events.is_empty() && diags.is_empty());
    }

    #[test]
    fn missing_header_is_fatal() {
        assert!(matches!(
            parse_cycle_times("q,S1,V1,A,start,1000,\n".as_bytes()),
            Err(IngestError::MissingHeader { .. })
        ));
        assert!(matches!(parse_cycle_times("".as_bytes()), Err(IngestError::MissingHeader { .. })));
    }

    #[test]
    fn short_row_is_a_field_count_failure() {
        let csv = format!("{HEADER}q,S1,V1,A,start\n");
        let (_, diags) = parse_cycle_times(csv.as_bytes()).unwrap();
        assert_eq!(diags[0].kind, DiagnosticKind::FieldCount);
    }

    #[test]
    fn pairs_a_simple_action() {
        let (tuples, diags) = pair_events(&[start("A", 1000), end("A", 4000, 3000)]);
        assert!(diags.is_empty());
        assert_eq!(tuples.len(), 1);
        assert_eq!(tuples[0].tuple.duration, 3.0);
    }

    #[test]
    fn end_without_start_is_orphaned() {
        let (tuples, diags) = pair_events(&[end("A", 4000, 3000)]);
        assert!(tuples.is_empty());
        assert_eq!(diags[0].kind, DiagnosticKind::OrphanEnd);
    }

    /// Enumerates every assignment of ends to earlier starts of the same
    /// action (each used at most once) and keeps the complete ones.
    fn brute_force_matchings(events: &[RawEvent]) -> Vec<Vec<(usize, usize)>> {
        let starts: Vec<usize> = (0..events.len()).filter(|&i| events[i].event == EventKind::Start).collect();
        let ends: Vec<usize> = (0..events.len()).filter(|&i| events[i].event == EventKind::End).collect();
        let mut out = Vec::new();
        fn go(
            events: &[RawEvent],
            ends: &[usize],
            starts: &[usize],
            used: &mut Vec<usize>,
            acc: &mut Vec<(usize, usize)>,
            out: &mut Vec<Vec<(usize, usize)>>,
        ) {
            let Some((&e, rest)) = ends.split_first() else {
                out.push(acc.clone());
                return;
            };
            for &s in starts {
                let compatible = !used.contains(&s)
                    && events[s].action_id == events[e].action_id
                    && events[s].timestamp_ms <= events[e].timestamp_ms
                    && events[e].timestamp_ms - events[s].timestamp_ms == events[e].duration_ms.unwrap();
                if compatible {
                    used.push(s);
                    acc.push((s, e));
                    go(events, rest, starts, used, acc, out);
                    acc.pop();
                    used.pop();
                }
            }
        }
        go(events, &ends, &starts, &mut Vec::new(), &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn interleaved_actions_overlap() {
        let events = [start("A", 0), start("B", 1000), end("A", 3000, 3000), end("B", 5000, 4000)];
        let oracle = brute_force_matchings(&events);
        assert_eq!(oracle, vec![vec![(0, 2), (1, 3)]]);

        let (tuples, diags) = pair_events(&events);
        assert!(diags.is_empty());
        let got: Vec<_> = tuples.iter().map(|t| (t.tuple.action_id().to_string(), t.tuple.start_ts, t.tuple.end_ts)).collect();
        assert_eq!(got, vec![("A".into(), 0, 3000), ("B".into(), 1000, 5000)]);
    }

    #[test]
    fn repeated_start_supersedes() {
        let (tuples, diags) = pair_events(&[start("A", 0), start("A", 1000), end("A", 2000, 1000)]);
        assert_eq!(tuples.len(), 1);
        assert_eq!(tuples[0].tuple.start_ts, 1000);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].kind, DiagnosticKind::OrphanStart);
    }

    #[test]
    fn zero_length_action_pairs_regardless_of_row_order() {
        let (a, _) = pair_events(&[start("A", 500), end("A", 500, 0)]);
        let (b, _) = pair_events(&[end("A", 500, 0), start("A", 500)]);
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
    }

    fn seq_tuple(seq: &str, id: &str, start: i64) -> SourcedTuple {
        SourcedTuple {
            sequence_id: seq.into(),
            tuple: ActionDurationTuple::from_timestamps(ActionKey::new("S1", "V1", id), start, start + 500),
        }
    }

    #[test]
    fn assembles_at_boundaries() {
        let tuples = vec![
            seq_tuple("1", "AC000", 0),
            seq_tuple("1", "a", 1000),
            seq_tuple("1", "b", 2000),
            seq_tuple("2", "AC000", 3000),
            seq_tuple("2", "c", 4000),
        ];
        let seqs = assemble_sequences(tuples, "AC000");
        let ids: Vec<Vec<&str>> = seqs.iter().map(|s| s.tuples.iter().map(|t| t.action_id()).collect()).collect();
        assert_eq!(ids, vec![vec!["AC000", "a", "b"], vec!["AC000", "c"]]);
        assert_eq!(seqs[1].sequence_id, "2");
    }

    #[test]
    fn no_boundary_gives_one_sequence() {
        let seqs = assemble_sequences(vec![seq_tuple("1", "a", 0), seq_tuple("1", "b", 10)], "AC000");
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].len(), 2);
        let single = assemble_sequences(vec![seq_tuple("1", "AC000", 0)], "AC000");
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), 1);
        assert!(assemble_sequences(vec![], "AC000").is_empty());
    }

    #[test]
    fn strips_superordinate_actions() {
        let seqs = assemble_sequences(
            vec![seq_tuple("1", "AC000", 0), seq_tuple("1", "R05_total", 10), seq_tuple("1", "a", 20), seq_tuple("2", "R05_total", 30)],
            "ZZZ",
        );
        let spec = HierarchySpec { superordinate_ids: ["R05_total".to_string(), "AC000".to_string()].into() };
        let stripped = strip_hierarchy(seqs.clone(), &spec, "AC000");
        assert_eq!(stripped[0].tuples.iter().map(|t| t.action_id()).collect::<Vec<_>>(), ["AC000", "a"]);

        assert_eq!(strip_hierarchy(seqs.clone(), &HierarchySpec::default(), "AC000"), seqs);

        let only_total = vec![ActionSequence {
            sequence_id: "x".into(),
            vehicle_code: "V1".into(),
            tuples: vec![seq_tuple("x", "R05_total", 0).tuple],
        }];
        assert!(strip_hierarchy(only_total, &spec, "AC000").is_empty());
    }

    const ERR_HEADER: &str = "error_id,start_ts_ms,end_ts_ms,station,area,message\n";

    #[test]
    fn parses_error_reports() {
        let csv = format!("{ERR_HEADER}E1,100,200,S1,A1,gripper fault\n");
        let (reports, diags) = parse_error_reports(csv.as_bytes()).unwrap();
        assert!(diags.is_empty());
        assert_eq!(reports[0].message, "gripper fault");
    }

    #[test]
    fn inverted_report_interval_fails_the_row() {
        let csv = format!("{ERR_HEADER}E1,300,200,S1,A1,x\n");
        let (reports, diags) = parse_error_reports(csv.as_bytes()).unwrap();
        assert!(reports.is_empty());
        assert_eq!(diags[0].kind, DiagnosticKind::ParseFailure);
    }

    #[test]
    fn duplicate_error_ids_are_kept_with_a_warning() {
        let csv = format!("{ERR_HEADER}E1,100,200,S1,A1,x\nE1,150,250,S1,A1,y\n");
        let (reports, diags) = parse_error_reports(csv.as_bytes()).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].kind, DiagnosticKind::Warning);
    }

    fn arb_events() -> impl Strategy<Value = Vec<RawEvent>> {
        prop::collection::vec((0usize..3, any::<bool>(), 0i64..20), 0..40).prop_map(|raw| {
            let ids = ["A", "B", "C"];
            let mut events: Vec<RawEvent> = raw
                .into_iter()
                .map(|(a, is_start, t)| {
                    if is_start {
                        start(ids[a], t * 100)
                    } else {
                        end(ids[a], t * 100, 0)
                    }
                })
                .collect();
            events.sort_by_key(|e| e.timestamp_ms);
            events
        })
    }

    proptest! {
        #[test]
        fn end_events_are_conserved(events in arb_events()) {
            let (tuples, diags) = pair_events(&events);
            let ends = events.iter().filter(|e| e.event == EventKind::End).count();
            let orphan_ends = diags.iter().filter(|d| d.kind == DiagnosticKind::OrphanEnd).count();
            prop_assert_eq!(ends, tuples.len() + orphan_ends);
        }

        #[test]
        fn equal_timestamp_permutations_do_not_matter(events in arb_events(), seed in any::<u64>()) {
            let mut shuffled = events.clone();
            // reverse every run of equal timestamps, rotated by `seed`
            let mut i = 0;
            while i < shuffled.len() {
                let mut j = i;
                while j < shuffled.len() && shuffled[j].timestamp_ms == shuffled[i].timestamp_ms { j += 1; }
                let run = &mut shuffled[i..j];
                run.reverse();
                let len = run.len();
                run.rotate_left((seed as usize) % len);
                i = j;
            }
            let (a, _) = pair_events(&events);
            let (b, _) = pair_events(&shuffled);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn assembly_preserves_tuples(ids in prop::collection::vec(0usize..4, 0..30)) {
            let names = ["AC000", "a", "b", "c"];
            let tuples: Vec<SourcedTuple> = ids.iter().enumerate()
                .map(|(i, &n)| seq_tuple("s", names[n], i as i64 * 1000))
                .collect();
            let flat: Vec<_> = tuples.iter().map(|t| t.tuple.clone()).collect();
            let seqs = assemble_sequences(tuples, "AC000");
            let rejoined: Vec<_> = seqs.into_iter().flat_map(|s| s.tuples).collect();
            prop_assert_eq!(rejoined, flat);
        }
    }
}
