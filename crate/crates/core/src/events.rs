//! Event sequences on a graph and their CSV representation.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest perturbation added to timestamps when jitter is requested.
pub const JITTER_SCALE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub node: usize,
}

/// Events observed on `[0, horizon]`, strictly increasing in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    horizon: f64,
    events: Vec<Event>,
}

impl EventSequence {
    pub fn new(horizon: f64, events: Vec<Event>) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        for (i, e) in events.iter().enumerate() {
            if !(e.t >= 0.0 && e.t <= horizon) {
                return Err(Error::invalid(format!(
                    "event {i} at t={} lies outside [0, {horizon}]",
                    e.t
                )));
            }
            if i > 0 && events[i - 1].t >= e.t {
                return Err(Error::UnorderedHistory(i));
            }
        }
        Ok(Self { horizon, events })
    }

    pub fn empty(horizon: f64) -> Self {
        Self {
            horizon,
            events: Vec::new(),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn max_node(&self) -> Option<usize> {
        self.events.iter().map(|e| e.node).max()
    }

    pub fn node_counts(&self, num_nodes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_nodes];
        for e in &self.events {
            counts[e.node] += 1;
        }
        counts
    }
}

/// Options for reading an event CSV.
#[derive(Debug, Clone, Default)]
pub struct ReadOptions {
    /// Every event node must be below this bound.
    pub num_nodes: Option<usize>,
    /// Sequence ids `0..n` that have no rows are returned as empty sequences.
    pub num_sequences: Option<usize>,
    /// Break timestamp ties by a seeded uniform perturbation of at most
    /// [`JITTER_SCALE`] instead of rejecting them.
    pub jitter_seed: Option<u64>,
}

/// Formats a time with 17 significant digits in plain decimal notation,
/// which round-trips every `f64` exactly.
pub fn format_time(t: f64) -> String {
    if t == 0.0 {
        return "0.0000000000000000".to_string();
    }
    let exponent = t.abs().log10().floor() as i32;
    let decimals = (16 - exponent).max(0) as usize;
    format!("{t:.decimals$}")
}

pub fn write_csv<W: Write>(writer: W, sequences: &[EventSequence]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["seq_id", "t", "v"])?;
    for (s, seq) in sequences.iter().enumerate() {
        for e in &seq.events {
            w.write_record([s.to_string(), format_time(e.t), e.node.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, sequences: &[EventSequence]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), sequences)
}

#[derive(Deserialize)]
struct Row {
    seq_id: usize,
    t: f64,
    v: usize,
}

/// Reads `seq_id,t,v` rows. Rows must be sorted by `(seq_id, t)`; errors
/// carry the 1-based line number of the offending row.
pub fn read_csv<R: Read>(
    reader: R,
    horizon: f64,
    opts: &ReadOptions,
) -> Result<Vec<EventSequence>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["seq_id", "t", "v"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `seq_id,t,v`, found `{}`", headers.as_slice()),
        });
    }
    let mut grouped: BTreeMap<usize, Vec<Event>> = BTreeMap::new();
    let mut last_id: Option<usize> = None;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let fail = |message: String| Error::Parse { line, message };
        let row: Row = record
            .deserialize(Some(&headers))
            .map_err(|e| fail(e.to_string()))?;
        if last_id.is_some_and(|prev| row.seq_id < prev) {
            return Err(fail("rows are not sorted by seq_id".into()));
        }
        last_id = Some(row.seq_id);
        if !(row.t >= 0.0 && row.t <= horizon) {
            return Err(fail(format!("time {} outside [0, {horizon}]", row.t)));
        }
        if let Some(n) = opts.num_nodes {
            if row.v >= n {
                return Err(fail(format!("node {} out of range for {n} nodes", row.v)));
            }
        }
        let seq = grouped.entry(row.seq_id).or_default();
        if let Some(prev) = seq.last() {
            if row.t < prev.t {
                return Err(fail(format!("time {} is earlier than the previous row", row.t)));
            }
            if row.t == prev.t && opts.jitter_seed.is_none() {
                return Err(fail(format!(
                    "duplicate timestamp {} in sequence {} (enable jitter to break ties)",
                    row.t, row.seq_id
                )));
            }
        }
        seq.push(Event {
            t: row.t,
            node: row.v,
        });
    }
    if let Some(n) = opts.num_sequences {
        if let Some((&id, _)) = grouped.range(n..).next() {
            return Err(Error::invalid(format!(
                "sequence id {id} exceeds declared count {n}"
            )));
        }
        for id in 0..n {
            grouped.entry(id).or_default();
        }
    }
    let mut rng = opts.jitter_seed.map(ChaCha8Rng::seed_from_u64);
    grouped
        .into_values()
        .map(|mut events| {
            if let Some(rng) = rng.as_mut() {
                jitter_ties(&mut events, horizon, rng);
            }
            EventSequence::new(horizon, events)
        })
        .collect()
}

/// Moves each tied event forward by a random amount below
/// [`JITTER_SCALE`] until times are strictly increasing.
fn jitter_ties<R: Rng>(events: &mut [Event], horizon: f64, rng: &mut R) {
    for i in 1..events.len() {
        while events[i].t <= events[i - 1].t {
            let bump = rng.gen_range(0.0..JITTER_SCALE).max(f64::EPSILON * horizon);
            events[i].t = (events[i - 1].t + bump).min(horizon);
            if events[i].t == horizon {
                break;
            }
        }
    }
}

pub fn load_csv(
    path: impl AsRef<Path>,
    horizon: f64,
    opts: &ReadOptions,
) -> Result<Vec<EventSequence>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file), horizon, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(times: &[(f64, usize)]) -> EventSequence {
        EventSequence::new(
            10.0,
            times.iter().map(|&(t, node)| Event { t, node }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_unordered_and_out_of_window() {
        let ev = |t| Event { t, node: 0 };
        assert!(matches!(
            EventSequence::new(1.0, vec![ev(0.5), ev(0.2)]),
            Err(Error::UnorderedHistory(1))
        ));
        assert!(EventSequence::new(1.0, vec![ev(0.5), ev(0.5)]).is_err());
        assert!(EventSequence::new(1.0, vec![ev(1.5)]).is_err());
    }

    #[test]
    fn time_format_has_enough_digits_and_round_trips() {
        for t in [0.0, 1.0 / 3.0, 2.5e-7, 49.999_999_999_9, 12345.678] {
            let s = format_time(t);
            assert!(!s.contains('e'));
            let digits = s.trim_start_matches(['0', '.']).chars().filter(char::is_ascii_digit).count();
            assert!(t == 0.0 || digits >= 12, "{s}");
            assert_eq!(s.parse::<f64>().unwrap(), t);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let data = vec![
            seq(&[(0.1, 0), (1.0 / 3.0, 2), (9.75, 1)]),
            seq(&[]),
            seq(&[(std::f64::consts::PI, 1)]),
        ];
        let mut buf = Vec::new();
        write_csv(&mut buf, &data).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("seq_id,t,v\n"));
        let opts = ReadOptions {
            num_sequences: Some(3),
            ..Default::default()
        };
        let back = read_csv(buf.as_slice(), 10.0, &opts).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "seq_id,t,v\n0,0.5,1\n0,abc,1\n";
        match read_csv(text.as_bytes(), 1.0, &ReadOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_timestamps_rejected_unless_jittered() {
        let text = "seq_id,t,v\n0,0.5,1\n0,0.5,0\n";
        match read_csv(text.as_bytes(), 1.0, &ReadOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let opts = ReadOptions {
            jitter_seed: Some(1),
            ..Default::default()
        };
        let seqs = read_csv(text.as_bytes(), 1.0, &opts).unwrap();
        let ev = seqs[0].events();
        assert!(ev[1].t > ev[0].t && ev[1].t - ev[0].t <= JITTER_SCALE);
    }

    #[test]
    fn node_bound_and_header_checked() {
        let text = "seq_id,t,v\n0,0.5,4\n";
        let opts = ReadOptions {
            num_nodes: Some(3),
            ..Default::default()
        };
        assert!(matches!(
            read_csv(text.as_bytes(), 1.0, &opts),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_csv("a,b,c\n".as_bytes(), 1.0, &opts),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_file_with_declared_count() {
        let opts = ReadOptions {
            num_sequences: Some(2),
            ..Default::default()
        };
        let seqs = read_csv("seq_id,t,v\n".as_bytes(), 1.0, &opts).unwrap();
        assert_eq!(seqs.len(), 2);
        assert!(seqs.iter().all(EventSequence::is_empty));
    }
}
