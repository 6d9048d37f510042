//! Timestamped dyadic events, the association graph they build, and the CSV
//! formats used to exchange them.
//!
//! An event stream is a time-ordered list of `(u, v, tau, k)` tuples. Kind
//! `k = 0` is an association (a long-lived structural edge such as a
//! friendship) and `k = 1` is a communication (a short contact such as a
//! message). Association events mutate the [`AssociationState`]; both kinds
//! drive the embedding recursion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Default confidence threshold for rows carrying a `prob` column.
pub const DEFAULT_MIN_PROB: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Association = 0,
    Communication = 1,
}

impl EventKind {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EventKind::Association),
            1 => Some(EventKind::Communication),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub u: usize,
    pub v: usize,
    /// Seconds since the stream origin.
    pub tau: f64,
    pub kind: EventKind,
    pub label: String,
    pub prob: Option<f64>,
}

impl Event {
    pub fn new(u: usize, v: usize, tau: f64, kind: EventKind) -> Self {
        Event {
            u,
            v,
            tau,
            kind,
            label: String::new(),
            prob: None,
        }
    }

    pub fn communication(u: usize, v: usize, tau: f64) -> Self {
        Self::new(u, v, tau, EventKind::Communication)
    }

    pub fn association(u: usize, v: usize, tau: f64) -> Self {
        Self::new(u, v, tau, EventKind::Association)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    fn validate(&self, n_nodes: usize) -> Result<()> {
        ensure!(self.u != self.v, Validation, "self-loop on node {}", self.u);
        ensure!(
            self.u < n_nodes && self.v < n_nodes,
            Validation,
            "node index out of range in ({}, {}) with {} nodes",
            self.u,
            self.v,
            n_nodes
        );
        ensure!(
            self.tau.is_finite() && self.tau >= 0.0,
            Validation,
            "timestamp {} must be finite and non-negative",
            self.tau
        );
        if let Some(p) = self.prob {
            ensure!(
                (0.0..=1.0).contains(&p),
                Validation,
                "prob {} outside [0, 1]",
                p
            );
        }
        Ok(())
    }
}

/// A validated, time-ordered sequence of events over `n_nodes` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    n_nodes: usize,
    /// Absolute wall-clock anchor (seconds) of `tau = 0`.
    pub origin: f64,
}

impl EventStream {
    /// Validates `events` (ordering, self-loops, index range) and wraps them.
    pub fn new(events: Vec<Event>, n_nodes: usize) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            e.validate(n_nodes)
                .map_err(|err| Error::Validation(format!("event {i}: {err}")))?;
        }
        for (i, pair) in events.windows(2).enumerate() {
            ensure!(
                pair[0].tau <= pair[1].tau,
                Validation,
                "timestamps not monotone: event {} (tau={}) precedes event {} (tau={})",
                i,
                pair[0].tau,
                i + 1,
                pair[1].tau
            );
        }
        Ok(EventStream {
            events,
            n_nodes,
            origin: 0.0,
        })
    }

    /// Sorts by timestamp (stable, so equal timestamps keep input order) and
    /// validates.
    pub fn from_unsorted(mut events: Vec<Event>, n_nodes: usize) -> Result<Self> {
        events.sort_by(|a, b| a.tau.total_cmp(&b.tau));
        Self::new(events, n_nodes)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Event> {
        self.events.iter()
    }

    pub fn time_range(&self) -> Option<(f64, f64)> {
        Some((self.events.first()?.tau, self.events.last()?.tau))
    }

    pub fn count_kind(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// Events strictly before `boundary` go left, the rest right.
    pub fn split(&self, boundary: f64) -> (EventStream, EventStream) {
        let at = self.events.partition_point(|e| e.tau < boundary);
        self.split_at(at)
    }

    /// Splits by position: the first `index` events go left.
    pub fn split_at(&self, index: usize) -> (EventStream, EventStream) {
        let index = index.min(self.events.len());
        let (a, b) = self.events.split_at(index);
        if a.is_empty() || b.is_empty() {
            log::warn!(
                "split produced an empty side ({} / {} events)",
                a.len(),
                b.len()
            );
        }
        let make = |events: &[Event]| EventStream {
            events: events.to_vec(),
            n_nodes: self.n_nodes,
            origin: self.origin,
        };
        (make(a), make(b))
    }

    /// Concatenates two streams over the same node set.
    pub fn concat(&self, other: &EventStream) -> Result<EventStream> {
        ensure!(
            self.n_nodes == other.n_nodes,
            Contract,
            "node counts differ ({} vs {})",
            self.n_nodes,
            other.n_nodes
        );
        let mut events = self.events.clone();
        events.extend_from_slice(&other.events);
        let mut out = EventStream::new(events, self.n_nodes)?;
        out.origin = self.origin;
        Ok(out)
    }
}

/// Symmetric binary adjacency over `n` nodes with no self-edges.
///
/// Edges are only ever added: repeated association events are idempotent.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationState {
    rows: Vec<BTreeSet<usize>>,
    last_mutation: Option<f64>,
}

impl AssociationState {
    pub fn empty(n: usize) -> Self {
        AssociationState {
            rows: vec![BTreeSet::new(); n],
            last_mutation: None,
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::empty(n);
        for &(u, v) in edges {
            ensure!(u != v, Validation, "self-loop ({u}, {v}) in association list");
            ensure!(
                u < n && v < n,
                Validation,
                "association ({u}, {v}) out of range for {n} nodes"
            );
            a.insert(u, v);
        }
        Ok(a)
    }

    pub fn n_nodes(&self) -> usize {
        self.rows.len()
    }

    /// One-hop neighbourhood of `u`, in ascending order.
    pub fn neighbors(&self, u: usize) -> &BTreeSet<usize> {
        &self.rows[u]
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        self.rows[u].contains(&v)
    }

    pub(crate) fn set_last_mutation(&mut self, t: Option<f64>) {
        self.last_mutation = t;
    }

    pub fn last_mutation(&self) -> Option<f64> {
        self.last_mutation
    }

    pub fn edge_count(&self) -> usize {
        self.rows.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    /// Undirected edges with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(u, row)| row.range(u + 1..).map(move |&v| (u, v)))
            .collect()
    }

    /// Dense 0/1 matrix, row-major.
    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        let n = self.n_nodes();
        self.rows
            .iter()
            .map(|row| (0..n).map(|j| u8::from(row.contains(&j))).collect())
            .collect()
    }

    /// Returns `true` if the edge was new.
    pub(crate) fn insert(&mut self, u: usize, v: usize) -> bool {
        let fresh = self.rows[u].insert(v);
        self.rows[v].insert(u);
        fresh
    }

    /// Applies an association event in place; returns whether the graph changed.
    pub fn apply_mut(&mut self, e: &Event) -> Result<bool> {
        ensure!(
            e.kind == EventKind::Association,
            Contract,
            "apply_association_event requires k = 0, got a communication event ({}, {})",
            e.u,
            e.v
        );
        ensure!(e.u != e.v, Contract, "self-loop on node {}", e.u);
        let changed = self.insert(e.u, e.v);
        self.last_mutation = Some(e.tau);
        Ok(changed)
    }

    pub fn apply_association_event(&self, e: &Event) -> Result<AssociationState> {
        let mut next = self.clone();
        next.apply_mut(e)?;
        Ok(next)
    }
}

/// Bijective mapping between external node names and internal indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeRegistry {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl NodeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry whose names are just the decimal indices `0..n`.
    pub fn anonymous(n: usize) -> Self {
        let mut r = Self::new();
        for i in 0..n {
            r.insert(i.to_string()).expect("fresh names");
        }
        r
    }

    pub fn insert(&mut self, name: impl Into<String>) -> Result<usize> {
        let name = name.into();
        ensure!(
            !self.index.contains_key(&name),
            Validation,
            "duplicate node name {name:?}"
        );
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            id: usize,
            name: String,
        }
        let mut rows: Vec<Row> = Vec::new();
        let mut rdr = open_csv(path)?;
        for rec in rdr.deserialize() {
            let row: Row = rec.map_err(csv_err)?;
            rows.push(row);
        }
        rows.sort_by_key(|r| r.id);
        let mut reg = Self::new();
        for (expect, row) in rows.into_iter().enumerate() {
            ensure!(
                row.id == expect,
                Validation,
                "node ids must be contiguous from 0; missing id {expect}"
            );
            reg.insert(row.name)?;
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create_csv(path)?;
        w.write_record(["id", "name"]).map_err(csv_err)?;
        for (i, name) in self.names.iter().enumerate() {
            w.write_record([i.to_string(), name.clone()]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct EventRow {
    u: usize,
    v: usize,
    tau: f64,
    k: u8,
    #[serde(default)]
    label: String,
    #[serde(default, deserialize_with = "csv::invalid_option")]
    prob: Option<f64>,
}

/// Result of reading an `events.csv` file.
#[derive(Debug, Clone)]
pub struct LoadedEvents {
    pub stream: EventStream,
    /// Rows discarded because `prob < min_prob`.
    pub dropped: usize,
}

/// Reads and validates an `events.csv` file.
///
/// `registry` fixes the node count; without one it is `max id + 1`. Rows
/// whose `prob` column is present and below `min_prob` are dropped.
pub fn load_events(
    path: &Path,
    registry: Option<&NodeRegistry>,
    min_prob: f64,
) -> Result<LoadedEvents> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let expected = ["u", "v", "tau", "k", "label", "prob"];
    if !headers.iter().take(4).eq(expected.iter().take(4).copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header u,v,tau,k,label,prob, got {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        });
    }

    let mut events = Vec::new();
    let mut lines = Vec::new();
    let mut dropped = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: EventRow = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let kind = EventKind::from_code(row.k).ok_or_else(|| Error::Parse {
            line,
            message: format!("k must be 0 or 1, got {}", row.k),
        })?;
        if let Some(p) = row.prob {
            ensure!(
                (0.0..=1.0).contains(&p),
                Validation,
                "prob {p} outside [0, 1] at line {line}"
            );
            if p < min_prob {
                dropped += 1;
                continue;
            }
        }
        ensure!(row.u != row.v, Validation, "self-loop at line {line}");
        ensure!(
            row.tau.is_finite() && row.tau >= 0.0,
            Validation,
            "negative or non-finite timestamp at line {line}"
        );
        events.push(Event {
            u: row.u,
            v: row.v,
            tau: row.tau,
            kind,
            label: row.label,
            prob: row.prob,
        });
        lines.push(line);
    }

    for (i, w) in events.windows(2).enumerate() {
        ensure!(
            w[0].tau <= w[1].tau,
            Validation,
            "timestamps not monotone: line {} (tau={}) followed by line {} (tau={})",
            lines[i],
            w[0].tau,
            lines[i + 1],
            w[1].tau
        );
    }

    let max_id = events.iter().map(|e| e.u.max(e.v) + 1).max().unwrap_or(0);
    let n_nodes = match registry {
        Some(r) => {
            ensure!(
                max_id <= r.len(),
                Validation,
                "event references node {} but registry has {} nodes",
                max_id - 1,
                r.len()
            );
            r.len()
        }
        None => max_id,
    };
    if dropped > 0 {
        log::info!("{}: dropped {dropped} rows below prob {min_prob}", path.display());
    }
    Ok(LoadedEvents {
        stream: EventStream::new(events, n_nodes)?,
        dropped,
    })
}

pub fn save_events(stream: &EventStream, path: &Path) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["u", "v", "tau", "k", "label", "prob"])
        .map_err(csv_err)?;
    for e in stream.iter() {
        w.write_record([
            e.u.to_string(),
            e.v.to_string(),
            format_f64(e.tau),
            e.kind.index().to_string(),
            e.label.clone(),
            e.prob.map(format_f64).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `assoc_init.csv` (`u,v` per line).
pub fn load_associations(path: &Path, n_nodes: usize) -> Result<AssociationState> {
    #[derive(Deserialize)]
    struct Row {
        u: usize,
        v: usize,
    }
    let mut rdr = open_csv(path)?;
    let mut edges = Vec::new();
    for rec in rdr.deserialize() {
        let row: Row = rec.map_err(csv_err)?;
        edges.push((row.u, row.v));
    }
    AssociationState::from_edges(n_nodes, &edges)
}

pub fn save_associations(assoc: &AssociationState, path: &Path) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["u", "v"]).map_err(csv_err)?;
    for (u, v) in assoc.edges() {
        w.write_record([u.to_string(), v.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

pub(crate) fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

pub(crate) fn create_csv(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

/// Writes a plain text file, mapping errors to [`Error::Io`].
pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("events.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_row_with_blank_prob() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "u,v,tau,k,label,prob\n3,7,540.0,1,SMS,\n");
        let loaded = load_events(&p, None, 0.0).unwrap();
        let e = &loaded.stream.events()[0];
        assert_eq!((e.u, e.v, e.tau, e.kind), (3, 7, 540.0, EventKind::Communication));
        assert_eq!(e.label, "SMS");
        assert_eq!(e.prob, None);
        assert_eq!(loaded.stream.n_nodes(), 8);
    }

    #[test]
    fn drops_rows_below_min_prob() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "u,v,tau,k,label,prob\n0,1,1.0,1,Proximity,0.2\n0,2,2.0,1,SMS,\n",
        );
        let loaded = load_events(&p, None, 0.5).unwrap();
        assert_eq!(loaded.stream.len(), 1);
        assert_eq!(loaded.dropped, 1);
    }

    #[test]
    fn self_loop_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "u,v,tau,k,label,prob\n0,1,1.0,1,SMS,\n3,3,540.0,1,SMS,\n");
        let err = load_events(&p, None, 0.0).unwrap_err().to_string();
        assert!(err.contains("self-loop at line 3"), "{err}");
    }

    #[test]
    fn malformed_row_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "u,v,tau,k,label,prob\n0,1,abc,1,SMS,\n");
        match load_events(&p, None, 0.0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_monotone_names_pair() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "u,v,tau,k,label,prob\n0,1,5.0,1,,\n1,2,4.0,1,,\n");
        let err = load_events(&p, None, 0.0).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn neighbors_basics() {
        let a = AssociationState::from_edges(5, &[(1, 3)]).unwrap();
        assert_eq!(a.neighbors(1).iter().copied().collect::<Vec<_>>(), vec![3]);
        assert!(AssociationState::empty(5).neighbors(2).is_empty());
        let b = AssociationState::empty(6)
            .apply_association_event(&Event::association(2, 5, 1.0))
            .unwrap();
        assert!(b.neighbors(5).contains(&2) && b.neighbors(2).contains(&5));
    }

    #[test]
    fn association_update_is_idempotent_and_checks_kind() {
        let e = Event::association(1, 3, 2.0);
        let a = AssociationState::empty(4).apply_association_event(&e).unwrap();
        assert_eq!(a.edges(), vec![(1, 3)]);
        let b = a.apply_association_event(&e).unwrap();
        assert_eq!(a.to_dense(), b.to_dense());
        assert!(matches!(
            a.apply_association_event(&Event::communication(1, 3, 3.0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn split_sizes() {
        let events: Vec<_> = (0..10)
            .map(|i| Event::communication(0, 1, i as f64))
            .collect();
        let s = EventStream::new(events, 2).unwrap();
        let (a, b) = s.split(6.5);
        assert_eq!((a.len(), b.len()), (7, 3));
        let (a, b) = s.split(-1.0);
        assert_eq!((a.len(), b.len()), (0, 10));
    }

    #[test]
    fn registry_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = NodeRegistry::new();
        r.insert("alice").unwrap();
        r.insert("bob").unwrap();
        assert!(r.insert("bob").is_err());
        let p = dir.path().join("nodes.csv");
        r.save(&p).unwrap();
        assert_eq!(NodeRegistry::load(&p).unwrap(), r);
    }

    fn arb_events() -> impl Strategy<Value = Vec<Event>> {
        prop::collection::vec((0usize..8, 1usize..8, 0.0f64..100.0, any::<bool>()), 0..40)
            .prop_map(|raw| {
                raw.into_iter()
                    .map(|(u, off, tau, assoc)| {
                        let v = (u + off) % 8;
                        let kind = if assoc {
                            EventKind::Association
                        } else {
                            EventKind::Communication
                        };
                        Event::new(u, v, tau, kind)
                    })
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn association_state_stays_symmetric(events in arb_events()) {
            let mut a = AssociationState::empty(8);
            for e in events.iter().filter(|e| e.kind == EventKind::Association) {
                a = a.apply_association_event(e).unwrap();
            }
            let dense = a.to_dense();
            for i in 0..8 {
                prop_assert_eq!(dense[i][i], 0);
                for j in 0..8 {
                    prop_assert_eq!(dense[i][j], dense[j][i]);
                }
            }
        }

        #[test]
        fn split_then_concat_is_identity(events in arb_events(), boundary in -10.0f64..110.0) {
            let s = EventStream::from_unsorted(events, 8).unwrap();
            for w in s.events().windows(2) {
                prop_assert!(w[0].tau <= w[1].tau);
            }
            let (a, b) = s.split(boundary);
            prop_assert!(a.iter().all(|e| e.tau < boundary));
            prop_assert!(b.iter().all(|e| e.tau >= boundary));
            prop_assert_eq!(a.concat(&b).unwrap(), s);
        }
    }
}
