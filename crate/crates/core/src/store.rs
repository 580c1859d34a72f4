//! Entity registry, mention corpus and per-year snapshot graphs.
//!
//! Everything here is immutable once loaded. Internal ids are dense indices
//! assigned from the entity file order and shared by every snapshot year, so
//! cross-year set algebra works on plain `usize` indices.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub qid: String,
    pub title: String,
    pub description: String,
    #[serde(skip)]
    pub internal_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Continual,
    New,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub context_left: Vec<String>,
    pub mention: Vec<String>,
    pub context_right: Vec<String>,
    #[serde(rename = "label_qid")]
    pub gold_qid: String,
    pub category: Category,
    pub year: i32,
    /// Resolved internal id of `gold_qid`.
    #[serde(skip)]
    pub gold: usize,
}

/// Dense-id entity registry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    entities: Vec<EntityRecord>,
    by_qid: HashMap<String, usize>,
}

impl Registry {
    pub fn from_records(records: impl IntoIterator<Item = (String, String, String)>) -> Result<Self> {
        let mut reg = Registry::default();
        for (qid, title, description) in records {
            reg.push(qid, title, description)?;
        }
        Ok(reg)
    }

    fn push(&mut self, qid: String, title: String, description: String) -> Result<usize> {
        if self.by_qid.contains_key(&qid) {
            return Err(Error::DuplicateQid(qid));
        }
        if title.trim().is_empty() {
            return Err(Error::Data(format!("entity {qid} has an empty title")));
        }
        let id = self.entities.len();
        self.by_qid.insert(qid.clone(), id);
        self.entities.push(EntityRecord { qid, title, description, internal_id: id });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&EntityRecord> {
        self.entities.get(id)
    }

    pub fn id_of(&self, qid: &str) -> Option<usize> {
        self.by_qid.get(qid).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, EntityRecord> {
        self.entities.iter()
    }
}

#[derive(Deserialize)]
struct EntityLine {
    qid: String,
    title: String,
    #[serde(default)]
    description: String,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Loads a line-delimited JSON entity file. Ids follow file order.
pub fn load_entities(path: impl AsRef<Path>) -> Result<Registry> {
    let path = path.as_ref();
    let mut reg = Registry::default();
    for (lineno, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EntityLine = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        reg.push(rec.qid, rec.title, rec.description)?;
    }
    Ok(reg)
}

/// Loads line-delimited JSON mentions; every gold label must resolve.
pub fn load_mentions(path: impl AsRef<Path>, registry: &Registry) -> Result<Vec<MentionRecord>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (lineno, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| Error::Malformed { path: path.to_path_buf(), line: lineno + 1, msg };
        let mut rec: MentionRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if rec.mention.is_empty() {
            return Err(malformed("empty mention".into()));
        }
        rec.gold = registry.id_of(&rec.gold_qid).ok_or_else(|| Error::UnknownQid {
            qid: rec.gold_qid.clone(),
            context: format!("{}:{}", path.display(), lineno + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Relation,
    Feature,
}

/// Undirected graph in compressed row form. Rows are sorted and unique,
/// the diagonal is empty and the adjacency is symmetric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotGraph {
    pub year: i32,
    pub kind: GraphKind,
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl SnapshotGraph {
    /// Builds a graph from unordered pairs. Self-loops and duplicates are discarded.
    pub fn from_edges(
        year: i32,
        n: usize,
        kind: GraphKind,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (a, b) in edges {
            if a >= n {
                return Err(Error::NodeOutOfRange { node: a, n });
            }
            if b >= n {
                return Err(Error::NodeOutOfRange { node: b, n });
            }
            if a == b {
                continue;
            }
            rows[a].push(b);
            rows[b].push(a);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for mut row in rows {
            row.sort_unstable();
            row.dedup();
            targets.extend_from_slice(&row);
            offsets.push(targets.len());
        }
        Ok(SnapshotGraph { year, kind, offsets, targets })
    }

    pub fn empty(year: i32, n: usize, kind: GraphKind) -> Self {
        SnapshotGraph { year, kind, offsets: vec![0; n + 1], targets: Vec::new() }
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Sorted neighbor list. Panics if `node >= n`.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.targets[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> Result<usize> {
        if node >= self.n() {
            return Err(Error::NodeOutOfRange { node, n: self.n() });
        }
        Ok(self.offsets[node + 1] - self.offsets[node])
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a < self.n() && self.neighbors(a).binary_search(&b).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len() / 2
    }

    /// Each undirected edge once, as `(low, high)`, in row order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n()).flat_map(move |i| {
            self.neighbors(i).iter().copied().filter(move |&j| j > i).map(move |j| (i, j))
        })
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n()).map(|i| self.offsets[i + 1] - self.offsets[i]).max().unwrap_or(0)
    }
}

/// Counters from edge-list ingestion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub kept: usize,
    pub dropped_unknown: usize,
    pub dropped_self_loops: usize,
    pub duplicates: usize,
}

/// Reads a tab-separated `head_qid<TAB>tail_qid` edge list for one year.
/// Edges with an endpoint missing from the registry are dropped and counted.
pub fn load_snapshot(path: impl AsRef<Path>, year: i32, registry: &Registry) -> Result<(SnapshotGraph, LoadStats)> {
    let path = path.as_ref();
    let mut stats = LoadStats::default();
    let mut pairs = Vec::new();
    for (lineno, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let (Some(head), Some(tail)) = (fields.next(), fields.next()) else {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "expected head_qid<TAB>tail_qid".into(),
            });
        };
        match (registry.id_of(head.trim()), registry.id_of(tail.trim())) {
            (Some(a), Some(b)) if a == b => stats.dropped_self_loops += 1,
            (Some(a), Some(b)) => pairs.push(if a < b { (a, b) } else { (b, a) }),
            _ => stats.dropped_unknown += 1,
        }
    }
    let raw = pairs.len();
    let graph = SnapshotGraph::from_edges(year, registry.len(), GraphKind::Relation, pairs)?;
    stats.kept = graph.edge_count();
    stats.duplicates = raw - stats.kept;
    Ok((graph, stats))
}

/// Yearly relation snapshots over one shared registry.
#[derive(Debug, Clone)]
pub struct TemporalKg {
    pub registry: Registry,
    years: Vec<i32>,
    snapshots: Vec<SnapshotGraph>,
}

impl TemporalKg {
    pub fn new(registry: Registry, mut snapshots: Vec<SnapshotGraph>) -> Result<Self> {
        snapshots.sort_by_key(|g| g.year);
        for w in snapshots.windows(2) {
            if w[0].year == w[1].year {
                return Err(Error::Data(format!("duplicate snapshot year {}", w[0].year)));
            }
        }
        for g in &snapshots {
            if g.n() != registry.len() {
                return Err(Error::SizeMismatch { left: g.n(), right: registry.len() });
            }
            if g.kind != GraphKind::Relation {
                return Err(Error::Data(format!("snapshot {} is not a relation graph", g.year)));
            }
        }
        let years = snapshots.iter().map(|g| g.year).collect();
        Ok(TemporalKg { registry, years, snapshots })
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn snapshot(&self, year: i32) -> Option<&SnapshotGraph> {
        self.years.binary_search(&year).ok().map(|i| &self.snapshots[i])
    }
}
