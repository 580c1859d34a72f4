//! Recall@N, temporal gap matrices, Boost, and degree-bucketed improvement.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::store::Category;

pub const DEFAULT_NS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ForwardOnly,
    ForwardAndBackward,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ns: Vec<usize>,
    /// Direction used for the flat export and degree analysis.
    pub direction: Direction,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ns: DEFAULT_NS.to_vec(), direction: Direction::ForwardAndBackward }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ns[0] == 0 || self.ns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("N list must be positive and strictly increasing, got {:?}", self.ns)));
        }
        Ok(())
    }
}

/// Fraction of queries whose gold id is within the top N of its ranked
/// list. Golds missing from their list count as misses and are returned in
/// the second slot.
pub fn recall_at_n(ranked: &[Vec<usize>], gold: &[usize], ns: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    if ranked.len() != gold.len() {
        return Err(Error::shape("recall_at_n", format!("{} lists for {} golds", ranked.len(), gold.len())));
    }
    let ranks: Vec<Option<usize>> = ranked.iter().zip(gold).map(|(list, g)| list.iter().position(|c| c == g)).collect();
    let missing = ranks.iter().enumerate().filter(|(_, r)| r.is_none()).map(|(q, _)| q).collect();
    Ok((recall_from_ranks(&ranks, ns), missing))
}

/// Recall@N from zero-based gold ranks (`None` = never retrieved).
pub fn recall_from_ranks(ranks: &[Option<usize>], ns: &[usize]) -> Vec<f64> {
    if ranks.is_empty() {
        return vec![0.0; ns.len()];
    }
    ns.iter()
        .map(|&n| ranks.iter().filter(|r| r.is_some_and(|r| r < n)).count() as f64 / ranks.len() as f64)
        .collect()
}

/// Candidate ids by descending score, ties to the lower id.
pub fn rank_candidates(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// Zero-based position `gold` would take in [`rank_candidates`].
pub fn gold_rank(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    scores.iter().enumerate().filter(|&(j, &s)| s.total_cmp(&g).is_gt() || (s == g && j < gold)).count()
}

/// Dot-product retrieval of every mention row against every entity row.
pub fn rank_queries(entities: &Tensor, mentions: &Tensor, golds: &[usize]) -> Result<Vec<Option<usize>>> {
    if entities.cols() != mentions.cols() || mentions.rows() != golds.len() {
        return Err(Error::shape("rank_queries", "embedding widths or query count disagree"));
    }
    Ok((0..golds.len())
        .into_par_iter()
        .map(|q| {
            let m = mentions.row(q);
            if golds[q] >= entities.rows() {
                return None;
            }
            let scores: Vec<f64> = (0..entities.rows())
                .map(|e| entities.row(e).iter().zip(m).map(|(a, b)| a * b).sum())
                .collect();
            Some(gold_rank(&scores, golds[q]))
        })
        .collect())
}

/// 100·(model − baseline)/baseline; absent when the baseline is 0.
pub fn boost(model: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (model - baseline) / baseline)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub gold: usize,
    pub category: Category,
    pub rank: Option<usize>,
}

/// All query outcomes of one (train year, test year) evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRanks {
    pub train_year: i32,
    pub test_year: i32,
    pub queries: Vec<QueryOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    Continual,
    New,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::All, Split::Continual, Split::New];

    fn admits(self, c: Category) -> bool {
        match self {
            Split::All => true,
            Split::Continual => c == Category::Continual,
            Split::New => c == Category::New,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::Continual => "continual",
            Split::New => "new",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub train_year: i32,
    pub test_year: i32,
    pub split: Split,
    pub queries: usize,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapAggregate {
    pub direction: Direction,
    pub split: Split,
    pub gap: u32,
    /// Cells averaged into this entry.
    pub cells: usize,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapMatrix {
    pub ns: Vec<usize>,
    pub cells: Vec<Cell>,
    pub per_gap: Vec<GapAggregate>,
}

fn admissible(direction: Direction, train: i32, test: i32) -> Option<u32> {
    let delta = test - train;
    match direction {
        Direction::ForwardAndBackward => Some(delta.unsigned_abs()),
        Direction::ForwardOnly => (delta >= 0).then_some(delta as u32),
    }
}

impl GapMatrix {
    /// Per-cell recall for every split, then per-gap means of cell values
    /// under both directions. Cells with no queries in a split are left out.
    pub fn from_ranks(ns: &[usize], runs: &[CellRanks]) -> Self {
        let mut cells = Vec::new();
        for run in runs {
            for split in Split::ALL {
                let ranks: Vec<Option<usize>> =
                    run.queries.iter().filter(|q| split.admits(q.category)).map(|q| q.rank).collect();
                if ranks.is_empty() {
                    continue;
                }
                cells.push(Cell {
                    train_year: run.train_year,
                    test_year: run.test_year,
                    split,
                    queries: ranks.len(),
                    recall: recall_from_ranks(&ranks, ns),
                });
            }
        }
        cells.sort_by_key(|c| (c.train_year, c.test_year, c.split));
        let per_gap = aggregate(ns.len(), &cells);
        GapMatrix { ns: ns.to_vec(), cells, per_gap }
    }

    /// Rebuilds a matrix from already computed cells.
    pub fn from_cells(ns: &[usize], mut cells: Vec<Cell>) -> Result<Self> {
        if let Some(c) = cells.iter().find(|c| c.recall.len() != ns.len()) {
            return Err(Error::Data(format!("cell {}->{} has {} recall values, expected {}", c.train_year, c.test_year, c.recall.len(), ns.len())));
        }
        cells.sort_by_key(|c| (c.train_year, c.test_year, c.split));
        let per_gap = aggregate(ns.len(), &cells);
        Ok(GapMatrix { ns: ns.to_vec(), cells, per_gap })
    }

    pub fn gap(&self, direction: Direction, split: Split, gap: u32) -> Option<&GapAggregate> {
        self.per_gap.iter().find(|a| a.direction == direction && a.split == split && a.gap == gap)
    }

    pub fn cell(&self, train: i32, test: i32, split: Split) -> Option<&Cell> {
        self.cells.iter().find(|c| c.train_year == train && c.test_year == test && c.split == split)
    }
}

fn aggregate(width: usize, cells: &[Cell]) -> Vec<GapAggregate> {
    let mut groups: BTreeMap<(Direction, Split, u32), Vec<&Cell>> = BTreeMap::new();
    for c in cells {
        for d in [Direction::ForwardOnly, Direction::ForwardAndBackward] {
            if let Some(g) = admissible(d, c.train_year, c.test_year) {
                groups.entry((d, c.split, g)).or_default().push(c);
            }
        }
    }
    groups
        .into_iter()
        .map(|((direction, split, gap), members)| {
            let recall = (0..width)
                .map(|k| members.iter().map(|c| c.recall[k]).sum::<f64>() / members.len() as f64)
                .collect();
            GapAggregate { direction, split, gap, cells: members.len(), recall }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// Inclusive lower degree bound.
    pub lo: usize,
    /// Exclusive upper bound; `None` for the last, open bucket.
    pub hi: Option<usize>,
    pub count: usize,
    pub mean_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeBucketReport {
    pub buckets: Vec<Bucket>,
    /// Least-squares slope of improvement on degree.
    pub slope: Option<f64>,
    pub points: usize,
}

pub const DEFAULT_DEGREE_EDGES: [usize; 7] = [0, 1, 2, 4, 8, 16, 32];

/// Ordinary least squares slope; `None` with fewer than two distinct x.
pub fn ls_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Mean improvement per degree bucket (`edges` are the sorted lower bounds,
/// starting at 0) and the regression slope over all points.
pub fn degree_report(points: &[(usize, f64)], edges: &[usize]) -> Result<DegreeBucketReport> {
    if edges.first() != Some(&0) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("degree bucket edges must start at 0 and increase, got {edges:?}")));
    }
    let mut sums = vec![(0.0, 0usize); edges.len()];
    for &(deg, imp) in points {
        let b = edges.partition_point(|&e| e <= deg) - 1;
        sums[b].0 += imp;
        sums[b].1 += 1;
    }
    let buckets = sums
        .iter()
        .enumerate()
        .map(|(b, &(s, c))| Bucket {
            lo: edges[b],
            hi: edges.get(b + 1).copied(),
            count: c,
            mean_improvement: (c > 0).then(|| s / c as f64),
        })
        .collect();
    let xy: Vec<(f64, f64)> = points.iter().map(|&(d, i)| (d as f64, i)).collect();
    Ok(DegreeBucketReport { buckets, slope: ls_slope(&xy), points: points.len() })
}

/// (gold degree, model hit@1 − baseline hit@1) for every query of every
/// cell whose gap under `direction` is at least `min_gap`. Both run lists
/// must cover the same cells with the same query order.
pub fn improvement_points(
    model: &[CellRanks],
    baseline: &[CellRanks],
    degree_of: impl Fn(i32, usize) -> usize,
    direction: Direction,
    min_gap: u32,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for m in model {
        let Some(gap) = admissible(direction, m.train_year, m.test_year) else { continue };
        if gap < min_gap {
            continue;
        }
        let b = baseline
            .iter()
            .find(|b| b.train_year == m.train_year && b.test_year == m.test_year)
            .ok_or_else(|| Error::Data(format!("baseline lacks cell {}->{}", m.train_year, m.test_year)))?;
        if b.queries.len() != m.queries.len() {
            return Err(Error::Data(format!("query sets differ in cell {}->{}", m.train_year, m.test_year)));
        }
        for (qm, qb) in m.queries.iter().zip(&b.queries) {
            let hit = |r: Option<usize>| f64::from(u8::from(r == Some(0)));
            out.push((degree_of(m.train_year, qm.gold), hit(qm.rank) - hit(qb.rank)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostEntry {
    pub direction: Direction,
    pub split: Split,
    pub gap: u32,
    pub n: usize,
    pub model: f64,
    pub baseline: f64,
    pub boost: Option<f64>,
}

pub fn boosts(model: &GapMatrix, baseline: &GapMatrix) -> Vec<BoostEntry> {
    let mut out = Vec::new();
    for agg in &model.per_gap {
        let Some(base) = baseline.gap(agg.direction, agg.split, agg.gap) else { continue };
        for (k, &n) in model.ns.iter().enumerate() {
            out.push(BoostEntry {
                direction: agg.direction,
                split: agg.split,
                gap: agg.gap,
                n,
                model: agg.recall[k],
                baseline: base.recall[k],
                boost: boost(agg.recall[k], base.recall[k]),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub matrix: GapMatrix,
}

/// The single JSON evaluation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub per_cell: Vec<ModelCell>,
    pub per_gap: Vec<ModelGap>,
    pub boosts: Vec<BoostEntry>,
    pub degree_buckets: Option<DegreeBucketReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCell {
    pub model: String,
    #[serde(flatten)]
    pub cell: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGap {
    pub model: String,
    #[serde(flatten)]
    pub aggregate: GapAggregate,
}

impl EvalReport {
    /// `models[0]` is the model of interest; boosts compare it against the
    /// entry named `baseline` when present.
    pub fn build(
        config: serde_json::Value,
        models: &[ModelEntry],
        baseline: Option<&str>,
        degree_buckets: Option<DegreeBucketReport>,
    ) -> Self {
        let per_cell = models
            .iter()
            .flat_map(|m| m.matrix.cells.iter().map(|c| ModelCell { model: m.name.clone(), cell: c.clone() }))
            .collect();
        let per_gap = models
            .iter()
            .flat_map(|m| m.matrix.per_gap.iter().map(|a| ModelGap { model: m.name.clone(), aggregate: a.clone() }))
            .collect();
        let boosts = match (models.first(), baseline.and_then(|b| models.iter().find(|m| m.name == b))) {
            (Some(main), Some(base)) if main.name != base.name => boosts(&main.matrix, &base.matrix),
            _ => Vec::new(),
        };
        EvalReport { config, per_cell, per_gap, boosts, degree_buckets }
    }

    /// Rows per (N, model) plus Boost rows; columns per (split, gap), in the
    /// direction given.
    pub fn to_tsv(&self, direction: Direction) -> String {
        let mut gaps: Vec<u32> = self.per_gap.iter().map(|g| g.aggregate.gap).collect();
        gaps.sort_unstable();
        gaps.dedup();
        let splits = [Split::Continual, Split::New];
        let mut models: Vec<&str> = Vec::new();
        for g in &self.per_gap {
            if !models.contains(&g.model.as_str()) {
                models.push(&g.model);
            }
        }
        let ns: Vec<usize> = self
            .config
            .get("ns")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_else(|| DEFAULT_NS.to_vec());
        let fmt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"));

        let mut out = String::from("N\tmodel");
        for s in splits {
            for g in &gaps {
                let _ = write!(out, "\t{}:{g}", s.name());
            }
        }
        out.push('\n');
        for (k, n) in ns.iter().enumerate() {
            for m in &models {
                let _ = write!(out, "@{n}\t{m}");
                for s in splits {
                    for &g in &gaps {
                        let v = self
                            .per_gap
                            .iter()
                            .find(|e| e.model == *m && e.aggregate.split == s && e.aggregate.gap == g && e.aggregate.direction == direction)
                            .map(|e| e.aggregate.recall[k]);
                        let _ = write!(out, "\t{}", fmt(v, 3));
                    }
                }
                out.push('\n');
            }
            if !self.boosts.is_empty() {
                let _ = write!(out, "@{n}\tboost%");
                for s in splits {
                    for &g in &gaps {
                        let v = self
                            .boosts
                            .iter()
                            .find(|b| b.n == *n && b.split == s && b.gap == g && b.direction == direction)
                            .and_then(|b| b.boost);
                        let _ = write!(out, "\t{}", fmt(v, 2));
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}
