//! Graph-side inputs: the token feature matrix, the description k-NN
//! feature graph, and positive/negative sample pools.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::store::{EntityRecord, GraphKind, Registry, SnapshotGraph};

/// Inclusive corpus-wide occurrence bounds for retained tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFilterConfig {
    pub min_count: usize,
    pub max_count: usize,
}

impl Default for TokenFilterConfig {
    fn default() -> Self {
        TokenFilterConfig { min_count: 46, max_count: 200 }
    }
}

impl TokenFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_count == 0 || self.min_count > self.max_count {
            return Err(Error::Config(format!(
                "token filter needs 0 < min_count <= max_count, got [{}, {}]",
                self.min_count, self.max_count
            )));
        }
        Ok(())
    }
}

/// Binary entity × retained-token matrix, stored as sorted column sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub m: usize,
    pub rows: Vec<Vec<usize>>,
    /// token id → column
    pub vocab: BTreeMap<usize, usize>,
}

impl FeatureMatrix {
    pub fn densify(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n, self.m]);
        for (i, row) in self.rows.iter().enumerate() {
            for &j in row {
                t.row_mut(i)[j] = 1.0;
            }
        }
        t
    }

    /// Header `n m`, then one line of space-separated columns per entity.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let io = |e| Error::io(path, e);
        writeln!(w, "{} {}", self.n, self.m).map_err(io)?;
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(w, "{}", line.join(" ")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads the on-disk layout. The token map is not part of the file and
    /// comes back empty.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut lines = reader.lines();
        let bad = |line: usize, msg: &str| Error::Malformed { path: path.to_path_buf(), line, msg: msg.to_string() };
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))?.map_err(|e| Error::io(path, e))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(1, "bad header")))
            .collect::<Result<_>>()?;
        let [n, m] = dims[..] else { return Err(bad(1, "header must be `n m`")) };
        let mut rows = Vec::with_capacity(n);
        for (k, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let row: Vec<usize> = line
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| bad(k + 2, "bad column index")))
                .collect::<Result<_>>()?;
            if row.iter().any(|&c| c >= m) {
                return Err(bad(k + 2, "column index out of range"));
            }
            rows.push(row);
        }
        if rows.len() != n {
            return Err(bad(rows.len() + 1, "row count does not match header"));
        }
        Ok(FeatureMatrix { n, m, rows, vocab: BTreeMap::new() })
    }
}

/// Keeps tokens whose total occurrence count over all descriptions lies in
/// `[min_count, max_count]`; row i marks the retained tokens of entity i.
pub fn build_feature_matrix<T>(registry: &Registry, tokenizer: T, cfg: &TokenFilterConfig) -> Result<FeatureMatrix>
where
    T: Fn(&str) -> Vec<usize>,
{
    cfg.validate()?;
    let docs: Vec<Vec<usize>> = registry.iter().map(|e| tokenizer(&e.description)).collect();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for doc in &docs {
        for &t in doc {
            *counts.entry(t).or_default() += 1;
        }
    }
    let vocab: BTreeMap<usize, usize> = counts
        .into_iter()
        .filter(|&(_, c)| c >= cfg.min_count && c <= cfg.max_count)
        .map(|(t, _)| t)
        .enumerate()
        .map(|(col, t)| (t, col))
        .collect();
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let rows = docs
        .iter()
        .map(|doc| {
            let mut row: Vec<usize> = doc.iter().filter_map(|t| vocab.get(t).copied()).collect();
            row.sort_unstable();
            row.dedup();
            row
        })
        .collect();
    Ok(FeatureMatrix { n: registry.len(), m: vocab.len(), rows, vocab })
}

/// Maps an entity description to a fixed-width vector.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, entity: &EntityRecord) -> std::result::Result<Vec<f64>, String>;
}

/// L2-normalized feature-matrix row (zero rows stay zero).
pub struct NormalizedRows<'a>(pub &'a FeatureMatrix);

impl EmbeddingProvider for NormalizedRows<'_> {
    fn dim(&self) -> usize {
        self.0.m
    }

    fn embed(&self, entity: &EntityRecord) -> std::result::Result<Vec<f64>, String> {
        let row = self.0.rows.get(entity.internal_id).ok_or("entity outside feature matrix")?;
        let mut v = vec![0.0; self.0.m];
        if !row.is_empty() {
            let w = 1.0 / (row.len() as f64).sqrt();
            for &c in row {
                v[c] = w;
            }
        }
        Ok(v)
    }
}

/// Externally computed vectors keyed by qid, read from lines of
/// `qid v1 v2 ... vd`.
pub struct EmbeddingTable {
    dim: usize,
    vectors: std::collections::HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = std::collections::HashMap::new();
        let mut dim = None;
        for (k, line) in body.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(qid) = parts.next() else { continue };
            let v: Vec<f64> = parts
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Malformed { path: path.to_path_buf(), line: k + 1, msg: e.to_string() })?;
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::Malformed { path: path.to_path_buf(), line: k + 1, msg: "ragged vector".into() });
            }
            vectors.insert(qid.to_string(), v);
        }
        Ok(EmbeddingTable { dim: dim.unwrap_or(0), vectors })
    }
}

impl EmbeddingProvider for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, entity: &EntityRecord) -> std::result::Result<Vec<f64>, String> {
        self.vectors.get(&entity.qid).cloned().ok_or_else(|| "no vector".to_string())
    }
}

pub fn embed_descriptions(registry: &Registry, provider: &dyn EmbeddingProvider) -> Result<Tensor> {
    let d = provider.dim();
    let mut out = Tensor::zeros(&[registry.len(), d]);
    for e in registry.iter() {
        let v = provider.embed(e).map_err(|msg| Error::Provider { qid: e.qid.clone(), msg })?;
        if v.len() != d || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Provider { qid: e.qid.clone(), msg: format!("bad vector of length {}", v.len()) });
        }
        out.row_mut(e.internal_id).copy_from_slice(&v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGraphConfig {
    pub k: usize,
}

/// Exact cosine k-NN graph. Each non-zero row selects its `k` most similar
/// non-zero rows (ties to the lower id); the union of selections becomes
/// the undirected edge set. Zero rows stay isolated.
pub fn build_feature_graph(embeddings: &Tensor, cfg: &FeatureGraphConfig) -> Result<SnapshotGraph> {
    let n = embeddings.rows();
    if cfg.k == 0 || cfg.k >= n {
        return Err(Error::Config(format!("k-NN needs 1 <= k < n, got k = {} with n = {n}", cfg.k)));
    }
    let norms: Vec<f64> = (0..n).map(|i| embeddings.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let selections: Vec<Vec<(usize, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if norms[i] == 0.0 {
                return Vec::new();
            }
            let a = embeddings.row(i);
            let mut cands: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i && norms[j] != 0.0)
                .map(|j| {
                    let dot: f64 = a.iter().zip(embeddings.row(j)).map(|(x, y)| x * y).sum();
                    (dot / (norms[i] * norms[j]), j)
                })
                .collect();
            let k = cfg.k.min(cands.len());
            let by_rank = |x: &(f64, usize), y: &(f64, usize)| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1));
            if k < cands.len() {
                cands.select_nth_unstable_by(k, by_rank);
                cands.truncate(k);
            }
            cands.into_iter().map(|(_, j)| (i, j)).collect()
        })
        .collect();
    SnapshotGraph::from_edges(0, n, GraphKind::Feature, selections.into_iter().flatten())
}

/// Per-node positive and negative node sets for one (t1 → t2) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePools {
    pub t1: i32,
    pub t2: i32,
    pub kind: GraphKind,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl SamplePools {
    pub fn n(&self) -> usize {
        self.positives.len()
    }
}

fn sorted_difference(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut j = 0;
    for &x in a {
        while j < b.len() && b[j] < x {
            j += 1;
        }
        if j >= b.len() || b[j] != x {
            out.push(x);
        }
    }
    out
}

/// Positives are neighbors present at t2 but not t1; negatives are neighbors
/// present at t1 but gone at t2.
pub fn diff_pools(t1: &SnapshotGraph, t2: &SnapshotGraph) -> Result<SamplePools> {
    if t1.n() != t2.n() {
        return Err(Error::SizeMismatch { left: t1.n(), right: t2.n() });
    }
    if t1.kind != GraphKind::Relation || t2.kind != GraphKind::Relation {
        return Err(Error::Data("diff_pools needs relation graphs".into()));
    }
    let (positives, negatives) = (0..t1.n())
        .map(|i| {
            let (old, new) = (t1.neighbors(i), t2.neighbors(i));
            (sorted_difference(new, old), sorted_difference(old, new))
        })
        .unzip();
    Ok(SamplePools { t1: t1.year, t2: t2.year, kind: GraphKind::Relation, positives, negatives })
}

/// Positives are all feature-graph neighbors; negatives are a seeded uniform
/// sample (without replacement) of at most `negative_cap` non-neighbors.
pub fn pools_feature(graph: &SnapshotGraph, negative_cap: usize, seed: u64) -> Result<SamplePools> {
    if graph.kind != GraphKind::Feature {
        return Err(Error::Data("pools_feature needs a feature graph".into()));
    }
    let n = graph.n();
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for i in 0..n {
        let nbrs = graph.neighbors(i);
        let excluded = nbrs.len() + 1;
        let pool_size = n - excluded;
        let take = negative_cap.min(pool_size);
        let mut rng = crate::seed::rng(&[seed, i as u64, 0xFEA7]);
        let mut picks: Vec<usize> = index::sample(&mut rng, pool_size, take).into_iter().collect();
        picks.sort_unstable();
        // map the k-th non-neighbor rank back to a node id
        let mut chosen = Vec::with_capacity(take);
        let mut rank = 0;
        let mut p = 0;
        let mut nb = 0;
        for node in 0..n {
            if p == picks.len() {
                break;
            }
            if node == i {
                continue;
            }
            if nb < nbrs.len() && nbrs[nb] == node {
                nb += 1;
                continue;
            }
            if picks[p] == rank {
                chosen.push(node);
                p += 1;
            }
            rank += 1;
        }
        positives.push(nbrs.to_vec());
        negatives.push(chosen);
    }
    Ok(SamplePools { t1: graph.year, t2: graph.year, kind: GraphKind::Feature, positives, negatives })
}

#[derive(Serialize, Deserialize)]
struct PoolHeader {
    t1: i32,
    t2: i32,
    kind: GraphKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PoolLine {
    node: usize,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

/// Header object then one `{node, positives, negatives}` line per node.
pub fn save_pools(pools: &SamplePools, path: impl AsRef<Path>, config_hash: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = PoolHeader { t1: pools.t1, t2: pools.t2, kind: pools.kind, config_hash: config_hash.map(str::to_string) };
    writeln!(w, "{}", serde_json::to_string(&header).expect("serializable")).map_err(io)?;
    for (node, (p, q)) in pools.positives.iter().zip(&pools.negatives).enumerate() {
        let line = PoolLine { node, positives: p.clone(), negatives: q.clone() };
        writeln!(w, "{}", serde_json::to_string(&line).expect("serializable")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_pools(path: impl AsRef<Path>) -> Result<SamplePools> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let bad = |line: usize, msg: String| Error::Malformed { path: path.to_path_buf(), line, msg };
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| bad(1, "missing header".into()))?.map_err(|e| Error::io(path, e))?;
    let header: PoolHeader = serde_json::from_str(&first).map_err(|e| bad(1, e.to_string()))?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoolLine = serde_json::from_str(&line).map_err(|e| bad(k + 2, e.to_string()))?;
        if rec.node != positives.len() {
            return Err(bad(k + 2, format!("expected node {}, found {}", positives.len(), rec.node)));
        }
        positives.push(rec.positives);
        negatives.push(rec.negatives);
    }
    Ok(SamplePools { t1: header.t1, t2: header.t2, kind: header.kind, positives, negatives })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn registry(descs: &[&str]) -> Registry {
        Registry::from_records(
            descs.iter().enumerate().map(|(i, d)| (format!("Q{i}"), format!("t{i}"), d.to_string())),
        )
        .unwrap()
    }

    fn ws_tokenizer(text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    #[test]
    fn count_bounds_are_inclusive() {
        // token 1 × 45, token 2 × 46, token 3 × 200, token 4 × 201
        let mut docs = vec![String::new(); 201];
        for (tok, count) in [(1, 45), (2, 46), (3, 200), (4, 201)] {
            for d in docs.iter_mut().take(count) {
                d.push_str(&format!("{tok} "));
            }
        }
        let reg = registry(&docs.iter().map(String::as_str).collect::<Vec<_>>());
        let fm = build_feature_matrix(&reg, ws_tokenizer, &TokenFilterConfig::default()).unwrap();
        assert_eq!(fm.vocab.keys().copied().collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(fm.m, 2);
    }

    #[test]
    fn empty_description_gives_zero_row_and_identical_descriptions_match() {
        let reg = registry(&["1 2", "", "1 2", "2 2"]);
        let cfg = TokenFilterConfig { min_count: 1, max_count: 10 };
        let fm = build_feature_matrix(&reg, ws_tokenizer, &cfg).unwrap();
        assert!(fm.rows[1].is_empty());
        assert_eq!(fm.rows[0], fm.rows[2]);
        assert_eq!(fm.rows[3], vec![fm.vocab[&2]]);
    }

    #[test]
    fn nothing_survives_is_an_error() {
        let reg = registry(&["1", "2"]);
        let err = build_feature_matrix(&reg, ws_tokenizer, &TokenFilterConfig::default()).unwrap_err();
        assert!(err.to_string().contains("empty vocabulary"));
    }

    #[test]
    fn feature_matrix_file_roundtrip() {
        let reg = registry(&["1 2", "", "2 3"]);
        let fm = build_feature_matrix(&reg, ws_tokenizer, &TokenFilterConfig { min_count: 1, max_count: 5 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fm.txt");
        fm.save(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "3 3\n0 1\n\n1 2\n");
        let back = FeatureMatrix::load(&p).unwrap();
        assert_eq!(back.rows, fm.rows);
        assert_eq!((back.n, back.m), (3, 3));
    }

    #[test]
    fn normalized_rows_are_unit_or_zero() {
        let reg = registry(&["1 2 3", "", "3"]);
        let fm = build_feature_matrix(&reg, ws_tokenizer, &TokenFilterConfig { min_count: 1, max_count: 5 }).unwrap();
        let emb = embed_descriptions(&reg, &NormalizedRows(&fm)).unwrap();
        for i in 0..3 {
            let norm: f64 = emb.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        }
        assert_eq!(emb, embed_descriptions(&reg, &NormalizedRows(&fm)).unwrap());
    }

    struct Toy;
    impl EmbeddingProvider for Toy {
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, e: &EntityRecord) -> std::result::Result<Vec<f64>, String> {
            match e.description.as_str() {
                "a" => Ok(vec![1.0, 0.0]),
                "b" => Ok(vec![0.0, 1.0]),
                _ => Err("unsupported".into()),
            }
        }
    }

    #[test]
    fn toy_provider_rows_and_failures() {
        let emb = embed_descriptions(&registry(&["a", "b"]), &Toy).unwrap();
        assert_eq!(emb.data(), &[1.0, 0.0, 0.0, 1.0]);
        let err = embed_descriptions(&registry(&["a", "c"]), &Toy).unwrap_err();
        assert!(err.to_string().contains("Q1"));
    }

    #[test]
    fn embedding_table_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        fs::write(&p, "Q0 1 0\nQ1 0.5 0.5\n").unwrap();
        let table = EmbeddingTable::load(&p).unwrap();
        let emb = embed_descriptions(&registry(&["x", "y"]), &table).unwrap();
        assert_eq!(emb.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn knn_picks_most_similar() {
        let emb = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![-1.0, 0.0]]).unwrap();
        // cos(e0, e1) = 0.9 / sqrt(0.82)
        let c01 = 0.9 / 0.82f64.sqrt();
        assert!((c01 - 0.9939).abs() < 1e-4);
        let g = build_feature_graph(&emb, &FeatureGraphConfig { k: 1 }).unwrap();
        assert!(g.has_edge(0, 1));
        assert!(!g.has_edge(0, 2));
        assert_eq!(g.kind, GraphKind::Feature);
    }

    #[test]
    fn knn_ties_go_to_lower_id() {
        let emb = Tensor::from_rows(&vec![vec![0.3, 0.4]; 5]).unwrap();
        let g = build_feature_graph(&emb, &FeatureGraphConfig { k: 1 }).unwrap();
        // node 0 selects 1, every other node selects 0
        assert_eq!(g.neighbors(0), &[1, 2, 3, 4]);
        for i in 1..5 {
            assert_eq!(g.neighbors(i), &[0]);
        }
    }

    #[test]
    fn zero_rows_are_isolated_and_k_is_checked() {
        let emb = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let g = build_feature_graph(&emb, &FeatureGraphConfig { k: 1 }).unwrap();
        assert_eq!(g.degree(1).unwrap(), 0);
        assert!(build_feature_graph(&emb, &FeatureGraphConfig { k: 3 }).is_err());
    }

    fn rel(year: i32, n: usize, edges: &[(usize, usize)]) -> SnapshotGraph {
        SnapshotGraph::from_edges(year, n, GraphKind::Relation, edges.iter().copied()).unwrap()
    }

    #[test]
    fn diff_pools_direct_case() {
        let a = rel(2019, 4, &[(1, 2)]);
        let b = rel(2020, 4, &[(1, 3)]);
        let p = diff_pools(&a, &b).unwrap();
        assert_eq!(p.positives[1], vec![3]);
        assert_eq!(p.negatives[1], vec![2]);
        assert!(p.positives[2].is_empty());
        assert_eq!(p.negatives[2], vec![1]);
        assert_eq!(p.positives[3], vec![1]);
        assert!(p.negatives[3].is_empty());
        assert_eq!((p.t1, p.t2), (2019, 2020));
    }

    #[test]
    fn diff_pools_size_mismatch() {
        assert!(diff_pools(&rel(0, 3, &[]), &rel(1, 4, &[])).is_err());
    }

    fn random_graph(n: usize, p: f64, seed: u64) -> SnapshotGraph {
        use rand::Rng;
        let mut rng = crate::seed::rng(&[seed]);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        rel(seed as i32, n, &edges)
    }

    #[test]
    fn diff_pools_matches_pairwise_brute_force() {
        let (a, b) = (random_graph(100, 0.05, 1), random_graph(100, 0.05, 2));
        let p = diff_pools(&a, &b).unwrap();
        for i in 0..100 {
            let pos: Vec<usize> = (0..100).filter(|&j| !a.has_edge(i, j) && b.has_edge(i, j)).collect();
            let neg: Vec<usize> = (0..100).filter(|&j| a.has_edge(i, j) && !b.has_edge(i, j)).collect();
            assert_eq!(p.positives[i], pos);
            assert_eq!(p.negatives[i], neg);
        }
    }

    proptest! {
        #[test]
        fn diff_pool_invariants(n in 2usize..30, s1 in any::<u64>(), s2 in any::<u64>()) {
            let (a, b) = (random_graph(n, 0.2, s1), random_graph(n, 0.2, s2));
            let same = diff_pools(&a, &a).unwrap();
            prop_assert!(same.positives.iter().chain(&same.negatives).all(Vec::is_empty));
            let fwd = diff_pools(&a, &b).unwrap();
            let back = diff_pools(&b, &a).unwrap();
            prop_assert_eq!(&fwd.positives, &back.negatives);
            prop_assert_eq!(&fwd.negatives, &back.positives);
            for i in 0..n {
                prop_assert!(!fwd.positives[i].contains(&i));
                prop_assert!(fwd.positives[i].iter().all(|j| !fwd.negatives[i].contains(j)));
            }
        }

        #[test]
        fn knn_is_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
            use rand::Rng;
            let mut rng = crate::seed::rng(&[seed]);
            let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
            let cfg = FeatureGraphConfig { k: 3 };
            let g1 = build_feature_graph(&Tensor::from_rows(&rows).unwrap(), &cfg).unwrap();
            let g2 = build_feature_graph(&Tensor::from_rows(&scaled).unwrap(), &cfg).unwrap();
            prop_assert_eq!(g1.edges().collect::<Vec<_>>(), g2.edges().collect::<Vec<_>>());
        }
    }

    fn feature(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> SnapshotGraph {
        SnapshotGraph::from_edges(0, n, GraphKind::Feature, edges).unwrap()
    }

    #[test]
    fn feature_pools_star_and_complete() {
        let star = feature(6, (1..6).map(|l| (0, l)));
        let p = pools_feature(&star, 32, 1).unwrap();
        assert_eq!(p.positives[0], vec![1, 2, 3, 4, 5]);
        assert!(p.negatives[0].is_empty());
        assert_eq!(p.negatives[1], vec![2, 3, 4, 5]);

        let mut all = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                all.push((i, j));
            }
        }
        let complete = feature(5, all);
        let p = pools_feature(&complete, 32, 1).unwrap();
        assert!(p.negatives.iter().all(Vec::is_empty));
    }

    #[test]
    fn feature_pools_are_seeded_and_disjoint() {
        let g = feature(50, (0..49).map(|i| (i, i + 1)));
        let a = pools_feature(&g, 8, 11).unwrap();
        let b = pools_feature(&g, 8, 11).unwrap();
        assert_eq!(a, b);
        for i in 0..50 {
            assert_eq!(a.negatives[i].len(), 8);
            assert!(!a.negatives[i].contains(&i));
            assert!(a.negatives[i].iter().all(|j| !g.has_edge(i, *j)));
        }
        assert_ne!(a, pools_feature(&g, 8, 12).unwrap());
    }

    #[test]
    fn pools_file_roundtrip() {
        let g = feature(10, (0..9).map(|i| (i, i + 1)));
        let p = pools_feature(&g, 3, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pools.jsonl");
        save_pools(&p, &path, Some("abc")).unwrap();
        let first = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        assert!(first.contains("\"config_hash\":\"abc\""));
        assert_eq!(load_pools(&path).unwrap(), p);
    }
}
