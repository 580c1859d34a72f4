//! Dataset directories, derived artifacts, and the train/evaluate plumbing
//! that ties the modules together.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ParameterStore;
use crate::dataset::{
    build_feature_graph, build_feature_matrix, diff_pools, embed_descriptions, load_pools, pools_feature, save_pools,
    FeatureGraphConfig, FeatureMatrix, NormalizedRows, SamplePools, TokenFilterConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    degree_report, improvement_points, rank_queries, CellRanks, EvalReport, GapMatrix, ModelEntry, QueryOutcome,
    DEFAULT_DEGREE_EDGES,
};
use crate::config::RunConfig;
use crate::model::{ModelConfig, TrainData};
use crate::trainer::{train, TrainOutcome};
use crate::store::{load_entities, load_mentions, load_snapshot, GraphKind, MentionRecord, SnapshotGraph, TemporalKg};
use crate::text::{build_entity_seq, build_mention_seq, encode_values, BagEncoder, TokenSequence, Tower, Vocab, MAX_SEQ_LEN};

pub const ENTITIES: &str = "entities.jsonl";
pub const TRAIN_MENTIONS: &str = "train_mentions.jsonl";
pub const TEST_MENTIONS: &str = "test_mentions.jsonl";
pub const EDGES_DIR: &str = "edges";
pub const MANIFEST: &str = "manifest.json";

/// A loaded dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kg: TemporalKg,
    pub train_mentions: Vec<MentionRecord>,
    pub test_mentions: Vec<MentionRecord>,
    /// sha256 over the raw input files.
    pub hash: String,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut hasher = Sha256::new();
        let registry = load_entities(dir.join(ENTITIES))?;
        let train_mentions = load_mentions(dir.join(TRAIN_MENTIONS), &registry)?;
        let test_mentions = load_mentions(dir.join(TEST_MENTIONS), &registry)?;
        for f in [ENTITIES, TRAIN_MENTIONS, TEST_MENTIONS] {
            hasher.update(read(&dir.join(f))?);
        }

        let edges = dir.join(EDGES_DIR);
        let mut years = Vec::new();
        for entry in fs::read_dir(&edges).map_err(|e| Error::io(&edges, e))? {
            let path = entry.map_err(|e| Error::io(&edges, e))?.path();
            let year = path
                .file_name()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_suffix(".tsv"))
                .and_then(|s| s.parse::<i32>().ok());
            if let Some(y) = year {
                years.push((y, path));
            }
        }
        years.sort();
        if years.is_empty() {
            return Err(Error::Data(format!("no <year>.tsv edge files under {}", edges.display())));
        }
        let mut snapshots = Vec::new();
        for (year, path) in &years {
            let (g, stats) = load_snapshot(path, *year, &registry)?;
            if stats.dropped_unknown > 0 || stats.dropped_self_loops > 0 {
                log::warn!(
                    "{}: dropped {} edges with unknown endpoints and {} self-loops",
                    path.display(),
                    stats.dropped_unknown,
                    stats.dropped_self_loops
                );
            }
            hasher.update(year.to_le_bytes());
            hasher.update(read(path)?);
            snapshots.push(g);
        }
        let kg = TemporalKg::new(registry, snapshots)?;
        Ok(Dataset { kg, train_mentions, test_mentions, hash: hex::encode(hasher.finalize()) })
    }

    pub fn years(&self) -> &[i32] {
        self.kg.years()
    }

    pub fn snapshot(&self, year: i32) -> Result<&SnapshotGraph> {
        self.kg.snapshot(year).ok_or_else(|| Error::Data(format!("no snapshot for year {year}")))
    }
}

/// The year farthest from `train`, ties going to the later one.
pub fn target_year(years: &[i32], train: i32) -> Option<i32> {
    years.iter().copied().filter(|&y| y != train).max_by_key(|&y| ((y - train).abs(), y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub filter: TokenFilterConfig,
    pub knn: FeatureGraphConfig,
    pub negative_cap: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            filter: TokenFilterConfig::default(),
            knn: FeatureGraphConfig { k: 10 },
            negative_cap: 32,
            max_seq_len: MAX_SEQ_LEN,
            seed: 0,
        }
    }
}

impl BuildConfig {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }
}

/// Artifacts derived from a dataset by `build_artifacts`.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub vocab: Vocab,
    pub feature_matrix: FeatureMatrix,
    pub feature_graph: SnapshotGraph,
    pub feature_pools: SamplePools,
    /// Keyed by (t1, t2) for every ordered pair of distinct years.
    pub relation_pools: BTreeMap<(i32, i32), SamplePools>,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_hash: String,
    pub config_hash: String,
    pub config: BuildConfig,
    pub years: Vec<i32>,
    pub vocab_size: usize,
    pub feature_columns: usize,
    pub feature_edges: usize,
}

pub fn build_artifacts(ds: &Dataset, cfg: &BuildConfig) -> Result<Artifacts> {
    let reg = &ds.kg.registry;
    let vocab = Vocab::from_corpus(reg.iter(), ds.train_mentions.iter());
    let feature_matrix = build_feature_matrix(reg, |t| vocab.encode_text(t).0, &cfg.filter)?;
    let emb = embed_descriptions(reg, &NormalizedRows(&feature_matrix))?;
    let feature_graph = build_feature_graph(&emb, &cfg.knn)?;
    let feature_pools = pools_feature(&feature_graph, cfg.negative_cap, cfg.seed)?;
    let mut relation_pools = BTreeMap::new();
    for &t1 in ds.years() {
        for &t2 in ds.years() {
            if t1 != t2 {
                relation_pools.insert((t1, t2), diff_pools(ds.snapshot(t1)?, ds.snapshot(t2)?)?);
            }
        }
    }
    let manifest = Manifest {
        dataset_hash: ds.hash.clone(),
        config_hash: cfg.hash(),
        config: *cfg,
        years: ds.years().to_vec(),
        vocab_size: vocab.len(),
        feature_columns: feature_matrix.m,
        feature_edges: feature_graph.edge_count(),
    };
    Ok(Artifacts { vocab, feature_matrix, feature_graph, feature_pools, relation_pools, manifest })
}

fn pools_name(t1: i32, t2: i32) -> String {
    format!("pools_{t1}_{t2}.jsonl")
}

impl Artifacts {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hash = Some(self.manifest.config_hash.as_str());
        self.vocab.save(dir.join("vocab.txt"))?;
        self.feature_matrix.save(dir.join("feature_matrix.txt"))?;
        let lines: Vec<String> = self.feature_graph.edges().map(|(a, b)| format!("{a}\t{b}\n")).collect();
        let p = dir.join("feature_graph.tsv");
        fs::write(&p, lines.concat()).map_err(|e| Error::io(&p, e))?;
        save_pools(&self.feature_pools, dir.join("pools_feature.jsonl"), hash)?;
        for (&(t1, t2), pools) in &self.relation_pools {
            save_pools(pools, dir.join(pools_name(t1, t2)), hash)?;
        }
        let p = dir.join(MANIFEST);
        fs::write(&p, serde_json::to_vec_pretty(&self.manifest).expect("serializable")).map_err(|e| Error::io(&p, e))
    }

    /// Loads artifacts and checks they were built from `ds`.
    pub fn load(dir: impl AsRef<Path>, ds: &Dataset) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        if manifest.dataset_hash != ds.hash {
            return Err(Error::Data(format!("artifacts in {} were built from a different dataset", dir.display())));
        }
        let vocab = Vocab::load(dir.join("vocab.txt"))?;
        let feature_matrix = FeatureMatrix::load(dir.join("feature_matrix.txt"))?;
        let p = dir.join("feature_graph.tsv");
        let body = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut edges = Vec::new();
        for (k, line) in body.lines().enumerate() {
            let mut it = line.split('\t').map(str::parse::<usize>);
            match (it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b))) => edges.push((a, b)),
                _ => return Err(Error::Malformed { path: p.clone(), line: k + 1, msg: "expected two node ids".into() }),
            }
        }
        let feature_graph = SnapshotGraph::from_edges(0, ds.kg.registry.len(), GraphKind::Feature, edges)?;
        let feature_pools = load_pools(dir.join("pools_feature.jsonl"))?;
        let mut relation_pools = BTreeMap::new();
        for &t1 in &manifest.years {
            for &t2 in &manifest.years {
                if t1 != t2 {
                    relation_pools.insert((t1, t2), load_pools(dir.join(pools_name(t1, t2)))?);
                }
            }
        }
        Ok(Artifacts { vocab, feature_matrix, feature_graph, feature_pools, relation_pools, manifest })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST);
    serde_json::from_slice(&read(&p)?).map_err(|e| Error::Malformed { path: p, line: 1, msg: e.to_string() })
}

pub fn entity_sequences(ds: &Dataset, art: &Artifacts, budget: usize) -> Result<Vec<TokenSequence>> {
    ds.kg.registry.iter().map(|e| build_entity_seq(e, &art.vocab, budget)).collect()
}

/// Training inputs for one (train year → target year) pair.
pub fn train_data(ds: &Dataset, art: &Artifacts, train: i32, target: i32, model: &ModelConfig, budget: usize) -> Result<TrainData> {
    let relation_pools = art
        .relation_pools
        .get(&(train, target))
        .cloned()
        .ok_or_else(|| Error::Data(format!("no relation pools for {train} -> {target}")))?;
    let mentions = ds
        .train_mentions
        .iter()
        .filter(|m| m.year == train)
        .map(|m| Ok((build_mention_seq(m, &art.vocab, budget)?, m.gold)))
        .collect::<Result<Vec<_>>>()?;
    let data = TrainData {
        vocab_size: art.vocab.len(),
        entity_seqs: entity_sequences(ds, art, budget)?,
        mentions,
        relation: ds.snapshot(train)?.clone(),
        feature: art.feature_graph.clone(),
        relation_pools,
        feature_pools: art.feature_pools.clone(),
        raw_features: (model.features != crate::model::FeatureSource::EntityTower).then(|| art.feature_matrix.densify()),
    };
    data.validate(model)?;
    Ok(data)
}

/// Ranks every test mention of every year against all entities, using the
/// entity and mention towers of `params`.
pub fn evaluate_checkpoint(
    ds: &Dataset,
    art: &Artifacts,
    params: &ParameterStore,
    dim: usize,
    train_year: i32,
    budget: usize,
) -> Result<Vec<CellRanks>> {
    let encoder = BagEncoder { vocab_size: art.vocab.len(), dim };
    let seqs = entity_sequences(ds, art, budget)?;
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let entities = encode_values(&encoder, params, Tower::Entity, &refs)?;
    let mut out = Vec::new();
    for &year in ds.years() {
        let ms: Vec<&MentionRecord> = ds.test_mentions.iter().filter(|m| m.year == year).collect();
        if ms.is_empty() {
            continue;
        }
        let mseqs = ms.iter().map(|m| build_mention_seq(m, &art.vocab, budget)).collect::<Result<Vec<_>>>()?;
        let mrefs: Vec<&TokenSequence> = mseqs.iter().collect();
        let mentions = encode_values(&encoder, params, Tower::Mention, &mrefs)?;
        let golds: Vec<usize> = ms.iter().map(|m| m.gold).collect();
        let ranks = rank_queries(&entities, &mentions, &golds)?;
        let queries = ms
            .iter()
            .zip(ranks)
            .map(|(m, rank)| QueryOutcome { gold: m.gold, category: m.category, rank })
            .collect();
        out.push(CellRanks { train_year, test_year: year, queries });
    }
    Ok(out)
}

pub fn checkpoint_path(dir: &Path, year: i32) -> PathBuf {
    dir.join(format!("checkpoint_{year}.bin"))
}

/// Training outcome and test ranks for one training year.
#[derive(Debug, Clone)]
pub struct YearRun {
    pub train_year: i32,
    pub target_year: i32,
    pub outcome: TrainOutcome,
    pub cells: Vec<CellRanks>,
}

/// Trains on `train_year` towards its target year and evaluates on every
/// test year.
pub fn run_year(ds: &Dataset, art: &Artifacts, cfg: &RunConfig, train_year: i32) -> Result<YearRun> {
    let target = target_year(ds.years(), train_year).ok_or_else(|| Error::Data("need at least two snapshots".into()))?;
    let mut tc = cfg.train.clone();
    tc.train_year = train_year;
    tc.target_year = target;
    let data = train_data(ds, art, train_year, target, &tc.model, cfg.budget)?;
    let outcome = train(&data, &tc, None)?;
    let cells = evaluate_checkpoint(ds, art, &outcome.checkpoint.params, tc.model.dim, train_year, cfg.budget)?;
    Ok(YearRun { train_year, target_year: target, outcome, cells })
}

/// One model per training year; returns the runs in year order.
pub fn run_all_years(ds: &Dataset, art: &Artifacts, cfg: &RunConfig) -> Result<Vec<YearRun>> {
    ds.years().iter().map(|&y| run_year(ds, art, cfg, y)).collect()
}

pub fn all_cells(runs: &[YearRun]) -> Vec<CellRanks> {
    runs.iter().flat_map(|r| r.cells.iter().cloned()).collect()
}

/// Report header: hashes plus the resolved configuration.
pub fn report_config(ds: &Dataset, cfg: &RunConfig) -> serde_json::Value {
    let resolved: serde_json::Map<String, serde_json::Value> =
        cfg.entries().into_iter().map(|(k, v)| (k, serde_json::Value::String(v))).collect();
    serde_json::json!({
        "dataset_hash": ds.hash,
        "config_hash": cfg.hash(),
        "ns": cfg.eval.ns,
        "direction": cfg.eval.direction,
        "resolved": resolved,
    })
}

/// Gap-matrix report for `model`, with boosts and the degree analysis
/// against `baseline` when given.
pub fn gap_report(
    ds: &Dataset,
    cfg: &RunConfig,
    model: (&str, &[CellRanks]),
    baseline: Option<(&str, &[CellRanks])>,
) -> Result<EvalReport> {
    let ns = &cfg.eval.ns;
    let mut models = vec![ModelEntry { name: model.0.to_string(), matrix: GapMatrix::from_ranks(ns, model.1) }];
    let mut degree = None;
    if let Some((name, runs)) = baseline {
        models.push(ModelEntry { name: name.to_string(), matrix: GapMatrix::from_ranks(ns, runs) });
        let deg = |year: i32, i: usize| ds.snapshot(year).and_then(|g| g.degree(i)).unwrap_or(0);
        let points = improvement_points(model.1, runs, deg, cfg.eval.direction, 1)?;
        degree = Some(degree_report(&points, &DEFAULT_DEGREE_EDGES)?);
    }
    Ok(EvalReport::build(report_config(ds, cfg), &models, baseline.map(|b| b.0), degree))
}

fn dataset_hash(r: &EvalReport) -> Option<&str> {
    r.config.get("dataset_hash").and_then(|v| v.as_str())
}

/// Merges reports over the same dataset; the first report's first model is
/// the model of interest. Refuses reports from different datasets.
pub fn merge_reports(reports: &[EvalReport], baseline: Option<&str>) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::Data("no reports to merge".into()))?;
    let hash = dataset_hash(first).ok_or_else(|| Error::Data("report lacks a dataset hash".into()))?;
    let ns: Vec<usize> = first
        .config
        .get("ns")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| Error::Data("report lacks ns".into()))?;
    let mut by_model: Vec<(String, Vec<crate::eval::Cell>)> = Vec::new();
    for r in reports {
        if dataset_hash(r) != Some(hash) {
            return Err(Error::Data(format!(
                "dataset hash mismatch: {} vs {}",
                hash,
                dataset_hash(r).unwrap_or("<none>")
            )));
        }
        if r.config.get("ns") != first.config.get("ns") {
            return Err(Error::Data("reports use different N lists".into()));
        }
        for mc in &r.per_cell {
            match by_model.iter_mut().find(|(n, _)| *n == mc.model) {
                Some((_, cells)) => {
                    let c = &mc.cell;
                    if !cells.iter().any(|x| (x.train_year, x.test_year, x.split) == (c.train_year, c.test_year, c.split)) {
                        cells.push(c.clone());
                    }
                }
                None => by_model.push((mc.model.clone(), vec![mc.cell.clone()])),
            }
        }
    }
    let models = by_model
        .into_iter()
        .map(|(name, cells)| Ok(ModelEntry { name, matrix: GapMatrix::from_cells(&ns, cells)? }))
        .collect::<Result<Vec<_>>>()?;
    let degree = reports.iter().find_map(|r| r.degree_buckets.clone());
    Ok(EvalReport::build(first.config.clone(), &models, baseline, degree))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn synth_dir(seed: u64) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n: 80, vocab_size: 60, seed, ..Default::default() };
        generate(&cfg, dir.path()).unwrap();
        dir
    }

    fn small_build() -> BuildConfig {
        BuildConfig { filter: TokenFilterConfig { min_count: 3, max_count: 60 }, knn: FeatureGraphConfig { k: 5 }, ..Default::default() }
    }

    #[test]
    fn target_year_is_farthest_then_later() {
        let ys = [2019, 2020, 2021, 2022];
        assert_eq!(target_year(&ys, 2019), Some(2022));
        assert_eq!(target_year(&ys, 2020), Some(2022));
        assert_eq!(target_year(&ys, 2021), Some(2019));
        assert_eq!(target_year(&ys, 2022), Some(2019));
        assert_eq!(target_year(&[2020, 2021, 2022], 2021), Some(2022));
        assert_eq!(target_year(&[2020], 2020), None);
    }

    #[test]
    fn artifacts_roundtrip_through_disk() {
        let dir = synth_dir(1);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.years(), &[2019, 2020, 2021, 2022]);
        let art = build_artifacts(&ds, &small_build()).unwrap();
        assert_eq!(art.relation_pools.len(), 12);
        let out = tempfile::tempdir().unwrap();
        art.save(out.path()).unwrap();
        let back = Artifacts::load(out.path(), &ds).unwrap();
        assert_eq!(back.vocab, art.vocab);
        assert_eq!(back.feature_matrix.rows, art.feature_matrix.rows);
        assert_eq!(back.feature_graph, art.feature_graph);
        assert_eq!(back.feature_pools, art.feature_pools);
        assert_eq!(back.relation_pools, art.relation_pools);
        let header = fs::read_to_string(out.path().join("pools_2019_2022.jsonl")).unwrap();
        assert!(header.lines().next().unwrap().contains(&art.manifest.config_hash));
    }

    #[test]
    fn artifacts_refuse_another_dataset() {
        let (a, b) = (synth_dir(2), synth_dir(3));
        let (da, db) = (Dataset::load(a.path()).unwrap(), Dataset::load(b.path()).unwrap());
        assert_ne!(da.hash, db.hash);
        let out = tempfile::tempdir().unwrap();
        build_artifacts(&da, &small_build()).unwrap().save(out.path()).unwrap();
        assert!(Artifacts::load(out.path(), &db).is_err());
    }

    #[test]
    fn evaluation_covers_every_test_year() {
        let dir = synth_dir(4);
        let ds = Dataset::load(dir.path()).unwrap();
        let art = build_artifacts(&ds, &small_build()).unwrap();
        let model = ModelConfig { dim: 8, ..Default::default() };
        let data = train_data(&ds, &art, 2019, 2022, &model, 64).unwrap();
        assert!(data.mentions.iter().all(|(_, g)| *g < 80));
        let cfg = crate::trainer::TrainConfig { model, train_year: 2019, target_year: 2022, lr: 1e-2, ..Default::default() };
        let ck = crate::trainer::initial_checkpoint(&data, &cfg).unwrap();
        let cells = evaluate_checkpoint(&ds, &art, &ck.params, 8, 2019, 64).unwrap();
        assert_eq!(cells.len(), 4);
        let per_year = ds.test_mentions.iter().filter(|m| m.year == 2022).count();
        assert_eq!(cells[3].queries.len(), per_year);
        assert!(cells.iter().flat_map(|c| &c.queries).all(|q| q.rank.is_some()));
    }

    #[test]
    fn merge_refuses_foreign_datasets() {
        let dir = synth_dir(5);
        let ds = Dataset::load(dir.path()).unwrap();
        let cfg = RunConfig::default();
        let cells = vec![CellRanks {
            train_year: 2019,
            test_year: 2020,
            queries: vec![QueryOutcome { gold: 0, category: crate::store::Category::Continual, rank: Some(0) }],
        }];
        let a = gap_report(&ds, &cfg, ("full", &cells), None).unwrap();
        let mut b = gap_report(&ds, &cfg, ("ablation", &cells), None).unwrap();
        let merged = merge_reports(&[a.clone(), b.clone()], Some("ablation")).unwrap();
        assert_eq!(merged.per_cell.len(), 4);
        assert!(!merged.boosts.is_empty());
        b.config["dataset_hash"] = serde_json::json!("elsewhere");
        assert!(merge_reports(&[a, b], None).is_err());
    }
}
