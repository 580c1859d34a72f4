//! Joint optimization loop, checkpoints, and the per-epoch training log.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{adam_step, decode, encode, forward_backward, AdamConfig, AdamState, ParameterStore};
use crate::contrastive::{combine, ContrastiveConfig, LossReport, LossWeights};
use crate::error::{Error, Result};
use crate::model::{batch_objective, Components, Model, ModelConfig, ObjectiveSpec, TrainData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub sampler_threshold: usize,
    pub max_negatives: usize,
    /// Graph anchor nodes visited per epoch.
    pub node_cap: usize,
    pub seed: u64,
    pub train_year: i32,
    pub target_year: i32,
    pub adam: AdamConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 32,
            lr: 1e-5,
            weights: LossWeights::default(),
            contrastive: ContrastiveConfig::default(),
            sampler_threshold: 16,
            max_negatives: 32,
            node_cap: 512,
            seed: 0,
            train_year: 0,
            target_year: 0,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2 for in-batch negatives".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.sampler_threshold == 0 || self.max_negatives == 0 {
            return Err(Error::Config("sampler threshold and negative cap must be >= 1".into()));
        }
        self.weights.validate()?;
        self.contrastive.validate()
    }

    /// sha256 of the canonical JSON, ignoring the epoch budget so a resumed
    /// run with a longer schedule still matches.
    pub fn hash(&self) -> String {
        let mut canonical = *self;
        canonical.epochs = 0;
        hex::encode(Sha256::digest(serde_json::to_vec(&canonical).expect("serializable")))
    }
}

/// Parameters, optimizer moments and position in the schedule. RNG streams
/// are derived from (seed, epoch, ...), so seed and epoch fix them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterStore,
    pub adam: AdamState,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
}

pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    seed: u64,
    config_hash: String,
    adam_step: u64,
    config: TrainConfig,
}

impl Checkpoint {
    /// `u8 version | u32 meta length | meta JSON | tensor container`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            epoch: self.epoch,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            adam_step: self.adam.step,
            config: self.config,
        };
        let meta = serde_json::to_vec(&meta).expect("serializable");
        let mut all = self.params.clone();
        for (name, t) in self.adam.m.iter() {
            all.insert(format!("adam.m/{name}"), t.clone()).expect("fresh names");
        }
        for (name, t) in self.adam.v.iter() {
            all.insert(format!("adam.v/{name}"), t.clone()).expect("fresh names");
        }
        let mut out = vec![CHECKPOINT_VERSION];
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&encode(&all));
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let (&version, rest) = buf.split_first().ok_or_else(|| bad("empty file"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        if rest.len() < 4 {
            return Err(bad("truncated header"));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        let rest = &rest[4..];
        if rest.len() < len {
            return Err(bad("truncated metadata"));
        }
        let meta: Meta = serde_json::from_slice(&rest[..len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let all = decode(&rest[len..])?;
        let (mut params, mut m, mut v) = (ParameterStore::new(), ParameterStore::new(), ParameterStore::new());
        for (name, t) in all.iter() {
            if let Some(n) = name.strip_prefix("adam.m/") {
                m.insert(n, t.clone())?;
            } else if let Some(n) = name.strip_prefix("adam.v/") {
                v.insert(n, t.clone())?;
            } else {
                params.insert(name.clone(), t.clone())?;
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(bad("optimizer moments do not match parameters"));
        }
        let adam = AdamState { config: meta.config.adam, m, v, step: meta.adam_step };
        Ok(Checkpoint { params, adam, epoch: meta.epoch, seed: meta.seed, config_hash: meta.config_hash, config: meta.config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    #[serde(rename = "L_f")]
    pub l_f: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
}

impl EpochRecord {
    pub fn new(epoch: usize, r: &LossReport) -> Self {
        EpochRecord { epoch, l: r.l, l_e: r.l_e, l_f: r.l_f, l_r: r.l_r }
    }
}

pub fn write_log(path: impl AsRef<Path>, reports: &[LossReport], first_epoch: usize) -> Result<()> {
    let path = path.as_ref();
    let mut body = Vec::new();
    for (k, r) in reports.iter().enumerate() {
        serde_json::to_writer(&mut body, &EpochRecord::new(first_epoch + k, r)).expect("serializable");
        body.push(b'\n');
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&body).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One report per epoch run in this call.
    pub reports: Vec<LossReport>,
}

fn spec(cfg: &TrainConfig, epoch: usize) -> ObjectiveSpec {
    ObjectiveSpec {
        weights: cfg.weights,
        contrastive: cfg.contrastive,
        sampler_threshold: cfg.sampler_threshold.min(cfg.contrastive.max_positives),
        max_negatives: cfg.max_negatives,
        seed: cfg.seed,
        epoch,
    }
}

/// Mention batches and the graph-node chunk paired with each one.
pub fn epoch_plan(data: &TrainData, cfg: &TrainConfig, epoch: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut order: Vec<usize> = (0..data.mentions.len()).collect();
    order.shuffle(&mut crate::seed::rng(&[cfg.seed, epoch as u64, 1]));
    let batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();

    let mut nodes = if cfg.weights.graph_active() { data.graph_nodes() } else { Vec::new() };
    nodes.shuffle(&mut crate::seed::rng(&[cfg.seed, epoch as u64, 2]));
    nodes.truncate(cfg.node_cap);
    let k = batches.len();
    let mut chunks = vec![Vec::new(); k];
    for (pos, node) in nodes.into_iter().enumerate() {
        chunks[pos % k].push(node);
    }
    batches.into_iter().zip(chunks).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        0.0
    } else {
        s / c as f64
    }
}

fn epoch_report(parts: &[Components], w: LossWeights) -> Result<LossReport> {
    let graph = || parts.iter().filter(|c| c.graph_evaluated);
    combine(
        mean(parts.iter().map(|c| c.l_e)),
        mean(graph().map(|c| c.l_f)),
        mean(graph().map(|c| c.l_r)),
        w,
    )
}

/// Fresh parameters and optimizer state for `cfg`.
pub fn initial_checkpoint(data: &TrainData, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let model = Model::new(cfg.model, data.vocab_size);
    data.validate(&cfg.model)?;
    let params = model.init_params(data, cfg.seed)?;
    let adam = AdamState::new(&params, cfg.adam);
    Ok(Checkpoint { params, adam, epoch: 0, seed: cfg.seed, config_hash: cfg.hash(), config: *cfg })
}

/// Runs epochs `resume.epoch .. cfg.epochs` (from scratch when `resume` is
/// `None`), one Adam step per mention batch.
pub fn train(data: &TrainData, cfg: &TrainConfig, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate(&cfg.model)?;
    if data.mentions.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut ck = match resume {
        Some(ck) => {
            if ck.config_hash != cfg.hash() {
                log::warn!("resuming from a checkpoint trained under a different config");
            }
            ck
        }
        None => initial_checkpoint(data, cfg)?,
    };
    let model = Model::new(cfg.model, data.vocab_size);
    let mut reports = Vec::new();
    for epoch in ck.epoch..cfg.epochs {
        let s = spec(cfg, epoch);
        let mut parts = Vec::new();
        for (batch, (mentions, nodes)) in epoch_plan(data, cfg, epoch).into_iter().enumerate() {
            let mut comp = Components::default();
            let result = forward_backward(&ck.params, |tape, vars| {
                let (loss, c) = batch_objective(tape, vars, &model, data, &mentions, &nodes, &s)?;
                comp = c;
                Ok(loss)
            });
            let (loss, grads) = match result {
                Err(Error::NonFinite { .. }) => return Err(Error::NanLoss { epoch, batch }),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, batch });
            }
            if comp.degenerate > 0 {
                log::debug!("epoch {epoch} batch {batch}: {} zero-norm embeddings", comp.degenerate);
            }
            adam_step(&mut ck.params, &grads, cfg.lr, &mut ck.adam)?;
            parts.push(comp);
        }
        let report = epoch_report(&parts, cfg.weights)?;
        log::info!("epoch {epoch}: L={:.6} L_e={:.6} L_f={:.6} L_r={:.6}", report.l, report.l_e, report.l_f, report.l_r);
        reports.push(report);
        ck.epoch = epoch + 1;
    }
    ck.config = *cfg;
    ck.config_hash = cfg.hash();
    Ok(TrainOutcome { checkpoint: ck, reports })
}

/// The objective over a whole epoch plan without updating anything.
pub fn evaluate_objective(data: &TrainData, cfg: &TrainConfig, params: &ParameterStore, epoch: usize) -> Result<LossReport> {
    let model = Model::new(cfg.model, data.vocab_size);
    let s = spec(cfg, epoch);
    let mut parts = Vec::new();
    for (mentions, nodes) in epoch_plan(data, cfg, epoch) {
        let mut tape = crate::autodiff::Tape::new();
        let vars = crate::autodiff::register(&mut tape, params);
        parts.push(batch_objective(&mut tape, &vars, &model, data, &mentions, &nodes, &s)?.1);
    }
    epoch_report(&parts, cfg.weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{diff_pools, pools_feature};
    use crate::store::{GraphKind, SnapshotGraph};
    use crate::text::{mention_sequence, entity_sequence};
    use rand::Rng;

    /// 50 entities in 5 topics, 64 mentions, a drifting relation graph.
    pub(crate) fn toy_data(seed: u64) -> TrainData {
        let mut rng = crate::seed::rng(&[seed]);
        let n = 50;
        let vocab_size = 6 + 50 + 5 * 6;
        let topic_word = |t: usize, k: usize| 56 + t * 6 + k;
        let entity_seqs = (0..n)
            .map(|i| {
                let desc: Vec<usize> = (0..4).map(|k| topic_word(i % 5, k)).collect();
                entity_sequence(&[6 + i], &desc, 32).unwrap()
            })
            .collect();
        let mentions = (0..64)
            .map(|_| {
                let gold = rng.gen_range(0..n);
                let ctx: Vec<usize> = (0..3).map(|_| topic_word(gold % 5, rng.gen_range(0..6))).collect();
                (mention_sequence(&ctx, &[6 + gold], &[], 32).unwrap(), gold)
            })
            .collect();
        let mut e1 = Vec::new();
        let mut e2 = Vec::new();
        for i in 0..n {
            e1.push((i, (i + 5) % n));
            e2.push((i, (i + if i % 3 == 0 { 6 } else { 5 }) % n));
        }
        let g1 = SnapshotGraph::from_edges(0, n, GraphKind::Relation, e1).unwrap();
        let g2 = SnapshotGraph::from_edges(1, n, GraphKind::Relation, e2).unwrap();
        let feature = SnapshotGraph::from_edges(0, n, GraphKind::Feature, (0..n).map(|i| (i, (i + 10) % n))).unwrap();
        TrainData {
            vocab_size,
            entity_seqs,
            mentions,
            relation_pools: diff_pools(&g1, &g2).unwrap(),
            feature_pools: pools_feature(&feature, 8, seed).unwrap(),
            relation: g1,
            feature,
            raw_features: None,
        }
    }

    pub(crate) fn toy_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-2,
            model: ModelConfig { dim: 8, graph: crate::graph::GraphConfig { hidden: 8, proj_dim: 8, ..Default::default() }, ..Default::default() },
            train_year: 0,
            target_year: 1,
            ..Default::default()
        }
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig { epochs: 0, ..toy_config() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..toy_config() }.validate().is_err());
        let zero = LossWeights { a: 0.0, b: 0.0, c: 0.0 };
        assert!(matches!(TrainConfig { weights: zero, ..toy_config() }.validate(), Err(Error::DegenerateObjective)));
        assert_eq!(toy_config().hash(), TrainConfig { epochs: 9, ..toy_config() }.hash());
        assert_ne!(toy_config().hash(), TrainConfig { seed: 1, ..toy_config() }.hash());
    }

    #[test]
    fn one_epoch_lowers_the_objective() {
        let data = toy_data(1);
        let cfg = toy_config();
        let init = initial_checkpoint(&data, &cfg).unwrap();
        let before = evaluate_objective(&data, &cfg, &init.params, 0).unwrap();
        let out = train(&data, &cfg, None).unwrap();
        let after = evaluate_objective(&data, &cfg, &out.checkpoint.params, 0).unwrap();
        assert!(after.l < before.l, "{before:?} -> {after:?}");
        assert_eq!(out.reports.len(), 1);
    }

    #[test]
    fn same_seed_same_reports() {
        let data = toy_data(2);
        let cfg = TrainConfig { epochs: 2, ..toy_config() };
        let a = train(&data, &cfg, None).unwrap();
        let b = train(&data, &cfg, None).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
    }

    #[test]
    fn text_only_leaves_graph_parameters_alone() {
        let data = toy_data(3);
        let cfg = TrainConfig { weights: LossWeights { a: 1.0, b: 0.0, c: 0.0 }, ..toy_config() };
        let init = initial_checkpoint(&data, &cfg).unwrap();
        let out = train(&data, &cfg, None).unwrap();
        for name in [crate::graph::ATTN, crate::graph::W1, crate::graph::B1, crate::graph::W2, crate::graph::B2] {
            assert_eq!(init.params.get(name), out.checkpoint.params.get(name), "{name}");
        }
        assert_ne!(init.params.get("mention.w"), out.checkpoint.params.get("mention.w"));
    }

    fn grads_under(data: &TrainData, cfg: &TrainConfig, params: &ParameterStore, w: LossWeights) -> ParameterStore {
        let cfg = TrainConfig { weights: w, ..*cfg };
        let model = Model::new(cfg.model, data.vocab_size);
        let (mentions, nodes) = epoch_plan(data, &TrainConfig { weights: LossWeights::default(), ..cfg }, 0).remove(0);
        forward_backward(params, |t, v| Ok(batch_objective(t, v, &model, data, &mentions, &nodes, &spec(&cfg, 0))?.0))
            .unwrap()
            .1
    }

    #[test]
    fn gradients_are_linear_in_the_weights() {
        let data = toy_data(4);
        let cfg = toy_config();
        let params = initial_checkpoint(&data, &cfg).unwrap().params;
        let w = |a, b, c| LossWeights { a, b, c };
        let ge = grads_under(&data, &cfg, &params, w(1.0, 0.0, 0.0));
        let gf = grads_under(&data, &cfg, &params, w(0.0, 1.0, 0.0));
        let gr = grads_under(&data, &cfg, &params, w(0.0, 0.0, 1.0));
        let (a, b, c) = (0.7, 1.3, 0.4);
        let mut want = ge.zeros_like();
        want.axpy(a, &ge).unwrap();
        want.axpy(b, &gf).unwrap();
        want.axpy(c, &gr).unwrap();
        let got = grads_under(&data, &cfg, &params, w(a, b, c));
        assert!(got.max_abs_diff(&want) < 1e-9);
        assert!(gf.iter().any(|(_, t)| t.data().iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn first_step_touches_only_nonzero_gradients() {
        let data = toy_data(5);
        let cfg = toy_config();
        let start = initial_checkpoint(&data, &cfg).unwrap();
        let grads = grads_under(&data, &cfg, &start.params, cfg.weights);
        let mut params = start.params.clone();
        let mut adam = start.adam.clone();
        adam_step(&mut params, &grads, cfg.lr, &mut adam).unwrap();
        let mut untouched = 0;
        for (name, g) in grads.iter() {
            let (before, after) = (start.params.get(name).unwrap(), params.get(name).unwrap());
            for k in 0..g.len() {
                if g.data()[k] == 0.0 {
                    assert_eq!(before.data()[k], after.data()[k], "{name}[{k}]");
                    untouched += 1;
                } else {
                    assert_ne!(before.data()[k], after.data()[k], "{name}[{k}]");
                }
            }
        }
        assert!(untouched > 0);
    }

    #[test]
    fn checkpoint_bytes_roundtrip_and_version() {
        let data = toy_data(6);
        let out = train(&data, &toy_config(), None).unwrap();
        let bytes = out.checkpoint.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, out.checkpoint);
        let mut wrong = bytes.clone();
        wrong[0] = 9;
        assert!(Checkpoint::from_bytes(&wrong).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let data = toy_data(7);
        let two = TrainConfig { epochs: 2, ..toy_config() };
        let straight = train(&data, &two, None).unwrap();
        let first = train(&data, &TrainConfig { epochs: 1, ..two }, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        first.checkpoint.save(&path).unwrap();
        let resumed = train(&data, &two, Some(Checkpoint::load(&path).unwrap())).unwrap();
        assert_eq!(resumed.checkpoint.params, straight.checkpoint.params);
        assert_eq!(resumed.reports[0], straight.reports[1]);
        assert_eq!(resumed.checkpoint.to_bytes(), straight.checkpoint.to_bytes());
    }

    #[test]
    fn empty_split_and_nan_are_reported() {
        let mut data = toy_data(8);
        let mentions = std::mem::take(&mut data.mentions);
        assert!(train(&data, &toy_config(), None).unwrap_err().to_string().contains("empty training split"));
        data.mentions = mentions;
        let mut ck = initial_checkpoint(&data, &toy_config()).unwrap();
        ck.params.get_mut("mention.b").unwrap().data_mut()[0] = f64::NAN;
        match train(&data, &toy_config(), Some(ck)) {
            Err(Error::NanLoss { epoch: 0, batch: 0 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn log_lines_are_json() {
        let data = toy_data(9);
        let out = train(&data, &TrainConfig { epochs: 2, ..toy_config() }, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_log(&path, &out.reports, 0).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let recs: Vec<EpochRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].epoch, 1);
        assert!(text.contains("\"L_e\""));
    }

    #[test]
    fn raw_feature_sources_train() {
        let mut data = toy_data(10);
        let rows: Vec<Vec<f64>> = (0..50).map(|i| (0..5).map(|t| f64::from(u8::from(i % 5 == t))).collect()).collect();
        data.raw_features = Some(crate::autodiff::Tensor::from_rows(&rows).unwrap());
        for features in [crate::model::FeatureSource::Raw, crate::model::FeatureSource::RawTrainable] {
            let cfg = TrainConfig { model: ModelConfig { features, ..toy_config().model }, ..toy_config() };
            let init = initial_checkpoint(&data, &cfg).unwrap();
            let out = train(&data, &cfg, None).unwrap();
            assert_ne!(init.params.get(crate::graph::ATTN), out.checkpoint.params.get(crate::graph::ATTN));
        }
    }
}
