//! Parameter layout and the per-batch objective of the joint model.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVars, ParameterStore, Tape, Tensor, Var};
use crate::contrastive::{info_nce_op, Contrast, ContrastiveConfig, LossWeights};
use crate::dataset::SamplePools;
use crate::error::{Error, Result};
use crate::graph::{self, attend_op, project_op, sample_neighbors, subsample, GraphConfig, SamplerConfig};
use crate::store::SnapshotGraph;
use crate::text::{loss_el_op, BagEncoder, TextEncoder, TokenSequence, Tower};

/// Where graph node features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// The entity tower's output for each node.
    EntityTower,
    /// Densified feature-matrix rows, held fixed.
    Raw,
    /// Densified feature-matrix rows as a parameter.
    RawTrainable,
}

impl std::str::FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity_tower" => Ok(FeatureSource::EntityTower),
            "raw" => Ok(FeatureSource::Raw),
            "raw_trainable" => Ok(FeatureSource::RawTrainable),
            _ => Err(Error::Config(format!("unknown feature source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub graph: GraphConfig,
    pub features: FeatureSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { dim: 64, graph: GraphConfig::default(), features: FeatureSource::EntityTower }
    }
}

/// Everything the objective reads besides parameters.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub vocab_size: usize,
    pub entity_seqs: Vec<TokenSequence>,
    /// (sequence, gold internal id)
    pub mentions: Vec<(TokenSequence, usize)>,
    /// Relation graph of the training year.
    pub relation: SnapshotGraph,
    pub feature: SnapshotGraph,
    pub relation_pools: SamplePools,
    pub feature_pools: SamplePools,
    pub raw_features: Option<Tensor>,
}

impl TrainData {
    pub fn n(&self) -> usize {
        self.entity_seqs.len()
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let n = self.n();
        for m in [self.relation.n(), self.feature.n(), self.relation_pools.n(), self.feature_pools.n()] {
            if m != n {
                return Err(Error::SizeMismatch { left: n, right: m });
            }
        }
        if let Some((_, gold)) = self.mentions.iter().find(|(_, g)| *g >= n) {
            return Err(Error::NodeOutOfRange { node: *gold, n });
        }
        if model.features != FeatureSource::EntityTower {
            match &self.raw_features {
                Some(x) if x.rows() == n => {}
                _ => return Err(Error::Data("raw feature source needs one feature row per entity".into())),
            }
        }
        Ok(())
    }

    /// Nodes with at least one positive in either pool family.
    pub fn graph_nodes(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| !self.relation_pools.positives[i].is_empty() || !self.feature_pools.positives[i].is_empty())
            .collect()
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: BagEncoder,
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab_size: usize) -> Self {
        Model { cfg, encoder: BagEncoder { vocab_size, dim: cfg.dim } }
    }

    fn node_dim(&self, data: &TrainData) -> usize {
        match self.cfg.features {
            FeatureSource::EntityTower => self.cfg.dim,
            _ => data.raw_features.as_ref().map_or(0, Tensor::cols),
        }
    }

    pub fn init_params(&self, data: &TrainData, seed: u64) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        self.encoder.init_params(Tower::Mention, &mut store, &mut crate::seed::rng(&[seed, 1]))?;
        self.encoder.init_params(Tower::Entity, &mut store, &mut crate::seed::rng(&[seed, 2]))?;
        graph::init_params(&mut store, self.node_dim(data), &self.cfg.graph, &mut crate::seed::rng(&[seed, 3]))?;
        if self.cfg.features == FeatureSource::RawTrainable {
            store.insert(graph::RAW_X, data.raw_features.clone().expect("validated"))?;
        }
        Ok(store)
    }
}

/// Knobs of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSpec {
    pub weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub sampler_threshold: usize,
    /// Cap on negatives taken per anchor.
    pub max_negatives: usize,
    pub seed: u64,
    pub epoch: usize,
}

/// Scalar loss components of one evaluation; graph parts are 0 when not
/// computed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Components {
    pub l_e: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub graph_evaluated: bool,
    pub degenerate: usize,
}

/// Ordered set of global ids with positions.
#[derive(Default)]
struct Slots {
    ids: Vec<usize>,
    at: HashMap<usize, usize>,
}

impl Slots {
    fn slot(&mut self, g: usize) -> usize {
        *self.at.entry(g).or_insert_with(|| {
            self.ids.push(g);
            self.ids.len() - 1
        })
    }
}

/// Builds `a·L_e + b·L_f + c·L_r` for one batch of mentions and one chunk
/// of graph anchor nodes.
pub fn batch_objective(
    tape: &mut Tape,
    vars: &ParamVars,
    model: &Model,
    data: &TrainData,
    mentions: &[usize],
    nodes: &[usize],
    spec: &ObjectiveSpec,
) -> Result<(Var, Components)> {
    let mut comp = Components::default();
    let w = spec.weights;

    let m_seqs: Vec<&TokenSequence> = mentions.iter().map(|&k| &data.mentions[k].0).collect();
    let e_seqs: Vec<&TokenSequence> = mentions.iter().map(|&k| &data.entity_seqs[data.mentions[k].1]).collect();
    let (ym, _) = model.encoder.encode(tape, vars, Tower::Mention, &m_seqs)?;
    let (ye, _) = model.encoder.encode(tape, vars, Tower::Entity, &e_seqs)?;
    let scores = tape.matmul_nt(ym, ye)?;
    let l_e = loss_el_op(tape, scores)?;
    comp.l_e = tape.value(l_e).item();
    let mut total = tape.scale(l_e, w.a);

    if w.graph_active() && !nodes.is_empty() {
        let (l_f, l_r, degenerate) = graph_losses(tape, vars, model, data, nodes, spec)?;
        comp.l_f = tape.value(l_f).item();
        comp.l_r = tape.value(l_r).item();
        comp.degenerate = degenerate;
        comp.graph_evaluated = true;
        let sf = tape.scale(l_f, w.b);
        let sr = tape.scale(l_r, w.c);
        total = tape.add(total, sf)?;
        total = tape.add(total, sr)?;
    }
    Ok((total, comp))
}

fn contrast_item(pools: &SamplePools, i: usize, spec: &ObjectiveSpec, salt: u64) -> (Vec<usize>, Vec<usize>) {
    let seed = [spec.seed, spec.epoch as u64, i as u64, salt];
    let pos = subsample(&pools.positives[i], spec.sampler_threshold, &seed);
    let neg = subsample(&pools.negatives[i], spec.max_negatives, &[seed[0], seed[1], seed[2], salt + 1]);
    (pos, neg)
}

fn graph_losses(
    tape: &mut Tape,
    vars: &ParamVars,
    model: &Model,
    data: &TrainData,
    nodes: &[usize],
    spec: &ObjectiveSpec,
) -> Result<(Var, Var, usize)> {
    // f-slots need the feature view, r-slots the relation view
    let (mut f, mut r) = (Slots::default(), Slots::default());
    let mut lf_items = Vec::new();
    let mut lr_items = Vec::new();
    for &i in nodes {
        if !data.relation_pools.positives[i].is_empty() {
            let (pos, neg) = contrast_item(&data.relation_pools, i, spec, 10);
            lf_items.push(Contrast {
                anchor: f.slot(i),
                pos: pos.into_iter().map(|j| r.slot(j)).collect(),
                neg: neg.into_iter().map(|j| r.slot(j)).collect(),
            });
        }
        if !data.feature_pools.positives[i].is_empty() {
            let (pos, neg) = contrast_item(&data.feature_pools, i, spec, 20);
            lr_items.push(Contrast {
                anchor: r.slot(i),
                pos: pos.into_iter().map(|j| f.slot(j)).collect(),
                neg: neg.into_iter().map(|j| f.slot(j)).collect(),
            });
        }
    }

    let gcfg = &model.cfg.graph;
    let agg_set = |g: &SnapshotGraph, salt: u64, node: usize| -> Result<Vec<usize>> {
        let cfg = SamplerConfig { threshold: spec.sampler_threshold, seed: crate::seed::derive(&[spec.seed, salt]) };
        let mut set = sample_neighbors(g, node, &cfg, spec.epoch)?;
        if gcfg.self_loops {
            set.insert(0, node);
        }
        Ok(set)
    };
    let mut anchors = f.ids.clone();
    anchors.extend_from_slice(&r.ids);
    let mut sets = Vec::with_capacity(anchors.len());
    for &i in &f.ids {
        sets.push(agg_set(&data.feature, 1, i)?);
    }
    for &i in &r.ids {
        sets.push(agg_set(&data.relation, 2, i)?);
    }
    let (order, local_anchors, local_sets) = graph::localize(&anchors, &sets);

    let x = match model.cfg.features {
        FeatureSource::EntityTower => {
            let seqs: Vec<&TokenSequence> = order.iter().map(|&g| &data.entity_seqs[g]).collect();
            model.encoder.encode(tape, vars, Tower::Entity, &seqs)?.0
        }
        FeatureSource::Raw => {
            let raw = data.raw_features.as_ref().expect("validated");
            let rows: Vec<Vec<f64>> = order.iter().map(|&g| raw.row(g).to_vec()).collect();
            tape.constant(Tensor::from_rows(&rows)?)
        }
        FeatureSource::RawTrainable => tape.gather_rows(vars.get(graph::RAW_X)?, Rc::new(order.clone()))?,
    };
    let a = vars.get(graph::ATTN)?;
    let nf = f.ids.len();
    let view = |tape: &mut Tape, lo: usize, hi: usize| -> Result<Var> {
        let h = attend_op(
            tape,
            x,
            a,
            Rc::new(local_anchors[lo..hi].to_vec()),
            Rc::new(local_sets[lo..hi].to_vec()),
            gcfg.slope,
        )?;
        let z = tape.elu(h);
        project_op(tape, vars, z)
    };
    let z_fp = view(tape, 0, nf)?;
    let z_rp = view(tape, nf, anchors.len())?;
    let tau = spec.contrastive.temperature;
    let (l_f, d1) = info_nce_op(tape, z_fp, z_rp, Rc::new(lf_items), tau)?;
    let (l_r, d2) = info_nce_op(tape, z_rp, z_fp, Rc::new(lr_items), tau)?;
    Ok((l_f, l_r, d1 + d2))
}
