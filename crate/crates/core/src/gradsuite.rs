//! The gradient suite: every trainable op plus the full joint objective,
//! each checked at a fixed number of smooth random probe points.

use std::rc::Rc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{grad_check, probe_is_smooth, GradCheckReport, ParamVars, Tape, Tensor, Var};
use crate::contrastive::{info_nce_op, Contrast, ContrastiveConfig, LossWeights};
use crate::dataset::{diff_pools, pools_feature};
use crate::error::{Error, Result};
use crate::graph::{attend_op, project_op, GraphConfig};
use crate::model::{batch_objective, FeatureSource, Model, ModelConfig, ObjectiveSpec, TrainData};
use crate::store::{GraphKind, SnapshotGraph};
use crate::text::{entity_sequence, loss_el_op, mention_sequence, BagEncoder, TextEncoder, TokenSequence, Tower};

pub const DEFAULT_PROBES: usize = 25;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A scalar function of some inputs plus a sampler of probe points.
struct Case {
    name: &'static str,
    make: fn() -> Build,
    point: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    #[serde(flatten)]
    pub report: GradCheckReport,
    pub probes: usize,
    /// Probe points rejected for sitting near a kink.
    pub rejected: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.report.pass)
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-s..s)).collect()).expect("sized")
}

/// Contracts a tensor output with fixed pseudo-random weights so every
/// output element carries a distinct upstream gradient.
fn contract(tape: &mut Tape, y: Var) -> Result<Var> {
    let t = tape.value(y);
    let w: Vec<f64> = (0..t.len()).map(|k| ((k * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = tape.constant(Tensor::new(t.shape().to_vec(), w)?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn unary(f: fn(&mut Tape, Var) -> Var) -> Build {
    Box::new(move |t, v| {
        let y = f(t, v[0]);
        contract(t, y)
    })
}

fn binary(f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Build {
    Box::new(move |t, v| {
        let y = f(t, v[0], v[1])?;
        contract(t, y)
    })
}

const BAGS: [&[usize]; 3] = [&[0, 2, 2], &[1], &[3, 4, 0, 1]];

fn tiny_encoder() -> BagEncoder {
    BagEncoder { vocab_size: 5, dim: 3 }
}

fn bag_seqs() -> Vec<TokenSequence> {
    BAGS.iter().map(|b| TokenSequence { tokens: b.to_vec() }).collect()
}

fn tower_vars(v: &[Var]) -> ParamVars {
    // store order is b, embed, w
    ParamVars::from_pairs([("entity.b".to_string(), v[0]), ("entity.embed".into(), v[1]), ("entity.w".into(), v[2])])
}

fn proj_vars(v: &[Var]) -> ParamVars {
    ParamVars::from_pairs([
        (crate::graph::B1.to_string(), v[0]),
        (crate::graph::B2.into(), v[1]),
        (crate::graph::W1.into(), v[2]),
        (crate::graph::W2.into(), v[3]),
    ])
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            make: || binary(|t, a, b| t.matmul(a, b)),
            point: |r| vec![uniform(r, 3, 4, 1.0), uniform(r, 4, 2, 1.0)],
        },
        Case {
            name: "matmul_nt",
            make: || binary(|t, a, b| t.matmul_nt(a, b)),
            point: |r| vec![uniform(r, 3, 4, 1.0), uniform(r, 2, 4, 1.0)],
        },
        Case {
            name: "add_bias",
            make: || binary(|t, a, b| t.add_bias(a, b)),
            point: |r| vec![uniform(r, 3, 4, 1.0), uniform(r, 1, 4, 1.0)],
        },
        Case { name: "add", make: || binary(|t, a, b| t.add(a, b)), point: |r| vec![uniform(r, 3, 4, 1.0), uniform(r, 3, 4, 1.0)] },
        Case { name: "mul", make: || binary(|t, a, b| t.mul(a, b)), point: |r| vec![uniform(r, 3, 4, 1.0), uniform(r, 3, 4, 1.0)] },
        Case { name: "scale", make: || unary(|t, a| t.scale(a, -1.7)), point: |r| vec![uniform(r, 3, 4, 1.0)] },
        Case { name: "tanh", make: || unary(|t, a| t.tanh(a)), point: |r| vec![uniform(r, 3, 4, 2.0)] },
        Case { name: "elu", make: || unary(|t, a| t.elu(a)), point: |r| vec![uniform(r, 3, 4, 2.0)] },
        Case { name: "leaky_relu", make: || unary(|t, a| t.leaky_relu(a, 0.2)), point: |r| vec![uniform(r, 3, 4, 2.0)] },
        Case {
            name: "sum",
            make: || {
                Box::new(|t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    Ok(t.sum(sq))
                })
            },
            point: |r| vec![uniform(r, 3, 4, 1.0)],
        },
        Case {
            name: "embed_mean",
            make: || {
                Box::new(|t, v| {
                    let bags = Rc::new(BAGS.iter().map(|b| b.to_vec()).collect());
                    let y = t.embed_mean(v[0], bags)?;
                    contract(t, y)
                })
            },
            point: |r| vec![uniform(r, 5, 3, 1.0)],
        },
        Case {
            name: "gather_rows",
            make: || {
                Box::new(|t, v| {
                    let y = t.gather_rows(v[0], Rc::new(vec![4, 1, 1, 0]))?;
                    contract(t, y)
                })
            },
            point: |r| vec![uniform(r, 5, 3, 1.0)],
        },
        Case {
            name: "text_encoder",
            make: || {
                Box::new(|t, v| {
                    let seqs = bag_seqs();
                    let refs: Vec<&TokenSequence> = seqs.iter().collect();
                    let (y, _) = tiny_encoder().encode(t, &tower_vars(v), Tower::Entity, &refs)?;
                    contract(t, y)
                })
            },
            point: |r| vec![uniform(r, 1, 3, 0.5), uniform(r, 5, 3, 1.0), uniform(r, 3, 3, 1.0)],
        },
        Case {
            name: "loss_el",
            make: || Box::new(|t, v| loss_el_op(t, v[0])),
            point: |r| vec![uniform(r, 4, 4, 2.0)],
        },
        Case {
            name: "attention",
            make: || {
                Box::new(|t, v| {
                    let anchors = Rc::new(vec![0, 2, 4]);
                    let sets = Rc::new(vec![vec![0, 1, 2, 3], vec![2, 4], vec![4, 0, 1]]);
                    let h = attend_op(t, v[1], v[0], anchors, sets, 0.2)?;
                    contract(t, h)
                })
            },
            point: |r| vec![uniform(r, 1, 6, 1.0), uniform(r, 5, 3, 1.0)],
        },
        Case {
            name: "projection",
            make: || {
                Box::new(|t, v| {
                    let y = project_op(t, &proj_vars(v), v[4])?;
                    contract(t, y)
                })
            },
            // b1, b2, w1, w2, z
            point: |r| vec![uniform(r, 1, 4, 0.5), uniform(r, 1, 2, 0.5), uniform(r, 3, 4, 1.0), uniform(r, 4, 2, 1.0), uniform(r, 5, 3, 1.0)],
        },
        Case {
            name: "info_nce",
            make: || {
                Box::new(|t, v| {
                    let items = Rc::new(vec![
                        Contrast { anchor: 0, pos: vec![0, 3], neg: vec![1, 2] },
                        Contrast { anchor: 1, pos: vec![2], neg: vec![0, 1, 4] },
                        Contrast { anchor: 2, pos: vec![4], neg: vec![] },
                    ]);
                    Ok(info_nce_op(t, v[0], v[1], items, 0.5)?.0)
                })
            },
            point: |r| vec![uniform(r, 3, 4, 1.0), uniform(r, 5, 4, 1.0)],
        },
        Case { name: "objective_entity_tower", make: || objective(FeatureSource::EntityTower), point: |r| objective_point(FeatureSource::EntityTower, r) },
        Case { name: "objective_raw_trainable", make: || objective(FeatureSource::RawTrainable), point: |r| objective_point(FeatureSource::RawTrainable, r) },
    ]
}

/// A tiny instance exercising every term of the joint objective.
fn tiny_instance(features: FeatureSource) -> (Model, TrainData, ObjectiveSpec) {
    let n = 6;
    let vocab_size = 12;
    let entity_seqs: Vec<TokenSequence> =
        (0..n).map(|i| entity_sequence(&[6 + i], &[6 + (i + 1) % n, 6 + (i + 3) % n], 16).expect("fits")).collect();
    let mentions = (0..4).map(|k| (mention_sequence(&[6 + (k + 2) % n], &[6 + k], &[], 16).expect("fits"), k)).collect();
    let ring = |shift: usize| (0..n).map(move |i| (i, (i + shift) % n));
    let g1 = SnapshotGraph::from_edges(0, n, GraphKind::Relation, ring(1)).expect("valid");
    let g2 = SnapshotGraph::from_edges(1, n, GraphKind::Relation, ring(1).take(3).chain(ring(2))).expect("valid");
    let feature = SnapshotGraph::from_edges(0, n, GraphKind::Feature, ring(3)).expect("valid");
    let raw = Tensor::matrix(n, 4, (0..n * 4).map(|k| ((k * 5) % 7) as f64 / 7.0).collect()).expect("sized");
    let data = TrainData {
        vocab_size,
        entity_seqs,
        mentions,
        relation_pools: diff_pools(&g1, &g2).expect("same size"),
        feature_pools: pools_feature(&feature, 3, 1).expect("valid"),
        relation: g1,
        feature,
        raw_features: Some(raw),
    };
    let cfg = ModelConfig { dim: 3, graph: GraphConfig { hidden: 3, proj_dim: 3, ..Default::default() }, features };
    let spec = ObjectiveSpec {
        weights: LossWeights { a: 1.0, b: 0.7, c: 1.3 },
        contrastive: ContrastiveConfig::default(),
        sampler_threshold: 2,
        max_negatives: 3,
        seed: 5,
        epoch: 0,
    };
    (Model::new(cfg, vocab_size), data, spec)
}

fn objective(features: FeatureSource) -> Build {
    let (model, data, spec) = tiny_instance(features);
    let names: Vec<String> = model.init_params(&data, 0).expect("valid").names().cloned().collect();
    let nodes = data.graph_nodes();
    Box::new(move |t, v| {
        let vars = ParamVars::from_pairs(names.iter().cloned().zip(v.iter().copied()));
        Ok(batch_objective(t, &vars, &model, &data, &[0, 1, 2, 3], &nodes, &spec)?.0)
    })
}

fn objective_point(features: FeatureSource, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (model, data, _) = tiny_instance(features);
    let seed = rng.gen();
    let mut store = model.init_params(&data, seed).expect("valid");
    // push biases and the attention vector off their zero init
    for (_, t) in store.iter_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    store.iter().map(|(_, t)| t.clone()).collect()
}

fn run_case(case: &Case, probes: usize, tolerance: f64, seed: u64) -> Result<SuiteEntry> {
    let build = (case.make)();
    let mut rng = crate::seed::rng(&[seed, case.name.len() as u64, case.name.bytes().map(u64::from).sum()]);
    let mut worst = GradCheckReport { op: case.name.into(), max_rel_error: 0.0, tolerance, pass: true };
    let (mut done, mut rejected) = (0, 0);
    while done < probes {
        let point = (case.point)(&mut rng);
        if !probe_is_smooth(&build, &point)? {
            rejected += 1;
            if rejected > 50 * probes {
                return Err(Error::Config(format!("{}: could not find smooth probe points", case.name)));
            }
            continue;
        }
        let r = grad_check(case.name, &build, &point, tolerance)?;
        if r.max_rel_error > worst.max_rel_error || !r.pass {
            worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
        }
        worst.pass &= r.pass;
        done += 1;
    }
    Ok(SuiteEntry { report: worst, probes: done, rejected })
}

/// Runs every case; cases run in parallel since each owns its tape.
pub fn run_suite(probes: usize, tolerance: f64, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let cases = cases();
    let entries = cases.par_iter().map(|c| run_case(c, probes, tolerance, seed)).collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport { entries, seconds: start.elapsed().as_secs_f64() })
}

pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_probes() {
        let r = run_suite(3, DEFAULT_TOLERANCE, 1).unwrap();
        for e in &r.entries {
            assert!(e.report.pass, "{e:?}");
            assert_eq!(e.probes, 3);
        }
        assert_eq!(r.entries.len(), case_names().len());
    }

    #[test]
    fn objective_has_all_terms() {
        let (model, data, spec) = tiny_instance(FeatureSource::EntityTower);
        let params = model.init_params(&data, 0).unwrap();
        let nodes = data.graph_nodes();
        let mut comp = None;
        crate::autodiff::forward_backward(&params, |t, v| {
            let (l, c) = batch_objective(t, v, &model, &data, &[0, 1, 2, 3], &nodes, &spec)?;
            comp = Some(c);
            Ok(l)
        })
        .unwrap();
        let c = comp.unwrap();
        assert!(c.graph_evaluated);
        assert!(c.l_e > 0.0 && c.l_f > 0.0 && c.l_r > 0.0, "{c:?}");
    }
}
