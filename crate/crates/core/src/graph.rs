//! Attention aggregation over a graph view and the shared projection head.

use std::collections::HashMap;
use std::rc::Rc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{elu, leaky_relu, CustomOp, ParamVars, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::store::SnapshotGraph;

pub const ATTN: &str = "graph.attn";
pub const W1: &str = "proj.w1";
pub const B1: &str = "proj.b1";
pub const W2: &str = "proj.w2";
pub const B2: &str = "proj.b2";
pub const RAW_X: &str = "graph.x";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub threshold: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold == 0 {
            return Err(Error::Config("sampler threshold must be >= 1".into()));
        }
        Ok(())
    }
}

/// All neighbors when the degree fits under the threshold, otherwise a
/// uniform sample without replacement. Output is sorted.
pub fn sample_neighbors(graph: &SnapshotGraph, node: usize, cfg: &SamplerConfig, epoch: usize) -> Result<Vec<usize>> {
    if node >= graph.n() {
        return Err(Error::NodeOutOfRange { node, n: graph.n() });
    }
    let nbrs = graph.neighbors(node);
    Ok(subsample(nbrs, cfg.threshold, &[cfg.seed, epoch as u64, node as u64]))
}

/// Seeded subset of at most `cap` items from `items`, in original order.
pub fn subsample(items: &[usize], cap: usize, seed: &[u64]) -> Vec<usize> {
    if items.len() <= cap {
        return items.to_vec();
    }
    let mut rng = crate::seed::rng(seed);
    let mut picks = index::sample(&mut rng, items.len(), cap).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|k| items[k]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub hidden: usize,
    pub proj_dim: usize,
    pub slope: f64,
    /// Include each node in its own aggregation set.
    pub self_loops: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { hidden: 64, proj_dim: 64, slope: 0.2, self_loops: true }
    }
}

/// Attention vector over `[x_i ‖ x_j]` and the two-layer projection head.
pub fn init_params(store: &mut ParameterStore, in_dim: usize, cfg: &GraphConfig, rng: &mut impl Rng) -> Result<()> {
    store.insert(ATTN, Tensor::glorot(1, 2 * in_dim, rng))?;
    store.insert(W1, Tensor::glorot(in_dim, cfg.hidden, rng))?;
    store.insert(B1, Tensor::zeros(&[1, cfg.hidden]))?;
    store.insert(W2, Tensor::glorot(cfg.hidden, cfg.proj_dim, rng))?;
    store.insert(B2, Tensor::zeros(&[1, cfg.proj_dim]))?;
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention weights of `x_i` over `neighbors` (softmax of LeakyReLU scores)
/// and the pre-activation sums, alongside the raw scores.
fn attention(x_i: &[f64], neighbors: &[&[f64]], a: &[f64], slope: f64) -> (Vec<f64>, Vec<f64>) {
    let d = x_i.len();
    let self_term = dot(&a[..d], x_i);
    let e: Vec<f64> = neighbors.iter().map(|x_j| self_term + dot(&a[d..], x_j)).collect();
    let u: Vec<f64> = e.iter().map(|&v| leaky_relu(v, slope)).collect();
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = u.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    (w.into_iter().map(|v| v / total).collect(), e)
}

/// z_i = ELU(Σ α_ij x_j). Empty neighborhoods give the zero vector and
/// `isolated = true`.
pub fn attend_aggregate(x_i: &[f64], neighbors: &[&[f64]], a: &[f64], slope: f64) -> Result<Aggregate> {
    let d = x_i.len();
    if a.len() != 2 * d || neighbors.iter().any(|x| x.len() != d) {
        return Err(Error::shape("attend_aggregate", format!("x is {d}-dim, a has {} entries", a.len())));
    }
    if neighbors.is_empty() {
        return Ok(Aggregate { z: vec![0.0; d], alpha: Vec::new(), isolated: true });
    }
    let (alpha, _) = attention(x_i, neighbors, a, slope);
    let mut z = vec![0.0; d];
    for (w, x_j) in alpha.iter().zip(neighbors) {
        for (zk, xk) in z.iter_mut().zip(x_j.iter()) {
            *zk += w * xk;
        }
    }
    z.iter_mut().for_each(|v| *v = elu(*v));
    Ok(Aggregate { z, alpha, isolated: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub z: Vec<f64>,
    pub alpha: Vec<f64>,
    pub isolated: bool,
}

/// ELU(z W1 + b1) W2 + b2 for one row vector.
pub fn project(z: &[f64], w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Vec<f64>> {
    let (d, h, p) = (w1.rows(), w1.cols(), w2.cols());
    if z.len() != d || b1.len() != h || w2.rows() != h || b2.len() != p {
        return Err(Error::shape(
            "project",
            format!("z {} / w1 {d}x{h} / b1 {} / w2 {}x{p} / b2 {}", z.len(), b1.len(), w2.rows(), b2.len()),
        ));
    }
    let hidden: Vec<f64> = (0..h)
        .map(|c| elu(b1.data()[c] + (0..d).map(|r| z[r] * w1.row(r)[c]).sum::<f64>()))
        .collect();
    Ok((0..p).map(|c| b2.data()[c] + (0..h).map(|r| hidden[r] * w2.row(r)[c]).sum::<f64>()).collect())
}

/// Projection head on the tape, shared by both views.
pub fn project_op(tape: &mut Tape, vars: &ParamVars, z: Var) -> Result<Var> {
    let h = tape.matmul(z, vars.get(W1)?)?;
    let h = tape.add_bias(h, vars.get(B1)?)?;
    let h = tape.elu(h);
    let out = tape.matmul(h, vars.get(W2)?)?;
    tape.add_bias(out, vars.get(B2)?)
}

struct Attend {
    anchors: Rc<Vec<usize>>,
    sets: Rc<Vec<Vec<usize>>>,
    alphas: Vec<Vec<f64>>,
    slope_mask: Vec<Vec<f64>>,
    kink: f64,
}

impl CustomOp for Attend {
    fn name(&self) -> &'static str {
        "attend"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (x, a) = (inputs[0], inputs[1]);
        let d = x.cols();
        let (a_l, a_r) = a.data().split_at(d);
        let mut gx = Tensor::zeros(x.shape());
        let mut ga = Tensor::zeros(a.shape());
        for (row, (&i, set)) in self.anchors.iter().zip(self.sets.iter()).enumerate() {
            if set.is_empty() {
                continue;
            }
            let g_row = g.row(row);
            let alpha = &self.alphas[row];
            let dalpha: Vec<f64> = set.iter().map(|&j| dot(g_row, x.row(j))).collect();
            let mean: f64 = alpha.iter().zip(&dalpha).map(|(w, v)| w * v).sum();
            for (k, &j) in set.iter().enumerate() {
                let de = alpha[k] * (dalpha[k] - mean) * self.slope_mask[row][k];
                let (xi, xj) = (x.row(i).to_vec(), x.row(j).to_vec());
                let ga = ga.data_mut();
                for c in 0..d {
                    ga[c] += de * xi[c];
                    ga[d + c] += de * xj[c];
                }
                let gi = gx.row_mut(i);
                for c in 0..d {
                    gi[c] += de * a_l[c];
                }
                let gj = gx.row_mut(j);
                for c in 0..d {
                    gj[c] += alpha[k] * g_row[c] + de * a_r[c];
                }
            }
        }
        vec![Some(gx), Some(ga)]
    }

    fn kink_distance(&self) -> Option<f64> {
        Some(self.kink)
    }
}

/// Row r of the result is Σ_j α_j x_j for anchor `anchors[r]` over
/// `sets[r]` (indices into the rows of `x`); empty sets give zero rows.
/// Apply ELU afterwards to get the view embedding.
pub fn attend_op(
    tape: &mut Tape,
    x: Var,
    a: Var,
    anchors: Rc<Vec<usize>>,
    sets: Rc<Vec<Vec<usize>>>,
    slope: f64,
) -> Result<Var> {
    let (xt, at) = (tape.value(x), tape.value(a));
    let (n, d) = (xt.rows(), xt.cols());
    if at.len() != 2 * d {
        return Err(Error::shape("attend", format!("attention has {} entries for {d}-dim features", at.len())));
    }
    if anchors.len() != sets.len() || anchors.iter().chain(sets.iter().flatten()).any(|&v| v >= n) {
        return Err(Error::shape("attend", "anchor or neighbor index outside feature rows"));
    }
    let mut out = Tensor::zeros(&[anchors.len(), d]);
    let mut alphas = Vec::with_capacity(anchors.len());
    let mut slope_mask = Vec::with_capacity(anchors.len());
    let mut kink = f64::INFINITY;
    for (row, (&i, set)) in anchors.iter().zip(sets.iter()).enumerate() {
        let nbrs: Vec<&[f64]> = set.iter().map(|&j| xt.row(j)).collect();
        if nbrs.is_empty() {
            alphas.push(Vec::new());
            slope_mask.push(Vec::new());
            continue;
        }
        let (alpha, e) = attention(xt.row(i), &nbrs, at.data(), slope);
        let o = out.row_mut(row);
        for (w, x_j) in alpha.iter().zip(&nbrs) {
            for (oc, xc) in o.iter_mut().zip(x_j.iter()) {
                *oc += w * xc;
            }
        }
        // a lone neighbor has α = 1 regardless of its score
        if e.len() > 1 {
            kink = e.iter().fold(kink, |k, v| k.min(v.abs()));
        }
        slope_mask.push(e.iter().map(|&v| if v > 0.0 { 1.0 } else { slope }).collect());
        alphas.push(alpha);
    }
    Ok(tape.custom(vec![x, a], out, Box::new(Attend { anchors, sets, alphas, slope_mask, kink })))
}

/// Gathers the union of `anchors` and all nodes in `sets` into a compact
/// local numbering. Returns (global ids in local order, remapped anchors,
/// remapped sets).
pub fn localize(anchors: &[usize], sets: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>, Vec<Vec<usize>>) {
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut order = Vec::new();
    let mut id = |g: usize| {
        *local.entry(g).or_insert_with(|| {
            order.push(g);
            order.len() - 1
        })
    };
    let a: Vec<usize> = anchors.iter().map(|&g| id(g)).collect();
    let s: Vec<Vec<usize>> = sets.iter().map(|set| set.iter().map(|&g| id(g)).collect()).collect();
    (order, a, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, register};
    use crate::store::GraphKind;
    use proptest::prelude::*;
    use rand::Rng;

    fn star(n: usize) -> SnapshotGraph {
        SnapshotGraph::from_edges(0, n, GraphKind::Relation, (1..n).map(|l| (0, l))).unwrap()
    }

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sampler_contract() {
        let cfg = SamplerConfig { threshold: 5, seed: 3 };
        let g = star(4);
        assert_eq!(sample_neighbors(&g, 0, &cfg, 0).unwrap(), vec![1, 2, 3]);

        let g = star(11);
        let cfg = SamplerConfig { threshold: 4, seed: 3 };
        let s = sample_neighbors(&g, 0, &cfg, 2).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_neighbors(&g, 0, &cfg, 2).unwrap());
        assert!(sample_neighbors(&g, 11, &cfg, 0).is_err());
        let isolated = SnapshotGraph::empty(0, 3, GraphKind::Relation);
        assert!(sample_neighbors(&isolated, 1, &cfg, 0).unwrap().is_empty());
    }

    #[test]
    fn sampler_varies_with_epoch() {
        let g = star(40);
        let cfg = SamplerConfig { threshold: 5, seed: 1 };
        let samples: Vec<_> = (0..5).map(|e| sample_neighbors(&g, 0, &cfg, e).unwrap()).collect();
        assert!(samples.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn aggregation_examples() {
        let a = [0.3, -0.2, 0.5, 0.1];
        let xi = [0.4, 0.1];
        let xj = [-0.7, 0.9];
        let single = attend_aggregate(&xi, &[&xj], &a, 0.2).unwrap();
        assert_eq!(single.alpha, vec![1.0]);
        assert_eq!(single.z, vec![elu(-0.7), elu(0.9)]);

        let twin = attend_aggregate(&xi, &[&xj, &xj], &a, 0.2).unwrap();
        assert_eq!(twin.alpha, vec![0.5, 0.5]);

        let empty = attend_aggregate(&xi, &[], &a, 0.2).unwrap();
        assert!(empty.isolated);
        assert_eq!(empty.z, vec![0.0, 0.0]);
    }

    // scalar re-implementation written out term by term
    fn direct(xi: &[f64], nbrs: &[Vec<f64>], a: &[f64]) -> Vec<f64> {
        let d = xi.len();
        let mut scores = Vec::new();
        for xj in nbrs {
            let mut s = 0.0;
            for k in 0..d {
                s += a[k] * xi[k];
            }
            for k in 0..d {
                s += a[d + k] * xj[k];
            }
            scores.push(if s > 0.0 { s } else { 0.2 * s });
        }
        let denom: f64 = scores.iter().map(|s| s.exp()).sum();
        let mut z = vec![0.0; d];
        for (s, xj) in scores.iter().zip(nbrs) {
            for k in 0..d {
                z[k] += s.exp() / denom * xj[k];
            }
        }
        z.into_iter().map(|v| if v > 0.0 { v } else { v.exp() - 1.0 }).collect()
    }

    #[test]
    fn aggregation_matches_direct_evaluation() {
        let mut rng = crate::seed::rng(&[9]);
        for _ in 0..20 {
            let xi: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nbrs: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let a: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let refs: Vec<&[f64]> = nbrs.iter().map(Vec::as_slice).collect();
            let got = attend_aggregate(&xi, &refs, &a, 0.2).unwrap();
            for (g, w) in got.z.iter().zip(direct(&xi, &nbrs, &a)) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn attention_weights_form_a_distribution(seed in any::<u64>(), k in 1usize..12) {
            let mut rng = crate::seed::rng(&[seed]);
            let xi: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let nbrs: Vec<Vec<f64>> = (0..k).map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let refs: Vec<&[f64]> = nbrs.iter().map(Vec::as_slice).collect();
            let agg = attend_aggregate(&xi, &refs, &a, 0.2).unwrap();
            prop_assert!((agg.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(agg.alpha.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn projection_examples() {
        let zero = Tensor::zeros(&[3, 3]);
        let zb = Tensor::zeros(&[1, 3]);
        assert_eq!(project(&[1.0, -2.0, 3.0], &zero, &zb, &zero, &zb).unwrap(), vec![0.0; 3]);

        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.row_mut(i)[i] = 1.0;
        }
        assert_eq!(project(&[0.5, 0.0, 2.0], &eye, &zb, &eye, &zb).unwrap(), vec![0.5, 0.0, 2.0]);
        assert!(project(&[1.0, 2.0], &eye, &zb, &eye, &zb).is_err());
    }

    #[test]
    fn projection_matches_matrix_arithmetic() {
        let mut rng = crate::seed::rng(&[4]);
        let (w1, b1, w2, b2) = (random(&mut rng, 4, 6), random(&mut rng, 1, 6), random(&mut rng, 6, 3), random(&mut rng, 1, 3));
        let z = random(&mut rng, 1, 4);
        let got = project(z.data(), &w1, &b1, &w2, &b2).unwrap();
        // oracle: flat-index arithmetic
        for c in 0..3 {
            let mut acc = b2.data()[c];
            for r in 0..6 {
                let mut pre = b1.data()[r];
                for k in 0..4 {
                    pre += z.data()[k] * w1.data()[k * 6 + r];
                }
                acc += elu(pre) * w2.data()[r * 3 + c];
            }
            assert!((acc - got[c]).abs() < 1e-12);
        }
        // the tape version agrees
        let mut store = ParameterStore::new();
        for (n, t) in [(W1, &w1), (B1, &b1), (W2, &w2), (B2, &b2)] {
            store.insert(n, t.clone()).unwrap();
        }
        let mut tape = Tape::new();
        let vars = register(&mut tape, &store);
        let zv = tape.constant(z.clone());
        let out = project_op(&mut tape, &vars, zv).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&got) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_head_treats_both_views_alike() {
        let mut rng = crate::seed::rng(&[5]);
        let mut store = ParameterStore::new();
        init_params(&mut store, 4, &GraphConfig { hidden: 5, proj_dim: 3, ..Default::default() }, &mut rng).unwrap();
        let z = random(&mut rng, 2, 4);
        let run = |store: &ParameterStore| {
            let mut tape = Tape::new();
            let vars = register(&mut tape, store);
            let zr = tape.constant(z.clone());
            let zf = tape.constant(z.clone());
            let r = project_op(&mut tape, &vars, zr).unwrap();
            let f = project_op(&mut tape, &vars, zf).unwrap();
            (tape.value(r).clone(), tape.value(f).clone())
        };
        let (r0, f0) = run(&store);
        assert_eq!(r0, f0);
        store.get_mut(W2).unwrap().data_mut()[0] += 0.5;
        let (r1, f1) = run(&store);
        assert_eq!(r1, f1);
        assert_ne!(r0, r1);
    }

    #[test]
    fn attend_op_matches_plain_function() {
        let mut rng = crate::seed::rng(&[6]);
        let x = random(&mut rng, 6, 3);
        let a = random(&mut rng, 1, 6);
        let anchors = Rc::new(vec![0, 2, 5]);
        let sets = Rc::new(vec![vec![1, 2, 3], vec![], vec![0, 5]]);
        let mut tape = Tape::new();
        let (xv, av) = (tape.constant(x.clone()), tape.constant(a.clone()));
        let h = attend_op(&mut tape, xv, av, anchors.clone(), sets.clone(), 0.2).unwrap();
        let z = tape.elu(h);
        for (row, (&i, set)) in anchors.iter().zip(sets.iter()).enumerate() {
            let nbrs: Vec<&[f64]> = set.iter().map(|&j| x.row(j)).collect();
            let want = attend_aggregate(x.row(i), &nbrs, a.data(), 0.2).unwrap();
            assert_eq!(tape.value(z).row(row), want.z.as_slice());
        }
    }

    #[test]
    fn sampling_is_irrelevant_above_max_degree() {
        let mut rng = crate::seed::rng(&[8]);
        let mut edges = Vec::new();
        for _ in 0..40 {
            edges.push((rng.gen_range(0..15), rng.gen_range(0..15)));
        }
        let g = SnapshotGraph::from_edges(0, 15, GraphKind::Relation, edges).unwrap();
        let x = random(&mut rng, 15, 4);
        let a = random(&mut rng, 1, 8);
        let view = |seed: u64| -> Vec<Vec<f64>> {
            let cfg = SamplerConfig { threshold: g.max_degree(), seed };
            (0..15)
                .map(|i| {
                    let s = sample_neighbors(&g, i, &cfg, 0).unwrap();
                    let nbrs: Vec<&[f64]> = s.iter().map(|&j| x.row(j)).collect();
                    attend_aggregate(x.row(i), &nbrs, a.data(), 0.2).unwrap().z
                })
                .collect()
        };
        let base = view(0);
        for seed in 1..6 {
            assert_eq!(view(seed), base);
        }
    }

    #[test]
    fn full_view_pipeline_passes_gradient_check() {
        let mut rng = crate::seed::rng(&[10]);
        let anchors = Rc::new(vec![0, 1, 2, 3]);
        let sets = Rc::new(vec![vec![1, 2, 0], vec![0], vec![3, 4, 1, 2], vec![4, 3]]);
        let mut checked = 0;
        for _ in 0..50 {
            if checked == 5 {
                break;
            }
            let point = vec![
                random(&mut rng, 5, 3), // X, trainable
                random(&mut rng, 1, 6), // attention
                random(&mut rng, 3, 4),
                random(&mut rng, 1, 4),
                random(&mut rng, 4, 2),
                random(&mut rng, 1, 2),
            ];
            let (anchors, sets) = (anchors.clone(), sets.clone());
            let build = move |t: &mut Tape, v: &[Var]| {
                let h = attend_op(t, v[0], v[1], anchors.clone(), sets.clone(), 0.2)?;
                let z = t.elu(h);
                let vars = ParamVars::from_pairs([W1, B1, W2, B2].iter().map(|n| n.to_string()).zip(v[2..].iter().copied()));
                let p = project_op(t, &vars, z)?;
                let sq = t.mul(p, p)?;
                Ok(t.sum(sq))
            };
            if !crate::autodiff::probe_is_smooth(&build, &point).unwrap() {
                continue;
            }
            let report = grad_check("graph_view", build, &point, 1e-4).unwrap();
            assert!(report.pass, "{report:?}");
            checked += 1;
        }
        assert_eq!(checked, 5);
    }

    #[test]
    fn localize_compacts_ids() {
        let (order, a, s) = localize(&[7, 3], &[vec![3, 9], vec![7]]);
        assert_eq!(order, vec![7, 3, 9]);
        assert_eq!(a, vec![0, 1]);
        assert_eq!(s, vec![vec![1, 2], vec![0]]);
    }
}
