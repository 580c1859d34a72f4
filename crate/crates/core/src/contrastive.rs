//! Cross-view InfoNCE over projected embeddings, and the weighted objective.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::dataset::SamplePools;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub max_positives: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 0.5, max_positives: 16 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.max_positives == 0 {
            return Err(Error::Config("max_positives must be >= 1".into()));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; `None` when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-anchor InfoNCE term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeLoss {
    pub value: f64,
    /// A zero-norm vector was involved and its similarities were set to 0.
    pub degenerate: bool,
}

/// −log(Σ_pos e^{sim/τ} / Σ_{pos ∪ neg} e^{sim/τ}). `None` for an empty
/// positive set.
pub fn info_nce(anchor: &[f64], candidates: &Tensor, pos: &[usize], neg: &[usize], tau: f64) -> Option<NodeLoss> {
    if pos.is_empty() {
        return None;
    }
    let mut degenerate = false;
    let mut sim = |j: usize| {
        cosine(anchor, candidates.row(j)).unwrap_or_else(|| {
            degenerate = true;
            0.0
        }) / tau
    };
    let sp: Vec<f64> = pos.iter().map(|&j| sim(j)).collect();
    let sn: Vec<f64> = neg.iter().map(|&j| sim(j)).collect();
    let num = log_sum_exp(sp.iter().copied());
    let den = log_sum_exp(sp.iter().chain(&sn).copied());
    Some(NodeLoss { value: (den - num).max(0.0), degenerate })
}

/// Feature-view anchor against relation-view candidates over relation pools.
pub fn loss_f(node: usize, z_fp_i: &[f64], z_rp: &Tensor, pools: &SamplePools, tau: f64) -> Option<NodeLoss> {
    info_nce(z_fp_i, z_rp, &pools.positives[node], &pools.negatives[node], tau)
}

/// Relation-view anchor against feature-view candidates over feature pools.
pub fn loss_r(node: usize, z_rp_i: &[f64], z_fp: &Tensor, pools: &SamplePools, tau: f64) -> Option<NodeLoss> {
    info_nce(z_rp_i, z_fp, &pools.positives[node], &pools.negatives[node], tau)
}

/// Mean of the per-node terms over nodes with positives; 0 when none has any.
pub fn mean_loss(terms: impl IntoIterator<Item = Option<NodeLoss>>) -> f64 {
    let (sum, count) = terms.into_iter().flatten().fold((0.0, 0usize), |(s, c), t| (s + t.value, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// One anchor row of a batched InfoNCE: candidate row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contrast {
    pub anchor: usize,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

struct InfoNce {
    items: Rc<Vec<Contrast>>,
    tau: f64,
    // per item: coefficient on each (pos ++ neg) similarity
    coeff: Vec<Vec<f64>>,
}

impl CustomOp for InfoNce {
    fn name(&self) -> &'static str {
        "info_nce"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (anchors, cands) = (inputs[0], inputs[1]);
        let mut ga = Tensor::zeros(anchors.shape());
        let mut gc = Tensor::zeros(cands.shape());
        let upstream = g.item();
        for (item, coeff) in self.items.iter().zip(&self.coeff) {
            let a = anchors.row(item.anchor);
            let na = norm(a);
            for (&j, &w) in item.pos.iter().chain(&item.neg).zip(coeff) {
                let c = cands.row(j);
                let nc = norm(c);
                if na == 0.0 || nc == 0.0 {
                    continue;
                }
                let cos = a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() / (na * nc);
                let s = upstream * w / self.tau;
                let (gar, gcr): (Vec<f64>, Vec<f64>) = a
                    .iter()
                    .zip(c)
                    .map(|(&x, &y)| (s * (y / (na * nc) - cos * x / (na * na)), s * (x / (na * nc) - cos * y / (nc * nc))))
                    .unzip();
                for (dst, v) in ga.row_mut(item.anchor).iter_mut().zip(gar) {
                    *dst += v;
                }
                for (dst, v) in gc.row_mut(j).iter_mut().zip(gcr) {
                    *dst += v;
                }
            }
        }
        vec![Some(ga), Some(gc)]
    }
}

/// Mean InfoNCE over `items` with non-empty positives, as a scalar on the
/// tape. Returns the variable and how many items had a zero-norm vector.
pub fn info_nce_op(tape: &mut Tape, anchors: Var, candidates: Var, items: Rc<Vec<Contrast>>, tau: f64) -> Result<(Var, usize)> {
    let (at, ct) = (tape.value(anchors), tape.value(candidates));
    if at.cols() != ct.cols() {
        return Err(Error::shape("info_nce", format!("anchors {} wide, candidates {}", at.cols(), ct.cols())));
    }
    if items.iter().any(|it| it.anchor >= at.rows() || it.pos.iter().chain(&it.neg).any(|&j| j >= ct.rows())) {
        return Err(Error::shape("info_nce", "row index out of range"));
    }
    let counted = items.iter().filter(|it| !it.pos.is_empty()).count();
    let mut total = 0.0;
    let mut degenerate = 0;
    let mut coeff = Vec::with_capacity(items.len());
    for it in items.iter() {
        if it.pos.is_empty() {
            coeff.push(Vec::new());
            continue;
        }
        let nl = info_nce(at.row(it.anchor), ct, &it.pos, &it.neg, tau).expect("non-empty positives");
        total += nl.value;
        degenerate += usize::from(nl.degenerate);
        // d(den − num)/d(sim_j/τ) = softmax_all_j − softmax_pos_j
        let s: Vec<f64> = it
            .pos
            .iter()
            .chain(&it.neg)
            .map(|&j| cosine(at.row(it.anchor), ct.row(j)).unwrap_or(0.0) / tau)
            .collect();
        let lse_all = log_sum_exp(s.iter().copied());
        let lse_pos = log_sum_exp(s[..it.pos.len()].iter().copied());
        let scale = 1.0 / counted as f64;
        coeff.push(
            s.iter()
                .enumerate()
                .map(|(k, &v)| {
                    let q = (v - lse_all).exp();
                    let p = if k < it.pos.len() { (v - lse_pos).exp() } else { 0.0 };
                    scale * (q - p)
                })
                .collect(),
        );
    }
    let value = if counted == 0 { 0.0 } else { total / counted as f64 };
    Ok((tape.custom(vec![anchors, candidates], Tensor::scalar(value), Box::new(InfoNce { items, tau, coeff })), degenerate))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_e: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub l: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { a: 1.0, b: 1.0, c: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.a, self.b, self.c];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::DegenerateObjective);
        }
        Ok(())
    }

    pub fn graph_active(&self) -> bool {
        self.b != 0.0 || self.c != 0.0
    }
}

pub fn combine(l_e: f64, l_f: f64, l_r: f64, w: LossWeights) -> Result<LossReport> {
    w.validate()?;
    let LossWeights { a, b, c } = w;
    Ok(LossReport { l_e, l_f, l_r, l: a * l_e + b * l_f + c * l_r, a, b, c })
}
