//! Bi-encoder text side: tokenization, marker-delimited sequences, the two
//! encoder towers, dot-product scoring and the in-batch linking loss.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::rc::Rc;

use crate::autodiff::{CustomOp, ParamVars, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::store::{EntityRecord, MentionRecord};

pub const MAX_SEQ_LEN: usize = 128;

pub const UNK: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MENTION_START: usize = 3;
pub const MENTION_END: usize = 4;
pub const ENT: usize = 5;

const SPECIALS: [&str; 6] = ["[UNK]", "[CLS]", "[SEP]", "[M_s]", "[M_e]", "[ENT]"];

pub fn is_marker(id: usize) -> bool {
    (CLS..=ENT).contains(&id)
}

/// Lowercases, splits on whitespace and emits each punctuation character as
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Token ↔ id map. Ids 0..6 are the reserved markers; corpus tokens follow
/// in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for text in texts {
            for tok in tokenize(text) {
                set.insert(tok);
            }
        }
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Vocabulary over entity titles/descriptions and mention tokens.
    pub fn from_corpus<'a>(
        entities: impl IntoIterator<Item = &'a EntityRecord>,
        mentions: impl IntoIterator<Item = &'a MentionRecord>,
    ) -> Self {
        let mut texts: Vec<&str> = Vec::new();
        for e in entities {
            texts.push(&e.title);
            texts.push(&e.description);
        }
        for m in mentions {
            for t in m.context_left.iter().chain(&m.mention).chain(&m.context_right) {
                texts.push(t);
            }
        }
        Self::build(texts)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokenizes `text` and maps to ids; returns the ids and the UNK count.
    pub fn encode_text(&self, text: &str) -> (Vec<usize>, usize) {
        self.encode_tokens(tokenize(text).iter().map(String::as_str))
    }

    /// Maps pre-split tokens (re-normalized through [`tokenize`]).
    pub fn encode_tokens<'a>(&self, toks: impl IntoIterator<Item = &'a str>) -> (Vec<usize>, usize) {
        let mut unk = 0;
        let mut out = Vec::new();
        for raw in toks {
            for t in tokenize(raw) {
                let id = self.id(&t);
                if id == UNK {
                    unk += 1;
                }
                out.push(id);
            }
        }
        (out, unk)
    }

    /// One token per line; the id is the line number.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Malformed { path: path.to_path_buf(), line: i + 1, msg: format!("expected {s}") });
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Marker-delimited token ids, at most [`MAX_SEQ_LEN`] long.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
}

/// `[CLS] ctxt_l [M_s] mention [M_e] ctxt_r [SEP]`. Over budget, contexts
/// are trimmed from their far ends so that the kept lengths differ by at
/// most one; the mention itself is never cut.
pub fn mention_sequence(left: &[usize], mention: &[usize], right: &[usize], budget: usize) -> Result<TokenSequence> {
    let fixed = mention.len() + 4;
    if fixed > budget {
        return Err(Error::SequenceOverflow(format!(
            "mention of {} tokens does not fit a budget of {budget}",
            mention.len()
        )));
    }
    let room = budget - fixed;
    let (kl, kr) = if left.len() + right.len() <= room {
        (left.len(), right.len())
    } else {
        let half = room / 2;
        if left.len() <= half {
            (left.len(), room - left.len())
        } else if right.len() <= room - half {
            (room - right.len(), right.len())
        } else {
            (half, room - half)
        }
    };
    let mut tokens = Vec::with_capacity(fixed + kl + kr);
    tokens.push(CLS);
    tokens.extend_from_slice(&left[left.len() - kl..]);
    tokens.push(MENTION_START);
    tokens.extend_from_slice(mention);
    tokens.push(MENTION_END);
    tokens.extend_from_slice(&right[..kr]);
    tokens.push(SEP);
    Ok(TokenSequence { tokens })
}

/// `[CLS] title [ENT] description [SEP]`, description cut from the right.
pub fn entity_sequence(title: &[usize], description: &[usize], budget: usize) -> Result<TokenSequence> {
    let fixed = title.len() + 3;
    if fixed > budget {
        return Err(Error::SequenceOverflow(format!("title of {} tokens does not fit a budget of {budget}", title.len())));
    }
    let kd = description.len().min(budget - fixed);
    let mut tokens = Vec::with_capacity(fixed + kd);
    tokens.push(CLS);
    tokens.extend_from_slice(title);
    tokens.push(ENT);
    tokens.extend_from_slice(&description[..kd]);
    tokens.push(SEP);
    Ok(TokenSequence { tokens })
}

pub fn build_mention_seq(rec: &MentionRecord, vocab: &Vocab, budget: usize) -> Result<TokenSequence> {
    let (left, _) = vocab.encode_tokens(rec.context_left.iter().map(String::as_str));
    let (mention, _) = vocab.encode_tokens(rec.mention.iter().map(String::as_str));
    let (right, _) = vocab.encode_tokens(rec.context_right.iter().map(String::as_str));
    mention_sequence(&left, &mention, &right, budget)
}

pub fn build_entity_seq(rec: &EntityRecord, vocab: &Vocab, budget: usize) -> Result<TokenSequence> {
    let (title, _) = vocab.encode_text(&rec.title);
    let (desc, _) = vocab.encode_text(&rec.description);
    entity_sequence(&title, &desc, budget)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tower {
    Mention,
    Entity,
}

impl Tower {
    pub fn prefix(self) -> &'static str {
        match self {
            Tower::Mention => "mention",
            Tower::Entity => "entity",
        }
    }
}

/// Anything that maps token sequences to pooled vectors on a tape.
pub trait TextEncoder {
    fn dim(&self) -> usize;

    /// Adds this encoder's parameters for `tower` to `store`.
    fn init_params(&self, tower: Tower, store: &mut ParameterStore, rng: &mut rand_chacha::ChaCha8Rng) -> Result<()>;

    /// Encodes a batch; row b of the result is the vector of `seqs[b]`.
    /// Returns the output var and how many out-of-vocabulary ids were mapped to UNK.
    fn encode(&self, tape: &mut Tape, params: &ParamVars, tower: Tower, seqs: &[&TokenSequence]) -> Result<(Var, usize)>;
}

/// Embedding table, mean pooling over all tokens, one dense layer, tanh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BagEncoder {
    pub vocab_size: usize,
    pub dim: usize,
}

impl TextEncoder for BagEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn init_params(&self, tower: Tower, store: &mut ParameterStore, rng: &mut rand_chacha::ChaCha8Rng) -> Result<()> {
        let p = tower.prefix();
        store.insert(format!("{p}.embed"), Tensor::glorot(self.vocab_size, self.dim, rng))?;
        store.insert(format!("{p}.w"), Tensor::glorot(self.dim, self.dim, rng))?;
        store.insert(format!("{p}.b"), Tensor::zeros(&[1, self.dim]))?;
        Ok(())
    }

    fn encode(&self, tape: &mut Tape, params: &ParamVars, tower: Tower, seqs: &[&TokenSequence]) -> Result<(Var, usize)> {
        let p = tower.prefix();
        let mut unk = 0;
        let bags: Vec<Vec<usize>> = seqs
            .iter()
            .map(|s| {
                s.tokens
                    .iter()
                    .map(|&t| {
                        if t < self.vocab_size {
                            t
                        } else {
                            unk += 1;
                            UNK
                        }
                    })
                    .collect()
            })
            .collect();
        let pooled = tape.embed_mean(params.get(&format!("{p}.embed"))?, Rc::new(bags))?;
        let h = tape.matmul(pooled, params.get(&format!("{p}.w"))?)?;
        let h = tape.add_bias(h, params.get(&format!("{p}.b"))?)?;
        Ok((tape.tanh(h), unk))
    }
}

/// Forward-only encoding; rows follow `seqs`.
pub fn encode_values(
    encoder: &dyn TextEncoder,
    params: &ParameterStore,
    tower: Tower,
    seqs: &[&TokenSequence],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = crate::autodiff::register(&mut tape, params);
    let (out, _) = encoder.encode(&mut tape, &vars, tower, seqs)?;
    Ok(tape.value(out).clone())
}

/// Dot-product candidate score.
pub fn score(y_m: &[f64], y_e: &[f64]) -> Result<f64> {
    if y_m.len() != y_e.len() {
        return Err(Error::shape("score", format!("{} vs {}", y_m.len(), y_e.len())));
    }
    Ok(y_m.iter().zip(y_e).map(|(a, b)| a * b).sum())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean over rows of `−s(m_i, e_i) + log Σ_j exp s(m_i, e_j)`; the gold
/// entity of row i is column i.
pub fn loss_el(scores: &Tensor) -> Result<f64> {
    if scores.rows() != scores.cols() || scores.shape().len() != 2 {
        return Err(Error::shape("loss_el", format!("score matrix must be square, got {:?}", scores.shape())));
    }
    if !scores.is_finite() {
        return Err(Error::NonFinite { op: "loss_el".into() });
    }
    let n = scores.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..n).map(|i| log_sum_exp(scores.row(i)) - scores.row(i)[i]).sum();
    Ok(total / n as f64)
}

struct InBatchSoftmax {
    softmax: Tensor,
}

impl CustomOp for InBatchSoftmax {
    fn name(&self) -> &'static str {
        "loss_el"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let n = self.softmax.rows();
        let scale = grad_out.item() / n as f64;
        let mut g = self.softmax.clone();
        for i in 0..n {
            g.row_mut(i)[i] -= 1.0;
        }
        for v in g.data_mut() {
            *v *= scale;
        }
        vec![Some(g)]
    }
}

/// Tape version of [`loss_el`].
pub fn loss_el_op(tape: &mut Tape, scores: Var) -> Result<Var> {
    let s = tape.value(scores);
    let value = loss_el(s)?;
    let mut softmax = s.clone();
    for i in 0..softmax.rows() {
        let row = softmax.row_mut(i);
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    Ok(tape.custom(vec![scores], Tensor::scalar(value), Box::new(InBatchSoftmax { softmax })))
}
