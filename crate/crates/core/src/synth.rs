//! Seeded synthetic temporal KG with topic drift and aligned mention corpora.
//!
//! Every entity has a base topic, reflected in its description, and a
//! drift topic. Each year a fraction of edges is rewired so the owning
//! endpoint gains a partner from its drift topic. Mention contexts are drawn
//! from the topics of the gold entity's neighbors in the mention's year, so
//! a model trained on one year sees different contexts in later years.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::Category;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub years: Vec<i32>,
    pub topics: usize,
    /// Mean relation degree.
    pub edges_per_entity: usize,
    /// Fraction of edges rewired per year step.
    pub drift: f64,
    /// Mentions per entity per year, split between train and test.
    pub mentions_per_entity: usize,
    pub test_mentions_per_entity: usize,
    /// Topic words across all topics.
    pub vocab_size: usize,
    pub fillers: usize,
    /// Chance that a new partner shares the intended topic.
    pub homophily: f64,
    pub new_fraction: f64,
    /// Index into `years` of the first year new entities take part in.
    pub new_debut: usize,
    /// Add debut edges without removing old ones.
    pub growth: bool,
    pub surname_group: usize,
    pub description_words: usize,
    /// Description length of an isolated entity. Lengths grow linearly
    /// with year-0 degree up to `description_words` at twice the mean
    /// degree; equal to `description_words` means fixed length.
    pub description_min_words: usize,
    pub context_words: usize,
    /// Chance that a context word is topical rather than filler.
    pub topical_rate: f64,
    /// Power-law exponent of endpoint propensities; 0 picks endpoints
    /// uniformly, larger values give heavier-tailed degrees.
    pub degree_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 500,
            years: vec![2019, 2020, 2021, 2022],
            topics: 10,
            edges_per_entity: 4,
            drift: 0.15,
            mentions_per_entity: 2,
            test_mentions_per_entity: 2,
            vocab_size: 300,
            fillers: 40,
            homophily: 0.9,
            new_fraction: 0.1,
            new_debut: 2,
            growth: false,
            surname_group: 8,
            description_words: 16,
            description_min_words: 16,
            context_words: 6,
            topical_rate: 0.7,
            degree_exponent: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.drift) {
            return bad(format!("drift must lie in [0, 1], got {}", self.drift));
        }
        if self.topics < 2 || self.n < self.topics {
            return bad(format!("need n >= topics >= 2, got n = {}, topics = {}", self.n, self.topics));
        }
        if self.years.is_empty() || self.years.windows(2).any(|w| w[0] >= w[1]) {
            return bad("years must be non-empty and increasing".into());
        }
        if self.vocab_size < self.topics {
            return bad("vocab_size must give every topic at least one word".into());
        }
        if self.surname_group == 0 || self.fillers == 0 {
            return bad("surname_group and fillers must be >= 1".into());
        }
        for (name, p) in [("homophily", self.homophily), ("new_fraction", self.new_fraction), ("topical_rate", self.topical_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.description_min_words > self.description_words {
            return bad("description_min_words must not exceed description_words".into());
        }
        if !(self.degree_exponent >= 0.0 && self.degree_exponent.is_finite()) {
            return bad(format!("degree_exponent must be finite and >= 0, got {}", self.degree_exponent));
        }
        Ok(())
    }

    fn words_per_topic(&self) -> usize {
        self.vocab_size / self.topics
    }
}

/// Everything the generator produces, before serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub base_topic: Vec<usize>,
    pub drift_topic: Vec<usize>,
    pub is_new: Vec<bool>,
    /// Sorted (a, b) with a < b, one set per year.
    pub edges: Vec<BTreeSet<(usize, usize)>>,
}

fn qid(i: usize) -> String {
    format!("Q{}", 100_000 + i)
}

fn topic_word(t: usize, k: usize) -> String {
    format!("t{t}w{k}")
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

struct Partners<'a> {
    by_topic: Vec<Vec<usize>>,
    present: &'a [bool],
    /// Endpoint propensity per entity.
    weight: &'a [f64],
}

/// Weighted draw from `pool`, falling back to a scan from a random start.
fn draw(rng: &mut ChaCha8Rng, pool: &[usize], weight: &[f64], ok: impl Fn(usize) -> bool) -> Option<usize> {
    if pool.is_empty() {
        return None;
    }
    if let Ok(dist) = WeightedIndex::new(pool.iter().map(|&w| weight[w])) {
        for _ in 0..16 {
            let w = pool[dist.sample(rng)];
            if ok(w) {
                return Some(w);
            }
        }
    }
    let start = rng.gen_range(0..pool.len());
    (0..pool.len()).map(|k| pool[(start + k) % pool.len()]).find(|&w| ok(w))
}

impl Partners<'_> {
    /// A partner for `u` that is present, not `u`, and not linked to `u`
    /// in any of `avoid`; drawn from `topic` with probability `homophily`.
    fn pick(
        &self,
        rng: &mut ChaCha8Rng,
        u: usize,
        topic: usize,
        homophily: f64,
        avoid: &[&BTreeSet<(usize, usize)>],
    ) -> Option<usize> {
        let ok = |w: usize| w != u && self.present[w] && avoid.iter().all(|s| !s.contains(&ordered(u, w)));
        if rng.gen_bool(homophily) {
            if let Some(w) = draw(rng, &self.by_topic[topic], self.weight, ok) {
                return Some(w);
            }
        }
        let all: Vec<usize> = (0..self.present.len()).collect();
        draw(rng, &all, self.weight, ok)
    }
}

pub fn build_world(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let n = cfg.n;
    let mut rng = crate::seed::rng(&[cfg.seed, 0x5717]);

    // members of a surname group get distinct base topics while possible
    let base_topic: Vec<usize> = (0..n).map(|i| (i / cfg.surname_group + i % cfg.surname_group) % cfg.topics).collect();
    let drift_topic: Vec<usize> = base_topic
        .iter()
        .map(|&b| (b + rng.gen_range(1..cfg.topics)) % cfg.topics)
        .collect();
    let n_new = (cfg.new_fraction * n as f64).round() as usize;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let mut is_new = vec![false; n];
    for &i in &ids[..n_new] {
        is_new[i] = true;
    }
    // propensity (rank + 1)^-γ over a random ranking
    ids.shuffle(&mut rng);
    let mut weight = vec![0.0; n];
    for (r, &i) in ids.iter().enumerate() {
        weight[i] = ((r + 1) as f64).powf(-cfg.degree_exponent);
    }
    let mut by_topic = vec![Vec::new(); cfg.topics];
    for (i, &t) in base_topic.iter().enumerate() {
        by_topic[t].push(i);
    }

    let old_count = n - n_new;
    let target = old_count * cfg.edges_per_entity / 2;
    if target > old_count * old_count.saturating_sub(1) / 2 {
        return Err(Error::Config(format!("cannot place {target} edges among {old_count} entities")));
    }
    let present: Vec<bool> = is_new.iter().map(|&x| !x).collect();
    let partners = Partners { by_topic: by_topic.clone(), present: &present, weight: &weight };
    let olds: Vec<usize> = (0..n).filter(|&i| present[i]).collect();
    let owners = WeightedIndex::new(olds.iter().map(|&i| weight[i])).map_err(|e| Error::Config(e.to_string()))?;
    let mut current = BTreeSet::new();
    let mut guard = 0;
    while current.len() < target {
        guard += 1;
        if guard > 100 * target + 1000 {
            return Err(Error::Config("edge budget is infeasible".into()));
        }
        let u = olds[owners.sample(&mut rng)];
        if let Some(w) = partners.pick(&mut rng, u, base_topic[u], cfg.homophily, &[&current]) {
            current.insert(ordered(u, w));
        }
    }

    let mut edges = vec![current.clone()];
    let mut present = present;
    for step in 1..cfg.years.len() {
        let prev = edges[step - 1].clone();
        let mut next = prev.clone();
        if step == cfg.new_debut {
            for i in 0..n {
                present[i] = true;
            }
        }
        let partners = Partners { by_topic: by_topic.clone(), present: &present, weight: &weight };

        let budget = (cfg.drift * prev.len() as f64).ceil() as usize;
        let mut pool: Vec<(usize, usize)> = prev.iter().copied().collect();
        pool.shuffle(&mut rng);
        let removed: Vec<(usize, usize)> = pool.into_iter().take(budget).collect();
        for e in &removed {
            next.remove(e);
        }
        for &(a, b) in &removed {
            // the owner moves toward its drift topic; if it has no room, try the other end
            let first = if rng.gen_bool(0.5) { a } else { b };
            let mut placed = false;
            for u in [first, a + b - first] {
                if let Some(w) = partners.pick(&mut rng, u, drift_topic[u], cfg.homophily, &[&prev, &next]) {
                    next.insert(ordered(u, w));
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Config(format!("infeasible rewiring budget {budget} at year step {step}")));
            }
        }

        if step == cfg.new_debut {
            let newcomers: Vec<usize> = (0..n).filter(|&i| is_new[i]).collect();
            let mut added = 0;
            for &u in &newcomers {
                for _ in 0..cfg.edges_per_entity.div_ceil(2) {
                    let w = partners
                        .pick(&mut rng, u, drift_topic[u], cfg.homophily, &[&prev, &next])
                        .ok_or_else(|| Error::Config("no room for new-entity edges".into()))?;
                    next.insert(ordered(u, w));
                    added += 1;
                }
            }
            if !cfg.growth {
                // drop as many pre-existing, untouched edges as were added
                let mut old: Vec<(usize, usize)> =
                    next.iter().copied().filter(|&(a, b)| prev.contains(&(a, b)) && !is_new[a] && !is_new[b]).collect();
                if old.len() < added {
                    return Err(Error::Config("not enough old edges to offset new-entity edges".into()));
                }
                old.shuffle(&mut rng);
                for e in old.into_iter().take(added) {
                    next.remove(&e);
                }
            }
        }
        edges.push(next);
    }
    Ok(SynthWorld { base_topic, drift_topic, is_new, edges })
}

#[derive(Serialize)]
struct EntityLine<'a> {
    qid: &'a str,
    title: &'a str,
    description: &'a str,
}

#[derive(Serialize)]
struct MentionLine<'a> {
    context_left: &'a [String],
    mention: &'a [String],
    context_right: &'a [String],
    label_qid: &'a str,
    category: Category,
    year: i32,
}

/// Writes `entities.jsonl`, `train_mentions.jsonl`, `test_mentions.jsonl`
/// and `edges/<year>.tsv` under `dir`.
pub fn generate(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<SynthWorld> {
    let dir = dir.as_ref();
    let world = build_world(cfg)?;
    let io = |p: &Path, e| Error::io(p, e);
    fs::create_dir_all(dir.join("edges")).map_err(|e| io(&dir.join("edges"), e))?;
    let mut rng = crate::seed::rng(&[cfg.seed, 0x7E47]);
    let wpt = cfg.words_per_topic();
    let filler = |rng: &mut ChaCha8Rng| format!("f{}", rng.gen_range(0..cfg.fillers));

    let mut deg0 = vec![0usize; cfg.n];
    for &(a, b) in &world.edges[0] {
        deg0[a] += 1;
        deg0[b] += 1;
    }
    let (lo, hi) = (cfg.description_min_words, cfg.description_words);
    let full_at = (2 * cfg.edges_per_entity).max(1);
    let mut ents = Vec::new();
    for i in 0..cfg.n {
        let q = qid(i);
        let title = format!("g{i} s{}", i / cfg.surname_group);
        let len = lo + (hi - lo) * deg0[i].min(full_at) / full_at;
        let desc: Vec<String> = (0..len)
            .map(|_| {
                if rng.gen_bool(0.8) {
                    topic_word(world.base_topic[i], rng.gen_range(0..wpt))
                } else {
                    filler(&mut rng)
                }
            })
            .collect();
        let line = EntityLine { qid: &q, title: &title, description: &desc.join(" ") };
        ents.push(serde_json::to_string(&line).expect("serializable"));
    }
    write_lines(&dir.join("entities.jsonl"), &ents)?;

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (y, &year) in cfg.years.iter().enumerate() {
        let edges = &world.edges[y];
        let mut nbrs = vec![Vec::new(); cfg.n];
        for &(a, b) in edges {
            nbrs[a].push(b);
            nbrs[b].push(a);
        }
        let mut lines = Vec::new();
        for a in edges {
            lines.push(format!("{}\t{}", qid(a.0), qid(a.1)));
        }
        write_lines(&dir.join("edges").join(format!("{year}.tsv")), &lines)?;

        for i in 0..cfg.n {
            if world.is_new[i] && y < cfg.new_debut {
                continue;
            }
            let category = if world.is_new[i] { Category::New } else { Category::Continual };
            let word = |rng: &mut ChaCha8Rng| {
                if !rng.gen_bool(cfg.topical_rate) {
                    return filler(rng);
                }
                let t = nbrs[i].choose(rng).map_or(world.base_topic[i], |&j| world.base_topic[j]);
                topic_word(t, rng.gen_range(0..wpt))
            };
            let q = qid(i);
            let surname = vec![format!("s{}", i / cfg.surname_group)];
            for k in 0..cfg.mentions_per_entity + cfg.test_mentions_per_entity {
                let left: Vec<String> = (0..cfg.context_words).map(|_| word(&mut rng)).collect();
                let right: Vec<String> = (0..cfg.context_words).map(|_| word(&mut rng)).collect();
                let line = MentionLine {
                    context_left: &left,
                    mention: &surname,
                    context_right: &right,
                    label_qid: &q,
                    category,
                    year,
                };
                let s = serde_json::to_string(&line).expect("serializable");
                if k < cfg.mentions_per_entity {
                    train.push(s);
                } else {
                    test.push(s);
                }
            }
        }
    }
    write_lines(&dir.join("train_mentions.jsonl"), &train)?;
    write_lines(&dir.join("test_mentions.jsonl"), &test)?;
    Ok(world)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Edge sets differ only by rewiring: how many edges were added and removed.
pub fn churn(a: &BTreeSet<(usize, usize)>, b: &BTreeSet<(usize, usize)>) -> (usize, usize) {
    (b.difference(a).count(), a.difference(b).count())
}
