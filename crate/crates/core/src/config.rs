//! Flat `key=value` run configuration merging every module's knobs.
//!
//! Resolution order, later wins: defaults, config file, `CYCLE_*`
//! environment variables, explicit overrides.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{Direction, EvalConfig};
use crate::pipeline::BuildConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "CYCLE_";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub build: BuildConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    /// Token budget for mention and entity sequences.
    pub budget: usize,
    /// 0 means one worker per core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            build: BuildConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
            budget: crate::text::MAX_SEQ_LEN,
            workers: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim().parse().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::ForwardOnly => "forward_only",
        Direction::ForwardAndBackward => "forward_and_backward",
    }
}

macro_rules! keys {
    ($( $key:literal => $($field:ident).+ ),* $(,)?) => {
        const SCALAR_KEYS: &[&str] = &[$($key),*];

        fn get_scalar(c: &RunConfig, key: &str) -> Option<String> {
            match key {
                $( $key => Some(c.$($field).+.to_string()), )*
                _ => None,
            }
        }

        fn set_scalar(c: &mut RunConfig, key: &str, v: &str) -> Option<Result<()>> {
            match key {
                $( $key => Some(parse(key, v).map(|x| c.$($field).+ = x)), )*
                _ => None,
            }
        }
    };
}

keys! {
    "seed" => train.seed,
    "budget" => budget,
    "workers" => workers,
    "epochs" => train.epochs,
    "batch_size" => train.batch_size,
    "lr" => train.lr,
    "weight_a" => train.weights.a,
    "weight_b" => train.weights.b,
    "weight_c" => train.weights.c,
    "temperature" => train.contrastive.temperature,
    "max_positives" => train.contrastive.max_positives,
    "sampler_threshold" => train.sampler_threshold,
    "max_negatives" => train.max_negatives,
    "node_cap" => train.node_cap,
    "adam_beta1" => train.adam.beta1,
    "adam_beta2" => train.adam.beta2,
    "adam_eps" => train.adam.eps,
    "dim" => train.model.dim,
    "hidden" => train.model.graph.hidden,
    "proj_dim" => train.model.graph.proj_dim,
    "slope" => train.model.graph.slope,
    "self_loops" => train.model.graph.self_loops,
    "min_count" => build.filter.min_count,
    "max_count" => build.filter.max_count,
    "knn_k" => build.knn.k,
    "negative_cap" => build.negative_cap,
    "synth.n" => synth.n,
    "synth.topics" => synth.topics,
    "synth.edges_per_entity" => synth.edges_per_entity,
    "synth.drift" => synth.drift,
    "synth.mentions_per_entity" => synth.mentions_per_entity,
    "synth.test_mentions_per_entity" => synth.test_mentions_per_entity,
    "synth.vocab_size" => synth.vocab_size,
    "synth.fillers" => synth.fillers,
    "synth.homophily" => synth.homophily,
    "synth.new_fraction" => synth.new_fraction,
    "synth.new_debut" => synth.new_debut,
    "synth.growth" => synth.growth,
    "synth.surname_group" => synth.surname_group,
    "synth.description_words" => synth.description_words,
    "synth.description_min_words" => synth.description_min_words,
    "synth.context_words" => synth.context_words,
    "synth.topical_rate" => synth.topical_rate,
    "synth.degree_exponent" => synth.degree_exponent,
}

const LIST_KEYS: &[&str] = &["features", "eval_ns", "eval_direction", "synth.years"];

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        SCALAR_KEYS.iter().chain(LIST_KEYS).copied()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        match key {
            "features" => Some(serde_json::to_value(self.train.model.features).ok()?.as_str()?.to_string()),
            "eval_ns" => Some(join(&self.eval.ns)),
            "eval_direction" => Some(direction_name(self.eval.direction).into()),
            "synth.years" => Some(join(&self.synth.years)),
            _ => get_scalar(self, key),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "features" => self.train.model.features = parse(key, value)?,
            "eval_ns" => self.eval.ns = list(key, value)?,
            "eval_direction" => {
                self.eval.direction = match value.trim() {
                    "forward_only" => Direction::ForwardOnly,
                    "forward_and_backward" => Direction::ForwardAndBackward,
                    _ => return Err(Error::Config(format!("{key}: unknown direction {value:?}"))),
                }
            }
            "synth.years" => self.synth.years = list(key, value)?,
            _ => return set_scalar(self, key, value).unwrap_or_else(|| Err(Error::Config(format!("unknown config key {key:?}")))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value", k + 1)))?;
            self.set(key.trim(), value).map_err(|e| Error::Config(format!("{origin}:{}: {e}", k + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `CYCLE_BATCH_SIZE` sets `batch_size`, `CYCLE_SYNTH_N` sets `synth.n`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut pending: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        pending.sort();
        for (name, value) in pending {
            let key = Self::keys()
                .find(|k| env_name(k) == name)
                .ok_or_else(|| Error::Config(format!("unknown config variable {name}")))?;
            self.set(key, &value)?;
        }
        Ok(())
    }

    /// Fully resolved `key=value` lines in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut keys: Vec<&str> = Self::keys().collect();
        keys.sort_unstable();
        keys.into_iter().map(|k| (k.to_string(), self.get(k).expect("known key"))).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        self.build.filter.validate()?;
        if self.budget < 8 {
            return Err(Error::Config("budget must be at least 8 tokens".into()));
        }
        Ok(())
    }
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

/// Defaults, then `file`, then the process environment, then `overrides`.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = file {
        cfg.apply_file(p)?;
    }
    cfg.apply_env(std::env::vars())?;
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.build.seed = cfg.train.seed;
    cfg.synth.seed = cfg.train.seed;
    cfg.build.max_seq_len = cfg.budget;
    cfg.validate()?;
    Ok(cfg)
}
