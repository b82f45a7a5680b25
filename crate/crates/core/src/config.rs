//! Run configuration: a flat `section.key = value` text format.
//!
//! Every key has a fixed type. Unknown keys, duplicates and unparsable values
//! are all reported together. The canonical rendering (every key, in table
//! order) is what gets hashed, so two configs hash equal exactly when they
//! describe the same run.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::catalog::{CatalogParams, InteractionParams, MIN_INTERACTIONS};
use crate::cf::CfParams;
use crate::decode::Scoring;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::grpo::{RewardRecipe, RlConfig, Sampler};
use crate::io;
use crate::policy::PolicyConfig;
use crate::sft::{SftConfig, TaskMix};
use crate::tokenizer::{TokenizerConfig, TokenizerKind};

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "MINIREC_OUT";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_items: usize,
    pub dim: usize,
    pub n_clusters: usize,
    pub noise_scale: f64,
    pub n_users: usize,
    pub markov_sharpness: f64,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Histories are truncated to their most recent items.
    pub max_history: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_items: 500,
            dim: 32,
            n_clusters: 20,
            noise_scale: 0.15,
            n_users: 2000,
            markov_sharpness: 0.9,
            min_interactions: MIN_INTERACTIONS,
            max_interactions: 12,
            max_history: 10,
        }
    }
}

impl DataConfig {
    pub fn catalog_params(&self) -> CatalogParams {
        CatalogParams {
            noise_scale: self.noise_scale,
            ..CatalogParams::new(self.n_items, self.dim, self.n_clusters)
        }
    }

    pub fn interaction_params(&self) -> InteractionParams {
        InteractionParams {
            min_len: self.min_interactions,
            max_len: self.max_interactions,
            ..InteractionParams::new(self.n_users, self.markov_sharpness)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SftStage {
    pub train: SftConfig,
    /// Mix the alignment families into the corpus.
    pub align: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlStage {
    pub train: RlConfig,
    /// Include alignment prompts among the rollouts.
    pub align: bool,
    pub cf: CfParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub policy: PolicyConfig,
    pub sft: SftStage,
    pub rl: RlStage,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            data: DataConfig::default(),
            tokenizer: TokenizerConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftStage {
                train: SftConfig::default(),
                align: true,
            },
            rl: RlStage {
                train: RlConfig::default(),
                align: true,
                cf: CfParams::default(),
            },
            eval: EvalConfig::default(),
        }
    }
}

type Setter = fn(&mut RunConfig, &str) -> std::result::Result<(), String>;

struct Field {
    key: &'static str,
    get: fn(&RunConfig) -> String,
    set: Setter,
}

fn parse<T: FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got {v:?}"))
}

fn list<T: FromStr>(v: &str, what: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|p| parse(p.trim(), what)).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

macro_rules! field {
    ($key:literal, $what:literal, $($path:ident).+) => {
        Field {
            key: $key,
            get: |c| c.$($path).+.to_string(),
            set: |c, v| {
                c.$($path).+ = parse(v, $what)?;
                Ok(())
            },
        }
    };
}

fn kind_name(k: TokenizerKind) -> &'static str {
    match k {
        TokenizerKind::RqKMeans => "rq_kmeans",
        TokenizerKind::RqVae => "rq_vae",
    }
}

fn scoring_name(s: Scoring) -> &'static str {
    match s {
        Scoring::Masked => "masked",
        Scoring::Raw => "raw",
    }
}

fn parse_scoring(v: &str) -> std::result::Result<Scoring, String> {
    match v {
        "masked" => Ok(Scoring::Masked),
        "raw" => Ok(Scoring::Raw),
        _ => Err(format!("expected masked or raw, got {v:?}")),
    }
}

fn optional(v: Option<usize>) -> String {
    v.map_or("all".into(), |n| n.to_string())
}

fn parse_optional(v: &str) -> std::result::Result<Option<usize>, String> {
    if v == "all" {
        Ok(None)
    } else {
        Ok(Some(parse(v, "a count or \"all\"")?))
    }
}

fn fields() -> Vec<Field> {
    vec![
        field!("seed", "an unsigned integer", seed),
        Field {
            key: "out",
            get: |c| c.out.display().to_string(),
            set: |c, v| {
                c.out = PathBuf::from(v);
                Ok(())
            },
        },
        field!("data.n_items", "an unsigned integer", data.n_items),
        field!("data.dim", "an unsigned integer", data.dim),
        field!("data.n_clusters", "an unsigned integer", data.n_clusters),
        field!("data.noise_scale", "a number", data.noise_scale),
        field!("data.n_users", "an unsigned integer", data.n_users),
        field!("data.markov_sharpness", "a number", data.markov_sharpness),
        field!("data.min_interactions", "an unsigned integer", data.min_interactions),
        field!("data.max_interactions", "an unsigned integer", data.max_interactions),
        field!("data.max_history", "an unsigned integer", data.max_history),
        Field {
            key: "tokenizer.kind",
            get: |c| kind_name(c.tokenizer.kind).into(),
            set: |c, v| {
                c.tokenizer.kind = match v {
                    "rq_kmeans" => TokenizerKind::RqKMeans,
                    "rq_vae" => TokenizerKind::RqVae,
                    _ => return Err(format!("expected rq_kmeans or rq_vae, got {v:?}")),
                };
                Ok(())
            },
        },
        field!("tokenizer.levels", "an unsigned integer", tokenizer.n_levels),
        field!("tokenizer.k", "an unsigned integer", tokenizer.k),
        field!("tokenizer.lloyd_iters", "an unsigned integer", tokenizer.lloyd_iters),
        field!("tokenizer.beta_commit", "a number", tokenizer.beta_commit),
        field!("tokenizer.rqvae_hidden", "an unsigned integer", tokenizer.rqvae.hidden),
        field!("tokenizer.rqvae_latent_dim", "an unsigned integer", tokenizer.rqvae.latent_dim),
        field!("tokenizer.rqvae_steps", "an unsigned integer", tokenizer.rqvae.steps),
        field!("tokenizer.rqvae_batch_size", "an unsigned integer", tokenizer.rqvae.batch_size),
        field!("tokenizer.rqvae_lr", "a number", tokenizer.rqvae.lr),
        field!("tokenizer.rqvae_warm_start_iters", "an unsigned integer", tokenizer.rqvae.warm_start_iters),
        field!("policy.layers", "an unsigned integer", policy.n_layers),
        field!("policy.width", "an unsigned integer", policy.width),
        field!("policy.heads", "an unsigned integer", policy.n_heads),
        field!("policy.ff_width", "an unsigned integer", policy.ff_width),
        field!("policy.max_len", "an unsigned integer", policy.max_len),
        field!("policy.tie_embeddings", "true or false", policy.tie_embeddings),
        field!("sft.epochs", "an unsigned integer", sft.train.epochs),
        field!("sft.batch_size", "an unsigned integer", sft.train.batch_size),
        field!("sft.lr", "a number", sft.train.lr),
        field!("sft.patience", "an unsigned integer", sft.train.patience),
        field!("sft.align", "true or false", sft.align),
        field!("rl.group_size", "an unsigned integer", rl.train.group_size),
        field!("rl.clip_eps", "a number", rl.train.clip_eps),
        field!("rl.beta_kl", "a number", rl.train.beta_kl),
        field!("rl.lr", "a number", rl.train.lr),
        field!("rl.epochs", "an unsigned integer", rl.train.epochs),
        field!("rl.eps_std", "a number", rl.train.eps_std),
        Field {
            key: "rl.sampler",
            get: |c| c.rl.train.sampler.name().into(),
            set: |c, v| {
                c.rl.train.sampler = Sampler::from_name(v).map_err(|e| e.to_string())?;
                Ok(())
            },
        },
        field!("rl.top_k", "an unsigned integer", rl.train.sample.top_k),
        field!("rl.temperature", "a number", rl.train.sample.temperature),
        Field {
            key: "rl.scoring",
            get: |c| scoring_name(c.rl.train.scoring).into(),
            set: |c, v| {
                c.rl.train.scoring = parse_scoring(v)?;
                Ok(())
            },
        },
        Field {
            key: "rl.reward",
            get: |c| c.rl.train.recipe.name(),
            set: |c, v| {
                c.rl.train.recipe = RewardRecipe::from_name(v).map_err(|e| e.to_string())?;
                Ok(())
            },
        },
        field!("rl.prompts_per_step", "an unsigned integer", rl.train.prompts_per_step),
        field!("rl.updates_per_batch", "an unsigned integer", rl.train.updates_per_batch),
        Field {
            key: "rl.max_prompts_per_epoch",
            get: |c| optional(c.rl.train.max_prompts_per_epoch),
            set: |c, v| {
                c.rl.train.max_prompts_per_epoch = parse_optional(v)?;
                Ok(())
            },
        },
        field!("rl.trace", "true or false", rl.train.trace),
        field!("rl.align", "true or false", rl.align),
        field!("rl.cf_factors", "an unsigned integer", rl.cf.factors),
        field!("rl.cf_epochs", "an unsigned integer", rl.cf.epochs),
        field!("rl.cf_lr", "a number", rl.cf.lr),
        field!("eval.beam_width", "an unsigned integer", eval.beam_width),
        Field {
            key: "eval.ks",
            get: |c| join(&c.eval.ks),
            set: |c, v| {
                c.eval.ks = list(v, "a comma-separated list of cutoffs")?;
                Ok(())
            },
        },
        Field {
            key: "eval.scoring",
            get: |c| scoring_name(c.eval.scoring).into(),
            set: |c, v| {
                c.eval.scoring = parse_scoring(v)?;
                Ok(())
            },
        },
        Field {
            key: "eval.max_examples",
            get: |c| optional(c.eval.max_examples),
            set: |c, v| {
                c.eval.max_examples = parse_optional(v)?;
                Ok(())
            },
        },
    ]
}

/// Every recognized key, in canonical order.
pub fn known_keys() -> Vec<&'static str> {
    fields().iter().map(|f| f.key).collect()
}

impl RunConfig {
    /// Parses config text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let applied = cfg.apply_text(text);
        Self::merge(applied, cfg.validate())?;
        Ok(cfg)
    }

    /// Joins the problems of applying overrides with those of validating the
    /// result, so one pass reports everything wrong with a file.
    fn merge(applied: Result<()>, valid: Result<()>) -> Result<()> {
        match (applied, valid) {
            (Err(Error::Config { mut problems }), Err(Error::Config { problems: more })) => {
                problems.extend(more);
                Err(Error::Config { problems })
            }
            (Err(e), _) | (Ok(()), Err(e)) => Err(e),
            (Ok(()), Ok(())) => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_string(path)?;
        let mut cfg = Self::default();
        let applied = cfg.apply_text(&text);
        Self::merge(applied, cfg.validate()).map_err(|e| match e {
            Error::Config { problems } => Error::Config {
                problems: problems.into_iter().map(|p| format!("{}: {p}", path.display())).collect(),
            },
            other => other,
        })?;
        Ok(cfg)
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    context: "config".into(),
                    line: n + 1,
                    detail: format!("expected `key = value`, got {line:?}"),
                });
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_pairs(&pairs)
    }

    /// Applies overrides; collects every unknown key, duplicate and bad value.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let table = fields();
        let mut problems = Vec::new();
        let mut unknown = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (k, v) in pairs {
            let Some(f) = table.iter().find(|f| f.key == k) else {
                unknown.push(k.clone());
                continue;
            };
            if !seen.insert(k.clone()) {
                problems.push(format!("{k}: set more than once"));
                continue;
            }
            if let Err(e) = (f.set)(self, v) {
                problems.push(format!("{k}: {e}"));
            }
        }
        if !unknown.is_empty() {
            problems.insert(0, format!("unknown keys: {}", unknown.join(", ")));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { problems })
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply_pairs(&[(key.to_string(), value.to_string())])
    }

    /// Output directory: `MINIREC_OUT` wins over the file when set.
    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var(OUT_ENV) {
            if !dir.is_empty() {
                self.out = PathBuf::from(dir);
            }
        }
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        fields().iter().map(|f| (f.key, (f.get)(self))).collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        fields().iter().find(|f| f.key == key).map(|f| (f.get)(self))
    }

    /// `key = value` for every key, in canonical order.
    pub fn render(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Canonical text of the keys under `prefixes`, used for stage hashes.
    pub fn render_sections(&self, prefixes: &[&str]) -> String {
        self.pairs()
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Canonical text of everything except the output directory, so the same
    /// run renders identically wherever it is written.
    pub fn render_portable(&self) -> String {
        self.pairs()
            .iter()
            .filter(|(k, _)| *k != "out")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> String {
        io::sha256_hex(self.render_portable().as_bytes())
    }

    /// Keys whose values differ between two configs.
    pub fn diff(&self, other: &Self) -> Vec<&'static str> {
        self.pairs()
            .into_iter()
            .zip(other.pairs())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let d = &self.data;
        if d.n_items == 0 || d.n_clusters == 0 || d.n_clusters > d.n_items {
            problems.push(format!(
                "data.n_clusters ({}) must lie in [1, data.n_items ({})]",
                d.n_clusters, d.n_items
            ));
        }
        if d.dim < 4 {
            problems.push(format!("data.dim must be at least 4, got {}", d.dim));
        }
        if !(d.noise_scale >= 0.0 && d.noise_scale.is_finite()) {
            problems.push("data.noise_scale must be finite and nonnegative".into());
        }
        if d.n_users == 0 {
            problems.push("data.n_users must be positive".into());
        }
        if !(0.0..=1.0).contains(&d.markov_sharpness) {
            problems.push(format!("data.markov_sharpness must lie in [0, 1], got {}", d.markov_sharpness));
        }
        if d.min_interactions < MIN_INTERACTIONS || d.max_interactions < d.min_interactions {
            problems.push(format!(
                "data.min_interactions must be at least {MIN_INTERACTIONS} and at most data.max_interactions"
            ));
        }
        if d.max_history == 0 {
            problems.push("data.max_history must be positive".into());
        }
        let t = &self.tokenizer;
        if t.n_levels == 0 || t.k < 2 || t.lloyd_iters == 0 {
            problems.push("tokenizer.levels, tokenizer.k (at least 2) and tokenizer.lloyd_iters must be positive".into());
        }
        if !(t.beta_commit >= 0.0 && t.beta_commit.is_finite()) {
            problems.push("tokenizer.beta_commit must be finite and nonnegative".into());
        }
        if t.kind == TokenizerKind::RqVae
            && (t.rqvae.hidden == 0 || t.rqvae.latent_dim == 0 || t.rqvae.batch_size == 0 || !(t.rqvae.lr > 0.0))
        {
            problems.push("tokenizer.rqvae_* sizes and learning rate must be positive".into());
        }
        for r in [
            self.policy.validate(),
            self.rl.train.validate(),
            self.eval.validate(),
        ] {
            if let Err(Error::Config { problems: p }) = r {
                problems.extend(p);
            }
        }
        let s = &self.sft.train;
        if s.epochs == 0 || s.batch_size == 0 || s.patience == 0 || !(s.lr > 0.0 && s.lr.is_finite()) {
            problems.push("sft.epochs, sft.batch_size, sft.patience and sft.lr must be positive".into());
        }
        if self.rl.train.recipe.collaborative != 0.0 && (self.rl.cf.factors == 0 || self.rl.cf.epochs == 0) {
            problems.push("rl.cf_factors and rl.cf_epochs must be positive for the collaborative reward".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { problems })
        }
    }

    /// Task mix for the SFT corpus.
    pub fn sft_mix(&self) -> TaskMix {
        if self.sft.align {
            TaskMix::default()
        } else {
            TaskMix::retrieval_only()
        }
    }

    pub fn rl_mix(&self) -> TaskMix {
        if self.rl.align {
            TaskMix::default()
        } else {
            TaskMix::retrieval_only()
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            seed: self.seed,
            ..self.policy.clone()
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            seed: self.seed,
            ..self.sft.train.clone()
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            seed: self.seed,
            ..self.rl.train.clone()
        }
    }
}

/// A named change to a base configuration, for ablations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    overrides: Vec<(String, String)>,
}

impl Variant {
    /// Every variant name `from_name` accepts.
    pub const NAMES: [&'static str; 11] = [
        "full",
        "no-align",
        "sft-align-only",
        "rl-align-only",
        "sampler=beam",
        "sampler=topk",
        "sampler=dynamic",
        "reward=rule_only",
        "reward=rule_rank",
        "reward=collab",
        "reward=semantic",
    ];

    pub fn from_name(name: &str) -> Result<Self> {
        let set = |pairs: &[(&str, &str)]| -> Vec<(String, String)> {
            pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
        };
        let overrides = match name {
            "full" => set(&[("sft.align", "true"), ("rl.align", "true")]),
            "no-align" => set(&[("sft.align", "false"), ("rl.align", "false")]),
            "sft-align-only" => set(&[("sft.align", "true"), ("rl.align", "false")]),
            "rl-align-only" => set(&[("sft.align", "false"), ("rl.align", "true")]),
            _ => match name.split_once('=') {
                Some(("sampler", v)) if ["beam", "topk", "dynamic"].contains(&v) => set(&[("rl.sampler", v)]),
                Some(("reward", v)) if ["rule_only", "rule_rank", "collab", "semantic"].contains(&v) => {
                    set(&[("rl.reward", v)])
                }
                _ => {
                    return Err(Error::Config {
                        problems: vec![format!(
                            "unknown variant {name:?}; expected one of {}",
                            Self::NAMES.join(", ")
                        )],
                    })
                }
            },
        };
        Ok(Self {
            name: name.to_string(),
            overrides,
        })
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        cfg.apply_pairs(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
