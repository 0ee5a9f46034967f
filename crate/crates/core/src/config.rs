//! Flat `key = value` configuration.
//!
//! Lines are `key = value`; `#` starts a comment; lists are comma-separated.
//! A leading `profile = desk` switches the base defaults to the scaled-down
//! desk profile before the remaining keys are applied.

use sha2::{Digest, Sha256};

use crate::code::capacity;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMethod {
    KMeans,
    Preset,
    Uniform,
}

impl InitMethod {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "kmeans" => Some(Self::KMeans),
            "preset" => Some(Self::Preset),
            "uniform" => Some(Self::Uniform),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::KMeans => "kmeans",
            Self::Preset => "preset",
            Self::Uniform => "uniform",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Encoder layer widths; the last one is the code dimension.
    pub encoder_layers: Vec<usize>,
    /// Decoder hidden widths; an output layer to the item dimension follows.
    pub decoder_layers: Vec<usize>,
    pub level_sizes: Vec<usize>,
    pub code_dim: usize,
    pub gpt_layers: usize,
    pub gpt_heads: usize,
    pub gpt_hidden: usize,
    /// Includes the condition token slot.
    pub max_seq_len: usize,
    pub user_tower: Vec<usize>,
    pub item_tower: Vec<usize>,
    pub fusion: Vec<usize>,
    pub item_embedding_dim: usize,
    pub user_feature_dim: usize,
    /// Number of most recent history items pooled into the user tower input.
    pub history_window: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub n_hard: usize,
    pub n_easy: usize,
    pub init: InitMethod,
    /// Stage 2 stops early once mean dictionary row movement over 100 steps
    /// falls below this.
    pub convergence_tol: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServeConfig {
    pub top_k: usize,
    pub epsilon: usize,
    /// Sample cached interests from the predicted distribution instead of
    /// taking the top of it.
    pub sample_interests: bool,
    pub topn: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub interests_min: usize,
    pub interests_max: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub drift_prob: f64,
    /// Probability that a user's drift begins inside the training history.
    pub history_drift_prob: f64,
    /// Share of post-onset events drawn from the drift category.
    pub drift_share: f64,
    /// Probability that an event repeats the previous event's category.
    pub stickiness: f64,
    pub item_feature_dim: usize,
    pub cluster_std: f64,
    pub zipf_exponent: f64,
    pub n_user_features: usize,
    pub user_feature_vocab: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub serve: ServeConfig,
    pub synth: SynthConfig,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self::paper()
    }
}

impl Config {
    /// Full-size defaults.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig {
                encoder_layers: vec![256, 128, 64, 16],
                decoder_layers: vec![64, 128, 256],
                level_sizes: vec![32, 16, 8, 4],
                code_dim: 16,
                gpt_layers: 6,
                gpt_heads: 4,
                gpt_hidden: 16,
                max_seq_len: 50,
                user_tower: vec![1024, 512, 256, 64],
                item_tower: vec![512, 512, 128, 64],
                fusion: vec![256, 64],
                item_embedding_dim: 64,
                user_feature_dim: 32,
                history_window: 20,
            },
            train: TrainConfig {
                lambda1: 0.2,
                lambda2: 1.0,
                lambda3: 1.0,
                beta: 0.25,
                lr: 0.001,
                batch_size: 64,
                stage1_steps: 2000,
                stage2_steps: 2000,
                n_hard: 8,
                n_easy: 32,
                init: InitMethod::KMeans,
                convergence_tol: 1e-4,
            },
            serve: ServeConfig {
                top_k: 5,
                epsilon: 3,
                sample_interests: false,
                topn: vec![20, 50],
            },
            synth: SynthConfig {
                n_users: 2000,
                n_items: 500,
                n_categories: 8,
                interests_min: 2,
                interests_max: 4,
                seq_len_min: 10,
                seq_len_max: 14,
                drift_prob: 0.3,
                history_drift_prob: 1.0,
                drift_share: 0.3,
                stickiness: 0.8,
                item_feature_dim: 16,
                cluster_std: 0.35,
                zipf_exponent: 1.0,
                n_user_features: 2,
                user_feature_vocab: 8,
            },
            min_count: 5,
            seed: 0,
        }
    }

    /// Scaled-down model for single-core desk runs.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.model = ModelConfig {
            encoder_layers: vec![32, 8],
            decoder_layers: vec![32],
            level_sizes: vec![8, 4],
            code_dim: 8,
            gpt_layers: 2,
            gpt_heads: 2,
            gpt_hidden: 16,
            max_seq_len: 24,
            user_tower: vec![64, 32],
            item_tower: vec![64, 32],
            fusion: vec![64, 32],
            item_embedding_dim: 16,
            user_feature_dim: 16,
            history_window: 20,
        };
        c.train.lr = 0.003;
        c.train.n_hard = 4;
        c.train.n_easy = 8;
        c.train.stage1_steps = 1500;
        c.train.stage2_steps = 600;
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Data {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            entries.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match entries.iter().find(|(_, k, _)| k == "profile") {
            None => Self::paper(),
            Some((line, _, v)) => match v.as_str() {
                "paper" => Self::paper(),
                "desk" => Self::desk(),
                other => {
                    return Err(Error::Data {
                        line: *line,
                        msg: format!("unknown profile `{other}`"),
                    })
                }
            },
        };
        for (line, k, v) in &entries {
            if k == "profile" {
                continue;
            }
            cfg.set(k, v).map_err(|msg| Error::Data { line: *line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.serve;
        let y = &mut self.synth;
        match key {
            "encoder_layers" => m.encoder_layers = list(v)?,
            "decoder_layers" => m.decoder_layers = list_allow_empty(v)?,
            "level_sizes" => m.level_sizes = list(v)?,
            "code_dim" => m.code_dim = num(v)?,
            "gpt_layers" => m.gpt_layers = num(v)?,
            "gpt_heads" => m.gpt_heads = num(v)?,
            "gpt_hidden" => m.gpt_hidden = num(v)?,
            "max_seq_len" => m.max_seq_len = num(v)?,
            "user_tower" => m.user_tower = list(v)?,
            "item_tower" => m.item_tower = list(v)?,
            "fusion" => m.fusion = list(v)?,
            "item_embedding_dim" => m.item_embedding_dim = num(v)?,
            "user_feature_dim" => m.user_feature_dim = num(v)?,
            "history_window" => m.history_window = num(v)?,
            "lambda1" => t.lambda1 = num(v)?,
            "lambda2" => t.lambda2 = num(v)?,
            "lambda3" => t.lambda3 = num(v)?,
            "beta" => t.beta = num(v)?,
            "lr" => t.lr = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "stage1_steps" => t.stage1_steps = num(v)?,
            "stage2_steps" => t.stage2_steps = num(v)?,
            "n_hard" => t.n_hard = num(v)?,
            "n_easy" => t.n_easy = num(v)?,
            "init" => {
                t.init = InitMethod::parse(v).ok_or_else(|| format!("unknown init `{v}`"))?
            }
            "convergence_tol" => t.convergence_tol = num(v)?,
            "top_k" => s.top_k = num(v)?,
            "epsilon" => s.epsilon = num(v)?,
            "sample_interests" => s.sample_interests = num(v)?,
            "topn" => s.topn = list(v)?,
            "n_users" => y.n_users = num(v)?,
            "n_items" => y.n_items = num(v)?,
            "n_categories" => y.n_categories = num(v)?,
            "interests_min" => y.interests_min = num(v)?,
            "interests_max" => y.interests_max = num(v)?,
            "seq_len_min" => y.seq_len_min = num(v)?,
            "seq_len_max" => y.seq_len_max = num(v)?,
            "drift_prob" => y.drift_prob = num(v)?,
            "history_drift_prob" => y.history_drift_prob = num(v)?,
            "drift_share" => y.drift_share = num(v)?,
            "stickiness" => y.stickiness = num(v)?,
            "item_feature_dim" => y.item_feature_dim = num(v)?,
            "cluster_std" => y.cluster_std = num(v)?,
            "zipf_exponent" => y.zipf_exponent = num(v)?,
            "n_user_features" => y.n_user_features = num(v)?,
            "user_feature_vocab" => y.user_feature_vocab = num(v)?,
            "min_count" => self.min_count = num(v)?,
            "seed" => self.seed = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let s = &self.serve;
        let err = |msg: String| Err(Error::Config(msg));
        if m.level_sizes.is_empty() || m.level_sizes.iter().any(|&x| x < 2) {
            return err("level_sizes needs at least one level, each of size >= 2".into());
        }
        if m.encoder_layers.last() != Some(&m.code_dim) {
            return err(format!(
                "encoder output width {:?} must equal code_dim {}",
                m.encoder_layers.last(),
                m.code_dim
            ));
        }
        if m.fusion.last() != m.item_tower.last() {
            return err("fusion output width must equal item tower output width".into());
        }
        if m.gpt_heads == 0 || m.gpt_hidden % m.gpt_heads != 0 {
            return err(format!(
                "gpt_hidden {} is not divisible by gpt_heads {}",
                m.gpt_hidden, m.gpt_heads
            ));
        }
        if m.max_seq_len < 2 {
            return err("max_seq_len must leave room for at least one item".into());
        }
        let zero_dims = [
            m.code_dim,
            m.gpt_layers,
            m.item_embedding_dim,
            m.user_feature_dim,
            m.history_window,
        ];
        if zero_dims.contains(&0)
            || [&m.user_tower, &m.item_tower, &m.fusion, &m.encoder_layers]
                .iter()
                .any(|l| l.is_empty() || l.contains(&0))
            || m.decoder_layers.contains(&0)
        {
            return err("layer widths and dimensions must be positive".into());
        }
        for (name, w) in [
            ("lambda1", t.lambda1),
            ("lambda2", t.lambda2),
            ("lambda3", t.lambda3),
            ("beta", t.beta),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return err(format!("{name} must be a finite non-negative number"));
            }
        }
        if t.lambda3 <= 0.0 {
            return err("lambda3 must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return err("lr must be positive".into());
        }
        if t.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        let cap = capacity(&m.level_sizes);
        if t.n_hard + t.n_easy >= cap {
            return err(format!(
                "n_hard + n_easy = {} must be below the dictionary capacity {cap}",
                t.n_hard + t.n_easy
            ));
        }
        let min_m = *m.level_sizes.iter().min().expect("non-empty");
        if s.top_k == 0 || s.epsilon == 0 || s.top_k > s.epsilon * min_m || s.top_k > cap {
            return err(format!(
                "top_k {} cannot be filled under epsilon {} with smallest level size {min_m}",
                s.top_k, s.epsilon
            ));
        }
        if s.topn.is_empty() || s.topn.contains(&0) {
            return err("topn must list positive cutoffs".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let s = &self.serve;
        let y = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("encoder_layers", join(&m.encoder_layers));
        kv("decoder_layers", join(&m.decoder_layers));
        kv("level_sizes", join(&m.level_sizes));
        kv("code_dim", m.code_dim.to_string());
        kv("gpt_layers", m.gpt_layers.to_string());
        kv("gpt_heads", m.gpt_heads.to_string());
        kv("gpt_hidden", m.gpt_hidden.to_string());
        kv("max_seq_len", m.max_seq_len.to_string());
        kv("user_tower", join(&m.user_tower));
        kv("item_tower", join(&m.item_tower));
        kv("fusion", join(&m.fusion));
        kv("item_embedding_dim", m.item_embedding_dim.to_string());
        kv("user_feature_dim", m.user_feature_dim.to_string());
        kv("history_window", m.history_window.to_string());
        kv("lambda1", fmt_f(t.lambda1));
        kv("lambda2", fmt_f(t.lambda2));
        kv("lambda3", fmt_f(t.lambda3));
        kv("beta", fmt_f(t.beta));
        kv("lr", fmt_f(t.lr));
        kv("batch_size", t.batch_size.to_string());
        kv("stage1_steps", t.stage1_steps.to_string());
        kv("stage2_steps", t.stage2_steps.to_string());
        kv("n_hard", t.n_hard.to_string());
        kv("n_easy", t.n_easy.to_string());
        kv("init", t.init.as_str().to_string());
        kv("convergence_tol", fmt_f(t.convergence_tol));
        kv("top_k", s.top_k.to_string());
        kv("epsilon", s.epsilon.to_string());
        kv("sample_interests", s.sample_interests.to_string());
        kv("topn", join(&s.topn));
        kv("n_users", y.n_users.to_string());
        kv("n_items", y.n_items.to_string());
        kv("n_categories", y.n_categories.to_string());
        kv("interests_min", y.interests_min.to_string());
        kv("interests_max", y.interests_max.to_string());
        kv("seq_len_min", y.seq_len_min.to_string());
        kv("seq_len_max", y.seq_len_max.to_string());
        kv("drift_prob", fmt_f(y.drift_prob));
        kv("history_drift_prob", fmt_f(y.history_drift_prob));
        kv("drift_share", fmt_f(y.drift_share));
        kv("stickiness", fmt_f(y.stickiness));
        kv("item_feature_dim", y.item_feature_dim.to_string());
        kv("cluster_std", fmt_f(y.cluster_std));
        kv("zipf_exponent", fmt_f(y.zipf_exponent));
        kv("n_user_features", y.n_user_features.to_string());
        kv("user_feature_vocab", y.user_feature_vocab.to_string());
        kv("min_count", self.min_count.to_string());
        kv("seed", self.seed.to_string());
        out
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("bad value `{v}`: {e}"))
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    let l = list_allow_empty(v)?;
    if l.is_empty() {
        return Err("list must not be empty".into());
    }
    Ok(l)
}

fn list_allow_empty(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(num)
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

// Shortest representation that parses back to the same bits.
fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}
