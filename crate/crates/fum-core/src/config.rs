//! Run configuration: model dimensions, training hyperparameters, file
//! locations, synthetic-data and benchmark settings. Parsed from simple
//! `key = value` lines with `#` comments; every key can also arrive as a
//! `--set key=value` override.

use std::path::PathBuf;

use crate::attention::AttnScoring;
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    Full,
    FineOnly,
    CoarseOnly,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Ablation::Full),
            "fine_only" => Ok(Ablation::FineOnly),
            "coarse_only" => Ok(Ablation::CoarseOnly),
            other => Err(format!("expected full, fine_only or coarse_only, got `{other}`")),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Ablation::Full => write!(f, "full"),
            Ablation::FineOnly => write!(f, "fine_only"),
            Ablation::CoarseOnly => write!(f, "coarse_only"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossVariant {
    /// Mean over negatives of -ln sigmoid(r_pos - r_neg).
    #[default]
    LogSigmoid,
    /// Mean over negatives of -sigmoid(r_pos - r_neg), the loss formula
    /// as literally printed.
    PaperSigmoid,
}

impl std::str::FromStr for LossVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "log_sigmoid" => Ok(LossVariant::LogSigmoid),
            "paper_sigmoid" => Ok(LossVariant::PaperSigmoid),
            other => Err(format!("expected log_sigmoid or paper_sigmoid, got `{other}`")),
        }
    }
}

/// Model and training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// History length: number of clicked news kept per user.
    pub m: usize,
    /// Number of text genres per news.
    pub k: usize,
    /// Tokens kept per genre sequence.
    pub l: usize,
    /// Word embedding dimension.
    pub d: usize,
    pub d_genre: usize,
    pub d_pos: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub fastformer_layers: usize,
    /// Hidden width of the tanh-MLP attention scorers.
    pub d_att: usize,
    pub learning_rate: Real,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub loss_variant: LossVariant,
    /// Adds the original additive-attention query residual to each head.
    pub use_query_residual: bool,
    pub fastformer_scoring: AttnScoring,
    pub pool_scoring: AttnScoring,
    /// Reserved hook; only 0.0 is accepted.
    pub dropout: Real,
    pub min_token_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            m: 50,
            k: 4,
            l: 16,
            d: 300,
            d_genre: 32,
            d_pos: 32,
            heads: 20,
            head_dim: 20,
            fastformer_layers: 1,
            d_att: 400,
            learning_rate: 1e-4,
            epochs: 2,
            batch_size: 32,
            negatives_per_positive: 1,
            seed: 42,
            ablation: Ablation::Full,
            loss_variant: LossVariant::LogSigmoid,
            use_query_residual: false,
            fastformer_scoring: AttnScoring::LearnedVector,
            pool_scoring: AttnScoring::TanhMlp,
            dropout: 0.0,
            min_token_freq: 2,
        }
    }
}

impl TrainConfig {
    /// Model output dimension D = heads * head_dim.
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Width of one token of the behavior sequence: word, genre and
    /// position embeddings concatenated.
    pub fn d_token(&self) -> usize {
        self.d + self.d_genre + self.d_pos
    }

    /// Behavior document length L = m * k * l.
    pub fn seq_len(&self) -> usize {
        self.m * self.k * self.l
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("m", self.m),
            ("k", self.k),
            ("l", self.l),
            ("d", self.d),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("fastformer_layers", self.fastformer_layers),
            ("d_att", self.d_att),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("negatives_per_positive", self.negatives_per_positive),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is a reserved hook; only 0.0 is supported".into()));
        }
        Ok(())
    }
}

/// Shape of a generated topic-structured dataset. A user clicks a
/// candidate exactly when it shares the user's latent topic; training
/// labels are additionally flipped with probability `noise`, evaluation
/// labels follow the exact rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub users: usize,
    pub news: usize,
    pub train_impressions: usize,
    pub eval_impressions: usize,
    pub tokens_per_topic: usize,
    pub title_len: usize,
    pub candidates: usize,
    pub history_len: usize,
    pub noise: Real,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            topics: 8,
            users: 600,
            news: 2000,
            train_impressions: 5000,
            eval_impressions: 1000,
            tokens_per_topic: 30,
            title_len: 8,
            candidates: 4,
            history_len: 8,
            noise: 0.1,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("synth_topics", self.topics),
            ("synth_users", self.users),
            ("synth_news", self.news),
            ("synth_tokens_per_topic", self.tokens_per_topic),
            ("synth_title_len", self.title_len),
            ("synth_history_len", self.history_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.candidates < 2 {
            return Err(Error::Config("synth_candidates must be at least 2".into()));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config("synth_noise must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub d_in: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            lengths: vec![1024, 2048, 4096],
            trials: 5,
            d_in: 64,
            heads: 1,
            head_dim: 32,
        }
    }
}

/// Everything the CLI can be told: training setup, paths, synthetic-data
/// and benchmark settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AppConfig {
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub bench: BenchSettings,
    pub data_dir: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub news_cache: Option<PathBuf>,
    pub user_cache: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
    pub rank_out: Option<PathBuf>,
    pub pretrained_vectors: Option<PathBuf>,
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::InvalidConfigValue {
        key: key.to_string(),
        value: value.to_string(),
        what: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfigValue {
            key: key.to_string(),
            value: value.to_string(),
            what: "expected true or false".into(),
        }),
    }
}

impl AppConfig {
    /// Applies one `key = value` assignment. Unknown keys and malformed
    /// values are rejected naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        let b = &mut self.bench;
        match key {
            "m" => t.m = parse_as(key, value)?,
            "k" => t.k = parse_as(key, value)?,
            "l" => t.l = parse_as(key, value)?,
            "d" => t.d = parse_as(key, value)?,
            "d_genre" => t.d_genre = parse_as(key, value)?,
            "d_pos" => t.d_pos = parse_as(key, value)?,
            "heads" => t.heads = parse_as(key, value)?,
            "head_dim" => t.head_dim = parse_as(key, value)?,
            "fastformer_layers" => t.fastformer_layers = parse_as(key, value)?,
            "d_att" => t.d_att = parse_as(key, value)?,
            "learning_rate" => t.learning_rate = parse_as(key, value)?,
            "epochs" => t.epochs = parse_as(key, value)?,
            "batch_size" => t.batch_size = parse_as(key, value)?,
            "negatives_per_positive" => t.negatives_per_positive = parse_as(key, value)?,
            "seed" => {
                t.seed = parse_as(key, value)?;
                s.seed = t.seed;
            }
            "ablation" => t.ablation = parse_as(key, value)?,
            "loss_variant" => t.loss_variant = parse_as(key, value)?,
            "use_query_residual" => t.use_query_residual = parse_bool(key, value)?,
            "fastformer_scoring" => t.fastformer_scoring = parse_as(key, value)?,
            "pool_scoring" => t.pool_scoring = parse_as(key, value)?,
            "dropout" => t.dropout = parse_as(key, value)?,
            "min_token_freq" => t.min_token_freq = parse_as(key, value)?,
            "synth_topics" => s.topics = parse_as(key, value)?,
            "synth_users" => s.users = parse_as(key, value)?,
            "synth_news" => s.news = parse_as(key, value)?,
            "synth_train_impressions" => s.train_impressions = parse_as(key, value)?,
            "synth_eval_impressions" => s.eval_impressions = parse_as(key, value)?,
            "synth_tokens_per_topic" => s.tokens_per_topic = parse_as(key, value)?,
            "synth_title_len" => s.title_len = parse_as(key, value)?,
            "synth_candidates" => s.candidates = parse_as(key, value)?,
            "synth_history_len" => s.history_len = parse_as(key, value)?,
            "synth_noise" => s.noise = parse_as(key, value)?,
            "bench_lengths" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|p| p.trim().parse()).collect();
                b.lengths = parsed.map_err(|e| Error::InvalidConfigValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    what: format!("{e}"),
                })?;
            }
            "bench_trials" => b.trials = parse_as(key, value)?,
            "bench_d_in" => b.d_in = parse_as(key, value)?,
            "bench_heads" => b.heads = parse_as(key, value)?,
            "bench_head_dim" => b.head_dim = parse_as(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "model_path" => self.model_path = Some(PathBuf::from(value)),
            "news_cache" => self.news_cache = Some(PathBuf::from(value)),
            "user_cache" => self.user_cache = Some(PathBuf::from(value)),
            "metrics_out" => self.metrics_out = Some(PathBuf::from(value)),
            "rank_out" => self.rank_out = Some(PathBuf::from(value)),
            "pretrained_vectors" => self.pretrained_vectors = Some(PathBuf::from(value)),
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses a config file body: one `key = value` per line, blank lines
    /// and `#` comments ignored.
    pub fn apply_text(&mut self, text: &str, path: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::DataFormat {
                    path: path.to_string(),
                    line: lineno + 1,
                    what: format!("expected `key = value`, got `{line}`"),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.bench.trials < 5 {
            return Err(Error::Config("bench_trials must be at least 5".into()));
        }
        Ok(())
    }

    pub fn require_data_dir(&self) -> Result<&PathBuf> {
        self.data_dir
            .as_ref()
            .ok_or_else(|| Error::Config("data_dir is not set".into()))
    }

    pub fn require_model_path(&self) -> Result<&PathBuf> {
        self.model_path
            .as_ref()
            .ok_or_else(|| Error::Config("model_path is not set".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.m, 50);
        assert_eq!((c.heads, c.head_dim), (20, 20));
        assert_eq!(c.d_model(), 400);
        assert_eq!(c.d, 300);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.epochs, 2);
        assert_eq!(c.d_token(), 300 + 32 + 32);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let mut c = AppConfig::default();
        let err = c.set("learnig_rate", "0.1").unwrap_err().to_string();
        assert!(err.contains("learnig_rate"), "{err}");
    }

    #[test]
    fn malformed_value_names_the_key() {
        let mut c = AppConfig::default();
        let err = c.set("epochs", "three").unwrap_err().to_string();
        assert!(err.contains("epochs") && err.contains("three"), "{err}");
    }

    #[test]
    fn config_text_with_comments_parses() {
        let mut c = AppConfig::default();
        c.apply_text(
            "# desk run\nm = 8\nheads=2\n\nhead_dim = 16\nablation = fine_only\n",
            "test.cfg",
        )
        .unwrap();
        assert_eq!(c.train.m, 8);
        assert_eq!(c.train.d_model(), 32);
        assert_eq!(c.train.ablation, Ablation::FineOnly);
        let err = c.apply_text("m 8\n", "test.cfg").unwrap_err().to_string();
        assert!(err.contains("test.cfg:1"), "{err}");
    }

    #[test]
    fn dropout_hook_only_accepts_zero() {
        let mut c = AppConfig::default();
        c.set("dropout", "0.5").unwrap();
        assert!(c.validate().is_err());
    }
}
