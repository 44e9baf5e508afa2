//! Training configuration as a flat `key=value` text file.
//!
//! Unknown keys are rejected. Defaults follow the published architecture
//! (1-hour patches of 12 steps, 25 patches, two 4-layer transformers of width
//! 128, six gated decoder layers of width 32, banks of 25 prompts).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("line {0}: expected key=value")]
    Syntax(usize),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How many prompt banks a prompting stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankMode {
    /// Two banks (spatial/temporal or masked/unmasked).
    Separate,
    /// One bank shared by both routes.
    Single,
    /// Stage disabled.
    Off,
}

impl FromStr for BankMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "separate" => Ok(Self::Separate),
            "single" => Ok(Self::Single),
            "off" | "none" => Ok(Self::Off),
            other => Err(format!("expected separate|single|off, got `{other}`")),
        }
    }
}

impl fmt::Display for BankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Separate => "separate",
            Self::Single => "single",
            Self::Off => "off",
        })
    }
}

macro_rules! train_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct TrainConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $( stringify!($field) => {
                        self.$field = value.trim().parse::<$ty>().map_err(|e| ConfigError::BadValue {
                            key: key.to_string(),
                            msg: e.to_string(),
                        })?;
                    } )*
                    other => return Err(ConfigError::UnknownKey(other.to_string())),
                }
                Ok(())
            }

            /// Canonical `key=value` lines in declaration order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( out.push_str(&format!("{}={}\n", stringify!($field), self.$field)); )*
                out
            }
        }
    };
}

train_config! {
    seed: u64 = 0,
    /// Steps per patch.
    patch_len: usize = 12,
    /// Patches per window (history + horizon).
    num_patches: usize = 25,
    /// Signal channels per node.
    num_channels: usize = 1,
    d_hidden: usize = 128,
    heads: usize = 4,
    ffn_mult: usize = 4,
    enc_layers_temporal: usize = 4,
    enc_layers_spatial: usize = 4,
    /// Hop distances above this share one bucket.
    max_hops: usize = 4,
    d_dec: usize = 32,
    dec_layers: usize = 6,
    kernel: usize = 3,
    head_hidden: usize = 128,
    head_hidden2: usize = 256,
    num_prompts: usize = 25,
    prompt_threshold: f64 = 0.5,
    prompt_init_std: f64 = 0.02,
    mask_ratio: f64 = 0.75,
    lr_pretrain: f64 = 1e-3,
    lr_prompt: f64 = 5e-3,
    lr_finetune: f64 = 1e-3,
    weight_decay: f64 = 1e-4,
    grad_clip: f64 = 5.0,
    batch_size: usize = 4,
    epochs_pretrain: usize = 50,
    epochs_domain: usize = 30,
    epochs_task: usize = 30,
    /// 0 = every batch.
    max_batches_per_epoch: usize = 0,
    /// Validation checks without improvement before stopping.
    patience: usize = 10,
    /// Training window stride, in patches.
    window_stride: usize = 1,
    /// Validation window stride, in patches.
    val_stride: usize = 4,
    normalize: bool = true,
    tune_head: bool = false,
    source_train_fraction: f64 = 0.8,
    target_train_days: usize = 3,
    target_val_days: usize = 3,
    /// Fraction of nodes held out for kriging/extrapolation (2:1 observed:unobserved).
    unobserved_fraction: f64 = 1.0 / 3.0,
    node_split_seed: u64 = 7,
    knn_k: usize = 3,
    forecast_hist: usize = 24,
    forecast_pred: usize = 1,
    /// Fit domain prompts once and reuse them for every downstream task.
    share_domain_prompts: bool = true,
    domain_banks: BankMode = BankMode::Separate,
    task_banks: BankMode = BankMode::Separate,
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(lineno + 1))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("patch_len", self.patch_len),
            ("num_channels", self.num_channels),
            ("num_patches", self.num_patches),
            ("d_hidden", self.d_hidden),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("d_dec", self.d_dec),
            ("kernel", self.kernel),
            ("head_hidden", self.head_hidden),
            ("head_hidden2", self.head_hidden2),
            ("num_prompts", self.num_prompts),
            ("batch_size", self.batch_size),
            ("window_stride", self.window_stride),
            ("val_stride", self.val_stride),
            ("knn_k", self.knn_k),
            ("forecast_pred", self.forecast_pred),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("`{k}` must be positive")));
        }
        if self.d_hidden % self.heads != 0 {
            return Err(ConfigError::Invalid("heads must divide d_hidden".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(ConfigError::Invalid("kernel must be odd".into()));
        }
        if !(0.0..=1.0).contains(&self.prompt_threshold) {
            return Err(ConfigError::Invalid("prompt_threshold must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(ConfigError::Invalid("mask_ratio must lie in [0, 1)".into()));
        }
        if self.forecast_hist + self.forecast_pred != self.num_patches {
            return Err(ConfigError::Invalid("forecast_hist + forecast_pred must equal num_patches".into()));
        }
        if !(0.0..1.0).contains(&self.unobserved_fraction) || !(0.0..1.0).contains(&self.source_train_fraction) {
            return Err(ConfigError::Invalid("fractions must lie in [0, 1)".into()));
        }
        for (k, v) in [("lr_pretrain", self.lr_pretrain), ("lr_prompt", self.lr_prompt), ("lr_finetune", self.lr_finetune)] {
            if !(v > 0.0) {
                return Err(ConfigError::Invalid(format!("`{k}` must be positive")));
            }
        }
        Ok(())
    }

    /// Steps per window.
    pub fn window_len(&self) -> usize {
        self.patch_len * self.num_patches
    }

    /// Short hex digest of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Reduced-width profile for single-core desk runs of the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            d_hidden: 32,
            heads: 4,
            ffn_mult: 2,
            enc_layers_temporal: 2,
            enc_layers_spatial: 2,
            d_dec: 32,
            dec_layers: 3,
            head_hidden: 64,
            head_hidden2: 64,
            num_prompts: 16,
            epochs_pretrain: 20,
            epochs_domain: 10,
            epochs_task: 15,
            ..Self::default()
        }
    }
}
