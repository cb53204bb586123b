//! Run configuration (`key = value` file plus per-field overrides).

use std::path::{Path, PathBuf};

use crate::container::{format_kv, parse_kv};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, DEFAULT_ALPHA, DEFAULT_LAMBDAS};
use crate::model::ModelConfig;
use crate::variant::VariantSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub variant: String,
    pub alpha: f64,
    pub lambdas: [f64; 4],
    pub extractor_seed: u64,
    pub data: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
    pub stem: usize,
    pub channels: [usize; 3],
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub deterministic: bool,
    pub augment: bool,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        TrainConfig {
            lr: 1e-4,
            lr_decay_factor: 0.1,
            epochs: 70,
            batch: 3,
            seed: 0,
            variant: "ours".into(),
            alpha: DEFAULT_ALPHA,
            lambdas: DEFAULT_LAMBDAS,
            extractor_seed: 0,
            data: None,
            width: 96,
            height: 48,
            stem: enc.stem,
            channels: enc.channels,
            checkpoint_every: 0,
            deterministic: false,
            augment: true,
            max_steps: None,
        }
    }
}

fn parse_list<const N: usize, T: std::str::FromStr>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = v
        .split(',')
        .map(|s| s.trim().parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {N} comma-separated values, got `{v}`")))
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse_one(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_one(key, value)?,
            "epochs" => self.epochs = parse_one(key, value)?,
            "batch" => self.batch = parse_one(key, value)?,
            "seed" => self.seed = parse_one(key, value)?,
            "variant" => self.variant = value.trim().to_string(),
            "alpha" => self.alpha = parse_one(key, value)?,
            "lambdas" => self.lambdas = parse_list(key, value)?,
            "extractor_seed" => self.extractor_seed = parse_one(key, value)?,
            "data" => self.data = Some(PathBuf::from(value.trim())),
            "width" => self.width = parse_one(key, value)?,
            "height" => self.height = parse_one(key, value)?,
            "stem" => self.stem = parse_one(key, value)?,
            "channels" => self.channels = parse_list(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_one(key, value)?,
            "deterministic" => self.deterministic = parse_one(key, value)?,
            "augment" => self.augment = parse_one(key, value)?,
            "max_steps" => {
                self.max_steps = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse_one(key, v)?),
                }
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn from_text(path: &Path, text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_kv(path, text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(path, &text)
    }

    pub fn to_text(&self) -> String {
        let mut pairs = vec![
            ("lr", self.lr.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("variant", self.variant.clone()),
            ("alpha", self.alpha.to_string()),
            ("lambdas", join(&self.lambdas)),
            ("extractor_seed", self.extractor_seed.to_string()),
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("stem", self.stem.to_string()),
            ("channels", join(&self.channels)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("augment", self.augment.to_string()),
        ];
        if let Some(d) = &self.data {
            pairs.push(("data", d.display().to_string()));
        }
        if let Some(m) = self.max_steps {
            pairs.push(("max_steps", m.to_string()));
        }
        format_kv(pairs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be >= 1".into()));
        }
        if self.width % 16 != 0 || self.height % 16 != 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "image dims {}x{} must be positive multiples of 16",
                self.width, self.height
            )));
        }
        self.loss_config().validate()?;
        VariantSpec::named(&self.variant)?;
        Ok(())
    }

    /// Epoch index from which the decayed rate applies.
    pub fn decay_epoch(&self) -> usize {
        ((self.epochs as f64) * 50.0 / 70.0).round() as usize
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn variant_spec(&self) -> Result<VariantSpec> {
        VariantSpec::named(&self.variant)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            encoder: EncoderConfig {
                stem: self.stem,
                channels: self.channels,
            },
            variant: self.variant_spec()?,
        })
    }

    /// Loss weights with the variant's consistency override applied.
    pub fn loss_config(&self) -> LossConfig {
        let alpha = VariantSpec::named(&self.variant)
            .map(|v| v.alpha(self.alpha))
            .unwrap_or(self.alpha);
        LossConfig {
            lambdas: self.lambdas,
            alpha,
            extractor_seed: self.extractor_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("lambdas", "1, 0.5, 0.4, 1").unwrap();
        cfg.set("variant", "TTT").unwrap();
        cfg.set("max_steps", "12").unwrap();
        let back = TrainConfig::from_text(Path::new("cfg"), &cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("learning_rate", "1").is_err());
        assert!(cfg.set("lambdas", "1,2").is_err());
        assert!(TrainConfig::from_text(Path::new("c"), "lr = 0\n").is_err());
        assert!(TrainConfig::from_text(Path::new("c"), "batch = 0\n").is_err());
    }

    #[test]
    fn decay_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.decay_epoch(), 50);
        assert_eq!(cfg.lr_at_epoch(49), 1e-4);
        assert_eq!(cfg.lr_at_epoch(50), 1e-4 * 0.1);
        assert_eq!(cfg.lr_at_epoch(69), 1e-4 * 0.1);
        let short = TrainConfig { epochs: 7, ..TrainConfig::default() };
        assert_eq!(short.decay_epoch(), 5);
    }

    #[test]
    fn variant_overrides_alpha() {
        let cfg = TrainConfig { variant: "noAC".into(), ..TrainConfig::default() };
        assert_eq!(cfg.loss_config().alpha, 0.0);
    }
}
