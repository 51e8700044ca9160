//! Line-oriented `key = value` run configuration with two named presets.
//! A `preset` line resets every field, so it should come first; later
//! lines override individual values.

use std::path::Path;

use stran_core::backbone::BackboneConfig;
use stran_core::loss::LossWeights;
use stran_core::optim::TrainSchedule;
use stran_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    pub epochs: usize,
    pub warmup: usize,
    pub halve_at: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub lr_patch: usize,
    pub ckpt_every: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub backbone: BackboneConfig,
}

impl TrainConfig {
    /// Small-everything settings sized for a workstation CPU.
    pub fn desk() -> Self {
        TrainConfig {
            preset: "desk".into(),
            epochs: 30,
            warmup: 3,
            halve_at: 20,
            lr0: 1e-3,
            batch_size: 4,
            lr_patch: 24,
            ckpt_every: 10,
            seed: 1,
            weights: LossWeights::paper(),
            backbone: BackboneConfig {
                temporal_radius: 2,
                base_channels: 16,
                blocks: 4,
                injections: vec![1, 2, 3],
                upscale: 4,
                lte_widths: Default::default(),
            },
        }
    }

    /// The published training recipe; only worth running on real hardware.
    pub fn paper() -> Self {
        TrainConfig {
            preset: "paper".into(),
            epochs: 500,
            warmup: 20,
            halve_at: 300,
            lr0: 1e-3,
            batch_size: 4,
            lr_patch: 24,
            ckpt_every: 50,
            seed: 1,
            weights: LossWeights::paper(),
            backbone: BackboneConfig::default(),
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            warmup: self.warmup,
            halve_at: self.halve_at,
            lr0: self.lr0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        self.weights.validate()?;
        self.backbone.validate()?;
        if self.batch_size == 0 {
            return Err(Error::ConfigValue { key: "batch_size".into(), msg: "must be >= 1".into() });
        }
        if self.lr_patch % 4 != 0 || self.lr_patch == 0 {
            return Err(Error::ConfigValue {
                key: "lr_patch".into(),
                msg: "must be a positive multiple of 4".into(),
            });
        }
        if self.ckpt_every == 0 {
            return Err(Error::ConfigValue { key: "ckpt_every".into(), msg: "must be >= 1".into() });
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value.parse().map_err(|_| Error::ConfigValue {
                key: key.into(),
                msg: format!("cannot parse '{value}'"),
            })
        }
        match key {
            "preset" => {
                *self = match value {
                    "desk" => TrainConfig::desk(),
                    "paper" => TrainConfig::paper(),
                    _ => {
                        return Err(Error::ConfigValue {
                            key: key.into(),
                            msg: format!("unknown preset '{value}' (expected desk or paper)"),
                        })
                    }
                }
            }
            "epochs" => self.epochs = num(key, value)?,
            "warmup" => self.warmup = num(key, value)?,
            "halve_at" => self.halve_at = num(key, value)?,
            "lr0" => self.lr0 = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr_patch" => self.lr_patch = num(key, value)?,
            "ckpt_every" => self.ckpt_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "w_rec" => self.weights.rec = num(key, value)?,
            "w_adv" => self.weights.adv = num(key, value)?,
            "w_per" => self.weights.per = num(key, value)?,
            "w_tex" => self.weights.tex = num(key, value)?,
            "gp_lambda" => self.weights.gp = num(key, value)?,
            "temporal_radius" => self.backbone.temporal_radius = num(key, value)?,
            "base_channels" => self.backbone.base_channels = num(key, value)?,
            "blocks" => self.backbone.blocks = num(key, value)?,
            "upscale" => self.backbone.upscale = num(key, value)?,
            "injections" => {
                self.backbone.injections = if value == "none" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| num(key, s.trim()))
                        .collect::<Result<Vec<usize>>>()?
                };
            }
            _ => return Err(Error::UnknownConfigKey { key: key.into() }),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::desk();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigValue {
                key: format!("line {}", i + 1),
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Re-parseable rendering of every setting; printed at the start of a
    /// training run so the log records what actually ran.
    pub fn echo(&self) -> String {
        let injections = if self.backbone.injections.is_empty() {
            "none".to_string()
        } else {
            self.backbone
                .injections
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "# weights (w_rec, w_adv, w_per, w_tex) = ({}, {}, {}, {})\n\
             preset = {}\n\
             epochs = {}\n\
             warmup = {}\n\
             halve_at = {}\n\
             lr0 = {}\n\
             batch_size = {}\n\
             lr_patch = {}\n\
             ckpt_every = {}\n\
             seed = {}\n\
             w_rec = {}\n\
             w_adv = {}\n\
             w_per = {}\n\
             w_tex = {}\n\
             gp_lambda = {}\n\
             temporal_radius = {}\n\
             base_channels = {}\n\
             blocks = {}\n\
             injections = {}\n\
             upscale = {}\n",
            self.weights.rec,
            self.weights.adv,
            self.weights.per,
            self.weights.tex,
            self.preset,
            self.epochs,
            self.warmup,
            self.halve_at,
            self.lr0,
            self.batch_size,
            self.lr_patch,
            self.ckpt_every,
            self.seed,
            self.weights.rec,
            self.weights.adv,
            self.weights.per,
            self.weights.tex,
            self.weights.gp,
            self.backbone.temporal_radius,
            self.backbone.base_channels,
            self.backbone.blocks,
            injections,
            self.backbone.upscale,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_echo_shows_published_recipe() {
        let cfg = TrainConfig::parse("preset = paper").unwrap();
        let echo = cfg.echo();
        assert!(echo.contains("lr0 = 0.001"));
        assert!(echo.contains("epochs = 500"));
        assert!(echo.contains("warmup = 20"));
        assert!(echo.contains("halve_at = 300"));
        assert!(echo.contains("(1, 0.0005, 0.01, 0.01)"));
    }

    #[test]
    fn echo_reparses_to_the_same_config() {
        let mut cfg = TrainConfig::desk();
        cfg.apply("seed", "99").unwrap();
        cfg.apply("injections", "1,3").unwrap();
        let round = TrainConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn overrides_apply_after_preset() {
        let cfg = TrainConfig::parse("preset = paper\nepochs = 7\nhalve_at = 5\nwarmup = 2").unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.warmup, 2);
        assert_eq!(cfg.lr0, 1e-3);
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let err = TrainConfig::parse("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn bad_value_and_bad_line_shape_are_rejected() {
        assert!(TrainConfig::parse("epochs = fast").is_err());
        assert!(TrainConfig::parse("epochs 30").is_err());
        assert!(TrainConfig::parse("preset = gpu").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = TrainConfig::parse("# a comment\n\n  seed = 5\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.epochs, TrainConfig::desk().epochs);
    }

    #[test]
    fn validation_rejects_inconsistent_schedules() {
        assert!(TrainConfig::parse("warmup = 40").is_err());
        assert!(TrainConfig::parse("lr_patch = 10").is_err());
        assert!(TrainConfig::parse("batch_size = 0").is_err());
    }
}
