//! Plain-text run configuration: one `key = value` per line, `#` comments.
//! Unknown keys are errors so typos cannot silently fall back to defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use stormlatent_core::model::ModelConfig;
use stormlatent_core::synth::GeneratorConfig;
use stormlatent_core::train::{IterationSpace, LossVariant, TrainConfig};

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    UnknownKey { line: usize, key: String },
    BadValue { line: usize, key: String, value: String, expected: &'static str },
    Malformed { line: usize, text: String },
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "config io error: {e}"),
            ConfigError::UnknownKey { line, key } => {
                write!(f, "line {line}: unknown config key '{key}'")
            }
            ConfigError::BadValue { line, key, value, expected } => write!(
                f,
                "line {line}: key '{key}' expects {expected}, got '{value}'"
            ),
            ConfigError::Malformed { line, text } => {
                write!(f, "line {line}: expected 'key = value', got '{text}'")
            }
            ConfigError::Invalid(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Everything a run needs: training recipe, architecture, generator, and
/// evaluation/attribution parameters, with defaults for every key.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub generator: GeneratorConfig,
    pub eval_horizon: usize,
    pub eval_origin: usize,
    pub hss_standard: bool,
    pub thresholds: Vec<f64>,
    pub ig_steps: usize,
    pub attr_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            generator: GeneratorConfig::default(),
            eval_horizon: 24,
            eval_origin: 4,
            hss_standard: false,
            thresholds: vec![0.2, 1.0, 2.0, 4.0, 8.0],
            ig_steps: 128,
            attr_samples: 4,
        }
    }
}

fn parse_as<T: FromStr>(
    line: usize,
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
            expected: "true or false",
        }),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment. `line` is only for messages.
    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let u = |v: &mut usize| -> Result<(), ConfigError> {
            *v = parse_as(line, key, value, "an unsigned integer")?;
            Ok(())
        };
        let fl = |v: &mut f64| -> Result<(), ConfigError> {
            *v = parse_as(line, key, value, "a number")?;
            Ok(())
        };
        match key {
            // training recipe
            "epochs" => u(&mut self.train.epochs),
            "base_lr" => fl(&mut self.train.base_lr),
            "warmup_epochs" => u(&mut self.train.warmup_epochs),
            "adam_beta1" => fl(&mut self.train.adam_beta1),
            "adam_beta2" => fl(&mut self.train.adam_beta2),
            "adam_eps" => fl(&mut self.train.adam_eps),
            "weight_decay" => fl(&mut self.train.weight_decay),
            "dropout" => {
                fl(&mut self.train.dropout)?;
                self.model.dropout = self.train.dropout;
                Ok(())
            }
            "batch_size" => u(&mut self.train.batch_size),
            "seed" => {
                self.train.seed = parse_as(line, key, value, "an unsigned integer")?;
                Ok(())
            }
            "loss_variant" => {
                self.train.loss_variant =
                    LossVariant::from_str(value).map_err(|_| ConfigError::BadValue {
                        line,
                        key: key.into(),
                        value: value.into(),
                        expected: "one of mae, weighted_mae, weighted_mae_plain_ce, wmce",
                    })?;
                Ok(())
            }
            "iteration_space" => {
                self.train.iteration_space =
                    IterationSpace::from_str(value).map_err(|_| ConfigError::BadValue {
                        line,
                        key: key.into(),
                        value: value.into(),
                        expected: "latent or physical",
                    })?;
                Ok(())
            }
            "importance_sampling" => {
                self.train.importance_sampling = parse_bool(line, key, value)?;
                Ok(())
            }
            "importance_keep" => fl(&mut self.train.importance_keep),
            "noise_sigma" => fl(&mut self.train.noise_sigma),
            "grad_clip" => fl(&mut self.train.grad_clip),
            "val_horizon" => u(&mut self.train.val_horizon),

            // grid geometry, shared by the model and the generator
            "height" => {
                u(&mut self.model.height)?;
                self.generator.height = self.model.height;
                Ok(())
            }
            "width" => {
                u(&mut self.model.width)?;
                self.generator.width = self.model.width;
                Ok(())
            }
            "coarse_height" => {
                u(&mut self.model.coarse_height)?;
                self.generator.coarse_height = self.model.coarse_height;
                Ok(())
            }
            "coarse_width" => {
                u(&mut self.model.coarse_width)?;
                self.generator.coarse_width = self.model.coarse_width;
                Ok(())
            }
            "with_satellite" => {
                self.model.with_satellite = parse_bool(line, key, value)?;
                self.generator.with_satellite = self.model.with_satellite;
                Ok(())
            }

            // architecture
            "latent_channels" => u(&mut self.model.latent_channels),
            "extractor_width" => u(&mut self.model.extractor_width),
            "time_channels" => u(&mut self.model.time_channels),
            "const_channels" => u(&mut self.model.const_channels),
            "patch" => u(&mut self.model.patch),
            "vit_blocks" => u(&mut self.model.vit_blocks),
            "token_dim" => u(&mut self.model.token_dim),
            "heads" => u(&mut self.model.heads),
            "mlp_hidden" => u(&mut self.model.mlp_hidden),

            // synthetic generator
            "steps" => u(&mut self.generator.steps),
            "intensity_cap" => fl(&mut self.generator.intensity_cap),
            "radar_cap" => fl(&mut self.generator.radar_cap),
            "tau_raw" => fl(&mut self.generator.tau_raw),
            "birth_rate" => fl(&mut self.generator.birth_rate),
            "blob_radius_min" => fl(&mut self.generator.blob_radius_min),
            "blob_radius_max" => fl(&mut self.generator.blob_radius_max),
            "blob_amp_min" => fl(&mut self.generator.blob_amp_min),
            "blob_amp_max" => fl(&mut self.generator.blob_amp_max),
            "decay_half_life" => fl(&mut self.generator.decay_half_life),
            "humidity_threshold" => fl(&mut self.generator.humidity_threshold),
            "initial_blobs" => u(&mut self.generator.initial_blobs),
            "wind_scale" => fl(&mut self.generator.wind_scale),

            // evaluation / attribution
            "eval_horizon" => u(&mut self.eval_horizon),
            "eval_origin" => u(&mut self.eval_origin),
            "hss_standard" => {
                self.hss_standard = parse_bool(line, key, value)?;
                Ok(())
            }
            "thresholds" => {
                let parsed: Result<Vec<f64>, _> =
                    value.split(',').map(|v| v.trim().parse()).collect();
                self.thresholds = parsed.map_err(|_| ConfigError::BadValue {
                    line,
                    key: key.into(),
                    value: value.into(),
                    expected: "a comma-separated list of numbers",
                })?;
                Ok(())
            }
            "ig_steps" => u(&mut self.ig_steps),
            "attr_samples" => u(&mut self.attr_samples),

            _ => Err(ConfigError::UnknownKey { line, key: key.to_string() }),
        }
    }

    pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut warmup_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::Malformed { line, text: stripped.to_string() });
            };
            let key = key.trim();
            warmup_set |= key == "warmup_epochs";
            cfg.set(line, key, value.trim())?;
        }
        // The default warmup is 2/3 of the default epochs; keep that ratio
        // when only the epoch count is changed.
        if !warmup_set {
            cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(cfg.train.epochs * 2 / 3);
        }
        cfg.train
            .validate()
            .map_err(ConfigError::Invalid)?;
        cfg.model
            .validate()
            .map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        RunConfig::parse_str(&text)
    }

    /// Render every key; `parse_str(render(c)) == c` for any valid config.
    pub fn render(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let g = &self.generator;
        let thresholds: Vec<String> = self.thresholds.iter().map(|v| v.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("epochs", t.epochs.to_string());
        kv("base_lr", t.base_lr.to_string());
        kv("warmup_epochs", t.warmup_epochs.to_string());
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("dropout", t.dropout.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("seed", t.seed.to_string());
        kv("loss_variant", t.loss_variant.as_str().to_string());
        kv("iteration_space", t.iteration_space.as_str().to_string());
        kv("importance_sampling", t.importance_sampling.to_string());
        kv("importance_keep", t.importance_keep.to_string());
        kv("noise_sigma", t.noise_sigma.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv("val_horizon", t.val_horizon.to_string());
        kv("height", m.height.to_string());
        kv("width", m.width.to_string());
        kv("coarse_height", m.coarse_height.to_string());
        kv("coarse_width", m.coarse_width.to_string());
        kv("with_satellite", m.with_satellite.to_string());
        kv("latent_channels", m.latent_channels.to_string());
        kv("extractor_width", m.extractor_width.to_string());
        kv("time_channels", m.time_channels.to_string());
        kv("const_channels", m.const_channels.to_string());
        kv("patch", m.patch.to_string());
        kv("vit_blocks", m.vit_blocks.to_string());
        kv("token_dim", m.token_dim.to_string());
        kv("heads", m.heads.to_string());
        kv("mlp_hidden", m.mlp_hidden.to_string());
        kv("steps", g.steps.to_string());
        kv("intensity_cap", g.intensity_cap.to_string());
        kv("radar_cap", g.radar_cap.to_string());
        kv("tau_raw", g.tau_raw.to_string());
        kv("birth_rate", g.birth_rate.to_string());
        kv("blob_radius_min", g.blob_radius_min.to_string());
        kv("blob_radius_max", g.blob_radius_max.to_string());
        kv("blob_amp_min", g.blob_amp_min.to_string());
        kv("blob_amp_max", g.blob_amp_max.to_string());
        kv("decay_half_life", g.decay_half_life.to_string());
        kv("humidity_threshold", g.humidity_threshold.to_string());
        kv("initial_blobs", g.initial_blobs.to_string());
        kv("wind_scale", g.wind_scale.to_string());
        kv("eval_horizon", self.eval_horizon.to_string());
        kv("eval_origin", self.eval_origin.to_string());
        kv("hss_standard", self.hss_standard.to_string());
        kv("thresholds", thresholds.join(","));
        kv("ig_steps", self.ig_steps.to_string());
        kv("attr_samples", self.attr_samples.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_full_defaults() {
        let cfg = RunConfig::parse_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.epochs, 30);
        assert!((cfg.train.base_lr - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse_str(
            "# a comment\n\nepochs = 5  # trailing comment\n  seed=9\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let err = RunConfig::parse_str("epochs = 5\nepochz = 6\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epochz"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn type_error_cites_the_line() {
        let err = RunConfig::parse_str("\n\nepochs = abc\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("epochs"), "{msg}");
    }

    #[test]
    fn malformed_line_is_rejected() {
        let err = RunConfig::parse_str("just some words\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn render_round_trips_exactly() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 7;
        cfg.train.warmup_epochs = 4;
        cfg.train.loss_variant = LossVariant::Mae;
        cfg.train.iteration_space = IterationSpace::Physical;
        cfg.train.importance_sampling = true;
        cfg.model.height = 16;
        cfg.model.width = 16;
        cfg.model.coarse_height = 4;
        cfg.model.coarse_width = 4;
        cfg.generator.height = 16;
        cfg.generator.width = 16;
        cfg.generator.coarse_height = 4;
        cfg.generator.coarse_width = 4;
        cfg.thresholds = vec![0.2, 8.0];
        let back = RunConfig::parse_str(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn geometry_keys_update_model_and_generator_together() {
        let cfg = RunConfig::parse_str(
            "height = 16\nwidth = 16\ncoarse_height = 4\ncoarse_width = 4\nwith_satellite = false\n",
        )
        .unwrap();
        assert_eq!(cfg.model.height, 16);
        assert_eq!(cfg.generator.height, 16);
        assert!(!cfg.generator.with_satellite);
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        // warmup beyond total epochs fails TrainConfig validation.
        let err = RunConfig::parse_str("epochs = 5\nwarmup_epochs = 10\n").unwrap_err();
        assert!(err.to_string().contains("warmup"));
        // a grid not divisible by 4 fails ModelConfig validation.
        assert!(RunConfig::parse_str("height = 30\n").is_err());
    }
}
