//! The flat key-value run configuration shared by every command.
//!
//! A run file holds one `key value` pair per line and may omit any key, in
//! which case the documented default applies. Encoder keys are the ones the
//! encoder itself serializes; the remainder describe the scene, the sensors,
//! and the optimizer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use tpv_core::data::Difficulty;
use tpv_core::encoder::EncoderConfig;
use tpv_core::head::LossInput;
use tpv_core::train::{Representation, TrainOptions};

use crate::CliError;

/// Everything a command needs beyond its paths: model shape, scene recipe,
/// sensor resolution, and optimizer schedule.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    /// Seeds scene layout and parameter initialization alike.
    pub seed: u64,
    pub difficulty: Difficulty,
    /// Surface rays cast for the labeled point cloud.
    pub rays: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub train: TrainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            seed: 7,
            difficulty: Difficulty::Scatter,
            rays: 8000,
            image_width: 80,
            image_height: 60,
            train: TrainOptions::default(),
        }
    }
}

impl RunConfig {
    /// Serializes every key, one per line, encoder keys first.
    pub fn to_text(&self) -> String {
        let mut out = self.encoder.to_text();
        let t = &self.train;
        let _ = write!(
            out,
            "seed {}\ndifficulty {}\nrays {}\nimage_width {}\nimage_height {}\nsteps {}\nlearning_rate {}\nmomentum {}\nwarmup_steps {}\ncosine {}\nce_input {}\nlovasz_input {}\nrepresentation {}\n",
            self.seed,
            self.difficulty.name(),
            self.rays,
            self.image_width,
            self.image_height,
            t.steps,
            t.learning_rate,
            t.momentum,
            t.warmup_steps,
            if t.cosine_decay { 1 } else { 0 },
            t.routing.ce_input.name(),
            t.routing.lovasz_input.name(),
            t.representation.name(),
        );
        out
    }

    /// Parses a run file, starting from defaults and overriding whatever the
    /// file mentions. Unknown and repeated keys are errors.
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let defaults = RunConfig::default();
        let mut encoder_keys: BTreeMap<String, String> = BTreeMap::new();
        for line in defaults.encoder.to_text().lines() {
            let (key, value) = line.split_once(' ').expect("encoder text is key value");
            encoder_keys.insert(key.to_string(), value.to_string());
        }

        let mut config = defaults;
        let mut seen: BTreeMap<String, ()> = BTreeMap::new();
        for (index, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            // Both `key value` and `key=value` spellings are accepted.
            let (key, value) = line
                .split_once(|c: char| c.is_whitespace() || c == '=')
                .ok_or_else(|| CliError::config(format!("line {}: expected `key value`", index + 1)))?;
            let value = value.trim();
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(CliError::config(format!("repeated key `{key}`")));
            }
            if encoder_keys.contains_key(key) {
                encoder_keys.insert(key.to_string(), value.to_string());
                continue;
            }
            let bad = |what: &str| CliError::config(format!("key `{key}`: invalid {what} `{value}`"));
            match key {
                "seed" => config.seed = value.parse().map_err(|_| bad("integer"))?,
                "difficulty" => {
                    config.difficulty =
                        Difficulty::parse(value).ok_or_else(|| bad("difficulty"))?
                }
                "rays" => config.rays = value.parse().map_err(|_| bad("integer"))?,
                "image_width" => config.image_width = value.parse().map_err(|_| bad("integer"))?,
                "image_height" => {
                    config.image_height = value.parse().map_err(|_| bad("integer"))?
                }
                "steps" => config.train.steps = value.parse().map_err(|_| bad("integer"))?,
                "learning_rate" => {
                    config.train.learning_rate = value.parse().map_err(|_| bad("number"))?
                }
                "momentum" => config.train.momentum = value.parse().map_err(|_| bad("number"))?,
                "warmup_steps" => {
                    config.train.warmup_steps = value.parse().map_err(|_| bad("integer"))?
                }
                "cosine" => {
                    config.train.cosine_decay = match value {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad("flag (0 or 1)")),
                    }
                }
                "ce_input" => {
                    config.train.routing.ce_input =
                        LossInput::parse(value).ok_or_else(|| bad("loss input"))?
                }
                "lovasz_input" => {
                    config.train.routing.lovasz_input =
                        LossInput::parse(value).ok_or_else(|| bad("loss input"))?
                }
                "representation" => {
                    config.train.representation =
                        Representation::parse(value).ok_or_else(|| bad("representation"))?
                }
                _ => return Err(CliError::config(format!("unknown key `{key}`"))),
            }
        }

        let merged: String = encoder_keys
            .iter()
            .map(|(k, v)| format!("{k} {v}\n"))
            .collect();
        config.encoder = EncoderConfig::from_text(&merged)
            .map_err(|e| CliError::config(format!("encoder settings: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    fn validate(&self) -> Result<(), CliError> {
        let t = &self.train;
        let checks: [(&str, bool); 7] = [
            ("rays must be positive", self.rays > 0),
            ("image_width must be positive", self.image_width > 0),
            ("image_height must be positive", self.image_height > 0),
            ("steps must be positive", t.steps > 0),
            (
                "learning_rate must be positive and finite",
                t.learning_rate > 0.0 && t.learning_rate.is_finite(),
            ),
            (
                "momentum must lie in [0, 1)",
                (0.0..1.0).contains(&t.momentum),
            ),
            ("warmup_steps must not exceed steps", t.warmup_steps <= t.steps),
        ];
        for (message, ok) in checks {
            if !ok {
                return Err(CliError::config(message.to_string()));
            }
        }
        Ok(())
    }
}

/// Settings from `--config`, overridden by direct flags.
pub fn resolve(
    config: Option<&Path>,
    seed: Option<u64>,
    difficulty: Option<&str>,
) -> Result<RunConfig, CliError> {
    let mut run = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        run.seed = seed;
    }
    if let Some(name) = difficulty {
        run.difficulty = Difficulty::parse(name)
            .ok_or_else(|| CliError::config(format!("unknown difficulty `{name}`")))?;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips_defaults_and_overrides() {
        let mut config = RunConfig::default();
        config.seed = 99;
        config.rays = 123;
        config.encoder.channels = 16;
        config.train.representation = Representation::TopOnly;
        config.train.routing.ce_input = LossInput::Point;
        let back = RunConfig::from_text(&config.to_text()).unwrap();
        assert_eq!(back.seed, 99);
        assert_eq!(back.rays, 123);
        assert_eq!(back.encoder.channels, 16);
        assert_eq!(back.train.representation, Representation::TopOnly);
        assert_eq!(back.train.routing.ce_input, LossInput::Point);
        assert_eq!(back.to_text(), config.to_text());
    }

    #[test]
    fn omitted_keys_keep_their_defaults() {
        let config = RunConfig::from_text("seed 3\nchannels 16\n").unwrap();
        let defaults = RunConfig::default();
        assert_eq!(config.seed, 3);
        assert_eq!(config.encoder.channels, 16);
        assert_eq!(config.rays, defaults.rays);
        assert_eq!(config.train.steps, defaults.train.steps);
        assert_eq!(config.encoder.grid, defaults.encoder.grid);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let config = RunConfig::from_text("# a comment\n\nseed 5\n").unwrap();
        assert_eq!(config.seed, 5);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        for text in [
            "mystery 1\n",
            "seed x\n",
            "seed 1\nseed 2\n",
            "difficulty hardcore\n",
            "cosine 2\n",
            "momentum 1.5\n",
            "steps 0\n",
            "channels 0\n",
            "steps 10\nwarmup_steps 20\n",
        ] {
            assert!(RunConfig::from_text(text).is_err(), "accepted: {text:?}");
        }
    }

    #[test]
    fn flag_overrides_beat_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.txt");
        std::fs::write(&path, "seed 10\ndifficulty stacked\n").unwrap();
        let run = resolve(Some(&path), Some(77), Some("empty")).unwrap();
        assert_eq!(run.seed, 77);
        assert_eq!(run.difficulty, Difficulty::Empty);
        let run = resolve(Some(&path), None, None).unwrap();
        assert_eq!(run.seed, 10);
        assert_eq!(run.difficulty, Difficulty::Stacked);
    }
}
