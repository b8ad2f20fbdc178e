//! Run configuration: one TOML file holding the generator training settings at
//! top level plus optional `[synth]`, `[prior]`, `[angles]` and `[eval]` tables.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use divmotion::prior::PriorConfig;
use divmotion::skeleton::SkeletonKind;
use divmotion::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Frames per sequence.
    pub length: usize,
    pub skeleton: SkeletonKind,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            train: 200,
            val: 20,
            test: 20,
            length: 250,
            skeleton: SkeletonKind::H36m17,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Every `frame_stride`-th frame of each sequence becomes a training pose.
    pub frame_stride: usize,
    pub seed: u64,
}

impl Default for PriorSection {
    fn default() -> Self {
        let p = PriorConfig::default();
        Self {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            frame_stride: 5,
            seed: 0,
        }
    }
}

impl PriorSection {
    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnglesSection {
    /// Radians added on both sides of every mined range.
    pub margin: f64,
}

impl Default for AnglesSection {
    fn default() -> Self {
        Self { margin: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Futures drawn per test window.
    pub samples: usize,
    /// Stride between test windows; 0 means the future length `t`.
    pub window_stride: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples: 50,
            window_stride: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthSection,
    pub prior: PriorSection,
    pub angles: AnglesSection,
    pub eval: EvalSection,
    pub train: TrainConfig,
}

const SECTIONS: [&str; 4] = ["synth", "prior", "angles", "eval"];

fn section<T: for<'de> Deserialize<'de> + Default>(
    table: &mut toml::Table,
    name: &str,
) -> Result<T> {
    match table.remove(name) {
        Some(v) => v
            .try_into()
            .with_context(|| format!("invalid [{name}] table")),
        None => Ok(T::default()),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let synth = section(&mut table, "synth")?;
        let prior = section(&mut table, "prior")?;
        let angles = section(&mut table, "angles")?;
        let eval = section(&mut table, "eval")?;
        let train = TrainConfig::from_toml(&toml::to_string(&table)?)?;
        Ok(Self {
            synth,
            prior,
            angles,
            eval,
            train,
        })
    }

    /// The config file at `path`, or every default when there is none.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
            None => Self::parse(""),
        }
    }

    /// Replaces every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.prior.seed = seed;
        self.eval.seed = seed;
        self.train.seed = seed;
    }

    /// Fully resolved config; parsing it yields `self` again.
    pub fn to_toml(&self) -> Result<String> {
        let mut table: toml::Table = toml::from_str(&self.train.to_toml()?)?;
        for (name, value) in SECTIONS.iter().zip([
            toml::Value::try_from(&self.synth)?,
            toml::Value::try_from(&self.prior)?,
            toml::Value::try_from(&self.angles)?,
            toml::Value::try_from(&self.eval)?,
        ]) {
            table.insert(name.to_string(), value);
        }
        Ok(toml::to_string(&table)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.synth, SynthSection::default());
        assert_eq!(cfg.train, TrainConfig::preset("desk-synth").unwrap());
        assert_eq!(
            (cfg.synth.train, cfg.synth.val, cfg.synth.test),
            (200, 20, 20)
        );
    }

    #[test]
    fn sections_split_off_and_round_trip() {
        let text = "preset = \"desk-synth\"\nepochs = 3\nlambda_d = [0.0, 0.0]\n\
                    [synth]\ntrain = 4\n[eval]\nsamples = 7\n[model]\nhidden = 8\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.model.hidden, 8);
        assert_eq!(cfg.synth.train, 4);
        assert_eq!(cfg.synth.val, 20);
        assert_eq!(cfg.eval.samples, 7);
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[synth]\ntrian = 4\n").is_err());
        assert!(RunConfig::parse("epoch = 4\n").is_err());
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let mut cfg = RunConfig::parse("").unwrap();
        cfg.override_seed(9);
        assert_eq!(
            (
                cfg.synth.seed,
                cfg.prior.seed,
                cfg.eval.seed,
                cfg.train.seed
            ),
            (9, 9, 9, 9)
        );
    }
}
