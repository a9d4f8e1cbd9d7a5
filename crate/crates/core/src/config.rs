//! Plain-text `key = value` run configuration.
//!
//! Blank lines and everything after `#` are ignored. Unknown keys are an
//! error so that typos surface instead of silently falling back to defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{MaskMode, Masking};
use crate::error::{Error, Result};

/// How relit pixels outside the foreground are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Composite {
    /// Background pixels are copied from the input background.
    Hard,
    /// The decoded output is returned as is.
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    /// Square image side in pixels; a multiple of 4.
    pub resolution: usize,
    /// Base channel width of the denoiser and of all condition embeddings.
    pub d: usize,
    /// Light queries per direction.
    pub n_q: usize,
    pub heads: usize,
    /// Gaussian cutoff in frequency bins.
    pub sigma: f64,
    /// Diffusion timesteps.
    pub t: usize,
    /// Sampling steps.
    pub steps: usize,
    pub guidance: f64,
    pub lr: f64,
    pub seed: u64,
    pub mask_mode: MaskMode,
    pub batch: usize,
    pub train_steps: usize,
    pub cond_dropout: f64,
    /// Fraction of training draws conditioned on the prompt instead of the
    /// background image.
    pub text_fraction: f64,
    pub adapter: bool,
    pub spectral_filter: bool,
    pub decay_masks: bool,
    pub fixer: bool,
    pub composite: Composite,
    pub fixer_steps: usize,
    pub fixer_lr: f64,
    pub fixer_batch: usize,
    pub fixer_crop: usize,
    pub fixer_width: usize,
    pub perc_weight: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            resolution: 64,
            d: 16,
            n_q: 4,
            heads: 1,
            sigma: 5.0,
            t: 200,
            steps: 20,
            guidance: 1.5,
            lr: 2e-3,
            seed: 0,
            mask_mode: MaskMode::PostSoftmax,
            batch: 4,
            train_steps: 4000,
            cond_dropout: 0.1,
            text_fraction: 0.2,
            adapter: true,
            spectral_filter: true,
            decay_masks: true,
            fixer: true,
            composite: Composite::Hard,
            fixer_steps: 2000,
            fixer_lr: 2e-3,
            fixer_batch: 4,
            fixer_crop: 32,
            fixer_width: 32,
            perc_weight: 0.1,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::format(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl Config {
    /// Parse a config file body; keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "resolution" => self.resolution = parse_value(key, value)?,
            "d" => self.d = parse_value(key, value)?,
            "n_q" => self.n_q = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "sigma" => self.sigma = parse_value(key, value)?,
            "T" => self.t = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "guidance" => self.guidance = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "mask_mode" => {
                self.mask_mode = match value {
                    "post_softmax" => MaskMode::PostSoftmax,
                    "pre_softmax" => MaskMode::PreSoftmax,
                    _ => return Err(Error::format(format!("invalid mask_mode {value:?}"))),
                }
            }
            "batch" => self.batch = parse_value(key, value)?,
            "train_steps" => self.train_steps = parse_value(key, value)?,
            "cond_dropout" => self.cond_dropout = parse_value(key, value)?,
            "text_fraction" => self.text_fraction = parse_value(key, value)?,
            "adapter" => self.adapter = parse_bool(key, value)?,
            "spectral_filter" => self.spectral_filter = parse_bool(key, value)?,
            "decay_masks" => self.decay_masks = parse_bool(key, value)?,
            "fixer" => self.fixer = parse_bool(key, value)?,
            "composite" => {
                self.composite = match value {
                    "hard" => Composite::Hard,
                    "none" => Composite::None,
                    _ => return Err(Error::format(format!("invalid composite {value:?}"))),
                }
            }
            "fixer_steps" => self.fixer_steps = parse_value(key, value)?,
            "fixer_lr" => self.fixer_lr = parse_value(key, value)?,
            "fixer_batch" => self.fixer_batch = parse_value(key, value)?,
            "fixer_crop" => self.fixer_crop = parse_value(key, value)?,
            "fixer_width" => self.fixer_width = parse_value(key, value)?,
            "perc_weight" => self.perc_weight = parse_value(key, value)?,
            _ => return Err(Error::format(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::param(m.to_string()));
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return fail("resolution must be a positive multiple of 4");
        }
        if self.d == 0 || self.n_q == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail("d, n_q and heads must be positive with heads dividing d");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return fail("sigma must be positive");
        }
        if self.t < 2 || self.steps == 0 || self.steps > self.t {
            return fail("need T >= 2 and 1 <= steps <= T");
        }
        if !(self.lr > 0.0) || !(self.fixer_lr > 0.0) {
            return fail("learning rates must be positive");
        }
        if !self.guidance.is_finite() {
            return fail("guidance must be finite");
        }
        if self.batch == 0 || self.fixer_batch == 0 || self.fixer_width == 0 {
            return fail("batch sizes and widths must be positive");
        }
        if self.fixer_crop < 2 {
            return fail("fixer_crop must be at least 2");
        }
        for (name, p) in [("cond_dropout", self.cond_dropout), ("text_fraction", self.text_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.perc_weight >= 0.0) {
            return fail("perc_weight must be non-negative");
        }
        Ok(())
    }

    pub fn masking(&self) -> Masking {
        Masking {
            enabled: self.decay_masks,
            mode: self.mask_mode,
        }
    }

    /// Every key with its current value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = |v: bool| if v { "true" } else { "false" }.to_string();
        vec![
            ("resolution", self.resolution.to_string()),
            ("d", self.d.to_string()),
            ("n_q", self.n_q.to_string()),
            ("heads", self.heads.to_string()),
            ("sigma", self.sigma.to_string()),
            ("T", self.t.to_string()),
            ("steps", self.steps.to_string()),
            ("guidance", self.guidance.to_string()),
            ("lr", self.lr.to_string()),
            ("seed", self.seed.to_string()),
            ("mask_mode", self.mask_mode.name().to_string()),
            ("batch", self.batch.to_string()),
            ("train_steps", self.train_steps.to_string()),
            ("cond_dropout", self.cond_dropout.to_string()),
            ("text_fraction", self.text_fraction.to_string()),
            ("adapter", b(self.adapter)),
            ("spectral_filter", b(self.spectral_filter)),
            ("decay_masks", b(self.decay_masks)),
            ("fixer", b(self.fixer)),
            (
                "composite",
                match self.composite {
                    Composite::Hard => "hard",
                    Composite::None => "none",
                }
                .to_string(),
            ),
            ("fixer_steps", self.fixer_steps.to_string()),
            ("fixer_lr", self.fixer_lr.to_string()),
            ("fixer_batch", self.fixer_batch.to_string()),
            ("fixer_crop", self.fixer_crop.to_string()),
            ("fixer_width", self.fixer_width.to_string()),
            ("perc_weight", self.perc_weight.to_string()),
        ]
    }

    /// Serialize in the same format [`Config::parse`] reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Keys whose values differ between two configs.
    pub fn diff(&self, other: &Config) -> Vec<&'static str> {
        self.entries()
            .into_iter()
            .zip(other.entries())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = Config::parse("# run\nresolution = 32\n\nsigma=2.5 # bins\nmask_mode = pre_softmax\nadapter = off\n").unwrap();
        assert_eq!(cfg.resolution, 32);
        assert_eq!(cfg.sigma, 2.5);
        assert_eq!(cfg.mask_mode, MaskMode::PreSoftmax);
        assert!(!cfg.adapter);
        assert_eq!(cfg.d, Config::default().d);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Config::parse("bogus = 1"), Err(Error::Format(_))));
        assert!(matches!(Config::parse("resolution"), Err(Error::Format(_))));
        assert!(matches!(Config::parse("d = -3"), Err(Error::Format(_))));
        assert!(matches!(Config::parse("resolution = 30"), Err(Error::Parameter(_))));
        assert!(matches!(Config::parse("sigma = 0"), Err(Error::Parameter(_))));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.seed = 99;
        cfg.guidance = 3.25;
        cfg.composite = Composite::None;
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.diff(&Config::default()), vec!["guidance", "seed", "composite"]);
    }
}
