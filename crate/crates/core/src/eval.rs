//! Evaluation reports and the ablation harness.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::fixer::{self, apply_fixer, Fixer, FixerTrainer};
use crate::metrics;
use crate::pipeline::{sample, ModelConfig, RelightInput, RelightModel, SampleSettings, TrainExample, Trainer};
use crate::rng;
use crate::synth::{self, RelightSample};

/// Printed in every report next to the scores.
pub const METRIC_NOTES: &str = "SSIM: 7x7 uniform window, C1=0.01^2, C2=0.03^2, valid windows, mean over channels. \
DCS: directional consistency score, a proxy metric not taken from the literature; mean over cardinal-direction samples. \
PSNR capped at 99 dB.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub direction: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Only scored for left/right/top/down lights.
    pub dcs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub split: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub notes: String,
    pub samples: Vec<SampleScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_dcs: f64,
    /// Not written to report files so that they stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!(
            "{:<20} psnr {:>7.3} dB  ssim {:.4}  dcs {:+.4}  (n={})",
            self.variant,
            self.mean_psnr,
            self.mean_ssim,
            self.mean_dcs,
            self.samples.len()
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-sample sampling seed.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    use rand::RngCore;
    rng::stream(seed, "eval-sample", index as u64).next_u64()
}

/// Image-based relighting of every sample, scored against its target.
pub fn evaluate(
    variant: &str,
    model: &RelightModel,
    fixer: Option<&Fixer>,
    samples: &[RelightSample],
    cfg: &Config,
    split: &str,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut scores = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let out = relight_sample(model, fixer, s, cfg, sample_seed(cfg.seed, i))?;
        let direction = direction_word(s);
        let dcs = if synth::is_cardinal(direction) {
            Some(metrics::directional_consistency(&out, &s.fg_mask, s.light.light_dir)?)
        } else {
            None
        };
        scores.push(SampleScore {
            id: s.id.clone(),
            direction: direction.to_string(),
            psnr: metrics::cap_psnr(metrics::psnr(&out, &s.target)?),
            ssim: metrics::ssim(&out, &s.target)?,
            dcs,
        });
    }
    Ok(EvalReport {
        variant: variant.to_string(),
        split: split.to_string(),
        seed: cfg.seed,
        config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        notes: METRIC_NOTES.to_string(),
        mean_psnr: mean(scores.iter().map(|s| s.psnr)),
        mean_ssim: mean(scores.iter().map(|s| s.ssim)),
        mean_dcs: mean(scores.iter().filter_map(|s| s.dcs)),
        samples: scores,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn direction_word(s: &RelightSample) -> &'static str {
    s.prompt_tokens
        .first()
        .map(|t| t.word())
        .filter(|w| synth::DIRECTIONS.iter().any(|d| d.0 == *w))
        .unwrap_or("unknown")
}

/// Relight one sample from its foreground, mask and background.
pub fn relight_sample(
    model: &RelightModel,
    fixer: Option<&Fixer>,
    s: &RelightSample,
    cfg: &Config,
    seed: u64,
) -> Result<crate::image::ImageBuffer> {
    let inp = RelightInput::image_based(s.fg.clone(), s.fg_mask.clone(), s.bg.clone())?;
    let settings = SampleSettings {
        seed,
        ..SampleSettings::from_config(cfg)
    };
    let out = sample(model, &inp, &settings)?;
    match fixer.filter(|_| cfg.fixer) {
        Some(f) => apply_fixer(&out, &s.fg, &s.fg_mask, f),
        None => Ok(out),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoAdapter,
    NoSpectralFilter,
    UnmaskedAdapter,
    NoFixer,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoAdapter,
        Variant::NoSpectralFilter,
        Variant::UnmaskedAdapter,
        Variant::NoFixer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAdapter => "no_adapter",
            Variant::NoSpectralFilter => "no_spectral_filter",
            Variant::UnmaskedAdapter => "unmasked_adapter",
            Variant::NoFixer => "no_fixer",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::param(format!("unknown variant {s:?}")))
    }

    /// The base config with this variant's single switch flipped.
    pub fn apply(self, base: &Config) -> Config {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoAdapter => c.adapter = false,
            Variant::NoSpectralFilter => c.spectral_filter = false,
            Variant::UnmaskedAdapter => c.decay_masks = false,
            Variant::NoFixer => c.fixer = false,
        }
        c
    }

    /// Whether the denoiser differs from the full one.
    pub fn retrains(self) -> bool {
        !matches!(self, Variant::Full | Variant::NoFixer)
    }
}

/// Train a denoiser on `train` with `cfg`'s seed and budget.
pub fn train_model(cfg: &Config, train: &[RelightSample], mut log: impl FnMut(usize, f64)) -> Result<RelightModel> {
    let examples: Vec<TrainExample> = train.iter().map(TrainExample::from_sample).collect::<Result<_>>()?;
    let model = RelightModel::new(ModelConfig::from_config(cfg), &mut rng::stream(cfg.seed, "model-init", 0))?;
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.fit(&examples, cfg.train_steps, &mut log)?;
    Ok(trainer.into_model())
}

/// Train the fixer on color-transform pairs of the training targets.
pub fn train_fixer(cfg: &Config, images: &[crate::image::ImageBuffer], mut log: impl FnMut(usize, f64)) -> Result<Fixer> {
    let pairs = fixer::make_pairs(images, cfg.seed)?;
    let mut t = FixerTrainer::new(cfg)?;
    t.fit(&pairs, cfg.fixer_steps, &mut log)?;
    Ok(t.fixer)
}

/// Train and evaluate `variants` under identical seeds and budgets.
pub fn run_ablation(
    dataset: &Path,
    base: &Config,
    variants: &[Variant],
    mut progress: impl FnMut(&str),
) -> Result<Vec<EvalReport>> {
    let train = synth::load_split(dataset, "train")?;
    let test = synth::load_split(dataset, "test")?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::State("dataset has an empty train or test split".into()));
    }
    let fixer = if variants.iter().any(|v| v.apply(base).fixer) {
        progress("training fixer");
        let images: Vec<_> = train.iter().map(|s| s.target.clone()).collect();
        Some(train_fixer(base, &images, |_, _| {})?)
    } else {
        None
    };
    let mut full: Option<RelightModel> = None;
    let mut reports = Vec::new();
    for &v in variants {
        let cfg = v.apply(base);
        let model = if v.retrains() {
            progress(&format!("training {}", v.name()));
            train_model(&cfg, &train, |_, _| {})?
        } else {
            if full.is_none() {
                progress("training full");
                full = Some(train_model(&Variant::Full.apply(base), &train, |_, _| {})?);
            }
            full.clone().unwrap()
        };
        progress(&format!("evaluating {}", v.name()));
        reports.push(evaluate(v.name(), &model, fixer.as_ref(), &test, &cfg, "test")?);
    }
    Ok(reports)
}

/// Side-by-side text table of a report set.
pub fn summary_text(reports: &[EvalReport]) -> String {
    let mut s = String::from("variant              mean PSNR      SSIM    DCS\n");
    for r in reports {
        s.push_str(&r.summary_line());
        s.push('\n');
    }
    s.push_str(METRIC_NOTES);
    s.push('\n');
    s
}

pub fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in reports {
        let p = dir.join(format!("report_{}.json", r.variant));
        std::fs::write(&p, r.to_json()).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join("summary.txt");
    std::fs::write(&p, summary_text(reports)).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_flip_one_flag() {
        let base = Config::default();
        for v in Variant::ALL {
            let d = v.apply(&base).diff(&base);
            match v {
                Variant::Full => assert!(d.is_empty()),
                _ => assert_eq!(d.len(), 1, "{}", v.name()),
            }
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert_eq!(Variant::NoSpectralFilter.apply(&base).diff(&base), vec!["spectral_filter"]);
    }

    #[test]
    fn missing_dataset_is_state_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_ablation(dir.path(), &Config::default(), &[Variant::Full], |_| {});
        assert!(matches!(r, Err(Error::State(_))));
    }
}
