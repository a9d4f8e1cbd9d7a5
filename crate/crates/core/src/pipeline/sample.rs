use rand_distr::{Distribution, StandardNormal};

use crate::config::{Composite, Config};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng;
use crate::tensor::Tensor;

use super::codec::{decode_latent, encode_latent, LatentGrid, LATENT_CHANNELS, PATCH};
use super::model::{Conditioning, RelightModel};
use super::schedule::NoiseSchedule;
use super::{assemble_input, Mode, RelightInput};

/// Anything that predicts the noise of an assembled latent.
pub trait NoisePredictor {
    fn predict_noise(&self, z_in: &LatentGrid, t: usize, cond: &Conditioning) -> Result<LatentGrid>;
}

impl NoisePredictor for RelightModel {
    fn predict_noise(&self, z_in: &LatentGrid, t: usize, cond: &Conditioning) -> Result<LatentGrid> {
        self.predict(z_in, t, cond)
    }
}

impl<F> NoisePredictor for F
where
    F: Fn(&LatentGrid, usize, &Conditioning) -> Result<LatentGrid>,
{
    fn predict_noise(&self, z_in: &LatentGrid, t: usize, cond: &Conditioning) -> Result<LatentGrid> {
        self(z_in, t, cond)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSettings {
    /// Length of the training schedule.
    pub timesteps: usize,
    pub steps: usize,
    /// `None` skips the unconditional branch entirely.
    pub guidance: Option<f64>,
    pub seed: u64,
    pub composite: Composite,
}

impl SampleSettings {
    pub fn from_config(cfg: &Config) -> Self {
        SampleSettings {
            timesteps: cfg.t,
            steps: cfg.steps,
            guidance: Some(cfg.guidance),
            seed: cfg.seed,
            composite: cfg.composite,
        }
    }
}

fn add_scaled(a: &LatentGrid, b: &LatentGrid, s: f64) -> Result<LatentGrid> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + s * (y - x)).collect();
    LatentGrid::from_tensor(Tensor::new(a.tensor().shape(), data)?)
}

/// Deterministic DDIM sampling with any predictor.
pub fn sample_with<P: NoisePredictor + ?Sized>(
    predictor: &P,
    inp: &RelightInput,
    settings: &SampleSettings,
) -> Result<ImageBuffer> {
    inp.validate()?;
    let (h, w) = (inp.fg.height(), inp.fg.width());
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::dim(format!("image {h}x{w} is not divisible by {PATCH}")));
    }
    let schedule = NoiseSchedule::cosine(settings.timesteps)?;
    let ts = schedule.sampling_steps(settings.steps)?;
    let (lh, lw) = (h / PATCH, w / PATCH);
    let shape = [lh, lw, LATENT_CHANNELS];

    let mut noise_rng = rng::stream(settings.seed, "sample-noise", 0);
    let mut x = LatentGrid::from_tensor(Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut noise_rng)))?;

    let cond = Conditioning::from_input(inp);
    let uncond = Conditioning::null(inp.fg_mask.clone());
    let black = RelightInput {
        bg: ImageBuffer::black(h, w),
        ..inp.clone()
    };

    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let ab_prev = ts.get(i + 1).map_or(1.0, |&tp| schedule.alpha_bar(tp));
        let z_c = assemble_input(inp, &x)?;
        let e_c = predictor.predict_noise(&z_c, t, &cond)?;
        let eps = match settings.guidance {
            None => e_c,
            Some(g) => {
                let z_u = if inp.mode.uses_background() { assemble_input(&black, &x)? } else { z_c };
                let e_u = predictor.predict_noise(&z_u, t, &uncond)?;
                add_scaled(&e_u, &e_c, g)?
            }
        };
        if eps.tensor().shape() != shape {
            return Err(Error::dim("predictor returned a mis-shaped noise estimate"));
        }
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0: Vec<f64> = x.data().iter().zip(eps.data()).map(|(xt, e)| (xt - sb * e) / sa).collect();
        let x0 = LatentGrid::from_tensor(Tensor::new(&shape, x0)?)?;
        // Keep the clean estimate inside the image range.
        let x0 = encode_latent(&decode_latent(&x0)?.clamped())?;
        let eps: Vec<f64> = x.data().iter().zip(x0.data()).map(|(xt, z)| (xt - sa * z) / sb).collect();
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let next: Vec<f64> = x0.data().iter().zip(&eps).map(|(z, e)| pa * z + pb * e).collect();
        x = LatentGrid::from_tensor(Tensor::new(&shape, next)?)?;
    }

    let out = decode_latent(&x)?.clamped();
    match (settings.composite, inp.mode) {
        (Composite::Hard, Mode::ImageBased | Mode::Both) => inp.bg.composite(&out, &inp.fg_mask),
        _ => Ok(out),
    }
}

/// Relight with a trained model.
pub fn sample(model: &RelightModel, inp: &RelightInput, settings: &SampleSettings) -> Result<ImageBuffer> {
    let r = model.config().resolution;
    if inp.fg.height() != r || inp.fg.width() != r {
        return Err(Error::dim(format!(
            "input is {}x{}, model expects {r}x{r}",
            inp.fg.height(),
            inp.fg.width()
        )));
    }
    if settings.timesteps != model.config().timesteps {
        return Err(Error::param(format!(
            "sampling with {} steps, model was trained on {}",
            settings.timesteps,
            model.config().timesteps
        )));
    }
    sample_with(model, inp, settings)
}
