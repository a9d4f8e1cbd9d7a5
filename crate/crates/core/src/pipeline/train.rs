use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::Graph;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};
use crate::params::Adam;
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

use super::codec::{encode_latent, LatentGrid, LATENT_CHANNELS};
use super::model::{Conditioning, RelightModel};
use super::schedule::NoiseSchedule;
use super::Token;

/// One training triplet with its latents precomputed.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub target: LatentGrid,
    pub fg_slab: LatentGrid,
    pub bg_slab: LatentGrid,
    pub bg: ImageBuffer,
    pub fg_mask: Mask,
    pub prompt: Vec<Token>,
}

impl TrainExample {
    pub fn new(fg: &ImageBuffer, fg_mask: &Mask, bg: &ImageBuffer, target: &ImageBuffer, prompt: Vec<Token>) -> Result<Self> {
        fg.same_dims(bg)?;
        fg.same_dims(target)?;
        fg_mask.check_dims(fg.height(), fg.width())?;
        if prompt.is_empty() {
            return Err(Error::param("training prompt is empty"));
        }
        Ok(TrainExample {
            target: encode_latent(target)?,
            fg_slab: encode_latent(&fg.masked(fg_mask)?)?,
            bg_slab: encode_latent(bg)?,
            bg: bg.clone(),
            fg_mask: fg_mask.clone(),
            prompt,
        })
    }

    pub fn from_sample(s: &crate::synth::RelightSample) -> Result<Self> {
        Self::new(&s.fg, &s.fg_mask, &s.bg, &s.target, s.prompt_tokens.clone())
    }

    /// Noisy target concatenated with the condition slabs the draw allows.
    pub fn noisy_input(&self, schedule: &NoiseSchedule, draw: &DiffusionDraw) -> Result<LatentGrid> {
        if draw.eps.shape() != self.target.tensor().shape() {
            return Err(Error::dim("noise draw does not match the target latent"));
        }
        let ab = schedule.alpha_bar(draw.t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let zt: Vec<f64> = self
            .target
            .data()
            .iter()
            .zip(draw.eps.data())
            .map(|(&z, &e)| a * z + b * e)
            .collect();
        let zt = LatentGrid::from_tensor(Tensor::new(self.target.tensor().shape(), zt)?)?;
        let bg = if draw.uses_background() {
            self.bg_slab.clone()
        } else {
            LatentGrid::zeros(self.bg_slab.h(), self.bg_slab.w(), self.bg_slab.d())
        };
        LatentGrid::concat(&[&zt, &self.fg_slab, &bg])
    }

    pub fn conditioning(&self, draw: &DiffusionDraw) -> Conditioning {
        if draw.dropped {
            return Conditioning::null(self.fg_mask.clone());
        }
        if draw.text {
            Conditioning {
                tokens: self.prompt.clone(),
                light: None,
                fg_mask: self.fg_mask.clone(),
            }
        } else {
            Conditioning {
                tokens: vec![Token::BLEND],
                light: Some(self.bg.clone()),
                fg_mask: self.fg_mask.clone(),
            }
        }
    }
}

/// Random choices behind one training prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionDraw {
    pub t: usize,
    pub eps: Tensor,
    /// Condition on the prompt instead of the background.
    pub text: bool,
    /// Conditions replaced by the null prompt and a black background.
    pub dropped: bool,
}

impl DiffusionDraw {
    pub fn sample(rng: &mut impl Rng, timesteps: usize, shape: &[usize], cond_dropout: f64, text_fraction: f64) -> Self {
        let t = rng.random_range(0..timesteps);
        let eps = Tensor::from_fn(shape, |_| rng.sample(StandardNormal));
        let text = rng.random::<f64>() < text_fraction;
        let dropped = rng.random::<f64>() < cond_dropout;
        DiffusionDraw { t, eps, text, dropped }
    }

    fn uses_background(&self) -> bool {
        !self.text && !self.dropped
    }
}

/// Mean ε-prediction MSE of an arbitrary predictor over a batch.
pub fn diffusion_loss(
    schedule: &NoiseSchedule,
    batch: &[TrainExample],
    draws: &[DiffusionDraw],
    mut predict: impl FnMut(&LatentGrid, usize, &Conditioning) -> Result<LatentGrid>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("empty training batch"));
    }
    if draws.len() != batch.len() {
        return Err(Error::param("one draw per example required"));
    }
    let mut total = 0.0;
    for (ex, dr) in batch.iter().zip(draws) {
        let z = ex.noisy_input(schedule, dr)?;
        let pred = predict(&z, dr.t, &ex.conditioning(dr))?;
        if pred.tensor().shape() != dr.eps.shape() {
            return Err(Error::dim("prediction does not match the noise shape"));
        }
        let se: f64 = pred.data().iter().zip(dr.eps.data()).map(|(p, e)| (p - e).powi(2)).sum();
        total += se / dr.eps.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Loss of one example and the gradient of every model parameter.
pub fn loss_and_gradients(
    model: &RelightModel,
    schedule: &NoiseSchedule,
    ex: &TrainExample,
    draw: &DiffusionDraw,
) -> Result<(f64, Vec<Tensor>)> {
    let z = ex.noisy_input(schedule, draw)?;
    let cond = ex.conditioning(draw);
    let mut g = Graph::new();
    let bp = model.params().bind(&mut g);
    let zin = g.constant(z.into_tensor());
    let pred = model.forward(&mut g, &bp, zin, draw.t, &cond);
    let loss = g.mse_const(pred, &draw.eps);
    let mut grads = g.backward(loss);
    Ok((g.scalar(loss), bp.gradients(&g, &mut grads)))
}

/// One optimizer step on a batch with explicit draws; returns the batch loss.
pub fn train_step(
    model: &mut RelightModel,
    opt: &mut Adam,
    schedule: &NoiseSchedule,
    batch: &[TrainExample],
    draws: &[DiffusionDraw],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("empty training batch"));
    }
    if draws.len() != batch.len() {
        return Err(Error::param("one draw per example required"));
    }
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for (ex, dr) in batch.iter().zip(draws) {
        let (l, grads) = loss_and_gradients(model, schedule, ex, dr)?;
        total += l;
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => {
                for (s, g) in a.iter_mut().zip(&grads) {
                    for (x, y) in s.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = acc.expect("nonempty batch");
    for g in &mut grads {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    opt.update(model.params_mut(), &grads);
    Ok(total / n)
}

/// Seeded training loop over a fixed example set.
pub struct Trainer {
    pub model: RelightModel,
    opt: Adam,
    schedule: NoiseSchedule,
    batch: usize,
    cond_dropout: f64,
    text_fraction: f64,
    rng: StreamRng,
    step: usize,
}

impl Trainer {
    pub fn new(model: RelightModel, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(model.params(), cfg.lr);
        Ok(Trainer {
            model,
            opt,
            schedule: NoiseSchedule::cosine(cfg.t)?,
            batch: cfg.batch,
            cond_dropout: cfg.cond_dropout,
            text_fraction: cfg.text_fraction,
            rng: rng::stream(cfg.seed, "diffusion-train", 0),
            step: 0,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draw a batch from `data` and take one step.
    pub fn step(&mut self, data: &[TrainExample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::param("empty training set"));
        }
        let mut batch = Vec::with_capacity(self.batch);
        let mut draws = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let ex = data[self.rng.random_range(0..data.len())].clone();
            let shape = [ex.target.h(), ex.target.w(), LATENT_CHANNELS];
            draws.push(DiffusionDraw::sample(
                &mut self.rng,
                self.schedule.len(),
                &shape,
                self.cond_dropout,
                self.text_fraction,
            ));
            batch.push(ex);
        }
        let loss = train_step(&mut self.model, &mut self.opt, &self.schedule, &batch, &draws)?;
        self.step += 1;
        Ok(loss)
    }

    /// Run `steps` steps, calling `log(step, loss)` after each.
    pub fn fit(&mut self, data: &[TrainExample], steps: usize, mut log: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let l = self.step(data)?;
            log(self.step, l);
            losses.push(l);
        }
        Ok(losses)
    }

    pub fn into_model(self) -> RelightModel {
        self.model
    }
}
