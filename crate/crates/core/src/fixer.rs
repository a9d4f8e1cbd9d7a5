//! Wavelet-domain foreground fixer.
//!
//! The high band of the input foreground is modulated per pixel,
//! `HQ' = HQ_in·α + β`, and recombined with the low band of the relit output.
//! A small conv net predicts `(α, β)` from both bands.

use std::f64::consts::PI;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};
use crate::params::{Adam, BoundParams, ParamId, ParamSet};
use crate::rng::{self, StreamRng};
use crate::spectral::haar_analyze;
use crate::tensor::Tensor;

/// Parameter ranges of [`ColorTransform::sample`].
pub const GAIN_RANGE: (f64, f64) = (0.5, 2.0);
pub const GAMMA_RANGE: (f64, f64) = (0.6, 1.6);
pub const OFFSET_RANGE: (f64, f64) = (-0.2, 0.2);
pub const HUE_RANGE: (f64, f64) = (-PI / 6.0, PI / 6.0);

/// Random photometric change used to build self-supervised pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorTransform {
    pub gains: [f64; 3],
    pub gamma: f64,
    pub offset: f64,
    /// Rotation about the gray axis, radians.
    pub hue: f64,
}

impl ColorTransform {
    pub fn identity() -> Self {
        ColorTransform {
            gains: [1.0; 3],
            gamma: 1.0,
            offset: 0.0,
            hue: 0.0,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut u = |r: (f64, f64)| rng.random_range(r.0..=r.1);
        ColorTransform {
            gains: [u(GAIN_RANGE), u(GAIN_RANGE), u(GAIN_RANGE)],
            gamma: u(GAMMA_RANGE),
            offset: u(OFFSET_RANGE),
            hue: u(HUE_RANGE),
        }
    }

    pub fn in_range(&self) -> bool {
        let inside = |v: f64, r: (f64, f64)| (r.0..=r.1).contains(&v);
        self.gains.iter().all(|&g| inside(g, GAIN_RANGE))
            && inside(self.gamma, GAMMA_RANGE)
            && inside(self.offset, OFFSET_RANGE)
            && inside(self.hue, HUE_RANGE)
    }

    fn hue_matrix(&self) -> [[f64; 3]; 3] {
        let k = 1.0 / 3f64.sqrt();
        let (s, c) = self.hue.sin_cos();
        let t = 1.0 - c;
        // Rodrigues rotation about (1, 1, 1)/√3.
        let d = c + t * k * k;
        let a = t * k * k - s * k;
        let b = t * k * k + s * k;
        [[d, a, b], [b, d, a], [a, b, d]]
    }

    /// gains → gamma → offset → hue rotation → clamp to `[0, 1]`.
    pub fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        if img.channels() != 3 {
            return Err(Error::dim("color transforms need RGB images"));
        }
        let m = self.hue_matrix();
        let rotate = self.hue != 0.0;
        let mut out = img.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            let mut v = [0.0; 3];
            for c in 0..3 {
                v[c] = (px[c] * self.gains[c]).max(0.0).powf(self.gamma) + self.offset;
            }
            if rotate {
                let r = v;
                for c in 0..3 {
                    v[c] = m[c][0] * r[0] + m[c][1] * r[1] + m[c][2] * r[2];
                }
            }
            for c in 0..3 {
                px[c] = v[c].clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}

pub fn random_color_transform(img: &ImageBuffer, seed: u64) -> Result<(ImageBuffer, ColorTransform)> {
    let t = ColorTransform::sample(&mut rng::stream(seed, "color-transform", 0));
    Ok((t.apply(img)?, t))
}

/// Per-pixel texture scale and offset.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationField {
    pub alpha: ImageBuffer,
    pub beta: ImageBuffer,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

/// Modulator network: four 3×3 convs `6 → W → W(stride 2) → W → 6`, with a
/// skip from the first activation into the third layer.
#[derive(Clone, Debug)]
pub struct Fixer {
    params: ParamSet,
    width: usize,
    layers: [Layer; 4],
}

impl Fixer {
    /// The last layer starts at zero so that `α ≡ 1`, `β ≡ 0`.
    pub fn new(width: usize, rng: &mut impl Rng) -> Result<Self> {
        if width == 0 {
            return Err(Error::param("modulator width must be positive"));
        }
        let mut ps = ParamSet::new();
        let dims = [(6, width), (width, width), (width, width), (width, 6)];
        let layers = std::array::from_fn(|i| {
            let (ci, co) = dims[i];
            let w = if i == 3 {
                ps.add_zeros(format!("fix.l{}.w", i + 1), &[3, 3, ci, co])
            } else {
                ps.add_normal(format!("fix.l{}.w", i + 1), &[3, 3, ci, co], (2.0 / (9 * ci) as f64).sqrt(), rng)
            };
            let b = ps.add_zeros(format!("fix.l{}.b", i + 1), &[co]);
            Layer { w, b }
        });
        Ok(Fixer {
            params: ps,
            width,
            layers,
        })
    }

    pub fn from_params(width: usize, params: &ParamSet) -> Result<Self> {
        let mut f = Fixer::new(width, &mut rng::stream(0, "fixer-shape", 0))?;
        f.params.load_from(params)?;
        Ok(f)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn conv(&self, g: &mut Graph, bp: &BoundParams, i: usize, x: Var, stride: usize) -> Var {
        let y = g.conv2d(x, bp.var(self.layers[i].w), stride, 1);
        g.add_bias(y, bp.var(self.layers[i].b))
    }

    /// Raw 6-channel head output for `[hq | lq]`.
    fn head(&self, g: &mut Graph, bp: &BoundParams, x: Var) -> Var {
        let (h, w, _) = g.value(x).hwc().expect("fixer input rank");
        let a1 = self.conv(g, bp, 0, x, 1);
        let a1 = g.silu(a1);
        let a2 = self.conv(g, bp, 1, a1, 2);
        let a2 = g.silu(a2);
        let up = g.upsample(a2, h, w);
        let h3 = g.add(up, a1);
        let a3 = self.conv(g, bp, 2, h3, 1);
        let a3 = g.silu(a3);
        self.conv(g, bp, 3, a3, 1)
    }

    /// `(α, β, HQ', I')` on a graph.
    fn forward(&self, g: &mut Graph, bp: &BoundParams, hq: &ImageBuffer, lq: &ImageBuffer) -> (Var, Var, Var, Var) {
        let hq_v = g.constant(hq.tensor().clone());
        let lq_v = g.constant(lq.tensor().clone());
        let x = g.concat_last(&[hq_v, lq_v]);
        let raw = self.head(g, bp, x);
        let ra = g.slice_last(raw, 0, 3);
        let beta = g.slice_last(raw, 3, 6);
        // α = 1 + raw, so HQ·α = HQ + HQ·raw.
        let scaled = g.mul(hq_v, ra);
        let hq_mod = g.add(hq_v, scaled);
        let hq_out = g.add(hq_mod, beta);
        let out = g.add(hq_out, lq_v);
        (ra, beta, hq_out, out)
    }

    /// Predict the field and recompose `I' = HQ_in·α + β + LQ_out`.
    pub fn modulate(&self, hq_in: &ImageBuffer, lq_out: &ImageBuffer) -> Result<(ModulationField, ImageBuffer)> {
        hq_in.same_dims(lq_out)?;
        if hq_in.channels() != 3 {
            return Err(Error::dim("the fixer works on RGB images"));
        }
        let mut g = Graph::new();
        let bp = self.params.bind_frozen(&mut g);
        let (ra, beta, _, out) = self.forward(&mut g, &bp, hq_in, lq_out);
        let alpha = ImageBuffer::from_tensor(g.value(ra).map(|v| 1.0 + v))?;
        let beta = ImageBuffer::from_tensor(g.value(beta).clone())?;
        let out = ImageBuffer::from_tensor(g.value(out).clone())?;
        Ok((ModulationField { alpha, beta }, out))
    }
}

/// Frozen random conv features standing in for a pretrained perceptual net.
#[derive(Clone, Debug)]
pub struct PerceptualProxy {
    params: ParamSet,
}

pub const PERCEPTUAL_SEED: u64 = 0x5eed_f00d;

impl Default for PerceptualProxy {
    fn default() -> Self {
        let mut r = rng::stream(PERCEPTUAL_SEED, "perceptual", 0);
        let mut params = ParamSet::new();
        for (i, (ci, co)) in [(3, 8), (8, 8), (8, 8)].into_iter().enumerate() {
            params.add_normal(format!("perc.l{i}.w"), &[3, 3, ci, co], (2.0 / (9 * ci) as f64).sqrt(), &mut r);
        }
        PerceptualProxy { params }
    }
}

impl PerceptualProxy {
    fn features(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for id in self.params.ids() {
            let w = g.constant(self.params.get(id).clone());
            let y = g.conv2d(h, w, 1, 1);
            h = g.relu(y);
        }
        h
    }

    pub fn features_of(&self, img: &ImageBuffer) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(img.tensor().clone());
        let f = self.features(&mut g, x);
        g.value(f).clone()
    }
}

/// One self-supervised training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FixerPair {
    pub original: ImageBuffer,
    pub transformed: ImageBuffer,
}

impl FixerPair {
    pub fn new(original: ImageBuffer, transformed: ImageBuffer) -> Result<Self> {
        original.same_dims(&transformed)?;
        Ok(FixerPair { original, transformed })
    }

    /// Texture of the transformed image over the tone of the original.
    pub fn bands(&self) -> Result<(ImageBuffer, ImageBuffer)> {
        Ok((haar_analyze(&self.transformed)?.hq, haar_analyze(&self.original)?.lq))
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<FixerPair> {
        FixerPair::new(self.original.crop(y0, x0, h, w)?, self.transformed.crop(y0, x0, h, w)?)
    }

    /// The recomposition with `α = 1`, `β = 0`.
    pub fn naive(&self) -> Result<ImageBuffer> {
        let (hq, lq) = self.bands()?;
        hq.add(&lq)
    }
}

/// Seeded pairs `(img, random_color_transform(img))`.
pub fn make_pairs(images: &[ImageBuffer], seed: u64) -> Result<Vec<FixerPair>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let t = ColorTransform::sample(&mut rng::stream(seed, "fixer-pair", i as u64));
            FixerPair::new(img.clone(), t.apply(img)?)
        })
        .collect()
}

/// Loss terms of one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixerLoss {
    pub image: f64,
    pub high: f64,
    pub perceptual: f64,
    pub total: f64,
}

fn pair_graph(
    fixer: &Fixer,
    perc: &PerceptualProxy,
    perc_weight: f64,
    g: &mut Graph,
    bp: &BoundParams,
    pair: &FixerPair,
) -> Result<(Var, Var, Var, Var)> {
    let (hq_in, lq_out) = pair.bands()?;
    let hq_orig = haar_analyze(&pair.original)?.hq;
    let (_, _, hq_out, out) = fixer.forward(g, bp, &hq_in, &lq_out);
    let l_img = g.mse_const(out, pair.original.tensor());
    let l_hq = g.mse_const(hq_out, hq_orig.tensor());
    let f_out = perc.features(g, out);
    let orig = g.constant(pair.original.tensor().clone());
    let f_orig = perc.features(g, orig);
    let f_target = g.value(f_orig).clone();
    let l_perc = g.mse_const(f_out, &f_target);
    let s = g.add(l_img, l_hq);
    let p = g.scale(l_perc, perc_weight);
    let total = g.add(s, p);
    Ok((l_img, l_hq, l_perc, total))
}

/// Loss of one pair without gradients.
pub fn fixer_loss(fixer: &Fixer, perc: &PerceptualProxy, perc_weight: f64, pair: &FixerPair) -> Result<FixerLoss> {
    let mut g = Graph::new();
    let bp = fixer.params.bind_frozen(&mut g);
    let (a, b, c, t) = pair_graph(fixer, perc, perc_weight, &mut g, &bp, pair)?;
    Ok(FixerLoss {
        image: g.scalar(a),
        high: g.scalar(b),
        perceptual: g.scalar(c),
        total: g.scalar(t),
    })
}

/// Mean loss over a batch and the gradient of every modulator parameter.
pub fn fixer_loss_and_gradients(
    fixer: &Fixer,
    perc: &PerceptualProxy,
    perc_weight: f64,
    batch: &[FixerPair],
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::param("empty fixer batch"));
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut acc: Vec<Tensor> = fixer.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for pair in batch {
        let mut g = Graph::new();
        let bp = fixer.params.bind(&mut g);
        let (_, _, _, loss) = pair_graph(fixer, perc, perc_weight, &mut g, &bp, pair)?;
        total += g.scalar(loss);
        let mut grads = g.backward(loss);
        for (a, gr) in acc.iter_mut().zip(bp.gradients(&g, &mut grads)) {
            for (x, y) in a.data_mut().iter_mut().zip(gr.data()) {
                *x += y / n;
            }
        }
    }
    Ok((total / n, acc))
}

pub fn fixer_train_step(
    fixer: &mut Fixer,
    opt: &mut Adam,
    perc: &PerceptualProxy,
    perc_weight: f64,
    batch: &[FixerPair],
) -> Result<f64> {
    let (loss, grads) = fixer_loss_and_gradients(fixer, perc, perc_weight, batch)?;
    opt.update(&mut fixer.params, &grads);
    Ok(loss)
}

/// Seeded loop drawing random crops from a fixed pair set.
pub struct FixerTrainer {
    pub fixer: Fixer,
    opt: Adam,
    perc: PerceptualProxy,
    perc_weight: f64,
    batch: usize,
    crop: usize,
    rng: StreamRng,
}

impl FixerTrainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let fixer = Fixer::new(cfg.fixer_width, &mut rng::stream(cfg.seed, "fixer-init", 0))?;
        let opt = Adam::new(fixer.params(), cfg.fixer_lr);
        Ok(FixerTrainer {
            fixer,
            opt,
            perc: PerceptualProxy::default(),
            perc_weight: cfg.perc_weight,
            batch: cfg.fixer_batch,
            crop: cfg.fixer_crop,
            rng: rng::stream(cfg.seed, "fixer-train", 0),
        })
    }

    pub fn perceptual(&self) -> &PerceptualProxy {
        &self.perc
    }

    pub fn step(&mut self, pairs: &[FixerPair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::param("empty fixer training set"));
        }
        let mut batch = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let p = &pairs[self.rng.random_range(0..pairs.len())];
            let (h, w) = (p.original.height(), p.original.width());
            let (ch, cw) = (self.crop.min(h), self.crop.min(w));
            let y0 = self.rng.random_range(0..=h - ch);
            let x0 = self.rng.random_range(0..=w - cw);
            batch.push(p.crop(y0, x0, ch, cw)?);
        }
        fixer_train_step(&mut self.fixer, &mut self.opt, &self.perc, self.perc_weight, &batch)
    }

    pub fn fit(&mut self, pairs: &[FixerPair], steps: usize, mut log: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(steps);
        for i in 0..steps {
            let l = self.step(pairs)?;
            log(i + 1, l);
            losses.push(l);
        }
        Ok(losses)
    }
}

/// Replace the foreground of `relit` by the recomposition of the input
/// foreground's texture with the relit tone. Background pixels are copied.
pub fn apply_fixer(relit: &ImageBuffer, fg_input: &ImageBuffer, fg_mask: &Mask, fixer: &Fixer) -> Result<ImageBuffer> {
    relit.same_dims(fg_input)?;
    fg_mask.check_dims(relit.height(), relit.width())?;
    if fg_mask.count() == 0 {
        return Ok(relit.clone());
    }
    // Outside the mask the input is undefined (black); borrowing the relit pixels keeps a false edge out of the HQ band.
    let hq = haar_analyze(&relit.composite(fg_input, fg_mask)?)?.hq;
    let lq = haar_analyze(relit)?.lq;
    let (_, fixed) = fixer.modulate(&hq, &lq)?;
    relit.composite(&fixed.clamped(), fg_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, h: usize, w: usize) -> ImageBuffer {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(h, w, 3, |_, _, _| r.random_range(0.0..1.0))
    }

    #[test]
    fn identity_transform_and_clamp() {
        let img = rand_img(1, 5, 4);
        assert_eq!(ColorTransform::identity().apply(&img).unwrap(), img);
        let t = ColorTransform {
            offset: 0.2,
            ..ColorTransform::identity()
        };
        let out = t.apply(&ImageBuffer::filled(3, 3, 3, 0.9)).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hue_rotation_keeps_gray() {
        let t = ColorTransform {
            hue: 0.4,
            ..ColorTransform::identity()
        };
        let out = t.apply(&ImageBuffer::filled(2, 2, 3, 0.3)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn seeded_transforms_reproduce() {
        let img = rand_img(2, 6, 6);
        let (a, ta) = random_color_transform(&img, 9).unwrap();
        let (b, tb) = random_color_transform(&img, 9).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        assert!(ta.in_range());
    }

    #[test]
    fn zero_head_is_recomposition() {
        let f = Fixer::new(4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let hq = rand_img(4, 6, 7);
        let lq = rand_img(5, 6, 7);
        let (field, out) = f.modulate(&hq, &lq).unwrap();
        assert!(field.alpha.data().iter().all(|&a| a == 1.0));
        assert!(field.beta.data().iter().all(|&b| b == 0.0));
        assert_eq!(out, hq.add(&lq).unwrap());
        assert!(matches!(f.modulate(&hq, &rand_img(6, 6, 6)), Err(Error::Dimension(_))));
    }

    #[test]
    fn empty_mask_and_empty_batch() {
        let f = Fixer::new(4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let relit = rand_img(7, 8, 8);
        let out = apply_fixer(&relit, &rand_img(8, 8, 8), &Mask::filled(8, 8, false), &f).unwrap();
        assert_eq!(out, relit);
        let perc = PerceptualProxy::default();
        assert!(matches!(fixer_loss_and_gradients(&f, &perc, 0.1, &[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn input_outside_the_mask_is_ignored() {
        let f = Fixer::new(4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let relit = rand_img(7, 8, 8);
        let fg = rand_img(8, 8, 8);
        let mask = Mask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..5).contains(&x));
        let black = ImageBuffer::filled(8, 8, 3, 0.0).composite(&fg, &mask).unwrap();
        let a = apply_fixer(&relit, &fg, &mask, &f).unwrap();
        assert_eq!(a, apply_fixer(&relit, &black, &mask, &f).unwrap());
        // Zero head, relit equal to the input inside the mask: a pure copy.
        let relit_in = relit.composite(&fg, &mask).unwrap();
        assert!(apply_fixer(&relit_in, &black, &mask, &f).unwrap().tensor().max_abs_diff(relit_in.tensor()) < 1e-12);
    }
}
