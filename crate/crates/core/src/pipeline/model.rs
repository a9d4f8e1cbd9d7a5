use rand::Rng;

use crate::attention::{self, Masking, ProjVars};
use crate::autograd::{Graph, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::spectral::{self, SpectralFilter};
use crate::tensor::Tensor;

use super::codec::{LatentGrid, LATENT_CHANNELS, PATCH};
use super::schedule::NoiseSchedule;

/// Assumed spread of clean latents around the linear estimate.
use super::{Mode, RelightInput, Token, VOCAB};

/// Architecture knobs of the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub resolution: usize,
    pub d: usize,
    pub n_q: usize,
    pub heads: usize,
    pub sigma: f64,
    pub adapter: bool,
    pub spectral_filter: bool,
    pub masking: Masking,
    /// Diffusion steps of the schedule the model is trained under.
    pub timesteps: usize,
}

impl ModelConfig {
    pub fn from_config(cfg: &Config) -> Self {
        ModelConfig {
            resolution: cfg.resolution,
            d: cfg.d,
            n_q: cfg.n_q,
            heads: cfg.heads,
            sigma: cfg.sigma,
            adapter: cfg.adapter,
            spectral_filter: cfg.spectral_filter,
            masking: cfg.masking(),
            timesteps: cfg.t,
        }
    }

    pub fn latent_side(&self) -> usize {
        self.resolution / PATCH
    }
}

/// Latent cells (row-major) that cover at least one foreground pixel.
fn latent_cells(mask: &Mask, h: usize, w: usize) -> Vec<bool> {
    let mut cells = vec![false; h * w];
    for y in 0..mask.height().min(h * PATCH) {
        for x in 0..mask.width().min(w * PATCH) {
            if mask.get(y, x) {
                cells[(y / PATCH) * w + x / PATCH] = true;
            }
        }
    }
    cells
}

/// What a single noise prediction is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub tokens: Vec<Token>,
    /// Background fed to the light adapter; absent for prompt-only or
    /// condition-free predictions.
    pub light: Option<ImageBuffer>,
    /// Foreground mask at image resolution; selects the injection cells.
    pub fg_mask: Mask,
}

impl Conditioning {
    pub fn from_input(inp: &RelightInput) -> Self {
        Conditioning {
            tokens: inp.prompt_tokens.clone(),
            light: inp.mode.uses_background().then(|| inp.bg.clone()),
            fg_mask: inp.fg_mask.clone(),
        }
    }

    /// Condition-free prediction: null prompt, no light queries.
    pub fn null(fg_mask: Mask) -> Self {
        Conditioning {
            tokens: vec![Token::NULL],
            light: None,
            fg_mask,
        }
    }

    pub fn for_mode(mode: Mode, prompt: &[Token], bg: &ImageBuffer, fg_mask: &Mask) -> Self {
        match mode {
            Mode::ImageBased => Conditioning {
                tokens: vec![Token::BLEND],
                light: Some(bg.clone()),
                fg_mask: fg_mask.clone(),
            },
            Mode::TextBased => Conditioning {
                tokens: prompt.to_vec(),
                light: None,
                fg_mask: fg_mask.clone(),
            },
            Mode::Both => Conditioning {
                tokens: prompt.to_vec(),
                light: Some(bg.clone()),
                fg_mask: fg_mask.clone(),
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

impl AttnIds {
    fn new(ps: &mut ParamSet, name: &str, cq: usize, ckv: usize, da: usize, zero_out: bool, rng: &mut impl Rng) -> Self {
        let q = ps.add_normal(format!("{name}.q"), &[cq, da], (1.0 / cq as f64).sqrt(), rng);
        let k = ps.add_normal(format!("{name}.k"), &[ckv, da], (1.0 / ckv as f64).sqrt(), rng);
        let v = ps.add_normal(format!("{name}.v"), &[ckv, da], (1.0 / ckv as f64).sqrt(), rng);
        let o = if zero_out {
            ps.add_zeros(format!("{name}.o"), &[da, cq])
        } else {
            ps.add_normal(format!("{name}.o"), &[da, cq], 0.5 * (1.0 / da as f64).sqrt(), rng)
        };
        AttnIds { q, k, v, o }
    }

    fn bind(&self, bp: &BoundParams, heads: usize) -> ProjVars {
        ProjVars {
            q: bp.var(self.q),
            k: bp.var(self.k),
            v: bp.var(self.v),
            o: bp.var(self.o),
            heads,
        }
    }

    fn out(&self) -> ParamId {
        self.o
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl Conv {
    fn new(ps: &mut ParamSet, name: &str, k: usize, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / (k * k * cin) as f64).sqrt();
        Conv {
            w: ps.add_normal(format!("{name}.w"), &[k, k, cin, cout], std, rng),
            b: ps.add_zeros(format!("{name}.b"), &[cout]),
            stride,
        }
    }

    fn apply(&self, g: &mut Graph, bp: &BoundParams, x: Var) -> Var {
        let k = g.shape(bp.var(self.w))[0];
        let y = g.conv2d(x, bp.var(self.w), self.stride, k / 2);
        g.add_bias(y, bp.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Dense {
            w: ps.add_normal(format!("{name}.w"), &[cin, cout], (1.0 / cin as f64).sqrt(), rng),
            b: ps.add_zeros(format!("{name}.b"), &[cout]),
        }
    }

    fn apply(&self, g: &mut Graph, bp: &BoundParams, x: Var) -> Var {
        g.linear(x, bp.var(self.w), Some(bp.var(self.b)))
    }
}

fn norm_groups(c: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

/// Residual conv block with time embedding, token cross attention and an
/// optional light-injection site.
#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    temb: Dense,
    conv2: Conv,
    skip: Option<ParamId>,
    tokens: AttnIds,
    inject: Option<AttnIds>,
}

impl Block {
    fn new(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, d: usize, inject: bool, rng: &mut impl Rng) -> Self {
        Block {
            conv1: Conv::new(ps, &format!("{name}.conv1"), 3, cin, cout, 1, rng),
            temb: Dense::new(ps, &format!("{name}.temb"), d, cout, rng),
            conv2: Conv::new(ps, &format!("{name}.conv2"), 3, cout, cout, 1, rng),
            skip: (cin != cout).then(|| ps.add_normal(format!("{name}.skip"), &[cin, cout], (1.0 / cin as f64).sqrt(), rng)),
            tokens: AttnIds::new(ps, &format!("{name}.xattn"), cout, d, d, false, rng),
            inject: inject.then(|| AttnIds::new(ps, &format!("{name}.inject"), cout, d, d, true, rng)),
        }
    }
}

#[derive(Clone, Debug)]
struct Adapter {
    enc: [Conv; 3],
    spec_w: ParamId,
    spec_b: ParamId,
    bank: ParamId,
    condense: AttnIds,
}

/// Graph-side conditions of one prediction.
pub(crate) struct ConditionSet {
    token_embeddings: Var,
    light_queries: Option<Var>,
}

/// Toy denoiser: two down blocks, a mid block and two up blocks with skip
/// connections; light injection happens in the mid and up blocks only.
#[derive(Clone, Debug)]
pub struct RelightModel {
    cfg: ModelConfig,
    params: ParamSet,
    filter: SpectralFilter,
    tok_emb: ParamId,
    time: Dense,
    inp: Dense,
    down1: Block,
    ds1: Conv,
    down2: Block,
    ds2: Conv,
    mid: Block,
    up2: Block,
    up1: Block,
    out: Dense,
    schedule: NoiseSchedule,
    /// Foreground clean-latent map from the condition slabs, and the mean
    /// latent of a background that has to be generated.
    x0_fg: ParamId,
    bg_mean: ParamId,
    logvar: [ParamId; 3],
    adapter: Option<Adapter>,
}

impl RelightModel {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.resolution == 0 || cfg.resolution % PATCH != 0 {
            return Err(Error::param("resolution must be a positive multiple of 4"));
        }
        if cfg.d == 0 || cfg.heads == 0 || cfg.d % cfg.heads != 0 || cfg.n_q == 0 {
            return Err(Error::param("d, heads and n_q must be positive with heads dividing d"));
        }
        let d = cfg.d;
        let side = cfg.latent_side();
        let filter = spectral::gaussian_lowpass_map(side, side, cfg.sigma)?;
        let schedule = NoiseSchedule::cosine(cfg.timesteps)?;
        let mut ps = ParamSet::new();
        let tok_emb = ps.add_normal("den.tokens", &[VOCAB.len(), d], 1.0, rng);
        let time = Dense::new(&mut ps, "den.time", d, d, rng);
        let inp = Dense::new(&mut ps, "den.in", 3 * LATENT_CHANNELS, d, rng);
        let down1 = Block::new(&mut ps, "den.down1", d, d, d, false, rng);
        let ds1 = Conv::new(&mut ps, "den.ds1", 3, d, 2 * d, 2, rng);
        let down2 = Block::new(&mut ps, "den.down2", 2 * d, 2 * d, d, false, rng);
        let ds2 = Conv::new(&mut ps, "den.ds2", 3, 2 * d, 2 * d, 2, rng);
        let mid = Block::new(&mut ps, "den.mid", 2 * d, 2 * d, d, cfg.adapter, rng);
        let up2 = Block::new(&mut ps, "den.up2", 4 * d, 2 * d, d, cfg.adapter, rng);
        let up1 = Block::new(&mut ps, "den.up1", 3 * d, d, d, cfg.adapter, rng);
        let out = Dense::new(&mut ps, "den.out", d, LATENT_CHANNELS, rng);
        // Zero head: the untrained clean estimate is x0_lin.
        ps.get_mut(out.w).data_mut().fill(0.0);
        let lc = LATENT_CHANNELS;
        let x0_fg = ps.add_zeros("den.x0_fg", &[2 * lc, lc]);
        for k in 0..lc {
            ps.get_mut(x0_fg).data_mut()[k * lc + k] = 1.0;
        }
        let bg_mean = ps.add_zeros("den.bg_mean", &[1, lc]);
        let logvar = [("fg", 0.1f64), ("bg", 0.01), ("free", 0.3)].map(|(name, std)| {
            ps.add(format!("den.logvar_{name}"), Tensor::full(&[1, lc], (std * std).ln()))
        });
        let adapter = cfg.adapter.then(|| Adapter {
            enc: [
                Conv::new(&mut ps, "den.bgenc1", 3, 3, d, 2, rng),
                Conv::new(&mut ps, "den.bgenc2", 3, d, d, 2, rng),
                Conv::new(&mut ps, "den.bgenc3", 3, d, d, 1, rng),
            ],
            spec_w: ps.add_normal("den.spectral.w", &[2 * d, 2 * d], 0.5 * (1.0 / (2 * d) as f64).sqrt(), rng),
            spec_b: ps.add_zeros("den.spectral.b", &[2 * d]),
            bank: ps.add_normal("den.bank", &[4 * cfg.n_q, d], 1.0, rng),
            condense: AttnIds::new(&mut ps, "den.condense", d, d, d, true, rng),
        });
        Ok(RelightModel {
            cfg,
            params: ps,
            filter,
            tok_emb,
            time,
            inp,
            down1,
            ds1,
            down2,
            ds2,
            mid,
            up2,
            up1,
            out,
            schedule,
            x0_fg,
            bg_mean,
            logvar,
            adapter,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Names of the output projections of every injection site.
    pub fn injection_outputs(&self) -> Vec<ParamId> {
        [&self.mid, &self.up2, &self.up1]
            .iter()
            .filter_map(|b| b.inject.map(|a| a.out()))
            .collect()
    }

    fn sinusoid(&self, t: usize) -> Tensor {
        let d = self.cfg.d;
        let half = d / 2;
        Tensor::from_fn(&[1, d], |i| {
            if i >= 2 * half {
                return 0.0;
            }
            let k = i % half.max(1);
            let freq = (-(10000f64).ln() * k as f64 / half.max(1) as f64).exp();
            let a = t as f64 * freq;
            if i < half {
                a.sin()
            } else {
                a.cos()
            }
        })
    }

    fn check_input(&self, z: &Tensor, cond: &Conditioning) -> Result<()> {
        let side = self.cfg.latent_side();
        if z.shape() != [side, side, 3 * LATENT_CHANNELS] {
            return Err(Error::dim(format!(
                "denoiser input {:?}, expected [{side}, {side}, {}]",
                z.shape(),
                3 * LATENT_CHANNELS
            )));
        }
        cond.fg_mask.check_dims(self.cfg.resolution, self.cfg.resolution)?;
        if let Some(bg) = &cond.light {
            if bg.dims() != (self.cfg.resolution, self.cfg.resolution, 3) {
                return Err(Error::dim("background does not match the model resolution"));
            }
        }
        if cond.tokens.is_empty() || cond.tokens.iter().any(|t| t.0 as usize >= VOCAB.len()) {
            return Err(Error::param("prompt tokens empty or outside the vocabulary"));
        }
        Ok(())
    }

    /// Token embeddings and, when a background is present and the adapter
    /// is enabled, the condensed light queries.
    pub(crate) fn condition_set(&self, g: &mut Graph, bp: &BoundParams, cond: &Conditioning) -> ConditionSet {
        let ids: Vec<usize> = cond.tokens.iter().map(|t| t.0 as usize).collect();
        let token_embeddings = g.index_rows(bp.var(self.tok_emb), &ids);
        let light_queries = match (&self.adapter, &cond.light) {
            (Some(ad), Some(bg)) => {
                let x = g.constant(bg.tensor().clone());
                let h = ad.enc[0].apply(g, bp, x);
                let h = g.silu(h);
                let h = ad.enc[1].apply(g, bp, h);
                let h = g.silu(h);
                let mut feat = ad.enc[2].apply(g, bp, h);
                if self.cfg.spectral_filter {
                    feat = spectral::enhance_graph(g, feat, &self.filter, bp.var(ad.spec_w), bp.var(ad.spec_b));
                }
                let (fh, fw, fd) = g.value(feat).hwc().expect("feature rank");
                let flat = g.reshape(feat, &[fh * fw, fd]);
                let proj = ad.condense.bind(bp, self.cfg.heads);
                let (bank, _) = attention::condense_graph(
                    g,
                    bp.var(ad.bank),
                    flat,
                    fh,
                    fw,
                    self.cfg.n_q,
                    &proj,
                    self.cfg.masking,
                );
                Some(bank)
            }
            _ => None,
        };
        ConditionSet {
            token_embeddings,
            light_queries,
        }
    }

    fn block(&self, g: &mut Graph, bp: &BoundParams, blk: &Block, x: Var, temb: Var, cs: &ConditionSet, mask: &Mask) -> Var {
        let h = g.group_norm(x, norm_groups(g.value(x).last_dim()));
        let h = g.silu(h);
        let h = blk.conv1.apply(g, bp, h);
        let te = blk.temb.apply(g, bp, temb);
        let h = g.add_bias(h, te);
        let h = g.group_norm(h, norm_groups(g.value(h).last_dim()));
        let h = g.silu(h);
        let h = blk.conv2.apply(g, bp, h);
        let skip = match blk.skip {
            Some(w) => g.linear(x, bp.var(w), None),
            None => x,
        };
        let mut x = g.add(h, skip);
        let (rows, cols, c) = g.value(x).hwc().expect("block rank");
        let flat = g.reshape(x, &[rows * cols, c]);
        let (a, _) = attention::attend(
            g,
            flat,
            cs.token_embeddings,
            &blk.tokens.bind(bp, self.cfg.heads),
            None,
            self.cfg.masking.mode,
        );
        let a = g.reshape(a, &[rows, cols, c]);
        x = g.add(x, a);
        if let (Some(site), Some(bank)) = (&blk.inject, cs.light_queries) {
            let site_mask = mask.downsample(rows, cols);
            let (y, _) = attention::inject_graph(
                g,
                x,
                bank,
                &site_mask,
                self.cfg.n_q,
                &site.bind(bp, self.cfg.heads),
                self.cfg.masking,
            );
            x = y;
        }
        x
    }

    /// Predicted noise `[h, w, 48]` for the assembled input `z_in: [h, w, 144]`.
    pub(crate) fn forward(&self, g: &mut Graph, bp: &BoundParams, z_in: Var, t: usize, cond: &Conditioning) -> Var {
        let cs = self.condition_set(g, bp, cond);
        let sin = g.constant(self.sinusoid(t));
        let temb = self.time.apply(g, bp, sin);
        let temb = g.silu(temb);
        let mask = &cond.fg_mask;

        let x = self.inp.apply(g, bp, z_in);
        let s1 = self.block(g, bp, &self.down1, x, temb, &cs, mask);
        let x = self.ds1.apply(g, bp, s1);
        let s2 = self.block(g, bp, &self.down2, x, temb, &cs, mask);
        let x = self.ds2.apply(g, bp, s2);
        let x = self.block(g, bp, &self.mid, x, temb, &cs, mask);

        let (h2, w2, _) = g.value(s2).hwc().expect("skip rank");
        let x = g.upsample(x, h2, w2);
        let x = g.concat_last(&[x, s2]);
        let x = self.block(g, bp, &self.up2, x, temb, &cs, mask);

        let (h1, w1, _) = g.value(s1).hwc().expect("skip rank");
        let x = g.upsample(x, h1, w1);
        let x = g.concat_last(&[x, s1]);
        let x = self.block(g, bp, &self.up1, x, temb, &cs, mask);

        let x = g.group_norm(x, norm_groups(g.value(x).last_dim()));
        let x = g.silu(x);
        let f = self.out.apply(g, bp, x);

        // Preconditioned noise estimate. The clean estimate is
        //   x0_est = x0_lin + f,
        // with x0_lin a linear guess from the condition slabs, and is combined
        // with the observation z_t / sqrt(ab) as two Gaussians, x0_est having
        // a learned per-channel variance v:
        //   x0 = x0_est + k (z_t / sqrt(ab) - x0_est),  k = ab v / (ab v + 1 - ab)
        // so eps = (1 - k) (z_t - sqrt(ab) x0_est) / sqrt(1 - ab). Latent cells
        // fall in three classes with their own x0_lin and v: foreground, known
        // background (x0_est is the background slab) and background to be
        // generated.
        let (h, w, _) = g.value(z_in).hwc().expect("latent rank");
        let ab = self.schedule.alpha_bar(t.min(self.schedule.len() - 1));
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let n = h * w;
        let lc = LATENT_CHANNELS;
        let zt = g.slice_last(z_in, 0, lc);
        let zt = g.reshape(zt, &[n, lc]);
        let slabs = g.slice_last(z_in, lc, 3 * lc);
        let slabs = g.reshape(slabs, &[n, 2 * lc]);

        let cells = latent_cells(&cond.fg_mask, h, w);
        let class = |i: usize| match (cells[i], cond.light.is_some()) {
            (true, _) => 0,
            (false, true) => 1,
            (false, false) => 2,
        };
        let mut x0_lin: Option<Var> = None;
        let mut lv: Option<Var> = None;
        for c in 0..3 {
            let rows: Vec<f64> = (0..n).map(|i| (class(i) == c) as u8 as f64).collect();
            if rows.iter().all(|&v| v == 0.0) {
                continue;
            }
            let col = g.constant(Tensor::new(&[n, 1], rows.clone()).expect("mask column"));
            let est = match c {
                0 => g.matmul(slabs, bp.var(self.x0_fg)),
                1 => g.slice_last(slabs, lc, 2 * lc),
                _ => g.matmul(col, bp.var(self.bg_mean)),
            };
            let est = g.mul_const(est, Tensor::from_fn(&[n, lc], |i| rows[i / lc]));
            let v = g.matmul(col, bp.var(self.logvar[c]));
            x0_lin = Some(x0_lin.map_or(est, |acc| g.add(acc, est)));
            lv = Some(lv.map_or(v, |acc| g.add(acc, v)));
        }
        let (x0_lin, lv) = (x0_lin.expect("latent has cells"), lv.expect("latent has cells"));
        // A known background is copied as is.
        let f = g.reshape(f, &[n, lc]);
        let f = g.mul_const(f, Tensor::from_fn(&[n, lc], |i| (class(i / lc) != 1) as u8 as f64));
        let x0_est = g.add(x0_lin, f);
        let x0_est = g.scale(x0_est, sa);
        let r = g.sub(zt, x0_est);
        let logit = g.constant(Tensor::full(&[n, lc], (ab / (1.0 - ab)).ln()));
        let k = g.add(lv, logit);
        let k = g.sigmoid(k);
        let kr = g.mul(k, r);
        let e = g.sub(r, kr);
        let e = g.scale(e, 1.0 / sb);
        g.reshape(e, &[h, w, lc])
    }

    /// Inference-time noise prediction with frozen parameters.
    pub fn predict(&self, z_in: &LatentGrid, t: usize, cond: &Conditioning) -> Result<LatentGrid> {
        self.check_input(z_in.tensor(), cond)?;
        if t >= self.cfg.timesteps {
            return Err(Error::param(format!("step {t} outside a {}-step schedule", self.cfg.timesteps)));
        }
        let mut g = Graph::new();
        let bp = self.params.bind_frozen(&mut g);
        let z = g.constant(z_in.tensor().clone());
        let out = self.forward(&mut g, &bp, z, t, cond);
        LatentGrid::from_tensor(g.value(out).clone())
    }

    /// Condensed light queries for a background, if the adapter is enabled.
    pub fn light_queries(&self, bg: &ImageBuffer) -> Result<Option<crate::attention::LightQueryBank>> {
        let cond = Conditioning {
            tokens: vec![Token::BLEND],
            light: Some(bg.clone()),
            fg_mask: Mask::filled(bg.height(), bg.width(), false),
        };
        let mut g = Graph::new();
        let bp = self.params.bind_frozen(&mut g);
        let cs = self.condition_set(&mut g, &bp, &cond);
        cs.light_queries
            .map(|b| crate::attention::LightQueryBank::new(self.cfg.n_q, g.value(b).clone()))
            .transpose()
    }

    /// Background features fed to condensation, after the optional
    /// spectral enhancement, together with the condensation weights.
    pub fn adapter_diagnostics(
        &self,
        bg: &ImageBuffer,
    ) -> Result<Option<(crate::image::FeatureGrid, Vec<crate::attention::AttentionWeights>)>> {
        let Some(ad) = &self.adapter else { return Ok(None) };
        let mut g = Graph::new();
        let bp = self.params.bind_frozen(&mut g);
        let x = g.constant(bg.tensor().clone());
        let h = ad.enc[0].apply(&mut g, &bp, x);
        let h = g.silu(h);
        let h = ad.enc[1].apply(&mut g, &bp, h);
        let h = g.silu(h);
        let mut feat = ad.enc[2].apply(&mut g, &bp, h);
        if self.cfg.spectral_filter {
            feat = spectral::enhance_graph(&mut g, feat, &self.filter, bp.var(ad.spec_w), bp.var(ad.spec_b));
        }
        let grid = crate::image::FeatureGrid::from_tensor(g.value(feat).clone())?;
        let bank = crate::attention::LightQueryBank::new(self.cfg.n_q, self.params.get(ad.bank).clone())?;
        let proj = crate::attention::AttentionProj {
            q: self.params.get(ad.condense.q).clone(),
            k: self.params.get(ad.condense.k).clone(),
            v: self.params.get(ad.condense.v).clone(),
            o: self.params.get(ad.condense.o).clone(),
            heads: self.cfg.heads,
        };
        let (_, weights) = crate::attention::condense_light(&grid, &bank, &proj, self.cfg.masking)?;
        Ok(Some((grid, weights)))
    }
}

impl RelightModel {
    /// Rebuild a model of shape `cfg` around stored parameters.
    pub fn from_params(cfg: ModelConfig, params: &ParamSet) -> Result<Self> {
        let mut m = RelightModel::new(cfg, &mut crate::rng::stream(0, "model-shape", 0))?;
        m.params.load_from(params)?;
        Ok(m)
    }

    /// Load `den.*` tensors from a checkpoint; a missing file is a state error.
    pub fn from_checkpoint(cfg: ModelConfig, path: &std::path::Path) -> Result<Self> {
        Self::from_params(cfg, &crate::checkpoint::load(path)?)
    }
}
