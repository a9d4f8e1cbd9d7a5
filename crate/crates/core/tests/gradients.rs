//! Analytic gradients against central finite differences, per parameter
//! block, along a random direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relight::config::Config;
use relight::fixer::{fixer_loss_and_gradients, ColorTransform, Fixer, FixerPair, PerceptualProxy};
use relight::params::ParamSet;
use relight::pipeline::{loss_and_gradients, DiffusionDraw, ModelConfig, NoiseSchedule, RelightModel, TrainExample};
use relight::synth::generate_sample;
use relight::{ImageBuffer, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
// Below this a directional derivative is lost in the rounding of (lp - lm) / 2H.
const FLOOR: f64 = 1e-8;

/// Relative error of the directional derivative of every block.
fn check_blocks(
    params: &mut ParamSet,
    grads: &[Tensor],
    select: impl Fn(&str) -> bool,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ids: Vec<_> = params.ids().collect();
    let mut out = Vec::new();
    for (id, g) in ids.into_iter().zip(grads) {
        let name = params.name(id).to_string();
        if !select(&name) {
            continue;
        }
        let dir: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic: f64 = g.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
        let orig = params.get(id).clone();
        let shifted = |s: f64| {
            let mut t = orig.clone();
            for (v, d) in t.data_mut().iter_mut().zip(&dir) {
                *v += s * d;
            }
            t
        };
        *params.get_mut(id) = shifted(H);
        let lp = loss(params);
        *params.get_mut(id) = shifted(-H);
        let lm = loss(params);
        *params.get_mut(id) = orig;
        let fd = (lp - lm) / (2.0 * H);
        let scale = analytic.abs().max(fd.abs());
        let rel = if scale < FLOOR { 0.0 } else { (analytic - fd).abs() / scale };
        out.push((name, rel));
    }
    out
}

fn assert_all(results: &[(String, f64)]) {
    assert!(!results.is_empty());
    let bad: Vec<_> = results.iter().filter(|(_, r)| *r > TOL).collect();
    assert!(bad.is_empty(), "blocks over tolerance: {bad:?}");
}

fn randomize(params: &mut ParamSet, pattern: &str, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().filter(|&id| params.name(id).contains(pattern)).collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v = std * rng.random_range(-1.0..1.0);
        }
    }
}

fn micro_model() -> (RelightModel, NoiseSchedule, TrainExample, DiffusionDraw) {
    let mut cfg = Config::default();
    cfg.resolution = 16;
    cfg.d = 8;
    cfg.n_q = 2;
    cfg.heads = 1;
    cfg.sigma = 1.0;
    cfg.t = 20;
    let mut model = RelightModel::new(ModelConfig::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    // Zero-initialized output projections would hide the adapter gradients.
    randomize(model.params_mut(), ".o", 0.3, 2);
    let s = generate_sample(5, 0, 16).unwrap();
    let ex = TrainExample::from_sample(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draw = DiffusionDraw::sample(&mut rng, 20, &[4, 4, 48], 0.0, 0.0);
    draw.t = 7;
    (model, NoiseSchedule::cosine(20).unwrap(), ex, draw)
}

#[test]
fn full_denoiser_micro_config() {
    let (model, sched, ex, draw) = micro_model();
    let (_, grads) = loss_and_gradients(&model, &sched, &ex, &draw).unwrap();
    let mut params = model.params().clone();
    let cfg = model.config().clone();
    let res = check_blocks(&mut params, &grads, |_| true, |p| {
        let m = RelightModel::from_params(cfg.clone(), p).unwrap();
        loss_and_gradients(&m, &sched, &ex, &draw).unwrap().0
    });
    assert_eq!(res.len(), model.params().len());
    assert_all(&res);
}

#[test]
fn text_conditioned_draw() {
    let mut cfg = Config::default();
    cfg.resolution = 16;
    cfg.d = 4;
    cfg.n_q = 1;
    cfg.sigma = 1.0;
    cfg.t = 20;
    let model = RelightModel::new(ModelConfig::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let ex = TrainExample::from_sample(&generate_sample(5, 0, 16).unwrap()).unwrap();
    let mut draw = DiffusionDraw::sample(&mut ChaCha8Rng::seed_from_u64(11), 20, &[4, 4, 48], 0.0, 1.0);
    draw.t = 12;
    let sched = NoiseSchedule::cosine(20).unwrap();
    let (_, grads) = loss_and_gradients(&model, &sched, &ex, &draw).unwrap();
    // Background cells are generated from scratch here.
    let free = model.params().ids().position(|id| model.params().name(id) == "den.bg_mean").unwrap();
    assert!(grads[free].data().iter().any(|&v| v != 0.0));
    let mut params = model.params().clone();
    let mc = model.config().clone();
    let res = check_blocks(&mut params, &grads, |n| n.contains("x0_") || n.contains("bg_mean") || n.contains("logvar") || n.contains("tokens"), |p| {
        let m = RelightModel::from_params(mc.clone(), p).unwrap();
        loss_and_gradients(&m, &sched, &ex, &draw).unwrap().0
    });
    assert_eq!(res.len(), 6);
    assert_all(&res);
}

#[test]
fn adapter_attentions() {
    let (model, sched, ex, draw) = micro_model();
    let (_, grads) = loss_and_gradients(&model, &sched, &ex, &draw).unwrap();
    let mut params = model.params().clone();
    let cfg = model.config().clone();
    let adapter = |n: &str| n.contains("condense") || n.contains("inject") || n.contains("bank") || n.contains("spectral") || n.contains("bgenc");
    let res = check_blocks(&mut params, &grads, adapter, |p| {
        let m = RelightModel::from_params(cfg.clone(), p).unwrap();
        loss_and_gradients(&m, &sched, &ex, &draw).unwrap().0
    });
    // bank + spectral w/b + condense q/k/v/o + 3 sites × q/k/v/o + 3 encoder convs × w/b
    assert_eq!(res.len(), 1 + 2 + 4 + 12 + 6);
    for (name, rel) in &res {
        assert!(*rel <= TOL, "{name}: {rel}");
    }
}

#[test]
fn adapter_attentions_pre_softmax_mode() {
    let mut cfg = Config::default();
    cfg.resolution = 8;
    cfg.d = 4;
    cfg.n_q = 1;
    cfg.mask_mode = relight::attention::MaskMode::PreSoftmax;
    let mut model = RelightModel::new(ModelConfig::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    randomize(model.params_mut(), ".o", 0.3, 5);
    let ex = TrainExample::from_sample(&generate_sample(5, 1, 8).unwrap()).unwrap();
    let draw = DiffusionDraw::sample(&mut ChaCha8Rng::seed_from_u64(6), 20, &[2, 2, 48], 0.0, 0.0);
    let sched = NoiseSchedule::cosine(20).unwrap();
    let (_, grads) = loss_and_gradients(&model, &sched, &ex, &draw).unwrap();
    let mut params = model.params().clone();
    let mc = model.config().clone();
    let res = check_blocks(&mut params, &grads, |n| n.contains("condense") || n.contains("inject"), |p| {
        let m = RelightModel::from_params(mc.clone(), p).unwrap();
        loss_and_gradients(&m, &sched, &ex, &draw).unwrap().0
    });
    assert_all(&res);
}

#[test]
fn modulator_micro_config() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut fixer = Fixer::new(4, &mut r).unwrap();
    randomize(fixer.params_mut(), "l4", 0.2, 9);
    let img = ImageBuffer::from_fn(8, 8, 3, |y, x, c| 0.2 + 0.6 * (((y * 3 + x * 5 + c) % 7) as f64 / 7.0));
    let t = ColorTransform {
        gains: [1.3, 0.8, 1.1],
        gamma: 1.2,
        offset: 0.05,
        hue: 0.2,
    };
    let batch = vec![FixerPair::new(img.clone(), t.apply(&img).unwrap()).unwrap()];
    let perc = PerceptualProxy::default();
    let (_, grads) = fixer_loss_and_gradients(&fixer, &perc, 0.1, &batch).unwrap();
    let mut params = fixer.params().clone();
    let res = check_blocks(&mut params, &grads, |_| true, |p| {
        let f = Fixer::from_params(4, p).unwrap();
        fixer_loss_and_gradients(&f, &perc, 0.1, &batch).unwrap().0
    });
    assert_eq!(res.len(), 8);
    assert_all(&res);
}
