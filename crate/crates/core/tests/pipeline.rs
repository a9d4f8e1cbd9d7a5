use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relight::config::{Composite, Config};
use relight::pipeline::{
    diffusion_loss, encode_latent, sample_with, tokens_from_words, Conditioning, DiffusionDraw, LatentGrid, Mode,
    ModelConfig, NoiseSchedule, RelightInput, RelightModel, SampleSettings, TrainExample, Trainer, LATENT_CHANNELS,
};
use relight::synth::generate_sample;
use relight::{checkpoint, Error, ImageBuffer, Mask, Result, Tensor};

fn small_cfg(resolution: usize, d: usize) -> Config {
    let mut cfg = Config::default();
    cfg.resolution = resolution;
    cfg.d = d;
    cfg.n_q = 2;
    cfg.sigma = 2.0;
    cfg.t = 50;
    cfg.steps = 5;
    cfg
}

fn rand_latent(rng: &mut ChaCha8Rng, side: usize) -> LatentGrid {
    LatentGrid::from_tensor(Tensor::from_fn(&[side, side, 3 * LATENT_CHANNELS], |_| rng.random_range(-1.0..1.0))).unwrap()
}

fn image_cond(seed: u64, res: usize) -> Conditioning {
    let s = generate_sample(seed, 0, res).unwrap();
    Conditioning {
        tokens: vec![relight::pipeline::Token::BLEND],
        light: Some(s.bg),
        fg_mask: s.fg_mask,
    }
}

#[test]
fn zero_output_projections_match_disabled_adapter() {
    let cfg = small_cfg(16, 8);
    let with = RelightModel::new(ModelConfig::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut off_cfg = cfg.clone();
    off_cfg.adapter = false;
    let without = RelightModel::from_params(ModelConfig::from_config(&off_cfg), with.params()).unwrap();
    assert!(without.params().len() < with.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = rand_latent(&mut rng, 4);
    let cond = image_cond(3, 16);
    let a = with.predict(&z, 10, &cond).unwrap();
    let b = without.predict(&z, 10, &cond).unwrap();
    assert!(a.tensor().max_abs_diff(b.tensor()) <= 1e-9);
}

#[test]
fn empty_mask_makes_output_independent_of_bank() {
    let cfg = small_cfg(16, 8);
    let mut m = RelightModel::new(ModelConfig::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let head = m.params().find("den.out.w").unwrap();
    for id in m.injection_outputs().into_iter().chain([head]) {
        for v in m.params_mut().get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let z = rand_latent(&mut rng, 4);
    let mut cond = image_cond(6, 16);
    cond.fg_mask = Mask::filled(16, 16, false);
    let a = m.predict(&z, 3, &cond).unwrap();
    let bank = m.params().find("den.bank").unwrap();
    for v in m.params_mut().get_mut(bank).data_mut() {
        *v = rng.random_range(-3.0..3.0);
    }
    let b = m.predict(&z, 3, &cond).unwrap();
    assert_eq!(a, b);
    // With a foreground the bank does matter.
    cond.fg_mask = Mask::filled(16, 16, true);
    let c = m.predict(&z, 3, &cond).unwrap();
    for v in m.params_mut().get_mut(bank).data_mut() {
        *v *= -1.0;
    }
    assert_ne!(c, m.predict(&z, 3, &cond).unwrap());
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/denoiser_8x8.json")
}

#[test]
fn denoiser_matches_recorded_golden_values() {
    let cfg = small_cfg(32, 8);
    let mut m = RelightModel::new(ModelConfig::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for id in m.injection_outputs() {
        for v in m.params_mut().get_mut(id).data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let z = rand_latent(&mut rng, 8);
    let out = m.predict(&z, 17, &image_cond(44, 32)).unwrap();
    assert_eq!((out.h(), out.w(), out.d()), (8, 8, LATENT_CHANNELS));
    let path = golden_path();
    if std::env::var_os("RELIGHT_REGEN_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string(out.data()).unwrap()).unwrap();
    }
    let recorded: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(recorded.len(), out.data().len());
    let diff = recorded.iter().zip(out.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-9, "golden drift {diff}");
}

fn examples(n: u64, res: usize) -> Vec<TrainExample> {
    (0..n).map(|i| TrainExample::from_sample(&generate_sample(21, i, res).unwrap()).unwrap()).collect()
}

fn draws(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Vec<DiffusionDraw> {
    (0..n).map(|_| DiffusionDraw::sample(rng, 50, &[side, side, LATENT_CHANNELS], 0.1, 0.2)).collect()
}

#[test]
fn loss_of_perfect_and_zero_predictors() {
    let sched = NoiseSchedule::cosine(50).unwrap();
    let batch = examples(64, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ds = draws(&mut rng, 64, 2);
    let mut k = 0;
    let perfect = diffusion_loss(&sched, &batch, &ds, |_, _, _| {
        k += 1;
        LatentGrid::from_tensor(ds[k - 1].eps.clone())
    })
    .unwrap();
    assert_eq!(perfect, 0.0);
    let zero = diffusion_loss(&sched, &batch, &ds, |_, _, _| Ok(LatentGrid::zeros(2, 2, LATENT_CHANNELS))).unwrap();
    assert!((zero - 1.0).abs() <= 0.1, "{zero}");
    assert!(matches!(diffusion_loss(&sched, &[], &[], |_, _, _| unreachable!()), Err(Error::Parameter(_))));
}

#[test]
fn empty_batch_is_rejected() {
    let cfg = small_cfg(8, 4);
    let mut m = RelightModel::new(ModelConfig::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut opt = relight::params::Adam::new(m.params(), 1e-3);
    let sched = NoiseSchedule::cosine(50).unwrap();
    let r = relight::pipeline::train_step(&mut m, &mut opt, &sched, &[], &[]);
    assert!(matches!(r, Err(Error::Parameter(_))));
}

fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    v.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn training_smoke_test_halves_the_loss() {
    let mut cfg = small_cfg(16, 8);
    cfg.batch = 4;
    cfg.lr = 3e-3;
    cfg.seed = 5;
    let data = examples(16, 16);
    let m = RelightModel::new(ModelConfig::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut t = Trainer::new(m, &cfg).unwrap();
    let losses = t.fit(&data, 200, |_, _| {}).unwrap();
    let ma = moving_average(&losses, 20);
    let (first, last) = (ma[0], *ma.last().unwrap());
    assert!(last <= 0.5 * first, "moving average {first} -> {last}");
}

#[test]
fn full_dropout_equalizes_image_and_text_modes() {
    let cfg = small_cfg(16, 8);
    let mut m = RelightModel::new(ModelConfig::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for id in m.injection_outputs() {
        for v in m.params_mut().get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let sched = NoiseSchedule::cosine(50).unwrap();
    let ex = &examples(1, 16)[0];
    let shape = [4, 4, LATENT_CHANNELS];
    let image = DiffusionDraw::sample(&mut ChaCha8Rng::seed_from_u64(1), 50, &shape, 1.0, 0.0);
    let text = DiffusionDraw::sample(&mut ChaCha8Rng::seed_from_u64(1), 50, &shape, 1.0, 1.0);
    assert!(image.dropped && text.dropped && text.text && !image.text);
    assert_eq!(image.eps, text.eps);
    let pi = m.predict(&ex.noisy_input(&sched, &image).unwrap(), image.t, &ex.conditioning(&image)).unwrap();
    let pt = m.predict(&ex.noisy_input(&sched, &text).unwrap(), text.t, &ex.conditioning(&text)).unwrap();
    assert_eq!(pi, pt);
}

fn relight_input(seed: u64, res: usize) -> RelightInput {
    let s = generate_sample(seed, 3, res).unwrap();
    RelightInput::image_based(s.fg, s.fg_mask, s.bg).unwrap()
}

#[test]
fn unit_guidance_with_equal_branches_is_unguided() {
    // Stub whose prediction ignores conditioning entirely.
    let stub = |z: &LatentGrid, t: usize, _: &Conditioning| -> Result<LatentGrid> {
        let d: Vec<f64> = z.data().chunks(3 * LATENT_CHANNELS).flat_map(|c| c[..LATENT_CHANNELS].iter().map(|v| 0.3 * v + t as f64 * 1e-3)).collect();
        LatentGrid::from_tensor(Tensor::new(&[z.h(), z.w(), LATENT_CHANNELS], d)?)
    };
    let mut inp = relight_input(1, 16);
    inp.mode = Mode::TextBased;
    inp.prompt_tokens = tokens_from_words(&["left"]).unwrap();
    inp.bg = ImageBuffer::black(16, 16);
    let base = SampleSettings {
        timesteps: 50,
        steps: 6,
        guidance: None,
        seed: 3,
        composite: Composite::Hard,
    };
    let unguided = sample_with(&stub, &inp, &base).unwrap();
    let guided = sample_with(&stub, &inp, &SampleSettings { guidance: Some(1.0), ..base }).unwrap();
    assert_eq!(unguided, guided);
}

#[test]
fn sampling_is_deterministic_and_composites_background() {
    let cfg = small_cfg(16, 8);
    let m = RelightModel::new(ModelConfig::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let inp = relight_input(2, 16);
    let settings = SampleSettings::from_config(&cfg);
    let a = relight::pipeline::sample(&m, &inp, &settings).unwrap();
    let b = relight::pipeline::sample(&m, &inp, &settings).unwrap();
    assert_eq!(a, b);
    for y in 0..16 {
        for x in 0..16 {
            if !inp.fg_mask.get(y, x) {
                assert_eq!(a.pixel(y, x), inp.bg.pixel(y, x));
            }
        }
    }
    let c = relight::pipeline::sample(&m, &inp, &SampleSettings { seed: 99, ..settings }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn checkpoint_round_trip_and_missing_file() {
    let cfg = small_cfg(16, 8);
    let m = RelightModel::new(ModelConfig::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dlkt");
    checkpoint::save(&path, m.params()).unwrap();
    let back = RelightModel::from_checkpoint(ModelConfig::from_config(&cfg), &path).unwrap();
    for ((n1, a), (n2, b)) in m.params().iter().zip(back.params().iter()) {
        assert_eq!(n1, n2);
        assert!(a.max_abs_diff(b) <= 1e-6 * a.data().iter().fold(1.0f64, |x, v| x.max(v.abs())));
    }
    let missing = RelightModel::from_checkpoint(ModelConfig::from_config(&cfg), &dir.path().join("none.dlkt"));
    assert!(matches!(missing, Err(Error::State(_))));
    let mut other = cfg.clone();
    other.d = 4;
    assert!(matches!(RelightModel::from_checkpoint(ModelConfig::from_config(&other), &path), Err(Error::State(_))));
}

#[test]
fn assembled_text_mode_slab_is_black_encoding() {
    let s = generate_sample(4, 0, 8).unwrap();
    let inp = RelightInput::text_based(s.fg.clone(), s.fg_mask.clone(), tokens_from_words(&["top", "cool"]).unwrap()).unwrap();
    let z = relight::pipeline::assemble_input(&inp, &LatentGrid::zeros(2, 2, LATENT_CHANNELS)).unwrap();
    let black = encode_latent(&ImageBuffer::black(8, 8)).unwrap();
    for cell in 0..4 {
        assert_eq!(&z.data()[cell * 144 + 96..(cell + 1) * 144], &black.data()[cell * 48..(cell + 1) * 48]);
    }
    let full = RelightInput::image_based(s.fg.clone(), Mask::filled(8, 8, true), s.bg.clone()).unwrap();
    let z = relight::pipeline::assemble_input(&full, &LatentGrid::zeros(2, 2, LATENT_CHANNELS)).unwrap();
    let fg = encode_latent(&s.fg).unwrap();
    for cell in 0..4 {
        assert_eq!(&z.data()[cell * 144 + 48..cell * 144 + 96], &fg.data()[cell * 48..(cell + 1) * 48]);
    }
}
