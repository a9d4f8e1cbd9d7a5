use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relight::metrics::{directional_consistency, psnr, ssim, SSIM_C1, SSIM_C2};
use relight::synth::{generate_sample, is_cardinal, SceneSpec};
use relight::{ImageBuffer, Mask};

fn pair(seed: u64, h: usize, w: usize, c: usize) -> (ImageBuffer, ImageBuffer) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let a = ImageBuffer::from_fn(h, w, c, |_, _, _| r.random_range(0.0..1.0));
    let b = ImageBuffer::from_fn(h, w, c, |y, x, ch| (a.get(y, x, ch) + r.random_range(-0.2..0.2)).clamp(0.0, 1.0));
    (a, b)
}

fn psnr_oracle(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let m = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    10.0 * (1.0 / m).log10()
}

/// Direct per-window evaluation, two-pass moments.
fn ssim_oracle(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (h, w, ch) = a.dims();
    let k = 7;
    let mut total = 0.0;
    let mut count = 0;
    for c in 0..ch {
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let pts: Vec<(f64, f64)> = (y0..y0 + k)
                    .flat_map(|y| (x0..x0 + k).map(move |x| (y, x)))
                    .map(|(y, x)| (a.get(y, x, c), b.get(y, x, c)))
                    .collect();
                let n = pts.len() as f64;
                let ma = pts.iter().map(|p| p.0).sum::<f64>() / n;
                let mb = pts.iter().map(|p| p.1).sum::<f64>() / n;
                let va = pts.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
                let vb = pts.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
                let cov = pts.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn psnr_and_ssim_match_oracles_on_100_pairs() {
    for seed in 0..100 {
        let (h, w) = (7 + (seed as usize % 6), 7 + (seed as usize * 7 % 9));
        let (a, b) = pair(seed, h, w, 3);
        let p = psnr(&a, &b).unwrap();
        assert!((p - psnr_oracle(&a, &b)).abs() <= 1e-8, "psnr seed {seed}");
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim_oracle(&a, &b)).abs() <= 1e-8, "ssim seed {seed}");
        assert!((-1.0..=1.0).contains(&s));
    }
}

#[test]
fn ssim_of_opposite_constants() {
    let a = ImageBuffer::filled(10, 12, 3, 0.0);
    let b = ImageBuffer::filled(10, 12, 3, 1.0);
    let s = ssim(&a, &b).unwrap();
    assert!((s - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-15);
    assert!(s > 0.0 && s < 2e-4);
}

#[test]
fn dcs_is_scale_invariant() {
    let s = generate_sample(2, 0, 32).unwrap();
    let d = directional_consistency(&s.target, &s.fg_mask, s.light.light_dir).unwrap();
    for k in [0.25, 0.5, 2.0] {
        let scaled = ImageBuffer::from_tensor(s.target.tensor().map(|v| v * k)).unwrap();
        let ds = directional_consistency(&scaled, &s.fg_mask, s.light.light_dir).unwrap();
        // Only the 1e-6 stabilizer breaks exact invariance.
        assert!((d - ds).abs() < 1e-4, "{d} vs {ds}");
    }
}

#[test]
fn ground_truth_targets_score_positive_on_cardinal_lights() {
    let mut cardinal = 0;
    for i in 0..80u64 {
        let spec = SceneSpec::sampled(0, 720 + i);
        if !is_cardinal(spec.direction_word()) {
            continue;
        }
        cardinal += 1;
        let s = generate_sample(0, 720 + i, 64).unwrap();
        assert!(directional_consistency(&s.target, &s.fg_mask, s.light.light_dir).unwrap() > 0.0);
    }
    assert_eq!(cardinal, 40);
}

#[test]
fn dcs_needs_a_foreground() {
    let img = ImageBuffer::filled(8, 8, 3, 0.5);
    assert!(directional_consistency(&img, &Mask::filled(8, 8, false), [1.0, 0.0, 0.0]).is_err());
}
