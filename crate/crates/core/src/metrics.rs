//! Image quality and directional-lighting metrics.

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};

/// Reports print infinite PSNR as this value.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_dims(b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data().len() as f64)
}

/// `10·log10(1 / MSE)` for `[0, 1]` images; `+∞` when identical.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

pub fn cap_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP)
}

/// PSNR over the pixels selected by `mask` only.
pub fn masked_psnr(a: &ImageBuffer, b: &ImageBuffer, mask: &Mask) -> Result<f64> {
    a.same_dims(b)?;
    mask.check_dims(a.height(), a.width())?;
    let ch = a.channels();
    let (mut s, mut n) = (0.0, 0usize);
    for (i, _) in mask.data().iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..ch {
            let d = a.data()[i * ch + c] - b.data()[i * ch + c];
            s += d * d;
        }
        n += ch;
    }
    if n == 0 {
        return Err(Error::param("empty mask"));
    }
    let m = s / n as f64;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Summed-area table of one channel, `(h+1) × (w+1)`.
fn integral(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut t = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y, x);
            t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + row;
        }
    }
    t
}

fn window_sum(t: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let s = w + 1;
    t[(y + k) * s + x + k] - t[y * s + x + k] - t[(y + k) * s + x] + t[y * s + x]
}

/// SSIM term for one window from its moments.
pub fn ssim_from_moments(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Mean SSIM over all valid 7×7 uniform windows and all channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_dims(b)?;
    let (h, w, ch) = a.dims();
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::param(format!("SSIM needs at least {k}x{k} pixels, got {h}x{w}")));
    }
    let n = (k * k) as f64;
    let mut total = 0.0;
    for c in 0..ch {
        let pa = |y: usize, x: usize| a.get(y, x, c);
        let pb = |y: usize, x: usize| b.get(y, x, c);
        let sa = integral(h, w, pa);
        let sb = integral(h, w, pb);
        let saa = integral(h, w, |y, x| pa(y, x) * pa(y, x));
        let sbb = integral(h, w, |y, x| pb(y, x) * pb(y, x));
        let sab = integral(h, w, |y, x| pa(y, x) * pb(y, x));
        for y in 0..=h - k {
            for x in 0..=w - k {
                let ma = window_sum(&sa, w, y, x, k) / n;
                let mb = window_sum(&sb, w, y, x, k) / n;
                let va = (window_sum(&saa, w, y, x, k) / n - ma * ma).max(0.0);
                let vb = (window_sum(&sbb, w, y, x, k) / n - mb * mb).max(0.0);
                let cov = window_sum(&sab, w, y, x, k) / n - ma * mb;
                total += ssim_from_moments(ma, mb, va, vb, cov);
            }
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1) * ch) as f64)
}

/// Contrast between the lit and the dark half of the foreground.
///
/// The mask is split by a line through its centroid perpendicular to the
/// image-plane projection of `light_dir` (x right, y down). Returns
/// `(L − D) / (L + D + 1e-6)` over mean Rec.709 luminance.
pub fn directional_consistency(relit: &ImageBuffer, fg_mask: &Mask, light_dir: [f64; 3]) -> Result<f64> {
    fg_mask.check_dims(relit.height(), relit.width())?;
    if relit.channels() != 3 {
        return Err(Error::dim("directional consistency needs an RGB image"));
    }
    let (lx, ly) = (light_dir[0], light_dir[1]);
    if !(lx.is_finite() && ly.is_finite()) || lx.hypot(ly) < 1e-9 {
        return Err(Error::param("light direction has no image-plane component"));
    }
    let n = fg_mask.count();
    if n == 0 {
        return Err(Error::param("empty foreground mask"));
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for y in 0..fg_mask.height() {
        for x in 0..fg_mask.width() {
            if fg_mask.get(y, x) {
                cx += x as f64;
                cy += y as f64;
            }
        }
    }
    cx /= n as f64;
    cy /= n as f64;
    let (mut lit, mut nl, mut dark, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..fg_mask.height() {
        for x in 0..fg_mask.width() {
            if !fg_mask.get(y, x) {
                continue;
            }
            let side = (x as f64 - cx) * lx + (y as f64 - cy) * ly;
            let lum = relit.luminance(y, x);
            if side > 1e-12 {
                lit += lum;
                nl += 1;
            } else if side < -1e-12 {
                dark += lum;
                nd += 1;
            }
        }
    }
    if nl == 0 || nd == 0 {
        return Ok(0.0);
    }
    let (l, d) = (lit / nl as f64, dark / nd as f64);
    Ok((l - d) / (l + d + 1e-6))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = ImageBuffer::filled(4, 4, 3, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(cap_psnr(psnr(&a, &a).unwrap()), 99.0);
        let b = ImageBuffer::filled(4, 4, 3, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(psnr(&a, &ImageBuffer::filled(4, 5, 3, 0.0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = ImageBuffer::from_fn(9, 8, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let z = ImageBuffer::filled(8, 8, 1, 0.0);
        let o = ImageBuffer::filled(8, 8, 1, 1.0);
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&z, &o).unwrap() - expect).abs() < 1e-15);
        assert!(matches!(ssim(&ImageBuffer::filled(6, 9, 1, 0.0), &ImageBuffer::filled(6, 9, 1, 0.0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn dcs_sign_and_uniform() {
        let mask = Mask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..7).contains(&x));
        let left_lit = ImageBuffer::from_fn(8, 8, 3, |_, x, _| 1.0 - x as f64 / 8.0);
        assert!(directional_consistency(&left_lit, &mask, [-1.0, 0.0, 0.3]).unwrap() > 0.0);
        assert!(directional_consistency(&left_lit, &mask, [1.0, 0.0, 0.3]).unwrap() < 0.0);
        let flat = ImageBuffer::filled(8, 8, 3, 0.4);
        assert_eq!(directional_consistency(&flat, &mask, [0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(directional_consistency(&flat, &Mask::filled(8, 8, false), [1.0, 0.0, 0.0]).is_err());
        assert!(directional_consistency(&flat, &mask, [0.0, 0.0, 1.0]).is_err());
    }
}
