//! Lossless latent codec: 4×4 space-to-depth followed by a fixed orthonormal
//! rotation of the 48 patch channels (an orthonormal DCT-II basis).

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::tensor::Tensor;

pub const PATCH: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;
/// Channel width of a latent cell.
pub const LATENT_CHANNELS: usize = PATCH * PATCH * IMAGE_CHANNELS;

/// `h × w × d` latent; values are unbounded reals.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    tensor: Tensor,
}

impl LatentGrid {
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        tensor.hwc()?;
        Ok(LatentGrid { tensor })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        LatentGrid {
            tensor: Tensor::zeros(&[h, w, d]),
        }
    }

    pub fn h(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    /// Channel-wise concatenation of grids sharing `h × w`.
    pub fn concat(parts: &[&LatentGrid]) -> Result<LatentGrid> {
        let (h, w) = (parts[0].h(), parts[0].w());
        if parts.iter().any(|p| p.h() != h || p.w() != w) {
            return Err(Error::dim("latent grids differ in spatial size"));
        }
        let d: usize = parts.iter().map(|p| p.d()).sum();
        let mut data = Vec::with_capacity(h * w * d);
        for cell in 0..h * w {
            for p in parts {
                data.extend_from_slice(&p.data()[cell * p.d()..(cell + 1) * p.d()]);
            }
        }
        Ok(LatentGrid {
            tensor: Tensor::new(&[h, w, d], data)?,
        })
    }
}

/// Row `k` of the basis is the `k`-th DCT-II vector; rows are orthonormal.
fn rotation() -> &'static [f64] {
    static BASIS: OnceLock<Vec<f64>> = OnceLock::new();
    BASIS.get_or_init(|| {
        let n = LATENT_CHANNELS;
        let mut m = vec![0.0; n * n];
        for k in 0..n {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                m[k * n + i] =
                    scale * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
            }
        }
        m
    })
}

/// Patchify and rotate an `H × W × 3` image; `H` and `W` must be multiples of 4.
pub fn encode_latent(img: &ImageBuffer) -> Result<LatentGrid> {
    let (h, w, c) = img.dims();
    if c != IMAGE_CHANNELS {
        return Err(Error::dim(format!("codec expects 3 channels, got {c}")));
    }
    if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::dim(format!("{h}x{w} is not divisible by {PATCH}")));
    }
    let (lh, lw, n) = (h / PATCH, w / PATCH, LATENT_CHANNELS);
    let basis = rotation();
    let mut out = vec![0.0; lh * lw * n];
    let mut patch = [0.0; LATENT_CHANNELS];
    for ly in 0..lh {
        for lx in 0..lw {
            for py in 0..PATCH {
                for px in 0..PATCH {
                    let src = img.pixel(ly * PATCH + py, lx * PATCH + px);
                    patch[(py * PATCH + px) * c..(py * PATCH + px + 1) * c].copy_from_slice(src);
                }
            }
            let cell = &mut out[(ly * lw + lx) * n..(ly * lw + lx + 1) * n];
            for (k, o) in cell.iter_mut().enumerate() {
                *o = basis[k * n..(k + 1) * n].iter().zip(&patch).map(|(b, p)| b * p).sum();
            }
        }
    }
    LatentGrid::from_tensor(Tensor::new(&[lh, lw, n], out)?)
}

/// Exact inverse of [`encode_latent`].
pub fn decode_latent(z: &LatentGrid) -> Result<ImageBuffer> {
    let n = LATENT_CHANNELS;
    if z.d() != n {
        return Err(Error::dim(format!("latent has {} channels, codec uses {n}", z.d())));
    }
    let (lh, lw) = (z.h(), z.w());
    let basis = rotation();
    let c = IMAGE_CHANNELS;
    let mut img = ImageBuffer::filled(lh * PATCH, lw * PATCH, c, 0.0);
    let mut patch = [0.0; LATENT_CHANNELS];
    for ly in 0..lh {
        for lx in 0..lw {
            let cell = &z.data()[(ly * lw + lx) * n..(ly * lw + lx + 1) * n];
            patch.fill(0.0);
            for (k, &coef) in cell.iter().enumerate() {
                for (p, &b) in patch.iter_mut().zip(&basis[k * n..(k + 1) * n]) {
                    *p += coef * b;
                }
            }
            for py in 0..PATCH {
                for px in 0..PATCH {
                    for ch in 0..c {
                        img.set(ly * PATCH + py, lx * PATCH + px, ch, patch[(py * PATCH + px) * c + ch]);
                    }
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_is_orthonormal() {
        let b = rotation();
        let n = LATENT_CHANNELS;
        for i in 0..n {
            for j in 0..n {
                let d: f64 = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((d - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = ImageBuffer::from_fn(8, 8, 3, |_, _, _| rng.random_range(0.0..1.0));
        let z = encode_latent(&img).unwrap();
        assert_eq!((z.h(), z.w(), z.d()), (2, 2, 48));
        let back = decode_latent(&z).unwrap();
        assert!(back.tensor().max_abs_diff(img.tensor()) < 1e-9);
    }

    #[test]
    fn constant_image_lands_in_dc_channel() {
        let img = ImageBuffer::filled(4, 8, 3, 0.5);
        let z = encode_latent(&img).unwrap();
        for cell in z.data().chunks(48) {
            assert!((cell[0] - 0.5 * 48f64.sqrt()).abs() < 1e-12);
            assert!(cell[1..].iter().all(|v| v.abs() < 1e-12));
        }
        let back = decode_latent(&z).unwrap();
        assert!(back.tensor().max_abs_diff(img.tensor()) < 1e-12);
        let black = encode_latent(&ImageBuffer::black(4, 4)).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        assert!(matches!(encode_latent(&ImageBuffer::black(6, 8)), Err(Error::Dimension(_))));
        assert!(matches!(
            decode_latent(&LatentGrid::zeros(2, 2, 12)),
            Err(Error::Dimension(_))
        ));
    }
}
