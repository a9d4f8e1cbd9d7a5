//! Frequency-domain primitives: 2-D Fourier transforms, the centered
//! Gaussian low-pass map with the residual low-frequency enhancement block,
//! and single-level Haar analysis.
//!
//! Forward transforms are unnormalized; inverses carry the `1/(H·W)` factor.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::{FeatureGrid, ImageBuffer};
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place unnormalized 2-D DFT of a row-major `h × w` plane.
/// With `inverse` the exponent sign flips; no scaling is applied.
pub(crate) fn fft2_in_place(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(data.len(), h * w);
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let (row_fft, col_fft) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        if w > 1 {
            row_fft.process(data);
        }
        if h > 1 {
            let mut col = vec![Complex64::new(0.0, 0.0); h];
            for x in 0..w {
                for y in 0..h {
                    col[y] = data[y * w + x];
                }
                col_fft.process(&mut col);
                for y in 0..h {
                    data[y * w + x] = col[y];
                }
            }
        }
    });
}

/// Position of frequency `(u, v)` after moving DC to `(h/2, w/2)`.
#[inline]
pub(crate) fn fftshift_index(u: usize, v: usize, h: usize, w: usize) -> (usize, usize) {
    ((u + h / 2) % h, (v + w / 2) % w)
}

/// Inverse of [`fftshift_index`].
#[inline]
pub(crate) fn ifftshift_index(su: usize, sv: usize, h: usize, w: usize) -> (usize, usize) {
    ((su + h - h / 2) % h, (sv + w - w / 2) % w)
}

/// Complex spectra, one `rows × cols` plane per channel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub rows: usize,
    pub cols: usize,
    pub planes: usize,
    pub data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn plane(&self, p: usize) -> &[Complex64] {
        let n = self.rows * self.cols;
        &self.data[p * n..(p + 1) * n]
    }

    pub fn get(&self, p: usize, r: usize, c: usize) -> Complex64 {
        self.data[(p * self.rows + r) * self.cols + c]
    }

    /// Real parts of every plane, planar layout.
    pub fn real_parts(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.re).collect()
    }
}

fn check_nonempty(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::dim(format!("empty {rows}x{cols} plane")));
    }
    Ok(())
}

/// Forward transform of a single real plane.
pub fn fft2(rows: usize, cols: usize, plane: &[f64]) -> Result<ComplexGrid> {
    check_nonempty(rows, cols)?;
    if plane.len() != rows * cols {
        return Err(Error::dim(format!(
            "plane of {} values is not {rows}x{cols}",
            plane.len()
        )));
    }
    let mut data: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut data, rows, cols, false);
    Ok(ComplexGrid {
        rows,
        cols,
        planes: 1,
        data,
    })
}

/// Forward transform of every plane of a complex grid.
pub fn fft2_complex(grid: &ComplexGrid) -> Result<ComplexGrid> {
    transform_planes(grid, false)
}

/// Inverse transform including the `1/(rows·cols)` normalization.
pub fn ifft2(grid: &ComplexGrid) -> Result<ComplexGrid> {
    let mut out = transform_planes(grid, true)?;
    let norm = 1.0 / (grid.rows * grid.cols) as f64;
    out.data.iter_mut().for_each(|c| *c *= norm);
    Ok(out)
}

fn transform_planes(grid: &ComplexGrid, inverse: bool) -> Result<ComplexGrid> {
    check_nonempty(grid.rows, grid.cols)?;
    let n = grid.rows * grid.cols;
    if grid.data.len() != n * grid.planes {
        return Err(Error::dim("complex grid data length does not match dims"));
    }
    let mut out = grid.clone();
    for plane in out.data.chunks_exact_mut(n) {
        fft2_in_place(plane, grid.rows, grid.cols, inverse);
    }
    Ok(out)
}

/// Centered Gaussian coefficient map over frequency-index offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFilter {
    pub sigma: f64,
    pub rows: usize,
    pub cols: usize,
    /// `rows × cols`, DC at `(rows/2, cols/2)`.
    pub map: Vec<f64>,
}

impl SpectralFilter {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.map[r * self.cols + c]
    }
}

/// `map[u, v] = exp(-(du² + dv²) / (2σ²))` with `(du, dv)` the offsets from
/// the centered DC bin.
pub fn gaussian_lowpass_map(rows: usize, cols: usize, sigma: f64) -> Result<SpectralFilter> {
    check_nonempty(rows, cols)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be positive and finite, got {sigma}")));
    }
    let (cr, cc) = ((rows / 2) as f64, (cols / 2) as f64);
    let denom = 2.0 * sigma * sigma;
    let mut map = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (du, dv) = (r as f64 - cr, c as f64 - cc);
            map.push((-(du * du + dv * dv) / denom).exp());
        }
    }
    Ok(SpectralFilter {
        sigma,
        rows,
        cols,
        map,
    })
}

/// Weights of the 1×1 spectral convolution: real and imaginary parts of the
/// `D` feature channels are stacked into `2D` channels and mixed by
/// `weight: [2D, 2D]` plus `bias: [2D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl EnhanceParams {
    pub fn zeros(depth: usize) -> Self {
        EnhanceParams {
            weight: Tensor::zeros(&[2 * depth, 2 * depth]),
            bias: Tensor::zeros(&[2 * depth]),
        }
    }
}

/// `IFFT(ReLU(Conv(FFT(f) ⊙ g))) + f` recorded on a graph.
/// `feat` is `[H, W, D]`; `weight` and `bias` as in [`EnhanceParams`].
pub(crate) fn enhance_graph(g: &mut Graph, feat: Var, filter: &SpectralFilter, weight: Var, bias: Var) -> Var {
    let spec = g.spectral_forward(feat, &filter.map);
    let mixed = g.linear(spec, weight, Some(bias));
    let act = g.relu(mixed);
    let back = g.spectral_inverse(act);
    g.add(back, feat)
}

/// Residual low-frequency enhancement of a feature grid.
pub fn low_freq_enhance(f_b: &FeatureGrid, filter: &SpectralFilter, params: &EnhanceParams) -> Result<FeatureGrid> {
    if filter.rows != f_b.height() || filter.cols != f_b.width() {
        return Err(Error::dim(format!(
            "filter {}x{} vs features {}x{}",
            filter.rows,
            filter.cols,
            f_b.height(),
            f_b.width()
        )));
    }
    let d = f_b.depth();
    if params.weight.shape() != [2 * d, 2 * d] || params.bias.shape() != [2 * d] {
        return Err(Error::dim(format!(
            "enhancement weights {:?}/{:?} do not fit depth {d}",
            params.weight.shape(),
            params.bias.shape()
        )));
    }
    let mut g = Graph::new();
    let feat = g.constant(f_b.tensor().clone());
    let w = g.constant(params.weight.clone());
    let b = g.constant(params.bias.clone());
    let out = enhance_graph(&mut g, feat, filter, w, b);
    FeatureGrid::from_tensor(g.value(out).clone())
}

/// Low- and high-frequency parts of an image; `lq + hq` is the source.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSplit {
    pub lq: ImageBuffer,
    pub hq: ImageBuffer,
}

/// Orthonormal single-level Haar coefficients, each `ceil(H/2) × ceil(W/2)`
/// per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarBands {
    pub ll: ImageBuffer,
    pub lh: ImageBuffer,
    pub hl: ImageBuffer,
    pub hh: ImageBuffer,
    /// Source dims before reflect padding.
    pub height: usize,
    pub width: usize,
}

#[inline]
fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else if n >= 2 {
        n - 2
    } else {
        0
    }
}

/// Forward Haar transform; odd sides are reflect-padded by one.
pub fn haar_forward(img: &ImageBuffer) -> Result<HaarBands> {
    let (h, w, ch) = img.dims();
    if h == 0 || w == 0 || ch == 0 {
        return Err(Error::dim("empty image"));
    }
    let (bh, bw) = (h.div_ceil(2), w.div_ceil(2));
    let mut bands = [
        ImageBuffer::filled(bh, bw, ch, 0.0),
        ImageBuffer::filled(bh, bw, ch, 0.0),
        ImageBuffer::filled(bh, bw, ch, 0.0),
        ImageBuffer::filled(bh, bw, ch, 0.0),
    ];
    for by in 0..bh {
        for bx in 0..bw {
            let (y0, y1) = (2 * by, reflect(2 * by + 1, h));
            let (x0, x1) = (2 * bx, reflect(2 * bx + 1, w));
            for c in 0..ch {
                let a = img.get(y0, x0, c);
                let b = img.get(y0, x1, c);
                let cc = img.get(y1, x0, c);
                let d = img.get(y1, x1, c);
                bands[0].set(by, bx, c, 0.5 * (a + b + cc + d));
                bands[1].set(by, bx, c, 0.5 * (a - b + cc - d));
                bands[2].set(by, bx, c, 0.5 * (a + b - cc - d));
                bands[3].set(by, bx, c, 0.5 * (a - b - cc + d));
            }
        }
    }
    let [ll, lh, hl, hh] = bands;
    Ok(HaarBands {
        ll,
        lh,
        hl,
        hh,
        height: h,
        width: w,
    })
}

/// Inverse Haar transform, cropped back to the source dims.
pub fn haar_inverse(bands: &HaarBands) -> ImageBuffer {
    let (h, w, ch) = (bands.height, bands.width, bands.ll.channels());
    let mut out = ImageBuffer::filled(h, w, ch, 0.0);
    for by in 0..bands.ll.height() {
        for bx in 0..bands.ll.width() {
            for c in 0..ch {
                let ll = bands.ll.get(by, bx, c);
                let lh = bands.lh.get(by, bx, c);
                let hl = bands.hl.get(by, bx, c);
                let hh = bands.hh.get(by, bx, c);
                let px = [
                    0.5 * (ll + lh + hl + hh),
                    0.5 * (ll - lh + hl - hh),
                    0.5 * (ll + lh - hl - hh),
                    0.5 * (ll - lh - hl + hh),
                ];
                for (k, &v) in px.iter().enumerate() {
                    let (y, x) = (2 * by + k / 2, 2 * bx + k % 2);
                    if y < h && x < w {
                        out.set(y, x, c, v);
                    }
                }
            }
        }
    }
    out
}

/// `lq` is the synthesis of the approximation band alone; `hq = img − lq`.
pub fn haar_analyze(img: &ImageBuffer) -> Result<SubbandSplit> {
    let mut bands = haar_forward(img)?;
    for band in [&mut bands.lh, &mut bands.hl, &mut bands.hh] {
        band.data_mut().fill(0.0);
    }
    let lq = haar_inverse(&bands);
    let hq_data = img.data().iter().zip(lq.data()).map(|(a, b)| a - b).collect();
    let hq = ImageBuffer::new(img.height(), img.width(), img.channels(), hq_data)?;
    Ok(SubbandSplit { lq, hq })
}
