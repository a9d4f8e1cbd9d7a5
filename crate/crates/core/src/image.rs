//! Pixel carriers shared by every stage: images, binary masks and feature grids.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Height × width × channels image, linear values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    tensor: Tensor,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Ok(ImageBuffer {
            tensor: Tensor::new(&[height, width, channels], data)?,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImageBuffer {
            tensor: Tensor::full(&[height, width, channels], value),
        }
    }

    pub fn black(height: usize, width: usize) -> Self {
        Self::filled(height, width, 3, 0.0)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageBuffer {
            tensor: Tensor::new(&[height, width, channels], data).expect("sized by construction"),
        }
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        tensor.hwc()?;
        Ok(ImageBuffer { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.channels())
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.tensor.data()[(y * self.width() + x) * self.channels() + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let (w, ch) = (self.width(), self.channels());
        self.tensor.data_mut()[(y * w + x) * ch + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let ch = self.channels();
        let start = (y * self.width() + x) * ch;
        &self.tensor.data()[start..start + ch]
    }

    /// Rec. 709 luma of pixel `(y, x)`; single-channel images return the value.
    pub fn luminance(&self, y: usize, x: usize) -> f64 {
        let p = self.pixel(y, x);
        if p.len() >= 3 {
            0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2]
        } else {
            p[0]
        }
    }

    pub fn clamped(&self) -> ImageBuffer {
        ImageBuffer {
            tensor: self.tensor.map(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dim(format!(
                "image dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &ImageBuffer) -> Result<ImageBuffer> {
        self.same_dims(other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        ImageBuffer::new(self.height(), self.width(), self.channels(), data)
    }

    /// Copy with pixels outside `mask` set to zero.
    pub fn masked(&self, mask: &Mask) -> Result<ImageBuffer> {
        mask.check_dims(self.height(), self.width())?;
        let mut out = self.clone();
        let ch = self.channels();
        for (i, &m) in mask.data().iter().enumerate() {
            if !m {
                out.data_mut()[i * ch..(i + 1) * ch].fill(0.0);
            }
        }
        Ok(out)
    }

    /// Pixels of `fg` where `mask` is set, pixels of `self` elsewhere.
    pub fn composite(&self, fg: &ImageBuffer, mask: &Mask) -> Result<ImageBuffer> {
        self.same_dims(fg)?;
        mask.check_dims(self.height(), self.width())?;
        let mut out = self.clone();
        let ch = self.channels();
        for (i, &m) in mask.data().iter().enumerate() {
            if m {
                out.data_mut()[i * ch..(i + 1) * ch].copy_from_slice(&fg.data()[i * ch..(i + 1) * ch]);
            }
        }
        Ok(out)
    }

    /// Copy of the window starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<ImageBuffer> {
        if y0 + height > self.height() || x0 + width > self.width() {
            return Err(Error::dim("crop window outside image"));
        }
        Ok(ImageBuffer::from_fn(height, width, self.channels(), |y, x, c| {
            self.get(y0 + y, x0 + x, c)
        }))
    }
}

/// Binary height × width mask; `true` marks foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Mask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Mask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::dim(format!(
                "mask {}x{} vs image {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Area-downsampled mask: a cell is foreground when at least half of the
    /// source pixels it covers are.
    pub fn downsample(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |y, x| {
            let (y0, y1) = (y * self.height / height, ((y + 1) * self.height).div_ceil(height));
            let (x0, x1) = (x * self.width / width, ((x + 1) * self.width).div_ceil(width));
            let mut on = 0usize;
            let mut total = 0usize;
            for sy in y0..y1.max(y0 + 1) {
                for sx in x0..x1.max(x0 + 1) {
                    total += 1;
                    on += self.get(sy, sx) as usize;
                }
            }
            2 * on >= total
        })
    }
}

/// Height × width × D real feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    tensor: Tensor,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        Ok(FeatureGrid {
            tensor: Tensor::new(&[height, width, depth], data)?,
        })
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        tensor.hwc()?;
        Ok(FeatureGrid { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn depth(&self) -> usize {
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
}
