//! `ImageTensor`: the universal pixel container.
//!
//! Row-major H×W×C real values. Pixel images live in `[0,1]`; feature
//! tensors may hold arbitrary finite values.

use ndarray::{Array4, ArrayView3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// H×W×C image (or feature grid) with finite real entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T: Scalar> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    /// Builds an image from row-major H×W×C data, validating the invariants.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Domain(
                "image dimensions must all be at least 1".into(),
            ));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {}x{}x{}, got {}",
                height * width * channels,
                height,
                width,
                channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("image contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self::from_vec(height, width, channels, vec![value; height * width * channels])
            .expect("constant image is valid")
    }

    /// Image filled by `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_vec(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Applies `f` to every value; the result is re-validated for finiteness.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::from_vec(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Clamps every value into `[0,1]`.
    pub fn clamp01(&self) -> Self {
        let one = T::one();
        let zero = T::zero();
        self.map(|v| v.min(one).max(zero)).expect("clamp keeps values finite")
    }

    /// Largest absolute difference against another image of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// View as an ndarray of shape (H, W, C).
    pub fn view_hwc(&self) -> ArrayView3<'_, T> {
        ArrayView3::from_shape((self.height, self.width, self.channels), &self.data)
            .expect("stored data matches declared shape")
    }

    /// Copy into a batch-of-one CHW tensor (1, C, H, W), the layout the
    /// network code operates on.
    pub fn to_nchw(&self) -> Array4<T> {
        let mut out = Array4::zeros((1, self.channels, self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out[[0, c, y, x]] = self.get(y, x, c);
                }
            }
        }
        out
    }

    /// Inverse of [`to_nchw`] for a batch-of-one tensor.
    pub fn from_nchw(t: &Array4<T>) -> Result<Self> {
        let (b, c, h, w) = t.dim();
        if b != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected batch 1, got {b}"
            )));
        }
        Self::from_fn(h, w, c, |y, x, ch| t[[0, ch, y, x]])
    }

    /// Converts the scalar type (exact for f32 -> f64).
    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().expect("finite")).expect("finite"))
                .collect(),
        }
    }

    /// Mirror across the vertical axis: column x becomes width-1-x.
    pub fn hflip(&self) -> ImageTensor<T> {
        ImageTensor::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
        .expect("valid dimensions")
    }

    /// Rotate 90 degrees clockwise `k` times; height and width swap when k
    /// is odd.
    pub fn rot90(&self, k: usize) -> ImageTensor<T> {
        match k % 4 {
            0 => self.clone(),
            1 => ImageTensor::from_fn(self.width, self.height, self.channels, |y, x, c| {
                self.get(self.height - 1 - x, y, c)
            })
            .expect("valid dimensions"),
            2 => ImageTensor::from_fn(self.height, self.width, self.channels, |y, x, c| {
                self.get(self.height - 1 - y, self.width - 1 - x, c)
            })
            .expect("valid dimensions"),
            _ => ImageTensor::from_fn(self.width, self.height, self.channels, |y, x, c| {
                self.get(x, self.width - 1 - y, c)
            })
            .expect("valid dimensions"),
        }
    }

    /// Axis-aligned crop starting at (y0, x0).
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageTensor<T>> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::Size(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds a {}x{} image",
                self.height, self.width
            )));
        }
        ImageTensor::from_fn(h, w, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c))
    }

    /// Channel-mean grayscale copy (H, W).
    pub fn to_gray(&self) -> ImageTensor<T> {
        let inv = T::from_usize(self.channels).unwrap().recip();
        ImageTensor::from_fn(self.height, self.width, 1, |y, x, _| {
            let mut acc = T::zero();
            for c in 0..self.channels {
                acc = acc + self.get(y, x, c);
            }
            acc * inv
        })
        .expect("valid dimensions")
    }
}
