//! Images and depth maps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Planar (channel-major) image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image<T>) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    /// `[1, c, h, w]` tensor view.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone())
    }

    /// Batch item `n` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor<T>, n: usize) -> Self {
        let (_, c, h, w) = t.dims4();
        Self {
            channels: c,
            height: h,
            width: w,
            data: t.item(n).to_vec(),
        }
    }

    /// Channel mean, used as a scalar guide or for display.
    pub fn luminance(&self) -> Image<T> {
        let scale = T::lit(self.channels as f64).recip();
        Image::from_fn(1, self.height, self.width, |_, y, x| {
            (0..self.channels).map(|c| self.at(c, y, x)).sum::<T>() * scale
        })
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Per-pixel depth in meters with a validity mask.
///
/// Valid pixels are always finite and strictly positive; construction
/// demotes anything else to invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> DepthMap<T> {
    /// Validity is inferred: finite and `> 0`.
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} depth values for {width}x{height}",
                values.len()
            )));
        }
        let valid = values.iter().map(|&v| Self::usable(v)).collect();
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    /// Explicit mask, intersected with the positivity invariant.
    pub fn with_validity(width: usize, height: usize, values: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "depth map {width}x{height} with {} values and {} flags",
                values.len(),
                valid.len()
            )));
        }
        let valid = valid
            .iter()
            .zip(&values)
            .map(|(&ok, &v)| ok && Self::usable(v))
            .collect();
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, value: T) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("consistent size")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self::new(width, height, values).expect("consistent size")
    }

    fn usable(v: T) -> bool {
        v.is_finite() && v > T::zero()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Multiplies every value by `k`; validity is kept.
    pub fn scaled(&self, k: T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| v * k).collect(),
            valid: self.valid.clone(),
        }
    }

    /// `[1, 1, h, w]` tensor of the raw values.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.values.clone())
    }

    pub fn from_tensor(t: &Tensor<T>, n: usize) -> Self {
        let (_, c, h, w) = t.dims4();
        assert_eq!(c, 1, "depth tensors have one channel");
        Self::new(w, h, t.item(n).to_vec()).expect("consistent size")
    }

    pub fn cast<U: Scalar>(&self) -> DepthMap<U> {
        DepthMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| U::lit(v.as_f64())).collect(),
            valid: self.valid.clone(),
        }
    }
}

/// Disparity (inverse depth) predicted by the network head.
pub type DisparityMap<T> = DepthMap<T>;
