use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

/// A named parameter's storage: flat `f64` data with a shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

/// Activations laid out channel-major: `data[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(channels * height * width, data.len(), "feature map shape/data mismatch");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let a = self.area();
        &self.data[c * a..(c + 1) * a]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Stacks `a` on top of `b` along the channel axis.
    pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
        assert!(a.height == b.height && a.width == b.width, "spatial size mismatch");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        FeatureMap::from_vec(a.channels + b.channels, a.height, a.width, data)
    }

    /// Splits off the first `channels` channels.
    pub fn split_channels(&self, channels: usize) -> (FeatureMap, FeatureMap) {
        let cut = channels * self.area();
        (
            FeatureMap::from_vec(channels, self.height, self.width, self.data[..cut].to_vec()),
            FeatureMap::from_vec(self.channels - channels, self.height, self.width, self.data[cut..].to_vec()),
        )
    }

    /// Per-channel spatial mean.
    pub fn spatial_mean(&self) -> Vec<f64> {
        let a = self.area() as f64;
        (0..self.channels).map(|c| self.channel(c).iter().sum::<f64>() / a).collect()
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
