//! Region attention: each region map is squeezed to a single channel, the
//! squeezed maps are pooled and a shared two-layer perceptron turns them into
//! one sigmoid weight per region.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{Conv2d, Linear};
use super::tensor::FeatureMap;
use super::NnError;
use crate::math;

/// Per-region squeeze convolutions: `F1` (C to C, 3x3) and `F2` (2 to 1, 3x3).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSqueeze {
    pub f1: Conv2d,
    pub f2: Conv2d,
}

impl RegionSqueeze {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            f1: Conv2d::new(channels, channels, 3, 1, 1, rng),
            f2: Conv2d::new(2, 1, 3, 1, 1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            f1: self.f1.zeros_like(),
            f2: self.f2.zeros_like(),
        }
    }
}

pub(crate) struct SqueezeCache {
    f1_out: FeatureMap,
    pooled: FeatureMap,
    argmax: Vec<usize>,
}

fn check_channels(p: &FeatureMap, expected: usize, context: &'static str) -> Result<(), NnError> {
    if p.channels != expected {
        return Err(NnError::ShapeMismatch {
            context,
            expected,
            found: p.channels,
        });
    }
    Ok(())
}

/// Channel-wise mean and max of `x`, stacked as a two-channel map, plus the
/// winning channel of each pixel.
fn channel_pool(x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let area = x.area();
    let mut pooled = FeatureMap::zeros(2, x.height, x.width);
    let mut argmax = vec![0; area];
    for i in 0..area {
        let mut sum = 0.0;
        let mut best = f64::NEG_INFINITY;
        for c in 0..x.channels {
            let v = x.data[c * area + i];
            sum += v;
            if v > best {
                best = v;
                argmax[i] = c;
            }
        }
        pooled.data[i] = sum / x.channels as f64;
        pooled.data[area + i] = best;
    }
    (pooled, argmax)
}

pub(crate) fn squeeze_cached(p: &FeatureMap, sq: &RegionSqueeze) -> (FeatureMap, SqueezeCache) {
    let f1_out = sq.f1.forward(p);
    let (pooled, argmax) = channel_pool(&f1_out);
    let mu = sq.f2.forward(&pooled);
    (mu, SqueezeCache { f1_out, pooled, argmax })
}

pub(crate) fn squeeze_backward(sq: &RegionSqueeze, p: &FeatureMap, cache: &SqueezeCache, dmu: &FeatureMap, grad: &mut RegionSqueeze) -> FeatureMap {
    let dpooled = sq.f2.backward(&cache.pooled, dmu, &mut grad.f2, true).expect("input grad requested");
    let x = &cache.f1_out;
    let area = x.area();
    let mut df1 = FeatureMap::zeros(x.channels, x.height, x.width);
    let inv = 1.0 / x.channels as f64;
    for i in 0..area {
        let da = dpooled.data[i] * inv;
        for c in 0..x.channels {
            df1.data[c * area + i] = da;
        }
        df1.data[cache.argmax[i] * area + i] += dpooled.data[area + i];
    }
    sq.f1.backward(p, &df1, &mut grad.f1, true).expect("input grad requested")
}

/// `mu_k`: the single-channel squeezed map of region feature map `p`.
pub fn region_squeeze(p: &FeatureMap, sq: &RegionSqueeze) -> Result<FeatureMap, NnError> {
    check_channels(p, sq.f1.inputs(), "region_squeeze")?;
    Ok(squeeze_cached(p, sq).0)
}

/// Shared perceptron `W1 relu(W0 x)` over pooled squeezed maps.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionAttention {
    pub w0: Linear,
    pub w1: Linear,
}

impl RegionAttention {
    /// `zero_output` zeroes the last layer so every weight starts at 0.5.
    pub fn new<R: Rng + ?Sized>(regions: usize, reduction: usize, zero_output: bool, rng: &mut R) -> Self {
        let hidden = regions.div_ceil(reduction.max(1));
        let w0 = Linear::new(regions, hidden, rng);
        let w1 = if zero_output {
            Linear::zeros(hidden, regions)
        } else {
            Linear::new(hidden, regions, rng)
        };
        Self { w0, w1 }
    }

    pub fn regions(&self) -> usize {
        self.w0.inputs()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w0: self.w0.zeros_like(),
            w1: self.w1.zeros_like(),
        }
    }

    fn mlp(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut hidden = self.w0.forward(x);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let out = self.w1.forward(&hidden);
        (hidden, out)
    }

    fn mlp_backward(&self, x: &[f64], hidden: &[f64], dout: &[f64], grad: &mut RegionAttention) -> Vec<f64> {
        let mut dh = self.w1.backward(hidden, dout, &mut grad.w1);
        for (g, &h) in dh.iter_mut().zip(hidden) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        self.w0.backward(x, &dh, &mut grad.w0)
    }
}

pub(crate) struct AttentionCache {
    avg: Vec<f64>,
    max: Vec<f64>,
    max_idx: Vec<usize>,
    hidden_avg: Vec<f64>,
    hidden_max: Vec<f64>,
    alpha: Vec<f64>,
}

pub(crate) fn attention_cached(psi: &FeatureMap, att: &RegionAttention) -> (Vec<f64>, AttentionCache) {
    let area = psi.area();
    let mut avg = Vec::with_capacity(psi.channels);
    let mut max = Vec::with_capacity(psi.channels);
    let mut max_idx = Vec::with_capacity(psi.channels);
    for k in 0..psi.channels {
        let ch = psi.channel(k);
        avg.push(ch.iter().sum::<f64>() / area as f64);
        let (i, m) = ch
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        max.push(m);
        max_idx.push(i);
    }
    let (hidden_avg, out_avg) = att.mlp(&avg);
    let (hidden_max, out_max) = att.mlp(&max);
    let alpha: Vec<f64> = out_avg.iter().zip(&out_max).map(|(a, b)| math::sigmoid(a + b)).collect();
    (
        alpha.clone(),
        AttentionCache {
            avg,
            max,
            max_idx,
            hidden_avg,
            hidden_max,
            alpha,
        },
    )
}

/// Returns the gradient w.r.t. psi (one channel per region).
pub(crate) fn attention_backward(att: &RegionAttention, cache: &AttentionCache, dalpha: &[f64], grad: &mut RegionAttention, height: usize, width: usize) -> FeatureMap {
    let ds: Vec<f64> = dalpha.iter().zip(&cache.alpha).map(|(g, a)| g * a * (1.0 - a)).collect();
    let davg = att.mlp_backward(&cache.avg, &cache.hidden_avg, &ds, grad);
    let dmax = att.mlp_backward(&cache.max, &cache.hidden_max, &ds, grad);
    let regions = dalpha.len();
    let area = height * width;
    let mut dpsi = FeatureMap::zeros(regions, height, width);
    for k in 0..regions {
        let g = davg[k] / area as f64;
        dpsi.data[k * area..(k + 1) * area].iter_mut().for_each(|v| *v = g);
        dpsi.data[k * area + cache.max_idx[k]] += dmax[k];
    }
    dpsi
}

/// `alpha = sigmoid(MLP(avgpool(psi)) + MLP(maxpool(psi)))`, one weight per
/// channel of `psi`.
pub fn region_attention(psi: &FeatureMap, att: &RegionAttention) -> Result<Vec<f64>, NnError> {
    check_channels(psi, att.regions(), "region_attention")?;
    Ok(attention_cached(psi, att).0)
}

/// `f_k = alpha_k * spatial mean of p_k`.
pub fn weight_regions(p: &[FeatureMap], alpha: &[f64]) -> Result<Vec<Vec<f64>>, NnError> {
    if p.len() != alpha.len() {
        return Err(NnError::ShapeMismatch {
            context: "weight_regions",
            expected: p.len(),
            found: alpha.len(),
        });
    }
    Ok(p
        .iter()
        .zip(alpha)
        .map(|(map, &a)| map.spatial_mean().into_iter().map(|v| a * v).collect())
        .collect())
}

/// Everything the attention stage produced for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    /// `mu_k`, one single-channel map per region.
    pub squeezed: Vec<FeatureMap>,
    /// The squeezed maps stacked along the channel axis.
    pub psi: FeatureMap,
    pub alpha: Vec<f64>,
    pub weighted: Vec<Vec<f64>>,
}

/// Stacks single-channel maps into one map with a channel per input.
pub(crate) fn stack_squeezed(maps: &[FeatureMap]) -> FeatureMap {
    let (h, w) = (maps[0].height, maps[0].width);
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        data.extend_from_slice(&m.data);
    }
    FeatureMap::from_vec(maps.len(), h, w, data)
}
