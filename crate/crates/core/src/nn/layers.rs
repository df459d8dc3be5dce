//! Convolution, affine and pooling layers with explicit backward passes.
//!
//! Gradients are accumulated into a second instance of the same layer that
//! serves as the gradient buffer.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::tensor::{FeatureMap, Tensor};
use crate::math;

/// Output positions `o` in `0..out_len` for which `o * stride + offset - pad`
/// lands inside `0..in_len`.
#[inline]
fn valid_range(offset: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // o * stride + offset >= pad
    let lo = if offset >= pad { 0 } else { (pad - offset + stride - 1) / stride };
    // o * stride + offset - pad <= in_len - 1
    let limit = in_len + pad;
    let hi = if offset >= limit { 0 } else { ((limit - offset - 1) / stride + 1).min(out_len) };
    (lo.min(hi), hi)
}

pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = (inputs * kernel * kernel) as f64;
        Self {
            weight: Tensor::uniform(&[outputs, inputs, kernel, kernel], math::sqrt(6.0 / fan_in), rng),
            bias: Tensor::zeros(&[outputs]),
            stride,
            pad,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    pub fn out_size(&self, height: usize, width: usize) -> (usize, usize) {
        let k = self.kernel();
        (conv_out_len(height, k, self.stride, self.pad), conv_out_len(width, k, self.stride, self.pad))
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels, self.inputs(), "conv input channels");
        let (cin, cout, k, s, p) = (self.inputs(), self.outputs(), self.kernel(), self.stride, self.pad);
        let (oh, ow) = self.out_size(x.height, x.width);
        let (h, w) = (x.height, x.width);
        let mut y = FeatureMap::zeros(cout, oh, ow);
        for oc in 0..cout {
            let out = &mut y.data[oc * oh * ow..(oc + 1) * oh * ow];
            out.iter_mut().for_each(|v| *v = self.bias.data[oc]);
            for ic in 0..cin {
                let xin = &x.data[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ky, p, s, h, oh);
                    for kx in 0..k {
                        let wv = self.weight.data[((oc * cin + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(kx, p, s, w, ow);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let row = &xin[iy * w..(iy + 1) * w];
                            let orow = &mut out[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient when `need_input_grad`.
    pub fn backward(&self, x: &FeatureMap, dy: &FeatureMap, grad: &mut Conv2d, need_input_grad: bool) -> Option<FeatureMap> {
        let (cin, cout, k, s, p) = (self.inputs(), self.outputs(), self.kernel(), self.stride, self.pad);
        let (h, w) = (x.height, x.width);
        let (oh, ow) = (dy.height, dy.width);
        let mut dx = need_input_grad.then(|| FeatureMap::zeros(cin, h, w));
        for oc in 0..cout {
            let g = &dy.data[oc * oh * ow..(oc + 1) * oh * ow];
            grad.bias.data[oc] += g.iter().sum::<f64>();
            for ic in 0..cin {
                let xin = &x.data[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ky, p, s, h, oh);
                    for kx in 0..k {
                        let widx = ((oc * cin + ic) * k + ky) * k + kx;
                        let wv = self.weight.data[widx];
                        let (ox0, ox1) = valid_range(kx, p, s, w, ow);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let row = &xin[iy * w..(iy + 1) * w];
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * row[ox * s + kx - p];
                            }
                        }
                        grad.weight.data[widx] += acc;
                        if let Some(dx) = dx.as_mut() {
                            if wv == 0.0 {
                                continue;
                            }
                            let din = &mut dx.data[ic * h * w..(ic + 1) * h * w];
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - p;
                                let grow = &g[oy * ow..(oy + 1) * ow];
                                for ox in ox0..ox1 {
                                    din[iy * w + ox * s + kx - p] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Affine map `y = W x + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::uniform(&[outputs, inputs], 1.0 / math::sqrt(inputs as f64), rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n = self.inputs();
        assert_eq!(x.len(), n, "linear input size");
        (0..self.outputs())
            .map(|o| {
                let row = &self.weight.data[o * n..(o + 1) * n];
                self.bias.data[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let n = self.inputs();
        let mut dx = vec![0.0; n];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias.data[o] += g;
            let row = &self.weight.data[o * n..(o + 1) * n];
            let grow = &mut grad.weight.data[o * n..(o + 1) * n];
            for i in 0..n {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.outputs())
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool2d {
    /// Output and, per output element, the flat input index of the maximum.
    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let oh = conv_out_len(x.height, k, s, p);
        let ow = conv_out_len(x.width, k, s, p);
        let mut y = FeatureMap::zeros(x.channels, oh, ow);
        let mut arg = vec![0; x.channels * oh * ow];
        for c in 0..x.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            let idx = (c * x.height + iy as usize) * x.width + ix as usize;
                            if x.data[idx] > best || best_idx == usize::MAX {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (c * oh + oy) * ow + ox;
                    y.data[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
        (y, arg)
    }
}

pub(crate) fn relu_in_place(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` where the ReLU output was not positive.
pub(crate) fn relu_backward(out: &FeatureMap, dy: &mut FeatureMap) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Two 3x3 convolutions with an identity or 1x1 projection shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub downsample: Option<Conv2d>,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, stride: usize, rng: &mut R) -> Self {
        let downsample = (stride != 1 || inputs != outputs).then(|| Conv2d::new(inputs, outputs, 1, stride, 0, rng));
        Self {
            conv1: Conv2d::new(inputs, outputs, 3, stride, 1, rng),
            conv2: Conv2d::new(outputs, outputs, 3, 1, 1, rng),
            downsample,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            downsample: self.downsample.as_ref().map(Conv2d::zeros_like),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool(MaxPool2d),
    Block(Box<BasicBlock>),
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum LayerCache {
    Conv { input: FeatureMap },
    Relu { output: FeatureMap },
    MaxPool { input_len: usize, argmax: Vec<usize> },
    Block { input: FeatureMap, hidden: FeatureMap, output: FeatureMap },
}

impl Layer {
    fn forward(&self, x: FeatureMap) -> (FeatureMap, LayerCache) {
        match self {
            Layer::Conv(conv) => {
                let y = conv.forward(&x);
                (y, LayerCache::Conv { input: x })
            }
            Layer::Relu => {
                let mut y = x;
                relu_in_place(&mut y);
                (y.clone(), LayerCache::Relu { output: y })
            }
            Layer::MaxPool(pool) => {
                let (y, argmax) = pool.forward(&x);
                (y, LayerCache::MaxPool { input_len: x.data.len(), argmax })
            }
            Layer::Block(block) => {
                let mut hidden = block.conv1.forward(&x);
                relu_in_place(&mut hidden);
                let mut out = block.conv2.forward(&hidden);
                match &block.downsample {
                    Some(ds) => out.add_assign(&ds.forward(&x)),
                    None => out.add_assign(&x),
                }
                relu_in_place(&mut out);
                (out.clone(), LayerCache::Block { input: x, hidden, output: out })
            }
        }
    }

    fn backward(&self, cache: &LayerCache, dy: FeatureMap, grad: &mut Layer, in_shape: (usize, usize, usize), need_input_grad: bool) -> Option<FeatureMap> {
        match (self, cache, grad) {
            (Layer::Conv(conv), LayerCache::Conv { input }, Layer::Conv(g)) => conv.backward(input, &dy, g, need_input_grad),
            (Layer::Relu, LayerCache::Relu { output }, Layer::Relu) => {
                let mut dy = dy;
                relu_backward(output, &mut dy);
                Some(dy)
            }
            (Layer::MaxPool(_), LayerCache::MaxPool { input_len, argmax }, Layer::MaxPool(_)) => {
                let (c, h, w) = in_shape;
                let mut dx = vec![0.0; *input_len];
                for (o, &i) in argmax.iter().enumerate() {
                    dx[i] += dy.data[o];
                }
                Some(FeatureMap::from_vec(c, h, w, dx))
            }
            (Layer::Block(block), LayerCache::Block { input, hidden, output }, Layer::Block(g)) => {
                let mut d = dy;
                relu_backward(output, &mut d);
                let mut dh = block.conv2.backward(hidden, &d, &mut g.conv2, true).expect("input grad requested");
                relu_backward(hidden, &mut dh);
                let dx1 = block.conv1.backward(input, &dh, &mut g.conv1, need_input_grad);
                let dx2 = match (&block.downsample, g.downsample.as_mut()) {
                    (Some(ds), Some(gds)) => ds.backward(input, &d, gds, need_input_grad),
                    _ => need_input_grad.then_some(d),
                };
                match (dx1, dx2) {
                    (Some(mut a), Some(b)) => {
                        a.add_assign(&b);
                        Some(a)
                    }
                    _ => None,
                }
            }
            _ => panic!("layer, cache and gradient buffer disagree"),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Layer::Conv(c) => Layer::Conv(c.zeros_like()),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool(p) => Layer::MaxPool(*p),
            Layer::Block(b) => Layer::Block(Box::new(b.zeros_like())),
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            Layer::Conv(c) => c.tensors(),
            Layer::Relu | Layer::MaxPool(_) => Vec::new(),
            Layer::Block(b) => {
                let mut out: Vec<(String, &Tensor)> = Vec::new();
                out.extend(b.conv1.tensors().into_iter().map(|(n, t)| (format!("conv1.{n}"), t)));
                out.extend(b.conv2.tensors().into_iter().map(|(n, t)| (format!("conv2.{n}"), t)));
                if let Some(ds) = &b.downsample {
                    out.extend(ds.tensors().into_iter().map(|(n, t)| (format!("downsample.{n}"), t)));
                }
                out
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv(c) => c.tensors_mut(),
            Layer::Relu | Layer::MaxPool(_) => Vec::new(),
            Layer::Block(b) => {
                let b = &mut **b;
                let mut out = b.conv1.tensors_mut();
                out.extend(b.conv2.tensors_mut());
                if let Some(ds) = b.downsample.as_mut() {
                    out.extend(ds.tensors_mut());
                }
                out
            }
        }
    }
}

/// A feed-forward stack of layers; one per flow component.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub layers: Vec<Layer>,
}

pub(crate) struct StreamCache {
    caches: Vec<LayerCache>,
    shapes: Vec<(usize, usize, usize)>,
}

impl Stream {
    pub fn forward(&self, x: FeatureMap) -> FeatureMap {
        self.forward_cached(x).0
    }

    pub(crate) fn forward_cached(&self, x: FeatureMap) -> (FeatureMap, StreamCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            shapes.push((h.channels, h.height, h.width));
            let (y, cache) = layer.forward(h);
            caches.push(cache);
            h = y;
        }
        (h, StreamCache { caches, shapes })
    }

    /// Backpropagates to the parameters; the input gradient is not needed.
    pub(crate) fn backward(&self, cache: &StreamCache, dy: FeatureMap, grad: &mut Stream) {
        let mut d = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            match layer.backward(&cache.caches[i], d, &mut grad.layers[i], cache.shapes[i], i > 0) {
                Some(next) => d = next,
                None => return,
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.tensors().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::tensors_mut).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let (oh, ow) = conv.out_size(x.height, x.width);
        let k = conv.kernel();
        let mut y = FeatureMap::zeros(conv.outputs(), oh, ow);
        for oc in 0..conv.outputs() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias.data[oc];
                    for ic in 0..conv.inputs() {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                    acc += conv.weight.data[((oc * conv.inputs() + ic) * k + ky) * k + kx]
                                        * x.at(ic, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    y.data[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for pad in 0..3 {
            for stride in 1..4 {
                for offset in 0..5 {
                    for in_len in 1..9 {
                        let out_len = 10;
                        let brute: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride + offset) as isize - pad as isize;
                                i >= 0 && (i as usize) < in_len
                            })
                            .collect();
                        let (lo, hi) = valid_range(offset, pad, stride, in_len, out_len);
                        assert_eq!((lo..hi).collect::<Vec<_>>(), brute, "pad {pad} stride {stride} off {offset} len {in_len}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (cin, cout, k, s, p, h, w) in [(2, 3, 3, 1, 1, 5, 6), (1, 4, 3, 2, 1, 7, 7), (3, 2, 7, 2, 3, 9, 8), (2, 2, 1, 2, 0, 6, 5)] {
            let mut conv = Conv2d::new(cin, cout, k, s, p, &mut rng);
            conv.bias = Tensor::uniform(&[cout], 0.5, &mut rng);
            let x = FeatureMap::from_vec(cin, h, w, (0..cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = FeatureMap::from_vec(2, 5, 5, (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (oh, ow) = conv.out_size(5, 5);
        let probe: Vec<f64> = (0..3 * oh * ow).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |c: &Conv2d, x: &FeatureMap| -> f64 { c.forward(x).data.iter().zip(&probe).map(|(a, b)| a * b).sum() };
        let mut grad = conv.zeros_like();
        let dx = conv
            .backward(&x, &FeatureMap::from_vec(3, oh, ow, probe.clone()), &mut grad, true)
            .unwrap();
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
        for i in 0..conv.weight.len() {
            let mut cp = conv.clone();
            cp.weight.data[i] += h;
            let mut cm = conv.clone();
            cm.weight.data[i] -= h;
            let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * h);
            assert!((fd - grad.weight.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn maxpool_picks_window_maximum() {
        let x = FeatureMap::from_vec(1, 4, 4, (0..16).map(|v| v as f64).collect());
        let (y, arg) = MaxPool2d { kernel: 3, stride: 2, pad: 1 }.forward(&x);
        assert_eq!((y.height, y.width), (2, 2));
        assert_eq!(y.data, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }

    #[test]
    fn linear_forward_backward() {
        let lin = Linear {
            weight: Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]),
            bias: Tensor::from_vec(&[2], vec![0.5, -0.5]),
        };
        assert_eq!(lin.forward(&[1.0, 1.0, 1.0]), vec![6.5, -1.0]);
        let mut g = lin.zeros_like();
        let dx = lin.backward(&[1.0, 2.0, 3.0], &[1.0, 2.0], &mut g);
        assert_eq!(dx, vec![-1.0, 3.0, 3.0]);
        assert_eq!(g.weight.data, vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert_eq!(g.bias.data, vec![1.0, 2.0]);
    }
}
