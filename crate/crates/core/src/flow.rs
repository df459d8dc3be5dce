//! Dense optical flow between onset and apex frames, and the six
//! fixed-position region crops fed to the network.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::image::{Plane, Rect};
use crate::math;

/// Number of regions per sample: the full face plus five crops.
pub const REGIONS: usize = 6;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("onset is {0}x{1} but apex is {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("flow estimator failed: {0}")]
    EstimatorFailure(String),
    #[error("flow field {0}x{1} is smaller than the 8x8 minimum")]
    FlowTooSmall(usize, usize),
    #[error("region stack must hold {REGIONS} square {0}x{0} grids per component")]
    BadStack(usize),
}

/// Horizontal (`u`) and vertical (`v`) displacement in pixels. A point at
/// `x` in the onset frame is found at `x + (u, v)` in the apex frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: Plane,
    pub v: Plane,
}

impl FlowField {
    pub fn new(u: Plane, v: Plane) -> Result<Self, FlowError> {
        if u.width() != v.width() || u.height() != v.height() {
            return Err(FlowError::SizeMismatch(u.width(), u.height(), v.width(), v.height()));
        }
        Ok(Self { u, v })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            u: Plane::zeros(width, height),
            v: Plane::zeros(width, height),
        }
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            u: self.u.scaled(factor),
            v: self.v.scaled(factor),
        }
    }
}

/// Anything that turns two same-sized grayscale frames into a dense flow.
pub trait FlowEstimator {
    fn estimate(&self, onset: &Plane, apex: &Plane) -> Result<FlowField, FlowError>;
}

/// Runs `estimator` and checks its output against the frame geometry.
pub fn compute_flow(onset: &Plane, apex: &Plane, estimator: &dyn FlowEstimator) -> Result<FlowField, FlowError> {
    if onset.width() != apex.width() || onset.height() != apex.height() {
        return Err(FlowError::SizeMismatch(onset.width(), onset.height(), apex.width(), apex.height()));
    }
    let flow = estimator.estimate(onset, apex)?;
    if flow.width() != onset.width() || flow.height() != onset.height() {
        return Err(FlowError::EstimatorFailure("output size differs from the input frames".into()));
    }
    if !flow.u.is_finite() || !flow.v.is_finite() {
        return Err(FlowError::EstimatorFailure("non-finite displacement".into()));
    }
    Ok(flow)
}

/// Duality-based TV-L1 flow with coarse-to-fine warping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvL1 {
    /// Dual step size.
    pub tau: f64,
    /// Data term weight.
    pub lambda: f64,
    /// Coupling between the primal and auxiliary variables.
    pub theta: f64,
    /// Upper bound on pyramid levels; fewer are used for small frames.
    pub scales: usize,
    /// Smallest side allowed at the coarsest level.
    pub min_size: usize,
    pub warps: usize,
    /// Stopping threshold on the RMS update.
    pub epsilon: f64,
    pub max_iterations: usize,
}

impl Default for TvL1 {
    fn default() -> Self {
        Self {
            tau: 0.25,
            lambda: 0.15,
            theta: 0.3,
            scales: 5,
            min_size: 16,
            warps: 5,
            epsilon: 0.01,
            max_iterations: 300,
        }
    }
}

const PRESMOOTHING_SIGMA: f64 = 0.8;
const GRAD_IS_ZERO: f64 = 1e-10;

impl TvL1 {
    /// Cheaper settings for small synthetic frames.
    pub fn fast() -> Self {
        Self {
            scales: 3,
            min_size: 8,
            warps: 3,
            max_iterations: 60,
            ..Self::default()
        }
    }

    fn solve_level(&self, i0: &Plane, i1: &Plane, u1: &mut Plane, u2: &mut Plane) {
        let (w, h) = (i0.width(), i0.height());
        let n = w * h;
        let l_t = self.lambda * self.theta;
        let taut = self.tau / self.theta;
        let (i1x, i1y) = centered_gradient(i1);
        let mut p11 = vec![0.0; n];
        let mut p12 = vec![0.0; n];
        let mut p21 = vec![0.0; n];
        let mut p22 = vec![0.0; n];
        let mut v1 = vec![0.0; n];
        let mut v2 = vec![0.0; n];
        for _ in 0..self.warps {
            let mut i1w = vec![0.0; n];
            let mut i1wx = vec![0.0; n];
            let mut i1wy = vec![0.0; n];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let (sx, sy) = (x as f64 + u1.data()[p], y as f64 + u2.data()[p]);
                    i1w[p] = i1.sample(sx, sy);
                    i1wx[p] = i1x.sample(sx, sy);
                    i1wy[p] = i1y.sample(sx, sy);
                }
            }
            let grad: Vec<f64> = (0..n).map(|p| i1wx[p] * i1wx[p] + i1wy[p] * i1wy[p]).collect();
            let rho_c: Vec<f64> = (0..n)
                .map(|p| i1w[p] - i1wx[p] * u1.data()[p] - i1wy[p] * u2.data()[p] - i0.data()[p])
                .collect();

            let mut iteration = 0;
            let mut error = f64::INFINITY;
            while error > self.epsilon * self.epsilon && iteration < self.max_iterations {
                iteration += 1;
                {
                    let (u1d, u2d) = (u1.data(), u2.data());
                    for p in 0..n {
                        let rho = rho_c[p] + i1wx[p] * u1d[p] + i1wy[p] * u2d[p];
                        let (d1, d2) = if rho < -l_t * grad[p] {
                            (l_t * i1wx[p], l_t * i1wy[p])
                        } else if rho > l_t * grad[p] {
                            (-l_t * i1wx[p], -l_t * i1wy[p])
                        } else if grad[p] < GRAD_IS_ZERO {
                            (0.0, 0.0)
                        } else {
                            let fi = -rho / grad[p];
                            (fi * i1wx[p], fi * i1wy[p])
                        };
                        v1[p] = u1d[p] + d1;
                        v2[p] = u2d[p] + d2;
                    }
                }
                let div1 = divergence(&p11, &p12, w, h);
                let div2 = divergence(&p21, &p22, w, h);
                error = 0.0;
                {
                    let (u1d, u2d) = (u1.data_mut(), u2.data_mut());
                    for p in 0..n {
                        let old1 = u1d[p];
                        let old2 = u2d[p];
                        u1d[p] = v1[p] + self.theta * div1[p];
                        u2d[p] = v2[p] + self.theta * div2[p];
                        error += (u1d[p] - old1) * (u1d[p] - old1) + (u2d[p] - old2) * (u2d[p] - old2);
                    }
                }
                error /= n as f64;
                let (u1x, u1y) = forward_gradient(u1.data(), w, h);
                let (u2x, u2y) = forward_gradient(u2.data(), w, h);
                for p in 0..n {
                    let ng1 = 1.0 + taut * math::sqrt(u1x[p] * u1x[p] + u1y[p] * u1y[p]);
                    let ng2 = 1.0 + taut * math::sqrt(u2x[p] * u2x[p] + u2y[p] * u2y[p]);
                    p11[p] = (p11[p] + taut * u1x[p]) / ng1;
                    p12[p] = (p12[p] + taut * u1y[p]) / ng1;
                    p21[p] = (p21[p] + taut * u2x[p]) / ng2;
                    p22[p] = (p22[p] + taut * u2y[p]) / ng2;
                }
            }
        }
    }
}

impl FlowEstimator for TvL1 {
    fn estimate(&self, onset: &Plane, apex: &Plane) -> Result<FlowField, FlowError> {
        if onset.width() != apex.width() || onset.height() != apex.height() {
            return Err(FlowError::SizeMismatch(onset.width(), onset.height(), apex.width(), apex.height()));
        }
        let (w, h) = (onset.width(), onset.height());
        if w < 2 || h < 2 {
            return Err(FlowError::EstimatorFailure("frames smaller than 2x2".into()));
        }
        if !onset.is_finite() || !apex.is_finite() {
            return Err(FlowError::EstimatorFailure("non-finite intensities".into()));
        }
        let (i0, i1) = normalize_pair(onset, apex);

        let mut levels = vec![(i0.gaussian_blur(PRESMOOTHING_SIGMA), i1.gaussian_blur(PRESMOOTHING_SIGMA))];
        let zoom = 0.5_f64;
        let sigma = 0.6 * math::sqrt(1.0 / (zoom * zoom) - 1.0);
        while levels.len() < self.scales.max(1) {
            let (a, b) = levels.last().expect("non-empty pyramid");
            let nw = (a.width() + 1) / 2;
            let nh = (a.height() + 1) / 2;
            if nw < self.min_size || nh < self.min_size {
                break;
            }
            let next = (a.gaussian_blur(sigma).resize(nw, nh), b.gaussian_blur(sigma).resize(nw, nh));
            levels.push(next);
        }

        let (cw, ch) = (levels.last().unwrap().0.width(), levels.last().unwrap().0.height());
        let mut u1 = Plane::zeros(cw, ch);
        let mut u2 = Plane::zeros(cw, ch);
        for level in (0..levels.len()).rev() {
            let (a, b) = &levels[level];
            if u1.width() != a.width() || u1.height() != a.height() {
                let fx = a.width() as f64 / u1.width() as f64;
                let fy = a.height() as f64 / u1.height() as f64;
                u1 = u1.resize(a.width(), a.height()).scaled(fx);
                u2 = u2.resize(a.width(), a.height()).scaled(fy);
            }
            self.solve_level(a, b, &mut u1, &mut u2);
        }
        let flow = FlowField::new(u1, u2)?;
        if !flow.u.is_finite() || !flow.v.is_finite() {
            return Err(FlowError::EstimatorFailure("diverged".into()));
        }
        Ok(flow)
    }
}

/// Rescales both frames jointly to `[0, 255]`.
fn normalize_pair(a: &Plane, b: &Plane) -> (Plane, Plane) {
    let (lo, hi) = a
        .data()
        .iter()
        .chain(b.data())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo <= 0.0 {
        return (a.clone(), b.clone());
    }
    let scale = 255.0 / (hi - lo);
    let f = |p: &Plane| Plane::from_vec(p.width(), p.height(), p.data().iter().map(|v| (v - lo) * scale).collect());
    (f(a), f(b))
}

fn centered_gradient(img: &Plane) -> (Plane, Plane) {
    let gx = Plane::from_fn(img.width(), img.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        0.5 * (img.get_clamped(x + 1, y) - img.get_clamped(x - 1, y))
    });
    let gy = Plane::from_fn(img.width(), img.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        0.5 * (img.get_clamped(x, y + 1) - img.get_clamped(x, y - 1))
    });
    (gx, gy)
}

fn forward_gradient(f: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut fx = vec![0.0; w * h];
    let mut fy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                fx[p] = f[p + 1] - f[p];
            }
            if y + 1 < h {
                fy[p] = f[p + w] - f[p];
            }
        }
    }
    (fx, fy)
}

/// Negative adjoint of [`forward_gradient`].
fn divergence(v1: &[f64], v2: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut div = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let dx = if x == 0 {
                v1[p]
            } else if x + 1 == w {
                -v1[p - 1]
            } else {
                v1[p] - v1[p - 1]
            };
            let dy = if y == 0 {
                v2[p]
            } else if y + 1 == h {
                -v2[p - w]
            } else {
                v2[p] - v2[p - w]
            };
            div[p] = dx + dy;
        }
    }
    div
}

/// Where a crop window sits inside the face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anchor {
    Full,
    TopLeft,
    TopRight,
    CenterDown,
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionCropSpec {
    pub regions: [(Anchor, f64); REGIONS],
    /// Side length every crop is resized to.
    pub output_size: usize,
}

impl Default for RegionCropSpec {
    fn default() -> Self {
        Self::with_output_size(224)
    }
}

impl RegionCropSpec {
    pub fn with_output_size(output_size: usize) -> Self {
        Self {
            regions: [
                (Anchor::Full, 1.0),
                (Anchor::TopLeft, 0.75),
                (Anchor::TopRight, 0.75),
                (Anchor::CenterDown, 0.75),
                (Anchor::Center, 0.9),
                (Anchor::Center, 0.85),
            ],
            output_size,
        }
    }

    /// Crop windows for a `width x height` field, in region order.
    pub fn windows(&self, width: usize, height: usize) -> [Rect; REGIONS] {
        // The epsilon keeps products like 0.85 * 200 from flooring to 169.
        let side = |ratio: f64, n: usize| (math::floor(ratio * n as f64 + 1e-9) as usize).clamp(1, n);
        self.regions.map(|(anchor, ratio)| {
            let (w, h) = (side(ratio, width), side(ratio, height));
            let (x, y) = match anchor {
                Anchor::Full | Anchor::TopLeft => (0, 0),
                Anchor::TopRight => (width - w, 0),
                Anchor::CenterDown => ((width - w) / 2, height - h),
                Anchor::Center => ((width - w) / 2, (height - h) / 2),
            };
            Rect::new(x, y, w, h)
        })
    }
}

/// The network input for one sample: per region, the vertical and the
/// horizontal flow component, all `size x size`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionStack {
    pub vertical: Vec<Plane>,
    pub horizontal: Vec<Plane>,
}

impl RegionStack {
    pub fn new(vertical: Vec<Plane>, horizontal: Vec<Plane>) -> Result<Self, FlowError> {
        let size = vertical.first().map_or(0, Plane::width);
        let ok = vertical.len() == REGIONS
            && horizontal.len() == REGIONS
            && size > 0
            && vertical
                .iter()
                .chain(&horizontal)
                .all(|p| p.width() == size && p.height() == size);
        if !ok {
            return Err(FlowError::BadStack(size));
        }
        Ok(Self { vertical, horizontal })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            vertical: vec![Plane::zeros(size, size); REGIONS],
            horizontal: vec![Plane::zeros(size, size); REGIONS],
        }
    }

    pub fn size(&self) -> usize {
        self.vertical[0].width()
    }

    pub fn is_finite(&self) -> bool {
        self.vertical.iter().chain(&self.horizontal).all(Plane::is_finite)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            vertical: self.vertical.iter().map(|p| p.scaled(factor)).collect(),
            horizontal: self.horizontal.iter().map(|p| p.scaled(factor)).collect(),
        }
    }
}

/// Crops the six regions out of `flow` and resizes each to the output size.
pub fn crop_regions(flow: &FlowField, spec: &RegionCropSpec) -> Result<RegionStack, FlowError> {
    let (w, h) = (flow.width(), flow.height());
    if w < 8 || h < 8 {
        return Err(FlowError::FlowTooSmall(w, h));
    }
    let s = spec.output_size;
    let cut = |plane: &Plane| -> Vec<Plane> {
        spec.windows(w, h)
            .iter()
            .map(|r| plane.crop(r.x, r.y, r.width, r.height).resize(s, s))
            .collect()
    };
    Ok(RegionStack {
        vertical: cut(&flow.v),
        horizontal: cut(&flow.u),
    })
}

/// Running sums for [`FlowStats`], so statistics can be fitted one stack at
/// a time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlowMoments {
    acc: [(f64, f64, usize); 2],
}

impl FlowMoments {
    pub fn add(&mut self, stack: &RegionStack) {
        for (slot, planes) in [&stack.vertical, &stack.horizontal].into_iter().enumerate() {
            for p in planes {
                for &v in p.data() {
                    self.acc[slot].0 += v;
                    self.acc[slot].1 += v * v;
                    self.acc[slot].2 += 1;
                }
            }
        }
    }

    /// Mean and population std per component; a constant component gets
    /// std 1.
    pub fn finish(&self) -> FlowStats {
        let moments = |(sum, sq, n): (f64, f64, usize)| {
            if n == 0 {
                return (0.0, 1.0);
            }
            let mean = sum / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            let std = math::sqrt(var);
            (mean, if std > 1e-12 { std } else { 1.0 })
        };
        let (vertical_mean, vertical_std) = moments(self.acc[0]);
        let (horizontal_mean, horizontal_std) = moments(self.acc[1]);
        FlowStats {
            vertical_mean,
            vertical_std,
            horizontal_mean,
            horizontal_std,
        }
    }
}

/// Per-component standardization statistics, fitted on training stacks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub vertical_mean: f64,
    pub vertical_std: f64,
    pub horizontal_mean: f64,
    pub horizontal_std: f64,
}

impl Default for FlowStats {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl FlowStats {
    pub const IDENTITY: FlowStats = FlowStats {
        vertical_mean: 0.0,
        vertical_std: 1.0,
        horizontal_mean: 0.0,
        horizontal_std: 1.0,
    };

    pub fn fit<'a>(stacks: impl IntoIterator<Item = &'a RegionStack>) -> Self {
        let mut moments = FlowMoments::default();
        stacks.into_iter().for_each(|s| moments.add(s));
        moments.finish()
    }

    pub fn apply(&self, stack: &RegionStack) -> RegionStack {
        if *self == Self::IDENTITY {
            return stack.clone();
        }
        let norm = |p: &Plane, mean: f64, std: f64| {
            Plane::from_vec(p.width(), p.height(), p.data().iter().map(|v| (v - mean) / std).collect())
        };
        RegionStack {
            vertical: stack
                .vertical
                .iter()
                .map(|p| norm(p, self.vertical_mean, self.vertical_std))
                .collect(),
            horizontal: stack
                .horizontal
                .iter()
                .map(|p| norm(p, self.horizontal_mean, self.horizontal_std))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_window_sizes_for_224() {
        let spec = RegionCropSpec::default();
        let sides: Vec<usize> = spec.windows(224, 224).iter().map(|r| r.width).collect();
        assert_eq!(sides, [224, 168, 168, 168, 201, 190]);
    }

    #[test]
    fn crop_anchor_geometry() {
        let w = RegionCropSpec::default().windows(100, 80);
        assert_eq!(w[0], Rect::new(0, 0, 100, 80));
        assert_eq!(w[1], Rect::new(0, 0, 75, 60));
        assert_eq!(w[2], Rect::new(25, 0, 75, 60));
        assert_eq!(w[3], Rect::new(12, 20, 75, 60));
        assert_eq!(w[4], Rect::new(5, 4, 90, 72));
        assert_eq!(w[5], Rect::new(7, 6, 85, 68));
    }

    #[test]
    fn too_small_flow() {
        let flow = FlowField::zeros(7, 20);
        assert_eq!(
            crop_regions(&flow, &RegionCropSpec::with_output_size(8)),
            Err(FlowError::FlowTooSmall(7, 20))
        );
    }

    #[test]
    fn full_region_is_identity_at_output_size() {
        let u = Plane::from_fn(16, 16, |x, y| (x * y) as f64);
        let v = Plane::from_fn(16, 16, |x, y| x as f64 - y as f64);
        let flow = FlowField::new(u.clone(), v.clone()).unwrap();
        let stack = crop_regions(&flow, &RegionCropSpec::with_output_size(16)).unwrap();
        assert_eq!(stack.horizontal[0], u);
        assert_eq!(stack.vertical[0], v);
        assert_eq!(stack.horizontal[1].get(0, 0), u.get(0, 0));
    }

    #[test]
    fn size_mismatch() {
        let a = Plane::zeros(8, 8);
        let b = Plane::zeros(9, 8);
        assert!(matches!(compute_flow(&a, &b, &TvL1::default()), Err(FlowError::SizeMismatch(..))));
    }

    #[test]
    fn stats_standardize() {
        let stack = RegionStack {
            vertical: vec![Plane::from_fn(4, 4, |x, _| x as f64); REGIONS],
            horizontal: vec![Plane::from_fn(4, 4, |_, y| 2.0 * y as f64 + 1.0); REGIONS],
        };
        let stats = FlowStats::fit([&stack]);
        let fitted = FlowStats::fit([&stats.apply(&stack)]);
        assert!(fitted.vertical_mean.abs() < 1e-12 && (fitted.vertical_std - 1.0).abs() < 1e-12);
        assert!(fitted.horizontal_mean.abs() < 1e-12 && (fitted.horizontal_std - 1.0).abs() < 1e-12);
    }
}
