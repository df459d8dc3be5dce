//! In-memory rasters: `f64` planes for intensities and flow components,
//! 8-bit colour images for frames that get occluded and written back out.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Single-channel `f64` grid stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// Panics when `data.len() != width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "plane data length");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Value at integer coordinates, clamped to the border.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear interpolation at real coordinates with replicated borders.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x0 = math::floor(x);
        let y0 = math::floor(y);
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let a = self.get_clamped(xi, yi);
        let b = self.get_clamped(xi + 1, yi);
        let c = self.get_clamped(xi, yi + 1);
        let d = self.get_clamped(xi + 1, yi + 1);
        (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
    }

    /// Copies the window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Plane {
        assert!(x0 + width <= self.width && y0 + height <= self.height, "crop window out of bounds");
        Plane::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y))
    }

    /// Bilinear resize with pixel-centre alignment; resizing to the same size
    /// returns an identical plane.
    pub fn resize(&self, width: usize, height: usize) -> Plane {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Plane::from_fn(width, height, |x, y| {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
            let src_y = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            self.sample(src_x, src_y)
        })
    }

    /// Rotates about the image centre by `degrees`, counter-clockwise as
    /// displayed (y axis pointing down). Bilinear, borders replicated.
    pub fn rotate(&self, degrees: f64) -> Plane {
        if degrees == 0.0 {
            return self.clone();
        }
        let theta = degrees.to_radians();
        let (s, c) = (math::sin(theta), math::cos(theta));
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        Plane::from_fn(self.width, self.height, |x, y| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // Inverse of the displayed counter-clockwise rotation.
            let src_x = c * dx - s * dy + cx;
            let src_y = s * dx + c * dy + cy;
            self.sample(src_x, src_y)
        })
    }

    pub fn scaled(&self, factor: f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Separable Gaussian blur with a kernel truncated at 3 sigma.
    pub fn gaussian_blur(&self, sigma: f64) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (math::floor(3.0 * sigma) as isize).max(1);
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
            .collect();
        let sum: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);
        let horizontal = Plane::from_fn(self.width, self.height, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * self.get_clamped(x as isize + i as isize - radius, y as isize))
                .sum()
        });
        Plane::from_fn(self.width, self.height, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * horizontal.get_clamped(x as isize, y as isize + i as isize - radius))
                .sum()
        })
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self { x, y, width, height }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.width && y < self.y + self.height
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.width <= self.x + self.width
            && other.y + other.height <= self.y + self.height
    }
}

/// 8-bit RGB frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    /// ITU-R BT.601 luma in `[0, 255]`.
    pub fn to_luma(&self) -> Plane {
        Plane::from_fn(self.width, self.height, |x, y| {
            let [r, g, b] = self.get(x, y);
            0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)
        })
    }
}

/// 8-bit RGBA image, straight (non-premultiplied) alpha.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbaImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 4]>,
}

impl RgbaImage {
    pub fn filled(width: usize, height: usize, rgba: [u8; 4]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgba; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 4] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgba: [u8; 4]) {
        self.pixels[y * self.width + x] = rgba;
    }

    /// Bilinear sample of all four channels; zero outside the image.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 4] {
        let x0 = math::floor(x);
        let y0 = math::floor(y);
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let px = |xx: isize, yy: isize| -> [f64; 4] {
            if xx < 0 || yy < 0 || xx >= self.width as isize || yy >= self.height as isize {
                [0.0; 4]
            } else {
                self.get(xx as usize, yy as usize).map(f64::from)
            }
        };
        let (a, b, c, d) = (px(xi, yi), px(xi + 1, yi), px(xi, yi + 1), px(xi + 1, yi + 1));
        let mut out = [0.0; 4];
        for ch in 0..4 {
            out[ch] = (1.0 - fy) * ((1.0 - fx) * a[ch] + fx * b[ch]) + fy * ((1.0 - fx) * c[ch] + fx * d[ch]);
        }
        out
    }
}
