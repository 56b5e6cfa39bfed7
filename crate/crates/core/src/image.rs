//! Minimal float image type with the filters the front end needs.

use crate::dataset::ImageFrame;

#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_frame(frame: &ImageFrame) -> Self {
        Self {
            width: frame.width,
            height: frame.height,
            data: frame.pixels.iter().map(|&p| p as f32).collect(),
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    /// Bilinear sample with coordinates clamped to the image.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let xf = x.clamp(0.0, (self.width - 1) as f64);
        let yf = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (xf - x0 as f64) as f32;
        let ay = (yf - y0 as f64) as f32;
        let top = self.at(x0, y0) * (1.0 - ax) + self.at(x1, y0) * ax;
        let bottom = self.at(x0, y1) * (1.0 - ax) + self.at(x1, y1) * ax;
        top * (1.0 - ay) + bottom * ay
    }

    /// Bilinear samples at `(x + dx, y + dy)` for `dx, dy` in `-r..=r`,
    /// row-major into `out`. Windows fully inside the image share one set of
    /// interpolation weights.
    pub fn sample_window(&self, x: f64, y: f64, r: isize, out: &mut [f32]) {
        let side = (2 * r + 1) as usize;
        debug_assert!(out.len() >= side * side);
        let (fx, fy) = (x.floor(), y.floor());
        let inside = fx - r as f64 >= 0.0 && fy - r as f64 >= 0.0 && fx + (r + 1) as f64 <= (self.width - 1) as f64 && fy + (r + 1) as f64 <= (self.height - 1) as f64;
        if !inside {
            let mut k = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    out[k] = self.sample(x + dx as f64, y + dy as f64);
                    k += 1;
                }
            }
            return;
        }
        let ax = (x - fx) as f32;
        let ay = (y - fy) as f32;
        let x0 = fx as usize - r as usize;
        let y0 = fy as usize - r as usize;
        for row in 0..side {
            let top = &self.data[(y0 + row) * self.width + x0..][..side + 1];
            let bottom = &self.data[(y0 + row + 1) * self.width + x0..][..side + 1];
            let dst = &mut out[row * side..][..side];
            for c in 0..side {
                let t = top[c] * (1.0 - ax) + top[c + 1] * ax;
                let b = bottom[c] * (1.0 - ax) + bottom[c + 1] * ax;
                dst[c] = t * (1.0 - ay) + b * ay;
            }
        }
    }

    pub fn to_frame(&self, index: usize, timestamp: f64) -> ImageFrame {
        ImageFrame {
            index,
            timestamp,
            width: self.width,
            height: self.height,
            pixels: self
                .data
                .iter()
                .map(|v| v.round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }
}

/// Normalized 1D Gaussian kernel with radius ceil(3 sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable convolution with replicated borders.
pub fn convolve_separable(img: &FloatImage, kernel: &[f32]) -> FloatImage {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = FloatImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * img.at_clamped(x as isize + i as isize - r, y as isize);
            }
            tmp.data[y * w + x] = acc;
        }
    }
    let mut out = FloatImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * tmp.at_clamped(x as isize, y as isize + i as isize - r);
            }
            out.data[y * w + x] = acc;
        }
    }
    out
}

pub fn gaussian_blur(img: &FloatImage, sigma: f64) -> FloatImage {
    convolve_separable(img, &gaussian_kernel(sigma))
}

/// Central-difference gradients (replicated borders).
pub fn gradients(img: &FloatImage) -> (FloatImage, FloatImage) {
    let (w, h) = (img.width, img.height);
    let mut gx = FloatImage::new(w, h);
    let mut gy = FloatImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            gx.data[y * w + x] = 0.5 * (img.at_clamped(xi + 1, yi) - img.at_clamped(xi - 1, yi));
            gy.data[y * w + x] = 0.5 * (img.at_clamped(xi, yi + 1) - img.at_clamped(xi, yi - 1));
        }
    }
    (gx, gy)
}

/// Halves the resolution after a 5-tap binomial low-pass.
pub fn pyr_down(img: &FloatImage) -> FloatImage {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let smooth = convolve_separable(img, &K);
    let w = img.width.div_ceil(2).max(1);
    let h = img.height.div_ceil(2).max(1);
    FloatImage::from_fn(w, h, |x, y| smooth.at((2 * x).min(img.width - 1), (2 * y).min(img.height - 1)))
}

pub fn build_pyramid(img: &FloatImage, levels: usize) -> Vec<FloatImage> {
    let mut pyr = vec![img.clone()];
    for _ in 1..levels {
        let next = pyr_down(pyr.last().expect("non-empty"));
        pyr.push(next);
    }
    pyr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sums_to_one() {
        let k = gaussian_kernel(1.6);
        let s: f32 = k.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert_eq!(k.len(), 11);
    }

    #[test]
    fn blur_preserves_constant() {
        let img = FloatImage::from_fn(10, 8, |_, _| 42.0);
        let b = gaussian_blur(&img, 1.0);
        assert!(b.data.iter().all(|v| (v - 42.0).abs() < 1e-4));
    }

    #[test]
    fn bilinear_interpolates_ramp() {
        let img = FloatImage::from_fn(10, 10, |x, y| (x + 2 * y) as f32);
        assert!((img.sample(3.25, 4.5) - 12.25).abs() < 1e-5);
    }

    #[test]
    fn window_matches_pointwise_sampling() {
        let img = FloatImage::from_fn(40, 30, |x, y| ((x * 7 + y * 13) % 17) as f32 + 0.5 * x as f32);
        let mut out = vec![0.0; 49];
        for &(x, y) in &[(10.3, 12.8), (1.5, 2.2), (38.9, 28.1), (20.0, 15.0)] {
            img.sample_window(x, y, 3, &mut out);
            let mut k = 0;
            for dy in -3..=3 {
                for dx in -3..=3 {
                    assert!((out[k] - img.sample(x + dx as f64, y + dy as f64)).abs() < 1e-4, "({x},{y}) {dx} {dy}");
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn pyramid_sizes() {
        let img = FloatImage::new(33, 20);
        let p = build_pyramid(&img, 3);
        assert_eq!((p[1].width, p[1].height), (17, 10));
        assert_eq!((p[2].width, p[2].height), (9, 5));
    }
}
