//! Edge extraction: DoG zero crossings, topology-preserving thinning, chain
//! linking and the blur check on edge intensities.

use std::collections::VecDeque;

use crate::dataset::ImageFrame;
use crate::image::{gaussian_blur, gaussian_kernel, gradients, FloatImage};

/// Binary edge membership per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

/// 8-neighbour offsets: E, NE, N, NW, W, SW, S, SE.
const RING: [(isize, isize); 8] = [
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

impl EdgeMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-range coordinates read as background.
    #[inline]
    pub fn get_i(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    fn neighbours(&self, x: usize, y: usize) -> [bool; 8] {
        let mut n = [false; 8];
        for (k, (dx, dy)) in RING.iter().enumerate() {
            n[k] = self.get_i(x as isize + dx, y as isize + dy);
        }
        n
    }

    pub fn degree(&self, x: usize, y: usize) -> usize {
        self.neighbours(x, y).iter().filter(|&&b| b).count()
    }

    /// True if some 2x2 window is entirely set.
    pub fn has_thick_block(&self) -> bool {
        (0..self.height.saturating_sub(1)).any(|y| {
            (0..self.width.saturating_sub(1)).any(|x| {
                self.get(x, y) && self.get(x + 1, y) && self.get(x, y + 1) && self.get(x + 1, y + 1)
            })
        })
    }
}

/// An ordered, 8-connected run of edge pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeChain {
    pub id: usize,
    pub points: Vec<(usize, usize)>,
    pub closed: bool,
}

impl EdgeChain {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Marks zero crossings of `G(sigma_small) - G(sigma_large)` whose smoothed
/// image gradient reaches `response_threshold`.
///
/// An image smaller than the large kernel yields an empty mask.
pub fn dog_edges(frame: &ImageFrame, sigma_small: f64, sigma_large: f64, response_threshold: f64) -> EdgeMask {
    dog_edges_float(&FloatImage::from_frame(frame), sigma_small, sigma_large, response_threshold)
}

pub fn dog_edges_float(img: &FloatImage, sigma_small: f64, sigma_large: f64, response_threshold: f64) -> EdgeMask {
    assert!(sigma_small > 0.0 && sigma_large > sigma_small, "need sigma_large > sigma_small > 0");
    let (w, h) = (img.width, img.height);
    let mut mask = EdgeMask::new(w, h);
    let support = gaussian_kernel(sigma_large).len();
    if w < support || h < support {
        log::warn!("image {w}x{h} smaller than DoG support {support}; no edges");
        return mask;
    }
    let fine = gaussian_blur(img, sigma_small);
    let coarse = gaussian_blur(img, sigma_large);
    let dog: Vec<f32> = fine.data.iter().zip(&coarse.data).map(|(a, b)| a - b).collect();
    let (gx, gy) = gradients(&fine);
    let thr2 = (response_threshold * response_threshold) as f32;
    let strong = |i: usize| gx.data[i] * gx.data[i] + gy.data[i] * gy.data[i] >= thr2;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = dog[i];
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
                let e = dog[j];
                if (d > 0.0 && e < 0.0) || (d < 0.0 && e > 0.0) {
                    let pick = if d.abs() <= e.abs() { i } else { j };
                    if strong(pick) {
                        mask.bits[pick] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Yokoi 8-connectivity number of the centre pixel.
fn connectivity_number(n: &[bool; 8]) -> usize {
    let b = |k: usize| usize::from(!n[k % 8]);
    [0usize, 2, 4, 6]
        .iter()
        .map(|&k| b(k) - b(k) * b(k + 1) * b(k + 2))
        .sum()
}

/// Iterative border thinning. A pixel is removed when it lies on the current
/// border direction, is not an end point, and is simple (its removal keeps the
/// local 8-connectivity). Deletions are applied immediately, so connected
/// components are never split.
pub fn thin_edges(mask: &EdgeMask) -> EdgeMask {
    let mut out = mask.clone();
    let (w, h) = (out.width, out.height);
    // N, S, E, W border passes.
    let dirs: [(isize, isize); 4] = [(0, -1), (0, 1), (1, 0), (-1, 0)];
    loop {
        let mut changed = false;
        for (dx, dy) in dirs {
            for y in 0..h {
                for x in 0..w {
                    if !out.get(x, y) || out.get_i(x as isize + dx, y as isize + dy) {
                        continue;
                    }
                    let n = out.neighbours(x, y);
                    let degree = n.iter().filter(|&&b| b).count();
                    if degree >= 2 && connectivity_number(&n) == 1 {
                        out.set(x, y, false);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    out
}

/// Splits a thinned mask into chains. Pixels with three or more edge
/// neighbours are junctions: they belong to no chain and separate the
/// branches meeting there. Chains shorter than `min_len` are dropped.
pub fn link_edges(mask: &EdgeMask, min_len: usize) -> Vec<EdgeChain> {
    let (w, h) = (mask.width, mask.height);
    let junction = |x: usize, y: usize| mask.degree(x, y) >= 3;
    let usable: Vec<bool> = (0..w * h)
        .map(|i| mask.bits[i] && !junction(i % w, i / w))
        .collect();
    let usable_at = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && usable[y as usize * w + x as usize]
    };
    let links = |x: usize, y: usize| -> Vec<(usize, usize)> {
        RING.iter()
            .map(|(dx, dy)| (x as isize + dx, y as isize + dy))
            .filter(|&(nx, ny)| usable_at(nx, ny))
            .map(|(nx, ny)| (nx as usize, ny as usize))
            .collect()
    };
    let mut visited = vec![false; w * h];
    let mut chains = Vec::new();

    let walk = |start: (usize, usize), visited: &mut Vec<bool>| -> Vec<(usize, usize)> {
        let mut pts = vec![start];
        visited[start.1 * w + start.0] = true;
        let mut cur = start;
        while let Some(next) = links(cur.0, cur.1).into_iter().find(|p| !visited[p.1 * w + p.0]) {
            visited[next.1 * w + next.0] = true;
            pts.push(next);
            cur = next;
        }
        pts
    };

    // Open chains start at their end points.
    for y in 0..h {
        for x in 0..w {
            if usable[y * w + x] && !visited[y * w + x] && links(x, y).len() <= 1 {
                let pts = walk((x, y), &mut visited);
                chains.push((pts, false));
            }
        }
    }
    // Whatever is left forms cycles.
    for y in 0..h {
        for x in 0..w {
            if usable[y * w + x] && !visited[y * w + x] {
                let pts = walk((x, y), &mut visited);
                chains.push((pts, true));
            }
        }
    }
    chains
        .into_iter()
        .filter(|(pts, _)| pts.len() >= min_len)
        .enumerate()
        .map(|(id, (points, closed))| EdgeChain { id, points, closed })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurVerdict {
    pub variance: f64,
    pub threshold: f64,
    pub sharp: bool,
}

/// Judges sharpness from the variance of intensities on edge pixels.
///
/// `history` holds the variances of recently accepted frames. While it has
/// fewer than `bootstrap` entries every frame with edges is accepted.
pub fn blur_verdict(frame: &ImageFrame, mask: &EdgeMask, history: &[f64], fraction: f64, bootstrap: usize) -> BlurVerdict {
    let n = mask.count();
    if n == 0 {
        return BlurVerdict {
            variance: 0.0,
            threshold: 0.0,
            sharp: false,
        };
    }
    let (mut sum, mut sum2) = (0.0f64, 0.0f64);
    for (x, y) in mask.iter_set() {
        let v = frame.get(x, y) as f64;
        sum += v;
        sum2 += v * v;
    }
    let mean = sum / n as f64;
    let variance = (sum2 / n as f64 - mean * mean).max(0.0);
    if history.len() < bootstrap.max(1) {
        return BlurVerdict {
            variance,
            threshold: 0.0,
            sharp: true,
        };
    }
    let threshold = fraction * median(history);
    BlurVerdict {
        variance,
        threshold,
        sharp: variance >= threshold,
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Bounded record of accepted-frame edge variances.
#[derive(Clone, Debug, Default)]
pub struct BlurHistory {
    values: VecDeque<f64>,
    capacity: usize,
}

impl BlurHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            values: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }
}
