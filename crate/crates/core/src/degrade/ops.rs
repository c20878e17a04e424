//! Image operators on `[3, H, W]` tensors with values in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub(crate) fn check_image(img: &Image) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] == 0 || s[1] == 0 || s[2] == 0 {
        return Err(Error::Geometry(format!("expected a [c, H, W] image, got {s:?}")));
    }
    Ok(())
}

pub(crate) fn clamp01(img: Image) -> Image {
    img.map(|x| x.clamp(0.0, 1.0))
}

fn dims(img: &Image) -> (usize, usize, usize) {
    let s = img.shape();
    (s[0], s[1], s[2])
}

fn from_planes(c: usize, h: usize, w: usize, data: Vec<f64>) -> Image {
    Tensor::from_vec([c, h, w], data).expect("plane sizes match")
}

/// Mirror an out-of-range index back into `[0, n)` without repeating the edge.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    (if i >= n { period - i } else { i }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur_plane(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[y * w + reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn map_planes(img: &Image, f: impl Fn(&[f64]) -> Vec<f64>) -> Image {
    let (c, h, w) = dims(img);
    let data = img.data().chunks(h * w).flat_map(f).collect();
    from_planes(c, h, w, data)
}

/// Separable Gaussian, radius `⌈3σ⌉`, reflected borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let (_, h, w) = dims(img);
    let kernel = gaussian_kernel(sigma);
    map_planes(img, |p| blur_plane(p, h, w, &kernel))
}

fn convolve2d(img: &Image, kernel: &[f64], ksize: usize) -> Image {
    let (_, h, w) = dims(img);
    let r = (ksize / 2) as isize;
    map_planes(img, |p| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..ksize {
                    for kx in 0..ksize {
                        let kv = kernel[ky * ksize + kx];
                        if kv != 0.0 {
                            let sy = reflect(y as isize + ky as isize - r, h);
                            let sx = reflect(x as isize + kx as isize - r, w);
                            acc += kv * p[sy * w + sx];
                        }
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    })
}

/// Line kernel of length `len` at `angle` degrees, splatted bilinearly from
/// dense samples along the segment so that fractional lengths and angles
/// stay smooth.
pub fn motion_kernel(len: f64, angle: f64) -> (Vec<f64>, usize) {
    let ksize = 2 * (len / 2.0).ceil() as usize + 1;
    let c = (ksize / 2) as f64;
    let (dy, dx) = angle.to_radians().sin_cos();
    let mut k = vec![0.0; ksize * ksize];
    let samples = (len * 16.0).ceil() as usize + 1;
    for i in 0..samples {
        let s = if samples == 1 { 0.0 } else { (i as f64 / (samples - 1) as f64 - 0.5) * (len - 1.0) };
        let (x, y) = (c + s * dx, c - s * dy);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let (yy, xx) = ((y0 + oy) as usize, (x0 + ox) as usize);
                if yy < ksize && xx < ksize {
                    k[yy * ksize + xx] += wy * wx;
                }
            }
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    (k, ksize)
}

pub fn motion_blur(img: &Image, len: f64, angle: f64) -> Image {
    if len <= 1.0 {
        return img.clone();
    }
    let (k, ksize) = motion_kernel(len, angle);
    convolve2d(img, &k, ksize)
}

pub fn gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    img.map_mut(|x| x + sigma * rng.sample::<f64, _>(StandardNormal))
}

// `map` takes `Fn`, so noisy maps with a stateful RNG go through this.
trait MapMut {
    fn map_mut(&self, f: impl FnMut(f64) -> f64) -> Image;
}

impl MapMut for Image {
    fn map_mut(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        let (c, h, w) = dims(self);
        from_planes(c, h, w, self.data().iter().map(|&x| f(x)).collect())
    }
}

pub fn poisson_noise(img: &Image, peak: f64, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut err = None;
    let out = img.map_mut(|x| {
        let lambda = x.clamp(0.0, 1.0) * peak;
        if lambda <= 0.0 {
            return 0.0;
        }
        match Poisson::new(lambda) {
            Ok(d) => d.sample(&mut rng) / peak,
            Err(e) => {
                err = Some(e.to_string());
                x
            }
        }
    });
    match err {
        Some(e) => Err(Error::NumericDomain { op: "poisson_noise", detail: e }),
        None => Ok(out),
    }
}

/// Block-average downsample followed by nearest-neighbour upsample.
pub fn pixelate(img: &Image, block: usize) -> Image {
    if block <= 1 {
        return img.clone();
    }
    let (_, h, w) = dims(img);
    map_planes(img, |p| {
        let mut out = vec![0.0; h * w];
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
                let mut s = 0.0;
                for y in by..ey {
                    for x in bx..ex {
                        s += p[y * w + x];
                    }
                }
                let mean = s / ((ey - by) * (ex - bx)) as f64;
                for y in by..ey {
                    for x in bx..ex {
                        out[y * w + x] = mean;
                    }
                }
            }
        }
        out
    })
}

fn sorted(p: &[f64]) -> Vec<f64> {
    let mut s = p.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Replace each value by a per-level statistic of its members.
fn requantize(p: &[f64], levels: usize, level_of: impl Fn(f64) -> usize, stat: impl Fn(&mut [f64]) -> f64) -> Vec<f64> {
    let mut members = vec![Vec::new(); levels];
    for &x in p {
        members[level_of(x)].push(x);
    }
    let values: Vec<f64> = members.iter_mut().map(|m| if m.is_empty() { 0.0 } else { stat(m) }).collect();
    p.iter().map(|&x| values[level_of(x)]).collect()
}

fn mean(m: &mut [f64]) -> f64 {
    m.iter().sum::<f64>() / m.len() as f64
}

fn median(m: &mut [f64]) -> f64 {
    m.sort_by(f64::total_cmp);
    let n = m.len();
    if n % 2 == 1 {
        m[n / 2]
    } else {
        0.5 * (m[n / 2 - 1] + m[n / 2])
    }
}

/// Equal-mass levels: thresholds at the per-channel `k/levels` quantiles,
/// each level represented by the mean of its members.
pub fn quantize_hist(img: &Image, levels: usize) -> Image {
    map_planes(img, |p| {
        let s = sorted(p);
        let thresholds: Vec<f64> = (1..levels).map(|k| s[k * s.len() / levels]).collect();
        let level_of = |x: f64| thresholds.iter().filter(|&&t| x >= t).count();
        requantize(p, levels, level_of, mean)
    })
}

/// Equal-width bins over `[0, 1]`, each mapped to the median of its members.
pub fn quantize_median(img: &Image, levels: usize) -> Image {
    map_planes(img, |p| {
        let level_of = |x: f64| ((x * levels as f64) as usize).min(levels - 1);
        requantize(p, levels, level_of, median)
    })
}

/// Otsu threshold on a 256-bin histogram.
pub fn otsu_threshold(p: &[f64]) -> f64 {
    let mut hist = [0usize; 256];
    for &x in p {
        hist[(x.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let total = p.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f64 + 0.5) / 255.0
}

/// Per-channel binary image: 1 above the Otsu threshold, 0 below.
pub fn quantize_otsu(img: &Image) -> Image {
    map_planes(img, |p| {
        let t = otsu_threshold(p);
        p.iter().map(|&x| if x > t { 1.0 } else { 0.0 }).collect()
    })
}

fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Signed frequency index of DFT bin `k` as a fraction of Nyquist.
fn nyquist_fraction(k: usize, n: usize) -> f64 {
    let signed = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    signed / (n as f64 / 2.0)
}

/// Ideal low-pass: zero every DFT coefficient whose radial frequency exceeds
/// `cutoff` (fraction of Nyquist).
pub fn ringing(img: &Image, cutoff: f64) -> Image {
    let (_, h, w) = dims(img);
    map_planes(img, |p| {
        let mut buf: Vec<Complex<f64>> = p.iter().map(|&x| Complex::new(x, 0.0)).collect();
        fft2(&mut buf, h, w, false);
        for y in 0..h {
            let fy = nyquist_fraction(y, h);
            for x in 0..w {
                let fx = nyquist_fraction(x, w);
                if (fy * fy + fx * fx).sqrt() > cutoff {
                    buf[y * w + x] = Complex::new(0.0, 0.0);
                }
            }
        }
        fft2(&mut buf, h, w, true);
        let n = (h * w) as f64;
        buf.iter().map(|c| c.re / n).collect()
    })
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    m
}

/// Quantizer step (in 8-bit units) for a JPEG-style quality factor.
pub fn dct_step(quality: f64) -> f64 {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    (16.0 * scale / 100.0).max(1.0)
}

/// 8×8 block DCT with a uniform quantizer scaled by `quality`; edges are
/// padded by replication.
pub fn compress_dct(img: &Image, quality: f64) -> Image {
    let (_, h, w) = dims(img);
    let step = dct_step(quality);
    let m = dct_matrix();
    map_planes(img, |p| {
        let mut out = vec![0.0; h * w];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        *v = p[sy * w + sx] * 255.0 - 128.0;
                    }
                }
                // coefficients = M · B · Mᵀ
                let mut tmp = [[0.0; 8]; 8];
                let mut coef = [[0.0; 8]; 8];
                for i in 0..8 {
                    for j in 0..8 {
                        tmp[i][j] = (0..8).map(|k| m[i][k] * block[k][j]).sum();
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let c: f64 = (0..8).map(|k| tmp[i][k] * m[j][k]).sum();
                        coef[i][j] = (c / step).round() * step;
                    }
                }
                // block = Mᵀ · C · M
                for i in 0..8 {
                    for j in 0..8 {
                        tmp[i][j] = (0..8).map(|k| m[k][i] * coef[k][j]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        if by + y < h && bx + x < w {
                            let v: f64 = (0..8).map(|k| tmp[y][k] * m[k][x]).sum();
                            out[(by + y) * w + bx + x] = (v + 128.0) / 255.0;
                        }
                    }
                }
            }
        }
        out
    })
}

pub fn gamma(img: &Image, g: f64) -> Image {
    if g == 1.0 {
        return img.clone();
    }
    img.map(|x| x.max(0.0).powf(g))
}

pub fn shift(img: &Image, b: f64) -> Image {
    if b == 0.0 {
        return img.clone();
    }
    img.map(|x| x + b)
}

pub fn contrast(img: &Image, c: f64) -> Image {
    if c == 1.0 {
        return img.clone();
    }
    img.map(|x| 0.5 + c * (x - 0.5))
}

fn luma_plane(img: &Image) -> Vec<f64> {
    let (c, h, w) = dims(img);
    let d = img.data();
    if c != 3 {
        return d[..h * w].to_vec();
    }
    (0..h * w)
        .map(|i| LUMA[0] * d[i] + LUMA[1] * d[h * w + i] + LUMA[2] * d[2 * h * w + i])
        .collect()
}

pub fn saturation(img: &Image, s: f64) -> Image {
    if s == 1.0 {
        return img.clone();
    }
    let (c, h, w) = dims(img);
    let luma = luma_plane(img);
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let l = luma[i % (h * w)];
            l + s * (x - l)
        })
        .collect();
    from_planes(c, h, w, data)
}

/// Unsharp mask `x + amount·(x − blur(x))`.
pub fn oversharpen(img: &Image, amount: f64, sigma: f64) -> Image {
    if amount == 0.0 {
        return img.clone();
    }
    let blurred = gaussian_blur(img, sigma);
    img.zip_map(&blurred, |x, b| x + amount * (x - b)).expect("same shape")
}

/// Zero out `n` seeded rectangles, each at most `1/(4n)` of the image area.
pub fn mask_inpaint(img: &Image, n: usize, seed: u64) -> Image {
    if n == 0 {
        return img.clone();
    }
    let (c, h, w) = dims(img);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = (h * w) as f64 / (4.0 * n as f64);
    let mut mask = vec![false; h * w];
    for _ in 0..n {
        let rh = rng.gen_range(1..=h.max(1).min((budget.sqrt() * 2.0) as usize).max(1));
        let max_w = ((budget / rh as f64).floor() as usize).clamp(1, w);
        let rw = rng.gen_range(1..=max_w);
        let y0 = rng.gen_range(0..=h - rh);
        let x0 = rng.gen_range(0..=w - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                mask[y * w + x] = true;
            }
        }
    }
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| if mask[i % (h * w)] { 0.0 } else { x })
        .collect();
    from_planes(c, h, w, data)
}

/// Luma replicated to every channel.
pub fn grayscale(img: &Image) -> Image {
    let (c, h, w) = dims(img);
    let luma = luma_plane(img);
    from_planes(c, h, w, luma.iter().cycle().take(c * h * w).copied().collect())
}

/// Canny edges on the luma plane: Gaussian σ=1, Sobel, non-maximum
/// suppression, hysteresis between `lo` and `hi` (gradient-magnitude units).
pub fn canny(img: &Image, lo: f64, hi: f64) -> Image {
    let (c, h, w) = dims(img);
    let smooth = blur_plane(&luma_plane(img), h, w, &gaussian_kernel(1.0));
    let at = |y: isize, x: isize| smooth[reflect(y, h) * w + reflect(x, w)];
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            mag[i] = (gx * gx + gy * gy).sqrt();
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = match angle {
                a if !(22.5..157.5).contains(&a) => 0,
                a if a < 67.5 => 1,
                a if a < 112.5 => 2,
                _ => 3,
            };
        }
    }
    let m = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (a, b) = match dir[i] {
                0 => (m(y, x - 1), m(y, x + 1)),
                1 => (m(y - 1, x - 1), m(y + 1, x + 1)),
                2 => (m(y - 1, x), m(y + 1, x)),
                _ => (m(y - 1, x + 1), m(y + 1, x - 1)),
            };
            if mag[i] > 0.0 && mag[i] >= a && mag[i] >= b {
                thin[i] = mag[i];
            }
        }
    }
    let mut edge = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| thin[i] >= hi && thin[i] > 0.0).collect();
    for &i in &stack {
        edge[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thin[j] >= lo && thin[j] > 0.0 {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    let plane: Vec<f64> = edge.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
    from_planes(c, h, w, plane.iter().cycle().take(c * h * w).copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        let data = (0..3 * 16 * 16).map(|i| (i % 256) as f64 / 255.0).collect();
        Tensor::from_vec([3, 16, 16], data).unwrap()
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 5), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn kernels_normalised() {
        assert!((gaussian_kernel(1.3).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (k, size) = motion_kernel(7.0, 30.0);
        assert_eq!(size, 9);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_constant() {
        let img = Tensor::full([3, 8, 8], 0.3);
        assert!(gaussian_blur(&img, 2.0).max_abs_diff(&img) < 1e-12);
        assert!(motion_blur(&img, 5.0, 45.0).max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn ringing_full_band_keeps_low_content() {
        let img = Tensor::full([1, 8, 8], 0.7);
        assert!(ringing(&img, 0.2).max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn dct_high_quality_is_near_lossless() {
        let img = ramp();
        let out = compress_dct(&img, 100.0);
        assert!(out.max_abs_diff(&img) < 2.0 / 255.0);
    }

    #[test]
    fn quantizers_use_few_levels() {
        let img = ramp();
        for out in [quantize_hist(&img, 4), quantize_median(&img, 4)] {
            let mut vals: Vec<f64> = out.data()[..256].to_vec();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            assert!(vals.len() <= 4);
        }
        assert!(quantize_otsu(&img).data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn otsu_separates_two_modes() {
        let p: Vec<f64> = (0..100).map(|i| if i < 50 { 0.2 } else { 0.8 }).collect();
        let t = otsu_threshold(&p);
        assert!(t > 0.2 && t < 0.8);
    }

    #[test]
    fn mask_covers_at_most_a_quarter() {
        let img = Tensor::ones([3, 32, 32]);
        for n in 1..=8 {
            let out = mask_inpaint(&img, n, n as u64);
            let zeros = out.data()[..1024].iter().filter(|&&v| v == 0.0).count();
            assert!(zeros > 0 && zeros <= 256, "{n}: {zeros}");
        }
    }

    #[test]
    fn canny_finds_a_step_edge() {
        let mut img = Tensor::zeros([3, 16, 16]);
        for c in 0..3 {
            for y in 0..16 {
                for x in 8..16 {
                    img.data_mut()[(c * 16 + y) * 16 + x] = 1.0;
                }
            }
        }
        let e = canny(&img, 0.1, 0.3);
        let row: Vec<f64> = e.data()[5 * 16..6 * 16].to_vec();
        assert!(row[7] == 1.0 || row[8] == 1.0);
        assert_eq!(row[2], 0.0);
        assert_eq!(row[13], 0.0);
    }
}
