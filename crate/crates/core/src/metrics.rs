//! Full-reference fidelity metrics on RGB images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returned for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 8;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::Geometry(format!("expected [c, H, W], got {s:?}"))),
    }
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x.powi(3) - (A + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        A * x.powi(3) - 5.0 * A * x.powi(2) + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-index taps `(source index, weight)` for one axis.
fn taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let base = center.floor() as isize;
            let mut t: Vec<(usize, f64)> = (base - 1..=base + 2)
                .map(|i| (i.clamp(0, src as isize - 1) as usize, cubic(center - i as f64)))
                .collect();
            let s: f64 = t.iter().map(|p| p.1).sum();
            t.iter_mut().for_each(|p| p.1 /= s);
            t
        })
        .collect()
}

/// Bicubic resize (Keys, a = −0.5, pixel-centre aligned, clamped borders).
pub fn resize_bicubic(img: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let (ty, tx) = (taps(h, height), taps(w, width));
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        let rows: Vec<f64> = (0..h)
            .flat_map(|y| tx.iter().map(move |t| t.iter().map(|&(x, k)| k * plane[y * w + x]).sum::<f64>()))
            .collect();
        for t in &ty {
            for x in 0..width {
                out.push(t.iter().map(|&(y, k)| k * rows[y * width + x]).sum());
            }
        }
    }
    Tensor::from_vec([c, height, width], out)
}

/// Bring `output` to the geometry of `reference` when they differ.
fn aligned(output: &Tensor, reference: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims(reference)?;
    let (oc, _, _) = dims(output)?;
    if oc != c {
        return Err(Error::Geometry(format!("channel mismatch: {oc} vs {c}")));
    }
    resize_bicubic(output, h, w)
}

/// `10·log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let a = aligned(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over every 8×8 window (stride 1) and channel, dynamic range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let a = aligned(a, b)?;
    let (c, h, w) = dims(b)?;
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        sa += pa[y * w + x];
                        sb += pb[y * w + x];
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let (da, db) = (pa[y * w + x] - ma, pb[y * w + x] - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                let (va, vb, cov) = (va / n, vb / n, cov / n);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean pixel value, used as a brightness summary.
pub fn brightness(img: &Tensor) -> f64 {
    img.mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([3, h, w], (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn psnr_values() {
        let a = rand_img(0, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = rand_img(1, 8, 8);
        assert_eq!(psnr(&a, &c).unwrap(), psnr(&c, &a).unwrap());
    }

    #[test]
    fn ssim_values() {
        let a = rand_img(2, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bin = Tensor::from_vec([3, 16, 16], (0..768).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect()).unwrap();
        assert!(ssim(&bin, &bin.map(|v| 1.0 - v)).unwrap() <= 0.0);
    }

    // With equal local means the luminance term is exactly 1, so a common
    // offset leaves SSIM unchanged.
    #[test]
    fn ssim_shift_invariance_with_matched_means() {
        let base = rand_img(4, 16, 16).map(|v| 0.3 + 0.2 * v);
        let check = |i: usize| if (i / 16 + i % 16).is_multiple_of(2) { 0.05 } else { -0.05 };
        let mk = |sign: f64| {
            let data = base.data().iter().enumerate().map(|(i, v)| v + sign * check(i % 256)).collect();
            Tensor::from_vec([3, 16, 16], data).unwrap()
        };
        let (a, b) = (mk(1.0), mk(-0.5));
        let s0 = ssim(&a, &b).unwrap();
        let s1 = ssim(&a.map(|v| v + 0.2), &b.map(|v| v + 0.2)).unwrap();
        assert!((s0 - s1).abs() < 1e-6, "{s0} {s1}");
    }

    #[test]
    fn resize_identity_and_constant() {
        let a = rand_img(5, 8, 8);
        assert!(resize_bicubic(&a, 8, 8).unwrap().bit_eq(&a));
        let k = Tensor::full([3, 8, 8], 0.4);
        let up = resize_bicubic(&k, 16, 12).unwrap();
        assert_eq!(up.shape(), &[3, 16, 12]);
        assert!(up.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        // shape mismatch takes the resize path
        assert_eq!(psnr(&Tensor::full([3, 4, 4], 0.4), &k).unwrap(), PSNR_CAP);
    }
}
