use crate::wireframe::RasterImage;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Luma in [0, 1] (ITU-R BT.601 weights for RGB), row-major.
pub fn luma(img: &RasterImage) -> Vec<f64> {
    let to_unit = |v: f32| (f64::from(v) + 1.0) / 2.0;
    (0..img.height())
        .flat_map(|y| (0..img.width()).map(move |x| (x, y)))
        .map(|(x, y)| {
            let p = img.pixel(x, y);
            match p.len() {
                3 => 0.299 * to_unit(p[0]) + 0.587 * to_unit(p[1]) + 0.114 * to_unit(p[2]),
                _ => to_unit(p[0]),
            }
        })
        .collect()
}

fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filter of a `w` x `h` plane.
fn filter(src: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM of two luma planes with values in [0, 1].
pub fn ssim_planes(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(Error::Shape(format!("ssim planes must both be {width}x{height}")));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {width}x{height}"
        )));
    }
    let g = gaussian(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter(a, width, height, &g);
    let mu_b = filter(b, width, height, &g);
    let e_aa = filter(&prod(a, a), width, height, &g);
    let e_bb = filter(&prod(b, b), width, height, &g);
    let e_ab = filter(&prod(a, b), width, height, &g);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mu_a.len();
    let sum: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(sum / n as f64)
}

/// Single-scale SSIM of the luma of two images (11x11 Gaussian window,
/// sigma 1.5, dynamic range 1).
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if (a.width(), a.height(), a.channels()) != (b.width(), b.height(), b.channels()) {
        return Err(Error::Shape(format!(
            "ssim inputs differ: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    ssim_planes(&luma(a), &luma(b), a.width(), a.height())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> RasterImage {
        let data = (0..w * h * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        RasterImage::from_data(w, h, c, data).unwrap()
    }

    // Direct 2D windowed statistics, without the separable shortcut.
    fn reference(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
        let g = gaussian(11, 1.5);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wt = g[i] * g[j];
                        let (p, q) = (a[(y + j) * w + x + i], b[(y + j) * w + x + i]);
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 24, 20, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inverted_binary_image_is_anticorrelated() {
        let data: Vec<f32> = (0..32 * 32).map(|i| if (i / 32 + i % 32) % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let a = RasterImage::from_data(32, 32, 1, data.clone()).unwrap();
        let b = RasterImage::from_data(32, 32, 1, data.iter().map(|v| -v).collect()).unwrap();
        assert!(ssim(&a, &b).unwrap() <= 0.0);
    }

    #[test]
    fn matches_direct_window_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = random_image(&mut rng, 23, 19, 3);
            let b = random_image(&mut rng, 23, 19, 3);
            let expected = reference(&luma(&a), &luma(&b), 23, 19);
            assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_small_or_mismatched_inputs() {
        let a = RasterImage::filled(10, 10, 1, 0.0);
        assert!(matches!(ssim(&a, &a), Err(Error::Shape(_))));
        let b = RasterImage::filled(12, 12, 1, 0.0);
        let c = RasterImage::filled(12, 13, 1, 0.0);
        assert!(matches!(ssim(&b, &c), Err(Error::Shape(_))));
    }
}
