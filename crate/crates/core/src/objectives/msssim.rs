use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::nn::{ops, Padding};
use crate::{Error, Result};

/// Published per-scale exponents, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsSsimConfig {
    /// 1..=5; fewer scales use the leading exponents, renormalised.
    pub scales: usize,
    pub window: usize,
    pub sigma: f64,
    /// Width of the value range; 2 for images in [-1, 1].
    pub data_range: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self {
            scales: 5,
            window: 11,
            sigma: 1.5,
            data_range: 2.0,
        }
    }
}

impl MsSsimConfig {
    pub fn min_size(&self) -> usize {
        (1 << (self.scales - 1)) * self.window
    }

    fn weights(&self) -> Vec<f64> {
        let w = &MS_SSIM_WEIGHTS[..self.scales];
        let sum: f64 = w.iter().sum();
        w.iter().map(|v| v / sum).collect()
    }
}

fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode Gaussian filter applied to every channel.
struct Filter {
    row: Tensor,
    col: Tensor,
}

impl Filter {
    fn new(cfg: &MsSsimConfig, like: &Tensor) -> Result<Self> {
        let g = gaussian(cfg.window, cfg.sigma);
        let t = Tensor::new(g, like.device())?.to_dtype(like.dtype())?;
        Ok(Self {
            row: t.reshape((1, 1, 1, cfg.window))?,
            col: t.reshape((1, 1, cfg.window, 1))?,
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let flat = x.reshape((n * c, 1, h, w))?;
        let y = ops::conv2d(&flat, &self.row, None, 1, 0, Padding::Zero)?;
        let y = ops::conv2d(&y, &self.col, None, 1, 0, Padding::Zero)?;
        let (_, _, oh, ow) = y.dims4()?;
        Ok(y.reshape((n, c, oh, ow))?)
    }
}

fn per_sample_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.mean(D::Minus1)?)
}

/// Returns per-sample `(ssim, cs)` means at one scale.
fn ssim_cs(a: &Tensor, b: &Tensor, f: &Filter, c1: f64, c2: f64) -> Result<(Tensor, Tensor)> {
    let mu_a = f.apply(a)?;
    let mu_b = f.apply(b)?;
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let s_aa = (f.apply(&a.sqr()?)? - &mu_aa)?;
    let s_bb = (f.apply(&b.sqr()?)? - &mu_bb)?;
    let s_ab = (f.apply(&(a * b)?)? - &mu_ab)?;
    let cs = ((s_ab * 2.0)? + c2)?.div(&((s_aa + s_bb)? + c2)?)?;
    let lum = ((mu_ab * 2.0)? + c1)?.div(&((mu_aa + mu_bb)? + c1)?)?;
    let ssim = (lum * &cs)?;
    Ok((per_sample_mean(&ssim)?, per_sample_mean(&cs)?))
}

/// Differentiable multi-scale SSIM of two (N, C, H, W) batches, one value
/// per sample.
///
/// Contrast-structure terms of the finer scales and the full SSIM of the
/// coarsest scale are raised to the scale exponents and multiplied; each
/// factor is floored at 1e-6 first so negative correlations stay defined.
pub fn ms_ssim(a: &Tensor, b: &Tensor, cfg: &MsSsimConfig) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("ms_ssim inputs differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if !(1..=MS_SSIM_WEIGHTS.len()).contains(&cfg.scales) {
        return Err(Error::Config(format!("ms_ssim scales must be 1..=5, got {}", cfg.scales)));
    }
    let (_, _, h, w) = a.dims4()?;
    if h.min(w) < cfg.min_size() {
        return Err(Error::Shape(format!(
            "ms_ssim with {} scales needs at least {}x{}, got {h}x{w}",
            cfg.scales,
            cfg.min_size(),
            cfg.min_size()
        )));
    }
    let c1 = (0.01 * cfg.data_range).powi(2);
    let c2 = (0.03 * cfg.data_range).powi(2);
    let filter = Filter::new(cfg, a)?;
    let weights = cfg.weights();
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut acc: Option<Tensor> = None;
    for (j, &wj) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_cs(&a, &b, &filter, c1, c2)?;
        let term = if j + 1 == weights.len() { ssim } else { cs };
        let factor = term.maximum(1e-6)?.powf(wj)?;
        acc = Some(match acc {
            Some(p) => (p * factor)?,
            None => factor,
        });
        if j + 1 < weights.len() {
            a = ops::avg_pool2(&a)?;
            b = ops::avg_pool2(&b)?;
        }
    }
    Ok(acc.expect("at least one scale"))
}
