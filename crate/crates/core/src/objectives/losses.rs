use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::msssim::{ms_ssim, MsSsimConfig};
use super::perceptual::{perceptual_distance, FeatureExtractor};
use crate::nn::ops;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_w: f64,
    pub beta_w: f64,
    pub alpha_s: f64,
    pub beta_s: f64,
    pub lambda: f64,
    pub hist_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_w: 1.0,
            beta_w: 1.0,
            alpha_s: 15.0,
            beta_s: 4.0,
            lambda: 1.0,
            hist_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha_w", self.alpha_w),
            ("beta_w", self.beta_w),
            ("alpha_s", self.alpha_s),
            ("beta_s", self.beta_s),
            ("lambda", self.lambda),
            ("hist_weight", self.hist_weight),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// Least squares with targets 1 (real) and 0 (fake).
    #[default]
    Lsgan,
    /// Sigmoid cross-entropy minimax, generator minimising `log(1 - D(fake))`.
    Bce,
}

/// Mean absolute difference over (C, H, W), one value per sample.
pub fn l1_per_sample(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("l1 inputs differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.abs()?.flatten_from(1)?.mean(D::Minus1)?)
}

/// Scalar loss plus its batch-mean components.
#[derive(Debug, Clone)]
pub struct RecLoss {
    pub total: Tensor,
    pub l1: Tensor,
    /// Mean of `1 - ms_ssim`.
    pub msssim: Tensor,
}

#[derive(Debug, Clone)]
pub struct GenLoss {
    pub total: Tensor,
    pub l1: Tensor,
    pub perc: Tensor,
}

/// `mean_n[alpha_w * l1 + beta_w * (1 - ms_ssim)]` over wireframe rasters.
pub fn rec_loss(x: &Tensor, x_hat: &Tensor, w: &LossWeights, ms: &MsSsimConfig) -> Result<RecLoss> {
    let l1 = l1_per_sample(x, x_hat)?.mean_all()?;
    let dissim = ms_ssim(x, x_hat, ms)?.affine(-1.0, 1.0)?.mean_all()?;
    let total = ((&l1 * w.alpha_w)? + (&dissim * w.beta_w)?)?;
    Ok(RecLoss {
        total,
        l1,
        msssim: dissim,
    })
}

/// `mean_n[alpha_s * l1 + beta_s * perceptual]` over scenes.
pub fn gen_loss(y: &Tensor, y_hat: &Tensor, w: &LossWeights, ext: &dyn FeatureExtractor) -> Result<GenLoss> {
    let l1 = l1_per_sample(y, y_hat)?.mean_all()?;
    let perc = if w.beta_s == 0.0 {
        l1.zeros_like()?
    } else {
        perceptual_distance(y, y_hat, ext)?.mean_all()?
    };
    let total = ((&l1 * w.alpha_s)? + (&perc * w.beta_s)?)?;
    Ok(GenLoss { total, l1, perc })
}

/// Discriminator loss on real and fake patch scores.
pub fn d_adv_loss(real: &Tensor, fake: &Tensor, mode: GanMode) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        return Err(Error::Shape(format!("score maps differ: {:?} vs {:?}", real.dims(), fake.dims())));
    }
    Ok(match mode {
        GanMode::Lsgan => (((real - 1.0)?.sqr()?.mean_all()? * 0.5)? + (fake.sqr()?.mean_all()? * 0.5)?)?,
        // -log sigmoid(r) - log(1 - sigmoid(f))
        GanMode::Bce => (ops::softplus(&real.neg()?)?.mean_all()? + ops::softplus(fake)?.mean_all()?)?,
    })
}

/// Generator loss on fake patch scores.
pub fn g_adv_loss(fake: &Tensor, mode: GanMode) -> Result<Tensor> {
    Ok(match mode {
        GanMode::Lsgan => ((fake - 1.0)?.sqr()?.mean_all()? * 0.5)?,
        // log(1 - sigmoid(f)) = -softplus(f)
        GanMode::Bce => ops::softplus(fake)?.mean_all()?.neg()?,
    })
}

/// `(d_loss, g_loss)` for one pair of score maps.
pub fn adversarial_losses(real: &Tensor, fake: &Tensor, mode: GanMode) -> Result<(Tensor, Tensor)> {
    Ok((d_adv_loss(real, fake, mode)?, g_adv_loss(fake, mode)?))
}

/// Mean absolute difference over all entries of two histogram batches.
pub fn hist_loss(h: &Tensor, h_hat: &Tensor) -> Result<Tensor> {
    if h.dims() != h_hat.dims() {
        return Err(Error::Shape(format!("histograms differ: {:?} vs {:?}", h.dims(), h_hat.dims())));
    }
    Ok((h - h_hat)?.abs()?.mean_all()?)
}

/// Generator-side objective: `rec + gen + lambda * adv_g (+ hist_weight * hist)`.
pub fn total_loss(rec: &Tensor, gen: &Tensor, adv_g: &Tensor, hist: Option<&Tensor>, w: &LossWeights) -> Result<Tensor> {
    let mut t = ((rec + gen)? + (adv_g * w.lambda)?)?;
    if let Some(h) = hist {
        t = (t + (h * w.hist_weight)?)?;
    }
    Ok(t)
}

/// Per-step scalars, serialised as one JSON line of the metrics log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub epoch: usize,
    pub rec_l1: f64,
    /// Mean `1 - ms_ssim`.
    pub rec_msssim: f64,
    pub gen_l1: f64,
    pub gen_perc: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub hist: f64,
    /// Generator-side total.
    pub total: f64,
    /// Discriminator-side total, `lambda * adv_d`.
    pub d_total: f64,
}

impl LossReport {
    /// Recomputes `total` and `d_total` from the components.
    pub fn with_totals(mut self, w: &LossWeights) -> Self {
        self.total = w.alpha_w * self.rec_l1
            + w.beta_w * self.rec_msssim
            + w.alpha_s * self.gen_l1
            + w.beta_s * self.gen_perc
            + w.lambda * self.adv_g
            + w.hist_weight * self.hist;
        self.d_total = w.lambda * self.adv_d;
        self
    }

    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("rec_l1", self.rec_l1),
            ("rec_msssim", self.rec_msssim),
            ("gen_l1", self.gen_l1),
            ("gen_perc", self.gen_perc),
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("hist", self.hist),
            ("total", self.total),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite()) && self.d_total.is_finite()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}
