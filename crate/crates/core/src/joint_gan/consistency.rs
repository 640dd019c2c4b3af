use candle_core::{Tensor, D};

use super::ScaleOutput;
use crate::{Error, Result};

/// Per-sample, per-channel pixel statistics over spatial positions.
#[derive(Debug, Clone)]
pub struct PixelStats {
    /// `(N, C)`
    pub mean: Tensor,
    /// `(N, C, C)`, normalised by the pixel count.
    pub covariance: Tensor,
}

impl PixelStats {
    pub fn of(x: &Tensor) -> Result<Self> {
        let (n, c, h, w) = x.dims4()?;
        let flat = x.reshape((n, c, h * w))?;
        let mean = flat.mean(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean.unsqueeze(D::Minus1)?)?;
        let covariance = (centered.matmul(&centered.transpose(1, 2)?.contiguous()?)? / (h * w) as f64)?;
        Ok(Self { mean, covariance })
    }
}

/// `||l1 * mu_fine - mu_coarse||^2 + ||l2 * S_fine - S_coarse||^2` per
/// sample, shape (N,).
fn pair_term(fine: &Tensor, coarse: &Tensor, lambda1: f64, lambda2: f64) -> Result<Tensor> {
    let f = PixelStats::of(fine)?;
    let c = PixelStats::of(coarse)?;
    let dm = ((f.mean * lambda1)? - c.mean)?.sqr()?.sum(D::Minus1)?;
    let ds = ((f.covariance * lambda2)? - c.covariance)?.sqr()?.flatten_from(1)?.sum(D::Minus1)?;
    Ok((dm + ds)?)
}

/// Colour and structure consistency between adjacent scales, summed over
/// scale pairs and both branches and averaged over the batch. The finer
/// scale's statistics carry the weights.
pub fn consistency_loss(outputs: &[ScaleOutput], lambda1: f64, lambda2: f64) -> Result<Tensor> {
    if outputs.len() < 2 {
        return Err(Error::Config(format!(
            "consistency needs at least two scales, got {}",
            outputs.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for pair in outputs.windows(2) {
        let (coarse, fine) = (&pair[0], &pair[1]);
        let t = (pair_term(&fine.wireframe, &coarse.wireframe, lambda1, lambda2)?
            + pair_term(&fine.scene, &coarse.scene, lambda1, lambda2)?)?;
        let t = t.mean(0)?;
        total = Some(match total {
            Some(acc) => (acc + t)?,
            None => t,
        });
    }
    Ok(total.expect("at least one pair"))
}
