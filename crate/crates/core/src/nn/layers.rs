use candle_core::{Tensor, Var, D};

use super::ops::{self, Padding};
use super::store::{Init, VarPath};
use crate::Result;

const WEIGHT_INIT: Init = Init::Normal { mean: 0.0, std: 0.02 };

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
    padding: Padding,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
    pub bias: bool,
}

impl ConvSpec {
    pub fn same(kernel: usize, padding: Padding) -> Self {
        Self {
            kernel,
            stride: 1,
            pad: kernel / 2,
            padding,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new(p: &VarPath, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let k = spec.kernel;
        let weight = p.param("weight", &[c_out, c_in, k, k], WEIGHT_INIT)?;
        let bias = if spec.bias {
            Some(p.param("bias", &[c_out], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            pad: spec.pad,
            padding: spec.padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::conv2d(
            x,
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.pad,
            self.padding,
        )?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Batch normalisation over (N, H, W) per channel with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(p: &VarPath, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[channels], Init::Normal { mean: 1.0, std: 0.02 })?,
            bias: p.param("bias", &[channels], Init::Const(0.0))?,
            running_mean: p.buffer("running_mean", &[channels], Init::Const(0.0))?,
            running_var: p.buffer("running_var", &[channels], Init::Const(1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(2)?.mean_keepdim(0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered
                .sqr()?
                .mean_keepdim(D::Minus1)?
                .mean_keepdim(2)?
                .mean_keepdim(0)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()?.to_dtype(self.running_mean.dtype())? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()?.to_dtype(self.running_var.dtype())? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?.to_dtype(x.dtype())?,
                self.running_var.as_tensor().reshape(shape)?.to_dtype(x.dtype())?,
            )
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let scale = self.weight.reshape(shape)?.broadcast_mul(&inv_std)?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&scale)?;
        Ok(y.broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &VarPath, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[d_out, d_in], WEIGHT_INIT)?,
            bias: p.param("bias", &[d_out], Init::Const(0.0))?,
        })
    }

    /// (N, d_in) -> (N, d_out)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}
