//! Tensor operations that candle either lacks or implements too slowly on
//! the CPU backend: padded convolution (im2col + gemm), pixel shuffle, and a
//! handful of numerically stable activations.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp1, Layout, Shape, Tensor};

/// Border handling for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    Reflect,
}

/// Geometry of a padded, strided 2D sliding window over an NCHW tensor.
#[derive(Debug, Clone)]
struct Window {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    // `rows[ky * out_h + oy]` is the source row sampled by kernel row `ky` at
    // output row `oy`, or -1 when it falls into zero padding.
    rows: Vec<isize>,
    cols: Vec<isize>,
}

fn source_index(i: isize, n: usize, mode: Padding) -> isize {
    let n = n as isize;
    if (0..n).contains(&i) {
        return i;
    }
    match mode {
        Padding::Zero => -1,
        Padding::Reflect => {
            if i < 0 {
                -i
            } else {
                2 * (n - 1) - i
            }
        }
    }
}

fn index_table(out: usize, k: usize, n: usize, stride: usize, pad: usize, mode: Padding) -> Vec<isize> {
    let mut table = Vec::with_capacity(out * k);
    for kk in 0..k {
        for o in 0..out {
            let i = (o * stride + kk) as isize - pad as isize;
            table.push(source_index(i, n, mode));
        }
    }
    table
}

impl Window {
    #[allow(clippy::too_many_arguments)]
    fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        mode: Padding,
    ) -> candle_core::Result<Self> {
        if stride == 0 {
            bail!("convolution stride must be positive")
        }
        if mode == Padding::Reflect && (pad >= height || pad >= width) {
            bail!("reflection padding {pad} needs spatial size > {pad}, got {height}x{width}")
        }
        let (ph, pw) = (height + 2 * pad, width + 2 * pad);
        if ph < kh || pw < kw {
            bail!("kernel {kh}x{kw} larger than padded input {ph}x{pw}")
        }
        let out_h = (ph - kh) / stride + 1;
        let out_w = (pw - kw) / stride + 1;
        Ok(Self {
            channels,
            height,
            width,
            kh,
            kw,
            out_h,
            out_w,
            rows: index_table(out_h, kh, height, stride, pad, mode),
            cols: index_table(out_w, kw, width, stride, pad, mode),
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn unfold<T: Copy + Default>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (k, l) = (self.patch_len(), self.positions());
        let plane_len = self.height * self.width;
        let mut dst = vec![T::default(); batch * k * l];
        for b in 0..batch {
            for c in 0..self.channels {
                let plane = &src[(b * self.channels + c) * plane_len..][..plane_len];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let row = (b * k + (c * self.kh + ky) * self.kw + kx) * l;
                        let xs = &self.cols[kx * self.out_w..][..self.out_w];
                        for oy in 0..self.out_h {
                            let sy = self.rows[ky * self.out_h + oy];
                            if sy < 0 {
                                continue;
                            }
                            let src_row = &plane[sy as usize * self.width..][..self.width];
                            let out = &mut dst[row + oy * self.out_w..][..self.out_w];
                            for (o, &sx) in out.iter_mut().zip(xs) {
                                if sx >= 0 {
                                    *o = src_row[sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        dst
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T], batch: usize) -> Vec<T> {
        let (k, l) = (self.patch_len(), self.positions());
        let plane_len = self.height * self.width;
        let mut dst = vec![T::default(); batch * self.channels * plane_len];
        for b in 0..batch {
            for c in 0..self.channels {
                let plane = &mut dst[(b * self.channels + c) * plane_len..][..plane_len];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let row = (b * k + (c * self.kh + ky) * self.kw + kx) * l;
                        let xs = &self.cols[kx * self.out_w..][..self.out_w];
                        for oy in 0..self.out_h {
                            let sy = self.rows[ky * self.out_h + oy];
                            if sy < 0 {
                                continue;
                            }
                            let dst_row = &mut plane[sy as usize * self.width..][..self.width];
                            let src = &cols[row + oy * self.out_w..][..self.out_w];
                            for (&v, &sx) in src.iter().zip(xs) {
                                if sx >= 0 {
                                    dst_row[sx as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        dst
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("expected a contiguous tensor"),
    }
}

/// Unfolds sliding windows into columns: (N, C, H, W) -> (N, C*kh*kw, OH*OW).
struct Unfold {
    window: Window,
}

/// Adjoint of [`Unfold`]: scatters columns back, summing overlaps.
struct Fold {
    window: Window,
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold2d"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, ..) = layout.shape().dims4()?;
        let shape = Shape::from((batch, self.window.patch_len(), self.window.positions()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.window.unfold(contiguous_slice(v, layout)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(self.window.unfold(contiguous_slice(v, layout)?, batch)),
            other => bail!("unfold2d: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let fold = Fold {
            window: self.window.clone(),
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&fold)?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold2d"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, ..) = layout.shape().dims3()?;
        let w = &self.window;
        let shape = Shape::from((batch, w.channels, w.height, w.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(w.fold(contiguous_slice(v, layout)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(w.fold(contiguous_slice(v, layout)?, batch)),
            other => bail!("fold2d: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }
}

/// 2D cross-correlation with explicit border handling.
///
/// `weight` is (C_out, C_in, kh, kw); the output is (N, C_out, OH, OW).
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    mode: Padding,
) -> candle_core::Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (c_out, c_in, kh, kw) = weight.dims4()?;
    if c_in != channels {
        bail!("conv2d: input has {channels} channels, kernel expects {c_in}")
    }
    let window = Window::new(channels, height, width, kh, kw, stride, pad, mode)?;
    let (out_h, out_w) = (window.out_h, window.out_w);
    let cols = x.contiguous()?.apply_op1(Unfold { window })?;
    let kernel = weight.reshape((c_out, c_in * kh * kw))?;
    let out = kernel.broadcast_matmul(&cols)?.reshape((batch, c_out, out_h, out_w))?;
    match bias {
        Some(b) => out.broadcast_add(&b.reshape((1, c_out, 1, 1))?),
        None => Ok(out),
    }
}

/// Rearranges (N, C*r*r, H, W) into (N, C, H*r, W*r).
pub fn pixel_shuffle(x: &Tensor, factor: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c % (factor * factor) != 0 {
        bail!("pixel_shuffle: {c} channels not divisible by {factor}^2")
    }
    let oc = c / (factor * factor);
    x.reshape((n, oc, factor, factor, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((n, oc, h * factor, w * factor))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.relu()? - (x.neg()?.relu()? * slope)?
}

/// Logistic sigmoid via `tanh`, which stays finite for large |x| in both passes.
pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    ((x * 0.5)?.tanh()? + 1.0)? * 0.5
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?
}

/// 2x2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        bail!("avg_pool2: input {h}x{w} too small")
    }
    x.narrow(2, 0, oh * 2)?
        .narrow(3, 0, ow * 2)?
        .contiguous()?
        .reshape((n, c, oh, 2, ow, 2))?
        .mean(5)?
        .mean(3)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    x.upsample_nearest2d(h * factor, w * factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn naive_conv(
        x: &[f64],
        (n, c, h, w): (usize, usize, usize, usize),
        k: &[f64],
        (co, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
        mode: Padding,
    ) -> (Vec<f64>, usize, usize) {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let fetch = |b: usize, ci: usize, y: isize, xx: isize| -> f64 {
            let map = |i: isize, len: usize| -> Option<usize> {
                let len = len as isize;
                if i >= 0 && i < len {
                    Some(i as usize)
                } else if mode == Padding::Reflect {
                    Some(if i < 0 { (-i) as usize } else { (2 * (len - 1) - i) as usize })
                } else {
                    None
                }
            };
            match (map(y, h), map(xx, w)) {
                (Some(y), Some(xx)) => x[((b * c + ci) * h + y) * w + xx],
                _ => 0.0,
            }
        };
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = (oy * stride + ky) as isize - pad as isize;
                                    let xx = (ox * stride + kx) as isize - pad as isize;
                                    acc += fetch(b, ci, y, xx) * k[((o * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (out, oh, ow)
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(mode, pad, stride, kh) in &[
            (Padding::Zero, 1, 1, 3),
            (Padding::Reflect, 1, 2, 3),
            (Padding::Reflect, 3, 1, 7),
            (Padding::Zero, 1, 2, 4),
        ] {
            let dims = (2, 3, 9, 8);
            let xs = ramp(2 * 3 * 9 * 8, 0.1);
            let ks = ramp(4 * 3 * kh * kh, 0.05);
            let (expect, oh, ow) = naive_conv(&xs, dims, &ks, (4, kh, kh), stride, pad, mode);
            let x = Tensor::from_vec(xs, dims, &Device::Cpu).unwrap();
            let k = Tensor::from_vec(ks, (4, 3, kh, kh), &Device::Cpu).unwrap();
            let y = conv2d(&x, &k, None, stride, pad, mode).unwrap();
            assert_eq!(y.dims(), &[2, 4, oh, ow]);
            let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{mode:?} {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_input_gradient_is_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> for every padding mode, which pins the
        // fold to be the exact adjoint of the unfold.
        for mode in [Padding::Zero, Padding::Reflect] {
            let x = Var::from_vec(ramp(2 * 5 * 6, 0.1), (1, 2, 5, 6), &Device::Cpu).unwrap();
            let k = Tensor::from_vec(ramp(3 * 2 * 9, 0.07), (3, 2, 3, 3), &Device::Cpu).unwrap();
            let y = conv2d(&x, &k, None, 2, 1, mode).unwrap();
            let g = Tensor::from_vec(ramp(y.elem_count(), 0.3), y.shape(), &Device::Cpu).unwrap();
            let lhs = (&y * &g).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            let grads = (&y * &g).unwrap().sum_all().unwrap().backward().unwrap();
            let gx = grads.get(&x).unwrap();
            let rhs = (x.as_tensor() * gx).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{mode:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let xs = ramp(2 * 6 * 6, 0.1);
        let ks = ramp(2 * 2 * 9, 0.05);
        let x = Var::from_vec(xs.clone(), (1, 2, 6, 6), &Device::Cpu).unwrap();
        let k = Var::from_vec(ks.clone(), (2, 2, 3, 3), &Device::Cpu).unwrap();
        let loss = |x: &Tensor, k: &Tensor| {
            conv2d(x, k, None, 1, 1, Padding::Reflect)
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
        };
        let grads = loss(&x, &k).backward().unwrap();
        let gk = grads.get(&k).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for i in [0usize, 5, 17, 30] {
            let mut plus = ks.clone();
            plus[i] += eps;
            let mut minus = ks.clone();
            minus[i] -= eps;
            let xt = Tensor::from_vec(xs.clone(), (1, 2, 6, 6), &Device::Cpu).unwrap();
            let f = |v: Vec<f64>| {
                loss(&xt, &Tensor::from_vec(v, (2, 2, 3, 3), &Device::Cpu).unwrap())
                    .to_scalar::<f64>()
                    .unwrap()
            };
            let fd = (f(plus) - f(minus)) / (2.0 * eps);
            assert!((fd - gk[i]).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {}", gk[i]);
        }
    }

    #[test]
    fn pixel_shuffle_layout_matches_reference_ordering() {
        // Channel c*r*r + i*r + j lands at spatial offset (i, j) of output channel c.
        let x = Tensor::arange(0f32, 8.0, &Device::Cpu).unwrap().reshape((1, 8, 1, 1)).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2, 2]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![0., 1., 2., 3., 4., 5., 6., 7.]);
    }

    #[test]
    fn stable_activations() {
        let x = Tensor::new(&[-1000f32, -1.0, 0.0, 2.0, 1000.0], &Device::Cpu).unwrap();
        let s = sigmoid(&x).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 0.268_941_4).abs() < 1e-6);
        assert_eq!(s[2], 0.5);
        assert_eq!(s[4], 1.0);
        let sp = softplus(&x).unwrap().to_vec1::<f32>().unwrap();
        assert!(sp.iter().all(|v| v.is_finite()));
        assert!((sp[2] - std::f32::consts::LN_2).abs() < 1e-6);
        let l = leaky_relu(&x, 0.2).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(l[1], -0.2);
        assert_eq!(l[3], 2.0);
    }

    #[test]
    fn avg_pool_drops_odd_edge() {
        let x = Tensor::arange(0f64, 15.0, &Device::Cpu).unwrap().reshape((1, 1, 3, 5)).unwrap();
        let y = avg_pool2(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 2]);
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![3.0, 5.0]);
        assert_eq!(y.dtype(), DType::F64);
    }
}
