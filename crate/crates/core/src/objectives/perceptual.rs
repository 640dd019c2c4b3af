use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{ops, Padding};
use crate::{Error, Result};

/// A frozen network mapping (N, 3, H, W) images in [-1, 1] to an ordered
/// list of (N, C_l, H_l, W_l) activations.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// One tap returning its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

/// Shape and weight source of the VGG16 perceptual trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VggConfig {
    /// Widths of the five conv stages.
    pub widths: [usize; 5],
    /// Pretrained safetensors file; when absent the trunk is random from `seed`.
    pub weights: Option<PathBuf>,
    pub seed: u64,
}

impl Default for VggConfig {
    fn default() -> Self {
        Self {
            widths: [64, 128, 256, 512, 512],
            weights: None,
            seed: 0,
        }
    }
}

impl VggConfig {
    /// 1/16-width network for CPU smoke runs.
    pub fn toy() -> Self {
        Self {
            widths: [4, 8, 16, 32, 32],
            ..Default::default()
        }
    }

    pub fn build(&self) -> Result<Vgg16Features> {
        let vgg = Vgg16Features::new(self.clone());
        match &self.weights {
            Some(path) => vgg.load(path),
            None => {
                if self.widths == VggConfig::default().widths {
                    tracing::warn!("no pretrained VGG16 weights configured; perceptual features are random");
                }
                vgg.init_random(self.seed)
            }
        }
    }

    fn layers(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut c = 3;
        for (stage, &w) in self.widths.iter().enumerate() {
            let convs = if stage < 2 { 2 } else { 3 };
            for _ in 0..convs {
                out.push((c, w));
                c = w;
            }
        }
        out
    }
}

const STAGE_CONVS: [usize; 5] = [2, 2, 3, 3, 3];
const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// VGG16 convolutional trunk tapped after the last ReLU of each stage
/// (relu1_2, relu2_2, relu3_3, relu4_3, relu5_3).
///
/// Starts uninitialised; call [`Vgg16Features::load`] for pretrained
/// torchvision weights or [`Vgg16Features::init_random`] for a seeded
/// random trunk.
#[derive(Debug, Clone)]
pub struct Vgg16Features {
    config: VggConfig,
    convs: Option<Vec<(Tensor, Tensor)>>,
}

impl Vgg16Features {
    pub fn new(config: VggConfig) -> Self {
        Self { config, convs: None }
    }

    pub fn is_initialized(&self) -> bool {
        self.convs.is_some()
    }

    /// He-normal weights from a seed, zero biases.
    pub fn init_random(mut self, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        for (c_in, c_out) in self.config.layers() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let w: Vec<f32> = (0..c_out * c_in * 9).map(|_| normal.sample(&mut rng) as f32).collect();
            convs.push((
                Tensor::from_vec(w, (c_out, c_in, 3, 3), &Device::Cpu)?,
                Tensor::zeros(c_out, DType::F32, &Device::Cpu)?,
            ));
        }
        self.convs = Some(convs);
        Ok(self)
    }

    /// Loads `features.{i}.weight` / `features.{i}.bias` tensors as saved
    /// from a torchvision `vgg16().features` state dict.
    pub fn load(mut self, path: &Path) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut convs = Vec::new();
        let mut index = 0;
        let layers = self.config.layers();
        let mut li = 0;
        for &n in &STAGE_CONVS {
            for _ in 0..n {
                let (c_in, c_out) = layers[li];
                let get = |suffix: &str, shape: &[usize]| -> Result<Tensor> {
                    let key = format!("features.{index}.{suffix}");
                    let t = tensors
                        .get(&key)
                        .ok_or_else(|| Error::Config(format!("{}: missing tensor {key}", path.display())))?;
                    if t.dims() != shape {
                        return Err(Error::Shape(format!("{key}: expected {shape:?}, got {:?}", t.dims())));
                    }
                    Ok(t.to_dtype(DType::F32)?)
                };
                convs.push((get("weight", &[c_out, c_in, 3, 3])?, get("bias", &[c_out])?));
                index += 2;
                li += 1;
            }
            index += 1;
        }
        self.convs = Some(convs);
        Ok(self)
    }
}

impl FeatureExtractor for Vgg16Features {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let convs = self
            .convs
            .as_ref()
            .ok_or_else(|| Error::Config("perceptual extractor used before its weights were initialised".into()))?;
        let dev = x.device();
        let mean = Tensor::new(&IMAGENET_MEAN, dev)?.reshape((1, 3, 1, 1))?.to_dtype(x.dtype())?;
        let std = Tensor::new(&IMAGENET_STD, dev)?.reshape((1, 3, 1, 1))?.to_dtype(x.dtype())?;
        let mut h = ((x + 1.0)? * 0.5)?.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let mut taps = Vec::with_capacity(5);
        let mut it = convs.iter();
        for (stage, &n) in STAGE_CONVS.iter().enumerate() {
            if stage > 0 {
                h = h.max_pool2d(2)?;
            }
            for _ in 0..n {
                let (w, b) = it.next().expect("layer count");
                let w = w.to_dtype(x.dtype())?;
                let b = b.to_dtype(x.dtype())?;
                h = ops::conv2d(&h, &w, Some(&b), 1, 1, Padding::Zero)?.relu()?;
            }
            taps.push(h.clone());
        }
        Ok(taps)
    }
}

/// Per-sample perceptual distance, shape (N,).
///
/// Each tap is unit-normalised over channels at every position, then the
/// squared difference is summed over channels and positions and divided by
/// the tap's H * W. Taps are summed.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, ext: &dyn FeatureExtractor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "perceptual inputs differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let fa = ext.features(a)?;
    let fb = ext.features(b)?;
    let mut total: Option<Tensor> = None;
    for (pa, pb) in fa.iter().zip(&fb) {
        let (_, _, h, w) = pa.dims4()?;
        let unit = |p: &Tensor| -> Result<Tensor> {
            let norm = (p.sqr()?.sum_keepdim(1)? + 1e-20)?.sqrt()?;
            Ok(p.broadcast_div(&norm)?)
        };
        let d = (unit(pa)? - unit(pb)?)?.sqr()?.flatten_from(1)?.sum(D::Minus1)?;
        let d = (d / (h * w) as f64)?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    total.ok_or_else(|| Error::Config("feature extractor produced no taps".into()))
}
