//! The joint renderer: a shared encoder producing a 1/16-resolution latent
//! code, twin sub-pixel decoders for the wireframe and the scene, an
//! optional colour-histogram branch, and a conditional PatchGAN critic.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::nn::{ops, BatchNorm2d, Conv2d, ConvSpec, Linear, Padding, VarPath, VarStore};
use crate::wireframe::HISTOGRAM_DIM;
use crate::{Error, Result};

/// Parameter-group prefixes. The generator optimiser owns the first three,
/// the discriminator optimiser the last.
pub const ENCODER: &str = "enc";
pub const WIRE_DECODER: &str = "dec_w";
pub const SCENE_DECODER: &str = "dec_s";
pub const DISCRIMINATOR: &str = "dis";
pub const GENERATOR_GROUPS: [&str; 3] = [ENCODER, WIRE_DECODER, SCENE_DECODER];

/// Number of stride-2 encoder blocks, mirrored by the decoders.
pub const DOWNSAMPLES: usize = 4;
const CHANNEL_MULTS: [usize; DOWNSAMPLES + 1] = [1, 2, 4, 8, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub enabled: bool,
    pub histogram_dim: usize,
    /// Side of the square plane the histogram is projected to before being
    /// nearest-upsampled to the input size.
    pub projection_size: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            histogram_dim: HISTOGRAM_DIM,
            projection_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Depth in the pix2pix sense: `n_layers` stride-2 convolutions followed
    /// by two stride-1 ones. 3 gives the 70x70 receptive field.
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            n_layers: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RendererConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub res_blocks: usize,
    pub leaky_slope: f64,
    pub guidance: GuidanceConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            base_channels: 64,
            res_blocks: 4,
            leaky_slope: 0.2,
            guidance: GuidanceConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl RendererConfig {
    /// Narrow network for smoke training on the CPU.
    pub fn toy() -> Self {
        Self {
            base_channels: 8,
            guidance: GuidanceConfig {
                projection_size: 16,
                ..Default::default()
            },
            discriminator: DiscriminatorConfig {
                base_channels: 8,
                n_layers: 3,
            },
            ..Default::default()
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.base_channels * CHANNEL_MULTS[DOWNSAMPLES]
    }

    pub fn latent_size(&self) -> usize {
        self.input_size >> DOWNSAMPLES
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 1 << DOWNSAMPLES;
        if self.input_size < 2 * unit || self.input_size % unit != 0 {
            return Err(Error::Config(format!(
                "input_size must be a multiple of {unit} and at least {}, got {}",
                2 * unit,
                self.input_size
            )));
        }
        if self.base_channels == 0 || self.discriminator.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let g = &self.guidance;
        if g.enabled {
            if g.histogram_dim != HISTOGRAM_DIM {
                return Err(Error::Config(format!(
                    "guidance.histogram_dim must be {HISTOGRAM_DIM}, got {}",
                    g.histogram_dim
                )));
            }
            if g.projection_size == 0 || self.input_size % g.projection_size != 0 {
                return Err(Error::Config(format!(
                    "guidance.projection_size {} must divide input_size {}",
                    g.projection_size, self.input_size
                )));
            }
        }
        Ok(())
    }

    /// Dotted keys whose values fix tensor shapes, for checkpoint
    /// compatibility checks.
    pub fn schedule(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model.input_size", self.input_size.to_string()),
            ("model.base_channels", self.base_channels.to_string()),
            ("model.res_blocks", self.res_blocks.to_string()),
            ("model.guidance.enabled", self.guidance.enabled.to_string()),
            ("model.guidance.projection_size", self.guidance.projection_size.to_string()),
            ("model.discriminator.base_channels", self.discriminator.base_channels.to_string()),
            ("model.discriminator.n_layers", self.discriminator.n_layers.to_string()),
        ]
    }
}

/// Conv, batch norm, activation.
#[derive(Debug, Clone)]
pub(crate) struct ConvBlock {
    conv: Conv2d,
    norm: BatchNorm2d,
    slope: f64,
}

impl ConvBlock {
    pub(crate) fn new(p: &VarPath, c_in: usize, c_out: usize, spec: ConvSpec, slope: f64) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.sub("conv"), c_in, c_out, spec.no_bias())?,
            norm: BatchNorm2d::new(&p.sub("bn"), c_out)?,
            slope,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.norm.forward(&self.conv.forward(x)?, train)?;
        Ok(ops::leaky_relu(&y, self.slope)?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: ConvBlock,
    b_conv: Conv2d,
    b_norm: BatchNorm2d,
}

impl ResBlock {
    fn new(p: &VarPath, ch: usize) -> Result<Self> {
        let spec = ConvSpec::same(3, Padding::Reflect);
        Ok(Self {
            a: ConvBlock::new(&p.sub("a"), ch, ch, spec, 0.0)?,
            b_conv: Conv2d::new(&p.sub("b").sub("conv"), ch, ch, spec.no_bias())?,
            b_norm: BatchNorm2d::new(&p.sub("b").sub("bn"), ch)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.a.forward(x, train)?;
        let h = self.b_norm.forward(&self.b_conv.forward(&h)?, train)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    guide: Option<(Linear, usize)>,
    stem: ConvBlock,
    down: Vec<ConvBlock>,
    res: Vec<ResBlock>,
}

impl Encoder {
    fn new(p: &VarPath, cfg: &RendererConfig) -> Result<Self> {
        let b = cfg.base_channels;
        let slope = cfg.leaky_slope;
        let guide = if cfg.guidance.enabled {
            let ps = cfg.guidance.projection_size;
            Some((Linear::new(&p.sub("guide"), cfg.guidance.histogram_dim, ps * ps)?, ps))
        } else {
            None
        };
        let c_in = 1 + guide.is_some() as usize;
        let stem = ConvBlock::new(&p.sub("stem"), c_in, b, ConvSpec::same(7, Padding::Reflect), slope)?;
        let mut down = Vec::new();
        for i in 0..DOWNSAMPLES {
            let spec = ConvSpec::same(3, Padding::Reflect).stride(2);
            down.push(ConvBlock::new(
                &p.sub(format!("down{i}")),
                b * CHANNEL_MULTS[i],
                b * CHANNEL_MULTS[i + 1],
                spec,
                slope,
            )?);
        }
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(&p.sub(format!("res{i}")), cfg.latent_channels()))
            .collect::<Result<_>>()?;
        Ok(Self { guide, stem, down, res })
    }

    fn forward(&self, x: &Tensor, hist: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let (n, _, h, _) = x.dims4()?;
        let mut input = x.clone();
        if let Some((proj, ps)) = &self.guide {
            let hist = match hist {
                Some(t) => t.to_dtype(x.dtype())?,
                None => Tensor::full(1.0 / 256.0, (n, HISTOGRAM_DIM), x.device())?.to_dtype(x.dtype())?,
            };
            let plane = proj.forward(&hist)?.reshape((n, 1, *ps, *ps))?;
            let plane = ops::upsample_nearest(&plane, h / ps)?;
            input = Tensor::cat(&[x, &plane], 1)?;
        } else if hist.is_some() {
            return Err(Error::Config("histogram guidance given to a model built without it".into()));
        }
        let mut y = self.stem.forward(&input, train)?;
        for block in &self.down {
            y = block.forward(&y, train)?;
        }
        for block in &self.res {
            y = block.forward(&y, train)?;
        }
        Ok(y)
    }
}

/// 3x3 conv to `4 * c_out` channels, pixel shuffle x2, batch norm, ReLU.
#[derive(Debug, Clone)]
pub(crate) struct UpBlock {
    conv: Conv2d,
    norm: BatchNorm2d,
}

impl UpBlock {
    pub(crate) fn new(p: &VarPath, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.sub("conv"), c_in, 4 * c_out, ConvSpec::same(3, Padding::Reflect).no_bias())?,
            norm: BatchNorm2d::new(&p.sub("bn"), c_out)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = ops::pixel_shuffle(&self.conv.forward(x)?, 2)?;
        Ok(self.norm.forward(&y, train)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    up: Vec<UpBlock>,
    head: Conv2d,
}

impl Decoder {
    fn new(p: &VarPath, cfg: &RendererConfig, c_out: usize) -> Result<Self> {
        let b = cfg.base_channels;
        let mut up = Vec::new();
        let mut c = cfg.latent_channels();
        for i in 0..DOWNSAMPLES {
            let next = b * CHANNEL_MULTS[DOWNSAMPLES - 1 - i];
            up.push(UpBlock::new(&p.sub(format!("up{i}")), c, next)?);
            c = next;
        }
        let head = Conv2d::new(&p.sub("head"), c, c_out, ConvSpec::same(7, Padding::Reflect))?;
        Ok(Self { up, head })
    }

    /// Returns the image and the activations feeding the output head.
    fn forward(&self, e: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let mut y = e.clone();
        for block in &self.up {
            y = block.forward(&y, train)?;
        }
        Ok((self.head.forward(&y)?.tanh()?, y))
    }
}

/// Conditional PatchGAN critic over the channel-concatenated pair.
#[derive(Debug, Clone)]
struct PatchDiscriminator {
    first: Conv2d,
    blocks: Vec<ConvBlock>,
    last: Conv2d,
    slope: f64,
}

impl PatchDiscriminator {
    fn new(p: &VarPath, cfg: &RendererConfig) -> Result<Self> {
        let d = cfg.discriminator.base_channels;
        let slope = cfg.leaky_slope;
        let spec = ConvSpec::same(4, Padding::Zero).pad(1);
        let first = Conv2d::new(&p.sub("l0"), 4, d, spec.stride(2))?;
        let mut blocks = Vec::new();
        let mut c = d;
        let n = cfg.discriminator.n_layers;
        for i in 1..=n {
            let next = d * (1 << i.min(3));
            let stride = if i < n { 2 } else { 1 };
            blocks.push(ConvBlock::new(&p.sub(format!("l{i}")), c, next, spec.stride(stride), slope)?);
            c = next;
        }
        let last = Conv2d::new(&p.sub(format!("l{}", n + 1)), c, 1, spec)?;
        Ok(Self { first, blocks, last, slope })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = ops::leaky_relu(&self.first.forward(x)?, self.slope)?;
        for block in &self.blocks {
            y = block.forward(&y, train)?;
        }
        self.last.forward(&y)
    }
}

/// Outputs of one generator pass.
#[derive(Debug, Clone)]
pub struct Generated {
    pub latent: Tensor,
    pub wireframe: Tensor,
    pub scene: Tensor,
    /// `(N, 768)` reconstructed histogram when guidance is enabled.
    pub histogram: Option<Tensor>,
}

/// Encoder, both decoders, the histogram head and the discriminator, with
/// their parameters registered in one [`VarStore`] under the group prefixes.
#[derive(Debug)]
pub struct Renderer {
    config: RendererConfig,
    store: VarStore,
    encoder: Encoder,
    wire_decoder: Decoder,
    scene_decoder: Decoder,
    hist_head: Option<Linear>,
    discriminator: PatchDiscriminator,
}

impl Renderer {
    pub fn new(config: RendererConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = VarStore::new(seed);
        let root = store.root();
        let encoder = Encoder::new(&root.sub(ENCODER), &config)?;
        let wire_decoder = Decoder::new(&root.sub(WIRE_DECODER), &config, 1)?;
        let scene_path = root.sub(SCENE_DECODER);
        let scene_decoder = Decoder::new(&scene_path, &config, 3)?;
        let hist_head = if config.guidance.enabled {
            Some(Linear::new(&scene_path.sub("hist"), config.base_channels, config.guidance.histogram_dim)?)
        } else {
            None
        };
        let discriminator = PatchDiscriminator::new(&root.sub(DISCRIMINATOR), &config)?;
        Ok(Self {
            config,
            store,
            encoder,
            wire_decoder,
            scene_decoder,
            hist_head,
            discriminator,
        })
    }

    pub fn config(&self) -> &RendererConfig {
        &self.config
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    fn check_input(&self, t: &Tensor, channels: usize, what: &str) -> Result<()> {
        let s = self.config.input_size;
        let (_, c, h, w) = t.dims4()?;
        if (c, h, w) != (channels, s, s) {
            return Err(Error::Shape(format!(
                "{what} must be (N, {channels}, {s}, {s}), got {:?}",
                t.dims()
            )));
        }
        Ok(())
    }

    /// `x`: (N, 1, S, S) wireframe rasters; `hist`: optional (N, 768).
    /// A guided model given no histogram conditions on the uniform one.
    pub fn encode(&self, x: &Tensor, hist: Option<&Tensor>, train: bool) -> Result<Tensor> {
        self.check_input(x, 1, "wireframe raster")?;
        if let Some(h) = hist {
            let n = x.dim(0)?;
            if h.dims() != [n, HISTOGRAM_DIM] {
                return Err(Error::Shape(format!("histogram must be ({n}, {HISTOGRAM_DIM}), got {:?}", h.dims())));
            }
        }
        self.encoder.forward(x, hist, train)
    }

    pub fn decode_wireframe(&self, e: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.wire_decoder.forward(e, train)?.0)
    }

    /// Returns the scene and the penultimate scene-decoder activations.
    pub fn decode_scene(&self, e: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        self.scene_decoder.forward(e, train)
    }

    /// Global-average-pooled scene features through an affine map and a
    /// sigmoid: (N, 768) values in (0, 1), not renormalised.
    pub fn reconstruct_histogram(&self, scene_features: &Tensor) -> Result<Tensor> {
        let head = self
            .hist_head
            .as_ref()
            .ok_or_else(|| Error::Config("histogram reconstruction needs guidance.enabled".into()))?;
        let pooled = scene_features.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(ops::sigmoid(&head.forward(&pooled)?)?)
    }

    /// Unbounded patch scores, (N, 1, P, P).
    pub fn discriminate(&self, x: &Tensor, y: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(x, 1, "wireframe raster")?;
        self.check_input(y, 3, "scene")?;
        if x.dim(0)? != y.dim(0)? {
            return Err(Error::Shape("wireframe and scene batch sizes differ".into()));
        }
        self.discriminator.forward(&Tensor::cat(&[x, y], 1)?, train)
    }

    pub fn generate(&self, x: &Tensor, hist: Option<&Tensor>, train: bool) -> Result<Generated> {
        let latent = self.encode(x, hist, train)?;
        let wireframe = self.decode_wireframe(&latent, train)?;
        let (scene, features) = self.decode_scene(&latent, train)?;
        let histogram = match &self.hist_head {
            Some(_) => Some(self.reconstruct_histogram(&features)?),
            None => None,
        };
        Ok(Generated {
            latent,
            wireframe,
            scene,
            histogram,
        })
    }
}
