//! Noise-to-(image, wireframe) generation: a shared generator maps noise to
//! a joint feature map, and two coarse-to-fine branches render wireframes
//! and scenes at each scale, each judged by its own discriminator.

mod consistency;
mod train;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

pub use consistency::{consistency_loss, PixelStats};
pub use train::{fit_joint, sample_grid, JointCheckpointMeta, JointReport, JointTrainer};

use crate::model::{ConvBlock, UpBlock};
use crate::nn::{ops, BatchNorm2d, Conv2d, ConvSpec, Linear, Padding, VarPath, VarStore};
use crate::{Error, Result};

pub const SHARED: &str = "g.shared";
pub const GENERATOR: &str = "g";
pub const DISCRIMINATORS: &str = "d";

/// Size of the shared generator's first feature map.
const SEED_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointGanConfig {
    pub noise_dim: usize,
    /// Output sizes, coarsest first, each twice the previous.
    pub scales: Vec<usize>,
    /// Channels of the joint feature map and of every branch stage.
    pub gen_channels: usize,
    pub dis_channels: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha_con: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for JointGanConfig {
    fn default() -> Self {
        Self {
            noise_dim: 100,
            scales: vec![32, 64, 128],
            gen_channels: 32,
            dis_channels: 64,
            lambda1: 1.0,
            lambda2: 5.0,
            alpha_con: 50.0,
            batch_size: 64,
            lr: 2e-3,
            beta1: 0.5,
            beta2: 0.999,
            max_epochs: 500,
            seed: 0,
        }
    }
}

impl JointGanConfig {
    /// Narrow networks for CPU smoke runs.
    pub fn toy() -> Self {
        Self {
            noise_dim: 32,
            gen_channels: 8,
            dis_channels: 8,
            batch_size: 4,
            ..Default::default()
        }
    }

    pub fn top_scale(&self) -> usize {
        *self.scales.last().expect("validated config has scales")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.noise_dim == 0 || self.gen_channels == 0 || self.dis_channels == 0 {
            return bad("noise_dim, gen_channels and dis_channels must be positive".into());
        }
        if self.scales.len() < 2 {
            return bad(format!("need at least two scales, got {:?}", self.scales));
        }
        let first = self.scales[0];
        if first < 2 * SEED_SIZE || !first.is_power_of_two() {
            return bad(format!("first scale must be a power of two >= {}, got {first}", 2 * SEED_SIZE));
        }
        if self.scales.windows(2).any(|w| w[1] != 2 * w[0]) {
            return bad(format!("scales must double at each step, got {:?}", self.scales));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("alpha_con", self.alpha_con)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.batch_size == 0 || !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("batch_size must be positive and lr non-negative".into());
        }
        Ok(())
    }
}

/// Generated wireframes `(N, 1, s, s)` and scenes `(N, 3, s, s)` at one
/// scale.
#[derive(Debug, Clone)]
pub struct ScaleOutput {
    pub wireframe: Tensor,
    pub scene: Tensor,
}

/// 3x3 conv block (batch norm, ReLU), then 7x7 conv and tanh.
#[derive(Debug, Clone)]
struct Head {
    block: ConvBlock,
    out: Conv2d,
}

impl Head {
    fn new(p: &VarPath, c: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            block: ConvBlock::new(&p.sub("block"), c, c, ConvSpec::same(3, Padding::Reflect), 0.0)?,
            out: Conv2d::new(&p.sub("out"), c, c_out, ConvSpec::same(7, Padding::Reflect))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.out.forward(&self.block.forward(x, train)?)?.tanh()?)
    }
}

/// One output branch: a stage per scale (the first is the identity on the
/// joint features) and a head per scale.
#[derive(Debug, Clone)]
struct Branch {
    stages: Vec<UpBlock>,
    heads: Vec<Head>,
}

impl Branch {
    fn new(p: &VarPath, cfg: &JointGanConfig, c_out: usize) -> Result<Self> {
        let c = cfg.gen_channels;
        let stages = (1..cfg.scales.len())
            .map(|i| UpBlock::new(&p.sub(format!("stage{i}")), c, c))
            .collect::<Result<_>>()?;
        let heads = (0..cfg.scales.len())
            .map(|i| Head::new(&p.sub(format!("head{i}")), c, c_out))
            .collect::<Result<_>>()?;
        Ok(Self { stages, heads })
    }

    fn forward(&self, joint: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut h = joint.clone();
        let mut out = vec![self.heads[0].forward(&h, train)?];
        for (stage, head) in self.stages.iter().zip(&self.heads[1..]) {
            h = stage.forward(&h, train)?;
            out.push(head.forward(&h, train)?);
        }
        Ok(out)
    }
}

/// Noise to joint feature map at the first scale.
#[derive(Debug, Clone)]
struct SharedGenerator {
    fc: Linear,
    norm: BatchNorm2d,
    ups: Vec<UpBlock>,
    seed_channels: usize,
}

impl SharedGenerator {
    fn new(p: &VarPath, cfg: &JointGanConfig) -> Result<Self> {
        let g = cfg.gen_channels;
        let seed_channels = 8 * g;
        let fc = Linear::new(&p.sub("fc"), cfg.noise_dim, seed_channels * SEED_SIZE * SEED_SIZE)?;
        let norm = BatchNorm2d::new(&p.sub("fc_bn"), seed_channels)?;
        let n_up = (cfg.scales[0] / SEED_SIZE).trailing_zeros() as usize;
        let mut ups = Vec::new();
        let mut c = seed_channels;
        for i in 0..n_up {
            let next = if i + 1 == n_up { g } else { (c / 2).max(g) };
            ups.push(UpBlock::new(&p.sub(format!("up{i}")), c, next)?);
            c = next;
        }
        Ok(Self {
            fc,
            norm,
            ups,
            seed_channels,
        })
    }

    fn forward(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        let n = z.dim(0)?;
        let h = self.fc.forward(z)?.reshape((n, self.seed_channels, SEED_SIZE, SEED_SIZE))?;
        let mut h = self.norm.forward(&h, train)?.relu()?;
        for up in &self.ups {
            h = up.forward(&h, train)?;
        }
        Ok(h)
    }
}

/// Unconditional critic for one scale and branch, producing one logit per
/// image.
#[derive(Debug, Clone)]
struct ScaleDiscriminator {
    first: Conv2d,
    blocks: Vec<ConvBlock>,
    last: Conv2d,
}

impl ScaleDiscriminator {
    fn new(p: &VarPath, c_in: usize, size: usize, d: usize) -> Result<Self> {
        let down = ConvSpec::same(4, Padding::Zero).pad(1).stride(2);
        let first = Conv2d::new(&p.sub("l0"), c_in, d, down)?;
        let mut blocks = Vec::new();
        let (mut c, mut s, mut i) = (d, size / 2, 1);
        while s > SEED_SIZE {
            let next = (2 * c).min(8 * d);
            blocks.push(ConvBlock::new(&p.sub(format!("l{i}")), c, next, down.no_bias(), 0.2)?);
            c = next;
            s /= 2;
            i += 1;
        }
        let last = Conv2d::new(&p.sub(format!("l{i}")), c, 1, ConvSpec::same(SEED_SIZE, Padding::Zero).pad(0))?;
        Ok(Self { first, blocks, last })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = ops::leaky_relu(&self.first.forward(x)?, 0.2)?;
        for b in &self.blocks {
            h = b.forward(&h, train)?;
        }
        Ok(self.last.forward(&h)?.flatten_from(1)?.squeeze(D::Minus1)?)
    }
}

/// Shared generator, both branches, and a wireframe and scene discriminator
/// per scale. Generator parameters live under `g.`, discriminators under
/// `d.`.
#[derive(Debug)]
pub struct JointGan {
    config: JointGanConfig,
    store: VarStore,
    shared: SharedGenerator,
    wire: Branch,
    scene: Branch,
    dis_wire: Vec<ScaleDiscriminator>,
    dis_scene: Vec<ScaleDiscriminator>,
}

impl JointGan {
    pub fn new(config: JointGanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = VarStore::new(seed);
        let root = store.root();
        let g = root.sub(GENERATOR);
        let shared = SharedGenerator::new(&g.sub("shared"), &config)?;
        let wire = Branch::new(&g.sub("w"), &config, 1)?;
        let scene = Branch::new(&g.sub("s"), &config, 3)?;
        let d = root.sub(DISCRIMINATORS);
        let mut dis_wire = Vec::new();
        let mut dis_scene = Vec::new();
        for (i, &s) in config.scales.iter().enumerate() {
            dis_wire.push(ScaleDiscriminator::new(&d.sub(format!("w{i}")), 1, s, config.dis_channels)?);
            dis_scene.push(ScaleDiscriminator::new(&d.sub(format!("s{i}")), 3, s, config.dis_channels)?);
        }
        Ok(Self {
            config,
            store,
            shared,
            wire,
            scene,
            dis_wire,
            dis_scene,
        })
    }

    pub fn config(&self) -> &JointGanConfig {
        &self.config
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    /// Joint feature map `(N, gen_channels, s0, s0)` for noise `(N, noise_dim)`.
    pub fn joint_features(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        let (_, d) = z.dims2().map_err(|_| Error::Shape(format!("noise must be (N, D), got {:?}", z.dims())))?;
        if d != self.config.noise_dim {
            return Err(Error::Shape(format!("noise has {d} dims, model expects {}", self.config.noise_dim)));
        }
        self.shared.forward(z, train)
    }

    /// Wireframe and scene at every scale, coarsest first.
    pub fn generate(&self, z: &Tensor, train: bool) -> Result<Vec<ScaleOutput>> {
        let joint = self.joint_features(z, train)?;
        let w = self.wire.forward(&joint, train)?;
        let s = self.scene.forward(&joint, train)?;
        Ok(w.into_iter()
            .zip(s)
            .map(|(wireframe, scene)| ScaleOutput { wireframe, scene })
            .collect())
    }

    /// Wireframe discriminator logits `(N,)` at scale index `i`.
    pub fn discriminate_wireframe(&self, i: usize, x: &Tensor, train: bool) -> Result<Tensor> {
        self.dis_wire[i].forward(x, train)
    }

    /// Scene discriminator logits `(N,)` at scale index `i`.
    pub fn discriminate_scene(&self, i: usize, y: &Tensor, train: bool) -> Result<Tensor> {
        self.dis_scene[i].forward(y, train)
    }
}

/// Successively 2x average-pooled copies of `x`, coarsest first, one per
/// scale.
pub fn pyramid(x: &Tensor, scales: &[usize]) -> Result<Vec<Tensor>> {
    let (_, _, h, w) = x.dims4()?;
    let top = *scales.last().ok_or_else(|| Error::Config("no scales".into()))?;
    if (h, w) != (top, top) {
        return Err(Error::Shape(format!("real images must be {top}x{top}, got {h}x{w}")));
    }
    let mut out = vec![x.clone()];
    for _ in 1..scales.len() {
        let next = ops::avg_pool2(out.last().expect("non-empty"))?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}
