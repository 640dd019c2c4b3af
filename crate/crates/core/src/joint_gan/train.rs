use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{consistency_loss, pyramid, JointGan, JointGanConfig, ScaleOutput, DISCRIMINATORS, GENERATOR};
use crate::nn::{ops, scalar_f64, Adam, AdamConfig};
use crate::trainer::{read_sidecar, read_tensors, sample_seed, write_archive, CODE_VERSION, FORMAT_VERSION};
use crate::wireframe::{augment, AugmentParams, Jitter, PairedSample, RasterImage};
use crate::{Error, Result};

/// Losses of one joint step, computed before the respective update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub step: u64,
    /// Wireframe and scene discriminator losses per scale, coarsest first.
    pub d_wire: Vec<f64>,
    pub d_scene: Vec<f64>,
    /// Generator adversarial loss summed over scales and branches.
    pub g_adv: f64,
    /// Consistency term summed over adjacent scale pairs.
    pub con: f64,
    pub g_total: f64,
}

impl JointReport {
    pub fn is_finite(&self) -> bool {
        self.d_wire
            .iter()
            .chain(&self.d_scene)
            .chain([&self.g_adv, &self.con, &self.g_total])
            .all(|v| v.is_finite())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCheckpointMeta {
    pub format_version: u32,
    pub code_version: String,
    pub config: JointGanConfig,
    pub epoch: usize,
    pub step: u64,
    pub gen_opt_steps: u64,
    pub dis_opt_steps: u64,
}

/// `mean softplus(-real) + mean softplus(fake)`.
fn d_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    Ok((ops::softplus(&real.neg()?)?.mean_all()? + ops::softplus(fake)?.mean_all()?)?)
}

/// Non-saturating generator loss `mean softplus(-fake)`.
fn g_loss(fake: &Tensor) -> Result<Tensor> {
    Ok(ops::softplus(&fake.neg()?)?.mean_all()?)
}

pub struct JointTrainer {
    model: JointGan,
    gen_opt: Adam,
    dis_opt: Adam,
    epoch: usize,
    step: u64,
}

impl JointTrainer {
    pub fn new(config: JointGanConfig) -> Result<Self> {
        let model = JointGan::new(config.clone(), config.seed)?;
        let adam = AdamConfig {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            ..Default::default()
        };
        let gen_opt = Adam::new(model.store().params_under(&format!("{GENERATOR}.")), adam);
        let dis_opt = Adam::new(model.store().params_under(&format!("{DISCRIMINATORS}.")), adam);
        Ok(Self {
            model,
            gen_opt,
            dis_opt,
            epoch: 0,
            step: 0,
        })
    }

    pub fn resume(path: &Path) -> Result<Self> {
        let meta: JointCheckpointMeta = read_sidecar(path)?;
        let tensors = read_tensors(path)?;
        let mut t = Self::new(meta.config)?;
        t.model.store().load(&tensors)?;
        t.gen_opt.load_state("opt.gen", &tensors, meta.gen_opt_steps)?;
        t.dis_opt.load_state("opt.dis", &tensors, meta.dis_opt_steps)?;
        t.epoch = meta.epoch;
        t.step = meta.step;
        Ok(t)
    }

    pub fn model(&self) -> &JointGan {
        &self.model
    }

    pub fn config(&self) -> &JointGanConfig {
        self.model.config()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Standard-normal noise for `n` samples; the stream depends only on
    /// the seed and `key`.
    pub fn noise(&self, n: usize, key: u64) -> Result<Tensor> {
        let d = self.config().noise_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.config().seed, 0, key as usize));
        let v: Vec<f32> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Tensor::from_vec(v, (n, d), &Device::Cpu)?)
    }

    /// Per-scale `(wireframe, scene)` discriminator losses of real batches
    /// against generated outputs. Each discriminator only ever sees its own
    /// branch, so the pairing of `x` with `y` does not matter.
    pub fn discriminator_losses(
        &self,
        x: &[Tensor],
        y: &[Tensor],
        fakes: &[ScaleOutput],
    ) -> Result<Vec<(Tensor, Tensor)>> {
        let m = &self.model;
        (0..fakes.len())
            .map(|i| {
                let dw = d_loss(
                    &m.discriminate_wireframe(i, &x[i], true)?,
                    &m.discriminate_wireframe(i, &fakes[i].wireframe, true)?,
                )?;
                let ds = d_loss(
                    &m.discriminate_scene(i, &y[i], true)?,
                    &m.discriminate_scene(i, &fakes[i].scene, true)?,
                )?;
                Ok((dw, ds))
            })
            .collect()
    }

    /// One discriminator update on detached fakes, then one generator
    /// update on `sum_i adv_i + alpha_con * con_i`. `x` (N, 1, S, S) and
    /// `y` (N, 3, S, S) need not be paired; S is the top scale.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor) -> Result<JointReport> {
        let cfg = self.config().clone();
        let n = x.dim(0)?;
        let xs = pyramid(x, &cfg.scales)?;
        let ys = pyramid(y, &cfg.scales)?;
        let z = self.noise(n, self.step)?;
        let fakes = self.model.generate(&z, true)?;

        let detached: Vec<ScaleOutput> = fakes
            .iter()
            .map(|o| ScaleOutput {
                wireframe: o.wireframe.detach(),
                scene: o.scene.detach(),
            })
            .collect();
        let d = self.discriminator_losses(&xs, &ys, &detached)?;
        let mut report = JointReport {
            step: self.step,
            ..Default::default()
        };
        let mut d_total: Option<Tensor> = None;
        for (dw, ds) in &d {
            report.d_wire.push(scalar_f64(dw)?);
            report.d_scene.push(scalar_f64(ds)?);
            let t = (dw + ds)?;
            d_total = Some(match d_total {
                Some(acc) => (acc + t)?,
                None => t,
            });
        }
        self.ensure_finite(&report)?;
        let grads = d_total.expect("at least two scales").backward()?;
        self.dis_opt.step(&grads)?;

        let mut adv: Option<Tensor> = None;
        for (i, o) in fakes.iter().enumerate() {
            let t = (g_loss(&self.model.discriminate_wireframe(i, &o.wireframe, true)?)?
                + g_loss(&self.model.discriminate_scene(i, &o.scene, true)?)?)?;
            adv = Some(match adv {
                Some(acc) => (acc + t)?,
                None => t,
            });
        }
        let adv = adv.expect("at least two scales");
        let con = consistency_loss(&fakes, cfg.lambda1, cfg.lambda2)?;
        let total = (&adv + (&con * cfg.alpha_con)?)?;
        report.g_adv = scalar_f64(&adv)?;
        report.con = scalar_f64(&con)?;
        report.g_total = scalar_f64(&total)?;
        self.ensure_finite(&report)?;
        let grads = total.backward()?;
        self.gen_opt.step(&grads)?;
        self.step += 1;
        Ok(report)
    }

    fn ensure_finite(&self, report: &JointReport) -> Result<()> {
        if report.is_finite() {
            return Ok(());
        }
        let terms = report.to_json_line();
        tracing::error!(step = self.step, %terms, "non-finite joint loss");
        Err(Error::NonFinite { step: self.step, terms })
    }

    pub fn meta(&self) -> JointCheckpointMeta {
        JointCheckpointMeta {
            format_version: FORMAT_VERSION,
            code_version: CODE_VERSION.to_string(),
            config: self.config().clone(),
            epoch: self.epoch,
            step: self.step,
            gen_opt_steps: self.gen_opt.steps(),
            dis_opt_steps: self.dis_opt.steps(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: HashMap<String, Tensor> = self.model.store().tensors();
        tensors.extend(self.gen_opt.state_tensors("opt.gen"));
        tensors.extend(self.dis_opt.state_tensors("opt.dis"));
        write_archive(path, &self.meta(), &tensors)
    }
}

/// Trains over `data` with wireframes and scenes drawn in independent
/// orders, writing `metrics.jsonl` and `joint_eNNNN.bin` after each epoch.
/// Stops early once `max_steps` steps have run.
pub fn fit_joint(trainer: &mut JointTrainer, data: &[PairedSample], out_dir: &Path, max_steps: Option<u64>) -> Result<u64> {
    let cfg = trainer.config().clone();
    if data.len() < cfg.batch_size {
        return Err(Error::Dataset(format!(
            "need at least one full batch of {} samples, got {}",
            cfg.batch_size,
            data.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let top = cfg.top_scale();
    let params = AugmentParams {
        resize_to: top * 6 / 5,
        crop_to: top,
        jitter: Jitter::NONE,
        ..Default::default()
    };
    let limit = max_steps.unwrap_or(u64::MAX);
    while trainer.epoch < cfg.max_epochs && trainer.step < limit {
        let epoch = trainer.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, usize::MAX));
        let mut wire_order: Vec<usize> = (0..data.len()).collect();
        let mut scene_order = wire_order.clone();
        wire_order.shuffle(&mut rng);
        scene_order.shuffle(&mut rng);
        let batches = data.len() / cfg.batch_size;
        for b in 0..batches {
            if trainer.step >= limit {
                break;
            }
            let pick = |order: &[usize]| -> Vec<PairedSample> {
                order[b * cfg.batch_size..][..cfg.batch_size]
                    .iter()
                    .map(|&i| augment(&data[i], &params, &mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, i))))
                    .collect()
            };
            let wires = pick(&wire_order);
            let scenes = pick(&scene_order);
            let x = RasterImage::batch(&wires.iter().map(|s| &s.wireframe_raster).collect::<Vec<_>>())?;
            let y = RasterImage::batch(&scenes.iter().map(|s| &s.scene).collect::<Vec<_>>())?;
            let report = trainer.train_step(&x, &y)?;
            writeln!(log, "{}", report.to_json_line()).map_err(|e| Error::io(&log_path, e))?;
        }
        trainer.epoch += 1;
        tracing::info!(epoch = trainer.epoch, step = trainer.step, "joint epoch finished");
        trainer.save(&out_dir.join(format!("joint_e{:04}.bin", trainer.epoch)))?;
    }
    Ok(trainer.step)
}

/// Tiles top-scale samples into one RGB image: scenes on the first row,
/// their wireframes below.
pub fn sample_grid(output: &ScaleOutput) -> Result<RasterImage> {
    let scenes = RasterImage::from_tensor(&output.scene.to_dtype(DType::F32)?)?;
    let wires = RasterImage::from_tensor(&output.wireframe.to_dtype(DType::F32)?)?;
    let n = scenes.len();
    let (w, h) = (scenes[0].width(), scenes[0].height());
    let mut grid = RasterImage::filled(w * n, h * 2, 3, -1.0);
    for (k, (s, wf)) in scenes.iter().zip(&wires).enumerate() {
        for py in 0..h {
            for px in 0..w {
                for c in 0..3 {
                    grid.set(k * w + px, py, c, s.get(px, py, c));
                    grid.set(k * w + px, h + py, c, wf.get(px, py, 0));
                }
            }
        }
    }
    Ok(grid)
}
