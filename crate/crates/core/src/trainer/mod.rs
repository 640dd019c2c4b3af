//! Alternating discriminator/generator optimisation of the renderer, with
//! checkpointing and a resumable epoch loop.

mod checkpoint;
mod config;
mod fit;

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Tensor};

pub use checkpoint::{
    check_schedule, checkpoint_name, load_checkpoint, load_meta, save_checkpoint, sidecar_path, BestScore, Checkpoint,
    CheckpointMeta, RngState, CODE_VERSION, FORMAT_VERSION,
};
pub use config::TrainConfig;
pub(crate) use checkpoint::{read_sidecar, read_tensors, write_archive};
pub use fit::{epoch_batches, fit, sample_seed, FitSummary};

use crate::model::{Renderer, DISCRIMINATOR, GENERATOR_GROUPS};
use crate::nn::{scalar_f64 as scalar, Adam, AdamConfig};
use crate::objectives::{
    d_adv_loss, g_adv_loss, gen_loss, hist_loss, perceptual_distance, rec_loss, total_loss, FeatureExtractor,
    LossReport,
};
use crate::wireframe::{color_histogram, PairedSample, RasterImage};
use crate::{Error, Result};

/// Stacks a batch into `(x, y, histograms)` tensors.
pub fn batch_tensors(batch: &[PairedSample], with_histograms: bool) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let rasters: Vec<&RasterImage> = batch.iter().map(|s| &s.wireframe_raster).collect();
    let scenes: Vec<&RasterImage> = batch.iter().map(|s| &s.scene).collect();
    let x = RasterImage::batch(&rasters)?;
    let y = RasterImage::batch(&scenes)?;
    let h = if with_histograms {
        let mut flat = Vec::with_capacity(batch.len() * crate::wireframe::HISTOGRAM_DIM);
        for s in batch {
            flat.extend(color_histogram(&s.scene)?.to_f32());
        }
        Some(Tensor::from_vec(flat, (batch.len(), crate::wireframe::HISTOGRAM_DIM), x.device())?)
    } else {
        None
    };
    Ok((x, y, h))
}

/// Model, both optimisers and the position in the schedule.
pub struct Trainer {
    config: TrainConfig,
    model: Renderer,
    extractor: Arc<dyn FeatureExtractor>,
    gen_opt: Adam,
    dis_opt: Adam,
    epoch: usize,
    step: u64,
    best: Option<BestScore>,
}

impl Trainer {
    /// Fresh model initialised from `config.seed`, with the configured
    /// perceptual trunk.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let ext = Arc::new(config.perceptual.build()?);
        Self::with_extractor(config, ext)
    }

    pub fn with_extractor(config: TrainConfig, extractor: Arc<dyn FeatureExtractor>) -> Result<Self> {
        config.validate()?;
        let model = Renderer::new(config.model.clone(), config.seed)?;
        let adam = AdamConfig {
            lr: config.lr_at(0),
            beta1: config.beta1,
            beta2: config.beta2,
            ..Default::default()
        };
        let gen_vars = GENERATOR_GROUPS
            .iter()
            .flat_map(|g| model.store().params_under(&format!("{g}.")))
            .collect();
        let gen_opt = Adam::new(gen_vars, adam);
        let dis_opt = Adam::new(model.store().params_under(&format!("{DISCRIMINATOR}.")), adam);
        Ok(Self {
            config,
            model,
            extractor,
            gen_opt,
            dis_opt,
            epoch: 0,
            step: 0,
            best: None,
        })
    }

    /// Restores weights, optimiser moments and counters from `path`.
    ///
    /// `config` may change anything except the model's shape schedule, which
    /// must match the checkpoint.
    pub fn resume(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let config = match config {
            Some(c) => {
                check_schedule(&ck.meta.config.model, &c.model)?;
                c
            }
            None => ck.meta.config.clone(),
        };
        let mut t = Self::new(config)?;
        t.restore(&ck)?;
        Ok(t)
    }

    /// Like [`Trainer::resume`] with a caller-supplied extractor.
    pub fn resume_with_extractor(path: &Path, config: TrainConfig, ext: Arc<dyn FeatureExtractor>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        check_schedule(&ck.meta.config.model, &config.model)?;
        let mut t = Self::with_extractor(config, ext)?;
        t.restore(&ck)?;
        Ok(t)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.model.store().load(&ck.tensors)?;
        self.gen_opt.load_state("opt.gen", &ck.tensors, ck.meta.gen_opt_steps)?;
        self.dis_opt.load_state("opt.dis", &ck.tensors, ck.meta.dis_opt_steps)?;
        self.epoch = ck.meta.epoch;
        self.step = ck.meta.step;
        self.best = ck.meta.best;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Renderer {
        &self.model
    }

    pub fn extractor(&self) -> &dyn FeatureExtractor {
        &*self.extractor
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn best(&self) -> Option<BestScore> {
        self.best
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.gen_opt.set_lr(lr);
        self.dis_opt.set_lr(lr);
    }

    pub fn lr(&self) -> f64 {
        self.gen_opt.lr()
    }

    /// One discriminator update on real pairs against detached generated
    /// pairs, then one generator update on the full objective. The report
    /// holds the values computed before either update is applied to the
    /// part of the network it describes.
    pub fn train_step(&mut self, batch: &[PairedSample]) -> Result<LossReport> {
        let guided = self.config.model.guidance.enabled;
        let (x, y, h) = batch_tensors(batch, guided)?;
        let w = self.config.weights.clone();
        let mode = self.config.gan_mode;

        let gen = self.model.generate(&x, h.as_ref(), true)?;
        let rec = rec_loss(&x, &gen.wireframe, &w, &self.config.ms_ssim)?;
        let gl = gen_loss(&y, &gen.scene, &w, &*self.extractor)?;
        let hist = match (&gen.histogram, &h) {
            (Some(pred), Some(target)) => Some(hist_loss(target, pred)?),
            _ => None,
        };

        let real = self.model.discriminate(&x, &y, true)?;
        let fake = self.model.discriminate(&gen.wireframe.detach(), &gen.scene.detach(), true)?;
        let adv_d = d_adv_loss(&real, &fake, mode)?;
        let mut report = LossReport {
            step: self.step,
            epoch: self.epoch,
            rec_l1: scalar(&rec.l1)?,
            rec_msssim: scalar(&rec.msssim)?,
            gen_l1: scalar(&gl.l1)?,
            gen_perc: scalar(&gl.perc)?,
            adv_d: scalar(&adv_d)?,
            hist: hist.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            ..Default::default()
        };
        self.ensure_finite(&report.clone().with_totals(&w))?;
        let d_grads = (&adv_d * w.lambda)?.backward()?;
        self.dis_opt.step(&d_grads)?;

        let fake = self.model.discriminate(&gen.wireframe, &gen.scene, true)?;
        let adv_g = g_adv_loss(&fake, mode)?;
        report.adv_g = scalar(&adv_g)?;
        let report = report.with_totals(&w);
        self.ensure_finite(&report)?;
        let total = total_loss(&rec.total, &gl.total, &adv_g, hist.as_ref(), &w)?;
        let g_grads = total.backward()?;
        self.gen_opt.step(&g_grads)?;
        self.step += 1;
        Ok(report)
    }

    /// Discriminator update alone, leaving the generator and the step counter
    /// untouched. Returns the pre-update discriminator loss.
    pub fn discriminator_step(&mut self, batch: &[PairedSample]) -> Result<f64> {
        let (x, y, h) = batch_tensors(batch, self.config.model.guidance.enabled)?;
        let gen = self.model.generate(&x, h.as_ref(), true)?;
        let real = self.model.discriminate(&x, &y, true)?;
        let fake = self.model.discriminate(&gen.wireframe.detach(), &gen.scene.detach(), true)?;
        let adv_d = d_adv_loss(&real, &fake, self.config.gan_mode)?;
        let value = scalar(&adv_d)?;
        let grads = (&adv_d * self.config.weights.lambda)?.backward()?;
        self.dis_opt.step(&grads)?;
        Ok(value)
    }

    fn ensure_finite(&self, report: &LossReport) -> Result<()> {
        if report.is_finite() {
            return Ok(());
        }
        let terms = report
            .terms()
            .iter()
            .map(|(k, v)| format!("{k}={v:e}"))
            .collect::<Vec<_>>()
            .join(", ");
        tracing::error!(step = self.step, %terms, "non-finite loss");
        Err(Error::NonFinite { step: self.step, terms })
    }

    /// Mean perceptual distance between generated and real scenes, in
    /// inference mode.
    pub fn evaluate_perceptual(&self, samples: &[PairedSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Dataset("no samples to evaluate".into()));
        }
        let guided = self.config.model.guidance.enabled;
        let mut sum = 0.0;
        for chunk in samples.chunks(self.config.batch_size) {
            let (x, y, h) = batch_tensors(chunk, guided)?;
            let gen = self.model.generate(&x, h.as_ref(), false)?;
            let d = perceptual_distance(&y, &gen.scene, &*self.extractor)?;
            sum += d.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(sum / samples.len() as f64)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            code_version: CODE_VERSION.to_string(),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            gen_opt_steps: self.gen_opt.steps(),
            dis_opt_steps: self.dis_opt.steps(),
            rng: RngState {
                seed: self.config.seed,
                next_epoch: self.epoch,
            },
            best: self.best,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.store().tensors();
        tensors.extend(self.gen_opt.state_tensors("opt.gen"));
        tensors.extend(self.dis_opt.state_tensors("opt.dis"));
        save_checkpoint(path, &self.meta(), &tensors)
    }

    pub(crate) fn finish_epoch(&mut self) {
        self.epoch += 1;
    }

    pub(crate) fn set_best(&mut self, best: BestScore) {
        self.best = Some(best);
    }
}

/// Loads a checkpoint's model for inference.
pub fn load_renderer(path: &Path) -> Result<(Renderer, CheckpointMeta)> {
    let ck = load_checkpoint(path)?;
    let model = Renderer::new(ck.meta.config.model.clone(), ck.meta.config.seed)?;
    model.store().load(&ck.tensors)?;
    Ok((model, ck.meta))
}
