//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Positional arguments filter criteria by substring of their name.

mod support;

use std::collections::HashMap;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use candle_core::{DType, Device, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;
use wr_cli::{router, Engine, ServiceConfig};
use wr_core::joint_gan::{consistency_loss, fit_joint, pyramid, JointGanConfig, JointTrainer, ScaleOutput};
use wr_core::metrics::{fid, inception_score, match_predictions, sap, FeatureStats, LineSet, ScoredLine};
use wr_core::model::{
    DiscriminatorConfig, GuidanceConfig, Renderer, RendererConfig, DISCRIMINATOR, ENCODER, GENERATOR_GROUPS,
    SCENE_DECODER, WIRE_DECODER,
};
use wr_core::objectives::{
    d_adv_loss, g_adv_loss, gen_loss, hist_loss, ms_ssim, perceptual_distance, rec_loss, FeatureExtractor, GanMode,
    IdentityExtractor, LossWeights, MsSsimConfig, VggConfig,
};
use wr_core::trainer::{batch_tensors, fit, TrainConfig, Trainer};
use wr_core::wireframe::toy::{toy_samples, write_toy_dataset};
use wr_core::wireframe::{load_dataset_with, AugmentParams, DatasetOptions, Jitter, PairedSample, RasterImage, Split};

/// Outcome line detail; `Err` means the check itself failed to run.
type Check = Result<(bool, String)>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn(&mut Shared) -> Check,
}

/// State carried from the overfit run to the sAP check.
#[derive(Default)]
struct Shared {
    overfit: Option<Overfit>,
}

struct Overfit {
    trainer: Trainer,
    data: Vec<PairedSample>,
    train_secs: f64,
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion {
            name: "loss_identity",
            budget: Duration::from_secs(10),
            run: loss_identity,
        },
        Criterion {
            name: "gradient_suite",
            budget: Duration::from_secs(60),
            run: gradient_suite,
        },
        Criterion {
            name: "metric_oracles",
            budget: Duration::from_secs(60),
            run: metric_oracles,
        },
        Criterion {
            name: "architecture",
            budget: Duration::from_secs(120),
            run: architecture,
        },
        Criterion {
            name: "overfit_smoke",
            budget: Duration::from_secs(2 * 3600),
            run: overfit_smoke,
        },
        Criterion {
            name: "sap_directionality",
            budget: Duration::from_secs(600),
            run: sap_directionality,
        },
        Criterion {
            name: "joint_gan",
            budget: Duration::from_secs(300),
            run: joint_gan,
        },
        Criterion {
            name: "service_contract",
            budget: Duration::from_secs(120),
            run: service_contract,
        },
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str()))) {
        let start = Instant::now();
        let outcome = (c.run)(&mut shared);
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e:#}")),
        };
        let in_budget = elapsed <= c.budget;
        let pass = ok && in_budget;
        failed += usize::from(!pass);
        println!(
            "{} {} ({:.1}s of {}s){}: {detail}",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_budget { "" } else { " over budget" },
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), lo: f64, hi: f64) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

// ---------------------------------------------------------------- losses

fn loss_identity(_: &mut Shared) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = LossWeights::default();
    let ms = MsSsimConfig::default();
    let x = uniform(&mut rng, (2, 1, 176, 176), -1.0, 1.0)?.to_dtype(DType::F32)?;
    let y = uniform(&mut rng, (2, 3, 64, 64), -1.0, 1.0)?.to_dtype(DType::F32)?;
    let vgg = VggConfig::toy().build()?;
    let h = Tensor::from_vec(
        (0..2 * 768).map(|i| (i % 7) as f32 / 7.0).collect::<Vec<_>>(),
        (2, 768),
        &Device::Cpu,
    )?;
    let values = [
        ("rec", scalar(&rec_loss(&x, &x, &w, &ms)?.total)?),
        ("gen", scalar(&gen_loss(&y, &y, &w, &vgg)?.total)?),
        ("perceptual", scalar(&perceptual_distance(&y, &y, &vgg)?.sum_all()?)?),
        ("hist", scalar(&hist_loss(&h, &h)?)?),
    ];
    let ssim = ms_ssim(&x, &x, &ms)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let worst = values.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max);
    let ssim_dev = ssim.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let detail = values
        .iter()
        .map(|(k, v)| format!("{k}={v:.1e}"))
        .chain([format!("ms_ssim-1={ssim_dev:.1e}")])
        .collect::<Vec<_>>()
        .join(" ");
    Ok((worst <= 1e-6 && ssim_dev <= 1e-6, detail))
}

// ------------------------------------------------------------- gradients

/// Fixed two-tap network: a 3x3 conv then tanh, and a second 3x3 conv on
/// that tap then tanh.
struct StubExtractor {
    k1: Tensor,
    k2: Tensor,
}

impl StubExtractor {
    fn new() -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Ok(Self {
            k1: uniform(&mut rng, (4, 3, 3, 3), -0.5, 0.5)?,
            k2: uniform(&mut rng, (2, 4, 3, 3), -0.5, 0.5)?,
        })
    }
}

impl FeatureExtractor for StubExtractor {
    fn features(&self, x: &Tensor) -> wr_core::Result<Vec<Tensor>> {
        let a = x.conv2d(&self.k1.to_dtype(x.dtype())?, 1, 1, 1, 1)?.tanh()?;
        let b = a.conv2d(&self.k2.to_dtype(x.dtype())?, 1, 1, 1, 1)?.tanh()?;
        Ok(vec![a, b])
    }
}

/// `||analytic - numeric|| / ||numeric||` for a scalar function of `x0`.
fn gradient_error(x0: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<f64> {
    let var = Var::from_tensor(x0)?;
    let grads = f(var.as_tensor())?.backward()?;
    let analytic: Vec<f64> = grads
        .get(var.as_tensor())
        .context("no gradient reached the input")?
        .flatten_all()?
        .to_vec1()?;
    let base: Vec<f64> = x0.flatten_all()?.to_vec1()?;
    let eps = 1e-6;
    let mut num = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let at = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            scalar(&f(&Tensor::from_vec(v, x0.dims(), &Device::Cpu)?)?)
        };
        num.push((at(eps)? - at(-eps)?) / (2.0 * eps));
    }
    let diff: f64 = analytic.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt();
    ensure!(norm > 1e-8, "numeric gradient vanished");
    Ok(diff / norm)
}

fn gradient_suite(_: &mut Shared) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ms = MsSsimConfig {
        scales: 2,
        window: 3,
        ..Default::default()
    };
    let a1 = uniform(&mut rng, (2, 1, 8, 8), -0.8, 0.8)?;
    let b1 = (&a1 + uniform(&mut rng, (2, 1, 8, 8), -0.2, 0.2)?)?;
    let stub = StubExtractor::new()?;
    let a3 = uniform(&mut rng, (2, 3, 8, 8), -0.8, 0.8)?;
    let b3 = uniform(&mut rng, (2, 3, 8, 8), -0.8, 0.8)?;
    let errors = [
        ("ms_ssim", gradient_error(&b1, |b| Ok(ms_ssim(&a1, b, &ms)?.sum_all()?))?),
        (
            "perceptual",
            gradient_error(&b3, |b| Ok(perceptual_distance(&a3, b, &stub)?.sum_all()?))?,
        ),
    ];
    let worst = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail = errors.iter().map(|(k, e)| format!("{k} rel_err={e:.2e}")).collect::<Vec<_>>().join(" ");
    Ok((worst <= 1e-3, detail))
}

// --------------------------------------------------------------- metrics

fn stats(mean: &[f64], cov: DMatrix<f64>) -> Result<FeatureStats> {
    Ok(FeatureStats::new(DVector::from_column_slice(mean), cov, 10)?)
}

fn random_line(rng: &mut ChaCha8Rng) -> ScoredLine {
    ScoredLine {
        a: [rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)],
        b: [rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)],
        score: rng.random_range(0.0..1.0),
    }
}

/// Greedy matching written from the definition: by descending score, each
/// prediction takes the nearest free ground-truth line within `theta`.
fn brute_force_hits(pred: &[ScoredLine], gt: &[ScoredLine], theta: f64) -> Vec<bool> {
    let d2 = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&i, &j| pred[j].score.partial_cmp(&pred[i].score).unwrap());
    let mut free = vec![true; gt.len()];
    let mut hits = vec![false; pred.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if !free[j] {
                continue;
            }
            let d1 = d2(pred[i].a, g.a) + d2(pred[i].b, g.b);
            let d2_ = d2(pred[i].a, g.b) + d2(pred[i].b, g.a);
            let d = if d1 < d2_ { d1 } else { d2_ };
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, d)) = best {
            if d <= theta {
                free[j] = false;
                hits[i] = true;
            }
        }
    }
    hits
}

/// Sum over true positives of the best precision at that rank or later,
/// divided by the ground-truth count.
fn brute_force_ap(pred: &[ScoredLine], hits: &[bool], n_gt: usize) -> f64 {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&i, &j| pred[j].score.partial_cmp(&pred[i].score).unwrap());
    let ranked: Vec<bool> = order.iter().map(|&i| hits[i]).collect();
    let precision: Vec<f64> = (0..ranked.len())
        .map(|k| ranked[..=k].iter().filter(|h| **h).count() as f64 / (k + 1) as f64)
        .collect();
    (0..ranked.len())
        .filter(|&k| ranked[k])
        .map(|k| precision[k..].iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / n_gt as f64
}

fn metric_oracles(_: &mut Shared) -> Check {
    let mut notes = Vec::new();
    let mut ok = true;

    // FID closed forms.
    let mut fid_err: f64 = 0.0;
    for (m1, v1, m2, v2) in [(0.0, 1.0, 0.0, 1.0), (1.0, 4.0, -2.0, 9.0), (0.5, 0.25, 3.0, 2.0)] {
        let got = fid(&stats(&[m1], DMatrix::from_element(1, 1, v1))?, &stats(&[m2], DMatrix::from_element(1, 1, v2))?)?;
        let want = (m1 - m2) * (m1 - m2) + v1 + v2 - 2.0 * (v1 * v2).sqrt();
        fid_err = fid_err.max((got - want).abs());
    }
    let (ma, va) = ([1.0, 2.0, -1.0], [1.0, 3.0, 0.5]);
    let (mb, vb) = ([0.0, 2.5, 1.0], [2.0, 1.0, 0.5]);
    let got = fid(
        &stats(&ma, DMatrix::from_diagonal(&DVector::from_column_slice(&va)))?,
        &stats(&mb, DMatrix::from_diagonal(&DVector::from_column_slice(&vb)))?,
    )?;
    let want: f64 = (0..3)
        .map(|i| (ma[i] - mb[i]).powi(2) + va[i] + vb[i] - 2.0 * (va[i] * vb[i]).sqrt())
        .sum();
    fid_err = fid_err.max((got - want).abs());
    ok &= fid_err <= 1e-8;
    notes.push(format!("fid_err={fid_err:.1e}"));

    // sAP against the brute-force matcher.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut exact, mut monotone, mut ap_err): (usize, usize, f64) = (0, 0, 0.0);
    let instances = 32;
    for _ in 0..instances {
        let gt: Vec<ScoredLine> = (0..5).map(|_| random_line(&mut rng)).collect();
        let mut pred: Vec<ScoredLine> = gt
            .iter()
            .map(|g| ScoredLine {
                a: [g.a[0] + rng.random_range(-2.5..2.5), g.a[1] + rng.random_range(-2.5..2.5)],
                b: [g.b[0] + rng.random_range(-2.5..2.5), g.b[1] + rng.random_range(-2.5..2.5)],
                score: rng.random_range(0.0..1.0),
            })
            .collect();
        pred.extend((0..rng.random_range(0..4)).map(|_| random_line(&mut rng)));
        let (p, g) = (LineSet::new(pred.clone())?, LineSet::new(gt.clone())?);
        let hits = match_predictions(&p, &g, 10.0);
        let oracle = brute_force_hits(&pred, &gt, 10.0);
        let ap = sap(&p, &g, 10.0).ap;
        let oracle_ap = brute_force_ap(&pred, &oracle, gt.len());
        if hits == oracle {
            exact += 1;
        }
        ap_err = ap_err.max((ap - oracle_ap).abs());
        let aps: Vec<f64> = [5.0, 10.0, 15.0].iter().map(|&t| sap(&p, &g, t).ap).collect();
        if aps[0] <= aps[1] && aps[1] <= aps[2] {
            monotone += 1;
        }
    }
    ok &= exact == instances && monotone == instances && ap_err <= 1e-12;
    notes.push(format!(
        "sap hits {exact}/{instances} ap_err={ap_err:.1e} monotone {monotone}/{instances}"
    ));

    // Inception score closed forms.
    let same = inception_score(&vec![vec![0.2, 0.3, 0.5]; 4])?;
    let one_hot = inception_score(&(0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect::<Vec<_>>())?;
    let p: f64 = 0.8;
    let two = inception_score(&[vec![p, 1.0 - p], vec![1.0 - p, p]])?;
    let two_want = (p * (2.0 * p).ln() + (1.0 - p) * (2.0 * (1.0 - p)).ln()).exp();
    let is_err = [(same - 1.0).abs(), (one_hot - 4.0).abs(), (two - two_want).abs()]
        .into_iter()
        .fold(0.0, f64::max);
    ok &= is_err <= 1e-12;
    notes.push(format!("is_err={is_err:.1e}"));
    Ok((ok, notes.join(" ")))
}

// ---------------------------------------------------------- architecture

fn params_of(model: &Renderer, prefix: &str) -> Vec<(String, Var)> {
    model.store().params_under(prefix)
}

fn snapshot(model: &Renderer, groups: &[&str]) -> Result<HashMap<String, Vec<u32>>> {
    let mut out = HashMap::new();
    for g in groups {
        for (k, v) in params_of(model, &format!("{g}.")) {
            let flat: Vec<f32> = v.as_tensor().flatten_all()?.to_vec1()?;
            out.insert(k, flat.into_iter().map(f32::to_bits).collect());
        }
    }
    Ok(out)
}

fn architecture(_: &mut Shared) -> Check {
    let mut cfg = TrainConfig::toy();
    cfg.model.guidance.enabled = true;
    let data = toy_samples(2, 256, 5, 2.0);
    let mut trainer = Trainer::with_extractor(cfg.clone(), Arc::new(IdentityExtractor))?;
    let model = trainer.model();
    let (x, y, h) = batch_tensors(&data, true)?;
    let gen = model.generate(&x, h.as_ref(), true)?;
    let c = cfg.model.latent_channels();
    let mut notes = Vec::new();
    let mut ok = true;
    let shapes = [
        ("latent", gen.latent.dims().to_vec(), vec![2, c, 16, 16]),
        ("wireframe", gen.wireframe.dims().to_vec(), vec![2, 1, 256, 256]),
        ("scene", gen.scene.dims().to_vec(), vec![2, 3, 256, 256]),
    ];
    for (k, got, want) in &shapes {
        ok &= got == want;
        notes.push(format!("{k}={got:?}"));
    }
    for t in [&gen.wireframe, &gen.scene] {
        let v: Vec<f32> = t.flatten_all()?.to_vec1()?;
        ok &= v.iter().all(|p| (-1.0..=1.0).contains(p));
    }
    let scores = model.discriminate(&x, &y, true)?;
    ok &= scores.dims() == [2, 1, 30, 30];
    notes.push(format!("patch={:?}", scores.dims()));

    // Every parameter belongs to exactly one group.
    let groups = [ENCODER, WIRE_DECODER, SCENE_DECODER, DISCRIMINATOR];
    let all = params_of(model, "");
    let partitioned = all.iter().all(|(k, _)| groups.iter().filter(|g| k.starts_with(&format!("{g}."))).count() == 1);
    let counted: usize = groups.iter().map(|g| params_of(model, &format!("{g}.")).len()).sum();
    ok &= partitioned && counted == all.len();
    notes.push(format!("params={} partitioned={partitioned}", all.len()));

    // The generator's adversarial loss reaches every generator group.
    let grads = g_adv_loss(&model.discriminate(&gen.wireframe, &gen.scene, true)?, GanMode::Lsgan)?.backward()?;
    let mut unreached = Vec::new();
    for g in GENERATOR_GROUPS {
        for (k, v) in params_of(model, &format!("{g}.")) {
            if k.contains(".hist.") {
                continue;
            }
            let reached = match grads.get(v.as_tensor()) {
                Some(gr) => scalar(&gr.abs()?.sum_all()?)? > 0.0,
                None => false,
            };
            if !reached {
                unreached.push(k);
            }
        }
    }
    ok &= unreached.is_empty();
    notes.push(format!("g_adv unreached={}", unreached.len()));

    // Discriminator loss on detached fakes stays out of the generator.
    let fake = model.discriminate(&gen.wireframe.detach(), &gen.scene.detach(), true)?;
    let grads = d_adv_loss(&scores, &fake, GanMode::Lsgan)?.backward()?;
    let leaked = GENERATOR_GROUPS
        .iter()
        .flat_map(|g| params_of(model, &format!("{g}.")))
        .filter(|(_, v)| grads.get(v.as_tensor()).is_some())
        .count();
    ok &= leaked == 0;

    let gen_before = snapshot(trainer.model(), &GENERATOR_GROUPS)?;
    let dis_before = snapshot(trainer.model(), &[DISCRIMINATOR])?;
    trainer.discriminator_step(&data)?;
    let gen_fixed = gen_before == snapshot(trainer.model(), &GENERATOR_GROUPS)?;
    let dis_moved = dis_before != snapshot(trainer.model(), &[DISCRIMINATOR])?;
    ok &= gen_fixed && dis_moved;
    notes.push(format!("d_step generator_fixed={gen_fixed} leaked={leaked}"));
    Ok((ok, notes.join(" ")))
}

// --------------------------------------------------------- overfit smoke

const OVERFIT_SIZE: usize = 128;
const OVERFIT_STEPS: usize = 500;

fn overfit_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: OVERFIT_STEPS,
        lr_decay_every: 100_000,
        checkpoint_every: OVERFIT_STEPS,
        validate_every: OVERFIT_STEPS,
        ms_ssim: MsSsimConfig {
            scales: 4,
            window: 11,
            ..Default::default()
        },
        perceptual: VggConfig::toy(),
        augment: AugmentParams {
            resize_to: OVERFIT_SIZE,
            crop_to: OVERFIT_SIZE,
            flip_prob: 0.0,
            center_crop: true,
            jitter: Jitter {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
            },
            ..Default::default()
        },
        model: RendererConfig {
            input_size: OVERFIT_SIZE,
            base_channels: 8,
            res_blocks: 4,
            guidance: GuidanceConfig {
                projection_size: 16,
                ..Default::default()
            },
            discriminator: DiscriminatorConfig {
                base_channels: 8,
                n_layers: 3,
            },
            ..Default::default()
        },
        ..Default::default()
    }
}

fn train_overfit(dir: &Path) -> Result<Overfit> {
    let config = overfit_config();
    let root = dir.join("data");
    write_toy_dataset(&root, 8, 0, OVERFIT_SIZE, 7)?;
    let opts = DatasetOptions {
        line_width: config.augment.line_width,
        ..Default::default()
    };
    let data = load_dataset_with(&root, Split::Train, &opts)?;
    ensure!(data.len() == 8, "expected 8 samples, got {}", data.len());
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone())?;
    fit(&mut trainer, &data, &[], &dir.join("run"))?;
    ensure!(trainer.step() == OVERFIT_STEPS as u64, "ran {} steps", trainer.step());
    Ok(Overfit {
        trainer,
        data,
        train_secs: start.elapsed().as_secs_f64(),
    })
}

fn ensure_overfit(shared: &mut Shared) -> Result<&Overfit> {
    if shared.overfit.is_none() {
        let dir = tempfile::tempdir()?;
        shared.overfit = Some(train_overfit(dir.path())?);
    }
    Ok(shared.overfit.as_ref().expect("just trained"))
}

/// Decoded wireframe rasters in inference mode.
fn decoded_wireframes(model: &Renderer, data: &[PairedSample]) -> Result<(Vec<RasterImage>, f64, f64)> {
    let (x, y, h) = batch_tensors(data, model.config().guidance.enabled)?;
    let gen = model.generate(&x, h.as_ref(), false)?;
    let rec = scalar(&(&x - &gen.wireframe)?.abs()?.mean_all()?)?;
    let scene = scalar(&(&y - &gen.scene)?.abs()?.mean_all()?)?;
    Ok((RasterImage::from_tensor(&gen.wireframe)?, rec, scene))
}

fn overfit_smoke(shared: &mut Shared) -> Check {
    let run = ensure_overfit(shared)?;
    let (wires, rec, scene) = decoded_wireframes(run.trainer.model(), &run.data)?;
    let iou = wires
        .iter()
        .zip(&run.data)
        .map(|(w, s)| support::iou(&support::foreground(w), &support::foreground(&s.wireframe_raster)))
        .sum::<f64>()
        / wires.len() as f64;
    let ok = rec < 0.05 && scene < 0.10 && iou > 0.8;
    Ok((
        ok,
        format!(
            "{OVERFIT_SIZE}px {OVERFIT_STEPS} steps in {:.0}s: rec_l1={rec:.4} gen_l1={scene:.4} iou={iou:.3}",
            run.train_secs
        ),
    ))
}

fn sap10(model: &Renderer, data: &[PairedSample]) -> Result<f64> {
    let (wires, _, _) = decoded_wireframes(model, data)?;
    let pairs: Vec<(LineSet, LineSet)> = wires
        .iter()
        .zip(data)
        .map(|(w, s)| {
            (
                support::vectorize(&support::foreground(w), w.width(), 64),
                LineSet::from_wireframe(&s.wireframe),
            )
        })
        .collect();
    Ok(wr_core::metrics::sap_pooled(&pairs, 10.0).ap)
}

fn sap_directionality(shared: &mut Shared) -> Check {
    let trained_elsewhere = shared.overfit.is_some();
    let run = ensure_overfit(shared)?;
    let train_secs = if trained_elsewhere { 0.0 } else { run.train_secs };
    let cfg = run.trainer.config();
    let trained = sap10(run.trainer.model(), &run.data)?;
    let control = sap10(&Renderer::new(cfg.model.clone(), cfg.seed)?, &run.data)?;
    Ok((
        trained >= 0.5 && control < 0.05,
        format!("sAP10 trained={trained:.3} untrained={control:.3} (training {train_secs:.0}s)"),
    ))
}

// ------------------------------------------------------------- joint gan

fn joint_gan(_: &mut Shared) -> Check {
    let mut notes = Vec::new();
    let mut ok = true;

    // Trivial zeros: all-zero images, and constant images equal across scales.
    let constant = |c: usize, s: usize, v: f64| Tensor::full(v, (2, c, s, s), &Device::Cpu);
    let zeros: Vec<ScaleOutput> = [8, 16, 32]
        .iter()
        .map(|&s| -> Result<_> {
            Ok(ScaleOutput {
                wireframe: constant(1, s, 0.0)?,
                scene: constant(3, s, 0.0)?,
            })
        })
        .collect::<Result<_>>()?;
    let flat: Vec<ScaleOutput> = [8, 16, 32]
        .iter()
        .map(|&s| -> Result<_> {
            Ok(ScaleOutput {
                wireframe: constant(1, s, 0.5)?,
                scene: constant(3, s, -0.25)?,
            })
        })
        .collect::<Result<_>>()?;
    let z0 = scalar(&consistency_loss(&zeros, 1.0, 5.0)?)?;
    let z1 = scalar(&consistency_loss(&flat, 1.0, 5.0)?)?;
    ok &= z0 == 0.0 && z1 == 0.0;
    notes.push(format!("consistency zeros={z0} flat={z1}"));

    // 64 steps on 16 samples.
    let dir = tempfile::tempdir()?;
    let cfg = JointGanConfig::toy();
    let data = toy_samples(16, cfg.top_scale(), 4, 1.0);
    let mut t = JointTrainer::new(cfg.clone())?;
    let steps = fit_joint(&mut t, &data, dir.path(), Some(64))?;
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl"))?;
    let mut finite = true;
    for line in log.lines() {
        let v: Value = serde_json::from_str(line)?;
        let mut numbers = vec![v["g_adv"].clone(), v["con"].clone(), v["g_total"].clone()];
        for k in ["d_wire", "d_scene"] {
            numbers.extend(v[k].as_array().cloned().unwrap_or_default());
        }
        finite &= numbers.iter().all(|n| n.as_f64().is_some_and(f64::is_finite));
    }
    ok &= steps == 64 && log.lines().count() == 64 && finite;
    notes.push(format!("steps={steps} finite={finite}"));

    // Shuffling the scenes against the wireframes leaves the discriminator
    // losses unchanged.
    let small = JointGanConfig {
        noise_dim: 8,
        scales: vec![8, 16, 32],
        gen_channels: 2,
        dis_channels: 2,
        ..Default::default()
    };
    let t = JointTrainer::new(small.clone())?;
    let data = toy_samples(4, 32, 9, 1.0);
    let x = RasterImage::batch(&data.iter().map(|s| &s.wireframe_raster).collect::<Vec<_>>())?;
    let scenes: Vec<&RasterImage> = data.iter().map(|s| &s.scene).collect();
    let y = RasterImage::batch(&scenes)?;
    let y_shuffled = RasterImage::batch(&[2, 0, 3, 1].iter().map(|&i| scenes[i]).collect::<Vec<_>>())?;
    let fakes: Vec<ScaleOutput> = t
        .model()
        .generate(&t.noise(4, 0)?, false)?
        .into_iter()
        .map(|o| ScaleOutput {
            wireframe: o.wireframe.detach(),
            scene: o.scene.detach(),
        })
        .collect();
    let xs = pyramid(&x, &small.scales)?;
    let a = t.discriminator_losses(&xs, &pyramid(&y, &small.scales)?, &fakes)?;
    let b = t.discriminator_losses(&xs, &pyramid(&y_shuffled, &small.scales)?, &fakes)?;
    let mut worst: f64 = 0.0;
    for ((aw, as_), (bw, bs)) in a.iter().zip(&b) {
        worst = worst.max((scalar(aw)? - scalar(bw)?).abs()).max((scalar(as_)? - scalar(bs)?).abs());
    }
    ok &= worst < 1e-6;
    notes.push(format!("shuffle_delta={worst:.1e}"));
    Ok((ok, notes.join(" ")))
}

// --------------------------------------------------------------- service

const MINIMAL: &str = r#"{"size":[256,256],"junctions":[[0,0],[255,255],[0,255]],"segments":[[0,1],[1,2]]}"#;

async fn call(app: &Router, req: Request<Body>) -> Result<(StatusCode, Vec<u8>)> {
    let resp = app.clone().oneshot(req).await?;
    let status = resp.status();
    Ok((status, to_bytes(resp.into_body(), usize::MAX).await?.to_vec()))
}

fn post_render(body: String) -> Result<Request<Body>> {
    Ok(Request::post("/v1/render")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body))?)
}

fn render_images(body: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    let v: Value = serde_json::from_slice(body)?;
    let png = |k: &str| -> Result<Vec<u8>> { Ok(BASE64.decode(v[k].as_str().context("missing image")?)?) };
    Ok((png("scene")?, png("reconstructed_wireframe")?))
}

fn service_contract(_: &mut Shared) -> Check {
    let dir = tempfile::tempdir()?;
    let mut cfg = TrainConfig::toy();
    cfg.model.res_blocks = 1;
    cfg.model.guidance.enabled = true;
    let path = dir.path().join("toy.bin");
    Trainer::with_extractor(cfg, Arc::new(IdentityExtractor))?.save(&path)?;
    let app = router(
        Arc::new(Engine::load(&path)?),
        ServiceConfig {
            max_in_flight: 4,
            ..Default::default()
        },
    );
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let mut notes = Vec::new();
        let (s, body) = call(&app, Request::get("/v1/health").body(Body::empty())?).await?;
        let health: Value = serde_json::from_slice(&body)?;
        let health_ok = s == StatusCode::OK && health["status"] == "ok";
        notes.push(format!("health={s}"));

        let good = json!({ "wireframe": serde_json::from_str::<Value>(MINIMAL)? }).to_string();
        let (s, body) = call(&app, post_render(good.clone())?).await?;
        let (scene, wire) = render_images(&body)?;
        let (a, b) = (RasterImage::decode(&scene)?, RasterImage::decode(&wire)?);
        let render_ok = s == StatusCode::OK && (a.width(), a.height(), b.width(), b.height()) == (256, 256, 256, 256);
        notes.push(format!("render={s}"));

        let bad = [
            r#"{"wireframe":{"size":[256,256],"junctions":[[0,0]],"segments":[[0,1]]}}"#.to_string(),
            "not json".to_string(),
            json!({ "wireframe": serde_json::from_str::<Value>(MINIMAL)?, "histogram": [[0.5, 0.5, 0.5]] }).to_string(),
            json!({ "wireframe": serde_json::from_str::<Value>(MINIMAL)?, "reference_image": "***" }).to_string(),
            json!({ "wireframe": serde_json::from_str::<Value>(MINIMAL)?, "colour": 1 }).to_string(),
        ];
        let mut rejected = 0;
        for body in &bad {
            let (s, _) = call(&app, post_render(body.clone())?).await?;
            rejected += usize::from(s == StatusCode::UNPROCESSABLE_ENTITY);
        }
        notes.push(format!("422 {rejected}/{}", bad.len()));

        let mut tasks = Vec::new();
        for _ in 0..16 {
            let (app, body) = (app.clone(), good.clone());
            tasks.push(tokio::spawn(async move { call(&app, post_render(body)?).await }));
        }
        let mut identical = 0;
        for t in tasks {
            let (s, body) = t.await??;
            if s == StatusCode::OK && render_images(&body)? == (scene.clone(), wire.clone()) {
                identical += 1;
            }
        }
        notes.push(format!("concurrent identical {identical}/16"));
        Ok((
            health_ok && render_ok && rejected == bad.len() && identical == 16,
            notes.join(" "),
        ))
    })
}
