use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{checkpoint_name, BestScore};
use super::Trainer;
use crate::wireframe::{augment, AugmentParams, PairedSample};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    /// Completed epochs, including any before a resume.
    pub epochs: usize,
    pub steps: u64,
    pub checkpoints: Vec<PathBuf>,
    pub best: Option<BestScore>,
}

/// SplitMix64 finaliser over `(seed, epoch, index)`.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffled sample indices for one epoch, chunked into batches; the last
/// batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, usize::MAX)));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Augments each selected sample from its own `(seed, epoch, index)`
/// stream, so the result does not depend on how work is split.
fn augment_batch(
    data: &[PairedSample],
    indices: &[usize],
    params: &AugmentParams,
    seed: u64,
    epoch: usize,
    workers: usize,
) -> Vec<PairedSample> {
    let one = |i: usize| augment(&data[i], params, &mut ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, i)));
    if workers <= 1 || indices.len() <= 1 {
        return indices.iter().map(|&i| one(i)).collect();
    }
    let chunk = indices.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|&i| one(i)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("augmentation worker panicked"))
            .collect()
    })
}

/// Opens the step log for appending, dropping lines at or after
/// `keep_below` so a resumed run continues without repeats.
fn open_log(path: &Path, keep_below: u64) -> Result<File> {
    if keep_below == 0 || !path.exists() {
        return File::create(path).map_err(|e| Error::io(path, e));
    }
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut kept = String::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get("step").and_then(|s| s.as_u64()));
        if step.is_some_and(|s| s < keep_below) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

/// Runs epochs `trainer.epoch()..max_epochs`.
///
/// Writes `metrics.jsonl` (one loss report per step), `val.jsonl` (one line
/// per validation), `ckpt_eNNNN.bin` every `checkpoint_every` epochs and at
/// the end, and `best.bin` whenever the test-split perceptual distance
/// improves.
pub fn fit(trainer: &mut Trainer, train: &[PairedSample], test: &[PairedSample], out_dir: &Path) -> Result<FitSummary> {
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg = trainer.config().clone();
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = open_log(&metrics_path, trainer.step())?;
    let val_path = out_dir.join("val.jsonl");
    let eval_params = AugmentParams {
        line_width: cfg.augment.line_width,
        ..AugmentParams::inference(cfg.model.input_size)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let test: Vec<PairedSample> = test.iter().map(|s| augment(s, &eval_params, &mut rng)).collect();
    let mut checkpoints = Vec::new();

    for epoch in trainer.epoch()..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        trainer.set_lr(lr);
        let mut last = None;
        for indices in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let batch = augment_batch(train, &indices, &cfg.augment, cfg.seed, epoch, cfg.workers);
            let report = trainer.train_step(&batch)?;
            writeln!(log, "{}", report.to_json_line()).map_err(|e| Error::io(&metrics_path, e))?;
            last = Some(report);
        }
        log.flush().map_err(|e| Error::io(&metrics_path, e))?;
        trainer.finish_epoch();
        let done = trainer.epoch();
        if let Some(r) = &last {
            tracing::info!(epoch = done, step = trainer.step(), lr, total = r.total, rec_l1 = r.rec_l1, gen_l1 = r.gen_l1, "epoch finished");
        }

        if !test.is_empty() && (done % cfg.validate_every == 0 || done == cfg.max_epochs) {
            let score = trainer.evaluate_perceptual(&test)?;
            let line = serde_json::json!({ "epoch": done, "step": trainer.step(), "perceptual": score });
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&val_path)
                .map_err(|e| Error::io(&val_path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&val_path, e))?;
            if trainer.best().is_none_or(|b| score < b.perceptual) {
                trainer.set_best(BestScore {
                    epoch: done,
                    perceptual: score,
                });
                trainer.save(&out_dir.join("best.bin"))?;
                tracing::info!(epoch = done, perceptual = score, "new best checkpoint");
            }
        }
        if done % cfg.checkpoint_every == 0 || done == cfg.max_epochs {
            let path = out_dir.join(checkpoint_name(done));
            trainer.save(&path)?;
            checkpoints.push(path);
        }
    }
    Ok(FitSummary {
        epochs: trainer.epoch(),
        steps: trainer.step(),
        checkpoints,
        best: trainer.best(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(32, 16, 7, 0);
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..32).collect::<Vec<_>>());
        assert_eq!(epoch_batches(33, 16, 7, 0).len(), 3);
        assert_eq!(b, epoch_batches(32, 16, 7, 0));
        assert_ne!(b, epoch_batches(32, 16, 7, 1));
    }

    #[test]
    fn augmentation_is_independent_of_workers() {
        let data = crate::wireframe::toy::toy_samples(5, 40, 3, 2.0);
        let params = AugmentParams {
            resize_to: 40,
            crop_to: 32,
            ..Default::default()
        };
        let idx = [4, 0, 2, 3];
        assert_eq!(augment_batch(&data, &idx, &params, 1, 2, 1), augment_batch(&data, &idx, &params, 1, 2, 3));
    }
}
