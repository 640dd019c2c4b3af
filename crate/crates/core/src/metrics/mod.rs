//! Image-quality and line-structure evaluation: SSIM, FID, perceptual
//! distance, structural average precision and inception score, plus a
//! batch evaluator over directories of generated and real images.

mod fid;
mod inception;
mod sap;
mod ssim;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

pub use fid::{fid, FeatureStats};
pub use inception::inception_score;
pub use sap::{
    match_predictions, sap, sap_pooled, Detection, LineSet, SapResult, ScoredLine, SAP_FRAME, SAP_THRESHOLDS,
};
pub use ssim::{luma, ssim, ssim_planes, SSIM_SIGMA, SSIM_WINDOW};

use crate::objectives::{perceptual_distance, FeatureExtractor};
use crate::wireframe::{ids_in, image_path, RasterImage, Wireframe, IMAGE_EXTENSIONS};
use crate::{Error, Result};

/// Mean perceptual distance between two (N, 3, H, W) batches; lower is
/// closer.
pub fn perceptual_metric(y: &Tensor, y_hat: &Tensor, ext: &dyn FeatureExtractor) -> Result<f64> {
    let d = perceptual_distance(y, y_hat, ext)?;
    Ok(d.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
}

/// FID features: the extractor's last tap averaged over space, one row per
/// image.
pub fn pooled_features(x: &Tensor, ext: &dyn FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    let taps = ext.features(x)?;
    let last = taps
        .last()
        .ok_or_else(|| Error::Config("feature extractor produced no taps".into()))?;
    let pooled = last.flatten_from(2)?.mean(D::Minus1)?.to_dtype(DType::F64)?;
    Ok(pooled.to_vec2::<f64>()?)
}

/// One aligned evaluation item.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub real: RasterImage,
    pub generated: RasterImage,
    /// Ground-truth and detected lines in the 128 x 128 frame, when sAP is
    /// evaluated.
    pub lines: Option<(LineSet, LineSet)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    /// Absent with fewer than two images.
    pub fid: Option<f64>,
    pub perceptual: f64,
    pub ssim: f64,
    pub sap5: Option<f64>,
    pub sap10: Option<f64>,
    pub sap15: Option<f64>,
}

impl EvalReport {
    /// `(metric, value)` rows in report order, skipping absent metrics.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut rows = vec![("images", self.images as f64)];
        let optional = [
            ("fid", self.fid),
            ("perceptual", Some(self.perceptual)),
            ("ssim", Some(self.ssim)),
            ("sap5", self.sap5),
            ("sap10", self.sap10),
            ("sap15", self.sap15),
        ];
        rows.extend(optional.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.rows() {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

const EVAL_BATCH: usize = 8;

/// Evaluates aligned pairs. Items are processed in id order, so the report
/// does not depend on the order of `pairs`.
pub fn evaluate_pairs(pairs: &[EvalPair], ext: &dyn FeatureExtractor) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut sorted: Vec<&EvalPair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let n = sorted.len();

    let mut ssim_sum = 0.0;
    let mut perc_sum = 0.0;
    let mut real_feats = Vec::with_capacity(n);
    let mut gen_feats = Vec::with_capacity(n);
    for chunk in sorted.chunks(EVAL_BATCH) {
        for p in chunk {
            ssim_sum += ssim(&p.real, &p.generated).map_err(|e| Error::Metric(format!("{}: {e}", p.id)))?;
        }
        let real: Vec<&RasterImage> = chunk.iter().map(|p| &p.real).collect();
        let gen: Vec<&RasterImage> = chunk.iter().map(|p| &p.generated).collect();
        let (yr, yg) = (RasterImage::batch(&real)?, RasterImage::batch(&gen)?);
        let d = perceptual_distance(&yr, &yg, ext)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        perc_sum += d.iter().sum::<f64>();
        real_feats.extend(pooled_features(&yr, ext)?);
        gen_feats.extend(pooled_features(&yg, ext)?);
    }
    let fid_value = if n >= 2 {
        Some(fid(&FeatureStats::from_features(&real_feats)?, &FeatureStats::from_features(&gen_feats)?)?)
    } else {
        tracing::warn!("FID needs at least two images; omitted");
        None
    };

    let with_lines: Vec<(LineSet, LineSet)> = sorted
        .iter()
        .filter_map(|p| p.lines.as_ref().map(|(gt, pred)| (pred.clone(), gt.clone())))
        .collect();
    let sap_at = |theta: f64| (!with_lines.is_empty()).then(|| sap_pooled(&with_lines, theta).ap);
    if !with_lines.is_empty() && with_lines.len() != n {
        return Err(Error::Dataset("line sets were supplied for only some images".into()));
    }
    Ok(EvalReport {
        images: n,
        fid: fid_value,
        perceptual: perc_sum / n as f64,
        ssim: ssim_sum / n as f64,
        sap5: sap_at(SAP_THRESHOLDS[0]),
        sap10: sap_at(SAP_THRESHOLDS[1]),
        sap15: sap_at(SAP_THRESHOLDS[2]),
    })
}

/// Directory inputs of [`evaluate_run`].
#[derive(Debug, Clone)]
pub struct RunDirs {
    pub generated: PathBuf,
    pub real: PathBuf,
    /// Ground-truth annotation JSON files named `<id>.json`.
    pub annotations: Option<PathBuf>,
    /// Detector output files, one `{"id", "lines"}` object per `.json` file.
    pub detections: Option<PathBuf>,
}

fn read_detections(dir: &Path) -> Result<BTreeMap<String, LineSet>> {
    let mut out = BTreeMap::new();
    for id in ids_in(dir, &["json"])? {
        let path = dir.join(format!("{id}.json"));
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let det = Detection::from_json(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        out.insert(det.id.clone(), det.line_set()?);
    }
    Ok(out)
}

/// Loads aligned images (and optionally line sets) by id and evaluates
/// them. Real images are resampled to the generated size when they differ.
/// Any id present in one input but not another is reported as an orphan.
pub fn evaluate_run(dirs: &RunDirs, ext: &dyn FeatureExtractor) -> Result<EvalReport> {
    let gen_ids = ids_in(&dirs.generated, &IMAGE_EXTENSIONS)?;
    let real_ids = ids_in(&dirs.real, &IMAGE_EXTENSIONS)?;
    let mut orphans: BTreeSet<String> = gen_ids.symmetric_difference(&real_ids).cloned().collect();

    let lines = match (&dirs.annotations, &dirs.detections) {
        (Some(ann), Some(det)) => {
            let ann_ids = ids_in(ann, &["json"])?;
            let dets = read_detections(det)?;
            let det_ids: BTreeSet<String> = dets.keys().cloned().collect();
            orphans.extend(gen_ids.symmetric_difference(&ann_ids).cloned());
            orphans.extend(gen_ids.symmetric_difference(&det_ids).cloned());
            Some((ann.clone(), dets))
        }
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "sAP needs both ground-truth annotations and detector output".into(),
            ))
        }
    };
    if !orphans.is_empty() {
        return Err(Error::Orphans(orphans.into_iter().collect()));
    }

    let mut pairs = Vec::with_capacity(gen_ids.len());
    for id in &gen_ids {
        let load = |dir: &Path| -> Result<RasterImage> {
            let path = image_path(dir, id).ok_or_else(|| Error::Orphans(vec![id.clone()]))?;
            RasterImage::load(&path)
        };
        let generated = load(&dirs.generated)?;
        let mut real = load(&dirs.real)?;
        if (real.width(), real.height()) != (generated.width(), generated.height()) {
            real = real.resized(generated.width(), generated.height(), true);
        }
        let lines = match &lines {
            Some((ann, dets)) => {
                let path = ann.join(format!("{id}.json"));
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let wf = Wireframe::from_json(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
                Some((LineSet::from_wireframe(&wf), dets[id].clone()))
            }
            None => None,
        };
        pairs.push(EvalPair {
            id: id.clone(),
            real,
            generated,
            lines,
        });
    }
    evaluate_pairs(&pairs, ext)
}
