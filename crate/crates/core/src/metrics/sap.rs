use serde::{Deserialize, Serialize};

use crate::wireframe::Wireframe;
use crate::{Error, Result};

/// Side of the square frame line sets are compared in.
pub const SAP_FRAME: f64 = 128.0;

/// Squared-distance thresholds reported by convention.
pub const SAP_THRESHOLDS: [f64; 3] = [5.0, 10.0, 15.0];

/// A scored segment in the 128 x 128 frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredLine {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub score: f64,
}

impl ScoredLine {
    /// Sum of squared endpoint distances under the closer of the two
    /// endpoint pairings.
    pub fn distance(&self, other: &ScoredLine) -> f64 {
        let d2 = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        let same = d2(self.a, other.a) + d2(self.b, other.b);
        let swapped = d2(self.a, other.b) + d2(self.b, other.a);
        same.min(swapped)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LineSet {
    lines: Vec<ScoredLine>,
}

impl LineSet {
    pub fn new(lines: Vec<ScoredLine>) -> Result<Self> {
        for (i, l) in lines.iter().enumerate() {
            if !(l.a.iter().chain(&l.b).all(|v| v.is_finite()) && l.score.is_finite()) {
                return Err(Error::Metric(format!("line {i} has a non-finite endpoint or score")));
            }
        }
        Ok(Self { lines })
    }

    /// Ground-truth lines of a wireframe rescaled into the 128 x 128 frame,
    /// all with score 1.
    pub fn from_wireframe(wf: &Wireframe) -> Self {
        let sx = SAP_FRAME / f64::from(wf.width());
        let sy = SAP_FRAME / f64::from(wf.height());
        let lines = wf
            .lines()
            .map(|(p, q)| ScoredLine {
                a: [p[0] * sx, p[1] * sy],
                b: [q[0] * sx, q[1] * sy],
                score: 1.0,
            })
            .collect();
        Self { lines }
    }

    pub fn lines(&self) -> &[ScoredLine] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

/// One image's detector output: `{"id": ..., "lines": [[x1, y1, x2, y2, score], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: String,
    pub lines: Vec<[f64; 5]>,
}

impl Detection {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let d: Self = serde_json::from_slice(bytes)?;
        d.line_set()?;
        Ok(d)
    }

    pub fn line_set(&self) -> Result<LineSet> {
        LineSet::new(
            self.lines
                .iter()
                .map(|l| ScoredLine {
                    a: [l[0], l[1]],
                    b: [l[2], l[3]],
                    score: l[4],
                })
                .collect(),
        )
    }

    pub fn from_line_set(id: impl Into<String>, set: &LineSet) -> Self {
        Self {
            id: id.into(),
            lines: set.lines().iter().map(|l| [l.a[0], l.a[1], l.b[0], l.b[1], l.score]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SapResult {
    pub ap: f64,
    /// Precision and recall after each ranked prediction.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Marks each prediction of one image as a true positive or not.
///
/// Predictions are visited by descending score (ties keep input order);
/// each claims the closest still-unmatched ground-truth line if that line
/// is within `theta`.
pub fn match_predictions(pred: &LineSet, gt: &LineSet, theta: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&i, &j| pred.lines[j].score.total_cmp(&pred.lines[i].score));
    let mut taken = vec![false; gt.len()];
    let mut hits = vec![false; pred.len()];
    for i in order {
        let p = &pred.lines[i];
        let best = gt
            .lines
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, g)| (j, p.distance(g)))
            .min_by(|x, y| x.1.total_cmp(&y.1));
        if let Some((j, d)) = best {
            if d <= theta {
                taken[j] = true;
                hits[i] = true;
            }
        }
    }
    hits
}

/// All-points interpolated area under the precision/recall curve of a
/// ranked hit list against `n_gt` positives.
fn average_precision(ranked_hits: &[bool], n_gt: usize) -> SapResult {
    let mut precision = Vec::with_capacity(ranked_hits.len());
    let mut recall = Vec::with_capacity(ranked_hits.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_hits.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    SapResult { ap, precision, recall }
}

/// Structural average precision of one image.
pub fn sap(pred: &LineSet, gt: &LineSet, theta: f64) -> SapResult {
    sap_pooled(&[(pred.clone(), gt.clone())], theta)
}

/// Structural average precision over several images: matching is done per
/// image, then all predictions are ranked together by score against the
/// total ground-truth count. Score ties are broken by image order, then
/// line order.
pub fn sap_pooled(images: &[(LineSet, LineSet)], theta: f64) -> SapResult {
    let n_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, (pred, gt)) in images.iter().enumerate() {
        for (i, hit) in match_predictions(pred, gt, theta).into_iter().enumerate() {
            ranked.push((pred.lines[i].score, img, i, hit));
        }
    }
    if n_gt == 0 {
        if !ranked.is_empty() {
            tracing::warn!(predictions = ranked.len(), "sAP with empty ground truth; reporting 0");
        }
        return SapResult {
            ap: 0.0,
            precision: Vec::new(),
            recall: Vec::new(),
        };
    }
    ranked.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let hits: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    average_precision(&hits, n_gt)
}
