//! Helpers shared by the acceptance harness: a brute-force line vectorizer
//! for decoded wireframe rasters and mask scores.

#![allow(dead_code)]

use wr_core::metrics::{LineSet, ScoredLine, SAP_FRAME};
use wr_core::wireframe::RasterImage;

/// Pixels with value above zero.
pub fn foreground(img: &RasterImage) -> Vec<bool> {
    img.data().iter().map(|&v| v > 0.0).collect()
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

/// Turns a square foreground mask into scored segments in the sAP frame.
///
/// Candidate endpoints are the foreground centroids of a coarse cell grid.
/// Every pair of them at least `size / 16` apart becomes a segment if at
/// most 2% of the unit steps along it leave the mask. Segments are then
/// taken longest first, skipping any that runs within 1.5 cells of already
/// accepted segments for more than half its length. Scores are lengths.
pub fn vectorize(mask: &[bool], size: usize, max_lines: usize) -> LineSet {
    let cell = (size / 64).max(2);
    let cells = size / cell;
    let mut points: Vec<[f64; 2]> = Vec::new();
    for cy in 0..cells {
        for cx in 0..cells {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
            for y in cy * cell..(cy + 1) * cell {
                for x in cx * cell..(cx + 1) * cell {
                    if mask[y * size + x] {
                        sx += x as f64;
                        sy += y as f64;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                points.push([sx / n as f64, sy / n as f64]);
            }
        }
    }

    let min_len = size as f64 / 16.0;
    let mut candidates: Vec<(f32, u32, u32)> = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let (a, b) = (points[i], points[j]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            if len < min_len {
                continue;
            }
            let steps = len.ceil() as usize;
            let allowed = (steps as f64 * 0.02).floor() as usize;
            let mut misses = 0;
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                let x = (a[0] + t * (b[0] - a[0])).round() as usize;
                let y = (a[1] + t * (b[1] - a[1])).round() as usize;
                if !mask[y.min(size - 1) * size + x.min(size - 1)] {
                    misses += 1;
                    if misses > allowed {
                        break;
                    }
                }
            }
            if misses <= allowed {
                candidates.push((len as f32, i as u32, j as u32));
            }
        }
    }
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let tol = 1.5 * cell as f64;
    let mut accepted: Vec<([f64; 2], [f64; 2], f64)> = Vec::new();
    for (len, i, j) in candidates {
        if accepted.len() >= max_lines {
            break;
        }
        let (a, b) = (points[i as usize], points[j as usize]);
        let probes = 16;
        let near = (0..=probes)
            .filter(|&k| {
                let t = k as f64 / probes as f64;
                let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                accepted.iter().any(|(u, v, _)| point_segment_distance(p, *u, *v) <= tol)
            })
            .count();
        if 2 * near <= probes + 1 {
            accepted.push((a, b, f64::from(len)));
        }
    }
    let s = SAP_FRAME / size as f64;
    LineSet::new(
        accepted
            .into_iter()
            .map(|(a, b, len)| ScoredLine {
                a: [a[0] * s, a[1] * s],
                b: [b[0] * s, b[1] * s],
                score: len / size as f64,
            })
            .collect(),
    )
    .expect("finite segments")
}
