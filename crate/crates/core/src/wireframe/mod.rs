//! Vectorised wireframes and everything needed to turn annotated
//! wireframe/photo pairs into model-ready tensors.

mod augment;
mod dataset;
mod histogram;
mod raster;
pub mod toy;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, AugmentParams, Jitter};
pub(crate) use dataset::{ids_in, image_path, IMAGE_EXTENSIONS};
pub use dataset::{load_dataset, load_dataset_with, DatasetOptions, PairedSample, Split};
pub use histogram::{color_histogram, ColorHistogram, HISTOGRAM_BINS, HISTOGRAM_DIM};
pub use raster::{level_from_value, rasterize, rasterize_to, value_from_level, RasterImage};

#[derive(Debug, Error)]
pub enum WireframeError {
    #[error("malformed annotation: {0}")]
    Malformed(String),
    #[error("canvas size must be positive, got {width}x{height}")]
    EmptyCanvas { width: u32, height: u32 },
    #[error("junction {index} has a non-finite coordinate")]
    NonFiniteJunction { index: usize },
    #[error("segment {segment} references junction {junction}, but only {count} junctions exist")]
    SegmentOutOfRange {
        segment: usize,
        junction: usize,
        count: usize,
    },
    #[error("segment {segment} connects junction {junction} to itself")]
    SelfLoop { segment: usize, junction: usize },
    #[error("segment {segment} duplicates segment {first}")]
    DuplicateSegment { segment: usize, first: usize },
}

/// Junction/segment graph in pixel coordinates of a `width` x `height` canvas.
///
/// Coordinates follow the pixel-centre convention: junction `(x, y)` sits on
/// the centre of pixel column `x`, row `y`, so valid positions are
/// `[0, width - 1] x [0, height - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Wireframe {
    width: u32,
    height: u32,
    junctions: Vec<[f64; 2]>,
    segments: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    size: [u32; 2],
    junctions: Vec<[f64; 2]>,
    segments: Vec<[usize; 2]>,
}

impl Wireframe {
    /// Validates the graph and clamps junctions onto the canvas.
    pub fn new(
        width: u32,
        height: u32,
        junctions: Vec<[f64; 2]>,
        segments: Vec<[usize; 2]>,
    ) -> Result<Self, WireframeError> {
        if width == 0 || height == 0 {
            return Err(WireframeError::EmptyCanvas { width, height });
        }
        let (max_x, max_y) = ((width - 1) as f64, (height - 1) as f64);
        let mut clamped = Vec::with_capacity(junctions.len());
        for (index, [x, y]) in junctions.into_iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(WireframeError::NonFiniteJunction { index });
            }
            clamped.push([x.clamp(0.0, max_x), y.clamp(0.0, max_y)]);
        }
        let count = clamped.len();
        let mut seen = std::collections::HashMap::new();
        for (segment, &[a, b]) in segments.iter().enumerate() {
            for junction in [a, b] {
                if junction >= count {
                    return Err(WireframeError::SegmentOutOfRange {
                        segment,
                        junction,
                        count,
                    });
                }
            }
            if a == b {
                return Err(WireframeError::SelfLoop { segment, junction: a });
            }
            if let Some(&first) = seen.get(&(a.min(b), a.max(b))) {
                return Err(WireframeError::DuplicateSegment { segment, first });
            }
            seen.insert((a.min(b), a.max(b)), segment);
        }
        Ok(Self {
            width,
            height,
            junctions: clamped,
            segments,
        })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self, WireframeError> {
        Self::new(width, height, Vec::new(), Vec::new())
    }

    /// Parses the annotation JSON: `{"size":[W,H],"junctions":[[x,y],..],"segments":[[i,j],..]}`.
    pub fn from_json(bytes: &[u8]) -> Result<Self, WireframeError> {
        let a: Annotation =
            serde_json::from_slice(bytes).map_err(|e| WireframeError::Malformed(e.to_string()))?;
        Self::new(a.size[0], a.size[1], a.junctions, a.segments)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Annotation {
            size: [self.width, self.height],
            junctions: self.junctions.clone(),
            segments: self.segments.clone(),
        })
        .expect("annotation serialises")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn junctions(&self) -> &[[f64; 2]] {
        &self.junctions
    }

    pub fn segments(&self) -> &[[usize; 2]] {
        &self.segments
    }

    /// Endpoint pairs of every segment.
    pub fn lines(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        self.segments
            .iter()
            .map(|&[a, b]| (self.junctions[a], self.junctions[b]))
    }

    fn map_junctions(&self, width: u32, height: u32, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let junctions = self.junctions.iter().map(|&p| f(p)).collect();
        Self::new(width, height, junctions, self.segments.clone())
            .expect("coordinate maps preserve graph validity")
    }

    /// Rescales onto a `width` x `height` canvas, mapping pixel centres to
    /// pixel centres.
    pub fn scaled(&self, width: u32, height: u32) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        self.map_junctions(width, height, |[x, y]| {
            [(x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5]
        })
    }

    /// Mirrors about the vertical centre line: `x -> W - 1 - x`.
    pub fn flipped_horizontal(&self) -> Self {
        let max_x = (self.width - 1) as f64;
        self.map_junctions(self.width, self.height, |[x, y]| [max_x - x, y])
    }

    /// Translates by `-(x0, y0)` onto a `width` x `height` window and clips
    /// segments against it. Segments entirely outside are dropped; clipped
    /// endpoints become new junctions.
    pub fn cropped(&self, x0: u32, y0: u32, width: u32, height: u32) -> Self {
        let (max_x, max_y) = ((width - 1) as f64, (height - 1) as f64);
        let (dx, dy) = (x0 as f64, y0 as f64);
        let mut junctions: Vec<[f64; 2]> = Vec::new();
        let mut segments = Vec::new();
        let index_of = |p: [f64; 2], junctions: &mut Vec<[f64; 2]>| -> usize {
            match junctions.iter().position(|q| q == &p) {
                Some(i) => i,
                None => {
                    junctions.push(p);
                    junctions.len() - 1
                }
            }
        };
        let mut seen = HashSet::new();
        for (a, b) in self.lines() {
            let a = [a[0] - dx, a[1] - dy];
            let b = [b[0] - dx, b[1] - dy];
            let Some((a, b)) = clip_segment(a, b, max_x, max_y) else {
                continue;
            };
            let ia = index_of(a, &mut junctions);
            let ib = index_of(b, &mut junctions);
            if ia == ib || !seen.insert((ia.min(ib), ia.max(ib))) {
                continue;
            }
            segments.push([ia, ib]);
        }
        Self::new(width, height, junctions, segments).expect("clipped graph is valid")
    }
}

/// Liang-Barsky clipping of segment `a`-`b` to `[0, max_x] x [0, max_y]`.
fn clip_segment(a: [f64; 2], b: [f64; 2], max_x: f64, max_y: f64) -> Option<([f64; 2], [f64; 2])> {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [
        (-dx, a[0]),
        (dx, max_x - a[0]),
        (-dy, a[1]),
        (dy, max_y - a[1]),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    let at = |t: f64| {
        if t == 0.0 {
            a
        } else if t == 1.0 {
            b
        } else {
            // Snap away round-off so clipping at integer borders lands on them.
            let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
            [
                snap(a[0] + t * dx).clamp(0.0, max_x),
                snap(a[1] + t * dy).clamp(0.0, max_y),
            ]
        }
    };
    Some((at(t0), at(t1)))
}
