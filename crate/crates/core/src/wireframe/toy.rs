//! Procedural room-box scenes: a back wall seen through a one-point
//! perspective box, rendered with flat-shaded faces. Used for smoke
//! training and tests where real data is unavailable.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::PairedSample;
use super::raster::{value_from_level, RasterImage};
use super::Wireframe;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRoom {
    pub size: usize,
    /// Back wall `[x0, y0, x1, y1]`.
    pub back: [f64; 4],
    pub window: Option<[f64; 4]>,
    /// Ceiling, floor, left, right, back, window.
    pub colors: [[u8; 3]; 6],
}

fn rect_segments(first: usize) -> [[usize; 2]; 4] {
    [
        [first, first + 1],
        [first + 1, first + 2],
        [first + 2, first + 3],
        [first + 3, first],
    ]
}

fn rect_corners([x0, y0, x1, y1]: [f64; 4]) -> [[f64; 2]; 4] {
    [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

/// Point inside a convex polygon given in consistent winding order.
fn in_convex(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut sign = 0.0;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

impl ToyRoom {
    pub fn random(rng: &mut impl Rng, size: usize) -> Self {
        let m = (size - 1) as f64;
        let mut coord = |lo: f64, hi: f64| (rng.random_range(lo..hi) * m).round();
        let back = [coord(0.22, 0.38), coord(0.18, 0.34), coord(0.62, 0.78), coord(0.6, 0.76)];
        let has_window = rng.random_bool(0.7);
        let (bw, bh) = (back[2] - back[0], back[3] - back[1]);
        let wx0 = back[0] + (bw * rng.random_range(0.15..0.35)).round();
        let wx1 = back[2] - (bw * rng.random_range(0.15..0.35)).round();
        let wy0 = back[1] + (bh * rng.random_range(0.15..0.3)).round();
        let wy1 = back[3] - (bh * rng.random_range(0.35..0.5)).round();
        let window = has_window.then_some([wx0, wy0, wx1, wy1]);
        let mut colors = [[0u8; 3]; 6];
        for c in &mut colors {
            *c = [rng.random(), rng.random(), rng.random()];
        }
        Self {
            size,
            back,
            window,
            colors,
        }
    }

    pub fn wireframe(&self) -> Wireframe {
        let m = (self.size - 1) as f64;
        let mut junctions = rect_corners(self.back).to_vec();
        junctions.extend([[0.0, 0.0], [m, 0.0], [m, m], [0.0, m]]);
        let mut segments = rect_segments(0).to_vec();
        segments.extend((0..4).map(|i| [i, i + 4]));
        if let Some(w) = self.window {
            junctions.extend(rect_corners(w));
            segments.extend(rect_segments(8));
        }
        Wireframe::new(self.size as u32, self.size as u32, junctions, segments).expect("toy room is valid")
    }

    pub fn scene(&self) -> RasterImage {
        let m = (self.size - 1) as f64;
        let [x0, y0, x1, y1] = self.back;
        let faces: [Vec<[f64; 2]>; 4] = [
            vec![[0.0, 0.0], [m, 0.0], [x1, y0], [x0, y0]],
            vec![[x0, y1], [x1, y1], [m, m], [0.0, m]],
            vec![[0.0, 0.0], [x0, y0], [x0, y1], [0.0, m]],
            vec![[x1, y0], [m, 0.0], [m, m], [x1, y1]],
        ];
        let inside = |p: [f64; 2], r: [f64; 4]| p[0] >= r[0] && p[0] <= r[2] && p[1] >= r[1] && p[1] <= r[3];
        let mut data = Vec::with_capacity(self.size * self.size * 3);
        for y in 0..self.size {
            for x in 0..self.size {
                let p = [x as f64, y as f64];
                let face = if self.window.is_some_and(|w| inside(p, w)) {
                    5
                } else if inside(p, self.back) {
                    4
                } else {
                    faces.iter().position(|f| in_convex(p, f)).unwrap_or(4)
                };
                data.extend(self.colors[face].map(value_from_level));
            }
        }
        RasterImage::from_data(self.size, self.size, 3, data).expect("toy scene shape")
    }
}

pub fn room_sample(id: &str, room: &ToyRoom, size: usize, line_width: f32) -> PairedSample {
    let scene = room.scene().resized(size, size, true);
    PairedSample::new(id, &room.wireframe(), scene, line_width)
}

/// `n` rooms drawn from one seeded stream, ids `toy_0000`, `toy_0001`, ...
pub fn toy_samples(n: usize, size: usize, seed: u64, line_width: f32) -> Vec<PairedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| room_sample(&format!("toy_{i:04}"), &ToyRoom::random(&mut rng, size), size, line_width))
        .collect()
}

/// Writes a loadable dataset: the first `n_train` rooms go to `train.txt`,
/// the next `n_test` to `test.txt`.
pub fn write_toy_dataset(root: &Path, n_train: usize, n_test: usize, size: usize, seed: u64) -> Result<()> {
    let images = root.join("images");
    let annotations = root.join("annotations");
    for dir in [&images, &annotations] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let samples = toy_samples(n_train + n_test, size, seed, 2.0);
    for s in &samples {
        s.scene.save_png(&images.join(format!("{}.png", s.id)))?;
        let path = annotations.join(format!("{}.json", s.id));
        std::fs::write(&path, s.wireframe.to_json()).map_err(|e| Error::io(&path, e))?;
    }
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    for (name, part) in [("train.txt", &ids[..n_train]), ("test.txt", &ids[n_train..])] {
        let path = root.join(name);
        let body: String = part.iter().map(|id| format!("{id}\n")).collect();
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
