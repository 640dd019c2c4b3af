use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::PairedSample;
use super::raster::{rasterize, RasterImage};

/// Maximum deviation of each photometric factor from 1; a factor is drawn
/// uniformly from `[max(0, 1 - j), 1 + j]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub resize_to: usize,
    pub crop_to: usize,
    pub flip_prob: f64,
    pub jitter: Jitter,
    /// Pin the crop window to the centre instead of sampling it.
    pub center_crop: bool,
    pub line_width: f32,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            resize_to: 307,
            crop_to: 256,
            flip_prob: 0.5,
            jitter: Jitter {
                brightness: 0.2,
                contrast: 0.2,
                saturation: 0.2,
            },
            center_crop: false,
            line_width: 2.0,
        }
    }
}

impl AugmentParams {
    /// Deterministic rescale to `size` with no cropping, flipping or jitter.
    pub fn inference(size: usize) -> Self {
        Self {
            resize_to: size,
            crop_to: size,
            flip_prob: 0.0,
            jitter: Jitter::NONE,
            center_crop: true,
            line_width: 2.0,
        }
    }
}

fn factor(rng: &mut impl Rng, j: f32) -> f32 {
    let u: f32 = rng.random();
    let lo = (1.0 - j).max(0.0);
    lo + u * (1.0 + j - lo)
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn photometric(img: &RasterImage, brightness: f32, contrast: f32, saturation: f32) -> RasterImage {
    let mut unit: Vec<f32> = img.data().iter().map(|v| ((v + 1.0) * 0.5 * brightness).clamp(0.0, 1.0)).collect();
    let luma = |p: &[f32]| p[0] * LUMA[0] + p[1] * LUMA[1] + p[2] * LUMA[2];
    let mean = unit.chunks_exact(3).map(luma).sum::<f32>() / (unit.len() / 3) as f32;
    for v in &mut unit {
        *v = (mean + contrast * (*v - mean)).clamp(0.0, 1.0);
    }
    for p in unit.chunks_exact_mut(3) {
        let g = luma(p);
        for v in p.iter_mut() {
            *v = (g + saturation * (*v - g)).clamp(0.0, 1.0);
        }
    }
    let data = unit.into_iter().map(|u| u * 2.0 - 1.0).collect();
    RasterImage::from_data(img.width(), img.height(), 3, data).expect("same shape")
}

/// Training-time augmentation of a wireframe/scene pair.
///
/// Geometry (resize, crop, flip) is applied identically to the scene and to
/// the vector wireframe, which is then re-rasterised at the crop size, so
/// the returned raster always equals `rasterize(sample.wireframe)`.
/// Photometric jitter touches the scene only. The same number of random
/// draws is consumed regardless of the parameters, so a seed fixes the
/// whole stream.
pub fn augment(sample: &PairedSample, params: &AugmentParams, rng: &mut impl Rng) -> PairedSample {
    assert!(params.crop_to <= params.resize_to, "crop_to must not exceed resize_to");
    let (r, c) = (params.resize_to, params.crop_to);
    let span = (r - c) as u32;
    let (ox, oy): (u32, u32) = (rng.random_range(0..=span), rng.random_range(0..=span));
    let (ox, oy) = if params.center_crop { (span / 2, span / 2) } else { (ox, oy) };
    let flip = rng.random::<f64>() < params.flip_prob;
    let b = factor(rng, params.jitter.brightness);
    let ct = factor(rng, params.jitter.contrast);
    let s = factor(rng, params.jitter.saturation);

    let mut scene = sample.scene.resized(r, r, true).cropped(ox as usize, oy as usize, c, c);
    let mut wireframe = sample.wireframe.scaled(r as u32, r as u32).cropped(ox, oy, c as u32, c as u32);
    if flip {
        scene = scene.flipped_horizontal();
        wireframe = wireframe.flipped_horizontal();
    }
    if params.jitter != Jitter::NONE {
        scene = photometric(&scene, b, ct, s);
    }
    let wireframe_raster = rasterize(&wireframe, c, params.line_width);
    PairedSample {
        id: sample.id.clone(),
        wireframe,
        wireframe_raster,
        scene,
    }
}
