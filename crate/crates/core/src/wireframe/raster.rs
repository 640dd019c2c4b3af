use std::io::Cursor;
use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};

use super::Wireframe;
use crate::{Error, Result};

/// Dense H x W x C image with values in [-1, 1], stored row-major, channels
/// interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

/// `[-1, 1] -> {0..255}` with round-half-up.
pub fn level_from_value(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) as f64 + 1.0) / 2.0 * 255.0 + 0.5).floor() as u8
}

pub fn value_from_level(level: u8) -> f32 {
    level as f32 / 255.0 * 2.0 - 1.0
}

impl RasterImage {
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Wraps raw HWC data; values are clamped into [-1, 1].
    pub fn from_data(width: usize, height: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(-1.0, 1.0);
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// (1, C, H, W) f32 tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, self.channels), &Device::Cpu)?;
        Ok(t.permute((2, 0, 1))?.contiguous()?.unsqueeze(0)?)
    }

    /// Stacks same-shaped images into an (N, C, H, W) tensor.
    pub fn batch(images: &[&RasterImage]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("cannot batch zero images".into()))?;
        let mut parts = Vec::with_capacity(images.len());
        for img in images {
            if (img.width, img.height, img.channels) != (first.width, first.height, first.channels) {
                return Err(Error::Shape("batched images differ in shape".into()));
            }
            parts.push(img.to_tensor()?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Splits an (N, C, H, W) tensor into images.
    pub fn from_tensor(t: &Tensor) -> Result<Vec<RasterImage>> {
        let (n, c, h, w) = t.dims4()?;
        let hwc = t
            .to_dtype(candle_core::DType::F32)?
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        hwc.chunks(h * w * c)
            .take(n)
            .map(|chunk| RasterImage::from_data(w, h, c, chunk.to_vec()))
            .collect()
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&l| value_from_level(l)).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: 3,
            data,
        }
    }

    /// 8-bit rendering; single-channel images are replicated to gray RGB.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in out.pixels_mut().enumerate() {
            let p = &self.data[i * self.channels..(i + 1) * self.channels];
            *px = match self.channels {
                1 => Rgb([level_from_value(p[0]); 3]),
                _ => Rgb([level_from_value(p[0]), level_from_value(p[1]), level_from_value(p[2])]),
            };
        }
        out
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        match self.channels {
            1 => image::GrayImage::from_raw(
                self.width as u32,
                self.height as u32,
                self.data.iter().map(|&v| level_from_value(v)).collect(),
            )
            .expect("dimensions match"),
            _ => image::DynamicImage::ImageRgb8(self.to_rgb8()).to_luma8(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_rgb8(&image::load_from_memory(bytes)?.to_rgb8()))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        match self.channels {
            1 => self.to_luma8().write_to(&mut buf, image::ImageFormat::Png)?,
            _ => self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?,
        }
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }

    /// Resamples to `width` x `height`: bilinear when `smooth`, nearest otherwise.
    pub fn resized(&self, width: usize, height: usize, smooth: bool) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let filter = if smooth { FilterType::Triangle } else { FilterType::Nearest };
        let (w, h) = (self.width as u32, self.height as u32);
        let data = match self.channels {
            1 => {
                let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                    ImageBuffer::from_raw(w, h, self.data.clone()).expect("dimensions match");
                imageops::resize(&buf, width as u32, height as u32, filter).into_raw()
            }
            3 => {
                let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
                    ImageBuffer::from_raw(w, h, self.data.clone()).expect("dimensions match");
                imageops::resize(&buf, width as u32, height as u32, filter).into_raw()
            }
            c => panic!("resize supports 1 or 3 channels, got {c}"),
        };
        Self::from_data(width, height, self.channels, data).expect("resize output shape")
    }

    pub fn cropped(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        assert!(x0 + width <= self.width && y0 + height <= self.height, "crop outside image");
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Self {
            width,
            height,
            channels: self.channels,
            data,
        }
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(self.pixel(x, y));
            }
        }
        Self { data, ..*self }
    }

    /// Mean absolute difference over all values.
    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }
}

/// Draws `wf` on a square `out_size` canvas. See [`rasterize_to`].
pub fn rasterize(wf: &Wireframe, out_size: usize, line_width: f32) -> RasterImage {
    rasterize_to(wf, out_size, out_size, line_width)
}

/// Draws every segment as the set of pixel centres within `line_width / 2`
/// of it: +1 on a -1 background, single channel. Junction coordinates are
/// rescaled from the wireframe canvas with the pixel-centre convention.
pub fn rasterize_to(wf: &Wireframe, width: usize, height: usize, line_width: f32) -> RasterImage {
    assert!(width >= 8 && height >= 8, "raster size must be at least 8, got {width}x{height}");
    assert!(line_width >= 1.0, "line width must be at least 1, got {line_width}");
    let mut img = RasterImage::filled(width, height, 1, -1.0);
    let wf = wf.scaled(width as u32, height as u32);
    let r = line_width as f64 / 2.0;
    let r2 = r * r + 1e-9;
    for (a, b) in wf.lines() {
        let x_lo = (a[0].min(b[0]) - r).floor().max(0.0) as usize;
        let x_hi = ((a[0].max(b[0]) + r).ceil() as usize).min(width - 1);
        let y_lo = (a[1].min(b[1]) - r).floor().max(0.0) as usize;
        let y_hi = ((a[1].max(b[1]) + r).ceil() as usize).min(height - 1);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        for py in y_lo..=y_hi {
            for px in x_lo..=x_hi {
                let (qx, qy) = (px as f64 - a[0], py as f64 - a[1]);
                let t = if len2 > 0.0 {
                    ((qx * dx + qy * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (ex, ey) = (qx - t * dx, qy - t * dy);
                if ex * ex + ey * ey <= r2 {
                    img.data[py * width + px] = 1.0;
                }
            }
        }
    }
    img
}
