use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::raster::{level_from_value, RasterImage};
use crate::{Error, Result};

pub const HISTOGRAM_BINS: usize = 256;
pub const HISTOGRAM_DIM: usize = HISTOGRAM_BINS * 3;

/// Per-channel RGB histogram: `bins[level * 3 + channel]` is the fraction of
/// pixels whose channel value quantises to `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorHistogram {
    bins: Vec<f64>,
}

impl ColorHistogram {
    const SUM_TOLERANCE: f64 = 1e-6;

    /// Validates that entries are non-negative and each channel sums to 1.
    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        if rows.len() != HISTOGRAM_BINS {
            return Err(Error::Shape(format!(
                "histogram needs {HISTOGRAM_BINS} rows, got {}",
                rows.len()
            )));
        }
        let bins: Vec<f64> = rows.iter().flatten().copied().collect();
        if let Some(i) = bins.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "histogram entry (level {}, channel {}) is negative or non-finite",
                i / 3,
                i % 3
            )));
        }
        let h = Self { bins };
        for c in 0..3 {
            let sum = h.channel_sum(c);
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::Config(format!("histogram channel {c} sums to {sum}, expected 1")));
            }
        }
        Ok(h)
    }

    /// Every level equally likely.
    pub fn uniform() -> Self {
        Self {
            bins: vec![1.0 / HISTOGRAM_BINS as f64; HISTOGRAM_DIM],
        }
    }

    pub fn get(&self, level: usize, channel: usize) -> f64 {
        self.bins[level * 3 + channel]
    }

    pub fn channel_sum(&self, channel: usize) -> f64 {
        (0..HISTOGRAM_BINS).map(|l| self.get(l, channel)).sum()
    }

    pub fn rows(&self) -> Vec<[f64; 3]> {
        self.bins.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    /// Flat `level * 3 + channel` layout, as fed to the guidance projection.
    pub fn as_slice(&self) -> &[f64] {
        &self.bins
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bins.iter().map(|&v| v as f32).collect()
    }
}

impl Serialize for ColorHistogram {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ColorHistogram {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<[f64; 3]>::deserialize(d)?;
        ColorHistogram::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Quantises each channel to 0..=255 (round half up from `[-1, 1]`) and
/// returns the per-channel level frequencies.
pub fn color_histogram(img: &RasterImage) -> Result<ColorHistogram> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!(
            "color histogram needs 3 channels, got {}",
            img.channels()
        )));
    }
    let mut counts = vec![0u64; HISTOGRAM_DIM];
    for px in img.data().chunks_exact(3) {
        for (c, &v) in px.iter().enumerate() {
            counts[level_from_value(v) as usize * 3 + c] += 1;
        }
    }
    let total = (img.width() * img.height()) as f64;
    Ok(ColorHistogram {
        bins: counts.into_iter().map(|n| n as f64 / total).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wireframe::raster::value_from_level;

    #[test]
    fn mid_gray_lands_in_one_bin() {
        let img = RasterImage::filled(7, 5, 3, 0.0);
        let h = color_histogram(&img).unwrap();
        for c in 0..3 {
            assert_eq!(h.get(128, c), 1.0);
            assert_eq!(h.channel_sum(c), 1.0);
        }
    }

    #[test]
    fn two_pixel_extremes() {
        let img = RasterImage::from_data(2, 1, 3, vec![-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]).unwrap();
        let h = color_histogram(&img).unwrap();
        for c in 0..3 {
            assert_eq!(h.get(0, c), 0.5);
            assert_eq!(h.get(255, c), 0.5);
        }
    }

    #[test]
    fn sums_to_one_and_flip_invariant() {
        let data: Vec<f32> = (0..31 * 17 * 3).map(|i| value_from_level((i * 7 % 256) as u8)).collect();
        let img = RasterImage::from_data(31, 17, 3, data).unwrap();
        let h = color_histogram(&img).unwrap();
        for c in 0..3 {
            assert!((h.channel_sum(c) - 1.0).abs() < 1e-6);
        }
        assert_eq!(h, color_histogram(&img.flipped_horizontal()).unwrap());
    }

    #[test]
    fn json_rows_validate() {
        let h = ColorHistogram::uniform();
        let json = serde_json::to_string(&h).unwrap();
        let back: ColorHistogram = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows().len(), 256);
        let mut rows = h.rows();
        rows[0][1] += 0.5;
        assert!(ColorHistogram::from_rows(&rows).is_err());
        assert!(ColorHistogram::from_rows(&rows[..10]).is_err());
        assert!(color_histogram(&RasterImage::filled(4, 4, 1, 0.0)).is_err());
    }
}
