use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use wr_core::model::Renderer;
use wr_core::trainer::{load_renderer, CheckpointMeta};
use wr_core::wireframe::{color_histogram, rasterize, ColorHistogram, RasterImage, Wireframe, HISTOGRAM_DIM};
use wr_core::{Error, Result};

/// Colour conditioning for one render.
#[derive(Debug, Clone, Default)]
pub enum Guidance {
    #[default]
    None,
    Histogram(ColorHistogram),
    /// Conditions on this image's colour histogram.
    Reference(RasterImage),
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub scene: RasterImage,
    pub wireframe: RasterImage,
}

/// A loaded checkpoint, read-only after construction.
#[derive(Debug)]
pub struct Engine {
    model: Renderer,
    meta: CheckpointMeta,
    path: PathBuf,
}

impl Engine {
    pub fn load(path: &Path) -> Result<Self> {
        let (model, meta) = load_renderer(path)?;
        tracing::info!(path = %path.display(), epoch = meta.epoch, step = meta.step, "loaded checkpoint");
        Ok(Self {
            model,
            meta,
            path: path.to_path_buf(),
        })
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn model(&self) -> &Renderer {
        &self.model
    }

    /// File stem of the checkpoint, used as its id in requests.
    pub fn checkpoint_id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn model_version(&self) -> String {
        format!(
            "{}+{}.e{}.s{}",
            self.meta.code_version,
            self.checkpoint_id(),
            self.meta.epoch,
            self.meta.step
        )
    }

    pub fn input_size(&self) -> usize {
        self.model.config().input_size
    }

    pub fn is_guided(&self) -> bool {
        self.model.config().guidance.enabled
    }

    /// Rasterizes `wf` exactly as training did and runs the generator in
    /// inference mode. A guided model given no guidance conditions on the
    /// uniform histogram.
    pub fn render(&self, wf: &Wireframe, guidance: &Guidance) -> Result<Rendered> {
        let size = self.input_size();
        let raster = rasterize(wf, size, self.meta.config.augment.line_width);
        let x = RasterImage::batch(&[&raster])?;
        let hist = match guidance {
            Guidance::None => None,
            Guidance::Histogram(h) => Some(h.clone()),
            Guidance::Reference(img) => Some(color_histogram(img)?),
        };
        if hist.is_some() && !self.is_guided() {
            return Err(Error::Config("checkpoint was trained without colour guidance".into()));
        }
        let h = hist
            .map(|h| Tensor::from_vec(h.to_f32(), (1, HISTOGRAM_DIM), x.device()))
            .transpose()?;
        let out = self.model.generate(&x, h.as_ref(), false)?;
        let first = |t: &Tensor| -> Result<RasterImage> {
            RasterImage::from_tensor(&t.to_dtype(DType::F32)?)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Shape("generator returned an empty batch".into()))
        };
        Ok(Rendered {
            scene: first(&out.scene)?,
            wireframe: first(&out.wireframe)?,
        })
    }
}
