use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::raster::{rasterize_to, RasterImage};
use super::Wireframe;
use crate::{Error, Result};

/// One wireframe/photo pair. `wireframe_raster` is always
/// `rasterize_to(wireframe, scene.width(), scene.height(), line_width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub wireframe: Wireframe,
    pub wireframe_raster: RasterImage,
    pub scene: RasterImage,
}

impl PairedSample {
    /// Builds a sample, rescaling the wireframe onto the scene's canvas.
    pub fn new(id: impl Into<String>, wireframe: &Wireframe, scene: RasterImage, line_width: f32) -> Self {
        let wireframe = wireframe.scaled(scene.width() as u32, scene.height() as u32);
        let wireframe_raster = rasterize_to(&wireframe, scene.width(), scene.height(), line_width);
        Self {
            id: id.into(),
            wireframe,
            wireframe_raster,
            scene,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn manifest_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Test => "test.txt",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    /// Resample every pair to this square size; `None` keeps native size.
    pub size: Option<usize>,
    pub line_width: f32,
    pub workers: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            size: None,
            line_width: 2.0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

pub(crate) const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub(crate) fn ids_in(dir: &Path, extensions: &[&str]) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if let (Some(ext), Some(stem)) = (ext, path.file_stem().and_then(|s| s.to_str())) {
            if extensions.contains(&ext.as_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

pub(crate) fn image_path(dir: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .flat_map(|e| [e.to_string(), e.to_ascii_uppercase()])
        .map(|e| dir.join(format!("{id}.{e}")))
        .find(|p| p.is_file())
}

fn load_one(root: &Path, id: &str, opts: &DatasetOptions) -> Result<PairedSample> {
    let ann_path = root.join("annotations").join(format!("{id}.json"));
    let bytes = std::fs::read(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let wireframe = Wireframe::from_json(&bytes)
        .map_err(|e| Error::Dataset(format!("{}: {e}", ann_path.display())))?;
    let img_path = image_path(&root.join("images"), id).ok_or_else(|| Error::Orphans(vec![id.to_string()]))?;
    let mut scene = RasterImage::load(&img_path)?;
    if let Some(size) = opts.size {
        scene = scene.resized(size, size, true);
    }
    Ok(PairedSample::new(id, &wireframe, scene, opts.line_width))
}

/// [`load_dataset_with`] using default options.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<PairedSample>> {
    load_dataset_with(root, split, &DatasetOptions::default())
}

/// Loads the ids listed in `<root>/<split>.txt` from `images/` and
/// `annotations/`, sorted by id.
///
/// Any id that has an image but no annotation (or the reverse), whether
/// listed in the manifest or not, fails the whole load with
/// [`Error::Orphans`].
pub fn load_dataset_with(root: &Path, split: Split, opts: &DatasetOptions) -> Result<Vec<PairedSample>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a directory", root.display())));
    }
    let manifest_path = root.join(split.manifest_name());
    let manifest = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let ids: BTreeSet<String> = manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();

    let images = ids_in(&root.join("images"), &IMAGE_EXTENSIONS)?;
    let annotations = ids_in(&root.join("annotations"), &["json"])?;
    let mut orphans: BTreeSet<String> = images.symmetric_difference(&annotations).cloned().collect();
    orphans.extend(ids.iter().filter(|id| !images.contains(*id) || !annotations.contains(*id)).cloned());
    if !orphans.is_empty() {
        return Err(Error::Orphans(orphans.into_iter().collect()));
    }

    let ids: Vec<String> = ids.into_iter().collect();
    let workers = opts.workers.clamp(1, ids.len().max(1));
    let chunk = ids.len().div_ceil(workers).max(1);
    let chunks: Vec<Result<Vec<PairedSample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|id| load_one(root, id, opts)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("dataset reader panicked"))
            .collect()
    });
    let mut samples = Vec::with_capacity(ids.len());
    for part in chunks {
        samples.extend(part?);
    }
    tracing::debug!(split = %split, count = samples.len(), "loaded dataset");
    Ok(samples)
}
