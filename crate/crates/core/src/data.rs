//! Image directory ingestion: grayscale, center 3k x 3k crop, nine k x k
//! tiles per image, values scaled to [0, 1].

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CACHE_MAGIC: &[u8; 8] = b"DEMUNDAT";
const CACHE_VERSION: u32 = 1;

/// Where a tile came from: file name and row-major tile index 0..9.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSource {
    pub file: String,
    pub tile: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Contiguous tile ranges, test first, then train, then validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub test: Range<usize>,
    pub train: Range<usize>,
    pub val: Range<usize>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IngestLimits {
    /// Stop after this many usable source images.
    pub max_images: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    k: usize,
    tiles: Vec<f64>,
    manifest: Vec<TileSource>,
    splits: Option<Splits>,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    k: usize,
    manifest: Vec<TileSource>,
    splits: Option<Splits>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm" | "pnm"))
        .unwrap_or(false)
}

/// 8-bit luminance plane; RGB is mixed with weights 0.299 / 0.587 / 0.114.
pub fn luminance(img: &image::DynamicImage) -> (usize, usize, Vec<f64>) {
    use image::ColorType::*;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = match img.color() {
        L8 | La8 | L16 | La16 => img.to_luma8().pixels().map(|p| p[0] as f64).collect(),
        _ => img
            .to_rgb8()
            .pixels()
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect(),
    };
    (w, h, plane)
}

/// The nine `k x k` tiles of the centered `3k x 3k` crop, row-major, scaled
/// by 1/255. `None` when the image is smaller than `3k` on either side.
pub fn center_tiles(width: usize, height: usize, plane: &[f64], k: usize) -> Option<Vec<Vec<f64>>> {
    let side = 3 * k;
    if width < side || height < side || k == 0 {
        return None;
    }
    let (ox, oy) = ((width - side) / 2, (height - side) / 2);
    let mut tiles = Vec::with_capacity(9);
    for tr in 0..3 {
        for tc in 0..3 {
            let mut t = Vec::with_capacity(k * k);
            for r in 0..k {
                let row = (oy + tr * k + r) * width + ox + tc * k;
                t.extend(plane[row..row + k].iter().map(|v| v / 255.0));
            }
            tiles.push(t);
        }
    }
    Some(tiles)
}

pub fn ingest(dir: &Path, k: usize, limits: IngestLimits) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::invalid("tile size k must be positive"));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("no PNG/PGM images in {}", dir.display())));
    }

    let mut ds = Dataset {
        k,
        tiles: Vec::new(),
        manifest: Vec::new(),
        splits: None,
    };
    let mut used = 0;
    for path in files {
        if limits.max_images.is_some_and(|m| used >= m) {
            break;
        }
        let img = image::open(&path).map_err(|e| Error::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let (w, h, plane) = luminance(&img);
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let Some(tiles) = center_tiles(w, h, &plane, k) else {
            log::warn!("skipping {name}: {w}x{h} is smaller than {0}x{0}", 3 * k);
            continue;
        };
        for (i, t) in tiles.into_iter().enumerate() {
            ds.tiles.extend(t);
            ds.manifest.push(TileSource {
                file: name.clone(),
                tile: i,
            });
        }
        used += 1;
    }
    if ds.manifest.is_empty() {
        return Err(Error::Empty(format!(
            "no image in {} is at least {1}x{1}",
            dir.display(),
            3 * k
        )));
    }
    log::info!("ingested {} tiles from {used} images", ds.len());
    Ok(ds)
}

impl Dataset {
    /// Builds a dataset from raw tiles; every value must lie in [0, 1].
    pub fn from_tiles(k: usize, tiles: Vec<f64>, manifest: Vec<TileSource>) -> Result<Self> {
        if tiles.len() != manifest.len() * k * k {
            return Err(Error::shape(
                "dataset",
                format!("{} values for {} tiles of {k}x{k}", tiles.len(), manifest.len()),
            ));
        }
        if tiles.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("tile values must lie in [0, 1]"));
        }
        Ok(Self {
            k,
            tiles,
            manifest,
            splits: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn tile(&self, i: usize) -> &[f64] {
        let n = self.k * self.k;
        &self.tiles[i * n..(i + 1) * n]
    }

    pub fn manifest(&self) -> &[TileSource] {
        &self.manifest
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    /// Assigns contiguous ranges in manifest order: test, then train, then val.
    pub fn split(mut self, n_test: usize, n_train: usize, n_val: usize) -> Result<Self> {
        let need = n_test + n_train + n_val;
        if need > self.len() {
            return Err(Error::invalid(format!(
                "split needs {need} tiles ({n_test} test + {n_train} train + {n_val} val), dataset has {}",
                self.len()
            )));
        }
        self.splits = Some(Splits {
            test: 0..n_test,
            train: n_test..n_test + n_train,
            val: n_test + n_train..need,
        });
        Ok(self)
    }

    pub fn range(&self, split: Split) -> Result<Range<usize>> {
        let s = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset has not been split"))?;
        Ok(match split {
            Split::Test => s.test.clone(),
            Split::Train => s.train.clone(),
            Split::Val => s.val.clone(),
        })
    }

    /// Tiles of `split` stacked as `[count, k*k]`.
    pub fn tensor(&self, split: Split) -> Result<Tensor> {
        let r = self.range(split)?;
        let n = self.k * self.k;
        Tensor::new(vec![r.len(), n], self.tiles[r.start * n..r.end * n].to_vec())
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let header = CacheHeader {
            k: self.k,
            manifest: self.manifest.clone(),
            splits: self.splits.clone(),
        };
        container::write(path, CACHE_MAGIC, CACHE_VERSION, &header, &self.tiles)
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let (h, tiles): (CacheHeader, Vec<f64>) = container::read(path, CACHE_MAGIC, CACHE_VERSION)?;
        let mut ds = Self::from_tiles(h.k, tiles, h.manifest)?;
        if let Some(s) = h.splits {
            ds = ds.split(s.test.len(), s.train.len(), s.val.len())?;
        }
        Ok(ds)
    }
}
