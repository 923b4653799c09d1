//! On-disk layout of the pseudo-pair dataset and plain image folders.
//!
//! A pair dataset directory holds `pairs/{seed:08}_real.png`,
//! `pairs/{seed:08}_anime.png`, and `manifest.jsonl` with one record per
//! pair. Selection writes its score and keep/discard decision back into the
//! manifest so filtering stays auditable and resumable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image_native, ImageTensor};
use crate::types::PseudoPair;

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const PAIRS_SUBDIR: &str = "pairs";

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub seed: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bce_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept: Option<bool>,
}

/// Ordered manifest of a pair dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Persistence(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(line).map_err(|e| {
                Error::Persistence(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            rows.push(row);
        }
        Ok(Manifest { rows })
    }

    /// Writes atomically (temp file + rename) so a crash never leaves a
    /// half-written manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(
                &serde_json::to_string(row).map_err(|e| Error::Persistence(e.to_string()))?,
            );
            out.push('\n');
        }
        let tmp = path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, out)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn kept(&self) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(|r| r.kept != Some(false))
    }

    pub fn kept_count(&self) -> usize {
        self.kept().count()
    }
}

pub fn pair_paths(dir: &Path, seed: u32) -> (PathBuf, PathBuf) {
    let pairs = dir.join(PAIRS_SUBDIR);
    (
        pairs.join(format!("{seed:08}_real.png")),
        pairs.join(format!("{seed:08}_anime.png")),
    )
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_NAME)
}

/// Pseudo-pair dataset rooted at a directory.
pub struct PairDataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl PairDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(&manifest_path(dir))?;
        Ok(PairDataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn load_pair(&self, row: &ManifestRow) -> Result<PseudoPair> {
        let (xp, yp) = pair_paths(&self.dir, row.seed);
        let x = load_image_native(&xp)
            .map_err(|e| Error::Persistence(format!("missing pair image: {e}")))?;
        let y = load_image_native(&yp)
            .map_err(|e| Error::Persistence(format!("missing pair image: {e}")))?;
        let mut pair = PseudoPair::new(x, y, row.seed)?;
        pair.bce_score = row.bce_score;
        Ok(pair)
    }

    /// Seeds of rows that survived (or have not yet been through) selection.
    pub fn kept_rows(&self) -> Vec<ManifestRow> {
        self.manifest.kept().cloned().collect()
    }
}

/// Flat folder of images, sorted by file name, loaded at a fixed resolution.
pub struct ImageFolder {
    pub paths: Vec<PathBuf>,
    pub resolution: usize,
}

impl ImageFolder {
    pub fn open(dir: &Path, resolution: usize) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::Persistence(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|x| {
                        let x = x.to_string_lossy().to_lowercase();
                        x == "png" || x == "jpg" || x == "jpeg"
                    })
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        Ok(ImageFolder {
            paths,
            resolution,
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<ImageTensor> {
        crate::image::load_image(&self.paths[i], self.resolution)
    }
}
