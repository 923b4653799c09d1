//! Stage 2: segmentation-guided pair selection.
//!
//! Two criteria decide whether a pseudo pair survives: semantic
//! consistency (mean pixel-wise cross-entropy between the segmenter's
//! predictions on the two members, at most a threshold) and semantic
//! abundance (the anime member must show at least two categories).

use std::path::Path;

use crate::dataset::{manifest_path, Manifest, PairDataset};
use crate::error::{Error, Result};
use crate::priors::Segmenter;
use crate::types::PseudoPair;

/// Mean over pixels of `-ln p_y(class_x)`: the real-like member's argmax
/// labels are the target, the anime-like member's distribution is the
/// prediction. Zero only when the prediction puts probability one on the
/// label everywhere.
pub fn consistency_score(pair: &PseudoPair, seg: &dyn Segmenter) -> Result<f64> {
    let mx = seg.segment(&pair.x_p)?;
    let my = seg.segment(&pair.y_p)?;
    if mx.height != my.height || mx.width != my.width {
        return Err(Error::Shape(format!(
            "segmentation resolutions differ: {}x{} vs {}x{}",
            mx.height, mx.width, my.height, my.width
        )));
    }
    if mx.num_classes > my.num_classes {
        return Err(Error::Shape(format!(
            "label space {} exceeds prediction classes {}",
            mx.num_classes, my.num_classes
        )));
    }
    let mut total = 0.0;
    let n = mx.height * mx.width;
    for y in 0..mx.height {
        for x in 0..mx.width {
            let label = mx.label(y, x);
            let p = my.prob(label, y, x);
            total += -(p.max(f64::MIN_POSITIVE)).ln();
        }
    }
    Ok(total / n as f64)
}

/// True iff the anime member shows at least two detected categories.
pub fn abundance_ok(pair: &PseudoPair, seg: &dyn Segmenter) -> Result<bool> {
    let my = seg.segment(&pair.y_p)?;
    Ok(my.category_set().len() >= 2)
}

/// Scores every manifest row, writes `bce_score` and the keep/discard flag
/// back, and persists the updated manifest. Keeps pairs whose score is at
/// most `threshold` *and* that pass the abundance check. Idempotent: the
/// decision depends only on (pair, segmenter, threshold).
pub fn filter_dataset(dir: &Path, seg: &dyn Segmenter, threshold: f64) -> Result<Manifest> {
    let dataset = PairDataset::open(dir)?;
    let mut manifest = dataset.manifest.clone();
    for row in &mut manifest.rows {
        let pair = dataset.load_pair(row)?;
        let score = consistency_score(&pair, seg)?;
        let abundant = abundance_ok(&pair, seg)?;
        row.bce_score = Some(score);
        row.kept = Some(score <= threshold && abundant);
    }
    manifest.save(&manifest_path(dir))?;
    Ok(manifest)
}
