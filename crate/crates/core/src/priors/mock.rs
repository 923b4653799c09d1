//! Deterministic mock priors.
//!
//! These are not learned models; they are cheap pure functions satisfying
//! every adapter invariant (determinism, differentiability where required,
//! valid distributions), sufficient to run and test the whole pipeline
//! offline.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::priors::{ImageEmbedder, PerceptualMetric, SegMap, Segmenter};
use crate::rng::PipelineRng;
use crate::tape::{Tape, Var};

pub const MOCK_EMBED_DIM: usize = 16;
pub const MOCK_EMBEDDER_SEED: u64 = 0x5ce9e;

/// Mean-pools each crop per channel and applies a fixed random projection
/// `[3 -> dim]`. Distinct content gives distinct embeddings; everything is
/// differentiable through the pooling and the projection.
pub struct MockEmbedder {
    dim: usize,
    /// Row-major `[3, dim]` projection.
    projection: Vec<f64>,
}

impl MockEmbedder {
    pub fn new(dim: usize, mut rng: PipelineRng) -> Self {
        let projection = (0..3 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        MockEmbedder { dim, projection }
    }

    /// The fixed projection matrix, row-major `[3, dim]`. Exposed so tests
    /// can compute expected embeddings by hand.
    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    fn embed_region(&self, tape: &mut Tape, region: Var) -> Var {
        let means = tape.mean_hw(region); // [3]
        let row = tape.reshape(means, &[1, 3]);
        let proj = tape.constant(&[3, self.dim], self.projection.clone());
        let out = tape.matmul(row, proj); // [1, dim]
        tape.reshape(out, &[self.dim])
    }
}

impl ImageEmbedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_global_t(&self, tape: &mut Tape, img: Var) -> Var {
        self.embed_region(tape, img)
    }

    fn embed_patches_t(
        &self,
        tape: &mut Tape,
        img: Var,
        locations: &[(usize, usize)],
        patch_size: usize,
    ) -> Result<Var> {
        let shape = tape.shape(img).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let mut rows = Vec::with_capacity(locations.len());
        for &(r, c) in locations {
            if r + patch_size > h || c + patch_size > w {
                return Err(Error::Bounds(format!(
                    "patch at ({r}, {c}) size {patch_size} exceeds {h}x{w} image"
                )));
            }
            let crop = tape.crop(img, r, c, patch_size);
            let e = self.embed_region(tape, crop);
            rows.push(tape.reshape(e, &[1, self.dim]));
        }
        if rows.is_empty() {
            return Ok(tape.constant(&[0, self.dim], vec![]));
        }
        Ok(tape.concat_axis0(&rows))
    }
}

/// Mean squared difference of block-blurred images: both inputs are average
/// pooled over `block` x `block` tiles, then compared with MSE. Symmetric,
/// zero at equality, differentiable.
pub struct MockPerceptual {
    pub block: usize,
}

impl Default for MockPerceptual {
    fn default() -> Self {
        MockPerceptual { block: 2 }
    }
}

impl PerceptualMetric for MockPerceptual {
    fn distance_t(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::Shape(format!(
                "perceptual distance on mismatched shapes {:?} vs {:?}",
                tape.shape(a),
                tape.shape(b)
            )));
        }
        let pa = tape.avg_pool_blocks(a, self.block);
        let pb = tape.avg_pool_blocks(b, self.block);
        let diff = tape.sub(pa, pb);
        let sq = tape.sqr(diff);
        Ok(tape.mean_all(sq))
    }
}

/// Buckets pixel luminance into `k` classes. Class probabilities are a
/// softmax over negative distances to the bucket centers, so cross-entropies
/// stay finite; the argmax is the nearest center.
pub struct MockSegmenter {
    pub num_classes: usize,
    pub temperature: f64,
}

impl MockSegmenter {
    pub fn new(num_classes: usize) -> Self {
        assert!(num_classes >= 2);
        MockSegmenter {
            num_classes,
            temperature: 0.25,
        }
    }

    fn centers(&self) -> Vec<f64> {
        let k = self.num_classes;
        (0..k)
            .map(|i| -1.0 + (2.0 * i as f64 + 1.0) / k as f64)
            .collect()
    }
}

impl Segmenter for MockSegmenter {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn segment(&self, img: &ImageTensor) -> Result<SegMap> {
        let (h, w) = (img.height(), img.width());
        let hw = h * w;
        let centers = self.centers();
        let k = self.num_classes;
        let mut probs = vec![0.0; k * hw];
        for y in 0..h {
            for x in 0..w {
                let lum = (img.get(0, y, x) + img.get(1, y, x) + img.get(2, y, x)) / 3.0;
                let i = y * w + x;
                let mut mx = f64::NEG_INFINITY;
                let logits: Vec<f64> = centers
                    .iter()
                    .map(|c| {
                        let l = -(lum - c).abs() / self.temperature;
                        mx = mx.max(l);
                        l
                    })
                    .collect();
                let mut z = 0.0;
                for (ki, &l) in logits.iter().enumerate() {
                    let e = (l - mx).exp();
                    probs[ki * hw + i] = e;
                    z += e;
                }
                for ki in 0..k {
                    probs[ki * hw + i] /= z;
                }
            }
        }
        SegMap::from_probs(k, h, w, probs)
    }
}

/// Test helper: maps images to prescribed segmentations by a closure.
pub struct ScriptedSegmenter<F: Fn(&ImageTensor) -> Result<SegMap>> {
    pub num_classes: usize,
    pub rule: F,
}

impl<F: Fn(&ImageTensor) -> Result<SegMap>> Segmenter for ScriptedSegmenter<F> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn segment(&self, img: &ImageTensor) -> Result<SegMap> {
        (self.rule)(img)
    }
}
