//! Adapters for the three pretrained priors: a joint image embedder, a
//! perceptual distance, and a semantic segmenter.
//!
//! All adapters are frozen — they never receive parameter updates — but the
//! embedder and perceptual adapters run on the tape so gradients flow
//! *through* them into generator parameters. Segmentation is gradient-free.
//! Deterministic mock implementations ship in-repo so the whole pipeline is
//! testable with no downloaded weights; real backends would implement the
//! same traits.

pub mod mock;

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::seeded_rng;
use crate::tape::{Tape, Var};

/// A provider's embedding of one image or patch.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    pub v: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn norm(&self) -> f64 {
        self.v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> EmbeddingVector {
        let n = self.norm().max(1e-12);
        EmbeddingVector {
            v: self.v.iter().map(|x| x / n).collect(),
        }
    }

    pub fn cosine_distance(&self, other: &EmbeddingVector) -> f64 {
        let a = self.normalized();
        let b = other.normalized();
        1.0 - a.v.iter().zip(&b.v).map(|(x, y)| x * y).sum::<f64>()
    }
}

/// Per-pixel class distribution with derived argmax labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// `[k, h, w]`, each pixel's distribution sums to 1.
    pub probs: Vec<f64>,
    /// `[h, w]` argmax class per pixel.
    pub labels: Vec<usize>,
}

impl SegMap {
    /// Validates distributions and derives labels and the category set.
    pub fn from_probs(
        num_classes: usize,
        height: usize,
        width: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if num_classes == 0 || probs.len() != num_classes * height * width {
            return Err(Error::Shape(format!(
                "expected {}x{}x{} probabilities, got {}",
                num_classes,
                height,
                width,
                probs.len()
            )));
        }
        let hw = height * width;
        let mut labels = vec![0usize; hw];
        for i in 0..hw {
            let mut sum = 0.0;
            let mut best = 0;
            let mut best_p = f64::NEG_INFINITY;
            for k in 0..num_classes {
                let p = probs[k * hw + i];
                if !(0.0..=1.0 + 1e-9).contains(&p) {
                    return Err(Error::Numeric(format!("probability {p} outside [0,1]")));
                }
                sum += p;
                if p > best_p {
                    best_p = p;
                    best = k;
                }
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Numeric(format!(
                    "pixel distribution sums to {sum}, expected 1"
                )));
            }
            labels[i] = best;
        }
        Ok(SegMap {
            num_classes,
            height,
            width,
            probs,
            labels,
        })
    }

    pub fn prob(&self, class: usize, y: usize, x: usize) -> f64 {
        self.probs[(class * self.height + y) * self.width + x]
    }

    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    /// Distinct labels present in the map.
    pub fn category_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }
}

/// Joint image embedder (global and patch-level), differentiable on-tape.
pub trait ImageEmbedder {
    fn dim(&self) -> usize;

    /// Embeds a whole image given as a `[3, h, w]` tape variable.
    fn embed_global_t(&self, tape: &mut Tape, img: Var) -> Var;

    /// Embeds square crops at the given (row, col) corners; one row per
    /// location, order preserving. Returns `[n, dim]`.
    fn embed_patches_t(
        &self,
        tape: &mut Tape,
        img: Var,
        locations: &[(usize, usize)],
        patch_size: usize,
    ) -> Result<Var>;

    /// Convenience wrapper over [`ImageEmbedder::embed_global_t`].
    fn embed_global(&self, img: &ImageTensor) -> EmbeddingVector {
        let mut tape = Tape::new();
        let v = tape.constant(&img.shape(), img.data().to_vec());
        let e = self.embed_global_t(&mut tape, v);
        EmbeddingVector {
            v: tape.value(e).to_vec(),
        }
    }

    /// Convenience wrapper over [`ImageEmbedder::embed_patches_t`].
    fn embed_patches(
        &self,
        img: &ImageTensor,
        locations: &[(usize, usize)],
        patch_size: usize,
    ) -> Result<Vec<EmbeddingVector>> {
        if locations.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let v = tape.constant(&img.shape(), img.data().to_vec());
        let e = self.embed_patches_t(&mut tape, v, locations, patch_size)?;
        let dim = self.dim();
        Ok(tape
            .value(e)
            .chunks(dim)
            .map(|c| EmbeddingVector { v: c.to_vec() })
            .collect())
    }
}

/// Perceptual distance, differentiable on-tape, symmetric, zero at equality.
pub trait PerceptualMetric {
    /// Scalar distance between two same-shape `[3, h, w]` variables.
    fn distance_t(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var>;

    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "perceptual distance on mismatched shapes {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut tape = Tape::new();
        let av = tape.constant(&a.shape(), a.data().to_vec());
        let bv = tape.constant(&b.shape(), b.data().to_vec());
        let d = self.distance_t(&mut tape, av, bv)?;
        Ok(tape.scalar_value(d))
    }
}

/// Semantic segmentation model; pure function of the input image.
pub trait Segmenter {
    fn num_classes(&self) -> usize;
    fn segment(&self, img: &ImageTensor) -> Result<SegMap>;
}

/// Resolves an embedder by provider name. Mock providers need no weight
/// files; real backends are documented as optional extras and report a
/// prior-load error here until wired to weights.
pub fn embedder_registry(name: &str) -> Result<Box<dyn ImageEmbedder>> {
    match name {
        "mock" => Ok(Box::new(mock::MockEmbedder::new(
            mock::MOCK_EMBED_DIM,
            seeded_rng(mock::MOCK_EMBEDDER_SEED),
        ))),
        other => Err(Error::PriorLoad(format!(
            "embedder provider {other:?} has no bundled weights; available: mock"
        ))),
    }
}

pub fn perceptual_registry(name: &str) -> Result<Box<dyn PerceptualMetric>> {
    match name {
        "mock" => Ok(Box::new(mock::MockPerceptual::default())),
        other => Err(Error::PriorLoad(format!(
            "perceptual provider {other:?} has no bundled weights; available: mock"
        ))),
    }
}

pub fn segmenter_registry(name: &str) -> Result<Box<dyn Segmenter>> {
    match name {
        "mock" => Ok(Box::new(mock::MockSegmenter::new(4))),
        other => Err(Error::PriorLoad(format!(
            "segmentation provider {other:?} has no bundled weights; available: mock"
        ))),
    }
}
