//! Small domain types shared across stages.

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Point in the style generator's intermediate latent space, plus the
/// truncation factor to apply before synthesis.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub w: Vec<f64>,
    pub truncation: f64,
}

impl LatentCode {
    pub fn new(w: Vec<f64>, truncation: f64) -> Result<Self> {
        if !(truncation > 0.0 && truncation <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "truncation must be in (0, 1], got {truncation}"
            )));
        }
        Ok(LatentCode { w, truncation })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// A (real-like, anime-like) image pair synthesized from one latent code.
/// `bce_score` is filled by the selection stage.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPair {
    pub x_p: ImageTensor,
    pub y_p: ImageTensor,
    pub seed: u32,
    pub bce_score: Option<f64>,
}

impl PseudoPair {
    pub fn new(x_p: ImageTensor, y_p: ImageTensor, seed: u32) -> Result<Self> {
        if x_p.shape() != y_p.shape() {
            return Err(Error::Shape(format!(
                "pair members differ in shape: {:?} vs {:?}",
                x_p.shape(),
                y_p.shape()
            )));
        }
        Ok(PseudoPair {
            x_p,
            y_p,
            seed,
            bce_score: None,
        })
    }
}
