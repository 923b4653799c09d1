//! Python bindings: the main types and operations of the pipeline exposed
//! as plain functions over paths, nested lists, and TOML strings.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use scenepipe_core::config::TrainConfig;
use scenepipe_core::error::Error;
use scenepipe_core::image::ImageTensor;
use scenepipe_core::losses::{self, PatchFeatureLayer, PatchFeatureSet};
use scenepipe_core::priors::mock::MockSegmenter;
use scenepipe_core::tape::Tape;
use scenepipe_core::types::PseudoPair;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Shape(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_config(config_toml: Option<&str>) -> PyResult<TrainConfig> {
    match config_toml {
        Some(s) => TrainConfig::from_toml(s).map_err(to_py),
        None => Ok(TrainConfig::default()),
    }
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Default configuration as TOML.
#[pyfunction]
fn default_config_toml() -> PyResult<String> {
    TrainConfig::default().to_toml().map_err(to_py)
}

/// Parses and validates a TOML configuration, returning it normalized.
#[pyfunction]
fn validate_config(config_toml: &str) -> PyResult<String> {
    TrainConfig::from_toml(config_toml)
        .and_then(|c| c.to_toml())
        .map_err(to_py)
}

/// Supervised-branch weight at epoch `t` of `total` epochs.
#[pyfunction]
fn lambda_sup(t: usize, total: usize) -> PyResult<f64> {
    scenepipe_core::i2i::EpochSchedule::new(total)
        .and_then(|s| s.weight(t))
        .map_err(to_py)
}

/// InfoNCE loss for one query with one positive and a negative set.
#[pyfunction]
fn info_nce(
    query: Vec<f64>,
    positive: Vec<f64>,
    negatives: Vec<Vec<f64>>,
    temperature: f64,
) -> PyResult<f64> {
    let d = query.len();
    let n = negatives.len();
    for row in &negatives {
        if row.len() != d {
            return Err(PyValueError::new_err("ragged negative rows"));
        }
    }
    let mut tape = Tape::new();
    let q = tape.constant(&[d], query);
    let p = tape.constant(&[d], positive);
    let negs = tape.constant(&[n, d], negatives.concat());
    let l = losses::info_nce(&mut tape, q, p, negs, temperature).map_err(to_py)?;
    Ok(tape.scalar_value(l))
}

fn single_layer_set(rows: &[Vec<f64>]) -> PyResult<PatchFeatureSet> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("empty feature set"));
    }
    let d = rows[0].len();
    for row in rows {
        if row.len() != d {
            return Err(PyValueError::new_err("ragged feature rows"));
        }
    }
    PatchFeatureSet::new(vec![PatchFeatureLayer {
        layer_id: 0,
        dim: d,
        features: rows.concat(),
        locations: (0..rows.len()).map(|i| (i, 0)).collect(),
    }])
    .map_err(to_py)
}

/// Patch-wise contrastive style loss over one layer of features; queries
/// from `gen`, keys from `target`, positives pair by row index.
#[pyfunction]
fn style_patch_nce(
    gen: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
    temperature: f64,
) -> PyResult<f64> {
    let g = single_layer_set(&gen)?;
    let t = single_layer_set(&target)?;
    let mut tape = Tape::new();
    let gv = losses::lift_feature_set(&mut tape, &g, false);
    let tv = losses::lift_feature_set(&mut tape, &t, false);
    let l = losses::style_patch_nce(&mut tape, &gv, &tv, temperature).map_err(to_py)?;
    Ok(tape.scalar_value(l))
}

/// Semantic-relation consistency (mean Jensen-Shannon divergence of
/// in-image similarity distributions) over one layer of features.
#[pyfunction]
fn src_loss(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    let av = single_layer_set(&a)?;
    let bv = single_layer_set(&b)?;
    let mut tape = Tape::new();
    let al = losses::lift_feature_set(&mut tape, &av, false);
    let bl = losses::lift_feature_set(&mut tape, &bv, false);
    let l = losses::src_loss(&mut tape, &al, &bl, temperature).map_err(to_py)?;
    Ok(tape.scalar_value(l))
}

/// Hard-negative weighted contrastive loss over one layer of features.
#[pyfunction]
fn hdce_loss(
    src: Vec<Vec<f64>>,
    gen: Vec<Vec<f64>>,
    temperature: f64,
    hardness: f64,
) -> PyResult<f64> {
    let sv = single_layer_set(&src)?;
    let gv = single_layer_set(&gen)?;
    let mut tape = Tape::new();
    let sl = losses::lift_feature_set(&mut tape, &sv, false);
    let gl = losses::lift_feature_set(&mut tape, &gv, false);
    let l = losses::hdce_loss(&mut tape, &sl, &gl, temperature, hardness).map_err(to_py)?;
    Ok(tape.scalar_value(l))
}

/// Fréchet distance between two feature matrices (rows are samples).
#[pyfunction]
fn fid(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    scenepipe_core::eval::fid(&a, &b).map_err(to_py)
}

/// Loads an image as `(height, width, flat CHW data in [-1, 1])`.
#[pyfunction]
fn load_image(path: &str, resolution: usize) -> PyResult<(usize, usize, Vec<f64>)> {
    let img = scenepipe_core::image::load_image(Path::new(path), resolution).map_err(to_py)?;
    Ok((img.height(), img.width(), img.data().to_vec()))
}

/// Writes CHW data in [-1, 1] to a PNG.
#[pyfunction]
fn save_image(path: &str, height: usize, width: usize, data: Vec<f64>) -> PyResult<()> {
    let img = ImageTensor::from_data(height, width, data).map_err(to_py)?;
    img.save_png(Path::new(path)).map_err(to_py)
}

/// Segmentation consistency score between two image files under the
/// luminance mock segmenter.
#[pyfunction]
#[pyo3(signature = (real_png, anime_png, num_classes = 4))]
fn consistency_score_files(
    real_png: &str,
    anime_png: &str,
    num_classes: usize,
) -> PyResult<f64> {
    let x = scenepipe_core::image::load_image_native(Path::new(real_png)).map_err(to_py)?;
    let y = scenepipe_core::image::load_image_native(Path::new(anime_png)).map_err(to_py)?;
    let pair = PseudoPair::new(x, y, 0).map_err(to_py)?;
    let seg = MockSegmenter::new(num_classes);
    scenepipe_core::select::consistency_score(&pair, &seg).map_err(to_py)
}

/// Samples a pseudo pair from two generator checkpoints and writes both
/// members as PNGs.
#[pyfunction]
fn sample_pair_to(
    source_ckpt: &str,
    target_ckpt: &str,
    seed: u32,
    truncation: f64,
    out_real_png: &str,
    out_anime_png: &str,
) -> PyResult<()> {
    let g_s = scenepipe_core::adapt::StyleGenerator::load_checkpoint(Path::new(source_ckpt))
        .map_err(to_py)?;
    let g_t = scenepipe_core::adapt::StyleGenerator::load_checkpoint(Path::new(target_ckpt))
        .map_err(to_py)?;
    let pair = scenepipe_core::adapt::sample_pair(&g_s, &g_t, seed, truncation).map_err(to_py)?;
    pair.x_p.save_png(Path::new(out_real_png)).map_err(to_py)?;
    pair.y_p.save_png(Path::new(out_anime_png)).map_err(to_py)
}

/// Stage 1: fine-tune the target generator on an anime image folder.
#[pyfunction]
#[pyo3(signature = (anime_dir, out_dir, config_toml = None, source_ckpt = None))]
fn finetune_gen(
    anime_dir: &str,
    out_dir: &str,
    config_toml: Option<&str>,
    source_ckpt: Option<&str>,
) -> PyResult<()> {
    let cfg = parse_config(config_toml)?;
    scenepipe_core::cli::cmd_finetune_gen(
        &cfg,
        Path::new(anime_dir),
        Path::new(out_dir),
        source_ckpt.map(Path::new),
    )
    .map_err(to_py)
}

/// Stage 1.5: sample pseudo pairs; returns the pair count.
#[pyfunction]
#[pyo3(signature = (source_ckpt, target_ckpt, out_dir, config_toml = None))]
fn gen_pairs(
    source_ckpt: &str,
    target_ckpt: &str,
    out_dir: &str,
    config_toml: Option<&str>,
) -> PyResult<usize> {
    let cfg = parse_config(config_toml)?;
    scenepipe_core::cli::cmd_gen_pairs(
        &cfg,
        Path::new(source_ckpt),
        Path::new(target_ckpt),
        Path::new(out_dir),
    )
    .map_err(to_py)
}

/// Stage 2: filter pairs; returns `(kept, total)`.
#[pyfunction]
#[pyo3(signature = (pairs_dir, config_toml = None))]
fn filter_pairs(pairs_dir: &str, config_toml: Option<&str>) -> PyResult<(usize, usize)> {
    let cfg = parse_config(config_toml)?;
    scenepipe_core::cli::cmd_filter_pairs(&cfg, Path::new(pairs_dir)).map_err(to_py)
}

/// Stage 3: train the translation model.
#[pyfunction]
#[pyo3(signature = (real_dir, anime_dir, out_dir, pairs_dir = None, config_toml = None, resume = None))]
fn train(
    real_dir: &str,
    anime_dir: &str,
    out_dir: &str,
    pairs_dir: Option<&str>,
    config_toml: Option<&str>,
    resume: Option<&str>,
) -> PyResult<()> {
    let cfg = parse_config(config_toml)?;
    scenepipe_core::cli::cmd_train(
        &cfg,
        Path::new(real_dir),
        Path::new(anime_dir),
        pairs_dir.map(Path::new),
        Path::new(out_dir),
        resume.map(Path::new),
    )
    .map_err(to_py)
}

/// Batch inference over a directory; returns the translated count.
#[pyfunction]
#[pyo3(signature = (ckpt, in_dir, out_dir, resolution = None))]
fn infer(
    ckpt: &str,
    in_dir: &str,
    out_dir: &str,
    resolution: Option<usize>,
) -> PyResult<usize> {
    scenepipe_core::eval::infer_batch(
        Path::new(ckpt),
        Path::new(in_dir),
        Path::new(out_dir),
        resolution,
    )
    .map_err(to_py)
}

/// Fréchet distance between two image directories.
#[pyfunction]
#[pyo3(signature = (set_a, set_b, config_toml = None, extractor = None))]
fn eval_fid_dirs(
    set_a: &str,
    set_b: &str,
    config_toml: Option<&str>,
    extractor: Option<&str>,
) -> PyResult<f64> {
    let cfg = parse_config(config_toml)?;
    scenepipe_core::cli::cmd_eval_fid(&cfg, Path::new(set_a), Path::new(set_b), extractor)
        .map_err(to_py)
}

/// Mean segmentation consistency between output and reference directories.
#[pyfunction]
#[pyo3(signature = (outputs, references, config_toml = None))]
fn eval_bce_dirs(
    outputs: &str,
    references: &str,
    config_toml: Option<&str>,
) -> PyResult<f64> {
    let cfg = parse_config(config_toml)?;
    scenepipe_core::cli::cmd_eval_bce(&cfg, Path::new(outputs), Path::new(references))
        .map_err(to_py)
}

#[pymodule]
fn scenepipe_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(default_config_toml, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_sup, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(style_patch_nce, m)?)?;
    m.add_function(wrap_pyfunction!(src_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hdce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(save_image, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_score_files, m)?)?;
    m.add_function(wrap_pyfunction!(sample_pair_to, m)?)?;
    m.add_function(wrap_pyfunction!(finetune_gen, m)?)?;
    m.add_function(wrap_pyfunction!(gen_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(filter_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(eval_fid_dirs, m)?)?;
    m.add_function(wrap_pyfunction!(eval_bce_dirs, m)?)?;
    Ok(())
}
