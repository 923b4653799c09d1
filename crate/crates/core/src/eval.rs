//! Quantitative evaluation (Fréchet distance over deep features, the
//! segmentation consistency metric) and batch inference over directories
//! of images or video frames.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::i2i::Trainer;
use crate::image::{load_image_native, ImageTensor};
use crate::priors::Segmenter;
use crate::rng::seeded_rng;
use crate::types::PseudoPair;

/// Deep-feature extractor adapter for the Fréchet metric. The real
/// inception-style backend needs downloaded weights; the mock is a fixed
/// random linear map over a downsampled image, enough to exercise the
/// statistics pipeline offline.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, img: &ImageTensor) -> Result<Vec<f64>>;
}

/// Downsamples to 8x8, flattens, and applies a fixed seeded projection.
pub struct MockFeatureExtractor {
    dim: usize,
    proj: Vec<f64>,
}

pub const MOCK_EXTRACTOR_DIM: usize = 16;
const MOCK_POOL: usize = 8;

impl MockFeatureExtractor {
    pub fn new(dim: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        let n_in = 3 * MOCK_POOL * MOCK_POOL;
        let proj = (0..n_in * dim)
            .map(|_| rng.random_range(-1.0..1.0) / (n_in as f64).sqrt())
            .collect();
        MockFeatureExtractor { dim, proj }
    }
}

impl FeatureExtractor for MockFeatureExtractor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let small = img.resize(MOCK_POOL, MOCK_POOL)?;
        let x = small.data();
        let n_in = x.len();
        let mut out = vec![0.0; self.dim];
        for (i, &v) in x.iter().enumerate() {
            if v != 0.0 {
                for j in 0..self.dim {
                    out[j] += v * self.proj[i * self.dim + j];
                }
            }
        }
        debug_assert_eq!(n_in, 3 * MOCK_POOL * MOCK_POOL);
        Ok(out)
    }
}

pub fn extractor_registry(name: &str) -> Result<Box<dyn FeatureExtractor>> {
    match name {
        "mock" => Ok(Box::new(MockFeatureExtractor::new(MOCK_EXTRACTOR_DIM, 0xf1d))),
        other => Err(Error::PriorLoad(format!(
            "feature extractor {other:?} has no bundled weights; available: mock"
        ))),
    }
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are
/// samples): `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2})`. Covariances
/// use the unbiased estimator; matrix square roots go through symmetric
/// eigendecomposition with negative eigenvalues clipped at zero.
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_fit(features_a)?;
    let (mu_b, cov_b) = gaussian_fit(features_b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Shape(format!(
            "feature dims differ: {} vs {}",
            mu_a.len(),
            mu_b.len()
        )));
    }
    let diff = &mu_a - &mu_b;
    let mean_term = diff.dot(&diff);
    // tr((Sa Sb)^{1/2}) via the symmetric form tr((A Sb A)^{1/2}), A = Sa^{1/2}
    let a_half = sqrtm_psd(&cov_a);
    let inner = &a_half * &cov_b * &a_half;
    let inner_half = sqrtm_psd(&inner.symmetric_part());
    let tr = cov_a.trace() + cov_b.trace() - 2.0 * inner_half.trace();
    Ok(mean_term + tr)
}

fn gaussian_fit(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 feature rows per set".into(),
        ));
    }
    let d = rows[0].len();
    for r in rows {
        if r.len() != d {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
    }
    let n = rows.len();
    let mut mu = DVector::zeros(d);
    for r in rows {
        for j in 0..d {
            mu[j] += r[j];
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            let di = r[i] - mu[i];
            for j in i..d {
                cov[(i, j)] += di * (r[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n as f64 - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mu, cov))
}

/// Symmetric PSD square root, clipping negative eigenvalues at zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = m.nrows();
    let mut out = DMatrix::zeros(d, d);
    for k in 0..d {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        if lam == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] += lam * v[i] * v[j];
            }
        }
    }
    out
}

/// Extracts features for every image in a directory (sorted by name).
pub fn extract_dir_features(
    dir: &Path,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<Vec<f64>>> {
    let folder = crate::dataset::ImageFolder::open(dir, 0)?;
    let mut out = Vec::with_capacity(folder.len());
    for path in &folder.paths {
        let img = load_image_native(path)?;
        out.push(extractor.extract(&img)?);
    }
    Ok(out)
}

/// Mean consistency score over aligned output/reference image sets: the
/// reference provides the label map, the output the predicted
/// distribution. Full-scale reference numbers depend on the pretrained
/// segmenter and datasets and are not reproducible with mocks.
pub fn bce_metric(
    outputs: &[ImageTensor],
    references: &[ImageTensor],
    seg: &dyn Segmenter,
) -> Result<f64> {
    if outputs.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "set sizes differ: {} outputs vs {} references",
            outputs.len(),
            references.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation sets".into()));
    }
    let mut total = 0.0;
    for (out, reference) in outputs.iter().zip(references) {
        let pair = PseudoPair::new(reference.clone(), out.clone(), 0)?;
        total += crate::select::consistency_score(&pair, seg)?;
    }
    Ok(total / outputs.len() as f64)
}

/// Translates every decodable image in `in_dir` into `out_dir`, preserving
/// file names (frames translate independently, so sequences stay
/// coherent frame-by-frame). Images are optionally resized, padded up to a
/// multiple of 4 for the generator, and cropped back. Undecodable files
/// are skipped with a note on stderr. Returns the number translated.
pub fn infer_batch(
    checkpoint: &Path,
    in_dir: &Path,
    out_dir: &Path,
    resolution: Option<usize>,
) -> Result<usize> {
    let trainer = Trainer::load_checkpoint(checkpoint, &crate::config::TrainConfig::default())?;
    infer_batch_with(&trainer, in_dir, out_dir, resolution)
}

pub fn infer_batch_with(
    trainer: &Trainer,
    in_dir: &Path,
    out_dir: &Path,
    resolution: Option<usize>,
) -> Result<usize> {
    std::fs::create_dir_all(out_dir)?;
    let folder = crate::dataset::ImageFolder::open(in_dir, 0)?;
    let mut count = 0usize;
    let mut failures = 0usize;
    for path in &folder.paths {
        let img = match load_image_native(path) {
            Ok(i) => i,
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                failures += 1;
                continue;
            }
        };
        let img = match resolution {
            Some(r) => img.resize(r, r)?,
            None => img,
        };
        let (h, w) = (img.height(), img.width());
        let padded = img.pad_to_multiple(4)?;
        let translated = trainer.gen.translate(&padded)?;
        let translated = translated.crop(h, w)?;
        let name = path.file_name().unwrap_or_default();
        translated.save_png(&out_dir.join(name))?;
        count += 1;
    }
    if count == 0 && failures > 0 {
        return Err(Error::Persistence(format!(
            "all {failures} inputs failed to decode"
        )));
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::priors::mock::MockSegmenter;
    use crate::rng::seeded_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn rand_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = rand_rows(16, 4, 1);
        let d = fid(&a, &a).unwrap();
        assert!(d.abs() <= 1e-6, "{d}");
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let a = rand_rows(20, 4, 2);
        let b = rand_rows(24, 4, 3);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab >= -1e-9);
    }

    #[test]
    fn equal_covariance_gaussians_mean_gap() {
        // two Gaussian samples with identical covariance and mean gap delta:
        // the distance approaches |delta|^2
        let n = 10000;
        let d = 4;
        let delta = [0.8, -0.5, 0.3, 1.1];
        let want: f64 = delta.iter().map(|v| v * v).sum();
        let mut rng = seeded_rng(7);
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let mut ra = Vec::with_capacity(d);
            let mut rb = Vec::with_capacity(d);
            for j in 0..d {
                let za: f64 = rng.sample(StandardNormal);
                let zb: f64 = rng.sample(StandardNormal);
                ra.push(za);
                rb.push(zb + delta[j]);
            }
            a.push(ra);
            b.push(rb);
        }
        let got = fid(&a, &b).unwrap();
        assert!(
            (got - want).abs() / want < 0.05,
            "fid {got} vs |delta|^2 {want}"
        );
    }

    /// Independent oracle: Denman-Beavers iteration for the matrix square
    /// root of the (generally nonsymmetric) covariance product, with plain
    /// Gauss-Jordan inverses. No eigendecompositions involved.
    fn fid_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let d = a[0].len();
        let fit = |rows: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
            let n = rows.len();
            let mut mu = vec![0.0; d];
            for r in rows {
                for j in 0..d {
                    mu[j] += r[j] / n as f64;
                }
            }
            let mut cov = vec![0.0; d * d];
            for r in rows {
                for i in 0..d {
                    for j in 0..d {
                        cov[i * d + j] += (r[i] - mu[i]) * (r[j] - mu[j]) / (n as f64 - 1.0);
                    }
                }
            }
            (mu, cov)
        };
        let matmul = |x: &[f64], y: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; d * d];
            for i in 0..d {
                for k in 0..d {
                    let v = x[i * d + k];
                    for j in 0..d {
                        out[i * d + j] += v * y[k * d + j];
                    }
                }
            }
            out
        };
        let inverse = |m: &[f64]| -> Vec<f64> {
            let mut aug = vec![0.0; d * 2 * d];
            for i in 0..d {
                for j in 0..d {
                    aug[i * 2 * d + j] = m[i * d + j];
                }
                aug[i * 2 * d + d + i] = 1.0;
            }
            for col in 0..d {
                let mut piv = col;
                for r in col + 1..d {
                    if aug[r * 2 * d + col].abs() > aug[piv * 2 * d + col].abs() {
                        piv = r;
                    }
                }
                for j in 0..2 * d {
                    aug.swap(col * 2 * d + j, piv * 2 * d + j);
                }
                let p = aug[col * 2 * d + col];
                for j in 0..2 * d {
                    aug[col * 2 * d + j] /= p;
                }
                for r in 0..d {
                    if r != col {
                        let f = aug[r * 2 * d + col];
                        for j in 0..2 * d {
                            aug[r * 2 * d + j] -= f * aug[col * 2 * d + j];
                        }
                    }
                }
            }
            let mut inv = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    inv[i * d + j] = aug[i * 2 * d + d + j];
                }
            }
            inv
        };
        let (mu_a, cov_a) = fit(a);
        let (mu_b, cov_b) = fit(b);
        let prod = matmul(&cov_a, &cov_b);
        // Denman-Beavers: Y -> sqrt(prod), Z -> inv(sqrt(prod))
        let mut y = prod.clone();
        let mut z = vec![0.0; d * d];
        for i in 0..d {
            z[i * d + i] = 1.0;
        }
        for _ in 0..60 {
            let zi = inverse(&z);
            let yi = inverse(&y);
            let ny: Vec<f64> = y.iter().zip(&zi).map(|(a, b)| 0.5 * (a + b)).collect();
            let nz: Vec<f64> = z.iter().zip(&yi).map(|(a, b)| 0.5 * (a + b)).collect();
            y = ny;
            z = nz;
        }
        let tr_sqrt: f64 = (0..d).map(|i| y[i * d + i]).sum();
        let mean: f64 = mu_a
            .iter()
            .zip(&mu_b)
            .map(|(x, v)| (x - v) * (x - v))
            .sum();
        let tr_a: f64 = (0..d).map(|i| cov_a[i * d + i]).sum();
        let tr_b: f64 = (0..d).map(|i| cov_b[i * d + i]).sum();
        mean + tr_a + tr_b - 2.0 * tr_sqrt
    }

    #[test]
    fn matches_independent_linear_algebra_oracle() {
        for seed in 0..10u64 {
            let a = rand_rows(16, 4, 100 + seed);
            let b = rand_rows(16, 4, 200 + seed);
            let got = fid(&a, &b).unwrap();
            let want = fid_oracle(&a, &b);
            assert!((got - want).abs() <= 1e-5, "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn fid_input_validation() {
        let a = rand_rows(4, 3, 5);
        let b = rand_rows(4, 2, 6);
        match fid(&a, &b) {
            Err(Error::Shape(_)) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
        let single = rand_rows(1, 3, 7);
        assert!(fid(&single, &a).is_err());
        let mut bad = rand_rows(4, 3, 8);
        bad[1][2] = f64::NAN;
        match fid(&bad, &a) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn bce_metric_matches_mean_of_scores() {
        let seg = MockSegmenter::new(3);
        let outs: Vec<ImageTensor> = (0..3)
            .map(|i| {
                ImageTensor::from_fn(8, 8, |c, y, x| {
                    (((c + i) as f64 * 0.4 + (y * x) as f64 * 0.01).sin()) * 0.9
                })
                .unwrap()
            })
            .collect();
        let refs: Vec<ImageTensor> = (0..3)
            .map(|i| {
                ImageTensor::from_fn(8, 8, |c, y, x| {
                    (((c * 2 + i) as f64 * 0.3 - (y + x) as f64 * 0.05).cos()) * 0.9
                })
                .unwrap()
            })
            .collect();
        let m = bce_metric(&outs, &refs, &seg).unwrap();
        let mut acc = 0.0;
        for i in 0..3 {
            let pair = PseudoPair::new(refs[i].clone(), outs[i].clone(), 0).unwrap();
            acc += crate::select::consistency_score(&pair, &seg).unwrap();
        }
        assert!((m - acc / 3.0).abs() < 1e-12);
        // single pair equals its score
        let single = bce_metric(&outs[..1], &refs[..1], &seg).unwrap();
        let pair = PseudoPair::new(refs[0].clone(), outs[0].clone(), 0).unwrap();
        assert_eq!(
            single,
            crate::select::consistency_score(&pair, &seg).unwrap()
        );
        // size mismatch
        assert!(bce_metric(&outs[..2], &refs, &seg).is_err());
        // identical sets with (near) one-hot segmentation score near zero
        let same = bce_metric(&refs, &refs, &seg).unwrap();
        assert!(same >= 0.0);
    }

    #[test]
    fn infer_batch_translates_directory() {
        let mut rng = seeded_rng(300);
        let cfg = TrainConfig {
            gen_base_channels: 4,
            disc_base_channels: 4,
            embed_dim: 8,
            patches_per_layer: 4,
            resolution: 32,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(&cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let in_dir = dir.path().join("in");
        let out_dir = dir.path().join("out");
        std::fs::create_dir_all(&in_dir).unwrap();
        // empty dir -> 0
        assert_eq!(
            infer_batch_with(&trainer, &in_dir, &out_dir, None).unwrap(),
            0
        );
        // 3 frames, one duplicated content, odd size exercising padding
        for (name, seed) in [("f1.png", 1usize), ("f2.png", 2), ("f3.png", 1)] {
            ImageTensor::from_fn(30, 34, |c, y, x| {
                (((c + seed) as f64 * 0.37 + y as f64 * 0.11 + x as f64 * 0.05).sin()) * 0.8
            })
            .unwrap()
            .save_png(&in_dir.join(name))
            .unwrap();
        }
        let n = infer_batch_with(&trainer, &in_dir, &out_dir, None).unwrap();
        assert_eq!(n, 3);
        let f1 = std::fs::read(out_dir.join("f1.png")).unwrap();
        let f3 = std::fs::read(out_dir.join("f3.png")).unwrap();
        // identical frames map to identical outputs (stateless over frames)
        assert_eq!(f1, f3);
        let back = load_image_native(&out_dir.join("f1.png")).unwrap();
        assert_eq!(back.shape(), [3, 30, 34]);

        // an undecodable file is skipped, the rest still translate
        std::fs::write(in_dir.join("broken.png"), b"not a png").unwrap();
        let out2 = dir.path().join("out2");
        assert_eq!(
            infer_batch_with(&trainer, &in_dir, &out2, None).unwrap(),
            3
        );
        // when every input fails, the batch errors out
        let badonly = dir.path().join("badonly");
        std::fs::create_dir_all(&badonly).unwrap();
        std::fs::write(badonly.join("x.png"), b"junk").unwrap();
        let out3 = dir.path().join("out3");
        match infer_batch_with(&trainer, &badonly, &out3, None) {
            Err(Error::Persistence(_)) => {}
            other => panic!("expected persistence error, got {other:?}"),
        }
    }
}
