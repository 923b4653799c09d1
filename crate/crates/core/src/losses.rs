//! Differentiable losses: contrastive patch objectives, global semantic
//! guidance, and adversarial terms. All are pure functions built from tape
//! primitives, so analytic gradients come from the tape and can be checked
//! against finite differences.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::nn::normalize_rows;
use crate::priors::{ImageEmbedder, PerceptualMetric};
use crate::rng::PipelineRng;
use crate::tape::{Tape, Var};

/// Large negative logit used to knock the self-similarity entry out of
/// masked softmaxes; exp underflows to exactly zero.
const NEG_MASK: f64 = -1e9;

/// Per-layer embedded patch features with their spatial indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureLayer {
    pub layer_id: usize,
    pub dim: usize,
    /// Row-major `[n, dim]`.
    pub features: Vec<f64>,
    pub locations: Vec<(usize, usize)>,
}

impl PatchFeatureLayer {
    pub fn n(&self) -> usize {
        self.locations.len()
    }
}

/// Multi-layer patch feature set. Two sets are *aligned* iff their layer
/// ids and locations match exactly; positives pair by index.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureSet {
    pub layers: Vec<PatchFeatureLayer>,
}

impl PatchFeatureSet {
    pub fn new(layers: Vec<PatchFeatureLayer>) -> Result<Self> {
        for layer in &layers {
            if layer.features.len() != layer.n() * layer.dim {
                return Err(Error::Shape(format!(
                    "layer {} features/locations mismatch",
                    layer.layer_id
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for loc in &layer.locations {
                if !seen.insert(*loc) {
                    return Err(Error::InvalidArgument(format!(
                        "layer {} has duplicate location {:?}",
                        layer.layer_id, loc
                    )));
                }
            }
        }
        Ok(PatchFeatureSet { layers })
    }
}

/// Tape-resident counterpart of [`PatchFeatureSet`].
pub struct PatchFeatureVars {
    pub layers: Vec<PatchFeatureVarLayer>,
}

pub struct PatchFeatureVarLayer {
    pub layer_id: usize,
    /// `[n, dim]` variable.
    pub features: Var,
    pub locations: Vec<(usize, usize)>,
}

/// Lifts a concrete feature set onto a tape.
pub fn lift_feature_set(
    tape: &mut Tape,
    set: &PatchFeatureSet,
    requires_grad: bool,
) -> PatchFeatureVars {
    let layers = set
        .layers
        .iter()
        .map(|l| {
            let shape = [l.n(), l.dim];
            let features = if requires_grad {
                tape.var(&shape, l.features.clone())
            } else {
                tape.constant(&shape, l.features.clone())
            };
            PatchFeatureVarLayer {
                layer_id: l.layer_id,
                features,
                locations: l.locations.clone(),
            }
        })
        .collect();
    PatchFeatureVars { layers }
}

/// Reads a tape-resident feature set back into concrete form.
pub fn read_feature_set(tape: &Tape, vars: &PatchFeatureVars) -> Result<PatchFeatureSet> {
    let layers = vars
        .layers
        .iter()
        .map(|l| {
            let sh = tape.shape(l.features);
            PatchFeatureLayer {
                layer_id: l.layer_id,
                dim: sh[1],
                features: tape.value(l.features).to_vec(),
                locations: l.locations.clone(),
            }
        })
        .collect();
    PatchFeatureSet::new(layers)
}

fn check_aligned(a: &PatchFeatureVars, b: &PatchFeatureVars) -> Result<()> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::Alignment(format!(
            "layer count mismatch: {} vs {}",
            a.layers.len(),
            b.layers.len()
        )));
    }
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        if la.layer_id != lb.layer_id {
            return Err(Error::Alignment(format!(
                "layer id mismatch: {} vs {}",
                la.layer_id, lb.layer_id
            )));
        }
        if la.locations != lb.locations {
            return Err(Error::Alignment(format!(
                "locations differ at layer {}",
                la.layer_id
            )));
        }
    }
    Ok(())
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite values in {what}")));
    }
    Ok(())
}

/// InfoNCE for a single query:
/// `-log( exp(q.p/t) / (exp(q.p/t) + sum_i exp(q.n_i/t)) )`.
pub fn info_nce(
    tape: &mut Tape,
    query: Var,
    positive: Var,
    negatives: Var,
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let d = {
        let sq = tape.shape(query);
        if sq.len() != 1 {
            return Err(Error::Shape("query must be a vector".into()));
        }
        sq[0]
    };
    if tape.shape(positive) != [d] {
        return Err(Error::Shape(format!(
            "positive dim {:?} does not match query dim {d}",
            tape.shape(positive)
        )));
    }
    let nsh = tape.shape(negatives).to_vec();
    if nsh.len() != 2 || nsh[1] != d {
        return Err(Error::Shape(format!(
            "negatives must be [n, {d}], got {nsh:?}"
        )));
    }
    if nsh[0] == 0 {
        return Err(Error::InvalidArgument(
            "at least one negative is required".into(),
        ));
    }
    // Work in gap space, loss = lse(0, (q.n_i - q.p) / t): no trailing
    // subtraction, so the result stays strictly positive down to exp
    // underflow even when the positive logit dominates.
    let q_row = tape.reshape(query, &[1, d]);
    let p_row = tape.reshape(positive, &[1, d]);
    let qp = tape.matmul_tb(q_row, p_row); // [1,1]
    let qn = tape.matmul_tb(q_row, negatives); // [1,n]
    let neg_qp = tape.neg(qp);
    let neg_qp = tape.reshape(neg_qp, &[1]);
    let gaps = tape.add_axis0(qn, neg_qp); // [1,n] minus the positive logit
    let gaps = tape.scale(gaps, 1.0 / temperature);
    let gaps_vec = tape.reshape(gaps, &[nsh[0]]);
    let zero = tape.constant(&[1], vec![0.0]);
    let row = tape.concat_axis0(&[zero, gaps_vec]);
    let row = tape.reshape(row, &[1, nsh[0] + 1]);
    let lse = tape.logsumexp_rows(row); // [1]
    Ok(lse)
}

/// Image-level semantic guidance: embedder cosine distance plus a weighted
/// perceptual term.
pub fn global_semantic_loss(
    tape: &mut Tape,
    embedder: &dyn ImageEmbedder,
    perceptual: &dyn PerceptualMetric,
    x_p: Var,
    y_p: Var,
    lambda_lpips: f64,
) -> Result<Var> {
    if tape.shape(x_p) != tape.shape(y_p) {
        return Err(Error::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            tape.shape(x_p),
            tape.shape(y_p)
        )));
    }
    let ex = embedder.embed_global_t(tape, x_p);
    let ey = embedder.embed_global_t(tape, y_p);
    let d = embedder.dim();
    let exm = tape.reshape(ex, &[1, d]);
    let eym = tape.reshape(ey, &[1, d]);
    let exn = normalize_rows(tape, exm, 1e-12);
    let eyn = normalize_rows(tape, eym, 1e-12);
    let prod = tape.mul(exn, eyn);
    let cos = tape.sum_all(prod);
    let neg = tape.neg(cos);
    let cos_dist = tape.add_scalar(neg, 1.0);
    let lp = perceptual.distance_t(tape, x_p, y_p)?;
    let lp_w = tape.scale(lp, lambda_lpips);
    Ok(tape.add(cos_dist, lp_w))
}

/// Samples `k` shared patch locations and returns them along with the
/// fine-tuning contrastive loss between the two images: queries from `y_p`
/// patches, positives the `x_p` patch at the same location, negatives the
/// other `x_p` patches. Raw dot products, temperature 1, mean over queries.
pub fn finetune_patch_loss(
    tape: &mut Tape,
    embedder: &dyn ImageEmbedder,
    x_p: Var,
    y_p: Var,
    k: usize,
    patch_size: usize,
    rng: &mut PipelineRng,
) -> Result<Var> {
    if k < 2 {
        return Err(Error::InvalidArgument(
            "k must be >= 2 so each query has a negative".into(),
        ));
    }
    let sh = tape.shape(y_p).to_vec();
    let (h, w) = (sh[1], sh[2]);
    if patch_size > h || patch_size > w {
        return Err(Error::Bounds(format!(
            "patch size {patch_size} exceeds image {h}x{w}"
        )));
    }
    let locations = sample_patch_locations(h, w, patch_size, k, rng)?;
    let ex = embedder.embed_patches_t(tape, x_p, &locations, patch_size)?; // [k, d]
    let ey = embedder.embed_patches_t(tape, y_p, &locations, patch_size)?;
    // logits[i][j] = ey_i . ex_j ; positive on the diagonal
    let logits = tape.matmul_tb(ey, ex);
    let per_query = nce_rows(tape, logits);
    Ok(tape.mean_all(per_query))
}

/// Per-query InfoNCE over a square logit matrix with positives on the
/// diagonal: subtracts each row's diagonal entry (leaving an exact zero at
/// the positive position) and takes a row logsumexp. Returns `[n]`.
fn nce_rows(tape: &mut Tape, logits: Var) -> Var {
    let pos = tape.diag(logits);
    let neg_pos = tape.neg(pos);
    let gaps = tape.add_axis0(logits, neg_pos);
    tape.logsumexp_rows(gaps)
}

/// Draws `k` distinct top-left corners where a `patch_size` square fits.
pub fn sample_patch_locations(
    h: usize,
    w: usize,
    patch_size: usize,
    k: usize,
    rng: &mut PipelineRng,
) -> Result<Vec<(usize, usize)>> {
    if patch_size > h || patch_size > w {
        return Err(Error::Bounds(format!(
            "patch size {patch_size} exceeds image {h}x{w}"
        )));
    }
    let rows = h - patch_size + 1;
    let cols = w - patch_size + 1;
    let total = rows * cols;
    if k > total {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {k} distinct locations from {total} positions"
        )));
    }
    Ok(sample(rng, total, k)
        .into_iter()
        .map(|i| (i / cols, i % cols))
        .collect())
}

/// Returns the masked similarity matrix `[n, n]` of normalized rows of
/// `q` against normalized rows of `k`, scaled by `1/t`, with the diagonal
/// knocked out when `mask_diag`.
fn similarity_logits(tape: &mut Tape, q: Var, k: Var, temperature: f64, mask_diag: bool) -> Var {
    let qn = normalize_rows(tape, q, 1e-12);
    let kn = normalize_rows(tape, k, 1e-12);
    let sim = tape.matmul_tb(qn, kn);
    let logits = tape.scale(sim, 1.0 / temperature);
    if mask_diag {
        let n = tape.shape(logits)[0];
        let mut mask = vec![0.0; n * n];
        for i in 0..n {
            mask[i * n + i] = NEG_MASK;
        }
        let m = tape.constant(&[n, n], mask);
        tape.add(logits, m)
    } else {
        logits
    }
}

/// Multi-layer patch contrastive loss between a translated image's features
/// (queries) and the pseudo ground truth's features (keys). Positive at the
/// matching index, negatives at all other indices in the same layer; all
/// features L2-normalized. Summed over queries and layers.
pub fn style_patch_nce(
    tape: &mut Tape,
    gen_feats: &PatchFeatureVars,
    target_feats: &PatchFeatureVars,
    temperature: f64,
) -> Result<Var> {
    check_aligned(gen_feats, target_feats)?;
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let mut total = tape.scalar(0.0);
    for (lg, lt) in gen_feats.layers.iter().zip(&target_feats.layers) {
        let logits = similarity_logits(tape, lg.features, lt.features, temperature, false);
        let per_query = nce_rows(tape, logits);
        let layer_sum = tape.sum_all(per_query);
        total = tape.add(total, layer_sum);
    }
    Ok(total)
}

/// Semantic-relation consistency: for every patch, the softmax distribution
/// of its similarities to the *other* patches of the same image is computed
/// for both feature sets, and the mean Jensen-Shannon divergence between
/// corresponding distributions is returned. Bounded by ln 2.
pub fn src_loss(
    tape: &mut Tape,
    src_feats: &PatchFeatureVars,
    gen_feats: &PatchFeatureVars,
    temperature: f64,
) -> Result<Var> {
    check_aligned(src_feats, gen_feats)?;
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let mut total = tape.scalar(0.0);
    let mut count = 0usize;
    for (ls, lg) in src_feats.layers.iter().zip(&gen_feats.layers) {
        let n = ls.locations.len();
        if n < 2 {
            return Err(Error::InvalidArgument(
                "src loss needs at least 2 patches per layer".into(),
            ));
        }
        let sl = similarity_logits(tape, ls.features, ls.features, temperature, true);
        let gl = similarity_logits(tape, lg.features, lg.features, temperature, true);
        let p = tape.softmax_rows(sl);
        let q = tape.softmax_rows(gl);
        let sum_pq = tape.add(p, q);
        let m = tape.scale(sum_pq, 0.5);
        // Shift diagonal entries (exact zeros) to 1 inside the logs; their
        // weight is zero so the term contributes exactly nothing.
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let eye = tape.constant(&[n, n], eye);
        let p_adj = tape.add(p, eye);
        let q_adj = tape.add(q, eye);
        let m_adj = tape.add(m, eye);
        let ln_p = tape.ln(p_adj);
        let ln_q = tape.ln(q_adj);
        let ln_m = tape.ln(m_adj);
        let dp = tape.sub(ln_p, ln_m);
        let dq = tape.sub(ln_q, ln_m);
        let kl_p = tape.mul(p, dp);
        let kl_q = tape.mul(q, dq);
        let kl_p = tape.sum_all(kl_p);
        let kl_q = tape.sum_all(kl_q);
        let jsd_sum = tape.add(kl_p, kl_q); // 2 * sum over queries of JSD
        let half = tape.scale(jsd_sum, 0.5);
        total = tape.add(total, half);
        count += n;
    }
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Hard-negative weighted contrastive loss: like [`style_patch_nce`] with
/// queries from `gen_feats` and keys from `src_feats`, but each negative in
/// the denominator is importance-weighted proportionally to
/// `exp(hardness * q.n_j)`, normalized so the weights sum to the negative
/// count. `hardness = 0` reduces exactly to the unweighted loss.
pub fn hdce_loss(
    tape: &mut Tape,
    src_feats: &PatchFeatureVars,
    gen_feats: &PatchFeatureVars,
    temperature: f64,
    hardness: f64,
) -> Result<Var> {
    check_aligned(src_feats, gen_feats)?;
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let mut total = tape.scalar(0.0);
    for (ls, lg) in src_feats.layers.iter().zip(&gen_feats.layers) {
        let n = ls.locations.len();
        if n < 2 {
            return Err(Error::InvalidArgument(
                "hdce loss needs at least 2 patches per layer".into(),
            ));
        }
        let qn = normalize_rows(tape, lg.features, 1e-12);
        let kn = normalize_rows(tape, ls.features, 1e-12);
        let dots = tape.matmul_tb(qn, kn); // [n, n], query i vs key j
        // hardness weights over the negatives of each query
        let mut diag_mask = vec![0.0; n * n];
        for i in 0..n {
            diag_mask[i * n + i] = NEG_MASK;
        }
        let mask = tape.constant(&[n, n], diag_mask);
        let hlogits = tape.scale(dots, hardness);
        let hlogits = tape.add(hlogits, mask);
        let wsoft = tape.softmax_rows(hlogits); // zero diagonal, rows sum to 1
        let weights = tape.scale(wsoft, (n - 1) as f64);
        // gap space: loss_i = ln(1 + sum_j w_ij exp((s_ij - s_ii)/t))
        let pos = tape.diag(dots);
        let neg_pos = tape.neg(pos);
        let gap = tape.add_axis0(dots, neg_pos);
        let gap = tape.scale(gap, 1.0 / temperature);
        let exp_gap = tape.exp(gap);
        let weighted = tape.mul(weights, exp_gap); // diagonal zeroed by weights
        let neg_sum = tape.sum_axis1(weighted); // [n]
        let per_query = tape.ln_1p(neg_sum);
        let layer_sum = tape.sum_all(per_query);
        total = tape.add(total, layer_sum);
    }
    Ok(total)
}

/// Which side of the adversarial game a loss is computed for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanMode {
    Generator,
    Discriminator,
}

/// Adversarial objective family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanKind {
    LeastSquares,
    NonSaturating,
}

/// Scalar adversarial loss over raw score tensors.
///
/// Least squares: `D = 0.5 E[(s_r - 1)^2] + 0.5 E[s_f^2]`,
/// `G = 0.5 E[(s_f - 1)^2]`. Non-saturating logistic:
/// `D = E[softplus(-s_r)] + E[softplus(s_f)]`, `G = E[softplus(-s_f)]`.
pub fn adversarial_loss(
    tape: &mut Tape,
    real_scores: Option<Var>,
    fake_scores: Var,
    mode: GanMode,
    kind: GanKind,
) -> Result<Var> {
    check_finite(tape, fake_scores, "fake scores")?;
    if let Some(r) = real_scores {
        check_finite(tape, r, "real scores")?;
    }
    match (mode, kind) {
        (GanMode::Discriminator, GanKind::LeastSquares) => {
            let r = real_scores.ok_or_else(|| {
                Error::InvalidArgument("discriminator loss requires real scores".into())
            })?;
            let rm1 = tape.add_scalar(r, -1.0);
            let rsq = tape.sqr(rm1);
            let rterm = tape.mean_all(rsq);
            let fsq = tape.sqr(fake_scores);
            let fterm = tape.mean_all(fsq);
            let s = tape.add(rterm, fterm);
            Ok(tape.scale(s, 0.5))
        }
        (GanMode::Generator, GanKind::LeastSquares) => {
            let fm1 = tape.add_scalar(fake_scores, -1.0);
            let fsq = tape.sqr(fm1);
            let m = tape.mean_all(fsq);
            Ok(tape.scale(m, 0.5))
        }
        (GanMode::Discriminator, GanKind::NonSaturating) => {
            let r = real_scores.ok_or_else(|| {
                Error::InvalidArgument("discriminator loss requires real scores".into())
            })?;
            let nr = tape.neg(r);
            let sr = tape.softplus(nr);
            let rterm = tape.mean_all(sr);
            let sf = tape.softplus(fake_scores);
            let fterm = tape.mean_all(sf);
            Ok(tape.add(rterm, fterm))
        }
        (GanMode::Generator, GanKind::NonSaturating) => {
            let nf = tape.neg(fake_scores);
            let sf = tape.softplus(nf);
            Ok(tape.mean_all(sf))
        }
    }
}

/// Role of the scored pair in the conditional adversarial game.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondSide {
    /// Discriminator on a real `(y_p, x_p)` pair.
    DiscriminatorReal,
    /// Discriminator on a fake `(G(x_p), x_p)` pair.
    DiscriminatorFake,
    /// Generator trying to make the fake pair score real.
    Generator,
}

/// Conditional adversarial loss: the discriminator consumes the channel
/// concatenation `(y_or_fake, x_p)` (6 channels) and is trained least
/// squares. `score` maps the concatenated input to a patch score map.
pub fn conditional_adversarial_loss(
    tape: &mut Tape,
    score: impl FnOnce(&mut Tape, Var) -> Var,
    x_p: Var,
    y_or_fake: Var,
    side: CondSide,
) -> Result<Var> {
    if tape.shape(x_p) != tape.shape(y_or_fake) {
        return Err(Error::Shape(format!(
            "conditioning and target shapes differ: {:?} vs {:?}",
            tape.shape(x_p),
            tape.shape(y_or_fake)
        )));
    }
    let joint = tape.concat_axis0(&[y_or_fake, x_p]);
    debug_assert_eq!(tape.shape(joint)[0], 6);
    let s = score(tape, joint);
    check_finite(tape, s, "conditional discriminator scores")?;
    match side {
        CondSide::DiscriminatorReal | CondSide::Generator => {
            let sm1 = tape.add_scalar(s, -1.0);
            let sq = tape.sqr(sm1);
            let m = tape.mean_all(sq);
            Ok(tape.scale(m, 0.5))
        }
        CondSide::DiscriminatorFake => {
            let sq = tape.sqr(s);
            let m = tape.mean_all(sq);
            Ok(tape.scale(m, 0.5))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    // ---- independent oracles ----

    pub fn info_nce_oracle(q: &[f64], p: &[f64], negs: &[Vec<f64>], t: f64) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let lp = dot(q, p) / t;
        let mut denom = lp.exp();
        for n in negs {
            denom += (dot(q, n) / t).exp();
        }
        -(lp.exp() / denom).ln()
    }

    fn norm_rows(f: &[f64], n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let row = &f[i * d..(i + 1) * d];
                let nv = (row.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
                row.iter().map(|x| x / nv).collect()
            })
            .collect()
    }

    pub fn style_oracle(gen: &PatchFeatureSet, tgt: &PatchFeatureSet, t: f64) -> f64 {
        let mut total = 0.0;
        for (lg, lt) in gen.layers.iter().zip(&tgt.layers) {
            let n = lg.n();
            let q = norm_rows(&lg.features, n, lg.dim);
            let k = norm_rows(&lt.features, n, lt.dim);
            for i in 0..n {
                let pos = &k[i];
                let negs: Vec<Vec<f64>> =
                    (0..n).filter(|&j| j != i).map(|j| k[j].clone()).collect();
                total += info_nce_oracle(&q[i], pos, &negs, t);
            }
        }
        total
    }

    pub fn src_oracle(a: &PatchFeatureSet, b: &PatchFeatureSet, t: f64) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let n = la.n();
            let fa = norm_rows(&la.features, n, la.dim);
            let fb = norm_rows(&lb.features, n, lb.dim);
            let dist = |f: &[Vec<f64>], i: usize| -> Vec<f64> {
                let logits: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| f[i].iter().zip(&f[j]).map(|(x, y)| x * y).sum::<f64>() / t)
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.iter().map(|e| e / z).collect()
            };
            for i in 0..n {
                let p = dist(&fa, i);
                let q = dist(&fb, i);
                let mut jsd = 0.0;
                for j in 0..p.len() {
                    let m = 0.5 * (p[j] + q[j]);
                    if p[j] > 0.0 {
                        jsd += 0.5 * p[j] * (p[j] / m).ln();
                    }
                    if q[j] > 0.0 {
                        jsd += 0.5 * q[j] * (q[j] / m).ln();
                    }
                }
                total += jsd;
                count += 1;
            }
        }
        total / count as f64
    }

    pub fn hdce_oracle(src: &PatchFeatureSet, gen: &PatchFeatureSet, t: f64, beta: f64) -> f64 {
        let mut total = 0.0;
        for (ls, lg) in src.layers.iter().zip(&gen.layers) {
            let n = ls.n();
            let k = norm_rows(&ls.features, n, ls.dim);
            let q = norm_rows(&lg.features, n, lg.dim);
            for i in 0..n {
                let dots: Vec<f64> = (0..n)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(x, y)| x * y).sum::<f64>())
                    .collect();
                // hardness weights over negatives
                let negs: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                let wl: Vec<f64> = negs.iter().map(|&j| (beta * dots[j]).exp()).collect();
                let wz: f64 = wl.iter().sum();
                let pos = (dots[i] / t).exp();
                let mut denom = pos;
                for (wi, &j) in negs.iter().enumerate() {
                    let w = (n - 1) as f64 * wl[wi] / wz;
                    denom += w * (dots[j] / t).exp();
                }
                total += -(pos / denom).ln();
            }
        }
        total
    }

    fn rand_set(
        layers: &[(usize, usize, usize)],
        rng: &mut crate::rng::PipelineRng,
    ) -> PatchFeatureSet {
        let layers = layers
            .iter()
            .map(|&(id, n, d)| PatchFeatureLayer {
                layer_id: id,
                dim: d,
                features: (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                locations: (0..n).map(|i| (i, 2 * i + 1)).collect(),
            })
            .collect();
        PatchFeatureSet::new(layers).unwrap()
    }

    fn eval_style(gen: &PatchFeatureSet, tgt: &PatchFeatureSet, t: f64) -> f64 {
        let mut tape = Tape::new();
        let g = lift_feature_set(&mut tape, gen, false);
        let k = lift_feature_set(&mut tape, tgt, false);
        let l = style_patch_nce(&mut tape, &g, &k, t).unwrap();
        tape.scalar_value(l)
    }

    fn eval_src(a: &PatchFeatureSet, b: &PatchFeatureSet, t: f64) -> f64 {
        let mut tape = Tape::new();
        let av = lift_feature_set(&mut tape, a, false);
        let bv = lift_feature_set(&mut tape, b, false);
        let l = src_loss(&mut tape, &av, &bv, t).unwrap();
        tape.scalar_value(l)
    }

    fn eval_hdce(src: &PatchFeatureSet, gen: &PatchFeatureSet, t: f64, beta: f64) -> f64 {
        let mut tape = Tape::new();
        let sv = lift_feature_set(&mut tape, src, false);
        let gv = lift_feature_set(&mut tape, gen, false);
        let l = hdce_loss(&mut tape, &sv, &gv, t, beta).unwrap();
        tape.scalar_value(l)
    }

    // ---- info_nce ----

    #[test]
    fn info_nce_all_equal_logits() {
        // q.p == q.n_i for all i -> ln(N+1)
        for n in [1usize, 4, 64] {
            let mut tape = Tape::new();
            let q = tape.var(&[2], vec![1.0, 0.0]);
            let p = tape.var(&[2], vec![0.5, 0.25]);
            // negatives with same dot as positive (0.5)
            let negs = tape.var(&[n, 2], (0..n).flat_map(|_| [0.5, -0.7]).collect());
            let l = info_nce(&mut tape, q, p, negs, 1.3).unwrap();
            let got = tape.scalar_value(l);
            let want = ((n + 1) as f64).ln();
            assert!((got - want).abs() < 1e-12, "n={n}: {got} vs {want}");
        }
    }

    #[test]
    fn info_nce_separated_closed_form() {
        // q.p = 10, q.n_i = 0, N = 64, t = 1 -> ln(1 + 64 e^-10)
        let n = 64;
        let mut tape = Tape::new();
        let q = tape.var(&[2], vec![10.0, 3.0]);
        let p = tape.var(&[2], vec![1.0, 0.0]);
        let negs = tape.var(&[n, 2], (0..n).flat_map(|_| [0.0, 0.0]).collect());
        let l = info_nce(&mut tape, q, p, negs, 1.0).unwrap();
        let want = (64.0 * (-10.0f64).exp()).ln_1p();
        assert!((tape.scalar_value(l) - want).abs() < 1e-12);
    }

    #[test]
    fn info_nce_matches_oracle_on_random_inputs() {
        let mut rng = seeded_rng(21);
        for _ in 0..100 {
            let d = 4;
            let n = 8;
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let negs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let t = rng.random_range(0.1..2.0);
            let mut tape = Tape::new();
            let qv = tape.var(&[d], q.clone());
            let pv = tape.var(&[d], p.clone());
            let nv = tape.var(&[n, d], negs.iter().flatten().copied().collect());
            let l = info_nce(&mut tape, qv, pv, nv, t).unwrap();
            let want = info_nce_oracle(&q, &p, &negs, t);
            assert!((tape.scalar_value(l) - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn info_nce_errors() {
        let mut tape = Tape::new();
        let q = tape.var(&[2], vec![1.0, 0.0]);
        let p = tape.var(&[2], vec![1.0, 0.0]);
        let empty = tape.var(&[0, 2], vec![]);
        match info_nce(&mut tape, q, p, empty, 1.0) {
            Err(Error::InvalidArgument(_)) => {}
            other => panic!("expected argument error, got {other:?}"),
        }
        let bad = tape.var(&[1, 3], vec![0.0; 3]);
        match info_nce(&mut tape, q, p, bad, 1.0) {
            Err(Error::Shape(_)) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
        match info_nce(&mut tape, q, p, bad, 0.0) {
            Err(Error::InvalidArgument(_)) => {}
            other => panic!("expected argument error for temperature, got {other:?}"),
        }
    }

    #[test]
    fn info_nce_monotone_decreasing_in_positive_logit() {
        let mut prev = f64::INFINITY;
        for qp in [-2.0, -1.0, 0.0, 0.5, 1.0, 2.0, 5.0] {
            let mut tape = Tape::new();
            let q = tape.var(&[1], vec![1.0]);
            let p = tape.var(&[1], vec![qp]);
            let negs = tape.var(&[3, 1], vec![0.3, -0.4, 0.9]);
            let l = info_nce(&mut tape, q, p, negs, 0.7).unwrap();
            let v = tape.scalar_value(l);
            assert!(v < prev);
            assert!(v > 0.0);
            prev = v;
        }
    }

    #[test]
    fn info_nce_softplus_lower_bound() {
        let mut rng = seeded_rng(33);
        for _ in 0..200 {
            let d = 3;
            let n = 5;
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let negs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let t = rng.random_range(0.2..1.5);
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let qp = dot(&q, &p);
            let max_neg = negs
                .iter()
                .map(|nv| dot(&q, nv))
                .fold(f64::NEG_INFINITY, f64::max);
            let gap = -(qp - max_neg) / t;
            let softplus = gap.max(0.0) + (-gap.abs()).exp().ln_1p();
            let got = info_nce_oracle(&q, &p, &negs, t);
            assert!(got >= softplus - 1e-12);
        }
    }

    // ---- style_patch_nce ----

    #[test]
    fn style_two_patches_equal_dots() {
        // 1 layer, 2 patches, all normalized dots equal -> 2 ln 2
        let mk = |v: Vec<f64>| {
            PatchFeatureSet::new(vec![PatchFeatureLayer {
                layer_id: 0,
                dim: 2,
                features: v,
                locations: vec![(0, 0), (1, 1)],
            }])
            .unwrap()
        };
        // identical unit rows: every dot is 1 after normalization
        let gen = mk(vec![1.0, 0.0, 1.0, 0.0]);
        let tgt = mk(vec![2.0, 0.0, 0.5, 0.0]);
        let got = eval_style(&gen, &tgt, 0.31);
        assert!((got - 2.0 * (2.0f64).ln()).abs() < 1e-12, "{got}");
    }

    #[test]
    fn style_orthogonal_features_near_zero() {
        // identical gen/target with mutually orthogonal patch features:
        // per query ln(1 + (n-1) e^{-1/t}) for t = 0.07 is ~ 0
        let n = 4;
        let mut features = vec![0.0; n * n];
        for i in 0..n {
            features[i * n + i] = 3.0; // orthogonal rows
        }
        let set = PatchFeatureSet::new(vec![PatchFeatureLayer {
            layer_id: 0,
            dim: n,
            features,
            locations: (0..n).map(|i| (i, 0)).collect(),
        }])
        .unwrap();
        let got = eval_style(&set, &set, 0.07);
        let per_query = (1.0 + (n as f64 - 1.0) * (-1.0f64 / 0.07).exp()).ln();
        assert!((got - n as f64 * per_query).abs() < 1e-9);
        assert!(got < 1e-5);
    }

    #[test]
    fn style_matches_oracle() {
        let mut rng = seeded_rng(40);
        for _ in 0..100 {
            let gen = rand_set(&[(0, 8, 4), (4, 8, 4)], &mut rng);
            let mut tgt = rand_set(&[(0, 8, 4), (4, 8, 4)], &mut rng);
            for (lt, lg) in tgt.layers.iter_mut().zip(&gen.layers) {
                lt.locations = lg.locations.clone();
            }
            let want = style_oracle(&gen, &tgt, 0.07);
            let got = eval_style(&gen, &tgt, 0.07);
            assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn style_misaligned_sets_rejected() {
        let mut rng = seeded_rng(41);
        let a = rand_set(&[(0, 4, 3)], &mut rng);
        let mut b = rand_set(&[(0, 4, 3)], &mut rng);
        b.layers[0].locations[2] = (17, 17);
        let mut tape = Tape::new();
        let av = lift_feature_set(&mut tape, &a, false);
        let bv = lift_feature_set(&mut tape, &b, false);
        match style_patch_nce(&mut tape, &av, &bv, 0.07) {
            Err(Error::Alignment(_)) => {}
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    // ---- src ----

    #[test]
    fn src_identical_inputs_zero() {
        let mut rng = seeded_rng(50);
        let a = rand_set(&[(0, 6, 4), (4, 6, 4)], &mut rng);
        let got = eval_src(&a, &a, 0.07);
        assert!(got.abs() < 1e-12);
    }

    #[test]
    fn src_opposite_distributions_ln2() {
        // Construct a 3-patch layer where patch 0's in-image similarity
        // distribution is ~(1, 0) under A and ~(0, 1) under B.
        let t = 0.07;
        let a = PatchFeatureSet::new(vec![PatchFeatureLayer {
            layer_id: 0,
            dim: 2,
            // rows: e0, e0, -e0 => sim(0,1)=1, sim(0,2)=-1
            features: vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0],
            locations: vec![(0, 0), (1, 1), (2, 2)],
        }])
        .unwrap();
        let b = PatchFeatureSet::new(vec![PatchFeatureLayer {
            layer_id: 0,
            dim: 2,
            // rows: e0, -e0, e0 => sim(0,1)=-1, sim(0,2)=1
            features: vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0],
            locations: vec![(0, 0), (1, 1), (2, 2)],
        }])
        .unwrap();
        // oracle handles all queries; query 0 contributes JSD ~= ln 2
        let want = src_oracle(&a, &b, t);
        let got = eval_src(&a, &b, t);
        assert!((got - want).abs() < 1e-9);
        // per-query JSD for patch 0 alone is ln 2 up to e^{-2/t} leakage
        let p0 = 1.0 / (1.0 + (-2.0f64 / t).exp());
        assert!(p0 > 1.0 - 1e-11);
        let ln2 = (2.0f64).ln();
        assert!(want <= ln2 + 1e-12);
    }

    #[test]
    fn src_matches_oracle_and_is_symmetric_bounded() {
        let mut rng = seeded_rng(51);
        for _ in 0..100 {
            let a = rand_set(&[(0, 8, 4)], &mut rng);
            let mut b = rand_set(&[(0, 8, 4)], &mut rng);
            b.layers[0].locations = a.layers[0].locations.clone();
            let want = src_oracle(&a, &b, 0.07);
            let got = eval_src(&a, &b, 0.07);
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
            let rev = eval_src(&b, &a, 0.07);
            assert!((got - rev).abs() < 1e-12);
            assert!((0.0..=(2.0f64).ln() + 1e-12).contains(&got));
        }
    }

    #[test]
    fn src_requires_two_patches() {
        let mut rng = seeded_rng(52);
        let a = rand_set(&[(0, 1, 3)], &mut rng);
        let mut tape = Tape::new();
        let av = lift_feature_set(&mut tape, &a, false);
        let bv = lift_feature_set(&mut tape, &a, false);
        match src_loss(&mut tape, &av, &bv, 0.07) {
            Err(Error::InvalidArgument(_)) => {}
            other => panic!("expected argument error, got {other:?}"),
        }
    }

    // ---- hdce ----

    #[test]
    fn hdce_beta_zero_reduces_to_style() {
        let mut rng = seeded_rng(60);
        for _ in 0..50 {
            let src = rand_set(&[(0, 6, 4), (4, 5, 3)], &mut rng);
            let mut gen = rand_set(&[(0, 6, 4), (4, 5, 3)], &mut rng);
            for (lg, ls) in gen.layers.iter_mut().zip(&src.layers) {
                lg.locations = ls.locations.clone();
            }
            let h = eval_hdce(&src, &gen, 0.07, 0.0);
            let s = eval_style(&gen, &src, 0.07);
            assert!((h - s).abs() <= 1e-7, "{h} vs {s}");
        }
    }

    #[test]
    fn hdce_uniform_negatives_insensitive_to_beta() {
        // With every key row identical, each query faces identical negatives,
        // so the hardness weights are uniform for any beta.
        let n = 4;
        let src = PatchFeatureSet::new(vec![PatchFeatureLayer {
            layer_id: 0,
            dim: 2,
            features: [0.6, 0.8].repeat(n),
            locations: (0..n).map(|i| (i, i)).collect(),
        }])
        .unwrap();
        let mut rng = seeded_rng(61);
        let mut gen = rand_set(&[(0, n, 2)], &mut rng);
        gen.layers[0].locations = src.layers[0].locations.clone();
        let base = eval_hdce(&src, &gen, 0.07, 0.0);
        for beta in [0.5, 1.0, 3.0] {
            let v = eval_hdce(&src, &gen, 0.07, beta);
            assert!((v - base).abs() < 1e-10, "beta {beta}: {v} vs {base}");
        }
        // and the value itself is n * ln(n): all logits equal per query
        assert!((base - n as f64 * (n as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn hdce_matches_oracle() {
        let mut rng = seeded_rng(62);
        for _ in 0..100 {
            let src = rand_set(&[(0, 8, 4)], &mut rng);
            let mut gen = rand_set(&[(0, 8, 4)], &mut rng);
            gen.layers[0].locations = src.layers[0].locations.clone();
            let want = hdce_oracle(&src, &gen, 0.07, 1.0);
            let got = eval_hdce(&src, &gen, 0.07, 1.0);
            assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
        }
    }

    // ---- finetune patch loss ----

    fn eval_finetune_patch(
        emb: &crate::priors::mock::MockEmbedder,
        a: &crate::image::ImageTensor,
        b: &crate::image::ImageTensor,
        k: usize,
        ps: usize,
        seed: u64,
    ) -> f64 {
        let mut tape = Tape::new();
        let av = tape.constant(&a.shape(), a.data().to_vec());
        let bv = tape.constant(&b.shape(), b.data().to_vec());
        let mut rng = seeded_rng(seed);
        let l = finetune_patch_loss(&mut tape, emb, av, bv, k, ps, &mut rng).unwrap();
        tape.scalar_value(l)
    }

    #[test]
    fn finetune_patch_identical_images_below_ln_k() {
        use crate::priors::mock::{MockEmbedder, MOCK_EMBED_DIM};
        // structured image: distinct locations give distinct embeddings,
        // so the positive logit dominates and the loss sits below ln k
        let emb = MockEmbedder::new(MOCK_EMBED_DIM, seeded_rng(3));
        let img = crate::image::ImageTensor::from_fn(16, 16, |c, y, x| {
            (((c + 1) * (y + 2)) as f64 * 0.02 - x as f64 * 0.01).sin() * 0.9
        })
        .unwrap();
        for k in [2usize, 4, 8] {
            let loss = eval_finetune_patch(&emb, &img, &img, k, 4, 11);
            assert!(
                loss < (k as f64).ln(),
                "k={k}: loss {loss} not below ln(k)"
            );
        }
    }

    #[test]
    fn finetune_patch_uniform_image_gives_ln2() {
        use crate::priors::mock::{MockEmbedder, MOCK_EMBED_DIM};
        // constant image: every crop embeds identically, all dots equal
        let emb = MockEmbedder::new(MOCK_EMBED_DIM, seeded_rng(3));
        let img = crate::image::ImageTensor::splat(16, 16, 0.25).unwrap();
        let loss = eval_finetune_patch(&emb, &img, &img, 2, 4, 11);
        assert!((loss - (2.0f64).ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn finetune_patch_deterministic_for_seed() {
        use crate::priors::mock::{MockEmbedder, MOCK_EMBED_DIM};
        let emb = MockEmbedder::new(MOCK_EMBED_DIM, seeded_rng(3));
        let a = crate::image::ImageTensor::from_fn(16, 16, |c, y, x| {
            ((c * 7 + y * 3 + x) as f64 * 0.03).sin() * 0.8
        })
        .unwrap();
        let b = crate::image::ImageTensor::from_fn(16, 16, |c, y, x| {
            ((c * 5 + y + x * 2) as f64 * 0.04).cos() * 0.8
        })
        .unwrap();
        let l1 = eval_finetune_patch(&emb, &a, &b, 4, 4, 99);
        let l2 = eval_finetune_patch(&emb, &a, &b, 4, 4, 99);
        assert_eq!(l1.to_bits(), l2.to_bits());
        // k < 2 rejected
        let mut tape = Tape::new();
        let av = tape.constant(&a.shape(), a.data().to_vec());
        let bv = tape.constant(&b.shape(), b.data().to_vec());
        let mut rng = seeded_rng(0);
        match finetune_patch_loss(&mut tape, &emb, av, bv, 1, 4, &mut rng) {
            Err(Error::InvalidArgument(_)) => {}
            other => panic!("expected argument error, got {:?}", other.map(|_| ())),
        }
        // oversized patch rejected
        match finetune_patch_loss(&mut tape, &emb, av, bv, 2, 99, &mut rng) {
            Err(Error::Bounds(_)) => {}
            other => panic!("expected bounds error, got {:?}", other.map(|_| ())),
        }
    }

    // ---- adversarial ----

    #[test]
    fn least_squares_optima() {
        let mut tape = Tape::new();
        let real = tape.var(&[4], vec![1.0; 4]);
        let fake = tape.var(&[4], vec![0.0; 4]);
        let d = adversarial_loss(
            &mut tape,
            Some(real),
            fake,
            GanMode::Discriminator,
            GanKind::LeastSquares,
        )
        .unwrap();
        assert_eq!(tape.scalar_value(d), 0.0);
        let fake1 = tape.var(&[4], vec![1.0; 4]);
        let g = adversarial_loss(
            &mut tape,
            None,
            fake1,
            GanMode::Generator,
            GanKind::LeastSquares,
        )
        .unwrap();
        assert_eq!(tape.scalar_value(g), 0.0);
    }

    #[test]
    fn nonsaturating_all_zero_scores() {
        let mut tape = Tape::new();
        let real = tape.var(&[3], vec![0.0; 3]);
        let fake = tape.var(&[5], vec![0.0; 5]);
        let d = adversarial_loss(
            &mut tape,
            Some(real),
            fake,
            GanMode::Discriminator,
            GanKind::NonSaturating,
        )
        .unwrap();
        let want = 2.0 * (2.0f64).ln();
        assert!((tape.scalar_value(d) - want).abs() < 1e-12);
    }

    #[test]
    fn nan_scores_are_numeric_error() {
        let mut tape = Tape::new();
        let real = tape.var(&[2], vec![0.0, f64::NAN]);
        let fake = tape.var(&[2], vec![0.0, 0.0]);
        match adversarial_loss(
            &mut tape,
            Some(real),
            fake,
            GanMode::Discriminator,
            GanKind::LeastSquares,
        ) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    // ---- gradient checks (module-level; the acceptance suite runs the
    //      full set over every loss) ----

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], tol: f64) {
        let h = 1e-4;
        for i in 0..x.len() {
            let mut up = x.to_vec();
            up[i] += h;
            let mut dn = x.to_vec();
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1.0);
            assert!(
                (analytic[i] - fd).abs() / denom <= tol,
                "component {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn info_nce_gradient() {
        let mut rng = seeded_rng(70);
        let d = 8;
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let negs: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let qv = tape.var(&[d], q.clone());
        let pv = tape.var(&[d], p.clone());
        let nv = tape.var(&[3, d], negs.clone());
        let l = info_nce(&mut tape, qv, pv, nv, 0.5).unwrap();
        tape.backward(l);
        let gq = tape.grad(qv).unwrap().to_vec();

        let eval = |qx: &[f64]| {
            let mut t = Tape::new();
            let qv = t.var(&[d], qx.to_vec());
            let pv = t.var(&[d], p.clone());
            let nv = t.var(&[3, d], negs.clone());
            let l = info_nce(&mut t, qv, pv, nv, 0.5).unwrap();
            t.scalar_value(l)
        };
        fd_check(eval, &q, &gq, 1e-3);
    }

    proptest::proptest! {
        #[test]
        fn prop_info_nce_positive_and_bounded_below(
            qp in -3.0f64..3.0,
            negs in proptest::collection::vec(-3.0f64..3.0, 1..12),
            t in 0.05f64..2.0,
        ) {
            // scalar-feature construction: dots are the raw values
            let n = negs.len();
            let mut tape = Tape::new();
            let q = tape.var(&[1], vec![1.0]);
            let p = tape.var(&[1], vec![qp]);
            let nv = tape.var(&[n, 1], negs.clone());
            let l = info_nce(&mut tape, q, p, nv, t).unwrap();
            let v = tape.scalar_value(l);
            proptest::prop_assert!(v > 0.0);
            let max_neg = negs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let gap = -(qp - max_neg) / t;
            let softplus = gap.max(0.0) + (-gap.abs()).exp().ln_1p();
            proptest::prop_assert!(v >= softplus - 1e-12);
        }

        #[test]
        fn prop_hdce_zero_hardness_is_style(
            feats_a in proptest::collection::vec(-1.0f64..1.0, 12),
            feats_b in proptest::collection::vec(-1.0f64..1.0, 12),
        ) {
            let mk = |f: &[f64]| PatchFeatureSet::new(vec![PatchFeatureLayer {
                layer_id: 0,
                dim: 3,
                features: f.to_vec(),
                locations: (0..4).map(|i| (i, 0)).collect(),
            }]).unwrap();
            let a = mk(&feats_a);
            let b = mk(&feats_b);
            let h = eval_hdce(&a, &b, 0.07, 0.0);
            let s = eval_style(&b, &a, 0.07);
            proptest::prop_assert!((h - s).abs() <= 1e-7);
        }
    }

    #[test]
    fn hdce_gradient_through_weights() {
        let mut rng = seeded_rng(71);
        let src = rand_set(&[(0, 4, 3)], &mut rng);
        let mut gen = rand_set(&[(0, 4, 3)], &mut rng);
        gen.layers[0].locations = src.layers[0].locations.clone();

        let mut tape = Tape::new();
        let sv = lift_feature_set(&mut tape, &src, true);
        let gv = lift_feature_set(&mut tape, &gen, true);
        let l = hdce_loss(&mut tape, &sv, &gv, 0.2, 1.5).unwrap();
        tape.backward(l);
        let g_src = tape.grad(sv.layers[0].features).unwrap().to_vec();

        let eval = |sx: &[f64]| {
            let mut s2 = src.clone();
            s2.layers[0].features = sx.to_vec();
            eval_hdce(&s2, &gen, 0.2, 1.5)
        };
        fd_check(eval, &src.layers[0].features.clone(), &g_src, 1e-3);
    }
}
