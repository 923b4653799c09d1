//! Stage 3: semi-supervised image-to-image translation.
//!
//! A residual encoder-decoder generator translates real scenes into the
//! anime domain. Two branches train it jointly: an unsupervised branch on
//! unpaired real/anime sets (adversarial + semantic-relation consistency +
//! hard-negative contrastive terms) and a supervised branch on filtered
//! pseudo pairs (conditional adversarial + patch-wise contrastive style
//! term), the latter weighted by a cosine schedule that decays across
//! epochs.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{StyleLossVariant, TrainConfig};
use crate::dataset::{ImageFolder, PairDataset};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{
    adversarial_loss, conditional_adversarial_loss, hdce_loss, src_loss, style_patch_nce,
    CondSide, GanKind, GanMode, PatchFeatureVarLayer, PatchFeatureVars,
};
use crate::metrics::{LossReport, MetricsWriter};
use crate::nn::{
    bind_params, collect_grads, Adam, Binding, Conv2d, ConvTranspose2d, InstanceNorm, Linear,
    Params,
};
use crate::priors::PerceptualMetric;
use crate::rng::{epoch_rng, PipelineRng};
use crate::tape::{Tape, Var};
use crate::types::PseudoPair;

/// Encoder tap ids: input pixels, the two downsampling convolutions, and
/// residual blocks 1 and 5.
pub const TAP_LAYER_IDS: [usize; 5] = [0, 4, 8, 12, 16];
/// Receptive field (pixels) of each tap.
pub const TAP_RECEPTIVE_FIELDS: [usize; 5] = [1, 9, 15, 35, 99];

pub const N_RES_BLOCKS: usize = 9;
/// Residual blocks that belong to the encoder half.
const ENC_RES_BLOCKS: usize = 5;
const INIT_STD: f64 = 0.02;

/// Architecture descriptor for the translation stage.
#[derive(Clone, Debug, PartialEq)]
pub struct I2iArch {
    pub base_channels: usize,
    pub embed_dim: usize,
    pub tap_ids: Vec<usize>,
    pub disc_base: usize,
}

impl I2iArch {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        for id in &cfg.feature_layer_ids {
            if !TAP_LAYER_IDS.contains(id) {
                return Err(Error::Config(format!(
                    "unsupported feature layer id {id}; taps exist at {TAP_LAYER_IDS:?}"
                )));
            }
        }
        Ok(I2iArch {
            base_channels: cfg.gen_base_channels,
            embed_dim: cfg.embed_dim,
            tap_ids: cfg.feature_layer_ids.clone(),
            disc_base: cfg.disc_base_channels,
        })
    }

    /// Channel width of the feature at a tap id.
    pub fn tap_channels(&self, id: usize) -> usize {
        match id {
            0 => 3,
            4 => 2 * self.base_channels,
            _ => 4 * self.base_channels,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "base_channels": self.base_channels,
            "embed_dim": self.embed_dim,
            "tap_ids": self.tap_ids,
            "disc_base": self.disc_base,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            v.get(k)
                .and_then(|x| x.as_u64())
                .map(|x| x as usize)
                .ok_or_else(|| Error::Checkpoint(format!("arch header missing {k}")))
        };
        let tap_ids = v
            .get("tap_ids")
            .and_then(|x| x.as_array())
            .ok_or_else(|| Error::Checkpoint("arch header missing tap_ids".into()))?
            .iter()
            .map(|x| x.as_u64().unwrap_or(0) as usize)
            .collect();
        Ok(I2iArch {
            base_channels: get("base_channels")?,
            embed_dim: get("embed_dim")?,
            tap_ids,
            disc_base: get("disc_base")?,
        })
    }
}

/// Cosine-decayed supervised-branch weight across epochs `1..=total`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochSchedule {
    pub total_epochs: usize,
}

impl EpochSchedule {
    pub fn new(total_epochs: usize) -> Result<Self> {
        if total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        Ok(EpochSchedule { total_epochs })
    }

    /// `cos(pi * (t - 1) / (2 * total))`: 1 at the first epoch, strictly
    /// decreasing, positive through the last epoch.
    pub fn weight(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {t} outside 1..={}",
                self.total_epochs
            )));
        }
        Ok((std::f64::consts::PI * (t as f64 - 1.0) / (2.0 * self.total_epochs as f64)).cos())
    }
}

/// ResNet-style encoder-decoder translator. The encoder is the input
/// convolution, two stride-2 downsampling blocks, and the first half of
/// the residual stack; the decoder is the remaining residual blocks, two
/// stride-2 transposed convolutions, and a bounded output convolution.
#[derive(Clone, Debug)]
pub struct TranslationGenerator {
    pub arch: I2iArch,
    pub params: Params,
}

struct GenLayers {
    in_conv: Conv2d,
    in_norm: InstanceNorm,
    down1: Conv2d,
    down1_norm: InstanceNorm,
    down2: Conv2d,
    down2_norm: InstanceNorm,
    res_conv: Vec<(Conv2d, InstanceNorm, Conv2d, InstanceNorm)>,
    up1: ConvTranspose2d,
    up1_norm: InstanceNorm,
    up2: ConvTranspose2d,
    up2_norm: InstanceNorm,
    out_conv: Conv2d,
}

fn gen_layers(arch: &I2iArch) -> GenLayers {
    let ngf = arch.base_channels;
    let res = (0..N_RES_BLOCKS)
        .map(|i| {
            (
                Conv2d::new(format!("res{i}.conv0"), 4 * ngf, 4 * ngf, 3, 1, 1),
                InstanceNorm::new(format!("res{i}.norm0"), 4 * ngf),
                Conv2d::new(format!("res{i}.conv1"), 4 * ngf, 4 * ngf, 3, 1, 1),
                InstanceNorm::new(format!("res{i}.norm1"), 4 * ngf),
            )
        })
        .collect();
    GenLayers {
        in_conv: Conv2d::new("in_conv", 3, ngf, 7, 1, 3),
        in_norm: InstanceNorm::new("in_norm", ngf),
        down1: Conv2d::new("down1", ngf, 2 * ngf, 3, 2, 1),
        down1_norm: InstanceNorm::new("down1_norm", 2 * ngf),
        down2: Conv2d::new("down2", 2 * ngf, 4 * ngf, 3, 2, 1),
        down2_norm: InstanceNorm::new("down2_norm", 4 * ngf),
        res_conv: res,
        up1: ConvTranspose2d::new("up1", 4 * ngf, 2 * ngf, 4, 2, 1),
        up1_norm: InstanceNorm::new("up1_norm", 2 * ngf),
        up2: ConvTranspose2d::new("up2", 2 * ngf, ngf, 4, 2, 1),
        up2_norm: InstanceNorm::new("up2_norm", ngf),
        out_conv: Conv2d::new("out_conv", ngf, 3, 7, 1, 3),
    }
}

impl TranslationGenerator {
    pub fn new(arch: I2iArch, rng: &mut PipelineRng) -> Self {
        let layers = gen_layers(&arch);
        let mut params = Params::new();
        layers.in_conv.init(&mut params, INIT_STD, rng);
        layers.in_norm.init(&mut params);
        layers.down1.init(&mut params, INIT_STD, rng);
        layers.down1_norm.init(&mut params);
        layers.down2.init(&mut params, INIT_STD, rng);
        layers.down2_norm.init(&mut params);
        for (c0, n0, c1, n1) in &layers.res_conv {
            c0.init(&mut params, INIT_STD, rng);
            n0.init(&mut params);
            c1.init(&mut params, INIT_STD, rng);
            n1.init(&mut params);
        }
        layers.up1.init(&mut params, INIT_STD, rng);
        layers.up1_norm.init(&mut params);
        layers.up2.init(&mut params, INIT_STD, rng);
        layers.up2_norm.init(&mut params);
        layers.out_conv.init(&mut params, INIT_STD, rng);
        TranslationGenerator { arch, params }
    }

    /// Encoder pass. Returns the tapped features (in `tap_ids` order) and
    /// the final encoder feature.
    pub fn encode_on(&self, tape: &mut Tape, bind: &Binding, x: Var) -> (Vec<(usize, Var)>, Var) {
        let layers = gen_layers(&self.arch);
        let mut taps = Vec::new();
        let want = |id: usize, v: Var, taps: &mut Vec<(usize, Var)>| {
            if self.arch.tap_ids.contains(&id) {
                taps.push((id, v));
            }
        };
        want(0, x, &mut taps);
        let h = layers.in_conv.forward(tape, bind, x);
        let h = layers.in_norm.forward(tape, bind, h);
        let mut h = tape.relu(h);
        let d1 = layers.down1.forward(tape, bind, h);
        want(4, d1, &mut taps);
        h = layers.down1_norm.forward(tape, bind, d1);
        h = tape.relu(h);
        let d2 = layers.down2.forward(tape, bind, h);
        want(8, d2, &mut taps);
        h = layers.down2_norm.forward(tape, bind, d2);
        h = tape.relu(h);
        for (i, (c0, n0, c1, n1)) in layers.res_conv.iter().take(ENC_RES_BLOCKS).enumerate() {
            let skip = h;
            let mut z = c0.forward(tape, bind, h);
            z = n0.forward(tape, bind, z);
            z = tape.relu(z);
            z = c1.forward(tape, bind, z);
            z = n1.forward(tape, bind, z);
            h = tape.add(skip, z);
            if i == 0 {
                want(12, h, &mut taps);
            }
            if i == ENC_RES_BLOCKS - 1 {
                want(16, h, &mut taps);
            }
        }
        (taps, h)
    }

    /// Decoder pass from the final encoder feature.
    pub fn decode_on(&self, tape: &mut Tape, bind: &Binding, feat: Var) -> Var {
        let layers = gen_layers(&self.arch);
        let mut h = feat;
        for (c0, n0, c1, n1) in layers.res_conv.iter().skip(ENC_RES_BLOCKS) {
            let skip = h;
            let mut z = c0.forward(tape, bind, h);
            z = n0.forward(tape, bind, z);
            z = tape.relu(z);
            z = c1.forward(tape, bind, z);
            z = n1.forward(tape, bind, z);
            h = tape.add(skip, z);
        }
        let u1 = layers.up1.forward(tape, bind, h);
        let u1 = layers.up1_norm.forward(tape, bind, u1);
        let u1 = tape.relu(u1);
        let u2 = layers.up2.forward(tape, bind, u1);
        let u2 = layers.up2_norm.forward(tape, bind, u2);
        let u2 = tape.relu(u2);
        let out = layers.out_conv.forward(tape, bind, u2);
        tape.tanh(out)
    }

    pub fn translate_on(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let (_, feat) = self.encode_on(tape, bind, x);
        self.decode_on(tape, bind, feat)
    }

    /// Full-image translation; any resolution divisible by 4 is accepted.
    pub fn translate(&self, img: &ImageTensor) -> Result<ImageTensor> {
        if img.height() % 4 != 0 || img.width() % 4 != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} not divisible by 4",
                img.height(),
                img.width()
            )));
        }
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, &self.params, |_| false);
        let x = tape.constant(&img.shape(), img.data().to_vec());
        let y = self.translate_on(&mut tape, &bind, x);
        ImageTensor::from_data(img.height(), img.width(), tape.value(y).to_vec())
    }
}

/// One two-layer MLP per tapped encoder layer, projecting the layer's
/// channel dimension to the shared embedding width.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub arch: I2iArch,
    pub params: Params,
}

impl ProjectionHeads {
    pub fn new(arch: I2iArch, rng: &mut PipelineRng) -> Self {
        let mut params = Params::new();
        for (i, &id) in arch.tap_ids.iter().enumerate() {
            let cin = arch.tap_channels(id);
            Linear::new(format!("head{i}.fc0"), cin, arch.embed_dim).init(
                &mut params,
                INIT_STD,
                0.0,
                rng,
            );
            Linear::new(format!("head{i}.fc1"), arch.embed_dim, arch.embed_dim).init(
                &mut params,
                INIT_STD,
                0.0,
                rng,
            );
        }
        ProjectionHeads { arch, params }
    }

    /// Projects gathered features `[n, c]` of tap index `i` to `[n, embed]`.
    pub fn project(&self, tape: &mut Tape, bind: &Binding, i: usize, feats: Var) -> Var {
        let cin = self.arch.tap_channels(self.arch.tap_ids[i]);
        let fc0 = Linear::new(format!("head{i}.fc0"), cin, self.arch.embed_dim);
        let fc1 = Linear::new(format!("head{i}.fc1"), self.arch.embed_dim, self.arch.embed_dim);
        let h = fc0.forward(tape, bind, feats);
        let h = tape.relu(h);
        fc1.forward(tape, bind, h)
    }
}

/// Samples patch features at every tapped layer. Passing `reuse` (one
/// location list per tap, as produced by a prior call) aligns the result
/// with that call so positives pair by index.
#[allow(clippy::too_many_arguments)]
pub fn extract_patch_features(
    tape: &mut Tape,
    gen: &TranslationGenerator,
    bind_g: &Binding,
    heads: &ProjectionHeads,
    bind_h: &Binding,
    img: Var,
    n_per_layer: usize,
    rng: &mut PipelineRng,
    reuse: Option<&[Vec<(usize, usize)>]>,
) -> Result<PatchFeatureVars> {
    let (taps, _) = gen.encode_on(tape, bind_g, img);
    if let Some(r) = reuse {
        if r.len() != taps.len() {
            return Err(Error::Alignment(format!(
                "reuse locations cover {} layers, encoder tapped {}",
                r.len(),
                taps.len()
            )));
        }
    }
    let mut layers = Vec::with_capacity(taps.len());
    for (i, (layer_id, feat)) in taps.iter().enumerate() {
        let sh = tape.shape(*feat);
        let (h, w) = (sh[1], sh[2]);
        let locations: Vec<(usize, usize)> = match reuse {
            Some(r) => {
                for &(y, x) in &r[i] {
                    if y >= h || x >= w {
                        return Err(Error::Alignment(format!(
                            "reused location ({y}, {x}) outside layer {layer_id} ({h}x{w})"
                        )));
                    }
                }
                r[i].clone()
            }
            None => {
                if n_per_layer > h * w {
                    return Err(Error::InvalidArgument(format!(
                        "{n_per_layer} patches requested from {h}x{w} layer {layer_id}"
                    )));
                }
                rand::seq::index::sample(rng, h * w, n_per_layer)
                    .into_iter()
                    .map(|p| (p / w, p % w))
                    .collect()
            }
        };
        let gathered = tape.gather_spatial(*feat, &locations);
        let projected = heads.project(tape, bind_h, i, gathered);
        layers.push(PatchFeatureVarLayer {
            layer_id: *layer_id,
            features: projected,
            locations,
        });
    }
    Ok(PatchFeatureVars { layers })
}

pub fn feature_locations(vars: &PatchFeatureVars) -> Vec<Vec<(usize, usize)>> {
    vars.layers.iter().map(|l| l.locations.clone()).collect()
}

/// Patch discriminator: stride-2 conv stack scoring overlapping receptive
/// fields, 1-channel head. 3 input channels for the unconditional game,
/// 6 for the conditional one.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub in_channels: usize,
    pub base: usize,
    pub params: Params,
}

impl PatchDiscriminator {
    pub fn new(in_channels: usize, base: usize, rng: &mut PipelineRng) -> Self {
        let mut params = Params::new();
        let chans = [base, 2 * base, 4 * base, 8 * base];
        let mut cin = in_channels;
        for (i, &cout) in chans.iter().enumerate() {
            Conv2d::new(format!("conv{i}"), cin, cout, 4, 2, 1).init(&mut params, INIT_STD, rng);
            if i > 0 {
                InstanceNorm::new(format!("norm{i}"), cout).init(&mut params);
            }
            cin = cout;
        }
        Conv2d::new("head", cin, 1, 4, 1, 1).init(&mut params, INIT_STD, rng);
        PatchDiscriminator {
            in_channels,
            base,
            params,
        }
    }

    /// Patch score map for an input `[in_channels, h, w]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        assert_eq!(tape.shape(x)[0], self.in_channels, "discriminator arity");
        let chans = [self.base, 2 * self.base, 4 * self.base, 8 * self.base];
        let mut h = x;
        let mut cin = self.in_channels;
        for (i, &cout) in chans.iter().enumerate() {
            let conv = Conv2d::new(format!("conv{i}"), cin, cout, 4, 2, 1);
            h = conv.forward(tape, bind, h);
            if i > 0 {
                let norm = InstanceNorm::new(format!("norm{i}"), cout);
                h = norm.forward(tape, bind, h);
            }
            h = tape.leaky_relu(h, 0.2);
            cin = cout;
        }
        let head = Conv2d::new("head", cin, 1, 4, 1, 1);
        head.forward(tape, bind, h)
    }
}

/// Result of one branch: the differentiable total and the value report.
/// `report` additionally carries the discriminator's own objective on this
/// sample (keys starting with `d_`), which is diagnostic and not part of
/// the generator total.
pub struct BranchOutput {
    pub total: Var,
    pub report: LossReport,
    pub gen_feats: Option<PatchFeatureVars>,
    pub ref_feats: Option<PatchFeatureVars>,
}

/// Supervised branch on one pseudo pair: conditional adversarial term plus
/// the patch-wise contrastive style term (or its mean-absolute-difference
/// variant) between the translation of the real-like member and the
/// anime-like member. Patch locations are sampled once on the translated
/// image and reused on the reference, so the two feature sets align.
#[allow(clippy::too_many_arguments)]
pub fn supervised_branch_loss(
    tape: &mut Tape,
    gen: &TranslationGenerator,
    bind_g: &Binding,
    heads: &ProjectionHeads,
    bind_h: &Binding,
    d_p: &PatchDiscriminator,
    bind_dp: &Binding,
    pair: &PseudoPair,
    cfg: &TrainConfig,
    rng: &mut PipelineRng,
) -> Result<BranchOutput> {
    let x_p = tape.constant(&pair.x_p.shape(), pair.x_p.data().to_vec());
    let y_p = tape.constant(&pair.y_p.shape(), pair.y_p.data().to_vec());
    let g_xp = gen.translate_on(tape, bind_g, x_p);

    let cgan = conditional_adversarial_loss(
        tape,
        |t, joint| d_p.forward(t, bind_dp, joint),
        x_p,
        g_xp,
        CondSide::Generator,
    )?;
    let mut report = LossReport::new();
    report.insert("sup_cgan", tape.scalar_value(cgan));

    let mut total = cgan;
    let mut gen_feats = None;
    let mut ref_feats = None;
    let style_weighted = match cfg.style_loss_variant {
        StyleLossVariant::StylePatchNce => {
            let fg = extract_patch_features(
                tape,
                gen,
                bind_g,
                heads,
                bind_h,
                g_xp,
                cfg.patches_per_layer,
                rng,
                None,
            )?;
            let locs = feature_locations(&fg);
            let fy = extract_patch_features(
                tape, gen, bind_g, heads, bind_h, y_p, 0, rng,
                Some(&locs),
            )?;
            let style = style_patch_nce(tape, &fg, &fy, cfg.nce_temperature)?;
            let w = tape.scale(style, cfg.lambda_style);
            gen_feats = Some(fg);
            ref_feats = Some(fy);
            w
        }
        StyleLossVariant::L1 => {
            let diff = tape.sub(g_xp, y_p);
            let ad = tape.abs(diff);
            let l1 = tape.mean_all(ad);
            tape.scale(l1, cfg.lambda_style)
        }
    };
    report.insert("sup_style", tape.scalar_value(style_weighted));
    total = tape.add(total, style_weighted);
    report.insert("sup_total", tape.scalar_value(total));

    // Diagnostic: the conditional discriminator's own objective on this
    // pair, fake side detached.
    let g_xp_const = tape.detach(g_xp);
    let d_real = conditional_adversarial_loss(
        tape,
        |t, joint| d_p.forward(t, bind_dp, joint),
        x_p,
        y_p,
        CondSide::DiscriminatorReal,
    )?;
    let d_fake = conditional_adversarial_loss(
        tape,
        |t, joint| d_p.forward(t, bind_dp, joint),
        x_p,
        g_xp_const,
        CondSide::DiscriminatorFake,
    )?;
    report.insert(
        "d_p_objective",
        tape.scalar_value(d_real) + tape.scalar_value(d_fake),
    );
    report.validate_finite()?;
    Ok(BranchOutput {
        total,
        report,
        gen_feats,
        ref_feats,
    })
}

/// Unsupervised branch on one unpaired (real, anime) sample: adversarial
/// term against the unconditional discriminator plus semantic-relation
/// consistency and hard-negative contrastive terms between the input's and
/// the translation's encoder features, optionally a perceptual content
/// term.
#[allow(clippy::too_many_arguments)]
pub fn unsupervised_branch_loss(
    tape: &mut Tape,
    gen: &TranslationGenerator,
    bind_g: &Binding,
    heads: &ProjectionHeads,
    bind_h: &Binding,
    d_u: &PatchDiscriminator,
    bind_du: &Binding,
    x: &ImageTensor,
    y: &ImageTensor,
    cfg: &TrainConfig,
    perceptual: Option<&dyn PerceptualMetric>,
    rng: &mut PipelineRng,
) -> Result<BranchOutput> {
    let xv = tape.constant(&x.shape(), x.data().to_vec());
    let yv = tape.constant(&y.shape(), y.data().to_vec());
    let g_x = gen.translate_on(tape, bind_g, xv);

    let fake_scores = d_u.forward(tape, bind_du, g_x);
    let gan = adversarial_loss(
        tape,
        None,
        fake_scores,
        GanMode::Generator,
        GanKind::LeastSquares,
    )?;
    let mut report = LossReport::new();
    report.insert("unsup_gan", tape.scalar_value(gan));
    let mut total = gan;

    let mut gen_feats = None;
    let mut ref_feats = None;
    if cfg.lambda_src > 0.0 || cfg.lambda_hdce > 0.0 {
        let fx = extract_patch_features(
            tape,
            gen,
            bind_g,
            heads,
            bind_h,
            xv,
            cfg.patches_per_layer,
            rng,
            None,
        )?;
        let locs = feature_locations(&fx);
        let fgx = extract_patch_features(
            tape, gen, bind_g, heads, bind_h, g_x, 0, rng,
            Some(&locs),
        )?;
        if cfg.lambda_src > 0.0 {
            let src = src_loss(tape, &fx, &fgx, cfg.nce_temperature)?;
            let w = tape.scale(src, cfg.lambda_src);
            report.insert("src", tape.scalar_value(w));
            total = tape.add(total, w);
        } else {
            report.insert("src", 0.0);
        }
        if cfg.lambda_hdce > 0.0 {
            let hdce = hdce_loss(tape, &fx, &fgx, cfg.nce_temperature, cfg.hdce_hardness)?;
            let w = tape.scale(hdce, cfg.lambda_hdce);
            report.insert("hdce", tape.scalar_value(w));
            total = tape.add(total, w);
        } else {
            report.insert("hdce", 0.0);
        }
        gen_feats = Some(fgx);
        ref_feats = Some(fx);
    } else {
        report.insert("src", 0.0);
        report.insert("hdce", 0.0);
    }

    if cfg.lambda_content > 0.0 {
        let pm = perceptual.ok_or_else(|| {
            Error::Config("lambda_content > 0 requires a perceptual adapter".into())
        })?;
        let content = pm.distance_t(tape, xv, g_x)?;
        let w = tape.scale(content, cfg.lambda_content);
        report.insert("content", tape.scalar_value(w));
        total = tape.add(total, w);
    }

    report.insert("unsup_total", tape.scalar_value(total));

    // Diagnostic: unconditional discriminator objective, fake detached.
    let g_x_const = tape.detach(g_x);
    let real_scores = d_u.forward(tape, bind_du, yv);
    let fake_const_scores = d_u.forward(tape, bind_du, g_x_const);
    let d_obj = adversarial_loss(
        tape,
        Some(real_scores),
        fake_const_scores,
        GanMode::Discriminator,
        GanKind::LeastSquares,
    )?;
    report.insert("d_u_objective", tape.scalar_value(d_obj));
    report.validate_finite()?;
    Ok(BranchOutput {
        total,
        report,
        gen_feats,
        ref_feats,
    })
}

/// Complete training state for the translation stage.
pub struct Trainer {
    pub arch: I2iArch,
    pub gen: TranslationGenerator,
    pub heads: ProjectionHeads,
    pub d_u: PatchDiscriminator,
    pub d_p: PatchDiscriminator,
    pub opt_g: Adam,
    pub opt_h: Adam,
    pub opt_du: Adam,
    pub opt_dp: Adam,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, rng: &mut PipelineRng) -> Result<Self> {
        cfg.validate()?;
        let arch = I2iArch::from_config(cfg)?;
        let gen = TranslationGenerator::new(arch.clone(), rng);
        let heads = ProjectionHeads::new(arch.clone(), rng);
        let d_u = PatchDiscriminator::new(3, arch.disc_base, rng);
        let d_p = PatchDiscriminator::new(6, arch.disc_base, rng);
        Ok(Trainer {
            arch,
            gen,
            heads,
            d_u,
            d_p,
            opt_g: Adam::new(cfg.i2i_lr, cfg.i2i_beta1, cfg.i2i_beta2),
            opt_h: Adam::new(cfg.i2i_lr, cfg.i2i_beta1, cfg.i2i_beta2),
            opt_du: Adam::new(cfg.i2i_lr, cfg.i2i_beta1, cfg.i2i_beta2),
            opt_dp: Adam::new(cfg.i2i_lr, cfg.i2i_beta1, cfg.i2i_beta2),
            epoch: 0,
        })
    }

    /// Effective supervised weight for epoch `t` under this config.
    pub fn lambda_sup(cfg: &TrainConfig, t: usize) -> Result<f64> {
        if let Some(v) = cfg.lambda_sup_override {
            return Ok(v);
        }
        EpochSchedule::new(cfg.epochs)?.weight(t)
    }

    fn translate_plain(&self, img: &ImageTensor) -> Result<ImageTensor> {
        self.gen.translate(img)
    }

    fn d_u_step(&mut self, y: &ImageTensor, fake: &ImageTensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, &self.d_u.params, |_| true);
        let yv = tape.constant(&y.shape(), y.data().to_vec());
        let fv = tape.constant(&fake.shape(), fake.data().to_vec());
        let rs = self.d_u.forward(&mut tape, &bind, yv);
        let fs = self.d_u.forward(&mut tape, &bind, fv);
        let loss = adversarial_loss(
            &mut tape,
            Some(rs),
            fs,
            GanMode::Discriminator,
            GanKind::LeastSquares,
        )?;
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("d_u loss is {v}")));
        }
        tape.backward(loss);
        let grads = collect_grads(&tape, &self.d_u.params, &bind);
        self.opt_du.step(&mut self.d_u.params, &grads);
        Ok(v)
    }

    fn d_p_step(&mut self, pair: &PseudoPair, fake: &ImageTensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, &self.d_p.params, |_| true);
        let xv = tape.constant(&pair.x_p.shape(), pair.x_p.data().to_vec());
        let yv = tape.constant(&pair.y_p.shape(), pair.y_p.data().to_vec());
        let fv = tape.constant(&fake.shape(), fake.data().to_vec());
        let d_p = &self.d_p;
        let real = conditional_adversarial_loss(
            &mut tape,
            |t, joint| d_p.forward(t, &bind, joint),
            xv,
            yv,
            CondSide::DiscriminatorReal,
        )?;
        let fake_loss = conditional_adversarial_loss(
            &mut tape,
            |t, joint| d_p.forward(t, &bind, joint),
            xv,
            fv,
            CondSide::DiscriminatorFake,
        )?;
        let loss = tape.add(real, fake_loss);
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("d_p loss is {v}")));
        }
        tape.backward(loss);
        let grads = collect_grads(&tape, &self.d_p.params, &bind);
        self.opt_dp.step(&mut self.d_p.params, &grads);
        Ok(v)
    }

    /// One epoch: per iteration a discriminator step each for the
    /// unconditional and (when the supervised branch is active) conditional
    /// games on current-generation fakes, then one joint update of the
    /// generator and projection heads on the combined branch losses. The
    /// generator forwards twice per iteration, on the unpaired real image
    /// and on the pseudo pair's real-like member.
    #[allow(clippy::too_many_arguments)]
    pub fn train_epoch(
        &mut self,
        real: &ImageFolder,
        anime: &ImageFolder,
        pairs: Option<&PairDataset>,
        t: usize,
        cfg: &TrainConfig,
        perceptual: Option<&dyn PerceptualMetric>,
        metrics: &mut MetricsWriter,
    ) -> Result<Vec<LossReport>> {
        if t == 0 || t > cfg.epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {t} outside 1..={}",
                cfg.epochs
            )));
        }
        if real.is_empty() || anime.is_empty() {
            return Err(Error::Config("empty real or anime dataset".into()));
        }
        let lambda_sup = Self::lambda_sup(cfg, t)?;
        let sup_active = lambda_sup > 0.0;
        let kept_rows = pairs.map(|p| p.kept_rows()).unwrap_or_default();
        if sup_active && kept_rows.is_empty() {
            return Err(Error::Config(
                "supervised branch active but no kept pseudo pairs".into(),
            ));
        }
        let mut rng = epoch_rng(cfg.seed, t);
        let mut order: Vec<usize> = (0..real.len()).collect();
        order.shuffle(&mut rng);

        let mut reports = Vec::with_capacity(order.len());
        for (iter, &xi) in order.iter().enumerate() {
            let x = real.get(xi)?;
            let yi = rng.random_range(0..anime.len());
            let y = anime.get(yi)?;
            let pair = if sup_active {
                let pi = rng.random_range(0..kept_rows.len());
                Some(pairs.unwrap().load_pair(&kept_rows[pi])?)
            } else {
                None
            };

            // current-generation fakes for the discriminator updates
            let g_x_plain = self.translate_plain(&x)?;
            let d_u_loss = self.d_u_step(&y, &g_x_plain)?;
            let d_p_loss = match &pair {
                Some(p) => {
                    let g_xp_plain = self.translate_plain(&p.x_p)?;
                    Some(self.d_p_step(p, &g_xp_plain)?)
                }
                None => None,
            };

            // joint generator + heads step
            let mut tape = Tape::new();
            let bind_g = bind_params(&mut tape, &self.gen.params, |_| true);
            let bind_h = bind_params(&mut tape, &self.heads.params, |_| true);
            let bind_du = bind_params(&mut tape, &self.d_u.params, |_| false);
            let unsup = unsupervised_branch_loss(
                &mut tape,
                &self.gen,
                &bind_g,
                &self.heads,
                &bind_h,
                &self.d_u,
                &bind_du,
                &x,
                &y,
                cfg,
                perceptual,
                &mut rng,
            )?;
            let mut total = unsup.total;
            let mut report = unsup.report.clone();
            if let Some(p) = &pair {
                let bind_dp = bind_params(&mut tape, &self.d_p.params, |_| false);
                let sup = supervised_branch_loss(
                    &mut tape,
                    &self.gen,
                    &bind_g,
                    &self.heads,
                    &bind_h,
                    &self.d_p,
                    &bind_dp,
                    p,
                    cfg,
                    &mut rng,
                )?;
                let weighted = tape.scale(sup.total, lambda_sup);
                total = tape.add(total, weighted);
                for (k, v) in &sup.report.terms {
                    report.insert(k, *v);
                }
                report.insert("sup_weighted", tape.scalar_value(weighted));
            }
            report.insert("total", tape.scalar_value(total));
            report.insert("lambda_sup", lambda_sup);
            report.insert("d_u", d_u_loss);
            if let Some(v) = d_p_loss {
                report.insert("d_p", v);
            }
            report.validate_finite()?;
            tape.backward(total);
            let g_grads = collect_grads(&tape, &self.gen.params, &bind_g);
            let h_grads = collect_grads(&tape, &self.heads.params, &bind_h);
            self.opt_g.step(&mut self.gen.params, &g_grads);
            self.opt_h.step(&mut self.heads.params, &h_grads);

            let mut record = report.to_json();
            record["epoch"] = serde_json::json!(t);
            record["iter"] = serde_json::json!(iter);
            metrics.write(&record)?;
            reports.push(report);
        }
        metrics.flush()?;
        self.epoch = t;
        Ok(reports)
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "arch": self.arch.to_json(),
            "epoch": self.epoch,
            "opt_t": {
                "g": self.opt_g.t, "h": self.opt_h.t,
                "du": self.opt_du.t, "dp": self.opt_dp.t,
            },
            "opt_hyper": {
                "lr": self.opt_g.lr, "beta1": self.opt_g.beta1, "beta2": self.opt_g.beta2,
            },
        });
        let mut ck = Checkpoint::new("i2i_trainer", meta);
        ck.add_table("gen", self.gen.params.clone());
        ck.add_table("heads", self.heads.params.clone());
        ck.add_table("d_u", self.d_u.params.clone());
        ck.add_table("d_p", self.d_p.params.clone());
        ck.add_table("opt_g_m", adam_state_table(&self.opt_g.m, &self.gen.params));
        ck.add_table("opt_g_v", adam_state_table(&self.opt_g.v, &self.gen.params));
        ck.add_table("opt_h_m", adam_state_table(&self.opt_h.m, &self.heads.params));
        ck.add_table("opt_h_v", adam_state_table(&self.opt_h.v, &self.heads.params));
        ck.add_table("opt_du_m", adam_state_table(&self.opt_du.m, &self.d_u.params));
        ck.add_table("opt_du_v", adam_state_table(&self.opt_du.v, &self.d_u.params));
        ck.add_table("opt_dp_m", adam_state_table(&self.opt_dp.m, &self.d_p.params));
        ck.add_table("opt_dp_v", adam_state_table(&self.opt_dp.v, &self.d_p.params));
        ck.save(path)
    }

    pub fn load_checkpoint(path: &std::path::Path, cfg: &TrainConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("i2i_trainer")?;
        let arch = I2iArch::from_json(
            ck.meta
                .get("arch")
                .ok_or_else(|| Error::Checkpoint("missing arch header".into()))?,
        )?;
        let epoch = ck.meta["epoch"].as_u64().unwrap_or(0) as usize;
        let lr = ck.meta["opt_hyper"]["lr"].as_f64().unwrap_or(cfg.i2i_lr);
        let b1 = ck.meta["opt_hyper"]["beta1"].as_f64().unwrap_or(cfg.i2i_beta1);
        let b2 = ck.meta["opt_hyper"]["beta2"].as_f64().unwrap_or(cfg.i2i_beta2);
        let mk_opt = |t_key: &str, m_table: &str, v_table: &str| -> Result<Adam> {
            let mut opt = Adam::new(lr, b1, b2);
            opt.t = ck.meta["opt_t"][t_key].as_u64().unwrap_or(0);
            opt.m = table_to_state(ck.table(m_table)?);
            opt.v = table_to_state(ck.table(v_table)?);
            Ok(opt)
        };
        let opt_g = mk_opt("g", "opt_g_m", "opt_g_v")?;
        let opt_h = mk_opt("h", "opt_h_m", "opt_h_v")?;
        let opt_du = mk_opt("du", "opt_du_m", "opt_du_v")?;
        let opt_dp = mk_opt("dp", "opt_dp_m", "opt_dp_v")?;
        let gen = TranslationGenerator {
            arch: arch.clone(),
            params: ck.table("gen")?.clone(),
        };
        let heads = ProjectionHeads {
            arch: arch.clone(),
            params: ck.table("heads")?.clone(),
        };
        let d_u = PatchDiscriminator {
            in_channels: 3,
            base: arch.disc_base,
            params: ck.table("d_u")?.clone(),
        };
        let d_p = PatchDiscriminator {
            in_channels: 6,
            base: arch.disc_base,
            params: ck.table("d_p")?.clone(),
        };
        Ok(Trainer {
            arch,
            gen,
            heads,
            d_u,
            d_p,
            opt_g,
            opt_h,
            opt_du,
            opt_dp,
            epoch,
        })
    }
}

fn adam_state_table(
    state: &std::collections::HashMap<String, Vec<f64>>,
    reference: &Params,
) -> Params {
    let mut out = Params::new();
    for (name, tv) in reference.iter() {
        if let Some(v) = state.get(name) {
            out.insert(
                name,
                crate::nn::TensorValue {
                    shape: tv.shape.clone(),
                    data: v.clone(),
                },
            );
        }
    }
    out
}

fn table_to_state(table: &Params) -> std::collections::HashMap<String, Vec<f64>> {
    table
        .iter()
        .map(|(n, tv)| (n.to_string(), tv.data.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            resolution: 32,
            gen_base_channels: 4,
            disc_base_channels: 4,
            embed_dim: 8,
            patches_per_layer: 4,
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_gen(rng: &mut PipelineRng) -> (TranslationGenerator, ProjectionHeads) {
        let arch = I2iArch::from_config(&tiny_cfg()).unwrap();
        (
            TranslationGenerator::new(arch.clone(), rng),
            ProjectionHeads::new(arch, rng),
        )
    }

    fn test_image(seed: usize, res: usize) -> ImageTensor {
        ImageTensor::from_fn(res, res, |c, y, x| {
            (((c + seed) as f64 * 0.31 + y as f64 * 0.17 - x as f64 * 0.23).sin()) * 0.8
        })
        .unwrap()
    }

    #[test]
    fn schedule_endpoints_and_monotone() {
        let s = EpochSchedule::new(20).unwrap();
        assert_eq!(s.weight(1).unwrap(), 1.0);
        let w20 = s.weight(20).unwrap();
        assert!((w20 - 0.07846).abs() < 1e-4, "{w20}");
        let mut prev = f64::INFINITY;
        for t in 1..=20 {
            let w = s.weight(t).unwrap();
            assert!(w > 0.0 && w < prev);
            prev = w;
        }
        assert!(s.weight(0).is_err());
        assert!(s.weight(21).is_err());
    }

    #[test]
    fn translate_shape_contracts() {
        let mut rng = seeded_rng(200);
        let (gen, _) = tiny_gen(&mut rng);
        let img = test_image(0, 32);
        let out = gen.translate(&img).unwrap();
        assert_eq!(out.shape(), [3, 32, 32]);
        assert!(out.data().iter().all(|v| v.abs() <= 1.0));
        // rectangular input, fully convolutional
        let rect = ImageTensor::from_fn(16, 32, |c, y, x| {
            ((c + y + x) as f64 * 0.05).sin() * 0.5
        })
        .unwrap();
        let out2 = gen.translate(&rect).unwrap();
        assert_eq!(out2.shape(), [3, 16, 32]);
        // determinism
        assert_eq!(gen.translate(&img).unwrap(), out);
        // indivisible resolution
        let bad = ImageTensor::splat(30, 30, 0.0).unwrap();
        match gen.translate(&bad) {
            Err(Error::Shape(_)) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn tap_metadata() {
        assert_eq!(TAP_LAYER_IDS, [0, 4, 8, 12, 16]);
        assert_eq!(TAP_RECEPTIVE_FIELDS, [1, 9, 15, 35, 99]);
    }

    #[test]
    fn extract_features_alignment_and_dims() {
        let mut rng = seeded_rng(201);
        let (gen, heads) = tiny_gen(&mut rng);
        let cfg = tiny_cfg();
        let img = test_image(1, 32);
        let mut tape = Tape::new();
        let bind_g = bind_params(&mut tape, &gen.params, |_| false);
        let bind_h = bind_params(&mut tape, &heads.params, |_| false);
        let x = tape.constant(&img.shape(), img.data().to_vec());
        let f1 = extract_patch_features(
            &mut tape, &gen, &bind_g, &heads, &bind_h, x, 4, &mut rng, None,
        )
        .unwrap();
        assert_eq!(f1.layers.len(), 5);
        for l in &f1.layers {
            assert_eq!(tape.shape(l.features), &[4, cfg.embed_dim]);
            assert_eq!(l.locations.len(), 4);
        }
        // reuse aligns
        let locs = feature_locations(&f1);
        let f2 = extract_patch_features(
            &mut tape, &gen, &bind_g, &heads, &bind_h, x, 0, &mut rng,
            Some(&locs),
        )
        .unwrap();
        for (a, b) in f1.layers.iter().zip(&f2.layers) {
            assert_eq!(a.locations, b.locations);
            assert_eq!(a.layer_id, b.layer_id);
        }
        // single location per layer
        let f3 = extract_patch_features(
            &mut tape, &gen, &bind_g, &heads, &bind_h, x, 1, &mut rng, None,
        )
        .unwrap();
        assert_eq!(f3.layers.len(), 5);
        for l in &f3.layers {
            assert_eq!(tape.shape(l.features)[0], 1);
        }
        // layer-count mismatch on reuse
        let short = locs[..3].to_vec();
        match extract_patch_features(
            &mut tape, &gen, &bind_g, &heads, &bind_h, x, 0, &mut rng,
            Some(&short),
        ) {
            Err(Error::Alignment(_)) => {}
            other => panic!("expected alignment error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn discriminator_arities() {
        let mut rng = seeded_rng(202);
        let d3 = PatchDiscriminator::new(3, 4, &mut rng);
        let d6 = PatchDiscriminator::new(6, 4, &mut rng);
        let mut tape = Tape::new();
        let b3 = bind_params(&mut tape, &d3.params, |_| false);
        let b6 = bind_params(&mut tape, &d6.params, |_| false);
        let x3 = tape.constant(&[3, 32, 32], vec![0.1; 3 * 1024]);
        let x6 = tape.constant(&[6, 32, 32], vec![0.1; 6 * 1024]);
        let s3 = d3.forward(&mut tape, &b3, x3);
        let s6 = d6.forward(&mut tape, &b6, x6);
        assert_eq!(tape.shape(s3)[0], 1);
        assert_eq!(tape.shape(s6)[0], 1);
    }

    fn tiny_pair(seed: usize) -> PseudoPair {
        PseudoPair::new(test_image(seed, 32), test_image(seed + 7, 32), seed as u32).unwrap()
    }

    #[test]
    fn supervised_branch_reports_weighted_sum() {
        let mut rng = seeded_rng(203);
        let (gen, heads) = tiny_gen(&mut rng);
        let d_p = PatchDiscriminator::new(6, 4, &mut rng);
        let cfg = tiny_cfg();
        let pair = tiny_pair(3);
        let mut tape = Tape::new();
        let bind_g = bind_params(&mut tape, &gen.params, |_| true);
        let bind_h = bind_params(&mut tape, &heads.params, |_| true);
        let bind_dp = bind_params(&mut tape, &d_p.params, |_| false);
        let out = supervised_branch_loss(
            &mut tape, &gen, &bind_g, &heads, &bind_h, &d_p, &bind_dp, &pair, &cfg, &mut rng,
        )
        .unwrap();
        let total = out.report.get("sup_total").unwrap();
        let sum = out.report.get("sup_cgan").unwrap() + out.report.get("sup_style").unwrap();
        assert!((total - sum).abs() < 1e-12);
        // alignment invariant: locations identical per layer
        let gf = out.gen_feats.unwrap();
        let rf = out.ref_feats.unwrap();
        for (a, b) in gf.layers.iter().zip(&rf.layers) {
            assert_eq!(a.locations, b.locations);
        }
    }

    #[test]
    fn l1_variant_zero_when_target_equals_translation() {
        let mut rng = seeded_rng(204);
        let (gen, heads) = tiny_gen(&mut rng);
        let d_p = PatchDiscriminator::new(6, 4, &mut rng);
        let mut cfg = tiny_cfg();
        cfg.style_loss_variant = StyleLossVariant::L1;
        let x = test_image(5, 32);
        let y = gen.translate(&x).unwrap(); // target equals G(x_p)
        let pair = PseudoPair::new(x, y, 5).unwrap();
        let mut tape = Tape::new();
        let bind_g = bind_params(&mut tape, &gen.params, |_| true);
        let bind_h = bind_params(&mut tape, &heads.params, |_| true);
        let bind_dp = bind_params(&mut tape, &d_p.params, |_| false);
        let out = supervised_branch_loss(
            &mut tape, &gen, &bind_g, &heads, &bind_h, &d_p, &bind_dp, &pair, &cfg, &mut rng,
        )
        .unwrap();
        assert_eq!(out.report.get("sup_style").unwrap(), 0.0);
    }

    #[test]
    fn lambda_style_zero_leaves_pure_conditional_branch() {
        let mut rng = seeded_rng(205);
        let (gen, heads) = tiny_gen(&mut rng);
        let d_p = PatchDiscriminator::new(6, 4, &mut rng);
        let mut cfg = tiny_cfg();
        cfg.lambda_style = 0.0;
        let pair = tiny_pair(4);
        let mut tape = Tape::new();
        let bind_g = bind_params(&mut tape, &gen.params, |_| true);
        let bind_h = bind_params(&mut tape, &heads.params, |_| true);
        let bind_dp = bind_params(&mut tape, &d_p.params, |_| false);
        let out = supervised_branch_loss(
            &mut tape, &gen, &bind_g, &heads, &bind_h, &d_p, &bind_dp, &pair, &cfg, &mut rng,
        )
        .unwrap();
        assert_eq!(out.report.get("sup_style").unwrap(), 0.0);
        assert_eq!(
            out.report.get("sup_total").unwrap(),
            out.report.get("sup_cgan").unwrap()
        );
    }

    #[test]
    fn unsupervised_branch_weighted_sum_and_zero_lambdas() {
        let mut rng = seeded_rng(206);
        let (gen, heads) = tiny_gen(&mut rng);
        let d_u = PatchDiscriminator::new(3, 4, &mut rng);
        let x = test_image(8, 32);
        let y = test_image(9, 32);
        let cfg = tiny_cfg();
        let mut tape = Tape::new();
        let bind_g = bind_params(&mut tape, &gen.params, |_| true);
        let bind_h = bind_params(&mut tape, &heads.params, |_| true);
        let bind_du = bind_params(&mut tape, &d_u.params, |_| false);
        let out = unsupervised_branch_loss(
            &mut tape, &gen, &bind_g, &heads, &bind_h, &d_u, &bind_du, &x, &y, &cfg, None,
            &mut rng,
        )
        .unwrap();
        let total = out.report.get("unsup_total").unwrap();
        let sum = out.report.get("unsup_gan").unwrap()
            + out.report.get("src").unwrap()
            + out.report.get("hdce").unwrap();
        assert!((total - sum).abs() < 1e-12);

        // zero contrastive weights reduce to the plain adversarial branch
        let mut cfg0 = tiny_cfg();
        cfg0.lambda_src = 0.0;
        cfg0.lambda_hdce = 0.0;
        let mut tape2 = Tape::new();
        let bind_g = bind_params(&mut tape2, &gen.params, |_| true);
        let bind_h = bind_params(&mut tape2, &heads.params, |_| true);
        let bind_du = bind_params(&mut tape2, &d_u.params, |_| false);
        let out0 = unsupervised_branch_loss(
            &mut tape2, &gen, &bind_g, &heads, &bind_h, &d_u, &bind_du, &x, &y, &cfg0, None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out0.report.get("src").unwrap(), 0.0);
        assert_eq!(out0.report.get("hdce").unwrap(), 0.0);
        assert_eq!(
            out0.report.get("unsup_total").unwrap(),
            out0.report.get("unsup_gan").unwrap()
        );
    }

    #[test]
    fn checkpoint_roundtrip_restores_translation_bitwise() {
        let mut rng = seeded_rng(207);
        let cfg = tiny_cfg();
        let trainer = Trainer::new(&cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        trainer.save_checkpoint(&path).unwrap();
        let back = Trainer::load_checkpoint(&path, &cfg).unwrap();
        let img = test_image(11, 32);
        let a = trainer.gen.translate(&img).unwrap();
        let b = back.gen.translate(&img).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(back.epoch, trainer.epoch);
    }
}
