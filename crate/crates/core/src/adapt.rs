//! Stage 1: style-based generator, semantic-constrained fine-tuning, and
//! truncated pseudo-pair sampling.
//!
//! A source generator stays frozen while a copy is fine-tuned on the target
//! domain with its early (low-resolution) blocks and the style vectors
//! feeding them frozen, guided by the embedder cosine distance, the
//! perceptual distance, and a patch-wise contrastive term on top of the
//! adversarial objective. Sampling one latent through both generators
//! yields a structure-coupled pseudo pair.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{manifest_path, pair_paths, Manifest, ManifestRow, PAIRS_SUBDIR};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{
    adversarial_loss, finetune_patch_loss, global_semantic_loss, GanKind, GanMode,
};
use crate::metrics::LossReport;
use crate::nn::{bind_params, collect_grads, Adam, Binding, Params, TensorValue};
use crate::priors::{ImageEmbedder, PerceptualMetric};
use crate::rng::{seeded_rng, PipelineRng};
use crate::tape::{Tape, Var};
use crate::types::{LatentCode, PseudoPair};

/// Latents averaged to estimate the truncation center.
const W_AVG_SAMPLES: usize = 10_000;
const W_AVG_SEED: u64 = 0xa46;
const LRELU_SLOPE: f64 = 0.2;

/// Architecture descriptor for the style generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthArch {
    pub style_dim: usize,
    pub n_blocks: usize,
    pub mapping_layers: usize,
    /// Output channels of each resolution block, low to high resolution.
    pub channels: Vec<usize>,
}

impl SynthArch {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let n = cfg.synth_blocks;
        let channels = (0..n)
            .map(|k| {
                (cfg.synth_channel_base << (n - 1 - k)).min(cfg.synth_channel_max)
            })
            .collect();
        SynthArch {
            style_dim: cfg.style_dim,
            n_blocks: n,
            mapping_layers: cfg.mapping_layers,
            channels,
        }
    }

    pub fn resolution(&self) -> usize {
        4 << (self.n_blocks - 1)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "style_dim": self.style_dim,
            "n_blocks": self.n_blocks,
            "mapping_layers": self.mapping_layers,
            "channels": self.channels,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            v.get(k)
                .and_then(|x| x.as_u64())
                .map(|x| x as usize)
                .ok_or_else(|| Error::Checkpoint(format!("arch header missing {k}")))
        };
        let channels = v
            .get("channels")
            .and_then(|x| x.as_array())
            .ok_or_else(|| Error::Checkpoint("arch header missing channels".into()))?
            .iter()
            .map(|x| x.as_u64().unwrap_or(0) as usize)
            .collect();
        Ok(SynthArch {
            style_dim: get("style_dim")?,
            n_blocks: get("n_blocks")?,
            mapping_layers: get("mapping_layers")?,
            channels,
        })
    }
}

/// Which parameters of the target generator receive updates during
/// fine-tuning: the last `trainable_block_count` blocks, minus style
/// affines of blocks below `freeze_injected_styles_upto`. The mapping
/// network and the learned constant are always frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezePlan {
    pub trainable_block_count: usize,
    pub freeze_injected_styles_upto: usize,
}

impl FreezePlan {
    pub fn last_blocks(arch: &SynthArch, trainable: usize) -> Result<Self> {
        if trainable == 0 || trainable > arch.n_blocks {
            return Err(Error::Config(format!(
                "trainable block count must be in 1..={}, got {trainable}",
                arch.n_blocks
            )));
        }
        Ok(FreezePlan {
            trainable_block_count: trainable,
            freeze_injected_styles_upto: arch.n_blocks - trainable,
        })
    }

    /// Decides whether a named generator parameter is trainable.
    pub fn is_trainable(&self, arch: &SynthArch, name: &str) -> bool {
        if name.starts_with("mapping.") || name == "const" {
            return false;
        }
        let Some(block) = parse_block_index(name) else {
            return false;
        };
        if block + self.trainable_block_count < arch.n_blocks {
            return false;
        }
        if name.contains(".affine.") && block < self.freeze_injected_styles_upto {
            return false;
        }
        true
    }
}

fn parse_block_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix('b')?;
    let end = rest.find('.')?;
    rest[..end].parse().ok()
}

/// Style-modulated synthesis generator with an MLP mapping network.
#[derive(Clone, Debug)]
pub struct StyleGenerator {
    pub arch: SynthArch,
    pub params: Params,
    /// Truncation center: running average of mapped latents.
    pub w_avg: Vec<f64>,
}

impl StyleGenerator {
    pub fn new(arch: SynthArch, rng: &mut PipelineRng) -> Self {
        let mut params = Params::new();
        let sd = arch.style_dim;
        let map_std = 1.0 / (sd as f64).sqrt();
        for i in 0..arch.mapping_layers {
            params.insert(
                &format!("mapping.{i}.weight"),
                TensorValue::randn(&[sd, sd], map_std, rng),
            );
            params.insert(&format!("mapping.{i}.bias"), TensorValue::zeros(&[sd]));
        }
        params.insert("const", TensorValue::randn(&[arch.channels[0], 4, 4], 1.0, rng));
        for k in 0..arch.n_blocks {
            let cin = if k == 0 {
                arch.channels[0]
            } else {
                arch.channels[k - 1]
            };
            let cout = arch.channels[k];
            init_mod_conv(&mut params, &format!("b{k}.conv0"), sd, cin, cout, 3, rng);
            init_mod_conv(&mut params, &format!("b{k}.conv1"), sd, cout, cout, 3, rng);
            init_mod_conv(&mut params, &format!("b{k}.torgb"), sd, cout, 3, 1, rng);
        }
        let mut gen = StyleGenerator {
            arch,
            params,
            w_avg: Vec::new(),
        };
        gen.recompute_w_avg();
        gen
    }

    pub fn resolution(&self) -> usize {
        self.arch.resolution()
    }

    /// Mean of `W_AVG_SAMPLES` mapped latents under a fixed internal seed.
    /// Called at construction and again at checkpoint save.
    pub fn recompute_w_avg(&mut self) {
        let sd = self.arch.style_dim;
        let mut rng = seeded_rng(W_AVG_SEED);
        let z: Vec<f64> = (0..W_AVG_SAMPLES * sd)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let w = self.mapping_batch(&z, W_AVG_SAMPLES);
        let mut avg = vec![0.0; sd];
        for row in 0..W_AVG_SAMPLES {
            for j in 0..sd {
                avg[j] += w[row * sd + j];
            }
        }
        for v in &mut avg {
            *v /= W_AVG_SAMPLES as f64;
        }
        self.w_avg = avg;
    }

    /// Maps latent rows `z [n, style_dim]` to intermediate latents,
    /// bypassing the tape (the mapping network is frozen during
    /// fine-tuning, so no gradients are ever needed here).
    pub fn mapping_batch(&self, z: &[f64], n: usize) -> Vec<f64> {
        let sd = self.arch.style_dim;
        debug_assert_eq!(z.len(), n * sd);
        // pixel-norm each latent row
        let mut x = vec![0.0; n * sd];
        for i in 0..n {
            let row = &z[i * sd..(i + 1) * sd];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / sd as f64;
            let inv = 1.0 / (ms + 1e-8).sqrt();
            for j in 0..sd {
                x[i * sd + j] = row[j] * inv;
            }
        }
        for l in 0..self.arch.mapping_layers {
            let w = self.params.get(&format!("mapping.{l}.weight"));
            let b = self.params.get(&format!("mapping.{l}.bias"));
            let mut y = vec![0.0; n * sd];
            for i in 0..n {
                for k in 0..sd {
                    let a = x[i * sd + k];
                    if a != 0.0 {
                        let wrow = &w.data[k * sd..(k + 1) * sd];
                        let yrow = &mut y[i * sd..(i + 1) * sd];
                        for j in 0..sd {
                            yrow[j] += a * wrow[j];
                        }
                    }
                }
                for j in 0..sd {
                    let v = y[i * sd + j] + b.data[j];
                    y[i * sd + j] = if v > 0.0 { v } else { LRELU_SLOPE * v };
                }
            }
            x = y;
        }
        x
    }

    pub fn mapping(&self, z: &[f64]) -> Vec<f64> {
        self.mapping_batch(z, 1)
    }

    /// `w_avg + psi * (w - w_avg)`.
    pub fn truncate(&self, w: &[f64], psi: f64) -> Vec<f64> {
        w.iter()
            .zip(&self.w_avg)
            .map(|(&wi, &ai)| ai + psi * (wi - ai))
            .collect()
    }

    /// Builds the synthesis graph for an already-truncated latent.
    pub fn synthesize_on(&self, tape: &mut Tape, bind: &Binding, w: &[f64]) -> Var {
        let sd = self.arch.style_dim;
        debug_assert_eq!(w.len(), sd);
        let w_row = tape.constant(&[1, sd], w.to_vec());
        let mut x = bind.var("const");
        let mut rgb: Option<Var> = None;
        for k in 0..self.arch.n_blocks {
            if k > 0 {
                x = tape.upsample2(x);
            }
            x = self.mod_conv(tape, bind, x, w_row, &format!("b{k}.conv0"), true, 1);
            x = tape.leaky_relu(x, LRELU_SLOPE);
            x = self.mod_conv(tape, bind, x, w_row, &format!("b{k}.conv1"), true, 1);
            x = tape.leaky_relu(x, LRELU_SLOPE);
            let new_rgb = self.mod_conv(tape, bind, x, w_row, &format!("b{k}.torgb"), false, 0);
            rgb = Some(match rgb {
                None => new_rgb,
                Some(prev) => {
                    let up = tape.upsample2(prev);
                    tape.add(up, new_rgb)
                }
            });
        }
        tape.tanh(rgb.expect("generator has at least one block"))
    }

    fn mod_conv(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        w_row: Var,
        prefix: &str,
        demodulate: bool,
        pad: usize,
    ) -> Var {
        let aw = bind.var(&format!("{prefix}.affine.weight"));
        let ab = bind.var(&format!("{prefix}.affine.bias"));
        let cin = tape.shape(aw)[1];
        let s_row = tape.matmul(w_row, aw);
        let s_row = tape.add_axis1(s_row, ab);
        let s = tape.reshape(s_row, &[cin]);
        let x_mod = tape.scale_axis0(x, s);
        let wt = bind.var(&format!("{prefix}.weight"));
        let (cout, k) = {
            let sh = tape.shape(wt);
            (sh[0], sh[2])
        };
        let mut y = tape.conv2d(x_mod, wt, 1, pad);
        if demodulate {
            let wmod = tape.scale_axis1(wt, s);
            let wsq = tape.sqr(wmod);
            let flat = tape.reshape(wsq, &[cout, cin * k * k]);
            let sums = tape.sum_axis1(flat);
            let sums = tape.add_scalar(sums, 1e-8);
            let norms = tape.sqrt(sums);
            let inv = tape.recip(norms);
            y = tape.scale_axis0(y, inv);
        }
        let b = bind.var(&format!("{prefix}.bias"));
        tape.add_axis0(y, b)
    }

    /// Deterministic image for a latent code, truncation applied.
    pub fn synthesize(&self, code: &LatentCode) -> Result<ImageTensor> {
        if code.dim() != self.arch.style_dim {
            return Err(Error::Shape(format!(
                "latent dim {} does not match style dim {}",
                code.dim(),
                self.arch.style_dim
            )));
        }
        let w = self.truncate(&code.w, code.truncation);
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, &self.params, |_| false);
        let out = self.synthesize_on(&mut tape, &bind, &w);
        let res = self.resolution();
        ImageTensor::from_data(res, res, tape.value(out).to_vec())
    }

    pub fn save_checkpoint(&mut self, path: &std::path::Path) -> Result<()> {
        self.recompute_w_avg();
        let mut ck = Checkpoint::new(
            "style_generator",
            serde_json::json!({ "arch": self.arch.to_json() }),
        );
        ck.add_table("gen", self.params.clone());
        let mut buffers = Params::new();
        buffers.insert(
            "w_avg",
            TensorValue {
                shape: vec![self.w_avg.len()],
                data: self.w_avg.clone(),
            },
        );
        ck.add_table("buffers", buffers);
        ck.save(path)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("style_generator")?;
        let arch = SynthArch::from_json(
            ck.meta
                .get("arch")
                .ok_or_else(|| Error::Checkpoint("missing arch header".into()))?,
        )?;
        let params = ck.table("gen")?.clone();
        let w_avg = ck.table("buffers")?.get("w_avg").data.clone();
        Ok(StyleGenerator {
            arch,
            params,
            w_avg,
        })
    }
}

fn init_mod_conv(
    params: &mut Params,
    prefix: &str,
    style_dim: usize,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut PipelineRng,
) {
    let affine_std = 1.0 / (style_dim as f64).sqrt();
    params.insert(
        &format!("{prefix}.affine.weight"),
        TensorValue::randn(&[style_dim, cin], affine_std, rng),
    );
    params.insert(
        &format!("{prefix}.affine.bias"),
        TensorValue::full(&[cin], 1.0),
    );
    let conv_std = 1.0 / ((cin * k * k) as f64).sqrt();
    params.insert(
        &format!("{prefix}.weight"),
        TensorValue::randn(&[cout, cin, k, k], conv_std, rng),
    );
    params.insert(&format!("{prefix}.bias"), TensorValue::zeros(&[cout]));
}

/// Whole-image discriminator for generator fine-tuning: stride-2 conv
/// stack plus a scalar head. No normalization layers, which keeps the
/// input-gradient path (for the R1 penalty) a plain adjoint chain.
#[derive(Clone, Debug)]
pub struct SynthDiscriminator {
    pub resolution: usize,
    pub channels: Vec<usize>,
    pub params: Params,
}

impl SynthDiscriminator {
    pub fn new(resolution: usize, base: usize, rng: &mut PipelineRng) -> Self {
        assert!(resolution >= 8 && resolution.is_power_of_two());
        let levels = (resolution / 4).trailing_zeros() as usize;
        let channels: Vec<usize> = (0..levels).map(|i| (base << i).min(256)).collect();
        let mut params = Params::new();
        let mut cin = 3;
        for (i, &cout) in channels.iter().enumerate() {
            let std = 1.0 / ((cin * 16) as f64).sqrt();
            params.insert(
                &format!("conv{i}.weight"),
                TensorValue::randn(&[cout, cin, 4, 4], std, rng),
            );
            params.insert(&format!("conv{i}.bias"), TensorValue::zeros(&[cout]));
            cin = cout;
        }
        let head_in = cin * 16;
        params.insert(
            "head.weight",
            TensorValue::randn(&[head_in, 1], 1.0 / (head_in as f64).sqrt(), rng),
        );
        params.insert("head.bias", TensorValue::zeros(&[1]));
        SynthDiscriminator {
            resolution,
            channels,
            params,
        }
    }

    /// Scalar score for one image.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, img: Var) -> Var {
        self.forward_impl(tape, bind, img).0
    }

    /// Score plus the gradient of the score with respect to the input,
    /// expressed as tape operations: activation masks are detached (exact
    /// almost everywhere), weights stay differentiable, so an R1 penalty on
    /// the returned gradient trains the discriminator parameters.
    pub fn forward_with_input_grad(&self, tape: &mut Tape, bind: &Binding, img: Var) -> (Var, Var) {
        let (score, pre_acts) = self.forward_impl(tape, bind, img);
        // backward chain: d score / d activation after the last conv
        let c_last = *self.channels.last().unwrap();
        let head_w = bind.var("head.weight");
        let mut g = tape.reshape(head_w, &[c_last, 4, 4]);
        for i in (0..self.channels.len()).rev() {
            let mask: Vec<f64> = tape
                .value(pre_acts[i])
                .iter()
                .map(|&z| if z > 0.0 { 1.0 } else { LRELU_SLOPE })
                .collect();
            let mshape = tape.shape(pre_acts[i]).to_vec();
            let m = tape.constant(&mshape, mask);
            g = tape.mul(g, m);
            let w = bind.var(&format!("conv{i}.weight"));
            g = tape.conv_transpose2d(g, w, 2, 1);
        }
        (score, g)
    }

    fn forward_impl(&self, tape: &mut Tape, bind: &Binding, img: Var) -> (Var, Vec<Var>) {
        let mut x = img;
        let mut pre_acts = Vec::with_capacity(self.channels.len());
        for i in 0..self.channels.len() {
            let w = bind.var(&format!("conv{i}.weight"));
            let b = bind.var(&format!("conv{i}.bias"));
            let z = tape.conv2d(x, w, 2, 1);
            let z = tape.add_axis0(z, b);
            pre_acts.push(z);
            x = tape.leaky_relu(z, LRELU_SLOPE);
        }
        let c_last = *self.channels.last().unwrap();
        let flat = tape.reshape(x, &[1, c_last * 16]);
        let hw = bind.var("head.weight");
        let hb = bind.var("head.bias");
        let s = tape.matmul(flat, hw);
        let s = tape.add_axis1(s, hb);
        (tape.reshape(s, &[1]), pre_acts)
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let mut ck = Checkpoint::new(
            "synth_discriminator",
            serde_json::json!({ "resolution": self.resolution, "channels": self.channels }),
        );
        ck.add_table("disc", self.params.clone());
        ck.save(path)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("synth_discriminator")?;
        let resolution = ck.meta["resolution"].as_u64().unwrap_or(0) as usize;
        let channels = ck.meta["channels"]
            .as_array()
            .ok_or_else(|| Error::Checkpoint("missing channels".into()))?
            .iter()
            .map(|v| v.as_u64().unwrap_or(0) as usize)
            .collect();
        Ok(SynthDiscriminator {
            resolution,
            channels,
            params: ck.table("disc")?.clone(),
        })
    }
}

/// Draws one latent pair image set from both generators at the same latent.
pub fn sample_pair(
    g_s: &StyleGenerator,
    g_t: &StyleGenerator,
    seed: u32,
    psi: f64,
) -> Result<PseudoPair> {
    if g_s.arch != g_t.arch {
        return Err(Error::Config(format!(
            "generator architectures differ: {:?} vs {:?}",
            g_s.arch, g_t.arch
        )));
    }
    if !(psi > 0.0 && psi <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "truncation must be in (0, 1], got {psi}"
        )));
    }
    let mut rng = seeded_rng(seed as u64);
    let z: Vec<f64> = (0..g_s.arch.style_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let w = g_s.mapping(&z);
    let code = LatentCode::new(w, psi)?;
    let x_p = g_s.synthesize(&code)?;
    let y_p = g_t.synthesize(&code)?;
    PseudoPair::new(x_p, y_p, seed)
}

/// Fine-tuning session: owns the target generator, the discriminator, and
/// their optimizer states.
pub struct Finetuner {
    pub g_t: StyleGenerator,
    pub disc: SynthDiscriminator,
    pub plan: FreezePlan,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub iter: usize,
}

impl Finetuner {
    pub fn new(g_s: &StyleGenerator, cfg: &TrainConfig, rng: &mut PipelineRng) -> Result<Self> {
        let plan = FreezePlan::last_blocks(&g_s.arch, cfg.trainable_blocks)?;
        let disc = SynthDiscriminator::new(g_s.resolution(), cfg.disc_base_channels, rng);
        Ok(Finetuner {
            g_t: g_s.clone(),
            disc,
            plan,
            opt_g: Adam::new(cfg.finetune_lr, cfg.finetune_beta1, cfg.finetune_beta2),
            opt_d: Adam::new(cfg.finetune_lr, cfg.finetune_beta1, cfg.finetune_beta2),
            iter: 0,
        })
    }

    /// One alternating discriminator/generator update. The target batch
    /// supplies real examples; fresh pseudo pairs drive the guidance terms.
    pub fn step(
        &mut self,
        g_s: &StyleGenerator,
        anime_batch: &[ImageTensor],
        cfg: &TrainConfig,
        embedder: &dyn ImageEmbedder,
        perceptual: &dyn PerceptualMetric,
        rng: &mut PipelineRng,
    ) -> Result<LossReport> {
        if anime_batch.is_empty() {
            return Err(Error::Config("empty fine-tuning batch".into()));
        }
        let res = self.g_t.resolution();
        for img in anime_batch {
            if img.height() != res || img.width() != res {
                return Err(Error::Shape(format!(
                    "target image {}x{} does not match generator resolution {res}",
                    img.height(),
                    img.width()
                )));
            }
        }
        let batch = anime_batch.len();
        let mut report = LossReport::new();

        // Fakes for the discriminator phase, synthesized without gradients.
        let d_fakes: Vec<ImageTensor> = (0..batch)
            .map(|_| self.sample_target_image(g_s, rng))
            .collect::<Result<_>>()?;

        // ---- discriminator step ----
        {
            let mut tape = Tape::new();
            let bind = bind_params(&mut tape, &self.disc.params, |_| true);
            let mut real_scores = Vec::with_capacity(batch);
            let mut r1_terms = Vec::with_capacity(batch);
            for img in anime_batch {
                let x = tape.constant(&img.shape(), img.data().to_vec());
                let (s, gx) = self.disc.forward_with_input_grad(&mut tape, &bind, x);
                real_scores.push(s);
                let gsq = tape.sqr(gx);
                r1_terms.push(tape.sum_all(gsq));
            }
            let mut fake_scores = Vec::with_capacity(batch);
            for img in &d_fakes {
                let x = tape.constant(&img.shape(), img.data().to_vec());
                fake_scores.push(self.disc.forward(&mut tape, &bind, x));
            }
            let real = tape.concat_axis0(&real_scores);
            let fake = tape.concat_axis0(&fake_scores);
            let gan = adversarial_loss(
                &mut tape,
                Some(real),
                fake,
                GanMode::Discriminator,
                GanKind::NonSaturating,
            )?;
            let r1_sum = tape.concat_axis0(&r1_terms);
            let r1_mean = tape.mean_all(r1_sum);
            let r1 = tape.scale(r1_mean, cfg.r1_gamma / 2.0);
            let total = tape.add(gan, r1);
            report.insert("d_gan", tape.scalar_value(gan));
            report.insert("d_r1", tape.scalar_value(r1));
            report.insert("d_total", tape.scalar_value(total));
            report.validate_finite()?;
            tape.backward(total);
            let grads = collect_grads(&tape, &self.disc.params, &bind);
            self.opt_d.step(&mut self.disc.params, &grads);
        }

        // ---- generator step ----
        {
            let mut tape = Tape::new();
            let plan = self.plan;
            let arch = self.g_t.arch.clone();
            let bind_g = bind_params(&mut tape, &self.g_t.params, |name| {
                plan.is_trainable(&arch, name)
            });
            let bind_d = bind_params(&mut tape, &self.disc.params, |_| false);
            let mut fake_scores = Vec::with_capacity(batch);
            let mut global_terms = Vec::with_capacity(batch);
            let mut patch_terms = Vec::with_capacity(batch);
            for _ in 0..batch {
                let z: Vec<f64> = (0..arch.style_dim).map(|_| rng.sample(StandardNormal)).collect();
                let w = g_s.mapping(&z);
                let x_p = g_s.synthesize(&LatentCode::new(w.clone(), 1.0)?)?;
                let x_var = tape.constant(&x_p.shape(), x_p.data().to_vec());
                let y_var = self.g_t.synthesize_on(&mut tape, &bind_g, &w);
                fake_scores.push(self.disc.forward(&mut tape, &bind_d, y_var));
                if cfg.lambda_global > 0.0 {
                    global_terms.push(global_semantic_loss(
                        &mut tape,
                        embedder,
                        perceptual,
                        x_var,
                        y_var,
                        cfg.lambda_lpips,
                    )?);
                }
                if cfg.lambda_patch > 0.0 {
                    patch_terms.push(finetune_patch_loss(
                        &mut tape,
                        embedder,
                        x_var,
                        y_var,
                        cfg.patch_count_finetune,
                        cfg.patch_size_finetune,
                        rng,
                    )?);
                }
            }
            let fake = tape.concat_axis0(&fake_scores);
            let gan = adversarial_loss(
                &mut tape,
                None,
                fake,
                GanMode::Generator,
                GanKind::NonSaturating,
            )?;
            let mut total = gan;
            let mut g_global = 0.0;
            if !global_terms.is_empty() {
                let cat = tape.concat_axis0(&global_terms);
                let mean = tape.mean_all(cat);
                let weighted = tape.scale(mean, cfg.lambda_global);
                g_global = tape.scalar_value(weighted);
                total = tape.add(total, weighted);
            }
            let mut g_patch = 0.0;
            if !patch_terms.is_empty() {
                let cat = tape.concat_axis0(&patch_terms);
                let mean = tape.mean_all(cat);
                let weighted = tape.scale(mean, cfg.lambda_patch);
                g_patch = tape.scalar_value(weighted);
                total = tape.add(total, weighted);
            }
            report.insert("g_gan", tape.scalar_value(gan));
            report.insert("g_global", g_global);
            report.insert("g_patch", g_patch);
            report.insert("g_total", tape.scalar_value(total));
            report.validate_finite()?;
            tape.backward(total);
            let grads = collect_grads(&tape, &self.g_t.params, &bind_g);
            self.opt_g.step(&mut self.g_t.params, &grads);
        }

        self.iter += 1;
        Ok(report)
    }

    /// Untracked target-generator sample (fresh latent, no truncation).
    fn sample_target_image(
        &self,
        g_s: &StyleGenerator,
        rng: &mut PipelineRng,
    ) -> Result<ImageTensor> {
        let z: Vec<f64> = (0..self.g_t.arch.style_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let w = g_s.mapping(&z);
        self.g_t.synthesize(&LatentCode::new(w, 1.0)?)
    }
}

/// Writes `n` pseudo pairs and a manifest into `out_dir`, drawing distinct
/// pair seeds from the provided source. Rerunning with the same RNG state
/// reproduces identical files.
pub fn generate_pseudo_dataset(
    g_s: &StyleGenerator,
    g_t: &StyleGenerator,
    n: usize,
    psi: f64,
    out_dir: &std::path::Path,
    rng: &mut PipelineRng,
) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir.join(PAIRS_SUBDIR))?;
    let mut seen = std::collections::HashSet::new();
    let mut seeds = Vec::with_capacity(n);
    while seeds.len() < n {
        let s: u32 = rng.random();
        if seen.insert(s) {
            seeds.push(s);
        }
    }
    let mut rows = Vec::with_capacity(n);
    for &seed in &seeds {
        let pair = sample_pair(g_s, g_t, seed, psi)?;
        let (px, py) = pair_paths(out_dir, seed);
        pair.x_p.save_png(&px)?;
        pair.y_p.save_png(&py)?;
        rows.push(ManifestRow {
            seed,
            bce_score: None,
            kept: None,
        });
    }
    let manifest = Manifest { rows };
    manifest.save(&manifest_path(out_dir))?;
    Ok(manifest)
}
