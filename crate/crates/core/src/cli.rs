//! Command-line entry point: one binary, one subcommand per pipeline
//! stage. Every subcommand accepts `--config <file>` and `--seed <int>`
//! plus per-field override flags; precedence is flags > config file >
//! built-in defaults. `SCENEPIPE_CONFIG` supplies the config path when
//! `--config` is absent. Exit codes: 0 success, 2 usage error, 1 runtime
//! error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::adapt::{generate_pseudo_dataset, Finetuner, StyleGenerator, SynthArch};
use crate::config::{StyleLossVariant, TrainConfig};
use crate::dataset::{ImageFolder, PairDataset};
use crate::error::{Error, Result};
use crate::eval::{extract_dir_features, extractor_registry, fid, infer_batch};
use crate::i2i::Trainer;
use crate::image::load_image;
use crate::metrics::MetricsWriter;
use crate::priors::{embedder_registry, perceptual_registry, segmenter_registry};
use crate::rng::seeded_rng;

pub const CONFIG_ENV: &str = "SCENEPIPE_CONFIG";

#[derive(Parser, Debug)]
#[command(
    name = "scenepipe",
    version,
    about = "Anime scene stylization pipeline: generator fine-tuning, pair filtering, translation training"
)]
pub struct Cli {
    /// Config file (TOML). Falls back to $SCENEPIPE_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    #[command(subcommand)]
    pub cmd: Command,
}

/// Per-field config overrides, applied on top of the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigOverrides {
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub embedder_provider: Option<String>,
    #[arg(long, global = true)]
    pub perceptual_provider: Option<String>,
    #[arg(long, global = true)]
    pub seg_provider: Option<String>,
    #[arg(long, global = true)]
    pub fid_extractor: Option<String>,
    #[arg(long, global = true)]
    pub lambda_lpips: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_global: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_patch: Option<f64>,
    #[arg(long, global = true)]
    pub finetune_iters: Option<usize>,
    #[arg(long, global = true)]
    pub finetune_lr: Option<f64>,
    #[arg(long, global = true)]
    pub finetune_beta1: Option<f64>,
    #[arg(long, global = true)]
    pub finetune_beta2: Option<f64>,
    #[arg(long, global = true)]
    pub r1_gamma: Option<f64>,
    #[arg(long, global = true)]
    pub patch_count_finetune: Option<usize>,
    #[arg(long, global = true)]
    pub patch_size_finetune: Option<usize>,
    #[arg(long, global = true)]
    pub trainable_blocks: Option<usize>,
    #[arg(long, global = true)]
    pub style_dim: Option<usize>,
    #[arg(long, global = true)]
    pub synth_blocks: Option<usize>,
    #[arg(long, global = true)]
    pub mapping_layers: Option<usize>,
    #[arg(long, global = true)]
    pub synth_channel_base: Option<usize>,
    #[arg(long, global = true)]
    pub synth_channel_max: Option<usize>,
    #[arg(long, global = true)]
    pub disc_base_channels: Option<usize>,
    #[arg(long, global = true)]
    pub truncation: Option<f64>,
    #[arg(long, global = true)]
    pub n_pairs: Option<usize>,
    #[arg(long, global = true)]
    pub bce_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_style: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_src: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_hdce: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_content: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub patches_per_layer: Option<usize>,
    /// Comma-separated encoder tap ids.
    #[arg(long, global = true, value_delimiter = ',')]
    pub feature_layer_ids: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub embed_dim: Option<usize>,
    #[arg(long, global = true)]
    pub gen_base_channels: Option<usize>,
    #[arg(long, global = true)]
    pub i2i_lr: Option<f64>,
    #[arg(long, global = true)]
    pub i2i_beta1: Option<f64>,
    #[arg(long, global = true)]
    pub i2i_beta2: Option<f64>,
    #[arg(long, global = true)]
    pub nce_temperature: Option<f64>,
    #[arg(long, global = true)]
    pub hdce_hardness: Option<f64>,
    /// "style-patch-nce" or "l1".
    #[arg(long, global = true)]
    pub style_loss_variant: Option<String>,
    /// Fixed supervised weight; 0 disables the supervised branch.
    #[arg(long, global = true)]
    pub lambda_sup_override: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fine-tune the target generator on an anime image folder.
    FinetuneGen {
        #[arg(long)]
        anime_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Source generator checkpoint; a fresh seeded generator otherwise.
        #[arg(long)]
        source_ckpt: Option<PathBuf>,
    },
    /// Sample pseudo pairs from a source/target generator pair.
    GenPairs {
        #[arg(long)]
        source_ckpt: PathBuf,
        #[arg(long)]
        target_ckpt: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score and flag pseudo pairs by segmentation consistency/abundance.
    FilterPairs {
        #[arg(long)]
        pairs_dir: PathBuf,
        /// Consistency threshold; overrides the config's bce_threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train the translation model on real/anime/pair datasets.
    Train {
        #[arg(long)]
        real_dir: PathBuf,
        #[arg(long)]
        anime_dir: PathBuf,
        /// Pseudo-pair dataset; optional when the supervised branch is off.
        #[arg(long)]
        pairs_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Resume from a trainer checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate every image in a directory (frames translate one by one).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        in_dir: PathBuf,
        #[arg(long = "out")]
        out_dir: PathBuf,
        /// Resize inputs to a square resolution before translating.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Fréchet distance between deep features of two image directories.
    EvalFid {
        #[arg(long)]
        set_a: PathBuf,
        #[arg(long)]
        set_b: PathBuf,
        /// Feature extractor provider.
        #[arg(long)]
        extractor: Option<String>,
    },
    /// Mean segmentation consistency of outputs against references.
    EvalBce {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Print the fully resolved configuration.
    ShowConfig,
}

/// Builds the effective config: defaults, then file, then field overrides,
/// then the seed flag.
pub fn resolve_config(
    config_path: Option<&Path>,
    seed: Option<u64>,
    ov: &ConfigOverrides,
) -> Result<TrainConfig> {
    let mut cfg = match config_path {
        Some(p) => TrainConfig::load(p)?,
        None => match std::env::var_os(CONFIG_ENV) {
            Some(p) => TrainConfig::load(Path::new(&p))?,
            None => TrainConfig::default(),
        },
    };
    macro_rules! apply {
        ($($field:ident),* $(,)?) => {
            $(if let Some(v) = ov.$field.clone() { cfg.$field = v; })*
        };
    }
    apply!(
        resolution,
        batch_size,
        embedder_provider,
        perceptual_provider,
        seg_provider,
        fid_extractor,
        lambda_lpips,
        lambda_global,
        lambda_patch,
        finetune_iters,
        finetune_lr,
        finetune_beta1,
        finetune_beta2,
        r1_gamma,
        patch_count_finetune,
        patch_size_finetune,
        trainable_blocks,
        style_dim,
        synth_blocks,
        mapping_layers,
        synth_channel_base,
        synth_channel_max,
        disc_base_channels,
        truncation,
        n_pairs,
        bce_threshold,
        lambda_style,
        lambda_src,
        lambda_hdce,
        lambda_content,
        epochs,
        patches_per_layer,
        feature_layer_ids,
        embed_dim,
        gen_base_channels,
        i2i_lr,
        i2i_beta1,
        i2i_beta2,
        nce_temperature,
        hdce_hardness,
    );
    if let Some(v) = &ov.style_loss_variant {
        cfg.style_loss_variant = match v.as_str() {
            "style-patch-nce" => StyleLossVariant::StylePatchNce,
            "l1" => StyleLossVariant::L1,
            other => {
                return Err(Error::Config(format!(
                    "unknown style loss variant {other:?} (style-patch-nce | l1)"
                )))
            }
        };
    }
    if let Some(v) = ov.lambda_sup_override {
        cfg.lambda_sup_override = Some(v);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Fine-tunes a target generator and writes `g_s.ckpt`, `g_t.ckpt`,
/// `d.ckpt`, and `finetune_metrics.jsonl` into `out_dir`.
pub fn cmd_finetune_gen(
    cfg: &TrainConfig,
    anime_dir: &Path,
    out_dir: &Path,
    source_ckpt: Option<&Path>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut g_s = match source_ckpt {
        Some(p) => StyleGenerator::load_checkpoint(p)?,
        None => StyleGenerator::new(SynthArch::from_config(cfg), &mut rng),
    };
    let anime = ImageFolder::open(anime_dir, g_s.resolution())?;
    if anime.is_empty() {
        return Err(Error::Config(format!(
            "no images found in {}",
            anime_dir.display()
        )));
    }
    let embedder = embedder_registry(&cfg.embedder_provider)?;
    let perceptual = perceptual_registry(&cfg.perceptual_provider)?;
    let mut ft = Finetuner::new(&g_s, cfg, &mut rng)?;
    let mut metrics = MetricsWriter::to_file(&out_dir.join("finetune_metrics.jsonl"))?;
    for iter in 0..cfg.finetune_iters {
        let batch: Vec<_> = (0..cfg.batch_size)
            .map(|_| anime.get(rng.random_range(0..anime.len())))
            .collect::<Result<_>>()?;
        let report = ft.step(&g_s, &batch, cfg, embedder.as_ref(), perceptual.as_ref(), &mut rng)?;
        let mut record = report.to_json();
        record["iter"] = serde_json::json!(iter);
        metrics.write(&record)?;
    }
    metrics.flush()?;
    g_s.save_checkpoint(&out_dir.join("g_s.ckpt"))?;
    ft.g_t.save_checkpoint(&out_dir.join("g_t.ckpt"))?;
    ft.disc.save_checkpoint(&out_dir.join("d.ckpt"))?;
    Ok(())
}

/// Samples `cfg.n_pairs` pseudo pairs into `out_dir`.
pub fn cmd_gen_pairs(
    cfg: &TrainConfig,
    source_ckpt: &Path,
    target_ckpt: &Path,
    out_dir: &Path,
) -> Result<usize> {
    let g_s = StyleGenerator::load_checkpoint(source_ckpt)?;
    let g_t = StyleGenerator::load_checkpoint(target_ckpt)?;
    let mut rng = seeded_rng(cfg.seed);
    let manifest =
        generate_pseudo_dataset(&g_s, &g_t, cfg.n_pairs, cfg.truncation, out_dir, &mut rng)?;
    Ok(manifest.rows.len())
}

/// Runs selection over a pair dataset; returns (kept, total).
pub fn cmd_filter_pairs(cfg: &TrainConfig, pairs_dir: &Path) -> Result<(usize, usize)> {
    let seg = segmenter_registry(&cfg.seg_provider)?;
    let manifest = crate::select::filter_dataset(pairs_dir, seg.as_ref(), cfg.bce_threshold)?;
    let kept = manifest
        .rows
        .iter()
        .filter(|r| r.kept == Some(true))
        .count();
    Ok((kept, manifest.rows.len()))
}

/// Trains the translation model; writes `i2i.ckpt` (updated per epoch) and
/// `metrics.jsonl` into `out_dir`.
pub fn cmd_train(
    cfg: &TrainConfig,
    real_dir: &Path,
    anime_dir: &Path,
    pairs_dir: Option<&Path>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let real = ImageFolder::open(real_dir, cfg.resolution)?;
    let anime = ImageFolder::open(anime_dir, cfg.resolution)?;
    let pairs = match pairs_dir {
        Some(p) => Some(PairDataset::open(p)?),
        None => None,
    };
    let perceptual = if cfg.lambda_content > 0.0 {
        Some(perceptual_registry(&cfg.perceptual_provider)?)
    } else {
        None
    };
    let mut rng = seeded_rng(cfg.seed);
    let mut trainer = match resume {
        Some(p) => Trainer::load_checkpoint(p, cfg)?,
        None => Trainer::new(cfg, &mut rng)?,
    };
    let mut metrics = MetricsWriter::to_file(&out_dir.join("metrics.jsonl"))?;
    let ckpt_path = out_dir.join("i2i.ckpt");
    for t in (trainer.epoch + 1)..=cfg.epochs {
        trainer.train_epoch(
            &real,
            &anime,
            pairs.as_ref(),
            t,
            cfg,
            perceptual.as_deref().map(|p| p as _),
            &mut metrics,
        )?;
        trainer.save_checkpoint(&ckpt_path)?;
    }
    Ok(())
}

pub fn cmd_eval_fid(
    cfg: &TrainConfig,
    set_a: &Path,
    set_b: &Path,
    extractor: Option<&str>,
) -> Result<f64> {
    let name = extractor.unwrap_or(&cfg.fid_extractor);
    let ext = extractor_registry(name)?;
    let fa = extract_dir_features(set_a, ext.as_ref())?;
    let fb = extract_dir_features(set_b, ext.as_ref())?;
    fid(&fa, &fb)
}

pub fn cmd_eval_bce(cfg: &TrainConfig, outputs: &Path, references: &Path) -> Result<f64> {
    let seg = segmenter_registry(&cfg.seg_provider)?;
    let out_folder = ImageFolder::open(outputs, cfg.resolution)?;
    let ref_folder = ImageFolder::open(references, cfg.resolution)?;
    if out_folder.len() != ref_folder.len() {
        return Err(Error::InvalidArgument(format!(
            "set sizes differ: {} outputs vs {} references",
            out_folder.len(),
            ref_folder.len()
        )));
    }
    let outs: Vec<_> = out_folder
        .paths
        .iter()
        .map(|p| load_image(p, cfg.resolution))
        .collect::<Result<_>>()?;
    let refs: Vec<_> = ref_folder
        .paths
        .iter()
        .map(|p| load_image(p, cfg.resolution))
        .collect::<Result<_>>()?;
    crate::eval::bce_metric(&outs, &refs, seg.as_ref())
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(cli.config.as_deref(), cli.seed, &cli.overrides)?;
    // every run logs its fully resolved configuration
    eprintln!("# resolved configuration\n{}", cfg.to_toml()?);
    match cli.cmd {
        Command::FinetuneGen {
            anime_dir,
            out_dir,
            source_ckpt,
        } => cmd_finetune_gen(&cfg, &anime_dir, &out_dir, source_ckpt.as_deref()),
        Command::GenPairs {
            source_ckpt,
            target_ckpt,
            out_dir,
        } => {
            let n = cmd_gen_pairs(&cfg, &source_ckpt, &target_ckpt, &out_dir)?;
            println!("generated {n} pairs");
            Ok(())
        }
        Command::FilterPairs {
            pairs_dir,
            threshold,
        } => {
            let mut cfg = cfg;
            if let Some(t) = threshold {
                cfg.bce_threshold = t;
            }
            let (kept, total) = cmd_filter_pairs(&cfg, &pairs_dir)?;
            println!("kept {kept} of {total} pairs");
            Ok(())
        }
        Command::Train {
            real_dir,
            anime_dir,
            pairs_dir,
            out_dir,
            resume,
        } => cmd_train(
            &cfg,
            &real_dir,
            &anime_dir,
            pairs_dir.as_deref(),
            &out_dir,
            resume.as_deref(),
        ),
        Command::Infer {
            ckpt,
            in_dir,
            out_dir,
            resolution,
        } => {
            let n = infer_batch(&ckpt, &in_dir, &out_dir, resolution)?;
            println!("translated {n} images");
            Ok(())
        }
        Command::EvalFid {
            set_a,
            set_b,
            extractor,
        } => {
            let v = cmd_eval_fid(&cfg, &set_a, &set_b, extractor.as_deref())?;
            println!("fid {v}");
            Ok(())
        }
        Command::EvalBce {
            outputs,
            references,
        } => {
            let v = cmd_eval_bce(&cfg, &outputs, &references)?;
            println!("bce {v}");
            Ok(())
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}
