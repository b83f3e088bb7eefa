//! Command-line surface: mask-gen | simulate | reconstruct | train | eval.
//!
//! Every subcommand also accepts `--config file.json` holding the same
//! keys as its flags (unknown keys rejected); explicit flags override file
//! values. Exit codes: 0 success, 2 config/schema, 3 file IO/format,
//! 4 numerical failure, 1 anything else.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, MasterMaskSpec, TrainMeta};
use crate::classic::{pnp_reconstruct_stages, TvConfig};
use crate::metrics;
use crate::net::{AttnSite, ModelConfig};
use crate::npy;
use crate::sampling::{
    gen_mask_cacti, gen_mask_dmd, sample_forward, MaskPattern, MaskStack, Measurement,
    SamplingConfig, VideoCube,
};
use crate::synth::{self, SynthKind};
use crate::tensor::no_grad;
use crate::train::{Schedule, TrainConfig, ValConfig};
use crate::unfold::{measurement_residuals, run_dun, DunConfig, PadMode};

#[derive(Debug)]
pub enum CliError {
    Schema(String),
    Io(String),
    Numerical(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Schema(m) | CliError::Io(m) | CliError::Numerical(m) | CliError::Other(m) => {
                m
            }
        }
    }
}

impl From<npy::NpyError> for CliError {
    fn from(e: npy::NpyError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        match e {
            checkpoint::CheckpointError::ArchitectureMismatch { .. } => {
                CliError::Schema(e.to_string())
            }
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<crate::train::TrainError> for CliError {
    fn from(e: crate::train::TrainError) -> Self {
        match e {
            crate::train::TrainError::Config(_) => CliError::Schema(e.to_string()),
            crate::train::TrainError::Checkpoint(c) => c.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<crate::sampling::SamplingError> for CliError {
    fn from(e: crate::sampling::SamplingError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<crate::unfold::UnfoldError> for CliError {
    fn from(e: crate::unfold::UnfoldError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<crate::classic::ClassicError> for CliError {
    fn from(e: crate::classic::ClassicError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<crate::metrics::MetricsError> for CliError {
    fn from(e: crate::metrics::MetricsError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<crate::tensor::TensorError> for CliError {
    fn from(e: crate::tensor::TensorError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Parser, Debug)]
#[command(
    name = "spadun",
    about = "Video snapshot compressive sensing: capture simulation and unfolded reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a modulation mask stack and write it as NPY.
    MaskGen(MaskGenArgs),
    /// Simulate the single-exposure capture of a video cube.
    Simulate(SimulateArgs),
    /// Reconstruct frames from a measurement and mask.
    Reconstruct(ReconstructArgs),
    /// Train the unfolded model on synthetic or user-supplied clips.
    Train(TrainArgs),
    /// Sweep a {pattern x CS ratio} grid against a checkpoint.
    Eval(EvalArgs),
}

fn load_config_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Schema(format!("config {}: {e}", path.display())))
}

fn parse_pattern(s: &str) -> Result<MaskPattern> {
    match s.to_ascii_lowercase().as_str() {
        "dmd" => Ok(MaskPattern::Dmd),
        "cacti" => Ok(MaskPattern::Cacti),
        "external" => Ok(MaskPattern::External),
        other => Err(CliError::Schema(format!(
            "unknown pattern {other:?} (dmd | cacti | external)"
        ))),
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Schema(format!("bad integer {p:?} in list {s:?}")))
        })
        .collect()
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", path.display())))
}

fn load_mask(path: &Path, pattern: MaskPattern) -> Result<MaskStack> {
    let values = npy::load_tensor(path)?;
    if values.rank() != 3 {
        return Err(CliError::Schema(format!(
            "mask file {} must hold a [c,h,w] tensor, got {:?}",
            path.display(),
            values.shape()
        )));
    }
    let mut mask = MaskStack::external(values)?;
    mask.pattern = pattern;
    Ok(mask)
}

macro_rules! merge_opt {
    ($cli:expr, $file:expr, $($field:ident),+ $(,)?) => {
        $( if $cli.$field.is_none() { $cli.$field = $file.$field; } )+
    };
}

// ---------------------------------------------------------------- mask-gen

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct MaskGenArgs {
    /// JSON file with these same keys; flags override it.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// dmd | cacti
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long = "cs-ratio")]
    cs_ratio: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Bernoulli density of the random pattern (dmd only).
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_mask_gen(mut a: MaskGenArgs) -> Result<()> {
    if let Some(cfg) = a.config.take() {
        let file: MaskGenArgs = load_config_file(&cfg)?;
        merge_opt!(a, file, pattern, cs_ratio, height, width, density, seed, out);
    }
    let pattern = parse_pattern(a.pattern.as_deref().unwrap_or("dmd"))?;
    let c = a
        .cs_ratio
        .ok_or(CliError::Schema("--cs-ratio is required".into()))?;
    let h = a
        .height
        .ok_or(CliError::Schema("--height is required".into()))?;
    let w = a
        .width
        .ok_or(CliError::Schema("--width is required".into()))?;
    let seed = a.seed.unwrap_or(0);
    let out = a.out.ok_or(CliError::Schema("--out is required".into()))?;
    let mask =
        match pattern {
            MaskPattern::Dmd => gen_mask_dmd(c, h, w, seed, a.density.unwrap_or(0.5)),
            MaskPattern::Cacti => gen_mask_cacti(c, h, w, seed),
            MaskPattern::External => return Err(CliError::Schema(
                "mask-gen produces dmd or cacti patterns; external masks are loaded, not generated"
                    .into(),
            )),
        };
    npy::save_tensor(&out, &mask.values)?;
    println!(
        "wrote {pattern} mask [{c}x{h}x{w}] seed {seed} -> {}",
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- simulate

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SimulateArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// NPY video cube [c,h,w]; alternative to --synth.
    #[arg(long)]
    video: Option<PathBuf>,
    /// moving_squares | moving_bars: synthesize the ground truth instead.
    #[arg(long)]
    synth: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Measurement noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the ground-truth cube here.
    #[arg(long = "gt-out")]
    gt_out: Option<PathBuf>,
}

fn cmd_simulate(mut a: SimulateArgs) -> Result<()> {
    if let Some(cfg) = a.config.take() {
        let file: SimulateArgs = load_config_file(&cfg)?;
        merge_opt!(a, file, video, synth, frames, height, width, mask, sigma, seed, out, gt_out);
    }
    let mask_path = a
        .mask
        .ok_or(CliError::Schema("--mask is required".into()))?;
    let out = a.out.ok_or(CliError::Schema("--out is required".into()))?;
    let mask = load_mask(&mask_path, MaskPattern::External)?;
    let seed = a.seed.unwrap_or(0);
    let video = match (&a.video, &a.synth) {
        (Some(path), None) => VideoCube::new(npy::load_tensor(path)?)?,
        (None, Some(kind)) => {
            let kind: SynthKind = kind.parse().map_err(CliError::Schema)?;
            let frames = a.frames.unwrap_or(mask.cs_ratio());
            let h = a.height.unwrap_or(mask.height());
            let w = a.width.unwrap_or(mask.width());
            synth::synth_dataset(kind, 1, frames, h, w, seed)
                .pop()
                .expect("one clip")
        }
        _ => {
            return Err(CliError::Schema(
                "exactly one of --video or --synth is required".into(),
            ))
        }
    };
    if video.num_frames() != mask.cs_ratio() {
        return Err(CliError::Schema(format!(
            "video has {} frames but the mask compresses {}",
            video.num_frames(),
            mask.cs_ratio()
        )));
    }
    let meas = sample_forward(&video, &mask, a.sigma.unwrap_or(0.0), seed)?;
    npy::save_tensor(&out, &meas.values)?;
    if let Some(gt) = &a.gt_out {
        npy::save_tensor(gt, &video.frames)?;
    }
    println!(
        "captured c={} measurement {}x{} -> {}",
        meas.cs_ratio,
        mask.height(),
        mask.width(),
        out.display()
    );
    Ok(())
}

// ------------------------------------------------------------- reconstruct

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ReconstructArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    meas: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Pattern label for the mask file (metadata only).
    #[arg(long)]
    pattern: Option<String>,
    /// tv | learned
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Unfolded stages (tv prior; learned models fix it at training time).
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long = "pad-length")]
    pad_length: Option<usize>,
    #[arg(long = "tv-weight")]
    tv_weight: Option<f64>,
    #[arg(long = "tv-iters")]
    tv_iters: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Ground truth cube for metrics.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Additionally dump each frame as .npy + .pgm.
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    dump_frames: bool,
}

fn cmd_reconstruct(mut a: ReconstructArgs) -> Result<()> {
    if let Some(cfg) = a.config.take() {
        let file: ReconstructArgs = load_config_file(&cfg)?;
        merge_opt!(
            a, file, meas, mask, pattern, prior, checkpoint, stages, pad_length, tv_weight,
            tv_iters, gamma, gt, out
        );
        a.dump_frames |= file.dump_frames;
    }
    let meas_path = a
        .meas
        .ok_or(CliError::Schema("--meas is required".into()))?;
    let mask_path = a
        .mask
        .ok_or(CliError::Schema("--mask is required".into()))?;
    let out = a.out.ok_or(CliError::Schema("--out is required".into()))?;
    ensure_dir(&out)?;
    let pattern = parse_pattern(a.pattern.as_deref().unwrap_or("external"))?;
    let mask = load_mask(&mask_path, pattern)?;
    let values = npy::load_tensor(&meas_path)?;
    if values.shape() != [mask.height(), mask.width()] {
        return Err(CliError::Schema(format!(
            "measurement {:?} does not match mask spatial size {}x{}",
            values.shape(),
            mask.height(),
            mask.width()
        )));
    }
    let meas = Measurement {
        values,
        cs_ratio: mask.cs_ratio(),
    };

    let start = Instant::now();
    let outputs = match a.prior.as_deref().unwrap_or("tv") {
        "tv" => {
            let defaults = TvConfig::default();
            let cfg = TvConfig {
                tv_weight: a.tv_weight.unwrap_or(defaults.tv_weight),
                inner_iters: a.tv_iters.unwrap_or(defaults.inner_iters),
                stages: a.stages.unwrap_or(defaults.stages),
                gamma: a.gamma.unwrap_or(defaults.gamma),
            };
            let l = a.pad_length.unwrap_or(mask.cs_ratio());
            pnp_reconstruct_stages(&meas, &mask, &cfg, l)?
        }
        "learned" => {
            let ckpt_path = a.checkpoint.ok_or(CliError::Schema(
                "--checkpoint is required with --prior learned".into(),
            ))?;
            let ckpt = checkpoint::load_checkpoint(&ckpt_path)?;
            let model = ckpt.build_model()?;
            let dun = DunConfig {
                stages: model.config.stages,
                pad_length: model.config.pad_length,
                pad_mode: model.config.pad_mode,
            };
            no_grad(|| run_dun(&meas, &mask, &model, &dun))?
        }
        other => {
            return Err(CliError::Schema(format!(
                "unknown prior {other:?} (tv | learned)"
            )))
        }
    };
    let runtime = start.elapsed().as_secs_f64();
    let recon = outputs.last().expect("stages >= 1").detach();
    npy::save_tensor(out.join("recon.npy"), &recon)?;
    if a.dump_frames {
        let (c, h, w) = (mask.cs_ratio(), mask.height(), mask.width());
        for t in 0..c {
            let f = recon.slice(0, t, 1)?.reshape(&[h, w])?;
            npy::save_tensor(out.join(format!("frame_{t:03}.npy")), &f)?;
            npy::save_pgm(out.join(format!("frame_{t:03}.pgm")), &f)?;
        }
    }
    let residuals = measurement_residuals(&outputs, &meas, &mask)?;
    println!(
        "reconstructed c={} in {runtime:.2}s; residual {:.4} -> {:.4} over {} stages",
        meas.cs_ratio,
        residuals.first().unwrap_or(&f64::NAN),
        residuals.last().unwrap_or(&f64::NAN),
        outputs.len()
    );
    if let Some(gt_path) = &a.gt {
        let gt = npy::load_tensor(gt_path)?;
        let psnr = metrics::psnr(&gt, &recon, 1.0)?;
        let ssim = metrics::ssim_video(&gt, &recon)?;
        let report = serde_json::json!({
            "psnr_db": psnr,
            "ssim": ssim,
            "runtime_s": runtime,
            "cs_ratio": meas.cs_ratio,
            "stages": outputs.len(),
            "residuals": residuals,
        });
        std::fs::write(
            out.join("metrics.json"),
            serde_json::to_string_pretty(&report).expect("json"),
        )?;
        println!("PSNR {psnr:.2} dB, SSIM {ssim:.4} vs {}", gt_path.display());
    }
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "steps-per-epoch")]
    steps_per_epoch: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "warm-epochs")]
    warm_epochs: Option<usize>,
    #[arg(long = "decay-every")]
    decay_every: Option<usize>,
    #[arg(long = "weight-decay")]
    weight_decay: Option<f64>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long = "pad-length")]
    pad_length: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Blocks per scale, e.g. 1,1,1
    #[arg(long)]
    blocks: Option<String>,
    /// Training CS ratios, e.g. 2,4
    #[arg(long = "ratio-set")]
    ratio_set: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long = "patch-size")]
    patch_size: Option<usize>,
    /// Master mask pattern (dmd | cacti).
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long = "master-frames")]
    master_frames: Option<usize>,
    #[arg(long = "master-size")]
    master_size: Option<usize>,
    /// Synthetic dataset: clip count.
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long = "clip-frames")]
    clip_frames: Option<usize>,
    /// Directory of .npy video cubes to train on instead of synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Disable the normalized-measurement input channel.
    #[arg(long = "no-meas-prior", default_value_t = false)]
    #[serde(default)]
    no_meas_prior: bool,
    /// Disable the mask guidance branch.
    #[arg(long = "no-mask-prior", default_value_t = false)]
    #[serde(default)]
    no_mask_prior: bool,
    /// Use plain repetition padding instead of reflective.
    #[arg(long = "pad-repeat", default_value_t = false)]
    #[serde(default)]
    pad_repeat: bool,
    /// Share one U-net across stages.
    #[arg(long = "share-weights", default_value_t = false)]
    #[serde(default)]
    share_weights: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_clip_dir(dir: &Path) -> Result<Vec<VideoCube>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "npy"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Schema(format!(
            "no .npy clips found in {}",
            dir.display()
        )));
    }
    let mut clips = Vec::with_capacity(paths.len());
    for p in paths {
        clips.push(VideoCube::new(npy::load_tensor(&p)?)?);
    }
    Ok(clips)
}

/// Assembles the library-level training configuration from the CLI view.
fn train_setup(a: &TrainArgs) -> Result<(TrainConfig, MasterMaskSpec)> {
    let blocks = match a.blocks.as_deref() {
        Some(s) => {
            let v = parse_usize_list(s)?;
            <[usize; 3]>::try_from(v).map_err(|v: Vec<usize>| {
                CliError::Schema(format!("--blocks needs 3 values, got {}", v.len()))
            })?
        }
        None => [1, 1, 1],
    };
    let ratio_set = match a.ratio_set.as_deref() {
        Some(s) => parse_usize_list(s)?,
        None => vec![2, 4],
    };
    let patch = a.patch_size.unwrap_or(32);
    let model = ModelConfig {
        stages: a.stages.unwrap_or(2),
        pad_length: a.pad_length.unwrap_or(4),
        width: a.width.unwrap_or(8),
        blocks,
        expansion: 2,
        use_meas_prior: !a.no_meas_prior,
        use_mask_prior: !a.no_mask_prior,
        share_weights: a.share_weights,
        pad_mode: if a.pad_repeat {
            PadMode::Repeat
        } else {
            PadMode::Reflective
        },
        attn_site: AttnSite::DwOutput,
    };
    let seed = a.seed.unwrap_or(0);
    let pattern = parse_pattern(a.pattern.as_deref().unwrap_or("dmd"))?;
    let max_ratio = *ratio_set.iter().max().unwrap_or(&4);
    let master = MasterMaskSpec::Generated {
        pattern,
        cs_ratio: a.master_frames.unwrap_or(4 * max_ratio),
        height: a.master_size.unwrap_or(4 * patch),
        width: a.master_size.unwrap_or(4 * patch),
        seed,
        density: 0.5,
    };
    let unseen = (2..=max_ratio + 2).find(|c| !ratio_set.contains(c));
    let cfg = TrainConfig {
        model,
        sampling: SamplingConfig {
            ratio_set,
            patch_h: patch,
            patch_w: patch,
            noise_sigma: a.sigma.unwrap_or(0.0),
        },
        epochs: a.epochs.unwrap_or(20),
        steps_per_epoch: a.steps_per_epoch.unwrap_or(10),
        batch_size: a.batch_size.unwrap_or(2),
        schedule: Schedule {
            warm_lr: a.lr.unwrap_or(1e-3),
            warm_epochs: a.warm_epochs.unwrap_or(1000),
            decay_factor: 0.1,
            decay_every: a.decay_every.unwrap_or(300),
        },
        weight_decay: a.weight_decay.unwrap_or(1e-4),
        seed,
        val: ValConfig {
            clips: 2,
            unseen_ratio: unseen,
            seed: seed ^ 0x5eed_ba5e,
        },
    };
    Ok((cfg, master))
}

fn cmd_train(mut a: TrainArgs) -> Result<()> {
    if let Some(cfg) = a.config.take() {
        let file: TrainArgs = load_config_file(&cfg)?;
        merge_opt!(
            a,
            file,
            epochs,
            steps_per_epoch,
            batch_size,
            seed,
            lr,
            warm_epochs,
            decay_every,
            weight_decay,
            stages,
            pad_length,
            width,
            blocks,
            ratio_set,
            sigma,
            patch_size,
            pattern,
            master_frames,
            master_size,
            clips,
            clip_frames,
            data,
            out
        );
        a.no_meas_prior |= file.no_meas_prior;
        a.no_mask_prior |= file.no_mask_prior;
        a.pad_repeat |= file.pad_repeat;
        a.share_weights |= file.share_weights;
    }
    let out = a
        .out
        .clone()
        .ok_or(CliError::Schema("--out is required".into()))?;
    ensure_dir(&out)?;
    let (cfg, master) = train_setup(&a)?;
    let patch = cfg.sampling.patch_h;
    let max_ratio = *cfg.sampling.ratio_set.iter().max().unwrap();
    let seed = cfg.seed;
    let dataset = match &a.data {
        Some(dir) => load_clip_dir(dir)?,
        None => synth::synth_dataset(
            SynthKind::MovingSquares,
            a.clips.unwrap_or(8),
            a.clip_frames.unwrap_or(2 * max_ratio),
            patch,
            patch,
            seed ^ 0xda7a,
        ),
    };

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics_file = std::fs::File::create(&metrics_path)?;
    let mut trainer = crate::train::Trainer::new(cfg, master)?;
    println!(
        "training {} params for {} epochs x {} steps (batch {})",
        trainer.params.count_params(),
        trainer.cfg.epochs,
        trainer.cfg.steps_per_epoch,
        trainer.cfg.batch_size
    );
    for _ in 0..trainer.cfg.epochs {
        let log = trainer.run_epoch(&dataset).map_err(CliError::from)?;
        use std::io::Write;
        writeln!(
            metrics_file,
            "{}",
            serde_json::to_string(&log).expect("log serializes")
        )?;
        let val = log
            .val
            .iter()
            .map(|v| {
                format!(
                    "c={} {} {:.2}dB",
                    v.cs_ratio,
                    if v.seen { "seen" } else { "unseen" },
                    v.psnr_db
                )
            })
            .collect::<Vec<_>>()
            .join(", ");
        println!(
            "epoch {:3} lr {:.1e} loss {:.5} | {val}",
            log.epoch, log.lr, log.mean_loss
        );
    }
    let ckpt_path = out.join("checkpoint.ckpt");
    checkpoint::save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    println!("checkpoint -> {}", ckpt_path.display());
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// CS ratios to sweep, e.g. 2,3,4
    #[arg(long = "cs-ratios")]
    cs_ratios: Option<String>,
    /// Patterns to sweep (default: the checkpoint's training pattern).
    #[arg(long)]
    patterns: Option<String>,
    /// Also evaluate the opposite pattern (dmd <-> cacti), labeled unseen.
    #[arg(long = "pattern-swap", default_value_t = false)]
    #[serde(default)]
    pattern_swap: bool,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    dump_frames: bool,
}

#[derive(Clone, Debug, Serialize)]
struct EvalCell {
    pattern: String,
    cs_ratio: usize,
    setting: String,
    seen: bool,
    psnr_db: f64,
    ssim: f64,
    init_psnr_db: f64,
    runtime_s: f64,
    clips: usize,
}

fn swap_pattern(p: MaskPattern) -> MaskPattern {
    match p {
        MaskPattern::Dmd => MaskPattern::Cacti,
        MaskPattern::Cacti => MaskPattern::Dmd,
        MaskPattern::External => MaskPattern::Dmd,
    }
}

/// Seen/unseen labeling: a pure function of the checkpoint's training
/// metadata and the requested setting.
fn setting_label(meta: &TrainMeta, pattern: MaskPattern, c: usize) -> (String, bool) {
    let pattern_seen = pattern == meta.master.pattern();
    let ratio_seen = meta.ratio_set.contains(&c);
    let label = match (pattern_seen, ratio_seen) {
        (true, true) => "seen",
        (true, false) => "unseen-ratio",
        (false, true) => "unseen-pattern",
        (false, false) => "unseen-both",
    };
    (label.to_string(), pattern_seen && ratio_seen)
}

fn eval_mask_for(
    meta: &TrainMeta,
    pattern: MaskPattern,
    c: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<MaskStack> {
    // The checkpoint's own pattern evaluates against crops of the actual
    // training master whenever it can supply the request.
    if pattern == meta.master.pattern() {
        if let MasterMaskSpec::Generated { .. } = &meta.master {
            let master = crate::train::build_master_mask(&meta.master)?;
            if master.cs_ratio() >= c && master.height() >= h && master.width() >= w {
                let values = master
                    .values
                    .slice(0, 0, c)?
                    .slice(1, 0, h)?
                    .slice(2, 0, w)?
                    .detach();
                return Ok(MaskStack {
                    values,
                    pattern,
                    seed: None,
                });
            }
        }
    }
    Ok(match pattern {
        MaskPattern::Dmd => gen_mask_dmd(c, h, w, seed, 0.5),
        MaskPattern::Cacti => gen_mask_cacti(c, h, w, seed),
        MaskPattern::External => {
            return Err(CliError::Schema(
                "eval sweeps generated patterns; use reconstruct for external masks".into(),
            ))
        }
    })
}

fn cmd_eval(mut a: EvalArgs) -> Result<()> {
    if let Some(cfg) = a.config.take() {
        let file: EvalArgs = load_config_file(&cfg)?;
        merge_opt!(a, file, checkpoint, cs_ratios, patterns, clips, sigma, seed, out);
        a.pattern_swap |= file.pattern_swap;
        a.dump_frames |= file.dump_frames;
    }
    let ckpt_path = a
        .checkpoint
        .ok_or(CliError::Schema("--checkpoint is required".into()))?;
    let out = a.out.ok_or(CliError::Schema("--out is required".into()))?;
    ensure_dir(&out)?;
    let ckpt = checkpoint::load_checkpoint(&ckpt_path)?;
    let model = ckpt.build_model()?;
    let meta = ckpt.train_meta.clone();
    let ratios = match a.cs_ratios.as_deref() {
        Some(s) => parse_usize_list(s)?,
        None => meta.ratio_set.clone(),
    };
    let mut patterns: Vec<MaskPattern> = match a.patterns.as_deref() {
        Some(s) => s
            .split(',')
            .map(|p| parse_pattern(p.trim()))
            .collect::<Result<_>>()?,
        None => vec![meta.master.pattern()],
    };
    if a.pattern_swap {
        let swapped = swap_pattern(meta.master.pattern());
        if !patterns.contains(&swapped) {
            patterns.push(swapped);
        }
    }
    let (h, w) = (meta.patch[0], meta.patch[1]);
    let sigma = a.sigma.unwrap_or(0.0);
    let seed = a.seed.unwrap_or(0);
    let n_clips = a.clips.unwrap_or(4);
    let max_c = *ratios.iter().max().ok_or(CliError::Schema(
        "--cs-ratios must name at least one ratio".into(),
    ))?;
    let clips = synth::synth_dataset(SynthKind::MovingSquares, n_clips, max_c, h, w, seed);

    let grid: Vec<(MaskPattern, usize)> = patterns
        .iter()
        .flat_map(|&p| ratios.iter().map(move |&c| (p, c)))
        .collect();
    let dun = DunConfig {
        stages: model.config.stages,
        pad_length: model.config.pad_length,
        pad_mode: model.config.pad_mode,
    };
    // Cells reconstruct independently over the shared read-only model;
    // every write goes to a per-cell path.
    let cells: Vec<Result<EvalCell>> = grid
        .par_iter()
        .map(|&(pattern, c)| {
            let started = Instant::now();
            let mask = eval_mask_for(&meta, pattern, c, h, w, seed ^ c as u64)?;
            let mut psnr_acc = 0.0;
            let mut ssim_acc = 0.0;
            let mut init_acc = 0.0;
            for (ci, clip) in clips.iter().enumerate() {
                let video = clip.crop(0, c, 0, h, 0, w)?;
                let meas = sample_forward(&video, &mask, sigma, seed ^ ((ci as u64) << 8))?;
                let outs = no_grad(|| run_dun(&meas, &mask, &model, &dun))?;
                let rec = outs.last().expect("stages >= 1");
                psnr_acc += metrics::psnr(&video.frames, rec, 1.0)?;
                ssim_acc += metrics::ssim_video(&video.frames, rec)?;
                let x0 = crate::unfold::init_state(&meas, &mask)?.x;
                init_acc += metrics::psnr(&video.frames, &x0, 1.0)?;
                if a.dump_frames {
                    let cell_dir = out.join(format!("{pattern}_c{c}"));
                    ensure_dir(&cell_dir)?;
                    let rec = rec.detach();
                    npy::save_tensor(cell_dir.join(format!("clip{ci}_recon.npy")), &rec)?;
                    for t in 0..c {
                        let f = rec.slice(0, t, 1)?.reshape(&[h, w])?;
                        npy::save_pgm(cell_dir.join(format!("clip{ci}_frame{t:03}.pgm")), &f)?;
                    }
                }
            }
            let n = clips.len() as f64;
            let (setting, seen) = setting_label(&meta, pattern, c);
            Ok(EvalCell {
                pattern: pattern.to_string(),
                cs_ratio: c,
                setting,
                seen,
                psnr_db: psnr_acc / n,
                ssim: ssim_acc / n,
                init_psnr_db: init_acc / n,
                runtime_s: started.elapsed().as_secs_f64(),
                clips: clips.len(),
            })
        })
        .collect();

    let report_path = out.join("report.jsonl");
    let mut report = std::fs::File::create(&report_path)?;
    println!(
        "{:<8} {:<4} {:<15} {:>9} {:>8} {:>9} {:>8}",
        "pattern", "c", "setting", "PSNR(dB)", "SSIM", "init(dB)", "time(s)"
    );
    for cell in cells {
        let cell = cell?;
        use std::io::Write;
        writeln!(
            report,
            "{}",
            serde_json::to_string(&cell).expect("cell serializes")
        )?;
        println!(
            "{:<8} {:<4} {:<15} {:>9.2} {:>8.4} {:>9.2} {:>8.2}",
            cell.pattern,
            cell.cs_ratio,
            cell.setting,
            cell.psnr_db,
            cell.ssim,
            cell.init_psnr_db,
            cell.runtime_s
        );
    }
    println!("report -> {}", report_path.display());
    Ok(())
}

/// Parses process argv and runs the requested command; returns the exit
/// code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::MaskGen(a) => cmd_mask_gen(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Entry point for tests and examples: run with explicit argv.
pub fn run_with_args<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Schema(e.to_string()))?;
    dispatch(cli.command)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_parsing() {
        assert_eq!(parse_pattern("dmd").unwrap(), MaskPattern::Dmd);
        assert_eq!(parse_pattern("CACTI").unwrap(), MaskPattern::Cacti);
        assert!(parse_pattern("nope").is_err());
    }

    #[test]
    fn usize_list_parsing() {
        assert_eq!(parse_usize_list("2,4, 8").unwrap(), vec![2, 4, 8]);
        assert!(parse_usize_list("2,x").is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(&p, r#"{"pattern": "dmd", "not_a_key": 1}"#).unwrap();
        match load_config_file::<MaskGenArgs>(&p) {
            Err(CliError::Schema(msg)) => assert!(msg.contains("not_a_key")),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn labels_are_pure_functions_of_metadata() {
        let meta = TrainMeta {
            master: MasterMaskSpec::Generated {
                pattern: MaskPattern::Dmd,
                cs_ratio: 8,
                height: 32,
                width: 32,
                seed: 0,
                density: 0.5,
            },
            ratio_set: vec![2, 4],
            patch: [32, 32],
            noise_sigma: 0.0,
        };
        assert_eq!(
            setting_label(&meta, MaskPattern::Dmd, 2),
            ("seen".into(), true)
        );
        assert_eq!(
            setting_label(&meta, MaskPattern::Dmd, 3),
            ("unseen-ratio".into(), false)
        );
        assert_eq!(
            setting_label(&meta, MaskPattern::Cacti, 4),
            ("unseen-pattern".into(), false)
        );
        assert_eq!(
            setting_label(&meta, MaskPattern::Cacti, 5),
            ("unseen-both".into(), false)
        );
    }

    #[test]
    fn exit_codes_are_distinct_per_class() {
        assert_eq!(CliError::Schema("s".into()).exit_code(), 2);
        assert_eq!(CliError::Io("i".into()).exit_code(), 3);
        assert_eq!(CliError::Numerical("n".into()).exit_code(), 4);
        assert_eq!(CliError::Other("o".into()).exit_code(), 1);
    }
}
