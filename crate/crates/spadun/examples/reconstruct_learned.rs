//! Reconstruction with a trained prior, side by side with the TV baseline
//! on the same measurement. Pass a checkpoint from `train_toy` (or let the
//! example train a quick one itself).
//!
//! ```text
//! cargo run --release --example reconstruct_learned [checkpoint.ckpt]
//! ```

use spadun::checkpoint::load_checkpoint;
use spadun::classic::{pnp_reconstruct, TvConfig};
use spadun::metrics::{psnr, ssim_video};
use spadun::net::SpaDunParams;
use spadun::sampling::sample_forward;
use spadun::synth::{synth_dataset, SynthKind};
use spadun::tensor::no_grad;
use spadun::unfold::{init_state, run_dun, DunConfig};

fn trained_model(
    arg: Option<String>,
) -> Result<(SpaDunParams, spadun::checkpoint::TrainMeta), Box<dyn std::error::Error>> {
    match arg {
        Some(path) => {
            let ckpt = load_checkpoint(&path)?;
            println!(
                "loaded {path} (epoch {}, step {})",
                ckpt.epoch, ckpt.global_step
            );
            let model = ckpt.build_model()?;
            Ok((model, ckpt.train_meta))
        }
        None => {
            println!("no checkpoint given; training a quick toy model first...");
            let dir = tempfile::tempdir()?;
            let out = dir.path().join("toy");
            // reuse the train_toy configuration through the CLI surface
            spadun::cli::run_with_args([
                "spadun",
                "train",
                "--epochs",
                "10",
                "--out",
                out.to_str().unwrap(),
            ])
            .map_err(|e| e.message().to_string())?;
            let ckpt = load_checkpoint(out.join("checkpoint.ckpt"))?;
            let model = ckpt.build_model()?;
            Ok((model, ckpt.train_meta))
        }
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (model, meta) = trained_model(std::env::args().nth(1))?;
    let c = *meta.ratio_set.iter().max().unwrap();
    let (h, w) = (meta.patch[0], meta.patch[1]);

    // A held-out clip the trainer never saw, measured with a fresh mask of
    // the training pattern.
    let clip = synth_dataset(SynthKind::MovingSquares, 1, c, h, w, 987)
        .pop()
        .unwrap();
    let mask = match meta.master.pattern() {
        spadun::sampling::MaskPattern::Cacti => spadun::sampling::gen_mask_cacti(c, h, w, 55),
        _ => spadun::sampling::gen_mask_dmd(c, h, w, 55, 0.5),
    };
    let meas = sample_forward(&clip, &mask, 0.0, 0)?;
    let init_db = psnr(&clip.frames, &init_state(&meas, &mask)?.x, 1.0)?;

    let dun = DunConfig {
        stages: model.config.stages,
        pad_length: model.config.pad_length,
        pad_mode: model.config.pad_mode,
    };
    let outs = no_grad(|| run_dun(&meas, &mask, &model, &dun))?;
    let learned = outs.last().unwrap();

    let tv = pnp_reconstruct(&meas, &mask, &TvConfig::default())?;

    println!("c={c} {h}x{w} reconstruction of a held-out clip:");
    println!("  adjoint init : {init_db:6.2} dB");
    println!(
        "  tv baseline  : {:6.2} dB  (ssim {:.4})",
        psnr(&clip.frames, &tv.frames, 1.0)?,
        ssim_video(&clip.frames, &tv.frames)?
    );
    println!(
        "  learned prior: {:6.2} dB  (ssim {:.4})",
        psnr(&clip.frames, learned, 1.0)?,
        ssim_video(&clip.frames, learned)?
    );
    println!("(the toy checkpoint is a 200-step model; train longer for a fairer fight)");
    Ok(())
}
