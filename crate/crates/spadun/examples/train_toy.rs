//! End-to-end toy training of the unfolded model on synthetic clips, with
//! sampling augmentation over CS ratios {2,4}. Saves a checkpoint usable
//! by `reconstruct_learned` and `eval_grid` (and by the CLI).
//!
//! ```text
//! cargo run --release --example train_toy [outdir] [epochs]
//! ```

use spadun::checkpoint::{save_checkpoint, MasterMaskSpec};
use spadun::net::ModelConfig;
use spadun::sampling::{MaskPattern, SamplingConfig};
use spadun::synth::{synth_dataset, SynthKind};
use spadun::train::{Schedule, TrainConfig, Trainer, ValConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let outdir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/spadun_toy".into());
    let epochs: usize = std::env::args()
        .nth(2)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(10);
    std::fs::create_dir_all(&outdir)?;

    let cfg = TrainConfig {
        model: ModelConfig {
            stages: 2,
            pad_length: 4,
            width: 8,
            blocks: [1, 1, 1],
            ..ModelConfig::toy()
        },
        sampling: SamplingConfig {
            ratio_set: vec![2, 4],
            patch_h: 32,
            patch_w: 32,
            noise_sigma: 0.0,
        },
        epochs,
        steps_per_epoch: 20,
        batch_size: 4,
        schedule: Schedule {
            warm_lr: 2e-3,
            warm_epochs: 1000,
            decay_factor: 0.1,
            decay_every: 300,
        },
        weight_decay: 1e-4,
        seed: 1007,
        val: ValConfig {
            clips: 4,
            unseen_ratio: Some(3),
            seed: 2024,
        },
    };
    let master = MasterMaskSpec::Generated {
        pattern: MaskPattern::Dmd,
        cs_ratio: 16,
        height: 128,
        width: 128,
        seed: 11,
        density: 0.5,
    };
    let data = synth_dataset(SynthKind::MovingSquares, 8, 8, 32, 32, 314159);

    let mut trainer = Trainer::new(cfg, master)?;
    println!(
        "{} learnable parameters; untrained epoch-mean loss {:.4}",
        trainer.params.count_params(),
        trainer.eval_epoch_loss(&data)?
    );
    for _ in 0..epochs {
        let log = trainer.run_epoch(&data)?;
        let val: Vec<String> = log
            .val
            .iter()
            .map(|v| {
                format!(
                    "c={} {} {:.2}dB (init {:.2})",
                    v.cs_ratio,
                    if v.seen { "seen" } else { "unseen" },
                    v.psnr_db,
                    v.init_psnr_db
                )
            })
            .collect();
        println!(
            "epoch {:3}  loss {:.4}  {}",
            log.epoch,
            log.mean_loss,
            val.join("  ")
        );
    }
    let path = format!("{outdir}/checkpoint.ckpt");
    save_checkpoint(&path, &trainer.checkpoint())?;
    println!("checkpoint -> {path}");
    Ok(())
}
