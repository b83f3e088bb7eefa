//! Toy-scale end-to-end training: weighted multi-stage RMSE loss,
//! decoupled-weight-decay adaptive-moment optimizer, step learning-rate
//! schedule, and the sampling-augmented data loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, MasterMaskSpec, TrainMeta};
use crate::net::{ModelConfig, SpaDunParams};
use crate::sampling::{
    gen_mask_cacti, gen_mask_dmd, sample_augment, sample_forward, MaskPattern, MaskStack,
    SamplingConfig, VideoCube,
};
use crate::tensor::{backward, no_grad, DType, Parameter, Tensor};
use crate::unfold::{run_dun, DunConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss needs the last three stage outputs but only {got} are available ({configured} stages configured)")]
    TooFewStages { got: usize, configured: usize },
    #[error("non-finite gradient in parameter {name}; aborting the step")]
    NonFiniteGradient { name: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Sampling(#[from] crate::sampling::SamplingError),
    #[error(transparent)]
    Unfold(#[from] crate::unfold::UnfoldError),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Stage weighting of the training loss: weights apply to stages
/// N, N-1, N-2 in that order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    pub stage_weights: Vec<f64>,
    pub configured_stages: usize,
}

impl LossConfig {
    pub fn for_stages(n: usize) -> LossConfig {
        LossConfig {
            stage_weights: vec![1.0, 0.5, 0.5],
            configured_stages: n,
        }
    }
}

/// Weighted sum of per-stage RMSEs over the last three stage outputs
/// (all stages, truncated weights, when fewer than three are configured).
/// RMSE uses the mean inside the square root so the loss magnitude is
/// comparable across patch sizes.
pub fn loss(stage_outputs: &[Tensor], gt: &VideoCube, cfg: &LossConfig) -> Result<Tensor> {
    if stage_outputs.is_empty() || (cfg.configured_stages >= 3 && stage_outputs.len() < 3) {
        return Err(TrainError::TooFewStages {
            got: stage_outputs.len(),
            configured: cfg.configured_stages,
        });
    }
    let take = cfg.stage_weights.len().min(stage_outputs.len());
    let n = stage_outputs.len();
    let mut total: Option<Tensor> = None;
    for i in 0..take {
        let out = &stage_outputs[n - 1 - i];
        let diff = out.sub(&gt.frames)?;
        let rmse = diff.mul(&diff)?.mean_all()?.sqrt()?;
        let term = rmse.mul_scalar(cfg.stage_weights[i])?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one stage"))
}

/// Adaptive-moment optimizer settings with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub step: u64,
    moments: std::collections::BTreeMap<String, (Tensor, Tensor)>,
}

impl OptimState {
    pub fn new(cfg: OptimConfig) -> OptimState {
        OptimState {
            cfg,
            step: 0,
            moments: Default::default(),
        }
    }

    pub fn moments_snapshot(&self) -> Vec<(String, Tensor, Tensor)> {
        self.moments
            .iter()
            .map(|(n, (m, v))| (n.clone(), m.clone(), v.clone()))
            .collect()
    }

    pub fn restore_moments(&mut self, step: u64, moments: Vec<(String, Tensor, Tensor)>) {
        self.step = step;
        self.moments = moments.into_iter().map(|(n, m, v)| (n, (m, v))).collect();
    }
}

/// One decoupled-weight-decay adaptive-moment update. Weight decay
/// multiplies the weights directly; the gradient path is untouched.
/// A non-finite gradient aborts with the offending parameter named.
pub fn optimizer_step(params: &mut SpaDunParams, state: &mut OptimState) -> Result<()> {
    // Validate all gradients before mutating anything.
    let mut bad: Option<String> = None;
    params.visit(&mut |p: &Parameter| {
        if bad.is_none() {
            if let Some(g) = p.tensor.grad() {
                if !g.all_finite() {
                    bad = Some(p.name.clone());
                }
            }
        }
    });
    if let Some(name) = bad {
        return Err(TrainError::NonFiniteGradient { name });
    }
    state.step += 1;
    let t = state.step;
    let c = state.cfg.clone();
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    let moments = &mut state.moments;
    params.visit_mut(&mut |p: &mut Parameter| {
        let dtype = p.tensor.dtype();
        let n = p.tensor.numel();
        let shape = p.tensor.shape().to_vec();
        let g = p
            .tensor
            .grad()
            .map(|g| g.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let entry = moments
            .entry(p.name.clone())
            .or_insert_with(|| (Tensor::zeros(&shape, dtype), Tensor::zeros(&shape, dtype)));
        let mut m = entry.0.to_f64_vec();
        let mut v = entry.1.to_f64_vec();
        let mut w = p.tensor.to_f64_vec();
        for i in 0..n {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] = w[i] * (1.0 - c.lr * c.weight_decay) - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        let mk = |vals: Vec<f64>| match dtype {
            DType::F32 => Tensor::from_f32(vals.iter().map(|&x| x as f32).collect(), &shape),
            DType::F64 => Tensor::from_f64(vals, &shape),
        };
        entry.0 = mk(m);
        entry.1 = mk(v);
        p.assign(mk(w));
    });
    Ok(())
}

/// Warmup-then-step-decay schedule: `warm_lr` for the warmup epochs, then
/// multiplied by `decay_factor` immediately and again every `decay_every`
/// epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Schedule {
    pub warm_lr: f64,
    pub warm_epochs: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            warm_lr: 1e-3,
            warm_epochs: 1000,
            decay_factor: 0.1,
            decay_every: 300,
        }
    }
}

impl Schedule {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.warm_epochs {
            self.warm_lr
        } else {
            let decays = 1 + (epoch - self.warm_epochs) / self.decay_every.max(1);
            self.warm_lr * self.decay_factor.powi(decays as i32)
        }
    }
}

/// Validation settings: a fixed held-out synthetic clip set evaluated at
/// every seen ratio plus one unseen ratio.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValConfig {
    pub clips: usize,
    pub unseen_ratio: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub val: ValConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampling.validate()?;
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "epochs, steps_per_epoch and batch_size must be >= 1".into(),
            ));
        }
        if self.schedule.warm_lr < 0.0 {
            return Err(TrainError::Config("learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// One held-out evaluation point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValPoint {
    pub cs_ratio: usize,
    pub seen: bool,
    pub psnr_db: f64,
    pub init_psnr_db: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub skipped_samples: usize,
    pub val: Vec<ValPoint>,
}

/// Owns the whole training state; epochs advance it in place, and a
/// checkpoint captures it losslessly at any epoch boundary.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub master: MaskStack,
    pub master_spec: MasterMaskSpec,
    pub params: SpaDunParams,
    pub opt: OptimState,
    pub epoch: usize,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
}

/// Builds the master mask a spec describes.
pub fn build_master_mask(spec: &MasterMaskSpec) -> Result<MaskStack> {
    match spec {
        MasterMaskSpec::Generated {
            pattern,
            cs_ratio,
            height,
            width,
            seed,
            density,
        } => Ok(match pattern {
            MaskPattern::Dmd => gen_mask_dmd(*cs_ratio, *height, *width, *seed, *density),
            MaskPattern::Cacti => gen_mask_cacti(*cs_ratio, *height, *width, *seed),
            MaskPattern::External => {
                return Err(TrainError::Config(
                    "external master masks need a file path spec".into(),
                ))
            }
        }),
        MasterMaskSpec::External { path, .. } => {
            let values = crate::npy::load_tensor(path)
                .map_err(|e| TrainError::Config(format!("loading master mask: {e}")))?;
            Ok(MaskStack::external(values)?)
        }
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, master_spec: MasterMaskSpec) -> Result<Trainer> {
        cfg.validate()?;
        let master = build_master_mask(&master_spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = SpaDunParams::init(&cfg.model, DType::F32, &mut rng)?;
        let opt = OptimState::new(OptimConfig {
            lr: cfg.schedule.lr_at_epoch(0),
            weight_decay: cfg.weight_decay,
            ..OptimConfig::default()
        });
        Ok(Trainer {
            cfg,
            master,
            master_spec,
            params,
            opt,
            epoch: 0,
            global_step: 0,
            rng,
        })
    }

    /// Restores a trainer to the exact state at checkpoint time; continued
    /// training reproduces the original run bit for bit.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        if cfg.model != ckpt.model_config {
            return Err(TrainError::Config(
                "training config model does not match the checkpoint architecture".into(),
            ));
        }
        let master = build_master_mask(&ckpt.train_meta.master)?;
        let params = ckpt.build_model()?;
        let mut opt = OptimState::new(OptimConfig {
            lr: cfg.schedule.lr_at_epoch(ckpt.epoch),
            weight_decay: cfg.weight_decay,
            ..OptimConfig::default()
        });
        if let Some((step, moments)) = &ckpt.optimizer {
            opt.restore_moments(*step, moments.clone());
        } else {
            eprintln!("checkpoint has no optimizer state; starting with fresh moments");
        }
        let rng = match ckpt.rng {
            Some((seed, pos)) => {
                let mut r = ChaCha8Rng::from_seed(seed);
                r.set_word_pos(pos);
                r
            }
            None => ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        Ok(Trainer {
            cfg,
            master,
            master_spec: ckpt.train_meta.master.clone(),
            params,
            opt,
            epoch: ckpt.epoch,
            global_step: ckpt.global_step,
            rng,
        })
    }

    pub fn train_meta(&self) -> TrainMeta {
        TrainMeta {
            master: self.master_spec.clone(),
            ratio_set: self.cfg.sampling.ratio_set.clone(),
            patch: [self.cfg.sampling.patch_h, self.cfg.sampling.patch_w],
            noise_sigma: self.cfg.sampling.noise_sigma,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.cfg.model.clone(),
            train_meta: self.train_meta(),
            params: self.params.flatten(),
            optimizer: Some((self.opt.step, self.opt.moments_snapshot())),
            epoch: self.epoch,
            global_step: self.global_step,
            rng: Some((self.rng.get_seed(), self.rng.get_word_pos())),
        }
    }

    fn dun_config(&self) -> DunConfig {
        DunConfig {
            stages: self.cfg.model.stages,
            pad_length: self.cfg.model.pad_length,
            pad_mode: self.cfg.model.pad_mode,
        }
    }

    /// One optimizer step over a freshly sampled batch. Returns the batch
    /// loss and how many samples were skipped (clip shorter than the drawn
    /// CS ratio).
    pub fn train_step(&mut self, dataset: &[VideoCube]) -> Result<(f64, usize)> {
        if dataset.is_empty() {
            return Err(TrainError::Config("empty training dataset".into()));
        }
        let loss_cfg = LossConfig::for_stages(self.cfg.model.stages);
        let dun = self.dun_config();
        let mut terms: Vec<Tensor> = Vec::with_capacity(self.cfg.batch_size);
        let mut skipped = 0usize;
        for _ in 0..self.cfg.batch_size {
            let clip_idx = self.rng.random_range(0..dataset.len());
            let (mask_crop, _off) =
                sample_augment(&self.master, &self.cfg.sampling, &mut self.rng)?;
            let clip = &dataset[clip_idx];
            let c = mask_crop.cs_ratio();
            let (ph, pw) = (self.cfg.sampling.patch_h, self.cfg.sampling.patch_w);
            if clip.num_frames() < c || clip.height() < ph || clip.width() < pw {
                eprintln!(
                    "skipping clip: {} frames {}x{} cannot supply c'={c} patch {ph}x{pw}",
                    clip.num_frames(),
                    clip.height(),
                    clip.width()
                );
                skipped += 1;
                continue;
            }
            let t0 = self.rng.random_range(0..=clip.num_frames() - c);
            let y0 = self.rng.random_range(0..=clip.height() - ph);
            let x0 = self.rng.random_range(0..=clip.width() - pw);
            let video = clip.crop(t0, c, y0, ph, x0, pw)?;
            let noise_seed = self.rng.random::<u64>();
            let meas = sample_forward(
                &video,
                &mask_crop,
                self.cfg.sampling.noise_sigma,
                noise_seed,
            )?;
            let outs = run_dun(&meas, &mask_crop, &self.params, &dun)?;
            terms.push(loss(&outs, &video, &loss_cfg)?);
        }
        if terms.is_empty() {
            return Err(TrainError::Config(
                "every sample in the batch was skipped; dataset clips are too short".into(),
            ));
        }
        let mut total = terms[0].clone();
        for t in &terms[1..] {
            total = total.add(t)?;
        }
        let batch_loss = total.mul_scalar(1.0 / terms.len() as f64)?;
        let value = batch_loss.scalar()?;
        self.params.zero_grads();
        backward(&batch_loss)?;
        optimizer_step(&mut self.params, &mut self.opt)?;
        self.global_step += 1;
        Ok((value, skipped))
    }

    /// Epoch-mean loss of the current parameters over the training batch
    /// distribution, without updating anything. The RNG is cloned so the
    /// training stream is untouched; use this before the first epoch for
    /// an initialization baseline.
    pub fn eval_epoch_loss(&self, dataset: &[VideoCube]) -> Result<f64> {
        if dataset.is_empty() {
            return Err(TrainError::Config("empty training dataset".into()));
        }
        let loss_cfg = LossConfig::for_stages(self.cfg.model.stages);
        let dun = self.dun_config();
        let mut rng = self.rng.clone();
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..self.cfg.steps_per_epoch {
            for _ in 0..self.cfg.batch_size {
                let clip_idx = rng.random_range(0..dataset.len());
                let (mask_crop, _) = sample_augment(&self.master, &self.cfg.sampling, &mut rng)?;
                let clip = &dataset[clip_idx];
                let c = mask_crop.cs_ratio();
                let (ph, pw) = (self.cfg.sampling.patch_h, self.cfg.sampling.patch_w);
                if clip.num_frames() < c || clip.height() < ph || clip.width() < pw {
                    continue;
                }
                let t0 = rng.random_range(0..=clip.num_frames() - c);
                let y0 = rng.random_range(0..=clip.height() - ph);
                let x0 = rng.random_range(0..=clip.width() - pw);
                let video = clip.crop(t0, c, y0, ph, x0, pw)?;
                let noise_seed = rng.random::<u64>();
                let meas = sample_forward(
                    &video,
                    &mask_crop,
                    self.cfg.sampling.noise_sigma,
                    noise_seed,
                )?;
                let outs = no_grad(|| run_dun(&meas, &mask_crop, &self.params, &dun))?;
                total += loss(&outs, &video, &loss_cfg)?.scalar()?;
                count += 1;
            }
        }
        if count == 0 {
            return Err(TrainError::Config(
                "every sample was skipped during evaluation".into(),
            ));
        }
        Ok(total / count as f64)
    }

    pub fn run_epoch(&mut self, dataset: &[VideoCube]) -> Result<EpochLog> {
        self.opt.cfg.lr = self.cfg.schedule.lr_at_epoch(self.epoch);
        let mut losses = Vec::with_capacity(self.cfg.steps_per_epoch);
        let mut skipped = 0usize;
        for _ in 0..self.cfg.steps_per_epoch {
            let (l, s) = self.train_step(dataset)?;
            losses.push(l);
            skipped += s;
        }
        self.epoch += 1;
        let val = self.validate()?;
        Ok(EpochLog {
            epoch: self.epoch,
            lr: self.opt.cfg.lr,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            skipped_samples: skipped,
            val,
        })
    }

    /// Deterministic validation crop: the top-left corner of the master
    /// mask at the requested ratio.
    pub fn val_mask(&self, c: usize) -> Result<MaskStack> {
        let (ph, pw) = (self.cfg.sampling.patch_h, self.cfg.sampling.patch_w);
        if self.master.cs_ratio() < c {
            return Err(TrainError::Config(format!(
                "master mask has {} frames, cannot evaluate at c={c}",
                self.master.cs_ratio()
            )));
        }
        let values = self
            .master
            .values
            .slice(0, 0, c)?
            .slice(1, 0, ph)?
            .slice(2, 0, pw)?
            .detach();
        Ok(MaskStack {
            values,
            pattern: self.master.pattern,
            seed: None,
        })
    }

    /// Held-out PSNR at every seen ratio plus the configured unseen one.
    pub fn validate(&self) -> Result<Vec<ValPoint>> {
        let mut ratios: Vec<(usize, bool)> = self
            .cfg
            .sampling
            .ratio_set
            .iter()
            .map(|&c| (c, true))
            .collect();
        if let Some(u) = self.cfg.val.unseen_ratio {
            if !self.cfg.sampling.ratio_set.contains(&u) {
                ratios.push((u, false));
            }
        }
        let max_c = ratios.iter().map(|&(c, _)| c).max().unwrap_or(1);
        let clips = crate::synth::synth_dataset(
            crate::synth::SynthKind::MovingSquares,
            self.cfg.val.clips,
            max_c,
            self.cfg.sampling.patch_h,
            self.cfg.sampling.patch_w,
            self.cfg.val.seed,
        );
        let dun = self.dun_config();
        let mut points = Vec::new();
        for (c, seen) in ratios {
            let mask = self.val_mask(c)?;
            let mut db = 0.0;
            let mut init_db = 0.0;
            for clip in &clips {
                let video = clip.crop(0, c, 0, clip.height(), 0, clip.width())?;
                let meas = sample_forward(&video, &mask, 0.0, 0)?;
                let outs = no_grad(|| run_dun(&meas, &mask, &self.params, &dun))?;
                db += crate::metrics::psnr(&video.frames, outs.last().unwrap(), 1.0)
                    .map_err(|e| TrainError::Config(e.to_string()))?;
                let x0 = crate::unfold::init_state(&meas, &mask)?.x;
                init_db += crate::metrics::psnr(&video.frames, &x0, 1.0)
                    .map_err(|e| TrainError::Config(e.to_string()))?;
            }
            let n = clips.len().max(1) as f64;
            points.push(ValPoint {
                cs_ratio: c,
                seen,
                psnr_db: db / n,
                init_psnr_db: init_db / n,
            });
        }
        Ok(points)
    }
}

/// Runs `cfg.epochs` epochs from scratch and returns the trainer plus the
/// per-epoch log.
pub fn train_loop(
    dataset: &[VideoCube],
    master_spec: MasterMaskSpec,
    cfg: TrainConfig,
) -> Result<(Trainer, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(cfg, master_spec)?;
    let mut logs = Vec::with_capacity(trainer.cfg.epochs);
    for _ in 0..trainer.cfg.epochs {
        logs.push(trainer.run_epoch(dataset)?);
    }
    Ok((trainer, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_dataset, SynthKind};

    fn toy_train_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig::toy(),
            sampling: SamplingConfig {
                ratio_set: vec![2, 4],
                patch_h: 16,
                patch_w: 16,
                noise_sigma: 0.0,
            },
            epochs: 1,
            steps_per_epoch: 2,
            batch_size: 2,
            schedule: Schedule {
                warm_lr: 1e-3,
                warm_epochs: 100,
                decay_factor: 0.1,
                decay_every: 50,
            },
            weight_decay: 1e-4,
            seed: 7,
            val: ValConfig {
                clips: 1,
                unseen_ratio: Some(3),
                seed: 99,
            },
        }
    }

    fn toy_master() -> MasterMaskSpec {
        MasterMaskSpec::Generated {
            pattern: MaskPattern::Dmd,
            cs_ratio: 8,
            height: 32,
            width: 32,
            seed: 1,
            density: 0.5,
        }
    }

    #[test]
    fn loss_zero_iff_exact() {
        let gt = VideoCube::new(Tensor::full(&[2, 4, 4], DType::F64, 0.3)).unwrap();
        let outs = vec![gt.frames.clone(), gt.frames.clone(), gt.frames.clone()];
        let cfg = LossConfig::for_stages(3);
        let l = loss(&outs, &gt, &cfg).unwrap().scalar().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn loss_constant_offset_is_weighted_magnitude() {
        let gt = VideoCube::new(Tensor::zeros(&[2, 4, 4], DType::F64)).unwrap();
        let exact = gt.frames.clone();
        let off = Tensor::full(&[2, 4, 4], DType::F64, 0.25);
        // only the final stage is off by 0.25: loss = 1.0 * 0.25
        let outs = vec![exact.clone(), exact.clone(), off];
        let cfg = LossConfig::for_stages(3);
        let l = loss(&outs, &gt, &cfg).unwrap().scalar().unwrap();
        assert!((l - 0.25).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_two_line_oracle() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = VideoCube::new(crate::tensor::rand_uniform(
            &[3, 5, 5],
            DType::F64,
            0.0,
            1.0,
            &mut rng,
        ))
        .unwrap();
        let outs: Vec<Tensor> = (0..4)
            .map(|_| crate::tensor::rand_uniform(&[3, 5, 5], DType::F64, 0.0, 1.0, &mut rng))
            .collect();
        let cfg = LossConfig::for_stages(4);
        let got = loss(&outs, &gt, &cfg).unwrap().scalar().unwrap();
        // independent oracle: explicit mean + sqrt
        let rmse = |a: &Tensor| {
            let d: f64 = a
                .to_f64_vec()
                .iter()
                .zip(gt.frames.to_f64_vec())
                .map(|(&x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / 75.0;
            d.sqrt()
        };
        let expect = rmse(&outs[3]) + 0.5 * rmse(&outs[2]) + 0.5 * rmse(&outs[1]);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn loss_truncates_below_three_stages() {
        let gt = VideoCube::new(Tensor::zeros(&[1, 2, 2], DType::F64)).unwrap();
        let off = Tensor::full(&[1, 2, 2], DType::F64, 0.1);
        let cfg = LossConfig::for_stages(2);
        let l = loss(&[off.clone(), off.clone()], &gt, &cfg)
            .unwrap()
            .scalar()
            .unwrap();
        assert!((l - 0.15).abs() < 1e-12); // 1.0*0.1 + 0.5*0.1
        let cfg3 = LossConfig::for_stages(3);
        assert!(matches!(
            loss(std::slice::from_ref(&off), &gt, &cfg3),
            Err(TrainError::TooFewStages { .. })
        ));
    }

    fn tiny_model(seed: u64) -> SpaDunParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpaDunParams::init(&ModelConfig::toy(), DType::F64, &mut rng).unwrap()
    }

    #[test]
    fn optimizer_zero_grad_zero_decay_is_noop() {
        let mut model = tiny_model(1);
        let before = model.flatten();
        let mut st = OptimState::new(OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        });
        model.visit(&mut |p: &Parameter| {
            p.tensor
                .accumulate_grad(&crate::tensor::Storage::F64(vec![0.0; p.tensor.numel()]));
        });
        optimizer_step(&mut model, &mut st).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.flatten()) {
            assert_eq!(a.to_f64_vec(), b.to_f64_vec());
        }
    }

    #[test]
    fn optimizer_first_step_magnitude_is_lr() {
        // scalar parameter, g = 1: bias-corrected first step moves by ~lr
        let mut model = tiny_model(2);
        let mut st = OptimState::new(OptimConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..OptimConfig::default()
        });
        let mut before = Vec::new();
        model.visit(&mut |p: &Parameter| {
            before.push(p.tensor.to_f64_vec());
            p.tensor
                .accumulate_grad(&crate::tensor::Storage::F64(vec![1.0; p.tensor.numel()]));
        });
        optimizer_step(&mut model, &mut st).unwrap();
        let mut idx = 0;
        model.visit(&mut |p: &Parameter| {
            for (a, b) in before[idx].iter().zip(p.tensor.to_f64_vec()) {
                let delta = a - b;
                assert!(
                    (delta - 0.01).abs() < 1e-9,
                    "first-step delta {delta} should be ~lr"
                );
            }
            idx += 1;
        });
    }

    #[test]
    fn optimizer_decoupled_decay_only() {
        let mut model = tiny_model(3);
        let lr = 0.1;
        let wd = 0.01;
        let before = model.flatten();
        let mut st = OptimState::new(OptimConfig {
            lr,
            weight_decay: wd,
            ..OptimConfig::default()
        });
        model.visit(&mut |p: &Parameter| {
            p.tensor
                .accumulate_grad(&crate::tensor::Storage::F64(vec![0.0; p.tensor.numel()]));
        });
        optimizer_step(&mut model, &mut st).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.flatten()) {
            for (x, y) in a.to_f64_vec().iter().zip(b.to_f64_vec()) {
                assert!((y - x * (1.0 - lr * wd)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn optimizer_rejects_nan_gradient_naming_parameter() {
        let mut model = tiny_model(4);
        let mut st = OptimState::new(OptimConfig::default());
        let mut first = true;
        model.visit(&mut |p: &Parameter| {
            let v = if first { f64::NAN } else { 0.0 };
            first = false;
            p.tensor
                .accumulate_grad(&crate::tensor::Storage::F64(vec![v; p.tensor.numel()]));
        });
        match optimizer_step(&mut model, &mut st) {
            Err(TrainError::NonFiniteGradient { name }) => assert!(!name.is_empty()),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
    }

    #[test]
    fn schedule_warm_then_decay() {
        let s = Schedule {
            warm_lr: 1e-3,
            warm_epochs: 10,
            decay_factor: 0.1,
            decay_every: 3,
        };
        assert_eq!(s.lr_at_epoch(0), 1e-3);
        assert_eq!(s.lr_at_epoch(9), 1e-3);
        assert!((s.lr_at_epoch(10) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at_epoch(12) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at_epoch(13) - 1e-5).abs() < 1e-18);
        assert!(s.lr_at_epoch(100) > 0.0);
    }

    #[test]
    fn zero_lr_epoch_leaves_parameters_unchanged() {
        let mut cfg = toy_train_config();
        cfg.schedule.warm_lr = 0.0;
        cfg.weight_decay = 0.0;
        cfg.steps_per_epoch = 1;
        cfg.batch_size = 1;
        let data = synth_dataset(SynthKind::MovingSquares, 1, 8, 16, 16, 11);
        let mut tr = Trainer::new(cfg, toy_master()).unwrap();
        let before = tr.params.flatten();
        tr.run_epoch(&data).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(tr.params.flatten()) {
            assert_eq!(a.to_f32_vec(), b.to_f32_vec());
        }
    }

    #[test]
    fn short_clips_are_skipped_with_warning() {
        let mut cfg = toy_train_config();
        cfg.sampling.ratio_set = vec![4];
        cfg.steps_per_epoch = 1;
        cfg.batch_size = 1;
        // clips have only 2 frames but c' = 4 is always drawn
        let data = synth_dataset(SynthKind::MovingSquares, 2, 2, 16, 16, 12);
        let mut tr = Trainer::new(cfg, toy_master()).unwrap();
        match tr.train_step(&data) {
            Err(TrainError::Config(msg)) => assert!(msg.contains("skipped")),
            other => panic!("expected all-skipped error, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let data = synth_dataset(SynthKind::MovingSquares, 3, 8, 16, 16, 13);
        let run = |seed: u64| {
            let mut cfg = toy_train_config();
            cfg.seed = seed;
            let (tr, logs) = train_loop(&data, toy_master(), cfg).unwrap();
            (tr.params.flatten(), logs)
        };
        let (p1, l1) = run(5);
        let (p2, l2) = run(5);
        assert_eq!(l1[0].mean_loss, l2[0].mean_loss);
        for ((_, a), (_, b)) in p1.iter().zip(&p2) {
            assert_eq!(a.to_f32_vec(), b.to_f32_vec());
        }
        let (p3, _) = run(6);
        assert!(p1
            .iter()
            .zip(&p3)
            .any(|((_, a), (_, b))| a.to_f32_vec() != b.to_f32_vec()));
    }

    #[test]
    fn resume_reproduces_next_steps_bit_identically() {
        let data = synth_dataset(SynthKind::MovingSquares, 3, 8, 16, 16, 14);
        let cfg = toy_train_config();
        let mut tr = Trainer::new(cfg.clone(), toy_master()).unwrap();
        tr.run_epoch(&data).unwrap();
        let ckpt = tr.checkpoint();

        // continue the original for 10 steps
        let mut direct = Vec::new();
        for _ in 0..10 {
            let (l, _) = tr.train_step(&data).unwrap();
            direct.push(l);
        }

        // reload and repeat
        let mut resumed = Trainer::from_checkpoint(&ckpt, cfg).unwrap();
        let mut replay = Vec::new();
        for _ in 0..10 {
            let (l, _) = resumed.train_step(&data).unwrap();
            replay.push(l);
        }
        assert_eq!(direct, replay, "loss trajectories must match bitwise");
        for ((_, a), (_, b)) in tr.params.flatten().iter().zip(resumed.params.flatten()) {
            assert_eq!(a.to_f32_vec(), b.to_f32_vec());
        }
    }

    #[test]
    fn gradient_flow_covers_nearly_all_parameters() {
        let data = synth_dataset(SynthKind::MovingSquares, 2, 8, 16, 16, 15);
        let cfg = toy_train_config();
        let mut tr = Trainer::new(cfg, toy_master()).unwrap();
        // one forward/backward without the optimizer step
        let loss_cfg = LossConfig::for_stages(tr.cfg.model.stages);
        let (mask, _) = sample_augment(&tr.master, &tr.cfg.sampling, &mut tr.rng).unwrap();
        let video = data[0].crop(0, mask.cs_ratio(), 0, 16, 0, 16).unwrap();
        let meas = sample_forward(&video, &mask, 0.0, 1).unwrap();
        let outs = run_dun(&meas, &mask, &tr.params, &tr.dun_config()).unwrap();
        let l = loss(&outs, &video, &loss_cfg).unwrap();
        tr.params.zero_grads();
        backward(&l).unwrap();
        let mut zero = 0usize;
        let mut total = 0usize;
        tr.params.visit(&mut |p: &Parameter| {
            let g = p.tensor.grad();
            let gv = g.map(|g| g.to_f64_vec()).unwrap_or_default();
            for v in gv {
                total += 1;
                if v == 0.0 {
                    zero += 1;
                }
            }
        });
        let frac = zero as f64 / total as f64;
        assert!(frac < 0.01, "{zero}/{total} parameters have zero gradient");
    }
}
