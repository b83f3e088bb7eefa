//! The learned prior: a three-scale U-net of mixer-style convolution
//! blocks, modulated per scale by attention maps from a lightweight mask
//! guidance branch, instantiated once per unfolded stage.
//!
//! Each convolution block splits into a spatial mixer (depthwise 5x5 over
//! layer-normed features, scaled residual) and a channel mixer (1x1 expand,
//! GELU, 1x1 project, scaled residual). Attention multiplies the depthwise
//! output by default; the alternative site (block input) stays available
//! for ablation.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{rand_uniform, DType, Parameter, Tensor, TensorError};
use crate::unfold::{GammaParam, PadMode, StagePrior, UnfoldError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(
        "spatial size {h}x{w} not divisible by 4; pad the input spatially before reconstruction"
    )]
    SpatialNotDivisible { h: usize, w: usize },
    #[error("model config invalid: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

/// Where the mask-guidance attention multiplies block features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnSite {
    /// Multiply the depthwise-conv output inside the spatial mixer.
    DwOutput,
    /// Multiply the block input before anything else.
    BlockInput,
}

/// Architecture of the whole unfolded model. Serialized into checkpoints;
/// loading verifies it matches.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Unfolded stage count N.
    pub stages: usize,
    /// Prior input length L (frames after padding).
    pub pad_length: usize,
    /// Channel width at the first scale; doubled after each downsample.
    pub width: usize,
    /// Convolution blocks per scale (encoder mirrors into the decoder).
    pub blocks: [usize; 3],
    /// Channel-mixer expansion ratio.
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    /// Append the normalized measurement as a prior-input channel.
    #[serde(default = "default_true")]
    pub use_meas_prior: bool,
    /// Run the mask guidance branch and modulate block features.
    #[serde(default = "default_true")]
    pub use_mask_prior: bool,
    /// One shared U-net across stages instead of independent ones.
    #[serde(default)]
    pub share_weights: bool,
    #[serde(default = "default_pad_mode")]
    pub pad_mode: PadMode,
    #[serde(default = "default_attn_site")]
    pub attn_site: AttnSite,
}

fn default_expansion() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_pad_mode() -> PadMode {
    PadMode::Reflective
}
fn default_attn_site() -> AttnSite {
    AttnSite::DwOutput
}

impl ModelConfig {
    /// Full-scale default: 10 stages, L=24, width 48, blocks [4,6,4].
    pub fn full() -> ModelConfig {
        ModelConfig {
            stages: 10,
            pad_length: 24,
            width: 48,
            blocks: [4, 6, 4],
            expansion: 2,
            use_meas_prior: true,
            use_mask_prior: true,
            share_weights: false,
            pad_mode: PadMode::Reflective,
            attn_site: AttnSite::DwOutput,
        }
    }

    /// Desk-scale configuration used by the toy training runs.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            stages: 2,
            pad_length: 4,
            width: 8,
            blocks: [1, 1, 1],
            expansion: 2,
            use_meas_prior: true,
            use_mask_prior: true,
            share_weights: false,
            pad_mode: PadMode::Reflective,
            attn_site: AttnSite::DwOutput,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.pad_length == 0 || self.width == 0 {
            return Err(NetError::Config(
                "stages, pad_length and width must be >= 1".into(),
            ));
        }
        if self.expansion == 0 {
            return Err(NetError::Config("expansion must be >= 1".into()));
        }
        Ok(())
    }

    /// Channels of the prior input stack (L plus the measurement plane).
    pub fn in_channels(&self) -> usize {
        self.pad_length + usize::from(self.use_meas_prior)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: Parameter,
    pub shift: Parameter,
}

impl LayerNormParams {
    fn init(name: &str, channels: usize, dtype: DType) -> LayerNormParams {
        LayerNormParams {
            gain: Parameter::new(format!("{name}.gain"), Tensor::ones(&[channels], dtype)),
            shift: Parameter::new(format!("{name}.shift"), Tensor::zeros(&[channels], dtype)),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(&self.gain.tensor, &self.shift.tensor, 1e-6)?)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.gain);
        f(&self.shift);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gain);
        f(&mut self.shift);
    }
}

/// Plain convolution layer (weight + bias).
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl ConvParams {
    fn init(
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        dtype: DType,
        rng: &mut ChaCha8Rng,
    ) -> ConvParams {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        ConvParams {
            weight: Parameter::new(
                format!("{name}.weight"),
                rand_uniform(&[cout, cin, k, k], dtype, -bound, bound, rng),
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                rand_uniform(&[cout], dtype, -bound, bound, rng),
            ),
        }
    }

    fn apply(&self, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        Ok(x.conv2d(
            &self.weight.tensor,
            Some(&self.bias.tensor),
            stride,
            padding,
        )?)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// One mixer-style convolution block.
#[derive(Clone, Debug)]
pub struct ConvBlockParams {
    pub ln1: LayerNormParams,
    /// Depthwise 5x5 spatial mixer kernel, no bias.
    pub dw: Parameter,
    pub s1: Parameter,
    pub ln2: LayerNormParams,
    /// 1x1 expansion (C -> r*C), no bias.
    pub pw1: Parameter,
    /// 1x1 projection (r*C -> C), no bias.
    pub pw2: Parameter,
    pub s2: Parameter,
}

impl ConvBlockParams {
    fn init(name: &str, c: usize, r: usize, dtype: DType, rng: &mut ChaCha8Rng) -> ConvBlockParams {
        let dw_bound = 1.0 / 25f64.sqrt();
        let pw1_bound = 1.0 / (c as f64).sqrt();
        let pw2_bound = 1.0 / ((r * c) as f64).sqrt();
        ConvBlockParams {
            ln1: LayerNormParams::init(&format!("{name}.ln1"), c, dtype),
            dw: Parameter::new(
                format!("{name}.dw"),
                rand_uniform(&[c, 1, 5, 5], dtype, -dw_bound, dw_bound, rng),
            ),
            s1: Parameter::new(format!("{name}.s1"), Tensor::full(&[1], dtype, 1e-2)),
            ln2: LayerNormParams::init(&format!("{name}.ln2"), c, dtype),
            pw1: Parameter::new(
                format!("{name}.pw1"),
                rand_uniform(&[r * c, c, 1, 1], dtype, -pw1_bound, pw1_bound, rng),
            ),
            pw2: Parameter::new(
                format!("{name}.pw2"),
                rand_uniform(&[c, r * c, 1, 1], dtype, -pw2_bound, pw2_bound, rng),
            ),
            s2: Parameter::new(format!("{name}.s2"), Tensor::full(&[1], dtype, 1e-2)),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.ln1.visit(f);
        f(&self.dw);
        f(&self.s1);
        self.ln2.visit(f);
        f(&self.pw1);
        f(&self.pw2);
        f(&self.s2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.ln1.visit_mut(f);
        f(&mut self.dw);
        f(&mut self.s1);
        self.ln2.visit_mut(f);
        f(&mut self.pw1);
        f(&mut self.pw2);
        f(&mut self.s2);
    }
}

/// Spatial mixer then channel mixer, each with a learnable-scale residual.
/// `attn` (when given) multiplies per the configured site.
pub fn conv_block_forward(
    x: &Tensor,
    p: &ConvBlockParams,
    attn: Option<&Tensor>,
    site: AttnSite,
) -> Result<Tensor> {
    if let Some(a) = attn {
        if a.shape() != x.shape() {
            return Err(NetError::Config(format!(
                "attention shape {:?} does not match features {:?}",
                a.shape(),
                x.shape()
            )));
        }
    }
    let x = match (attn, site) {
        (Some(a), AttnSite::BlockInput) => x.mul(a)?,
        _ => x.clone(),
    };
    let mut spatial = p.ln1.apply(&x)?.dwconv2d(&p.dw.tensor, 1, 2)?;
    if let (Some(a), AttnSite::DwOutput) = (attn, site) {
        spatial = spatial.mul(a)?;
    }
    let u = x.add(&p.s1.tensor.mul(&spatial)?)?;
    let expanded = p
        .ln2
        .apply(&u)?
        .conv2d(&p.pw1.tensor, None, 1, 0)?
        .gelu()?
        .conv2d(&p.pw2.tensor, None, 1, 0)?;
    Ok(u.add(&p.s2.tensor.mul(&expanded)?)?)
}

/// Mask guidance branch: a few 1x1 and depthwise 5x5 convolutions mapping
/// the padded mask stack to one multiplicative attention map per scale.
#[derive(Clone, Debug)]
pub struct MgmParams {
    pub entry: ConvParams,
    pub dw: Parameter,
    pub exit: ConvParams,
    /// 1x1 channel-doubling convs applied after each avgpool2.
    pub downs: Vec<ConvParams>,
}

impl MgmParams {
    fn init(
        name: &str,
        in_ch: usize,
        width: usize,
        scales: usize,
        dtype: DType,
        rng: &mut ChaCha8Rng,
    ) -> MgmParams {
        let dw_bound = 1.0 / 25f64.sqrt();
        let mut downs = Vec::new();
        let mut w = width;
        for s in 1..scales {
            downs.push(ConvParams::init(
                &format!("{name}.down{s}"),
                2 * w,
                w,
                1,
                dtype,
                rng,
            ));
            w *= 2;
        }
        MgmParams {
            entry: ConvParams::init(&format!("{name}.entry"), width, in_ch, 1, dtype, rng),
            dw: Parameter::new(
                format!("{name}.dw"),
                rand_uniform(&[width, 1, 5, 5], dtype, -dw_bound, dw_bound, rng),
            ),
            exit: ConvParams::init(&format!("{name}.exit"), width, width, 1, dtype, rng),
            downs,
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.entry.visit(f);
        f(&self.dw);
        self.exit.visit(f);
        for d in &self.downs {
            d.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.entry.visit_mut(f);
        f(&mut self.dw);
        self.exit.visit_mut(f);
        for d in &mut self.downs {
            d.visit_mut(f);
        }
    }
}

/// Attention maps for every scale, values strictly inside (0,1). Deeper
/// scales pool and channel-double the pre-sigmoid feature.
pub fn mgm_forward(mbar: &Tensor, p: &MgmParams) -> Result<Vec<Tensor>> {
    let f = p.entry.apply(mbar, 1, 0)?.gelu()?;
    let f = f.dwconv2d(&p.dw.tensor, 1, 2)?;
    let mut pre = p.exit.apply(&f, 1, 0)?;
    let mut maps = vec![pre.sigmoid()?];
    for d in &p.downs {
        pre = d.apply(&pre.avg_pool2()?, 1, 0)?;
        maps.push(pre.sigmoid()?);
    }
    Ok(maps)
}

/// Parameters of one per-stage U-net.
#[derive(Clone, Debug)]
pub struct UNetParams {
    pub stem: ConvParams,
    pub enc0: Vec<ConvBlockParams>,
    pub down0: ConvParams,
    pub enc1: Vec<ConvBlockParams>,
    pub down1: ConvParams,
    pub mid: Vec<ConvBlockParams>,
    pub up1: ConvParams,
    pub fuse1: ConvParams,
    pub dec1: Vec<ConvBlockParams>,
    pub up0: ConvParams,
    pub fuse0: ConvParams,
    pub dec0: Vec<ConvBlockParams>,
    pub head: ConvParams,
    pub mgm: Option<MgmParams>,
    pub attn_site: AttnSite,
}

fn init_blocks(
    name: &str,
    count: usize,
    c: usize,
    r: usize,
    dtype: DType,
    rng: &mut ChaCha8Rng,
) -> Vec<ConvBlockParams> {
    (0..count)
        .map(|i| ConvBlockParams::init(&format!("{name}.block{i}"), c, r, dtype, rng))
        .collect()
}

impl UNetParams {
    fn init(name: &str, cfg: &ModelConfig, dtype: DType, rng: &mut ChaCha8Rng) -> UNetParams {
        let (w0, r, l) = (cfg.width, cfg.expansion, cfg.pad_length);
        let (w1, w2) = (2 * w0, 4 * w0);
        let in_ch = cfg.in_channels();
        UNetParams {
            stem: ConvParams::init(&format!("{name}.stem"), w0, in_ch, 3, dtype, rng),
            enc0: init_blocks(&format!("{name}.enc0"), cfg.blocks[0], w0, r, dtype, rng),
            down0: ConvParams::init(&format!("{name}.down0"), w1, w0, 3, dtype, rng),
            enc1: init_blocks(&format!("{name}.enc1"), cfg.blocks[1], w1, r, dtype, rng),
            down1: ConvParams::init(&format!("{name}.down1"), w2, w1, 3, dtype, rng),
            mid: init_blocks(&format!("{name}.mid"), cfg.blocks[2], w2, r, dtype, rng),
            up1: ConvParams::init(&format!("{name}.up1"), w1, w2, 1, dtype, rng),
            fuse1: ConvParams::init(&format!("{name}.fuse1"), w1, 2 * w1, 1, dtype, rng),
            dec1: init_blocks(&format!("{name}.dec1"), cfg.blocks[1], w1, r, dtype, rng),
            up0: ConvParams::init(&format!("{name}.up0"), w0, w1, 1, dtype, rng),
            fuse0: ConvParams::init(&format!("{name}.fuse0"), w0, 2 * w0, 1, dtype, rng),
            dec0: init_blocks(&format!("{name}.dec0"), cfg.blocks[0], w0, r, dtype, rng),
            head: ConvParams::init(&format!("{name}.head"), l, w0, 3, dtype, rng),
            mgm: cfg
                .use_mask_prior
                .then(|| MgmParams::init(&format!("{name}.mgm"), l + 1, w0, 3, dtype, rng)),
            attn_site: cfg.attn_site,
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.stem.visit(f);
        for b in &self.enc0 {
            b.visit(f);
        }
        self.down0.visit(f);
        for b in &self.enc1 {
            b.visit(f);
        }
        self.down1.visit(f);
        for b in &self.mid {
            b.visit(f);
        }
        self.up1.visit(f);
        self.fuse1.visit(f);
        for b in &self.dec1 {
            b.visit(f);
        }
        self.up0.visit(f);
        self.fuse0.visit(f);
        for b in &self.dec0 {
            b.visit(f);
        }
        self.head.visit(f);
        if let Some(m) = &self.mgm {
            m.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem.visit_mut(f);
        for b in &mut self.enc0 {
            b.visit_mut(f);
        }
        self.down0.visit_mut(f);
        for b in &mut self.enc1 {
            b.visit_mut(f);
        }
        self.down1.visit_mut(f);
        for b in &mut self.mid {
            b.visit_mut(f);
        }
        self.up1.visit_mut(f);
        self.fuse1.visit_mut(f);
        for b in &mut self.dec1 {
            b.visit_mut(f);
        }
        self.up0.visit_mut(f);
        self.fuse0.visit_mut(f);
        for b in &mut self.dec0 {
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
        if let Some(m) = &mut self.mgm {
            m.visit_mut(f);
        }
    }
}

fn run_blocks(
    blocks: &[ConvBlockParams],
    mut x: Tensor,
    attn: Option<&Tensor>,
    site: AttnSite,
) -> Result<Tensor> {
    for b in blocks {
        x = conv_block_forward(&x, b, attn, site)?;
    }
    Ok(x)
}

/// Three-scale encoder/decoder forward pass: stem conv, per-scale blocks
/// with mask-guided modulation, stride-2 downsamples, nearest-up + 1x1
/// upsamples with concat-fused skips, head conv back to `L` channels.
pub fn unet_forward(vbar: &Tensor, mbar: Option<&Tensor>, p: &UNetParams) -> Result<Tensor> {
    let (h, w) = (vbar.shape()[2], vbar.shape()[3]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(NetError::SpatialNotDivisible { h, w });
    }
    let attns = match (mbar, &p.mgm) {
        (Some(m), Some(mp)) => Some(mgm_forward(m, mp)?),
        _ => None,
    };
    let attn = |scale: usize| attns.as_ref().map(|a| &a[scale]);
    let site = p.attn_site;

    let s = p.stem.apply(vbar, 1, 1)?;
    let e0 = run_blocks(&p.enc0, s, attn(0), site)?;
    let d0 = p.down0.apply(&e0, 2, 1)?;
    let e1 = run_blocks(&p.enc1, d0, attn(1), site)?;
    let d1 = p.down1.apply(&e1, 2, 1)?;
    let m = run_blocks(&p.mid, d1, attn(2), site)?;

    let u1 = p.up1.apply(&m.upsample_nearest2()?, 1, 0)?;
    let f1 = p.fuse1.apply(&Tensor::concat(&[&u1, &e1], 1)?, 1, 0)?;
    let x1 = run_blocks(&p.dec1, f1, attn(1), site)?;

    let u0 = p.up0.apply(&x1.upsample_nearest2()?, 1, 0)?;
    let f0 = p.fuse0.apply(&Tensor::concat(&[&u0, &e0], 1)?, 1, 0)?;
    let x0 = run_blocks(&p.dec0, f0, attn(0), site)?;

    p.head.apply(&x0, 1, 1)
}

/// All learnable state of the unfolded model: one U-net per stage (or one
/// shared) plus per-stage penalty coefficients.
#[derive(Clone, Debug)]
pub struct SpaDunParams {
    pub config: ModelConfig,
    pub stages: Vec<UNetParams>,
    pub gammas: Vec<GammaParam>,
}

impl SpaDunParams {
    /// Fresh parameter set. Per-stage U-nets are independent unless
    /// `config.share_weights` is set.
    pub fn init(config: &ModelConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<SpaDunParams> {
        config.validate()?;
        let unet_count = if config.share_weights {
            1
        } else {
            config.stages
        };
        let stages = (0..unet_count)
            .map(|k| {
                let name = if config.share_weights {
                    "shared".to_string()
                } else {
                    format!("stage{k}")
                };
                UNetParams::init(&name, config, dtype, rng)
            })
            .collect();
        let gammas = (0..config.stages)
            .map(|k| GammaParam::with_value(format!("gamma{k}.raw"), 1.0, dtype))
            .collect();
        Ok(SpaDunParams {
            config: config.clone(),
            stages,
            gammas,
        })
    }

    /// U-net parameters used by stage `k` (shared sets alias stage 0).
    pub fn stage_params(&self, k: usize) -> &UNetParams {
        if self.config.share_weights {
            &self.stages[0]
        } else {
            &self.stages[k]
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for s in &self.stages {
            s.visit(f);
        }
        for g in &self.gammas {
            f(&g.raw);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for s in &mut self.stages {
            s.visit_mut(f);
        }
        for g in &mut self.gammas {
            f(&mut g.raw);
        }
    }

    /// Named tensors in deterministic visit order.
    pub fn flatten(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |p: &Parameter| out.push((p.name.clone(), p.tensor.clone())));
        out
    }

    /// Rebuilds the same structure with tensors replaced in visit order
    /// (gradient-check plumbing).
    pub fn with_tensors(&self, tensors: &[Tensor]) -> SpaDunParams {
        let mut clone = self.clone();
        let mut it = tensors.iter();
        clone.visit_mut(&mut |p: &mut Parameter| {
            let t = it.next().expect("tensor count mismatch").clone();
            p.assign(t);
        });
        assert!(it.next().is_none(), "tensor count mismatch");
        clone
    }

    /// Number of learnable scalars.
    pub fn count_params(&self) -> usize {
        let mut n = 0usize;
        self.visit(&mut |p: &Parameter| n += p.tensor.numel());
        n
    }

    pub fn zero_grads(&self) {
        self.visit(&mut |p: &Parameter| p.tensor.zero_grad());
    }
}

impl StagePrior for SpaDunParams {
    fn stage_count(&self) -> Option<usize> {
        Some(self.config.stages)
    }

    fn gamma_value(&self, k: usize) -> Result<Tensor, UnfoldError> {
        Ok(self.gammas[k].value()?)
    }

    fn wants_meas_channel(&self) -> bool {
        self.config.use_meas_prior
    }

    fn wants_mask_input(&self) -> bool {
        self.config.use_mask_prior
    }

    fn apply(&self, k: usize, vbar: &Tensor, mbar: Option<&Tensor>) -> Result<Tensor, UnfoldError> {
        unet_forward(vbar, mbar, self.stage_params(k)).map_err(|e| UnfoldError::Prior {
            stage: k,
            message: e.to_string(),
        })
    }
}

/// Multiply-accumulate count of every convolution in one reconstruction at
/// `h x w` spatial size and CS ratio `c` (activations and norms excluded).
pub fn count_flops(params: &SpaDunParams, h: usize, w: usize, c: usize) -> u64 {
    let cfg = &params.config;
    let l = cfg.pad_length;
    let chunks = if c <= l { 1 } else { c.div_ceil(l) } as u64;
    let (w0, r) = (cfg.width as u64, cfg.expansion as u64);
    let (w1, w2) = (2 * w0, 4 * w0);
    let hw = (h * w) as u64;
    let (hw1, hw2) = (hw / 4, hw / 16);
    let in_ch = cfg.in_channels() as u64;

    let block = |width: u64, sp: u64| -> u64 {
        // dw 5x5 + pw expand + pw project
        25 * width * sp + width * (r * width) * sp + (r * width) * width * sp
    };
    let b = [
        cfg.blocks[0] as u64,
        cfg.blocks[1] as u64,
        cfg.blocks[2] as u64,
    ];

    let mut per_stage = 0u64;
    per_stage += in_ch * w0 * 9 * hw; // stem
    per_stage += b[0] * block(w0, hw); // enc0
    per_stage += w0 * w1 * 9 * hw1; // down0 (stride 2)
    per_stage += b[1] * block(w1, hw1); // enc1
    per_stage += w1 * w2 * 9 * hw2; // down1
    per_stage += b[2] * block(w2, hw2); // mid
    per_stage += w2 * w1 * hw1 + (2 * w1) * w1 * hw1; // up1 + fuse1
    per_stage += b[1] * block(w1, hw1); // dec1
    per_stage += w1 * w0 * hw + (2 * w0) * w0 * hw; // up0 + fuse0
    per_stage += b[0] * block(w0, hw); // dec0
    per_stage += w0 * (l as u64) * 9 * hw; // head
    if cfg.use_mask_prior {
        let lin = (l + 1) as u64;
        per_stage += lin * w0 * hw + 25 * w0 * hw + w0 * w0 * hw; // entry, dw, exit
        per_stage += w0 * w1 * hw1 + w1 * w2 * hw2; // scale downs
    }
    chunks * per_stage * cfg.stages as u64
}
