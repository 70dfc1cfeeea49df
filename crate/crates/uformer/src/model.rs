//! The full U-shaped network: input/output projections, K encoder stages
//! with downsampling, a bottleneck, K decoder stages with skip connections
//! and upsampling, modulators on the decoder blocks, and the global
//! residual `output = input + projection(decoder features)`.

use crate::error::{Error, Result};
use crate::lewin::{
    lewin_block_forward_ext, CrossAttnParams, LeWinBlockParams, LeffParams, Modulator, WmsaParams,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::windowing::{crop_map, reflect_pad_map};
use std::sync::Arc;

/// How encoder features reach the mirrored decoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    /// Channel concatenation; the stage's blocks run at the doubled width.
    Concat,
    /// The stage's first block gains a second attention sub-layer with
    /// keys/values from the encoder.
    Cross,
    /// Keys/values from `[enc, dec]` channel concatenation, queries from the
    /// decoder only.
    ConcatCross,
}

impl SkipMode {
    pub fn parse(s: &str) -> Result<SkipMode> {
        match s {
            "concat" => Ok(SkipMode::Concat),
            "cross" => Ok(SkipMode::Cross),
            "concat_cross" => Ok(SkipMode::ConcatCross),
            other => Err(Error::Config(format!(
                "unknown skip mode '{other}' (expected concat, cross or concat_cross)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SkipMode::Concat => "concat",
            SkipMode::Cross => "cross",
            SkipMode::ConcatCross => "concat_cross",
        }
    }
}

/// All architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct UformerConfig {
    /// Base channel count C; stage l runs at 2^l * C.
    pub base_channels: usize,
    /// Encoder/decoder stage count K.
    pub stages: usize,
    /// Block count per encoder stage (decoder depths are the mirror).
    pub encoder_depths: Vec<usize>,
    pub bottleneck_depth: usize,
    /// Window size M, fixed across all blocks.
    pub window: usize,
    /// Attention head width d_k; head count is width / d_k.
    pub head_dim: usize,
    pub use_modulator: bool,
    pub use_shift: bool,
    pub skip_mode: SkipMode,
    pub in_channels: usize,
    /// LeFF hidden expansion factor.
    pub leff_ratio: usize,
    /// Negative slope of the input-projection LeakyReLU.
    pub leaky_slope: f64,
    /// Apply decoder modulators to the unshifted map (ablation flag).
    pub modulator_pre_shift: bool,
    /// Shift 0-based even block indices instead of odd ones.
    pub shift_even_indices: bool,
    /// Zero-initialize the output projection so a fresh model is the
    /// identity map (used by the residual-identity checks).
    pub zero_output_proj: bool,
}

impl Default for UformerConfig {
    fn default() -> Self {
        UformerConfig {
            base_channels: 16,
            stages: 4,
            encoder_depths: vec![2, 2, 2, 2],
            bottleneck_depth: 2,
            window: 8,
            head_dim: 16,
            use_modulator: true,
            use_shift: true,
            skip_mode: SkipMode::Concat,
            in_channels: 3,
            leff_ratio: 4,
            leaky_slope: 0.2,
            modulator_pre_shift: false,
            shift_even_indices: false,
            zero_output_proj: false,
        }
    }
}

impl UformerConfig {
    /// C=16, encoder depths {2,2,2,2}.
    pub fn tiny() -> Self {
        UformerConfig::default()
    }

    /// C=32, encoder depths {2,2,2,2}.
    pub fn small() -> Self {
        UformerConfig {
            base_channels: 32,
            head_dim: 32,
            ..UformerConfig::default()
        }
    }

    /// C=32, encoder depths {1,2,8,8}.
    pub fn base() -> Self {
        UformerConfig {
            base_channels: 32,
            head_dim: 32,
            encoder_depths: vec![1, 2, 8, 8],
            bottleneck_depth: 2,
            ..UformerConfig::default()
        }
    }

    /// Desk-scale configuration used by the smoke experiments:
    /// C=8, K=2, depths {1,1}, M=4.
    pub fn smoke() -> Self {
        UformerConfig {
            base_channels: 8,
            stages: 2,
            encoder_depths: vec![1, 1],
            bottleneck_depth: 1,
            window: 4,
            head_dim: 8,
            ..UformerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.stages == 0 {
            return Err(Error::Config("stage count must be positive".into()));
        }
        if self.encoder_depths.len() != self.stages {
            return Err(Error::Config(format!(
                "encoder_depths has {} entries for {} stages",
                self.encoder_depths.len(),
                self.stages
            )));
        }
        if self.encoder_depths.contains(&0) || self.bottleneck_depth == 0 {
            return Err(Error::Config("stage depths must be positive".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("head_dim must be positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.leff_ratio == 0 {
            return Err(Error::Config("leff_ratio must be positive".into()));
        }
        for l in 0..=self.stages {
            let width = self.stage_channels(l);
            if !width.is_multiple_of(self.head_dim) {
                return Err(Error::Config(format!(
                    "stage {l} width {width} is not divisible by head_dim {}",
                    self.head_dim
                )));
            }
        }
        Ok(())
    }

    /// Channel width at stage l (0..=K; K is the bottleneck).
    pub fn stage_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Mirrored encoder depths.
    pub fn decoder_depths(&self) -> Vec<usize> {
        let mut d = self.encoder_depths.clone();
        d.reverse();
        d
    }

    /// Block width of decoder stage j (0 = deepest).
    pub fn decoder_width(&self, j: usize) -> usize {
        let lev = self.stages - 1 - j;
        match self.skip_mode {
            SkipMode::Concat => 2 * self.stage_channels(lev),
            SkipMode::Cross | SkipMode::ConcatCross => self.stage_channels(lev),
        }
    }

    /// Input width of upsampler j.
    pub fn upsampler_in(&self, j: usize) -> usize {
        if j == 0 {
            self.stage_channels(self.stages)
        } else {
            self.decoder_width(j - 1)
        }
    }

    pub fn heads_for(&self, width: usize) -> usize {
        width / self.head_dim
    }

    /// Whether the block at `idx` (0-based) within a stage is shifted.
    pub fn block_shifted(&self, idx: usize) -> bool {
        if !self.use_shift {
            return false;
        }
        if self.shift_even_indices {
            idx.is_multiple_of(2)
        } else {
            idx % 2 == 1
        }
    }

    /// Spatial padding multiple required up front (downsampling only;
    /// window padding happens per block).
    pub fn pad_multiple(&self) -> usize {
        1 << self.stages
    }

    /// Smallest admissible input extent. The bottleneck resolution must be
    /// large enough that reflect padding to a window multiple stays below
    /// the extent itself (pad < extent requires extent > window/2).
    pub fn min_extent(&self) -> usize {
        (1 << self.stages) * (self.window / 2 + 1)
    }
}

/// A convolution (or transposed convolution) weight/bias pair.
#[derive(Clone, Debug)]
pub struct ConvParams<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> ConvParams<P> {
    fn map<B>(&self, f: &mut impl FnMut(&P) -> B) -> ConvParams<B> {
        ConvParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(String, bool, &'a P)) {
        f(format!("{path}.weight"), false, &self.weight);
        f(format!("{path}.bias"), true, &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, path: &str, f: &mut impl FnMut(String, bool, &'a mut P)) {
        f(format!("{path}.weight"), false, &mut self.weight);
        f(format!("{path}.bias"), true, &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct StageParams<P> {
    pub blocks: Vec<LeWinBlockParams<P>>,
}

impl<P> StageParams<P> {
    fn map<B>(&self, f: &mut impl FnMut(&P) -> B) -> StageParams<B> {
        StageParams {
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
        }
    }

    fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(String, bool, &'a P)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{path}.block.{i}"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, path: &str, f: &mut impl FnMut(String, bool, &'a mut P)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{path}.block.{i}"), f);
        }
    }
}

/// The whole parameter tree. `P` is `Tensor<S>` in storage and `Var` during
/// a forward pass.
#[derive(Clone, Debug)]
pub struct UformerParams<P> {
    pub config: UformerConfig,
    pub input_proj: ConvParams<P>,
    pub encoder: Vec<StageParams<P>>,
    pub downs: Vec<ConvParams<P>>,
    pub bottleneck: StageParams<P>,
    pub ups: Vec<ConvParams<P>>,
    pub decoder: Vec<StageParams<P>>,
    pub output_proj: ConvParams<P>,
}

impl<P> UformerParams<P> {
    pub fn map<B>(&self, f: &mut impl FnMut(&P) -> B) -> UformerParams<B> {
        UformerParams {
            config: self.config.clone(),
            input_proj: self.input_proj.map(f),
            encoder: self.encoder.iter().map(|s| s.map(f)).collect(),
            downs: self.downs.iter().map(|c| c.map(f)).collect(),
            bottleneck: self.bottleneck.map(f),
            ups: self.ups.iter().map(|c| c.map(f)).collect(),
            decoder: self.decoder.iter().map(|s| s.map(f)).collect(),
            output_proj: self.output_proj.map(f),
        }
    }

    /// Exhaustive named-parameter walk, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, bool, &'a P)) {
        self.input_proj.visit("input_proj", f);
        for (l, s) in self.encoder.iter().enumerate() {
            s.visit(&format!("enc.{l}"), f);
        }
        for (l, d) in self.downs.iter().enumerate() {
            d.visit(&format!("down.{l}"), f);
        }
        self.bottleneck.visit("bottleneck", f);
        for (j, u) in self.ups.iter().enumerate() {
            u.visit(&format!("up.{j}"), f);
        }
        for (j, s) in self.decoder.iter().enumerate() {
            s.visit(&format!("dec.{j}"), f);
        }
        self.output_proj.visit("output_proj", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, bool, &'a mut P)) {
        self.input_proj.visit_mut("input_proj", f);
        for (l, s) in self.encoder.iter_mut().enumerate() {
            s.visit_mut(&format!("enc.{l}"), f);
        }
        for (l, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&format!("down.{l}"), f);
        }
        self.bottleneck.visit_mut("bottleneck", f);
        for (j, u) in self.ups.iter_mut().enumerate() {
            u.visit_mut(&format!("up.{j}"), f);
        }
        for (j, s) in self.decoder.iter_mut().enumerate() {
            s.visit_mut(&format!("dec.{j}"), f);
        }
        self.output_proj.visit_mut("output_proj", f);
    }
}

impl<S: Scalar> UformerParams<Tensor<S>> {
    /// Total learnable scalar count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, _, t| total += t.numel());
        total
    }

    /// Enter every parameter onto a tape.
    pub fn enter(&self, tape: &mut Tape<S>, requires_grad: bool) -> UformerParams<Var> {
        self.map(&mut |t| tape.leaf(t, requires_grad))
    }

    /// Convert precision.
    pub fn cast<T: Scalar>(&self) -> UformerParams<Tensor<T>> {
        self.map(&mut |t| t.cast::<T>())
    }
}

/// Deterministic initialization: truncated normal (std 0.02) weights, zero
/// biases, unit norms, zero modulators.
pub fn build<S: Scalar>(config: &UformerConfig, seed: u64) -> Result<UformerParams<Tensor<S>>> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let cfg = config.clone();

    fn tn<S: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<S> {
        Tensor::from_fn(shape, |_| S::from_f64(rng.trunc_normal(0.02)))
    }

    fn make_wmsa<S: Scalar>(
        rng: &mut Rng,
        cfg: &UformerConfig,
        width: usize,
        kv_in: usize,
    ) -> WmsaParams<Tensor<S>> {
        let m = cfg.window;
        let buckets = (2 * m - 1) * (2 * m - 1);
        WmsaParams {
            wq: tn(rng, &[width, width]),
            wk: tn(rng, &[kv_in, width]),
            wv: tn(rng, &[kv_in, width]),
            wo: tn(rng, &[width, width]),
            wo_bias: Tensor::zeros(&[width]),
            rel_bias: tn(rng, &[width / cfg.head_dim, buckets]),
            heads: width / cfg.head_dim,
        }
    }

    #[derive(Clone, Copy, PartialEq)]
    enum BlockKind {
        Plain,
        CrossFirst,
        ConcatCrossFirst,
    }

    fn make_block<S: Scalar>(
        rng: &mut Rng,
        cfg: &UformerConfig,
        width: usize,
        idx: usize,
        with_modulator: bool,
        kind: BlockKind,
    ) -> LeWinBlockParams<Tensor<S>> {
        let m = cfg.window;
        let hidden = width * cfg.leff_ratio;
        let kv_in = if kind == BlockKind::ConcatCrossFirst {
            2 * width
        } else {
            width
        };
        LeWinBlockParams {
            norm1_g: Tensor::full(&[width], S::ONE),
            norm1_b: Tensor::zeros(&[width]),
            attn: make_wmsa(rng, cfg, width, kv_in),
            cross: (kind == BlockKind::CrossFirst).then(|| CrossAttnParams {
                norm_g: Tensor::full(&[width], S::ONE),
                norm_b: Tensor::zeros(&[width]),
                attn: make_wmsa(rng, cfg, width, width),
            }),
            kv_concat_enc: kind == BlockKind::ConcatCrossFirst,
            norm2_g: Tensor::full(&[width], S::ONE),
            norm2_b: Tensor::zeros(&[width]),
            leff: LeffParams {
                fc1_w: tn(rng, &[width, hidden]),
                fc1_b: Tensor::zeros(&[hidden]),
                dw_w: tn(rng, &[hidden, 1, 3, 3]),
                dw_b: Tensor::zeros(&[hidden]),
                fc2_w: tn(rng, &[hidden, width]),
                fc2_b: Tensor::zeros(&[width]),
            },
            modulator: with_modulator.then(|| Modulator {
                bias: Tensor::zeros(&[m, m, width]),
            }),
            shifted: cfg.block_shifted(idx),
            modulator_pre_shift: cfg.modulator_pre_shift,
        }
    }

    let input_proj = ConvParams {
        weight: tn(&mut rng, &[cfg.base_channels, cfg.in_channels, 3, 3]),
        bias: Tensor::zeros(&[cfg.base_channels]),
    };

    let mut encoder = Vec::new();
    let mut downs = Vec::new();
    for l in 0..cfg.stages {
        let width = cfg.stage_channels(l);
        let blocks = (0..cfg.encoder_depths[l])
            .map(|i| make_block(&mut rng, &cfg, width, i, false, BlockKind::Plain))
            .collect();
        encoder.push(StageParams { blocks });
        downs.push(ConvParams {
            weight: tn(&mut rng, &[2 * width, width, 4, 4]),
            bias: Tensor::zeros(&[2 * width]),
        });
    }

    let bott_width = cfg.stage_channels(cfg.stages);
    let bottleneck = StageParams {
        blocks: (0..cfg.bottleneck_depth)
            .map(|i| make_block(&mut rng, &cfg, bott_width, i, false, BlockKind::Plain))
            .collect(),
    };

    let dec_depths = cfg.decoder_depths();
    let mut ups = Vec::new();
    let mut decoder = Vec::new();
    for (j, &depth) in dec_depths.iter().enumerate() {
        let lev = cfg.stages - 1 - j;
        let out_width = cfg.stage_channels(lev);
        ups.push(ConvParams {
            weight: tn(&mut rng, &[cfg.upsampler_in(j), out_width, 2, 2]),
            bias: Tensor::zeros(&[out_width]),
        });
        let width = cfg.decoder_width(j);
        let blocks = (0..depth)
            .map(|i| {
                let kind = match (i, cfg.skip_mode) {
                    (0, SkipMode::Cross) => BlockKind::CrossFirst,
                    (0, SkipMode::ConcatCross) => BlockKind::ConcatCrossFirst,
                    _ => BlockKind::Plain,
                };
                make_block(&mut rng, &cfg, width, i, cfg.use_modulator, kind)
            })
            .collect();
        decoder.push(StageParams { blocks });
    }

    let out_in = cfg.decoder_width(cfg.stages - 1);
    let output_proj = ConvParams {
        weight: if cfg.zero_output_proj {
            Tensor::zeros(&[cfg.in_channels, out_in, 3, 3])
        } else {
            tn(&mut rng, &[cfg.in_channels, out_in, 3, 3])
        },
        bias: Tensor::zeros(&[cfg.in_channels]),
    };

    Ok(UformerParams {
        config: cfg,
        input_proj,
        encoder,
        downs,
        bottleneck,
        ups,
        decoder,
        output_proj,
    })
}

/// 4x4 stride-2 convolution halving extents and doubling channels.
pub fn downsample<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &ConvParams<Var>) -> Result<Var> {
    let ws = tape.shape(p.weight).to_vec();
    let xs = tape.shape(x).to_vec();
    if ws[0] != 2 * ws[1] || xs[0] != ws[1] {
        return Err(Error::shape("downsample channel doubling", &xs, &ws));
    }
    tape.conv2d(x, p.weight, Some(p.bias), 2, 1, 1)
}

/// 2x2 stride-2 transposed convolution halving channels and doubling
/// extents. (The in-model upsamplers call `conv_transpose2d` directly since
/// concat skips change their width schedule.)
pub fn upsample<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &ConvParams<Var>) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if !xs[0].is_multiple_of(2) {
        return Err(Error::Config(format!(
            "upsample needs an even channel count, got {}",
            xs[0]
        )));
    }
    let ws = tape.shape(p.weight).to_vec();
    if ws[0] != xs[0] || ws[1] != xs[0] / 2 {
        return Err(Error::shape("upsample channel halving", &xs, &ws));
    }
    tape.conv_transpose2d(x, p.weight, Some(p.bias), 2)
}

/// What a decoder stage receives from [`skip_join`]: its input map, plus the
/// encoder features when the mode routes them through block attention.
pub struct SkipJoin {
    pub stage_input: Var,
    pub enc_for_blocks: Option<Var>,
}

/// Merge upsampled decoder features with the encoder skip.
pub fn skip_join<S: Scalar>(
    tape: &mut Tape<S>,
    enc: Var,
    dec: Var,
    mode: SkipMode,
) -> Result<SkipJoin> {
    let es = tape.shape(enc).to_vec();
    let ds = tape.shape(dec).to_vec();
    if es.len() != 3 || ds.len() != 3 || es[1] != ds[1] || es[2] != ds[2] {
        return Err(Error::shape("skip_join spatial extents", &es, &ds));
    }
    Ok(match mode {
        SkipMode::Concat => SkipJoin {
            stage_input: tape.concat(dec, enc, 0)?,
            enc_for_blocks: None,
        },
        SkipMode::Cross | SkipMode::ConcatCross => SkipJoin {
            stage_input: dec,
            enc_for_blocks: Some(enc),
        },
    })
}

/// One activation shape observed during a traced forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTrace {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Forward pass `input + R(input)` on an already-populated tape.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    input: Var,
    p: &UformerParams<Var>,
    cfg: &UformerConfig,
) -> Result<Var> {
    forward_traced(tape, input, p, cfg, None)
}

pub fn forward_traced<S: Scalar>(
    tape: &mut Tape<S>,
    input: Var,
    p: &UformerParams<Var>,
    cfg: &UformerConfig,
    mut trace: Option<&mut Vec<ShapeTrace>>,
) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 3 || shape[0] != cfg.in_channels {
        return Err(Error::shape(
            "model input",
            &shape,
            &[cfg.in_channels, 0, 0],
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    let min_extent = cfg.min_extent();
    if h < min_extent || w < min_extent {
        return Err(Error::Config(format!(
            "input {h}x{w} is below the {min_extent}-pixel minimum for {} stages with window {}",
            cfg.stages, cfg.window
        )));
    }

    let mut record = |name: String, shape: &[usize]| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(ShapeTrace {
                name,
                shape: shape.to_vec(),
            });
        }
    };

    // Reflect-pad so every downsample halves exactly; window padding is
    // handled per block.
    let mult = cfg.pad_multiple();
    let hp = h.div_ceil(mult) * mult;
    let wp = w.div_ceil(mult) * mult;
    let x = if hp != h || wp != w {
        let map = reflect_pad_map(cfg.in_channels, h, w, hp - h, wp - w);
        tape.remap(input, vec![cfg.in_channels, hp, wp], Arc::new(map))?
    } else {
        input
    };

    let conv_in = tape.conv2d(x, p.input_proj.weight, Some(p.input_proj.bias), 1, 1, 1)?;
    let mut feat = tape.leaky_relu(conv_in, S::from_f64(cfg.leaky_slope))?;
    record("input_proj".into(), tape.shape(feat));

    let mut skips = Vec::new();
    for (l, stage) in p.encoder.iter().enumerate() {
        for block in &stage.blocks {
            feat = lewin_block_forward_ext(tape, feat, block, cfg.window, None)?;
        }
        record(format!("enc.{l}"), tape.shape(feat));
        skips.push(feat);
        feat = downsample(tape, feat, &p.downs[l])?;
        record(format!("down.{l}"), tape.shape(feat));
    }

    for block in &p.bottleneck.blocks {
        feat = lewin_block_forward_ext(tape, feat, block, cfg.window, None)?;
    }
    record("bottleneck".into(), tape.shape(feat));

    for (j, stage) in p.decoder.iter().enumerate() {
        let lev = cfg.stages - 1 - j;
        feat = tape.conv_transpose2d(feat, p.ups[j].weight, Some(p.ups[j].bias), 2)?;
        record(format!("up.{j}"), tape.shape(feat));
        let join = skip_join(tape, skips[lev], feat, cfg.skip_mode)?;
        feat = join.stage_input;
        for (i, block) in stage.blocks.iter().enumerate() {
            let enc = if i == 0 { join.enc_for_blocks } else { None };
            feat = lewin_block_forward_ext(tape, feat, block, cfg.window, enc)?;
        }
        record(format!("dec.{j}"), tape.shape(feat));
    }

    let residual = tape.conv2d(
        feat,
        p.output_proj.weight,
        Some(p.output_proj.bias),
        1,
        1,
        1,
    )?;
    let residual = if hp != h || wp != w {
        let map = crop_map(cfg.in_channels, hp, wp, h, w);
        tape.remap(residual, vec![cfg.in_channels, h, w], Arc::new(map))?
    } else {
        residual
    };
    record("residual".into(), tape.shape(residual));
    tape.add(input, residual)
}

/// Forward-only restoration of one image.
pub fn restore<S: Scalar>(params: &UformerParams<Tensor<S>>, img: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::inference();
    let input = tape.leaf(img, false);
    let entered = params.enter(&mut tape, false);
    let out = forward(&mut tape, input, &entered, &params.config)?;
    Ok(tape.value(out))
}
