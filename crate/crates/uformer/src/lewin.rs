//! The locally-enhanced window transformer block: windowed multi-head
//! self-attention with a learnable relative-position bias and optional
//! per-block modulator, followed by the depth-wise-conv feed-forward
//! network, composed pre-norm with two residual connections.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};
use crate::windowing::{
    crop_from_grid, cyclic_shift, cyclic_unshift, pad_to_grid, partition_divisible,
    reverse_divisible, RelPosIndex, ShiftMask, WindowGrid,
};
use std::sync::Arc;

pub const LN_EPS: f64 = 1e-5;

/// Windowed multi-head attention parameters. `P` is the payload slot:
/// owned tensors in storage, tape handles during a forward pass.
#[derive(Clone, Debug)]
pub struct WmsaParams<P> {
    /// Q projection `[c, c]`; no bias.
    pub wq: P,
    /// K projection `[kv_in, c]`; `kv_in` is `2c` for concat-cross blocks.
    pub wk: P,
    /// V projection `[kv_in, c]`.
    pub wv: P,
    /// Output projection `[c, c]` plus bias `[c]`.
    pub wo: P,
    pub wo_bias: P,
    /// Per-head relative position bias tables `[heads, (2m-1)^2]`.
    pub rel_bias: P,
    pub heads: usize,
}

impl<P> WmsaParams<P> {
    pub fn map<B>(&self, f: &mut impl FnMut(&P) -> B) -> WmsaParams<B> {
        WmsaParams {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            wo_bias: f(&self.wo_bias),
            rel_bias: f(&self.rel_bias),
            heads: self.heads,
        }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(String, bool, &'a P)) {
        f(format!("{path}.q.weight"), false, &self.wq);
        f(format!("{path}.k.weight"), false, &self.wk);
        f(format!("{path}.v.weight"), false, &self.wv);
        f(format!("{path}.out.weight"), false, &self.wo);
        f(format!("{path}.out.bias"), true, &self.wo_bias);
        f(format!("{path}.rel_bias"), true, &self.rel_bias);
    }

    pub fn visit_mut<'a>(&'a mut self, path: &str, f: &mut impl FnMut(String, bool, &'a mut P)) {
        f(format!("{path}.q.weight"), false, &mut self.wq);
        f(format!("{path}.k.weight"), false, &mut self.wk);
        f(format!("{path}.v.weight"), false, &mut self.wv);
        f(format!("{path}.out.weight"), false, &mut self.wo);
        f(format!("{path}.out.bias"), true, &mut self.wo_bias);
        f(format!("{path}.rel_bias"), true, &mut self.rel_bias);
    }
}

/// Locally-enhanced feed-forward parameters: token-wise expansion,
/// depth-wise 3x3 convolution in 2D layout, token-wise contraction.
#[derive(Clone, Debug)]
pub struct LeffParams<P> {
    pub fc1_w: P, // [c, hidden]
    pub fc1_b: P, // [hidden]
    pub dw_w: P,  // [hidden, 1, 3, 3]
    pub dw_b: P,  // [hidden]
    pub fc2_w: P, // [hidden, c]
    pub fc2_b: P, // [c]
}

impl<P> LeffParams<P> {
    pub fn map<B>(&self, f: &mut impl FnMut(&P) -> B) -> LeffParams<B> {
        LeffParams {
            fc1_w: f(&self.fc1_w),
            fc1_b: f(&self.fc1_b),
            dw_w: f(&self.dw_w),
            dw_b: f(&self.dw_b),
            fc2_w: f(&self.fc2_w),
            fc2_b: f(&self.fc2_b),
        }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(String, bool, &'a P)) {
        f(format!("{path}.fc1.weight"), false, &self.fc1_w);
        f(format!("{path}.fc1.bias"), true, &self.fc1_b);
        f(format!("{path}.dw.weight"), false, &self.dw_w);
        f(format!("{path}.dw.bias"), true, &self.dw_b);
        f(format!("{path}.fc2.weight"), false, &self.fc2_w);
        f(format!("{path}.fc2.bias"), true, &self.fc2_b);
    }

    pub fn visit_mut<'a>(&'a mut self, path: &str, f: &mut impl FnMut(String, bool, &'a mut P)) {
        f(format!("{path}.fc1.weight"), false, &mut self.fc1_w);
        f(format!("{path}.fc1.bias"), true, &mut self.fc1_b);
        f(format!("{path}.dw.weight"), false, &mut self.dw_w);
        f(format!("{path}.dw.bias"), true, &mut self.dw_b);
        f(format!("{path}.fc2.weight"), false, &mut self.fc2_w);
        f(format!("{path}.fc2.bias"), true, &mut self.fc2_b);
    }
}

/// Learnable `[m, m, c]` bias shared by every window of the block.
#[derive(Clone, Debug)]
pub struct Modulator<P> {
    pub bias: P,
}

impl<P> Modulator<P> {
    pub fn map<B>(&self, f: &mut impl FnMut(&P) -> B) -> Modulator<B> {
        Modulator {
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(String, bool, &'a P)) {
        f(format!("{path}.modulator"), true, &self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, path: &str, f: &mut impl FnMut(String, bool, &'a mut P)) {
        f(format!("{path}.modulator"), true, &mut self.bias);
    }
}

/// Extra cross-attention sub-layer used by the Cross-Skip decoder variant:
/// queries from the block, keys/values from the encoder skip.
#[derive(Clone, Debug)]
pub struct CrossAttnParams<P> {
    pub norm_g: P,
    pub norm_b: P,
    pub attn: WmsaParams<P>,
}

impl<P> CrossAttnParams<P> {
    pub fn map<B>(&self, f: &mut impl FnMut(&P) -> B) -> CrossAttnParams<B> {
        CrossAttnParams {
            norm_g: f(&self.norm_g),
            norm_b: f(&self.norm_b),
            attn: self.attn.map(f),
        }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(String, bool, &'a P)) {
        f(format!("{path}.norm.gamma"), true, &self.norm_g);
        f(format!("{path}.norm.beta"), true, &self.norm_b);
        self.attn.visit(&format!("{path}.attn"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, path: &str, f: &mut impl FnMut(String, bool, &'a mut P)) {
        f(format!("{path}.norm.gamma"), true, &mut self.norm_g);
        f(format!("{path}.norm.beta"), true, &mut self.norm_b);
        self.attn.visit_mut(&format!("{path}.attn"), f);
    }
}

/// One transformer block.
#[derive(Clone, Debug)]
pub struct LeWinBlockParams<P> {
    pub norm1_g: P,
    pub norm1_b: P,
    pub attn: WmsaParams<P>,
    /// Present on the first decoder block in cross skip mode.
    pub cross: Option<CrossAttnParams<P>>,
    /// The block's main attention takes K/V from `[enc, dec]` concat
    /// (concat-cross skip mode; `wk`/`wv` are `[2c, c]`).
    pub kv_concat_enc: bool,
    pub norm2_g: P,
    pub norm2_b: P,
    pub leff: LeffParams<P>,
    pub modulator: Option<Modulator<P>>,
    pub shifted: bool,
    /// Add the modulator to the unshifted map instead of to the shifted
    /// windows (exposed for the ablation-minded; default off).
    pub modulator_pre_shift: bool,
}

impl<P> LeWinBlockParams<P> {
    pub fn map<B>(&self, f: &mut impl FnMut(&P) -> B) -> LeWinBlockParams<B> {
        LeWinBlockParams {
            norm1_g: f(&self.norm1_g),
            norm1_b: f(&self.norm1_b),
            attn: self.attn.map(f),
            cross: self.cross.as_ref().map(|c| c.map(f)),
            kv_concat_enc: self.kv_concat_enc,
            norm2_g: f(&self.norm2_g),
            norm2_b: f(&self.norm2_b),
            leff: self.leff.map(f),
            modulator: self.modulator.as_ref().map(|m| m.map(f)),
            shifted: self.shifted,
            modulator_pre_shift: self.modulator_pre_shift,
        }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(String, bool, &'a P)) {
        f(format!("{path}.norm1.gamma"), true, &self.norm1_g);
        f(format!("{path}.norm1.beta"), true, &self.norm1_b);
        self.attn.visit(&format!("{path}.attn"), f);
        if let Some(c) = &self.cross {
            c.visit(&format!("{path}.cross"), f);
        }
        f(format!("{path}.norm2.gamma"), true, &self.norm2_g);
        f(format!("{path}.norm2.beta"), true, &self.norm2_b);
        self.leff.visit(&format!("{path}.leff"), f);
        if let Some(m) = &self.modulator {
            m.visit(path, f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, path: &str, f: &mut impl FnMut(String, bool, &'a mut P)) {
        f(format!("{path}.norm1.gamma"), true, &mut self.norm1_g);
        f(format!("{path}.norm1.beta"), true, &mut self.norm1_b);
        self.attn.visit_mut(&format!("{path}.attn"), f);
        if let Some(c) = &mut self.cross {
            c.visit_mut(&format!("{path}.cross"), f);
        }
        f(format!("{path}.norm2.gamma"), true, &mut self.norm2_g);
        f(format!("{path}.norm2.beta"), true, &mut self.norm2_b);
        self.leff.visit_mut(&format!("{path}.leff"), f);
        if let Some(m) = &mut self.modulator {
            m.visit_mut(path, f);
        }
    }
}

/// Shared bias added to every window's tokens.
pub fn apply_modulator<S: Scalar>(tape: &mut Tape<S>, windows: Var, modulator: Var) -> Result<Var> {
    let ws = tape.shape(windows).to_vec();
    let ms = tape.shape(modulator).to_vec();
    if ws.len() != 3 || ms.len() != 3 {
        return Err(Error::shape("apply_modulator rank", &ws, &ms));
    }
    if ms[0] * ms[1] != ws[1] || ms[2] != ws[2] {
        return Err(Error::shape("apply_modulator extents", &ws, &ms));
    }
    let flat = tape.reshape(modulator, vec![ms[0] * ms[1], ms[2]])?;
    tape.add(windows, flat)
}

/// Gather map expanding `[heads, (2m-1)^2]` bias tables into per-pair
/// logits `[heads, m*m, m*m]`.
fn rel_bias_map(heads: usize, m: usize) -> Vec<usize> {
    let idx = RelPosIndex::new(m);
    let buckets = idx.num_buckets();
    let mm = m * m;
    let mut map = Vec::with_capacity(heads * mm * mm);
    for h in 0..heads {
        for i in 0..mm {
            for j in 0..mm {
                map.push(h * buckets + idx.get(i, j));
            }
        }
    }
    map
}

/// Attention over already-partitioned windows `[n, m*m, c]`.
/// `kv_windows` defaults to the (modulated) query windows.
fn window_attention<S: Scalar>(
    tape: &mut Tape<S>,
    windows: Var,
    kv_windows: Option<Var>,
    p: &WmsaParams<Var>,
    m: usize,
    mask: Option<&ShiftMask>,
) -> Result<Var> {
    let shape = tape.shape(windows).to_vec();
    let (n, mm, c) = (shape[0], shape[1], shape[2]);
    if c % p.heads != 0 {
        return Err(Error::Config(format!(
            "channel width {c} not divisible by head count {}",
            p.heads
        )));
    }
    let heads = p.heads;
    let dk = c / heads;
    let kv = kv_windows.unwrap_or(windows);

    let q_full = tape.matmul(windows, p.wq, false)?;
    let k_full = tape.matmul(kv, p.wk, false)?;
    let v_full = tape.matmul(kv, p.wv, false)?;
    let split_heads = |tape: &mut Tape<S>, x: Var| -> Result<Var> {
        let r = tape.reshape(x, vec![n, mm, heads, dk])?;
        tape.permute(r, &[0, 2, 1, 3])
    };
    let q = split_heads(tape, q_full)?;
    let k = split_heads(tape, k_full)?;
    let v = split_heads(tape, v_full)?;

    let logits = tape.matmul(q, k, true)?;
    let scaled = tape.scale(logits, S::from_f64(1.0 / (dk as f64).sqrt()))?;

    let bias_map = Arc::new(rel_bias_map(heads, m));
    let bias = tape.remap(p.rel_bias, vec![heads, mm, mm], bias_map)?;
    let mut logits = tape.add(scaled, bias)?;

    if let Some(mask) = mask {
        if !mask.is_zero() {
            let mask_t = mask.as_tensor::<S>();
            let mv = tape.constant(&mask_t);
            let mv = tape.reshape(mv, vec![n, 1, mm, mm])?;
            logits = tape.add(logits, mv)?;
        }
    }

    let attn = tape.softmax(logits, 3)?;
    let ctx = tape.matmul(attn, v, false)?;
    let merged = tape.permute(ctx, &[0, 2, 1, 3])?;
    let flat = tape.reshape(merged, vec![n, mm, c])?;
    let proj = tape.matmul(flat, p.wo, false)?;
    tape.add(proj, p.wo_bias)
}

/// Windowed multi-head self-attention on a `[c, h, w]` map: pad, optionally
/// cyclic-shift, partition, attend per window (relative bias, shift mask,
/// optional modulator before the Q/K/V projections), reassemble, crop.
pub fn wmsa_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: &WmsaParams<Var>,
    m: usize,
    shifted: bool,
    modulator: Option<&Modulator<Var>>,
) -> Result<Var> {
    wmsa_forward_ext(tape, x, p, m, shifted, modulator, false, None)
}

/// Encoder-side key/value source for the skip-connection attention variants.
#[derive(Clone, Copy, Debug)]
pub enum EncKv {
    /// K/V come from the encoder features alone (Cross-Skip).
    Replace(Var),
    /// K/V come from `[enc, dec]` channel concatenation (ConcatCross-Skip).
    ConcatChannels(Var),
}

/// Extended entry point used by the block: `modulator_pre_shift` applies the
/// modulator to the unshifted map; `enc_kv` supplies encoder-side keys and
/// values for the cross-attention skip variants. `enc_kv` must share the
/// map's spatial extents.
#[allow(clippy::too_many_arguments)]
pub fn wmsa_forward_ext<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: &WmsaParams<Var>,
    m: usize,
    shifted: bool,
    modulator: Option<&Modulator<Var>>,
    modulator_pre_shift: bool,
    enc_kv: Option<EncKv>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("wmsa input", &shape, &[0, 0, 0]));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let grid = WindowGrid::new(h, w, m)?;
    let (hp, wp) = (grid.padded_h(), grid.padded_w());
    // No shift when a single window already covers the map.
    let shift = if shifted && m < hp.min(wp) { m / 2 } else { 0 };

    let mut padded = pad_to_grid(tape, x, &grid)?;

    if let (Some(md), true) = (modulator, modulator_pre_shift) {
        // Tile [m, m, c] across the padded map and add before shifting.
        let tile = tile_modulator_map(c, hp, wp, m);
        let tiled = tape.remap(md.bias, vec![c, hp, wp], Arc::new(tile))?;
        padded = tape.add(padded, tiled)?;
    }

    let shifted_map = if shift > 0 {
        cyclic_shift(tape, padded, shift)?
    } else {
        padded
    };
    let mut windows = partition_divisible(tape, shifted_map, &grid)?;

    if let (Some(md), false) = (modulator, modulator_pre_shift) {
        windows = apply_modulator(tape, windows, md.bias)?;
    }

    let kv_windows = match enc_kv {
        None => None,
        Some(EncKv::Replace(enc)) => Some(partition_like(tape, enc, &grid, shift)?),
        Some(EncKv::ConcatChannels(enc)) => {
            let enc_w = partition_like(tape, enc, &grid, shift)?;
            Some(tape.concat(enc_w, windows, 2)?)
        }
    };

    let mask = ShiftMask::new(hp, wp, m, shift);
    let attended = window_attention(
        tape,
        windows,
        kv_windows,
        p,
        m,
        if shift > 0 { Some(&mask) } else { None },
    )?;

    let merged = reverse_divisible(tape, attended, &grid)?;
    let unshifted = if shift > 0 {
        cyclic_unshift(tape, merged, shift)?
    } else {
        merged
    };
    crop_from_grid(tape, unshifted, &grid, c)
}

/// Pad/shift/partition `enc` exactly like the query map so windows align.
fn partition_like<S: Scalar>(
    tape: &mut Tape<S>,
    enc: Var,
    grid: &WindowGrid,
    shift: usize,
) -> Result<Var> {
    let es = tape.shape(enc).to_vec();
    if es.len() != 3 || es[1] != grid.h || es[2] != grid.w {
        return Err(Error::shape(
            "encoder skip extents",
            &es,
            &[0, grid.h, grid.w],
        ));
    }
    let padded = pad_to_grid(tape, enc, grid)?;
    let shifted = if shift > 0 {
        cyclic_shift(tape, padded, shift)?
    } else {
        padded
    };
    partition_divisible(tape, shifted, grid)
}

fn tile_modulator_map(c: usize, hp: usize, wp: usize, m: usize) -> Vec<usize> {
    // modulator laid out [m, m, c]; output [c, hp, wp]
    let mut map = Vec::with_capacity(c * hp * wp);
    for ci in 0..c {
        for h in 0..hp {
            for w in 0..wp {
                map.push(((h % m) * m + (w % m)) * c + ci);
            }
        }
    }
    map
}

/// Token-wise expansion, GELU, 3x3 depth-wise conv (padding 1), GELU,
/// token-wise contraction. Spatial extents are preserved.
pub fn leff_forward<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &LeffParams<Var>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hidden = tape.shape(p.fc1_w)[1];

    let tokens = to_tokens(tape, x)?;
    let t1 = tape.matmul(tokens, p.fc1_w, false)?;
    let t1 = tape.add(t1, p.fc1_b)?;
    let t1 = tape.gelu(t1)?;

    let spatial = tape.reshape(t1, vec![h, w, hidden])?;
    let chw = tape.permute(spatial, &[2, 0, 1])?;
    let conv = tape.conv2d(chw, p.dw_w, Some(p.dw_b), 1, 1, hidden)?;
    let conv = tape.gelu(conv)?;

    let back = tape.permute(conv, &[1, 2, 0])?;
    let flat = tape.reshape(back, vec![h * w, hidden])?;
    let t2 = tape.matmul(flat, p.fc2_w, false)?;
    let t2 = tape.add(t2, p.fc2_b)?;

    let hwc = tape.reshape(t2, vec![h, w, c])?;
    tape.permute(hwc, &[2, 0, 1])
}

fn to_tokens<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let hwc = tape.permute(x, &[1, 2, 0])?;
    tape.reshape(hwc, vec![shape[1] * shape[2], shape[0]])
}

fn to_spatial<S: Scalar>(tape: &mut Tape<S>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let c = tape.shape(tokens)[1];
    let hwc = tape.reshape(tokens, vec![h, w, c])?;
    tape.permute(hwc, &[2, 0, 1])
}

/// The two-residual composition:
/// `x' = W-MSA(LN(x)) + x`, then `x'' = LeFF(LN(x')) + x'`
/// (with the optional cross-attention sub-layer between them).
pub fn lewin_block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: &LeWinBlockParams<Var>,
    m: usize,
) -> Result<Var> {
    lewin_block_forward_ext(tape, x, p, m, None)
}

pub fn lewin_block_forward_ext<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: &LeWinBlockParams<Var>,
    m: usize,
    enc_skip: Option<Var>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (h, w) = (shape[1], shape[2]);

    let tokens = to_tokens(tape, x)?;
    let n1 = tape.layer_norm(tokens, p.norm1_g, p.norm1_b, LN_EPS)?;
    let n1s = to_spatial(tape, n1, h, w)?;
    let enc_kv = if p.kv_concat_enc {
        let enc = enc_skip.ok_or_else(|| {
            Error::Config("concat-cross block forward needs encoder features".into())
        })?;
        Some(EncKv::ConcatChannels(enc))
    } else {
        None
    };
    let a = wmsa_forward_ext(
        tape,
        n1s,
        &p.attn,
        m,
        p.shifted,
        p.modulator.as_ref(),
        p.modulator_pre_shift,
        enc_kv,
    )?;
    let mut x2 = tape.add(x, a)?;

    if let Some(cross) = &p.cross {
        let enc = enc_skip
            .ok_or_else(|| Error::Config("cross block forward needs encoder features".into()))?;
        let t = to_tokens(tape, x2)?;
        let nc = tape.layer_norm(t, cross.norm_g, cross.norm_b, LN_EPS)?;
        let ncs = to_spatial(tape, nc, h, w)?;
        let ca = wmsa_forward_ext(
            tape,
            ncs,
            &cross.attn,
            m,
            p.shifted,
            None,
            false,
            Some(EncKv::Replace(enc)),
        )?;
        x2 = tape.add(x2, ca)?;
    }

    let t2 = to_tokens(tape, x2)?;
    let n2 = tape.layer_norm(t2, p.norm2_g, p.norm2_b, LN_EPS)?;
    let n2s = to_spatial(tape, n2, h, w)?;
    let ff = leff_forward(tape, n2s, &p.leff)?;
    tape.add(x2, ff)
}
