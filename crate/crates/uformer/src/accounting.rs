//! Closed-form parameter and multiply-accumulate counting over a
//! [`UformerConfig`], mirroring the builder's exact parameterization so the
//! totals can be cross-checked against the real registry.
//!
//! Conventions (also printed with every report): one MAC is one
//! multiply-accumulate (not two FLOPs); softmax, activation and
//! normalization arithmetic is excluded; the reference resolution defaults
//! to 256x256.

use crate::error::Result;
use crate::model::{SkipMode, UformerConfig};

pub const DEFAULT_RESOLUTION: usize = 256;

#[derive(Clone, Debug)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
    pub resolution: (usize, usize),
    pub assumptions: Vec<String>,
}

impl CostReport {
    /// Human-readable aligned table plus the assumption ledger.
    pub fn render(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(["TOTAL".len()])
            .max()
            .unwrap_or(8)
            .max(8);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<name_w$}  {:>14}  {:>16}\n",
            "layer", "params", "macs"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<name_w$}  {:>14}  {:>16}\n",
                r.name, r.params, r.macs
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>14}  {:>16}\n",
            "TOTAL", self.total_params, self.total_macs
        ));
        out.push_str(&format!(
            "= {:.4} M params, {:.4} GMACs at {}x{}\n",
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9,
            self.resolution.0,
            self.resolution.1
        ));
        for a in &self.assumptions {
            out.push_str(&format!("assumption: {a}\n"));
        }
        out
    }

    /// CSV rows `name,params,macs`, totals last.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,params,macs\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.name, r.params, r.macs));
        }
        out.push_str(&format!(
            "TOTAL,{},{}\n",
            self.total_params, self.total_macs
        ));
        out
    }
}

/// Parameters of a linear layer.
pub fn linear_params(fan_in: usize, fan_out: usize, bias: bool) -> u64 {
    (fan_in * fan_out + if bias { fan_out } else { 0 }) as u64
}

/// Parameters of a (possibly grouped) convolution with bias.
pub fn conv_params(cin: usize, cout: usize, kh: usize, kw: usize, groups: usize) -> u64 {
    (cout * (cin / groups) * kh * kw + cout) as u64
}

/// MACs of a convolution at the given output extents.
pub fn conv_macs(
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    groups: usize,
    h_out: usize,
    w_out: usize,
) -> u64 {
    (cout * (cin / groups) * kh * kw) as u64 * (h_out * w_out) as u64
}

/// Analytic W-MSA MACs on an `h x w` map of `width` channels with window
/// `m` and key/value input width `kv_in`: the four projections plus the two
/// window-local matrix products. Exactly linear in `h*w` at fixed m, width.
pub fn wmsa_macs(width: usize, kv_in: usize, m: usize, h: usize, w: usize) -> u64 {
    let hw = (h * w) as u64;
    let proj = hw * (2 * width * width + 2 * kv_in * width) as u64;
    let windowed = 2 * hw * (m * m * width) as u64;
    proj + windowed
}

/// MACs of a naive global attention over `h*w` tokens (for the complexity
/// crossover sanity check): same projections, quadratic token interactions.
pub fn global_attention_macs(width: usize, h: usize, w: usize) -> u64 {
    let hw = (h * w) as u64;
    let proj = hw * (4 * width * width) as u64;
    let quadratic = 2 * hw * hw * width as u64;
    proj + quadratic
}

fn block_params(
    cfg: &UformerConfig,
    width: usize,
    kv_in: usize,
    modulator: bool,
    cross: bool,
) -> u64 {
    let m = cfg.window;
    let buckets = ((2 * m - 1) * (2 * m - 1)) as u64;
    let heads = (width / cfg.head_dim) as u64;
    let hidden = width * cfg.leff_ratio;

    let attn = |kv: usize| -> u64 {
        linear_params(width, width, false)      // q
            + linear_params(kv, width, false)   // k
            + linear_params(kv, width, false)   // v
            + linear_params(width, width, true) // out + bias
            + heads * buckets
    };

    let mut total = 0u64;
    total += 2 * width as u64; // norm1
    total += attn(kv_in);
    if cross {
        total += 2 * width as u64; // cross norm
        total += attn(width);
    }
    total += 2 * width as u64; // norm2
    total += linear_params(width, hidden, true);
    total += conv_params(hidden, hidden, 3, 3, hidden); // depth-wise
    total += linear_params(hidden, width, true);
    if modulator {
        total += (m * m * width) as u64;
    }
    total
}

/// Per-block MACs at stage extents `(h, w)`. Attention runs on the
/// window-padded extents; the feed-forward path runs on the raw ones.
fn block_macs(
    cfg: &UformerConfig,
    width: usize,
    kv_in: usize,
    cross: bool,
    h: usize,
    w: usize,
) -> u64 {
    let m = cfg.window;
    let ha = h.div_ceil(m) * m;
    let wa = w.div_ceil(m) * m;
    let hidden = width * cfg.leff_ratio;

    let mut total = wmsa_macs(width, kv_in, m, ha, wa);
    if cross {
        total += wmsa_macs(width, width, m, ha, wa);
    }
    let hw = (h * w) as u64;
    total += hw * (width * hidden) as u64; // fc1
    total += conv_macs(hidden, hidden, 3, 3, hidden, h, w); // depth-wise
    total += hw * (hidden * width) as u64; // fc2
    total
}

/// Full cost report at an explicit resolution.
pub fn count_macs(cfg: &UformerConfig, h: usize, w: usize) -> Result<CostReport> {
    cfg.validate()?;
    let mult = cfg.pad_multiple();
    let hp = h.div_ceil(mult) * mult;
    let wp = w.div_ceil(mult) * mult;

    let mut rows: Vec<CostRow> = Vec::new();
    let mut push = |name: String, params: u64, macs: u64| {
        rows.push(CostRow { name, params, macs });
    };

    push(
        "input_proj".into(),
        conv_params(cfg.in_channels, cfg.base_channels, 3, 3, 1),
        conv_macs(cfg.in_channels, cfg.base_channels, 3, 3, 1, hp, wp),
    );

    for l in 0..cfg.stages {
        let width = cfg.stage_channels(l);
        let (sh, sw) = (hp >> l, wp >> l);
        let depth = cfg.encoder_depths[l] as u64;
        push(
            format!("enc.{l}"),
            depth * block_params(cfg, width, width, false, false),
            depth * block_macs(cfg, width, width, false, sh, sw),
        );
        push(
            format!("down.{l}"),
            conv_params(width, 2 * width, 4, 4, 1),
            conv_macs(width, 2 * width, 4, 4, 1, sh / 2, sw / 2),
        );
    }

    {
        let width = cfg.stage_channels(cfg.stages);
        let (sh, sw) = (hp >> cfg.stages, wp >> cfg.stages);
        let depth = cfg.bottleneck_depth as u64;
        push(
            "bottleneck".into(),
            depth * block_params(cfg, width, width, false, false),
            depth * block_macs(cfg, width, width, false, sh, sw),
        );
    }

    let dec_depths = cfg.decoder_depths();
    for (j, &depth) in dec_depths.iter().enumerate() {
        let lev = cfg.stages - 1 - j;
        let out_width = cfg.stage_channels(lev);
        let in_width = cfg.upsampler_in(j);
        let (sh, sw) = (hp >> lev, wp >> lev);
        // transposed conv: every input pixel hits the full 2x2 kernel
        push(
            format!("up.{j}"),
            (in_width * out_width * 4 + out_width) as u64,
            (in_width * out_width * 4) as u64 * ((sh / 2) * (sw / 2)) as u64,
        );

        let width = cfg.decoder_width(j);
        let mut params = 0u64;
        let mut macs = 0u64;
        for i in 0..depth {
            let (kv_in, cross) = match (i, cfg.skip_mode) {
                (0, SkipMode::ConcatCross) => (2 * width, false),
                (0, SkipMode::Cross) => (width, true),
                _ => (width, false),
            };
            params += block_params(cfg, width, kv_in, cfg.use_modulator, cross);
            macs += block_macs(cfg, width, kv_in, cross, sh, sw);
        }
        push(format!("dec.{j}"), params, macs);
    }

    let out_in = cfg.decoder_width(cfg.stages - 1);
    push(
        "output_proj".into(),
        conv_params(out_in, cfg.in_channels, 3, 3, 1),
        conv_macs(out_in, cfg.in_channels, 3, 3, 1, hp, wp),
    );

    let total_params = rows.iter().map(|r| r.params).sum();
    let total_macs = rows.iter().map(|r| r.macs).sum();
    let assumptions = vec![
        "one MAC = one multiply-accumulate (not 2 FLOPs)".to_string(),
        "softmax/activation/normalization arithmetic excluded from MACs".to_string(),
        format!("reference resolution {h}x{w} (padded to {hp}x{wp})"),
        format!("LeFF expansion ratio = {}", cfg.leff_ratio),
        "Q/K/V projections carry no bias; output projection carries a bias".to_string(),
        "relative position bias tables are per-head".to_string(),
        format!(
            "skip mode = {}; concat runs decoder stages at doubled width",
            cfg.skip_mode.as_str()
        ),
        format!(
            "modulators {} (m^2 x width params per decoder block)",
            if cfg.use_modulator { "on" } else { "off" }
        ),
        format!("bottleneck depth = {}", cfg.bottleneck_depth),
    ];
    Ok(CostReport {
        rows,
        total_params,
        total_macs,
        resolution: (h, w),
        assumptions,
    })
}

/// Cost report at the default reference resolution.
pub fn count_params(cfg: &UformerConfig) -> Result<CostReport> {
    count_macs(cfg, DEFAULT_RESOLUTION, DEFAULT_RESOLUTION)
}
