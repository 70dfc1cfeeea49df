//! Central finite-difference verification of the analytic adjoints.
//!
//! All checks run at `f64` with step 1e-5 so scheme error stays far below
//! the pass thresholds (1e-4 for primitives, 1e-3 end-to-end).

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Relative error with a small floor so near-zero pairs compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Check analytic gradients of `build` (a scalar-valued graph over the given
/// leaves) against central differences. When `sample_per_input` is set, only
/// that many coordinates per input are probed (deterministically chosen).
///
/// `fault` is added to the first analytic gradient coordinate; the harness
/// sensitivity test uses it to prove a corrupted adjoint is caught.
pub fn check_inputs(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    tolerance: f64,
    sample_per_input: Option<usize>,
    seed: u64,
    fault: f64,
) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("populated gradient").to_vec())
        .collect();
    if fault != 0.0 {
        if let Some(first) = analytic.first_mut().and_then(|g| g.first_mut()) {
            *first += fault;
        }
    }

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vars: Vec<Var> = tensors.iter().map(|x| t.leaf(x, false)).collect();
        let loss = build(&mut t, &vars)?;
        Ok(t.data(loss)[0])
    };

    let mut rng = Rng::new(seed ^ 0x5EED_C0DE);
    let mut worst = 0.0f64;
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match sample_per_input {
            Some(k) if k < n => {
                let mut picked: Vec<usize> = (0..k).map(|_| rng.below(n)).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..n).collect(),
        };
        for &c in &coords {
            let base = input.data().to_vec();
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut pv = base.clone();
            pv[c] += FD_STEP;
            plus[idx] = Tensor::new(input.shape().to_vec(), pv)?;
            let mut mv = base;
            mv[c] -= FD_STEP;
            minus[idx] = Tensor::new(input.shape().to_vec(), mv)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[idx][c], numeric));
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance,
    })
}

/// Random tensor with entries in [-1, 1).
pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.next_f64() * 2.0 - 1.0)
}

/// The full verification suite: every primitive, the composite blocks, and
/// an end-to-end tiny model, all at f64. `fault` is injected into each
/// check's first analytic gradient (used to prove harness sensitivity).
pub fn full_suite(seed: u64, fault: f64) -> Result<Vec<CheckReport>> {
    let mut reports = primitive_suite(seed, fault)?;
    reports.push(block_check(seed, fault)?);
    reports.push(end_to_end_check(seed, fault)?);
    Ok(reports)
}

pub fn primitive_suite(seed: u64, fault: f64) -> Result<Vec<CheckReport>> {
    let mut rng = Rng::new(seed);
    let mut reports = Vec::new();

    {
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        reports.push(check_inputs(
            "matmul",
            &[a, b],
            |t, v| {
                let c = t.matmul(v[0], v[1], false)?;
                t.sum_all(c)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let a = random_tensor(&mut rng, &[2, 3, 4]);
        let b = random_tensor(&mut rng, &[2, 5, 4]);
        reports.push(check_inputs(
            "matmul_batched_nt",
            &[a, b],
            |t, v| {
                let c = t.matmul(v[0], v[1], true)?;
                t.sum_all(c)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let x = random_tensor(&mut rng, &[2, 6, 6]);
        let w = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = random_tensor(&mut rng, &[3]);
        reports.push(check_inputs(
            "conv2d",
            &[x, w, b],
            |t, v| {
                let c = t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
                t.sum_all(c)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let x = random_tensor(&mut rng, &[3, 5, 5]);
        let w = random_tensor(&mut rng, &[3, 1, 3, 3]);
        reports.push(check_inputs(
            "conv2d_depthwise",
            &[x, w],
            |t, v| {
                let c = t.conv2d(v[0], v[1], None, 1, 1, 3)?;
                t.sum_all(c)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let x = random_tensor(&mut rng, &[2, 8, 8]);
        let w = random_tensor(&mut rng, &[4, 2, 4, 4]);
        reports.push(check_inputs(
            "conv2d_strided",
            &[x, w],
            |t, v| {
                let c = t.conv2d(v[0], v[1], None, 2, 1, 1)?;
                t.sum_all(c)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let x = random_tensor(&mut rng, &[4, 3, 3]);
        let w = random_tensor(&mut rng, &[4, 2, 2, 2]);
        let b = random_tensor(&mut rng, &[2]);
        reports.push(check_inputs(
            "conv_transpose2d",
            &[x, w, b],
            |t, v| {
                let c = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
                t.sum_all(c)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let x = random_tensor(&mut rng, &[2, 5, 3]);
        let weights = random_tensor(&mut rng, &[2, 5, 3]);
        reports.push(check_inputs(
            "softmax",
            &[x],
            move |t, v| {
                let s = t.softmax(v[0], 1)?;
                let w = t.constant(&weights);
                let p = t.mul(s, w)?;
                t.sum_all(p)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let x = random_tensor(&mut rng, &[3, 6]);
        let g = random_tensor(&mut rng, &[6]);
        let b = random_tensor(&mut rng, &[6]);
        let weights = random_tensor(&mut rng, &[3, 6]);
        reports.push(check_inputs(
            "layer_norm",
            &[x, g, b],
            move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let w = t.constant(&weights);
                let p = t.mul(y, w)?;
                t.sum_all(p)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let x = random_tensor(&mut rng, &[17]);
        reports.push(check_inputs(
            "gelu",
            std::slice::from_ref(&x),
            |t, v| {
                let y = t.gelu(v[0])?;
                t.sum_all(y)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
        reports.push(check_inputs(
            "leaky_relu",
            &[x],
            |t, v| {
                let y = t.leaky_relu(v[0], 0.2)?;
                t.sum_all(y)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let a = random_tensor(&mut rng, &[2, 3, 4]);
        let b = random_tensor(&mut rng, &[2, 1, 4]);
        reports.push(check_inputs(
            "add_broadcast",
            &[a, b],
            |t, v| {
                let y = t.add(v[0], v[1])?;
                t.sum_all(y)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let a = random_tensor(&mut rng, &[7]);
        let b = random_tensor(&mut rng, &[7]);
        reports.push(check_inputs(
            "elementwise_chain",
            &[a, b],
            |t, v| {
                let d = t.sub(v[0], v[1])?;
                let sq = t.mul(d, d)?;
                let shifted = t.add_scalar(sq, 1e-6)?;
                let root = t.sqrt(shifted)?;
                let scaled = t.scale(root, 0.7)?;
                t.mean_all(scaled)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let x = random_tensor(&mut rng, &[12]);
        let map: std::sync::Arc<Vec<usize>> =
            std::sync::Arc::new((0..12).map(|i| (i + 5) % 12).collect());
        let weights = random_tensor(&mut rng, &[12]);
        reports.push(check_inputs(
            "remap",
            &[x],
            move |t, v| {
                let y = t.remap(v[0], vec![12], std::sync::Arc::clone(&map))?;
                let w = t.constant(&weights);
                let p = t.mul(y, w)?;
                t.sum_all(p)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let a = random_tensor(&mut rng, &[2, 3]);
        let b = random_tensor(&mut rng, &[4, 3]);
        let weights = random_tensor(&mut rng, &[6, 3]);
        reports.push(check_inputs(
            "concat",
            &[a, b],
            move |t, v| {
                let y = t.concat(v[0], v[1], 0)?;
                let w = t.constant(&weights);
                let p = t.mul(y, w)?;
                t.sum_all(p)
            },
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    {
        let pred = random_tensor(&mut rng, &[3, 5]);
        let target = random_tensor(&mut rng, &[3, 5]);
        reports.push(check_inputs(
            "charbonnier",
            &[pred, target],
            |t, v| crate::train::charbonnier_loss(t, v[0], v[1], 1e-3),
            PRIMITIVE_TOL,
            None,
            seed,
            fault,
        )?);
    }
    Ok(reports)
}

/// Gradient check through one full transformer block (shifted, modulated).
pub fn block_check(seed: u64, fault: f64) -> Result<CheckReport> {
    use crate::lewin::lewin_block_forward;
    use crate::testsupport::{enter_block, random_block};
    let mut rng = Rng::new(seed ^ 0xB10C);
    let (c, heads, m) = (4usize, 2usize, 2usize);
    let params = random_block::<f64>(&mut rng, c, heads, m, true, true);
    let x = random_tensor(&mut rng, &[c, 4, 4]);
    let inputs = vec![
        x,
        params.attn.wq.clone(),
        params.attn.rel_bias.clone(),
        params.modulator.as_ref().unwrap().bias.clone(),
        params.leff.dw_w.clone(),
        params.norm1_g.clone(),
    ];
    check_inputs(
        "lewin_block",
        &inputs,
        move |t, v| {
            let mut p = enter_block(t, &params, false);
            p.attn.wq = v[1];
            p.attn.rel_bias = v[2];
            p.modulator.as_mut().unwrap().bias = v[3];
            p.leff.dw_w = v[4];
            p.norm1_g = v[5];
            let out = lewin_block_forward(t, v[0], &p, m)?;
            let sq = t.mul(out, out)?;
            t.mean_all(sq)
        },
        END_TO_END_TOL,
        Some(6),
        seed,
        fault,
    )
}

/// Whole-model Charbonnier gradient against finite differences on a tiny
/// configuration, probing a few coordinates of every parameter tensor.
pub fn end_to_end_check(seed: u64, fault: f64) -> Result<CheckReport> {
    use crate::model::{build, forward, UformerConfig};
    use crate::train::charbonnier_loss;

    let cfg = UformerConfig {
        base_channels: 4,
        stages: 2,
        encoder_depths: vec![1, 1],
        bottleneck_depth: 1,
        window: 4,
        head_dim: 4,
        ..UformerConfig::default()
    };
    let params = build::<f64>(&cfg, seed)?;
    let mut rng = Rng::new(seed ^ 0xE2E);
    let image = Tensor::from_fn(&[3, 16, 16], |_| rng.next_f64());
    let target = Tensor::from_fn(&[3, 16, 16], |_| rng.next_f64());

    // inputs: the image first, then every parameter tensor in visit order
    let mut inputs = vec![image];
    params.visit(&mut |_, _, t| inputs.push(t.clone()));

    let cfg2 = cfg.clone();
    check_inputs(
        "uformer_end_to_end",
        &inputs,
        move |t, v| {
            let mut next = 1usize;
            let var_params = params.map(&mut |_| {
                let var = v[next];
                next += 1;
                var
            });
            let out = forward(t, v[0], &var_params, &cfg2)?;
            let tgt = t.constant(&target);
            charbonnier_loss(t, out, tgt, 1e-3)
        },
        END_TO_END_TOL,
        Some(3),
        seed,
        fault,
    )
}
