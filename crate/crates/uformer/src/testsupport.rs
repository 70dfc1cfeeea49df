//! Independent reference implementations and fixture builders used by the
//! test suites. Nothing here goes through the tape: the oracles are plain
//! loops over `Vec<f64>` so they can disagree with the real kernels.
#![doc(hidden)]

use crate::lewin::{LeWinBlockParams, LeffParams, Modulator, WmsaParams};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::windowing::RelPosIndex;

/// Plain-vector multi-head attention parameters for the oracle.
pub struct NaiveMha {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub wo_bias: Vec<f64>,
    pub rel_bias: Vec<f64>,
    pub heads: usize,
}

/// Direct O((HW)^2) global multi-head attention with relative position bias,
/// on a `[c, h, w]` map flattened to channel-last tokens. Mirrors the
/// documented conventions (scale before bias, max-subtracted softmax) but is
/// written as independent straight-line loops.
pub fn naive_global_mha(x: &[f64], c: usize, h: usize, w: usize, p: &NaiveMha) -> Vec<f64> {
    assert_eq!(h, w, "oracle assumes a square map used as one window");
    let m = h;
    let hw = h * w;
    let heads = p.heads;
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let idx = RelPosIndex::new(m);
    let buckets = idx.num_buckets();
    let tok = |t: usize, ch: usize| x[(ch * h + t / w) * w + t % w];

    let mut concat = vec![0.0; hw * c];
    for head in 0..heads {
        let col0 = head * dk;
        let project = |weight: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; hw * dk];
            for t in 0..hw {
                for d in 0..dk {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += tok(t, ch) * weight[ch * c + col0 + d];
                    }
                    out[t * dk + d] = acc;
                }
            }
            out
        };
        let q = project(&p.wq);
        let k = project(&p.wk);
        let v = project(&p.wv);

        let mut probs = vec![0.0; hw * hw];
        for i in 0..hw {
            let mut row = vec![0.0; hw];
            for (j, r) in row.iter_mut().enumerate() {
                let mut dot = 0.0;
                for d in 0..dk {
                    dot += q[i * dk + d] * k[j * dk + d];
                }
                *r = dot * scale + p.rel_bias[head * buckets + idx.get(i, j)];
            }
            let mut maxv = row[0];
            for &rv in &row[1..] {
                if rv > maxv {
                    maxv = rv;
                }
            }
            let mut denom = 0.0;
            for r in row.iter_mut() {
                *r = (*r - maxv).exp();
                denom += *r;
            }
            for (j, &rv) in row.iter().enumerate() {
                probs[i * hw + j] = rv / denom;
            }
        }

        for i in 0..hw {
            for d in 0..dk {
                let mut acc = 0.0;
                for j in 0..hw {
                    acc += probs[i * hw + j] * v[j * dk + d];
                }
                concat[i * c + col0 + d] = acc;
            }
        }
    }

    // output projection back to [c, h, w]
    let mut out = vec![0.0; c * hw];
    for t in 0..hw {
        for ch in 0..c {
            let mut acc = 0.0;
            for c2 in 0..c {
                acc += concat[t * c + c2] * p.wo[c2 * c + ch];
            }
            out[(ch * h + t / w) * w + t % w] = acc + p.wo_bias[ch];
        }
    }
    out
}

fn rand_tensor<S: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::from_f64(rng.normal() * std))
}

pub fn random_wmsa<S: Scalar>(
    rng: &mut Rng,
    c: usize,
    heads: usize,
    m: usize,
) -> WmsaParams<Tensor<S>> {
    let buckets = (2 * m - 1) * (2 * m - 1);
    WmsaParams {
        wq: rand_tensor(rng, &[c, c], 0.2),
        wk: rand_tensor(rng, &[c, c], 0.2),
        wv: rand_tensor(rng, &[c, c], 0.2),
        wo: rand_tensor(rng, &[c, c], 0.2),
        wo_bias: rand_tensor(rng, &[c], 0.2),
        rel_bias: rand_tensor(rng, &[heads, buckets], 0.2),
        heads,
    }
}

pub fn random_leff<S: Scalar>(rng: &mut Rng, c: usize, ratio: usize) -> LeffParams<Tensor<S>> {
    let hidden = c * ratio;
    LeffParams {
        fc1_w: rand_tensor(rng, &[c, hidden], 0.2),
        fc1_b: rand_tensor(rng, &[hidden], 0.1),
        dw_w: rand_tensor(rng, &[hidden, 1, 3, 3], 0.2),
        dw_b: rand_tensor(rng, &[hidden], 0.1),
        fc2_w: rand_tensor(rng, &[hidden, c], 0.2),
        fc2_b: rand_tensor(rng, &[c], 0.1),
    }
}

pub fn random_block<S: Scalar>(
    rng: &mut Rng,
    c: usize,
    heads: usize,
    m: usize,
    shifted: bool,
    with_modulator: bool,
) -> LeWinBlockParams<Tensor<S>> {
    LeWinBlockParams {
        norm1_g: Tensor::full(&[c], S::ONE),
        norm1_b: Tensor::zeros(&[c]),
        attn: random_wmsa(rng, c, heads, m),
        cross: None,
        kv_concat_enc: false,
        norm2_g: Tensor::full(&[c], S::ONE),
        norm2_b: Tensor::zeros(&[c]),
        leff: random_leff(rng, c, 4),
        modulator: with_modulator.then(|| Modulator {
            bias: rand_tensor(rng, &[m, m, c], 0.1),
        }),
        shifted,
        modulator_pre_shift: false,
    }
}

pub fn enter_wmsa<S: Scalar>(
    tape: &mut Tape<S>,
    p: &WmsaParams<Tensor<S>>,
    requires_grad: bool,
) -> WmsaParams<Var> {
    p.map(&mut |t| tape.leaf(t, requires_grad))
}

pub fn enter_leff<S: Scalar>(
    tape: &mut Tape<S>,
    p: &LeffParams<Tensor<S>>,
    requires_grad: bool,
) -> LeffParams<Var> {
    p.map(&mut |t| tape.leaf(t, requires_grad))
}

pub fn enter_block<S: Scalar>(
    tape: &mut Tape<S>,
    p: &LeWinBlockParams<Tensor<S>>,
    requires_grad: bool,
) -> LeWinBlockParams<Var> {
    p.map(&mut |t| tape.leaf(t, requires_grad))
}
