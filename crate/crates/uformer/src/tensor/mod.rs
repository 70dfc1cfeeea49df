//! Dense tensors and reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable shaped value. A [`Tape`] executes primitive
//! operations eagerly while recording enough to replay adjoints in reverse;
//! [`Var`] is a handle to a tensor living on a tape. Parameters enter a tape
//! as leaves with `requires_grad`, and [`Tape::backward`] accumulates
//! gradients into their grad slots.
//!
//! Everything is row-major. Execution order is fixed, so a seeded run is
//! bitwise reproducible; the only threading (batched matmul) splits disjoint
//! output chunks and cannot change results.

pub mod kernels;

use crate::error::{Error, Result};
use crate::scalar::{gelu, gelu_grad, Scalar};
use kernels::{ConvGeom, ConvTGeom};
use std::sync::Arc;

/// Immutable shaped value. Cloning shares the underlying buffer.
#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor construction", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor<S> {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![S::ZERO; numel]),
        }
    }

    pub fn full(shape: &[usize], value: S) -> Tensor<S> {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: S) -> Tensor<S> {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Tensor<S> {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..numel).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.to_vec()
    }

    /// Replace the buffer in place when uniquely owned, otherwise reallocate.
    /// Only the optimizer mutates tensors, through this.
    pub fn update_data(&mut self, new_data: Vec<S>) -> Result<()> {
        if new_data.len() != self.numel() {
            return Err(Error::shape("update_data", &self.shape, &[new_data.len()]));
        }
        self.data = Arc::new(new_data);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert precision (used by the f64 verification mode).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.to_f64())).collect()),
        }
    }

    fn shared(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }
}

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

/// One executed primitive, with what backward needs saved.
enum Record<S: Scalar> {
    Add {
        a: Var,
        b: Var,
        out: Var,
    },
    Sub {
        a: Var,
        b: Var,
        out: Var,
    },
    Mul {
        a: Var,
        b: Var,
        out: Var,
    },
    Scale {
        a: Var,
        c: S,
        out: Var,
    },
    AddScalar {
        a: Var,
        out: Var,
    },
    Sqrt {
        a: Var,
        out: Var,
    },
    Gelu {
        a: Var,
        out: Var,
    },
    LeakyRelu {
        a: Var,
        slope: S,
        out: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        dims: MatDims,
        out: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out: Var,
    },
    ConvT2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvTGeom,
        out: Var,
    },
    Softmax {
        axis: usize,
        out: Var,
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        out: Var,
    },
    Remap {
        a: Var,
        map: Arc<Vec<usize>>,
        out: Var,
    },
    Reshape {
        a: Var,
        out: Var,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
        out: Var,
    },
    SumAll {
        a: Var,
        out: Var,
    },
    MeanAll {
        a: Var,
        out: Var,
    },
}

#[derive(Clone, Copy, Debug)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    transpose_b: bool,
}

/// Executes primitives eagerly and records them for reverse-mode replay.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    records: Vec<Record<S>>,
    grad_enabled: bool,
    check_finite: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Tape<S> {
        Tape {
            nodes: Vec::new(),
            records: Vec::new(),
            grad_enabled: true,
            check_finite: false,
        }
    }

    /// A tape that executes without recording (forward-only).
    pub fn inference() -> Tape<S> {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    /// Diagnostic mode: fail fast when any op produces NaN/Inf.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn num_ops(&self) -> usize {
        self.records.len()
    }

    // ---- node plumbing -------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            data: t.shared(),
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op_name: &str) -> Result<Var> {
        if self.check_finite && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name.into() });
        }
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            grad: None,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn record(&mut self, r: Record<S>) {
        if self.grad_enabled {
            self.records.push(r);
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: Arc::clone(&self.nodes[v.0].data),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_out_shape(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::shape("add", self.shape(a), self.shape(b)))?;
        let data = broadcast_binary(
            self.data(a),
            self.shape(a),
            self.data(b),
            self.shape(b),
            &out_shape,
            |x, y| x + y,
        );
        let out = self.push(out_shape, data, "add")?;
        self.record(Record::Add { a, b, out });
        Ok(out)
    }

    /// Same-shape subtraction.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("sub", self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let out = self.push(self.shape(a).to_vec(), data, "sub")?;
        self.record(Record::Sub { a, b, out });
        Ok(out)
    }

    /// Same-shape elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let out = self.push(self.shape(a).to_vec(), data, "mul")?;
        self.record(Record::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let out = self.push(self.shape(a).to_vec(), data, "scale")?;
        self.record(Record::Scale { a, c, out });
        Ok(out)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x + c).collect();
        let out = self.push(self.shape(a).to_vec(), data, "add_scalar")?;
        self.record(Record::AddScalar { a, out });
        Ok(out)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x.sqrt()).collect();
        let out = self.push(self.shape(a).to_vec(), data, "sqrt")?;
        self.record(Record::Sqrt { a, out });
        Ok(out)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .data(a)
            .iter()
            .map(|&x| S::from_f64(gelu(x.to_f64())))
            .collect();
        let out = self.push(self.shape(a).to_vec(), data, "gelu")?;
        self.record(Record::Gelu { a, out });
        Ok(out)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Result<Var> {
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > S::ZERO { x } else { x * slope })
            .collect();
        let out = self.push(self.shape(a).to_vec(), data, "leaky_relu")?;
        self.record(Record::LeakyRelu { a, slope, out });
        Ok(out)
    }

    // ---- linear algebra --------------------------------------------------

    /// Matrix product with optional batching. `a` is `[.., m, k]`;
    /// `b` is `[k, n]` (shared across the batch) or `[.., k, n]` with batch
    /// dims equal to `a`'s. With `transpose_b`, `b`'s trailing dims are
    /// `[n, k]` instead.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(Error::shape("matmul rank", &a_shape, &b_shape));
        }
        let m = a_shape[a_shape.len() - 2];
        let k = a_shape[a_shape.len() - 1];
        let (bk, n) = {
            let r = b_shape.len();
            if transpose_b {
                (b_shape[r - 1], b_shape[r - 2])
            } else {
                (b_shape[r - 2], b_shape[r - 1])
            }
        };
        if bk != k {
            return Err(Error::shape("matmul inner extent", &a_shape, &b_shape));
        }
        let batch: usize = a_shape[..a_shape.len() - 2].iter().product();
        let b_batched = b_shape.len() > 2;
        if b_batched && b_shape[..b_shape.len() - 2] != a_shape[..a_shape.len() - 2] {
            return Err(Error::shape("matmul batch extents", &a_shape, &b_shape));
        }
        let mut out_shape = a_shape[..a_shape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![S::ZERO; batch * m * n];
        kernels::mm_batched(
            self.data(a),
            self.data(b),
            &mut data,
            batch,
            m,
            k,
            n,
            b_batched,
            transpose_b,
        );
        let out = self.push(out_shape, data, "matmul")?;
        self.record(Record::Matmul {
            a,
            b,
            dims: MatDims {
                batch,
                m,
                k,
                n,
                b_batched,
                transpose_b,
            },
            out,
        });
        Ok(out)
    }

    /// Cross-correlation convolution on `[cin, h, w]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape("conv2d rank", &xs, &ws));
        }
        let (cin, h, width) = (xs[0], xs[1], xs[2]);
        let (cout, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d groups {groups} must divide cin {cin} and cout {cout}"
            )));
        }
        if cpg != cin / groups {
            return Err(Error::shape("conv2d weight channels", &xs, &ws));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let h_num = h + 2 * pad;
        let w_num = width + 2 * pad;
        if h_num < kh
            || w_num < kw
            || !(h_num - kh).is_multiple_of(stride)
            || !(w_num - kw).is_multiple_of(stride)
        {
            return Err(Error::Config(format!(
                "conv2d output extent is not integral: input {h}x{width}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        }
        let h_out = (h_num - kh) / stride + 1;
        let w_out = (w_num - kw) / stride + 1;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: width,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            h_out,
            w_out,
        };
        let mut data = vec![S::ZERO; cout * h_out * w_out];
        kernels::conv2d_forward(self.data(x), self.data(w), &geom, &mut data);
        if let Some(b) = bias {
            let bdata = self.data(b).to_vec();
            for co in 0..cout {
                let bv = bdata[co];
                for v in &mut data[co * h_out * w_out..(co + 1) * h_out * w_out] {
                    *v += bv;
                }
            }
        }
        let out = self.push(vec![cout, h_out, w_out], data, "conv2d")?;
        self.record(Record::Conv2d {
            x,
            w,
            bias,
            geom,
            out,
        });
        Ok(out)
    }

    /// Transposed convolution on `[cin, h, w]`, weight `[cin, cout, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape("conv_transpose2d rank", &xs, &ws));
        }
        if xs[0] != ws[0] {
            return Err(Error::shape("conv_transpose2d channels", &xs, &ws));
        }
        let geom = ConvTGeom {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            cout: ws[1],
            kh: ws[2],
            kw: ws[3],
            stride,
            h_out: (xs[1] - 1) * stride + ws[2],
            w_out: (xs[2] - 1) * stride + ws[3],
        };
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(
                    "conv_transpose2d bias",
                    self.shape(b),
                    &[geom.cout],
                ));
            }
        }
        let mut data = vec![S::ZERO; geom.cout * geom.h_out * geom.w_out];
        kernels::convt2d_forward(self.data(x), self.data(w), &geom, &mut data);
        if let Some(b) = bias {
            let bdata = self.data(b).to_vec();
            let plane = geom.h_out * geom.w_out;
            for co in 0..geom.cout {
                let bv = bdata[co];
                for v in &mut data[co * plane..(co + 1) * plane] {
                    *v += bv;
                }
            }
        }
        let out = self.push(
            vec![geom.cout, geom.h_out, geom.w_out],
            data,
            "conv_transpose2d",
        )?;
        self.record(Record::ConvT2d {
            x,
            w,
            bias,
            geom,
            out,
        });
        Ok(out)
    }

    // ---- normalization & attention pieces --------------------------------

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Config(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data(a);
        let mut data = vec![S::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut maxv = src[base];
                for j in 1..len {
                    let v = src[base + j * inner];
                    if v > maxv {
                        maxv = v;
                    }
                }
                let mut denom = S::ZERO;
                for j in 0..len {
                    let e = (src[base + j * inner] - maxv).exp();
                    data[base + j * inner] = e;
                    denom += e;
                }
                for j in 0..len {
                    data[base + j * inner] = data[base + j * inner] / denom;
                }
            }
        }
        let out = self.push(shape, data, "softmax")?;
        self.record(Record::Softmax { axis, out, a });
        Ok(out)
    }

    /// Layer normalization over the last axis, then affine by gamma/beta.
    #[allow(clippy::needless_range_loop)]
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::Config("layer_norm needs at least one axis".into()))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm affine", self.shape(gamma), &[c]));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let rows = self.numel(x) / c;
        let src = self.data(x);
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut data = vec![S::ZERO; src.len()];
        let mut xhat = vec![S::ZERO; src.len()];
        let mut inv_std = vec![S::ZERO; rows];
        let inv_c = S::from_f64(1.0 / c as f64);
        let eps_s = S::from_f64(eps);
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let istd = S::ONE / (var + eps_s).sqrt();
            inv_std[r] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[r * c + j] = xh;
                data[r * c + j] = g[j] * xh + b[j];
            }
        }
        let out = self.push(shape, data, "layer_norm")?;
        self.record(Record::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            out,
        });
        Ok(out)
    }

    // ---- data movement ---------------------------------------------------

    /// Pure index-space transformation: `out[i] = a[map[i]]`. The adjoint is
    /// scatter-add, which is exact for permutations, rolls, window moves,
    /// crops and reflect padding alike.
    pub fn remap(&mut self, a: Var, out_shape: Vec<usize>, map: Arc<Vec<usize>>) -> Result<Var> {
        let numel: usize = out_shape.iter().product();
        if numel != map.len() {
            return Err(Error::shape("remap table", &out_shape, &[map.len()]));
        }
        let src = self.data(a);
        debug_assert!(map.iter().all(|&i| i < src.len()));
        let data = map.iter().map(|&i| src[i]).collect();
        let out = self.push(out_shape, data, "remap")?;
        self.record(Record::Remap { a, map, out });
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, new_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel(a) {
            return Err(Error::shape("reshape", self.shape(a), &new_shape));
        }
        // Shares the buffer; only metadata changes.
        self.nodes.push(Node {
            shape: new_shape,
            data: Arc::clone(&self.nodes[a.0].data),
            grad: None,
            requires_grad: false,
        });
        let out = Var(self.nodes.len() - 1);
        self.record(Record::Reshape { a, out });
        Ok(out)
    }

    /// Axis permutation (a remap built from the axis order).
    pub fn permute(&mut self, a: Var, order: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if order.len() != shape.len() {
            return Err(Error::shape("permute order", &shape, &[order.len()]));
        }
        let mut seen = vec![false; order.len()];
        for &ax in order {
            if ax >= order.len() || seen[ax] {
                return Err(Error::Config(format!("invalid permutation {order:?}")));
            }
            seen[ax] = true;
        }
        let out_shape: Vec<usize> = order.iter().map(|&ax| shape[ax]).collect();
        let in_strides = row_major_strides(&shape);
        let out_strides = row_major_strides(&out_shape);
        let numel: usize = shape.iter().product();
        let mut map = vec![0usize; numel];
        for (o, slot) in map.iter_mut().enumerate() {
            let mut rem = o;
            let mut src = 0;
            for (d, &os) in out_strides.iter().enumerate() {
                let coord = rem / os;
                rem %= os;
                src += coord * in_strides[order[d]];
            }
            *slot = src;
        }
        self.remap(a, out_shape, Arc::new(map))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::shape("concat rank", &sa, &sb));
        }
        for (d, (&x, &y)) in sa.iter().zip(&sb).enumerate() {
            if d != axis && x != y {
                return Err(Error::shape("concat extents", &sa, &sb));
            }
        }
        let mut out_shape = sa.clone();
        out_shape[axis] += sb[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let outer: usize = sa[..axis].iter().product();
        let stripe_a = sa[axis] * inner;
        let stripe_b = sb[axis] * inner;
        let da = self.data(a);
        let db = self.data(b);
        let mut data = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            data.extend_from_slice(&da[o * stripe_a..(o + 1) * stripe_a]);
            data.extend_from_slice(&db[o * stripe_b..(o + 1) * stripe_b]);
        }
        let out = self.push(out_shape, data, "concat")?;
        self.record(Record::Concat { a, b, axis, out });
        Ok(out)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = kernels::pairwise_sum(self.data(a));
        let out = self.push(vec![], vec![s], "sum_all")?;
        self.record(Record::SumAll { a, out });
        Ok(out)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.numel(a);
        if n == 0 {
            return Err(Error::Config("mean of empty tensor".into()));
        }
        let s = kernels::pairwise_sum(self.data(a)) / S::from_f64(n as f64);
        let out = self.push(vec![], vec![s], "mean_all")?;
        self.record(Record::MeanAll { a, out });
        Ok(out)
    }

    // ---- reverse pass ------------------------------------------------------

    /// Populate gradients of every `requires_grad` leaf reachable from
    /// `loss`. Gradients accumulate additively into leaf grad slots; call
    /// [`Tape::zero_grads`] between steps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.grad_enabled {
            return Err(Error::Usage("backward called on an inference tape".into()));
        }

        // Mark ancestors of the loss so each record is visited exactly once
        // and unrelated subgraphs are skipped.
        let mut marked = vec![false; self.nodes.len()];
        marked[loss.0] = true;
        for rec in self.records.iter().rev() {
            let (out, inputs) = record_edges(rec);
            if marked[out.0] {
                for v in inputs {
                    marked[v.0] = true;
                }
            }
        }

        let mut adj: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![S::ONE]);

        // Split borrows: the replay reads node values and writes adjoints.
        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            let (out, _) = record_edges(rec);
            if !marked[out.0] || adj[out.0].is_none() {
                continue;
            }
            self.replay(rec, &mut adj);
        }
        self.records = records;

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad {
                if let Some(a) = adj[i].take() {
                    match &mut node.grad {
                        Some(g) => {
                            for (gi, ai) in g.iter_mut().zip(a) {
                                *gi += ai;
                            }
                        }
                        None => node.grad = Some(a),
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::needless_range_loop)]
    fn replay(&self, rec: &Record<S>, adj: &mut [Option<Vec<S>>]) {
        let dy = adj[record_edges(rec).0 .0].clone().expect("marked output");
        let mut give = |v: Var, contribution: Vec<S>| {
            let slot = &mut adj[v.0];
            match slot {
                Some(g) => {
                    for (gi, ci) in g.iter_mut().zip(contribution) {
                        *gi += ci;
                    }
                }
                None => *slot = Some(contribution),
            }
        };
        match rec {
            Record::Add { a, b, out } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let so = self.shape(*out).to_vec();
                give(*a, reduce_to_shape(&dy, &so, &sa));
                give(*b, reduce_to_shape(&dy, &so, &sb));
            }
            Record::Sub { a, b, .. } => {
                give(*a, dy.clone());
                give(*b, dy.iter().map(|&v| -v).collect());
            }
            Record::Mul { a, b, .. } => {
                let da = self
                    .data(*b)
                    .iter()
                    .zip(&dy)
                    .map(|(&bv, &g)| bv * g)
                    .collect();
                let db = self
                    .data(*a)
                    .iter()
                    .zip(&dy)
                    .map(|(&av, &g)| av * g)
                    .collect();
                give(*a, da);
                give(*b, db);
            }
            Record::Scale { a, c, .. } => {
                give(*a, dy.iter().map(|&g| g * *c).collect());
            }
            Record::AddScalar { a, .. } => give(*a, dy),
            Record::Sqrt { a, out } => {
                let half = S::from_f64(0.5);
                let y = self.data(*out);
                give(
                    *a,
                    dy.iter().zip(y).map(|(&g, &yv)| g * half / yv).collect(),
                );
            }
            Record::Gelu { a, .. } => {
                let x = self.data(*a);
                give(
                    *a,
                    dy.iter()
                        .zip(x)
                        .map(|(&g, &xv)| g * S::from_f64(gelu_grad(xv.to_f64())))
                        .collect(),
                );
            }
            Record::LeakyRelu { a, slope, .. } => {
                let x = self.data(*a);
                give(
                    *a,
                    dy.iter()
                        .zip(x)
                        .map(|(&g, &xv)| if xv > S::ZERO { g } else { g * *slope })
                        .collect(),
                );
            }
            Record::Matmul { a, b, dims, .. } => {
                let d = *dims;
                let a_data = self.data(*a);
                let b_data = self.data(*b);
                let mut da = vec![S::ZERO; a_data.len()];
                let mut db = vec![S::ZERO; b_data.len()];
                let (asz, bsz, osz) = (d.m * d.k, d.k * d.n, d.m * d.n);
                for i in 0..d.batch {
                    let dy_i = &dy[i * osz..(i + 1) * osz];
                    let a_i = &a_data[i * asz..(i + 1) * asz];
                    let b_i = if d.b_batched {
                        &b_data[i * bsz..(i + 1) * bsz]
                    } else {
                        b_data
                    };
                    let da_i = &mut da[i * asz..(i + 1) * asz];
                    let db_i = if d.b_batched {
                        &mut db[i * bsz..(i + 1) * bsz]
                    } else {
                        &mut db[..]
                    };
                    if d.transpose_b {
                        // C = A B^T: dA = dC B, dB = dC^T A
                        kernels::mm_nn(dy_i, b_i, da_i, d.m, d.n, d.k);
                        kernels::mm_tn(dy_i, a_i, db_i, d.m, d.n, d.k);
                    } else {
                        // C = A B: dA = dC B^T, dB = A^T dC
                        kernels::mm_nt(dy_i, b_i, da_i, d.m, d.n, d.k);
                        kernels::mm_tn(a_i, dy_i, db_i, d.m, d.k, d.n);
                    }
                }
                give(*a, da);
                give(*b, db);
            }
            Record::Conv2d {
                x, w, bias, geom, ..
            } => {
                let mut dx = vec![S::ZERO; self.numel(*x)];
                let mut dw = vec![S::ZERO; self.numel(*w)];
                kernels::conv2d_backward_x(&dy, self.data(*w), geom, &mut dx);
                kernels::conv2d_backward_w(&dy, self.data(*x), geom, &mut dw);
                give(*x, dx);
                give(*w, dw);
                if let Some(b) = bias {
                    let plane = geom.h_out * geom.w_out;
                    let db: Vec<S> = (0..geom.cout)
                        .map(|co| kernels::pairwise_sum(&dy[co * plane..(co + 1) * plane]))
                        .collect();
                    give(*b, db);
                }
            }
            Record::ConvT2d {
                x, w, bias, geom, ..
            } => {
                let mut dx = vec![S::ZERO; self.numel(*x)];
                let mut dw = vec![S::ZERO; self.numel(*w)];
                kernels::convt2d_backward_x(&dy, self.data(*w), geom, &mut dx);
                kernels::convt2d_backward_w(&dy, self.data(*x), geom, &mut dw);
                give(*x, dx);
                give(*w, dw);
                if let Some(b) = bias {
                    let plane = geom.h_out * geom.w_out;
                    let db: Vec<S> = (0..geom.cout)
                        .map(|co| kernels::pairwise_sum(&dy[co * plane..(co + 1) * plane]))
                        .collect();
                    give(*b, db);
                }
            }
            Record::Softmax { axis, out, a } => {
                // dx = y * (dy - sum(dy * y)) per slice
                let shape = self.shape(*out).to_vec();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let y = self.data(*out);
                let mut dx = vec![S::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = S::ZERO;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += dy[idx] * y[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            dx[idx] = y[idx] * (dy[idx] - dot);
                        }
                    }
                }
                give(*a, dx);
            }
            Record::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let c = self.shape(*gamma)[0];
                let rows = self.numel(*x) / c;
                let g = self.data(*gamma);
                let mut dx = vec![S::ZERO; self.numel(*x)];
                let mut dgamma = vec![S::ZERO; c];
                let mut dbeta = vec![S::ZERO; c];
                let inv_c = S::from_f64(1.0 / c as f64);
                for r in 0..rows {
                    let istd = inv_std[r];
                    let mut sum_gd = S::ZERO;
                    let mut sum_gd_xhat = S::ZERO;
                    for j in 0..c {
                        let idx = r * c + j;
                        let gd = dy[idx] * g[j];
                        sum_gd += gd;
                        sum_gd_xhat += gd * xhat[idx];
                        dgamma[j] += dy[idx] * xhat[idx];
                        dbeta[j] += dy[idx];
                    }
                    for j in 0..c {
                        let idx = r * c + j;
                        let gd = dy[idx] * g[j];
                        dx[idx] = istd * (gd - inv_c * sum_gd - xhat[idx] * inv_c * sum_gd_xhat);
                    }
                }
                give(*x, dx);
                give(*gamma, dgamma);
                give(*beta, dbeta);
            }
            Record::Remap { a, map, .. } => {
                let mut dx = vec![S::ZERO; self.numel(*a)];
                for (o, &src) in map.iter().enumerate() {
                    dx[src] += dy[o];
                }
                give(*a, dx);
            }
            Record::Reshape { a, .. } => give(*a, dy),
            Record::Concat { a, b, axis, .. } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let inner: usize = sa[axis + 1..].iter().product();
                let outer: usize = sa[..*axis].iter().product();
                let stripe_a = sa[*axis] * inner;
                let stripe_b = sb[*axis] * inner;
                let mut da = vec![S::ZERO; self.numel(*a)];
                let mut db = vec![S::ZERO; self.numel(*b)];
                for o in 0..outer {
                    let base = o * (stripe_a + stripe_b);
                    da[o * stripe_a..(o + 1) * stripe_a]
                        .copy_from_slice(&dy[base..base + stripe_a]);
                    db[o * stripe_b..(o + 1) * stripe_b]
                        .copy_from_slice(&dy[base + stripe_a..base + stripe_a + stripe_b]);
                }
                give(*a, da);
                give(*b, db);
            }
            Record::SumAll { a, .. } => {
                give(*a, vec![dy[0]; self.numel(*a)]);
            }
            Record::MeanAll { a, .. } => {
                let n = self.numel(*a);
                let g = dy[0] / S::from_f64(n as f64);
                give(*a, vec![g; n]);
            }
        }
    }
}

fn record_edges<S: Scalar>(rec: &Record<S>) -> (Var, Vec<Var>) {
    match rec {
        Record::Add { a, b, out }
        | Record::Sub { a, b, out }
        | Record::Mul { a, b, out }
        | Record::Matmul { a, b, out, .. }
        | Record::Concat { a, b, out, .. } => (*out, vec![*a, *b]),
        Record::Scale { a, out, .. }
        | Record::AddScalar { a, out }
        | Record::Sqrt { a, out }
        | Record::Gelu { a, out }
        | Record::LeakyRelu { a, out, .. }
        | Record::Softmax { a, out, .. }
        | Record::Remap { a, out, .. }
        | Record::Reshape { a, out }
        | Record::SumAll { a, out }
        | Record::MeanAll { a, out } => (*out, vec![*a]),
        Record::Conv2d {
            x, w, bias, out, ..
        }
        | Record::ConvT2d {
            x, w, bias, out, ..
        } => {
            let mut ins = vec![*x, *w];
            if let Some(b) = bias {
                ins.push(*b);
            }
            (*out, ins)
        }
        Record::LayerNorm {
            x,
            gamma,
            beta,
            out,
            ..
        } => (*out, vec![*x, *gamma, *beta]),
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// NumPy-style broadcast result shape (align trailing axes).
fn broadcast_out_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d < rank - a.len() {
            1
        } else {
            a[d - (rank - a.len())]
        };
        let db = if d < rank - b.len() {
            1
        } else {
            b[d - (rank - b.len())]
        };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[d] = da.max(db);
    }
    Some(out)
}

fn broadcast_binary<S: Scalar>(
    a: &[S],
    a_shape: &[usize],
    b: &[S],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    // Suffix fast path: b tiles a.
    if a_shape == out_shape && a_shape.len() >= b_shape.len() {
        let suffix = &a_shape[a_shape.len() - b_shape.len()..];
        if suffix == b_shape {
            return a
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b[i % b.len()]))
                .collect();
        }
    }
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let pad = |s: &[usize]| {
        let mut p = vec![1usize; rank];
        p[rank - s.len()..].copy_from_slice(s);
        p
    };
    let pa = pad(a_shape);
    let pb = pad(b_shape);
    let sa = row_major_strides(&pa);
    let sb = row_major_strides(&pb);
    let so = row_major_strides(out_shape);
    let mut out = Vec::with_capacity(numel);
    for i in 0..numel {
        let mut rem = i;
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank {
            let coord = rem / so[d];
            rem %= so[d];
            if pa[d] != 1 {
                ia += coord * sa[d];
            }
            if pb[d] != 1 {
                ib += coord * sb[d];
            }
        }
        out.push(f(a[ia], b[ib]));
    }
    out
}

/// Sum `grad` (shaped `grad_shape`) down to `target` by collapsing
/// broadcast axes.
fn reduce_to_shape<S: Scalar>(grad: &[S], grad_shape: &[usize], target: &[usize]) -> Vec<S> {
    if grad_shape == target {
        return grad.to_vec();
    }
    let rank = grad_shape.len();
    let mut padded = vec![1usize; rank];
    padded[rank - target.len()..].copy_from_slice(target);
    let target_numel: usize = target.iter().product();
    let sg = row_major_strides(grad_shape);
    let st = row_major_strides(&padded);
    let mut out = vec![S::ZERO; target_numel];
    for (i, &g) in grad.iter().enumerate() {
        let mut rem = i;
        let mut it = 0;
        for d in 0..rank {
            let coord = rem / sg[d];
            rem %= sg[d];
            if padded[d] != 1 {
                it += coord * st[d];
            }
        }
        out[it] += g;
    }
    out
}
