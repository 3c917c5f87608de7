use rayon::prelude::*;

use super::{ParamId, ParamStore, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise functions with known derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    /// `exp(min(x, EXP_MAX))`
    Exp,
    /// `ln(max(x, MIN_POSITIVE))`
    Log,
    /// Gradient is taken as zero at `x = 0`.
    Sqrt,
    Abs,
    Neg,
    /// `sin(√s)/√s`, the first Rodrigues coefficient as a function of `s = θ²`.
    RodriguesA,
    /// `(1 − cos √s)/s`, the second Rodrigues coefficient.
    RodriguesB,
    /// `acos(c)/sin(acos(c))`, the scale turning `vee(R − Rᵀ)/2` into an axis-angle vector.
    AngleOverSine,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    Unary(Var, Unary),
    Scale(Var, T),
    Shift(Var),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Arena of recorded operations. One tape per forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every parameter binding, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[T]>)> + '_ {
        self.params
            .iter()
            .map(move |&(id, node)| (id, self.grads[node].as_deref()))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `[outer, axis, inner]` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Node<T>, TensorError> {
        self.nodes.get(v.0).ok_or(TensorError::Detached)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_f64(&mut self, shape: &[usize], data: &[f64]) -> Result<Var, TensorError> {
        Ok(self.constant(Tensor::from_f64(shape, data)?))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(T::from_f64(v)))
    }

    /// Binds a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.push(value, Op::Param(id), true)
    }

    // ---- elementwise binary ------------------------------------------------

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, TensorError> {
        let (sa, sb) = (self.check(a)?.value.shape(), self.check(b)?.value.shape());
        if sa == sb {
            return Ok(sa.to_vec());
        }
        if numel(sb) == 1 {
            return Ok(sa.to_vec());
        }
        if numel(sa) == 1 {
            return Ok(sb.to_vec());
        }
        Err(TensorError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let shape = self.broadcast_shape(name, a, b)?;
        let n = numel(&shape);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = (0..n)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, op, needs))
    }

    /// Elementwise sum; either operand may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds `bias[c]` along axis 1 of an `[N, C, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let sx = self.check(x)?.value.shape().to_vec();
        let sb = self.check(bias)?.value.shape().to_vec();
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let (outer, c, inner) = split_axis(&sx, 1);
        let (vx, vb) = (self.value(x).data(), self.value(bias).data());
        let mut data = vx.to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for v in &mut data[base..base + inner] {
                    *v += vb[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor { shape: sx, data }, Op::AddBias(x, bias), needs))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.check(a)?.value.shape().to_vec();
        let sb = self.check(b)?.value.shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            needs,
        ))
    }

    /// 2-D cross-correlation. `input: [N, C, H, W]`, `weight: [O, C, KH, KW]`,
    /// zero padding `pad` on every side.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.check(input)?.value.shape().to_vec();
        let sw = self.check(weight)?.value.shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        if sw[2] > sx[2] + 2 * pad || sw[3] > sx[3] + 2 * pad {
            return Err(TensorError::KernelTooLarge {
                kernel: sw,
                input: sx,
            });
        }
        let geo = ConvGeometry::new(&sx, &sw, stride, pad);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![T::ZERO; geo.n * geo.o * geo.out_plane()];
        out.par_chunks_mut(geo.o * geo.out_plane())
            .zip(x.par_chunks(geo.c * geo.h * geo.w))
            .for_each(|(out_item, x_item)| {
                let cols = geo.im2col(x_item);
                gemm_nn(w, &cols, out_item, geo.o, geo.col_rows(), geo.out_plane());
            });
        let needs = self.needs(input) || self.needs(weight);
        Ok(self.push(
            Tensor {
                shape: vec![geo.n, geo.o, geo.oh, geo.ow],
                data: out,
            },
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.check(x)?.value.shape().to_vec();
        if s.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "upsample2x",
                reason: format!("expected rank 4, got {s:?}"),
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut data = vec![T::ZERO; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![s[0], s[1], 2 * h, 2 * w],
                data,
            },
            Op::Upsample2x(x),
            needs,
        ))
    }

    // ---- elementwise unary -------------------------------------------------

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var, TensorError> {
        let node = self.check(x)?;
        let shape = node.value.shape().to_vec();
        let data = node.value.data().iter().map(|&v| unary_value(f, v)).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape, data }, Op::Unary(x, f), needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Abs)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Unary::Neg)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let c = T::from_f64(c);
        let node = self.check(x)?;
        let shape = node.value.shape().to_vec();
        let data = node.value.data().iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape, data }, Op::Scale(x, c), needs))
    }

    /// Adds a constant.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let c = T::from_f64(c);
        let node = self.check(x)?;
        let shape = node.value.shape().to_vec();
        let data = node.value.data().iter().map(|&v| v + c).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape, data }, Op::Shift(x), needs))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: T = self.check(x)?.value.data().iter().copied().sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), needs))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let d = self.check(x)?.value.data();
        if d.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let s: T = d.iter().copied().sum::<T>() / T::from_f64(d.len() as f64);
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), needs))
    }

    /// Sum of squares of all elements.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: T = self.check(x)?.value.data().iter().map(|&v| v * v).sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::SumSq(x), needs))
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self
            .check(*parts.first().ok_or(TensorError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            })?)?
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.check(p)?.value.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.check(x)?.value.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!("[{start}, {}) out of range on axis {axis} of {s:?}", start + len),
            });
        }
        let (outer, extent, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor { shape, data },
            Op::Slice {
                input: x,
                axis,
                start,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let node = self.check(x)?;
        if numel(shape) != node.value.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: node.value.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = node.value.data().to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape(x),
            needs,
        ))
    }

    /// `[N, ...] → [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.check(x)?.value.shape().to_vec();
        let n = *s.first().unwrap_or(&1);
        let rest = numel(&s[1.min(s.len())..]);
        self.reshape(x, &[n, rest])
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let root = self.check(loss)?;
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]))
    }

    /// Adds `g[i] * scale(i)` into `v`, summing when `v` is broadcast.
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<T>>],
        v: Var,
        g: &[T],
        scale: impl Fn(usize) -> T,
    ) {
        if let Some(buf) = self.grad_buf(grads, v) {
            if buf.len() == 1 && g.len() != 1 {
                let mut s = T::ZERO;
                for i in 0..g.len() {
                    s += g[i] * scale(i);
                }
                buf[0] += s;
            } else {
                for i in 0..g.len() {
                    buf[i] += g[i] * scale(i);
                }
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let at = |v: &[T], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g, |_| T::ONE);
                self.acc_broadcast(grads, *b, g, |_| T::ONE);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, g, |_| T::ONE);
                self.acc_broadcast(grads, *b, g, |_| -T::ONE);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_broadcast(grads, *a, g, |i| at(vb, i));
                self.acc_broadcast(grads, *b, g, |i| at(va, i));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_broadcast(grads, *a, g, |i| T::ONE / at(vb, i));
                self.acc_broadcast(grads, *b, g, |i| {
                    let d = at(vb, i);
                    -at(va, i) / (d * d)
                });
            }
            Op::AddBias(x, bias) => {
                self.acc_broadcast(grads, *x, g, |_| T::ONE);
                let shape = self.value(*x).shape().to_vec();
                let (outer, c, inner) = split_axis(&shape, 1);
                if let Some(buf) = self.grad_buf(grads, *bias) {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            buf[ch] += g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(buf) = self.grad_buf(grads, *a) {
                    gemm_nt_acc(g, vb, buf, m, n, k);
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    gemm_tn_acc(va, g, buf, m, k, n);
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            } => {
                let geo = ConvGeometry::new(
                    self.value(*input).shape(),
                    self.value(*weight).shape(),
                    *stride,
                    *pad,
                );
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let item_out = geo.o * geo.out_plane();
                let item_in = geo.c * geo.h * geo.w;
                if self.needs(*weight) {
                    let partials: Vec<Vec<T>> = x
                        .par_chunks(item_in)
                        .zip(g.par_chunks(item_out))
                        .map(|(x_item, g_item)| {
                            let cols = geo.im2col(x_item);
                            let mut dw = vec![T::ZERO; w.len()];
                            gemm_nt_acc(g_item, &cols, &mut dw, geo.o, geo.out_plane(), geo.col_rows());
                            dw
                        })
                        .collect();
                    let buf = self.grad_buf(grads, *weight).expect("weight needs grad");
                    for p in &partials {
                        for (d, s) in buf.iter_mut().zip(p) {
                            *d += *s;
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *input) {
                    buf.par_chunks_mut(item_in)
                        .zip(g.par_chunks(item_out))
                        .for_each(|(dx_item, g_item)| {
                            let mut dcols = vec![T::ZERO; geo.col_rows() * geo.out_plane()];
                            gemm_tn_acc(w, g_item, &mut dcols, geo.o, geo.col_rows(), geo.out_plane());
                            geo.col2im_acc(&dcols, dx_item);
                        });
                }
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape().to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for p in 0..planes {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                buf[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::Unary(x, f) => {
                let vx = self.value(*x).data();
                let vy = node.value.data();
                let f = *f;
                self.acc_broadcast(grads, *x, g, |i| unary_derivative(f, vx[i], vy[i]));
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc_broadcast(grads, *x, g, |_| c);
            }
            Op::Shift(x) => self.acc_broadcast(grads, *x, g, |_| T::ONE),
            Op::Sum(x) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    buf.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    let s = g[0] / T::from_f64(buf.len() as f64);
                    buf.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::SumSq(x) => {
                let vx = self.value(*x).data();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    let two = T::from_f64(2.0);
                    for (b, &v) in buf.iter_mut().zip(vx) {
                        *b += two * v * g[0];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let extent = self.value(p).shape()[*axis];
                    if let Some(buf) = self.grad_buf(grads, p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * extent * inner;
                            for i in 0..extent * inner {
                                buf[dst + i] += g[src + i];
                            }
                        }
                    }
                    offset += extent;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.value(*input).shape().to_vec();
                let len = node.value.shape()[*axis];
                let (outer, extent, inner) = split_axis(&in_shape, *axis);
                if let Some(buf) = self.grad_buf(grads, *input) {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            buf[dst + i] += g[src + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => self.acc_broadcast(grads, *x, g, |_| T::ONE),
        }
    }
}

// ---- special functions ------------------------------------------------------

const SERIES_S: f64 = 1e-2;
const SERIES_U: f64 = 1e-4;

pub(crate) fn rodrigues_a(s: f64) -> (f64, f64) {
    let s = s.max(0.0);
    if s < SERIES_S {
        let v = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0;
        let d = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0 + s * s * s / 90720.0;
        (v, d)
    } else {
        let t = s.sqrt();
        let (sn, cs) = t.sin_cos();
        (sn / t, (t * cs - sn) / (2.0 * t * s))
    }
}

pub(crate) fn rodrigues_b(s: f64) -> (f64, f64) {
    let s = s.max(0.0);
    if s < SERIES_S {
        let v = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0;
        let d = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0 + s * s * s / 907200.0;
        (v, d)
    } else {
        let t = s.sqrt();
        let (sn, cs) = t.sin_cos();
        (
            (1.0 - cs) / s,
            (t * sn - 2.0 * (1.0 - cs)) / (2.0 * s * s),
        )
    }
}

pub(crate) fn angle_over_sine(c: f64) -> (f64, f64) {
    // u = 1 - cos θ; stay clear of θ = π where the ratio diverges
    let u = (1.0 - c).clamp(0.0, 2.0 - 1e-9);
    if u < SERIES_U {
        let v = 1.0 + u / 3.0 + 2.0 * u * u / 15.0 + 2.0 * u * u * u / 35.0;
        let d = -(1.0 / 3.0 + 4.0 * u / 15.0 + 6.0 * u * u / 35.0);
        (v, d)
    } else {
        let c = 1.0 - u;
        let t = c.acos();
        let sn = t.sin();
        (t / sn, -(sn - t * c) / (sn * sn * sn))
    }
}

fn unary_value<T: Scalar>(f: Unary, x: T) -> T {
    match f {
        Unary::Relu => {
            if x > T::ZERO {
                x
            } else {
                T::ZERO
            }
        }
        Unary::Sigmoid => T::ONE / (T::ONE + (-x).min(T::EXP_MAX).exp()),
        Unary::Tanh => x.tanh(),
        Unary::Exp => x.min(T::EXP_MAX).exp(),
        Unary::Log => x.max(T::MIN_POSITIVE).ln(),
        Unary::Sqrt => x.max(T::ZERO).sqrt(),
        Unary::Abs => x.abs(),
        Unary::Neg => -x,
        Unary::RodriguesA => T::from_f64(rodrigues_a(x.to_f64()).0),
        Unary::RodriguesB => T::from_f64(rodrigues_b(x.to_f64()).0),
        Unary::AngleOverSine => T::from_f64(angle_over_sine(x.to_f64()).0),
    }
}

fn unary_derivative<T: Scalar>(f: Unary, x: T, y: T) -> T {
    match f {
        Unary::Relu => {
            if x > T::ZERO {
                T::ONE
            } else {
                T::ZERO
            }
        }
        Unary::Sigmoid => y * (T::ONE - y),
        Unary::Tanh => T::ONE - y * y,
        Unary::Exp => {
            if x < T::EXP_MAX {
                y
            } else {
                T::ZERO
            }
        }
        Unary::Log => T::ONE / x.max(T::MIN_POSITIVE),
        Unary::Sqrt => {
            if y > T::ZERO {
                T::from_f64(0.5) / y
            } else {
                T::ZERO
            }
        }
        Unary::Abs => {
            if x > T::ZERO {
                T::ONE
            } else if x < T::ZERO {
                -T::ONE
            } else {
                T::ZERO
            }
        }
        Unary::Neg => -T::ONE,
        Unary::RodriguesA => T::from_f64(rodrigues_a(x.to_f64()).1),
        Unary::RodriguesB => T::from_f64(rodrigues_b(x.to_f64()).1),
        Unary::AngleOverSine => T::from_f64(angle_over_sine(x.to_f64()).1),
    }
}

// ---- dense kernels ------------------------------------------------------------

/// `c += a[m,k] · b[k,n]`
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::ZERO {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = T::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + kk] += s;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::ZERO {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Self {
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Source offset within one item for column row `r` and output pixel `(oy, ox)`.
    fn source(&self, r: usize, oy: usize, ox: usize) -> Option<usize> {
        let kx = r % self.kw;
        let ky = (r / self.kw) % self.kh;
        let ch = r / (self.kw * self.kh);
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((ch * self.h + y) * self.w + x)
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let plane = self.out_plane();
        let mut cols = vec![T::ZERO; self.col_rows() * plane];
        for r in 0..self.col_rows() {
            let row = &mut cols[r * plane..(r + 1) * plane];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    if let Some(s) = self.source(r, oy, ox) {
                        row[oy * self.ow + ox] = x[s];
                    }
                }
            }
        }
        cols
    }

    fn col2im_acc<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.out_plane();
        for r in 0..self.col_rows() {
            let row = &cols[r * plane..(r + 1) * plane];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    if let Some(s) = self.source(r, oy, ox) {
                        dx[s] += row[oy * self.ow + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 3], &[1., -2., 3., 0.5, 5., 6.]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.5]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        let expect: Vec<f64> = tape.value(x).data().iter().map(|v| v * 2.5).collect();
        assert_eq!(tape.value(y).data(), &expect[..]);
    }

    #[test]
    fn conv_rejects_large_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k, 1, 0),
            Err(TensorError::KernelTooLarge { .. })
        ));
        assert!(tape.conv2d(x, k, 1, 1).is_ok());
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::new();
        let id = store.add("x", t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let x = tape.param(&store, id);
        let loss = tape.sum_sq(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let mut store = ParamStore::new();
        let id = store.add("x", t(&[2], &[1.0, 2.0]));
        let _x = tape.param(&store, id);
        let loss = tape.scalar(3.0);
        let g = tape.backward(loss).unwrap();
        store.set_grads(&g);
        assert_eq!(store.get(id).grad.as_deref(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
        let other = Tape::<f64>::new();
        assert!(matches!(other.backward(x), Err(TensorError::Detached)));
    }

    #[test]
    fn guarded_domains_stay_finite() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(&[4], &[0.0, -1.0, 1e6, -1e6]).unwrap());
        for f in [Unary::Log, Unary::Exp, Unary::Sqrt, Unary::Sigmoid, Unary::Tanh] {
            let y = tape.unary(x, f).unwrap();
            assert!(tape.value(y).is_finite(), "{f:?}");
        }
    }

    #[test]
    fn special_functions_match_closed_forms() {
        for s in [1e-6, 5e-3, 0.02, 0.5, 2.0] {
            let th: f64 = s.sqrt();
            assert!((rodrigues_a(s).0 - th.sin() / th).abs() < 1e-12);
            assert!((rodrigues_b(s).0 - (1.0 - th.cos()) / s).abs() < 1e-10);
        }
        for th in [1e-3f64, 0.01, 0.3, 2.0] {
            let c = th.cos();
            assert!((angle_over_sine(c).0 - th / th.sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let a = tape.slice(x, 1, 0, 1).unwrap();
        let b = tape.slice(x, 1, 1, 2).unwrap();
        assert_eq!(tape.value(b).data(), &[2., 3., 5., 6.]);
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
}
