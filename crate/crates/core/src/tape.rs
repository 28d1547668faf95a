//! Minimal reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed as nodes are pushed,
//! and [`Graph::backward`] walks the tape in reverse. Heavy layers (LSTM, group norm,
//! dilated convolution, inverse STFT) are fused single nodes with hand-written adjoints.

use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn, Zip};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::spectral::{ComplexSpectrogram, Stft};

pub type Tensor<T> = ArrayD<T>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct LstmCache<T> {
    // per processed step, in processing order
    gates: Vec<Array2<T>>,
    cells: Vec<Array2<T>>,
    hidden: Vec<Array2<T>>,
}

struct NormCache<T> {
    xhat: ArrayD<T>,
    rstd: Array2<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Tanh(Var),
    Sigmoid(Var),
    PRelu(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice(Var, usize, usize),
    Concat(Vec<Var>, usize),
    Softmax(Var),
    ChannelMean(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        cache: NormCache<T>,
    },
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        reverse: bool,
        cache: LstmCache<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    ComplexMul(Var, Arc<ArrayD<T>>),
    Istft {
        s: Var,
        plan: Arc<Stft<T>>,
    },
    SumAbs(Var),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Recording tape of tensor operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn to2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    let last = *a.shape().last().unwrap_or(&1);
    let rows = if last == 0 { 0 } else { a.len() / last };
    a.view()
        .into_shape_with_order((rows, last))
        .expect("standard layout tensor")
}

fn std_layout<T: Scalar>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.nodes.push(Node {
            value: std_layout(value),
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Learnable leaf bound to a parameter in `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// `x[..., n] + b[n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [n] {
            return Err(shape_err(format!("bias {:?} for features {n}", self.shape(b))));
        }
        let bias = self.value(b).clone();
        let mut v = self.value(x).clone();
        for mut row in v.lanes_mut(Axis(v.ndim() - 1)) {
            row += &bias;
        }
        Ok(self.push(v, Op::AddBias(x, b), &[x, b]))
    }

    /// `x[..., i] · w[i, o] -> [..., o]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(shape_err(format!("matmul {xs:?} x {ws:?}")));
        }
        let w2 = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
        let y = to2(self.value(x)).dot(&w2);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = ws[1];
        let v = y.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        Ok(self.push(v, Op::MatMul(x, w), &[x, w]))
    }

    /// Dense layer `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// `a[s, l, d] · b[s, d, m] -> [s, l, m]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err(format!("batch matmul {sa:?} x {sb:?}")));
        }
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        let mut out = Array3::zeros((sa[0], sa[1], sb[2]));
        for i in 0..sa[0] {
            out.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
        }
        Ok(self.push(out.into_dyn(), Op::BatchMatMul(a, b), &[a, b]))
    }

    pub fn transpose_last(&mut self, a: Var) -> Var {
        let nd = self.value(a).ndim();
        let v = std_layout(self.value(a).clone().reversed_axes_last2(nd));
        self.push(v, Op::TransposeLast(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Parametric ReLU with a single learned slope `alpha[1]`.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        if self.shape(alpha) != [1] {
            return Err(shape_err(format!("prelu slope {:?}", self.shape(alpha))));
        }
        let al = self.value(alpha)[[0]];
        let v = self.value(x).mapv(|z| if z > T::zero() { z } else { al * z });
        Ok(self.push(v, Op::PRelu(x, alpha), &[x, alpha]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| shape_err(format!("reshape {:?} -> {shape:?}: {e}", self.shape(a))))?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        if axes.len() != self.value(a).ndim() {
            return Err(shape_err(format!("permute {axes:?} on {:?}", self.shape(a))));
        }
        let v = std_layout(self.value(a).clone().permuted_axes(IxDyn(axes)));
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(shape_err(format!("slice {start}..{end} of axis {axis} in {shape:?}")));
        }
        let v = self
            .value(a)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        let v = std_layout(v);
        Ok(self.push(v, Op::Slice(a, axis, start), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| shape_err(format!("concat along {axis}: {e}")))?;
        let v = std_layout(v);
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Inserts a new axis at `axis` and concatenates along it.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let expanded = parts
            .iter()
            .map(|&p| {
                let mut shape = self.shape(p).to_vec();
                shape.insert(axis, 1);
                self.reshape(p, &shape)
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat(&expanded, axis)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let last = v.ndim() - 1;
        for mut row in v.lanes_mut(Axis(last)) {
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z: T = row.iter().copied().sum();
            row.mapv_inplace(|x| x / z);
        }
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Mean over axis 1 of `a[g, c, r]`, broadcast back to every `c`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 3 || x.shape()[1] == 0 {
            return Err(shape_err(format!("channel mean expects [g, c, r], got {:?}", x.shape())));
        }
        let mean = x.mean_axis(Axis(1)).expect("non-empty channel axis").insert_axis(Axis(1));
        let v = mean
            .broadcast(x.raw_dim())
            .expect("mean broadcasts over channels")
            .to_owned();
        Ok(self.push(v, Op::ChannelMean(a), &[a]))
    }

    /// Group normalization of `x[s, l, c]` over `(l, channels in group)` per `s`, with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(shape_err(format!("group norm expects [s, l, c], got {shape:?}")));
        }
        let (ns, nl, nc) = (shape[0], shape[1], shape[2]);
        if groups == 0 || nc % groups != 0 || self.shape(gamma) != [nc] || self.shape(beta) != [nc] {
            return Err(shape_err(format!("group norm: {nc} channels, {groups} groups")));
        }
        let eps = T::of(1e-8);
        let cg = nc / groups;
        let count = T::of_usize(nl * cg);
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = Array3::zeros((ns, nl, nc));
        let mut out = Array3::zeros((ns, nl, nc));
        let mut rstd = Array2::zeros((ns, groups));
        for si in 0..ns {
            for g in 0..groups {
                let block = xv.slice(s![si, .., g * cg..(g + 1) * cg]);
                let mean = block.sum() / count;
                let var = block.mapv(|z| (z - mean) * (z - mean)).sum() / count;
                let r = T::one() / (var + eps).sqrt();
                rstd[[si, g]] = r;
                for l in 0..nl {
                    for c in g * cg..(g + 1) * cg {
                        let h = (xv[[si, l, c]] - mean) * r;
                        xhat[[si, l, c]] = h;
                        out[[si, l, c]] = h * gv[[c]] + bv[[c]];
                    }
                }
            }
        }
        let cache = NormCache {
            xhat: xhat.into_dyn(),
            rstd,
        };
        Ok(self.push(
            out.into_dyn(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    /// Single-direction LSTM over `x[s, l, in]` with gate order (input, forget, cell, output).
    ///
    /// `w_ih: [in, 4h]`, `w_hh: [h, 4h]`, `bias: [4h]`. With `reverse` the sequence is consumed
    /// from the last step; outputs stay aligned with their input positions.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let hidden = self.shape(w_hh)[0];
        if xs.len() != 3
            || self.shape(w_ih) != [xs[2], 4 * hidden]
            || self.shape(w_hh) != [hidden, 4 * hidden]
            || self.shape(bias) != [4 * hidden]
        {
            return Err(shape_err(format!(
                "lstm input {xs:?}, w_ih {:?}, w_hh {:?}, bias {:?}",
                self.shape(w_ih),
                self.shape(w_hh),
                self.shape(bias)
            )));
        }
        let (ns, nl) = (xs[0], xs[1]);
        let w_ih2 = self.value(w_ih).view().into_dimensionality::<Ix2>().unwrap();
        let w_hh2 = self.value(w_hh).view().into_dimensionality::<Ix2>().unwrap();
        let b = self.value(bias).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut xw = to2(self.value(x)).dot(&w_ih2);
        xw += &b;
        let xw = xw.into_shape_with_order((ns, nl, 4 * hidden)).unwrap();

        let mut out = Array3::zeros((ns, nl, hidden));
        let mut h = Array2::<T>::zeros((ns, hidden));
        let mut c = Array2::<T>::zeros((ns, hidden));
        let mut cache = LstmCache {
            gates: Vec::with_capacity(nl),
            cells: Vec::with_capacity(nl),
            hidden: Vec::with_capacity(nl),
        };
        for step in 0..nl {
            let l = if reverse { nl - 1 - step } else { step };
            let mut z = xw.slice(s![.., l, ..]).to_owned();
            z += &h.dot(&w_hh2);
            for mut row in z.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if (2 * hidden..3 * hidden).contains(&j) {
                        v.tanh()
                    } else {
                        sigmoid(*v)
                    };
                }
            }
            Zip::from(&mut c)
                .and(z.slice(s![.., 0..hidden]))
                .and(z.slice(s![.., hidden..2 * hidden]))
                .and(z.slice(s![.., 2 * hidden..3 * hidden]))
                .for_each(|c, &i, &f, &g| *c = f * *c + i * g);
            Zip::from(&mut h)
                .and(&c)
                .and(z.slice(s![.., 3 * hidden..]))
                .for_each(|h, &c, &o| *h = o * c.tanh());
            out.slice_mut(s![.., l, ..]).assign(&h);
            cache.gates.push(z);
            cache.cells.push(c.clone());
            cache.hidden.push(h.clone());
        }
        Ok(self.push(
            out.into_dyn(),
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                bias,
                reverse,
                cache,
            },
            &[x, w_ih, w_hh, bias],
        ))
    }

    /// Dilated "same" convolution along axis 1 of `x[s, l, cin]` with `w[k, cin, cout]` (odd `k`).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] || ws[0] % 2 == 0 || self.shape(b) != [ws[2]] {
            return Err(shape_err(format!("conv1d input {xs:?}, kernel {ws:?}")));
        }
        let (ns, nl) = (xs[0], xs[1]);
        let (k, cout) = (ws[0], ws[2]);
        let pad = dilation * (k - 1) / 2;
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = Array3::<T>::zeros((ns, nl, cout));
        out += &bv;
        for j in 0..k {
            let Some((dst, src)) = tap_ranges(j * dilation, pad, nl) else {
                continue;
            };
            let wj = wv.index_axis(Axis(0), j);
            for si in 0..ns {
                let contrib = xv.slice(s![si, src.clone(), ..]).dot(&wj);
                let mut o = out.slice_mut(s![si, dst.clone(), ..]);
                o += &contrib;
            }
        }
        Ok(self.push(out.into_dyn(), Op::Conv1d { x, w, b, dilation }, &[x, w, b]))
    }

    /// Complex product of `m[..., 2]` with a constant `x[..., 2]` (last axis = real, imaginary).
    pub fn complex_mul_const(&mut self, m: Var, x: Arc<ArrayD<T>>) -> Result<Var> {
        if self.shape(m) != x.shape() || x.shape().last() != Some(&2) {
            return Err(shape_err(format!(
                "complex product {:?} with {:?}",
                self.shape(m),
                x.shape()
            )));
        }
        let mv = self.value(m);
        let mut out = ArrayD::zeros(mv.raw_dim());
        let nd = mv.ndim();
        Zip::from(out.lanes_mut(Axis(nd - 1)))
            .and(mv.lanes(Axis(nd - 1)))
            .and(x.lanes(Axis(nd - 1)))
            .for_each(|mut o, a, b| {
                o[0] = a[0] * b[0] - a[1] * b[1];
                o[1] = a[0] * b[1] + a[1] * b[0];
            });
        Ok(self.push(out, Op::ComplexMul(m, x), &[m]))
    }

    /// Inverse STFT of `s[c, f, t, 2]` to exactly `length` samples per channel.
    pub fn istft(&mut self, s: Var, plan: Arc<Stft<T>>, length: usize) -> Result<Var> {
        let spec = tensor_to_spectrogram(self.value(s), plan.frame(), 0)?;
        let w = plan.inverse(&spec, length)?;
        Ok(self.push(w.samples.into_dyn(), Op::Istft { s, plan }, &[s]))
    }

    /// `Σ |a|` as a scalar node.
    pub fn sum_abs(&mut self, a: Var) -> Var {
        let total: T = self.value(a).iter().map(|x| x.abs()).sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), total), Op::SumAbs(a), &[a])
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).iter().copied().next().unwrap_or_else(T::zero)
    }

    /// Backpropagates from the scalar `loss` and returns gradients for every parameter of `store`.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), T::one()));
        let mut out = Gradients::zeros_like(store);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Some(pid) = node.param {
                out.accumulate(pid, &g);
                continue;
            }
            self.backward_node(&node.op, &node.value, g, &mut grads)?;
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<ArrayD<T>>], v: Var, g: ArrayD<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, op: &Op<T>, value: &ArrayD<T>, g: ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.mapv(|x| -x));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, &g * self.value(*b));
                self.acc(grads, *b, &g * self.value(*a));
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * *c),
            Op::AddBias(x, b) => {
                if self.needs(*b) {
                    let gb = to2(&g).sum_axis(Axis(0)).into_dyn();
                    self.acc(grads, *b, gb);
                }
                self.acc(grads, *x, g);
            }
            Op::MatMul(x, w) => {
                let g2 = to2(&g);
                let w2 = self.value(*w).view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(*w) {
                    let gw = to2(self.value(*x)).t().dot(&g2);
                    self.acc(grads, *w, gw.into_dyn());
                }
                if self.needs(*x) {
                    let gx = g2.dot(&w2.t());
                    let gx = gx.into_shape_with_order(self.value(*x).raw_dim()).unwrap();
                    self.acc(grads, *x, gx);
                }
            }
            Op::BatchMatMul(a, b) => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let bv = self.value(*b).view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = Array3::zeros(av.raw_dim());
                let mut gb = Array3::zeros(bv.raw_dim());
                for i in 0..av.shape()[0] {
                    let gi = gv.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
                }
                self.acc(grads, *a, ga.into_dyn());
                self.acc(grads, *b, gb.into_dyn());
            }
            Op::TransposeLast(a) => {
                let nd = g.ndim();
                self.acc(grads, *a, std_layout(g.reversed_axes_last2(nd)));
            }
            Op::Tanh(a) => {
                let gx = Zip::from(&g).and(value).map_collect(|&g, &y| g * (T::one() - y * y));
                self.acc(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let gx = Zip::from(&g).and(value).map_collect(|&g, &y| g * y * (T::one() - y));
                self.acc(grads, *a, gx);
            }
            Op::PRelu(x, alpha) => {
                let al = self.value(*alpha)[[0]];
                let xv = self.value(*x);
                if self.needs(*alpha) {
                    let ga: T = Zip::from(&g)
                        .and(xv)
                        .fold(T::zero(), |acc, &g, &z| if z > T::zero() { acc } else { acc + g * z });
                    self.acc(grads, *alpha, ArrayD::from_elem(IxDyn(&[1]), ga));
                }
                let gx = Zip::from(&g)
                    .and(xv)
                    .map_collect(|&g, &z| if z > T::zero() { g } else { al * g });
                self.acc(grads, *x, gx);
            }
            Op::Reshape(a) => {
                let gx = g.into_shape_with_order(self.value(*a).raw_dim()).unwrap();
                self.acc(grads, *a, gx);
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                self.acc(grads, *a, std_layout(g.permuted_axes(IxDyn(&inverse))));
            }
            Op::Slice(a, axis, start) => {
                let mut gx = ArrayD::zeros(self.value(*a).raw_dim());
                let len = g.shape()[*axis];
                gx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + len))
                    .assign(&g);
                self.acc(grads, *a, gx);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let part = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    self.acc(grads, p, std_layout(part));
                    offset += len;
                }
            }
            Op::Softmax(a) => {
                let mut gx = g.clone();
                let last = gx.ndim() - 1;
                Zip::from(gx.lanes_mut(Axis(last)))
                    .and(value.lanes(Axis(last)))
                    .for_each(|mut gr, y| {
                        let dot: T = gr.iter().zip(y.iter()).map(|(&a, &b)| a * b).sum();
                        Zip::from(&mut gr).and(&y).for_each(|gv, &yv| *gv = yv * (*gv - dot));
                    });
                self.acc(grads, *a, gx);
            }
            Op::ChannelMean(a) => {
                let mean = g.mean_axis(Axis(1)).expect("non-empty channel axis").insert_axis(Axis(1));
                let gx = mean.broadcast(g.raw_dim()).unwrap().to_owned();
                self.acc(grads, *a, gx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            } => self.group_norm_backward(*x, *gamma, *beta, *groups, cache, &g, grads),
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                bias,
                reverse,
                cache,
            } => self.lstm_backward(*x, *w_ih, *w_hh, *bias, *reverse, cache, &g, grads),
            Op::Conv1d { x, w, b, dilation } => self.conv1d_backward(*x, *w, *b, *dilation, &g, grads),
            Op::ComplexMul(m, x) => {
                let nd = g.ndim();
                let mut gm = ArrayD::zeros(g.raw_dim());
                Zip::from(gm.lanes_mut(Axis(nd - 1)))
                    .and(g.lanes(Axis(nd - 1)))
                    .and(x.lanes(Axis(nd - 1)))
                    .for_each(|mut o, gy, b| {
                        o[0] = gy[0] * b[0] + gy[1] * b[1];
                        o[1] = -gy[0] * b[1] + gy[1] * b[0];
                    });
                self.acc(grads, *m, gm);
            }
            Op::Istft { s, plan } => {
                let frames = self.shape(*s)[2];
                let g2 = g.into_dimensionality::<Ix2>().unwrap();
                let adj = plan.inverse_adjoint(&g2, frames)?;
                self.acc(grads, *s, complex_to_tensor(&adj));
            }
            Op::SumAbs(a) => {
                let gs = g.iter().copied().next().unwrap_or_else(T::zero);
                let gx = self.value(*a).mapv(|z| {
                    if z > T::zero() {
                        gs
                    } else if z < T::zero() {
                        -gs
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *a, gx);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        cache: &NormCache<T>,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        let xhat = cache.xhat.view().into_dimensionality::<Ix3>().unwrap();
        let (ns, nl, nc) = gv.dim();
        if self.needs(beta) {
            let gb = gv.sum_axis(Axis(0)).sum_axis(Axis(0));
            self.acc(grads, beta, gb.into_dyn());
        }
        if self.needs(gamma) {
            let gg = (&gv * &xhat).sum_axis(Axis(0)).sum_axis(Axis(0));
            self.acc(grads, gamma, gg.into_dyn());
        }
        if self.needs(x) {
            let gam = self.value(gamma);
            let cg = nc / groups;
            let count = T::of_usize(nl * cg);
            let mut gx = Array3::zeros((ns, nl, nc));
            for si in 0..ns {
                for grp in 0..groups {
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for l in 0..nl {
                        for c in grp * cg..(grp + 1) * cg {
                            let d = gv[[si, l, c]] * gam[[c]];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xhat[[si, l, c]];
                        }
                    }
                    let r = cache.rstd[[si, grp]];
                    for l in 0..nl {
                        for c in grp * cg..(grp + 1) * cg {
                            let d = gv[[si, l, c]] * gam[[c]];
                            gx[[si, l, c]] = r / count * (count * d - sum_d - xhat[[si, l, c]] * sum_dx);
                        }
                    }
                }
            }
            self.acc(grads, x, gx.into_dyn());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        reverse: bool,
        cache: &LstmCache<T>,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) {
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        let (ns, nl, hidden) = gv.dim();
        let w_hh2 = self.value(w_hh).view().into_dimensionality::<Ix2>().unwrap();
        let w_ih2 = self.value(w_ih).view().into_dimensionality::<Ix2>().unwrap();
        let mut dz_all = Array3::<T>::zeros((ns, nl, 4 * hidden));
        let mut gw_hh = Array2::<T>::zeros((hidden, 4 * hidden));
        let mut dh_next = Array2::<T>::zeros((ns, hidden));
        let mut dc_next = Array2::<T>::zeros((ns, hidden));
        let zeros = Array2::<T>::zeros((ns, hidden));
        for step in (0..nl).rev() {
            let l = if reverse { nl - 1 - step } else { step };
            let gates = &cache.gates[step];
            let c = &cache.cells[step];
            let c_prev = if step > 0 { &cache.cells[step - 1] } else { &zeros };
            let h_prev = if step > 0 { &cache.hidden[step - 1] } else { &zeros };
            let mut dz = Array2::<T>::zeros((ns, 4 * hidden));
            for si in 0..ns {
                for j in 0..hidden {
                    let i_g = gates[[si, j]];
                    let f_g = gates[[si, hidden + j]];
                    let g_g = gates[[si, 2 * hidden + j]];
                    let o_g = gates[[si, 3 * hidden + j]];
                    let tc = c[[si, j]].tanh();
                    let dh = gv[[si, l, j]] + dh_next[[si, j]];
                    let d_o = dh * tc;
                    let dc = dh * o_g * (T::one() - tc * tc) + dc_next[[si, j]];
                    dz[[si, j]] = dc * g_g * i_g * (T::one() - i_g);
                    dz[[si, hidden + j]] = dc * c_prev[[si, j]] * f_g * (T::one() - f_g);
                    dz[[si, 2 * hidden + j]] = dc * i_g * (T::one() - g_g * g_g);
                    dz[[si, 3 * hidden + j]] = d_o * o_g * (T::one() - o_g);
                    dc_next[[si, j]] = dc * f_g;
                }
            }
            gw_hh += &h_prev.t().dot(&dz);
            dh_next = dz.dot(&w_hh2.t());
            dz_all.slice_mut(s![.., l, ..]).assign(&dz);
        }
        let dz2 = dz_all.into_shape_with_order((ns * nl, 4 * hidden)).unwrap();
        if self.needs(bias) {
            self.acc(grads, bias, dz2.sum_axis(Axis(0)).into_dyn());
        }
        if self.needs(w_hh) {
            self.acc(grads, w_hh, gw_hh.into_dyn());
        }
        if self.needs(w_ih) {
            let gw = to2(self.value(x)).t().dot(&dz2);
            self.acc(grads, w_ih, gw.into_dyn());
        }
        if self.needs(x) {
            let gx = dz2.dot(&w_ih2.t());
            let gx = gx.into_shape_with_order(self.value(x).raw_dim()).unwrap();
            self.acc(grads, x, gx);
        }
    }

    fn conv1d_backward(&self, x: Var, w: Var, b: Var, dilation: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap();
        let (ns, nl, _) = gv.dim();
        let k = wv.shape()[0];
        let pad = dilation * (k - 1) / 2;
        if self.needs(b) {
            self.acc(grads, b, gv.sum_axis(Axis(0)).sum_axis(Axis(0)).into_dyn());
        }
        let mut gw = Array3::<T>::zeros(wv.raw_dim());
        let mut gx = Array3::<T>::zeros(xv.raw_dim());
        for j in 0..k {
            let Some((dst, src)) = tap_ranges(j * dilation, pad, nl) else {
                continue;
            };
            let wj = wv.index_axis(Axis(0), j);
            for si in 0..ns {
                let gs = gv.slice(s![si, dst.clone(), ..]);
                let xs = xv.slice(s![si, src.clone(), ..]);
                let mut gwj = gw.index_axis_mut(Axis(0), j);
                gwj += &xs.t().dot(&gs);
                let mut gxs = gx.slice_mut(s![si, src.clone(), ..]);
                gxs += &gs.dot(&wj.t());
            }
        }
        self.acc(grads, w, gw.into_dyn());
        self.acc(grads, x, gx.into_dyn());
    }
}

/// Output rows `dst` read input rows `src` for a tap at absolute offset `shift - pad`.
fn tap_ranges(shift: usize, pad: usize, len: usize) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let offset = shift as isize - pad as isize;
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).min(len as isize);
    if hi <= lo as isize {
        return None;
    }
    let hi = hi as usize;
    let src_lo = (lo as isize + offset) as usize;
    Some((lo..hi, src_lo..src_lo + (hi - lo)))
}

trait ReverseLast2 {
    fn reversed_axes_last2(self, nd: usize) -> Self;
}

impl<T> ReverseLast2 for ArrayD<T> {
    fn reversed_axes_last2(mut self, nd: usize) -> Self {
        self.swap_axes(nd - 2, nd - 1);
        self
    }
}

/// `[c, f, t]` complex values as a real `[c, f, t, 2]` tensor.
pub fn complex_to_tensor<T: Scalar>(values: &Array3<Complex<T>>) -> ArrayD<T> {
    let (c, f, t) = values.dim();
    let mut out = ArrayD::zeros(IxDyn(&[c, f, t, 2]));
    for ((ci, fi, ti), z) in values.indexed_iter() {
        out[[ci, fi, ti, 0]] = z.re;
        out[[ci, fi, ti, 1]] = z.im;
    }
    out
}

/// Inverse of [`complex_to_tensor`].
pub fn tensor_to_spectrogram<T: Scalar>(
    t: &ArrayD<T>,
    frame: crate::spectral::FrameParams,
    sample_rate: u32,
) -> Result<ComplexSpectrogram<T>> {
    let shape = t.shape();
    if shape.len() != 4 || shape[3] != 2 {
        return Err(shape_err(format!("expected [c, f, t, 2], got {shape:?}")));
    }
    let values = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(c, f, tt)| {
        Complex::new(t[[c, f, tt, 0]], t[[c, f, tt, 1]])
    });
    Ok(ComplexSpectrogram {
        values,
        frame,
        sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check of `f` with respect to every entry of every parameter.
    fn check<F>(store: &mut ParamStore<f64>, f: F)
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    {
        let mut g = Graph::new();
        let loss = f(&mut g, store);
        let grads = g.backward(loss, store).unwrap();
        let h = 1e-6;
        for id in store.ids() {
            for i in 0..store.get(id).len() {
                let orig = store.get(id).as_slice().unwrap()[i];
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig + h;
                let mut gp = Graph::new();
                let lp = f(&mut gp, store);
                let up = gp.scalar(lp);
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig - h;
                let mut gm = Graph::new();
                let lm = f(&mut gm, store);
                let down = gm.scalar(lm);
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let ad = grads.get(id).as_slice().unwrap()[i];
                let tol = 1e-5 * fd.abs().max(ad.abs()).max(1e-3);
                assert!((fd - ad).abs() < tol, "{} [{i}]: fd {fd} vs ad {ad}", store.name(id));
            }
        }
    }

    /// Smooth scalar readout so kinks of |.| do not interfere with the checks.
    fn readout(g: &mut Graph<f64>, y: Var, rng_seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let weights = rand_tensor(g.shape(y), &mut rng);
        let w = g.constant(weights);
        let p = g.mul(y, w).unwrap();
        let t = g.tanh(p);
        let flat_len = g.value(t).len();
        let flat = g.reshape(t, &[1, flat_len]).unwrap();
        let sum_w = g.constant(ArrayD::from_elem(IxDyn(&[flat_len, 1]), 1.0));
        let s = g.matmul(flat, sum_w).unwrap();
        g.reshape(s, &[]).unwrap()
    }

    #[test]
    fn lstm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let x = store.insert("x", rand_tensor(&[2, 5, 3], &mut rng));
        let wih = store.insert("w_ih", rand_tensor(&[3, 16], &mut rng));
        let whh = store.insert("w_hh", rand_tensor(&[4, 16], &mut rng));
        let b = store.insert("b", rand_tensor(&[16], &mut rng));
        for reverse in [false, true] {
            check(&mut store, |g, st| {
                let (xv, a, h, c) = (g.param(st, x), g.param(st, wih), g.param(st, whh), g.param(st, b));
                let y = g.lstm(xv, a, h, c, reverse).unwrap();
                readout(g, y, 2)
            });
        }
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = store.insert("x", rand_tensor(&[2, 3, 4], &mut rng));
        let gm = store.insert("gamma", rand_tensor(&[4], &mut rng));
        let bt = store.insert("beta", rand_tensor(&[4], &mut rng));
        for groups in [1, 2] {
            check(&mut store, |g, st| {
                let (xv, a, b) = (g.param(st, x), g.param(st, gm), g.param(st, bt));
                let y = g.group_norm(xv, a, b, groups).unwrap();
                readout(g, y, 4)
            });
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let x = store.insert("x", rand_tensor(&[2, 9, 3], &mut rng));
        let w = store.insert("w", rand_tensor(&[3, 3, 2], &mut rng));
        let b = store.insert("b", rand_tensor(&[2], &mut rng));
        for dilation in [1, 2, 4] {
            check(&mut store, |g, st| {
                let (xv, wv, bv) = (g.param(st, x), g.param(st, w), g.param(st, b));
                let y = g.conv1d(xv, wv, bv, dilation).unwrap();
                readout(g, y, 6)
            });
        }
    }

    #[test]
    fn attention_primitive_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let q = store.insert("q", rand_tensor(&[2, 4, 3], &mut rng));
        let k = store.insert("k", rand_tensor(&[2, 4, 3], &mut rng));
        let alpha = store.insert("alpha", ArrayD::from_elem(IxDyn(&[1]), 0.25));
        check(&mut store, |g, st| {
            let (qv, kv, av) = (g.param(st, q), g.param(st, k), g.param(st, alpha));
            let kt = g.transpose_last(kv);
            let scores = g.batch_matmul(qv, kt).unwrap();
            let attn = g.softmax(scores);
            let mixed = g.batch_matmul(attn, kv).unwrap();
            let act = g.prelu(mixed, av).unwrap();
            let perm = g.permute(act, &[1, 0, 2]).unwrap();
            let m = g.channel_mean(perm).unwrap();
            let sl = g.slice_axis(m, 2, 1, 3).unwrap();
            let sg = g.sigmoid(sl);
            readout(g, sg, 8)
        });
    }

    #[test]
    fn complex_mul_and_istft_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = Arc::new(Stft::<f64>::new(crate::spectral::FrameParams::new(8, 2)).unwrap());
        let mut store = ParamStore::new();
        let m = store.insert("m", rand_tensor(&[1, 5, 6, 2], &mut rng));
        let x = Arc::new(rand_tensor(&[1, 5, 6, 2], &mut rng));
        check(&mut store, |g, st| {
            let mv = g.param(st, m);
            let y = g.complex_mul_const(mv, x.clone()).unwrap();
            let w = g.istft(y, plan.clone(), 10).unwrap();
            readout(g, w, 10)
        });
    }

    #[test]
    fn tap_ranges_cover_valid_rows() {
        // kernel 3, dilation 2 -> pad 2; tap 0 reads l-2, tap 2 reads l+2
        assert_eq!(tap_ranges(0, 2, 5), Some((2..5, 0..3)));
        assert_eq!(tap_ranges(2, 2, 5), Some((0..5, 0..5)));
        assert_eq!(tap_ranges(4, 2, 5), Some((0..3, 2..5)));
        assert_eq!(tap_ranges(0, 8, 5), None);
    }
}
