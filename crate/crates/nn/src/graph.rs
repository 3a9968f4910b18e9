use std::collections::BTreeMap;

use goalcast_core::Exec;

use crate::kernels::{self, ConvShape};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::Result;

/// Clamp applied to focal-loss predictions before taking logs.
pub const FOCAL_EPS: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    BroadcastSpatial(Var),
    Conv2d(Var, Var, Var, ConvShape),
    AvgPool2(Var),
    Upsample2(Var),
    GlobalAvgPool(Var),
    Sum(Var),
    MeanRows(Var),
    Reshape(Var),
    RepeatBatch(Var, usize),
    MaxFloor(Var, f64),
    Focal(Var, Tensor, f64, f64),
    KlDiag([Var; 4]),
    GaussNll(Var, Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Grads {
    /// Gradient with respect to any node created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

/// Tape of one forward pass.
///
/// Shape errors are programming errors and panic with a descriptive message.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    frozen: Vec<String>,
    exec: Exec,
}

fn inner(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

impl Graph {
    pub fn new(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen: Vec::new(),
            exec,
        }
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input; its gradient is available through [`Grads::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter, once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(t, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `b[c]` along axis 1 of `x` (shape `[n, c, ...]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let tx = self.value(x);
        let c = tx.shape()[1];
        assert_eq!(self.value(b).len(), c, "bias length must equal axis-1 size");
        let inn = inner(tx.shape());
        let bias = self.value(b).data();
        let mut out = tx.clone();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[(j / inn) % c];
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddBias(x, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// `[n, k] × [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, k, m, self.value(a).data(), (k, 1), self.value(b).data(), (m, 1), 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[n, m], out), Op::MatMul(a, b), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Concatenation along axis 1; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len() && s[0] == n && s[2..] == first[2..],
                "concat shape mismatch {s:?} vs {first:?}"
            );
            total_c += s[1];
        }
        let inn = inner(&first);
        let mut out = Vec::with_capacity(n * total_c * inn);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let w = t.shape()[1] * inn;
                out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
        }
        let mut shape = first;
        shape[1] = total_c;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(&shape, out), Op::Concat(parts.to_vec()), ng)
    }

    /// Channels `start..end` of axis 1.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(start < end && end <= s[1], "slice {start}..{end} of {s:?}");
        let inn = inner(&s);
        let (n, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * (end - start) * inn);
        for i in 0..n {
            out.extend_from_slice(&src[(i * c + start) * inn..(i * c + end) * inn]);
        }
        let mut shape = s;
        shape[1] = end - start;
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&shape, out), Op::Slice(a, start, end), ng)
    }

    /// `[n, c]` → `[n, c, h, w]` by repetition.
    pub fn broadcast_spatial(&mut self, a: Var, h: usize, w: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2);
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(n * c * h * w);
        for &v in t.data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::BroadcastSpatial(a), ng)
    }

    /// Stride-1 "same" convolution; `w` is `[co, ci, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1], "conv {sx:?} with kernel {sw:?}");
        assert!(sw[2] == sw[3] && sw[2] % 2 == 1);
        let s = ConvShape { n: sx[0], ci: sx[1], h: sx[2], w: sx[3], co: sw[0], k: sw[2], pad: sw[2] / 2 };
        let out = kernels::conv2d_forward(&s, self.value(x).data(), self.value(w).data(), self.value(b).data(), self.exec);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::from_vec(&[s.n, s.co, s.oh(), s.ow()], out), Op::Conv2d(x, w, b, s), ng)
    }

    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert!(s.len() == 4 && s[2].is_multiple_of(2) && s[3].is_multiple_of(2), "avg_pool2 on {s:?}");
        let out = kernels::avg_pool2(self.value(a).data(), s[0] * s[1], s[2], s[3]);
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[s[0], s[1], s[2] / 2, s[3] / 2], out), Op::AvgPool2(a), ng)
    }

    pub fn upsample2(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4);
        let out = kernels::upsample2(self.value(a).data(), s[0] * s[1], s[2], s[3]);
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[s[0], s[1], s[2] * 2, s[3] * 2], out), Op::Upsample2(a), ng)
    }

    /// `[n, c, h, w]` → `[n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4);
        let hw = s[2] * s[3];
        let out = self.value(a).data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[s[0], s[1]], out), Op::GlobalAvgPool(a), ng)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::Sum(a), ng)
    }

    /// Mean over axis 0 of a `[n, d]` tensor, shape `[1, d]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, d) = t.rows_cols();
        let mut out = vec![0.0; d];
        for row in t.data().chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[1, d], out), Op::MeanRows(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Tiles the whole tensor `k` times along axis 0.
    pub fn repeat_batch(&mut self, a: Var, k: usize) -> Var {
        let t = self.value(a);
        let mut shape = t.shape().to_vec();
        shape[0] *= k;
        let data = t.data().repeat(k);
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&shape, data), Op::RepeatBatch(a, k), ng)
    }

    /// `max(a, floor)` elementwise; the gradient is zero where the floor binds.
    pub fn max_floor(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::MaxFloor(a, floor))
    }

    /// Focal loss of predictions against a constant target, summed over all
    /// elements. Predictions are clamped to `[1e-7, 1 − 1e-7]`.
    pub fn focal_loss(&mut self, pred: Var, target: &Tensor, alpha: f64, gamma: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "focal target shape");
        let v = p.data().iter().zip(target.data()).map(|(&q, &t)| focal_elem(q, t, alpha, gamma)).sum();
        let ng = self.ng(pred);
        self.push(Tensor::scalar(v), Op::Focal(pred, target.clone(), alpha, gamma), ng)
    }

    /// Elementwise KL(N(mq, sq²) ‖ N(mp, sp²)); all four inputs share a shape.
    pub fn kl_diag(&mut self, mq: Var, sq: Var, mp: Var, sp: Var) -> Var {
        let shape = self.shape(mq).to_vec();
        for v in [sq, mp, sp] {
            assert_eq!(self.shape(v), &shape[..], "kl_diag shape mismatch");
        }
        let (a, b, c, d) = (self.value(mq).data(), self.value(sq).data(), self.value(mp).data(), self.value(sp).data());
        let out = (0..a.len()).map(|i| gauss_kl(a[i], b[i], c[i], d[i])).collect();
        let ng = [mq, sq, mp, sp].iter().any(|&v| self.ng(v));
        self.push(Tensor::from_vec(&shape, out), Op::KlDiag([mq, sq, mp, sp]), ng)
    }

    /// Gaussian negative log-likelihood of a constant target, summed.
    pub fn gauss_nll(&mut self, mean: Var, std: Var, target: &Tensor) -> Var {
        assert_eq!(self.shape(mean), target.shape());
        assert_eq!(self.shape(std), target.shape());
        let (m, s) = (self.value(mean).data(), self.value(std).data());
        let v = (0..m.len()).map(|i| gauss_nll_elem(m[i], s[i], target.data()[i])).sum();
        let ng = self.ng(mean) || self.ng(std);
        self.push(Tensor::scalar(v), Op::GaussNll(mean, std, target.clone()), ng)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let nodes: Vec<Option<Tensor>> = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_vec(n.value.shape(), g)))
            .collect();
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(k, v)| {
                let t = nodes[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (k.clone(), t)
            })
            .collect();
        Grads { nodes, params }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        self.acc(grads, v, |s| {
            for (j, (sv, &gv)) in s.iter_mut().zip(g).enumerate() {
                *sv += f(j, gv);
            }
        });
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |_, v| v);
                self.acc_map(grads, *b, g, |_, v| v);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |_, v| v);
                self.acc_map(grads, *b, g, |_, v| -v);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, g, |j, v| v * vb[j]);
                self.acc_map(grads, *b, g, |j, v| v * va[j]);
            }
            Op::AddBias(x, b) => {
                self.acc_map(grads, *x, g, |_, v| v);
                let s = node.value.shape();
                let (c, inn) = (s[1], inner(s));
                self.acc(grads, *b, |gb| {
                    for (j, &v) in g.iter().enumerate() {
                        gb[(j / inn) % c] += v;
                    }
                });
            }
            Op::Scale(a, s) => self.acc_map(grads, *a, g, |_, v| v * s),
            Op::AddScalar(a) => self.acc_map(grads, *a, g, |_, v| v),
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| kernels::gemm(n, m, k, g, (m, 1), vb, (1, m), 1.0, ga));
                self.acc(grads, *b, |gb| kernels::gemm(k, n, m, va, (1, k), g, (m, 1), 1.0, gb));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc_map(grads, *a, g, |j, v| if x[j] > 0.0 { v } else { 0.0 });
            }
            Op::Sigmoid(a) => self.acc_map(grads, *a, g, |j, v| v * y[j] * (1.0 - y[j])),
            Op::Tanh(a) => self.acc_map(grads, *a, g, |j, v| v * (1.0 - y[j] * y[j])),
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                self.acc_map(grads, *a, g, |j, v| v * sigmoid(x[j]));
            }
            Op::Exp(a) => self.acc_map(grads, *a, g, |j, v| v * y[j]),
            Op::Concat(parts) => {
                let s = node.value.shape();
                let (n, total) = (s[0], s[1] * inner(s));
                let inn = inner(s);
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p)[1] * inn;
                    self.acc(grads, *p, |gp| {
                        for r in 0..n {
                            let src = &g[r * total + off..r * total + off + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    });
                    off += w;
                }
            }
            Op::Slice(a, start, end) => {
                let s = self.shape(*a);
                let (n, c, inn) = (s[0], s[1], inner(s));
                let w = (end - start) * inn;
                self.acc(grads, *a, |ga| {
                    for r in 0..n {
                        let dst = &mut ga[(r * c + start) * inn..(r * c + end) * inn];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::BroadcastSpatial(a) => {
                let s = node.value.shape();
                let hw = s[2] * s[3];
                self.acc(grads, *a, |ga| {
                    for (d, chunk) in ga.iter_mut().zip(g.chunks(hw)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Conv2d(x, w, b, s) => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    s,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.ng(*x),
                    self.ng(*w),
                    self.exec,
                );
                if let Some(dx) = dx {
                    self.acc_map(grads, *x, &dx, |_, v| v);
                }
                if let Some(dw) = dw {
                    self.acc_map(grads, *w, &dw, |_, v| v);
                }
                self.acc_map(grads, *b, &db, |_, v| v);
            }
            Op::AvgPool2(a) => {
                let s = self.shape(*a);
                let dx = kernels::avg_pool2_backward(g, s[0] * s[1], s[2], s[3]);
                self.acc_map(grads, *a, &dx, |_, v| v);
            }
            Op::Upsample2(a) => {
                let s = self.shape(*a);
                let dx = kernels::upsample2_backward(g, s[0] * s[1], s[2], s[3]);
                self.acc_map(grads, *a, &dx, |_, v| v);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let hw = s[2] * s[3];
                self.acc(grads, *a, |ga| {
                    for (j, d) in ga.iter_mut().enumerate() {
                        *d += g[j / hw] / hw as f64;
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanRows(a) => {
                let (n, d) = self.value(*a).rows_cols();
                self.acc(grads, *a, |ga| {
                    for (j, v) in ga.iter_mut().enumerate() {
                        *v += g[j % d] / n as f64;
                    }
                });
            }
            Op::Reshape(a) => self.acc_map(grads, *a, g, |_, v| v),
            Op::RepeatBatch(a, k) => {
                let len = g.len() / k;
                for chunk in g.chunks(len) {
                    self.acc_map(grads, *a, chunk, |_, v| v);
                }
            }
            Op::MaxFloor(a, floor) => {
                let x = self.value(*a).data();
                self.acc_map(grads, *a, g, |j, v| if x[j] > *floor { v } else { 0.0 });
            }
            Op::Focal(p, t, alpha, gamma) => {
                let q = self.value(*p).data();
                let t = t.data();
                self.acc(grads, *p, |gp| {
                    for j in 0..q.len() {
                        gp[j] += g[0] * focal_grad(q[j], t[j], *alpha, *gamma);
                    }
                });
            }
            Op::KlDiag([mq, sq, mp, sp]) => {
                let (a, b, c, d) = (self.value(*mq).data(), self.value(*sq).data(), self.value(*mp).data(), self.value(*sp).data());
                self.acc_map(grads, *mq, g, |j, v| v * (a[j] - c[j]) / (d[j] * d[j]));
                self.acc_map(grads, *mp, g, |j, v| -v * (a[j] - c[j]) / (d[j] * d[j]));
                self.acc_map(grads, *sq, g, |j, v| v * (-1.0 / b[j] + b[j] / (d[j] * d[j])));
                self.acc_map(grads, *sp, g, |j, v| {
                    let diff = a[j] - c[j];
                    v * (1.0 / d[j] - (b[j] * b[j] + diff * diff) / d[j].powi(3))
                });
            }
            Op::GaussNll(m, s, t) => {
                let (mv, sv, t) = (self.value(*m).data(), self.value(*s).data(), t.data());
                self.acc_map(grads, *m, &vec![g[0]; mv.len()], |j, v| -v * (t[j] - mv[j]) / (sv[j] * sv[j]));
                self.acc_map(grads, *s, &vec![g[0]; sv.len()], |j, v| {
                    let r = t[j] - mv[j];
                    v * (1.0 / sv[j] - r * r / sv[j].powi(3))
                });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-pixel focal loss with clamped prediction.
pub fn focal_elem(q: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let q = q.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    -(alpha * (1.0 - q).powf(gamma) * t * q.ln() + (1.0 - alpha) * q.powf(gamma) * (1.0 - t) * (1.0 - q).ln())
}

fn focal_grad(q: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    if !(FOCAL_EPS..=1.0 - FOCAL_EPS).contains(&q) {
        return 0.0;
    }
    let pos = alpha * t * (-gamma * (1.0 - q).powf(gamma - 1.0) * q.ln() + (1.0 - q).powf(gamma) / q);
    let neg = (1.0 - alpha) * (1.0 - t) * (gamma * q.powf(gamma - 1.0) * (1.0 - q).ln() - q.powf(gamma) / (1.0 - q));
    -(pos + neg)
}

/// KL(N(mq, sq²) ‖ N(mp, sp²)) for one dimension.
pub fn gauss_kl(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let d = mq - mp;
    (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5
}

/// Negative log density of `y` under N(m, s²).
pub fn gauss_nll_elem(m: f64, s: f64, y: f64) -> f64 {
    let r = y - m;
    s.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln() + r * r / (2.0 * s * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
    }

    /// Compares analytic input gradients with central differences.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new(Exec::Sequential);
            let vs: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
            let l = build(&mut g, &vs);
            (g, vs, l)
        };
        let (g, vs, l) = eval(&inputs);
        let grads = g.backward(l);
        let h = 1e-6;
        for (k, v) in vs.iter().enumerate() {
            let an = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            for j in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[j] -= h;
                let (gp, _, lp) = eval(&plus);
                let (gm, _, lm) = eval(&minus);
                let num = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
                let a = an.data()[j];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
                assert!(err < tol, "input {k} elem {j}: analytic {a} numeric {num}");
            }
        }
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 4], 0.1, 2.0);
        check(
            vec![a, b],
            |g, v| {
                let s = g.add(v[0], v[1]);
                let d = g.sub(s, v[1]);
                let m = g.mul(d, v[1]);
                let t = g.tanh(m);
                let sg = g.sigmoid(v[0]);
                let sp = g.softplus(v[1]);
                let e = g.exp(sg);
                let r = g.relu(v[0]);
                let x = g.add(t, e);
                let x = g.mul(x, sp);
                let x = g.add(x, r);
                let x = g.scale(x, 0.7);
                let x = g.add_scalar(x, 3.0);
                let x = g.max_floor(x, 3.2);
                let x = g.mul(x, x);
                g.sum(x)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_bias_and_shape_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        check(
            vec![x, w, b],
            |g, v| {
                let y = g.matmul(v[0], v[1]);
                let y = g.add_bias(y, v[2]);
                let l = g.slice(y, 1, 4);
                let r = g.slice(y, 0, 2);
                let c = g.concat(&[l, r, v[0]]);
                let c = g.tanh(c);
                let m = g.mean_rows(c);
                let m = g.mul(m, m);
                g.sum(m)
            },
            1e-6,
        );
    }

    #[test]
    fn spatial_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 4, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let z = rand_tensor(&mut rng, &[2, 2], -1.0, 1.0);
        let cb = rand_tensor(&mut rng, &[2], -1.0, 1.0);
        check(
            vec![x, w, b, z, cb],
            |g, v| {
                let p = g.avg_pool2(v[0]);
                let zb = g.broadcast_spatial(v[3], 2, 2);
                let c = g.concat(&[p, zb]);
                let y = g.conv2d(c, v[1], v[2]);
                let y = g.sigmoid(y);
                let u = g.upsample2(y);
                let s = g.slice(u, 0, 2);
                let s = g.add_bias(s, v[4]);
                let s = g.mul(s, v[0]);
                let gp = g.global_avg_pool(s);
                let gp = g.repeat_batch(gp, 2);
                let gp = g.reshape(gp, &[8]);
                let sq = g.mul(gp, gp);
                g.sum(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn focal_gradcheck_on_random_rasters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let pred = rand_tensor(&mut rng, &[1, 1, 8, 8], 0.02, 0.98);
            let target = rand_tensor(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
            check(vec![pred], |g, v| g.focal_loss(v[0], &target, 0.25, 2.0), 1e-4);
        }
    }

    #[test]
    fn focal_is_monotone_in_prediction() {
        let mut g = Graph::new(Exec::Sequential);
        let p = g.input(Tensor::from_vec(&[2], vec![0.3, 0.3]));
        let l = g.focal_loss(p, &Tensor::from_vec(&[2], vec![1.0, 0.0]), 0.25, 2.0);
        let gr = g.backward(l);
        let d = gr.wrt(p).unwrap().data();
        assert!(d[0] < 0.0 && d[1] > 0.0);
    }

    #[test]
    fn kl_and_gauss_nll_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mq = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let sq = rand_tensor(&mut rng, &[2, 3], 0.3, 2.0);
        let mp = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let sp = rand_tensor(&mut rng, &[2, 3], 0.3, 2.0);
        let y = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        check(
            vec![mq, sq, mp, sp],
            |g, v| {
                let k = g.kl_diag(v[0], v[1], v[2], v[3]);
                let k = g.sum(k);
                let n = g.gauss_nll(v[0], v[1], &y);
                let n2 = g.gauss_nll(v[2], v[3], &y);
                let s = g.add(k, n);
                g.add(s, n2)
            },
            1e-6,
        );
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Tensor::scalar(2.0));
        store.insert("dec.w", Tensor::scalar(3.0));
        let mut g = Graph::new(Exec::Sequential);
        g.freeze_prefix("enc.");
        let a = g.param(&store, "enc.w").unwrap();
        let b = g.param(&store, "dec.w").unwrap();
        assert_eq!(g.param(&store, "dec.w").unwrap(), b);
        let m = g.mul(a, b);
        let gr = g.backward(m);
        assert_eq!(gr.params().len(), 1);
        assert_eq!(gr.params()["dec.w"].item(), 2.0);
    }

    #[test]
    fn unknown_param_is_an_error() {
        let mut g = Graph::new(Exec::Sequential);
        assert!(g.param(&ParamStore::new(), "nope").is_err());
    }
}
