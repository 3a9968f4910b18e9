//! Parameterised layers. Each layer owns a name prefix under which its
//! tensors live in a [`ParamStore`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::Result;

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub name: String,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, inp: usize, out: usize) -> Self {
        Self { name: name.into(), inp, out }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let bound = 1.0 / (self.inp as f64).sqrt();
        store.init_uniform(&format!("{}.w", self.name), &[self.inp, self.out], bound, rng);
        store.init_uniform(&format!("{}.b", self.name), &[self.out], bound, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.w", self.name))?;
        let b = g.param(store, &format!("{}.b", self.name))?;
        let y = g.matmul(x, w);
        Ok(g.add_bias(y, b))
    }
}

/// Square "same" convolution with He-uniform weights and zero bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2d {
    pub name: String,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, ci: usize, co: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        Self { name: name.into(), ci, co, k }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let fan_in = (self.ci * self.k * self.k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        store.init_uniform(&format!("{}.w", self.name), &[self.co, self.ci, self.k, self.k], bound, rng);
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.co]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.w", self.name))?;
        let b = g.param(store, &format!("{}.b", self.name))?;
        Ok(g.conv2d(x, w, b))
    }
}

/// LSTM cell with input, forget, cell and output gates stacked in one matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmCell {
    pub name: String,
    pub inp: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(name: impl Into<String>, inp: usize, hidden: usize) -> Self {
        Self { name: name.into(), inp, hidden }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let h = self.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        store.init_uniform(&format!("{}.wx", self.name), &[self.inp, 4 * h], bound, rng);
        store.init_uniform(&format!("{}.wh", self.name), &[h, 4 * h], bound, rng);
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].fill(1.0);
        store.insert(format!("{}.b", self.name), Tensor::from_vec(&[4 * h], b));
    }

    pub fn zero_state(&self, g: &mut Graph, n: usize) -> (Var, Var) {
        let h = g.constant(Tensor::zeros(&[n, self.hidden]));
        let c = g.constant(Tensor::zeros(&[n, self.hidden]));
        (h, c)
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, (h, c): (Var, Var)) -> Result<(Var, Var)> {
        let wx = g.param(store, &format!("{}.wx", self.name))?;
        let wh = g.param(store, &format!("{}.wh", self.name))?;
        let b = g.param(store, &format!("{}.b", self.name))?;
        let hs = self.hidden;
        let a = g.matmul(x, wx);
        let r = g.matmul(h, wh);
        let z = g.add(a, r);
        let z = g.add_bias(z, b);
        let i = g.slice(z, 0, hs);
        let i = g.sigmoid(i);
        let f = g.slice(z, hs, 2 * hs);
        let f = g.sigmoid(f);
        let cand = g.slice(z, 2 * hs, 3 * hs);
        let cand = g.tanh(cand);
        let o = g.slice(z, 3 * hs, 4 * hs);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c2 = g.add(keep, write);
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc);
        Ok((h2, c2))
    }

    /// Runs over `xs` in order and returns the final hidden state.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, xs: &[Var]) -> Result<Var> {
        assert!(!xs.is_empty());
        let n = g.shape(xs[0])[0];
        let mut state = self.zero_state(g, n);
        for &x in xs {
            state = self.step(g, store, x, state)?;
        }
        Ok(state.0)
    }
}

/// Two LSTMs reading a sequence in opposite directions; the output is the
/// concatenation of both final hidden states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new(name: &str, inp: usize, hidden: usize) -> Self {
        Self {
            forward: LstmCell::new(format!("{name}.fwd"), inp, hidden),
            backward: LstmCell::new(format!("{name}.bwd"), inp, hidden),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.forward.init(store, rng);
        self.backward.init(store, rng);
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, xs: &[Var]) -> Result<Var> {
        let hf = self.forward.encode(g, store, xs)?;
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        let hb = self.backward.encode(g, store, &rev)?;
        Ok(g.concat(&[hf, hb]))
    }
}

/// GRU cell: `h' = (1 − u)·n + u·h`, `n = tanh(Wx_n x + b_n + r ⊙ (Wh_n h + c_n))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GruCell {
    pub name: String,
    pub inp: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(name: impl Into<String>, inp: usize, hidden: usize) -> Self {
        Self { name: name.into(), inp, hidden }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let h = self.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        store.init_uniform(&format!("{}.wx", self.name), &[self.inp, 3 * h], bound, rng);
        store.init_uniform(&format!("{}.wh", self.name), &[h, 3 * h], bound, rng);
        store.init_uniform(&format!("{}.bx", self.name), &[3 * h], bound, rng);
        store.init_uniform(&format!("{}.bh", self.name), &[3 * h], bound, rng);
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let wx = g.param(store, &format!("{}.wx", self.name))?;
        let wh = g.param(store, &format!("{}.wh", self.name))?;
        let bx = g.param(store, &format!("{}.bx", self.name))?;
        let bh = g.param(store, &format!("{}.bh", self.name))?;
        let hs = self.hidden;
        let gx = g.matmul(x, wx);
        let gx = g.add_bias(gx, bx);
        let gh = g.matmul(h, wh);
        let gh = g.add_bias(gh, bh);
        let xr = g.slice(gx, 0, hs);
        let hr = g.slice(gh, 0, hs);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let xu = g.slice(gx, hs, 2 * hs);
        let hu = g.slice(gh, hs, 2 * hs);
        let u = g.add(xu, hu);
        let u = g.sigmoid(u);
        let xn = g.slice(gx, 2 * hs, 3 * hs);
        let hn = g.slice(gh, 2 * hs, 3 * hs);
        let rn = g.mul(r, hn);
        let n = g.add(xn, rn);
        let n = g.tanh(n);
        let d = g.sub(h, n);
        let ud = g.mul(u, d);
        Ok(g.add(n, ud))
    }
}
