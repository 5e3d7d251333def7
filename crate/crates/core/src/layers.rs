//! Small parameterized building blocks shared by the model modules.
//!
//! Each block owns a dotted name prefix; `init` registers its parameters in a
//! [`ParamStore`] and `forward` binds them on a [`Tape`].

use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, din: usize, dout: usize, bias: bool) -> Self {
        Linear {
            prefix: prefix.into(),
            din,
            dout,
            bias,
        }
    }

    pub fn w(&self) -> String {
        join(&self.prefix, "w")
    }

    pub fn b(&self) -> String {
        join(&self.prefix, "b")
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        ps.insert_fan_in(&self.w(), &[self.din, self.dout], self.din, rng);
        if self.bias {
            ps.insert_full(&self.b(), &[self.dout], 0.0);
        }
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let w = t.param(ps, &self.w());
        let b = self.bias.then(|| t.param(ps, &self.b()));
        t.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub prefix: String,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, d: usize) -> Self {
        LayerNorm {
            prefix: prefix.into(),
            d,
        }
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>) {
        ps.insert_full(&join(&self.prefix, "gamma"), &[self.d], 1.0);
        ps.insert_full(&join(&self.prefix, "beta"), &[self.d], 0.0);
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let g = t.param(ps, &join(&self.prefix, "gamma"));
        let b = t.param(ps, &join(&self.prefix, "beta"));
        t.layer_norm(x, g, b)
    }
}

/// Two-layer position-wise MLP with SiLU.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new(prefix: &str, d: usize, hidden: usize) -> Self {
        Ffn {
            up: Linear::new(join(prefix, "up"), d, hidden, true),
            down: Linear::new(join(prefix, "down"), hidden, d, true),
        }
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        self.up.init(ps, rng);
        self.down.init(ps, rng);
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let h = self.up.forward(t, ps, x);
        let h = t.silu(h);
        self.down.forward(t, ps, h)
    }
}

/// Temporal convolution `[B, T, cin] -> [B, T', cout]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub prefix: String,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv1d {
    pub fn new(prefix: impl Into<String>, kernel: usize, cin: usize, cout: usize, stride: usize) -> Self {
        Conv1d {
            prefix: prefix.into(),
            kernel,
            cin,
            cout,
            stride,
            bias: true,
        }
    }

    pub fn w(&self) -> String {
        join(&self.prefix, "w")
    }

    pub fn b(&self) -> String {
        join(&self.prefix, "b")
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        ps.insert_fan_in(
            &self.w(),
            &[self.kernel, self.cin, self.cout],
            self.kernel * self.cin,
            rng,
        );
        if self.bias {
            ps.insert_full(&self.b(), &[self.cout], 0.0);
        }
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let w = t.param(ps, &self.w());
        let b = self.bias.then(|| t.param(ps, &self.b()));
        t.conv1d(x, w, b, self.stride, self.kernel / 2)
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub prefix: String,
    pub kernel: usize,
    pub d: usize,
}

impl DepthwiseConv {
    pub fn new(prefix: impl Into<String>, kernel: usize, d: usize) -> Self {
        DepthwiseConv {
            prefix: prefix.into(),
            kernel,
            d,
        }
    }

    pub fn w(&self) -> String {
        join(&self.prefix, "w")
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        ps.insert_fan_in(&self.w(), &[self.kernel, self.d], self.kernel, rng);
        ps.insert_full(&join(&self.prefix, "b"), &[self.d], 0.0);
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let w = t.param(ps, &self.w());
        let b = t.param(ps, &join(&self.prefix, "b"));
        t.depthwise_conv1d(x, w, Some(b))
    }
}

/// Multi-head scaled dot-product attention with bias-free projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "d_model must be divisible by heads");
        MultiHeadAttention {
            q: Linear::new(join(prefix, "wq"), d, d, false),
            k: Linear::new(join(prefix, "wk"), d, d, false),
            v: Linear::new(join(prefix, "wv"), d, d, false),
            o: Linear::new(join(prefix, "wo"), d, d, false),
            heads,
        }
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(ps, rng);
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        ps: &ParamStore<F>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
    ) -> Var {
        let d = self.q.din;
        let dk = d / self.heads;
        let q = self.q.forward(t, ps, q_in);
        let k = self.k.forward(t, ps, k_in);
        let v = self.v.forward(t, ps, v_in);
        let q = t.split_heads(q, self.heads);
        let k = t.split_heads(k, self.heads);
        let v = t.split_heads(v, self.heads);
        let s = t.bmm(q, k, false, true);
        let s = t.scale(s, 1.0 / (dk as f64).sqrt());
        let a = t.softmax_last(s);
        let o = t.bmm(a, v, false, false);
        let o = t.merge_heads(o, self.heads);
        self.o.forward(t, ps, o)
    }
}

/// Single-head `softmax(q k^T * scale) v` on already projected tensors.
pub fn attend<F: Scalar>(t: &mut Tape<F>, q: Var, k: Var, v: Var, scale: f64) -> Var {
    let s = t.bmm(q, k, false, true);
    let s = if scale == 1.0 { s } else { t.scale(s, scale) };
    let a = t.softmax_last(s);
    t.bmm(a, v, false, false)
}
