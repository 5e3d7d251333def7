//! Minimal reverse-mode tape.
//!
//! Every operation appends a node holding its output value and, when any
//! input requires a gradient, a closure that scatters the output gradient
//! into the gradients of its inputs. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid topological order by
//! construction.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<F> = Box<dyn Fn(&Tape<F>, &Tensor<F>, &[F], &mut Grads<F>)>;

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    backward: Option<BackFn<F>>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, Var>,
}

/// Gradient buffers, allocated lazily for nodes that require them.
pub struct Grads<F> {
    bufs: Vec<Option<Vec<F>>>,
    needs: Vec<bool>,
    sizes: Vec<usize>,
}

impl<F: Scalar> Grads<F> {
    /// Mutable gradient slot of `v`, or `None` when `v` is a constant.
    pub fn acc(&mut self, v: Var) -> Option<&mut [F]> {
        if !self.needs[v.0] {
            return None;
        }
        let size = self.sizes[v.0];
        Some(
            self.bufs[v.0]
                .get_or_insert_with(|| vec![F::zero(); size])
                .as_mut_slice(),
        )
    }

    /// Gradient of `v`; zeros when nothing flowed into it.
    pub fn get(&self, v: Var) -> Vec<F> {
        self.bufs[v.0]
            .clone()
            .unwrap_or_else(|| vec![F::zero(); self.sizes[v.0]])
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that collects a gradient.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter. Binding the same name twice returns the
    /// same node.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(store.value(name).clone());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Appends an operation result. `back` runs only if some parent requires
    /// a gradient.
    pub(crate) fn push(
        &mut self,
        value: Tensor<F>,
        parents: &[Var],
        back: impl Fn(&Tape<F>, &Tensor<F>, &[F], &mut Grads<F>) + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(back))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, out: Var) -> Grads<F> {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let n = self.nodes.len();
        let mut grads = Grads {
            bufs: (0..n).map(|_| None).collect(),
            needs: self.nodes.iter().map(|nd| nd.requires_grad).collect(),
            sizes: self.nodes.iter().map(|nd| nd.value.len()).collect(),
        };
        if !self.nodes[out.0].requires_grad {
            return grads;
        }
        grads.bufs[out.0] = Some(vec![F::one()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads.bufs[i].take() else { continue };
            back(self, &node.value, &g, &mut grads);
        }
        grads
    }

    /// Adds the gradients of all bound parameters into `store`.
    pub fn accumulate_param_grads(&self, grads: &Grads<F>, store: &mut ParamStore<F>) {
        for (name, v) in &self.params {
            if let Some(g) = &grads.bufs[v.0] {
                store.accumulate_grad(name, g);
            }
        }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<F> = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(value, &[a, b], move |_, _, g, gr| {
            for v in [a, b] {
                if let Some(ga) = gr.acc(v) {
                    ga.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
                }
            }
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<F> = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(value, &[a, b], move |_, _, g, gr| {
            if let Some(ga) = gr.acc(a) {
                ga.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
            }
            if let Some(gb) = gr.acc(b) {
                gb.iter_mut().zip(g).for_each(|(s, &d)| *s = *s - d);
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<F> = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(value, &[a, b], move |t, _, g, gr| {
            if gr.acc(a).is_some() {
                let yb = t.value(b).data();
                let ga = gr.acc(a).unwrap();
                for ((s, &d), &q) in ga.iter_mut().zip(g).zip(yb) {
                    *s = *s + d * q;
                }
            }
            if gr.acc(b).is_some() {
                let xa = t.value(a).data();
                let gb = gr.acc(b).unwrap();
                for ((s, &d), &p) in gb.iter_mut().zip(g).zip(xa) {
                    *s = *s + d * p;
                }
            }
        })
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::c(c);
        let x = self.value(a);
        let value = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&p| p * c).collect(),
        );
        self.push(value, &[a], move |_, _, g, gr| {
            if let Some(ga) = gr.acc(a) {
                ga.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d * c);
            }
        })
    }

    /// Elementwise map with a derivative expressed through input and output.
    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + 'static,
    ) -> Var {
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&p| f(p)).collect());
        self.push(value, &[a], move |t, out, g, gr| {
            let xs = t.value(a).data();
            let ys = out.data();
            if let Some(ga) = gr.acc(a) {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * df(xs[i], ys[i]);
                }
            }
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (F::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (F::one() - s)
            },
        )
    }

    /// `s * x` for a learnable single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar expects a 1-element scale");
        let sv = self.value(s).data()[0];
        let xv = self.value(x);
        let value = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&p| p * sv).collect());
        self.push(value, &[x, s], move |t, _, g, gr| {
            if let Some(gx) = gr.acc(x) {
                gx.iter_mut().zip(g).for_each(|(a, &d)| *a = *a + d * sv);
            }
            if gr.acc(s).is_some() {
                let xs = t.value(x).data();
                let tot = g.iter().zip(xs).fold(F::zero(), |acc, (&d, &p)| acc + d * p);
                let gs = gr.acc(s).unwrap();
                gs[0] = gs[0] + tot;
            }
        })
    }

    /// `y[b, ...] = w[b] * x[b, ...]` with `w` of shape `[B]`.
    pub fn mul_per_sample(&mut self, x: Var, w: Var) -> Var {
        let b = self.shape(x)[0];
        assert_eq!(self.shape(w), &[b], "mul_per_sample weight shape");
        let inner = self.value(x).len() / b;
        let xv = self.value(x);
        let wv = self.value(w).data().to_vec();
        let mut out = xv.data().to_vec();
        for (bi, chunk) in out.chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * wv[bi]);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(value, &[x, w], move |t, _, g, gr| {
            if let Some(gx) = gr.acc(x) {
                for (bi, (gc, dc)) in gx.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                    gc.iter_mut().zip(dc).for_each(|(a, &d)| *a = *a + d * wv[bi]);
                }
            }
            if gr.acc(w).is_some() {
                let xs = t.value(x).data();
                let sums: Vec<F> = g
                    .chunks(inner)
                    .zip(xs.chunks(inner))
                    .map(|(dc, xc)| dc.iter().zip(xc).fold(F::zero(), |acc, (&d, &p)| acc + d * p))
                    .collect();
                let gw = gr.acc(w).unwrap();
                gw.iter_mut().zip(sums).for_each(|(a, s)| *a = *a + s);
            }
        })
    }

    /// Sum of every element, as a 1-element tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(F::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), &[a], move |_, _, g, gr| {
            if let Some(ga) = gr.acc(a) {
                ga.iter_mut().for_each(|v| *v = *v + g[0]);
            }
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Reinterprets the value with a new shape of equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(value, &[a], move |_, _, g, gr| {
            if let Some(ga) = gr.acc(a) {
                ga.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
            }
        })
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn softplus<F: Scalar>(x: F) -> F {
    if x > F::c(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}
