//! Spline-projection attention and the gated KAN / external-attention block.
//!
//! A KAN layer computes, per output `j`,
//!
//! ```text
//! y_j = sum_i c[i,j] * silu(x_i) + sum_i sum_g theta[i,g,j] * B_g(x_i)
//! ```
//!
//! with cubic B-spline bases on a uniform grid extended by `k` knots on each
//! side. Inputs are clamped to the grid span before basis evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attend, join, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Uniform knot vector over `[-range, range]` with `intervals` cells and
/// `order` extra knots on each side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineGrid {
    pub intervals: usize,
    pub order: usize,
    pub range: f64,
}

impl Default for SplineGrid {
    fn default() -> Self {
        SplineGrid {
            intervals: 8,
            order: 3,
            range: 3.0,
        }
    }
}

impl SplineGrid {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.intervals == 0 {
            return Err(Error::config(format!("{path}.intervals"), "must be >= 1"));
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::config(format!("{path}.range"), "must be positive"));
        }
        Ok(())
    }

    pub fn n_basis(&self) -> usize {
        self.intervals + self.order
    }

    pub fn step(&self) -> f64 {
        2.0 * self.range / self.intervals as f64
    }

    pub fn knots(&self) -> Vec<f64> {
        let h = self.step();
        (0..=self.intervals + 2 * self.order)
            .map(|j| -self.range + (j as f64 - self.order as f64) * h)
            .collect()
    }

    /// Index of the first nonzero basis and the `order + 1` nonzero values at
    /// `x` (clamped into the span), by the local Cox-de Boor triangle.
    pub fn local_basis(&self, x: f64, out: &mut [f64]) -> usize {
        let k = self.order;
        debug_assert_eq!(out.len(), k + 1);
        let (cell, s) = self.locate(x);
        if k == 3 {
            cubic_values(s, out);
            return cell;
        }
        self.triangle(s, out);
        cell
    }

    /// Cell index and position inside it in `[0, 1]`, after clamping.
    fn locate(&self, x: f64) -> (usize, f64) {
        let u = (x.clamp(-self.range, self.range) + self.range) / self.step();
        let cell = (u.floor() as usize).min(self.intervals - 1);
        (cell, u - cell as f64)
    }

    fn triangle(&self, s: f64, out: &mut [f64]) {
        let k = self.order;
        out.iter_mut().for_each(|v| *v = 0.0);
        out[k] = 1.0;
        // out[k - p + r] holds B_{cell + r - p + ..., p} for r in 0..=p.
        for p in 1..=k {
            let pf = p as f64;
            let lo = k - p;
            for r in lo..=k {
                // Basis index relative to the cell: m = r - k (from -p to 0).
                let m = r as f64 - k as f64;
                let left = (s - m) / pf;
                let right = (m + pf + 1.0 - s) / pf;
                let cur = out[r];
                let next = if r < k { out[r + 1] } else { 0.0 };
                out[r] = left * cur + right * next;
            }
        }
    }

    /// Values of all `n_basis` bases at `x`, written densely.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut local = vec![0.0; self.order + 1];
        let first = self.local_basis(x, &mut local);
        let mut dense = vec![0.0; self.n_basis()];
        dense[first..first + self.order + 1].copy_from_slice(&local);
        dense
    }

    /// Nonzero basis values and their derivatives at `x`. Derivatives are
    /// zero outside the span, where the input is clamped.
    fn local_basis_grad(&self, x: f64, val: &mut [f64], der: &mut [f64]) -> usize {
        let k = self.order;
        let inside = x > -self.range && x < self.range;
        if k == 3 {
            let (cell, s) = self.locate(x);
            cubic_values(s, val);
            let h = self.step();
            if inside {
                let r = 1.0 - s;
                der[0] = -0.5 * r * r / h;
                der[1] = (1.5 * s * s - 2.0 * s) / h;
                der[2] = (-1.5 * s * s + s + 0.5) / h;
                der[3] = 0.5 * s * s / h;
            } else {
                der.iter_mut().for_each(|d| *d = 0.0);
            }
            return cell;
        }
        let mut lower = vec![0.0; k];
        let first = if k > 0 {
            let g = SplineGrid {
                order: k - 1,
                ..*self
            };
            // Order k-1 bases share the cell; they start one index later.
            g.local_basis(x, &mut lower)
        } else {
            0
        };
        let cell = self.local_basis(x, val);
        debug_assert!(k == 0 || first == cell);
        let h = self.step();
        for r in 0..=k {
            // d/dx B_{i,k} = (B_{i,k-1} - B_{i+1,k-1}) / h, with the order
            // k-1 bases indexed one position later.
            let a = if r >= 1 { lower[r - 1] } else { 0.0 };
            let b = if r < k { lower[r] } else { 0.0 };
            der[r] = if inside { (a - b) / h } else { 0.0 };
        }
        cell
    }
}

/// Uniform cubic bases on one cell, lowest index first.
fn cubic_values(s: f64, out: &mut [f64]) {
    let r = 1.0 - s;
    let s2 = s * s;
    let s3 = s2 * s;
    out[0] = r * r * r / 6.0;
    out[1] = (3.0 * s3 - 6.0 * s2 + 4.0) / 6.0;
    out[2] = (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) / 6.0;
    out[3] = s3 / 6.0;
}

/// Naive Cox-de Boor recursion of basis `i` of order `p` on knots `t`.
pub fn cox_de_boor(t: &[f64], i: usize, p: usize, x: f64) -> f64 {
    if p == 0 {
        let last = i + 1 == t.len() - 1;
        return if (t[i] <= x && x < t[i + 1]) || (last && x == t[i + 1]) {
            1.0
        } else {
            0.0
        };
    }
    let mut v = 0.0;
    let d1 = t[i + p] - t[i];
    if d1 > 0.0 {
        v += (x - t[i]) / d1 * cox_de_boor(t, i, p - 1, x);
    }
    let d2 = t[i + p + 1] - t[i + 1];
    if d2 > 0.0 {
        v += (t[i + p + 1] - x) / d2 * cox_de_boor(t, i + 1, p - 1, x);
    }
    v
}

impl<F: Scalar> Tape<F> {
    /// `[.., d] -> [.., d * n_basis]`; feature `i * n_basis + g` is
    /// `B_g(clamp(x_i))`.
    pub fn bspline_expand(&mut self, x: Var, grid: SplineGrid) -> Var {
        let xs = self.shape(x).to_vec();
        let nb = grid.n_basis();
        let k1 = grid.order + 1;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len() * nb];
        let mut local = vec![0.0; k1];
        for (i, &v) in xv.iter().enumerate() {
            let first = grid.local_basis(v.f64(), &mut local);
            let o = &mut out[i * nb + first..][..k1];
            for (dst, &b) in o.iter_mut().zip(&local) {
                *dst = F::c(b);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() *= nb;
        self.push(Tensor::from_parts(shape, out), &[x], move |t, _, g, gr| {
            let xv = t.value(x).data();
            if let Some(gx) = gr.acc(x) {
                let mut val = vec![0.0; k1];
                let mut der = vec![0.0; k1];
                for (i, &v) in xv.iter().enumerate() {
                    let first = grid.local_basis_grad(v.f64(), &mut val, &mut der);
                    let gi = &g[i * nb + first..][..k1];
                    let s = gi.iter().zip(&der).fold(0.0, |a, (&d, &b)| a + d.f64() * b);
                    gx[i] = gx[i] + F::c(s);
                }
            }
        })
    }
}

/// `y = silu(x) c + expand(x) theta`.
#[derive(Clone, Debug)]
pub struct KanLayer {
    pub prefix: String,
    pub din: usize,
    pub dout: usize,
    pub grid: SplineGrid,
}

impl KanLayer {
    pub fn new(prefix: &str, din: usize, dout: usize, grid: SplineGrid) -> Self {
        KanLayer {
            prefix: prefix.to_string(),
            din,
            dout,
            grid,
        }
    }

    pub fn c(&self) -> String {
        join(&self.prefix, "c")
    }

    pub fn theta(&self) -> String {
        join(&self.prefix, "theta")
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        ps.insert_fan_in(&self.c(), &[self.din, self.dout], self.din, rng);
        let nb = self.grid.n_basis();
        let sd = 0.1 / (self.din as f64).sqrt();
        let th = Tensor::from_fn(&[self.din * nb, self.dout], |_| F::c(sd * rng.normal()));
        ps.insert(self.theta(), th).expect("fresh parameter name");
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let c = t.param(ps, &self.c());
        let th = t.param(ps, &self.theta());
        let b = t.silu(x);
        let base = t.linear(b, c, None);
        let e = t.bspline_expand(x, self.grid);
        let spl = t.linear(e, th, None);
        t.add(base, spl)
    }
}

/// `softmax_r(x M_k^T) M_v` with memory units `M_k, M_v` of shape `[r, d]`.
#[derive(Clone, Debug)]
pub struct ExternalAttention {
    pub prefix: String,
    pub d: usize,
    pub rank: usize,
}

impl ExternalAttention {
    pub fn new(prefix: &str, d: usize, rank: usize) -> Self {
        ExternalAttention {
            prefix: prefix.to_string(),
            d,
            rank,
        }
    }

    pub fn mk(&self) -> String {
        join(&self.prefix, "m_k")
    }

    pub fn mv(&self) -> String {
        join(&self.prefix, "m_v")
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        ps.insert_fan_in(&self.mk(), &[self.rank, self.d], self.d, rng);
        ps.insert_fan_in(&self.mv(), &[self.rank, self.d], self.rank, rng);
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let mk = t.param(ps, &self.mk());
        let mv = t.param(ps, &self.mv());
        let a = t.matmul_weight(x, mk, None, true);
        let a = t.softmax_last(a);
        t.matmul_weight(a, mv, None, false)
    }
}

/// Gated blend of a KAN path and an external-attention path.
#[derive(Clone, Debug)]
pub struct Agkan {
    pub prefix: String,
    pub kan: KanLayer,
    pub ext: ExternalAttention,
    gate1: Linear,
    gate2: Linear,
}

impl Agkan {
    pub fn new(prefix: &str, d: usize, rank: usize, grid: SplineGrid) -> Self {
        Agkan {
            prefix: prefix.to_string(),
            kan: KanLayer::new(&join(prefix, "kan"), d, d, grid),
            ext: ExternalAttention::new(&join(prefix, "ext"), d, rank),
            gate1: Linear::new(join(prefix, "gate1"), d, d, true),
            gate2: Linear::new(join(prefix, "gate2"), d, 1, true),
        }
    }

    pub fn gate_bias(&self) -> String {
        self.gate2.b()
    }

    pub fn gate_weight(&self) -> String {
        self.gate2.w()
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        self.kan.init(ps, rng);
        self.ext.init(ps, rng);
        self.gate1.init(ps, rng);
        self.gate2.init(ps, rng);
    }

    /// Per-sample gate `g` in `(0, 1)`, shape `[B]`.
    pub fn gate<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let b = t.shape(x)[0];
        let m = t.mean_time(x);
        let h = self.gate1.forward(t, ps, m);
        let h = t.silu(h);
        let z = self.gate2.forward(t, ps, h);
        let z = t.reshape(z, &[b]);
        t.sigmoid(z)
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let b = t.shape(x)[0];
        let g = self.gate(t, ps, x);
        let one = t.constant(Tensor::full(&[b], F::one()));
        let g_ext = t.sub(one, g);
        let k = self.kan.forward(t, ps, x);
        let e = self.ext.forward(t, ps, x);
        let k = t.mul_per_sample(k, g);
        let e = t.mul_per_sample(e, g_ext);
        t.add(k, e)
    }
}

/// Attention with KAN projections and an AGKAN output layer. Every spline
/// layer reads layer-normalized input so the grid span covers its mass.
#[derive(Clone, Debug)]
pub struct SplineMapAttention {
    pub d: usize,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    ln_out: LayerNorm,
    pub q: KanLayer,
    pub k: KanLayer,
    pub v: KanLayer,
    pub out: Agkan,
}

impl SplineMapAttention {
    pub fn new(prefix: &str, d: usize, rank: usize, grid: SplineGrid) -> Self {
        SplineMapAttention {
            d,
            ln_q: LayerNorm::new(join(prefix, "ln_q"), d),
            ln_kv: LayerNorm::new(join(prefix, "ln_kv"), d),
            ln_out: LayerNorm::new(join(prefix, "ln_out"), d),
            q: KanLayer::new(&join(prefix, "q"), d, d, grid),
            k: KanLayer::new(&join(prefix, "k"), d, d, grid),
            v: KanLayer::new(&join(prefix, "v"), d, d, grid),
            out: Agkan::new(&join(prefix, "agkan"), d, rank, grid),
        }
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        self.ln_q.init(ps);
        self.ln_kv.init(ps);
        self.ln_out.init(ps);
        self.q.init(ps, rng);
        self.k.init(ps, rng);
        self.v.init(ps, rng);
        self.out.init(ps, rng);
    }

    /// Attention output before the AGKAN layer, with the projected values.
    pub fn attention<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        ps: &ParamStore<F>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
    ) -> (Var, Var) {
        let qn = self.ln_q.forward(t, ps, q_in);
        let kn = self.ln_kv.forward(t, ps, k_in);
        let vn = self.ln_kv.forward(t, ps, v_in);
        let q = self.q.forward(t, ps, qn);
        let k = self.k.forward(t, ps, kn);
        let v = self.v.forward(t, ps, vn);
        (attend(t, q, k, v, 1.0 / (self.d as f64).sqrt()), v)
    }

    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        ps: &ParamStore<F>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
    ) -> Var {
        let (a, _) = self.attention(t, ps, q_in, k_in, v_in);
        let a = self.ln_out.forward(t, ps, a);
        let o = self.out.forward(t, ps, a);
        t.add(o, q_in)
    }
}

/// Key/value source schedule for fusion steps after the first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseSchedule {
    #[default]
    Alternate,
    AlwaysH,
    AlwaysD,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineMapConfig {
    pub d_model: usize,
    pub rank: usize,
    pub n_layers: usize,
    pub grid: SplineGrid,
    pub schedule: FuseSchedule,
}

impl SplineMapConfig {
    pub fn new(d_model: usize) -> Self {
        SplineMapConfig {
            d_model,
            rank: 32,
            n_layers: 6,
            grid: SplineGrid::default(),
            schedule: FuseSchedule::Alternate,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config(format!("{path}.rank"), "must be >= 1"));
        }
        if self.n_layers == 0 {
            return Err(Error::config(format!("{path}.n_layers"), "must be >= 1"));
        }
        self.grid.validate(&format!("{path}.grid"))
    }
}

/// Step-by-step fusion of the two branch outputs.
#[derive(Clone, Debug)]
pub struct ProgressiveFuse {
    pub cfg: SplineMapConfig,
    pub layers: Vec<SplineMapAttention>,
}

impl ProgressiveFuse {
    pub fn new(prefix: &str, cfg: SplineMapConfig) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|i| SplineMapAttention::new(&join(prefix, &i.to_string()), cfg.d_model, cfg.rank, cfg.grid))
            .collect();
        ProgressiveFuse { cfg, layers }
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        for l in &self.layers {
            l.init(ps, rng);
        }
    }

    /// `true` when step `i` (1-based) draws keys and values from `H1`.
    pub fn uses_h(&self, i: usize) -> bool {
        match self.cfg.schedule {
            FuseSchedule::Alternate => i % 2 == 1,
            FuseSchedule::AlwaysH => true,
            FuseSchedule::AlwaysD => i == 1,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        ps: &ParamStore<F>,
        d1: Var,
        h1: Var,
    ) -> Result<Var> {
        if t.shape(d1) != t.shape(h1) {
            return Err(Error::Shape(format!(
                "fusion inputs {:?} vs {:?}",
                t.shape(d1),
                t.shape(h1)
            )));
        }
        let mut f = self.layers[0].forward(t, ps, d1, h1, h1);
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let s = if self.uses_h(i + 1) { h1 } else { d1 };
            f = layer.forward(t, ps, f, s, s);
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::rng::Rng;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn randn(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut r = Rng::new(seed);
        Tensor::from_fn(shape, |_| scale * r.normal())
    }

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    #[test]
    fn cubic_closed_form_matches_the_triangle() {
        let g = SplineGrid::default();
        let mut r = Rng::new(31);
        let (mut a, mut b) = ([0.0; 4], [0.0; 4]);
        let (mut da, mut db) = ([0.0; 4], [0.0; 4]);
        for _ in 0..1000 {
            let x = r.uniform_in(-4.0, 4.0);
            let (cell, s) = g.locate(x);
            cubic_values(s, &mut a);
            g.triangle(s, &mut b);
            for j in 0..4 {
                assert!((a[j] - b[j]).abs() < 1e-14);
            }
            g.local_basis_grad(x, &mut a, &mut da);
            // Generic derivative via order-2 bases.
            let lower = SplineGrid { order: 2, ..g };
            let mut l = [0.0; 3];
            assert_eq!(lower.local_basis(x, &mut l), cell);
            let inside = x.abs() < g.range;
            for j in 0..4 {
                let lo = if j >= 1 { l[j - 1] } else { 0.0 };
                let hi = if j < 3 { l[j] } else { 0.0 };
                db[j] = if inside { (lo - hi) / g.step() } else { 0.0 };
                assert!((da[j] - db[j]).abs() < 1e-13, "{x} {j}");
            }
        }
    }

    fn softmax(v: &mut [f64]) {
        let m = v.iter().cloned().fold(f64::MIN, f64::max);
        v.iter_mut().for_each(|e| *e = (*e - m).exp());
        let z: f64 = v.iter().sum();
        v.iter_mut().for_each(|e| *e /= z);
    }

    /// Direct per-element KAN evaluation using the naive recursion.
    fn kan_oracle(ps: &ParamStore<f64>, l: &KanLayer, x: &[f64]) -> Vec<f64> {
        let knots = l.grid.knots();
        let nb = l.grid.n_basis();
        let c = ps.value(&l.c()).data();
        let th = ps.value(&l.theta()).data();
        let rows = x.len() / l.din;
        let mut out = vec![0.0; rows * l.dout];
        for r in 0..rows {
            for j in 0..l.dout {
                let mut y = 0.0;
                for i in 0..l.din {
                    let xi = x[r * l.din + i];
                    y += c[i * l.dout + j] * silu(xi);
                    let xc = xi.clamp(-l.grid.range, l.grid.range);
                    for g in 0..nb {
                        y += th[(i * nb + g) * l.dout + j] * cox_de_boor(&knots, g, l.grid.order, xc);
                    }
                }
                out[r * l.dout + j] = y;
            }
        }
        out
    }

    fn layer_norm(x: &[f64], d: usize) -> Vec<f64> {
        let mut out = x.to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
            row.iter_mut().for_each(|a| *a = (*a - m) / (v + 1e-5).sqrt());
        }
        out
    }

    #[test]
    fn knots_strictly_increasing() {
        let g = SplineGrid::default();
        let k = g.knots();
        assert_eq!(k.len(), 8 + 2 * 3 + 1);
        assert!(k.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(k[3], -3.0);
        assert_eq!(k[11], 3.0);
    }

    #[test]
    fn local_basis_matches_recursion() {
        for grid in [
            SplineGrid::default(),
            SplineGrid { intervals: 5, order: 2, range: 1.0 },
            SplineGrid { intervals: 3, order: 1, range: 2.0 },
        ] {
            let knots = grid.knots();
            let mut rng = Rng::new(1);
            for _ in 0..500 {
                let x = rng.uniform_in(-grid.range, grid.range);
                let fast = grid.basis(x);
                for (g, &f) in fast.iter().enumerate() {
                    assert!((f - cox_de_boor(&knots, g, grid.order, x)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn basis_at_a_knot() {
        let grid = SplineGrid::default();
        let knots = grid.knots();
        // Interior knot t_6 = -0.75: cubic bases take values 1/6, 2/3, 1/6.
        let x = knots[6];
        let b = grid.basis(x);
        assert!((b[3] - 1.0 / 6.0).abs() < 1e-12);
        assert!((b[4] - 2.0 / 3.0).abs() < 1e-12);
        assert!((b[5] - 1.0 / 6.0).abs() < 1e-12);
        for g in 0..grid.n_basis() {
            assert!((b[g] - cox_de_boor(&knots, g, 3, x)).abs() < 1e-15);
        }
    }

    #[test]
    fn kan_single_theta_at_knot_matches_recursion() {
        let grid = SplineGrid::default();
        let l = KanLayer::new("kan", 1, 1, grid);
        let mut ps = ParamStore::<f64>::new();
        l.init(&mut ps, &mut Rng::new(2));
        ps.value_mut(&l.c()).data_mut()[0] = 0.0;
        ps.value_mut(&l.theta()).data_mut().iter_mut().for_each(|v| *v = 0.0);
        ps.value_mut(&l.theta()).data_mut()[5] = 1.0;
        let knots = grid.knots();
        for &x in &knots[3..=11] {
            let mut t = Tape::new();
            let xv = t.constant(Tensor::new(&[1, 1, 1], vec![x]).unwrap());
            let y = l.forward(&mut t, &ps, xv);
            assert!((t.value(y).data()[0] - cox_de_boor(&knots, 5, 3, x)).abs() < 1e-12);
        }
    }

    #[test]
    fn kan_with_spline_path_off_is_silu() {
        let l = KanLayer::new("kan", 4, 4, SplineGrid::default());
        let mut ps = ParamStore::<f64>::new();
        l.init(&mut ps, &mut Rng::new(3));
        ps.value_mut(&l.theta()).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let c = ps.value_mut(&l.c()).data_mut();
        c.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 5 == 0 { 1.0 } else { 0.0 });
        let x = randn(&[2, 3, 4], 4, 2.0);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = l.forward(&mut t, &ps, xv);
        for (a, &b) in t.value(y).data().iter().zip(x.data()) {
            assert!((a - silu(b)).abs() < 1e-15);
        }
    }

    #[test]
    fn kan_matches_direct_evaluation_with_clamping() {
        let l = KanLayer::new("kan", 3, 2, SplineGrid::default());
        let mut ps = ParamStore::<f64>::new();
        l.init(&mut ps, &mut Rng::new(5));
        let x = randn(&[1, 6, 3], 6, 2.5);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = l.forward(&mut t, &ps, xv);
        for (a, b) in t.value(y).data().iter().zip(kan_oracle(&ps, &l, x.data())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn ext_setup(d: usize, r: usize, seed: u64) -> (ExternalAttention, ParamStore<f64>) {
        let e = ExternalAttention::new("ext", d, r);
        let mut ps = ParamStore::new();
        e.init(&mut ps, &mut Rng::new(seed));
        (e, ps)
    }

    fn run_ext(e: &ExternalAttention, ps: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = e.forward(&mut t, ps, xv);
        t.value(y).clone()
    }

    #[test]
    fn external_attention_examples() {
        let (e, ps) = ext_setup(6, 1, 7);
        let x = randn(&[2, 4, 6], 8, 1.0);
        let y = run_ext(&e, &ps, &x);
        let mv = ps.value(&e.mv()).data().to_vec();
        for row in y.data().chunks(6) {
            assert!(row.iter().zip(&mv).all(|(a, b)| (a - b).abs() < 1e-15));
        }

        let (e, mut ps) = ext_setup(6, 3, 9);
        ps.value_mut(&e.mk()).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let y = run_ext(&e, &ps, &x);
        let mv = ps.value(&e.mv()).data().to_vec();
        for row in y.data().chunks(6) {
            for c in 0..6 {
                let mean = (0..3).map(|r| mv[r * 6 + c]).sum::<f64>() / 3.0;
                assert!((row[c] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn external_attention_matches_loop_oracle() {
        let (e, ps) = ext_setup(6, 3, 10);
        let x = randn(&[1, 4, 6], 11, 1.0);
        let y = run_ext(&e, &ps, &x);
        let (mk, mv) = (ps.value(&e.mk()).data(), ps.value(&e.mv()).data());
        for t in 0..4 {
            let mut a: Vec<f64> = (0..3)
                .map(|r| (0..6).map(|c| x.at(&[0, t, c]) * mk[r * 6 + c]).sum())
                .collect();
            softmax(&mut a);
            for c in 0..6 {
                let o: f64 = (0..3).map(|r| a[r] * mv[r * 6 + c]).sum();
                assert!((y.at(&[0, t, c]) - o).abs() < 1e-6);
            }
        }
    }

    fn agkan_setup(d: usize, seed: u64) -> (Agkan, ParamStore<f64>) {
        let a = Agkan::new("agkan", d, 3, SplineGrid::default());
        let mut ps = ParamStore::new();
        a.init(&mut ps, &mut Rng::new(seed));
        (a, ps)
    }

    #[test]
    fn agkan_gate_limits_select_a_path() {
        let (a, mut ps) = agkan_setup(4, 12);
        let x = randn(&[2, 5, 4], 13, 1.0);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let k = a.kan.forward(&mut t, &ps, xv);
        let e = a.ext.forward(&mut t, &ps, xv);
        let (kv, ev) = (t.value(k).clone(), t.value(e).clone());
        ps.value_mut(&a.gate_weight()).data_mut().iter_mut().for_each(|v| *v = 0.0);
        for (bias, want) in [(30.0, &kv), (-30.0, &ev)] {
            ps.value_mut(&a.gate_bias()).data_mut()[0] = bias;
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = a.forward(&mut t, &ps, xv);
            let scale = want.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(t.value(y).max_abs_diff(want) <= 1e-12 * scale);
        }
        ps.value_mut(&a.gate_bias()).data_mut()[0] = 0.0;
        let mut t = Tape::new();
        let xv = t.constant(x);
        let y = a.forward(&mut t, &ps, xv);
        for ((p, k), e) in t.value(y).data().iter().zip(kv.data()).zip(ev.data()) {
            assert!((p - 0.5 * (k + e)).abs() < 1e-15);
        }
    }

    fn sma_setup(d: usize, seed: u64) -> (SplineMapAttention, ParamStore<f64>) {
        let s = SplineMapAttention::new("sma", d, 3, SplineGrid::default());
        let mut ps = ParamStore::new();
        s.init(&mut ps, &mut Rng::new(seed));
        (s, ps)
    }

    #[test]
    fn splinemap_attention_single_step_and_equal_keys() {
        let (s, ps) = sma_setup(4, 14);
        let q = randn(&[1, 1, 4], 15, 1.0);
        let kv = randn(&[1, 1, 4], 16, 1.0);
        let mut t = Tape::new();
        let (qv, kvv) = (t.constant(q.clone()), t.constant(kv));
        let y = s.forward(&mut t, &ps, qv, kvv, kvv);
        let (att, v) = s.attention(&mut t, &ps, qv, kvv, kvv);
        assert_eq!(t.value(att), t.value(v));
        let vn = s.ln_out.forward(&mut t, &ps, v);
        let ag = s.out.forward(&mut t, &ps, vn);
        let want = t.add(ag, qv);
        assert!(t.value(y).max_abs_diff(t.value(want)) < 1e-15);

        // All keys equal: scores uniform, attention output is the time mean of V.
        let q = randn(&[1, 5, 4], 17, 1.0);
        let k = Tensor::from_fn(&[1, 5, 4], |i| [0.3, -1.0, 0.5, 2.0][i % 4]);
        let v = randn(&[1, 5, 4], 18, 1.0);
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q), t.constant(k), t.constant(v));
        let (att, vp) = s.attention(&mut t, &ps, qv, kv, vv);
        let vp = t.value(vp).clone();
        for ti in 0..5 {
            for c in 0..4 {
                let mean = (0..5).map(|s| vp.at(&[0, s, c])).sum::<f64>() / 5.0;
                assert!((t.value(att).at(&[0, ti, c]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn splinemap_attention_matches_naive_composition() {
        let d = 4;
        let (s, ps) = sma_setup(d, 19);
        let q = randn(&[1, 5, d], 20, 1.0);
        let kv = randn(&[1, 5, d], 21, 1.0);
        let mut t = Tape::new();
        let (qv, kvv) = (t.constant(q.clone()), t.constant(kv.clone()));
        let y = s.forward(&mut t, &ps, qv, kvv, kvv);

        // LayerNorm parameters are at their initial identity values.
        let qp = kan_oracle(&ps, &s.q, &layer_norm(q.data(), d));
        let kp = kan_oracle(&ps, &s.k, &layer_norm(kv.data(), d));
        let vp = kan_oracle(&ps, &s.v, &layer_norm(kv.data(), d));
        let mut att = vec![0.0; 5 * d];
        for i in 0..5 {
            let mut sc: Vec<f64> = (0..5)
                .map(|j| (0..d).map(|c| qp[i * d + c] * kp[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            softmax(&mut sc);
            for c in 0..d {
                att[i * d + c] = (0..5).map(|j| sc[j] * vp[j * d + c]).sum();
            }
        }
        let att = layer_norm(&att, d);
        // AGKAN by hand: gate from the time mean, then the two paths.
        let mean: Vec<f64> = (0..d).map(|c| (0..5).map(|i| att[i * d + c]).sum::<f64>() / 5.0).collect();
        let (w1, b1) = (ps.value("sma.agkan.gate1.w").data(), ps.value("sma.agkan.gate1.b").data());
        let (w2, b2) = (ps.value("sma.agkan.gate2.w").data(), ps.value("sma.agkan.gate2.b").data());
        let hidden: Vec<f64> = (0..d)
            .map(|j| silu(b1[j] + (0..d).map(|i| mean[i] * w1[i * d + j]).sum::<f64>()))
            .collect();
        let z = b2[0] + (0..d).map(|i| hidden[i] * w2[i]).sum::<f64>();
        let g = 1.0 / (1.0 + (-z).exp());
        let kan = kan_oracle(&ps, &s.out.kan, &att);
        let (mk, mv) = (ps.value(&s.out.ext.mk()).data(), ps.value(&s.out.ext.mv()).data());
        for i in 0..5 {
            let mut a: Vec<f64> = (0..3)
                .map(|r| (0..d).map(|c| att[i * d + c] * mk[r * d + c]).sum())
                .collect();
            softmax(&mut a);
            for c in 0..d {
                let ext: f64 = (0..3).map(|r| a[r] * mv[r * d + c]).sum();
                let want = g * kan[i * d + c] + (1.0 - g) * ext + q.data()[i * d + c];
                assert!((t.value(y).at(&[0, i, c]) - want).abs() < 1e-5);
            }
        }
    }

    fn fuse_setup(n: usize, schedule: FuseSchedule, seed: u64) -> (ProgressiveFuse, ParamStore<f64>) {
        let cfg = SplineMapConfig {
            rank: 3,
            n_layers: n,
            schedule,
            ..SplineMapConfig::new(4)
        };
        let f = ProgressiveFuse::new("fuse", cfg);
        let mut ps = ParamStore::new();
        f.init(&mut ps, &mut Rng::new(seed));
        (f, ps)
    }

    #[test]
    fn fusion_schedule_and_first_step() {
        let (f, ps) = fuse_setup(3, FuseSchedule::Alternate, 22);
        assert!(f.uses_h(1) && !f.uses_h(2) && f.uses_h(3));
        let d1 = randn(&[1, 6, 4], 23, 1.0);
        let h1 = randn(&[1, 6, 4], 24, 1.0);
        let mut t = Tape::new();
        let (dv, hv) = (t.constant(d1.clone()), t.constant(h1.clone()));
        let out = f.forward(&mut t, &ps, dv, hv).unwrap();
        let f1 = f.layers[0].forward(&mut t, &ps, dv, hv, hv);
        let f2 = f.layers[1].forward(&mut t, &ps, f1, dv, dv);
        let f3 = f.layers[2].forward(&mut t, &ps, f2, hv, hv);
        assert_eq!(t.value(out), t.value(f3));

        let (one, ps1) = fuse_setup(1, FuseSchedule::Alternate, 25);
        let out = one.forward(&mut t, &ps1, dv, hv).unwrap();
        let eq8 = one.layers[0].forward(&mut t, &ps1, dv, hv, hv);
        assert_eq!(t.value(out), t.value(eq8));

        // Taint: zeroing H1 changes the fused output.
        let z = t.constant(Tensor::zeros(&[1, 6, 4]));
        let tainted = f.forward(&mut t, &ps, dv, z).unwrap();
        assert!(t.value(tainted).max_abs_diff(t.value(f3)) > 1e-6);

        let bad = t.constant(Tensor::zeros(&[1, 5, 4]));
        assert!(matches!(f.forward(&mut t, &ps, dv, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let (f, ps) = fuse_setup(2, FuseSchedule::AlwaysD, 26);
        let d1 = randn(&[2, 6, 4], 27, 1.0);
        let h1 = randn(&[2, 6, 4], 28, 1.0);
        let run = || {
            let mut t = Tape::new();
            let (dv, hv) = (t.constant(d1.clone()), t.constant(h1.clone()));
            let y = f.forward(&mut t, &ps, dv, hv).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = SplineMapConfig { rank: 3, n_layers: 1, ..SplineMapConfig::new(4) };
        let f = ProgressiveFuse::new("fuse", cfg);
        let mut ps = ParamStore::new();
        f.init(&mut ps, &mut Rng::new(100));
        let mut r = Rng::new(0);
        let d1 = Tensor::from_fn(&[1, 8, 4], |_| r.normal());
        let h1 = Tensor::from_fn(&[1, 8, 4], |_| r.normal());
        let probe = Tensor::from_fn(&[1, 8, 4], |_| r.normal());
        let rep = grad_check(
            |t, ps| {
                let (dv, hv) = (t.constant(d1.clone()), t.constant(h1.clone()));
                let y = f.forward(t, ps, dv, hv).unwrap();
                let p = t.constant(probe.clone());
                let m = t.mul(y, p);
                t.sum_all(m)
            },
            &ps,
            1e-3,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn expand_input_gradient_matches_finite_differences() {
        // Input gradient through the clamped spline expansion.
        let grid = SplineGrid { intervals: 4, order: 3, range: 1.0 };
        let x = randn(&[1, 3, 2], 33, 0.6);
        let w = randn(&[2 * 7], 34, 1.0);
        let eval = |xs: &Tensor<f64>| -> f64 {
            let mut t = Tape::new();
            let xv = t.constant(xs.clone());
            let e = t.bspline_expand(xv, grid);
            t.value(e).data().chunks(14).map(|c| c.iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()).sum()
        };
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let e = t.bspline_expand(xv, grid);
        let wv = t.constant(Tensor::from_fn(&[1, 3, 14], |i| w.data()[i % 14]));
        let m = t.mul(e, wv);
        let s = t.sum_all(m);
        let g = t.backward(s).get(xv);
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += 1e-6;
            let mut q = x.clone();
            q.data_mut()[i] -= 1e-6;
            let num = (eval(&p) - eval(&q)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-6 * num.abs().max(1.0), "{num} vs {}", g[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn partition_of_unity(seed in 0u64..1000) {
            let grid = SplineGrid::default();
            let mut rng = Rng::new(seed);
            let mut local = vec![0.0; 4];
            for _ in 0..625 {
                let x = rng.uniform_in(-grid.range, grid.range);
                grid.local_basis(x, &mut local);
                prop_assert!((local.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(local.iter().all(|&b| b >= 0.0));
            }
        }

        #[test]
        fn gate_strictly_inside_unit_interval(seed in 0u64..1000, scale in 0.1f64..20.0) {
            let (a, ps) = agkan_setup(4, seed);
            let mut t = Tape::new();
            let x = t.constant(randn(&[3, 4, 4], seed + 1, scale));
            let g = a.gate(&mut t, &ps, x);
            prop_assert!(t.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn score_rows_sum_to_one(seed in 0u64..1000) {
            let (s, ps) = sma_setup(4, seed);
            let mut t = Tape::new();
            let q = t.constant(randn(&[1, 6, 4], seed + 2, 1.0));
            let k = t.constant(randn(&[1, 6, 4], seed + 3, 1.0));
            let qn = s.ln_q.forward(&mut t, &ps, q);
            let kn = s.ln_kv.forward(&mut t, &ps, k);
            let qp = s.q.forward(&mut t, &ps, qn);
            let kp = s.k.forward(&mut t, &ps, kn);
            let sc = t.bmm(qp, kp, false, true);
            let sc = t.softmax_last(sc);
            for row in t.value(sc).data().chunks(6) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
