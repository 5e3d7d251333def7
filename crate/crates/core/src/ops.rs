//! Tensor operations recorded on the [`Tape`]. Sequence tensors are laid out
//! `[B, T, D]` with channels innermost.

use crate::tape::{Tape, Var};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

/// Row-wise softmax on a flat buffer with rows of width `k`.
pub fn softmax_rows<F: Scalar>(x: &[F], k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (row, o) in x.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut s = F::zero();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - m).exp();
            s = s + *oi;
        }
        o.iter_mut().for_each(|v| *v = *v / s);
    }
    out
}

impl<F: Scalar> Tape<F> {
    /// `x[.., din] @ w[din, dout] (+ b)`; with `transposed` the weight is
    /// stored `[dout, din]`.
    pub fn matmul_weight(&mut self, x: Var, w: Var, bias: Option<Var>, transposed: bool) -> Var {
        let xs = self.shape(x).to_vec();
        let din = *xs.last().expect("rank >= 1");
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "weight must be a matrix");
        let dout = if transposed { ws[0] } else { ws[1] };
        let w_in = if transposed { ws[1] } else { ws[0] };
        assert_eq!(w_in, din, "weight input dim {w_in} vs feature dim {din}");
        let n = self.value(x).len() / din;
        let mut out = vec![F::zero(); n * dout];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let wm = if transposed {
                MatRef::t(wv, din, dout)
            } else {
                MatRef::rm(wv, din, dout)
            };
            gemm(MatRef::rm(xv, n, din), wm, &mut out, false);
            if let Some(b) = bias {
                let bv = self.value(b).data();
                assert_eq!(bv.len(), dout, "bias size");
                for row in out.chunks_mut(dout) {
                    add_into(row, bv);
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(Tensor::from_parts(shape, out), &parents, move |t, _, g, gr| {
            let gm = MatRef::rm(g, n, dout);
            if gr.acc(x).is_some() {
                let wv = t.value(w).data();
                // dx = g @ W^T
                let wt = if transposed {
                    MatRef::rm(wv, dout, din)
                } else {
                    MatRef::t(wv, dout, din)
                };
                gemm(gm, wt, gr.acc(x).unwrap(), true);
            }
            if gr.acc(w).is_some() {
                let xv = t.value(x).data();
                if transposed {
                    // dW[dout, din] = g^T @ x
                    gemm(MatRef::t(g, dout, n), MatRef::rm(xv, n, din), gr.acc(w).unwrap(), true);
                } else {
                    gemm(MatRef::t(xv, din, n), gm, gr.acc(w).unwrap(), true);
                }
            }
            if let Some(b) = bias {
                if let Some(gb) = gr.acc(b) {
                    for row in g.chunks(dout) {
                        add_into(gb, row);
                    }
                }
            }
        })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        self.matmul_weight(x, w, b, false)
    }

    /// Batched matrix product over a leading group axis. With `ta` the left
    /// operand is stored `[G, k, m]`, with `tb` the right one `[G, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3, "bmm lhs rank");
        assert_eq!(sb.len(), 3, "bmm rhs rank");
        assert_eq!(sa[0], sb[0], "bmm group count");
        let gcount = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dim");
        let (asz, bsz) = (m * k, k * n);
        let mut out = vec![F::zero(); gcount * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for gi in 0..gcount {
                let ad = &av[gi * asz..(gi + 1) * asz];
                let bd = &bv[gi * bsz..(gi + 1) * bsz];
                let am = if ta { MatRef::t(ad, m, k) } else { MatRef::rm(ad, m, k) };
                let bm = if tb { MatRef::t(bd, k, n) } else { MatRef::rm(bd, k, n) };
                gemm(am, bm, &mut out[gi * m * n..(gi + 1) * m * n], false);
            }
        }
        self.push(
            Tensor::from_parts(vec![gcount, m, n], out),
            &[a, b],
            move |t, _, g, gr| {
                let need_a = gr.acc(a).is_some();
                let need_b = gr.acc(b).is_some();
                let av = t.value(a).data();
                let bv = t.value(b).data();
                for gi in 0..gcount {
                    let gd = &g[gi * m * n..(gi + 1) * m * n];
                    let ad = &av[gi * asz..(gi + 1) * asz];
                    let bd = &bv[gi * bsz..(gi + 1) * bsz];
                    if need_a {
                        let ga = &mut gr.acc(a).unwrap()[gi * asz..(gi + 1) * asz];
                        if ta {
                            // dA[k, m] = B' @ dC^T
                            let bm = if tb { MatRef::t(bd, k, n) } else { MatRef::rm(bd, k, n) };
                            gemm(bm, MatRef::t(gd, n, m), ga, true);
                        } else {
                            // dA[m, k] = dC @ B'^T
                            let bt = if tb { MatRef::rm(bd, n, k) } else { MatRef::t(bd, n, k) };
                            gemm(MatRef::rm(gd, m, n), bt, ga, true);
                        }
                    }
                    if need_b {
                        let gb = &mut gr.acc(b).unwrap()[gi * bsz..(gi + 1) * bsz];
                        if tb {
                            // dB[n, k] = dC^T @ A'
                            let am = if ta { MatRef::t(ad, m, k) } else { MatRef::rm(ad, m, k) };
                            gemm(MatRef::t(gd, n, m), am, gb, true);
                        } else {
                            // dB[k, n] = A'^T @ dC
                            let at = if ta { MatRef::rm(ad, k, m) } else { MatRef::t(ad, k, m) };
                            gemm(at, MatRef::rm(gd, m, n), gb, true);
                        }
                    }
                }
            },
        )
    }

    /// Softmax over the trailing axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let k = self.value(x).last_dim();
        let out = softmax_rows(self.value(x).data(), k);
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), &[x], move |_, y, g, gr| {
            if let Some(gx) = gr.acc(x) {
                for ((yr, gy), gxr) in y.data().chunks(k).zip(g.chunks(k)).zip(gx.chunks_mut(k)) {
                    let dot = yr.iter().zip(gy).fold(F::zero(), |a, (&p, &q)| a + p * q);
                    for i in 0..k {
                        gxr[i] = gxr[i] + yr[i] * (gy[i] - dot);
                    }
                }
            }
        })
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let d = self.value(x).last_dim();
        assert_eq!(self.shape(gamma), &[d], "layer_norm gamma");
        assert_eq!(self.shape(beta), &[d], "layer_norm beta");
        let eps = F::c(EPS);
        let df = F::c(d as f64);
        let stats = |row: &[F]| {
            let mu = row.iter().fold(F::zero(), |a, &v| a + v) / df;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mu) * (v - mu)) / df;
            (mu, F::one() / (var + eps).sqrt())
        };
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![F::zero(); xv.len()];
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let (mu, rstd) = stats(row);
            for i in 0..d {
                o[i] = (row[i] - mu) * rstd * gv[i] + bv[i];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), &[x, gamma, beta], move |t, _, g, gr| {
            let xv = t.value(x).data();
            let gv = t.value(gamma).data();
            let mut dgamma = vec![F::zero(); d];
            let mut dbeta = vec![F::zero(); d];
            let need_x = gr.acc(x).is_some();
            let mut gxhat = vec![F::zero(); d];
            for (ri, (row, gy)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                let mu = row.iter().fold(F::zero(), |a, &v| a + v) / df;
                let var = row.iter().fold(F::zero(), |a, &v| a + (v - mu) * (v - mu)) / df;
                let rstd = F::one() / (var + eps).sqrt();
                let mut m1 = F::zero();
                let mut m2 = F::zero();
                for i in 0..d {
                    let xh = (row[i] - mu) * rstd;
                    dgamma[i] = dgamma[i] + gy[i] * xh;
                    dbeta[i] = dbeta[i] + gy[i];
                    gxhat[i] = gy[i] * gv[i];
                    m1 = m1 + gxhat[i];
                    m2 = m2 + gxhat[i] * xh;
                }
                if need_x {
                    m1 = m1 / df;
                    m2 = m2 / df;
                    let gx = &mut gr.acc(x).unwrap()[ri * d..(ri + 1) * d];
                    for i in 0..d {
                        let xh = (row[i] - mu) * rstd;
                        gx[i] = gx[i] + rstd * (gxhat[i] - m1 - xh * m2);
                    }
                }
            }
            if let Some(gg) = gr.acc(gamma) {
                add_into(gg, &dgamma);
            }
            if let Some(gb) = gr.acc(beta) {
                add_into(gb, &dbeta);
            }
        })
    }

    /// 1-D convolution over time. `w` is `[k, cin, cout]`; output length is
    /// `(T + 2*pad - k) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "conv1d input rank");
        let (b, t, cin) = (xs[0], xs[1], xs[2]);
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 3, "conv1d weight rank");
        let (k, wcin, cout) = (ws[0], ws[1], ws[2]);
        assert_eq!(wcin, cin, "conv1d channels");
        assert!(t + 2 * pad >= k, "conv1d input shorter than kernel");
        let tout = (t + 2 * pad - k) / stride + 1;
        let kc = k * cin;
        let rows = b * tout;
        let mut cols = vec![F::zero(); rows * kc];
        {
            let xv = self.value(x).data();
            for bi in 0..b {
                for to in 0..tout {
                    let dst = &mut cols[(bi * tout + to) * kc..(bi * tout + to + 1) * kc];
                    for j in 0..k {
                        let src = (to * stride + j) as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            let s = (bi * t + src as usize) * cin;
                            dst[j * cin..(j + 1) * cin].copy_from_slice(&xv[s..s + cin]);
                        }
                    }
                }
            }
        }
        let mut out = vec![F::zero(); rows * cout];
        gemm(
            MatRef::rm(&cols, rows, kc),
            MatRef::rm(self.value(w).data(), kc, cout),
            &mut out,
            false,
        );
        if let Some(bb) = bias {
            let bv = self.value(bb).data();
            for row in out.chunks_mut(cout) {
                add_into(row, bv);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(
            Tensor::from_parts(vec![b, tout, cout], out),
            &parents,
            move |tp, _, g, gr| {
                let gm = MatRef::rm(g, rows, cout);
                if let Some(gw) = gr.acc(w) {
                    gemm(MatRef::t(&cols, kc, rows), gm, gw, true);
                }
                if gr.acc(x).is_some() {
                    let mut gcols = vec![F::zero(); rows * kc];
                    gemm(gm, MatRef::t(tp.value(w).data(), cout, kc), &mut gcols, false);
                    let gx = gr.acc(x).unwrap();
                    for bi in 0..b {
                        for to in 0..tout {
                            let src_row = &gcols[(bi * tout + to) * kc..(bi * tout + to + 1) * kc];
                            for j in 0..k {
                                let src = (to * stride + j) as isize - pad as isize;
                                if src >= 0 && (src as usize) < t {
                                    let s = (bi * t + src as usize) * cin;
                                    add_into(&mut gx[s..s + cin], &src_row[j * cin..(j + 1) * cin]);
                                }
                            }
                        }
                    }
                }
                if let Some(bb) = bias {
                    if let Some(gb) = gr.acc(bb) {
                        for row in g.chunks(cout) {
                            add_into(gb, row);
                        }
                    }
                }
            },
        )
    }

    /// Per-channel temporal convolution with "same" zero padding; `w` is
    /// `[k, d]` with odd `k`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        let k = self.shape(w)[0];
        assert_eq!(self.shape(w), &[k, d], "depthwise weight shape");
        assert_eq!(k % 2, 1, "depthwise kernel must be odd");
        let half = k / 2;
        let mut out = vec![F::zero(); b * t * d];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..b {
                for ti in 0..t {
                    let o = &mut out[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                    for j in 0..k {
                        let src = ti as isize + j as isize - half as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let xr = &xv[(bi * t + src as usize) * d..][..d];
                        let wr = &wv[j * d..(j + 1) * d];
                        for c in 0..d {
                            o[c] = o[c] + wr[c] * xr[c];
                        }
                    }
                }
            }
            if let Some(bb) = bias {
                let bv = self.value(bb).data();
                for row in out.chunks_mut(d) {
                    add_into(row, bv);
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(Tensor::from_parts(xs, out), &parents, move |tp, _, g, gr| {
            let xv = tp.value(x).data();
            let wv = tp.value(w).data();
            let need_x = gr.acc(x).is_some();
            let need_w = gr.acc(w).is_some();
            for bi in 0..b {
                for ti in 0..t {
                    let gy = &g[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                    for j in 0..k {
                        let src = ti as isize + j as isize - half as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let off = (bi * t + src as usize) * d;
                        if need_w {
                            let gw = &mut gr.acc(w).unwrap()[j * d..(j + 1) * d];
                            for c in 0..d {
                                gw[c] = gw[c] + gy[c] * xv[off + c];
                            }
                        }
                        if need_x {
                            let gx = &mut gr.acc(x).unwrap()[off..off + d];
                            for c in 0..d {
                                gx[c] = gx[c] + gy[c] * wv[j * d + c];
                            }
                        }
                    }
                }
            }
            if let Some(bb) = bias {
                if let Some(gb) = gr.acc(bb) {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
        })
    }

    /// `y[..., i] = x[..., perm[i]]` on the trailing axis.
    pub fn permute_last(&mut self, x: Var, perm: Vec<usize>) -> Var {
        let d = self.value(x).last_dim();
        assert_eq!(perm.len(), d, "permutation length");
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            for (i, &p) in perm.iter().enumerate() {
                o[i] = row[p];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), &[x], move |_, _, g, gr| {
            if let Some(gx) = gr.acc(x) {
                for (gxr, gy) in gx.chunks_mut(d).zip(g.chunks(d)) {
                    for (i, &p) in perm.iter().enumerate() {
                        gxr[p] = gxr[p] + gy[i];
                    }
                }
            }
        })
    }

    /// Windowed weighted sum: `y[b,t,c] = sum_i a[b,t,i] * v[b, t+i-W/2, c]`,
    /// zero outside the sequence. `a` is `[B, T, W]`, `v` is `[B, T, D]`.
    pub fn unfold_weighted(&mut self, a: Var, v: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sv = self.shape(v).to_vec();
        let (b, t, w) = (sa[0], sa[1], sa[2]);
        assert_eq!(&sv[..2], &[b, t], "unfold_weighted batch/time");
        let d = sv[2];
        let half = (w / 2) as isize;
        let mut out = vec![F::zero(); b * t * d];
        {
            let av = self.value(a).data();
            let vv = self.value(v).data();
            for bi in 0..b {
                for ti in 0..t {
                    let o = &mut out[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                    for i in 0..w {
                        let src = ti as isize + i as isize - half;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let wt = av[(bi * t + ti) * w + i];
                        let vr = &vv[(bi * t + src as usize) * d..][..d];
                        for c in 0..d {
                            o[c] = o[c] + wt * vr[c];
                        }
                    }
                }
            }
        }
        self.push(Tensor::from_parts(vec![b, t, d], out), &[a, v], move |tp, _, g, gr| {
            let av = tp.value(a).data();
            let vv = tp.value(v).data();
            let need_a = gr.acc(a).is_some();
            let need_v = gr.acc(v).is_some();
            for bi in 0..b {
                for ti in 0..t {
                    let gy = &g[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                    for i in 0..w {
                        let src = ti as isize + i as isize - half;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let off = (bi * t + src as usize) * d;
                        if need_a {
                            let dot = gy.iter().zip(&vv[off..off + d]).fold(F::zero(), |s, (&p, &q)| s + p * q);
                            let ga = gr.acc(a).unwrap();
                            ga[(bi * t + ti) * w + i] = ga[(bi * t + ti) * w + i] + dot;
                        }
                        if need_v {
                            let wt = av[(bi * t + ti) * w + i];
                            let gvv = &mut gr.acc(v).unwrap()[off..off + d];
                            for c in 0..d {
                                gvv[c] = gvv[c] + wt * gy[c];
                            }
                        }
                    }
                }
            }
        })
    }

    /// Linear interpolation along time to `t_out` samples (half-pixel
    /// centers, edges clamped).
    pub fn resample_linear(&mut self, x: Var, t_out: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, t_in, d) = (xs[0], xs[1], xs[2]);
        let taps = interp_taps(t_in, t_out);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); b * t_out * d];
        for bi in 0..b {
            for (to, &(i0, i1, frac)) in taps.iter().enumerate() {
                let fr = F::c(frac);
                let w0 = F::one() - fr;
                let o = &mut out[(bi * t_out + to) * d..(bi * t_out + to + 1) * d];
                let r0 = &xv[(bi * t_in + i0) * d..][..d];
                let r1 = &xv[(bi * t_in + i1) * d..][..d];
                for c in 0..d {
                    o[c] = w0 * r0[c] + fr * r1[c];
                }
            }
        }
        self.push(Tensor::from_parts(vec![b, t_out, d], out), &[x], move |_, _, g, gr| {
            if let Some(gx) = gr.acc(x) {
                for bi in 0..b {
                    for (to, &(i0, i1, frac)) in taps.iter().enumerate() {
                        let fr = F::c(frac);
                        let w0 = F::one() - fr;
                        let gy = &g[(bi * t_out + to) * d..(bi * t_out + to + 1) * d];
                        for c in 0..d {
                            let o0 = (bi * t_in + i0) * d + c;
                            gx[o0] = gx[o0] + w0 * gy[c];
                            let o1 = (bi * t_in + i1) * d + c;
                            gx[o1] = gx[o1] + fr * gy[c];
                        }
                    }
                }
            }
        })
    }

    /// Concatenation along the trailing axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let lead = &self.shape(xs[0])[..self.shape(xs[0]).len() - 1];
        let lead = lead.to_vec();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert_eq!(&s[..s.len() - 1], lead.as_slice(), "concat leading dims");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![F::zero(); rows * total];
        let mut off = 0;
        for (&v, &wd) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let mut shape = lead;
        shape.push(total);
        let parts = xs.to_vec();
        self.push(Tensor::from_parts(shape, out), xs, move |_, _, g, gr| {
            let mut off = 0;
            for (&v, &wd) in parts.iter().zip(&widths) {
                if let Some(gv) = gr.acc(v) {
                    for r in 0..rows {
                        add_into(&mut gv[r * wd..(r + 1) * wd], &g[r * total + off..r * total + off + wd]);
                    }
                }
                off += wd;
            }
        })
    }

    /// Channels `[start, start+len)` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        assert!(start + len <= d, "slice_last bounds");
        let rows = self.value(x).len() / d;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::from_parts(shape, out), &[x], move |_, _, g, gr| {
            if let Some(gx) = gr.acc(x) {
                for r in 0..rows {
                    add_into(&mut gx[r * d + start..r * d + start + len], &g[r * len..(r + 1) * len]);
                }
            }
        })
    }

    /// `[B, T, H*dk] -> [B*H, T, dk]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        assert_eq!(d % heads, 0, "heads must divide width");
        let dk = d / heads;
        let map = move |bi: usize, hi: usize, ti: usize| ((bi * heads + hi) * t + ti) * dk;
        let src = move |bi: usize, hi: usize, ti: usize| (bi * t + ti) * d + hi * dk;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for bi in 0..b {
            for hi in 0..heads {
                for ti in 0..t {
                    out[map(bi, hi, ti)..][..dk].copy_from_slice(&xv[src(bi, hi, ti)..][..dk]);
                }
            }
        }
        self.push(Tensor::from_parts(vec![b * heads, t, dk], out), &[x], move |_, _, g, gr| {
            if let Some(gx) = gr.acc(x) {
                for bi in 0..b {
                    for hi in 0..heads {
                        for ti in 0..t {
                            add_into(&mut gx[src(bi, hi, ti)..][..dk], &g[map(bi, hi, ti)..][..dk]);
                        }
                    }
                }
            }
        })
    }

    /// `[B*H, T, dk] -> [B, T, H*dk]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (bh, t, dk) = (s[0], s[1], s[2]);
        assert_eq!(bh % heads, 0);
        let b = bh / heads;
        let d = heads * dk;
        let src = move |bi: usize, hi: usize, ti: usize| ((bi * heads + hi) * t + ti) * dk;
        let dst = move |bi: usize, hi: usize, ti: usize| (bi * t + ti) * d + hi * dk;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for bi in 0..b {
            for hi in 0..heads {
                for ti in 0..t {
                    out[dst(bi, hi, ti)..][..dk].copy_from_slice(&xv[src(bi, hi, ti)..][..dk]);
                }
            }
        }
        self.push(Tensor::from_parts(vec![b, t, d], out), &[x], move |_, _, g, gr| {
            if let Some(gx) = gr.acc(x) {
                for bi in 0..b {
                    for hi in 0..heads {
                        for ti in 0..t {
                            add_into(&mut gx[src(bi, hi, ti)..][..dk], &g[dst(bi, hi, ti)..][..dk]);
                        }
                    }
                }
            }
        })
    }

    /// Mean over the time axis: `[B, T, D] -> [B, D]`.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let inv = F::one() / F::c(t as f64);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for ti in 0..t {
                add_into(o, &xv[(bi * t + ti) * d..][..d]);
            }
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        self.push(Tensor::from_parts(vec![b, d], out), &[x], move |_, _, g, gr| {
            if let Some(gx) = gr.acc(x) {
                for bi in 0..b {
                    for ti in 0..t {
                        let gxr = &mut gx[(bi * t + ti) * d..][..d];
                        for c in 0..d {
                            gxr[c] = gxr[c] + g[bi * d + c] * inv;
                        }
                    }
                }
            }
        })
    }

    /// `x[B, T, D] + e[B, D]` broadcast over time.
    pub fn add_bcast_time(&mut self, x: Var, e: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        assert_eq!(self.shape(e), &[b, d], "broadcast operand shape");
        let ev = self.value(e).data();
        let mut out = self.value(x).data().to_vec();
        for bi in 0..b {
            for ti in 0..t {
                add_into(&mut out[(bi * t + ti) * d..][..d], &ev[bi * d..(bi + 1) * d]);
            }
        }
        self.push(Tensor::from_parts(s, out), &[x, e], move |_, _, g, gr| {
            if let Some(gx) = gr.acc(x) {
                add_into(gx, g);
            }
            if let Some(ge) = gr.acc(e) {
                for bi in 0..b {
                    for ti in 0..t {
                        add_into(&mut ge[bi * d..(bi + 1) * d], &g[(bi * t + ti) * d..][..d]);
                    }
                }
            }
        })
    }

    /// Rows of `table[S, D]`; `None` selects the mean of all rows.
    pub fn gather_rows(&mut self, table: Var, idx: &[Option<usize>]) -> Var {
        let s = self.shape(table).to_vec();
        let (rows, d) = (s[0], s[1]);
        let tv = self.value(table).data();
        let inv = F::one() / F::c(rows as f64);
        let mut mean = vec![F::zero(); d];
        for r in 0..rows {
            add_into(&mut mean, &tv[r * d..(r + 1) * d]);
        }
        mean.iter_mut().for_each(|v| *v = *v * inv);
        let mut out = Vec::with_capacity(idx.len() * d);
        for i in idx {
            match *i {
                Some(r) => {
                    assert!(r < rows, "embedding row {r} out of range");
                    out.extend_from_slice(&tv[r * d..(r + 1) * d]);
                }
                None => out.extend_from_slice(&mean),
            }
        }
        let idx = idx.to_vec();
        self.push(Tensor::from_parts(vec![idx.len(), d], out), &[table], move |_, _, g, gr| {
            if let Some(gt) = gr.acc(table) {
                for (bi, i) in idx.iter().enumerate() {
                    let gy = &g[bi * d..(bi + 1) * d];
                    match *i {
                        Some(r) => add_into(&mut gt[r * d..(r + 1) * d], gy),
                        None => {
                            for r in 0..rows {
                                for c in 0..d {
                                    gt[r * d + c] = gt[r * d + c] + gy[c] * inv;
                                }
                            }
                        }
                    }
                }
            }
        })
    }
}

/// Source indices and blend weight for each output sample of a linear
/// resampling from `t_in` to `t_out` samples.
pub fn interp_taps(t_in: usize, t_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = t_in as f64 / t_out as f64;
    (0..t_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (t_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(t_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
