//! Training objective and evaluation metrics.
//!
//! ```text
//! total = L_p + lambda * L_1 + beta * L_nce
//! L_p   = mean over (sample, band) of 1 - r(time series)
//! L_nce = (L_eeg->audio + L_audio->eeg) / 2,  logits = cos(yhat_i, y_j) / tau
//! score = 2/3 mean(r, held-out stories) + 1/3 mean(r, held-out subjects)
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::numerics::pearson_parts;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Guard on sample norms inside the cosine similarity.
pub const NORM_EPS: f64 = 1e-8;

/// Sample representation fed to the contrastive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoNceRepr {
    /// The whole `T x M` window as one vector.
    #[default]
    Flatten,
    /// Mean over time, one `M` vector per sample.
    TimeMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
    pub infonce_repr: InfoNceRepr,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.5,
            beta: 0.1,
            tau: 0.07,
            infonce_repr: InfoNceRepr::Flatten,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!("{path}.lambda"), "must be >= 0"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config(format!("{path}.beta"), "must be >= 0"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config(format!("{path}.tau"), "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pearson: f64,
    pub l_one: f64,
    pub l_infonce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_pearson: f64, l_one: f64, l_infonce: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            l_pearson,
            l_one,
            l_infonce,
            total: compose(l_pearson, l_one, l_infonce, w),
        }
    }
}

fn compose(lp: f64, l1: f64, nce: f64, w: &LossWeights) -> f64 {
    lp + w.lambda * l1 + w.beta * nce
}

fn check_same(t: &[usize], u: &[usize], what: &str) -> Result<()> {
    if t != u {
        return Err(Error::Shape(format!("{what}: {t:?} vs {u:?}")));
    }
    Ok(())
}

impl<F: Scalar> Tape<F> {
    /// `1 - r` per (sample, band) over time on `[B, T, M]`, averaged. A band
    /// with zero variance on either side contributes `r = 0` and no gradient.
    pub fn pearson_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        check_same(&s, self.shape(target), "pearson_loss shapes")?;
        if s.len() != 3 {
            return Err(Error::Shape(format!("pearson_loss expects [B, T, M], got {s:?}")));
        }
        let (b, t, m) = (s[0], s[1], s[2]);
        if t < 2 {
            return Err(Error::Domain("pearson_loss needs T >= 2".into()));
        }
        let count = (b * m) as f64;
        // Per (sample, band): d r / d pred_t = y_t / sqrt(sxx syy) - r x_t / sxx
        // with centered x, y; symmetric for the target.
        let mut coef = vec![(0.0f64, 0.0f64, 0.0f64, 0.0f64); b * m];
        let mut rsum = 0.0;
        {
            let (pv, tv) = (self.value(pred).data(), self.value(target).data());
            for bi in 0..b {
                for k in 0..m {
                    let at = |v: &[F], ti: usize| v[(bi * t + ti) * m + k].f64();
                    let xs = (0..t).map(|ti| at(pv, ti));
                    let ys = (0..t).map(|ti| at(tv, ti));
                    let (r, degenerate) = pearson_parts(xs.clone(), ys.clone(), t);
                    rsum += r;
                    if !degenerate {
                        let mx = xs.clone().sum::<f64>() / t as f64;
                        let my = ys.clone().sum::<f64>() / t as f64;
                        let sxx: f64 = xs.map(|v| (v - mx) * (v - mx)).sum();
                        let syy: f64 = ys.map(|v| (v - my) * (v - my)).sum();
                        coef[bi * m + k] = (mx, my, sxx, syy);
                    }
                }
            }
        }
        let loss = 1.0 - rsum / count;
        let out = Tensor::from_parts(vec![1], vec![F::c(loss)]);
        Ok(self.push(out, &[pred, target], move |tp, _, g, gr| {
            let g0 = g[0].f64() / count;
            let (pv, tv) = (tp.value(pred).data(), tp.value(target).data());
            let mut gp = vec![F::zero(); pv.len()];
            let mut gt = vec![F::zero(); tv.len()];
            for bi in 0..b {
                for k in 0..m {
                    let (mx, my, sxx, syy) = coef[bi * m + k];
                    if sxx == 0.0 {
                        continue;
                    }
                    let idx = |ti: usize| (bi * t + ti) * m + k;
                    let sxy: f64 = (0..t).map(|ti| (pv[idx(ti)].f64() - mx) * (tv[idx(ti)].f64() - my)).sum();
                    let den = (sxx * syy).sqrt();
                    let r = sxy / den;
                    for ti in 0..t {
                        let (x, y) = (pv[idx(ti)].f64() - mx, tv[idx(ti)].f64() - my);
                        gp[idx(ti)] = F::c(-g0 * (y / den - r * x / sxx));
                        gt[idx(ti)] = F::c(-g0 * (x / den - r * y / syy));
                    }
                }
            }
            if let Some(acc) = gr.acc(pred) {
                acc.iter_mut().zip(&gp).for_each(|(o, v)| *o = *o + *v);
            }
            if let Some(acc) = gr.acc(target) {
                acc.iter_mut().zip(&gt).for_each(|(o, v)| *o = *o + *v);
            }
        }))
    }

    /// Mean absolute error; the subgradient at zero is zero.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        check_same(self.shape(pred), self.shape(target), "l1_loss shapes")?;
        let n = self.value(pred).len();
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .sum();
        let out = Tensor::from_parts(vec![1], vec![F::c(total / n as f64)]);
        Ok(self.push(out, &[pred, target], move |tp, _, g, gr| {
            let scale = g[0] / F::c(n as f64);
            let signs: Vec<F> = tp
                .value(pred)
                .data()
                .iter()
                .zip(tp.value(target).data())
                .map(|(a, b)| {
                    let d = *a - *b;
                    if d > F::zero() {
                        scale
                    } else if d < F::zero() {
                        -scale
                    } else {
                        F::zero()
                    }
                })
                .collect();
            if let Some(acc) = gr.acc(pred) {
                acc.iter_mut().zip(&signs).for_each(|(o, v)| *o = *o + *v);
            }
            if let Some(acc) = gr.acc(target) {
                acc.iter_mut().zip(&signs).for_each(|(o, v)| *o = *o - *v);
            }
        }))
    }

    /// Symmetric in-batch InfoNCE over cosine similarities of the per-sample
    /// flattened vectors of `[B, ...]` inputs.
    pub fn infonce_loss(&mut self, a: Var, p: Var, tau: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_same(&s, self.shape(p), "infonce_loss shapes")?;
        if s.is_empty() || s[0] == 0 {
            return Err(Error::Domain("infonce_loss needs B >= 1".into()));
        }
        let b = s[0];
        let dim = s[1..].iter().product::<usize>();
        let (ua, na) = normalize_rows(self.value(a).data(), dim);
        let (up, np) = normalize_rows(self.value(p).data(), dim);
        let logits: Vec<f64> = (0..b)
            .flat_map(|i| {
                let (ua, up) = (&ua, &up);
                (0..b).map(move |j| dot(&ua[i * dim..][..dim], &up[j * dim..][..dim]) / tau)
            })
            .collect();
        let (rows, cols) = softmax_both(&logits, b);
        let mut loss = 0.0;
        for i in 0..b {
            loss -= rows[i * b + i].ln() + cols[i * b + i].ln();
        }
        loss /= 2.0 * b as f64;
        let out = Tensor::from_parts(vec![1], vec![F::c(loss)]);
        Ok(self.push(out, &[a, p], move |_, _, g, gr| {
            let g0 = g[0].f64();
            // dL/dlogit_ij = (P_ij + Q_ij - 2 delta_ij) / (2B); cos = logit * tau.
            let gc: Vec<f64> = (0..b * b)
                .map(|ij| {
                    let diag = if ij / b == ij % b { 2.0 } else { 0.0 };
                    g0 * (rows[ij] + cols[ij] - diag) / (2.0 * b as f64 * tau)
                })
                .collect();
            let mut gua = vec![0.0; b * dim];
            let mut gup = vec![0.0; b * dim];
            for i in 0..b {
                for j in 0..b {
                    let w = gc[i * b + j];
                    for k in 0..dim {
                        gua[i * dim + k] += w * up[j * dim + k];
                        gup[j * dim + k] += w * ua[i * dim + k];
                    }
                }
            }
            if let Some(acc) = gr.acc(a) {
                unnormalize_grad(acc, &gua, &ua, &na, dim);
            }
            if let Some(acc) = gr.acc(p) {
                unnormalize_grad(acc, &gup, &up, &np, dim);
            }
        }))
    }

    /// The full objective and its f64 breakdown.
    pub fn composite_loss(&mut self, pred: Var, target: Var, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
        let lp = self.pearson_loss(pred, target)?;
        let l1 = self.l1_loss(pred, target)?;
        let nce = match w.infonce_repr {
            InfoNceRepr::Flatten => self.infonce_loss(pred, target, w.tau)?,
            InfoNceRepr::TimeMean => {
                let (a, b) = (self.mean_time(pred), self.mean_time(target));
                self.infonce_loss(a, b, w.tau)?
            }
        };
        let parts = [lp, l1, nce].map(|v| self.value(v).data()[0].f64());
        let breakdown = LossBreakdown::new(parts[0], parts[1], parts[2], w);
        let a = self.scale(l1, w.lambda);
        let c = self.scale(nce, w.beta);
        let s = self.add(lp, a);
        Ok((self.add(s, c), breakdown))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_rows<F: Scalar>(v: &[F], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = Vec::with_capacity(v.len());
    let mut norms = Vec::with_capacity(v.len() / dim.max(1));
    for row in v.chunks(dim) {
        let n = row.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
        let nn = n.max(NORM_EPS);
        out.extend(row.iter().map(|x| x.f64() / nn));
        norms.push(n);
    }
    (out, norms)
}

/// Pulls a gradient on `u = v / max(|v|, eps)` back to `v`.
fn unnormalize_grad<F: Scalar>(acc: &mut [F], gu: &[f64], u: &[f64], norms: &[f64], dim: usize) {
    for (i, &n) in norms.iter().enumerate() {
        let (gu, u) = (&gu[i * dim..][..dim], &u[i * dim..][..dim]);
        let acc = &mut acc[i * dim..][..dim];
        if n > NORM_EPS {
            let proj = dot(gu, u);
            for k in 0..dim {
                acc[k] = acc[k] + F::c((gu[k] - u[k] * proj) / n);
            }
        } else {
            for k in 0..dim {
                acc[k] = acc[k] + F::c(gu[k] / NORM_EPS);
            }
        }
    }
}

/// Row-wise and column-wise softmax of a `b x b` matrix.
fn softmax_both(x: &[f64], b: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rows = vec![0.0; b * b];
    let mut cols = vec![0.0; b * b];
    for i in 0..b {
        let mx = (0..b).map(|j| x[i * b + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..b).map(|j| (x[i * b + j] - mx).exp()).sum();
        for j in 0..b {
            rows[i * b + j] = (x[i * b + j] - mx).exp() / z;
        }
    }
    for j in 0..b {
        let mx = (0..b).map(|i| x[i * b + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..b).map(|i| (x[i * b + j] - mx).exp()).sum();
        for i in 0..b {
            cols[i * b + j] = (x[i * b + j] - mx).exp() / z;
        }
    }
    (rows, cols)
}

/// Weighted challenge score over per-subject correlations.
pub fn challenge_score(s1: &[f64], s2: &[f64]) -> Result<f64> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::Domain("challenge score needs both subject lists non-empty".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(2.0 / 3.0 * mean(s1) + 1.0 / 3.0 * mean(s2))
}

/// Mean over bands of the full-length correlation of `[T, M]` recordings.
pub fn band_pearson<F: Scalar>(pred: &[F], target: &[F], m: usize) -> Result<f64> {
    check_same(&[pred.len()], &[target.len()], "band_pearson lengths")?;
    if m == 0 || pred.len() % m != 0 {
        return Err(Error::Shape(format!("length {} is not a multiple of {m} bands", pred.len())));
    }
    let t = pred.len() / m;
    if t < 2 {
        return Err(Error::Domain("band_pearson needs T >= 2".into()));
    }
    let mut total = 0.0;
    for k in 0..m {
        let xs = (0..t).map(|ti| pred[ti * m + k].f64());
        let ys = (0..t).map(|ti| target[ti * m + k].f64());
        total += pearson_parts(xs, ys, t).0;
    }
    Ok(total / m as f64)
}

/// Mean of `band_pearson` over consecutive non-overlapping windows; a
/// trailing partial window is dropped, and a recording shorter than one
/// window is scored whole.
pub fn windowed_pearson<F: Scalar>(pred: &[F], target: &[F], m: usize, window: usize) -> Result<f64> {
    check_same(&[pred.len()], &[target.len()], "windowed_pearson lengths")?;
    if m == 0 || window < 2 {
        return Err(Error::Domain("windowed_pearson needs m >= 1 and window >= 2".into()));
    }
    let t = pred.len() / m;
    let n = t / window;
    if n == 0 {
        return band_pearson(pred, target, m);
    }
    let span = window * m;
    let mut total = 0.0;
    for w in 0..n {
        let r = w * span..(w + 1) * span;
        total += band_pearson(&pred[r.clone()], &target[r], m)?;
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject_id: usize,
    pub split: Split,
    /// Mean of windowed correlations; this is the reported value.
    pub pearson_r: f64,
    /// Correlation over the whole recording.
    pub pearson_r_full: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub subjects: Vec<SubjectScore>,
    pub mean_heldout_stories: f64,
    pub mean_heldout_subjects: f64,
    pub score: f64,
}

impl ScoreReport {
    pub fn from_subjects(subjects: Vec<SubjectScore>) -> Result<Self> {
        let pick = |s: Split| -> Vec<f64> {
            subjects.iter().filter(|x| x.split == s).map(|x| x.pearson_r).collect()
        };
        let (s1, s2) = (pick(Split::HeldoutStories), pick(Split::HeldoutSubjects));
        let score = challenge_score(&s1, &s2)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(ScoreReport {
            mean_heldout_stories: mean(&s1),
            mean_heldout_subjects: mean(&s2),
            score,
            subjects,
        })
    }

    /// Score recomputed from the per-subject rows.
    pub fn recompute(&self) -> Result<f64> {
        Ok(Self::from_subjects(self.subjects.clone())?.score)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject_id,split,pearson_r\n");
        for s in &self.subjects {
            let _ = writeln!(out, "{},{},{}", s.subject_id, s.split.as_str(), s.pearson_r);
        }
        out
    }
}
