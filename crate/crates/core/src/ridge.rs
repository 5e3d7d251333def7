//! Closed-form lagged ridge regression from EEG to mel.
//!
//! Features for time `t` are `eeg[t + l, c]` for `l in 0..=max_lag` (zero
//! past the end), centered on the training means. The penalty is
//! `alpha * trace(X^T X) / p`, so `alpha` is scale free.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Recording, CROP_LEN};
use crate::error::{Error, Result};
use crate::losses::windowed_pearson;
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub max_lag: usize,
    pub channels: usize,
    pub bands: usize,
    pub alpha: f64,
    x_mean: Vec<f64>,
    y_mean: Vec<f64>,
    /// `[p, M]` row-major.
    weights: Vec<f64>,
}

/// Lagged design matrix `[T, C * (max_lag + 1)]` of the rows `range`.
fn design(eeg: &Tensor<f32>, max_lag: usize, rows: std::ops::Range<usize>) -> Vec<f64> {
    let (n, c) = (eeg.shape()[0], eeg.shape()[1]);
    let p = c * (max_lag + 1);
    let mut x = vec![0.0; rows.len() * p];
    for (i, t) in rows.enumerate() {
        for l in 0..=max_lag {
            if t + l < n {
                let src = &eeg.data()[(t + l) * c..(t + l + 1) * c];
                for (dst, &v) in x[i * p + l * c..i * p + (l + 1) * c].iter_mut().zip(src) {
                    *dst = v as f64;
                }
            }
        }
    }
    x
}

/// One training segment: a recording restricted to a row range.
pub type Segment<'a> = (&'a Recording, std::ops::Range<usize>);

struct Moments {
    xtx: Vec<f64>,
    xty: Vec<f64>,
    x_mean: Vec<f64>,
    y_mean: Vec<f64>,
}

fn moments(segs: &[Segment<'_>], max_lag: usize) -> Result<Moments> {
    let first = segs.first().ok_or_else(|| Error::Domain("ridge needs training data".into()))?.0;
    let (c, m) = (first.eeg.shape()[1], first.mel.shape()[1]);
    let p = c * (max_lag + 1);
    let mut sx = vec![0.0; p];
    let mut sy = vec![0.0; m];
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p * m];
    let mut count = 0usize;
    for (rec, range) in segs {
        if rec.eeg.shape()[1] != c || rec.mel.shape()[1] != m {
            return Err(Error::Shape("ridge segments disagree on channels or bands".into()));
        }
        // Chunks keep the design matrix small.
        let mut start = range.start;
        while start < range.end {
            let end = (start + 2048).min(range.end);
            let x = design(&rec.eeg, max_lag, start..end);
            let y: Vec<f64> = rec.mel.data()[start * m..end * m].iter().map(|&v| v as f64).collect();
            let rows = end - start;
            gemm(MatRef::t(&x, p, rows), MatRef::rm(&x, rows, p), &mut xtx, true);
            gemm(MatRef::t(&x, p, rows), MatRef::rm(&y, rows, m), &mut xty, true);
            for r in 0..rows {
                sx.iter_mut().zip(&x[r * p..(r + 1) * p]).for_each(|(s, v)| *s += v);
                sy.iter_mut().zip(&y[r * m..(r + 1) * m]).for_each(|(s, v)| *s += v);
            }
            count += rows;
            start = end;
        }
    }
    if count < 2 {
        return Err(Error::Domain("ridge needs at least two samples".into()));
    }
    let nf = count as f64;
    let x_mean: Vec<f64> = sx.iter().map(|s| s / nf).collect();
    let y_mean: Vec<f64> = sy.iter().map(|s| s / nf).collect();
    // Center: X^T X - n mx mx^T, X^T Y - n mx my^T.
    for i in 0..p {
        for j in 0..p {
            xtx[i * p + j] -= nf * x_mean[i] * x_mean[j];
        }
        for k in 0..m {
            xty[i * m + k] -= nf * x_mean[i] * y_mean[k];
        }
    }
    Ok(Moments { xtx, xty, x_mean, y_mean })
}

fn solve(mo: &Moments, alpha: f64, m: usize) -> Result<Vec<f64>> {
    let p = mo.x_mean.len();
    let trace: f64 = (0..p).map(|i| mo.xtx[i * p + i]).sum();
    let lam = alpha * trace / p as f64;
    let mut a = DMatrix::from_row_slice(p, p, &mo.xtx);
    for i in 0..p {
        a[(i, i)] += lam;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("ridge system not positive definite at alpha {alpha}")))?;
    let mut w = vec![0.0; p * m];
    for k in 0..m {
        let rhs = DVector::from_iterator(p, (0..p).map(|i| mo.xty[i * m + k]));
        let sol = chol.solve(&rhs);
        for i in 0..p {
            w[i * m + k] = sol[i];
        }
    }
    Ok(w)
}

impl RidgeModel {
    pub fn fit(segs: &[Segment<'_>], max_lag: usize, alpha: f64) -> Result<Self> {
        let mo = moments(segs, max_lag)?;
        Self::from_moments(&mo, segs[0].0, max_lag, alpha)
    }

    fn from_moments(mo: &Moments, like: &Recording, max_lag: usize, alpha: f64) -> Result<Self> {
        let (c, m) = (like.eeg.shape()[1], like.mel.shape()[1]);
        Ok(RidgeModel {
            max_lag,
            channels: c,
            bands: m,
            alpha,
            weights: solve(mo, alpha, m)?,
            x_mean: mo.x_mean.clone(),
            y_mean: mo.y_mean.clone(),
        })
    }

    /// Fits every `alpha` on `train` and keeps the one with the best mean
    /// windowed correlation on `val`.
    pub fn fit_select(train: &[Segment<'_>], val: &[Segment<'_>], max_lag: usize, alphas: &[f64]) -> Result<Self> {
        let mo = moments(train, max_lag)?;
        let mut best: Option<(f64, RidgeModel)> = None;
        for &a in alphas {
            let model = Self::from_moments(&mo, train[0].0, max_lag, a)?;
            let score = model.score(val)?;
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, model));
            }
        }
        best.map(|(_, m)| m).ok_or_else(|| Error::Domain("no ridge penalties given".into()))
    }

    /// Prediction `[len, M]` for rows `range` of an EEG recording.
    pub fn predict(&self, eeg: &Tensor<f32>, range: std::ops::Range<usize>) -> Vec<f64> {
        let p = self.x_mean.len();
        let m = self.bands;
        let rows = range.len();
        let mut x = design(eeg, self.max_lag, range);
        for r in 0..rows {
            x[r * p..(r + 1) * p].iter_mut().zip(&self.x_mean).for_each(|(v, mu)| *v -= mu);
        }
        let mut y = vec![0.0; rows * m];
        gemm(MatRef::rm(&x, rows, p), MatRef::rm(&self.weights, p, m), &mut y, false);
        for r in 0..rows {
            y[r * m..(r + 1) * m].iter_mut().zip(&self.y_mean).for_each(|(v, mu)| *v += mu);
        }
        y
    }

    /// Mean over segments of the 5 s windowed correlation.
    pub fn score(&self, segs: &[Segment<'_>]) -> Result<f64> {
        if segs.is_empty() {
            return Err(Error::Domain("nothing to score".into()));
        }
        let mut total = 0.0;
        for (rec, range) in segs {
            let pred = self.predict(&rec.eeg, range.clone());
            let m = self.bands;
            let target: Vec<f64> = rec.mel.data()[range.start * m..range.end * m].iter().map(|&v| v as f64).collect();
            total += windowed_pearson(&pred, &target, m, CROP_LEN)?;
        }
        Ok(total / segs.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, head_len, GenConfig, Split};
    use crate::rng::Rng;

    #[test]
    fn noiseless_data_is_recovered() {
        let cfg = GenConfig { snr_db: None, channels: 16, bands: 4, ..GenConfig::new(1, 2, 1, 60.0) };
        let c = generate(&cfg).unwrap();
        let recs: Vec<&Recording> = c.split(Split::Train).collect();
        let train: Vec<Segment> = recs.iter().map(|r| (*r, 0..head_len(r.len(), 0.9))).collect();
        // Tail time whose full lag window lies inside the recording.
        let val: Vec<Segment> = recs.iter().map(|r| (*r, head_len(r.len(), 0.9)..r.len() - 12)).collect();
        let model = RidgeModel::fit(&train, 12, 1e-6).unwrap();
        for (rec, range) in &val {
            let pred = model.predict(&rec.eeg, range.clone());
            for k in 0..4 {
                let p: Vec<f64> = (0..range.len()).map(|t| pred[t * 4 + k]).collect();
                let y: Vec<f64> = range.clone().map(|t| rec.mel.data()[t * 4 + k] as f64).collect();
                let r = crate::numerics::pearson(&p, &y).unwrap();
                assert!(r >= 0.99, "band {k}: {r}");
            }
        }
    }

    /// Normal equations built directly, without chunking or centering tricks.
    #[test]
    fn matches_direct_normal_equations() {
        let mut rng = Rng::new(2);
        let (n, c, m, lag) = (50, 2, 2, 1);
        let rec = Recording {
            subject: 0,
            split: Split::Train,
            eeg: Tensor::from_fn(&[n, c], |_| rng.normal() as f32),
            mel: Tensor::from_fn(&[n, m], |_| rng.normal() as f32),
        };
        let alpha = 0.1;
        let model = RidgeModel::fit(&[(&rec, 0..n)], lag, alpha).unwrap();
        let p = c * (lag + 1);
        let feat = |t: usize, j: usize| {
            let (l, ch) = (j / c, j % c);
            if t + l < n { rec.eeg.data()[(t + l) * c + ch] as f64 } else { 0.0 }
        };
        let mx: Vec<f64> = (0..p).map(|j| (0..n).map(|t| feat(t, j)).sum::<f64>() / n as f64).collect();
        let my: Vec<f64> = (0..m).map(|k| (0..n).map(|t| rec.mel.data()[t * m + k] as f64).sum::<f64>() / n as f64).collect();
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut b = DMatrix::<f64>::zeros(p, m);
        for t in 0..n {
            for i in 0..p {
                for j in 0..p {
                    a[(i, j)] += (feat(t, i) - mx[i]) * (feat(t, j) - mx[j]);
                }
                for k in 0..m {
                    b[(i, k)] += (feat(t, i) - mx[i]) * (rec.mel.data()[t * m + k] as f64 - my[k]);
                }
            }
        }
        let lam = alpha * a.trace() / p as f64;
        let w = (a + DMatrix::identity(p, p) * lam).lu().solve(&b).unwrap();
        let pred = model.predict(&rec.eeg, 0..n);
        for t in 0..n {
            for k in 0..m {
                let want: f64 = my[k] + (0..p).map(|i| (feat(t, i) - mx[i]) * w[(i, k)]).sum::<f64>();
                assert!((pred[t * m + k] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn selection_prefers_the_better_penalty() {
        let cfg = GenConfig { channels: 8, bands: 2, ..GenConfig::new(3, 2, 1, 40.0) };
        let c = generate(&cfg).unwrap();
        let recs: Vec<&Recording> = c.split(Split::Train).collect();
        let train: Vec<Segment> = recs.iter().map(|r| (*r, 0..head_len(r.len(), 0.9))).collect();
        // Tail time whose full lag window lies inside the recording.
        let val: Vec<Segment> = recs.iter().map(|r| (*r, head_len(r.len(), 0.9)..r.len() - 12)).collect();
        let alphas = [1e-4, 1e-2, 1.0, 1e3];
        let best = RidgeModel::fit_select(&train, &val, 12, &alphas).unwrap();
        for a in alphas {
            let other = RidgeModel::fit(&train, 12, a).unwrap();
            assert!(best.score(&val).unwrap() >= other.score(&val).unwrap());
        }
        assert!(RidgeModel::fit(&[], 4, 1.0).is_err());
    }
}
