//! Scalar statistics and the finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Pearson correlation of two equal-length sequences.
///
/// Returns 0 when either input has (numerically) zero variance.
pub fn pearson<F: Scalar>(x: &[F], y: &[F]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "pearson lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Domain("pearson needs at least 2 samples".into()));
    }
    let (r, _) = pearson_parts(x.iter().map(|v| v.f64()), y.iter().map(|v| v.f64()), x.len());
    Ok(r)
}

/// `(r, degenerate)` for the two-pass correlation in f64.
pub(crate) fn pearson_parts(
    x: impl Iterator<Item = f64> + Clone,
    y: impl Iterator<Item = f64> + Clone,
    n: usize,
) -> (f64, bool) {
    let nf = n as f64;
    let mx = x.clone().sum::<f64>() / nf;
    let my = y.clone().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    let (mut ax, mut ay) = (0.0f64, 0.0f64);
    for (a, b) in x.zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
        ax = ax.max(a.abs());
        ay = ay.max(b.abs());
    }
    if is_degenerate(sxx, ax, nf) || is_degenerate(syy, ay, nf) {
        return (0.0, true);
    }
    ((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), false)
}

/// Sum of squared deviations indistinguishable from rounding noise.
pub(crate) fn is_degenerate(ss: f64, max_abs: f64, n: f64) -> bool {
    let floor = n * (max_abs * 1e-7).powi(2);
    ss <= floor || ss == 0.0
}

/// Numerically stable softmax of a slice.
pub fn softmax<F: Scalar>(x: &[F]) -> Vec<F> {
    crate::ops::softmax_rows(x, x.len().max(1))
}

/// Softmax along `axis` of an arbitrary-rank tensor.
pub fn softmax_axis<F: Scalar>(x: &Tensor<F>, axis: usize) -> Tensor<F> {
    let shape = x.shape();
    assert!(axis < shape.len(), "axis out of range");
    let k = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut row = vec![F::zero(); k];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..k {
                row[j] = x.data()[(o * k + j) * inner + i];
            }
            let s = softmax(&row);
            for j in 0..k {
                out[(o * k + j) * inner + i] = s[j];
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Result of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` builds the scalar output on a fresh tape from the bound parameters.
/// Relative error is `|analytic - numeric| / max(1e-8, |numeric|)`, maximized
/// over every element of every entry. `max_elems_per_entry` subsamples large
/// entries with a fixed stride when set.
pub fn grad_check<F>(
    f: F,
    params: &ParamStore<f64>,
    eps: f64,
    max_elems_per_entry: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let eval = |ps: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, ps);
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite objective".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, params);
    if !tape.value(out).data()[0].is_finite() {
        return Err(Error::Numeric("non-finite objective".into()));
    }
    let grads = tape.backward(out);
    let mut analytic = params.clone();
    analytic.zero_grads();
    tape.accumulate_param_grads(&grads, &mut analytic);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.value(&name).len();
        let stride = match max_elems_per_entry {
            Some(m) if n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = params.value(&name).data()[i];
            probe.value_mut(&name).data_mut()[i] = orig + eps;
            let fp = eval(&probe)?;
            probe.value_mut(&name).data_mut()[i] = orig - eps;
            let fm = eval(&probe)?;
            probe.value_mut(&name).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.grad(&name).data()[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct two-pass oracle kept separate from the library path.
    fn two_pass(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx.sqrt() * vy.sqrt())
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0f64, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0f64, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let y = [1.0f64, 3.0, 2.0, 4.0];
        assert!((two_pass(&x, &y) - 0.8).abs() < 1e-12);
        assert!((pearson(&x, &y).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_errors_and_degenerate() {
        assert!(matches!(pearson(&[1.0f64, 2.0], &[1.0]), Err(Error::Shape(_))));
        assert!(matches!(pearson(&[1.0f64], &[1.0]), Err(Error::Domain(_))));
        assert_eq!(pearson(&[2.0f64, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(pearson(&[0.1f32; 7], &[0.1; 7]).unwrap(), 0.0);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0f64, 0.0, 0.0]);
        assert!(u.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax(&[1000.0f64, 0.0]);
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
        // Direct exponentiation oracle.
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let got = softmax(&[1.0f64, 2.0, 3.0]);
        for (g, ei) in got.iter().zip(&e) {
            assert!((g - ei / z).abs() < 1e-15);
        }
        assert!((got[0] - 0.09003).abs() < 1e-5);
        assert!((got[1] - 0.24473).abs() < 1e-5);
        assert!((got[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_along_middle_axis() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 2], |i| (i as f64).sin());
        let s = softmax_axis(&t, 1);
        for o in 0..2 {
            for i in 0..2 {
                let sum: f64 = (0..3).map(|j| s.at(&[o, j, i])).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("theta", Tensor::new(&[1], vec![3.0]).unwrap()).unwrap();
        let rep = grad_check(
            |t, ps| {
                let th = t.param(ps, "theta");
                t.mul(th, th)
            },
            &ps,
            1e-5,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-9, "{rep:?}");

        let rep = grad_check(
            |t, ps| {
                let th = t.param(ps, "theta");
                t.scale(th, 0.0)
            },
            &ps,
            1e-5,
            None,
        )
        .unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
    }

    #[test]
    fn grad_check_rejects_non_finite_objective() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("theta", Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
        let res = grad_check(
            |t, _| t.constant(Tensor::from_parts(vec![1], vec![f64::NAN])),
            &ps,
            1e-5,
            None,
        );
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn pearson_affine_invariant_and_symmetric(
            x in proptest::collection::vec(-10.0f64..10.0, 8),
            y in proptest::collection::vec(-10.0f64..10.0, 8),
            a in 0.1f64..50.0,
            b in -20.0f64..20.0,
        ) {
            let r = pearson(&x, &y).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&xs, &y).unwrap() - r).abs() < 1e-9);
            prop_assert_eq!(pearson(&y, &x).unwrap(), r);
            prop_assert!((-1.0..=1.0).contains(&r));
        }

        #[test]
        fn softmax_sums_to_one(x in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
            let s = softmax(&x);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(s.iter().all(|&v| v >= 0.0));
        }
    }
}
