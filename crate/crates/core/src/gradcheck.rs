//! Finite-difference checks of every learnable module at tiny sizes, in
//! f64. Each case contracts the module output with a fixed random probe.

use crate::convmamba::{ConvMambaBlock, ConvMambaConfig, Ssm};
use crate::dcfam::DcfamBlock;
use crate::error::{Error, Result};
use crate::esm::{Esm, EsmConfig};
use crate::hamsnet::{HamsConfig, HamsNet};
use crate::losses::LossWeights;
use crate::numerics::{grad_check, GradCheckReport};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::splinemap::{ProgressiveFuse, SplineMapConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const MODULES: [&str; 6] = ["esm", "dcfam", "hamsnet", "splinemap", "convmamba", "losses"];

/// Passing threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub module: &'static str,
    pub case: &'static str,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn probed(t: &mut Tape<f64>, y: Var, probe: &Tensor<f64>) -> Var {
    let p = t.constant(probe.clone());
    let m = t.mul(y, p);
    t.sum_all(m)
}

/// Runs the cases of one module, or of all modules for `"all"`.
pub fn run(module: &str) -> Result<Vec<GradCase>> {
    if module == "all" {
        let mut out = Vec::new();
        for m in MODULES {
            out.extend(run(m)?);
        }
        return Ok(out);
    }
    let case = |module: &'static str, case: &'static str, report| GradCase { module, case, report };
    Ok(match module {
        "esm" => {
            let cfg = EsmConfig { d_model: 4, n_heads: 2, d_ff: 8, n_subjects_table: 3 };
            let esm = Esm::new("esm", 3, cfg);
            let mut ps = ParamStore::new();
            esm.init(&mut ps, &mut Rng::new(10));
            let mut r = Rng::new(11);
            let (x, probe) = (randn(&[2, 4, 3], &mut r), randn(&[2, 4, 4], &mut r));
            let rep = grad_check(
                |t, ps| {
                    let xv = t.constant(x.clone());
                    let y = esm.forward(t, ps, xv, &[Some(1), None]).expect("valid subjects");
                    probed(t, y, &probe)
                },
                &ps,
                1e-5,
                None,
            )?;
            vec![case("esm", "block", rep)]
        }
        "dcfam" => {
            let b = DcfamBlock::new("dcfam.0", 4, 3, 2);
            let mut ps = ParamStore::new();
            b.init(&mut ps, &mut Rng::new(12));
            let mut r = Rng::new(13);
            let (x, probe) = (randn(&[2, 5, 4], &mut r), randn(&[2, 5, 4], &mut r));
            let rep = grad_check(
                |t, ps| {
                    let xv = t.constant(x.clone());
                    let y = b.forward(t, ps, xv);
                    probed(t, y, &probe)
                },
                &ps,
                1e-5,
                None,
            )?;
            vec![case("dcfam", "block", rep)]
        }
        "hamsnet" => {
            let h = HamsNet::new("hams", HamsConfig { levels: 3, n_adaf: 2, ..HamsConfig::new(4) });
            let mut ps = ParamStore::new();
            h.init(&mut ps, &mut Rng::new(15));
            let x = randn(&[1, 16, 4], &mut Rng::new(16));
            let probe = randn(&[1, 16, 4], &mut Rng::new(17));
            let rep = grad_check(
                |t, ps| {
                    let xv = t.constant(x.clone());
                    let y = h.forward(t, ps, xv).expect("valid length");
                    probed(t, y, &probe)
                },
                &ps,
                1e-3,
                None,
            )?;
            vec![case("hamsnet", "unet", rep)]
        }
        "splinemap" => {
            let f = ProgressiveFuse::new("fuse", SplineMapConfig { rank: 3, n_layers: 1, ..SplineMapConfig::new(4) });
            let mut ps = ParamStore::new();
            f.init(&mut ps, &mut Rng::new(100));
            let mut r = Rng::new(0);
            let d1 = randn(&[1, 8, 4], &mut r);
            let h1 = randn(&[1, 8, 4], &mut r);
            let probe = randn(&[1, 8, 4], &mut r);
            let rep = grad_check(
                |t, ps| {
                    let (dv, hv) = (t.constant(d1.clone()), t.constant(h1.clone()));
                    let y = f.forward(t, ps, dv, hv).expect("equal shapes");
                    probed(t, y, &probe)
                },
                &ps,
                1e-3,
                None,
            )?;
            vec![case("splinemap", "fuse", rep)]
        }
        "convmamba" => {
            let s = Ssm::new("s", 3, 4);
            let mut ps = ParamStore::new();
            s.init(&mut ps, &mut Rng::new(18));
            ps.insert("x", randn(&[2, 9, 3], &mut Rng::new(19)))?;
            let probe = randn(&[2, 9, 3], &mut Rng::new(20));
            let mut out = Vec::new();
            for (name, rev) in [("scan_forward", false), ("scan_backward", true)] {
                let rep = grad_check(
                    |t, ps| {
                        let x = t.param(ps, "x");
                        let y = s.forward(t, ps, x, rev);
                        probed(t, y, &probe)
                    },
                    &ps,
                    1e-5,
                    None,
                )?;
                out.push(case("convmamba", name, rep));
            }
            let blk = ConvMambaBlock::new("blk", &ConvMambaConfig { state_dim: 4, ..ConvMambaConfig::new(4) });
            let mut ps = ParamStore::new();
            blk.init(&mut ps, &mut Rng::new(21));
            let x = randn(&[1, 16, 4], &mut Rng::new(22));
            let probe = randn(&[1, 16, 4], &mut Rng::new(23));
            let rep = grad_check(
                |t, ps| {
                    let xv = t.constant(x.clone());
                    let y = blk.forward(t, ps, xv);
                    probed(t, y, &probe)
                },
                &ps,
                1e-5,
                None,
            )?;
            out.push(case("convmamba", "block", rep));
            out
        }
        "losses" => {
            let mut ps = ParamStore::new();
            let mut r = Rng::new(14);
            ps.insert_fan_in("w1", &[3, 5], 3, &mut r);
            ps.insert_fan_in("b1", &[5], 3, &mut r);
            ps.insert_fan_in("w2", &[5, 2], 5, &mut r);
            let x = randn(&[3, 8, 3], &mut Rng::new(15));
            let y = randn(&[3, 8, 2], &mut Rng::new(16));
            let w = LossWeights { tau: 0.5, ..LossWeights::default() };
            let net = |t: &mut Tape<f64>, ps: &ParamStore<f64>| {
                let xv = t.constant(x.clone());
                let (w1, b1, w2) = (t.param(ps, "w1"), t.param(ps, "b1"), t.param(ps, "w2"));
                let h = t.linear(xv, w1, Some(b1));
                let h = t.silu(h);
                t.linear(h, w2, None)
            };
            type LossFn = fn(&mut Tape<f64>, Var, Var, &LossWeights) -> Result<Var>;
            let cases: [(&'static str, LossFn); 4] = [
                ("pearson", |t, p, y, _| t.pearson_loss(p, y)),
                ("l1", |t, p, y, _| t.l1_loss(p, y)),
                ("infonce", |t, p, y, w| t.infonce_loss(p, y, w.tau)),
                ("total", |t, p, y, w| Ok(t.composite_loss(p, y, w)?.0)),
            ];
            let mut out = Vec::new();
            for (name, f) in cases {
                let rep = grad_check(
                    |t, ps| {
                        let p = net(t, ps);
                        let yv = t.constant(y.clone());
                        f(t, p, yv, &w).expect("matching shapes")
                    },
                    &ps,
                    1e-5,
                    None,
                )?;
                out.push(case("losses", name, rep));
            }
            out
        }
        other => return Err(Error::config("module", format!("unknown module `{other}`"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_is_a_config_error() {
        assert!(matches!(run("nope"), Err(Error::Config { .. })));
    }

    #[test]
    fn losses_cases_pass() {
        let cases = run("losses").unwrap();
        assert_eq!(cases.len(), 4);
        assert!(cases.iter().all(GradCase::passed), "{cases:?}");
    }
}
