//! Dynamic contrastive feature aggregation.
//!
//! A local branch (pointwise, depthwise, pointwise conv, channel shuffle) and
//! a global branch (temporal self-attention over depthwise-filtered Q/K/V) are
//! fused by contrast-driven windowed aggregation:
//!
//! ```text
//! A_fg = softmax_W(F_conv W_fg)        A_bg = softmax_W(F_atten W_bg)
//! O[t] = sum_i (A_fg[t,i] + A_bg[t,i]) * F_conv[t + i - W/2]
//! ```
//!
//! Both maps weight the same unfolded windows of `F_conv`; windows are zero
//! padded at the sequence edges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attend, join, DepthwiseConv, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcfamConfig {
    pub d_model: usize,
    /// Temporal window of the contrastive maps; odd.
    pub window: usize,
    pub shuffle_groups: usize,
    pub n_blocks: usize,
}

impl DcfamConfig {
    pub fn new(d_model: usize) -> Self {
        DcfamConfig { d_model, window: 9, shuffle_groups: 4, n_blocks: 4 }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::config(format!("{path}.window"), "must be odd"));
        }
        if self.shuffle_groups == 0 || self.d_model % self.shuffle_groups != 0 {
            return Err(Error::config(
                format!("{path}.shuffle_groups"),
                "must divide d_model",
            ));
        }
        if self.n_blocks == 0 {
            return Err(Error::config(format!("{path}.n_blocks"), "must be >= 1"));
        }
        Ok(())
    }
}

/// Channel permutation of a grouped shuffle: view `d` channels as
/// `[groups, d/groups]`, transpose, flatten. `perm[i]` is the source channel
/// of output channel `i`.
pub fn channel_shuffle_perm(d: usize, groups: usize) -> Vec<usize> {
    assert!(groups > 0 && d % groups == 0);
    let per = d / groups;
    (0..d).map(|i| (i % groups) * per + i / groups).collect()
}

/// Parameter names of one block's learnable gates.
#[derive(Clone, Debug)]
pub struct DcfamBlock {
    pub prefix: String,
    pub d: usize,
    pub window: usize,
    pub groups: usize,
    norm: LayerNorm,
    pw1: Linear,
    dw: DepthwiseConv,
    pw2: Linear,
    qkv: Linear,
    dw_qkv: DepthwiseConv,
    w_fg: Linear,
    w_bg: Linear,
}

impl DcfamBlock {
    pub fn new(prefix: &str, d: usize, window: usize, groups: usize) -> Self {
        let local = join(prefix, "local");
        let global = join(prefix, "global");
        DcfamBlock {
            prefix: prefix.to_string(),
            d,
            window,
            groups,
            norm: LayerNorm::new(join(prefix, "ln"), d),
            pw1: Linear::new(join(&local, "pw1"), d, d, true),
            dw: DepthwiseConv::new(join(&local, "dw"), 3, d),
            pw2: Linear::new(join(&local, "pw2"), d, d, true),
            qkv: Linear::new(join(&global, "qkv"), d, 3 * d, true),
            dw_qkv: DepthwiseConv::new(join(&global, "dw"), 3, 3 * d),
            w_fg: Linear::new(join(prefix, "w_fg"), d, window, false),
            w_bg: Linear::new(join(prefix, "w_bg"), d, window, false),
        }
    }

    pub fn w_local(&self) -> String {
        join(&self.prefix, "local.scale")
    }

    pub fn w_global(&self) -> String {
        join(&self.prefix, "global.scale")
    }

    pub fn w_fg_name(&self) -> String {
        self.w_fg.w()
    }

    pub fn w_bg_name(&self) -> String {
        self.w_bg.w()
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        self.norm.init(ps);
        self.pw1.init(ps, rng);
        self.dw.init(ps, rng);
        self.pw2.init(ps, rng);
        ps.insert_full(&self.w_local(), &[1], 1.0);
        self.qkv.init(ps, rng);
        self.dw_qkv.init(ps, rng);
        ps.insert_full(&self.w_global(), &[1], 1.0);
        self.w_fg.init(ps, rng);
        self.w_bg.init(ps, rng);
    }

    /// `F_conv`: pointwise -> depthwise(3) -> pointwise -> shuffle -> scale.
    pub fn local_branch<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let h = self.pw1.forward(t, ps, x);
        let h = self.dw.forward(t, ps, h);
        let h = self.pw2.forward(t, ps, h);
        let h = t.permute_last(h, channel_shuffle_perm(self.d, self.groups));
        let s = t.param(ps, &self.w_local());
        t.mul_scalar(h, s)
    }

    /// `F_atten`: attention over time with depthwise-filtered projections.
    pub fn global_branch<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let d = self.d;
        let h = self.qkv.forward(t, ps, x);
        let h = self.dw_qkv.forward(t, ps, h);
        let q = t.slice_last(h, 0, d);
        let k = t.slice_last(h, d, d);
        let v = t.slice_last(h, 2 * d, d);
        let o = attend(t, q, k, v, 1.0 / (d as f64).sqrt());
        let s = t.param(ps, &self.w_global());
        t.mul_scalar(o, s)
    }

    /// Contrastive windowed fusion of the two branch outputs.
    pub fn cdfa_fuse<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        ps: &ParamStore<F>,
        f_conv: Var,
        f_atten: Var,
    ) -> Var {
        assert_eq!(t.shape(f_conv), t.shape(f_atten), "cdfa branch shapes");
        let a_fg = self.w_fg.forward(t, ps, f_conv);
        let a_fg = t.softmax_last(a_fg);
        let a_bg = self.w_bg.forward(t, ps, f_atten);
        let a_bg = t.softmax_last(a_bg);
        let o_fg = t.unfold_weighted(a_fg, f_conv);
        let o_bg = t.unfold_weighted(a_bg, f_conv);
        t.add(o_fg, o_bg)
    }

    /// Residual pre-norm block: `x + cdfa(local(LN x), global(LN x))`.
    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let h = self.norm.forward(t, ps, x);
        let fc = self.local_branch(t, ps, h);
        let fa = self.global_branch(t, ps, h);
        let o = self.cdfa_fuse(t, ps, fc, fa);
        t.add(x, o)
    }

    /// Contrast maps for inspection: `(A_fg, A_bg)`, each `[B, T, W]`.
    pub fn contrast_maps<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        ps: &ParamStore<F>,
        f_conv: Var,
        f_atten: Var,
    ) -> (Var, Var) {
        let a = self.w_fg.forward(t, ps, f_conv);
        let a = t.softmax_last(a);
        let b = self.w_bg.forward(t, ps, f_atten);
        let b = t.softmax_last(b);
        (a, b)
    }
}

/// Stack of `n_blocks` residual DC-FAM blocks.
#[derive(Clone, Debug)]
pub struct Dcfam {
    pub cfg: DcfamConfig,
    pub blocks: Vec<DcfamBlock>,
}

impl Dcfam {
    pub fn new(prefix: &str, cfg: DcfamConfig) -> Self {
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                DcfamBlock::new(
                    &join(prefix, &i.to_string()),
                    cfg.d_model,
                    cfg.window,
                    cfg.shuffle_groups,
                )
            })
            .collect();
        Dcfam { cfg, blocks }
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        for b in &self.blocks {
            b.init(ps, rng);
        }
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        self.blocks.iter().fold(x, |h, b| b.forward(t, ps, h))
    }
}
