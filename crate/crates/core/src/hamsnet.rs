//! Hierarchical multi-scale U-Net with dual-attention feedback blocks.
//!
//! ```text
//! PAM(x)  = softmax_s((x Wq)(x Wk)^T) (x Wv) + x
//! CAM(x)  = x softmax_j(x^T x)^T + x
//! ADAF(x) = sigmoid(w1) PAM(f) + sigmoid(w2) CAM(f) + x_prev Wfb,   f = conv3(x)
//! ```
//!
//! The encoder halves the length with stride-2 convolutions; the bottleneck
//! chains `n_adaf` ADAF layers; each decoder level upsamples by linear
//! interpolation to the matching skip length, concatenates the skip, fuses
//! with a convolution and applies one ADAF layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, Conv1d, Linear};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamsConfig {
    pub d_model: usize,
    pub levels: usize,
    pub n_adaf: usize,
    /// Stacked U-Nets; each carries its own `n_adaf` bottleneck layers.
    pub n_unets: usize,
    pub feedback: bool,
    /// When false every ADAF layer is replaced by the identity.
    pub adaf: bool,
    pub max_channels: usize,
}

impl HamsConfig {
    pub fn new(d_model: usize) -> Self {
        HamsConfig {
            d_model,
            levels: 3,
            n_adaf: 6,
            n_unets: 1,
            feedback: true,
            adaf: true,
            max_channels: 256,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config(format!("{path}.levels"), "must be >= 1"));
        }
        if self.n_adaf == 0 {
            return Err(Error::config(format!("{path}.n_adaf"), "must be >= 1"));
        }
        if self.n_unets == 0 {
            return Err(Error::config(format!("{path}.n_unets"), "must be >= 1"));
        }
        if self.max_channels < self.d_model {
            return Err(Error::config(format!("{path}.max_channels"), "must be >= d_model"));
        }
        Ok(())
    }

    /// Channels at encoder depth `l` (0 is the input).
    pub fn channels(&self, l: usize) -> usize {
        if l <= 1 {
            self.d_model
        } else {
            (self.d_model << (l - 1)).min(self.max_channels)
        }
    }
}

/// Position attention: unscaled dot-product over time plus the input.
#[derive(Clone, Debug)]
pub struct Pam {
    q: Linear,
    k: Linear,
    v: Linear,
}

impl Pam {
    pub fn new(prefix: &str, d: usize) -> Self {
        Pam {
            q: Linear::new(join(prefix, "wq"), d, d, false),
            k: Linear::new(join(prefix, "wk"), d, d, false),
            v: Linear::new(join(prefix, "wv"), d, d, false),
        }
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        self.q.init(ps, rng);
        self.k.init(ps, rng);
        self.v.init(ps, rng);
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Var {
        let q = self.q.forward(t, ps, x);
        let k = self.k.forward(t, ps, x);
        let v = self.v.forward(t, ps, x);
        let s = t.bmm(q, k, false, true);
        let s = t.softmax_last(s);
        let o = t.bmm(s, v, false, false);
        t.add(o, x)
    }
}

/// Channel attention over the `d x d` Gram matrix; parameter free.
pub fn cam<F: Scalar>(t: &mut Tape<F>, x: Var) -> Var {
    let g = t.bmm(x, x, true, false);
    let g = t.softmax_last(g);
    let o = t.bmm(x, g, false, true);
    t.add(o, x)
}

#[derive(Clone, Debug)]
pub struct Adaf {
    pub prefix: String,
    conv: Conv1d,
    pam: Pam,
    feedback: Option<Linear>,
}

impl Adaf {
    pub fn new(prefix: &str, d: usize, feedback: bool) -> Self {
        Adaf {
            prefix: prefix.to_string(),
            conv: Conv1d::new(join(prefix, "conv"), 3, d, d, 1),
            pam: Pam::new(&join(prefix, "pam"), d),
            feedback: feedback.then(|| Linear::new(join(prefix, "feedback"), d, d, false)),
        }
    }

    pub fn w1(&self) -> String {
        join(&self.prefix, "w1")
    }

    pub fn w2(&self) -> String {
        join(&self.prefix, "w2")
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        self.conv.init(ps, rng);
        self.pam.init(ps, rng);
        if let Some(fb) = &self.feedback {
            fb.init(ps, rng);
        }
        ps.insert_full(&self.w1(), &[1], 0.0);
        ps.insert_full(&self.w2(), &[1], 0.0);
    }

    /// `(alpha, beta)` for the current parameters.
    pub fn gates<F: Scalar>(&self, ps: &ParamStore<F>) -> (F, F) {
        (
            sigmoid(ps.value(&self.w1()).data()[0]),
            sigmoid(ps.value(&self.w2()).data()[0]),
        )
    }

    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        ps: &ParamStore<F>,
        x: Var,
        x_prev: Option<Var>,
    ) -> Result<Var> {
        if let Some(p) = x_prev {
            if t.shape(p) != t.shape(x) {
                return Err(Error::Shape(format!(
                    "feedback input {:?} vs features {:?}",
                    t.shape(p),
                    t.shape(x)
                )));
            }
        }
        let f = self.conv.forward(t, ps, x);
        let p = self.pam.forward(t, ps, f);
        let c = cam(t, f);
        let w1 = t.param(ps, &self.w1());
        let alpha = t.sigmoid(w1);
        let w2 = t.param(ps, &self.w2());
        let beta = t.sigmoid(w2);
        let p = t.mul_scalar(p, alpha);
        let c = t.mul_scalar(c, beta);
        let mut out = t.add(p, c);
        if let (Some(fb), Some(prev)) = (&self.feedback, x_prev) {
            let r = fb.forward(t, ps, prev);
            out = t.add(out, r);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct UNet {
    down: Vec<Conv1d>,
    bottleneck: Vec<Adaf>,
    fuse: Vec<Conv1d>,
    dec_adaf: Vec<Adaf>,
    out: Linear,
}

impl UNet {
    fn new(prefix: &str, cfg: &HamsConfig) -> Self {
        let l = cfg.levels;
        let down = (1..=l)
            .map(|i| Conv1d::new(join(prefix, &format!("down{i}")), 3, cfg.channels(i - 1), cfg.channels(i), 2))
            .collect();
        let bottleneck = (0..cfg.n_adaf)
            .map(|i| Adaf::new(&join(prefix, &format!("bottleneck.{i}")), cfg.channels(l), cfg.feedback))
            .collect();
        // Decoder level `i` restores the resolution of skip `i`.
        let fuse = (0..l)
            .map(|i| {
                Conv1d::new(
                    join(prefix, &format!("fuse{i}")),
                    3,
                    cfg.channels(i + 1) + cfg.channels(i),
                    cfg.channels(i),
                    1,
                )
            })
            .collect();
        let dec_adaf = (0..l)
            .map(|i| Adaf::new(&join(prefix, &format!("dec{i}")), cfg.channels(i), false))
            .collect();
        UNet {
            down,
            bottleneck,
            fuse,
            dec_adaf,
            out: Linear::new(join(prefix, "out"), cfg.d_model, cfg.d_model, true),
        }
    }

    fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng, adaf: bool) {
        for c in &self.down {
            c.init(ps, rng);
        }
        if adaf {
            for a in &self.bottleneck {
                a.init(ps, rng);
            }
        }
        for c in &self.fuse {
            c.init(ps, rng);
        }
        if adaf {
            for a in &self.dec_adaf {
                a.init(ps, rng);
            }
        }
        self.out.init(ps, rng);
    }

    fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        ps: &ParamStore<F>,
        x: Var,
        adaf: bool,
        zero_skip: Option<usize>,
    ) -> Result<Var> {
        let mut skips = vec![x];
        let mut h = x;
        for c in &self.down {
            h = c.forward(t, ps, h);
            skips.push(h);
        }
        skips.pop();
        if adaf {
            let mut prev = None;
            for a in &self.bottleneck {
                h = a.forward(t, ps, h, prev)?;
                prev = Some(h);
            }
        }
        for i in (0..self.fuse.len()).rev() {
            let mut skip = skips[i];
            if zero_skip == Some(i) {
                skip = t.scale(skip, 0.0);
            }
            let len = t.shape(skip)[1];
            let up = t.resample_linear(h, len);
            let cat = t.concat_last(&[up, skip]);
            h = self.fuse[i].forward(t, ps, cat);
            if adaf {
                h = self.dec_adaf[i].forward(t, ps, h, None)?;
            }
        }
        Ok(self.out.forward(t, ps, h))
    }
}

/// One or more U-Nets chained in sequence.
#[derive(Clone, Debug)]
pub struct HamsNet {
    pub cfg: HamsConfig,
    unets: Vec<UNet>,
}

impl HamsNet {
    pub fn new(prefix: &str, cfg: HamsConfig) -> Self {
        let unets = (0..cfg.n_unets)
            .map(|i| UNet::new(&join(prefix, &i.to_string()), &cfg))
            .collect();
        HamsNet { cfg, unets }
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        for u in &self.unets {
            u.init(ps, rng, self.cfg.adaf);
        }
    }

    /// All ADAF layers in construction order.
    pub fn adaf_layers(&self) -> impl Iterator<Item = &Adaf> {
        self.unets
            .iter()
            .flat_map(|u| u.bottleneck.iter().chain(u.dec_adaf.iter()))
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        self.forward_masked(t, ps, x, None)
    }

    /// Forward pass with the level-`zero_skip` skip of every U-Net zeroed.
    pub fn forward_masked<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        ps: &ParamStore<F>,
        x: Var,
        zero_skip: Option<usize>,
    ) -> Result<Var> {
        let mut h = x;
        for u in &self.unets {
            h = u.forward(t, ps, h, self.cfg.adaf, zero_skip)?;
        }
        Ok(h)
    }
}
