//! Embedding strength modulator: conditions EEG features on subject identity.
//!
//! ```text
//! h0 = LN1(x W_in + e_s)          e_s broadcast over time
//! h  = h0 + MHA(h0, h0, h0)
//! y  = LN2(h + FFN(h))
//! ```
//!
//! Subjects never seen in training use the mean of the embedding table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, Ffn, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsmConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_subjects_table: usize,
}

impl EsmConfig {
    pub fn new(d_model: usize, n_subjects_table: usize) -> Self {
        EsmConfig { d_model, n_heads: 4, d_ff: 4 * d_model, n_subjects_table }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                format!("{path}.n_heads"),
                format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.n_subjects_table == 0 {
            return Err(Error::config(format!("{path}.n_subjects_table"), "must be >= 1"));
        }
        Ok(())
    }
}

/// Subject lookup key; `None` stands for a subject outside the table.
pub type SubjectKey = Option<usize>;

#[derive(Clone, Debug)]
pub struct Esm {
    pub cfg: EsmConfig,
    prefix: String,
    input: Linear,
    ln1: LayerNorm,
    mha: MultiHeadAttention,
    ffn: Ffn,
    ln2: LayerNorm,
}

impl Esm {
    pub fn new(prefix: &str, c_in: usize, cfg: EsmConfig) -> Self {
        let d = cfg.d_model;
        Esm {
            input: Linear::new(join(prefix, "w_in"), c_in, d, true),
            ln1: LayerNorm::new(join(prefix, "ln1"), d),
            mha: MultiHeadAttention::new(&join(prefix, "mha"), d, cfg.n_heads),
            ffn: Ffn::new(&join(prefix, "ffn"), d, cfg.d_ff),
            ln2: LayerNorm::new(join(prefix, "ln2"), d),
            prefix: prefix.to_string(),
            cfg,
        }
    }

    pub fn table_name(&self) -> String {
        join(&self.prefix, "embed")
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        self.input.init(ps, rng);
        let t = Tensor::from_fn(&[self.cfg.n_subjects_table, self.cfg.d_model], |_| {
            F::c(rng.normal() * 0.5)
        });
        ps.insert(self.table_name(), t).expect("fresh parameter name");
        self.ln1.init(ps);
        self.mha.init(ps, rng);
        self.ffn.init(ps, rng);
        self.ln2.init(ps);
    }

    /// Checks that every known subject indexes into the table.
    pub fn check_subjects(&self, subjects: &[SubjectKey]) -> Result<()> {
        for s in subjects.iter().flatten() {
            if *s >= self.cfg.n_subjects_table {
                return Err(Error::Index(format!(
                    "subject {s} outside embedding table of {} rows",
                    self.cfg.n_subjects_table
                )));
            }
        }
        Ok(())
    }

    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        ps: &ParamStore<F>,
        x: Var,
        subjects: &[SubjectKey],
    ) -> Result<Var> {
        if subjects.len() != t.shape(x)[0] {
            return Err(Error::Shape(format!(
                "{} subjects for batch of {}",
                subjects.len(),
                t.shape(x)[0]
            )));
        }
        self.check_subjects(subjects)?;
        let z = self.input.forward(t, ps, x);
        let table = t.param(ps, &self.table_name());
        let e = t.gather_rows(table, subjects);
        let z = t.add_bcast_time(z, e);
        let h0 = self.ln1.forward(t, ps, z);
        let att = self.mha.forward(t, ps, h0, h0, h0);
        let h = t.add(h0, att);
        let f = self.ffn.forward(t, ps, h);
        let s = t.add(h, f);
        Ok(self.ln2.forward(t, ps, s))
    }

    /// Row used for subjects outside the table.
    pub fn unknown_vector<F: Scalar>(&self, ps: &ParamStore<F>) -> Vec<F> {
        let table = ps.value(&self.table_name());
        let d = self.cfg.d_model;
        let rows = self.cfg.n_subjects_table;
        (0..d)
            .map(|c| {
                (0..rows).fold(F::zero(), |a, r| a + table.data()[r * d + c]) / F::c(rows as f64)
            })
            .collect()
    }
}
