//! Full network assembly and its ablation surface.
//!
//! ```text
//! x0  = esm(eeg, subjects)            (off: linear C -> d)
//! D1  = dcfam stack(x0)               (off: x0)
//! H1  = hams u-net(x0)                (off: x0)
//! F   = progressive fuse(D1, H1)      (off: linear(concat(D1, H1)))
//! y   = convmamba stack(F)            (off: F)
//! mel = linear(y)
//! ```

use serde::{Deserialize, Serialize};

use crate::convmamba::{ConvMamba, ConvMambaConfig};
use crate::data::{SubjectId, Split};
use crate::dcfam::{Dcfam, DcfamConfig};
use crate::error::{Error, Result};
use crate::esm::{Esm, EsmConfig, SubjectKey};
use crate::hamsnet::{HamsConfig, HamsNet};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::splinemap::{ProgressiveFuse, SplineMapConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub esm: bool,
    pub dcfam: bool,
    pub adaf: bool,
    pub hams: bool,
    pub splinemap_fusion: bool,
    pub convmamba: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { esm: true, dcfam: true, adaf: true, hams: true, splinemap_fusion: true, convmamba: true }
    }
}

impl Toggles {
    pub fn all_off() -> Self {
        Toggles { esm: false, dcfam: false, adaf: false, hams: false, splinemap_fusion: false, convmamba: false }
    }
}

/// The six single-module ablations, by name.
pub const ABLATIONS: [&str; 6] = ["esm", "dcfam", "adaf", "hams", "splinemap_fusion", "convmamba"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// EEG channels `C`.
    pub channels: usize,
    /// Mel bands `M`.
    pub bands: usize,
    /// Crop length `T` used for training and segment-wise inference.
    pub crop_len: usize,
    pub toggles: Toggles,
    pub esm: EsmConfig,
    pub dcfam: DcfamConfig,
    pub hams: HamsConfig,
    pub splinemap: SplineMapConfig,
    pub convmamba: ConvMambaConfig,
}

impl ModelConfig {
    /// Default architecture for `n_subjects` training subjects.
    pub fn new(d_model: usize, n_subjects: usize) -> Self {
        ModelConfig {
            d_model,
            channels: 64,
            bands: 10,
            crop_len: crate::data::CROP_LEN,
            toggles: Toggles::default(),
            esm: EsmConfig::new(d_model, n_subjects),
            dcfam: DcfamConfig::new(d_model),
            hams: HamsConfig::new(d_model),
            splinemap: SplineMapConfig::new(d_model),
            convmamba: ConvMambaConfig::new(d_model),
        }
    }

    /// Same architecture at a different width. Head and ffn sizes scale.
    pub fn with_width(&self, d: usize) -> Self {
        let mut c = self.clone();
        c.d_model = d;
        c.esm.d_model = d;
        c.esm.d_ff = 4 * d;
        c.dcfam.d_model = d;
        c.hams.d_model = d;
        c.splinemap.d_model = d;
        c.convmamba.d_model = d;
        c.convmamba.d_ff = 4 * d;
        c
    }

    /// Module counts: convmamba blocks, dcfam blocks, adaf layers, fusion steps.
    pub fn counts(&self) -> [usize; 4] {
        [self.convmamba.n_blocks, self.dcfam.n_blocks, self.hams.n_adaf, self.splinemap.n_layers]
    }

    pub fn with_counts(mut self, n_convmamba: usize, n_dcfam: usize, n_hams: usize, n_fusion: usize) -> Self {
        self.convmamba.n_blocks = n_convmamba;
        self.dcfam.n_blocks = n_dcfam;
        self.hams.n_adaf = n_hams;
        self.splinemap.n_layers = n_fusion;
        self
    }

    /// Config with one module switched off, by its [`ABLATIONS`] name.
    pub fn without(&self, module: &str) -> Result<Self> {
        let mut c = self.clone();
        let t = &mut c.toggles;
        match module {
            "esm" => t.esm = false,
            "dcfam" => t.dcfam = false,
            "adaf" => t.adaf = false,
            "hams" => t.hams = false,
            "splinemap_fusion" => t.splinemap_fusion = false,
            "convmamba" => t.convmamba = false,
            other => return Err(Error::config("toggles", format!("unknown module `{other}`"))),
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("d_model", self.d_model), ("channels", self.channels), ("bands", self.bands), ("crop_len", self.crop_len)] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        let widths = [
            ("esm.d_model", self.esm.d_model),
            ("dcfam.d_model", self.dcfam.d_model),
            ("hams.d_model", self.hams.d_model),
            ("splinemap.d_model", self.splinemap.d_model),
            ("convmamba.d_model", self.convmamba.d_model),
        ];
        for (path, d) in widths {
            if d != self.d_model {
                return Err(Error::config(path, format!("{d} differs from d_model {}", self.d_model)));
            }
        }
        let t = &self.toggles;
        if t.esm {
            self.esm.validate("esm")?;
        }
        if t.dcfam {
            self.dcfam.validate("dcfam")?;
        }
        if t.hams {
            self.hams.validate("hams")?;
            let down = 1usize << (self.hams.levels - 1);
            if self.crop_len < down {
                return Err(Error::config("hams.levels", format!("crop_len {} too short for {} levels", self.crop_len, self.hams.levels)));
            }
        }
        if t.splinemap_fusion {
            self.splinemap.validate("splinemap")?;
        }
        if t.convmamba {
            self.convmamba.validate("convmamba")?;
        }
        Ok(())
    }

    /// Stable digest of the JSON form, stored in checkpoints.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Embedding key of a dataset subject: training subjects index the table,
    /// everyone else maps to the unknown-subject vector.
    pub fn subject_key(&self, s: SubjectId) -> SubjectKey {
        (s.split == Split::Train && s.index < self.esm.n_subjects_table).then_some(s.index)
    }
}

/// Forward-pass interventions used by sensitivity tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct Probe {
    pub zero_dcfam: bool,
    pub zero_hams: bool,
}

pub struct Model {
    pub cfg: ModelConfig,
    esm: Option<Esm>,
    bypass: Option<Linear>,
    dcfam: Option<Dcfam>,
    hams: Option<HamsNet>,
    fuse: Option<ProgressiveFuse>,
    concat: Option<Linear>,
    convmamba: Option<ConvMamba>,
    head: Linear,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, t) = (cfg.d_model, cfg.toggles);
        let on = |b: bool| b.then_some(());
        Ok(Model {
            esm: on(t.esm).map(|_| Esm::new("esm", cfg.channels, cfg.esm.clone())),
            bypass: on(!t.esm).map(|_| Linear::new("input", cfg.channels, d, true)),
            dcfam: on(t.dcfam).map(|_| Dcfam::new("dcfam", cfg.dcfam.clone())),
            hams: on(t.hams).map(|_| HamsNet::new("hams", HamsConfig { adaf: t.adaf, ..cfg.hams.clone() })),
            fuse: on(t.splinemap_fusion).map(|_| ProgressiveFuse::new("fuse", cfg.splinemap.clone())),
            concat: on(!t.splinemap_fusion).map(|_| Linear::new("concat", 2 * d, d, true)),
            convmamba: on(t.convmamba).map(|_| ConvMamba::new("convmamba", &cfg.convmamba)),
            head: Linear::new("head", d, cfg.bands, true),
            cfg,
        })
    }

    pub fn init<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut Rng) {
        // One stream per module so toggling one leaves the others' init unchanged.
        if let Some(m) = &self.esm {
            m.init(ps, &mut rng.fork_named("esm", 0));
        }
        if let Some(m) = &self.bypass {
            m.init(ps, &mut rng.fork_named("input", 0));
        }
        if let Some(m) = &self.dcfam {
            m.init(ps, &mut rng.fork_named("dcfam", 0));
        }
        if let Some(m) = &self.hams {
            m.init(ps, &mut rng.fork_named("hams", 0));
        }
        if let Some(m) = &self.fuse {
            m.init(ps, &mut rng.fork_named("fuse", 0));
        }
        if let Some(m) = &self.concat {
            m.init(ps, &mut rng.fork_named("concat", 0));
        }
        if let Some(m) = &self.convmamba {
            m.init(ps, &mut rng.fork_named("convmamba", 0));
        }
        self.head.init(ps, &mut rng.fork_named("head", 0));
    }

    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        let mut ps = ParamStore::new();
        self.init(&mut ps, &mut Rng::new(seed).fork_named("init", 0));
        ps
    }

    /// Validates an input batch against the configured shapes.
    pub fn check_input(&self, eeg: &[usize], subjects: &[SubjectKey]) -> Result<()> {
        if eeg.len() != 3 || eeg[2] != self.cfg.channels || eeg[1] == 0 {
            return Err(Error::Shape(format!("eeg {eeg:?}, expected [B, T, {}]", self.cfg.channels)));
        }
        if subjects.len() != eeg[0] {
            return Err(Error::Shape(format!("{} subjects for batch of {}", subjects.len(), eeg[0])));
        }
        if let Some(e) = &self.esm {
            e.check_subjects(subjects)?;
        }
        Ok(())
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, ps: &ParamStore<F>, eeg: Var, subjects: &[SubjectKey]) -> Result<Var> {
        self.forward_probed(t, ps, eeg, subjects, Probe::default())
    }

    pub fn forward_probed<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        ps: &ParamStore<F>,
        eeg: Var,
        subjects: &[SubjectKey],
        probe: Probe,
    ) -> Result<Var> {
        self.check_input(t.shape(eeg), subjects)?;
        let x0 = match (&self.esm, &self.bypass) {
            (Some(e), _) => e.forward(t, ps, eeg, subjects)?,
            (None, Some(l)) => l.forward(t, ps, eeg),
            (None, None) => unreachable!("exactly one input stage is built"),
        };
        let mut d1 = match &self.dcfam {
            Some(m) => m.forward(t, ps, x0),
            None => x0,
        };
        let mut h1 = match &self.hams {
            Some(m) => m.forward(t, ps, x0)?,
            None => x0,
        };
        if probe.zero_dcfam {
            d1 = t.scale(d1, 0.0);
        }
        if probe.zero_hams {
            h1 = t.scale(h1, 0.0);
        }
        let f = match (&self.fuse, &self.concat) {
            (Some(m), _) => m.forward(t, ps, d1, h1)?,
            (None, Some(l)) => {
                let c = t.concat_last(&[d1, h1]);
                l.forward(t, ps, c)
            }
            (None, None) => unreachable!("exactly one fusion stage is built"),
        };
        let y = match &self.convmamba {
            Some(m) => m.forward(t, ps, f),
            None => f,
        };
        Ok(self.head.forward(t, ps, y))
    }

    /// Forward pass without gradient bookkeeping beyond the tape itself.
    pub fn predict<F: Scalar>(&self, ps: &ParamStore<F>, eeg: &Tensor<F>, subjects: &[SubjectKey]) -> Result<Tensor<F>> {
        let mut t = Tape::new();
        let x = t.constant(eeg.clone());
        let y = self.forward(&mut t, ps, x, subjects)?;
        Ok(t.value(y).clone())
    }

    /// Name of the subject-embedding table, when the model has one.
    pub fn embedding_table(&self) -> Option<String> {
        self.esm.as_ref().map(Esm::table_name)
    }
}
