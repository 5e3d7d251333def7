//! Synthetic EEG/mel corpus, dataset manifest and training crops.
//!
//! Every mel band is a sum of random sinusoids between 0.5 and 8 Hz,
//! normalized to zero mean and unit variance per recording. EEG channel `c`
//! mixes all bands delayed by its lag `LAGS[c % 4]` samples:
//!
//! ```text
//! eeg[t, c] = UV * ( sum_m A_s[m, c] * mel[t - lag_c, m] + white + pink )
//! A_s = A_prior + 0.3 * N(0, 1)       A_prior = I_{m == dominant(c)} + 0.3 * N(0, 1)
//! ```
//!
//! White and pink noise each carry half of the noise power set by the SNR.
//! Held-out-stories recordings reuse a training subject's mixing with fresh
//! latent signals; held-out subjects draw fresh mixing from the same prior.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tensorfile::{read_header, read_tensor, write_tensor};

pub const FS: u32 = 64;
/// Training crop length: 5 s at 64 Hz.
pub const CROP_LEN: usize = 320;
/// EEG response delays in samples (0, 62.5, 125, 187.5 ms).
pub const LAGS: [usize; 4] = [0, 4, 8, 12];
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const MAX_LAG: usize = 12;
const SINUSOIDS_PER_BAND: usize = 8;
/// Amplitude scale of the EEG in microvolts.
const EEG_UV: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldoutStories,
    HeldoutSubjects,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::HeldoutStories, Split::HeldoutSubjects];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldoutStories => "heldout_stories",
            Split::HeldoutSubjects => "heldout_subjects",
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::HeldoutStories => 1,
            Split::HeldoutSubjects => 2,
        }
    }
}

/// A subject and the split it belongs to (`Train` or `HeldoutSubjects`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectId {
    pub index: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    /// Training subjects.
    pub n_subjects: usize,
    pub n_heldout_subjects: usize,
    /// Length of each training recording.
    pub len_s: f64,
    /// Length of each held-out-stories and held-out-subjects recording.
    pub heldout_len_s: f64,
    /// `None` disables all noise.
    pub snr_db: Option<f64>,
    pub channels: usize,
    pub bands: usize,
}

impl GenConfig {
    pub fn new(seed: u64, n_subjects: usize, n_heldout_subjects: usize, len_s: f64) -> Self {
        GenConfig {
            seed,
            n_subjects,
            n_heldout_subjects,
            len_s,
            heldout_len_s: 60.0_f64.min(len_s),
            snr_db: Some(0.0),
            channels: 64,
            bands: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::config("subjects", "must be >= 2"));
        }
        if !(self.len_s >= 30.0) {
            return Err(Error::config("len_s", "must be >= 30"));
        }
        if !(self.heldout_len_s * FS as f64 >= CROP_LEN as f64) {
            return Err(Error::config("heldout_len_s", "must cover one 5 s crop"));
        }
        if self.channels == 0 || self.bands == 0 {
            return Err(Error::config("channels", "channels and bands must be >= 1"));
        }
        if let Some(s) = self.snr_db {
            if !s.is_finite() {
                return Err(Error::config("snr_db", "must be finite; use null for no noise"));
            }
        }
        Ok(())
    }

    fn samples(&self, split: Split) -> usize {
        let s = if split == Split::Train { self.len_s } else { self.heldout_len_s };
        (s * FS as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub subject: usize,
    pub split: Split,
    /// Paths relative to the manifest directory.
    pub eeg: String,
    pub mel: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub fs: u32,
    pub channels: usize,
    pub bands: usize,
    pub lags: Vec<usize>,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub coefficients_digest: String,
    pub subjects: Vec<SubjectId>,
    pub recordings: Vec<RecordingEntry>,
}

impl DatasetManifest {
    pub fn n_subjects_total(&self) -> usize {
        self.subjects.len()
    }

    pub fn train_subjects(&self) -> usize {
        self.subjects.iter().filter(|s| s.split == Split::Train).count()
    }
}

/// One recording held in memory: `eeg [T, C]`, `mel [T, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject: usize,
    pub split: Split,
    pub eeg: Tensor<f32>,
    pub mel: Tensor<f32>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.eeg.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Lag of EEG channel `c` in samples.
pub fn channel_lag(c: usize) -> usize {
    LAGS[c % LAGS.len()]
}

/// Band with unit prior weight on channel `c`; consecutive groups of four
/// channels share a band and cover all lags.
pub fn dominant_band(c: usize, bands: usize) -> usize {
    (c / LAGS.len()) % bands
}

/// Mixing matrices `[M, C]` row-major: the shared prior and one per subject.
fn mixing(cfg: &GenConfig, root: &Rng) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (m, c) = (cfg.bands, cfg.channels);
    let mut pr = root.fork_named("prior", 0);
    let prior: Vec<f64> = (0..m * c)
        .map(|i| {
            let (band, ch) = (i / c, i % c);
            let own = if dominant_band(ch, m) == band { 1.0 } else { 0.0 };
            own + 0.3 * pr.normal()
        })
        .collect();
    let total = cfg.n_subjects + cfg.n_heldout_subjects;
    let subjects = (0..total)
        .map(|s| {
            let mut r = root.fork_named("mix", s as u64);
            prior.iter().map(|p| p + 0.3 * r.normal()).collect()
        })
        .collect();
    (prior, subjects)
}

/// Band-limited latent mel on `t in [-MAX_LAG, n)`, normalized on `[0, n)`.
/// Returned row-major `[(n + MAX_LAG), M]`.
fn latent_mel(n: usize, bands: usize, rng: &mut Rng) -> Vec<f64> {
    let fs = FS as f64;
    let rows = n + MAX_LAG;
    let mut out = vec![0.0; rows * bands];
    for m in 0..bands {
        let comps: Vec<(f64, f64, f64)> = (0..SINUSOIDS_PER_BAND)
            .map(|_| {
                let f = rng.uniform_in(0.5, 8.0);
                let ph = rng.uniform_in(0.0, std::f64::consts::TAU);
                let a = rng.uniform_in(0.5, 1.0);
                (f, ph, a)
            })
            .collect();
        for r in 0..rows {
            let t = (r as f64 - MAX_LAG as f64) / fs;
            out[r * bands + m] = comps
                .iter()
                .map(|(f, ph, a)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum();
        }
        let body = (MAX_LAG..rows).map(|r| out[r * bands + m]);
        let mean = body.clone().sum::<f64>() / n as f64;
        let var = body.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt().max(1e-12);
        for r in 0..rows {
            out[r * bands + m] = (out[r * bands + m] - mean) / sd;
        }
    }
    out
}

/// Unit-variance pink noise from white noise through a three-pole filter.
pub fn pink_noise(n: usize, rng: &mut Rng) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w = rng.normal();
            b0 = 0.99765 * b0 + w * 0.099_046_0;
            b1 = 0.96300 * b1 + w * 0.296_516_4;
            b2 = 0.57000 * b2 + w * 1.052_691_3;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    let mean = out.iter().sum::<f64>() / n as f64;
    let sd = (out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    out
}

fn make_recording(cfg: &GenConfig, root: &Rng, mix: &[f64], subject: usize, split: Split) -> Recording {
    let (m, c) = (cfg.bands, cfg.channels);
    let n = cfg.samples(split);
    let key = split.code() * 1_000_000 + subject as u64;
    let lat = latent_mel(n, m, &mut root.fork_named("latent", key));
    let mut sig = vec![0.0; n * c];
    for t in 0..n {
        for ch in 0..c {
            let row = (t + MAX_LAG - channel_lag(ch)) * m;
            sig[t * c + ch] = (0..m).map(|b| mix[b * c + ch] * lat[row + b]).sum();
        }
    }
    if let Some(snr) = cfg.snr_db {
        let mut noise = root.fork_named("noise", key);
        for ch in 0..c {
            let col = (0..n).map(|t| sig[t * c + ch]);
            let mean = col.clone().sum::<f64>() / n as f64;
            let power = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let sd = (0.5 * power / 10f64.powf(snr / 10.0)).sqrt();
            let pink = pink_noise(n, &mut noise);
            for t in 0..n {
                sig[t * c + ch] += sd * (noise.normal() + pink[t]);
            }
        }
    }
    let eeg = Tensor::from_fn(&[n, c], |i| (EEG_UV * sig[i]) as f32);
    let mel = Tensor::from_fn(&[n, m], |i| lat[MAX_LAG * m + i] as f32);
    Recording { subject, split, eeg, mel }
}

fn digest(prior: &[f64], subjects: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    for v in prior.iter().chain(subjects.iter().flatten()) {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn file_stem(split: Split, subject: usize) -> String {
    format!("{}/s{subject:03}", split.as_str())
}

/// Generates the corpus in memory.
pub fn generate(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let (prior, mixes) = mixing(cfg, &root);
    let mut subjects = Vec::new();
    let mut recordings = Vec::new();
    for s in 0..cfg.n_subjects {
        subjects.push(SubjectId { index: s, split: Split::Train });
        recordings.push(make_recording(cfg, &root, &mixes[s], s, Split::Train));
        recordings.push(make_recording(cfg, &root, &mixes[s], s, Split::HeldoutStories));
    }
    for s in cfg.n_subjects..cfg.n_subjects + cfg.n_heldout_subjects {
        subjects.push(SubjectId { index: s, split: Split::HeldoutSubjects });
        recordings.push(make_recording(cfg, &root, &mixes[s], s, Split::HeldoutSubjects));
    }
    let entries = recordings
        .iter()
        .map(|r| {
            let stem = file_stem(r.split, r.subject);
            RecordingEntry {
                subject: r.subject,
                split: r.split,
                eeg: format!("{stem}_eeg.dmf2"),
                mel: format!("{stem}_mel.dmf2"),
                len: r.len(),
            }
        })
        .collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        fs: FS,
        channels: cfg.channels,
        bands: cfg.bands,
        lags: LAGS.to_vec(),
        snr_db: cfg.snr_db,
        seed: cfg.seed,
        coefficients_digest: digest(&prior, &mixes),
        subjects,
        recordings: entries,
    };
    Ok(Corpus { manifest, recordings })
}

/// Generates the corpus and writes tensors plus `manifest.json` under `dir`.
pub fn generate_synthetic(cfg: &GenConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let corpus = generate(cfg)?;
    corpus.write(dir)?;
    Ok(corpus.manifest)
}

/// Manifest plus every recording in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub recordings: Vec<Recording>,
}

impl Corpus {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for split in Split::ALL {
            fs::create_dir_all(dir.join(split.as_str()))?;
        }
        for (e, r) in self.manifest.recordings.iter().zip(&self.recordings) {
            write_tensor(dir.join(&e.eeg), &r.eeg)?;
            write_tensor(dir.join(&e.mel), &r.mel)?;
        }
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Reads and checks a manifest directory: every file must exist with a
    /// header matching the declared shape.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let mut recordings = Vec::with_capacity(manifest.recordings.len());
        for e in &manifest.recordings {
            let (ep, mp) = (dir.join(&e.eeg), dir.join(&e.mel));
            check_header(&ep, &[e.len, manifest.channels])?;
            check_header(&mp, &[e.len, manifest.bands])?;
            recordings.push(Recording {
                subject: e.subject,
                split: e.split,
                eeg: read_tensor(&ep)?,
                mel: read_tensor(&mp)?,
            });
        }
        Ok(Corpus { manifest, recordings })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Recording> {
        self.recordings.iter().filter(move |r| r.split == split)
    }

    pub fn channels(&self) -> usize {
        self.manifest.channels
    }

    pub fn bands(&self) -> usize {
        self.manifest.bands
    }

    /// Uniform random `t`-sample windows from the whole recordings of a split.
    pub fn crop_batch(&self, split: Split, batch: usize, t: usize, rng: &mut Rng) -> Result<Batch> {
        self.crop_batch_in(split, batch, t, 1.0, rng)
    }

    /// As [`Corpus::crop_batch`], drawing only from the first `head` fraction
    /// of each recording.
    pub fn crop_batch_in(&self, split: Split, batch: usize, t: usize, head: f64, rng: &mut Rng) -> Result<Batch> {
        let recs: Vec<&Recording> = self.split(split).collect();
        if recs.is_empty() {
            return Err(Error::Domain(format!("split `{}` has no recordings", split.as_str())));
        }
        let (c, m) = (self.channels(), self.bands());
        let mut eeg = Vec::with_capacity(batch * t * c);
        let mut mel = Vec::with_capacity(batch * t * m);
        let mut subjects = Vec::with_capacity(batch);
        let mut starts = Vec::with_capacity(batch);
        for _ in 0..batch {
            let r = recs[rng.below(recs.len())];
            let usable = head_len(r.len(), head);
            if usable < t {
                return Err(Error::Domain(format!(
                    "recording of subject {} has {usable} usable samples, crop needs {t}",
                    r.subject
                )));
            }
            let s = rng.below(usable - t + 1);
            eeg.extend_from_slice(&r.eeg.data()[s * c..(s + t) * c]);
            mel.extend_from_slice(&r.mel.data()[s * m..(s + t) * m]);
            subjects.push(r.subject);
            starts.push(s);
        }
        Ok(Batch {
            eeg: Tensor::from_fn(&[batch, t, c], |i| eeg[i]),
            mel: Tensor::from_fn(&[batch, t, m], |i| mel[i]),
            subjects,
            starts,
        })
    }
}

/// Samples in the leading `frac` of a recording.
pub fn head_len(len: usize, frac: f64) -> usize {
    ((len as f64) * frac).floor() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub eeg: Tensor<f32>,
    pub mel: Tensor<f32>,
    pub subjects: Vec<usize>,
    pub starts: Vec<usize>,
}

/// Contiguous windows of `t` samples covering `[0, len)`; the last may be
/// shorter.
pub fn segments(len: usize, t: usize) -> Vec<Range<usize>> {
    assert!(t > 0, "segment length must be positive");
    (0..len).step_by(t).map(|s| s..(s + t).min(len)).collect()
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Format {
        path: path.clone(),
        msg: format!("cannot read manifest: {e}"),
    })?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format { path, msg: format!("unsupported manifest version {}", m.version) });
    }
    let train: BTreeSet<usize> = m.subjects.iter().filter(|s| s.split == Split::Train).map(|s| s.index).collect();
    if m.subjects.iter().any(|s| s.split == Split::HeldoutSubjects && train.contains(&s.index)) {
        return Err(Error::Format { path, msg: "held-out subject also listed for training".into() });
    }
    Ok(m)
}

fn check_header(path: &PathBuf, shape: &[usize]) -> Result<()> {
    let h = read_header(path)?;
    if h.shape != shape {
        return Err(Error::Format {
            path: path.clone(),
            msg: format!("header shape {:?} does not match manifest {shape:?}", h.shape),
        });
    }
    Ok(())
}
