//! Optimizer, schedule, training loop, checkpoints and evaluation.
//!
//! An epoch is `steps_per_epoch` optimizer steps on random crops drawn from
//! the head of every training recording; the tail (`val_frac`) is held out
//! in time and scored after each epoch. Checkpoints land on epoch
//! boundaries and carry everything needed for a bit-identical resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{head_len, Batch, Corpus, Recording, Split, SubjectId};
use crate::error::{Error, Result};
use crate::esm::SubjectKey;
use crate::losses::{band_pearson, windowed_pearson, LossBreakdown, LossWeights, ScoreReport, SubjectScore};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::ridge::{RidgeModel, Segment};
use crate::rng::{Rng, RngState};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::tensorfile::{read_tensor, write_tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means enough crops to cover the
    /// training heads once.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub batch: usize,
    pub seed: u64,
    /// Epochs between numbered checkpoints; 0 keeps only `last`.
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Tail fraction of each training recording held out for validation.
    pub val_frac: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            steps_per_epoch: None,
            lr: 5e-4,
            lr_decay: 0.9,
            decay_every: 50,
            batch: 16,
            seed: 0,
            checkpoint_every: 50,
            loss: LossWeights::default(),
            clip_norm: Some(1.0),
            val_frac: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::config("train.lr_decay", "must lie in (0, 1)"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("train.decay_every", "must be >= 1"));
        }
        if self.batch < 2 {
            return Err(Error::config("train.batch", "must be >= 2 for the contrastive term"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("train.steps_per_epoch", "must be >= 1"));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 0.5) {
            return Err(Error::config("train.val_frac", "must lie in (0, 0.5)"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.clip_norm", "must be positive"));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::config("train.adam", "betas must lie in [0, 1) and eps > 0"));
        }
        self.loss.validate("train.loss")
    }

    /// Step schedule: `lr * lr_decay ^ floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Bias-corrected Adam with per-parameter first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig, ps: &ParamStore<F>) -> Self {
        let zeros = || ps.iter().map(|(n, e)| (n.to_string(), Tensor::zeros(e.value.shape()))).collect();
        Adam { cfg, t: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update from the gradients stored in `ps`. A non-finite
    /// gradient aborts before anything changes.
    pub fn step(&mut self, ps: &mut ParamStore<F>, lr: f64) -> Result<()> {
        for (name, e) in ps.iter() {
            if let Some(i) = e.grad.data().iter().position(|g| !g.f64().is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in `{name}` at element {i}")));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, e) in ps.iter_mut() {
            let m = self.m.get_mut(name).ok_or_else(|| Error::Index(format!("no moments for `{name}`")))?;
            let v = self.v.get_mut(name).expect("moments are created together");
            let (md, vd) = (m.data_mut(), v.data_mut());
            let grad = e.grad.data();
            for (i, p) in e.value.data_mut().iter_mut().enumerate() {
                let g = grad[i].f64();
                let mi = beta1 * md[i].f64() + (1.0 - beta1) * g;
                let vi = beta2 * vd[i].f64() + (1.0 - beta2) * g * g;
                md[i] = F::c(mi);
                vd[i] = F::c(vi);
                let upd = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                *p = F::c(p.f64() - upd);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global norm is at most `max`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<F: Scalar>(ps: &mut ParamStore<F>, max: f64) -> f64 {
    let norm = ps.grad_norm();
    if norm > max {
        let s = F::c(max / norm);
        for (_, e) in ps.iter_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = *g * s);
        }
    }
    norm
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub l_pearson: f64,
    pub l_one: f64,
    pub l_infonce: f64,
    pub total: f64,
    pub val_pearson: f64,
}

/// Embedding key for a recording of the corpus.
pub fn recording_key(model: &ModelConfig, corpus: &Corpus, rec: &Recording) -> SubjectKey {
    let split = corpus
        .manifest
        .subjects
        .iter()
        .find(|s| s.index == rec.subject)
        .map_or(Split::HeldoutSubjects, |s| s.split);
    model.subject_key(SubjectId { index: rec.subject, split })
}

/// Windows of `t` rows covering `range`: consecutive full windows, and a
/// final window aligned to the end (overlapping its predecessor) whose
/// last `keep` rows are new. Ranges shorter than `t` form one window.
fn windows(range: Range<usize>, t: usize) -> Vec<(Range<usize>, usize)> {
    let n = range.len();
    if n <= t {
        return vec![(range.clone(), n)];
    }
    let full = n / t;
    let mut out: Vec<_> = (0..full).map(|i| (range.start + i * t..range.start + (i + 1) * t, t)).collect();
    let rest = n - full * t;
    if rest > 0 {
        out.push((range.end - t..range.end, rest));
    }
    out
}

/// Model output `[len, M]` for rows `range` of a recording, inferred in
/// crop-length windows and concatenated.
pub fn predict_range(
    model: &Model,
    ps: &ParamStore<f32>,
    eeg: &Tensor<f32>,
    range: Range<usize>,
    key: SubjectKey,
) -> Result<Vec<f32>> {
    let c = eeg.shape()[1];
    let m = model.cfg.bands;
    let t = model.cfg.crop_len;
    let wins = windows(range.clone(), t);
    let mut out = Vec::with_capacity(range.len() * m);
    // Equal-length windows share one forward pass.
    let same: Vec<_> = wins.iter().filter(|(r, _)| r.len() == t).collect();
    let mut batched = Vec::new();
    if !same.is_empty() {
        let mut x = Vec::with_capacity(same.len() * t * c);
        for (r, _) in &same {
            x.extend_from_slice(&eeg.data()[r.start * c..r.end * c]);
        }
        let y = model.predict(ps, &Tensor::new(&[same.len(), t, c], x)?, &vec![key; same.len()])?;
        batched = y.data().to_vec();
    }
    let mut next = 0;
    for (r, keep) in &wins {
        let len = r.len();
        let y = if len == t {
            next += 1;
            batched[(next - 1) * t * m..next * t * m].to_vec()
        } else {
            let x = Tensor::new(&[1, len, c], eeg.data()[r.start * c..r.end * c].to_vec())?;
            model.predict(ps, &x, &[key])?.data().to_vec()
        };
        out.extend_from_slice(&y[(len - keep) * m..]);
    }
    Ok(out)
}

/// Held-out-time segments of the training recordings.
pub fn validation_segments(corpus: &Corpus, val_frac: f64) -> Vec<Segment<'_>> {
    corpus.split(Split::Train).map(|r| (r, head_len(r.len(), 1.0 - val_frac)..r.len())).collect()
}

pub fn training_segments(corpus: &Corpus, val_frac: f64) -> Vec<Segment<'_>> {
    corpus.split(Split::Train).map(|r| (r, 0..head_len(r.len(), 1.0 - val_frac))).collect()
}

/// Mean windowed correlation of the model on held-out training time.
pub fn validation_pearson(model: &Model, ps: &ParamStore<f32>, corpus: &Corpus, val_frac: f64) -> Result<f64> {
    let segs = validation_segments(corpus, val_frac);
    if segs.is_empty() {
        return Err(Error::Domain("no training recordings to validate on".into()));
    }
    let m = model.cfg.bands;
    let mut total = 0.0;
    for (rec, range) in &segs {
        let key = recording_key(&model.cfg, corpus, rec);
        let pred = predict_range(model, ps, &rec.eeg, range.clone(), key)?;
        let target = &rec.mel.data()[range.start * m..range.end * m];
        total += windowed_pearson(&pred, target, m, model.cfg.crop_len)?;
    }
    Ok(total / segs.len() as f64)
}

/// Ridge baseline on the same split: fit on training heads, penalty chosen
/// by the validation tails. Returns the model and its validation score.
pub fn ridge_baseline(corpus: &Corpus, val_frac: f64, max_lag: usize) -> Result<(RidgeModel, f64)> {
    let train = training_segments(corpus, val_frac);
    let val = validation_segments(corpus, val_frac);
    let alphas: Vec<f64> = (-6..=2).map(|e| 10f64.powi(e)).collect();
    let ridge = RidgeModel::fit_select(&train, &val, max_lag, &alphas)?;
    let score = ridge.score(&val)?;
    Ok((ridge, score))
}

/// Scores a predictor on both held-out splits. `predict` returns the full
/// `[T, M]` output for a recording.
pub fn evaluate_with(
    corpus: &Corpus,
    window: usize,
    mut predict: impl FnMut(&Recording) -> Result<Vec<f32>>,
) -> Result<ScoreReport> {
    let m = corpus.bands();
    let mut rows: BTreeMap<(Split, usize), (f64, f64, usize)> = BTreeMap::new();
    for split in [Split::HeldoutStories, Split::HeldoutSubjects] {
        let recs: Vec<&Recording> = corpus.split(split).collect();
        if recs.is_empty() {
            return Err(Error::Domain(format!("split `{}` has no recordings", split.as_str())));
        }
        for rec in recs {
            let pred = predict(rec)?;
            if pred.len() != rec.mel.len() {
                return Err(Error::Shape(format!("prediction of {} values for {}", pred.len(), rec.mel.len())));
            }
            let r = windowed_pearson(&pred, rec.mel.data(), m, window)?;
            let full = band_pearson(&pred, rec.mel.data(), m)?;
            let e = rows.entry((split, rec.subject)).or_insert((0.0, 0.0, 0));
            e.0 += r;
            e.1 += full;
            e.2 += 1;
        }
    }
    let subjects = rows
        .into_iter()
        .map(|((split, id), (r, full, n))| SubjectScore {
            subject_id: id,
            split,
            pearson_r: r / n as f64,
            pearson_r_full: full / n as f64,
        })
        .collect();
    ScoreReport::from_subjects(subjects)
}

pub fn evaluate(model: &Model, ps: &ParamStore<f32>, corpus: &Corpus) -> Result<ScoreReport> {
    check_dims(&model.cfg, corpus)?;
    evaluate_with(corpus, model.cfg.crop_len, |rec| {
        predict_range(model, ps, &rec.eeg, 0..rec.len(), recording_key(&model.cfg, corpus, rec))
    })
}

fn check_dims(cfg: &ModelConfig, corpus: &Corpus) -> Result<()> {
    if cfg.channels != corpus.channels() || cfg.bands != corpus.bands() {
        return Err(Error::config(
            "model.channels",
            format!(
                "model expects {} channels and {} bands, data has {} and {}",
                cfg.channels,
                cfg.bands,
                corpus.channels(),
                corpus.bands()
            ),
        ));
    }
    Ok(())
}

/// Everything that changes while training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: Rng,
}

pub struct Trainer<'a> {
    pub model: Model,
    pub cfg: TrainConfig,
    pub corpus: &'a Corpus,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, corpus: &'a Corpus) -> Result<Self> {
        cfg.validate()?;
        check_dims(&model_cfg, corpus)?;
        let n_train = corpus.manifest.train_subjects();
        if model_cfg.toggles.esm && model_cfg.esm.n_subjects_table < n_train {
            return Err(Error::config(
                "model.esm.n_subjects_table",
                format!("{} rows for {n_train} training subjects", model_cfg.esm.n_subjects_table),
            ));
        }
        let model = Model::new(model_cfg)?;
        let params = model.init_params::<f32>(cfg.seed);
        let adam = Adam::new(cfg.adam, &params);
        let rng = Rng::new(cfg.seed).fork_named("crops", 0);
        Ok(Trainer { model, corpus, state: TrainState { params, adam, epoch: 0, step: 0, rng }, cfg })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(dir: impl AsRef<Path>, corpus: &'a Corpus) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        check_dims(&ck.model, corpus)?;
        let model = Model::new(ck.model)?;
        Ok(Trainer { model, corpus, cfg: ck.train, state: ck.state })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch.unwrap_or_else(|| {
            let rows: usize = training_segments(self.corpus, self.cfg.val_frac).iter().map(|(_, r)| r.len()).sum();
            rows.div_ceil(self.cfg.batch * self.model.cfg.crop_len).max(1)
        })
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let head = 1.0 - self.cfg.val_frac;
        self.corpus.crop_batch_in(Split::Train, self.cfg.batch, self.model.cfg.crop_len, head, &mut self.state.rng)
    }

    /// One optimizer step on `batch` at learning rate `lr`.
    pub fn step_on(&mut self, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
        let keys: Vec<SubjectKey> = batch
            .subjects
            .iter()
            .map(|&s| self.model.cfg.subject_key(SubjectId { index: s, split: Split::Train }))
            .collect();
        let ps = &mut self.state.params;
        let mut t = Tape::new();
        let x = t.constant(batch.eeg.clone());
        let y = t.constant(batch.mel.clone());
        let pred = self.model.forward(&mut t, ps, x, &keys)?;
        let (loss, parts) = t.composite_loss(pred, y, &self.cfg.loss)?;
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {} (epoch {})",
                self.state.step, self.state.epoch
            )));
        }
        let grads = t.backward(loss);
        ps.zero_grads();
        t.accumulate_param_grads(&grads, ps);
        if let Some(max) = self.cfg.clip_norm {
            clip_grad_norm(ps, max);
        }
        self.state.adam.step(ps, lr)?;
        self.state.step += 1;
        Ok(parts)
    }

    /// Runs one epoch and validates.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.state.epoch;
        let lr = self.cfg.lr_at(epoch);
        let n = self.steps_per_epoch();
        let mut acc = [0.0; 4];
        for _ in 0..n {
            let b = self.next_batch()?;
            let p = self.step_on(&b, lr)?;
            for (a, v) in acc.iter_mut().zip([p.l_pearson, p.l_one, p.l_infonce, p.total]) {
                *a += v / n as f64;
            }
        }
        self.state.epoch += 1;
        let val_pearson = validation_pearson(&self.model, &self.state.params, self.corpus, self.cfg.val_frac)?;
        Ok(EpochMetrics { epoch, lr, l_pearson: acc[0], l_one: acc[1], l_infonce: acc[2], total: acc[3], val_pearson })
    }

    /// Trains up to `cfg.epochs`, appending to `out/metrics.ndjson` and
    /// writing `out/last` plus numbered checkpoints. On failure the
    /// checkpoints already on disk are left untouched.
    pub fn train(&mut self, out: impl AsRef<Path>, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<()> {
        let out = out.as_ref();
        fs::create_dir_all(out)?;
        let mut log = fs::OpenOptions::new().create(true).append(true).open(out.join(METRICS_FILE))?;
        while self.state.epoch < self.cfg.epochs {
            let m = self.run_epoch().map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg}; last good checkpoint kept at {}", out.join(LAST).display())),
                other => other,
            })?;
            writeln!(log, "{}", serde_json::to_string(&m)?)?;
            on_epoch(&m);
            let done = self.state.epoch;
            if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 {
                self.save(out.join(format!("epoch-{done:05}")))?;
            }
            self.save(out.join(LAST))?;
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        Checkpoint::write(dir, &self.model.cfg, &self.cfg, &self.state)
    }
}

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const LAST: &str = "last";
const META_FILE: &str = "meta.json";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    version: u32,
    model_digest: String,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    adam_t: u64,
    rng: RngState,
    params: Vec<String>,
}

/// Directory of tensor files plus `meta.json`:
///
/// ```text
/// meta.json
/// params/<name>.dmf2
/// adam_m/<name>.dmf2
/// adam_v/<name>.dmf2
/// ```
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

fn tensor_path(dir: &Path, group: &str, name: &str) -> PathBuf {
    dir.join(group).join(format!("{name}.dmf2"))
}

impl Checkpoint {
    /// Writes into a sibling temporary directory, then swaps it in.
    pub fn write(dir: impl AsRef<Path>, model: &ModelConfig, train: &TrainConfig, st: &TrainState) -> Result<()> {
        let dir = dir.as_ref();
        let name = dir.file_name().ok_or_else(|| Error::config("checkpoint", "path has no final component"))?;
        let tmp = dir.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        for g in ["params", "adam_m", "adam_v"] {
            fs::create_dir_all(tmp.join(g))?;
        }
        let names: Vec<String> = st.params.names().map(str::to_string).collect();
        for n in &names {
            write_tensor(tensor_path(&tmp, "params", n), st.params.value(n))?;
            write_tensor(tensor_path(&tmp, "adam_m", n), &st.adam.m[n])?;
            write_tensor(tensor_path(&tmp, "adam_v", n), &st.adam.v[n])?;
        }
        let meta = Meta {
            version: CHECKPOINT_VERSION,
            model_digest: model.digest(),
            model: model.clone(),
            train: train.clone(),
            epoch: st.epoch,
            step: st.step,
            adam_t: st.adam.t,
            rng: st.rng.state(),
            params: names,
        };
        fs::write(tmp.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| Error::Format { path: meta_path.clone(), msg: format!("cannot read checkpoint metadata: {e}") })?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Format { path: meta_path.clone(), msg: e.to_string() })?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Format { path: meta_path, msg: format!("unsupported checkpoint version {}", meta.version) });
        }
        if meta.model.digest() != meta.model_digest {
            return Err(Error::Format { path: meta_path, msg: "model config does not match its digest".into() });
        }
        let mut params = ParamStore::new();
        let mut adam = Adam { cfg: meta.train.adam, t: meta.adam_t, m: BTreeMap::new(), v: BTreeMap::new() };
        for n in &meta.params {
            params.insert(n.clone(), read_tensor(tensor_path(dir, "params", n))?)?;
            adam.m.insert(n.clone(), read_tensor(tensor_path(dir, "adam_m", n))?);
            adam.v.insert(n.clone(), read_tensor(tensor_path(dir, "adam_v", n))?);
        }
        // The stored parameters must be exactly what the config builds.
        let fresh = Model::new(meta.model.clone())?.init_params::<f32>(0);
        let shapes = |p: &ParamStore<f32>| p.iter().map(|(n, e)| (n.to_string(), e.value.shape().to_vec())).collect::<Vec<_>>();
        if shapes(&fresh) != shapes(&params) {
            return Err(Error::Format { path: dir.to_path_buf(), msg: "parameters do not match the model config".into() });
        }
        Ok(Checkpoint {
            model: meta.model,
            train: meta.train,
            state: TrainState { params, adam, epoch: meta.epoch, step: meta.step, rng: Rng::from_state(meta.rng) },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};
    use proptest::prelude::{prop_assert, proptest};

    fn tiny_model(n_subjects: usize, channels: usize, bands: usize) -> ModelConfig {
        let mut c = ModelConfig::new(8, n_subjects).with_counts(1, 1, 1, 1);
        c.channels = channels;
        c.bands = bands;
        c.crop_len = 64;
        c.esm.n_heads = 2;
        c.dcfam.window = 3;
        c.dcfam.shuffle_groups = 2;
        c.hams.levels = 2;
        c.splinemap.rank = 4;
        c.convmamba.state_dim = 4;
        c
    }

    fn tiny_corpus(seed: u64) -> Corpus {
        let g = GenConfig { channels: 8, bands: 3, ..GenConfig::new(seed, 2, 1, 30.0) };
        generate(&g).unwrap()
    }

    fn tiny_train(seed: u64) -> TrainConfig {
        TrainConfig { epochs: 2, steps_per_epoch: Some(2), batch: 4, seed, checkpoint_every: 1, ..TrainConfig::default() }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("theta", Tensor::zeros(&[1])).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        ps.accumulate_grad("theta", &[1.0]);
        adam.step(&mut ps, 0.1).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((ps.value("theta").data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_closed_form_over_steps() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", Tensor::zeros(&[1])).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        let grads = [0.5, -2.0, 1.5];
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            ps.zero_grads();
            ps.accumulate_grad("w", &[g]);
            adam.step(&mut ps, 0.01).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (i + 1) as i32;
            w -= 0.01 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((ps.value("w").data()[0] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("a", Tensor::from_fn(&[3], |i| i as f32 - 1.0)).unwrap();
        let before = ps.clone();
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        adam.step(&mut ps, 0.5).unwrap();
        assert_eq!(ps.value("a"), before.value("a"));
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("ok", Tensor::zeros(&[2])).unwrap();
        ps.insert("bad.w", Tensor::zeros(&[2])).unwrap();
        ps.accumulate_grad("bad.w", &[0.0, f32::NAN]);
        let before = ps.clone();
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        let err = adam.step(&mut ps, 0.1).unwrap_err();
        assert!(err.to_string().contains("bad.w"), "{err}");
        assert_eq!(adam.t, 0);
        for n in ["ok", "bad.w"] {
            assert_eq!(ps.value(n), before.value(n));
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("a", Tensor::zeros(&[2])).unwrap();
        ps.accumulate_grad("a", &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut ps, 1.0), 5.0);
        assert!((ps.grad_norm() - 1.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut ps, 2.0), ps.grad_norm());
    }

    #[test]
    fn schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 5e-4);
        assert!((c.lr_at(50) - 4.5e-4).abs() < 1e-18);
        assert_eq!(c.lr_at(49), 5e-4);
        assert!((c.lr_at(999) - 5e-4 * 0.9f64.powi(19)).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn schedule_is_a_non_increasing_staircase(e in 0usize..5000) {
            let c = TrainConfig::default();
            prop_assert!(c.lr_at(e + 1) <= c.lr_at(e));
            prop_assert!(c.lr_at(e) == c.lr_at(e - e % 50));
        }
    }

    #[test]
    fn config_validation_paths() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            match c.validate() {
                Err(Error::Config { path, .. }) => path,
                other => panic!("{other:?}"),
            }
        };
        assert_eq!(bad(|c| c.lr = 0.0), "train.lr");
        assert_eq!(bad(|c| c.lr_decay = 1.0), "train.lr_decay");
        assert_eq!(bad(|c| c.batch = 1), "train.batch");
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
        let typo = json.replacen("\"epochs\"", "\"epoch\"", 1);
        assert!(serde_json::from_str::<TrainConfig>(&typo).is_err());
    }

    #[test]
    fn windows_cover_the_range_once() {
        for (n, t) in [(10, 4), (8, 4), (3, 4), (700, 320)] {
            let w = windows(5..5 + n, t);
            let kept: usize = w.iter().map(|(_, k)| k).sum();
            assert_eq!(kept, n);
            let last = w.last().unwrap();
            assert_eq!(last.0.end, 5 + n);
            assert!(w.iter().all(|(r, _)| r.len() == t.min(n)));
        }
    }

    #[test]
    fn segmented_prediction_matches_single_windows() {
        let corpus = tiny_corpus(3);
        let model = Model::new(tiny_model(2, 8, 3)).unwrap();
        let ps = model.init_params::<f32>(1);
        let rec = corpus.split(Split::Train).next().unwrap();
        let range = 10..10 + 64 * 2 + 17;
        let got = predict_range(&model, &ps, &rec.eeg, range.clone(), Some(0)).unwrap();
        assert_eq!(got.len(), range.len() * 3);
        let c = 8;
        let one = |s: usize| {
            let x = Tensor::new(&[1, 64, c], rec.eeg.data()[s * c..(s + 64) * c].to_vec()).unwrap();
            model.predict(&ps, &x, &[Some(0)]).unwrap().data().to_vec()
        };
        let first = one(10);
        assert!(got[..64 * 3].iter().zip(&first).all(|(a, b)| (a - b).abs() < 1e-5));
        let tail = one(range.end - 64);
        let n = got.len();
        assert!(got[n - 17 * 3..].iter().zip(&tail[(64 - 17) * 3..]).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let corpus = tiny_corpus(4);
        let rep = evaluate_with(&corpus, 320, |r| Ok(r.mel.data().to_vec())).unwrap();
        assert!(rep.subjects.iter().all(|s| (s.pearson_r - 1.0).abs() < 1e-9));
        assert!((rep.score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn random_predictor_scores_near_zero() {
        let g = GenConfig { channels: 4, bands: 10, ..GenConfig::new(5, 10, 10, 60.0) };
        let corpus = generate(&g).unwrap();
        let mut r = Rng::new(9);
        let rep = evaluate_with(&corpus, 320, |rec| Ok((0..rec.mel.len()).map(|_| r.normal() as f32).collect())).unwrap();
        // 20 recordings of 12 windows each.
        assert!(rep.score.abs() < 0.05, "{}", rep.score);
    }

    #[test]
    fn missing_split_is_a_domain_error() {
        let mut corpus = tiny_corpus(6);
        corpus.recordings.retain(|r| r.split != Split::HeldoutSubjects);
        assert!(matches!(evaluate_with(&corpus, 320, |r| Ok(r.mel.data().to_vec())), Err(Error::Domain(_))));
    }

    #[test]
    fn epoch_smoke_writes_a_parsable_log() {
        let corpus = tiny_corpus(7);
        let dir = tempfile::tempdir().unwrap();
        let mut tr = Trainer::new(tiny_model(2, 8, 3), TrainConfig { epochs: 1, ..tiny_train(1) }, &corpus).unwrap();
        tr.train(dir.path(), |_| {}).unwrap();
        let log = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let lines: Vec<EpochMetrics> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 1);
        assert!(lines[0].total.is_finite() && lines[0].val_pearson.is_finite());
        assert!(dir.path().join("last/meta.json").exists());
        assert!(dir.path().join("epoch-00001/params").is_dir());
    }

    #[test]
    fn late_epochs_have_lower_median_loss() {
        let corpus = tiny_corpus(10);
        let cfg = TrainConfig { epochs: 101, ..tiny_train(4) };
        let mut tr = Trainer::new(tiny_model(2, 8, 3), cfg, &corpus).unwrap();
        let totals: Vec<f64> = (0..101).map(|_| tr.run_epoch().unwrap().total).collect();
        let median = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            s[s.len() / 2]
        };
        let (early, late) = (median(&totals[..=10]), median(&totals[90..]));
        assert!(late < early, "late {late} vs early {early}");
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let corpus = tiny_corpus(8);
        let run = || {
            let mut tr = Trainer::new(tiny_model(2, 8, 3), tiny_train(3), &corpus).unwrap();
            for _ in 0..2 {
                tr.run_epoch().unwrap();
            }
            tr.state
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_continues_bit_identically() {
        let corpus = tiny_corpus(9);
        let dir = tempfile::tempdir().unwrap();
        let mut straight = Trainer::new(tiny_model(2, 8, 3), tiny_train(2), &corpus).unwrap();
        straight.train(dir.path().join("a"), |_| {}).unwrap();
        let mut first = Trainer::new(tiny_model(2, 8, 3), TrainConfig { epochs: 1, ..tiny_train(2) }, &corpus).unwrap();
        first.train(dir.path().join("b"), |_| {}).unwrap();
        let mut resumed = Trainer::resume(dir.path().join("b/last"), &corpus).unwrap();
        resumed.cfg.epochs = 2;
        resumed.train(dir.path().join("b"), |_| {}).unwrap();
        assert_eq!(resumed.state, straight.state);
        for g in ["params", "adam_m", "adam_v"] {
            for e in fs::read_dir(dir.path().join("a/last").join(g)).unwrap() {
                let e = e.unwrap();
                let other = dir.path().join("b/last").join(g).join(e.file_name());
                assert_eq!(fs::read(e.path()).unwrap(), fs::read(other).unwrap());
            }
        }
    }

    #[test]
    fn nan_loss_keeps_the_last_checkpoint() {
        let corpus = tiny_corpus(10);
        let dir = tempfile::tempdir().unwrap();
        let mut tr = Trainer::new(tiny_model(2, 8, 3), TrainConfig { epochs: 1, ..tiny_train(4) }, &corpus).unwrap();
        tr.train(dir.path(), |_| {}).unwrap();
        let before = fs::read(dir.path().join("last/params/head.w.dmf2")).unwrap();
        tr.cfg.epochs = 2;
        tr.state.params.value_mut("head.b").data_mut()[0] = f32::NAN;
        let err = tr.train(dir.path(), |_| {}).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("last good checkpoint")), "{err}");
        assert_eq!(fs::read(dir.path().join("last/params/head.w.dmf2")).unwrap(), before);
        assert!(Checkpoint::load(dir.path().join("last")).is_ok());
    }

    #[test]
    fn checkpoint_rejects_tampered_config() {
        let corpus = tiny_corpus(11);
        let dir = tempfile::tempdir().unwrap();
        let tr = Trainer::new(tiny_model(2, 8, 3), tiny_train(5), &corpus).unwrap();
        tr.save(dir.path().join("c")).unwrap();
        let meta = dir.path().join("c/meta.json");
        let text = fs::read_to_string(&meta).unwrap().replacen("\"d_model\": 8", "\"d_model\": 16", 1);
        fs::write(&meta, text).unwrap();
        assert!(matches!(Checkpoint::load(dir.path().join("c")), Err(Error::Format { .. })));
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let corpus = tiny_corpus(12);
        assert!(matches!(Trainer::new(tiny_model(2, 9, 3), tiny_train(0), &corpus), Err(Error::Config { .. })));
        assert!(matches!(Trainer::new(tiny_model(1, 8, 3), tiny_train(0), &corpus), Err(Error::Config { .. })));
    }
}
