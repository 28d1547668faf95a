//! Losses, optimizer and schedule arithmetic, early stopping, checkpoints and the training loop.

use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use ndarray::ArrayD;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandscheme::{BandScheme, Source};
use crate::datagen::{generate_examples, ActivityIndex, DataConfig, StemStore, TrainingExample};
use crate::energymeter::{HardwareSpec, RunReport};
use crate::error::{Error, Result};
use crate::inference::{separate_fader, InferenceConfig, Separator};
use crate::metrics::{mean, usdr};
use crate::model::{BandSplitModel, ModelConfig};
use crate::params::{Gradients, ParamStore, TensorRecord};
use crate::scalar::Scalar;
use crate::spectral::{ComplexSpectrogram, FrameParams, Stft, Waveform};
use crate::tape::{complex_to_tensor, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchAdapt {
    /// Keep the actual batch and scale the learning rate by `B / B_ref`.
    ScaleLr,
    /// Accumulate `B_ref / B` micro-batches before each update.
    AccumulateGradients,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Monitor {
    Usdr,
    ValidationLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossDomain {
    Time,
    Stft,
    TimeStft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub reference_batch: usize,
    /// Examples per forward/backward pass across all workers.
    pub batch_size: usize,
    pub batch_adapt: BatchAdapt,
    pub decay: f64,
    pub decay_every: usize,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub monitor: Monitor,
    pub loss_domain: LossDomain,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            reference_batch: 16,
            batch_size: 16,
            batch_adapt: BatchAdapt::ScaleLr,
            decay: 0.98,
            decay_every: 2,
            clip_norm: 5.0,
            max_epochs: 200,
            patience: 10,
            monitor: Monitor::Usdr,
            loss_domain: LossDomain::TimeStft,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.reference_batch == 0 || self.patience == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch sizes, patience and decay_every must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        let positive = [self.base_lr, self.decay, self.clip_norm, self.adam_eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("learning rate, decay, clip norm and eps must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// The fields that shape the parameter trajectory; run length and patience may change on resume.
    pub fn trajectory(&self) -> Self {
        Self {
            max_epochs: 0,
            patience: 0,
            ..self.clone()
        }
    }

    /// Micro-batches per update.
    pub fn micro_steps(&self) -> usize {
        match self.batch_adapt {
            BatchAdapt::ScaleLr => 1,
            BatchAdapt::AccumulateGradients => (self.reference_batch as f64 / self.batch_size as f64).round().max(1.0) as usize,
        }
    }

    /// Examples consumed per parameter update.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.micro_steps()
    }

    /// Learning rate at epoch 0.
    pub fn initial_lr(&self) -> Result<f64> {
        adjusted_lr(self.base_lr, self.effective_batch(), self.reference_batch)
    }
}

/// `λ·B/B_ref`: keeps the per-example rate `λ/B_ref` when the global batch changes.
pub fn adjusted_lr(base_lr: f64, batch: usize, reference_batch: usize) -> Result<f64> {
    if batch == 0 || reference_batch == 0 {
        return Err(Error::Config("batch sizes must be >= 1".into()));
    }
    Ok(base_lr * batch as f64 / reference_batch as f64)
}

/// Step decay by 0.98 every two epochs.
pub fn lr_at_epoch(lr0: f64, epoch: usize) -> f64 {
    lr_with_decay(lr0, epoch, 0.98, 2)
}

pub fn lr_with_decay(lr0: f64, epoch: usize, decay: f64, every: usize) -> f64 {
    lr0 * decay.powi((epoch / every.max(1)) as i32)
}

/// `buffers += micro / n_micro`.
pub fn accumulate_step<T: Scalar>(buffers: &mut Gradients<T>, micro: &Gradients<T>, n_micro: usize) {
    let w = T::one() / T::of_usize(n_micro.max(1));
    for (b, m) in buffers.iter_mut().zip(micro.iter()) {
        b.zip_mut_with(m, |x, &y| *x += y * w);
    }
}

/// Rescales to global norm `max_norm` when above it; returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<TensorRecord>,
    pub v: Vec<TensorRecord>,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.ids().map(|id| ArrayD::zeros(params.get(id).raw_dim())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let step_size = T::of(lr / c1);
        let c2 = T::of(c2);
        let ids: Vec<_> = params.ids().collect();
        for (((id, g), m), v) in ids.into_iter().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step_size * *m / ((*v / c2).sqrt() + eps);
            });
        }
    }

    pub fn state(&self, params: &ParamStore<T>) -> AdamState {
        let rec = |vals: &[ArrayD<T>]| {
            params
                .ids()
                .zip(vals)
                .map(|(id, t)| TensorRecord::from_tensor(params.name(id), t))
                .collect()
        };
        AdamState {
            step: self.step,
            m: rec(&self.m),
            v: rec(&self.v),
        }
    }

    pub fn load_state(&mut self, params: &ParamStore<T>, state: &AdamState) -> Result<()> {
        let mut m = params.clone();
        m.load_records(&state.m)?;
        let mut v = params.clone();
        v.load_records(&state.v)?;
        self.m = m.ids().map(|id| m.get(id).clone()).collect();
        self.v = v.ids().map(|id| v.get(id).clone()).collect();
        self.step = state.step;
        Ok(())
    }
}

fn l1<T: Scalar>(a: impl Iterator<Item = T>, b: impl Iterator<Item = T>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).abs().as_f64()).sum()
}

/// Summed ℓ1 loss between two spectrograms; the time term compares their inverse transforms
/// over `(frames − 1)·hop` samples.
pub fn compute_loss<T: Scalar>(est: &ComplexSpectrogram<T>, reference: &ComplexSpectrogram<T>, domain: LossDomain) -> Result<f64> {
    if est.values.shape() != reference.values.shape() || est.frame != reference.frame {
        return Err(Error::Shape(format!(
            "loss inputs {:?} and {:?} differ",
            est.values.shape(),
            reference.values.shape()
        )));
    }
    let stft_term = || {
        l1(est.values.iter().map(|c| c.re), reference.values.iter().map(|c| c.re))
            + l1(est.values.iter().map(|c| c.im), reference.values.iter().map(|c| c.im))
    };
    let time_term = || -> Result<f64> {
        let len = (est.n_frames().max(1) - 1) * est.frame.hop;
        let plan = Stft::new(est.frame)?;
        let a = plan.inverse(est, len)?;
        let b = plan.inverse(reference, len)?;
        Ok(l1(a.samples.iter().copied(), b.samples.iter().copied()))
    };
    Ok(match domain {
        LossDomain::Stft => stft_term(),
        LossDomain::Time => time_term()?,
        LossDomain::TimeStft => time_term()? + stft_term(),
    })
}

/// Summed ℓ1 loss of one example on the graph.
///
/// `estimate` is `[channels, bins, frames, 2]`, `target_spec` the reference in the same layout and
/// `target` the reference waveform.
pub fn loss_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    estimate: Var,
    target_spec: ArrayD<T>,
    target: &Waveform<T>,
    plan: &Arc<Stft<T>>,
    domain: LossDomain,
) -> Result<Var> {
    let stft_term = |g: &mut Graph<T>| -> Result<Var> {
        let r = g.constant(target_spec.clone());
        let d = g.sub(estimate, r)?;
        Ok(g.sum_abs(d))
    };
    let time_term = |g: &mut Graph<T>| -> Result<Var> {
        let y = g.istft(estimate, plan.clone(), target.len())?;
        let r = g.constant(target.samples.clone().into_dyn());
        let d = g.sub(y, r)?;
        Ok(g.sum_abs(d))
    };
    match domain {
        LossDomain::Stft => stft_term(g),
        LossDomain::Time => time_term(g),
        LossDomain::TimeStft => {
            let a = time_term(g)?;
            let b = stft_term(g)?;
            g.add(a, b)
        }
    }
}

/// Loss and parameter gradients for one (mixture, target) pair.
pub fn example_gradients<T: Scalar>(
    model: &BandSplitModel<T>,
    mixture: &Waveform<T>,
    target: &Waveform<T>,
    domain: LossDomain,
) -> Result<(f64, Gradients<T>)> {
    let plan = Arc::new(Stft::new(model.frame())?);
    let x = plan.forward(mixture)?;
    let s = plan.forward(target)?;
    let mut g = Graph::new();
    let out = model.forward_model(&mut g, std::slice::from_ref(&x))?;
    let loss = loss_on_graph(&mut g, out.estimate, complex_to_tensor(&s.values), target, &plan, domain)?;
    let value = g.scalar(loss).as_f64();
    let grads = g.backward(loss, model.params())?;
    Ok((value, grads))
}

/// Mean per-example loss and gradient of a batch; examples run in parallel and are reduced in order.
pub fn batch_gradients<T: Scalar>(
    model: &BandSplitModel<T>,
    batch: &[(&Waveform<T>, &Waveform<T>)],
    domain: LossDomain,
) -> Result<(f64, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let parts = batch
        .par_iter()
        .map(|(m, t)| example_gradients(model, m, t, domain))
        .collect::<Result<Vec<_>>>()?;
    let mut total = Gradients::zeros_like(model.params());
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    let n = batch.len();
    total.scale(T::one() / T::of_usize(n));
    Ok((loss / n as f64, total))
}

/// Forward-only batch loss with the same reduction as [`batch_gradients`].
pub fn batch_loss<T: Scalar>(model: &BandSplitModel<T>, batch: &[(&Waveform<T>, &Waveform<T>)], domain: LossDomain) -> Result<f64> {
    let plan = Arc::new(Stft::new(model.frame())?);
    let losses = batch
        .par_iter()
        .map(|(m, t)| {
            let x = plan.forward(m)?;
            let s = plan.forward(t)?;
            let mut g = Graph::new();
            let out = model.forward_model(&mut g, std::slice::from_ref(&x))?;
            let loss = loss_on_graph(&mut g, out.estimate, complex_to_tensor(&s.values), t, &plan, domain)?;
            Ok(g.scalar(loss).as_f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Model plus optimizer state; one call to [`Trainer::step`] is one parameter update.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: BandSplitModel<T>,
    pub optimizer: Adam<T>,
    pub cfg: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: BandSplitModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Adam::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Ok(Self { model, optimizer, cfg })
    }

    /// Averages the micro-batch gradients, clips, and applies one Adam update at `lr`.
    pub fn step(&mut self, micro_batches: &[Vec<(&Waveform<T>, &Waveform<T>)>], lr: f64) -> Result<StepStats> {
        let n = micro_batches.len();
        let mut acc = Gradients::zeros_like(self.model.params());
        let mut loss = 0.0;
        for mb in micro_batches {
            let (l, g) = batch_gradients(&self.model, mb, self.cfg.loss_domain)?;
            loss += l / n as f64;
            accumulate_step(&mut acc, &g, n);
        }
        if !loss.is_finite() || !acc.all_finite() {
            return Err(Error::Training(format!("non-finite loss or gradient (loss {loss})")));
        }
        let grad_norm = clip_gradients(&mut acc, self.cfg.clip_norm);
        self.optimizer.update(self.model.params_mut(), &acc, lr);
        if !self.model.params().all_finite() {
            return Err(Error::Training("parameters became non-finite".into()));
        }
        Ok(StepStats { loss, grad_norm })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_value: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self {
            best_value: None,
            best_epoch: 0,
            epochs_since_best: 0,
        }
    }
}

impl EarlyStopState {
    pub fn is_better(&self, value: f64, monitor: Monitor) -> bool {
        match self.best_value {
            None => true,
            Some(best) => match monitor {
                Monitor::Usdr => value > best,
                Monitor::ValidationLoss => value < best,
            },
        }
    }
}

/// Records epoch `epoch`'s monitored value; stops once `patience` epochs pass without improvement.
pub fn early_stop_update(state: EarlyStopState, value: f64, epoch: usize, monitor: Monitor, patience: usize) -> (EarlyStopState, bool) {
    let next = if state.is_better(value, monitor) {
        EarlyStopState {
            best_value: Some(value),
            best_epoch: epoch,
            epochs_since_best: 0,
        }
    } else {
        EarlyStopState {
            epochs_since_best: state.epochs_since_best + 1,
            ..state
        }
    };
    (next, next.epochs_since_best >= patience)
}

/// Whole-song validation pair.
#[derive(Debug, Clone)]
pub struct ValidSong<T> {
    pub id: String,
    pub mixture: Waveform<T>,
    pub target: Waveform<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub usdr: Option<f64>,
    pub per_song: Vec<Option<f64>>,
    /// Mean per-song loss of the separated songs.
    pub loss: Option<f64>,
}

/// Separates every validation song with the linear fader and scores uSDR against the target.
pub fn validate<T: Scalar, M: Separator<T> + ?Sized>(
    model: &M,
    songs: &[ValidSong<T>],
    inference: &InferenceConfig,
    loss: Option<(LossDomain, FrameParams)>,
) -> Result<ValidationResult> {
    let estimates = songs
        .iter()
        .map(|s| separate_fader(&s.mixture, model, inference))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = songs.iter().zip(&estimates).map(|(s, e)| (s.target.clone(), e.clone())).collect();
    let scores = usdr(&pairs)?;
    let loss = match loss {
        None => None,
        Some((domain, frame)) => {
            let plan = Stft::<T>::new(frame)?;
            let per = pairs
                .iter()
                .map(|(r, e)| {
                    let time = || l1(r.samples.iter().copied(), e.samples.iter().copied());
                    Ok(match domain {
                        LossDomain::Time => time(),
                        LossDomain::Stft => compute_loss(&plan.forward(e)?, &plan.forward(r)?, LossDomain::Stft)?,
                        LossDomain::TimeStft => time() + compute_loss(&plan.forward(e)?, &plan.forward(r)?, LossDomain::Stft)?,
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            mean(&per)
        }
    };
    Ok(ValidationResult {
        usdr: scores.aggregate,
        per_song: scores.per_song,
        loss,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"BSRNNCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub valid_usdr: Option<f64>,
    pub valid_loss: Option<f64>,
    pub seconds: f64,
}

/// Optimizer and loop state stored alongside resumable checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub epochs_done: usize,
    pub early: EarlyStopState,
    pub elapsed_s: f64,
    pub history: Vec<EpochRecord>,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub source: String,
    pub model: ModelConfig,
    pub scheme: BandScheme,
    pub frame: FrameParams,
    pub resume: Option<ResumeState>,
}

#[derive(Serialize, Deserialize)]
struct StoredHeader {
    #[serde(flatten)]
    header: CheckpointHeader,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Model weights, plus optimizer moments when the checkpoint is resumable.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<TensorRecord>,
    pub moments: Option<(Vec<TensorRecord>, Vec<TensorRecord>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &BandSplitModel<T>, source: &str) -> Self {
        Self {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                source: source.to_string(),
                model: model.config().clone(),
                scheme: model.scheme().clone(),
                frame: model.frame(),
                resume: None,
            },
            params: model.params().to_records(),
            moments: None,
        }
    }

    pub fn with_optimizer<T: Scalar>(mut self, opt: &Adam<T>, params: &ParamStore<T>, resume: ResumeState) -> Self {
        let state = opt.state(params);
        self.moments = Some((state.m, state.v));
        self.header.resume = Some(ResumeState {
            adam_step: state.step,
            ..resume
        });
        self
    }

    pub fn to_model<T: Scalar>(&self) -> Result<BandSplitModel<T>> {
        let h = &self.header;
        let mut model = BandSplitModel::new(h.model.clone(), h.scheme.clone(), h.frame, 0)?;
        model.params_mut().load_records(&self.params)?;
        Ok(model)
    }

    pub fn restore_optimizer<T: Scalar>(&self, opt: &mut Adam<T>, params: &ParamStore<T>) -> Result<()> {
        let (m, v) = self
            .moments
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let step = self.header.resume.as_ref().map_or(0, |r| r.adam_step);
        opt.load_state(params, &AdamState { step, m: m.clone(), v: v.clone() })
    }

    /// Atomic write: temp file, fsync, rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all: Vec<&TensorRecord> = self.params.iter().collect();
        if let Some((m, v)) = &self.moments {
            all.extend(m.iter());
            all.extend(v.iter());
        }
        let head = serde_json::to_vec(&StoredHeader {
            header: self.header.clone(),
            tensors: all.iter().map(|r| (r.name.clone(), r.shape.clone())).collect(),
        })?;
        let mut buf = Vec::with_capacity(16 + head.len() + 8 * all.iter().map(|r| r.data.len()).sum::<usize>());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(head.len() as u64).to_le_bytes());
        buf.extend_from_slice(&head);
        for r in &all {
            for x in &r.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let head_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let head = bytes.get(16..16 + head_len).ok_or_else(|| bad("truncated header"))?;
        let StoredHeader { header, tensors } = serde_json::from_slice(head)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let mut pos = 16 + head_len;
        let mut records = Vec::with_capacity(tensors.len());
        for (name, shape) in &tensors {
            let n: usize = shape.iter().product();
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            records.push(TensorRecord {
                name: name.clone(),
                shape: shape.clone(),
                data,
            });
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let n_params = if header.resume.is_some() {
            if records.len() % 3 != 0 {
                return Err(bad("optimizer moments do not match parameters"));
            }
            records.len() / 3
        } else {
            records.len()
        };
        let moments = header.resume.is_some().then(|| {
            let v = records.split_off(2 * n_params);
            let m = records.split_off(n_params);
            (m, v)
        });
        Ok(Self {
            header,
            params: records,
            moments,
        })
    }
}

/// Exclusive ownership of a run directory for the lifetime of the guard.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Everything a training run needs besides the initial model.
pub struct TrainJob<'a, T: Scalar, S: StemStore<T> + ?Sized> {
    pub store: &'a S,
    pub activity: Option<&'a ActivityIndex>,
    pub data: &'a DataConfig,
    pub train: &'a TrainConfig,
    pub target: Source,
    pub valid: &'a [ValidSong<T>],
    pub inference: &'a InferenceConfig,
    pub hardware: &'a HardwareSpec,
    pub run_dir: &'a Path,
    pub model_label: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub report: RunReport,
    pub best_checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_model: BandSplitModel<T>,
    pub stopped_early: bool,
}

pub fn last_checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints").join("last.ckpt")
}

pub fn best_checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints").join("best.ckpt")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn monitored(rec: &EpochRecord, monitor: Monitor) -> Option<f64> {
    match monitor {
        Monitor::Usdr => rec.valid_usdr,
        Monitor::ValidationLoss => rec.valid_loss,
    }
}

/// Trains one per-source model, resuming from `run_dir` when a resumable checkpoint exists.
///
/// Writes `metrics.jsonl` (one record per epoch), `checkpoints/{last,best}.ckpt` and
/// `run_report.json` into the run directory.
pub fn train<T: Scalar, S: StemStore<T> + ?Sized>(model: BandSplitModel<T>, job: &TrainJob<'_, T, S>) -> Result<TrainOutcome<T>> {
    let cfg = job.train;
    cfg.validate()?;
    job.data.validate()?;
    job.inference.validate()?;
    if job.valid.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let _lock = RunLock::acquire(job.run_dir)?;
    let source = job.target.as_str();
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut early = EarlyStopState::default();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut elapsed_s = 0.0;
    let mut start_epoch = 0;

    let last_path = last_checkpoint_path(job.run_dir);
    let best_path = best_checkpoint_path(job.run_dir);
    if last_path.is_file() {
        let ck = Checkpoint::load(&last_path)?;
        let resume = ck
            .header
            .resume
            .clone()
            .ok_or_else(|| Error::Checkpoint("last checkpoint is not resumable".into()))?;
        if resume.train.trajectory() != cfg.trajectory()
            || resume.data != *job.data
            || ck.header.source != source
            || ck.header.model != *trainer.model.config()
            || ck.header.scheme != *trainer.model.scheme()
        {
            return Err(Error::Config(format!(
                "run directory {} was started with a different configuration",
                job.run_dir.display()
            )));
        }
        trainer.model = ck.to_model()?;
        ck.restore_optimizer(&mut trainer.optimizer, trainer.model.params())?;
        early = resume.early;
        history = resume.history;
        elapsed_s = resume.elapsed_s;
        start_epoch = resume.epochs_done;
        info!("resuming {} at epoch {start_epoch}", job.run_dir.display());
    }

    let lr0 = cfg.initial_lr()?;
    let micro = cfg.micro_steps();
    let per_update = cfg.effective_batch();
    let steps = (job.data.epoch_size / per_update).max(1);
    let mut stopped_early = early.epochs_since_best >= cfg.patience && start_epoch > 0;

    for epoch in start_epoch..cfg.max_epochs {
        if stopped_early {
            break;
        }
        let t0 = Instant::now();
        let lr = lr_with_decay(lr0, epoch, cfg.decay, cfg.decay_every);
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        for step in 0..steps {
            let base = (step * per_update) as u64;
            let indices: Vec<u64> = (base..base + per_update as u64).collect();
            let examples: Vec<TrainingExample<T>> =
                generate_examples(job.store, job.activity, job.data, job.target, cfg.seed, epoch as u64, &indices)?;
            let micro_batches: Vec<Vec<(&Waveform<T>, &Waveform<T>)>> = examples
                .chunks(cfg.batch_size)
                .map(|c| c.iter().map(|e| (&e.mixture, &e.target)).collect())
                .collect();
            debug_assert_eq!(micro_batches.len(), micro);
            let stats = trainer.step(&micro_batches, lr).map_err(|e| match e {
                Error::Training(msg) => Error::Training(format!(
                    "epoch {epoch} step {step}: {msg}; last good checkpoint kept at {}",
                    last_path.display()
                )),
                other => other,
            })?;
            loss_sum += stats.loss;
            norm_sum += stats.grad_norm;
        }
        let want_loss = cfg.monitor == Monitor::ValidationLoss;
        let v = validate(
            &trainer.model,
            job.valid,
            job.inference,
            want_loss.then_some((cfg.loss_domain, trainer.model.frame())),
        )?;
        let seconds = t0.elapsed().as_secs_f64();
        elapsed_s += seconds;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / steps as f64,
            grad_norm: norm_sum / steps as f64,
            valid_usdr: v.usdr,
            valid_loss: v.loss,
            seconds,
        };
        info!(
            "epoch {epoch}: loss {:.4} uSDR {:?} lr {lr:.3e}",
            rec.train_loss, rec.valid_usdr
        );
        let value = monitored(&rec, cfg.monitor).unwrap_or(match cfg.monitor {
            Monitor::Usdr => f64::NEG_INFINITY,
            Monitor::ValidationLoss => f64::INFINITY,
        });
        let (next, stop) = early_stop_update(early, value, epoch, cfg.monitor, cfg.patience);
        let improved = next.best_epoch == epoch && next.epochs_since_best == 0;
        early = next;
        stopped_early = stop;
        history.push(rec);

        if improved {
            Checkpoint::from_model(&trainer.model, source).save(&best_path)?;
        }
        let resume = ResumeState {
            train: cfg.clone(),
            data: job.data.clone(),
            epochs_done: epoch + 1,
            early,
            elapsed_s,
            history: history.clone(),
            adam_step: 0,
        };
        Checkpoint::from_model(&trainer.model, source)
            .with_optimizer(&trainer.optimizer, trainer.model.params(), resume)
            .save(&last_path)?;
        let mut lines = String::new();
        for r in &history {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        write_atomic(&job.run_dir.join("metrics.jsonl"), lines.as_bytes())?;
    }
    if !stopped_early {
        warn!("reached max_epochs={} without triggering early stopping", cfg.max_epochs);
    }

    let best = Checkpoint::load(&best_path)?;
    let report = RunReport {
        run_id: job
            .run_dir
            .file_name()
            .map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned()),
        model: job.model_label.clone(),
        source: source.to_string(),
        seed: cfg.seed,
        epochs: history.len(),
        best_epoch: early.best_epoch,
        best_metric_db: history.get(early.best_epoch).and_then(|r| r.valid_usdr),
        wall_time_h: elapsed_s / 3600.0,
        hardware: *job.hardware,
        energy_kwh: 0.0,
        measured_kwh: None,
    }
    .with_estimate()?;
    write_atomic(&job.run_dir.join("run_report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(TrainOutcome {
        report,
        best_checkpoint: best_path,
        history,
        best_model: best.to_model()?,
        stopped_early,
    })
}
