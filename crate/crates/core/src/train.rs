//! Two-phase training (diffusion warm-up, then joint optimization),
//! checkpoints, metric logging and evaluation.
//!
//! Every random draw comes from a ChaCha8 stream derived from the config seed
//! and the epoch or global step, so a run resumed from a checkpoint replays
//! exactly the batches and noise an uninterrupted run would have used.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{Neighbor, PrototypeIndex};
use crate::config::ExperimentConfig;
use crate::dataset::{balanced_batches, BatchSpec, DatasetManifest, ImageSet, Split};
use crate::ddim::{decode, encode_stochastic, SamplerPlan};
use crate::error::{Error, Result};
use crate::network::DenoiserModel;
use crate::objectives::{batch_prediction_loss, contrastive_loss_tensor, diffusion_loss, PhaseMask};
use crate::schedule::NoiseSchedule;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const METADATA_KEY: &str = "protodiff";
const ENCODE_CHUNK: usize = 64;
const RECON_BATCH: usize = 8;

const STREAM_STEPS: u64 = 1 << 40;
const STREAM_NOISE: u64 = 2 << 40;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

/// Adaptive-moment optimizer with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(model: &DenoiserModel, lr: f64) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, p) in model.parameters() {
            m.insert(name.clone(), p.zeros_like()?);
            v.insert(name.clone(), p.zeros_like()?);
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update; parameters without a gradient keep their value and moments.
    pub fn update(&mut self, model: &DenoiserModel, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let var = model
                .vars()
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no trainable parameter {name}")))?;
            let g = g.detach();
            let m = ((&self.m[name] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[name] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let delta = ((&m / c1)?.div(&denom)? * self.lr)?;
            var.set(&var.as_tensor().detach().sub(&delta)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients, accumulated in f64.
pub fn gradient_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut total = 0.0f64;
    for g in grads.values() {
        total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ExperimentConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub adam_step: u64,
    pub best_val_acc: Option<f64>,
}

/// Model parameters, optimizer moments and training counters.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors: BTreeMap<String, &Tensor> = BTreeMap::new();
        for (name, t) in &self.params {
            tensors.insert(format!("model.{name}"), t);
        }
        for (name, t) in &self.adam_m {
            tensors.insert(format!("optim.m.{name}"), t);
        }
        for (name, t) in &self.adam_v {
            tensors.insert(format!("optim.v.{name}"), t);
        }
        let metadata = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        let bytes = safetensors::serialize(tensors, Some(metadata))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write then rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| bad("missing training metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| bad(e.to_string()))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", meta.format_version)));
        }
        let mut ckpt = Self {
            meta,
            params: BTreeMap::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
        };
        for (name, t) in candle_core::safetensors::load_buffer(&bytes, device)? {
            if let Some(rest) = name.strip_prefix("model.") {
                ckpt.params.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("optim.m.") {
                ckpt.adam_m.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("optim.v.") {
                ckpt.adam_v.insert(rest.to_string(), t);
            } else {
                return Err(bad(format!("unexpected tensor {name}")));
            }
        }
        Ok(ckpt)
    }

    /// Rebuilds the model described by the checkpoint.
    pub fn model(&self, device: &Device, trainable: bool) -> Result<DenoiserModel> {
        let config = &self.meta.config;
        DenoiserModel::from_parameters(&config.model(), &self.params, config.precision.dtype(), device, trainable)
    }
}

/// Loads a checkpoint and returns its config and a frozen model.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ExperimentConfig, DenoiserModel)> {
    let ckpt = Checkpoint::load(path, &Device::Cpu)?;
    let model = ckpt.model(&Device::Cpu, false)?;
    Ok((ckpt.meta.config, model))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub l_diff: f64,
    pub l_contrast: f64,
    pub l_pred: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Round-trip reconstruction MSE on a held-out batch, logged with `val_acc`.
    pub recon_mse: Option<f64>,
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub best_val_acc: Option<f64>,
    pub last: Option<EpochMetrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub index_path: PathBuf,
    pub state: TrainingState,
}

struct PhaseData {
    manifest: PathBuf,
    train: ImageSet,
    val: ImageSet,
}

pub struct Trainer {
    config: ExperimentConfig,
    schedule: NoiseSchedule,
    model: DenoiserModel,
    adam: Adam,
    state: TrainingState,
    data: Vec<PhaseData>,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = DenoiserModel::new(&config.model(), config.seed, config.precision.dtype(), &Device::Cpu)?;
        let adam = Adam::new(&model, config.learning_rate)?;
        Ok(Self {
            schedule: config.schedule()?,
            model,
            adam,
            state: TrainingState {
                epoch: 0,
                global_step: 0,
                best_val_acc: None,
                last: None,
            },
            data: Vec::new(),
            config,
        })
    }

    /// Continues the run stored in `checkpoint`, writing into `output_dir`
    /// (defaults to the checkpoint's own output directory).
    pub fn resume(checkpoint: impl AsRef<Path>, output_dir: Option<PathBuf>) -> Result<Self> {
        let ckpt = Checkpoint::load(checkpoint, &Device::Cpu)?;
        let mut config = ckpt.meta.config.clone();
        if let Some(dir) = output_dir {
            config.output_dir = dir;
        }
        let model = ckpt.model(&Device::Cpu, true)?;
        let mut adam = Adam::new(&model, config.learning_rate)?;
        for (moments, stored, kind) in [(&mut adam.m, &ckpt.adam_m, "m"), (&mut adam.v, &ckpt.adam_v, "v")] {
            if stored.len() != moments.len() {
                return Err(Error::Checkpoint(format!("optimizer {kind} state does not match the model")));
            }
            for (name, t) in stored {
                let slot = moments
                    .get_mut(name)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
                if slot.dims() != t.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
                }
                *slot = t.to_dtype(model.dtype())?;
            }
        }
        adam.step = ckpt.meta.adam_step;
        Ok(Self {
            schedule: config.schedule()?,
            model,
            adam,
            state: TrainingState {
                epoch: ckpt.meta.epoch,
                global_step: ckpt.meta.global_step,
                best_val_acc: ckpt.meta.best_val_acc,
                last: None,
            },
            data: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn state(&self) -> &TrainingState {
        &self.state
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let copy = |m: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            m.iter().map(|(k, v)| Ok((k.clone(), v.detach().copy()?))).collect()
        };
        Ok(Checkpoint {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_FORMAT_VERSION,
                config: self.config.clone(),
                epoch: self.state.epoch,
                global_step: self.state.global_step,
                adam_step: self.adam.step,
                best_val_acc: self.state.best_val_acc,
            },
            params: copy(self.model.parameters())?,
            adam_m: copy(&self.adam.m)?,
            adam_v: copy(&self.adam.v)?,
        })
    }

    fn total_epochs(&self) -> usize {
        self.config.warmup_epochs + self.config.joint_epochs
    }

    fn phase_of(&self, epoch: usize) -> Phase {
        if epoch <= self.config.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Joint
        }
    }

    fn phase_data(&mut self, phase: Phase) -> Result<&PhaseData> {
        let path = self.config.phase_manifest(phase == Phase::Joint)?.to_path_buf();
        let pos = match self.data.iter().position(|d| d.manifest == path) {
            Some(pos) => pos,
            None => {
                let manifest = DatasetManifest::load(&path)?;
                let size = self.config.image_size;
                let train = ImageSet::load(&manifest, Split::Train, size)?;
                let val = ImageSet::load(&manifest, Split::Val, size)?;
                log::info!("loaded {} training and {} validation images from {}", train.len(), val.len(), path.display());
                self.data.push(PhaseData {
                    manifest: path,
                    train,
                    val,
                });
                self.data.len() - 1
            }
        };
        Ok(&self.data[pos])
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.config.output_dir.join("checkpoints")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.checkpoint_dir().join(format!("epoch-{epoch:04}.safetensors"))
    }

    /// Trains until all configured epochs are complete.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let out = self.config.output_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        self.config.save(out.join("config.json"))?;
        let metrics_path = out.join("metrics.jsonl");
        let mut log = open_metrics(&metrics_path, self.state.epoch)?;
        let started = Instant::now();

        if self.state.epoch == 0 {
            self.checkpoint()?.save(self.checkpoint_path(0))?;
        }
        while self.state.epoch < self.total_epochs() {
            let epoch = self.state.epoch + 1;
            let mut metrics = self.train_epoch(epoch)?;
            let boundary = epoch == self.config.warmup_epochs || epoch == self.total_epochs();
            if epoch % self.config.eval_every == 0 || boundary {
                let (val_acc, recon) = self.validate(self.phase_of(epoch))?;
                metrics.val_acc = val_acc;
                metrics.recon_mse = Some(recon);
                if let Some(acc) = val_acc {
                    if self.state.best_val_acc.is_none_or(|b| acc > b) {
                        self.state.best_val_acc = Some(acc);
                    }
                }
            }
            if self.config.log_wall_time {
                metrics.wall_time = Some(started.elapsed().as_secs_f64());
            }
            self.state.epoch = epoch;
            writeln!(log, "{}", serde_json::to_string(&metrics)?).map_err(|e| Error::io(&metrics_path, e))?;
            log.flush().map_err(|e| Error::io(&metrics_path, e))?;
            log::info!(
                "epoch {epoch}/{} {:?}: l_diff {:.5} l_contrast {:.5} l_pred {:.5} train_acc {:.3} val_acc {}",
                self.total_epochs(),
                metrics.phase,
                metrics.l_diff,
                metrics.l_contrast,
                metrics.l_pred,
                metrics.train_acc,
                metrics.val_acc.map_or("-".into(), |a| format!("{a:.3}"))
            );
            self.state.last = Some(metrics);
            if epoch % self.config.checkpoint_every == 0 || boundary {
                self.checkpoint()?.save(self.checkpoint_path(epoch))?;
            }
        }

        let final_checkpoint = out.join("model.safetensors");
        self.checkpoint()?.save(&final_checkpoint)?;
        let final_phase = if self.config.joint_epochs > 0 { Phase::Joint } else { Phase::Warmup };
        let train = self.phase_data(final_phase)?.train.clone();
        let index = build_index(&self.model, &train)?;
        let index_path = out.join("index.pdix");
        index.save(&index_path)?;
        Ok(TrainOutcome {
            final_checkpoint,
            metrics_path,
            index_path,
            state: self.state.clone(),
        })
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let phase = self.phase_of(epoch);
        let mask = match phase {
            Phase::Warmup => PhaseMask::WARMUP,
            Phase::Joint => PhaseMask {
                diffusion: !self.config.freeze_diffusion_in_phase2,
                ..PhaseMask::ALL
            },
        };
        let spec = BatchSpec {
            per_class: self.config.per_class,
            seed: self.config.seed,
        };
        let train = self.phase_data(phase)?.train.clone();
        let batches = balanced_batches(train.labels(), spec, epoch as u64)?;
        let mut sums = [0.0f64; 3];
        let mut correct = 0usize;
        let mut seen = 0usize;
        for ids in &batches {
            let x0 = train.batch(ids, self.model.device())?.to_dtype(self.model.dtype())?;
            let labels: Vec<u8> = ids.iter().map(|&i| train.labels()[i]).collect();
            let (parts, hard) = self.train_step(epoch, &x0, &labels, mask)?;
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
            correct += hard.iter().zip(&labels).filter(|(a, b)| a == b).count();
            seen += labels.len();
        }
        let n = batches.len().max(1) as f64;
        Ok(EpochMetrics {
            epoch,
            phase,
            l_diff: sums[0] / n,
            l_contrast: sums[1] / n,
            l_pred: sums[2] / n,
            train_acc: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
            val_acc: None,
            recon_mse: None,
            wall_time: None,
        })
    }

    /// One optimizer step. Returns the unweighted loss components (zero
    /// for inactive terms) and the batch's hard neighbor votes.
    fn train_step(&mut self, epoch: usize, x0: &Tensor, labels: &[u8], mask: PhaseMask) -> Result<([f64; 3], Vec<u8>)> {
        let step = self.state.global_step;
        let batch = labels.len();
        let t_max = self.config.diffusion_steps;
        let mut rng = stream_rng(self.config.seed, STREAM_STEPS | step);
        let steps: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=t_max)).collect();
        let mut rng = stream_rng(self.config.seed, STREAM_NOISE | step);
        let noise: Vec<f64> = (0..x0.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
        let noise = Tensor::from_vec(noise, x0.dims(), x0.device())?.to_dtype(x0.dtype())?;

        let z = self.model.encode_semantic(x0)?;
        let weights = self.config.weights();
        let l_diff = diffusion_loss(&self.model, x0, &steps, &noise, &z, &self.schedule)?;
        let mut parts = [scalar(&l_diff)?, 0.0, 0.0];
        // inactive terms stay out of the graph so their parameters get no gradient at all
        let mut terms = Vec::new();
        if mask.diffusion {
            terms.push((&l_diff * weights.diffusion)?);
        }
        let hard = if mask.contrast || mask.prediction {
            let l_con = contrastive_loss_tensor(&z, labels, self.config.tau)?;
            let pred = batch_prediction_loss(&z, labels, self.config.k, self.config.tau_pred)?;
            if mask.contrast {
                terms.push((&l_con * weights.contrast)?);
                parts[1] = scalar(&l_con)?;
            }
            if mask.prediction {
                terms.push((&pred.loss * weights.prediction)?);
                parts[2] = scalar(&pred.loss)?;
            }
            pred.hard_labels
        } else {
            batch_prediction_loss(&z.detach(), labels, self.config.k, self.config.tau_pred)?.hard_labels
        };
        let diverged = |message: String| Error::Divergence {
            epoch,
            step: step as usize,
            message: format!(
                "{message}; last good checkpoint is in {}",
                self.checkpoint_dir().display()
            ),
        };
        let total = match terms.split_first() {
            Some((first, rest)) => rest.iter().try_fold(first.clone(), |acc, t| acc.add(t))?,
            None => return Err(Error::InvalidArgument("no active loss term".into())),
        };
        let total_value = scalar(&total)?;
        if !total_value.is_finite() || parts.iter().any(|p| !p.is_finite()) {
            return Err(diverged(format!("non-finite loss {parts:?}")));
        }

        let store = total.backward()?;
        let mut grads = BTreeMap::new();
        for (name, var) in self.model.vars() {
            if let Some(g) = store.get(var.as_tensor()) {
                // gradients carry the op graph of the step; keep only values
                grads.insert(name.clone(), g.detach());
            }
        }
        let norm = gradient_norm(&grads)?;
        if !norm.is_finite() {
            return Err(diverged(format!("non-finite gradient norm {norm}")));
        }
        if norm > self.config.grad_clip {
            let scale = self.config.grad_clip / norm;
            for g in grads.values_mut() {
                *g = (&*g * scale)?;
            }
        }
        self.adam.update(&self.model, &grads)?;
        self.state.global_step += 1;
        Ok((parts, hard))
    }

    /// Validation accuracy against the full training index (probes are not
    /// in the index) and held-out reconstruction MSE.
    fn validate(&mut self, phase: Phase) -> Result<(Option<f64>, f64)> {
        let k = self.config.k;
        let tau_pred = self.config.tau_pred;
        let (invert_steps, decode_steps) = (self.config.invert_steps, self.config.decode_steps);
        let schedule = self.schedule.clone();
        let model = self.model.snapshot()?;
        let data = self.phase_data(phase)?;
        let val_acc = if data.val.is_empty() {
            None
        } else {
            let index = build_index(&model, &data.train)?;
            Some(evaluate(&model, &index, &data.val, k, tau_pred)?.accuracy)
        };
        let held_out = if data.val.is_empty() { &data.train } else { &data.val };
        let ids: Vec<usize> = (0..held_out.len().min(RECON_BATCH)).collect();
        let x0 = held_out.batch(&ids, model.device())?.to_dtype(model.dtype())?;
        let invert = SamplerPlan::uniform(schedule.steps(), invert_steps)?;
        let decode = SamplerPlan::uniform(schedule.steps(), decode_steps)?;
        let recon = reconstruct(&model, &x0, &invert, &decode, &schedule)?;
        Ok((val_acc, scalar(&(recon - x0)?.sqr()?.mean_all()?)?))
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn open_metrics(path: &Path, completed: usize) -> Result<File> {
    let mut kept = Vec::new();
    if completed > 0 && path.exists() {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let m: EpochMetrics = serde_json::from_str(&line)?;
            if m.epoch <= completed {
                kept.push(line);
            }
        }
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(file)
}

/// Reads a metrics log written by [`Trainer::run`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Latents for every image of a set, in set order.
pub fn encode_set(model: &DenoiserModel, set: &ImageSet) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(set.len());
    let ids: Vec<usize> = (0..set.len()).collect();
    for chunk in ids.chunks(ENCODE_CHUNK) {
        let x = set.batch(chunk, model.device())?;
        let z = model.encode_semantic(&x)?.detach().to_dtype(DType::F32)?;
        out.extend(z.to_vec2::<f32>()?);
    }
    Ok(out)
}

pub fn build_index(model: &DenoiserModel, train: &ImageSet) -> Result<PrototypeIndex> {
    PrototypeIndex::build(encode_set(model, train)?, train.labels().to_vec(), train.refs().to_vec())
}

/// Deterministic encode-then-decode round trip.
pub fn reconstruct(
    model: &DenoiserModel,
    x0: &Tensor,
    invert: &SamplerPlan,
    decode_plan: &SamplerPlan,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let z = model.encode_semantic(x0)?.detach();
    let x_t = encode_stochastic(model, x0, &z, invert, schedule)?;
    Ok(decode(model, &z, &x_t, decode_plan, schedule)?.image)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub image_ref: String,
    pub label: u8,
    pub predicted: u8,
    pub soft_probabilities: [f64; 2],
    pub neighbors: Vec<Neighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub k: usize,
    /// Neighbors are searched over the full training index, never a batch.
    pub neighbor_pool: String,
    pub pool_size: usize,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; 2]; 2],
    pub predictions: Vec<SamplePrediction>,
}

/// Hard KNN accuracy of `set` against `index`.
pub fn evaluate(model: &DenoiserModel, index: &PrototypeIndex, set: &ImageSet, k: usize, tau_pred: f64) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    if index.dim() != model.config().latent_dim {
        return Err(Error::Shape(format!(
            "index latents have {} dimensions, model produces {}",
            index.dim(),
            model.config().latent_dim
        )));
    }
    let latents = encode_set(model, set)?;
    evaluate_latents(index, &latents, set.labels(), set.refs(), k, tau_pred)
}

pub fn evaluate_latents(
    index: &PrototypeIndex,
    latents: &[Vec<f32>],
    labels: &[u8],
    refs: &[String],
    k: usize,
    tau_pred: f64,
) -> Result<Evaluation> {
    let mut confusion = [[0usize; 2]; 2];
    let mut predictions = Vec::with_capacity(latents.len());
    for ((z, &label), image_ref) in latents.iter().zip(labels).zip(refs) {
        // probes never come from the index, so nothing is excluded
        let p = index.knn_predict(z, k, None, tau_pred)?;
        confusion[label as usize][p.label as usize] += 1;
        predictions.push(SamplePrediction {
            image_ref: image_ref.clone(),
            label,
            predicted: p.label,
            soft_probabilities: p.soft_probabilities,
            neighbors: p.neighbors,
        });
    }
    let correct = confusion[0][0] + confusion[1][1];
    Ok(Evaluation {
        k,
        neighbor_pool: "full training index".into(),
        pool_size: index.len(),
        accuracy: correct as f64 / latents.len() as f64,
        confusion,
        predictions,
    })
}

/// Evaluates a saved model on one split of a manifest, indexing that
/// manifest's training split.
pub fn evaluate_checkpoint(checkpoint: impl AsRef<Path>, manifest: &DatasetManifest, split: Split, k: usize) -> Result<Evaluation> {
    let (config, model) = load_model(checkpoint)?;
    let train = ImageSet::load(manifest, Split::Train, config.image_size)?;
    let set = ImageSet::load(manifest, split, config.image_size)?;
    if set.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split} is empty")));
    }
    let index = build_index(&model, &train)?;
    evaluate(&model, &index, &set, k, config.tau_pred)
}
