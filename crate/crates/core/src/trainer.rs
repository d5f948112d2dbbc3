//! Training: Adam over every trainable parameter, one sequence per batch
//! with stride-sampled frames, per-epoch reshuffling, epoch checkpoints that
//! resume bitwise, and the paired random-vs-checkpoint initialisation run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_checkpoint, save_checkpoint, BinaryMask, Checkpoint, FlowField};
use crate::diffcore::{Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::flowenc::last_frame_flow;
use crate::losses::{total_loss_graph, LossConfig};
use crate::metrics::{score_sequence, SegReport, DEFAULT_THRESHOLD};
use crate::model::{forward_graph, Clip, Model, ModelConfig};
use crate::providers::{provide, GeometryBundle, ProviderSpec};
use crate::sequence::{load_dataset, FrameSequence};
use crate::synthscenes::mix;

pub const ADAM_M_PREFIX: &str = "adam_m/";
pub const ADAM_V_PREFIX: &str = "adam_v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
#[derive(Default)]
pub enum InitMode {
    #[default]
    Random,
    /// Copies parameters whose names start with one of `prefixes` from a
    /// checkpoint directory; the rest stay randomly initialised.
    Checkpoint {
        path: PathBuf,
        #[serde(default = "decoder_prefixes")]
        prefixes: Vec<String>,
    },
}

fn decoder_prefixes() -> Vec<String> {
    vec!["decoder.".into()]
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub provider: ProviderSpec,
    pub learning_rate: f64,
    pub epochs: usize,
    pub frames_per_batch: usize,
    pub seed: u64,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub init: InitMode,
    pub deterministic: bool,
    /// Global gradient-norm limit; `null` disables clipping.
    pub grad_clip: Option<f64>,
    /// Held-out evaluation period in steps; 0 evaluates only after each epoch.
    pub eval_every: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Stop once held-out J_M reaches this value.
    pub stop_at_j: Option<f64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub threshold: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            provider: ProviderSpec::default(),
            learning_rate: 5e-5,
            epochs: 30,
            frames_per_batch: 16,
            seed: 0,
            train_dir: None,
            val_dir: None,
            init: InitMode::Random,
            deterministic: false,
            grad_clip: Some(1.0),
            eval_every: 0,
            max_steps: None,
            stop_at_j: None,
            checkpoint_dir: None,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.frames_per_batch < 2 {
            return Err(Error::Config("frames_per_batch must be >= 2".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.frames_per_batch > self.model.decoder.max_frames {
            return Err(Error::Config(format!(
                "frames_per_batch {} exceeds decoder max_frames {}",
                self.frames_per_batch, self.model.decoder.max_frames
            )));
        }
        if let ProviderSpec::Synthetic { noise, .. } = self.provider {
            if !(noise >= 0.0) {
                return Err(Error::Config(format!("provider noise must be >= 0, got {noise}")));
            }
        }
        Ok(())
    }
}

/// `k` frame indices at stride `max(1, round(L / k))` starting at `phase`,
/// wrapping around the sequence end.
pub fn sample_frames(len: usize, k: usize, phase: usize) -> Vec<usize> {
    let step = ((len as f64 / k as f64).round() as usize).max(1);
    (0..k).map(|i| (phase + i * step) % len.max(1)).collect()
}

pub fn sampling_step(len: usize, k: usize) -> usize {
    ((len as f64 / k as f64).round() as usize).max(1)
}

/// Crops the largest centred square and resizes it to `size x size`.
/// Frames use bilinear filtering, masks and surface ids nearest neighbour,
/// flow vectors are resampled bilinearly and rescaled.
pub fn center_crop_resize(seq: &FrameSequence, size: usize) -> Result<FrameSequence> {
    let (w, h) = (seq.width(), seq.height());
    if (w, h) == (size, size) {
        return Ok(seq.clone());
    }
    let side = w.min(h);
    if side == 0 || size == 0 {
        return Err(Error::Data(format!("cannot resize empty sequence `{}`", seq.name)));
    }
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let scale = size as f64 / side as f64;
    let s = size as u32;
    let frames = seq
        .frames
        .iter()
        .map(|f| imageops::resize(&imageops::crop_imm(f, x0 as u32, y0 as u32, side as u32, side as u32).to_image(), s, s, FilterType::Triangle))
        .collect();
    let nearest = |values: &[u8]| -> Vec<u8> {
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            let sy = y0 + (((y as f64 + 0.5) / scale) as usize).min(side - 1);
            for x in 0..size {
                let sx = x0 + (((x as f64 + 0.5) / scale) as usize).min(side - 1);
                out.push(values[sy * w + sx]);
            }
        }
        out
    };
    let gt_masks = match &seq.gt_masks {
        Some(ms) => Some(ms.iter().map(|m| BinaryMask::new(size, size, nearest(m.values()))).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let surfaces = seq.surfaces.as_ref().map(|ss| ss.iter().map(|s| nearest(s)).collect());
    let taps = crate::diffcore::kernels::resize_taps(side, size);
    let flows = seq
        .flows
        .iter()
        .map(|f| {
            let mut out = FlowField::zeros(size, size);
            for (y, ty) in taps.iter().enumerate() {
                for (x, tx) in taps.iter().enumerate() {
                    let mut uv = [0.0f64; 2];
                    for (yi, wy) in [(ty.i0, ty.w0), (ty.i1, ty.w1)] {
                        for (xi, wx) in [(tx.i0, tx.w0), (tx.i1, tx.w1)] {
                            let (u, v) = f.get(x0 + xi, y0 + yi);
                            uv[0] += wy * wx * u as f64;
                            uv[1] += wy * wx * v as f64;
                        }
                    }
                    out.set(x, y, (uv[0] * scale) as f32, (uv[1] * scale) as f32);
                }
            }
            out
        })
        .collect();
    let camera = seq.camera.as_ref().map(|c| c.iter().map(|t| [t[0] * scale, t[1] * scale]).collect());
    let out = FrameSequence {
        name: seq.name.clone(),
        frames,
        flows,
        gt_masks,
        camera,
        surfaces,
    };
    out.validate()?;
    Ok(out)
}

/// A sequence resized to the model resolution with its frozen tokens.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seq: FrameSequence,
    pub bundle: GeometryBundle,
    /// One flow per frame.
    pub flows: Vec<FlowField>,
}

impl Prepared {
    pub fn new(seq: &FrameSequence, model: &ModelConfig, provider: &ProviderSpec) -> Result<Self> {
        seq.validate()?;
        let seq = center_crop_resize(seq, model.image_size)?;
        let bundle = provide(&seq, provider, &model.token_dims()?)?;
        let flows = if seq.flows.len() == seq.len() { seq.flows.clone() } else { last_frame_flow(&seq.flows)? };
        Ok(Self { seq, bundle, flows })
    }

    pub fn masks(&self) -> Result<&[BinaryMask]> {
        self.seq
            .gt_masks
            .as_deref()
            .ok_or_else(|| Error::Data(format!("sequence `{}` has no ground-truth masks", self.seq.name)))
    }

    pub fn clip(&self, indices: &[usize]) -> Clip {
        Clip::select(&self.bundle, &self.flows, indices)
    }
}

pub fn prepare_all(seqs: &[FrameSequence], cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    seqs.iter().map(|s| Prepared::new(s, &cfg.model, &cfg.provider)).collect()
}

/// Adam with bias correction (`β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore<f32>) -> Self {
        let zeros = |p: &ParamStore<f32>| {
            let mut s = ParamStore::new();
            for (k, t) in p.iter() {
                s.insert(k.clone(), Tensor::zeros(t.shape())).expect("unique names");
            }
            s
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[(String, Tensor<f32>)]) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            let iter = p.data_mut().iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut()).zip(g.data());
            for (((pv, mv), vv), &gv) in iter {
                let gv = gv as f64;
                let mn = self.beta1 * *mv as f64 + (1.0 - self.beta1) * gv;
                let vn = self.beta2 * *vv as f64 + (1.0 - self.beta2) * gv * gv;
                *mv = mn as f32;
                *vv = vn as f32;
                let update = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *pv = (*pv as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `limit`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [(String, Tensor<f32>)], limit: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let s = (limit / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub j_m: f64,
    pub f_m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub step_seconds: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    /// First evaluated step whose held-out J_M reached `stop_at_j`.
    pub steps_to_target: Option<usize>,
    pub final_checkpoint: Option<PathBuf>,
    pub final_eval: Option<SegReport>,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    /// First evaluated step with J_M at or above `target`.
    pub fn first_step_reaching(&self, target: f64) -> Option<usize> {
        self.evals.iter().find(|e| e.j_m >= target).map(|e| e.step)
    }

    pub fn best_j(&self) -> f64 {
        self.evals.iter().map(|e| e.j_m).fold(0.0, f64::max)
    }

    /// Per-step losses; `timing` adds the wall-clock column, which differs
    /// between otherwise identical runs.
    pub fn write_loss_csv(&self, path: impl AsRef<Path>, timing: bool) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let rec = |w: &mut csv::Writer<std::fs::File>, r: &[String]| w.write_record(r).map_err(|e| Error::Format(e.to_string()));
        let mut header = vec!["step".to_string(), "loss".to_string()];
        if timing {
            header.push("seconds".into());
        }
        rec(&mut w, &header)?;
        for (i, l) in self.losses.iter().enumerate() {
            let mut r = vec![(i + 1).to_string(), l.to_string()];
            if timing {
                r.push(self.step_seconds.get(i).map_or(String::new(), |s| s.to_string()));
            }
            rec(&mut w, &r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_eval_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        w.write_record(["step", "J_M", "F_M"]).map_err(|e| Error::Format(e.to_string()))?;
        for e in &self.evals {
            w.write_record([e.step.to_string(), e.j_m.to_string(), e.f_m.to_string()])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scores a model on prepared sequences (all frames, default tolerance).
pub fn evaluate(model: &Model, seqs: &[Prepared], threshold: f32) -> Result<SegReport> {
    let mut scores = Vec::with_capacity(seqs.len());
    for p in seqs {
        let all: Vec<usize> = (0..p.seq.len()).collect();
        let masks = model.predict(&[p.clip(&all)])?.remove(0);
        let preds: Vec<BinaryMask> = masks.iter().map(|m| m.binarize(threshold)).collect();
        scores.push(score_sequence(&p.seq.name, &preds, p.masks()?, None)?);
    }
    Ok(SegReport::from_sequences(scores))
}

/// Optimizer state that, with the config, fully determines the rest of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
}

impl TrainState {
    pub fn fresh(model: Model, lr: f64) -> Self {
        let adam = Adam::new(lr, &model.params);
        Self { model, adam, step: 0 }
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let mut ckpt = self.model.to_checkpoint()?;
        ckpt.tensors.extend(self.adam.m.to_tensor_files(ADAM_M_PREFIX));
        ckpt.tensors.extend(self.adam.v.to_tensor_files(ADAM_V_PREFIX));
        ckpt.meta = serde_json::json!({
            "model": self.model.config,
            "version": crate::VERSION,
            "seed": cfg.seed,
            "step": self.step,
            "adam_t": self.adam.t,
            "train": cfg,
        });
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, lr: f64) -> Result<Self> {
        let model = Model::from_checkpoint(ckpt)?;
        let step = ckpt.meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let t = ckpt.meta.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(step as u64);
        let mut adam = Adam::new(lr, &model.params);
        if ckpt.tensors.keys().any(|k| k.starts_with(ADAM_M_PREFIX)) {
            adam.m = ParamStore::from_checkpoint(ckpt, ADAM_M_PREFIX)?;
            adam.v = ParamStore::from_checkpoint(ckpt, ADAM_V_PREFIX)?;
        }
        adam.t = t;
        Ok(Self { model, adam, step })
    }

    pub fn save(&self, cfg: &TrainConfig, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(cfg)?, dir)
    }

    pub fn load(dir: impl AsRef<Path>, lr: f64) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(dir)?, lr)
    }
}

/// Builds the starting model for `cfg.init`.
pub fn initial_model(cfg: &TrainConfig) -> Result<Model> {
    let mut model = Model::init(cfg.model, cfg.seed)?;
    if let InitMode::Checkpoint { path, prefixes } = &cfg.init {
        let src = Model::load(path)?;
        let prefixes: Vec<&str> = prefixes.iter().map(String::as_str).collect();
        let n = model.params.load_from(&src.params, &prefixes).map_err(|e| match e {
            Error::Shape { .. } => e,
            other => Error::Config(format!("initial checkpoint {}: {other}", path.display())),
        })?;
        if n == 0 {
            return Err(Error::Config(format!("initial checkpoint {} matched no parameters", path.display())));
        }
    }
    Ok(model)
}

/// Sequence order and sampling phases of one epoch.
fn epoch_plan(cfg: &TrainConfig, train: &[Prepared], epoch: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, epoch as u64, 0x7261_696e]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|i| {
            let step = sampling_step(train[i].seq.len(), cfg.frames_per_batch);
            (i, rng.random_range(0..step))
        })
        .collect()
}

/// One optimizer step on one clip; returns the loss before the update.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, clip: &Clip, masks: &[BinaryMask]) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let p = state.model.params.bind(&mut g, "");
    let probs = forward_graph(&mut g, &p, &state.model.config, std::slice::from_ref(clip))?;
    let loss = total_loss_graph(&mut g, probs, masks, &cfg.loss)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Divergence { step: state.step + 1, loss: value });
    }
    g.backward(loss)?;
    let mut grads = g.param_grads();
    if grads.iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::Divergence { step: state.step + 1, loss: value });
    }
    if let Some(limit) = cfg.grad_clip {
        clip_global_norm(&mut grads, limit);
    }
    state.adam.lr = cfg.learning_rate;
    state.adam.step(&mut state.model.params, &grads)?;
    state.step += 1;
    Ok(value)
}

/// Runs (or continues) training from `state` until the configured number of
/// epochs, `max_steps`, or the J_M target is reached.
pub fn train_from(mut state: TrainState, cfg: &TrainConfig, train: &[Prepared], val: &[Prepared]) -> Result<(TrainState, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training sequences".into()));
    }
    let per_epoch = train.len();
    let mut total = cfg.epochs * per_epoch;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    let mut report = TrainReport::default();
    let evaluate_now = |state: &TrainState, report: &mut TrainReport| -> Result<bool> {
        if val.is_empty() {
            return Ok(false);
        }
        let r = evaluate(&state.model, val, cfg.threshold)?;
        report.evals.push(EvalPoint { step: state.step, j_m: r.j_m, f_m: r.f_m });
        let hit = cfg.stop_at_j.is_some_and(|t| r.j_m >= t);
        if hit && report.steps_to_target.is_none() {
            report.steps_to_target = Some(state.step);
        }
        report.final_eval = Some(r);
        Ok(hit)
    };
    let mut plan = Vec::new();
    let mut plan_epoch = usize::MAX;
    while state.step < total {
        let epoch = state.step / per_epoch;
        if epoch != plan_epoch {
            plan = epoch_plan(cfg, train, epoch);
            plan_epoch = epoch;
        }
        let (seq_idx, phase) = plan[state.step % per_epoch];
        let prepared = &train[seq_idx];
        let indices = sample_frames(prepared.seq.len(), cfg.frames_per_batch, phase);
        let clip = prepared.clip(&indices);
        let all_masks = prepared.masks()?;
        let masks: Vec<BinaryMask> = indices.iter().map(|&i| all_masks[i].clone()).collect();
        let start = Instant::now();
        let loss = train_step(&mut state, cfg, &clip, &masks)?;
        report.losses.push(loss);
        report.step_seconds.push(start.elapsed().as_secs_f64());

        let epoch_end = state.step.is_multiple_of(per_epoch);
        if epoch_end {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("epoch_{:04}", state.step / per_epoch));
                state.save(cfg, &path)?;
                report.final_checkpoint = Some(path);
            }
        }
        let periodic = cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every);
        if (periodic || epoch_end || state.step == total) && evaluate_now(&state, &mut report)? {
            break;
        }
    }
    Ok((state, report))
}

/// Fresh run from `cfg.init`.
pub fn train(cfg: &TrainConfig, train: &[Prepared], val: &[Prepared]) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let state = TrainState::fresh(initial_model(cfg)?, cfg.learning_rate);
    let (state, report) = train_from(state, cfg, train, val)?;
    Ok((state.model, report))
}

/// Loads `train_dir` / `val_dir` and trains.
pub fn train_from_dirs(cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let train_dir = cfg.train_dir.as_ref().ok_or_else(|| Error::Config("train_dir is required".into()))?;
    let tr = prepare_all(&load_dataset(train_dir)?, cfg)?;
    let va = match &cfg.val_dir {
        Some(d) => prepare_all(&load_dataset(d)?, cfg)?,
        None => Vec::new(),
    };
    train(cfg, &tr, &va)
}

/// Random-init run, plus (when `checkpoint` is given) an otherwise identical
/// run whose decoder starts from the checkpoint.
pub fn init_experiment(
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    train_set: &[Prepared],
    val: &[Prepared],
) -> Result<(TrainReport, Option<TrainReport>)> {
    let base = TrainConfig { init: InitMode::Random, ..cfg.clone() };
    let (_, random) = train(&base, train_set, val)?;
    let warm = match checkpoint {
        Some(path) => {
            let c = TrainConfig {
                init: InitMode::Checkpoint { path: path.to_path_buf(), prefixes: decoder_prefixes() },
                ..cfg.clone()
            };
            Some(train(&c, train_set, val)?.1)
        }
        None => None,
    };
    Ok((random, warm))
}
