//! Two-phase training: backbone pretraining on clips, then adapter training
//! on image edit pairs with the backbone frozen.

pub mod adam;
pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::DiTConfig;
use crate::data::corpus::CLIP_FRAMES;
use crate::data::{EditPairSample, VideoClip};
use crate::error::{Error, Result};
use crate::flow::{encode_pixels, fm_loss, interpolate_rows, LossRegion};
use crate::model::{EditInput, Model};
use crate::params::GradMode;
use crate::predict_update::AblationMode;
use crate::prompt::PromptTokens;
use crate::rng::{item_stream, stream, streams, RngState};
use crate::tensor::{Graph, Tensor};

pub use adam::{adam_step, Adam, AdamHyper};
pub use checkpoint::{Checkpoint, Moments, NamedTensor};
pub use config::{Phase, TrainConfig};

/// Steps averaged at each end of the loss curve.
pub const SMOOTHING_WINDOW: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    /// Training loss of this step; absent for the pre-training evaluation.
    pub loss: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_range: Option<(f32, f32)>,
}

/// Model, optimizer and sampling state of one training phase.
#[derive(Clone, Debug)]
pub struct Session {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub frozen_digests: BTreeMap<String, String>,
    /// Loss of every step, in order.
    pub losses: Vec<f32>,
    pub log: Vec<LogEntry>,
}

fn hyper(c: &TrainConfig) -> AdamHyper {
    AdamHyper {
        lr: c.learning_rate,
        beta1: c.betas.0,
        beta2: c.betas.1,
        eps: c.eps,
    }
}

fn phase_stream(p: Phase) -> u64 {
    match p {
        Phase::Pretrain => streams::PRETRAIN,
        Phase::EditTrain => streams::EDIT_TRAIN,
    }
}

impl Session {
    pub fn new(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        match (config.phase, model.mode()) {
            (Phase::Pretrain, Some(_)) => return Err(Error::Config("pretraining expects a bare backbone".into())),
            (Phase::EditTrain, None) => return Err(Error::Config("edit training needs an attached adapter".into())),
            (Phase::EditTrain, Some(m)) if m != config.ablation => {
                return Err(Error::Config(format!(
                    "model mode {m} differs from configured {}",
                    config.ablation
                )))
            }
            _ => {}
        }
        let adam = Adam::new(&model.store, model.store.trainable_ids(), hyper(&config));
        Ok(Self {
            rng: stream(config.seed, phase_stream(config.phase)),
            frozen_digests: model.store.frozen_digests(),
            config,
            model,
            adam,
            step: 0,
            losses: Vec::new(),
            log: Vec::new(),
        })
    }

    /// Snapshot of the training state. The save path is not part of it.
    pub fn checkpoint(&self) -> Checkpoint {
        let tensors = self
            .model
            .store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                trainable: p.trainable,
                value: p.value.clone(),
            })
            .collect();
        let moments = self
            .adam
            .ids
            .iter()
            .enumerate()
            .map(|(i, &id)| Moments {
                name: self.model.store.get(id).name.clone(),
                m: self.adam.m[i].clone(),
                v: self.adam.v[i].clone(),
            })
            .collect();
        Checkpoint {
            config: TrainConfig {
                checkpoint: None,
                ..self.config.clone()
            },
            dit: self.model.cfg().clone(),
            mode: self.model.mode(),
            step: self.step,
            adam_t: self.adam.t,
            rng: RngState::capture(&self.rng),
            frozen_digests: self.frozen_digests.clone(),
            log: self.log.clone(),
            losses: self.losses.clone(),
            tensors,
            moments,
        }
    }

    /// Continues exactly where `ck` stopped.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let model = model_from_checkpoint(ck)?;
        let mut s = Session::new(ck.config.clone(), model)?;
        if s.frozen_digests != ck.frozen_digests {
            return Err(Error::FrozenParamDrift(
                "checkpoint frozen tensors differ from their recorded digests".into(),
            ));
        }
        if ck.moments.len() != s.adam.ids.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} moment pairs for {} trainable tensors",
                ck.moments.len(),
                s.adam.ids.len()
            )));
        }
        for (i, mo) in ck.moments.iter().enumerate() {
            let id = s.adam.ids[i];
            let p = s.model.store.get(id);
            if p.name != mo.name || mo.m.shape() != p.value.shape() || mo.v.shape() != p.value.shape() {
                return Err(Error::IncompatibleShapes {
                    name: mo.name.clone(),
                    expected: p.value.shape().to_vec(),
                    actual: mo.m.shape().to_vec(),
                });
            }
            s.adam.m[i] = mo.m.clone();
            s.adam.v[i] = mo.v.clone();
        }
        s.adam.t = ck.adam_t;
        s.step = ck.step;
        s.rng = ck.rng.restore();
        s.log = ck.log.clone();
        s.losses = ck.losses.clone();
        Ok(s)
    }

    /// Fails with `FrozenParamDrift` if any frozen tensor changed.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.model.store.frozen_digests();
        if now == self.frozen_digests {
            return Ok(());
        }
        let changed: Vec<&String> = self
            .frozen_digests
            .iter()
            .filter(|(k, v)| now.get(*k) != Some(v))
            .map(|(k, _)| k)
            .collect();
        Err(Error::FrozenParamDrift(format!("{changed:?}")))
    }

    fn save_if_configured(&self) -> Result<()> {
        match &self.config.checkpoint {
            Some(p) => self.checkpoint().save(p),
            None => Ok(()),
        }
    }

    /// Backward and optimizer update for a scalar loss on `g`.
    fn apply(&mut self, g: &Graph<f32>, p: &crate::params::Bound, loss: crate::tensor::Var) -> Result<f32> {
        let value = g.value(loss).item();
        if !value.is_finite() {
            self.save_if_configured()?;
            return Err(Error::NonFiniteLoss(self.step));
        }
        let grads = g.backward(loss)?;
        let per_param: Vec<Option<&Tensor>> = self.adam.ids.iter().map(|&id| grads.get(p[id])).collect();
        self.adam.step(&mut self.model.store, &per_param)?;
        self.step += 1;
        self.losses.push(value);
        Ok(value)
    }
}

/// Rebuilds the model structure recorded in `ck` and loads its tensors.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let mut model = Model::new_backbone(ck.dit.clone(), &mut stream(0, 0))?;
    if let Some(mode) = ck.mode {
        model.attach(mode, &mut stream(0, 0))?;
    }
    let by_name: BTreeMap<&str, &NamedTensor> = ck.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if by_name.len() != model.store.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} tensors for a model with {}",
            by_name.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.get(id).name.clone();
        let t = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
        let want = model.store.value(id).shape().to_vec();
        if t.value.shape() != want.as_slice() {
            return Err(Error::IncompatibleShapes {
                name,
                expected: want,
                actual: t.value.shape().to_vec(),
            });
        }
        *model.store.value_mut(id) = t.value.clone();
    }
    Ok(model)
}

/// Loads a pretrained backbone and attaches fresh modules in `mode`.
pub fn attach_and_inherit(ck: &Checkpoint, mode: AblationMode, seed: u64) -> Result<Model> {
    if ck.mode.is_some() {
        return Err(Error::Config("checkpoint already carries an adapter".into()));
    }
    let mut model = model_from_checkpoint(ck)?;
    model.attach(mode, &mut stream(seed, streams::ADAPTER_INIT))?;
    Ok(model)
}

/// The model an edit checkpoint started from: its backbone with freshly
/// attached modules, which is exactly the trained model at step 0.
pub fn zero_init_baseline(ck: &Checkpoint) -> Result<Model> {
    let mode = ck
        .mode
        .ok_or_else(|| Error::Config("checkpoint has no adapter; train one with train-edit".into()))?;
    let backbone = Checkpoint {
        mode: None,
        tensors: ck
            .tensors
            .iter()
            .filter(|t| t.name.starts_with(crate::backbone::PREFIX))
            .cloned()
            .collect(),
        moments: Vec::new(),
        ..ck.clone()
    };
    attach_and_inherit(&backbone, mode, ck.config.seed)
}

fn stack_frames(parts: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(parts)
}

/// Flow-matching loss of the bare backbone on clips `[B, F, C, S, S]`.
fn clip_batch_loss(
    model: &Model,
    g: &mut Graph<f32>,
    p: &crate::params::Bound,
    x1: &Tensor,
    prompts: &[PromptTokens],
    times: &[f64],
    x0: &Tensor,
) -> Result<crate::tensor::Var> {
    let (xt, u) = interpolate_rows(x0, x1, times)?;
    let v = model.backbone_forward(g, p, &xt, times, prompts)?;
    fm_loss(g, v, &u, LossRegion::All)
}

/// Held-out flow-matching loss with noise and times fixed by `seed`.
pub fn heldout_loss(model: &Model, clips: &[VideoClip], seed: u64) -> Result<f64> {
    const DRAWS: u64 = 2;
    let (mut total, mut count) = (0.0f64, 0usize);
    for &f in &CLIP_FRAMES {
        let idx: Vec<usize> = (0..clips.len()).filter(|&i| clips[i].frames.shape()[0] == f).collect();
        if idx.is_empty() {
            continue;
        }
        for d in 0..DRAWS {
            let mut frames = Vec::with_capacity(idx.len());
            let (mut x0s, mut times, mut prompts) = (Vec::new(), Vec::new(), Vec::new());
            for &i in &idx {
                let mut rng = item_stream(seed, streams::HELDOUT_NOISE, i as u64 * DRAWS + d);
                let x1 = encode_pixels(&clips[i].frames);
                times.push(rng.random::<f64>());
                x0s.push(Tensor::randn(x1.shape().to_vec(), 1.0, &mut rng));
                frames.push(x1);
                prompts.push(clips[i].caption.clone());
            }
            let x1 = stack_frames(&frames.iter().collect::<Vec<_>>())?;
            let x0 = stack_frames(&x0s.iter().collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let p = model.bind(&mut g, GradMode::None);
            let l = clip_batch_loss(model, &mut g, &p, &x1, &prompts, &times, &x0)?;
            let n = x1.len();
            total += g.value(l).item() as f64 * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::Config("no held-out clips".into()));
    }
    Ok(total / count as f64)
}

/// One pretraining step; step `k` trains on clips of `CLIP_FRAMES[k % 4]` frames.
pub fn pretrain_step(s: &mut Session, clips: &[VideoClip]) -> Result<f32> {
    let frames = CLIP_FRAMES[s.step as usize % CLIP_FRAMES.len()];
    let pool: Vec<usize> = (0..clips.len())
        .filter(|&i| clips[i].frames.shape()[0] == frames)
        .collect();
    if pool.is_empty() {
        return Err(Error::Config(format!("no {frames}-frame clips to train on")));
    }
    let b = s.config.batch_size;
    let mut x1s = Vec::with_capacity(b);
    let mut prompts = Vec::with_capacity(b);
    for _ in 0..b {
        let i = pool[s.rng.random_range(0..pool.len())];
        x1s.push(encode_pixels(&clips[i].frames));
        prompts.push(clips[i].caption.clone());
    }
    let times: Vec<f64> = (0..b).map(|_| s.rng.random::<f64>()).collect();
    let x1 = stack_frames(&x1s.iter().collect::<Vec<_>>())?;
    let x0 = Tensor::randn(x1.shape().to_vec(), 1.0, &mut s.rng);
    let mut g = Graph::new();
    let p = s.model.bind(&mut g, GradMode::Trainable);
    let l = clip_batch_loss(&s.model, &mut g, &p, &x1, &prompts, &times, &x0)?;
    s.apply(&g, &p, l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_heldout: f64,
    pub final_heldout: f64,
    pub steps: u64,
}

impl PretrainReport {
    pub fn drop_fraction(&self) -> f64 {
        1.0 - self.final_heldout / self.initial_heldout
    }
}

/// Runs pretraining to `config.steps`, logging held-out loss at each
/// `log_every` boundary and at the end.
pub fn pretrain_backbone(s: &mut Session, clips: &[VideoClip], heldout: &[VideoClip]) -> Result<PretrainReport> {
    if s.config.phase != Phase::Pretrain {
        return Err(Error::Config("pretrain_backbone needs phase pretrain".into()));
    }
    let seed = s.config.seed;
    if s.step == 0 {
        let initial = heldout_loss(&s.model, heldout, seed)?;
        s.log.push(LogEntry {
            step: 0,
            loss: None,
            heldout: Some(initial),
            gate_range: None,
        });
    }
    let total = s.config.steps as u64;
    while s.step < total {
        let loss = pretrain_step(s, clips)?;
        let heldout_due = s.step.is_multiple_of(s.config.heldout_every as u64) || s.step == total;
        if heldout_due || s.step.is_multiple_of(s.config.log_every as u64) {
            let heldout = if heldout_due {
                Some(heldout_loss(&s.model, heldout, seed)?)
            } else {
                None
            };
            s.log.push(LogEntry {
                step: s.step,
                loss: Some(loss),
                heldout,
                gate_range: None,
            });
            s.save_if_configured()?;
        }
    }
    let evals: Vec<f64> = s.log.iter().filter_map(|e| e.heldout).collect();
    let (Some(&first), Some(&last)) = (evals.first(), evals.last()) else {
        return Err(Error::Config("pretraining log has no held-out evaluation".into()));
    };
    Ok(PretrainReport {
        initial_heldout: first,
        final_heldout: last,
        steps: s.step,
    })
}

/// Optimizer steps in one pass over `n` pairs.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Pair indices of step `step`: epoch-wise shuffles keyed by `(seed, epoch)`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let spe = steps_per_epoch(n, batch) as u64;
    let (epoch, within) = (step / spe, (step % spe) as usize);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut item_stream(seed, streams::EDIT_TRAIN, epoch));
    order[within * batch..((within + 1) * batch).min(n)].to_vec()
}

/// Stacked pixels of a batch of pairs, encoded: `(source, target)` as
/// `[B, 1, C, S, S]`.
pub fn pair_tensors(pairs: &[&EditPairSample]) -> Result<(Tensor, Tensor)> {
    let one = |t: &Tensor| -> Result<Tensor> {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        encode_pixels(t).reshape(s)
    };
    let src: Vec<Tensor> = pairs.iter().map(|p| one(&p.src_image)).collect::<Result<_>>()?;
    let tgt: Vec<Tensor> = pairs.iter().map(|p| one(&p.edit_image)).collect::<Result<_>>()?;
    Ok((
        Tensor::stack(&src.iter().collect::<Vec<_>>())?,
        Tensor::stack(&tgt.iter().collect::<Vec<_>>())?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditStep {
    pub loss: f32,
    /// Smallest and largest learned gate value seen in this step.
    pub gate_range: Option<(f32, f32)>,
}

/// One phase-2 step: clean source at t=1, noised target, target-only loss.
pub fn edit_step(s: &mut Session, data: &[EditPairSample]) -> Result<EditStep> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Config("no training pairs".into()));
    }
    let idx = batch_indices(n, s.config.batch_size, s.config.seed, s.step);
    let pairs: Vec<&EditPairSample> = idx.iter().map(|&i| &data[i]).collect();
    let (source, x1) = pair_tensors(&pairs)?;
    let b = pairs.len();
    let times: Vec<f64> = (0..b).map(|_| s.rng.random::<f64>()).collect();
    let x0 = Tensor::randn(x1.shape().to_vec(), 1.0, &mut s.rng);
    let (xt, u) = interpolate_rows(&x0, &x1, &times)?;
    let src_prompts: Vec<PromptTokens> = pairs.iter().map(|p| p.src_prompt.clone()).collect();
    let edit_prompts: Vec<PromptTokens> = pairs.iter().map(|p| p.edit_prompt.clone()).collect();

    let mut g = Graph::new();
    let p = s.model.bind(&mut g, GradMode::Trainable);
    let input = EditInput {
        source: &source,
        target: &xt,
        times: &times,
        src_prompts: &src_prompts,
        edit_prompts: &edit_prompts,
    };
    let (v, taps) = s.model.edit_forward(&mut g, &p, &input)?;
    // Source rows of the velocity target are never read under the mask.
    let u_stacked = Tensor::concat(&[&Tensor::zeros(u.shape().to_vec()), &u], 0)?;
    let loss = fm_loss(&mut g, v, &u_stacked, LossRegion::TargetStream)?;

    let learned_gate = matches!(s.model.mode(), Some(AblationMode::Full | AblationMode::NaiveParallel2D));
    let gate_range = if learned_gate {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for t in &taps {
            if let Some(gv) = t.gate {
                for &x in g.value(gv).data() {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
        }
        if !(lo > 0.0 && hi < 1.0) {
            return Err(Error::Domain(format!("gate left (0, 1): [{lo}, {hi}]")));
        }
        Some((lo, hi))
    } else {
        None
    };
    let loss = s.apply(&g, &p, loss)?;
    Ok(EditStep { loss, gate_range })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditTrainReport {
    pub steps: u64,
    pub initial_window: f64,
    pub final_window: f64,
    pub window: usize,
}

impl EditTrainReport {
    pub fn ratio(&self) -> f64 {
        self.final_window / self.initial_window
    }
}

/// Mean of the first and last `window` losses.
pub fn smoothed_ends(losses: &[f32], window: usize) -> (f64, f64, usize) {
    let w = window.min(losses.len() / 2).max(1).min(losses.len().max(1));
    let mean = |xs: &[f32]| xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len().max(1) as f64;
    (
        mean(&losses[..w.min(losses.len())]),
        mean(&losses[losses.len().saturating_sub(w)..]),
        w,
    )
}

/// Total phase-2 steps for the configured epochs over `n` pairs.
pub fn edit_total_steps(c: &TrainConfig, n: usize) -> u64 {
    (c.epochs * steps_per_epoch(n, c.batch_size)) as u64
}

/// Trains to `until` (default: the configured epochs). Frozen digests are
/// re-verified at every logged step and at the end.
pub fn train_edit(s: &mut Session, data: &[EditPairSample], until: Option<u64>) -> Result<EditTrainReport> {
    if s.config.phase != Phase::EditTrain {
        return Err(Error::Config("train_edit needs phase edit-train".into()));
    }
    let data = match s.config.max_pairs {
        Some(m) => &data[..m.min(data.len())],
        None => data,
    };
    if data.iter().any(|p| p.src_image.rank() != 3) {
        return Err(Error::Config("edit pairs must be single images".into()));
    }
    let end = edit_total_steps(&s.config, data.len());
    let stop = until.unwrap_or(end);
    s.verify_frozen()?;
    while s.step < stop {
        let st = edit_step(s, data)?;
        if s.step.is_multiple_of(s.config.log_every as u64) || s.step == end {
            s.verify_frozen()?;
            s.log.push(LogEntry {
                step: s.step,
                loss: Some(st.loss),
                heldout: None,
                gate_range: st.gate_range,
            });
            s.save_if_configured()?;
        }
    }
    s.verify_frozen()?;
    let (initial_window, final_window, window) = smoothed_ends(&s.losses, SMOOTHING_WINDOW);
    Ok(EditTrainReport {
        steps: s.step,
        initial_window,
        final_window,
        window,
    })
}

/// Result of training one ablation mode.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub mode: AblationMode,
    pub backbone_digest: String,
    pub session: Session,
    pub report: EditTrainReport,
}

/// Trains every mode from the same backbone checkpoint, seed and data.
pub fn run_ablation(
    backbone: &Checkpoint,
    config: &TrainConfig,
    data: &[EditPairSample],
    modes: &[AblationMode],
) -> Result<Vec<AblationRun>> {
    modes
        .iter()
        .map(|&mode| {
            let model = attach_and_inherit(backbone, mode, config.seed)?;
            let backbone_digest = backbone_digest(&model);
            let cfg = TrainConfig {
                ablation: mode,
                checkpoint: None,
                ..config.clone()
            };
            let mut session = Session::new(cfg, model)?;
            let report = train_edit(&mut session, data, None)?;
            Ok(AblationRun {
                mode,
                backbone_digest,
                session,
                report,
            })
        })
        .collect()
}

/// Digest over all backbone tensors.
pub fn backbone_digest(model: &Model) -> String {
    let joined: String = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with(crate::backbone::PREFIX))
        .map(|(id, p)| format!("{}={};", p.name, model.store.digest(id)))
        .collect();
    crate::params::sha256_hex(joined.as_bytes())
}

/// Fresh pretraining session with a randomly initialized backbone.
pub fn new_pretrain_session(dit: DiTConfig, config: TrainConfig) -> Result<Session> {
    let model = Model::new_backbone(dit, &mut stream(config.seed, streams::BACKBONE_INIT))?;
    Session::new(config, model)
}
