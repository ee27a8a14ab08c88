//! Training loop with key-frame rotation, pseudo-labeling and the temporal
//! perturbation gate, plus inductive inference.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, HyperParams, ModelConfig};
use crate::domain::{key_frame_position, positive_class_weights, AuLabels, ClipSample, RunState};
use crate::error::{Error, Result};
use crate::evaluation::{f1_scores, F1Report};
use crate::losses::{
    composite_supervised, kl_distill, pseudo_bce_per_clip, semi_gate, ssl_loss, total_loss, weighted_bce,
    LossBreakdown, LossTerms, PROB_EPS,
};
use crate::models::params::ParamStore;
use crate::models::{checkpoint, permute_tokens, KnowledgeSpreader};
use crate::synthdata::{clip_at, labeled_anchors, sample_sparse_labels, LabeledCorpus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TplVerdict {
    Accepted,
    Rejected,
    /// Before the gate's start epoch; pseudo labels are never used.
    Inactive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub clip_id: usize,
    pub position: usize,
    pub y_hat: AuLabels,
    pub confidences: Vec<f64>,
    pub tpl_verdict: TplVerdict,
    /// Audit only; never used for supervision.
    pub ground_truth: Option<AuLabels>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Thresholds each student logit row at probability 0.5, ties going to 1.
pub fn generate_pseudo_labels(student_logits: &[Vec<f64>]) -> Vec<(AuLabels, Vec<f64>)> {
    student_logits
        .iter()
        .map(|row| {
            let conf: Vec<f64> = row.iter().map(|&x| sigmoid(x).clamp(PROB_EPS, 1.0 - PROB_EPS)).collect();
            (AuLabels::from_probabilities(&conf), conf)
        })
        .collect()
}

/// Inactive before `start_epoch`; afterwards accepted iff the clip is
/// classified as unperturbed (`sigmoid(logit) < 0.5`).
pub fn tpl_gate(ssl_logit: f64, epoch: usize, start_epoch: usize) -> TplVerdict {
    if epoch < start_epoch {
        TplVerdict::Inactive
    } else if sigmoid(ssl_logit) < 0.5 {
        TplVerdict::Accepted
    } else {
        TplVerdict::Rejected
    }
}

/// A uniformly drawn permutation of `0..n` other than the identity.
pub fn non_identity_permutation<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::config("shuffling needs at least two tokens"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Reorders each clip's per-frame features `[b, n, W]` along time; returns the permutations used.
pub fn shuffle_features<R: Rng>(tokens: &Tensor, rng: &mut R) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let (b, n, _) = tokens.dims3()?;
    let perms = (0..b).map(|_| non_identity_permutation(n, rng)).collect::<Result<Vec<_>>>()?;
    Ok((permute_tokens(tokens, &perms)?, perms))
}

/// Learning rate used during `epoch` (1-based).
pub fn epoch_lr(hp: &HyperParams, epoch: usize) -> f64 {
    if !hp.lr_cosine || hp.epochs == 0 {
        return hp.lr;
    }
    let progress = (epoch.saturating_sub(1)) as f64 / hp.epochs as f64;
    0.5 * hp.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD with classical momentum: `v = mu v + g + wd theta`, `theta -= lr v`.
#[derive(Debug)]
struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    fn new(hp: &HyperParams, params: usize) -> Self {
        Self { lr: hp.lr, momentum: hp.momentum, weight_decay: hp.weight_decay, velocity: vec![None; params] }
    }

    fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        for (i, p) in store.params().iter().enumerate() {
            let Some(g) = grads.get(p.var.as_tensor()) else { continue };
            let theta = p.var.as_tensor().detach();
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (&theta * self.weight_decay)?)?;
            }
            let v = match &self.velocity[i] {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g,
            };
            p.var.set(&(theta - (&v * self.lr)?)?)?;
            self.velocity[i] = Some(v);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Batch counter value this step ran under.
    pub batch: u64,
    /// Clip position of the labeled frame; also the student head that was distilled.
    pub key_pos: Option<usize>,
    pub breakdown: LossBreakdown,
    pub records: Vec<PseudoLabelRecord>,
    pub verdicts: Vec<TplVerdict>,
    /// Each clip's gated share of `L_semi` (sums to `breakdown.l_semi`).
    pub semi_contributions: Vec<f64>,
    /// Ensemble predictions and labels for the key frames.
    pub predictions: Vec<AuLabels>,
    pub targets: Vec<AuLabels>,
}

fn labels_tensor(labels: &[AuLabels], dtype: DType) -> Result<Tensor> {
    let u = labels.first().map_or(0, AuLabels::len);
    let flat: Vec<f32> = labels.iter().flat_map(AuLabels::as_f32).collect();
    Ok(Tensor::from_vec(flat, (labels.len(), u), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Temporal tokens for frame features `[b, n, W]`: student `q`'s hidden
/// layer applied to the frame at position `q`.
///
/// Shuffled clips permute the frame features before this step, so every
/// position keeps its own student and only the frame content moves. Permuting
/// the tokens themselves would let the perturbation head spot which student
/// produced a token instead of judging temporal order.
fn student_tokens(model: &KnowledgeSpreader, features: &Tensor) -> Result<Tensor> {
    let n = features.dim(1)?;
    let hidden = (0..n)
        .map(|q| Ok(model.student(q, &features.narrow(1, q, 1)?.squeeze(1)?, None)?.hidden))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&hidden, 1)?)
}

fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.to_vec1()?)
}

/// Per-clip photometric jitter for branch B: one contrast and brightness
/// draw per clip plus per-pixel noise.
fn augment_clip<R: Rng>(frames: &[&[f32]], rng: &mut R) -> Vec<Vec<f32>> {
    let contrast = rng.random_range(0.8..1.2f32);
    let brightness = rng.random_range(-0.1..0.1f32);
    let noise = Normal::new(0.0f32, 0.03).expect("finite std");
    frames
        .iter()
        .map(|f| f.iter().map(|&v| ((v - 0.5) * contrast + 0.5 + brightness + noise.sample(rng)).clamp(0.0, 1.0)).collect())
        .collect()
}

/// Owns the model, optimizer state and run bookkeeping.
#[derive(Debug)]
pub struct Trainer {
    hp: HyperParams,
    model: KnowledgeSpreader,
    optimizer: Sgd,
    state: RunState,
    rng: ChaCha8Rng,
    weights: Tensor,
}

impl Trainer {
    pub fn new(model: KnowledgeSpreader, hp: HyperParams, positive_weights: Vec<f64>, seed: u64) -> Result<Self> {
        hp.validate()?;
        if hp.clip_len != model.config().clip_len {
            return Err(Error::config("trainer and model disagree on the clip length"));
        }
        if positive_weights.len() != model.config().num_aus {
            return Err(Error::shape("one positive weight per AU is required"));
        }
        let weights = Tensor::new(positive_weights.as_slice(), &candle_core::Device::Cpu)?.to_dtype(model.dtype())?;
        let optimizer = Sgd::new(&hp, model.params().params().len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            hp,
            optimizer,
            state: RunState { epoch: 0, batch_counter: 0, rng_seed: seed, positive_weights },
            model,
            rng,
            weights,
        })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hp
    }

    pub fn model(&self) -> &KnowledgeSpreader {
        &self.model
    }

    pub fn into_model(self) -> KnowledgeSpreader {
        self.model
    }

    /// Starts the next (1-based) epoch.
    pub fn begin_epoch(&mut self) -> usize {
        self.state.epoch += 1;
        self.optimizer.lr = epoch_lr(&self.hp, self.state.epoch);
        self.state.epoch
    }

    /// One optimizer step on a batch of labeled clips that all carry the
    /// key position scheduled for the current batch counter.
    pub fn training_step(&mut self, clips: &[ClipSample]) -> Result<StepOutput> {
        let n = self.model.config().clip_len;
        let batch = self.state.batch_counter;
        let m = key_frame_position(batch, n)?;
        if clips.is_empty() {
            return Err(Error::data("empty training batch"));
        }
        for c in clips {
            if c.key_pos != m {
                return Err(Error::Rotation { batch, expected: m, actual: c.key_pos });
            }
        }
        let out = self.step(clips, Some(m))?;
        self.state.batch_counter += 1;
        Ok(out)
    }

    /// Step on clips without any visible label: only the perturbation and
    /// pseudo-label terms apply and the batch counter does not advance.
    pub fn unlabeled_step(&mut self, clips: &[ClipSample]) -> Result<StepOutput> {
        if clips.is_empty() {
            return Err(Error::data("empty training batch"));
        }
        self.step(clips, None)
    }

    fn step(&mut self, clips: &[ClipSample], key_pos: Option<usize>) -> Result<StepOutput> {
        let cfg = self.model.config().clone();
        let (n, u) = (cfg.clip_len, cfg.num_aus);
        let b = clips.len();
        let epoch = self.state.epoch.max(1);
        let dtype = self.model.dtype();
        for c in clips {
            if c.len() != n {
                return Err(Error::shape(format!("clip of {} frames, model expects {n}", c.len())));
            }
        }
        let targets: Vec<AuLabels> = match key_pos {
            Some(_) => clips
                .iter()
                .map(|c| c.key_label().cloned().ok_or_else(|| Error::data(format!("clip {} has no key label", c.clip_id))))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };

        // Branch B sees augmented frames; pseudo labels come from the clean frames.
        let raw: Vec<&[f32]> = clips.iter().flat_map(|c| c.frames.iter().map(|f| f.image.as_slice())).collect();
        let augmented: Vec<Vec<f32>> = if self.hp.augment {
            raw.chunks(n).flat_map(|clip| augment_clip(clip, &mut self.rng)).collect()
        } else {
            raw.iter().map(|f| f.to_vec()).collect()
        };
        let aug_refs: Vec<&[f32]> = augmented.iter().map(Vec::as_slice).collect();
        let features = self.model.frame_features(&self.model.images_to_tensor(&aug_refs)?, b)?;
        let clean_features = if self.hp.augment {
            self.model.frame_features(&self.model.images_to_tensor(&raw)?, b)?.detach()
        } else {
            features.detach()
        };

        let mut hidden = Vec::with_capacity(n);
        let mut o_k = None;
        let mut noisy = Vec::with_capacity(n);
        let mut clean = Vec::with_capacity(n);
        let mut unlabeled_positions = Vec::with_capacity(n);
        for q in 0..n {
            let f_q = features.narrow(1, q, 1)?.squeeze(1)?;
            let mask = self.model.dropout_mask(&mut self.rng, b, cfg.student_dropout)?;
            let out = self.model.student(q, &f_q, Some(&mask))?;
            hidden.push(out.hidden);
            if Some(q) == key_pos {
                o_k = Some(out.logits);
            } else {
                let c_q = clean_features.narrow(1, q, 1)?.squeeze(1)?;
                clean.push(self.model.student(q, &c_q, None)?.logits.detach());
                noisy.push(out.logits);
                unlabeled_positions.push(q);
            }
        }
        let tokens = Tensor::stack(&hidden, 1)?;
        let pool_pos = key_pos.unwrap_or(n / 2);
        let temporal = self.model.temporal_teacher(&tokens, pool_pos)?;
        let (shuffled, _) = shuffle_features(&features, &mut self.rng)?;
        let shuffled = self.model.temporal_teacher(&student_tokens(&self.model, &shuffled)?, pool_pos)?;

        let zero = Tensor::zeros((), dtype, &candle_core::Device::Cpu)?;
        let (l_skd, l_tkd, l_s, l_t, l_bce, predictions) = match (key_pos, o_k) {
            (Some(_), Some(o_k)) => {
                let y = labels_tensor(&targets, dtype)?;
                let o_a = self.model.spatial_branch(&self.model.images_to_tensor(
                    &clips.iter().map(|c| c.frames[c.key_pos].image.as_slice()).collect::<Vec<_>>(),
                )?)?
                .logits;
                let o_b = &temporal.au_logits;
                let (t, dir, alpha) = (self.hp.temperature, self.hp.kl_direction, self.hp.alpha);
                let l_skd = kl_distill(&o_a, &o_k, t, dir)?;
                let l_s = composite_supervised(&o_a, &o_k, &y, &self.weights, alpha, &l_skd)?;
                let l_tkd = kl_distill(o_b, &o_a, t, dir)?;
                let l_t = composite_supervised(o_b, &o_a, &y, &self.weights, alpha, &l_tkd)?;
                let o_out = ((&o_a + o_b)? * 0.5)?;
                let l_bce = weighted_bce(&o_out, &y, &self.weights)?;
                let preds = to_rows(&o_out)?.iter().map(|r| AuLabels::new(r.iter().map(|&x| x >= 0.0).collect())).collect();
                (l_skd, l_tkd, l_s, l_t, l_bce, preds)
            }
            _ => (zero.clone(), zero.clone(), zero.clone(), zero.clone(), zero.clone(), Vec::new()),
        };
        let l_ssl = ssl_loss(&temporal.ssl_logits, &shuffled.ssl_logits)?;

        let noisy = Tensor::stack(&noisy, 1)?;
        let clean = Tensor::stack(&clean, 1)?;
        let clean_rows: Vec<Vec<f64>> = clean.to_dtype(DType::F64)?.reshape((b * unlabeled_positions.len(), u))?.to_vec2()?;
        let pseudo = generate_pseudo_labels(&clean_rows);
        let pseudo_flat: Vec<f32> = pseudo.iter().flat_map(|(y, _)| y.as_f32().collect::<Vec<_>>()).collect();
        let y_hat = Tensor::from_vec(pseudo_flat, (b, unlabeled_positions.len(), u), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        let semi_weights = if self.hp.pseudo_positive_weights { self.weights.clone() } else { self.weights.ones_like()? };
        let semi_per_clip = pseudo_bce_per_clip(&noisy, &y_hat, &semi_weights)?;

        let start = self.hp.tpl_start_epoch;
        let verdicts: Vec<TplVerdict> = to_vec(&temporal.ssl_logits)?
            .into_iter()
            .map(|logit| {
                if self.hp.tpl_enabled {
                    tpl_gate(logit, epoch, start)
                } else if epoch < start {
                    TplVerdict::Inactive
                } else {
                    TplVerdict::Accepted
                }
            })
            .collect();
        let mask: Vec<bool> = verdicts.iter().map(|v| *v == TplVerdict::Accepted).collect();

        let terms = LossTerms { l_skd, l_tkd, l_bce, l_s, l_t, l_ssl, semi_per_clip: semi_per_clip.clone() };
        let (total, breakdown) = total_loss(&terms, &self.hp, epoch, &mask)?;
        let grads = total.backward()?;
        self.optimizer.step(self.model.params(), &grads)?;

        let gate = semi_gate(&mask, epoch, start);
        let semi_contributions: Vec<f64> =
            to_vec(&semi_per_clip)?.iter().zip(&gate).map(|(c, g)| c * g / b as f64).collect();
        let per_clip = unlabeled_positions.len();
        let records = pseudo
            .into_iter()
            .enumerate()
            .map(|(k, (y_hat, confidences))| {
                let (i, j) = (k / per_clip, k % per_clip);
                let position = unlabeled_positions[j];
                PseudoLabelRecord {
                    clip_id: clips[i].clip_id,
                    position,
                    y_hat,
                    confidences,
                    tpl_verdict: verdicts[i],
                    ground_truth: clips[i].audit.get(position).cloned(),
                }
            })
            .collect();
        Ok(StepOutput {
            batch: self.state.batch_counter,
            key_pos,
            breakdown,
            records,
            verdicts,
            semi_contributions,
            predictions,
            targets,
        })
    }

    /// Runs one epoch over every visible label of `train`, re-cutting each
    /// batch's windows to the scheduled key position.
    pub fn train_epoch(&mut self, train: &LabeledCorpus, sink: &mut dyn RunSink) -> Result<EpochStats> {
        let epoch = self.begin_epoch();
        let n = self.model.config().clip_len;
        let mut anchors: Vec<(usize, (usize, usize))> = labeled_anchors(train).into_iter().enumerate().collect();
        if anchors.is_empty() {
            return Err(Error::config("the training split has no visible labels"));
        }
        anchors.shuffle(&mut self.rng);
        let mut stats = EpochStats::default();
        for chunk in anchors.chunks(self.hp.batch_size) {
            let m = key_frame_position(self.state.batch_counter, n)?;
            let clips = chunk
                .iter()
                .map(|&(id, (s, t))| clip_at(&train.sequences[s], t, m, n, id, true))
                .collect::<Result<Vec<_>>>()?;
            let out = self.training_step(&clips)?;
            stats.absorb(&out);
            sink.on_step(epoch, &out)?;
            if sink.interrupted() {
                return Err(Error::Interrupted);
            }
        }
        if self.hp.unlabeled_clips && epoch >= self.hp.unlabeled_start_epoch {
            let mut pool: Vec<(usize, usize)> = train
                .sequences
                .iter()
                .enumerate()
                .flat_map(|(s, seq)| (0..seq.len()).filter(|&t| !seq.visible[t]).map(move |t| (s, t)))
                .collect();
            pool.shuffle(&mut self.rng);
            pool.truncate(anchors.len());
            let offset = anchors.len();
            for (k, chunk) in pool.chunks(self.hp.batch_size).enumerate() {
                let clips = chunk
                    .iter()
                    .enumerate()
                    .map(|(j, &(s, t))| {
                        let id = offset + k * self.hp.batch_size + j;
                        clip_at(&train.sequences[s], t, n / 2, n, id, false)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let out = self.unlabeled_step(&clips)?;
                stats.absorb(&out);
                sink.on_step(epoch, &out)?;
                if sink.interrupted() {
                    return Err(Error::Interrupted);
                }
            }
        }
        Ok(stats)
    }
}

/// Per-epoch accumulators.
#[derive(Clone, Debug, Default)]
pub struct EpochStats {
    pub steps: usize,
    pub losses: LossBreakdown,
    pub predictions: Vec<AuLabels>,
    pub targets: Vec<AuLabels>,
    pub pseudo: PseudoStats,
}

impl EpochStats {
    fn absorb(&mut self, out: &StepOutput) {
        self.steps += 1;
        let k = self.steps as f64;
        // Running mean of the per-step breakdown.
        let mut mean = LossBreakdown::default();
        mean.accumulate(&self.losses, (k - 1.0) / k);
        mean.accumulate(&out.breakdown, 1.0 / k);
        self.losses = mean;
        self.predictions.extend(out.predictions.iter().cloned());
        self.targets.extend(out.targets.iter().cloned());
        self.pseudo.absorb(out);
    }
}

/// Pseudo-label audit counts. Clips whose gate was inactive are not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub gated_clips: usize,
    pub accepted_clips: usize,
    /// Label entries (frames x AUs) of accepted clips, and how many matched ground truth.
    pub admitted_entries: usize,
    pub correct_entries: usize,
}

impl PseudoStats {
    fn absorb(&mut self, out: &StepOutput) {
        for v in &out.verdicts {
            match v {
                TplVerdict::Accepted => {
                    self.gated_clips += 1;
                    self.accepted_clips += 1;
                }
                TplVerdict::Rejected => self.gated_clips += 1,
                TplVerdict::Inactive => {}
            }
        }
        for r in out.records.iter().filter(|r| r.tpl_verdict == TplVerdict::Accepted) {
            if let Some(gt) = &r.ground_truth {
                self.admitted_entries += gt.len();
                self.correct_entries += r.y_hat.values().iter().zip(gt.values()).filter(|(a, b)| a == b).count();
            }
        }
    }

    pub fn merge(&mut self, other: &PseudoStats) {
        self.gated_clips += other.gated_clips;
        self.accepted_clips += other.accepted_clips;
        self.admitted_entries += other.admitted_entries;
        self.correct_entries += other.correct_entries;
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.gated_clips > 0).then(|| self.accepted_clips as f64 / self.gated_clips as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.admitted_entries > 0).then(|| self.correct_entries as f64 / self.admitted_entries as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub batch_counter: u64,
    pub train_f1: f64,
    pub val_f1: Option<f64>,
    /// Ordered-vs-shuffled accuracy of the perturbation head on the validation split.
    pub tpl_accuracy: Option<f64>,
    pub pseudo: PseudoStats,
    pub pseudo_acceptance_rate: Option<f64>,
    pub pseudo_accuracy: Option<f64>,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub final_val: Option<F1Report>,
    pub pseudo: PseudoStats,
    pub pseudo_acceptance_rate: Option<f64>,
    pub pseudo_accuracy: Option<f64>,
    pub num_parameters: usize,
}

impl TrainReport {
    pub fn final_val_f1(&self) -> f64 {
        self.final_val.as_ref().map_or(0.0, |r| r.macro_f1)
    }

    pub fn epoch(&self, epoch: usize) -> Option<&EpochReport> {
        self.epochs.iter().find(|e| e.epoch == epoch)
    }
}

/// Observer for training progress; also decides when to stop early.
pub trait RunSink {
    fn on_step(&mut self, _epoch: usize, _step: &StepOutput) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _report: &EpochReport, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }

    fn on_interrupt(&mut self, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }

    fn interrupted(&self) -> bool {
        false
    }
}

pub struct NullSink;

impl RunSink for NullSink {}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Evaluate every `stride`-th frame of each validation sequence.
    pub stride: usize,
    pub batch_size: usize,
    /// Evaluate every `every` epochs (plus epochs up to the gate start and the last one).
    pub every: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { stride: 1, batch_size: 64, every: 1 }
    }
}

/// Full training run. Validation labels are all used for scoring, whatever their visibility.
pub fn train(
    train: &LabeledCorpus,
    val: &LabeledCorpus,
    hp: &HyperParams,
    model_cfg: &ModelConfig,
    seed: u64,
    eval: &EvalOptions,
    sink: &mut dyn RunSink,
) -> Result<(KnowledgeSpreader, TrainReport)> {
    let weights = positive_class_weights(train.visible_labels())?;
    let model = KnowledgeSpreader::new(model_cfg, seed, DType::F32)?;
    let num_parameters = model.params().num_parameters();
    let mut trainer = Trainer::new(model, hp.clone(), weights, seed)?;
    let mut epochs = Vec::with_capacity(hp.epochs);
    let mut pseudo = PseudoStats::default();
    let mut final_val = None;
    for epoch in 1..=hp.epochs {
        let stats = match trainer.train_epoch(train, sink) {
            Err(Error::Interrupted) => {
                sink.on_interrupt(&trainer)?;
                return Err(Error::Interrupted);
            }
            other => other?,
        };
        pseudo.merge(&stats.pseudo);
        let due = epoch == hp.epochs || epoch < hp.tpl_start_epoch || epoch % eval.every.max(1) == 0;
        let outcome = if due && !val.sequences.is_empty() {
            Some(evaluate_split(trainer.model(), val, eval.stride, eval.batch_size, seed ^ (epoch as u64) << 32)?)
        } else {
            None
        };
        let train_f1 = if stats.targets.is_empty() { 0.0 } else { f1_scores(&stats.predictions, &stats.targets)?.macro_f1 };
        let report = EpochReport {
            epoch,
            steps: stats.steps,
            batch_counter: trainer.state().batch_counter,
            train_f1,
            val_f1: outcome.as_ref().map(|o| o.f1.macro_f1),
            tpl_accuracy: outcome.as_ref().map(|o| o.tpl_accuracy),
            pseudo: stats.pseudo,
            pseudo_acceptance_rate: stats.pseudo.acceptance_rate(),
            pseudo_accuracy: stats.pseudo.accuracy(),
            losses: stats.losses,
        };
        sink.on_epoch(&report, &trainer)?;
        if epoch == hp.epochs {
            final_val = outcome.map(|o| o.f1);
        }
        epochs.push(report);
    }
    let report = TrainReport {
        epochs,
        final_val,
        pseudo_acceptance_rate: pseudo.acceptance_rate(),
        pseudo_accuracy: pseudo.accuracy(),
        pseudo,
        num_parameters,
    };
    Ok((trainer.into_model(), report))
}

/// Samples the label budget from `cfg.data`, splits off validation
/// sequences and trains the configured variant.
pub fn run_experiment(cfg: &ExperimentConfig, corpus: &LabeledCorpus, sink: &mut dyn RunSink) -> Result<(KnowledgeSpreader, TrainReport)> {
    cfg.validate()?;
    let sampled = sample_sparse_labels(corpus, cfg.data.label_ratio, cfg.data.sample_mode)?;
    let (train_split, val_split) = sampled.split_validation(cfg.data.val_fraction);
    let (hp, model_cfg) = cfg.resolved();
    let eval = EvalOptions { stride: cfg.run.eval_stride, batch_size: cfg.run.eval_batch_size, every: cfg.run.eval_every };
    train(&train_split, &val_split, &hp, &model_cfg, cfg.seed, &eval, sink)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub key_pos: usize,
    pub probabilities: Vec<f64>,
    pub labels: AuLabels,
}

struct BatchInference {
    probabilities: Vec<Vec<f64>>,
    ssl_ordered: Vec<f64>,
    ssl_shuffled: Vec<f64>,
}

/// Ensemble forward pass for clips sharing `key_pos`, with no dropout.
fn infer_batch(model: &KnowledgeSpreader, clips: &[ClipSample], key_pos: usize, rng: &mut ChaCha8Rng) -> Result<BatchInference> {
    let n = model.config().clip_len;
    let b = clips.len();
    for c in clips {
        if c.len() < n {
            return Err(Error::shape(format!("clip of {} frames is shorter than the clip length {n}", c.len())));
        }
    }
    let key: Vec<&[f32]> = clips.iter().map(|c| c.frames[key_pos].image.as_slice()).collect();
    let o_a = model.spatial_branch(&model.images_to_tensor(&key)?)?.logits;
    let frames: Vec<&[f32]> = clips.iter().flat_map(|c| c.frames[..n].iter().map(|f| f.image.as_slice())).collect();
    let features = model.frame_features(&model.images_to_tensor(&frames)?, b)?;
    let temporal = model.temporal_teacher(&student_tokens(model, &features)?, key_pos)?;
    let (shuffled, _) = shuffle_features(&features, rng)?;
    let ssl_shuffled = to_vec(&model.temporal_teacher(&student_tokens(model, &shuffled)?, key_pos)?.ssl_logits)?;
    let o_out = ((o_a + temporal.au_logits)? * 0.5)?;
    let probabilities = to_rows(&o_out)?.into_iter().map(|r| r.into_iter().map(sigmoid).collect()).collect();
    Ok(BatchInference { probabilities, ssl_ordered: to_vec(&temporal.ssl_logits)?, ssl_shuffled })
}

/// Predicts each clip's key frame. Every batch draws its own key position
/// from `seed`; a clip's frame at that position feeds the spatial branch.
pub fn infer(model: &KnowledgeSpreader, clips: &[ClipSample], seed: u64, batch_size: usize) -> Result<Vec<Prediction>> {
    let n = model.config().clip_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size.max(1)) {
        let m = rng.random_range(0..n);
        let batch = infer_batch(model, chunk, m, &mut rng)?;
        out.extend(batch.probabilities.into_iter().map(|p| Prediction {
            key_pos: m,
            labels: AuLabels::from_probabilities(&p),
            probabilities: p,
        }));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub f1: F1Report,
    pub tpl_accuracy: f64,
    pub predictions: Vec<AuLabels>,
    pub truth: Vec<AuLabels>,
}

/// Scores every `stride`-th frame of every sequence in `corpus` against its ground truth.
pub fn evaluate_split(model: &KnowledgeSpreader, corpus: &LabeledCorpus, stride: usize, batch_size: usize, seed: u64) -> Result<EvalOutcome> {
    let n = model.config().clip_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<(usize, usize)> = corpus
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.len()).step_by(stride.max(1)).map(move |t| (s, t)))
        .collect();
    let mut predictions = Vec::with_capacity(frames.len());
    let mut truth = Vec::with_capacity(frames.len());
    let (mut tpl_correct, mut tpl_total) = (0usize, 0usize);
    for chunk in frames.chunks(batch_size.max(1)) {
        let m = rng.random_range(0..n);
        let clips = chunk
            .iter()
            .map(|&(s, t)| clip_at(&corpus.sequences[s], t, m, n, 0, false))
            .collect::<Result<Vec<_>>>()?;
        let batch = infer_batch(model, &clips, m, &mut rng)?;
        for (p, &(s, t)) in batch.probabilities.iter().zip(chunk) {
            predictions.push(AuLabels::from_probabilities(p));
            truth.push(corpus.sequences[s].labels[t].clone());
        }
        tpl_correct += batch.ssl_ordered.iter().filter(|&&x| sigmoid(x) < 0.5).count();
        tpl_correct += batch.ssl_shuffled.iter().filter(|&&x| sigmoid(x) >= 0.5).count();
        tpl_total += 2 * clips.len();
    }
    let f1 = f1_scores(&predictions, &truth)?;
    let tpl_accuracy = if tpl_total == 0 { 0.0 } else { tpl_correct as f64 / tpl_total as f64 };
    Ok(EvalOutcome { f1, tpl_accuracy, predictions, truth })
}

/// Writes `metrics.csv`, `events.jsonl`, periodic checkpoints and, on
/// Ctrl-C, a final checkpoint of the interrupted epoch.
pub struct FileSink {
    dir: PathBuf,
    metrics: csv::Writer<BufWriter<File>>,
    events: BufWriter<File>,
    checkpoint_every: usize,
    last_epoch: usize,
    stop: Arc<AtomicBool>,
}

impl FileSink {
    pub fn create(dir: &Path, checkpoint_every: usize, last_epoch: usize, stop: Arc<AtomicBool>) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut metrics = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("metrics.csv"))?));
        let mut header = vec!["step", "epoch", "key_pos"];
        header.extend(LossBreakdown::FIELDS);
        metrics.write_record(&header)?;
        let events = BufWriter::new(File::create(dir.join("events.jsonl"))?);
        Ok(Self { dir: dir.to_path_buf(), metrics, events, checkpoint_every, last_epoch, stop })
    }

    pub fn event(&mut self, value: serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.events, &value)?;
        self.events.write_all(b"\n")?;
        self.events.flush()?;
        Ok(())
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch}.ckpt"))
    }

    fn save_checkpoint(&mut self, trainer: &Trainer) -> Result<()> {
        let epoch = trainer.state().epoch;
        let path = self.checkpoint_path(epoch);
        checkpoint::save(&path, trainer.model(), trainer.state())?;
        self.event(serde_json::json!({"event": "checkpoint", "epoch": epoch, "path": path.file_name().map(|f| f.to_string_lossy().into_owned())}))
    }
}

impl RunSink for FileSink {
    fn on_step(&mut self, epoch: usize, step: &StepOutput) -> Result<()> {
        let mut row = vec![
            step.batch.to_string(),
            epoch.to_string(),
            step.key_pos.map_or_else(String::new, |m| m.to_string()),
        ];
        row.extend(step.breakdown.values().iter().map(|v| format!("{v}")));
        self.metrics.write_record(&row)?;
        Ok(())
    }

    fn on_epoch(&mut self, report: &EpochReport, trainer: &Trainer) -> Result<()> {
        self.metrics.flush()?;
        let mut value = serde_json::to_value(report)?;
        value["event"] = "epoch".into();
        self.event(value)?;
        if report.epoch == self.last_epoch || (self.checkpoint_every > 0 && report.epoch % self.checkpoint_every == 0) {
            self.save_checkpoint(trainer)?;
        }
        Ok(())
    }

    fn on_interrupt(&mut self, trainer: &Trainer) -> Result<()> {
        self.metrics.flush()?;
        self.event(serde_json::json!({"event": "interrupted", "epoch": trainer.state().epoch, "batch": trainer.state().batch_counter}))?;
        self.save_checkpoint(trainer)
    }

    fn interrupted(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, SampleMode, SynthConfig};

    fn tiny_corpus(seed: u64) -> LabeledCorpus {
        let cfg = SynthConfig { num_sequences: 4, frames_per_sequence: 30, seed, ..Default::default() };
        sample_sparse_labels(&generate_corpus(&cfg).unwrap(), 0.2, SampleMode::Strided).unwrap()
    }

    fn trainer(seed: u64, hp: HyperParams, corpus: &LabeledCorpus) -> Trainer {
        let model = KnowledgeSpreader::new(&ModelConfig::default(), seed, DType::F32).unwrap();
        let w = positive_class_weights(corpus.visible_labels()).unwrap();
        Trainer::new(model, hp, w, seed).unwrap()
    }

    fn batch(corpus: &LabeledCorpus, key_pos: usize, count: usize) -> Vec<ClipSample> {
        labeled_anchors(corpus)
            .into_iter()
            .take(count)
            .enumerate()
            .map(|(id, (s, t))| clip_at(&corpus.sequences[s], t, key_pos, 5, id, true).unwrap())
            .collect()
    }

    #[test]
    fn cosine_schedule_decays_from_the_base_rate() {
        let hp = HyperParams { epochs: 4, lr_cosine: true, ..HyperParams::default() };
        let lrs: Vec<f64> = (1..=4).map(|e| epoch_lr(&hp, e)).collect();
        assert_eq!(lrs[0], hp.lr);
        assert!((lrs[2] - 0.5 * hp.lr).abs() < 1e-15);
        assert!(lrs.windows(2).all(|w| w[1] < w[0]) && lrs[3] > 0.0);
        let flat = HyperParams { lr_cosine: false, ..hp };
        assert!((1..=4).all(|e| epoch_lr(&flat, e) == flat.lr));
    }

    #[test]
    fn pseudo_label_thresholds() {
        let p = generate_pseudo_labels(&[vec![0.0, -3.0, 3.0]]);
        assert_eq!(p[0].0.values(), &[true, false, true]);
        assert_eq!(p[0].1[0], 0.5);
        assert!(p[0].1.iter().all(|c| *c > 0.0 && *c < 1.0));
    }

    #[test]
    fn gate_verdicts() {
        assert_eq!(tpl_gate(-10.0, 1, 3), TplVerdict::Inactive);
        assert_eq!(tpl_gate(10.0, 2, 3), TplVerdict::Inactive);
        assert_eq!(tpl_gate(-4.0, 5, 3), TplVerdict::Accepted);
        assert_eq!(tpl_gate(4.0, 5, 3), TplVerdict::Rejected);
    }

    #[test]
    fn permutations_are_never_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert_eq!(non_identity_permutation(2, &mut rng).unwrap(), vec![1, 0]);
            let p = non_identity_permutation(5, &mut rng).unwrap();
            assert_ne!(p, vec![0, 1, 2, 3, 4]);
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        }
        assert!(non_identity_permutation(1, &mut rng).is_err());
    }

    #[test]
    fn identical_steps_are_deterministic() {
        let corpus = tiny_corpus(1);
        let clips = batch(&corpus, 0, 4);
        let a = trainer(3, HyperParams::default(), &corpus).training_step(&clips).unwrap();
        let b = trainer(3, HyperParams::default(), &corpus).training_step(&clips).unwrap();
        assert_eq!(a.breakdown, b.breakdown);
        assert!(a.breakdown.l_total.is_finite());
    }

    #[test]
    fn rotation_mismatch_is_rejected() {
        let corpus = tiny_corpus(2);
        let mut t = trainer(0, HyperParams::default(), &corpus);
        let err = t.training_step(&batch(&corpus, 1, 2)).unwrap_err();
        assert!(matches!(err, Error::Rotation { batch: 0, expected: 0, actual: 1 }));
        t.training_step(&batch(&corpus, 0, 2)).unwrap();
        t.training_step(&batch(&corpus, 1, 2)).unwrap();
        t.training_step(&batch(&corpus, 2, 2)).unwrap();
        let out = t.training_step(&batch(&corpus, 3, 2)).unwrap();
        assert_eq!(out.batch, 3);
        assert_eq!(out.key_pos, Some(3));
        let mut positions: Vec<usize> = out.records.iter().map(|r| r.position).collect();
        positions.sort_unstable();
        positions.dedup();
        assert_eq!(positions, vec![0, 1, 2, 4]);
    }

    #[test]
    fn ten_clips_in_batches_of_two_take_five_steps() {
        let corpus = tiny_corpus(4);
        assert_eq!(labeled_anchors(&corpus).len(), 24);
        let mut small = corpus.clone();
        // Keep exactly ten visible labels.
        let mut kept = 0;
        for seq in &mut small.sequences {
            for v in &mut seq.visible {
                if *v {
                    kept += 1;
                    *v = kept <= 10;
                }
            }
        }
        let hp = HyperParams { batch_size: 2, ..Default::default() };
        let mut t = trainer(0, hp, &small);
        struct Batches(Vec<u64>);
        impl RunSink for Batches {
            fn on_step(&mut self, _: usize, s: &StepOutput) -> Result<()> {
                self.0.push(s.batch);
                Ok(())
            }
        }
        let mut sink = Batches(Vec::new());
        let stats = t.train_epoch(&small, &mut sink).unwrap();
        assert_eq!(stats.steps, 5);
        assert_eq!(sink.0, vec![0, 1, 2, 3, 4]);
        assert_eq!(t.state().batch_counter, 5);
    }

    #[test]
    fn frozen_perturbation_head_without_its_loss() {
        let corpus = tiny_corpus(5);
        let hp = HyperParams { lambda3: 0.0, ..Default::default() };
        let mut t = trainer(1, hp, &corpus);
        let store = t.model().params();
        let idx: Vec<usize> = store.params().iter().enumerate().filter(|(_, p)| p.name.starts_with("temporal.ssl")).map(|(i, _)| i).collect();
        let before: Vec<Vec<f64>> = idx.iter().map(|&i| store.values(i).unwrap()).collect();
        let others_before = store.values(0).unwrap();
        t.training_step(&batch(&corpus, 0, 4)).unwrap();
        let store = t.model().params();
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(store.values(i).unwrap(), before[k]);
        }
        assert_ne!(store.values(0).unwrap(), others_before);
    }

    #[test]
    fn early_epochs_never_use_pseudo_labels() {
        let corpus = tiny_corpus(6);
        let mut t = trainer(2, HyperParams::default(), &corpus);
        t.begin_epoch();
        let out = t.training_step(&batch(&corpus, 0, 4)).unwrap();
        assert!(out.verdicts.iter().all(|v| *v == TplVerdict::Inactive));
        assert_eq!(out.breakdown.l_semi, 0.0);
        assert!(out.semi_contributions.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn inference_is_seeded() {
        let corpus = tiny_corpus(7);
        let model = KnowledgeSpreader::new(&ModelConfig::default(), 0, DType::F32).unwrap();
        let clips = batch(&corpus, 2, 6);
        let a = infer(&model, &clips, 9, 4).unwrap();
        let b = infer(&model, &clips, 9, 4).unwrap();
        assert_eq!(a, b);
        let frame = &corpus.sequences[0].frames[0];
        let mut dup = clips[0].clone();
        for f in &mut dup.frames {
            f.image = frame.clone();
        }
        let p = infer(&model, &[dup], 1, 1).unwrap();
        assert!(p[0].probabilities.iter().all(|v| v.is_finite()));
        let mut short = clips[0].clone();
        short.frames.truncate(3);
        assert!(infer(&model, &[short], 0, 1).is_err());
    }
}
