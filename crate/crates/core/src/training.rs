//! Optimization: cross-entropy and self-critical losses, the learning-rate
//! schedule, AdamW, and the epoch loop.
//!
//! Each video gets its own graph; per-video gradients are computed in
//! parallel and summed in dataset order, so results do not depend on the
//! number of worker threads.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamSet};
use crate::caption::{log_softmax_at, tokenize, SampledCaption, TokenSequence, Vocabulary};
use crate::datamodel::{CaptionKind, ModelConfig};
use crate::error::{GebcError, Result};
use crate::features::PreparedVideo;
use crate::metrics::{CiderScorer, Prediction};
use crate::model::{checkpoint_name, training_targets, CaptionModel, Checkpoint};
use crate::tensor::Mat;

pub const TRAIN_LOG: &str = "train.log";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub weight_decay: f64,
    /// Videos per optimizer step.
    pub batch_size: usize,
    pub decay_start_epoch: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub num_epochs: usize,
    pub rl_enabled: bool,
    pub rl_start_epoch: usize,
    pub seed: u64,
    /// Global gradient-norm limit.
    pub grad_clip: f64,
    pub sample_temperature: f64,
    pub min_token_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 5e-5,
            weight_decay: 1e-4,
            batch_size: 8,
            decay_start_epoch: 8,
            decay_factor: 0.5,
            decay_every: 3,
            num_epochs: 20,
            rl_enabled: false,
            rl_start_epoch: 15,
            seed: 0,
            grad_clip: 1.0,
            sample_temperature: 1.0,
            min_token_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: &str| {
            Err(GebcError::Config {
                key: format!("train.{key}"),
                message: message.into(),
            })
        };
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return err("initial_lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err("weight_decay", "must be non-negative");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return err("decay_factor", "must lie in (0, 1)");
        }
        if self.decay_every == 0 {
            return err("decay_every", "must be positive");
        }
        if self.num_epochs == 0 {
            return err("num_epochs", "must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return err("grad_clip", "must be positive");
        }
        if !(self.sample_temperature >= 0.0 && self.sample_temperature.is_finite()) {
            return err("sample_temperature", "must be non-negative");
        }
        Ok(())
    }
}

/// Step decay: the rate is multiplied by `decay_factor` at epochs
/// `decay_start_epoch`, `decay_start_epoch + decay_every`, ...
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_start_epoch {
        return cfg.initial_lr;
    }
    let steps = (epoch - cfg.decay_start_epoch) / cfg.decay_every + 1;
    cfg.initial_lr * cfg.decay_factor.powi(steps as i32)
}

/// Mean cross-entropy and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct XeLoss {
    pub loss: f64,
    /// Same shapes as the input logits.
    pub grad: Vec<Mat>,
    pub count: usize,
}

/// `logits[b]` is `M × V`; `targets[b][t]` is read only where `mask[b][t]`.
pub fn xe_loss(logits: &[Mat], targets: &[Vec<usize>], mask: &[Vec<bool>]) -> Result<XeLoss> {
    if logits.len() != targets.len() || logits.len() != mask.len() {
        return Err(GebcError::shape("xe_loss batch sizes differ"));
    }
    let count: usize = mask.iter().flatten().filter(|&&m| m).count();
    if count == 0 {
        return Err(GebcError::invalid("xe_loss: every position is masked"));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((lg, tg), mk) in logits.iter().zip(targets).zip(mask) {
        if tg.len() != lg.rows() || mk.len() != lg.rows() {
            return Err(GebcError::shape(format!(
                "logits have {} steps, targets {}, mask {}",
                lg.rows(),
                tg.len(),
                mk.len()
            )));
        }
        let mut d = Mat::zeros(lg.rows(), lg.cols());
        for t in 0..lg.rows() {
            if !mk[t] {
                continue;
            }
            let target = tg[t];
            if target >= lg.cols() {
                return Err(GebcError::invalid(format!("target id {target} outside vocabulary")));
            }
            let row = lg.row(t);
            total -= log_softmax_at(row, target);
            let p = crate::caption::softmax(row);
            for (o, pi) in d.row_mut(t).iter_mut().zip(p) {
                *o = pi / count as f64;
            }
            d.row_mut(t)[target] -= 1.0 / count as f64;
        }
        grad.push(d);
    }
    Ok(XeLoss {
        loss: total / count as f64,
        grad,
        count,
    })
}

/// Reward terms of one self-critical example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScstTerm {
    pub reward_sampled: f64,
    pub reward_greedy: f64,
    pub advantage: f64,
    /// `−advantage · Σ log p(sampled tokens)`
    pub loss: f64,
}

/// Self-critical loss with the greedy caption as baseline. The greedy
/// branch only enters through the (constant) advantage.
pub fn scst_loss(
    sampled: &SampledCaption,
    greedy: &TokenSequence,
    references: &[Vec<String>],
    vocab: &Vocabulary,
    scorer: &CiderScorer,
) -> ScstTerm {
    let reward = |s: &TokenSequence| scorer.score(&tokenize(&vocab.decode(&s.tokens)), references);
    let reward_sampled = reward(&sampled.sequence);
    let reward_greedy = reward(greedy);
    let advantage = reward_sampled - reward_greedy;
    ScstTerm {
        reward_sampled,
        reward_greedy,
        advantage,
        loss: -advantage * sampled.total_log_prob(),
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ParamSet,
    v: ParamSet,
    t: i32,
}

impl AdamW {
    pub fn new(like: &ParamSet, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter");
            let m = self.m.get_mut(name).expect("moment");
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("moment");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = self.m.get(name).expect("moment").data();
            let v = self.v.get(name).expect("moment").data();
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let update = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *pi -= lr * (update + self.weight_decay * *pi);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Xe,
    Scst,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Gradient norm before clipping, when clipping happened.
    pub clipped_from: Option<f64>,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!("epoch={} step={} loss={:.12e} lr={:.6e}", self.epoch, self.step, self.loss, self.lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    pub lr: f64,
    pub steps: usize,
    pub clipped_steps: usize,
}

struct VideoGrad {
    loss: f64,
    /// Normalizer contribution: tokens for XE, rows for SCST.
    weight: usize,
    grads: ParamSet,
}

/// Model, parameters, optimizer state and data for one caption kind.
pub struct Trainer {
    pub model: CaptionModel,
    pub params: ParamSet,
    pub config: TrainConfig,
    pub kind: CaptionKind,
    pub vocab: Vocabulary,
    videos: Vec<PreparedVideo>,
    targets: Vec<Vec<TokenSequence>>,
    references: Vec<Vec<Vec<Vec<String>>>>,
    scorer: CiderScorer,
    optimizer: AdamW,
    epoch: usize,
    step: usize,
    pool: rayon::ThreadPool,
    pub history: Vec<StepLog>,
}

impl Trainer {
    /// Builds the vocabulary from the captions of `kind` only, resolves the
    /// model config and initializes parameters from `model_config.seed`.
    pub fn new(
        mut model_config: ModelConfig,
        config: TrainConfig,
        videos: Vec<PreparedVideo>,
        kind: CaptionKind,
        workers: Option<usize>,
    ) -> Result<Self> {
        config.validate()?;
        if videos.is_empty() {
            return Err(GebcError::invalid("training set is empty"));
        }
        let texts: Vec<&str> = videos
            .iter()
            .flat_map(|v| v.record.captions.iter().map(move |c| c.get(kind)))
            .collect();
        let vocab = Vocabulary::build(&texts, config.min_token_count)?;
        model_config.vocab_size = Some(vocab.len());
        if let Some(v) = videos.first() {
            model_config.input_dim.get_or_insert(v.input_dim());
            model_config.region_dim.get_or_insert(v.region_dim());
        }
        let model = CaptionModel::new(model_config)?;
        let params = model.init_params();
        Self::from_parts(model, params, vocab, config, videos, kind, workers)
    }

    /// Resumes from existing parameters and vocabulary.
    pub fn from_parts(
        model: CaptionModel,
        params: ParamSet,
        vocab: Vocabulary,
        config: TrainConfig,
        videos: Vec<PreparedVideo>,
        kind: CaptionKind,
        workers: Option<usize>,
    ) -> Result<Self> {
        let max_len = model.config.max_caption_len;
        let targets = videos
            .iter()
            .map(|v| training_targets(v, kind, &vocab, max_len))
            .collect();
        let references: Vec<Vec<Vec<Vec<String>>>> = videos
            .iter()
            .map(|v| {
                v.record
                    .captions
                    .iter()
                    .map(|c| vec![tokenize(c.get(kind))])
                    .collect()
            })
            .collect();
        let flat: Vec<Vec<Vec<String>>> = references.iter().flatten().cloned().collect();
        let scorer = CiderScorer::new(&flat);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.unwrap_or(0))
            .build()
            .map_err(|e| GebcError::invalid(format!("thread pool: {e}")))?;
        Ok(Trainer {
            optimizer: AdamW::new(&params, config.weight_decay),
            model,
            params,
            config,
            kind,
            vocab,
            videos,
            targets,
            references,
            scorer,
            epoch: 0,
            step: 0,
            pool,
            history: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn videos(&self) -> &[PreparedVideo] {
        &self.videos
    }

    pub fn phase(&self) -> Phase {
        if self.config.rl_enabled && self.epoch >= self.config.rl_start_epoch {
            Phase::Scst
        } else {
            Phase::Xe
        }
    }

    fn xe_video(&self, idx: usize) -> Result<VideoGrad> {
        let mut g = Graph::with_params(&self.params);
        let (nll, count) = self
            .model
            .xe_terms(&mut g, &self.videos[idx], self.kind, &self.targets[idx])?;
        let loss = g.value(nll).item();
        let grads = g.backward(nll).into_param_set(&self.params);
        Ok(VideoGrad {
            loss,
            weight: count,
            grads,
        })
    }

    fn scst_video(&self, idx: usize) -> Result<VideoGrad> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(((self.epoch as u64) << 32) | idx as u64);
        let (loss, grads, _) = scst_video_gradients(
            &self.model,
            &self.params,
            &self.videos[idx],
            self.kind,
            &self.references[idx],
            &self.vocab,
            &self.scorer,
            &mut rng,
            self.config.sample_temperature,
        )?;
        Ok(VideoGrad {
            loss,
            weight: self.videos[idx].record.num_boundaries(),
            grads,
        })
    }

    /// One pass over the data in a seeded shuffled order.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let phase = self.phase();
        let lr = lr_at_epoch(self.epoch, &self.config);
        let mut order: Vec<usize> = (0..self.videos.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64);
        order.shuffle(&mut rng);

        let mut losses = Vec::new();
        let mut clipped_steps = 0;
        for (batch_id, batch) in order.chunks(self.config.batch_size).enumerate() {
            let results: Vec<Result<VideoGrad>> = self.pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| match phase {
                        Phase::Xe => self.xe_video(i),
                        Phase::Scst => self.scst_video(i),
                    })
                    .collect()
            });
            let names: Vec<&str> = batch.iter().map(|&i| self.videos[i].record.video_id.as_str()).collect();
            let mut total = self.params.zeros_like();
            let mut loss = 0.0;
            let mut weight = 0usize;
            for (r, name) in results.into_iter().zip(&names) {
                let r = r.map_err(|e| match e {
                    GebcError::NonFinite { context } => GebcError::NonFinite {
                        context: format!(
                            "{context} in epoch {} batch {batch_id} ({}), video {name}",
                            self.epoch,
                            names.join(", ")
                        ),
                    },
                    other => other,
                })?;
                total.add_assign(&r.grads);
                loss += r.loss;
                weight += r.weight;
            }
            if weight == 0 {
                return Err(GebcError::invalid(format!(
                    "epoch {} batch {batch_id} ({}) has no supervised tokens",
                    self.epoch,
                    names.join(", ")
                )));
            }
            total.scale_assign(1.0 / weight as f64);
            loss /= weight as f64;
            if !loss.is_finite() || !total.is_finite() {
                return Err(GebcError::NonFinite {
                    context: format!("loss of epoch {} batch {batch_id} ({})", self.epoch, names.join(", ")),
                });
            }
            let norm = total.global_norm();
            let clipped_from = if norm > self.config.grad_clip {
                total.scale_assign(self.config.grad_clip / norm);
                clipped_steps += 1;
                log::info!(
                    "epoch {} step {}: gradient norm {norm:.4e} clipped to {}",
                    self.epoch,
                    self.step,
                    self.config.grad_clip
                );
                Some(norm)
            } else {
                None
            };
            self.optimizer.step(&mut self.params, &total, lr);
            self.history.push(StepLog {
                epoch: self.epoch,
                step: self.step,
                loss,
                lr,
                clipped_from,
            });
            losses.push(loss);
            self.step += 1;
        }
        let summary = EpochSummary {
            epoch: self.epoch,
            phase,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            lr,
            steps: losses.len(),
            clipped_steps,
        };
        self.epoch += 1;
        Ok(summary)
    }

    /// Snapshot labelled with the last completed epoch.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            kind: self.kind,
            vocab: self.vocab.clone(),
            epoch: self.epoch.saturating_sub(1),
            params: self.params.clone(),
        }
    }

    /// Greedy predictions on the training videos.
    pub fn predict(&self) -> Result<Vec<Prediction>> {
        self.pool
            .install(|| predict_captions(&self.model, &self.params, &self.vocab, &self.videos, self.kind))
    }
}

/// Self-critical loss and gradients for every boundary of one video.
/// Returns the summed loss, the gradients of that sum and the per-row terms.
#[allow(clippy::too_many_arguments)]
pub fn scst_video_gradients(
    model: &CaptionModel,
    params: &ParamSet,
    video: &PreparedVideo,
    kind: CaptionKind,
    references: &[Vec<Vec<String>>],
    vocab: &Vocabulary,
    scorer: &CiderScorer,
    rng: &mut ChaCha8Rng,
    temperature: f64,
) -> Result<(f64, ParamSet, Vec<ScstTerm>)> {
    let mut g = Graph::with_params(params);
    let out = model.events(&mut g, video, kind)?;
    let refs = &out.reference_points;
    let greedy = model.head.greedy_decode(&mut g, out.events, out.encoded, refs)?;
    let sampled = model
        .head
        .sample_decode(&mut g, out.events, out.encoded, refs, rng, temperature)?;
    let terms: Vec<ScstTerm> = sampled
        .iter()
        .zip(&greedy)
        .zip(references)
        .map(|((s, gr), r)| scst_loss(s, gr, r, vocab, scorer))
        .collect();
    let weights: Vec<f64> = terms.iter().map(|t| t.advantage).collect();
    let seqs: Vec<TokenSequence> = sampled.iter().map(|s| s.sequence.clone()).collect();
    let (loss, _, _) = model
        .head
        .teacher_forced_weighted(&mut g, out.events, out.encoded, refs, &seqs, &weights)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss).into_param_set(params);
    Ok((value, grads, terms))
}

/// One greedy caption per boundary, in video then boundary order.
pub fn predict_captions(
    model: &CaptionModel,
    params: &ParamSet,
    vocab: &Vocabulary,
    videos: &[PreparedVideo],
    kind: CaptionKind,
) -> Result<Vec<Prediction>> {
    let per_video: Vec<Result<Vec<Prediction>>> = videos
        .par_iter()
        .map(|v| {
            let seqs = model.greedy(params, v, kind)?;
            Ok(seqs
                .iter()
                .enumerate()
                .map(|(i, s)| Prediction {
                    video_id: v.record.video_id.clone(),
                    boundary_index: i,
                    kind,
                    caption: vocab.decode(&s.tokens),
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for p in per_video {
        out.extend(p?);
    }
    Ok(out)
}

/// What [`train`] wrote.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub epochs: Vec<EpochSummary>,
    pub log_path: PathBuf,
}

/// Full run: one checkpoint per epoch, the step log, per-epoch summaries
/// and the vocabulary, all under `out_dir`.
pub fn train(
    model_config: ModelConfig,
    config: TrainConfig,
    videos: Vec<PreparedVideo>,
    kind: CaptionKind,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model_config, config, videos, kind, workers)?;
    std::fs::create_dir_all(out_dir).map_err(|e| GebcError::io(out_dir, e))?;
    crate::io::write_atomic(&out_dir.join(VOCAB_FILE), trainer.vocab.to_file_string().as_bytes())?;
    let log_path = out_dir.join(TRAIN_LOG);
    let mut log_text = String::new();
    let mut epoch_text = String::new();
    let mut checkpoints = Vec::new();
    let mut epochs = Vec::new();
    for _ in 0..trainer.config.num_epochs {
        let first = trainer.history.len();
        let summary = trainer.run_epoch()?;
        for s in &trainer.history[first..] {
            log_text.push_str(&s.line());
            log_text.push('\n');
            if let Some(norm) = s.clipped_from {
                let _ = writeln!(log_text, "clip epoch={} step={} norm={norm:.6e}", s.epoch, s.step);
            }
        }
        crate::io::write_atomic(&log_path, log_text.as_bytes())?;
        epoch_text.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        epoch_text.push('\n');
        crate::io::write_atomic(&out_dir.join(EPOCH_LOG), epoch_text.as_bytes())?;
        let path = out_dir.join(checkpoint_name(kind, summary.epoch));
        trainer.checkpoint().save(&path)?;
        checkpoints.push(path);
        epochs.push(summary);
    }
    Ok(TrainOutcome {
        checkpoints,
        epochs,
        log_path,
    })
}
