//! Token-level (teacher-forced cross-entropy) and sequence-level
//! (REINFORCE with a Monte-Carlo reward baseline) training.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{Baseline, BleuMode, Config, Phase};
use crate::data::bucket::{self, Bucket};
use crate::data::image::GrayImage;
use crate::data::manifest::Example;
use crate::data::vocab::{Vocabulary, END, PAD, START};
use crate::decoder::AttendedMemory;
use crate::decoding::{greedy_decode, ModelScorer};
use crate::error::{Error, Result};
use crate::kernels::softmax_row;
use crate::metrics::{bleu4, sentence_bleu};
use crate::model::Model;
use crate::optim::Adam;
use crate::param::{Bound, Parameter};
use crate::rng::{self, StreamRng};
use crate::tape::{BatchStats, Tape, Var};

const SHUFFLE_TAG: u64 = 0x5348_5546;
const DROPOUT_TAG: u64 = 0x4452_4f50;
const SAMPLE_TAG: u64 = 0x5341_4d50;

/// An example ready for the model: padded image and `START … END` ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub image: GrayImage,
    pub target: Vec<usize>,
}

impl Prepared {
    /// Target ids without START/END.
    pub fn reference(&self) -> &[usize] {
        &self.target[1..self.target.len() - 1]
    }
}

#[derive(Clone, Debug)]
pub struct TrainSet {
    pub examples: Vec<Prepared>,
    /// Example indices grouped by bucket; batches never mix buckets.
    pub groups: Vec<Vec<usize>>,
    pub dropped: usize,
}

impl TrainSet {
    /// Pads every image into its bucket and encodes the tokens. Without an
    /// explicit bucket list the grid of `bucket_width_step × bucket_height_step`
    /// multiples covering the data is used.
    pub fn prepare(examples: &[Example], vocab: &Vocabulary, buckets: Option<&[Bucket]>, cfg: &Config) -> Result<TrainSet> {
        let max_seq_len = cfg.max_seq_len;
        if let Some(e) = examples.iter().find(|e| e.tokens.len() > max_seq_len) {
            return Err(Error::Config(format!(
                "{}: {} tokens exceed max_seq_len {max_seq_len}",
                e.id,
                e.tokens.len()
            )));
        }
        let auto;
        let buckets = match buckets {
            Some(b) => b,
            None => {
                auto = bucket::buckets_for(examples.iter().map(|e| &e.image), cfg.bucket_width_step, cfg.bucket_height_step);
                &auto
            }
        };
        let grouped = bucket::bucket_images(examples.iter().map(|e| &e.image), buckets, cfg.drop_oversize)?;
        let mut prepared = Vec::new();
        let mut groups = Vec::new();
        for (b, idx) in &grouped.groups {
            let mut g = Vec::with_capacity(idx.len());
            for &i in idx {
                let e = &examples[i];
                g.push(prepared.len());
                prepared.push(Prepared {
                    id: e.id.clone(),
                    image: e.image.pad_to(b.width, b.height)?,
                    target: vocab.encode_bracketed(&e.tokens),
                });
            }
            groups.push(g);
        }
        Ok(TrainSet {
            examples: prepared,
            groups,
            dropped: grouped.dropped.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.groups.iter().map(|g| g.len().div_ceil(batch_size)).sum()
    }

    /// Shuffled batches of epoch `epoch`; a pure function of its arguments.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut batches = Vec::new();
        for (gi, g) in self.groups.iter().enumerate() {
            let mut idx = g.clone();
            shuffle(&mut idx, &mut rng::stream(seed, &[SHUFFLE_TAG, epoch, gi as u64]));
            batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
        }
        shuffle(&mut batches, &mut rng::stream(seed, &[SHUFFLE_TAG, epoch, u64::MAX]));
        batches
    }
}

fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// How a forward pass treats batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    /// Batch statistics and dropout; dropout masks come from
    /// `(seed, step, example)` streams.
    Train { seed: u64, step: u64 },
}

fn dropout_rng(mode: ForwardMode, example: u64) -> (bool, StreamRng) {
    match mode {
        ForwardMode::Eval => (false, rng::stream(0, &[])),
        ForwardMode::Train { seed, step } => (true, rng::stream(seed, &[DROPOUT_TAG, step, example])),
    }
}

fn content_len(target: &[usize]) -> usize {
    target.iter().position(|&t| t == PAD).unwrap_or(target.len())
}

/// Per-example teacher-forced pass: `(summed cross-entropy, logits [T, V])`.
pub struct TeacherForced {
    pub nll: Vec<Var>,
    pub logits: Vec<Var>,
    pub stats: Vec<BatchStats>,
}

/// Feeds the ground-truth token at every step. Targets are `START … END`
/// optionally followed by PAD, which contributes nothing.
pub fn teacher_force(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    images: &[&GrayImage],
    targets: &[&[usize]],
    mode: ForwardMode,
    example_ids: &[u64],
) -> Result<TeacherForced> {
    if images.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if images.len() != targets.len() || example_ids.len() != targets.len() {
        return Err(Error::Invalid("images, targets and ids differ in length".into()));
    }
    let (mems, stats) = model.encode_batch(tape, bound, images, matches!(mode, ForwardMode::Train { .. }))?;
    let mut out = TeacherForced {
        nll: Vec::new(),
        logits: Vec::new(),
        stats,
    };
    for ((mem, target), &ex) in mems.iter().zip(targets).zip(example_ids) {
        let n = content_len(target);
        if n < 2 || target[0] != START {
            return Err(Error::Invalid("target must be START … END".into()));
        }
        let (train, mut r) = dropout_rng(mode, ex);
        let mut state = model.decoder.init_state(tape, bound, mem)?;
        let mut rows = Vec::with_capacity(n - 1);
        for &prev in &target[..n - 1] {
            let step = model.decoder.step(tape, bound, &state, prev, mem, train, &mut r)?;
            rows.push(step.logits);
            state = step.state;
        }
        let logits = tape.concat(&rows, 0)?;
        out.nll.push(tape.cross_entropy(logits, &target[1..n])?);
        out.logits.push(logits);
    }
    Ok(out)
}

/// Mean over the batch of each sequence's summed cross-entropy.
pub fn mle_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    images: &[&GrayImage],
    targets: &[&[usize]],
    mode: ForwardMode,
    example_ids: &[u64],
) -> Result<(Var, Vec<BatchStats>)> {
    let tf = teacher_force(model, tape, bound, images, targets, mode, example_ids)?;
    let total = tape.add_n(&tf.nll)?;
    let loss = tape.scale(total, 1.0 / images.len() as f64)?;
    Ok((loss, tf.stats))
}

/// Teacher-forced accuracy and loss in eval mode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TokenStats {
    pub correct: usize,
    pub total: usize,
    pub nll: f64,
}

impl TokenStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

pub fn token_stats(model: &Model, set: &TrainSet, batch_size: usize) -> Result<TokenStats> {
    let mut s = TokenStats::default();
    for group in &set.groups {
        for chunk in group.chunks(batch_size) {
            let mut tape = Tape::inference();
            let bound = model.store.bind(&mut tape);
            let images: Vec<&GrayImage> = chunk.iter().map(|&i| &set.examples[i].image).collect();
            let targets: Vec<&[usize]> = chunk.iter().map(|&i| set.examples[i].target.as_slice()).collect();
            let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let tf = teacher_force(model, &mut tape, &bound, &images, &targets, ForwardMode::Eval, &ids)?;
            for ((&logits, &nll), t) in tf.logits.iter().zip(&tf.nll).zip(&targets) {
                s.nll += tape.value(nll).item();
                let val = tape.value(logits);
                let v = val.shape()[1];
                for (row, &gold) in val.data().chunks(v).zip(&t[1..]) {
                    let mut best = 0;
                    for j in 1..v {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    s.correct += usize::from(best == gold);
                    s.total += 1;
                }
            }
        }
    }
    Ok(s)
}

/// A sequence drawn token by token from the model's own distribution.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Content tokens, without START/END.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// The length cap was hit before END.
    pub truncated: bool,
    /// Token fed to the decoder at each step (instrumentation).
    pub inputs: Vec<usize>,
    /// Token drawn at each step, END included.
    pub drawn: Vec<usize>,
    /// `-log p` of each drawn token, on the tape.
    pub step_nll: Vec<Var>,
}

impl Sample {
    /// Steps whose input differs from the previous step's draw.
    pub fn exposure_violations(&self) -> usize {
        let mut bad = usize::from(self.inputs.first().is_some_and(|&t| t != START));
        for t in 1..self.inputs.len() {
            bad += usize::from(self.inputs[t] != self.drawn[t - 1]);
        }
        bad
    }
}

/// Inverse-CDF draw from the softmax of `logits`.
pub fn draw_token(logits: &[f64], rng: &mut impl Rng) -> usize {
    let mut p = vec![0.0; logits.len()];
    softmax_row(logits, &mut p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last = i;
        }
        acc += pi;
        if u < acc {
            return i;
        }
    }
    last
}

/// Samples on `tape` (recording the per-step log-probabilities) with the
/// model in eval mode; the token fed at step `t` is the draw of step `t-1`.
pub fn sample_on_tape(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    memory: &AttendedMemory,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let mut state = model.decoder.init_state(tape, bound, memory)?;
    let mut s = Sample {
        tokens: Vec::new(),
        log_prob: 0.0,
        truncated: true,
        inputs: Vec::new(),
        drawn: Vec::new(),
        step_nll: Vec::new(),
    };
    let mut prev = START;
    let mut no_dropout = rng::stream(0, &[]);
    for _ in 0..max_len {
        s.inputs.push(prev);
        let out = model.decoder.step(tape, bound, &state, prev, memory, false, &mut no_dropout)?;
        let tok = draw_token(tape.value(out.logits).data(), rng);
        let nll = tape.cross_entropy(out.logits, &[tok])?;
        s.log_prob -= tape.value(nll).item();
        s.step_nll.push(nll);
        s.drawn.push(tok);
        if tok == END {
            s.truncated = false;
            break;
        }
        s.tokens.push(tok);
        prev = tok;
        state = out.state;
    }
    Ok(s)
}

/// Draws one sequence for a padded image without recording gradients.
pub fn sample_sequence(model: &Model, image: &GrayImage, max_len: usize, rng: &mut impl Rng) -> Result<Sample> {
    let mut tape = Tape::inference();
    let bound = model.store.bind(&mut tape);
    let mem = model.encode_one(&mut tape, &bound, image)?;
    sample_on_tape(model, &mut tape, &bound, &mem, max_len, rng)
}

/// Maps `(reference, candidate)` content ids to a reward in `[0, 1]`.
pub trait RewardFn {
    fn reward(&self, reference: &[usize], candidate: &[usize]) -> f64;
}

/// Smoothed sentence BLEU-4.
#[derive(Clone, Copy, Debug, Default)]
pub struct Bleu4Reward;

impl RewardFn for Bleu4Reward {
    fn reward(&self, reference: &[usize], candidate: &[usize]) -> f64 {
        sentence_bleu(candidate, reference).clamp(0.0, 1.0)
    }
}

impl<F: Fn(&[usize], &[usize]) -> f64> RewardFn for F {
    fn reward(&self, reference: &[usize], candidate: &[usize]) -> f64 {
        self(reference, candidate).clamp(0.0, 1.0)
    }
}

/// `R_j - b_j` for each of the `k` samples of one example.
pub fn advantages(rewards: &[f64], baseline: Baseline) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::Invalid(format!("{k} samples: the reward baseline needs at least 2")));
    }
    let sum: f64 = rewards.iter().sum();
    Ok(match baseline {
        Baseline::Mean => {
            let mean = sum / k as f64;
            rewards.iter().map(|r| r - mean).collect()
        }
        Baseline::LeaveOneOut => rewards.iter().map(|r| r - (sum - r) / (k - 1) as f64).collect(),
    })
}

/// `scale · Σ_j adv_j · nll_j`; its gradient is `-scale · Σ_j adv_j ∇log p_j`.
pub fn policy_loss(tape: &mut Tape, nll: &[Var], adv: &[f64], scale: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(nll.len());
    for (&v, &a) in nll.iter().zip(adv) {
        terms.push(tape.scale(v, a * scale)?);
    }
    tape.add_n(&terms)
}

/// Policy-gradient estimates of `∂E[R]/∂θ` for a one-step bandit whose
/// policy is `softmax(θ)`. Each of the `groups` entries uses `k` draws and the
/// same baseline, loss and backward pass as [`reinforce_step`].
pub fn bandit_gradients(
    theta: &[f64],
    reward: impl Fn(usize) -> f64,
    k: usize,
    baseline: Baseline,
    groups: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(groups);
    for _ in 0..groups {
        let mut tape = Tape::new();
        let logits = tape.leaf(crate::Tensor::new([1, theta.len()], theta.to_vec())?, true);
        let mut nll = Vec::with_capacity(k);
        let mut rewards = Vec::with_capacity(k);
        for _ in 0..k {
            let tok = draw_token(theta, rng);
            nll.push(tape.cross_entropy(logits, &[tok])?);
            rewards.push(reward(tok));
        }
        let adv = advantages(&rewards, baseline)?;
        let loss = policy_loss(&mut tape, &nll, &adv, 1.0 / k as f64)?;
        let g = tape.backward(loss)?;
        // the loss is the negated objective
        out.push(g.get(logits).map_or_else(|| vec![0.0; theta.len()], |t| t.data().iter().map(|v| -v).collect()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RlStats {
    pub mean_reward: f64,
    pub loss: f64,
    pub sampled_steps: usize,
    pub violations: usize,
}

fn tracks(freeze_encoder: bool) -> impl Fn(&Parameter) -> bool {
    move |p: &Parameter| !(freeze_encoder && p.name.starts_with("encoder."))
}

/// One policy-gradient update on `batch` (indices into `set`): `k` samples
/// per example, rewards against the reference, Adam at the optimizer's rate.
pub fn reinforce_step(
    model: &mut Model,
    adam: &mut Adam,
    set: &TrainSet,
    batch: &[usize],
    reward: &dyn RewardFn,
    step: u64,
) -> Result<RlStats> {
    let cfg = model.config.clone();
    let k = cfg.k_samples;
    if k < 2 {
        return Err(Error::Invalid(format!("k = {k}: the reward baseline needs at least 2 samples")));
    }
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let max_len = cfg.max_seq_len + 1;
    let mut tape = Tape::new();
    let bound = model.store.bind_with(&mut tape, tracks(cfg.freeze_encoder));
    let images: Vec<&GrayImage> = batch.iter().map(|&i| &set.examples[i].image).collect();
    let (mems, _) = model.encode_batch(&mut tape, &bound, &images, false)?;
    let mut stats = RlStats::default();
    let mut terms = Vec::new();
    let scale = 1.0 / (batch.len() * k) as f64;
    for (&ex, mem) in batch.iter().zip(&mems) {
        let mut r = rng::stream(cfg.seed, &[SAMPLE_TAG, step, ex as u64]);
        let reference = set.examples[ex].reference();
        let mut nll = Vec::with_capacity(k);
        let mut rewards = Vec::with_capacity(k);
        for _ in 0..k {
            let s = sample_on_tape(model, &mut tape, &bound, mem, max_len, &mut r)?;
            stats.sampled_steps += s.inputs.len();
            stats.violations += s.exposure_violations();
            rewards.push(reward.reward(reference, &s.tokens));
            nll.push(tape.add_n(&s.step_nll)?);
        }
        stats.mean_reward += rewards.iter().sum::<f64>();
        let adv = advantages(&rewards, cfg.baseline)?;
        terms.push(policy_loss(&mut tape, &nll, &adv, scale)?);
    }
    stats.mean_reward /= (batch.len() * k) as f64;
    let loss = tape.add_n(&terms)?;
    stats.loss = tape.value(loss).item();
    if !stats.loss.is_finite() {
        return Err(Error::Numerical {
            step,
            what: "policy loss is not finite".into(),
        });
    }
    let grads = tape.backward(loss)?;
    model.store.zero_grad();
    model.store.accumulate(&bound, &grads);
    if cfg.clip_norm > 0.0 {
        model.store.clip_grad_norm(cfg.clip_norm);
    }
    adam.step_filtered(&mut model.store, tracks(cfg.freeze_encoder))?;
    Ok(stats)
}

/// One teacher-forced update; returns the batch loss.
pub fn mle_step(model: &mut Model, adam: &mut Adam, set: &TrainSet, batch: &[usize], step: u64) -> Result<f64> {
    let seed = model.config.seed;
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let images: Vec<&GrayImage> = batch.iter().map(|&i| &set.examples[i].image).collect();
    let targets: Vec<&[usize]> = batch.iter().map(|&i| set.examples[i].target.as_slice()).collect();
    let ids: Vec<u64> = batch.iter().map(|&i| i as u64).collect();
    let (loss, stats) = mle_loss(model, &mut tape, &bound, &images, &targets, ForwardMode::Train { seed, step }, &ids)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical {
            step,
            what: format!("loss is {value}"),
        });
    }
    let grads = tape.backward(loss)?;
    model.store.zero_grad();
    model.store.accumulate(&bound, &grads);
    if model.config.clip_norm > 0.0 {
        model.store.clip_grad_norm(model.config.clip_norm);
    }
    if !model.store.grad_norm().is_finite() {
        return Err(Error::Numerical {
            step,
            what: "gradient is not finite".into(),
        });
    }
    adam.step(&mut model.store)?;
    model.encoder.update_running_stats(&mut model.store, &stats);
    Ok(value)
}

/// Greedy-decoding quality on a set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecodeStats {
    pub exact: f64,
    pub bleu: f64,
}

pub fn decode_stats(model: &Model, set: &TrainSet, max_len: usize) -> Result<DecodeStats> {
    if set.is_empty() {
        return Ok(DecodeStats::default());
    }
    let mut hits = 0;
    let mut cands = Vec::with_capacity(set.len());
    let mut refs = Vec::with_capacity(set.len());
    for ex in &set.examples {
        let mut s = ModelScorer::new(model, &ex.image)?;
        let d = greedy_decode(&mut s, max_len)?;
        hits += usize::from(d.finished && d.tokens == ex.reference());
        cands.push(d.tokens);
        refs.push(ex.reference().to_vec());
    }
    Ok(DecodeStats {
        exact: hits as f64 / set.len() as f64,
        bleu: bleu4(&cands, &refs, BleuMode::Corpus)?,
    })
}

/// Progress that must survive a restart.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub phase: Phase,
    pub step: u64,
    pub best: f64,
    pub bad_validations: u32,
    pub finished: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `best.ckpt` and `last.ckpt`; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Append-only TSV log.
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub best: f64,
    pub last_value: f64,
    pub stop_reason: String,
    pub rl: RlStats,
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub state: TrainerState,
}

impl Trainer {
    /// Starts `model.config.phase` from step 0 with fresh optimizer state.
    pub fn new(mut model: Model) -> Trainer {
        let cfg = &model.config;
        let lr = match cfg.phase {
            Phase::Mle => cfg.lr_mle,
            Phase::Rl => cfg.lr_rl,
        };
        let adam = Adam {
            lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
        };
        let phase = cfg.phase;
        for p in model.store.iter_mut() {
            p.moments = None;
            p.grad = None;
        }
        Trainer {
            model,
            adam,
            state: TrainerState {
                phase,
                step: 0,
                best: f64::NEG_INFINITY,
                bad_validations: 0,
                finished: false,
            },
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = self.model.store.clone();
        params.zero_grad();
        let mut c = Checkpoint::new(params);
        let m = &mut c.meta;
        m.insert("config".into(), self.model.config.to_text());
        m.insert("vocab".into(), self.model.vocab.content_tokens().join("\n"));
        m.insert("trainer.phase".into(), self.model.config.get("phase").expect("known key"));
        m.insert("trainer.step".into(), self.state.step.to_string());
        m.insert("trainer.best".into(), format!("{:?}", self.state.best.to_bits()));
        m.insert("trainer.bad_validations".into(), self.state.bad_validations.to_string());
        m.insert("trainer.finished".into(), self.state.finished.to_string());
        m.insert("adam.step".into(), self.adam.step.to_string());
        m.insert("adam.lr".into(), format!("{:?}", self.adam.lr.to_bits()));
        c
    }

    /// Restores model, optimizer and progress exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Trainer> {
        let model = model_from_checkpoint(ckpt, &[] as &[&str])?;
        let parse_u64 = |k: &str| -> Result<u64> {
            ckpt.meta(k)?
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint entry `{k}` is not an integer")))
        };
        let phase = model.config.phase;
        let adam = Adam {
            lr: f64::from_bits(parse_u64("adam.lr")?),
            beta1: model.config.adam_beta1,
            beta2: model.config.adam_beta2,
            eps: model.config.adam_eps,
            step: parse_u64("adam.step")?,
        };
        let state = TrainerState {
            phase,
            step: parse_u64("trainer.step")?,
            best: f64::from_bits(parse_u64("trainer.best")?),
            bad_validations: parse_u64("trainer.bad_validations")? as u32,
            finished: ckpt.meta("trainer.finished")? == "true",
        };
        Ok(Trainer { model, adam, state })
    }

    fn validate(&self, val: &TrainSet) -> Result<(f64, DecodeStats)> {
        let cfg = &self.model.config;
        let max_len = cfg.max_seq_len + 1;
        let wants_decode = cfg.phase == Phase::Rl || cfg.target_exact_match > 0.0;
        let dec = if wants_decode {
            decode_stats(&self.model, val, max_len)?
        } else {
            DecodeStats::default()
        };
        let metric = match cfg.phase {
            Phase::Mle => token_stats(&self.model, val, cfg.batch_size)?.accuracy(),
            Phase::Rl => dec.bleu,
        };
        Ok((metric, dec))
    }

    /// Runs the configured phase until a stopping rule fires.
    pub fn train(&mut self, train: &TrainSet, val: &TrainSet, opts: &TrainOptions) -> Result<TrainSummary> {
        let cfg = self.model.config.clone();
        if train.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        if val.is_empty() {
            return Err(Error::Invalid("validation set is empty".into()));
        }
        if let Some(d) = &opts.out_dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut log = match &opts.log {
            Some(p) => Some(TsvLog::open(p)?),
            None => None,
        };
        let per_epoch = train.batches_per_epoch(cfg.batch_size) as u64;
        let started = Instant::now();
        let mut summary = TrainSummary {
            steps: 0,
            best: self.state.best,
            last_value: f64::NAN,
            stop_reason: String::new(),
            rl: RlStats::default(),
        };
        let mut rl_reward_sum = 0.0;
        let mut rl_steps = 0usize;
        let mut epoch_cache: Option<(u64, Vec<Vec<usize>>)> = None;
        let reason = loop {
            if self.state.finished {
                break "already finished".to_string();
            }
            if cfg.max_steps > 0 && self.state.step >= cfg.max_steps {
                break format!("reached max_steps {}", cfg.max_steps);
            }
            if cfg.max_epochs > 0 && self.state.step >= cfg.max_epochs * per_epoch {
                break format!("reached max_epochs {}", cfg.max_epochs);
            }
            let step = self.state.step;
            let epoch = step / per_epoch;
            if epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
                epoch_cache = Some((epoch, train.epoch_batches(cfg.batch_size, cfg.seed, epoch)));
            }
            let batch = &epoch_cache.as_ref().expect("filled above").1[(step % per_epoch) as usize];
            let value = match cfg.phase {
                Phase::Mle => mle_step(&mut self.model, &mut self.adam, train, batch, step)?,
                Phase::Rl => {
                    let s = reinforce_step(&mut self.model, &mut self.adam, train, batch, &Bleu4Reward, step)?;
                    summary.rl.sampled_steps += s.sampled_steps;
                    summary.rl.violations += s.violations;
                    rl_reward_sum += s.mean_reward;
                    rl_steps += 1;
                    s.mean_reward
                }
            };
            if let Some(p) = self.model.store.iter().find(|p| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Numerical {
                    step,
                    what: format!("parameter `{}` is not finite after the update", p.name),
                });
            }
            self.state.step += 1;
            summary.steps += 1;
            summary.last_value = value;
            let mut val_text = String::new();
            let mut stop = None;
            if self.state.step.is_multiple_of(cfg.validate_every) {
                let (metric, dec) = self.validate(val)?;
                val_text = format!("{metric:.6}");
                log::info!(
                    "step {} {:?} value {value:.5} validation {metric:.5} exact {:.3} after {:.1}s",
                    self.state.step,
                    cfg.phase,
                    dec.exact,
                    started.elapsed().as_secs_f64()
                );
                if metric > self.state.best {
                    self.state.best = metric;
                    self.state.bad_validations = 0;
                    self.save(opts, "best.ckpt")?;
                } else {
                    self.state.bad_validations += 1;
                }
                if cfg.patience > 0 && self.state.bad_validations >= cfg.patience {
                    stop = Some(format!("no improvement in {} validations", cfg.patience));
                }
                if cfg.target_exact_match > 0.0 && dec.exact >= cfg.target_exact_match {
                    stop = Some(format!("validation exact match {:.3} reached target", dec.exact));
                }
                self.state.finished = stop.is_some();
                self.save(opts, "last.ckpt")?;
            }
            if let Some(l) = log.as_mut() {
                l.row(self.state.step, cfg.phase, value, &val_text)?;
            }
            if let Some(r) = stop {
                break r;
            }
        };
        self.save(opts, "last.ckpt")?;
        summary.best = self.state.best;
        summary.stop_reason = reason;
        if rl_steps > 0 {
            summary.rl.mean_reward = rl_reward_sum / rl_steps as f64;
        }
        Ok(summary)
    }

    fn save(&self, opts: &TrainOptions, name: &str) -> Result<()> {
        match &opts.out_dir {
            Some(d) => self.to_checkpoint().save(&d.join(name)),
            None => Ok(()),
        }
    }
}

/// Rebuilds a model from a checkpoint, applying `overrides` to its stored
/// configuration. Architecture keys must not change.
pub fn model_from_checkpoint<S: AsRef<str>>(ckpt: &Checkpoint, overrides: &[S]) -> Result<Model> {
    let mut cfg = Config::paper();
    cfg.apply_text(ckpt.meta("config")?)?;
    cfg.apply_overrides(overrides)?;
    let text = ckpt.meta("vocab")?;
    let vocab = Vocabulary::from_tokens(text.lines().filter(|l| !l.is_empty()).map(String::from))?;
    Model::from_store(&cfg, vocab, ckpt.params.clone())
}

struct TsvLog {
    file: std::fs::File,
}

impl TsvLog {
    fn open(path: &Path) -> Result<TsvLog> {
        let fresh = !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "step\tphase\tvalue\tvalidation").map_err(|e| Error::io(path, e))?;
        }
        Ok(TsvLog { file })
    }

    /// No wall-clock column, so repeated runs write identical logs.
    fn row(&mut self, step: u64, phase: Phase, value: f64, val: &str) -> Result<()> {
        let phase = match phase {
            Phase::Mle => "mle",
            Phase::Rl => "rl",
        };
        writeln!(self.file, "{step}\t{phase}\t{value:.6}\t{val}")
            .map_err(|e| Error::io(PathBuf::from("training log"), e))
    }
}
