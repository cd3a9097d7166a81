//! Greedy and beam-search decoding over any next-token scorer.

use std::cmp::Ordering;

use crate::data::image::GrayImage;
use crate::data::vocab::{END, PAD, START};
use crate::decoder::{AttendedMemory, DecoderState};
use crate::error::{Error, Result};
use crate::kernels::log_sum_exp;
use crate::model::Model;
use crate::param::Bound;
use crate::rng::{self, StreamRng};
use crate::tape::Tape;

/// Result of advancing a scorer by one token.
#[derive(Clone, Debug)]
pub struct Advance<S> {
    pub log_probs: Vec<f64>,
    pub state: S,
    /// Attention weights used for this step, when the scorer has them.
    pub alpha: Option<Vec<f64>>,
}

/// A left-to-right next-token distribution.
pub trait StepScorer {
    type State: Clone;

    fn initial(&mut self) -> Result<Self::State>;

    /// Log-probabilities of the next token after feeding `prev` in `state`.
    fn advance(&mut self, state: &Self::State, prev: usize) -> Result<Advance<Self::State>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Content tokens, without START/END.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Whether END was emitted (otherwise the length cap was hit).
    pub finished: bool,
    /// Attention weights per step, including the step that emitted END.
    pub alphas: Vec<Vec<f64>>,
}

impl Decoded {
    pub fn truncated(&self) -> bool {
        !self.finished
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| z - lse).collect()
}

/// PAD and START are inputs only; decoding never emits them.
fn emittable(token: usize) -> bool {
    token != PAD && token != START
}

/// Index of the largest emittable value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if emittable(i) && best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(END)
}

/// Feeds back the most probable token until END or `max_len` tokens.
pub fn greedy_decode<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be at least 1".into()));
    }
    let mut state = scorer.initial()?;
    let mut prev = START;
    let mut out = Decoded {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        alphas: Vec::new(),
    };
    for _ in 0..max_len {
        let adv = scorer.advance(&state, prev)?;
        let tok = argmax(&adv.log_probs);
        out.log_prob += adv.log_probs[tok];
        out.alphas.extend(adv.alpha);
        if tok == END {
            out.finished = true;
            break;
        }
        out.tokens.push(tok);
        prev = tok;
        state = adv.state;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Hyp<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    /// Tokens emitted including END.
    len: usize,
    state: S,
    finished: bool,
    alphas: Vec<Vec<f64>>,
}

fn rank(log_prob: f64, len: usize, length_norm: bool) -> f64 {
    if length_norm && len > 0 {
        log_prob / len as f64
    } else {
        log_prob
    }
}

struct Candidate {
    score: f64,
    log_prob: f64,
    token: usize,
    parent: usize,
}

/// Higher score first, then lower token id, then lower parent index.
fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.token.cmp(&b.token))
        .then(a.parent.cmp(&b.parent))
}

/// Beam search over summed log-probabilities. Finished hypotheses stay in
/// the pool and compete with new expansions; search stops when every kept
/// hypothesis is finished or after `max_len` tokens.
pub fn beam_decode<S: StepScorer>(scorer: &mut S, beam: usize, max_len: usize, length_norm: bool) -> Result<Decoded> {
    if beam == 0 {
        return Err(Error::Invalid("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be at least 1".into()));
    }
    let mut pool = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        len: 0,
        state: scorer.initial()?,
        finished: false,
        alphas: Vec::new(),
    }];
    for _ in 0..max_len {
        if pool.iter().all(|h| h.finished) {
            break;
        }
        let mut advanced = Vec::with_capacity(pool.len());
        let mut cands = Vec::new();
        for (pi, h) in pool.iter().enumerate() {
            if h.finished {
                cands.push(Candidate {
                    score: rank(h.log_prob, h.len, length_norm),
                    log_prob: h.log_prob,
                    token: END,
                    parent: pi,
                });
                advanced.push(None);
                continue;
            }
            let prev = h.tokens.last().copied().unwrap_or(START);
            let adv = scorer.advance(&h.state, prev)?;
            for (tok, &lp) in adv.log_probs.iter().enumerate().filter(|(t, _)| emittable(*t)) {
                let log_prob = h.log_prob + lp;
                cands.push(Candidate {
                    score: rank(log_prob, h.len + 1, length_norm),
                    log_prob,
                    token: tok,
                    parent: pi,
                });
            }
            advanced.push(Some(adv));
        }
        cands.sort_by(candidate_order);
        cands.truncate(beam);
        pool = cands
            .into_iter()
            .map(|c| {
                let parent = &pool[c.parent];
                match &advanced[c.parent] {
                    None => parent.clone(),
                    Some(adv) => {
                        let mut tokens = parent.tokens.clone();
                        let finished = c.token == END;
                        if !finished {
                            tokens.push(c.token);
                        }
                        let mut alphas = parent.alphas.clone();
                        alphas.extend(adv.alpha.clone());
                        Hyp {
                            tokens,
                            log_prob: c.log_prob,
                            len: parent.len + 1,
                            state: adv.state.clone(),
                            finished,
                            alphas,
                        }
                    }
                }
            })
            .collect();
    }
    // The pool is sorted best first, so the first finished entry is the best.
    let best = pool
        .iter()
        .find(|h| h.finished)
        .unwrap_or(&pool[0])
        .clone();
    Ok(Decoded {
        tokens: best.tokens,
        log_prob: best.log_prob,
        finished: best.finished,
        alphas: best.alphas,
    })
}

/// Inference-mode scorer backed by the neural model for one image.
pub struct ModelScorer<'m> {
    model: &'m Model,
    tape: Tape,
    bound: Bound,
    memory: AttendedMemory,
    rng: StreamRng,
}

impl<'m> ModelScorer<'m> {
    /// `image` must already be padded to multiples of 8.
    pub fn new(model: &'m Model, image: &GrayImage) -> Result<Self> {
        let mut tape = Tape::inference();
        let bound = model.store.bind(&mut tape);
        let memory = model.encode_one(&mut tape, &bound, image)?;
        Ok(ModelScorer {
            model,
            tape,
            bound,
            memory,
            rng: rng::stream(0, &[]),
        })
    }

    /// Memory grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.memory.bank.rows, self.memory.bank.cols)
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn initial(&mut self) -> Result<DecoderState> {
        self.model.decoder.init_state(&mut self.tape, &self.bound, &self.memory)
    }

    fn advance(&mut self, state: &DecoderState, prev: usize) -> Result<Advance<DecoderState>> {
        let out = self
            .model
            .decoder
            .step(&mut self.tape, &self.bound, state, prev, &self.memory, false, &mut self.rng)?;
        Ok(Advance {
            log_probs: log_softmax(self.tape.value(out.logits).data()),
            alpha: Some(self.tape.value(out.alpha).data().to_vec()),
            state: out.state,
        })
    }
}

/// Beam search (greedy when `beam == 1` is requested through `greedy`).
pub fn decode_image(model: &Model, image: &GrayImage, beam: usize, greedy: bool) -> Result<Decoded> {
    let cfg = &model.config;
    let mut s = ModelScorer::new(model, image)?;
    if greedy {
        greedy_decode(&mut s, cfg.decode_max_len)
    } else {
        beam_decode(&mut s, beam, cfg.decode_max_len, cfg.length_norm)
    }
}
