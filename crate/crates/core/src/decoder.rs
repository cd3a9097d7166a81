//! Attentional stacked-LSTM language model, advanced one token at a time.

use rand::Rng;

use crate::encoder::{ensure_param, MemoryBank};
use crate::error::{Error, Result};
use crate::param::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden size of every LSTM layer; also the attentional vector size.
    pub hidden: usize,
    /// Depth `D` of the memory bank entries.
    pub memory_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    /// `h = o * tanh(c)` instead of `h = o * c`.
    pub standard_cell_output: bool,
    /// Score attention with the freshly updated top hidden state `h_t`
    /// instead of the previous one `h_{t-1}`.
    pub query_current: bool,
}

#[derive(Clone, Debug)]
struct LstmLayer {
    w_ix: ParamId,
    w_ih: ParamId,
    w_fx: ParamId,
    w_fh: ParamId,
    w_ox: ParamId,
    w_oh: ParamId,
    w_cx: ParamId,
    w_ch: ParamId,
    b_i: ParamId,
    b_f: ParamId,
    b_o: ParamId,
    b_c: ParamId,
    // initial-state projections from the mean memory vector
    w_h: ParamId,
    b_h: ParamId,
    w_c: ParamId,
    b_c0: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    embedding: ParamId,
    layers: Vec<LstmLayer>,
    w1: ParamId,
    w2: ParamId,
    beta: ParamId,
    w3: ParamId,
    w4: ParamId,
}

/// Recurrent state carried between steps.
#[derive(Clone, Debug)]
pub struct DecoderState {
    /// `(h, c)` per layer, each `[1, hidden]`.
    pub layers: Vec<(Var, Var)>,
    /// Attentional vector `O` of the previous step, `[1, hidden]`.
    pub attentional: Var,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `[1, V]`.
    pub logits: Var,
    /// Attention weights `[1, L]`.
    pub alpha: Var,
    pub state: DecoderState,
}

/// A memory bank with its attention keys `W2 e_i` precomputed.
#[derive(Clone, Debug)]
pub struct AttendedMemory {
    pub bank: MemoryBank,
    keys: Var,
}

impl Decoder {
    pub fn build(config: DecoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if config.layers == 0 || config.vocab_size == 0 || config.hidden == 0 || config.embed_dim == 0 {
            return Err(Error::Config(format!("degenerate decoder config {config:?}")));
        }
        let (h, e, d, v) = (config.hidden, config.embed_dim, config.memory_dim, config.vocab_size);
        let mut mat = |store: &mut ParamStore, name: String, shape: [usize; 2]| {
            ensure_param(store, &name, &shape, true, |s| s.add_glorot(&name, &shape, &mut *rng))
        };
        let embedding = mat(store, "decoder.embedding".into(), [v, e])?;
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let input = if l == 0 { e + h } else { h };
            let p = format!("decoder.layer{l}");
            let mut lw = |store: &mut ParamStore, n: &str, rows: usize| mat(store, format!("{p}.{n}"), [rows, h]);
            let w_ix = lw(store, "W_ix", input)?;
            let w_ih = lw(store, "W_ih", h)?;
            let w_fx = lw(store, "W_fx", input)?;
            let w_fh = lw(store, "W_fh", h)?;
            let w_ox = lw(store, "W_ox", input)?;
            let w_oh = lw(store, "W_oh", h)?;
            let w_cx = lw(store, "W_cx", input)?;
            let w_ch = lw(store, "W_ch", h)?;
            let w_h = lw(store, "W_h", d)?;
            let w_c = lw(store, "W_c", d)?;
            let bias = |store: &mut ParamStore, n: &str| {
                let name = format!("{p}.{n}");
                ensure_param(store, &name, &[1, h], true, |s| s.add_zeros(&name, &[1, h]))
            };
            layers.push(LstmLayer {
                w_ix,
                w_ih,
                w_fx,
                w_fh,
                w_ox,
                w_oh,
                w_cx,
                w_ch,
                b_i: bias(store, "b_i")?,
                b_f: bias(store, "b_f")?,
                b_o: bias(store, "b_o")?,
                b_c: bias(store, "b_c")?,
                w_h,
                b_h: bias(store, "b_h")?,
                w_c,
                b_c0: bias(store, "b_c0")?,
            });
        }
        let w1 = mat(store, "decoder.attention.W1".into(), [h, h])?;
        let w2 = mat(store, "decoder.attention.W2".into(), [d, h])?;
        let beta = mat(store, "decoder.attention.beta".into(), [h, 1])?;
        let w3 = mat(store, "decoder.W3".into(), [h + d, h])?;
        let w4 = mat(store, "decoder.W4".into(), [h, v])?;
        Ok(Decoder {
            config,
            embedding,
            layers,
            w1,
            w2,
            beta,
            w3,
            w4,
        })
    }

    /// Precomputes the attention keys for a memory bank.
    pub fn attach(&self, tape: &mut Tape, bound: &Bound, bank: &MemoryBank) -> Result<AttendedMemory> {
        if bank.is_empty() {
            return Err(Error::Invalid("empty memory bank".into()));
        }
        let keys = tape.matmul(bank.entries, bound.var(self.w2))?;
        Ok(AttendedMemory { bank: bank.clone(), keys })
    }

    /// `h0 = tanh(W_h mean(e) + b_h)`, `c0 = tanh(W_c mean(e) + b_c)` per
    /// layer; the attentional vector starts at zero.
    pub fn init_state(&self, tape: &mut Tape, bound: &Bound, memory: &AttendedMemory) -> Result<DecoderState> {
        let mean = tape.mean(memory.bank.entries, 0)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let h = affine_tanh(tape, mean, bound.var(l.w_h), bound.var(l.b_h))?;
            let c = affine_tanh(tape, mean, bound.var(l.w_c), bound.var(l.b_c0))?;
            layers.push((h, c));
        }
        let attentional = tape.constant(Tensor::zeros([1, self.config.hidden]));
        Ok(DecoderState {
            layers,
            attentional,
            step: 0,
        })
    }

    /// Soft attention: `a_i = βᵀ tanh(W1 q + W2 e_i)`, `α = softmax(a)`,
    /// `C = Σ α_i e_i`. Returns `(α [1,L], C [1,D])`.
    pub fn attention(&self, tape: &mut Tape, bound: &Bound, query: Var, memory: &AttendedMemory) -> Result<(Var, Var)> {
        let q = tape.matmul(query, bound.var(self.w1))?;
        let pre = tape.add(memory.keys, q)?;
        let act = tape.tanh(pre)?;
        let scores = tape.matmul(act, bound.var(self.beta))?;
        let l = memory.bank.len();
        let scores = tape.reshape(scores, &[1, l])?;
        let alpha = tape.softmax(scores)?;
        let context = tape.matmul(alpha, memory.bank.entries)?;
        Ok((alpha, context))
    }

    fn lstm_cell(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        l: &LstmLayer,
        x: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let mut gate = |wx: ParamId, wh: ParamId, b: ParamId| -> Result<Var> {
            let a = tape.matmul(x, bound.var(wx))?;
            let r = tape.matmul(h_prev, bound.var(wh))?;
            tape.add_n(&[a, r, bound.var(b)])
        };
        let i_pre = gate(l.w_ix, l.w_ih, l.b_i)?;
        let f_pre = gate(l.w_fx, l.w_fh, l.b_f)?;
        let o_pre = gate(l.w_ox, l.w_oh, l.b_o)?;
        let g_pre = gate(l.w_cx, l.w_ch, l.b_c)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let g = tape.tanh(g_pre)?;
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let h = if self.config.standard_cell_output {
            let tc = tape.tanh(c)?;
            tape.mul(o, tc)?
        } else {
            tape.mul(o, c)?
        };
        Ok((h, c))
    }

    /// One decoding step from `prev_token`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        state: &DecoderState,
        prev_token: usize,
        memory: &AttendedMemory,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<StepOutput> {
        if prev_token >= self.config.vocab_size {
            return Err(Error::Invalid(format!(
                "token id {prev_token} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        let rate = self.config.dropout;
        let w = tape.embedding(bound.var(self.embedding), &[prev_token])?;
        let w = tape.dropout(w, rate, train, rng)?;
        let mut x = tape.concat(&[w, state.attentional], 1)?;
        let mut new_layers = Vec::with_capacity(self.layers.len());
        for (l, &(h_prev, c_prev)) in self.layers.iter().zip(&state.layers) {
            let (h, c) = self.lstm_cell(tape, bound, l, x, h_prev, c_prev)?;
            new_layers.push((h, c));
            x = h;
        }
        let top_prev = state.layers.last().expect("at least one layer").0;
        let top = new_layers.last().expect("at least one layer").0;
        let query = if self.config.query_current { top } else { top_prev };
        let (alpha, context) = self.attention(tape, bound, query, memory)?;
        let hc = tape.concat(&[top, context], 1)?;
        let proj = tape.matmul(hc, bound.var(self.w3))?;
        let o = tape.tanh(proj)?;
        let o = tape.dropout(o, rate, train, rng)?;
        let logits = tape.matmul(o, bound.var(self.w4))?;
        Ok(StepOutput {
            logits,
            alpha,
            state: DecoderState {
                layers: new_layers,
                attentional: o,
                step: state.step + 1,
            },
        })
    }
}

fn affine_tanh(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let y = tape.add(y, b)?;
    tape.tanh(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny(store: &mut ParamStore, vocab: usize) -> Decoder {
        let cfg = DecoderConfig {
            vocab_size: vocab,
            embed_dim: 3,
            hidden: 4,
            memory_dim: 4,
            layers: 2,
            dropout: 0.0,
            standard_cell_output: false,
            query_current: false,
        };
        Decoder::build(cfg, store, &mut rng::stream(5, &[])).unwrap()
    }

    fn bank(tape: &mut Tape, rows: usize, cols: usize, d: usize, f: impl Fn(usize) -> f64) -> MemoryBank {
        let n = rows * cols;
        let entries = tape.constant(Tensor::new([n, d], (0..n * d).map(f).collect()).unwrap());
        MemoryBank {
            entries,
            rows,
            cols,
            provenance: (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect(),
        }
    }

    #[test]
    fn zero_memory_and_biases_give_zero_initial_state() {
        let mut store = ParamStore::new();
        let dec = tiny(&mut store, 5);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let b = bank(&mut tape, 2, 2, 4, |_| 0.0);
        let mem = dec.attach(&mut tape, &bound, &b).unwrap();
        let s = dec.init_state(&mut tape, &bound, &mem).unwrap();
        for &(h, c) in &s.layers {
            assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
            assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_entry_attention_is_that_entry() {
        let mut store = ParamStore::new();
        let dec = tiny(&mut store, 5);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let b = bank(&mut tape, 1, 1, 4, |i| i as f64 - 1.5);
        let mem = dec.attach(&mut tape, &bound, &b).unwrap();
        let q = tape.constant(Tensor::row(&[0.3, -0.2, 0.1, 0.9]));
        let (alpha, ctx) = dec.attention(&mut tape, &bound, q, &mem).unwrap();
        assert_eq!(tape.value(alpha).data(), &[1.0]);
        assert_eq!(tape.value(ctx).data(), &[-1.5, -0.5, 0.5, 1.5]);
    }

    #[test]
    fn identical_entries_get_uniform_weights() {
        let mut store = ParamStore::new();
        let dec = tiny(&mut store, 5);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let b = bank(&mut tape, 2, 3, 4, |i| (i % 4) as f64 * 0.25);
        let mem = dec.attach(&mut tape, &bound, &b).unwrap();
        let q = tape.constant(Tensor::row(&[1.0, 2.0, 3.0, 4.0]));
        let (alpha, ctx) = dec.attention(&mut tape, &bound, q, &mem).unwrap();
        for &a in tape.value(alpha).data() {
            assert!((a - 1.0 / 6.0).abs() < 1e-15);
        }
        for (k, &c) in tape.value(ctx).data().iter().enumerate() {
            assert!((c - k as f64 * 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_token_is_rejected() {
        let mut store = ParamStore::new();
        let dec = tiny(&mut store, 5);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let b = bank(&mut tape, 1, 2, 4, |i| i as f64);
        let mem = dec.attach(&mut tape, &bound, &b).unwrap();
        let s = dec.init_state(&mut tape, &bound, &mem).unwrap();
        let mut r = rng::stream(0, &[]);
        assert!(dec.step(&mut tape, &bound, &s, 5, &mem, false, &mut r).is_err());
        assert!(dec.step(&mut tape, &bound, &s, 4, &mem, false, &mut r).is_ok());
    }
}
