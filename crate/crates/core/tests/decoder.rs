mod common;

use im2tex::data::vocab::{END, START};
use im2tex::training::{teacher_force, ForwardMode};
use im2tex::{rng, Model, Tape};
use rand::Rng;

/// Randomizes every trainable parameter, biases included, so no term of the
/// step can hide behind a zero.
fn randomized(seed: u64, content: usize) -> Model {
    let mut m = common::tiny_model(seed, content);
    let mut r = rng::stream(seed, &[0x52]);
    for p in m.store.iter_mut().filter(|p| p.trainable) {
        for v in p.value.data_mut() {
            *v = r.random_range(-0.6..0.6);
        }
    }
    m
}

type Mat = Vec<Vec<f64>>;

fn mat(m: &Model, name: &str) -> Mat {
    let p = m.store.by_name(name).unwrap_or_else(|| panic!("{name}"));
    let cols = *p.value.shape().last().unwrap();
    p.value.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vec_mat(v: &[f64], w: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; w[0].len()];
    for (x, row) in v.iter().zip(w) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += x * a;
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-loop reference decoder for the default cell (`h = o * c`, query
/// `h_{t-1}`), returning log-probabilities per step.
fn reference_log_probs(m: &Model, memory: &[Vec<f64>], inputs: &[usize]) -> Vec<Vec<f64>> {
    let layers = m.config.decoder_layers;
    let l = memory.len() as f64;
    let mean: Vec<f64> = (0..memory[0].len()).map(|k| memory.iter().map(|e| e[k]).sum::<f64>() / l).collect();
    let mut h: Vec<Vec<f64>> = Vec::new();
    let mut c: Vec<Vec<f64>> = Vec::new();
    for li in 0..layers {
        let p = |n: &str| mat(m, &format!("decoder.layer{li}.{n}"));
        h.push(add(&vec_mat(&mean, &p("W_h")), &p("b_h")[0]).iter().map(|v| v.tanh()).collect());
        c.push(add(&vec_mat(&mean, &p("W_c")), &p("b_c0")[0]).iter().map(|v| v.tanh()).collect());
    }
    let hidden = h[0].len();
    let mut o_prev = vec![0.0; hidden];
    let emb = mat(m, "decoder.embedding");
    let (w1, w2, beta) = (mat(m, "decoder.attention.W1"), mat(m, "decoder.attention.W2"), mat(m, "decoder.attention.beta"));
    let (w3, w4) = (mat(m, "decoder.W3"), mat(m, "decoder.W4"));
    let mut out = Vec::new();
    for &tok in inputs {
        let query = h[layers - 1].clone();
        let mut x: Vec<f64> = emb[tok].iter().chain(&o_prev).copied().collect();
        for li in 0..layers {
            let p = |n: &str| mat(m, &format!("decoder.layer{li}.{n}"));
            let gate = |wx: &str, wh: &str, b: &str| add(&add(&vec_mat(&x, &p(wx)), &vec_mat(&h[li], &p(wh))), &p(b)[0]);
            let i: Vec<f64> = gate("W_ix", "W_ih", "b_i").into_iter().map(sigmoid).collect();
            let f: Vec<f64> = gate("W_fx", "W_fh", "b_f").into_iter().map(sigmoid).collect();
            let o: Vec<f64> = gate("W_ox", "W_oh", "b_o").into_iter().map(sigmoid).collect();
            let g: Vec<f64> = gate("W_cx", "W_ch", "b_c").into_iter().map(f64::tanh).collect();
            let cn: Vec<f64> = (0..hidden).map(|k| f[k] * c[li][k] + i[k] * g[k]).collect();
            let hn: Vec<f64> = (0..hidden).map(|k| o[k] * cn[k]).collect();
            c[li] = cn;
            h[li] = hn.clone();
            x = hn;
        }
        let q = vec_mat(&query, &w1);
        let scores: Vec<f64> = memory
            .iter()
            .map(|e| {
                let a: Vec<f64> = add(&vec_mat(e, &w2), &q).iter().map(|v| v.tanh()).collect();
                vec_mat(&a, &beta)[0]
            })
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        let alpha: Vec<f64> = scores.iter().map(|s| (s - mx).exp() / z).collect();
        let ctx: Vec<f64> = (0..memory[0].len()).map(|k| memory.iter().zip(&alpha).map(|(e, a)| a * e[k]).sum()).collect();
        let hc: Vec<f64> = h[layers - 1].iter().chain(&ctx).copied().collect();
        let o: Vec<f64> = vec_mat(&hc, &w3).iter().map(|v| v.tanh()).collect();
        let logits = vec_mat(&o, &w4);
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.push(logits.iter().map(|v| v - lse).collect());
        o_prev = o;
    }
    out
}

#[test]
fn steps_match_a_scalar_reference() {
    for seed in 0..5 {
        let m = randomized(seed, 4);
        let img = common::random_image(seed, 16, 16);
        let mut tape = Tape::inference();
        let bound = m.store.bind(&mut tape);
        let mem = m.encode_one(&mut tape, &bound, &img).unwrap();
        let d = m.config.d_model;
        let memory: Vec<Vec<f64>> = tape.value(mem.bank.entries).data().chunks(d).map(<[f64]>::to_vec).collect();
        let inputs = [START, 4, 6, 5];
        let want = reference_log_probs(&m, &memory, &inputs);
        let mut state = m.decoder.init_state(&mut tape, &bound, &mem).unwrap();
        let mut r = rng::stream(0, &[]);
        for (t, &tok) in inputs.iter().enumerate() {
            let s = m.decoder.step(&mut tape, &bound, &state, tok, &mem, false, &mut r).unwrap();
            let logits = tape.value(s.logits).data();
            let lse = im2tex::decoding::log_softmax(logits);
            for (a, b) in lse.iter().zip(&want[t]) {
                assert!((a - b).abs() < 1e-12, "seed {seed} step {t}: {a} vs {b}");
            }
            state = s.state;
        }
    }
}

#[test]
fn attention_and_output_are_distributions_and_steps_are_markov() {
    for seed in 0..20 {
        let m = randomized(100 + seed, 5);
        let img = common::random_image(seed, 8 * (1 + seed as usize % 4), 8 * (1 + seed as usize % 3));
        let mut tape = Tape::inference();
        let bound = m.store.bind(&mut tape);
        let mem = m.encode_one(&mut tape, &bound, &img).unwrap();
        let mut state = m.decoder.init_state(&mut tape, &bound, &mem).unwrap();
        let mut r = rng::stream(0, &[]);
        let mut prev = START;
        for _ in 0..6 {
            let a = m.decoder.step(&mut tape, &bound, &state, prev, &mem, false, &mut r).unwrap();
            let b = m.decoder.step(&mut tape, &bound, &state, prev, &mem, false, &mut r).unwrap();
            assert_eq!(tape.value(a.logits), tape.value(b.logits));
            assert_eq!(tape.value(a.alpha), tape.value(b.alpha));
            let alpha = tape.value(a.alpha).data();
            assert_eq!(alpha.len(), mem.bank.len());
            assert!(alpha.iter().all(|&x| x >= 0.0));
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            let p: Vec<f64> = im2tex::decoding::log_softmax(tape.value(a.logits).data()).iter().map(|v| v.exp()).collect();
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prev = tape.value(a.logits).argmax();
            state = a.state;
        }
    }
}

#[test]
fn teacher_forced_loss_is_the_summed_step_log_likelihood() {
    for seed in 0..5 {
        let m = randomized(200 + seed, 5);
        let img = common::random_image(seed, 24, 16);
        let target = [START, 4, 8, 5, 6, END];
        let mut tape = Tape::inference();
        let bound = m.store.bind(&mut tape);
        let tf = teacher_force(&m, &mut tape, &bound, &[&img], &[&target], ForwardMode::Eval, &[0]).unwrap();
        let loss = tape.value(tf.nll[0]).item();
        // independent summation of -log p(y_t) over free-running steps fed the gold tokens
        let mem = m.encode_one(&mut tape, &bound, &img).unwrap();
        let mut state = m.decoder.init_state(&mut tape, &bound, &mem).unwrap();
        let mut r = rng::stream(0, &[]);
        let mut nll = 0.0;
        for w in target.windows(2) {
            let s = m.decoder.step(&mut tape, &bound, &state, w[0], &mem, false, &mut r).unwrap();
            nll -= im2tex::decoding::log_softmax(tape.value(s.logits).data())[w[1]];
            state = s.state;
        }
        assert!((loss - nll).abs() <= 1e-10, "{loss} vs {nll}");
    }
}

#[test]
fn standard_cell_and_current_query_variants_change_the_output() {
    let base = randomized(7, 4);
    let img = common::random_image(7, 16, 16);
    let run = |m: &Model| {
        let mut tape = Tape::inference();
        let bound = m.store.bind(&mut tape);
        let mem = m.encode_one(&mut tape, &bound, &img).unwrap();
        let s0 = m.decoder.init_state(&mut tape, &bound, &mem).unwrap();
        let mut r = rng::stream(0, &[]);
        let s = m.decoder.step(&mut tape, &bound, &s0, START, &mem, false, &mut r).unwrap();
        tape.value(s.logits).data().to_vec()
    };
    let mut std_cell = base.clone();
    std_cell.decoder.config.standard_cell_output = true;
    let mut current = base.clone();
    current.decoder.config.query_current = true;
    assert_ne!(run(&base), run(&std_cell));
    assert_ne!(run(&base), run(&current));
}
