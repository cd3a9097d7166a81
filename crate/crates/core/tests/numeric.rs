use im2tex::optim::Adam;
use im2tex::{rng, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random(seed: u64, shape: &[usize], scale: f64, shift: f64) -> Tensor {
    let mut r = rng::stream(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| shift + scale * r.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn batchnorm_train_mode_standardizes_each_channel() {
    let (n, c, h, w) = (8, 3, 16, 16);
    let mut tape = Tape::new();
    let x = tape.leaf(random(1, &[n, c, h, w], 3.0, 2.5), false);
    let gamma = tape.leaf(Tensor::full([c], 1.0), false);
    let beta = tape.leaf(Tensor::zeros([c]), false);
    let (y, stats) = tape.batchnorm2d(x, gamma, beta, None, 1e-5).unwrap();
    assert!(stats.is_some());
    let v = tape.value(y).data();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..h * w).map(move |i| ((b * c + ch) * h * w) + i))
            .map(|i| v[i])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-3, "channel {ch} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
    }
}

#[test]
fn batchnorm_eval_mode_is_the_running_affine_map() {
    let (n, c, h, w) = (2, 2, 3, 4);
    let input = random(2, &[n, c, h, w], 1.0, 0.0);
    let (mean, var) = ([0.5, -1.0], [4.0, 0.25]);
    let (g, b) = ([2.0, -1.0], [0.1, 0.3]);
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), false);
    let gamma = tape.leaf(Tensor::new([c], g.to_vec()).unwrap(), false);
    let beta = tape.leaf(Tensor::new([c], b.to_vec()).unwrap(), false);
    let (y, stats) = tape.batchnorm2d(x, gamma, beta, Some((&mean, &var)), 1e-5).unwrap();
    assert!(stats.is_none());
    for (i, (&out, &inp)) in tape.value(y).data().iter().zip(input.data()).enumerate() {
        let ch = (i / (h * w)) % c;
        let want = g[ch] * (inp - mean[ch]) / (var[ch] + 1e-5).sqrt() + b[ch];
        assert!((out - want).abs() < 1e-12);
    }
}

#[test]
fn dropout_preserves_the_expected_value() {
    let rate = 0.4;
    let input = random(3, &[1, 8], 1.0, 0.0);
    let trials = 20_000;
    let mut r = rng::stream(4, &[]);
    let mut sums = [0.0; 8];
    for _ in 0..trials {
        let mut tape = Tape::inference();
        let x = tape.constant(input.clone());
        let y = tape.dropout(x, rate, true, &mut r).unwrap();
        for (s, v) in sums.iter_mut().zip(tape.value(y).data()) {
            *s += v;
        }
    }
    for (s, &x) in sums.iter().zip(input.data()) {
        let mean = s / trials as f64;
        // each draw is x/(1-rate) with prob 1-rate, else 0
        let sd = x.abs() * (rate / (1.0 - rate)).sqrt() / (trials as f64).sqrt();
        assert!((mean - x).abs() <= 3.0 * sd + 1e-12, "mean {mean} vs {x} (sd {sd})");
    }
}

fn run_trajectory(seed: u64) -> Vec<u64> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, &[1]);
    let w = store.add_glorot("w", &[4, 3], &mut r).unwrap();
    let mut adam = Adam::new(0.01);
    let x = random(seed, &[5, 4], 1.0, 0.0);
    for _ in 0..5 {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = tape.matmul(xv, bound.var(w)).unwrap();
        let y = tape.tanh(y).unwrap();
        let loss = tape.cross_entropy(y, &[0, 1, 2, 0, 1]).unwrap();
        let g = tape.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate(&bound, &g);
        adam.step(&mut store).unwrap();
    }
    store.get(w).value.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn optimizer_trajectory_is_bit_identical_for_a_seed() {
    assert_eq!(run_trajectory(9), run_trajectory(9));
    assert_ne!(run_trajectory(9), run_trajectory(10));
}

proptest! {
    #[test]
    fn softmax_rows_lie_on_the_simplex(
        rows in 1usize..5,
        vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
    ) {
        let cols = vals.len().div_ceil(rows);
        let mut data = vals.clone();
        data.resize(rows * cols, 0.0);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::new([rows, cols], data).unwrap());
        let p = tape.softmax(x).unwrap();
        for row in tape.value(p).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}
