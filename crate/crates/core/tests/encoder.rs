mod common;

use im2tex::encoder::{memory_from_features, positional_encoding, Encoder, EncoderConfig};
use im2tex::{rng, ParamStore, Tape, Tensor};

fn grid_for(config: EncoderConfig, height: usize, width: usize) -> (usize, usize, usize) {
    let mut store = ParamStore::new();
    let enc = Encoder::build(config, &mut store, &mut rng::stream(1, &[])).unwrap();
    let img = common::random_image(height as u64, width, height);
    let mut tape = Tape::inference();
    let bound = store.bind(&mut tape);
    let x = tape.constant(img.to_tensor());
    let (banks, _) = enc.encode(&mut tape, &bound, &store, x, false).unwrap();
    let bank = &banks[0];
    let shape = tape.shape(bank.entries).to_vec();
    assert_eq!(shape, vec![bank.rows * bank.cols, enc.config.d_model]);
    (bank.rows, bank.cols, shape[1])
}

#[test]
fn memory_grid_is_one_eighth_of_the_input() {
    for d in [64, 512] {
        let cfg = if d == 512 { EncoderConfig::paper() } else { EncoderConfig::scaled(d) };
        assert_eq!(grid_for(cfg.clone(), 64, 128), (8, 16, d));
        assert_eq!(grid_for(cfg, 40, 320), (5, 40, d));
    }
}

/// The closed form written out directly: channel `2i`/`2i+1` carry sin/cos of
/// the column, channel `2j+D/2`/`2j+1+D/2` sin/cos of the row.
fn closed_form(x: usize, y: usize, ch: usize, d: usize) -> f64 {
    let half = d / 2;
    let (pos, k) = if ch < half { (x as f64, ch) } else { (y as f64, ch - half) };
    let i = (k / 2) as f64;
    let angle = pos / 10_000f64.powf(4.0 * i / d as f64);
    if k % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

#[test]
fn positional_encoding_matches_the_closed_form() {
    for (rows, cols, d) in [(8, 16, 64), (5, 40, 512), (3, 7, 8)] {
        let pe = positional_encoding(rows, cols, d, 10_000.0).unwrap();
        assert_eq!(pe.shape(), &[d, rows, cols]);
        let v = pe.data();
        for ch in 0..d {
            for y in 0..rows {
                for x in 0..cols {
                    let got = v[(ch * rows + y) * cols + x];
                    assert!((got - closed_form(x, y, ch, d)).abs() <= 1e-12, "ch {ch} at ({x},{y})");
                }
            }
        }
    }
}

#[test]
fn first_half_ignores_rows_second_half_ignores_columns() {
    let (rows, cols, d) = (6, 9, 32);
    let pe = positional_encoding(rows, cols, d, 10_000.0).unwrap();
    let at = |ch: usize, y: usize, x: usize| pe.data()[(ch * rows + y) * cols + x];
    for ch in 0..d {
        for y in 0..rows {
            for x in 0..cols {
                if ch < d / 2 {
                    assert_eq!(at(ch, y, x), at(ch, 0, x));
                } else {
                    assert_eq!(at(ch, y, x), at(ch, y, 0));
                }
            }
        }
    }
}

#[test]
fn shifted_feature_lands_one_memory_entry_later() {
    let (rows, cols, d) = (3, 5, 8);
    let bank_with_spike = |r: usize, c: usize| {
        let mut data = vec![0.0; d * rows * cols];
        data[(2 * rows + r) * cols + c] = 100.0;
        let mut tape = Tape::inference();
        let f = tape.constant(Tensor::new([1, d, rows, cols], data).unwrap());
        let bank = memory_from_features(&mut tape, f, 0, 10_000.0).unwrap();
        let pe = positional_encoding(rows, cols, d, 10_000.0).unwrap();
        let entries = tape.value(bank.entries).data().to_vec();
        // strip the encoding to find the spike
        let spike: Vec<usize> = (0..rows * cols)
            .filter(|&l| (entries[l * d + 2] - pe.data()[(2 * rows) * cols + l]) > 50.0)
            .collect();
        (spike, bank.provenance)
    };
    let (a, prov) = bank_with_spike(1, 2);
    let (b, _) = bank_with_spike(1, 3);
    assert_eq!(a, vec![cols + 2]);
    assert_eq!(b, vec![a[0] + 1]);
    assert_eq!(prov[a[0]], (1, 2));
    assert_eq!(prov[b[0]], (1, 3));
}

#[test]
fn positional_encoding_adds_no_parameters() {
    let cfg = EncoderConfig::scaled(64);
    let mut store = ParamStore::new();
    Encoder::build(cfg.clone(), &mut store, &mut rng::stream(1, &[])).unwrap();
    // every trainable tensor is a convolution or batch-norm parameter
    let mut expected = 0;
    let mut channels = 1;
    for l in &cfg.layers {
        match *l {
            im2tex::encoder::LayerSpec::Conv { maps } => {
                expected += maps * channels * 9 + maps;
                channels = maps;
            }
            im2tex::encoder::LayerSpec::BatchNorm => expected += 2 * channels,
            im2tex::encoder::LayerSpec::MaxPool { .. } => {}
        }
    }
    assert_eq!(store.num_trainable(), expected);
    assert!(store.iter().all(|p| p.name.contains("conv") || p.name.contains("bn")));
}
