#![allow(dead_code)]

use im2tex::data::image::GrayImage;
use im2tex::data::vocab::Vocabulary;
use im2tex::{rng, Config, Model};
use rand::Rng;

/// A model small enough for exhaustive numeric checks.
pub fn tiny_config(seed: u64) -> Config {
    let mut c = Config::desk();
    c.apply_overrides(&[
        format!("seed={seed}"),
        "d_model=8".into(),
        "cnn_maps=2,2,4,4,8,8".into(),
        "embed_dim=3".into(),
        "dropout=0".into(),
    ])
    .unwrap();
    c
}

pub fn vocab(n: usize) -> Vocabulary {
    let toks: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
    Vocabulary::from_tokens(toks).unwrap()
}

pub fn tiny_model(seed: u64, content_tokens: usize) -> Model {
    Model::new(&tiny_config(seed), vocab(content_tokens)).unwrap()
}

pub fn random_image(seed: u64, width: usize, height: usize) -> GrayImage {
    let mut r = rng::stream(seed, &[0x494d47]);
    let pixels = (0..width * height).map(|_| r.random_range(0.0..1.0)).collect();
    GrayImage::new(width, height, pixels).unwrap()
}
