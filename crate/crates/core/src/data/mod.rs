//! Tokens, vocabulary, images, manifests, bucketing, and the synthetic
//! formula generator.

pub mod bucket;
pub mod glyphs;
pub mod image;
pub mod manifest;
pub mod pgm;
pub mod synth;
pub mod tokenize;
pub mod vocab;

pub use bucket::Bucket;
pub use image::GrayImage;
pub use manifest::Example;
pub use tokenize::{Lexicon, TokenizerMode};
pub use vocab::{Vocabulary, END, PAD, START, UNK};
