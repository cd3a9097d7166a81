//! BLEU-4, column-wise image edit distance and exact match.

use std::collections::HashMap;
use std::hash::Hash;

use crate::config::BleuMode;
use crate::data::image::GrayImage;
use crate::data::synth;
use crate::error::{Error, Result};

pub const BLEU_SMOOTHING: f64 = 1e-9;
const MAX_N: usize = 4;

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    matched: [usize; MAX_N],
    total: [usize; MAX_N],
    ref_total: [usize; MAX_N],
    cand_len: usize,
    ref_len: usize,
}

impl Counts {
    fn of<T: Eq + Hash>(cand: &[T], reference: &[T]) -> Counts {
        let mut c = Counts {
            cand_len: cand.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=MAX_N {
            let rc = ngram_counts(reference, n);
            let cc = ngram_counts(cand, n);
            c.matched[n - 1] = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
            c.total[n - 1] = cand.len().saturating_sub(n - 1);
            c.ref_total[n - 1] = reference.len().saturating_sub(n - 1);
        }
        c
    }

    fn add(&mut self, o: &Counts) {
        for n in 0..MAX_N {
            self.matched[n] += o.matched[n];
            self.total[n] += o.total[n];
            self.ref_total[n] += o.ref_total[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    fn score(&self, smooth: bool) -> f64 {
        if self.cand_len == 0 {
            return if self.ref_len == 0 { 1.0 } else { 0.0 };
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_N {
            // An order neither side is long enough to contain is vacuous.
            let p = if self.total[n] == 0 && self.ref_total[n] == 0 {
                1.0
            } else if self.total[n] == 0 || self.matched[n] == 0 {
                if smooth {
                    BLEU_SMOOTHING
                } else {
                    return 0.0;
                }
            } else {
                self.matched[n] as f64 / self.total[n] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        (bp * (log_sum / MAX_N as f64).exp()).clamp(0.0, 1.0)
    }
}

/// Cumulative 4-gram BLEU with uniform weights.
///
/// `Corpus` pools clipped counts and lengths over all pairs; `Sentence`
/// averages per-pair scores, replacing zero precisions by `1e-9`.
pub fn bleu4<T: Eq + Hash, S: AsRef<[T]>>(candidates: &[S], references: &[S], mode: BleuMode) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Invalid("BLEU of an empty corpus".into()));
    }
    let pairs = candidates.iter().zip(references);
    Ok(match mode {
        BleuMode::Corpus => {
            let mut total = Counts::default();
            for (c, r) in pairs {
                total.add(&Counts::of(c.as_ref(), r.as_ref()));
            }
            total.score(false)
        }
        BleuMode::Sentence => {
            pairs.map(|(c, r)| sentence_bleu(c.as_ref(), r.as_ref())).sum::<f64>() / candidates.len() as f64
        }
    })
}

/// Smoothed BLEU-4 of one pair, in `[0, 1]`.
pub fn sentence_bleu<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    Counts::of(candidate, reference).score(true)
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1` = ink.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryImage {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<u8>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height || bits.iter().any(|&b| b > 1) {
            return Err(Error::Invalid(format!("binary image {width}x{height} with {} bits", bits.len())));
        }
        Ok(BinaryImage { width, height, bits })
    }

    pub fn column(&self, x: usize) -> Vec<u8> {
        (0..self.height).map(|y| self.bits[y * self.width + x]).collect()
    }

    pub fn columns(&self) -> Vec<Vec<u8>> {
        (0..self.width).map(|x| self.column(x)).collect()
    }

    fn inked_columns(&self) -> Vec<Vec<u8>> {
        self.columns().into_iter().filter(|c| c.contains(&1)).collect()
    }
}

/// Pixels strictly darker than `threshold` become ink.
pub fn binarize(img: &GrayImage, threshold: f64) -> Result<BinaryImage> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    BinaryImage::new(
        img.width,
        img.height,
        img.pixels.iter().map(|&p| u8::from(p < threshold)).collect(),
    )
}

/// `max(0, 1 - lev(cols(truth), cols(test)) / width(truth))`.
pub fn edit_distance_score(truth: &BinaryImage, test: &BinaryImage) -> Result<f64> {
    if truth.width == 0 {
        return Err(Error::Invalid("truth image has zero width".into()));
    }
    let e = levenshtein(&truth.columns(), &test.columns()) as f64 / truth.width as f64;
    Ok((1.0 - e).max(0.0))
}

/// Pixel equality. With `strip_ws`, columns without ink are removed from both
/// images first.
pub fn exact_match(truth: &BinaryImage, test: &BinaryImage, strip_ws: bool) -> bool {
    if truth.height != test.height {
        return false;
    }
    if strip_ws {
        truth.inked_columns() == test.inked_columns()
    } else {
        truth == test
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu4: f64,
    pub edit_distance_score: f64,
    pub exact_match: bool,
    pub exact_match_no_ws: bool,
}

/// Metrics for one prediction. Both token sequences are rendered with the
/// synthetic rasterizer; a prediction that cannot be rendered scores 0 on
/// the image metrics.
pub fn evaluate_pair(reference: &[String], predicted: &[String], margin: usize, threshold: f64) -> Result<MetricReport> {
    let bleu4 = sentence_bleu(predicted, reference);
    let truth = synth::rasterize_tokens(reference, margin)
        .map_err(|e| e.context("reference is not renderable"))?;
    let truth = binarize(&truth, threshold)?;
    let Ok(test) = synth::rasterize_tokens(predicted, margin) else {
        return Ok(MetricReport {
            bleu4,
            edit_distance_score: 0.0,
            exact_match: false,
            exact_match_no_ws: false,
        });
    };
    let test = binarize(&test, threshold)?;
    Ok(MetricReport {
        bleu4,
        edit_distance_score: edit_distance_score(&truth, &test)?,
        exact_match: exact_match(&truth, &test, false),
        exact_match_no_ws: exact_match(&truth, &test, true),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein(b"", b"abc"), 3);
        assert_eq!(levenshtein(b"abc", b"abc"), 0);
    }

    #[test]
    fn bleu_boundaries() {
        let a = [toks("a b c d e")];
        assert_eq!(bleu4(&a, &a, BleuMode::Corpus).unwrap(), 1.0);
        assert_eq!(bleu4(&a, &a, BleuMode::Sentence).unwrap(), 1.0);
        let d = [toks("x y z w v")];
        assert_eq!(bleu4(&d, &a, BleuMode::Corpus).unwrap(), 0.0);
        assert_eq!(sentence_bleu::<&str>(&[], &toks("a")), 0.0);
        assert!(bleu4(&a, &[], BleuMode::Corpus).is_err());
    }

    #[test]
    fn short_identical_sequences_score_one() {
        let s = [toks("x ^ 2")];
        assert_eq!(bleu4(&s, &s, BleuMode::Corpus).unwrap(), 1.0);
        assert_eq!(sentence_bleu(&toks("x"), &toks("x")), 1.0);
    }

    #[test]
    fn binarize_rules() {
        let img = GrayImage::new(3, 1, vec![0.2, 0.8, 0.5]).unwrap();
        assert_eq!(binarize(&img, 0.5).unwrap().bits, vec![1, 0, 0]);
        assert!(binarize(&img, 1.0).is_err());
        assert!(binarize(&img, 0.0).is_err());
        let white = GrayImage::blank(4, 4);
        assert!(binarize(&white, 0.5).unwrap().bits.iter().all(|&b| b == 0));
    }

    #[test]
    fn identical_renders_match() {
        let t: Vec<String> = toks("\\frac { 1 } { x }").into_iter().map(String::from).collect();
        let r = evaluate_pair(&t, &t, 4, 0.5).unwrap();
        assert_eq!(r.bleu4, 1.0);
        assert_eq!(r.edit_distance_score, 1.0);
        assert!(r.exact_match && r.exact_match_no_ws);
        let bad = vec!["{".to_string()];
        let r = evaluate_pair(&t, &bad, 4, 0.5).unwrap();
        assert_eq!((r.edit_distance_score, r.exact_match), (0.0, false));
    }
}
