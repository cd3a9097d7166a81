use std::path::Path;

use crate::data::image::GrayImage;
use crate::encoder::STRIDE;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bucket {
    pub width: usize,
    pub height: usize,
}

impl Bucket {
    pub fn new(width: usize, height: usize) -> Result<Bucket> {
        if width == 0 || height == 0 || !width.is_multiple_of(STRIDE) || !height.is_multiple_of(STRIDE) {
            return Err(Error::Config(format!(
                "bucket {width}x{height}: dimensions must be positive multiples of {STRIDE}"
            )));
        }
        Ok(Bucket { width, height })
    }

    /// Rounds each dimension up to the next multiple of the encoder stride.
    pub fn rounded(width: usize, height: usize) -> Bucket {
        Self::quantized(width, height, STRIDE, STRIDE)
    }

    /// Rounds up to multiples of `width_step` and `height_step`, which are
    /// themselves rounded up to stride multiples.
    pub fn quantized(width: usize, height: usize, width_step: usize, height_step: usize) -> Bucket {
        let r = |v: usize, q: usize| {
            let q = q.max(1).div_ceil(STRIDE) * STRIDE;
            v.max(1).div_ceil(q) * q
        };
        Bucket {
            width: r(width, width_step),
            height: r(height, height_step),
        }
    }

    pub fn fits(&self, img: &GrayImage) -> bool {
        img.width <= self.width && img.height <= self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// Parses `W H` lines. With `round_up`, sizes that are not stride multiples
/// are rounded up instead of rejected.
pub fn parse_buckets(text: &str, round_up: bool) -> Result<Vec<Bucket>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<&str> = line.split_whitespace().collect();
        let parsed = match nums.as_slice() {
            [w, h] => w.parse::<usize>().ok().zip(h.parse::<usize>().ok()),
            _ => None,
        };
        let Some((w, h)) = parsed else {
            return Err(Error::Config(format!("bucket line {}: expected `W H`, got {line:?}", no + 1)));
        };
        let b = if round_up && w > 0 && h > 0 {
            Bucket::rounded(w, h)
        } else {
            Bucket::new(w, h).map_err(|e| e.context(format!("bucket line {}", no + 1)))?
        };
        out.push(b);
    }
    sort_buckets(&mut out);
    Ok(out)
}

pub fn load_buckets(path: &Path, round_up: bool) -> Result<Vec<Bucket>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_buckets(&text, round_up).map_err(|e| e.context(path.display().to_string()))
}

fn sort_buckets(b: &mut Vec<Bucket>) {
    b.sort_by_key(|b| (b.area(), b.height, b.width));
    b.dedup();
}

/// One bucket per distinct image size after rounding up to the given steps.
pub fn buckets_for<'a>(
    images: impl IntoIterator<Item = &'a GrayImage>,
    width_step: usize,
    height_step: usize,
) -> Vec<Bucket> {
    let mut out: Vec<Bucket> = images
        .into_iter()
        .map(|img| Bucket::quantized(img.width, img.height, width_step, height_step))
        .collect();
    sort_buckets(&mut out);
    out
}

/// Smallest-area bucket containing the image.
pub fn assign(img: &GrayImage, buckets: &[Bucket]) -> Option<Bucket> {
    buckets
        .iter()
        .filter(|b| b.fits(img))
        .min_by_key(|b| (b.area(), b.height, b.width))
        .copied()
}

#[derive(Clone, Debug)]
pub struct Bucketed {
    /// `(bucket, indices into the input)` in bucket order; indices ascend.
    pub groups: Vec<(Bucket, Vec<usize>)>,
    pub dropped: Vec<usize>,
}

/// Groups images by bucket. Oversize images are dropped (and counted) when
/// `drop_oversize`, otherwise they are an error.
pub fn bucket_images<'a>(
    images: impl IntoIterator<Item = &'a GrayImage>,
    buckets: &[Bucket],
    drop_oversize: bool,
) -> Result<Bucketed> {
    let mut groups: Vec<(Bucket, Vec<usize>)> = buckets.iter().map(|&b| (b, Vec::new())).collect();
    let mut dropped = Vec::new();
    for (i, img) in images.into_iter().enumerate() {
        match assign(img, buckets) {
            Some(b) => {
                let g = groups.iter_mut().find(|(gb, _)| *gb == b).expect("assigned bucket exists");
                g.1.push(i);
            }
            None if drop_oversize => dropped.push(i),
            None => {
                return Err(Error::Invalid(format!(
                    "image {i} ({}x{}) fits no bucket",
                    img.width, img.height
                )))
            }
        }
    }
    if !dropped.is_empty() {
        log::warn!("dropped {} oversize images", dropped.len());
    }
    groups.retain(|(_, idx)| !idx.is_empty());
    Ok(Bucketed { groups, dropped })
}

/// Right-pads each sequence with `pad` to the longest length.
pub fn pad_sequences(seqs: &[Vec<usize>], pad: usize) -> Vec<Vec<usize>> {
    let n = seqs.iter().map(Vec::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut s = s.clone();
            s.resize(n, pad);
            s
        })
        .collect()
}
