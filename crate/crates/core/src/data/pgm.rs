//! Netpbm graymap (PGM) reading and writing, plain (`P2`) and binary (`P5`).

use std::path::Path;

use crate::data::image::GrayImage;
use crate::error::{Error, Result};

/// Raw samples as stored in the file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            what: "PGM",
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<u64> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail("expected a decimal number");
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse::<u64>() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.fail("number out of range")
            }
        }
    }
}

impl Pgm {
    pub fn parse(bytes: &[u8]) -> Result<Pgm> {
        let mut cur = Cursor { bytes, pos: 0 };
        let binary = match bytes.get(..2) {
            Some(b"P2") => false,
            Some(b"P5") => true,
            _ => return cur.fail("expected magic P2 or P5"),
        };
        cur.pos = 2;
        let width = cur.number()? as usize;
        let height = cur.number()? as usize;
        cur.skip_ws_and_comments();
        let maxval_at = cur.pos;
        let maxval = cur.number()?;
        if width == 0 || height == 0 {
            return cur.fail("zero image dimension");
        }
        if maxval == 0 || maxval > u16::MAX as u64 {
            cur.pos = maxval_at;
            return cur.fail(format!("maxval {maxval} outside 1..=65535"));
        }
        let maxval = maxval as u16;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| Error::Invalid("image too large".into()))?;
        let mut samples = Vec::with_capacity(n);
        if binary {
            match bytes.get(cur.pos) {
                Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
                _ => return cur.fail("expected one whitespace byte before raster"),
            }
            let wide = maxval > 255;
            let need = n * if wide { 2 } else { 1 };
            if bytes.len() < cur.pos + need {
                cur.pos = bytes.len();
                return cur.fail(format!("raster truncated: need {need} bytes"));
            }
            let raster = &bytes[cur.pos..cur.pos + need];
            for i in 0..n {
                let v = if wide {
                    u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]])
                } else {
                    raster[i] as u16
                };
                if v > maxval {
                    cur.pos += if wide { 2 * i } else { i };
                    return cur.fail(format!("sample {v} exceeds maxval {maxval}"));
                }
                samples.push(v);
            }
        } else {
            for _ in 0..n {
                cur.skip_ws_and_comments();
                let at = cur.pos;
                let v = cur.number()?;
                if v > maxval as u64 {
                    cur.pos = at;
                    return cur.fail(format!("sample {v} exceeds maxval {maxval}"));
                }
                samples.push(v as u16);
            }
        }
        Ok(Pgm { width, height, maxval, samples })
    }

    pub fn encode(&self, binary: bool) -> Vec<u8> {
        let mut out = format!(
            "{}\n{} {}\n{}\n",
            if binary { "P5" } else { "P2" },
            self.width,
            self.height,
            self.maxval
        )
        .into_bytes();
        if binary {
            for &s in &self.samples {
                if self.maxval > 255 {
                    out.extend_from_slice(&s.to_be_bytes());
                } else {
                    out.push(s as u8);
                }
            }
        } else {
            for row in self.samples.chunks(self.width) {
                let line: Vec<String> = row.iter().map(|s| s.to_string()).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
        }
        out
    }

    /// Values scaled to `[0, 1]` by `maxval`.
    pub fn to_image(&self) -> GrayImage {
        let m = self.maxval as f64;
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.samples.iter().map(|&s| s as f64 / m).collect(),
        }
    }

    /// Quantizes `[0, 1]` values to 8 bits.
    pub fn from_image(img: &GrayImage) -> Pgm {
        Pgm {
            width: img.width,
            height: img.height,
            maxval: 255,
            samples: img
                .pixels
                .iter()
                .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u16)
                .collect(),
        }
    }
}

pub fn read_image(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Pgm::parse(&bytes)
        .map(|p| p.to_image())
        .map_err(|e| e.context(path.display().to_string()))
}

pub fn write_image(path: &Path, img: &GrayImage, binary: bool) -> Result<()> {
    std::fs::write(path, Pgm::from_image(img).encode(binary)).map_err(|e| Error::io(path, e))
}
