//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Everything is plain Rust underneath, so the same functions run (and are
//! tested) natively; only the `#[wasm_bindgen]` wrappers touch JS types.

use im2tex::data::image::GrayImage;
use im2tex::data::synth::{self, GrammarConfig};
use im2tex::data::tokenize::{detokenize, tokenize, Lexicon, TokenizerMode};
use im2tex::encoder::positional_encoding;
use im2tex::metrics::evaluate_pair;
use im2tex::{rng, Result};
use wasm_bindgen::prelude::*;

const MARGIN: usize = 4;

/// An RGBA bitmap plus the token sequence it came from.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct Picture {
    width: u32,
    height: u32,
    rgba: Vec<u8>,
    tokens: String,
    latex: String,
}

#[wasm_bindgen]
impl Picture {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Row-major RGBA, 4 bytes per pixel.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Space-separated tokens.
    #[wasm_bindgen(getter)]
    pub fn tokens(&self) -> String {
        self.tokens.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn latex(&self) -> String {
        self.latex.clone()
    }
}

#[wasm_bindgen]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub bleu: f64,
    pub edit_score: f64,
    pub exact: bool,
    pub exact_no_ws: bool,
}

fn mode() -> TokenizerMode {
    TokenizerMode::Lexicon(Lexicon::default_commands())
}

fn upscale(width: usize, height: usize, scale: usize, color: impl Fn(usize, usize) -> [u8; 3]) -> (u32, u32, Vec<u8>) {
    let scale = scale.max(1);
    let (w, h) = (width * scale, height * scale);
    let mut rgba = Vec::with_capacity(w * h * 4);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = color(x / scale, y / scale);
            rgba.extend_from_slice(&[r, g, b, 255]);
        }
    }
    (w as u32, h as u32, rgba)
}

fn gray_picture(img: &GrayImage, scale: usize, tokens: &[String]) -> Picture {
    let (width, height, rgba) = upscale(img.width, img.height, scale, |x, y| {
        let v = (img.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
        [v, v, v]
    });
    Picture {
        width,
        height,
        rgba,
        tokens: tokens.join(" "),
        latex: detokenize(tokens, &mode()),
    }
}

/// Tokenizes `latex` and draws it with the synthetic glyph renderer.
pub fn render_latex(latex: &str, scale: usize) -> Result<Picture> {
    let tokens = tokenize(latex, &mode()).tokens;
    let img = synth::rasterize_tokens(&tokens, MARGIN)?;
    Ok(gray_picture(&img, scale, &tokens))
}

/// A random formula from the training grammar.
pub fn sample_formula(seed: u64, scale: usize) -> Result<Picture> {
    let ex = synth::generate_one(&GrammarConfig::default(), &mut rng::stream(seed, &[0x0057_4542]))?;
    Ok(gray_picture(&ex.image, scale, &ex.tokens))
}

/// One channel of the 2-D sinusoidal encoding over a `rows` x `cols` grid,
/// blue for -1 through white to red for +1.
pub fn encoding_plane(rows: usize, cols: usize, d_model: usize, channel: usize, scale: usize) -> Result<Picture> {
    let pe = positional_encoding(rows, cols, d_model, 10_000.0)?;
    if channel >= d_model {
        return Err(im2tex::Error::Invalid(format!("channel {channel} out of range for d_model {d_model}")));
    }
    let plane = &pe.data()[channel * rows * cols..(channel + 1) * rows * cols];
    let (width, height, rgba) = upscale(cols, rows, scale, |x, y| {
        let v = plane[y * cols + x].clamp(-1.0, 1.0);
        let fade = (255.0 * (1.0 - v.abs())).round() as u8;
        if v >= 0.0 {
            [255, fade, fade]
        } else {
            [fade, fade, 255]
        }
    });
    let axis = if channel < d_model / 2 { "column" } else { "row" };
    Ok(Picture {
        width,
        height,
        rgba,
        tokens: format!("channel {channel} varies with the {axis}"),
        latex: String::new(),
    })
}

/// Sentence BLEU-4 on tokens plus the rendered-image metrics.
pub fn compare_latex(reference: &str, prediction: &str) -> Result<Scores> {
    let r = tokenize(reference, &mode()).tokens;
    let p = tokenize(prediction, &mode()).tokens;
    let m = evaluate_pair(&r, &p, MARGIN, 0.5)?;
    Ok(Scores {
        bleu: m.bleu4,
        edit_score: m.edit_distance_score,
        exact: m.exact_match,
        exact_no_ws: m.exact_match_no_ws,
    })
}

fn js(e: im2tex::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn render(latex: &str, scale: u32) -> std::result::Result<Picture, JsError> {
    render_latex(latex, scale as usize).map_err(js)
}

#[wasm_bindgen]
pub fn sample(seed: u32, scale: u32) -> std::result::Result<Picture, JsError> {
    sample_formula(u64::from(seed), scale as usize).map_err(js)
}

#[wasm_bindgen]
pub fn plane(rows: u32, cols: u32, d_model: u32, channel: u32, scale: u32) -> std::result::Result<Picture, JsError> {
    encoding_plane(rows as usize, cols as usize, d_model as usize, channel as usize, scale as usize).map_err(js)
}

#[wasm_bindgen]
pub fn compare(reference: &str, prediction: &str) -> std::result::Result<Scores, JsError> {
    compare_latex(reference, prediction).map_err(js)
}
