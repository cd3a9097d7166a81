//! Synthetic formulas: a small grammar, its canonical token form, and a
//! bitmap rasterizer standing in for a TeX engine.

use rand::Rng;

use crate::data::glyphs::{GlyphAtlas, GLYPH_H, GLYPH_W};
use crate::data::image::GrayImage;
use crate::error::{Error, Result};
use crate::rng;

pub const FRAC: &str = "\\frac";
const SCRIPT_SHIFT: i64 = GLYPH_H as i64 / 2;
const MAX_ATTEMPTS: usize = 10_000;
const STREAM_TAG: u64 = 0x5359_4e54;

#[derive(Clone, Debug, PartialEq)]
pub struct GrammarConfig {
    /// Maximum nesting of `^`, `_` and `\frac` groups.
    pub max_depth: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Terms in the top-level expression, drawn from `1..=max_terms`.
    pub max_terms: usize,
    /// Terms inside a group.
    pub max_group_terms: usize,
    pub p_script: f64,
    pub p_frac: f64,
    pub p_paren: f64,
    pub p_operator: f64,
    pub atoms: String,
    pub operators: String,
    pub margin: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            max_depth: 2,
            min_len: 1,
            max_len: 40,
            max_terms: 4,
            max_group_terms: 2,
            p_script: 0.3,
            p_frac: 0.15,
            p_paren: 0.05,
            p_operator: 0.6,
            atoms: "0123456789abcdefghijklmnopqrstuvwxyz".into(),
            operators: "+-=".into(),
            margin: 4,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        let atlas = GlyphAtlas::new();
        if self.atoms.is_empty() {
            return Err(Error::Config("grammar needs at least one atom".into()));
        }
        if let Some(c) = self.atoms.chars().chain(self.operators.chars()).find(|&c| !atlas.contains(c)) {
            return Err(Error::Config(format!("no glyph for {c:?}")));
        }
        if self.max_terms == 0 || self.max_group_terms == 0 {
            return Err(Error::Config("term counts must be positive".into()));
        }
        if self.min_len > self.max_len || self.max_len == 0 {
            return Err(Error::Config(format!(
                "length bounds {}..={} are empty",
                self.min_len, self.max_len
            )));
        }
        for (k, p) in [
            ("p_script", self.p_script),
            ("p_frac", self.p_frac),
            ("p_paren", self.p_paren),
            ("p_operator", self.p_operator),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{k} = {p} is not a probability")));
            }
        }
        if self.margin == 0 && self.min_len == 0 {
            return Err(Error::Config("margin 0 with empty formulas gives zero-size images".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node {
    Glyph(char),
    Sup(Vec<Node>),
    Sub(Vec<Node>),
    Frac(Vec<Node>, Vec<Node>),
}

pub fn to_tokens(nodes: &[Node]) -> Vec<String> {
    fn group(out: &mut Vec<String>, nodes: &[Node]) {
        out.push("{".into());
        emit(out, nodes);
        out.push("}".into());
    }
    fn emit(out: &mut Vec<String>, nodes: &[Node]) {
        for n in nodes {
            match n {
                Node::Glyph(c) => out.push(c.to_string()),
                Node::Sup(g) => {
                    out.push("^".into());
                    group(out, g);
                }
                Node::Sub(g) => {
                    out.push("_".into());
                    group(out, g);
                }
                Node::Frac(a, b) => {
                    out.push(FRAC.into());
                    group(out, a);
                    group(out, b);
                }
            }
        }
    }
    let mut out = Vec::new();
    emit(&mut out, nodes);
    out
}

/// Parses the canonical token form. Every non-structural token must be a
/// single character with a glyph.
pub fn parse_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<Node>> {
    struct P<'a, S> {
        toks: &'a [S],
        pos: usize,
        atlas: GlyphAtlas,
    }
    impl<S: AsRef<str>> P<'_, S> {
        fn err<T>(&self, msg: &str) -> Result<T> {
            Err(Error::Format {
                what: "formula tokens",
                offset: self.pos,
                msg: msg.into(),
            })
        }
        fn peek(&self) -> Option<&str> {
            self.toks.get(self.pos).map(|s| s.as_ref())
        }
        fn group(&mut self) -> Result<Vec<Node>> {
            if self.peek() != Some("{") {
                return self.err("expected `{`");
            }
            self.pos += 1;
            let inner = self.seq()?;
            if self.peek() != Some("}") {
                return self.err("expected `}`");
            }
            self.pos += 1;
            Ok(inner)
        }
        fn seq(&mut self) -> Result<Vec<Node>> {
            let mut out = Vec::new();
            while let Some(t) = self.peek() {
                match t {
                    "}" => break,
                    "{" => return self.err("unexpected `{`"),
                    "^" => {
                        self.pos += 1;
                        out.push(Node::Sup(self.group()?));
                    }
                    "_" => {
                        self.pos += 1;
                        out.push(Node::Sub(self.group()?));
                    }
                    FRAC => {
                        self.pos += 1;
                        let a = self.group()?;
                        let b = self.group()?;
                        out.push(Node::Frac(a, b));
                    }
                    t => {
                        let mut it = t.chars();
                        match (it.next(), it.next()) {
                            (Some(c), None) if self.atlas.contains(c) => out.push(Node::Glyph(c)),
                            _ => return self.err("token has no glyph"),
                        }
                        self.pos += 1;
                    }
                }
            }
            Ok(out)
        }
    }
    let mut p = P {
        toks: tokens,
        pos: 0,
        atlas: GlyphAtlas::new(),
    };
    let nodes = p.seq()?;
    if p.pos != tokens.len() {
        return p.err("unbalanced `}`");
    }
    Ok(nodes)
}

#[derive(Clone, Copy, Debug)]
enum Ink {
    Glyph { ch: char, x: i64, y: i64 },
    Bar { x: i64, y: i64, w: i64 },
}

/// Box relative to an origin whose `y = 0` is the top row of a plain glyph
/// on the main line.
#[derive(Clone, Debug, Default)]
struct Layout {
    width: i64,
    top: i64,
    bottom: i64,
    inks: Vec<Ink>,
}

impl Layout {
    fn place(&mut self, child: &Layout, dx: i64, dy: i64) {
        let empty = self.inks.is_empty() && self.top == self.bottom;
        if child.top != child.bottom {
            if empty {
                self.top = child.top + dy;
                self.bottom = child.bottom + dy;
            } else {
                self.top = self.top.min(child.top + dy);
                self.bottom = self.bottom.max(child.bottom + dy);
            }
        }
        for ink in &child.inks {
            self.inks.push(match *ink {
                Ink::Glyph { ch, x, y } => Ink::Glyph { ch, x: x + dx, y: y + dy },
                Ink::Bar { x, y, w } => Ink::Bar { x: x + dx, y: y + dy, w },
            });
        }
    }
}

fn layout(nodes: &[Node]) -> Layout {
    let mut out = Layout::default();
    for n in nodes {
        let (child, dy) = match n {
            Node::Glyph(ch) => (
                Layout {
                    width: GLYPH_W as i64,
                    top: 0,
                    bottom: GLYPH_H as i64,
                    inks: vec![Ink::Glyph { ch: *ch, x: 0, y: 0 }],
                },
                0,
            ),
            Node::Sup(g) => (layout(g), -SCRIPT_SHIFT),
            Node::Sub(g) => (layout(g), SCRIPT_SHIFT),
            Node::Frac(a, b) => {
                let (la, lb) = (layout(a), layout(b));
                let w = la.width.max(lb.width) + 2;
                // The bar sits on the middle row of the main line.
                let bar = SCRIPT_SHIFT;
                let mut f = Layout {
                    width: w,
                    top: bar,
                    bottom: bar + 1,
                    inks: vec![Ink::Bar { x: 0, y: bar, w }],
                };
                f.place(&la, (w - la.width) / 2, bar - la.bottom);
                f.place(&lb, (w - lb.width) / 2, bar + 1 - lb.top);
                (f, 0)
            }
        };
        out.place(&child, out.width, dy);
        out.width += child.width;
    }
    out
}

/// Renders parsed nodes with `margin` white pixels on every side.
pub fn rasterize(nodes: &[Node], margin: usize) -> Result<GrayImage> {
    let lay = layout(nodes);
    let m = margin as i64;
    let width = lay.width + 2 * m;
    let height = lay.bottom - lay.top + 2 * m;
    if width <= 0 || height <= 0 {
        return Err(Error::Invalid("formula renders to a zero-size image".into()));
    }
    let mut img = GrayImage::blank(width as usize, height as usize);
    let atlas = GlyphAtlas::new();
    let y0 = m - lay.top;
    for ink in &lay.inks {
        match *ink {
            Ink::Glyph { ch, x, y } => {
                let g = atlas.get(ch).expect("parser admits only atlas glyphs");
                for r in 0..GLYPH_H {
                    for c in 0..GLYPH_W {
                        if g[r * GLYPH_W + c] == 1 {
                            img.set((m + x) as usize + c, (y0 + y) as usize + r, 0.0);
                        }
                    }
                }
            }
            Ink::Bar { x, y, w } => {
                for c in 0..w {
                    img.set((m + x + c) as usize, (y0 + y) as usize, 0.0);
                }
            }
        }
    }
    Ok(img)
}

pub fn rasterize_tokens<S: AsRef<str>>(tokens: &[S], margin: usize) -> Result<GrayImage> {
    rasterize(&parse_tokens(tokens)?, margin)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthExample {
    pub tokens: Vec<String>,
    pub image: GrayImage,
}

struct Gen<'a, R: Rng> {
    cfg: &'a GrammarConfig,
    atoms: Vec<char>,
    ops: Vec<char>,
    rng: &'a mut R,
}

impl<R: Rng> Gen<'_, R> {
    fn pick(&mut self, from: &[char]) -> char {
        from[self.rng.random_range(0..from.len())]
    }

    fn seq(&mut self, depth: usize, max_terms: usize) -> Vec<Node> {
        let terms = self.rng.random_range(1..=max_terms);
        let mut out = Vec::new();
        for i in 0..terms {
            if i > 0 && !self.ops.is_empty() && self.rng.random_bool(self.cfg.p_operator) {
                let op = self.pick(&self.ops.clone());
                out.push(Node::Glyph(op));
            }
            self.term(depth, &mut out);
        }
        out
    }

    fn term(&mut self, depth: usize, out: &mut Vec<Node>) {
        let nest = depth < self.cfg.max_depth;
        let g = self.cfg.max_group_terms;
        if nest && self.rng.random_bool(self.cfg.p_frac) {
            let a = self.seq(depth + 1, g);
            let b = self.seq(depth + 1, g);
            out.push(Node::Frac(a, b));
            return;
        }
        if self.rng.random_bool(self.cfg.p_paren) {
            out.push(Node::Glyph('('));
            let inner = self.seq(depth, g);
            out.extend(inner);
            out.push(Node::Glyph(')'));
        } else {
            let a = self.pick(&self.atoms.clone());
            out.push(Node::Glyph(a));
        }
        if nest && self.rng.random_bool(self.cfg.p_script) {
            let inner = self.seq(depth + 1, g);
            out.push(if self.rng.random_bool(0.5) {
                Node::Sup(inner)
            } else {
                Node::Sub(inner)
            });
        }
    }
}

/// One formula from `rng`, resampled until its length is within bounds.
pub fn generate_one<R: Rng>(cfg: &GrammarConfig, rng: &mut R) -> Result<SynthExample> {
    let mut g = Gen {
        cfg,
        atoms: cfg.atoms.chars().collect(),
        ops: cfg.operators.chars().collect(),
        rng,
    };
    for _ in 0..MAX_ATTEMPTS {
        let nodes = g.seq(0, cfg.max_terms);
        let tokens = to_tokens(&nodes);
        if (cfg.min_len..=cfg.max_len).contains(&tokens.len()) {
            let image = rasterize(&nodes, cfg.margin)?;
            return Ok(SynthExample { tokens, image });
        }
    }
    Err(Error::Config(format!(
        "grammar never produced a formula of {}..={} tokens",
        cfg.min_len, cfg.max_len
    )))
}

/// Example `i` uses its own stream derived from `(seed, i)`, so any subset
/// can be regenerated independently.
pub fn generate(seed: u64, count: usize, cfg: &GrammarConfig) -> Result<Vec<SynthExample>> {
    cfg.validate()?;
    (0..count)
        .map(|i| generate_one(cfg, &mut rng::stream(seed, &[STREAM_TAG, i as u64])))
        .collect()
}
