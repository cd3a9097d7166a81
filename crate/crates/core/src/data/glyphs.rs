//! Fixed 6×10 bitmap font used by the synthetic rasterizer.

pub const GLYPH_W: usize = 6;
pub const GLYPH_H: usize = 10;

// Each glyph is drawn 5 columns wide in rows 1..=8; column 5 and rows 0, 9
// stay blank so adjacent glyphs never touch.
const FONT: &[(char, [&str; 8])] = &[
    ('0', [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###.", "....."]),
    ('1', ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###.", "....."]),
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####", "....."]),
    ('3', ["####.", "....#", "....#", ".###.", "....#", "....#", "####.", "....."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#.", "....."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###.", "....."]),
    ('6', ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###.", "....."]),
    ('7', ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#...", "....."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###.", "....."]),
    ('9', [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##..", "....."]),
    ('a', [".....", ".....", ".###.", "....#", ".####", "#...#", ".####", "....."]),
    ('b', ["#....", "#....", "####.", "#...#", "#...#", "#...#", "####.", "....."]),
    ('c', [".....", ".....", ".####", "#....", "#....", "#....", ".####", "....."]),
    ('d', ["....#", "....#", ".####", "#...#", "#...#", "#...#", ".####", "....."]),
    ('e', [".....", ".....", ".###.", "#...#", "#####", "#....", ".###.", "....."]),
    ('f', ["..##.", ".#...", "####.", ".#...", ".#...", ".#...", ".#...", "....."]),
    ('g', [".....", ".####", "#...#", "#...#", ".####", "....#", ".###.", "....."]),
    ('h', ["#....", "#....", "####.", "#...#", "#...#", "#...#", "#...#", "....."]),
    ('i', ["..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###.", "....."]),
    ('j', ["...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##..", "....."]),
    ('k', ["#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "....."]),
    ('l', [".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###.", "....."]),
    ('m', [".....", ".....", "##.#.", "#.#.#", "#.#.#", "#.#.#", "#.#.#", "....."]),
    ('n', [".....", ".....", "####.", "#...#", "#...#", "#...#", "#...#", "....."]),
    ('o', [".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###.", "....."]),
    ('p', [".....", "####.", "#...#", "#...#", "####.", "#....", "#....", "....."]),
    ('q', [".....", ".####", "#...#", "#...#", ".####", "....#", "....#", "....."]),
    ('r', [".....", ".....", "#.##.", "##..#", "#....", "#....", "#....", "....."]),
    ('s', [".....", ".....", ".####", "#....", ".###.", "....#", "####.", "....."]),
    ('t', [".#...", ".#...", "####.", ".#...", ".#...", ".#..#", "..##.", "....."]),
    ('u', [".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#", "....."]),
    ('v', [".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#..", "....."]),
    ('w', [".....", ".....", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#.", "....."]),
    ('x', [".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "....."]),
    ('y', [".....", "#...#", "#...#", "#...#", ".####", "....#", ".###.", "....."]),
    ('z', [".....", ".....", "#####", "...#.", "..#..", ".#...", "#####", "....."]),
    ('+', [".....", "..#..", "..#..", "#####", "..#..", "..#..", ".....", "....."]),
    ('-', [".....", ".....", ".....", "#####", ".....", ".....", ".....", "....."]),
    ('=', [".....", ".....", "#####", ".....", "#####", ".....", ".....", "....."]),
    ('(', ["...#.", "..#..", ".#...", ".#...", ".#...", "..#..", "...#.", "....."]),
    (')', [".#...", "..#..", "...#.", "...#.", "...#.", "..#..", ".#...", "....."]),
];

/// Binary glyph bitmaps, `1` = ink.
#[derive(Clone, Debug)]
pub struct GlyphAtlas {
    glyphs: Vec<(char, [u8; GLYPH_W * GLYPH_H])>,
}

impl Default for GlyphAtlas {
    fn default() -> Self {
        Self::new()
    }
}

impl GlyphAtlas {
    pub fn new() -> Self {
        let glyphs = FONT
            .iter()
            .map(|(ch, rows)| {
                let mut bits = [0u8; GLYPH_W * GLYPH_H];
                for (r, row) in rows.iter().enumerate() {
                    for (c, px) in row.bytes().enumerate() {
                        if px == b'#' {
                            bits[(r + 1) * GLYPH_W + c] = 1;
                        }
                    }
                }
                (*ch, bits)
            })
            .collect();
        GlyphAtlas { glyphs }
    }

    pub fn get(&self, ch: char) -> Option<&[u8; GLYPH_W * GLYPH_H]> {
        self.glyphs.iter().find(|(c, _)| *c == ch).map(|(_, g)| g)
    }

    pub fn contains(&self, ch: char) -> bool {
        self.get(ch).is_some()
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.iter().map(|(c, _)| *c)
    }
}
