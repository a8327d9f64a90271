//! 9×9 binary glyph bitmaps and the synthetic renderer.
//!
//! Every symbol has one hand-drawn template occupying a 5×7 box inside the
//! 9×9 canvas (columns 2..=6, rows 1..=7), so a one-pixel shift never pushes
//! ink off the canvas. Two digit pairs are drawn on purpose at Hamming
//! distance 2 (`5`/`6` and `8`/`9`): a single flipped pixel makes those glyphs
//! ambiguous, which is where the classifier makes most of its mistakes and
//! where the arithmetic constraint has something to fix. The operators sit
//! at distance ≥ 7 from every other template under any combination of shifts.

use rand::Rng;

use crate::symbol::{Symbol, NUM_SYMBOLS};
use crate::DatasetError;

/// Side length of a glyph.
pub const SIDE: usize = 9;

/// Pixels per glyph.
pub const PIXELS: usize = SIDE * SIDE;

/// A 9×9 black-and-white bitmap stored row-major; every entry is 0 or 1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GlyphImage {
    pixels: [u8; PIXELS],
}

impl GlyphImage {
    pub fn blank() -> GlyphImage {
        GlyphImage { pixels: [0; PIXELS] }
    }

    /// Builds an image from 81 row-major values, rejecting anything but 0/1.
    /// On failure returns the offending flat index.
    pub fn from_pixels(values: &[u8]) -> Result<GlyphImage, usize> {
        if values.len() != PIXELS {
            return Err(values.len().min(PIXELS));
        }
        let mut pixels = [0u8; PIXELS];
        for (k, &v) in values.iter().enumerate() {
            if v > 1 {
                return Err(k);
            }
            pixels[k] = v;
        }
        Ok(GlyphImage { pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * SIDE + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.pixels[row * SIDE + col] = on as u8;
    }

    pub fn pixels(&self) -> &[u8; PIXELS] {
        &self.pixels
    }

    /// Flat indices of the set pixels.
    pub fn on_pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.pixels.iter().enumerate().filter(|(_, &v)| v == 1).map(|(k, _)| k)
    }

    pub fn count_on(&self) -> usize {
        self.pixels.iter().map(|&v| v as usize).sum()
    }

    pub fn hamming(&self, other: &GlyphImage) -> usize {
        self.pixels.iter().zip(other.pixels.iter()).filter(|(a, b)| a != b).count()
    }

    /// Copy moved by `(dy, dx)`; cells shifted in from outside are zero.
    pub fn shifted(&self, dy: i32, dx: i32) -> GlyphImage {
        let mut out = GlyphImage::blank();
        for r in 0..SIDE as i32 {
            for c in 0..SIDE as i32 {
                let (sr, sc) = (r - dy, c - dx);
                if (0..SIDE as i32).contains(&sr) && (0..SIDE as i32).contains(&sc) {
                    out.pixels[(r as usize) * SIDE + c as usize] = self.pixels[(sr as usize) * SIDE + sc as usize];
                }
            }
        }
        out
    }
}

impl std::fmt::Debug for GlyphImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "GlyphImage")?;
        for r in 0..SIDE {
            let row: String = (0..SIDE).map(|c| if self.get(r, c) == 1 { '#' } else { '.' }).collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

const TEMPLATE_ROWS: [[&str; 7]; NUM_SYMBOLS] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["#####", "#....", "####.", "#...#", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "#...#", ".###."],
    [".....", "..#..", "..#..", "#####", "..#..", "..#..", "....."],
    [".....", ".....", "#####", ".....", "#####", ".....", "....."],
];

/// The canonical noiseless bitmap for `symbol`.
pub fn template(symbol: Symbol) -> GlyphImage {
    let mut img = GlyphImage::blank();
    for (r, row) in TEMPLATE_ROWS[symbol.index()].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            img.set(r + 1, c + 2, ch == b'#');
        }
    }
    img
}

/// Exact template lookup; the inverse of noiseless rendering.
pub fn match_template(img: &GlyphImage) -> Option<Symbol> {
    Symbol::all().find(|&s| template(s) == *img)
}

/// Render-time distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Independent per-pixel flip probability, in `[0, 0.5)`.
    pub flip_prob: f64,
    /// Maximum translation in each axis, 0 or 1.
    pub max_shift: u32,
}

impl NoiseConfig {
    pub const NONE: NoiseConfig = NoiseConfig { flip_prob: 0.0, max_shift: 0 };

    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(0.0..0.5).contains(&self.flip_prob) {
            return Err(DatasetError::Config(format!("flip_prob {} outside [0, 0.5)", self.flip_prob)));
        }
        if self.max_shift > 1 {
            return Err(DatasetError::Config(format!("max_shift {} must be 0 or 1", self.max_shift)));
        }
        Ok(())
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { flip_prob: 0.02, max_shift: 1 }
    }
}

/// Renders one glyph: template, random shift, then independent pixel flips.
///
/// The random stream is consumed in a fixed order (row shift, column shift,
/// then one uniform per pixel) so output depends only on the rng state.
pub fn render_glyph<R: Rng + ?Sized>(symbol_id: u8, noise: &NoiseConfig, rng: &mut R) -> Result<GlyphImage, DatasetError> {
    let symbol = Symbol::new(symbol_id).ok_or(DatasetError::InvalidSymbol(symbol_id))?;
    noise.validate()?;
    let s = noise.max_shift as i32;
    let dy = rng.random_range(-s..=s);
    let dx = rng.random_range(-s..=s);
    let mut img = template(symbol).shifted(dy, dx);
    for k in 0..PIXELS {
        if rng.random::<f64>() < noise.flip_prob {
            img.pixels[k] ^= 1;
        }
    }
    Ok(img)
}
