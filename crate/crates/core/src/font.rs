//! 5x7 monospace bitmap glyphs for `A-Z` and `0-9`.
//!
//! Each glyph is seven rows, top to bottom; bit 4 of a row is the leftmost
//! column.

pub const GLYPH_COLS: usize = 5;
pub const GLYPH_ROWS: usize = 7;

const fn row(bits: &[u8; 5]) -> u8 {
    let mut v = 0;
    let mut i = 0;
    while i < 5 {
        v = (v << 1) | (bits[i] - b'0');
        i += 1;
    }
    v
}

macro_rules! glyph {
    ($($r:literal),*) => { [$(row($r)),*] };
}

static LETTERS: [[u8; GLYPH_ROWS]; 26] = [
    glyph!(b"01110", b"10001", b"10001", b"11111", b"10001", b"10001", b"10001"),
    glyph!(b"11110", b"10001", b"10001", b"11110", b"10001", b"10001", b"11110"),
    glyph!(b"01110", b"10001", b"10000", b"10000", b"10000", b"10001", b"01110"),
    glyph!(b"11100", b"10010", b"10001", b"10001", b"10001", b"10010", b"11100"),
    glyph!(b"11111", b"10000", b"10000", b"11110", b"10000", b"10000", b"11111"),
    glyph!(b"11111", b"10000", b"10000", b"11110", b"10000", b"10000", b"10000"),
    glyph!(b"01110", b"10001", b"10000", b"10111", b"10001", b"10001", b"01111"),
    glyph!(b"10001", b"10001", b"10001", b"11111", b"10001", b"10001", b"10001"),
    glyph!(b"01110", b"00100", b"00100", b"00100", b"00100", b"00100", b"01110"),
    glyph!(b"00111", b"00010", b"00010", b"00010", b"00010", b"10010", b"01100"),
    glyph!(b"10001", b"10010", b"10100", b"11000", b"10100", b"10010", b"10001"),
    glyph!(b"10000", b"10000", b"10000", b"10000", b"10000", b"10000", b"11111"),
    glyph!(b"10001", b"11011", b"10101", b"10101", b"10001", b"10001", b"10001"),
    glyph!(b"10001", b"10001", b"11001", b"10101", b"10011", b"10001", b"10001"),
    glyph!(b"01110", b"10001", b"10001", b"10001", b"10001", b"10001", b"01110"),
    glyph!(b"11110", b"10001", b"10001", b"11110", b"10000", b"10000", b"10000"),
    glyph!(b"01110", b"10001", b"10001", b"10001", b"10101", b"10010", b"01101"),
    glyph!(b"11110", b"10001", b"10001", b"11110", b"10100", b"10010", b"10001"),
    glyph!(b"01111", b"10000", b"10000", b"01110", b"00001", b"00001", b"11110"),
    glyph!(b"11111", b"00100", b"00100", b"00100", b"00100", b"00100", b"00100"),
    glyph!(b"10001", b"10001", b"10001", b"10001", b"10001", b"10001", b"01110"),
    glyph!(b"10001", b"10001", b"10001", b"10001", b"10001", b"01010", b"00100"),
    glyph!(b"10001", b"10001", b"10001", b"10101", b"10101", b"10101", b"01010"),
    glyph!(b"10001", b"10001", b"01010", b"00100", b"01010", b"10001", b"10001"),
    glyph!(b"10001", b"10001", b"10001", b"01010", b"00100", b"00100", b"00100"),
    glyph!(b"11111", b"00001", b"00010", b"00100", b"01000", b"10000", b"11111"),
];

static DIGITS: [[u8; GLYPH_ROWS]; 10] = [
    glyph!(b"01110", b"10001", b"10011", b"10101", b"11001", b"10001", b"01110"),
    glyph!(b"00100", b"01100", b"00100", b"00100", b"00100", b"00100", b"01110"),
    glyph!(b"01110", b"10001", b"00001", b"00010", b"00100", b"01000", b"11111"),
    glyph!(b"11111", b"00010", b"00100", b"00010", b"00001", b"10001", b"01110"),
    glyph!(b"00010", b"00110", b"01010", b"10010", b"11111", b"00010", b"00010"),
    glyph!(b"11111", b"10000", b"11110", b"00001", b"00001", b"10001", b"01110"),
    glyph!(b"00110", b"01000", b"10000", b"11110", b"10001", b"10001", b"01110"),
    glyph!(b"11111", b"00001", b"00010", b"00100", b"01000", b"01000", b"01000"),
    glyph!(b"01110", b"10001", b"10001", b"01110", b"10001", b"10001", b"01110"),
    glyph!(b"01110", b"10001", b"10001", b"01111", b"00001", b"00010", b"01100"),
];

pub fn glyph(c: char) -> Option<&'static [u8; GLYPH_ROWS]> {
    match c {
        'A'..='Z' => Some(&LETTERS[c as usize - 'A' as usize]),
        '0'..='9' => Some(&DIGITS[c as usize - '0' as usize]),
        _ => None,
    }
}

/// Whether cell `(row, col)` of `c` is inked.
pub fn ink(c: char, row: usize, col: usize) -> bool {
    glyph(c).is_some_and(|g| (g[row] >> (GLYPH_COLS - 1 - col)) & 1 == 1)
}
