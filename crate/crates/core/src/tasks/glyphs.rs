//! Fixed 8×8 binary glyph templates.

pub const GLYPH: usize = 8;

pub type Bitmap = [[bool; GLYPH]; GLYPH];

const SIGNS: [(&str, [&str; GLYPH]); 3] = [
    (
        "ring",
        [
            "..####..", ".#....#.", "#......#", "#......#", "#......#", "#......#", ".#....#.", "..####..",
        ],
    ),
    (
        "triangle",
        [
            "...##...", "...##...", "..#..#..", "..#..#..", ".#....#.", ".#....#.", "#......#", "########",
        ],
    ),
    (
        "cross",
        [
            "#......#", ".#....#.", "..#..#..", "...##...", "...##...", "..#..#..", ".#....#.", "#......#",
        ],
    ),
];

const DIGITS: [[&str; GLYPH]; 9] = [
    [
        "...##...", "..###...", ".#.##...", "...##...", "...##...", "...##...", "...##...", ".######.",
    ],
    [
        "..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....", ".##.....", ".######.",
    ],
    [
        "..####..", ".##..##.", ".....##.", "...###..", ".....##.", ".....##.", ".##..##.", "..####..",
    ],
    [
        "....##..", "...###..", "..#.##..", ".#..##..", ".######.", "....##..", "....##..", "....##..",
    ],
    [
        ".######.", ".##.....", ".##.....", ".#####..", ".....##.", ".....##.", ".##..##.", "..####..",
    ],
    [
        "..####..", ".##.....", ".##.....", ".#####..", ".##..##.", ".##..##.", ".##..##.", "..####..",
    ],
    [
        ".######.", ".....##.", "....##..", "....##..", "...##...", "...##...", "..##....", "..##....",
    ],
    [
        "..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", ".##..##.", "..####..",
    ],
    [
        "..####..", ".##..##.", ".##..##.", ".##..##.", "..#####.", ".##..##.", ".....##.", ".#####..",
    ],
];

fn parse(rows: &[&str; GLYPH]) -> Bitmap {
    let mut b = [[false; GLYPH]; GLYPH];
    for (r, row) in rows.iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            b[r][c] = ch == b'#';
        }
    }
    b
}

/// The three sign shapes of the needle task, labels 1..=3.
pub fn sign(i: usize) -> Bitmap {
    parse(&SIGNS[i].1)
}

pub fn sign_name(i: usize) -> &'static str {
    SIGNS[i].0
}

pub const NUM_SIGNS: usize = SIGNS.len();

/// Digit template for `value` in 1..=9.
pub fn digit(value: usize) -> Bitmap {
    parse(&DIGITS[value - 1])
}

/// 64-character row-major `0`/`1` encoding.
pub fn to_bits(b: &Bitmap) -> String {
    b.iter().flatten().map(|&on| if on { '1' } else { '0' }).collect()
}

/// `(name, bits)` for every template, signs first.
pub fn registry() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = (0..NUM_SIGNS)
        .map(|i| (format!("sign.{}", sign_name(i)), to_bits(&sign(i))))
        .collect();
    out.extend((1..=9).map(|v| (format!("digit.{v}"), to_bits(&digit(v)))));
    out
}
