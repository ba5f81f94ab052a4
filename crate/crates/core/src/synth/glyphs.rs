//! Procedural stroke glyphs.
//!
//! Each glyph is a set of polylines in a unit cell: `x` grows rightward from
//! 0 to the advance width, `y` grows downward with 0 at digit height and 1 on
//! the baseline. Lowercase letters occupy roughly `y ∈ [0.4, 1]`.

use std::f64::consts::PI;

pub type Stroke = Vec<(f64, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub advance: f64,
    pub strokes: Vec<Stroke>,
}

fn line(pts: &[(f64, f64)]) -> Stroke {
    pts.to_vec()
}

/// Elliptical arc from `a0` to `a1` degrees, counter-clockwise for `a1 > a0`
/// (0° points right, 90° points up).
fn arc(cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64) -> Stroke {
    let n = (((a1 - a0).abs() / 12.0).ceil() as usize).max(2);
    (0..=n)
        .map(|i| {
            let a = (a0 + (a1 - a0) * i as f64 / n as f64) * PI / 180.0;
            (cx + rx * a.cos(), cy - ry * a.sin())
        })
        .collect()
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Stroke {
    arc(cx, cy, rx, ry, 0.0, 360.0)
}

fn join(mut a: Stroke, b: Stroke) -> Stroke {
    a.extend(b);
    a
}

fn g(advance: f64, strokes: Vec<Stroke>) -> Option<Glyph> {
    Some(Glyph { advance, strokes })
}

/// Multi-letter function names drawn as adjacent letters.
fn word(letters: &str) -> Option<Glyph> {
    let mut advance = 0.0;
    let mut strokes = Vec::new();
    for ch in letters.chars() {
        let l = glyph(&ch.to_string())?;
        for s in l.strokes {
            strokes.push(s.into_iter().map(|(x, y)| (x + advance, y)).collect());
        }
        advance += l.advance * 0.85;
    }
    g(advance + 0.1, strokes)
}

/// Stroke drawing for a visible token; `None` for structural tokens.
pub fn glyph(token: &str) -> Option<Glyph> {
    match token {
        "0" => g(0.6, vec![ellipse(0.3, 0.5, 0.2, 0.45)]),
        "1" => g(0.6, vec![line(&[(0.16, 0.22), (0.34, 0.05), (0.34, 0.95)])]),
        "2" => g(
            0.6,
            vec![join(
                arc(0.3, 0.3, 0.2, 0.24, 160.0, -30.0),
                line(&[(0.1, 0.95), (0.52, 0.95)]),
            )],
        ),
        "3" => g(
            0.6,
            vec![
                arc(0.3, 0.28, 0.19, 0.22, 150.0, -90.0),
                arc(0.3, 0.72, 0.21, 0.23, 90.0, -150.0),
            ],
        ),
        "4" => g(0.6, vec![line(&[(0.42, 0.95), (0.42, 0.05), (0.08, 0.66), (0.55, 0.66)])]),
        "5" => g(
            0.6,
            vec![join(
                line(&[(0.5, 0.05), (0.16, 0.05), (0.13, 0.45)]),
                arc(0.3, 0.68, 0.21, 0.27, 140.0, -145.0),
            )],
        ),
        "6" => g(
            0.6,
            vec![
                arc(0.42, 0.62, 0.32, 0.57, 80.0, 180.0),
                ellipse(0.3, 0.7, 0.2, 0.25),
            ],
        ),
        "7" => g(0.6, vec![line(&[(0.08, 0.05), (0.52, 0.05), (0.22, 0.95)])]),
        "8" => g(
            0.6,
            vec![ellipse(0.3, 0.27, 0.17, 0.22), ellipse(0.3, 0.72, 0.2, 0.23)],
        ),
        "9" => g(
            0.6,
            vec![
                ellipse(0.3, 0.3, 0.2, 0.25),
                arc(0.18, 0.38, 0.32, 0.57, 0.0, -100.0),
            ],
        ),
        "a" => g(
            0.6,
            vec![ellipse(0.28, 0.72, 0.18, 0.26), line(&[(0.46, 0.44), (0.46, 0.98)])],
        ),
        "b" => g(
            0.6,
            vec![line(&[(0.12, 0.05), (0.12, 0.98)]), ellipse(0.3, 0.72, 0.18, 0.26)],
        ),
        "c" => g(0.55, vec![arc(0.3, 0.71, 0.2, 0.27, 50.0, 310.0)]),
        "i" => g(
            0.35,
            vec![line(&[(0.17, 0.45), (0.17, 0.98)]), line(&[(0.17, 0.22), (0.17, 0.28)])],
        ),
        "k" => g(
            0.55,
            vec![
                line(&[(0.12, 0.05), (0.12, 0.98)]),
                line(&[(0.45, 0.42), (0.12, 0.74), (0.48, 0.98)]),
            ],
        ),
        "l" => g(0.35, vec![line(&[(0.17, 0.05), (0.17, 0.98)])]),
        "m" => g(
            0.8,
            vec![
                line(&[(0.1, 0.98), (0.1, 0.42)]),
                join(arc(0.25, 0.6, 0.15, 0.17, 180.0, 0.0), line(&[(0.4, 0.98)])),
                join(arc(0.55, 0.6, 0.15, 0.17, 180.0, 0.0), line(&[(0.7, 0.98)])),
            ],
        ),
        "n" => g(
            0.6,
            vec![
                line(&[(0.1, 0.98), (0.1, 0.42)]),
                join(arc(0.3, 0.62, 0.2, 0.19, 180.0, 0.0), line(&[(0.5, 0.98)])),
            ],
        ),
        "s" => g(
            0.55,
            vec![join(
                arc(0.28, 0.56, 0.17, 0.13, 20.0, 270.0),
                arc(0.28, 0.83, 0.17, 0.14, 90.0, -160.0),
            )],
        ),
        "t" => g(
            0.5,
            vec![
                line(&[(0.25, 0.12), (0.25, 0.9), (0.35, 0.98), (0.45, 0.93)]),
                line(&[(0.08, 0.42), (0.44, 0.42)]),
            ],
        ),
        "x" => g(
            0.6,
            vec![line(&[(0.1, 0.42), (0.5, 0.98)]), line(&[(0.5, 0.42), (0.1, 0.98)])],
        ),
        "y" => g(
            0.6,
            vec![line(&[(0.1, 0.42), (0.3, 0.86)]), line(&[(0.5, 0.42), (0.16, 1.22)])],
        ),
        "z" => g(0.6, vec![line(&[(0.1, 0.42), (0.5, 0.42), (0.1, 0.98), (0.5, 0.98)])]),
        "+" => g(
            0.7,
            vec![line(&[(0.1, 0.6), (0.6, 0.6)]), line(&[(0.35, 0.35), (0.35, 0.85)])],
        ),
        "-" => g(0.7, vec![line(&[(0.1, 0.6), (0.6, 0.6)])]),
        "=" => g(
            0.7,
            vec![line(&[(0.1, 0.5), (0.6, 0.5)]), line(&[(0.1, 0.72), (0.6, 0.72)])],
        ),
        "(" => g(0.35, vec![arc(0.45, 0.55, 0.3, 0.55, 120.0, 240.0)]),
        ")" => g(0.35, vec![arc(-0.1, 0.55, 0.3, 0.55, 60.0, -60.0)]),
        "\\theta" => g(
            0.6,
            vec![ellipse(0.3, 0.5, 0.2, 0.45), line(&[(0.1, 0.5), (0.5, 0.5)])],
        ),
        "\\infty" => g(
            0.9,
            vec![ellipse(0.27, 0.65, 0.18, 0.15), ellipse(0.63, 0.65, 0.18, 0.15)],
        ),
        "\\rightarrow" => g(
            0.9,
            vec![
                line(&[(0.08, 0.62), (0.82, 0.62)]),
                line(&[(0.62, 0.45), (0.82, 0.62), (0.62, 0.79)]),
            ],
        ),
        "\\sum" => g(
            0.8,
            vec![line(&[(0.7, 0.05), (0.1, 0.05), (0.45, 0.5), (0.1, 0.95), (0.7, 0.95)])],
        ),
        "\\sin" => word("sin"),
        "\\lim" => word("lim"),
        _ => None,
    }
}

/// Tokens that the layout engine draws itself or that carry no ink.
pub fn is_structural(token: &str) -> bool {
    matches!(token, "^" | "_" | "{" | "}" | "\\frac" | "\\sqrt")
}
