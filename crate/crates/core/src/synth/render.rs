//! Box layout and anti-aliased stroke rasterization of token sequences.
//!
//! Layout coordinates put the baseline at `y = 0` with `y` growing downward,
//! so ascent is negative `y`.

use rand::Rng;

use super::glyphs::{glyph, Stroke};
use super::grammar::{parse, Group, Node};
use crate::error::{Error, Result};
use crate::image::{GrayImage, MAX_IMAGE_AREA};

#[derive(Clone, Debug, PartialEq)]
pub struct Jitter {
    pub rotation_deg: f64,
    pub translate_px: f64,
    pub stroke_px: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            rotation_deg: 5.0,
            translate_px: 2.0,
            stroke_px: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSpec {
    /// Height in pixels of a full-size digit.
    pub glyph_size: f64,
    pub script_scale: f64,
    /// Superscript baseline raise, in units of the parent glyph height.
    pub sup_offset: f64,
    /// Subscript baseline drop, in units of the parent glyph height.
    pub sub_offset: f64,
    /// Fraction bar thickness in pixels.
    pub bar_thickness: f64,
    /// Clearance between a fraction bar and its operands, relative to glyph height.
    pub frac_gap: f64,
    /// Radical tick width relative to glyph height.
    pub radical_width: f64,
    pub stroke_width: f64,
    /// Gap between neighbouring items relative to glyph height.
    pub spacing: f64,
    pub padding: usize,
    pub jitter: Option<Jitter>,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            glyph_size: 24.0,
            script_scale: 0.6,
            sup_offset: 0.45,
            sub_offset: 0.25,
            bar_thickness: 2.0,
            frac_gap: 0.15,
            radical_width: 0.5,
            stroke_width: 2.0,
            spacing: 0.12,
            padding: 6,
            jitter: Some(Jitter::default()),
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.glyph_size,
            self.script_scale,
            self.bar_thickness,
            self.stroke_width,
            self.radical_width,
        ];
        if positive.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("render sizes must be positive".into()));
        }
        if self.script_scale > 1.0 {
            return Err(Error::Config("script_scale must be at most 1".into()));
        }
        Ok(())
    }
}

/// Axis-aligned pixel rectangle, `x0 ≤ x1`, `y0 ≤ y1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    fn empty() -> Self {
        Rect {
            x0: f64::INFINITY,
            y0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y1: f64::NEG_INFINITY,
        }
    }

    fn is_empty(&self) -> bool {
        self.x0 > self.x1
    }

    fn union(self, o: Rect) -> Rect {
        Rect {
            x0: self.x0.min(o.x0),
            y0: self.y0.min(o.y0),
            x1: self.x1.max(o.x1),
            y1: self.y1.max(o.y1),
        }
    }

    fn include(&mut self, x: f64, y: f64, r: f64) {
        *self = self.union(Rect {
            x0: x - r,
            y0: y - r,
            x1: x + r,
            y1: y + r,
        });
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// True when pixel `(x, y)` (its center) lies inside the rectangle grown by `margin`.
    pub fn contains_pixel(&self, x: usize, y: usize, margin: f64) -> bool {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx >= self.x0 - margin && cx <= self.x1 + margin && cy >= self.y0 - margin && cy <= self.y1 + margin
    }
}

#[derive(Clone, Debug)]
enum Draw {
    Glyph {
        idx: usize,
        x: f64,
        y: f64,
        size: f64,
    },
    Poly {
        idx: usize,
        pts: Vec<(f64, f64)>,
        width: f64,
    },
}

impl Draw {
    fn shift(&mut self, dx: f64, dy: f64) {
        match self {
            Draw::Glyph { x, y, .. } => {
                *x += dx;
                *y += dy;
            }
            Draw::Poly { pts, .. } => pts.iter_mut().for_each(|p| {
                p.0 += dx;
                p.1 += dy;
            }),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Layout {
    width: f64,
    ascent: f64,
    descent: f64,
    draws: Vec<Draw>,
}

impl Layout {
    fn place(&mut self, mut child: Layout, dx: f64, dy: f64) {
        for d in &mut child.draws {
            d.shift(dx, dy);
        }
        self.draws.extend(child.draws);
        self.width = self.width.max(dx + child.width);
        self.ascent = self.ascent.max(child.ascent - dy);
        self.descent = self.descent.max(child.descent + dy);
    }
}

struct Engine<'a, S> {
    tokens: &'a [S],
    spec: &'a RenderSpec,
}

impl<S: AsRef<str>> Engine<'_, S> {
    fn row(&self, nodes: &[Node], size: f64) -> Result<Layout> {
        let mut out = Layout::default();
        let gap = self.spec.spacing * size;
        let mut x = 0.0;
        for (i, n) in nodes.iter().enumerate() {
            let l = self.node(n, size)?;
            let w = l.width;
            out.place(l, x, 0.0);
            x += w + if i + 1 < nodes.len() { gap } else { 0.0 };
        }
        out.width = x;
        Ok(out)
    }

    fn group(&self, g: &Group, size: f64) -> Result<Layout> {
        self.row(&g.body, size)
    }

    fn node(&self, n: &Node, size: f64) -> Result<Layout> {
        let s = self.spec;
        match n {
            Node::Atom { idx } => {
                let tok = self.tokens[*idx].as_ref();
                let gl = glyph(tok).ok_or_else(|| Error::Render(format!("no glyph for token {tok:?}")))?;
                let bottom = gl
                    .strokes
                    .iter()
                    .flatten()
                    .map(|p| p.1)
                    .fold(1.0f64, f64::max);
                Ok(Layout {
                    width: gl.advance * size,
                    ascent: size,
                    descent: (bottom - 1.0).max(0.05) * size,
                    draws: vec![Draw::Glyph {
                        idx: *idx,
                        x: 0.0,
                        y: 0.0,
                        size,
                    }],
                })
            }
            Node::Script { base, sub, sup } => {
                let mut out = self.node(base, size)?;
                let x = out.width + 0.05 * size;
                let small = size * s.script_scale;
                let mut w = out.width;
                if let Some(g) = sup {
                    let l = self.group(g, small)?;
                    w = w.max(x + l.width);
                    out.place(l, x, -s.sup_offset * size);
                }
                if let Some(g) = sub {
                    let l = self.group(g, small)?;
                    w = w.max(x + l.width);
                    out.place(l, x, s.sub_offset * size);
                }
                out.width = w;
                Ok(out)
            }
            Node::Frac { idx, num, den } => {
                let n = self.group(num, size)?;
                let d = self.group(den, size)?;
                let pad = 0.1 * size;
                let width = n.width.max(d.width) + 2.0 * pad;
                let axis = -0.45 * size;
                let gap = s.frac_gap * size + s.bar_thickness / 2.0;
                let mut out = Layout {
                    width,
                    ascent: -axis,
                    descent: 0.0,
                    draws: vec![Draw::Poly {
                        idx: *idx,
                        pts: vec![(0.0, axis), (width, axis)],
                        width: s.bar_thickness,
                    }],
                };
                let (nw, dw, nd, da) = (n.width, d.width, n.descent, d.ascent);
                out.place(n, (width - nw) / 2.0, axis - gap - nd);
                out.place(d, (width - dw) / 2.0, axis + gap + da);
                Ok(out)
            }
            Node::Sqrt { idx, arg } => {
                let a = self.group(arg, size)?;
                let r = s.radical_width * size;
                let top = -(a.ascent + 0.15 * size);
                let bottom = a.descent + 0.05 * size;
                let h = bottom - top;
                let right = r + 0.05 * size + a.width + 0.1 * size;
                let mut out = Layout {
                    width: right,
                    ascent: -top,
                    descent: bottom,
                    draws: vec![Draw::Poly {
                        idx: *idx,
                        pts: vec![
                            (0.05 * r, bottom - 0.45 * h),
                            (0.3 * r, bottom - 0.55 * h),
                            (0.55 * r, bottom),
                            (r, top),
                            (right, top),
                        ],
                        width: s.stroke_width,
                    }],
                };
                out.place(a, r + 0.05 * size, 0.0);
                Ok(out)
            }
        }
    }
}

/// Rendered expression with one ground-truth box per token (`<eol>` excluded).
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: GrayImage,
    pub boxes: Vec<Rect>,
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Draws a polyline with coverage `clamp(w/2 + 0.5 − distance, 0, 1)`.
fn stroke(img: &mut GrayImage, pts: &[(f64, f64)], width: f64) {
    let hw = width / 2.0;
    let reach = hw + 1.0;
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
        let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + reach).ceil() as usize).min(img.width());
        let y1 = ((a.1.max(b.1) + reach).ceil() as usize).min(img.height());
        for y in y0..y1 {
            for x in x0..x1 {
                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b);
                let cov = (hw + 0.5 - d).clamp(0.0, 1.0);
                if cov > img.get(x, y) {
                    img.set(x, y, cov);
                }
            }
        }
    }
}

/// Lays out and rasterizes `tokens` (a trailing `<eol>` is ignored).
pub fn render<S: AsRef<str>, R: Rng + ?Sized>(
    tokens: &[S],
    spec: &RenderSpec,
    rng: &mut R,
) -> Result<Rendered> {
    spec.validate()?;
    let body = crate::metrics::strip_eol(tokens);
    let tree = parse(body)?;
    let engine = Engine { tokens: body, spec };
    let layout = engine.row(&tree, spec.glyph_size)?;
    let pad = spec.padding as f64;
    let w = (layout.width + 2.0 * pad).ceil() as usize;
    let h = (layout.ascent + layout.descent + 2.0 * pad).ceil() as usize;
    if w * h > MAX_IMAGE_AREA {
        return Err(Error::Render(format!(
            "canvas {w}×{h} exceeds {MAX_IMAGE_AREA} pixels"
        )));
    }
    let (ox, oy) = (pad, pad + layout.ascent);
    let mut img = GrayImage::blank(w.max(1), h.max(1));
    let mut boxes = vec![Rect::empty(); body.len()];
    for d in &layout.draws {
        match d {
            Draw::Glyph { idx, x, y, size } => {
                let gl = glyph(body[*idx].as_ref()).expect("layout only places drawable glyphs");
                let (bx, by) = (ox + x, oy + y);
                let (mut rot, mut tx, mut ty, mut sw) = (0.0f64, 0.0, 0.0, spec.stroke_width);
                if let Some(j) = &spec.jitter {
                    rot = rng.random_range(-j.rotation_deg..=j.rotation_deg).to_radians();
                    tx = rng.random_range(-j.translate_px..=j.translate_px);
                    ty = rng.random_range(-j.translate_px..=j.translate_px);
                    sw = (sw + rng.random_range(-j.stroke_px..=j.stroke_px)).max(1.0);
                }
                let (cx, cy) = (bx + gl.advance * size / 2.0, by - size / 2.0);
                let (sn, cs) = rot.sin_cos();
                let mut b = Rect {
                    x0: bx,
                    y0: by - size,
                    x1: bx + gl.advance * size,
                    y1: by,
                };
                for s in &gl.strokes {
                    let pts: Stroke = s
                        .iter()
                        .map(|&(gx, gy)| {
                            let (px, py) = (bx + gx * size - cx, by + (gy - 1.0) * size - cy);
                            (cx + cs * px - sn * py + tx, cy + sn * px + cs * py + ty)
                        })
                        .collect();
                    for &(px, py) in &pts {
                        b.include(px, py, sw / 2.0 + 0.5);
                    }
                    stroke(&mut img, &pts, sw);
                }
                boxes[*idx] = b;
            }
            Draw::Poly { idx, pts, width } => {
                let pts: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x + ox, y + oy)).collect();
                let mut b = Rect::empty();
                for &(px, py) in &pts {
                    b.include(px, py, width / 2.0 + 0.5);
                }
                stroke(&mut img, &pts, *width);
                boxes[*idx] = b;
            }
        }
    }
    // structural tokens without ink take the box of what they enclose
    fill_group_boxes(&tree, &mut boxes);
    Ok(Rendered { image: img, boxes })
}

fn span_box(boxes: &[Rect], lo: usize, hi: usize) -> Rect {
    boxes[lo..hi]
        .iter()
        .filter(|b| !b.is_empty())
        .fold(Rect::empty(), |a, &b| a.union(b))
}

fn fill_group_boxes(nodes: &[Node], boxes: &mut [Rect]) {
    for n in nodes {
        let mut groups: Vec<&Group> = Vec::new();
        match n {
            Node::Atom { .. } => {}
            Node::Script { base, sub, sup } => {
                fill_group_boxes(std::slice::from_ref(base.as_ref()), boxes);
                groups.extend(sub.iter().chain(sup.iter()));
            }
            Node::Frac { num, den, .. } => groups.extend([num, den]),
            Node::Sqrt { arg, .. } => groups.push(arg),
        }
        for g in groups {
            fill_group_boxes(&g.body, boxes);
            let b = span_box(boxes, g.open + 1, g.close);
            boxes[g.open] = b;
            boxes[g.close] = b;
            if let Some(m) = g.marker {
                boxes[m] = b;
            }
        }
    }
}
