//! Per-step attention heatmaps and the raw α table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::Tensor;

/// Nearest-neighbour upsampling of an `h×w` attention plane to `width×height`
/// pixels, min-max scaled per plane. High attention is dark (full ink).
pub fn heatmap(alpha: &Tensor, width: usize, height: usize) -> Result<GrayImage> {
    let (h, w) = alpha.dims2()?;
    let (lo, hi) = alpha
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let range = hi - lo;
    let mut img = GrayImage::blank(width, height);
    for y in 0..height {
        let i = (y * h / height).min(h - 1);
        for x in 0..width {
            let j = (x * w / width).min(w - 1);
            let v = alpha.data()[i * w + j];
            img.set(x, y, if range > 0.0 { (v - lo) / range } else { 0.0 });
        }
    }
    Ok(img)
}

/// File-name-safe spelling of a token.
pub fn token_slug(token: &str) -> String {
    match token {
        "^" => "caret".into(),
        "_" => "underscore".into(),
        "{" => "lbrace".into(),
        "}" => "rbrace".into(),
        "(" => "lparen".into(),
        ")" => "rparen".into(),
        "+" => "plus".into(),
        "-" => "minus".into(),
        "=" => "eq".into(),
        "<eol>" => "eol".into(),
        t => {
            let s: String = t.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
            if s.is_empty() {
                format!("u{:x}", t.chars().next().map_or(0, |c| c as u32))
            } else {
                s
            }
        }
    }
}

/// `step,token,α…` rows, α in row-major order.
pub fn alphas_csv(tokens: &[&str], alphas: &[Tensor]) -> String {
    let mut out = String::new();
    for (t, (tok, a)) in tokens.iter().zip(alphas).enumerate() {
        let _ = write!(out, "{t},{tok}");
        for v in a.data() {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    out
}

/// Writes `step_<t>_<token>.pgm` for every step plus `alphas.csv` into `dir`.
pub fn export_attention(
    dir: &Path,
    tokens: &[&str],
    alphas: &[Tensor],
    width: usize,
    height: usize,
) -> Result<()> {
    if tokens.len() != alphas.len() {
        return Err(Error::Pairing {
            pred: tokens.len(),
            label: alphas.len(),
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, (tok, a)) in tokens.iter().zip(alphas).enumerate() {
        heatmap(a, width, height)?.write_pgm(&dir.join(format!("step_{t}_{}.pgm", token_slug(tok))))?;
    }
    let p = dir.join("alphas.csv");
    fs::write(&p, alphas_csv(tokens, alphas)).map_err(|e| Error::io(&p, e))
}
