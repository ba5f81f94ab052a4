//! Grayscale images, binary PGM I/O and batching for the encoder.
//!
//! In memory, pixels hold *ink* in `[0, 1]` (1 = full ink, 0 = background),
//! the inverse of the PGM convention, so zero padding is background.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest accepted image area in pixels.
pub const MAX_IMAGE_AREA: usize = 200_000;

/// Images smaller than this along either axis are centered on a canvas of this size.
pub const MIN_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    ink: Vec<f64>,
}

impl GrayImage {
    pub fn blank(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            ink: vec![0.0; width * height],
        }
    }

    pub fn from_ink(width: usize, height: usize, ink: Vec<f64>) -> Result<Self> {
        if ink.len() != width * height || width == 0 || height == 0 {
            return Err(Error::dim(format!(
                "{} ink values for a {width}×{height} image",
                ink.len()
            )));
        }
        Ok(GrayImage { width, height, ink })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn ink(&self) -> &[f64] {
        &self.ink
    }

    pub fn ink_mut(&mut self) -> &mut [f64] {
        &mut self.ink
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.ink[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.ink[y * self.width + x] = v;
    }

    /// Error unless the area is within [`MAX_IMAGE_AREA`].
    pub fn check_area(&self) -> Result<()> {
        if self.area() > MAX_IMAGE_AREA {
            return Err(Error::InputTooLarge {
                area: self.area(),
                cap: MAX_IMAGE_AREA,
            });
        }
        Ok(())
    }

    /// Centers the image on a background canvas at least `MIN_SIDE` on each axis.
    pub fn pad_to_min(&self) -> GrayImage {
        if self.width >= MIN_SIDE && self.height >= MIN_SIDE {
            return self.clone();
        }
        let w = self.width.max(MIN_SIDE);
        let h = self.height.max(MIN_SIDE);
        let (ox, oy) = ((w - self.width) / 2, (h - self.height) / 2);
        let mut out = GrayImage::blank(w, h);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x + ox, y + oy, self.get(x, y));
            }
        }
        out
    }

    /// 8-bit PGM sample values: background 255, ink toward 0.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.ink
            .iter()
            .map(|&v| (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8], maxval: u16) -> Result<Self> {
        let m = maxval as f64;
        Self::from_ink(
            width,
            height,
            bytes.iter().map(|&b| 1.0 - b as f64 / m).collect(),
        )
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut header = Vec::new();
        while header.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Parse("truncated PGM header".into()));
            }
            header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if header[0] != "P5" {
            return Err(Error::Parse(format!(
                "expected binary PGM magic P5, found {:?}",
                header[0]
            )));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad PGM header field {s:?}")))
        };
        let (w, h, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Parse(format!("unsupported PGM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let end = pos + w * h;
        if end > bytes.len() {
            return Err(Error::Parse(format!(
                "PGM raster needs {} bytes, file has {}",
                w * h,
                bytes.len().saturating_sub(pos)
            )));
        }
        Self::from_bytes(w, h, &bytes[pos..end], maxval as u16)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pgm(&bytes)
    }
}

/// Images padded (bottom/right, with background) to a common size.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    /// `B×1×H×W` ink values.
    pub pixels: Tensor,
    /// Original `(height, width)` of each item before batch padding.
    pub sizes: Vec<(usize, usize)>,
}

impl ImageBatch {
    /// Batches images after centering undersized ones on a `MIN_SIDE` canvas.
    pub fn from_images(images: &[&GrayImage]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Argument("empty image batch".into()));
        }
        for img in images {
            img.check_area()?;
        }
        let prepared: Vec<GrayImage> = images.iter().map(|i| i.pad_to_min()).collect();
        let h = prepared.iter().map(|i| i.height).max().unwrap_or(MIN_SIDE);
        let w = prepared.iter().map(|i| i.width).max().unwrap_or(MIN_SIDE);
        let mut pixels = Tensor::zeros(&[prepared.len(), 1, h, w]);
        let data = pixels.data_mut();
        for (b, img) in prepared.iter().enumerate() {
            for y in 0..img.height {
                let dst = &mut data[(b * h + y) * w..(b * h + y) * w + img.width];
                dst.copy_from_slice(&img.ink[y * img.width..(y + 1) * img.width]);
            }
        }
        Ok(ImageBatch {
            pixels,
            sizes: prepared.iter().map(|i| (i.height, i.width)).collect(),
        })
    }

    pub fn single(image: &GrayImage) -> Result<Self> {
        Self::from_images(&[image])
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }
}
