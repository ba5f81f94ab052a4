//! Densely connected convolutional encoder producing the feature map `F`.
//!
//! Layout: a 7×7/2 stem convolution with BN, ReLU and 2×2 average pooling,
//! then dense blocks separated by compressing transition layers. Each dense
//! layer is BN → ReLU → 3×3 convolution emitting `growth_rate` channels, and
//! consumes the concatenation of the block input with every earlier layer
//! output in that block.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::image::{ImageBatch, MAX_IMAGE_AREA};
use crate::params::{Graph, LayerParams};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub block_layers: Vec<usize>,
    pub growth_rate: usize,
    pub stem_channels: usize,
    /// Channel compression θ applied by each transition layer.
    pub transition_compression: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            block_layers: vec![6, 12, 24],
            growth_rate: 24,
            stem_channels: 48,
            transition_compression: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_layers.is_empty() || self.block_layers.contains(&0) {
            return Err(Error::Config(format!(
                "block_layers must be non-empty with positive counts, got {:?}",
                self.block_layers
            )));
        }
        if self.growth_rate == 0 || self.stem_channels == 0 {
            return Err(Error::Config(
                "growth_rate and stem_channels must be positive".into(),
            ));
        }
        let t = self.transition_compression;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!(
                "transition_compression {t} outside (0, 1]"
            )));
        }
        Ok(())
    }

    fn compress(&self, c: usize) -> usize {
        ((c as f64 * self.transition_compression).ceil() as usize).max(1)
    }

    /// Channel count entering each block, then the final output count.
    fn channel_plan(&self) -> (Vec<usize>, usize) {
        let mut c = self.stem_channels;
        let mut inputs = Vec::new();
        for (i, &l) in self.block_layers.iter().enumerate() {
            inputs.push(c);
            c += l * self.growth_rate;
            if i + 1 < self.block_layers.len() {
                c = self.compress(c);
            }
        }
        (inputs, c)
    }

    /// Channels `C` of the feature map.
    pub fn out_channels(&self) -> usize {
        self.channel_plan().1
    }

    /// Feature-map height/width produced from an input of `h × w`.
    pub fn feature_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let stem = |n: usize| (n + 6 - 7) / 2 + 1;
        let (mut fh, mut fw) = (stem(h) / 2, stem(w) / 2);
        for _ in 1..self.block_layers.len() {
            fh /= 2;
            fw /= 2;
        }
        (fh, fw)
    }

    /// Registers all encoder parameters under `encoder.`.
    pub fn init_params<R: Rng + ?Sized>(&self, params: &mut LayerParams, rng: &mut R) -> Result<()> {
        self.validate()?;
        params.init_conv("encoder.stem.conv", self.stem_channels, 1, 7, false, rng)?;
        params.init_batch_norm("encoder.stem.bn", self.stem_channels)?;
        let (inputs, _) = self.channel_plan();
        for (bi, (&layers, &c0)) in self.block_layers.iter().zip(&inputs).enumerate() {
            for li in 0..layers {
                let prefix = format!("encoder.block{}.layer{}", bi + 1, li + 1);
                let cin = c0 + li * self.growth_rate;
                init_dense_layer(params, &prefix, cin, self.growth_rate, rng)?;
            }
            if bi + 1 < self.block_layers.len() {
                let c = c0 + layers * self.growth_rate;
                let prefix = format!("encoder.trans{}", bi + 1);
                params.init_batch_norm(&format!("{prefix}.bn"), c)?;
                params.init_conv(&format!("{prefix}.conv"), self.compress(c), c, 1, true, rng)?;
            }
        }
        Ok(())
    }
}

/// Registers one dense layer (`prefix.bn`, `prefix.conv`) mapping `cin` → `growth` channels.
pub fn init_dense_layer<R: Rng + ?Sized>(
    params: &mut LayerParams,
    prefix: &str,
    cin: usize,
    growth: usize,
    rng: &mut R,
) -> Result<()> {
    params.init_batch_norm(&format!("{prefix}.bn"), cin)?;
    params.init_conv(&format!("{prefix}.conv"), growth, cin, 3, true, rng)
}

/// Encoder output: `values` is `B×C×H×W`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub values: Var,
    /// Valid cells (`B·H·W`, row-major) when the batch mixes image sizes;
    /// `None` when every cell is valid.
    pub mask: Option<Vec<bool>>,
    /// `(height, width)` in pixels of each source image.
    pub source_image_shape: Vec<(usize, usize)>,
    /// Valid top-left `(height, width)` region of the map for each item.
    pub valid_dims: Vec<(usize, usize)>,
}

/// BN → ReLU → 3×3 convolution (stride 1, padding 1).
pub fn dense_layer(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let n = g.batch_norm(&format!("{prefix}.bn"), x)?;
    let a = g.tape.relu(n);
    g.conv(&format!("{prefix}.conv"), a, 1, 1)
}

/// `layers` dense layers; output is the concatenation of the input and every layer output.
pub fn dense_block(g: &mut Graph<'_>, prefix: &str, x: Var, layers: usize) -> Result<Var> {
    for li in 1..=layers {
        if !g.has_param(&format!("{prefix}.layer{li}.conv.weight")) {
            return Err(Error::Config(format!(
                "{prefix}: parameters for layer {li} of {layers} are missing"
            )));
        }
    }
    let mut pieces = vec![x];
    for li in 1..=layers {
        let input = if pieces.len() == 1 {
            x
        } else {
            g.tape.concat_channels(&pieces)?
        };
        let y = dense_layer(g, &format!("{prefix}.layer{li}"), input)?;
        pieces.push(y);
    }
    g.tape.concat_channels(&pieces)
}

/// BN → ReLU → 1×1 convolution → 2×2 average pooling.
pub fn transition(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let (_, _, h, w) = g.value(x).dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::dim(format!(
            "{prefix}: cannot downsample a {h}×{w} map"
        )));
    }
    let n = g.batch_norm(&format!("{prefix}.bn"), x)?;
    let a = g.tape.relu(n);
    let c = g.conv(&format!("{prefix}.conv"), a, 1, 0)?;
    g.tape.avg_pool2(c)
}

/// Runs the full encoder over a batch of images.
pub fn encode(g: &mut Graph<'_>, cfg: &EncoderConfig, images: &ImageBatch) -> Result<FeatureMap> {
    let (b, c, h, w) = images.pixels.dims4()?;
    if c != 1 {
        return Err(Error::dim(format!(
            "encoder expects grayscale input, got {c} channels"
        )));
    }
    for &(ih, iw) in &images.sizes {
        if ih * iw > MAX_IMAGE_AREA {
            return Err(Error::InputTooLarge {
                area: ih * iw,
                cap: MAX_IMAGE_AREA,
            });
        }
    }
    let x = g.tape.constant(images.pixels.clone());
    let s = g.conv("encoder.stem.conv", x, 2, 3)?;
    let s = g.batch_norm("encoder.stem.bn", s)?;
    let s = g.tape.relu(s);
    let mut y = g.tape.avg_pool2(s)?;
    let n_blocks = cfg.block_layers.len();
    for (bi, &layers) in cfg.block_layers.iter().enumerate() {
        y = dense_block(g, &format!("encoder.block{}", bi + 1), y, layers)?;
        if bi + 1 < n_blocks {
            y = transition(g, &format!("encoder.trans{}", bi + 1), y)?;
        }
    }
    let (_, _, fh, fw) = g.value(y).dims4()?;
    debug_assert_eq!((fh, fw), cfg.feature_dims(h, w));
    let mut mask = vec![true; b * fh * fw];
    let mut any_masked = false;
    let mut valid_dims = Vec::with_capacity(b);
    for (bi, &(ih, iw)) in images.sizes.iter().enumerate() {
        let (vh, vw) = cfg.feature_dims(ih, iw);
        let (vh, vw) = (vh.clamp(1, fh), vw.clamp(1, fw));
        valid_dims.push((vh, vw));
        for i in 0..fh {
            for j in 0..fw {
                if i >= vh || j >= vw {
                    mask[(bi * fh + i) * fw + j] = false;
                    any_masked = true;
                }
            }
        }
    }
    Ok(FeatureMap {
        values: y,
        mask: any_masked.then_some(mask),
        source_image_shape: images.sizes.clone(),
        valid_dims,
    })
}
