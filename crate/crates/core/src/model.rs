//! The full recognizer: encoder, attention and decoder sharing one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionConfig};
use crate::autodiff::{Mode, Var};
use crate::decoder::{self, Decoded, DecoderConfig};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::image::{GrayImage, ImageBatch};
use crate::params::{Graph, LayerParams};
use crate::vocab::{EOL, EOS, PAD};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub decoder: DecoderConfig,
    /// Feed the coverage map into attention scoring.
    pub use_coverage: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            decoder: DecoderConfig::new(vocab_size),
            use_coverage: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.attention.validate()?;
        self.decoder.validate()
    }

    /// Freshly initialized parameters for this configuration.
    pub fn init_params(&self, seed: u64) -> Result<LayerParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = LayerParams::new();
        let c = self.encoder.out_channels();
        self.encoder.init_params(&mut p, &mut rng)?;
        self.attention
            .init_params(&mut p, c, self.decoder.hidden_dim, &mut rng)?;
        self.decoder.init_params(&mut p, c, &mut rng)?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: LayerParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Model { config, params })
    }

    /// Wraps existing parameters after checking they match the configuration
    /// name for name and shape for shape.
    pub fn with_params(config: ModelConfig, params: LayerParams) -> Result<Self> {
        let template = config.init_params(0)?;
        let mut bad = Vec::new();
        for (name, t) in template.iter() {
            match params.get(name) {
                Ok(p) if p.shape() == t.shape() => {}
                Ok(p) => bad.push(format!("{name}: expected {:?}, found {:?}", t.shape(), p.shape())),
                Err(_) => bad.push(format!("{name}: missing")),
            }
        }
        for (name, _) in params.iter() {
            if !template.contains(name) {
                bad.push(format!("{name}: unexpected"));
            }
        }
        if !bad.is_empty() {
            return Err(Error::Incompatible { paths: bad });
        }
        Ok(Model { config, params })
    }

    /// Summed per-sequence cross-entropy averaged over the batch, with the
    /// ground-truth previous token fed at every step.
    pub fn teacher_forced_loss(
        &self,
        g: &mut Graph<'_>,
        images: &ImageBatch,
        labels: &[Vec<usize>],
        dropout_rate: f64,
    ) -> Result<Var> {
        teacher_forced_loss(g, &self.config, images, labels, dropout_rate)
    }

    /// Greedy recognition of each image, batched.
    pub fn recognize(&self, images: &[&GrayImage]) -> Result<Vec<Decoded>> {
        let batch = ImageBatch::from_images(images)?;
        self.recognize_batch(&batch)
    }

    pub fn recognize_batch(&self, batch: &ImageBatch) -> Result<Vec<Decoded>> {
        let mut g = Graph::new(&self.params, Mode::Eval, false, 0);
        let f = encoder::encode(&mut g, &self.config.encoder, batch)?;
        let pf = attention::project_features(&mut g, &f)?;
        decoder::greedy_decode(
            &mut g,
            &pf,
            &self.config.attention,
            &self.config.decoder,
            self.config.use_coverage,
        )
    }
}

/// Checks a label: non-empty, in-vocabulary, ends with `<eol>`, within `max_len`.
pub fn check_label(label: &[usize], cfg: &DecoderConfig) -> Result<()> {
    if label.is_empty() {
        return Err(Error::EmptyLabel);
    }
    if label.len() > cfg.max_len {
        return Err(Error::Length {
            len: label.len(),
            max: cfg.max_len,
        });
    }
    if let Some(&t) = label.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Vocabulary(format!(
            "label token id {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if label[label.len() - 1] != EOL {
        return Err(Error::Argument("label must end with <eol>".into()));
    }
    Ok(())
}

/// `(1/B) Σ_b Σ_t −log P(y_t | y_<t, image_b)`, padding masked out.
pub fn teacher_forced_loss(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    images: &ImageBatch,
    labels: &[Vec<usize>],
    dropout_rate: f64,
) -> Result<Var> {
    if labels.len() != images.len() {
        return Err(Error::Pairing {
            pred: images.len(),
            label: labels.len(),
        });
    }
    for l in labels {
        check_label(l, &cfg.decoder)?;
    }
    let b = labels.len();
    let steps = labels.iter().map(Vec::len).max().unwrap_or(0);
    let f = encoder::encode(g, &cfg.encoder, images)?;
    let pf = attention::project_features(g, &f)?;
    let mut state = decoder::init_state(g, &pf, &cfg.attention, cfg.decoder.hidden_dim);
    let mut total: Option<Var> = None;
    for t in 0..steps {
        let prev: Vec<usize> = labels
            .iter()
            .map(|l| match t {
                0 => EOS,
                _ => l.get(t - 1).copied().unwrap_or(PAD),
            })
            .collect();
        let targets: Vec<usize> = labels.iter().map(|l| l.get(t).copied().unwrap_or(PAD)).collect();
        let weights: Vec<f64> = labels
            .iter()
            .map(|l| if t < l.len() { 1.0 / b as f64 } else { 0.0 })
            .collect();
        let out = decoder::decode_step(g, &prev, &state, &pf, cfg.use_coverage, dropout_rate)?;
        let ce = g.tape.cross_entropy(out.logits, &targets, &weights)?;
        total = Some(match total {
            None => ce,
            Some(acc) => g.tape.add(acc, ce)?,
        });
        state = out.state;
    }
    total.ok_or(Error::EmptyLabel)
}
