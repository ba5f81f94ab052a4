//! Flat `key = value` run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wsbs_core::attention::AttentionConfig;
use wsbs_core::decoder::DecoderConfig;
use wsbs_core::encoder::EncoderConfig;
use wsbs_core::synth::{ExprGrammar, Jitter, RenderSpec};
use wsbs_core::training::TrainConfig;
use wsbs_core::ModelConfig;

use crate::fail::Failure;

/// File name of the effective configuration written next to every output.
pub const ECHO_FILE: &str = "run.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,

    /// `full` or `compact`.
    pub grammar: String,
    pub n_samples: usize,
    pub split_ratio: f64,
    pub glyph_size: f64,
    pub jitter: bool,
    pub repeat_prob: f64,

    pub block_layers: Vec<usize>,
    pub growth_rate: usize,
    pub stem_channels: usize,
    pub transition_compression: f64,

    pub attn_channels: usize,
    pub score_conv_kernel: usize,
    pub coverage_conv_kernel: usize,
    pub coverage_channels: usize,

    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,

    pub initial_lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub rotation_max_deg: f64,
    pub use_coverage: bool,
    pub grad_clip: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let att = AttentionConfig::default();
        let dec = DecoderConfig::new(0);
        let tr = TrainConfig::default();
        let spec = RenderSpec::default();
        RunConfig {
            seed: 0,
            data_dir: None,
            out_dir: None,
            grammar: "full".into(),
            n_samples: 1000,
            split_ratio: 0.8,
            glyph_size: spec.glyph_size,
            jitter: spec.jitter.is_some(),
            repeat_prob: 0.0,
            block_layers: enc.block_layers,
            growth_rate: enc.growth_rate,
            stem_channels: enc.stem_channels,
            transition_compression: enc.transition_compression,
            attn_channels: att.attn_channels,
            score_conv_kernel: att.score_conv_kernel,
            coverage_conv_kernel: att.coverage_conv_kernel,
            coverage_channels: att.coverage_channels,
            embed_dim: dec.embed_dim,
            hidden_dim: dec.hidden_dim,
            max_len: dec.max_len,
            initial_lr: tr.initial_lr,
            lr_drop_epochs: tr.lr_drop_epochs,
            lr_drop_factor: tr.lr_drop_factor,
            momentum: tr.momentum,
            l2_lambda: tr.l2_lambda,
            batch_size: tr.batch_size,
            epochs: tr.epochs,
            dropout_rate: tr.dropout_rate,
            rotation_max_deg: tr.rotation_max_deg,
            use_coverage: tr.use_coverage,
            grad_clip: tr.grad_clip,
            eval_batch_size: tr.eval_batch_size,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| Failure::config(format!("bad run configuration: {e}")))
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
                Self::parse(&text).map_err(|f| f.context(&p.display().to_string()))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration always serializes")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
        let p = dir.join(ECHO_FILE);
        fs::write(&p, self.to_toml()).map_err(|e| Failure::io(format!("{}: {e}", p.display())))
    }

    pub fn grammar(&self) -> Result<ExprGrammar, Failure> {
        let mut g = match self.grammar.as_str() {
            "full" => ExprGrammar::default(),
            "compact" => ExprGrammar::compact(),
            other => {
                return Err(Failure::config(format!(
                    "grammar must be \"full\" or \"compact\", got {other:?}"
                )))
            }
        };
        g.repeat_prob = self.repeat_prob;
        g.max_tokens = g.max_tokens.min(self.max_len);
        Ok(g)
    }

    pub fn render_spec(&self) -> RenderSpec {
        RenderSpec {
            glyph_size: self.glyph_size,
            jitter: self.jitter.then(Jitter::default),
            ..RenderSpec::default()
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, Failure> {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                block_layers: self.block_layers.clone(),
                growth_rate: self.growth_rate,
                stem_channels: self.stem_channels,
                transition_compression: self.transition_compression,
            },
            attention: AttentionConfig {
                attn_channels: self.attn_channels,
                score_conv_kernel: self.score_conv_kernel,
                coverage_conv_kernel: self.coverage_conv_kernel,
                coverage_channels: self.coverage_channels,
            },
            decoder: DecoderConfig {
                embed_dim: self.embed_dim,
                hidden_dim: self.hidden_dim,
                vocab_size,
                max_len: self.max_len,
            },
            use_coverage: self.use_coverage,
        };
        cfg.validate().map_err(Failure::from_core)?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, Failure> {
        let cfg = TrainConfig {
            initial_lr: self.initial_lr,
            lr_drop_epochs: self.lr_drop_epochs.clone(),
            lr_drop_factor: self.lr_drop_factor,
            momentum: self.momentum,
            l2_lambda: self.l2_lambda,
            batch_size: self.batch_size,
            epochs: self.epochs,
            dropout_rate: self.dropout_rate,
            rotation_max_deg: self.rotation_max_deg,
            use_coverage: self.use_coverage,
            seed: self.seed,
            grad_clip: self.grad_clip,
            eval_batch_size: self.eval_batch_size,
        };
        cfg.validate().map_err(Failure::from_core)?;
        Ok(cfg)
    }
}
