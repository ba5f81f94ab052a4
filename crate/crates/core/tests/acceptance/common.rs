use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsbs_core::attention::AttentionConfig;
use wsbs_core::data::Sample;
use wsbs_core::decoder::DecoderConfig;
use wsbs_core::encoder::EncoderConfig;
use wsbs_core::synth::{self, ExprGrammar, RenderSpec};
use wsbs_core::training::{self, TrainConfig, TrainHooks};
use wsbs_core::{Model, ModelConfig, Vocabulary};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The small configuration: stem 16, blocks [2, 2], growth 8, K' 32, hidden 64.
pub fn desk_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            block_layers: vec![2, 2],
            growth_rate: 8,
            stem_channels: 16,
            transition_compression: 0.5,
        },
        attention: AttentionConfig {
            attn_channels: 32,
            score_conv_kernel: 3,
            coverage_conv_kernel: 5,
            coverage_channels: 8,
        },
        decoder: DecoderConfig {
            embed_dim: 32,
            hidden_dim: 64,
            vocab_size,
            max_len: 48,
        },
        use_coverage: true,
    }
}

/// Unregularized desk recipe: plain Nesterov SGD at a rate suited to the
/// small model, one tenfold drop after `drop`.
pub fn desk_train(epochs: usize, drop: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        initial_lr: 0.02,
        lr_drop_epochs: vec![drop],
        epochs,
        dropout_rate: 0.0,
        rotation_max_deg: 0.0,
        l2_lambda: 0.0,
        grad_clip: Some(5.0),
        seed,
        ..TrainConfig::default()
    }
}

pub fn vocab_of(grammar: &ExprGrammar) -> Vocabulary {
    let terms = grammar.terminals();
    Vocabulary::from_tokens(terms.iter().map(String::as_str)).unwrap()
}

pub fn corpus(grammar: &ExprGrammar, spec: &RenderSpec, n: usize, seed: u64, vocab: &Vocabulary) -> Vec<Sample> {
    synth::generate(n, grammar, spec, seed)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| Sample {
            id: format!("s{i}"),
            label: vocab.encode(&s.tokens).unwrap(),
            image: s.image,
        })
        .collect()
}

pub fn refs(s: &[Sample]) -> Vec<&Sample> {
    s.iter().collect()
}

/// The learnability corpus: 500 compact-grammar expressions, 32 px glyphs,
/// the first 400 for training.
pub struct DeskCorpus {
    pub vocab: Vocabulary,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub const DESK_GLYPH: f64 = 32.0;

pub fn desk_corpus() -> &'static DeskCorpus {
    static C: OnceLock<DeskCorpus> = OnceLock::new();
    C.get_or_init(|| {
        let g = ExprGrammar::compact();
        let vocab = vocab_of(&g);
        let spec = RenderSpec {
            glyph_size: DESK_GLYPH,
            ..RenderSpec::default()
        };
        let mut all = corpus(&g, &spec, 500, 7, &vocab);
        let test = all.split_off(400);
        DeskCorpus {
            vocab,
            train: all,
            test,
        }
    })
}

/// The learnability run's final model, shared with the warm-start criterion.
pub fn desk_model() -> &'static Model {
    static M: OnceLock<Model> = OnceLock::new();
    M.get_or_init(|| {
        let c = desk_corpus();
        let mut model = Model::new(desk_config(c.vocab.len()), 0).unwrap();
        let cfg = desk_train(60, 40, 1);
        training::train(&mut model, &refs(&c.train), &[], &cfg, None, TrainHooks::default()).unwrap();
        model
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
