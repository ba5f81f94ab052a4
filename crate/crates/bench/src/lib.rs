//! Fixtures shared by the benchmarks in `benches/`.

use wsbs_core::attention::AttentionConfig;
use wsbs_core::data::Sample;
use wsbs_core::decoder::DecoderConfig;
use wsbs_core::encoder::EncoderConfig;
use wsbs_core::synth::{self, ExprGrammar, RenderSpec};
use wsbs_core::{ModelConfig, Vocabulary};

/// The small configuration used for desk-scale training runs.
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

/// `n` compact-grammar samples and their vocabulary.
pub fn corpus(n: usize, seed: u64) -> (Vocabulary, Vec<Sample>) {
    let spec = RenderSpec {
        glyph_size: 32.0,
        ..RenderSpec::default()
    };
    let raw = synth::generate(n, &ExprGrammar::compact(), &spec, seed).expect("synthesis succeeds");
    let vocab = Vocabulary::from_tokens(raw.iter().flat_map(|s| s.tokens.iter().map(String::as_str)))
        .expect("valid vocabulary");
    let samples = raw
        .into_iter()
        .enumerate()
        .map(|(i, s)| Sample {
            id: format!("b{i}"),
            label: vocab.encode(&s.tokens).expect("tokens in vocabulary"),
            image: s.image,
        })
        .collect();
    (vocab, samples)
}
