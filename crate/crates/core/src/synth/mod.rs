//! Synthetic expression corpus: grammar, stroke glyphs, layout rendering
//! and dataset files.

pub mod dataset;
pub mod glyphs;
pub mod grammar;
pub mod render;

pub use dataset::{build_dataset, gen_sample, generate, Manifest, SynthSample};
pub use grammar::{gen_expression, parse, ExprGrammar};
pub use render::{render, Jitter, Rect, RenderSpec, Rendered};
