//! Writes a reproducible synthetic dataset directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grammar::{gen_expression, ExprGrammar};
use super::render::{render, RenderSpec};
use crate::data::{format_label, format_manifest, ManifestEntry, Split, LABELS_FILE, MANIFEST_FILE, VOCAB_FILE};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::vocab::Vocabulary;

/// Summary of a written dataset.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub vocab: Vocabulary,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// One generated sample: label tokens (ending with `<eol>`) and its image.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub tokens: Vec<String>,
    pub image: GrayImage,
}

/// Per-sample generator stream: the same `(seed, index)` always gives the same sample.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws expressions until one renders within the area cap, shrinking the
/// glyph size after each failure.
pub fn gen_sample(grammar: &ExprGrammar, spec: &RenderSpec, seed: u64, index: u64) -> Result<SynthSample> {
    let mut rng = sample_rng(seed, index);
    let mut spec = spec.clone();
    for _ in 0..8 {
        let tokens = gen_expression(grammar, &mut rng);
        match render(&tokens, &spec, &mut rng) {
            Ok(r) => return Ok(SynthSample { tokens, image: r.image }),
            Err(Error::Render(_)) => spec.glyph_size *= 0.8,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Render(format!("sample {index}: no expression fits the area cap")))
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:06}")
}

/// Generates `n` samples; the first `round(n·split_ratio)` form the training split.
pub fn generate(
    n: usize,
    grammar: &ExprGrammar,
    spec: &RenderSpec,
    seed: u64,
) -> Result<Vec<SynthSample>> {
    grammar.validate()?;
    spec.validate()?;
    (0..n).map(|i| gen_sample(grammar, spec, seed, i as u64)).collect()
}

/// Writes `images/`, `labels.txt`, `vocab.txt` and `manifest.txt` under `out_dir`.
pub fn build_dataset(
    n: usize,
    grammar: &ExprGrammar,
    spec: &RenderSpec,
    split_ratio: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::Config(format!("split ratio {split_ratio} outside [0, 1]")));
    }
    let samples = generate(n, grammar, spec, seed)?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let n_train = (n as f64 * split_ratio).round() as usize;
    let vocab = Vocabulary::from_tokens(samples.iter().flat_map(|s| s.tokens.iter().map(String::as_str)))?;
    let mut labels = String::new();
    let mut entries = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let id = sample_id(i);
        let rel = PathBuf::from("images").join(format!("{id}.pgm"));
        s.image.write_pgm(&out_dir.join(&rel))?;
        labels.push_str(&format_label(&id, &s.tokens));
        entries.push(ManifestEntry {
            id,
            split: if i < n_train { Split::Train } else { Split::Test },
            image: rel,
        });
    }
    let write = |name: &str, text: &str| {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(LABELS_FILE, &labels)?;
    write(VOCAB_FILE, &vocab.to_text())?;
    write(MANIFEST_FILE, &format_manifest(&entries))?;
    Ok(Manifest { entries, vocab })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    #[test]
    fn split_counts_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let g = ExprGrammar::compact();
        let m = build_dataset(10, &g, &RenderSpec::default(), 0.8, 3, dir.path()).unwrap();
        assert_eq!((m.count(Split::Train), m.count(Split::Test)), (8, 2));
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (8, 2));
        assert_eq!(ds.vocab, m.vocab);
        assert!(build_dataset(0, &g, &RenderSpec::default(), 0.8, 3, dir.path()).is_err());
    }

    #[test]
    fn samples_are_independent_of_count() {
        let g = ExprGrammar::default();
        let spec = RenderSpec::default();
        let a = generate(3, &g, &spec, 11).unwrap();
        let b = generate(5, &g, &spec, 11).unwrap();
        for i in 0..3 {
            assert_eq!(a[i].tokens, b[i].tokens);
            assert_eq!(a[i].image, b[i].image);
        }
    }
}
