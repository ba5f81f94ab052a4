//! On-disk dataset layout shared by the generator, trainer and evaluator.
//!
//! ```text
//! <dir>/vocab.txt      one token per line, line number = id
//! <dir>/labels.txt     <id>\t<token> <token> … <eol>
//! <dir>/manifest.txt   <id>\t<train|test>\t<image path relative to dir>
//! <dir>/images/*.pgm
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::vocab::Vocabulary;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const LABELS_FILE: &str = "labels.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Parse(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: PathBuf,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.id, e.split, e.image.display()))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Parse(format!("manifest line {}: expected 3 fields", i + 1)));
            }
            Ok(ManifestEntry {
                id: f[0].to_string(),
                split: f[1].parse()?,
                image: PathBuf::from(f[2]),
            })
        })
        .collect()
}

/// One labels-file line.
pub fn format_label(id: &str, tokens: &[String]) -> String {
    format!("{id}\t{}\n", tokens.join(" "))
}

/// `(id, tokens)` pairs in file order.
pub fn parse_labels(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (id, rest) = l
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("labels line {}: missing tab", i + 1)))?;
            Ok((id.to_string(), rest.split_whitespace().map(String::from).collect()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    /// Token ids ending with `<eol>`.
    pub label: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Reads a dataset directory, checking every label against the vocabulary.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let vocab = Vocabulary::parse(&read(VOCAB_FILE)?)?;
        let labels: HashMap<String, Vec<String>> = parse_labels(&read(LABELS_FILE)?)?.into_iter().collect();
        let manifest = parse_manifest(&read(MANIFEST_FILE)?)?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for e in manifest {
            let tokens = labels
                .get(&e.id)
                .ok_or_else(|| Error::Parse(format!("no label for sample {}", e.id)))?;
            let sample = Sample {
                image: GrayImage::read_pgm(&dir.join(&e.image))?,
                label: vocab.encode(tokens)?,
                id: e.id,
            };
            match e.split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        Ok(Dataset { vocab, train, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_and_labels_round_trip() {
        let entries = vec![
            ManifestEntry {
                id: "s0".into(),
                split: Split::Train,
                image: "images/s0.pgm".into(),
            },
            ManifestEntry {
                id: "s1".into(),
                split: Split::Test,
                image: "images/s1.pgm".into(),
            },
        ];
        let text = format_manifest(&entries);
        assert_eq!(text, "s0\ttrain\timages/s0.pgm\ns1\ttest\timages/s1.pgm\n");
        assert_eq!(parse_manifest(&text).unwrap(), entries);

        let toks: Vec<String> = ["x", "^", "{", "2", "}", "<eol>"].map(String::from).to_vec();
        let line = format_label("s0", &toks);
        assert_eq!(parse_labels(&line).unwrap(), vec![("s0".to_string(), toks)]);
        assert!(parse_manifest("a\tvalid\tp").is_err());
        assert!(parse_labels("no tab here").is_err());
    }
}
