use std::fs;
use std::path::{Path, PathBuf};

use wsbs_core::checkpoint;
use wsbs_core::data::{Dataset, Split};
use wsbs_core::synth::{self, build_dataset, ExprGrammar, RenderSpec};
use wsbs_core::GrayImage;

use crate::common::{desk_config, vocab_of};
use crate::Outcome;

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn round_trips() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let g = ExprGrammar::compact();
    let params = desk_config(vocab_of(&g).len()).init_params(3).unwrap();
    let (a, b) = (root.join("a.ckpt"), root.join("b.ckpt"));
    checkpoint::save(&params, &a).unwrap();
    checkpoint::save(&checkpoint::load(&a).unwrap(), &b).unwrap();
    let ckpt_ok = fs::read(&a).unwrap() == fs::read(&b).unwrap();

    let full = ExprGrammar::default();
    let spec = RenderSpec::default();
    let (d1, d2) = (root.join("d1"), root.join("d2"));
    build_dataset(60, &full, &spec, 0.8, 17, &d1).unwrap();
    build_dataset(60, &full, &spec, 0.8, 17, &d2).unwrap();
    let t1 = tree(&d1);
    let dataset_ok = t1 == tree(&d2) && t1.len() == 60 + 3;

    let originals = synth::generate(60, &full, &spec, 17).unwrap();
    let ds = Dataset::load(&d1).unwrap();
    let (mut lost, mut pixel_err) = (0usize, 0.0f64);
    for (i, s) in ds.train.iter().chain(&ds.test).enumerate() {
        let back = ds.vocab.decode(&s.label).unwrap();
        lost += originals[i].tokens.iter().zip(&back).filter(|(x, y)| x != y).count()
            + originals[i].tokens.len().abs_diff(back.len());
        let o = &originals[i].image;
        pixel_err = o
            .ink()
            .iter()
            .zip(s.image.ink())
            .fold(pixel_err, |m, (x, y)| m.max((x - y).abs()));
        let reread = GrayImage::decode_pgm(&s.image.encode_pgm()).unwrap();
        lost += usize::from(reread != s.image);
    }
    let splits_ok = ds.split(Split::Train).len() == 48 && ds.split(Split::Test).len() == 12;
    let files_ok = lost == 0 && pixel_err <= 0.5 / 255.0 + 1e-12 && splits_ok;

    Outcome::new(
        ckpt_ok && dataset_ok && files_ok,
        format!(
            "checkpoint byte-identical: {ckpt_ok}; dataset byte-identical per seed: {dataset_ok}; \
             reread token losses {lost}, max pixel quantization {:.4}",
            pixel_err
        ),
    )
}
