use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use wsbs_core::data::{format_label, Dataset, Sample, Split, VOCAB_FILE};
use wsbs_core::decoder::Decoded;
use wsbs_core::metrics::{corpus_eval, length_bucket_report};
use wsbs_core::training::{self, EpochLog, TrainHooks};
use wsbs_core::vocab::EOL;
use wsbs_core::{checkpoint, synth, viz, GrayImage, Model, Vocabulary};

use crate::config::{RunConfig, ECHO_FILE};
use crate::fail::{self, Failure};

/// Label-length bucket edges used by the evaluation report.
pub const BUCKET_EDGES: [usize; 5] = [1, 6, 11, 21, 31];

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn required(flag: Option<PathBuf>, from_config: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| Failure::config(format!("no {what} given on the command line or in the config")))
}

pub fn synth(config: Option<&Path>, out: Option<PathBuf>, n: Option<usize>, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(n) = n {
        cfg.n_samples = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = required(out, &cfg.out_dir, "output directory")?;
    cfg.out_dir = Some(out.clone());
    let grammar = cfg.grammar()?;
    let m = synth::build_dataset(cfg.n_samples, &grammar, &cfg.render_spec(), cfg.split_ratio, cfg.seed, &out)?;
    cfg.echo(&out)?;
    println!(
        "{} samples ({} train, {} test), {} vocabulary entries, written to {}",
        m.entries.len(),
        m.count(Split::Train),
        m.count(Split::Test),
        m.vocab.len(),
        out.display()
    );
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    data_dir: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<&Path>,
    no_coverage: bool,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    let data_dir = required(data_dir, &cfg.data_dir, "data directory")?;
    let out = required(out, &cfg.out_dir, "output directory")?;
    cfg.data_dir = Some(data_dir.clone());
    cfg.out_dir = Some(out.clone());
    if no_coverage {
        cfg.use_coverage = false;
    }
    let tc = cfg.train_config()?;
    let ds = Dataset::load(&data_dir).map_err(|e| Failure::io(e.to_string()))?;
    let mut model = Model::new(cfg.model_config(ds.vocab.len())?, cfg.seed)?;
    let resume = resume
        .map(|p| checkpoint::load(p).map_err(|e| Failure::checkpoint(e).context(&p.display().to_string())))
        .transpose()?;
    cfg.echo(&out)?;
    ds.vocab.write(&out.join(VOCAB_FILE))?;
    let tr: Vec<&Sample> = ds.train.iter().collect();
    let val: Vec<&Sample> = ds.test.iter().collect();
    let mut report = |e: &EpochLog| {
        eprintln!(
            "epoch {:>4}  lr {:.2e}  loss {:.4}  val WER {:.4}  val ExpRate {:.4}",
            e.epoch, e.lr, e.train_loss, e.val_wer, e.val_exprate
        )
    };
    let hooks = TrainHooks {
        out_dir: Some(&out),
        on_epoch: Some(&mut report),
    };
    let outcome = training::train(&mut model, &tr, &val, &tc, resume.as_ref(), hooks)?;
    println!(
        "trained {} epochs; best epoch {}; checkpoints in {}",
        outcome.log.len(),
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

/// A checkpoint together with the `run.toml` and `vocab.txt` written beside it.
pub struct Bundle {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Model,
}

pub fn load_bundle(ckpt: &Path, config: Option<&Path>) -> Result<Bundle, Failure> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let config = match config {
        Some(p) => RunConfig::load(Some(p))?,
        None => {
            let p = dir.join(ECHO_FILE);
            let text = fs::read_to_string(&p)
                .map_err(|e| Failure::new(fail::CHECKPOINT, format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|f| Failure::new(fail::CHECKPOINT, f.message))?
        }
    };
    let vocab = Vocabulary::read(&dir.join(VOCAB_FILE)).map_err(Failure::checkpoint)?;
    let params = checkpoint::load(ckpt).map_err(|e| Failure::checkpoint(e).context(&ckpt.display().to_string()))?;
    let model = Model::with_params(config.model_config(vocab.len())?, params).map_err(Failure::checkpoint)?;
    Ok(Bundle { config, vocab, model })
}

pub fn eval(
    ckpt: &Path,
    config: Option<&Path>,
    data_dir: &Path,
    split: Split,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let b = load_bundle(ckpt, config)?;
    let ds = Dataset::load(data_dir).map_err(|e| Failure::io(e.to_string()))?;
    if ds.vocab != b.vocab {
        return Err(Failure::new(
            fail::CHECKPOINT,
            "dataset vocabulary differs from the checkpoint vocabulary",
        ));
    }
    let samples: Vec<&Sample> = ds.split(split).iter().collect();
    if samples.is_empty() {
        return Err(Failure::io(format!("the {split} split is empty")));
    }
    let decoded = training::decode_samples(&b.model, &samples, b.config.eval_batch_size)?;
    let preds: Vec<&[usize]> = decoded.iter().map(Decoded::body).collect();
    let labels: Vec<&[usize]> = samples
        .iter()
        .map(|s| s.label.strip_suffix(&[EOL]).unwrap_or(&s.label))
        .collect();
    let report = corpus_eval(&preds, &labels)?;
    let buckets = length_bucket_report(&preds, &labels, &BUCKET_EDGES)?;

    let mut summary = report.summary();
    let _ = writeln!(summary, "\n{:>10} {:>6} {:>10} {:>8}", "length", "N", "ExpRate(%)", "WER");
    for bk in &buckets {
        let range = match bk.hi {
            Some(hi) => format!("{}-{}", bk.lo, hi - 1),
            None => format!("{}+", bk.lo),
        };
        let er = bk.exprate.map_or("-".into(), |v| format!("{:.2}", 100.0 * v));
        let wer = bk.wer.map_or("-".into(), |v| format!("{v:.4}"));
        let _ = writeln!(summary, "{range:>10} {:>6} {er:>10} {wer:>8}", bk.n_all);
    }
    let truncated = decoded.iter().filter(|d| d.truncated).count();
    let _ = writeln!(summary, "\ntruncated decodes: {truncated}");

    let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&out).map_err(|e| Failure::io(format!("{}: {e}", out.display())))?;
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    write(&out.join(format!("eval_{split}.csv")), &report.to_csv(&ids)?)?;
    write(&out.join(format!("eval_{split}_summary.txt")), &summary)?;
    let mut pred_text = String::new();
    for (s, p) in samples.iter().zip(&preds) {
        pred_text.push_str(&format_label(&s.id, &b.vocab.decode(p)?));
    }
    write(&out.join(format!("predictions_{split}.txt")), &pred_text)?;
    print!("{summary}");
    Ok(())
}

fn read_image(path: &Path) -> Result<GrayImage, Failure> {
    let img = GrayImage::read_pgm(path).map_err(|e| Failure::io(e.to_string()))?;
    img.check_area().map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    Ok(img)
}

fn decode_one(b: &Bundle, img: &GrayImage) -> Result<Decoded, Failure> {
    let mut d = b.model.recognize(&[img])?;
    Ok(d.remove(0))
}

fn finish(b: &Bundle, d: &Decoded) -> Result<(), Failure> {
    println!("{}", b.vocab.decode(d.body())?.join(" "));
    if d.truncated {
        return Err(Failure::new(
            fail::TRUNCATED,
            format!("decode stopped at {} tokens without <eol>", b.config.max_len),
        ));
    }
    Ok(())
}

pub fn recognize(ckpt: &Path, config: Option<&Path>, image: &Path) -> Result<(), Failure> {
    let img = read_image(image)?;
    let b = load_bundle(ckpt, config)?;
    let d = decode_one(&b, &img)?;
    finish(&b, &d)
}

pub fn attend(ckpt: &Path, config: Option<&Path>, image: &Path, out_dir: &Path) -> Result<(), Failure> {
    let img = read_image(image)?;
    let b = load_bundle(ckpt, config)?;
    let d = decode_one(&b, &img)?;
    let tokens = b.vocab.decode(&d.tokens)?;
    let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
    viz::export_attention(out_dir, &refs, &d.alphas, img.width(), img.height())?;
    finish(&b, &d)
}
