use std::time::Instant;

use rand::seq::SliceRandom;
use wsbs_core::data::Sample;
use wsbs_core::decoder::Decoded;
use wsbs_core::synth::{ExprGrammar, RenderSpec};
use wsbs_core::training::{self, evaluate, train_step, EpochLog, OptimizerState, TrainConfig, TrainHooks};
use wsbs_core::{LayerParams, Model};

use crate::common::{corpus, desk_config, desk_corpus, desk_model, desk_train, median, refs, rng, vocab_of};
use crate::Outcome;

const EVAL_BATCH: usize = 8;

pub fn overfit() -> Outcome {
    let g = ExprGrammar::compact();
    let vocab = vocab_of(&g);
    let samples = corpus(&g, &RenderSpec::default(), 10, 99, &vocab);
    let set = refs(&samples);
    let mut model = Model::new(desk_config(vocab.len()), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 5,
        ..desk_train(1, 1000, 0)
    };
    let t = Instant::now();
    let mut opt = OptimizerState::default();
    let mut r = rng(cfg.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let (mut steps, mut exprate) = (0, 0.0);
    while steps < 300 && exprate < 1.0 {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| set[i]).collect();
            train_step(&mut model, &mut opt, &batch, &cfg, cfg.initial_lr, &mut r).unwrap();
            steps += 1;
        }
        exprate = evaluate(&model, &set, EVAL_BATCH).unwrap().exprate;
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome::new(
        exprate == 1.0 && steps <= 300 && secs < 300.0,
        format!("training ExpRate {:.0}% after {steps} steps (limit 300), {secs:.0} s", 100.0 * exprate),
    )
}

pub fn learnability() -> Outcome {
    let t = Instant::now();
    let c = desk_corpus();
    let model = desk_model();
    let r = evaluate(model, &refs(&c.test), EVAL_BATCH).unwrap();
    let secs = t.elapsed().as_secs_f64();
    Outcome::new(
        r.exprate >= 0.60 && r.wer <= 0.25 && secs <= 3600.0,
        format!(
            "{} train / {} held out, vocab {}: ExpRate {:.1}% (≥ 60), WER {:.3} (≤ 0.25), {:.0} s",
            c.train.len(),
            c.test.len(),
            c.vocab.len(),
            100.0 * r.exprate,
            r.wer,
            secs
        ),
    )
}

fn train_quiet(model: &mut Model, train: &[&Sample], val: &[&Sample], cfg: &TrainConfig, resume: Option<&LayerParams>) -> Vec<EpochLog> {
    training::train(model, train, val, cfg, resume, TrainHooks::default()).unwrap().log
}

pub fn coverage_ablation() -> Outcome {
    let g = ExprGrammar {
        repeat_prob: 0.6,
        ..ExprGrammar::compact()
    };
    let vocab = vocab_of(&g);
    let mut all = corpus(&g, &RenderSpec::default(), 300, 21, &vocab);
    let test = all.split_off(240);
    let (tr, te) = (refs(&all), refs(&test));
    let mut diffs = Vec::new();
    let (mut over_with, mut over_without) = (0usize, 0usize);
    let mut rates = Vec::new();
    for seed in 0..3 {
        let run = |use_coverage: bool| {
            let mut cfg = desk_train(30, 20, seed);
            cfg.use_coverage = use_coverage;
            let mut model = Model::new(desk_config(vocab.len()), seed).unwrap();
            train_quiet(&mut model, &tr, &[], &cfg, None);
            let decoded = training::decode_samples(&model, &te, EVAL_BATCH).unwrap();
            let over = decoded
                .iter()
                .zip(&te)
                .filter(|(d, s)| d.truncated || Decoded::body(d).len() > s.label.len() - 1)
                .count();
            (evaluate(&model, &te, EVAL_BATCH).unwrap().exprate, over)
        };
        let (with, ow) = run(true);
        let (without, on) = run(false);
        diffs.push(with - without);
        rates.push(format!("{:.2}/{:.2}", with, without));
        over_with += ow;
        over_without += on;
    }
    let n = 3 * te.len();
    let med = median(diffs);
    Outcome::new(
        med >= 0.0 && over_without > over_with,
        format!(
            "ExpRate with/without per seed [{}], median diff {med:+.3}; over-length {over_with}/{n} with vs {over_without}/{n} without",
            rates.join(", ")
        ),
    )
}

pub fn regularization_ablation() -> Outcome {
    let c = desk_corpus();
    let tr = refs(&c.train[..100]);
    let te = refs(&c.test);
    let mut diffs = Vec::new();
    let mut rates = Vec::new();
    for seed in 0..3 {
        let run = |regularized: bool| {
            let mut cfg = desk_train(60, 40, seed);
            if regularized {
                cfg.dropout_rate = 0.2;
                cfg.rotation_max_deg = 3.0;
                cfg.l2_lambda = 1e-4;
            }
            let mut model = Model::new(desk_config(c.vocab.len()), seed).unwrap();
            train_quiet(&mut model, &tr, &[], &cfg, None);
            evaluate(&model, &te, EVAL_BATCH).unwrap().exprate
        };
        let (plain, reg) = (run(false), run(true));
        diffs.push(reg - plain);
        rates.push(format!("{reg:.2}/{plain:.2}"));
    }
    let med = median(diffs);
    Outcome::new(
        med >= 0.0,
        format!("ExpRate regularized/plain per seed [{}], median diff {med:+.3}", rates.join(", ")),
    )
}

/// First epoch whose validation ExpRate reaches `target`.
fn epochs_to_reach(log: &[EpochLog], target: f64) -> Option<usize> {
    log.iter().find(|e| e.val_exprate >= target).map(|e| e.epoch)
}

pub fn warm_start() -> Outcome {
    let pre = desk_model();
    let g = ExprGrammar {
        structure_prob: 0.6,
        ..ExprGrammar::compact()
    };
    let vocab = vocab_of(&g);
    let spec = RenderSpec {
        glyph_size: 28.0,
        ..RenderSpec::default()
    };
    let mut all = corpus(&g, &spec, 1100, 55, &vocab);
    let test = all.split_off(1000);
    let (tr, te) = (refs(&all), refs(&test));
    let mut gains = Vec::new();
    let mut detail = Vec::new();
    for seed in 0..3 {
        let cfg = desk_train(5, 1000, 100 + seed);
        let mut cold = Model::new(desk_config(vocab.len()), 100 + seed).unwrap();
        let cold_log = train_quiet(&mut cold, &tr, &te, &cfg, None);
        let target = cold_log[4].val_exprate;
        let cold_epochs = epochs_to_reach(&cold_log, target).unwrap();
        let mut warm = Model::new(desk_config(vocab.len()), 100 + seed).unwrap();
        let warm_log = train_quiet(&mut warm, &tr, &te, &cfg, Some(&pre.params));
        let warm_epochs = epochs_to_reach(&warm_log, target).unwrap_or(usize::MAX);
        gains.push(cold_epochs as f64 - warm_epochs as f64);
        detail.push(format!(
            "target {:.2}: cold {cold_epochs}, warm {}",
            target,
            if warm_epochs == usize::MAX { ">5".into() } else { warm_epochs.to_string() }
        ));
    }
    let med = median(gains);
    Outcome::new(
        med > 0.0,
        format!("epochs to the cold epoch-5 ExpRate [{}], median saving {med:+.0}", detail.join("; ")),
    )
}
