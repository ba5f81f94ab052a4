use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wsbs_core::attention::{self, AttentionConfig};
use wsbs_core::autodiff::{Normalize, Tape};
use wsbs_core::decoder::{self, DecoderConfig};
use wsbs_core::encoder::{EncoderConfig, FeatureMap};
use wsbs_core::metrics::{corpus_eval, edit_distance, wer};
use wsbs_core::vocab::EOL;
use wsbs_core::{Graph, ImageBatch, LayerParams, Mode, ModelConfig, Tensor, Var};

use crate::common::rng;
use crate::Outcome;

const SEEDS: u64 = 20;
const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Worst relative error between tape gradients and central differences of
/// `Σ build(inputs) ∘ r` for a fixed random weighting `r`.
fn check(seed: u64, inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let weight = |t: &mut Tape, y: Var| {
        let r = Tensor::randn(t.shape(y), 1.0, &mut rng(seed ^ 0x5eed));
        let r = t.constant(r);
        let p = t.mul(y, r).unwrap();
        t.sum(p)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let y = build(&mut tape, &vars);
    let loss = weight(&mut tape, y);
    tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let y = build(&mut t, &vs);
        let l = weight(&mut t, y);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Normal entries pushed at least 0.05 away from zero, clear of the ReLU kink.
fn off_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);

fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let mut n = |s: &[usize]| Tensor::randn(s, 1.0, &mut r);
    let (b, c, h, w) = (2, 3, 4, 5);
    let mask: Vec<bool> = (0..2 * 3 * 4).map(|i| i % 4 != 3 && i % 12 != 5).collect();
    let dropout_seed = seed + 1000;
    let ids = vec![2usize, 0, 2, 4];
    let targets = vec![1usize, 3, 0];
    let ce_weights = vec![0.5, 0.25, 0.0];
    let mut cases: Vec<Case> = vec![
        ("matmul", vec![n(&[3, 4]), n(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("add", vec![n(&[2, 3]), n(&[2, 3])], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![n(&[2, 3]), n(&[2, 3])], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![n(&[2, 3]), n(&[2, 3])], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("affine", vec![n(&[3, 2])], Box::new(|t, v| t.affine(v[0], -1.7, 0.3))),
        ("add_row_bias", vec![n(&[3, 4]), n(&[4])], Box::new(|t, v| t.add_row_bias(v[0], v[1]).unwrap())),
        ("add_spatial", vec![n(&[b, c, h, w]), n(&[b, c])], Box::new(|t, v| t.add_spatial(v[0], v[1]).unwrap())),
        (
            "conv2d 3x3 same with bias",
            vec![n(&[b, c, h, w]), n(&[2, c, 3, 3]), n(&[2])],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap()),
        ),
        (
            "conv2d 3x3 stride 2",
            vec![n(&[1, 2, 7, 6]), n(&[3, 2, 3, 3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, 2, 1).unwrap()),
        ),
        (
            "conv2d 5x5 coverage-style",
            vec![n(&[1, 1, 4, 6]), n(&[2, 1, 5, 5])],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, 1, 2).unwrap()),
        ),
        (
            "conv2d 1x1",
            vec![n(&[b, c, 2, 3]), n(&[4, c, 1, 1])],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, 1, 0).unwrap()),
        ),
        (
            "batch_norm batch statistics",
            vec![n(&[b, c, 2, 3]), n(&[c]), n(&[c])],
            Box::new(|t, v| t.batch_norm(v[0], v[1], v[2], Normalize::Batch).unwrap().out),
        ),
        (
            "batch_norm running statistics",
            vec![n(&[b, c, 2, 3]), n(&[c]), n(&[c])],
            Box::new(|t, v| {
                let (m, s) = ([0.2, -0.1, 0.4], [0.5, 1.3, 2.0]);
                t.batch_norm(v[0], v[1], v[2], Normalize::Running { mean: &m, var: &s }).unwrap().out
            }),
        ),
        ("tanh", vec![n(&[3, 4])], Box::new(|t, v| t.tanh(v[0]))),
        ("sigmoid", vec![n(&[3, 4])], Box::new(|t, v| t.sigmoid(v[0]))),
        ("softmax_plane", vec![n(&[b, 1, 3, 4])], Box::new(|t, v| t.softmax_plane(v[0], None).unwrap())),
        (
            "softmax_plane masked",
            vec![n(&[b, 1, 3, 4])],
            Box::new(move |t, v| t.softmax_plane(v[0], Some(&mask)).unwrap()),
        ),
        (
            "concat_channels",
            vec![n(&[b, 2, 3, 3]), n(&[b, 1, 3, 3])],
            Box::new(|t, v| t.concat_channels(&[v[0], v[1]]).unwrap()),
        ),
        ("avg_pool2", vec![n(&[b, c, 5, 4])], Box::new(|t, v| t.avg_pool2(v[0]).unwrap())),
        (
            "dropout",
            vec![n(&[4, 5])],
            Box::new(move |t, v| t.dropout(v[0], 0.4, Mode::Train, &mut rng(dropout_seed)).unwrap()),
        ),
        (
            "gather_rows",
            vec![n(&[5, 3])],
            Box::new(move |t, v| t.gather_rows(v[0], &ids).unwrap()),
        ),
        (
            "context",
            vec![n(&[b, 1, h, w]), n(&[b, c, h, w])],
            Box::new(|t, v| t.context(v[0], v[1]).unwrap()),
        ),
        (
            "cross_entropy",
            vec![n(&[3, 5])],
            Box::new(move |t, v| t.cross_entropy(v[0], &targets, &ce_weights).unwrap()),
        ),
        ("sum", vec![n(&[2, 3, 2])], Box::new(|t, v| t.sum(v[0]))),
    ];
    cases.push(("relu", vec![off_zero(&[3, 4], &mut rng(seed + 77))], Box::new(|t, v| t.relu(v[0]))));
    cases
}

fn e2e_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            block_layers: vec![1, 1],
            growth_rate: 4,
            stem_channels: 4,
            transition_compression: 0.5,
        },
        attention: AttentionConfig {
            attn_channels: 4,
            score_conv_kernel: 3,
            coverage_conv_kernel: 3,
            coverage_channels: 2,
        },
        decoder: DecoderConfig {
            embed_dim: 4,
            hidden_dim: 5,
            vocab_size: 6,
            max_len: 48,
        },
        use_coverage: true,
    }
}

/// Teacher-forced loss of a 3-step rollout on one 32×32 image against
/// central differences, sampling up to four entries of every parameter.
/// Returns the worst relative error and how many entries needed the smaller step.
fn e2e_check(seed: u64) -> (f64, usize) {
    let cfg = e2e_config();
    let params = cfg.init_params(seed).unwrap();
    let mut r = rng(seed + 500);
    let ink: Vec<f64> = (0..32 * 32).map(|_| r.random_range(0.0..1.0)).collect();
    let img = wsbs_core::GrayImage::from_ink(32, 32, ink).unwrap();
    let batch = ImageBatch::single(&img).unwrap();
    let label = vec![vec![3, 5, EOL]];
    let value = |p: &LayerParams| {
        let mut g = Graph::new(p, Mode::Train, false, 0);
        let l = wsbs_core::model::teacher_forced_loss(&mut g, &cfg, &batch, &label, 0.0).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new(&params, Mode::Train, true, 0);
    let l = wsbs_core::model::teacher_forced_loss(&mut g, &cfg, &batch, &label, 0.0).unwrap();
    g.backward(l).unwrap();
    let grads = g.gradients();
    let (mut worst, mut retries) = (0.0f64, 0);
    for (name, t) in params.trainable() {
        let picks: Vec<usize> = (0..t.len().min(4)).map(|_| r.random_range(0..t.len())).collect();
        for i in picks {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += EPS;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= EPS;
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
            let mut numeric = (value(&plus) - value(&minus)) / (2.0 * EPS);
            if rel_err(analytic, numeric) >= E2E_TOL {
                // a ReLU kink inside ±EPS biases the difference; retry with a tenth of the step
                retries += 1;
                let e = EPS / 10.0;
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += e;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= e;
                numeric = (value(&plus) - value(&minus)) / (2.0 * e);
            }
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    (worst, retries)
}

pub fn gradients() -> Outcome {
    let mut worst_op = (0.0, "");
    let mut n_ops = 0;
    for seed in 0..SEEDS {
        for (name, inputs, build) in op_cases(seed) {
            let e = check(seed, &inputs, build.as_ref());
            n_ops += usize::from(seed == 0);
            if e.is_nan() || e > worst_op.0 {
                worst_op = (e, name);
            }
        }
    }
    let (worst_e2e, retries) = (0..SEEDS)
        .map(e2e_check)
        .fold((0.0f64, 0), |(w, n), (e, k)| (w.max(e), n + k));
    Outcome::new(
        worst_op.0 < OP_TOL && worst_e2e < E2E_TOL,
        format!(
            "{n_ops} ops x {SEEDS} seeds: worst rel err {:.2e} ({}), limit {OP_TOL:e}; \
             3-step rollout x {SEEDS} seeds: {worst_e2e:.2e}, limit {E2E_TOL:e} \
             ({retries} kink retries)",
            worst_op.0, worst_op.1
        ),
    )
}

fn attention_params(seed: u64, channels: usize, hidden: usize) -> (AttentionConfig, LayerParams) {
    let cfg = AttentionConfig {
        attn_channels: 8,
        score_conv_kernel: 3,
        coverage_conv_kernel: 5,
        coverage_channels: 4,
    };
    let mut p = LayerParams::new();
    cfg.init_params(&mut p, channels, hidden, &mut rng(seed)).unwrap();
    (cfg, p)
}

fn features(g: &mut Graph<'_>, t: Tensor) -> FeatureMap {
    let (b, h, w) = (t.shape()[0], t.shape()[2], t.shape()[3]);
    FeatureMap {
        values: g.tape.constant(t),
        mask: None,
        source_image_shape: vec![(16 * h, 16 * w); b],
        valid_dims: vec![(h, w); b],
    }
}

pub fn attention_normalization() -> Outcome {
    let mut r = rng(2024);
    let (mut worst_sum, mut min_alpha) = (0.0f64, f64::INFINITY);
    for trial in 0..1000u64 {
        let c = r.random_range(1..=6);
        let hidden = r.random_range(1..=8);
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=10));
        let (cfg, p) = attention_params(trial, c, hidden);
        let mode = if trial % 2 == 0 { Mode::Train } else { Mode::Eval };
        let mut g = Graph::new(&p, mode, false, trial);
        let f = features(&mut g, Tensor::randn(&[1, c, h, w], 1.0, &mut r));
        let pf = attention::project_features(&mut g, &f).unwrap();
        let hv = g.tape.constant(Tensor::randn(&[1, hidden], 1.0, &mut r));
        let cov = g
            .tape
            .constant(Tensor::uniform(&[1, cfg.coverage_channels, h, w], 0.0, 3.0, &mut r));
        let m = attention::score(&mut g, hv, &pf, Some(cov)).unwrap();
        let alpha = attention::attend(&mut g, m, None).unwrap();
        let a = g.value(alpha);
        worst_sum = worst_sum.max((a.sum() - 1.0).abs());
        min_alpha = min_alpha.min(a.data().iter().copied().fold(f64::INFINITY, f64::min));
    }
    Outcome::new(
        worst_sum <= 1e-10 && min_alpha > 0.0,
        format!("1000 triples: max |Σα − 1| {worst_sum:.1e}, min α {min_alpha:.2e}"),
    )
}

/// Direct 'same' cross-correlation of one plane with a `K×1×k×k` kernel.
fn naive_same_conv(plane: &Tensor, kernel: &Tensor) -> Tensor {
    let (_, _, h, w) = plane.dims4().unwrap();
    let (k_out, _, kh, kw) = kernel.dims4().unwrap();
    let (ph, pw) = (kh / 2, kw / 2);
    Tensor::from_fn(&[1, k_out, h, w], |idx| {
        let (k, i, j) = (idx / (h * w), (idx / w) % h, idx % w);
        let mut s = 0.0;
        for di in 0..kh {
            for dj in 0..kw {
                let (y, x) = (i + di, j + dj);
                if y >= ph && x >= pw && y - ph < h && x - pw < w {
                    s += kernel.at4(k, 0, di, dj) * plane.at4(0, 0, y - ph, x - pw);
                }
            }
        }
        s
    })
}

fn small_decoder_params(seed: u64, channels: usize) -> (ModelConfig, LayerParams) {
    let mut cfg = e2e_config();
    cfg.attention.coverage_conv_kernel = 5;
    cfg.attention.coverage_channels = 3;
    let mut p = LayerParams::new();
    let mut r = rng(seed);
    cfg.attention.init_params(&mut p, channels, cfg.decoder.hidden_dim, &mut r).unwrap();
    cfg.decoder.init_params(&mut p, channels, &mut r).unwrap();
    (cfg, p)
}

/// Attention planes and the coverage seen at each of `steps` decode steps.
fn rollout(
    p: &LayerParams,
    cfg: &ModelConfig,
    feats: &Tensor,
    tokens: &[usize],
    use_coverage: bool,
) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut g = Graph::inference(p);
    let f = features(&mut g, feats.clone());
    let pf = attention::project_features(&mut g, &f).unwrap();
    let mut st = decoder::init_state(&mut g, &pf, &cfg.attention, cfg.decoder.hidden_dim);
    let (mut alphas, mut covs) = (Vec::new(), Vec::new());
    for &tok in tokens {
        let out = decoder::decode_step(&mut g, &[tok], &st, &pf, use_coverage, 0.0).unwrap();
        alphas.push(g.value(out.alpha).clone());
        covs.push(g.value(out.state.attention.coverage).clone());
        st = out.state;
    }
    (alphas, covs)
}

pub fn coverage_replay() -> Outcome {
    let mut r = rng(33);
    let (mut worst_replay, mut worst_ablation) = (0.0f64, 0.0f64);
    for input in 0..50u64 {
        let c = r.random_range(2..=5);
        let (h, w) = (r.random_range(2..=5), r.random_range(3..=9));
        let (cfg, p) = small_decoder_params(input, c);
        let feats = Tensor::randn(&[1, c, h, w], 1.0, &mut r);
        let tokens: Vec<usize> = (0..10).map(|_| r.random_range(0..cfg.decoder.vocab_size)).collect();

        let (alphas, covs) = rollout(&p, &cfg, &feats, &tokens, true);
        let kernel = p.get("attention.coverage_conv.weight").unwrap();
        let mut beta = Tensor::zeros(&[1, 1, h, w]);
        for t in 0..tokens.len() {
            let replay = naive_same_conv(&beta, kernel);
            worst_replay = worst_replay.max(covs[t].max_abs_diff(&replay));
            beta.add_assign(&alphas[t]);
        }

        let mut pz = p.clone();
        pz.get_mut("attention.f3.weight").unwrap().data_mut().fill(0.0);
        let (with, _) = rollout(&pz, &cfg, &feats, &tokens, true);
        let (without, _) = rollout(&pz, &cfg, &feats, &tokens, false);
        for (a, b) in with.iter().zip(&without) {
            worst_ablation = worst_ablation.max(a.max_abs_diff(b));
        }
    }
    Outcome::new(
        worst_replay <= 1e-8 && worst_ablation <= 1e-12,
        format!("50 inputs x 10 steps: replay gap {worst_replay:.1e}, zero-f3 ablation gap {worst_ablation:.1e}"),
    )
}

/// Textbook recursion with memoization: the oracle for edit distance.
fn oracle(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return a.len() + b.len();
    }
    if let Some(&d) = memo.get(&(a.len(), b.len())) {
        return d;
    }
    let (ra, rb) = (&a[..a.len() - 1], &b[..b.len() - 1]);
    let sub = oracle(ra, rb, memo) + usize::from(a[a.len() - 1] != b[b.len() - 1]);
    let d = sub.min(oracle(ra, b, memo) + 1).min(oracle(a, rb, memo) + 1);
    memo.insert((a.len(), b.len()), d);
    d
}

fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let next: Vec<Vec<u8>> = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| {
                (0..3u8).map(move |c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn edit_distance_oracle() -> Outcome {
    let strings = all_strings(5);
    let mut mismatches = 0usize;
    let mut pairs = 0usize;
    let agree = |a: &[u8], b: &[u8]| {
        let ops = edit_distance(a, b);
        let d = oracle(a, b, &mut HashMap::new());
        let ok = ops.distance == d && ops.n_insert + ops.n_delete + ops.n_replace == d;
        usize::from(!ok)
    };
    for a in &strings {
        for b in &strings {
            mismatches += agree(a, b);
            pairs += 1;
        }
    }
    let mut r = rng(44);
    for _ in 0..10_000 {
        let (la, lb) = (r.random_range(6..=30), r.random_range(6..=30));
        let a: Vec<u8> = (0..la).map(|_| r.random_range(0..4)).collect();
        let b: Vec<u8> = (0..lb).map(|_| r.random_range(0..4)).collect();
        mismatches += agree(&a, &b);
        pairs += 1;
    }

    // one insert, one delete and one replace against a 10-token label
    let label: Vec<u8> = (0..10).collect();
    let mut pred = label.clone();
    pred.remove(2);
    pred.insert(6, 20);
    pred[8] = 30;
    let spot = wer(&pred, &label).unwrap();
    let spot_ok = (spot - 0.3).abs() < 1e-12;

    let mut monotone = true;
    for trial in 0..200 {
        let n = r.random_range(1..=12);
        let labels: Vec<Vec<u8>> = (0..n).map(|_| (0..r.random_range(1..8)).map(|_| r.random_range(0..3)).collect()).collect();
        let preds: Vec<Vec<u8>> = labels
            .iter()
            .map(|l| {
                let mut p = l.clone();
                for _ in 0..r.random_range(0..4) {
                    let i = r.random_range(0..=p.len());
                    p.insert(i, r.random_range(0..3));
                }
                if trial % 3 == 0 {
                    p.truncate(r.random_range(0..=p.len()));
                }
                p
            })
            .collect();
        let rep = corpus_eval(&preds, &labels).unwrap();
        monotone &= rep.exprate <= rep.leq_k(1) && rep.leq_k(1) <= rep.leq_k(2) && rep.leq_k(2) <= rep.leq_k(3);
    }
    Outcome::new(
        mismatches == 0 && spot_ok && monotone,
        format!(
            "{pairs} pairs, {mismatches} disagreements; WER spot check {spot:.3}; leq_k monotone: {monotone}"
        ),
    )
}
