//! GRU decoder: embedding, recurrence, output fusion and greedy decoding.
//!
//! One step, with `h` the previous hidden state:
//!
//! ```text
//! e_t      = embedding[x_t]
//! α, s_t   = attention(h_{t-1}, F, coverage)
//! h_t      = GRU(h_{t-1}, e_t)
//! logits_t = dropout(f_emb(e_t) + f_hid(h_t) + f_att(s_t) + b)
//! ```
//!
//! The context enters only the output fusion, never the recurrence.

use rand::Rng;

use crate::attention::{self, AttentionConfig, AttentionState, ProjectedFeatures};
use crate::autodiff::{softmax_row, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, LayerParams};
use crate::tensor::Tensor;
use crate::vocab::{EOL, EOS};

/// Longest label the model is built for, `<eol>` included.
pub const MAX_LEN: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl DecoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        DecoderConfig {
            embed_dim: 128,
            hidden_dim: 256,
            vocab_size,
            max_len: MAX_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "embed_dim, hidden_dim and max_len must be positive".into(),
            ));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for the reserved tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Registers decoder parameters for a `context_dim`-wide context vector.
    pub fn init_params<R: Rng + ?Sized>(
        &self,
        params: &mut LayerParams,
        context_dim: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.validate()?;
        let (e, h, v) = (self.embed_dim, self.hidden_dim, self.vocab_size);
        params.insert("decoder.embedding", Tensor::randn(&[v, e], 0.1, rng))?;
        for gate in ["z", "r", "h"] {
            let lim_w = (6.0 / (e + h) as f64).sqrt();
            let lim_u = (3.0 / h as f64).sqrt();
            params.insert(
                format!("decoder.gru.w_{gate}"),
                Tensor::uniform(&[e, h], -lim_w, lim_w, rng),
            )?;
            params.insert(
                format!("decoder.gru.u_{gate}"),
                Tensor::uniform(&[h, h], -lim_u, lim_u, rng),
            )?;
            params.insert(format!("decoder.gru.b_{gate}"), Tensor::zeros(&[h]))?;
        }
        params.init_linear("decoder.out.emb", e, v, false, rng)?;
        params.init_linear("decoder.out.hid", h, v, false, rng)?;
        params.init_linear("decoder.out.att", context_dim, v, false, rng)?;
        params.insert("decoder.out.bias", Tensor::zeros(&[v]))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    /// `B×hidden_dim`.
    pub h: Var,
    pub attention: AttentionState,
}

/// `h = 0` with an empty attention history.
pub fn init_state(
    g: &mut Graph<'_>,
    pf: &ProjectedFeatures,
    att: &AttentionConfig,
    hidden_dim: usize,
) -> DecoderState {
    let (b, h, w) = pf.dims(g);
    DecoderState {
        h: g.tape.constant(Tensor::zeros(&[b, hidden_dim])),
        attention: attention::init_state(g, b, h, w, att),
    }
}

/// Embedding rows for a batch of token ids.
pub fn embed(g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
    let table = g.param("decoder.embedding")?;
    g.tape.gather_rows(table, ids)
}

fn gate(g: &mut Graph<'_>, name: &str, e: Var, h: Var) -> Result<Var> {
    let w = g.param(&format!("decoder.gru.w_{name}"))?;
    let u = g.param(&format!("decoder.gru.u_{name}"))?;
    let b = g.param(&format!("decoder.gru.b_{name}"))?;
    let we = g.tape.matmul(e, w)?;
    let uh = g.tape.matmul(h, u)?;
    let s = g.tape.add(we, uh)?;
    g.tape.add_row_bias(s, b)
}

/// Standard GRU cell.
pub fn gru_step(g: &mut Graph<'_>, h_prev: Var, emb: Var) -> Result<Var> {
    let (hb, eb) = (g.tape.shape(h_prev)[0], g.tape.shape(emb)[0]);
    if hb != eb {
        return Err(Error::dim(format!(
            "gru_step: hidden batch {hb} vs embedding batch {eb}"
        )));
    }
    let z = gate(g, "z", emb, h_prev)?;
    let z = g.tape.sigmoid(z);
    let r = gate(g, "r", emb, h_prev)?;
    let r = g.tape.sigmoid(r);
    let rh = g.tape.mul(r, h_prev)?;
    let w = g.param("decoder.gru.w_h")?;
    let u = g.param("decoder.gru.u_h")?;
    let b = g.param("decoder.gru.b_h")?;
    let we = g.tape.matmul(emb, w)?;
    let urh = g.tape.matmul(rh, u)?;
    let cand = g.tape.add(we, urh)?;
    let cand = g.tape.add_row_bias(cand, b)?;
    let cand = g.tape.tanh(cand);
    // (1 − z)∘h + z∘h̃ written as h + z∘(h̃ − h)
    let diff = g.tape.sub(cand, h_prev)?;
    let upd = g.tape.mul(z, diff)?;
    g.tape.add(h_prev, upd)
}

/// Pre-softmax logits `B×vocab`; dropout at `dropout_rate` applies in train mode only.
pub fn output_logits(
    g: &mut Graph<'_>,
    emb: Var,
    h: Var,
    ctx: Var,
    dropout_rate: f64,
) -> Result<Var> {
    let a = g.linear("decoder.out.emb", emb)?;
    let b = g.linear("decoder.out.hid", h)?;
    let c = g.linear("decoder.out.att", ctx)?;
    let s = g.tape.add(a, b)?;
    let s = g.tape.add(s, c)?;
    let bias = g.param("decoder.out.bias")?;
    let s = g.tape.add_row_bias(s, bias)?;
    let mode = g.mode();
    let (tape, rng) = g.tape_and_rng();
    tape.dropout(s, dropout_rate, mode, rng)
}

/// Row-wise softmax of a `B×V` logit tensor.
pub fn distribution(logits: &Tensor) -> Result<Tensor> {
    let (b, v) = logits.dims2()?;
    let mut out = Vec::with_capacity(b * v);
    for row in logits.data().chunks(v) {
        out.extend(softmax_row(row));
    }
    Tensor::new(&[b, v], out)
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub logits: Var,
    pub alpha: Var,
    pub context: Var,
    pub embedding: Var,
    pub state: DecoderState,
}

/// One decoder step fed the previous token of every batch item.
pub fn decode_step(
    g: &mut Graph<'_>,
    prev_tokens: &[usize],
    state: &DecoderState,
    pf: &ProjectedFeatures,
    use_coverage: bool,
    dropout_rate: f64,
) -> Result<StepOutput> {
    let emb = embed(g, prev_tokens)?;
    let att = attention::step(g, state.h, pf, &state.attention, use_coverage)?;
    let h = gru_step(g, state.h, emb)?;
    let logits = output_logits(g, emb, h, att.context, dropout_rate)?;
    Ok(StepOutput {
        logits,
        alpha: att.alpha,
        context: att.context,
        embedding: emb,
        state: DecoderState {
            h,
            attention: att.state,
        },
    })
}

/// Greedy decoding result for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Emitted ids, `<eol>` included when it was produced.
    pub tokens: Vec<usize>,
    /// Attention plane of each emitted token over the item's valid feature region.
    pub alphas: Vec<Tensor>,
    /// True when `max_len` tokens were emitted without `<eol>`.
    pub truncated: bool,
}

impl Decoded {
    /// Tokens without the trailing `<eol>`.
    pub fn body(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOL) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Feeds back the argmax token from `<eos>` until `<eol>` or `max_len` tokens.
///
/// The tape is rewound after every step so memory stays flat; the graph must
/// not be used for gradients afterwards.
pub fn greedy_decode(
    g: &mut Graph<'_>,
    pf: &ProjectedFeatures,
    att: &AttentionConfig,
    cfg: &DecoderConfig,
    use_coverage: bool,
) -> Result<Vec<Decoded>> {
    let (b, fh, fw) = pf.dims(g);
    let names: Vec<String> = g
        .params()
        .trainable()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.starts_with("decoder.") || n.starts_with("attention."))
        .collect();
    for n in &names {
        g.param(n)?;
    }
    let mut state = init_state(g, pf, att, cfg.hidden_dim);
    let mut prev = vec![EOS; b];
    let mut out: Vec<Decoded> = (0..b)
        .map(|_| Decoded {
            tokens: Vec::new(),
            alphas: Vec::new(),
            truncated: false,
        })
        .collect();
    let mut done = vec![false; b];
    let mark = g.mark();
    for _ in 0..cfg.max_len {
        let step = decode_step(g, &prev, &state, pf, use_coverage, 0.0)?;
        let logits = g.value(step.logits).clone();
        let alpha = g.value(step.alpha).clone();
        let h = g.value(step.state.h).clone();
        let coverage = g.value(step.state.attention.coverage).clone();
        g.rewind(mark);
        let v = cfg.vocab_size;
        for bi in 0..b {
            if done[bi] {
                continue;
            }
            let tok = argmax(&logits.data()[bi * v..(bi + 1) * v]);
            let (vh, vw) = pf.valid_dims[bi];
            let plane = &alpha.data()[bi * fh * fw..(bi + 1) * fh * fw];
            let crop = Tensor::from_fn(&[vh, vw], |i| plane[(i / vw) * fw + i % vw]);
            out[bi].tokens.push(tok);
            out[bi].alphas.push(crop);
            prev[bi] = tok;
            done[bi] = tok == EOL;
        }
        if done.iter().all(|&d| d) {
            return Ok(out);
        }
        state = DecoderState {
            h: g.tape.constant(h),
            attention: AttentionState {
                alpha_prev: g.tape.constant(alpha),
                coverage: g.tape.constant(coverage),
            },
        };
    }
    for (d, o) in done.iter().zip(out.iter_mut()) {
        o.truncated = !d;
    }
    Ok(out)
}
