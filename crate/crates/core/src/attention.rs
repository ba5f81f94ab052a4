//! 2-D attention over the feature map with an accumulated coverage map.
//!
//! Per decode step:
//!
//! ```text
//! coverage ← coverage + conv_cov(α_{t-1})
//! M        = BN(conv_score(f1(h_{t-1}) + f2(F) + f3(coverage)))
//! a        = mlp(tanh(M))            (1×1 convolution K' → 1)
//! α        = softmax over the whole H×W plane
//! s_t      = Σ_ij α_ij · F[:, :, i, j]
//! ```
//!
//! Without coverage the `f3` term and the accumulator are skipped.

use rand::Rng;

use crate::autodiff::Var;
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::params::{Graph, LayerParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    /// Channels `K'` of the score map.
    pub attn_channels: usize,
    pub score_conv_kernel: usize,
    pub coverage_conv_kernel: usize,
    pub coverage_channels: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            attn_channels: 128,
            score_conv_kernel: 5,
            coverage_conv_kernel: 11,
            coverage_channels: 32,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attn_channels == 0 || self.coverage_channels == 0 {
            return Err(Error::Config("attention channel counts must be positive".into()));
        }
        for (name, k) in [
            ("score_conv_kernel", self.score_conv_kernel),
            ("coverage_conv_kernel", self.coverage_conv_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        Ok(())
    }

    /// Registers attention parameters for a `feature_channels`-deep map and a
    /// `hidden_dim` query.
    pub fn init_params<R: Rng + ?Sized>(
        &self,
        params: &mut LayerParams,
        feature_channels: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.validate()?;
        let k = self.attn_channels;
        params.init_linear("attention.f1", hidden_dim, k, true, rng)?;
        params.init_conv("attention.f2", k, feature_channels, 1, false, rng)?;
        params.init_conv("attention.f3", k, self.coverage_channels, 1, false, rng)?;
        params.init_conv("attention.score_conv", k, k, self.score_conv_kernel, false, rng)?;
        params.init_batch_norm("attention.bn", k)?;
        params.init_conv("attention.mlp", 1, k, 1, false, rng)?;
        params.init_conv(
            "attention.coverage_conv",
            self.coverage_channels,
            1,
            self.coverage_conv_kernel,
            false,
            rng,
        )?;
        // He scaling suits the ReLU encoder; the coverage kernel sees a
        // probability plane, so start it small.
        params.get_mut("attention.coverage_conv.weight")?.scale(0.1);
        Ok(())
    }
}

/// Previous attention plane and running coverage for one decode session.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    /// `α^{t-1}`, `B×1×H×W`; all zero before the first step.
    pub alpha_prev: Var,
    /// Accumulated coverage, `B×coverage_channels×H×W`.
    pub coverage: Var,
}

/// All-zero start-of-sequence state.
pub fn init_state(
    g: &mut Graph<'_>,
    batch: usize,
    h: usize,
    w: usize,
    cfg: &AttentionConfig,
) -> AttentionState {
    AttentionState {
        alpha_prev: g.tape.constant(Tensor::zeros(&[batch, 1, h, w])),
        coverage: g
            .tape
            .constant(Tensor::zeros(&[batch, cfg.coverage_channels, h, w])),
    }
}

/// `coverage ← coverage + conv_cov(alpha_prev)`.
pub fn update_coverage(g: &mut Graph<'_>, state: &AttentionState) -> Result<AttentionState> {
    let conv = g.conv_same("attention.coverage_conv", state.alpha_prev)?;
    let coverage = g.tape.add(state.coverage, conv)?;
    Ok(AttentionState {
        alpha_prev: state.alpha_prev,
        coverage,
    })
}

/// Features plus their step-invariant projection `f2(F)`.
#[derive(Clone, Debug)]
pub struct ProjectedFeatures {
    pub features: Var,
    pub projected: Var,
    pub mask: Option<Vec<bool>>,
    pub valid_dims: Vec<(usize, usize)>,
}

impl ProjectedFeatures {
    pub fn dims(&self, g: &Graph<'_>) -> (usize, usize, usize) {
        let s = g.tape.shape(self.features);
        (s[0], s[2], s[3])
    }
}

pub fn project_features(g: &mut Graph<'_>, f: &FeatureMap) -> Result<ProjectedFeatures> {
    let projected = g.conv("attention.f2", f.values, 1, 0)?;
    Ok(ProjectedFeatures {
        features: f.values,
        projected,
        mask: f.mask.clone(),
        valid_dims: f.valid_dims.clone(),
    })
}

/// Score map `M = BN(conv(f1(h) + f2(F) [+ f3(coverage)]))`, `B×K'×H×W`.
pub fn score(
    g: &mut Graph<'_>,
    h_prev: Var,
    pf: &ProjectedFeatures,
    coverage: Option<Var>,
) -> Result<Var> {
    let b = g.tape.shape(pf.projected)[0];
    let hb = g.tape.shape(h_prev);
    if hb.len() != 2 || hb[0] != b {
        return Err(Error::dim(format!(
            "score: hidden state {hb:?} does not match feature batch {b}"
        )));
    }
    let q = g.linear("attention.f1", h_prev).map_err(|e| match e {
        Error::Dimension(m) => Error::dim(format!("score f1(h): {m}")),
        e => e,
    })?;
    let mut sum = g
        .tape
        .add_spatial(pf.projected, q)
        .map_err(|e| Error::dim(format!("score f1(h) + f2(F): {e}")))?;
    if let Some(cov) = coverage {
        let c = g
            .conv("attention.f3", cov, 1, 0)
            .map_err(|e| Error::dim(format!("score f3(coverage): {e}")))?;
        sum = g
            .tape
            .add(sum, c)
            .map_err(|e| Error::dim(format!("score f3(coverage): {e}")))?;
    }
    let conv = g.conv_same("attention.score_conv", sum)?;
    g.batch_norm("attention.bn", conv)
}

/// Pre-softmax logits `a = mlp(tanh(M))`, `B×1×H×W`.
pub fn attention_logits(g: &mut Graph<'_>, m: Var) -> Result<Var> {
    let t = g.tape.tanh(m);
    g.conv("attention.mlp", t, 1, 0)
}

/// `α = softmax_plane(mlp(tanh(M)))`.
pub fn attend(g: &mut Graph<'_>, m: Var, mask: Option<&[bool]>) -> Result<Var> {
    let a = attention_logits(g, m)?;
    g.tape.softmax_plane(a, mask)
}

/// Context vector `s_t[B×C]`, the α-weighted sum of feature columns.
pub fn context(g: &mut Graph<'_>, alpha: Var, features: Var) -> Result<Var> {
    g.tape.context(alpha, features)
}

/// Output of one attention step.
#[derive(Clone, Copy, Debug)]
pub struct AttentionStep {
    pub alpha: Var,
    pub context: Var,
    pub state: AttentionState,
}

/// One full attention step queried by `h_prev`.
pub fn step(
    g: &mut Graph<'_>,
    h_prev: Var,
    pf: &ProjectedFeatures,
    state: &AttentionState,
    use_coverage: bool,
) -> Result<AttentionStep> {
    let (b, h, w) = pf.dims(g);
    if g.tape.shape(state.alpha_prev) != [b, 1, h, w] {
        return Err(Error::dim(format!(
            "attention state {:?} does not match features {:?}",
            g.tape.shape(state.alpha_prev),
            g.tape.shape(pf.features)
        )));
    }
    let (state, cov) = if use_coverage {
        let s = update_coverage(g, state)?;
        (s, Some(s.coverage))
    } else {
        (*state, None)
    };
    let m = score(g, h_prev, pf, cov)?;
    let alpha = attend(g, m, pf.mask.as_deref())?;
    let ctx = context(g, alpha, pf.features)?;
    Ok(AttentionStep {
        alpha,
        context: ctx,
        state: AttentionState {
            alpha_prev: alpha,
            coverage: state.coverage,
        },
    })
}
