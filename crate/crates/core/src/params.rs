//! Named parameter storage and the per-forward [`Graph`] that binds it to a tape.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Normalize, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients keyed by parameter path.
pub type Gradients = BTreeMap<String, Tensor>;

/// Every tensor of a model, keyed by a dotted path such as
/// `encoder.block1.layer3.conv.weight`.
///
/// Batch-norm running statistics live here too, flagged as buffers: they are
/// saved and restored with the weights but never receive gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerParams {
    tensors: BTreeMap<String, Tensor>,
    buffers: BTreeSet<String>,
}

impl LayerParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter path {name}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        self.insert(name.clone(), value)?;
        self.buffers.insert(name);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.tensors.contains_key(name) && !self.buffers.contains(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// All entries in path order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(k, _)| !self.buffers.contains(*k))
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Replaces the value at `name`, requiring an identical shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::dim(format!(
                "{name}: stored shape {:?}, new value {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Applies running-statistic updates collected by a training-mode graph.
    pub fn apply_bn_updates(&mut self, updates: &BnUpdates) -> Result<()> {
        for (prefix, mean, var) in &updates.0 {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let t = self.get_mut(&format!("{prefix}.{suffix}"))?;
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
        Ok(())
    }

    /// Registers `prefix.weight: out×in×k×k` (He-normal) and optionally `prefix.bias`.
    pub fn init_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<()> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let w = Tensor::randn(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        self.insert(format!("{prefix}.weight"), w)?;
        if bias {
            self.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]))?;
        }
        Ok(())
    }

    /// Registers `prefix.weight: in×out` (Glorot-uniform) and optionally `prefix.bias`.
    pub fn init_linear<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<()> {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Tensor::uniform(&[in_dim, out_dim], -limit, limit, rng);
        self.insert(format!("{prefix}.weight"), w)?;
        if bias {
            self.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_dim]))?;
        }
        Ok(())
    }

    /// Registers γ = 1, β = 0 and running statistics (mean 0, variance 1).
    pub fn init_batch_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]))?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]))?;
        self.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]))?;
        self.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[channels]))?;
        Ok(())
    }

    /// Sets every trainable tensor to zero; buffers keep their values.
    pub fn zero_weights(&mut self) {
        for (name, t) in self.tensors.iter_mut() {
            if !self.buffers.contains(name) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

/// Running-statistic momentum (weight of the old value).
pub const BN_MOMENTUM: f64 = 0.9;

/// Batch statistics observed by training-mode batch norms, in call order.
#[derive(Clone, Debug, Default)]
pub struct BnUpdates(pub Vec<(String, Vec<f64>, Vec<f64>)>);

/// One forward pass: a tape plus the parameters bound onto it.
///
/// Parameters are copied onto the tape the first time they are referenced
/// and reused afterwards, so a weight shared across decode steps collects
/// one summed gradient.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p LayerParams,
    bound: HashMap<String, Var>,
    mode: Mode,
    track_grads: bool,
    rng: ChaCha8Rng,
    bn_updates: BnUpdates,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p LayerParams, mode: Mode, track_grads: bool, seed: u64) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            mode,
            track_grads,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: BnUpdates::default(),
        }
    }

    /// Training-mode graph recording gradients; `seed` drives dropout masks.
    pub fn training(params: &'p LayerParams, seed: u64) -> Self {
        Self::new(params, Mode::Train, true, seed)
    }

    /// Eval-mode graph without gradients.
    pub fn inference(params: &'p LayerParams) -> Self {
        Self::new(params, Mode::Eval, false, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p LayerParams {
        self.params
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Split borrow for ops that need the tape and the dropout RNG together.
    pub fn tape_and_rng(&mut self) -> (&mut Tape, &mut ChaCha8Rng) {
        (&mut self.tape, &mut self.rng)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let grad = self.track_grads && self.params.is_trainable(name);
        let v = self.tape.leaf(t, grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Batch norm with `prefix.{gamma,beta,running_mean,running_var}`.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let r = self.tape.batch_norm(x, gamma, beta, Normalize::Batch)?;
                if let Some((m, v)) = r.batch_stats {
                    self.bn_updates.0.push((prefix.to_string(), m, v));
                }
                Ok(r.out)
            }
            Mode::Eval => {
                let mean = self.params.get(&format!("{prefix}.running_mean"))?;
                let var = self.params.get(&format!("{prefix}.running_var"))?;
                let r = self.tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    Normalize::Running {
                        mean: mean.data(),
                        var: var.data(),
                    },
                )?;
                Ok(r.out)
            }
        }
    }

    /// `x·prefix.weight (+ prefix.bias)` for `x[B×in]`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let y = self.tape.matmul(x, w)?;
        let bias = format!("{prefix}.bias");
        if self.params.contains(&bias) {
            let b = self.param(&bias)?;
            self.tape.add_row_bias(y, b)
        } else {
            Ok(y)
        }
    }

    /// Convolution with `prefix.weight` and, when registered, `prefix.bias`.
    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias = format!("{prefix}.bias");
        let b = if self.params.contains(&bias) {
            Some(self.param(&bias)?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, stride, padding)
    }

    /// 'Same' convolution with an odd square kernel.
    pub fn conv_same(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let k = self.params.get(&format!("{prefix}.weight"))?.shape()[2];
        self.conv(prefix, x, 1, k / 2)
    }

    /// Current tape position, for a later [`Graph::rewind`].
    pub fn mark(&self) -> usize {
        self.tape.len()
    }

    /// Forgets everything recorded since `mark`, including parameters first
    /// bound after it. Used by inference loops to keep the tape bounded.
    pub fn rewind(&mut self, mark: usize) {
        self.tape.truncate(mark);
        self.bound.retain(|_, v| v.index() < mark);
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound trainable parameter (zeros when untouched by the loss).
    pub fn gradients(&self) -> Gradients {
        self.bound
            .iter()
            .filter(|(name, _)| self.params.is_trainable(name))
            .map(|(name, &v)| {
                let g = self
                    .tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> BnUpdates {
        std::mem::take(&mut self.bn_updates)
    }
}
