use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layers::{self, BatchNorm1d, BnCache, Linear};
use super::ParamTensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// `num_hidden` blocks of Linear -> BatchNorm1d -> ReLU -> Dropout, then a
/// Linear projection to `embed_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_hidden: usize,
    pub embed_dim: usize,
    pub dropout_p: f64,
}

impl EncoderConfig {
    /// 256-wide hidden layers, two blocks, 128-D embedding, dropout 0.3.
    pub fn standard(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 256,
            num_hidden: 2,
            embed_dim: 128,
            dropout_p: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Trainable parameters: Linear weights and biases plus BatchNorm scale
    /// and shift. Running statistics are buffers and are not counted.
    pub fn num_parameters(&self) -> usize {
        let mut total = 0;
        let mut fan_in = self.input_dim;
        for _ in 0..self.num_hidden {
            total += fan_in * self.hidden_dim + self.hidden_dim; // linear
            total += 2 * self.hidden_dim; // batchnorm affine
            fan_in = self.hidden_dim;
        }
        total + fan_in * self.embed_dim + self.embed_dim
    }

    /// Names of every tensor in a checkpoint, in storage order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.num_hidden {
            for suffix in [
                "linear.weight",
                "linear.bias",
                "bn.weight",
                "bn.bias",
                "bn.running_mean",
                "bn.running_var",
            ] {
                names.push(format!("blocks.{i}.{suffix}"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBlock {
    pub linear: Linear,
    pub bn: BatchNorm1d,
}

/// Which parameters receive gradients in a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    All,
    /// Only the final projection; nothing is propagated into the backbone.
    HeadOnly,
}

#[derive(Debug, Clone)]
struct BlockCache {
    linear_in: Array2<f64>,
    bn: BnCache,
    pre_relu: Array2<f64>,
    dropout: Option<Array2<f64>>,
}

/// Activations saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    train: bool,
    blocks: Vec<BlockCache>,
    head_in: Array2<f64>,
}

impl ForwardCache {
    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn batch_size(&self) -> usize {
        self.head_in.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    blocks: Vec<HiddenBlock>,
    head: Linear,
    /// Bumped on every mutable parameter access; caches from an older
    /// version are rejected.
    version: u64,
}

/// Compares configuration and stored tensors, not the cache version.
impl PartialEq for Encoder {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.blocks == other.blocks && self.head == other.head
    }
}

impl Encoder {
    /// All weights and biases zero, BatchNorm at identity.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.num_hidden);
        let mut fan_in = config.input_dim;
        for i in 0..config.num_hidden {
            blocks.push(HiddenBlock {
                linear: Linear::zeros(&format!("blocks.{i}.linear"), fan_in, config.hidden_dim),
                bn: BatchNorm1d::new(&format!("blocks.{i}.bn"), config.hidden_dim),
            });
            fan_in = config.hidden_dim;
        }
        Ok(Self {
            config,
            blocks,
            head: Linear::zeros("head", fan_in, config.embed_dim),
            version: 0,
        })
    }

    /// Linear layers initialised in order (blocks, then head) from
    /// `rng::seeded(seed, stream::INIT)`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut enc = Self::zeros(config)?;
        let mut rng = rng::seeded(seed, rng::stream::INIT);
        for block in &mut enc.blocks {
            block.linear.init_uniform(&mut rng);
        }
        enc.head.init_uniform(&mut rng);
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn parameters(&self) -> Vec<&ParamTensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.linear.weight, &b.linear.bias, &b.bn.weight, &b.bn.bias]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.version += 1;
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.linear.weight);
            out.push(&mut b.linear.bias);
            out.push(&mut b.bn.weight);
            out.push(&mut b.bn.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn head_parameters_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.version += 1;
        vec![&mut self.head.weight, &mut self.head.bias]
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn blocks(&self) -> &[HiddenBlock] {
        &self.blocks
    }

    /// Every stored tensor (parameters and running statistics) in
    /// checkpoint order.
    pub fn state_tensors(&self) -> Vec<&ParamTensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([
                &b.linear.weight,
                &b.linear.bias,
                &b.bn.weight,
                &b.bn.bias,
                &b.bn.running_mean,
                &b.bn.running_var,
            ]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub(crate) fn state_tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.version += 1;
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.linear.weight);
            out.push(&mut b.linear.bias);
            out.push(&mut b.bn.weight);
            out.push(&mut b.bn.bias);
            out.push(&mut b.bn.running_mean);
            out.push(&mut b.bn.running_var);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "encoder expects {} input features, got {}",
                self.config.input_dim,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Train-mode forward: batch statistics (running stats updated) and
    /// dropout masks drawn from `rng`.
    pub fn forward_train(&mut self, x: &Array2<f64>, rng: &mut Rng) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        if x.nrows() < 2 && self.config.num_hidden > 0 {
            return Err(Error::BatchTooSmall(x.nrows()));
        }
        let p = self.config.dropout_p;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let z = block.linear.forward(&h);
            let (pre_relu, bn) = block.bn.forward_train(&z)?;
            let mut out = layers::relu(&pre_relu);
            let mask = layers::dropout_mask(out.nrows(), out.ncols(), p, rng);
            out *= &mask;
            caches.push(BlockCache {
                linear_in: h,
                bn,
                pre_relu,
                dropout: Some(mask),
            });
            h = out;
        }
        let y = self.head.forward(&h);
        Ok((
            y,
            ForwardCache {
                version: self.version,
                train: true,
                blocks: caches,
                head_in: h,
            },
        ))
    }

    /// Eval-mode forward: running statistics, no dropout, no mutation.
    pub fn forward_eval(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_eval_cached(x)?.0)
    }

    pub fn forward_eval_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let z = block.linear.forward(&h);
            let (pre_relu, bn) = block.bn.forward_eval(&z);
            let out = layers::relu(&pre_relu);
            caches.push(BlockCache {
                linear_in: h,
                bn,
                pre_relu,
                dropout: None,
            });
            h = out;
        }
        let y = self.head.forward(&h);
        Ok((
            y,
            ForwardCache {
                version: self.version,
                train: false,
                blocks: caches,
                head_in: h,
            },
        ))
    }

    /// Accumulates parameter gradients for `upstream = dL/d(output)` and
    /// returns `dL/d(input)` when `scope` is [`GradScope::All`].
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        upstream: &Array2<f64>,
        scope: GradScope,
    ) -> Result<Option<Array2<f64>>> {
        if cache.version != self.version {
            return Err(Error::Cache(format!(
                "cache was built at parameter version {}, encoder is at {}",
                cache.version, self.version
            )));
        }
        if upstream.dim() != (cache.batch_size(), self.config.embed_dim) {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output ({}, {})",
                upstream.dim(),
                cache.batch_size(),
                self.config.embed_dim
            )));
        }
        self.head.accumulate_grads(&cache.head_in, upstream);
        if scope == GradScope::HeadOnly {
            return Ok(None);
        }
        let mut dh = self.head.input_grad(upstream);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            if let Some(mask) = &bc.dropout {
                dh *= mask;
            }
            dh = layers::relu_backward(&bc.pre_relu, &dh);
            dh = block.bn.backward(&bc.bn, &dh);
            dh = block.linear.backward(&bc.linear_in, &dh);
        }
        Ok(Some(dh))
    }
}
