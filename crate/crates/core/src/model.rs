//! The SceneMixer network: patch embedding, `depth` mixer blocks, global
//! average pooling and a softmax classification head.
//!
//! A mixer block runs one depthwise convolution per kernel size on the same
//! input, sums the branch outputs, then applies a pointwise convolution,
//! GELU and batch normalization.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    argmax, gelu, gelu_backward, global_avg_pool, global_avg_pool_backward, softmax, BatchNorm,
    BatchNormCache, ConvParams, Dense, DenseCache, DepthwiseCache, DepthwiseConv, GeluCache, Mode,
    PatchEmbed, PatchEmbedCache, PointwiseCache, PointwiseConv, PoolCache,
};
use crate::numerics::{Real, Tensor};

pub mod checkpoint;

/// How the outputs of the depthwise branches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Merge {
    Sum,
}

impl fmt::Display for Merge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Merge::Sum => write!(f, "sum"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub kernels: Vec<usize>,
    pub merge: Merge,
    pub num_classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Adds each block's input to its output. Off by default.
    pub residual: bool,
    /// Optional human-readable class labels, one per class.
    pub class_names: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::eurosat()
    }
}

impl ModelConfig {
    /// 64x64 RGB input, ten classes.
    pub fn eurosat() -> Self {
        ModelConfig {
            input_h: 64,
            input_w: 64,
            input_c: 3,
            patch: 4,
            embed_dim: 128,
            depth: 4,
            kernels: vec![3, 5],
            merge: Merge::Sum,
            num_classes: 10,
            bn_eps: 1e-3,
            bn_momentum: 0.99,
            residual: false,
            class_names: Vec::new(),
        }
    }

    /// Same network with a thirty-class head.
    pub fn aid() -> Self {
        ModelConfig {
            num_classes: 30,
            ..Self::eurosat()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_h / self.patch, self.input_w / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_h == 0 || self.input_w == 0 || self.input_c == 0 {
            problems.push("input extents must be >= 1".to_string());
        }
        if self.patch == 0 {
            problems.push("patch must be >= 1".to_string());
        } else if !self.input_h.is_multiple_of(self.patch) || !self.input_w.is_multiple_of(self.patch) {
            problems.push(format!(
                "input {}x{} is not divisible by patch {}",
                self.input_h, self.input_w, self.patch
            ));
        }
        if self.embed_dim == 0 {
            problems.push("embed_dim must be >= 1".to_string());
        }
        if self.depth == 0 {
            problems.push("depth must be >= 1".to_string());
        }
        if self.kernels.is_empty() {
            problems.push("at least one depthwise kernel is required".to_string());
        }
        for (i, &k) in self.kernels.iter().enumerate() {
            if k % 2 == 0 {
                problems.push(format!("kernel {k} is not odd"));
            }
            if self.kernels[..i].contains(&k) {
                problems.push(format!("kernel {k} listed twice"));
            }
        }
        if self.num_classes < 2 {
            problems.push("num_classes must be >= 2".to_string());
        }
        if !(self.bn_eps > 0.0 && self.bn_eps.is_finite()) {
            problems.push("bn_eps must be positive".to_string());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            problems.push("bn_momentum must lie in (0, 1)".to_string());
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            problems.push(format!(
                "{} class names given for {} classes",
                self.class_names.len(),
                self.num_classes
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Flat `key=value` text, one key per line.
    pub fn to_text(&self) -> String {
        let kernels: Vec<String> = self.kernels.iter().map(|k| k.to_string()).collect();
        let mut s = format!(
            "input={}x{}x{}\npatch={}\nembed_dim={}\ndepth={}\nkernels={}\nmerge={}\nnum_classes={}\nbn_eps={}\nbn_momentum={}\nresidual={}\n",
            self.input_h,
            self.input_w,
            self.input_c,
            self.patch,
            self.embed_dim,
            self.depth,
            kernels.join(","),
            self.merge,
            self.num_classes,
            self.bn_eps,
            self.bn_momentum,
            self.residual,
        );
        if !self.class_names.is_empty() {
            s.push_str(&format!("classes={}\n", self.class_names.join(",")));
        }
        s
    }

    /// Parses `key=value` lines. Missing keys keep their defaults; unknown
    /// keys are rejected. Blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config(format!("line {}: invalid {what} {value:?}", lineno + 1));
            let uint = |v: &str| v.parse::<usize>().map_err(|_| bad(key));
            match key {
                "input" => {
                    let parts: Vec<&str> = value.split('x').collect();
                    if parts.len() != 3 {
                        return Err(bad("input (expected HxWxC)"));
                    }
                    cfg.input_h = uint(parts[0])?;
                    cfg.input_w = uint(parts[1])?;
                    cfg.input_c = uint(parts[2])?;
                }
                "patch" => cfg.patch = uint(value)?,
                "embed_dim" => cfg.embed_dim = uint(value)?,
                "depth" => cfg.depth = uint(value)?,
                "kernels" => {
                    cfg.kernels = value
                        .split(',')
                        .map(|k| uint(k.trim()))
                        .collect::<Result<Vec<_>>>()?;
                }
                "merge" => {
                    cfg.merge = match value {
                        "sum" => Merge::Sum,
                        _ => return Err(bad("merge mode")),
                    }
                }
                "num_classes" => cfg.num_classes = uint(value)?,
                "bn_eps" => cfg.bn_eps = value.parse().map_err(|_| bad(key))?,
                "bn_momentum" => cfg.bn_momentum = value.parse().map_err(|_| bad(key))?,
                "residual" => cfg.residual = value.parse().map_err(|_| bad(key))?,
                "classes" => {
                    cfg.class_names = value.split(',').map(|s| s.trim().to_string()).collect();
                }
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {key:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerBlock<T> {
    pub branches: Vec<DepthwiseConv<T>>,
    pub pointwise: PointwiseConv<T>,
    pub norm: BatchNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneMixer<T> {
    config: ModelConfig,
    pub embed: PatchEmbed<T>,
    pub blocks: Vec<MixerBlock<T>>,
    pub head: Dense<T>,
}

#[derive(Debug)]
struct BlockCache<T> {
    branches: Vec<DepthwiseCache<T>>,
    pointwise: PointwiseCache<T>,
    gelu: GeluCache<T>,
    norm: BatchNormCache<T>,
}

/// Intermediates from one forward pass, consumed by [`SceneMixer::backward`].
#[derive(Debug)]
pub struct ModelCache<T> {
    embed: PatchEmbedCache<T>,
    blocks: Vec<BlockCache<T>>,
    pool: PoolCache,
    head: DenseCache<T>,
    logits: Tensor<T>,
}

impl<T: Real> ModelCache<T> {
    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }
}

/// Gradients of every trainable tensor, in [`SceneMixer::trainable`] order,
/// plus the gradient with respect to the input batch.
#[derive(Debug, Clone)]
pub struct ModelGrads<T> {
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

fn glorot(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = dims.iter().product();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

impl<T: Real> SceneMixer<T> {
    /// Builds a freshly initialized model. Convolution and dense weights are
    /// Glorot-uniform (depthwise fans counted per channel), biases zero,
    /// batch-norm scale one and shift zero.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::assemble(config, |dims, fan_in, fan_out| {
            glorot(&mut rng, dims, fan_in, fan_out)
        })
    }

    /// Same layout as [`SceneMixer::build`] with all weights zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        Self::assemble(config, |dims, _, _| vec![0.0; dims.iter().product()])
    }

    fn assemble(
        config: ModelConfig,
        mut init: impl FnMut(&[usize], usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let mut tensor = |dims: &[usize], fan_in: usize, fan_out: usize| -> Result<Tensor<T>> {
            let data = init(dims, fan_in, fan_out).into_iter().map(T::from_f64).collect();
            Tensor::from_vec(dims, data)
        };
        let (p, c, d) = (config.patch, config.input_c, config.embed_dim);
        let embed = PatchEmbed::new(
            ConvParams::new(tensor(&[p, p, c, d], p * p * c, p * p * d)?, Tensor::zeros(&[d])?),
            p,
        )?;
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let mut branches = Vec::with_capacity(config.kernels.len());
            for &k in &config.kernels {
                branches.push(DepthwiseConv::new(
                    ConvParams::new(tensor(&[k, k, d], k * k, k * k)?, Tensor::zeros(&[d])?),
                    k,
                )?);
            }
            let pointwise = PointwiseConv::new(ConvParams::new(
                tensor(&[d, d], d, d)?,
                Tensor::zeros(&[d])?,
            ))?;
            let norm = BatchNorm::new(d, config.bn_momentum, config.bn_eps)?;
            blocks.push(MixerBlock {
                branches,
                pointwise,
                norm,
            });
        }
        let k = config.num_classes;
        let head = Dense::new(ConvParams::new(tensor(&[d, k], d, k)?, Tensor::zeros(&[k])?))?;
        Ok(SceneMixer {
            config,
            embed,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_class_names(&mut self, names: Vec<String>) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.class_names = names;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// Every tensor (trainable and running statistics) with its name, in
    /// checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("embed.weight".to_string(), &self.embed.params.weight),
            ("embed.bias".to_string(), &self.embed.params.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for br in &b.branches {
                out.push((format!("block{i}.dw{}.weight", br.kernel), &br.params.weight));
                out.push((format!("block{i}.dw{}.bias", br.kernel), &br.params.bias));
            }
            out.push((format!("block{i}.pw.weight"), &b.pointwise.params.weight));
            out.push((format!("block{i}.pw.bias"), &b.pointwise.params.bias));
            out.push((format!("block{i}.bn.gamma"), &b.norm.gamma));
            out.push((format!("block{i}.bn.beta"), &b.norm.beta));
            out.push((format!("block{i}.bn.running_mean"), &b.norm.running_mean));
            out.push((format!("block{i}.bn.running_var"), &b.norm.running_var));
        }
        out.push(("head.weight".to_string(), &self.head.params.weight));
        out.push(("head.bias".to_string(), &self.head.params.bias));
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("embed.weight".to_string(), &mut self.embed.params.weight),
            ("embed.bias".to_string(), &mut self.embed.params.bias),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for br in &mut b.branches {
                let k = br.kernel;
                out.push((format!("block{i}.dw{k}.weight"), &mut br.params.weight));
                out.push((format!("block{i}.dw{k}.bias"), &mut br.params.bias));
            }
            out.push((format!("block{i}.pw.weight"), &mut b.pointwise.params.weight));
            out.push((format!("block{i}.pw.bias"), &mut b.pointwise.params.bias));
            out.push((format!("block{i}.bn.gamma"), &mut b.norm.gamma));
            out.push((format!("block{i}.bn.beta"), &mut b.norm.beta));
            out.push((format!("block{i}.bn.running_mean"), &mut b.norm.running_mean));
            out.push((format!("block{i}.bn.running_var"), &mut b.norm.running_var));
        }
        out.push(("head.weight".to_string(), &mut self.head.params.weight));
        out.push(("head.bias".to_string(), &mut self.head.params.bias));
        out
    }

    fn is_running_stat(name: &str) -> bool {
        name.ends_with(".running_mean") || name.ends_with(".running_var")
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !Self::is_running_stat(n))
            .collect()
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _)| !Self::is_running_stat(n))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(n, _)| !Self::is_running_stat(n))
            .map(|(_, t)| t)
            .collect()
    }

    /// Total scalar count, trainable tensors plus batch-norm running buffers.
    pub fn scalar_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> SceneMixer<U> {
        let mut out = SceneMixer::<U>::zeroed(self.config.clone())
            .expect("config was validated when this model was built");
        for ((_, dst), (_, src)) in out.named_tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        match *x.dims() {
            [_, h, w, ch] if h == c.input_h && w == c.input_w && ch == c.input_c => Ok(()),
            _ => Err(Error::Layer(format!(
                "model expects (n, {}, {}, {}) input, got {}",
                c.input_h,
                c.input_w,
                c.input_c,
                x.shape()
            ))),
        }
    }

    /// Runs the network. Train mode normalizes with batch statistics and
    /// updates the running averages; infer mode leaves the model untouched.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ModelCache<T>)> {
        self.check_input(x)?;
        let (mut h, embed) = self.embed.forward(x)?;
        let residual = self.config.residual;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let mut merged: Option<Tensor<T>> = None;
            let mut branch_caches = Vec::with_capacity(block.branches.len());
            for br in &block.branches {
                let (y, c) = br.forward(&h)?;
                branch_caches.push(c);
                merged = Some(match merged {
                    None => y,
                    Some(mut acc) => {
                        acc.add_assign(&y)?;
                        acc
                    }
                });
            }
            let merged = merged.expect("validated config has at least one kernel");
            let (y, pointwise) = block.pointwise.forward(&merged)?;
            let (y, gelu_cache) = gelu(&y);
            let (mut y, norm) = block.norm.forward(&y, mode)?;
            if residual {
                y.add_assign(&h)?;
            }
            blocks.push(BlockCache {
                branches: branch_caches,
                pointwise,
                gelu: gelu_cache,
                norm,
            });
            h = y;
        }
        let (pooled, pool) = global_avg_pool(&h)?;
        let (logits, head) = self.head.forward(&pooled)?;
        let (probs, _) = softmax(&logits)?;
        Ok((
            probs,
            ModelCache {
                embed,
                blocks,
                pool,
                head,
                logits,
            },
        ))
    }

    /// Inference-mode class probabilities.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (mut h, _) = self.embed.forward(x)?;
        for block in &self.blocks {
            let mut merged: Option<Tensor<T>> = None;
            for br in &block.branches {
                let (y, _) = br.forward(&h)?;
                merged = Some(match merged {
                    None => y,
                    Some(mut acc) => {
                        acc.add_assign(&y)?;
                        acc
                    }
                });
            }
            let merged = merged.expect("validated config has at least one kernel");
            let (y, _) = block.pointwise.forward(&merged)?;
            let (y, _) = gelu(&y);
            let (mut y, _) = block.norm.infer(&y)?;
            if self.config.residual {
                y.add_assign(&h)?;
            }
            h = y;
        }
        let (pooled, _) = global_avg_pool(&h)?;
        let (logits, _) = self.head.forward(&pooled)?;
        Ok(softmax(&logits)?.0)
    }

    /// Argmax of the inference-mode probabilities, ties to the lowest index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let probs = self.infer(x)?;
        Ok(probs
            .data()
            .chunks_exact(self.config.num_classes)
            .map(argmax)
            .collect())
    }

    /// Back-propagates a gradient with respect to the pre-softmax logits.
    pub fn backward(&self, cache: ModelCache<T>, grad_logits: &Tensor<T>) -> Result<ModelGrads<T>> {
        let ModelCache {
            embed,
            blocks,
            pool,
            head,
            ..
        } = cache;
        if blocks.len() != self.blocks.len() {
            return Err(Error::Layer("cache does not belong to this model".into()));
        }
        let (g, head_grads) = self.head.backward(head, grad_logits)?;
        let mut g = global_avg_pool_backward(pool, &g)?;

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(blocks).rev() {
            let skip = self.config.residual.then(|| g.clone());
            let (gn, norm_grads) = block.norm.backward(bc.norm, &g)?;
            let gg = gelu_backward(bc.gelu, &gn)?;
            let (gm, pw_grads) = block.pointwise.backward(bc.pointwise, &gg)?;
            let mut gin: Option<Tensor<T>> = None;
            let mut branch_grads = Vec::with_capacity(block.branches.len());
            for (br, c) in block.branches.iter().zip(bc.branches) {
                let (gx, pg) = br.backward(c, &gm)?;
                branch_grads.push(pg);
                gin = Some(match gin {
                    None => gx,
                    Some(mut acc) => {
                        acc.add_assign(&gx)?;
                        acc
                    }
                });
            }
            let mut gin = gin.expect("validated config has at least one kernel");
            if let Some(skip) = skip {
                gin.add_assign(&skip)?;
            }
            block_grads.push((branch_grads, pw_grads, norm_grads));
            g = gin;
        }
        block_grads.reverse();
        let (input, embed_grads) = self.embed.backward(embed, &g)?;

        let mut params = vec![embed_grads.weight, embed_grads.bias];
        for (branches, pw, norm) in block_grads {
            for b in branches {
                params.push(b.weight);
                params.push(b.bias);
            }
            params.push(pw.weight);
            params.push(pw.bias);
            params.push(norm.gamma);
            params.push(norm.beta);
        }
        params.push(head_grads.weight);
        params.push(head_grads.bias);
        Ok(ModelGrads { params, input })
    }
}
