//! Model zoo: a LeNet-style CNN (with or without BatchNorm), a small MLP, and
//! the PRECODE variational bottleneck extension.
//!
//! Batch normalization always normalizes with the running statistics carried
//! in [`BnStats`]; a training step additionally folds the observed batch
//! statistics into the running buffers with the configured momentum. This
//! keeps the gradient function identical between a client computing shared
//! gradients and an attacker replaying the snapshot, which is what
//! gradient-matching recovery assumes.

use crate::error::{Error, Result};
use crate::tensor::{gaussian_sample, Graph, Tensor, TensorData};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;

/// One named parameter; `is_final_fc_weight` marks the classifier weight
/// matrix whose per-row gradient sums drive label recovery.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub data: TensorData,
    pub is_final_fc_weight: bool,
}

/// Ordered, stable list of model parameters. Order is identical between
/// client and server copies and between snapshots.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: Vec<Param>,
}

impl ParameterSet {
    pub fn push(&mut self, name: &str, data: TensorData) {
        self.params.push(Param {
            name: name.to_string(),
            data,
            is_final_fc_weight: false,
        });
    }

    pub fn push_final_fc(&mut self, name: &str, data: TensorData) {
        self.params.push(Param {
            name: name.to_string(),
            data,
            is_final_fc_weight: true,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.numel()).sum()
    }

    pub fn final_fc_index(&self) -> Result<usize> {
        let hits: Vec<usize> = self
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_final_fc_weight)
            .map(|(i, _)| i)
            .collect();
        match hits.as_slice() {
            [one] => Ok(*one),
            [] => Err(Error::Structure("no final FC layer flagged".into())),
            _ => Err(Error::Structure("multiple final FC layers flagged".into())),
        }
    }

    /// Attach every parameter to `graph` as a leaf, in order.
    pub fn graph_leaves(&self, graph: &Graph, requires_grad: bool) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .map(|p| graph.leaf(&p.data, requires_grad).map_err(Error::from))
            .collect()
    }

    /// Swap in a new value for one parameter (shape must match).
    pub fn replace(&mut self, idx: usize, data: TensorData) -> Result<()> {
        let p = &mut self.params[idx];
        if p.data.shape() != data.shape() {
            return Err(Error::Structure(format!(
                "replacement shape {:?} does not match `{}` {:?}",
                data.shape(),
                p.name,
                p.data.shape()
            )));
        }
        p.data = data;
        Ok(())
    }

    /// In-place SGD step: `param <- param - lr * grad`. Replaces the
    /// underlying buffers, so previously shared snapshots are untouched.
    pub fn sgd_step(&mut self, grads: &[TensorData], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Structure(format!(
                "gradient set has {} entries, parameter set has {}",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if p.data.shape() != g.shape() {
                return Err(Error::Structure(format!(
                    "gradient shape {:?} does not match parameter `{}` {:?}",
                    g.shape(),
                    p.name,
                    p.data.shape()
                )));
            }
            let new: Vec<f64> = p
                .data
                .values()
                .iter()
                .zip(g.values())
                .map(|(w, gv)| w - lr * gv)
                .collect();
            p.data = TensorData::new_unchecked(p.data.shape().to_vec(), new);
        }
        Ok(())
    }
}

/// Per-layer BatchNorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerStats {
    pub mean: TensorData,
    pub var: TensorData,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BnStats {
    pub layers: Vec<BnLayerStats>,
}

impl BnStats {
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.mean.numel() != l.var.numel() {
                return Err(Error::Structure(format!(
                    "bn layer {i}: mean/var length mismatch"
                )));
            }
            if l.var.values().iter().any(|&v| v < 0.0) {
                return Err(Error::Structure(format!(
                    "bn layer {i}: negative variance entry"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LeNetArch {
    /// Input as (channels, height, width); height and width must be
    /// divisible by 4 (two 2x2 poolings).
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub batchnorm: bool,
}

impl LeNetArch {
    /// Stock configuration: conv(12,5x5)/BN/ReLU/pool2, conv(24,5x5)/BN/ReLU/pool2,
    /// FC->768/ReLU, FC->classes.
    pub fn standard(input: (usize, usize, usize), num_classes: usize, batchnorm: bool) -> Self {
        Self {
            input,
            num_classes,
            conv1: 12,
            conv2: 24,
            kernel: 5,
            hidden: 768,
            batchnorm,
        }
    }

    fn flat_features(&self) -> usize {
        self.conv2 * (self.input.1 / 4) * (self.input.2 / 4)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MlpArch {
    pub input: (usize, usize, usize),
    pub hidden: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum ModelArch {
    LeNet(LeNetArch),
    Mlp(MlpArch),
}

impl ModelArch {
    pub fn num_classes(&self) -> usize {
        match self {
            ModelArch::LeNet(a) => a.num_classes,
            ModelArch::Mlp(a) => a.num_classes,
        }
    }

    pub fn input(&self) -> (usize, usize, usize) {
        match self {
            ModelArch::LeNet(a) => a.input,
            ModelArch::Mlp(a) => a.input,
        }
    }

    pub fn has_batchnorm(&self) -> bool {
        matches!(self, ModelArch::LeNet(a) if a.batchnorm)
    }

    fn penultimate_width(&self) -> usize {
        match self {
            ModelArch::LeNet(a) => a.hidden,
            ModelArch::Mlp(a) => a.hidden,
        }
    }
}

/// Variational bottleneck inserted before the final FC layer: linear encoder
/// heads for mu and log-variance, reparameterized sample, linear decoder back
/// to the feature width.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PrecodeArch {
    pub latent: usize,
    /// When false the bottleneck parameters are excluded from SGD updates.
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub arch: ModelArch,
    pub precode: Option<PrecodeArch>,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn new(arch: ModelArch) -> Self {
        Self {
            arch,
            precode: None,
            bn_momentum: 0.1,
        }
    }
}

/// Noise source for the PRECODE reparameterization during a forward pass.
pub enum PrecodeEps<'a> {
    /// Deterministic mean path (sigma ignored); what the attacker replays.
    Zero,
    /// Externally drawn standard-normal noise, shaped [B, latent].
    Given(&'a TensorData),
}

/// Everything a forward pass exposes besides the logits.
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Pre-normalization feature maps feeding each BN layer, in layer order.
    pub bn_inputs: Vec<Tensor>,
    /// Detached per-layer batch statistics of those feature maps.
    pub batch_stats: Vec<(TensorData, TensorData)>,
    /// Input of the final FC layer, shaped [B, penultimate_width].
    pub final_fc_input: Tensor,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> TensorData {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    TensorData::new_unchecked(shape.to_vec(), data)
}

fn fc_layer(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let rows = x.shape()[0];
    Ok(x.matmul_nt(weight)?.add(&bias.repeat_axis0(rows)?)?)
}

/// Reparameterized bottleneck forward: D(mu + sigma * eps) with
/// sigma = exp(0.5 * logvar).
pub fn precode_forward(
    params: &PrecodeTensors<'_>,
    features: &Tensor,
    eps: &PrecodeEps<'_>,
) -> Result<Tensor> {
    let mu = fc_layer(features, params.enc_mu_w, params.enc_mu_b)?;
    let z = match eps {
        PrecodeEps::Zero => mu,
        PrecodeEps::Given(e) => {
            let logvar = fc_layer(features, params.enc_logvar_w, params.enc_logvar_b)?;
            let sigma = logvar.scale(0.5)?.exp()?;
            let eps_t = Tensor::from_data((*e).clone());
            if eps_t.shape() != sigma.shape() {
                return Err(Error::Structure(format!(
                    "precode eps shape {:?} does not match latent {:?}",
                    eps_t.shape(),
                    sigma.shape()
                )));
            }
            gaussian_sample(&mu, &sigma, &eps_t)?
        }
    };
    fc_layer(&z, params.dec_w, params.dec_b)
}

/// Borrowed views of the five bottleneck parameter tensors.
pub struct PrecodeTensors<'a> {
    pub enc_mu_w: &'a Tensor,
    pub enc_mu_b: &'a Tensor,
    pub enc_logvar_w: &'a Tensor,
    pub enc_logvar_b: &'a Tensor,
    pub dec_w: &'a Tensor,
    pub dec_b: &'a Tensor,
}

impl ModelConfig {
    /// Names and shapes of every parameter, in the canonical order.
    fn layout(&self) -> Result<Vec<(String, Vec<usize>, usize, bool)>> {
        // (name, shape, fan_in, is_final_fc_weight)
        let mut out = Vec::new();
        match &self.arch {
            ModelArch::LeNet(a) => {
                if a.input.1 % 4 != 0 || a.input.2 % 4 != 0 {
                    return Err(Error::Structure(format!(
                        "LeNet input {}x{} not divisible by 4",
                        a.input.1, a.input.2
                    )));
                }
                let (c_in, k) = (a.input.0, a.kernel);
                out.push((
                    "conv1.weight".into(),
                    vec![a.conv1, c_in, k, k],
                    c_in * k * k,
                    false,
                ));
                out.push(("conv1.bias".into(), vec![a.conv1], c_in * k * k, false));
                if a.batchnorm {
                    out.push(("bn1.gamma".into(), vec![a.conv1], 0, false));
                    out.push(("bn1.beta".into(), vec![a.conv1], 0, false));
                }
                out.push((
                    "conv2.weight".into(),
                    vec![a.conv2, a.conv1, k, k],
                    a.conv1 * k * k,
                    false,
                ));
                out.push(("conv2.bias".into(), vec![a.conv2], a.conv1 * k * k, false));
                if a.batchnorm {
                    out.push(("bn2.gamma".into(), vec![a.conv2], 0, false));
                    out.push(("bn2.beta".into(), vec![a.conv2], 0, false));
                }
                let flat = a.flat_features();
                out.push(("fc1.weight".into(), vec![a.hidden, flat], flat, false));
                out.push(("fc1.bias".into(), vec![a.hidden], flat, false));
                self.push_precode_layout(&mut out, a.hidden)?;
                out.push((
                    "fc2.weight".into(),
                    vec![a.num_classes, a.hidden],
                    a.hidden,
                    true,
                ));
                out.push(("fc2.bias".into(), vec![a.num_classes], a.hidden, false));
            }
            ModelArch::Mlp(a) => {
                let flat = a.input.0 * a.input.1 * a.input.2;
                out.push(("fc1.weight".into(), vec![a.hidden, flat], flat, false));
                out.push(("fc1.bias".into(), vec![a.hidden], flat, false));
                self.push_precode_layout(&mut out, a.hidden)?;
                out.push((
                    "fc2.weight".into(),
                    vec![a.num_classes, a.hidden],
                    a.hidden,
                    true,
                ));
                out.push(("fc2.bias".into(), vec![a.num_classes], a.hidden, false));
            }
        }
        Ok(out)
    }

    fn push_precode_layout(
        &self,
        out: &mut Vec<(String, Vec<usize>, usize, bool)>,
        width: usize,
    ) -> Result<()> {
        if let Some(p) = &self.precode {
            out.push((
                "precode.enc_mu.weight".into(),
                vec![p.latent, width],
                width,
                false,
            ));
            out.push(("precode.enc_mu.bias".into(), vec![p.latent], width, false));
            out.push((
                "precode.enc_logvar.weight".into(),
                vec![p.latent, width],
                width,
                false,
            ));
            out.push((
                "precode.enc_logvar.bias".into(),
                vec![p.latent],
                width,
                false,
            ));
            out.push((
                "precode.dec.weight".into(),
                vec![width, p.latent],
                p.latent,
                false,
            ));
            out.push(("precode.dec.bias".into(), vec![width], p.latent, false));
        }
        Ok(())
    }

    /// Seeded parameter initialization: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    /// BN gamma = 1 and beta = 0.
    pub fn init_params(&self, seed: u64) -> Result<ParameterSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParameterSet::default();
        for (name, shape, fan_in, is_final) in self.layout()? {
            let data = if name.contains("gamma") {
                TensorData::full(&shape, 1.0)
            } else if name.contains("beta") {
                TensorData::zeros(&shape)
            } else {
                uniform_init(&mut rng, &shape, fan_in.max(1))
            };
            if is_final {
                set.push_final_fc(&name, data);
            } else {
                set.push(&name, data);
            }
        }
        Ok(set)
    }

    pub fn init_bn_stats(&self) -> BnStats {
        let mut layers = Vec::new();
        if let ModelArch::LeNet(a) = &self.arch {
            if a.batchnorm {
                for c in [a.conv1, a.conv2] {
                    layers.push(BnLayerStats {
                        mean: TensorData::zeros(&[c]),
                        var: TensorData::full(&[c], 1.0),
                    });
                }
            }
        }
        BnStats { layers }
    }

    fn param_index<'a>(&self, params: &'a [Tensor], layout_idx: usize) -> &'a Tensor {
        &params[layout_idx]
    }

    /// Forward pass over graph-attached parameter tensors, aligned with the
    /// canonical layout. BN normalizes with `bn` (the snapshot statistics).
    pub fn forward(
        &self,
        params: &[Tensor],
        bn: &BnStats,
        x: &Tensor,
        eps: &PrecodeEps<'_>,
    ) -> Result<ForwardOutput> {
        let expected = self.layout()?.len();
        if params.len() != expected {
            return Err(Error::Structure(format!(
                "forward got {} parameters, layout has {}",
                params.len(),
                expected
            )));
        }
        let batch = x.shape()[0];
        let (c, h, w) = self.arch.input();
        if x.shape() != [batch, c, h, w] {
            return Err(Error::Structure(format!(
                "input shape {:?} does not match configured {:?}",
                x.shape(),
                (c, h, w)
            )));
        }
        let mut bn_inputs = Vec::new();
        let mut batch_stats = Vec::new();
        let mut idx = 0;
        let mut next = |n: usize| {
            let i = idx;
            idx += n;
            i
        };
        let features = match &self.arch {
            ModelArch::LeNet(a) => {
                let mut h_t = x.clone();
                for (conv_i, _out_ch) in [(0usize, a.conv1), (1usize, a.conv2)] {
                    let wi = next(2);
                    let weight = self.param_index(params, wi);
                    let bias = self.param_index(params, wi + 1);
                    h_t = h_t.conv2d(weight, 1, a.kernel / 2)?;
                    h_t = h_t.add(&bias.broadcast_channels(h_t.shape())?)?;
                    if a.batchnorm {
                        let bi = next(2);
                        let gamma = self.param_index(params, bi);
                        let beta = self.param_index(params, bi + 1);
                        let layer = bn.layers.get(conv_i).ok_or_else(|| {
                            Error::Structure("missing BN running stats".into())
                        })?;
                        bn_inputs.push(h_t.clone());
                        let (bm, bv) = h_t.batch_stats_channels()?;
                        batch_stats.push((bm.to_data(), bv.to_data()));
                        h_t = h_t.batchnorm(gamma, beta, &layer.mean, &layer.var, BN_EPS)?;
                    }
                    h_t = h_t.relu()?.avg_pool2d(2)?;
                }
                let flat = a.flat_features();
                let flat_t = h_t.reshape(&[batch, flat])?;
                let fi = next(2);
                fc_layer(
                    &flat_t,
                    self.param_index(params, fi),
                    self.param_index(params, fi + 1),
                )?
                .relu()?
            }
            ModelArch::Mlp(a) => {
                let flat = a.input.0 * a.input.1 * a.input.2;
                let flat_t = x.reshape(&[batch, flat])?;
                let fi = next(2);
                fc_layer(
                    &flat_t,
                    self.param_index(params, fi),
                    self.param_index(params, fi + 1),
                )?
                .sigmoid()?
            }
        };
        let features = if self.precode.is_some() {
            let pi = next(6);
            let pt = PrecodeTensors {
                enc_mu_w: self.param_index(params, pi),
                enc_mu_b: self.param_index(params, pi + 1),
                enc_logvar_w: self.param_index(params, pi + 2),
                enc_logvar_b: self.param_index(params, pi + 3),
                dec_w: self.param_index(params, pi + 4),
                dec_b: self.param_index(params, pi + 5),
            };
            precode_forward(&pt, &features, eps)?
        } else {
            features
        };
        let fi = next(2);
        let logits = fc_layer(
            &features,
            self.param_index(params, fi),
            self.param_index(params, fi + 1),
        )?;
        Ok(ForwardOutput {
            logits,
            bn_inputs,
            batch_stats,
            final_fc_input: features,
        })
    }

    /// Indices of parameters excluded from SGD updates (frozen bottleneck).
    pub fn frozen_param_indices(&self) -> Result<Vec<usize>> {
        match &self.precode {
            Some(p) if !p.trainable => Ok(self
                .layout()?
                .iter()
                .enumerate()
                .filter(|(_, (name, ..))| name.starts_with("precode."))
                .map(|(i, _)| i)
                .collect()),
            _ => Ok(Vec::new()),
        }
    }
}

/// A concrete model: configuration plus live parameters and BN buffers.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub bn_stats: BnStats,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        let bn_stats = config.init_bn_stats();
        params.final_fc_index()?;
        Ok(Self {
            config,
            params,
            bn_stats,
        })
    }

    /// Replace bottleneck parameters with an exact identity configuration
    /// (requires latent == feature width). The log-variance head is pinned far
    /// negative so the sampled path degenerates to the mean.
    pub fn set_identity_precode(&mut self) -> Result<()> {
        let p = self
            .config
            .precode
            .as_ref()
            .ok_or_else(|| Error::Structure("model has no bottleneck".into()))?;
        let width = self.config.arch.penultimate_width();
        if p.latent != width {
            return Err(Error::Structure(format!(
                "identity bottleneck needs latent == width ({} != {})",
                p.latent, width
            )));
        }
        let eye = {
            let mut m = vec![0.0; width * width];
            for i in 0..width {
                m[i * width + i] = 1.0;
            }
            TensorData::new_unchecked(vec![width, width], m)
        };
        for param in self.params.params.iter_mut() {
            match param.name.as_str() {
                "precode.enc_mu.weight" | "precode.dec.weight" => param.data = eye.clone(),
                "precode.enc_mu.bias" | "precode.dec.bias" => {
                    param.data = TensorData::zeros(&[width])
                }
                "precode.enc_logvar.weight" => param.data = TensorData::zeros(&[width, width]),
                "precode.enc_logvar.bias" => param.data = TensorData::full(&[width], -1e6),
                _ => {}
            }
        }
        Ok(())
    }

    /// Momentum update of the BN running buffers from observed batch stats.
    pub fn update_bn_stats(&mut self, batch_stats: &[(TensorData, TensorData)]) -> Result<()> {
        if batch_stats.len() != self.bn_stats.layers.len() {
            return Err(Error::Structure(format!(
                "got {} batch stats for {} BN layers",
                batch_stats.len(),
                self.bn_stats.layers.len()
            )));
        }
        let m = self.config.bn_momentum;
        for (layer, (bm, bv)) in self.bn_stats.layers.iter_mut().zip(batch_stats) {
            let mean: Vec<f64> = layer
                .mean
                .values()
                .iter()
                .zip(bm.values())
                .map(|(run, b)| (1.0 - m) * run + m * b)
                .collect();
            let var: Vec<f64> = layer
                .var
                .values()
                .iter()
                .zip(bv.values())
                .map(|(run, b)| (1.0 - m) * run + m * b)
                .collect();
            layer.mean = TensorData::new_unchecked(layer.mean.shape().to_vec(), mean);
            layer.var = TensorData::new_unchecked(layer.var.shape().to_vec(), var);
        }
        Ok(())
    }

    /// Detached logits for a pixel batch (evaluation path, PRECODE mean path).
    pub fn eval_logits(&self, pixels: &TensorData) -> Result<TensorData> {
        let graph = Graph::new();
        let params = self.params.graph_leaves(&graph, false)?;
        let x = graph.constant(pixels)?;
        let out = self
            .config
            .forward(&params, &self.bn_stats, &x, &PrecodeEps::Zero)?;
        Ok(out.logits.to_data())
    }

    /// Top-1 accuracy over a labeled set, evaluated in chunks.
    pub fn accuracy(&self, pixels: &TensorData, labels: &[usize], chunk: usize) -> Result<f64> {
        let (c, h, w) = self.config.arch.input();
        let n = labels.len();
        let img = c * h * w;
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let slice = &pixels.values()[start * img..end * img];
            let batch = TensorData::new_unchecked(vec![end - start, c, h, w], slice.to_vec());
            let logits = self.eval_logits(&batch)?;
            let k = self.config.arch.num_classes();
            for row in 0..end - start {
                let vals = &logits.values()[row * k..(row + 1) * k];
                let argmax = vals
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if argmax == labels[start + row] {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }
}

/// Per-class sums of final-FC weight gradients: entry `n` is the sum over the
/// incoming weights of output unit `n`.
pub fn final_fc_gradient_rows(params: &ParameterSet, grads: &[TensorData]) -> Result<Vec<f64>> {
    if grads.len() != params.len() {
        return Err(Error::Structure(format!(
            "gradient set has {} entries, parameter set has {}",
            grads.len(),
            params.len()
        )));
    }
    let idx = params.final_fc_index()?;
    let g = &grads[idx];
    let shape = g.shape();
    if shape.len() != 2 {
        return Err(Error::Structure(format!(
            "final FC gradient is not a matrix: {:?}",
            shape
        )));
    }
    let (k, d) = (shape[0], shape[1]);
    Ok((0..k)
        .map(|row| g.values()[row * d..(row + 1) * d].iter().sum())
        .collect())
}
