//! Client-side defense suite: Gaussian gradient noise, the PRECODE model
//! extension, and DCS optimization-based gradient concealment.

use crate::attacks::{gradient_distance, optim::AdamState, Distance};
use crate::datasets::ImageBatch;
use crate::error::{Error, Result};
use crate::fedsim::{DefenseContext, GradientDefense, IdentityDefense};
use crate::models::{Model, PrecodeArch, PrecodeEps};
use crate::tensor::{grad, Graph, Tensor, TensorData};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    Gaussian,
    Precode,
    Dcs,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcsConfig {
    pub lr: f64,
    pub iterations: usize,
    /// Weight of the dissimilarity term pushing the proxy away from the
    /// truth (the term enters the loss negated).
    pub lambda: f64,
}

impl Default for DcsConfig {
    fn default() -> Self {
        // lambda balances the unbounded push-away term against the cosine
        // gradient match; larger values let the proxy escape to arbitrary
        // pixel values while the gradient response degrades.
        Self {
            lr: 0.1,
            iterations: 50,
            lambda: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// Gaussian noise standard deviation.
    pub sigma: f64,
    /// Bottleneck latent width; defaults to the feature width when absent.
    pub precode_latent: Option<usize>,
    pub dcs: DcsConfig,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl DefenseConfig {
    pub fn none() -> Self {
        Self {
            kind: DefenseKind::None,
            sigma: 0.0,
            precode_latent: None,
            dcs: DcsConfig::default(),
            seed: 0,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            kind: DefenseKind::Gaussian,
            sigma,
            seed,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 {
            return Err(Error::Config(format!(
                "gaussian sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if self.dcs.lr <= 0.0 {
            return Err(Error::Config("dcs lr must be > 0".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            DefenseKind::None => "none".into(),
            DefenseKind::Gaussian => format!("gaussian({})", self.sigma),
            DefenseKind::Precode => "precode".into(),
            DefenseKind::Dcs => "dcs".into(),
        }
    }
}

/// Instantiate the wire-side gradient transform for a defense configuration.
/// PRECODE acts on the model instead (see [`apply_model_defense`]), so its
/// wire transform is the identity.
pub fn build_defense(config: &DefenseConfig) -> Result<Box<dyn GradientDefense>> {
    config.validate()?;
    Ok(match config.kind {
        DefenseKind::None | DefenseKind::Precode => Box::new(IdentityDefense),
        DefenseKind::Gaussian => Box::new(GaussianDefense::new(config.sigma, config.seed)),
        DefenseKind::Dcs => Box::new(DcsDefense::new(config.dcs, config.seed)),
    })
}

/// Apply a model-structure defense at experiment setup.
pub fn apply_model_defense(model: Model, config: &DefenseConfig, seed: u64) -> Result<Model> {
    match config.kind {
        DefenseKind::Precode => {
            let latent = config
                .precode_latent
                .unwrap_or_else(|| penultimate_width(&model));
            attach_precode(
                &model,
                PrecodeArch {
                    latent,
                    trainable: true,
                },
                seed,
            )
        }
        _ => Ok(model),
    }
}

fn penultimate_width(model: &Model) -> usize {
    // The final FC weight is [classes, width].
    let idx = model.params.final_fc_index().expect("validated at init");
    model.params.get(idx).data.shape()[1]
}

// ---- Gaussian noise -----------------------------------------------------------

pub struct GaussianDefense {
    sigma: f64,
    rng: ChaCha8Rng,
}

impl GaussianDefense {
    pub fn new(sigma: f64, seed: u64) -> Self {
        Self {
            sigma,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6a55),
        }
    }
}

/// Add independent N(0, sigma^2) noise to every gradient element.
pub fn gaussian_defense(
    grads: &[TensorData],
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TensorData>> {
    if sigma < 0.0 {
        return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(grads.to_vec());
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    Ok(grads
        .iter()
        .map(|g| {
            let data: Vec<f64> = g.values().iter().map(|v| v + normal.sample(rng)).collect();
            TensorData::new_unchecked(g.shape().to_vec(), data)
        })
        .collect())
}

impl GradientDefense for GaussianDefense {
    fn apply(&mut self, ctx: DefenseContext<'_>) -> Result<Vec<TensorData>> {
        gaussian_defense(&ctx.raw_grads, self.sigma, &mut self.rng)
    }
    fn name(&self) -> &'static str {
        "gaussian"
    }
}

// ---- PRECODE -----------------------------------------------------------------

/// Extend a model with the variational bottleneck before its final FC layer.
/// Existing weights are preserved; the bottleneck parameters are initialized
/// from `seed` and join the parameter set (their gradients are shared too).
pub fn attach_precode(model: &Model, arch: PrecodeArch, seed: u64) -> Result<Model> {
    if model.config.precode.is_some() {
        return Err(Error::Structure("model already has a bottleneck".into()));
    }
    let mut config = model.config.clone();
    config.precode = Some(arch);
    let mut extended = Model::init(config, seed)?;
    for p in 0..extended.params.len() {
        let name = extended.params.get(p).name.clone();
        if name.starts_with("precode.") {
            continue;
        }
        let src = model
            .params
            .iter()
            .find(|q| q.name == name)
            .ok_or_else(|| Error::Structure(format!("missing source parameter `{name}`")))?
            .data
            .clone();
        extended.params.replace(p, src)?;
    }
    extended.bn_stats = model.bn_stats.clone();
    Ok(extended)
}

// ---- DCS ----------------------------------------------------------------------

pub struct DcsOutput {
    pub grads: Vec<TensorData>,
    /// Optimization failed twice; Gaussian noise (sigma 0.01) was used instead.
    pub fell_back: bool,
    pub initial_gradient_distance: f64,
    pub final_gradient_distance: f64,
    pub initial_pixel_mse: f64,
    pub final_pixel_mse: f64,
}

fn proxy_gradients(model: &Model, pixels: &TensorData, labels: &[usize]) -> Result<Vec<TensorData>> {
    let graph = Graph::new();
    let params = model.params.graph_leaves(&graph, true)?;
    let x = graph.constant(pixels)?;
    let fwd = model
        .config
        .forward(&params, &model.bn_stats, &x, &PrecodeEps::Zero)?;
    let loss = fwd.logits.cross_entropy(labels)?;
    let refs: Vec<&Tensor> = params.iter().collect();
    Ok(grad(&loss, &refs, false)?
        .grads
        .iter()
        .map(|t| t.to_data())
        .collect())
}

fn cosine_distance_of(grads: &[TensorData], target: &[TensorData]) -> Result<f64> {
    let dummy: Vec<Tensor> = grads.iter().map(|g| Tensor::from_data(g.clone())).collect();
    gradient_distance(&dummy, target, Distance::Cosine, false)?
        .value
        .item()
        .map_err(Error::from)
}

fn pixel_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Optimize a proxy batch whose gradients mimic the real response while the
/// pixels diverge from the truth, then transmit the proxy's gradients. The
/// wire payload is a pure function of (proxy, labels, weights).
pub fn dcs_conceal(
    real_grads: &[TensorData],
    model: &Model,
    batch: &ImageBatch,
    cfg: &DcsConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DcsOutput> {
    let shape = batch.pixels.shape().to_vec();
    let n = batch.pixels.numel();
    let labels = batch.labels.clone();

    let eval = |xv: &[f64]| -> Result<(f64, Vec<f64>)> {
        let graph = Graph::new();
        let x = graph.leaf(&TensorData::new_unchecked(shape.clone(), xv.to_vec()), true)?;
        let params = model.params.graph_leaves(&graph, true)?;
        let fwd = model
            .config
            .forward(&params, &model.bn_stats, &x, &PrecodeEps::Zero)?;
        let loss = fwd.logits.cross_entropy(&labels)?;
        let refs: Vec<&Tensor> = params.iter().collect();
        let gw = grad(&loss, &refs, true)?;
        let dist = gradient_distance(&gw.grads, real_grads, Distance::Cosine, false)?;
        // Dissimilarity term: maximize the pixel distance to the truth.
        let diff = x.sub(&Tensor::from_data(batch.pixels.clone()))?;
        let away = diff.norm_l2()?.scale(-cfg.lambda)?;
        let objective = dist.value.add(&away)?;
        let gx = grad(&objective, &[&x], false)?;
        Ok((objective.item()?, gx.grads[0].values().to_vec()))
    };

    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                (0.5 + 0.25 * z).clamp(0.0, 1.0)
            })
            .collect()
    };

    for _attempt in 0..2 {
        let x0 = draw(rng);
        let proxy0 = TensorData::new_unchecked(shape.clone(), x0.clone());
        let init_grads = match proxy_gradients(model, &proxy0, &labels) {
            Ok(g) => g,
            Err(e) if is_fault(&e) => continue,
            Err(e) => return Err(e),
        };
        let initial_gradient_distance = cosine_distance_of(&init_grads, real_grads)?;
        let initial_pixel_mse = pixel_mse(&x0, batch.pixels.values());

        let mut state = AdamState::new(x0, cfg.lr);
        let mut failed = false;
        for _ in 0..cfg.iterations {
            let mut obj = |xv: &[f64]| eval(xv);
            match state.step(&mut obj) {
                Ok(_) => {}
                Err(e) if is_fault(&e) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failed {
            continue;
        }
        let proxy = TensorData::new_unchecked(shape.clone(), state.x.clone());
        let grads = match proxy_gradients(model, &proxy, &labels) {
            Ok(g) => g,
            Err(e) if is_fault(&e) => continue,
            Err(e) => return Err(e),
        };
        let final_gradient_distance = cosine_distance_of(&grads, real_grads)?;
        let final_pixel_mse = pixel_mse(proxy.values(), batch.pixels.values());
        return Ok(DcsOutput {
            grads,
            fell_back: false,
            initial_gradient_distance,
            final_gradient_distance,
            initial_pixel_mse,
            final_pixel_mse,
        });
    }

    // Both attempts faulted: degrade to mild Gaussian noise.
    let grads = gaussian_defense(real_grads, 0.01, rng)?;
    Ok(DcsOutput {
        grads,
        fell_back: true,
        initial_gradient_distance: f64::NAN,
        final_gradient_distance: f64::NAN,
        initial_pixel_mse: f64::NAN,
        final_pixel_mse: f64::NAN,
    })
}

fn is_fault(e: &Error) -> bool {
    matches!(
        e,
        Error::Tensor(crate::error::TensorError::NumericFault { .. })
    )
}

pub struct DcsDefense {
    cfg: DcsConfig,
    rng: ChaCha8Rng,
    pub fallback_events: usize,
}

impl DcsDefense {
    pub fn new(cfg: DcsConfig, seed: u64) -> Self {
        Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xdc5),
            fallback_events: 0,
        }
    }
}

impl GradientDefense for DcsDefense {
    fn apply(&mut self, ctx: DefenseContext<'_>) -> Result<Vec<TensorData>> {
        let out = dcs_conceal(&ctx.raw_grads, ctx.model, ctx.batch, &self.cfg, &mut self.rng)?;
        if out.fell_back {
            self.fallback_events += 1;
        }
        Ok(out.grads)
    }
    fn name(&self) -> &'static str {
        "dcs"
    }
}
