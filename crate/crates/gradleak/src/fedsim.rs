//! FedSGD training loop with an honest-but-curious server that captures
//! weight/gradient snapshots at the configured attack rate. Client-side
//! defenses transform gradients before they reach the wire; the server update
//! uses exactly what was transmitted.

use crate::datasets::{Batcher, BatcherConfig, Dataset, ImageBatch, Split};
use crate::error::{Error, Result};
use crate::models::{BnStats, Model, ParameterSet, PrecodeEps};
use crate::tensor::{grad, Graph, Tensor, TensorData};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub total_iterations: u64,
    /// Capture an observation every this many iterations.
    pub attack_rate: u64,
    pub batch_size: usize,
    pub repeated_batch: bool,
    /// Prefer all-distinct labels in the repeated batch.
    pub stratified: bool,
    pub clients: usize,
    pub seed: u64,
    pub eval_interval: u64,
    /// Cap on held-out images used per accuracy evaluation.
    pub heldout_eval: usize,
    /// Also capture an observation of the untrained model at t = 0
    /// (requires a repeated batch).
    pub capture_at_zero: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            total_iterations: 10_000,
            attack_rate: 500,
            batch_size: 8,
            repeated_batch: true,
            stratified: false,
            clients: 1,
            seed: 0,
            eval_interval: 500,
            heldout_eval: 1000,
            capture_at_zero: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.clients == 0 {
            return Err(Error::Config("clients must be >= 1".into()));
        }
        if self.attack_rate == 0 || self.total_iterations % self.attack_rate != 0 {
            return Err(Error::Config(format!(
                "attack_rate {} must divide total_iterations {}",
                self.attack_rate, self.total_iterations
            )));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        if self.capture_at_zero && !self.repeated_batch {
            return Err(Error::Config(
                "capture_at_zero requires repeated_batch".into(),
            ));
        }
        Ok(())
    }
}

/// One captured server-side snapshot: the attacker's only input.
#[derive(Debug, Clone)]
pub struct Observation {
    pub t: u64,
    /// Deep snapshot of the global weights before the round's server update.
    pub params: ParameterSet,
    /// What the server actually received (post-defense).
    pub grads: Vec<TensorData>,
    /// Running statistics the client normalized with during this round.
    pub bn_stats: BnStats,
    pub batch_id: u64,
    pub batch_size: usize,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        if self.grads.len() != self.params.len() {
            return Err(Error::Structure(format!(
                "observation grads ({}) not aligned with params ({})",
                self.grads.len(),
                self.params.len()
            )));
        }
        for (g, p) in self.grads.iter().zip(self.params.iter()) {
            if g.shape() != p.data.shape() {
                return Err(Error::Structure(format!(
                    "observation grad shape {:?} vs param `{}` {:?}",
                    g.shape(),
                    p.name,
                    p.data.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Client-side gradient transform applied before transmission.
pub trait GradientDefense {
    fn apply(&mut self, ctx: DefenseContext<'_>) -> Result<Vec<TensorData>>;
    fn name(&self) -> &'static str {
        "custom"
    }
}

pub struct DefenseContext<'a> {
    pub raw_grads: Vec<TensorData>,
    pub model: &'a Model,
    pub batch: &'a ImageBatch,
}

/// Defense that forwards gradients untouched.
pub struct IdentityDefense;

impl GradientDefense for IdentityDefense {
    fn apply(&mut self, ctx: DefenseContext<'_>) -> Result<Vec<TensorData>> {
        Ok(ctx.raw_grads)
    }
    fn name(&self) -> &'static str {
        "none"
    }
}

pub struct ClientStepOutput {
    pub raw_grads: Vec<TensorData>,
    pub defended_grads: Vec<TensorData>,
    pub loss: f64,
    pub batch_stats: Vec<(TensorData, TensorData)>,
}

/// One client round: gradients of the mean cross-entropy over the batch,
/// passed through the defense. Does not mutate the model; the caller applies
/// BN statistic updates from `batch_stats`.
pub fn client_step(
    model: &Model,
    batch: &ImageBatch,
    defense: &mut dyn GradientDefense,
    rng: &mut ChaCha8Rng,
) -> Result<ClientStepOutput> {
    let graph = Graph::new();
    let params = model.params.graph_leaves(&graph, true)?;
    let x = graph.constant(&batch.pixels)?;
    let eps_data = draw_precode_eps(model, batch.len(), rng);
    let eps = match &eps_data {
        Some(e) => PrecodeEps::Given(e),
        None => PrecodeEps::Zero,
    };
    let out = model.config.forward(&params, &model.bn_stats, &x, &eps)?;
    let loss = out.logits.cross_entropy(&batch.labels)?;
    let refs: Vec<&Tensor> = params.iter().collect();
    let gw = grad(&loss, &refs, false)?;
    let raw: Vec<TensorData> = gw.grads.iter().map(|t| t.to_data()).collect();
    let defended = defense.apply(DefenseContext {
        raw_grads: raw.clone(),
        model,
        batch,
    })?;
    Ok(ClientStepOutput {
        raw_grads: raw,
        defended_grads: defended,
        loss: loss.item()?,
        batch_stats: out.batch_stats,
    })
}

pub fn draw_precode_eps(model: &Model, batch: usize, rng: &mut ChaCha8Rng) -> Option<TensorData> {
    model.config.precode.as_ref().map(|p| {
        let data: Vec<f64> = (0..batch * p.latent)
            .map(|_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        TensorData::new_unchecked(vec![batch, p.latent], data)
    })
}

/// Elementwise mean of aligned gradient sets.
pub fn aggregate_mean(sets: &[Vec<TensorData>]) -> Result<Vec<TensorData>> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Structure("no gradient sets to aggregate".into()))?;
    for (c, set) in sets.iter().enumerate() {
        if set.len() != first.len() {
            return Err(Error::Structure(format!(
                "client {c} sent {} tensors, expected {}",
                set.len(),
                first.len()
            )));
        }
        for (i, (g, f)) in set.iter().zip(first).enumerate() {
            if g.shape() != f.shape() {
                return Err(Error::Structure(format!(
                    "client {c} grad {i} shape {:?} vs {:?}",
                    g.shape(),
                    f.shape()
                )));
            }
        }
    }
    let scale = 1.0 / sets.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let mut acc = vec![0.0; first[i].numel()];
            for set in sets {
                for (a, v) in acc.iter_mut().zip(set[i].values()) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a *= scale;
            }
            TensorData::new_unchecked(first[i].shape().to_vec(), acc)
        })
        .collect())
}

/// FedSGD server update: params <- params - lr * mean(gradient sets).
pub fn server_aggregate_and_update(
    params: &mut ParameterSet,
    gradient_sets: &[Vec<TensorData>],
    lr: f64,
) -> Result<()> {
    let mean = aggregate_mean(gradient_sets)?;
    params.sgd_step(&mean, lr)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelLogRow {
    pub t: u64,
    pub train_loss: f64,
    pub heldout_accuracy: f64,
}

pub struct TrainingOutput {
    pub model: Model,
    pub observations: Vec<Arc<Observation>>,
    pub model_log: Vec<ModelLogRow>,
    /// Set when training aborted on a numeric fault; observations and logs
    /// cover the completed iterations only.
    pub halted: Option<(u64, String)>,
}

fn shard_for_client(split: &Split, client: usize, clients: usize) -> Split {
    if clients == 1 {
        return split.clone();
    }
    let idx: Vec<usize> = (client..split.len()).step_by(clients).collect();
    let batch = split.batch(&idx);
    Split {
        pixels: batch.pixels,
        labels: batch.labels,
        ids: batch.ids,
        image: split.image,
    }
}

/// Run FedSGD, invoking `attack_hook` on every captured observation.
pub fn run_training(
    mut model: Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    defense: &mut dyn GradientDefense,
    attack_hook: &mut dyn FnMut(&Arc<Observation>, &ImageBatch) -> Result<()>,
) -> Result<TrainingOutput> {
    cfg.validate()?;
    let frozen = model.config.frozen_param_indices()?;
    let shards: Vec<Split> = (0..cfg.clients)
        .map(|c| shard_for_client(&dataset.train, c, cfg.clients))
        .collect();
    let mut batchers: Vec<Batcher> = shards
        .iter()
        .enumerate()
        .map(|(c, s)| {
            Batcher::new(
                s,
                BatcherConfig {
                    batch_size: cfg.batch_size,
                    repeated: cfg.repeated_batch,
                    stratified: cfg.stratified,
                },
                cfg.seed.wrapping_add(1000 * c as u64),
            )
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut observations = Vec::new();
    let mut model_log = Vec::new();
    let mut halted = None;

    let heldout_n = cfg.heldout_eval.min(dataset.heldout.len());
    let eval_model = |model: &Model, t: u64, loss: f64| -> Result<ModelLogRow> {
        let accuracy = if heldout_n == 0 {
            0.0
        } else {
            let idx: Vec<usize> = (0..heldout_n).collect();
            let eval_batch = dataset.heldout.batch(&idx);
            model.accuracy(&eval_batch.pixels, &eval_batch.labels, 256)?
        };
        Ok(ModelLogRow {
            t,
            train_loss: loss,
            heldout_accuracy: accuracy,
        })
    };

    let capture = |model: &Model,
                   t: u64,
                   victim_batch: &ImageBatch,
                   defended: Vec<TensorData>|
     -> Result<Arc<Observation>> {
        let obs = Observation {
            t,
            params: model.params.clone(),
            grads: defended,
            bn_stats: model.bn_stats.clone(),
            batch_id: victim_batch.batch_id(),
            batch_size: victim_batch.len(),
        };
        obs.validate()?;
        Ok(Arc::new(obs))
    };

    if cfg.capture_at_zero {
        let batch = batchers[0].next_batch(&shards[0]);
        match client_step(&model, &batch, defense, &mut rng) {
            Ok(out) => {
                let obs = capture(&model, 0, &batch, out.defended_grads)?;
                attack_hook(&obs, &batch)?;
                observations.push(obs);
            }
            Err(e) => {
                return Ok(TrainingOutput {
                    model,
                    observations,
                    model_log,
                    halted: Some((0, e.to_string())),
                })
            }
        }
    }

    'outer: for t in 1..=cfg.total_iterations {
        let mut defended_sets = Vec::with_capacity(cfg.clients);
        let mut losses = Vec::with_capacity(cfg.clients);
        let mut stats_accum: Option<Vec<(Vec<f64>, Vec<f64>)>> = None;
        let mut victim: Option<(ImageBatch, Vec<TensorData>)> = None;
        for c in 0..cfg.clients {
            let batch = batchers[c].next_batch(&shards[c]);
            let out = match client_step(&model, &batch, defense, &mut rng) {
                Ok(o) => o,
                Err(e) => {
                    halted = Some((t, e.to_string()));
                    break 'outer;
                }
            };
            losses.push(out.loss);
            // Accumulate per-client batch stats for the shared buffers.
            match &mut stats_accum {
                None => {
                    stats_accum = Some(
                        out.batch_stats
                            .iter()
                            .map(|(m, v)| (m.values().to_vec(), v.values().to_vec()))
                            .collect(),
                    )
                }
                Some(acc) => {
                    for ((am, av), (m, v)) in acc.iter_mut().zip(&out.batch_stats) {
                        for (x, y) in am.iter_mut().zip(m.values()) {
                            *x += y;
                        }
                        for (x, y) in av.iter_mut().zip(v.values()) {
                            *x += y;
                        }
                    }
                }
            }
            if c == 0 {
                victim = Some((batch, out.defended_grads.clone()));
            }
            defended_sets.push(out.defended_grads);
        }

        // Capture before any state of the round is folded into the model.
        if t % cfg.attack_rate == 0 {
            let (batch, defended) = victim.as_ref().expect("client 0 ran");
            let obs = capture(&model, t, batch, defended.clone())?;
            attack_hook(&obs, batch)?;
            observations.push(obs);
        }

        if let Some(acc) = stats_accum {
            let scale = 1.0 / cfg.clients as f64;
            let stats: Vec<(TensorData, TensorData)> = acc
                .into_iter()
                .map(|(m, v)| {
                    let shape = vec![m.len()];
                    (
                        TensorData::new_unchecked(
                            shape.clone(),
                            m.into_iter().map(|x| x * scale).collect(),
                        ),
                        TensorData::new_unchecked(
                            shape,
                            v.into_iter().map(|x| x * scale).collect(),
                        ),
                    )
                })
                .collect();
            model.update_bn_stats(&stats)?;
        }

        let mean = aggregate_mean(&defended_sets)?;
        let masked: Vec<TensorData> = mean
            .iter()
            .enumerate()
            .map(|(i, g)| {
                if frozen.contains(&i) {
                    TensorData::zeros(g.shape())
                } else {
                    g.clone()
                }
            })
            .collect();
        model.params.sgd_step(&masked, cfg.lr)?;

        if t % cfg.eval_interval == 0 || t == cfg.total_iterations {
            let loss = losses.iter().sum::<f64>() / losses.len() as f64;
            model_log.push(eval_model(&model, t, loss)?);
        }
    }

    Ok(TrainingOutput {
        model,
        observations,
        model_log,
        halted,
    })
}

#[cfg(test)]
mod tests;
