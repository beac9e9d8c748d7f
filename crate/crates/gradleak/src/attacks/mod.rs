//! The unified gradient-inversion engine: label recovery from final-FC
//! gradient sums, gradient-distance objectives (l2 / cosine), image
//! regularization (TV, l2, BN-statistics, group consistency), the
//! multi-observation objective, and the four named attack presets.

pub mod optim;

use crate::error::{Error, Result};
use crate::fedsim::Observation;
use crate::models::{final_fc_gradient_rows, BnStats, ModelConfig, PrecodeEps};
use crate::tensor::{grad, Graph, Tensor, TensorData};
use optim::{AdamState, LbfgsState};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    L2,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Lbfgs,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSelection {
    /// All seeds advance in lockstep against a shared consensus image.
    Consensus,
    /// Seeds run independently; the lowest final loss wins.
    BestOf,
}

/// How base regularization coefficients scale at runtime. `F` is the image
/// size ratio H*W / 32^2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaScaling {
    FOverB,
    OverB,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub name: String,
    pub distance: Distance,
    pub optimizer: OptimizerKind,
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub alpha_bn: f64,
    pub alpha_group: f64,
    pub alpha_scaling: AlphaScaling,
    pub seeds: usize,
    pub attack_iterations: usize,
    pub multi_observation: bool,
    /// Cap on (W_t, dW_t) pairs folded into the multi-observation objective.
    pub max_pairs: usize,
    /// Adam step size (ignored by L-BFGS).
    pub lr: f64,
    pub seed_selection: SeedSelection,
    /// Average per-layer cosine distances instead of one global angle.
    pub cosine_per_layer: bool,
    pub rng_seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("alpha_tv", self.alpha_tv),
            ("alpha_l2", self.alpha_l2),
            ("alpha_bn", self.alpha_bn),
            ("alpha_group", self.alpha_group),
        ] {
            if a < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {a}")));
            }
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        if self.max_pairs == 0 {
            return Err(Error::Config("max_pairs must be >= 1".into()));
        }
        if self.alpha_group > 0.0 && self.seed_selection != SeedSelection::Consensus {
            return Err(Error::Config(
                "group consistency requires seed_selection = consensus".into(),
            ));
        }
        if self.optimizer == OptimizerKind::Adam && self.lr <= 0.0 {
            return Err(Error::Config("adam lr must be > 0".into()));
        }
        Ok(())
    }

    /// Effective coefficients for a given image size and batch size.
    pub fn scaled_alphas(&self, image: (usize, usize, usize), batch: usize) -> ScaledAlphas {
        let (_, h, w) = image;
        let f = (h * w) as f64 / 1024.0;
        let factor = match self.alpha_scaling {
            AlphaScaling::FOverB => f / batch as f64,
            AlphaScaling::OverB => 1.0 / batch as f64,
        };
        ScaledAlphas {
            tv: self.alpha_tv * factor,
            l2: self.alpha_l2 * factor,
            bn: self.alpha_bn * factor,
            group: self.alpha_group * factor,
        }
    }
}

/// Named attack presets.
pub fn preset(name: &str) -> Result<AttackConfig> {
    let base = AttackConfig {
        name: name.to_string(),
        distance: Distance::L2,
        optimizer: OptimizerKind::Lbfgs,
        alpha_tv: 0.0,
        alpha_l2: 0.0,
        alpha_bn: 0.0,
        alpha_group: 0.0,
        alpha_scaling: AlphaScaling::FOverB,
        seeds: 1,
        attack_iterations: 50,
        multi_observation: false,
        max_pairs: 20,
        lr: 0.1,
        seed_selection: SeedSelection::BestOf,
        cosine_per_layer: false,
        rng_seed: 0,
    };
    match name {
        "dlg" => Ok(base),
        "inverting_gradients" => Ok(AttackConfig {
            distance: Distance::Cosine,
            optimizer: OptimizerKind::Adam,
            alpha_tv: 0.08,
            ..base
        }),
        "gradinversion" => Ok(AttackConfig {
            alpha_tv: 0.08,
            alpha_l2: 0.0008,
            alpha_bn: 0.0001,
            alpha_group: 0.0001,
            seeds: 6,
            seed_selection: SeedSelection::Consensus,
            ..base
        }),
        "multiple_updates" => Ok(AttackConfig {
            alpha_tv: 0.08,
            alpha_scaling: AlphaScaling::OverB,
            seeds: 2,
            multi_observation: true,
            ..base
        }),
        other => Err(Error::Config(format!(
            "unknown attack preset `{other}` (expected dlg, inverting_gradients, gradinversion, multiple_updates)"
        ))),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScaledAlphas {
    pub tv: f64,
    pub l2: f64,
    pub bn: f64,
    pub group: f64,
}

impl ScaledAlphas {
    pub fn any_active(&self) -> bool {
        self.tv > 0.0 || self.l2 > 0.0 || self.bn > 0.0 || self.group > 0.0
    }
}

pub struct GradientDistanceOutput {
    pub value: Tensor,
    /// Target gradients had zero norm under the cosine distance.
    pub degenerate_target: bool,
}

/// Distance between dummy and target gradient sets, differentiable w.r.t. the
/// dummy side. L2 sums squared elementwise differences over all parameters;
/// cosine is one global angle over the flattened concatenation unless
/// `per_layer` averaging is requested.
pub fn gradient_distance(
    dummy: &[Tensor],
    target: &[TensorData],
    delta: Distance,
    per_layer: bool,
) -> Result<GradientDistanceOutput> {
    if dummy.len() != target.len() {
        return Err(Error::Structure(format!(
            "gradient sets not aligned: {} vs {}",
            dummy.len(),
            target.len()
        )));
    }
    for (d, t) in dummy.iter().zip(target) {
        if d.shape() != t.shape() {
            return Err(Error::Structure(format!(
                "gradient tensor shapes differ: {:?} vs {:?}",
                d.shape(),
                t.shape()
            )));
        }
    }
    match delta {
        Distance::L2 => {
            let mut acc: Option<Tensor> = None;
            for (d, t) in dummy.iter().zip(target) {
                let diff = d.sub(&Tensor::from_data(t.clone()))?;
                let term = diff.mul(&diff)?.sum_all()?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term)?,
                });
            }
            Ok(GradientDistanceOutput {
                value: acc.expect("non-empty gradient set"),
                degenerate_target: false,
            })
        }
        Distance::Cosine if per_layer => {
            let mut acc: Option<Tensor> = None;
            let mut degenerate = false;
            for (d, t) in dummy.iter().zip(target) {
                let t_norm = t.values().iter().map(|v| v * v).sum::<f64>().sqrt();
                let term = if t_norm == 0.0 {
                    degenerate = true;
                    Tensor::scalar(1.0)
                } else {
                    let tt = Tensor::from_data(t.clone());
                    let dot = d.mul(&tt)?.sum_all()?;
                    let d_norm = d.mul(d)?.sum_all()?.sqrt()?;
                    dot.div(&d_norm.scale(t_norm)?)?.neg()?.add_scalar(1.0)?
                };
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term)?,
                });
            }
            Ok(GradientDistanceOutput {
                value: acc.expect("non-empty gradient set").scale(1.0 / dummy.len() as f64)?,
                degenerate_target: degenerate,
            })
        }
        Distance::Cosine => {
            let t_norm = target
                .iter()
                .flat_map(|t| t.values().iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if t_norm == 0.0 {
                return Ok(GradientDistanceOutput {
                    value: Tensor::scalar(1.0),
                    degenerate_target: true,
                });
            }
            let mut dot: Option<Tensor> = None;
            let mut sq: Option<Tensor> = None;
            for (d, t) in dummy.iter().zip(target) {
                let tt = Tensor::from_data(t.clone());
                let dterm = d.mul(&tt)?.sum_all()?;
                let sterm = d.mul(d)?.sum_all()?;
                dot = Some(match dot {
                    None => dterm,
                    Some(a) => a.add(&dterm)?,
                });
                sq = Some(match sq {
                    None => sterm,
                    Some(a) => a.add(&sterm)?,
                });
            }
            let dot = dot.expect("non-empty gradient set");
            let d_norm = sq.expect("non-empty gradient set").sqrt()?;
            let cos = dot.div(&d_norm.scale(t_norm)?)?;
            Ok(GradientDistanceOutput {
                value: cos.neg()?.add_scalar(1.0)?,
                degenerate_target: false,
            })
        }
    }
}

/// Total image regularization with already-scaled coefficients. `bn_inputs`
/// are the dummy forward's pre-normalization feature maps; `bn_target` the
/// snapshot running statistics. Returns `None` when every coefficient is 0.
pub fn total_regularization(
    x: &Tensor,
    alphas: &ScaledAlphas,
    bn_inputs: &[Tensor],
    bn_target: &BnStats,
    consensus: Option<&TensorData>,
) -> Result<Option<Tensor>> {
    let mut acc: Option<Tensor> = None;
    let add = |term: Tensor, acc: &mut Option<Tensor>| -> Result<()> {
        *acc = Some(match acc.take() {
            None => term,
            Some(a) => a.add(&term)?,
        });
        Ok(())
    };
    if alphas.tv > 0.0 {
        let rows = x.diff_rows()?.abs()?.sum_all()?;
        let cols = x.diff_cols()?.abs()?.sum_all()?;
        add(rows.add(&cols)?.scale(alphas.tv)?, &mut acc)?;
    }
    if alphas.l2 > 0.0 {
        add(x.norm_l2()?.scale(alphas.l2)?, &mut acc)?;
    }
    if alphas.bn > 0.0 {
        if bn_inputs.is_empty() || bn_target.layers.is_empty() {
            return Err(Error::Config(
                "alpha_bn > 0 but the model has no BatchNorm layers".into(),
            ));
        }
        let mut term: Option<Tensor> = None;
        for (input, layer) in bn_inputs.iter().zip(&bn_target.layers) {
            let (bm, bv) = input.batch_stats_channels()?;
            let dm = bm.sub(&Tensor::from_data(layer.mean.clone()))?.norm_l2()?;
            let dv = bv.sub(&Tensor::from_data(layer.var.clone()))?.norm_l2()?;
            let both = dm.add(&dv)?;
            term = Some(match term {
                None => both,
                Some(a) => a.add(&both)?,
            });
        }
        add(term.expect("bn layers present").scale(alphas.bn)?, &mut acc)?;
    }
    if alphas.group > 0.0 {
        if let Some(cons) = consensus {
            let diff = x.sub(&Tensor::from_data(cons.clone()))?;
            add(diff.mul(&diff)?.sum_all()?.scale(alphas.group)?, &mut acc)?;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRecovery {
    /// Recovered label multiset, ascending.
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
    /// Gradients carried no label signal (all-zero final FC rows).
    pub degenerate: bool,
    /// The feature-sum estimate collapsed; sign-based recovery was used.
    pub used_sign_fallback: bool,
}

/// Recover the label multiset from final-FC gradient row sums:
/// count_n = round(B/K - B * dW_n / O), clamped to [0, B], then repaired to
/// total exactly B by largest fractional remainder. `O` is estimated by
/// forwarding a standard-normal dummy batch through the snapshot weights and
/// averaging per-sample sums of the final-FC input.
pub fn recover_labels(
    obs: &Observation,
    model: &ModelConfig,
    dummy_seed: u64,
) -> Result<LabelRecovery> {
    let k = model.arch.num_classes();
    let b = obs.batch_size;
    let rows = final_fc_gradient_rows(&obs.params, &obs.grads)?;
    if rows.iter().all(|&r| r == 0.0) {
        let labels: Vec<usize> = (0..b).map(|i| i % k).collect();
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        return Ok(LabelRecovery {
            labels,
            counts,
            degenerate: true,
            used_sign_fallback: false,
        });
    }

    // Attacker-side estimate of the mean final-FC input sum.
    let (c, h, w) = model.arch.input();
    let mut rng = ChaCha8Rng::seed_from_u64(dummy_seed ^ 0x0b5e55ed);
    let dummy: Vec<f64> = (0..b * c * h * w)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    let graph = Graph::new();
    let params = obs.params.graph_leaves(&graph, false)?;
    let x = graph.constant(&TensorData::new_unchecked(vec![b, c, h, w], dummy))?;
    let fwd = model.forward(&params, &obs.bn_stats, &x, &PrecodeEps::Zero)?;
    let feature_sum: f64 = fwd.final_fc_input.values().iter().sum();
    let o_mean = feature_sum / b as f64;

    let scale: f64 = rows.iter().map(|r| r.abs()).fold(0.0, f64::max);
    if o_mean.abs() < 1e-9 * scale.max(1.0) {
        return Ok(sign_fallback(&rows, b, k));
    }

    let frac: Vec<f64> = rows
        .iter()
        .map(|&r| b as f64 / k as f64 - b as f64 * r / o_mean)
        .collect();
    let mut counts: Vec<i64> = frac
        .iter()
        .map(|&f| (f.round() as i64).clamp(0, b as i64))
        .collect();
    let mut total: i64 = counts.iter().sum();
    // Repair: give residual slots to the largest fractional remainders.
    while total < b as i64 {
        let pick = (0..k)
            .filter(|&n| counts[n] < b as i64)
            .max_by(|&a, &bb| {
                let ra = frac[a] - counts[a] as f64;
                let rb = frac[bb] - counts[bb] as f64;
                ra.partial_cmp(&rb).unwrap()
            })
            .expect("some class below cap");
        counts[pick] += 1;
        total += 1;
    }
    while total > b as i64 {
        let pick = (0..k)
            .filter(|&n| counts[n] > 0)
            .min_by(|&a, &bb| {
                let ra = frac[a] - counts[a] as f64;
                let rb = frac[bb] - counts[bb] as f64;
                ra.partial_cmp(&rb).unwrap()
            })
            .expect("some class above zero");
        counts[pick] -= 1;
        total -= 1;
    }
    let counts: Vec<usize> = counts.into_iter().map(|c| c as usize).collect();
    let mut labels = Vec::with_capacity(b);
    for (n, &cnt) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(n).take(cnt));
    }
    Ok(LabelRecovery {
        labels,
        counts,
        degenerate: false,
        used_sign_fallback: false,
    })
}

/// Classic sign heuristic: negative final-FC rows indicate present classes;
/// remaining slots go to the most negative rows cyclically.
fn sign_fallback(rows: &[f64], b: usize, k: usize) -> LabelRecovery {
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &bb| rows[a].partial_cmp(&rows[bb]).unwrap());
    let mut counts = vec![0usize; k];
    let mut total = 0usize;
    for &n in &order {
        if total == b {
            break;
        }
        if rows[n] < 0.0 {
            counts[n] += 1;
            total += 1;
        }
    }
    let mut i = 0usize;
    while total < b {
        counts[order[i % k]] += 1;
        total += 1;
        i += 1;
    }
    let mut labels = Vec::with_capacity(b);
    for (n, &cnt) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(n).take(cnt));
    }
    LabelRecovery {
        labels,
        counts,
        degenerate: false,
        used_sign_fallback: true,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryResult {
    /// Recovered batch, clamped to [0,1]; shaped like the ground truth.
    #[serde(skip)]
    pub images: TensorData,
    pub labels: Vec<usize>,
    pub final_loss: f64,
    pub per_seed_losses: Vec<Option<f64>>,
    /// Raw objective value accepted at each iteration, per seed.
    pub loss_trace: Vec<Vec<f64>>,
    pub wall_seconds: f64,
    pub peak_memory_bytes: Option<u64>,
    pub iterations: usize,
    pub label_recovery: LabelRecovery,
    pub failed_seeds: Vec<usize>,
}

impl Default for RecoveryResult {
    fn default() -> Self {
        Self {
            images: TensorData::zeros(&[0]),
            labels: Vec::new(),
            final_loss: f64::NAN,
            per_seed_losses: Vec::new(),
            loss_trace: Vec::new(),
            wall_seconds: 0.0,
            peak_memory_bytes: None,
            iterations: 0,
            label_recovery: LabelRecovery {
                labels: Vec::new(),
                counts: Vec::new(),
                degenerate: false,
                used_sign_fallback: false,
            },
            failed_seeds: Vec::new(),
        }
    }
}

fn splitmix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn draw_init(rng_seed: u64, seed_idx: usize, attempt: usize, n: usize) -> Vec<f64> {
    let s = splitmix(rng_seed ^ ((seed_idx as u64) << 8) ^ ((attempt as u64) << 32));
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            (0.5 + 0.25 * z).clamp(0.0, 1.0)
        })
        .collect()
}

fn clamp_image(data: &[f64], shape: &[usize]) -> TensorData {
    TensorData::new_unchecked(
        shape.to_vec(),
        data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}

struct AttackProblem<'a> {
    pairs: Vec<&'a Observation>,
    labels: Vec<usize>,
    model: &'a ModelConfig,
    config: &'a AttackConfig,
    alphas: ScaledAlphas,
    shape: Vec<usize>,
}

impl AttackProblem<'_> {
    /// Objective value and gradient w.r.t. the dummy batch: the sum of
    /// gradient distances over all pairs plus the regularization.
    fn eval(&self, xv: &[f64], consensus: Option<&TensorData>) -> Result<(f64, Vec<f64>)> {
        let graph = Graph::new();
        let x = graph.leaf(
            &TensorData::new_unchecked(self.shape.clone(), xv.to_vec()),
            true,
        )?;
        let mut total: Option<Tensor> = None;
        let mut last_bn_inputs: Vec<Tensor> = Vec::new();
        for obs in &self.pairs {
            let params = obs.params.graph_leaves(&graph, true)?;
            let fwd = self
                .model
                .forward(&params, &obs.bn_stats, &x, &PrecodeEps::Zero)?;
            let loss = fwd.logits.cross_entropy(&self.labels)?;
            let refs: Vec<&Tensor> = params.iter().collect();
            let gw = grad(&loss, &refs, true)?;
            let dist = gradient_distance(
                &gw.grads,
                &obs.grads,
                self.config.distance,
                self.config.cosine_per_layer,
            )?;
            total = Some(match total {
                None => dist.value,
                Some(acc) => acc.add(&dist.value)?,
            });
            last_bn_inputs = fwd.bn_inputs;
        }
        let mut objective = total.expect("at least one observation");
        let latest = self.pairs.last().expect("at least one observation");
        if let Some(reg) = total_regularization(
            &x,
            &self.alphas,
            &last_bn_inputs,
            &latest.bn_stats,
            consensus,
        )? {
            objective = objective.add(&reg)?;
        }
        let gx = grad(&objective, &[&x], false)?;
        Ok((objective.item()?, gx.grads[0].values().to_vec()))
    }
}

enum SeedState {
    Lbfgs(LbfgsState),
    Adam(AdamState),
}

impl SeedState {
    fn new(problem: &AttackProblem<'_>, x0: Vec<f64>) -> Self {
        match problem.config.optimizer {
            OptimizerKind::Lbfgs => SeedState::Lbfgs(LbfgsState::new(x0)),
            OptimizerKind::Adam => SeedState::Adam(AdamState::new(x0, problem.config.lr)),
        }
    }

    fn step(&mut self, problem: &AttackProblem<'_>, consensus: Option<&TensorData>) -> Result<f64> {
        let mut obj = |xv: &[f64]| problem.eval(xv, consensus);
        match self {
            SeedState::Lbfgs(s) => s.step(&mut obj),
            SeedState::Adam(s) => s.step(&mut obj),
        }
    }

    fn current_x(&self) -> &[f64] {
        match self {
            SeedState::Lbfgs(s) => &s.x,
            SeedState::Adam(s) => &s.x,
        }
    }

    fn best(&self) -> (&[f64], f64) {
        match self {
            SeedState::Lbfgs(s) => s.best(),
            SeedState::Adam(s) => s.best(),
        }
    }

    fn trace(&self) -> &[f64] {
        match self {
            SeedState::Lbfgs(s) => &s.trace,
            SeedState::Adam(s) => &s.trace,
        }
    }

    fn last_value(&self) -> Option<f64> {
        self.trace().last().copied()
    }
}

fn is_numeric_fault(e: &Error) -> bool {
    matches!(
        e,
        Error::Tensor(crate::error::TensorError::NumericFault { .. })
    )
}

/// Run one seed to completion with a single restart on numeric fault.
/// Returns Err(diagnostic) when both attempts fail.
fn run_independent_seed(
    problem: &AttackProblem<'_>,
    seed_idx: usize,
    init: Option<&TensorData>,
) -> std::result::Result<SeedState, String> {
    let n: usize = problem.shape.iter().product();
    let mut diagnostics = Vec::new();
    for attempt in 0..2 {
        let x0 = match (init, attempt) {
            (Some(planted), 0) => planted.values().to_vec(),
            _ => draw_init(problem.config.rng_seed, seed_idx, attempt, n),
        };
        let mut state = SeedState::new(problem, x0);
        let mut failed = false;
        for _ in 0..problem.config.attack_iterations {
            match state.step(problem, None) {
                Ok(_) => {}
                Err(e) if is_numeric_fault(&e) => {
                    diagnostics.push(format!("seed {seed_idx} attempt {attempt}: {e}"));
                    failed = true;
                    break;
                }
                Err(e) => {
                    diagnostics.push(format!("seed {seed_idx} attempt {attempt}: {e}"));
                    failed = true;
                    break;
                }
            }
        }
        if !failed {
            return Ok(state);
        }
    }
    Err(diagnostics.join("; "))
}

/// Execute the attack over captured observations. See [`run_attack_with_init`]
/// for the planted-start variant used in fixed-point checks.
pub fn run_attack(
    observations: &[Arc<Observation>],
    config: &AttackConfig,
    model: &ModelConfig,
) -> Result<RecoveryResult> {
    run_attack_with_init(observations, config, model, None, None)
}

pub fn run_attack_with_init(
    observations: &[Arc<Observation>],
    config: &AttackConfig,
    model: &ModelConfig,
    init: Option<&TensorData>,
    labels_override: Option<&[usize]>,
) -> Result<RecoveryResult> {
    config.validate()?;
    if observations.is_empty() {
        return Err(Error::Structure("run_attack needs >= 1 observation".into()));
    }
    let (result, cost) = crate::metrics::compute_cost_probe(|| {
        attack_inner(observations, config, model, init, labels_override)
    });
    let mut result = result?;
    result.wall_seconds = cost.wall_seconds;
    result.peak_memory_bytes = cost.peak_memory_bytes;
    Ok(result)
}

fn attack_inner(
    observations: &[Arc<Observation>],
    config: &AttackConfig,
    model: &ModelConfig,
    init: Option<&TensorData>,
    labels_override: Option<&[usize]>,
) -> Result<RecoveryResult> {
    let mut sorted: Vec<&Observation> = observations.iter().map(|o| o.as_ref()).collect();
    sorted.sort_by_key(|o| o.t);
    let pairs: Vec<&Observation> = if config.multi_observation {
        let first_id = sorted[0].batch_id;
        if sorted.iter().any(|o| o.batch_id != first_id) {
            return Err(Error::Config(
                "multi-observation attack requires a repeated batch across observations".into(),
            ));
        }
        let start = sorted.len().saturating_sub(config.max_pairs);
        sorted[start..].to_vec()
    } else {
        vec![*sorted.last().expect("non-empty")]
    };
    let latest = *pairs.last().expect("non-empty");
    let b = latest.batch_size;
    let (c, h, w) = model.arch.input();
    let alphas = config.scaled_alphas((c, h, w), b);
    if alphas.bn > 0.0 && !model.arch.has_batchnorm() {
        return Err(Error::Config(
            "alpha_bn > 0 but the model has no BatchNorm layers".into(),
        ));
    }
    let label_recovery = match labels_override {
        Some(l) => LabelRecovery {
            labels: l.to_vec(),
            counts: {
                let mut counts = vec![0usize; model.arch.num_classes()];
                for &li in l {
                    counts[li] += 1;
                }
                counts
            },
            degenerate: false,
            used_sign_fallback: false,
        },
        None => recover_labels(latest, model, config.rng_seed)?,
    };
    let problem = AttackProblem {
        pairs,
        labels: label_recovery.labels.clone(),
        model,
        config,
        alphas,
        shape: vec![b, c, h, w],
    };
    let n: usize = problem.shape.iter().product();

    let mut per_seed_losses = vec![None; config.seeds];
    let mut loss_trace = vec![Vec::new(); config.seeds];
    let mut failed_seeds = Vec::new();
    let mut diagnostics = Vec::new();
    let images;
    let final_loss;

    match config.seed_selection {
        SeedSelection::BestOf => {
            // Independent seeds in parallel workers; collected in seed order.
            let results: Vec<std::result::Result<SeedState, String>> = if config.seeds == 1 {
                vec![run_independent_seed(&problem, 0, init)]
            } else {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = (0..config.seeds)
                        .map(|s| {
                            let problem = &problem;
                            scope.spawn(move || run_independent_seed(problem, s, init))
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("seed worker")).collect()
                })
            };
            let mut best: Option<(usize, f64)> = None;
            let mut states = Vec::new();
            for (s, r) in results.into_iter().enumerate() {
                match r {
                    Ok(state) => {
                        let (_, value) = state.best();
                        per_seed_losses[s] = Some(value);
                        loss_trace[s] = state.trace().to_vec();
                        if best.map_or(true, |(_, v)| value < v) {
                            best = Some((states.len(), value));
                        }
                        states.push(state);
                    }
                    Err(diag) => {
                        failed_seeds.push(s);
                        diagnostics.push(diag);
                    }
                }
            }
            let Some((winner, value)) = best else {
                return Err(Error::AttackFailed {
                    seeds: config.seeds,
                    diagnostics: diagnostics.join(" | "),
                });
            };
            images = clamp_image(states[winner].best().0, &problem.shape);
            final_loss = value;
        }
        SeedSelection::Consensus => {
            // Seeds advance in lockstep; the consensus image is recomputed at
            // every iteration boundary from all live seeds.
            let mut states: Vec<Option<SeedState>> = (0..config.seeds)
                .map(|s| {
                    let x0 = match init {
                        Some(planted) => planted.values().to_vec(),
                        None => draw_init(config.rng_seed, s, 0, n),
                    };
                    Some(SeedState::new(&problem, x0))
                })
                .collect();
            let mut restarted = vec![false; config.seeds];
            for _ in 0..config.attack_iterations {
                let consensus = consensus_of(&states, &problem.shape);
                for s in 0..config.seeds {
                    let Some(state) = states[s].as_mut() else {
                        continue;
                    };
                    match state.step(&problem, consensus.as_ref()) {
                        Ok(_) => {}
                        Err(e) if is_numeric_fault(&e) && !restarted[s] => {
                            restarted[s] = true;
                            diagnostics.push(format!("seed {s} restarted: {e}"));
                            states[s] =
                                Some(SeedState::new(&problem, draw_init(config.rng_seed, s, 1, n)));
                        }
                        Err(e) => {
                            diagnostics.push(format!("seed {s} failed: {e}"));
                            failed_seeds.push(s);
                            states[s] = None;
                        }
                    }
                }
                if states.iter().all(|s| s.is_none()) {
                    return Err(Error::AttackFailed {
                        seeds: config.seeds,
                        diagnostics: diagnostics.join(" | "),
                    });
                }
            }
            let mut live_values = Vec::new();
            for (s, state) in states.iter().enumerate() {
                if let Some(st) = state {
                    per_seed_losses[s] = st.last_value();
                    loss_trace[s] = st.trace().to_vec();
                    if let Some(v) = st.last_value() {
                        live_values.push(v);
                    }
                }
            }
            let consensus =
                consensus_of(&states, &problem.shape).expect("at least one live seed after the loop");
            images = clamp_image(consensus.values(), &problem.shape);
            final_loss = if live_values.is_empty() {
                f64::NAN
            } else {
                live_values.iter().sum::<f64>() / live_values.len() as f64
            };
        }
    }

    Ok(RecoveryResult {
        images,
        labels: label_recovery.labels.clone(),
        final_loss,
        per_seed_losses,
        loss_trace,
        wall_seconds: 0.0,
        peak_memory_bytes: None,
        iterations: config.attack_iterations,
        label_recovery,
        failed_seeds,
    })
}

/// Per-pixel mean over live seeds' current iterates, image-batch shaped.
fn consensus_of(states: &[Option<SeedState>], shape: &[usize]) -> Option<TensorData> {
    let live: Vec<&SeedState> = states.iter().filter_map(|s| s.as_ref()).collect();
    if live.is_empty() {
        return None;
    }
    let n: usize = shape.iter().product();
    let mut acc = vec![0.0; n];
    for st in &live {
        for (a, v) in acc.iter_mut().zip(st.current_x()) {
            *a += v;
        }
    }
    let scale = 1.0 / live.len() as f64;
    for a in acc.iter_mut() {
        *a *= scale;
    }
    Some(TensorData::new_unchecked(shape.to_vec(), acc))
}

#[cfg(test)]
mod tests;
