//! First-order minimizers driving the recovery optimization: L-BFGS with
//! two-loop recursion and Armijo backtracking, and Adam.
//!
//! Both expose a step-wise API so callers can synchronize several instances
//! (the consensus attack advances all seeds in lockstep).

use crate::error::{Error, Result};
use std::collections::VecDeque;

/// Objective: value and gradient at `x`.
pub type Objective<'a> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    /// Best point seen (not necessarily the last iterate).
    pub x: Vec<f64>,
    pub best_value: f64,
    /// Raw objective value accepted at each iteration.
    pub trace: Vec<f64>,
    pub evals: usize,
}

const LBFGS_HISTORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 25;
const GRAD_TOL: f64 = 1e-12;

pub struct LbfgsState {
    pub x: Vec<f64>,
    history: VecDeque<(Vec<f64>, Vec<f64>, f64)>, // (s, y, 1/s.y)
    value: f64,
    gradient: Vec<f64>,
    best_value: f64,
    best_x: Vec<f64>,
    evaluated: bool,
    pub evals: usize,
    pub trace: Vec<f64>,
}

impl LbfgsState {
    pub fn new(x0: Vec<f64>) -> Self {
        Self {
            best_x: x0.clone(),
            x: x0,
            history: VecDeque::with_capacity(LBFGS_HISTORY),
            value: f64::INFINITY,
            gradient: Vec::new(),
            best_value: f64::INFINITY,
            evaluated: false,
            evals: 0,
            trace: Vec::new(),
        }
    }

    pub fn best(&self) -> (&[f64], f64) {
        (&self.best_x, self.best_value)
    }

    fn eval(&mut self, obj: &mut Objective<'_>, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evals += 1;
        obj(x)
    }

    fn note_best(&mut self, x: &[f64], f: f64) {
        if f < self.best_value {
            self.best_value = f;
            self.best_x = x.to_vec();
        }
    }

    /// Two-loop recursion for the search direction -H.g.
    fn direction(&self) -> Vec<f64> {
        let g = &self.gradient;
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y, rho) in self.history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.history.back() {
            let gamma = dot(s, y) / dot(y, y).max(1e-300);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in self.history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter().map(|v| -v).collect()
    }

    /// One L-BFGS iteration: direction, backtracking line search (gradient
    /// step fallback when it fails), curvature-guarded history update.
    pub fn step(&mut self, obj: &mut Objective<'_>) -> Result<f64> {
        if !self.evaluated {
            let x = self.x.clone();
            let (f, g) = self.eval(obj, &x)?;
            self.value = f;
            self.gradient = g;
            self.note_best(&x, f);
            self.evaluated = true;
        }
        let gnorm = norm(&self.gradient);
        if gnorm < GRAD_TOL {
            self.trace.push(self.value);
            return Ok(self.value);
        }
        let mut dir = self.direction();
        let mut dd = dot(&self.gradient, &dir);
        if dd >= 0.0 {
            // Model direction is not a descent direction; fall back to -g.
            dir = self.gradient.iter().map(|v| -v).collect();
            dd = -gnorm * gnorm;
        }
        let mut alpha = if self.history.is_empty() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };
        let mut accepted: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand: Vec<f64> = self
                .x
                .iter()
                .zip(&dir)
                .map(|(xi, di)| xi + alpha * di)
                .collect();
            match self.eval(obj, &cand) {
                Ok((f, g)) if f <= self.value + ARMIJO_C1 * alpha * dd => {
                    accepted = Some((cand, f, g));
                    break;
                }
                Ok(_) => alpha *= 0.5,
                // Non-finite trial points shrink the step instead of aborting.
                Err(Error::Tensor(crate::error::TensorError::NumericFault { .. })) => alpha *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let (new_x, new_f, new_g) = match accepted {
            Some(t) => t,
            None => {
                // Line search failed: take a conservative gradient step.
                let fb = 1e-4 / gnorm.max(1.0);
                let cand: Vec<f64> = self
                    .x
                    .iter()
                    .zip(&self.gradient)
                    .map(|(xi, gi)| xi - fb * gi)
                    .collect();
                let (f, g) = self.eval(obj, &cand)?;
                (cand, f, g)
            }
        };
        let s: Vec<f64> = new_x.iter().zip(&self.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_g.iter().zip(&self.gradient).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if self.history.len() == LBFGS_HISTORY {
                self.history.pop_front();
            }
            self.history.push_back((s, y, 1.0 / sy));
        }
        self.x = new_x;
        self.value = new_f;
        self.gradient = new_g;
        let (x, f) = (self.x.clone(), self.value);
        self.note_best(&x, f);
        self.trace.push(self.value);
        Ok(self.value)
    }

    pub fn into_outcome(self) -> OptimOutcome {
        OptimOutcome {
            x: self.best_x,
            best_value: self.best_value,
            trace: self.trace,
            evals: self.evals,
        }
    }
}

pub fn lbfgs_minimize(
    obj: &mut Objective<'_>,
    x0: Vec<f64>,
    iterations: usize,
) -> Result<OptimOutcome> {
    let mut state = LbfgsState::new(x0);
    for _ in 0..iterations {
        state.step(obj)?;
    }
    Ok(state.into_outcome())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct AdamState {
    pub x: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
    lr: f64,
    best_value: f64,
    best_x: Vec<f64>,
    pub evals: usize,
    pub trace: Vec<f64>,
}

impl AdamState {
    pub fn new(x0: Vec<f64>, lr: f64) -> Self {
        let n = x0.len();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            best_value: f64::INFINITY,
            best_x: x0.clone(),
            x: x0,
            evals: 0,
            trace: Vec::new(),
        }
    }

    pub fn best(&self) -> (&[f64], f64) {
        (&self.best_x, self.best_value)
    }

    pub fn step(&mut self, obj: &mut Objective<'_>) -> Result<f64> {
        self.evals += 1;
        let (f, g) = obj(&self.x)?;
        if f < self.best_value {
            self.best_value = f;
            self.best_x = self.x.clone();
        }
        self.t += 1;
        let b1t = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let b2t = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..self.x.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            self.x[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        self.trace.push(f);
        Ok(f)
    }

    pub fn into_outcome(mut self, obj: &mut Objective<'_>) -> Result<OptimOutcome> {
        // Score the final iterate too, so the best point reflects the last move.
        self.evals += 1;
        let (f, _) = obj(&self.x)?;
        if f < self.best_value {
            self.best_value = f;
            self.best_x = self.x.clone();
        }
        Ok(OptimOutcome {
            x: self.best_x,
            best_value: self.best_value,
            trace: self.trace,
            evals: self.evals,
        })
    }
}

pub fn adam_minimize(
    obj: &mut Objective<'_>,
    x0: Vec<f64>,
    lr: f64,
    iterations: usize,
) -> Result<OptimOutcome> {
    let mut state = AdamState::new(x0, lr);
    for _ in 0..iterations {
        state.step(obj)?;
    }
    state.into_outcome(obj)
}
