//! Stochastic policy-gradient agent.
//!
//! The policy is a one-hidden-layer tanh network producing the mean of a
//! Gaussian over `[-1, 1]^n`; the spread is a state-independent learnable
//! parameter floored at the exploration level. Training is REINFORCE with
//! horizon-1 returns and a batch-mean baseline, optimized by repeated Adam
//! steps, each guarded by a backtracking line search on the batch loss.

mod agent;

pub use agent::{splitmix64, train, Agent, AgentConfig, Checkpoint, TrainReport, CHECKPOINT_VERSION};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvError;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("{what}: expected length {expected}, got {found}")]
    Shape { what: &'static str, expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Flat parameter vector laid out as `W1 (hidden×in), b1, W2 (out×hidden), b2, log_spread`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub spread_floor: f64,
    pub theta: Vec<f64>,
}

struct Layout {
    b1: usize,
    w2: usize,
    b2: usize,
    ls: usize,
    len: usize,
}

impl PolicyParams {
    fn layout(n_in: usize, n_hidden: usize, n_out: usize) -> Layout {
        let b1 = n_hidden * n_in;
        let w2 = b1 + n_hidden;
        let b2 = w2 + n_out * n_hidden;
        let ls = b2 + n_out;
        Layout { b1, w2, b2, ls, len: ls + n_out }
    }

    pub fn param_count(n_in: usize, n_hidden: usize, n_out: usize) -> usize {
        Self::layout(n_in, n_hidden, n_out).len
    }

    /// All weights zero, spread at `exp(log_spread)`.
    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize, log_spread: f64, spread_floor: f64) -> Self {
        let l = Self::layout(n_in, n_hidden, n_out);
        let mut theta = vec![0.0; l.len];
        theta[l.ls..].fill(log_spread);
        Self { n_in, n_hidden, n_out, spread_floor, theta }
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init(
        n_in: usize,
        n_hidden: usize,
        n_out: usize,
        log_spread: f64,
        spread_floor: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut p = Self::zeros(n_in, n_hidden, n_out, log_spread, spread_floor);
        let l = Self::layout(n_in, n_hidden, n_out);
        let first = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        let (s1, s2) = (1.0 / (n_in as f64).sqrt(), 1.0 / (n_hidden as f64).sqrt());
        for (k, t) in p.theta[..l.ls].iter_mut().enumerate() {
            let scale = if k < l.w2 { s1 } else { s2 };
            *t = scale * first.sample(rng);
        }
        p
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64], &[f64]) {
        let l = Self::layout(self.n_in, self.n_hidden, self.n_out);
        let t = &self.theta;
        (&t[..l.b1], &t[l.b1..l.w2], &t[l.w2..l.b2], &t[l.b2..l.ls], &t[l.ls..])
    }

    pub fn log_spread(&self) -> &[f64] {
        self.split().4
    }

    pub fn spread(&self) -> Vec<f64> {
        self.log_spread().iter().map(|s| s.exp().max(self.spread_floor)).collect()
    }

    fn check_obs(&self, obs: &[f64]) -> Result<(), PolicyError> {
        if obs.len() != self.n_in {
            return Err(PolicyError::Shape { what: "observation", expected: self.n_in, found: obs.len() });
        }
        Ok(())
    }

    /// Hidden activations and mean.
    fn activations(&self, obs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w1, b1, w2, b2, _) = self.split();
        let hidden: Vec<f64> =
            (0..self.n_hidden).map(|j| (dot(&w1[j * self.n_in..(j + 1) * self.n_in], obs) + b1[j]).tanh()).collect();
        let mean: Vec<f64> = (0..self.n_out)
            .map(|k| (dot(&w2[k * self.n_hidden..(k + 1) * self.n_hidden], &hidden) + b2[k]).tanh())
            .collect();
        (hidden, mean)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean in `(-1, 1)^n` and spread for one observation.
pub fn forward(params: &PolicyParams, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
    params.check_obs(obs)?;
    Ok((params.activations(obs).1, params.spread()))
}

/// Unclipped Gaussian draw around `mean`.
pub fn sample_raw(mean: &[f64], spread: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    mean.iter()
        .zip(spread)
        .map(|(m, s)| {
            let z: f64 = StandardNormal.sample(rng);
            m + s * z
        })
        .collect()
}

pub fn clip_action(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
}

/// Gaussian draw around `mean`, clipped to `[-1, 1]`.
pub fn sample(mean: &[f64], spread: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    clip_action(&sample_raw(mean, spread, rng))
}

/// Gaussian log-density summed over dimensions. Evaluated at the unclipped
/// sample, so clipping never enters the gradient.
pub fn log_prob(mean: &[f64], spread: &[f64], action: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    mean.iter()
        .zip(spread)
        .zip(action)
        .map(|((m, s), a)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * ln_2pi
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Unclipped sample; the environment saw its clipped version.
    pub action: Vec<f64>,
    pub reward: f64,
}

fn advantages(batch: &[Transition]) -> Result<Vec<f64>, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mean = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;
    Ok(batch.iter().map(|t| t.reward - mean).collect())
}

fn check_batch(params: &PolicyParams, batch: &[Transition]) -> Result<(), PolicyError> {
    for t in batch {
        params.check_obs(&t.obs)?;
        if t.action.len() != params.n_out {
            return Err(PolicyError::Shape { what: "action", expected: params.n_out, found: t.action.len() });
        }
    }
    Ok(())
}

/// `-(1/B) Σ log π(a|s) (r - mean r)`.
pub fn pg_loss(params: &PolicyParams, batch: &[Transition]) -> Result<f64, PolicyError> {
    let adv = advantages(batch)?;
    check_batch(params, batch)?;
    let spread = params.spread();
    let total: f64 = batch
        .iter()
        .zip(&adv)
        .map(|(t, a)| {
            let (_, mean) = params.activations(&t.obs);
            log_prob(&mean, &spread, &t.action) * a
        })
        .sum();
    Ok(-total / batch.len() as f64)
}

/// Loss and its exact gradient with respect to `theta`.
pub fn backward(params: &PolicyParams, batch: &[Transition]) -> Result<(f64, Vec<f64>), PolicyError> {
    let adv = advantages(batch)?;
    check_batch(params, batch)?;
    let (n_in, n_h, n_out) = (params.n_in, params.n_hidden, params.n_out);
    let l = PolicyParams::layout(n_in, n_h, n_out);
    let (_, _, w2, _, log_spread) = params.split();
    let spread = params.spread();
    let inv_b = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; l.len];
    let mut loss = 0.0;
    let mut dz2 = vec![0.0; n_out];
    let mut dz1 = vec![0.0; n_h];
    for (t, &a) in batch.iter().zip(&adv) {
        let (hidden, mean) = params.activations(&t.obs);
        loss -= log_prob(&mean, &spread, &t.action) * a * inv_b;
        if a == 0.0 {
            continue;
        }
        for k in 0..n_out {
            let z = (t.action[k] - mean[k]) / spread[k];
            // d(-a·logπ)/dμ = -a (x-μ)/σ²
            dz2[k] = -a * inv_b * z / spread[k] * (1.0 - mean[k] * mean[k]);
            if log_spread[k].exp() > params.spread_floor {
                grad[l.ls + k] -= a * inv_b * (z * z - 1.0);
            }
        }
        for j in 0..n_h {
            let dh: f64 = (0..n_out).map(|k| w2[k * n_h + j] * dz2[k]).sum();
            dz1[j] = dh * (1.0 - hidden[j] * hidden[j]);
        }
        for k in 0..n_out {
            let row = &mut grad[l.w2 + k * n_h..l.w2 + (k + 1) * n_h];
            row.iter_mut().zip(&hidden).for_each(|(g, h)| *g += dz2[k] * h);
            grad[l.b2 + k] += dz2[k];
        }
        for j in 0..n_h {
            if dz1[j] != 0.0 {
                let row = &mut grad[j * n_in..(j + 1) * n_in];
                row.iter_mut().zip(&t.obs).for_each(|(g, x)| *g += dz1[j] * x);
            }
            grad[l.b1 + j] += dz1[j];
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Advances the moments with `grad` and returns the bias-corrected step.
    pub fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        self.m.iter_mut().zip(self.v.iter_mut()).zip(grad).map(|((m, v), &g)| {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            -self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps)
        })
        .collect()
    }
}

pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<(), PolicyError> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(PolicyError::Shape { what: "gradient", expected: params.len(), found: grad.len() });
    }
    let d = state.direction(grad);
    params.iter_mut().zip(&d).for_each(|(p, d)| *p += d);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaSettings {
    pub iterations: usize,
    pub line_search_trials: usize,
    pub shrink: f64,
}

impl Default for MetaSettings {
    fn default() -> Self {
        Self { iterations: 10, line_search_trials: 10, shrink: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    /// Batch loss before the first iteration and after each one.
    pub losses: Vec<f64>,
    /// Accepted step length per iteration (0 when every trial was rejected).
    pub step_lengths: Vec<f64>,
}

impl UpdateReport {
    pub fn is_monotone(&self) -> bool {
        self.losses.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Repeated Adam steps, each scaled back by halving until the batch loss
/// does not increase.
pub fn multi_step_update(
    params: &mut PolicyParams,
    batch: &[Transition],
    adam: &mut AdamState,
    settings: &MetaSettings,
) -> Result<UpdateReport, PolicyError> {
    let mut report = UpdateReport::default();
    let (mut loss, mut grad) = backward(params, batch)?;
    report.losses.push(loss);
    for it in 0..settings.iterations {
        let d = adam.direction(&grad);
        let mut length = 1.0;
        let mut accepted = None;
        for _ in 0..settings.line_search_trials {
            let mut trial = params.clone();
            trial.theta.iter_mut().zip(&d).for_each(|(p, d)| *p += length * d);
            let trial_loss = pg_loss(&trial, batch)?;
            if trial_loss <= loss {
                accepted = Some((trial, trial_loss));
                break;
            }
            length *= settings.shrink;
        }
        match accepted {
            Some((trial, trial_loss)) => {
                *params = trial;
                loss = trial_loss;
                report.step_lengths.push(length);
            }
            None => report.step_lengths.push(0.0),
        }
        report.losses.push(loss);
        if it + 1 < settings.iterations {
            grad = backward(params, batch)?.1;
        }
    }
    Ok(report)
}
