//! Episodic control environment around the finite element simulator.
//!
//! The agent acts in `[-1, 1]^n_regions`; actions are mapped affinely onto
//! `[action_low, action_high]` and multiplied by `kappa_scale` to obtain the
//! regional diffusivities. Every action advances the PDE by one implicit
//! step and earns one of two rewards built from L² norms:
//!
//! * `diff`:  `ω1 ‖κ_i‖/‖κ_0⁰‖ − ω2 max(0, (‖c_i‖ − ‖c_i^bef‖)/‖c_0⁰‖)`
//! * `state`: `−ω3 ‖c_i‖/‖c_0⁰‖ + ω4 min(0, (‖κ_i‖ − ‖κ_i^bef‖)/‖κ_0⁰‖)`
//!
//! The `bef` norms come from a [`BaselineTrace`] recorded once, before any
//! training, and `‖c_0⁰‖`, `‖κ_0⁰‖` are the norms at step 0 of that episode.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{ControlMap, FemError, Field, SimParams, Simulator};
use crate::mesh::Mesh;

/// Slack allowed outside `[-1, 1]` before an action is rejected.
pub const ACTION_TOL: f64 = 1e-9;
/// Baseline norms used as denominators must exceed this.
pub const NORM_FLOOR: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("action {index} = {value} is outside [-1, 1]")]
    ActionOutOfRange { index: usize, value: f64 },
    #[error("expected {expected} actions, got {found}")]
    ActionSize { expected: usize, found: usize },
    #[error("step called before reset")]
    NotReset,
    #[error("episode already finished")]
    EpisodeDone,
    #[error("no baseline recorded; reset with record_baseline first")]
    NoBaseline,
    #[error("baseline norm {name} = {value:e} is too small to normalize by")]
    DegenerateBaseline { name: &'static str, value: f64 },
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("remote environment error: {0}")]
    Remote(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Favor large diffusivities, penalize infections above the baseline.
    Diff,
    /// Favor small infections, penalize diffusivities below the baseline.
    State,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 1.0, w3: 1.0, w4: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialCondition {
    /// `inside` on nodes within `radius` of `center`, `outside` elsewhere.
    Disk { center: [f64; 2], radius: f64, inside: f64, outside: f64 },
    /// `inside` on nodes touched by `region`, `outside` elsewhere.
    Region { region: usize, inside: f64, outside: f64 },
    Uniform { value: f64 },
}

impl InitialCondition {
    pub fn nodal_values(&self, mesh: &Mesh) -> Result<Vec<f64>, EnvError> {
        Ok(match *self {
            Self::Disk { center, radius, inside, outside } => mesh
                .nodes()
                .iter()
                .map(|p| {
                    let d2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
                    if d2 <= radius * radius * (1.0 + 1e-12) { inside } else { outside }
                })
                .collect(),
            Self::Region { region, inside, outside } => {
                if region >= mesh.n_regions() {
                    return Err(EnvError::Config(format!(
                        "initial condition region {region} out of range ({} regions)",
                        mesh.n_regions()
                    )));
                }
                mesh.nodes_in_region(region).into_iter().map(|f| if f { inside } else { outside }).collect()
            }
            Self::Uniform { value } => vec![value; mesh.n_nodes()],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub objective: Objective,
    #[serde(default)]
    pub weights: RewardWeights,
    pub action_low: f64,
    pub action_high: f64,
    pub kappa_scale: f64,
    pub episode_len: usize,
    pub ic: InitialCondition,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let RewardWeights { w1, w2, w3, w4 } = self.weights;
        if !(self.action_low > 0.0 && self.action_low < self.action_high && self.action_high.is_finite()) {
            return Err(EnvError::Config(format!(
                "need 0 < action_low < action_high, got [{}, {}]",
                self.action_low, self.action_high
            )));
        }
        if !(self.kappa_scale > 0.0 && self.kappa_scale.is_finite()) {
            return Err(EnvError::Config("kappa_scale must be positive".into()));
        }
        if [w1, w2, w3, w4].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(EnvError::Config("reward weights must be non-negative".into()));
        }
        if self.episode_len == 0 {
            return Err(EnvError::Config("episode_len must be at least 1".into()));
        }
        Ok(())
    }

    /// RL-space action to physical diffusivities.
    pub fn scale_action(&self, action: &[f64]) -> Result<ControlMap, EnvError> {
        let kappa = action
            .iter()
            .enumerate()
            .map(|(index, &a)| {
                if !(a.abs() <= 1.0 + ACTION_TOL) {
                    return Err(EnvError::ActionOutOfRange { index, value: a });
                }
                let a = a.clamp(-1.0, 1.0);
                Ok((self.action_low + 0.5 * (a + 1.0) * (self.action_high - self.action_low)) * self.kappa_scale)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ControlMap::new(kappa)?)
    }

    pub fn unscale(&self, control: &ControlMap) -> Vec<f64> {
        control
            .values()
            .iter()
            .map(|k| 2.0 * (k / self.kappa_scale - self.action_low) / (self.action_high - self.action_low) - 1.0)
            .collect()
    }
}

/// Static description of an environment, as an agent sees it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_actions: usize,
    pub obs_size: usize,
    pub episode_len: usize,
    pub action_low: f64,
    pub action_high: f64,
    pub kappa_scale: f64,
    /// Node coordinates, for writing field snapshots on the agent side.
    pub nodes: Vec<[f64; 2]>,
}

impl EnvSpec {
    pub fn scale_action(&self, action: &[f64]) -> Result<ControlMap, EnvError> {
        EnvConfig {
            objective: Objective::Diff,
            weights: RewardWeights::default(),
            action_low: self.action_low,
            action_high: self.action_high,
            kappa_scale: self.kappa_scale,
            episode_len: self.episode_len,
            ic: InitialCondition::Uniform { value: 0.0 },
        }
        .scale_action(action)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub step: usize,
    /// Nodal state.
    pub state: Vec<f64>,
    pub norm_c: f64,
    pub norm_kappa: f64,
    /// Reward earned at this step (at step 0: the reward of the initial control).
    pub reward: f64,
    pub done: bool,
    /// RL-space action in force at this step.
    pub action: Vec<f64>,
}

/// Per-step norms of the episode recorded before training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrace {
    pub norm_c_bef: Vec<f64>,
    pub norm_kappa_bef: Vec<f64>,
    pub norm_c0: f64,
    pub norm_kappa0: f64,
}

impl BaselineTrace {
    fn start(norm_c: f64, norm_kappa: f64) -> Self {
        Self { norm_c_bef: vec![norm_c], norm_kappa_bef: vec![norm_kappa], norm_c0: norm_c, norm_kappa0: norm_kappa }
    }

    fn guarded(&self) -> Result<(f64, f64), EnvError> {
        if !(self.norm_c0 > NORM_FLOOR) {
            return Err(EnvError::DegenerateBaseline { name: "norm_c0", value: self.norm_c0 });
        }
        if !(self.norm_kappa0 > NORM_FLOOR) {
            return Err(EnvError::DegenerateBaseline { name: "norm_kappa0", value: self.norm_kappa0 });
        }
        Ok((self.norm_c0, self.norm_kappa0))
    }

    fn at(v: &[f64], step: usize) -> Result<f64, EnvError> {
        v.get(step).copied().ok_or_else(|| EnvError::Config(format!("baseline has no step {step}")))
    }
}

pub fn reward_diff(
    norm_kappa: f64,
    norm_c: f64,
    baseline: &BaselineTrace,
    step: usize,
    w1: f64,
    w2: f64,
) -> Result<f64, EnvError> {
    let (c0, k0) = baseline.guarded()?;
    let c_bef = BaselineTrace::at(&baseline.norm_c_bef, step)?;
    Ok(w1 * norm_kappa / k0 - w2 * ((norm_c - c_bef) / c0).max(0.0))
}

pub fn reward_state(
    norm_kappa: f64,
    norm_c: f64,
    baseline: &BaselineTrace,
    step: usize,
    w3: f64,
    w4: f64,
) -> Result<f64, EnvError> {
    let (c0, k0) = baseline.guarded()?;
    let k_bef = BaselineTrace::at(&baseline.norm_kappa_bef, step)?;
    Ok(-w3 * norm_c / c0 + w4 * ((norm_kappa - k_bef) / k0).min(0.0))
}

/// What an agent needs from an environment, local or remote.
pub trait EnvHandle {
    fn spec(&self) -> EnvSpec;

    /// Starts an episode. With `record_baseline` the episode's norms become
    /// the new baseline once it completes, and its rewards are computed
    /// against itself.
    fn reset(&mut self, seed: u64, record_baseline: bool) -> Result<Observation, EnvError>;

    fn step(&mut self, action: &[f64]) -> Result<Observation, EnvError>;

    fn baseline(&mut self) -> Result<Option<BaselineTrace>, EnvError>;
}

#[derive(Clone, Debug)]
struct Episode {
    c: Field,
    step: usize,
}

/// In-process environment.
#[derive(Clone, Debug)]
pub struct Environment {
    sim: Simulator,
    config: EnvConfig,
    ic: Vec<f64>,
    baseline: Option<BaselineTrace>,
    recording: Option<BaselineTrace>,
    episode: Option<Episode>,
}

impl Environment {
    pub fn new(mesh: Arc<Mesh>, params: SimParams, config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let ic = config.ic.nodal_values(&mesh)?;
        let sim = Simulator::new(mesh, params)?;
        Ok(Self { sim, config, ic, baseline: None, recording: None, episode: None })
    }

    pub fn from_simulator(sim: Simulator, config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let ic = config.ic.nodal_values(sim.mesh())?;
        Ok(Self { sim, config, ic, baseline: None, recording: None, episode: None })
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        self.sim.mesh()
    }

    pub fn n_actions(&self) -> usize {
        self.sim.mesh().n_regions()
    }

    pub fn set_baseline(&mut self, baseline: BaselineTrace) {
        self.baseline = Some(baseline);
    }

    pub fn current_state(&self) -> Option<&Field> {
        self.episode.as_ref().map(|e| &e.c)
    }

    #[cfg(test)]
    fn recording_or_baseline(&self) -> &BaselineTrace {
        self.recording.as_ref().or(self.baseline.as_ref()).unwrap()
    }

    fn reward(&self, norm_kappa: f64, norm_c: f64, step: usize) -> Result<f64, EnvError> {
        let reference = self.recording.as_ref().or(self.baseline.as_ref()).ok_or(EnvError::NoBaseline)?;
        let w = &self.config.weights;
        match self.config.objective {
            Objective::Diff => reward_diff(norm_kappa, norm_c, reference, step, w.w1, w.w2),
            Objective::State => reward_state(norm_kappa, norm_c, reference, step, w.w3, w.w4),
        }
    }

    /// Records a baseline episode driven by uniform random actions drawn
    /// from `seed`.
    pub fn record_baseline(&mut self, seed: u64) -> Result<BaselineTrace, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e_11fe_0001);
        let n = self.n_actions();
        self.record_baseline_with(seed, |_| (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())
    }

    /// Records a baseline episode with actions from `actor`.
    pub fn record_baseline_with(
        &mut self,
        seed: u64,
        mut actor: impl FnMut(&Observation) -> Vec<f64>,
    ) -> Result<BaselineTrace, EnvError> {
        let mut obs = self.reset(seed, true)?;
        while !obs.done {
            obs = self.step(&actor(&obs))?;
        }
        self.baseline.clone().ok_or(EnvError::NoBaseline)
    }
}

impl EnvHandle for Environment {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_actions: self.n_actions(),
            obs_size: self.sim.mesh().n_nodes(),
            episode_len: self.config.episode_len,
            action_low: self.config.action_low,
            action_high: self.config.action_high,
            kappa_scale: self.config.kappa_scale,
            nodes: self.sim.mesh().nodes().to_vec(),
        }
    }

    fn reset(&mut self, seed: u64, record_baseline: bool) -> Result<Observation, EnvError> {
        self.episode = None;
        self.recording = None;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let action: Vec<f64> = (0..self.n_actions()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let control = self.config.scale_action(&action)?;
        let c = Field::new(self.ic.clone());
        let norm_c = self.sim.norm_field(&c.values);
        let norm_kappa = self.sim.norm_control(&control);
        if record_baseline {
            self.recording = Some(BaselineTrace::start(norm_c, norm_kappa));
        }
        let reward = self.reward(norm_kappa, norm_c, 0)?;
        let state = c.values.clone();
        self.episode = Some(Episode { c, step: 0 });
        Ok(Observation { step: 0, state, norm_c, norm_kappa, reward, done: false, action })
    }

    fn step(&mut self, action: &[f64]) -> Result<Observation, EnvError> {
        let ep = self.episode.as_ref().ok_or(EnvError::NotReset)?;
        if ep.step >= self.config.episode_len {
            return Err(EnvError::EpisodeDone);
        }
        if action.len() != self.n_actions() {
            return Err(EnvError::ActionSize { expected: self.n_actions(), found: action.len() });
        }
        let control = self.config.scale_action(action)?;
        let next = match self.sim.step(&ep.c, &control) {
            Ok(next) => next,
            Err(e) => {
                self.episode = None;
                self.recording = None;
                return Err(e.into());
            }
        };
        let step = ep.step + 1;
        let norm_c = self.sim.norm_field(&next.values);
        let norm_kappa = self.sim.norm_control(&control);
        if let Some(rec) = self.recording.as_mut() {
            rec.norm_c_bef.push(norm_c);
            rec.norm_kappa_bef.push(norm_kappa);
        }
        let reward = self.reward(norm_kappa, norm_c, step)?;
        let done = step == self.config.episode_len;
        if done {
            if let Some(rec) = self.recording.take() {
                self.baseline = Some(rec);
            }
        }
        let state = next.values.clone();
        self.episode = Some(Episode { c: next, step });
        Ok(Observation { step, state, norm_c, norm_kappa, reward, done, action: action.to_vec() })
    }

    fn baseline(&mut self) -> Result<Option<BaselineTrace>, EnvError> {
        Ok(self.baseline.clone())
    }
}
