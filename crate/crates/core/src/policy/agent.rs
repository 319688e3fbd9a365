use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_action, forward, multi_step_update, sample_raw, AdamState, MetaSettings, PolicyError, PolicyParams, Transition, UpdateReport};
use crate::env::{BaselineTrace, EnvError, EnvHandle};
use crate::trace::EpisodeTrace;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub spread_floor: f64,
    pub initial_log_spread: f64,
    pub meta: MetaSettings,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { hidden: 128, learning_rate: 8e-5, spread_floor: 0.1, initial_log_spread: 0.5f64.ln(), meta: MetaSettings::default() }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Reset seed for training episode `episode`; the baseline episode uses `u64::MAX`.
fn episode_seed(seed: u64, episode: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ episode)
}

/// Steps in an episode that failed mid-way are not trained on.
fn is_episode_failure(e: &PolicyError) -> bool {
    matches!(e, PolicyError::Env(EnvError::Fem(_) | EnvError::Remote(_)))
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Episode recorded with the untrained policy, if this run recorded one.
    pub baseline_episode: Option<EpisodeTrace>,
    pub traces: Vec<EpisodeTrace>,
    /// One per completed (non-aborted) episode, in order.
    pub updates: Vec<UpdateReport>,
    pub aborted: usize,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub policy: PolicyParams,
    pub adam: AdamState,
    rng: ChaCha8Rng,
    seed: u64,
    episodes_done: usize,
}

impl Agent {
    pub fn new(config: AgentConfig, n_in: usize, n_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyParams::init(n_in, config.hidden, n_out, config.initial_log_spread, config.spread_floor, &mut rng);
        let adam = AdamState::new(policy.theta.len(), config.learning_rate);
        Self { config, policy, adam, rng, seed, episodes_done: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    /// Sampled action, clipped to `[-1, 1]`.
    pub fn act(&mut self, obs: &[f64]) -> Result<Vec<f64>, PolicyError> {
        Ok(clip_action(&self.act_raw(obs)?))
    }

    fn act_raw(&mut self, obs: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let (mean, spread) = forward(&self.policy, obs)?;
        Ok(sample_raw(&mean, &spread, &mut self.rng))
    }

    /// Runs one episode with sampled actions. On a mid-episode solver
    /// failure the trace ends with the abort sentinel and the error is
    /// returned alongside it.
    fn rollout(
        &mut self,
        env: &mut dyn EnvHandle,
        reset_seed: u64,
        record_baseline: bool,
    ) -> Result<(EpisodeTrace, Vec<Transition>, Option<PolicyError>), PolicyError> {
        let mut trace = EpisodeTrace::new(self.episodes_done);
        let mut batch = Vec::new();
        let mut obs = env.reset(reset_seed, record_baseline)?;
        trace.push(&obs);
        while !obs.done {
            let raw = self.act_raw(&obs.state)?;
            let action = clip_action(&raw);
            let next = match env.step(&action) {
                Ok(next) => next,
                Err(e) => {
                    let e = PolicyError::from(e);
                    if !is_episode_failure(&e) {
                        return Err(e);
                    }
                    trace.mark_aborted(&action);
                    return Ok((trace, batch, Some(e)));
                }
            };
            trace.push(&next);
            batch.push(Transition { obs: std::mem::take(&mut obs.state), action: raw, reward: next.reward });
            obs = next;
        }
        Ok((trace, batch, None))
    }

    /// Records the environment's baseline with the current (untrained) policy.
    pub fn record_baseline(&mut self, env: &mut dyn EnvHandle) -> Result<(EpisodeTrace, BaselineTrace), PolicyError> {
        let (trace, _, failure) = self.rollout(env, episode_seed(self.seed, u64::MAX), true)?;
        if let Some(e) = failure {
            return Err(e);
        }
        let baseline = env.baseline()?.ok_or(EnvError::NoBaseline)?;
        Ok((trace, baseline))
    }

    /// Trains for `n_episodes` more episodes, one update per episode.
    /// Records a baseline first if the environment has none.
    pub fn train(
        &mut self,
        env: &mut dyn EnvHandle,
        n_episodes: usize,
        mut on_episode: impl FnMut(&EpisodeTrace, Option<&UpdateReport>),
    ) -> Result<TrainReport, PolicyError> {
        let mut report = TrainReport::default();
        if env.baseline()?.is_none() {
            report.baseline_episode = Some(self.record_baseline(env)?.0);
        }
        for _ in 0..n_episodes {
            let seed = episode_seed(self.seed, self.episodes_done as u64);
            let (trace, batch, failure) = self.rollout(env, seed, false)?;
            let update = match failure {
                Some(e) => {
                    log::warn!("episode {} aborted: {e}", self.episodes_done);
                    report.aborted += 1;
                    None
                }
                None if batch.is_empty() => None,
                None => Some(multi_step_update(&mut self.policy, &batch, &mut self.adam, &self.config.meta)?),
            };
            on_episode(&trace, update.as_ref());
            report.traces.push(trace);
            report.updates.extend(update);
            self.episodes_done += 1;
        }
        Ok(report)
    }

    pub fn checkpoint(&self, baseline: Option<BaselineTrace>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            episodes_done: self.episodes_done,
            policy: self.policy.clone(),
            adam: self.adam.clone(),
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            baseline,
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self, PolicyError> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "version {} not supported (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        let n = PolicyParams::param_count(cp.policy.n_in, cp.policy.n_hidden, cp.policy.n_out);
        if cp.policy.theta.len() != n || cp.adam.m.len() != n || cp.adam.v.len() != n {
            return Err(PolicyError::Checkpoint("parameter and moment sizes disagree".into()));
        }
        let word_pos: u128 =
            cp.rng.word_pos.parse().map_err(|e| PolicyError::Checkpoint(format!("rng.word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(cp.rng.seed);
        rng.set_stream(cp.rng.stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            config: cp.config.clone(),
            policy: cp.policy.clone(),
            adam: cp.adam.clone(),
            rng,
            seed: cp.seed,
            episodes_done: cp.episodes_done,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal, since JSON numbers cannot carry 128 bits.
    pub word_pos: String,
}

/// Everything needed to resume training bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: AgentConfig,
    pub seed: u64,
    pub episodes_done: usize,
    pub policy: PolicyParams,
    pub adam: AdamState,
    pub rng: RngState,
    pub baseline: Option<BaselineTrace>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PolicyError::Checkpoint(e.to_string()))
    }
}

/// Fresh agent seeded with `seed`, trained for `n_episodes` on `env`.
pub fn train(
    env: &mut dyn EnvHandle,
    n_episodes: usize,
    seed: u64,
    config: AgentConfig,
) -> Result<(Agent, TrainReport), PolicyError> {
    let spec = env.spec();
    let mut agent = Agent::new(config, spec.obs_size, spec.n_actions, seed);
    let report = agent.train(env, n_episodes, |_, _| {})?;
    Ok((agent, report))
}
