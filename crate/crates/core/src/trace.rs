//! Per-episode records and their CSV form
//! (`episode,step,reward,norm_c,norm_kappa,a0..a{n-1}`).
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! trace read back is bit-identical to the one written. An aborted episode
//! ends with a row whose reward is `-inf` and whose norms are `NaN`.

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::env::Observation;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub reward: f64,
    pub norm_c: f64,
    pub norm_kappa: f64,
    /// RL-space action, before scaling.
    pub action: Vec<f64>,
}

impl StepRecord {
    pub fn from_observation(obs: &Observation) -> Self {
        Self {
            step: obs.step,
            reward: obs.reward,
            norm_c: obs.norm_c,
            norm_kappa: obs.norm_kappa,
            action: obs.action.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub steps: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn new(episode: usize) -> Self {
        Self { episode, steps: Vec::new() }
    }

    pub fn push(&mut self, obs: &Observation) {
        self.steps.push(StepRecord::from_observation(obs));
    }

    /// Appends the sentinel row for an episode cut short by a solver failure.
    pub fn mark_aborted(&mut self, action: &[f64]) {
        let step = self.steps.last().map_or(0, |s| s.step + 1);
        self.steps.push(StepRecord {
            step,
            reward: f64::NEG_INFINITY,
            norm_c: f64::NAN,
            norm_kappa: f64::NAN,
            action: action.to_vec(),
        });
    }

    pub fn aborted(&self) -> bool {
        self.steps.last().is_some_and(|s| s.reward == f64::NEG_INFINITY)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn mean_reward(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.reward))
    }

    pub fn mean_norm_c(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.norm_c))
    }

    pub fn mean_norm_kappa(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.norm_kappa))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return f64::NAN;
    }
    it.sum::<f64>() / n as f64
}

pub fn write_csv(mut out: impl Write, traces: &[EpisodeTrace]) -> std::io::Result<()> {
    let n_actions = traces.iter().flat_map(|t| &t.steps).map(|s| s.action.len()).max().unwrap_or(0);
    write!(out, "episode,step,reward,norm_c,norm_kappa")?;
    for k in 0..n_actions {
        write!(out, ",a{k}")?;
    }
    writeln!(out)?;
    for t in traces {
        for s in &t.steps {
            write!(out, "{},{},{},{},{}", t.episode, s.step, s.reward, s.norm_c, s.norm_kappa)?;
            for a in &s.action {
                write!(out, ",{a}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn read_csv(input: impl BufRead) -> Result<Vec<EpisodeTrace>, TraceError> {
    let mut lines = input.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l?,
        None => return Ok(Vec::new()),
    };
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 5 || cols[..5] != ["episode", "step", "reward", "norm_c", "norm_kappa"] {
        return Err(TraceError::Parse { line: 1, msg: format!("unexpected header `{header}`") });
    }
    let n_actions = cols.len() - 5;
    let mut traces: Vec<EpisodeTrace> = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| TraceError::Parse { line: lineno, msg };
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 5 + n_actions {
            return Err(err(format!("expected {} fields, got {}", 5 + n_actions, fields.len())));
        }
        let int = |k: usize| fields[k].parse::<usize>().map_err(|e| err(format!("{}: {e}", cols[k])));
        let float = |k: usize| fields[k].parse::<f64>().map_err(|e| err(format!("{}: {e}", cols[k])));
        let episode = int(0)?;
        let record = StepRecord {
            step: int(1)?,
            reward: float(2)?,
            norm_c: float(3)?,
            norm_kappa: float(4)?,
            action: (5..fields.len()).map(float).collect::<Result<_, _>>()?,
        };
        match traces.last_mut() {
            Some(t) if t.episode == episode => t.steps.push(record),
            _ => traces.push(EpisodeTrace { episode, steps: vec![record] }),
        }
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<EpisodeTrace> {
        let mut a = EpisodeTrace::new(0);
        for step in 0..3 {
            a.steps.push(StepRecord {
                step,
                reward: 0.1 * step as f64 + 1.0 / 3.0,
                norm_c: std::f64::consts::PI / (step + 1) as f64,
                norm_kappa: 1e-300 * step as f64,
                action: vec![-1.0, 0.123456789012345678, 1.0],
            });
        }
        let mut b = EpisodeTrace::new(1);
        b.steps.push(a.steps[0].clone());
        b.mark_aborted(&[0.5, 0.5, 0.5]);
        vec![a, b]
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let traces = sample();
        let mut buf = Vec::new();
        write_csv(&mut buf, &traces).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("episode,step,reward,norm_c,norm_kappa,a0,a1,a2\n"));
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], traces[0]);
        assert!(back[1].aborted());
        assert!(!back[0].aborted());
        assert!(back[1].steps[1].norm_c.is_nan());
        assert_eq!(back[1].steps[1].step, 1);
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let text = "episode,step,reward,norm_c,norm_kappa,a0\n0,0,1,1,1,0\n0,1,x,1,1,0\n";
        match read_csv(text.as_bytes()) {
            Err(TraceError::Parse { line: 3, msg }) => assert!(msg.contains("reward")),
            other => panic!("{other:?}"),
        }
        assert!(read_csv("step,episode\n".as_bytes()).is_err());
        assert!(read_csv("episode,step,reward,norm_c,norm_kappa\n0,0,1,1\n".as_bytes()).is_err());
    }

    #[test]
    fn means() {
        let t = &sample()[0];
        assert!((t.mean_reward() - (1.0 / 3.0 + 0.1)).abs() < 1e-15);
        assert!(EpisodeTrace::new(4).mean_reward().is_nan());
    }
}
