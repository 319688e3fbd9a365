//! Before/after tables and decile statistics over episode traces.

use std::fmt::Write as _;
use std::io::Write;

use rdc_core::env::BaselineTrace;
use rdc_core::trace::EpisodeTrace;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("{0} trace has no complete episodes")]
    Empty(&'static str),
    #[error("{side} episode {episode} has {found} steps, expected {expected}")]
    Length { side: &'static str, episode: usize, expected: usize, found: usize },
}

/// Number of episodes in a 10% window (at least one).
pub fn decile(n: usize) -> usize {
    (n / 10).max(1)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Completed episodes among the last 10% of `traces`.
fn final_window(traces: &[EpisodeTrace]) -> Vec<&EpisodeTrace> {
    traces[traces.len() - decile(traces.len()).min(traces.len())..].iter().filter(|t| !t.aborted()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub before: [f64; 3],
    pub after: [f64; 3],
}

impl StepRow {
    pub fn delta(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.after[i] - self.before[i])
    }
}

/// Per-step means of (reward, ‖c‖, ‖κ‖) over the final 10% of each side.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<StepRow>,
    pub before_episodes: usize,
    pub after_episodes: usize,
}

fn step_means(side: &'static str, window: &[&EpisodeTrace], len: usize) -> Result<Vec<[f64; 3]>, CompareError> {
    if let Some(t) = window.iter().find(|t| t.steps.len() != len) {
        return Err(CompareError::Length { side, episode: t.episode, expected: len, found: t.steps.len() });
    }
    Ok((0..len)
        .map(|i| {
            let at = |f: fn(&rdc_core::trace::StepRecord) -> f64| mean(window.iter().map(|t| f(&t.steps[i])));
            [at(|s| s.reward), at(|s| s.norm_c), at(|s| s.norm_kappa)]
        })
        .collect())
}

pub fn compare(before: &[EpisodeTrace], after: &[EpisodeTrace]) -> Result<Comparison, CompareError> {
    let b = final_window(before);
    let a = final_window(after);
    let len = b.first().ok_or(CompareError::Empty("before"))?.steps.len();
    if a.is_empty() {
        return Err(CompareError::Empty("after"));
    }
    let bm = step_means("before", &b, len)?;
    let am = step_means("after", &a, len)?;
    let rows = bm.into_iter().zip(am).enumerate().map(|(step, (before, after))| StepRow { step, before, after }).collect();
    Ok(Comparison { rows, before_episodes: b.len(), after_episodes: a.len() })
}

impl Comparison {
    /// Means over all steps of (reward, ‖c‖, ‖κ‖).
    pub fn totals(&self) -> ([f64; 3], [f64; 3]) {
        let col = |f: fn(&StepRow) -> [f64; 3], i: usize| mean(self.rows.iter().map(|r| f(r)[i]));
        ([0, 1, 2].map(|i| col(|r| r.before, i)), [0, 1, 2].map(|i| col(|r| r.after, i)))
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "step,reward_before,reward_after,reward_delta,norm_c_before,norm_c_after,norm_c_delta,norm_kappa_before,norm_kappa_after,norm_kappa_delta"
        )?;
        for r in &self.rows {
            let d = r.delta();
            write!(out, "{}", r.step)?;
            for i in 0..3 {
                write!(out, ",{},{},{}", r.before[i], r.after[i], d[i])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (b, a) = self.totals();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "before: final {} episode(s); after: final {} episode(s)\n",
            self.before_episodes, self.after_episodes
        );
        let _ = writeln!(s, "{:<10} {:>14} {:>14} {:>14}", "mean", "before", "after", "delta");
        for (i, name) in ["reward", "norm_c", "norm_kappa"].iter().enumerate() {
            let _ = writeln!(s, "{name:<10} {:>14.6e} {:>14.6e} {:>+14.6e}", b[i], a[i], a[i] - b[i]);
        }
        let _ = writeln!(s, "\n{:>5} {:>14} {:>14} {:>14}", "step", "d_reward", "d_norm_c", "d_norm_kappa");
        for r in &self.rows {
            let d = r.delta();
            let _ = writeln!(s, "{:>5} {:>+14.6e} {:>+14.6e} {:>+14.6e}", r.step, d[0], d[1], d[2]);
        }
        s
    }
}

/// First- and last-decile statistics of one training run against its baseline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub episodes: usize,
    pub aborted: usize,
    pub window: usize,
    pub reward_first: f64,
    pub reward_last: f64,
    pub norm_c_last: f64,
    pub norm_kappa_last: f64,
    pub norm_c_baseline: f64,
    pub norm_kappa_baseline: f64,
}

impl Summary {
    pub const CSV_HEADER: &'static str = "seed,episodes,aborted,window,reward_first,reward_last,norm_c_last,norm_kappa_last,norm_c_baseline,norm_kappa_baseline,norm_c_ratio";

    pub fn new(baseline: &BaselineTrace, traces: &[EpisodeTrace]) -> Option<Self> {
        if traces.is_empty() {
            return None;
        }
        let w = decile(traces.len());
        let ok = |ts: &[EpisodeTrace]| ts.iter().filter(|t| !t.aborted()).cloned().collect::<Vec<_>>();
        let (first, last) = (ok(&traces[..w]), ok(&traces[traces.len() - w..]));
        if first.is_empty() || last.is_empty() {
            return None;
        }
        Some(Self {
            episodes: traces.len(),
            aborted: traces.iter().filter(|t| t.aborted()).count(),
            window: w,
            reward_first: mean(first.iter().map(EpisodeTrace::mean_reward)),
            reward_last: mean(last.iter().map(EpisodeTrace::mean_reward)),
            norm_c_last: mean(last.iter().map(EpisodeTrace::mean_norm_c)),
            norm_kappa_last: mean(last.iter().map(EpisodeTrace::mean_norm_kappa)),
            norm_c_baseline: mean(baseline.norm_c_bef.iter().copied()),
            norm_kappa_baseline: mean(baseline.norm_kappa_bef.iter().copied()),
        })
    }

    pub fn norm_c_ratio(&self) -> f64 {
        self.norm_c_last / self.norm_c_baseline
    }

    pub fn csv_row(&self, seed: &str) -> String {
        format!(
            "{seed},{},{},{},{},{},{},{},{},{},{}",
            self.episodes,
            self.aborted,
            self.window,
            self.reward_first,
            self.reward_last,
            self.norm_c_last,
            self.norm_kappa_last,
            self.norm_c_baseline,
            self.norm_kappa_baseline,
            self.norm_c_ratio()
        )
    }
}
