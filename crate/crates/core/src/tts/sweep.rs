//! Accuracy-versus-budget sweeps.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{beam_search, best_of_n, derive_seed, majority_vote, Aggregation, Answer, BeamConfig, Generator, Scorer, TtsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BestOfN,
    MajorityVote,
    Beam(Aggregation),
}

impl Method {
    /// Beam shape used for budget `n`: `e = min(n, 4)`, `m = max(1, n / e)`.
    pub fn beam_shape(n: usize) -> (usize, usize) {
        let e = n.clamp(1, 4);
        ((n / e).max(1), e)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::BestOfN => "bon",
            Method::MajorityVote => "vote",
            Method::Beam(_) => "beam",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bon" => Ok(Method::BestOfN),
            "vote" => Ok(Method::MajorityVote),
            "beam" => Ok(Method::Beam(Aggregation::Sum)),
            other => Err(format!("unknown method `{other}` (expected bon, vote or beam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub budgets: Vec<usize>,
    /// Independent trials per budget.
    pub trials: usize,
    pub seed: u64,
    /// Two-sided confidence level of the reported interval.
    pub confidence: f64,
    pub max_steps: usize,
}

impl SweepConfig {
    pub fn new(budgets: Vec<usize>, trials: usize, seed: u64) -> Self {
        Self {
            budgets,
            trials,
            seed,
            confidence: 0.99,
            max_steps: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub budget: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

/// Wilson score interval for `successes / n` at the given two-sided level.
pub fn wilson_interval(successes: usize, n: usize, confidence: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = Normal::standard().inverse_cdf(0.5 + confidence / 2.0);
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let center = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Accuracy of `method` at every budget.
///
/// Trial `t` uses the same seed at every budget, so for Best-of-N a larger
/// budget sees a superset of the samples of a smaller one.
pub fn run_scaling_sweep<G, S, C>(
    gen: &G,
    scorer: &S,
    method: Method,
    cfg: &SweepConfig,
    is_correct: C,
) -> Result<SweepTable, TtsError>
where
    G: Generator,
    S: Scorer,
    C: Fn(Answer) -> bool + Sync,
{
    if cfg.budgets.is_empty() {
        return Err(TtsError::EmptyBudgets);
    }
    let mut rows = Vec::with_capacity(cfg.budgets.len());
    for &n in &cfg.budgets {
        let outcomes: Vec<Result<bool, TtsError>> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let seed = derive_seed(cfg.seed, &[t as u64]);
                let answer = match method {
                    Method::BestOfN => best_of_n(gen, scorer, n, seed, cfg.max_steps)?.answer,
                    Method::MajorityVote => majority_vote(gen, n, seed, cfg.max_steps)?.answer,
                    Method::Beam(aggregation) => {
                        let (m, e) = Method::beam_shape(n);
                        let beam = BeamConfig::new(m, e, cfg.max_steps).aggregation(aggregation);
                        beam_search(gen, scorer, &beam, seed)?.answer
                    }
                };
                Ok(is_correct(answer))
            })
            .collect();
        let mut correct = 0;
        for o in outcomes {
            correct += o? as usize;
        }
        let (ci_low, ci_high) = wilson_interval(correct, cfg.trials, cfg.confidence);
        rows.push(SweepRow {
            method: method.to_string(),
            budget: n,
            accuracy: if cfg.trials == 0 {
                0.0
            } else {
                correct as f64 / cfg.trials as f64
            },
            ci_low,
            ci_high,
            seeds: cfg.trials,
        });
    }
    Ok(SweepTable { rows })
}
