//! Test-time scaling over abstract generators and scorers: Best-of-N,
//! majority voting and step-level beam search.
//!
//! Every step draws from its own ChaCha8 stream whose seed is derived from the
//! run seed and the step's position (sample, round, parent, expansion). The
//! seed is recorded in [`SearchState::lineage`], so results do not depend on
//! how samples are scheduled across threads.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

mod sweep;
mod toy;

pub use sweep::{run_scaling_sweep, wilson_interval, Method, SweepConfig, SweepRow, SweepTable};
pub use toy::{NoisyPrm, OracleVerifier, ToyTask, ToyTree, TreeScorer, FLAWED, SOUND};

pub type Token = u32;
pub type Answer = u32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("generator failed: {0}")]
pub struct GenError(pub String);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TtsError {
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("beam width and expansions must be at least 1 (m={m}, e={e})")]
    BeamShape { m: usize, e: usize },
    #[error("{source} ({} partial states)", partial.len())]
    Generator {
        source: GenError,
        partial: Vec<SearchState>,
    },
    #[error("sample {0} did not terminate within {1} steps")]
    NoTerminal(usize, usize),
    #[error("budget list is empty")]
    EmptyBudgets,
    #[error("invalid task: {0}")]
    InvalidTask(String),
}

/// Randomness and position handed to one generator step.
pub struct StepContext<'a> {
    pub sample_index: usize,
    pub expansion_index: usize,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub token: Token,
    pub terminal: bool,
}

/// Produces one step at a time. What a step means is up to the implementor.
pub trait Generator: Sync {
    fn step(&self, prefix: &[Token], ctx: &mut StepContext<'_>) -> Result<Step, GenError>;

    /// Answer carried by a completed sequence.
    fn answer(&self, steps: &[Token]) -> Answer;
}

/// Outcome (ORM) and step (PRM) scores. Must be pure.
pub trait Scorer: Sync {
    fn score_outcome(&self, steps: &[Token]) -> f64;
    fn score_step(&self, steps: &[Token]) -> f64;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub steps: Vec<Token>,
    /// Step score after each step; same length as `steps` when step-scored.
    pub step_scores: Vec<f64>,
    pub terminal: bool,
    /// Seed of the stream that produced each step.
    pub lineage: Vec<u64>,
}

impl SearchState {
    fn push(&self, step: Step, seed: u64, score: Option<f64>) -> Self {
        let mut next = self.clone();
        next.steps.push(step.token);
        next.lineage.push(seed);
        if let Some(s) = score {
            next.step_scores.push(s);
        }
        next.terminal = step.terminal;
        next
    }
}

/// Deterministic child seed: each salt word selects a ChaCha stream.
pub fn derive_seed(parent: u64, salt: &[u64]) -> u64 {
    salt.iter().fold(parent, |acc, &s| {
        let mut rng = ChaCha8Rng::seed_from_u64(acc);
        rng.set_stream(s);
        rng.next_u64()
    })
}

fn run_step<G: Generator>(
    gen: &G,
    state: &SearchState,
    seed: u64,
    sample_index: usize,
    expansion_index: usize,
) -> Result<Step, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = StepContext {
        sample_index,
        expansion_index,
        rng: &mut rng,
    };
    gen.step(&state.steps, &mut ctx)
}

/// One complete sample. Sample `i` of a batch seeded with `seed` is
/// `generate(gen, seed, i, max_steps)`.
pub fn generate<G: Generator>(
    gen: &G,
    seed: u64,
    sample_index: usize,
    max_steps: usize,
) -> Result<SearchState, TtsError> {
    let sample_seed = derive_seed(seed, &[sample_index as u64]);
    let mut state = SearchState::default();
    for t in 0..max_steps {
        let step_seed = derive_seed(sample_seed, &[t as u64]);
        let step = run_step(gen, &state, step_seed, sample_index, 0).map_err(|source| TtsError::Generator {
            source,
            partial: vec![state.clone()],
        })?;
        state = state.push(step, step_seed, None);
        if state.terminal {
            return Ok(state);
        }
    }
    Err(TtsError::NoTerminal(sample_index, max_steps))
}

fn generate_batch<G: Generator>(gen: &G, n: usize, seed: u64, max_steps: usize) -> Result<Vec<SearchState>, TtsError> {
    let results: Vec<Result<SearchState, TtsError>> = (0..n)
        .into_par_iter()
        .map(|i| generate(gen, seed, i, max_steps))
        .collect();
    let mut samples = Vec::with_capacity(n);
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(TtsError::Generator { source, partial }) => {
                samples.extend(partial);
                return Err(TtsError::Generator {
                    source,
                    partial: samples,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestOfNResult {
    pub answer: Answer,
    pub chosen: usize,
    pub scores: Vec<f64>,
    pub samples: Vec<SearchState>,
}

/// Index of the maximum; ties go to the lowest index.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.total_cmp(&scores[best]) == Ordering::Greater {
            best = i;
        }
    }
    best
}

/// Generate `n` independent samples and return the answer of the one with the
/// highest outcome score (lowest index on ties).
pub fn best_of_n<G: Generator, S: Scorer>(
    gen: &G,
    scorer: &S,
    n: usize,
    seed: u64,
    max_steps: usize,
) -> Result<BestOfNResult, TtsError> {
    if n == 0 {
        return Err(TtsError::ZeroBudget);
    }
    let samples = generate_batch(gen, n, seed, max_steps)?;
    let scores: Vec<f64> = samples.iter().map(|s| scorer.score_outcome(&s.steps)).collect();
    let chosen = argmax(&scores);
    Ok(BestOfNResult {
        answer: gen.answer(&samples[chosen].steps),
        chosen,
        scores,
        samples,
    })
}

/// Most frequent answer; ties go to the answer seen first.
pub fn vote(answers: &[Answer]) -> Option<Answer> {
    let mut counts: HashMap<Answer, (usize, usize)> = HashMap::new();
    for (i, &a) in answers.iter().enumerate() {
        counts.entry(a).or_insert((0, i)).0 += 1;
    }
    counts
        .into_iter()
        .max_by(|(_, (ca, fa)), (_, (cb, fb))| ca.cmp(cb).then(fb.cmp(fa)))
        .map(|(a, _)| a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub answer: Answer,
    pub answers: Vec<Answer>,
}

pub fn majority_vote<G: Generator>(gen: &G, n: usize, seed: u64, max_steps: usize) -> Result<VoteResult, TtsError> {
    if n == 0 {
        return Err(TtsError::ZeroBudget);
    }
    let samples = generate_batch(gen, n, seed, max_steps)?;
    let answers: Vec<Answer> = samples.iter().map(|s| gen.answer(&s.steps)).collect();
    let answer = vote(&answers).expect("n >= 1");
    Ok(VoteResult { answer, answers })
}

/// How per-step scores combine into a beam's ranking score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Min,
    Last,
}

impl Aggregation {
    pub fn apply(self, scores: &[f64]) -> f64 {
        match self {
            Aggregation::Sum => scores.iter().sum(),
            Aggregation::Min => scores.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregation::Last => scores.last().copied().unwrap_or(f64::NEG_INFINITY),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub expansions: usize,
    pub max_steps: usize,
    pub aggregation: Aggregation,
    /// Drop candidates whose step sequence equals an earlier candidate's.
    pub dedup: bool,
}

impl BeamConfig {
    pub fn new(width: usize, expansions: usize, max_steps: usize) -> Self {
        Self {
            width,
            expansions,
            max_steps,
            aggregation: Aggregation::Sum,
            dedup: true,
        }
    }

    pub fn aggregation(mut self, aggregation: Aggregation) -> Self {
        self.aggregation = aggregation;
        self
    }

    pub fn dedup(mut self, dedup: bool) -> Self {
        self.dedup = dedup;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamCandidate {
    pub parent: usize,
    pub expansion: usize,
    pub score: f64,
    pub state: SearchState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamRound {
    /// Number of generator calls this round.
    pub batch: usize,
    /// Beams kept after selection, best first.
    pub frontier: Vec<BeamCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    pub answer: Answer,
    pub best: SearchState,
    pub score: f64,
    /// No beam reached a terminal step; `best` is the top partial.
    pub truncated: bool,
    pub rounds: Vec<BeamRound>,
}

/// Step-level beam search.
///
/// Round 0 expands the empty root `m * e` times; later rounds expand every
/// live beam `e` times. Candidates are ranked by aggregated step score, ties
/// broken by (parent index, expansion index). Terminal beams are carried over
/// unchanged and still occupy one of the `m` slots.
pub fn beam_search<G: Generator, S: Scorer>(
    gen: &G,
    scorer: &S,
    cfg: &BeamConfig,
    seed: u64,
) -> Result<BeamResult, TtsError> {
    let (m, e) = (cfg.width, cfg.expansions);
    if m == 0 || e == 0 {
        return Err(TtsError::BeamShape { m, e });
    }
    let mut beams = vec![BeamCandidate {
        parent: 0,
        expansion: 0,
        score: f64::NEG_INFINITY,
        state: SearchState::default(),
    }];
    let mut rounds = Vec::new();
    for round in 0..cfg.max_steps {
        if beams.iter().all(|b| b.state.terminal) {
            break;
        }
        let fan = if round == 0 { m * e } else { e };
        let jobs: Vec<(usize, usize)> = beams
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.state.terminal)
            .flat_map(|(p, _)| (0..fan).map(move |x| (p, x)))
            .collect();
        let expanded: Vec<Result<BeamCandidate, GenError>> = jobs
            .par_iter()
            .map(|&(p, x)| {
                let parent = &beams[p].state;
                let step_seed = derive_seed(seed, &[round as u64, p as u64, x as u64]);
                let step = run_step(gen, parent, step_seed, p, x)?;
                let mut steps = parent.steps.clone();
                steps.push(step.token);
                let step_score = scorer.score_step(&steps);
                let state = parent.push(step, step_seed, Some(step_score));
                Ok(BeamCandidate {
                    parent: p,
                    expansion: x,
                    score: cfg.aggregation.apply(&state.step_scores),
                    state,
                })
            })
            .collect();

        let mut candidates = Vec::with_capacity(expanded.len() + beams.len());
        let mut expanded = expanded.into_iter();
        for (p, beam) in beams.iter().enumerate() {
            if beam.state.terminal {
                candidates.push(BeamCandidate {
                    parent: p,
                    expansion: 0,
                    ..beam.clone()
                });
                continue;
            }
            for _ in 0..fan {
                match expanded.next().expect("one result per job") {
                    Ok(c) => candidates.push(c),
                    Err(source) => {
                        return Err(TtsError::Generator {
                            source,
                            partial: beams.into_iter().map(|b| b.state).collect(),
                        })
                    }
                }
            }
        }
        if cfg.dedup {
            let mut seen = HashSet::new();
            candidates.retain(|c| seen.insert(c.state.steps.clone()));
        }
        // Stable sort keeps (parent, expansion) order among equal scores.
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
        candidates.truncate(m);
        rounds.push(BeamRound {
            batch: jobs.len(),
            frontier: candidates.clone(),
        });
        beams = candidates;
    }

    let pick = |terminal_only: bool| {
        beams
            .iter()
            .filter(|b| !terminal_only || b.state.terminal)
            .fold(None::<&BeamCandidate>, |best, b| match best {
                Some(x) if x.score.total_cmp(&b.score) != Ordering::Less => Some(x),
                _ => Some(b),
            })
    };
    let (best, truncated) = match pick(true) {
        Some(b) => (b, false),
        None => (pick(false).expect("at least one beam"), true),
    };
    Ok(BeamResult {
        answer: gen.answer(&best.state.steps),
        best: best.state.clone(),
        score: best.score,
        truncated,
        rounds,
    })
}
