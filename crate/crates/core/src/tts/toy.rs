//! Synthetic tasks with closed-form or brute-forceable behaviour.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{derive_seed, Answer, GenError, Generator, Scorer, Step, StepContext, Token, TtsError};

/// Reasoning-step token for a step that kept the derivation correct.
pub const SOUND: Token = 1;
/// Reasoning-step token for a step that broke it.
pub const FLAWED: Token = 0;

/// `k` reasoning steps followed by one answer step.
///
/// Each step survives with probability `p^(1/k)` while the path is still
/// sound, so a sample ends sound with probability `p`. A sound path answers
/// `correct`; a broken one draws a distractor. With an oracle verifier,
/// Best-of-N accuracy is exactly `1 - (1 - p)^N`.
#[derive(Debug, Clone)]
pub struct ToyTask {
    correct: Answer,
    p: f64,
    steps: usize,
    distractors: Vec<Answer>,
    weights: Vec<f64>,
    pick: WeightedIndex<f64>,
}

impl ToyTask {
    pub fn new(correct: Answer, p: f64, steps: usize, distractors: &[(Answer, f64)]) -> Result<Self, TtsError> {
        let invalid = |msg: String| Err(TtsError::InvalidTask(msg));
        if !(0.0..=1.0).contains(&p) {
            return invalid(format!("p = {p} outside [0, 1]"));
        }
        if steps == 0 {
            return invalid("at least one reasoning step is required".into());
        }
        if distractors.iter().any(|(a, _)| *a == correct) {
            return invalid(format!("distractor equals the correct answer {correct}"));
        }
        let weights: Vec<f64> = distractors.iter().map(|(_, w)| *w).collect();
        let pick = WeightedIndex::new(&weights).map_err(|e| TtsError::InvalidTask(format!("distractor weights: {e}")))?;
        Ok(Self {
            correct,
            p,
            steps,
            distractors: distractors.iter().map(|(a, _)| *a).collect(),
            weights,
            pick,
        })
    }

    /// `p` with `distractor_count` equally likely wrong answers `1..`.
    pub fn uniform(p: f64, steps: usize, distractor_count: usize) -> Result<Self, TtsError> {
        let d: Vec<(Answer, f64)> = (1..=distractor_count as Answer).map(|a| (a, 1.0)).collect();
        Self::new(0, p, steps, &d)
    }

    pub fn correct(&self) -> Answer {
        self.correct
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn reasoning_steps(&self) -> usize {
        self.steps
    }

    /// Probability of each answer for a single sample, correct answer first.
    pub fn answer_distribution(&self) -> Vec<(Answer, f64)> {
        let total: f64 = self.weights.iter().sum();
        std::iter::once((self.correct, self.p))
            .chain(
                self.distractors
                    .iter()
                    .zip(&self.weights)
                    .map(|(&a, &w)| (a, (1.0 - self.p) * w / total)),
            )
            .collect()
    }

    pub fn is_sound(&self, steps: &[Token]) -> bool {
        steps.iter().take(self.steps).all(|&t| t == SOUND)
    }

    pub fn oracle(&self) -> OracleVerifier {
        OracleVerifier {
            correct: self.correct,
            steps: self.steps,
        }
    }
}

impl Generator for ToyTask {
    fn step(&self, prefix: &[Token], ctx: &mut StepContext<'_>) -> Result<Step, GenError> {
        let t = prefix.len();
        if t < self.steps {
            let survive = self.p.powf(1.0 / self.steps as f64);
            let sound = prefix.last().is_none_or(|&s| s == SOUND) && ctx.rng.random::<f64>() < survive;
            Ok(Step {
                token: if sound { SOUND } else { FLAWED },
                terminal: false,
            })
        } else if t == self.steps {
            let token = if self.is_sound(prefix) {
                self.correct
            } else {
                self.distractors[self.pick.sample(ctx.rng)]
            };
            Ok(Step { token, terminal: true })
        } else {
            Err(GenError(format!("sequence already complete at {t} steps")))
        }
    }

    fn answer(&self, steps: &[Token]) -> Answer {
        match steps.get(self.steps) {
            Some(&a) => a,
            None => Answer::MAX,
        }
    }
}

/// Scores 1 for the correct answer (outcome) or a still-sound prefix (step),
/// 0 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleVerifier {
    correct: Answer,
    steps: usize,
}

impl Scorer for OracleVerifier {
    fn score_outcome(&self, steps: &[Token]) -> f64 {
        (steps.get(self.steps) == Some(&self.correct)) as u8 as f64
    }

    fn score_step(&self, steps: &[Token]) -> f64 {
        if steps.len() > self.steps {
            return self.score_outcome(steps);
        }
        steps.iter().all(|&t| t == SOUND) as u8 as f64
    }
}

/// Oracle step score plus seeded Gaussian noise keyed on the sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyPrm {
    oracle: OracleVerifier,
    sigma: f64,
    seed: u64,
}

impl NoisyPrm {
    pub fn new(task: &ToyTask, sigma: f64, seed: u64) -> Self {
        Self {
            oracle: task.oracle(),
            sigma,
            seed,
        }
    }

    fn noise(&self, steps: &[Token]) -> f64 {
        let salt: Vec<u64> = std::iter::once(steps.len() as u64)
            .chain(steps.iter().map(|&t| t as u64))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &salt));
        let z: f64 = StandardNormal.sample(&mut rng);
        self.sigma * z
    }
}

impl Scorer for NoisyPrm {
    fn score_outcome(&self, steps: &[Token]) -> f64 {
        self.oracle.score_outcome(steps) + self.noise(steps)
    }

    fn score_step(&self, steps: &[Token]) -> f64 {
        self.oracle.score_step(steps) + self.noise(steps)
    }
}

/// Complete tree of fixed depth and branching with a value on every node.
///
/// As a generator, the child taken is `expansion_index mod branching`, so a
/// beam that expands `e <= branching` times visits children `0..e`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTree {
    depth: usize,
    branching: usize,
    /// Node values level by level; level `l` holds `branching^(l+1)` nodes.
    values: Vec<f64>,
}

impl ToyTree {
    /// Uniform `[0, 1)` node values from `seed`.
    pub fn random(depth: usize, branching: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: usize = (1..=depth).map(|l| branching.pow(l as u32)).sum();
        let values = (0..total).map(|_| rng.random::<f64>()).collect();
        Self {
            depth,
            branching,
            values,
        }
    }

    /// The 3-level, branching-3 tree used by the acceptance suite.
    pub fn fixed() -> Self {
        Self::random(3, 3, 0x7EE5)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    /// Value of the node reached by `path` (non-empty, within depth).
    pub fn value(&self, path: &[Token]) -> f64 {
        assert!(!path.is_empty() && path.len() <= self.depth, "path length {}", path.len());
        let offset: usize = (1..path.len()).map(|l| self.branching.pow(l as u32)).sum();
        self.values[offset + self.encode(path)]
    }

    pub fn path_value(&self, path: &[Token]) -> f64 {
        (1..=path.len()).map(|l| self.value(&path[..l])).sum()
    }

    fn encode(&self, path: &[Token]) -> usize {
        path.iter().fold(0, |acc, &c| acc * self.branching + c as usize)
    }
}

impl Generator for ToyTree {
    fn step(&self, prefix: &[Token], ctx: &mut StepContext<'_>) -> Result<Step, GenError> {
        if prefix.len() >= self.depth {
            return Err(GenError("step below a leaf".into()));
        }
        Ok(Step {
            token: (ctx.expansion_index % self.branching) as Token,
            terminal: prefix.len() + 1 == self.depth,
        })
    }

    fn answer(&self, steps: &[Token]) -> Answer {
        self.encode(steps) as Answer
    }
}

/// Step score = node value; outcome score = path sum.
#[derive(Debug, Clone, Copy)]
pub struct TreeScorer<'a>(pub &'a ToyTree);

impl Scorer for TreeScorer<'_> {
    fn score_outcome(&self, steps: &[Token]) -> f64 {
        self.0.path_value(steps)
    }

    fn score_step(&self, steps: &[Token]) -> f64 {
        self.0.value(steps)
    }
}
