//! Synthetic verifiable-reward tasks: prompt distributions with a
//! deterministic ground-truth answer function and exact-match reward.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ToylabError;

/// Which synthetic task to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Prompt `[BOS, x, EQ]`, answer repeats `x` for `answer_len` tokens.
    Copy,
    /// Prompt `[BOS, a, PLUS, b, EQ]`, answer = base-`modulus` digits of
    /// `(a + b) mod modulus^answer_len`, most significant first.
    ModSum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Number of digit tokens; digits occupy token ids `0..modulus`.
    pub modulus: usize,
    pub answer_len: usize,
    /// Seeds the canonical test-set split.
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { kind: TaskKind::ModSum, modulus: 16, answer_len: 1, seed: 17 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

/// A synthetic task: the uniform prompt distribution over all patterns, a
/// canonical test slice, and the training pool (everything else) from which
/// validation examples may be drawn. Training batches sample the full
/// distribution; the test slice and the training pool are disjoint as sets
/// so validation sets can be kept disjoint from the test slice.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    cfg: TaskConfig,
    patterns: Vec<Pattern>,
    test_idx: Vec<usize>,
    pool_idx: Vec<usize>,
}

impl SyntheticTask {
    pub fn new(cfg: TaskConfig) -> Result<Self, ToylabError> {
        if cfg.modulus < 2 {
            return Err(ToylabError::BadConfig("modulus must be at least 2".into()));
        }
        if cfg.answer_len == 0 {
            return Err(ToylabError::BadConfig("answer_len must be at least 1".into()));
        }
        let m = cfg.modulus;
        let space: usize = m.checked_pow(cfg.answer_len as u32).ok_or_else(|| {
            ToylabError::BadConfig("modulus^answer_len overflows".into())
        })?;
        let mut patterns = Vec::new();
        match cfg.kind {
            TaskKind::Copy => {
                for x in 0..m {
                    patterns.push(Pattern {
                        prompt: vec![tok_bos(m), x, tok_eq(m)],
                        answer: vec![x; cfg.answer_len],
                    });
                }
            }
            TaskKind::ModSum => {
                for a in 0..m {
                    for b in 0..m {
                        let value = (a + b) % space;
                        patterns.push(Pattern {
                            prompt: vec![tok_bos(m), a, tok_plus(m), b, tok_eq(m)],
                            answer: digits(value, m, cfg.answer_len),
                        });
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..patterns.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5_5A5A_0F0F_F0F0);
        order.shuffle(&mut rng);
        let n_test = (patterns.len() / 4).max(1);
        let test_idx: Vec<usize> = order[..n_test].to_vec();
        let pool_idx: Vec<usize> = order[n_test..].to_vec();
        Ok(Self { cfg, patterns, test_idx, pool_idx })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn modulus(&self) -> usize {
        self.cfg.modulus
    }

    pub fn answer_len(&self) -> usize {
        self.cfg.answer_len
    }

    /// Smallest vocabulary a policy needs for this task: digits plus the
    /// three marker tokens.
    pub fn min_vocab(&self) -> usize {
        self.cfg.modulus + 3
    }

    /// Longest sequence a policy must handle: prompt plus the full answer.
    pub fn max_seq_len(&self) -> usize {
        let prompt_len = match self.cfg.kind {
            TaskKind::Copy => 3,
            TaskKind::ModSum => 5,
        };
        prompt_len + self.cfg.answer_len
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    /// Canonical held-out slice used for accuracy reporting.
    pub fn test_prompts(&self) -> Vec<Vec<usize>> {
        self.test_idx.iter().map(|&i| self.patterns[i].prompt.clone()).collect()
    }

    /// Patterns outside the test slice; validation sets draw from here.
    pub fn pool_prompts(&self) -> Vec<Vec<usize>> {
        self.pool_idx.iter().map(|&i| self.patterns[i].prompt.clone()).collect()
    }

    /// Uniform sample (with replacement) from the full prompt distribution.
    pub fn sample_prompts(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<usize>> {
        (0..n)
            .map(|_| self.patterns[rng.random_range(0..self.patterns.len())].prompt.clone())
            .collect()
    }

    /// Ground-truth answer recomputed from the prompt tokens alone.
    pub fn answer(&self, prompt: &[usize]) -> Result<Vec<usize>, ToylabError> {
        let m = self.cfg.modulus;
        let space = m.pow(self.cfg.answer_len as u32);
        match self.cfg.kind {
            TaskKind::Copy => {
                if prompt.len() != 3 || prompt[0] != tok_bos(m) || prompt[2] != tok_eq(m) || prompt[1] >= m {
                    return Err(ToylabError::BadPrompt);
                }
                Ok(vec![prompt[1]; self.cfg.answer_len])
            }
            TaskKind::ModSum => {
                if prompt.len() != 5
                    || prompt[0] != tok_bos(m)
                    || prompt[2] != tok_plus(m)
                    || prompt[4] != tok_eq(m)
                    || prompt[1] >= m
                    || prompt[3] >= m
                {
                    return Err(ToylabError::BadPrompt);
                }
                Ok(digits((prompt[1] + prompt[3]) % space, m, self.cfg.answer_len))
            }
        }
    }

    /// Exact-match verifiable reward: 1 iff the completion equals the
    /// ground-truth answer. Pure function of `(prompt, completion)`.
    pub fn reward(&self, prompt: &[usize], completion: &[usize]) -> Result<f64, ToylabError> {
        let ans = self.answer(prompt)?;
        Ok(if completion == ans { 1.0 } else { 0.0 })
    }
}

/// Base-`m` digits of `value`, most significant first, fixed width.
fn digits(mut value: usize, m: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = value % m;
        value /= m;
    }
    out
}

pub fn tok_plus(modulus: usize) -> usize {
    modulus
}

pub fn tok_eq(modulus: usize) -> usize {
    modulus + 1
}

pub fn tok_bos(modulus: usize) -> usize {
    modulus + 2
}
