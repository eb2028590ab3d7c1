//! Training acceleration by exponential-checkpoint extrapolation.
//!
//! At every optimizer step t = 2^n the scheduler estimates the current
//! parameter velocity from the last exponential checkpoint interval,
//! Delta_n = W_{2^n} - W_{2^{n-1}} (n = 0 uses the displacement from the
//! initialization), then tries the candidates W + 2k * Delta_n for
//! k = 1, 2, ..., 5 in order against a cheap fixed validation set.
//! Candidates are accepted while their score stays >= the best score so far
//! (ties accept); the first rejection stops the search. If the very first
//! candidate fails, training continues unchanged — the scheduler degenerates
//! to the vanilla loop, bit for bit, because validation draws from its own
//! RNG and never touches the training stream.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::UpdateDelta;
use crate::toylab::{
    evaluate, StepMetrics, SyntheticTask, ToyPolicy, ToyTrainer, ToylabError, TrainRun,
};

/// Maximum extrapolation multiple tried per event (candidates k = 1..=5).
pub const MAX_CANDIDATES: u8 = 5;
/// Validation set size.
pub const VALIDATION_EXAMPLES: usize = 50;

#[derive(Debug, Error)]
pub enum EffOpdError {
    #[error(transparent)]
    Toylab(#[from] ToylabError),
    #[error("no checkpoint recorded at step {step}")]
    MissingCheckpoint { step: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

/// What the validator scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Greedy-decoding exact-match accuracy (the default; deterministic
    /// given the set).
    Accuracy,
    /// Mean reward of sampled decoding at temperature 1 with a fixed seed.
    MeanReward,
    /// Negative mean on-policy KL to the teacher (fixed sampling seed);
    /// higher is better, hence the negation.
    NegKlToTeacher,
}

/// A fixed, run-scoped validation set: [`VALIDATION_EXAMPLES`] prompts drawn
/// uniformly without replacement from the task's training pool (never from
/// the held-out test slice).
#[derive(Debug, Clone)]
pub struct ValidationSet {
    prompts: Vec<Vec<usize>>,
    kind: ScoreKind,
    seed: u64,
}

impl ValidationSet {
    pub fn sample(task: &SyntheticTask, kind: ScoreKind, seed: u64) -> Result<Self, EffOpdError> {
        let pool = task.pool_prompts();
        if pool.len() < VALIDATION_EXAMPLES {
            return Err(EffOpdError::BadConfig(format!(
                "training pool has {} prompts, need {VALIDATION_EXAMPLES}",
                pool.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xEFF0_9D5E_7AA1_0B2C);
        let idx = index_sample(&mut rng, pool.len(), VALIDATION_EXAMPLES);
        let prompts = idx.iter().map(|i| pool[i].clone()).collect();
        Ok(Self { prompts, kind, seed })
    }

    pub fn prompts(&self) -> &[Vec<usize>] {
        &self.prompts
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }
}

/// Anything that can score candidate parameters. `None` means the candidate
/// could not be scored (non-finite logits, missing teacher, ...) and is
/// treated as a rejection.
pub trait Validate {
    fn score(&self, policy: &ToyPolicy) -> Option<f64>;
}

/// The standard validator: scores a policy on a [`ValidationSet`] for a
/// given task (and teacher, for the KL kind). Scoring is deterministic —
/// repeated calls on the same parameters return the same value — and never
/// touches any caller RNG.
pub struct TaskValidator<'a> {
    pub task: &'a SyntheticTask,
    pub set: &'a ValidationSet,
    pub teacher: Option<&'a ToyPolicy>,
}

impl Validate for TaskValidator<'_> {
    fn score(&self, policy: &ToyPolicy) -> Option<f64> {
        let value = match self.set.kind {
            ScoreKind::Accuracy => {
                evaluate(policy, self.task, None, &self.set.prompts, 0).ok()?.accuracy
            }
            ScoreKind::MeanReward => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.set.seed ^ 0x05C0_4E11);
                let mut total = 0.0;
                for prompt in &self.set.prompts {
                    let mut ctx = prompt.clone();
                    for _ in 0..self.task.answer_len() {
                        let y = policy.forward(&ctx).ok()?.sample(&mut rng);
                        ctx.push(y);
                    }
                    total += self.task.reward(prompt, &ctx[prompt.len()..]).ok()?;
                }
                total / self.set.prompts.len() as f64
            }
            ScoreKind::NegKlToTeacher => {
                let teacher = self.teacher?;
                let rep = evaluate(
                    policy,
                    self.task,
                    Some(teacher),
                    &self.set.prompts,
                    self.set.seed ^ 0x7e11,
                )
                .ok()?;
                -rep.mean_kl?
            }
        };
        value.is_finite().then_some(value)
    }
}

/// A validator that rejects everything; extrapolation with it degenerates to
/// vanilla training.
pub struct AlwaysReject;

impl Validate for AlwaysReject {
    fn score(&self, _policy: &ToyPolicy) -> Option<f64> {
        None
    }
}

/// Record of one extrapolation event at trigger step t = 2^n.
#[derive(Debug, Clone)]
pub struct ExtrapolationEvent {
    pub n: u32,
    pub t: usize,
    /// Parameter direction the candidates extrapolate along.
    pub direction: UpdateDelta,
    /// Score of the pre-extrapolation parameters (None if unscorable).
    pub base_score: Option<f64>,
    /// Candidate scores in k order (k = index + 1); the list stops at the
    /// first rejection. None = validator failure, treated as rejection.
    pub scores: Vec<Option<f64>>,
    /// Largest accepted k; 0 means no candidate was accepted.
    pub accepted_k: u8,
    /// Digest of the parameters installed after the event.
    pub accepted_digest: String,
    pub wallclock_ms: u64,
}

impl ExtrapolationEvent {
    /// One JSON line of the form
    /// `{"n":..,"t":..,"scores":[..],"accepted_k":..,"wallclock_ms":..}`;
    /// unscorable candidates serialize as null.
    pub fn log_line(&self) -> String {
        serde_json::json!({
            "n": self.n,
            "t": self.t,
            "scores": self.scores,
            "accepted_k": self.accepted_k,
            "wallclock_ms": self.wallclock_ms,
        })
        .to_string()
    }
}

/// Read-only access to checkpoints by step, for direction estimation.
pub trait CheckpointAccess {
    fn checkpoint(&self, step: usize) -> Option<&ToyPolicy>;
}

impl CheckpointAccess for BTreeMap<usize, ToyPolicy> {
    fn checkpoint(&self, step: usize) -> Option<&ToyPolicy> {
        self.get(&step)
    }
}

impl CheckpointAccess for TrainRun {
    fn checkpoint(&self, step: usize) -> Option<&ToyPolicy> {
        self.checkpoints.iter().find(|(s, _)| *s == step).map(|(_, p)| p)
    }
}

/// Extrapolation direction at exponent n: the parameter displacement over
/// the last exponential interval, W_{2^n} - W_{2^{n-1}} (W_1 - W_0 for
/// n = 0).
pub fn direction(n: u32, history: &dyn CheckpointAccess) -> Result<UpdateDelta, EffOpdError> {
    let t = 1usize << n;
    let prev = if n == 0 { 0 } else { 1usize << (n - 1) };
    let w_t = history
        .checkpoint(t)
        .ok_or(EffOpdError::MissingCheckpoint { step: t })?;
    let w_prev = history
        .checkpoint(prev)
        .ok_or(EffOpdError::MissingCheckpoint { step: prev })?;
    Ok(w_t.delta_from(w_prev)?)
}

/// Sequential candidate search from `w` along `delta`: candidates
/// W + 2k*delta for k = 1..=[`MAX_CANDIDATES`], accepted while the score
/// stays >= the best accepted score so far (seeded with the score of `w`
/// itself; ties accept), stopping at the first rejection. A candidate whose
/// parameters are non-finite counts as a rejection, recorded as a null
/// score. Returns the accepted parameters (never scoring worse than `w` on
/// the validator) and the event record with `n`/`t` left at zero for the
/// caller to fill.
pub fn extrapolate_and_select(
    w: &ToyPolicy,
    delta: &UpdateDelta,
    validator: &dyn Validate,
) -> (ToyPolicy, ExtrapolationEvent) {
    let started = Instant::now();
    let base_score = validator.score(w);
    let mut accepted = w.clone();
    let mut accepted_k = 0u8;
    let mut v_acc = base_score;
    let mut scores = Vec::new();
    for k in 1..=MAX_CANDIDATES {
        let candidate = candidate_at(w, delta, k);
        let score = candidate.as_ref().and_then(|c| validator.score(c));
        scores.push(score);
        match (score, v_acc) {
            (Some(s), Some(v)) if s >= v => {
                accepted = candidate.expect("scored candidates exist");
                accepted_k = k;
                v_acc = Some(s);
            }
            _ => break,
        }
    }
    let event = ExtrapolationEvent {
        n: 0,
        t: 0,
        direction: delta.clone(),
        base_score,
        scores,
        accepted_k,
        accepted_digest: accepted.digest(),
        wallclock_ms: started.elapsed().as_millis() as u64,
    };
    (accepted, event)
}

/// W + 2k*delta, or None if scaling/addition leaves the finite range or the
/// delta does not address this architecture.
fn candidate_at(w: &ToyPolicy, delta: &UpdateDelta, k: u8) -> Option<ToyPolicy> {
    let mut scaled = UpdateDelta::new();
    for (path, m) in delta.iter() {
        scaled.insert(*path, m.scale(2.0 * k as f64).ok()?);
    }
    w.add_delta(&scaled).ok()
}

/// A completed accelerated run: the usual training artifacts, the event log,
/// and the validation score of the installed parameters after every step.
#[derive(Debug)]
pub struct EffOpdRun {
    pub run: TrainRun,
    pub events: Vec<ExtrapolationEvent>,
    /// Validation score after each optimizer step (index i = step i+1),
    /// measured on the installed parameters (post-extrapolation at trigger
    /// steps). None where the validator fails.
    pub validation_curve: Vec<Option<f64>>,
}

impl EffOpdRun {
    /// The event log as JSON lines, one per trigger step.
    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.log_line());
            out.push('\n');
        }
        out
    }
}

/// Run `total_steps` of training, extrapolating at every step in
/// {1, 2, 4, 8, ...}. Extrapolation consumes no optimizer step and the
/// validator must not touch the trainer's RNG; with [`AlwaysReject`] the
/// resulting parameters are bit-identical to the vanilla loop. Directions
/// are computed from the installed (post-extrapolation) parameters at the
/// previous trigger, so each one measures pure training displacement over
/// the interval.
pub fn run_effopd(
    trainer: &mut ToyTrainer<'_>,
    total_steps: usize,
    validator: &dyn Validate,
) -> Result<EffOpdRun, EffOpdError> {
    if trainer.step_index() != 0 {
        return Err(EffOpdError::BadConfig(
            "run_effopd requires a fresh trainer at step 0".into(),
        ));
    }
    let cfg = trainer.config().clone();
    let mut history: BTreeMap<usize, ToyPolicy> = BTreeMap::new();
    history.insert(0, trainer.base().clone());
    let mut checkpoints = vec![(0usize, trainer.base().clone())];
    let mut metrics: Vec<StepMetrics> = Vec::with_capacity(total_steps);
    let mut events = Vec::new();
    let mut validation_curve = Vec::with_capacity(total_steps);

    for step in 1..=total_steps {
        let (loss, mean_reward) = trainer.step()?;
        if step.is_power_of_two() {
            let n = step.trailing_zeros();
            let prev = if n == 0 { 0 } else { 1usize << (n - 1) };
            let w_prev = history
                .get(&prev)
                .ok_or(EffOpdError::MissingCheckpoint { step: prev })?;
            let delta = trainer.policy().delta_from(w_prev)?;
            let (accepted, mut event) = extrapolate_and_select(trainer.policy(), &delta, validator);
            event.n = n;
            event.t = step;
            events.push(event);
            trainer.set_policy(accepted)?;
            history.insert(step, trainer.policy().clone());
        }
        validation_curve.push(validator.score(trainer.policy()));
        metrics.push(trainer.metrics_now(loss, mean_reward)?);
        if step % cfg.ckpt_stride == 0 || step == total_steps {
            checkpoints.push((step, trainer.policy().clone()));
        }
    }

    Ok(EffOpdRun {
        run: TrainRun {
            config: cfg,
            checkpoints,
            metrics,
            clamp_events: trainer.clamp_events(),
        },
        events,
        validation_curve,
    })
}
