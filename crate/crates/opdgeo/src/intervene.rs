//! Intervention engine for localizing functional updates: apply a trained
//! update delta to only a chosen slice of a policy — a sliding window of
//! MLP or attention blocks, the vocabulary interface, or a per-matrix
//! singular-component range — and measure what the slice alone buys.
//!
//! Layers are indexed from 0. The vocabulary interface (the embedding and
//! the output projection) is treated as one module group, so the three
//! block-level targets plus the interface remainder partition every
//! parameter of a policy; applying the full delta through any disjoint
//! cover reproduces the fully updated model bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ModuleKind, ModulePath, UpdateDelta};
use crate::linalg::{self, LinalgError};
use crate::toylab::{SyntheticTask, ToyPolicy, ToylabError};

/// Toy-scale default window radius.
pub const DEFAULT_RADIUS: usize = 1;

#[derive(Debug, Error)]
pub enum InterveneError {
    #[error(transparent)]
    Toylab(#[from] ToylabError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("window center {center} out of range for {layers} layers")]
    WindowOutOfRange { center: usize, layers: usize },
    #[error("window sweeps cover attention or MLP blocks, not {kind:?}")]
    BadModuleKind { kind: ModuleKind },
    #[error("k_percent must lie in (0, 100], got {0}")]
    BadPercent(f64),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

/// A contiguous block window: layers `center - radius ..= center + radius`,
/// clipped to the policy's depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub center: usize,
    pub radius: usize,
}

impl WindowSpec {
    /// Window with the toy default radius.
    pub fn centered(center: usize) -> Self {
        Self { center, radius: DEFAULT_RADIUS }
    }

    /// The layer indices the window covers in a `layers`-deep policy.
    pub fn layers(
        &self,
        layers: usize,
    ) -> Result<std::ops::RangeInclusive<usize>, InterveneError> {
        if self.center >= layers {
            return Err(InterveneError::WindowOutOfRange { center: self.center, layers });
        }
        let lo = self.center.saturating_sub(self.radius);
        let hi = (self.center + self.radius).min(layers - 1);
        Ok(lo..=hi)
    }

    pub fn contains(&self, layer: usize, layers: usize) -> Result<bool, InterveneError> {
        Ok(self.layers(layers)?.contains(&layer))
    }
}

/// Which singular components of each delta matrix to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    /// Leading components (largest singular values).
    Top,
    /// Trailing components (smallest singular values).
    Bottom,
}

impl std::fmt::Display for TruncationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TruncationMode::Top => write!(f, "top"),
            TruncationMode::Bottom => write!(f, "bottom"),
        }
    }
}

/// Exactly one intervention target per plan.
#[derive(Debug, Clone, PartialEq)]
pub enum InterventionTarget {
    /// Apply the delta to every block matrix while the vocabulary interface
    /// (embedding and output projection) stays at its pre-plan values:
    /// the "trained everywhere except the embeddings" model.
    EmbeddingReplacement,
    /// Apply the delta only to both MLP matrices of blocks in the window.
    MlpWindow(WindowSpec),
    /// Apply the delta only to the attention matrix of blocks in the window.
    AttentionWindow(WindowSpec),
    /// Apply, for every module, only a singular-component range of the
    /// delta: the leading or trailing `k_percent` of each matrix's
    /// spectrum.
    RankRangeGlobal { mode: TruncationMode, k_percent: f64 },
}

/// An intervention: a target slice, the source delta, and a scalar applied
/// to the injected sub-delta (1 = inject as is).
#[derive(Debug, Clone)]
pub struct InterventionPlan {
    pub target: InterventionTarget,
    pub delta: UpdateDelta,
    pub scale: f64,
}

impl InterventionPlan {
    pub fn new(target: InterventionTarget, delta: UpdateDelta) -> Self {
        Self { target, delta, scale: 1.0 }
    }
}

/// Keep only the delta entries whose path satisfies the predicate.
pub fn restrict_to_paths(
    delta: &UpdateDelta,
    mut keep: impl FnMut(&ModulePath) -> bool,
) -> UpdateDelta {
    let mut out = UpdateDelta::new();
    for (path, m) in delta.iter() {
        if keep(path) {
            out.insert(*path, m.clone());
        }
    }
    out
}

/// The vocabulary-interface part of a delta: embedding and output
/// projection. This is the remainder once MLP and attention windows over
/// all layers have been applied.
pub fn vocab_interface_delta(delta: &UpdateDelta) -> UpdateDelta {
    restrict_to_paths(delta, |p| {
        matches!(p.kind(), ModuleKind::Embedding | ModuleKind::OutputProj)
    })
}

/// Per-matrix spectral truncation of a delta: keep the leading (top) or
/// trailing (bottom) `ceil(k_percent% of rank)` singular components of
/// every matrix. Zero matrices stay zero.
pub fn truncate_delta(
    delta: &UpdateDelta,
    mode: TruncationMode,
    k_percent: f64,
) -> Result<UpdateDelta, InterveneError> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(InterveneError::BadPercent(k_percent));
    }
    let mut out = UpdateDelta::new();
    for (path, m) in delta.iter() {
        if m.is_zero() {
            out.insert(*path, m.clone());
            continue;
        }
        let f = linalg::svd(m)?;
        let r = f.rank();
        let count = ((k_percent / 100.0) * r as f64).ceil() as usize;
        let count = count.clamp(1, r);
        let (lo, hi) = match mode {
            TruncationMode::Top => (0, count),
            TruncationMode::Bottom => (r - count, r),
        };
        out.insert(*path, linalg::truncate_rank_range(&f, lo, hi)?);
    }
    Ok(out)
}

/// The sub-delta a plan injects, before scaling.
fn selected_delta(
    plan: &InterventionPlan,
    layers: usize,
) -> Result<UpdateDelta, InterveneError> {
    match &plan.target {
        InterventionTarget::EmbeddingReplacement => Ok(restrict_to_paths(&plan.delta, |p| {
            matches!(p.kind(), ModuleKind::AttentionSub | ModuleKind::MlpSub)
        })),
        InterventionTarget::MlpWindow(w) => {
            let range = w.layers(layers)?;
            Ok(restrict_to_paths(&plan.delta, |p| {
                p.kind() == ModuleKind::MlpSub
                    && p.layer().is_some_and(|l| range.contains(&l))
            }))
        }
        InterventionTarget::AttentionWindow(w) => {
            let range = w.layers(layers)?;
            Ok(restrict_to_paths(&plan.delta, |p| {
                p.kind() == ModuleKind::AttentionSub
                    && p.layer().is_some_and(|l| range.contains(&l))
            }))
        }
        InterventionTarget::RankRangeGlobal { mode, k_percent } => {
            truncate_delta(&plan.delta, *mode, *k_percent)
        }
    }
}

/// Apply an intervention: returns a new policy where only the plan's
/// targeted parameters receive the (scaled) delta and every other parameter
/// is bit-identical to `policy`. Plans with disjoint targets compose by
/// chaining `apply` calls.
pub fn apply(policy: &ToyPolicy, plan: &InterventionPlan) -> Result<ToyPolicy, InterveneError> {
    if !plan.scale.is_finite() {
        return Err(InterveneError::BadConfig("plan scale must be finite".into()));
    }
    let selected = selected_delta(plan, policy.config().layers)?;
    let scaled = if plan.scale == 1.0 {
        selected
    } else {
        crate::geometry::scale_delta(&selected, plan.scale)
    };
    Ok(policy.add_delta(&scaled)?)
}

/// Mean exact-match reward under sampled decoding at temperature 1.
pub fn evaluate_sampled(
    policy: &ToyPolicy,
    task: &SyntheticTask,
    prompts: &[Vec<usize>],
    seed: u64,
) -> Result<f64, InterveneError> {
    if prompts.is_empty() {
        return Err(InterveneError::BadConfig("empty evaluation prompt set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for prompt in prompts {
        let mut ctx = prompt.clone();
        for _ in 0..task.answer_len() {
            let y = policy.forward(&ctx)?.sample(&mut rng);
            ctx.push(y);
        }
        total += task.reward(prompt, &ctx[prompt.len()..])?;
    }
    Ok(total / prompts.len() as f64)
}

/// One row of a window sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub center: usize,
    pub mean_accuracy: f64,
    pub window_lo: usize,
    pub window_hi: usize,
    /// Frobenius norm of the delta restricted to the window's matrices.
    pub window_update_norm: f64,
}

/// Sweep format as CSV.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("center,mean_accuracy,window_lo,window_hi,window_update_norm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.center, r.mean_accuracy, r.window_lo, r.window_hi, r.window_update_norm
        ));
    }
    out
}

/// For every valid window center, inject the delta into that window only
/// and evaluate sampled-decoding accuracy `eval_reps` times with distinct
/// (but center-paired) seeds, reporting the mean. Centers are evaluated in
/// parallel; each intervention builds an independent policy copy.
#[allow(clippy::too_many_arguments)]
pub fn window_sweep(
    base: &ToyPolicy,
    delta: &UpdateDelta,
    kind: ModuleKind,
    radius: usize,
    eval_reps: usize,
    task: &SyntheticTask,
    prompts: &[Vec<usize>],
    seed: u64,
) -> Result<Vec<SweepRow>, InterveneError> {
    if eval_reps == 0 {
        return Err(InterveneError::BadConfig("eval_reps must be at least 1".into()));
    }
    if !matches!(kind, ModuleKind::AttentionSub | ModuleKind::MlpSub) {
        return Err(InterveneError::BadModuleKind { kind });
    }
    let layers = base.config().layers;
    let row_of = |center: usize| -> Result<SweepRow, InterveneError> {
        let window = WindowSpec { center, radius };
        let target = match kind {
            ModuleKind::MlpSub => InterventionTarget::MlpWindow(window),
            _ => InterventionTarget::AttentionWindow(window),
        };
        let plan = InterventionPlan::new(target, delta.clone());
        let intervened = apply(base, &plan)?;
        let norm = selected_delta(&plan, layers)?.frobenius_norm();
        let mut total = 0.0;
        for rep in 0..eval_reps {
            let rep_seed = seed.wrapping_add(rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            total += evaluate_sampled(&intervened, task, prompts, rep_seed)?;
        }
        let range = window.layers(layers)?;
        Ok(SweepRow {
            center,
            mean_accuracy: total / eval_reps as f64,
            window_lo: *range.start(),
            window_hi: *range.end(),
            window_update_norm: norm,
        })
    };
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..layers).map(|c| scope.spawn(move || row_of(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    })
}

/// Result of evaluating a spectrally truncated update.
#[derive(Debug, Clone)]
pub struct TruncatedEval {
    /// Greedy exact-match accuracy of base + truncated delta.
    pub accuracy: f64,
    /// Global Frobenius norm of the truncated delta (before norm matching).
    pub truncated_norm: f64,
    /// Global Frobenius norm of the full delta.
    pub full_norm: f64,
}

/// Build base + per-matrix truncated delta and evaluate greedy accuracy.
/// With `norm_match` (top mode only) each truncated matrix is rescaled to
/// the Frobenius norm of the corresponding full delta matrix, so methods
/// compared at the same k spend the same per-module norm budget.
#[allow(clippy::too_many_arguments)]
pub fn truncated_model_eval(
    base: &ToyPolicy,
    delta: &UpdateDelta,
    mode: TruncationMode,
    k_percent: f64,
    norm_match: bool,
    task: &SyntheticTask,
    prompts: &[Vec<usize>],
) -> Result<TruncatedEval, InterveneError> {
    if norm_match && mode == TruncationMode::Bottom {
        return Err(InterveneError::BadConfig(
            "norm matching applies to top-mode truncation only".into(),
        ));
    }
    let truncated = truncate_delta(delta, mode, k_percent)?;
    let truncated_norm = truncated.frobenius_norm();
    let injected = if norm_match {
        let mut matched = UpdateDelta::new();
        for (path, m) in truncated.iter() {
            let full = delta.get(path).expect("truncation preserves paths");
            let norm = m.frobenius_norm();
            if norm == 0.0 {
                matched.insert(*path, m.clone());
            } else {
                matched.insert(*path, m.scale(full.frobenius_norm() / norm)?);
            }
        }
        matched
    } else {
        truncated
    };
    let model = base.add_delta(&injected)?;
    let report = crate::toylab::evaluate(&model, task, None, prompts, 0)?;
    Ok(TruncatedEval {
        accuracy: report.accuracy,
        truncated_norm,
        full_norm: delta.frobenius_norm(),
    })
}
