//! Update-geometry metrics and intervention-free analyses of per-module
//! weight deltas: spectral summaries, norm scaling, subspace-alignment
//! trajectories, and PCA explained variance of direction trajectories.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::linalg::{self, DenseMatrix, LinalgError};

/// Singular values below `RANK_CUTOFF * sigma_max` are treated as zero for
/// effective-rank and energy computations.
pub const RANK_CUTOFF: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("matrix '{name}' is all zero; spectral metrics are undefined")]
    ZeroMatrix { name: String },
    #[error("delta contains no attention or MLP matrices")]
    NoAttentionOrMlp,
    #[error("module sets differ: '{path}' present on only one side")]
    ModuleSetMismatch { path: String },
    #[error("module '{path}' has zero Frobenius norm; cannot norm-scale")]
    ZeroNormModule { path: String },
    #[error("norm scaling would flip the update direction of '{path}' (factor {factor})")]
    DirectionFlip { path: String, factor: f64 },
    #[error("need at least {need} checkpoints, got {got}")]
    TooFewCheckpoints { need: usize, got: usize },
    #[error("k_max {k_max} exceeds the smallest matrix dimension {min_dim}")]
    KMaxTooLarge { k_max: usize, min_dim: usize },
    #[error("need at least 3 trajectory points, got {got}")]
    TooFewPoints { got: usize },
    #[error("trajectory points have inconsistent dimensions ({a} vs {b})")]
    PointDimMismatch { a: usize, b: usize },
    #[error("trajectory has zero variance; explained-variance ratio is undefined")]
    ZeroVariance,
}

/// Sub-matrix slot within a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockSlot {
    Attn,
    MlpIn,
    MlpOut,
}

/// Coarse module category used when averaging metrics and building
/// intervention plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleKind {
    Embedding,
    AttentionSub,
    MlpSub,
    OutputProj,
}

/// Address of one parameter matrix inside a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModulePath {
    Embedding,
    Block { layer: usize, slot: BlockSlot },
    OutputProj,
}

impl ModulePath {
    pub fn kind(&self) -> ModuleKind {
        match self {
            ModulePath::Embedding => ModuleKind::Embedding,
            ModulePath::Block { slot: BlockSlot::Attn, .. } => ModuleKind::AttentionSub,
            ModulePath::Block { .. } => ModuleKind::MlpSub,
            ModulePath::OutputProj => ModuleKind::OutputProj,
        }
    }

    pub fn layer(&self) -> Option<usize> {
        match self {
            ModulePath::Block { layer, .. } => Some(*layer),
            _ => None,
        }
    }
}

impl fmt::Display for ModulePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModulePath::Embedding => write!(f, "embed"),
            ModulePath::Block { layer, slot } => {
                let s = match slot {
                    BlockSlot::Attn => "attn",
                    BlockSlot::MlpIn => "mlp_in",
                    BlockSlot::MlpOut => "mlp_out",
                };
                write!(f, "layer{layer:02}.{s}")
            }
            ModulePath::OutputProj => write!(f, "out_proj"),
        }
    }
}

impl FromStr for ModulePath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "embed" => return Ok(ModulePath::Embedding),
            "out_proj" => return Ok(ModulePath::OutputProj),
            _ => {}
        }
        let rest = s.strip_prefix("layer").ok_or_else(|| format!("bad module path '{s}'"))?;
        let (num, slot) = rest.split_once('.').ok_or_else(|| format!("bad module path '{s}'"))?;
        let layer: usize = num.parse().map_err(|_| format!("bad layer index in '{s}'"))?;
        let slot = match slot {
            "attn" => BlockSlot::Attn,
            "mlp_in" => BlockSlot::MlpIn,
            "mlp_out" => BlockSlot::MlpOut,
            _ => return Err(format!("bad slot in '{s}'")),
        };
        Ok(ModulePath::Block { layer, slot })
    }
}

/// Named collection of per-module weight deltas between two checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateDelta {
    entries: BTreeMap<ModulePath, DenseMatrix>,
}

impl UpdateDelta {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: ModulePath, m: DenseMatrix) {
        self.entries.insert(path, m);
    }

    pub fn get(&self, path: &ModulePath) -> Option<&DenseMatrix> {
        self.entries.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModulePath, &DenseMatrix)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &ModulePath> {
        self.entries.keys()
    }

    /// Global Frobenius norm: sqrt of the summed squared entries of every
    /// module matrix.
    pub fn frobenius_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|m| {
                let n = m.frobenius_norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// The four spectral metrics for one update matrix, plus the retained
/// spectrum they were computed from.
///
/// `sigma` holds the singular values above the [`RANK_CUTOFF`] relative
/// threshold, sorted non-increasing.
#[derive(Debug, Clone)]
pub struct SpectralSummary {
    pub matrix_name: String,
    pub sigma: Vec<f64>,
    /// Largest singular value.
    pub spectral_norm: f64,
    /// sigma_1 / sqrt(sum sigma_i^2), in (0, 1].
    pub spec_frob_ratio: f64,
    /// exp of the Shannon entropy of the normalized spectrum, in [1, r].
    pub effective_rank: f64,
    /// Fraction of Frobenius energy in the leading ceil(r/100) components.
    pub top1pct_norm_ratio: f64,
}

/// Arithmetic means of the four metrics over attention and MLP matrices.
#[derive(Debug, Clone)]
pub struct MetricMeans {
    pub matrices: usize,
    pub spectral_norm: f64,
    pub spec_frob_ratio: f64,
    pub effective_rank: f64,
    pub top1pct_norm_ratio: f64,
}

/// Mean-over-k subspace alignment of each checkpoint against the final one.
#[derive(Debug, Clone)]
pub struct AlignmentSeries {
    pub steps: Vec<usize>,
    pub k_max: usize,
    pub values: Vec<f64>,
}

fn metrics_from_sigma(sigma: &[f64]) -> (f64, f64, f64, f64) {
    let spectral = sigma[0];
    let energy: f64 = sigma.iter().map(|s| s * s).sum();
    let spec_frob = spectral / energy.sqrt();
    let total: f64 = sigma.iter().sum();
    let entropy: f64 = sigma
        .iter()
        .map(|s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    let eff_rank = entropy.exp();
    let k = sigma.len().div_ceil(100);
    let head: f64 = sigma[..k].iter().map(|s| s * s).sum();
    let top1pct = (head / energy).sqrt();
    (spectral, spec_frob, eff_rank, top1pct)
}

/// Compute the four spectral metrics of one delta matrix.
pub fn summarize(delta_matrix: &DenseMatrix, name: &str) -> Result<SpectralSummary, GeometryError> {
    if delta_matrix.is_zero() {
        return Err(GeometryError::ZeroMatrix { name: name.to_string() });
    }
    let f = linalg::svd(delta_matrix)?;
    let cutoff = RANK_CUTOFF * f.sigma[0];
    let sigma: Vec<f64> = f.sigma.iter().copied().filter(|s| *s > cutoff).collect();
    let (spectral_norm, spec_frob_ratio, effective_rank, top1pct_norm_ratio) = metrics_from_sigma(&sigma);
    Ok(SpectralSummary {
        matrix_name: name.to_string(),
        sigma,
        spectral_norm,
        spec_frob_ratio,
        effective_rank,
        top1pct_norm_ratio,
    })
}

/// Mean of each metric over all attention and MLP matrices of the delta.
/// Embedding and output-projection entries are excluded.
pub fn mean_summaries(deltas: &UpdateDelta) -> Result<MetricMeans, GeometryError> {
    let mut acc = MetricMeans {
        matrices: 0,
        spectral_norm: 0.0,
        spec_frob_ratio: 0.0,
        effective_rank: 0.0,
        top1pct_norm_ratio: 0.0,
    };
    for (path, m) in deltas.iter() {
        if !matches!(path.kind(), ModuleKind::AttentionSub | ModuleKind::MlpSub) {
            continue;
        }
        let s = summarize(m, &path.to_string())?;
        acc.matrices += 1;
        acc.spectral_norm += s.spectral_norm;
        acc.spec_frob_ratio += s.spec_frob_ratio;
        acc.effective_rank += s.effective_rank;
        acc.top1pct_norm_ratio += s.top1pct_norm_ratio;
    }
    if acc.matrices == 0 {
        return Err(GeometryError::NoAttentionOrMlp);
    }
    let n = acc.matrices as f64;
    acc.spectral_norm /= n;
    acc.spec_frob_ratio /= n;
    acc.effective_rank /= n;
    acc.top1pct_norm_ratio /= n;
    Ok(acc)
}

/// Multiply every module matrix by `alpha`.
pub fn scale_delta(delta: &UpdateDelta, alpha: f64) -> UpdateDelta {
    assert!(alpha.is_finite(), "alpha must be finite");
    let mut out = UpdateDelta::new();
    for (path, m) in delta.iter() {
        out.insert(*path, m.scale(alpha).expect("finite scale of finite matrix"));
    }
    out
}

/// Per-module norm scaling of an early delta toward a final delta:
/// each module is multiplied by `1 + beta * (||final||_F - ||early||_F) / ||early||_F`.
///
/// At `beta = 1` every module's Frobenius norm equals the final module's.
/// The update direction is preserved; a factor that is not strictly positive
/// is an error rather than a silent direction flip.
pub fn norm_match_scale(
    early: &UpdateDelta,
    final_delta: &UpdateDelta,
    beta: f64,
) -> Result<UpdateDelta, GeometryError> {
    for path in final_delta.paths() {
        if early.get(path).is_none() {
            return Err(GeometryError::ModuleSetMismatch { path: path.to_string() });
        }
    }
    let mut out = UpdateDelta::new();
    for (path, e) in early.iter() {
        let f = final_delta
            .get(path)
            .ok_or_else(|| GeometryError::ModuleSetMismatch { path: path.to_string() })?;
        let ne = e.frobenius_norm();
        if ne == 0.0 {
            return Err(GeometryError::ZeroNormModule { path: path.to_string() });
        }
        let nf = f.frobenius_norm();
        let factor = 1.0 + beta * (nf - ne) / ne;
        if factor <= 0.0 {
            return Err(GeometryError::DirectionFlip { path: path.to_string(), factor });
        }
        out.insert(*path, e.scale(factor)?);
    }
    Ok(out)
}

/// For each checkpoint delta, the mean (over k = 1..=k_max and over all
/// attention/MLP matrices) principal-angle cosine between the checkpoint's
/// top-k left-singular subspace and the final checkpoint's.
///
/// The final entry is 1 by construction. Only attention and MLP matrices
/// participate, mirroring the metric-averaging convention.
pub fn alignment_trajectory(
    series: &[(usize, UpdateDelta)],
    k_max: usize,
) -> Result<AlignmentSeries, GeometryError> {
    if series.len() < 2 {
        return Err(GeometryError::TooFewCheckpoints { need: 2, got: series.len() });
    }
    assert!(k_max >= 1, "k_max must be at least 1");
    let (_, final_delta) = series.last().expect("nonempty");
    let paths: Vec<ModulePath> = final_delta
        .paths()
        .filter(|p| matches!(p.kind(), ModuleKind::AttentionSub | ModuleKind::MlpSub))
        .copied()
        .collect();
    if paths.is_empty() {
        return Err(GeometryError::NoAttentionOrMlp);
    }
    let min_dim = paths
        .iter()
        .map(|p| {
            let m = final_delta.get(p).expect("path from same delta");
            m.rows().min(m.cols())
        })
        .min()
        .expect("nonempty paths");
    if k_max > min_dim {
        return Err(GeometryError::KMaxTooLarge { k_max, min_dim });
    }

    let left_vectors = |delta: &UpdateDelta| -> Result<Vec<DenseMatrix>, GeometryError> {
        paths
            .iter()
            .map(|p| {
                let m = delta
                    .get(p)
                    .ok_or_else(|| GeometryError::ModuleSetMismatch { path: p.to_string() })?;
                if m.is_zero() {
                    return Err(GeometryError::ZeroMatrix { name: p.to_string() });
                }
                Ok(linalg::svd(m)?.u)
            })
            .collect()
    };

    let final_us = left_vectors(final_delta)?;
    let mut steps = Vec::with_capacity(series.len());
    let mut values = Vec::with_capacity(series.len());
    for (step, delta) in series {
        let us = left_vectors(delta)?;
        let mut total = 0.0;
        for k in 1..=k_max {
            let mut per_matrix = 0.0;
            for (u_s, u_f) in us.iter().zip(&final_us) {
                let a = u_s.columns(0, k);
                let b = u_f.columns(0, k);
                per_matrix += linalg::subspace_similarity(&a, &b)?;
            }
            total += per_matrix / us.len() as f64;
        }
        steps.push(*step);
        values.push(total / k_max as f64);
    }
    Ok(AlignmentSeries { steps, k_max, values })
}

/// Cumulative variance explained by the first two principal components of a
/// trajectory of points: (lambda_1 + lambda_2) / sum(lambda_i) of the
/// centered covariance spectrum.
pub fn pca_evr2(trajectory: &[Vec<f64>]) -> Result<f64, GeometryError> {
    let t = trajectory.len();
    if t < 3 {
        return Err(GeometryError::TooFewPoints { got: t });
    }
    let d = trajectory[0].len();
    for p in trajectory {
        if p.len() != d {
            return Err(GeometryError::PointDimMismatch { a: d, b: p.len() });
        }
    }
    let mut mean = vec![0.0; d];
    for p in trajectory {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= t as f64;
    }
    let centered = DenseMatrix::from_fn(t, d, |i, j| trajectory[i][j] - mean[j])?;

    // The nonzero covariance spectrum equals that of the t x t Gram matrix;
    // use whichever side is smaller.
    let small = if t <= d {
        centered.matmul(&centered.transpose())?
    } else {
        centered.transpose().matmul(&centered)?
    };
    let eig = small.to_na().symmetric_eigen();
    let mut lambda: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0)).collect();
    lambda.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    let total: f64 = lambda.iter().sum();
    if total <= 0.0 {
        return Err(GeometryError::ZeroVariance);
    }
    let top2 = lambda[0] + lambda.get(1).copied().unwrap_or(0.0);
    Ok(top2 / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = move || {
            // Box-Muller
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        DenseMatrix::from_fn(rows, cols, |_, _| gauss()).unwrap()
    }

    fn delta_of(paths: &[(ModulePath, DenseMatrix)]) -> UpdateDelta {
        let mut d = UpdateDelta::new();
        for (p, m) in paths {
            d.insert(*p, m.clone());
        }
        d
    }

    const ATTN0: ModulePath = ModulePath::Block { layer: 0, slot: BlockSlot::Attn };
    const MLP1: ModulePath = ModulePath::Block { layer: 1, slot: BlockSlot::MlpIn };

    #[test]
    fn module_path_display_roundtrip() {
        for p in [
            ModulePath::Embedding,
            ModulePath::OutputProj,
            ATTN0,
            ModulePath::Block { layer: 12, slot: BlockSlot::MlpOut },
        ] {
            let s = p.to_string();
            assert_eq!(s.parse::<ModulePath>().unwrap(), p);
        }
        assert!("layerxx.attn".parse::<ModulePath>().is_err());
    }

    #[test]
    fn summarize_rank_one_matrix() {
        // 4x3 rank-1: sigma * u v^T
        let u = [0.5, -0.5, 0.5, 0.5];
        let v = [1.0 / 3f64.sqrt(); 3];
        let m = DenseMatrix::from_fn(4, 3, |i, j| 2.0 * u[i] * v[j]).unwrap();
        let s = summarize(&m, "rank1").unwrap();
        assert_relative_eq!(s.spec_frob_ratio, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.effective_rank, 1.0, epsilon = 1e-9);
        assert_relative_eq!(s.top1pct_norm_ratio, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.spectral_norm, 2.0, max_relative = 1e-10);
    }

    #[test]
    fn summarize_uniform_spectrum_effective_rank() {
        let r = 7;
        let m = DenseMatrix::from_diag(&vec![1.5; r]);
        let s = summarize(&m, "uniform").unwrap();
        assert_relative_eq!(s.effective_rank, r as f64, epsilon = 1e-9);
    }

    #[test]
    fn summarize_rejects_zero_matrix() {
        let err = summarize(&DenseMatrix::zeros(3, 3), "z").unwrap_err();
        assert!(matches!(err, GeometryError::ZeroMatrix { .. }));
    }

    #[test]
    fn summarize_matches_independent_reimplementation() {
        let m = random_matrix(200, 200, 99);
        let s = summarize(&m, "big").unwrap();
        // Oracle: recompute every metric directly from the raw spectrum.
        let f = linalg::svd(&m).unwrap();
        let sigma: Vec<f64> = f.sigma.iter().copied().filter(|x| *x > 1e-12 * f.sigma[0]).collect();
        let energy: f64 = sigma.iter().map(|x| x * x).sum();
        let total: f64 = sigma.iter().sum();
        let entropy: f64 = sigma.iter().map(|x| x / total).map(|p| -p * p.ln()).sum();
        let k = sigma.len().div_ceil(100);
        let head: f64 = sigma[..k].iter().map(|x| x * x).sum();
        assert_relative_eq!(s.spectral_norm, sigma[0], max_relative = 1e-12);
        assert_relative_eq!(s.spec_frob_ratio, sigma[0] / energy.sqrt(), max_relative = 1e-9);
        assert_relative_eq!(s.effective_rank, entropy.exp(), max_relative = 1e-9);
        assert_relative_eq!(s.top1pct_norm_ratio, (head / energy).sqrt(), max_relative = 1e-9);
    }

    #[test]
    fn summarize_scale_invariant_metrics() {
        let m = random_matrix(12, 9, 4);
        let a = summarize(&m, "m").unwrap();
        let b = summarize(&m.scale(37.5).unwrap(), "m").unwrap();
        assert_relative_eq!(a.spec_frob_ratio, b.spec_frob_ratio, epsilon = 1e-9);
        assert_relative_eq!(a.effective_rank, b.effective_rank, epsilon = 1e-9);
        assert_relative_eq!(a.top1pct_norm_ratio, b.top1pct_norm_ratio, epsilon = 1e-9);
    }

    #[test]
    fn truncation_energy_identity() {
        let m = random_matrix(10, 8, 21);
        let f = linalg::svd(&m).unwrap();
        let k = 3;
        let head = linalg::truncate_rank_range(&f, 0, k).unwrap();
        let tail = linalg::truncate_rank_range(&f, k, f.rank()).unwrap();
        let lhs = head.frobenius_norm().powi(2) + tail.frobenius_norm().powi(2);
        let rhs = m.frobenius_norm().powi(2);
        assert_relative_eq!(lhs, rhs, max_relative = 1e-9);
    }

    #[test]
    fn mean_summaries_single_matrix_equals_summary() {
        let m = random_matrix(6, 6, 8);
        let d = delta_of(&[(ATTN0, m.clone())]);
        let mean = mean_summaries(&d).unwrap();
        let s = summarize(&m, "x").unwrap();
        assert_eq!(mean.matrices, 1);
        assert_relative_eq!(mean.spec_frob_ratio, s.spec_frob_ratio, epsilon = 1e-15);
        assert_relative_eq!(mean.effective_rank, s.effective_rank, epsilon = 1e-15);
    }

    #[test]
    fn mean_summaries_is_arithmetic_mean() {
        // ratio 0.2: 25 equal singular values; ratio 0.4: sigma = [2, 1 x 21].
        let a = DenseMatrix::from_diag(&vec![0.2; 25]);
        let mut sig = vec![1.0; 22];
        sig[0] = 2.0;
        let b = DenseMatrix::from_diag(&sig);
        assert_relative_eq!(summarize(&a, "a").unwrap().spec_frob_ratio, 0.2, epsilon = 1e-12);
        assert_relative_eq!(summarize(&b, "b").unwrap().spec_frob_ratio, 0.4, epsilon = 1e-12);
        let d = delta_of(&[(ATTN0, a), (MLP1, b)]);
        let mean = mean_summaries(&d).unwrap();
        assert_relative_eq!(mean.spec_frob_ratio, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn mean_summaries_rejects_embedding_only() {
        let d = delta_of(&[(ModulePath::Embedding, random_matrix(4, 4, 0))]);
        assert!(matches!(mean_summaries(&d), Err(GeometryError::NoAttentionOrMlp)));
    }

    #[test]
    fn scale_delta_zero_and_one() {
        let d = delta_of(&[(ATTN0, random_matrix(4, 4, 2)), (MLP1, random_matrix(4, 6, 3))]);
        let z = scale_delta(&d, 0.0);
        assert!(z.iter().all(|(_, m)| m.is_zero()));
        let same = scale_delta(&d, 1.0);
        assert_eq!(same, d);
    }

    #[test]
    fn norm_match_scale_beta_zero_and_one() {
        let early = delta_of(&[(ATTN0, random_matrix(5, 5, 10)), (MLP1, random_matrix(5, 7, 11))]);
        let final_d = delta_of(&[
            (ATTN0, random_matrix(5, 5, 12).scale(3.0).unwrap()),
            (MLP1, random_matrix(5, 7, 13).scale(0.5).unwrap()),
        ]);
        let b0 = norm_match_scale(&early, &final_d, 0.0).unwrap();
        assert_eq!(b0, early);
        let b1 = norm_match_scale(&early, &final_d, 1.0).unwrap();
        for (path, m) in b1.iter() {
            let want = final_d.get(path).unwrap().frobenius_norm();
            assert_relative_eq!(m.frobenius_norm(), want, max_relative = 1e-9);
            // direction preserved: scaled is a positive multiple of early
            let e = early.get(path).unwrap();
            let factor = m.frobenius_norm() / e.frobenius_norm();
            assert!(factor > 0.0);
            assert!(m.sub(&e.scale(factor).unwrap()).unwrap().frobenius_norm() < 1e-9);
        }
    }

    #[test]
    fn norm_match_scale_error_paths() {
        let early = delta_of(&[(ATTN0, DenseMatrix::zeros(3, 3))]);
        let final_d = delta_of(&[(ATTN0, random_matrix(3, 3, 1))]);
        assert!(matches!(
            norm_match_scale(&early, &final_d, 1.0),
            Err(GeometryError::ZeroNormModule { .. })
        ));
        // final norm much smaller than early and beta large: factor <= 0
        let early = delta_of(&[(ATTN0, random_matrix(3, 3, 2))]);
        let final_d = delta_of(&[(ATTN0, early.get(&ATTN0).unwrap().scale(1e-6).unwrap())]);
        assert!(matches!(
            norm_match_scale(&early, &final_d, 1.5),
            Err(GeometryError::DirectionFlip { .. })
        ));
    }

    #[test]
    fn alignment_final_step_is_one() {
        let series: Vec<(usize, UpdateDelta)> = (1..=3)
            .map(|s| {
                (
                    s * 10,
                    delta_of(&[(ATTN0, random_matrix(6, 6, s as u64)), (MLP1, random_matrix(6, 8, 100 + s as u64))]),
                )
            })
            .collect();
        let a = alignment_trajectory(&series, 3).unwrap();
        assert_eq!(a.steps, vec![10, 20, 30]);
        assert_relative_eq!(*a.values.last().unwrap(), 1.0, epsilon = 1e-9);
        assert!(a.values.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn alignment_k_max_guard() {
        let series: Vec<(usize, UpdateDelta)> =
            (0..2).map(|s| (s, delta_of(&[(ATTN0, random_matrix(4, 4, s as u64))]))).collect();
        assert!(matches!(
            alignment_trajectory(&series, 5),
            Err(GeometryError::KMaxTooLarge { .. })
        ));
    }

    #[test]
    fn alignment_of_unrelated_matrices_matches_random_cosine() {
        // Monte-Carlo oracle: for independent uniformly random unit vectors in
        // R^d, E|cos| = sqrt(2 / (pi d)). Gaussian matrices give rotation
        // invariance, so their top-1 left-singular directions are uniform.
        let d = 48;
        let trials = 60;
        let mut mean = 0.0;
        for t in 0..trials {
            let a = gaussian_matrix(d, d, 1000 + t);
            let b = gaussian_matrix(d, d, 5000 + t);
            let series = vec![
                (0usize, delta_of(&[(ATTN0, a)])),
                (1usize, delta_of(&[(ATTN0, b)])),
            ];
            let series_val = alignment_trajectory(&series, 1).unwrap().values[0];
            mean += series_val;
        }
        mean /= trials as f64;
        let expected = (2.0 / (std::f64::consts::PI * d as f64)).sqrt();
        // sd of |cos| is about 1/sqrt(d); allow 4 MC standard errors.
        let tol = 4.0 / (d as f64).sqrt() / (trials as f64).sqrt() + 0.02;
        assert!(
            (mean - expected).abs() < tol,
            "mean similarity {mean} vs expected {expected} (tol {tol})"
        );
    }

    #[test]
    fn pca_evr2_line_is_one() {
        let traj: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, -i as f64]).collect();
        assert_relative_eq!(pca_evr2(&traj).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pca_evr2_isotropic_cloud() {
        let d = 10;
        let n = 10_000;
        let cloud = gaussian_matrix(n, d, 77);
        let traj: Vec<Vec<f64>> = (0..n).map(|i| cloud.row(i).to_vec()).collect();
        let evr = pca_evr2(&traj).unwrap();
        // Sampling oracle: top sample eigenvalues of an identity-covariance
        // cloud exceed 1 by about sqrt(d/n); EVR_0:2 stays near 2/d.
        assert!((evr - 0.2).abs() < 0.02, "evr {evr}");
        assert!(evr > 2.0 / d as f64);
    }

    #[test]
    fn pca_evr2_gram_route_matches_covariance_route() {
        // 4 points in d=50 exercises the Gram path; oracle recomputes from
        // the d x d covariance directly.
        let pts: Vec<Vec<f64>> = (0..4).map(|i| gaussian_matrix(1, 50, 300 + i).row(0).to_vec()).collect();
        let evr = pca_evr2(&pts).unwrap();
        let d = 50;
        let t = pts.len();
        let mut mean = vec![0.0; d];
        for p in &pts {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / t as f64;
            }
        }
        let centered = DenseMatrix::from_fn(t, d, |i, j| pts[i][j] - mean[j]).unwrap();
        let cov = centered.transpose().matmul(&centered).unwrap();
        let mut lambda: Vec<f64> = cov.to_na().symmetric_eigen().eigenvalues.iter().map(|l| l.max(0.0)).collect();
        lambda.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let want = (lambda[0] + lambda[1]) / lambda.iter().sum::<f64>();
        assert_relative_eq!(evr, want, max_relative = 1e-9);
    }

    #[test]
    fn pca_evr2_guards() {
        assert!(matches!(
            pca_evr2(&[vec![1.0], vec![2.0]]),
            Err(GeometryError::TooFewPoints { got: 2 })
        ));
        let constant: Vec<Vec<f64>> = (0..4).map(|_| vec![1.0, 1.0]).collect();
        assert!(matches!(pca_evr2(&constant), Err(GeometryError::ZeroVariance)));
    }
}
