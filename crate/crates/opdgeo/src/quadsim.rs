//! Linearized single-token theory of on-policy distillation: a convex
//! quadratic objective 0.5 x'Ax - b'x whose gradient-descent dynamics are
//! computed three independent ways (iteration, closed form, spectral form),
//! plus the low-rank lock-in bound, module-block decoupling, and a
//! Monte-Carlo gradient-variance comparison against a REINFORCE-style
//! estimator.

use thiserror::Error;

use crate::linalg::{self, DenseMatrix, LinalgError};

/// Eigenvalues below `SUPPORT_CUTOFF * lambda_max` count as null directions.
pub const SUPPORT_CUTOFF: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = -1e-10;

#[derive(Debug, Error)]
pub enum QuadSimError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("curvature matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("curvature matrix is not symmetric (max deviation {max_dev})")]
    NotSymmetric { max_dev: f64 },
    #[error("curvature matrix is not PSD (min eigenvalue {min_eig})")]
    NotPsd { min_eig: f64 },
    #[error("driving term has length {got}, expected {want}")]
    BadDrivingTerm { got: usize, want: usize },
    #[error("step size {eta} outside convergent range (0, {limit})")]
    EtaOutOfRange { eta: f64, limit: f64 },
    #[error("inconsistent context shapes: {what}")]
    ShapeMismatch { what: String },
    #[error("no contexts supplied")]
    EmptyContexts,
    #[error("bad probability vector: {why}")]
    BadProbabilities { why: String },
    #[error("bad partition: {why}")]
    BadPartition { why: String },
    #[error("model has no module partition")]
    NoPartition,
    #[error("k = {k} must satisfy 1 <= k < dim = {dim}")]
    BadK { k: usize, dim: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn matvec(m: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    assert_eq!(m.cols(), x.len());
    (0..m.rows()).map(|i| dot(m.row(i), x)).collect()
}

/// y = M' x  (transpose-multiply without materializing the transpose)
fn matvec_t(m: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    assert_eq!(m.rows(), x.len());
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        let xi = x[i];
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += xi * v;
        }
    }
    out
}

/// Student Fisher information of a categorical distribution at the base
/// point: F = Diag(p0) - p0 p0'.
#[derive(Debug, Clone)]
pub struct FisherAtBase {
    p0: Vec<f64>,
    f: DenseMatrix,
}

impl FisherAtBase {
    pub fn new(p0: &[f64]) -> Result<Self, QuadSimError> {
        validate_probabilities(p0)?;
        let f = DenseMatrix::from_fn(p0.len(), p0.len(), |i, j| {
            let diag = if i == j { p0[i] } else { 0.0 };
            diag - p0[i] * p0[j]
        })
        .expect("finite probabilities");
        Ok(Self { p0: p0.to_vec(), f })
    }

    pub fn p0(&self) -> &[f64] {
        &self.p0
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.f
    }

    /// F x, i.e. p0 .* x - (p0 . x) p0 applied through the dense matrix.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        matvec(&self.f, x)
    }
}

fn validate_probabilities(p0: &[f64]) -> Result<(), QuadSimError> {
    if p0.is_empty() {
        return Err(QuadSimError::BadProbabilities { why: "empty vector".into() });
    }
    if p0.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(QuadSimError::BadProbabilities { why: "negative or non-finite entry".into() });
    }
    let sum: f64 = p0.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(QuadSimError::BadProbabilities { why: format!("entries sum to {sum}") });
    }
    Ok(())
}

/// Convex quadratic surrogate 0.5 x'Ax - b'x with gradient-descent step
/// size eta and an optional disjoint partition of coordinates into module
/// blocks.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    a: DenseMatrix,
    b: Vec<f64>,
    eta: f64,
    partition: Option<Vec<Vec<usize>>>,
}

impl QuadraticModel {
    pub fn new(
        a: DenseMatrix,
        b: Vec<f64>,
        eta: f64,
        partition: Option<Vec<Vec<usize>>>,
    ) -> Result<Self, QuadSimError> {
        if a.rows() != a.cols() {
            return Err(QuadSimError::NotSquare { rows: a.rows(), cols: a.cols() });
        }
        let d = a.rows();
        let max_dev = a.max_abs_diff(&a.transpose());
        if max_dev > SYMMETRY_TOL {
            return Err(QuadSimError::NotSymmetric { max_dev });
        }
        let min_eig = a
            .to_na()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < PSD_TOL {
            return Err(QuadSimError::NotPsd { min_eig });
        }
        if b.len() != d {
            return Err(QuadSimError::BadDrivingTerm { got: b.len(), want: d });
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(QuadSimError::EtaOutOfRange { eta, limit: f64::INFINITY });
        }
        if let Some(part) = &partition {
            let mut seen = vec![false; d];
            for block in part {
                for &i in block {
                    if i >= d {
                        return Err(QuadSimError::BadPartition {
                            why: format!("index {i} out of range for dim {d}"),
                        });
                    }
                    if seen[i] {
                        return Err(QuadSimError::BadPartition {
                            why: format!("index {i} appears twice"),
                        });
                    }
                    seen[i] = true;
                }
            }
            if !seen.iter().all(|s| *s) {
                return Err(QuadSimError::BadPartition { why: "partition does not cover all indices".into() });
            }
        }
        Ok(Self { a, b, eta, partition })
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn partition(&self) -> Option<&[Vec<usize>]> {
        self.partition.as_deref()
    }

    /// The quadratic objective 0.5 x'Ax - b'x.
    pub fn loss(&self, x: &[f64]) -> f64 {
        0.5 * dot(x, &matvec(&self.a, x)) - dot(&self.b, x)
    }

    pub fn lambda_max(&self) -> f64 {
        // A is PSD, so the top eigenvalue equals the spectral norm.
        linalg::spectral_norm(&self.a).expect("validated matrix")
    }

    fn check_convergent_eta(&self) -> Result<(), QuadSimError> {
        let limit = 2.0 / self.lambda_max();
        if self.eta >= limit {
            return Err(QuadSimError::EtaOutOfRange { eta: self.eta, limit });
        }
        Ok(())
    }

    /// Eigen-decomposition of A, eigenvalues sorted descending with matching
    /// eigenvector columns.
    fn eigen_sorted(&self) -> (Vec<f64>, DenseMatrix) {
        let eig = self.a.to_na().symmetric_eigen();
        let d = self.dim();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).expect("finite"));
        let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let u = DenseMatrix::from_fn(d, d, |r, c| eig.eigenvectors[(r, order[c])]).expect("finite");
        (lambda, u)
    }
}

/// Build the quadratic model from per-context Jacobians J_c (logits x
/// params), teacher-minus-student logit residuals r_c, and base
/// next-token distributions p0(c):
/// A = mean of J_c' F_c J_c and b = mean of J_c' F_c r_c.
///
/// By construction b lies in the range of A.
pub fn build_from_contexts(
    jacobians: &[DenseMatrix],
    residuals: &[Vec<f64>],
    p0s: &[Vec<f64>],
    eta: f64,
    partition: Option<Vec<Vec<usize>>>,
) -> Result<QuadraticModel, QuadSimError> {
    if jacobians.is_empty() {
        return Err(QuadSimError::EmptyContexts);
    }
    if jacobians.len() != residuals.len() || jacobians.len() != p0s.len() {
        return Err(QuadSimError::ShapeMismatch {
            what: format!(
                "{} jacobians, {} residuals, {} p0 vectors",
                jacobians.len(),
                residuals.len(),
                p0s.len()
            ),
        });
    }
    let n = jacobians[0].rows();
    let d = jacobians[0].cols();
    let mut a = DenseMatrix::zeros(d, d);
    let mut b = vec![0.0; d];
    for (c, j) in jacobians.iter().enumerate() {
        if j.rows() != n || j.cols() != d {
            return Err(QuadSimError::ShapeMismatch {
                what: format!("jacobian {c} is {}x{}, expected {n}x{d}", j.rows(), j.cols()),
            });
        }
        if residuals[c].len() != n || p0s[c].len() != n {
            return Err(QuadSimError::ShapeMismatch {
                what: format!("residual/p0 length for context {c} does not match logit dim {n}"),
            });
        }
        let fisher = FisherAtBase::new(&p0s[c])?;
        let fj = fisher.matrix().matmul(j)?;
        a = a.add(&j.transpose().matmul(&fj)?)?;
        let fr = fisher.apply(&residuals[c]);
        for (bi, v) in b.iter_mut().zip(matvec_t(j, &fr)) {
            *bi += v;
        }
    }
    let scale = 1.0 / jacobians.len() as f64;
    a = a.scale(scale)?;
    for bi in b.iter_mut() {
        *bi *= scale;
    }
    // Symmetrize away accumulation round-off before validation.
    let at = a.transpose();
    let sym = a.add(&at)?.scale(0.5)?;
    QuadraticModel::new(sym, b, eta, partition)
}

/// Run the exact gradient-descent recursion x_{s+1} = (I - eta A) x_s +
/// eta b from x_0 = 0.
pub fn iterate_gd(model: &QuadraticModel, steps: usize) -> Vec<f64> {
    let mut x = vec![0.0; model.dim()];
    for _ in 0..steps {
        let ax = matvec(&model.a, &x);
        for i in 0..x.len() {
            x[i] += model.eta * (model.b[i] - ax[i]);
        }
    }
    x
}

fn matrix_power(m: &DenseMatrix, mut s: usize) -> Result<DenseMatrix, LinalgError> {
    let mut result = DenseMatrix::identity(m.rows());
    let mut base = m.clone();
    while s > 0 {
        if s & 1 == 1 {
            result = result.matmul(&base)?;
        }
        s >>= 1;
        if s > 0 {
            base = base.matmul(&base)?;
        }
    }
    Ok(result)
}

/// Closed-form dynamics x_s = [I - (I - eta A)^s] A^+ b, using the
/// pseudo-inverse on the support of A. Components of b in the null space of
/// A are dropped; callers supplying a hand-built b should keep it in
/// range(A) (models from [`build_from_contexts`] always satisfy this).
pub fn closed_form(model: &QuadraticModel, steps: usize) -> Result<Vec<f64>, QuadSimError> {
    model.check_convergent_eta()?;
    let d = model.dim();
    let p = DenseMatrix::identity(d).sub(&model.a.scale(model.eta)?)?;
    let pow = matrix_power(&p, steps)?;
    let geom = DenseMatrix::identity(d).sub(&pow)?;
    let pinv = linalg::pseudo_inverse(&model.a, SUPPORT_CUTOFF)?;
    Ok(matvec(&geom, &matvec(&pinv, &model.b)))
}

/// Per-eigendirection trajectory coefficient at a given step count.
#[derive(Debug, Clone)]
pub struct DirectionCoefficient {
    pub lambda: f64,
    /// beta_i = <b, u_i>
    pub beta: f64,
    /// (1 - (1 - eta lambda_i)^s) / lambda_i * beta_i
    pub coefficient: f64,
    /// Saturation factor 1 - (1 - eta lambda_i)^s in [0, 1] for convergent eta.
    pub saturation: f64,
}

/// Spectral form of the dynamics: the assembled vector and the coefficient
/// of every supported eigendirection.
#[derive(Debug, Clone)]
pub struct SpectralDynamics {
    pub directions: Vec<DirectionCoefficient>,
    pub assembled: Vec<f64>,
}

/// Dynamics in the eigenbasis of A: x_s = sum over lambda_i > 0 of
/// (1 - (1 - eta lambda_i)^s) / lambda_i * beta_i u_i.
pub fn spectral_form(model: &QuadraticModel, steps: usize) -> SpectralDynamics {
    let (lambda, u) = model.eigen_sorted();
    let cutoff = SUPPORT_CUTOFF * lambda.first().copied().unwrap_or(0.0).max(0.0);
    let d = model.dim();
    let mut assembled = vec![0.0; d];
    let mut directions = Vec::new();
    for (i, &l) in lambda.iter().enumerate() {
        if l <= cutoff {
            continue;
        }
        let ui: Vec<f64> = (0..d).map(|r| u.get(r, i)).collect();
        let beta = dot(&model.b, &ui);
        let saturation = 1.0 - (1.0 - model.eta * l).powi(steps as i32);
        let coefficient = saturation / l * beta;
        for (a, uv) in assembled.iter_mut().zip(&ui) {
            *a += coefficient * uv;
        }
        directions.push(DirectionCoefficient { lambda: l, beta, coefficient, saturation });
    }
    SpectralDynamics { directions, assembled }
}

/// Outcome of the low-rank lock-in bound check.
#[derive(Debug, Clone)]
pub struct LockinReport {
    pub k: usize,
    pub steps: usize,
    /// Measured concentration defect: ||P_perp b|| / ||b||.
    pub epsilon: f64,
    /// max over tail directions with lambda_i > 0 of |1-(1-eta lambda_i)^s| / lambda_i.
    pub rho_perp: f64,
    /// || x_s - [I-(I-eta A)^s] A^+ b_parallel ||.
    pub lhs: f64,
    /// rho_perp * epsilon * ||b||.
    pub rhs: f64,
    pub holds: bool,
}

/// Check the lock-in inequality: the deviation of the true iterate from the
/// dynamics driven only by the top-k component of b is bounded by
/// rho_perp(s) * epsilon * ||b||. The iterate side is computed with
/// [`iterate_gd`], independently of the eigenbasis route.
pub fn lockin_bound_check(model: &QuadraticModel, k: usize, steps: usize) -> Result<LockinReport, QuadSimError> {
    let d = model.dim();
    if k == 0 || k >= d {
        return Err(QuadSimError::BadK { k, dim: d });
    }
    model.check_convergent_eta()?;
    let (lambda, u) = model.eigen_sorted();
    let cutoff = SUPPORT_CUTOFF * lambda[0].max(0.0);

    // Reference trajectory driven by the top-k part of b.
    let mut reference = vec![0.0; d];
    let mut b_par_sq = 0.0;
    for i in 0..k {
        let ui: Vec<f64> = (0..d).map(|r| u.get(r, i)).collect();
        let beta = dot(&model.b, &ui);
        b_par_sq += beta * beta;
        if lambda[i] > cutoff {
            let coeff = (1.0 - (1.0 - model.eta * lambda[i]).powi(steps as i32)) / lambda[i] * beta;
            for (rf, uv) in reference.iter_mut().zip(&ui) {
                *rf += coeff * uv;
            }
        }
    }

    let x = iterate_gd(model, steps);
    let lhs = norm(&x.iter().zip(&reference).map(|(a, b)| a - b).collect::<Vec<_>>());

    let b_norm = norm(&model.b);
    let perp_sq = (b_norm * b_norm - b_par_sq).max(0.0);
    let epsilon = if b_norm > 0.0 { perp_sq.sqrt() / b_norm } else { 0.0 };
    let rho_perp = lambda[k..]
        .iter()
        .filter(|l| **l > cutoff)
        .map(|&l| (1.0 - (1.0 - model.eta * l).powi(steps as i32)).abs() / l)
        .fold(0.0, f64::max);
    let rhs = rho_perp * epsilon * b_norm;
    Ok(LockinReport { k, steps, epsilon, rho_perp, lhs, rhs, holds: lhs <= rhs + 1e-12 })
}

/// Block-local limit solution for one module.
#[derive(Debug, Clone)]
pub struct BlockSolution {
    pub indices: Vec<usize>,
    pub solution: Vec<f64>,
    /// True when the diagonal block was rank-deficient and the solution used
    /// a pseudo-inverse on its support.
    pub singular: bool,
}

/// Result of the module-decoupling approximation.
#[derive(Debug, Clone)]
pub struct BlockDecoupling {
    pub blocks: Vec<BlockSolution>,
    /// Exact limit A^+ b.
    pub exact: Vec<f64>,
    /// Concatenated blockwise solution A_mm^+ b_m.
    pub blockwise: Vec<f64>,
    /// ||exact - blockwise|| / ||exact|| (absolute if exact is zero).
    pub coupling_error: f64,
}

/// Approximate the limit update modulewise as A_mm^+ b_m and report the
/// relative error against the exact A^+ b.
pub fn block_decoupling(model: &QuadraticModel) -> Result<BlockDecoupling, QuadSimError> {
    let partition = model.partition().ok_or(QuadSimError::NoPartition)?.to_vec();
    let d = model.dim();
    let exact_x = matvec(&linalg::pseudo_inverse(&model.a, SUPPORT_CUTOFF)?, &model.b);

    let mut blockwise = vec![0.0; d];
    let mut blocks = Vec::with_capacity(partition.len());
    for indices in &partition {
        if indices.is_empty() {
            blocks.push(BlockSolution { indices: Vec::new(), solution: Vec::new(), singular: false });
            continue;
        }
        let m = indices.len();
        let sub = DenseMatrix::from_fn(m, m, |i, j| model.a.get(indices[i], indices[j]))?;
        let b_m: Vec<f64> = indices.iter().map(|&i| model.b[i]).collect();
        let spec = linalg::spectral_norm(&sub)?;
        let eps_local = SUPPORT_CUTOFF * spec.max(f64::MIN_POSITIVE);
        let eig_min = sub
            .to_na()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let singular = eig_min <= eps_local;
        let sol = matvec(&linalg::pseudo_inverse(&sub, SUPPORT_CUTOFF)?, &b_m);
        for (&i, &v) in indices.iter().zip(&sol) {
            blockwise[i] = v;
        }
        blocks.push(BlockSolution { indices: indices.clone(), solution: sol, singular });
    }

    let diff = norm(&exact_x.iter().zip(&blockwise).map(|(a, b)| a - b).collect::<Vec<_>>());
    let exact_norm = norm(&exact_x);
    let coupling_error = if exact_norm > 0.0 { diff / exact_norm } else { diff };
    Ok(BlockDecoupling { blocks, exact: exact_x, blockwise, coupling_error })
}

/// Distribution of the scalar advantage used by the REINFORCE-style
/// estimator in the variance comparison.
#[derive(Debug, Clone)]
pub enum AdvantageModel {
    /// Reward ~ Bernoulli(p), independent of the sampled token; the
    /// advantage is reward - p.
    IndependentBernoulli { p: f64 },
    /// Reward 1 exactly when the sampled token equals the context's target
    /// token; the advantage is reward minus the exact mean reward.
    TargetToken { targets: Vec<usize> },
}

/// Monte-Carlo trace-of-covariance estimates for the distillation and
/// REINFORCE gradient estimators on the same contexts.
#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub samples: usize,
    pub shards: usize,
    pub trace_cov_opd: f64,
    pub trace_cov_rl: f64,
    /// Standard errors over shard-level estimates.
    pub se_opd: f64,
    pub se_rl: f64,
}

const VARIANCE_SHARDS: usize = 32;

/// Estimate Tr Cov of the two per-sample gradients. A sample draws a
/// context uniformly; the distillation gradient is the deterministic
/// J_c' F_c r_c while the REINFORCE gradient draws y ~ p0(c) and a reward,
/// giving advantage * J_c' (e_y - p0(c)). Sharded for deterministic
/// parallel reduction: results are independent of `jobs`.
pub fn gradient_variance_compare(
    jacobians: &[DenseMatrix],
    residuals: &[Vec<f64>],
    p0s: &[Vec<f64>],
    advantage: &AdvantageModel,
    samples: usize,
    seed: u64,
    jobs: usize,
) -> Result<VarianceReport, QuadSimError> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    if jacobians.is_empty() {
        return Err(QuadSimError::EmptyContexts);
    }
    if jacobians.len() != residuals.len() || jacobians.len() != p0s.len() {
        return Err(QuadSimError::ShapeMismatch {
            what: "context list lengths differ".into(),
        });
    }
    if samples < 2 * VARIANCE_SHARDS {
        return Err(QuadSimError::TooFewSamples { need: 2 * VARIANCE_SHARDS, got: samples });
    }
    let n_ctx = jacobians.len();
    let d = jacobians[0].cols();
    let n = jacobians[0].rows();
    for (c, j) in jacobians.iter().enumerate() {
        if j.cols() != d || j.rows() != n || residuals[c].len() != n || p0s[c].len() != n {
            return Err(QuadSimError::ShapeMismatch { what: format!("context {c} shapes differ") });
        }
        validate_probabilities(&p0s[c])?;
    }
    if let AdvantageModel::TargetToken { targets } = advantage {
        if targets.len() != n_ctx {
            return Err(QuadSimError::ShapeMismatch { what: "targets length != context count".into() });
        }
        if targets.iter().any(|t| *t >= n) {
            return Err(QuadSimError::ShapeMismatch { what: "target token out of vocabulary".into() });
        }
    }

    // Deterministic per context: g_opd(c) = J_c' F_c r_c.
    let opd_grads: Vec<Vec<f64>> = (0..n_ctx)
        .map(|c| {
            let fisher = FisherAtBase::new(&p0s[c])?;
            Ok(matvec_t(&jacobians[c], &fisher.apply(&residuals[c])))
        })
        .collect::<Result<_, QuadSimError>>()?;

    let mean_reward = match advantage {
        AdvantageModel::IndependentBernoulli { p } => *p,
        AdvantageModel::TargetToken { targets } => {
            targets.iter().enumerate().map(|(c, &t)| p0s[c][t]).sum::<f64>() / n_ctx as f64
        }
    };

    let per_shard = samples / VARIANCE_SHARDS;
    let shard_job = |shard: usize| -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (shard as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1),
        );
        let mut sum_opd = vec![0.0; d];
        let mut sq_opd = vec![0.0; d];
        let mut sum_rl = vec![0.0; d];
        let mut sq_rl = vec![0.0; d];
        let mut g_rl = vec![0.0; d];
        for _ in 0..per_shard {
            let c = rng.random_range(0..n_ctx);
            for ((s, q), g) in sum_opd.iter_mut().zip(&mut sq_opd).zip(&opd_grads[c]) {
                *s += g;
                *q += g * g;
            }
            // y ~ p0(c) by inverse CDF.
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut y = n - 1;
            for (tok, &p) in p0s[c].iter().enumerate() {
                acc += p;
                if u < acc {
                    y = tok;
                    break;
                }
            }
            let reward = match advantage {
                AdvantageModel::IndependentBernoulli { p } => {
                    if rng.random::<f64>() < *p {
                        1.0
                    } else {
                        0.0
                    }
                }
                AdvantageModel::TargetToken { targets } => {
                    if y == targets[c] {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            let adv = reward - mean_reward;
            // g_rl = adv * J_c' (e_y - p0(c))
            let score: Vec<f64> = (0..n).map(|t| (if t == y { 1.0 } else { 0.0 }) - p0s[c][t]).collect();
            let jt_score = matvec_t(&jacobians[c], &score);
            for (g, v) in g_rl.iter_mut().zip(&jt_score) {
                *g = adv * v;
            }
            for ((s, q), g) in sum_rl.iter_mut().zip(&mut sq_rl).zip(&g_rl) {
                *s += g;
                *q += g * g;
            }
        }
        let m = per_shard as f64;
        let trace = |sum: &[f64], sq: &[f64]| -> f64 {
            sum.iter().zip(sq).map(|(s, q)| (q - s * s / m) / (m - 1.0)).sum()
        };
        (trace(&sum_opd, &sq_opd), trace(&sum_rl, &sq_rl))
    };

    let threads = jobs.max(1).min(VARIANCE_SHARDS);
    let mut shard_results = vec![(0.0, 0.0); VARIANCE_SHARDS];
    if threads <= 1 {
        for (shard, slot) in shard_results.iter_mut().enumerate() {
            *slot = shard_job(shard);
        }
    } else {
        let chunks: Vec<Vec<usize>> = (0..threads)
            .map(|t| (t..VARIANCE_SHARDS).step_by(threads).collect())
            .collect();
        let mut collected: Vec<(usize, (f64, f64))> = Vec::with_capacity(VARIANCE_SHARDS);
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    let job = &shard_job;
                    scope.spawn(move || chunk.iter().map(|&s| (s, job(s))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                collected.extend(h.join().expect("variance shard thread"));
            }
        });
        for (shard, res) in collected {
            shard_results[shard] = res;
        }
    }

    let s = VARIANCE_SHARDS as f64;
    let mean_of = |pick: fn(&(f64, f64)) -> f64| -> (f64, f64) {
        let mean = shard_results.iter().map(pick).sum::<f64>() / s;
        let var = shard_results.iter().map(|r| (pick(r) - mean).powi(2)).sum::<f64>() / (s - 1.0);
        (mean, (var / s).sqrt())
    };
    let (trace_cov_opd, se_opd) = mean_of(|r| r.0);
    let (trace_cov_rl, se_rl) = mean_of(|r| r.1);
    Ok(VarianceReport {
        samples: per_shard * VARIANCE_SHARDS,
        shards: VARIANCE_SHARDS,
        trace_cov_opd,
        trace_cov_rl,
        se_opd,
        se_rl,
    })
}

/// Seeded random orthogonal matrix: Gram-Schmidt on uniform columns.
pub fn random_orthogonal(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> DenseMatrix {
    use rand::Rng;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &cols {
            let proj = dot(&v, u);
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= proj * ui;
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            for vi in v.iter_mut() {
                *vi /= n;
            }
            cols.push(v);
        }
    }
    DenseMatrix::from_fn(d, d, |i, j| cols[j][i]).unwrap()
}

/// A = U diag(eigs) U', symmetrized against round-off, together with U.
pub fn spd_with_spectrum(eigs: &[f64], seed: u64) -> (DenseMatrix, DenseMatrix) {
    use rand::SeedableRng;
    let d = eigs.len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let u = random_orthogonal(d, &mut rng);
    let a = u
        .matmul(&DenseMatrix::from_diag(eigs))
        .unwrap()
        .matmul(&u.transpose())
        .unwrap();
    let a = a.add(&a.transpose()).unwrap().scale(0.5).unwrap();
    (a, u)
}

/// Linear combination of U's columns: sum of c * U[:, j].
pub fn eigvec_combination(u: &DenseMatrix, coeffs: &[(usize, f64)]) -> Vec<f64> {
    let mut b = vec![0.0; u.rows()];
    for &(j, c) in coeffs {
        for (i, bi) in b.iter_mut().enumerate() {
            *bi += c * u.get(i, j);
        }
    }
    b
}

/// One seeded well-posed model for oracle-equivalence checks: dimension in
/// [2, max_dim], possibly rank-deficient spectrum, b inside range(A), and a
/// convergent step size.
pub fn random_oracle_instance(max_dim: usize, seed: u64) -> QuadraticModel {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=max_dim.max(2));
    let rank = rng.random_range(1..=d);
    let mut eigs: Vec<f64> = (0..rank).map(|_| rng.random_range(0.05..4.0)).collect();
    eigs.resize(d, 0.0);
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let (a, u) = spd_with_spectrum(&eigs, seed ^ 0x51D0_17AC);
    let coeffs: Vec<(usize, f64)> =
        (0..rank).map(|j| (j, rng.random_range(-1.0..1.0))).collect();
    let b = eigvec_combination(&u, &coeffs);
    let eta = rng.random_range(0.05..1.95) / eigs[0];
    QuadraticModel::new(a, b, eta, None).expect("generated instance is well posed")
}

/// One seeded instance whose driving term is concentrated on the top-k
/// eigendirections (tail fraction <= 0.05) with spectral gap >= 10; returns
/// the model and k.
pub fn random_concentrated_instance(seed: u64) -> (QuadraticModel, usize) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(6..=24);
    let k = rng.random_range(1..=3.min(d - 1));
    let head: Vec<f64> = (0..k).map(|_| rng.random_range(10.0..20.0)).collect();
    let tail: Vec<f64> = (k..d).map(|_| rng.random_range(0.01..1.0)).collect();
    let mut eigs = head;
    eigs.extend(tail);
    eigs.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let (a, u) = spd_with_spectrum(&eigs, seed ^ 0xC0_4CE4);
    let mut coeffs: Vec<(usize, f64)> =
        (0..k).map(|j| (j, rng.random_range(0.5..1.0))).collect();
    let head_norm: f64 = coeffs.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
    let eps_target = rng.random_range(0.0..0.05);
    coeffs.push((k, eps_target * head_norm / (1.0 - eps_target * eps_target).sqrt()));
    let b = eigvec_combination(&u, &coeffs);
    let eta = rng.random_range(0.1..1.9) / eigs[0];
    let model =
        QuadraticModel::new(a, b, eta, None).expect("generated instance is well posed");
    (model, k)
}
