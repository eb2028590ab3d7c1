//! Desk-scale laboratory for the parameter-update geometry of on-policy
//! distillation (OPD) versus reinforcement learning, plus the EffOPD
//! directional-extrapolation accelerator and a linearized quadratic model of
//! OPD dynamics that serves as an exactly verifiable oracle.
//!
//! Module map:
//! - [`linalg`]: dense matrices, SVD, subspace similarity.
//! - [`geometry`]: spectral update metrics, truncation, norm scaling,
//!   alignment trajectories, PCA explained variance.
//! - [`toylab`]: teacher/student testbed with OPD and policy-gradient
//!   training on a synthetic token task.
//! - [`quadsim`]: quadratic model of local OPD dynamics with closed-form,
//!   iterative, and spectral solution routes.
//! - [`effopd`]: exponential-checkpoint extrapolation scheduler.
//! - [`intervene`]: sliding-window and truncated-delta interventions.
//! - [`store`]: bit-exact checkpoint and run persistence.
//! - [`cli`]: the `opdgeo` experiment harness.

pub mod cli;
pub mod effopd;
pub mod geometry;
pub mod intervene;
pub mod linalg;
pub mod quadsim;
pub mod store;
pub mod toylab;
