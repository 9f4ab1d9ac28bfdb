//! Integration engines for the Gaussian measure `mu` and its weighted
//! companion `nu = w * mu`.
//!
//! Two engines compute every volume integral:
//!
//! * **Seeded Monte Carlo** — samples the whitened standard normal in fixed
//!   batches. Each batch owns a dedicated counter-mode RNG stream derived
//!   from `(seed, domain, batch index)`, batches are mapped in parallel,
//!   and partial sums are folded in batch order, so an estimate is
//!   *bitwise* reproducible for a fixed seed regardless of worker count.
//!   Weighted integrals sample `mu` and multiply the integrand by `w`
//!   (importance form), which keeps one sample stream shared across both
//!   sides of an identity — the main tool for error cancellation in
//!   identity checks.
//! * **Tensor Gauss–Hermite** — products of the 1D rule from
//!   [`crate::quad`], exact through polynomial degree `2n-1` per axis.
//!   Guarded by a total-node budget ([`NODE_BUDGET`]) and a dimension cap
//!   ([`GH_MAX_DIM`]), since tensor grids explode combinatorially.
//!
//! Integrands are [`ScalarField`]s: their singular predicates are checked
//! *before* evaluation, flagged points are dropped and counted in
//! [`IntegralEstimate::dropped`]. The declared singular sets all have
//! measure zero, so a Monte Carlo run must report `dropped == 0` to be
//! valid; quadrature grids avoid them by construction (an odd node count is
//! bumped to even when the integrand is singular at the grid center, which
//! removes every zero coordinate from the grid — all built-in singular
//! sets are unions of coordinate hyperplanes and the origin). Undeclared
//! NaNs are *not* dropped: they poison the estimate so the failure is loud.

use crate::error::{EngineError, Result};
use crate::field::ScalarField;
use crate::model::{GaussianModel, Point};
use crate::quad::{self, QuadratureRule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Samples per Monte Carlo batch (one RNG stream each).
pub const MC_BATCH: u64 = 8192;
/// Total tensor-grid evaluation budget.
pub const NODE_BUDGET: u64 = 20_000_000;
/// Tensor Gauss–Hermite dimension cap.
pub const GH_MAX_DIM: usize = 8;
/// Per-axis node cap for tensor Gauss–Hermite.
pub const GH_MAX_NODES: usize = 20;

/// Stream domains: estimators that must not share samples draw from
/// different domains; estimators that *should* share (both sides of a
/// volume identity) use the same one.
pub mod streams {
    /// Volume integrals (identity left/right sides share this domain).
    pub const VOLUME: u32 = 0;
    /// Surface band estimators (independent from volume sides on purpose).
    pub const SURFACE: u32 = 1;
    /// Integrability screens (hypothesis checks).
    pub const SCREEN: u32 = 2;
    /// Quantile and exponential-moment estimation.
    pub const QUANTILE: u32 = 3;
    /// Point clouds for calculus property checks and spectral screens.
    pub const PROPERTY: u32 = 4;
}

/// A numerical integral with its error budget and the engine that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct IntegralEstimate {
    pub value: f64,
    /// One standard error for Monte Carlo estimates; 0 for deterministic
    /// quadrature (its error is the method's truncation error, controlled
    /// by node counts, not sampled).
    pub stderr: f64,
    pub method: String,
    pub n_eval: u64,
    /// Points skipped because a singular predicate flagged them.
    pub dropped: u64,
}

impl IntegralEstimate {
    pub fn exact(value: f64, method: impl Into<String>, n_eval: u64, dropped: u64) -> Self {
        IntegralEstimate {
            value,
            stderr: 0.0,
            method: method.into(),
            n_eval,
            dropped,
        }
    }
}

/// Tolerance for comparing two estimates: `sigmas` combined standard errors
/// with an absolute floor (deterministic quadrature has zero stderr, so the
/// floor is what guards it).
pub fn combined_tolerance(
    lhs: &IntegralEstimate,
    rhs: &IntegralEstimate,
    sigmas: f64,
    floor: f64,
) -> f64 {
    (sigmas * (lhs.stderr * lhs.stderr + rhs.stderr * rhs.stderr).sqrt()).max(floor)
}

/// Which engine computes a volume integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    MonteCarlo { budget: u64 },
    GaussHermite { nodes_per_dim: usize },
}

// ---- Monte Carlo ------------------------------------------------------------

fn stream_id(domain: u32, batch: u64) -> u64 {
    ((domain as u64) << 32) | batch
}

/// Deterministic batch-parallel fold over the sample stream
/// `(seed, domain)`. Each batch gets its own RNG stream and accumulator;
/// partial results merge in batch order, so the result is independent of
/// the rayon worker count.
pub(crate) fn mc_fold<A, I, S, M>(
    model: &GaussianModel,
    budget: u64,
    seed: u64,
    domain: u32,
    init: I,
    step: S,
    merge: M,
) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    S: Fn(&mut A, &Point) + Sync,
    M: Fn(A, A) -> A,
{
    let n_batches = budget.div_ceil(MC_BATCH);
    let partials: Vec<A> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_id(domain, b));
            let count = MC_BATCH.min(budget - b * MC_BATCH);
            let mut acc = init();
            let mut point = model.zero_point();
            for _ in 0..count {
                model.sample_into(&mut rng, &mut point);
                step(&mut acc, &point);
            }
            acc
        })
        .collect();
    partials
        .into_iter()
        .reduce(merge)
        .unwrap_or_else(&init)
}

#[derive(Clone, Copy)]
struct MeanAcc {
    sum: f64,
    sum_sq: f64,
    kept: u64,
    dropped: u64,
    /// Auxiliary channel (weight values in importance form).
    aux_sum: f64,
    aux_max: f64,
}

impl MeanAcc {
    fn zero() -> Self {
        MeanAcc {
            sum: 0.0,
            sum_sq: 0.0,
            kept: 0,
            dropped: 0,
            aux_sum: 0.0,
            aux_max: 0.0,
        }
    }

    fn merge(a: Self, b: Self) -> Self {
        MeanAcc {
            sum: a.sum + b.sum,
            sum_sq: a.sum_sq + b.sum_sq,
            kept: a.kept + b.kept,
            dropped: a.dropped + b.dropped,
            aux_sum: a.aux_sum + b.aux_sum,
            aux_max: a.aux_max.max(b.aux_max),
        }
    }

    fn estimate(&self, method: &str) -> IntegralEstimate {
        let n = self.kept.max(1) as f64;
        let mean = self.sum / n;
        let var = ((self.sum_sq / n - mean * mean) * n / (n - 1.0).max(1.0)).max(0.0);
        IntegralEstimate {
            value: mean,
            stderr: (var / n).sqrt(),
            method: method.into(),
            n_eval: self.kept + self.dropped,
            dropped: self.dropped,
        }
    }
}

/// Monte Carlo mean of `eval` over the stream, with a secondary channel.
/// `eval` returns `None` at dropped (singular) points, otherwise
/// `(value, aux)`.
fn mc_mean_with_aux(
    model: &GaussianModel,
    budget: u64,
    seed: u64,
    domain: u32,
    eval: impl Fn(&Point) -> Option<(f64, f64)> + Sync,
) -> MeanAcc {
    mc_fold(
        model,
        budget,
        seed,
        domain,
        MeanAcc::zero,
        |acc, p| match eval(p) {
            None => acc.dropped += 1,
            Some((v, aux)) => {
                acc.sum += v;
                acc.sum_sq += v * v;
                acc.kept += 1;
                acc.aux_sum += aux;
                acc.aux_max = acc.aux_max.max(aux.abs());
            }
        },
        MeanAcc::merge,
    )
}

// ---- tensor quadrature -------------------------------------------------------

/// Evaluate a tensor-product rule: one 1D rule per axis, odometer order.
/// Returns `(sum of weight-products times f, evaluation count)`.
pub(crate) fn tensor_quad(
    rules: &[QuadratureRule],
    mut f: impl FnMut(&[f64]) -> f64,
) -> (f64, u64) {
    let dim = rules.len();
    let mut idx = vec![0usize; dim];
    let mut coords = vec![0.0f64; dim];
    let mut total = 0.0;
    let mut count = 0u64;
    'outer: loop {
        let mut weight = 1.0;
        for (k, rule) in rules.iter().enumerate() {
            coords[k] = rule.nodes[idx[k]];
            weight *= rule.weights[idx[k]];
        }
        total += weight * f(&coords);
        count += 1;
        // Odometer increment.
        for k in 0..dim {
            idx[k] += 1;
            if idx[k] < rules[k].len() {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    (total, count)
}

fn check_node_budget(nodes_per_dim: usize, dim: usize, extra_factor: u64) -> Result<()> {
    if dim > GH_MAX_DIM {
        return Err(EngineError::InvalidParameter {
            name: "dim",
            reason: format!("tensor Gauss–Hermite supports dim <= {GH_MAX_DIM}, got {dim}"),
        });
    }
    if nodes_per_dim > GH_MAX_NODES {
        return Err(EngineError::InvalidParameter {
            name: "nodes_per_dim",
            reason: format!("per-axis cap is {GH_MAX_NODES}, got {nodes_per_dim}"),
        });
    }
    let required = (nodes_per_dim as u128).pow(dim as u32) * extra_factor as u128;
    if required > NODE_BUDGET as u128 {
        return Err(EngineError::NodeBudgetOverflow {
            nodes_per_dim,
            dim,
            required,
            budget: NODE_BUDGET,
        });
    }
    Ok(())
}

/// Resolve the effective per-axis node count: odd counts are bumped to even
/// when the integrand is singular at the grid center (see module docs).
fn effective_nodes(nodes_per_dim: usize, model: &GaussianModel, f: &ScalarField) -> usize {
    if nodes_per_dim % 2 == 1 && f.is_singular(&model.zero_point()) {
        nodes_per_dim + 1
    } else {
        nodes_per_dim
    }
}

fn gauss_hermite_tensor(
    model: &GaussianModel,
    f: &ScalarField,
    nodes_per_dim: usize,
) -> Result<IntegralEstimate> {
    let nodes = effective_nodes(nodes_per_dim, model, f);
    check_node_budget(nodes, model.dim(), 1)?;
    let rule = quad::gauss_hermite(nodes)?;
    let rules = vec![rule; model.dim()];
    let mut point = model.zero_point();
    let mut dropped = 0u64;
    let (sum, count) = tensor_quad(&rules, |coords| {
        point.coords_mut().copy_from_slice(coords);
        if f.is_singular(&point) {
            dropped += 1;
            0.0
        } else {
            f.value_unchecked(&point)
        }
    });
    Ok(IntegralEstimate::exact(sum, "gauss_hermite", count, dropped))
}

// ---- public entry points -----------------------------------------------------

/// `int f dmu` over the whitened standard Gaussian.
pub fn integrate_mu(
    model: &GaussianModel,
    f: &ScalarField,
    engine: Engine,
    seed: u64,
    domain: u32,
) -> Result<IntegralEstimate> {
    match engine {
        Engine::MonteCarlo { budget } => {
            if budget == 0 {
                return Err(EngineError::InvalidParameter {
                    name: "budget",
                    reason: "Monte Carlo budget must be positive".into(),
                });
            }
            let acc = mc_mean_with_aux(model, budget, seed, domain, |p| {
                if f.is_singular(p) {
                    None
                } else {
                    Some((f.value_unchecked(p), 0.0))
                }
            });
            Ok(acc.estimate("mc"))
        }
        Engine::GaussHermite { nodes_per_dim } => gauss_hermite_tensor(model, f, nodes_per_dim),
    }
}

/// `int f dnu = int f * exp(log w) dmu` in importance form: the engine
/// samples (or grids) `mu` and multiplies by the weight density. Warns on
/// stderr when the empirical weight has heavy tails (max/mean > 1e3) —
/// the estimate is still returned, but its variance is then suspect.
pub fn integrate_nu(
    model: &GaussianModel,
    log_weight: &ScalarField,
    f: &ScalarField,
    engine: Engine,
    seed: u64,
    domain: u32,
) -> Result<IntegralEstimate> {
    match engine {
        Engine::MonteCarlo { budget } => {
            if budget == 0 {
                return Err(EngineError::InvalidParameter {
                    name: "budget",
                    reason: "Monte Carlo budget must be positive".into(),
                });
            }
            let acc = mc_mean_with_aux(model, budget, seed, domain, |p| {
                if f.is_singular(p) || log_weight.is_singular(p) {
                    None
                } else {
                    let w = log_weight.value_unchecked(p).exp();
                    Some((f.value_unchecked(p) * w, w))
                }
            });
            let est = acc.estimate("mc");
            let mean_w = acc.aux_sum / acc.kept.max(1) as f64;
            if mean_w > 0.0 && acc.aux_max / mean_w > 1e3 {
                eprintln!(
                    "warning: weight `{}` has heavy tails (max/mean = {:.3e}); \
                     importance estimate `{}` may be undercovered",
                    log_weight.label(),
                    acc.aux_max / mean_w,
                    f.label()
                );
            }
            Ok(est)
        }
        Engine::GaussHermite { nodes_per_dim } => {
            let weighted = weighted_integrand(log_weight, f);
            gauss_hermite_tensor(model, &weighted, nodes_per_dim)
        }
    }
}

/// `f * exp(log w)` as a field (no gradient; singular sets union).
pub(crate) fn weighted_integrand(log_weight: &ScalarField, f: &ScalarField) -> ScalarField {
    let lw = log_weight.clone();
    let ff = f.clone();
    let lw_s = log_weight.clone();
    let f_s = f.clone();
    ScalarField::from_fn(format!("({})*w[{}]", f.label(), log_weight.label()), move |p| {
        ff.value_unchecked(p) * lw.value_unchecked(p).exp()
    })
    .with_singular(move |p| lw_s.is_singular(p) || f_s.is_singular(p))
}
