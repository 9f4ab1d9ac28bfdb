//! Weight densities `w` for the weighted measure `nu = w * mu`, with the
//! exponent bookkeeping the calculus depends on, plus numerical screens:
//! an integrability check for the moments every identity needs, an
//! exponential-moment threshold estimator for seminorms, and an absolute
//! moment formula check.
//!
//! A weight is stored through `log w` — a [`ScalarField`] carrying the
//! analytic gradient (and Hessian where one exists) in whitened
//! coordinates. All built-ins come from a small family:
//!
//! * `unit` — `w = 1`, the unweighted Gaussian case;
//! * `gaussian_type(lambda)` — `log w = lambda * (x,x)_X`, quadratic with a
//!   constant Hessian `2*lambda*Lambda`;
//! * `lq_norm(q, scale)` — `log w = scale * ||x||_q`, positively
//!   1-homogeneous, gradient bounded, kinked on coordinate hyperplanes;
//! * `sup_norm_kl(grid)` — `log w = max_xi |f(xi)|` of the truncated
//!   Karhunen–Loeve path, gradient by the argmax formula;
//! * `square_norm` — `w = (x,x)_X^2`, the log-unbounded-Hessian example
//!   used to stress the divergence-operator bounds; singular at the
//!   origin.
//!
//! Declared exponents `(s, t)` with `s > 1`, `t > s' = s/(s-1)` gate every
//! downstream theorem through `p_min = t/(t - s')`; checks warn (never
//! error) when asked to run below `p_min`.

use crate::error::{EngineError, Result};
use crate::field::ScalarField;
use crate::integrate::{mc_fold, streams, IntegralEstimate};
use crate::model::{GaussianModel, Point};
use nalgebra::DMatrix;
use serde::Serialize;
use statrs::function::gamma::gamma;

/// A positive density `w = exp(log w)` with declared integrability
/// exponents. Immutable and cheaply cloneable.
#[derive(Debug, Clone)]
pub struct Weight {
    label: String,
    logw: ScalarField,
    s: f64,
    t: f64,
}

/// Exponent bookkeeping surfaced in reports: every trace/divergence
/// theorem gates on `p >= p_min = t/(t - s')`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExponentInfo {
    pub s: f64,
    pub t: f64,
    pub s_prime: f64,
    pub p_min: f64,
    /// Whether `t >= 2 s'` (the stronger bound some estimates prefer);
    /// recorded, never enforced.
    pub t_at_least_two_s_prime: bool,
}

impl Weight {
    /// Wrap a log-density field with declared exponents. Enforces `s > 1`
    /// and `t > s' = s/(s-1)`.
    pub fn new(
        label: impl Into<String>,
        logw: ScalarField,
        s: f64,
        t: f64,
    ) -> Result<Self> {
        if !(s > 1.0) || !s.is_finite() {
            return Err(EngineError::InvalidParameter {
                name: "s",
                reason: format!("weight exponent s must be finite and > 1, got {s}"),
            });
        }
        let s_prime = s / (s - 1.0);
        if !(t > s_prime) || !t.is_finite() {
            return Err(EngineError::InvalidParameter {
                name: "t",
                reason: format!(
                    "weight exponent t must be finite and > s' = {s_prime}, got {t}"
                ),
            });
        }
        Ok(Weight {
            label: label.into(),
            logw,
            s,
            t,
        })
    }

    /// Replace the declared exponents (same validation as [`Weight::new`]).
    pub fn with_exponents(self, s: f64, t: f64) -> Result<Self> {
        Weight::new(self.label.clone(), self.logw, s, t)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// The log-density field; carries gradient/Hessian/singular data.
    pub fn logw(&self) -> &ScalarField {
        &self.logw
    }

    /// `w(p) = exp(log w(p))`; NaN on the declared singular set.
    pub fn w(&self, p: &Point) -> f64 {
        self.logw.value(p).exp()
    }

    /// The density as a field (kept consistent with `logw` by
    /// construction; shares its singular set).
    pub fn w_field(&self) -> ScalarField {
        let lw = self.logw.clone();
        let lw_s = self.logw.clone();
        ScalarField::from_fn(format!("exp({})", self.label), move |p: &Point| {
            lw.value_unchecked(p).exp()
        })
        .with_singular(move |p: &Point| lw_s.is_singular(p))
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// Conjugate exponent `s' = s/(s-1)`.
    pub fn s_prime(&self) -> f64 {
        self.s / (self.s - 1.0)
    }

    /// `p_min = t/(t - s')`, the smallest exponent the calculus supports.
    pub fn p_min(&self) -> f64 {
        let sp = self.s_prime();
        self.t / (self.t - sp)
    }

    pub fn exponents(&self) -> ExponentInfo {
        ExponentInfo {
            s: self.s,
            t: self.t,
            s_prime: self.s_prime(),
            p_min: self.p_min(),
            t_at_least_two_s_prime: self.t >= 2.0 * self.s_prime(),
        }
    }

    /// Warning text when a check is requested at an exponent below
    /// `p_min`; the engine warns and proceeds.
    pub fn warn_below_p_min(&self, p: f64) -> Option<String> {
        if p < self.p_min() {
            Some(format!(
                "weight `{}`: requested exponent p = {p} is below p_min = {:.6} \
                 (s = {}, t = {}); results are outside the guaranteed range",
                self.label,
                self.p_min(),
                self.s,
                self.t
            ))
        } else {
            None
        }
    }

    pub fn has_hess(&self) -> bool {
        self.logw.has_hess()
    }

    // ---- built-ins -----------------------------------------------------

    /// The unweighted case `w = 1` (`log w = 0`, zero derivatives).
    pub fn unit(model: &GaussianModel) -> Weight {
        let dim = model.dim();
        let logw = ScalarField::from_fn("unit", |_p: &Point| 0.0)
            .with_grad(move |_p: &Point| vec![0.0; dim])
            .with_hess(move |_p: &Point| DMatrix::zeros(dim, dim));
        Weight::new("unit", logw, 2.0, 4.0).expect("static exponents are valid")
    }

    /// `log w = lambda * (x, x)_X = lambda * sum_k lambda_k y_k^2`.
    /// Gradient `2 lambda lambda_k y_k`, Hessian the constant diagonal
    /// `2 lambda Lambda`. Integrable powers are screened at runtime
    /// (`exp(eta (x,x))` has finite mass iff `eta < 1/(2 lambda_max)`).
    pub fn gaussian_type(lambda: f64, model: &GaussianModel) -> Weight {
        let spec = model.spectrum().to_vec();
        let spec_g = spec.clone();
        let dim = model.dim();
        let hess_const = DMatrix::from_fn(dim, dim, |i, j| {
            if i == j {
                2.0 * lambda * spec[i]
            } else {
                0.0
            }
        });
        let spec_e = spec.clone();
        let logw = ScalarField::from_fn(
            format!("gaussian_type[{lambda}]"),
            move |p: &Point| {
                lambda
                    * spec_e
                        .iter()
                        .zip(p.coords())
                        .map(|(l, y)| l * y * y)
                        .sum::<f64>()
            },
        )
        .with_grad(move |p: &Point| {
            spec_g
                .iter()
                .zip(p.coords())
                .map(|(l, y)| 2.0 * lambda * l * y)
                .collect()
        })
        .with_hess(move |_p: &Point| hess_const.clone());
        Weight::new(format!("gaussian_type[{lambda}]"), logw, 2.0, 4.0)
            .expect("static exponents are valid")
    }

    /// `w = (x,x)_X^2`, i.e. `log w = 2 ln (x,x)_X`. Analytic gradient
    /// `4 lambda_k y_k / (x,x)` and Hessian
    /// `4 (lambda_i d_ij / (x,x) - 2 lambda_i lambda_j y_i y_j / (x,x)^2)`,
    /// both singular at the origin. The Hessian's largest eigenvalue is
    /// unbounded below near 0, which is exactly what the divergence-bound
    /// falsifier exploits. Exponents default to `(2, 3)`: at truncation
    /// dimension `n` the gradient moment `|grad log w|^t` behaves like
    /// `|y|^{-t}` near 0, integrable only for `t < n`.
    pub fn square_norm(model: &GaussianModel) -> Weight {
        let spec = model.spectrum().to_vec();
        let spec_g = spec.clone();
        let spec_h = spec.clone();
        let dim = model.dim();
        let ambient_sq = move |spec: &[f64], p: &Point| -> f64 {
            spec.iter()
                .zip(p.coords())
                .map(|(l, y)| l * y * y)
                .sum::<f64>()
        };
        let spec_e = spec.clone();
        let logw = ScalarField::from_fn("square_norm", move |p: &Point| {
            2.0 * ambient_sq(&spec_e, p).ln()
        })
        .with_grad(move |p: &Point| {
            let s: f64 = spec_g
                .iter()
                .zip(p.coords())
                .map(|(l, y)| l * y * y)
                .sum();
            spec_g
                .iter()
                .zip(p.coords())
                .map(|(l, y)| 4.0 * l * y / s)
                .collect()
        })
        .with_hess(move |p: &Point| {
            let s: f64 = spec_h
                .iter()
                .zip(p.coords())
                .map(|(l, y)| l * y * y)
                .sum();
            DMatrix::from_fn(dim, dim, |i, j| {
                let diag = if i == j { spec_h[i] / s } else { 0.0 };
                4.0 * (diag
                    - 2.0 * spec_h[i] * spec_h[j] * p[i] * p[j] / (s * s))
            })
        })
        .with_singular(|p: &Point| p.coords().iter().all(|&y| y == 0.0));
        Weight::new("square_norm", logw, 2.0, 3.0).expect("static exponents are valid")
    }

    /// `log w = scale * ||x||_q` with
    /// `||x||_q = (sum_k lambda_k^{q/2} |y_k|^q)^{1/q}`, `q > 1`.
    /// 1-homogeneous, so the gradient is bounded; gradient and Hessian are
    /// analytic away from the coordinate hyperplanes `{y_k = 0}`, which
    /// are declared singular.
    pub fn lq_norm(q: f64, scale: f64, model: &GaussianModel) -> Result<Weight> {
        if !(q > 1.0) || !q.is_finite() {
            return Err(EngineError::InvalidParameter {
                name: "q",
                reason: format!("lq_norm needs q > 1, got {q}"),
            });
        }
        if !scale.is_finite() || scale == 0.0 {
            return Err(EngineError::InvalidParameter {
                name: "scale",
                reason: format!("lq_norm scale must be finite and nonzero, got {scale}"),
            });
        }
        let coeff: Vec<f64> = model
            .spectrum()
            .iter()
            .map(|l| l.powf(q / 2.0))
            .collect();
        let coeff_g = coeff.clone();
        let coeff_h = coeff.clone();
        let dim = model.dim();
        let label = format!("lq_norm[q={q}]");
        let s_fn = move |coeff: &[f64], p: &Point| -> f64 {
            coeff
                .iter()
                .zip(p.coords())
                .map(|(c, y)| c * y.abs().powf(q))
                .sum::<f64>()
        };
        let coeff_e = coeff.clone();
        let logw = ScalarField::from_fn(label.clone(), move |p: &Point| {
            scale * s_fn(&coeff_e, p).powf(1.0 / q)
        })
        .with_grad(move |p: &Point| {
            let s: f64 = coeff_g
                .iter()
                .zip(p.coords())
                .map(|(c, y)| c * y.abs().powf(q))
                .sum();
            let s_pow = s.powf(1.0 / q - 1.0);
            coeff_g
                .iter()
                .zip(p.coords())
                .map(|(c, y)| scale * c * y.signum() * y.abs().powf(q - 1.0) * s_pow)
                .collect()
        })
        .with_hess(move |p: &Point| {
            let s: f64 = coeff_h
                .iter()
                .zip(p.coords())
                .map(|(c, y)| c * y.abs().powf(q))
                .sum();
            let s1 = s.powf(1.0 / q - 1.0);
            let s2 = s.powf(1.0 / q - 2.0);
            DMatrix::from_fn(dim, dim, |i, j| {
                let yi = p[i];
                let yj = p[j];
                let diag = if i == j {
                    coeff_h[i] * yi.abs().powf(q - 2.0) * s1
                } else {
                    0.0
                };
                let cross = coeff_h[i]
                    * coeff_h[j]
                    * (yi * yj).signum()
                    * yi.abs().powf(q - 1.0)
                    * yj.abs().powf(q - 1.0)
                    * s2;
                scale * (q - 1.0) * (diag - cross)
            })
        })
        .with_singular(|p: &Point| p.coords().iter().any(|&y| y == 0.0));
        Weight::new(label, logw, 2.0, 4.0)
    }

    /// `log w = max_xi |f(xi)|` for the truncated Karhunen–Loeve path
    /// `f(xi) = sum_k y_k sqrt(2 lambda_k) sin(xi / sqrt(lambda_k))`,
    /// evaluated on a uniform grid over `[0, 1]` (first-index tie-break
    /// for the argmax). The gradient is the argmax formula
    /// `sign(f(xi*)) sqrt(2 lambda_k) sin(xi* / sqrt(lambda_k))`. No
    /// Hessian exists (the max of smooth functions is only piecewise
    /// smooth); checks needing one report that honestly. Intended for
    /// models built from the Brownian-path spectrum.
    pub fn sup_norm_kl(grid_size: usize, model: &GaussianModel) -> Result<Weight> {
        if grid_size < 64 {
            return Err(EngineError::InvalidParameter {
                name: "grid_size",
                reason: format!("sup-norm grid needs at least 64 points, got {grid_size}"),
            });
        }
        let dim = model.dim();
        // basis[j * dim + k] = sqrt(2 lambda_k) sin(xi_j / sqrt(lambda_k)),
        // xi_j = j / (grid_size - 1) on [0, 1].
        let mut basis = vec![0.0f64; grid_size * dim];
        for j in 0..grid_size {
            let xi = j as f64 / (grid_size - 1) as f64;
            for k in 0..dim {
                let l = model.lambda(k);
                basis[j * dim + k] = (2.0 * l).sqrt() * (xi / l.sqrt()).sin();
            }
        }
        let basis = std::sync::Arc::new(basis);
        let grid_max = {
            let basis = basis.clone();
            move |p: &Point| -> (f64, usize) {
                // (signed path value at argmax of |path|, argmax index)
                let mut best = 0.0f64;
                let mut best_signed = 0.0f64;
                let mut best_j = 0usize;
                for j in 0..grid_size {
                    let row = &basis[j * dim..(j + 1) * dim];
                    let v: f64 = row
                        .iter()
                        .zip(p.coords())
                        .map(|(b, y)| b * y)
                        .sum();
                    if v.abs() > best {
                        best = v.abs();
                        best_signed = v;
                        best_j = j;
                    }
                }
                (best_signed, best_j)
            }
        };
        let label = format!("sup_norm_kl[grid={grid_size}]");
        let gm_eval = grid_max.clone();
        let gm_grad = grid_max.clone();
        let gm_sing = grid_max;
        let basis_g = basis.clone();
        let logw = ScalarField::from_fn(label.clone(), move |p: &Point| {
            gm_eval(p).0.abs()
        })
        .with_grad(move |p: &Point| {
            let (signed, j) = gm_grad(p);
            let sgn = signed.signum();
            basis_g[j * dim..(j + 1) * dim]
                .iter()
                .map(|b| sgn * b)
                .collect()
        })
        .with_singular(move |p: &Point| gm_sing(p).0 == 0.0);
        Weight::new(label, logw, 2.0, 4.0)
    }
}

// ---- integrability screen ------------------------------------------------

/// One screened moment: the estimate, its value at doubled budget (the
/// doubled run shares the first half of its sample stream with the base
/// run), and the divergence diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct MomentScreen {
    pub what: String,
    pub value: f64,
    pub stderr: f64,
    pub doubled_value: f64,
    pub doubled_stderr: f64,
    /// |doubled - base| in combined standard errors.
    pub shift_sigmas: f64,
    /// Largest single-sample share of the doubled-run total; a share
    /// above 0.5 means one sample dominates the integral — the classic
    /// footprint of a divergent moment under importance sampling.
    pub max_share: f64,
    /// Hill estimate of the tail index of the sampled integrand (from
    /// the doubled run); an index at or below 1 means the mean does not
    /// exist, so values near 1 flag divergence even when the running
    /// average still looks stable. `None` when the sample has no usable
    /// positive tail (which for this screen means "not heavy").
    pub tail_index: Option<f64>,
    pub n_eval: u64,
    pub dropped: u64,
    pub diverged: bool,
}

impl MomentScreen {
    /// Record that the sampled integrand is provably bounded by `bound`.
    /// A bounded integrand has every moment finite, so the heavy-tail
    /// flag is withdrawn (finite-sample Hill estimates can mimic a power
    /// law on a bounded but sharply peaked distribution); the
    /// non-finiteness and budget-doubling drift checks stay in force.
    pub fn with_certified_bound(mut self, bound: f64) -> MomentScreen {
        self.what = format!("{} (certified <= {bound:.3e})", self.what);
        self.diverged = !self.value.is_finite()
            || !self.doubled_value.is_finite()
            || self.shift_sigmas > 5.0;
        self
    }
}

/// Integrability report for a weight: the moments the calculus needs,
/// each screened for divergence.
#[derive(Debug, Clone, Serialize)]
pub struct Hypothesis1Report {
    pub weight: String,
    pub exponents: ExponentInfo,
    /// `int w^s dmu`.
    pub w_s: MomentScreen,
    /// `int |grad log w|^t dmu`.
    pub grad_logw_t: MomentScreen,
    /// `int w |log w|^t dmu`.
    pub w_abs_logw_t: MomentScreen,
    pub pass: bool,
}

/// Top-order-statistics kept for the tail-index estimate.
const HILL_K: usize = 512;
/// Minimum count of positive top values before the estimate is attempted.
const HILL_MIN: usize = 64;
/// Implied tail index below this flags an infinite-mean tail (index 1
/// is the divergence boundary; the margin absorbs estimator noise at
/// `HILL_K` order statistics).
const HILL_FLAG: f64 = 1.02;

#[derive(Clone)]
struct ScreenAcc {
    sum: f64,
    sum_sq: f64,
    max_abs: f64,
    kept: u64,
    dropped: u64,
    /// Buffer of largest positive values seen (pruned to `HILL_K`).
    top: Vec<f64>,
}

fn prune_top(top: &mut Vec<f64>) {
    if top.len() > HILL_K {
        top.sort_unstable_by(|a, b| b.total_cmp(a));
        top.truncate(HILL_K);
    }
}

impl ScreenAcc {
    fn zero() -> Self {
        ScreenAcc {
            sum: 0.0,
            sum_sq: 0.0,
            max_abs: 0.0,
            kept: 0,
            dropped: 0,
            top: Vec::new(),
        }
    }
    fn merge(mut a: Self, b: Self) -> Self {
        a.sum += b.sum;
        a.sum_sq += b.sum_sq;
        a.max_abs = a.max_abs.max(b.max_abs);
        a.kept += b.kept;
        a.dropped += b.dropped;
        a.top.extend_from_slice(&b.top);
        prune_top(&mut a.top);
        a
    }
    fn mean(&self) -> f64 {
        self.sum / self.kept.max(1) as f64
    }
    fn stderr(&self) -> f64 {
        let n = self.kept.max(1) as f64;
        let m = self.mean();
        let var = ((self.sum_sq / n - m * m) * n / (n - 1.0).max(1.0)).max(0.0);
        (var / n).sqrt()
    }
    /// Hill tail-index estimate from the retained order statistics:
    /// `k / sum ln(v_(i) / v_(k+1))`. `None` when the sample has no
    /// usable positive tail (few values, zero reference, or no spread —
    /// all of which mean "not heavy-tailed" for this screen).
    fn hill_tail_index(&self) -> Option<f64> {
        let mut top = self.top.clone();
        top.sort_unstable_by(|a, b| b.total_cmp(a));
        if top.len() < HILL_MIN + 1 {
            return None;
        }
        let k = (top.len() - 1).min(HILL_K - 1);
        let x_ref = top[k];
        if !(x_ref > 0.0) {
            return None;
        }
        let log_sum: f64 = top[..k].iter().map(|v| (v / x_ref).ln()).sum();
        if log_sum <= 0.0 {
            return None;
        }
        Some(k as f64 / log_sum)
    }
}

fn screen_pass(
    model: &GaussianModel,
    budget: u64,
    seed: u64,
    eval: impl Fn(&Point) -> Option<f64> + Sync,
) -> ScreenAcc {
    mc_fold(
        model,
        budget,
        seed,
        streams::SCREEN,
        ScreenAcc::zero,
        |acc, p| match eval(p) {
            None => acc.dropped += 1,
            Some(v) => {
                acc.sum += v;
                acc.sum_sq += v * v;
                acc.max_abs = acc.max_abs.max(v.abs());
                acc.kept += 1;
                if v > 0.0 {
                    acc.top.push(v);
                    if acc.top.len() >= 8 * HILL_K {
                        prune_top(&mut acc.top);
                    }
                }
            }
        },
        ScreenAcc::merge,
    )
}

pub(crate) fn screen_moment(
    model: &GaussianModel,
    budget: u64,
    seed: u64,
    what: &str,
    eval: impl Fn(&Point) -> Option<f64> + Sync,
) -> MomentScreen {
    let base = screen_pass(model, budget, seed, &eval);
    let doubled = screen_pass(model, budget * 2, seed, &eval);
    let shift = (doubled.mean() - base.mean()).abs();
    let combined = (base.stderr().powi(2) + doubled.stderr().powi(2))
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let shift_sigmas = if shift == 0.0 { 0.0 } else { shift / combined };
    let max_share = if doubled.sum.abs() > 0.0 {
        doubled.max_abs / doubled.sum.abs()
    } else {
        0.0
    };
    let tail_index = doubled.hill_tail_index();
    let diverged = !doubled.mean().is_finite()
        || !base.mean().is_finite()
        || shift_sigmas > 5.0
        || max_share > 0.5
        || tail_index.is_some_and(|a| a < HILL_FLAG);
    MomentScreen {
        what: what.into(),
        value: base.mean(),
        stderr: base.stderr(),
        doubled_value: doubled.mean(),
        doubled_stderr: doubled.stderr(),
        shift_sigmas,
        max_share,
        tail_index,
        n_eval: base.kept + base.dropped + doubled.kept + doubled.dropped,
        dropped: base.dropped + doubled.dropped,
        diverged,
    }
}

/// Screen the three moments the weighted calculus relies on:
/// `int w^s`, `int |grad log w|^t`, `int w |log w|^t`. Each estimate is
/// recomputed at doubled budget; a drift above five combined standard
/// errors, a single sample carrying over half the total, or a non-finite
/// mean flags divergence. "Pass" is a statistical screen (finite-looking),
/// not a proof of integrability.
pub fn check_hypothesis1(
    model: &GaussianModel,
    weight: &Weight,
    mc_budget: u64,
    seed: u64,
) -> Result<Hypothesis1Report> {
    if mc_budget == 0 {
        return Err(EngineError::InvalidParameter {
            name: "mc_budget",
            reason: "integrability screen needs a positive budget".into(),
        });
    }
    let logw = weight.logw();
    let s = weight.s();
    let t = weight.t();
    let w_s = screen_moment(model, mc_budget, seed, "int w^s dmu", |p| {
        if logw.is_singular(p) {
            None
        } else {
            Some((s * logw.value_unchecked(p)).exp())
        }
    });
    let grad_logw_t =
        screen_moment(model, mc_budget, seed, "int |grad log w|^t dmu", |p| {
            if logw.is_singular(p) {
                None
            } else {
                let g = logw.grad_h(p);
                let norm_sq: f64 = g.iter().map(|v| v * v).sum();
                Some(norm_sq.powf(t / 2.0))
            }
        });
    let w_abs_logw_t =
        screen_moment(model, mc_budget, seed, "int w |log w|^t dmu", |p| {
            if logw.is_singular(p) {
                None
            } else {
                let lw = logw.value_unchecked(p);
                Some(lw.exp() * lw.abs().powf(t))
            }
        });
    let pass = !(w_s.diverged || grad_logw_t.diverged || w_abs_logw_t.diverged);
    Ok(Hypothesis1Report {
        weight: weight.label().into(),
        exponents: weight.exponents(),
        w_s,
        grad_logw_t,
        w_abs_logw_t,
        pass,
    })
}

// ---- exponential-moment threshold -----------------------------------------

/// Result of the small-ball / exponential-moment estimation for a
/// nonnegative p-homogeneous functional `g`: the quantile threshold
/// `tau`, the mass `c = mu(g <= tau)`, and the largest exponent `alpha`
/// (with a fixed safety margin) for which
/// `log((1-c)/c) + 2 alpha tau^2 / (sqrt(2^p) - 1)^2 <= -0.1`,
/// which certifies `int exp(alpha g^2) dmu < inf` by the doubling
/// argument for homogeneous seminorms.
#[derive(Debug, Clone, Serialize)]
pub struct FerniqueReport {
    pub g_label: String,
    pub quantile_level: f64,
    pub tau: f64,
    pub c: f64,
    pub c_stderr: f64,
    pub alpha: f64,
    /// True when `c` hit 1 empirically (or the formula overflowed) and
    /// `alpha` was clamped to the configured maximum.
    pub clamped: bool,
}

/// Estimate the exponential-moment exponent for `g`. `tau` starts at the
/// empirical 75th percentile and walks up in 5%-quantile steps until the
/// independently re-estimated mass `c = mu(g <= tau)` exceeds 0.55 (the
/// argument only needs `c > 1/2`; the cushion absorbs Monte Carlo error).
/// `p_hom` in `(0, 1]` is the homogeneity degree of `g`. Empirical
/// `c = 1` means `g <= tau` on every sample: the bound holds for every
/// `alpha`, so the configured `alpha_max` is returned, flagged as clamped.
pub fn fernique_alpha(
    model: &GaussianModel,
    g: &ScalarField,
    p_hom: f64,
    mc_budget: u64,
    seed: u64,
    alpha_max: f64,
) -> Result<FerniqueReport> {
    if !(p_hom > 0.0 && p_hom <= 1.0) {
        return Err(EngineError::InvalidParameter {
            name: "p_hom",
            reason: format!("homogeneity degree must lie in (0, 1], got {p_hom}"),
        });
    }
    if mc_budget < 100 {
        return Err(EngineError::InvalidParameter {
            name: "mc_budget",
            reason: format!("threshold estimation needs at least 100 samples, got {mc_budget}"),
        });
    }
    if !(alpha_max > 0.0) {
        return Err(EngineError::InvalidParameter {
            name: "alpha_max",
            reason: format!("alpha_max must be positive, got {alpha_max}"),
        });
    }

    // Pass 1: collect g-samples for quantiles (dedicated stream domain).
    let mut values = mc_fold(
        model,
        mc_budget,
        seed,
        streams::QUANTILE,
        Vec::new,
        |acc: &mut Vec<f64>, p| {
            if !g.is_singular(p) {
                acc.push(g.value_unchecked(p));
            }
        },
        |mut a, b| {
            a.extend_from_slice(&b);
            a
        },
    );
    if values.is_empty() {
        return Err(EngineError::NoAdmissibleThreshold { mass: 0.0 });
    }
    values.sort_unstable_by(f64::total_cmp);
    let quantile = |level: f64| -> f64 {
        let n = values.len();
        let k = ((level * n as f64).ceil() as usize).clamp(1, n);
        values[k - 1]
    };

    // Pass 2: independent stream estimates c = mu(g <= tau) per ladder
    // rung; stop at the first rung with comfortable mass.
    let estimate_c = |tau: f64| -> (f64, f64) {
        let acc = screen_pass(model, mc_budget, seed, |p| {
            if g.is_singular(p) {
                None
            } else if g.value_unchecked(p) <= tau {
                Some(1.0)
            } else {
                Some(0.0)
            }
        });
        let c = acc.mean();
        let n = acc.kept.max(1) as f64;
        (c, (c * (1.0 - c) / n).sqrt())
    };

    let mut best: Option<(f64, f64, f64, f64)> = None; // (level, tau, c, se)
    for step in 0..5 {
        let level = 0.75 + 0.05 * step as f64;
        let tau = quantile(level);
        let (c, se) = estimate_c(tau);
        if best.map_or(true, |(_, _, bc, _)| c > bc) {
            best = Some((level, tau, c, se));
        }
        if c > 0.55 {
            break;
        }
    }
    let (level, tau, c, c_stderr) = best.expect("ladder ran at least once");
    if c <= 0.5 {
        return Err(EngineError::NoAdmissibleThreshold { mass: c });
    }

    let (alpha, clamped) = select_alpha(tau, c, p_hom, alpha_max)
        .ok_or(EngineError::NoAdmissibleThreshold { mass: c })?;
    Ok(FerniqueReport {
        g_label: g.label().into(),
        quantile_level: level,
        tau,
        c,
        c_stderr,
        alpha,
        clamped,
    })
}

/// Largest alpha satisfying the margin inequality; None when no positive
/// alpha does (c too close to 1/2). `Some((alpha_max, true))` when the
/// inequality holds for every alpha (c = 1 or tau = 0).
fn select_alpha(tau: f64, c: f64, p_hom: f64, alpha_max: f64) -> Option<(f64, bool)> {
    if c <= 0.5 {
        return None;
    }
    let log_odds = ((1.0 - c) / c).ln(); // -inf when c = 1
    let margin = -0.1 - log_odds;
    if margin <= 0.0 {
        return None;
    }
    let denom = 2.0 * tau * tau;
    let shrink = (2.0f64.powf(p_hom).sqrt() - 1.0).powi(2);
    let alpha = margin * shrink / denom; // +inf when tau = 0 or c = 1
    if alpha.is_finite() && alpha <= alpha_max {
        Some((alpha, false))
    } else {
        Some((alpha_max, true))
    }
}

// ---- absolute-moment formula -----------------------------------------------

/// `E |N(0,1)|^q = 2^{q/2} Gamma((q+1)/2) / sqrt(pi)`.
pub fn absolute_moment(q: f64) -> f64 {
    2.0f64.powf(q / 2.0) * gamma((q + 1.0) / 2.0) / std::f64::consts::PI.sqrt()
}

/// Check of the coordinate absolute-moment formula
/// `E[sum_k |(x, v_k)_X|^q] = c_q sum_k lambda_k^{q/2}` with `v_k` the
/// ambient eigenbasis and `c_q` from [`absolute_moment`]. Per-mode
/// estimates share one sample stream; their partial sums must increase
/// and stay below the closed-form total.
#[derive(Debug, Clone, Serialize)]
pub struct MomentFormulaReport {
    pub q: f64,
    pub c_q: f64,
    pub closed_form_total: f64,
    pub estimate: IntegralEstimate,
    pub per_mode: Vec<f64>,
    pub per_mode_closed_form: Vec<f64>,
    pub partial_sums_increasing: bool,
    pub partials_bounded_by_total: bool,
    pub pass: bool,
}

#[derive(Clone)]
struct ModeAcc {
    per_mode: Vec<f64>,
    total_sq: f64,
    kept: u64,
}

/// Verify `E[sum_k |x_k|^q]` against the closed form within three
/// standard errors.
pub fn check_moment_formula(
    model: &GaussianModel,
    q: f64,
    mc_budget: u64,
    seed: u64,
) -> Result<MomentFormulaReport> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(EngineError::InvalidParameter {
            name: "q",
            reason: format!("moment order must be positive, got {q}"),
        });
    }
    if mc_budget == 0 {
        return Err(EngineError::InvalidParameter {
            name: "mc_budget",
            reason: "moment check needs a positive budget".into(),
        });
    }
    let dim = model.dim();
    let spectrum = model.spectrum().to_vec();
    let acc = mc_fold(
        model,
        mc_budget,
        seed,
        streams::SCREEN,
        || ModeAcc {
            per_mode: vec![0.0; dim],
            total_sq: 0.0,
            kept: 0,
        },
        |acc: &mut ModeAcc, p| {
            let mut total = 0.0;
            for k in 0..dim {
                // ambient coordinate x_k = sqrt(lambda_k) y_k
                let xk = spectrum[k].sqrt() * p[k];
                let v = xk.abs().powf(q);
                acc.per_mode[k] += v;
                total += v;
            }
            acc.total_sq += total * total;
            acc.kept += 1;
        },
        |mut a, b| {
            for (x, y) in a.per_mode.iter_mut().zip(&b.per_mode) {
                *x += y;
            }
            a.total_sq += b.total_sq;
            a.kept += b.kept;
            a
        },
    );
    let n = acc.kept.max(1) as f64;
    let per_mode: Vec<f64> = acc.per_mode.iter().map(|s| s / n).collect();
    let total: f64 = per_mode.iter().sum();
    let var = ((acc.total_sq / n - total * total) * n / (n - 1.0).max(1.0)).max(0.0);
    let stderr = (var / n).sqrt();

    let c_q = absolute_moment(q);
    let per_mode_closed: Vec<f64> = model
        .spectrum()
        .iter()
        .map(|l| c_q * l.powf(q / 2.0))
        .collect();
    let closed_total: f64 = per_mode_closed.iter().sum();

    let mut increasing = true;
    let mut bounded = true;
    let mut partial = 0.0;
    for v in &per_mode {
        if *v < 0.0 {
            increasing = false;
        }
        partial += v;
        if partial > closed_total + 3.0 * stderr {
            bounded = false;
        }
    }
    let pass = increasing && bounded && (total - closed_total).abs() <= 3.0 * stderr.max(1e-12);
    Ok(MomentFormulaReport {
        q,
        c_q,
        closed_form_total: closed_total,
        estimate: IntegralEstimate {
            value: total,
            stderr,
            method: "mc".into(),
            n_eval: acc.kept,
            dropped: 0,
        },
        per_mode,
        per_mode_closed_form: per_mode_closed,
        partial_sums_increasing: increasing,
        partials_bounded_by_total: bounded,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FD_STEP;
    use crate::integrate::{integrate_nu, Engine};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model4() -> GaussianModel {
        GaussianModel::new(vec![1.0, 0.5, 0.25, 0.125], "m4").unwrap()
    }

    fn random_points(model: &GaussianModel, n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut p = model.zero_point();
            model.sample_into(&mut rng, &mut p);
            out.push(p);
        }
        out
    }

    fn assert_fd_grad_close(logw: &ScalarField, points: &[Point], tol: f64, margin: f64) {
        let mut checked = 0;
        for p in points {
            if logw.is_singular(p) || p.coords().iter().any(|y| y.abs() < margin) {
                continue;
            }
            let analytic = logw.grad_h(p);
            let fd = logw.fd_grad(p);
            let num: f64 = analytic
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            assert!(
                num / den <= tol,
                "gradient mismatch {:.3e} at {:?}",
                num / den,
                p.coords()
            );
            checked += 1;
        }
        assert!(checked > 10, "too few usable test points ({checked})");
    }

    #[test]
    fn exponent_bookkeeping_and_validation() {
        let m = model4();
        let w = Weight::unit(&m);
        let e = w.exponents();
        assert_eq!(e.s, 2.0);
        assert_eq!(e.t, 4.0);
        assert_eq!(e.s_prime, 2.0);
        assert_eq!(e.p_min, 2.0);
        assert!(e.t_at_least_two_s_prime);
        assert!(w.warn_below_p_min(1.5).is_some());
        assert!(w.warn_below_p_min(2.0).is_none());

        let logw = ScalarField::constant(0.0);
        assert!(Weight::new("bad", logw.clone(), 1.0, 4.0).is_err());
        // s = 2 -> s' = 2, so t = 2 is rejected.
        assert!(Weight::new("bad", logw.clone(), 2.0, 2.0).is_err());
        let w = Weight::new("ok", logw, 3.0, 2.0).unwrap(); // s' = 1.5 < 2
        assert!((w.p_min() - 4.0).abs() < 1e-12); // 2/(2-1.5)
    }

    #[test]
    fn every_builtin_keeps_w_equal_exp_logw() {
        let m = model4();
        let weights = vec![
            Weight::unit(&m),
            Weight::gaussian_type(0.05, &m),
            Weight::square_norm(&m),
            Weight::lq_norm(1.5, 1.0, &m).unwrap(),
            Weight::sup_norm_kl(128, &m).unwrap(),
        ];
        let points = random_points(&m, 50, 11);
        for w in &weights {
            let wf = w.w_field();
            for p in &points {
                if w.logw().is_singular(p) {
                    continue;
                }
                let a = w.w(p);
                let b = wf.value(p);
                let c = w.logw().value(p).exp();
                assert!((a - c).abs() <= 1e-10 * c.abs().max(1.0), "{}", w.label());
                assert!((b - c).abs() <= 1e-10 * c.abs().max(1.0), "{}", w.label());
            }
        }
    }

    #[test]
    fn gaussian_type_derivatives_are_exact() {
        let m = model4();
        let w = Weight::gaussian_type(0.07, &m);
        let points = random_points(&m, 100, 5);
        assert_fd_grad_close(w.logw(), &points, 1e-6, 0.0);
        let h = w.logw().hess_h(&points[0]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 2.0 * 0.07 * m.lambda(i) } else { 0.0 };
                assert!((h[(i, j)] - expect).abs() < 1e-14);
            }
        }
        // lambda = 0 is the unit weight.
        let w0 = Weight::gaussian_type(0.0, &m);
        let p = m.point(vec![0.3, -1.2, 0.5, 2.0]).unwrap();
        assert_eq!(w0.w(&p), 1.0);
    }

    #[test]
    fn square_norm_matches_fd_and_homogeneity() {
        let m = model4();
        let w = Weight::square_norm(&m);
        let points: Vec<Point> = random_points(&m, 200, 9)
            .into_iter()
            .filter(|p| p.coords().iter().map(|y| y * y).sum::<f64>() > 0.25)
            .collect();
        assert_fd_grad_close(w.logw(), &points, 1e-5, 0.0);
        // Hessian vs central differences.
        for p in points.iter().take(20) {
            let h = w.logw().hess_h(p).unwrap();
            let fd = w.logw().fd_hess(p);
            let err = (&h - &fd).norm() / fd.norm().max(1.0);
            assert!(err < 1e-4, "hess err {err:.3e}");
        }
        // log w(2y) = log w(y) + 4 ln 2, grad halves.
        let p = m.point(vec![0.4, -0.7, 1.1, 0.2]).unwrap();
        let p2 = m.point(p.coords().iter().map(|y| 2.0 * y).collect()).unwrap();
        let lw = w.logw().value(&p);
        let lw2 = w.logw().value(&p2);
        assert!((lw2 - lw - 4.0 * 2.0f64.ln()).abs() < 1e-12);
        let g = w.logw().grad_h(&p);
        let g2 = w.logw().grad_h(&p2);
        for (a, b) in g.iter().zip(&g2) {
            assert!((b - a / 2.0).abs() < 1e-12);
        }
        // Singular exactly at the origin.
        assert!(w.logw().is_singular(&m.zero_point()));
        assert!(w.w(&m.zero_point()).is_nan());
    }

    #[test]
    fn lq_norm_gradient_and_hessian_agree_with_fd() {
        let m = model4();
        for q in [1.5, 2.0, 3.0] {
            let w = Weight::lq_norm(q, 1.0, &m).unwrap();
            let points = random_points(&m, 300, 31);
            // Stay away from the coordinate kinks for FD probes.
            assert_fd_grad_close(w.logw(), &points, 1e-5, 10.0 * FD_STEP);
            let good: Vec<&Point> = points
                .iter()
                .filter(|p| p.coords().iter().all(|y| y.abs() > 0.2))
                .take(10)
                .collect();
            assert!(good.len() >= 3);
            for p in good {
                let h = w.logw().hess_h(p).unwrap();
                let fd = w.logw().fd_hess(p);
                let err = (&h - &fd).norm() / fd.norm().max(1.0);
                assert!(err < 2e-4, "q={q} hess err {err:.3e}");
            }
        }
        // q = 2, identity spectrum: grad = y / |y|.
        let mi = GaussianModel::new(vec![1.0, 1.0, 1.0], "id3").unwrap();
        let w = Weight::lq_norm(2.0, 1.0, &mi).unwrap();
        let p = mi.point(vec![0.6, -0.8, 1.0]).unwrap();
        let norm = (0.36f64 + 0.64 + 1.0).sqrt();
        let g = w.logw().grad_h(&p);
        for (gi, yi) in g.iter().zip(p.coords()) {
            assert!((gi - yi / norm).abs() < 1e-12);
        }
        assert!(Weight::lq_norm(1.0, 1.0, &m).is_err());
        assert!(w.logw().is_singular(&mi.point(vec![0.0, 1.0, 2.0]).unwrap()));
    }

    #[test]
    fn sup_norm_kl_matches_single_mode_oracle() {
        let m = GaussianModel::with_family(crate::model::SpectrumFamily::BrownianKl, 4)
            .unwrap();
        let w = Weight::sup_norm_kl(512, &m).unwrap();
        // Zero path: sup = 0, flagged singular.
        assert!(w.logw().is_singular(&m.zero_point()));
        // Single-mode path y = (c, 0, 0, 0): the first mode rises on
        // [0, 1] and peaks at xi = 1 (quarter period), so the grid max is
        // exact: |c| sqrt(2 lambda_1).
        let c = -1.3;
        let p = m.point(vec![c, 0.0, 0.0, 0.0]).unwrap();
        let want = c.abs() * (2.0 * m.lambda(0)).sqrt();
        assert!((w.logw().value(&p) - want).abs() < 1e-12);
        let g = w.logw().grad_h(&p);
        for k in 0..4 {
            let l = m.lambda(k);
            let expect = c.signum() * (2.0 * l).sqrt() * (1.0 / l.sqrt()).sin();
            assert!((g[k] - expect).abs() < 1e-12, "mode {k}");
        }
        assert!(Weight::sup_norm_kl(32, &m).is_err());
    }

    #[test]
    fn sup_norm_kl_gradient_matches_fd_away_from_ties() {
        let m = GaussianModel::with_family(crate::model::SpectrumFamily::BrownianKl, 6)
            .unwrap();
        let w = Weight::sup_norm_kl(256, &m).unwrap();
        let points = random_points(&m, 60, 77);
        let mut checked = 0;
        for p in &points {
            // Skip near-ties: compare best and second-best grid values
            // after masking a neighborhood of the argmax.
            let (top, second) = top_two_grid_values(&m, p, 256);
            if top - second < 1e-3 * top.max(1e-6) {
                continue;
            }
            let analytic = w.logw().grad_h(p);
            let fd = w.logw().fd_grad(p);
            let num: f64 = analytic
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            assert!(num / den < 1e-3, "rel err {:.3e}", num / den);
            checked += 1;
        }
        assert!(checked > 20, "only {checked} tie-free points");
    }

    /// Largest and second-largest |path| over the grid, the second taken
    /// outside a +-3-cell window around the argmax.
    fn top_two_grid_values(m: &GaussianModel, p: &Point, grid: usize) -> (f64, f64) {
        let path = |xi: f64| -> f64 {
            (0..m.dim())
                .map(|k| {
                    let l = m.lambda(k);
                    p[k] * (2.0 * l).sqrt() * (xi / l.sqrt()).sin()
                })
                .sum()
        };
        let vals: Vec<f64> = (0..grid)
            .map(|j| path(j as f64 / (grid - 1) as f64).abs())
            .collect();
        let (jmax, &top) = vals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let second = vals
            .iter()
            .enumerate()
            .filter(|(j, _)| (*j as i64 - jmax as i64).abs() > 3)
            .map(|(_, v)| *v)
            .fold(0.0f64, f64::max);
        (top, second)
    }

    #[test]
    fn hypothesis_screen_passes_unit_and_subcritical_gaussian_type() {
        let m = model4();
        let unit = Weight::unit(&m);
        let rep = check_hypothesis1(&m, &unit, 20_000, 1).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.w_s.value, 1.0);
        assert_eq!(rep.grad_logw_t.value, 0.0);
        assert_eq!(rep.w_abs_logw_t.value, 0.0);

        // lambda * s = 0.1 is far below the mass threshold 1/(2 * 1).
        let w = Weight::gaussian_type(0.05, &m);
        let rep = check_hypothesis1(&m, &w, 200_000, 2).unwrap();
        assert!(rep.pass, "{rep:?}");
        let closed: f64 = m
            .spectrum()
            .iter()
            .map(|l| (1.0 - 2.0 * 0.1 * l).powf(-0.5))
            .product();
        assert!(
            (rep.w_s.value - closed).abs() <= 4.0 * rep.w_s.stderr,
            "est {} vs closed {closed} (se {})",
            rep.w_s.value,
            rep.w_s.stderr
        );
    }

    #[test]
    fn hypothesis_screen_flags_supercritical_gaussian_type() {
        let m = GaussianModel::new(vec![1.0, 0.5], "m2").unwrap();
        // Mass threshold: s * lambda < 1/(2 * lambda_max) = 0.5.
        let below = Weight::gaussian_type(0.125, &m); // s*lambda = 0.25
        assert!(check_hypothesis1(&m, &below, 100_000, 3).unwrap().pass);
        let above = Weight::gaussian_type(0.375, &m); // s*lambda = 0.75
        let rep = check_hypothesis1(&m, &above, 100_000, 3).unwrap();
        assert!(rep.w_s.diverged, "{rep:?}");
        assert!(!rep.pass);
    }

    #[test]
    fn hypothesis_screen_accepts_square_norm_with_its_exponents() {
        let m = model4();
        let w = Weight::square_norm(&m);
        assert_eq!(w.t(), 3.0); // t < dim keeps the gradient moment finite
        let rep = check_hypothesis1(&m, &w, 150_000, 4).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.w_s.dropped == 0);
    }

    #[test]
    fn square_norm_mass_matches_chi_square_moment() {
        // Identity spectrum, integrand 1: int (y,y)^2 dmu = n^2 + 2n.
        let m = GaussianModel::new(vec![1.0, 1.0, 1.0], "id3").unwrap();
        let w = Weight::square_norm(&m);
        let est = integrate_nu(
            &m,
            w.logw(),
            &ScalarField::constant(1.0),
            Engine::GaussHermite { nodes_per_dim: 10 },
            0,
            streams::VOLUME,
        )
        .unwrap();
        assert!((est.value - 15.0).abs() < 1e-10, "got {}", est.value);
    }

    #[test]
    fn fernique_alpha_on_one_dimensional_abs_matches_closed_form() {
        let m = GaussianModel::new(vec![1.0], "m1").unwrap();
        let g = ScalarField::from_fn("abs_y1", |p: &Point| p[0].abs());
        let rep = fernique_alpha(&m, &g, 1.0, 400_000, 6, 1e6).unwrap();
        // Exact 75th percentile of |N(0,1)| is 1.1503...
        assert!((rep.tau - 1.1503).abs() < 0.02, "tau {}", rep.tau);
        assert!(rep.c > 0.7 && rep.c < 0.8);
        assert!(!rep.clamped);
        // Closed-form alpha at (tau*, c = 3/4):
        // (ln 3 - 0.1) (sqrt 2 - 1)^2 / (2 tau^2) ~ 0.0647; and any
        // alpha < 1/2 keeps int exp(alpha y^2) finite.
        assert!(rep.alpha > 0.03 && rep.alpha < 0.12, "alpha {}", rep.alpha);
        assert!(rep.alpha < 0.5);
        // The certified integral matches its closed form and is stable.
        let lw = ScalarField::from_fn("alpha g^2", {
            let a = rep.alpha;
            move |p: &Point| a * p[0] * p[0]
        });
        let one = ScalarField::constant(1.0);
        let est = integrate_nu(
            &m,
            &lw,
            &one,
            Engine::MonteCarlo { budget: 200_000 },
            7,
            streams::VOLUME,
        )
        .unwrap();
        let est2 = integrate_nu(
            &m,
            &lw,
            &one,
            Engine::MonteCarlo { budget: 400_000 },
            7,
            streams::VOLUME,
        )
        .unwrap();
        let closed = (1.0 - 2.0 * rep.alpha).powf(-0.5);
        assert!((est.value - closed).abs() < 4.0 * est.stderr);
        let comb = (est.stderr.powi(2) + est2.stderr.powi(2)).sqrt();
        assert!((est2.value - est.value).abs() < 5.0 * comb);
    }

    #[test]
    fn fernique_alpha_clamps_when_mass_is_total() {
        let m = GaussianModel::new(vec![1.0, 1.0], "m2").unwrap();
        let g = ScalarField::constant(0.0);
        let rep = fernique_alpha(&m, &g, 1.0, 10_000, 8, 123.0).unwrap();
        assert!(rep.clamped);
        assert_eq!(rep.alpha, 123.0);
        assert_eq!(rep.c, 1.0);
    }

    #[test]
    fn alpha_selection_handles_edge_masses() {
        // c barely above 1/2: margin is negative, no admissible alpha.
        assert!(select_alpha(1.0, 0.51, 1.0, 1e6).is_none());
        assert!(select_alpha(1.0, 0.5, 1.0, 1e6).is_none());
        // Comfortable mass: finite positive alpha.
        let (a, clamped) = select_alpha(1.0, 0.75, 1.0, 1e6).unwrap();
        assert!(!clamped);
        let expect = (3.0f64.ln() - 0.1) * (2.0f64.sqrt() - 1.0).powi(2) / 2.0;
        assert!((a - expect).abs() < 1e-12);
        // tau = 0: bound holds for every alpha, clamp.
        let (a, clamped) = select_alpha(0.0, 0.9, 1.0, 55.0).unwrap();
        assert!(clamped);
        assert_eq!(a, 55.0);
    }

    #[test]
    fn absolute_moment_matches_known_values() {
        assert!((absolute_moment(2.0) - 1.0).abs() < 1e-12);
        assert!((absolute_moment(4.0) - 3.0).abs() < 1e-12);
        let sqrt_2_over_pi = (2.0 / std::f64::consts::PI).sqrt();
        assert!((absolute_moment(1.0) - sqrt_2_over_pi).abs() < 1e-12);
    }

    #[test]
    fn moment_formula_matches_closed_form_on_dyadic_spectrum() {
        let m = GaussianModel::with_family(crate::model::SpectrumFamily::Geometric2, 6)
            .unwrap();
        // q = 2: E sum x_k^2 = sum lambda_k = 1 - 2^-6.
        let rep = check_moment_formula(&m, 2.0, 300_000, 9).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!((rep.closed_form_total - (1.0 - 2.0f64.powi(-6))).abs() < 1e-12);
        assert!(rep.partial_sums_increasing);
        assert!(rep.partials_bounded_by_total);
        // Fractional order.
        let rep = check_moment_formula(&m, 1.5, 300_000, 10).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(
            (rep.estimate.value - rep.closed_form_total).abs()
                <= 3.0 * rep.estimate.stderr
        );
    }

    #[test]
    fn random_cylindrical_weights_pass_consistency() {
        // Custom weight through the generic constructor keeps the same
        // invariants as the built-ins.
        let m = model4();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a: f64 = rng.gen_range(-0.3..0.3);
        let logw = ScalarField::monomials(
            "custom",
            vec![(a, vec![2, 0, 0, 0]), (0.1, vec![0, 1, 0, 1])],
        )
        .unwrap();
        let w = Weight::new("custom", logw, 1.5, 4.0).unwrap();
        assert!((w.s_prime() - 3.0).abs() < 1e-12);
        assert!((w.p_min() - 4.0).abs() < 1e-12);
        let points = random_points(&m, 50, 101);
        assert_fd_grad_close(w.logw(), &points, 1e-6, 0.0);
    }
}
