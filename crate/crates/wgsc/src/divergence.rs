//! Divergence operators for the Gaussian measure and its weighted
//! companion, with the identities that characterize them:
//!
//! * `div_mu Phi = sum_k (d_k phi_k - phi_k y_k)` — the Gaussian
//!   divergence in whitened coordinates (the formal adjoint of the
//!   gradient under `mu`);
//! * `div_nu Phi = div_mu Phi + <Phi, grad log w>` — the weighted
//!   divergence, computed by this pointwise decomposition always (the
//!   weak adjointness relation is the *test*, not the definition);
//! * the adjointness check `int <grad f, Phi> dnu = -int f div_nu Phi dnu`;
//! * the bilinear commutation identity coupling two directions `h, k`
//!   through the weight's log-Hessian;
//! * the energy identity expanding `int (div_nu Phi)^2 dnu`;
//! * a screen and a falsifier for the uniform curvature bound
//!   `xi^T (I - hess log w) xi <= C |xi|^2`, which governs when the
//!   divergence extends to `L^2` — including a directed search that
//!   certifies *no* such `C` works for the `(x,x)^2` weight.

use crate::error::{EngineError, Result};
use crate::field::{ScalarField, VectorField};
use crate::integrate::{integrate_nu, mc_fold, streams, Engine};
use crate::model::{GaussianModel, Point};
use crate::report::IdentityReport;
use crate::weight::Weight;
use nalgebra::DMatrix;
use serde::Serialize;

/// Weighted divergence with its decomposition. The invariant
/// `div_nu(p) = div_mu(p) + drift(p)` holds pointwise by construction;
/// [`DivergenceResult::max_decomposition_residual`] re-verifies it
/// numerically.
#[derive(Debug, Clone)]
pub struct DivergenceResult {
    pub field_label: String,
    pub div_nu: ScalarField,
    pub div_mu: ScalarField,
    /// `<Phi, grad log w>_H`.
    pub drift_term: ScalarField,
}

impl DivergenceResult {
    /// Largest `|div_nu - (div_mu + drift)|` over the given points
    /// (skipping singular ones); should sit at rounding level.
    pub fn max_decomposition_residual(&self, points: &[Point]) -> f64 {
        let mut worst = 0.0f64;
        for p in points {
            if self.div_nu.is_singular(p) {
                continue;
            }
            let r = (self.div_nu.value_unchecked(p)
                - self.div_mu.value_unchecked(p)
                - self.drift_term.value_unchecked(p))
            .abs();
            worst = worst.max(r);
        }
        worst
    }
}

fn check_dim(model: &GaussianModel, phi: &VectorField) -> Result<()> {
    if phi.len() != model.dim() {
        return Err(EngineError::DimensionMismatch {
            expected: model.dim(),
            got: phi.len(),
        });
    }
    Ok(())
}

/// Gaussian divergence `sum_k (d_k phi_k(p) - phi_k(p) y_k)`.
/// Singular flags of the components propagate.
pub fn div_mu(model: &GaussianModel, phi: &VectorField) -> Result<ScalarField> {
    check_dim(model, phi)?;
    let phi_eval = phi.clone();
    let phi_sing = phi.clone();
    Ok(ScalarField::from_fn(
        format!("div_mu[{}]", phi.label()),
        move |p: &Point| {
            (0..phi_eval.len())
                .map(|k| {
                    let c = phi_eval.component(k);
                    c.partial(p, k) - c.value_unchecked(p) * p[k]
                })
                .sum()
        },
    )
    .with_singular(move |p: &Point| phi_sing.is_singular(p)))
}

/// `<Phi, grad log w>_H` as a field; singular where either input is.
fn drift_field(weight: &Weight, phi: &VectorField) -> ScalarField {
    let logw = weight.logw().clone();
    let logw_s = weight.logw().clone();
    let phi_eval = phi.clone();
    let phi_sing = phi.clone();
    ScalarField::from_fn(
        format!("<{},grad log {}>", phi.label(), weight.label()),
        move |p: &Point| {
            let g = logw.grad_h(p);
            (0..phi_eval.len())
                .map(|k| phi_eval.component(k).value_unchecked(p) * g[k])
                .sum()
        },
    )
    .with_singular(move |p: &Point| phi_sing.is_singular(p) || logw_s.is_singular(p))
}

/// Weighted divergence by the pointwise decomposition
/// `div_nu = div_mu + <Phi, grad log w>`.
pub fn div_nu(model: &GaussianModel, weight: &Weight, phi: &VectorField) -> Result<DivergenceResult> {
    check_dim(model, phi)?;
    let mu_part = div_mu(model, phi)?;
    let drift = drift_field(weight, phi);
    let nu = ScalarField::lin_comb(1.0, &mu_part, 1.0, &drift);
    Ok(DivergenceResult {
        field_label: phi.label().into(),
        div_nu: nu,
        div_mu: mu_part,
        drift_term: drift,
    })
}

/// Adjointness: `int <grad f, Phi> dnu + int f div_nu Phi dnu = 0`.
/// Both integrals run on the same sample stream so the statistical error
/// largely cancels.
pub fn adjointness_check(
    model: &GaussianModel,
    weight: &Weight,
    f: &ScalarField,
    phi: &VectorField,
    engine: Engine,
    seed: u64,
    floor: f64,
) -> Result<IdentityReport> {
    check_dim(model, phi)?;
    let dv = div_nu(model, weight, phi)?;
    let f_pair = f.clone();
    let phi_pair = phi.clone();
    let pairing = ScalarField::from_fn(
        format!("<grad {}, {}>", f.label(), phi.label()),
        move |p: &Point| {
            let g = f_pair.grad_h(p);
            (0..phi_pair.len())
                .map(|k| phi_pair.component(k).value_unchecked(p) * g[k])
                .sum()
        },
    )
    .with_singular({
        let phi_s = phi.clone();
        let f_s = f.clone();
        move |p: &Point| phi_s.is_singular(p) || f_s.is_singular(p)
    });
    let lhs = integrate_nu(model, weight.logw(), &pairing, engine, seed, streams::VOLUME)?;
    let f_div = ScalarField::product(f, &dv.div_nu);
    let rhs_est = integrate_nu(model, weight.logw(), &f_div, engine, seed, streams::VOLUME)?;
    Ok(IdentityReport::from_sides(
        "divergence.adjoint",
        "int <grad f, Phi> dnu = -int f div_nu Phi dnu",
        (lhs.value, lhs.stderr),
        (-rhs_est.value, rhs_est.stderr),
        3.0,
        floor,
    ))
}

/// Bilinear commutation identity for directions `h, k`:
///
/// ```text
/// int (f y_h - f d_h log w - d_h f)(g y_k - g d_k log w - d_k g) dnu
///   = <h,k> int f g dnu - int f g d_h d_k log w dnu + int d_k f d_h g dnu
/// ```
///
/// Requires the weight's log-Hessian. All four integrals share one
/// sample stream.
pub fn bilinear_identity_check(
    model: &GaussianModel,
    weight: &Weight,
    f: &ScalarField,
    g: &ScalarField,
    h: usize,
    k: usize,
    engine: Engine,
    seed: u64,
    floor: f64,
) -> Result<IdentityReport> {
    let dim = model.dim();
    for idx in [h, k] {
        if idx >= dim {
            return Err(EngineError::IndexOutOfRange { index: idx, dim });
        }
    }
    if !weight.has_hess() {
        return Err(EngineError::MissingHessian {
            what: format!("weight `{}` (bilinear identity needs d_h d_k log w)", weight.label()),
        });
    }
    let logw = weight.logw().clone();

    let factor = |u: &ScalarField, dir: usize| -> ScalarField {
        let u_c = u.clone();
        let lw = logw.clone();
        let u_s = u.clone();
        let lw_s = logw.clone();
        ScalarField::from_fn(
            format!("({} y_{} - {} d log w - d {})", u.label(), dir, u.label(), u.label()),
            move |p: &Point| {
                let uv = u_c.value_unchecked(p);
                uv * p[dir] - uv * lw.grad_h(p)[dir] - u_c.partial(p, dir)
            },
        )
        .with_singular(move |p: &Point| u_s.is_singular(p) || lw_s.is_singular(p))
    };
    let lhs_field = ScalarField::product(&factor(f, h), &factor(g, k));
    let lhs = integrate_nu(model, weight.logw(), &lhs_field, engine, seed, streams::VOLUME)?;

    let fg = ScalarField::product(f, g);
    let i1 = integrate_nu(model, weight.logw(), &fg, engine, seed, streams::VOLUME)?;
    let fg_hess = {
        let fg_c = fg.clone();
        let lw = logw.clone();
        let fg_s = fg.clone();
        let lw_s = logw.clone();
        ScalarField::from_fn("f g d_h d_k log w", move |p: &Point| {
            let hess = lw.hess_h(p).expect("hessian checked above");
            fg_c.value_unchecked(p) * hess[(h, k)]
        })
        .with_singular(move |p: &Point| fg_s.is_singular(p) || lw_s.is_singular(p))
    };
    let i2 = integrate_nu(model, weight.logw(), &fg_hess, engine, seed, streams::VOLUME)?;
    let cross = {
        let f_c = f.clone();
        let g_c = g.clone();
        let f_s = f.clone();
        let g_s = g.clone();
        ScalarField::from_fn("d_k f d_h g", move |p: &Point| {
            f_c.partial(p, k) * g_c.partial(p, h)
        })
        .with_singular(move |p: &Point| f_s.is_singular(p) || g_s.is_singular(p))
    };
    let i3 = integrate_nu(model, weight.logw(), &cross, engine, seed, streams::VOLUME)?;

    let delta_hk = if h == k { 1.0 } else { 0.0 };
    let rhs = delta_hk * i1.value - i2.value + i3.value;
    let rhs_se = (delta_hk * i1.stderr.powi(2) + i2.stderr.powi(2) + i3.stderr.powi(2)).sqrt();
    Ok(IdentityReport::from_sides(
        format!("divergence.bilinear.h{h}k{k}"),
        "int (f y_h - f d_h log w - d_h f)(g y_k - g d_k log w - d_k g) dnu \
         = <h,k> int f g dnu - int f g d_h d_k log w dnu + int d_k f d_h g dnu",
        (lhs.value, lhs.stderr),
        (rhs, rhs_se),
        3.0,
        floor,
    ))
}

/// Energy identity:
///
/// ```text
/// int (div_nu Phi)^2 dnu
///   = int sum_ij (d_ij - d_i d_j log w) phi_i phi_j dnu
///     + int sum_ij d_j phi_i d_i phi_j dnu
/// ```
pub fn energy_identity_check(
    model: &GaussianModel,
    weight: &Weight,
    phi: &VectorField,
    engine: Engine,
    seed: u64,
    floor: f64,
) -> Result<IdentityReport> {
    check_dim(model, phi)?;
    if !weight.has_hess() {
        return Err(EngineError::MissingHessian {
            what: format!("weight `{}` (energy identity needs hess log w)", weight.label()),
        });
    }
    let dv = div_nu(model, weight, phi)?;
    let sq = ScalarField::product(&dv.div_nu, &dv.div_nu);
    let lhs = integrate_nu(model, weight.logw(), &sq, engine, seed, streams::VOLUME)?;

    let dim = model.dim();
    let logw = weight.logw().clone();
    let quad_term = {
        let phi_c = phi.clone();
        let lw = logw.clone();
        let phi_s = phi.clone();
        let lw_s = logw.clone();
        ScalarField::from_fn("sum_ij (d_ij - dd log w) phi_i phi_j", move |p: &Point| {
            let hess = lw.hess_h(p).expect("hessian checked above");
            let vals: Vec<f64> = (0..dim)
                .map(|i| phi_c.component(i).value_unchecked(p))
                .collect();
            let mut total = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    total += (delta - hess[(i, j)]) * vals[i] * vals[j];
                }
            }
            total
        })
        .with_singular(move |p: &Point| phi_s.is_singular(p) || lw_s.is_singular(p))
    };
    let i1 = integrate_nu(model, weight.logw(), &quad_term, engine, seed, streams::VOLUME)?;

    let trace_term = {
        let phi_c = phi.clone();
        let phi_s = phi.clone();
        ScalarField::from_fn("sum_ij d_j phi_i d_i phi_j", move |p: &Point| {
            let grads: Vec<Vec<f64>> = (0..dim)
                .map(|i| phi_c.component(i).grad_h(p))
                .collect();
            let mut total = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    total += grads[i][j] * grads[j][i];
                }
            }
            total
        })
        .with_singular(move |p: &Point| phi_s.is_singular(p))
    };
    let i2 = integrate_nu(model, weight.logw(), &trace_term, engine, seed, streams::VOLUME)?;

    let rhs = i1.value + i2.value;
    let rhs_se = (i1.stderr.powi(2) + i2.stderr.powi(2)).sqrt();
    Ok(IdentityReport::from_sides(
        "divergence.energy",
        "int (div_nu Phi)^2 dnu = int sum_ij (d_ij - d_i d_j log w) phi_i phi_j dnu \
         + int sum_ij d_j phi_i d_i phi_j dnu",
        (lhs.value, lhs.stderr),
        (rhs, rhs_se),
        3.0,
        floor,
    ))
}

/// `L^2` norm bound implied by the curvature constant `C`:
/// `||div_nu Phi||_{L^2(nu)} <= max(sqrt(C), 1) ||Phi||_{W^{1,2}(nu)}`.
pub fn l2_bound_check(
    model: &GaussianModel,
    weight: &Weight,
    phi: &VectorField,
    c_constant: f64,
    engine: Engine,
    seed: u64,
    floor: f64,
) -> Result<IdentityReport> {
    check_dim(model, phi)?;
    let dv = div_nu(model, weight, phi)?;
    let sq = ScalarField::product(&dv.div_nu, &dv.div_nu);
    let lhs = integrate_nu(model, weight.logw(), &sq, engine, seed, streams::VOLUME)?;

    let dim = model.dim();
    let norm_sq = {
        let phi_c = phi.clone();
        let phi_s = phi.clone();
        ScalarField::from_fn("|Phi|^2 + |grad Phi|^2", move |p: &Point| {
            let mut total = 0.0;
            for i in 0..dim {
                let v = phi_c.component(i).value_unchecked(p);
                total += v * v;
                let g = phi_c.component(i).grad_h(p);
                total += g.iter().map(|x| x * x).sum::<f64>();
            }
            total
        })
        .with_singular(move |p: &Point| phi_s.is_singular(p))
    };
    let sobolev = integrate_nu(model, weight.logw(), &norm_sq, engine, seed, streams::VOLUME)?;

    let factor = c_constant.sqrt().max(1.0);
    // Propagate stderr through the square roots (delta method).
    let lhs_norm = lhs.value.max(0.0).sqrt();
    let lhs_norm_se = if lhs_norm > 0.0 { lhs.stderr / (2.0 * lhs_norm) } else { lhs.stderr };
    let rhs_norm = factor * sobolev.value.max(0.0).sqrt();
    let rhs_norm_se = if sobolev.value > 0.0 {
        factor * sobolev.stderr / (2.0 * sobolev.value.sqrt())
    } else {
        factor * sobolev.stderr
    };
    Ok(IdentityReport::from_bound(
        "divergence.l2_bound",
        "||div_nu Phi||_L2(nu) <= max(sqrt(C),1) ||Phi||_W12(nu)",
        (lhs_norm, lhs_norm_se),
        (rhs_norm, rhs_norm_se),
        3.0,
        floor,
    ))
}

// ---- curvature-constant screen and falsifier -------------------------------

/// Largest eigenvalue of the symmetrized `I - hess log w(p)`.
fn curvature_lambda_max(weight: &Weight, p: &Point, dim: usize) -> Result<f64> {
    let hess = weight.logw().hess_h(p)?;
    let mut m = DMatrix::identity(dim, dim) - hess;
    m = 0.5 * (&m + m.transpose());
    let eig = m.symmetric_eigen();
    Ok(eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Monte Carlo estimate of `sup_x lambda_max(I - hess log w(x))`.
#[derive(Debug, Clone, Serialize)]
pub struct CurvatureScreenReport {
    pub weight: String,
    /// Largest sampled eigenvalue (lower bound for the true sup).
    pub c_max_estimate: f64,
    /// Whitened coordinates of the maximizing sample.
    pub c_max_point: Vec<f64>,
    pub samples: u64,
    pub dropped: u64,
}

#[derive(Clone)]
struct SupAcc {
    best: f64,
    point: Vec<f64>,
    samples: u64,
    dropped: u64,
}

/// Sample the measure and track the largest curvature eigenvalue seen.
/// For weights with constant log-Hessian every sample returns the exact
/// constant, so the estimate is exact; in general it is a lower bound.
pub fn condition_41_screen(
    model: &GaussianModel,
    weight: &Weight,
    sample_budget: u64,
    seed: u64,
) -> Result<CurvatureScreenReport> {
    if !weight.has_hess() {
        return Err(EngineError::MissingHessian {
            what: format!("weight `{}` (curvature screen needs hess log w)", weight.label()),
        });
    }
    if sample_budget == 0 {
        return Err(EngineError::InvalidParameter {
            name: "sample_budget",
            reason: "curvature screen needs a positive budget".into(),
        });
    }
    let dim = model.dim();
    let acc = mc_fold(
        model,
        sample_budget,
        seed,
        streams::PROPERTY,
        || SupAcc {
            best: f64::NEG_INFINITY,
            point: Vec::new(),
            samples: 0,
            dropped: 0,
        },
        |acc: &mut SupAcc, p| {
            acc.samples += 1;
            if weight.logw().is_singular(p) {
                acc.dropped += 1;
                return;
            }
            if let Ok(v) = curvature_lambda_max(weight, p, dim) {
                if v > acc.best {
                    acc.best = v;
                    acc.point = p.coords().to_vec();
                }
            } else {
                acc.dropped += 1;
            }
        },
        |a, b| {
            // Keep the earlier batch on ties for determinism.
            let mut out = if b.best > a.best { b.clone() } else { a.clone() };
            out.samples = a.samples + b.samples;
            out.dropped = a.dropped + b.dropped;
            out
        },
    );
    Ok(CurvatureScreenReport {
        weight: weight.label().into(),
        c_max_estimate: acc.best,
        c_max_point: acc.point,
        samples: acc.samples,
        dropped: acc.dropped,
    })
}

/// Certificate that a candidate curvature constant fails.
#[derive(Debug, Clone, Serialize)]
pub struct FalsifierReport {
    pub weight: String,
    pub candidate_c: f64,
    /// Whitened coordinates of the certified violating point, if found.
    pub violating_point: Option<Vec<f64>>,
    /// Ambient norm `||x||_X` there (violations cluster near the origin).
    pub ambient_norm: Option<f64>,
    /// `lambda_max(I - hess log w)` at the violating point.
    pub rayleigh: Option<f64>,
    /// `rayleigh - candidate_c` (positive means violated).
    pub margin: Option<f64>,
    /// Violations found among random samples of the small ambient ball.
    pub ball_hits: u64,
    pub ball_samples: u64,
    /// Points passing the literal special-set membership test from the
    /// construction this search mirrors; that set is empty as printed
    /// (its inequality is unsatisfiable), so this stays 0 — recorded to
    /// document the fact.
    pub special_set_hits: u64,
    /// True when the violating point came from the deterministic
    /// single-coordinate ladder (an analytic guarantee) rather than
    /// random search.
    pub ladder_hit: bool,
    pub violated: bool,
}

/// Membership in the literal set
/// `{ ||x||_X^2 < sqrt(1/2) * sum_i lambda_i (x, v_i)_X^2 }` (ambient
/// coordinates). With spectrum factors <= 1/4 the right side is at most
/// `||x||^2 / (4 sqrt 2)`, so no nonzero point qualifies.
fn special_set_member(model: &GaussianModel, p: &Point) -> bool {
    let mut norm_sq = 0.0;
    let mut weighted = 0.0;
    for k in 0..model.dim() {
        let xk = model.sqrt_lambda(k) * p[k];
        norm_sq += xk * xk;
        weighted += model.lambda(k) * xk * xk;
    }
    norm_sq > 0.0 && norm_sq < 0.5f64.sqrt() * weighted
}

/// Directed search for a violation of
/// `xi^T (I - hess log w(x)) xi <= C |xi|^2`:
///
/// 1. a deterministic ladder of single-coordinate points
///    `x = c v_1` with `c^2 = lambda_1 / (C - 1)` and shrinking
///    multiples — for the `(x,x)^2` weight the top curvature eigenvalue
///    at such points is `1 + 4 lambda_1 / c^2 = 4C - 3 > C`, an
///    analytic guarantee that blows up near the origin;
/// 2. random sampling of the ambient ball of radius
///    `min(1, sqrt(6 / (C - 1)))`, counting violations and literal
///    special-set members;
/// 3. eigenvalue ascent (finite-difference gradient on
///    `lambda_max(I - hess log w)`) from the best point found.
pub fn condition_41_falsify(
    model: &GaussianModel,
    weight: &Weight,
    candidate_c: f64,
    ball_samples: u64,
    seed: u64,
) -> Result<FalsifierReport> {
    if !weight.has_hess() {
        return Err(EngineError::MissingHessian {
            what: format!("weight `{}` (falsifier needs hess log w)", weight.label()),
        });
    }
    if !(candidate_c > 1.0) {
        return Err(EngineError::InvalidParameter {
            name: "candidate_c",
            reason: format!("falsifier expects a candidate constant > 1, got {candidate_c}"),
        });
    }
    let dim = model.dim();
    let lambda1 = model.lambda(0);
    let eval = |p: &Point| -> Option<f64> {
        if weight.logw().is_singular(p) {
            return None;
        }
        curvature_lambda_max(weight, p, dim).ok()
    };

    let mut best: Option<(f64, Point)> = None;
    let mut ladder_hit = false;

    // 1. Single-coordinate ladder (ambient x = c v_1, whitened
    //    y_1 = c / sqrt(lambda_1)).
    let c0 = (lambda1 / (candidate_c - 1.0)).sqrt();
    for j in 0..6 {
        let c = c0 * 0.5f64.powi(j);
        let mut coords = vec![0.0; dim];
        coords[0] = c / lambda1.sqrt();
        let p = model.point(coords)?;
        if let Some(v) = eval(&p) {
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                if v > candidate_c {
                    ladder_hit = true;
                }
                best = Some((v, p));
            }
        }
    }

    // 2. Random search in the ambient ball of the construction's radius.
    let radius = (6.0 / (candidate_c - 1.0)).sqrt().min(1.0);
    let mut ball_hits = 0u64;
    let mut special_set_hits = 0u64;
    let mut sampled = 0u64;
    {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((streams::PROPERTY as u64) << 32 | 0xFA15);
        while sampled < ball_samples {
            // Uniform direction via Gaussian normalization, uniform
            // radius in [0, radius) biased toward the center (where the
            // curvature blows up) by squaring.
            let mut coords = vec![0.0; dim];
            for c in coords.iter_mut() {
                *c = rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            let mut p = model.point(coords)?;
            let ambient: f64 = (0..dim)
                .map(|k| {
                    let xk = model.sqrt_lambda(k) * p[k];
                    xk * xk
                })
                .sum::<f64>()
                .sqrt();
            if ambient == 0.0 {
                continue;
            }
            let u: f64 = rng.gen_range(0.0f64..1.0);
            let target = radius * u * u;
            let scale = target / ambient;
            for k in 0..dim {
                p.coords_mut()[k] *= scale;
            }
            sampled += 1;
            if special_set_member(model, &p) {
                special_set_hits += 1;
            }
            if let Some(v) = eval(&p) {
                if v > candidate_c {
                    ball_hits += 1;
                }
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    best = Some((v, p));
                }
            }
        }
    }

    // 3. Eigenvalue ascent from the best point found.
    if let Some((mut val, mut point)) = best.take() {
        let fd = 1e-6;
        for _ in 0..20 {
            let mut grad = vec![0.0; dim];
            for k in 0..dim {
                let orig = point[k];
                point.coords_mut()[k] = orig + fd;
                let up = eval(&point).unwrap_or(f64::NEG_INFINITY);
                point.coords_mut()[k] = orig - fd;
                let dn = eval(&point).unwrap_or(f64::NEG_INFINITY);
                point.coords_mut()[k] = orig;
                grad[k] = (up - dn) / (2.0 * fd);
            }
            let gnorm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !gnorm.is_finite() || gnorm == 0.0 {
                break;
            }
            // Backtracking line search on the ascent direction.
            let mut step = 0.1 * point.coords().iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-3);
            let mut improved = false;
            for _ in 0..12 {
                let mut trial = point.clone();
                for k in 0..dim {
                    trial.coords_mut()[k] += step * grad[k] / gnorm;
                }
                if let Some(v) = eval(&trial) {
                    if v > val {
                        val = v;
                        point = trial;
                        improved = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        best = Some((val, point));
    }

    let (rayleigh, point) = match best {
        Some((v, p)) => (Some(v), Some(p)),
        None => (None, None),
    };
    let violated = rayleigh.is_some_and(|v| v > candidate_c);
    let ambient_norm = point.as_ref().map(|p| {
        (0..dim)
            .map(|k| {
                let xk = model.sqrt_lambda(k) * p[k];
                xk * xk
            })
            .sum::<f64>()
            .sqrt()
    });
    Ok(FalsifierReport {
        weight: weight.label().into(),
        candidate_c,
        violating_point: if violated {
            point.as_ref().map(|p| p.coords().to_vec())
        } else {
            None
        },
        ambient_norm: if violated { ambient_norm } else { None },
        rayleigh,
        margin: rayleigh.map(|v| v - candidate_c),
        ball_hits,
        ball_samples: sampled,
        special_set_hits,
        ladder_hit,
        violated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::VectorField;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model4() -> GaussianModel {
        GaussianModel::new(vec![1.0, 0.5, 0.25, 0.125], "m4").unwrap()
    }

    fn sample_points(model: &GaussianModel, n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut p = model.zero_point();
                model.sample_into(&mut rng, &mut p);
                p
            })
            .collect()
    }

    fn constant_direction(model: &GaussianModel, k: usize) -> VectorField {
        let dim = model.dim();
        VectorField::new(
            format!("e{k}"),
            (0..dim)
                .map(|i| ScalarField::constant(if i == k { 1.0 } else { 0.0 }))
                .collect(),
        )
    }

    #[test]
    fn gaussian_divergence_of_constant_field_is_minus_linear() {
        let m = model4();
        let c = vec![0.7, -0.3, 0.0, 1.4];
        let phi = VectorField::new(
            "const",
            c.iter().map(|&v| ScalarField::constant(v)).collect(),
        );
        let d = div_mu(&m, &phi).unwrap();
        for p in sample_points(&m, 20, 1) {
            let want: f64 = -c.iter().zip(p.coords()).map(|(ci, yi)| ci * yi).sum::<f64>();
            assert!((d.value(&p) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_divergence_of_gradient_is_the_ou_action() {
        // f = y_1^2: div_mu grad f = 2 - 2 y_1^2.
        let m = model4();
        let f = ScalarField::monomials("y0^2", vec![(1.0, vec![2, 0, 0, 0])]).unwrap();
        let phi = VectorField::gradient_of(&f, m.dim()).unwrap();
        let d = div_mu(&m, &phi).unwrap();
        for p in sample_points(&m, 20, 2) {
            let want = 2.0 - 2.0 * p[0] * p[0];
            assert!((d.value(&p) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn decomposition_is_pointwise_exact() {
        let m = model4();
        let w = Weight::gaussian_type(0.08, &m);
        let phi = VectorField::new(
            "poly",
            vec![
                ScalarField::monomials("p0", vec![(1.0, vec![1, 1, 0, 0])]).unwrap(),
                ScalarField::monomials("p1", vec![(0.5, vec![0, 2, 0, 0])]).unwrap(),
                ScalarField::constant(0.3),
                ScalarField::coordinate(3),
            ],
        );
        let dv = div_nu(&m, &w, &phi).unwrap();
        let pts = sample_points(&m, 200, 3);
        assert!(dv.max_decomposition_residual(&pts) < 1e-12);
    }

    #[test]
    fn weighted_divergence_of_constant_direction_matches_formula() {
        // w_lambda, Phi = basis direction k: div_nu = 2 lambda lambda_k y_k - y_k.
        let m = model4();
        let lam = 0.11;
        let w = Weight::gaussian_type(lam, &m);
        for k in 0..m.dim() {
            let phi = constant_direction(&m, k);
            let dv = div_nu(&m, &w, &phi).unwrap();
            for p in sample_points(&m, 10, 4 + k as u64) {
                let want = 2.0 * lam * m.lambda(k) * p[k] - p[k];
                assert!((dv.div_nu.value(&p) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjointness_holds_exactly_for_polynomials_under_gh() {
        let m = model4();
        let w = Weight::gaussian_type(0.05, &m);
        let f = ScalarField::monomials("f", vec![(1.0, vec![2, 0, 0, 0]), (0.7, vec![0, 1, 1, 0])])
            .unwrap();
        let phi = VectorField::new(
            "phi",
            vec![
                ScalarField::monomials("a", vec![(1.0, vec![1, 0, 0, 0])]).unwrap(),
                ScalarField::monomials("b", vec![(-0.4, vec![0, 0, 2, 0])]).unwrap(),
                ScalarField::constant(1.0),
                ScalarField::monomials("c", vec![(0.2, vec![0, 1, 0, 1])]).unwrap(),
            ],
        );
        let rep = adjointness_check(
            &m,
            &w,
            &f,
            &phi,
            Engine::GaussHermite { nodes_per_dim: 16 },
            0,
            1e-10,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.delta < 1e-10, "delta {}", rep.delta);
    }

    #[test]
    fn adjointness_holds_for_square_norm_weight_by_mc() {
        let m = model4();
        let w = Weight::square_norm(&m);
        let f = ScalarField::gaussian_bump(vec![0.4, -0.2, 0.0, 0.1], 1.1);
        let phi = VectorField::new(
            "smooth",
            vec![
                ScalarField::gaussian_bump(vec![0.0, 0.0, 0.0, 0.0], 1.3),
                ScalarField::constant(0.5),
                ScalarField::monomials("m", vec![(0.3, vec![0, 1, 0, 0])]).unwrap(),
                ScalarField::constant(0.0),
            ],
        );
        let rep = adjointness_check(
            &m,
            &w,
            &f,
            &phi,
            Engine::MonteCarlo { budget: 400_000 },
            17,
            1e-9,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn bilinear_identity_trivial_and_quadrature_cases() {
        let m = model4();
        // f = g = 1, unit weight, h = k: both sides are int y_h^2 dmu = 1.
        let unit = Weight::unit(&m);
        let one = ScalarField::constant(1.0);
        let rep = bilinear_identity_check(
            &m,
            &unit,
            &one,
            &one,
            1,
            1,
            Engine::GaussHermite { nodes_per_dim: 8 },
            0,
            1e-10,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!((rep.lhs - 1.0).abs() < 1e-12);
        assert!((rep.rhs - 1.0).abs() < 1e-12);

        // f = g = y_1, gaussian-type weight, h = k = 1, quadrature-exact.
        let w = Weight::gaussian_type(0.05, &m);
        let y1 = ScalarField::coordinate(0);
        let rep = bilinear_identity_check(
            &m,
            &w,
            &y1,
            &y1,
            0,
            0,
            Engine::GaussHermite { nodes_per_dim: 16 },
            0,
            1e-8,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.delta < 1e-8);

        // h != k, random cylindrical f, g, square-norm weight, MC.
        let wsq = Weight::square_norm(&m);
        let f = ScalarField::gaussian_bump(vec![0.2, 0.0, -0.3, 0.0], 1.2);
        let g = ScalarField::monomials("g", vec![(1.0, vec![0, 1, 0, 0]), (0.5, vec![1, 0, 0, 1])])
            .unwrap();
        let rep = bilinear_identity_check(
            &m,
            &wsq,
            &f,
            &g,
            0,
            2,
            Engine::MonteCarlo { budget: 400_000 },
            23,
            1e-9,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn bilinear_identity_requires_hessian() {
        let m = GaussianModel::with_family(crate::model::SpectrumFamily::BrownianKl, 4).unwrap();
        let w = Weight::sup_norm_kl(64, &m).unwrap();
        let one = ScalarField::constant(1.0);
        let err = bilinear_identity_check(
            &m,
            &w,
            &one,
            &one,
            0,
            0,
            Engine::MonteCarlo { budget: 1000 },
            0,
            1e-9,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::MissingHessian { .. }));
    }

    #[test]
    fn energy_identity_for_gradient_field_under_unit_weight() {
        // Phi = grad f: int (div_mu Phi)^2 dmu = int |grad f|^2 + trace((hess f)^2) dmu.
        let m = model4();
        let unit = Weight::unit(&m);
        let f = ScalarField::monomials(
            "f",
            vec![(1.0, vec![2, 1, 0, 0]), (-0.5, vec![0, 0, 1, 1])],
        )
        .unwrap();
        let phi = VectorField::gradient_of(&f, m.dim()).unwrap();
        let rep = energy_identity_check(
            &m,
            &unit,
            &phi,
            Engine::GaussHermite { nodes_per_dim: 12 },
            0,
            1e-9,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.delta < 1e-9);

        // Phi = 0: both sides vanish.
        let zero = VectorField::new(
            "zero",
            (0..m.dim()).map(|_| ScalarField::constant(0.0)).collect(),
        );
        let rep = energy_identity_check(
            &m,
            &unit,
            &zero,
            Engine::GaussHermite { nodes_per_dim: 6 },
            0,
            1e-12,
        )
        .unwrap();
        assert!(rep.pass);
        assert_eq!(rep.lhs, 0.0);
        assert_eq!(rep.rhs, 0.0);
    }

    #[test]
    fn energy_identity_with_weight_and_linear_field() {
        let m = model4();
        let w = Weight::gaussian_type(0.07, &m);
        let phi = VectorField::new(
            "linear",
            vec![
                ScalarField::linear(vec![1.0, 0.2, 0.0, 0.0], 0.1),
                ScalarField::linear(vec![0.0, -0.5, 0.3, 0.0], 0.0),
                ScalarField::constant(0.8),
                ScalarField::linear(vec![0.0, 0.0, 0.0, 1.0], -0.2),
            ],
        );
        let gh = energy_identity_check(
            &m,
            &w,
            &phi,
            Engine::GaussHermite { nodes_per_dim: 14 },
            0,
            1e-8,
        )
        .unwrap();
        assert!(gh.pass, "{gh:?}");
        let mc = energy_identity_check(
            &m,
            &w,
            &phi,
            Engine::MonteCarlo { budget: 300_000 },
            31,
            1e-9,
        )
        .unwrap();
        assert!(mc.pass, "{mc:?}");
    }

    #[test]
    fn curvature_screen_is_exact_for_constant_hessian() {
        let m = model4();
        // lambda > 0: C = 1 - 2 lambda lambda_min; the Hessian is constant
        // so every sample sees the exact value.
        let lam = 0.09;
        let w = Weight::gaussian_type(lam, &m);
        let rep = condition_41_screen(&m, &w, 5_000, 7).unwrap();
        let exact = 1.0 - 2.0 * lam * 0.125;
        assert!((rep.c_max_estimate - exact).abs() < 1e-12, "{rep:?}");

        // lambda < 0: log-concave, so C <= 1 ... = 1 + 2|lambda| lambda_max.
        let wneg = Weight::gaussian_type(-0.2, &m);
        let rep = condition_41_screen(&m, &wneg, 5_000, 7).unwrap();
        let exact = 1.0 + 2.0 * 0.2 * 1.0;
        assert!((rep.c_max_estimate - exact).abs() < 1e-12);
    }

    #[test]
    fn falsifier_defeats_every_candidate_constant_for_square_norm() {
        let m = GaussianModel::with_family(crate::model::SpectrumFamily::Geometric4, 4).unwrap();
        let w = Weight::square_norm(&m);
        for c in [1.5, 2.0, 5.0, 10.0] {
            let rep = condition_41_falsify(&m, &w, c, 4_000, 13).unwrap();
            assert!(rep.violated, "C = {c}: {rep:?}");
            assert!(rep.ladder_hit, "ladder should certify C = {c}");
            let ray = rep.rayleigh.unwrap();
            // The ladder alone guarantees at least 4C - 3.
            assert!(ray >= 4.0 * c - 3.0 - 1e-6, "C = {c}, rayleigh {ray}");
            assert!(rep.margin.unwrap() > 0.0);
            assert!(rep.violating_point.is_some());
            // The literal special set is empty; the count documents it.
            assert_eq!(rep.special_set_hits, 0);
        }
    }

    #[test]
    fn l2_bound_holds_under_screened_constant() {
        let m = model4();
        let lam = 0.06;
        let w = Weight::gaussian_type(lam, &m);
        let c = condition_41_screen(&m, &w, 2_000, 3).unwrap().c_max_estimate;
        let phi = VectorField::new(
            "mix",
            vec![
                ScalarField::monomials("a", vec![(0.8, vec![1, 0, 0, 0])]).unwrap(),
                ScalarField::gaussian_bump(vec![0.0, 0.3, 0.0, 0.0], 1.0),
                ScalarField::constant(0.4),
                ScalarField::linear(vec![0.1, 0.0, 0.2, 0.0], 0.0),
            ],
        );
        let rep = l2_bound_check(
            &m,
            &w,
            &phi,
            c,
            Engine::MonteCarlo { budget: 200_000 },
            41,
            1e-9,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }
}
