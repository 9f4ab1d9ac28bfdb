//! Traces of Sobolev functions on level sets, and the boundary identities
//! that couple volume integrals over `{G < 0}` to surface integrals over
//! `G^{-1}(0)`.
//!
//! For the continuous fields this engine works with, the trace on the
//! surface is literally the restriction of the evaluator
//! ([`trace_restriction`]); the substance is in the identities:
//!
//! * scalar Gauss–Green ([`check_gauss_green`]):
//!   `int_{G<0} (d_k phi + phi d_k log w - phi y_k) dnu
//!    = int_{G=0} Tr(phi d_k G) (w / |grad G|) drho`;
//! * vector Gauss–Green ([`check_vector_gauss_green`]):
//!   `int_{G<0} div_nu Phi dnu = int_{G=0} <Tr Phi, Tr grad G> (w/|grad G|) drho`;
//! * the two `q`-power identities ([`check_trace_q_identities`]), obtained
//!   from the vector identity with `Phi = |phi|^q grad G` and
//!   `Phi = |phi|^q grad G / |grad G|` — both therefore carry a **plus**
//!   sign on their divergence terms.
//!
//! Volume sides run either by Monte Carlo with a sub-level indicator or,
//! for hyperplanes, by exact quadrature in rotated coordinates
//! (Gauss–Legendre along the normal, Gauss–Hermite tangentially). Surface
//! sides use the exact parametrization when the surface has one and the
//! shell estimator otherwise.

use crate::divergence::div_nu;
use crate::error::{EngineError, Result};
use crate::field::{PropertyReport, ScalarField, VectorField};
use crate::integrate::{
    mc_fold, streams, weighted_integrand, Engine, IntegralEstimate, NODE_BUDGET,
};
use crate::model::{GaussianModel, Point};
use crate::quad::{gauss_hermite, gauss_legendre};
use crate::report::IdentityReport;
use crate::surface::{surface_integral_exact, surface_integral_shell, LevelSetSurface};
use crate::weight::Weight;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The trace of a field on the surface: for continuous representatives
/// (every built-in field) this is the restriction of the evaluator, so
/// the returned field has the same values, gradient, and singular set —
/// only the label records the restriction. Use it as the integrand of a
/// surface integral.
pub fn trace_restriction(surface: &LevelSetSurface, f: &ScalarField) -> ScalarField {
    f.clone()
        .relabel(format!("Tr[{}]@{}", f.label(), surface.label()))
}

// ---- exact half-space quadrature (hyperplanes) ------------------------------

/// Standard-normal half-line width covering the density to below 1e-30.
const HALFSPACE_SPAN: f64 = 12.0;
/// Gauss–Legendre nodes along the normal direction.
const HALFSPACE_GL_NODES: usize = 96;

/// Deterministic quadrature of `int_{<a,y> < c} f dmu` in rotated
/// coordinates: `y = s a + B t` with `B` an orthonormal basis of the
/// complement, the Gaussian factorizing as `pdf(s) ds x N(0, I_{n-1})(dt)`.
/// Gauss–Legendre on `s in [c - 12, c]` (the density below is negligible),
/// tensor Gauss–Hermite on `t`.
pub(crate) fn halfspace_integral_exact(
    model: &GaussianModel,
    normal_unit: &[f64],
    offset: f64,
    integrand: &ScalarField,
) -> Result<IntegralEstimate> {
    let n = model.dim();
    if normal_unit.len() != n {
        return Err(EngineError::DimensionMismatch {
            expected: n,
            got: normal_unit.len(),
        });
    }
    let m = n - 1;
    let cols = crate::surface::householder_complement_cols(normal_unit);
    let s_rule = gauss_legendre(HALFSPACE_GL_NODES)?
        .mapped_to(offset - HALFSPACE_SPAN, offset);
    // Tangential node count under the total budget (the s-axis multiplies
    // the grid by its node count).
    let mut nodes = 20usize;
    let budget_per_slice = NODE_BUDGET / HALFSPACE_GL_NODES as u64;
    while m > 0 && nodes > 8 && (nodes as u128).pow(m as u32) > budget_per_slice as u128 {
        nodes -= 1;
    }
    let mut point = model.zero_point();
    let mut dropped = 0u64;
    let mut count = 0u64;
    let norm = (2.0 * std::f64::consts::PI).sqrt();
    let mut total = 0.0;
    if m == 0 {
        for (s, ws) in s_rule.nodes.iter().zip(&s_rule.weights) {
            point.coords_mut()[0] = s / normal_unit[0];
            count += 1;
            if integrand.is_singular(&point) {
                dropped += 1;
                continue;
            }
            total += ws * (-0.5 * s * s).exp() / norm * integrand.value_unchecked(&point);
        }
        return Ok(IntegralEstimate::exact(total, "exact-halfspace", count, dropped));
    }
    let t_rule = gauss_hermite(nodes)?;
    let t_rules = vec![t_rule; m];
    for (s, ws) in s_rule.nodes.iter().zip(&s_rule.weights) {
        let density = ws * (-0.5 * s * s).exp() / norm;
        let (slice, slice_count) = crate::integrate::tensor_quad(&t_rules, |t| {
            for i in 0..n {
                let mut yi = s * normal_unit[i];
                for (j, col) in cols.iter().enumerate() {
                    yi += t[j] * col[i];
                }
                point.coords_mut()[i] = yi;
            }
            if integrand.is_singular(&point) {
                dropped += 1;
                0.0
            } else {
                integrand.value_unchecked(&point)
            }
        });
        count += slice_count;
        total += density * slice;
    }
    Ok(IntegralEstimate::exact(total, "exact-halfspace", count, dropped))
}

// ---- sub-level Monte Carlo ---------------------------------------------------

struct SublevelAcc {
    sum: f64,
    sum_sq: f64,
    kept: u64,
    dropped: u64,
    hits: u64,
}

/// Monte Carlo estimate of `int_{G<0} f dnu = E_mu[1_{G<0} f w]`; counts
/// sub-level hits and errors when the indicator never fires.
fn sublevel_nu_integral(
    model: &GaussianModel,
    weight: &Weight,
    g: &ScalarField,
    integrand: &ScalarField,
    budget: u64,
    seed: u64,
) -> Result<(IntegralEstimate, u64)> {
    let logw = weight.logw();
    let acc = mc_fold(
        model,
        budget,
        seed,
        streams::VOLUME,
        || SublevelAcc {
            sum: 0.0,
            sum_sq: 0.0,
            kept: 0,
            dropped: 0,
            hits: 0,
        },
        |acc: &mut SublevelAcc, p| {
            if g.is_singular(p) || integrand.is_singular(p) || logw.is_singular(p) {
                acc.dropped += 1;
                return;
            }
            acc.kept += 1;
            let v = if g.value_unchecked(p) < 0.0 {
                acc.hits += 1;
                integrand.value_unchecked(p) * logw.value_unchecked(p).exp()
            } else {
                0.0
            };
            acc.sum += v;
            acc.sum_sq += v * v;
        },
        |mut a, b| {
            a.sum += b.sum;
            a.sum_sq += b.sum_sq;
            a.kept += b.kept;
            a.dropped += b.dropped;
            a.hits += b.hits;
            a
        },
    );
    if acc.hits == 0 {
        return Err(EngineError::EmptySublevelSet {
            hits: 0,
            samples: acc.kept + acc.dropped,
        });
    }
    let n = acc.kept.max(1) as f64;
    let mean = acc.sum / n;
    let var = (acc.sum_sq / n - mean * mean).max(0.0);
    Ok((
        IntegralEstimate {
            value: mean,
            stderr: (var / n).sqrt(),
            method: "mc-sublevel".into(),
            n_eval: acc.kept + acc.dropped,
            dropped: acc.dropped,
        },
        acc.hits,
    ))
}

/// Volume side: `int_{G<0} u dnu` by the engine's method. The exact path
/// requires a hyperplane surface.
fn sublevel_side(
    model: &GaussianModel,
    weight: &Weight,
    surface: &LevelSetSurface,
    u: &ScalarField,
    engine: Engine,
    seed: u64,
) -> Result<IntegralEstimate> {
    match engine {
        Engine::MonteCarlo { budget } => {
            let (est, _) = sublevel_nu_integral(model, weight, surface.g(), u, budget, seed)?;
            Ok(est)
        }
        Engine::GaussHermite { .. } => match surface.hyperplane_data() {
            Some((a, c)) => {
                let f = weighted_integrand(weight.logw(), u);
                halfspace_integral_exact(model, a, c, &f)
            }
            None => Err(EngineError::NoParametrization {
                what: format!(
                    "exact sub-level quadrature needs a hyperplane; `{}` is not one",
                    surface.label()
                ),
            }),
        },
    }
}

/// Surface side: `int v drho` — exact parametrization when the surface
/// has one, shell estimator otherwise.
fn surface_side(
    model: &GaussianModel,
    surface: &LevelSetSurface,
    v: &ScalarField,
    engine: Engine,
    seed: u64,
) -> Result<IntegralEstimate> {
    if surface.has_exact(model.dim()) {
        surface_integral_exact(model, surface, v)
    } else {
        let budget = match engine {
            Engine::MonteCarlo { budget } => budget,
            Engine::GaussHermite { .. } => {
                return Err(EngineError::NoParametrization {
                    what: format!(
                        "surface `{}` has no exact parametrization for a deterministic side",
                        surface.label()
                    ),
                })
            }
        };
        Ok(surface_integral_shell(model, surface, v, budget, seed)?.estimate)
    }
}

// ---- gradient fields of the level-set function -------------------------------

/// `grad G` as a vector field with analytic component gradients taken
/// from the Hessian of `G`.
fn grad_field(model: &GaussianModel, surface: &LevelSetSurface) -> Result<VectorField> {
    let g = surface.g();
    if !g.has_hess() {
        return Err(EngineError::MissingHessian {
            what: format!("surface `{}` (div_nu grad G needs hess G)", surface.label()),
        });
    }
    VectorField::gradient_of(g, model.dim())
}

/// `grad G / |grad G|` with analytic component gradients via the quotient
/// rule. Shares `G`'s singular set.
fn normalized_grad_field(model: &GaussianModel, surface: &LevelSetSurface) -> Result<VectorField> {
    let g = surface.g();
    if !g.has_hess() {
        return Err(EngineError::MissingHessian {
            what: format!(
                "surface `{}` (div_nu of the unit normal needs hess G)",
                surface.label()
            ),
        });
    }
    let dim = model.dim();
    let comps = (0..dim)
        .map(|k| {
            let gv = g.clone();
            let gg = g.clone();
            let gs = g.clone();
            ScalarField::from_fn(format!("normal_{k}"), move |p: &Point| {
                let grad = gv.grad_h(p);
                let norm: f64 = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
                grad[k] / norm
            })
            .with_grad(move |p: &Point| {
                let grad = gg.grad_h(p);
                let hess = gg.hess_h(p).expect("hessian checked above");
                let norm_sq: f64 = grad.iter().map(|x| x * x).sum();
                let norm = norm_sq.sqrt();
                // d_j (g_k / |g|) = h_jk / |g| - g_k <g, h_j.> / |g|^3.
                (0..p.dim())
                    .map(|j| {
                        let dot: f64 = (0..p.dim()).map(|i| grad[i] * hess[(j, i)]).sum();
                        hess[(j, k)] / norm - grad[k] * dot / (norm_sq * norm)
                    })
                    .collect()
            })
            .with_singular(move |p: &Point| gs.is_singular(p))
        })
        .collect();
    Ok(VectorField::new(
        format!("grad {} / |grad|", g.label()),
        comps,
    ))
}

// ---- identity checks ---------------------------------------------------------

fn note_config(
    rep: IdentityReport,
    weight: &Weight,
    surface: &LevelSetSurface,
    extra: String,
    engine: Engine,
    seed: u64,
) -> IdentityReport {
    let engine_desc = match engine {
        Engine::MonteCarlo { budget } => format!("mc(budget={budget}, seed={seed})"),
        Engine::GaussHermite { nodes_per_dim } => format!("gh(nodes={nodes_per_dim})"),
    };
    rep.with_note(format!(
        "weight={} surface={} {extra} engine={engine_desc}",
        weight.label(),
        surface.label()
    ))
}

/// Scalar Gauss–Green identity for direction `k`:
///
/// ```text
/// int_{G<0} (d_k phi + phi d_k log w - phi y_k) dnu
///   = int_{G=0} Tr(phi d_k G) (w / |grad G|) drho
/// ```
pub fn check_gauss_green(
    model: &GaussianModel,
    weight: &Weight,
    surface: &LevelSetSurface,
    phi: &ScalarField,
    k: usize,
    engine: Engine,
    seed: u64,
    floor: f64,
) -> Result<IdentityReport> {
    let dim = model.dim();
    if k >= dim {
        return Err(EngineError::IndexOutOfRange { index: k, dim });
    }
    let logw = weight.logw().clone();
    let u = {
        let phi_c = phi.clone();
        let lw = logw.clone();
        let phi_s = phi.clone();
        let lw_s = logw.clone();
        ScalarField::from_fn(
            format!("d_{k} {0} + {0} d_{k} log w - {0} y_{k}", phi.label()),
            move |p: &Point| {
                let pv = phi_c.value_unchecked(p);
                phi_c.partial(p, k) + pv * lw.grad_h(p)[k] - pv * p[k]
            },
        )
        .with_singular(move |p: &Point| phi_s.is_singular(p) || lw_s.is_singular(p))
    };
    let lhs = sublevel_side(model, weight, surface, &u, engine, seed)?;

    let g = surface.g().clone();
    let v = {
        let phi_c = phi.clone();
        let lw = logw.clone();
        let g_c = g.clone();
        let phi_s = phi.clone();
        let lw_s = logw;
        let g_s = g;
        ScalarField::from_fn(
            format!("Tr({} d_{k} G) w / |grad G|", phi.label()),
            move |p: &Point| {
                let grad = g_c.grad_h(p);
                let norm: f64 = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
                phi_c.value_unchecked(p) * grad[k] * lw.value_unchecked(p).exp() / norm
            },
        )
        .with_singular(move |p: &Point| {
            phi_s.is_singular(p) || lw_s.is_singular(p) || g_s.is_singular(p)
        })
    };
    let rhs = surface_side(model, surface, &v, engine, seed)?;

    let rep = IdentityReport::from_estimates(
        format!("trace.gauss_green.k{k}"),
        "int_{G<0} (d_k phi + phi d_k log w - phi y_k) dnu \
         = int_{G=0} Tr(phi d_k G) (w/|grad G|) drho",
        &lhs,
        &rhs,
        3.0,
        floor,
    );
    Ok(note_config(
        rep,
        weight,
        surface,
        format!("phi={} k={k}", phi.label()),
        engine,
        seed,
    ))
}

/// Vector Gauss–Green identity:
///
/// ```text
/// int_{G<0} div_nu Phi dnu = int_{G=0} <Tr Phi, Tr grad G> (w/|grad G|) drho
/// ```
pub fn check_vector_gauss_green(
    model: &GaussianModel,
    weight: &Weight,
    surface: &LevelSetSurface,
    phi: &VectorField,
    engine: Engine,
    seed: u64,
    floor: f64,
) -> Result<IdentityReport> {
    let dv = div_nu(model, weight, phi)?;
    let lhs = sublevel_side(model, weight, surface, &dv.div_nu, engine, seed)?;

    let g = surface.g().clone();
    let logw = weight.logw().clone();
    let v = {
        let phi_c = phi.clone();
        let g_c = g.clone();
        let lw = logw.clone();
        let phi_s = phi.clone();
        let g_s = g;
        let lw_s = logw;
        ScalarField::from_fn(
            format!("<Tr {}, Tr grad G> w / |grad G|", phi.label()),
            move |p: &Point| {
                let grad = g_c.grad_h(p);
                let norm: f64 = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = (0..phi_c.len())
                    .map(|j| phi_c.component(j).value_unchecked(p) * grad[j])
                    .sum();
                dot * lw.value_unchecked(p).exp() / norm
            },
        )
        .with_singular(move |p: &Point| {
            phi_s.is_singular(p) || lw_s.is_singular(p) || g_s.is_singular(p)
        })
    };
    let rhs = surface_side(model, surface, &v, engine, seed)?;

    let rep = IdentityReport::from_estimates(
        "trace.gauss_green.vector",
        "int_{G<0} div_nu Phi dnu = int_{G=0} <Tr Phi, Tr grad G> (w/|grad G|) drho",
        &lhs,
        &rhs,
        3.0,
        floor,
    );
    Ok(note_config(
        rep,
        weight,
        surface,
        format!("Phi={}", phi.label()),
        engine,
        seed,
    ))
}

/// `q phi |phi|^{q-2}` with the a.e. convention `sign(phi)` at `q = 1`
/// (the factor is undefined at `phi = 0`, a measure-zero set).
fn power_prefactor(phi: f64, q: f64) -> f64 {
    if q == 1.0 {
        phi.signum()
    } else {
        q * phi * phi.abs().powf(q - 2.0)
    }
}

/// The two `q`-power trace identities, derived from the vector
/// Gauss–Green identity with `Phi = |phi|^q grad G` (first) and
/// `Phi = |phi|^q grad G / |grad G|` (second); both carry a plus sign on
/// the divergence term:
///
/// ```text
/// int_{G<0} (q phi |phi|^{q-2} <grad phi, grad G> + |phi|^q div_nu grad G) dnu
///   = int_{G=0} Tr|phi|^q Tr|grad G| w drho
///
/// int_{G<0} (q phi |phi|^{q-2} <grad phi, grad G/|grad G|>
///            + |phi|^q div_nu (grad G/|grad G|)) dnu
///   = int_{G=0} Tr|phi|^q w drho
/// ```
pub fn check_trace_q_identities(
    model: &GaussianModel,
    weight: &Weight,
    surface: &LevelSetSurface,
    phi: &ScalarField,
    q: f64,
    engine: Engine,
    seed: u64,
    floor: f64,
) -> Result<(IdentityReport, IdentityReport)> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(EngineError::InvalidParameter {
            name: "q",
            reason: format!("trace identities need q >= 1, got {q}"),
        });
    }
    let g = surface.g().clone();
    let logw = weight.logw().clone();

    let grad_g = grad_field(model, surface)?;
    let unit_g = normalized_grad_field(model, surface)?;
    let div_grad = div_nu(model, weight, &grad_g)?.div_nu;
    let div_unit = div_nu(model, weight, &unit_g)?.div_nu;

    // Volume integrands.
    let lhs1_field = {
        let phi_c = phi.clone();
        let g_c = g.clone();
        let dvg = div_grad.clone();
        let phi_s = phi.clone();
        let g_s = g.clone();
        let lw_s = logw.clone();
        ScalarField::from_fn(
            format!("q {0}|{0}|^(q-2) <grad {0}, grad G> + |{0}|^q div_nu grad G", phi.label()),
            move |p: &Point| {
                let pv = phi_c.value_unchecked(p);
                let pg = phi_c.grad_h(p);
                let gg = g_c.grad_h(p);
                let dot: f64 = pg.iter().zip(&gg).map(|(a, b)| a * b).sum();
                power_prefactor(pv, q) * dot + pv.abs().powf(q) * dvg.value_unchecked(p)
            },
        )
        .with_singular(move |p: &Point| {
            phi_s.is_singular(p) || g_s.is_singular(p) || lw_s.is_singular(p)
        })
    };
    let lhs2_field = {
        let phi_c = phi.clone();
        let g_c = g.clone();
        let dvu = div_unit.clone();
        let phi_s = phi.clone();
        let g_s = g.clone();
        let lw_s = logw.clone();
        ScalarField::from_fn(
            format!(
                "q {0}|{0}|^(q-2) <grad {0}, grad G/|grad G|> + |{0}|^q div_nu (grad G/|grad G|)",
                phi.label()
            ),
            move |p: &Point| {
                let pv = phi_c.value_unchecked(p);
                let pg = phi_c.grad_h(p);
                let gg = g_c.grad_h(p);
                let norm: f64 = gg.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = pg.iter().zip(&gg).map(|(a, b)| a * b).sum();
                power_prefactor(pv, q) * dot / norm
                    + pv.abs().powf(q) * dvu.value_unchecked(p)
            },
        )
        .with_singular(move |p: &Point| {
            phi_s.is_singular(p) || g_s.is_singular(p) || lw_s.is_singular(p)
        })
    };

    // Surface integrands.
    let rhs1_field = {
        let phi_c = phi.clone();
        let g_c = g.clone();
        let lw = logw.clone();
        let phi_s = phi.clone();
        let g_s = g.clone();
        let lw_s = logw.clone();
        ScalarField::from_fn(
            format!("Tr|{0}|^q Tr|grad G| w", phi.label()),
            move |p: &Point| {
                let norm: f64 = g_c.grad_h(p).iter().map(|x| x * x).sum::<f64>().sqrt();
                phi_c.value_unchecked(p).abs().powf(q) * norm * lw.value_unchecked(p).exp()
            },
        )
        .with_singular(move |p: &Point| {
            phi_s.is_singular(p) || g_s.is_singular(p) || lw_s.is_singular(p)
        })
    };
    let rhs2_field = {
        let phi_c = phi.clone();
        let lw = logw.clone();
        let phi_s = phi.clone();
        let lw_s = logw.clone();
        let g_s = g.clone();
        ScalarField::from_fn(format!("Tr|{0}|^q w", phi.label()), move |p: &Point| {
            phi_c.value_unchecked(p).abs().powf(q) * lw.value_unchecked(p).exp()
        })
        .with_singular(move |p: &Point| {
            phi_s.is_singular(p) || lw_s.is_singular(p) || g_s.is_singular(p)
        })
    };

    let lhs1 = sublevel_side(model, weight, surface, &lhs1_field, engine, seed)?;
    let rhs1 = surface_side(model, surface, &rhs1_field, engine, seed)?;
    let lhs2 = sublevel_side(model, weight, surface, &lhs2_field, engine, seed)?;
    let rhs2 = surface_side(model, surface, &rhs2_field, engine, seed)?;

    let first = IdentityReport::from_estimates(
        format!("trace.q_identity.raw.q{q}"),
        "int_{G<0} (q phi |phi|^(q-2) <grad phi, grad G> + |phi|^q div_nu grad G) dnu \
         = int_{G=0} Tr|phi|^q Tr|grad G| w drho",
        &lhs1,
        &rhs1,
        3.0,
        floor,
    );
    let second = IdentityReport::from_estimates(
        format!("trace.q_identity.normalized.q{q}"),
        "int_{G<0} (q phi |phi|^(q-2) <grad phi, grad G/|grad G|> \
         + |phi|^q div_nu (grad G/|grad G|)) dnu = int_{G=0} Tr|phi|^q w drho",
        &lhs2,
        &rhs2,
        3.0,
        floor,
    );
    let extra = format!("phi={} q={q}", phi.label());
    Ok((
        note_config(first, weight, surface, extra.clone(), engine, seed),
        note_config(second, weight, surface, extra, engine, seed),
    ))
}

// ---- unit-weight reference path ----------------------------------------------

/// Independent Gaussian-only Gauss–Green path: computes both sides with
/// `w = 1` hard-coded (no weight machinery anywhere), using the same
/// sample streams as [`check_gauss_green`]. Reports with unit weight must
/// agree with this to rounding.
pub fn gaussian_gauss_green_reference(
    model: &GaussianModel,
    surface: &LevelSetSurface,
    phi: &ScalarField,
    k: usize,
    engine: Engine,
    seed: u64,
    floor: f64,
) -> Result<IdentityReport> {
    let dim = model.dim();
    if k >= dim {
        return Err(EngineError::IndexOutOfRange { index: k, dim });
    }
    let u = {
        let phi_c = phi.clone();
        let phi_s = phi.clone();
        ScalarField::from_fn(
            format!("d_{k} {0} - {0} y_{k}", phi.label()),
            move |p: &Point| phi_c.partial(p, k) - phi_c.value_unchecked(p) * p[k],
        )
        .with_singular(move |p: &Point| phi_s.is_singular(p))
    };
    let g = surface.g();
    let lhs = match engine {
        Engine::MonteCarlo { budget } => {
            let g_c = g.clone();
            let u_c = u.clone();
            let acc = mc_fold(
                model,
                budget,
                seed,
                streams::VOLUME,
                || SublevelAcc {
                    sum: 0.0,
                    sum_sq: 0.0,
                    kept: 0,
                    dropped: 0,
                    hits: 0,
                },
                |acc: &mut SublevelAcc, p| {
                    if g_c.is_singular(p) || u_c.is_singular(p) {
                        acc.dropped += 1;
                        return;
                    }
                    acc.kept += 1;
                    let v = if g_c.value_unchecked(p) < 0.0 {
                        acc.hits += 1;
                        u_c.value_unchecked(p)
                    } else {
                        0.0
                    };
                    acc.sum += v;
                    acc.sum_sq += v * v;
                },
                |mut a, b| {
                    a.sum += b.sum;
                    a.sum_sq += b.sum_sq;
                    a.kept += b.kept;
                    a.dropped += b.dropped;
                    a.hits += b.hits;
                    a
                },
            );
            if acc.hits == 0 {
                return Err(EngineError::EmptySublevelSet {
                    hits: 0,
                    samples: acc.kept + acc.dropped,
                });
            }
            let n = acc.kept.max(1) as f64;
            let mean = acc.sum / n;
            let var = (acc.sum_sq / n - mean * mean).max(0.0);
            IntegralEstimate {
                value: mean,
                stderr: (var / n).sqrt(),
                method: "mc-sublevel".into(),
                n_eval: acc.kept + acc.dropped,
                dropped: acc.dropped,
            }
        }
        Engine::GaussHermite { .. } => match surface.hyperplane_data() {
            Some((a, c)) => halfspace_integral_exact(model, a, c, &u)?,
            None => {
                return Err(EngineError::NoParametrization {
                    what: format!(
                        "exact sub-level quadrature needs a hyperplane; `{}` is not one",
                        surface.label()
                    ),
                })
            }
        },
    };

    let v = {
        let phi_c = phi.clone();
        let g_c = g.clone();
        let phi_s = phi.clone();
        let g_s = g.clone();
        ScalarField::from_fn(
            format!("Tr({} d_{k} G) / |grad G|", phi.label()),
            move |p: &Point| {
                let grad = g_c.grad_h(p);
                let norm: f64 = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
                phi_c.value_unchecked(p) * grad[k] / norm
            },
        )
        .with_singular(move |p: &Point| phi_s.is_singular(p) || g_s.is_singular(p))
    };
    let rhs = surface_side(model, surface, &v, engine, seed)?;
    Ok(IdentityReport::from_estimates(
        format!("trace.gauss_green.gaussian_reference.k{k}"),
        "int_{G<0} (d_k phi - phi y_k) dmu = int_{G=0} Tr(phi d_k G) / |grad G| drho",
        &lhs,
        &rhs,
        3.0,
        floor,
    ))
}

// ---- pointwise trace algebra ---------------------------------------------------

/// Sample points on (or for custom surfaces, near) the surface.
fn surface_points(
    model: &GaussianModel,
    surface: &LevelSetSurface,
    n_points: usize,
    seed: u64,
) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((streams::PROPERTY as u64) << 32 | 0x7A3E);
    let dim = model.dim();
    let mut pts = Vec::with_capacity(n_points);
    if let Some((a, c)) = surface.hyperplane_data() {
        let cols = crate::surface::householder_complement_cols(a);
        let mut t = model.zero_point();
        while pts.len() < n_points {
            model.sample_into(&mut rng, &mut t);
            let mut coords = vec![0.0; dim];
            for i in 0..dim {
                coords[i] = c * a[i];
                for (j, col) in cols.iter().enumerate().take(dim - 1) {
                    coords[i] += t[j] * col[i];
                }
            }
            pts.push(model.point(coords).expect("dimension is right"));
        }
    } else if let Some(r) = surface.sphere_radius() {
        let mut z = model.zero_point();
        while pts.len() < n_points {
            model.sample_into(&mut rng, &mut z);
            let norm: f64 = (0..dim)
                .map(|i| model.lambda(i) * z[i] * z[i])
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                continue;
            }
            let coords = (0..dim).map(|i| r * z[i] / norm).collect();
            pts.push(model.point(coords).expect("dimension is right"));
        }
    } else {
        // Custom surface: band points |G| < delta by rejection.
        let g = surface.g();
        let delta = surface.delta();
        let mut z = model.zero_point();
        let mut attempts = 0usize;
        while pts.len() < n_points && attempts < n_points * 10_000 {
            attempts += 1;
            model.sample_into(&mut rng, &mut z);
            if !g.is_singular(&z) && g.value_unchecked(&z).abs() < delta {
                pts.push(z.clone());
            }
        }
    }
    pts
}

/// Pointwise product rule of traces, `Tr(f g) = Tr(f) Tr(g)`, asserted on
/// sampled surface points. Holds exactly by construction (traces are
/// restrictions); the report records the largest relative deviation seen.
pub fn trace_product_check(
    model: &GaussianModel,
    surface: &LevelSetSurface,
    f: &ScalarField,
    g: &ScalarField,
    n_points: usize,
    seed: u64,
) -> PropertyReport {
    let tf = trace_restriction(surface, f);
    let tg = trace_restriction(surface, g);
    let tfg = trace_restriction(surface, &ScalarField::product(f, g));
    let pts = surface_points(model, surface, n_points, seed);
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut worst = 0.0f64;
    for p in &pts {
        if tf.is_singular(p) || tg.is_singular(p) || tfg.is_singular(p) {
            skipped += 1;
            continue;
        }
        checked += 1;
        let lhs = tfg.value_unchecked(p);
        let rhs = tf.value_unchecked(p) * tg.value_unchecked(p);
        let rel = (lhs - rhs).abs() / rhs.abs().max(1.0);
        worst = worst.max(rel);
    }
    PropertyReport {
        label: format!(
            "Tr({} * {}) = Tr({0}) Tr({1}) on {}",
            f.label(),
            g.label(),
            surface.label()
        ),
        checked,
        skipped,
        max_rel_err: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SpectrumFamily;

    fn model4() -> GaussianModel {
        GaussianModel::new(vec![1.0, 0.5, 0.25, 0.125], "m4").unwrap()
    }

    fn pdf(c: f64) -> f64 {
        (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn halfspace_quadrature_matches_gaussian_closed_forms() {
        let m = model4();
        let a = [1.0, 0.0, 0.0, 0.0];
        // mu(y_1 < 0) = 1/2.
        let est =
            halfspace_integral_exact(&m, &a, 0.0, &ScalarField::constant(1.0)).unwrap();
        assert!((est.value - 0.5).abs() < 1e-12, "{}", est.value);
        // int_{y_1 < c} y_1 dmu = -pdf(c).
        let est =
            halfspace_integral_exact(&m, &a, 0.7, &ScalarField::coordinate(0)).unwrap();
        assert!((est.value + pdf(0.7)).abs() < 1e-12);
        // Tangential moment: int_{y_1 < c} y_2^2 dmu = Phi(c).
        let y2sq = ScalarField::monomials("y2^2", vec![(1.0, vec![0, 2, 0, 0])]).unwrap();
        let est = halfspace_integral_exact(&m, &a, 0.4, &y2sq).unwrap();
        let phi_c = 0.655_421_741_610_324; // Phi(0.4)
        assert!((est.value - phi_c).abs() < 1e-9, "{}", est.value);
    }

    #[test]
    fn trace_restriction_preserves_values_and_constants() {
        let m = model4();
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0, 0.0], 0.8).unwrap();
        let c = ScalarField::constant(3.5);
        let tr = trace_restriction(&s, &c);
        assert!(tr.label().starts_with("Tr["));
        let pts = surface_points(&m, &s, 32, 1);
        assert_eq!(pts.len(), 32);
        for p in &pts {
            assert_eq!(tr.value(p), 3.5);
            // On {y_1 = c} the first coordinate restricts to the constant c.
            assert!((ScalarField::coordinate(0).value(p) - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_product_rule_is_exact_on_surfaces() {
        let m = model4();
        let f = ScalarField::gaussian_bump(vec![0.3, 0.0, -0.2, 0.0], 1.2);
        let g = ScalarField::monomials("g", vec![(1.0, vec![1, 1, 0, 0]), (0.4, vec![0, 0, 2, 0])])
            .unwrap();
        for s in [
            LevelSetSurface::hyperplane(&m, vec![1.0, -1.0, 0.0, 0.5], 0.6).unwrap(),
            LevelSetSurface::sphere(&m, 1.0).unwrap(),
        ] {
            let rep = trace_product_check(&m, &s, &f, &g, 200, 5);
            assert_eq!(rep.checked, 200, "{rep:?}");
            assert_eq!(rep.max_rel_err, 0.0, "{rep:?}");
        }
    }

    #[test]
    fn gauss_green_unit_weight_hyperplane_closed_form() {
        // phi = 1, w = 1, {y_1 = 0}, k = 0: both sides equal 1/sqrt(2 pi).
        let m = model4();
        let unit = Weight::unit(&m);
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0, 0.0], 0.0).unwrap();
        let one = ScalarField::constant(1.0);
        let rep = check_gauss_green(
            &m,
            &unit,
            &s,
            &one,
            0,
            Engine::GaussHermite { nodes_per_dim: 12 },
            0,
            1e-10,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        let want = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((rep.lhs - want).abs() < 1e-10, "lhs {}", rep.lhs);
        assert!((rep.rhs - want).abs() < 1e-12, "rhs {}", rep.rhs);

        // k orthogonal to the normal: both sides vanish.
        let rep = check_gauss_green(
            &m,
            &unit,
            &s,
            &one,
            2,
            Engine::GaussHermite { nodes_per_dim: 12 },
            0,
            1e-10,
        )
        .unwrap();
        assert!(rep.pass);
        assert!(rep.lhs.abs() < 1e-12);
        assert!(rep.rhs.abs() < 1e-14);

        // Monte Carlo agrees with the closed form within half a percent.
        let rep = check_gauss_green(
            &m,
            &unit,
            &s,
            &one,
            0,
            Engine::MonteCarlo { budget: 1_000_000 },
            7,
            1e-9,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!((rep.lhs - want).abs() / want < 0.005, "lhs {}", rep.lhs);
    }

    #[test]
    fn gauss_green_weighted_hyperplane_all_directions() {
        let m = model4();
        let w = Weight::gaussian_type(0.05, &m);
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0, 0.0], 0.3).unwrap();
        let bump = ScalarField::gaussian_bump(vec![0.2, -0.1, 0.0, 0.3], 1.1);
        for phi in [ScalarField::constant(1.0), bump] {
            for k in 0..m.dim() {
                let rep = check_gauss_green(
                    &m,
                    &w,
                    &s,
                    &phi,
                    k,
                    Engine::GaussHermite { nodes_per_dim: 16 },
                    0,
                    1e-8,
                )
                .unwrap();
                assert!(rep.pass, "phi={} k={k}: {rep:?}", phi.label());
                assert!(rep.delta < 1e-8, "phi={} k={k}: delta {}", phi.label(), rep.delta);
            }
        }
    }

    #[test]
    fn gauss_green_on_sphere_by_monte_carlo() {
        let m = GaussianModel::with_family(SpectrumFamily::Geometric4, 3).unwrap();
        let w = Weight::gaussian_type(0.05, &m);
        let s = LevelSetSurface::sphere(&m, 1.0).unwrap();
        let phi = ScalarField::gaussian_bump(vec![0.4, 0.0, -0.3], 1.3);
        for k in 0..3 {
            let rep = check_gauss_green(
                &m,
                &w,
                &s,
                &phi,
                k,
                Engine::MonteCarlo { budget: 600_000 },
                11,
                1e-9,
            )
            .unwrap();
            assert!(rep.pass, "k={k}: {rep:?}");
        }
    }

    #[test]
    fn vector_gauss_green_reduces_to_scalar_for_constant_direction() {
        let m = model4();
        let w = Weight::gaussian_type(0.06, &m);
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0, 0.0], 0.2).unwrap();
        let k = 1usize;
        let e_k = VectorField::new(
            "e1",
            (0..m.dim())
                .map(|i| ScalarField::constant(if i == k { 1.0 } else { 0.0 }))
                .collect(),
        );
        let vector = check_vector_gauss_green(
            &m,
            &w,
            &s,
            &e_k,
            Engine::GaussHermite { nodes_per_dim: 14 },
            0,
            1e-9,
        )
        .unwrap();
        let scalar = check_gauss_green(
            &m,
            &w,
            &s,
            &ScalarField::constant(1.0),
            k,
            Engine::GaussHermite { nodes_per_dim: 14 },
            0,
            1e-9,
        )
        .unwrap();
        assert!(vector.pass, "{vector:?}");
        assert!((vector.lhs - scalar.lhs).abs() < 1e-12);
        assert!((vector.rhs - scalar.rhs).abs() < 1e-12);
    }

    #[test]
    fn vector_gauss_green_with_gradient_field_and_polynomials() {
        // Phi = grad G = a on a hyperplane: RHS = int w drho.
        let m = model4();
        let w = Weight::gaussian_type(0.04, &m);
        let s = LevelSetSurface::hyperplane(&m, vec![2.0, 1.0, 0.0, 0.0], 0.5).unwrap();
        let (a, _) = s.hyperplane_data().unwrap();
        let phi = VectorField::new(
            "normal",
            a.iter().map(|&ai| ScalarField::constant(ai)).collect(),
        );
        let rep = check_vector_gauss_green(
            &m,
            &w,
            &s,
            &phi,
            Engine::GaussHermite { nodes_per_dim: 14 },
            0,
            1e-8,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");

        // Random polynomial field on the sphere, Monte Carlo.
        let m3 = GaussianModel::with_family(SpectrumFamily::Geometric4, 3).unwrap();
        let w3 = Weight::gaussian_type(0.05, &m3);
        let s3 = LevelSetSurface::sphere(&m3, 1.0).unwrap();
        let poly = VectorField::new(
            "poly",
            vec![
                ScalarField::monomials("p0", vec![(0.6, vec![1, 0, 0]), (0.2, vec![0, 0, 2])])
                    .unwrap(),
                ScalarField::monomials("p1", vec![(1.0, vec![0, 1, 0])]).unwrap(),
                ScalarField::constant(0.4),
            ],
        );
        let rep = check_vector_gauss_green(
            &m3,
            &w3,
            &s3,
            &poly,
            Engine::MonteCarlo { budget: 600_000 },
            13,
            1e-9,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn q_identities_exact_on_hyperplanes() {
        let m = model4();
        let w = Weight::gaussian_type(0.05, &m);
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0, 0.0], 0.3).unwrap();
        // phi = y_2 (tangential), q = 2: quadrature-exact on both sides.
        let phi = ScalarField::coordinate(1);
        let (first, second) = check_trace_q_identities(
            &m,
            &w,
            &s,
            &phi,
            2.0,
            Engine::GaussHermite { nodes_per_dim: 16 },
            0,
            1e-6,
        )
        .unwrap();
        assert!(first.pass, "{first:?}");
        assert!(second.pass, "{second:?}");
        assert!(first.delta < 1e-6);
        assert!(second.delta < 1e-6);

        // q = 1 with the sign convention.
        let (first, second) = check_trace_q_identities(
            &m,
            &w,
            &s,
            &phi,
            1.0,
            Engine::GaussHermite { nodes_per_dim: 16 },
            0,
            1e-6,
        )
        .unwrap();
        assert!(first.pass, "{first:?}");
        assert!(second.pass, "{second:?}");
    }

    #[test]
    fn q_identity_normalized_reduces_to_surface_mass_for_unit_phi() {
        // phi = 1: second identity reads
        // int_{G<0} div_nu(grad G/|grad G|) dnu = int w drho; on a
        // hyperplane the unit normal field is constant so div_nu is
        // explicit: div_nu a = <a, grad log w> - <a, y>.
        let m = model4();
        let w = Weight::gaussian_type(0.07, &m);
        let s = LevelSetSurface::hyperplane(&m, vec![0.0, 1.0, 0.0, 0.0], -0.2).unwrap();
        let (first, second) = check_trace_q_identities(
            &m,
            &w,
            &s,
            &ScalarField::constant(1.0),
            3.0,
            Engine::GaussHermite { nodes_per_dim: 16 },
            0,
            1e-8,
        )
        .unwrap();
        // |grad G| = 1 makes the two identities coincide.
        assert!(first.pass && second.pass, "{first:?} {second:?}");
        assert!((first.lhs - second.lhs).abs() < 1e-12);
        assert!((first.rhs - second.rhs).abs() < 1e-12);
    }

    #[test]
    fn q_identities_on_sphere_by_monte_carlo() {
        let m = GaussianModel::with_family(SpectrumFamily::Geometric4, 3).unwrap();
        let w = Weight::gaussian_type(0.05, &m);
        let s = LevelSetSurface::sphere(&m, 1.0).unwrap();
        let phi = ScalarField::gaussian_bump(vec![0.3, -0.2, 0.0], 1.4);
        let (first, second) = check_trace_q_identities(
            &m,
            &w,
            &s,
            &phi,
            2.0,
            Engine::MonteCarlo { budget: 600_000 },
            17,
            1e-9,
        )
        .unwrap();
        assert!(first.pass, "{first:?}");
        assert!(second.pass, "{second:?}");
    }

    #[test]
    fn unit_weight_reduction_matches_gaussian_reference_path() {
        let m = model4();
        let unit = Weight::unit(&m);
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 1.0, 0.0, 0.0], 0.4).unwrap();
        let phi = ScalarField::gaussian_bump(vec![0.1, 0.2, -0.3, 0.0], 1.2);
        for engine in [
            Engine::MonteCarlo { budget: 200_000 },
            Engine::GaussHermite { nodes_per_dim: 12 },
        ] {
            for k in [0usize, 2] {
                let weighted =
                    check_gauss_green(&m, &unit, &s, &phi, k, engine, 3, 1e-9).unwrap();
                let reference =
                    gaussian_gauss_green_reference(&m, &s, &phi, k, engine, 3, 1e-9).unwrap();
                assert!(
                    (weighted.lhs - reference.lhs).abs() < 1e-12,
                    "k={k}: {} vs {}",
                    weighted.lhs,
                    reference.lhs
                );
                assert!(
                    (weighted.rhs - reference.rhs).abs() < 1e-12,
                    "k={k}: {} vs {}",
                    weighted.rhs,
                    reference.rhs
                );
            }
        }
    }

    #[test]
    fn empty_sublevel_set_is_an_error() {
        let m = model4();
        let unit = Weight::unit(&m);
        // G = |y|^2 + 5 is everywhere positive: {G < 0} is empty.
        let g = ScalarField::from_fn("positive", |p: &Point| {
            p.coords().iter().map(|y| y * y).sum::<f64>() + 5.0
        });
        let s = LevelSetSurface::custom("empty", g, 0.1).unwrap();
        let err = check_gauss_green(
            &m,
            &unit,
            &s,
            &ScalarField::constant(1.0),
            0,
            Engine::MonteCarlo { budget: 50_000 },
            1,
            1e-9,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::EmptySublevelSet { .. }), "{err:?}");
    }

    #[test]
    fn q_below_one_and_bad_direction_are_rejected() {
        let m = model4();
        let w = Weight::unit(&m);
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0, 0.0], 0.0).unwrap();
        let one = ScalarField::constant(1.0);
        let err = check_trace_q_identities(
            &m,
            &w,
            &s,
            &one,
            0.5,
            Engine::MonteCarlo { budget: 1000 },
            0,
            1e-9,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::InvalidParameter { .. }));
        let err = check_gauss_green(
            &m,
            &w,
            &s,
            &one,
            9,
            Engine::MonteCarlo { budget: 1000 },
            0,
            1e-9,
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::IndexOutOfRange { .. }));
    }
}
