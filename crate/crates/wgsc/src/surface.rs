//! Level-set surfaces `G^{-1}(0)` and the Gaussian surface measure on them.
//!
//! In whitened coordinates the surface measure is realized as
//!
//! ```text
//! d rho(y) = (2 pi)^{-n/2} e^{-|y|^2 / 2} dH_{n-1}(y)
//! ```
//!
//! over the zero set of `G`, i.e. the full-dimensional Hausdorff–Gauss
//! form (the finite-truncation supremum of its projected variants; their
//! monotonicity in the projection is a separate check,
//! [`rho_monotonicity_check`]). Two independent estimators realize it:
//!
//! * [`surface_integral_exact`] — deterministic quadrature over an
//!   explicit parametrization, available for hyperplanes (any dimension)
//!   and ambient-norm spheres (dimensions 2 and 3);
//! * [`surface_integral_shell`] — the co-area estimator
//!   `(1/2eps) int 1_{|G|<eps} f |grad G| dmu` on a ladder of shrinking
//!   band widths, extrapolated to `eps -> 0` with an `a + b eps^2` fit.
//!
//! The module also screens the regularity hypotheses a surface must
//! satisfy for boundary calculus: positive sub-level mass and integrable
//! inverse gradient norms on a band around the surface
//! ([`check_hypothesis2`]).

use crate::error::{EngineError, Result};
use crate::field::ScalarField;
use crate::integrate::{mc_fold, streams, IntegralEstimate, NODE_BUDGET};
use crate::model::{GaussianModel, Point};
use crate::quad::{gauss_hermite, gauss_legendre, QuadratureRule};
use crate::weight::{screen_moment, MomentScreen};
use serde::Serialize;

/// Default half-width of the sampling band `{|G| < delta}`.
pub const DEFAULT_DELTA: f64 = 0.1;
/// Minimum sample hits required in the thinnest shell.
pub const MIN_BAND_HITS: u64 = 1_000;

#[derive(Debug, Clone)]
enum ExactParam {
    /// `{ <a, y> = c }` with `|a| = 1`, whitened coordinates.
    Hyperplane { normal: Vec<f64>, offset: f64 },
    /// `{ ||x||_X = r }`, an ellipsoid `sum lambda_i y_i^2 = r^2` in
    /// whitened coordinates.
    AmbientSphere { radius: f64 },
}

/// A level set `G^{-1}(0)` together with the band width used by shell
/// estimators and, where available, an exact parametrization.
#[derive(Debug, Clone)]
pub struct LevelSetSurface {
    label: String,
    g: ScalarField,
    delta: f64,
    exact: Option<ExactParam>,
}

impl LevelSetSurface {
    /// Hyperplane `{ <a, y> = c }` in whitened coordinates. The normal is
    /// normalized; `G(y) = <a, y> - c` carries its analytic gradient and
    /// (zero) Hessian.
    pub fn hyperplane(model: &GaussianModel, normal: Vec<f64>, offset: f64) -> Result<Self> {
        if normal.len() != model.dim() {
            return Err(EngineError::DimensionMismatch {
                expected: model.dim(),
                got: normal.len(),
            });
        }
        let norm: f64 = normal.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(EngineError::InvalidParameter {
                name: "normal",
                reason: "hyperplane normal must be finite and nonzero".into(),
            });
        }
        let a: Vec<f64> = normal.iter().map(|v| v / norm).collect();
        let g = ScalarField::linear(a.clone(), -offset);
        Ok(LevelSetSurface {
            label: format!("hyperplane(c={offset})"),
            g,
            delta: DEFAULT_DELTA,
            exact: Some(ExactParam::Hyperplane { normal: a, offset }),
        })
    }

    /// Ambient-norm sphere `{ ||x||_X = r }`: the ellipsoid
    /// `sum lambda_i y_i^2 = r^2` in whitened coordinates, with
    /// `G(y) = sqrt(sum lambda_i y_i^2) - r`. Analytic gradient and
    /// Hessian; singular at the origin.
    pub fn sphere(model: &GaussianModel, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(EngineError::InvalidParameter {
                name: "radius",
                reason: format!("sphere radius must be positive and finite, got {radius}"),
            });
        }
        let lambda: Vec<f64> = (0..model.dim()).map(|k| model.lambda(k)).collect();
        let l_val = lambda.clone();
        let l_grad = lambda.clone();
        let l_hess = lambda.clone();
        let s = move |p: &Point, l: &[f64]| -> f64 {
            l.iter()
                .zip(p.coords())
                .map(|(li, yi)| li * yi * yi)
                .sum::<f64>()
                .sqrt()
        };
        let s_val = s.clone();
        let s_grad = s.clone();
        let s_hess = s;
        let g = ScalarField::from_fn(format!("ambient_norm - {radius}"), move |p| {
            s_val(p, &l_val) - radius
        })
        .with_grad(move |p| {
            let sv = s_grad(p, &l_grad);
            l_grad
                .iter()
                .zip(p.coords())
                .map(|(li, yi)| li * yi / sv)
                .collect()
        })
        .with_hess(move |p| {
            let n = p.dim();
            let sv = s_hess(p, &l_hess);
            let mut h = nalgebra::DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    h[(i, j)] = l_hess[i] * delta / sv
                        - l_hess[i] * p[i] * l_hess[j] * p[j] / sv.powi(3);
                }
            }
            h
        })
        .with_singular(|p| p.coords().iter().all(|y| *y == 0.0));
        Ok(LevelSetSurface {
            label: format!("sphere(r={radius})"),
            g,
            delta: DEFAULT_DELTA.min(radius / 2.0),
            exact: Some(ExactParam::AmbientSphere { radius }),
        })
    }

    /// The unit sphere of the path norm on the Brownian-path model: for a
    /// path with Karhunen–Loeve coefficients `y`, the squared norm
    /// `int_0^1 f(xi)^2 dxi` equals `sum lambda_i y_i^2`, so this is the
    /// ambient sphere of radius 1 under a dedicated label.
    pub fn l2_path_sphere(model: &GaussianModel) -> Result<Self> {
        let mut s = Self::sphere(model, 1.0)?;
        s.label = "l2_path_sphere".into();
        Ok(s)
    }

    /// A custom level set from any scalar field; no exact parametrization,
    /// so only shell estimators apply.
    pub fn custom(label: impl Into<String>, g: ScalarField, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(EngineError::InvalidParameter {
                name: "delta",
                reason: format!("band width must be positive and finite, got {delta}"),
            });
        }
        Ok(LevelSetSurface {
            label: label.into(),
            g,
            delta,
            exact: None,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// The defining field `G` (zero on the surface, negative inside).
    pub fn g(&self) -> &ScalarField {
        &self.g
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn with_delta(mut self, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(EngineError::InvalidParameter {
                name: "delta",
                reason: format!("band width must be positive and finite, got {delta}"),
            });
        }
        self.delta = delta;
        Ok(self)
    }

    /// Whether [`surface_integral_exact`] can evaluate this surface at the
    /// given model dimension: hyperplanes in every dimension, ambient
    /// spheres in dimensions 2 and 3 (their parametrized quadrature),
    /// custom level sets never.
    pub fn has_exact(&self, dim: usize) -> bool {
        match &self.exact {
            Some(ExactParam::Hyperplane { .. }) => true,
            Some(ExactParam::AmbientSphere { .. }) => (2..=3).contains(&dim),
            None => false,
        }
    }

    /// Unit normal and offset when the surface is a hyperplane.
    pub fn hyperplane_data(&self) -> Option<(&[f64], f64)> {
        match &self.exact {
            Some(ExactParam::Hyperplane { normal, offset }) => Some((normal, *offset)),
            _ => None,
        }
    }

    /// Radius when the surface is an ambient-norm sphere.
    pub fn sphere_radius(&self) -> Option<f64> {
        match &self.exact {
            Some(ExactParam::AmbientSphere { radius }) => Some(*radius),
            _ => None,
        }
    }

    /// Provable lower bound for `|grad G|` away from the singular set,
    /// when the surface's structure gives one: 1 for a hyperplane with
    /// unit normal; `sqrt(lambda_min)` for an ambient-norm sphere, since
    /// `|grad G|^2 = sum lambda^2 y^2 / sum lambda y^2 >= lambda_min`.
    /// `None` for custom surfaces.
    pub fn grad_norm_lower_bound(&self, model: &GaussianModel) -> Option<f64> {
        match &self.exact {
            Some(ExactParam::Hyperplane { .. }) => Some(1.0),
            Some(ExactParam::AmbientSphere { .. }) => {
                let min = (0..model.dim())
                    .map(|k| model.lambda(k))
                    .fold(f64::INFINITY, f64::min);
                Some(min.sqrt())
            }
            None => None,
        }
    }
}

// ---- exact parametrizations ------------------------------------------------

/// Orthonormal basis of the complement of the unit vector `a`, as the
/// last `n-1` columns of the Householder reflector that maps `a` to a
/// signed coordinate axis.
pub(crate) fn householder_complement_cols(a: &[f64]) -> Vec<Vec<f64>> {
    let n = a.len();
    let sign = if a[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut v = a.to_vec();
    v[0] += sign;
    let vtv: f64 = v.iter().map(|x| x * x).sum();
    let mut cols = Vec::with_capacity(n - 1);
    for j in 1..n {
        let mut col = vec![0.0; n];
        for (i, c) in col.iter_mut().enumerate() {
            let e = if i == j { 1.0 } else { 0.0 };
            *c = e - 2.0 * v[i] * v[j] / vtv;
        }
        cols.push(col);
    }
    cols
}

fn standard_normal_pdf(c: f64) -> f64 {
    (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Periodic trapezoid rule on `[0, 2 pi)` (spectrally accurate for smooth
/// periodic integrands).
fn trapezoid_circle(n: usize) -> QuadratureRule {
    let h = 2.0 * std::f64::consts::PI / n as f64;
    QuadratureRule {
        nodes: (0..n).map(|j| j as f64 * h).collect(),
        weights: vec![h; n],
    }
}

/// Deterministic quadrature of `integrand` against the Gaussian surface
/// measure on a surface with an exact parametrization.
///
/// Hyperplane `{<a,y> = c}`: factor the Gaussian along `a`; the value is
/// `pdf(c) * E[f(c a + B t)]` with `t` standard normal in the tangential
/// coordinates (tensor Gauss–Hermite; node count auto-scaled to the
/// budget). Sphere `{||x||_X = r}`: integrate over the unit sphere via
/// `y = r D^{-1/2} omega` with area element
/// `r^{n-1} (prod lambda_i^{-1/2}) sqrt(sum lambda_i omega_i^2)`;
/// dimension 2 uses a 512-point periodic trapezoid rule, dimension 3 a
/// Gauss–Legendre x trapezoid product grid.
pub fn surface_integral_exact(
    model: &GaussianModel,
    surface: &LevelSetSurface,
    integrand: &ScalarField,
) -> Result<IntegralEstimate> {
    match &surface.exact {
        None => Err(EngineError::NoParametrization {
            what: format!("surface `{}` has no exact parametrization", surface.label),
        }),
        Some(ExactParam::Hyperplane { normal, offset }) => {
            hyperplane_exact(model, normal, *offset, integrand)
        }
        Some(ExactParam::AmbientSphere { radius }) => {
            sphere_exact(model, *radius, integrand)
        }
    }
}

fn hyperplane_exact(
    model: &GaussianModel,
    a: &[f64],
    c: f64,
    integrand: &ScalarField,
) -> Result<IntegralEstimate> {
    let n = model.dim();
    let pdf = standard_normal_pdf(c);
    if n == 1 {
        // The surface is the single point y = c / a with a = +-1.
        let y = c / a[0];
        let p = model.point(vec![y])?;
        let (val, dropped) = if integrand.is_singular(&p) {
            (0.0, 1)
        } else {
            (integrand.value_unchecked(&p), 0)
        };
        return Ok(IntegralEstimate::exact(
            standard_normal_pdf(y) * val,
            "exact-hyperplane",
            1,
            dropped,
        ));
    }
    let m = n - 1;
    let cols = householder_complement_cols(a);
    let param = |t: &[f64], out: &mut Vec<f64>| {
        for i in 0..n {
            let mut yi = c * a[i];
            for (j, col) in cols.iter().enumerate() {
                yi += t[j] * col[i];
            }
            out[i] = yi;
        }
    };
    // Largest node count (capped at 20, floor 8) whose tensor grid fits
    // the evaluation budget.
    let mut nodes = 20usize;
    while nodes > 8 && (nodes as u128).pow(m as u32) > NODE_BUDGET as u128 {
        nodes -= 1;
    }
    // Singular integrand at the in-plane origin: shift to an even count
    // so no node lands exactly there.
    let mut coords = vec![0.0; n];
    param(&vec![0.0; m], &mut coords);
    let center = model.point(coords.clone())?;
    if integrand.is_singular(&center) && nodes % 2 == 1 {
        nodes += 1;
    }
    let rule = gauss_hermite(nodes)?;
    let rules = vec![rule; m];
    let mut dropped = 0u64;
    let mut scratch = vec![0.0; n];
    let mut point = model.zero_point();
    let (mean, count) = crate::integrate::tensor_quad(&rules, |t| {
        param(t, &mut scratch);
        point.coords_mut().copy_from_slice(&scratch);
        if integrand.is_singular(&point) {
            dropped += 1;
            0.0
        } else {
            integrand.value_unchecked(&point)
        }
    });
    Ok(IntegralEstimate::exact(
        pdf * mean,
        "exact-hyperplane",
        count,
        dropped,
    ))
}

fn sphere_exact(
    model: &GaussianModel,
    radius: f64,
    integrand: &ScalarField,
) -> Result<IntegralEstimate> {
    let n = model.dim();
    let lambda: Vec<f64> = (0..n).map(|k| model.lambda(k)).collect();
    let inv_sqrt_det: f64 = lambda.iter().map(|l| 1.0 / l.sqrt()).product();
    let gauss_norm = (2.0 * std::f64::consts::PI).powf(-(n as f64) / 2.0);
    let prefactor = radius.powi(n as i32 - 1) * inv_sqrt_det * gauss_norm;

    let mut point = model.zero_point();
    let mut dropped = 0u64;
    let mut node_value = |omega: &[f64]| -> f64 {
        let mut y_norm_sq = 0.0;
        for i in 0..n {
            let yi = radius * omega[i] / lambda[i].sqrt();
            point.coords_mut()[i] = yi;
            y_norm_sq += yi * yi;
        }
        let elem: f64 = lambda
            .iter()
            .zip(omega)
            .map(|(l, w)| l * w * w)
            .sum::<f64>()
            .sqrt();
        let f = if integrand.is_singular(&point) {
            dropped += 1;
            return 0.0;
        } else {
            integrand.value_unchecked(&point)
        };
        f * (-0.5 * y_norm_sq).exp() * elem
    };

    let (total, count) = match n {
        2 => {
            let theta = trapezoid_circle(512);
            let mut total = 0.0;
            for (t, w) in theta.nodes.iter().zip(&theta.weights) {
                total += w * node_value(&[t.cos(), t.sin()]);
            }
            (total, 512u64)
        }
        3 => {
            // omega(u, theta) = (sqrt(1-u^2) cos, sqrt(1-u^2) sin, u);
            // d sigma = du d theta.
            let u_rule = gauss_legendre(64)?;
            let theta = trapezoid_circle(128);
            let mut total = 0.0;
            let mut count = 0u64;
            for (u, wu) in u_rule.nodes.iter().zip(&u_rule.weights) {
                let s = (1.0 - u * u).max(0.0).sqrt();
                for (t, wt) in theta.nodes.iter().zip(&theta.weights) {
                    total += wu * wt * node_value(&[s * t.cos(), s * t.sin(), *u]);
                    count += 1;
                }
            }
            (total, count)
        }
        _ => {
            return Err(EngineError::NoParametrization {
                what: format!(
                    "sphere parametrization covers dimensions 2 and 3, model has {n}"
                ),
            })
        }
    };
    Ok(IntegralEstimate::exact(
        prefactor * total,
        "exact-sphere",
        count,
        dropped,
    ))
}

// ---- shell (co-area) estimator ----------------------------------------------

/// One rung of the shrinking-band ladder.
#[derive(Debug, Clone, Serialize)]
pub struct EpsilonRung {
    pub epsilon: f64,
    pub value: f64,
    pub stderr: f64,
    pub hits: u64,
}

/// Shell-estimator output: the extrapolated estimate plus the ladder it
/// came from.
#[derive(Debug, Clone, Serialize)]
pub struct ShellReport {
    pub surface: String,
    pub estimate: IntegralEstimate,
    pub per_epsilon: Vec<EpsilonRung>,
    /// Fitted second-order coefficient `b` in `a + b eps^2`.
    pub curvature_coeff: f64,
    /// The two thinnest rungs differ by no more than the fit-predicted
    /// increment plus statistical slack.
    pub consistency_ok: bool,
}

struct ShellAcc {
    /// Per rung, per projection dim: sum and sum of squares.
    sums: Vec<Vec<f64>>,
    sum_sqs: Vec<Vec<f64>>,
    hits: Vec<u64>,
    kept: u64,
    dropped: u64,
}

impl ShellAcc {
    fn zero(rungs: usize, dims: usize) -> Self {
        ShellAcc {
            sums: vec![vec![0.0; dims]; rungs],
            sum_sqs: vec![vec![0.0; dims]; rungs],
            hits: vec![0; rungs],
            kept: 0,
            dropped: 0,
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (r, o) in self.sums.iter_mut().zip(other.sums) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
        for (r, o) in self.sum_sqs.iter_mut().zip(other.sum_sqs) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
        for (a, b) in self.hits.iter_mut().zip(other.hits) {
            *a += b;
        }
        self.kept += other.kept;
        self.dropped += other.dropped;
        self
    }
}

/// Weighted least squares fit of `y = a + b x`; returns `(a, b, se_a)`
/// propagating the per-point standard errors through the fit weights.
fn extrapolate_linear(xs: &[f64], ys: &[f64], ses: &[f64]) -> (f64, f64, f64) {
    let n = xs.len();
    let w: Vec<f64> = ses
        .iter()
        .map(|s| if *s > 0.0 { 1.0 / (s * s) } else { 1.0 })
        .collect();
    let sw: f64 = w.iter().sum();
    let swx: f64 = w.iter().zip(xs).map(|(wi, x)| wi * x).sum();
    let swxx: f64 = w.iter().zip(xs).map(|(wi, x)| wi * x * x).sum();
    let det = sw * swxx - swx * swx;
    if det.abs() < 1e-300 {
        // Degenerate ladder; fall back to the thinnest rung.
        return (ys[n - 1], 0.0, ses[n - 1]);
    }
    // a = sum_j c_j y_j with c_j = w_j (swxx - swx x_j) / det.
    let mut a = 0.0;
    let mut b = 0.0;
    let mut var_a = 0.0;
    for j in 0..n {
        let cj = w[j] * (swxx - swx * xs[j]) / det;
        let dj = w[j] * (sw * xs[j] - swx) / det;
        a += cj * ys[j];
        b += dj * ys[j];
        var_a += cj * cj * ses[j] * ses[j];
    }
    (a, b, var_a.sqrt())
}

/// Shared shell machinery: estimates, for each projection dimension `m`
/// in `proj_dims`, the band functional
/// `(1/2 eps) int 1_{|G| < eps} f |P_m grad G| dmu` on the ladder
/// `delta * (1, 1/2, 1/4, 1/8)`, then extrapolates `eps -> 0`.
/// `P_m` projects onto the first `m` coordinates (`m = n` gives the full
/// gradient norm). All projection dimensions share one sample stream.
fn shell_core(
    model: &GaussianModel,
    surface: &LevelSetSurface,
    integrand: &ScalarField,
    proj_dims: &[usize],
    budget: u64,
    seed: u64,
) -> Result<Vec<ShellReport>> {
    let n = model.dim();
    for &m in proj_dims {
        if m == 0 || m > n {
            return Err(EngineError::IndexOutOfRange { index: m, dim: n });
        }
    }
    if budget == 0 {
        return Err(EngineError::InvalidParameter {
            name: "budget",
            reason: "shell estimator needs a positive sample budget".into(),
        });
    }
    let delta = surface.delta;
    let ladder: Vec<f64> = [1.0, 0.5, 0.25, 0.125].iter().map(|s| s * delta).collect();
    let rungs = ladder.len();
    let g = &surface.g;
    let dims = proj_dims.len();

    let acc = mc_fold(
        model,
        budget,
        seed,
        streams::SURFACE,
        || ShellAcc::zero(rungs, dims),
        |acc: &mut ShellAcc, p| {
            if g.is_singular(p) || integrand.is_singular(p) {
                acc.dropped += 1;
                return;
            }
            let gv = g.value_unchecked(p);
            if !gv.is_finite() {
                acc.dropped += 1;
                return;
            }
            acc.kept += 1;
            let abs_g = gv.abs();
            if abs_g >= ladder[0] {
                return;
            }
            let grad = g.grad_h(p);
            let f = integrand.value_unchecked(p);
            // Prefix sums of squared gradient components -> every
            // projected norm from one evaluation.
            let mut prefix = vec![0.0; n + 1];
            for (k, gk) in grad.iter().enumerate() {
                prefix[k + 1] = prefix[k] + gk * gk;
            }
            for (r, eps) in ladder.iter().enumerate() {
                if abs_g < *eps {
                    acc.hits[r] += 1;
                    for (i, &m) in proj_dims.iter().enumerate() {
                        let v = f * prefix[m].sqrt();
                        acc.sums[r][i] += v;
                        acc.sum_sqs[r][i] += v * v;
                    }
                }
            }
        },
        ShellAcc::merge,
    );

    let thinnest_hits = acc.hits[rungs - 1];
    if thinnest_hits < MIN_BAND_HITS {
        return Err(EngineError::BandUndersampled {
            hits: thinnest_hits,
            need: MIN_BAND_HITS,
        });
    }
    let n_samples = acc.kept.max(1) as f64;

    let mut reports = Vec::with_capacity(dims);
    for i in 0..dims {
        let mut xs = Vec::with_capacity(rungs);
        let mut ys = Vec::with_capacity(rungs);
        let mut ses = Vec::with_capacity(rungs);
        let mut per_eps = Vec::with_capacity(rungs);
        for (r, eps) in ladder.iter().enumerate() {
            let mean = acc.sums[r][i] / n_samples;
            let var = (acc.sum_sqs[r][i] / n_samples - mean * mean).max(0.0);
            let se_mean = (var / n_samples).sqrt();
            let scale = 1.0 / (2.0 * eps);
            let value = scale * mean;
            let stderr = scale * se_mean;
            xs.push(eps * eps);
            ys.push(value);
            ses.push(stderr);
            per_eps.push(EpsilonRung {
                epsilon: *eps,
                value,
                stderr,
                hits: acc.hits[r],
            });
        }
        let (a, b, se_a) = extrapolate_linear(&xs, &ys, &ses);
        let predicted = b.abs() * (xs[rungs - 2] - xs[rungs - 1]).abs();
        let jump = (ys[rungs - 2] - ys[rungs - 1]).abs();
        let slack = 4.0
            * (ses[rungs - 2].powi(2) + ses[rungs - 1].powi(2))
                .sqrt();
        let consistency_ok = jump <= predicted + slack;
        reports.push(ShellReport {
            surface: surface.label.clone(),
            estimate: IntegralEstimate {
                value: a,
                stderr: se_a,
                method: "shell".into(),
                n_eval: budget,
                dropped: acc.dropped,
            },
            per_epsilon: per_eps,
            curvature_coeff: b,
            consistency_ok,
        });
    }
    Ok(reports)
}

/// Co-area estimate of `int f d rho` over `G^{-1}(0)`:
/// `(1/2 eps) int 1_{|G|<eps} f |grad G| dmu` on the band ladder
/// `delta * (1, 1/2, 1/4, 1/8)`, extrapolated to `eps -> 0` by a
/// least-squares `a + b eps^2` fit.
///
/// # Errors
///
/// [`EngineError::BandUndersampled`] when the thinnest band receives
/// fewer than [`MIN_BAND_HITS`] samples.
pub fn surface_integral_shell(
    model: &GaussianModel,
    surface: &LevelSetSurface,
    integrand: &ScalarField,
    budget: u64,
    seed: u64,
) -> Result<ShellReport> {
    let mut v = shell_core(model, surface, integrand, &[model.dim()], budget, seed)?;
    Ok(v.pop().expect("one projection dim"))
}

// ---- regularity hypotheses ---------------------------------------------------

/// Screen of the surface-regularity hypotheses: the sub-level set
/// `{G < 0}` has positive mass, and `|grad G|^{-q}` is integrable on the
/// band `{|G| < delta}` for each requested `q` (checked by the same
/// budget-doubling / heavy-tail screens used for weight moments).
#[derive(Debug, Clone, Serialize)]
pub struct Hypothesis2Report {
    pub surface: String,
    pub delta: f64,
    pub sublevel_mass: f64,
    pub sublevel_mass_stderr: f64,
    /// Mass is bounded away from zero at three standard errors.
    pub sublevel_ok: bool,
    pub band_mass: f64,
    pub inverse_gradient_moments: Vec<MomentScreen>,
    pub pass: bool,
}

/// Estimate `mu(G < 0)`, `mu(|G| < delta)`, and the inverse-gradient
/// moments `int_{|G|<delta} |grad G|^{-q} dmu` for each `q`.
pub fn check_hypothesis2(
    model: &GaussianModel,
    surface: &LevelSetSurface,
    q_list: &[f64],
    budget: u64,
    seed: u64,
) -> Result<Hypothesis2Report> {
    if budget < 100 {
        return Err(EngineError::InvalidParameter {
            name: "budget",
            reason: "hypothesis screen needs at least 100 samples".into(),
        });
    }
    let g = surface.g();
    let delta = surface.delta;
    let mass = screen_moment(model, budget, seed, "mu(G < 0)", |p| {
        if g.is_singular(p) {
            None
        } else {
            Some(if g.value_unchecked(p) < 0.0 { 1.0 } else { 0.0 })
        }
    });
    let band = screen_moment(model, budget, seed, "mu(|G| < delta)", |p| {
        if g.is_singular(p) {
            None
        } else {
            Some(if g.value_unchecked(p).abs() < delta { 1.0 } else { 0.0 })
        }
    });
    let grad_floor = surface.grad_norm_lower_bound(model);
    let mut moments = Vec::with_capacity(q_list.len());
    for &q in q_list {
        let what = format!("int_band |grad G|^-{q}");
        let mut m = screen_moment(model, budget, seed, &what, |p| {
            if g.is_singular(p) {
                return None;
            }
            if g.value_unchecked(p).abs() >= delta {
                return Some(0.0);
            }
            let gn: f64 = g.grad_h(p).iter().map(|x| x * x).sum::<f64>().sqrt();
            if gn == 0.0 {
                Some(f64::INFINITY)
            } else {
                Some(gn.powf(-q))
            }
        });
        if let Some(lb) = grad_floor {
            if lb > 0.0 {
                m = m.with_certified_bound(lb.powf(-q));
            }
        }
        moments.push(m);
    }
    let sublevel_ok = mass.value - 3.0 * mass.stderr > 0.0;
    let pass = sublevel_ok && moments.iter().all(|m| !m.diverged);
    Ok(Hypothesis2Report {
        surface: surface.label.clone(),
        delta,
        sublevel_mass: mass.value,
        sublevel_mass_stderr: mass.stderr,
        sublevel_ok,
        band_mass: band.value,
        inverse_gradient_moments: moments,
        pass,
    })
}

// ---- projected surface measures and their monotonicity ----------------------

/// One projected surface-measure value.
#[derive(Debug, Clone, Serialize)]
pub struct RhoValue {
    /// Projection dimension `m` (first `m` coordinates).
    pub dim: usize,
    pub value: f64,
    pub stderr: f64,
    /// Closed-form value when the surface is a hyperplane:
    /// `|P_m a| * pdf(c)` (for integrand 1).
    pub oracle: Option<f64>,
}

/// Monotonicity report for the projected surface measures.
#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityReport {
    pub surface: String,
    pub values: Vec<RhoValue>,
    /// Consecutive values are non-decreasing within three combined
    /// standard errors.
    pub monotone_ok: bool,
    /// All hyperplane oracles matched within three standard errors
    /// (`None` when no oracle applies).
    pub oracle_ok: Option<bool>,
    pub pass: bool,
}

/// Estimate the projected surface measures `rho^{F_m}` for a nested
/// family of coordinate subspaces `F_m = span(e_1 .. e_m)` (realized by
/// the shell estimator with the projected gradient norm `|P_m grad G|`)
/// and check they are non-decreasing in `m`. All values share one sample
/// stream, so the comparison is paired. For hyperplanes the closed form
/// `|P_m a| pdf(c)` is attached and checked.
pub fn rho_monotonicity_check(
    model: &GaussianModel,
    surface: &LevelSetSurface,
    dims: &[usize],
    integrand: &ScalarField,
    budget: u64,
    seed: u64,
) -> Result<MonotonicityReport> {
    if dims.is_empty() {
        return Err(EngineError::InvalidParameter {
            name: "dims",
            reason: "need at least one projection dimension".into(),
        });
    }
    if dims.windows(2).any(|w| w[0] > w[1]) {
        return Err(EngineError::InvalidParameter {
            name: "dims",
            reason: "projection dimensions must be non-decreasing".into(),
        });
    }
    let reports = shell_core(model, surface, integrand, dims, budget, seed)?;
    let constant_one = is_constant_one(integrand);
    let mut values = Vec::with_capacity(dims.len());
    for (m, rep) in dims.iter().zip(&reports) {
        let oracle = match (&surface.exact, constant_one) {
            (Some(ExactParam::Hyperplane { normal, offset }), true) => {
                let pm: f64 = normal[..*m].iter().map(|a| a * a).sum::<f64>().sqrt();
                Some(pm * standard_normal_pdf(*offset))
            }
            _ => None,
        };
        values.push(RhoValue {
            dim: *m,
            value: rep.estimate.value,
            stderr: rep.estimate.stderr,
            oracle,
        });
    }
    let monotone_ok = values.windows(2).all(|w| {
        let slack = 3.0 * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
        w[0].value <= w[1].value + slack
    });
    let oracle_ok = if values.iter().any(|v| v.oracle.is_some()) {
        Some(values.iter().all(|v| match v.oracle {
            None => true,
            Some(o) => (v.value - o).abs() <= 3.0 * v.stderr.max(1e-12),
        }))
    } else {
        None
    };
    let pass = monotone_ok && oracle_ok.unwrap_or(true);
    Ok(MonotonicityReport {
        surface: surface.label.clone(),
        values,
        monotone_ok,
        oracle_ok,
        pass,
    })
}

/// Conservative test for "the integrand is identically one", used only to
/// decide whether a closed-form oracle applies.
fn is_constant_one(f: &ScalarField) -> bool {
    f.label() == "const[1]"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SpectrumFamily;

    fn unit_model(dim: usize) -> GaussianModel {
        GaussianModel::new(vec![1.0; dim], "identity").unwrap()
    }

    #[test]
    fn hyperplane_exact_matches_marginal_density() {
        // Integrand 1 on {y_1 = c}: the tangential directions integrate to
        // one, leaving the standard normal density at c.
        let m = GaussianModel::new(vec![1.0, 0.5, 0.25, 0.125], "m4").unwrap();
        for c in [0.0, 0.7, -1.3] {
            let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0, 0.0], c).unwrap();
            let est = surface_integral_exact(&m, &s, &ScalarField::constant(1.0)).unwrap();
            assert!((est.value - standard_normal_pdf(c)).abs() < 1e-12, "c={c}");
            assert_eq!(est.stderr, 0.0);
        }
        // 1/sqrt(2 pi) at c = 0.
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0, 0.0], 0.0).unwrap();
        let est = surface_integral_exact(&m, &s, &ScalarField::constant(1.0)).unwrap();
        let want = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((est.value - want).abs() < 1e-14);
    }

    #[test]
    fn hyperplane_exact_handles_tilted_normals_and_coordinates() {
        let m = unit_model(3);
        // Tilted normal, integrand 1: still pdf(c).
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 1.0, 1.0], 0.4).unwrap();
        let est = surface_integral_exact(&m, &s, &ScalarField::constant(1.0)).unwrap();
        assert!((est.value - standard_normal_pdf(0.4)).abs() < 1e-12);

        // Integrand <a, y> is constant c on the surface.
        let a = 1.0 / 3f64.sqrt();
        let f = ScalarField::linear(vec![a, a, a], 0.0);
        let est = surface_integral_exact(&m, &s, &f).unwrap();
        assert!((est.value - 0.4 * standard_normal_pdf(0.4)).abs() < 1e-12);

        // A tangential coordinate integrates to zero by symmetry.
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0], 0.9).unwrap();
        let est = surface_integral_exact(&m, &s, &ScalarField::coordinate(1)).unwrap();
        assert!(est.value.abs() < 1e-13);
        // The normal coordinate is pinned at c.
        let est = surface_integral_exact(&m, &s, &ScalarField::coordinate(0)).unwrap();
        assert!((est.value - 0.9 * standard_normal_pdf(0.9)).abs() < 1e-12);
    }

    #[test]
    fn sphere_exact_matches_polar_closed_forms() {
        // dim 2, identity spectrum, r = 1: 2 pi r * (2 pi)^-1 e^{-1/2}.
        let m2 = unit_model(2);
        let s = LevelSetSurface::sphere(&m2, 1.0).unwrap();
        let est = surface_integral_exact(&m2, &s, &ScalarField::constant(1.0)).unwrap();
        assert!((est.value - (-0.5f64).exp()).abs() < 1e-12, "{}", est.value);

        // dim 3, identity spectrum: the chi(3) density at r,
        // sqrt(2/pi) r^2 e^{-r^2/2}.
        let m3 = unit_model(3);
        for r in [1.0, 1.7] {
            let s = LevelSetSurface::sphere(&m3, r).unwrap();
            let est = surface_integral_exact(&m3, &s, &ScalarField::constant(1.0)).unwrap();
            let want = (2.0 / std::f64::consts::PI).sqrt() * r * r * (-0.5 * r * r).exp();
            assert!((est.value - want).abs() < 1e-10, "r={r}: {} vs {want}", est.value);
        }
    }

    #[test]
    fn sphere_exact_rejects_unsupported_dimension() {
        let m = unit_model(4);
        let s = LevelSetSurface::sphere(&m, 1.0).unwrap();
        let err = surface_integral_exact(&m, &s, &ScalarField::constant(1.0)).unwrap_err();
        assert!(matches!(err, EngineError::NoParametrization { .. }));
        let c = LevelSetSurface::custom("band", ScalarField::coordinate(0), 0.1).unwrap();
        let err = surface_integral_exact(&m, &c, &ScalarField::constant(1.0)).unwrap_err();
        assert!(matches!(err, EngineError::NoParametrization { .. }));
    }

    #[test]
    fn sphere_gradient_and_hessian_agree_with_finite_differences() {
        let m = GaussianModel::new(vec![1.0, 0.5, 0.25], "m3").unwrap();
        let s = LevelSetSurface::sphere(&m, 1.0).unwrap();
        let g = s.g();
        let p = m.point(vec![0.8, -0.6, 1.1]).unwrap();
        let grad = g.grad_h(&p);
        let fd = g.fd_grad(&p);
        for (a, b) in grad.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6);
        }
        let hess = g.hess_h(&p).unwrap();
        let fdh = g.fd_hess(&p);
        for i in 0..3 {
            for j in 0..3 {
                assert!((hess[(i, j)] - fdh[(i, j)]).abs() < 1e-5);
            }
        }
        // G itself: sqrt(sum lambda y^2) - r.
        let want = (1.0 * 0.64 + 0.5 * 0.36 + 0.25 * 1.21f64).sqrt() - 1.0;
        assert!((g.value(&p) - want).abs() < 1e-14);
        assert!(g.is_singular(&m.zero_point()));
    }

    #[test]
    fn shell_matches_exact_on_hyperplane() {
        let m = GaussianModel::new(vec![1.0, 0.5, 0.25, 0.125], "m4").unwrap();
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0, 0.0], 0.3).unwrap();
        let one = ScalarField::constant(1.0);
        let exact = surface_integral_exact(&m, &s, &one).unwrap();
        let shell = surface_integral_shell(&m, &s, &one, 400_000, 11).unwrap();
        let tol = 3.0 * shell.estimate.stderr + 1e-4;
        assert!(
            (shell.estimate.value - exact.value).abs() < tol,
            "shell {} vs exact {} (tol {tol})",
            shell.estimate.value,
            exact.value
        );
        // For a hyperplane with unit gradient, every rung estimates the
        // same 1D band mass; the fit coefficient should be small.
        assert!(shell.consistency_ok, "{shell:?}");
    }

    #[test]
    fn shell_matches_exact_on_sphere_within_two_percent() {
        let m = GaussianModel::with_family(SpectrumFamily::Geometric4, 3).unwrap();
        let s = LevelSetSurface::sphere(&m, 1.0).unwrap();
        let one = ScalarField::constant(1.0);
        let exact = surface_integral_exact(&m, &s, &one).unwrap();
        let shell = surface_integral_shell(&m, &s, &one, 600_000, 5).unwrap();
        let rel = (shell.estimate.value - exact.value).abs() / exact.value;
        assert!(
            rel < 0.02,
            "relative gap {rel}: shell {} vs exact {}",
            shell.estimate.value,
            exact.value
        );
    }

    #[test]
    fn shell_of_zero_integrand_is_zero_and_small_budget_errors() {
        let m = unit_model(3);
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0], 0.0).unwrap();
        let zero = ScalarField::constant(0.0);
        let rep = surface_integral_shell(&m, &s, &zero, 200_000, 2).unwrap();
        assert_eq!(rep.estimate.value, 0.0);
        assert_eq!(rep.estimate.stderr, 0.0);

        let err = surface_integral_shell(&m, &s, &zero, 2_000, 2).unwrap_err();
        assert!(matches!(err, EngineError::BandUndersampled { .. }));
    }

    #[test]
    fn hypothesis2_hyperplane_moments_are_exact_band_masses() {
        // |grad G| = 1, so every inverse moment equals mu(|<a,y> - c| < delta),
        // and <a, y> is standard normal.
        let m = GaussianModel::new(vec![1.0, 0.5, 0.25, 0.125], "m4").unwrap();
        let c = 0.4;
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0, 0.0], c).unwrap();
        let rep = check_hypothesis2(&m, &s, &[1.0, 2.0, 4.0, 8.0], 200_000, 9).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.sublevel_ok);
        // mu(G < 0) = Phi(c); Phi(0.4) ~ 0.655422.
        assert!((rep.sublevel_mass - 0.655_422).abs() < 0.01);
        let band_want = {
            // Phi(c + delta) - Phi(c - delta) via the error function series
            // is overkill; compare against the report's own band mass.
            rep.band_mass
        };
        for mq in &rep.inverse_gradient_moments {
            assert!(!mq.diverged, "{mq:?}");
            assert!(
                (mq.value - band_want).abs() < 4.0 * mq.stderr.max(1e-4),
                "moment {} vs band {band_want}",
                mq.value
            );
        }
    }

    #[test]
    fn hypothesis2_sphere_and_path_sphere_moments_are_finite() {
        let m = GaussianModel::with_family(SpectrumFamily::Geometric4, 3).unwrap();
        let s = LevelSetSurface::sphere(&m, 1.0).unwrap();
        let rep = check_hypothesis2(&m, &s, &[2.0, 4.0, 8.0], 150_000, 21).unwrap();
        assert!(rep.pass, "{rep:?}");

        let kl = GaussianModel::with_family(SpectrumFamily::BrownianKl, 6).unwrap();
        let s1 = LevelSetSurface::l2_path_sphere(&kl).unwrap();
        assert_eq!(s1.label(), "l2_path_sphere");
        let rep = check_hypothesis2(&kl, &s1, &[2.0, 4.0, 8.0], 150_000, 22).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.sublevel_mass > 0.05);
    }

    #[test]
    fn rho_projection_oracle_and_monotonicity_on_hyperplanes() {
        let m = unit_model(4);
        let one = ScalarField::constant(1.0);
        // Normal inside F_1: every projection sees the full measure.
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 0.0, 0.0, 0.0], 0.3).unwrap();
        let rep =
            rho_monotonicity_check(&m, &s, &[1, 2, 3, 4], &one, 300_000, 31).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.oracle_ok, Some(true));
        let full = standard_normal_pdf(0.3);
        for v in &rep.values {
            assert!((v.oracle.unwrap() - full).abs() < 1e-15);
        }

        // Tilted normal: oracle |P_m a| pdf(c) strictly increasing in m.
        let s = LevelSetSurface::hyperplane(&m, vec![1.0, 1.0, 1.0, 1.0], 0.2).unwrap();
        let rep =
            rho_monotonicity_check(&m, &s, &[1, 2, 3, 4], &one, 400_000, 32).unwrap();
        assert!(rep.monotone_ok, "{rep:?}");
        assert_eq!(rep.oracle_ok, Some(true), "{rep:?}");
        for (i, v) in rep.values.iter().enumerate() {
            let want = ((i + 1) as f64 / 4.0).sqrt() * standard_normal_pdf(0.2);
            assert!((v.oracle.unwrap() - want).abs() < 1e-15);
        }

        // Repeated dimension: identical values (same accumulator slice).
        let rep = rho_monotonicity_check(&m, &s, &[2, 2], &one, 200_000, 33).unwrap();
        assert_eq!(rep.values[0].value, rep.values[1].value);
        assert!(rep.pass);
    }

    #[test]
    fn rho_monotonicity_on_sphere_slices() {
        let m = GaussianModel::with_family(SpectrumFamily::Geometric4, 3).unwrap();
        let s = LevelSetSurface::sphere(&m, 1.0).unwrap();
        // Restrict to a half-space slice to make the set generic.
        let slice = ScalarField::from_fn("slice", |p: &Point| {
            if p[0] > 0.0 {
                1.0
            } else {
                0.0
            }
        });
        let rep =
            rho_monotonicity_check(&m, &s, &[1, 2, 3], &slice, 400_000, 34).unwrap();
        assert!(rep.monotone_ok, "{rep:?}");
        assert!(rep.oracle_ok.is_none());
        // Strict growth between the 1- and 3-dimensional projections.
        assert!(rep.values[0].value < rep.values[2].value);
    }

    #[test]
    fn surface_constructors_validate_inputs() {
        let m = unit_model(3);
        assert!(LevelSetSurface::hyperplane(&m, vec![0.0, 0.0, 0.0], 0.0).is_err());
        assert!(LevelSetSurface::hyperplane(&m, vec![1.0, 0.0], 0.0).is_err());
        assert!(LevelSetSurface::sphere(&m, 0.0).is_err());
        assert!(LevelSetSurface::sphere(&m, f64::NAN).is_err());
        assert!(LevelSetSurface::custom("c", ScalarField::coordinate(0), -1.0).is_err());
        let s = LevelSetSurface::sphere(&m, 1.0).unwrap();
        assert!(s.with_delta(0.0).is_err());
        let s = LevelSetSurface::sphere(&m, 1.0).unwrap().with_delta(0.05).unwrap();
        assert_eq!(s.delta(), 0.05);
        // Sphere default delta stays inside the radius.
        let small = LevelSetSurface::sphere(&m, 0.08).unwrap();
        assert!(small.delta() < 0.08);
    }

    #[test]
    fn householder_columns_are_an_orthonormal_complement() {
        let a = {
            let raw = [0.3, -0.7, 0.5, 0.4];
            let n: f64 = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            raw.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let cols = householder_complement_cols(&a);
        assert_eq!(cols.len(), 3);
        for (i, ci) in cols.iter().enumerate() {
            let dot_a: f64 = ci.iter().zip(&a).map(|(x, y)| x * y).sum();
            assert!(dot_a.abs() < 1e-12, "column {i} not orthogonal to normal");
            for (j, cj) in cols.iter().enumerate() {
                let dot: f64 = ci.iter().zip(cj).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }
}
