//! Scalar and vector fields with directional calculus.
//!
//! Fields live on whitened coordinates (see [`crate::model`]), where the
//! covariance-weighted directional derivative is an ordinary partial. A
//! [`ScalarField`] bundles an evaluator with optional analytic gradient and
//! Hessian closures and an optional *singular predicate* marking the
//! measure-zero set where the analytic formulas break down (a norm kink, a
//! normalized direction at the origin). Evaluation at a declared singular
//! point returns NaN rather than a silently wrong number; the integrators
//! check the predicate first, drop the point, and count the drop.
//!
//! Gradients fall back to central finite differences with step
//! [`FD_STEP`] when no analytic closure is present. Hessians do *not* fall
//! back silently: identity checks that need second derivatives demand an
//! analytic Hessian and error otherwise, because a finite-difference
//! Hessian inside a Monte Carlo loop hides its own error budget. An
//! explicit [`ScalarField::fd_hess`] exists for property tests that want
//! the finite-difference route on purpose.
//!
//! The module also carries the differential-calculus property checks
//! (chain rule, modulus rule, product rule) used by the verification
//! suites: each compares a finite-difference gradient of a *derived* field
//! against the analytic right-hand side of the rule at sampled points.
//!
//! # Example
//!
//! ```
//! use wgsc::field::ScalarField;
//! use wgsc::model::GaussianModel;
//!
//! let model = GaussianModel::new(vec![1.0, 0.25], "demo").unwrap();
//! let f = ScalarField::monomials(
//!     "y0^2*y1",
//!     vec![(1.0, vec![2, 1])],
//! ).unwrap();
//! let p = model.point(vec![2.0, 3.0]).unwrap();
//! assert_eq!(f.value(&p), 12.0);
//! let g = f.grad_h(&p);
//! assert!((g[0] - 12.0).abs() < 1e-12); // 2*y0*y1
//! assert!((g[1] - 4.0).abs() < 1e-12);  // y0^2
//! ```

use crate::error::{EngineError, Result};
use crate::model::Point;
use nalgebra::DMatrix;
use serde::Serialize;
use std::sync::Arc;

/// Central-difference step for gradients, in whitened coordinates.
pub const FD_STEP: f64 = 1e-5;
/// Central-difference step for Hessians (second differences lose half the
/// significant digits, so the step is wider).
pub const FD_HESS_STEP: f64 = 1e-4;

pub type EvalFn = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&Point) -> Vec<f64> + Send + Sync>;
pub type HessFn = Arc<dyn Fn(&Point) -> DMatrix<f64> + Send + Sync>;
pub type SingularFn = Arc<dyn Fn(&Point) -> bool + Send + Sync>;

/// Central-difference gradient of a raw evaluator.
pub(crate) fn central_diff_grad(
    eval: &(dyn Fn(&Point) -> f64 + Send + Sync),
    p: &Point,
    h: f64,
) -> Vec<f64> {
    let n = p.dim();
    let mut q = p.clone();
    let mut g = vec![0.0; n];
    for k in 0..n {
        let yk = p[k];
        q.coords_mut()[k] = yk + h;
        let plus = eval(&q);
        q.coords_mut()[k] = yk - h;
        let minus = eval(&q);
        q.coords_mut()[k] = yk;
        g[k] = (plus - minus) / (2.0 * h);
    }
    g
}

#[derive(Clone)]
pub struct ScalarField {
    label: String,
    eval: EvalFn,
    grad: Option<GradFn>,
    hess: Option<HessFn>,
    singular: Option<SingularFn>,
}

impl std::fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarField")
            .field("label", &self.label)
            .field("has_grad", &self.grad.is_some())
            .field("has_hess", &self.hess.is_some())
            .field("has_singular", &self.singular.is_some())
            .finish()
    }
}

impl ScalarField {
    pub fn from_fn(
        label: impl Into<String>,
        eval: impl Fn(&Point) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ScalarField {
            label: label.into(),
            eval: Arc::new(eval),
            grad: None,
            hess: None,
            singular: None,
        }
    }

    pub fn with_grad(
        mut self,
        grad: impl Fn(&Point) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn with_hess(
        mut self,
        hess: impl Fn(&Point) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.hess = Some(Arc::new(hess));
        self
    }

    pub fn with_singular(
        mut self,
        singular: impl Fn(&Point) -> bool + Send + Sync + 'static,
    ) -> Self {
        self.singular = Some(Arc::new(singular));
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Same field under a new label.
    pub fn relabel(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn has_hess(&self) -> bool {
        self.hess.is_some()
    }

    pub fn is_singular(&self, p: &Point) -> bool {
        self.singular.as_ref().is_some_and(|s| s(p))
    }

    /// Field value; NaN at declared singular points (never a silent number).
    pub fn value(&self, p: &Point) -> f64 {
        if self.is_singular(p) {
            return f64::NAN;
        }
        (self.eval)(p)
    }

    /// Value without the singularity guard, for callers that have already
    /// screened the point (estimator hot loops).
    pub(crate) fn value_unchecked(&self, p: &Point) -> f64 {
        (self.eval)(p)
    }

    /// Directional gradient: analytic when attached, central differences
    /// with [`FD_STEP`] otherwise. NaN-filled at declared singular points.
    pub fn grad_h(&self, p: &Point) -> Vec<f64> {
        if self.is_singular(p) {
            return vec![f64::NAN; p.dim()];
        }
        match &self.grad {
            Some(g) => g(p),
            None => central_diff_grad(self.eval.as_ref(), p, FD_STEP),
        }
    }

    /// Single partial derivative along coordinate direction `k`.
    pub fn partial(&self, p: &Point, k: usize) -> f64 {
        if self.is_singular(p) {
            return f64::NAN;
        }
        match &self.grad {
            Some(g) => g(p)[k],
            None => {
                let h = FD_STEP;
                let mut q = p.clone();
                let yk = p[k];
                q.coords_mut()[k] = yk + h;
                let plus = (self.eval)(&q);
                q.coords_mut()[k] = yk - h;
                let minus = (self.eval)(&q);
                (plus - minus) / (2.0 * h)
            }
        }
    }

    /// Finite-difference gradient regardless of any analytic closure — the
    /// independent route used by the calculus property checks.
    pub fn fd_grad(&self, p: &Point) -> Vec<f64> {
        central_diff_grad(self.eval.as_ref(), p, FD_STEP)
    }

    /// Analytic Hessian.
    ///
    /// # Errors
    ///
    /// [`EngineError::MissingHessian`] when the field carries none; there is
    /// deliberately no silent finite-difference fallback here.
    pub fn hess_h(&self, p: &Point) -> Result<DMatrix<f64>> {
        match &self.hess {
            Some(h) => Ok(h(p)),
            None => Err(EngineError::MissingHessian {
                what: format!("field `{}` has no analytic Hessian", self.label),
            }),
        }
    }

    /// Central-second-difference Hessian of the evaluator (step
    /// [`FD_HESS_STEP`]), for property tests and oracles.
    pub fn fd_hess(&self, p: &Point) -> DMatrix<f64> {
        let n = p.dim();
        let h = FD_HESS_STEP;
        let mut q = p.clone();
        let mut out = DMatrix::<f64>::zeros(n, n);
        let f0 = (self.eval)(p);
        for i in 0..n {
            // Diagonal: (f(+h) - 2 f + f(-h)) / h^2.
            let yi = p[i];
            q.coords_mut()[i] = yi + h;
            let fp = (self.eval)(&q);
            q.coords_mut()[i] = yi - h;
            let fm = (self.eval)(&q);
            q.coords_mut()[i] = yi;
            out[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
            for j in (i + 1)..n {
                let yj = p[j];
                q.coords_mut()[i] = yi + h;
                q.coords_mut()[j] = yj + h;
                let fpp = (self.eval)(&q);
                q.coords_mut()[j] = yj - h;
                let fpm = (self.eval)(&q);
                q.coords_mut()[i] = yi - h;
                let fmm = (self.eval)(&q);
                q.coords_mut()[j] = yj + h;
                let fmp = (self.eval)(&q);
                q.coords_mut()[i] = yi;
                q.coords_mut()[j] = yj;
                let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    // ---- constructors -----------------------------------------------------

    pub fn constant(c: f64) -> Self {
        ScalarField::from_fn(format!("const[{c}]"), move |_| c)
            .with_grad(|p| vec![0.0; p.dim()])
            .with_hess(|p| DMatrix::zeros(p.dim(), p.dim()))
    }

    /// The coordinate functional `y_k` (the linear functional paired with
    /// differentiation direction `k`).
    pub fn coordinate(k: usize) -> Self {
        ScalarField::from_fn(format!("coord[{k}]"), move |p| p[k])
            .with_grad(move |p| {
                let mut g = vec![0.0; p.dim()];
                g[k] = 1.0;
                g
            })
            .with_hess(|p| DMatrix::zeros(p.dim(), p.dim()))
    }

    /// Affine functional `sum_k a_k y_k + offset`.
    pub fn linear(coeffs: Vec<f64>, offset: f64) -> Self {
        let c2 = coeffs.clone();
        ScalarField::from_fn("linear", move |p| {
            coeffs
                .iter()
                .zip(p.coords())
                .map(|(a, y)| a * y)
                .sum::<f64>()
                + offset
        })
        .with_grad(move |_| c2.clone())
        .with_hess(|p| DMatrix::zeros(p.dim(), p.dim()))
    }

    /// Polynomial as a sum of monomials `(coef, powers)`; all power vectors
    /// must have the same length, which must match the model dimension at
    /// evaluation time.
    ///
    /// # Errors
    ///
    /// Rejects empty term lists and ragged power vectors.
    pub fn monomials(
        label: impl Into<String>,
        terms: Vec<(f64, Vec<u32>)>,
    ) -> Result<Self> {
        if terms.is_empty() {
            return Err(EngineError::InvalidParameter {
                name: "terms",
                reason: "monomial list is empty".into(),
            });
        }
        let arity = terms[0].1.len();
        if terms.iter().any(|(_, pw)| pw.len() != arity) {
            return Err(EngineError::InvalidParameter {
                name: "terms",
                reason: "power vectors have mixed lengths".into(),
            });
        }
        let terms = Arc::new(terms);
        let t_eval = Arc::clone(&terms);
        let t_grad = Arc::clone(&terms);
        let t_hess = Arc::clone(&terms);
        Ok(ScalarField::from_fn(label, move |p| {
            t_eval
                .iter()
                .map(|(c, pw)| {
                    c * pw
                        .iter()
                        .enumerate()
                        .map(|(k, &e)| p[k].powi(e as i32))
                        .product::<f64>()
                })
                .sum()
        })
        .with_grad(move |p| {
            let mut g = vec![0.0; p.dim()];
            for (c, pw) in t_grad.iter() {
                for (k, &e) in pw.iter().enumerate() {
                    if e == 0 {
                        continue;
                    }
                    let mut term = c * e as f64 * p[k].powi(e as i32 - 1);
                    for (j, &ej) in pw.iter().enumerate() {
                        if j != k {
                            term *= p[j].powi(ej as i32);
                        }
                    }
                    g[k] += term;
                }
            }
            g
        })
        .with_hess(move |p| {
            let n = p.dim();
            let mut out = DMatrix::<f64>::zeros(n, n);
            for (c, pw) in t_hess.iter() {
                for (k, &ek) in pw.iter().enumerate() {
                    for (l, &el) in pw.iter().enumerate() {
                        let mut term;
                        if k == l {
                            if ek < 2 {
                                continue;
                            }
                            term = c * (ek * (ek - 1)) as f64 * p[k].powi(ek as i32 - 2);
                        } else {
                            if ek == 0 || el == 0 {
                                continue;
                            }
                            term = c * (ek * el) as f64
                                * p[k].powi(ek as i32 - 1)
                                * p[l].powi(el as i32 - 1);
                        }
                        for (j, &ej) in pw.iter().enumerate() {
                            if j != k && j != l {
                                term *= p[j].powi(ej as i32);
                            }
                        }
                        out[(k, l)] += term;
                    }
                }
            }
            out
        }))
    }

    /// Isotropic Gaussian bump `exp(-|y - center|^2 / (2 width^2))` over all
    /// coordinates, with analytic gradient and Hessian.
    pub fn gaussian_bump(center: Vec<f64>, width: f64) -> Self {
        let inv_w2 = 1.0 / (width * width);
        let c_eval = center.clone();
        let c_grad = center.clone();
        let c_hess = center;
        let val = move |p: &Point| {
            let s: f64 = p
                .coords()
                .iter()
                .zip(&c_eval)
                .map(|(y, c)| (y - c) * (y - c))
                .sum();
            (-0.5 * s * inv_w2).exp()
        };
        let val_g = val.clone();
        let val_h = val.clone();
        ScalarField::from_fn("gaussian_bump", val)
            .with_grad(move |p| {
                let f = val_g(p);
                p.coords()
                    .iter()
                    .zip(&c_grad)
                    .map(|(y, c)| -(y - c) * inv_w2 * f)
                    .collect()
            })
            .with_hess(move |p| {
                let f = val_h(p);
                let n = p.dim();
                let mut out = DMatrix::<f64>::zeros(n, n);
                for i in 0..n {
                    let di = (p[i] - c_hess[i]) * inv_w2;
                    for j in 0..n {
                        let dj = (p[j] - c_hess[j]) * inv_w2;
                        out[(i, j)] = f * (di * dj - if i == j { inv_w2 } else { 0.0 });
                    }
                }
                out
            })
    }

    /// Cylindrical field: a smooth outer map of finitely many affine
    /// functionals of the whitened point. Gradient and Hessian come from
    /// the chain rule applied to the outer map's closures.
    ///
    /// # Errors
    ///
    /// All forms must share one length (the model dimension).
    pub fn cylindrical(
        label: impl Into<String>,
        outer: SmoothMap,
        forms: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if forms.is_empty() {
            return Err(EngineError::InvalidParameter {
                name: "forms",
                reason: "cylindrical field needs at least one functional".into(),
            });
        }
        let dim = forms[0].len();
        if forms.iter().any(|f| f.len() != dim) {
            return Err(EngineError::InvalidParameter {
                name: "forms",
                reason: "functionals have mixed lengths".into(),
            });
        }
        let forms = Arc::new(forms);
        let project = {
            let forms = Arc::clone(&forms);
            move |p: &Point| -> Vec<f64> {
                forms
                    .iter()
                    .map(|a| a.iter().zip(p.coords()).map(|(ai, y)| ai * y).sum())
                    .collect()
            }
        };
        let pr_eval = project.clone();
        let pr_grad = project.clone();
        let pr_hess = project;
        let outer_eval = Arc::clone(&outer.eval);
        let outer_grad = Arc::clone(&outer.grad);
        let outer_hess = Arc::clone(&outer.hess);
        let forms_grad = Arc::clone(&forms);
        let forms_hess = Arc::clone(&forms);
        Ok(
            ScalarField::from_fn(label, move |p| outer_eval(&pr_eval(p)))
                .with_grad(move |p| {
                    let u = pr_grad(p);
                    let og = outer_grad(&u);
                    let mut g = vec![0.0; p.dim()];
                    for (gi, form) in og.iter().zip(forms_grad.iter()) {
                        for (gk, ak) in g.iter_mut().zip(form) {
                            *gk += gi * ak;
                        }
                    }
                    g
                })
                .with_hess(move |p| {
                    let u = pr_hess(p);
                    let oh = outer_hess(&u);
                    let n = p.dim();
                    let m = forms_hess.len();
                    let mut out = DMatrix::<f64>::zeros(n, n);
                    for i in 0..m {
                        for j in 0..m {
                            let hij = oh[(i, j)];
                            if hij == 0.0 {
                                continue;
                            }
                            for k in 0..n {
                                let aik = forms_hess[i][k];
                                if aik == 0.0 {
                                    continue;
                                }
                                for l in 0..n {
                                    out[(k, l)] += hij * aik * forms_hess[j][l];
                                }
                            }
                        }
                    }
                    out
                }),
        )
    }

    // ---- combinators ------------------------------------------------------

    /// Pointwise product; analytic closures combine by the product rule when
    /// both factors carry them, singular sets union.
    pub fn product(a: &ScalarField, b: &ScalarField) -> Self {
        let label = format!("({})*({})", a.label, b.label);
        let (ae, be) = (Arc::clone(&a.eval), Arc::clone(&b.eval));
        let mut out = ScalarField::from_fn(label, move |p| ae(p) * be(p));
        if let (Some(ag), Some(bg)) = (&a.grad, &b.grad) {
            let (ae, be) = (Arc::clone(&a.eval), Arc::clone(&b.eval));
            let (ag, bg) = (Arc::clone(ag), Arc::clone(bg));
            out = out.with_grad(move |p| {
                let (fa, fb) = (ae(p), be(p));
                ag(p)
                    .iter()
                    .zip(bg(p))
                    .map(|(ga, gb)| ga * fb + fa * gb)
                    .collect()
            });
        }
        out.singular = union_singular(&a.singular, &b.singular);
        out
    }

    /// Pointwise linear combination `alpha * a + beta * b`.
    pub fn lin_comb(alpha: f64, a: &ScalarField, beta: f64, b: &ScalarField) -> Self {
        let label = format!("({}*{} + {}*{})", alpha, a.label, beta, b.label);
        let (ae, be) = (Arc::clone(&a.eval), Arc::clone(&b.eval));
        let mut out =
            ScalarField::from_fn(label, move |p| alpha * ae(p) + beta * be(p));
        if let (Some(ag), Some(bg)) = (&a.grad, &b.grad) {
            let (ag, bg) = (Arc::clone(ag), Arc::clone(bg));
            out = out.with_grad(move |p| {
                ag(p)
                    .iter()
                    .zip(bg(p))
                    .map(|(ga, gb)| alpha * ga + beta * gb)
                    .collect()
            });
        }
        out.singular = union_singular(&a.singular, &b.singular);
        out
    }

    /// `|u|`, with the modulus-rule gradient `sign(u) grad u` and a singular
    /// predicate at the kink `u = 0`.
    pub fn abs_of(u: &ScalarField) -> Self {
        let label = format!("|{}|", u.label);
        let ue = Arc::clone(&u.eval);
        let mut out = ScalarField::from_fn(label, move |p| ue(p).abs());
        if let Some(ug) = &u.grad {
            let ue = Arc::clone(&u.eval);
            let ug = Arc::clone(ug);
            out = out.with_grad(move |p| {
                let s = ue(p).signum();
                ug(p).iter().map(|g| s * g).collect()
            });
        }
        let ue = Arc::clone(&u.eval);
        let base = u.singular.clone();
        out.singular = Some(Arc::new(move |p: &Point| {
            base.as_ref().is_some_and(|s| s(p)) || ue(p) == 0.0
        }));
        out
    }
}

fn union_singular(a: &Option<SingularFn>, b: &Option<SingularFn>) -> Option<SingularFn> {
    match (a, b) {
        (None, None) => None,
        (Some(s), None) | (None, Some(s)) => Some(Arc::clone(s)),
        (Some(sa), Some(sb)) => {
            let (sa, sb) = (Arc::clone(sa), Arc::clone(sb));
            Some(Arc::new(move |p: &Point| sa(p) || sb(p)))
        }
    }
}

/// Smooth outer map `R^m -> R` for cylindrical fields, with analytic
/// gradient and Hessian closures.
#[derive(Clone)]
pub struct SmoothMap {
    pub eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub grad: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    pub hess: Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>,
}

impl SmoothMap {
    /// `exp(-|u - center|^2 / (2 width^2))` on `R^m`.
    pub fn gaussian_bump(center: Vec<f64>, width: f64) -> Self {
        let inv_w2 = 1.0 / (width * width);
        let c_eval = center.clone();
        let c_grad = center.clone();
        let c_hess = center;
        let eval = move |u: &[f64]| -> f64 {
            let s: f64 = u
                .iter()
                .zip(&c_eval)
                .map(|(ui, ci)| (ui - ci) * (ui - ci))
                .sum();
            (-0.5 * s * inv_w2).exp()
        };
        let eval_g = eval.clone();
        let eval_h = eval.clone();
        SmoothMap {
            eval: Arc::new(eval),
            grad: Arc::new(move |u| {
                let f = eval_g(u);
                u.iter()
                    .zip(&c_grad)
                    .map(|(ui, ci)| -(ui - ci) * inv_w2 * f)
                    .collect()
            }),
            hess: Arc::new(move |u| {
                let f = eval_h(u);
                let m = u.len();
                let mut out = DMatrix::<f64>::zeros(m, m);
                for i in 0..m {
                    let di = (u[i] - c_hess[i]) * inv_w2;
                    for j in 0..m {
                        let dj = (u[j] - c_hess[j]) * inv_w2;
                        out[(i, j)] = f * (di * dj - if i == j { inv_w2 } else { 0.0 });
                    }
                }
                out
            }),
        }
    }
}

/// A vector field is a tuple of scalar components in the whitened
/// differentiation basis; component count must match the model dimension
/// wherever divergences are taken.
#[derive(Clone, Debug)]
pub struct VectorField {
    label: String,
    components: Vec<ScalarField>,
}

impl VectorField {
    pub fn new(label: impl Into<String>, components: Vec<ScalarField>) -> Self {
        VectorField {
            label: label.into(),
            components,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn component(&self, k: usize) -> &ScalarField {
        &self.components[k]
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.components
    }

    pub fn eval(&self, p: &Point) -> Vec<f64> {
        self.components.iter().map(|c| c.value(p)).collect()
    }

    pub fn is_singular(&self, p: &Point) -> bool {
        self.components.iter().any(|c| c.is_singular(p))
    }

    /// The gradient field of a scalar: component `k` evaluates `d_k f`.
    /// Component gradients come from the Hessian row when `f` carries one
    /// (otherwise components fall back to finite differences of `d_k f`).
    ///
    /// # Errors
    ///
    /// `f` must have an analytic gradient.
    pub fn gradient_of(f: &ScalarField, dim: usize) -> Result<Self> {
        let grad = f.grad.clone().ok_or_else(|| EngineError::MissingGradient {
            what: format!("field `{}` has no analytic gradient", f.label()),
        })?;
        let components = (0..dim)
            .map(|k| {
                let g = Arc::clone(&grad);
                let mut comp =
                    ScalarField::from_fn(format!("d{k}[{}]", f.label()), move |p| g(p)[k]);
                if let Some(h) = &f.hess {
                    let h = Arc::clone(h);
                    comp = comp.with_grad(move |p| {
                        let m = h(p);
                        (0..p.dim()).map(|j| m[(k, j)]).collect()
                    });
                }
                comp.singular = f.singular.clone();
                comp
            })
            .collect();
        Ok(VectorField::new(format!("grad[{}]", f.label()), components))
    }
}

// ---- calculus property checks ----------------------------------------------

/// A smooth real function of one variable with its derivative, for
/// composition checks.
#[derive(Clone)]
pub struct Smooth1 {
    pub label: String,
    pub eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub deriv: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl Smooth1 {
    pub fn arctan() -> Self {
        Smooth1 {
            label: "arctan".into(),
            eval: Arc::new(f64::atan),
            deriv: Arc::new(|t| 1.0 / (1.0 + t * t)),
        }
    }

    pub fn identity() -> Self {
        Smooth1 {
            label: "identity".into(),
            eval: Arc::new(|t| t),
            deriv: Arc::new(|_| 1.0),
        }
    }

    /// `t -> t^3 - 2t + sin(t)`, a generic smooth test function.
    pub fn generic_smooth() -> Self {
        Smooth1 {
            label: "t^3-2t+sin".into(),
            eval: Arc::new(|t| t * t * t - 2.0 * t + t.sin()),
            deriv: Arc::new(|t| 3.0 * t * t - 2.0 + t.cos()),
        }
    }
}

/// Result of a pointwise calculus-rule comparison.
#[derive(Debug, Clone, Serialize)]
pub struct PropertyReport {
    pub label: String,
    pub checked: usize,
    pub skipped: usize,
    /// max over points of |lhs - rhs| / max(|rhs|, 1).
    pub max_rel_err: f64,
}

fn grad_deviation(lhs: &[f64], rhs: &[f64]) -> f64 {
    let diff: f64 = lhs
        .iter()
        .zip(rhs)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = rhs.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1.0)
}

/// Chain rule: the finite-difference gradient of `theta(phi(.))` against
/// `theta'(phi) * grad phi` at the given points.
pub fn chain_rule_check(theta: &Smooth1, phi: &ScalarField, points: &[Point]) -> PropertyReport {
    let composed_eval = {
        let te = Arc::clone(&theta.eval);
        let pe = Arc::clone(&phi.eval);
        move |p: &Point| te(pe(p))
    };
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for p in points {
        if phi.is_singular(p) {
            skipped += 1;
            continue;
        }
        let lhs = central_diff_grad(&composed_eval, p, FD_STEP);
        let slope = (theta.deriv)(phi.value(p));
        let rhs: Vec<f64> = phi.grad_h(p).iter().map(|g| slope * g).collect();
        max_rel = max_rel.max(grad_deviation(&lhs, &rhs));
        checked += 1;
    }
    PropertyReport {
        label: format!("chain[{} o {}]", theta.label, phi.label()),
        checked,
        skipped,
        max_rel_err: max_rel,
    }
}

/// Modulus rule: the finite-difference gradient of `|u|` against
/// `sign(u) * grad u`. Points within `kink_margin` of the kink are skipped
/// (central differences straddle the kink there and test nothing).
pub fn modulus_rule_check(
    u: &ScalarField,
    points: &[Point],
    kink_margin: f64,
) -> PropertyReport {
    let abs_eval = {
        let ue = Arc::clone(&u.eval);
        move |p: &Point| ue(p).abs()
    };
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for p in points {
        if u.is_singular(p) || u.value(p).abs() <= kink_margin {
            skipped += 1;
            continue;
        }
        let lhs = central_diff_grad(&abs_eval, p, FD_STEP);
        let s = u.value(p).signum();
        let rhs: Vec<f64> = u.grad_h(p).iter().map(|g| s * g).collect();
        max_rel = max_rel.max(grad_deviation(&lhs, &rhs));
        checked += 1;
    }
    PropertyReport {
        label: format!("modulus[{}]", u.label()),
        checked,
        skipped,
        max_rel_err: max_rel,
    }
}

/// Product rule: the finite-difference gradient of `f * g` against
/// `f grad g + g grad f`.
pub fn product_rule_check(f: &ScalarField, g: &ScalarField, points: &[Point]) -> PropertyReport {
    let prod_eval = {
        let fe = Arc::clone(&f.eval);
        let ge = Arc::clone(&g.eval);
        move |p: &Point| fe(p) * ge(p)
    };
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for p in points {
        if f.is_singular(p) || g.is_singular(p) {
            skipped += 1;
            continue;
        }
        let lhs = central_diff_grad(&prod_eval, p, FD_STEP);
        let (fv, gv) = (f.value(p), g.value(p));
        let rhs: Vec<f64> = f
            .grad_h(p)
            .iter()
            .zip(g.grad_h(p))
            .map(|(gf, gg)| fv * gg + gv * gf)
            .collect();
        max_rel = max_rel.max(grad_deviation(&lhs, &rhs));
        checked += 1;
    }
    PropertyReport {
        label: format!("product[{}*{}]", f.label(), g.label()),
        checked,
        skipped,
        max_rel_err: max_rel,
    }
}

/// Analytic-vs-finite-difference battery for one field: the declared
/// gradient against a central difference at every non-singular point, and
/// the declared Hessian (when the field carries one) against a central
/// second difference of the evaluator. The returned `max_rel_err` is the
/// worst relative deviation seen across both comparisons.
pub fn fd_check(f: &ScalarField, points: &[Point]) -> PropertyReport {
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for p in points {
        if f.is_singular(p) {
            skipped += 1;
            continue;
        }
        max_rel = max_rel.max(grad_deviation(&f.fd_grad(p), &f.grad_h(p)));
        if f.has_hess() {
            let analytic = f.hess_h(p).expect("has_hess checked");
            let fd = f.fd_hess(p);
            let diff = (&analytic - &fd).norm();
            max_rel = max_rel.max(diff / fd.norm().max(1.0));
        }
        checked += 1;
    }
    PropertyReport {
        label: format!("fd[{}]", f.label()),
        checked,
        skipped,
        max_rel_err: max_rel,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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

    #[test]
    fn monomial_field_matches_hand_computed_calculus() {
        // f = 2 y0^3 y1 - y2. At (1, 2, 5): f = 4 - 5 = -1,
        // grad = (12, 2, -1), hessian d00 = 24, d01 = 6.
        let f = ScalarField::monomials(
            "2y0^3y1 - y2",
            vec![(2.0, vec![3, 1, 0]), (-1.0, vec![0, 0, 1])],
        )
        .unwrap();
        let model = GaussianModel::new(vec![1.0; 3], "m").unwrap();
        let p = model.point(vec![1.0, 2.0, 5.0]).unwrap();
        assert!((f.value(&p) + 1.0).abs() < 1e-14);
        let g = f.grad_h(&p);
        assert!((g[0] - 12.0).abs() < 1e-14);
        assert!((g[1] - 2.0).abs() < 1e-14);
        assert!((g[2] + 1.0).abs() < 1e-14);
        let h = f.hess_h(&p).unwrap();
        assert!((h[(0, 0)] - 24.0).abs() < 1e-14);
        assert!((h[(0, 1)] - 6.0).abs() < 1e-14);
        assert!((h[(1, 0)] - 6.0).abs() < 1e-14);
        assert!(h[(1, 1)].abs() < 1e-14);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        // The FD-vs-analytic battery at sampled points; relative error
        // bounded by 1e-7 for these smooth fields (central differences with
        // h = 1e-5 carry O(h^2) truncation).
        let model = GaussianModel::new(vec![1.0, 0.5, 0.25], "fd").unwrap();
        let points = sample_points(&model, 200, 91);
        let fields = vec![
            ScalarField::gaussian_bump(vec![0.3, -0.2, 0.1], 1.0),
            ScalarField::monomials("poly", vec![(1.0, vec![2, 1, 0]), (0.5, vec![0, 0, 3])])
                .unwrap(),
            ScalarField::linear(vec![1.0, -2.0, 0.5], 0.7),
        ];
        for f in &fields {
            for p in &points {
                let a = f.grad_h(p);
                let fd = f.fd_grad(p);
                assert!(
                    grad_deviation(&fd, &a) < 1e-7,
                    "field {} at {:?}",
                    f.label(),
                    p.coords()
                );
            }
        }
    }

    #[test]
    fn bump_hessian_matches_second_differences() {
        let f = ScalarField::gaussian_bump(vec![0.1, -0.4], 0.8);
        let model = GaussianModel::new(vec![1.0, 1.0], "h").unwrap();
        let p = model.point(vec![0.5, 0.2]).unwrap();
        let a = f.hess_h(&p).unwrap();
        let fd = f.fd_hess(&p);
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (a[(i, j)] - fd[(i, j)]).abs() < 1e-6,
                    "({i},{j}): {} vs {}",
                    a[(i, j)],
                    fd[(i, j)]
                );
            }
        }
    }

    #[test]
    fn cylindrical_field_agrees_with_direct_construction() {
        // Outer bump of two functionals vs. the same function written by
        // hand; both values and gradients coincide, and FD agrees to 1e-6.
        let model = GaussianModel::new(vec![1.0, 0.5, 0.25], "cyl").unwrap();
        let forms = vec![vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0]];
        let outer = SmoothMap::gaussian_bump(vec![0.2, -0.1], 1.3);
        let f = ScalarField::cylindrical("cyl_bump", outer, forms).unwrap();
        let points = sample_points(&model, 100, 17);
        for p in &points {
            let u0 = p[0] + 2.0 * p[2] - 0.2;
            let u1 = p[1] - p[2] + 0.1;
            let direct = (-0.5 * (u0 * u0 + u1 * u1) / (1.3 * 1.3)).exp();
            assert!((f.value(p) - direct).abs() < 1e-13);
            assert!(grad_deviation(&f.fd_grad(p), &f.grad_h(p)) < 1e-6);
        }
        // Hessian against second differences at one point.
        let p = model.point(vec![0.4, -0.3, 0.6]).unwrap();
        let (a, fd) = (f.hess_h(&p).unwrap(), f.fd_hess(&p));
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[(i, j)] - fd[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn singular_points_evaluate_to_nan_not_numbers() {
        let f = ScalarField::from_fn("inv", |p: &Point| 1.0 / p[0])
            .with_singular(|p: &Point| p[0] == 0.0);
        let model = GaussianModel::new(vec![1.0], "s").unwrap();
        let origin = model.point(vec![0.0]).unwrap();
        assert!(f.is_singular(&origin));
        assert!(f.value(&origin).is_nan());
        assert!(f.grad_h(&origin)[0].is_nan());
        let ok = model.point(vec![2.0]).unwrap();
        assert!((f.value(&ok) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn chain_rule_arctan_of_coordinate_is_tight() {
        let model = GaussianModel::new(vec![1.0, 0.5], "chain").unwrap();
        let points = sample_points(&model, 300, 7);
        let phi = ScalarField::coordinate(0);
        let rep = chain_rule_check(&Smooth1::arctan(), &phi, &points);
        assert_eq!(rep.checked, 300);
        assert!(rep.max_rel_err <= 1e-8, "dev = {}", rep.max_rel_err);
    }

    #[test]
    fn chain_rule_identity_composition_is_exact_to_rounding() {
        // theta = id: both routes differentiate the same evaluator, so the
        // deviation is pure floating-point noise.
        let model = GaussianModel::new(vec![1.0, 1.0], "id").unwrap();
        let points = sample_points(&model, 100, 3);
        let phi = ScalarField::from_fn("y0+y1^2", |p: &Point| p[0] + p[1] * p[1]);
        let rep = chain_rule_check(&Smooth1::identity(), &phi, &points);
        assert!(rep.max_rel_err <= 1e-10, "dev = {}", rep.max_rel_err);
    }

    #[test]
    fn chain_rule_generic_smooth_passes_fd_tolerance() {
        let model = GaussianModel::new(vec![1.0, 0.5, 0.25], "gen").unwrap();
        let points = sample_points(&model, 300, 23);
        let phi = ScalarField::gaussian_bump(vec![0.0, 0.3, -0.5], 1.1);
        let rep = chain_rule_check(&Smooth1::generic_smooth(), &phi, &points);
        assert!(rep.max_rel_err <= 1e-5, "dev = {}", rep.max_rel_err);
    }

    #[test]
    fn modulus_rule_away_from_the_kink() {
        let model = GaussianModel::new(vec![1.0, 1.0], "mod").unwrap();
        let points = sample_points(&model, 400, 11);
        let u = ScalarField::linear(vec![1.0, -0.5], -0.3);
        let rep = modulus_rule_check(&u, &points, 1e-3);
        assert!(rep.checked > 300, "too many skips: {}", rep.skipped);
        assert!(rep.max_rel_err <= 1e-8, "dev = {}", rep.max_rel_err);
    }

    #[test]
    fn product_rule_on_smooth_pair() {
        let model = GaussianModel::new(vec![1.0, 0.25], "prod").unwrap();
        let points = sample_points(&model, 300, 29);
        let f = ScalarField::gaussian_bump(vec![0.2, 0.0], 1.0);
        let g = ScalarField::monomials("g", vec![(1.0, vec![1, 1]), (0.3, vec![0, 2])]).unwrap();
        let rep = product_rule_check(&f, &g, &points);
        assert!(rep.max_rel_err <= 1e-5, "dev = {}", rep.max_rel_err);
    }

    #[test]
    fn product_combinator_carries_the_analytic_product_rule() {
        let f = ScalarField::coordinate(0);
        let g = ScalarField::gaussian_bump(vec![0.0, 0.0], 1.0);
        let fg = ScalarField::product(&f, &g);
        let model = GaussianModel::new(vec![1.0, 1.0], "pc").unwrap();
        let p = model.point(vec![0.7, -0.2]).unwrap();
        assert!(grad_deviation(&fg.fd_grad(&p), &fg.grad_h(&p)) < 1e-7);
    }

    #[test]
    fn gradient_of_vector_field_exposes_partials() {
        let f = ScalarField::gaussian_bump(vec![0.0, 0.5], 1.0);
        let grad_f = VectorField::gradient_of(&f, 2).unwrap();
        let model = GaussianModel::new(vec![1.0, 1.0], "gv").unwrap();
        let p = model.point(vec![0.3, -0.8]).unwrap();
        let g = f.grad_h(&p);
        assert!((grad_f.component(0).value(&p) - g[0]).abs() < 1e-14);
        assert!((grad_f.component(1).value(&p) - g[1]).abs() < 1e-14);
        // Component gradients come from the Hessian rows.
        let h = f.hess_h(&p).unwrap();
        let c0 = grad_f.component(0).grad_h(&p);
        assert!((c0[0] - h[(0, 0)]).abs() < 1e-12);
        assert!((c0[1] - h[(0, 1)]).abs() < 1e-12);
    }

    #[test]
    fn abs_combinator_flags_the_kink_as_singular() {
        let u = ScalarField::linear(vec![1.0], 0.0);
        let a = ScalarField::abs_of(&u);
        let model = GaussianModel::new(vec![1.0], "abs").unwrap();
        let kink = model.point(vec![0.0]).unwrap();
        assert!(a.is_singular(&kink));
        assert!(a.value(&kink).is_nan());
        let p = model.point(vec![-0.4]).unwrap();
        assert!((a.value(&p) - 0.4).abs() < 1e-15);
        assert!((a.grad_h(&p)[0] + 1.0).abs() < 1e-15);
    }
}
