//! JSON-facing run configuration: declarative descriptions of a model, a
//! weight, a surface, and the fields a check suite acts on, plus the suite
//! itself (a list of check ids), budgets, seed, and output location.
//!
//! Suites are data, not code: the same binary runs any matrix of checks
//! from one JSON file, so a CI job is a config file. Every `*Spec` type
//! here is inert serde data with a `build` method that assembles the real
//! engine object against a concrete [`GaussianModel`].
//!
//! # Example
//!
//! ```
//! use wgsc::config::RunConfig;
//!
//! let cfg: RunConfig = serde_json::from_str(
//!     r#"{
//!         "model": {"dim": 3, "spectrum": [1.0, 0.5, 0.25]},
//!         "weight": {"kind": "gaussian_type", "lambda": 0.05},
//!         "surface": {"kind": "hyperplane", "normal": [1.0, 0.0, 0.0], "offset": 0.0},
//!         "suite": ["ibp", "gauss_green"]
//!     }"#,
//! )
//! .unwrap();
//! assert_eq!(cfg.model.dim, 3);
//! assert_eq!(cfg.seed, 42); // default
//! let model = cfg.model.build().unwrap();
//! let weight = cfg.weight.build(&model).unwrap();
//! assert!(weight.label().starts_with("gaussian_type"));
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::field::{ScalarField, VectorField};
use crate::model::GaussianModel;
pub use crate::model::ModelSpec;
use crate::surface::LevelSetSurface;
use crate::weight::Weight;

/// Declarative weight description. `kind` selects the family; the other
/// fields are family parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum WeightSpec {
    /// `w = 1` — the unweighted Gaussian reference measure.
    #[serde(rename = "unit")]
    Unit,
    /// `w(x) = exp(lambda |x|^2)` with the ambient squared norm.
    #[serde(rename = "gaussian_type")]
    GaussianType { lambda: f64 },
    /// `w(x) = |x|^2` — vanishes at the origin, no admissible curvature
    /// constant; the falsifier's canonical target.
    #[serde(rename = "square_norm")]
    SquareNorm,
    /// `w(x) = |x|_q^q / scale` built from the coordinate q-norm.
    #[serde(rename = "lq_norm")]
    LqNorm {
        q: f64,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// Smoothed sup-norm of the Karhunen–Loève path on a uniform time grid.
    #[serde(rename = "sup_norm_kl")]
    SupNormKl { grid: usize },
}

fn default_scale() -> f64 {
    1.0
}

impl WeightSpec {
    pub fn build(&self, model: &GaussianModel) -> Result<Weight> {
        match self {
            WeightSpec::Unit => Ok(Weight::unit(model)),
            WeightSpec::GaussianType { lambda } => Ok(Weight::gaussian_type(*lambda, model)),
            WeightSpec::SquareNorm => Ok(Weight::square_norm(model)),
            WeightSpec::LqNorm { q, scale } => Weight::lq_norm(*q, *scale, model),
            WeightSpec::SupNormKl { grid } => Weight::sup_norm_kl(*grid, model),
        }
    }
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::GaussianType { lambda: 0.05 }
    }
}

/// Declarative scalar-field description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum FieldSpec {
    /// Constant field.
    #[serde(rename = "constant")]
    Constant { value: f64 },
    /// Whitened coordinate `y_index` (0-based).
    #[serde(rename = "coordinate")]
    Coordinate { index: usize },
    /// Affine functional `sum coeffs_k y_k + offset`.
    #[serde(rename = "linear")]
    Linear { coeffs: Vec<f64>, offset: f64 },
    /// Gaussian bump `exp(-|y - center|^2 / (2 width^2))`; a missing
    /// center means the origin.
    #[serde(rename = "bump")]
    Bump {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
        #[serde(default = "default_width")]
        width: f64,
    },
}

// Width 2 keeps products of two bumps inside the decay class that tensor
// Gauss-Hermite resolves to machine precision at 20 nodes; width-1 bumps
// squared decay faster than the reference Gaussian and converge slowly.
fn default_width() -> f64 {
    2.0
}

impl FieldSpec {
    pub fn build(&self, dim: usize) -> Result<ScalarField> {
        match self {
            FieldSpec::Constant { value } => Ok(ScalarField::constant(*value)),
            FieldSpec::Coordinate { index } => {
                if *index >= dim {
                    return Err(EngineError::IndexOutOfRange { index: *index, dim });
                }
                Ok(ScalarField::coordinate(*index))
            }
            FieldSpec::Linear { coeffs, offset } => {
                if coeffs.len() != dim {
                    return Err(EngineError::DimensionMismatch {
                        expected: dim,
                        got: coeffs.len(),
                    });
                }
                Ok(ScalarField::linear(coeffs.clone(), *offset))
            }
            FieldSpec::Bump { center, width } => {
                let c = center.clone().unwrap_or_else(|| vec![0.0; dim]);
                if c.len() != dim {
                    return Err(EngineError::DimensionMismatch {
                        expected: dim,
                        got: c.len(),
                    });
                }
                if !(*width > 0.0) {
                    return Err(EngineError::InvalidParameter {
                        name: "width",
                        reason: format!("bump width must be positive, got {width}"),
                    });
                }
                Ok(ScalarField::gaussian_bump(c, *width))
            }
        }
    }
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec::Bump {
            center: None,
            width: default_width(),
        }
    }
}

/// Declarative vector-field description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum VectorFieldSpec {
    /// One scalar spec per component.
    #[serde(rename = "components")]
    Components { items: Vec<FieldSpec> },
    /// The gradient of a scalar field (components are its partials).
    #[serde(rename = "gradient_of")]
    GradientOf { field: FieldSpec },
    /// The identity field `Phi(y) = y` (component `k` is `y_k`).
    #[serde(rename = "identity")]
    Identity,
}

impl VectorFieldSpec {
    pub fn build(&self, dim: usize) -> Result<VectorField> {
        match self {
            VectorFieldSpec::Components { items } => {
                if items.len() != dim {
                    return Err(EngineError::DimensionMismatch {
                        expected: dim,
                        got: items.len(),
                    });
                }
                let comps = items
                    .iter()
                    .map(|s| s.build(dim))
                    .collect::<Result<Vec<_>>>()?;
                Ok(VectorField::new("components", comps))
            }
            VectorFieldSpec::GradientOf { field } => {
                let f = field.build(dim)?;
                VectorField::gradient_of(&f, dim)
            }
            VectorFieldSpec::Identity => {
                let comps = (0..dim).map(ScalarField::coordinate).collect();
                Ok(VectorField::new("identity", comps))
            }
        }
    }
}

impl Default for VectorFieldSpec {
    fn default() -> Self {
        VectorFieldSpec::Identity
    }
}

/// Declarative level-set surface description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum SurfaceSpec {
    /// `{e_hat_a = offset}` for an ambient direction `a` (normalized
    /// internally); carries an exact quadrature in every dimension.
    #[serde(rename = "hyperplane")]
    Hyperplane { normal: Vec<f64>, offset: f64 },
    /// Ambient sphere `{|x|_X = radius}`; exact quadrature in dims 2-3,
    /// shell estimator elsewhere.
    #[serde(rename = "sphere")]
    Sphere { radius: f64 },
    /// The radius-1 ambient sphere under the Brownian Karhunen–Loève
    /// spectrum: the level set `{ |f|_{L^2(0,1)} = 1 }` of path norms.
    #[serde(rename = "l2_path_sphere")]
    L2PathSphere,
    /// Any scalar spec as the level function `G`, with a band half-width
    /// for the shell estimator.
    #[serde(rename = "custom")]
    Custom { field: FieldSpec, delta: f64 },
}

impl SurfaceSpec {
    pub fn build(&self, model: &GaussianModel) -> Result<LevelSetSurface> {
        match self {
            SurfaceSpec::Hyperplane { normal, offset } => {
                LevelSetSurface::hyperplane(model, normal.clone(), *offset)
            }
            SurfaceSpec::Sphere { radius } => LevelSetSurface::sphere(model, *radius),
            SurfaceSpec::L2PathSphere => LevelSetSurface::l2_path_sphere(model),
            SurfaceSpec::Custom { field, delta } => {
                let g = field.build(model.dim())?;
                LevelSetSurface::custom(format!("custom[{}]", g.label()), g, *delta)
            }
        }
    }
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        SurfaceSpec::Hyperplane {
            normal: vec![1.0, 0.0, 0.0, 0.0],
            offset: 0.0,
        }
    }
}

fn default_seed() -> u64 {
    42
}

fn default_budget() -> u64 {
    1_000_000
}

/// A complete run description: what to build and which checks to execute.
///
/// `suite` entries must name registry check ids (see `wgsc list-checks`);
/// an empty suite means "run every registered check". `tolerance_overrides`
/// maps a check id to a replacement absolute tolerance floor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub weight: WeightSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<SurfaceSpec>,
    /// Scalar test function (phi / f in the identities).
    #[serde(default)]
    pub scalar_field: FieldSpec,
    /// Vector test field (Phi in the divergence identities).
    #[serde(default)]
    pub vector_field: VectorFieldSpec,
    #[serde(default)]
    pub suite: Vec<String>,
    #[serde(default = "default_budget")]
    pub budget: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory for the CSV ledger and JSON detail files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Per-check absolute tolerance floors replacing the registry defaults.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tolerance_overrides: BTreeMap<String, f64>,
}

impl RunConfig {
    /// The configuration every CLI subcommand starts from when no file is
    /// given: dimension 4, spectrum `(1, 1/2, 1/4, 1/8)`, the
    /// `gaussian_type(0.05)` weight, the `{y_1 = 0}` hyperplane, a wide
    /// Gaussian bump as scalar test function, and the identity vector field.
    pub fn default_config() -> RunConfig {
        RunConfig {
            model: ModelSpec {
                dim: 4,
                spectrum: Some(vec![1.0, 0.5, 0.25, 0.125]),
                family: None,
                label: Some("default-dim4".into()),
            },
            weight: WeightSpec::default(),
            surface: Some(SurfaceSpec::default()),
            scalar_field: FieldSpec::default(),
            vector_field: VectorFieldSpec::default(),
            suite: Vec::new(),
            budget: default_budget(),
            seed: default_seed(),
            out: None,
            tolerance_overrides: BTreeMap::new(),
        }
    }

    /// Parse a config file, reporting JSON problems with their location.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            EngineError::Config(format!("cannot read `{}`: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| {
            EngineError::Config(format!(
                "`{}` line {} column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })
    }

    /// Validate and build every configured object against the model.
    pub fn assemble(&self) -> Result<Assembled> {
        if self.budget == 0 {
            return Err(EngineError::Config(
                "budget must be positive".into(),
            ));
        }
        let model = self.model.build()?;
        let weight = self.weight.build(&model)?;
        let surface = match &self.surface {
            Some(s) => Some(s.build(&model)?),
            None => None,
        };
        let scalar = self.scalar_field.build(model.dim())?;
        let vector = self.vector_field.build(model.dim())?;
        Ok(Assembled {
            model,
            weight,
            surface,
            scalar,
            vector,
        })
    }
}

/// The engine objects a [`RunConfig`] describes, built and validated.
pub struct Assembled {
    pub model: GaussianModel,
    pub weight: Weight,
    pub surface: Option<LevelSetSurface>,
    pub scalar: ScalarField,
    pub vector: VectorField,
}
