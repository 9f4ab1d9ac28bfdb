//! Identity-check reports and the deterministic CSV ledger.
//!
//! Every identity check in the engine produces one [`IdentityReport`]: the
//! two sides of the identity with their standard errors, the gap, the
//! tolerance it was judged against, and the verdict. A batch of reports
//! serializes to a CSV ledger with pinned column order and fixed float
//! formatting, so two runs with the same seed produce byte-identical
//! files.

use crate::error::Result;
use crate::integrate::IntegralEstimate;
use serde::Serialize;
use std::io::Write as _;
use std::path::Path;

/// Outcome of checking one identity `LHS = RHS`.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    /// Stable machine id, e.g. `"ibp.dir2"` or `"bilinear.h1k1"`.
    pub identity_id: String,
    /// ASCII rendering of the identity being checked.
    pub formula: String,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    /// `|lhs - rhs|`.
    pub delta: f64,
    /// Tolerance the gap was compared against.
    pub tol: f64,
    pub pass: bool,
    /// Non-fatal observations (exponent warnings, undersampled bands, …).
    pub notes: Vec<String>,
}

impl IdentityReport {
    /// Judge `lhs` vs `rhs` at `sigmas` combined standard errors with an
    /// absolute floor (the floor alone guards deterministic quadrature,
    /// whose stderr is zero).
    pub fn from_sides(
        identity_id: impl Into<String>,
        formula: impl Into<String>,
        lhs: (f64, f64),
        rhs: (f64, f64),
        sigmas: f64,
        floor: f64,
    ) -> Self {
        let delta = (lhs.0 - rhs.0).abs();
        let tol = (sigmas * (lhs.1 * lhs.1 + rhs.1 * rhs.1).sqrt()).max(floor);
        IdentityReport {
            identity_id: identity_id.into(),
            formula: formula.into(),
            lhs: lhs.0,
            lhs_se: lhs.1,
            rhs: rhs.0,
            rhs_se: rhs.1,
            delta,
            tol,
            pass: delta <= tol && delta.is_finite(),
            notes: Vec::new(),
        }
    }

    pub fn from_estimates(
        identity_id: impl Into<String>,
        formula: impl Into<String>,
        lhs: &IntegralEstimate,
        rhs: &IntegralEstimate,
        sigmas: f64,
        floor: f64,
    ) -> Self {
        IdentityReport::from_sides(
            identity_id,
            formula,
            (lhs.value, lhs.stderr),
            (rhs.value, rhs.stderr),
            sigmas,
            floor,
        )
    }

    /// One-sided bound check `lhs <= rhs + tol` (used for norm bounds
    /// rather than equalities); `delta` records `lhs - rhs` signed work
    /// folded through `max(0, lhs - rhs)`.
    pub fn from_bound(
        identity_id: impl Into<String>,
        formula: impl Into<String>,
        lhs: (f64, f64),
        rhs: (f64, f64),
        sigmas: f64,
        floor: f64,
    ) -> Self {
        let excess = (lhs.0 - rhs.0).max(0.0);
        let tol = (sigmas * (lhs.1 * lhs.1 + rhs.1 * rhs.1).sqrt()).max(floor);
        IdentityReport {
            identity_id: identity_id.into(),
            formula: formula.into(),
            lhs: lhs.0,
            lhs_se: lhs.1,
            rhs: rhs.0,
            rhs_se: rhs.1,
            delta: excess,
            tol,
            pass: excess <= tol && lhs.0.is_finite() && rhs.0.is_finite(),
            notes: Vec::new(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }
}

/// Fixed CSV header. Column order is part of the ledger contract.
pub const CSV_HEADER: &str = "identity_id,lhs,lhs_se,rhs,rhs_se,delta,tol,pass,formula";

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One ledger row; floats in fixed `{:.12e}` so output is byte-stable.
pub fn csv_row(r: &IdentityReport) -> String {
    format!(
        "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{},{}",
        csv_escape(&r.identity_id),
        r.lhs,
        r.lhs_se,
        r.rhs,
        r.rhs_se,
        r.delta,
        r.tol,
        r.pass,
        csv_escape(&r.formula),
    )
}

/// Write the ledger in the reports' order (callers keep that order
/// deterministic). Returns the number of rows written.
pub fn write_csv(path: &Path, reports: &[IdentityReport]) -> Result<usize> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", csv_row(r))?;
    }
    out.flush()?;
    Ok(reports.len())
}
