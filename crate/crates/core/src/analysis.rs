//! Diagnostics on computed densities: Euler-Lagrange residuals, the chemical
//! potential, phase labels, diameter and moment bounds, Laplacian signs, and
//! a flat-spot probe for synthetic scalar fields.
//!
//! Every measurement takes its level-set tolerance as an explicit input and
//! echoes it in the returned record.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::fields::{
    classify_cell, level_set_measures, ravel, support_diameter, unravel, CellState, DensityField, Geometry,
    GeometryKind, PotentialField,
};
use crate::kernels::{cell_table_entry, equivalent_radius, radial_kernel};
use crate::optimizer::SolveResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    P1,
    P2,
    P3,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::P1 => "P1",
            Phase::P2 => "P2",
            Phase::P3 => "P3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTolerances {
    /// Cells with `rho >= 1 - density_tol` are saturated, `rho <= density_tol` empty.
    pub density_tol: f64,
    /// Fewer saturated cells than this means no saturated set.
    pub min_saturated_cells: usize,
    /// Saturated-mass fraction at or above which the density is solid.
    pub solid_fraction: f64,
}

impl Default for PhaseTolerances {
    fn default() -> Self {
        Self { density_tol: 1e-3, min_saturated_cells: 10, solid_fraction: 0.98 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub saturated_volume: f64,
    pub intermediate_volume: f64,
    pub saturated_cells: usize,
    pub saturated_mass_fraction: f64,
    pub tolerances: PhaseTolerances,
}

/// Labels a density: `P1` when fewer than `min_saturated_cells` cells are
/// saturated, `P3` when the saturated cells carry at least `solid_fraction`
/// of the mass, `P2` otherwise.
pub fn phase_classify(rho: &DensityField, tols: &PhaseTolerances) -> PhaseReport {
    let measures = level_set_measures(rho, tols.density_tol);
    let vols = rho.geometry().volumes();
    let mut saturated_cells = 0;
    let mut saturated_mass = 0.0;
    for (r, v) in rho.values().iter().zip(vols) {
        if classify_cell(*r, tols.density_tol) == CellState::Saturated {
            saturated_cells += 1;
            saturated_mass += r * v;
        }
    }
    let mass = rho.mass();
    let fraction = if mass > 0.0 { saturated_mass / mass } else { 0.0 };
    let phase = if saturated_cells < tols.min_saturated_cells {
        Phase::P1
    } else if fraction >= tols.solid_fraction {
        Phase::P3
    } else {
        Phase::P2
    };
    PhaseReport {
        phase,
        saturated_volume: measures.saturated,
        intermediate_volume: measures.intermediate,
        saturated_cells,
        saturated_mass_fraction: fraction,
        tolerances: *tols,
    }
}

/// Normalized violations of the three-case stationarity condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElResidual {
    /// `max(0, phi - mu)` over saturated cells, over `mu`.
    pub saturated: f64,
    /// `|phi - mu|` over intermediate cells, over `mu`.
    pub intermediate: f64,
    /// `max(0, mu - phi)` over empty cells, over `mu`.
    pub empty: f64,
    pub tol: f64,
}

impl ElResidual {
    pub fn max(&self) -> f64 {
        self.saturated.max(self.intermediate).max(self.empty)
    }
}

fn same_geometry(rho: &DensityField, phi: &PotentialField) -> Result<()> {
    if std::sync::Arc::ptr_eq(rho.geometry(), phi.geometry()) || **rho.geometry() == **phi.geometry() {
        Ok(())
    } else {
        Err(Error::GeometryMismatch)
    }
}

pub fn el_residual(rho: &DensityField, phi: &PotentialField, mu: f64, tol: f64) -> Result<ElResidual> {
    same_geometry(rho, phi)?;
    if !(mu > 0.0) {
        return Err(Error::InvalidChemicalPotential(mu));
    }
    let mut out = ElResidual { saturated: 0.0, intermediate: 0.0, empty: 0.0, tol };
    for (&r, &p) in rho.values().iter().zip(phi.phi()) {
        match classify_cell(r, tol) {
            CellState::Saturated => out.saturated = out.saturated.max(p - mu),
            CellState::Intermediate => out.intermediate = out.intermediate.max((p - mu).abs()),
            CellState::Empty => out.empty = out.empty.max(mu - p),
        }
    }
    out.saturated /= mu;
    out.intermediate /= mu;
    out.empty /= mu;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MuMethod {
    /// Median of `phi` over the intermediate set.
    Median,
    /// Midpoint of the saturated/empty bracket.
    Bracket,
    /// Mean of `phi` over a small intermediate set with no bracket available.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChemicalPotential {
    pub value: f64,
    pub method: MuMethod,
    /// `(max phi on saturated, min phi on empty near the support)`.
    pub bracket: Option<(f64, f64)>,
    /// The bracket is inverted by more than 5%.
    pub degenerate: bool,
}

/// Estimates the Lagrange multiplier of the mass constraint from level sets.
pub fn chemical_potential_estimate(rho: &DensityField, phi: &PotentialField, tol: f64) -> Result<ChemicalPotential> {
    same_geometry(rho, phi)?;
    let values = rho.values();
    let p = phi.phi();
    let mut inter: Vec<f64> = Vec::new();
    let mut sat_max = f64::NEG_INFINITY;
    for (i, &r) in values.iter().enumerate() {
        match classify_cell(r, tol) {
            CellState::Intermediate => inter.push(p[i]),
            CellState::Saturated => sat_max = sat_max.max(p[i]),
            CellState::Empty => {}
        }
    }
    if inter.is_empty() && sat_max == f64::NEG_INFINITY {
        return Err(Error::InvalidDensity("empty support".into()));
    }
    let hull = padded_hull(rho.geometry(), values, tol, 2);
    let empty_min = values
        .iter()
        .enumerate()
        .filter(|(i, &r)| hull[*i] && classify_cell(r, tol) == CellState::Empty)
        .map(|(i, _)| p[i])
        .fold(f64::INFINITY, f64::min);
    let bracket = (sat_max.is_finite() && empty_min.is_finite()).then_some((sat_max, empty_min));
    let degenerate = bracket.is_some_and(|(lo, hi)| lo - hi > 0.05 * hi.abs());
    if inter.len() >= 10 {
        inter.sort_by(f64::total_cmp);
        let k = inter.len();
        let median = if k % 2 == 1 { inter[k / 2] } else { 0.5 * (inter[k / 2 - 1] + inter[k / 2]) };
        return Ok(ChemicalPotential { value: median, method: MuMethod::Median, bracket, degenerate });
    }
    let (value, method) = match (sat_max.is_finite(), empty_min.is_finite()) {
        (true, true) => (0.5 * (sat_max + empty_min), MuMethod::Bracket),
        (true, false) => (sat_max, MuMethod::Bracket),
        (false, true) if inter.is_empty() => (empty_min, MuMethod::Bracket),
        _ => (inter.iter().sum::<f64>() / inter.len() as f64, MuMethod::Mean),
    };
    Ok(ChemicalPotential { value, method, bracket, degenerate })
}

/// Cells within `pad` cells of the support's bounding region.
fn padded_hull(geometry: &Geometry, values: &[f64], tol: f64, pad: usize) -> Vec<bool> {
    match *geometry.kind() {
        GeometryKind::Radial { n, .. } => {
            let last = values.iter().rposition(|&v| v > tol).unwrap_or(0);
            (0..n).map(|i| i <= last + pad).collect()
        }
        GeometryKind::Box3D { n, .. } => {
            let mut lo = [usize::MAX; 3];
            let mut hi = [0usize; 3];
            for (idx, &v) in values.iter().enumerate() {
                if v > tol {
                    let c = unravel(idx, n);
                    for (a, x) in [c.0, c.1, c.2].into_iter().enumerate() {
                        lo[a] = lo[a].min(x);
                        hi[a] = hi[a].max(x);
                    }
                }
            }
            (0..values.len())
                .map(|idx| {
                    let c = unravel(idx, n);
                    [c.0, c.1, c.2]
                        .into_iter()
                        .enumerate()
                        .all(|(a, x)| x + pad >= lo[a] && x <= hi[a] + pad)
                })
                .collect()
        }
    }
}

/// `support_diameter / max(1, m^(1/3))`.
pub fn diameter_ratio(rho: &DensityField, m: f64, tol: f64) -> f64 {
    support_diameter(rho, tol) / m.cbrt().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSample {
    pub index: usize,
    pub value: f64,
    /// `value / m^((alpha + 1) / 3)`
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub alpha: f64,
    pub mass: f64,
    pub samples: Vec<MomentSample>,
    /// Requested samples outside the support.
    pub excluded: Vec<usize>,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Value of the integral for the equivalent saturated ball centered at the
    /// sample point: a lower bound for `alpha >= 2`, an upper bound otherwise.
    pub ball_value: f64,
    /// Every sample respects the ball bound up to 1% discretization slack.
    pub ball_bound_holds: bool,
}

/// `int |x - y|^(alpha - 2) dy` over the ball of volume `m` centered at `x`.
pub fn ball_moment(alpha: f64, m: f64) -> f64 {
    let r = equivalent_radius(m);
    4.0 * std::f64::consts::PI * r.powf(alpha + 1.0) / (alpha + 1.0)
}

/// Evaluates `int |x - y|^(alpha - 2) rho(y) dy` at the given cells.
pub fn moment_bound_check(rho: &DensityField, samples: &[usize], alpha: f64, m: f64) -> Result<MomentReport> {
    let p = alpha - 2.0;
    if p <= -2.0 {
        return Err(Error::UnsupportedExponent(p));
    }
    let g = rho.geometry();
    let vols = g.volumes();
    let values = rho.values();
    let scale = m.powf((alpha + 1.0) / 3.0);
    let ball_value = ball_moment(alpha, m);
    let mut report = MomentReport {
        alpha,
        mass: m,
        samples: Vec::new(),
        excluded: Vec::new(),
        min_ratio: f64::INFINITY,
        max_ratio: f64::NEG_INFINITY,
        ball_value,
        ball_bound_holds: true,
    };
    for &i in samples {
        if i >= values.len() || values[i] <= 0.0 {
            report.excluded.push(i);
            continue;
        }
        let mut value = 0.0;
        for (j, (&r, &v)) in values.iter().zip(vols).enumerate() {
            if r == 0.0 {
                continue;
            }
            let k = match *g.kind() {
                GeometryKind::Radial { .. } => radial_kernel(p, g.center_radius(i), g.center_radius(j))?,
                GeometryKind::Box3D { n, h, .. } => {
                    let (a, b, c) = unravel(i, n);
                    let (x, y, z) = unravel(j, n);
                    let d2 = [a as f64 - x as f64, b as f64 - y as f64, c as f64 - z as f64]
                        .iter()
                        .map(|t| t * t)
                        .sum::<f64>();
                    cell_table_entry(p, h * d2.sqrt(), h * h * h)
                }
            };
            value += k * r * v;
        }
        let ratio = value / scale;
        report.min_ratio = report.min_ratio.min(ratio);
        report.max_ratio = report.max_ratio.max(ratio);
        let holds = if alpha >= 2.0 { value >= ball_value * 0.99 } else { value <= ball_value * 1.01 };
        report.ball_bound_holds &= holds;
        report.samples.push(MomentSample { index: i, value, ratio });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplacianSignReport {
    /// Minimum of `-Laplacian(phi)` over saturated cells, if any.
    pub min_on_saturated: Option<f64>,
    /// Maximum of `-Laplacian(phi)` over intermediate cells, if any.
    pub max_on_intermediate: Option<f64>,
    pub tol: f64,
}

pub fn laplacian_sign_report(neg_laplacian: &[f64], rho: &DensityField, tol: f64) -> Result<LaplacianSignReport> {
    if neg_laplacian.len() != rho.values().len() {
        return Err(Error::GeometryMismatch);
    }
    let mut min_sat: Option<f64> = None;
    let mut max_int: Option<f64> = None;
    for (&r, &l) in rho.values().iter().zip(neg_laplacian) {
        match classify_cell(r, tol) {
            CellState::Saturated => min_sat = Some(min_sat.map_or(l, |x| x.min(l))),
            CellState::Intermediate => max_int = Some(max_int.map_or(l, |x| x.max(l))),
            CellState::Empty => {}
        }
    }
    Ok(LaplacianSignReport { min_on_saturated: min_sat, max_on_intermediate: max_int, tol })
}

/// Volume of `{|u - tau| <= band}` for a field sampled at cell centers.
/// A negative band selects nothing.
pub fn flat_spot_measure(geometry: &Geometry, u: &[f64], tau: f64, band: f64) -> Result<f64> {
    if u.len() != geometry.len() {
        return Err(Error::GeometryMismatch);
    }
    Ok(u.iter().zip(geometry.volumes()).filter(|(x, _)| (*x - tau).abs() <= band).map(|(_, v)| v).sum())
}

/// `-Laplacian(u)` by central differences: the 7-point stencil on box grids,
/// `-(u'' + 2u'/r)` on radial grids. Cells without a full stencil get NaN.
pub fn finite_difference_neg_laplacian(geometry: &Geometry, u: &[f64]) -> Result<Vec<f64>> {
    if u.len() != geometry.len() {
        return Err(Error::GeometryMismatch);
    }
    let mut out = vec![f64::NAN; u.len()];
    match *geometry.kind() {
        GeometryKind::Box3D { n, h, .. } => {
            let h2 = h * h;
            for i in 1..n.saturating_sub(1) {
                for j in 1..n - 1 {
                    for k in 1..n - 1 {
                        let c = ravel(i, j, k, n);
                        let sum = u[ravel(i - 1, j, k, n)]
                            + u[ravel(i + 1, j, k, n)]
                            + u[ravel(i, j - 1, k, n)]
                            + u[ravel(i, j + 1, k, n)]
                            + u[ravel(i, j, k - 1, n)]
                            + u[ravel(i, j, k + 1, n)];
                        out[c] = (6.0 * u[c] - sum) / h2;
                    }
                }
            }
        }
        GeometryKind::Radial { n, r_max } => {
            let dr = r_max / n as f64;
            for i in 1..n.saturating_sub(1) {
                let r = geometry.center_radius(i);
                let second = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (dr * dr);
                let first = (u[i + 1] - u[i - 1]) / (2.0 * dr);
                out[i] = -(second + 2.0 * first / r);
            }
        }
    }
    Ok(out)
}

/// One named pass/fail entry of a verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

/// Key/value verification document with named checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub passed: bool,
    pub checks: Vec<Check>,
    pub data: Map<String, Value>,
}

impl VerificationReport {
    pub fn new() -> Self {
        Self { passed: true, ..Default::default() }
    }

    /// Records a check that passes when `value <= tolerance`.
    pub fn check_le(&mut self, name: &str, value: f64, tolerance: f64, detail: impl Into<String>) {
        self.push(name, value <= tolerance, value, tolerance, detail);
    }

    pub fn push(&mut self, name: &str, passed: bool, value: f64, tolerance: f64, detail: impl Into<String>) {
        self.passed &= passed;
        self.checks.push(Check { name: name.into(), passed, value, tolerance, detail: detail.into() });
    }

    pub fn record<T: Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.data.insert(key.into(), v);
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn merge(&mut self, other: VerificationReport) {
        self.passed &= other.passed;
        self.checks.extend(other.checks);
        self.data.extend(other.data);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report values are serializable")
    }
}

/// Thresholds for [`solution_report`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportTolerances {
    pub residual: f64,
    pub mu_relative: f64,
    pub moment_samples: usize,
}

impl Default for ReportTolerances {
    fn default() -> Self {
        Self { residual: 1e-3, mu_relative: 0.01, moment_samples: 16 }
    }
}

/// Runs the analysis battery on a solve result.
pub fn solution_report(result: &SolveResult, m: f64, alpha: f64, tols: &ReportTolerances) -> Result<VerificationReport> {
    let rho = &result.rho;
    let phi = &result.phi;
    let dtol = result.phase.tolerances.density_tol;
    let mut report = VerificationReport::new();

    report.record("mass", &m);
    report.record("energy", &result.energy);
    report.record("mu", &result.mu);
    report.record("gap", &result.gap);
    report.record("iterations", &result.iterations);
    report.record("start", &result.start);
    report.record("method", &result.method);
    report.record("grid", &rho.geometry().descriptor());
    report.record("phase", &result.phase);
    report.record("starts", &result.starts);
    report.record("warnings", &result.warnings);

    report.push(
        "converged",
        result.converged,
        result.gap,
        result.energy.total.abs(),
        format!("{} iterations", result.iterations),
    );
    let mass_err = (rho.mass() - m).abs() / m;
    report.check_le("mass", mass_err, 1e-12, "relative mass error");

    if result.mu > 0.0 {
        let el = el_residual(rho, phi, result.mu, dtol)?;
        report.record("el_residual", &el);
        report.check_le("el-residual", el.max(), tols.residual, "max normalized residual");
    } else {
        report.push("el-residual", false, result.mu, 0.0, "chemical potential is not positive");
    }

    let estimate = chemical_potential_estimate(rho, phi, dtol)?;
    report.record("mu_estimate", &estimate);
    let mu_dev = (estimate.value - result.mu).abs() / result.mu.abs().max(f64::MIN_POSITIVE);
    report.check_le("mu-consistency", mu_dev, tols.mu_relative, "level-set estimate vs bathtub threshold");

    report.record("diameter_ratio", &diameter_ratio(rho, m, dtol));
    report.record("support_diameter", &support_diameter(rho, dtol));
    report.record("laplacian_exact", &phi.laplacian_exact());
    report.record("laplacian_signs", &laplacian_sign_report(phi.neg_laplacian(), rho, dtol)?);

    let support: Vec<usize> = (0..rho.values().len()).filter(|&i| rho.values()[i] > dtol).collect();
    let stride = (support.len() / tols.moment_samples.max(1)).max(1);
    let samples: Vec<usize> = support.iter().step_by(stride).copied().collect();
    report.record("moments", &moment_bound_check(rho, &samples, alpha, m)?);
    Ok(report)
}
