//! Grids, density fields on them and elementary measurements.
//!
//! Two geometries are supported: a uniform cubic grid of `n^3` cells and a
//! radial grid of `n` concentric shells for spherically symmetric densities.
//! Box cells are stored with the z index varying fastest.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GeometryKind {
    /// `n` cells per axis of side `h`; `origin` is the lower corner.
    Box3D { n: usize, h: f64, origin: [f64; 3] },
    /// `n` shells with edges `r_i = i * r_max / n`.
    Radial { n: usize, r_max: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    kind: GeometryKind,
    volumes: Vec<f64>,
}

impl Geometry {
    pub fn box3d(n: usize, h: f64, origin: [f64; 3]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGeometry("box grid needs at least one cell per axis".into()));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidGeometry(format!("cell size must be positive, got {h}")));
        }
        let volumes = vec![h * h * h; n * n * n];
        Ok(Self { kind: GeometryKind::Box3D { n, h, origin }, volumes })
    }

    /// Cube of `n^3` cells of side `h` centered at the origin.
    pub fn centered_box(n: usize, h: f64) -> Result<Self> {
        let half = -0.5 * n as f64 * h;
        Self::box3d(n, h, [half; 3])
    }

    pub fn radial(n: usize, r_max: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGeometry("radial grid needs at least one shell".into()));
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(Error::InvalidGeometry(format!("r_max must be positive, got {r_max}")));
        }
        let dr = r_max / n as f64;
        let volumes = (0..n)
            .map(|i| {
                let lo = i as f64 * dr;
                let hi = (i + 1) as f64 * dr;
                4.0 * PI / 3.0 * (hi * hi * hi - lo * lo * lo)
            })
            .collect();
        Ok(Self { kind: GeometryKind::Radial { n, r_max }, volumes })
    }

    pub fn kind(&self) -> &GeometryKind {
        &self.kind
    }

    pub fn is_radial(&self) -> bool {
        matches!(self.kind, GeometryKind::Radial { .. })
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn total_volume(&self) -> f64 {
        match self.kind {
            GeometryKind::Box3D { n, h, .. } => (n as f64 * h).powi(3),
            GeometryKind::Radial { r_max, .. } => 4.0 * PI / 3.0 * r_max.powi(3),
        }
    }

    /// Cells per axis (box) or number of shells (radial).
    pub fn resolution(&self) -> usize {
        match self.kind {
            GeometryKind::Box3D { n, .. } | GeometryKind::Radial { n, .. } => n,
        }
    }

    /// Cell size `h` (box) or shell width `dr` (radial).
    pub fn spacing(&self) -> f64 {
        match self.kind {
            GeometryKind::Box3D { h, .. } => h,
            GeometryKind::Radial { n, r_max } => r_max / n as f64,
        }
    }

    /// Cell center; radial shells report their midpoint radius on the x axis.
    pub fn cell_center(&self, index: usize) -> [f64; 3] {
        match self.kind {
            GeometryKind::Box3D { n, h, origin } => {
                let (i, j, k) = unravel(index, n);
                [
                    origin[0] + (i as f64 + 0.5) * h,
                    origin[1] + (j as f64 + 0.5) * h,
                    origin[2] + (k as f64 + 0.5) * h,
                ]
            }
            GeometryKind::Radial { n, r_max } => {
                [(index as f64 + 0.5) * r_max / n as f64, 0.0, 0.0]
            }
        }
    }

    /// Distance of the cell center from the coordinate origin.
    pub fn center_radius(&self, index: usize) -> f64 {
        let c = self.cell_center(index);
        (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
    }

    /// Compact descriptor, `radial:<n>:<r_max>` or `box:<n>:<h>`.
    pub fn descriptor(&self) -> String {
        match self.kind {
            GeometryKind::Box3D { n, h, .. } => format!("box:{n}:{h}"),
            GeometryKind::Radial { n, r_max } => format!("radial:{n}:{r_max}"),
        }
    }
}

pub(crate) fn unravel(index: usize, n: usize) -> (usize, usize, usize) {
    (index / (n * n), (index / n) % n, index % n)
}

pub(crate) fn ravel(i: usize, j: usize, k: usize, n: usize) -> usize {
    (i * n + j) * n + k
}

/// Density sampled on a geometry, with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    geometry: Arc<Geometry>,
    values: Vec<f64>,
}

impl DensityField {
    pub fn new(geometry: Arc<Geometry>, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::InvalidDensity(format!(
                "{} values for a geometry with {} cells",
                values.len(),
                geometry.len()
            )));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidDensity(format!("cell {i} has density {v} outside [0, 1]")));
        }
        Ok(Self { geometry, values })
    }

    pub fn zeros(geometry: Arc<Geometry>) -> Self {
        let values = vec![0.0; geometry.len()];
        Self { geometry, values }
    }

    /// Builds a field from a per-cell closure; values are clamped into `[0, 1]`.
    pub fn from_fn(geometry: Arc<Geometry>, mut f: impl FnMut(usize) -> f64) -> Self {
        let values = (0..geometry.len()).map(|i| f(i).clamp(0.0, 1.0)).collect();
        Self { geometry, values }
    }

    pub fn geometry(&self) -> &Arc<Geometry> {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        mass(self)
    }
}

/// Potential `phi = k * rho` with its repulsive and attractive parts and the
/// field `-Laplacian(phi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    pub(crate) geometry: Arc<Geometry>,
    pub(crate) phi: Vec<f64>,
    pub(crate) repulsive: Vec<f64>,
    pub(crate) attractive: Vec<f64>,
    pub(crate) neg_laplacian: Vec<f64>,
    pub(crate) laplacian_exact: bool,
}

impl PotentialField {
    pub fn geometry(&self) -> &Arc<Geometry> {
        &self.geometry
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    /// Potential generated by the `|x|^-beta` part of the kernel.
    pub fn repulsive(&self) -> &[f64] {
        &self.repulsive
    }

    /// Potential generated by the `|x|^alpha` part of the kernel.
    pub fn attractive(&self) -> &[f64] {
        &self.attractive
    }

    pub fn neg_laplacian(&self) -> &[f64] {
        &self.neg_laplacian
    }

    /// False when the repulsion is not Coulomb; `neg_laplacian` then holds
    /// only the attractive contribution.
    pub fn laplacian_exact(&self) -> bool {
        self.laplacian_exact
    }
}

/// `sum rho_i * vol_i`.
pub fn mass(rho: &DensityField) -> f64 {
    rho.values.iter().zip(rho.geometry.volumes()).map(|(r, v)| r * v).sum()
}

/// Diameter of `{rho > tol}`, counting the full extent of occupied cells.
///
/// Box grids: the farthest pair of cell corners, found among cells that are
/// extreme in their z column (interior cells of a column cannot carry a
/// convex-hull vertex). Radial grids: twice the outer radius of the largest
/// occupied shell. An empty support has diameter zero.
pub fn support_diameter(rho: &DensityField, tol: f64) -> f64 {
    let geometry = rho.geometry();
    match *geometry.kind() {
        GeometryKind::Radial { n, r_max } => {
            let dr = r_max / n as f64;
            rho.values
                .iter()
                .rposition(|&v| v > tol)
                .map_or(0.0, |i| 2.0 * (i + 1) as f64 * dr)
        }
        GeometryKind::Box3D { n, h, .. } => {
            let mut candidates = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    let column = ravel(i, j, 0, n);
                    let col = &rho.values[column..column + n];
                    let first = col.iter().position(|&v| v > tol);
                    let last = col.iter().rposition(|&v| v > tol);
                    if let (Some(a), Some(b)) = (first, last) {
                        candidates.push([i as f64, j as f64, a as f64]);
                        if b != a {
                            candidates.push([i as f64, j as f64, b as f64]);
                        }
                    }
                }
            }
            if candidates.is_empty() {
                return 0.0;
            }
            let mut best = 0.0f64;
            for (a, p) in candidates.iter().enumerate() {
                for q in &candidates[a..] {
                    let d2: f64 = (0..3).map(|c| ((p[c] - q[c]).abs() + 1.0).powi(2)).sum();
                    best = best.max(d2);
                }
            }
            best.sqrt() * h
        }
    }
}

/// Indicator of the ball of `radius` about the origin, averaged over cells.
///
/// Radial shells get their exact volume fraction. Box cells that straddle the
/// sphere are subsampled on an 8^3 lattice.
pub fn ball_density(geometry: Arc<Geometry>, radius: f64) -> DensityField {
    let values = match *geometry.kind() {
        GeometryKind::Radial { n, r_max } => {
            let dr = r_max / n as f64;
            (0..n)
                .map(|i| {
                    let (a, b) = (i as f64 * dr, (i + 1) as f64 * dr);
                    ((b.min(radius).powi(3) - a.powi(3)) / (b.powi(3) - a.powi(3))).clamp(0.0, 1.0)
                })
                .collect()
        }
        GeometryKind::Box3D { h, .. } => {
            const SUB: usize = 8;
            let half_diag = 0.5 * 3f64.sqrt() * h;
            (0..geometry.len())
                .map(|i| {
                    let r = geometry.center_radius(i);
                    if r + half_diag <= radius {
                        return 1.0;
                    }
                    if r - half_diag >= radius {
                        return 0.0;
                    }
                    let c = geometry.cell_center(i);
                    let offset = |k: usize| h * ((k as f64 + 0.5) / SUB as f64 - 0.5);
                    let mut inside = 0usize;
                    for a in 0..SUB {
                        for b in 0..SUB {
                            for d in 0..SUB {
                                let p = [c[0] + offset(a), c[1] + offset(b), c[2] + offset(d)];
                                if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] < radius * radius {
                                    inside += 1;
                                }
                            }
                        }
                    }
                    inside as f64 / (SUB * SUB * SUB) as f64
                })
                .collect()
        }
    };
    DensityField { geometry, values }
}

/// Volumes of the saturated, intermediate and empty level sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSetMeasures {
    /// `|{rho >= 1 - tol}|`
    pub saturated: f64,
    /// `|{tol < rho < 1 - tol}|`
    pub intermediate: f64,
    /// `|{rho <= tol}|`
    pub empty: f64,
}

pub fn level_set_measures(rho: &DensityField, tol: f64) -> LevelSetMeasures {
    let mut out = LevelSetMeasures { saturated: 0.0, intermediate: 0.0, empty: 0.0 };
    for (&r, &v) in rho.values.iter().zip(rho.geometry.volumes()) {
        match classify_cell(r, tol) {
            CellState::Saturated => out.saturated += v,
            CellState::Intermediate => out.intermediate += v,
            CellState::Empty => out.empty += v,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CellState {
    Saturated,
    Intermediate,
    Empty,
}

pub(crate) fn classify_cell(value: f64, tol: f64) -> CellState {
    if value >= 1.0 - tol {
        CellState::Saturated
    } else if value <= tol {
        CellState::Empty
    } else {
        CellState::Intermediate
    }
}

/// Column order of the field dump.
pub const DUMP_COLUMNS: [&str; 7] = ["index", "x", "y", "z", "rho", "phi", "neg_laplacian"];

/// Magic prefix of the binary dump.
pub const DUMP_MAGIC: &[u8; 8] = b"SWPDUMP1";

fn check_same(rho: &DensityField, phi: &PotentialField) -> Result<()> {
    if !Arc::ptr_eq(&rho.geometry, &phi.geometry) && *rho.geometry != *phi.geometry {
        return Err(Error::GeometryMismatch);
    }
    Ok(())
}

/// Writes one CSV row per cell with the columns in [`DUMP_COLUMNS`].
///
/// Radial shells are written with their midpoint radius in `x` and zero `y`, `z`.
pub fn write_dump_csv<W: Write>(out: &mut W, rho: &DensityField, phi: &PotentialField) -> Result<()> {
    check_same(rho, phi)?;
    writeln!(out, "{}", DUMP_COLUMNS.join(","))?;
    let g = rho.geometry();
    for i in 0..g.len() {
        let c = g.cell_center(i);
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            i, c[0], c[1], c[2], rho.values[i], phi.phi[i], phi.neg_laplacian[i]
        )?;
    }
    Ok(())
}

/// Binary dump: [`DUMP_MAGIC`], the cell count as `u64`, then per cell the
/// index as `u64` followed by six `f64` in [`DUMP_COLUMNS`] order. Little endian.
pub fn write_dump_binary<W: Write>(out: &mut W, rho: &DensityField, phi: &PotentialField) -> Result<()> {
    check_same(rho, phi)?;
    let g = rho.geometry();
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&(g.len() as u64).to_le_bytes())?;
    for i in 0..g.len() {
        let c = g.cell_center(i);
        out.write_all(&(i as u64).to_le_bytes())?;
        for v in [c[0], c[1], c[2], rho.values[i], phi.phi[i], phi.neg_laplacian[i]] {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}
