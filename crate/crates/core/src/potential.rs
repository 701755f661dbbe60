//! Potentials `phi = k * rho`, interaction energies and the field `-Laplacian(phi)`.
//!
//! A [`ConvolutionPlan`] holds the kernel tables for one `(geometry, kernel)`
//! pair. Box grids convolve through a zero-padded FFT of size `2n` per axis,
//! so the convolution is linear rather than circular. Radial grids apply the
//! sphere-averaged kernel between shell midpoints; the exponents `-1`, `0` and
//! `2` have exact O(n) evaluations of that same table, any other exponent
//! uses a dense matrix.
//!
//! `-Laplacian(phi)` is never obtained by differencing `phi`. It is assembled
//! from `4 pi rho - alpha (alpha+1) (|x|^(alpha-2) * rho)`, which is exact for
//! Coulomb repulsion.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ravel, unravel, DensityField, Geometry, GeometryKind, PotentialField};
use crate::kernels::{cell_table_entry, radial_kernel, KernelSpec};

/// Precomputed kernel tables for one geometry and kernel.
///
/// Immutable after construction (apart from the lazily built Laplacian
/// table) and shareable between threads; every application allocates its own
/// transform workspace.
pub struct ConvolutionPlan {
    geometry: Arc<Geometry>,
    spec: KernelSpec,
    backend: Backend,
}

enum Backend {
    Fft(FftBackend),
    Radial(RadialBackend),
}

impl std::fmt::Debug for ConvolutionPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvolutionPlan")
            .field("geometry", &self.geometry.descriptor())
            .field("spec", &self.spec)
            .finish()
    }
}

impl ConvolutionPlan {
    pub fn new(geometry: Arc<Geometry>, spec: KernelSpec) -> Result<Self> {
        let backend = match *geometry.kind() {
            GeometryKind::Box3D { n, h, .. } => Backend::Fft(FftBackend::new(n, h, &spec)),
            GeometryKind::Radial { n, r_max } => Backend::Radial(RadialBackend::new(n, r_max, &spec)),
        };
        Ok(Self { geometry, spec, backend })
    }

    pub fn geometry(&self) -> &Arc<Geometry> {
        &self.geometry
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    fn weighted(&self, values: &[f64]) -> Vec<f64> {
        values.iter().zip(self.geometry.volumes()).map(|(v, w)| v * w).collect()
    }

    /// Potential of arbitrary per-cell values (not necessarily a density):
    /// `sum_j K[i, j] values[j] vol[j]` with the full kernel.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let w = self.weighted(values);
        match &self.backend {
            Backend::Fft(b) => b.convolve(&w, &[&b.combined]).pop().unwrap(),
            Backend::Radial(b) => {
                let mut out = b.repulsive.apply(&w, &b.shells);
                let att = b.attractive.apply(&w, &b.shells);
                out.iter_mut().zip(att).for_each(|(o, a)| *o += a);
                out
            }
        }
    }

    /// Repulsive and attractive potentials of `values`, separately.
    pub fn apply_parts(&self, values: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = self.weighted(values);
        match &self.backend {
            Backend::Fft(b) => {
                let mut out = b.convolve(&w, &[&b.repulsive, &b.attractive]);
                let att = out.pop().unwrap();
                (out.pop().unwrap(), att)
            }
            Backend::Radial(b) => (b.repulsive.apply(&w, &b.shells), b.attractive.apply(&w, &b.shells)),
        }
    }

    /// `sum_j |x_i - x_j|^(alpha-2) values[j] vol[j]`.
    pub fn apply_laplacian_kernel(&self, values: &[f64]) -> Vec<f64> {
        let w = self.weighted(values);
        let p = self.spec.laplacian_exponent();
        if p == 0.0 {
            let total: f64 = w.iter().sum();
            return vec![total; w.len()];
        }
        match &self.backend {
            Backend::Fft(b) => {
                let table = b.laplacian.get_or_init(|| b.spectrum(p));
                b.convolve(&w, &[table]).pop().unwrap()
            }
            Backend::Radial(b) => {
                let op = b.laplacian.get_or_init(|| RadialOperator::new(p, &b.shells));
                op.apply(&w, &b.shells)
            }
        }
    }

    /// Kernel-table entry `K_p[i, j]` for exponent `p`, the same value the
    /// fast paths use.
    pub fn table_entry(&self, p: f64, i: usize, j: usize) -> f64 {
        match *self.geometry.kind() {
            GeometryKind::Box3D { n, h, .. } => {
                let (a, b, c) = unravel(i, n);
                let (x, y, z) = unravel(j, n);
                let d = [a as f64 - x as f64, b as f64 - y as f64, c as f64 - z as f64];
                let r = h * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                cell_table_entry(p, r, h * h * h)
            }
            GeometryKind::Radial { .. } => match &self.backend {
                Backend::Radial(b) => b.shells.entry(p, i, j),
                Backend::Fft(_) => unreachable!(),
            },
        }
    }

    /// Direct O(N^2) double sum over the same tables as [`Self::apply`].
    pub fn direct_apply(&self, values: &[f64]) -> Vec<f64> {
        let w = self.weighted(values);
        let (rep, att) = (self.spec.repulsive_exponent(), self.spec.attractive_exponent());
        (0..w.len())
            .map(|i| {
                w.iter()
                    .enumerate()
                    .filter(|(_, x)| **x != 0.0)
                    .map(|(j, x)| (self.table_entry(rep, i, j) + self.table_entry(att, i, j)) * x)
                    .sum()
            })
            .collect()
    }

    /// Perturbs the FFT kernel spectra so that [`Self::apply`] no longer
    /// matches [`Self::direct_apply`]. Fault-injection hook for the
    /// verification suite; has no effect on radial plans.
    #[doc(hidden)]
    pub fn inject_table_fault(&mut self) {
        if let Backend::Fft(b) = &mut self.backend {
            let bump = Complex64::new(b.combined[1].norm() * 1e-3 + 1e-3, 0.0);
            b.combined[1] += bump;
            b.repulsive[1] += bump;
        }
    }
}

fn radial_entry(p: f64, r: f64, s: f64) -> f64 {
    // shell midpoints are never at the origin, so the sphere average is finite
    radial_kernel(p, r, s).expect("radial table exponent validated at plan construction")
}

struct FftBackend {
    n: usize,
    m: usize,
    h: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    repulsive: Vec<Complex64>,
    attractive: Vec<Complex64>,
    combined: Vec<Complex64>,
    laplacian: OnceLock<Vec<Complex64>>,
}

impl FftBackend {
    fn new(n: usize, h: f64, spec: &KernelSpec) -> Self {
        let m = 2 * n;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(m);
        let inverse = planner.plan_fft_inverse(m);
        let mut backend = Self {
            n,
            m,
            h,
            forward,
            inverse,
            repulsive: Vec::new(),
            attractive: Vec::new(),
            combined: Vec::new(),
            laplacian: OnceLock::new(),
        };
        backend.repulsive = backend.spectrum(spec.repulsive_exponent());
        backend.attractive = backend.spectrum(spec.attractive_exponent());
        backend.combined = backend.repulsive.iter().zip(&backend.attractive).map(|(a, b)| a + b).collect();
        backend
    }

    /// FFT of the kernel table on the padded grid; offset `a >= n` wraps to `a - 2n`.
    fn spectrum(&self, p: f64) -> Vec<Complex64> {
        let (n, m, h) = (self.n, self.m, self.h);
        let offset = |a: usize| if a < n { a as f64 } else { a as f64 - m as f64 };
        let cell_volume = h * h * h;
        let mut table = vec![Complex64::new(0.0, 0.0); m * m * m];
        for a in 0..m {
            let dx = offset(a);
            for b in 0..m {
                let dy = offset(b);
                for c in 0..m {
                    let dz = offset(c);
                    let r = h * (dx * dx + dy * dy + dz * dz).sqrt();
                    table[(a * m + b) * m + c] = Complex64::new(cell_table_entry(p, r, cell_volume), 0.0);
                }
            }
        }
        fft3(&mut table, m, &self.forward);
        table
    }

    /// Linear convolution of the weighted values with each kernel spectrum.
    fn convolve(&self, weighted: &[f64], spectra: &[&Vec<Complex64>]) -> Vec<Vec<f64>> {
        let (n, m) = (self.n, self.m);
        let mut buf = vec![Complex64::new(0.0, 0.0); m * m * m];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    buf[(i * m + j) * m + k].re = weighted[ravel(i, j, k, n)];
                }
            }
        }
        fft3(&mut buf, m, &self.forward);
        let scale = 1.0 / (m * m * m) as f64;
        spectra
            .iter()
            .map(|spectrum| {
                let mut work: Vec<Complex64> = buf.iter().zip(spectrum.iter()).map(|(x, k)| x * k).collect();
                fft3(&mut work, m, &self.inverse);
                let mut out = vec![0.0; n * n * n];
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            out[ravel(i, j, k, n)] = work[(i * m + j) * m + k].re * scale;
                        }
                    }
                }
                out
            })
            .collect()
    }
}

/// In-place 3D FFT of an `m^3` cube: transform the contiguous axis, then
/// rotate the axes so the next one becomes contiguous.
fn fft3(buf: &mut Vec<Complex64>, m: usize, fft: &Arc<dyn Fft<f64>>) {
    let mut rotated = vec![Complex64::new(0.0, 0.0); buf.len()];
    for _ in 0..3 {
        fft.process(buf);
        for a in 0..m {
            for b in 0..m {
                let row = (a * m + b) * m;
                for c in 0..m {
                    rotated[(c * m + a) * m + b] = buf[row + c];
                }
            }
        }
        std::mem::swap(buf, &mut rotated);
    }
}

struct RadialBackend {
    shells: Shells,
    repulsive: RadialOperator,
    attractive: RadialOperator,
    laplacian: OnceLock<RadialOperator>,
}

impl RadialBackend {
    fn new(n: usize, r_max: f64, spec: &KernelSpec) -> Self {
        let shells = Shells::new(n, r_max);
        let repulsive = RadialOperator::new(spec.repulsive_exponent(), &shells);
        let attractive = RadialOperator::new(spec.attractive_exponent(), &shells);
        Self { shells, repulsive, attractive, laplacian: OnceLock::new() }
    }
}

/// Per-shell averages for the exactly integrable exponents.
///
/// For `p = -1` and `p = 2` the table entry is the average of the kernel over
/// both shells, which makes the energy of shell-wise constant densities exact.
/// Other exponents use the sphere average at the shell midpoints.
struct Shells {
    radii: Vec<f64>,
    /// Average of `1/|x|` over shell `i`.
    mean_inv: Vec<f64>,
    /// Average of `1/max(|x|, |y|)` over shell `i` times itself.
    self_coulomb: Vec<f64>,
    /// Average of `|x|^2` over shell `i`.
    mean_sq: Vec<f64>,
}

impl Shells {
    fn new(n: usize, r_max: f64) -> Self {
        let h = r_max / n as f64;
        let mut s = Shells { radii: vec![], mean_inv: vec![], self_coulomb: vec![], mean_sq: vec![] };
        for i in 0..n {
            let a = i as f64 * h;
            // b^3 - a^3 and b^5 - a^5 expanded in h = b - a to avoid cancellation
            let cubes = h * (3.0 * a * a + 3.0 * a * h + h * h);
            let fifths = h * (5.0 * a.powi(4) + 10.0 * a.powi(3) * h + 10.0 * a * a * h * h + 5.0 * a * h.powi(3) + h.powi(4));
            let inner = a.powi(3) * h * h / 2.0 + 2.0 * a * a * h.powi(3) / 3.0 + a * h.powi(4) / 3.0 + h.powi(5) / 15.0;
            s.radii.push(a + 0.5 * h);
            s.mean_inv.push(1.5 * h * (2.0 * a + h) / cubes);
            s.self_coulomb.push(18.0 * inner / (cubes * cubes));
            s.mean_sq.push(0.6 * fifths / cubes);
        }
        s
    }

    fn entry(&self, p: f64, i: usize, j: usize) -> f64 {
        if p == -1.0 {
            match i.cmp(&j) {
                std::cmp::Ordering::Equal => self.self_coulomb[i],
                std::cmp::Ordering::Greater => self.mean_inv[i],
                std::cmp::Ordering::Less => self.mean_inv[j],
            }
        } else if p == 0.0 {
            1.0
        } else if p == 2.0 {
            self.mean_sq[i] + self.mean_sq[j]
        } else {
            radial_entry(p, self.radii[i], self.radii[j])
        }
    }
}

/// Shell-to-shell application of the sphere-averaged kernel `|x|^p`.
enum RadialOperator {
    /// `p = -1`: Newton's theorem, `1 / max(r, s)`.
    Coulomb,
    /// `p = 0`.
    Constant,
    /// `p = 2`: `r^2 + s^2`.
    Quadratic,
    /// Row-major symmetric `n x n` table.
    Dense(Vec<f64>),
}

impl RadialOperator {
    fn new(p: f64, shells: &Shells) -> Self {
        if p == -1.0 {
            return Self::Coulomb;
        }
        if p == 0.0 {
            return Self::Constant;
        }
        if p == 2.0 {
            return Self::Quadratic;
        }
        let n = shells.radii.len();
        let mut table = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = shells.entry(p, i, j);
                table[i * n + j] = v;
                table[j * n + i] = v;
            }
        }
        Self::Dense(table)
    }

    fn apply(&self, weighted: &[f64], shells: &Shells) -> Vec<f64> {
        let n = weighted.len();
        match self {
            Self::Coulomb => {
                // inner part sum_{j < i} w_j, outer part sum_{j > i} w_j <1/r>_j
                let mut out = vec![0.0; n];
                let mut inner = 0.0;
                for i in 0..n {
                    out[i] = inner * shells.mean_inv[i] + weighted[i] * shells.self_coulomb[i];
                    inner += weighted[i];
                }
                let mut outer = 0.0;
                for i in (0..n).rev() {
                    out[i] += outer;
                    outer += weighted[i] * shells.mean_inv[i];
                }
                out
            }
            Self::Constant => {
                let total: f64 = weighted.iter().sum();
                vec![total; n]
            }
            Self::Quadratic => {
                let total: f64 = weighted.iter().sum();
                let second: f64 = weighted.iter().zip(&shells.mean_sq).map(|(w, q)| w * q).sum();
                shells.mean_sq.iter().map(|q| q * total + second).collect()
            }
            Self::Dense(table) => (0..n)
                .map(|i| {
                    let row = &table[i * n..(i + 1) * n];
                    row.iter().zip(weighted).map(|(k, w)| k * w).sum()
                })
                .collect(),
        }
    }
}

fn check_geometry(plan: &ConvolutionPlan, geometry: &Arc<Geometry>) -> Result<()> {
    if !Arc::ptr_eq(plan.geometry(), geometry) && **plan.geometry() != **geometry {
        return Err(Error::GeometryMismatch);
    }
    Ok(())
}

/// Potential of a density, with its parts and `-Laplacian(phi)`.
pub fn potential(plan: &ConvolutionPlan, rho: &DensityField) -> Result<PotentialField> {
    check_geometry(plan, rho.geometry())?;
    let (repulsive, attractive) = plan.apply_parts(rho.values());
    let phi: Vec<f64> = repulsive.iter().zip(&attractive).map(|(a, b)| a + b).collect();
    let lap = laplacian_of_potential(plan, rho)?;
    Ok(PotentialField {
        geometry: rho.geometry().clone(),
        phi,
        repulsive,
        attractive,
        neg_laplacian: lap.values,
        laplacian_exact: lap.exact,
    })
}

/// Energy `E = D_rep + D_att` of a density with its potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParts {
    pub total: f64,
    /// `1/2 sum rho phi_rep vol`, the `|x|^-beta` interaction.
    pub repulsive: f64,
    /// `1/2 sum rho phi_att vol`, the `|x|^alpha` interaction.
    pub attractive: f64,
}

pub fn energy(rho: &DensityField, phi: &PotentialField) -> Result<EnergyParts> {
    if !Arc::ptr_eq(rho.geometry(), phi.geometry()) && **rho.geometry() != **phi.geometry() {
        return Err(Error::GeometryMismatch);
    }
    let vols = rho.geometry().volumes();
    let half_dot = |f: &[f64]| -> f64 {
        0.5 * rho.values().iter().zip(f).zip(vols).map(|((r, p), v)| r * p * v).sum::<f64>()
    };
    let repulsive = half_dot(phi.repulsive());
    let attractive = half_dot(phi.attractive());
    Ok(EnergyParts { total: repulsive + attractive, repulsive, attractive })
}

/// Values of `-Laplacian(phi)` per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianField {
    pub values: Vec<f64>,
    /// False for non-Coulomb repulsion. Only the attractive part
    /// `-alpha (alpha+1) (|x|^(alpha-2) * rho)` is reported then.
    pub exact: bool,
}

pub fn laplacian_of_potential(plan: &ConvolutionPlan, rho: &DensityField) -> Result<LaplacianField> {
    check_geometry(plan, rho.geometry())?;
    let spec = plan.spec();
    let coeff = spec.alpha * (spec.alpha + 1.0);
    let conv = plan.apply_laplacian_kernel(rho.values());
    let exact = spec.is_coulomb();
    let values = rho
        .values()
        .iter()
        .zip(conv)
        .map(|(&r, c)| if exact { 4.0 * PI * r - coeff * c } else { -coeff * c })
        .collect();
    Ok(LaplacianField { values, exact })
}

/// Energy of `rho` directly from the plan.
pub fn energy_of(plan: &ConvolutionPlan, rho: &DensityField) -> Result<EnergyParts> {
    let phi = potential(plan, rho)?;
    energy(rho, &phi)
}

pub(crate) fn weighted_dot(a: &[f64], b: &[f64], vols: &[f64]) -> f64 {
    a.iter().zip(b).zip(vols).map(|((x, y), v)| x * y * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn radial_plan(n: usize, r_max: f64, alpha: f64, beta: f64) -> ConvolutionPlan {
        let g = Arc::new(Geometry::radial(n, r_max).unwrap());
        ConvolutionPlan::new(g, KernelSpec::new(alpha, beta).unwrap()).unwrap()
    }

    fn box_plan(n: usize, h: f64, alpha: f64, beta: f64) -> ConvolutionPlan {
        let g = Arc::new(Geometry::centered_box(n, h).unwrap());
        ConvolutionPlan::new(g, KernelSpec::new(alpha, beta).unwrap()).unwrap()
    }

    fn ball(plan: &ConvolutionPlan, radius: f64) -> DensityField {
        let g = plan.geometry().clone();
        DensityField::from_fn(g.clone(), |i| if g.center_radius(i) < radius { 1.0 } else { 0.0 })
    }

    #[test]
    fn fft_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(a, b) in &[(2.0, 1.0), (3.0, 1.0), (4.0, 0.5), (0.7, 0.4)] {
            let plan = box_plan(6, 0.3, a, b);
            let x: Vec<f64> = (0..plan.geometry().len()).map(|_| rng.gen::<f64>()).collect();
            let fast = plan.apply(&x);
            let slow = plan.direct_apply(&x);
            for (f, s) in fast.iter().zip(&slow) {
                assert_relative_eq!(f, s, max_relative = 1e-11);
            }
        }
    }

    #[test]
    fn radial_fast_paths_match_dense_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = radial_plan(64, 2.0, 2.0, 1.0);
        let x: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
        let fast = plan.apply(&x);
        let slow = plan.direct_apply(&x);
        for (f, s) in fast.iter().zip(&slow) {
            assert_relative_eq!(f, s, max_relative = 1e-12);
        }
    }

    #[test]
    fn inject_fault_breaks_equivalence() {
        let mut plan = box_plan(4, 0.5, 2.0, 1.0);
        let x = vec![0.5; 64];
        plan.inject_table_fault();
        let fast = plan.apply(&x);
        let slow = plan.direct_apply(&x);
        let worst = fast.iter().zip(&slow).map(|(f, s)| ((f - s) / s).abs()).fold(0.0, f64::max);
        assert!(worst > 1e-6);
    }

    #[test]
    fn point_mass_potential_far_field() {
        let plan = box_plan(21, 0.2, 2.0, 1.0);
        let g = plan.geometry().clone();
        let center = ravel(10, 10, 10, 21);
        let vol = g.volumes()[0];
        let rho = DensityField::from_fn(g.clone(), |i| if i == center { 1.0 } else { 0.0 });
        let phi = plan.apply(rho.values());
        for &(i, j, k) in &[(10usize, 10usize, 18usize), (3, 10, 10), (16, 16, 16)] {
            let idx = ravel(i, j, k, 21);
            let r = g.center_radius(idx);
            assert_relative_eq!(phi[idx], vol * (1.0 / r + r * r), max_relative = 1e-12);
        }
    }

    #[test]
    fn uniform_ball_coulomb_potential_at_center() {
        let plan = radial_plan(2000, 2.0, 2.0, 1.0);
        let rho = ball(&plan, 1.0);
        let (rep, _) = plan.apply_parts(rho.values());
        assert_relative_eq!(rep[0], 2.0 * PI, max_relative = 1e-5);
    }

    #[test]
    fn newton_theorem_outside_support() {
        let plan = radial_plan(400, 4.0, 3.0, 1.0);
        let g = plan.geometry().clone();
        let rho = DensityField::from_fn(g.clone(), |i| {
            let r = g.center_radius(i);
            if r < 1.5 {
                0.3 + 0.5 * (3.0 * r).sin().abs()
            } else {
                0.0
            }
        });
        let m = rho.mass();
        let (rep, _) = plan.apply_parts(rho.values());
        // outside the support every shell sees the total mass at the origin,
        // averaged over the shell
        for i in 0..400 {
            let (a, b) = (i as f64 * 0.01, (i + 1) as f64 * 0.01);
            if a >= 1.5 {
                let mean_inv = 1.5 * (b * b - a * a) / (b.powi(3) - a.powi(3));
                assert_relative_eq!(rep[i], m * mean_inv, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn radial_and_box_agree_on_a_ball() {
        let rplan = radial_plan(500, 2.5, 2.0, 1.0);
        let n = 32;
        let h = 2.6 / n as f64;
        let bplan = box_plan(n, h, 2.0, 1.0);
        let bg = bplan.geometry().clone();
        let brho = crate::fields::ball_density(bg.clone(), 1.0);
        let bphi = bplan.apply(brho.values());
        let rrho = ball(&rplan, 1.0);
        let rphi = rplan.apply(rrho.values());
        let dr = 2.5 / 500.0;
        let mut worst = 0.0f64;
        let max_phi = bphi.iter().cloned().fold(0.0, f64::max);
        for i in 0..bg.len() {
            let r = bg.center_radius(i);
            let shell = (r / dr) as usize;
            worst = worst.max((bphi[i] - rphi[shell]).abs());
        }
        assert!(worst / max_phi < 0.01, "max relative deviation {}", worst / max_phi);
    }

    #[test]
    fn ball_energy_radial() {
        // ball edge on a shell edge
        let plan = radial_plan(1500, 1.5, 2.0, 1.0);
        let rho = ball(&plan, 1.0);
        let e = energy_of(&plan, &rho).unwrap();
        let m: f64 = 4.0 * PI / 3.0;
        let expected = 0.6 * m * m;
        assert_relative_eq!(e.repulsive, expected, max_relative = 1e-3);
        assert_relative_eq!(e.attractive, expected, max_relative = 1e-3);
        assert_relative_eq!(e.total, e.repulsive + e.attractive, max_relative = 1e-15);
    }

    #[test]
    fn energy_of_zero_density_vanishes() {
        let plan = box_plan(4, 0.5, 3.0, 1.0);
        let e = energy_of(&plan, &DensityField::zeros(plan.geometry().clone())).unwrap();
        assert_eq!((e.total, e.repulsive, e.attractive), (0.0, 0.0, 0.0));
    }

    #[test]
    fn energy_matches_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for plan in [box_plan(4, 0.4, 3.0, 0.5), radial_plan(30, 1.0, 2.5, 1.0)] {
            let g = plan.geometry().clone();
            let rho = DensityField::from_fn(g.clone(), |_| rng.gen());
            let e = energy_of(&plan, &rho).unwrap().total;
            let vols = g.volumes();
            let spec = *plan.spec();
            let mut form = 0.0;
            for i in 0..g.len() {
                for j in 0..g.len() {
                    let k = plan.table_entry(spec.repulsive_exponent(), i, j)
                        + plan.table_entry(spec.attractive_exponent(), i, j);
                    form += rho.values()[i] * vols[i] * k * rho.values()[j] * vols[j];
                }
            }
            assert_relative_eq!(e, 0.5 * form, max_relative = 1e-10);
        }
    }

    #[test]
    fn tables_are_symmetric() {
        let plan = box_plan(3, 0.5, 1.5, 0.7);
        for i in 0..27 {
            for j in 0..27 {
                assert_eq!(plan.table_entry(-0.7, i, j), plan.table_entry(-0.7, j, i));
            }
        }
        let plan = radial_plan(20, 1.0, 1.5, 0.7);
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(plan.table_entry(-0.5, i, j), plan.table_entry(-0.5, j, i));
            }
        }
    }

    #[test]
    fn laplacian_alpha_two_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for plan in [box_plan(5, 0.3, 2.0, 1.0), radial_plan(50, 2.0, 2.0, 1.0)] {
            let g = plan.geometry().clone();
            let rho = DensityField::from_fn(g.clone(), |_| rng.gen());
            let m = rho.mass();
            let lap = laplacian_of_potential(&plan, &rho).unwrap();
            assert!(lap.exact);
            for (l, r) in lap.values.iter().zip(rho.values()) {
                assert_relative_eq!(*l, 4.0 * PI * r - 6.0 * m, epsilon = 1e-13 * m.max(1.0));
            }
        }
        // unit mass, fully saturated cell
        let plan = radial_plan(10, 1.0, 2.0, 1.0);
        let g = plan.geometry().clone();
        let v0 = g.volumes()[0];
        let rho = DensityField::from_fn(g, |i| if i == 0 { 1.0 } else { 0.0 });
        let scaled: Vec<f64> = rho.values().to_vec();
        let lap = laplacian_of_potential(&plan, &rho).unwrap();
        assert_relative_eq!(lap.values[0], 4.0 * PI - 6.0 * v0 * scaled[0]);
    }

    #[test]
    fn laplacian_zero_density() {
        let plan = radial_plan(10, 1.0, 3.0, 1.0);
        let lap = laplacian_of_potential(&plan, &DensityField::zeros(plan.geometry().clone())).unwrap();
        assert!(lap.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_alpha_four_ball_center() {
        // -Lap(phi)(0) = 4 pi - 20 int_ball |y|^2 dy = 4 pi - 16 pi
        let plan = radial_plan(4000, 2.0, 4.0, 1.0);
        let rho = ball(&plan, 1.0);
        let lap = laplacian_of_potential(&plan, &rho).unwrap();
        // the innermost shell midpoint sits at dr/2, where the convolution
        // differs from its value at the origin by O(dr^2)
        assert_relative_eq!(lap.values[0], -12.0 * PI, max_relative = 1e-5);
    }

    #[test]
    fn laplacian_partial_for_soft_repulsion() {
        let plan = radial_plan(20, 1.0, 2.0, 0.5);
        let rho = ball(&plan, 0.5);
        let lap = laplacian_of_potential(&plan, &rho).unwrap();
        assert!(!lap.exact);
        let m = rho.mass();
        assert_relative_eq!(lap.values[0], -6.0 * m, max_relative = 1e-13);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let plan = radial_plan(10, 1.0, 2.0, 1.0);
        let other = Arc::new(Geometry::radial(11, 1.0).unwrap());
        assert_eq!(potential(&plan, &DensityField::zeros(other)).unwrap_err(), Error::GeometryMismatch);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn energy_scales_quadratically(c in 0.01f64..1.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = radial_plan(40, 2.0, 3.0, 1.0);
            let g = plan.geometry().clone();
            let vals: Vec<f64> = (0..40).map(|_| rng.gen()).collect();
            let rho = DensityField::new(g.clone(), vals.clone()).unwrap();
            let scaled = DensityField::new(g, vals.iter().map(|v| c * v).collect()).unwrap();
            let e1 = energy_of(&plan, &rho).unwrap().total;
            let e2 = energy_of(&plan, &scaled).unwrap().total;
            proptest::prop_assert!((e2 - c * c * e1).abs() <= 1e-12 * e1);
        }
    }
}
