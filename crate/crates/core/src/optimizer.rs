//! Stationary points of the energy over `{0 <= rho <= 1, sum rho vol = m}`.
//!
//! The primary method is Frank-Wolfe with the bathtub principle as linear
//! minimization oracle and an exact line search (the energy is quadratic
//! along any segment). Plain Frank-Wolfe only converges sublinearly when the
//! minimizer has fractional cells, so each outer step is followed by a few
//! conjugate-gradient steps restricted to the current face (cells strictly
//! between the bounds, mass-neutral directions). Those steps are also exact
//! line searches, so the energy decreases monotonically throughout.
//!
//! Projected gradient with backtracking is kept as an independent cross-check.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, PhaseReport, PhaseTolerances};
use crate::error::{Error, Result};
use crate::fields::{DensityField, Geometry, GeometryKind, PotentialField};
use crate::kernels::equivalent_radius;
use crate::potential::{self, ConvolutionPlan, EnergyParts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    FrankWolfe,
    ProjectedGradient,
}

/// Initial density recipes for the multi-start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StartRecipe {
    /// Ball of volume `m` at density one.
    SaturatedBall,
    /// Ball at density `q`; `None` picks `min(1, 3m / (2 pi))`.
    DilutedBall(Option<f64>),
    /// Shell of volume `m` around the radius of the saturated ball.
    Annulus,
    /// Uniform random values on a ball of volume `2m`, projected to mass `m`.
    SeededRandom,
}

impl StartRecipe {
    pub fn label(&self) -> String {
        match self {
            Self::SaturatedBall => "saturated-ball".into(),
            Self::DilutedBall(None) => "diluted-ball".into(),
            Self::DilutedBall(Some(q)) => format!("diluted-ball:{q}"),
            Self::Annulus => "annulus".into(),
            Self::SeededRandom => "seeded-random".into(),
        }
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::SaturatedBall, Self::DilutedBall(None), Self::Annulus, Self::SeededRandom]
    }
}

impl std::str::FromStr for StartRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "saturated-ball" => Ok(Self::SaturatedBall),
            "diluted-ball" => Ok(Self::DilutedBall(None)),
            "annulus" => Ok(Self::Annulus),
            "seeded-random" => Ok(Self::SeededRandom),
            other => match other.strip_prefix("diluted-ball:") {
                Some(q) => {
                    let q: f64 = q.parse().map_err(|_| Error::Config(format!("bad density in start '{other}'")))?;
                    if !(q > 0.0 && q <= 1.0) {
                        return Err(Error::Config(format!("start density must lie in (0, 1], got {q}")));
                    }
                    Ok(Self::DilutedBall(Some(q)))
                }
                None => Err(Error::Config(format!("unknown start recipe '{other}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub max_iters: usize,
    /// Stop when the Frank-Wolfe gap is at most `gap_tol * |E|`.
    pub gap_tol: f64,
    pub starts: Vec<StartRecipe>,
    pub method: Method,
    pub seed: u64,
    /// Conjugate-gradient steps on the current face per Frank-Wolfe step;
    /// zero gives classical Frank-Wolfe.
    pub face_steps: usize,
    /// Level-set tolerances used for the phase label and the mu cross-check.
    pub phase: PhaseTolerances,
    /// Run the starts on the rayon pool.
    pub parallel: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            gap_tol: 1e-6,
            starts: StartRecipe::defaults(),
            method: Method::FrankWolfe,
            seed: 0,
            face_steps: 1000,
            phase: PhaseTolerances::default(),
            parallel: true,
        }
    }
}

/// Summary of one start of a multi-start solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub label: String,
    pub energy: Option<f64>,
    pub gap: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub rho: DensityField,
    pub phi: PotentialField,
    pub energy: EnergyParts,
    /// Bathtub threshold of the final potential.
    pub mu: f64,
    pub gap: f64,
    pub phase: PhaseReport,
    pub iterations: usize,
    pub converged: bool,
    pub start: String,
    pub method: Method,
    /// Energy table over all starts, in start order.
    pub starts: Vec<StartSummary>,
    /// Energy after every outer iteration of the winning start.
    pub energy_trace: Vec<f64>,
    /// Frank-Wolfe gap after every outer iteration of the winning start.
    pub gap_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Output of the bathtub oracle.
#[derive(Debug, Clone)]
pub struct BathtubFill {
    pub rho: DensityField,
    /// Potential value at the last touched cell.
    pub threshold: f64,
    /// The only cell that may be strictly between 0 and 1.
    pub fractional_cell: Option<usize>,
}

/// Fills cells to `cap` in ascending `order` (ties by cell index) until the
/// mass is placed. Returns the density, the order value of the last touched
/// cell and that cell if it is only partially filled.
pub(crate) fn fill_in_order(order: &[f64], vols: &[f64], m: f64, cap: f64) -> Result<(Vec<f64>, f64, Option<usize>)> {
    let capacity: f64 = vols.iter().sum::<f64>() * cap;
    if !(m >= 0.0) || m > capacity * (1.0 + 1e-12) {
        return Err(Error::InfeasibleMass { mass: m, capacity });
    }
    let mut idx: Vec<usize> = (0..order.len()).collect();
    idx.sort_by(|&a, &b| order[a].total_cmp(&order[b]).then(a.cmp(&b)));
    let mut rho = vec![0.0; order.len()];
    let mut remaining = m;
    let mut threshold = idx.first().map_or(0.0, |&i| order[i]);
    let mut fractional = None;
    for &i in &idx {
        if remaining <= 0.0 {
            break;
        }
        threshold = order[i];
        let room = cap * vols[i];
        if remaining >= room {
            rho[i] = cap;
            remaining -= room;
        } else {
            rho[i] = remaining / vols[i];
            fractional = Some(i);
            remaining = 0.0;
        }
    }
    Ok((rho, threshold, fractional))
}

/// Minimizer of `sum phi rho vol` over the feasible set: fills the sublevel
/// sets of `phi` to capacity. Ties in `phi` are broken by cell index.
pub fn bathtub_oracle(phi: &PotentialField, m: f64) -> Result<BathtubFill> {
    let g = phi.geometry();
    let (values, threshold, fractional_cell) = fill_in_order(phi.phi(), g.volumes(), m, 1.0)?;
    Ok(BathtubFill { rho: DensityField::new(g.clone(), values)?, threshold, fractional_cell })
}

/// Projection of `v` onto `{0 <= rho <= 1, sum rho vol = m}` in the
/// volume-weighted norm (the Euclidean norm for equal cells):
/// `rho = clamp(v - lambda, 0, 1)` with `lambda` found by bisection.
pub fn capped_simplex_project(v: &[f64], geometry: &Arc<Geometry>, m: f64) -> Result<DensityField> {
    let values = project_values(v, geometry.volumes(), m)?;
    DensityField::new(geometry.clone(), values)
}

/// Slice form of [`capped_simplex_project`].
pub fn project_values(v: &[f64], vols: &[f64], m: f64) -> Result<Vec<f64>> {
    let capacity: f64 = vols.iter().sum();
    if !(m >= 0.0) || m > capacity * (1.0 + 1e-12) {
        return Err(Error::InfeasibleMass { mass: m, capacity });
    }
    if v.len() != vols.len() {
        return Err(Error::GeometryMismatch);
    }
    let mass_at = |lambda: f64| -> f64 { v.iter().zip(vols).map(|(x, w)| (x - lambda).clamp(0.0, 1.0) * w).sum() };
    let vmin = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // mass_at(lo) = capacity >= m, mass_at(hi) = 0 <= m
    let (mut lo, mut hi) = (vmin - 1.0, vmax);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let mm = mass_at(mid);
        if (mm - m).abs() <= 1e-12 * m.max(f64::MIN_POSITIVE) {
            lo = mid;
            hi = mid;
            break;
        }
        if mm > m {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
    }
    let mut lambda = 0.5 * (lo + hi);
    // mass is piecewise linear in lambda: solve exactly on the free set
    let (mut free_vol, mut free_sum, mut upper) = (0.0, 0.0, 0.0);
    for (x, w) in v.iter().zip(vols) {
        let r = x - lambda;
        if r >= 1.0 {
            upper += w;
        } else if r > 0.0 {
            free_vol += w;
            free_sum += x * w;
        }
    }
    if free_vol > 0.0 {
        let exact = (free_sum + upper - m) / free_vol;
        if (mass_at(exact) - m).abs() <= (mass_at(lambda) - m).abs() {
            lambda = exact;
        }
    }
    Ok(v.iter().map(|x| (x - lambda).clamp(0.0, 1.0)).collect())
}

/// Builds the initial density for a recipe.
pub fn initial_density(geometry: &Arc<Geometry>, m: f64, recipe: StartRecipe, seed: u64) -> Result<DensityField> {
    let vols = geometry.volumes();
    let radius: Vec<f64> = (0..geometry.len()).map(|i| geometry.center_radius(i)).collect();
    let values = match recipe {
        StartRecipe::SaturatedBall => fill_in_order(&radius, vols, m, 1.0)?.0,
        StartRecipe::DilutedBall(q) => {
            let q = q.unwrap_or_else(|| (3.0 * m / (2.0 * PI)).min(1.0));
            fill_in_order(&radius, vols, m, q)?.0
        }
        StartRecipe::Annulus => {
            let center = equivalent_radius(m);
            let order: Vec<f64> = radius.iter().map(|r| (r - center).abs()).collect();
            fill_in_order(&order, vols, m, 1.0)?.0
        }
        StartRecipe::SeededRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reach = equivalent_radius(2.0 * m);
            let raw: Vec<f64> = radius.iter().map(|&r| if r <= reach { rng.gen::<f64>() } else { 0.0 }).collect();
            project_values(&raw, vols, m)?
        }
    };
    DensityField::new(geometry.clone(), values)
}

struct Run {
    rho: Vec<f64>,
    iterations: usize,
    converged: bool,
    gap: f64,
    energy_trace: Vec<f64>,
    gap_trace: Vec<f64>,
    warnings: Vec<String>,
}

fn half_dot(a: &[f64], b: &[f64], vols: &[f64]) -> f64 {
    0.5 * potential::weighted_dot(a, b, vols)
}

fn checked_energy(rho: &[f64], phi: &[f64], vols: &[f64]) -> Result<f64> {
    let e = half_dot(rho, phi, vols);
    if !e.is_finite() {
        return Err(Error::NonFinite(
            "energy is not finite; the domain may be too small or a kernel table is corrupt".into(),
        ));
    }
    Ok(e)
}

/// Frank-Wolfe gap `sum phi (rho - s) vol` against the bathtub fill `s`.
fn fw_gap(rho: &[f64], phi: &[f64], vols: &[f64], m: f64) -> Result<(f64, Vec<f64>)> {
    let (s, _, _) = fill_in_order(phi, vols, m, 1.0)?;
    let gap = rho.iter().zip(&s).zip(phi).zip(vols).map(|(((r, s), p), v)| p * (r - s) * v).sum();
    Ok((gap, s))
}

fn run_frank_wolfe(plan: &ConvolutionPlan, m: f64, start: Vec<f64>, opts: &SolveOptions) -> Result<Run> {
    let vols = plan.geometry().volumes();
    let mut rho = start;
    let mut energy_trace = Vec::new();
    let mut gap_trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut gap;
    loop {
        let phi = plan.apply(&rho);
        let e = checked_energy(&rho, &phi, vols)?;
        let (g, s) = fw_gap(&rho, &phi, vols, m)?;
        gap = g;
        energy_trace.push(e);
        gap_trace.push(g);
        if g <= opts.gap_tol * e.abs() {
            converged = true;
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        iterations += 1;
        let d: Vec<f64> = s.iter().zip(&rho).map(|(s, r)| s - r).collect();
        let phi_d = plan.apply(&d);
        let curvature = potential::weighted_dot(&d, &phi_d, vols);
        let step = if curvature > 0.0 { (g / curvature).clamp(0.0, 1.0) } else { 1.0 };
        let mut phi = phi;
        for i in 0..rho.len() {
            rho[i] = (rho[i] + step * d[i]).clamp(0.0, 1.0);
            phi[i] += step * phi_d[i];
        }
        restore_mass(&mut rho, vols, m);
        if opts.face_steps > 0 {
            face_conjugate_gradient(plan, &mut rho, &mut phi, m, opts.face_steps);
        }
    }
    Ok(Run { rho, iterations, converged, gap, energy_trace, gap_trace, warnings: Vec::new() })
}

/// Conjugate gradient on the face `{0 < rho < 1}` with mass-neutral
/// directions. A step that reaches a bound pins that cell and restarts.
/// Directions of non-positive curvature are followed to the boundary.
fn face_conjugate_gradient(plan: &ConvolutionPlan, rho: &mut [f64], phi: &mut [f64], m: f64, budget: usize) {
    const EDGE: f64 = 1e-13;
    let vols = plan.geometry().volumes();
    let n = rho.len();
    let mut used = 0;
    'restart: while used < budget {
        let face: Vec<usize> = (0..n).filter(|&i| rho[i] > EDGE && rho[i] < 1.0 - EDGE).collect();
        if face.len() < 2 {
            return;
        }
        let face_vol: f64 = face.iter().map(|&i| vols[i]).sum();
        let project = |phi: &[f64]| -> Vec<f64> {
            let mean = face.iter().map(|&i| phi[i] * vols[i]).sum::<f64>() / face_vol;
            face.iter().map(|&i| phi[i] - mean).collect()
        };
        let norm2 = |g: &[f64]| -> f64 { face.iter().zip(g).map(|(&i, x)| x * x * vols[i]).sum() };
        let scale = face.iter().map(|&i| phi[i].abs() * vols[i]).sum::<f64>() / face_vol;
        let tiny = (1e-12 * scale).powi(2) * face_vol;
        let mut g = project(phi);
        let mut gg = norm2(&g);
        if gg <= tiny {
            return;
        }
        let mut d: Vec<f64> = g.iter().map(|x| -x).collect();
        let mut full = vec![0.0; n];
        loop {
            for (k, &i) in face.iter().enumerate() {
                full[i] = d[k];
            }
            let hd = plan.apply(&full);
            used += 1;
            let curvature: f64 = face.iter().zip(&d).map(|(&i, x)| x * hd[i] * vols[i]).sum();
            let slope: f64 = face.iter().zip(&d).zip(&g).map(|((&i, x), y)| x * y * vols[i]).sum();
            if slope >= 0.0 {
                // lost descent, restart from steepest descent
                continue 'restart;
            }
            let t_star = if curvature > 0.0 { -slope / curvature } else { f64::INFINITY };
            let mut t_max = f64::INFINITY;
            let mut hit = None;
            for (k, &i) in face.iter().enumerate() {
                let limit = if d[k] < 0.0 {
                    rho[i] / -d[k]
                } else if d[k] > 0.0 {
                    (1.0 - rho[i]) / d[k]
                } else {
                    continue;
                };
                if limit < t_max {
                    t_max = limit;
                    hit = Some((i, d[k] > 0.0));
                }
            }
            let t = t_star.min(t_max);
            if !t.is_finite() {
                return;
            }
            for (k, &i) in face.iter().enumerate() {
                rho[i] = (rho[i] + t * d[k]).clamp(0.0, 1.0);
            }
            for i in 0..n {
                phi[i] += t * hd[i];
            }
            if t_max <= t_star {
                if let Some((i, upper)) = hit {
                    rho[i] = if upper { 1.0 } else { 0.0 };
                }
                restore_mass(rho, vols, m);
                continue 'restart;
            }
            restore_mass(rho, vols, m);
            if used >= budget {
                return;
            }
            let g_new = project(phi);
            let gg_new = norm2(&g_new);
            if gg_new <= tiny {
                return;
            }
            let cross: f64 = face.iter().zip(&g_new).zip(&g).map(|((&i, a), b)| a * b * vols[i]).sum();
            let beta = ((gg_new - cross) / gg).max(0.0);
            for k in 0..d.len() {
                d[k] = -g_new[k] + beta * d[k];
            }
            g = g_new;
            gg = gg_new;
        }
    }
}

/// Removes rounding drift of the mass by a uniform shift of the cells that
/// can absorb it, preferring cells strictly inside the bounds.
fn restore_mass(rho: &mut [f64], vols: &[f64], m: f64) {
    for _ in 0..8 {
        let mass: f64 = rho.iter().zip(vols).map(|(r, v)| r * v).sum();
        let defect = m - mass;
        if defect.abs() <= 1e-15 * m {
            return;
        }
        let movable = |r: f64| if defect > 0.0 { r < 1.0 } else { r > 0.0 };
        let interior = |r: f64| r > 0.0 && r < 1.0;
        let mut room: f64 = rho.iter().zip(vols).filter(|(r, _)| interior(**r)).map(|(_, v)| v).sum();
        let use_interior = room > 0.0;
        if !use_interior {
            room = rho.iter().zip(vols).filter(|(r, _)| movable(**r)).map(|(_, v)| v).sum();
        }
        if room <= 0.0 {
            return;
        }
        let shift = defect / room;
        for r in rho.iter_mut() {
            if (use_interior && interior(*r)) || (!use_interior && movable(*r)) {
                *r = (*r + shift).clamp(0.0, 1.0);
            }
        }
    }
}

fn run_projected_gradient(plan: &ConvolutionPlan, m: f64, start: Vec<f64>, opts: &SolveOptions) -> Result<Run> {
    let vols = plan.geometry().volumes();
    let mut rho = start;
    let mut phi = plan.apply(&rho);
    let ones = vec![1.0; rho.len()];
    let lipschitz = plan.apply(&ones).into_iter().fold(0.0, f64::max);
    let mut tau = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };
    let mut energy_trace = Vec::new();
    let mut gap_trace = Vec::new();
    let mut warnings = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut gap;
    loop {
        let e = checked_energy(&rho, &phi, vols)?;
        gap = fw_gap(&rho, &phi, vols, m)?.0;
        energy_trace.push(e);
        gap_trace.push(gap);
        if gap <= opts.gap_tol * e.abs() {
            converged = true;
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        iterations += 1;
        loop {
            let trial: Vec<f64> = rho.iter().zip(&phi).map(|(r, p)| r - tau * p).collect();
            let y = project_values(&trial, vols, m)?;
            let d: Vec<f64> = y.iter().zip(&rho).map(|(a, b)| a - b).collect();
            let linear = potential::weighted_dot(&phi, &d, vols);
            let dist2 = potential::weighted_dot(&d, &d, vols);
            if dist2 == 0.0 {
                break;
            }
            let phi_d = plan.apply(&d);
            let quad = 0.5 * potential::weighted_dot(&d, &phi_d, vols);
            if linear + quad <= linear + dist2 / (2.0 * tau) {
                rho = y;
                for (p, q) in phi.iter_mut().zip(&phi_d) {
                    *p += q;
                }
                tau *= 1.5;
                break;
            }
            tau *= 0.5;
            if tau < 1e-300 {
                warnings.push("projected gradient step underflow".into());
                return Ok(Run { rho, iterations, converged: false, gap, energy_trace, gap_trace, warnings });
            }
        }
        if iterations % 50 == 0 {
            phi = plan.apply(&rho);
        }
    }
    Ok(Run { rho, iterations, converged, gap, energy_trace, gap_trace, warnings })
}

/// Runs one method from a given start (no multi-start).
pub fn solve_from(plan: &ConvolutionPlan, m: f64, start: &DensityField, opts: &SolveOptions) -> Result<SolveResult> {
    check_mass(plan, m)?;
    let run = run_method(plan, m, start.values().to_vec(), opts)?;
    let summary = StartSummary {
        label: "given".into(),
        energy: run.energy_trace.last().copied(),
        gap: Some(run.gap),
        iterations: run.iterations,
        converged: run.converged,
        error: None,
    };
    finalize(plan, m, run, "given".into(), vec![summary], opts)
}

fn run_method(plan: &ConvolutionPlan, m: f64, start: Vec<f64>, opts: &SolveOptions) -> Result<Run> {
    match opts.method {
        Method::FrankWolfe => run_frank_wolfe(plan, m, start, opts),
        Method::ProjectedGradient => run_projected_gradient(plan, m, start, opts),
    }
}

fn check_mass(plan: &ConvolutionPlan, m: f64) -> Result<()> {
    let capacity = plan.geometry().total_volume();
    if !(m > 0.0) {
        return Err(Error::Config("mass must be positive".into()));
    }
    if m > capacity {
        return Err(Error::InfeasibleMass { mass: m, capacity });
    }
    Ok(())
}

/// Multi-start solve with the method in `opts`; the lowest energy wins,
/// ties resolved by start order.
pub fn solve(plan: &ConvolutionPlan, m: f64, opts: &SolveOptions) -> Result<SolveResult> {
    check_mass(plan, m)?;
    if opts.starts.is_empty() {
        return Err(Error::Config("at least one start recipe is required".into()));
    }
    let one = |(k, recipe): (usize, &StartRecipe)| -> Result<Run> {
        let start = initial_density(plan.geometry(), m, *recipe, opts.seed.wrapping_add(k as u64))?;
        run_method(plan, m, start.into_values(), opts)
    };
    let runs: Vec<Result<Run>> = if opts.parallel {
        opts.starts.par_iter().enumerate().map(one).collect()
    } else {
        opts.starts.iter().enumerate().map(one).collect()
    };
    let mut summaries = Vec::new();
    let mut best: Option<(usize, Run)> = None;
    let mut first_error = None;
    for (k, run) in runs.into_iter().enumerate() {
        let label = opts.starts[k].label();
        match run {
            Ok(run) => {
                let e = *run.energy_trace.last().unwrap();
                summaries.push(StartSummary {
                    label,
                    energy: Some(e),
                    gap: Some(run.gap),
                    iterations: run.iterations,
                    converged: run.converged,
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((_, b)) => e < *b.energy_trace.last().unwrap(),
                };
                if better {
                    best = Some((k, run));
                }
            }
            Err(err) => {
                if let Error::NonFinite(_) = err {
                    return Err(err);
                }
                summaries.push(StartSummary {
                    label,
                    energy: None,
                    gap: None,
                    iterations: 0,
                    converged: false,
                    error: Some(err.to_string()),
                });
                first_error.get_or_insert(err);
            }
        }
    }
    match best {
        Some((k, run)) => finalize(plan, m, run, opts.starts[k].label(), summaries, opts),
        None => Err(first_error.unwrap()),
    }
}

/// Frank-Wolfe multi-start solve.
pub fn frank_wolfe(plan: &ConvolutionPlan, m: f64, opts: &SolveOptions) -> Result<SolveResult> {
    solve(plan, m, &SolveOptions { method: Method::FrankWolfe, ..opts.clone() })
}

/// Projected-gradient multi-start solve.
pub fn projected_gradient(plan: &ConvolutionPlan, m: f64, opts: &SolveOptions) -> Result<SolveResult> {
    solve(plan, m, &SolveOptions { method: Method::ProjectedGradient, ..opts.clone() })
}

fn finalize(
    plan: &ConvolutionPlan,
    m: f64,
    run: Run,
    start: String,
    starts: Vec<StartSummary>,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    let geometry = plan.geometry().clone();
    let rho = DensityField::new(geometry.clone(), run.rho)?;
    let phi = potential::potential(plan, &rho)?;
    let energy = potential::energy(&rho, &phi)?;
    let fill = bathtub_oracle(&phi, m)?;
    let mu = fill.threshold;
    let phase = analysis::phase_classify(&rho, &opts.phase);
    let mut warnings = run.warnings;
    if !run.converged {
        warnings.push(format!(
            "not converged after {} iterations: gap {:.3e} > {:.1e} |E|",
            run.iterations, run.gap, opts.gap_tol
        ));
    }
    let estimate = analysis::chemical_potential_estimate(&rho, &phi, opts.phase.density_tol)?;
    if (estimate.value - mu).abs() > 0.01 * mu.abs() {
        warnings.push(format!(
            "bathtub threshold {mu:.6e} and level-set estimate {:.6e} of mu differ by more than 1%",
            estimate.value
        ));
    }
    if touches_outer_layer(&rho, opts.phase.density_tol) {
        warnings.push("mass touches the outermost cell layer; enlarge the domain".into());
    }
    Ok(SolveResult {
        rho,
        phi,
        energy,
        mu,
        gap: run.gap,
        phase,
        iterations: run.iterations,
        converged: run.converged,
        start,
        method: opts.method,
        starts,
        energy_trace: run.energy_trace,
        gap_trace: run.gap_trace,
        warnings,
    })
}

fn touches_outer_layer(rho: &DensityField, tol: f64) -> bool {
    let v = rho.values();
    match *rho.geometry().kind() {
        GeometryKind::Radial { n, .. } => v[n - 1] > tol,
        GeometryKind::Box3D { n, .. } => (0..v.len()).any(|idx| {
            let (i, j, k) = crate::fields::unravel(idx, n);
            let edge = |a: usize| a == 0 || a == n - 1;
            (edge(i) || edge(j) || edge(k)) && v[idx] > tol
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use approx::assert_relative_eq;

    fn unit_cells(n: usize) -> Arc<Geometry> {
        // radial shells have unequal volumes; use 1x1x1 boxes stacked as a cube of side 1
        assert!(n == 1 || n == 8 || n == 27);
        let side = (n as f64).cbrt().round() as usize;
        Arc::new(Geometry::centered_box(side, 1.0).unwrap())
    }

    #[test]
    fn fill_example_from_sorting() {
        let vols = [1.0, 1.0, 1.0];
        let (rho, t, frac) = fill_in_order(&[3.0, 1.0, 2.0], &vols, 1.5, 1.0).unwrap();
        assert_eq!(rho, vec![0.0, 1.0, 0.5]);
        assert_eq!(t, 2.0);
        assert_eq!(frac, Some(2));
    }

    #[test]
    fn fill_ties_follow_cell_index() {
        let vols = [1.0; 4];
        let (rho, t, _) = fill_in_order(&[5.0; 4], &vols, 2.0, 1.0).unwrap();
        assert_eq!(rho, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(t, 5.0);
    }

    #[test]
    fn fill_rejects_infeasible_mass() {
        assert!(matches!(fill_in_order(&[1.0, 2.0], &[1.0, 1.0], 2.5, 1.0), Err(Error::InfeasibleMass { .. })));
    }

    #[test]
    fn bathtub_fills_sublevel_ball() {
        let g = Arc::new(Geometry::radial(100, 1.0).unwrap());
        let spec = KernelSpec::coulomb(2.0).unwrap();
        let plan = ConvolutionPlan::new(g.clone(), spec).unwrap();
        let rho0 = DensityField::from_fn(g.clone(), |i| if i < 10 { 1.0 } else { 0.0 });
        // attraction-dominated potential of a concentrated density increases with r
        let mut phi = potential::potential(&plan, &rho0).unwrap();
        phi.phi = (0..100).map(|i| g.center_radius(i)).collect();
        let m: f64 = g.volumes()[..40].iter().sum();
        let fill = bathtub_oracle(&phi, m).unwrap();
        for i in 0..100 {
            let expected = if i < 40 { 1.0 } else { 0.0 };
            assert!((fill.rho.values()[i] - expected).abs() < 1e-9);
        }
        assert_relative_eq!(fill.rho.mass(), m, max_relative = 1e-13);
    }

    #[test]
    fn projection_examples() {
        let g = Arc::new(Geometry::box3d(1, 1.0, [0.0; 3]).unwrap());
        let vols = [1.0, 1.0, 1.0];
        let p = project_values(&[0.5, 1.7, -0.2], &vols, 1.5).unwrap();
        for (a, b) in p.iter().zip([0.5, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = project_values(&[10.0, 10.0, 10.0], &vols, 1.5).unwrap();
        for a in p {
            assert!((a - 0.5).abs() < 1e-12);
        }
        assert!(capped_simplex_project(&[0.5], &g, 2.0).is_err());
        let _ = unit_cells(8);
    }

    #[test]
    fn projection_preserves_mass_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..50);
            let vols: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
            let cap: f64 = vols.iter().sum();
            let m = rng.gen_range(0.0..1.0) * cap;
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = project_values(&v, &vols, m).unwrap();
            let mass: f64 = p.iter().zip(&vols).map(|(a, b)| a * b).sum();
            assert!((mass - m).abs() <= 1e-12 * m.max(1e-300), "mass {mass} vs {m}");
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn starts_are_feasible() {
        for g in [Geometry::radial(200, 2.0).unwrap(), Geometry::centered_box(12, 0.25).unwrap()] {
            let g = Arc::new(g);
            for recipe in StartRecipe::defaults() {
                let rho = initial_density(&g, 1.3, recipe, 9).unwrap();
                assert_relative_eq!(rho.mass(), 1.3, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn start_recipe_parsing() {
        assert_eq!("annulus".parse::<StartRecipe>().unwrap(), StartRecipe::Annulus);
        assert_eq!("diluted-ball:0.3".parse::<StartRecipe>().unwrap(), StartRecipe::DilutedBall(Some(0.3)));
        assert!("diluted-ball:2".parse::<StartRecipe>().is_err());
        assert!("cube".parse::<StartRecipe>().is_err());
        for r in StartRecipe::defaults() {
            assert_eq!(r.label().parse::<StartRecipe>().unwrap(), r);
        }
    }

    fn alpha2_plan(n: usize, r_max: f64) -> ConvolutionPlan {
        let g = Arc::new(Geometry::radial(n, r_max).unwrap());
        ConvolutionPlan::new(g, KernelSpec::coulomb(2.0).unwrap()).unwrap()
    }

    #[test]
    fn frank_wolfe_monotone_and_feasible() {
        let plan = alpha2_plan(256, 2.0);
        let opts = SolveOptions { parallel: false, ..Default::default() };
        let res = frank_wolfe(&plan, 1.0, &opts).unwrap();
        assert!(res.converged, "{:?}", res.warnings);
        for w in res.energy_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "energy increased {} -> {}", w[0], w[1]);
        }
        for g in &res.gap_trace {
            assert!(*g >= -1e-12 * res.energy.total.abs());
        }
        assert_relative_eq!(res.rho.mass(), 1.0, max_relative = 1e-12);
        let e_star = 1.8 * 2f64.powf(-2.0 / 3.0);
        assert!((res.energy.total - e_star).abs() < 5e-3 * e_star, "energy {}", res.energy.total);
    }

    #[test]
    fn classical_frank_wolfe_still_descends() {
        let plan = alpha2_plan(128, 2.0);
        let opts = SolveOptions { face_steps: 0, max_iters: 200, parallel: false, ..Default::default() };
        let res = frank_wolfe(&plan, 1.0, &opts).unwrap();
        for w in res.energy_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn exact_solution_is_a_fixed_point() {
        let plan = alpha2_plan(512, 2.0);
        let opts = SolveOptions { parallel: false, ..Default::default() };
        let first = frank_wolfe(&plan, 1.0, &opts).unwrap();
        let again = solve_from(&plan, 1.0, &first.rho, &opts).unwrap();
        assert_eq!(again.iterations, 0);
        assert_eq!(again.rho.values(), first.rho.values());
    }

    #[test]
    fn projected_gradient_single_cell() {
        let g = Arc::new(Geometry::box3d(1, 1.0, [0.0; 3]).unwrap());
        let plan = ConvolutionPlan::new(g, KernelSpec::coulomb(2.0).unwrap()).unwrap();
        let opts = SolveOptions { parallel: false, ..Default::default() };
        let res = projected_gradient(&plan, 0.4, &opts).unwrap();
        assert_relative_eq!(res.rho.values()[0], 0.4, max_relative = 1e-14);
        assert_eq!(res.iterations, 0);
    }

    #[test]
    fn zero_iterations_returns_start() {
        let plan = alpha2_plan(64, 2.0);
        let g = plan.geometry().clone();
        let start = initial_density(&g, 1.0, StartRecipe::SaturatedBall, 0).unwrap();
        for method in [Method::FrankWolfe, Method::ProjectedGradient] {
            let opts = SolveOptions { max_iters: 0, method, ..Default::default() };
            let res = solve_from(&plan, 1.0, &start, &opts).unwrap();
            assert_eq!(res.rho.values(), start.values());
            assert!(res.gap > 0.0);
            assert!(!res.converged);
        }
    }

    #[test]
    fn rejects_bad_mass() {
        let plan = alpha2_plan(16, 1.0);
        let opts = SolveOptions::default();
        assert!(matches!(frank_wolfe(&plan, 0.0, &opts), Err(Error::Config(_))));
        assert!(matches!(frank_wolfe(&plan, 100.0, &opts), Err(Error::InfeasibleMass { .. })));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn bathtub_has_at_most_one_fractional_cell(seed in 0u64..10_000, frac in 0.01f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..60);
            let phi: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vols: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            let m = frac * vols.iter().sum::<f64>();
            let (rho, _, _) = fill_in_order(&phi, &vols, m, 1.0).unwrap();
            let fractional = rho.iter().filter(|&&r| r > 0.0 && r < 1.0).count();
            proptest::prop_assert!(fractional <= 1);
            let mass: f64 = rho.iter().zip(&vols).map(|(a, b)| a * b).sum();
            proptest::prop_assert!((mass - m).abs() <= 1e-12 * m);
        }
    }
}
