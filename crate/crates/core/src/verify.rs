//! Built-in oracle suites behind `verify quick` and `verify full`.
//!
//! Each check compares a computed quantity with an independent reference
//! (closed form, brute force, or a second algorithm) and is recorded by name
//! in a [`VerificationReport`].

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{el_residual, flat_spot_measure, Phase, VerificationReport};
use crate::error::Result;
use crate::fields::{ball_density, unravel, DensityField, Geometry, GeometryKind};
use crate::kernels::{equivalent_radius, radial_kernel, singular_cell_average, KernelSpec};
use crate::optimizer::{bathtub_oracle, project_values, solve, Method, SolveOptions};
use crate::potential::{energy_of, potential, ConvolutionPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

/// Minimizer of `sum vol (rho - v)^2` over `{0 <= rho <= 1, sum rho vol = m}`
/// by enumerating which cells sit at 0, at 1, or strictly between.
/// Exponential in the cell count; intended for at most about ten cells.
pub fn brute_force_projection(v: &[f64], vols: &[f64], m: f64) -> Option<Vec<f64>> {
    let k = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut pattern = vec![0u8; k];
    loop {
        // 0 = lower bound, 1 = upper bound, 2 = free with rho = v - lambda
        let (mut free_vol, mut free_sum, mut fixed) = (0.0, 0.0, 0.0);
        for i in 0..k {
            match pattern[i] {
                1 => fixed += vols[i],
                2 => {
                    free_vol += vols[i];
                    free_sum += v[i] * vols[i];
                }
                _ => {}
            }
        }
        let candidate = if free_vol > 0.0 {
            let lambda = (free_sum + fixed - m) / free_vol;
            Some((0..k).map(|i| match pattern[i] {
                0 => 0.0,
                1 => 1.0,
                _ => v[i] - lambda,
            }).collect::<Vec<f64>>())
        } else if (fixed - m).abs() <= 1e-12 * m.max(1.0) {
            Some(pattern.iter().map(|&p| if p == 1 { 1.0 } else { 0.0 }).collect())
        } else {
            None
        };
        if let Some(rho) = candidate {
            if rho.iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)) {
                let cost: f64 = rho.iter().zip(v).zip(vols).map(|((r, x), w)| (r - x).powi(2) * w).sum();
                if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                    best = Some((cost, rho));
                }
            }
        }
        let mut pos = 0;
        loop {
            if pos == k {
                return best.map(|(_, rho)| rho);
            }
            pattern[pos] += 1;
            if pattern[pos] < 3 {
                break;
            }
            pattern[pos] = 0;
            pos += 1;
        }
    }
}

/// Largest relative deviation from `target` over support cells at least
/// `margin` cells away from the support boundary (and, on box grids, from
/// every empty cell).
pub fn interior_density_deviation(rho: &DensityField, target: f64, margin: usize, tol: f64) -> Option<f64> {
    let v = rho.values();
    let cells: Vec<usize> = match *rho.geometry().kind() {
        GeometryKind::Radial { .. } => {
            let last = v.iter().rposition(|&x| x > tol)?;
            (0..(last + 1).saturating_sub(margin)).collect()
        }
        GeometryKind::Box3D { n, .. } => (0..v.len())
            .filter(|&idx| {
                let (i, j, k) = unravel(idx, n);
                let range = |c: usize| c.saturating_sub(margin)..=(c + margin).min(n - 1);
                range(i).all(|a| range(j).all(|b| range(k).all(|c| v[crate::fields::ravel(a, b, c, n)] > tol)))
                    && [i, j, k].iter().all(|&c| c >= margin && c + margin < n)
            })
            .collect(),
    };
    cells.iter().map(|&i| (v[i] - target).abs() / target).fold(None, |acc, d| Some(acc.map_or(d, |a: f64| a.max(d))))
}

/// Pair energies `1/2 int int rho |x-y|^-1 rho` and `1/2 int int rho |x-y|^2 rho`.
pub fn ball_pair_energies(geometry: Arc<Geometry>, radius: f64) -> Result<(f64, f64)> {
    let plan = ConvolutionPlan::new(geometry.clone(), KernelSpec::coulomb(2.0)?)?;
    let e = energy_of(&plan, &ball_density(geometry, radius))?;
    Ok((e.repulsive, e.attractive))
}

/// `1/2 int int |x-y|^-1` over the unit ball, equal to the second-moment pair energy.
pub const UNIT_BALL_PAIR_ENERGY: f64 = 16.0 * PI * PI / 15.0;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn quick_checks(report: &mut VerificationReport, inject_fault: bool) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let (r, s) = (rng.gen_range(1e-3..5.0), rng.gen_range(1e-3..5.0));
        worst = worst.max(rel(radial_kernel(-1.0, r, s)?, 1.0 / r.max(s)));
        worst = worst.max(rel(radial_kernel(2.0, r, s)?, r * r + s * s));
    }
    report.check_le("radial-kernel-identities", worst, 1e-12, "sphere averages vs Newton and quadratic closed forms");

    let v = 0.125;
    let avg = singular_cell_average(-1.0, v)?;
    report.check_le("singular-average", rel(avg, 1.5 / equivalent_radius(v)), 1e-14, "mean of 1/|x| over a ball");

    let mut worst: f64 = 0.0;
    for _ in 0..300 {
        let k = rng.gen_range(1..=8);
        let vols: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.5)).collect();
        let m = rng.gen_range(0.0..1.0) * vols.iter().sum::<f64>();
        let x: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let fast = project_values(&x, &vols, m)?;
        if let Some(brute) = brute_force_projection(&x, &vols, m) {
            worst = worst.max(fast.iter().zip(&brute).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        } else {
            worst = f64::INFINITY;
        }
    }
    report.check_le("projection-brute-force", worst, 1e-9, "capped-simplex projection vs enumeration");

    let geometry = Arc::new(Geometry::centered_box(16, 0.125)?);
    let mut worst: f64 = 0.0;
    for (alpha, beta) in [(2.0, 1.0), (3.0, 1.0), (4.0, 0.5)] {
        let mut plan = ConvolutionPlan::new(geometry.clone(), KernelSpec::new(alpha, beta)?)?;
        if inject_fault {
            plan.inject_table_fault();
        }
        let rho: Vec<f64> = (0..geometry.len()).map(|_| rng.gen::<f64>()).collect();
        let fast = plan.apply(&rho);
        let direct = plan.direct_apply(&rho);
        let scale = direct.iter().map(|x| x.abs()).fold(0.0, f64::max);
        worst = worst.max(fast.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
    }
    report.check_le("fft-vs-direct", worst, 1e-10, "16^3 box, (alpha, beta) in {(2,1), (3,1), (4,0.5)}");

    let radial = Arc::new(Geometry::radial(400, 3.0)?);
    let plan = ConvolutionPlan::new(radial.clone(), KernelSpec::new(3.0, 1.0)?)?;
    let start = DensityField::from_fn(radial.clone(), |i| if i < 80 { 0.6 } else { 0.0 });
    let phi = potential(&plan, &start)?;
    let fill = bathtub_oracle(&phi, 1.0)?;
    let el = el_residual(&fill.rho, &phi, fill.threshold, 1e-3)?;
    report.check_le("bathtub-self-consistency", el.max(), 0.0, "residual of the oracle against its own threshold");

    let (d_rep, d_att) = ball_pair_energies(Arc::new(Geometry::radial(4096, 2.0)?), 1.0)?;
    report.check_le("ball-energy-radial", rel(d_rep, UNIT_BALL_PAIR_ENERGY).max(rel(d_att, UNIT_BALL_PAIR_ENERGY)), 1e-3, "unit ball, radial n=4096");
    Ok(())
}

fn full_checks(report: &mut VerificationReport) -> Result<()> {
    let opts = SolveOptions::default();
    let radial = Arc::new(Geometry::radial(2048, 4.0)?);
    let plan = ConvolutionPlan::new(radial, KernelSpec::coulomb(2.0)?)?;

    let sub = solve(&plan, 1.0, &opts)?;
    let e_sub = 1.8 * 2f64.powf(-2.0 / 3.0);
    report.check_le("alpha2-subcritical-energy", rel(sub.energy.total, e_sub), 5e-3, "m=1");
    let q = 3.0 / (2.0 * PI);
    let dev = interior_density_deviation(&sub.rho, q, 3, 1e-3).unwrap_or(f64::INFINITY);
    report.check_le("alpha2-subcritical-density", dev, 0.02, "interior density vs 3/(2 pi)");
    report.push("alpha2-subcritical-phase", sub.phase.phase == Phase::P1, sub.phase.saturated_cells as f64, 10.0, "P1 expected");
    report.check_le("alpha2-subcritical-mu", rel(sub.mu, 2.0 * e_sub), 0.02, "mu = 2 m E*");
    let el = el_residual(&sub.rho, &sub.phi, sub.mu, 1e-3)?;
    report.check_le("alpha2-subcritical-el", el.max(), 1e-3, "normalized Euler-Lagrange residual");

    let sup = solve(&plan, 4.0, &opts)?;
    let r = equivalent_radius(4.0);
    let e_sup = 0.6 * 16.0 * (1.0 / r + r * r);
    report.check_le("alpha2-supercritical-energy", rel(sup.energy.total, e_sup), 5e-3, "m=4");
    report.push(
        "alpha2-supercritical-phase",
        sup.phase.phase == Phase::P3 && sup.phase.saturated_mass_fraction >= 0.98,
        sup.phase.saturated_mass_fraction,
        0.98,
        "P3 with saturated-mass fraction >= 0.98",
    );

    let pg = solve(&plan, 1.0, &SolveOptions { method: Method::ProjectedGradient, ..opts.clone() })?;
    report.check_le("cross-method", rel(pg.energy.total, sub.energy.total), 1e-3, "projected gradient vs Frank-Wolfe");

    let small = Arc::new(Geometry::radial(512, 1.6)?);
    let plan3 = ConvolutionPlan::new(small, KernelSpec::new(3.0, 1.0)?)?;
    let energies: Vec<f64> = [0.05, 0.1, 0.2].iter().map(|&m| solve(&plan3, m, &opts).map(|r| r.energy.total)).collect::<Result<_>>()?;
    let worst = energies.windows(2).map(|w| (w[1] / w[0] / 4.0 - 1.0).abs()).fold(0.0, f64::max);
    report.check_le("small-mass-scaling", worst, 0.02, "alpha=3, E(2m)/E(m) vs 4");

    let g = Geometry::centered_box(32, 2.0 / 32.0)?;
    let u: Vec<f64> = (0..g.len()).map(|i| g.cell_center(i)[0].max(0.0)).collect();
    report.check_le("flat-spot-half-box", rel(flat_spot_measure(&g, &u, 0.0, 0.0)?, 4.0), 1e-12, "u = max(x1, 0)");
    let measures: Vec<f64> = [16usize, 32, 64, 128]
        .iter()
        .map(|&n| {
            let h = 2.0 / n as f64;
            let g = Geometry::centered_box(n, h)?;
            let u: Vec<f64> = (0..g.len()).map(|i| g.center_radius(i).powi(2)).collect();
            flat_spot_measure(&g, &u, 0.25, h * h)
        })
        .collect::<Result<_>>()?;
    let slowest = measures.windows(2).map(|w| w[0] / w[1]).fold(f64::INFINITY, f64::min);
    report.push("flat-spot-refinement", slowest >= 1.8, slowest, 1.8, "|x|^2 band measure shrink factor per doubling");

    let (d_rep, d_att) = ball_pair_energies(Arc::new(Geometry::centered_box(64, 2.5 / 64.0)?), 1.0)?;
    report.check_le("ball-energy-box", rel(d_rep, UNIT_BALL_PAIR_ENERGY).max(rel(d_att, UNIT_BALL_PAIR_ENERGY)), 1e-2, "unit ball, 64^3 box");
    Ok(())
}

/// Runs a suite. Errors inside a suite become a failed `suite-error` check.
pub fn run_verify(level: Level, inject_fault: bool) -> VerificationReport {
    let mut report = VerificationReport::new();
    report.record("level", &if level == Level::Quick { "quick" } else { "full" });
    if let Err(e) = quick_checks(&mut report, inject_fault) {
        report.push("suite-error", false, f64::NAN, 0.0, e.to_string());
    }
    if level == Level::Full {
        if let Err(e) = full_checks(&mut report) {
            report.push("suite-error", false, f64::NAN, 0.0, e.to_string());
        }
    }
    report
}
