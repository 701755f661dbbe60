//! Solves, mass sweeps and critical-mass bisection driven by a [`Config`].

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{diameter_ratio, solution_report, Phase, ReportTolerances, VerificationReport};
use crate::config::{Boundary, Config};
use crate::error::{Error, Result};
use crate::optimizer::{solve, SolveOptions, SolveResult};
use crate::potential::ConvolutionPlan;

pub fn build_plan(cfg: &Config, m: f64) -> Result<ConvolutionPlan> {
    ConvolutionPlan::new(cfg.geometry(m)?, cfg.kernel()?)
}

/// Multi-start solve plus the analysis battery.
pub fn run_solve(cfg: &Config) -> Result<(SolveResult, VerificationReport)> {
    cfg.validate()?;
    let plan = build_plan(cfg, cfg.m)?;
    let result = solve(&plan, cfg.m, &cfg.solve_options())?;
    let report = solution_report(&result, cfg.m, cfg.alpha, &ReportTolerances::default())?;
    Ok((result, report))
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub alpha: f64,
    pub m: f64,
    pub energy: f64,
    pub mu: f64,
    pub gap: f64,
    pub phase: Option<Phase>,
    pub saturated_volume: f64,
    pub intermediate_volume: f64,
    pub diameter_ratio: f64,
    pub start: String,
    pub grid: String,
    pub wall_time: f64,
    /// Lowest energy among the rows with the same mass.
    pub best: bool,
    /// `ok`, `not-converged`, or `error: <message>`.
    pub status: String,
}

pub const SWEEP_COLUMNS: [&str; 14] = [
    "alpha",
    "m",
    "energy",
    "mu",
    "gap",
    "phase",
    "saturated_volume",
    "intermediate_volume",
    "diameter_ratio",
    "start",
    "grid",
    "wall_time",
    "best",
    "status",
];

impl SweepRecord {
    fn from_result(cfg: &Config, m: f64, res: &SolveResult, seconds: f64) -> Self {
        Self {
            alpha: cfg.alpha,
            m,
            energy: res.energy.total,
            mu: res.mu,
            gap: res.gap,
            phase: Some(res.phase.phase),
            saturated_volume: res.phase.saturated_volume,
            intermediate_volume: res.phase.intermediate_volume,
            diameter_ratio: diameter_ratio(&res.rho, m, cfg.density_tol),
            start: res.start.clone(),
            grid: res.rho.geometry().descriptor(),
            wall_time: if cfg.wall_time { seconds } else { 0.0 },
            best: false,
            status: if res.converged { "ok".into() } else { "not-converged".into() },
        }
    }

    fn failed(cfg: &Config, m: f64, start: String, err: &Error) -> Self {
        Self {
            alpha: cfg.alpha,
            m,
            energy: f64::NAN,
            mu: f64::NAN,
            gap: f64::NAN,
            phase: None,
            saturated_volume: f64::NAN,
            intermediate_volume: f64::NAN,
            diameter_ratio: f64::NAN,
            start,
            grid: cfg.grid.to_string(),
            wall_time: 0.0,
            best: false,
            status: format!("error: {err}"),
        }
    }

    pub fn is_error(&self) -> bool {
        self.status.starts_with("error")
    }

    pub fn converged(&self) -> bool {
        self.status == "ok"
    }
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_sweep_csv<W: Write>(out: &mut W, records: &[SweepRecord]) -> Result<()> {
    writeln!(out, "{}", SWEEP_COLUMNS.join(","))?;
    for r in records {
        let phase = r.phase.map_or(String::new(), |p| p.to_string());
        let row = [
            num(r.alpha),
            num(r.m),
            num(r.energy),
            num(r.mu),
            num(r.gap),
            phase,
            num(r.saturated_volume),
            num(r.intermediate_volume),
            num(r.diameter_ratio),
            csv_field(&r.start),
            csv_field(&r.grid),
            num(r.wall_time),
            (r.best as u8).to_string(),
            csv_field(&r.status),
        ];
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Solves every (mass, start) pair independently. Rows are ordered by mass,
/// then by position in the start list.
pub fn run_sweep(cfg: &Config, masses: &[f64]) -> Result<Vec<SweepRecord>> {
    cfg.validate()?;
    let kernel = cfg.kernel()?;
    let jobs: Vec<(usize, usize)> =
        (0..masses.len()).flat_map(|i| (0..cfg.starts.len()).map(move |k| (i, k))).collect();
    let rows = pool(cfg.workers)?.install(|| {
        let plans: Vec<Result<ConvolutionPlan>> = masses
            .par_iter()
            .map(|&m| ConvolutionPlan::new(cfg.geometry(m)?, kernel))
            .collect();
        jobs.par_iter()
            .map(|&(i, k)| {
                let m = masses[i];
                let recipe = cfg.starts[k];
                let opts = SolveOptions {
                    starts: vec![recipe],
                    seed: cfg.seed.wrapping_add(k as u64),
                    parallel: false,
                    ..cfg.solve_options()
                };
                let clock = Instant::now();
                let outcome = plans[i].as_ref().map_err(Clone::clone).and_then(|plan| solve(plan, m, &opts));
                let record = match outcome {
                    Ok(res) => SweepRecord::from_result(cfg, m, &res, clock.elapsed().as_secs_f64()),
                    Err(e) => SweepRecord::failed(cfg, m, recipe.label(), &e),
                };
                (i, k, record)
            })
            .collect::<Vec<_>>()
    });
    let mut rows = rows;
    rows.sort_by(|a, b| masses[a.0].total_cmp(&masses[b.0]).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (pos, (i, _, r)) in rows.iter().enumerate() {
        if r.is_error() {
            continue;
        }
        match best.get(i) {
            Some(&b) if rows[b].2.energy <= r.energy => {}
            _ => {
                best.insert(*i, pos);
            }
        }
    }
    for pos in best.into_values() {
        rows[pos].2.best = true;
    }
    Ok(rows.into_iter().map(|(_, _, r)| r).collect())
}

/// Bisection bracket for a phase boundary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalResult {
    pub boundary: String,
    pub lo: f64,
    pub hi: f64,
    /// Every probe in evaluation order, labelled by its winning start.
    pub probes: Vec<SweepRecord>,
}

impl CriticalResult {
    pub fn contains(&self, m: f64) -> bool {
        self.lo <= m && m <= self.hi
    }

    pub fn overlaps(&self, other: &CriticalResult) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

/// Multi-start probes cached by mass, so both boundaries can share endpoints.
pub struct Prober<'a> {
    cfg: &'a Config,
    cache: BTreeMap<u64, SweepRecord>,
}

impl<'a> Prober<'a> {
    pub fn new(cfg: &'a Config) -> Self {
        Self { cfg, cache: BTreeMap::new() }
    }

    pub fn probe(&mut self, m: f64) -> Result<SweepRecord> {
        if let Some(r) = self.cache.get(&m.to_bits()) {
            return Ok(r.clone());
        }
        let plan = build_plan(self.cfg, m)?;
        let clock = Instant::now();
        let res = solve(&plan, m, &self.cfg.solve_options())?;
        let mut record = SweepRecord::from_result(self.cfg, m, &res, clock.elapsed().as_secs_f64());
        record.best = true;
        self.cache.insert(m.to_bits(), record.clone());
        Ok(record)
    }
}

fn beyond(boundary: Boundary, phase: Option<Phase>) -> bool {
    match boundary {
        Boundary::C1 => phase != Some(Phase::P1),
        Boundary::C2 => phase == Some(Phase::P3),
    }
}

/// Bisects `[lo, hi]` until its width is at most `width`. The endpoints must
/// fall on opposite sides of the boundary.
pub fn run_critical(prober: &mut Prober<'_>, boundary: Boundary, lo: f64, hi: f64, width: f64) -> Result<CriticalResult> {
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::BracketInvalid(format!("need 0 < lo < hi, got [{lo}, {hi}]")));
    }
    let name = match boundary {
        Boundary::C1 => "c1",
        Boundary::C2 => "c2",
    };
    let mut probes = Vec::new();
    let a = prober.probe(lo)?;
    let b = prober.probe(hi)?;
    let (pa, pb) = (beyond(boundary, a.phase), beyond(boundary, b.phase));
    probes.push(a.clone());
    probes.push(b.clone());
    if pa || !pb {
        let label = |p: Option<Phase>| p.map_or("none".into(), |p| p.to_string());
        return Err(Error::BracketInvalid(format!(
            "{name}: endpoints m={lo} ({}) and m={hi} ({}) do not straddle the boundary",
            label(a.phase),
            label(b.phase)
        )));
    }
    let (mut lo, mut hi) = (lo, hi);
    while hi - lo > width {
        let mid = 0.5 * (lo + hi);
        let r = prober.probe(mid)?;
        if beyond(boundary, r.phase) {
            hi = mid;
        } else {
            lo = mid;
        }
        probes.push(r);
    }
    Ok(CriticalResult { boundary: name.into(), lo, hi, probes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GridSpec;

    fn small_cfg() -> Config {
        Config { grid: GridSpec::Radial { n: 256, r_max: Some(2.5) }, workers: 1, ..Default::default() }
    }

    #[test]
    fn sweep_rows_are_ordered_and_flag_best() {
        let cfg = small_cfg();
        let rows = run_sweep(&cfg, &[1.5, 0.5]).unwrap();
        assert_eq!(rows.len(), 2 * cfg.starts.len());
        assert!(rows[..4].iter().all(|r| r.m == 0.5));
        let labels: Vec<&str> = rows[..4].iter().map(|r| r.start.as_str()).collect();
        assert_eq!(labels, ["saturated-ball", "diluted-ball", "annulus", "seeded-random"]);
        for chunk in rows.chunks(4) {
            assert_eq!(chunk.iter().filter(|r| r.best).count(), 1);
            let best = chunk.iter().find(|r| r.best).unwrap();
            assert!(chunk.iter().all(|r| r.energy >= best.energy));
        }
        assert!(rows.iter().all(|r| r.wall_time == 0.0));
    }

    #[test]
    fn sweep_records_failures_per_row() {
        let cfg = small_cfg();
        let rows = run_sweep(&cfg, &[1e6]).unwrap();
        assert!(rows.iter().all(SweepRecord::is_error));
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + rows.len());
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let rows = run_sweep(&small_cfg(), &[]).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", SWEEP_COLUMNS.join(",")));
    }

    #[test]
    fn critical_wide_width_returns_bracket() {
        let cfg = Config { grid: GridSpec::Radial { n: 1024, r_max: Some(2.5) }, ..small_cfg() };
        let mut prober = Prober::new(&cfg);
        let r = run_critical(&mut prober, Boundary::C2, 1.0, 3.0, 10.0).unwrap();
        assert_eq!((r.lo, r.hi), (1.0, 3.0));
        assert_eq!(r.probes.len(), 2);
    }

    #[test]
    fn critical_rejects_same_label() {
        let cfg = small_cfg();
        let mut prober = Prober::new(&cfg);
        let err = run_critical(&mut prober, Boundary::C1, 0.5, 1.0, 0.05).unwrap_err();
        assert!(matches!(err, Error::BracketInvalid(_)));
        assert!(err.to_string().contains("bracket invalid"));
    }
}
