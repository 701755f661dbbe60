//! Run configuration: a flat `key = value` file whose entries can be
//! overridden one by one (the command line applies its flags this way).

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use crate::analysis::PhaseTolerances;
use crate::error::{Error, Result};
use crate::fields::Geometry;
use crate::kernels::KernelSpec;
use crate::optimizer::{Method, SolveOptions, StartRecipe};

/// Environment variable that overrides the `workers` key.
pub const WORKERS_ENV: &str = "SWARM_PHASE_WORKERS";

/// Diameter of the saturated ball of volume `m` divided by `max(1, m^(1/3))`.
const BALL_RATIO: f64 = 1.2407;
/// Domain extent as a multiple of the expected support diameter.
const DOMAIN_FACTOR: f64 = 2.5;

/// Grid descriptor: `radial:<n>:<rmax>` or `box:<n>:<h>`; the last field may
/// be `auto` to size the domain from the mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridSpec {
    Radial { n: usize, r_max: Option<f64> },
    Box { n: usize, h: Option<f64> },
}

impl GridSpec {
    /// Expected support diameter scale times the safety factor.
    pub fn auto_extent(m: f64) -> f64 {
        DOMAIN_FACTOR * BALL_RATIO * m.cbrt().max(1.0)
    }

    pub fn geometry(&self, m: f64) -> Result<Geometry> {
        match *self {
            GridSpec::Radial { n, r_max } => Geometry::radial(n, r_max.unwrap_or(0.5 * Self::auto_extent(m))),
            GridSpec::Box { n, h } => Geometry::centered_box(n, h.unwrap_or(Self::auto_extent(m) / n as f64)),
        }
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("grid '{s}' is not radial:<n>:<rmax> or box:<n>:<h>"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let n: usize = parts[1].parse().map_err(|_| bad())?;
        let size = match parts[2] {
            "auto" => None,
            x => {
                let v: f64 = x.parse().map_err(|_| bad())?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("grid size must be positive, got {x}")));
                }
                Some(v)
            }
        };
        if n == 0 {
            return Err(Error::Config("grid needs at least one cell".into()));
        }
        match parts[0] {
            "radial" => Ok(GridSpec::Radial { n, r_max: size }),
            "box" => Ok(GridSpec::Box { n, h: size }),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for GridSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let size = |x: Option<f64>| x.map_or("auto".to_string(), |v| v.to_string());
        match *self {
            GridSpec::Radial { n, r_max } => write!(f, "radial:{n}:{}", size(r_max)),
            GridSpec::Box { n, h } => write!(f, "box:{n}:{}", size(h)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// First appearance of a saturated set.
    C1,
    /// Onset of the solid phase.
    C2,
}

impl FromStr for Boundary {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c1" => Ok(Boundary::C1),
            "c2" => Ok(Boundary::C2),
            _ => Err(Error::Config(format!("boundary must be c1 or c2, got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub alpha: f64,
    pub beta: f64,
    pub m: f64,
    pub grid: GridSpec,
    pub max_iters: usize,
    pub gap_tol: f64,
    pub face_steps: usize,
    pub method: Method,
    pub starts: Vec<StartRecipe>,
    pub seed: u64,
    pub density_tol: f64,
    pub min_saturated_cells: usize,
    pub solid_fraction: f64,
    pub workers: usize,
    /// Explicit mass list for sweeps; takes precedence over the log range.
    pub masses: Vec<f64>,
    pub m_min: f64,
    pub m_max: f64,
    pub m_count: usize,
    pub bracket_lo: f64,
    pub bracket_hi: f64,
    pub width: f64,
    /// Write measured wall times into sweep tables (makes them run-dependent).
    pub wall_time: bool,
}

impl Default for Config {
    fn default() -> Self {
        let opts = SolveOptions::default();
        let tols = PhaseTolerances::default();
        Self {
            alpha: 2.0,
            beta: 1.0,
            m: 1.0,
            grid: GridSpec::Radial { n: 1024, r_max: None },
            max_iters: opts.max_iters,
            gap_tol: opts.gap_tol,
            face_steps: opts.face_steps,
            method: opts.method,
            starts: opts.starts,
            seed: opts.seed,
            density_tol: tols.density_tol,
            min_saturated_cells: tols.min_saturated_cells,
            solid_fraction: tols.solid_fraction,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            masses: Vec::new(),
            m_min: 0.1,
            m_max: 100.0,
            m_count: 0,
            bracket_lo: 1.5,
            bracket_hi: 3.0,
            width: 0.05,
            wall_time: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

impl Config {
    /// Keys accepted by [`Config::set`], in `--print-config` order.
    pub const KEYS: [&'static str; 22] = [
        "alpha",
        "beta",
        "m",
        "grid",
        "max_iters",
        "gap_tol",
        "face_steps",
        "method",
        "starts",
        "seed",
        "density_tol",
        "min_saturated_cells",
        "solid_fraction",
        "workers",
        "masses",
        "m_min",
        "m_max",
        "m_count",
        "bracket_lo",
        "bracket_hi",
        "width",
        "wall_time",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "grid" => self.grid = v.parse()?,
            "max_iters" => self.max_iters = parse(key, v)?,
            "gap_tol" => self.gap_tol = parse(key, v)?,
            "face_steps" => self.face_steps = parse(key, v)?,
            "method" => {
                self.method = match v {
                    "frank-wolfe" => Method::FrankWolfe,
                    "projected-gradient" => Method::ProjectedGradient,
                    _ => return Err(Error::Config(format!("method must be frank-wolfe or projected-gradient, got '{v}'"))),
                }
            }
            "starts" => self.starts = v.split(',').map(str::parse).collect::<Result<_>>()?,
            "seed" => self.seed = parse(key, v)?,
            "density_tol" => self.density_tol = parse(key, v)?,
            "min_saturated_cells" => self.min_saturated_cells = parse(key, v)?,
            "solid_fraction" => self.solid_fraction = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "masses" => self.masses = parse_list(key, v)?,
            "m_min" => self.m_min = parse(key, v)?,
            "m_max" => self.m_max = parse(key, v)?,
            "m_count" => self.m_count = parse(key, v)?,
            "bracket_lo" => self.bracket_lo = parse(key, v)?,
            "bracket_hi" => self.bracket_hi = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "wall_time" => self.wall_time = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(key, value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Applies the worker-count override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            self.workers = parse(WORKERS_ENV, &v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        Some(match key {
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "m" => self.m.to_string(),
            "grid" => self.grid.to_string(),
            "max_iters" => self.max_iters.to_string(),
            "gap_tol" => self.gap_tol.to_string(),
            "face_steps" => self.face_steps.to_string(),
            "method" => match self.method {
                Method::FrankWolfe => "frank-wolfe".into(),
                Method::ProjectedGradient => "projected-gradient".into(),
            },
            "starts" => self.starts.iter().map(StartRecipe::label).collect::<Vec<_>>().join(","),
            "seed" => self.seed.to_string(),
            "density_tol" => self.density_tol.to_string(),
            "min_saturated_cells" => self.min_saturated_cells.to_string(),
            "solid_fraction" => self.solid_fraction.to_string(),
            "workers" => self.workers.to_string(),
            "masses" => list(&self.masses),
            "m_min" => self.m_min.to_string(),
            "m_max" => self.m_max.to_string(),
            "m_count" => self.m_count.to_string(),
            "bracket_lo" => self.bracket_lo.to_string(),
            "bracket_hi" => self.bracket_hi.to_string(),
            "width" => self.width.to_string(),
            "wall_time" => self.wall_time.to_string(),
            _ => return None,
        })
    }

    /// Renders every key; the output parses back to the same configuration.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        KernelSpec::new(self.alpha, self.beta)?;
        if !(self.gap_tol > 0.0) {
            return Err(Error::Config("gap_tol must be positive".into()));
        }
        if self.starts.is_empty() {
            return Err(Error::Config("at least one start recipe is required".into()));
        }
        if !(self.density_tol >= 0.0 && self.density_tol < 0.5) {
            return Err(Error::Config("density_tol must lie in [0, 0.5)".into()));
        }
        if !(self.solid_fraction > 0.0 && self.solid_fraction <= 1.0) {
            return Err(Error::Config("solid_fraction must lie in (0, 1]".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        KernelSpec::new(self.alpha, self.beta)
    }

    pub fn geometry(&self, m: f64) -> Result<Arc<Geometry>> {
        Ok(Arc::new(self.grid.geometry(m)?))
    }

    pub fn phase_tolerances(&self) -> PhaseTolerances {
        PhaseTolerances {
            density_tol: self.density_tol,
            min_saturated_cells: self.min_saturated_cells,
            solid_fraction: self.solid_fraction,
        }
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            max_iters: self.max_iters,
            gap_tol: self.gap_tol,
            starts: self.starts.clone(),
            method: self.method,
            seed: self.seed,
            face_steps: self.face_steps,
            phase: self.phase_tolerances(),
            parallel: self.workers > 1,
        }
    }

    /// Masses of a sweep: the explicit list, else `m_count` log-spaced values
    /// in `[m_min, m_max]`.
    pub fn sweep_masses(&self) -> Result<Vec<f64>> {
        if !self.masses.is_empty() || self.m_count == 0 {
            return Ok(self.masses.clone());
        }
        if !(self.m_min > 0.0 && self.m_max >= self.m_min) {
            return Err(Error::Config("log range needs 0 < m_min <= m_max".into()));
        }
        if self.m_count == 1 {
            return Ok(vec![self.m_min]);
        }
        let (a, b) = (self.m_min.ln(), self.m_max.ln());
        let k = (self.m_count - 1) as f64;
        Ok((0..self.m_count).map(|i| (a + (b - a) * i as f64 / k).exp()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_descriptors() {
        assert_eq!("radial:2048:4.0".parse::<GridSpec>().unwrap(), GridSpec::Radial { n: 2048, r_max: Some(4.0) });
        assert_eq!("box:32:auto".parse::<GridSpec>().unwrap(), GridSpec::Box { n: 32, h: None });
        for bad in ["radial:0:1", "radial:10", "cube:4:1", "box:4:-1", "radial:x:1"] {
            assert!(bad.parse::<GridSpec>().is_err(), "{bad}");
        }
        let g = GridSpec::Radial { n: 10, r_max: None }.geometry(8.0).unwrap();
        assert!((g.total_volume() - 4.0 / 3.0 * std::f64::consts::PI * (2.5f64 * 1.2407).powi(3)).abs() < 1e-9);
    }

    #[test]
    fn printed_config_round_trips() {
        let mut cfg = Config::default();
        cfg.set("masses", "0.5, 1,2").unwrap();
        cfg.set("starts", "annulus,diluted-ball:0.25").unwrap();
        cfg.set("grid", "box:16:0.1").unwrap();
        let mut back = Config::default();
        back.apply_str(&cfg.to_key_values()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_errors_name_the_line() {
        let mut cfg = Config::default();
        let err = cfg.apply_str("alpha = 3\n# note\nbeta = x\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert_eq!(cfg.alpha, 3.0);
        assert!(cfg.apply_str("nonsense").is_err());
        assert!(cfg.set("colour", "1").is_err());
    }

    #[test]
    fn log_range() {
        let cfg = Config { m_min: 1.0, m_max: 100.0, m_count: 3, ..Default::default() };
        let ms = cfg.sweep_masses().unwrap();
        assert_eq!(ms.len(), 3);
        assert!((ms[1] - 10.0).abs() < 1e-12);
        assert!(Config::default().sweep_masses().unwrap().is_empty());
    }

    #[test]
    fn validation() {
        assert!(Config::default().validate().is_ok());
        assert!(Config { beta: 1.5, ..Default::default() }.validate().is_err());
        assert!(Config { gap_tol: 0.0, ..Default::default() }.validate().is_err());
        assert!(Config { starts: vec![], ..Default::default() }.validate().is_err());
    }
}
