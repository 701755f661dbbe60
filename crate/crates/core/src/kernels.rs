//! Two-power interaction kernels `k(x) = |x|^-beta + |x|^alpha` in three dimensions.
//!
//! Besides pointwise evaluation this module provides the sphere-averaged
//! (radial) reduction used by the radial grids, the Laplacian of the kernel
//! away from the origin and the equivalent-ball average used to regularize
//! the singular on-diagonal entries of cell-to-cell kernel tables.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attraction exponent `alpha > 0` and repulsion exponent `beta` in `(0, 1]`.
///
/// `beta = 1` is the Coulomb case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub alpha: f64,
    pub beta: f64,
}

impl KernelSpec {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidKernel(format!("alpha must be > 0, got {alpha}")));
        }
        if !(beta.is_finite() && beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidKernel(format!("beta must lie in (0, 1], got {beta}")));
        }
        Ok(Self { alpha, beta })
    }

    /// Coulomb repulsion with attraction exponent `alpha`.
    pub fn coulomb(alpha: f64) -> Result<Self> {
        Self::new(alpha, 1.0)
    }

    pub fn is_coulomb(&self) -> bool {
        self.beta == 1.0
    }

    /// Exponent of the repulsive part, `-beta`.
    pub fn repulsive_exponent(&self) -> f64 {
        -self.beta
    }

    /// Exponent of the attractive part, `alpha`.
    pub fn attractive_exponent(&self) -> f64 {
        self.alpha
    }

    /// Exponent of the kernel whose convolution with the density gives the
    /// attractive part of the Laplacian of the potential, `alpha - 2`.
    pub fn laplacian_exponent(&self) -> f64 {
        self.alpha - 2.0
    }
}

/// `r^p` with `0^0 = 1` and `r^0 = 1` exactly.
pub(crate) fn pow_abs(r: f64, p: f64) -> f64 {
    if p == 0.0 {
        1.0
    } else if p == 1.0 {
        r
    } else if p == 2.0 {
        r * r
    } else if p == -1.0 {
        1.0 / r
    } else {
        r.powf(p)
    }
}

/// Pointwise kernel value `r^-beta + r^alpha`.
pub fn kernel_value(spec: &KernelSpec, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!(
            "kernel evaluated at r = {r}; the singular point must be cell-averaged"
        )));
    }
    Ok(pow_abs(r, -spec.beta) + pow_abs(r, spec.alpha))
}

/// Average of `|x - y|^p` over all directions of `y`, with `|x| = r` and `|y| = s`.
///
/// Closed form `[(r+s)^(p+2) - |r-s|^(p+2)] / (2 r s (p+2))`, evaluated through
/// `ln_1p`/`exp_m1` so that it stays accurate when one radius is much smaller
/// than the other. At `r = 0` (or `s = 0`) the value is the limit `s^p` (`r^p`).
pub fn radial_kernel(p: f64, r: f64, s: f64) -> Result<f64> {
    if !(p > -2.0) || !p.is_finite() {
        return Err(Error::UnsupportedExponent(p));
    }
    if r < 0.0 || s < 0.0 || !r.is_finite() || !s.is_finite() {
        return Err(Error::Domain(format!("radii must be finite and >= 0, got ({r}, {s})")));
    }
    if p == 0.0 {
        return Ok(1.0);
    }
    let (a, b) = if r >= s { (r, s) } else { (s, r) };
    if a == 0.0 {
        if p < 0.0 {
            return Err(Error::Singular(
                "radial kernel at r = s = 0 with p < 0; caller must cell-average".into(),
            ));
        }
        return Ok(0.0);
    }
    if b == 0.0 {
        return Ok(pow_abs(a, p));
    }
    let q = p + 2.0;
    let t = b / a;
    let diff = (q * t.ln_1p()).exp_m1() - (q * (-t).ln_1p()).exp_m1();
    Ok(pow_abs(a, p) * diff / (2.0 * t * q))
}

/// Laplacian of the kernel at distance `r > 0` from the origin:
/// `alpha (alpha+1) r^(alpha-2) + beta (beta-1) r^(-beta-2)`.
///
/// The point mass `-4 pi delta` carried by the Coulomb part is not included;
/// callers add `4 pi rho` to `-Laplacian(phi)` analytically.
pub fn kernel_laplacian_density(spec: &KernelSpec, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("Laplacian density evaluated at r = {r}")));
    }
    let attractive = spec.alpha * (spec.alpha + 1.0) * pow_abs(r, spec.alpha - 2.0);
    let repulsive = if spec.is_coulomb() {
        0.0
    } else {
        spec.beta * (spec.beta - 1.0) * pow_abs(r, -spec.beta - 2.0)
    };
    Ok(attractive + repulsive)
}

/// Radius of the ball whose volume equals `volume`.
pub fn equivalent_radius(volume: f64) -> f64 {
    (3.0 * volume / (4.0 * PI)).cbrt()
}

/// Average of `|x|^p` over the ball with the same volume as a grid cell,
/// `3 h^p / (p + 3)` with `h` the equivalent radius.
///
/// Only defined for singular exponents `p` in `(-2, 0)`; for `p >= 0` the
/// pointwise value is used instead.
pub fn singular_cell_average(p: f64, cell_volume: f64) -> Result<f64> {
    if !(p > -2.0 && p < 0.0) {
        return Err(Error::Domain(format!(
            "exponent {p} is not singular-integrable; use the pointwise value"
        )));
    }
    if !(cell_volume > 0.0) {
        return Err(Error::Domain(format!("cell volume must be positive, got {cell_volume}")));
    }
    let h = equivalent_radius(cell_volume);
    Ok(3.0 * pow_abs(h, p) / (p + 3.0))
}

/// Kernel-table entry for a cell at distance `r` from the source cell.
///
/// The on-diagonal entry (`r = 0`) is the equivalent-ball average for
/// singular exponents and the pointwise limit otherwise.
pub(crate) fn cell_table_entry(p: f64, r: f64, cell_volume: f64) -> f64 {
    if r > 0.0 {
        pow_abs(r, p)
    } else if p < 0.0 {
        let h = equivalent_radius(cell_volume);
        3.0 * pow_abs(h, p) / (p + 3.0)
    } else if p == 0.0 {
        1.0
    } else {
        0.0
    }
}
