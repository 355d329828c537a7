//! Chart domains: a global (r, phi) annulus chart or a polar disk chart.
//!
//! The phi coordinate is 2*pi-periodic; field evaluations accept any real
//! phi and presets are built from periodic closures, so no explicit
//! reduction is required during flow integration (the raw phi carries the
//! winding information used by the marked-distance solver).

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{GeoxError, Result};

pub const TWO_PI: f64 = 2.0 * PI;

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(phi: f64) -> f64 {
    let mut a = phi % TWO_PI;
    if a > PI {
        a -= TWO_PI;
    } else if a <= -PI {
        a += TWO_PI;
    }
    a
}

/// Wraps an angle to [0, 2*pi).
pub fn wrap_angle_positive(phi: f64) -> f64 {
    let a = phi % TWO_PI;
    if a < 0.0 {
        a + TWO_PI
    } else {
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ChartDomain {
    /// r in [r_min, r_max], phi periodic. Two boundary circles.
    Annulus { r_min: f64, r_max: f64 },
    /// Polar chart on the disk of the given radius; one boundary circle.
    /// The chart is singular at r = 0; flows error out if they reach it.
    Disk { radius: f64 },
}

impl ChartDomain {
    pub fn annulus(r_min: f64, r_max: f64) -> Self {
        assert!(r_min < r_max, "annulus requires r_min < r_max");
        ChartDomain::Annulus { r_min, r_max }
    }

    pub fn disk(radius: f64) -> Self {
        assert!(radius > 0.0);
        ChartDomain::Disk { radius }
    }

    /// Radial range of the chart. For the disk the lower end is the
    /// coordinate singularity at 0, not a boundary.
    pub fn r_range(&self) -> (f64, f64) {
        match *self {
            ChartDomain::Annulus { r_min, r_max } => (r_min, r_max),
            ChartDomain::Disk { radius } => (0.0, radius),
        }
    }

    pub fn contains_r(&self, r: f64) -> bool {
        let (lo, hi) = self.r_range();
        match self {
            ChartDomain::Annulus { .. } => r >= lo && r <= hi,
            ChartDomain::Disk { .. } => r > 0.0 && r <= hi,
        }
    }

    pub fn check_point(&self, r: f64, phi: f64) -> Result<()> {
        if self.contains_r(r) {
            Ok(())
        } else {
            Err(GeoxError::OutsideChart { r, phi, domain: format!("{self:?}") })
        }
    }

    /// Boundary circles as (r-value, outward radial direction sign).
    pub fn boundary_circles(&self) -> Vec<BoundaryCircle> {
        match *self {
            ChartDomain::Annulus { r_min, r_max } => vec![
                BoundaryCircle { r: r_min, outward_sign: -1.0 },
                BoundaryCircle { r: r_max, outward_sign: 1.0 },
            ],
            ChartDomain::Disk { radius } => vec![BoundaryCircle { r: radius, outward_sign: 1.0 }],
        }
    }

    /// Signed distance in r to the nearest boundary, positive inside.
    pub fn boundary_clearance(&self, r: f64) -> f64 {
        match *self {
            ChartDomain::Annulus { r_min, r_max } => (r - r_min).min(r_max - r),
            ChartDomain::Disk { radius } => radius - r,
        }
    }

    /// Chart enlarged by delta in the radial direction (disk: larger radius).
    pub fn extended(&self, delta: f64) -> ChartDomain {
        assert!(delta > 0.0);
        match *self {
            ChartDomain::Annulus { r_min, r_max } => {
                ChartDomain::Annulus { r_min: r_min - delta, r_max: r_max + delta }
            }
            ChartDomain::Disk { radius } => ChartDomain::Disk { radius: radius + delta },
        }
    }
}

/// One boundary circle r = const of a chart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryCircle {
    pub r: f64,
    /// +1 if the outward normal points toward increasing r, -1 otherwise.
    pub outward_sign: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_is_periodic() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle_positive(-0.1) - (TWO_PI - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn annulus_membership() {
        let c = ChartDomain::annulus(-1.0, 1.0);
        assert!(c.contains_r(0.0));
        assert!(c.contains_r(1.0));
        assert!(!c.contains_r(1.0 + 1e-12));
        assert!(c.check_point(2.0, 0.0).is_err());
        assert_eq!(c.boundary_circles().len(), 2);
    }

    #[test]
    fn extension_enlarges_range() {
        let c = ChartDomain::annulus(-1.0, 1.0).extended(0.2);
        assert_eq!(c.r_range(), (-1.2, 1.2));
    }
}
