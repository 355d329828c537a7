//! Quadrature: Gauss-Legendre nodes, periodic trapezoid, and product grids
//! over the chart and the unit sphere bundle.
//!
//! Integration over M uses Gauss-Legendre in r and the (spectrally accurate)
//! periodic trapezoid rule in phi. Reductions run in a fixed deterministic
//! order so repeated runs are bit-identical.

use crate::chart::TWO_PI;
use crate::error::{GeoxError, Result};
use crate::metric::MetricField;
use serde::{Deserialize, Serialize};

/// Gauss-Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on the Legendre recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for k in 0..m {
            // Tricomi initial guess.
            let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_and_deriv(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[k] = -x;
            weights[k] = w;
            nodes[n - 1 - k] = x;
            weights[n - 1 - k] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Nodes and weights mapped to [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        (
            self.nodes.iter().map(|&x| c + h * x).collect(),
            self.weights.iter().map(|&w| w * h).collect(),
        )
    }
}

fn legendre_and_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Grid resolution for integration over M: Gauss-Legendre in r, periodic
/// trapezoid in phi.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_r: usize,
    pub n_phi: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { n_r: 64, n_phi: 128 }
    }
}

/// Precomputed product quadrature over M for a fixed metric: nodes with
/// weights that already include the Riemannian area element.
pub struct MQuadrature {
    pub r_nodes: Vec<f64>,
    pub phi_nodes: Vec<f64>,
    /// weight[i][j] = w_r(i) * dphi * sqrt(det g(r_i, phi_j))
    pub weights: Vec<Vec<f64>>,
}

impl MQuadrature {
    pub fn new(g: &MetricField, spec: GridSpec) -> Result<Self> {
        let (a, b) = g.chart().r_range();
        let gl = GaussLegendre::new(spec.n_r);
        let (r_nodes, r_weights) = gl.mapped(a, b);
        let dphi = TWO_PI / spec.n_phi as f64;
        let phi_nodes: Vec<f64> = (0..spec.n_phi).map(|j| j as f64 * dphi).collect();
        let mut weights = Vec::with_capacity(spec.n_r);
        for (i, &r) in r_nodes.iter().enumerate() {
            let mut row = Vec::with_capacity(spec.n_phi);
            for &phi in &phi_nodes {
                let gv = g.value(r, phi);
                let det = gv.det();
                if det <= 0.0 || gv.comps[0] <= 0.0 {
                    return Err(GeoxError::DegenerateMetric { r, phi, det, g_rr: gv.comps[0] });
                }
                row.push(r_weights[i] * dphi * det.sqrt());
            }
            weights.push(row);
        }
        Ok(MQuadrature { r_nodes, phi_nodes, weights })
    }

    /// Integral of a scalar function over M against dvol_g.
    pub fn integrate(&self, h: impl Fn(f64, f64) -> f64 + Sync) -> f64 {
        let mut total = 0.0;
        for (i, &r) in self.r_nodes.iter().enumerate() {
            for (j, &phi) in self.phi_nodes.iter().enumerate() {
                total += self.weights[i][j] * h(r, phi);
            }
        }
        total
    }

    pub fn volume(&self) -> f64 {
        self.integrate(|_, _| 1.0)
    }
}

/// Integrates h over M with respect to dvol_g.
pub fn integrate_over_m(
    h: impl Fn(f64, f64) -> f64 + Sync,
    g: &MetricField,
    spec: GridSpec,
) -> Result<f64> {
    Ok(MQuadrature::new(g, spec)?.integrate(h))
}

/// Riemannian area of (M, g).
pub fn volume(g: &MetricField, spec: GridSpec) -> Result<f64> {
    integrate_over_m(|_, _| 1.0, g, spec)
}

/// Uniform fiber angles for averaging over the unit circle in each tangent
/// space (periodic trapezoid = plain average times 2*pi).
pub fn fiber_angles(n: usize) -> Vec<f64> {
    (0..n).map(|k| TWO_PI * k as f64 / n as f64).collect()
}

/// Integral over the unit sphere bundle SM against the Liouville measure
/// dvol_g x dtheta, where F is sampled at grid points and fiber directions
/// given by an angle in the orthonormal frame.
pub fn integrate_over_sm(
    f: impl Fn(f64, f64, f64) -> f64 + Sync,
    g: &MetricField,
    spec: GridSpec,
    n_fiber: usize,
) -> Result<f64> {
    let quad = MQuadrature::new(g, spec)?;
    let angles = fiber_angles(n_fiber);
    let dalpha = TWO_PI / n_fiber as f64;
    let mut total = 0.0;
    for (i, &r) in quad.r_nodes.iter().enumerate() {
        for (j, &phi) in quad.phi_nodes.iter().enumerate() {
            let mut fiber_sum = 0.0;
            for &alpha in &angles {
                fiber_sum += f(r, phi, alpha);
            }
            total += quad.weights[i][j] * fiber_sum * dalpha;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_five_point_nodes() {
        let gl = GaussLegendre::new(5);
        // Classical 5-point values.
        let expected = [
            -0.906_179_845_938_664,
            -0.538_469_310_105_683,
            0.0,
            0.538_469_310_105_683,
            0.906_179_845_938_664,
        ];
        for (a, b) in gl.nodes.iter().zip(expected.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-13);
        }
        let wsum: f64 = gl.weights.iter().sum();
        assert_relative_eq!(wsum, 2.0, epsilon = 1e-13);
    }

    #[test]
    fn gauss_legendre_polynomial_exactness() {
        let gl = GaussLegendre::new(6);
        let (x, w) = gl.mapped(0.0, 2.0);
        // Degree 11 is exact for n = 6.
        let quad: f64 = x.iter().zip(&w).map(|(&x, &w)| w * x.powi(11)).sum();
        assert_relative_eq!(quad, 2.0f64.powi(12) / 12.0, max_relative = 1e-12);
    }
}
