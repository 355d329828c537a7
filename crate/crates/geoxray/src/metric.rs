//! Metrics on a chart: component jets, Christoffel symbols, Gaussian
//! curvature, presets, metric interpolation and the determinant expansion.
//!
//! A metric is described by its three symmetric components (g_rr, g_rphi,
//! g_phiphi). Surfaces of revolution g = dr^2 + f(r)^2 dphi^2 carry a
//! profile tag which enables exact Clairaut bookkeeping downstream.

use std::sync::Arc;

use crate::chart::ChartDomain;
use crate::error::{GeoxError, Result};
use crate::field::{fd_first, fd_second, ScalarField, DEFAULT_H_FD};
use crate::quad::GridSpec;
use crate::tensor::SymTensorField;

/// Pointwise metric value in symmetric storage (g_rr, g_rphi, g_phiphi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub comps: [f64; 3],
}

impl MetricValue {
    pub fn det(&self) -> f64 {
        self.comps[0] * self.comps[2] - self.comps[1] * self.comps[1]
    }

    pub fn is_spd(&self) -> bool {
        self.comps[0] > 0.0 && self.det() > 0.0
    }

    /// Inverse metric components (g^rr, g^rphi, g^phiphi).
    pub fn inverse(&self) -> [f64; 3] {
        let d = self.det();
        [self.comps[2] / d, -self.comps[1] / d, self.comps[0] / d]
    }

    pub fn as_matrix(&self) -> [[f64; 2]; 2] {
        [[self.comps[0], self.comps[1]], [self.comps[1], self.comps[2]]]
    }

    pub fn inner(&self, u: [f64; 2], v: [f64; 2]) -> f64 {
        self.comps[0] * u[0] * v[0]
            + self.comps[1] * (u[0] * v[1] + u[1] * v[0])
            + self.comps[2] * u[1] * v[1]
    }

    pub fn norm_sq(&self, v: [f64; 2]) -> f64 {
        self.inner(v, v)
    }

    pub fn norm(&self, v: [f64; 2]) -> f64 {
        self.norm_sq(v).sqrt()
    }

    /// g-orthonormal frame (e1, e2) in coordinate components, e1 along d_r,
    /// e2 the Gram-Schmidt complement along d_phi, positively oriented.
    pub fn orthonormal_frame(&self) -> ([f64; 2], [f64; 2]) {
        let e1 = [1.0 / self.comps[0].sqrt(), 0.0];
        // d_phi - <d_phi, e1> e1, normalized.
        let proj = self.inner([0.0, 1.0], e1);
        let w = [-proj * e1[0], 1.0 - proj * e1[1]];
        let n = self.norm(w);
        (e1, [w[0] / n, w[1] / n])
    }
}

/// Metric components with first and second coordinate derivatives.
/// Derivative directions are indexed 0 = r, 1 = phi; second derivatives are
/// stored as [rr, rphi, phiphi].
#[derive(Debug, Clone, Copy)]
pub struct MetricJet {
    pub value: [f64; 3],
    pub d1: [[f64; 3]; 2],
    pub d2: [[f64; 3]; 3],
}

/// Christoffel symbols in symmetric storage: gamma[k][c] with upper index k
/// (0 = r, 1 = phi) and c the number of phi's among the lower pair.
#[derive(Debug, Clone, Copy)]
pub struct Christoffel {
    pub gamma: [[f64; 3]; 2],
}

impl Christoffel {
    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.gamma[k][i + j]
    }
}

/// Radial profile of a surface of revolution: returns (f, f', f'').
pub type ProfileFn = Arc<dyn Fn(f64) -> (f64, f64, f64) + Send + Sync>;

#[derive(Clone)]
pub struct RevolutionProfile {
    pub f: ProfileFn,
    /// Minimum of f over the chart and where it is attained.
    pub min_f: f64,
    pub r_neck: f64,
}

/// Component evaluation backend. `jet1`/`jet2` default to 4th-order finite
/// differences of `value`; backends with analytic derivatives override them.
pub trait MetricComponents: Send + Sync {
    fn value(&self, r: f64, phi: f64) -> [f64; 3];

    fn jet1(&self, r: f64, phi: f64) -> ([f64; 3], [[f64; 3]; 2]) {
        let h = DEFAULT_H_FD;
        let v = self.value(r, phi);
        let mut d1 = [[0.0; 3]; 2];
        for c in 0..3 {
            d1[0][c] = fd_first(|x| self.value(x, phi)[c], r, h);
            d1[1][c] = fd_first(|x| self.value(r, x)[c], phi, h);
        }
        (v, d1)
    }

    fn jet2(&self, r: f64, phi: f64) -> MetricJet {
        let h = DEFAULT_H_FD;
        let (value, d1) = self.jet1(r, phi);
        let mut d2 = [[0.0; 3]; 3];
        for c in 0..3 {
            d2[0][c] = fd_second(|x| self.value(x, phi)[c], r, h);
            d2[2][c] = fd_second(|x| self.value(r, x)[c], phi, h);
            d2[1][c] = fd_first(|x| self.jet1(x, phi).1[1][c], r, h);
        }
        MetricJet { value, d1, d2 }
    }
}

struct RevolutionComponents {
    profile: ProfileFn,
}

impl MetricComponents for RevolutionComponents {
    fn value(&self, r: f64, _phi: f64) -> [f64; 3] {
        let (f, _, _) = (self.profile)(r);
        [1.0, 0.0, f * f]
    }

    fn jet1(&self, r: f64, _phi: f64) -> ([f64; 3], [[f64; 3]; 2]) {
        let (f, df, _) = (self.profile)(r);
        ([1.0, 0.0, f * f], [[0.0, 0.0, 2.0 * f * df], [0.0; 3]])
    }

    fn jet2(&self, r: f64, phi: f64) -> MetricJet {
        let (f, df, ddf) = (self.profile)(r);
        let (value, d1) = self.jet1(r, phi);
        MetricJet { value, d1, d2: [[0.0, 0.0, 2.0 * (df * df + f * ddf)], [0.0; 3], [0.0; 3]] }
    }
}

struct GeneralComponents {
    comps: [ScalarField; 3],
}

impl MetricComponents for GeneralComponents {
    fn value(&self, r: f64, phi: f64) -> [f64; 3] {
        [self.comps[0].eval(r, phi), self.comps[1].eval(r, phi), self.comps[2].eval(r, phi)]
    }

    fn jet1(&self, r: f64, phi: f64) -> ([f64; 3], [[f64; 3]; 2]) {
        let mut v = [0.0; 3];
        let mut d1 = [[0.0; 3]; 2];
        for c in 0..3 {
            v[c] = self.comps[c].eval(r, phi);
            let g = self.comps[c].grad(r, phi);
            d1[0][c] = g[0];
            d1[1][c] = g[1];
        }
        (v, d1)
    }

    fn jet2(&self, r: f64, phi: f64) -> MetricJet {
        let (value, d1) = self.jet1(r, phi);
        let mut d2 = [[0.0; 3]; 3];
        for c in 0..3 {
            let h = self.comps[c].hess(r, phi);
            d2[0][c] = h[0];
            d2[1][c] = h[1];
            d2[2][c] = h[2];
        }
        MetricJet { value, d1, d2 }
    }
}

/// A Riemannian metric on a chart.
#[derive(Clone)]
pub struct MetricField {
    chart: ChartDomain,
    components: Arc<dyn MetricComponents>,
    revolution: Option<RevolutionProfile>,
    name: String,
}

impl std::fmt::Debug for MetricField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricField").field("name", &self.name).field("chart", &self.chart).finish()
    }
}

impl MetricField {
    /// Surface of revolution dr^2 + f(r)^2 dphi^2 on the given chart.
    pub fn revolution(chart: ChartDomain, name: &str, profile: ProfileFn) -> Self {
        let (min_f, r_neck) = minimize_profile(&profile, chart);
        MetricField {
            chart,
            components: Arc::new(RevolutionComponents { profile: profile.clone() }),
            revolution: Some(RevolutionProfile { f: profile, min_f, r_neck }),
            name: name.to_string(),
        }
    }

    /// Metric from three component fields (g_rr, g_rphi, g_phiphi).
    pub fn general(chart: ChartDomain, name: &str, comps: [ScalarField; 3]) -> Self {
        MetricField {
            chart,
            components: Arc::new(GeneralComponents { comps }),
            revolution: None,
            name: name.to_string(),
        }
    }

    /// Metric from a custom component backend (e.g. diffeomorphism pullbacks).
    pub fn from_components(chart: ChartDomain, name: &str, comps: Arc<dyn MetricComponents>) -> Self {
        MetricField { chart, components: comps, revolution: None, name: name.to_string() }
    }

    /// Hyperbolic neck: annulus r in [-1, 1], g = dr^2 + cosh^2(r) dphi^2.
    /// Strictly convex boundary, curvature -1, trapped set = the r = 0 orbit.
    pub fn neck() -> Self {
        MetricField::revolution(
            ChartDomain::annulus(-1.0, 1.0),
            "neck",
            Arc::new(|r: f64| (r.cosh(), r.sinh(), r.cosh())),
        )
    }

    /// Flat cylinder dr^2 + dphi^2 on r in [-1, 1]: boundary circles are
    /// geodesics (not strictly convex), used as a negative test case.
    pub fn flat_cylinder() -> Self {
        MetricField::revolution(
            ChartDomain::annulus(-1.0, 1.0),
            "flat_cylinder",
            Arc::new(|_r: f64| (1.0, 0.0, 0.0)),
        )
    }

    /// Euclidean unit disk in polar coordinates: dr^2 + r^2 dphi^2.
    pub fn euclid_disk() -> Self {
        MetricField::revolution(
            ChartDomain::disk(1.0),
            "euclid_disk",
            Arc::new(|r: f64| (r, 1.0, 0.0)),
        )
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "neck" => Ok(MetricField::neck()),
            "flat_cylinder" => Ok(MetricField::flat_cylinder()),
            "euclid_disk" => Ok(MetricField::euclid_disk()),
            other => Err(GeoxError::InvalidParameter(format!("unknown metric preset `{other}`"))),
        }
    }

    pub fn chart(&self) -> ChartDomain {
        self.chart
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn revolution_profile(&self) -> Option<&RevolutionProfile> {
        self.revolution.as_ref()
    }

    /// Same metric formulas on a chart enlarged by `delta` in r.
    pub fn on_extended_chart(&self, delta: f64) -> Self {
        let chart = self.chart.extended(delta);
        let mut out = self.clone();
        if let Some(rev) = &self.revolution {
            let (min_f, r_neck) = minimize_profile(&rev.f, chart);
            out.revolution = Some(RevolutionProfile { f: rev.f.clone(), min_f, r_neck });
        }
        out.chart = chart;
        out.name = format!("{}_ext", self.name);
        out
    }

    #[inline]
    pub fn value(&self, r: f64, phi: f64) -> MetricValue {
        MetricValue { comps: self.components.value(r, phi) }
    }

    /// Metric components with first and second derivatives at a chart point.
    pub fn jet(&self, r: f64, phi: f64) -> Result<MetricJet> {
        self.chart.check_point(r, phi)?;
        Ok(self.components.jet2(r, phi))
    }

    /// Components and first derivatives only (enough for Christoffels); no
    /// chart check so the flow can evaluate slightly past the boundary
    /// during bisection.
    #[inline]
    pub fn jet1(&self, r: f64, phi: f64) -> ([f64; 3], [[f64; 3]; 2]) {
        self.components.jet1(r, phi)
    }

    /// Christoffel symbols from the Koszul formula.
    pub fn christoffel(&self, r: f64, phi: f64) -> Christoffel {
        let (v, d1) = self.jet1(r, phi);
        christoffel_from_jet(&v, &d1)
    }

    /// Christoffel symbols and Gaussian curvature; errors on degenerate g.
    pub fn christoffel_curvature(&self, r: f64, phi: f64) -> Result<(Christoffel, f64)> {
        let jet = self.components.jet2(r, phi);
        let gv = MetricValue { comps: jet.value };
        if !gv.is_spd() {
            return Err(GeoxError::DegenerateMetric { r, phi, det: gv.det(), g_rr: gv.comps[0] });
        }
        let gamma = christoffel_from_jet(&jet.value, &jet.d1);
        let k = gaussian_curvature(&jet, &gamma);
        Ok((gamma, k))
    }

    /// Unit tangent vector at angle `theta` measured from the first frame
    /// vector (d_r direction) toward the second.
    pub fn unit_vector(&self, r: f64, phi: f64, alpha: f64) -> [f64; 2] {
        let (e1, e2) = self.value(r, phi).orthonormal_frame();
        [
            alpha.cos() * e1[0] + alpha.sin() * e2[0],
            alpha.cos() * e1[1] + alpha.sin() * e2[1],
        ]
    }

    /// g_tau = g + tau * f, with positive-definiteness verified on a
    /// sampling grid; the error names the first failing point.
    pub fn perturbed(&self, f: &SymTensorField, tau: f64, check: GridSpec) -> Result<MetricField> {
        if f.rank() != 2 {
            return Err(GeoxError::RankMismatch { expected: 2, got: f.rank() });
        }
        let base = self.clone();
        let fld = f.clone();
        let comps = Arc::new(SumComponents { base, f: fld, tau });
        let out = MetricField {
            chart: self.chart,
            components: comps,
            revolution: None,
            name: format!("{}+{}*f", self.name, tau),
        };
        // SPD check on the sampling grid.
        let (a, b) = self.chart.r_range();
        let nr = check.n_r.max(2);
        for i in 0..nr {
            let r = a + (b - a) * (i as f64 + 0.5) / nr as f64;
            for j in 0..check.n_phi.max(2) {
                let phi = crate::chart::TWO_PI * j as f64 / check.n_phi as f64;
                let gv = out.value(r, phi);
                if !gv.is_spd() {
                    return Err(GeoxError::DegenerateMetric {
                        r,
                        phi,
                        det: gv.det(),
                        g_rr: gv.comps[0],
                    });
                }
            }
        }
        Ok(out)
    }

    /// The metric as a rank-2 symmetric tensor field (with analytic jets
    /// delegated to the component backend).
    pub fn as_tensor_field(&self) -> SymTensorField {
        let mk = |c: usize| {
            let m = self.clone();
            let mg = self.clone();
            let mh = self.clone();
            ScalarField::analytic(
                move |r, p| m.value(r, p).comps[c],
                move |r, p| {
                    let (_, d1) = mg.jet1(r, p);
                    [d1[0][c], d1[1][c]]
                },
                move |r, p| {
                    let j = mh.components.jet2(r, p);
                    [j.d2[0][c], j.d2[1][c], j.d2[2][c]]
                },
            )
        };
        SymTensorField::new(2, vec![mk(0), mk(1), mk(2)]).expect("rank 2")
    }
}

struct SumComponents {
    base: MetricField,
    f: SymTensorField,
    tau: f64,
}

impl MetricComponents for SumComponents {
    fn value(&self, r: f64, phi: f64) -> [f64; 3] {
        let b = self.base.value(r, phi).comps;
        let fv = self.f.eval(r, phi);
        let fc = fv.comps();
        [b[0] + self.tau * fc[0], b[1] + self.tau * fc[1], b[2] + self.tau * fc[2]]
    }

    fn jet1(&self, r: f64, phi: f64) -> ([f64; 3], [[f64; 3]; 2]) {
        let (bv, bd) = self.base.jet1(r, phi);
        let mut v = bv;
        let mut d1 = bd;
        for c in 0..3 {
            let comp = self.f.component(c);
            v[c] += self.tau * comp.eval(r, phi);
            let g = comp.grad(r, phi);
            d1[0][c] += self.tau * g[0];
            d1[1][c] += self.tau * g[1];
        }
        (v, d1)
    }

    fn jet2(&self, r: f64, phi: f64) -> MetricJet {
        let mut jet = self.base.components.jet2(r, phi);
        for c in 0..3 {
            let comp = self.f.component(c);
            jet.value[c] += self.tau * comp.eval(r, phi);
            let g = comp.grad(r, phi);
            jet.d1[0][c] += self.tau * g[0];
            jet.d1[1][c] += self.tau * g[1];
            let h = comp.hess(r, phi);
            jet.d2[0][c] += self.tau * h[0];
            jet.d2[1][c] += self.tau * h[1];
            jet.d2[2][c] += self.tau * h[2];
        }
        jet
    }
}

fn minimize_profile(profile: &ProfileFn, chart: ChartDomain) -> (f64, f64) {
    let (a, b) = chart.r_range();
    let n = 2048;
    let mut best = (f64::INFINITY, a);
    for i in 0..=n {
        let r = a + (b - a) * i as f64 / n as f64;
        if matches!(chart, ChartDomain::Disk { .. }) && r == 0.0 {
            continue;
        }
        let (f, _, _) = profile(r);
        if f < best.0 {
            best = (f, r);
        }
    }
    // Newton polish on f' = 0 when the minimum is interior.
    let mut r = best.1;
    if r > a + 1e-9 && r < b - 1e-9 {
        for _ in 0..50 {
            let (_, df, ddf) = profile(r);
            if ddf.abs() < 1e-300 {
                break;
            }
            let step = df / ddf;
            r -= step;
            if step.abs() < 1e-14 {
                break;
            }
        }
        if r.is_finite() && r > a && r < b {
            let (f, _, _) = profile(r);
            if f <= best.0 {
                best = (f, r);
            }
        }
    }
    (best.0, best.1)
}

/// Koszul formula from components and first derivatives.
pub fn christoffel_from_jet(value: &[f64; 3], d1: &[[f64; 3]; 2]) -> Christoffel {
    let g = [[value[0], value[1]], [value[1], value[2]]];
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    let ginv = [[g[1][1] / det, -g[0][1] / det], [-g[0][1] / det, g[0][0] / det]];
    // dg[m][i][j] = d_m g_ij
    let dg = |m: usize, i: usize, j: usize| d1[m][i + j];
    let mut gamma = [[0.0; 3]; 2];
    for k in 0..2 {
        for i in 0..2 {
            for j in i..2 {
                let mut s = 0.0;
                for l in 0..2 {
                    s += ginv[k][l] * (dg(i, j, l) + dg(j, i, l) - dg(l, i, j));
                }
                gamma[k][i + j] = 0.5 * s;
            }
        }
    }
    Christoffel { gamma }
}

/// Gaussian curvature K = R_{r phi r phi} / det g from the full jet.
pub fn gaussian_curvature(jet: &MetricJet, gamma: &Christoffel) -> f64 {
    let g = jet.value;
    let det = g[0] * g[2] - g[1] * g[1];
    let gmat = [[g[0], g[1]], [g[1], g[2]]];
    let ginv = [[g[2] / det, -g[1] / det], [-g[1] / det, g[0] / det]];
    let dg = |m: usize, i: usize, j: usize| jet.d1[m][i + j];
    // d_m g^{kl} = -g^{ka} (d_m g_ab) g^{bl}
    let dginv = |m: usize, k: usize, l: usize| {
        let mut s = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                s -= ginv[k][a] * dg(m, a, b) * ginv[b][l];
            }
        }
        s
    };
    // d2g[(m,n)][i][j] with (m,n) symmetric pair index m+n
    let d2g = |m: usize, n: usize, i: usize, j: usize| jet.d2[m + n][i + j];
    // d_m Gamma^k_{ij}
    let dgamma = |m: usize, k: usize, i: usize, j: usize| {
        let mut s = 0.0;
        for l in 0..2 {
            s += dginv(m, k, l) * (dg(i, j, l) + dg(j, i, l) - dg(l, i, j))
                + ginv[k][l] * (d2g(m, i, j, l) + d2g(m, j, i, l) - d2g(m, l, i, j));
        }
        0.5 * s
    };
    // R^l_{phi r phi} = d_r Gamma^l_{phi phi} - d_phi Gamma^l_{r phi}
    //                   + Gamma^l_{r k} Gamma^k_{phi phi} - Gamma^l_{phi k} Gamma^k_{r phi}
    let mut r_rphirphi = 0.0;
    for l in 0..2 {
        let mut rl = dgamma(0, l, 1, 1) - dgamma(1, l, 0, 1);
        for k in 0..2 {
            rl += gamma.get(l, 0, k) * gamma.get(k, 1, 1) - gamma.get(l, 1, k) * gamma.get(k, 0, 1);
        }
        r_rphirphi += gmat[0][l] * rl;
    }
    r_rphirphi / det
}

/// Pointwise residual LHS - RHS of the lower bound
/// sqrt(det g_tau) >= sqrt(det g) (1 + tau/2 <g,f>_g - tau^2/4 |f|_g^2
///                                 - C eps tau^3 |f|_g^2).
pub fn det_expansion_residual(
    g: &MetricField,
    f: &SymTensorField,
    tau: f64,
    eps: f64,
    c: f64,
    r: f64,
    phi: f64,
) -> f64 {
    let gv = g.value(r, phi);
    let fv = f.eval(r, phi);
    let gt = [
        gv.comps[0] + tau * fv.comps()[0],
        gv.comps[1] + tau * fv.comps()[1],
        gv.comps[2] + tau * fv.comps()[2],
    ];
    let det_tau = gt[0] * gt[2] - gt[1] * gt[1];
    let lhs = det_tau.max(0.0).sqrt();
    let gf = crate::tensor::inner_product_pointwise(&g.as_metric_tensor_value(r, phi), &fv, &gv);
    let ff = crate::tensor::inner_product_pointwise(&fv, &fv, &gv);
    let rhs = gv.det().sqrt()
        * (1.0 + 0.5 * tau * gf - 0.25 * tau * tau * ff - c * eps * tau.powi(3) * ff);
    lhs - rhs
}

impl MetricField {
    pub(crate) fn as_metric_tensor_value(&self, r: f64, phi: f64) -> crate::tensor::SymTensorValue {
        crate::tensor::SymTensorValue::rank2(self.value(r, phi).comps)
    }
}

/// Scans a grid and all tau in the given list for the smallest C >= 0 making
/// the residual nonnegative everywhere (0 when already nonnegative with C=0).
pub fn fit_det_expansion_constant(
    g: &MetricField,
    f: &SymTensorField,
    taus: &[f64],
    eps: f64,
    grid: GridSpec,
) -> f64 {
    let (a, b) = g.chart().r_range();
    let mut c_needed: f64 = 0.0;
    for &tau in taus {
        for i in 0..grid.n_r {
            let r = a + (b - a) * (i as f64 + 0.5) / grid.n_r as f64;
            for j in 0..grid.n_phi {
                let phi = crate::chart::TWO_PI * j as f64 / grid.n_phi as f64;
                let res0 = det_expansion_residual(g, f, tau, eps, 0.0, r, phi);
                if res0 < 0.0 {
                    let gv = g.value(r, phi);
                    let fv = f.eval(r, phi);
                    let ff = crate::tensor::inner_product_pointwise(&fv, &fv, &gv);
                    let denom = gv.det().sqrt() * eps * tau.powi(3) * ff;
                    if denom > 0.0 {
                        c_needed = c_needed.max(-res0 / denom);
                    }
                }
            }
        }
    }
    c_needed
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn neck_components_and_derivatives() {
        let g = MetricField::neck();
        let r = 0.37;
        let v = g.value(r, 1.0);
        assert_relative_eq!(v.comps[0], 1.0);
        assert_relative_eq!(v.comps[2], r.cosh().powi(2));
        // Analytic d_r g_phiphi against an independent finite difference.
        let jet = g.jet(r, 1.0).unwrap();
        let fd = fd_first(|x| x.cosh().powi(2), r, 1e-4);
        assert_relative_eq!(jet.d1[0][2], 2.0 * r.cosh() * r.sinh(), epsilon = 1e-12);
        assert!((jet.d1[0][2] - fd).abs() < 1e-8);
    }

    #[test]
    fn flat_metric_has_zero_derivatives_and_curvature() {
        let g = MetricField::flat_cylinder();
        let jet = g.jet(0.2, 0.3).unwrap();
        assert_eq!(jet.d1, [[0.0; 3]; 2]);
        let (_, k) = g.christoffel_curvature(0.2, 0.3).unwrap();
        assert_relative_eq!(k, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn neck_christoffel_and_curvature() {
        let g = MetricField::neck();
        let r = -0.41;
        let (gamma, k) = g.christoffel_curvature(r, 2.0).unwrap();
        assert_relative_eq!(gamma.get(0, 1, 1), -r.cosh() * r.sinh(), epsilon = 1e-10);
        assert_relative_eq!(gamma.get(1, 0, 1), r.tanh(), epsilon = 1e-10);
        assert_relative_eq!(k, -1.0, epsilon = 1e-8);
    }

    #[test]
    fn curvature_of_general_conformal_metric() {
        // g = e^{2 lambda} (dr^2 + dphi^2) has K = -(lap lambda) e^{-2 lambda}.
        let lam = |r: f64, p: f64| 0.1 * (r * r + (2.0 * p).sin() * 0.05);
        let e2 = move |r: f64, p: f64| (2.0 * lam(r, p)).exp();
        let g = MetricField::general(
            ChartDomain::annulus(-1.0, 1.0),
            "conformal",
            [
                ScalarField::from_fn(e2),
                ScalarField::zero(),
                ScalarField::from_fn(e2),
            ],
        );
        let (r, p) = (0.3, 0.7);
        let (_, k) = g.christoffel_curvature(r, p).unwrap();
        let lap = 0.2 - 0.05 * 4.0 * 0.1 * (2.0 * p).sin();
        let exact = -lap * (-2.0 * lam(r, p)).exp();
        assert_relative_eq!(k, exact, max_relative = 1e-5);
    }

    #[test]
    fn covariant_derivative_of_metric_vanishes() {
        // nabla g = 0: d_m g_ij - Gamma^k_{mi} g_kj - Gamma^k_{mj} g_ik = 0.
        let g = MetricField::neck();
        let pts = [(0.1, 0.4), (-0.7, 2.9), (0.55, 5.0)];
        for (r, p) in pts {
            let jet = g.jet(r, p).unwrap();
            let gamma = g.christoffel(r, p);
            let gm = [[jet.value[0], jet.value[1]], [jet.value[1], jet.value[2]]];
            for m in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        let mut nabla = jet.d1[m][i + j];
                        for k in 0..2 {
                            nabla -= gamma.get(k, m, i) * gm[k][j] + gamma.get(k, m, j) * gm[i][k];
                        }
                        assert!(nabla.abs() < 1e-8, "nabla g = {nabla}");
                    }
                }
            }
        }
    }

    #[test]
    fn jet_errors_outside_chart() {
        let g = MetricField::neck();
        assert!(g.jet(1.5, 0.0).is_err());
    }

    #[test]
    fn neck_profile_minimum() {
        let g = MetricField::neck();
        let rev = g.revolution_profile().unwrap();
        assert_relative_eq!(rev.min_f, 1.0, epsilon = 1e-12);
        assert_relative_eq!(rev.r_neck, 0.0, epsilon = 1e-9);
    }
}
