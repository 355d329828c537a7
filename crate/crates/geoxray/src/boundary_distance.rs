//! Marked boundary distances via homotopy-class shooting, energy curves of
//! metric families, diffeomorphism pullbacks (gauge pairs), and the
//! solenoidal gauge normalization.
//!
//! On the annulus the homotopy class of a boundary-to-boundary curve is its
//! total phi-displacement: the requested class is phi_y - phi_x wrapped to
//! (-pi, pi] plus 2 pi k. The shooting solver scans the initial angle,
//! brackets the displacement on branches of constant exit component (where
//! it is monotone), and refines by bisection plus a secant polish.

use std::sync::Arc;

use serde::Serialize;

use crate::chart::{wrap_angle, BoundaryCircle, TWO_PI};
use crate::error::{GeoxError, Result};
use crate::field::ScalarField;
use crate::flow::{integrate_ray, inward_phase, ExitEvent, FlowParams};
use crate::metric::{MetricComponents, MetricField};
use crate::quad::GridSpec;
use crate::tencalc::{solenoidal_decompose, DecomposeOpts, DiscreteSystem, Grid2, TensorGrid};
use crate::tensor::SymTensorField;

/// Homotopy class of boundary-joining curves: the signed phi-winding on the
/// annulus, trivial on the disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HomotopyClass {
    Annulus { winding: i64 },
    Trivial,
}

impl HomotopyClass {
    pub fn winding(&self) -> i64 {
        match self {
            HomotopyClass::Annulus { winding } => *winding,
            HomotopyClass::Trivial => 0,
        }
    }
}

/// A boundary pair (component index, phi coordinate).
pub type BoundaryPoint = (usize, f64);

/// A solved boundary-to-boundary geodesic in a fixed class.
#[derive(Debug, Clone)]
pub struct GeodesicConnection {
    pub from: BoundaryPoint,
    pub to: BoundaryPoint,
    pub class: HomotopyClass,
    /// Initial angle from the inward normal at the start point.
    pub psi: f64,
    /// Unit-speed length = marked distance.
    pub length: f64,
    /// |phi displacement - target| at the solution, in chart units.
    pub endpoint_error: f64,
    /// Brackets found in the scan (uniqueness check: should be 1).
    pub brackets_found: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ShootOpts {
    pub flow: FlowParams,
    /// Endpoint tolerance in chart units (phi mismatch at the exit).
    pub shoot_tol: f64,
    pub scan_points: usize,
    pub max_bisect: usize,
    /// Glancing margin excluded at both ends of the angle range.
    pub angle_margin: f64,
}

impl Default for ShootOpts {
    fn default() -> Self {
        ShootOpts {
            flow: FlowParams::default(),
            shoot_tol: 1e-8,
            scan_points: 257,
            max_bisect: 90,
            angle_margin: 1e-3,
        }
    }
}

/// One shot: exit component and unwrapped phi-displacement of the ray from
/// (circle, phi_x) at angle psi; None when trapped within the horizon or
/// rejected as glancing.
fn shoot(
    g: &MetricField,
    circle: BoundaryCircle,
    phi_x: f64,
    psi: f64,
    flow: &FlowParams,
) -> Option<(usize, f64, f64)> {
    let z = inward_phase(g, circle, phi_x, psi);
    let exit = integrate_ray(g, z, 1.0, flow.horizon, flow, |_, _, _| {}).ok()?;
    match exit {
        ExitEvent::ReachedHorizon { .. } => None,
        ExitEvent::ExitedBoundary { t, point } => {
            let circles = g.chart().boundary_circles();
            let ci = circles
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    (a.1.r - point.x[0]).abs().partial_cmp(&(b.1.r - point.x[0]).abs()).unwrap()
                })
                .map(|(i, _)| i)
                .expect("boundary circles");
            Some((ci, point.x[1] - phi_x, t))
        }
    }
}

/// Marked boundary distance: the unique geodesic from `from` to `to` in the
/// winding class k.
pub fn marked_distance(
    g: &MetricField,
    from: BoundaryPoint,
    to: BoundaryPoint,
    k: i64,
    opts: &ShootOpts,
) -> Result<GeodesicConnection> {
    let circles = g.chart().boundary_circles();
    if from.0 >= circles.len() || to.0 >= circles.len() {
        return Err(GeoxError::InvalidParameter("boundary component out of range".into()));
    }
    let start = circles[from.0];
    let delta0 = wrap_angle(to.1 - from.1);
    let target = delta0 + TWO_PI * k as f64;
    let class = match g.chart() {
        crate::chart::ChartDomain::Annulus { .. } => HomotopyClass::Annulus { winding: k },
        crate::chart::ChartDomain::Disk { .. } => {
            if k != 0 {
                return Err(GeoxError::NoSolutionInClass { k });
            }
            HomotopyClass::Trivial
        }
    };

    // Uniform scan of the initial angle.
    let n = opts.scan_points.max(16);
    let lo = -std::f64::consts::FRAC_PI_2 + opts.angle_margin;
    let hi = std::f64::consts::FRAC_PI_2 - opts.angle_margin;
    let psis: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let shots: Vec<Option<(usize, f64, f64)>> =
        psis.iter().map(|&psi| shoot(g, start, from.1, psi, &opts.flow)).collect();

    let miss = |s: &Option<(usize, f64, f64)>| match s {
        Some((ci, dphi, _)) => Some((*ci, *dphi)),
        None => None,
    };

    // Brackets on same-component branches.
    let mut brackets: Vec<(f64, f64)> = Vec::new();
    for w in 0..n - 1 {
        if let (Some((c0, d0)), Some((c1, d1))) = (miss(&shots[w]), miss(&shots[w + 1])) {
            if c0 == to.0 && c1 == to.0 && (d0 - target) * (d1 - target) <= 0.0 {
                brackets.push((psis[w], psis[w + 1]));
            }
        }
    }

    // If the target displacement lies beyond the scanned branch (large
    // winding), refine geometrically toward branch transitions, where the
    // displacement diverges when approaching the trapped directions.
    if brackets.is_empty() {
        for w in 0..n - 1 {
            let a = miss(&shots[w]);
            let b = miss(&shots[w + 1]);
            let (mut good, bad, d_good) = match (a, b) {
                (Some((c, d)), other) if c == to.0 && other.map(|o| o.0) != Some(c) => {
                    (psis[w], psis[w + 1], d)
                }
                (other, Some((c, d))) if c == to.0 && other.map(|o| o.0) != Some(c) => {
                    (psis[w + 1], psis[w], d)
                }
                _ => continue,
            };
            // Does the branch run toward the target on this side?
            if (target - d_good).abs() < 1e-12 {
                brackets.push((psis[w], psis[w + 1]));
                continue;
            }
            let mut d_prev = d_good;
            let mut frac = 0.5;
            for _ in 0..60 {
                let psi_t = good + (bad - good) * frac;
                match shoot(g, start, from.1, psi_t, &opts.flow) {
                    Some((c, d, _)) if c == to.0 => {
                        if (d_prev - target) * (d - target) <= 0.0 {
                            brackets.push((good.min(psi_t), good.max(psi_t)));
                            break;
                        }
                        good = psi_t;
                        d_prev = d;
                        frac = 0.5;
                    }
                    _ => {
                        // Passed the transition: halve the approach.
                        frac *= 0.5;
                        if frac < 1e-15 {
                            break;
                        }
                    }
                }
            }
            if !brackets.is_empty() {
                break;
            }
        }
    }

    match brackets.len() {
        0 => return Err(GeoxError::NoSolutionInClass { k }),
        1 => {}
        _ => {
            return Err(GeoxError::AmbiguousBracket {
                k,
                angles: brackets.iter().map(|b| 0.5 * (b.0 + b.1)).collect(),
            })
        }
    }
    let (mut a, mut b) = brackets[0];
    let da = shoot(g, start, from.1, a, &opts.flow);
    let mut fa = match da {
        Some((c, d, _)) if c == to.0 => d - target,
        _ => return Err(GeoxError::NoSolutionInClass { k }),
    };

    // Bisection on the displacement.
    let mut best = (a, fa.abs());
    for _ in 0..opts.max_bisect {
        let mid = 0.5 * (a + b);
        match shoot(g, start, from.1, mid, &opts.flow) {
            Some((c, d, _)) if c == to.0 => {
                let fm = d - target;
                if fm.abs() < best.1 {
                    best = (mid, fm.abs());
                }
                if fa * fm <= 0.0 {
                    b = mid;
                } else {
                    a = mid;
                    fa = fm;
                }
                if fm.abs() < opts.shoot_tol || (b - a).abs() < 1e-16 {
                    break;
                }
            }
            _ => {
                // Landed past the branch end (trapped window): shrink
                // toward the still-valid endpoint.
                b = mid;
            }
        }
    }

    // Secant polish from the best bisection angle.
    let mut psi = best.0;
    let eval = |psi: f64| -> Option<(f64, f64)> {
        shoot(g, start, from.1, psi, &opts.flow)
            .filter(|(c, _, _)| *c == to.0)
            .map(|(_, d, t)| (d - target, t))
    };
    let mut cur = eval(psi);
    let h0 = 1e-7;
    for _ in 0..8 {
        let Some((f0, _)) = cur else { break };
        if f0.abs() < opts.shoot_tol * 1e-3 {
            break;
        }
        let Some((f1, _)) = eval(psi + h0) else { break };
        let slope = (f1 - f0) / h0;
        if slope.abs() < 1e-300 {
            break;
        }
        let next = psi - f0 / slope;
        match eval(next) {
            Some((fn_, tn)) if fn_.abs() < f0.abs() => {
                psi = next;
                cur = Some((fn_, tn));
            }
            _ => break,
        }
    }
    let (err, length) = cur.ok_or(GeoxError::NoSolutionInClass { k })?;
    if err.abs() > opts.shoot_tol {
        return Err(GeoxError::NoSolutionInClass { k });
    }
    Ok(GeodesicConnection {
        from,
        to,
        class,
        psi,
        length,
        endpoint_error: err.abs(),
        brackets_found: 1,
    })
}

/// Re-solve in the same class with an initial-angle hint (used along metric
/// families); falls back to the full scan when the local solve fails.
pub fn marked_distance_warm(
    g: &MetricField,
    from: BoundaryPoint,
    to: BoundaryPoint,
    k: i64,
    psi_hint: f64,
    opts: &ShootOpts,
) -> Result<GeodesicConnection> {
    let circles = g.chart().boundary_circles();
    let start = circles[from.0];
    let delta0 = wrap_angle(to.1 - from.1);
    let target = delta0 + TWO_PI * k as f64;
    let eval = |psi: f64| -> Option<(f64, f64)> {
        shoot(g, start, from.1, psi, &opts.flow)
            .filter(|(c, _, _)| *c == to.0)
            .map(|(_, d, t)| (d - target, t))
    };
    let class = match g.chart() {
        crate::chart::ChartDomain::Annulus { .. } => HomotopyClass::Annulus { winding: k },
        _ => HomotopyClass::Trivial,
    };
    let done = |psi: f64, err: f64, len: f64| GeodesicConnection {
        from,
        to,
        class,
        psi,
        length: len,
        endpoint_error: err.abs(),
        brackets_found: 1,
    };
    // Secant from the hint (the hint is typically within microradians).
    if let Some((mut f0, l0)) = eval(psi_hint) {
        if f0.abs() < opts.shoot_tol {
            return Ok(done(psi_hint, f0, l0));
        }
        let mut x0 = psi_hint;
        let mut x1 = psi_hint + 1e-5;
        if let Some((mut f1, l1)) = eval(x1) {
            if f1.abs() < opts.shoot_tol {
                return Ok(done(x1, f1, l1));
            }
            for _ in 0..16 {
                if (f1 - f0).abs() < 1e-300 {
                    break;
                }
                let x2 = x1 - f1 * (x1 - x0) / (f1 - f0);
                if !(-std::f64::consts::FRAC_PI_2..=std::f64::consts::FRAC_PI_2).contains(&x2) {
                    break;
                }
                match eval(x2) {
                    Some((f2, l2)) => {
                        if f2.abs() < opts.shoot_tol {
                            return Ok(done(x2, f2, l2));
                        }
                        x0 = x1;
                        f0 = f1;
                        x1 = x2;
                        f1 = f2;
                    }
                    None => break,
                }
            }
        }
    }
    marked_distance(g, from, to, k, opts)
}

/// Dense scan of the displacement against the initial angle, restricted to
/// rays exiting on `component`; used by the monotonicity/uniqueness checks.
pub fn displacement_scan(
    g: &MetricField,
    from: BoundaryPoint,
    component: usize,
    n: usize,
    opts: &ShootOpts,
) -> Vec<(f64, f64)> {
    let circles = g.chart().boundary_circles();
    let start = circles[from.0];
    let lo = -std::f64::consts::FRAC_PI_2 + opts.angle_margin;
    let hi = std::f64::consts::FRAC_PI_2 - opts.angle_margin;
    (0..n)
        .filter_map(|i| {
            let psi = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            shoot(g, start, from.1, psi, &opts.flow)
                .filter(|(c, _, _)| *c == component)
                .map(|(_, d, _)| (psi, d))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Energy curves
// ---------------------------------------------------------------------------

/// E(tau) data along the family g_tau = g + tau f for a fixed boundary pair
/// and class, with the derivative identity data at tau = 0.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyCurve {
    pub taus: Vec<f64>,
    /// E(tau) = L(tau)^2 for the [0,1]-parameterized connecting geodesic.
    pub energies: Vec<f64>,
    /// Richardson-extrapolated centered difference at tau = 0.
    pub derivative_fd: f64,
    /// The ray-integral prediction: L * integral of pi_2^* f along the base
    /// unit-speed connecting geodesic.
    pub derivative_ray: f64,
    /// max of second differences E(t-dt) - 2 E(t) + E(t+dt) over the grid.
    pub max_second_difference: f64,
}

/// Computes E(tau) by re-shooting the fixed-endpoint fixed-class geodesic
/// for each tau (warm-started), plus E'(0) both ways.
pub fn energy_curve(
    g: &MetricField,
    f: &SymTensorField,
    from: BoundaryPoint,
    to: BoundaryPoint,
    k: i64,
    taus: &[f64],
    opts: &ShootOpts,
) -> Result<EnergyCurve> {
    let spd_grid = GridSpec { n_r: 24, n_phi: 32 };
    let base = marked_distance(g, from, to, k, opts)?;
    let solve_at = |tau: f64, hint: f64| -> Result<GeodesicConnection> {
        if tau == 0.0 {
            return Ok(base.clone());
        }
        let g_tau = g
            .perturbed(f, tau, spd_grid)
            .map_err(|_| GeoxError::ClassLost { tau })?;
        marked_distance_warm(&g_tau, from, to, k, hint, opts).map_err(|_| GeoxError::ClassLost { tau })
    };

    let mut energies = Vec::with_capacity(taus.len());
    let mut hint = base.psi;
    for &tau in taus {
        let conn = solve_at(tau, hint)?;
        hint = conn.psi;
        energies.push(conn.length * conn.length);
    }

    // Centered differences at 0 with one Richardson step.
    let dt = 1e-3;
    let e = |tau: f64, hint: f64| solve_at(tau, hint).map(|c| c.length * c.length);
    let d_full = (e(dt, base.psi)? - e(-dt, base.psi)?) / (2.0 * dt);
    let d_half = (e(0.5 * dt, base.psi)? - e(-0.5 * dt, base.psi)?) / dt;
    let derivative_fd = (4.0 * d_half - d_full) / 3.0;

    // Ray integral along the base connection.
    let z0 = inward_phase(g, g.chart().boundary_circles()[from.0], from.1, base.psi);
    let mut acc = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    integrate_ray(g, z0, 1.0, opts.flow.horizon, &opts.flow, |t, p, _| {
        let val = f.eval(p.x[0], p.x[1]).apply_to_vector(p.v);
        if let Some((tp, vp)) = prev {
            acc += 0.5 * (t - tp) * (vp + val);
        }
        prev = Some((t, val));
    })?;
    let derivative_ray = base.length * acc;

    let mut max_sd = f64::NEG_INFINITY;
    for w in energies.windows(3) {
        max_sd = max_sd.max(w[0] - 2.0 * w[1] + w[2]);
    }
    Ok(EnergyCurve {
        taus: taus.to_vec(),
        energies,
        derivative_fd,
        derivative_ray,
        max_second_difference: max_sd,
    })
}

// ---------------------------------------------------------------------------
// Gauge pullbacks
// ---------------------------------------------------------------------------

/// A smooth vector field on the chart with exact Jacobian and Hessian
/// (hessian[i] = [d_rr, d_rphi, d_phiphi] of component i).
#[derive(Clone)]
pub struct VectorField2 {
    value: Arc<dyn Fn(f64, f64) -> [f64; 2] + Send + Sync>,
    jacobian: Arc<dyn Fn(f64, f64) -> [[f64; 2]; 2] + Send + Sync>,
    hessian: Arc<dyn Fn(f64, f64) -> [[f64; 3]; 2] + Send + Sync>,
}

impl VectorField2 {
    pub fn new(
        value: impl Fn(f64, f64) -> [f64; 2] + Send + Sync + 'static,
        jacobian: impl Fn(f64, f64) -> [[f64; 2]; 2] + Send + Sync + 'static,
        hessian: impl Fn(f64, f64) -> [[f64; 3]; 2] + Send + Sync + 'static,
    ) -> Self {
        VectorField2 { value: Arc::new(value), jacobian: Arc::new(jacobian), hessian: Arc::new(hessian) }
    }

    pub fn zero() -> Self {
        VectorField2::new(|_, _| [0.0; 2], |_, _| [[0.0; 2]; 2], |_, _| [[0.0; 3]; 2])
    }

    /// Field with components given by scalar fields (jets delegated).
    pub fn from_scalar_fields(fr: ScalarField, fphi: ScalarField) -> Self {
        let (vr, vp) = (fr.clone(), fphi.clone());
        let (jr, jp) = (fr.clone(), fphi.clone());
        VectorField2::new(
            move |r, phi| [vr.eval(r, phi), vp.eval(r, phi)],
            move |r, phi| {
                let gr = jr.grad(r, phi);
                let gp = jp.grad(r, phi);
                [[gr[0], gr[1]], [gp[0], gp[1]]]
            },
            move |r, phi| [fr.hess(r, phi), fphi.hess(r, phi)],
        )
    }

    pub fn eval(&self, r: f64, phi: f64) -> [f64; 2] {
        (self.value)(r, phi)
    }

    pub fn scaled(&self, a: f64) -> VectorField2 {
        let v = self.value.clone();
        let j = self.jacobian.clone();
        let h = self.hessian.clone();
        VectorField2::new(
            move |r, phi| {
                let x = v(r, phi);
                [a * x[0], a * x[1]]
            },
            move |r, phi| {
                let m = j(r, phi);
                [[a * m[0][0], a * m[0][1]], [a * m[1][0], a * m[1][1]]]
            },
            move |r, phi| {
                let m = h(r, phi);
                [
                    [a * m[0][0], a * m[0][1], a * m[0][2]],
                    [a * m[1][0], a * m[1][1], a * m[1][2]],
                ]
            },
        )
    }
}

type Mat2 = [[f64; 2]; 2];
/// Symmetric second derivative data: hess[k][ab] with ab in {rr, rphi, phiphi}.
type Hess2 = [[f64; 3]; 2];

/// Time-t flow map of a vector field, integrated with a fixed number of RK4
/// steps. First and second derivatives are the exact derivatives of the
/// discrete map (chain rule through the stages), so pullback metrics are
/// pullbacks by an exact diffeomorphism with exact jets.
#[derive(Clone)]
pub struct FlowMap {
    field: VectorField2,
    time: f64,
    n_steps: usize,
}

impl FlowMap {
    pub fn new(field: VectorField2, time: f64, n_steps: usize) -> Self {
        FlowMap { field, time, n_steps: n_steps.max(1) }
    }

    /// Point and exact Jacobian.
    pub fn apply(&self, x: [f64; 2]) -> ([f64; 2], Mat2) {
        let h = self.time / self.n_steps as f64;
        let mut y = x;
        let mut jac = [[1.0, 0.0], [0.0, 1.0]];
        for _ in 0..self.n_steps {
            let (y_new, s, _) = self.rk4_sensitivities(y, h, false);
            y = y_new;
            jac = mat_mul(s, jac);
        }
        (y, jac)
    }

    /// Point, Jacobian and second derivative H^k_{ab} of the map.
    pub fn apply_full(&self, x: [f64; 2]) -> ([f64; 2], Mat2, Hess2) {
        let h = self.time / self.n_steps as f64;
        let mut y = x;
        let mut jac = [[1.0, 0.0], [0.0, 1.0]];
        let mut hess: Hess2 = [[0.0; 3]; 2];
        for _ in 0..self.n_steps {
            let (y_new, s, t) = self.rk4_sensitivities(y, h, true);
            // H <- S H + T[J, J]
            let mut new_h: Hess2 = [[0.0; 3]; 2];
            for k in 0..2 {
                for (ab, &(a, b)) in [(0usize, 0usize), (0, 1), (1, 1)].iter().enumerate() {
                    let mut v = 0.0;
                    for m in 0..2 {
                        v += s[k][m] * hess[m][ab];
                    }
                    for m in 0..2 {
                        for n in 0..2 {
                            v += t[k][m + n] * jac[m][a] * jac[n][b];
                        }
                    }
                    new_h[k][ab] = v;
                }
            }
            hess = new_h;
            jac = mat_mul(s, jac);
            y = y_new;
        }
        (y, jac, hess)
    }

    pub fn apply_point(&self, x: [f64; 2]) -> [f64; 2] {
        self.apply(x).0
    }

    /// One RK4 step with first (and optionally second) derivatives of the
    /// step map with respect to its input.
    fn rk4_sensitivities(&self, x: [f64; 2], h: f64, second: bool) -> ([f64; 2], Mat2, Hess2) {
        let eye: Mat2 = [[1.0, 0.0], [0.0, 1.0]];
        let v = |p: [f64; 2]| (self.field.value)(p[0], p[1]);
        let dv = |p: [f64; 2]| (self.field.jacobian)(p[0], p[1]);
        let d2v = |p: [f64; 2]| (self.field.hessian)(p[0], p[1]);
        // Stage positions x_i, their Jacobians A_i and second derivatives B_i.
        let mut y = x;
        let mut ks: [[f64; 2]; 4] = [[0.0; 2]; 4];
        let mut kjs: [Mat2; 4] = [[[0.0; 2]; 2]; 4];
        let mut gs: [Hess2; 4] = [[[0.0; 3]; 2]; 4];
        let mut a_i: Mat2 = eye;
        let mut b_i: Hess2 = [[0.0; 3]; 2];
        let coeffs = [0.0, 0.5 * h, 0.5 * h, h];
        for i in 0..4 {
            if i > 0 {
                let c = coeffs[i];
                y = [x[0] + c * ks[i - 1][0], x[1] + c * ks[i - 1][1]];
                a_i = mat_add(eye, mat_scale(c, kjs[i - 1]));
                if second {
                    for k in 0..2 {
                        for ab in 0..3 {
                            b_i[k][ab] = c * gs[i - 1][k][ab];
                        }
                    }
                }
            }
            ks[i] = v(y);
            let dvi = dv(y);
            kjs[i] = mat_mul(dvi, a_i);
            if second {
                let d2 = d2v(y);
                // G_i = D2V[A, A] + DV . B
                let mut g: Hess2 = [[0.0; 3]; 2];
                for k in 0..2 {
                    for (ab, &(a, b)) in [(0usize, 0usize), (0, 1), (1, 1)].iter().enumerate() {
                        let mut s = 0.0;
                        for m in 0..2 {
                            for n in 0..2 {
                                s += d2[k][m + n] * a_i[m][a] * a_i[n][b];
                            }
                        }
                        for m in 0..2 {
                            s += dvi[k][m] * b_i[m][ab];
                        }
                        g[k][ab] = s;
                    }
                }
                gs[i] = g;
            }
        }
        let y_out = [
            x[0] + h / 6.0 * (ks[0][0] + 2.0 * ks[1][0] + 2.0 * ks[2][0] + ks[3][0]),
            x[1] + h / 6.0 * (ks[0][1] + 2.0 * ks[1][1] + 2.0 * ks[2][1] + ks[3][1]),
        ];
        let msum = mat_add(mat_add(kjs[0], mat_scale(2.0, kjs[1])), mat_add(mat_scale(2.0, kjs[2]), kjs[3]));
        let s_out = mat_add(eye, mat_scale(h / 6.0, msum));
        let mut t_out: Hess2 = [[0.0; 3]; 2];
        if second {
            for k in 0..2 {
                for ab in 0..3 {
                    t_out[k][ab] = h / 6.0
                        * (gs[0][k][ab] + 2.0 * gs[1][k][ab] + 2.0 * gs[2][k][ab] + gs[3][k][ab]);
                }
            }
        }
        (y_out, s_out, t_out)
    }
}

fn mat_mul(a: Mat2, b: Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn mat_add(a: Mat2, b: Mat2) -> Mat2 {
    [[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]]
}

fn mat_scale(s: f64, a: Mat2) -> Mat2 {
    [[s * a[0][0], s * a[0][1]], [s * a[1][0], s * a[1][1]]]
}

struct PullbackComponents {
    base: MetricField,
    flow: FlowMap,
}

impl PullbackComponents {
    fn comps_from(&self, j: &Mat2, gm: &Mat2) -> [f64; 3] {
        // (phi^* g)_{ab} = J^k_a g_{kl} J^l_b
        let mut out = [0.0; 3];
        for a in 0..2 {
            for b in a..2 {
                let mut s = 0.0;
                for k in 0..2 {
                    for l in 0..2 {
                        s += j[k][a] * gm[k][l] * j[l][b];
                    }
                }
                out[a + b] = s;
            }
        }
        out
    }
}

impl MetricComponents for PullbackComponents {
    fn value(&self, r: f64, phi: f64) -> [f64; 3] {
        let (y, j) = self.flow.apply([r, phi]);
        let gm = self.base.value(y[0], y[1]).as_matrix();
        self.comps_from(&j, &gm)
    }

    fn jet1(&self, r: f64, phi: f64) -> ([f64; 3], [[f64; 3]; 2]) {
        let (y, j, h) = self.flow.apply_full([r, phi]);
        let (gv, gd) = self.base.jet1(y[0], y[1]);
        let gm = [[gv[0], gv[1]], [gv[1], gv[2]]];
        let value = self.comps_from(&j, &gm);
        // d_c (J^k_a g_kl J^l_b) = H^k_{ca} g_kl J^l_b + J^k_a H^l_{cb} g_kl
        //                         + J^k_a (d_m g_kl) J^m_c J^l_b
        let mut d1 = [[0.0; 3]; 2];
        for c in 0..2 {
            for a in 0..2 {
                for b in a..2 {
                    let mut s = 0.0;
                    for k in 0..2 {
                        for l in 0..2 {
                            s += h[k][c + a] * gm[k][l] * j[l][b]
                                + j[k][a] * gm[k][l] * h[l][c + b];
                            for m in 0..2 {
                                s += j[k][a] * gd[m][k + l] * j[m][c] * j[l][b];
                            }
                        }
                    }
                    d1[c][a + b] = s;
                }
            }
        }
        (value, d1)
    }
}

/// Pullback (phi_{V,t})^* g by the time-t flow of V. V must vanish near the
/// boundary so the flow fixes it; this is verified on a sampling grid, as is
/// the flow staying inside the chart.
pub fn gauge_pull(v: &VectorField2, t: f64, g: &MetricField, n_steps: usize) -> Result<MetricField> {
    let chart = g.chart();
    let flow = FlowMap::new(v.clone(), t, n_steps);
    let (lo, hi) = chart.r_range();
    // Sample check: chart preserved, boundary fixed.
    for i in 0..25 {
        let r = lo + (hi - lo) * i as f64 / 24.0;
        for j in 0..32 {
            let phi = TWO_PI * j as f64 / 32.0;
            let y = flow.apply_point([r, phi]);
            if !chart.contains_r(y[0]) {
                return Err(GeoxError::LeftChart { r: y[0], phi: y[1] });
            }
            if (i == 0 || i == 24) && ((y[0] - r).abs() > 1e-14 || (y[1] - phi).abs() > 1e-14) {
                return Err(GeoxError::InvalidParameter(
                    "gauge field does not vanish at the boundary".into(),
                ));
            }
        }
    }
    Ok(MetricField::from_components(
        chart,
        &format!("{}_pulled", g.name()),
        Arc::new(PullbackComponents { base: g.clone(), flow }),
    ))
}

/// The difference phi^* g - g as a tensor field (values exact, derivatives
/// by finite differences).
pub fn metric_difference(a: &MetricField, b: &MetricField) -> SymTensorField {
    let comps = (0..3)
        .map(|c| {
            let a = a.clone();
            let b = b.clone();
            ScalarField::from_fn(move |r, phi| a.value(r, phi).comps[c] - b.value(r, phi).comps[c])
        })
        .collect();
    SymTensorField::new(2, comps).expect("rank 2")
}

// ---------------------------------------------------------------------------
// Solenoidal gauge normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GaugeOpts {
    pub grid: (usize, usize),
    pub gauge_tol: f64,
    pub max_iter: usize,
    pub flow_steps: usize,
    /// Radial sine modes and phi harmonics of the smooth lift of p.
    pub fit_modes: (usize, usize),
    pub decompose: DecomposeOpts,
}

impl Default for GaugeOpts {
    fn default() -> Self {
        GaugeOpts {
            grid: (48, 96),
            gauge_tol: 1e-6,
            max_iter: 12,
            flow_steps: 16,
            fit_modes: (10, 8),
            decompose: DecomposeOpts::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GaugeReport {
    /// ||D*(g'' - g)||_{M1} after each iteration (index 0 = input).
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Picard iteration pulling g' back to the solenoidal gauge of g: solve the
/// Dirichlet problem for the potential part of the current difference, flow
/// along (minus half) its g-dual and pull back, until the discrete
/// divergence of the difference is below tolerance.
pub fn solenoidal_gauge_normalize(
    g: &MetricField,
    g_prime: &MetricField,
    opts: &GaugeOpts,
) -> Result<(MetricField, GaugeReport)> {
    let grid = Arc::new(Grid2::new(g.chart(), opts.grid.0, opts.grid.1)?);
    let sys = DiscreteSystem::new(g, grid.clone())?;
    let mut current = g_prime.clone();
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..=opts.max_iter {
        let diff = TensorGrid::sample(&metric_difference(&current, g), grid.clone());
        let dstar = sys.apply_dstar(&sys.tensor_vec(&diff));
        let res = sys.m1_norm(&dstar);
        residuals.push(res);
        if res <= opts.gauge_tol {
            converged = true;
            break;
        }
        if iterations == opts.max_iter {
            break;
        }
        let dec = solenoidal_decompose(&diff, &sys, opts.decompose)?;
        let p_smooth = fit_one_form(&dec.p, opts.fit_modes.0, opts.fit_modes.1);
        // L_V g = 2 D(V-flat), so cancelling Dp needs V-flat = -p/2.
        let v = dual_vector_field(g, &p_smooth).scaled(-0.5);
        current = gauge_pull(&v, 1.0, &current, opts.flow_steps)?;
        iterations += 1;
    }
    if !converged {
        return Err(GeoxError::GaugeDiverged { history: residuals });
    }
    Ok((current, GaugeReport { residuals, iterations, converged }))
}

/// Least-squares lift of a grid one-form to a smooth closure: phi harmonics
/// (up to k_max) per interior row, then a sine-series fit in r which
/// enforces the Dirichlet condition exactly.
pub fn fit_one_form(p: &TensorGrid, m_modes: usize, k_max: usize) -> SymTensorField {
    assert_eq!(p.rank, 1);
    let grid = &p.grid;
    let (lo, hi) = grid.chart.r_range();
    let width = hi - lo;
    let n_int = grid.n_r - 2;
    let n_phi = grid.n_phi;
    let n_harm = 2 * k_max + 1;
    let mut comp_coeffs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(2);
    for c in 0..2 {
        // Fourier coefficients per interior row: [row][harmonic]
        let mut four = vec![vec![0.0; n_harm]; n_int];
        for (row, f_row) in four.iter_mut().enumerate() {
            let i = row + 1;
            for j in 0..n_phi {
                let v = p.comps[c][grid.idx(i, j)];
                let phi = grid.phi[j];
                f_row[0] += v / n_phi as f64;
                for k in 1..=k_max {
                    f_row[2 * k - 1] += 2.0 * v * (k as f64 * phi).cos() / n_phi as f64;
                    f_row[2 * k] += 2.0 * v * (k as f64 * phi).sin() / n_phi as f64;
                }
            }
        }
        // Sine-series fit per harmonic: profile(w) = sum_m c_m sin(m pi w).
        let mut design = vec![vec![0.0; m_modes]; n_int];
        for (row, d_row) in design.iter_mut().enumerate() {
            let w = (grid.r[row + 1] - lo) / width;
            for (m, dm) in d_row.iter_mut().enumerate() {
                *dm = ((m + 1) as f64 * std::f64::consts::PI * w).sin();
            }
        }
        let gram = {
            let mut gmat = nalgebra::DMatrix::zeros(m_modes, m_modes);
            for a in 0..m_modes {
                for b in 0..m_modes {
                    gmat[(a, b)] = (0..n_int).map(|r| design[r][a] * design[r][b]).sum();
                }
            }
            gmat
        };
        let chol = nalgebra::Cholesky::new(gram).expect("sine design matrix is full rank");
        let mut coeffs = vec![vec![0.0; m_modes]; n_harm];
        for (h, c_h) in coeffs.iter_mut().enumerate() {
            let mut rhs = nalgebra::DVector::zeros(m_modes);
            for m in 0..m_modes {
                rhs[m] = (0..n_int).map(|r| design[r][m] * four[r][h]).sum();
            }
            let sol = chol.solve(&rhs);
            for m in 0..m_modes {
                c_h[m] = sol[m];
            }
        }
        comp_coeffs.push(coeffs);
    }
    let make = |coeffs: Vec<Vec<f64>>| {
        let width_c = width;
        let lo_c = lo;
        let val = {
            let coeffs = coeffs.clone();
            move |r: f64, phi: f64| eval_series(&coeffs, k_max, lo_c, width_c, r, phi, 0)
        };
        let grad = {
            let coeffs = coeffs.clone();
            move |r: f64, phi: f64| {
                [
                    eval_series(&coeffs, k_max, lo_c, width_c, r, phi, 1),
                    eval_series(&coeffs, k_max, lo_c, width_c, r, phi, 2),
                ]
            }
        };
        ScalarField::with_grad(val, grad)
    };
    let pr = make(comp_coeffs[0].clone());
    let pp = make(comp_coeffs[1].clone());
    SymTensorField::one_form(pr, pp)
}

/// Evaluates the sine x Fourier series. Derivative codes: 0 = value,
/// 1 = d/dr, 2 = d/dphi, 3 = d2/dr2, 4 = d2/drdphi, 5 = d2/dphi2.
fn eval_series(
    coeffs: &[Vec<f64>],
    _k_max: usize,
    lo: f64,
    width: f64,
    r: f64,
    phi: f64,
    deriv: usize,
) -> f64 {
    let w = ((r - lo) / width).clamp(0.0, 1.0);
    let r_deriv = matches!(deriv, 1 | 4);
    let r_deriv2 = deriv == 3;
    let phi_deriv = matches!(deriv, 2 | 4);
    let phi_deriv2 = deriv == 5;
    let mut total = 0.0;
    for (h, c_h) in coeffs.iter().enumerate() {
        let harm = if h == 0 {
            if phi_deriv || phi_deriv2 {
                0.0
            } else {
                1.0
            }
        } else {
            let k = h.div_ceil(2) as f64;
            let base_cos = h % 2 == 1;
            if phi_deriv {
                if base_cos {
                    -k * (k * phi).sin()
                } else {
                    k * (k * phi).cos()
                }
            } else if phi_deriv2 {
                if base_cos {
                    -k * k * (k * phi).cos()
                } else {
                    -k * k * (k * phi).sin()
                }
            } else if base_cos {
                (k * phi).cos()
            } else {
                (k * phi).sin()
            }
        };
        if harm == 0.0 {
            continue;
        }
        let mut radial = 0.0;
        for (m, &c) in c_h.iter().enumerate() {
            let mp = (m + 1) as f64 * std::f64::consts::PI;
            radial += if r_deriv {
                c * mp / width * (mp * w).cos()
            } else if r_deriv2 {
                -c * (mp / width) * (mp / width) * (mp * w).sin()
            } else {
                c * (mp * w).sin()
            };
        }
        total += radial * harm;
    }
    total
}

/// The vector field g-dual to a one-form, with an analytic Jacobian built
/// from the metric jet and the form's gradients.
pub fn dual_vector_field(g: &MetricField, p: &SymTensorField) -> VectorField2 {
    assert_eq!(p.rank(), 1);
    let gv = g.clone();
    let pv = p.clone();
    let gj = g.clone();
    let pj = p.clone();
    VectorField2::new(
        move |r, phi| {
            let inv = gv.value(r, phi).inverse();
            let val = pv.eval(r, phi);
            [
                inv[0] * val.get(0) + inv[1] * val.get(1),
                inv[1] * val.get(0) + inv[2] * val.get(1),
            ]
        },
        move |r, phi| {
            let (comps, d1) = gj.jet1(r, phi);
            let gvv = crate::metric::MetricValue { comps };
            let inv = gvv.inverse();
            let gi = [[inv[0], inv[1]], [inv[1], inv[2]]];
            let pr = pj.component(0).eval(r, phi);
            let pp = pj.component(1).eval(r, phi);
            let dpr = pj.component(0).grad(r, phi);
            let dpp = pj.component(1).grad(r, phi);
            let pvec = [pr, pp];
            let dp = [[dpr[0], dpr[1]], [dpp[0], dpp[1]]];
            let mut jac = [[0.0; 2]; 2];
            for i in 0..2 {
                for m in 0..2 {
                    // d_m (g^{ik} p_k) = -g^{ia} d_m g_{ab} g^{bk} p_k + g^{ik} d_m p_k
                    let mut s = 0.0;
                    for k in 0..2 {
                        s += gi[i][k] * dp[k][m];
                        for a in 0..2 {
                            for b in 0..2 {
                                s -= gi[i][a] * d1[m][a + b] * gi[b][k] * pvec[k];
                            }
                        }
                    }
                    jac[i][m] = s;
                }
            }
            jac
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::bump_field;
    use crate::flow::{clairaut_oracle, ClairautClass};
    use approx::assert_relative_eq;

    fn neck() -> MetricField {
        MetricField::neck()
    }

    fn interior_bump_vfield(amp_r: f64, amp_phi: f64) -> VectorField2 {
        let fr = ScalarField::scale(&bump_field(0.15, 1.2, 0.5, 1.4), amp_r);
        let fp = ScalarField::scale(&bump_field(-0.1, 2.8, 0.45, 1.2), amp_phi);
        VectorField2::from_scalar_fields(fr, fp)
    }

    #[test]
    fn disk_distance_is_chord_length() {
        let g = MetricField::euclid_disk();
        let opts = ShootOpts { flow: FlowParams::with_step(5e-4), ..Default::default() };
        for (a, b) in [(0.0, 1.2), (0.5, 2.0), (3.0, 4.4)] {
            let conn = marked_distance(&g, (0, a), (0, b), 0, &opts).unwrap();
            let chord = 2.0 * ((b - a) / 2.0).sin().abs();
            assert_relative_eq!(conn.length, chord, epsilon = 1e-8);
            assert_eq!(conn.brackets_found, 1);
        }
        // Non-trivial classes do not exist on the disk.
        assert!(matches!(
            marked_distance(&g, (0, 0.0), (0, 1.0), 1, &opts),
            Err(GeoxError::NoSolutionInClass { .. })
        ));
    }

    #[test]
    fn neck_same_side_windings_match_clairaut_lengths() {
        let g = neck();
        let opts = ShootOpts::default();
        let (from, to) = ((0usize, 0.3), (0usize, 1.1));
        for k in [0i64, 1, -1] {
            let conn = marked_distance(&g, from, to, k, &opts).unwrap();
            // Against the Clairaut oracle along the solved initial angle.
            let z = inward_phase(&g, g.chart().boundary_circles()[0], from.1, conn.psi);
            let rep = clairaut_oracle(&g, &z).unwrap();
            match rep.class {
                ClairautClass::Returning { length, dphi, .. } => {
                    assert_relative_eq!(conn.length, length, epsilon = 1e-5);
                    let target = wrap_angle(to.1 - from.1) + TWO_PI * k as f64;
                    assert_relative_eq!(dphi, target, epsilon = 1e-5);
                }
                _ => panic!("same-side connection must be of returning type"),
            }
        }
    }

    #[test]
    fn neck_cross_side_distance_matches_oracle() {
        let g = neck();
        let opts = ShootOpts::default();
        let conn = marked_distance(&g, (0, 0.0), (1, 0.9), 0, &opts).unwrap();
        let z = inward_phase(&g, g.chart().boundary_circles()[0], 0.0, conn.psi);
        let rep = clairaut_oracle(&g, &z).unwrap();
        match rep.class {
            ClairautClass::Crossing { length, .. } => {
                assert_relative_eq!(conn.length, length, epsilon = 1e-5)
            }
            _ => panic!("cross-side connection must cross"),
        }
    }

    #[test]
    fn symmetry_under_endpoint_swap() {
        let g = neck();
        let opts = ShootOpts::default();
        let d1 = marked_distance(&g, (0, 0.2), (0, 1.4), 1, &opts).unwrap();
        let d2 = marked_distance(&g, (0, 1.4), (0, 0.2), -1, &opts).unwrap();
        assert!((d1.length - d2.length).abs() < 2.0 * 1e-8 + 1e-10);
    }

    #[test]
    fn displacement_is_monotone_on_returning_branch() {
        let g = neck();
        let scan = displacement_scan(&g, (0, 0.0), 0, 400, &ShootOpts::default());
        // Restrict to the positive-angle returning branch and check strict
        // monotonicity of the displacement.
        let branch: Vec<f64> =
            scan.iter().filter(|(psi, _)| *psi > 0.0).map(|(_, d)| *d).collect();
        assert!(branch.len() > 50);
        for w in branch.windows(2) {
            assert!(w[1] > w[0], "displacement not monotone: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn energy_derivative_vanishes_for_potential_perturbations() {
        let g = neck();
        let p = crate::tencalc::boundary_vanishing_one_form(&g, 0.05, 0.04, 2);
        let dp = crate::tencalc::sym_derivative(&p, &g).unwrap();
        let opts = ShootOpts { shoot_tol: 1e-10, ..Default::default() };
        let taus: Vec<f64> = (0..5).map(|i| i as f64 * 0.05).collect();
        let curve = energy_curve(&g, &dp, (0, 0.4), (0, 1.6), 0, &taus, &opts).unwrap();
        assert!(curve.derivative_fd.abs() < 1e-6, "E'(0) = {}", curve.derivative_fd);
        assert!(curve.derivative_ray.abs() < 1e-6);
    }

    #[test]
    fn energy_derivative_matches_ray_integral() {
        let g = neck();
        let f = SymTensorField::conformal_bump(&g, (0.2, 1.0), (0.5, 1.0), 0.05);
        let opts = ShootOpts { shoot_tol: 1e-10, ..Default::default() };
        let taus: Vec<f64> = (0..=8).map(|i| i as f64 * 0.125).collect();
        let curve = energy_curve(&g, &f, (0, 0.3), (0, 1.8), 1, &taus, &opts).unwrap();
        assert_relative_eq!(curve.derivative_fd, curve.derivative_ray, max_relative = 1e-4);
        // Concavity.
        assert!(curve.max_second_difference <= 1e-6, "{}", curve.max_second_difference);
    }

    #[test]
    fn zero_field_pullback_is_identity() {
        let g = neck();
        let v = VectorField2::new(|_, _| [0.0, 0.0], |_, _| [[0.0; 2]; 2]);
        let pulled = gauge_pull(&v, 1.0, &g, 8).unwrap();
        for (r, phi) in [(0.0, 0.0), (0.5, 2.0), (-0.8, 4.0)] {
            let a = pulled.value(r, phi);
            let b = g.value(r, phi);
            for c in 0..3 {
                assert_relative_eq!(a.comps[c], b.comps[c], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn gauge_pull_preserves_volume_and_marked_distances() {
        let g = neck();
        let v = interior_bump_vfield(0.08, 0.06);
        let pulled = gauge_pull(&v, 1.0, &g, 16).unwrap();
        // Volume is invariant under boundary-fixing diffeomorphisms.
        let spec = GridSpec { n_r: 48, n_phi: 64 };
        let va = crate::quad::volume(&g, spec).unwrap();
        let vb = crate::quad::volume(&pulled, spec).unwrap();
        assert_relative_eq!(va, vb, max_relative = 1e-9);
        // Marked distances are preserved.
        let opts = ShootOpts { flow: FlowParams::with_step(2e-3), ..Default::default() };
        for (pair, k) in [(((0usize, 0.3), (0usize, 1.5)), 0i64), (((0, 2.0), (1, 0.5)), 0)] {
            let d0 = marked_distance(&g, pair.0, pair.1, k, &opts).unwrap();
            let d1 = marked_distance_warm(&pulled, pair.0, pair.1, k, d0.psi, &opts).unwrap();
            assert!(
                (d0.length - d1.length).abs() < 10.0 * opts.shoot_tol + 1e-7,
                "gap {}",
                (d0.length - d1.length).abs()
            );
        }
    }

    #[test]
    fn gauge_normalization_converges_and_preserves_distance() {
        let g = neck();
        let v = interior_bump_vfield(0.01, 0.008);
        let g_prime = gauge_pull(&v, 1.0, &g, 16).unwrap();
        let opts = GaugeOpts::default();
        let (g_dd, report) = solenoidal_gauge_normalize(&g, &g_prime, &opts).unwrap();
        assert!(report.converged);
        assert!(*report.residuals.last().unwrap() <= opts.gauge_tol);
        // Residuals contract.
        for w in report.residuals.windows(2) {
            assert!(w[1] < w[0], "residuals: {:?}", report.residuals);
        }
        // The normalized metric keeps the marked distances of g'. Solve the
        // cheap base problem first and warm-start the pullback solves.
        let sopts = ShootOpts { flow: FlowParams::with_step(2e-3), ..Default::default() };
        let d_g = marked_distance(&g, (0, 0.5), (0, 2.0), 0, &sopts).unwrap();
        let d_prime = marked_distance_warm(&g_prime, (0, 0.5), (0, 2.0), 0, d_g.psi, &sopts).unwrap();
        let d_dd = marked_distance_warm(&g_dd, (0, 0.5), (0, 2.0), 0, d_prime.psi, &sopts).unwrap();
        assert!((d_prime.length - d_dd.length).abs() < 1e-6, "gap {}", (d_prime.length - d_dd.length).abs());
    }

    #[test]
    fn trivial_normalization_returns_input() {
        let g = neck();
        let (g_dd, report) = solenoidal_gauge_normalize(&g, &g, &GaugeOpts::default()).unwrap();
        assert_eq!(report.iterations, 0);
        let a = g_dd.value(0.3, 1.0);
        let b = g.value(0.3, 1.0);
        for c in 0..3 {
            assert_relative_eq!(a.comps[c], b.comps[c], epsilon = 1e-14);
        }
    }
}
