//! Geodesic flow on the unit sphere bundle: RK4 integration with boundary
//! exit localization, escape times, the exact Clairaut oracle on surfaces of
//! revolution, Jacobi fields and Floquet exponents, boundary convexity, and
//! the collar extension of the manifold.

use serde::Serialize;

use crate::chart::{wrap_angle, BoundaryCircle, ChartDomain};
use crate::error::{GeoxError, Result};
use crate::metric::{christoffel_from_jet, MetricField};
use crate::quad::GaussLegendre;

/// A point of SM: chart position and tangent vector components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint {
    pub x: [f64; 2],
    pub v: [f64; 2],
}

impl PhasePoint {
    /// Unit-speed phase point with direction given by the frame angle alpha
    /// (measured from the radial frame vector).
    pub fn from_angle(g: &MetricField, r: f64, phi: f64, alpha: f64) -> Self {
        PhasePoint { x: [r, phi], v: g.unit_vector(r, phi, alpha) }
    }

    /// Rescales v to unit g-norm.
    pub fn normalized(mut self, g: &MetricField) -> Self {
        let n = g.value(self.x[0], self.x[1]).norm(self.v);
        self.v = [self.v[0] / n, self.v[1] / n];
        self
    }

    pub fn reversed(&self) -> Self {
        PhasePoint { x: self.x, v: [-self.v[0], -self.v[1]] }
    }

    /// Phase distance with phi compared modulo 2*pi.
    pub fn dist(&self, other: &PhasePoint) -> f64 {
        (self.x[0] - other.x[0]).abs()
            + wrap_angle(self.x[1] - other.x[1]).abs()
            + (self.v[0] - other.v[0]).abs()
            + (self.v[1] - other.v[1]).abs()
    }
}

/// How an integrated ray ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExitEvent {
    /// Left through the boundary at time `t` (bisection-refined).
    ExitedBoundary { t: f64, point: PhasePoint },
    /// Still inside at the integration horizon.
    ReachedHorizon { t: f64 },
}

impl ExitEvent {
    pub fn exit_time(&self) -> Option<f64> {
        match self {
            ExitEvent::ExitedBoundary { t, .. } => Some(*t),
            ExitEvent::ReachedHorizon { .. } => None,
        }
    }
}

/// Integrator parameters.
#[derive(Debug, Clone, Copy)]
pub struct FlowParams {
    pub step: f64,
    pub horizon: f64,
    pub tangency_tol: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams { step: 1e-3, horizon: 50.0, tangency_tol: 1e-8 }
    }
}

impl FlowParams {
    pub fn with_step(step: f64) -> Self {
        FlowParams { step, ..Default::default() }
    }
}

/// A recorded geodesic orbit.
#[derive(Debug, Clone)]
pub struct RayTrace {
    pub times: Vec<f64>,
    pub points: Vec<PhasePoint>,
    pub exit: ExitEvent,
    /// |v|_g - 1 before the per-step renormalization.
    pub speed_drift: Vec<f64>,
    /// Clairaut constant g_phiphi * v^phi per sample (revolution metrics).
    pub clairaut: Option<Vec<f64>>,
}

impl RayTrace {
    pub fn length(&self) -> f64 {
        match self.exit {
            ExitEvent::ExitedBoundary { t, .. } => t,
            ExitEvent::ReachedHorizon { t } => t,
        }
    }

    pub fn end(&self) -> PhasePoint {
        match self.exit {
            ExitEvent::ExitedBoundary { point, .. } => point,
            ExitEvent::ReachedHorizon { .. } => *self.points.last().expect("nonempty trace"),
        }
    }

    /// Maximum Clairaut drift per unit time along the trace.
    pub fn clairaut_drift_rate(&self) -> Option<f64> {
        let log = self.clairaut.as_ref()?;
        let c0 = *log.first()?;
        let mut worst: f64 = 0.0;
        for (c, t) in log.iter().zip(&self.times) {
            let rate = (c - c0).abs() / t.abs().max(1.0);
            worst = worst.max(rate);
        }
        Some(worst)
    }
}

#[inline]
fn geodesic_rhs(g: &MetricField, s: &[f64; 4]) -> [f64; 4] {
    let (val, d1) = g.jet1(s[0], s[1]);
    let gamma = christoffel_from_jet(&val, &d1);
    let (vr, vp) = (s[2], s[3]);
    let ar = -(gamma.gamma[0][0] * vr * vr + 2.0 * gamma.gamma[0][1] * vr * vp + gamma.gamma[0][2] * vp * vp);
    let ap = -(gamma.gamma[1][0] * vr * vr + 2.0 * gamma.gamma[1][1] * vr * vp + gamma.gamma[1][2] * vp * vp);
    [vr, vp, ar, ap]
}

#[inline]
fn rk4_step(g: &MetricField, s: &[f64; 4], h: f64) -> [f64; 4] {
    let k1 = geodesic_rhs(g, s);
    let s2 = add_scaled(s, 0.5 * h, &k1);
    let k2 = geodesic_rhs(g, &s2);
    let s3 = add_scaled(s, 0.5 * h, &k2);
    let k3 = geodesic_rhs(g, &s3);
    let s4 = add_scaled(s, h, &k3);
    let k4 = geodesic_rhs(g, &s4);
    let mut out = *s;
    for i in 0..4 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

#[inline]
fn add_scaled(s: &[f64; 4], a: f64, d: &[f64; 4]) -> [f64; 4] {
    [s[0] + a * d[0], s[1] + a * d[1], s[2] + a * d[2], s[3] + a * d[3]]
}

fn renormalize(g: &MetricField, s: &mut [f64; 4]) -> f64 {
    let n = g.value(s[0], s[1]).norm([s[2], s[3]]);
    s[2] /= n;
    s[3] /= n;
    n - 1.0
}

/// Inner product <v, nu>_g with the outward unit normal at a boundary circle.
pub fn boundary_normal_component(g: &MetricField, circle: BoundaryCircle, phi: f64, v: [f64; 2]) -> f64 {
    let gv = g.value(circle.r, phi);
    // Outward unit normal: orthogonal to d_phi, radial sign = outward_sign.
    let raw = [1.0, -gv.comps[1] / gv.comps[2]];
    let n = gv.norm(raw);
    let nu = [circle.outward_sign * raw[0] / n, circle.outward_sign * raw[1] / n];
    gv.inner(v, nu)
}

fn circle_at_exit(chart: ChartDomain, r: f64) -> BoundaryCircle {
    let circles = chart.boundary_circles();
    circles
        .into_iter()
        .min_by(|a, b| (a.r - r).abs().partial_cmp(&(b.r - r).abs()).unwrap())
        .expect("chart has boundary")
}

/// Core integrator: fixed-step RK4 with per-step renormalization, streaming
/// samples to `on_sample`, boundary exit localized by bisection to 1e-10 in
/// time. `t_end` is the (positive) time budget; `dir` = +-1.
pub fn integrate_ray(
    g: &MetricField,
    z: PhasePoint,
    dir: f64,
    t_end: f64,
    params: &FlowParams,
    mut on_sample: impl FnMut(f64, &PhasePoint, f64),
) -> Result<ExitEvent> {
    let chart = g.chart();
    let z = z.normalized(g);
    let mut s = [z.x[0], z.x[1], dir * z.v[0], dir * z.v[1]];
    let h = params.step;
    let mut t = 0.0;
    let clearance0 = chart.boundary_clearance(s[0]);
    if clearance0 < -1e-12 {
        return Err(GeoxError::LeftChart { r: s[0], phi: s[1] });
    }
    if clearance0 < 1e-12 {
        // Boundary start: apply the glancing rejection directly.
        let circle = circle_at_exit(chart, s[0]);
        let inner = boundary_normal_component(g, circle, s[1], [s[2], s[3]]);
        if inner.abs() < params.tangency_tol {
            return Err(GeoxError::Tangency { inner, tol: params.tangency_tol });
        }
    }
    on_sample(0.0, &phase_of(&s, dir), 0.0);
    let max_steps = (t_end / h).ceil() as usize + 2;
    for _ in 0..max_steps {
        if t >= t_end - 1e-14 {
            return Ok(ExitEvent::ReachedHorizon { t });
        }
        let step = h.min(t_end - t);
        let s_new = rk4_step(g, &s, step);
        if chart.boundary_clearance(s_new[0]) < 0.0 {
            // Bisection on the step fraction; clearance >= 0 at a, < 0 at b.
            let (mut a, mut b) = (0.0f64, 1.0f64);
            for _ in 0..45 {
                let mid = 0.5 * (a + b);
                let sm = rk4_step(g, &s, step * mid);
                if chart.boundary_clearance(sm[0]) >= 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            let frac = 0.5 * (a + b);
            let mut s_exit = rk4_step(g, &s, step * frac);
            let drift = renormalize(g, &mut s_exit);
            let t_exit = t + step * frac;
            let point = phase_of(&s_exit, dir);
            let circle = circle_at_exit(chart, s_exit[0]);
            let inner = boundary_normal_component(g, circle, s_exit[1], [s_exit[2], s_exit[3]]);
            if inner.abs() < params.tangency_tol {
                return Err(GeoxError::Tangency { inner, tol: params.tangency_tol });
            }
            on_sample(t_exit, &point, drift);
            return Ok(ExitEvent::ExitedBoundary { t: t_exit, point });
        }
        s = s_new;
        let drift = renormalize(g, &mut s);
        t += step;
        on_sample(t, &phase_of(&s, dir), drift);
        if matches!(chart, ChartDomain::Disk { .. }) && s[0] < 1e-6 {
            return Err(GeoxError::LeftChart { r: s[0], phi: s[1] });
        }
    }
    Ok(ExitEvent::ReachedHorizon { t })
}

#[inline]
fn phase_of(s: &[f64; 4], dir: f64) -> PhasePoint {
    // Samples are reported with the original (forward) orientation of v.
    PhasePoint { x: [s[0], s[1]], v: [dir * s[2], dir * s[3]] }
}

/// Integrates the geodesic through `z` for time `t` (negative = backward) and
/// records the full trace.
pub fn geodesic_flow(g: &MetricField, z: PhasePoint, t: f64, params: &FlowParams) -> Result<RayTrace> {
    let dir = if t < 0.0 { -1.0 } else { 1.0 };
    let is_rev = g.revolution_profile().is_some();
    let mut times = Vec::new();
    let mut points = Vec::new();
    let mut drifts = Vec::new();
    let mut clair = if is_rev { Some(Vec::new()) } else { None };
    let exit = integrate_ray(g, z, dir, t.abs(), params, |tt, p, drift| {
        times.push(dir * tt);
        points.push(*p);
        drifts.push(drift);
        if let Some(c) = clair.as_mut() {
            c.push(clairaut_constant(g, p));
        }
    })?;
    Ok(RayTrace { times, points, exit, speed_drift: drifts, clairaut: clair })
}

/// Clairaut constant c = g_phiphi * v^phi (= f(r)^2 phi-dot on revolution
/// surfaces).
pub fn clairaut_constant(g: &MetricField, z: &PhasePoint) -> f64 {
    let gv = g.value(z.x[0], z.x[1]);
    gv.comps[2] * z.v[1] + gv.comps[1] * z.v[0]
}

/// Escape time result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Escape {
    Exit(f64),
    /// Horizon verdict: no exit before `params.horizon`.
    Trapped,
}

impl Escape {
    pub fn is_trapped(&self) -> bool {
        matches!(self, Escape::Trapped)
    }
}

/// Forward (`forward = true`) or backward escape time, horizon-capped.
pub fn escape_time(g: &MetricField, z: PhasePoint, forward: bool, params: &FlowParams) -> Result<Escape> {
    let dir = if forward { 1.0 } else { -1.0 };
    let exit = integrate_ray(g, z, dir, params.horizon, params, |_, _, _| {})?;
    Ok(match exit {
        ExitEvent::ExitedBoundary { t, .. } => Escape::Exit(t),
        ExitEvent::ReachedHorizon { .. } => Escape::Trapped,
    })
}

/// Exact classification of a geodesic on a surface of revolution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ClairautClass {
    /// |c| below the neck value: the ray crosses the annulus.
    Crossing { length: f64, dphi: f64 },
    /// |c| above the neck value: turning point where f = |c|; the ray
    /// returns to the boundary on its own side.
    Returning { turning_r: f64, length: f64, dphi: f64 },
    /// |c| equals the neck value: asymptotic to the trapped orbit.
    Trapped,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClairautReport {
    pub c: f64,
    pub class: ClairautClass,
}

const CLAIRAUT_TRAP_TOL: f64 = 1e-12;

/// Exact oracle for escape structure on revolution metrics with an interior
/// neck (minimum of the profile). Errors on non-revolution metrics or charts
/// whose profile minimum sits at the boundary.
pub fn clairaut_oracle(g: &MetricField, z: &PhasePoint) -> Result<ClairautReport> {
    let rev = g
        .revolution_profile()
        .ok_or_else(|| GeoxError::Unsupported("clairaut_oracle requires a revolution metric".into()))?
        .clone();
    let chart = g.chart();
    let (r_lo, r_hi) = chart.r_range();
    let margin = 1e-3 * (r_hi - r_lo);
    if rev.r_neck <= r_lo + margin || rev.r_neck >= r_hi - margin {
        return Err(GeoxError::Unsupported(
            "clairaut_oracle requires the profile minimum strictly inside the chart".into(),
        ));
    }
    let z = z.normalized(g);
    let c = clairaut_constant(g, &z);
    let f = |r: f64| (rev.f)(r).0;
    let r0 = z.x[0];
    let vr = z.v[0];
    let ca = c.abs();

    if (ca - rev.min_f).abs() <= CLAIRAUT_TRAP_TOL.max(1e-12 * rev.min_f) {
        return Ok(ClairautReport { c, class: ClairautClass::Trapped });
    }

    let speed_integrand = |r: f64| {
        let fr = f(r);
        let s = 1.0 - (ca / fr) * (ca / fr);
        1.0 / s.max(1e-300).sqrt()
    };
    let dphi_integrand = |r: f64| speed_integrand(r) * c / (f(r) * f(r));

    if ca < rev.min_f {
        // Crossing: r is monotone along the ray; exits on the side of travel.
        // phi-dot = c / f^2 keeps the sign of c, so dphi integrates with the
        // positive r-orientation regardless of the radial direction.
        let heading = if vr >= 0.0 { 1.0 } else { -1.0 };
        let r_exit = if heading > 0.0 { r_hi } else { r_lo };
        let (a, b) = (r0.min(r_exit), r0.max(r_exit));
        let length = gl_integral(&speed_integrand, a, b, 400);
        let dphi = gl_integral(&dphi_integrand, a, b, 400);
        return Ok(ClairautReport { c, class: ClairautClass::Crossing { length, dphi } });
    }

    // Returning: the turning point is the solution of f(r*) = |c| on the
    // same side of the neck as r0.
    let side = if r0 >= rev.r_neck { 1.0 } else { -1.0 };
    let (lo, hi) = if side > 0.0 { (rev.r_neck, r_hi) } else { (r_lo, rev.r_neck) };
    let r_star = bisect_profile(&f, ca, lo, hi)?;
    let r_out = if side > 0.0 { r_hi } else { r_lo };
    // Segment lengths via the turning-point substitution r = r* + s * u^2.
    let seg_len = |r_from: f64| turning_integral(&f, ca, r_star, r_from, side, false);
    let seg_phi = |r_from: f64| turning_integral(&f, ca, r_star, r_from, side, true);
    let toward_neck = vr * side < -1e-14;
    let (length, dphi_abs) = if toward_neck || vr.abs() <= 1e-14 {
        // In to the turning point, back out to the boundary.
        (seg_len(r0) + seg_len(r_out), seg_phi(r0) + seg_phi(r_out))
    } else {
        // Heading straight out.
        (seg_len(r_out) - seg_len(r0), seg_phi(r_out) - seg_phi(r0))
    };
    Ok(ClairautReport {
        c,
        class: ClairautClass::Returning { turning_r: r_star, length, dphi: dphi_abs * c.signum() },
    })
}

fn gl_integral(f: &impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let gl = GaussLegendre::new(n);
    let (x, w) = gl.mapped(a, b);
    x.iter().zip(&w).map(|(&x, &w)| w * f(x)).sum()
}

fn bisect_profile(f: &impl Fn(f64) -> f64, target: f64, lo: f64, hi: f64) -> Result<f64> {
    // f is monotone away from the neck on each side; root of f(r) = target.
    let side_sign = if f(hi) >= f(lo) { 1.0 } else { -1.0 };
    let g = |r: f64| side_sign * (f(r) - target);
    let (mut a, mut b) = (lo, hi);
    if g(a) > 0.0 || g(b) < 0.0 {
        return Err(GeoxError::Unsupported(format!(
            "no turning point with f = {target} in [{lo}, {hi}]"
        )));
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if g(m) <= 0.0 {
            a = m;
        } else {
            b = m;
        }
        if b - a < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (a + b))
}

/// Integral from the turning point r* out to r_to of dr / sqrt(1 - c^2/f^2)
/// (or the dphi integrand), regularized by r = r* + side * u^2.
fn turning_integral(f: &impl Fn(f64) -> f64, ca: f64, r_star: f64, r_to: f64, side: f64, dphi: bool) -> f64 {
    let span = (r_to - r_star) * side;
    if span <= 0.0 {
        return 0.0;
    }
    let u_max = span.sqrt();
    let integrand = |u: f64| {
        let r = r_star + side * u * u;
        let fr = f(r);
        let s = (1.0 - (ca / fr) * (ca / fr)).max(1e-300);
        let base = 2.0 * u / s.sqrt();
        if dphi {
            base * ca / (fr * fr)
        } else {
            base
        }
    };
    gl_integral(&integrand, 0.0, u_max, 400)
}

/// Geodesic curvature of each boundary circle with respect to the inward
/// normal, with the strict-convexity verdict.
#[derive(Debug, Clone, Serialize)]
pub struct ConvexityReport {
    /// (r of circle, min over phi of k_g)
    pub circles: Vec<(f64, f64)>,
    pub strictly_convex: bool,
}

pub fn boundary_convexity(g: &MetricField) -> ConvexityReport {
    let mut circles = Vec::new();
    for circle in g.chart().boundary_circles() {
        let mut min_kg = f64::INFINITY;
        let n_phi = 64;
        for j in 0..n_phi {
            let phi = crate::chart::TWO_PI * j as f64 / n_phi as f64;
            min_kg = min_kg.min(geodesic_curvature_of_circle(g, circle, phi));
        }
        circles.push((circle.r, min_kg));
    }
    let strictly_convex = circles.iter().all(|&(_, k)| k > 0.0);
    ConvexityReport { circles, strictly_convex }
}

fn geodesic_curvature_of_circle(g: &MetricField, circle: BoundaryCircle, phi: f64) -> f64 {
    let gv = g.value(circle.r, phi);
    let gamma = g.christoffel(circle.r, phi);
    // Inward unit normal (orthogonal to d_phi).
    let raw = [1.0, -gv.comps[1] / gv.comps[2]];
    let norm = gv.norm(raw);
    let nu_in = [-circle.outward_sign * raw[0] / norm, -circle.outward_sign * raw[1] / norm];
    // k_g = <nabla_T T, n> with T = d_phi / |d_phi|.
    let acc = [gamma.get(0, 1, 1), gamma.get(1, 1, 1)];
    gv.inner(acc, nu_in) / gv.comps[2]
}

/// Jacobi field data along a ray: J'' + K(t) J = 0 integrated with the ray.
#[derive(Debug, Clone)]
pub struct JacobiTrace {
    pub times: Vec<f64>,
    pub j: Vec<f64>,
    pub dj: Vec<f64>,
    /// Times where a field with J(0) = 0, J'(0) = 1 re-vanishes.
    pub conjugate_times: Vec<f64>,
    pub exit: ExitEvent,
}

/// Integrates the Jacobi equation with initial data (j0, dj0) along the
/// forward ray from z, stopping at the boundary or at time `t_end`.
pub fn linearized_flow(
    g: &MetricField,
    z: PhasePoint,
    t_end: f64,
    j0: f64,
    dj0: f64,
    params: &FlowParams,
) -> Result<JacobiTrace> {
    let z = z.normalized(g);
    let mut s = [z.x[0], z.x[1], z.v[0], z.v[1]];
    let h = params.step;
    let mut t = 0.0;
    let mut jj = [j0, dj0];
    let chart = g.chart();
    let mut times = vec![0.0];
    let mut j = vec![jj[0]];
    let mut dj = vec![jj[1]];
    let mut conjugate_times = Vec::new();
    let detect = j0 == 0.0;
    let mut exit = ExitEvent::ReachedHorizon { t: t_end };
    let max_steps = (t_end / h).ceil() as usize + 2;
    for _ in 0..max_steps {
        if t >= t_end - 1e-14 {
            break;
        }
        let step = h.min(t_end - t);
        let (s_new, jj_new) = rk4_jacobi_step(g, &s, &jj, step)?;
        if chart.boundary_clearance(s_new[0]) < 0.0 {
            // Good enough exit localization for Jacobi diagnostics.
            exit = ExitEvent::ExitedBoundary {
                t,
                point: PhasePoint { x: [s[0], s[1]], v: [s[2], s[3]] },
            };
            break;
        }
        if detect && t > 10.0 * h && jj_new[0].signum() != jj[0].signum() && jj[0] != 0.0 {
            // Linear interpolation of the sign change.
            let frac = jj[0] / (jj[0] - jj_new[0]);
            conjugate_times.push(t + frac * step);
        }
        s = s_new;
        renormalize(g, &mut s);
        jj = jj_new;
        t += step;
        times.push(t);
        j.push(jj[0]);
        dj.push(jj[1]);
    }
    Ok(JacobiTrace { times, j, dj, conjugate_times, exit })
}

fn rk4_jacobi_step(g: &MetricField, s: &[f64; 4], jj: &[f64; 2], h: f64) -> Result<([f64; 4], [f64; 2])> {
    // Coupled RK4 on (x, v, J, J'); curvature evaluated at the stage points.
    let f = |s: &[f64; 4], jj: &[f64; 2]| -> Result<([f64; 4], [f64; 2])> {
        let ds = geodesic_rhs(g, s);
        let (_, k) = g.christoffel_curvature(
            s[0].clamp(curv_lo(g), curv_hi(g)),
            s[1],
        )?;
        Ok((ds, [jj[1], -k * jj[0]]))
    };
    let (k1s, k1j) = f(s, jj)?;
    let (s2, j2) = (add_scaled(s, 0.5 * h, &k1s), add2(jj, 0.5 * h, &k1j));
    let (k2s, k2j) = f(&s2, &j2)?;
    let (s3, j3) = (add_scaled(s, 0.5 * h, &k2s), add2(jj, 0.5 * h, &k2j));
    let (k3s, k3j) = f(&s3, &j3)?;
    let (s4, j4) = (add_scaled(s, h, &k3s), add2(jj, h, &k3j));
    let (k4s, k4j) = f(&s4, &j4)?;
    let mut s_out = *s;
    let mut j_out = *jj;
    for i in 0..4 {
        s_out[i] += h / 6.0 * (k1s[i] + 2.0 * k2s[i] + 2.0 * k3s[i] + k4s[i]);
    }
    for i in 0..2 {
        j_out[i] += h / 6.0 * (k1j[i] + 2.0 * k2j[i] + 2.0 * k3j[i] + k4j[i]);
    }
    Ok((s_out, j_out))
}

fn add2(a: &[f64; 2], s: f64, b: &[f64; 2]) -> [f64; 2] {
    [a[0] + s * b[0], a[1] + s * b[1]]
}

fn curv_lo(g: &MetricField) -> f64 {
    let (a, _) = g.chart().r_range();
    if matches!(g.chart(), ChartDomain::Disk { .. }) {
        a + 1e-9
    } else {
        a
    }
}

fn curv_hi(g: &MetricField) -> f64 {
    g.chart().r_range().1
}

/// Checks for conjugate points along the forward ray from z up to `t_end`
/// (or the exit if sooner).
pub fn conjugate_check(g: &MetricField, z: PhasePoint, t_end: f64, params: &FlowParams) -> Result<bool> {
    let tr = linearized_flow(g, z, t_end, 0.0, 1.0, params)?;
    Ok(!tr.conjugate_times.is_empty())
}

/// Floquet data of a closed orbit.
#[derive(Debug, Clone, Serialize)]
pub struct HyperbolicityReport {
    pub period: f64,
    /// Floquet exponents per period (log of the monodromy eigenvalues);
    /// they sum to ~0 by volume preservation.
    pub exponents: (f64, f64),
    pub det_monodromy: f64,
    /// Lyapunov rate = positive exponent / period.
    pub lyapunov_rate: f64,
    /// sup_t |J_u(t)| e^{-nu t} / |J_u(0)| along one period: an empirical
    /// expansion prefactor.
    pub expansion_prefactor: f64,
    pub conjugate_point_found: bool,
}

/// Monodromy of the normal Jacobi system over one period of a closed orbit.
/// Errors when the orbit does not close to within 1e-8.
pub fn floquet(g: &MetricField, z: PhasePoint, period: f64, params: &FlowParams) -> Result<HyperbolicityReport> {
    let trace = geodesic_flow(g, z, period, params)?;
    let back = trace.end();
    let dist = back.dist(&z.normalized(g));
    if dist > 1e-8 {
        return Err(GeoxError::NotClosed { dist, tol: 1e-8 });
    }
    let a = linearized_flow(g, z, period, 1.0, 0.0, params)?;
    let b = linearized_flow(g, z, period, 0.0, 1.0, params)?;
    let m = [[*a.j.last().unwrap(), *b.j.last().unwrap()], [*a.dj.last().unwrap(), *b.dj.last().unwrap()]];
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = tr * tr - 4.0 * det;
    let (l1, l2) = if disc >= 0.0 {
        let s = disc.sqrt();
        ((tr + s) / 2.0, (tr - s) / 2.0)
    } else {
        // Elliptic orbit: complex multipliers of modulus sqrt(det).
        (det.sqrt(), det.sqrt())
    };
    let e1 = l1.abs().ln();
    let e2 = l2.abs().ln();
    let nu = e1.max(e2) / period;
    // Expansion prefactor from the growing solution.
    let mut pref: f64 = 1.0;
    for (t, j) in b.times.iter().zip(&b.dj) {
        // d/dt of the unstable direction grows like e^{nu t}; use |J'| since
        // J(0)=0 for this solution.
        if *t > 0.0 {
            pref = pref.max(j.abs() * (-nu * t).exp());
        }
    }
    Ok(HyperbolicityReport {
        period,
        exponents: (e1.max(e2), e1.min(e2)),
        det_monodromy: det,
        lyapunov_rate: nu,
        expansion_prefactor: pref,
        conjugate_point_found: !b.conjugate_times.is_empty(),
    })
}

/// Extension of M by a collar of width delta, with the empirical bound on
/// the longest geodesic segment of SM_e outside the interior of SM.
#[derive(Debug, Clone)]
pub struct Extension {
    pub metric: MetricField,
    /// Max sampled length of a connected geodesic segment in SM_e \ SM-interior.
    pub segment_bound: f64,
    pub rays_sampled: usize,
}

pub fn extend_manifold(g: &MetricField, delta: f64, rays: usize, params: &FlowParams) -> Result<Extension> {
    let ext = g.on_extended_chart(delta);
    let conv = boundary_convexity(&ext);
    if !conv.strictly_convex {
        let &(r, k_g) = conv
            .circles
            .iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .expect("boundary circles");
        return Err(GeoxError::NotStrictlyConvex { r, k_g });
    }
    let (lo, hi) = g.chart().r_range();
    let inside_m = |r: f64| r > lo && r < hi;
    let circles = ext.chart().boundary_circles();
    let per_circle = rays / circles.len();
    // Product fan over (phi, theta) per extended boundary circle; stop each
    // ray when it first enters the interior of M or exits M_e.
    let n_phi = (per_circle as f64).sqrt().ceil() as usize;
    let n_theta = per_circle.div_ceil(n_phi);
    let mut bound: f64 = 0.0;
    let mut count = 0;
    for circle in circles {
        for i in 0..n_phi {
            let phi = crate::chart::TWO_PI * (i as f64 + 0.5) / n_phi as f64;
            for j in 0..n_theta {
                let theta = -std::f64::consts::FRAC_PI_2
                    + std::f64::consts::PI * (j as f64 + 0.5) / n_theta as f64;
                let z = inward_phase(&ext, circle, phi, theta);
                let mut stop_t = None;
                let exit = integrate_ray(&ext, z, 1.0, params.horizon, params, |t, p, _| {
                    if stop_t.is_none() && inside_m(p.x[0]) {
                        stop_t = Some(t);
                    }
                });
                count += 1;
                let seg = match (stop_t, exit) {
                    (Some(t), _) => t,
                    (None, Ok(ev)) => ev.exit_time().unwrap_or(params.horizon),
                    (None, Err(_)) => continue, // tangency: skip (measure zero)
                };
                bound = bound.max(seg);
            }
        }
    }
    Ok(Extension { metric: ext, segment_bound: bound, rays_sampled: count })
}

/// Inward-pointing phase point at boundary angle `theta` from the inward
/// normal (positive toward increasing phi).
pub fn inward_phase(g: &MetricField, circle: BoundaryCircle, phi: f64, theta: f64) -> PhasePoint {
    let gv = g.value(circle.r, phi);
    let (e1, e2) = gv.orthonormal_frame();
    // e1 is radial; inward = -outward_sign * e1. Tangential = e2.
    let s = -circle.outward_sign;
    let v = [
        theta.cos() * s * e1[0] + theta.sin() * e2[0],
        theta.cos() * s * e1[1] + theta.sin() * e2[1],
    ];
    PhasePoint { x: [circle.r, phi], v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn meridian(g: &MetricField) -> PhasePoint {
        PhasePoint { x: [0.0, 0.0], v: [1.0, 0.0] }.normalized(g)
    }

    #[test]
    fn neck_meridian_exits_at_unit_time() {
        let g = MetricField::neck();
        let tr = geodesic_flow(&g, meridian(&g), 5.0, &FlowParams::default()).unwrap();
        match tr.exit {
            ExitEvent::ExitedBoundary { t, point } => {
                assert_relative_eq!(t, 1.0, epsilon = 1e-9);
                assert_relative_eq!(point.x[0], 1.0, epsilon = 1e-9);
            }
            _ => panic!("meridian should exit"),
        }
    }

    #[test]
    fn neck_equator_is_trapped_both_ways() {
        let g = MetricField::neck();
        let z = PhasePoint { x: [0.0, 0.0], v: [0.0, 1.0] }.normalized(&g);
        let params = FlowParams { horizon: 30.0, ..Default::default() };
        assert!(escape_time(&g, z, true, &params).unwrap().is_trapped());
        assert!(escape_time(&g, z, false, &params).unwrap().is_trapped());
        // The equator stays at r = 0.
        let tr = geodesic_flow(&g, z, 10.0, &params).unwrap();
        for p in &tr.points {
            assert!(p.x[0].abs() < 1e-12);
        }
    }

    #[test]
    fn clairaut_constant_is_conserved() {
        let g = MetricField::neck();
        let z = PhasePoint::from_angle(&g, -1.0, 0.3, 0.6);
        let tr = geodesic_flow(&g, z, 50.0, &FlowParams::default()).unwrap();
        let rate = tr.clairaut_drift_rate().unwrap();
        assert!(rate < 1e-9, "drift rate {rate}");
    }

    #[test]
    fn escape_matches_clairaut_quadrature() {
        let g = MetricField::neck();
        // Ray from r = -1 with Clairaut constant 0.5.
        let c: f64 = 0.5;
        let sin_psi = c / 1.0f64.cosh();
        let z = PhasePoint::from_angle(&g, -1.0, 0.0, sin_psi.asin());
        assert_relative_eq!(clairaut_constant(&g, &z), c, epsilon = 1e-12);
        let rep = clairaut_oracle(&g, &z).unwrap();
        match rep.class {
            ClairautClass::Crossing { length, .. } => {
                let esc = escape_time(&g, z, true, &FlowParams::default()).unwrap();
                match esc {
                    Escape::Exit(t) => assert_relative_eq!(t, length, epsilon = 1e-6),
                    _ => panic!("should exit"),
                }
            }
            _ => panic!("|c| < 1 must cross"),
        }
    }

    #[test]
    fn oracle_turning_point_matches_trajectory() {
        let g = MetricField::neck();
        // c = 1.2 > 1: turning point at arccosh(1.2).
        let c: f64 = 1.2;
        let sin_psi = c / 1.0f64.cosh();
        let z = PhasePoint::from_angle(&g, -1.0, 0.0, sin_psi.asin());
        let rep = clairaut_oracle(&g, &z).unwrap();
        match rep.class {
            ClairautClass::Returning { turning_r, length, .. } => {
                assert_relative_eq!(turning_r.abs(), 1.2f64.acosh(), epsilon = 1e-9);
                // Numeric trajectory: min |r| along the ray approximates r*.
                let tr = geodesic_flow(&g, z, 30.0, &FlowParams::default()).unwrap();
                let min_r = tr.points.iter().map(|p| p.x[0].abs()).fold(f64::INFINITY, f64::min);
                assert!((min_r - 1.2f64.acosh()).abs() < 1e-6, "min_r = {min_r}");
                match tr.exit {
                    ExitEvent::ExitedBoundary { t, point } => {
                        assert_relative_eq!(point.x[0], -1.0, epsilon = 1e-9);
                        assert_relative_eq!(t, length, epsilon = 1e-6);
                    }
                    _ => panic!("returning ray must exit"),
                }
            }
            _ => panic!("|c| > 1 must return"),
        }
    }

    #[test]
    fn oracle_rejects_non_revolution_and_disk() {
        let g = MetricField::euclid_disk();
        let z = PhasePoint { x: [0.5, 0.0], v: [1.0, 0.0] };
        assert!(clairaut_oracle(&g, &z).is_err());
    }

    #[test]
    fn time_reversibility_and_group_property() {
        let g = MetricField::neck();
        let z = PhasePoint::from_angle(&g, 0.2, 1.0, 1.1);
        let params = FlowParams::default();
        let fwd = geodesic_flow(&g, z, 0.8, &params).unwrap();
        let end = fwd.end();
        let back = geodesic_flow(&g, end, -0.8, &params).unwrap();
        assert!(back.end().dist(&z) < 1e-7);
        // phi_{s+t} = phi_s . phi_t
        let ab = geodesic_flow(&g, z, 0.9, &params).unwrap().end();
        let mid = geodesic_flow(&g, z, 0.4, &params).unwrap().end();
        let ab2 = geodesic_flow(&g, mid, 0.5, &params).unwrap().end();
        assert!(ab.dist(&ab2) < 2e-7);
    }

    #[test]
    fn convexity_verdicts() {
        let neck = boundary_convexity(&MetricField::neck());
        assert!(neck.strictly_convex);
        for (_, k) in &neck.circles {
            assert_relative_eq!(*k, 1.0f64.tanh(), epsilon = 1e-9);
        }
        let flat = boundary_convexity(&MetricField::flat_cylinder());
        assert!(!flat.strictly_convex);
        let disk = boundary_convexity(&MetricField::euclid_disk());
        assert!(disk.strictly_convex);
        assert_relative_eq!(disk.circles[0].1, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn neck_orbit_floquet_exponents() {
        let g = MetricField::neck();
        let z = PhasePoint { x: [0.0, 0.0], v: [0.0, 1.0] }.normalized(&g);
        let period = crate::chart::TWO_PI;
        let rep = floquet(&g, z, period, &FlowParams::default()).unwrap();
        assert_relative_eq!(rep.exponents.0, period, epsilon = 1e-6);
        assert_relative_eq!(rep.exponents.0 + rep.exponents.1, 0.0, epsilon = 1e-6);
        assert_relative_eq!(rep.lyapunov_rate, 1.0, epsilon = 1e-6);
        assert!(!rep.conjugate_point_found);
    }

    #[test]
    fn floquet_rejects_open_orbits() {
        let g = MetricField::neck();
        let z = PhasePoint::from_angle(&g, 0.3, 0.0, 0.7);
        assert!(matches!(floquet(&g, z, 1.0, &FlowParams::default()), Err(GeoxError::NotClosed { .. })));
    }

    #[test]
    fn no_conjugate_points_in_negative_curvature() {
        let g = MetricField::neck();
        for k in 0..10 {
            let z = PhasePoint::from_angle(&g, -1.0, 0.1 * k as f64, -1.2 + 0.27 * k as f64);
            assert!(!conjugate_check(&g, z, 20.0, &FlowParams::default()).unwrap());
        }
    }

    #[test]
    fn disk_jacobi_grows_linearly() {
        let g = MetricField::euclid_disk();
        let z = PhasePoint { x: [0.9, 0.0], v: [-1.0, 0.0] };
        // Radially inward ray; stop before the center.
        let tr = linearized_flow(&g, z, 0.5, 0.0, 1.0, &FlowParams::default()).unwrap();
        let tl = *tr.times.last().unwrap();
        assert_relative_eq!(*tr.j.last().unwrap(), tl, epsilon = 1e-8);
        assert!(tr.conjugate_times.is_empty());
    }

    #[test]
    fn extension_keeps_trapping_and_bounds_collar_segments() {
        let g = MetricField::neck();
        let ext = extend_manifold(&g, 0.2, 400, &FlowParams::default()).unwrap();
        let conv = boundary_convexity(&ext.metric);
        assert!(conv.strictly_convex);
        for (_, k) in &conv.circles {
            assert_relative_eq!(*k, 1.2f64.tanh(), epsilon = 1e-9);
        }
        // Equator is still the trapped orbit of the extension.
        let z = PhasePoint { x: [0.0, 0.0], v: [0.0, 1.0] }.normalized(&ext.metric);
        assert!(escape_time(&ext.metric, z, true, &FlowParams { horizon: 20.0, ..Default::default() })
            .unwrap()
            .is_trapped());
        assert!(ext.segment_bound.is_finite());
        assert!(ext.segment_bound > 0.0);
    }

    #[test]
    fn tangency_is_rejected() {
        let g = MetricField::neck();
        // Nearly tangential start at the boundary, pointing just inward.
        let circle = BoundaryCircle { r: -1.0, outward_sign: -1.0 };
        let z = inward_phase(&g, circle, 0.0, std::f64::consts::FRAC_PI_2 - 1e-10);
        let res = escape_time(&g, z, true, &FlowParams::default());
        assert!(matches!(res, Err(GeoxError::Tangency { .. })));
    }
}
