//! The geodesic X-ray transform and its companions: quadrature fans on the
//! inward boundary carrying the measure cos(theta) dtheta ds, the transform
//! I (and I_m through pullbacks), the adjoint via backward-flow footpoint
//! lookup, fiber averaging, the normal operator, and the integral identity
//! checks (Santalo, adjointness, extension comparison, Lp ratios).

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::chart::{wrap_angle_positive, BoundaryCircle, TWO_PI};
use crate::error::{GeoxError, Result};
use crate::flow::{boundary_convexity, integrate_ray, inward_phase, ExitEvent, FlowParams, PhasePoint};
use crate::metric::MetricField;
use crate::quad::{fiber_angles, GridSpec, MQuadrature};
use crate::tencalc::{Grid2, TensorGrid};
use crate::tensor::{SymTensorField, SymTensorValue};

/// A function on the sphere bundle.
pub type SmFunction<'a> = dyn Fn(&PhasePoint) -> f64 + Sync + 'a;

/// One quadrature node of the inward boundary fan.
#[derive(Debug, Clone, Copy)]
pub struct FanNode {
    pub component: usize,
    /// Arclength coordinate along the boundary circle.
    pub s: f64,
    pub phi: f64,
    /// Angle from the inward normal, in (-pi/2, pi/2).
    pub theta: f64,
    pub phase: PhasePoint,
    /// cos(theta) * dtheta * ds
    pub weight: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct FanComponent {
    pub circle: BoundaryCircle,
    pub circumference: f64,
    pub node_offset: usize,
}

/// Midpoint product fan on the inward sphere bundle boundary.
#[derive(Debug, Clone)]
pub struct BoundaryFan {
    pub components: Vec<FanComponent>,
    pub nodes: Vec<FanNode>,
    pub n_s: usize,
    pub n_theta: usize,
}

impl BoundaryFan {
    pub fn total_weight(&self) -> f64 {
        self.nodes.iter().map(|n| n.weight).sum()
    }

    #[inline]
    pub fn node_index(&self, component: usize, j: usize, k: usize) -> usize {
        self.components[component].node_offset + j * self.n_theta + k
    }
}

/// Builds the fan with `n_s` boundary points and `n_theta` angles per
/// component. Requires a strictly convex boundary.
pub fn boundary_fan(g: &MetricField, n_s: usize, n_theta: usize) -> Result<BoundaryFan> {
    let conv = boundary_convexity(g);
    if !conv.strictly_convex {
        let &(r, k_g) = conv.circles.iter().min_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap();
        return Err(GeoxError::NotStrictlyConvex { r, k_g });
    }
    let dphi = TWO_PI / n_s as f64;
    let dtheta = std::f64::consts::PI / n_theta as f64;
    let mut components = Vec::new();
    let mut nodes = Vec::new();
    for (ci, circle) in g.chart().boundary_circles().into_iter().enumerate() {
        // Arclength density along the circle (constant for revolution metrics).
        let density: Vec<f64> = (0..n_s)
            .map(|j| {
                let phi = dphi * (j as f64 + 0.5);
                g.value(circle.r, phi).comps[2].sqrt()
            })
            .collect();
        let circumference: f64 = density.iter().sum::<f64>() * dphi;
        components.push(FanComponent { circle, circumference, node_offset: nodes.len() });
        let mut s_acc = 0.0;
        for j in 0..n_s {
            let phi = dphi * (j as f64 + 0.5);
            let ds = density[j] * dphi;
            let s_mid = s_acc + 0.5 * ds;
            s_acc += ds;
            for k in 0..n_theta {
                let theta = -std::f64::consts::FRAC_PI_2 + dtheta * (k as f64 + 0.5);
                let phase = inward_phase(g, circle, phi, theta);
                nodes.push(FanNode {
                    component: ci,
                    s: s_mid,
                    phi,
                    theta,
                    phase,
                    weight: theta.cos() * dtheta * ds,
                });
            }
        }
    }
    Ok(BoundaryFan { components, nodes, n_s, n_theta })
}

/// Status of one fan node after transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeFlag {
    Valid,
    /// The ray reached the integration horizon without exiting.
    Horizon,
    /// The ray was rejected as glancing.
    Tangent,
}

/// Values on the fan nodes with per-node status flags; flagged nodes are
/// excluded from norms and counted.
#[derive(Debug, Clone)]
pub struct BoundaryFunction {
    pub values: Vec<f64>,
    pub flags: Vec<NodeFlag>,
}

impl BoundaryFunction {
    pub fn from_fn(fan: &BoundaryFan, f: impl Fn(&FanNode) -> f64) -> Self {
        BoundaryFunction {
            values: fan.nodes.iter().map(f).collect(),
            flags: vec![NodeFlag::Valid; fan.nodes.len()],
        }
    }

    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|f| **f != NodeFlag::Valid).count()
    }

    /// Integral against the boundary measure (valid nodes only).
    pub fn integral(&self, fan: &BoundaryFan) -> f64 {
        self.values
            .iter()
            .zip(&self.flags)
            .zip(&fan.nodes)
            .filter(|((_, f), _)| **f == NodeFlag::Valid)
            .map(|((v, _), n)| v * n.weight)
            .sum()
    }

    pub fn lp_norm(&self, fan: &BoundaryFan, p: f64) -> f64 {
        let s: f64 = self
            .values
            .iter()
            .zip(&self.flags)
            .zip(&fan.nodes)
            .filter(|((_, f), _)| **f == NodeFlag::Valid)
            .map(|((v, _), n)| v.abs().powf(p) * n.weight)
            .sum();
        s.powf(1.0 / p)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.flags)
            .filter(|(_, f)| **f == NodeFlag::Valid)
            .map(|(v, _)| v.abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.flags)
            .filter(|(_, f)| **f == NodeFlag::Valid)
            .map(|(v, _)| *v)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Transform options: integrator parameters plus the sampling stride of the
/// composite trapezoid rule along each ray (integrand evaluated every
/// `stride`-th RK4 sample; the exit sample is always included).
#[derive(Debug, Clone, Copy)]
pub struct XrayOpts {
    pub flow: FlowParams,
    pub stride: usize,
}

impl Default for XrayOpts {
    fn default() -> Self {
        XrayOpts { flow: FlowParams::default(), stride: 1 }
    }
}

/// X-ray transform of several integrands over the same fan, sharing one ray
/// integration per node.
pub fn xray_transform_multi(
    g: &MetricField,
    fan: &BoundaryFan,
    integrands: &[&SmFunction],
    opts: &XrayOpts,
) -> Vec<BoundaryFunction> {
    let k = integrands.len();
    let stride = opts.stride.max(1);
    let results: Vec<(Vec<f64>, NodeFlag)> = fan
        .nodes
        .par_iter()
        .map(|node| {
            let mut acc = vec![0.0; k];
            let mut prev: Option<(f64, Vec<f64>)> = None;
            let mut step_idx = 0usize;
            let mut last: Option<(f64, PhasePoint)> = None;
            let exit = integrate_ray(g, node.phase, 1.0, opts.flow.horizon, &opts.flow, |t, p, _| {
                last = Some((t, *p));
                if step_idx % stride == 0 {
                    let vals: Vec<f64> = integrands.iter().map(|f| f(p)).collect();
                    if let Some((tp, vp)) = &prev {
                        let dt = t - tp;
                        for i in 0..k {
                            acc[i] += 0.5 * dt * (vp[i] + vals[i]);
                        }
                    }
                    prev = Some((t, vals));
                }
                step_idx += 1;
            });
            match exit {
                Err(_) => (vec![0.0; k], NodeFlag::Tangent),
                Ok(ev) => {
                    // Close the trapezoid at the final sample.
                    if let (Some((t_end, p_end)), Some((tp, vp))) = (&last, &prev) {
                        if t_end > tp {
                            let vals: Vec<f64> = integrands.iter().map(|f| f(p_end)).collect();
                            let dt = t_end - tp;
                            for i in 0..k {
                                acc[i] += 0.5 * dt * (vp[i] + vals[i]);
                            }
                        }
                    }
                    match ev {
                        ExitEvent::ExitedBoundary { .. } => (acc, NodeFlag::Valid),
                        ExitEvent::ReachedHorizon { .. } => (acc, NodeFlag::Horizon),
                    }
                }
            }
        })
        .collect();
    (0..k)
        .map(|i| BoundaryFunction {
            values: results.iter().map(|(v, _)| v[i]).collect(),
            flags: results.iter().map(|(_, f)| *f).collect(),
        })
        .collect()
}

/// X-ray transform of one function on SM.
pub fn xray_transform(
    g: &MetricField,
    fan: &BoundaryFan,
    f: &SmFunction,
    opts: &XrayOpts,
) -> BoundaryFunction {
    xray_transform_multi(g, fan, &[f], opts).pop().expect("one integrand")
}

/// pi_m^* f as a function on SM.
pub fn pullback_fn(f: &SymTensorField) -> impl Fn(&PhasePoint) -> f64 + Sync + '_ {
    move |z: &PhasePoint| f.eval(z.x[0], z.x[1]).apply_to_vector(z.v)
}

/// I_m f = I(pi_m^* f).
pub fn xray_transform_tensor(
    g: &MetricField,
    fan: &BoundaryFan,
    f: &SymTensorField,
    opts: &XrayOpts,
) -> BoundaryFunction {
    xray_transform(g, fan, &pullback_fn(f), opts)
}

/// Backward footpoint of a phase point: (component, phi, theta, |l_-|) of
/// the inward-boundary point reached by flowing backward; None when the
/// horizon was hit (backward-trapped within the budget).
pub fn backward_footpoint(
    g: &MetricField,
    z: &PhasePoint,
    params: &FlowParams,
) -> Result<Option<(usize, f64, f64, f64)>> {
    let exit = integrate_ray(g, *z, -1.0, params.horizon, params, |_, _, _| {})?;
    match exit {
        ExitEvent::ReachedHorizon { .. } => Ok(None),
        ExitEvent::ExitedBoundary { t, point } => {
            // `point` carries the forward orientation, i.e. it lies on the
            // inward boundary.
            let circles = g.chart().boundary_circles();
            let (ci, circle) = circles
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    (a.1.r - point.x[0]).abs().partial_cmp(&(b.1.r - point.x[0]).abs()).unwrap()
                })
                .expect("boundary circles");
            let gv = g.value(circle.r, point.x[1]);
            let (e1, e2) = gv.orthonormal_frame();
            let inward_sign = -circle.outward_sign;
            let n_in = [inward_sign * e1[0], inward_sign * e1[1]];
            let cos_t = gv.inner(point.v, n_in);
            let sin_t = gv.inner(point.v, e2);
            Ok(Some((ci, point.x[1], sin_t.atan2(cos_t), t)))
        }
    }
}

/// Bilinear interpolation of fan values at (component, phi, theta):
/// periodic in phi, clamped at the extreme theta rows.
pub fn interp_fan(
    fan: &BoundaryFan,
    u: &BoundaryFunction,
    component: usize,
    phi: f64,
    theta: f64,
) -> f64 {
    let dphi = TWO_PI / fan.n_s as f64;
    let dtheta = std::f64::consts::PI / fan.n_theta as f64;
    let x = wrap_angle_positive(phi) / dphi - 0.5;
    let xf = x.floor();
    let tj = x - xf;
    let j0 = ((xf as i64).rem_euclid(fan.n_s as i64)) as usize;
    let j1 = (j0 + 1) % fan.n_s;
    let y = (theta + std::f64::consts::FRAC_PI_2) / dtheta - 0.5;
    let (k0, tk) = if y <= 0.0 {
        (0usize, 0.0)
    } else if y >= (fan.n_theta - 1) as f64 {
        (fan.n_theta - 2, 1.0)
    } else {
        (y.floor() as usize, y - y.floor())
    };
    let v = |j: usize, k: usize| u.values[fan.node_index(component, j, k)];
    v(j0, k0) * (1.0 - tj) * (1.0 - tk)
        + v(j1, k0) * tj * (1.0 - tk)
        + v(j0, k0 + 1) * (1.0 - tj) * tk
        + v(j1, k0 + 1) * tj * tk
}

/// I* u as a lazily evaluated function on SM: backward-flow footpoint lookup
/// plus bilinear interpolation; None on backward-trapped points.
pub struct AdjointField {
    g: MetricField,
    fan: Arc<BoundaryFan>,
    u: Arc<BoundaryFunction>,
    params: FlowParams,
}

impl AdjointField {
    pub fn new(
        g: MetricField,
        fan: Arc<BoundaryFan>,
        u: Arc<BoundaryFunction>,
        params: FlowParams,
    ) -> Self {
        AdjointField { g, fan, u, params }
    }

    pub fn eval(&self, z: &PhasePoint) -> Option<f64> {
        match backward_footpoint(&self.g, z, &self.params) {
            Ok(Some((ci, phi, theta, _))) => Some(interp_fan(&self.fan, &self.u, ci, phi, theta)),
            _ => None,
        }
    }
}

/// Componentwise fiber average pi_m_* F at a point, with index lowering by
/// the metric; directions where F is unavailable are dropped (and the
/// average renormalized), None if every direction failed.
pub fn fiber_average_at(
    g: &MetricField,
    m: usize,
    n_fiber: usize,
    r: f64,
    phi: f64,
    f: impl Fn(&PhasePoint) -> Option<f64>,
) -> Option<SymTensorValue> {
    let gv = g.value(r, phi);
    let gm = [[gv.comps[0], gv.comps[1]], [gv.comps[1], gv.comps[2]]];
    let mut t_count = [0.0f64; 4];
    let mut n_ok = 0usize;
    for &alpha in &fiber_angles(n_fiber) {
        let z = PhasePoint::from_angle(g, r, phi, alpha);
        let Some(val) = f(&z) else { continue };
        n_ok += 1;
        for (j, t) in t_count.iter_mut().enumerate().take(m + 1) {
            *t += val * z.v[0].powi((m - j) as i32) * z.v[1].powi(j as i32);
        }
    }
    if n_ok == 0 {
        return None;
    }
    let dalpha = TWO_PI / n_ok as f64;
    for t in t_count.iter_mut() {
        *t *= dalpha;
    }
    // Lower all indices: out_I = sum_J T^J prod_k g_{i_k j_k}.
    let mut comps = [0.0f64; 4];
    let tuples = 1usize << m;
    for (c, out) in comps.iter_mut().enumerate().take(m + 1) {
        // representative tuple for c: c low bits set
        let rep = (1usize << c) - 1;
        let mut s = 0.0;
        for j_mask in 0..tuples {
            let mut w = t_count[j_mask.count_ones() as usize];
            for k in 0..m {
                w *= gm[(rep >> k) & 1][(j_mask >> k) & 1];
            }
            s += w;
        }
        *out = s;
    }
    Some(SymTensorValue::new(m, &comps[..=m]).expect("rank checked"))
}

/// pi_m_* F for a total function F on SM, as a closure tensor field.
pub fn fiber_average_field(
    g: &MetricField,
    m: usize,
    n_fiber: usize,
    f: Arc<dyn Fn(&PhasePoint) -> f64 + Send + Sync>,
) -> SymTensorField {
    let comps = (0..=m)
        .map(|c| {
            let g = g.clone();
            let f = f.clone();
            crate::field::ScalarField::from_fn(move |r, phi| {
                fiber_average_at(&g, m, n_fiber, r, phi, |z| Some(f(z)))
                    .map(|v| v.get(c))
                    .unwrap_or(0.0)
            })
        })
        .collect();
    SymTensorField::new(m, comps).expect("rank checked")
}

#[derive(Debug, Clone, Serialize)]
pub struct NormalOpReport {
    pub flagged_rays: usize,
    pub missing_fiber_points: usize,
}

/// Normal operator Pi_2 f = I_2^* I_2 f evaluated on a tensor grid.
pub fn normal_operator(
    g: &MetricField,
    fan: &BoundaryFan,
    f: &SymTensorField,
    grid: Arc<Grid2>,
    n_fiber: usize,
    opts: &XrayOpts,
) -> Result<(TensorGrid, NormalOpReport)> {
    let u = xray_transform_tensor(g, fan, f, opts);
    let flagged_rays = u.flagged_count();
    let adj = AdjointField::new(g.clone(), Arc::new(fan.clone()), Arc::new(u), opts.flow);
    let n = grid.n_nodes();
    let vals: Vec<Option<SymTensorValue>> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / grid.n_phi, idx % grid.n_phi);
            fiber_average_at(g, 2, n_fiber, grid.r[i], grid.phi[j], |z| adj.eval(z))
        })
        .collect();
    let mut out = TensorGrid::zeros(2, grid.clone());
    let mut missing = 0usize;
    for (idx, v) in vals.iter().enumerate() {
        match v {
            Some(v) => {
                for c in 0..3 {
                    out.comps[c][idx] = v.get(c);
                }
            }
            None => missing += 1,
        }
    }
    Ok((out, NormalOpReport { flagged_rays, missing_fiber_points: missing }))
}

// ---------------------------------------------------------------------------
// Integral identity checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SantaloReport {
    pub lhs_sm_integral: f64,
    pub rhs_fan_integral: f64,
    pub rel_err: f64,
    pub flagged_nodes: usize,
}

/// Santalo identity: the integral of F over SM against the Liouville
/// measure equals the fan integral of IF against cos(theta) dtheta ds.
pub fn santalo_check(
    g: &MetricField,
    fan: &BoundaryFan,
    integrands: &[&SmFunction],
    grid: GridSpec,
    n_fiber: usize,
    opts: &XrayOpts,
) -> Result<Vec<SantaloReport>> {
    let ifs = xray_transform_multi(g, fan, integrands, opts);
    let quad = MQuadrature::new(g, grid)?;
    let angles = fiber_angles(n_fiber);
    let dalpha = TWO_PI / n_fiber as f64;
    let mut reports = Vec::new();
    for (f, u) in integrands.iter().zip(&ifs) {
        let mut lhs = 0.0;
        for (i, &r) in quad.r_nodes.iter().enumerate() {
            for (j, &phi) in quad.phi_nodes.iter().enumerate() {
                let mut fiber = 0.0;
                for &alpha in &angles {
                    fiber += f(&PhasePoint::from_angle(g, r, phi, alpha));
                }
                lhs += quad.weights[i][j] * fiber * dalpha;
            }
        }
        let rhs = u.integral(fan);
        reports.push(SantaloReport {
            lhs_sm_integral: lhs,
            rhs_fan_integral: rhs,
            rel_err: (lhs - rhs).abs() / lhs.abs().max(1e-300),
            flagged_nodes: u.flagged_count(),
        });
    }
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
pub struct AdjointReport {
    pub lhs_boundary: f64,
    pub rhs_sm: f64,
    pub rel_err: f64,
    pub flagged_nodes: usize,
    pub missing_backward: usize,
}

/// <IF, u>_{mu_nu} = <F, I*u>_{mu} for every (F, u) pair, sharing the fan
/// pass over the F's and the backward footpoints over the SM grid.
pub fn adjoint_check(
    g: &MetricField,
    fan: &BoundaryFan,
    fs: &[&SmFunction],
    us: &[BoundaryFunction],
    grid: GridSpec,
    n_fiber: usize,
    opts: &XrayOpts,
) -> Result<Vec<Vec<AdjointReport>>> {
    let ifs = xray_transform_multi(g, fan, fs, opts);
    let quad = MQuadrature::new(g, grid)?;
    let angles = fiber_angles(n_fiber);
    let dalpha = TWO_PI / n_fiber as f64;
    let (n_r, n_phi, n_a) = (quad.r_nodes.len(), quad.phi_nodes.len(), angles.len());
    // Backward footpoints over the product grid, computed once.
    let footpoints: Vec<Option<(usize, f64, f64)>> = (0..n_r * n_phi * n_a)
        .into_par_iter()
        .map(|flat| {
            let i = flat / (n_phi * n_a);
            let j = (flat / n_a) % n_phi;
            let a = flat % n_a;
            let z = PhasePoint::from_angle(g, quad.r_nodes[i], quad.phi_nodes[j], angles[a]);
            match backward_footpoint(g, &z, &opts.flow) {
                Ok(Some((ci, phi, theta, _))) => Some((ci, phi, theta)),
                _ => None,
            }
        })
        .collect();
    let missing = footpoints.iter().filter(|f| f.is_none()).count();
    let mut reports = vec![Vec::new(); fs.len()];
    for (fi, f) in fs.iter().enumerate() {
        for u in us {
            let mut rhs = 0.0;
            let mut flat = 0usize;
            for i in 0..n_r {
                for j in 0..n_phi {
                    let w = quad.weights[i][j];
                    for a in 0..n_a {
                        if let Some((ci, phi, theta)) = footpoints[flat] {
                            let z = PhasePoint::from_angle(
                                g,
                                quad.r_nodes[i],
                                quad.phi_nodes[j],
                                angles[a],
                            );
                            rhs += w * dalpha * f(&z) * interp_fan(fan, u, ci, phi, theta);
                        }
                        flat += 1;
                    }
                }
            }
            let ifu = &ifs[fi];
            let mut lhs = 0.0;
            for ((v, fl), (uu, node)) in
                ifu.values.iter().zip(&ifu.flags).zip(u.values.iter().zip(&fan.nodes))
            {
                if *fl == NodeFlag::Valid {
                    lhs += v * uu * node.weight;
                }
            }
            let scale = lhs.abs().max(rhs.abs()).max(1e-300);
            reports[fi].push(AdjointReport {
                lhs_boundary: lhs,
                rhs_sm: rhs,
                rel_err: (lhs - rhs).abs() / scale,
                flagged_nodes: ifu.flagged_count(),
                missing_backward: missing,
            });
        }
    }
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtensionCompareReport {
    pub p: f64,
    pub extended_norm: f64,
    pub base_norm: f64,
    /// Empirical constant ||I2^e E0 f||_p / ||I2 f||_p.
    pub c_emp: f64,
    pub flagged_base: usize,
    pub flagged_extended: usize,
}

/// Compares the Lp norm of the extended transform of the zero-extension
/// against the base transform.
pub fn extension_compare(
    g: &MetricField,
    f: &SymTensorField,
    p: f64,
    delta: f64,
    fan_dims: (usize, usize),
    opts: &XrayOpts,
) -> Result<ExtensionCompareReport> {
    let fan = boundary_fan(g, fan_dims.0, fan_dims.1)?;
    let base = xray_transform_tensor(g, &fan, f, opts);
    let g_ext = g.on_extended_chart(delta);
    let fan_ext = boundary_fan(&g_ext, fan_dims.0, fan_dims.1)?;
    let (lo, hi) = g.chart().r_range();
    let zero_ext = |z: &PhasePoint| {
        if z.x[0] >= lo && z.x[0] <= hi {
            f.eval(z.x[0], z.x[1]).apply_to_vector(z.v)
        } else {
            0.0
        }
    };
    let ext = xray_transform(&g_ext, &fan_ext, &zero_ext, opts);
    let extended_norm = ext.lp_norm(&fan_ext, p);
    let base_norm = base.lp_norm(&fan, p);
    Ok(ExtensionCompareReport {
        p,
        extended_norm,
        base_norm,
        c_emp: extended_norm / base_norm.max(1e-300),
        flagged_base: base.flagged_count(),
        flagged_extended: ext.flagged_count(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LpNormReport {
    pub p: f64,
    pub q: f64,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
}

/// Reports ||IF||_q / ||F||_p over a family of functions on SM (q < p).
pub fn lp_norms_check(
    g: &MetricField,
    fan: &BoundaryFan,
    fs: &[&SmFunction],
    p: f64,
    q: f64,
    grid: GridSpec,
    n_fiber: usize,
    opts: &XrayOpts,
) -> Result<LpNormReport> {
    if q >= p {
        return Err(GeoxError::InvalidParameter(format!("need q < p, got q={q}, p={p}")));
    }
    let ifs = xray_transform_multi(g, fan, fs, opts);
    let quad = MQuadrature::new(g, grid)?;
    let angles = fiber_angles(n_fiber);
    let dalpha = TWO_PI / n_fiber as f64;
    let mut ratios = Vec::new();
    for (f, u) in fs.iter().zip(&ifs) {
        let mut fp = 0.0;
        for (i, &r) in quad.r_nodes.iter().enumerate() {
            for (j, &phi) in quad.phi_nodes.iter().enumerate() {
                for &alpha in &angles {
                    fp += quad.weights[i][j]
                        * dalpha
                        * f(&PhasePoint::from_angle(g, r, phi, alpha)).abs().powf(p);
                }
            }
        }
        let f_norm = fp.powf(1.0 / p);
        ratios.push(u.lp_norm(fan, q) / f_norm.max(1e-300));
    }
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(LpNormReport { p, q, ratios, max_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::volume;
    use crate::tencalc::{boundary_vanishing_one_form, sym_derivative};
    use approx::assert_relative_eq;

    fn neck_fan(n_s: usize, n_t: usize) -> (MetricField, BoundaryFan) {
        let g = MetricField::neck();
        let fan = boundary_fan(&g, n_s, n_t).unwrap();
        (g, fan)
    }

    #[test]
    fn fan_mass_approaches_twice_boundary_length() {
        let (g, fan) = neck_fan(256, 128);
        let exact = 8.0 * std::f64::consts::PI * 1.0f64.cosh();
        assert_relative_eq!(fan.total_weight(), exact, max_relative = 1e-4);
        // All nodes are strictly inward.
        for node in fan.nodes.iter().step_by(97) {
            let circle = fan.components[node.component].circle;
            let inner = crate::flow::boundary_normal_component(&g, circle, node.phi, node.phase.v);
            assert!(inner < 0.0);
        }
        // Weights vanish toward glancing angles.
        let w_edge = fan.nodes[0].weight;
        let w_mid = fan.nodes[fan.n_theta / 2].weight;
        assert!(w_edge < 0.05 * w_mid);
    }

    #[test]
    fn fan_requires_strict_convexity() {
        assert!(boundary_fan(&MetricField::flat_cylinder(), 8, 8).is_err());
    }

    #[test]
    fn pullback_of_metric_is_one_and_i2_gives_escape_time() {
        let (g, fan) = neck_fan(24, 16);
        let gt = g.as_tensor_field();
        let pb = pullback_fn(&gt);
        let z = PhasePoint::from_angle(&g, 0.3, 1.0, 0.77);
        assert_relative_eq!(pb(&z), 1.0, epsilon = 1e-12);
        let opts = XrayOpts::default();
        let i2g = xray_transform_tensor(&g, &fan, &gt, &opts);
        for (idx, node) in fan.nodes.iter().enumerate() {
            if i2g.flags[idx] != NodeFlag::Valid {
                continue;
            }
            let esc = crate::flow::escape_time(&g, node.phase, true, &opts.flow).unwrap();
            match esc {
                crate::flow::Escape::Exit(l) => {
                    assert_relative_eq!(i2g.values[idx], l, epsilon = 1e-9)
                }
                _ => panic!("flag mismatch"),
            }
        }
    }

    #[test]
    fn pullback_of_one_form_is_odd() {
        let g = MetricField::neck();
        let p = boundary_vanishing_one_form(&g, 0.4, 0.7, 1);
        let pb = pullback_fn(&p);
        let z = PhasePoint::from_angle(&g, 0.2, 0.4, 1.1);
        assert_relative_eq!(pb(&z), -pb(&z.reversed()), epsilon = 1e-12);
    }

    #[test]
    fn transform_is_linear_nodewise() {
        let (g, fan) = neck_fan(12, 10);
        let f1 = |z: &PhasePoint| (z.x[0] + z.v[1]).cos();
        let f2 = |z: &PhasePoint| z.x[1].sin() * z.v[0];
        let combo = |z: &PhasePoint| 2.0 * f1(z) - 3.0 * f2(z);
        let opts = XrayOpts::default();
        let out = xray_transform_multi(&g, &fan, &[&f1, &f2, &combo], &opts);
        for i in 0..fan.nodes.len() {
            if out[0].flags[i] == NodeFlag::Valid {
                assert_relative_eq!(
                    out[2].values[i],
                    2.0 * out[0].values[i] - 3.0 * out[1].values[i],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn potential_tensors_are_annihilated() {
        let (g, fan) = neck_fan(16, 12);
        let p = boundary_vanishing_one_form(&g, 0.12, 0.1, 2);
        let dp = sym_derivative(&p, &g).unwrap();
        let u = xray_transform_tensor(&g, &fan, &dp, &XrayOpts::default());
        assert!(u.sup_abs() < 1e-6, "sup |I2(Dp)| = {}", u.sup_abs());
    }

    #[test]
    fn potential_annihilation_refines_with_step() {
        let (g, fan) = neck_fan(8, 8);
        let p = boundary_vanishing_one_form(&g, 0.3, 0.25, 2);
        let dp = sym_derivative(&p, &g).unwrap();
        let sup_h: Vec<f64> = [2e-3, 1e-3, 5e-4]
            .iter()
            .map(|&h| {
                let opts = XrayOpts { flow: FlowParams::with_step(h), stride: 1 };
                xray_transform_tensor(&g, &fan, &dp, &opts).sup_abs()
            })
            .collect();
        assert!(sup_h[1] < 0.5 * sup_h[0], "{sup_h:?}");
        assert!(sup_h[2] < 0.5 * sup_h[1], "{sup_h:?}");
    }

    #[test]
    fn adjoint_of_constant_is_constant_and_flow_invariant() {
        let (g, fan) = neck_fan(32, 24);
        let u = BoundaryFunction::from_fn(&fan, |_| 1.0);
        let adj = AdjointField::new(g.clone(), Arc::new(fan), Arc::new(u), FlowParams::default());
        let z = PhasePoint::from_angle(&g, 0.4, 2.0, 2.4);
        assert_relative_eq!(adj.eval(&z).unwrap(), 1.0, epsilon = 1e-12);
        // Flow invariance along the orbit.
        let fwd = crate::flow::geodesic_flow(&g, z, 0.7, &FlowParams::default()).unwrap();
        let z2 = *fwd.points.last().unwrap();
        assert_relative_eq!(adj.eval(&z2).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn adjoint_footpoint_matches_fan_node() {
        // Starting inside along a fan node's ray, the backward footpoint
        // recovers the node coordinates.
        let (g, fan) = neck_fan(16, 12);
        let node = &fan.nodes[5 * fan.n_theta + 4];
        let tr = crate::flow::geodesic_flow(&g, node.phase, 0.3, &FlowParams::default()).unwrap();
        let z = tr.end();
        let (ci, phi, theta, l) =
            backward_footpoint(&g, &z, &FlowParams::default()).unwrap().unwrap();
        assert_eq!(ci, node.component);
        assert_relative_eq!(phi, node.phi, epsilon = 1e-7);
        assert_relative_eq!(theta, node.theta, epsilon = 1e-7);
        assert_relative_eq!(l, 0.3, epsilon = 1e-7);
    }

    #[test]
    fn fiber_averages_reproduce_trig_moments() {
        let g = MetricField::neck();
        let (r, phi) = (0.25, 1.3);
        // pi_0_*(1) = 2 pi.
        let v0 = fiber_average_at(&g, 0, 64, r, phi, |_| Some(1.0)).unwrap();
        assert_relative_eq!(v0.get(0), TWO_PI, epsilon = 1e-12);
        // pi_2_*(1) = pi g.
        let v2 = fiber_average_at(&g, 2, 64, r, phi, |_| Some(1.0)).unwrap();
        let gv = g.value(r, phi);
        for c in 0..3 {
            assert_relative_eq!(v2.get(c), std::f64::consts::PI * gv.comps[c], epsilon = 1e-10);
        }
        // pi_2_* pi_2^* f = (pi/4)(2 f + tr_g f g).
        let f = SymTensorField::conformal_bump(&g, (0.0, 1.0), (0.8, 1.5), 0.6);
        let fv = f.eval(r, phi);
        let pb = pullback_fn(&f);
        let v = fiber_average_at(&g, 2, 128, r, phi, |z| Some(pb(z))).unwrap();
        let trace =
            crate::tensor::inner_product_pointwise(&g.as_tensor_field().eval(r, phi), &fv, &gv);
        for c in 0..3 {
            let expected = std::f64::consts::FRAC_PI_4 * (2.0 * fv.get(c) + trace * gv.comps[c]);
            assert_relative_eq!(v.get(c), expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn santalo_on_volume_function() {
        // F = 1: LHS = 2 pi area, RHS = integral of the escape time. This is
        // the hardest Santalo case (the escape time is log-singular along
        // the trapped angles), so the tolerance here is loose; smooth
        // integrands supported away from the neck converge much faster.
        let (g, fan) = neck_fan(96, 64);
        let one = |_: &PhasePoint| 1.0;
        let opts = XrayOpts { flow: FlowParams::with_step(2e-3), stride: 2 };
        let rep = santalo_check(&g, &fan, &[&one], GridSpec { n_r: 32, n_phi: 48 }, 32, &opts)
            .unwrap()
            .remove(0);
        let area = volume(&g, GridSpec { n_r: 64, n_phi: 64 }).unwrap();
        assert_relative_eq!(rep.lhs_sm_integral, TWO_PI * area, max_relative = 1e-9);
        assert!(rep.rel_err < 1e-2, "rel err {}", rep.rel_err);
    }

    #[test]
    fn santalo_on_smooth_bump_away_from_neck() {
        let (g, fan) = neck_fan(128, 64);
        let b = crate::field::bump_field(0.55, 1.0, 0.35, 1.2);
        let f = move |z: &PhasePoint| b.eval(z.x[0], z.x[1]);
        let opts = XrayOpts { flow: FlowParams::with_step(2e-3), stride: 2 };
        let rep = santalo_check(&g, &fan, &[&f], GridSpec { n_r: 48, n_phi: 64 }, 48, &opts)
            .unwrap()
            .remove(0);
        assert!(rep.rel_err < 1e-3, "rel err {}", rep.rel_err);
    }

    #[test]
    fn extension_compare_l1_mass_is_preserved() {
        // For p = 1 the flow invariance of the boundary measure makes the
        // extended and base L1 masses agree up to quadrature error.
        let g = MetricField::neck();
        let f = SymTensorField::conformal_bump(&g, (0.0, 2.0), (0.55, 1.1), 0.5);
        let opts = XrayOpts { flow: FlowParams::with_step(2e-3), stride: 2 };
        let rep = extension_compare(&g, &f, 1.0, 0.25, (96, 64), &opts).unwrap();
        assert!(rep.c_emp > 0.9 && rep.c_emp < 1.15, "c_emp = {}", rep.c_emp);
        // Stability under fan refinement.
        let rep2 = extension_compare(&g, &f, 1.0, 0.25, (128, 96), &opts).unwrap();
        assert!((rep2.c_emp / rep.c_emp - 1.0).abs() < 0.2);
    }

    #[test]
    fn extension_compare_rejects_non_convex_extension() {
        let g = MetricField::flat_cylinder();
        let f = SymTensorField::zero(2);
        let res = extension_compare(&g, &f, 1.0, 0.2, (8, 8), &XrayOpts::default());
        assert!(res.is_err());
    }

    #[test]
    fn lp_ratios_are_finite_with_near_trapped_mass() {
        let g = MetricField::neck();
        let fan = boundary_fan(&g, 48, 32).unwrap();
        // Bump concentrated near the trapped orbit to stress the bound.
        let near_neck = crate::field::bump_field(0.0, 0.0, 0.15, 2.0);
        let f1 = move |z: &PhasePoint| near_neck.eval(z.x[0], z.x[1]);
        let gen = crate::field::bump_field(0.4, 2.0, 0.4, 1.0);
        let f2 = move |z: &PhasePoint| gen.eval(z.x[0], z.x[1]) * (1.0 + 0.5 * z.v[1]);
        let opts = XrayOpts { flow: FlowParams::with_step(2e-3), stride: 2 };
        let rep = lp_norms_check(
            &g,
            &fan,
            &[&f1, &f2],
            4.0,
            2.0,
            GridSpec { n_r: 24, n_phi: 32 },
            24,
            &opts,
        )
        .unwrap();
        assert!(rep.max_ratio.is_finite());
        assert!(rep.ratios.iter().all(|r| r.is_finite() && *r >= 0.0));
    }
}
