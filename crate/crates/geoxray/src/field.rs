//! Scalar fields on a chart: closures with optional analytic derivatives.
//!
//! Every field exposes total `grad`/`hess` methods. When analytic derivative
//! closures are absent they fall back to centered 4th-order finite
//! differences with step `h_fd` (default 1e-4), which keeps the derivative
//! error below the integrator tolerances used elsewhere. Combinators
//! (`add`, `scale`, `sub`) propagate derivatives through the fallback, so
//! composite fields stay differentiable.

use std::sync::Arc;

/// Default finite-difference step for the 4th-order fallback stencils.
pub const DEFAULT_H_FD: f64 = 1e-4;

type ValueFn = dyn Fn(f64, f64) -> f64 + Send + Sync;
type GradFn = dyn Fn(f64, f64) -> [f64; 2] + Send + Sync;
type HessFn = dyn Fn(f64, f64) -> [f64; 3] + Send + Sync;

struct Inner {
    value: Box<ValueFn>,
    grad: Option<Box<GradFn>>,
    hess: Option<Box<HessFn>>,
    h_fd: f64,
}

/// A scalar field h(r, phi) on the chart.
#[derive(Clone)]
pub struct ScalarField(Arc<Inner>);

impl ScalarField {
    pub fn from_fn(value: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        ScalarField(Arc::new(Inner { value: Box::new(value), grad: None, hess: None, h_fd: DEFAULT_H_FD }))
    }

    pub fn with_grad(
        value: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, f64) -> [f64; 2] + Send + Sync + 'static,
    ) -> Self {
        ScalarField(Arc::new(Inner {
            value: Box::new(value),
            grad: Some(Box::new(grad)),
            hess: None,
            h_fd: DEFAULT_H_FD,
        }))
    }

    /// Fully analytic field: value, gradient and Hessian (order rr, rphi, phiphi).
    pub fn analytic(
        value: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, f64) -> [f64; 2] + Send + Sync + 'static,
        hess: impl Fn(f64, f64) -> [f64; 3] + Send + Sync + 'static,
    ) -> Self {
        ScalarField(Arc::new(Inner {
            value: Box::new(value),
            grad: Some(Box::new(grad)),
            hess: Some(Box::new(hess)),
            h_fd: DEFAULT_H_FD,
        }))
    }

    pub fn constant(c: f64) -> Self {
        ScalarField::analytic(move |_, _| c, |_, _| [0.0, 0.0], |_, _| [0.0, 0.0, 0.0])
    }

    pub fn zero() -> Self {
        ScalarField::constant(0.0)
    }

    /// Same field with a different fallback step (analytic derivatives, if
    /// any, are kept).
    pub fn with_h_fd(&self, h_fd: f64) -> Self {
        let val = {
            let s = self.clone();
            move |r, p| s.eval(r, p)
        };
        let grad = self.0.grad.is_some().then(|| {
            let s = self.clone();
            Box::new(move |r, p| s.grad(r, p)) as Box<GradFn>
        });
        let hess = self.0.hess.is_some().then(|| {
            let s = self.clone();
            Box::new(move |r, p| s.hess(r, p)) as Box<HessFn>
        });
        ScalarField(Arc::new(Inner { value: Box::new(val), grad, hess, h_fd }))
    }

    #[inline]
    pub fn eval(&self, r: f64, phi: f64) -> f64 {
        (self.0.value)(r, phi)
    }

    /// Gradient [d/dr, d/dphi], analytic when available.
    pub fn grad(&self, r: f64, phi: f64) -> [f64; 2] {
        if let Some(g) = &self.0.grad {
            return g(r, phi);
        }
        let h = self.0.h_fd;
        [
            fd_first(|x| self.eval(x, phi), r, h),
            fd_first(|x| self.eval(r, x), phi, h),
        ]
    }

    /// Hessian [d2/dr2, d2/drdphi, d2/dphi2], analytic when available.
    pub fn hess(&self, r: f64, phi: f64) -> [f64; 3] {
        if let Some(h) = &self.0.hess {
            return h(r, phi);
        }
        let s = self.0.h_fd;
        let drr = fd_second(|x| self.eval(x, phi), r, s);
        let dpp = fd_second(|x| self.eval(r, x), phi, s);
        // Cross derivative: 4th-order first-difference of the phi-gradient in r.
        let drp = fd_first(|x| self.grad_phi_component(x, phi), r, s);
        [drr, drp, dpp]
    }

    fn grad_phi_component(&self, r: f64, phi: f64) -> f64 {
        if let Some(g) = &self.0.grad {
            g(r, phi)[1]
        } else {
            fd_first(|x| self.eval(r, x), phi, self.0.h_fd)
        }
    }

    pub fn has_analytic_grad(&self) -> bool {
        self.0.grad.is_some()
    }

    /// a + c * b, with derivatives delegated to the operands.
    pub fn add_scaled(a: &ScalarField, c: f64, b: &ScalarField) -> ScalarField {
        let (av, bv) = (a.clone(), b.clone());
        let (ag, bg) = (a.clone(), b.clone());
        let (ah, bh) = (a.clone(), b.clone());
        ScalarField::analytic(
            move |r, p| av.eval(r, p) + c * bv.eval(r, p),
            move |r, p| {
                let x = ag.grad(r, p);
                let y = bg.grad(r, p);
                [x[0] + c * y[0], x[1] + c * y[1]]
            },
            move |r, p| {
                let x = ah.hess(r, p);
                let y = bh.hess(r, p);
                [x[0] + c * y[0], x[1] + c * y[1], x[2] + c * y[2]]
            },
        )
    }

    pub fn scale(a: &ScalarField, c: f64) -> ScalarField {
        ScalarField::add_scaled(&ScalarField::zero(), c, a)
    }

    /// Pointwise product, with product-rule derivatives.
    pub fn mul(a: &ScalarField, b: &ScalarField) -> ScalarField {
        let (av, bv) = (a.clone(), b.clone());
        let (ag, bg) = (a.clone(), b.clone());
        let (ah, bh) = (a.clone(), b.clone());
        ScalarField::analytic(
            move |r, p| av.eval(r, p) * bv.eval(r, p),
            move |r, p| {
                let (fa, fb) = (ag.eval(r, p), bg.eval(r, p));
                let (da, db) = (ag.grad(r, p), bg.grad(r, p));
                [da[0] * fb + fa * db[0], da[1] * fb + fa * db[1]]
            },
            move |r, p| {
                let (fa, fb) = (ah.eval(r, p), bh.eval(r, p));
                let (da, db) = (ah.grad(r, p), bh.grad(r, p));
                let (ha, hb) = (ah.hess(r, p), bh.hess(r, p));
                [
                    ha[0] * fb + 2.0 * da[0] * db[0] + fa * hb[0],
                    ha[1] * fb + da[0] * db[1] + da[1] * db[0] + fa * hb[1],
                    ha[2] * fb + 2.0 * da[1] * db[1] + fa * hb[2],
                ]
            },
        )
    }
}

/// Centered 4th-order first derivative.
pub fn fd_first(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

/// Centered 4th-order second derivative.
pub fn fd_second(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 16.0 * f(x + h) - 30.0 * f(x) + 16.0 * f(x - h) - f(x - 2.0 * h))
        / (12.0 * h * h)
}

/// Smooth compactly supported mollifier profile psi(u) on [0, 1):
/// psi(u) = exp(1 - 1/(1-u)) for u < 1, 0 otherwise; psi(0) = 1.
/// Returns (psi, dpsi/du, d2psi/du2).
pub fn mollifier_jet(u: f64) -> (f64, f64, f64) {
    if u >= 1.0 - 1e-14 {
        return (0.0, 0.0, 0.0);
    }
    if u <= 0.0 {
        // Value and derivatives of exp(1 - 1/(1-u)) at u = 0.
        return (1.0, -1.0, -1.0);
    }
    let w = 1.0 / (1.0 - u);
    let psi = (1.0 - w).exp();
    let dpsi = -w * w * psi;
    let d2psi = (w * w * w * w - 2.0 * w * w * w) * psi;
    (psi, dpsi, d2psi)
}

/// Smooth bump centered at (r0, phi0), supported in the chart-coordinate
/// ellipse ((r-r0)/rad_r)^2 + (wrap(phi-phi0)/rad_phi)^2 < 1, amplitude at
/// center 1. Fully analytic jet; periodic in phi.
pub fn bump_field(r0: f64, phi0: f64, rad_r: f64, rad_phi: f64) -> ScalarField {
    let u_of = move |r: f64, phi: f64| {
        let dr = (r - r0) / rad_r;
        let dp = crate::chart::wrap_angle(phi - phi0) / rad_phi;
        (dr * dr + dp * dp, dr, dp)
    };
    let value = move |r: f64, phi: f64| {
        let (u, _, _) = u_of(r, phi);
        mollifier_jet(u).0
    };
    let grad = move |r: f64, phi: f64| {
        let (u, dr, dp) = u_of(r, phi);
        let (_, dpsi, _) = mollifier_jet(u);
        [dpsi * 2.0 * dr / rad_r, dpsi * 2.0 * dp / rad_phi]
    };
    let hess = move |r: f64, phi: f64| {
        let (u, dr, dp) = u_of(r, phi);
        let (_, d1, d2) = mollifier_jet(u);
        let (ur, up) = (2.0 * dr / rad_r, 2.0 * dp / rad_phi);
        [
            d2 * ur * ur + d1 * 2.0 / (rad_r * rad_r),
            d2 * ur * up,
            d2 * up * up + d1 * 2.0 / (rad_phi * rad_phi),
        ]
    };
    ScalarField::analytic(value, grad, hess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fd_matches_analytic_on_smooth_field() {
        let f = ScalarField::from_fn(|r, p| (r * r * p).sin());
        let (r, p) = (0.3, 1.1);
        let g = f.grad(r, p);
        let exact_r = (r * r * p).cos() * 2.0 * r * p;
        let exact_p = (r * r * p).cos() * r * r;
        assert_relative_eq!(g[0], exact_r, max_relative = 1e-9);
        assert_relative_eq!(g[1], exact_p, max_relative = 1e-9);
        let h = f.hess(r, p);
        let s = r * r * p;
        let exact_rr = -s.sin() * (2.0 * r * p) * (2.0 * r * p) + s.cos() * 2.0 * p;
        let exact_rp = -s.sin() * (2.0 * r * p) * r * r + s.cos() * 2.0 * r;
        let exact_pp = -s.sin() * r.powi(4);
        assert_relative_eq!(h[0], exact_rr, max_relative = 1e-6);
        assert_relative_eq!(h[1], exact_rp, max_relative = 1e-6);
        assert_relative_eq!(h[2], exact_pp, max_relative = 1e-5, epsilon = 1e-8);
    }

    #[test]
    fn bump_is_compactly_supported_and_smooth() {
        let b = bump_field(0.0, 0.0, 0.5, 0.8);
        assert_relative_eq!(b.eval(0.0, 0.0), 1.0);
        assert_eq!(b.eval(0.5, 0.0), 0.0);
        assert_eq!(b.eval(0.0, 0.81), 0.0);
        assert_eq!(b.grad(0.6, 0.0), [0.0, 0.0]);
        // Analytic jet agrees with finite differences inside the support.
        let fd = ScalarField::from_fn({
            let b = b.clone();
            move |r, p| b.eval(r, p)
        });
        let (r, p) = (0.21, -0.33);
        let ga = b.grad(r, p);
        let gf = fd.grad(r, p);
        assert_relative_eq!(ga[0], gf[0], max_relative = 1e-7, epsilon = 1e-10);
        assert_relative_eq!(ga[1], gf[1], max_relative = 1e-7, epsilon = 1e-10);
        let ha = b.hess(r, p);
        let hf = fd.hess(r, p);
        for i in 0..3 {
            assert_relative_eq!(ha[i], hf[i], max_relative = 1e-5, epsilon = 1e-7);
        }
    }

    #[test]
    fn bump_wraps_periodically() {
        let b = bump_field(0.0, 0.1, 0.5, 0.5);
        assert_relative_eq!(b.eval(0.2, 0.1 + crate::chart::TWO_PI), b.eval(0.2, 0.1));
    }

    #[test]
    fn combinators_propagate_derivatives() {
        let a = ScalarField::analytic(|r, _| r * r, |r, _| [2.0 * r, 0.0], |_, _| [2.0, 0.0, 0.0]);
        let b = ScalarField::analytic(|_, p| p.cos(), |_, p| [0.0, -p.sin()], |_, p| [0.0, 0.0, -p.cos()]);
        let s = ScalarField::add_scaled(&a, 3.0, &b);
        assert_relative_eq!(s.eval(2.0, 0.0), 7.0);
        assert_relative_eq!(s.grad(2.0, 0.5)[1], -3.0 * 0.5f64.sin());
        let m = ScalarField::mul(&a, &b);
        assert_relative_eq!(m.hess(1.0, 0.0)[0], 2.0); // (r^2 cos p)_rr at p=0
    }
}
