//! Symmetric covariant tensor fields of rank 0..=3 on the chart.
//!
//! Components are stored in symmetric form indexed by the number of phi
//! indices (rank m has m+1 independent components). Index raising and
//! contractions expand to full index tuples, which is cheap at these ranks.

use crate::chart::TWO_PI;
use crate::error::{GeoxError, Result};
use crate::field::{bump_field, ScalarField};
use crate::metric::{MetricField, MetricValue};
use crate::quad::{GridSpec, MQuadrature};

pub const MAX_RANK: usize = 3;

/// Binomial coefficient C(m, j) for m <= 3.
#[inline]
pub fn multiplicity(rank: usize, j: usize) -> f64 {
    const TABLE: [[f64; 4]; 4] = [
        [1.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0],
        [1.0, 2.0, 1.0, 0.0],
        [1.0, 3.0, 3.0, 1.0],
    ];
    TABLE[rank][j]
}

/// Pointwise value of a symmetric tensor in component storage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymTensorValue {
    rank: usize,
    c: [f64; 4],
}

impl SymTensorValue {
    pub fn new(rank: usize, comps: &[f64]) -> Result<Self> {
        if rank > MAX_RANK {
            return Err(GeoxError::UnsupportedRank(rank));
        }
        assert_eq!(comps.len(), rank + 1);
        let mut c = [0.0; 4];
        c[..=rank].copy_from_slice(comps);
        Ok(SymTensorValue { rank, c })
    }

    pub fn zero(rank: usize) -> Self {
        SymTensorValue { rank, c: [0.0; 4] }
    }

    pub fn rank2(comps: [f64; 3]) -> Self {
        SymTensorValue { rank: 2, c: [comps[0], comps[1], comps[2], 0.0] }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn comps(&self) -> &[f64] {
        &self.c[..=self.rank]
    }

    /// Component by number of phi indices.
    #[inline]
    pub fn get(&self, n_phi: usize) -> f64 {
        self.c[n_phi]
    }

    /// Component by full index tuple encoded as a bitmask (bit k set = index
    /// k is phi).
    #[inline]
    pub fn get_tuple(&self, mask: usize) -> f64 {
        self.c[mask.count_ones() as usize]
    }

    /// f(v, ..., v): the polynomial pairing defining pullbacks to SM.
    pub fn apply_to_vector(&self, v: [f64; 2]) -> f64 {
        let mut s = 0.0;
        for j in 0..=self.rank {
            s += multiplicity(self.rank, j)
                * self.c[j]
                * v[0].powi((self.rank - j) as i32)
                * v[1].powi(j as i32);
        }
        s
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = *self;
        for c in out.c.iter_mut() {
            *c *= a;
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.rank, other.rank);
        let mut out = *self;
        for (a, b) in out.c.iter_mut().zip(other.c.iter()) {
            *a += b;
        }
        out
    }
}

/// Full contraction <f, h>_g = f_I g^{I J} h_J over all index tuples.
pub fn inner_product_pointwise(f: &SymTensorValue, h: &SymTensorValue, g: &MetricValue) -> f64 {
    assert_eq!(f.rank(), h.rank(), "rank mismatch in pointwise inner product");
    let m = f.rank();
    if m == 0 {
        return f.get(0) * h.get(0);
    }
    let ginv = g.inverse();
    let gi = [[ginv[0], ginv[1]], [ginv[1], ginv[2]]];
    let tuples = 1usize << m;
    let mut total = 0.0;
    for a in 0..tuples {
        let fa = f.get_tuple(a);
        if fa == 0.0 {
            continue;
        }
        for b in 0..tuples {
            let mut w = fa * h.get_tuple(b);
            for k in 0..m {
                w *= gi[(a >> k) & 1][(b >> k) & 1];
            }
            total += w;
        }
    }
    total
}

/// Pointwise |f|_g^2.
pub fn norm_sq_pointwise(f: &SymTensorValue, g: &MetricValue) -> f64 {
    inner_product_pointwise(f, f, g)
}

/// A symmetric m-tensor field with one scalar component field per
/// independent component.
#[derive(Clone)]
pub struct SymTensorField {
    rank: usize,
    comps: Vec<ScalarField>,
}

impl SymTensorField {
    pub fn new(rank: usize, comps: Vec<ScalarField>) -> Result<Self> {
        if rank > MAX_RANK {
            return Err(GeoxError::UnsupportedRank(rank));
        }
        if comps.len() != rank + 1 {
            return Err(GeoxError::RankMismatch { expected: rank + 1, got: comps.len() });
        }
        Ok(SymTensorField { rank, comps })
    }

    pub fn zero(rank: usize) -> Self {
        SymTensorField { rank, comps: vec![ScalarField::zero(); rank + 1] }
    }

    pub fn scalar(h: ScalarField) -> Self {
        SymTensorField { rank: 0, comps: vec![h] }
    }

    pub fn one_form(p_r: ScalarField, p_phi: ScalarField) -> Self {
        SymTensorField { rank: 1, comps: vec![p_r, p_phi] }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn component(&self, c: usize) -> &ScalarField {
        &self.comps[c]
    }

    pub fn eval(&self, r: f64, phi: f64) -> SymTensorValue {
        let mut c = [0.0; 4];
        for (j, f) in self.comps.iter().enumerate() {
            c[j] = f.eval(r, phi);
        }
        SymTensorValue { rank: self.rank, c }
    }

    /// a + s * b componentwise.
    pub fn add_scaled(a: &SymTensorField, s: f64, b: &SymTensorField) -> Result<SymTensorField> {
        if a.rank != b.rank {
            return Err(GeoxError::RankMismatch { expected: a.rank, got: b.rank });
        }
        let comps = a
            .comps
            .iter()
            .zip(&b.comps)
            .map(|(x, y)| ScalarField::add_scaled(x, s, y))
            .collect();
        SymTensorField::new(a.rank, comps)
    }

    pub fn scale(&self, s: f64) -> SymTensorField {
        SymTensorField {
            rank: self.rank,
            comps: self.comps.iter().map(|c| ScalarField::scale(c, s)).collect(),
        }
    }

    /// kappa * t for a scalar field kappa, with product-rule jets.
    pub fn scale_by_field(&self, kappa: &ScalarField) -> SymTensorField {
        SymTensorField {
            rank: self.rank,
            comps: self.comps.iter().map(|c| ScalarField::mul(kappa, c)).collect(),
        }
    }

    /// Conformal bump amp * psi * g: the standard perturbation used across
    /// tests and experiments.
    pub fn conformal_bump(
        g: &MetricField,
        center: (f64, f64),
        radius: (f64, f64),
        amplitude: f64,
    ) -> SymTensorField {
        let psi = ScalarField::scale(&bump_field(center.0, center.1, radius.0, radius.1), amplitude);
        g.as_tensor_field().scale_by_field(&psi)
    }

    /// Rank-2 bump in a single symmetric component (c = number of phi's).
    pub fn component_bump(
        rank: usize,
        c: usize,
        center: (f64, f64),
        radius: (f64, f64),
        amplitude: f64,
    ) -> Result<SymTensorField> {
        if rank > MAX_RANK || c > rank {
            return Err(GeoxError::UnsupportedRank(rank));
        }
        let mut comps = vec![ScalarField::zero(); rank + 1];
        comps[c] = ScalarField::scale(&bump_field(center.0, center.1, radius.0, radius.1), amplitude);
        SymTensorField::new(rank, comps)
    }
}

/// L2 pairing <f, h>_{L^2(M)} together with the pointwise integrand
/// evaluator, as (integral, pointwise closure).
pub fn tensor_inner_product<'a>(
    f: &'a SymTensorField,
    h: &'a SymTensorField,
    g: &'a MetricField,
    spec: GridSpec,
) -> Result<(f64, impl Fn(f64, f64) -> f64 + 'a)> {
    if f.rank() != h.rank() {
        return Err(GeoxError::RankMismatch { expected: f.rank(), got: h.rank() });
    }
    let pointwise =
        move |r: f64, phi: f64| inner_product_pointwise(&f.eval(r, phi), &h.eval(r, phi), &g.value(r, phi));
    let quad = MQuadrature::new(g, spec)?;
    let integral = quad.integrate(&pointwise);
    Ok((integral, pointwise))
}

/// L2 norm squared of a tensor field.
pub fn l2_norm_sq(f: &SymTensorField, g: &MetricField, spec: GridSpec) -> Result<f64> {
    Ok(tensor_inner_product(f, f, g, spec)?.0)
}

/// Chart-component C^0 norm on a sampling grid: sup over nodes of the
/// pointwise g-norm.
pub fn c0_norm(f: &SymTensorField, g: &MetricField, grid: GridSpec) -> f64 {
    let (a, b) = g.chart().r_range();
    let mut sup: f64 = 0.0;
    for i in 0..grid.n_r {
        let r = a + (b - a) * (i as f64 + 0.5) / grid.n_r as f64;
        for j in 0..grid.n_phi {
            let phi = TWO_PI * j as f64 / grid.n_phi as f64;
            sup = sup.max(norm_sq_pointwise(&f.eval(r, phi), &g.value(r, phi)).sqrt());
        }
    }
    sup
}

/// Componentwise C^1 norm on a sampling grid: sup of |f_c| + |grad f_c|.
/// Used only to normalize empirical constants.
pub fn c1_norm(f: &SymTensorField, g: &MetricField, grid: GridSpec) -> f64 {
    let (a, b) = g.chart().r_range();
    let mut sup: f64 = 0.0;
    for i in 0..grid.n_r {
        let r = a + (b - a) * (i as f64 + 0.5) / grid.n_r as f64;
        for j in 0..grid.n_phi {
            let phi = TWO_PI * j as f64 / grid.n_phi as f64;
            for c in 0..=f.rank() {
                let comp = f.component(c);
                let v = comp.eval(r, phi).abs();
                let gr = comp.grad(r, phi);
                sup = sup.max(v + gr[0].abs() + gr[1].abs());
            }
        }
    }
    sup
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::volume;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn metric_paired_with_itself_gives_dimension() {
        let g = MetricField::neck();
        let gt = g.as_tensor_field();
        for (r, phi) in [(0.0, 0.0), (0.5, 1.0), (-0.9, 4.0)] {
            let val = inner_product_pointwise(&gt.eval(r, phi), &gt.eval(r, phi), &g.value(r, phi));
            assert_relative_eq!(val, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn conformal_pairing_integrates_to_trace() {
        // f = c * g gives <g, f>_{L^2} = 2 c area(g).
        let g = MetricField::neck();
        let c = 0.7;
        let f = g.as_tensor_field().scale(c);
        let spec = GridSpec { n_r: 32, n_phi: 64 };
        let (ip, _) = tensor_inner_product(&g.as_tensor_field(), &f, &g, spec).unwrap();
        let area = volume(&g, spec).unwrap();
        assert_relative_eq!(ip, 2.0 * c * area, max_relative = 1e-10);
    }

    #[test]
    fn rank_mismatch_is_an_error() {
        let g = MetricField::neck();
        let f2 = SymTensorField::zero(2);
        let f1 = SymTensorField::zero(1);
        assert!(tensor_inner_product(&f2, &f1, &g, GridSpec { n_r: 4, n_phi: 8 }).is_err());
    }

    #[test]
    fn apply_to_vector_expands_multiplicities() {
        let f = SymTensorValue::rank2([2.0, 3.0, 5.0]);
        let v = [0.5, -1.0];
        // f(v,v) = f_rr vr^2 + 2 f_rp vr vp + f_pp vp^2
        assert_relative_eq!(f.apply_to_vector(v), 2.0 * 0.25 + 2.0 * 3.0 * (-0.5) + 5.0);
    }

    proptest! {
        #[test]
        fn pointwise_inner_product_is_bilinear_and_symmetric(
            a in -2.0f64..2.0, b in -2.0f64..2.0,
            f0 in -1.0f64..1.0, f1 in -1.0f64..1.0, f2 in -1.0f64..1.0,
            h0 in -1.0f64..1.0, h1 in -1.0f64..1.0, h2 in -1.0f64..1.0,
            r in -0.9f64..0.9,
        ) {
            let g = MetricField::neck();
            let gv = g.value(r, 0.3);
            let f = SymTensorValue::rank2([f0, f1, f2]);
            let h = SymTensorValue::rank2([h0, h1, h2]);
            let lhs = inner_product_pointwise(&f.scaled(a).add(&h.scaled(b)), &h, &gv);
            let rhs = a * inner_product_pointwise(&f, &h, &gv) + b * inner_product_pointwise(&h, &h, &gv);
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
            let sym_gap = inner_product_pointwise(&f, &h, &gv) - inner_product_pointwise(&h, &f, &gv);
            prop_assert!(sym_gap.abs() < 1e-12);
            // positivity with equality only at zero
            let ff = inner_product_pointwise(&f, &f, &gv);
            prop_assert!(ff >= 0.0);
        }
    }
}
