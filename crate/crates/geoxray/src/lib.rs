//! geoxray: a numerical laboratory for geodesic X-ray transforms on surfaces.
//!
//! The crate implements, at desk scale, the computable objects of tensor
//! tomography on a surface with strictly convex boundary and a hyperbolic
//! trapped set: the geodesic flow with escape times and trapping
//! classification, X-ray transforms of symmetric tensors and their adjoints,
//! the normal operator, the solenoidal/potential decomposition, marked
//! boundary distances indexed by winding number, and a harness of experiments
//! that check the integral identities and inequalities tying these together.
//!
//! Organization:
//! - [`chart`], [`field`], [`quad`], [`metric`], [`tensor`]: charts, scalar
//!   and tensor fields, quadrature, metrics and pointwise tensor algebra.
//! - [`flow`]: geodesic flow, escape times, Clairaut oracle, Jacobi fields,
//!   boundary convexity, manifold extension.
//! - [`xray`]: boundary fans, the transform `I` and `I_m`, adjoints, the
//!   normal operator and integral identity checks.
//! - [`tencalc`]: symmetric derivative `D`, divergence `D*`, and the
//!   solenoidal decomposition via a Dirichlet elliptic solve.
//! - [`boundary_distance`]: shooting solver for marked distances, energy
//!   curves, gauge pullbacks and the solenoidal gauge normalization.
//! - [`harness`]: experiment drivers, the exponent audit and the discrete
//!   s-injectivity probe, with reproducible reports.

pub mod boundary_distance;
pub mod chart;
pub mod config;
pub mod error;
pub mod field;
pub mod flow;
pub mod harness;
pub mod metric;
pub mod quad;
pub mod tencalc;
pub mod tensor;
pub mod xray;

pub use chart::ChartDomain;
pub use error::{GeoxError, Result};
pub use field::ScalarField;
pub use metric::{MetricField, MetricJet, MetricValue};
pub use tensor::{SymTensorField, SymTensorValue};

use std::sync::Once;

static THREAD_INIT: Once = Once::new();

/// Configures the global rayon pool from the `GEOXRAY_THREADS` environment
/// variable. A no-op after the first call (or if the pool is already built).
pub fn init_threads() {
    THREAD_INIT.call_once(|| {
        if let Ok(n) = std::env::var("GEOXRAY_THREADS") {
            if let Ok(n) = n.parse::<usize>() {
                if n > 0 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}
