//! Kernel generative classification and clustering with parsimonious
//! Gaussian process models.
//!
//! The toolkit models each class in the feature space induced by a kernel as
//! a Gaussian process whose covariance spectrum has a small number of free
//! "signal" eigenvalues and a shared constant noise level beyond them. All
//! fitting and prediction happens through kernel evaluations only, so the
//! same machinery classifies quantitative, categorical, functional, graph
//! and mixed data.
//!
//! Modules:
//! - [`numerics`]: dense symmetric eigendecomposition, stable softmax,
//!   trapezoid quadrature.
//! - [`kernels`]: kernel specifications, Gram matrices and class-centered
//!   kernel evaluations.
//! - [`functional`]: natural cubic spline basis, curve projection and the
//!   induced functional kernel.
//! - [`pgpda`]: the supervised classifier (submodels M0..M8).
//! - [`pgpem`]: the EM clustering algorithm on the same models.
//! - [`modelsel`]: cross-validation and repeated hold-out evaluation.
//! - [`data`]: dataset containers and file formats.
//! - [`persist`]: model document (JSON) with training store.

pub mod data;
pub mod error;
pub mod functional;
pub mod kernels;
pub mod modelsel;
pub mod numerics;
pub mod persist;
pub mod pgpda;
pub mod pgpem;

pub use error::{Error, Result};

/// Configure the global thread pool from the `PGP_THREADS` environment
/// variable. A missing or unparsable value leaves the default pool.
pub fn init_threads_from_env() {
    if let Ok(v) = std::env::var("PGP_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
