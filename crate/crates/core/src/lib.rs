//! Risk-constrained structured output-feedback LQR for peer-to-peer load
//! frequency control.
//!
//! The crate learns a static output-feedback gain u = −Ky for a multi-area
//! power grid, where each area's controller sees only its own and its
//! neighbours' measurements (K inherits the interconnection sparsity). The
//! gain minimizes the stationary quadratic regulation cost subject to a
//! mean-variance risk constraint, trained with stochastic gradient descent on
//! the max-oracle Lagrangian using zero-order policy-gradient estimates.
//!
//! Module map:
//! - [`topology`]: interconnection graphs, gain sparsity patterns, output maps
//! - [`lfc`]: area dynamics, network assembly, discretization, disturbances
//! - [`risk`]: cost/risk evaluation (Monte-Carlo and Lyapunov), max-oracle
//! - [`sgdmax`]: structured zero-order gradient sampling and the training loop
//! - [`harness`]: scenarios, simulation, robustness sweeps, file formats, CLI
pub mod error;
pub mod harness;
pub mod lfc;
pub mod risk;
pub mod rng;
pub mod sgdmax;
pub mod topology;
