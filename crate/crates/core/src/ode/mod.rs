//! Convection-diffusion particle systems, splitting integrators and order studies.

pub mod expm;
pub mod order;
pub mod scheme;
pub mod system;

pub use expm::expm;
pub use order::{
    fit_order, fit_power_law, gamma_grid, leading_error_commutator, leading_term_residual_study,
    measure_leading_term_residuals, measure_local_errors, order_study, write_csv, ErrorSample,
    OrderEstimate, ResidualSample,
};
pub use scheme::{
    euler_step, integrate, lie_trotter_step, reference_solution, step, strang_marchuk_step, Scheme,
    SchemeConfig, SubstepMode,
};
pub use system::{
    position_wise_gap, AttractionDrift, FnSystem, LinearSplit, ParticleState, ShippedSystem,
    SplitSystem, TimeReversed,
};
