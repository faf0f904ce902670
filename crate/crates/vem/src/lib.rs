//! Optimal control solutions by variation evolution.
//!
//! Candidate solutions are evolved along a virtual variation time until the
//! first-order optimality residuals vanish. Two realizations of the flow are
//! provided:
//!
//! - the **compact form** evolves only the nodal controls (plus the terminal
//!   time and the terminal-constraint multipliers); states and costates are
//!   reconstructed from the state and costate equations, so feasibility holds
//!   along the whole flow and the right-hand side is assembled from
//!   transition-matrix integral factorizations;
//! - the **primary form** co-evolves states, costates and controls with a
//!   pointwise Euler-Lagrange density plus boundary rates.
//!
//! Both flows descend a nonnegative residual functional that vanishes
//! exactly at an optimal solution, and the adaptive driver in [`evolve`]
//! rejects any step that would increase it. Built-in benchmarks (a double
//! integrator and the brachistochrone) come with independent reference
//! solutions driving the test suite, and every assembled gradient is checked
//! against finite differences of the functional it claims to differentiate.

// negated comparisons like `!(v > 0.0)` are deliberate: they reject NaN
// where `v <= 0.0` would let it through
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod compact;
pub mod error;
pub mod evolve;
pub mod flows;
pub mod grid;
pub mod model;
pub mod primary;
pub mod problems;
pub mod propagate;
pub mod stm;

pub use error::{Result, VemError};
pub use grid::{cumtrapz, make_grid, rk4_path, time_derivative, trapz, Direction, Grid, GridSeries};
pub use model::{
    fd_check, hamiltonian, hu, jbar_compact, jbar_primary, optimality_report, OcpProblem,
    OcpProblemBuilder, ResidualReport, TerminalMode, Weights,
};
pub use problems::{cycloid_reference, error_metrics, example1, example2, ReferenceSolution};
pub use propagate::{
    costate_terminal, costates_explicit, lbar_derivs, propagate_costates, propagate_states,
    ControlFunction, ControlInterpolant, Trajectory,
};
pub use stm::{control_sensitivity_apply, fundamental_set, phi, FundamentalSet};
