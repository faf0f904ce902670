//! Quasi-feasible trajectory construction: states forward from the state
//! equation, costates backward from the costate equation with the
//! transversality terminal condition, and an explicit transition-matrix
//! costate form kept as a cross-validation oracle.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VemError};
use crate::grid::{cumtrapz, rk4_path, Direction, Grid, GridSeries};
use crate::model::OcpProblem;
use crate::stm::FundamentalSet;

/// States, costates and controls sampled on a shared grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: Grid,
    pub x: GridSeries,
    pub lam: GridSeries,
    pub u: GridSeries,
}

/// A control defined for every `t` in the horizon (and smoothly extendable
/// slightly beyond it, which the free-terminal-time derivative checks use).
pub trait ControlFunction: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64) -> DVector<f64>;
    fn eval_deriv(&self, t: f64) -> DVector<f64>;
}

/// Natural cubic spline through nodal values, one spline per channel.
/// Evaluation outside the grid extends the boundary cubic pieces.
#[derive(Debug, Clone)]
pub struct ControlInterpolant {
    t0: f64,
    h: f64,
    n_nodes: usize,
    /// nodal values, `dim x N`
    values: DMatrix<f64>,
    /// spline second derivatives at the nodes, `dim x N`
    moments: DMatrix<f64>,
}

impl ControlInterpolant {
    /// Interpolate the given nodal series over the grid.
    pub fn natural_spline(nodes: &GridSeries, grid: &Grid) -> Result<Self> {
        nodes.check_aligned(grid, "ControlInterpolant")?;
        let n = grid.len();
        let dim = nodes.dim();
        let h = grid.h();
        let mut moments = DMatrix::zeros(dim, n);
        // Thomas solve of the tridiagonal (1, 4, 1) system for the interior
        // moments; natural boundary conditions pin the end moments to zero.
        if n > 2 {
            let k = n - 2;
            for ch in 0..dim {
                let mut diag = vec![4.0; k];
                let mut rhs: Vec<f64> = (0..k)
                    .map(|i| {
                        6.0 * (nodes.values()[(ch, i)] - 2.0 * nodes.values()[(ch, i + 1)]
                            + nodes.values()[(ch, i + 2)])
                            / (h * h)
                    })
                    .collect();
                for i in 1..k {
                    let w = 1.0 / diag[i - 1];
                    diag[i] -= w;
                    rhs[i] -= w * rhs[i - 1];
                }
                let mut m = vec![0.0; k];
                m[k - 1] = rhs[k - 1] / diag[k - 1];
                for i in (0..k - 1).rev() {
                    m[i] = (rhs[i] - m[i + 1]) / diag[i];
                }
                for i in 0..k {
                    moments[(ch, i + 1)] = m[i];
                }
            }
        }
        Ok(ControlInterpolant {
            t0: grid.t0(),
            h,
            n_nodes: n,
            values: nodes.values().clone(),
            moments,
        })
    }

    /// The zero control on a grid.
    pub fn zero(dim: usize, grid: &Grid) -> Self {
        ControlInterpolant {
            t0: grid.t0(),
            h: grid.h(),
            n_nodes: grid.len(),
            values: DMatrix::zeros(dim, grid.len()),
            moments: DMatrix::zeros(dim, grid.len()),
        }
    }

    pub fn nodal_values(&self) -> &DMatrix<f64> {
        &self.values
    }

    fn segment(&self, t: f64) -> (usize, f64) {
        let raw = (t - self.t0) / self.h;
        let seg = (raw.floor() as isize).clamp(0, self.n_nodes as isize - 2) as usize;
        let theta = raw - seg as f64;
        (seg, theta)
    }
}

impl ControlFunction for ControlInterpolant {
    fn dim(&self) -> usize {
        self.values.nrows()
    }

    fn eval(&self, t: f64) -> DVector<f64> {
        let (i, th) = self.segment(t);
        let omth = 1.0 - th;
        let h2 = self.h * self.h / 6.0;
        DVector::from_fn(self.dim(), |ch, _| {
            self.values[(ch, i)] * omth
                + self.values[(ch, i + 1)] * th
                + h2 * ((omth.powi(3) - omth) * self.moments[(ch, i)]
                    + (th.powi(3) - th) * self.moments[(ch, i + 1)])
        })
    }

    fn eval_deriv(&self, t: f64) -> DVector<f64> {
        let (i, th) = self.segment(t);
        let omth = 1.0 - th;
        DVector::from_fn(self.dim(), |ch, _| {
            (self.values[(ch, i + 1)] - self.values[(ch, i)]) / self.h
                + self.h / 6.0
                    * ((1.0 - 3.0 * omth * omth) * self.moments[(ch, i)]
                        + (3.0 * th * th - 1.0) * self.moments[(ch, i + 1)])
        })
    }
}

/// Base control plus a piecewise-linear bump of unit height at one node.
/// A bump at node `i` changes the nodal value `u_i` by `eps` and carries
/// quadrature mass `eps * w_i`, which is exactly the perturbation the
/// gradient-identity checks differentiate against.
pub struct BumpedControl<'a> {
    pub base: &'a dyn ControlFunction,
    pub center: f64,
    pub half_width: f64,
    pub channel: usize,
    pub eps: f64,
}

impl ControlFunction for BumpedControl<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval(&self, t: f64) -> DVector<f64> {
        let mut v = self.base.eval(t);
        let w = 1.0 - ((t - self.center) / self.half_width).abs();
        if w > 0.0 {
            v[self.channel] += self.eps * w;
        }
        v
    }

    fn eval_deriv(&self, t: f64) -> DVector<f64> {
        let mut v = self.base.eval_deriv(t);
        let s = (t - self.center) / self.half_width;
        if s.abs() < 1.0 && s != 0.0 {
            v[self.channel] -= self.eps * s.signum() / self.half_width;
        }
        v
    }
}

/// Spline view of a sampled state series, used wherever propagation needs
/// the state between nodes.
pub(crate) fn state_interpolant(x: &GridSeries, grid: &Grid) -> Result<ControlInterpolant> {
    ControlInterpolant::natural_spline(x, grid)
}

/// Forward propagation of the state equation from `x0` under a given
/// control; `x(t0) = x0` holds exactly.
pub fn propagate_states(
    prob: &OcpProblem,
    u: &dyn ControlFunction,
    grid: &Grid,
) -> Result<GridSeries> {
    let f = prob.f.clone();
    rk4_path(
        &mut |x, t| f(x, &u.eval(t), t),
        &prob.x0,
        grid,
        Direction::Forward,
        1,
    )
}

/// Transversality terminal condition `lam(tf) = phi_x(tf) + gx(tf)' pi`.
pub fn costate_terminal(
    prob: &OcpProblem,
    x_tf: &DVector<f64>,
    tf: f64,
    pi: &DVector<f64>,
) -> DVector<f64> {
    (prob.phix)(x_tf, tf) + (prob.gx)(x_tf, tf).transpose() * pi
}

/// Backward propagation of the costate equation
/// `lamdot = -(L_x + fx' lam)` from the transversality terminal condition.
pub fn propagate_costates(
    prob: &OcpProblem,
    x: &GridSeries,
    u: &dyn ControlFunction,
    pi: &DVector<f64>,
    grid: &Grid,
) -> Result<GridSeries> {
    x.check_aligned(grid, "propagate_costates")?;
    let x_interp = state_interpolant(x, grid)?;
    let lam_tf = costate_terminal(prob, &x.col(grid.len() - 1), grid.tf(), pi);
    let (lx, fx) = (prob.lx.clone(), prob.fx.clone());
    rk4_path(
        &mut |lam, t| {
            let xs = x_interp.eval(t);
            let us = u.eval(t);
            -(lx(&xs, &us, t) + fx(&xs, &us, t).transpose() * lam)
        },
        &lam_tf,
        grid,
        Direction::Backward,
        1,
    )
}

/// Composite running cost `Lbar = phi_t + phix' f + L` and its first and
/// contracted second derivatives.
///
/// `lbar_x` is assembled exactly from the available callbacks. The second
/// derivatives reuse the contracted Hamiltonian callbacks with `phix`
/// standing in for the costate; third derivatives of `phi` are not part of
/// the problem interface, so `lbar_xx` is exact whenever `phixx` is constant
/// in `(x, t)` (true for every built-in problem) and second-order accurate
/// otherwise.
pub struct LbarDerivs {
    pub lbar_x: DVector<f64>,
    pub lbar_xx: DMatrix<f64>,
    pub lbar_xu: DMatrix<f64>,
}

pub fn lbar_derivs(
    prob: &OcpProblem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> LbarDerivs {
    let f = (prob.f)(x, u, t);
    let fx = (prob.fx)(x, u, t);
    let fu = (prob.fu)(x, u, t);
    let phix = (prob.phix)(x, t);
    let phixx = (prob.phixx)(x, t);
    let lbar_x = (prob.phixt)(x, t) + &phixx * &f + fx.transpose() * &phix + (prob.lx)(x, u, t);
    let lbar_xx = &phixx * &fx + fx.transpose() * &phixx + (prob.hxx)(x, &phix, u, t);
    let lbar_xu = &phixx * &fu + (prob.hux)(x, &phix, u, t).transpose();
    LbarDerivs {
        lbar_x,
        lbar_xx,
        lbar_xu,
    }
}

/// Explicit costate reconstruction through the transition matrices:
/// `lam(t) = phix(t) + Phi'(tf, t) gx(tf)' pi + int_t^tf Phi'(s, t) lbar_x(s) ds`,
/// realized with the factorized backward cumulative sum.
pub fn costates_explicit(
    prob: &OcpProblem,
    x: &GridSeries,
    u: &GridSeries,
    pi: &DVector<f64>,
    fs: &FundamentalSet,
    grid: &Grid,
) -> Result<GridSeries> {
    x.check_aligned(grid, "costates_explicit")?;
    let n_nodes = grid.len();
    let last = n_nodes - 1;
    // integrand M(s)' lbar_x(s), accumulated backward
    let weighted = GridSeries::from_fn(prob.n, grid, |i, t| {
        fs.m(i).transpose() * lbar_derivs(prob, &x.col(i), &u.col(i), t).lbar_x
    });
    let tail = cumtrapz(&weighted, grid, Direction::Backward)?;
    let terminal = fs.m(last).transpose()
        * ((prob.gx)(&x.col(last), grid.tf()).transpose() * pi);
    let mut out = GridSeries::zeros(prob.n, n_nodes);
    for i in 0..n_nodes {
        let lam = (prob.phix)(&x.col(i), grid.t(i))
            + fs.minv(i).transpose() * (&terminal + tail.col(i));
        if !lam.iter().all(|v| v.is_finite()) {
            return Err(VemError::non_finite_at("costates_explicit", i));
        }
        out.set_col(i, &lam);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::model::hx;
    use crate::problems::{example1, example2};
    use crate::stm::fundamental_set;
    use approx::assert_relative_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn spline_reproduces_nodes_and_linear_functions() {
        let grid = make_grid(11, 0.0, 2.0).unwrap();
        let nodes = GridSeries::from_fn(1, &grid, |_, t| DVector::from_element(1, 3.0 * t - 3.5));
        let s = ControlInterpolant::natural_spline(&nodes, &grid).unwrap();
        for i in 0..grid.len() {
            assert_relative_eq!(s.eval(grid.t(i))[0], 3.0 * grid.t(i) - 3.5, epsilon = 1e-13);
        }
        // linear data has zero moments, so mid-interval values are exact too
        assert_relative_eq!(s.eval(0.123)[0], 3.0 * 0.123 - 3.5, epsilon = 1e-13);
        assert_relative_eq!(s.eval_deriv(1.71)[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn spline_interpolation_error_is_fourth_order() {
        let f = |t: f64| (2.0 * t).sin();
        let err = |n: usize| {
            let grid = make_grid(n, 0.0, 2.0).unwrap();
            let nodes = GridSeries::from_fn(1, &grid, |_, t| DVector::from_element(1, f(t)));
            let s = ControlInterpolant::natural_spline(&nodes, &grid).unwrap();
            // probe away from the boundary where natural BCs degrade
            (0..200)
                .map(|k| 0.5 + k as f64 * 0.005)
                .map(|t| (s.eval(t)[0] - f(t)).abs())
                .fold(0.0_f64, f64::max)
        };
        let ratio = err(21) / err(41);
        assert!(ratio > 12.0, "ratio = {ratio}");
    }

    #[test]
    fn propagate_states_zero_control_example1() {
        let (prob, _) = example1();
        let grid = make_grid(41, 0.0, 2.0).unwrap();
        let u = ControlInterpolant::zero(1, &grid);
        let x = propagate_states(&prob, &u, &grid).unwrap();
        for i in 0..grid.len() {
            assert_relative_eq!(x.col(i)[0], 1.0 + grid.t(i), epsilon = 1e-12);
            assert_relative_eq!(x.col(i)[1], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn propagate_states_analytic_control_reaches_origin() {
        let (prob, _) = example1();
        let grid = make_grid(41, 0.0, 2.0).unwrap();
        let nodes = GridSeries::from_fn(1, &grid, |_, t| DVector::from_element(1, 3.0 * t - 3.5));
        let u = ControlInterpolant::natural_spline(&nodes, &grid).unwrap();
        let x = propagate_states(&prob, &u, &grid).unwrap();
        assert!(x.col(40).norm() <= 1e-6, "x(2) = {:?}", x.col(40));
        // the polynomial solution is reproduced exactly by RK4
        assert_relative_eq!(
            x.col(20)[0],
            0.5 - 1.75 + 1.0 + 1.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn propagate_states_zero_control_example2_free_fall() {
        let (prob, _) = example2();
        let grid = make_grid(101, 0.0, 1.0).unwrap();
        let u = ControlInterpolant::zero(1, &grid);
        let x = propagate_states(&prob, &u, &grid).unwrap();
        let t = 1.0;
        assert_relative_eq!(x.col(100)[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(x.col(100)[1], -0.5 * 10.0 * t * t, epsilon = 1e-9);
        assert_relative_eq!(x.col(100)[2], 10.0 * t, epsilon = 1e-9);
    }

    #[test]
    fn costate_terminal_values() {
        let (prob, _) = example1();
        let lam = costate_terminal(&prob, &dv(&[0.0, 0.0]), 2.0, &dv(&[3.0, -2.5]));
        assert_eq!(lam, dv(&[3.0, -2.5]));
        let lam = costate_terminal(&prob, &dv(&[0.0, 0.0]), 2.0, &dv(&[0.0, 0.0]));
        assert_eq!(lam, dv(&[0.0, 0.0]));

        let (prob2, _) = example2();
        let lam = costate_terminal(&prob2, &dv(&[2.0, -2.0, 4.0]), 0.8, &dv(&[-0.1477, 0.0564]));
        assert_eq!(lam, dv(&[-0.1477, 0.0564, 0.0]));
    }

    #[test]
    fn propagate_costates_example1() {
        let (prob, reference) = example1();
        let grid = make_grid(41, 0.0, 2.0).unwrap();
        let nodes = GridSeries::from_fn(1, &grid, |_, t| DVector::from_element(1, 3.0 * t - 3.5));
        let u = ControlInterpolant::natural_spline(&nodes, &grid).unwrap();
        let x = propagate_states(&prob, &u, &grid).unwrap();
        let lam = propagate_costates(&prob, &x, &u, &reference.pi_hat, &grid).unwrap();
        for i in 0..grid.len() {
            assert_relative_eq!(lam.col(i)[0], 3.0, epsilon = 1e-12);
            assert_relative_eq!(lam.col(i)[1], 3.5 - 3.0 * grid.t(i), epsilon = 1e-12);
        }
    }

    #[test]
    fn propagate_costates_zero_pi_is_zero() {
        let (prob, _) = example1();
        let grid = make_grid(21, 0.0, 2.0).unwrap();
        let u = ControlInterpolant::zero(1, &grid);
        let x = propagate_states(&prob, &u, &grid).unwrap();
        let lam = propagate_costates(&prob, &x, &u, &DVector::zeros(2), &grid).unwrap();
        assert!(lam.max_abs() <= 1e-14);
    }

    #[test]
    fn lbar_derivs_reduce_to_lx_when_phi_vanishes() {
        let (prob, _) = example1();
        let d = lbar_derivs(&prob, &dv(&[1.0, 1.0]), &dv(&[0.5]), 0.3);
        assert_eq!(d.lbar_x, (prob.lx)(&dv(&[1.0, 1.0]), &dv(&[0.5]), 0.3));
    }

    #[test]
    fn lbar_derivs_example2_constant_lbar() {
        let (prob, _) = example2();
        let d = lbar_derivs(&prob, &dv(&[0.5, -0.5, 1.0]), &dv(&[0.4]), 0.2);
        assert!(d.lbar_x.amax() <= 1e-14);
        assert!(d.lbar_xx.amax() <= 1e-14);
        assert!(d.lbar_xu.amax() <= 1e-14);
    }

    #[test]
    fn lbar_x_matches_fd_for_synthetic_cubic_phi() {
        // phi(x, t) = x1^3 t + x2^2 + 0.5 t^2 on the double-integrator dynamics
        use crate::model::{OcpProblemBuilder, TerminalMode};
        use std::sync::Arc;
        let (base, _) = example1();
        let prob = OcpProblemBuilder::new(
            "cubic-phi",
            2,
            1,
            2,
            0.0,
            dv(&[1.0, 1.0]),
            TerminalMode::FixedTfWithConstraint,
        )
        .dynamics(base.f.clone(), base.fx.clone(), base.fu.clone())
        .running_cost(base.l.clone(), base.lx.clone(), base.lu.clone())
        .terminal_cost(
            Arc::new(|x: &DVector<f64>, t: f64| x[0].powi(3) * t + x[1] * x[1] + 0.5 * t * t),
            Arc::new(|x: &DVector<f64>, t: f64| dv(&[3.0 * x[0] * x[0] * t, 2.0 * x[1]])),
            Arc::new(|x: &DVector<f64>, _t: f64| x[0].powi(3) + 0.0),
        )
        .terminal_constraint(base.g.clone(), base.gx.clone(), base.gt.clone())
        .build()
        .unwrap();

        let x = dv(&[0.8, -0.6]);
        let u = dv(&[0.7]);
        let t = 0.9;
        let lbar = |x: &DVector<f64>| {
            (prob.phit)(x, t)
                + (prob.phix)(x, t).dot(&(prob.f)(x, &u, t))
                + (prob.l)(x, &u, t)
        };
        let got = lbar_derivs(&prob, &x, &u, t).lbar_x;
        for j in 0..2 {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[j] += 1e-6;
            lo[j] -= 1e-6;
            let fd = (lbar(&hi) - lbar(&lo)) / 2e-6;
            assert_relative_eq!(got[j], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn costates_explicit_matches_backward_ode_example1() {
        let (prob, reference) = example1();
        let grid = make_grid(41, 0.0, 2.0).unwrap();
        let nodes = GridSeries::from_fn(1, &grid, |_, t| DVector::from_element(1, 3.0 * t - 3.5));
        let u = ControlInterpolant::natural_spline(&nodes, &grid).unwrap();
        let x = propagate_states(&prob, &u, &grid).unwrap();
        let fs = fundamental_set(&prob, &x, &u, &grid).unwrap();
        let lam_ode = propagate_costates(&prob, &x, &u, &reference.pi_hat, &grid).unwrap();
        let lam_exp = costates_explicit(&prob, &x, &nodes, &reference.pi_hat, &fs, &grid).unwrap();
        let diff = (lam_ode.values() - lam_exp.values())
            .iter()
            .fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(diff <= 1e-8, "diff = {diff:e}");
        // lam2 = 3.5 - 3t comes out of the pure transition-matrix term
        assert_relative_eq!(lam_exp.col(0)[1], 3.5, epsilon = 1e-9);
    }

    #[test]
    fn costates_explicit_zero_inputs_zero_output() {
        let (prob, _) = example1();
        let grid = make_grid(21, 0.0, 2.0).unwrap();
        let u = ControlInterpolant::zero(1, &grid);
        let x = propagate_states(&prob, &u, &grid).unwrap();
        let fs = fundamental_set(&prob, &x, &u, &grid).unwrap();
        let lam = costates_explicit(
            &prob,
            &x,
            &GridSeries::zeros(1, 21),
            &DVector::zeros(2),
            &fs,
            &grid,
        )
        .unwrap();
        assert!(lam.max_abs() <= 1e-14);
    }

    #[test]
    fn costate_residual_of_backward_ode_is_small() {
        // the propagated costates satisfy the costate equation to grid order
        let (prob, reference) = example2();
        let grid = make_grid(101, 0.0, reference.tf_hat).unwrap();
        let nodes = GridSeries::from_fn(1, &grid, |_, t| {
            DVector::from_element(1, (reference.sampler)(t).2[0])
        });
        let u = ControlInterpolant::natural_spline(&nodes, &grid).unwrap();
        let x = propagate_states(&prob, &u, &grid).unwrap();
        let lam = propagate_costates(&prob, &x, &u, &reference.pi_hat, &grid).unwrap();
        let lam_t = crate::grid::time_derivative(&lam, &grid).unwrap();
        let mut worst = 0.0_f64;
        for i in 0..grid.len() {
            let r = lam_t.col(i) + hx(&prob, &x.col(i), &lam.col(i), &u.eval(grid.t(i)), grid.t(i));
            worst = worst.max(r.amax());
        }
        assert!(worst <= 5e-4, "worst costate residual = {worst:e}");
    }
}
