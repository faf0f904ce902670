//! Built-in benchmark problems with independent reference solutions.
//!
//! The double integrator has a closed-form polynomial optimum; the
//! brachistochrone reference is the analytic cycloid, constructed here from
//! the endpoint transcendental equation rather than from an external solver.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VemError};
use crate::grid::{trapz, Grid, GridSeries};
use crate::model::{OcpProblem, OcpProblemBuilder, SampleDomain, TerminalMode};
use crate::propagate::Trajectory;

/// `t -> (x_hat, lam_hat, u_hat)`
pub type ReferenceSampler =
    Arc<dyn Fn(f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) + Send + Sync>;

/// Closed-form (or oracle-generated) optimal solution of a benchmark.
#[derive(Clone)]
pub struct ReferenceSolution {
    /// `t -> (x_hat, lam_hat, u_hat)`
    pub sampler: ReferenceSampler,
    pub pi_hat: DVector<f64>,
    pub tf_hat: f64,
    pub j_hat: f64,
}

impl ReferenceSolution {
    /// Sample the reference on a grid as a trajectory.
    pub fn sample(&self, grid: &Grid) -> Trajectory {
        let probe = (self.sampler)(grid.t0());
        let (n, m) = (probe.0.len(), probe.2.len());
        let mut x = GridSeries::zeros(n, grid.len());
        let mut lam = GridSeries::zeros(n, grid.len());
        let mut u = GridSeries::zeros(m, grid.len());
        for i in 0..grid.len() {
            let (xs, ls, us) = (self.sampler)(grid.t(i));
            x.set_col(i, &xs);
            lam.set_col(i, &ls);
            u.set_col(i, &us);
        }
        Trajectory {
            grid: grid.clone(),
            x,
            lam,
            u,
        }
    }
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(v)
}

/// Double integrator with minimum control energy: `x1dot = x2`, `x2dot = u`,
/// `J = 1/2 int u^2 dt`, `x(0) = (1, 1)`, `x(2) = (0, 0)`, fixed `tf = 2`.
pub fn example1() -> (OcpProblem, ReferenceSolution) {
    let n = 2;
    let domain = SampleDomain {
        x_lo: dv(&[-4.0, -4.0]),
        x_hi: dv(&[4.0, 4.0]),
        u_lo: dv(&[-4.0]),
        u_hi: dv(&[4.0]),
        lam_lo: dv(&[-4.0, -4.0]),
        lam_hi: dv(&[4.0, 4.0]),
        pi_lo: dv(&[-3.0, -3.0]),
        pi_hi: dv(&[3.0, 3.0]),
        t_lo: 0.0,
        t_hi: 2.0,
    };
    let prob = OcpProblemBuilder::new(
        "example1",
        n,
        1,
        2,
        0.0,
        dv(&[1.0, 1.0]),
        TerminalMode::FixedTfWithConstraint,
    )
    .dynamics(
        Arc::new(|x: &DVector<f64>, u: &DVector<f64>, _t| dv(&[x[1], u[0]])),
        Arc::new(|_x: &DVector<f64>, _u: &DVector<f64>, _t| {
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
        }),
        Arc::new(|_x: &DVector<f64>, _u: &DVector<f64>, _t| {
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0])
        }),
    )
    .running_cost(
        Arc::new(|_x: &DVector<f64>, u: &DVector<f64>, _t| 0.5 * u[0] * u[0]),
        Arc::new(|_x: &DVector<f64>, _u: &DVector<f64>, _t| DVector::zeros(2)),
        Arc::new(|_x: &DVector<f64>, u: &DVector<f64>, _t| dv(&[u[0]])),
    )
    .terminal_constraint(
        Arc::new(|x: &DVector<f64>, _t| x.clone()),
        Arc::new(|_x: &DVector<f64>, _t| DMatrix::identity(2, 2)),
        Arc::new(|_x: &DVector<f64>, _t| DVector::zeros(2)),
    )
    .terminal_constraint_second(
        Arc::new(|_x: &DVector<f64>, _t| DMatrix::zeros(2, 2)),
        Arc::new(|_x: &DVector<f64>, _t| DVector::zeros(2)),
    )
    .hamiltonian_second(
        Arc::new(|_x: &DVector<f64>, _l: &DVector<f64>, _u: &DVector<f64>, _t| {
            DMatrix::zeros(2, 2)
        }),
        Arc::new(|_x: &DVector<f64>, _l: &DVector<f64>, _u: &DVector<f64>, _t| {
            DMatrix::zeros(1, 2)
        }),
        Arc::new(|_x: &DVector<f64>, _l: &DVector<f64>, _u: &DVector<f64>, _t| {
            DMatrix::from_element(1, 1, 1.0)
        }),
    )
    .gxx_pi(Arc::new(|_x: &DVector<f64>, _t, _pi: &DVector<f64>| {
        DMatrix::zeros(2, 2)
    }))
    .ht(Arc::new(
        |_x: &DVector<f64>, _l: &DVector<f64>, _u: &DVector<f64>, _t| 0.0,
    ))
    .sample_domain(domain)
    .build()
    .expect("example1 definition is well-formed");

    let reference = ReferenceSolution {
        sampler: Arc::new(|t| {
            (
                dv(&[
                    0.5 * t.powi(3) - 1.75 * t * t + t + 1.0,
                    1.5 * t * t - 3.5 * t + 1.0,
                ]),
                dv(&[3.0, -3.0 * t + 3.5]),
                dv(&[3.0 * t - 3.5]),
            )
        }),
        pi_hat: dv(&[3.0, -2.5]),
        tf_hat: 2.0,
        j_hat: 3.25,
    };
    (prob, reference)
}

/// Gravity constant of the brachistochrone benchmark.
pub const BRACHISTOCHRONE_GRAVITY: f64 = 10.0;

/// Brachistochrone in speed coordinates: `f = (V sin u, -V cos u, g cos u)`,
/// `J = tf`, from the origin at rest to `(x, y)(tf) = (2, -2)`, free `tf`.
pub fn example2() -> (OcpProblem, ReferenceSolution) {
    let prob = brachistochrone_problem(BRACHISTOCHRONE_GRAVITY);
    let reference = cycloid_reference(2.0, -2.0, BRACHISTOCHRONE_GRAVITY)
        .expect("the benchmark endpoint admits a cycloid");
    (prob, reference)
}

/// The brachistochrone dynamics/cost/constraint set for a given gravity
/// constant (endpoint targets are part of the constraint callback and can
/// be swapped by the caller).
pub fn brachistochrone_problem(grav: f64) -> OcpProblem {
    let domain = SampleDomain {
        x_lo: dv(&[-1.0, -3.0, 0.1]),
        x_hi: dv(&[3.0, 1.0, 5.0]),
        u_lo: dv(&[-1.5]),
        u_hi: dv(&[1.5]),
        lam_lo: dv(&[-1.0, -1.0, -1.0]),
        lam_hi: dv(&[1.0, 1.0, 1.0]),
        pi_lo: dv(&[-1.0, -1.0]),
        pi_hi: dv(&[1.0, 1.0]),
        t_lo: 0.0,
        t_hi: 1.0,
    };
    OcpProblemBuilder::new(
        "example2",
        3,
        1,
        2,
        0.0,
        DVector::zeros(3),
        TerminalMode::FreeTfWithConstraint,
    )
    .dynamics(
        Arc::new(move |x: &DVector<f64>, u: &DVector<f64>, _t| {
            let (s, c) = u[0].sin_cos();
            dv(&[x[2] * s, -x[2] * c, grav * c])
        }),
        Arc::new(|_x: &DVector<f64>, u: &DVector<f64>, _t| {
            let (s, c) = u[0].sin_cos();
            DMatrix::from_row_slice(3, 3, &[0.0, 0.0, s, 0.0, 0.0, -c, 0.0, 0.0, 0.0])
        }),
        Arc::new(move |x: &DVector<f64>, u: &DVector<f64>, _t| {
            let (s, c) = u[0].sin_cos();
            DMatrix::from_row_slice(3, 1, &[x[2] * c, x[2] * s, -grav * s])
        }),
    )
    .terminal_cost(
        Arc::new(|_x: &DVector<f64>, t| t),
        Arc::new(|_x: &DVector<f64>, _t| DVector::zeros(3)),
        Arc::new(|_x: &DVector<f64>, _t| 1.0),
    )
    .terminal_cost_second(
        Arc::new(|_x: &DVector<f64>, _t| DMatrix::zeros(3, 3)),
        Arc::new(|_x: &DVector<f64>, _t| DVector::zeros(3)),
        Arc::new(|_x: &DVector<f64>, _t| 0.0),
    )
    .terminal_constraint(
        Arc::new(|x: &DVector<f64>, _t| dv(&[x[0] - 2.0, x[1] + 2.0])),
        Arc::new(|_x: &DVector<f64>, _t| {
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
        }),
        Arc::new(|_x: &DVector<f64>, _t| DVector::zeros(2)),
    )
    .terminal_constraint_second(
        Arc::new(|_x: &DVector<f64>, _t| DMatrix::zeros(2, 3)),
        Arc::new(|_x: &DVector<f64>, _t| DVector::zeros(2)),
    )
    .hamiltonian_second(
        Arc::new(|_x: &DVector<f64>, _l: &DVector<f64>, _u: &DVector<f64>, _t| {
            DMatrix::zeros(3, 3)
        }),
        Arc::new(|_x: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>, _t| {
            let (s, c) = u[0].sin_cos();
            DMatrix::from_row_slice(1, 3, &[0.0, 0.0, l[0] * c + l[1] * s])
        }),
        Arc::new(move |x: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>, _t| {
            let (s, c) = u[0].sin_cos();
            DMatrix::from_element(1, 1, -l[0] * x[2] * s + l[1] * x[2] * c - l[2] * grav * c)
        }),
    )
    .gxx_pi(Arc::new(|_x: &DVector<f64>, _t, _pi: &DVector<f64>| {
        DMatrix::zeros(3, 3)
    }))
    .ht(Arc::new(
        |_x: &DVector<f64>, _l: &DVector<f64>, _u: &DVector<f64>, _t| 0.0,
    ))
    .sample_domain(domain)
    .build()
    .expect("brachistochrone definition is well-formed")
}

/// Analytic brachistochrone oracle. Solves the endpoint equation
/// `(theta - sin theta) (-y_f) - (1 - cos theta) x_f = 0` on `(0, 2*pi)` by
/// bisection, then samples the cycloid with the angle convention of the
/// dynamics above (`u = theta / 2`, `V = sqrt(-2 g y)`).
pub fn cycloid_reference(x_f: f64, y_f: f64, grav: f64) -> Result<ReferenceSolution> {
    if !(x_f > 0.0) || !(y_f < 0.0) || !(grav > 0.0) {
        return Err(VemError::NoCycloid);
    }
    // cancellation-free forms: theta - sin(theta) by series for small
    // angles, 1 - cos(theta) = 2 sin^2(theta/2)
    let theta_minus_sin = |theta: f64| {
        if theta < 1e-2 {
            let t2 = theta * theta;
            theta * t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0))
        } else {
            theta - theta.sin()
        }
    };
    let one_minus_cos = |theta: f64| {
        let s = (0.5 * theta).sin();
        2.0 * s * s
    };
    let psi = |theta: f64| theta_minus_sin(theta) * (-y_f) - one_minus_cos(theta) * x_f;
    let mut lo = 1e-9;
    let mut hi = 2.0 * std::f64::consts::PI - 1e-12;
    if psi(lo) >= 0.0 || psi(hi) <= 0.0 {
        return Err(VemError::NoCycloid);
    }
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if psi(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta_star = 0.5 * (lo + hi);
    let radius = x_f / theta_minus_sin(theta_star);
    let tf = theta_star * (radius / grav).sqrt();
    let u_f = 0.5 * theta_star;
    let v_f = 2.0 * (grav * radius).sqrt() * u_f.sin();
    let lam_x = -u_f.sin() / v_f;
    let lam_y = u_f.cos() / v_f;
    let rate = (grav / radius).sqrt();
    let sqrt_gr = (grav * radius).sqrt();

    let sampler = Arc::new(move |t: f64| {
        let theta = t * rate;
        let u = 0.5 * theta;
        let x = radius * (theta - theta.sin());
        let y = -radius * (1.0 - theta.cos());
        let v = 2.0 * sqrt_gr * u.sin();
        // lam_V from the constant-Hamiltonian identity H = -1
        let lam_v = (-1.0 + (v / v_f) * (u - u_f).cos()) / (grav * u.cos());
        (dv(&[x, y, v]), dv(&[lam_x, lam_y, lam_v]), dv(&[u]))
    });

    Ok(ReferenceSolution {
        sampler,
        pi_hat: dv(&[lam_x, lam_y]),
        tf_hat: tf,
        j_hat: tf,
    })
}

/// Solution-quality metrics in the max-over-grid sense: cost error, control
/// error, per-state and per-costate errors, multiplier and terminal-time
/// errors against a reference.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ErrorMetrics {
    pub e_j: f64,
    pub e_u: f64,
    pub e_x: Vec<f64>,
    pub e_lam: Vec<f64>,
    pub e_pi: f64,
    pub e_tf: f64,
}

impl ErrorMetrics {
    pub fn worst_state(&self) -> f64 {
        self.e_x.iter().copied().fold(0.0, f64::max)
    }

    pub fn worst_costate(&self) -> f64 {
        self.e_lam.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare a numerical trajectory (with its multipliers and terminal time)
/// against a reference. The reference is resampled on the numerical grid.
/// The cost integral is evaluated on an 8x spline-refined resampling of the
/// trajectory, so the reported `e_j` reflects the solution rather than the
/// coarse-grid quadrature.
pub fn error_metrics(
    prob: &OcpProblem,
    traj: &Trajectory,
    pi: &DVector<f64>,
    tf: f64,
    reference: &ReferenceSolution,
) -> Result<ErrorMetrics> {
    let grid = &traj.grid;
    let fine = crate::grid::make_grid((grid.len() - 1) * 8 + 1, grid.t0(), grid.tf())?;
    let x_s = crate::propagate::ControlInterpolant::natural_spline(&traj.x, grid)?;
    let u_s = crate::propagate::ControlInterpolant::natural_spline(&traj.u, grid)?;
    use crate::propagate::ControlFunction;
    let l_series = GridSeries::from_fn(1, &fine, |_, t| {
        DVector::from_element(1, (prob.l)(&x_s.eval(t), &u_s.eval(t), t))
    });
    let j_num = (prob.phi)(&traj.x.col(grid.len() - 1), tf) + trapz(&l_series, &fine)?[0];

    let mut e_u = 0.0_f64;
    let mut e_x = vec![0.0_f64; prob.n];
    let mut e_lam = vec![0.0_f64; prob.n];
    for i in 0..grid.len() {
        let (x_hat, lam_hat, u_hat) = (reference.sampler)(grid.t(i));
        e_u = e_u.max((traj.u.col(i) - u_hat).amax());
        for k in 0..prob.n {
            e_x[k] = e_x[k].max((traj.x.col(i)[k] - x_hat[k]).abs());
            e_lam[k] = e_lam[k].max((traj.lam.col(i)[k] - lam_hat[k]).abs());
        }
    }
    Ok(ErrorMetrics {
        e_j: (j_num - reference.j_hat).abs(),
        e_u,
        e_x,
        e_lam,
        e_pi: (pi - &reference.pi_hat).amax(),
        e_tf: (tf - reference.tf_hat).abs(),
    })
}
