//! Primary-form evolution: states, costates and controls co-evolve.
//!
//! Interior nodes follow the pointwise Euler-Lagrange density of the
//! primary residual functional; the boundary nodes follow dedicated rate
//! brackets (initial-state tether at `t0`, terminal residual brackets at
//! `tf`); the terminal time and multipliers follow scalar rates. All grid
//! time derivatives use the second-order stencils, which is what bounds the
//! attainable accuracy of this form.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VemError};
use crate::evolve::{FlowEval, Gains, GridSpec};
use crate::grid::{time_derivative, GridSeries};
use crate::model::{hu, hx, jbar_primary, OcpProblem, Weights};
use crate::propagate::Trajectory;

/// Flat layout `[per node: x, lam, u] ++ [tf if free] ++ [pi]`.
#[derive(Debug, Clone, Copy)]
pub struct PrimaryLayout {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub n_nodes: usize,
    pub free_tf: bool,
}

/// Unpacked primary state.
pub struct PrimaryParts {
    pub x: GridSeries,
    pub lam: GridSeries,
    pub u: GridSeries,
    pub tf: Option<f64>,
    pub pi: DVector<f64>,
}

impl PrimaryLayout {
    pub fn of(prob: &OcpProblem, n_nodes: usize) -> Self {
        PrimaryLayout {
            n: prob.n,
            m: prob.m,
            q: prob.q,
            n_nodes,
            free_tf: prob.terminal_mode.is_free_tf(),
        }
    }

    pub fn node_width(&self) -> usize {
        2 * self.n + self.m
    }

    pub fn len(&self) -> usize {
        self.n_nodes * self.node_width() + usize::from(self.free_tf) + self.q
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pack(&self, parts: &PrimaryParts) -> DVector<f64> {
        let w = self.node_width();
        let mut flat = DVector::zeros(self.len());
        for i in 0..self.n_nodes {
            for k in 0..self.n {
                flat[i * w + k] = parts.x.values()[(k, i)];
                flat[i * w + self.n + k] = parts.lam.values()[(k, i)];
            }
            for k in 0..self.m {
                flat[i * w + 2 * self.n + k] = parts.u.values()[(k, i)];
            }
        }
        let mut off = self.n_nodes * w;
        if self.free_tf {
            flat[off] = parts.tf.expect("free-tf layout requires a terminal time");
            off += 1;
        }
        for j in 0..self.q {
            flat[off + j] = parts.pi[j];
        }
        flat
    }

    pub fn unpack(&self, flat: &DVector<f64>) -> Result<PrimaryParts> {
        if flat.len() != self.len() {
            return Err(VemError::ShapeError {
                context: "primary flat state",
                expected: format!("{} entries", self.len()),
                got: format!("{} entries", flat.len()),
            });
        }
        let w = self.node_width();
        let mut x = DMatrix::zeros(self.n, self.n_nodes);
        let mut lam = DMatrix::zeros(self.n, self.n_nodes);
        let mut u = DMatrix::zeros(self.m, self.n_nodes);
        for i in 0..self.n_nodes {
            for k in 0..self.n {
                x[(k, i)] = flat[i * w + k];
                lam[(k, i)] = flat[i * w + self.n + k];
            }
            for k in 0..self.m {
                u[(k, i)] = flat[i * w + 2 * self.n + k];
            }
        }
        let mut off = self.n_nodes * w;
        let tf = if self.free_tf {
            off += 1;
            Some(flat[off - 1])
        } else {
            None
        };
        let pi = DVector::from_fn(self.q, |j, _| flat[off + j]);
        Ok(PrimaryParts {
            x: GridSeries::new(x),
            lam: GridSeries::new(lam),
            u: GridSeries::new(u),
            tf,
            pi,
        })
    }
}

/// Pointwise Euler-Lagrange density of the primary functional, stacked as
/// `(z_x, z_lam, z_u)` per node: the Hessian-of-H contraction of the three
/// residual brackets minus the outer time derivative of the first two.
pub fn z_vector(prob: &OcpProblem, traj: &Trajectory) -> Result<GridSeries> {
    let grid = &traj.grid;
    let n_nodes = grid.len();
    let (n, m) = (prob.n, prob.m);
    let x_t = time_derivative(&traj.x, grid)?;
    let lam_t = time_derivative(&traj.lam, grid)?;

    // residual brackets per node
    let mut a_s = GridSeries::zeros(n, n_nodes); // H_x + lam_t
    let mut b_s = GridSeries::zeros(n, n_nodes); // f - x_t
    let mut c_s = GridSeries::zeros(m, n_nodes); // H_u
    for i in 0..n_nodes {
        let t = grid.t(i);
        let (x, lam, u) = (traj.x.col(i), traj.lam.col(i), traj.u.col(i));
        a_s.set_col(i, &(hx(prob, &x, &lam, &u, t) + lam_t.col(i)));
        b_s.set_col(i, &((prob.f)(&x, &u, t) - x_t.col(i)));
        c_s.set_col(i, &hu(prob, &x, &lam, &u, t)?);
    }
    // outer time derivatives of (x_t - f) and (lam_t + H_x)
    let neg_b_t = time_derivative(
        &GridSeries::new(-b_s.values().clone()),
        grid,
    )?;
    let a_t = time_derivative(&a_s, grid)?;

    let mut z = GridSeries::zeros(2 * n + m, n_nodes);
    for i in 0..n_nodes {
        let t = grid.t(i);
        let (x, lam, u) = (traj.x.col(i), traj.lam.col(i), traj.u.col(i));
        let fx = (prob.fx)(&x, &u, t);
        let fu = (prob.fu)(&x, &u, t);
        let hxx = (prob.hxx)(&x, &lam, &u, t);
        let hux = (prob.hux)(&x, &lam, &u, t);
        let huu = (prob.huu)(&x, &lam, &u, t);
        let (a, b, c) = (a_s.col(i), b_s.col(i), c_s.col(i));

        let z_x = &hxx * &a + fx.transpose() * &b + hux.transpose() * &c - neg_b_t.col(i);
        let z_lam = &fx * &a + &fu * &c - a_t.col(i);
        let z_u = &hux * &a + fu.transpose() * &b + &huu * &c;

        let mut col = DVector::zeros(2 * n + m);
        col.rows_mut(0, n).copy_from(&z_x);
        col.rows_mut(n, n).copy_from(&z_lam);
        col.rows_mut(2 * n, m).copy_from(&z_u);
        if !col.iter().all(|v| v.is_finite()) {
            return Err(VemError::non_finite_at("z_vector", i));
        }
        z.set_col(i, &col);
    }
    Ok(z)
}

/// Terminal-time rate bracket of the primary form, evaluated at the last
/// node with the grid stencil derivatives.
pub fn h_scalar(
    prob: &OcpProblem,
    traj: &Trajectory,
    pi: &DVector<f64>,
    tf: f64,
    w: &Weights,
) -> Result<f64> {
    if !prob.terminal_mode.is_free_tf() {
        return Err(VemError::ModeError("h_scalar requires a free terminal time"));
    }
    let grid = &traj.grid;
    let last = grid.len() - 1;
    let x_t = time_derivative(&traj.x, grid)?;
    let lam_t = time_derivative(&traj.lam, grid)?;
    let (x, lam, u) = (traj.x.col(last), traj.lam.col(last), traj.u.col(last));

    let f = (prob.f)(&x, &u, tf);
    let hx_v = hx(prob, &x, &lam, &u, tf);
    let hu_v = hu(prob, &x, &lam, &u, tf)?;
    let rho = &lam - (prob.phix)(&x, tf) - (prob.gx)(&x, tf).transpose() * pi;
    let r_h = crate::model::h_terminal(prob, &x, &lam, &u, pi, tf)?;

    let mut value = hx_v.norm_squared() + f.norm_squared() + hu_v.norm_squared()
        - x_t.col(last).norm_squared()
        - lam_t.col(last).norm_squared();
    let mut slope = (prob.ht)(&x, &lam, &u, tf) + (prob.phitt)(&x, tf);
    let mut cross = (prob.phixt)(&x, tf);
    if prob.q > 0 {
        let g = (prob.g)(&x, tf);
        value += 2.0 * (prob.gt)(&x, tf).dot(&(&w.w_xf * &g));
        slope += pi.dot(&(prob.gtt)(&x, tf));
        cross += (prob.gxt)(&x, tf).transpose() * pi;
    }
    value -= 2.0 * cross.dot(&(&w.w_lambda * &rho));
    value += 2.0 * w.w_h * r_h * slope;
    if !value.is_finite() {
        return Err(VemError::non_finite("h_scalar"));
    }
    Ok(value)
}

/// Full primary-form evaluation: packed rate vector and the functional
/// value for the descent guard.
pub fn primary_eval(
    flat: &DVector<f64>,
    prob: &OcpProblem,
    gains: &Gains,
    w: &Weights,
    grid_spec: &GridSpec,
) -> Result<FlowEval> {
    let layout = PrimaryLayout::of(prob, grid_spec.n_nodes);
    let parts = layout.unpack(flat)?;
    let tf = grid_spec.resolve_tf(parts.tf)?;
    let grid = crate::grid::make_grid(grid_spec.n_nodes, grid_spec.t0, tf)?;
    let traj = Trajectory {
        grid: grid.clone(),
        x: parts.x,
        lam: parts.lam,
        u: parts.u,
    };
    let (n, m) = (prob.n, prob.m);
    let n_nodes = grid.len();
    let last = n_nodes - 1;

    let z = z_vector(prob, &traj)?;
    let x_t = time_derivative(&traj.x, &grid)?;
    let lam_t = time_derivative(&traj.lam, &grid)?;
    let u_t = time_derivative(&traj.u, &grid)?;

    // the terminal-time rate enters the terminal control row explicitly
    let dtf = if layout.free_tf {
        Some(-gains.k_tf * h_scalar(prob, &traj, &parts.pi, tf, w)?)
    } else {
        None
    };

    let mut rates = GridSeries::zeros(2 * n + m, n_nodes);
    for i in 1..last {
        rates.set_col(i, &(-(&gains.k * z.col(i))));
    }

    // initial node: tether x to x0, relax lam along its residual, keep u on
    // the interior density (descent direction, see the functional gradient)
    {
        let t = grid.t(0);
        let (x, lam, u) = (traj.x.col(0), traj.lam.col(0), traj.u.col(0));
        let mut bracket = DVector::zeros(2 * n + m);
        bracket.rows_mut(0, n).copy_from(&(&prob.x0 - &x));
        bracket
            .rows_mut(n, n)
            .copy_from(&(lam_t.col(0) + hx(prob, &x, &lam, &u, t)));
        bracket
            .rows_mut(2 * n, m)
            .copy_from(&(-z.col(0).rows(2 * n, m).into_owned()));
        rates.set_col(0, &(&gains.k * bracket));
    }

    // terminal node: residual brackets plus, for free tf, the
    // terminal-Hamiltonian energy terms and the moving-endpoint control
    // coupling
    {
        let (x, lam, u) = (traj.x.col(last), traj.lam.col(last), traj.u.col(last));
        let rho = &lam - (prob.phix)(&x, tf) - (prob.gx)(&x, tf).transpose() * &parts.pi;
        let w_rho = &w.w_lambda * &rho;
        let curv = (prob.phixx)(&x, tf) + (prob.gxx_pi)(&x, tf, &parts.pi);

        let mut bx = x_t.col(last) - (prob.f)(&x, &u, tf) - &curv * &w_rho;
        if prob.q > 0 {
            let g = (prob.g)(&x, tf);
            bx += (prob.gx)(&x, tf).transpose() * (&w.w_xf * &g);
        }
        let mut bl = &w_rho + &(lam_t.col(last) + hx(prob, &x, &lam, &u, tf));
        let mut bu = z.col(last).rows(2 * n, m).into_owned();
        if let Some(dtf) = dtf {
            let r_h = crate::model::h_terminal(prob, &x, &lam, &u, &parts.pi, tf)?;
            let mut cross = (prob.phixt)(&x, tf);
            if prob.q > 0 {
                cross += (prob.gxt)(&x, tf).transpose() * &parts.pi;
            }
            bx += w.w_h * r_h * (hx(prob, &x, &lam, &u, tf) + cross);
            bl += w.w_h * r_h * (prob.f)(&x, &u, tf);
            bu += u_t.col(last) * dtf;
        }
        let mut bracket = DVector::zeros(2 * n + m);
        bracket.rows_mut(0, n).copy_from(&bx);
        bracket.rows_mut(n, n).copy_from(&bl);
        bracket.rows_mut(2 * n, m).copy_from(&bu);
        rates.set_col(last, &(-(&gains.k * bracket)));
    }

    // multiplier rate: descend the transversality energy (and, for free tf,
    // the g_t part of the terminal-Hamiltonian energy, zero for problems
    // whose constraint has no explicit time dependence)
    let dpi = if prob.q > 0 {
        let (x, lam, u) = (traj.x.col(last), traj.lam.col(last), traj.u.col(last));
        let rho = &lam - (prob.phix)(&x, tf) - (prob.gx)(&x, tf).transpose() * &parts.pi;
        let mut v = (prob.gx)(&x, tf) * (&w.w_lambda * &rho);
        if layout.free_tf {
            let r_h = crate::model::h_terminal(prob, &x, &lam, &u, &parts.pi, tf)?;
            v -= w.w_h * r_h * (prob.gt)(&x, tf);
        }
        &gains.k_pi * v
    } else {
        DVector::zeros(0)
    };

    let rhs = layout.pack(&PrimaryParts {
        x: rates_block(&rates, 0, n),
        lam: rates_block(&rates, n, n),
        u: rates_block(&rates, 2 * n, m),
        tf: dtf,
        pi: dpi,
    });
    let jbar = jbar_primary(prob, &traj, &parts.pi, tf, w)?;
    Ok(FlowEval { rhs, jbar })
}

fn rates_block(rates: &GridSeries, offset: usize, rows: usize) -> GridSeries {
    GridSeries::new(rates.values().rows(offset, rows).into_owned())
}

/// Spec-shaped wrapper returning only the packed rate vector.
pub fn rhs_primary(
    flat: &DVector<f64>,
    prob: &OcpProblem,
    gains: &Gains,
    w: &Weights,
    grid_spec: &GridSpec,
) -> Result<DVector<f64>> {
    Ok(primary_eval(flat, prob, gains, w, grid_spec)?.rhs)
}
