//! Compact-form evolution right-hand sides.
//!
//! Only the nodal controls (plus the free terminal time and the constraint
//! multipliers) evolve; states and costates are reconstructed each
//! evaluation, so the flow stays in the quasi-feasible domain. The rates
//! are the exact functional gradients of the compact residual functional,
//! assembled through the `M M^-1` factorization of the state transition
//! matrices so every nested integral is an O(N) cumulative sum. Finite
//! differences of the functional (see the gradient audit) arbitrate every
//! sign and transpose in the assembly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VemError};
use crate::evolve::{Gains, GridSpec};
use crate::grid::{cumtrapz, Direction, Grid, GridSeries};
use crate::model::{hu, hx, jbar_compact, OcpProblem, Weights};
use crate::propagate::{
    propagate_costates, propagate_states, ControlFunction, ControlInterpolant, Trajectory,
};
use crate::stm::{fundamental_set, FundamentalSet};

/// Everything at the terminal node that the rate assemblies reuse.
#[derive(Debug, Clone)]
pub struct TerminalBlock {
    pub g: DVector<f64>,
    pub gx: DMatrix<f64>,
    pub gt: DVector<f64>,
    pub gxt: DMatrix<f64>,
    pub gtt: DVector<f64>,
    pub gxx_pi: DMatrix<f64>,
    pub phixx: DMatrix<f64>,
    pub phixt: DVector<f64>,
    pub phitt: f64,
    pub f: DVector<f64>,
    pub hx: DVector<f64>,
    pub hu: DVector<f64>,
    pub ht: f64,
    pub u_dot: DVector<f64>,
    /// `H(tf) + phi_t + pi' g_t`; zero in the fixed-`tf` mode where the
    /// functional carries no terminal-Hamiltonian energy.
    pub r_h: f64,
}

/// Per-evaluation precomputation: reconstructed trajectory, fundamental
/// matrices, `H_u` samples and both cumulative transition integrals.
pub struct EvalCache {
    pub grid: Grid,
    pub traj: Trajectory,
    pub fs: FundamentalSet,
    pub hu: GridSeries,
    /// `c(t_i) = int_t0^t_i Phi(t_i, s) fu H_u ds`, materialized per node.
    pub c_fwd: GridSeries,
    /// backward accumulator `int_t_i^tf M(s)' (Hux' H_u + Hxx c)(s) ds`
    d_bwd: GridSeries,
    pub terminal: TerminalBlock,
    pub pi: DVector<f64>,
    pub tf: f64,
    pub jbar: f64,
}

impl EvalCache {
    /// `c(tf)`, the `H_u`-weighted terminal control-to-state sensitivity.
    pub fn c_terminal(&self) -> DVector<f64> {
        self.c_fwd.col(self.grid.len() - 1)
    }
}

/// Reconstruct the quasi-feasible trajectory for nodal controls and build
/// every cumulative integral the rate assemblies need.
pub fn build_cache(
    prob: &OcpProblem,
    u_nodes: &GridSeries,
    tf: f64,
    pi: &DVector<f64>,
    w: &Weights,
    grid: &Grid,
) -> Result<EvalCache> {
    u_nodes.check_aligned(grid, "build_cache controls")?;
    if (grid.tf() - tf).abs() > 1e-12 * tf.abs().max(1.0) {
        return Err(VemError::ShapeError {
            context: "build_cache",
            expected: format!("grid terminal time {tf}"),
            got: format!("{}", grid.tf()),
        });
    }
    let u_interp = ControlInterpolant::natural_spline(u_nodes, grid)?;
    build_cache_from_control(prob, &u_interp, u_nodes, tf, pi, w, grid)
}

/// As [`build_cache`] but with an explicit control function driving the
/// propagation (the nodal series must sample it at the grid nodes). The
/// finite-difference oracles use this entry point with bumped controls.
pub fn build_cache_from_control(
    prob: &OcpProblem,
    u_fun: &dyn ControlFunction,
    u_nodes: &GridSeries,
    tf: f64,
    pi: &DVector<f64>,
    w: &Weights,
    grid: &Grid,
) -> Result<EvalCache> {
    let x = propagate_states(prob, u_fun, grid)?;
    let lam = propagate_costates(prob, &x, u_fun, pi, grid)?;
    let fs = fundamental_set(prob, &x, u_fun, grid)?;
    let traj = Trajectory {
        grid: grid.clone(),
        x,
        lam,
        u: u_nodes.clone(),
    };

    let n_nodes = grid.len();
    let last = n_nodes - 1;
    let mut hu_s = GridSeries::zeros(prob.m, n_nodes);
    for i in 0..n_nodes {
        hu_s.set_col(
            i,
            &hu(prob, &traj.x.col(i), &traj.lam.col(i), &traj.u.col(i), grid.t(i))?,
        );
    }

    // forward factorized sensitivity integral
    let weighted_fwd = GridSeries::from_fn(prob.n, grid, |i, t| {
        fs.minv(i) * ((prob.fu)(&traj.x.col(i), &traj.u.col(i), t) * hu_s.col(i))
    });
    let c_raw = cumtrapz(&weighted_fwd, grid, Direction::Forward)?;
    let c_fwd = GridSeries::from_fn(prob.n, grid, |i, _| fs.m(i) * c_raw.col(i));

    // backward factorized adjoint-variation integral
    let weighted_bwd = GridSeries::from_fn(prob.n, grid, |i, t| {
        let (x_i, lam_i, u_i) = (traj.x.col(i), traj.lam.col(i), traj.u.col(i));
        let kernel = (prob.hux)(&x_i, &lam_i, &u_i, t).transpose() * hu_s.col(i)
            + (prob.hxx)(&x_i, &lam_i, &u_i, t) * c_fwd.col(i);
        fs.m(i).transpose() * kernel
    });
    let d_bwd = cumtrapz(&weighted_bwd, grid, Direction::Backward)?;

    let (x_f, lam_f, u_f) = (traj.x.col(last), traj.lam.col(last), traj.u.col(last));
    let r_h = if prob.terminal_mode.is_free_tf() {
        crate::model::h_terminal(prob, &x_f, &lam_f, &u_f, pi, tf)?
    } else {
        0.0
    };
    let terminal = TerminalBlock {
        g: (prob.g)(&x_f, tf),
        gx: (prob.gx)(&x_f, tf),
        gt: (prob.gt)(&x_f, tf),
        gxt: (prob.gxt)(&x_f, tf),
        gtt: (prob.gtt)(&x_f, tf),
        gxx_pi: (prob.gxx_pi)(&x_f, tf, pi),
        phixx: (prob.phixx)(&x_f, tf),
        phixt: (prob.phixt)(&x_f, tf),
        phitt: (prob.phitt)(&x_f, tf),
        f: (prob.f)(&x_f, &u_f, tf),
        hx: hx(prob, &x_f, &lam_f, &u_f, tf),
        hu: hu_s.col(last),
        ht: (prob.ht)(&x_f, &lam_f, &u_f, tf),
        u_dot: u_fun.eval_deriv(tf),
        r_h,
    };

    let jbar = jbar_compact(prob, &traj, pi, tf, w)?;
    Ok(EvalCache {
        grid: grid.clone(),
        traj,
        fs,
        hu: hu_s,
        c_fwd,
        d_bwd,
        terminal,
        pi: pi.clone(),
        tf,
        jbar,
    })
}

/// Terminal vector carried back through `Phi'(tf, t)` into the control rate:
/// constraint energy, multiplier-curvature contraction of `c(tf)`, and (for
/// free `tf`) the terminal-Hamiltonian energy bracket.
fn terminal_vector(prob: &OcpProblem, cache: &EvalCache, w: &Weights) -> DVector<f64> {
    let tb = &cache.terminal;
    let curv = &tb.phixx + &tb.gxx_pi;
    let mut v = &curv * cache.c_terminal();
    if prob.terminal_mode.has_constraint() {
        v += tb.gx.transpose() * (&w.w_xf * &tb.g);
    }
    if prob.terminal_mode.is_free_tf() {
        let mut bracket = &tb.hx + &tb.phixt + &curv * &tb.f;
        if prob.q > 0 {
            bracket += tb.gxt.transpose() * &cache.pi;
        }
        v += w.w_h * tb.r_h * bracket;
    }
    v
}

fn check_finite(term: &'static str, v: &DVector<f64>, node: usize) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(VemError::non_finite_at(term, node))
    }
}

/// Control rate density `n_u` over the grid. The four smooth summands are
/// the local `Huu H_u` term, the forward-integral term through `Hux`, the
/// backward transition integral, and the terminal block through
/// `Phi'(tf, t)`. In the free-`tf` modes the terminal-Hamiltonian energy
/// also depends on the last nodal control directly, which adds a
/// quadrature-normalized boundary mass at the final node.
pub fn n_u(cache: &EvalCache, prob: &OcpProblem, w: &Weights) -> Result<GridSeries> {
    let grid = &cache.grid;
    let last = grid.len() - 1;
    let v_f = terminal_vector(prob, cache, w);
    let m_last_t_v = cache.fs.m(last).transpose() * &v_f;
    let mut out = GridSeries::zeros(prob.m, grid.len());
    for i in 0..grid.len() {
        let t = grid.t(i);
        let (x_i, lam_i, u_i) = (
            cache.traj.x.col(i),
            cache.traj.lam.col(i),
            cache.traj.u.col(i),
        );
        let fu_t = (prob.fu)(&x_i, &u_i, t).transpose();

        let local = (prob.huu)(&x_i, &lam_i, &u_i, t) * cache.hu.col(i);
        check_finite("n_u local Huu term", &local, i)?;
        let forward = (prob.hux)(&x_i, &lam_i, &u_i, t) * cache.c_fwd.col(i);
        check_finite("n_u forward-integral term", &forward, i)?;
        let adjoint = &fu_t * (cache.fs.minv(i).transpose() * cache.d_bwd.col(i));
        check_finite("n_u backward-integral term", &adjoint, i)?;
        let terminal = fu_t * (cache.fs.minv(i).transpose() * &m_last_t_v);
        check_finite("n_u terminal term", &terminal, i)?;

        out.set_col(i, &(local + forward + adjoint + terminal));
    }
    if prob.terminal_mode.is_free_tf() {
        let boundary =
            w.w_h * cache.terminal.r_h / grid.quad_weight(last) * cache.terminal.hu.clone();
        check_finite("n_u terminal boundary mass", &boundary, last)?;
        out.set_col(last, &(out.col(last) + boundary));
    }
    Ok(out)
}

/// Terminal-time rate `n_tf` (free-`tf` modes only).
pub fn n_tf(cache: &EvalCache, prob: &OcpProblem, w: &Weights) -> Result<f64> {
    if !prob.terminal_mode.is_free_tf() {
        return Err(VemError::ModeError("n_tf requires a free terminal time"));
    }
    let tb = &cache.terminal;
    let curv = &tb.phixx + &tb.gxx_pi;
    // frozen-endpoint rate of the terminal costate condition
    let mut t_bracket = &curv * &tb.f + &tb.phixt + &tb.hx;
    if prob.q > 0 {
        t_bracket += tb.gxt.transpose() * &cache.pi;
    }

    let mut value = 0.5 * tb.hu.norm_squared() + cache.c_terminal().dot(&t_bracket);
    if prob.terminal_mode.has_constraint() {
        value += (&w.w_xf * &tb.g).dot(&(&tb.gx * &tb.f + &tb.gt));
    }
    let mut rate = tb.f.dot(&(&tb.phixt + &t_bracket)) + tb.ht + tb.phitt
        + tb.hu.dot(&tb.u_dot);
    if prob.q > 0 {
        rate += tb.f.dot(&(tb.gxt.transpose() * &cache.pi)) + cache.pi.dot(&tb.gtt);
    }
    value += w.w_h * tb.r_h * rate;
    if !value.is_finite() {
        return Err(VemError::non_finite("n_tf"));
    }
    Ok(value)
}

/// Multiplier rate `n_pi` (terminal-constraint modes only).
pub fn n_pi(cache: &EvalCache, prob: &OcpProblem, w: &Weights) -> Result<DVector<f64>> {
    if !prob.terminal_mode.has_constraint() {
        return Err(VemError::ModeError(
            "n_pi requires a terminal constraint",
        ));
    }
    let tb = &cache.terminal;
    let mut value = &tb.gx * cache.c_terminal();
    if prob.terminal_mode.is_free_tf() {
        value += w.w_h * tb.r_h * (&tb.gt + &tb.gx * &tb.f);
    }
    if !value.iter().all(|v| v.is_finite()) {
        return Err(VemError::non_finite("n_pi"));
    }
    Ok(value)
}

/// Flat-state layout of the compact evolution unknown:
/// `[u(t_0) .. u(t_{N-1}) channel-major per node] ++ [tf if free] ++ [pi]`.
#[derive(Debug, Clone, Copy)]
pub struct CompactLayout {
    pub m: usize,
    pub q: usize,
    pub n_nodes: usize,
    pub free_tf: bool,
}

impl CompactLayout {
    pub fn of(prob: &OcpProblem, n_nodes: usize) -> Self {
        CompactLayout {
            m: prob.m,
            q: prob.q,
            n_nodes,
            free_tf: prob.terminal_mode.is_free_tf(),
        }
    }

    pub fn len(&self) -> usize {
        self.m * self.n_nodes + usize::from(self.free_tf) + self.q
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pack(&self, u_nodes: &GridSeries, tf: Option<f64>, pi: &DVector<f64>) -> DVector<f64> {
        let mut flat = DVector::zeros(self.len());
        for i in 0..self.n_nodes {
            for ch in 0..self.m {
                flat[i * self.m + ch] = u_nodes.values()[(ch, i)];
            }
        }
        let mut k = self.m * self.n_nodes;
        if self.free_tf {
            flat[k] = tf.expect("free-tf layout requires a terminal time");
            k += 1;
        }
        for j in 0..self.q {
            flat[k + j] = pi[j];
        }
        flat
    }

    pub fn unpack(&self, flat: &DVector<f64>) -> Result<(GridSeries, Option<f64>, DVector<f64>)> {
        if flat.len() != self.len() {
            return Err(VemError::ShapeError {
                context: "compact flat state",
                expected: format!("{} entries", self.len()),
                got: format!("{} entries", flat.len()),
            });
        }
        let mut u = DMatrix::zeros(self.m, self.n_nodes);
        for i in 0..self.n_nodes {
            for ch in 0..self.m {
                u[(ch, i)] = flat[i * self.m + ch];
            }
        }
        let mut k = self.m * self.n_nodes;
        let tf = if self.free_tf {
            k += 1;
            Some(flat[k - 1])
        } else {
            None
        };
        let pi = DVector::from_fn(self.q, |j, _| flat[k + j]);
        Ok((GridSeries::new(u), tf, pi))
    }
}

/// One full compact-form evaluation: cache, rates, packed rate vector.
pub struct CompactEval {
    pub cache: EvalCache,
    pub rhs: DVector<f64>,
}

/// Evaluate the compact evolution right-hand side
/// `du/dtau = -K n_u`, `dtf/dtau = -k_tf n_tf`, `dpi/dtau = -K_pi n_pi`
/// for a flat state. Pure function of the state.
pub fn compact_eval(
    flat: &DVector<f64>,
    prob: &OcpProblem,
    gains: &Gains,
    w: &Weights,
    grid_spec: &GridSpec,
) -> Result<CompactEval> {
    let layout = CompactLayout::of(prob, grid_spec.n_nodes);
    let (u_nodes, tf_opt, pi) = layout.unpack(flat)?;
    let tf = grid_spec.resolve_tf(tf_opt)?;
    let grid = crate::grid::make_grid(grid_spec.n_nodes, grid_spec.t0, tf)?;
    let cache = build_cache(prob, &u_nodes, tf, &pi, w, &grid)?;

    let nu = n_u(&cache, prob, w)?;
    let mut du = GridSeries::zeros(prob.m, grid_spec.n_nodes);
    for i in 0..grid_spec.n_nodes {
        du.set_col(i, &(-(&gains.k * nu.col(i))));
    }
    let dtf = if layout.free_tf {
        Some(-gains.k_tf * n_tf(&cache, prob, w)?)
    } else {
        None
    };
    let dpi = if prob.q > 0 {
        -(&gains.k_pi * n_pi(&cache, prob, w)?)
    } else {
        DVector::zeros(0)
    };
    let rhs = layout.pack(&du, dtf, &dpi);
    Ok(CompactEval { cache, rhs })
}

/// Thin spec-shaped wrapper returning only the packed rate vector.
pub fn rhs_compact(
    flat: &DVector<f64>,
    prob: &OcpProblem,
    gains: &Gains,
    w: &Weights,
    grid_spec: &GridSpec,
) -> Result<DVector<f64>> {
    Ok(compact_eval(flat, prob, gains, w, grid_spec)?.rhs)
}

/// The compact functional evaluated for an arbitrary control function on an
/// `n_nodes` grid over `[t0, tf]`. This is the single entry point the
/// finite-difference gradient oracles differentiate.
pub fn jbar_from_control(
    prob: &OcpProblem,
    u_fun: &dyn ControlFunction,
    n_nodes: usize,
    tf: f64,
    pi: &DVector<f64>,
    w: &Weights,
) -> Result<f64> {
    let grid = crate::grid::make_grid(n_nodes, prob.t0, tf)?;
    let u_nodes = GridSeries::from_fn(prob.m, &grid, |_, t| u_fun.eval(t));
    let x = propagate_states(prob, u_fun, &grid)?;
    let lam = propagate_costates(prob, &x, u_fun, pi, &grid)?;
    let traj = Trajectory {
        grid: grid.clone(),
        x,
        lam,
        u: u_nodes,
    };
    jbar_compact(prob, &traj, pi, tf, w)
}
