//! Optimal control problem definition and first-order optimality machinery.
//!
//! A problem is a Bolza cost `phi(x(tf), tf) + integral L dt` subject to
//! `xdot = f(x, u, t)`, `x(t0) = x0` and a terminal constraint
//! `g(x(tf), tf) = 0`. The Hamiltonian is `H = L + lam' f`. All derivative
//! quantities are user callbacks; second derivatives are contracted (they
//! include the `lam . f` second-derivative terms) and may be auto-filled by
//! central finite differences of the first-derivative callbacks.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VemError};
use crate::grid::{time_derivative, trapz, GridSeries};
use crate::propagate::Trajectory;

pub type VecFn3 = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
pub type MatFn3 = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
pub type ScalarFn3 = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> f64 + Send + Sync>;
pub type VecFn2 = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
pub type MatFn2 = Arc<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
pub type ScalarFn2 = Arc<dyn Fn(&DVector<f64>, f64) -> f64 + Send + Sync>;
pub type VecFn4 =
    Arc<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
pub type MatFn4 =
    Arc<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
pub type ScalarFn4 =
    Arc<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>, f64) -> f64 + Send + Sync>;
pub type GxxPiFn =
    Arc<dyn Fn(&DVector<f64>, f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Step used when auto-filling second derivatives by central differences.
pub const FD_AUTOFILL_STEP: f64 = 1e-6;

/// How the terminal boundary of the horizon is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TerminalMode {
    /// Free `tf`, terminal constraint `g(x(tf), tf) = 0` with `q >= 1`.
    FreeTfWithConstraint,
    /// Fixed `tf`, terminal constraint with `q >= 1`.
    FixedTfWithConstraint,
    /// Free `tf`, no terminal constraint (`q` treated as 0).
    FreeTfFreeTerminalState,
}

impl TerminalMode {
    pub fn is_free_tf(self) -> bool {
        !matches!(self, TerminalMode::FixedTfWithConstraint)
    }

    pub fn has_constraint(self) -> bool {
        !matches!(self, TerminalMode::FreeTfFreeTerminalState)
    }
}

/// Rectangular sampling box used by the finite-difference checks to draw
/// admissible points.
#[derive(Debug, Clone)]
pub struct SampleDomain {
    pub x_lo: DVector<f64>,
    pub x_hi: DVector<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    pub lam_lo: DVector<f64>,
    pub lam_hi: DVector<f64>,
    pub pi_lo: DVector<f64>,
    pub pi_hi: DVector<f64>,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl SampleDomain {
    pub fn unit_box(n: usize, m: usize, q: usize, x0: &DVector<f64>, t0: f64) -> Self {
        let one_n = DVector::from_element(n, 1.0);
        let one_m = DVector::from_element(m, 1.0);
        let one_q = DVector::from_element(q, 1.0);
        SampleDomain {
            x_lo: x0 - &one_n,
            x_hi: x0 + &one_n,
            u_lo: -&one_m,
            u_hi: one_m,
            lam_lo: -&one_n,
            lam_hi: one_n.clone(),
            pi_lo: -&one_q,
            pi_hi: one_q,
            t_lo: t0,
            t_hi: t0 + 1.0,
        }
    }
}

/// The optimal control problem with all derivative callbacks resolved.
///
/// Construct through [`OcpProblemBuilder`]; missing contracted second
/// derivatives are filled in with central finite differences of the
/// first-derivative callbacks at build time.
#[derive(Clone)]
pub struct OcpProblem {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub t0: f64,
    pub x0: DVector<f64>,
    pub terminal_mode: TerminalMode,
    pub sample_domain: SampleDomain,

    pub f: VecFn3,
    pub fx: MatFn3,
    pub fu: MatFn3,
    pub l: ScalarFn3,
    pub lx: VecFn3,
    pub lu: VecFn3,
    pub phi: ScalarFn2,
    pub phix: VecFn2,
    pub phit: ScalarFn2,
    pub phixx: MatFn2,
    pub phixt: VecFn2,
    pub phitt: ScalarFn2,
    pub g: VecFn2,
    pub gx: MatFn2,
    pub gt: VecFn2,
    pub gxt: MatFn2,
    pub gtt: VecFn2,
    pub hxx: MatFn4,
    pub hux: MatFn4,
    pub huu: MatFn4,
    pub gxx_pi: GxxPiFn,
    pub ht: ScalarFn4,
}

impl std::fmt::Debug for OcpProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OcpProblem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("q", &self.q)
            .field("t0", &self.t0)
            .field("terminal_mode", &self.terminal_mode)
            .finish()
    }
}

/// Builder with required first-order data; everything else has defaults.
pub struct OcpProblemBuilder {
    name: String,
    n: usize,
    m: usize,
    q: usize,
    t0: f64,
    x0: DVector<f64>,
    terminal_mode: TerminalMode,
    sample_domain: Option<SampleDomain>,
    f: Option<VecFn3>,
    fx: Option<MatFn3>,
    fu: Option<MatFn3>,
    l: Option<ScalarFn3>,
    lx: Option<VecFn3>,
    lu: Option<VecFn3>,
    phi: Option<ScalarFn2>,
    phix: Option<VecFn2>,
    phit: Option<ScalarFn2>,
    phixx: Option<MatFn2>,
    phixt: Option<VecFn2>,
    phitt: Option<ScalarFn2>,
    g: Option<VecFn2>,
    gx: Option<MatFn2>,
    gt: Option<VecFn2>,
    gxt: Option<MatFn2>,
    gtt: Option<VecFn2>,
    hxx: Option<MatFn4>,
    hux: Option<MatFn4>,
    huu: Option<MatFn4>,
    gxx_pi: Option<GxxPiFn>,
    ht: Option<ScalarFn4>,
}

impl OcpProblemBuilder {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        m: usize,
        q: usize,
        t0: f64,
        x0: DVector<f64>,
        terminal_mode: TerminalMode,
    ) -> Self {
        OcpProblemBuilder {
            name: name.into(),
            n,
            m,
            q,
            t0,
            x0,
            terminal_mode,
            sample_domain: None,
            f: None,
            fx: None,
            fu: None,
            l: None,
            lx: None,
            lu: None,
            phi: None,
            phix: None,
            phit: None,
            phixx: None,
            phixt: None,
            phitt: None,
            g: None,
            gx: None,
            gt: None,
            gxt: None,
            gtt: None,
            hxx: None,
            hux: None,
            huu: None,
            gxx_pi: None,
            ht: None,
        }
    }

    pub fn dynamics(mut self, f: VecFn3, fx: MatFn3, fu: MatFn3) -> Self {
        self.f = Some(f);
        self.fx = Some(fx);
        self.fu = Some(fu);
        self
    }

    pub fn running_cost(mut self, l: ScalarFn3, lx: VecFn3, lu: VecFn3) -> Self {
        self.l = Some(l);
        self.lx = Some(lx);
        self.lu = Some(lu);
        self
    }

    pub fn terminal_cost(mut self, phi: ScalarFn2, phix: VecFn2, phit: ScalarFn2) -> Self {
        self.phi = Some(phi);
        self.phix = Some(phix);
        self.phit = Some(phit);
        self
    }

    pub fn terminal_cost_second(
        mut self,
        phixx: MatFn2,
        phixt: VecFn2,
        phitt: ScalarFn2,
    ) -> Self {
        self.phixx = Some(phixx);
        self.phixt = Some(phixt);
        self.phitt = Some(phitt);
        self
    }

    pub fn terminal_constraint(mut self, g: VecFn2, gx: MatFn2, gt: VecFn2) -> Self {
        self.g = Some(g);
        self.gx = Some(gx);
        self.gt = Some(gt);
        self
    }

    pub fn terminal_constraint_second(mut self, gxt: MatFn2, gtt: VecFn2) -> Self {
        self.gxt = Some(gxt);
        self.gtt = Some(gtt);
        self
    }

    pub fn hamiltonian_second(mut self, hxx: MatFn4, hux: MatFn4, huu: MatFn4) -> Self {
        self.hxx = Some(hxx);
        self.hux = Some(hux);
        self.huu = Some(huu);
        self
    }

    pub fn gxx_pi(mut self, gxx_pi: GxxPiFn) -> Self {
        self.gxx_pi = Some(gxx_pi);
        self
    }

    pub fn ht(mut self, ht: ScalarFn4) -> Self {
        self.ht = Some(ht);
        self
    }

    pub fn sample_domain(mut self, domain: SampleDomain) -> Self {
        self.sample_domain = Some(domain);
        self
    }

    pub fn build(self) -> Result<OcpProblem> {
        let (n, m, q) = (self.n, self.m, self.q);
        if self.terminal_mode.has_constraint() && q == 0 {
            return Err(VemError::InvalidConfig(
                "q must be >= 1 in the terminal-constraint modes".into(),
            ));
        }
        if !self.terminal_mode.has_constraint() && q != 0 {
            return Err(VemError::InvalidConfig(
                "q must be 0 when the terminal state is free".into(),
            ));
        }
        let f = self
            .f
            .ok_or_else(|| VemError::InvalidConfig("dynamics callbacks are required".into()))?;
        let fx = self.fx.unwrap();
        let fu = self.fu.unwrap();
        let l: ScalarFn3 = self.l.unwrap_or_else(|| Arc::new(|_, _, _| 0.0));
        let lx: VecFn3 = self
            .lx
            .unwrap_or_else(|| Arc::new(move |_, _, _| DVector::zeros(n)));
        let lu: VecFn3 = self
            .lu
            .unwrap_or_else(|| Arc::new(move |_, _, _| DVector::zeros(m)));
        let phi: ScalarFn2 = self.phi.unwrap_or_else(|| Arc::new(|_, _| 0.0));
        let phix: VecFn2 = self
            .phix
            .unwrap_or_else(|| Arc::new(move |_, _| DVector::zeros(n)));
        let phit: ScalarFn2 = self.phit.unwrap_or_else(|| Arc::new(|_, _| 0.0));
        let g_missing = self.g.is_none();
        let g: VecFn2 = self
            .g
            .unwrap_or_else(|| Arc::new(move |_, _| DVector::zeros(q)));
        let gx: MatFn2 = self
            .gx
            .unwrap_or_else(|| Arc::new(move |_, _| DMatrix::zeros(q, n)));
        let gt: VecFn2 = self
            .gt
            .unwrap_or_else(|| Arc::new(move |_, _| DVector::zeros(q)));
        if self.terminal_mode.has_constraint() && g_missing {
            return Err(VemError::InvalidConfig(
                "terminal constraint callbacks are required when q >= 1".into(),
            ));
        }

        // second derivatives: analytic when supplied, else central
        // differences of the first-derivative callbacks with step 1e-6
        let phixx: MatFn2 = self.phixx.unwrap_or_else(|| {
            let phix = phix.clone();
            Arc::new(move |x, t| fd_jacobian_x2(&*phix, x, t))
        });
        let phixt: VecFn2 = self.phixt.unwrap_or_else(|| {
            let phix = phix.clone();
            Arc::new(move |x, t| fd_dt_vec2(&*phix, x, t))
        });
        let phitt: ScalarFn2 = self.phitt.unwrap_or_else(|| {
            let phit = phit.clone();
            Arc::new(move |x, t| fd_dt_scalar2(&*phit, x, t))
        });
        let gxt: MatFn2 = self.gxt.unwrap_or_else(|| {
            let gx = gx.clone();
            Arc::new(move |x, t| fd_dt_mat2(&*gx, x, t))
        });
        let gtt: VecFn2 = self.gtt.unwrap_or_else(|| {
            let gt = gt.clone();
            Arc::new(move |x, t| fd_dt_vec2(&*gt, x, t))
        });
        let hxx: MatFn4 = self.hxx.unwrap_or_else(|| {
            let (lx, fx) = (lx.clone(), fx.clone());
            Arc::new(move |x, lam, u, t| {
                let hx = |x: &DVector<f64>| lx(x, u, t) + fx(x, u, t).transpose() * lam;
                fd_jacobian_vec(&hx, x)
            })
        });
        let hux: MatFn4 = self.hux.unwrap_or_else(|| {
            let (lu, fu) = (lu.clone(), fu.clone());
            Arc::new(move |x, lam, u, t| {
                let hu = |x: &DVector<f64>| lu(x, u, t) + fu(x, u, t).transpose() * lam;
                fd_jacobian_vec(&hu, x)
            })
        });
        let huu: MatFn4 = self.huu.unwrap_or_else(|| {
            let (lu, fu) = (lu.clone(), fu.clone());
            Arc::new(move |x, lam, u, t| {
                let hu = |u: &DVector<f64>| lu(x, u, t) + fu(x, u, t).transpose() * lam;
                fd_jacobian_vec(&hu, u)
            })
        });
        let gxx_pi: GxxPiFn = self.gxx_pi.unwrap_or_else(|| {
            let gx = gx.clone();
            Arc::new(move |x, t, pi| {
                let gxt_pi = |x: &DVector<f64>| gx(x, t).transpose() * pi;
                fd_jacobian_vec(&gxt_pi, x)
            })
        });
        let ht: ScalarFn4 = self.ht.unwrap_or_else(|| {
            let (l, f) = (l.clone(), f.clone());
            Arc::new(move |x, lam, u, t| {
                let h = |t: f64| l(x, u, t) + lam.dot(&f(x, u, t));
                (h(t + FD_AUTOFILL_STEP) - h(t - FD_AUTOFILL_STEP)) / (2.0 * FD_AUTOFILL_STEP)
            })
        });

        let sample_domain = self
            .sample_domain
            .unwrap_or_else(|| SampleDomain::unit_box(n, m, q, &self.x0, self.t0));

        Ok(OcpProblem {
            name: self.name,
            n,
            m,
            q,
            t0: self.t0,
            x0: self.x0,
            terminal_mode: self.terminal_mode,
            sample_domain,
            f,
            fx,
            fu,
            l,
            lx,
            lu,
            phi,
            phix,
            phit,
            phixx,
            phixt,
            phitt,
            g,
            gx,
            gt,
            gxt,
            gtt,
            hxx,
            hux,
            huu,
            gxx_pi,
            ht,
        })
    }
}

fn fd_jacobian_vec(f: &dyn Fn(&DVector<f64>) -> DVector<f64>, at: &DVector<f64>) -> DMatrix<f64> {
    let probe = f(at);
    let mut jac = DMatrix::zeros(probe.len(), at.len());
    for j in 0..at.len() {
        let mut hi = at.clone();
        let mut lo = at.clone();
        hi[j] += FD_AUTOFILL_STEP;
        lo[j] -= FD_AUTOFILL_STEP;
        jac.set_column(j, &((f(&hi) - f(&lo)) / (2.0 * FD_AUTOFILL_STEP)));
    }
    jac
}

fn fd_jacobian_x2(
    f: &dyn Fn(&DVector<f64>, f64) -> DVector<f64>,
    x: &DVector<f64>,
    t: f64,
) -> DMatrix<f64> {
    fd_jacobian_vec(&|x: &DVector<f64>| f(x, t), x)
}

fn fd_dt_vec2(
    f: &dyn Fn(&DVector<f64>, f64) -> DVector<f64>,
    x: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    (f(x, t + FD_AUTOFILL_STEP) - f(x, t - FD_AUTOFILL_STEP)) / (2.0 * FD_AUTOFILL_STEP)
}

fn fd_dt_mat2(
    f: &dyn Fn(&DVector<f64>, f64) -> DMatrix<f64>,
    x: &DVector<f64>,
    t: f64,
) -> DMatrix<f64> {
    (f(x, t + FD_AUTOFILL_STEP) - f(x, t - FD_AUTOFILL_STEP)) / (2.0 * FD_AUTOFILL_STEP)
}

fn fd_dt_scalar2(f: &dyn Fn(&DVector<f64>, f64) -> f64, x: &DVector<f64>, t: f64) -> f64 {
    (f(x, t + FD_AUTOFILL_STEP) - f(x, t - FD_AUTOFILL_STEP)) / (2.0 * FD_AUTOFILL_STEP)
}

/// Weights of the constructed unconstrained functionals.
#[derive(Debug, Clone)]
pub struct Weights {
    pub w_xf: DMatrix<f64>,
    pub w_h: f64,
    pub w_x0: DMatrix<f64>,
    pub w_lambda: DMatrix<f64>,
}

impl Weights {
    /// Identity weights of the right dimensions with `w_h = 1`.
    pub fn identity(n: usize, q: usize) -> Self {
        Weights {
            w_xf: DMatrix::identity(q, q),
            w_h: 1.0,
            w_x0: DMatrix::identity(n, n),
            w_lambda: DMatrix::identity(n, n),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("W_xf", &self.w_xf),
            ("W_x0", &self.w_x0),
            ("W_lambda", &self.w_lambda),
        ] {
            check_spd(name, w)?;
        }
        if !(self.w_h > 0.0) {
            return Err(VemError::InvalidConfig("w_H must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_spd(name: &str, w: &DMatrix<f64>) -> Result<()> {
    if w.nrows() != w.ncols() {
        return Err(VemError::InvalidConfig(format!("{name} must be square")));
    }
    if w.nrows() == 0 {
        return Ok(());
    }
    let scale = w.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1.0);
    let asym = (w - w.transpose()).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if asym > 1e-12 * scale {
        return Err(VemError::InvalidConfig(format!("{name} must be symmetric")));
    }
    if Cholesky::new(w.clone()).is_none() {
        return Err(VemError::InvalidConfig(format!(
            "{name} must be positive-definite"
        )));
    }
    Ok(())
}

/// First-order optimality and feasibility residuals of a candidate solution.
/// All norms over the grid are max norms; vector residuals at the terminal
/// point are Euclidean.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ResidualReport {
    pub dyn_res: f64,
    pub costate_res: f64,
    pub hu_res: f64,
    pub g_res: f64,
    pub transversality_res: f64,
    pub h_terminal_res: f64,
    pub x0_res: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        [
            self.dyn_res,
            self.costate_res,
            self.hu_res,
            self.g_res,
            self.transversality_res,
            self.h_terminal_res,
            self.x0_res,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn check_shapes(prob: &OcpProblem, x: &DVector<f64>, lam: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    if x.len() != prob.n || lam.len() != prob.n || u.len() != prob.m {
        return Err(VemError::ShapeError {
            context: "hamiltonian arguments",
            expected: format!("x,lam of length {}, u of length {}", prob.n, prob.m),
            got: format!("x {}, lam {}, u {}", x.len(), lam.len(), u.len()),
        });
    }
    Ok(())
}

/// `H = L + lam' f`.
pub fn hamiltonian(
    prob: &OcpProblem,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> Result<f64> {
    check_shapes(prob, x, lam, u)?;
    let h = (prob.l)(x, u, t) + lam.dot(&(prob.f)(x, u, t));
    if !h.is_finite() {
        return Err(VemError::non_finite("hamiltonian"));
    }
    Ok(h)
}

/// `H_u = L_u + fu' lam`.
pub fn hu(
    prob: &OcpProblem,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    check_shapes(prob, x, lam, u)?;
    let v = (prob.lu)(x, u, t) + (prob.fu)(x, u, t).transpose() * lam;
    if !v.iter().all(|c| c.is_finite()) {
        return Err(VemError::non_finite("hu"));
    }
    Ok(v)
}

/// `H_x = L_x + fx' lam`.
pub fn hx(
    prob: &OcpProblem,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    (prob.lx)(x, u, t) + (prob.fx)(x, u, t).transpose() * lam
}

/// `H(tf) + phi_t + pi' g_t`, the free-terminal-time transversality residual.
pub fn h_terminal(
    prob: &OcpProblem,
    x_tf: &DVector<f64>,
    lam_tf: &DVector<f64>,
    u_tf: &DVector<f64>,
    pi: &DVector<f64>,
    tf: f64,
) -> Result<f64> {
    let h = hamiltonian(prob, x_tf, lam_tf, u_tf, tf)?;
    Ok(h + (prob.phit)(x_tf, tf) + pi.dot(&(prob.gt)(x_tf, tf)))
}

/// Evaluate every feasibility/optimality residual of a sampled trajectory.
/// `h_terminal_res` applies only to the free-`tf` modes and is reported as
/// zero otherwise.
pub fn optimality_report(
    prob: &OcpProblem,
    traj: &Trajectory,
    pi: &DVector<f64>,
    tf: f64,
) -> Result<ResidualReport> {
    let grid = &traj.grid;
    if grid.len() < 3 {
        return Err(VemError::GridTooSmall(grid.len()));
    }
    if !(traj.x.is_finite() && traj.lam.is_finite() && traj.u.is_finite()) {
        return Err(VemError::non_finite("optimality_report input"));
    }
    let n_nodes = grid.len();
    let x_t = time_derivative(&traj.x, grid)?;
    let lam_t = time_derivative(&traj.lam, grid)?;

    let mut dyn_res = 0.0_f64;
    let mut costate_res = 0.0_f64;
    let mut hu_res = 0.0_f64;
    for i in 0..n_nodes {
        let (x, lam, u, t) = (traj.x.col(i), traj.lam.col(i), traj.u.col(i), grid.t(i));
        let fv = (prob.f)(&x, &u, t);
        dyn_res = dyn_res.max((x_t.col(i) - fv).amax());
        costate_res = costate_res.max((lam_t.col(i) + hx(prob, &x, &lam, &u, t)).amax());
        hu_res = hu_res.max(hu(prob, &x, &lam, &u, t)?.amax());
    }

    let x_tf = traj.x.col(n_nodes - 1);
    let lam_tf = traj.lam.col(n_nodes - 1);
    let u_tf = traj.u.col(n_nodes - 1);
    let g_res = (prob.g)(&x_tf, tf).norm();
    let transversality_res = (&lam_tf
        - (prob.phix)(&x_tf, tf)
        - (prob.gx)(&x_tf, tf).transpose() * pi)
        .norm();
    let h_terminal_res = if prob.terminal_mode.is_free_tf() {
        h_terminal(prob, &x_tf, &lam_tf, &u_tf, pi, tf)?.abs()
    } else {
        0.0
    };
    let x0_res = (traj.x.col(0) - &prob.x0).norm();

    let report = ResidualReport {
        dyn_res,
        costate_res,
        hu_res,
        g_res,
        transversality_res,
        h_terminal_res,
        x0_res,
    };
    if !report.max().is_finite() {
        return Err(VemError::non_finite("optimality_report"));
    }
    Ok(report)
}

/// Series of `H_u` over the grid of a trajectory.
pub fn hu_series(prob: &OcpProblem, traj: &Trajectory) -> Result<GridSeries> {
    let grid = &traj.grid;
    let mut out = GridSeries::zeros(prob.m, grid.len());
    for i in 0..grid.len() {
        out.set_col(
            i,
            &hu(prob, &traj.x.col(i), &traj.lam.col(i), &traj.u.col(i), grid.t(i))?,
        );
    }
    Ok(out)
}

/// The compact-form unconstrained functional: terminal-constraint energy,
/// terminal-Hamiltonian energy (free `tf` only) and the `H_u` energy
/// integral. The trajectory is expected to already satisfy the state and
/// costate equations (the quasi-feasible domain); the value is a sum of
/// squares and is zero exactly at an optimal solution.
pub fn jbar_compact(
    prob: &OcpProblem,
    traj: &Trajectory,
    pi: &DVector<f64>,
    tf: f64,
    w: &Weights,
) -> Result<f64> {
    let grid = &traj.grid;
    let hu_s = hu_series(prob, traj)?;
    let hu_sq = GridSeries::from_fn(1, grid, |i, _| {
        DVector::from_element(1, hu_s.col(i).norm_squared())
    });
    let mut jbar = trapz(&hu_sq, grid)?[0];

    let x_tf = traj.x.col(grid.len() - 1);
    if prob.terminal_mode.has_constraint() {
        let g = (prob.g)(&x_tf, tf);
        jbar += (w.w_xf.clone() * &g).dot(&g);
    }
    if prob.terminal_mode.is_free_tf() {
        let r_h = h_terminal(
            prob,
            &x_tf,
            &traj.lam.col(grid.len() - 1),
            &traj.u.col(grid.len() - 1),
            pi,
            tf,
        )?;
        jbar += w.w_h * r_h * r_h;
    }
    if !jbar.is_finite() {
        return Err(VemError::non_finite("jbar_compact"));
    }
    Ok(jbar)
}

/// The primary-form unconstrained functional: adds the state-equation,
/// costate-equation, initial-state and transversality energies to the
/// compact terms. Grid time derivatives use the second-order stencils.
pub fn jbar_primary(
    prob: &OcpProblem,
    traj: &Trajectory,
    pi: &DVector<f64>,
    tf: f64,
    w: &Weights,
) -> Result<f64> {
    let grid = &traj.grid;
    let x_t = time_derivative(&traj.x, grid)?;
    let lam_t = time_derivative(&traj.lam, grid)?;
    let integrand = GridSeries::from_fn(1, grid, |i, t| {
        let (x, lam, u) = (traj.x.col(i), traj.lam.col(i), traj.u.col(i));
        let e_dyn = (x_t.col(i) - (prob.f)(&x, &u, t)).norm_squared();
        let e_costate = (lam_t.col(i) + hx(prob, &x, &lam, &u, t)).norm_squared();
        let e_hu = ((prob.lu)(&x, &u, t) + (prob.fu)(&x, &u, t).transpose() * &lam).norm_squared();
        DVector::from_element(1, e_dyn + e_costate + e_hu)
    });
    let mut jbar = trapz(&integrand, grid)?[0];

    let dx0 = traj.x.col(0) - &prob.x0;
    jbar += (w.w_x0.clone() * &dx0).dot(&dx0);

    let last = grid.len() - 1;
    let x_tf = traj.x.col(last);
    let lam_tf = traj.lam.col(last);
    if prob.terminal_mode.has_constraint() {
        let g = (prob.g)(&x_tf, tf);
        jbar += (w.w_xf.clone() * &g).dot(&g);
    }
    let rho = &lam_tf - (prob.phix)(&x_tf, tf) - (prob.gx)(&x_tf, tf).transpose() * pi;
    jbar += (w.w_lambda.clone() * &rho).dot(&rho);
    if prob.terminal_mode.is_free_tf() {
        let r_h = h_terminal(prob, &x_tf, &lam_tf, &traj.u.col(last), pi, tf)?;
        jbar += w.w_h * r_h * r_h;
    }
    if !jbar.is_finite() {
        return Err(VemError::non_finite("jbar_primary"));
    }
    Ok(jbar)
}

/// One row of the derivative check report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FdCheckEntry {
    pub callback: String,
    pub worst_rel_err: f64,
}

/// Report of every analytic derivative callback against central finite
/// differences at random admissible points.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FdCheckReport {
    pub entries: Vec<FdCheckEntry>,
}

impl FdCheckReport {
    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .fold(0.0_f64, |a, e| a.max(e.worst_rel_err))
    }

    pub fn worst_entry(&self) -> Option<&FdCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max(rel_err(*x, *y)))
}

fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max(rel_err(*x, *y)))
}

fn sample_vec(rng: &mut ChaCha8Rng, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(lo.len(), |i, _| rng.random_range(lo[i]..=hi[i]))
}

/// Compare every analytic derivative callback against central finite
/// differences at `samples` random admissible points drawn from the
/// problem's sample domain. Report-only; never fails.
pub fn fd_check(prob: &OcpProblem, samples: usize, seed: u64) -> FdCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dom = &prob.sample_domain;
    let eps = |v: f64| 1e-6 * v.abs().max(1.0);
    let mut worst: std::collections::BTreeMap<&'static str, f64> = Default::default();
    let mut record = |name: &'static str, err: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(err);
    };

    for _ in 0..samples.max(1) {
        let x = sample_vec(&mut rng, &dom.x_lo, &dom.x_hi);
        let u = sample_vec(&mut rng, &dom.u_lo, &dom.u_hi);
        let lam = sample_vec(&mut rng, &dom.lam_lo, &dom.lam_hi);
        let pi = sample_vec(&mut rng, &dom.pi_lo, &dom.pi_hi);
        let t = rng.random_range(dom.t_lo..=dom.t_hi);

        // Jacobians of f wrt x and u
        let fd_fx = fd_jac(&|x: &DVector<f64>| (prob.f)(x, &u, t), &x, eps(1.0));
        record("fx", rel_err_mat(&(prob.fx)(&x, &u, t), &fd_fx));
        let fd_fu = fd_jac(&|u: &DVector<f64>| (prob.f)(&x, u, t), &u, eps(1.0));
        record("fu", rel_err_mat(&(prob.fu)(&x, &u, t), &fd_fu));

        // gradients of L
        let fd_lx = fd_grad(&|x: &DVector<f64>| (prob.l)(x, &u, t), &x, eps(1.0));
        record("Lx", rel_err_vec(&(prob.lx)(&x, &u, t), &fd_lx));
        let fd_lu = fd_grad(&|u: &DVector<f64>| (prob.l)(&x, u, t), &u, eps(1.0));
        record("Lu", rel_err_vec(&(prob.lu)(&x, &u, t), &fd_lu));

        // phi family
        let fd_phix = fd_grad(&|x: &DVector<f64>| (prob.phi)(x, t), &x, eps(1.0));
        record("phix", rel_err_vec(&(prob.phix)(&x, t), &fd_phix));
        let e = eps(t);
        let fd_phit = ((prob.phi)(&x, t + e) - (prob.phi)(&x, t - e)) / (2.0 * e);
        record("phit", rel_err((prob.phit)(&x, t), fd_phit));
        let fd_phixx = fd_jac(&|x: &DVector<f64>| (prob.phix)(x, t), &x, eps(1.0));
        record("phixx", rel_err_mat(&(prob.phixx)(&x, t), &fd_phixx));
        let fd_phixt = ((prob.phix)(&x, t + e) - (prob.phix)(&x, t - e)) / (2.0 * e);
        record("phixt", rel_err_vec(&(prob.phixt)(&x, t), &fd_phixt));
        let fd_phitt = ((prob.phit)(&x, t + e) - (prob.phit)(&x, t - e)) / (2.0 * e);
        record("phitt", rel_err((prob.phitt)(&x, t), fd_phitt));

        // g family
        if prob.q > 0 {
            let fd_gx = fd_jac(&|x: &DVector<f64>| (prob.g)(x, t), &x, eps(1.0));
            record("gx", rel_err_mat(&(prob.gx)(&x, t), &fd_gx));
            let fd_gt = ((prob.g)(&x, t + e) - (prob.g)(&x, t - e)) / (2.0 * e);
            record("gt", rel_err_vec(&(prob.gt)(&x, t), &fd_gt));
            let fd_gxt = ((prob.gx)(&x, t + e) - (prob.gx)(&x, t - e)) / (2.0 * e);
            record("gxt", rel_err_mat(&(prob.gxt)(&x, t), &fd_gxt));
            let fd_gtt = ((prob.gt)(&x, t + e) - (prob.gt)(&x, t - e)) / (2.0 * e);
            record("gtt", rel_err_vec(&(prob.gtt)(&x, t), &fd_gtt));
            let fd_gxx_pi = fd_jac(
                &|x: &DVector<f64>| (prob.gx)(x, t).transpose() * &pi,
                &x,
                eps(1.0),
            );
            record("gxx_pi", rel_err_mat(&(prob.gxx_pi)(&x, t, &pi), &fd_gxx_pi));
        }

        // contracted Hamiltonian second derivatives
        let fd_hxx = fd_jac(&|x: &DVector<f64>| hx(prob, x, &lam, &u, t), &x, eps(1.0));
        record("Hxx", rel_err_mat(&(prob.hxx)(&x, &lam, &u, t), &fd_hxx));
        let hu_of = |x: &DVector<f64>, u: &DVector<f64>| {
            (prob.lu)(x, u, t) + (prob.fu)(x, u, t).transpose() * &lam
        };
        let fd_hux = fd_jac(&|x: &DVector<f64>| hu_of(x, &u), &x, eps(1.0));
        record("Hux", rel_err_mat(&(prob.hux)(&x, &lam, &u, t), &fd_hux));
        let fd_huu = fd_jac(&|u: &DVector<f64>| hu_of(&x, u), &u, eps(1.0));
        record("Huu", rel_err_mat(&(prob.huu)(&x, &lam, &u, t), &fd_huu));
        let fd_ht = {
            let h = |t: f64| (prob.l)(&x, &u, t) + lam.dot(&(prob.f)(&x, &u, t));
            (h(t + e) - h(t - e)) / (2.0 * e)
        };
        record("Ht", rel_err((prob.ht)(&x, &lam, &u, t), fd_ht));
    }

    FdCheckReport {
        entries: worst
            .into_iter()
            .map(|(callback, worst_rel_err)| FdCheckEntry {
                callback: callback.to_string(),
                worst_rel_err,
            })
            .collect(),
    }
}

fn fd_jac(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    at: &DVector<f64>,
    _eps_scale: f64,
) -> DMatrix<f64> {
    let probe = f(at);
    let mut jac = DMatrix::zeros(probe.len(), at.len());
    for j in 0..at.len() {
        let e = 1e-6 * at[j].abs().max(1.0);
        let mut hi = at.clone();
        let mut lo = at.clone();
        hi[j] += e;
        lo[j] -= e;
        jac.set_column(j, &((f(&hi) - f(&lo)) / (2.0 * e)));
    }
    jac
}

fn fd_grad(f: &dyn Fn(&DVector<f64>) -> f64, at: &DVector<f64>, _eps_scale: f64) -> DVector<f64> {
    DVector::from_fn(at.len(), |j, _| {
        let e = 1e-6 * at[j].abs().max(1.0);
        let mut hi = at.clone();
        let mut lo = at.clone();
        hi[j] += e;
        lo[j] -= e;
        (f(&hi) - f(&lo)) / (2.0 * e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{example1, example2};
    use crate::propagate::{propagate_costates, propagate_states, ControlInterpolant};
    use crate::grid::make_grid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn hamiltonian_example1_values() {
        let (prob, _) = example1();
        let h0 = hamiltonian(&prob, &dv(&[1.0, 1.0]), &dv(&[0.0, 0.0]), &dv(&[0.0]), 0.0).unwrap();
        assert_eq!(h0, 0.0);
        let h1 = hamiltonian(&prob, &dv(&[1.0, 1.0]), &dv(&[3.0, 3.5]), &dv(&[-3.5]), 0.0).unwrap();
        assert_relative_eq!(h1, -3.125, max_relative = 1e-14);
        let h2 = hamiltonian(&prob, &dv(&[0.0, 0.0]), &dv(&[3.0, -2.5]), &dv(&[2.5]), 2.0).unwrap();
        assert_relative_eq!(h2, -3.125, max_relative = 1e-14);
    }

    #[test]
    fn hu_examples() {
        let (prob, _) = example1();
        let v = hu(&prob, &dv(&[0.0, 0.0]), &dv(&[0.0, 2.0]), &dv(&[1.0]), 0.0).unwrap();
        assert_relative_eq!(v[0], 3.0, max_relative = 1e-14);
        let v = hu(&prob, &dv(&[0.0, 0.0]), &dv(&[0.0, 0.0]), &dv(&[0.0]), 0.0).unwrap();
        assert_eq!(v[0], 0.0);

        let (prob2, _) = example2();
        let v = hu(
            &prob2,
            &dv(&[0.0, 0.0, 2.0]),
            &dv(&[1.0, 0.0, 0.0]),
            &dv(&[0.0]),
            0.0,
        )
        .unwrap();
        assert_relative_eq!(v[0], 2.0, max_relative = 1e-14);
    }

    #[test]
    fn hamiltonian_shape_mismatch_is_error() {
        let (prob, _) = example1();
        assert!(matches!(
            hamiltonian(&prob, &dv(&[1.0]), &dv(&[0.0, 0.0]), &dv(&[0.0]), 0.0),
            Err(VemError::ShapeError { .. })
        ));
    }

    #[test]
    fn optimality_report_analytic_example1() {
        let (prob, reference) = example1();
        let grid = make_grid(41, 0.0, 2.0).unwrap();
        let traj = reference.sample(&grid);
        let rep = optimality_report(&prob, &traj, &reference.pi_hat, 2.0).unwrap();
        // the cubic state component leaves an O(h^2) stencil residual in
        // dyn_res; everything else is at machine precision
        assert!(rep.dyn_res <= 3e-3, "dyn_res = {:e}", rep.dyn_res);
        assert!(rep.costate_res <= 1e-10);
        assert!(rep.hu_res <= 1e-10);
        assert!(rep.g_res <= 1e-10);
        assert!(rep.transversality_res <= 1e-10);
        assert_eq!(rep.h_terminal_res, 0.0);
        assert!(rep.x0_res <= 1e-10);
    }

    #[test]
    fn optimality_report_dyn_res_refines_at_second_order() {
        let (prob, reference) = example1();
        let r = |n: usize| {
            let grid = make_grid(n, 0.0, 2.0).unwrap();
            let traj = reference.sample(&grid);
            optimality_report(&prob, &traj, &reference.pi_hat, 2.0)
                .unwrap()
                .dyn_res
        };
        let ratio = r(41) / r(81);
        assert!(ratio > 3.5 && ratio < 4.5, "ratio = {ratio}");
    }

    #[test]
    fn optimality_report_zero_control_example1() {
        let (prob, _) = example1();
        let grid = make_grid(41, 0.0, 2.0).unwrap();
        let interp = ControlInterpolant::zero(1, &grid);
        let x = propagate_states(&prob, &interp, &grid).unwrap();
        let lam = GridSeries::zeros(2, 41);
        let u = GridSeries::zeros(1, 41);
        let traj = Trajectory {
            grid: grid.clone(),
            x,
            lam,
            u,
        };
        let rep = optimality_report(&prob, &traj, &DVector::zeros(2), 2.0).unwrap();
        assert_relative_eq!(rep.g_res, 10.0_f64.sqrt(), max_relative = 1e-10);
        assert!(rep.dyn_res <= 1e-10);
        assert!(rep.costate_res <= 1e-10);
        assert!(rep.hu_res <= 1e-10);
        assert!(rep.transversality_res <= 1e-10);
        assert!(rep.x0_res <= 1e-10);
    }

    #[test]
    fn optimality_report_rejects_non_finite() {
        let (prob, _) = example1();
        let grid = make_grid(5, 0.0, 2.0).unwrap();
        let mut x = GridSeries::zeros(2, 5);
        x.set_col(2, &dv(&[f64::NAN, 0.0]));
        let traj = Trajectory {
            grid,
            x,
            lam: GridSeries::zeros(2, 5),
            u: GridSeries::zeros(1, 5),
        };
        assert!(matches!(
            optimality_report(&prob, &traj, &DVector::zeros(2), 2.0),
            Err(VemError::NonFiniteEvaluation { .. })
        ));
    }

    #[test]
    fn jbar_compact_zero_control_example1() {
        let (prob, _) = example1();
        let grid = make_grid(41, 0.0, 2.0).unwrap();
        let interp = ControlInterpolant::zero(1, &grid);
        let x = propagate_states(&prob, &interp, &grid).unwrap();
        let traj = Trajectory {
            grid: grid.clone(),
            x,
            lam: GridSeries::zeros(2, 41),
            u: GridSeries::zeros(1, 41),
        };
        let w = Weights::identity(2, 2);
        let j = jbar_compact(&prob, &traj, &DVector::zeros(2), 2.0, &w).unwrap();
        assert_relative_eq!(j, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn jbar_compact_analytic_is_zero() {
        let (prob, reference) = example1();
        let grid = make_grid(41, 0.0, 2.0).unwrap();
        let traj = reference.sample(&grid);
        let w = Weights::identity(2, 2);
        let j = jbar_compact(&prob, &traj, &reference.pi_hat, 2.0, &w).unwrap();
        assert!(j.abs() <= 1e-8, "jbar = {j:e}");
    }

    #[test]
    fn jbar_primary_held_constant_state() {
        let (prob, _) = example1();
        let grid = make_grid(41, 0.0, 2.0).unwrap();
        let x = GridSeries::from_fn(2, &grid, |_, _| dv(&[1.0, 1.0]));
        let traj = Trajectory {
            grid: grid.clone(),
            x,
            lam: GridSeries::zeros(2, 41),
            u: GridSeries::zeros(1, 41),
        };
        let w = Weights::identity(2, 2);
        let j = jbar_primary(&prob, &traj, &DVector::zeros(2), 2.0, &w).unwrap();
        assert!((j - 4.0).abs() <= 2e-3, "jbar = {j}");
    }

    #[test]
    fn jbar_primary_analytic_is_small() {
        let (prob, reference) = example1();
        // the cubic state leaves an O(h^2) stencil residual in the dynamics
        // energy; it vanishes under grid refinement
        let j_at = |n: usize| {
            let grid = make_grid(n, 0.0, 2.0).unwrap();
            let traj = reference.sample(&grid);
            let w = Weights::identity(2, 2);
            jbar_primary(&prob, &traj, &reference.pi_hat, 2.0, &w).unwrap()
        };
        assert!(j_at(41) <= 1e-4, "jbar(41) = {:e}", j_at(41));
        assert!(j_at(641) <= 1e-8, "jbar(641) = {:e}", j_at(641));
    }

    #[test]
    fn fd_check_example_problems() {
        let (prob, _) = example1();
        let rep = fd_check(&prob, 8, 7);
        assert!(rep.worst() <= 1e-7, "worst = {:e}", rep.worst());

        let (prob2, _) = example2();
        let rep2 = fd_check(&prob2, 8, 7);
        assert!(rep2.worst() <= 1e-5, "worst = {:e}", rep2.worst());
    }

    #[test]
    fn fd_check_catches_sign_flip() {
        let (prob, _) = example1();
        let mut bad = prob.clone();
        let fx = prob.fx.clone();
        bad.fx = Arc::new(move |x, u, t| -fx(x, u, t));
        let rep = fd_check(&bad, 4, 3);
        let fx_entry = rep
            .entries
            .iter()
            .find(|e| e.callback == "fx")
            .unwrap();
        assert!(fx_entry.worst_rel_err > 1e-1);
    }

    #[test]
    fn autofilled_second_derivatives_match_analytic() {
        // rebuild the brachistochrone without analytic second derivatives
        let (full, _) = example2();
        let stripped = OcpProblemBuilder::new(
            "stripped",
            3,
            1,
            2,
            full.t0,
            full.x0.clone(),
            full.terminal_mode,
        )
        .dynamics(full.f.clone(), full.fx.clone(), full.fu.clone())
        .terminal_cost(full.phi.clone(), full.phix.clone(), full.phit.clone())
        .terminal_constraint(full.g.clone(), full.gx.clone(), full.gt.clone())
        .sample_domain(full.sample_domain.clone())
        .build()
        .unwrap();

        let x = dv(&[0.7, -0.4, 1.9]);
        let lam = dv(&[0.3, -0.2, 0.1]);
        let u = dv(&[0.6]);
        for (name, a, b) in [
            ("hxx", (full.hxx)(&x, &lam, &u, 0.4), (stripped.hxx)(&x, &lam, &u, 0.4)),
            ("hux", (full.hux)(&x, &lam, &u, 0.4), (stripped.hux)(&x, &lam, &u, 0.4)),
            ("huu", (full.huu)(&x, &lam, &u, 0.4), (stripped.huu)(&x, &lam, &u, 0.4)),
        ] {
            let err = rel_err_mat(&a, &b);
            assert!(err <= 1e-8, "{name} autofill err = {err:e}");
        }
    }

    #[test]
    fn weights_validation() {
        let mut w = Weights::identity(2, 2);
        assert!(w.validate().is_ok());
        w.w_xf[(0, 0)] = -1.0;
        assert!(w.validate().is_err());
    }

    proptest! {
        #[test]
        fn hamiltonian_scales_linearly_in_costate(a in -3.0..3.0f64,
                                                  x1 in -2.0..2.0f64, x2 in -2.0..2.0f64,
                                                  l1 in -2.0..2.0f64, l2 in -2.0..2.0f64,
                                                  u in -2.0..2.0f64) {
            let (prob, _) = example1();
            let x = dv(&[x1, x2]);
            let lam = dv(&[l1, l2]);
            let uu = dv(&[u]);
            let l_part = (prob.l)(&x, &uu, 0.3);
            let h_scaled = hamiltonian(&prob, &x, &(a * &lam), &uu, 0.3).unwrap();
            let h_base = hamiltonian(&prob, &x, &lam, &uu, 0.3).unwrap();
            let expect = l_part + a * (h_base - l_part);
            prop_assert!((h_scaled - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }

        #[test]
        fn jbar_compact_is_nonnegative(u0 in -2.0..2.0f64, u1 in -2.0..2.0f64,
                                       p0 in -2.0..2.0f64, p1 in -2.0..2.0f64) {
            let (prob, _) = example1();
            let grid = make_grid(11, 0.0, 2.0).unwrap();
            let nodes = GridSeries::from_fn(1, &grid, |_, t| {
                DVector::from_element(1, u0 + (u1 - u0) * t / 2.0)
            });
            let interp = ControlInterpolant::natural_spline(&nodes, &grid).unwrap();
            let pi = dv(&[p0, p1]);
            let x = propagate_states(&prob, &interp, &grid).unwrap();
            let lam = propagate_costates(&prob, &x, &interp, &pi, &grid).unwrap();
            let traj = Trajectory { grid: grid.clone(), x, lam, u: nodes };
            let w = Weights::identity(2, 2);
            let j = jbar_compact(&prob, &traj, &pi, 2.0, &w).unwrap();
            prop_assert!(j >= 0.0);
            let jp = jbar_primary(&prob, &traj, &pi, 2.0, &w).unwrap();
            prop_assert!(jp >= 0.0);
        }
    }
}
