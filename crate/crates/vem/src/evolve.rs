//! Variation-time initial-value driver.
//!
//! Integrates an evolution flow from arbitrary initial conditions with an
//! embedded Dormand-Prince 5(4) pair under PI step control. A step is
//! accepted only if the embedded error passes *and* the flow's residual
//! functional did not increase beyond a 1e-9 relative slack; otherwise the
//! step is halved. This makes the descent property of the flows an enforced
//! runtime contract, not just a theorem.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::compact::{compact_eval, jbar_from_control, CompactLayout};
use crate::error::{Result, VemError};
use crate::model::{check_spd, OcpProblem, Weights};
use crate::propagate::{BumpedControl, ControlInterpolant};

/// Terminal-time handle of a run: a fixed value or an initial value for the
/// free-`tf` modes (the moving value then lives in the flat state).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TfHandle {
    Fixed(f64),
    FreeInitial(f64),
}

/// Normal-time discretization of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_nodes: usize,
    pub t0: f64,
    pub tf: TfHandle,
}

impl GridSpec {
    /// Terminal time for an evaluation: the fixed value, or the one carried
    /// in the flat state for free-`tf` runs.
    pub fn resolve_tf(&self, from_state: Option<f64>) -> Result<f64> {
        match (self.tf, from_state) {
            (TfHandle::Fixed(v), None) => Ok(v),
            (TfHandle::FreeInitial(_), Some(v)) => Ok(v),
            _ => Err(VemError::InvalidConfig(
                "terminal-time handle does not match the state layout".into(),
            )),
        }
    }

    pub fn initial_tf(&self) -> f64 {
        match self.tf {
            TfHandle::Fixed(v) | TfHandle::FreeInitial(v) => v,
        }
    }
}

/// Positive-definite evolution gains.
#[derive(Debug, Clone)]
pub struct Gains {
    /// control gain (`m x m` for the compact form, `(2n+m) x (2n+m)` for
    /// the primary form)
    pub k: DMatrix<f64>,
    pub k_tf: f64,
    pub k_pi: DMatrix<f64>,
}

impl Gains {
    pub fn uniform(dim_k: usize, q: usize, k: f64, k_tf: f64, k_pi: f64) -> Gains {
        Gains {
            k: DMatrix::identity(dim_k, dim_k) * k,
            k_tf,
            k_pi: DMatrix::identity(q, q) * k_pi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_spd("K", &self.k)?;
        check_spd("K_pi", &self.k_pi)?;
        if !(self.k_tf > 0.0) {
            return Err(VemError::InvalidConfig("k_tf must be positive".into()));
        }
        Ok(())
    }

    /// All gains multiplied by `c` (time reparameterization of the flow).
    pub fn scaled(&self, c: f64) -> Gains {
        Gains {
            k: &self.k * c,
            k_tf: self.k_tf * c,
            k_pi: &self.k_pi * c,
        }
    }
}

/// Which realization of the evolution equations drives a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Form {
    Compact,
    Primary,
}

impl std::fmt::Display for Form {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Form::Compact => write!(f, "compact"),
            Form::Primary => write!(f, "primary"),
        }
    }
}

/// The full evolution unknown: form, flat vector, grid, gains and weights.
#[derive(Clone)]
pub struct EvolutionState {
    pub form: Form,
    pub flat: DVector<f64>,
    pub grid_spec: GridSpec,
    pub gains: Gains,
    pub weights: Weights,
}

impl EvolutionState {
    pub fn validate(&self, prob: &OcpProblem) -> Result<()> {
        self.gains.validate()?;
        self.weights.validate()?;
        let expected = match self.form {
            Form::Compact => CompactLayout::of(prob, self.grid_spec.n_nodes).len(),
            Form::Primary => {
                crate::primary::PrimaryLayout::of(prob, self.grid_spec.n_nodes).len()
            }
        };
        if self.flat.len() != expected {
            return Err(VemError::ShapeError {
                context: "evolution state",
                expected: format!("{expected} entries"),
                got: format!("{} entries", self.flat.len()),
            });
        }
        if !self.flat.iter().all(|v| v.is_finite()) {
            return Err(VemError::non_finite("evolution state"));
        }
        Ok(())
    }
}

/// One right-hand-side evaluation, with the residual functional value that
/// the monotonicity guard compares.
pub struct FlowEval {
    pub rhs: DVector<f64>,
    pub jbar: f64,
}

/// An autonomous flow in variation time.
pub trait Flow {
    fn dim(&self) -> usize;
    fn eval(&self, y: &DVector<f64>) -> Result<FlowEval>;
    /// terminal time and multipliers carried in the state, for trace rows
    fn trace_extras(&self, _y: &DVector<f64>) -> (Option<f64>, Vec<f64>) {
        (None, Vec::new())
    }
}

/// The two optimal-control flows as a [`Flow`].
pub struct VemFlow<'a> {
    pub prob: &'a OcpProblem,
    pub form: Form,
    pub grid_spec: GridSpec,
    pub gains: Gains,
    pub weights: Weights,
}

impl Flow for VemFlow<'_> {
    fn dim(&self) -> usize {
        match self.form {
            Form::Compact => CompactLayout::of(self.prob, self.grid_spec.n_nodes).len(),
            Form::Primary => {
                crate::primary::PrimaryLayout::of(self.prob, self.grid_spec.n_nodes).len()
            }
        }
    }

    fn eval(&self, y: &DVector<f64>) -> Result<FlowEval> {
        match self.form {
            Form::Compact => {
                let ev = compact_eval(y, self.prob, &self.gains, &self.weights, &self.grid_spec)?;
                Ok(FlowEval {
                    rhs: ev.rhs,
                    jbar: ev.cache.jbar,
                })
            }
            Form::Primary => {
                crate::primary::primary_eval(y, self.prob, &self.gains, &self.weights, &self.grid_spec)
            }
        }
    }

    fn trace_extras(&self, y: &DVector<f64>) -> (Option<f64>, Vec<f64>) {
        let (tf, pi) = match self.form {
            Form::Compact => {
                let layout = CompactLayout::of(self.prob, self.grid_spec.n_nodes);
                match layout.unpack(y) {
                    Ok((_, tf, pi)) => (tf, pi),
                    Err(_) => (None, DVector::zeros(0)),
                }
            }
            Form::Primary => {
                let layout = crate::primary::PrimaryLayout::of(self.prob, self.grid_spec.n_nodes);
                match layout.unpack(y) {
                    Ok(s) => (s.tf, s.pi),
                    Err(_) => (None, DVector::zeros(0)),
                }
            }
        };
        (
            Some(tf.unwrap_or(self.grid_spec.initial_tf())),
            pi.iter().copied().collect(),
        )
    }
}

/// One recorded point of a run.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub tau: f64,
    pub jbar: f64,
    pub rhs_inf: f64,
    pub tf: Option<f64>,
    pub pi: Vec<f64>,
    pub step: f64,
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Outcome {
    /// integrated to `tau_end`
    Completed,
    /// residual dropped below the requested early-stop threshold
    ConvergedEarly,
    /// step size underflowed; the flow is too stiff for the gains
    StiffnessFailure { tau: f64, h: f64 },
    /// a trial state went non-finite and halving did not recover
    Divergence { tau: f64 },
}

impl Outcome {
    pub fn as_error(&self) -> Option<VemError> {
        match *self {
            Outcome::StiffnessFailure { tau, h } => Some(VemError::StiffnessFailure { tau, h }),
            Outcome::Divergence { tau } => Some(VemError::Divergence { tau }),
            _ => None,
        }
    }
}

/// Recorded history of a run: trace rows, optional checkpoints, counters
/// witnessing the monotonicity contract.
#[derive(Debug, Clone)]
pub struct EvolveTrace {
    pub rows: Vec<TraceRow>,
    /// (row index, flat state) pairs kept at the checkpoint cadence
    pub checkpoints: Vec<(usize, DVector<f64>)>,
    pub outcome: Outcome,
    pub accepted_steps: usize,
    pub rejected_error_steps: usize,
    pub rejected_guard_steps: usize,
    /// max over accepted steps of `(jbar_new - jbar_old) / jbar_old`
    pub max_rel_jbar_increase: f64,
}

impl EvolveTrace {
    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace always has the initial row")
    }
}

/// Driver options. `tau_end` is a budget; when `stop_residual` is set the
/// run ends as soon as the right-hand-side max norm falls below it.
#[derive(Debug, Clone)]
pub struct EvolveOpts {
    pub tau_end: f64,
    pub rtol: f64,
    pub atol: f64,
    pub trace_every: f64,
    pub checkpoint_every: Option<usize>,
    pub stop_residual: Option<f64>,
    /// hard cap on attempted steps, a stall fuse
    pub max_steps: usize,
}

impl EvolveOpts {
    pub fn new(tau_end: f64, rtol: f64, atol: f64, trace_every: f64) -> Self {
        EvolveOpts {
            tau_end,
            rtol,
            atol,
            trace_every,
            checkpoint_every: None,
            stop_residual: None,
            max_steps: 20_000_000,
        }
    }
}

/// Relative slack of the descent guard.
pub const JBAR_SLACK: f64 = 1e-9;
const MIN_STEP: f64 = 1e-12;

// Dormand-Prince 5(4) tableau
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const ERR_W: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrate a flow with the embedded 5(4) pair, PI step control and the
/// descent guard. Deterministic for identical inputs.
pub fn integrate_flow(
    flow: &dyn Flow,
    y0: &DVector<f64>,
    opts: &EvolveOpts,
) -> Result<(DVector<f64>, EvolveTrace)> {
    if !(opts.rtol > 0.0) || !(opts.atol > 0.0) || !(opts.tau_end > 0.0) {
        return Err(VemError::InvalidConfig(
            "tau_end, rtol and atol must be positive".into(),
        ));
    }
    let dim = flow.dim();
    if y0.len() != dim {
        return Err(VemError::ShapeError {
            context: "integrate_flow",
            expected: format!("{dim} entries"),
            got: format!("{} entries", y0.len()),
        });
    }

    let mut y = y0.clone();
    let mut ev = flow.eval(&y)?;
    let mut tau = 0.0_f64;
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let push_row = |rows: &mut Vec<TraceRow>,
                        checkpoints: &mut Vec<(usize, DVector<f64>)>,
                        tau: f64,
                        ev: &FlowEval,
                        y: &DVector<f64>,
                        step: f64| {
        let (tf, pi) = flow.trace_extras(y);
        rows.push(TraceRow {
            tau,
            jbar: ev.jbar,
            rhs_inf: ev.rhs.amax(),
            tf,
            pi,
            step,
        });
        if let Some(every) = opts.checkpoint_every {
            if (rows.len() - 1).is_multiple_of(every) {
                checkpoints.push((rows.len() - 1, y.clone()));
            }
        }
    };
    push_row(&mut rows, &mut checkpoints, 0.0, &ev, &y, 0.0);
    let mut next_mark = opts.trace_every;

    let mut accepted = 0usize;
    let mut rej_err = 0usize;
    let mut rej_guard = 0usize;
    let mut max_rel_increase = 0.0_f64;

    // conservative initial step; the controller adapts within a few steps
    let mut h = (opts.tau_end / 1e4).clamp(1e-6, 1e-2);
    let mut err_prev: f64 = 1.0;
    let mut outcome = Outcome::Completed;
    let mut last_reject_nonfinite = false;
    let mut just_rejected = false;
    let mut consecutive_failures = 0usize;
    let mut attempts = 0usize;

    'outer: while tau < opts.tau_end {
        h = h.min(opts.tau_end - tau);
        attempts += 1;
        if h < MIN_STEP || consecutive_failures > 200 || attempts > opts.max_steps {
            outcome = if last_reject_nonfinite {
                Outcome::Divergence { tau }
            } else {
                Outcome::StiffnessFailure { tau, h }
            };
            break;
        }

        // stages
        let mut ks: Vec<DVector<f64>> = Vec::with_capacity(7);
        ks.push(ev.rhs.clone());
        let mut failed = false;
        for (s, row) in A.iter().enumerate().take(5) {
            let mut arg = y.clone();
            for (j, aj) in row.iter().enumerate().take(s + 1) {
                if *aj != 0.0 {
                    arg += h * *aj * &ks[j];
                }
            }
            match flow.eval(&arg) {
                Ok(e) => ks.push(e.rhs),
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        if !failed {
            let mut y1 = y.clone();
            for (j, aj) in A[5].iter().enumerate() {
                if *aj != 0.0 {
                    y1 += h * *aj * &ks[j];
                }
            }
            if y1.iter().all(|v| v.is_finite()) {
                match flow.eval(&y1) {
                    Ok(e7) => {
                        ks.push(e7.rhs.clone());
                        // embedded error estimate
                        let mut err_norm_sq = 0.0;
                        for i in 0..dim {
                            let mut e = 0.0;
                            for (j, k) in ks.iter().enumerate() {
                                e += ERR_W[j] * k[i];
                            }
                            e *= h;
                            let scale =
                                opts.atol + opts.rtol * y[i].abs().max(y1[i].abs());
                            err_norm_sq += (e / scale) * (e / scale);
                        }
                        let err = (err_norm_sq / dim as f64).sqrt().max(1e-16);

                        if err <= 1.0 {
                            if e7.jbar <= ev.jbar * (1.0 + JBAR_SLACK) {
                                // accept
                                let rel = (e7.jbar - ev.jbar) / ev.jbar.max(f64::MIN_POSITIVE);
                                max_rel_increase = max_rel_increase.max(rel);
                                tau += h;
                                y = y1;
                                ev = FlowEval {
                                    rhs: e7.rhs,
                                    jbar: e7.jbar,
                                };
                                accepted += 1;
                                last_reject_nonfinite = false;
                                consecutive_failures = 0;
                                if tau + 1e-15 >= next_mark || tau >= opts.tau_end {
                                    push_row(&mut rows, &mut checkpoints, tau, &ev, &y, h);
                                    while next_mark <= tau + 1e-15 {
                                        next_mark += opts.trace_every;
                                    }
                                }
                                if let Some(stop) = opts.stop_residual {
                                    if ev.rhs.amax() <= stop {
                                        outcome = Outcome::ConvergedEarly;
                                        break 'outer;
                                    }
                                }
                                // PI controller; no growth right after a
                                // rejection
                                let fac = 0.9
                                    * err.powf(-0.7 / 5.0)
                                    * err_prev.powf(0.4 / 5.0);
                                let fac_max = if just_rejected { 1.0 } else { 5.0 };
                                h *= fac.clamp(0.2, fac_max);
                                err_prev = err.max(1e-4);
                                just_rejected = false;
                                continue;
                            } else {
                                rej_guard += 1;
                                last_reject_nonfinite = false;
                                just_rejected = true;
                                consecutive_failures += 1;
                                h *= 0.5;
                                continue;
                            }
                        } else {
                            rej_err += 1;
                            last_reject_nonfinite = false;
                            just_rejected = true;
                            consecutive_failures += 1;
                            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                            continue;
                        }
                    }
                    Err(_) => failed = true,
                }
            } else {
                failed = true;
            }
        }
        if failed {
            last_reject_nonfinite = true;
            just_rejected = true;
            consecutive_failures += 1;
            rej_err += 1;
            h *= 0.5;
        }
    }

    if rows.last().map(|r| r.tau) != Some(tau) {
        push_row(&mut rows, &mut checkpoints, tau, &ev, &y, h);
    }

    Ok((
        y,
        EvolveTrace {
            rows,
            checkpoints,
            outcome,
            accepted_steps: accepted,
            rejected_error_steps: rej_err,
            rejected_guard_steps: rej_guard,
            max_rel_jbar_increase: max_rel_increase,
        },
    ))
}

/// Spec-shaped front end: evolve an [`EvolutionState`] to `tau_end`.
pub fn evolve(
    prob: &OcpProblem,
    initial: &EvolutionState,
    opts: &EvolveOpts,
) -> Result<(EvolutionState, EvolveTrace)> {
    initial.validate(prob)?;
    let flow = VemFlow {
        prob,
        form: initial.form,
        grid_spec: initial.grid_spec,
        gains: initial.gains.clone(),
        weights: initial.weights.clone(),
    };
    let (flat, trace) = integrate_flow(&flow, &initial.flat, opts)?;
    let mut final_state = initial.clone();
    final_state.flat = flat;
    Ok((final_state, trace))
}

/// Convergence declaration on a trace: the last recorded residual norm must
/// be below `tol` and the functional below `tol^2`.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceDiag {
    pub converged: bool,
    pub last_rhs_inf: f64,
    pub last_jbar: f64,
    pub reason: String,
}

pub fn converged(trace: &EvolveTrace, tol_residual: f64) -> ConvergenceDiag {
    let last = trace.last();
    if let Some(err) = trace.outcome.as_error() {
        return ConvergenceDiag {
            converged: false,
            last_rhs_inf: last.rhs_inf,
            last_jbar: last.jbar,
            reason: format!("run failed: {err}"),
        };
    }
    if trace.rows.len() < 2 {
        return ConvergenceDiag {
            converged: false,
            last_rhs_inf: last.rhs_inf,
            last_jbar: last.jbar,
            reason: "no steps taken".into(),
        };
    }
    let ok = last.rhs_inf <= tol_residual && last.jbar <= tol_residual * tol_residual;
    ConvergenceDiag {
        converged: ok,
        last_rhs_inf: last.rhs_inf,
        last_jbar: last.jbar,
        reason: if ok {
            "residual and functional below tolerance".into()
        } else {
            format!(
                "rhs_inf {:.3e} vs tol {:.3e}, jbar {:.3e} vs {:.3e}",
                last.rhs_inf,
                tol_residual,
                last.jbar,
                tol_residual * tol_residual
            )
        },
    }
}

/// Worst relative mismatch between the assembled compact-form gradient and
/// central finite differences of the compact functional, per block.
#[derive(Debug, Clone, Serialize)]
pub struct GradientAuditReport {
    pub u_block: f64,
    pub tf_block: Option<f64>,
    pub pi_block: Option<f64>,
}

impl GradientAuditReport {
    pub fn worst(&self) -> f64 {
        self.u_block
            .max(self.tf_block.unwrap_or(0.0))
            .max(self.pi_block.unwrap_or(0.0))
    }

    pub fn worst_block_name(&self) -> &'static str {
        let w = self.worst();
        if Some(w) == self.tf_block {
            "tf"
        } else if Some(w) == self.pi_block {
            "pi"
        } else {
            "u"
        }
    }
}

/// Check the compact-form rate assembly against finite differences of the
/// functional at a given flat state: `2 w_i n_u(t_i)` against nodal control
/// bumps of unit height, `2 n_tf` against a terminal-time shift with the
/// control function frozen, `2 n_pi` against multiplier shifts. Intended as
/// a pre-flight check before long evolutions.
pub fn gradient_audit(
    prob: &OcpProblem,
    flat: &DVector<f64>,
    w: &Weights,
    grid_spec: &GridSpec,
) -> Result<GradientAuditReport> {
    let layout = CompactLayout::of(prob, grid_spec.n_nodes);
    let (u_nodes, tf_opt, pi) = layout.unpack(flat)?;
    let tf = grid_spec.resolve_tf(tf_opt)?;
    let grid = crate::grid::make_grid(grid_spec.n_nodes, grid_spec.t0, tf)?;
    let cache = crate::compact::build_cache(prob, &u_nodes, tf, &pi, w, &grid)?;
    let base = ControlInterpolant::natural_spline(&u_nodes, &grid)?;
    let n_nodes = grid_spec.n_nodes;

    // u block
    let nu = crate::compact::n_u(&cache, prob, w)?;
    let mut assembled = Vec::with_capacity(n_nodes * prob.m);
    let mut fd = Vec::with_capacity(n_nodes * prob.m);
    for i in 0..n_nodes {
        for ch in 0..prob.m {
            assembled.push(2.0 * grid.quad_weight(i) * nu.col(i)[ch]);
            let eps = 1e-6 * u_nodes.values()[(ch, i)].abs().max(1.0);
            let probe = |sign: f64| -> Result<f64> {
                let bumped = BumpedControl {
                    base: &base,
                    center: grid.t(i),
                    half_width: grid.h(),
                    channel: ch,
                    eps: sign * eps,
                };
                jbar_from_control(prob, &bumped, n_nodes, tf, &pi, w)
            };
            fd.push((probe(1.0)? - probe(-1.0)?) / (2.0 * eps));
        }
    }
    let u_block = block_rel(&assembled, &fd);

    // tf block: control frozen as a function of t, horizon re-gridded
    let tf_block = if prob.terminal_mode.is_free_tf() {
        let ntf = crate::compact::n_tf(&cache, prob, w)?;
        let eps = 1e-6 * tf.abs().max(1.0);
        let jp = jbar_from_control(prob, &base, n_nodes, tf + eps, &pi, w)?;
        let jm = jbar_from_control(prob, &base, n_nodes, tf - eps, &pi, w)?;
        let d = (jp - jm) / (2.0 * eps);
        Some(block_rel(&[2.0 * ntf], &[d]))
    } else {
        None
    };

    // pi block
    let pi_block = if prob.q > 0 {
        let npi = crate::compact::n_pi(&cache, prob, w)?;
        let mut assembled = Vec::with_capacity(prob.q);
        let mut fd = Vec::with_capacity(prob.q);
        for j in 0..prob.q {
            assembled.push(2.0 * npi[j]);
            let eps = 1e-6 * pi[j].abs().max(1.0);
            let mut hi = pi.clone();
            let mut lo = pi.clone();
            hi[j] += eps;
            lo[j] -= eps;
            let jp = jbar_from_control(prob, &base, n_nodes, tf, &hi, w)?;
            let jm = jbar_from_control(prob, &base, n_nodes, tf, &lo, w)?;
            fd.push((jp - jm) / (2.0 * eps));
        }
        Some(block_rel(&assembled, &fd))
    } else {
        None
    };

    Ok(GradientAuditReport {
        u_block,
        tf_block,
        pi_block,
    })
}

fn block_rel(assembled: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = assembled
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Self-describing record of a flat state, written next to run outputs so a
/// run can be resumed or inspected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub form: Form,
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub grid_spec: GridSpec,
    pub flat: Vec<f64>,
}

impl Checkpoint {
    pub fn new(prob: &OcpProblem, state: &EvolutionState) -> Self {
        Checkpoint {
            form: state.form,
            n: prob.n,
            m: prob.m,
            q: prob.q,
            grid_spec: state.grid_spec,
            flat: state.flat.iter().copied().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compact::jbar_from_control;
    use crate::grid::make_grid;
    use crate::problems::example2;
    use crate::propagate::{BumpedControl, ControlInterpolant};
    use std::sync::Arc;

    struct LinearDecay;

    impl Flow for LinearDecay {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, y: &DVector<f64>) -> Result<FlowEval> {
            Ok(FlowEval {
                rhs: -y.clone(),
                jbar: y[0] * y[0],
            })
        }
    }

    #[test]
    fn linear_decay_reaches_expected_value() {
        let y0 = DVector::from_element(1, 1.0);
        let opts = EvolveOpts::new(5.0, 1e-8, 1e-12, 1.0);
        let (y, trace) = integrate_flow(&LinearDecay, &y0, &opts).unwrap();
        assert_eq!(trace.outcome, Outcome::Completed);
        let expect = (-5.0_f64).exp();
        assert!(
            (y[0] - expect).abs() <= 1e-7,
            "y = {}, expect = {expect}",
            y[0]
        );
        assert_eq!(trace.rejected_guard_steps, 0);
        assert!(trace.max_rel_jbar_increase <= JBAR_SLACK);
    }

    #[test]
    fn trace_rows_are_monotone_in_tau_and_jbar() {
        let y0 = DVector::from_element(1, 2.0);
        let opts = EvolveOpts::new(3.0, 1e-6, 1e-9, 0.25);
        let (_, trace) = integrate_flow(&LinearDecay, &y0, &opts).unwrap();
        for pair in trace.rows.windows(2) {
            assert!(pair[1].tau > pair[0].tau);
            assert!(pair[1].jbar <= pair[0].jbar * (1.0 + JBAR_SLACK));
        }
        assert!(trace.rows.len() >= 10);
    }

    struct Expanding;

    impl Flow for Expanding {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, y: &DVector<f64>) -> Result<FlowEval> {
            // jbar grows along the flow, so the guard fights every step;
            // only increases inside the 1e-9 relative slack ever pass
            Ok(FlowEval {
                rhs: DVector::from_element(1, 1.0),
                jbar: y[0],
            })
        }
    }

    #[test]
    fn guard_starves_non_descending_flow() {
        let y0 = DVector::from_element(1, 1.0);
        let mut opts = EvolveOpts::new(1.0, 1e-6, 1e-9, 0.1);
        opts.max_steps = 5_000;
        let (y, trace) = integrate_flow(&Expanding, &y0, &opts).unwrap();
        assert!(matches!(trace.outcome, Outcome::StiffnessFailure { .. }));
        assert!(trace.rejected_guard_steps > 10);
        // essentially no progress was allowed along the ascending direction
        assert!(trace.last().tau < 1e-2);
        assert!(y[0] < 1.0 + 1e-2);
    }

    struct Blowup;

    impl Flow for Blowup {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, y: &DVector<f64>) -> Result<FlowEval> {
            if y[0].abs() > 10.0 {
                return Err(VemError::non_finite("blowup"));
            }
            Ok(FlowEval {
                rhs: DVector::from_element(1, y[0] * y[0] * 1e3),
                jbar: 1.0 / (1.0 + y[0].abs()),
            })
        }
    }

    #[test]
    fn non_finite_trials_end_in_divergence() {
        let y0 = DVector::from_element(1, 9.9999);
        let opts = EvolveOpts::new(10.0, 1e-6, 1e-9, 1.0);
        let (_, trace) = integrate_flow(&Blowup, &y0, &opts).unwrap();
        assert!(matches!(trace.outcome, Outcome::Divergence { .. }));
    }

    #[test]
    fn early_stop_on_residual() {
        let y0 = DVector::from_element(1, 1.0);
        let mut opts = EvolveOpts::new(1e6, 1e-8, 1e-12, 1e5);
        opts.stop_residual = Some(1e-6);
        let (y, trace) = integrate_flow(&LinearDecay, &y0, &opts).unwrap();
        assert_eq!(trace.outcome, Outcome::ConvergedEarly);
        assert!(y[0].abs() <= 1e-6);
        let diag = converged(&trace, 1e-3);
        assert!(diag.converged, "{}", diag.reason);
    }

    #[test]
    fn converged_is_false_on_initial_row_only() {
        let trace = EvolveTrace {
            rows: vec![TraceRow {
                tau: 0.0,
                jbar: 1.0,
                rhs_inf: 1.0,
                tf: None,
                pi: vec![],
                step: 0.0,
            }],
            checkpoints: vec![],
            outcome: Outcome::Completed,
            accepted_steps: 0,
            rejected_error_steps: 0,
            rejected_guard_steps: 0,
            max_rel_jbar_increase: 0.0,
        };
        assert!(!converged(&trace, 1e-3).converged);
    }

    fn example2_probe_state() -> (crate::model::OcpProblem, DVector<f64>, Weights, GridSpec) {
        let (prob, _) = example2();
        let w = Weights::identity(3, 2);
        let n = 101usize;
        let tf = 0.9;
        let grid = make_grid(n, 0.0, tf).unwrap();
        let u = crate::cli::smooth_random_controls(1, &grid, 5);
        let layout = crate::compact::CompactLayout::of(&prob, n);
        let flat = layout.pack(&u, Some(tf), &DVector::from_row_slice(&[-0.08, 0.05]));
        let spec = GridSpec {
            n_nodes: n,
            t0: 0.0,
            tf: TfHandle::FreeInitial(tf),
        };
        (prob, flat, w, spec)
    }

    #[test]
    fn audit_passes_on_consistent_problem_and_catches_corruption() {
        let (prob, flat, w, spec) = example2_probe_state();
        let clean = gradient_audit(&prob, &flat, &w, &spec).unwrap();
        assert!(clean.worst() <= 1e-3, "clean worst = {:e}", clean.worst());

        // a sign flip injected into the assembly side alone (the functional
        // keeps the true dynamics) must break the identity loudly
        let mut bad = prob.clone();
        let fu = prob.fu.clone();
        bad.fu = Arc::new(move |x, u, t| -fu(x, u, t));
        let layout = crate::compact::CompactLayout::of(&prob, spec.n_nodes);
        let (u_nodes, tf_opt, pi) = layout.unpack(&flat).unwrap();
        let tf = spec.resolve_tf(tf_opt).unwrap();
        let grid = make_grid(spec.n_nodes, spec.t0, tf).unwrap();
        let cache = crate::compact::build_cache(&bad, &u_nodes, tf, &pi, &w, &grid).unwrap();
        let nu_bad = crate::compact::n_u(&cache, &bad, &w).unwrap();
        let base = ControlInterpolant::natural_spline(&u_nodes, &grid).unwrap();
        let mut diff = 0.0_f64;
        let mut scale = 0.0_f64;
        for i in 0..spec.n_nodes {
            let eps = 1e-6;
            let probe = |sign: f64| {
                let bumped = BumpedControl {
                    base: &base,
                    center: grid.t(i),
                    half_width: grid.h(),
                    channel: 0,
                    eps: sign * eps,
                };
                jbar_from_control(&prob, &bumped, spec.n_nodes, tf, &pi, &w).unwrap()
            };
            let fd = (probe(1.0) - probe(-1.0)) / (2.0 * eps);
            let assembled = 2.0 * grid.quad_weight(i) * nu_bad.col(i)[0];
            diff += (assembled - fd) * (assembled - fd);
            scale += fd * fd;
        }
        let mismatch = (diff / scale.max(1e-30)).sqrt();
        assert!(mismatch > 0.5, "corrupted assembly mismatch = {mismatch:e}");
    }

    #[test]
    fn compact_rhs_descends_the_fd_gradient() {
        // the inner product of the rate with the finite-difference gradient
        // of the functional is negative away from equilibrium
        let (prob, flat, w, spec) = example2_probe_state();
        let gains = Gains::uniform(1, 2, 0.3, 0.05, 0.2);
        let rhs = crate::compact::rhs_compact(&flat, &prob, &gains, &w, &spec).unwrap();

        let layout = crate::compact::CompactLayout::of(&prob, spec.n_nodes);
        let (u_nodes, tf_opt, pi) = layout.unpack(&flat).unwrap();
        let tf = spec.resolve_tf(tf_opt).unwrap();
        let grid = make_grid(spec.n_nodes, spec.t0, tf).unwrap();
        let base = ControlInterpolant::natural_spline(&u_nodes, &grid).unwrap();
        let mut fd = DVector::zeros(flat.len());
        for i in 0..spec.n_nodes {
            let eps = 1e-6;
            let probe = |sign: f64| {
                let bumped = BumpedControl {
                    base: &base,
                    center: grid.t(i),
                    half_width: grid.h(),
                    channel: 0,
                    eps: sign * eps,
                };
                jbar_from_control(&prob, &bumped, spec.n_nodes, tf, &pi, &w).unwrap()
            };
            fd[i] = (probe(1.0) - probe(-1.0)) / (2.0 * eps);
        }
        let eps = 1e-7;
        fd[spec.n_nodes] = (jbar_from_control(&prob, &base, spec.n_nodes, tf + eps, &pi, &w)
            .unwrap()
            - jbar_from_control(&prob, &base, spec.n_nodes, tf - eps, &pi, &w).unwrap())
            / (2.0 * eps);
        for j in 0..2 {
            let mut hi = pi.clone();
            let mut lo = pi.clone();
            hi[j] += eps;
            lo[j] -= eps;
            fd[spec.n_nodes + 1 + j] =
                (jbar_from_control(&prob, &base, spec.n_nodes, tf, &hi, &w).unwrap()
                    - jbar_from_control(&prob, &base, spec.n_nodes, tf, &lo, &w).unwrap())
                    / (2.0 * eps);
        }
        let descent = fd.dot(&rhs);
        assert!(descent < 0.0, "inner product = {descent:e}");
    }

    #[test]
    fn checkpoints_kept_at_requested_cadence() {
        let y0 = DVector::from_element(1, 1.0);
        let mut opts = EvolveOpts::new(2.0, 1e-7, 1e-10, 0.2);
        opts.checkpoint_every = Some(3);
        let (_, trace) = integrate_flow(&LinearDecay, &y0, &opts).unwrap();
        assert!(!trace.checkpoints.is_empty());
        for (row, state) in &trace.checkpoints {
            assert_eq!(row % 3, 0);
            assert_eq!(state.len(), 1);
        }
    }

    #[test]
    fn determinism_bitwise_identical_traces() {
        let y0 = DVector::from_element(1, 1.3);
        let opts = EvolveOpts::new(2.0, 1e-7, 1e-10, 0.5);
        let (ya, ta) = integrate_flow(&LinearDecay, &y0, &opts).unwrap();
        let (yb, tb) = integrate_flow(&LinearDecay, &y0, &opts).unwrap();
        assert_eq!(ya, yb);
        assert_eq!(ta.rows.len(), tb.rows.len());
        for (ra, rb) in ta.rows.iter().zip(&tb.rows) {
            assert_eq!(ra.tau.to_bits(), rb.tau.to_bits());
            assert_eq!(ra.jbar.to_bits(), rb.jbar.to_bits());
        }
    }
}
