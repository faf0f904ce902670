//! Continuous-time counterparts of the classic parameter-iteration schemes:
//! the gradient flow, the Newton flow and its inversion-free variant. One
//! explicit Euler step of the gradient flow with step `alpha / k_g`
//! reproduces the classic gradient iterate; the flows themselves reuse the
//! same variation-time driver as the optimal-control forms.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VemError};
use crate::evolve::{Flow, FlowEval};

pub type ObjectiveFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type HessianFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Scalar objective with analytic gradient and Hessian callbacks.
#[derive(Clone)]
pub struct ScalarObjective {
    pub h: ObjectiveFn,
    pub grad: GradientFn,
    pub hess: HessianFn,
}

impl ScalarObjective {
    /// `h = 1/2 theta' Q theta` for a symmetric `Q`.
    pub fn quadratic(q: DMatrix<f64>) -> Self {
        let q2 = q.clone();
        let q3 = q.clone();
        ScalarObjective {
            h: Arc::new(move |theta| 0.5 * (&q * theta).dot(theta)),
            grad: Arc::new(move |theta| &q2 * theta),
            hess: Arc::new(move |_| q3.clone()),
        }
    }

    /// Worst relative disagreement of the derivative callbacks with central
    /// finite differences at a point.
    pub fn fd_check_at(&self, theta: &DVector<f64>) -> f64 {
        let mut worst = 0.0_f64;
        let g = (self.grad)(theta);
        for j in 0..theta.len() {
            let e = 1e-6 * theta[j].abs().max(1.0);
            let mut hi = theta.clone();
            let mut lo = theta.clone();
            hi[j] += e;
            lo[j] -= e;
            let fd = ((self.h)(&hi) - (self.h)(&lo)) / (2.0 * e);
            worst = worst.max((g[j] - fd).abs() / fd.abs().max(1.0));
            let fd_col = ((self.grad)(&hi) - (self.grad)(&lo)) / (2.0 * e);
            let h_col = (self.hess)(theta).column(j).into_owned();
            worst = worst.max(
                (h_col - fd_col)
                    .iter()
                    .fold(0.0_f64, |m, v| m.max(v.abs())),
            );
        }
        worst
    }
}

/// Gradient flow rate `-k_g grad h`.
pub fn gradient_flow_rhs(obj: &ScalarObjective, theta: &DVector<f64>, k_g: f64) -> DVector<f64> {
    -k_g * (obj.grad)(theta)
}

/// Newton flow rate `-k_n hess^-1 grad h` via a linear solve.
pub fn newton_flow_rhs(
    obj: &ScalarObjective,
    theta: &DVector<f64>,
    k_n: f64,
) -> Result<DVector<f64>> {
    let hess = (obj.hess)(theta);
    let grad = (obj.grad)(theta);
    let lu = hess.lu();
    match lu.solve(&grad) {
        Some(d) if d.iter().all(|v| v.is_finite()) => Ok(-k_n * d),
        _ => Err(VemError::SingularHessian),
    }
}

/// Inversion-free Newton-type rate `-k_n hess' grad h`.
pub fn gauss_flow_rhs(obj: &ScalarObjective, theta: &DVector<f64>, k_n: f64) -> DVector<f64> {
    -k_n * ((obj.hess)(theta).transpose() * (obj.grad)(theta))
}

/// One explicit Euler step `theta + dt * rate`.
pub fn euler_step(theta: &DVector<f64>, rate: &DVector<f64>, dt: f64) -> DVector<f64> {
    theta + dt * rate
}

/// The gradient flow as a drivable [`Flow`]; the objective itself is the
/// descent functional.
pub struct GradientFlow {
    pub obj: ScalarObjective,
    pub k_g: f64,
    pub dim: usize,
}

impl Flow for GradientFlow {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, y: &DVector<f64>) -> Result<FlowEval> {
        Ok(FlowEval {
            rhs: gradient_flow_rhs(&self.obj, y, self.k_g),
            jbar: (self.obj.h)(y),
        })
    }
}

/// The Newton flow as a drivable [`Flow`]; the squared gradient norm is the
/// descent functional.
pub struct NewtonFlow {
    pub obj: ScalarObjective,
    pub k_n: f64,
    pub dim: usize,
}

impl Flow for NewtonFlow {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, y: &DVector<f64>) -> Result<FlowEval> {
        Ok(FlowEval {
            rhs: newton_flow_rhs(&self.obj, y, self.k_n)?,
            jbar: (self.obj.grad)(y).norm_squared(),
        })
    }
}

/// The inversion-free Newton-type flow as a drivable [`Flow`].
pub struct GaussFlow {
    pub obj: ScalarObjective,
    pub k_n: f64,
    pub dim: usize,
}

impl Flow for GaussFlow {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, y: &DVector<f64>) -> Result<FlowEval> {
        Ok(FlowEval {
            rhs: gauss_flow_rhs(&self.obj, y, self.k_n),
            jbar: (self.obj.grad)(y).norm_squared(),
        })
    }
}
