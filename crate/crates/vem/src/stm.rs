//! Fundamental solution matrices of the linearized dynamics.
//!
//! The state transition matrix is never stored pairwise: with `M` the
//! fundamental solution of `Mdot = fx M`, `M(t0) = I`, every
//! `Phi(t_i, t_j) = M_i M_j^-1`, which turns all nested transition
//! integrals into O(N) cumulative sums.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VemError};
use crate::grid::{cumtrapz, rk4_path, Direction, Grid, GridSeries};
use crate::model::OcpProblem;
use crate::propagate::{state_interpolant, ControlFunction};

/// Fundamental matrices `M_i` with their inverses at every grid node.
/// `cond_max` bounds the norm product of any pairwise transition
/// `Phi(t_i, t_j) = M_i M_j^-1`; a huge value means the horizon or the
/// linearization is numerically fragile.
#[derive(Debug, Clone)]
pub struct FundamentalSet {
    ms: Vec<DMatrix<f64>>,
    minvs: Vec<DMatrix<f64>>,
    cond_max: f64,
}

impl FundamentalSet {
    pub fn len(&self) -> usize {
        self.ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ms.is_empty()
    }

    pub fn m(&self, i: usize) -> &DMatrix<f64> {
        &self.ms[i]
    }

    pub fn minv(&self, i: usize) -> &DMatrix<f64> {
        &self.minvs[i]
    }

    pub fn cond_max(&self) -> f64 {
        self.cond_max
    }
}

/// Propagate `Mdot = fx(x(t), u(t), t) M` from the identity and invert at
/// every node (dense LU with partial pivoting; the state dimension is small).
pub fn fundamental_set(
    prob: &OcpProblem,
    x: &GridSeries,
    u: &dyn ControlFunction,
    grid: &Grid,
) -> Result<FundamentalSet> {
    x.check_aligned(grid, "fundamental_set")?;
    let n = prob.n;
    let x_interp = state_interpolant(x, grid)?;
    let fx = prob.fx.clone();
    let m0 = DMatrix::<f64>::identity(n, n);
    let flat0 = DVector::from_column_slice(m0.as_slice());
    let path = rk4_path(
        &mut |flat, t| {
            let m = DMatrix::from_column_slice(n, n, flat.as_slice());
            let dm = fx(&x_interp.eval(t), &u.eval(t), t) * m;
            DVector::from_column_slice(dm.as_slice())
        },
        &flat0,
        grid,
        Direction::Forward,
        1,
    )?;

    let mut ms = Vec::with_capacity(grid.len());
    let mut minvs = Vec::with_capacity(grid.len());
    let mut m_norm_max = 0.0_f64;
    let mut minv_norm_max = 0.0_f64;
    for i in 0..grid.len() {
        let col = path.col(i);
        let m = if i == 0 {
            // M_0 is the identity exactly, not the integrator's copy of it
            DMatrix::identity(n, n)
        } else {
            DMatrix::from_column_slice(n, n, col.as_slice())
        };
        let minv = m
            .clone()
            .lu()
            .try_inverse()
            .ok_or(VemError::IllConditionedTransition { cond: f64::INFINITY })?;
        m_norm_max = m_norm_max.max(m.norm());
        minv_norm_max = minv_norm_max.max(minv.norm());
        ms.push(m);
        minvs.push(minv);
    }
    let cond_max = m_norm_max * minv_norm_max;
    if !cond_max.is_finite() || cond_max > 1e8 {
        return Err(VemError::IllConditionedTransition { cond: cond_max });
    }
    Ok(FundamentalSet {
        ms,
        minvs,
        cond_max,
    })
}

/// State transition matrix `Phi(t_i, t_j) = M_i M_j^-1`.
pub fn phi(fs: &FundamentalSet, i: usize, j: usize) -> Result<DMatrix<f64>> {
    let len = fs.len();
    if i >= len || j >= len {
        return Err(VemError::IndexError {
            index: i.max(j),
            len,
        });
    }
    Ok(fs.m(i) * fs.minv(j))
}

/// Apply the linearized control-to-state map
/// `dx(t) = int_t0^t Phi(t, s) fu(s) du(s) ds` at every node through the
/// factorized cumulative form.
pub fn control_sensitivity_apply(
    fs: &FundamentalSet,
    prob: &OcpProblem,
    x: &GridSeries,
    u: &GridSeries,
    grid: &Grid,
    du: &GridSeries,
) -> Result<GridSeries> {
    du.check_aligned(grid, "control_sensitivity_apply")?;
    if du.dim() != prob.m {
        return Err(VemError::ShapeError {
            context: "control_sensitivity_apply",
            expected: format!("{} rows", prob.m),
            got: format!("{} rows", du.dim()),
        });
    }
    let weighted = GridSeries::from_fn(prob.n, grid, |i, t| {
        fs.minv(i) * ((prob.fu)(&x.col(i), &u.col(i), t) * du.col(i))
    });
    let acc = cumtrapz(&weighted, grid, Direction::Forward)?;
    Ok(GridSeries::from_fn(prob.n, grid, |i, _| {
        fs.m(i) * acc.col(i)
    }))
}
