//! Uniform time grid, trapezoid quadrature and fixed-step propagation.
//!
//! Every integral in the solver is a composite trapezoid over the grid and
//! every gridded time derivative uses second-order stencils (central in the
//! interior, one-sided at the ends). Positivity of the trapezoid weights is
//! what makes the semi-discrete control flow a genuine descent direction, so
//! no higher-order rule is used.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VemError};

/// Uniform grid of `n_nodes` points on `[t0, tf]`, stored as normalized
/// nodes `s` in `[0, 1]` so a free terminal time only rescales `t_i`.
#[derive(Debug, Clone)]
pub struct Grid {
    s: Vec<f64>,
    t0: f64,
    tf: f64,
}

/// Build a uniform grid. `t_0 = t0` and `t_{N-1} = tf` hold exactly.
pub fn make_grid(n_nodes: usize, t0: f64, tf: f64) -> Result<Grid> {
    if n_nodes < 3 {
        return Err(VemError::GridTooSmall(n_nodes));
    }
    if !(tf > t0) || !t0.is_finite() || !tf.is_finite() {
        return Err(VemError::BadHorizon { t0, tf });
    }
    let s = (0..n_nodes)
        .map(|i| i as f64 / (n_nodes - 1) as f64)
        .collect();
    Ok(Grid { s, t0, tf })
}

impl Grid {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn span(&self) -> f64 {
        self.tf - self.t0
    }

    /// Node spacing. Exact for node 0 -> 1; all spacings are equal.
    pub fn h(&self) -> f64 {
        self.span() / (self.len() - 1) as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        self.t0 + self.s[i] * self.span()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.t(i)).collect()
    }

    /// Trapezoid weight of node `i`: `h` in the interior, `h/2` at the ends.
    pub fn quad_weight(&self, i: usize) -> f64 {
        if i == 0 || i == self.len() - 1 {
            0.5 * self.h()
        } else {
            self.h()
        }
    }

    /// Same horizon rediscretized with the terminal time moved to `tf`.
    pub fn with_tf(&self, tf: f64) -> Result<Grid> {
        make_grid(self.len(), self.t0, tf)
    }
}

/// `d x N` samples aligned with the grid nodes, one column per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSeries {
    values: DMatrix<f64>,
}

impl GridSeries {
    pub fn new(values: DMatrix<f64>) -> Self {
        GridSeries { values }
    }

    pub fn zeros(dim: usize, n_nodes: usize) -> Self {
        GridSeries {
            values: DMatrix::zeros(dim, n_nodes),
        }
    }

    /// Build from a per-node column evaluation.
    pub fn from_fn(dim: usize, grid: &Grid, mut f: impl FnMut(usize, f64) -> DVector<f64>) -> Self {
        let mut values = DMatrix::zeros(dim, grid.len());
        for i in 0..grid.len() {
            values.set_column(i, &f(i, grid.t(i)));
        }
        GridSeries { values }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.ncols()
    }

    pub fn col(&self, i: usize) -> DVector<f64> {
        self.values.column(i).into_owned()
    }

    pub fn set_col(&mut self, i: usize, v: &DVector<f64>) {
        self.values.set_column(i, v);
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_aligned(&self, grid: &Grid, context: &'static str) -> Result<()> {
        if self.n_nodes() != grid.len() {
            return Err(VemError::ShapeError {
                context,
                expected: format!("{} columns", grid.len()),
                got: format!("{} columns", self.n_nodes()),
            });
        }
        Ok(())
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Direction of a cumulative integral or a path integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Composite trapezoid of a sampled series over the whole grid. The step
/// factors out of the accumulation, so constants integrate exactly.
pub fn trapz(series: &GridSeries, grid: &Grid) -> Result<DVector<f64>> {
    series.check_aligned(grid, "trapz")?;
    let n = grid.len();
    let mut acc = 0.5 * (series.col(0) + series.col(n - 1));
    for i in 1..n - 1 {
        acc += series.col(i);
    }
    Ok(grid.h() * acc)
}

/// Cumulative trapezoid. Forward gives `F_i = integral(t0 .. t_i)`,
/// backward gives `F_i = integral(t_i .. tf)`; both include the endpoints
/// (`F_0 = 0` forward, `F_{N-1} = 0` backward).
pub fn cumtrapz(series: &GridSeries, grid: &Grid, direction: Direction) -> Result<GridSeries> {
    series.check_aligned(grid, "cumtrapz")?;
    let n = grid.len();
    let h = grid.h();
    let mut out = GridSeries::zeros(series.dim(), n);
    match direction {
        Direction::Forward => {
            let mut acc = DVector::zeros(series.dim());
            for i in 1..n {
                acc += 0.5 * (series.col(i - 1) + series.col(i));
                out.set_col(i, &(h * &acc));
            }
        }
        Direction::Backward => {
            let mut acc = DVector::zeros(series.dim());
            for i in (0..n - 1).rev() {
                acc += 0.5 * (series.col(i) + series.col(i + 1));
                out.set_col(i, &(h * &acc));
            }
        }
    }
    Ok(out)
}

/// Classical fixed-step RK4 along the grid, storing the state at every node.
/// `substeps` internal steps are taken between consecutive nodes. Backward
/// runs from the last node to the first with a negative step.
pub fn rk4_path(
    rhs: &mut dyn FnMut(&DVector<f64>, f64) -> DVector<f64>,
    y0: &DVector<f64>,
    grid: &Grid,
    direction: Direction,
    substeps: usize,
) -> Result<GridSeries> {
    let n = grid.len();
    let sub = substeps.max(1);
    let mut out = GridSeries::zeros(y0.len(), n);
    let nodes: Vec<usize> = match direction {
        Direction::Forward => (0..n).collect(),
        Direction::Backward => (0..n).rev().collect(),
    };
    let mut y = y0.clone();
    out.set_col(nodes[0], &y);
    for w in nodes.windows(2) {
        let (from, to) = (w[0], w[1]);
        let t_from = grid.t(from);
        let h = (grid.t(to) - t_from) / sub as f64;
        for k in 0..sub {
            let t = t_from + k as f64 * h;
            let k1 = rhs(&y, t);
            let k2 = rhs(&(&y + 0.5 * h * &k1), t + 0.5 * h);
            let k3 = rhs(&(&y + 0.5 * h * &k2), t + 0.5 * h);
            let k4 = rhs(&(&y + h * &k3), t + h);
            y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(VemError::non_finite_at("rk4_path", to));
        }
        out.set_col(to, &y);
    }
    Ok(out)
}

/// Second-order time derivative of a sampled series: central differences at
/// interior nodes, one-sided three-point stencils at the first and last node.
pub fn time_derivative(series: &GridSeries, grid: &Grid) -> Result<GridSeries> {
    series.check_aligned(grid, "time_derivative")?;
    let n = grid.len();
    let h = grid.h();
    let mut out = GridSeries::zeros(series.dim(), n);
    out.set_col(
        0,
        &((-3.0 * series.col(0) + 4.0 * series.col(1) - series.col(2)) / (2.0 * h)),
    );
    for i in 1..n - 1 {
        out.set_col(i, &((series.col(i + 1) - series.col(i - 1)) / (2.0 * h)));
    }
    out.set_col(
        n - 1,
        &((3.0 * series.col(n - 1) - 4.0 * series.col(n - 2) + series.col(n - 3)) / (2.0 * h)),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn series_of(grid: &Grid, f: impl Fn(f64) -> f64) -> GridSeries {
        GridSeries::from_fn(1, grid, |_, t| DVector::from_element(1, f(t)))
    }

    #[test]
    fn make_grid_three_nodes() {
        let g = make_grid(3, 0.0, 2.0).unwrap();
        assert_eq!(g.times(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn make_grid_standard_spacings() {
        let g = make_grid(41, 0.0, 2.0).unwrap();
        assert_eq!(g.h(), 0.05);
        assert_eq!(g.t(40), 2.0);
        let g = make_grid(101, 0.0, 1.0).unwrap();
        assert_relative_eq!(g.h(), 0.01, max_relative = 1e-15);
    }

    #[test]
    fn make_grid_rejects_bad_inputs() {
        assert!(matches!(make_grid(2, 0.0, 1.0), Err(VemError::GridTooSmall(2))));
        assert!(matches!(
            make_grid(5, 1.0, 1.0),
            Err(VemError::BadHorizon { .. })
        ));
    }

    #[test]
    fn trapz_constant_is_exact() {
        let g = make_grid(41, 0.0, 2.0).unwrap();
        let s = series_of(&g, |_| 1.0);
        assert_eq!(trapz(&s, &g).unwrap()[0], 2.0);
    }

    #[test]
    fn trapz_quadratic_within_bound() {
        // integral of (3t - 3.5)^2 over [0, 2] is exactly 6.5
        let g = make_grid(41, 0.0, 2.0).unwrap();
        let s = series_of(&g, |t| (3.0 * t - 3.5).powi(2));
        let v = trapz(&s, &g).unwrap()[0];
        assert!((v - 6.5).abs() < 8e-3, "got {v}");
    }

    #[test]
    fn cumtrapz_backward_of_constant() {
        let g = make_grid(41, 0.0, 2.0).unwrap();
        let s = series_of(&g, |_| 1.0);
        let c = cumtrapz(&s, &g, Direction::Backward).unwrap();
        for i in 0..g.len() {
            assert_relative_eq!(c.col(i)[0], 2.0 - g.t(i), max_relative = 1e-14);
        }
    }

    #[test]
    fn cumtrapz_endpoints_match_trapz() {
        let g = make_grid(17, -1.0, 3.0).unwrap();
        let s = series_of(&g, |t| t.sin() + 0.3 * t);
        let total = trapz(&s, &g).unwrap()[0];
        let f = cumtrapz(&s, &g, Direction::Forward).unwrap();
        let b = cumtrapz(&s, &g, Direction::Backward).unwrap();
        assert_relative_eq!(f.col(g.len() - 1)[0], total, max_relative = 1e-14);
        assert_relative_eq!(b.col(0)[0], total, max_relative = 1e-14);
    }

    #[test]
    fn rk4_exponential_decay() {
        let g = make_grid(101, 0.0, 1.0).unwrap();
        let y0 = DVector::from_element(1, 1.0);
        let path = rk4_path(
            &mut |y, _| -y.clone(),
            &y0,
            &g,
            Direction::Forward,
            1,
        )
        .unwrap();
        let err = (path.col(100)[0] - (-1.0_f64).exp()).abs();
        assert!(err < 1e-9, "err = {err:e}");
    }

    #[test]
    fn rk4_backward_linear_costate() {
        // costate of the double integrator: lam1' = 0, lam2' = -lam1,
        // integrated backward from lam(2) = (3, -2.5) gives lam(0) = (3, 3.5)
        let g = make_grid(41, 0.0, 2.0).unwrap();
        let lam_tf = DVector::from_vec(vec![3.0, -2.5]);
        let path = rk4_path(
            &mut |lam, _| DVector::from_vec(vec![0.0, -lam[0]]),
            &lam_tf,
            &g,
            Direction::Backward,
            1,
        )
        .unwrap();
        assert_relative_eq!(path.col(0)[0], 3.0, max_relative = 1e-12);
        assert_relative_eq!(path.col(0)[1], 3.5, max_relative = 1e-12);
    }

    #[test]
    fn rk4_zero_rhs_keeps_initial_value() {
        let g = make_grid(7, 0.0, 1.0).unwrap();
        let y0 = DVector::from_vec(vec![1.5, -0.25]);
        let path = rk4_path(
            &mut |_, _| DVector::zeros(2),
            &y0,
            &g,
            Direction::Forward,
            3,
        )
        .unwrap();
        for i in 0..g.len() {
            assert_eq!(path.col(i), y0);
        }
    }

    #[test]
    fn rk4_order_at_least_four() {
        let run = |n: usize| {
            let g = make_grid(n, 0.0, 1.0).unwrap();
            let y0 = DVector::from_element(1, 1.0);
            let p = rk4_path(&mut |y, _| -y.clone(), &y0, &g, Direction::Forward, 1).unwrap();
            (p.col(n - 1)[0] - (-1.0_f64).exp()).abs()
        };
        let coarse = run(11);
        let fine = run(21);
        assert!(coarse / fine >= 14.0, "ratio = {}", coarse / fine);
    }

    #[test]
    fn rk4_reports_non_finite_node() {
        let g = make_grid(11, 0.0, 10.0).unwrap();
        let y0 = DVector::from_element(1, 1.0);
        let res = rk4_path(
            &mut |y, _| DVector::from_element(1, y[0] * y[0] * 1e4),
            &y0,
            &g,
            Direction::Forward,
            1,
        );
        assert!(matches!(
            res,
            Err(VemError::NonFiniteEvaluation { node: Some(_), .. })
        ));
    }

    #[test]
    fn time_derivative_exact_for_quadratics() {
        let g = make_grid(21, 0.0, 2.0).unwrap();
        let s = series_of(&g, |t| 1.5 * t * t - 3.5 * t + 1.0);
        let d = time_derivative(&s, &g).unwrap();
        for i in 0..g.len() {
            assert_relative_eq!(d.col(i)[0], 3.0 * g.t(i) - 3.5, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn trapz_exact_for_affine(a in -5.0..5.0f64, b in -5.0..5.0f64,
                                  n in 3usize..60, t0 in -2.0..2.0f64, span in 0.1..4.0f64) {
            let g = make_grid(n, t0, t0 + span).unwrap();
            let s = series_of(&g, |t| a * t + b);
            let exact = a / 2.0 * ((t0 + span).powi(2) - t0.powi(2)) + b * span;
            let got = trapz(&s, &g).unwrap()[0];
            prop_assert!((got - exact).abs() <= 1e-12 * (1.0 + exact.abs()));
        }

        #[test]
        fn cumtrapz_consistency(n in 3usize..40, seedish in 0u64..1000) {
            let g = make_grid(n, 0.0, 1.0).unwrap();
            let s = series_of(&g, |t| ((seedish as f64) * 0.01 + t * 3.0).sin());
            let total = trapz(&s, &g).unwrap()[0];
            let f = cumtrapz(&s, &g, Direction::Forward).unwrap();
            let b = cumtrapz(&s, &g, Direction::Backward).unwrap();
            prop_assert!((f.col(n - 1)[0] - total).abs() <= 1e-14 * (1.0 + total.abs()));
            prop_assert!((b.col(0)[0] - total).abs() <= 1e-14 * (1.0 + total.abs()));
            // forward + backward at any node reconstructs the total
            for i in 0..n {
                prop_assert!((f.col(i)[0] + b.col(i)[0] - total).abs() <= 1e-13 * (1.0 + total.abs()));
            }
        }
    }
}
