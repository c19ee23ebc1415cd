//! Dense strictly convex quadratic programming.
//!
//! Solves
//!
//! ```text
//! minimize    1/2 x'Gx + g'x
//! subject to  n_i'x  = b_i   (equalities)
//!             n_i'x >= b_i   (inequalities)
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani. It starts from the
//! unconstrained minimiser and adds violated constraints one at a time, so no
//! feasible starting point is needed and infeasibility is detected directly.
//! Problem sizes here are a few dozen variables, so the projected inverse
//! Hessian is rebuilt from scratch at every step instead of being updated.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible (stuck on constraint {constraint})")]
    Infeasible { constraint: usize },
    #[error("no convergence after {0} active-set changes")]
    MaxIterations(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Equality,
    AtLeast,
}

#[derive(Debug, Clone)]
pub struct LinearConstraint {
    pub normal: DVector<f64>,
    pub rhs: f64,
    pub kind: ConstraintKind,
}

impl LinearConstraint {
    pub fn equality(normal: DVector<f64>, rhs: f64) -> Self {
        Self { normal, rhs, kind: ConstraintKind::Equality }
    }

    pub fn at_least(normal: DVector<f64>, rhs: f64) -> Self {
        Self { normal, rhs, kind: ConstraintKind::AtLeast }
    }

    pub fn at_most(normal: DVector<f64>, rhs: f64) -> Self {
        Self { normal: -normal, rhs: -rhs, kind: ConstraintKind::AtLeast }
    }

    fn slack(&self, x: &DVector<f64>) -> f64 {
        self.normal.dot(x) - self.rhs
    }

    fn tolerance(&self, feas_tol: f64) -> f64 {
        feas_tol * (1.0 + self.rhs.abs())
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constraints: Vec<LinearConstraint>,
    /// Absolute-plus-relative violation accepted as satisfied.
    pub feasibility_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Indices of constraints active at the solution.
    pub active: Vec<usize>,
    /// Lagrange multipliers aligned with `active`; non-negative for inequalities.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
}

impl QuadraticProgram {
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        Self { hessian, linear, constraints: Vec::new(), feasibility_tolerance: 1e-12 }
    }

    pub fn with_constraint(mut self, c: LinearConstraint) -> Self {
        self.constraints.push(c);
        self
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    pub fn solve(&self) -> Result<QpSolution, QpError> {
        let n = self.linear.len();
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return Err(QpError::Dimension(format!(
                "hessian is {}x{}, linear term has {n} entries",
                self.hessian.nrows(),
                self.hessian.ncols()
            )));
        }
        if let Some(i) = self.constraints.iter().position(|c| c.normal.len() != n) {
            return Err(QpError::Dimension(format!("constraint {i} has the wrong length")));
        }
        let ginv = self.hessian.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?.inverse();

        let mut x = -(&ginv * &self.linear);
        // Active constraints with orientation (+1 / -1 for equalities entered from above).
        let mut active: Vec<(usize, f64)> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let max_steps = 50 * (n + self.constraints.len()) + 100;
        let mut steps = 0;

        while let Some((p, sign)) = self.most_violated(&x, &active) {
            let np = &self.constraints[p].normal * sign;
            let bp = self.constraints[p].rhs * sign;
            let scale = np.dot(&(&ginv * &np)).max(f64::MIN_POSITIVE);
            let mut u_p = 0.0;
            loop {
                steps += 1;
                if steps > max_steps {
                    return Err(QpError::MaxIterations(max_steps));
                }
                let (z, r) = self.directions(&ginv, &active, &np);

                // Partial step: largest move before an active inequality multiplier hits zero.
                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for (j, (&(idx, _), &rj)) in active.iter().zip(&r).enumerate() {
                    if self.constraints[idx].kind == ConstraintKind::AtLeast && rj > 1e-14 {
                        let ratio = u[j] / rj;
                        if ratio < t1 {
                            t1 = ratio;
                            drop = Some(j);
                        }
                    }
                }
                let zn = z.dot(&np);
                let t2 = if zn <= 1e-13 * scale { f64::INFINITY } else { -(np.dot(&x) - bp) / zn };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(QpError::Infeasible { constraint: p });
                }
                for (uj, rj) in u.iter_mut().zip(&r) {
                    *uj -= t * rj;
                }
                u_p += t;
                if t2.is_finite() {
                    x += &z * t;
                }
                if t2 <= t1 {
                    active.push((p, sign));
                    u.push(u_p);
                    break;
                }
                let k = drop.expect("finite partial step has a blocking constraint");
                active.remove(k);
                u.remove(k);
            }
        }

        let objective = self.objective(&x);
        let multipliers = active.iter().zip(&u).map(|(&(_, sign), &m)| m * sign).collect();
        Ok(QpSolution {
            x,
            objective,
            active: active.iter().map(|&(i, _)| i).collect(),
            multipliers,
            iterations: steps,
        })
    }

    /// Unsatisfied equality first, otherwise the inequality with the largest
    /// normalised violation.
    fn most_violated(&self, x: &DVector<f64>, active: &[(usize, f64)]) -> Option<(usize, f64)> {
        let is_active = |i: usize| active.iter().any(|&(j, _)| j == i);
        let mut best: Option<(usize, f64)> = None;
        let mut worst = 0.0;
        for (i, c) in self.constraints.iter().enumerate() {
            if is_active(i) {
                continue;
            }
            let s = c.slack(x);
            match c.kind {
                ConstraintKind::Equality => {
                    if s.abs() > c.tolerance(self.feasibility_tolerance) {
                        return Some((i, if s > 0.0 { -1.0 } else { 1.0 }));
                    }
                }
                ConstraintKind::AtLeast => {
                    if s < -c.tolerance(self.feasibility_tolerance) {
                        let violation = -s / c.normal.norm().max(f64::MIN_POSITIVE);
                        if violation > worst {
                            worst = violation;
                            best = Some((i, 1.0));
                        }
                    }
                }
            }
        }
        best
    }

    /// Primal step direction `z` and dual direction `r` for adding normal `np`.
    fn directions(
        &self,
        ginv: &DMatrix<f64>,
        active: &[(usize, f64)],
        np: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let n = np.len();
        let q = active.len();
        if q == 0 {
            return (ginv * np, DVector::zeros(0));
        }
        let normals = DMatrix::from_fn(n, q, |row, col| {
            let (idx, sign) = active[col];
            self.constraints[idx].normal[row] * sign
        });
        let ginv_n = ginv * &normals;
        let m = normals.transpose() * &ginv_n;
        let m_inv = match m.clone().cholesky() {
            Some(c) => c.inverse(),
            None => m.try_inverse().unwrap_or_else(|| DMatrix::zeros(q, q)),
        };
        let r = &m_inv * (ginv_n.transpose() * np);
        let z = ginv * np - &ginv_n * &r;
        (z, r)
    }
}
