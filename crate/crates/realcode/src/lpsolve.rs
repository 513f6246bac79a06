//! Sparse-error recovery by l1 minimization, solved as a linear program.
//!
//! The problem is basis pursuit: `min ||z||_1 subject to A z = b` with `A`
//! short and wide. Splitting `z = z+ - z-` with `z+, z- >= 0` gives the
//! standard-form LP
//!
//! ```text
//! min 1'(z+; z-)   s.t.   [A  -A] (z+; z-) = b,   (z+; z-) >= 0,
//! ```
//!
//! solved by a homogeneous self-dual interior-point method with Mehrotra
//! predictor-corrector steps. The embedding keeps a scaling pair
//! `(tau, kappa)`: `tau -> positive` certifies optimality, `tau -> 0` with
//! `b'y > 0` certifies infeasibility, so no phase-1 is needed.
//!
//! The doubled matrix `[A -A]` is never materialized. Every product with it
//! folds back onto `A`, and the normal-equation matrix collapses to
//!
//! ```text
//! M = [A -A] diag(x/z) [A -A]' = A (d+ + d-) A',
//! ```
//!
//! formed as `C C'` with `C = A diag(sqrt(d+ + d-))` — a symmetric rank-k
//! update touching only the lower triangle, followed by a blocked Cholesky.
//! That product is the entire cost of an iteration at the sizes the decoder
//! produces, so the solver lives or dies by it.

use crate::codec::{CodecError, ConstraintSet};
use crate::numkernel::{
    axpy, cholesky_lower, cholesky_solve, dot, norm2, norm_inf, syrk_lower, Matrix, Vector,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// `min ||z||_1 s.t. a z = b`.
#[derive(Clone, Debug)]
pub struct L1Problem {
    pub a: Matrix,
    pub b: Vector,
}

impl L1Problem {
    pub fn new(a: Matrix, b: Vector) -> Result<Self, LpError> {
        if a.rows() == 0 || a.cols() == 0 {
            return Err(LpError::InvalidProblem(format!(
                "empty constraint matrix {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        if b.len() != a.rows() {
            return Err(LpError::InvalidProblem(format!(
                "{} rows but {} right-hand sides",
                a.rows(),
                b.len()
            )));
        }
        Ok(L1Problem { a, b })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterationLimit,
    NumericalFailure,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::IterationLimit => "iteration-limit",
            SolveStatus::NumericalFailure => "numerical-failure",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Feasibility tolerance: `||Az - b||_inf <= eps_feas * (1 + ||b||_inf)`
    /// must hold for a solution reported optimal.
    pub eps_feas: f64,
    /// Optimality tolerance on the scaled duality gap.
    pub eps_obj: f64,
    pub max_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { eps_feas: 1e-8, eps_obj: 1e-8, max_iters: 200 }
    }
}

#[derive(Clone, Debug)]
pub struct L1Solution {
    pub z: Vector,
    /// `||z||_1` of the returned point.
    pub objective: f64,
    /// `||Az - b||_inf` of the returned point against the original system.
    pub feas_residual: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Human-readable detail for non-optimal outcomes.
    pub diagnostic: Option<String>,
}

/// Step-to-boundary damping for accepted steps.
const ALPHA0: f64 = 0.999_95;
/// Mehrotra centering cap.
const BETA: f64 = 0.1;

pub fn solve(problem: &L1Problem, opts: &SolveOptions) -> L1Solution {
    let m = problem.a.rows();
    let n = problem.a.cols();
    let tol = opts.eps_feas.min(opts.eps_obj).max(1e-14);

    // Row equilibration: scaling row i of [A | b] by a positive constant
    // changes neither the feasible set nor the objective, but keeps the
    // normal equations well conditioned when constraint rows have very
    // different norms. The reported residual is computed against the
    // original system at the end.
    let mut a = problem.a.as_slice().to_vec();
    let mut b = problem.b.as_slice().to_vec();
    for i in 0..m {
        let row = &mut a[i * n..(i + 1) * n];
        let s = norm_inf(row);
        if s > 0.0 {
            let inv = 1.0 / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
            b[i] *= inv;
        }
    }

    let mut ipm = Ipm::new(a, b, m, n);
    let outcome = ipm.run(tol, opts.max_iters);

    // Recover z = (x+ - x-) / tau from whatever point the iteration reached.
    let zv: Vec<f64> = (0..n).map(|j| (ipm.x[j] - ipm.x[n + j]) / ipm.tau).collect();
    let z = Vector { data: zv };
    let objective = z.norm1();
    let az = problem.a.matvec(&z).expect("dimensions fixed above");
    let feas_residual =
        az.as_slice().iter().zip(problem.b.as_slice()).fold(0.0f64, |acc, (l, r)| {
            acc.max((l - r).abs())
        });

    let (mut status, mut diagnostic, iterations) = outcome;
    if status == SolveStatus::Optimal {
        // The iteration's relative indicators converged; enforce the
        // absolute contract before reporting success.
        let feas_ok = feas_residual <= opts.eps_feas * (1.0 + problem.b.norm_inf());
        let primal_obj = ipm.x.iter().sum::<f64>() / ipm.tau;
        let dual_obj = dot(&ipm.b, &ipm.y) / ipm.tau;
        let gap = (primal_obj - dual_obj).abs();
        let gap_ok = gap <= opts.eps_obj * (1.0 + primal_obj.abs());
        if !feas_ok || !gap_ok {
            status = SolveStatus::NumericalFailure;
            diagnostic = Some(format!(
                "indicators converged but the certificate check failed: \
                 residual {feas_residual:.3e}, duality gap {gap:.3e}"
            ));
        }
    }
    L1Solution { z, objective, feas_residual, status, iterations, diagnostic }
}

struct Ipm {
    a: Vec<f64>, // equilibrated, row-major m x n
    b: Vec<f64>,
    m: usize,
    n: usize,
    x: Vec<f64>, // 2n
    y: Vec<f64>, // m
    z: Vec<f64>, // 2n
    tau: f64,
    kappa: f64,
    // Normal-equation workspace.
    c_scaled: Vec<f64>,  // m x n
    m_mat: Vec<f64>,     // m x m, destroyed by Cholesky
    m_save: Vec<f64>,    // pristine copy for ridge retries
    dinv: Vec<f64>,      // 2n, x/z
}

struct Delta {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
    dtau: f64,
    dkappa: f64,
}

impl Ipm {
    fn new(a: Vec<f64>, b: Vec<f64>, m: usize, n: usize) -> Self {
        Ipm {
            a,
            b,
            m,
            n,
            x: vec![1.0; 2 * n],
            y: vec![0.0; m],
            z: vec![1.0; 2 * n],
            tau: 1.0,
            kappa: 1.0,
            c_scaled: vec![0.0; m * n],
            m_mat: vec![0.0; m * m],
            m_save: vec![0.0; m * m],
            dinv: vec![0.0; 2 * n],
        }
    }

    /// `out = A v`.
    fn a_matvec(&self, v: &[f64], out: &mut [f64]) {
        for i in 0..self.m {
            out[i] = dot(&self.a[i * self.n..(i + 1) * self.n], v);
        }
    }

    /// `out = A' u`.
    fn at_matvec(&self, u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.m {
            axpy(u[i], &self.a[i * self.n..(i + 1) * self.n], out);
        }
    }

    /// `out = [A -A] w` for a doubled vector `w`.
    fn ahat_matvec(&self, w: &[f64], out: &mut [f64]) {
        let n = self.n;
        let folded: Vec<f64> = (0..n).map(|j| w[j] - w[n + j]).collect();
        self.a_matvec(&folded, out);
    }

    /// Residuals of the embedding at the current point.
    fn residuals(&self) -> (Vec<f64>, Vec<f64>, f64, f64) {
        let (m, n) = (self.m, self.n);
        let mut r_p = vec![0.0; m];
        self.ahat_matvec(&self.x, &mut r_p);
        for i in 0..m {
            r_p[i] = self.b[i] * self.tau - r_p[i];
        }
        let mut atv = vec![0.0; n];
        self.at_matvec(&self.y, &mut atv);
        let mut r_d = vec![0.0; 2 * n];
        for j in 0..n {
            r_d[j] = self.tau - atv[j] - self.z[j];
            r_d[n + j] = self.tau + atv[j] - self.z[n + j];
        }
        let r_g = self.x.iter().sum::<f64>() - dot(&self.b, &self.y) + self.kappa;
        let mu = (dot(&self.x, &self.z) + self.tau * self.kappa) / (2 * n + 1) as f64;
        (r_p, r_d, r_g, mu)
    }

    /// Form and factorize `M = A diag(d+ + d-) A'`; on a failed pivot, retry
    /// with an increasing ridge. Returns false when even the largest ridge
    /// fails.
    fn factorize(&mut self) -> bool {
        let (m, n) = (self.m, self.n);
        for j in 0..2 * n {
            // Near convergence x/z polarizes; unbounded ratios (or 0/0)
            // would poison the normal equations, so pin the scaling to a
            // band the factorization can survive. Directions computed with
            // a clamped scaling are still interior and still descend.
            let raw = self.x[j] / self.z[j];
            self.dinv[j] = if raw.is_nan() { 1.0 } else { raw.clamp(1e-16, 1e16) };
        }
        for i in 0..m {
            let arow = &self.a[i * n..(i + 1) * n];
            let crow = &mut self.c_scaled[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = arow[j] * (self.dinv[j] + self.dinv[n + j]).sqrt();
            }
        }
        syrk_lower(&mut self.m_save, m, &self.c_scaled, n);
        let max_diag =
            (0..m).fold(0.0f64, |acc, i| acc.max(self.m_save[i * m + i].abs()));
        for ridge_scale in [0.0, 1e-12, 1e-8, 1e-4] {
            self.m_mat.copy_from_slice(&self.m_save);
            if ridge_scale > 0.0 {
                let ridge = ridge_scale * (1.0 + max_diag);
                for i in 0..m {
                    self.m_mat[i * m + i] += ridge;
                }
            }
            if cholesky_lower(&mut self.m_mat, m).is_ok() {
                return true;
            }
        }
        false
    }

    /// Solve the reduced system for `(u, v)` given the doubled rhs `r1` and
    /// the primal rhs `r2`, using the current factorization.
    fn sym_solve(&self, r1: &[f64], r2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.m, self.n);
        // v = M^{-1} (r2 + Ahat (Dinv o r1)).
        let folded: Vec<f64> =
            (0..n).map(|j| self.dinv[j] * r1[j] - self.dinv[n + j] * r1[n + j]).collect();
        let mut v = vec![0.0; m];
        self.a_matvec(&folded, &mut v);
        for i in 0..m {
            v[i] += r2[i];
        }
        cholesky_solve(&self.m_mat, m, &mut v);
        // u = Dinv o (Ahat' v - r1).
        let mut atv = vec![0.0; n];
        self.at_matvec(&v, &mut atv);
        let mut u = vec![0.0; 2 * n];
        for j in 0..n {
            u[j] = self.dinv[j] * (atv[j] - r1[j]);
            u[n + j] = self.dinv[n + j] * (-atv[j] - r1[n + j]);
        }
        (u, v)
    }

    /// One search direction. `pq` is the solve against `(c, b)` shared by
    /// the predictor and corrector of an iteration; `mehrotra` carries the
    /// predictor direction for the corrector's second-order terms.
    #[allow(clippy::too_many_arguments)]
    fn get_delta(
        &self,
        r_p: &[f64],
        r_d: &[f64],
        r_g: f64,
        mu: f64,
        gamma: f64,
        eta: f64,
        pq: &(Vec<f64>, Vec<f64>),
        mehrotra: Option<&Delta>,
    ) -> Option<Delta> {
        let (m, n) = (self.m, self.n);
        let rhat_p: Vec<f64> = r_p.iter().map(|v| eta * v).collect();
        let mut rhat_xs: Vec<f64> =
            (0..2 * n).map(|j| gamma * mu - self.x[j] * self.z[j]).collect();
        let mut rhat_tk = gamma * mu - self.tau * self.kappa;
        if let Some(d) = mehrotra {
            for j in 0..2 * n {
                rhat_xs[j] -= d.dx[j] * d.dz[j];
            }
            rhat_tk -= d.dtau * d.dkappa;
        }
        let r1: Vec<f64> =
            (0..2 * n).map(|j| eta * r_d[j] - rhat_xs[j] / self.x[j]).collect();
        let (u, v) = self.sym_solve(&r1, &rhat_p);
        let (p, q) = pq;
        let denom = self.kappa / self.tau + (-p.iter().sum::<f64>() + dot(&self.b, q));
        let numer = eta * r_g + rhat_tk / self.tau - (-u.iter().sum::<f64>() + dot(&self.b, &v));
        let dtau = numer / denom;
        if !dtau.is_finite() {
            return None;
        }
        let mut dx = u;
        let mut dy = v;
        for j in 0..2 * n {
            dx[j] += p[j] * dtau;
        }
        for i in 0..m {
            dy[i] += q[i] * dtau;
        }
        let mut dz = vec![0.0; 2 * n];
        for j in 0..2 * n {
            dz[j] = (rhat_xs[j] - self.z[j] * dx[j]) / self.x[j];
        }
        let dkappa = (rhat_tk - self.kappa * dtau) / self.tau;
        if dx.iter().chain(dz.iter()).any(|v| !v.is_finite()) || !dkappa.is_finite() {
            return None;
        }
        Some(Delta { dx, dy, dz, dtau, dkappa })
    }

    /// Largest fraction of the step keeping `(x, z, tau, kappa)` positive.
    fn get_step(&self, d: &Delta, alpha0: f64) -> f64 {
        let mut alpha: f64 = 1.0;
        for j in 0..2 * self.n {
            if d.dx[j] < 0.0 {
                alpha = alpha.min(alpha0 * self.x[j] / -d.dx[j]);
            }
            if d.dz[j] < 0.0 {
                alpha = alpha.min(alpha0 * self.z[j] / -d.dz[j]);
            }
        }
        if d.dtau < 0.0 {
            alpha = alpha.min(alpha0 * self.tau / -d.dtau);
        }
        if d.dkappa < 0.0 {
            alpha = alpha.min(alpha0 * self.kappa / -d.dkappa);
        }
        alpha
    }

    fn do_step(&mut self, d: &Delta, alpha: f64) {
        for j in 0..2 * self.n {
            self.x[j] += alpha * d.dx[j];
            self.z[j] += alpha * d.dz[j];
        }
        for i in 0..self.m {
            self.y[i] += alpha * d.dy[i];
        }
        self.tau += alpha * d.dtau;
        self.kappa += alpha * d.dkappa;
    }

    fn run(&mut self, tol: f64, max_iters: usize) -> (SolveStatus, Option<String>, usize) {
        let n = self.n;
        // Reference residual norms at the blind start, for relative
        // convergence indicators.
        let (r_p0, r_d0, r_g0, mu_0) = self.residuals();
        let r_p0_norm = norm2(&r_p0).max(1.0);
        let r_d0_norm = norm2(&r_d0).max(1.0);
        let r_g0_norm = r_g0.abs().max(1.0);

        let indicators = |s: &Self| -> (f64, f64, f64, f64, f64) {
            let (r_p, r_d, r_g, mu) = s.residuals();
            let bty = dot(&s.b, &s.y);
            let ctx = s.x.iter().sum::<f64>();
            let rho_a = (ctx - bty).abs() / (s.tau + bty.abs());
            let rho_p = norm2(&r_p) / r_p0_norm;
            let rho_d = norm2(&r_d) / r_d0_norm;
            let rho_g = r_g.abs() / r_g0_norm;
            let rho_mu = mu / mu_0;
            (rho_p, rho_d, rho_a, rho_g, rho_mu)
        };

        let (mut rho_p, mut rho_d, mut rho_a, _, _) = indicators(self);
        let mut iteration = 0usize;
        let mut initial_point = true;
        while rho_p > tol || rho_d > tol || rho_a > tol {
            if iteration >= max_iters {
                return (
                    SolveStatus::IterationLimit,
                    Some(format!(
                        "stopped after {max_iters} iterations: \
                         rho_p {rho_p:.2e}, rho_d {rho_d:.2e}, rho_gap {rho_a:.2e}"
                    )),
                    iteration,
                );
            }
            iteration += 1;
            if !self.factorize() {
                return (
                    SolveStatus::NumericalFailure,
                    Some("normal equations lost positive definiteness".into()),
                    iteration,
                );
            }
            let (r_p, r_d, r_g, mu) = self.residuals();
            let ones = vec![1.0; 2 * n];
            let pq = self.sym_solve(&ones, &self.b);

            let step = if initial_point {
                // One centering step from the all-ones start, taken at full
                // length and clamped back into the cone; cheap and makes the
                // following Mehrotra iterations far more reliable.
                initial_point = false;
                let d = self.get_delta(&r_p, &r_d, r_g, mu, 1.0, 1.0, &pq, None);
                match d {
                    Some(d) => {
                        self.do_step(&d, 1.0);
                        for j in 0..2 * n {
                            self.x[j] = self.x[j].max(1.0);
                            self.z[j] = self.z[j].max(1.0);
                        }
                        self.tau = self.tau.max(1.0);
                        self.kappa = self.kappa.max(1.0);
                        true
                    }
                    None => false,
                }
            } else {
                let predictor = self.get_delta(&r_p, &r_d, r_g, mu, 0.0, 1.0, &pq, None);
                match predictor {
                    Some(pred) => {
                        let alpha_aff = self.get_step(&pred, 1.0);
                        let gamma = (1.0 - alpha_aff).powi(2) * BETA.min(1.0 - alpha_aff);
                        let eta = 1.0 - gamma;
                        let corrector =
                            self.get_delta(&r_p, &r_d, r_g, mu, gamma, eta, &pq, Some(&pred));
                        match corrector {
                            Some(corr) => {
                                let alpha = self.get_step(&corr, ALPHA0);
                                self.do_step(&corr, alpha);
                                true
                            }
                            None => false,
                        }
                    }
                    None => false,
                }
            };
            if !step {
                return (
                    SolveStatus::NumericalFailure,
                    Some("search direction was not finite".into()),
                    iteration,
                );
            }

            let (p2, d2, a2, rho_g, rho_mu) = indicators(self);
            rho_p = p2;
            rho_d = d2;
            rho_a = a2;

            // Infeasibility / unboundedness detection via the embedding:
            // tau collapsing with the residuals certifies there is no
            // feasible optimal pair.
            let inf1 = rho_p <= tol
                && rho_d <= tol
                && rho_g <= tol
                && self.tau < tol * self.kappa.max(1.0);
            let inf2 = rho_mu <= tol && self.tau < tol * self.kappa.min(1.0);
            if inf1 || inf2 {
                return if dot(&self.b, &self.y) > tol {
                    (
                        SolveStatus::Infeasible,
                        Some("dual certificate: the constraints are inconsistent".into()),
                        iteration,
                    )
                } else {
                    // A genuine unbounded certificate cannot occur for a
                    // nonnegative objective; treat it as numerical.
                    (
                        SolveStatus::NumericalFailure,
                        Some("embedding collapsed without an infeasibility certificate".into()),
                        iteration,
                    )
                };
            }
        }
        (SolveStatus::Optimal, None, iteration)
    }
}

/// Build the l1 recovery system for the memory error of one column group of
/// `h_tilde` under `cs` (use group 0 for ungrouped sets).
///
/// The unknown is the column-stacked error block `vec(E_g)`. Rows come in
/// the order: one row per (row constraint, group column) pair — the
/// constraint `a_i' (H - E) e_c = 0` rewritten as `vec(a_i e_c')' vec(E) =
/// a_i' H_tilde e_c` — followed by one row per general constraint
/// (`vec(B_j)' vec(E) = <B_j, H_tilde>`). A fault-free block yields a zero
/// right-hand side, so the minimizer is the zero error.
pub fn build_correction_system(
    h_tilde: &Matrix,
    cs: &ConstraintSet,
    group: usize,
) -> Result<L1Problem, CodecError> {
    if h_tilde.shape() != cs.shape() {
        return Err(CodecError::InvalidSpec(format!(
            "correction system: weights are {:?}, spec wants {:?}",
            h_tilde.shape(),
            cs.shape()
        )));
    }
    if group >= cs.num_groups() {
        return Err(CodecError::InvalidSpec(format!(
            "group {group} out of range ({} groups)",
            cs.num_groups()
        )));
    }
    let p = h_tilde.rows();
    let gc = cs.group_cols();
    let block = h_tilde.columns(group * gc, (group + 1) * gc);
    let s = cs.spec().row_constraints.len();
    let t = cs.spec().num_general;
    let m = s * gc + t;
    let n = p * gc;
    let mut a = Matrix::zeros(m, n);
    let mut b = Vector::zeros(m);
    for (i, kind) in cs.spec().row_constraints.iter().enumerate() {
        let av = kind.expand(p);
        let ath = block.tr_matvec(&av).expect("shapes agree"); // a' * block
        for c in 0..gc {
            let r = i * gc + c;
            // vec(a e_c') occupies the c-th length-p segment.
            a.row_mut(r)[c * p..(c + 1) * p].copy_from_slice(av.as_slice());
            b[r] = ath.at(c);
        }
    }
    for (j, bj) in cs.generals_for_group(group).into_iter().enumerate() {
        let r = s * gc + j;
        let v = bj.col_stack();
        a.row_mut(r).copy_from_slice(v.as_slice());
        b[r] = bj.frobenius_inner(&block).expect("shapes agree");
    }
    L1Problem::new(a, b).map_err(|e| CodecError::InvalidSpec(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode, ConstraintSpec, RowConstraintKind};
    use crate::rng::Stream;

    fn random_matrix(seed: u64, m: usize, n: usize) -> Matrix {
        let mut s = Stream::new(seed, 97);
        Matrix::from_fn(m, n, |_, _| s.normal())
    }

    fn assert_contract(p: &L1Problem, sol: &L1Solution, opts: &SolveOptions) {
        if sol.status == SolveStatus::Optimal {
            assert!(
                sol.feas_residual <= opts.eps_feas * (1.0 + p.b.norm_inf()),
                "optimal but infeasible: {}",
                sol.feas_residual
            );
        }
    }

    #[test]
    fn forced_scalar_problem() {
        let p = L1Problem::new(
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            Vector::from_vec(vec![3.0]).unwrap(),
        )
        .unwrap();
        let opts = SolveOptions::default();
        let sol = solve(&p, &opts);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.z.at(0) - 3.0).abs() < 1e-7, "z = {}", sol.z.at(0));
        assert!((sol.objective - 3.0).abs() < 1e-7);
        assert_contract(&p, &sol, &opts);
    }

    #[test]
    fn degenerate_face_has_exact_objective() {
        // min |z1| + |z2| s.t. z1 + z2 = 1: every convex combination of the
        // unit vectors is optimal; the objective is exactly 1.
        let p = L1Problem::new(
            Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap(),
            Vector::from_vec(vec![1.0]).unwrap(),
        )
        .unwrap();
        let opts = SolveOptions::default();
        let sol = solve(&p, &opts);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.objective - 1.0).abs() < 1e-7, "objective {}", sol.objective);
        assert_contract(&p, &sol, &opts);
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        let p = L1Problem::new(random_matrix(4, 5, 12), Vector::zeros(5)).unwrap();
        let opts = SolveOptions::default();
        let sol = solve(&p, &opts);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.z.norm_inf() <= 1e-8, "|z| = {}", sol.z.norm_inf());
        assert!(sol.objective <= 1e-7);
    }

    #[test]
    fn one_sparse_recovery() {
        // A 1-sparse vector is the unique l1 minimizer for a generic 5x10
        // system built from it.
        for trial in 0..20 {
            let a = random_matrix(100 + trial, 5, 10);
            let mut s = Stream::new(200 + trial, 0);
            let idx = s.below(10);
            let amp = if s.unit() < 0.5 { 2.5 } else { -1.5 };
            let mut z0 = Vector::zeros(10);
            z0[idx] = amp;
            let b = a.matvec(&z0).unwrap();
            let p = L1Problem::new(a, b).unwrap();
            let opts = SolveOptions::default();
            let sol = solve(&p, &opts);
            assert_eq!(sol.status, SolveStatus::Optimal, "trial {trial}");
            let err = sol.z.sub(&z0).unwrap().norm2();
            assert!(err <= 1e-6, "trial {trial}: recovery error {err}");
            assert_contract(&p, &sol, &opts);
        }
    }

    // ---- Brute-force oracle ------------------------------------------------
    //
    // The LP vertex theory says an optimal basic solution is supported on a
    // set of linearly independent columns, so the minimum of ||z||_1 over
    // {Az = b} equals the minimum over all such supports of the unique
    // consistent solution's l1 norm. For small n, enumerate every support.
    // This reimplements the search directly on top of Gaussian elimination
    // so it shares nothing with the interior-point path it checks.

    /// Solve the overdetermined consistent system `cols * w = b` by Gaussian
    /// elimination on the augmented matrix; returns None when the columns
    /// are dependent or the system is inconsistent.
    fn exact_solve(cols: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
        let m = b.len();
        let k = cols.len();
        let mut aug: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let mut row: Vec<f64> = cols.iter().map(|c| c[i]).collect();
                row.push(b[i]);
                row
            })
            .collect();
        let mut rank = 0;
        for col in 0..k {
            let pivot = (rank..m).max_by(|&r1, &r2| {
                aug[r1][col].abs().partial_cmp(&aug[r2][col].abs()).unwrap()
            })?;
            if aug[pivot][col].abs() < 1e-10 {
                return None; // dependent columns; a smaller support covers this
            }
            aug.swap(rank, pivot);
            for r in 0..m {
                if r != rank {
                    let f = aug[r][col] / aug[rank][col];
                    for c in col..=k {
                        let delta = f * aug[rank][c];
                        aug[r][c] -= delta;
                    }
                }
            }
            rank += 1;
        }
        // Consistency: eliminated rhs must vanish outside the pivot rows.
        let scale = norm_inf(b).max(1.0);
        for row in aug.iter().skip(rank) {
            if row[k].abs() > 1e-9 * scale {
                return None;
            }
        }
        Some((0..k).map(|i| aug[i][k] / aug[i][i]).collect())
    }

    fn subsets_up_to(n: usize, kmax: usize) -> Vec<Vec<usize>> {
        let mut all = vec![vec![]];
        let mut frontier: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..kmax {
            let mut next = Vec::new();
            for s in &frontier {
                let start = s.last().map_or(0, |&l| l + 1);
                for e in start..n {
                    let mut t = s.clone();
                    t.push(e);
                    next.push(t);
                }
            }
            all.extend(next.iter().cloned());
            frontier = next;
        }
        all
    }

    /// Minimal `||z||_1` over every vertex of `{Az = b}`.
    fn oracle_min_l1(a: &Matrix, b: &Vector) -> Option<f64> {
        let (m, n) = a.shape();
        let mut best: Option<f64> = None;
        for support in subsets_up_to(n, m.min(n)) {
            if support.is_empty() {
                if b.norm_inf() <= 1e-12 {
                    best = Some(0.0);
                }
                continue;
            }
            let cols: Vec<Vec<f64>> = support
                .iter()
                .map(|&j| (0..m).map(|i| a.at(i, j)).collect())
                .collect();
            if let Some(w) = exact_solve(&cols, b.as_slice()) {
                let l1: f64 = w.iter().map(|v| v.abs()).sum();
                best = Some(best.map_or(l1, |cur: f64| cur.min(l1)));
            }
        }
        best
    }

    #[test]
    fn objective_matches_brute_force_oracle() {
        let mut checked = 0;
        let mut trial = 0u64;
        while checked < 100 {
            trial += 1;
            let mut s = Stream::new(1000 + trial, 0);
            let m = 3 + s.below(6); // 3..8
            let n = (m + 2) + s.below(12 - m - 1); // m+2..12
            let a = random_matrix(5000 + trial, m, n);
            let sparsity = 1 + s.below(2);
            let mut z0 = Vector::zeros(n);
            for idx in s.sample_distinct(sparsity, n) {
                z0[idx] = s.normal() * 2.0;
            }
            let b = a.matvec(&z0).unwrap();
            let p = L1Problem::new(a.clone(), b.clone()).unwrap();
            let opts = SolveOptions::default();
            let sol = solve(&p, &opts);
            if sol.status != SolveStatus::Optimal {
                panic!("trial {trial}: solver returned {}", sol.status);
            }
            let oracle = oracle_min_l1(&a, &b).expect("oracle found no vertex");
            assert!(
                (sol.objective - oracle).abs() <= 1e-8 * (1.0 + oracle),
                "trial {trial}: solver {} vs oracle {oracle}",
                sol.objective
            );
            assert_contract(&p, &sol, &opts);
            checked += 1;
        }
    }

    #[test]
    fn solution_is_invariant_to_row_scaling() {
        let a = random_matrix(71, 6, 14);
        let mut s = Stream::new(72, 0);
        let mut z0 = Vector::zeros(14);
        for idx in s.sample_distinct(2, 14) {
            z0[idx] = 1.0 + s.unit();
        }
        let b = a.matvec(&z0).unwrap();
        let opts = SolveOptions::default();
        let base = solve(&L1Problem::new(a.clone(), b.clone()).unwrap(), &opts);
        assert_eq!(base.status, SolveStatus::Optimal);

        // Global scaling by 1000 and per-row scaling by powers of ten.
        let scaled = solve(
            &L1Problem::new(a.scale(1000.0), b.scale(1000.0)).unwrap(),
            &opts,
        );
        assert_eq!(scaled.status, SolveStatus::Optimal);
        assert!(base.z.sub(&scaled.z).unwrap().norm_inf() < 1e-6);

        let row_scale: Vec<f64> = (0..6).map(|i| 10f64.powi(i as i32 - 3)).collect();
        let a_rows = Matrix::from_fn(6, 14, |i, j| a.at(i, j) * row_scale[i]);
        let b_rows = Vector::from_fn(6, |i| b.at(i) * row_scale[i]);
        let rowed = solve(&L1Problem::new(a_rows, b_rows).unwrap(), &opts);
        assert_eq!(rowed.status, SolveStatus::Optimal);
        assert!(base.z.sub(&rowed.z).unwrap().norm_inf() < 1e-6);
    }

    #[test]
    fn inconsistent_system_is_reported_infeasible() {
        // Two contradictory equations on one unknown.
        let p = L1Problem::new(
            Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap(),
            Vector::from_vec(vec![1.0, 2.0]).unwrap(),
        )
        .unwrap();
        let sol = solve(&p, &SolveOptions::default());
        assert_eq!(sol.status, SolveStatus::Infeasible, "{:?}", sol.diagnostic);

        // And a larger one: rank-2 system with rhs outside the column span.
        let a = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Vector::from_vec(vec![0.0, 0.0, 5.0]).unwrap();
        let sol = solve(&L1Problem::new(a, b).unwrap(), &SolveOptions::default());
        assert_eq!(sol.status, SolveStatus::Infeasible, "{:?}", sol.diagnostic);
    }

    #[test]
    fn iteration_limit_is_reported() {
        let a = random_matrix(81, 6, 14);
        let mut s = Stream::new(82, 0);
        let z0 = Vector::from_fn(14, |_| s.normal());
        let b = a.matvec(&z0).unwrap();
        let opts = SolveOptions { max_iters: 1, ..Default::default() };
        let sol = solve(&L1Problem::new(a, b).unwrap(), &opts);
        assert_eq!(sol.status, SolveStatus::IterationLimit);
        assert_eq!(sol.iterations, 1);
        assert!(sol.diagnostic.is_some());
    }

    #[test]
    fn rejects_malformed_problems() {
        assert!(L1Problem::new(Matrix::zeros(0, 3), Vector::zeros(0)).is_err());
        assert!(L1Problem::new(Matrix::zeros(2, 3), Vector::zeros(3)).is_err());
    }

    // ---- Correction-system construction ------------------------------------

    fn mnist_like_group_spec() -> ConstraintSpec {
        ConstraintSpec {
            seed: 9,
            num_general: 20,
            row_constraints: vec![RowConstraintKind::AllOnes],
            group_size: None,
            shape: (8, 6),
        }
    }

    #[test]
    fn correction_system_rows_match_constraints() {
        let cs = ConstraintSet::from_spec(mnist_like_group_spec()).unwrap();
        let h_tilde = random_matrix(55, 8, 6);
        let p = build_correction_system(&h_tilde, &cs, 0).unwrap();
        // m = s*q + t, n = p*q.
        assert_eq!(p.a.rows(), 6 + 20);
        assert_eq!(p.a.cols(), 48);
        // b == A vec(h_tilde).
        let expect = p.a.matvec(&h_tilde.col_stack()).unwrap();
        assert!(p.b.sub(&expect).unwrap().norm_inf() < 1e-10);
        // Row 0 is the all-ones constraint on column 0: ones in the first
        // length-8 segment, zeros elsewhere.
        for j in 0..48 {
            let expect = if j < 8 { 1.0 } else { 0.0 };
            assert_eq!(p.a.at(0, j), expect);
        }
        // General rows are the stacked constraint matrices.
        let generals = cs.generals_for_group(0);
        let v = generals[3].col_stack();
        for j in 0..48 {
            assert_eq!(p.a.at(6 + 3, j), v.at(j));
        }
    }

    #[test]
    fn clean_weights_give_zero_rhs_and_zero_recovery() {
        let cs = ConstraintSet::from_spec(mnist_like_group_spec()).unwrap();
        let coded = encode(&random_matrix(56, 8, 6), &cs).unwrap();
        let p = build_correction_system(&coded.weights, &cs, 0).unwrap();
        // Each |b_i| <= residual * ||row|| * ||H||_F by Cauchy-Schwarz.
        let h_norm = coded.weights.frobenius_norm();
        for i in 0..p.a.rows() {
            let row_norm = norm2(p.a.row(i));
            assert!(
                p.b.at(i).abs() <= 1e-9 * row_norm * h_norm,
                "row {i}: rhs {}",
                p.b.at(i)
            );
        }
        let sol = solve(&p, &SolveOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.z.norm_inf() <= 1e-6);
    }

    #[test]
    fn grouped_correction_system_shapes() {
        let spec = ConstraintSpec {
            seed: 42,
            num_general: 500,
            row_constraints: vec![RowConstraintKind::AllOnes],
            group_size: Some(14),
            shape: (256, 784),
        };
        let cs = ConstraintSet::from_spec(spec).unwrap();
        let h = Matrix::zeros(256, 784);
        let p = build_correction_system(&h, &cs, 55).unwrap();
        assert_eq!(p.a.rows(), 514);
        assert_eq!(p.a.cols(), 3584);
        assert!(build_correction_system(&h, &cs, 56).is_err());
    }

    #[test]
    fn sparse_error_recovery_through_correction_system() {
        // Encode, corrupt two cells, rebuild the error from the syndrome.
        let cs = ConstraintSet::from_spec(mnist_like_group_spec()).unwrap();
        let coded = encode(&random_matrix(57, 8, 6), &cs).unwrap();
        let mut h_tilde = coded.weights.clone();
        h_tilde[(2, 1)] += 1.7;
        h_tilde[(6, 4)] -= 0.9;
        let p = build_correction_system(&h_tilde, &cs, 0).unwrap();
        let sol = solve(&p, &SolveOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        let e_hat = Matrix::from_col_stack(8, 6, &sol.z).unwrap();
        let mut expected = Matrix::zeros(8, 6);
        expected[(2, 1)] = 1.7;
        expected[(6, 4)] = -0.9;
        let err = e_hat.sub(&expected).unwrap().max_abs();
        assert!(err < 1e-6, "recovery error {err}");
    }
}
