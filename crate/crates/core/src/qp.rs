//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize    ½ xᵀ H x + fᵀ x
//!     subject to  A x  = b
//!                 C x <= d
//! ```
//!
//! with a primal-dual interior-point method using Mehrotra predictor-corrector
//! steps. The Newton system is factored densely: by Cholesky when there are no
//! equality rows, otherwise by LU on the full KKT matrix. The inequality
//! normal matrix `Cᵀ W C` is accumulated from the nonzero pattern of each row,
//! which keeps the MPC constraint sets (one foot per row) cheap.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Tolerance on the scaled KKT residuals.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Diagonal shift added to the Hessian before factorization; raised
    /// automatically when a factorization fails.
    pub regularization: f64,
    /// Re-solve the equality system of the constraints the interior-point
    /// iterate identifies as active, and keep the result when it is feasible,
    /// dual feasible and has smaller residuals.
    pub polish: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100,
            regularization: 1e-10,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    IterationLimit,
    Infeasible,
}

/// Infinity-norm KKT residuals, each scaled by `1 + ` the magnitude of the
/// terms it is built from.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    /// Largest residual; NaN if any residual is NaN.
    pub fn max(&self) -> f64 {
        [self.primal_eq, self.primal_ineq, self.complementarity]
            .into_iter()
            .fold(self.stationarity, |m, r| {
                if r.is_nan() || m.is_nan() {
                    f64::NAN
                } else {
                    m.max(r)
                }
            })
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the equality rows.
    pub y: DVector<f64>,
    /// Multipliers of the inequality rows (>= 0).
    pub z: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub residuals: KktResiduals,
    pub objective: f64,
}

#[derive(Debug, Error)]
pub enum QpError {
    #[error("QP dimension mismatch: {0}")]
    Dimension(String),
    #[error("QP infeasible: inequality row {row} most violated ({violation:.3e})")]
    Infeasible { row: usize, violation: f64 },
    #[error("QP iteration limit reached (max scaled residual {:.3e})", .0.residuals.max())]
    IterationLimit(Box<QpSolution>),
    #[error("KKT system could not be factored")]
    Singular,
}

/// Borrowed view of a QP in standard form.
#[derive(Debug, Clone, Copy)]
pub struct QpData<'a> {
    pub h: &'a DMatrix<f64>,
    pub f: &'a DVector<f64>,
    pub a_eq: &'a DMatrix<f64>,
    pub b_eq: &'a DVector<f64>,
    pub c: &'a DMatrix<f64>,
    pub d: &'a DVector<f64>,
}

impl QpData<'_> {
    fn check(&self) -> Result<(), QpError> {
        let n = self.f.len();
        let err = |m: String| Err(QpError::Dimension(m));
        if self.h.shape() != (n, n) {
            return err(format!("H is {:?}, expected {n}x{n}", self.h.shape()));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return err(format!(
                "A_eq is {:?} with b_eq of length {}",
                self.a_eq.shape(),
                self.b_eq.len()
            ));
        }
        if self.c.ncols() != n || self.c.nrows() != self.d.len() {
            return err(format!(
                "C is {:?} with d of length {}",
                self.c.shape(),
                self.d.len()
            ));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(self.h * x)) + self.f.dot(x)
    }
}

pub fn solve_qp(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<QpSolution, QpError> {
    let data = QpData {
        h,
        f,
        a_eq,
        b_eq,
        c,
        d,
    };
    solve(&data, settings, None)
}

/// Solves `data`, optionally starting the primal iterate from `warm`.
pub fn solve(
    data: &QpData<'_>,
    settings: &SolverSettings,
    warm: Option<&DVector<f64>>,
) -> Result<QpSolution, QpError> {
    data.check()?;
    if let Some(w) = warm {
        if w.len() != data.f.len() {
            return Err(QpError::Dimension(format!(
                "warm start has length {}, expected {}",
                w.len(),
                data.f.len()
            )));
        }
    }
    Ipm::new(data, settings).run(warm)
}

/// Infinity norm that propagates NaN.
fn amax(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m: f64, x| {
        if x.is_nan() || m.is_nan() {
            f64::NAN
        } else {
            m.max(x.abs())
        }
    })
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &dvi)| dvi < 0.0)
        .map(|(&vi, &dvi)| -vi / dvi)
        .fold(1.0, f64::min)
}

enum Kind {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

/// Factored Newton matrix plus the regularized matrix itself, kept for one
/// step of iterative refinement against the unshifted system.
struct Factor {
    kind: Kind,
    matrix: DMatrix<f64>,
    reg: f64,
}

struct Ipm<'a> {
    data: &'a QpData<'a>,
    settings: SolverSettings,
    n: usize,
    p: usize,
    m: usize,
    /// Nonzero pattern of each inequality row.
    rows: Vec<Vec<(usize, f64)>>,
    ct: DMatrix<f64>,
    at: DMatrix<f64>,
}

struct Iterate {
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    s: DVector<f64>,
}

struct Residuals {
    rd: DVector<f64>,
    re: DVector<f64>,
    ri: DVector<f64>,
    scaled: KktResiduals,
}

impl<'a> Ipm<'a> {
    fn new(data: &'a QpData<'a>, settings: &SolverSettings) -> Self {
        let rows = (0..data.c.nrows())
            .map(|r| {
                data.c
                    .row(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(j, &v)| (j, v))
                    .collect()
            })
            .collect();
        Self {
            data,
            settings: *settings,
            n: data.f.len(),
            p: data.b_eq.len(),
            m: data.d.len(),
            rows,
            ct: data.c.transpose(),
            at: data.a_eq.transpose(),
        }
    }

    fn c_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.m,
            self.rows
                .iter()
                .map(|row| row.iter().map(|&(j, v)| v * x[j]).sum::<f64>()),
        )
    }

    fn residuals(&self, it: &Iterate) -> Residuals {
        let dt = self.data;
        let hx = dt.h * &it.x;
        let aty = &self.at * &it.y;
        let ctz = &self.ct * &it.z;
        let rd = &hx + dt.f + &aty + &ctz;
        let ax = dt.a_eq * &it.x;
        let re = &ax - dt.b_eq;
        let cx = self.c_mul(&it.x);
        let ri = &cx + &it.s - dt.d;

        let obj = 0.5 * it.x.dot(&hx) + dt.f.dot(&it.x);
        let mu = if self.m > 0 {
            it.s.dot(&it.z) / self.m as f64
        } else {
            0.0
        };
        let scaled = KktResiduals {
            stationarity: amax(&rd)
                / (1.0 + amax(&hx).max(amax(dt.f)).max(amax(&aty)).max(amax(&ctz))),
            primal_eq: amax(&re) / (1.0 + amax(&ax).max(amax(dt.b_eq))),
            primal_ineq: amax(&ri) / (1.0 + amax(&cx).max(amax(dt.d))),
            complementarity: mu / (1.0 + obj.abs()),
        };
        Residuals { rd, re, ri, scaled }
    }

    fn factor(&self, w: &DVector<f64>) -> Result<Factor, QpError> {
        let n = self.n;
        let mut reg = self.settings.regularization;
        for _ in 0..6 {
            let mut k = self.data.h.clone();
            for i in 0..n {
                k[(i, i)] += reg;
            }
            for (row, &wr) in self.rows.iter().zip(w.iter()) {
                for &(a, va) in row {
                    let scale = wr * va;
                    for &(b, vb) in row {
                        k[(a, b)] += scale * vb;
                    }
                }
            }
            if self.p == 0 {
                if let Some(ch) = k.clone().cholesky() {
                    return Ok(Factor {
                        kind: Kind::Cholesky(ch),
                        matrix: k,
                        reg,
                    });
                }
            } else {
                let mut kkt = DMatrix::zeros(n + self.p, n + self.p);
                kkt.view_mut((0, 0), (n, n)).copy_from(&k);
                kkt.view_mut((0, n), (n, self.p)).copy_from(&self.at);
                kkt.view_mut((n, 0), (self.p, n)).copy_from(self.data.a_eq);
                let lu = kkt.clone().lu();
                if lu.is_invertible() {
                    return Ok(Factor {
                        kind: Kind::Lu(lu),
                        matrix: kkt,
                        reg,
                    });
                }
            }
            reg = (reg * 100.0).max(1e-10);
        }
        Err(QpError::Singular)
    }

    /// Solves the reduced Newton system for `(dx, dy)`.
    fn newton(
        &self,
        factor: &Factor,
        rhs_x: DVector<f64>,
        rhs_y: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let mut rhs = DVector::zeros(self.n + self.p);
        rhs.rows_mut(0, self.n).copy_from(&rhs_x);
        rhs.rows_mut(self.n, self.p).copy_from(rhs_y);
        let solve = |r: &DVector<f64>| match &factor.kind {
            Kind::Cholesky(ch) => ch.solve(r),
            Kind::Lu(lu) => lu.solve(r).expect("LU checked invertible"),
        };
        let mut sol = solve(&rhs);
        if factor.reg > 0.0 {
            let mut resid = &rhs - &factor.matrix * &sol;
            for i in 0..self.n {
                resid[i] += factor.reg * sol[i];
            }
            sol += solve(&resid);
        }
        (
            sol.rows(0, self.n).into_owned(),
            sol.rows(self.n, self.p).into_owned(),
        )
    }

    fn direction(
        &self,
        factor: &Factor,
        it: &Iterate,
        res: &Residuals,
        rsz: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        // dz = W (C dx + r_i) - S⁻¹ r_sz,  W = Z S⁻¹
        let w = it.z.component_div(&it.s);
        let corr = w.component_mul(&res.ri) - rsz.component_div(&it.s);
        let rhs_x = -&res.rd - &self.ct * &corr;
        let (dx, dy) = self.newton(factor, rhs_x, &(-&res.re));
        let cdx = self.c_mul(&dx);
        let dz = w.component_mul(&(&cdx + &res.ri)) - rsz.component_div(&it.s);
        let ds = -&res.ri - cdx;
        (dx, dy, dz, ds)
    }

    fn initial(&self, warm: Option<&DVector<f64>>) -> Iterate {
        let x = warm.cloned().unwrap_or_else(|| DVector::zeros(self.n));
        let slack = self.data.d - self.c_mul(&x);
        let s = slack.map(|v| v.max(1.0));
        Iterate {
            x,
            y: DVector::zeros(self.p),
            z: DVector::from_element(self.m, 1.0),
            s,
        }
    }

    fn finish(
        &self,
        it: Iterate,
        status: QpStatus,
        iterations: usize,
        scaled: KktResiduals,
    ) -> QpSolution {
        let objective = self.data.objective(&it.x);
        QpSolution {
            x: it.x,
            y: it.y,
            z: it.z,
            status,
            iterations,
            residuals: scaled,
            objective,
        }
    }

    fn finish_optimal(&self, it: Iterate, iterations: usize, scaled: KktResiduals) -> QpSolution {
        if self.settings.polish && self.m > 0 {
            if let Some(polished) = self.polish(&it) {
                let res = self.residuals(&polished);
                if res.scaled.max() <= scaled.max() {
                    return self.finish(polished, QpStatus::Optimal, iterations, res.scaled);
                }
            }
        }
        self.finish(it, QpStatus::Optimal, iterations, scaled)
    }

    /// Row `b` is the negation of row `a`, so together they pin `c x = d`.
    fn is_negation(&self, a: usize, b: usize) -> bool {
        let (ra, rb) = (&self.rows[a], &self.rows[b]);
        ra.len() == rb.len()
            && self.data.d[a] == -self.data.d[b]
            && ra
                .iter()
                .zip(rb)
                .all(|(&(ja, va), &(jb, vb))| ja == jb && va == -vb)
    }

    /// Equality-constrained solve on a working set of rows. Pinned pairs
    /// enter once; the twin takes the multiplier when it comes out negative.
    fn solve_working_set(
        &self,
        active: &[(usize, Option<usize>)],
    ) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let (n, p) = (self.n, self.p);
        let q = p + active.len();
        let mut kkt = DMatrix::zeros(n + q, n + q);
        kkt.view_mut((0, 0), (n, n)).copy_from(self.data.h);
        kkt.view_mut((0, n), (n, p)).copy_from(&self.at);
        kkt.view_mut((n, 0), (p, n)).copy_from(self.data.a_eq);
        let mut rhs = DVector::zeros(n + q);
        rhs.rows_mut(0, n).copy_from(&(-self.data.f));
        rhs.rows_mut(n, p).copy_from(self.data.b_eq);
        for (k, &(i, _)) in active.iter().enumerate() {
            for &(j, v) in &self.rows[i] {
                kkt[(n + p + k, j)] = v;
                kkt[(j, n + p + k)] = v;
            }
            rhs[n + p + k] = self.data.d[i];
        }
        // A small negative block keeps dependent working sets solvable;
        // refinement against the exact matrix removes its bias.
        let scale = (0..n).map(|i| kkt[(i, i)].abs()).fold(1.0, f64::max);
        let mut reg = kkt.clone();
        for i in n..n + q {
            reg[(i, i)] = -1e-12 * scale;
        }
        let lu = reg.lu();
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..5 {
            let resid = &rhs - &kkt * &sol;
            sol += lu.solve(&resid)?;
        }
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        let x = sol.rows(0, n).into_owned();
        let y = sol.rows(n, p).into_owned();
        let l = sol.rows(n + p, active.len()).into_owned();
        Some((x, y, l))
    }

    fn add_to_working_set(&self, active: &mut Vec<(usize, Option<usize>)>, i: usize) {
        if active.iter().any(|&(a, t)| a == i || t == Some(i)) {
            return;
        }
        match active
            .iter_mut()
            .find(|(a, t)| t.is_none() && self.is_negation(*a, i))
        {
            Some(entry) => entry.1 = Some(i),
            None => active.push((i, None)),
        }
    }

    /// Active-set refinement of an interior-point solution: start from the
    /// rows the iterate marks as active, then add violated rows and drop rows
    /// with negative multipliers until the equality solve is optimal.
    fn polish(&self, it: &Iterate) -> Option<Iterate> {
        let mut active: Vec<(usize, Option<usize>)> = Vec::new();
        for i in (0..self.m).filter(|&i| it.z[i] > it.s[i]) {
            self.add_to_working_set(&mut active, i);
        }
        let dual_tol = 1e-9 * (1.0 + amax(&it.z));
        let primal_tol = 1e-9 * (1.0 + amax(self.data.d));
        for _ in 0..20 {
            let (x, y, l) = self.solve_working_set(&active)?;
            let slack = self.data.d - self.c_mul(&x);
            let (worst_row, worst_slack) = slack.argmin();
            if worst_slack < -primal_tol {
                self.add_to_working_set(&mut active, worst_row);
                continue;
            }
            let mut z = DVector::zeros(self.m);
            let mut drop: Option<(usize, f64)> = None;
            for (k, &(i, twin)) in active.iter().enumerate() {
                let lk = l[k];
                match twin {
                    _ if lk >= 0.0 => z[i] = lk,
                    Some(j) => z[j] = -lk,
                    None if lk > -dual_tol => {}
                    None => {
                        if drop.is_none_or(|(_, v)| lk < v) {
                            drop = Some((k, lk));
                        }
                    }
                }
            }
            if let Some((k, _)) = drop {
                active.remove(k);
                continue;
            }
            return Some(Iterate {
                x,
                y,
                z,
                s: slack.map(|v| v.max(0.0)),
            });
        }
        None
    }

    fn most_violated(&self, it: &Iterate) -> (usize, f64) {
        // The dual ray of an infeasible problem concentrates on the rows of
        // the certificate; report the one with the largest multiplier.
        let row = it.z.iamax();
        let viol = (self.c_mul(&it.x) - self.data.d)[row];
        (row, viol)
    }

    /// Multipliers blowing up while the primal residual stalls is the
    /// signature of an infeasible constraint set.
    fn diverging(&self, it: &Iterate, res: &Residuals, data_scale: f64) -> bool {
        let z = amax(&it.z);
        self.m > 0
            && res.scaled.primal_ineq.max(res.scaled.primal_eq) > 1e-6
            && (z > 1e9 * data_scale || !z.is_finite())
    }

    fn run(&self, warm: Option<&DVector<f64>>) -> Result<QpSolution, QpError> {
        let mut it = self.initial(warm);
        let tol = self.settings.tolerance;
        let data_scale = 1.0
            + amax(self.data.f)
                .max(amax(self.data.d))
                .max(amax(self.data.b_eq));

        for iter in 0..self.settings.max_iterations {
            let res = self.residuals(&it);
            if res.scaled.max() <= tol {
                return Ok(self.finish_optimal(it, iter, res.scaled));
            }
            if self.diverging(&it, &res, data_scale) {
                let (row, violation) = self.most_violated(&it);
                return Err(QpError::Infeasible { row, violation });
            }

            let w = it.z.component_div(&it.s);
            let factor = self.factor(&w)?;

            if self.m == 0 {
                let (dx, dy) = self.newton(&factor, -&res.rd, &(-&res.re));
                it.x += dx;
                it.y += dy;
                continue;
            }

            let mu = it.s.dot(&it.z) / self.m as f64;

            // Predictor (affine scaling) direction.
            let rsz = it.s.component_mul(&it.z);
            let (_, _, dz_a, ds_a) = self.direction(&factor, &it, &res, &rsz);
            let alpha_a = max_step(&it.s, &ds_a).min(max_step(&it.z, &dz_a));
            let mu_aff = (&it.s + &ds_a * alpha_a).dot(&(&it.z + &dz_a * alpha_a)) / self.m as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

            // Corrector with centering.
            let rsz = rsz + ds_a.component_mul(&dz_a) - DVector::from_element(self.m, sigma * mu);
            let (dx, dy, dz, ds) = self.direction(&factor, &it, &res, &rsz);
            let alpha = (0.99 * max_step(&it.s, &ds).min(max_step(&it.z, &dz))).min(1.0);

            it.x += &dx * alpha;
            it.y += &dy * alpha;
            it.z += &dz * alpha;
            it.s += &ds * alpha;
            // Keep the iterate strictly interior.
            it.s.apply(|v| *v = v.max(1e-300));
            it.z.apply(|v| *v = v.max(1e-300));
        }

        let res = self.residuals(&it);
        if res.scaled.max() <= tol {
            return Ok(self.finish_optimal(it, self.settings.max_iterations, res.scaled));
        }
        if self.diverging(&it, &res, data_scale) {
            let (row, violation) = self.most_violated(&it);
            return Err(QpError::Infeasible { row, violation });
        }
        let sol = self.finish(
            it,
            QpStatus::IterationLimit,
            self.settings.max_iterations,
            res.scaled,
        );
        Err(QpError::IterationLimit(Box::new(sol)))
    }
}
