//! Dense convex QP solver (primal active-set).
//!
//! ```text
//!     minimize     ½ uᵀQu + cᵀu
//!     subject to   Aeq u  = beq
//!                  Ain u <= bin
//!                  lb <= u <= ub
//! ```
//!
//! A feasible start is found by solving an auxiliary problem that minimises the
//! largest constraint violation with the same active-set engine. Phase two then
//! walks the working set until all inequality multipliers are non-negative.
//! Problems here are tiny (n ≤ ~15), so every KKT system is solved densely.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

/// Equality and inequality feasibility tolerance.
pub const FEAS_TOL: f64 = 1e-8;
/// KKT residual bound for solutions reported optimal.
pub const KKT_TOL: f64 = 1e-6;
/// Added to the diagonal of `Q` when it is not numerically positive definite.
pub const REGULARIZATION: f64 = 1e-9;

const SYMMETRY_TOL: f64 = 1e-10;
const PHASE1_REG: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    /// Problem with `n` variables, no constraints and infinite bounds.
    pub fn unconstrained(q: DMatrix<f64>, c: DVector<f64>) -> Self {
        let n = c.len();
        QpProblem {
            q,
            c,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.q * u)) + self.c.dot(u)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let bad = |what: &str| Err(Error::InvalidArgument(format!("qp: {what}")));
        if self.q.nrows() != n || self.q.ncols() != n {
            return bad("Q must be n×n");
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality block dimensions disagree");
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return bad("inequality block dimensions disagree");
        }
        if self.lb.len() != n || self.ub.len() != n {
            return bad("bounds must have n entries");
        }
        if (&self.q - self.q.transpose()).amax() > SYMMETRY_TOL {
            return bad("Q is not symmetric");
        }
        if self.lb.iter().zip(self.ub.iter()).any(|(l, u)| !(l <= u)) {
            return bad("lower bound exceeds upper bound");
        }
        Ok(())
    }

    /// Largest violation over all constraints, zero when feasible.
    pub fn max_violation(&self, u: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        if self.b_eq.len() > 0 {
            v = v.max((&self.a_eq * u - &self.b_eq).amax());
        }
        for (r, b) in (&self.a_in * u).iter().zip(self.b_in.iter()) {
            v = v.max(r - b);
        }
        for i in 0..self.n() {
            v = v.max(self.lb[i] - u[i]).max(u[i] - self.ub[i]);
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Lagrange multipliers, all with the sign convention
/// `Qu + c + Aeqᵀλ + Ainᵀμ + ν_ub − ν_lb = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Multipliers {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Multipliers {
    pub fn zeros(p: &QpProblem) -> Self {
        Multipliers {
            eq: DVector::zeros(p.b_eq.len()),
            ineq: DVector::zeros(p.b_in.len()),
            lower: DVector::zeros(p.n()),
            upper: DVector::zeros(p.n()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    /// Active inequality constraints. Index `k < m_in` is row `k` of `Ain`;
    /// `m_in + j` is the upper bound of variable `j`; `m_in + n + j` its lower bound.
    pub active_set: Vec<usize>,
    pub multipliers: Multipliers,
    pub iterations: usize,
}

impl QpSolution {
    pub fn objective(&self, p: &QpProblem) -> f64 {
        p.objective(&self.u)
    }
}

/// Max of the stationarity, primal feasibility, dual feasibility and complementarity residuals.
pub fn kkt_residual(p: &QpProblem, u: &DVector<f64>, m: &Multipliers) -> f64 {
    let mut grad = &p.q * u + &p.c;
    if m.eq.len() > 0 {
        grad += p.a_eq.transpose() * &m.eq;
    }
    if m.ineq.len() > 0 {
        grad += p.a_in.transpose() * &m.ineq;
    }
    grad += &m.upper - &m.lower;
    let mut r = grad.norm();

    r = r.max(p.max_violation(u));

    let slack_in = &p.b_in - &p.a_in * u;
    for (mu, s) in m.ineq.iter().zip(slack_in.iter()) {
        r = r.max(-mu);
        if *mu != 0.0 {
            r = r.max((mu * s).abs());
        }
    }
    for i in 0..p.n() {
        r = r.max(-m.lower[i]).max(-m.upper[i]);
        if m.lower[i] != 0.0 {
            r = r.max((m.lower[i] * (u[i] - p.lb[i])).abs());
        }
        if m.upper[i] != 0.0 {
            r = r.max((m.upper[i] * (p.ub[i] - u[i])).abs());
        }
    }
    r
}

/// One line of the optional iteration trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub phase: u8,
    pub iteration: usize,
    pub objective: f64,
    /// Norm of the equality-constrained step computed at this iteration.
    pub step_norm: f64,
    pub active_set_size: usize,
}

/// Cold-start solve.
pub fn solve(p: &QpProblem, max_iter: usize) -> Result<QpSolution> {
    ActiveSetSolver::new(max_iter).solve(p)
}

/// Active-set solver that remembers the previous working set for warm starts.
#[derive(Clone, Debug)]
pub struct ActiveSetSolver {
    pub max_iter: usize,
    /// Record an [`IterationRecord`] per iteration into `trace`.
    pub record_trace: bool,
    pub trace: Vec<IterationRecord>,
    warm: Option<WarmStart>,
}

#[derive(Clone, Debug)]
struct WarmStart {
    n: usize,
    m_in: usize,
    working: Vec<usize>,
}

impl Default for ActiveSetSolver {
    fn default() -> Self {
        Self::new(200)
    }
}

impl ActiveSetSolver {
    pub fn new(max_iter: usize) -> Self {
        ActiveSetSolver {
            max_iter,
            record_trace: false,
            trace: Vec::new(),
            warm: None,
        }
    }

    pub fn reset_warm_start(&mut self) {
        self.warm = None;
    }

    /// Writes the trace as text, one line per iteration.
    pub fn write_trace(&self, out: &mut impl Write) -> std::io::Result<()> {
        for r in &self.trace {
            writeln!(
                out,
                "phase={} iter={} objective={:.12e} residual={:.3e} active={}",
                r.phase, r.iteration, r.objective, r.step_norm, r.active_set_size
            )?;
        }
        Ok(())
    }

    pub fn solve(&mut self, p: &QpProblem) -> Result<QpSolution> {
        p.validate()?;
        self.trace.clear();
        let n = p.n();
        let hessian = regularized_hessian(&p.q)?;
        let form = StandardForm::from_problem(p);

        let Some(eq) = form.independent_equalities() else {
            return Ok(self.infeasible(p, DVector::zeros(n)));
        };

        let mut engine = Engine {
            h: hessian.clone(),
            g: p.c.clone(),
            eq_rows: eq.rows.clone(),
            eq_rhs: eq.rhs.clone(),
            in_rows: form.in_rows.clone(),
            in_rhs: form.in_rhs.clone(),
            max_iter: self.max_iter,
            trace: self.record_trace.then(Vec::new),
            phase: 2,
        };

        let start = self
            .warm_start_point(&engine, &form)
            .map(Ok)
            .unwrap_or_else(|| self.phase_one(&engine, &eq, &form, n))?;
        let (x0, w0) = match start {
            Some(s) => s,
            None => {
                let x = eq.particular.clone();
                return Ok(self.infeasible(p, x));
            }
        };

        let mut out = engine.run(x0, w0);
        for j in 0..n {
            if p.lb[j] == p.ub[j] {
                out.x[j] = p.lb[j];
            }
        }
        if let Some(t) = engine.trace.take() {
            self.trace.extend(t);
        }
        self.warm = Some(WarmStart {
            n,
            m_in: p.b_in.len(),
            working: out.working.clone(),
        });

        let multipliers = form.map_multipliers(p, &eq, &out);
        let active_set = form.public_active_set(&out.working);
        let kkt = kkt_residual(p, &out.x, &multipliers);
        let status = if out.converged {
            QpStatus::Optimal
        } else {
            QpStatus::MaxIter
        };
        Ok(QpSolution {
            u: out.x,
            status,
            kkt_residual: kkt,
            active_set,
            multipliers,
            iterations: out.iterations,
        })
    }

    fn infeasible(&mut self, p: &QpProblem, u: DVector<f64>) -> QpSolution {
        self.warm = None;
        let multipliers = Multipliers::zeros(p);
        let kkt = kkt_residual(p, &u, &multipliers);
        QpSolution {
            u,
            status: QpStatus::Infeasible,
            kkt_residual: kkt,
            active_set: Vec::new(),
            multipliers,
            iterations: 0,
        }
    }

    /// Reuses the previous working set: solve with it held active and accept
    /// the point if it satisfies every other constraint.
    fn warm_start_point(
        &self,
        engine: &Engine,
        form: &StandardForm,
    ) -> Option<Option<(DVector<f64>, Vec<usize>)>> {
        let warm = self.warm.as_ref()?;
        if warm.n != form.n || warm.m_in != form.m_in || warm.working.is_empty() {
            return None;
        }
        let working: Vec<usize> = warm
            .working
            .iter()
            .copied()
            .filter(|&k| k < engine.in_rows.len())
            .collect();
        let x = engine.equality_qp_point(&working)?;
        let feasible = engine
            .in_rows
            .iter()
            .zip(engine.in_rhs.iter())
            .all(|(row, b)| row.dot(&x) - b <= 1e-10 * (1.0 + b.abs()));
        let eq_ok = engine
            .eq_rows
            .iter()
            .zip(engine.eq_rhs.iter())
            .all(|(row, b)| (row.dot(&x) - b).abs() <= 1e-10 * (1.0 + b.abs()));
        (feasible && eq_ok).then_some(Some((x, working)))
    }

    /// Minimises the largest inequality violation `t` subject to the equalities.
    fn phase_one(
        &mut self,
        engine: &Engine,
        eq: &Equalities,
        form: &StandardForm,
        n: usize,
    ) -> Result<Option<(DVector<f64>, Vec<usize>)>> {
        let x0 = eq.particular.clone();
        let t0 = engine
            .in_rows
            .iter()
            .zip(engine.in_rhs.iter())
            .map(|(row, b)| row.dot(&x0) - b)
            .fold(0.0f64, f64::max);
        if t0 <= 1e-12 {
            let working = engine.active_at(&x0, &[], 1e-12);
            return Ok(Some((x0, working)));
        }

        // variables (u, t): rows g·u − t ≤ h plus −t ≤ 0
        let m = engine.in_rows.len();
        let lift = |row: &DVector<f64>, tcoef: f64| {
            let mut r = DVector::zeros(n + 1);
            r.rows_mut(0, n).copy_from(row);
            r[n] = tcoef;
            r
        };
        let mut in_rows: Vec<DVector<f64>> = engine.in_rows.iter().map(|r| lift(r, -1.0)).collect();
        let mut in_rhs = engine.in_rhs.clone();
        in_rows.push(lift(&DVector::zeros(n), -1.0));
        in_rhs.push(0.0);
        let mut g = DVector::zeros(n + 1);
        g[n] = 1.0;
        // pull u towards x0 so the auxiliary problem is strictly convex
        g.rows_mut(0, n).copy_from(&(-&x0 * PHASE1_REG));
        let mut aux = Engine {
            h: DMatrix::identity(n + 1, n + 1) * PHASE1_REG,
            g,
            eq_rows: eq.rows.iter().map(|r| lift(r, 0.0)).collect(),
            eq_rhs: eq.rhs.clone(),
            in_rows,
            in_rhs,
            max_iter: self.max_iter.max(4 * (n + m + 1)),
            trace: self.record_trace.then(Vec::new),
            phase: 1,
        };
        let mut start = DVector::zeros(n + 1);
        start.rows_mut(0, n).copy_from(&x0);
        start[n] = t0;
        let w0 = aux.active_at(&start, &[], 1e-12 * (1.0 + t0));
        let out = aux.run(start, w0);
        if let Some(t) = aux.trace.take() {
            self.trace.extend(t);
        }
        let t = out.x[n];
        let scale = 1.0 + form.rhs_scale();
        if t > 1e-9 * scale {
            return Ok(None);
        }
        let x = out.x.rows(0, n).into_owned();
        let working = engine.active_at(&x, &[], 1e-9 * scale);
        Ok(Some((x, working)))
    }
}

fn regularized_hessian(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    if n == 0 {
        return Ok(q.clone());
    }
    let sym = (q + q.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    let scale = sym.amax().max(1.0);
    if min < -1e-8 * scale {
        return Err(Error::InvalidArgument(format!(
            "qp: Q is not positive semidefinite (smallest eigenvalue {min:.3e})"
        )));
    }
    if min <= 1e-12 * scale {
        Ok(sym + DMatrix::identity(n, n) * REGULARIZATION)
    } else {
        Ok(sym)
    }
}

/// Problem rewritten as equality rows and `row·u ≤ rhs` inequality rows.
///
/// Inequality indices: `Ain` rows first, then finite upper bounds, then finite
/// lower bounds. Variables with `lb == ub` become equality rows.
struct StandardForm {
    n: usize,
    m_in: usize,
    eq_rows: Vec<DVector<f64>>,
    eq_rhs: Vec<f64>,
    /// Origin of each equality row.
    eq_source: Vec<EqSource>,
    in_rows: Vec<DVector<f64>>,
    in_rhs: Vec<f64>,
    in_source: Vec<InSource>,
}

#[derive(Clone, Copy, Debug)]
enum EqSource {
    Row(usize),
    Fixed(usize),
}

#[derive(Clone, Copy, Debug)]
enum InSource {
    Row(usize),
    Upper(usize),
    Lower(usize),
}

struct Equalities {
    rows: Vec<DVector<f64>>,
    rhs: Vec<f64>,
    /// Index into `StandardForm::eq_rows` of each kept row.
    kept: Vec<usize>,
    /// Minimum-norm solution of the equality system.
    particular: DVector<f64>,
}

impl StandardForm {
    fn from_problem(p: &QpProblem) -> Self {
        let n = p.n();
        let mut f = StandardForm {
            n,
            m_in: p.b_in.len(),
            eq_rows: Vec::new(),
            eq_rhs: Vec::new(),
            eq_source: Vec::new(),
            in_rows: Vec::new(),
            in_rhs: Vec::new(),
            in_source: Vec::new(),
        };
        for i in 0..p.a_eq.nrows() {
            f.eq_rows.push(p.a_eq.row(i).transpose());
            f.eq_rhs.push(p.b_eq[i]);
            f.eq_source.push(EqSource::Row(i));
        }
        let fixed: Vec<bool> = (0..n).map(|j| p.lb[j] == p.ub[j]).collect();
        for j in (0..n).filter(|&j| fixed[j]) {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            f.eq_rows.push(e);
            f.eq_rhs.push(p.lb[j]);
            f.eq_source.push(EqSource::Fixed(j));
        }
        for i in 0..p.a_in.nrows() {
            f.in_rows.push(p.a_in.row(i).transpose());
            f.in_rhs.push(p.b_in[i]);
            f.in_source.push(InSource::Row(i));
        }
        for j in (0..n).filter(|&j| !fixed[j] && p.ub[j].is_finite()) {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            f.in_rows.push(e);
            f.in_rhs.push(p.ub[j]);
            f.in_source.push(InSource::Upper(j));
        }
        for j in (0..n).filter(|&j| !fixed[j] && p.lb[j].is_finite()) {
            let mut e = DVector::zeros(n);
            e[j] = -1.0;
            f.in_rows.push(e);
            f.in_rhs.push(-p.lb[j]);
            f.in_source.push(InSource::Lower(j));
        }
        f
    }

    fn rhs_scale(&self) -> f64 {
        self.eq_rhs
            .iter()
            .chain(self.in_rhs.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Drops linearly dependent equality rows; `None` if the system is inconsistent.
    fn independent_equalities(&self) -> Option<Equalities> {
        let n = self.n;
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut kept = Vec::new();
        for (i, row) in self.eq_rows.iter().enumerate() {
            let mut r = row.clone();
            for b in &basis {
                let proj = r.dot(b);
                r -= b * proj;
            }
            let norm = r.norm();
            if norm > 1e-10 * row.norm().max(1.0) {
                basis.push(r / norm);
                kept.push(i);
            }
        }
        let rows: Vec<DVector<f64>> = kept.iter().map(|&i| self.eq_rows[i].clone()).collect();
        let rhs: Vec<f64> = kept.iter().map(|&i| self.eq_rhs[i]).collect();
        let particular = if rows.is_empty() {
            DVector::zeros(n)
        } else {
            let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
            let aat = &a * a.transpose();
            let y = aat.lu().solve(&DVector::from_vec(rhs.clone()))?;
            a.transpose() * y
        };
        let scale = 1.0 + self.eq_rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let consistent = self
            .eq_rows
            .iter()
            .zip(self.eq_rhs.iter())
            .all(|(row, b)| (row.dot(&particular) - b).abs() <= 1e-9 * scale);
        consistent.then_some(Equalities {
            rows,
            rhs,
            kept,
            particular,
        })
    }

    fn public_active_set(&self, working: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = working
            .iter()
            .map(|&k| match self.in_source[k] {
                InSource::Row(i) => i,
                InSource::Upper(j) => self.m_in + j,
                InSource::Lower(j) => self.m_in + self.n + j,
            })
            .collect();
        out.sort_unstable();
        out
    }

    fn map_multipliers(&self, p: &QpProblem, eq: &Equalities, out: &EngineOutput) -> Multipliers {
        let mut m = Multipliers::zeros(p);
        for (pos, &k) in eq.kept.iter().enumerate() {
            let lam = out.eq_multipliers[pos];
            match self.eq_source[k] {
                EqSource::Row(i) => m.eq[i] = lam,
                EqSource::Fixed(j) => {
                    if lam >= 0.0 {
                        m.upper[j] = lam;
                    } else {
                        m.lower[j] = -lam;
                    }
                }
            }
        }
        for (&k, &mu) in out.working.iter().zip(out.in_multipliers.iter()) {
            match self.in_source[k] {
                InSource::Row(i) => m.ineq[i] = mu,
                InSource::Upper(j) => m.upper[j] = mu,
                InSource::Lower(j) => m.lower[j] = mu,
            }
        }
        m
    }
}

struct EngineOutput {
    x: DVector<f64>,
    working: Vec<usize>,
    eq_multipliers: Vec<f64>,
    in_multipliers: Vec<f64>,
    converged: bool,
    iterations: usize,
}

/// Primal active-set iterations from a feasible point.
struct Engine {
    h: DMatrix<f64>,
    g: DVector<f64>,
    eq_rows: Vec<DVector<f64>>,
    eq_rhs: Vec<f64>,
    in_rows: Vec<DVector<f64>>,
    in_rhs: Vec<f64>,
    max_iter: usize,
    trace: Option<Vec<IterationRecord>>,
    phase: u8,
}

impl Engine {
    /// Inequalities within `tol` of active at `x`, greedily kept linearly
    /// independent of the equalities and of `seed`.
    fn active_at(&self, x: &DVector<f64>, seed: &[usize], tol: f64) -> Vec<usize> {
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let push = |row: &DVector<f64>, basis: &mut Vec<DVector<f64>>| -> bool {
            let mut r = row.clone();
            for b in basis.iter() {
                let proj = r.dot(b);
                r -= b * proj;
            }
            let norm = r.norm();
            if norm > 1e-9 * row.norm().max(1e-300) {
                basis.push(r / norm);
                true
            } else {
                false
            }
        };
        for row in &self.eq_rows {
            push(row, &mut basis);
        }
        let mut working = Vec::new();
        for &k in seed {
            if push(&self.in_rows[k], &mut basis) {
                working.push(k);
            }
        }
        for k in 0..self.in_rows.len() {
            if working.contains(&k) {
                continue;
            }
            let slack = self.in_rhs[k] - self.in_rows[k].dot(x);
            if slack.abs() <= tol && push(&self.in_rows[k], &mut basis) {
                working.push(k);
            }
        }
        working
    }

    /// Solves the KKT system `[H Aᵀ; A 0][p; λ] = [−grad; 0]` for the working set.
    fn kkt_step(&self, grad: &DVector<f64>, working: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.g.len();
        let m = self.eq_rows.len() + working.len();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&self.h);
        let rows = self.eq_rows.iter().chain(working.iter().map(|&i| &self.in_rows[i]));
        for (r, row) in rows.enumerate() {
            for j in 0..n {
                k[(n + r, j)] = row[j];
                k[(j, n + r)] = row[j];
            }
        }
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-grad));
        let sol = k.lu().solve(&rhs)?;
        Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
    }

    /// Minimiser of the objective with the equalities and `working` held tight.
    fn equality_qp_point(&self, working: &[usize]) -> Option<DVector<f64>> {
        let n = self.g.len();
        let m = self.eq_rows.len() + working.len();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&self.h);
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&self.g));
        let rows = self
            .eq_rows
            .iter()
            .zip(self.eq_rhs.iter())
            .chain(working.iter().map(|&i| (&self.in_rows[i], &self.in_rhs[i])));
        for (r, (row, b)) in rows.enumerate() {
            for j in 0..n {
                k[(n + r, j)] = row[j];
                k[(j, n + r)] = row[j];
            }
            rhs[n + r] = *b;
        }
        let sol = k.lu().solve(&rhs)?;
        let x = sol.rows(0, n).into_owned();
        x.iter().all(|v| v.is_finite()).then_some(x)
    }

    fn run(&mut self, mut x: DVector<f64>, mut working: Vec<usize>) -> EngineOutput {
        let n_eq = self.eq_rows.len();
        let mut iterations = 0;
        while iterations < self.max_iter {
            iterations += 1;
            let grad = &self.h * &x + &self.g;
            let Some((p, lam)) = self.kkt_step(&grad, &working) else {
                // Dependent working rows: drop the newest and retry.
                if working.pop().is_none() {
                    break;
                }
                continue;
            };
            let step_norm = p.norm();
            if let Some(t) = self.trace.as_mut() {
                t.push(IterationRecord {
                    phase: self.phase,
                    iteration: iterations,
                    objective: 0.5 * x.dot(&(&self.h * &x)) + self.g.dot(&x),
                    step_norm,
                    active_set_size: working.len(),
                });
            }

            if step_norm <= 1e-11 * (1.0 + x.norm()) {
                // Multipliers of the working inequalities.
                let mut worst: Option<(usize, f64)> = None;
                for (pos, _) in working.iter().enumerate() {
                    let mu = lam[n_eq + pos];
                    if mu < -1e-12 && worst.map_or(true, |(_, w)| mu < w) {
                        worst = Some((pos, mu));
                    }
                }
                match worst {
                    None => {
                        return EngineOutput {
                            eq_multipliers: lam.rows(0, n_eq).iter().copied().collect(),
                            in_multipliers: lam.rows(n_eq, working.len()).iter().copied().collect(),
                            x,
                            working,
                            converged: true,
                            iterations,
                        };
                    }
                    Some((pos, _)) => {
                        working.remove(pos);
                    }
                }
                continue;
            }

            let mut alpha = 1.0;
            let mut blocking = None;
            let pn = step_norm;
            for (k, (row, b)) in self.in_rows.iter().zip(self.in_rhs.iter()).enumerate() {
                if working.contains(&k) {
                    continue;
                }
                let ap = row.dot(&p);
                if ap > 1e-12 * row.norm() * pn {
                    let a = ((b - row.dot(&x)) / ap).max(0.0);
                    if a < alpha {
                        alpha = a;
                        blocking = Some(k);
                    }
                }
            }
            x += &p * alpha;
            if let Some(k) = blocking {
                working.push(k);
            }
        }

        let grad = &self.h * &x + &self.g;
        let (eq_m, in_m) = match self.kkt_step(&grad, &working) {
            Some((_, lam)) => (
                lam.rows(0, n_eq).iter().copied().collect(),
                lam.rows(n_eq, working.len()).iter().copied().collect(),
            ),
            None => (vec![0.0; n_eq], vec![0.0; working.len()]),
        };
        EngineOutput {
            x,
            working,
            eq_multipliers: eq_m,
            in_multipliers: in_m,
            converged: false,
            iterations,
        }
    }
}
