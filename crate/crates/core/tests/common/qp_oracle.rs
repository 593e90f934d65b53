//! Independent QP oracle: accelerated projected gradient on the dual.
//!
//! Equalities are eliminated through a null-space basis, every inequality and
//! finite bound becomes a dual variable `y >= 0`, and the dual is minimised by
//! FISTA with adaptive restart. The optimal value follows from strong duality.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use visforce::qp::QpProblem;

/// Random strictly convex problem that is feasible by construction.
pub fn random_problem(rng: &mut impl Rng, n: usize) -> QpProblem {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let q = m.transpose() * &m + DMatrix::identity(n, n) * 0.5;
    let c = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let x_feasible = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));

    let m_eq = rng.gen_range(0..n.min(4));
    let a_eq = DMatrix::from_fn(m_eq, n, |_, _| rng.gen_range(-1.0..1.0));
    let b_eq = &a_eq * &x_feasible;

    let m_in = rng.gen_range(0..=4);
    let a_in = DMatrix::from_fn(m_in, n, |_, _| rng.gen_range(-1.0..1.0));
    let slack = DVector::from_fn(m_in, |_, _| {
        if rng.gen_bool(0.3) {
            0.0
        } else {
            rng.gen_range(0.0..0.5)
        }
    });
    let b_in = &a_in * &x_feasible + slack;

    let lb = DVector::from_fn(n, |i, _| {
        if rng.gen_bool(0.2) {
            f64::NEG_INFINITY
        } else {
            x_feasible[i] - rng.gen_range(0.0..1.0)
        }
    });
    let ub = DVector::from_fn(n, |i, _| {
        if rng.gen_bool(0.2) {
            f64::INFINITY
        } else {
            x_feasible[i] + rng.gen_range(0.0..1.0)
        }
    });
    QpProblem {
        q,
        c,
        a_eq,
        b_eq,
        a_in,
        b_in,
        lb,
        ub,
    }
}

/// Optimal objective value of `p` (assumed feasible, Q positive definite).
pub fn optimal_value(p: &QpProblem) -> f64 {
    let n = p.n();

    // null-space basis of Aeq and a particular solution
    let (u_p, basis) = if p.a_eq.nrows() == 0 {
        (DVector::zeros(n), DMatrix::identity(n, n))
    } else {
        let ata = p.a_eq.transpose() * &p.a_eq;
        let eig = SymmetricEigen::new(ata);
        let cols: Vec<DVector<f64>> = (0..n)
            .filter(|&i| eig.eigenvalues[i].abs() < 1e-10)
            .map(|i| eig.eigenvectors.column(i).into_owned())
            .collect();
        let aat = &p.a_eq * p.a_eq.transpose();
        let y = aat.lu().solve(&p.b_eq).expect("full row rank");
        let basis = if cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        (p.a_eq.transpose() * y, basis)
    };

    // inequality rows g·u <= h
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for i in 0..p.a_in.nrows() {
        rows.push(p.a_in.row(i).transpose());
        rhs.push(p.b_in[i]);
    }
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        if p.ub[j].is_finite() {
            rows.push(e.clone());
            rhs.push(p.ub[j]);
        }
        if p.lb[j].is_finite() {
            rows.push(-e);
            rhs.push(-p.lb[j]);
        }
    }

    let f_p = p.objective(&u_p);
    let k = basis.ncols();
    if k == 0 {
        return f_p;
    }
    let h = basis.transpose() * &p.q * &basis;
    let g = basis.transpose() * (&p.q * &u_p + &p.c);
    let h_inv = h.clone().try_inverse().expect("reduced Hessian is PD");
    if rows.is_empty() {
        return f_p - 0.5 * g.dot(&(&h_inv * &g));
    }
    let m = rows.len();
    let b = DMatrix::from_fn(m, n, |i, j| rows[i][j]) * &basis;
    let d = DVector::from_fn(m, |i, _| rhs[i] - rows[i].dot(&u_p));

    // D(y) = ½ yᵀMy + yᵀr + ½ gᵀH⁻¹g, minimised over y >= 0
    let mm = &b * &h_inv * b.transpose();
    let r = &d + &b * &h_inv * &g;
    let konst = 0.5 * g.dot(&(&h_inv * &g));
    let lipschitz = SymmetricEigen::new(mm.clone()).eigenvalues.max().max(1e-12);
    let step = 1.0 / lipschitz;
    let dual = |y: &DVector<f64>| 0.5 * y.dot(&(&mm * y)) + y.dot(&r) + konst;

    let mut y = DVector::zeros(m);
    let mut z = y.clone();
    let mut t = 1.0f64;
    for _ in 0..2_000_000 {
        let grad = &mm * &z + &r;
        let y_next = (&z - grad * step).map(|v| v.max(0.0));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let delta = &y_next - &y;
        // restart momentum when it points uphill
        let uphill = (&z - &y_next).dot(&delta) > 0.0;
        if uphill {
            z = y_next.clone();
            t = 1.0;
        } else {
            z = &y_next + &delta * ((t - 1.0) / t_next);
            t = t_next;
        }
        y = y_next;
        if delta.amax() < 1e-14 {
            break;
        }
    }
    f_p - dual(&y)
}
