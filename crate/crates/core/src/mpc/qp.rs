//! Primal active-set solver for small dense convex QPs
//! `min 1/2 x'Hx + g'x  s.t.  A x <= b`, started from a feasible point.

use nalgebra::{DMatrix, DVector};

const TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Indices of constraints active at the solution (linearly independent).
    pub active: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

/// Solve the equality-constrained subproblem on working set `active`:
/// returns `(step, multipliers)` for `H p + A_w' lambda = -(H x + g)`,
/// `A_w p = 0`.
fn kkt_step(
    h: &DMatrix<f64>,
    grad: &DVector<f64>,
    a: &DMatrix<f64>,
    active: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let m = active.len();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    for (r, &i) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + r, c)] = a[(i, c)];
            kkt[(c, n + r)] = a[(i, c)];
        }
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-grad));
    let sol = kkt.lu().solve(&rhs)?;
    Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

/// Active-set iterations from the feasible start `x0`. Constraints violated
/// by `x0` beyond `1e-9` are treated as a programming error upstream; they are
/// simply never added to the working set.
pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x0: DVector<f64>,
    max_iter: usize,
) -> QpSolution {
    let mut x = x0;
    let mut active: Vec<usize> = Vec::new();
    for it in 0..max_iter {
        let grad = h * &x + g;
        let Some((p, lambda)) = kkt_step(h, &grad, a, &active) else {
            return QpSolution {
                x,
                active,
                iterations: it,
                converged: false,
            };
        };
        if p.amax() <= TOL * (1.0 + x.amax()) {
            // Stationary on the working set: check multiplier signs.
            let (worst, min_lambda) = lambda
                .iter()
                .enumerate()
                .fold((usize::MAX, 0.0), |acc, (k, &l)| if l < acc.1 { (k, l) } else { acc });
            if worst == usize::MAX || min_lambda >= -TOL {
                return QpSolution {
                    x,
                    active,
                    iterations: it,
                    converged: true,
                };
            }
            active.remove(worst);
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..a.nrows() {
            if active.contains(&i) {
                continue;
            }
            let ap = a.row(i).dot(&p.transpose());
            if ap > TOL {
                let slack = (b[i] - a.row(i).dot(&x.transpose())).max(0.0);
                let t = slack / ap;
                if t < alpha {
                    alpha = t;
                    blocking = Some(i);
                }
            }
        }
        x += alpha * &p;
        if let Some(i) = blocking {
            active.push(i);
        }
    }
    QpSolution {
        x,
        active,
        iterations: max_iter,
        converged: false,
    }
}

/// Feedback gain restricted to the tangent space of the active constraints:
/// solves `H K + A_w' M = -rhs`, `A_w K = 0`.
pub fn constrained_gain(
    h: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    a: &DMatrix<f64>,
    active: &[usize],
) -> Option<DMatrix<f64>> {
    let n = h.nrows();
    let m = active.len();
    if m == 0 {
        return h.clone().cholesky().map(|c| -c.solve(rhs));
    }
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    for (r, &i) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + r, c)] = a[(i, c)];
            kkt[(c, n + r)] = a[(i, c)];
        }
    }
    let mut full = DMatrix::zeros(n + m, rhs.ncols());
    full.view_mut((0, 0), (n, rhs.ncols())).copy_from(&(-rhs));
    let sol = kkt.lu().solve(&full)?;
    Some(sol.rows(0, n).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_minimum() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = DVector::from_vec(vec![-1.0, 1.0]);
        let a = DMatrix::zeros(0, 2);
        let b = DVector::zeros(0);
        let s = solve_qp(&h, &g, &a, &b, DVector::zeros(2), 20);
        let exact = h.clone().lu().solve(&(-&g)).unwrap();
        assert!(s.converged);
        assert!((s.x - exact).amax() < 1e-12);
    }

    #[test]
    fn box_constrained_matches_clamped_separable_solution() {
        // Separable objective: solution is the clamped unconstrained optimum.
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 2.0]));
        let g = DVector::from_vec(vec![-3.0, 8.0, -0.5]);
        let mut a = DMatrix::zeros(6, 3);
        let mut b = DVector::zeros(6);
        for i in 0..3 {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = 1.0;
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = 1.0;
        }
        let s = solve_qp(&h, &g, &a, &b, DVector::zeros(3), 50);
        assert!(s.converged);
        let expected = [1.0, -1.0, 0.25];
        for i in 0..3 {
            assert!((s.x[i] - expected[i]).abs() < 1e-12, "{:?}", s.x);
        }
        assert_eq!(s.active.len(), 2);
    }

    #[test]
    fn pyramid_projection_of_target() {
        // Closest point of a friction pyramid to a force outside it.
        let mu = 0.5;
        let h = DMatrix::identity(3, 3);
        let target = DVector::from_vec(vec![10.0, 0.0, 10.0]);
        let g = -&target;
        let a = DMatrix::from_row_slice(
            5,
            3,
            &[
                1.0, 0.0, -mu, -1.0, 0.0, -mu, 0.0, 1.0, -mu, 0.0, -1.0, -mu, 0.0, 0.0, 1.0,
            ],
        );
        let b = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 100.0]);
        let s = solve_qp(&h, &g, &a, &b, DVector::from_vec(vec![0.0, 0.0, 1.0]), 50);
        assert!(s.converged);
        // Projection onto the face fx = mu fz in the (x, z) plane.
        let n = nalgebra::Vector2::new(1.0, -mu).normalize();
        let t = nalgebra::Vector2::new(10.0, 10.0);
        let proj = t - n * n.dot(&t);
        assert!((s.x[0] - proj.x).abs() < 1e-10);
        assert!((s.x[2] - proj.y).abs() < 1e-10);
        assert!(s.x[1].abs() < 1e-12);
    }

    #[test]
    fn gain_respects_active_constraints() {
        let h = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let rhs = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, -1.0, 1.0, 0.5]);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let k = constrained_gain(&h, &rhs, &a, &[0]).unwrap();
        let along = a.clone() * &k;
        assert!(along.amax() < 1e-12);
    }
}
