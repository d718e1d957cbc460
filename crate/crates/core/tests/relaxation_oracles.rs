//! The relaxation engine against two independent references: a textbook
//! dense tableau simplex with Bland's rule for LPs, and exhaustive KKT
//! active-set enumeration for small strictly convex QPs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use windcf::problem::{LinExpr, MiqpProblem, Sense};
use windcf::solver::{solve_relaxation, RelaxStatus};

#[derive(Debug, PartialEq)]
enum Textbook {
    Optimal(f64),
    Unbounded,
}

/// min c x  s.t.  A x <= b,  x >= 0, with b >= 0 so the slack basis is
/// feasible. Plain tableau, Bland's rule.
fn textbook_simplex(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Textbook {
    let m = a.len();
    let n = c.len();
    let w = n + m + 1;
    let mut t = vec![vec![0.0; w]; m + 1];
    for i in 0..m {
        t[i][..n].copy_from_slice(&a[i]);
        t[i][n + i] = 1.0;
        t[i][w - 1] = b[i];
    }
    t[m][..n].copy_from_slice(c);
    let mut basis: Vec<usize> = (n..n + m).collect();
    loop {
        let Some(q) = (0..n + m).find(|&j| t[m][j] < -1e-12) else {
            return Textbook::Optimal(-t[m][w - 1]);
        };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            if t[i][q] > 1e-12 {
                let ratio = t[i][w - 1] / t[i][q];
                match leave {
                    Some((r, best)) if ratio > best + 1e-12 || (ratio >= best - 1e-12 && basis[i] > basis[r]) => {}
                    _ => leave = Some((i, ratio)),
                }
            }
        }
        let Some((r, _)) = leave else {
            return Textbook::Unbounded;
        };
        let piv = t[r][q];
        for v in t[r].iter_mut() {
            *v /= piv;
        }
        for i in 0..=m {
            if i != r {
                let f = t[i][q];
                if f != 0.0 {
                    for j in 0..w {
                        t[i][j] -= f * t[r][j];
                    }
                }
            }
        }
        basis[r] = q;
    }
}

#[test]
fn lps_match_textbook_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut unbounded = 0;
    for case in 0..50 {
        let n = rng.random_range(1..=10);
        let m = rng.random_range(1..=8);
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-5..=5) as f64).collect();
        let a: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(-3..=6) as f64).collect()).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(0..=20) as f64).collect();
        let want = textbook_simplex(&c, &a, &b);

        let mut p = MiqpProblem::new();
        let x: Vec<usize> = (0..n).map(|j| p.add_continuous(format!("x{j}"), 0.0, f64::INFINITY)).collect();
        for j in 0..n {
            p.add_objective_term(x[j], c[j]);
        }
        for i in 0..m {
            let mut e = LinExpr::default();
            for j in 0..n {
                e.add_term(x[j], a[i][j]);
            }
            p.add_constraint(format!("r{i}"), e, Sense::Le, b[i]);
        }
        let got = solve_relaxation(&p).unwrap();
        match want {
            Textbook::Optimal(v) => {
                assert_eq!(got.status, RelaxStatus::Optimal, "case {case}");
                assert!((got.objective - v).abs() <= 1e-7 * v.abs().max(1.0), "case {case}: {} vs {v}", got.objective);
                assert!(p.max_violation(got.x.as_ref().unwrap()) <= 1e-7);
            }
            Textbook::Unbounded => {
                unbounded += 1;
                assert_eq!(got.status, RelaxStatus::Unbounded, "case {case}");
            }
        }
    }
    assert!(unbounded < 50);
}

/// Minimum of a strictly convex separable QP over `A x <= b` by trying
/// every active set of at most `n` rows.
fn kkt_enumeration(q: &[f64], g: &[f64], a: &[Vec<f64>], b: &[f64]) -> Option<f64> {
    let n = q.len();
    let m = a.len();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << m) {
        let w: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if w.len() > n {
            continue;
        }
        let k = w.len();
        let mut kkt = DMatrix::<f64>::zeros(n + k, n + k);
        let mut rhs = DVector::<f64>::zeros(n + k);
        for j in 0..n {
            kkt[(j, j)] = 2.0 * q[j];
            rhs[j] = -g[j];
        }
        for (r, &i) in w.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = a[i][j];
                kkt[(j, n + r)] = a[i][j];
            }
            rhs[n + r] = b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let x: Vec<f64> = (0..n).map(|j| sol[j]).collect();
        let feasible = (0..m).all(|i| (0..n).map(|j| a[i][j] * x[j]).sum::<f64>() <= b[i] + 1e-9);
        if feasible {
            let obj: f64 = (0..n).map(|j| q[j] * x[j] * x[j] + g[j] * x[j]).sum();
            best = Some(best.map_or(obj, |v: f64| v.min(obj)));
        }
    }
    best
}

#[test]
fn strictly_convex_qps_match_kkt_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let n = rng.random_range(1..=3);
        let m = rng.random_range(1..=6);
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut a: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut b: Vec<f64> = a
            .iter()
            .map(|row| row.iter().zip(&x0).map(|(r, x)| r * x).sum::<f64>() + rng.random_range(0.0..1.0))
            .collect();
        // Box rows so the enumeration sees the same region.
        for j in 0..n {
            let mut up = vec![0.0; n];
            up[j] = 1.0;
            a.push(up);
            b.push(5.0);
            let mut down = vec![0.0; n];
            down[j] = -1.0;
            a.push(down);
            b.push(5.0);
        }
        let want = kkt_enumeration(&q, &g, &a, &b).expect("x0 is feasible");

        let mut p = MiqpProblem::new();
        let x: Vec<usize> =
            (0..n).map(|j| p.add_continuous(format!("x{j}"), f64::NEG_INFINITY, f64::INFINITY)).collect();
        for j in 0..n {
            p.quad[x[j]] = q[j];
            p.linear[x[j]] = g[j];
        }
        for (i, row) in a.iter().enumerate() {
            let mut e = LinExpr::default();
            for j in 0..n {
                e.add_term(x[j], row[j]);
            }
            p.add_constraint(format!("r{i}"), e, Sense::Le, b[i]);
        }
        let got = solve_relaxation(&p).unwrap();
        assert_eq!(got.status, RelaxStatus::Optimal, "case {case}");
        assert!((got.objective - want).abs() <= 1e-7 * want.abs().max(1.0), "case {case}: {} vs {want}", got.objective);
    }
}
