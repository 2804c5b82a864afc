//! Stencil and λ weights against an exact rational Vandermonde solve.

use cubestrat::{lambda_coeffs, univariate_weights};
use num_rational::BigRational;

fn q(n: i64) -> BigRational {
    BigRational::from_integer(n.into())
}

/// Solves `Σ_j x_j nodes_j^i = rhs_i`, `i = 0..l`, by Gauss-Jordan elimination.
fn solve_vandermonde(nodes: &[i64], rhs: &[BigRational]) -> Vec<BigRational> {
    let l = nodes.len();
    let mut m: Vec<Vec<BigRational>> = (0..l)
        .map(|i| {
            let mut row: Vec<BigRational> = nodes.iter().map(|&x| (0..i).fold(q(1), |acc, _| acc * q(x))).collect();
            row.push(rhs[i].clone());
            row
        })
        .collect();
    for col in 0..l {
        let pivot = (col..l).find(|&r| m[r][col] != q(0)).expect("nodes are distinct");
        m.swap(col, pivot);
        let p = m[col][col].clone();
        for x in m[col].iter_mut() {
            *x = &*x / &p;
        }
        for r in 0..l {
            if r != col && m[r][col] != q(0) {
                let factor = m[r][col].clone();
                let pivot_row = m[col].clone();
                for (x, p) in m[r].iter_mut().zip(&pivot_row) {
                    *x = &*x - &factor * p;
                }
            }
        }
    }
    m.into_iter().map(|row| row[l].clone()).collect()
}

fn to_f64(x: &BigRational) -> f64 {
    let n: f64 = x.numer().to_string().parse().unwrap();
    let d: f64 = x.denom().to_string().parse().unwrap();
    n / d
}

#[test]
fn finite_difference_weights_match_rational_solve() {
    for l in 2..=9usize {
        for start in -(l as i64)..=0 {
            let nodes: Vec<i64> = (start..start + l as i64).collect();
            for a in 1..l {
                let mut rhs = vec![q(0); l];
                rhs[a] = (1..=a as i64).map(q).fold(q(1), |acc, x| acc * x);
                let want = solve_vandermonde(&nodes, &rhs);
                let got = univariate_weights(&nodes, a).unwrap();
                for (g, w) in got.weights.iter().zip(&want) {
                    let w = to_f64(w);
                    assert!((g - w).abs() <= 1e-15 * w.abs().max(1.0), "nodes {nodes:?} a={a}: {g} vs {w}");
                }
            }
        }
    }
}

#[test]
fn scattered_nodes() {
    let nodes = [-3i64, -1, 0, 2, 5];
    let mut rhs = vec![q(0); 5];
    rhs[2] = q(2);
    let want = solve_vandermonde(&nodes, &rhs);
    let got = univariate_weights(&nodes, 2).unwrap();
    for (g, w) in got.weights.iter().zip(&want) {
        assert!((g - to_f64(w)).abs() < 1e-15);
    }
}

#[test]
fn lambda_weights_match_rational_solve() {
    for r in 1..=12usize {
        let lc = lambda_coeffs(r);
        let mut rhs = vec![q(0); r];
        rhs[0] = q(1);
        let want = solve_vandermonde(&lc.lambdas, &rhs);
        for (g, w) in lc.gammas.iter().zip(&want) {
            let w = to_f64(w);
            assert!((g - w).abs() <= 1e-14 * w.abs(), "r={r}: {g} vs {w}");
        }
    }
}

#[test]
fn large_orders_stay_finite() {
    for r in [20usize, 40, 64] {
        let lc = lambda_coeffs(r);
        assert!(lc.gammas.iter().all(|g| g.is_finite()));
        let sum: f64 = lc.gammas.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6 * lc.gammas.iter().map(|g| g.abs()).sum::<f64>());
    }
}
