//! Exact linear algebra over ℚ by fraction-free (Bareiss) elimination.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Zero};

use crate::expr::Q;

/// Row-echelon data from a fraction-free elimination of an integer matrix.
struct Echelon {
    rows: Vec<Vec<BigInt>>,
    pivots: Vec<usize>,
}

fn to_integer_row(row: &[Q]) -> Vec<BigInt> {
    let l = row.iter().fold(BigInt::one(), |acc, q| acc.lcm(q.denom()));
    row.iter().map(|q| (q * Q::from_integer(l.clone())).to_integer()).collect()
}

fn bareiss(mut m: Vec<Vec<BigInt>>, ncols: usize) -> Echelon {
    let nrows = m.len();
    let mut pivots = Vec::new();
    let mut prev = BigInt::one();
    let mut r = 0;
    for c in 0..ncols {
        if r == nrows {
            break;
        }
        let Some(p) = (r..nrows).find(|&i| !m[i][c].is_zero()) else {
            continue;
        };
        m.swap(r, p);
        for i in r + 1..nrows {
            for j in c + 1..m[i].len() {
                let v = &m[r][c] * &m[i][j] - &m[i][c] * &m[r][j];
                m[i][j] = v / &prev;
            }
            m[i][c] = BigInt::zero();
        }
        prev = m[r][c].clone();
        pivots.push(c);
        r += 1;
    }
    Echelon { rows: m, pivots }
}

/// Solve `a · x = b`. Returns `None` if inconsistent; free variables are 0.
pub fn solve(a: &[Vec<Q>], b: &[Q]) -> Option<Vec<Q>> {
    let ncols = a.first().map(Vec::len).unwrap_or(0);
    let aug: Vec<Vec<BigInt>> = a
        .iter()
        .zip(b)
        .map(|(row, bi)| {
            let mut r = row.clone();
            r.push(bi.clone());
            to_integer_row(&r)
        })
        .collect();
    let ech = bareiss(aug, ncols);
    let rank = ech.pivots.len();
    if ech.rows.iter().skip(rank).any(|r| !r[ncols].is_zero()) {
        return None;
    }
    let mut x = vec![Q::zero(); ncols];
    for (r, &c) in ech.pivots.iter().enumerate().rev() {
        let row = &ech.rows[r];
        let mut s = Q::from_integer(row[ncols].clone());
        for (j, xj) in x.iter().enumerate().skip(c + 1) {
            if !row[j].is_zero() {
                s -= Q::from_integer(row[j].clone()) * xj;
            }
        }
        x[c] = s / Q::from_integer(row[c].clone());
    }
    Some(x)
}

pub fn rank(a: &[Vec<Q>]) -> usize {
    let ncols = a.first().map(Vec::len).unwrap_or(0);
    let m = a.iter().map(|r| to_integer_row(r)).collect();
    bareiss(m, ncols).pivots.len()
}

/// Basis of the right null space of `a`.
pub fn nullspace(a: &[Vec<Q>], ncols: usize) -> Vec<Vec<Q>> {
    let m: Vec<Vec<BigInt>> = a.iter().map(|r| to_integer_row(r)).collect();
    let ech = bareiss(m, ncols);
    // Back-substitute to reduced form over ℚ.
    let rank = ech.pivots.len();
    let mut rows: Vec<Vec<Q>> = ech.rows[..rank]
        .iter()
        .map(|r| r.iter().map(|v| Q::from_integer(v.clone())).collect())
        .collect();
    for r in (0..rank).rev() {
        let c = ech.pivots[r];
        let p = rows[r][c].clone();
        for v in rows[r].iter_mut() {
            *v /= &p;
        }
        for k in 0..r {
            let f = rows[k][c].clone();
            if !f.is_zero() {
                for j in 0..ncols {
                    let d = &f * &rows[r][j];
                    rows[k][j] -= d;
                }
            }
        }
    }
    let mut out = Vec::new();
    for free in (0..ncols).filter(|c| !ech.pivots.contains(c)) {
        let mut v = vec![Q::zero(); ncols];
        v[free] = Q::one();
        for (r, &c) in ech.pivots.iter().enumerate() {
            v[c] = -rows[r][free].clone();
        }
        out.push(v);
    }
    out
}

/// Exact determinant.
pub fn det(a: &[Vec<Q>]) -> Q {
    let n = a.len();
    if n == 0 {
        return Q::one();
    }
    let mut m: Vec<Vec<Q>> = a.to_vec();
    let mut d = Q::one();
    for c in 0..n {
        let Some(p) = (c..n).find(|&i| !m[i][c].is_zero()) else {
            return Q::zero();
        };
        if p != c {
            m.swap(p, c);
            d = -d;
        }
        let piv = m[c][c].clone();
        d *= &piv;
        for i in c + 1..n {
            let f = &m[i][c] / &piv;
            if f.is_zero() {
                continue;
            }
            for j in c..n {
                let v = &f * &m[c][j];
                m[i][j] -= v;
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{q, qfrac};

    #[test]
    fn solves_small_system() {
        let a = vec![vec![q(2), q(1)], vec![q(1), q(3)]];
        let b = vec![q(3), q(5)];
        let x = solve(&a, &b).unwrap();
        assert_eq!(x, vec![qfrac(4, 5), qfrac(7, 5)]);
    }

    #[test]
    fn detects_inconsistency() {
        let a = vec![vec![q(1), q(1)], vec![q(2), q(2)]];
        assert!(solve(&a, &[q(1), q(3)]).is_none());
        assert_eq!(rank(&a), 1);
    }

    #[test]
    fn nullspace_is_annihilated() {
        let a = vec![vec![q(1), q(2), q(3)], vec![q(2), q(4), qfrac(13, 2)]];
        let ns = nullspace(&a, 3);
        assert_eq!(ns.len(), 1);
        for row in &a {
            let s: Q = row.iter().zip(&ns[0]).map(|(x, y)| x * y).sum();
            assert!(s.is_zero());
        }
        assert_eq!(det(&[vec![q(1), q(2)], vec![q(3), q(4)]]), q(-2));
    }
}
