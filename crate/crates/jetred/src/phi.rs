//! Coefficient tables φ^l_i(a) realizing a Lie algebra on flow-parameter
//! coordinates: W_i = φ^l_i ∂_{a^l} with [W_i, W_j] = λ^k_{ij} W_k and
//! φ_i = −e_i on the slice a^1 = … = a^{i−1} = 0.
//!
//! The solver integrates the frame m_k = Ad(e^{a^1 X_1} ⋯ e^{a^{k−1} X_{k−1}}) X_k
//! one slice at a time: on a^1 = … = a^{j−1} = 0 the frame obeys the linear
//! constant-coefficient ODE ∂_{a^j} m = ad(X_j) m, integrated exactly in the
//! class Q[a, exp(q·a)]. The table is then Φ = −M⁻¹.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::calculus::{q_string, LieAlgebra};
use crate::coords::{JetCoord, Space};
use crate::expr::{equal, Atom, Expr, Factor, Poly, Verdict, Q};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PhiError {
    #[error("ad(X_{generator}) has eigenvalues outside Q, so the flow coefficients leave the poly-exp class")]
    PhiClassExceeded { generator: usize },
    #[error("ordering {ordering:?} couples generator {i} to coordinate {l} through a non-unit denominator")]
    NonTriangularOrdering { ordering: Vec<usize>, i: usize, l: usize },
    #[error("structure constants are not those of a Lie algebra: {0}")]
    NotLieAlgebra(String),
    #[error("expected {expected} coordinate names, got {got}")]
    CoordinateNames { expected: usize, got: usize },
}

/// φ table. `entries[i][l]` is the ∂_{a^l} coefficient of W_i. Rows and
/// columns follow the original generator order; `ordering[l]` is the
/// generator whose flow parameter is a^l in the composition.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiTable {
    pub coords: Vec<String>,
    pub entries: Vec<Vec<Expr>>,
    pub ordering: Vec<usize>,
    /// Index of the drift generator when built by `solve_phi_with_drift`.
    pub drift: Option<usize>,
}

impl PhiTable {
    pub fn h(&self) -> usize {
        self.entries.len()
    }

    pub fn coord(&self, l: usize) -> JetCoord {
        JetCoord::param(&self.coords[l])
    }

    /// W_i applied to a function of the coordinates.
    pub fn apply(&self, i: usize, f: &Expr) -> Expr {
        Expr::sum((0..self.h()).filter(|&l| !self.entries[i][l].is_zero()).map(|l| {
            self.entries[i][l].mul(&f.diff(&self.coord(l)))
        }))
    }

    pub fn field_string(&self, i: usize) -> String {
        let sp = Space::scalar();
        let terms: Vec<String> = (0..self.h())
            .filter(|&l| !self.entries[i][l].is_zero())
            .map(|l| format!("({})*d/d{}", self.entries[i][l].display(&sp), self.coords[l]))
            .collect();
        if terms.is_empty() {
            "0".into()
        } else {
            terms.join(" + ")
        }
    }

    pub fn to_json(&self) -> Value {
        let sp = Space::scalar();
        json!({
            "coords": self.coords,
            "ordering": self.ordering,
            "drift": self.drift,
            "phi": self.entries.iter().map(|row| row.iter().map(|e| e.display(&sp).to_string()).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }
}

/// Default coordinate names a1, a2, … (a0 first when a drift is present).
pub fn default_coords(h: usize, drift: bool) -> Vec<String> {
    let start = if drift { 0 } else { 1 };
    (0..h).map(|l| format!("a{}", l + start)).collect()
}

// ---------------------------------------------------------------------------
// Exact exp(t A) in Q[t, e^{qt}].

/// Σ_rate e^{rate·t} Σ_n c_n t^n.
#[derive(Clone, Debug, Default, PartialEq)]
struct ExpPoly(BTreeMap<Q, Vec<Q>>);

impl ExpPoly {
    fn exp(rate: Q) -> Self {
        ExpPoly(BTreeMap::from([(rate, vec![Q::one()])]))
    }

    fn add_scaled(&mut self, o: &ExpPoly, c: &Q) {
        for (r, p) in &o.0 {
            let e = self.0.entry(r.clone()).or_default();
            if e.len() < p.len() {
                e.resize(p.len(), Q::zero());
            }
            for (a, b) in e.iter_mut().zip(p) {
                *a += b * c;
            }
        }
        self.0.retain(|_, p| p.iter().any(|c| !c.is_zero()));
    }

    fn shift(&self, by: &Q) -> ExpPoly {
        ExpPoly(self.0.iter().map(|(r, p)| (r + by, p.clone())).collect())
    }

    /// ∫_0^t.
    fn integrate(&self) -> ExpPoly {
        let mut out = ExpPoly::default();
        let mut constant = Q::zero();
        for (nu, p) in &self.0 {
            let mut acc = vec![Q::zero(); p.len() + 1];
            for (n, c) in p.iter().enumerate() {
                if c.is_zero() {
                    continue;
                }
                if nu.is_zero() {
                    acc[n + 1] += c / Q::from_integer((n as i64 + 1).into());
                    continue;
                }
                // ∫ s^n e^{νs} = e^{νs} Σ_j (−1)^j n!/(n−j)! s^{n−j} / ν^{j+1}
                let mut coef = c / nu;
                for j in 0..=n {
                    acc[n - j] += &coef;
                    coef = -coef * Q::from_integer(((n - j) as i64).into()) / nu;
                }
                // F(0) = c (−1)^n n!/ν^{n+1}
                let mut f0 = c.clone();
                for k in 1..=n {
                    f0 *= Q::from_integer((k as i64).into());
                }
                f0 /= nu.pow(n as i32 + 1);
                if n % 2 == 1 {
                    f0 = -f0;
                }
                constant -= f0;
            }
            out.add_scaled(&ExpPoly(BTreeMap::from([(nu.clone(), acc)])), &Q::one());
        }
        out.add_scaled(&ExpPoly(BTreeMap::from([(Q::zero(), vec![constant])])), &Q::one());
        out
    }

    fn to_expr(&self, t: &Expr) -> Expr {
        Expr::sum(self.0.iter().map(|(r, p)| {
            let poly = Expr::sum(p.iter().enumerate().map(|(n, c)| t.powi(n as i64).scale(c)));
            Expr::exp(&t.scale(r)).mul(&poly)
        }))
    }
}

type QMat = Vec<Vec<Q>>;

fn identity(n: usize) -> QMat {
    (0..n).map(|i| (0..n).map(|j| if i == j { Q::one() } else { Q::zero() }).collect()).collect()
}

fn matmul(a: &QMat, b: &QMat) -> QMat {
    let n = a.len();
    let m = b.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| (0..m).map(|j| (0..b.len()).map(|k| &a[i][k] * &b[k][j]).sum()).collect())
        .collect()
}

/// Characteristic polynomial coefficients c_0..c_n (monic) by Faddeev–LeVerrier.
fn char_poly(a: &QMat) -> Vec<Q> {
    let n = a.len();
    let mut c = vec![Q::zero(); n + 1];
    c[n] = Q::one();
    let mut m = vec![vec![Q::zero(); n]; n];
    for k in 1..=n {
        let mut next = matmul(a, &m);
        for (i, row) in next.iter_mut().enumerate() {
            row[i] += &c[n - k + 1];
        }
        m = next;
        let am = matmul(a, &m);
        let tr: Q = (0..n).map(|i| am[i][i].clone()).sum();
        c[n - k] = -tr / Q::from_integer((k as i64).into());
    }
    c
}

fn divisors(n: &BigInt) -> Option<Vec<BigInt>> {
    let n = n.abs().to_u64()?;
    if n > 1_000_000_000_000 {
        return None;
    }
    let mut out = Vec::new();
    let mut d = 1u64;
    while d * d <= n {
        if n % d == 0 {
            out.push(BigInt::from(d));
            if d * d != n {
                out.push(BigInt::from(n / d));
            }
        }
        d += 1;
    }
    Some(out)
}

fn eval_poly(c: &[Q], x: &Q) -> Q {
    c.iter().rev().fold(Q::zero(), |acc, ci| acc * x + ci)
}

/// Deflate by (t − r).
fn deflate(c: &[Q], r: &Q) -> Vec<Q> {
    let n = c.len() - 1;
    let mut out = vec![Q::zero(); n];
    let mut carry = Q::zero();
    for k in (0..n).rev() {
        carry = &c[k + 1] + carry * r;
        out[k] = carry.clone();
    }
    out
}

/// All eigenvalues with multiplicity, if they are rational.
fn rational_eigenvalues(a: &QMat) -> Option<Vec<Q>> {
    let mut c = char_poly(a);
    let mut roots = Vec::new();
    while c.len() > 1 {
        if c[0].is_zero() {
            roots.push(Q::zero());
            c.remove(0);
            continue;
        }
        let l = c.iter().fold(BigInt::one(), |acc, q| acc.lcm(q.denom()));
        let ints: Vec<BigInt> = c.iter().map(|q| (q * Q::from_integer(l.clone())).to_integer()).collect();
        let ps = divisors(&ints[0])?;
        let qs = divisors(ints.last().unwrap())?;
        let mut found = None;
        'search: for p in &ps {
            for q in &qs {
                for s in [1, -1] {
                    let r = Q::new(p * s, q.clone());
                    if eval_poly(&c, &r).is_zero() {
                        found = Some(r);
                        break 'search;
                    }
                }
            }
        }
        let r = found?;
        c = deflate(&c, &r);
        roots.push(r);
    }
    Some(roots)
}

/// exp(t A) by Putzer's algorithm, as a matrix of functions of `t`.
fn exp_matrix(a: &QMat, t: &Expr) -> Option<Vec<Vec<Expr>>> {
    let n = a.len();
    let lam = rational_eigenvalues(a)?;
    let mut p = identity(n);
    let mut r = ExpPoly::exp(lam[0].clone());
    let mut acc: Vec<Vec<ExpPoly>> = vec![vec![ExpPoly::default(); n]; n];
    for k in 0..n {
        if k > 0 {
            // r_{k+1} = e^{λ t} ∫_0^t e^{−λ s} r_k(s) ds
            r = r.shift(&-lam[k].clone()).integrate().shift(&lam[k]);
            let mut shifted = a.clone();
            for (i, row) in shifted.iter_mut().enumerate() {
                row[i] -= &lam[k - 1];
            }
            p = matmul(&shifted, &p);
        }
        for i in 0..n {
            for j in 0..n {
                if !p[i][j].is_zero() {
                    acc[i][j].add_scaled(&r, &p[i][j]);
                }
            }
        }
    }
    Some(acc.iter().map(|row| row.iter().map(|e| e.to_expr(t)).collect()).collect())
}

// ---------------------------------------------------------------------------

/// Whether `e` lies in the ℚ-span of a-monomials times exponentials of
/// linear forms in the parameters.
pub fn in_phi_class(e: &Expr) -> bool {
    fn atom_ok(a: &Atom) -> bool {
        matches!(a, Atom::Coord(c) if c.is_param())
    }
    fn poly_ok(p: &Poly, exp_level: bool) -> bool {
        p.terms().all(|(m, _)| {
            m.atoms().keys().all(atom_ok)
                && (!exp_level || m.degree() <= 1 && m.exp_part().is_zero())
                && (exp_level || poly_ok(m.exp_part(), true))
        })
    }
    poly_ok(e.exp_part(), true)
        && e.factors().iter().all(|(f, k)| {
            *k > 0
                && match f {
                    Factor::Atom(a) => atom_ok(a),
                    Factor::Poly(p) => poly_ok(p, false),
                }
        })
}

fn ad_matrix(lambda: &[Vec<Vec<Q>>], j: usize) -> QMat {
    let h = lambda.len();
    // (ad X_j)^p_q = λ^p_{jq}
    (0..h).map(|p| (0..h).map(|q| lambda[j][q][p].clone()).collect()).collect()
}

fn permute_constants(lambda: &[Vec<Vec<Q>>], perm: &[usize]) -> Vec<Vec<Vec<Q>>> {
    let h = perm.len();
    (0..h)
        .map(|i| (0..h).map(|j| (0..h).map(|k| lambda[perm[i]][perm[j]][perm[k]].clone()).collect()).collect())
        .collect()
}

/// Invert a matrix of expressions by Gauss–Jordan elimination.
fn invert(m: &[Vec<Expr>]) -> Option<Vec<Vec<Expr>>> {
    let n = m.len();
    let mut a: Vec<Vec<Expr>> = m.to_vec();
    let mut inv: Vec<Vec<Expr>> =
        (0..n).map(|i| (0..n).map(|j| if i == j { Expr::one() } else { Expr::zero() }).collect()).collect();
    for c in 0..n {
        // Prefer pivots without polynomial factors.
        let piv = (c..n)
            .filter(|&r| !a[r][c].is_zero())
            .min_by_key(|&r| a[r][c].factors().keys().filter(|f| matches!(f, Factor::Poly(_))).count())?;
        a.swap(c, piv);
        inv.swap(c, piv);
        let p = a[c][c].clone();
        for j in 0..n {
            a[c][j] = a[c][j].checked_div(&p)?;
            inv[c][j] = inv[c][j].checked_div(&p)?;
        }
        for r in 0..n {
            if r == c || a[r][c].is_zero() {
                continue;
            }
            let f = a[r][c].clone();
            for j in 0..n {
                let da = f.mul(&a[c][j]);
                a[r][j] = a[r][j].sub(&da);
                let di = f.mul(&inv[c][j]);
                inv[r][j] = inv[r][j].sub(&di);
            }
        }
    }
    Some(inv)
}

/// Solve in the composition order given by `perm` (perm[l] = generator of a^l).
fn solve_ordered(lambda: &[Vec<Vec<Q>>], perm: &[usize], coords: &[String]) -> Result<Vec<Vec<Expr>>, PhiError> {
    let h = perm.len();
    let lp = permute_constants(lambda, perm);
    let params: Vec<Expr> = coords.iter().map(|c| Expr::param(c)).collect();
    // frame[k] = column m_k; integrate slice by slice from a^1 outward:
    // m_k = E_1(a^1) E_2(a^2) ⋯ E_{k−1}(a^{k−1}) e_k.
    let mut exps = Vec::with_capacity(h);
    for j in 0..h {
        let e = exp_matrix(&ad_matrix(&lp, j), &params[j]).ok_or(PhiError::PhiClassExceeded { generator: perm[j] })?;
        exps.push(e);
    }
    let mut frame: Vec<Vec<Expr>> = vec![vec![Expr::zero(); h]; h];
    for k in 0..h {
        let mut col: Vec<Expr> = (0..h).map(|p| if p == k { Expr::one() } else { Expr::zero() }).collect();
        for j in (0..k).rev() {
            col = (0..h).map(|p| Expr::sum((0..h).map(|q| exps[j][p][q].mul(&col[q])))).collect();
        }
        for p in 0..h {
            frame[p][k] = col[p].clone();
        }
    }
    let inv = invert(&frame).ok_or(PhiError::NonTriangularOrdering { ordering: perm.to_vec(), i: 0, l: 0 })?;
    // Φ = −M⁻¹; column i of Φ holds W_i in permuted indexing.
    let mut out = vec![vec![Expr::zero(); h]; h];
    for i in 0..h {
        for l in 0..h {
            let e = inv[l][i].neg();
            if !in_phi_class(&e) {
                return Err(PhiError::NonTriangularOrdering { ordering: perm.to_vec(), i: perm[i], l });
            }
            out[perm[i]][l] = e;
        }
    }
    Ok(out)
}

fn permutations(h: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; h], &mut out);
    out
}

/// Solve the φ table for the algebra's basis in the given composition order.
/// On `NonTriangularOrdering` all orderings are tried when h ≤ 5.
pub fn solve_phi(alg: &LieAlgebra, ordering: &[usize], coords: &[String]) -> Result<PhiTable, PhiError> {
    solve_constants(&alg.lambda, ordering, coords)
}

pub fn solve_constants(lambda: &[Vec<Vec<Q>>], ordering: &[usize], coords: &[String]) -> Result<PhiTable, PhiError> {
    let h = lambda.len();
    if coords.len() != h {
        return Err(PhiError::CoordinateNames { expected: h, got: coords.len() });
    }
    LieAlgebra::from_constants(lambda.to_vec()).check_constants().map_err(PhiError::NotLieAlgebra)?;
    let first = solve_ordered(lambda, ordering, coords);
    let entries = match first {
        Err(e @ PhiError::NonTriangularOrdering { .. }) if h <= 5 => {
            let mut found = None;
            for perm in permutations(h) {
                if perm == ordering {
                    continue;
                }
                if let Ok(t) = solve_ordered(lambda, &perm, coords) {
                    found = Some((t, perm));
                    break;
                }
            }
            match found {
                Some((t, perm)) => return Ok(PhiTable { coords: coords.to_vec(), entries: t, ordering: perm, drift: None }),
                None => return Err(e),
            }
        }
        other => other?,
    };
    Ok(PhiTable { coords: coords.to_vec(), entries, ordering: ordering.to_vec(), drift: None })
}

/// φ table with a drift generator (index `drift` in the algebra). The drift
/// enters as −F̃ and is composed innermost, so its coordinate is transported
/// forward by the semigroup; `coords[drift]` names that coordinate.
pub fn solve_phi_with_drift(alg: &LieAlgebra, drift: usize, coords: &[String]) -> Result<PhiTable, PhiError> {
    let h = alg.dim();
    let flip = |i: usize| if i == drift { -Q::one() } else { Q::one() };
    let lambda: Vec<Vec<Vec<Q>>> = (0..h)
        .map(|i| (0..h).map(|j| (0..h).map(|k| &alg.lambda[i][j][k] * flip(i) * flip(j) * flip(k)).collect()).collect())
        .collect();
    let mut ordering: Vec<usize> = (0..h).filter(|&i| i != drift).collect();
    ordering.push(drift);
    // Coordinates are listed per generator; reorder them to composition order.
    let comp_coords: Vec<String> = ordering.iter().map(|&g| coords[g].clone()).collect();
    let t = solve_constants(&lambda, &ordering, &comp_coords)?;
    // Back to per-generator coordinate columns.
    let col_of: Vec<usize> = (0..h).map(|g| t.ordering.iter().position(|&x| x == g).unwrap()).collect();
    let entries = (0..h)
        .map(|i| {
            let s = flip(i);
            (0..h).map(|g| t.entries[i][col_of[g]].scale(&s)).collect()
        })
        .collect();
    Ok(PhiTable { coords: coords.to_vec(), entries, ordering: t.ordering, drift: Some(drift) })
}

/// Result of checking a table against structure constants.
#[derive(Clone, Debug, PartialEq)]
pub enum PhiVerdict {
    EqualCanonical,
    EqualNumeric,
    /// [W_i, W_j] ≠ λ^k_{ij} W_k, 0-based.
    BracketFail { i: usize, j: usize, l: usize },
    BoundaryFail { i: usize, l: usize },
    JetDependence { i: usize, l: usize },
}

impl PhiVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, PhiVerdict::EqualCanonical | PhiVerdict::EqualNumeric)
    }
}

/// Checks realization first, then the slice boundary condition (in
/// composition order; the drift generator's sign is +).
pub fn verify_phi(t: &PhiTable, alg_lambda: &[Vec<Vec<Q>>]) -> PhiVerdict {
    let h = t.h();
    let mut numeric = false;
    for i in 0..h {
        for l in 0..h {
            if t.entries[i][l].free_coords().iter().any(|c| !c.is_param()) {
                return PhiVerdict::JetDependence { i, l };
            }
        }
    }
    for i in 0..h {
        for j in i + 1..h {
            for l in 0..h {
                let lhs = Expr::sum((0..h).map(|m| {
                    let c = t.coord(m);
                    t.entries[i][m].mul(&t.entries[j][l].diff(&c)).sub(&t.entries[j][m].mul(&t.entries[i][l].diff(&c)))
                }));
                let rhs = Expr::sum((0..h).map(|k| t.entries[k][l].scale(&alg_lambda[i][j][k])));
                match equal(&lhs, &rhs) {
                    Ok(Verdict::EqualCanonical) => {}
                    Ok(Verdict::EqualNumeric) => numeric = true,
                    _ => return PhiVerdict::BracketFail { i, j, l },
                }
            }
        }
    }
    // Boundary: generator g = ordering[p] has φ_g = ∓e_{col(g)} when the
    // coordinates of ordering[0..p] vanish.
    let col_of = |g: usize| -> usize {
        if t.drift.is_some() {
            g
        } else {
            t.ordering.iter().position(|&x| x == g).unwrap()
        }
    };
    for (p, &g) in t.ordering.iter().enumerate() {
        let zero: BTreeMap<JetCoord, Expr> = t.ordering[..p].iter().map(|&o| (t.coord(col_of(o)), Expr::zero())).collect();
        let sign = if t.drift == Some(g) { Q::one() } else { -Q::one() };
        for l in 0..h {
            let want = if l == col_of(g) { Expr::rational(sign.clone()) } else { Expr::zero() };
            if t.entries[g][l].subs(&zero) != want {
                return PhiVerdict::BoundaryFail { i: g, l };
            }
        }
    }
    if numeric {
        PhiVerdict::EqualNumeric
    } else {
        PhiVerdict::EqualCanonical
    }
}

// ---------------------------------------------------------------------------
// Random solvable algebras for property tests.

/// Structure constants of a random solvable algebra of dimension `dim`, built
/// by repeated one-dimensional extensions R·D ⋉ g with D a derivation of g
/// whose eigenvalues are rational. The new element is placed first.
pub fn random_solvable_algebra(dim: usize, seed: u64) -> Vec<Vec<Vec<Q>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lambda: Vec<Vec<Vec<Q>>> = vec![vec![vec![Q::zero()]]];
    while lambda.len() < dim {
        let n = lambda.len();
        let ders = derivations(&lambda);
        let d = loop {
            let mut d = vec![vec![Q::zero(); n]; n];
            let mut picks: Vec<usize> = (0..ders.len()).collect();
            picks.shuffle(&mut rng);
            for &b in picks.iter().take(2) {
                let c = Q::from_integer(rng.random_range(-2i64..=2).into());
                for (p, row) in d.iter_mut().enumerate() {
                    for (q, v) in row.iter_mut().enumerate() {
                        *v += &c * &ders[b][p * n + q];
                    }
                }
            }
            if rational_eigenvalues(&d).is_some() {
                break d;
            }
        };
        // New basis (D, X_1..X_n): [D, X_q] = Σ_p d[p][q] X_p.
        let m = n + 1;
        let mut nl = vec![vec![vec![Q::zero(); m]; m]; m];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    nl[i + 1][j + 1][k + 1] = lambda[i][j][k].clone();
                }
            }
        }
        for q in 0..n {
            for p in 0..n {
                nl[0][q + 1][p + 1] = d[p][q].clone();
                nl[q + 1][0][p + 1] = -d[p][q].clone();
            }
        }
        lambda = nl;
    }
    lambda
}

/// Basis of Der(g) as flattened n×n matrices (row-major, D[p][q]).
fn derivations(lambda: &[Vec<Vec<Q>>]) -> Vec<Vec<Q>> {
    let n = lambda.len();
    // D[X_i, X_j] = [D X_i, X_j] + [X_i, D X_j], component p.
    let mut rows = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for p in 0..n {
                let mut row = vec![Q::zero(); n * n];
                for k in 0..n {
                    // D[X_i,X_j] = Σ_k λ^k_{ij} D X_k, component p: D[p][k]
                    row[p * n + k] += &lambda[i][j][k];
                    // [D X_i, X_j] = Σ_k D[k][i] λ^p_{kj}
                    row[k * n + i] -= &lambda[k][j][p];
                    row[k * n + j] -= &lambda[i][k][p];
                }
                if row.iter().any(|v| !v.is_zero()) {
                    rows.push(row);
                }
            }
        }
    }
    if rows.is_empty() {
        return (0..n * n)
            .map(|k| (0..n * n).map(|c| if c == k { Q::one() } else { Q::zero() }).collect())
            .collect();
    }
    linalg::nullspace(&rows, n * n)
}

/// Structure constants printed as "[i,j] = c k + …" lines (1-based).
pub fn constants_string(lambda: &[Vec<Vec<Q>>]) -> String {
    let h = lambda.len();
    let mut out = Vec::new();
    for i in 0..h {
        for j in i + 1..h {
            let terms: Vec<String> = (0..h)
                .filter(|&k| !lambda[i][j][k].is_zero())
                .map(|k| format!("{}*G{}", q_string(&lambda[i][j][k]), k + 1))
                .collect();
            if !terms.is_empty() {
                out.push(format!("[G{},G{}] = {}", i + 1, j + 1, terms.join(" + ")));
            }
        }
    }
    out.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, q, ParseContext};

    fn p(s: &str) -> Expr {
        parse_expr(s, &ParseContext::permissive()).unwrap()
    }

    fn constants(h: usize, rel: &[(usize, usize, usize, i64, i64)]) -> Vec<Vec<Vec<Q>>> {
        let mut l = vec![vec![vec![Q::zero(); h]; h]; h];
        for &(i, j, k, n, d) in rel {
            l[i][j][k] = Q::new(n.into(), d.into());
            l[j][i][k] = -Q::new(n.into(), d.into());
        }
        l
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exp_poly_integration() {
        // ∫_0^t s e^{2s} ds = e^{2t}(t/2 − 1/4) + 1/4
        let mut f = ExpPoly::default();
        f.add_scaled(&ExpPoly(BTreeMap::from([(q(2), vec![Q::zero(), Q::one()])])), &Q::one());
        let t = Expr::param("t");
        let got = f.integrate().to_expr(&t);
        assert!(equal(&got, &p("exp(2*t)*(t/2 - 1/4) + 1/4")).unwrap().is_equal());
    }

    #[test]
    fn jordan_block_exponential() {
        let a = vec![vec![q(1), q(1)], vec![q(0), q(1)]];
        let e = exp_matrix(&a, &Expr::param("t")).unwrap();
        assert_eq!(e[0][0], p("exp(t)"));
        assert_eq!(e[0][1], p("t*exp(t)"));
        assert!(e[1][0].is_zero());
        // Rotation generator has no rational eigenvalues.
        assert!(exp_matrix(&vec![vec![q(0), q(-1)], vec![q(1), q(0)]], &Expr::param("t")).is_none());
    }

    #[test]
    fn sl2_triple() {
        // G1 = 1, G2 = u, G3 = u^2
        let l = constants(3, &[(0, 1, 0, 1, 1), (0, 2, 1, 2, 1), (1, 2, 2, 1, 1)]);
        let t = solve_constants(&l, &[0, 1, 2], &names(&["a1", "a2", "a3"])).unwrap();
        let want = [["-1", "0", "0"], ["a1", "-1", "0"], ["-a1^2", "2*a1", "-exp(-a2)"]];
        for i in 0..3 {
            for k in 0..3 {
                assert_eq!(t.entries[i][k], p(want[i][k]), "phi[{i}][{k}]");
            }
        }
        assert_eq!(verify_phi(&t, &l), PhiVerdict::EqualCanonical);
        let mut bad = t.clone();
        bad.entries[2][2] = bad.entries[2][2].neg();
        // Flipping φ³₃ alone is the reparametrization a3 → −a3: brackets hold,
        // only the boundary condition catches it.
        assert_eq!(verify_phi(&bad, &l), PhiVerdict::BoundaryFail { i: 2, l: 2 });
        let mut bad = t.clone();
        bad.entries[2][1] = bad.entries[2][1].neg();
        assert_eq!(verify_phi(&bad, &l), PhiVerdict::BracketFail { i: 0, j: 2, l: 1 });
    }

    #[test]
    fn abelian_is_trivial() {
        let l = constants(3, &[]);
        let t = solve_constants(&l, &[0, 1, 2], &default_coords(3, false)).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                assert_eq!(t.entries[i][k], Expr::int(if i == k { -1 } else { 0 }));
            }
        }
        assert!(verify_phi(&t, &l).passed());
    }

    #[test]
    fn bad_ordering_retries() {
        let l = constants(3, &[(0, 1, 0, 1, 1), (0, 2, 1, 2, 1), (1, 2, 2, 1, 1)]);
        let t = solve_constants(&l, &[1, 0, 2], &default_coords(3, false)).unwrap();
        assert!(verify_phi(&t, &l).passed());
    }

    #[test]
    fn rotation_exceeds_class() {
        // so(3)
        let l = constants(3, &[(0, 1, 2, 1, 1), (1, 2, 0, 1, 1), (2, 0, 1, 1, 1)]);
        let r = solve_constants(&l, &[0, 1, 2], &default_coords(3, false));
        assert!(matches!(r, Err(PhiError::PhiClassExceeded { .. }) | Err(PhiError::NonTriangularOrdering { .. })), "{r:?}");
    }

    #[test]
    fn filtering_drift_table() {
        // F̃, G1 = x u_x, G2 = u with [F̃, G1] = −F̃.
        let l = constants(3, &[(0, 1, 0, -1, 1)]);
        let t = solve_phi_with_drift(&LieAlgebra::from_constants(l.clone()), 0, &names(&["a", "b", "c"])).unwrap();
        let want = [["exp(-b)", "0", "0"], ["0", "-1", "0"], ["0", "0", "-1"]];
        for i in 0..3 {
            for k in 0..3 {
                assert_eq!(t.entries[i][k], p(want[i][k]), "phi[{i}][{k}]");
            }
        }
        assert!(verify_phi(&t, &l).passed());
    }

    #[test]
    fn random_solvable_pass() {
        for seed in 0..20 {
            let dim = 2 + (seed as usize % 3);
            let l = random_solvable_algebra(dim, seed);
            LieAlgebra::from_constants(l.clone()).check_constants().unwrap();
            let order: Vec<usize> = (0..dim).collect();
            let t = solve_constants(&l, &order, &default_coords(dim, false)).unwrap();
            assert!(verify_phi(&t, &l).passed(), "seed {seed}\n{}", constants_string(&l));
        }
    }
}
