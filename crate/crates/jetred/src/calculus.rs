//! Total derivatives, evolution fields and their brackets, and Lie closure
//! with exact structure constants.

use std::collections::{BTreeMap, VecDeque};

use num_traits::{One, Zero};
use serde_json::{json, Value};
use thiserror::Error;

use crate::coords::{JetCoord, MultiIndex, Space};
use crate::expr::{equal, Expr, Factor, Poly, Q};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CalcError {
    #[error("jet order {order} exceeds the cap {cap}")]
    OrderCapExceeded { order: u32, cap: u32 },
}

/// D_i e = ∂e/∂x^i + Σ u^k_{σ+1_i} ∂e/∂u^k_σ.
pub fn total_derivative(e: &Expr, i: usize, space: &Space) -> Result<Expr, CalcError> {
    let mut terms = Vec::new();
    for c in e.free_coords() {
        match &c {
            JetCoord::Indep(k) if *k == i => terms.push(e.diff(&c)),
            JetCoord::Dep { j, sigma } => {
                let next = sigma.bump(i);
                if next.order() > space.max_order {
                    return Err(CalcError::OrderCapExceeded { order: next.order(), cap: space.max_order });
                }
                let d = e.diff(&c);
                terms.push(Expr::coord(JetCoord::deriv(*j, next)).mul(&d));
            }
            _ => {}
        }
    }
    Ok(Expr::sum(terms))
}

/// D^σ e, applying the first-variable derivatives first.
pub fn total_derivative_multi(e: &Expr, sigma: &MultiIndex, space: &Space) -> Result<Expr, CalcError> {
    let mut r = e.clone();
    for (i, &k) in sigma.entries().iter().enumerate() {
        for _ in 0..k {
            r = total_derivative(&r, i, space)?;
        }
    }
    Ok(r)
}

/// An n-tuple of generator functions (F¹…Fⁿ).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EvolutionField {
    pub components: Vec<Expr>,
}

impl EvolutionField {
    pub fn new(components: Vec<Expr>) -> Self {
        EvolutionField { components }
    }

    pub fn scalar(e: Expr) -> Self {
        EvolutionField { components: vec![e] }
    }

    pub fn zero(n: usize) -> Self {
        EvolutionField { components: vec![Expr::zero(); n] }
    }

    pub fn n(&self) -> usize {
        self.components.len()
    }

    pub fn order(&self) -> u32 {
        self.components.iter().map(Expr::max_order).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(Expr::is_zero)
    }

    pub fn scale(&self, c: &Q) -> Self {
        EvolutionField { components: self.components.iter().map(|e| e.scale(c)).collect() }
    }

    pub fn scale_expr(&self, c: &Expr) -> Self {
        EvolutionField { components: self.components.iter().map(|e| e.mul(c)).collect() }
    }

    pub fn add(&self, o: &Self) -> Self {
        EvolutionField { components: self.components.iter().zip(&o.components).map(|(a, b)| a.add(b)).collect() }
    }

    pub fn sub(&self, o: &Self) -> Self {
        EvolutionField { components: self.components.iter().zip(&o.components).map(|(a, b)| a.sub(b)).collect() }
    }

    /// Σ c_k f_k
    pub fn combination(coeffs: &[Q], fields: &[EvolutionField], n: usize) -> Self {
        let mut comps = vec![Vec::new(); n];
        for (c, f) in coeffs.iter().zip(fields) {
            if c.is_zero() {
                continue;
            }
            for (j, e) in f.components.iter().enumerate() {
                comps[j].push(e.scale(c));
            }
        }
        EvolutionField { components: comps.into_iter().map(Expr::sum).collect() }
    }

    pub fn to_strings(&self, space: &Space) -> Vec<String> {
        self.components.iter().map(|e| e.to_string_in(space)).collect()
    }

    pub fn display(&self, space: &Space) -> String {
        if self.n() == 1 {
            return self.components[0].to_string_in(space);
        }
        format!("({})", self.to_strings(space).join(", "))
    }
}

/// Lazily computed components D^σ(F^j) of V_F.
pub struct Prolongation<'a> {
    field: &'a EvolutionField,
    space: &'a Space,
    cache: BTreeMap<(usize, MultiIndex), Expr>,
}

impl<'a> Prolongation<'a> {
    pub fn new(field: &'a EvolutionField, space: &'a Space) -> Self {
        Prolongation { field, space, cache: BTreeMap::new() }
    }

    /// D^σ(F^j).
    pub fn component(&mut self, j: usize, sigma: &MultiIndex) -> Result<Expr, CalcError> {
        if sigma.is_zero() {
            return Ok(self.field.components[j].clone());
        }
        if let Some(e) = self.cache.get(&(j, sigma.clone())) {
            return Ok(e.clone());
        }
        // Peel one derivative off the last nonzero direction.
        let entries = sigma.entries();
        let i = entries.len() - 1;
        let mut lower = entries.to_vec();
        lower[i] -= 1;
        let prev = self.component(j, &MultiIndex::new(lower))?;
        let e = total_derivative(&prev, i, self.space)?;
        self.cache.insert((j, sigma.clone()), e.clone());
        Ok(e)
    }

    /// V_F(G) = Σ D^σ(F^j) ∂G/∂u^j_σ.
    pub fn apply(&mut self, g: &Expr) -> Result<Expr, CalcError> {
        let mut terms = Vec::new();
        for c in g.free_coords() {
            if let JetCoord::Dep { j, sigma } = &c {
                if *j >= self.field.n() {
                    continue;
                }
                let comp = self.component(*j, sigma)?;
                if comp.is_zero() {
                    continue;
                }
                terms.push(comp.mul(&g.diff(&c)));
            }
        }
        Ok(Expr::sum(terms))
    }
}

pub fn evolution_apply(f: &EvolutionField, g: &Expr, space: &Space) -> Result<Expr, CalcError> {
    Prolongation::new(f, space).apply(g)
}

/// [F, G]^j = V_F(G^j) − V_G(F^j).
pub fn evolution_bracket(f: &EvolutionField, g: &EvolutionField, space: &Space) -> Result<EvolutionField, CalcError> {
    let mut pf = Prolongation::new(f, space);
    let mut pg = Prolongation::new(g, space);
    let mut comps = Vec::with_capacity(f.n());
    for j in 0..f.n() {
        let a = pf.apply(&g.components[j])?;
        let b = pg.apply(&f.components[j])?;
        comps.push(a.sub(&b));
    }
    Ok(EvolutionField::new(comps))
}

/// Constants c with H = Σ c_k basis_k, or `None` (not in the ℚ-span).
///
/// Each component is brought over a common denominator and expanded; the
/// coefficients of distinct monomials then give an exact linear system.
/// Kernels count as independent atoms, so identities among kernels are not
/// used.
pub fn decompose_in_basis(h: &EvolutionField, basis: &[EvolutionField]) -> Option<Vec<Q>> {
    let nb = basis.len();
    let mut rows: Vec<Vec<Q>> = Vec::new();
    let mut rhs: Vec<Q> = Vec::new();
    for j in 0..h.n() {
        let exprs: Vec<&Expr> = basis.iter().map(|b| &b.components[j]).chain(std::iter::once(&h.components[j])).collect();
        let nums = over_common_denominator(&exprs);
        let mut monos: BTreeMap<&crate::expr::Mono, usize> = BTreeMap::new();
        for p in &nums {
            for (m, _) in p.terms() {
                let k = monos.len();
                monos.entry(m).or_insert(k);
            }
        }
        let base = rows.len();
        for _ in 0..monos.len() {
            rows.push(vec![Q::zero(); nb]);
            rhs.push(Q::zero());
        }
        for (k, p) in nums.iter().enumerate() {
            for (m, c) in p.terms() {
                let r = base + monos[m];
                if k < nb {
                    rows[r][k] += c;
                } else {
                    rhs[r] += c;
                }
            }
        }
    }
    if rows.is_empty() {
        return Some(vec![Q::zero(); nb]);
    }
    if nb == 0 {
        return rhs.iter().all(Zero::is_zero).then(Vec::new);
    }
    linalg::solve(&rows, &rhs)
}

/// Numerators of `exprs` over the product of their denominator factors with
/// maximal multiplicity.
fn over_common_denominator(exprs: &[&Expr]) -> Vec<Poly> {
    let mut den: BTreeMap<Factor, i32> = BTreeMap::new();
    for e in exprs {
        for (f, k) in e.factors() {
            if *k < 0 {
                let d = den.entry(f.clone()).or_insert(0);
                *d = (*d).max(-k);
            }
        }
    }
    let mut dexpr = Expr::one();
    for (f, k) in &den {
        let base = match f {
            Factor::Atom(a) => a.as_expr(),
            Factor::Poly(p) => Expr::from_poly(p.clone()),
        };
        dexpr = dexpr.mul(&base.powi(*k as i64));
    }
    exprs
        .iter()
        .map(|e| {
            let n = e.mul(&dexpr);
            n.as_poly().unwrap_or_else(|| n.num_den().0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Generator(usize),
    Bracket(usize, usize),
}

/// A finite-dimensional Lie algebra of evolution fields with exact
/// structure constants: [b_i, b_j] = Σ_k lambda[i][j][k] b_k.
#[derive(Clone, Debug)]
pub struct LieAlgebra {
    pub basis: Vec<EvolutionField>,
    pub lambda: Vec<Vec<Vec<Q>>>,
    pub provenance: Vec<Provenance>,
    pub depth: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct NotClosed {
    pub reason: String,
    /// Iterated brackets leading to the failure, shallowest first.
    pub chain: Vec<EvolutionField>,
    pub depth: u32,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub enum ClosureError {
    NotClosed(Box<NotClosed>),
    DependentGenerator(usize),
    Empty,
}

impl std::fmt::Display for ClosureError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClosureError::NotClosed(n) => write!(f, "not closed: {} (depth {}, dim {})", n.reason, n.depth, n.dim),
            ClosureError::DependentGenerator(i) => write!(f, "generator {} is a constant combination of earlier ones", i + 1),
            ClosureError::Empty => write!(f, "no generators"),
        }
    }
}

impl std::error::Error for ClosureError {}

#[derive(Clone, Debug)]
pub struct ClosureOptions {
    pub max_depth: u32,
    pub dim_cap: usize,
}

impl Default for ClosureOptions {
    fn default() -> Self {
        ClosureOptions { max_depth: 3, dim_cap: 16 }
    }
}

impl LieAlgebra {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Structure constants of [b_i, b_j] as a vector.
    pub fn bracket_coeffs(&self, i: usize, j: usize) -> &[Q] {
        &self.lambda[i][j]
    }

    /// An algebra given directly by structure constants (fields unused).
    pub fn from_constants(lambda: Vec<Vec<Vec<Q>>>) -> Self {
        let h = lambda.len();
        LieAlgebra {
            basis: vec![EvolutionField::zero(0); h],
            lambda,
            provenance: (0..h).map(Provenance::Generator).collect(),
            depth: vec![0; h],
        }
    }

    /// Antisymmetry and the Jacobi identity, exactly.
    pub fn check_constants(&self) -> Result<(), String> {
        let h = self.dim();
        for i in 0..h {
            for j in 0..h {
                for k in 0..h {
                    if self.lambda[i][j][k] != -self.lambda[j][i][k].clone() {
                        return Err(format!("antisymmetry fails at ({},{})", i + 1, j + 1));
                    }
                }
            }
        }
        for i in 0..h {
            for j in 0..h {
                for k in 0..h {
                    for p in 0..h {
                        let mut s = Q::zero();
                        for m in 0..h {
                            s += &self.lambda[i][j][m] * &self.lambda[m][k][p];
                            s += &self.lambda[j][k][m] * &self.lambda[m][i][p];
                            s += &self.lambda[k][i][m] * &self.lambda[m][j][p];
                        }
                        if !s.is_zero() {
                            return Err(format!("Jacobi fails for ({},{},{})", i + 1, j + 1, k + 1));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Re-derive every bracket and compare with Σ λ b_k under `equal`.
    pub fn verify(&self, space: &Space) -> Result<(), String> {
        self.check_constants()?;
        let n = self.basis.first().map(EvolutionField::n).unwrap_or(0);
        for i in 0..self.dim() {
            for j in i + 1..self.dim() {
                let br = evolution_bracket(&self.basis[i], &self.basis[j], space).map_err(|e| e.to_string())?;
                let comb = EvolutionField::combination(&self.lambda[i][j], &self.basis, n);
                for (a, b) in br.components.iter().zip(&comb.components) {
                    match equal(a, b) {
                        Ok(v) if v.is_equal() => {}
                        _ => return Err(format!("bracket ({},{}) disagrees with its constants", i + 1, j + 1)),
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self, space: &Space) -> Value {
        let basis: Vec<Value> = self.basis.iter().map(|b| json!(b.to_strings(space))).collect();
        let lambda: Vec<Value> = self
            .lambda
            .iter()
            .map(|row| {
                Value::Array(row.iter().map(|v| json!(v.iter().map(q_string).collect::<Vec<_>>())).collect())
            })
            .collect();
        let prov: Vec<Value> = self
            .provenance
            .iter()
            .map(|p| match p {
                Provenance::Generator(i) => json!({"generator": i + 1}),
                Provenance::Bracket(i, j) => json!({"bracket": [i + 1, j + 1]}),
            })
            .collect();
        json!({"dim": self.dim(), "basis": basis, "lambda": lambda, "provenance": prov})
    }
}

pub fn q_string(q: &Q) -> String {
    if q.is_integer() {
        q.numer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

/// Breadth-first bracket saturation over pairs (i<j) in FIFO order.
pub fn lie_closure(
    generators: &[EvolutionField],
    opts: &ClosureOptions,
    space: &Space,
) -> Result<LieAlgebra, ClosureError> {
    if generators.is_empty() {
        return Err(ClosureError::Empty);
    }
    let mut basis: Vec<EvolutionField> = Vec::new();
    for (i, g) in generators.iter().enumerate() {
        if !basis.is_empty() && decompose_in_basis(g, &basis).is_some() || g.is_zero() {
            return Err(ClosureError::DependentGenerator(i));
        }
        basis.push(g.clone());
    }
    let mut provenance: Vec<Provenance> = (0..basis.len()).map(Provenance::Generator).collect();
    let mut depth: Vec<u32> = vec![0; basis.len()];
    let mut known: BTreeMap<(usize, usize), Vec<Q>> = BTreeMap::new();
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    for j in 0..basis.len() {
        for i in 0..j {
            queue.push_back((i, j));
        }
    }
    // Bracket-derived ancestors of `idx`, following the deeper parent.
    let chain_of = |idx: usize, provenance: &[Provenance], depth: &[u32], basis: &[EvolutionField]| {
        let mut chain = Vec::new();
        let mut cur = idx;
        while let Provenance::Bracket(a, b) = provenance[cur] {
            chain.push(basis[cur].clone());
            cur = if depth[a] >= depth[b] { a } else { b };
        }
        chain.reverse();
        chain
    };
    while let Some((i, j)) = queue.pop_front() {
        let br = match evolution_bracket(&basis[i], &basis[j], space) {
            Ok(b) => b,
            Err(e) => {
                let parent = if depth[j] >= depth[i] { j } else { i };
                let chain = chain_of(parent, &provenance, &depth, &basis);
                return Err(ClosureError::NotClosed(Box::new(NotClosed {
                    reason: e.to_string(),
                    chain,
                    depth: depth[i].max(depth[j]) + 1,
                    dim: basis.len(),
                })));
            }
        };
        if br.is_zero() {
            known.insert((i, j), vec![]);
            continue;
        }
        if let Some(c) = decompose_in_basis(&br, &basis) {
            known.insert((i, j), c);
            continue;
        }
        let d = depth[i].max(depth[j]) + 1;
        if d > opts.max_depth || basis.len() + 1 > opts.dim_cap {
            let parent = if depth[j] >= depth[i] { j } else { i };
            let mut chain = chain_of(parent, &provenance, &depth, &basis);
            chain.push(br);
            let reason = if d > opts.max_depth {
                format!("bracket [{}, {}] is new at depth {d} > {}", i + 1, j + 1, opts.max_depth)
            } else {
                format!("dimension would exceed {}", opts.dim_cap)
            };
            return Err(ClosureError::NotClosed(Box::new(NotClosed { reason, chain, depth: d, dim: basis.len() })));
        }
        let k = basis.len();
        basis.push(br);
        provenance.push(Provenance::Bracket(i, j));
        depth.push(d);
        let mut c = vec![Q::zero(); k + 1];
        c[k] = Q::one();
        known.insert((i, j), c);
        for a in 0..k {
            queue.push_back((a, k));
        }
    }
    let h = basis.len();
    let mut lambda = vec![vec![vec![Q::zero(); h]; h]; h];
    for ((i, j), c) in known {
        for (k, v) in c.into_iter().enumerate() {
            lambda[j][i][k] = -v.clone();
            lambda[i][j][k] = v;
        }
    }
    Ok(LieAlgebra { basis, lambda, provenance, depth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, q, ParseContext};

    fn p(s: &str) -> Expr {
        parse_expr(s, &ParseContext::permissive()).unwrap()
    }

    fn sf(s: &str) -> EvolutionField {
        EvolutionField::scalar(p(s))
    }

    #[test]
    fn total_derivative_examples() {
        let sp = Space::scalar();
        assert_eq!(total_derivative(&p("u"), 0, &sp).unwrap(), p("u_x"));
        assert_eq!(total_derivative(&p("x*u_x"), 0, &sp).unwrap(), p("u_x + x*u_xx"));
        let d2 = total_derivative_multi(&p("u*u_x"), &MultiIndex::single(0, 2), &sp).unwrap();
        assert_eq!(d2, p("u*u_xxx + 3*u_x*u_xx"));
        assert_eq!(total_derivative_multi(&p("u*u_x"), &MultiIndex::zero(), &sp).unwrap(), p("u*u_x"));
    }

    #[test]
    fn order_cap_is_enforced() {
        let mut sp = Space::scalar();
        sp.max_order = 3;
        assert!(matches!(
            total_derivative(&p("u_xxx"), 0, &sp),
            Err(CalcError::OrderCapExceeded { order: 4, cap: 3 })
        ));
    }

    #[test]
    fn apply_examples() {
        let sp = Space::scalar();
        assert_eq!(evolution_apply(&sf("x*u_x"), &p("u_x"), &sp).unwrap(), p("x*u_xx + u_x"));
        assert!(evolution_apply(&sf("u*u_xx"), &p("x"), &sp).unwrap().is_zero());
        assert_eq!(evolution_apply(&sf("u*u_x"), &p("u_xx"), &sp).unwrap(), p("u*u_xxx + 3*u_x*u_xx"));
    }

    #[test]
    fn bracket_examples() {
        let sp = Space::scalar();
        assert_eq!(evolution_bracket(&sf("1"), &sf("u"), &sp).unwrap(), sf("1"));
        assert!(evolution_bracket(&sf("u*u_xx"), &sf("u*u_xx"), &sp).unwrap().is_zero());
    }

    #[test]
    fn decomposition_examples() {
        let b = [sf("1"), sf("u")];
        assert_eq!(decompose_in_basis(&sf("2*u + 3"), &b), Some(vec![q(3), q(2)]));
        assert_eq!(decompose_in_basis(&sf("u_x"), &b), None);
        assert_eq!(decompose_in_basis(&sf("x"), &[sf("1")]), None);
        assert_eq!(decompose_in_basis(&sf("2/(1+u) + u"), &[sf("u"), sf("1/(1+u)")]), Some(vec![q(1), q(2)]));
    }

    #[test]
    fn closure_of_sl2_triple() {
        let sp = Space::scalar();
        let alg = lie_closure(&[sf("1"), sf("u"), sf("u^2")], &ClosureOptions::default(), &sp).unwrap();
        assert_eq!(alg.dim(), 3);
        assert_eq!(alg.lambda[0][1], vec![q(1), q(0), q(0)]);
        assert_eq!(alg.lambda[0][2], vec![q(0), q(2), q(0)]);
        assert_eq!(alg.lambda[1][2], vec![q(0), q(0), q(1)]);
        alg.verify(&sp).unwrap();
    }

    #[test]
    fn nonclosure_witness_grows() {
        let sp = Space::scalar();
        let err = lie_closure(&[sf("x*u_xx"), sf("u_x")], &ClosureOptions::default(), &sp).unwrap_err();
        let ClosureError::NotClosed(nc) = err else { panic!("expected NotClosed") };
        let want = [p("u_xx"), p("2*u_xxx"), p("6*u_{(4)}"), p("24*u_{(5)}")];
        assert_eq!(nc.chain.len(), 4);
        for (c, w) in nc.chain.iter().zip(&want) {
            assert_eq!(&c.components[0], w);
        }
    }
}
