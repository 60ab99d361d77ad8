//! Immutable symbolic expressions over jet coordinates.
//!
//! Values are kept as `c · exp(E) · Π fᵏ` where each `f` is either an atom
//! (coordinate or opaque kernel) or a normalized polynomial, and `k` may be
//! negative. Sums pull out common factors and expand the rest, so an
//! expression that is identically zero as a rational function always
//! normalizes to the literal zero.

mod display;
mod equal;
mod eval;
mod parse;
mod poly;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::coords::JetCoord;

pub use display::ExprDisplay;
pub use equal::{equal, equal_with, EqualOptions, Verdict, Witness};
pub use eval::{compile, EvalError, FnProvider, NoFunctions, NumExpr, SmoothRandomFunctions};
pub use parse::{parse_expr, ParseContext, ParseError};
pub use poly::{mono_cmp, Mono, Poly};

pub type Q = BigRational;

pub fn q(n: i64) -> Q {
    Q::from_integer(BigInt::from(n))
}

pub fn qfrac(n: i64, d: i64) -> Q {
    Q::new(BigInt::from(n), BigInt::from(d))
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kernel {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    /// Non-integer rational power with exponent in (0, 1).
    Pow(Q),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Atom {
    Coord(JetCoord),
    Fn(Kernel, Box<Expr>),
    /// User function with partial-derivative counts per argument.
    Opaque { name: Arc<str>, deriv: Vec<u32>, args: Vec<Expr> },
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Factor {
    Atom(Atom),
    Poly(Poly),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Expr {
    coeff: Q,
    exp: Poly,
    factors: BTreeMap<Factor, i32>,
}

/// Coordinate support and highest derivative order of an expression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Analysis {
    pub free_coords: BTreeSet<JetCoord>,
    pub max_order: u32,
}

impl Default for Expr {
    fn default() -> Self {
        Expr::zero()
    }
}

impl Expr {
    pub fn zero() -> Expr {
        Expr { coeff: Q::zero(), exp: Poly::zero(), factors: BTreeMap::new() }
    }

    pub fn one() -> Expr {
        Expr::rational(Q::one())
    }

    pub fn rational(c: Q) -> Expr {
        Expr { coeff: c, exp: Poly::zero(), factors: BTreeMap::new() }
    }

    pub fn int(n: i64) -> Expr {
        Expr::rational(q(n))
    }

    pub fn frac(n: i64, d: i64) -> Expr {
        Expr::rational(qfrac(n, d))
    }

    pub fn coord(c: JetCoord) -> Expr {
        Expr::from_atom(Atom::Coord(c))
    }

    pub fn param(name: &str) -> Expr {
        Expr::coord(JetCoord::param(name))
    }

    pub fn x() -> Expr {
        Expr::coord(JetCoord::x(0))
    }

    pub fn u(j: usize) -> Expr {
        Expr::coord(JetCoord::u(j))
    }

    pub fn ux(j: usize, n: u32) -> Expr {
        Expr::coord(JetCoord::ux(j, n))
    }

    fn from_atom(a: Atom) -> Expr {
        let mut factors = BTreeMap::new();
        factors.insert(Factor::Atom(a), 1);
        Expr { coeff: Q::one(), exp: Poly::zero(), factors }
    }

    pub fn is_zero(&self) -> bool {
        self.coeff.is_zero()
    }

    pub fn is_one(&self) -> bool {
        self.coeff.is_one() && self.exp.is_zero() && self.factors.is_empty()
    }

    pub fn as_rational(&self) -> Option<Q> {
        (self.exp.is_zero() && self.factors.is_empty()).then(|| self.coeff.clone())
    }

    pub fn as_coord(&self) -> Option<&JetCoord> {
        if !self.coeff.is_one() || !self.exp.is_zero() || self.factors.len() != 1 {
            return None;
        }
        match self.factors.iter().next() {
            Some((Factor::Atom(Atom::Coord(c)), 1)) => Some(c),
            _ => None,
        }
    }

    pub fn coeff(&self) -> &Q {
        &self.coeff
    }

    pub fn exp_part(&self) -> &Poly {
        &self.exp
    }

    pub fn factors(&self) -> &BTreeMap<Factor, i32> {
        &self.factors
    }

    pub fn from_mono(m: &Mono, c: Q) -> Expr {
        if c.is_zero() {
            return Expr::zero();
        }
        let mut e = Expr { coeff: c, exp: m.exp.clone(), factors: BTreeMap::new() };
        for (a, k) in &m.atoms {
            e.factors.insert(Factor::Atom(a.clone()), *k as i32);
        }
        e.fix_roots();
        e
    }

    pub fn from_poly(p: Poly) -> Expr {
        let mut e = Expr::one();
        if !e.absorb_poly(&p, 1) {
            return Expr::zero();
        }
        e.fix_roots();
        e
    }

    /// Multiply `self` by `p^k` in place, normalizing `p`. Returns false when
    /// `p` is zero.
    fn absorb_poly(&mut self, p: &Poly, k: i32) -> bool {
        let Some((c, e, content, rest)) = p.normalize() else {
            return false;
        };
        self.coeff *= pow_q(&c, k);
        if !e.is_zero() {
            self.exp = self.exp.add(&e.scale(&q(k as i64)));
        }
        for (a, m) in content {
            bump(&mut self.factors, Factor::Atom(a), k * m as i32);
        }
        if let Some(r) = rest {
            bump(&mut self.factors, Factor::Poly(r), k);
        }
        true
    }

    /// Fully expanded polynomial when no factor has a negative exponent.
    pub fn as_poly(&self) -> Option<Poly> {
        if self.is_zero() {
            return Some(Poly::zero());
        }
        if self.factors.values().any(|&k| k < 0) {
            return None;
        }
        Some(self.expand_with(&self.coeff, &self.exp, self.factors.iter().map(|(f, k)| (f, *k as u32))))
    }

    fn expand_with<'a>(
        &self,
        c: &Q,
        e: &Poly,
        factors: impl Iterator<Item = (&'a Factor, u32)>,
    ) -> Poly {
        expand(c, e, factors)
    }

    /// Expanded numerator and denominator polynomials.
    pub fn num_den(&self) -> (Poly, Poly) {
        if self.is_zero() {
            return (Poly::zero(), Poly::constant(Q::one()));
        }
        let num = expand(
            &self.coeff,
            &self.exp,
            self.factors.iter().filter(|(_, k)| **k > 0).map(|(f, k)| (f, *k as u32)),
        );
        let den = expand(
            &Q::one(),
            &Poly::zero(),
            self.factors.iter().filter(|(_, k)| **k < 0).map(|(f, k)| (f, (-*k) as u32)),
        );
        (num, den)
    }

    /// Canonical representative: one expanded numerator over one expanded
    /// denominator.
    pub fn canonical(&self) -> Expr {
        let (n, d) = self.num_den();
        if d.as_constant().is_some() {
            let c = d.as_constant().unwrap();
            return Expr::from_poly(n.scale(&(Q::one() / c)));
        }
        let mut e = Expr::from_poly(n);
        let mut den = Expr::one();
        den.absorb_poly(&d, 1);
        e = e.mul_raw(&den.powi_raw(-1));
        e.fix_roots();
        e
    }

    fn mul_raw(&self, o: &Expr) -> Expr {
        if self.is_zero() || o.is_zero() {
            return Expr::zero();
        }
        let mut factors = self.factors.clone();
        for (f, k) in &o.factors {
            bump(&mut factors, f.clone(), *k);
        }
        let exp = if o.exp.is_zero() {
            self.exp.clone()
        } else if self.exp.is_zero() {
            o.exp.clone()
        } else {
            self.exp.add(&o.exp)
        };
        Expr { coeff: &self.coeff * &o.coeff, exp, factors }
    }

    fn powi_raw(&self, k: i64) -> Expr {
        let factors = self
            .factors
            .iter()
            .map(|(f, e)| (f.clone(), e * k as i32))
            .filter(|(_, e)| *e != 0)
            .collect();
        Expr { coeff: pow_q(&self.coeff, k as i32), exp: self.exp.scale(&q(k)), factors }
    }

    pub fn mul(&self, o: &Expr) -> Expr {
        let mut e = self.mul_raw(o);
        e.fix_roots();
        e.cancel();
        e
    }

    pub fn checked_div(&self, o: &Expr) -> Option<Expr> {
        if o.is_zero() {
            return None;
        }
        Some(self.mul(&o.powi(-1)))
    }

    pub fn powi(&self, k: i64) -> Expr {
        if k == 0 {
            return Expr::one();
        }
        if self.is_zero() {
            assert!(k > 0, "zero raised to a negative power");
            return Expr::zero();
        }
        let mut e = self.powi_raw(k);
        e.fix_roots();
        e
    }

    /// Rational power; non-integer exponents create root kernels.
    pub fn pow(&self, r: &Q) -> Option<Expr> {
        if r.is_integer() {
            let k = r.to_integer().to_i64()?;
            if self.is_zero() && k < 0 {
                return None;
            }
            return Some(self.powi(k));
        }
        if self.is_zero() {
            return (r.is_positive()).then(Expr::zero);
        }
        let fl = r.floor();
        let frac = r - &fl;
        let base = self.powi(fl.to_integer().to_i64()?);
        let root = if frac == qfrac(1, 2) {
            Expr::kernel(Kernel::Sqrt, self.clone())
        } else {
            Expr::kernel(Kernel::Pow(frac), self.clone())
        };
        Some(base.mul(&root))
    }

    pub fn neg(&self) -> Expr {
        let mut e = self.clone();
        e.coeff = -e.coeff;
        e
    }

    pub fn add(&self, o: &Expr) -> Expr {
        Expr::sum([self.clone(), o.clone()])
    }

    pub fn sub(&self, o: &Expr) -> Expr {
        Expr::sum([self.clone(), o.neg()])
    }

    pub fn scale(&self, c: &Q) -> Expr {
        if c.is_zero() {
            return Expr::zero();
        }
        let mut e = self.clone();
        e.coeff *= c;
        e
    }

    pub fn product<I: IntoIterator<Item = Expr>>(items: I) -> Expr {
        items.into_iter().fold(Expr::one(), |a, b| a.mul(&b))
    }

    /// Sum with common-factor extraction.
    pub fn sum<I: IntoIterator<Item = Expr>>(items: I) -> Expr {
        let terms: Vec<Expr> = items.into_iter().filter(|e| !e.is_zero()).collect();
        match terms.len() {
            0 => return Expr::zero(),
            1 => return terms.into_iter().next().unwrap(),
            _ => {}
        }
        if terms.iter().all(|t| t.exp.is_zero() && t.factors.is_empty()) {
            let c: Q = terms.iter().map(|t| t.coeff.clone()).sum();
            return Expr::rational(c);
        }
        // Common exponents: the minimum over all terms, absent meaning zero.
        let mut keys: BTreeSet<&Factor> = BTreeSet::new();
        for t in &terms {
            keys.extend(t.factors.keys());
        }
        let mut common: BTreeMap<Factor, i32> = BTreeMap::new();
        for f in keys {
            let m = terms.iter().map(|t| t.factors.get(f).copied().unwrap_or(0)).min().unwrap();
            if m != 0 {
                common.insert(f.clone(), m);
            }
        }
        let e0 = terms[0].exp.clone();
        let mut total = Poly::zero();
        for t in &terms {
            let shift = if t.exp == e0 { Poly::zero() } else { t.exp.sub(&e0) };
            let mut residual: Vec<(&Factor, u32)> = t
                .factors
                .iter()
                .filter_map(|(f, k)| {
                    let r = k - common.get(f).copied().unwrap_or(0);
                    (r > 0).then_some((f, r as u32))
                })
                .collect();
            // Denominators this term lacks must be multiplied back in.
            for (f, m) in &common {
                if *m < 0 && !t.factors.contains_key(f) {
                    residual.push((f, (-m) as u32));
                }
            }
            let p = expand(&t.coeff, &shift, residual.into_iter());
            total = total.add(&p);
        }
        if total.is_zero() {
            return Expr::zero();
        }
        let mut e = Expr { coeff: Q::one(), exp: e0, factors: common };
        e.absorb_poly(&total, 1);
        e.fix_roots();
        e.cancel();
        e
    }

    /// Square roots squared become their arguments.
    fn fix_roots(&mut self) {
        let roots: Vec<(Factor, i32)> = self
            .factors
            .iter()
            .filter(|(f, k)| matches!(f, Factor::Atom(Atom::Fn(Kernel::Sqrt, _))) && k.abs() >= 2)
            .map(|(f, k)| (f.clone(), *k))
            .collect();
        for (f, k) in roots {
            let Factor::Atom(Atom::Fn(_, arg)) = &f else { unreachable!() };
            let whole = k / 2;
            let rem = k - 2 * whole;
            self.factors.remove(&f);
            if rem != 0 {
                self.factors.insert(f.clone(), rem);
            }
            let extra = arg.powi(whole as i64);
            *self = self.mul_raw(&extra);
        }
    }

    /// Cancel polynomial factors between numerator and denominator when one
    /// divides the other exactly.
    fn cancel(&mut self) {
        for _ in 0..32 {
            let pos: Vec<Poly> = self
                .factors
                .iter()
                .filter_map(|(f, k)| match f {
                    Factor::Poly(p) if *k > 0 => Some(p.clone()),
                    _ => None,
                })
                .collect();
            let neg: Vec<Poly> = self
                .factors
                .iter()
                .filter_map(|(f, k)| match f {
                    Factor::Poly(p) if *k < 0 => Some(p.clone()),
                    _ => None,
                })
                .collect();
            if pos.is_empty() || neg.is_empty() {
                return;
            }
            let mut changed = false;
            'outer: for p in &pos {
                for d in &neg {
                    if let Some(s) = p.div_exact(d) {
                        // p / d = s:  p^a d^-b  ->  p^(a-1) s d^(1-b)
                        bump(&mut self.factors, Factor::Poly(p.clone()), -1);
                        bump(&mut self.factors, Factor::Poly(d.clone()), 1);
                        self.absorb_poly(&s, 1);
                        changed = true;
                        break 'outer;
                    }
                    if let Some(s) = d.div_exact(p) {
                        bump(&mut self.factors, Factor::Poly(p.clone()), -1);
                        bump(&mut self.factors, Factor::Poly(d.clone()), 1);
                        self.absorb_poly(&s, -1);
                        changed = true;
                        break 'outer;
                    }
                }
            }
            if !changed {
                return;
            }
        }
    }

    // ----- kernels -------------------------------------------------------

    pub fn kernel(kind: Kernel, arg: Expr) -> Expr {
        match kind {
            Kernel::Exp => Expr::exp(&arg),
            Kernel::Log => Expr::log(&arg),
            Kernel::Sin => Expr::sin(&arg),
            Kernel::Cos => Expr::cos(&arg),
            Kernel::Sqrt => Expr::sqrt(&arg),
            Kernel::Pow(r) => Expr::from_atom(Atom::Fn(Kernel::Pow(r), Box::new(arg.canonical()))),
        }
    }

    pub fn exp(arg: &Expr) -> Expr {
        match arg.as_poly() {
            Some(e) => Expr { coeff: Q::one(), exp: e, factors: BTreeMap::new() },
            None => Expr::from_atom(Atom::Fn(Kernel::Exp, Box::new(arg.canonical()))),
        }
    }

    pub fn log(arg: &Expr) -> Expr {
        if arg.is_one() {
            return Expr::zero();
        }
        if arg.coeff.is_one() && arg.factors.is_empty() {
            return Expr::from_poly(arg.exp.clone());
        }
        Expr::from_atom(Atom::Fn(Kernel::Log, Box::new(arg.canonical())))
    }

    pub fn sin(arg: &Expr) -> Expr {
        if arg.is_zero() {
            return Expr::zero();
        }
        Expr::from_atom(Atom::Fn(Kernel::Sin, Box::new(arg.canonical())))
    }

    pub fn cos(arg: &Expr) -> Expr {
        if arg.is_zero() {
            return Expr::one();
        }
        Expr::from_atom(Atom::Fn(Kernel::Cos, Box::new(arg.canonical())))
    }

    pub fn sqrt(arg: &Expr) -> Expr {
        if arg.is_zero() || arg.is_one() {
            return arg.clone();
        }
        Expr::from_atom(Atom::Fn(Kernel::Sqrt, Box::new(arg.canonical())))
    }

    /// User function `name(args…)`.
    pub fn opaque(name: &str, args: Vec<Expr>) -> Expr {
        let deriv = vec![0; args.len()];
        Expr::opaque_deriv(name, deriv, args)
    }

    pub fn opaque_deriv(name: &str, deriv: Vec<u32>, args: Vec<Expr>) -> Expr {
        let args = args.iter().map(Expr::canonical).collect();
        Expr::from_atom(Atom::Opaque { name: Arc::from(name), deriv, args })
    }

    // ----- structure queries -------------------------------------------

    pub fn analyze(&self) -> Analysis {
        let free_coords = self.free_coords();
        let max_order = free_coords.iter().map(JetCoord::order).max().unwrap_or(0);
        Analysis { free_coords, max_order }
    }

    pub fn free_coords(&self) -> BTreeSet<JetCoord> {
        let mut s = BTreeSet::new();
        self.collect_coords(&mut s);
        s
    }

    fn collect_coords(&self, s: &mut BTreeSet<JetCoord>) {
        self.exp.collect_coords(s);
        for f in self.factors.keys() {
            match f {
                Factor::Atom(a) => a.collect_coords(s),
                Factor::Poly(p) => p.collect_coords(s),
            }
        }
    }

    pub fn depends_on(&self, c: &JetCoord) -> bool {
        self.exp.depends_on(c)
            || self.factors.keys().any(|f| match f {
                Factor::Atom(a) => a.depends_on(c),
                Factor::Poly(p) => p.depends_on(c),
            })
    }

    pub fn max_order(&self) -> u32 {
        self.free_coords().iter().map(JetCoord::order).max().unwrap_or(0)
    }

    /// Names of opaque functions used anywhere in the expression.
    pub fn opaque_names(&self) -> BTreeSet<String> {
        let mut s = BTreeSet::new();
        self.visit_atoms(&mut |a| {
            if let Atom::Opaque { name, .. } = a {
                s.insert(name.to_string());
            }
        });
        s
    }

    fn visit_atoms(&self, f: &mut dyn FnMut(&Atom)) {
        self.exp.visit_atoms(f);
        for k in self.factors.keys() {
            match k {
                Factor::Atom(a) => a.visit(f),
                Factor::Poly(p) => p.visit_atoms(f),
            }
        }
    }

    // ----- calculus ------------------------------------------------------

    /// Partial derivative treating every coordinate as independent.
    pub fn diff(&self, c: &JetCoord) -> Expr {
        if self.is_zero() || !self.depends_on(c) {
            return Expr::zero();
        }
        let mut terms = Vec::new();
        let de = self.exp.diff(c);
        if !de.is_zero() {
            terms.push(self.mul(&de));
        }
        for (f, k) in &self.factors {
            let df = match f {
                Factor::Atom(a) => a.diff(c),
                Factor::Poly(p) => p.diff(c),
            };
            if df.is_zero() {
                continue;
            }
            let mut rest = self.clone();
            bump(&mut rest.factors, f.clone(), -1);
            rest.coeff *= q(*k as i64);
            terms.push(rest.mul(&df));
        }
        Expr::sum(terms)
    }

    /// Simultaneous substitution of coordinates.
    pub fn subs(&self, map: &BTreeMap<JetCoord, Expr>) -> Expr {
        if map.is_empty() || self.is_zero() {
            return self.clone();
        }
        if !map.keys().any(|c| self.depends_on(c)) {
            return self.clone();
        }
        let mut out = Expr::rational(self.coeff.clone());
        if !self.exp.is_zero() {
            out = out.mul(&Expr::exp(&self.exp.subs(map)));
        }
        for (f, k) in &self.factors {
            let v = match f {
                Factor::Atom(a) => a.subs(map),
                Factor::Poly(p) => p.subs(map),
            };
            if v.is_zero() && *k < 0 {
                // Leave the expression unevaluated rather than divide by zero.
                let mut keep = Expr::one();
                keep.factors.insert(f.clone(), *k);
                out = out.mul_raw(&keep);
                continue;
            }
            out = out.mul(&v.powi(*k as i64));
        }
        out
    }

    pub fn subs_one(&self, c: &JetCoord, v: &Expr) -> Expr {
        let mut m = BTreeMap::new();
        m.insert(c.clone(), v.clone());
        self.subs(&m)
    }

    /// Degree in the coordinate `c` when the expression is a polynomial in it.
    pub fn degree_in(&self, c: &JetCoord) -> Option<u32> {
        let (n, d) = self.num_den();
        if d.depends_on(c) {
            return None;
        }
        let mut deg = 0;
        for m in n.terms.keys() {
            if m.exp.depends_on(c) {
                return None;
            }
            for (a, k) in &m.atoms {
                match a {
                    Atom::Coord(x) if x == c => deg = deg.max(*k),
                    other if other.depends_on(c) => return None,
                    _ => {}
                }
            }
        }
        Some(deg)
    }

    /// Coefficients `[c0, c1, …]` of `self = Σ c_k · v^k` for a coordinate `v`
    /// appearing polynomially in the numerator; the denominator is kept.
    pub fn coefficients_in(&self, v: &JetCoord) -> Option<Vec<Expr>> {
        let (n, d) = self.num_den();
        if d.depends_on(v) {
            return None;
        }
        let deg = self.degree_in(v)?;
        let mut out = vec![Poly::zero(); deg as usize + 1];
        for (m, c) in &n.terms {
            let k = m.atoms.get(&Atom::Coord(v.clone())).copied().unwrap_or(0);
            let mut mm = m.clone();
            mm.atoms.remove(&Atom::Coord(v.clone()));
            out[k as usize].add_term(mm, c.clone());
        }
        let den = Expr::from_poly(d);
        Some(out.into_iter().map(|p| Expr::from_poly(p).checked_div(&den).unwrap()).collect())
    }
}

fn bump(map: &mut BTreeMap<Factor, i32>, f: Factor, k: i32) {
    if k == 0 {
        return;
    }
    let e = map.entry(f.clone()).or_insert(0);
    *e += k;
    if *e == 0 {
        map.remove(&f);
    }
}

fn pow_q(c: &Q, k: i32) -> Q {
    if k >= 0 {
        num_traits::pow(c.clone(), k as usize)
    } else {
        num_traits::pow(Q::one() / c, (-k) as usize)
    }
}

fn expand<'a>(c: &Q, e: &Poly, factors: impl Iterator<Item = (&'a Factor, u32)>) -> Poly {
    let mut mono = Mono::exp_only(e.clone());
    let mut polys = Vec::new();
    for (f, k) in factors {
        match f {
            Factor::Atom(a) => {
                *mono.atoms.entry(a.clone()).or_insert(0) += k;
            }
            Factor::Poly(p) => polys.push((p, k)),
        }
    }
    let mut r = Poly::from_mono(mono, c.clone());
    for (p, k) in polys {
        r = r.mul(&p.pow(k));
    }
    r
}

impl Atom {
    fn collect_coords(&self, s: &mut BTreeSet<JetCoord>) {
        match self {
            Atom::Coord(c) => {
                s.insert(c.clone());
            }
            Atom::Fn(_, a) => a.collect_coords(s),
            Atom::Opaque { args, .. } => args.iter().for_each(|a| a.collect_coords(s)),
        }
    }

    fn depends_on(&self, c: &JetCoord) -> bool {
        match self {
            Atom::Coord(x) => x == c,
            Atom::Fn(_, a) => a.depends_on(c),
            Atom::Opaque { args, .. } => args.iter().any(|a| a.depends_on(c)),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Atom)) {
        f(self);
        match self {
            Atom::Coord(_) => {}
            Atom::Fn(_, a) => a.visit_atoms(f),
            Atom::Opaque { args, .. } => args.iter().for_each(|a| a.visit_atoms(f)),
        }
    }

    pub fn as_expr(&self) -> Expr {
        match self {
            Atom::Fn(k, a) => Expr::kernel(k.clone(), (**a).clone()),
            other => Expr::from_atom(other.clone()),
        }
    }

    fn diff(&self, c: &JetCoord) -> Expr {
        match self {
            Atom::Coord(x) => {
                if x == c {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Atom::Fn(kind, arg) => {
                let da = arg.diff(c);
                if da.is_zero() {
                    return Expr::zero();
                }
                let outer = match kind {
                    Kernel::Exp => self.as_expr(),
                    Kernel::Log => arg.powi(-1),
                    Kernel::Sin => Expr::cos(arg),
                    Kernel::Cos => Expr::sin(arg).neg(),
                    Kernel::Sqrt => Expr::sqrt(arg).powi(-1).scale(&qfrac(1, 2)),
                    Kernel::Pow(r) => {
                        let r1 = r - Q::one();
                        arg.pow(&r1).expect("nonzero base").scale(r)
                    }
                };
                outer.mul(&da)
            }
            Atom::Opaque { name, deriv, args } => {
                let mut terms = Vec::new();
                for (i, a) in args.iter().enumerate() {
                    let da = a.diff(c);
                    if da.is_zero() {
                        continue;
                    }
                    let mut d = deriv.clone();
                    d[i] += 1;
                    let f = Expr::from_atom(Atom::Opaque { name: name.clone(), deriv: d, args: args.clone() });
                    terms.push(f.mul(&da));
                }
                Expr::sum(terms)
            }
        }
    }

    fn subs(&self, map: &BTreeMap<JetCoord, Expr>) -> Expr {
        match self {
            Atom::Coord(c) => map.get(c).cloned().unwrap_or_else(|| Expr::from_atom(self.clone())),
            Atom::Fn(kind, arg) => {
                if !map.keys().any(|c| arg.depends_on(c)) {
                    return Expr::from_atom(self.clone());
                }
                Expr::kernel(kind.clone(), arg.subs(map))
            }
            Atom::Opaque { name, deriv, args } => {
                if !map.keys().any(|c| args.iter().any(|a| a.depends_on(c))) {
                    return Expr::from_atom(self.clone());
                }
                Expr::opaque_deriv(name, deriv.clone(), args.iter().map(|a| a.subs(map)).collect())
            }
        }
    }
}

impl Poly {
    fn collect_coords(&self, s: &mut BTreeSet<JetCoord>) {
        for m in self.terms.keys() {
            m.exp.collect_coords(s);
            for a in m.atoms.keys() {
                a.collect_coords(s);
            }
        }
    }

    pub fn depends_on(&self, c: &JetCoord) -> bool {
        self.terms.keys().any(|m| m.exp.depends_on(c) || m.atoms.keys().any(|a| a.depends_on(c)))
    }

    fn visit_atoms(&self, f: &mut dyn FnMut(&Atom)) {
        for m in self.terms.keys() {
            m.exp.visit_atoms(f);
            for a in m.atoms.keys() {
                a.visit(f);
            }
        }
    }

    pub fn diff(&self, c: &JetCoord) -> Expr {
        if !self.depends_on(c) {
            return Expr::zero();
        }
        let mut acc = Poly::zero();
        let mut extra = Vec::new();
        for (m, coef) in &self.terms {
            for (a, k) in &m.atoms {
                let da = a.diff(c);
                if da.is_zero() {
                    continue;
                }
                let mut rest = m.clone();
                if *k == 1 {
                    rest.atoms.remove(a);
                } else {
                    *rest.atoms.get_mut(a).unwrap() -= 1;
                }
                let s = coef * q(*k as i64);
                match da.as_poly() {
                    Some(pd) => acc = acc.add(&pd.mul_mono(&rest, &s)),
                    None => extra.push(Expr::from_mono(&rest, s).mul(&da)),
                }
            }
            if m.exp.depends_on(c) {
                let de = m.exp.diff(c);
                match de.as_poly() {
                    Some(pd) => acc = acc.add(&pd.mul_mono(m, coef)),
                    None => extra.push(Expr::from_mono(m, coef.clone()).mul(&de)),
                }
            }
        }
        extra.push(Expr::from_poly(acc));
        Expr::sum(extra)
    }

    pub fn subs(&self, map: &BTreeMap<JetCoord, Expr>) -> Expr {
        if !map.keys().any(|c| self.depends_on(c)) {
            return Expr::from_poly(self.clone());
        }
        let mut cache: BTreeMap<&Atom, Expr> = BTreeMap::new();
        for m in self.terms.keys() {
            for a in m.atoms.keys() {
                if !cache.contains_key(a) {
                    cache.insert(a, a.subs(map));
                }
            }
        }
        let all_poly: Option<BTreeMap<&Atom, Poly>> =
            cache.iter().map(|(a, e)| e.as_poly().map(|p| (*a, p))).collect();
        if let Some(polys) = all_poly {
            let mut acc = Poly::zero();
            let mut extra = Vec::new();
            for (m, coef) in &self.terms {
                let mut t = Poly::constant(coef.clone());
                for (a, k) in &m.atoms {
                    t = t.mul(&polys[a].pow(*k));
                }
                if m.exp.is_zero() {
                    acc = acc.add(&t);
                } else {
                    let ee = Expr::exp(&m.exp.subs(map));
                    match ee.as_poly() {
                        Some(pe) => acc = acc.add(&t.mul(&pe)),
                        None => extra.push(Expr::from_poly(t).mul(&ee)),
                    }
                }
            }
            extra.push(Expr::from_poly(acc));
            return Expr::sum(extra);
        }
        let mut terms = Vec::new();
        for (m, coef) in &self.terms {
            let mut t = Expr::rational(coef.clone());
            for (a, k) in &m.atoms {
                t = t.mul(&cache[a].powi(*k as i64));
            }
            if !m.exp.is_zero() {
                t = t.mul(&Expr::exp(&m.exp.subs(map)));
            }
            terms.push(t);
        }
        Expr::sum(terms)
    }
}

impl<'a> Add<&'a Expr> for &'a Expr {
    type Output = Expr;
    fn add(self, o: &Expr) -> Expr {
        Expr::add(self, o)
    }
}

impl<'a> Sub<&'a Expr> for &'a Expr {
    type Output = Expr;
    fn sub(self, o: &Expr) -> Expr {
        Expr::sub(self, o)
    }
}

impl<'a> Mul<&'a Expr> for &'a Expr {
    type Output = Expr;
    fn mul(self, o: &Expr) -> Expr {
        Expr::mul(self, o)
    }
}

impl Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

impl From<i64> for Expr {
    fn from(n: i64) -> Expr {
        Expr::int(n)
    }
}

impl From<Q> for Expr {
    fn from(c: Q) -> Expr {
        Expr::rational(c)
    }
}

#[cfg(test)]
mod tests;
