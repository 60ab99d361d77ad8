//! Sparse polynomials over ℚ whose monomials carry an exponential factor.
//!
//! A monomial is `Π atom^k · exp(E)` with `E` itself a polynomial. The
//! exponential part forms a group, so exact division never fails on it; only
//! the atom exponents have to be divisible.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use num_traits::{One, Zero};

use super::{Atom, Q};

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mono {
    pub(crate) atoms: BTreeMap<Atom, u32>,
    pub(crate) exp: Poly,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Poly {
    pub(crate) terms: BTreeMap<Mono, Q>,
}

impl Mono {
    pub fn one() -> Mono {
        Mono::default()
    }

    pub fn atom(a: Atom, k: u32) -> Mono {
        let mut atoms = BTreeMap::new();
        if k > 0 {
            atoms.insert(a, k);
        }
        Mono { atoms, exp: Poly::zero() }
    }

    pub fn exp_only(e: Poly) -> Mono {
        Mono { atoms: BTreeMap::new(), exp: e }
    }

    pub fn is_one(&self) -> bool {
        self.atoms.is_empty() && self.exp.is_zero()
    }

    pub fn degree(&self) -> u32 {
        self.atoms.values().sum()
    }

    pub fn atoms(&self) -> &BTreeMap<Atom, u32> {
        &self.atoms
    }

    pub fn exp_part(&self) -> &Poly {
        &self.exp
    }

    pub fn mul(&self, o: &Mono) -> Mono {
        let mut atoms = self.atoms.clone();
        for (a, k) in &o.atoms {
            *atoms.entry(a.clone()).or_insert(0) += k;
        }
        let exp = if o.exp.is_zero() {
            self.exp.clone()
        } else if self.exp.is_zero() {
            o.exp.clone()
        } else {
            self.exp.add(&o.exp)
        };
        Mono { atoms, exp }
    }

    /// `self / o` when every atom exponent of `o` is covered.
    pub fn div(&self, o: &Mono) -> Option<Mono> {
        let mut atoms = self.atoms.clone();
        for (a, k) in &o.atoms {
            let e = atoms.get_mut(a)?;
            if *e < *k {
                return None;
            }
            *e -= k;
            if *e == 0 {
                atoms.remove(a);
            }
        }
        let exp = if o.exp.is_zero() { self.exp.clone() } else { self.exp.sub(&o.exp) };
        Some(Mono { atoms, exp })
    }
}

/// Graded order on atom exponents, ties broken lexicographically and then by
/// the exponential part. Compatible with multiplication.
pub fn mono_cmp(a: &Mono, b: &Mono) -> Ordering {
    let da = a.degree();
    let db = b.degree();
    if da != db {
        return da.cmp(&db);
    }
    let mut ia = a.atoms.iter().peekable();
    let mut ib = b.atoms.iter().peekable();
    loop {
        match (ia.peek(), ib.peek()) {
            (None, None) => break,
            (Some(_), None) => return Ordering::Greater,
            (None, Some(_)) => return Ordering::Less,
            (Some((ka, ea)), Some((kb, eb))) => match ka.cmp(kb) {
                Ordering::Less => return Ordering::Greater,
                Ordering::Greater => return Ordering::Less,
                Ordering::Equal => {
                    if ea != eb {
                        return ea.cmp(eb);
                    }
                    ia.next();
                    ib.next();
                }
            },
        }
    }
    exp_cmp(&a.exp, &b.exp)
}

/// Lexicographic comparison of coefficient vectors; invariant under adding
/// the same polynomial to both sides.
fn exp_cmp(a: &Poly, b: &Poly) -> Ordering {
    let mut ia = a.terms.iter().peekable();
    let mut ib = b.terms.iter().peekable();
    let zero = Q::zero();
    loop {
        let (ka, ca, kb, cb) = match (ia.peek(), ib.peek()) {
            (None, None) => return Ordering::Equal,
            (Some((ka, ca)), None) => (Some(*ka), *ca, None, &zero),
            (None, Some((kb, cb))) => (None, &zero, Some(*kb), *cb),
            (Some((ka, ca)), Some((kb, cb))) => (Some(*ka), *ca, Some(*kb), *cb),
        };
        match (ka, kb) {
            (Some(ka), Some(kb)) if ka == kb => {
                if ca != cb {
                    return ca.cmp(cb);
                }
                ia.next();
                ib.next();
            }
            (Some(ka), Some(kb)) => {
                if ka < kb {
                    return ca.cmp(&zero);
                }
                return zero.cmp(cb);
            }
            (Some(_), None) => return ca.cmp(&zero),
            (None, Some(_)) => return zero.cmp(cb),
            (None, None) => return Ordering::Equal,
        }
    }
}

impl Poly {
    pub fn zero() -> Poly {
        Poly::default()
    }

    pub fn constant(q: Q) -> Poly {
        Poly::from_mono(Mono::one(), q)
    }

    pub fn from_mono(m: Mono, q: Q) -> Poly {
        let mut p = Poly::zero();
        p.add_term(m, q);
        p
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Mono, &Q)> {
        self.terms.iter()
    }

    pub fn add_term(&mut self, m: Mono, q: Q) {
        if q.is_zero() {
            return;
        }
        match self.terms.get_mut(&m) {
            Some(c) => {
                *c += q;
                if c.is_zero() {
                    self.terms.remove(&m);
                }
            }
            None => {
                self.terms.insert(m, q);
            }
        }
    }

    pub fn add(&self, o: &Poly) -> Poly {
        let (mut big, small) = if self.len() >= o.len() { (self.clone(), o) } else { (o.clone(), self) };
        for (m, q) in &small.terms {
            big.add_term(m.clone(), q.clone());
        }
        big
    }

    pub fn neg(&self) -> Poly {
        Poly { terms: self.terms.iter().map(|(m, q)| (m.clone(), -q)).collect() }
    }

    pub fn sub(&self, o: &Poly) -> Poly {
        let mut r = self.clone();
        for (m, q) in &o.terms {
            r.add_term(m.clone(), -q);
        }
        r
    }

    pub fn scale(&self, c: &Q) -> Poly {
        if c.is_zero() {
            return Poly::zero();
        }
        Poly { terms: self.terms.iter().map(|(m, q)| (m.clone(), q * c)).collect() }
    }

    pub fn mul_mono(&self, m: &Mono, c: &Q) -> Poly {
        let mut r = Poly::zero();
        for (mm, q) in &self.terms {
            r.add_term(mm.mul(m), q * c);
        }
        r
    }

    pub fn mul(&self, o: &Poly) -> Poly {
        let mut r = Poly::zero();
        for (m1, q1) in &self.terms {
            for (m2, q2) in &o.terms {
                r.add_term(m1.mul(m2), q1 * q2);
            }
        }
        r
    }

    pub fn pow(&self, k: u32) -> Poly {
        let mut r = Poly::constant(Q::one());
        let mut base = self.clone();
        let mut k = k;
        while k > 0 {
            if k & 1 == 1 {
                r = r.mul(&base);
            }
            k >>= 1;
            if k > 0 {
                base = base.mul(&base);
            }
        }
        r
    }

    pub fn as_constant(&self) -> Option<Q> {
        match self.terms.len() {
            0 => Some(Q::zero()),
            1 => {
                let (m, q) = self.terms.iter().next().unwrap();
                m.is_one().then(|| q.clone())
            }
            _ => None,
        }
    }

    pub fn leading(&self) -> Option<(&Mono, &Q)> {
        self.terms.iter().max_by(|a, b| mono_cmp(a.0, b.0))
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.keys().map(Mono::degree).max().unwrap_or(0)
    }

    /// Exact quotient `self / d`, or `None` when `d` does not divide `self`
    /// (or the division does not settle within a bounded number of steps).
    pub fn div_exact(&self, d: &Poly) -> Option<Poly> {
        if d.is_zero() {
            return None;
        }
        if self.is_zero() {
            return Some(Poly::zero());
        }
        if self.total_degree() < d.total_degree() {
            return None;
        }
        let (ld, lc) = d.leading()?;
        let (ld, lc) = (ld.clone(), lc.clone());
        let mut r = self.clone();
        let mut q = Poly::zero();
        let max_steps = 16 + 4 * (self.len() + 1) * (d.len() + 1);
        for _ in 0..max_steps {
            let (lr, rc) = match r.leading() {
                None => return Some(q),
                Some((m, c)) => (m.clone(), c.clone()),
            };
            let m = lr.div(&ld)?;
            let c = rc / &lc;
            r = r.sub(&d.mul_mono(&m, &c));
            q.add_term(m, c);
        }
        None
    }

    /// Split off the numeric content, the exponential of the leading term and
    /// the common atom content: `self = c · exp(E) · Π a^k · rest`.
    /// `rest` is `None` when it would be the constant 1.
    pub fn normalize(&self) -> Option<(Q, Poly, BTreeMap<Atom, u32>, Option<Poly>)> {
        if self.is_zero() {
            return None;
        }
        if self.terms.len() == 1 {
            let (m, q) = self.terms.iter().next().unwrap();
            return Some((q.clone(), m.exp.clone(), m.atoms.clone(), None));
        }
        let (lm, lc) = self.leading().unwrap();
        let lc = lc.clone();
        let lexp = lm.exp.clone();
        let mut content: BTreeMap<Atom, u32> = lm.atoms.clone();
        for m in self.terms.keys() {
            content.retain(|a, k| match m.atoms.get(a) {
                Some(e) => {
                    *k = (*k).min(*e);
                    true
                }
                None => false,
            });
            if content.is_empty() {
                break;
            }
        }
        let divisor = Mono { atoms: content.clone(), exp: lexp.clone() };
        let inv = Q::one() / &lc;
        let mut rest = Poly::zero();
        for (m, q) in &self.terms {
            rest.add_term(m.div(&divisor).expect("content divides"), q * &inv);
        }
        Some((lc, lexp, content, Some(rest)))
    }
}
