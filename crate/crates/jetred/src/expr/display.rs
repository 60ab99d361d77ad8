//! Printing in the input grammar, so that printed expressions parse back.

use std::fmt::{self, Write};

use num_traits::{One, Signed, Zero};

use super::{mono_cmp, Atom, Expr, Factor, Kernel, Mono, Poly, Q};
use crate::coords::Space;

/// `Display` adapter binding an expression to coordinate names.
pub struct ExprDisplay<'a> {
    expr: &'a Expr,
    space: &'a Space,
}

impl Expr {
    pub fn display<'a>(&'a self, space: &'a Space) -> ExprDisplay<'a> {
        ExprDisplay { expr: self, space }
    }

    pub fn to_string_in(&self, space: &Space) -> String {
        self.display(space).to_string()
    }
}

impl fmt::Display for ExprDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_expr(self.expr, self.space))
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_expr(self, &Space::scalar()))
    }
}

fn rational(q: &Q) -> String {
    if q.is_integer() {
        q.numer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

/// Renders a signed product `c * parts / den`; returns the text without the
/// sign and whether it is negative.
fn product(c: &Q, num: &[String], den: &[String]) -> (bool, String) {
    let neg = c.is_negative();
    let a = c.abs();
    let mut s = String::new();
    let cn = a.numer().clone();
    let cd = a.denom().clone();
    let mut nums: Vec<String> = Vec::new();
    if !cn.is_one() || num.is_empty() {
        nums.push(cn.to_string());
    }
    nums.extend(num.iter().cloned());
    s.push_str(&nums.join("*"));
    let mut dens: Vec<String> = Vec::new();
    if !cd.is_one() {
        dens.push(cd.to_string());
    }
    dens.extend(den.iter().cloned());
    if dens.len() == 1 {
        write!(s, "/{}", dens[0]).unwrap();
    } else if dens.len() > 1 {
        write!(s, "/({})", dens.join("*")).unwrap();
    }
    (neg, s)
}

fn render_expr(e: &Expr, sp: &Space) -> String {
    if e.is_zero() {
        return "0".into();
    }
    if let Some(q) = e.as_rational() {
        return rational(&q);
    }
    let mut num = Vec::new();
    let mut den = Vec::new();
    if !e.exp.is_zero() {
        num.push(format!("exp({})", render_poly(&e.exp, sp)));
    }
    for (fac, k) in &e.factors {
        let base = match fac {
            Factor::Atom(a) => render_atom(a, sp),
            Factor::Poly(p) => format!("({})", render_poly(p, sp)),
        };
        let target = if *k > 0 { &mut num } else { &mut den };
        let m = k.abs();
        if m == 1 {
            target.push(base);
        } else {
            target.push(format!("{base}^{m}"));
        }
    }
    let (neg, body) = product(&e.coeff, &num, &den);
    if neg {
        format!("-{body}")
    } else {
        body
    }
}

fn render_mono(c: &Q, m: &Mono, sp: &Space) -> (bool, String) {
    let mut parts = Vec::new();
    for (a, k) in &m.atoms {
        let base = render_atom(a, sp);
        if *k == 1 {
            parts.push(base);
        } else {
            parts.push(format!("{base}^{k}"));
        }
    }
    if !m.exp.is_zero() {
        parts.push(format!("exp({})", render_poly(&m.exp, sp)));
    }
    product(c, &parts, &[])
}

pub(crate) fn render_poly(p: &Poly, sp: &Space) -> String {
    if p.is_zero() {
        return "0".into();
    }
    let mut terms: Vec<(&Mono, &Q)> = p.terms.iter().collect();
    terms.sort_by(|a, b| mono_cmp(b.0, a.0));
    let mut s = String::new();
    for (i, (m, c)) in terms.into_iter().enumerate() {
        let (neg, body) = render_mono(c, m, sp);
        match (i, neg) {
            (0, false) => s.push_str(&body),
            (0, true) => write!(s, "-{body}").unwrap(),
            (_, false) => write!(s, " + {body}").unwrap(),
            (_, true) => write!(s, " - {body}").unwrap(),
        }
    }
    s
}

fn render_atom(a: &Atom, sp: &Space) -> String {
    match a {
        Atom::Coord(c) => sp.coord_name(c),
        Atom::Fn(k, arg) => {
            let inner = render_expr(arg, sp);
            match k {
                Kernel::Exp => format!("exp({inner})"),
                Kernel::Log => format!("log({inner})"),
                Kernel::Sin => format!("sin({inner})"),
                Kernel::Cos => format!("cos({inner})"),
                Kernel::Sqrt => format!("sqrt({inner})"),
                Kernel::Pow(r) => format!("({inner})^({})", rational(r)),
            }
        }
        Atom::Opaque { name, deriv, args } => {
            let args: Vec<String> = args.iter().map(|e| render_expr(e, sp)).collect();
            let args = args.join(", ");
            if deriv.iter().all(Zero::is_zero) {
                format!("{name}({args})")
            } else if deriv.len() == 1 && deriv[0] <= 3 {
                format!("{name}{}({args})", "'".repeat(deriv[0] as usize))
            } else {
                let d: Vec<String> = deriv.iter().map(u32::to_string).collect();
                format!("{name}[{}]({args})", d.join(","))
            }
        }
    }
}
