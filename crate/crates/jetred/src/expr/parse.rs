//! Expression grammar: rationals and decimals, declared identifiers,
//! derivative coordinates (`u_x`, `u_{(3)}`, `d(u, x, 2)`), point values
//! (`v_x@0`), `+ - * / ^`, and the kernels `exp log sin cos sqrt`.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_traits::Zero;
use thiserror::Error;

use super::{Expr, Q};
use crate::coords::{JetCoord, MultiIndex, Space};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at {pos}")]
    UnknownIdentifier { pos: usize, name: String },
}

/// Names visible to the parser.
#[derive(Clone, Debug, Default)]
pub struct ParseContext {
    pub space: Space,
    pub params: BTreeSet<String>,
    /// User function name and arity.
    pub functions: BTreeMap<String, usize>,
    /// Names that expand to fixed expressions.
    pub aliases: BTreeMap<String, Expr>,
    /// Accept undeclared identifiers as parameters and undeclared calls as
    /// user functions.
    pub auto_declare: bool,
}

impl ParseContext {
    pub fn new(space: Space) -> Self {
        ParseContext { space, ..Default::default() }
    }

    /// Scalar space with every unknown name accepted; convenient in tests.
    pub fn permissive() -> Self {
        ParseContext { auto_declare: true, ..Default::default() }
    }

    pub fn with_params<I: IntoIterator<Item = S>, S: Into<String>>(mut self, names: I) -> Self {
        self.params.extend(names.into_iter().map(Into::into));
        self
    }

    pub fn with_function(mut self, name: &str, arity: usize) -> Self {
        self.functions.insert(name.to_string(), arity);
        self
    }
}

pub fn parse_expr(text: &str, ctx: &ParseContext) -> Result<Expr, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, i: 0, ctx, len: text.len() };
    let e = p.expr()?;
    if p.i < p.toks.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(Q),
    Ident(String),
    Sym(char),
}

fn lex(s: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let b: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || (c == '.' && i + 1 < b.len() && b[i + 1].is_ascii_digit()) {
            let mut j = i;
            while j < b.len() && b[j].is_ascii_digit() {
                j += 1;
            }
            let int: String = b[i..j].iter().collect();
            let mut frac = String::new();
            if j < b.len() && b[j] == '.' {
                j += 1;
                let k = j;
                while j < b.len() && b[j].is_ascii_digit() {
                    j += 1;
                }
                frac = b[k..j].iter().collect();
            }
            let mut exp10: i64 = 0;
            if j < b.len() && (b[j] == 'e' || b[j] == 'E') {
                let mut k = j + 1;
                if k < b.len() && (b[k] == '-' || b[k] == '+') {
                    k += 1;
                }
                if k < b.len() && b[k].is_ascii_digit() {
                    let es = k;
                    while k < b.len() && b[k].is_ascii_digit() {
                        k += 1;
                    }
                    let digits: String = b[es..k].iter().collect();
                    let mag: i64 = digits.parse().map_err(|_| syntax(start, "bad exponent"))?;
                    exp10 = if b[j + 1] == '-' { -mag } else { mag };
                    j = k;
                }
            }
            let digits = format!("{}{}", if int.is_empty() { "0" } else { &int }, frac);
            let n: BigInt = digits.parse().map_err(|_| syntax(start, "bad number"))?;
            let scale = exp10 - frac.len() as i64;
            let ten = BigInt::from(10);
            let v = if scale >= 0 {
                Q::from_integer(n * num_traits::pow(ten, scale as usize))
            } else {
                Q::new(n, num_traits::pow(ten, (-scale) as usize))
            };
            out.push((start, Tok::Num(v)));
            i = j;
            continue;
        }
        if c.is_ascii_alphabetic() {
            let mut j = i;
            while j < b.len() && (b[j].is_ascii_alphanumeric() || b[j] == '_') {
                if b[j] == '_' && j + 1 < b.len() && b[j + 1] == '{' {
                    // u_{(n)}
                    let close = b[j..].iter().position(|&c| c == '}').map(|p| p + j);
                    let Some(close) = close else {
                        return Err(syntax(j, "unclosed `{`"));
                    };
                    j = close + 1;
                    continue;
                }
                j += 1;
            }
            // Point value suffix `@0`, `@1.5`, `@-1`.
            if j < b.len() && b[j] == '@' {
                j += 1;
                if j < b.len() && b[j] == '-' {
                    j += 1;
                }
                while j < b.len() && (b[j].is_ascii_digit() || b[j] == '.' || b[j] == '/') {
                    j += 1;
                }
            }
            while j < b.len() && b[j] == '\'' {
                j += 1;
            }
            out.push((start, Tok::Ident(b[i..j].iter().collect())));
            i = j;
            continue;
        }
        if "+-*/^(),[]".contains(c) {
            out.push((start, Tok::Sym(c)));
            i += 1;
            continue;
        }
        return Err(syntax(start, &format!("unexpected character `{c}`")));
    }
    Ok(out)
}

fn syntax(pos: usize, msg: &str) -> ParseError {
    ParseError::Syntax { pos, msg: msg.to_string() }
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    i: usize,
    ctx: &'a ParseContext,
    len: usize,
}

impl Parser<'_> {
    fn pos(&self) -> usize {
        self.toks.get(self.i).map(|t| t.0).unwrap_or(self.len)
    }

    fn err(&self, msg: &str) -> ParseError {
        syntax(self.pos(), msg)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|t| &t.1)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(&format!("expected `{c}`")))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut terms = vec![self.term()?];
        loop {
            if self.eat('+') {
                terms.push(self.term()?);
            } else if self.eat('-') {
                terms.push(self.term()?.neg());
            } else {
                break;
            }
        }
        Ok(Expr::sum(terms))
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.unary()?;
        loop {
            if self.eat('*') {
                acc = acc.mul(&self.unary()?);
            } else if self.eat('/') {
                let pos = self.pos();
                let d = self.unary()?;
                acc = acc.checked_div(&d).ok_or_else(|| syntax(pos, "division by zero"))?;
            } else {
                break;
            }
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            return Ok(self.unary()?.neg());
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if !self.eat('^') {
            return Ok(base);
        }
        let pos = self.pos();
        let ex = self.unary()?;
        match ex.as_rational() {
            Some(r) => base.pow(&r).ok_or_else(|| syntax(pos, "invalid power of zero")),
            None => Ok(Expr::exp(&ex.mul(&Expr::log(&base)))),
        }
    }

    fn args(&mut self) -> Result<Vec<Expr>, ParseError> {
        self.expect('(')?;
        let mut v = Vec::new();
        if self.eat(')') {
            return Ok(v);
        }
        loop {
            v.push(self.expr()?);
            if self.eat(')') {
                return Ok(v);
            }
            self.expect(',')?;
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.i += 1;
                Ok(Expr::rational(v))
            }
            Some(Tok::Sym('(')) => {
                self.i += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.i += 1;
                let call = self.peek() == Some(&Tok::Sym('('));
                let bracket = self.peek() == Some(&Tok::Sym('['));
                if call || bracket || name.ends_with('\'') {
                    return self.call(pos, &name);
                }
                self.ident(pos, &name)
            }
            _ => Err(self.err("expected an expression")),
        }
    }

    fn call(&mut self, pos: usize, raw: &str) -> Result<Expr, ParseError> {
        let primes = raw.chars().rev().take_while(|&c| c == '\'').count();
        let name = &raw[..raw.len() - primes];
        let mut deriv: Option<Vec<u32>> = None;
        if self.eat('[') {
            let mut d = Vec::new();
            loop {
                match self.peek().cloned() {
                    Some(Tok::Num(v)) if v.is_integer() && v >= Q::zero() => {
                        self.i += 1;
                        d.push(v.to_integer().try_into().map_err(|_| self.err("derivative count too large"))?);
                    }
                    _ => return Err(self.err("expected a derivative count")),
                }
                if self.eat(']') {
                    break;
                }
                self.expect(',')?;
            }
            deriv = Some(d);
        }
        if name == "d" && primes == 0 && deriv.is_none() {
            return self.jet_derivative(pos);
        }
        let args = self.args()?;
        let builtin = |k: fn(&Expr) -> Expr, args: &[Expr]| -> Result<Expr, ParseError> {
            if args.len() != 1 {
                return Err(syntax(pos, "builtin functions take one argument"));
            }
            Ok(k(&args[0]))
        };
        if primes == 0 && deriv.is_none() {
            match name {
                "exp" => return builtin(Expr::exp, &args),
                "log" => return builtin(Expr::log, &args),
                "sin" => return builtin(Expr::sin, &args),
                "cos" => return builtin(Expr::cos, &args),
                "sqrt" => return builtin(Expr::sqrt, &args),
                _ => {}
            }
        }
        match self.ctx.functions.get(name) {
            Some(&arity) if arity != args.len() => {
                return Err(syntax(pos, &format!("`{name}` takes {arity} argument(s)")));
            }
            None if !self.ctx.auto_declare => {
                return Err(ParseError::UnknownIdentifier { pos, name: name.to_string() });
            }
            _ => {}
        }
        let d = match deriv {
            Some(d) => {
                if d.len() != args.len() || primes > 0 {
                    return Err(syntax(pos, "derivative counts must match the argument list"));
                }
                d
            }
            None => {
                let mut d = vec![0; args.len()];
                if primes > 0 {
                    if args.len() != 1 {
                        return Err(syntax(pos, "primes need a single-argument function"));
                    }
                    d[0] = primes as u32;
                }
                d
            }
        };
        Ok(Expr::opaque_deriv(name, d, args))
    }

    /// `d(u, x, 2, y, 1)`; a missing count means 1.
    fn jet_derivative(&mut self, pos: usize) -> Result<Expr, ParseError> {
        self.expect('(')?;
        let sp = &self.ctx.space;
        let j = match self.peek().cloned() {
            Some(Tok::Ident(n)) => sp.dep_index(&n).ok_or(ParseError::UnknownIdentifier { pos, name: n })?,
            _ => return Err(self.err("expected a dependent variable")),
        };
        self.i += 1;
        let mut counts = vec![0u32; sp.m().max(1)];
        while self.eat(',') {
            let var = match self.peek().cloned() {
                Some(Tok::Ident(n)) => sp.indep_index(&n).ok_or_else(|| self.err("expected an independent variable"))?,
                _ => return Err(self.err("expected an independent variable")),
            };
            self.i += 1;
            let mut k = 1;
            if self.eat(',') {
                match self.peek().cloned() {
                    Some(Tok::Num(v)) if v.is_integer() && v > Q::zero() => {
                        self.i += 1;
                        k = v.to_integer().try_into().map_err(|_| self.err("order too large"))?;
                    }
                    Some(Tok::Ident(_)) => {
                        // Next variable, count 1.
                        self.i -= 1;
                    }
                    _ => return Err(self.err("expected a derivative count")),
                }
            }
            counts[var] += k;
        }
        self.expect(')')?;
        let sigma = MultiIndex::new(counts);
        if sigma.order() > sp.max_order {
            return Err(syntax(pos, "derivative order exceeds the configured cap"));
        }
        Ok(Expr::coord(JetCoord::deriv(j, sigma)))
    }

    fn ident(&mut self, pos: usize, name: &str) -> Result<Expr, ParseError> {
        let ctx = self.ctx;
        if let Some(e) = ctx.aliases.get(name) {
            return Ok(e.clone());
        }
        if ctx.params.contains(name) {
            return Ok(Expr::param(name));
        }
        if let Some(i) = ctx.space.indep_index(name) {
            return Ok(Expr::coord(JetCoord::x(i)));
        }
        if let Some(j) = ctx.space.dep_index(name) {
            return Ok(Expr::u(j));
        }
        if let Some((base, at)) = name.split_once('@') {
            // Point value of a jet coordinate, kept as a named constant.
            if self.resolve_jet(base).is_some() && !at.is_empty() {
                return Ok(Expr::param(name));
            }
        }
        if let Some(c) = self.resolve_jet(name) {
            if c.order() > ctx.space.max_order {
                return Err(syntax(pos, "derivative order exceeds the configured cap"));
            }
            return Ok(Expr::coord(c));
        }
        if ctx.auto_declare {
            return Ok(Expr::param(name));
        }
        Err(ParseError::UnknownIdentifier { pos, name: name.to_string() })
    }

    fn resolve_jet(&self, name: &str) -> Option<JetCoord> {
        let sp = &self.ctx.space;
        if let Some(j) = sp.dep_index(name) {
            return Some(JetCoord::u(j));
        }
        let (base, suffix) = name.split_once('_')?;
        let j = sp.dep_index(base)?;
        if let Some(inner) = suffix.strip_prefix("{(").and_then(|s| s.strip_suffix(")}")) {
            let n: u32 = inner.parse().ok()?;
            if sp.m() != 1 {
                return None;
            }
            return Some(JetCoord::ux(j, n));
        }
        if suffix.is_empty() {
            return None;
        }
        let mut counts = vec![0u32; sp.m()];
        for ch in suffix.chars() {
            let i = sp.indep.iter().position(|v| v.len() == 1 && v.starts_with(ch))?;
            counts[i] += 1;
        }
        Some(JetCoord::deriv(j, MultiIndex::new(counts)))
    }
}
