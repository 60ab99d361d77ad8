//! Floating-point evaluation, either directly on an expression or through a
//! compiled program with positional coordinate slots.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use num_traits::{Float, ToPrimitive};
use thiserror::Error;

use super::{Atom, Expr, Factor, Kernel, Mono, Poly, Q};
use crate::coords::JetCoord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no value bound for `{0}`")]
    MissingBinding(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Numeric implementations of user functions. `deriv[i]` counts partial
/// derivatives in argument `i`.
pub trait FnProvider: Sync {
    fn call(&self, name: &str, deriv: &[u32], args: &[f64]) -> Option<f64>;
}

pub struct NoFunctions;

impl FnProvider for NoFunctions {
    fn call(&self, _: &str, _: &[u32], _: &[f64]) -> Option<f64> {
        None
    }
}

/// A deterministic smooth function per name: a short trigonometric sum with
/// exact derivatives of every order. Used to sample unknown functions.
pub struct SmoothRandomFunctions {
    pub seed: u64,
}

impl SmoothRandomFunctions {
    fn waves(&self, name: &str, arity: usize) -> Vec<(f64, Vec<f64>, f64)> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        name.hash(&mut h);
        arity.hash(&mut h);
        self.seed.hash(&mut h);
        let mut state = h.finish() | 1;
        let mut next = move || {
            // xorshift64*
            state ^= state >> 12;
            state ^= state << 25;
            state ^= state >> 27;
            (state.wrapping_mul(0x2545_F491_4F6C_DD1D) >> 11) as f64 / (1u64 << 53) as f64
        };
        (0..3)
            .map(|_| {
                let amp = 0.5 + next();
                let w: Vec<f64> = (0..arity).map(|_| 0.3 + 1.2 * next()).collect();
                let phase = 6.0 * next();
                (amp, w, phase)
            })
            .collect()
    }
}

impl FnProvider for SmoothRandomFunctions {
    fn call(&self, name: &str, deriv: &[u32], args: &[f64]) -> Option<f64> {
        let total: u32 = deriv.iter().sum();
        let mut s = 0.0;
        for (amp, w, phase) in self.waves(name, args.len()) {
            let theta: f64 = w.iter().zip(args).map(|(a, b)| a * b).sum::<f64>() + phase;
            let scale: f64 = w.iter().zip(deriv).map(|(wi, &d)| wi.powi(d as i32)).product();
            s += amp * scale * (theta + total as f64 * std::f64::consts::FRAC_PI_2).sin();
        }
        // Keep values away from zero so that quotients stay well conditioned.
        if total == 0 {
            s += 3.0;
        }
        Some(s)
    }
}

fn q_to<T: Float>(q: &Q) -> T {
    T::from(q.to_f64().unwrap_or(f64::NAN)).unwrap()
}

fn checked<T: Float>(v: T, what: &str) -> Result<T, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::Domain(what.to_string()))
    }
}

fn apply_kernel<T: Float>(k: &Kernel, a: T) -> Result<T, EvalError> {
    let zero = T::zero();
    match k {
        Kernel::Exp => checked(a.exp(), "exp overflow"),
        Kernel::Log => {
            if a <= zero {
                Err(EvalError::Domain("log of a non-positive value".into()))
            } else {
                Ok(a.ln())
            }
        }
        Kernel::Sin => Ok(a.sin()),
        Kernel::Cos => Ok(a.cos()),
        Kernel::Sqrt => {
            if a < zero {
                Err(EvalError::Domain("sqrt of a negative value".into()))
            } else {
                Ok(a.sqrt())
            }
        }
        Kernel::Pow(r) => {
            if a < zero {
                Err(EvalError::Domain("fractional power of a negative value".into()))
            } else {
                Ok(a.powf(q_to(r)))
            }
        }
    }
}

fn powi<T: Float>(b: T, k: i32) -> Result<T, EvalError> {
    if k < 0 && b == T::zero() {
        return Err(EvalError::Domain("division by zero".into()));
    }
    checked(b.powi(k), "overflow")
}

struct Evaluator<'a, T, L> {
    lookup: &'a L,
    fns: &'a dyn FnProvider,
    _t: std::marker::PhantomData<T>,
}

impl<T: Float, L: Fn(&JetCoord) -> Option<T>> Evaluator<'_, T, L> {
    fn expr(&self, e: &Expr) -> Result<T, EvalError> {
        if e.is_zero() {
            return Ok(T::zero());
        }
        let mut v: T = q_to(&e.coeff);
        if !e.exp.is_zero() {
            v = v * checked(self.poly(&e.exp)?.exp(), "exp overflow")?;
        }
        for (f, k) in &e.factors {
            let b = match f {
                Factor::Atom(a) => self.atom(a)?,
                Factor::Poly(p) => self.poly(p)?,
            };
            v = v * powi(b, *k)?;
        }
        Ok(v)
    }

    fn poly(&self, p: &Poly) -> Result<T, EvalError> {
        let mut s = T::zero();
        for (m, c) in &p.terms {
            s = s + q_to::<T>(c) * self.mono(m)?;
        }
        Ok(s)
    }

    fn mono(&self, m: &Mono) -> Result<T, EvalError> {
        let mut v = T::one();
        for (a, k) in &m.atoms {
            v = v * self.atom(a)?.powi(*k as i32);
        }
        if !m.exp.is_zero() {
            v = v * self.poly(&m.exp)?.exp();
        }
        Ok(v)
    }

    fn atom(&self, a: &Atom) -> Result<T, EvalError> {
        match a {
            Atom::Coord(c) => (self.lookup)(c).ok_or_else(|| EvalError::MissingBinding(format!("{c:?}"))),
            Atom::Fn(k, arg) => apply_kernel(k, self.expr(arg)?),
            Atom::Opaque { name, deriv, args } => {
                let xs: Vec<f64> = args
                    .iter()
                    .map(|e| self.expr(e).map(|v| v.to_f64().unwrap_or(f64::NAN)))
                    .collect::<Result<_, _>>()?;
                let r = self
                    .fns
                    .call(name, deriv, &xs)
                    .ok_or_else(|| EvalError::MissingBinding(format!("function `{name}`")))?;
                checked(T::from(r).unwrap(), "function value")
            }
        }
    }
}

impl Expr {
    /// Evaluate with coordinate values from `lookup`.
    pub fn eval_with<T: Float, L: Fn(&JetCoord) -> Option<T>>(
        &self,
        lookup: &L,
        fns: &dyn FnProvider,
    ) -> Result<T, EvalError> {
        let ev = Evaluator { lookup, fns, _t: std::marker::PhantomData };
        checked(ev.expr(self)?, "non-finite result")
    }

    pub fn eval<T: Float>(&self, at: &BTreeMap<JetCoord, T>, fns: &dyn FnProvider) -> Result<T, EvalError> {
        self.eval_with(&|c: &JetCoord| at.get(c).copied(), fns)
    }

    /// `eval` with f64 and no user functions.
    pub fn eval_f64(&self, at: &BTreeMap<JetCoord, f64>) -> Result<f64, EvalError> {
        self.eval(at, &NoFunctions)
    }
}

#[derive(Clone, Debug)]
enum Node {
    Const(f64),
    Slot(usize),
    Add(Vec<usize>),
    Mul(Vec<usize>),
    Powi(usize, i32),
    Kernel(Kernel, usize),
    Call { name: String, deriv: Vec<u32>, args: Vec<usize> },
}

/// Expression compiled to a flat node list over positional inputs.
#[derive(Clone, Debug)]
pub struct NumExpr {
    nodes: Vec<Node>,
    root: usize,
}

/// Compile `e` against `slots`; every free coordinate must have a slot.
pub fn compile(e: &Expr, slots: &[JetCoord]) -> Result<NumExpr, EvalError> {
    let mut c = Compiler { slots, nodes: Vec::new(), memo: BTreeMap::new() };
    let root = c.expr(e)?;
    Ok(NumExpr { nodes: c.nodes, root })
}

struct Compiler<'a> {
    slots: &'a [JetCoord],
    nodes: Vec<Node>,
    memo: BTreeMap<Atom, usize>,
}

impl Compiler<'_> {
    fn push(&mut self, n: Node) -> usize {
        self.nodes.push(n);
        self.nodes.len() - 1
    }

    fn expr(&mut self, e: &Expr) -> Result<usize, EvalError> {
        if e.is_zero() {
            return Ok(self.push(Node::Const(0.0)));
        }
        let mut parts = vec![self.push(Node::Const(q_to(&e.coeff)))];
        if !e.exp.is_zero() {
            let p = self.poly(&e.exp)?;
            parts.push(self.push(Node::Kernel(Kernel::Exp, p)));
        }
        for (f, k) in &e.factors {
            let b = match f {
                Factor::Atom(a) => self.atom(a)?,
                Factor::Poly(p) => self.poly(p)?,
            };
            parts.push(if *k == 1 { b } else { self.push(Node::Powi(b, *k)) });
        }
        Ok(if parts.len() == 1 { parts[0] } else { self.push(Node::Mul(parts)) })
    }

    fn poly(&mut self, p: &Poly) -> Result<usize, EvalError> {
        let mut terms = Vec::new();
        for (m, c) in &p.terms {
            let mut parts = vec![self.push(Node::Const(q_to(c)))];
            for (a, k) in &m.atoms {
                let b = self.atom(a)?;
                parts.push(if *k == 1 { b } else { self.push(Node::Powi(b, *k as i32)) });
            }
            if !m.exp.is_zero() {
                let ep = self.poly(&m.exp)?;
                parts.push(self.push(Node::Kernel(Kernel::Exp, ep)));
            }
            terms.push(if parts.len() == 1 { parts[0] } else { self.push(Node::Mul(parts)) });
        }
        Ok(match terms.len() {
            0 => self.push(Node::Const(0.0)),
            1 => terms[0],
            _ => self.push(Node::Add(terms)),
        })
    }

    fn atom(&mut self, a: &Atom) -> Result<usize, EvalError> {
        if let Some(&i) = self.memo.get(a) {
            return Ok(i);
        }
        let i = match a {
            Atom::Coord(c) => {
                let s = self
                    .slots
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| EvalError::MissingBinding(format!("{c:?}")))?;
                self.push(Node::Slot(s))
            }
            Atom::Fn(k, arg) => {
                let x = self.expr(arg)?;
                self.push(Node::Kernel(k.clone(), x))
            }
            Atom::Opaque { name, deriv, args } => {
                let args = args.iter().map(|e| self.expr(e)).collect::<Result<_, _>>()?;
                self.push(Node::Call { name: name.to_string(), deriv: deriv.clone(), args })
            }
        };
        self.memo.insert(a.clone(), i);
        Ok(i)
    }
}

impl NumExpr {
    /// Evaluate with inputs in slot order. `scratch` is reused between calls.
    pub fn eval_into(&self, inputs: &[f64], fns: &dyn FnProvider, scratch: &mut Vec<f64>) -> Result<f64, EvalError> {
        scratch.clear();
        scratch.reserve(self.nodes.len());
        for n in &self.nodes {
            let v = match n {
                Node::Const(c) => *c,
                Node::Slot(s) => inputs[*s],
                Node::Add(v) => v.iter().map(|&i| scratch[i]).sum(),
                Node::Mul(v) => v.iter().map(|&i| scratch[i]).product(),
                Node::Powi(b, k) => powi(scratch[*b], *k)?,
                Node::Kernel(k, x) => apply_kernel(k, scratch[*x])?,
                Node::Call { name, deriv, args } => {
                    let xs: Vec<f64> = args.iter().map(|&i| scratch[i]).collect();
                    fns.call(name, deriv, &xs)
                        .ok_or_else(|| EvalError::MissingBinding(format!("function `{name}`")))?
                }
            };
            scratch.push(v);
        }
        checked(scratch[self.root], "non-finite result")
    }

    pub fn eval(&self, inputs: &[f64], fns: &dyn FnProvider) -> Result<f64, EvalError> {
        thread_local! {
            static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
        }
        // Provider callbacks may evaluate other expressions; fall back to a
        // fresh buffer when the shared one is taken.
        SCRATCH.with(|s| match s.try_borrow_mut() {
            Ok(mut buf) => self.eval_into(inputs, fns, &mut buf),
            Err(_) => self.eval_into(inputs, fns, &mut Vec::new()),
        })
    }
}
