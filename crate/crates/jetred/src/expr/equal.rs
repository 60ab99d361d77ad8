//! Three-valued equality: structural after normalization, else sampled.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EvalError, Expr, FnProvider, SmoothRandomFunctions, Q};
use crate::coords::JetCoord;

#[derive(Clone, Debug, PartialEq)]
pub struct Witness {
    pub point: Vec<(JetCoord, f64)>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    EqualCanonical,
    EqualNumeric,
    NotEqual(Box<Witness>),
}

impl Verdict {
    pub fn is_equal(&self) -> bool {
        !matches!(self, Verdict::NotEqual(_))
    }
}

#[derive(Clone, Debug)]
pub struct EqualOptions {
    pub points: usize,
    pub resamples: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for EqualOptions {
    fn default() -> Self {
        EqualOptions { points: 8, resamples: 5, rel_tol: 1e-10, seed: 0x6a65_7472 }
    }
}

/// Compare two expressions. Sample points are rationals in [1/5, 6/5]; both
/// sides are analytic, so agreement on an open box settles identity.
pub fn equal(a: &Expr, b: &Expr) -> Result<Verdict, EvalError> {
    equal_with(a, b, &EqualOptions::default(), &SmoothRandomFunctions { seed: 7 })
}

pub fn equal_with(
    a: &Expr,
    b: &Expr,
    opts: &EqualOptions,
    fns: &dyn FnProvider,
) -> Result<Verdict, EvalError> {
    if a == b || a.sub(b).is_zero() {
        return Ok(Verdict::EqualCanonical);
    }
    let mut coords: Vec<JetCoord> = a.free_coords().into_iter().collect();
    for c in b.free_coords() {
        if !coords.contains(&c) {
            coords.push(c);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.points {
        let mut last_err = None;
        let mut done = false;
        for _ in 0..=opts.resamples {
            let point: BTreeMap<JetCoord, f64> = coords
                .iter()
                .map(|c| {
                    let n: i64 = rng.random_range(200..=1200);
                    let v = Q::new(BigInt::from(n), BigInt::from(1000));
                    (c.clone(), num_traits::ToPrimitive::to_f64(&v).unwrap())
                })
                .collect();
            let va = a.eval(&point, fns);
            let vb = b.eval(&point, fns);
            match (va, vb) {
                (Ok(x), Ok(y)) => {
                    let scale = 1f64.max(x.abs()).max(y.abs());
                    if (x - y).abs() > opts.rel_tol * scale {
                        return Ok(Verdict::NotEqual(Box::new(Witness {
                            point: point.into_iter().collect(),
                            lhs: x,
                            rhs: y,
                        })));
                    }
                    done = true;
                    break;
                }
                (Err(e), _) | (_, Err(e)) => last_err = Some(e),
            }
        }
        if !done {
            return Err(last_err.unwrap());
        }
    }
    Ok(Verdict::EqualNumeric)
}
