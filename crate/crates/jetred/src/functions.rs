//! Builtin numeric functions usable in initial conditions.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::expr::FnProvider;

/// A univariate function with derivatives of any order.
pub trait Builtin: Send + Sync {
    fn eval(&self, deriv: u32, x: f64) -> f64;
}

/// P(x) = ∫_{−1}^{x} (1 − s²)^p ds on [−1, 1], constant outside: a
/// non-decreasing curve whose derivative is a compactly supported bump.
#[derive(Clone, Debug)]
pub struct BumpIntegral {
    /// Ascending coefficients of P on [−1, 1].
    coeffs: Vec<f64>,
    total: f64,
}

impl BumpIntegral {
    pub fn new(p: u32) -> Self {
        // (1 − s²)^p = Σ_k C(p,k) (−1)^k s^{2k}
        let mut c = vec![0.0; 2 * p as usize + 2];
        let mut binom = 1.0;
        for k in 0..=p as usize {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            c[2 * k + 1] = sign * binom / (2 * k + 1) as f64;
            binom = binom * (p as usize - k) as f64 / (k + 1) as f64;
        }
        let mut b = BumpIntegral { coeffs: c, total: 0.0 };
        // Shift so that P(−1) = 0.
        let at_minus = b.poly(0, -1.0);
        b.coeffs[0] = -at_minus;
        b.total = b.poly(0, 1.0);
        b
    }

    fn poly(&self, deriv: u32, x: f64) -> f64 {
        let mut acc = 0.0;
        for (n, c) in self.coeffs.iter().enumerate().skip(deriv as usize).rev() {
            let f: f64 = (0..deriv).map(|k| (n as u32 - k) as f64).product();
            acc = acc * x + c * f;
        }
        acc
    }
}

impl Builtin for BumpIntegral {
    fn eval(&self, deriv: u32, x: f64) -> f64 {
        if x <= -1.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return if deriv == 0 { self.total } else { 0.0 };
        }
        self.poly(deriv, x)
    }
}

/// Named builtins; implements `FnProvider` for compiled expressions.
#[derive(Clone, Default)]
pub struct FunctionTable {
    map: BTreeMap<String, Arc<dyn Builtin>>,
}

impl std::fmt::Debug for FunctionTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.map.keys()).finish()
    }
}

impl FunctionTable {
    pub fn standard() -> Self {
        let mut t = FunctionTable::default();
        t.insert("bump_cdf4", BumpIntegral::new(4));
        t.insert("bump_cdf8", BumpIntegral::new(8));
        t
    }

    pub fn insert(&mut self, name: &str, f: impl Builtin + 'static) {
        self.map.insert(name.to_string(), Arc::new(f));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }
}

impl FnProvider for FunctionTable {
    fn call(&self, name: &str, deriv: &[u32], args: &[f64]) -> Option<f64> {
        let f = self.map.get(name)?;
        if args.len() != 1 {
            return None;
        }
        Some(f.eval(deriv.first().copied().unwrap_or(0), args[0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_integral_matches_quadrature() {
        let b = BumpIntegral::new(4);
        // ∫_{−1}^{1} (1 − s²)^4 = 256/315
        assert!((b.eval(0, 1.0) - 256.0 / 315.0).abs() < 1e-14);
        assert!((b.eval(0, 2.0) - 256.0 / 315.0).abs() < 1e-14);
        assert_eq!(b.eval(0, -3.0), 0.0);
        // Trapezoid check of the interior value.
        let n = 20000;
        let (a, x) = (-1.0, 0.3);
        let h = (x - a) / n as f64;
        let f = |s: f64| (1.0 - s * s).powi(4);
        let trap: f64 = (0..n).map(|i| 0.5 * h * (f(a + i as f64 * h) + f(a + (i + 1) as f64 * h))).sum();
        assert!((b.eval(0, x) - trap).abs() < 1e-8);
        for k in 1..4 {
            let fd = (b.eval(k - 1, x + 1e-6) - b.eval(k - 1, x - 1e-6)) / 2e-6;
            assert!((b.eval(k, x) - fd).abs() < 1e-6, "derivative {k}");
        }
        assert!((b.eval(1, x) - f(x)).abs() < 1e-14);
    }
}
