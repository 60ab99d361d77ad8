//! Jet-space coordinates: independent variables, dependent variables with
//! their formal derivatives, and named parameters.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Default cap on the total order |σ| of any derivative coordinate.
pub const DEFAULT_MAX_ORDER: u32 = 32;

/// Number of derivatives taken along each independent variable.
///
/// Trailing zeros are trimmed, so the representation does not depend on the
/// number of independent variables.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn zero() -> Self {
        MultiIndex(Vec::new())
    }

    pub fn new(mut entries: Vec<u32>) -> Self {
        while entries.last() == Some(&0) {
            entries.pop();
        }
        MultiIndex(entries)
    }

    /// `n` derivatives along variable `i`.
    pub fn single(i: usize, n: u32) -> Self {
        let mut v = vec![0; i + 1];
        v[i] = n;
        Self::new(v)
    }

    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> u32 {
        self.0.get(i).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    /// σ + 1_i
    pub fn bump(&self, i: usize) -> Self {
        let mut v = self.0.clone();
        if v.len() <= i {
            v.resize(i + 1, 0);
        }
        v[i] += 1;
        MultiIndex(v)
    }

    pub fn add(&self, other: &MultiIndex) -> Self {
        let n = self.0.len().max(other.0.len());
        Self::new((0..n).map(|i| self.get(i) + other.get(i)).collect())
    }
}

/// A coordinate function on the jet space.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum JetCoord {
    /// Independent variable x^i.
    Indep(usize),
    /// Dependent variable u^j differentiated σ times; σ = 0 is u^j itself.
    Dep { j: usize, sigma: MultiIndex },
    /// Named constant (flow parameter, model parameter, state symbol).
    Param(Arc<str>),
}

impl JetCoord {
    pub fn x(i: usize) -> Self {
        JetCoord::Indep(i)
    }

    pub fn u(j: usize) -> Self {
        JetCoord::Dep { j, sigma: MultiIndex::zero() }
    }

    pub fn deriv(j: usize, sigma: MultiIndex) -> Self {
        JetCoord::Dep { j, sigma }
    }

    /// `u^j` differentiated `n` times along the first independent variable.
    pub fn ux(j: usize, n: u32) -> Self {
        JetCoord::Dep { j, sigma: MultiIndex::single(0, n) }
    }

    pub fn param(name: &str) -> Self {
        JetCoord::Param(Arc::from(name))
    }

    /// Derivative order; zero for everything that is not a derivative.
    pub fn order(&self) -> u32 {
        match self {
            JetCoord::Dep { sigma, .. } => sigma.order(),
            _ => 0,
        }
    }

    pub fn is_param(&self) -> bool {
        matches!(self, JetCoord::Param(_))
    }

    pub fn param_name(&self) -> Option<&str> {
        match self {
            JetCoord::Param(p) => Some(p),
            _ => None,
        }
    }
}

/// Names and dimensions of the jet space J(M, N).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Space {
    pub indep: Vec<String>,
    pub dep: Vec<String>,
    pub max_order: u32,
}

impl Space {
    pub fn new<S: Into<String>>(
        indep: impl IntoIterator<Item = S>,
        dep: impl IntoIterator<Item = S>,
    ) -> Self {
        Space {
            indep: indep.into_iter().map(Into::into).collect(),
            dep: dep.into_iter().map(Into::into).collect(),
            max_order: DEFAULT_MAX_ORDER,
        }
    }

    /// One independent variable `x`, one dependent variable `u`.
    pub fn scalar() -> Self {
        Space::new(["x"], ["u"])
    }

    pub fn m(&self) -> usize {
        self.indep.len()
    }

    pub fn n(&self) -> usize {
        self.dep.len()
    }

    pub fn indep_index(&self, name: &str) -> Option<usize> {
        self.indep.iter().position(|s| s == name)
    }

    pub fn dep_index(&self, name: &str) -> Option<usize> {
        self.dep.iter().position(|s| s == name)
    }

    pub fn coord_name(&self, c: &JetCoord) -> String {
        match c {
            JetCoord::Indep(i) => self.indep.get(*i).cloned().unwrap_or_else(|| format!("x{i}")),
            JetCoord::Param(p) => p.to_string(),
            JetCoord::Dep { j, sigma } => {
                let base = self.dep.get(*j).cloned().unwrap_or_else(|| format!("u{j}"));
                if sigma.is_zero() {
                    return base;
                }
                let single_letters = self.indep.iter().all(|s| s.chars().count() == 1);
                if self.m() <= 1 {
                    let n = sigma.order();
                    let xname = self.indep.first().map(String::as_str).unwrap_or("x");
                    if n <= 3 && single_letters {
                        format!("{base}_{}", xname.repeat(n as usize))
                    } else {
                        format!("{base}_{{({n})}}")
                    }
                } else if single_letters && sigma.order() <= 4 {
                    let mut s = format!("{base}_");
                    for (i, &k) in sigma.entries().iter().enumerate() {
                        for _ in 0..k {
                            s.push_str(&self.indep[i]);
                        }
                    }
                    s
                } else {
                    let mut s = format!("d({base}");
                    for (i, &k) in sigma.entries().iter().enumerate() {
                        if k > 0 {
                            s.push_str(&format!(", {}, {k}", self.indep[i]));
                        }
                    }
                    s.push(')');
                    s
                }
            }
        }
    }
}

impl Default for Space {
    fn default() -> Self {
        Space::scalar()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, ")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_index_trims_and_bumps() {
        let s = MultiIndex::new(vec![2, 0, 0]);
        assert_eq!(s, MultiIndex::single(0, 2));
        assert_eq!(s.bump(1).order(), 3);
        assert!(MultiIndex::new(vec![0, 0]).is_zero());
    }

    #[test]
    fn derivative_names() {
        let sp = Space::new(["x"], ["u", "v"]);
        assert_eq!(sp.coord_name(&JetCoord::ux(0, 2)), "u_xx");
        assert_eq!(sp.coord_name(&JetCoord::ux(1, 1)), "v_x");
        assert_eq!(sp.coord_name(&JetCoord::ux(0, 5)), "u_{(5)}");
        assert_eq!(sp.coord_name(&JetCoord::u(1)), "v");
        let sp2 = Space::new(["x", "y"], ["u"]);
        assert_eq!(sp2.coord_name(&JetCoord::deriv(0, MultiIndex::new(vec![1, 2]))), "u_xyy");
    }
}
