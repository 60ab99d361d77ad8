//! Characteristic fields V̄_F = V_F − Σ hⁱ Dᵢ, their one-parameter flows,
//! flow verification, prolongation and composed pullbacks.

use std::collections::BTreeMap;

use num_traits::One;
use thiserror::Error;

use crate::calculus::{total_derivative, CalcError, EvolutionField, Prolongation};
use crate::coords::{JetCoord, MultiIndex, Space};
use crate::expr::{equal, Expr, Verdict, Q};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlowError {
    #[error(transparent)]
    Calc(#[from] CalcError),
    #[error("D_x of the pulled-back x is identically zero")]
    DegenerateJacobian,
    #[error("coordinate `{0}` is not tracked by the flow")]
    UntrackedCoordinate(String),
    #[error("prolongation is implemented for one independent variable only")]
    NotOneDimensional,
}

/// Components of V̄_F on tracked coordinates up to a given order.
#[derive(Clone, Debug)]
pub struct CharacteristicField {
    pub field: EvolutionField,
    pub h: Vec<Expr>,
    pub components: BTreeMap<JetCoord, Expr>,
    pub order: u32,
}

fn multi_indices(m: usize, max: u32) -> Vec<MultiIndex> {
    let mut out = vec![MultiIndex::zero()];
    let mut frontier = vec![MultiIndex::zero()];
    for _ in 0..max {
        let mut next = Vec::new();
        for s in &frontier {
            // Only bump directions at or after the last nonzero entry, so each
            // multi-index is produced once.
            let start = s.entries().len().saturating_sub(1);
            for i in start..m {
                next.push(s.bump(i));
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn characteristic_field(
    f: &EvolutionField,
    h: &[Expr],
    order: u32,
    space: &Space,
) -> Result<CharacteristicField, CalcError> {
    let mut components = BTreeMap::new();
    for (i, hi) in h.iter().enumerate() {
        components.insert(JetCoord::x(i), hi.neg());
    }
    let mut pro = Prolongation::new(f, space);
    for j in 0..f.n() {
        for sigma in multi_indices(space.m(), order) {
            let mut terms = vec![pro.component(j, &sigma)?];
            for (i, hi) in h.iter().enumerate() {
                if hi.is_zero() {
                    continue;
                }
                let up = sigma.bump(i);
                if up.order() > space.max_order {
                    return Err(CalcError::OrderCapExceeded { order: up.order(), cap: space.max_order });
                }
                terms.push(hi.mul(&Expr::coord(JetCoord::deriv(j, up))).neg());
            }
            components.insert(JetCoord::deriv(j, sigma), Expr::sum(terms));
        }
    }
    Ok(CharacteristicField { field: f.clone(), h: h.to_vec(), components, order })
}

/// Heuristic drift for quasi-linear fields: hⁱ = ∂F^j/∂u^j_{x^i}, required to
/// be the same for every component and free of derivatives.
pub fn propose_h(f: &EvolutionField, space: &Space) -> Option<Vec<Expr>> {
    let mut h = Vec::new();
    for i in 0..space.m() {
        let mut common: Option<Expr> = None;
        for (j, fj) in f.components.iter().enumerate() {
            let c = fj.diff(&JetCoord::deriv(j, MultiIndex::single(i, 1)));
            if c.max_order() > 0 {
                return None;
            }
            match &common {
                None => common = Some(c),
                Some(prev) if *prev == c => {}
                Some(_) => return None,
            }
        }
        h.push(common.unwrap_or_else(Expr::zero));
    }
    Some(h)
}

/// One-parameter family of pullbacks Φ*_a.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    pub param: String,
    pub pullbacks: BTreeMap<JetCoord, Expr>,
    pub source: String,
}

impl FlowMap {
    pub fn param_coord(&self) -> JetCoord {
        JetCoord::param(&self.param)
    }

    /// Highest derivative order with an explicit pullback.
    pub fn tracked_order(&self) -> u32 {
        self.pullbacks.keys().map(JetCoord::order).max().unwrap_or(0)
    }

    pub fn get(&self, c: &JetCoord) -> Option<&Expr> {
        self.pullbacks.get(c)
    }

    /// Pullback of a coordinate; untracked parameters are fixed.
    pub fn pull_coord(&self, c: &JetCoord) -> Result<Expr, FlowError> {
        if let Some(e) = self.pullbacks.get(c) {
            return Ok(e.clone());
        }
        match c {
            JetCoord::Param(_) => Ok(Expr::coord(c.clone())),
            _ => Err(FlowError::UntrackedCoordinate(format!("{c:?}"))),
        }
    }

    /// Φ*_a(e); prolongs on demand in one space dimension.
    pub fn pull(&self, e: &Expr, space: &Space) -> Result<Expr, FlowError> {
        let need = e.max_order();
        let ext;
        let map = if need > self.tracked_order() {
            ext = prolong_flow_1d(self, need, space)?;
            &ext.pullbacks
        } else {
            &self.pullbacks
        };
        let mut sub = BTreeMap::new();
        for c in e.free_coords() {
            if let JetCoord::Param(_) = c {
                continue;
            }
            match map.get(&c) {
                Some(v) => {
                    sub.insert(c, v.clone());
                }
                None => return Err(FlowError::UntrackedCoordinate(format!("{c:?}"))),
            }
        }
        Ok(e.subs(&sub))
    }

    pub fn identity(param: &str, space: &Space) -> FlowMap {
        let mut pullbacks = BTreeMap::new();
        for i in 0..space.m() {
            pullbacks.insert(JetCoord::x(i), Expr::coord(JetCoord::x(i)));
        }
        for j in 0..space.n() {
            pullbacks.insert(JetCoord::u(j), Expr::u(j));
        }
        FlowMap { param: param.to_string(), pullbacks, source: "identity".into() }
    }
}

/// Pullbacks of u_(k) for k ≤ n via Φ*(u_(k)) = D_x Φ*(u_(k−1)) / D_x Φ*(x).
pub fn prolong_flow_1d(flow: &FlowMap, n: u32, space: &Space) -> Result<FlowMap, FlowError> {
    if space.m() != 1 {
        return Err(FlowError::NotOneDimensional);
    }
    let x = JetCoord::x(0);
    let px = flow.pull_coord(&x)?;
    let jac = total_derivative(&px, 0, space)?;
    if jac.is_zero() {
        return Err(FlowError::DegenerateJacobian);
    }
    let mut out = flow.clone();
    for j in 0..space.n() {
        let mut prev = flow.pull_coord(&JetCoord::u(j))?;
        for k in 1..=n {
            let c = JetCoord::ux(j, k);
            let next = match out.pullbacks.get(&c) {
                Some(e) => e.clone(),
                None => {
                    let num = total_derivative(&prev, 0, space)?;
                    let e = num.checked_div(&jac).ok_or(FlowError::DegenerateJacobian)?;
                    out.pullbacks.insert(c, e.clone());
                    e
                }
            };
            prev = next;
        }
    }
    Ok(out)
}

/// Build the flow of V̄_F from a small catalog of integrable patterns on the
/// order-0 part (x, u¹…uⁿ): nilpotent Lie series, affine scaling with a
/// rate invariant under the field and the Möbius flow of a quadratic.
/// Returns `None` otherwise.
pub fn catalog_flow(f: &EvolutionField, h: &[Expr], param: &str, space: &Space) -> Option<FlowMap> {
    let cf = characteristic_field(f, h, 0, space).ok()?;
    let base: Vec<JetCoord> = (0..space.m()).map(JetCoord::x).chain((0..space.n()).map(JetCoord::u)).collect();
    let mut field: BTreeMap<JetCoord, Expr> = BTreeMap::new();
    for c in &base {
        let comp = cf.components.get(c).cloned().unwrap_or_else(Expr::zero);
        // The order-0 part must close on (x, u).
        if comp.free_coords().iter().any(|k| !k.is_param() && !base.contains(k)) {
            return None;
        }
        field.insert(c.clone(), comp);
    }
    let a = Expr::param(param);
    let mut pullbacks = BTreeMap::new();
    for c in &base {
        pullbacks.insert(c.clone(), integrate_coordinate(c, &field, &a)?);
    }
    let flow = FlowMap { param: param.to_string(), pullbacks, source: "catalog".into() };
    Some(flow)
}

/// X(e) for the order-0 vector field X.
fn apply_field(field: &BTreeMap<JetCoord, Expr>, e: &Expr) -> Expr {
    Expr::sum(field.iter().filter(|(c, _)| e.depends_on(c)).map(|(c, v)| v.mul(&e.diff(c))))
}

fn integrate_coordinate(c: &JetCoord, field: &BTreeMap<JetCoord, Expr>, a: &Expr) -> Option<Expr> {
    let g = Expr::coord(c.clone());
    let xg = apply_field(field, &g);
    // Nilpotent: exp(aX) g terminates.
    let mut terms = vec![g.clone()];
    let mut cur = xg.clone();
    let mut fact = Q::one();
    for k in 1..=8u32 {
        if cur.is_zero() {
            return Some(Expr::sum(terms));
        }
        fact *= Q::from_integer(k.into());
        terms.push(a.powi(k as i64).mul(&cur).scale(&(Q::one() / &fact)));
        cur = apply_field(field, &cur);
    }
    // X g = k g + m with X k = X m = 0: g ↦ e^{ka} g + m (e^{ka} − 1)/k.
    if let Some(k) = linear_rate(&xg, c) {
        let m = xg.sub(&g.mul(&k));
        if apply_field(field, &m).is_zero() && apply_field(field, &k).is_zero() && !k.is_zero() {
            let e = Expr::exp(&a.mul(&k));
            if m.is_zero() {
                return Some(e.mul(&g));
            }
            let shift = m.mul(&e.sub(&Expr::one())).checked_div(&k)?;
            return Some(e.mul(&g).add(&shift));
        }
    }
    // X g = k g²: g ↦ g / (1 − k a g).
    let ratio = xg.checked_div(&g.powi(2))?;
    if let Some(kq) = ratio.as_rational() {
        let den = Expr::one().sub(&a.mul(&g).scale(&kq));
        return g.checked_div(&den);
    }
    None
}

/// Slope k when `e` is affine in coordinate `c`.
fn linear_rate(e: &Expr, c: &JetCoord) -> Option<Expr> {
    let coeffs = e.coefficients_in(c)?;
    if coeffs.len() > 2 {
        return None;
    }
    coeffs.get(1).cloned()
}

/// Outcome of checking ∂_a Φ*(c) = Φ*(V̄(c)) and Φ*_0 = id.
#[derive(Clone, Debug, PartialEq)]
pub enum FlowVerdict {
    EqualCanonical,
    EqualNumeric,
    Fail { coord: JetCoord, detail: String },
}

impl FlowVerdict {
    pub fn passed(&self) -> bool {
        !matches!(self, FlowVerdict::Fail { .. })
    }
}

pub fn verify_flow(cf: &CharacteristicField, flow: &FlowMap, order: u32, space: &Space) -> FlowVerdict {
    let a = flow.param_coord();
    let mut numeric = false;
    let flow = if space.m() == 1 {
        match prolong_flow_1d(flow, order + 1, space) {
            Ok(f) => f,
            Err(e) => return FlowVerdict::Fail { coord: JetCoord::x(0), detail: e.to_string() },
        }
    } else {
        flow.clone()
    };
    for (c, comp) in &cf.components {
        if c.order() > order {
            continue;
        }
        let Some(pc) = flow.get(c) else {
            return FlowVerdict::Fail { coord: c.clone(), detail: "no pullback".into() };
        };
        let at0 = pc.subs_one(&a, &Expr::zero());
        if at0 != Expr::coord(c.clone()) {
            return FlowVerdict::Fail { coord: c.clone(), detail: "pullback at a = 0 is not the identity".into() };
        }
        let lhs = pc.diff(&a);
        let rhs = match flow.pull(comp, space) {
            Ok(r) => r,
            Err(e) => return FlowVerdict::Fail { coord: c.clone(), detail: e.to_string() },
        };
        match equal(&lhs, &rhs) {
            Ok(Verdict::EqualCanonical) => {}
            Ok(Verdict::EqualNumeric) => numeric = true,
            Ok(Verdict::NotEqual(_)) => {
                return FlowVerdict::Fail { coord: c.clone(), detail: "flow equation violated".into() };
            }
            Err(e) => return FlowVerdict::Fail { coord: c.clone(), detail: e.to_string() },
        }
    }
    if numeric {
        FlowVerdict::EqualNumeric
    } else {
        FlowVerdict::EqualCanonical
    }
}

/// 𝚽*(e) = Φ¹*(Φ²*(…Φʰ*(e))): the last flow is applied first.
pub fn compose_pullback(flows: &[FlowMap], e: &Expr, space: &Space) -> Result<Expr, FlowError> {
    let mut r = e.clone();
    for f in flows.iter().rev() {
        r = f.pull(&r, space)?;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, ParseContext};

    fn p(s: &str) -> Expr {
        parse_expr(s, &ParseContext::permissive()).unwrap()
    }

    fn p2(s: &str) -> Expr {
        let ctx = ParseContext { auto_declare: true, ..ParseContext::new(Space::new(["x"], ["u", "v"])) };
        parse_expr(s, &ctx).unwrap()
    }

    #[test]
    fn characteristic_of_burgers_term() {
        let sp = Space::scalar();
        let cf = characteristic_field(&EvolutionField::scalar(p("u*u_x")), &[p("u")], 2, &sp).unwrap();
        assert_eq!(cf.components[&JetCoord::x(0)], p("-u"));
        assert!(cf.components[&JetCoord::u(0)].is_zero());
        assert_eq!(cf.components[&JetCoord::ux(0, 1)], p("u_x^2"));
        assert_eq!(cf.components[&JetCoord::ux(0, 2)], p("3*u_xx*u_x"));
    }

    #[test]
    fn heuristic_h() {
        let sp = Space::scalar();
        assert_eq!(propose_h(&EvolutionField::scalar(p("u*u_x")), &sp), Some(vec![p("u")]));
        assert_eq!(propose_h(&EvolutionField::scalar(p("x*u_x")), &sp), Some(vec![p("x")]));
        assert_eq!(propose_h(&EvolutionField::scalar(p("u^2")), &sp), Some(vec![Expr::zero()]));
    }

    #[test]
    fn burgers_flow_and_prolongation() {
        let sp = Space::scalar();
        let f = EvolutionField::scalar(p("u*u_x"));
        let flow = catalog_flow(&f, &[p("u")], "a", &sp).unwrap();
        assert_eq!(flow.pullbacks[&JetCoord::x(0)], p("x - a*u"));
        let pro = prolong_flow_1d(&flow, 2, &sp).unwrap();
        assert_eq!(pro.pullbacks[&JetCoord::ux(0, 1)], p("u_x/(1 - a*u_x)"));
        // The quotient rule gives the cube.
        assert_eq!(pro.pullbacks[&JetCoord::ux(0, 2)], p("u_xx/(1 - a*u_x)^3"));
        let cf = characteristic_field(&f, &[p("u")], 3, &sp).unwrap();
        assert_eq!(verify_flow(&cf, &flow, 3, &sp), FlowVerdict::EqualCanonical);
    }

    #[test]
    fn mobius_and_tampered() {
        let sp = Space::scalar();
        let f = EvolutionField::scalar(p("u^2"));
        let flow = catalog_flow(&f, &[Expr::zero()], "d", &sp).unwrap();
        assert_eq!(flow.pullbacks[&JetCoord::u(0)], p("u/(1 - d*u)"));
        let cf = characteristic_field(&f, &[Expr::zero()], 3, &sp).unwrap();
        assert!(verify_flow(&cf, &flow, 3, &sp).passed());
        let mut bad = flow.clone();
        bad.pullbacks.insert(JetCoord::u(0), p("u/(1 - 2*d*u)"));
        match verify_flow(&cf, &bad, 3, &sp) {
            FlowVerdict::Fail { coord, .. } => assert_eq!(coord, JetCoord::u(0)),
            v => panic!("expected failure, got {v:?}"),
        }
    }

    #[test]
    fn position_dependent_scaling() {
        let sp = Space::scalar();
        let f = EvolutionField::scalar(p("x*u"));
        let flow = catalog_flow(&f, &[Expr::zero()], "a", &sp).unwrap();
        assert_eq!(flow.pullbacks[&JetCoord::u(0)], p("exp(a*x)*u"));
        let cf = characteristic_field(&f, &[Expr::zero()], 3, &sp).unwrap();
        assert!(verify_flow(&cf, &flow, 3, &sp).passed());
    }

    #[test]
    fn unrecognized_field() {
        let sp = Space::scalar();
        assert!(catalog_flow(&EvolutionField::scalar(p("u*u_xx")), &[Expr::zero()], "a", &sp).is_none());
    }

    #[test]
    fn hunter_saxton_g2_flow() {
        let sp = Space::new(["x"], ["u", "v"]);
        let f = EvolutionField::new(vec![p2("u*u_x - v/2"), p2("u*v_x")]);
        let h = propose_h(&f, &sp).unwrap();
        let flow = catalog_flow(&f, &h, "b", &sp).unwrap();
        assert_eq!(flow.pullbacks[&JetCoord::x(0)], p2("x - b*u + b^2*v/4"));
        assert_eq!(flow.pullbacks[&JetCoord::u(0)], p2("u - b*v/2"));
        assert_eq!(flow.pullbacks[&JetCoord::u(1)], p2("v"));
        let cf = characteristic_field(&f, &h, 3, &sp).unwrap();
        assert!(verify_flow(&cf, &flow, 3, &sp).passed());
    }

    #[test]
    fn translation_keeps_derivatives() {
        let sp = Space::scalar();
        let flow = catalog_flow(&EvolutionField::scalar(p("u_x")), &[Expr::one()], "a", &sp).unwrap();
        assert_eq!(flow.pullbacks[&JetCoord::x(0)], p("x - a"));
        let pro = prolong_flow_1d(&flow, 5, &sp).unwrap();
        for n in 1..=5 {
            assert_eq!(pro.pullbacks[&JetCoord::ux(0, n)], Expr::ux(0, n));
        }
    }

    #[test]
    fn degenerate_jacobian() {
        let sp = Space::scalar();
        let mut flow = FlowMap::identity("a", &sp);
        flow.pullbacks.insert(JetCoord::x(0), p("a"));
        assert_eq!(prolong_flow_1d(&flow, 1, &sp), Err(FlowError::DegenerateJacobian));
    }

    #[test]
    fn hjm_composed_pullback() {
        let sp = Space::new(["x"], ["v"]);
        let ctx = ParseContext { auto_declare: true, ..ParseContext::new(sp.clone()) }.with_function("f", 1);
        let pv = |s: &str| parse_expr(s, &ctx).unwrap();
        let gens = [("v_x", "a"), ("1", "b"), ("v", "c"), ("v^2", "d")];
        let mut flows = Vec::new();
        for (g, a) in gens {
            let f = EvolutionField::scalar(pv(g));
            let h = propose_h(&f, &sp).unwrap();
            let flow = catalog_flow(&f, &h, a, &sp).unwrap();
            let cf = characteristic_field(&f, &h, 2, &sp).unwrap();
            assert!(verify_flow(&cf, &flow, 2, &sp).passed(), "{g}");
            flows.push(flow);
        }
        assert_eq!(flows[2].pullbacks[&JetCoord::u(0)], pv("exp(c)*v"));
        let got = compose_pullback(&flows, &pv("v - f(x)"), &sp).unwrap();
        let want = pv("exp(c)*(v + b)/(1 - d*exp(c)*(v + b)) - f(x - a)");
        assert!(equal(&got, &want).unwrap().is_equal());
    }

    #[test]
    fn hunter_saxton_g1_scaling() {
        let sp = Space::new(["x"], ["u", "v"]);
        let f = EvolutionField::new(vec![p2("x*u_x"), p2("x*v_x + v")]);
        let h = propose_h(&f, &sp).unwrap();
        let flow = catalog_flow(&f, &h, "a", &sp).unwrap();
        assert_eq!(flow.pullbacks[&JetCoord::x(0)], p2("exp(-a)*x"));
        assert_eq!(flow.pullbacks[&JetCoord::u(0)], p2("u"));
        assert_eq!(flow.pullbacks[&JetCoord::u(1)], p2("exp(a)*v"));
        let cf = characteristic_field(&f, &h, 2, &sp).unwrap();
        assert!(verify_flow(&cf, &flow, 2, &sp).passed());
    }

    #[test]
    fn group_law() {
        let sp = Space::scalar();
        for g in ["u*u_x", "u^2", "x*u_x", "u + 1"] {
            let f = EvolutionField::scalar(p(g));
            let h = propose_h(&f, &sp).unwrap();
            let fa = catalog_flow(&f, &h, "a", &sp).unwrap();
            let fb = catalog_flow(&f, &h, "b", &sp).unwrap();
            let fab = catalog_flow(&f, &h, "s", &sp).unwrap();
            let s = JetCoord::param("s");
            for (c, e) in &fab.pullbacks {
                let lhs = fa.pull(&fb.pullbacks[c], &sp).unwrap();
                let rhs = e.subs_one(&s, &p("a + b"));
                assert!(equal(&lhs, &rhs).unwrap().is_equal(), "{g} at {c:?}");
            }
        }
    }
}
