//! Reduction of an SPDE model to a finite-dimensional Stratonovich SDE.
//!
//! Two mechanisms are supported. Flow-transported manifolds: the initial
//! curve u = f(x) is moved by the flows of the generators' characteristic
//! fields and the state is the vector of flow parameters. Moving-coefficient
//! linear-ODE manifolds: u_(n) + Σ μ^k u_(k) = 0 with μ^k and the boundary
//! jet at x = 0 as state.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::calculus::{
    decompose_in_basis, evolution_apply, lie_closure, total_derivative, CalcError, ClosureError, ClosureOptions,
    EvolutionField, LieAlgebra,
};
use crate::coords::{JetCoord, Space};
use crate::expr::{equal, parse_expr, EvalError, Expr, ParseContext, Verdict, Q};
use crate::flows::{catalog_flow, characteristic_field, compose_pullback, propose_h, verify_flow, FlowError, FlowMap};
use crate::functions::FunctionTable;
use crate::model::{DriverKind, Form, SpdeModel};
use crate::phi::{solve_phi, solve_phi_with_drift, verify_phi, PhiError, PhiTable};

#[derive(Debug, Error)]
pub enum ReductionError {
    #[error("{0}")]
    Model(String),
    #[error(transparent)]
    Closure(#[from] ClosureError),
    #[error(transparent)]
    Phi(#[from] PhiError),
    #[error("phi table failed verification: {0}")]
    PhiVerification(String),
    #[error("no verified flow for `{generator}`: {detail}")]
    Flow { generator: String, detail: String },
    #[error(transparent)]
    FlowMap(#[from] FlowError),
    #[error(transparent)]
    Calc(#[from] CalcError),
    #[error("driver `{driver}` does not decompose in the generator span")]
    Decomposition { driver: String },
    #[error(transparent)]
    Tangency(#[from] TangencyError),
    #[error("semigroup check failed: {0}")]
    Semigroup(String),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
}

/// Where a point-value parameter such as `v_x@0` is read from.
#[derive(Clone, Debug, PartialEq)]
pub struct PointValue {
    pub name: String,
    pub coord: JetCoord,
    pub at: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReducedDriver {
    pub name: String,
    pub kind: DriverKind,
    /// dA^l coefficient per state coordinate.
    pub coeffs: Vec<Expr>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reconstruction {
    /// Residuals 𝚽*_a(u^j − f^j(x)) = 0 in (x, u, a).
    Transported { flows: Vec<FlowMap>, initial: Vec<Expr>, residuals: Vec<Expr> },
    /// u_(n) + Σ μ^k u_(k) = 0; state holds μ then the boundary jet.
    LinearOde { order: u32 },
}

#[derive(Clone, Debug)]
pub struct ReducedSystem {
    pub space: Space,
    pub state: Vec<String>,
    pub initial: Vec<f64>,
    pub drivers: Vec<ReducedDriver>,
    pub correlation: Vec<Vec<f64>>,
    pub params: Vec<(String, Q)>,
    pub point_values: Vec<PointValue>,
    pub phi: Option<PhiTable>,
    pub algebra: Option<LieAlgebra>,
    pub reconstruction: Reconstruction,
    pub output: Vec<(String, Expr)>,
    pub functions: FunctionTable,
}

impl ReducedSystem {
    pub fn h(&self) -> usize {
        self.state.len()
    }

    pub fn state_coords(&self) -> Vec<JetCoord> {
        self.state.iter().map(|s| JetCoord::param(s)).collect()
    }

    pub fn param_map(&self) -> BTreeMap<JetCoord, Expr> {
        self.params.iter().map(|(n, v)| (JetCoord::param(n), Expr::rational(v.clone()))).collect()
    }

    pub fn to_json(&self) -> Value {
        let sp = Space::scalar();
        let drivers: Vec<Value> = self
            .drivers
            .iter()
            .map(|d| {
                json!({
                    "name": d.name,
                    "kind": if d.kind == DriverKind::Time { "time" } else { "wiener" },
                    "coefficients": d.coeffs.iter().map(|c| c.display(&sp).to_string()).collect::<Vec<_>>(),
                })
            })
            .collect();
        let recon = match &self.reconstruction {
            Reconstruction::Transported { flows, residuals, .. } => json!({
                "kind": "transported",
                "flows": flows.iter().map(|f| json!({
                    "param": f.param,
                    "source": f.source,
                    "pullbacks": f.pullbacks.iter().filter(|(c, _)| c.order() == 0)
                        .map(|(c, e)| (self.space.coord_name(c), Value::String(e.display(&self.space).to_string())))
                        .collect::<serde_json::Map<_, _>>(),
                })).collect::<Vec<_>>(),
                "residuals": residuals.iter().map(|r| r.display(&self.space).to_string()).collect::<Vec<_>>(),
            }),
            Reconstruction::LinearOde { order } => json!({ "kind": "linear_ode", "order": order }),
        };
        json!({
            "state": self.state,
            "initial": self.initial,
            "drivers": drivers,
            "point_values": self.point_values.iter().map(|p| p.name.clone()).collect::<Vec<_>>(),
            "phi": self.phi.as_ref().map(PhiTable::to_json),
            "reconstruction": recon,
        })
    }

    /// Human-readable `dA = …` lines.
    pub fn equations(&self) -> Vec<String> {
        let sp = Space::scalar();
        (0..self.h())
            .map(|l| {
                let mut terms = Vec::new();
                for d in &self.drivers {
                    let c = &d.coeffs[l];
                    if c.is_zero() {
                        continue;
                    }
                    let dd = match d.kind {
                        DriverKind::Time => "dt".to_string(),
                        DriverKind::Wiener => format!("o d{}", d.name),
                    };
                    terms.push(format!("({}) {dd}", c.display(&sp)));
                }
                let rhs = if terms.is_empty() { "0".into() } else { terms.join(" + ") };
                format!("d{} = {rhs}", self.state[l])
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Shared helpers.

fn as_f64(q: &Q) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

/// Parses a point-value name `base@x0`.
pub fn point_value(name: &str, space: &Space) -> Option<PointValue> {
    let (base, at) = name.split_once('@')?;
    let ctx = ParseContext::new(space.clone());
    let e = parse_expr(base, &ctx).ok()?;
    let coord = e.as_coord()?.clone();
    let at = parse_expr(at, &ParseContext::default()).ok()?.as_rational()?;
    Some(PointValue { name: name.to_string(), coord, at: as_f64(&at) })
}

fn collect_point_values(exprs: &[&Expr], space: &Space, exclude: &BTreeSet<String>) -> Vec<PointValue> {
    let mut names = BTreeSet::new();
    for e in exprs {
        for c in e.free_coords() {
            if let Some(n) = c.param_name() {
                if n.contains('@') && !exclude.contains(n) {
                    names.insert(n.to_string());
                }
            }
        }
    }
    names.into_iter().filter_map(|n| point_value(&n, space)).collect()
}

fn correlation_f64(model: &SpdeModel) -> Vec<Vec<f64>> {
    crate::model::correlation_or_identity(model).iter().map(|r| r.iter().map(as_f64).collect()).collect()
}

fn initial_state(model: &SpdeModel, names: &[String]) -> Result<Vec<f64>, ReductionError> {
    for (n, _) in &model.state {
        if !names.contains(n) {
            return Err(ReductionError::Model(format!("[state] names `{n}`, which is not a state coordinate")));
        }
    }
    Ok(names
        .iter()
        .map(|n| model.state.iter().find(|(m, _)| m == n).map(|(_, v)| as_f64(v)).unwrap_or(0.0))
        .collect())
}

/// Numeric jet of the initial curve: `f^j_(m)(x)` for m ≤ order.
pub struct InitialJet {
    derivs: Vec<Vec<Expr>>,
    fns: FunctionTable,
}

impl InitialJet {
    /// `extra` fixes additional parameters (for instance a drift coordinate).
    pub fn new(model: &SpdeModel, order: u32, extra: &BTreeMap<JetCoord, Expr>) -> Self {
        let mut sub = model.param_values();
        sub.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        let x = JetCoord::x(0);
        let derivs = model
            .initial
            .iter()
            .map(|f| {
                let mut d = vec![f.subs(&sub)];
                for _ in 0..order {
                    let next = d.last().unwrap().diff(&x);
                    d.push(next);
                }
                d
            })
            .collect();
        InitialJet { derivs, fns: model.functions() }
    }

    pub fn order(&self) -> u32 {
        self.derivs.first().map_or(0, |d| d.len() as u32 - 1)
    }

    pub fn at(&self, x: f64) -> Result<BTreeMap<JetCoord, f64>, EvalError> {
        let mut pt = BTreeMap::new();
        pt.insert(JetCoord::x(0), x);
        let mut out = BTreeMap::new();
        out.insert(JetCoord::x(0), x);
        for (j, ds) in self.derivs.iter().enumerate() {
            for (m, d) in ds.iter().enumerate() {
                out.insert(JetCoord::ux(j, m as u32), d.eval(&pt, &self.fns)?);
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Transversality.

#[derive(Clone, Debug, PartialEq)]
pub struct TransversalityReport {
    /// Rows (dependent index, derivative order) giving full rank, if any.
    pub rows: Option<Vec<(usize, u32)>>,
    /// Sample point where full rank was found.
    pub point: Option<f64>,
    /// Numeric rank per sample point.
    pub ranks: Vec<(f64, usize)>,
    pub h: usize,
    /// When rank is deficient: unit coefficients c with Σ c_l G_l vanishing
    /// on the jet of the initial curve at the first sample point.
    pub relation: Option<Vec<f64>>,
}

impl TransversalityReport {
    pub fn transversal(&self) -> bool {
        self.rows.is_some()
    }
}

fn numeric_rank(rows: &[Vec<f64>]) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let m = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > 1e-10 * max).count()
}

/// Right singular vector of the smallest singular value when the matrix is
/// rank deficient, scaled so its largest entry is 1.
fn null_direction(rows: &[Vec<f64>]) -> Option<Vec<f64>> {
    let h = rows.first()?.len();
    if numeric_rank(rows) == h {
        return None;
    }
    let m = DMatrix::from_fn(rows.len(), h, |i, j| rows[i][j]);
    let svd = m.svd(false, true);
    let vt = svd.v_t?;
    let k = (0..svd.singular_values.len()).min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))?;
    let v: Vec<f64> = vt.row(k).iter().copied().collect();
    let big = v.iter().copied().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
    Some(v.iter().map(|c| if (c / big).abs() < 1e-12 { 0.0 } else { c / big }).collect())
}

/// Maximal-rank test of the matrix D_x^s(G_l^j) evaluated on the jet of the
/// initial curve, with rows chosen greedily up to order k + h.
pub fn check_transversality(
    model: &SpdeModel,
    fields: &[EvolutionField],
    sample_points: &[f64],
) -> Result<TransversalityReport, ReductionError> {
    let sp = &model.space;
    let h = fields.len();
    let k = fields.iter().map(EvolutionField::order).max().unwrap_or(0);
    let smax = k + h as u32;
    let params = model.param_values();
    let mut extra = BTreeMap::new();
    if let Some(d) = &model.drift {
        let a0 = model.state.iter().find(|(n, _)| *n == d.coordinate).map(|(_, v)| v.clone()).unwrap_or_else(Q::zero);
        extra.insert(JetCoord::param(&d.coordinate), Expr::rational(a0));
    }
    // Row expressions, lowest order first.
    let mut row_exprs: Vec<((usize, u32), Vec<Expr>)> = Vec::new();
    let mut cur: Vec<Vec<Expr>> = (0..sp.n())
        .map(|j| fields.iter().map(|g| g.components[j].subs(&params)).collect())
        .collect();
    for s in 0..=smax {
        for (j, row) in cur.iter().enumerate() {
            row_exprs.push(((j, s), row.clone()));
        }
        if s < smax {
            cur = cur
                .iter()
                .map(|row| row.iter().map(|e| total_derivative(e, 0, sp)).collect::<Result<Vec<_>, _>>())
                .collect::<Result<Vec<_>, _>>()?;
        }
    }
    let jet = InitialJet::new(model, k + smax, &extra);
    let fns = model.functions();
    let mut ranks = Vec::new();
    let mut relation = None;
    for &x in sample_points {
        let pt = jet.at(x)?;
        if relation.is_none() && h > 0 {
            let all = row_exprs
                .iter()
                .map(|(_, row)| row.iter().map(|e| e.eval(&pt, &fns)).collect::<Result<Vec<f64>, _>>())
                .collect::<Result<Vec<_>, _>>()?;
            relation = null_direction(&all);
        }
        let mut chosen: Vec<Vec<f64>> = Vec::new();
        let mut idx = Vec::new();
        for (label, row) in &row_exprs {
            let vals = row.iter().map(|e| e.eval(&pt, &fns)).collect::<Result<Vec<f64>, _>>()?;
            chosen.push(vals);
            if numeric_rank(&chosen) < chosen.len() {
                chosen.pop();
            } else {
                idx.push(*label);
            }
            if chosen.len() == h {
                break;
            }
        }
        ranks.push((x, chosen.len()));
        if chosen.len() == h {
            return Ok(TransversalityReport { rows: Some(idx), point: Some(x), ranks, h, relation: None });
        }
    }
    Ok(TransversalityReport { rows: None, point: None, ranks, h, relation })
}

// ---------------------------------------------------------------------------
// Itô and Stratonovich.

/// ½ ρ_{αβ} V_{F_α}(F_β) for each ordered pair of Wiener drivers.
pub fn ito_correction(model: &SpdeModel) -> Result<Vec<(usize, usize, EvolutionField)>, ReductionError> {
    let rho = crate::model::correlation_or_identity(model);
    let wieners: Vec<usize> = (0..model.drivers.len()).filter(|&i| model.drivers[i].kind == DriverKind::Wiener).collect();
    let mut out = Vec::new();
    for (wa, &a) in wieners.iter().enumerate() {
        for (wb, &b) in wieners.iter().enumerate() {
            if rho[wa][wb].is_zero() {
                continue;
            }
            let fa = model.driver_field(&model.drivers[a]);
            let fb = model.driver_field(&model.drivers[b]);
            let half = rho[wa][wb].clone() / Q::from_integer(2.into());
            let comps = fb
                .components
                .iter()
                .map(|g| Ok(evolution_apply(&fa, g, &model.space)?.scale(&half)))
                .collect::<Result<Vec<_>, CalcError>>()?;
            out.push((a, b, EvolutionField::new(comps)));
        }
    }
    Ok(out)
}

/// Generator coefficients of Σ ½ρ V_{F_α}(F_β).
fn ito_shift(model: &SpdeModel) -> Result<Vec<Expr>, ReductionError> {
    let rho = crate::model::correlation_or_identity(model);
    let gens: Vec<EvolutionField> = model.generators.iter().map(|(_, g)| g.clone()).collect();
    let subst: Vec<EvolutionField> = {
        let p = model.param_values();
        gens.iter().map(|g| EvolutionField::new(g.components.iter().map(|c| c.subs(&p)).collect())).collect()
    };
    let wieners: Vec<&crate::model::Driver> = model.drivers.iter().filter(|d| d.kind == DriverKind::Wiener).collect();
    let mut shift = vec![Expr::zero(); gens.len()];
    let mut cache: BTreeMap<(usize, usize), Vec<Expr>> = BTreeMap::new();
    for (wa, da) in wieners.iter().enumerate() {
        for (wb, db) in wieners.iter().enumerate() {
            if rho[wa][wb].is_zero() {
                continue;
            }
            let half = Expr::rational(rho[wa][wb].clone() / Q::from_integer(2.into()));
            for k in 0..gens.len() {
                for l in 0..gens.len() {
                    let c = da.combo[k].mul(&db.combo[l]);
                    if c.is_zero() {
                        continue;
                    }
                    if !cache.contains_key(&(k, l)) {
                        let apply = |g: &EvolutionField, f: &EvolutionField| -> Result<EvolutionField, CalcError> {
                            Ok(EvolutionField::new(
                                f.components.iter().map(|fc| evolution_apply(g, fc, &model.space)).collect::<Result<_, _>>()?,
                            ))
                        };
                        let v = apply(&gens[k], &gens[l])?;
                        let coeffs = match decompose_in_basis(&v, &gens) {
                            Some(c) => c,
                            None => decompose_in_basis(&apply(&subst[k], &subst[l])?, &subst).ok_or_else(|| {
                                ReductionError::Model(format!(
                                    "the Ito correction V_{}({}) leaves the generator span",
                                    model.generators[k].0, model.generators[l].0
                                ))
                            })?,
                        };
                        cache.insert((k, l), coeffs.into_iter().map(Expr::rational).collect());
                    }
                    for (m, q) in cache[&(k, l)].iter().enumerate() {
                        shift[m] = shift[m].add(&half.mul(&c).mul(q));
                    }
                }
            }
        }
    }
    Ok(shift)
}

/// Same model in Stratonovich form (identity when it already is).
pub fn to_stratonovich(model: &SpdeModel) -> Result<SpdeModel, ReductionError> {
    convert(model, Form::Stratonovich)
}

pub fn to_ito(model: &SpdeModel) -> Result<SpdeModel, ReductionError> {
    convert(model, Form::Ito)
}

fn convert(model: &SpdeModel, target: Form) -> Result<SpdeModel, ReductionError> {
    if model.form == target {
        return Ok(model.clone());
    }
    let shift = ito_shift(model)?;
    let mut out = model.clone();
    out.form = target;
    let t = out.drivers.iter_mut().find(|d| d.kind == DriverKind::Time).expect("validated model has a time driver");
    for (c, s) in t.combo.iter_mut().zip(&shift) {
        *c = match target {
            Form::Stratonovich => c.sub(s),
            Form::Ito => c.add(s),
        };
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Flow-transported reduction.

fn flow_for(model: &SpdeModel, basis_field: &EvolutionField, model_gen: Option<usize>, name: &str) -> Result<FlowMap, ReductionError> {
    let sp = &model.space;
    let label = model_gen.map_or_else(|| format!("closure element `{name}`"), |g| model.generators[g].0.clone());
    let fail = |detail: String| ReductionError::Flow { generator: label.clone(), detail };
    let user = model_gen.and_then(|g| model.flows.iter().find(|(k, _)| *k == g)).map(|(_, f)| f.clone());
    let (flow, h) = match user {
        Some(f) => {
            let a = f.param_coord();
            let x = JetCoord::x(0);
            let px = f.get(&x).cloned().unwrap_or_else(|| Expr::coord(x.clone()));
            let h = px.diff(&a).subs_one(&a, &Expr::zero()).neg();
            (f, vec![h])
        }
        None => {
            let h = propose_h(basis_field, sp).ok_or_else(|| fail("no drift h proposed; supply the flow in [flows]".into()))?;
            let f = catalog_flow(basis_field, &h, name, sp).ok_or_else(|| fail("not in the flow catalog; supply it in [flows]".into()))?;
            (f, h)
        }
    };
    let cf = characteristic_field(basis_field, &h, 3, sp)?;
    let verdict = verify_flow(&cf, &flow, 3, sp);
    if !verdict.passed() {
        return Err(fail(format!("{verdict:?}")));
    }
    Ok(flow)
}

/// Checks ∂_a f = F̃(f) for the drift semigroup: symbolically when the
/// expression allows it, and by central differences at 10 random (x, a).
pub fn verify_semigroup(model: &SpdeModel) -> Result<Verdict, ReductionError> {
    let d = model.drift.as_ref().ok_or_else(|| ReductionError::Model("model has no [drift]".into()))?;
    let a = JetCoord::param(&d.coordinate);
    let x = JetCoord::x(0);
    let p = model.param_values();
    let field = &model.generators[d.generator].1;
    let order = field.order();
    let fs: Vec<Expr> = model.initial.iter().map(|f| f.subs(&p)).collect();
    let mut jet = BTreeMap::new();
    for (j, f) in fs.iter().enumerate() {
        let mut cur = f.clone();
        for m in 0..=order {
            jet.insert(JetCoord::ux(j, m), cur.clone());
            cur = cur.diff(&x);
        }
    }
    let fns = model.functions();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e31);
    let mut verdict = Verdict::EqualCanonical;
    for (j, f) in fs.iter().enumerate() {
        let lhs = f.diff(&a);
        let rhs = field.components[j].subs(&p).subs(&jet);
        match equal(&lhs, &rhs) {
            Ok(Verdict::EqualCanonical) => {}
            Ok(Verdict::EqualNumeric) => verdict = Verdict::EqualNumeric,
            Ok(v @ Verdict::NotEqual(_)) => {
                return Err(ReductionError::Semigroup(format!("component {j}: d_a f differs from the drift field ({v:?})")))
            }
            Err(_) => verdict = Verdict::EqualNumeric,
        }
        for _ in 0..10 {
            let xv = rng.random_range(model.grid.x0..=model.grid.x1);
            let av = rng.random_range(0.0..0.5);
            let at = |aa: f64| -> Result<f64, EvalError> {
                let mut m = BTreeMap::new();
                m.insert(x.clone(), xv);
                m.insert(a.clone(), aa);
                f.eval(&m, &fns)
            };
            let eps = 1e-5;
            let fd = (at(av + eps)? - at(av - eps)?) / (2.0 * eps);
            let mut m = BTreeMap::new();
            m.insert(x.clone(), xv);
            m.insert(a.clone(), av);
            let r = rhs.eval(&m, &fns)?;
            if (fd - r).abs() > 1e-4 * r.abs().max(1.0) {
                return Err(ReductionError::Semigroup(format!("at x = {xv}, a = {av}: {fd} vs {r}")));
            }
        }
    }
    Ok(verdict)
}

/// Reduced SDE for a flow-transported model: closure of the generators used
/// by the drivers, φ table, verified flows and the composed pullback of the
/// initial manifold.
pub fn build_reduced_sde(model: &SpdeModel) -> Result<ReducedSystem, ReductionError> {
    if model.constraint.is_some() {
        return build_ode_constraint_sde(model);
    }
    let model = &to_stratonovich(model)?;
    let sp = &model.space;
    if sp.m() != 1 {
        return Err(ReductionError::Model("reduction needs one independent variable".into()));
    }
    let used = model.used_generators();
    if used.is_empty() {
        // Every driver is zero: the solution is the initial condition.
        return trivial_system(model);
    }
    let gens: Vec<EvolutionField> = used.iter().map(|&k| model.generators[k].1.clone()).collect();
    let alg = lie_closure(&gens, &ClosureOptions::default(), sp)?;
    let h = alg.dim();
    let model_names = model.coordinate_names();
    let mut names: Vec<String> = used.iter().map(|&k| model_names[k].clone()).collect();
    let mut taken: BTreeSet<String> = model_names.iter().cloned().collect();
    taken.extend(model.params.iter().map(|(n, _)| n.clone()));
    for _ in used.len()..h {
        let n = (1..).map(|k| format!("a{k}")).find(|c| !taken.contains(c)).unwrap();
        taken.insert(n.clone());
        names.push(n);
    }
    let drift = match &model.drift {
        Some(d) => Some(used.iter().position(|&k| k == d.generator).ok_or_else(|| {
            ReductionError::Model(format!("drift generator `{}` is not used by any driver", model.generators[d.generator].0))
        })?),
        None => None,
    };
    if drift.is_some() {
        verify_semigroup(model)?;
    }
    let phi = match drift {
        Some(d) => solve_phi_with_drift(&alg, d, &names)?,
        None => {
            let id: Vec<usize> = (0..h).collect();
            let t = solve_phi(&alg, &id, &names)?;
            if t.ordering == id {
                t
            } else {
                let comp: Vec<String> = t.ordering.iter().map(|&g| names[g].clone()).collect();
                solve_phi(&alg, &t.ordering, &comp)?
            }
        }
    };
    let verdict = verify_phi(&phi, &alg.lambda);
    if !verdict.passed() {
        return Err(ReductionError::PhiVerification(format!("{verdict:?}")));
    }
    // Flows in composition order, excluding the drift.
    let mut flows = Vec::new();
    for &b in &phi.ordering {
        if Some(b) == drift {
            continue;
        }
        let model_gen = used.get(b).copied();
        let param = match drift {
            Some(_) => phi.coords[b].clone(),
            None => phi.coords[phi.ordering.iter().position(|&g| g == b).unwrap()].clone(),
        };
        flows.push(flow_for(model, &alg.basis[b], model_gen, &param)?);
    }
    let residuals = model
        .initial
        .iter()
        .enumerate()
        .map(|(j, f)| compose_pullback(&flows, &Expr::u(j).sub(f), sp))
        .collect::<Result<Vec<_>, _>>()?;
    let mut drivers = Vec::new();
    for d in &model.drivers {
        let mut coeffs = vec![Expr::zero(); h];
        for (b, &k) in used.iter().enumerate() {
            let c = &d.combo[k];
            if c.is_zero() {
                continue;
            }
            for (l, slot) in coeffs.iter_mut().enumerate() {
                let e = &phi.entries[b][l];
                if !e.is_zero() {
                    *slot = slot.add(&c.mul(e));
                }
            }
        }
        drivers.push(ReducedDriver { name: d.name.clone(), kind: d.kind, coeffs });
    }
    let state = phi.coords.clone();
    let exclude: BTreeSet<String> = state.iter().cloned().collect();
    let all: Vec<&Expr> = drivers.iter().flat_map(|d| d.coeffs.iter()).collect();
    let point_values = collect_point_values(&all, sp, &exclude);
    Ok(ReducedSystem {
        space: sp.clone(),
        initial: initial_state(model, &state)?,
        state,
        drivers,
        correlation: correlation_f64(model),
        params: model.params.clone(),
        point_values,
        phi: Some(phi),
        algebra: Some(alg),
        reconstruction: Reconstruction::Transported { flows, initial: model.initial.clone(), residuals },
        output: model.output.clone(),
        functions: model.functions(),
    })
}

fn trivial_system(model: &SpdeModel) -> Result<ReducedSystem, ReductionError> {
    let residuals = model.initial.iter().enumerate().map(|(j, f)| Expr::u(j).sub(f)).collect();
    Ok(ReducedSystem {
        space: model.space.clone(),
        state: Vec::new(),
        initial: Vec::new(),
        drivers: model
            .drivers
            .iter()
            .map(|d| ReducedDriver { name: d.name.clone(), kind: d.kind, coeffs: Vec::new() })
            .collect(),
        correlation: correlation_f64(model),
        params: model.params.clone(),
        point_values: Vec::new(),
        phi: None,
        algebra: None,
        reconstruction: Reconstruction::Transported { flows: Vec::new(), initial: model.initial.clone(), residuals },
        output: model.output.clone(),
        functions: model.functions(),
    })
}

// ---------------------------------------------------------------------------
// Moving-coefficient linear-ODE manifolds.

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TangencyError {
    #[error("reduction modulo the constraint exceeded derivative order {0}")]
    ReductionNonTermination(u32),
    #[error("generator {generator} is not tangent to the constraint manifold: {detail}")]
    CoefficientInconsistency { generator: usize, detail: String },
    #[error("linear-ODE constraints need one dependent variable")]
    NotScalar,
}

/// h = u_(n) + Σ_{k<n} μ^k u_(k) with parameter coordinates μ^k.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOdeConstraint {
    pub order: u32,
    pub mu: Vec<String>,
}

impl LinearOdeConstraint {
    pub fn new(mu: &[&str]) -> Self {
        LinearOdeConstraint { order: mu.len() as u32, mu: mu.iter().map(|s| s.to_string()).collect() }
    }

    pub fn mu_coord(&self, k: usize) -> JetCoord {
        JetCoord::param(&self.mu[k])
    }

    pub fn expr(&self) -> Expr {
        let n = self.order;
        Expr::sum(
            std::iter::once(Expr::ux(0, n))
                .chain((0..n).map(|k| Expr::coord(self.mu_coord(k as usize)).mul(&Expr::ux(0, k)))),
        )
    }

    /// Names of the boundary state u(0), u_x(0), …, u_(n−1)(0).
    pub fn boundary_names(&self, space: &Space) -> Vec<String> {
        (0..self.order).map(|k| format!("{}@0", space.coord_name(&JetCoord::ux(0, k)))).collect()
    }

    /// u_(m) ≡ Σ_{k<n} r[m][k] u_(k) modulo the constraint, for m ≤ max.
    fn rules(&self, max: u32) -> BTreeMap<JetCoord, Expr> {
        let n = self.order as usize;
        let mut r: Vec<Expr> = (0..n).map(|k| Expr::coord(self.mu_coord(k)).neg()).collect();
        let mut out = BTreeMap::new();
        for m in self.order..=max {
            out.insert(JetCoord::ux(0, m), Expr::sum((0..n).map(|k| r[k].mul(&Expr::ux(0, k as u32)))));
            // D_x with μ constant: shift up and fold u_(n) back.
            let top = r[n - 1].clone();
            let mut next = vec![Expr::zero(); n];
            for k in 0..n {
                let lower = if k == 0 { Expr::zero() } else { r[k - 1].clone() };
                next[k] = lower.add(&top.mul(&Expr::coord(self.mu_coord(k)).neg()));
            }
            r = next;
        }
        out
    }

    /// Rewrites every u_(m), m ≥ n, in terms of u … u_(n−1).
    pub fn reduce(&self, e: &Expr) -> Result<Expr, TangencyError> {
        const CAP: u32 = 24;
        let max = e.max_order();
        if max > CAP {
            return Err(TangencyError::ReductionNonTermination(CAP));
        }
        if max < self.order {
            return Ok(e.clone());
        }
        Ok(e.subs(&self.rules(max)))
    }
}

/// Per-generator rates: V(μ^k) and V(u_(j))|_{x=0}.
#[derive(Clone, Debug, PartialEq)]
pub struct Tangency {
    pub mu_rates: Vec<Expr>,
    pub boundary_rates: Vec<Expr>,
}

pub fn ode_constraint_tangency(
    fields: &[EvolutionField],
    c: &LinearOdeConstraint,
    space: &Space,
) -> Result<Vec<Tangency>, TangencyError> {
    if space.n() != 1 || space.m() != 1 {
        return Err(TangencyError::NotScalar);
    }
    let n = c.order;
    let x = JetCoord::x(0);
    let bnames = c.boundary_names(space);
    let mut out = Vec::new();
    for (gi, f) in fields.iter().enumerate() {
        let inconsistent = |detail: String| TangencyError::CoefficientInconsistency { generator: gi, detail };
        let mut dk = vec![f.components[0].clone()];
        for _ in 0..n {
            let next = total_derivative(dk.last().unwrap(), 0, space).map_err(|e| inconsistent(e.to_string()))?;
            dk.push(next);
        }
        // V_F(h) with μ held fixed; the unknown V(μ^k) u_(k) terms cancel it.
        let vh = Expr::sum(
            (0..=n as usize).map(|k| if k == n as usize { dk[k].clone() } else { Expr::coord(c.mu_coord(k)).mul(&dk[k]) }),
        );
        let r = c.reduce(&vh)?;
        let mut rates = Vec::new();
        let mut rest = r.clone();
        for k in 0..n {
            let uk = JetCoord::ux(0, k);
            let coef = r.diff(&uk);
            if coef.free_coords().iter().any(|v| !v.is_param()) {
                return Err(inconsistent(format!("coefficient of u_({k}) depends on the jet: {}", coef.display(space))));
            }
            rest = rest.sub(&coef.mul(&Expr::coord(uk)));
            rates.push(coef.neg());
        }
        if !matches!(equal(&rest, &Expr::zero()), Ok(Verdict::EqualCanonical | Verdict::EqualNumeric)) {
            return Err(inconsistent(format!("remainder {} is not a combination of u … u_({})", rest.display(space), n - 1)));
        }
        let mut to_boundary: BTreeMap<JetCoord, Expr> = (0..n).map(|k| (JetCoord::ux(0, k), Expr::param(&bnames[k as usize]))).collect();
        to_boundary.insert(x.clone(), Expr::zero());
        let boundary_rates = (0..n as usize)
            .map(|j| Ok(c.reduce(&dk[j])?.subs(&to_boundary)))
            .collect::<Result<Vec<_>, TangencyError>>()?;
        out.push(Tangency { mu_rates: rates, boundary_rates });
    }
    Ok(out)
}

/// SDE for (μ, u(0), …, u_(n−1)(0)) from the tangency data.
pub fn build_ode_constraint_sde(model: &SpdeModel) -> Result<ReducedSystem, ReductionError> {
    let model = &to_stratonovich(model)?;
    let spec = model.constraint.as_ref().ok_or_else(|| ReductionError::Model("model has no [constraint]".into()))?;
    let c = LinearOdeConstraint { order: spec.order, mu: spec.coefficients.clone() };
    let used = model.used_generators();
    let fields: Vec<EvolutionField> = used.iter().map(|&k| model.generators[k].1.clone()).collect();
    let tang = ode_constraint_tangency(&fields, &c, &model.space)?;
    let n = c.order as usize;
    let mut state = c.mu.clone();
    state.extend(c.boundary_names(&model.space));
    let drivers = model
        .drivers
        .iter()
        .map(|d| {
            let coeffs = (0..2 * n)
                .map(|s| {
                    Expr::sum(used.iter().zip(&tang).map(|(&k, t)| {
                        let r = if s < n { &t.mu_rates[s] } else { &t.boundary_rates[s - n] };
                        d.combo[k].mul(r)
                    }))
                })
                .collect();
            ReducedDriver { name: d.name.clone(), kind: d.kind, coeffs }
        })
        .collect();
    for name in &state {
        if !model.state.iter().any(|(m, _)| m == name) {
            return Err(ReductionError::Model(format!("[state] must give `{name}`")));
        }
    }
    Ok(ReducedSystem {
        space: model.space.clone(),
        initial: initial_state(model, &state)?,
        state,
        drivers,
        correlation: correlation_f64(model),
        params: model.params.clone(),
        point_values: Vec::new(),
        phi: None,
        algebra: None,
        reconstruction: Reconstruction::LinearOde { order: c.order },
        output: model.output.clone(),
        functions: model.functions(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bundled, parse_model};

    fn show(sys: &ReducedSystem) -> String {
        sys.equations().join("\n")
    }

    #[test]
    fn bundled_models_reduce() {
        for name in ["hjm", "hunter-saxton", "zakai", "filtering"] {
            let m = parse_model(bundled(name).unwrap()).unwrap();
            let t = std::time::Instant::now();
            let sys = build_reduced_sde(&m).unwrap_or_else(|e| panic!("{name}: {e}"));
            println!("{name} ({:?}):\n{}\n{:?}", t.elapsed(), show(&sys), sys.point_values);
            if let Reconstruction::Transported { residuals, .. } = &sys.reconstruction {
                for r in residuals {
                    println!("  0 = {}", r.display(&m.space));
                }
            }
        }
    }
}
