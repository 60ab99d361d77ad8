//! Sectioned plain-text model files and the in-memory SPDE model.
//!
//! ```text
//! [variables]
//! independent = x
//! dependent = v
//! [parameters]
//! Psi0 = 1/5
//! [generators]
//! G1 = v_x
//! [drivers]
//! t = time: G1
//! W = wiener: Psi0*G1
//! [initial]
//! v = 1 - exp(-x)
//! ```
//!
//! Optional sections: `[flows]`, `[coordinates]`, `[drift]`, `[constraint]`,
//! `[state]`, `[output]`, `[correlation]`, `[grid]`, `[simulation]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use num_traits::{One, Zero};
use thiserror::Error;

use crate::calculus::{q_string, EvolutionField};
use crate::coords::{JetCoord, Space};
use crate::expr::{parse_expr, Expr, ParseContext, Q};
use crate::flows::FlowMap;
use crate::functions::FunctionTable;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn syn(line: usize, msg: impl Into<String>) -> ModelError {
    ModelError::Syntax { line, msg: msg.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriverKind {
    Time,
    Wiener,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Driver {
    pub name: String,
    pub kind: DriverKind,
    /// Coefficient of each generator; constants, parameters or point values.
    pub combo: Vec<Expr>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Form {
    Stratonovich,
    Ito,
}

/// Case-2 drift: a generator without a flow, handled through a semigroup
/// f(x, a⁰) that appears in the initial condition via `coordinate`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftSpec {
    pub generator: usize,
    pub coordinate: String,
}

/// h = u_(n) + Σ_{k<n} μ^k u_(k).
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSpec {
    pub order: u32,
    /// Names of μ⁰ … μ^{n−1}.
    pub coefficients: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Evolve with one-sided stencils.
    Evolve,
    /// Quadratic extrapolation from the interior.
    Extrapolate,
    /// Values from the reduced solution.
    Dirichlet,
}

impl Boundary {
    fn name(self) -> &'static str {
        match self {
            Boundary::Evolve => "evolve",
            Boundary::Extrapolate => "extrapolate",
            Boundary::Dirichlet => "dirichlet",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub x0: f64,
    pub x1: f64,
    pub dx: f64,
    pub left: Boundary,
    pub right: Boundary,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { x0: 0.0, x1: 1.0, dx: 0.01, left: Boundary::Evolve, right: Boundary::Evolve }
    }
}

impl GridSpec {
    pub fn nodes(&self) -> Vec<f64> {
        let n = ((self.x1 - self.x0) / self.dx).round() as usize;
        (0..=n).map(|i| self.x0 + i as f64 * self.dx).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSpec {
    pub t_final: f64,
    pub dt: f64,
    pub seed: u64,
    pub paths: usize,
    pub bound: f64,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec { t_final: 1.0, dt: 1e-3, seed: 0, paths: 1, bound: 1e6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpdeModel {
    pub name: String,
    pub space: Space,
    pub params: Vec<(String, Q)>,
    pub generators: Vec<(String, EvolutionField)>,
    pub drivers: Vec<Driver>,
    pub correlation: Option<Vec<Vec<Q>>>,
    pub form: Form,
    pub drift: Option<DriftSpec>,
    pub flows: Vec<(usize, FlowMap)>,
    /// Flow coordinate name per generator.
    pub coords: Option<Vec<String>>,
    pub initial: Vec<Expr>,
    pub output: Vec<(String, Expr)>,
    pub constraint: Option<ConstraintSpec>,
    pub state: Vec<(String, Q)>,
    pub grid: GridSpec,
    pub sim: SimSpec,
}

impl SpdeModel {
    pub fn generator_index(&self, name: &str) -> Option<usize> {
        self.generators.iter().position(|(n, _)| n == name)
    }

    pub fn param_values(&self) -> BTreeMap<JetCoord, Expr> {
        self.params.iter().map(|(n, v)| (JetCoord::param(n), Expr::rational(v.clone()))).collect()
    }

    pub fn param_value(&self, name: &str) -> Option<&Q> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn wiener_count(&self) -> usize {
        self.drivers.iter().filter(|d| d.kind == DriverKind::Wiener).count()
    }

    /// Driver field Σ_k c_k G_k.
    pub fn driver_field(&self, d: &Driver) -> EvolutionField {
        let n = self.space.n();
        let comps = (0..n)
            .map(|j| Expr::sum(d.combo.iter().zip(&self.generators).map(|(c, (_, g))| c.mul(&g.components[j]))))
            .collect();
        EvolutionField::new(comps)
    }

    /// Generators used by some driver, in model order.
    pub fn used_generators(&self) -> Vec<usize> {
        (0..self.generators.len()).filter(|&k| self.drivers.iter().any(|d| !d.combo[k].is_zero())).collect()
    }

    pub fn functions(&self) -> FunctionTable {
        FunctionTable::standard()
    }

    /// Parser context for expressions in this model.
    pub fn context(&self) -> ParseContext {
        let mut ctx = ParseContext::new(self.space.clone()).with_params(self.params.iter().map(|(n, _)| n.clone()));
        for f in self.functions().names() {
            ctx = ctx.with_function(f, 1);
        }
        if let Some(d) = &self.drift {
            ctx.params.insert(d.coordinate.clone());
        }
        if let Some(c) = &self.constraint {
            ctx.params.extend(c.coefficients.iter().cloned());
        }
        ctx
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.space.m() != 1 {
            return Err(ModelError::Invalid("one independent variable is supported".into()));
        }
        if self.generators.is_empty() {
            return Err(ModelError::Invalid("no generators".into()));
        }
        let times = self.drivers.iter().filter(|d| d.kind == DriverKind::Time).count();
        if times != 1 {
            return Err(ModelError::Invalid(format!("exactly one time driver is required, found {times}")));
        }
        if self.constraint.is_none() && self.initial.len() != self.space.n() {
            return Err(ModelError::Invalid("[initial] must give every dependent variable".into()));
        }
        if let Some(c) = &self.correlation {
            let w = self.wiener_count();
            if c.len() != w || c.iter().any(|r| r.len() != w) {
                return Err(ModelError::Invalid(format!("correlation must be {w}x{w}")));
            }
        }
        if self.constraint.is_some() && (!self.initial.is_empty() || !self.flows.is_empty() || self.drift.is_some()) {
            return Err(ModelError::Invalid("a [constraint] model takes its initial data from [state]; drop [initial], [flows] and [drift]".into()));
        }
        if let Some(names) = &self.coords {
            if names.len() != self.generators.len() {
                return Err(ModelError::Invalid("[coordinates] needs one name per generator".into()));
            }
        }
        Ok(())
    }

    /// Flow coordinate names, one per generator.
    pub fn coordinate_names(&self) -> Vec<String> {
        if let Some(c) = &self.coords {
            return c.clone();
        }
        let letters = ["a", "b", "c", "d", "e", "g", "k", "l", "m", "n"];
        let h = self.generators.len();
        let mut fixed: Vec<Option<String>> = (0..h)
            .map(|k| {
                if let Some(d) = self.drift.as_ref().filter(|d| d.generator == k) {
                    return Some(d.coordinate.clone());
                }
                self.flows.iter().find(|(g, _)| *g == k).map(|(_, f)| f.param.clone())
            })
            .collect();
        let mut taken: BTreeSet<String> = self.params.iter().map(|(n, _)| n.clone()).collect();
        taken.extend(fixed.iter().flatten().cloned());
        let mut pool = letters.iter().map(|s| s.to_string()).chain((1..).map(|i| format!("a{i}")));
        let mut out = Vec::with_capacity(h);
        for slot in fixed.iter_mut() {
            let name = match slot.take() {
                Some(n) => n,
                None => {
                    let n = pool.find(|c| !taken.contains(c)).expect("infinite name pool");
                    taken.insert(n.clone());
                    n
                }
            };
            out.push(name);
        }
        out
    }
}

// ---------------------------------------------------------------------------

struct Line<'a> {
    no: usize,
    key: &'a str,
    value: &'a str,
}

fn sections(text: &str) -> Result<Vec<(String, usize, Vec<Line<'_>>)>, ModelError> {
    let mut out: Vec<(String, usize, Vec<Line>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_lowercase();
            if out.iter().any(|(n, _, _)| *n == name) {
                return Err(syn(no, format!("duplicate section [{name}]")));
            }
            out.push((name, no, Vec::new()));
            continue;
        }
        let Some((_, _, lines)) = out.last_mut() else {
            return Err(syn(no, "content before the first section"));
        };
        let (key, value) = line.split_once('=').ok_or_else(|| syn(no, "expected `key = value`"))?;
        lines.push(Line { no, key: key.trim(), value: value.trim() });
    }
    Ok(out)
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn rational(v: &str, no: usize) -> Result<Q, ModelError> {
    let e = parse_expr(v, &ParseContext::default()).map_err(|e| syn(no, e.to_string()))?;
    e.as_rational().ok_or_else(|| syn(no, "expected a rational constant"))
}

fn float(v: &str, no: usize) -> Result<f64, ModelError> {
    v.parse::<f64>().map_err(|_| syn(no, format!("expected a number, got `{v}`")))
}

/// Split a tuple `(a, b)` at top-level commas.
fn tuple(v: &str) -> Vec<String> {
    let v = v.trim();
    let Some(inner) = v.strip_prefix('(').and_then(|s| s.strip_suffix(')')) else {
        return vec![v.to_string()];
    };
    let mut parts = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for ch in inner.chars() {
        match ch {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            _ => {}
        }
        if depth < 0 {
            // The outer parentheses did not enclose the whole value.
            return vec![v.to_string()];
        }
        if ch == ',' && depth == 0 {
            parts.push(cur.trim().to_string());
            cur.clear();
        } else {
            cur.push(ch);
        }
    }
    parts.push(cur.trim().to_string());
    parts
}

pub fn parse_model(text: &str) -> Result<SpdeModel, ModelError> {
    let secs = sections(text)?;
    let find = |name: &str| secs.iter().find(|(n, _, _)| n == name);
    for (n, no, _) in &secs {
        const KNOWN: [&str; 15] = [
            "model", "variables", "parameters", "generators", "drivers", "correlation", "drift", "flows", "coordinates",
            "initial", "output", "constraint", "state", "grid", "simulation",
        ];
        if !KNOWN.contains(&n.as_str()) {
            return Err(syn(*no, format!("unknown section [{n}]")));
        }
    }
    let mut m = SpdeModel {
        name: String::new(),
        space: Space::scalar(),
        params: Vec::new(),
        generators: Vec::new(),
        drivers: Vec::new(),
        correlation: None,
        form: Form::Stratonovich,
        drift: None,
        flows: Vec::new(),
        coords: None,
        initial: Vec::new(),
        output: Vec::new(),
        constraint: None,
        state: Vec::new(),
        grid: GridSpec::default(),
        sim: SimSpec::default(),
    };
    if let Some((_, _, lines)) = find("model") {
        for l in lines {
            match l.key {
                "name" => m.name = l.value.to_string(),
                k => return Err(syn(l.no, format!("unknown key `{k}`"))),
            }
        }
    }
    let (_, vno, vars) = find("variables").ok_or_else(|| ModelError::Invalid("missing [variables]".into()))?;
    let mut indep = Vec::new();
    let mut dep = Vec::new();
    for l in vars {
        match l.key {
            "independent" => indep = list(l.value),
            "dependent" => dep = list(l.value),
            k => return Err(syn(l.no, format!("unknown key `{k}`"))),
        }
    }
    if indep.is_empty() || dep.is_empty() {
        return Err(syn(*vno, "both independent and dependent variables are required"));
    }
    m.space = Space::new(indep, dep);
    if let Some((_, _, lines)) = find("parameters") {
        for l in lines {
            m.params.push((l.key.to_string(), rational(l.value, l.no)?));
        }
    }
    if let Some((_, _, lines)) = find("constraint") {
        let mut order = None;
        let mut coefficients = Vec::new();
        for l in lines {
            match l.key {
                "order" => order = Some(l.value.parse::<u32>().map_err(|_| syn(l.no, "order must be a positive integer"))?),
                "coefficients" => coefficients = list(l.value),
                k => return Err(syn(l.no, format!("unknown key `{k}`"))),
            }
        }
        let order = order.ok_or_else(|| ModelError::Invalid("[constraint] needs `order`".into()))?;
        if coefficients.len() != order as usize {
            return Err(ModelError::Invalid(format!("[constraint] needs {order} coefficient names")));
        }
        m.constraint = Some(ConstraintSpec { order, coefficients });
    }
    // Drift coordinate must be known before expressions are parsed.
    let drift_raw = find("drift").map(|(_, _, lines)| lines);
    let mut drift_gen_name = None;
    if let Some(lines) = drift_raw {
        let mut coordinate = None;
        for l in lines {
            match l.key {
                "generator" => drift_gen_name = Some((l.value.to_string(), l.no)),
                "coordinate" => coordinate = Some(l.value.to_string()),
                k => return Err(syn(l.no, format!("unknown key `{k}`"))),
            }
        }
        let coordinate = coordinate.ok_or_else(|| ModelError::Invalid("[drift] needs `coordinate`".into()))?;
        m.drift = Some(DriftSpec { generator: usize::MAX, coordinate });
    }
    let ctx = m.context();
    let (_, _, gens) = find("generators").ok_or_else(|| ModelError::Invalid("missing [generators]".into()))?;
    for l in gens {
        let parts = tuple(l.value);
        if parts.len() != m.space.n() {
            return Err(syn(l.no, format!("generator needs {} components", m.space.n())));
        }
        let comps = parts
            .iter()
            .map(|p| parse_expr(p, &ctx).map_err(|e| syn(l.no, e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if m.generator_index(l.key).is_some() {
            return Err(syn(l.no, format!("duplicate generator `{}`", l.key)));
        }
        m.generators.push((l.key.to_string(), EvolutionField::new(comps)));
    }
    if let (Some(d), Some((name, no))) = (&mut m.drift, drift_gen_name) {
        d.generator = m.generators.iter().position(|(n, _)| *n == name).ok_or_else(|| syn(no, format!("unknown generator `{name}`")))?;
    } else if m.drift.is_some() {
        return Err(ModelError::Invalid("[drift] needs `generator`".into()));
    }
    let (_, _, drivers) = find("drivers").ok_or_else(|| ModelError::Invalid("missing [drivers]".into()))?;
    let mut dctx = ctx.clone();
    dctx.params.extend(m.generators.iter().map(|(n, _)| n.clone()));
    for l in drivers {
        if l.key == "form" {
            m.form = match l.value {
                "ito" => Form::Ito,
                "stratonovich" => Form::Stratonovich,
                v => return Err(syn(l.no, format!("unknown form `{v}`"))),
            };
            continue;
        }
        let (kind, combo) = l.value.split_once(':').ok_or_else(|| syn(l.no, "expected `time: …` or `wiener: …`"))?;
        let kind = match kind.trim() {
            "time" => DriverKind::Time,
            "wiener" => DriverKind::Wiener,
            k => return Err(syn(l.no, format!("unknown driver kind `{k}`"))),
        };
        let e = parse_expr(combo, &dctx).map_err(|e| syn(l.no, e.to_string()))?;
        let coeffs = split_combination(&e, &m.generators).ok_or_else(|| {
            syn(l.no, "driver must be a linear combination of generators with generator-free coefficients")
        })?;
        m.drivers.push(Driver { name: l.key.to_string(), kind, combo: coeffs });
    }
    if let Some((_, _, lines)) = find("correlation") {
        let mut rows = Vec::new();
        for l in lines {
            if l.key != "rho" {
                return Err(syn(l.no, format!("unknown key `{}`", l.key)));
            }
            for row in l.value.split(';') {
                rows.push(list(row).iter().map(|v| rational(v, l.no)).collect::<Result<Vec<_>, _>>()?);
            }
        }
        m.correlation = Some(rows);
    }
    if let Some((_, _, lines)) = find("coordinates") {
        for l in lines {
            match l.key {
                "names" => m.coords = Some(list(l.value)),
                k => return Err(syn(l.no, format!("unknown key `{k}`"))),
            }
        }
    }
    if let Some((_, _, lines)) = find("flows") {
        for l in lines {
            let (gname, param) = l
                .key
                .strip_suffix(')')
                .and_then(|k| k.split_once('('))
                .ok_or_else(|| syn(l.no, "flow key must look like `G1(a)`"))?;
            let g = m.generator_index(gname.trim()).ok_or_else(|| syn(l.no, format!("unknown generator `{gname}`")))?;
            let param = param.trim().to_string();
            let mut fctx = ctx.clone();
            fctx.params.insert(param.clone());
            let mut flow = FlowMap::identity(&param, &m.space);
            flow.source = "model".into();
            for item in l.value.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let (lhs, rhs) = item.split_once("->").ok_or_else(|| syn(l.no, "expected `coord -> expression`"))?;
                let c = parse_expr(lhs.trim(), &fctx).map_err(|e| syn(l.no, e.to_string()))?;
                let c = c.as_coord().filter(|c| c.order() == 0 && !c.is_param()).cloned().ok_or_else(|| {
                    syn(l.no, format!("`{}` is not a base coordinate", lhs.trim()))
                })?;
                let e = parse_expr(rhs.trim(), &fctx).map_err(|e| syn(l.no, e.to_string()))?;
                flow.pullbacks.insert(c, e);
            }
            m.flows.push((g, flow));
        }
    }
    if let Some((_, _, lines)) = find("initial") {
        let mut init: Vec<Option<Expr>> = vec![None; m.space.n()];
        for l in lines {
            let j = m.space.dep_index(l.key).ok_or_else(|| syn(l.no, format!("unknown dependent variable `{}`", l.key)))?;
            init[j] = Some(parse_expr(l.value, &ctx).map_err(|e| syn(l.no, e.to_string()))?);
        }
        if init.iter().all(Option::is_some) {
            m.initial = init.into_iter().flatten().collect();
        } else if init.iter().any(Option::is_some) {
            return Err(ModelError::Invalid("[initial] must give every dependent variable".into()));
        }
    }
    if let Some((_, _, lines)) = find("output") {
        for l in lines {
            m.output.push((l.key.to_string(), parse_expr(l.value, &ctx).map_err(|e| syn(l.no, e.to_string()))?));
        }
    }
    if let Some((_, _, lines)) = find("state") {
        for l in lines {
            m.state.push((l.key.to_string(), rational(l.value, l.no)?));
        }
    }
    if let Some((_, _, lines)) = find("grid") {
        for l in lines {
            match l.key {
                "x0" => m.grid.x0 = float(l.value, l.no)?,
                "x1" => m.grid.x1 = float(l.value, l.no)?,
                "dx" => m.grid.dx = float(l.value, l.no)?,
                "left" | "right" => {
                    let b = match l.value {
                        "evolve" => Boundary::Evolve,
                        "extrapolate" => Boundary::Extrapolate,
                        "dirichlet" => Boundary::Dirichlet,
                        v => return Err(syn(l.no, format!("unknown boundary `{v}`"))),
                    };
                    if l.key == "left" {
                        m.grid.left = b;
                    } else {
                        m.grid.right = b;
                    }
                }
                k => return Err(syn(l.no, format!("unknown key `{k}`"))),
            }
        }
    }
    if let Some((_, _, lines)) = find("simulation") {
        for l in lines {
            match l.key {
                "t_final" => m.sim.t_final = float(l.value, l.no)?,
                "dt" => m.sim.dt = float(l.value, l.no)?,
                "seed" => m.sim.seed = l.value.parse().map_err(|_| syn(l.no, "seed must be an unsigned integer"))?,
                "paths" => m.sim.paths = l.value.parse().map_err(|_| syn(l.no, "paths must be an unsigned integer"))?,
                "bound" => m.sim.bound = float(l.value, l.no)?,
                k => return Err(syn(l.no, format!("unknown key `{k}`"))),
            }
        }
    }
    m.validate()?;
    Ok(m)
}

/// Coefficients c_k with e = Σ c_k G_k, where G_k are parameter symbols.
fn split_combination(e: &Expr, gens: &[(String, EvolutionField)]) -> Option<Vec<Expr>> {
    let syms: Vec<JetCoord> = gens.iter().map(|(n, _)| JetCoord::param(n)).collect();
    let coeffs: Vec<Expr> = syms.iter().map(|s| e.diff(s)).collect();
    if coeffs.iter().any(|c| syms.iter().any(|s| c.depends_on(s))) {
        return None;
    }
    let rest = e.sub(&Expr::sum(coeffs.iter().zip(&syms).map(|(c, s)| c.mul(&Expr::coord(s.clone())))));
    rest.is_zero().then_some(coeffs)
}

pub fn print_model(m: &SpdeModel) -> String {
    let sp = &m.space;
    let mut s = String::new();
    let e = |x: &Expr| x.display(sp).to_string();
    if !m.name.is_empty() {
        let _ = writeln!(s, "[model]\nname = {}\n", m.name);
    }
    let _ = writeln!(s, "[variables]\nindependent = {}\ndependent = {}\n", sp.indep.join(", "), sp.dep.join(", "));
    if !m.params.is_empty() {
        s.push_str("[parameters]\n");
        for (n, v) in &m.params {
            let _ = writeln!(s, "{n} = {}", q_string(v));
        }
        s.push('\n');
    }
    s.push_str("[generators]\n");
    for (n, g) in &m.generators {
        let comps: Vec<String> = g.components.iter().map(e).collect();
        if comps.len() == 1 {
            let _ = writeln!(s, "{n} = {}", comps[0]);
        } else {
            let _ = writeln!(s, "{n} = ({})", comps.join(", "));
        }
    }
    s.push_str("\n[drivers]\n");
    if m.form == Form::Ito {
        s.push_str("form = ito\n");
    }
    for d in &m.drivers {
        let kind = if d.kind == DriverKind::Time { "time" } else { "wiener" };
        let mut body = String::new();
        for (c, (n, _)) in d.combo.iter().zip(&m.generators).filter(|(c, _)| !c.is_zero()) {
            let text = e(c);
            let (neg, mag) = if text.starts_with('-') { (true, e(&c.neg())) } else { (false, text) };
            let sign = match (body.is_empty(), neg) {
                (true, false) => "",
                (true, true) => "-",
                (false, false) => " + ",
                (false, true) => " - ",
            };
            let term = if mag == "1" {
                n.clone()
            } else if mag.contains([' ', '+', '-']) {
                format!("({mag})*{n}")
            } else {
                format!("{mag}*{n}")
            };
            body.push_str(sign);
            body.push_str(&term);
        }
        if body.is_empty() {
            body.push('0');
        }
        let _ = writeln!(s, "{} = {kind}: {body}", d.name);
    }
    if let Some(c) = &m.correlation {
        let rows: Vec<String> = c.iter().map(|r| r.iter().map(q_string).collect::<Vec<_>>().join(", ")).collect();
        let _ = writeln!(s, "\n[correlation]\nrho = {}", rows.join("; "));
    }
    if let Some(d) = &m.drift {
        let _ = writeln!(s, "\n[drift]\ngenerator = {}\ncoordinate = {}", m.generators[d.generator].0, d.coordinate);
    }
    if let Some(c) = &m.coords {
        let _ = writeln!(s, "\n[coordinates]\nnames = {}", c.join(", "));
    }
    if !m.flows.is_empty() {
        s.push_str("\n[flows]\n");
        for (g, f) in &m.flows {
            let items: Vec<String> = f.pullbacks.iter().map(|(c, v)| format!("{} -> {}", sp.coord_name(c), e(v))).collect();
            let _ = writeln!(s, "{}({}) = {}", m.generators[*g].0, f.param, items.join("; "));
        }
    }
    if !m.initial.is_empty() {
        s.push_str("\n[initial]\n");
        for (j, f) in m.initial.iter().enumerate() {
            let _ = writeln!(s, "{} = {}", sp.dep[j], e(f));
        }
    }
    if !m.output.is_empty() {
        s.push_str("\n[output]\n");
        for (n, f) in &m.output {
            let _ = writeln!(s, "{n} = {}", e(f));
        }
    }
    if let Some(c) = &m.constraint {
        let _ = writeln!(s, "\n[constraint]\norder = {}\ncoefficients = {}", c.order, c.coefficients.join(", "));
    }
    if !m.state.is_empty() {
        s.push_str("\n[state]\n");
        for (n, v) in &m.state {
            let _ = writeln!(s, "{n} = {}", q_string(v));
        }
    }
    let g = &m.grid;
    let _ = writeln!(
        s,
        "\n[grid]\nx0 = {:?}\nx1 = {:?}\ndx = {:?}\nleft = {}\nright = {}",
        g.x0,
        g.x1,
        g.dx,
        g.left.name(),
        g.right.name()
    );
    let t = &m.sim;
    let _ = writeln!(
        s,
        "\n[simulation]\nt_final = {:?}\ndt = {:?}\nseed = {}\npaths = {}\nbound = {:?}",
        t.t_final, t.dt, t.seed, t.paths, t.bound
    );
    s
}

/// Exact correlation matrix, identity when absent.
pub fn correlation_or_identity(m: &SpdeModel) -> Vec<Vec<Q>> {
    m.correlation.clone().unwrap_or_else(|| {
        let w = m.wiener_count();
        (0..w).map(|i| (0..w).map(|j| if i == j { Q::one() } else { Q::zero() }).collect()).collect()
    })
}

// ---------------------------------------------------------------------------
// Bundled examples.

pub const HJM: &str = include_str!("../models/hjm.jr");
pub const HUNTER_SAXTON: &str = include_str!("../models/hunter_saxton.jr");
pub const FILTERING: &str = include_str!("../models/filtering.jr");
pub const ZAKAI: &str = include_str!("../models/zakai.jr");

pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "hjm" => Some(HJM),
        "hunter-saxton" | "hunter_saxton" => Some(HUNTER_SAXTON),
        "filtering" => Some(FILTERING),
        "zakai" => Some(ZAKAI),
        _ => None,
    }
}

pub const BUNDLED: [&str; 4] = ["hjm", "hunter-saxton", "filtering", "zakai"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_drivers_read_naturally() {
        let m = parse_model(HJM).unwrap();
        let text = print_model(&m);
        assert!(text.contains("t = time: G1 - v_x@0*G2 - Psi0^2/2*G3 + Psi0^2/2*G4"), "{text}");
    }

    #[test]
    fn bundled_models_round_trip() {
        for name in BUNDLED {
            let m = parse_model(bundled(name).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
            let printed = print_model(&m);
            let again = parse_model(&printed).unwrap_or_else(|e| panic!("{name} reprint: {e}\n{printed}"));
            assert_eq!(m, again, "{name}");
        }
    }

    #[test]
    fn driver_combinations() {
        let m = parse_model(HJM).unwrap();
        let t = &m.drivers[0];
        assert_eq!(t.kind, DriverKind::Time);
        assert_eq!(t.combo[0], Expr::one());
        assert_eq!(t.combo[1], Expr::param("v_x@0").neg());
    }

    #[test]
    fn errors_have_lines() {
        let bad = "[variables]\nindependent = x\ndependent = u\n[generators]\nG1 = u_x +\n";
        match parse_model(bad) {
            Err(ModelError::Syntax { line, .. }) => assert_eq!(line, 5),
            r => panic!("{r:?}"),
        }
        let undeclared = "[variables]\nindependent = x\ndependent = u\n[generators]\nG1 = q*u_x\n";
        assert!(matches!(parse_model(undeclared), Err(ModelError::Syntax { line: 5, .. })));
        let two_time = "[variables]\nindependent = x\ndependent = u\n[generators]\nG1 = u_x\n[drivers]\na = time: G1\nb = time: G1\n[initial]\nu = x\n";
        assert!(matches!(parse_model(two_time), Err(ModelError::Invalid(_))));
    }
}
