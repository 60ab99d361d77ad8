//! Independent checks of the reduced pipeline: a method-of-lines solver for
//! the SPDE driven by the same increments, closed-form solutions of the
//! worked examples, and grid norms.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::coords::JetCoord;
use crate::expr::{compile, EvalError, Expr, NumExpr};
use crate::functions::FunctionTable;
use crate::model::{Boundary, GridSpec, SpdeModel};
use crate::reconstruct::{CompiledSystem, Jet};
use crate::reduction::{point_value, to_stratonovich, PointValue, ReducedSystem, ReductionError};
use crate::sim::{integrate_stratonovich, Blowup, DriverPath, Guards, PathStatus, SamplePath};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Reduction(#[from] ReductionError),
    #[error("{0}")]
    Unsupported(String),
    #[error("grids differ: {0}")]
    GridMismatch(String),
    #[error("boundary data failed at t = {t}: {detail}")]
    Boundary { t: f64, detail: String },
    #[error("Newton did not converge at x = {x}")]
    NewtonDiverged { x: f64 },
}

/// Values of every dependent variable on a uniform grid at a few times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSolution {
    pub names: Vec<String>,
    pub xs: Vec<f64>,
    pub times: Vec<f64>,
    /// `values[snapshot][component][node]`.
    pub values: Vec<Vec<Vec<f64>>>,
    pub left: &'static str,
    pub right: &'static str,
    pub status: PathStatus,
    pub warnings: Vec<String>,
}

impl GridSolution {
    pub fn last(&self) -> &[Vec<f64>] {
        self.values.last().expect("at least the initial snapshot")
    }
}

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub snapshots: usize,
    /// Largest |c| dt / dx per substep for transport terms.
    pub cfl: f64,
    /// Largest |D| dt / dx² per substep for second-order terms.
    pub diffusion_number: f64,
    pub blowup: f64,
    pub max_substeps: usize,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { snapshots: 10, cfl: 0.5, diffusion_number: 0.4, blowup: 1e12, max_substeps: 1 << 14 }
    }
}

/// Dirichlet data: values of every component at (t, x).
pub type BoundaryFn<'a> = dyn Fn(f64, f64) -> Result<Vec<f64>, String> + Sync + 'a;

fn boundary_name(b: Boundary) -> &'static str {
    match b {
        Boundary::Evolve => "evolve",
        Boundary::Extrapolate => "extrapolate",
        Boundary::Dirichlet => "dirichlet",
    }
}

/// Snapshot step indices: `count` intervals over `steps`, endpoints included.
pub fn snapshot_steps(steps: usize, count: usize) -> Vec<usize> {
    let count = count.max(1);
    let mut s: Vec<usize> = (0..=count).map(|k| (k as f64 * steps as f64 / count as f64).round() as usize).collect();
    s.dedup();
    s
}

// ---------------------------------------------------------------------------
// Stencils.

fn d1_central(u: &[f64], i: usize, dx: f64) -> f64 {
    let n = u.len() - 1;
    if i == 0 {
        (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dx)
    } else if i == n {
        (3.0 * u[n] - 4.0 * u[n - 1] + u[n - 2]) / (2.0 * dx)
    } else {
        (u[i + 1] - u[i - 1]) / (2.0 * dx)
    }
}

/// Third-order upwind-biased first derivative for u_t = c u_x: c > 0 takes
/// information from the right.
fn d1_upwind(u: &[f64], i: usize, dx: f64, c: f64) -> f64 {
    let n = u.len() - 1;
    if c > 0.0 {
        if i >= 1 && i + 2 <= n {
            return (-2.0 * u[i - 1] - 3.0 * u[i] + 6.0 * u[i + 1] - u[i + 2]) / (6.0 * dx);
        }
        if i + 2 <= n {
            return (-3.0 * u[i] + 4.0 * u[i + 1] - u[i + 2]) / (2.0 * dx);
        }
    } else if c < 0.0 {
        if i >= 2 && i < n {
            return (u[i - 2] - 6.0 * u[i - 1] + 3.0 * u[i] + 2.0 * u[i + 1]) / (6.0 * dx);
        }
        if i >= 2 {
            return (3.0 * u[i] - 4.0 * u[i - 1] + u[i - 2]) / (2.0 * dx);
        }
    }
    d1_central(u, i, dx)
}

fn d2(u: &[f64], i: usize, dx: f64) -> f64 {
    let n = u.len() - 1;
    let h2 = dx * dx;
    if i == 0 {
        (2.0 * u[0] - 5.0 * u[1] + 4.0 * u[2] - u[3]) / h2
    } else if i == n {
        (2.0 * u[n] - 5.0 * u[n - 1] + 4.0 * u[n - 2] - u[n - 3]) / h2
    } else {
        (u[i + 1] - 2.0 * u[i] + u[i - 1]) / h2
    }
}

// ---------------------------------------------------------------------------
// Method of lines.

struct Discretization {
    n: usize,
    /// `fields[α][j]` over [x, (u^j, u^j_x, u^j_xx)_j, point values].
    fields: Vec<Vec<NumExpr>>,
    /// ∂F^j_α/∂u^j_x and ∂F^j_α/∂u^j_xx, when present.
    vel: Vec<Vec<Option<NumExpr>>>,
    diff: Vec<Vec<Option<NumExpr>>>,
    points: Vec<(PointValue, usize)>,
    fns: FunctionTable,
}

impl Discretization {
    fn new(model: &SpdeModel, xs: &[f64]) -> Result<Self, OracleError> {
        let n = model.space.n();
        let params = model.param_values();
        let fields_e: Vec<Vec<Expr>> = model
            .drivers
            .iter()
            .map(|d| model.driver_field(d).components.iter().map(|c| c.subs(&params)).collect())
            .collect();
        if let Some(e) = fields_e.iter().flatten().find(|e| e.max_order() > 2) {
            return Err(OracleError::Unsupported(format!(
                "finite differences handle order ≤ 2, found {}",
                e.to_string_in(&model.space)
            )));
        }
        let mut points = Vec::new();
        for e in fields_e.iter().flatten() {
            for c in e.free_coords() {
                let Some(name) = c.param_name() else { continue };
                if points.iter().any(|(p, _): &(PointValue, usize)| p.name == name) {
                    continue;
                }
                let pv = point_value(name, &model.space)
                    .ok_or_else(|| OracleError::Unsupported(format!("unbound parameter `{name}`")))?;
                if pv.coord.order() > 2 {
                    return Err(OracleError::Unsupported(format!("point value `{name}` has order > 2")));
                }
                let k = xs.iter().position(|x| (x - pv.at).abs() < 1e-9).ok_or_else(|| {
                    OracleError::Unsupported(format!("point value `{name}` is not at a grid node"))
                })?;
                points.push((pv, k));
            }
        }
        let mut slots = vec![JetCoord::x(0)];
        for j in 0..n {
            for q in 0..=2 {
                slots.push(JetCoord::ux(j, q));
            }
        }
        slots.extend(points.iter().map(|(p, _)| JetCoord::param(&p.name)));
        let mut fields = Vec::new();
        let mut vel = Vec::new();
        let mut diff = Vec::new();
        for comps in &fields_e {
            let mut f = Vec::new();
            let mut v = Vec::new();
            let mut d = Vec::new();
            for (j, e) in comps.iter().enumerate() {
                f.push(compile(e, &slots)?);
                let dv = e.diff(&JetCoord::ux(j, 1));
                v.push(if dv.is_zero() { None } else { Some(compile(&dv, &slots)?) });
                let dd = e.diff(&JetCoord::ux(j, 2));
                d.push(if dd.is_zero() { None } else { Some(compile(&dd, &slots)?) });
            }
            fields.push(f);
            vel.push(v);
            diff.push(d);
        }
        Ok(Discretization { n, fields, vel, diff, points, fns: model.functions() })
    }

    fn point_values(&self, u: &[Vec<f64>], dx: f64) -> Vec<f64> {
        self.points
            .iter()
            .map(|(p, k)| {
                let JetCoord::Dep { j, sigma } = &p.coord else { unreachable!("point values are jet coordinates") };
                let col = &u[*j];
                match sigma.order() {
                    0 => col[*k],
                    1 => d1_central(col, *k, dx),
                    _ => d2(col, *k, dx),
                }
            })
            .collect()
    }

    /// Fills the input vector at node i with central first derivatives.
    fn central_inputs(&self, u: &[Vec<f64>], i: usize, x: f64, dx: f64, pv: &[f64], inp: &mut Vec<f64>) {
        inp.clear();
        inp.push(x);
        for col in u {
            inp.push(col[i]);
            inp.push(d1_central(col, i, dx));
            inp.push(d2(col, i, dx));
        }
        inp.extend_from_slice(pv);
    }

    fn velocity(&self, j: usize, inp: &[f64], ds: &[f64]) -> Result<f64, EvalError> {
        let mut c = 0.0;
        for (a, v) in self.vel.iter().enumerate() {
            if let Some(e) = &v[j] {
                c += e.eval(inp, &self.fns)? * ds[a];
            }
        }
        Ok(c)
    }

    fn diffusion(&self, j: usize, inp: &[f64], ds: &[f64]) -> Result<f64, EvalError> {
        let mut c = 0.0;
        for (a, v) in self.diff.iter().enumerate() {
            if let Some(e) = &v[j] {
                c += e.eval(inp, &self.fns)? * ds[a];
            }
        }
        Ok(c)
    }

    /// Σ_α F_α(U) ΔS_α at every node; `frozen` nodes get zero.
    fn increment(
        &self,
        u: &[Vec<f64>],
        xs: &[f64],
        dx: f64,
        ds: &[f64],
        frozen: (bool, bool),
        out: &mut [Vec<f64>],
    ) -> Result<(), EvalError> {
        let pv = self.point_values(u, dx);
        let last = xs.len() - 1;
        let mut inp = Vec::new();
        for (i, &x) in xs.iter().enumerate() {
            if (i == 0 && frozen.0) || (i == last && frozen.1) {
                for o in out.iter_mut() {
                    o[i] = 0.0;
                }
                continue;
            }
            self.central_inputs(u, i, x, dx, &pv, &mut inp);
            // Upwind the transport derivative of each equation along its
            // own velocity; the equation j slot is overwritten per j.
            let base = inp.clone();
            for j in 0..self.n {
                let c = self.velocity(j, &base, ds)?;
                inp.copy_from_slice(&base);
                if c != 0.0 {
                    inp[2 + 3 * j] = d1_upwind(&u[j], i, dx, c);
                }
                let mut s = 0.0;
                for (a, f) in self.fields.iter().enumerate() {
                    if ds[a] != 0.0 {
                        s += f[j].eval(&inp, &self.fns)? * ds[a];
                    }
                }
                out[j][i] = s;
            }
        }
        Ok(())
    }

    /// Substeps needed for the increment ds at state u.
    fn substeps(&self, u: &[Vec<f64>], xs: &[f64], dx: f64, ds: &[f64], opts: &FdOptions) -> Result<usize, EvalError> {
        if self.vel.iter().flatten().chain(self.diff.iter().flatten()).all(Option::is_none) {
            return Ok(1);
        }
        let pv = self.point_values(u, dx);
        let mut inp = Vec::new();
        let (mut cmax, mut dmax) = (0.0f64, 0.0f64);
        for (i, &x) in xs.iter().enumerate() {
            self.central_inputs(u, i, x, dx, &pv, &mut inp);
            for j in 0..self.n {
                cmax = cmax.max(self.velocity(j, &inp, ds)?.abs());
                dmax = dmax.max(self.diffusion(j, &inp, ds)?.abs());
            }
        }
        let m = (cmax / dx / opts.cfl).max(dmax / (dx * dx) / opts.diffusion_number).ceil();
        Ok((m.max(1.0) as usize).min(opts.max_substeps))
    }
}

fn apply_boundaries(
    u: &mut [Vec<f64>],
    xs: &[f64],
    grid: &GridSpec,
    t: f64,
    data: Option<&BoundaryFn<'_>>,
) -> Result<(), OracleError> {
    let last = xs.len() - 1;
    for (side, b, i) in [(0, grid.left, 0usize), (1, grid.right, last)] {
        match b {
            Boundary::Evolve => {}
            Boundary::Extrapolate => {
                for col in u.iter_mut() {
                    col[i] = if side == 0 {
                        3.0 * col[1] - 3.0 * col[2] + col[3]
                    } else {
                        3.0 * col[last - 1] - 3.0 * col[last - 2] + col[last - 3]
                    };
                }
            }
            Boundary::Dirichlet => {
                let f = data.ok_or_else(|| OracleError::Unsupported("Dirichlet boundary needs boundary data".into()))?;
                let vals = f(t, xs[i]).map_err(|detail| OracleError::Boundary { t, detail })?;
                for (col, v) in u.iter_mut().zip(vals) {
                    col[i] = v;
                }
            }
        }
    }
    Ok(())
}

/// Method-of-lines solve of the model (converted to Stratonovich form) on
/// `grid`, starting from `initial[j][node]`, driven by `path`. Each step
/// splits its increments evenly into substeps when the explicit stability
/// limits demand it, which keeps the piecewise-linear driver interpolation
/// the Stratonovich scheme relies on.
pub fn fd_solve_spde(
    model: &SpdeModel,
    grid: &GridSpec,
    initial: &[Vec<f64>],
    path: &DriverPath,
    boundary: Option<&BoundaryFn<'_>>,
    opts: &FdOptions,
) -> Result<GridSolution, OracleError> {
    let model = to_stratonovich(model)?;
    let xs = grid.nodes();
    if xs.len() < 5 {
        return Err(OracleError::Unsupported("the grid needs at least 5 nodes".into()));
    }
    if initial.len() != model.space.n() || initial.iter().any(|c| c.len() != xs.len()) {
        return Err(OracleError::GridMismatch("initial data does not match the grid".into()));
    }
    let disc = Discretization::new(&model, &xs)?;
    let dx = grid.dx;
    let frozen = (grid.left != Boundary::Evolve, grid.right != Boundary::Evolve);
    let mut u: Vec<Vec<f64>> = initial.to_vec();
    apply_boundaries(&mut u, &xs, grid, 0.0, boundary)?;
    let snaps = snapshot_steps(path.steps(), opts.snapshots);
    let mut times = vec![0.0];
    let mut values = vec![u.clone()];
    let mut status = PathStatus::Completed;
    let mut k1 = vec![vec![0.0; xs.len()]; disc.n];
    let mut k2 = k1.clone();
    let mut most = 1;
    'steps: for (step, inc) in path.increments.iter().enumerate() {
        let t0 = path.time(step);
        let m = disc.substeps(&u, &xs, dx, inc, opts)?;
        most = most.max(m);
        let ds: Vec<f64> = inc.iter().map(|v| v / m as f64).collect();
        let h = path.dt / m as f64;
        for s in 0..m {
            let t1 = t0 + (s + 1) as f64 * h;
            let res = disc.increment(&u, &xs, dx, &ds, frozen, &mut k1).map_err(OracleError::from).and_then(|_| {
                let mut pred: Vec<Vec<f64>> = u.iter().zip(&k1).map(|(c, k)| c.iter().zip(k).map(|(a, b)| a + b).collect()).collect();
                apply_boundaries(&mut pred, &xs, grid, t1, boundary)?;
                disc.increment(&pred, &xs, dx, &ds, frozen, &mut k2)?;
                Ok(())
            });
            if let Err(e) = res {
                if matches!(e, OracleError::Boundary { .. }) {
                    return Err(e);
                }
                status = PathStatus::Exploded { t: t1, cause: Blowup::Evaluation };
                break 'steps;
            }
            for ((col, a), b) in u.iter_mut().zip(&k1).zip(&k2) {
                for ((v, p), q) in col.iter_mut().zip(a).zip(b) {
                    *v += 0.5 * (p + q);
                }
            }
            apply_boundaries(&mut u, &xs, grid, t1, boundary)?;
            if u.iter().flatten().any(|v| !v.is_finite() || v.abs() > opts.blowup) {
                status = PathStatus::Exploded { t: t1, cause: Blowup::Bound };
                break 'steps;
            }
        }
        if snaps.contains(&(step + 1)) {
            times.push(path.time(step + 1));
            values.push(u.clone());
        }
    }
    let mut warnings = Vec::new();
    if most > 1 {
        warnings.push(format!("stability limits required up to {most} substeps per step"));
    }
    if most == opts.max_substeps {
        warnings.push("substep cap reached; the scheme may be unstable".into());
    }
    Ok(GridSolution {
        names: model.space.dep.clone(),
        xs,
        times,
        values,
        left: boundary_name(grid.left),
        right: boundary_name(grid.right),
        status,
        warnings,
    })
}

/// The model's initial curve on the grid, with [state] values bound. A drift
/// coordinate missing from [state] starts at 0.
pub fn initial_grid(model: &SpdeModel, xs: &[f64]) -> Result<Vec<Vec<f64>>, OracleError> {
    if model.initial.is_empty() {
        return Err(OracleError::Unsupported("the model has no [initial] curve".into()));
    }
    let mut sub = model.param_values();
    if let Some(d) = &model.drift {
        sub.insert(JetCoord::param(&d.coordinate), Expr::zero());
    }
    for (n, v) in &model.state {
        sub.insert(JetCoord::param(n), Expr::rational(v.clone()));
    }
    let fns = model.functions();
    let slots = [JetCoord::x(0)];
    model
        .initial
        .iter()
        .map(|f| {
            let e = compile(&f.subs(&sub), &slots)?;
            xs.iter().map(|&x| e.eval(&[x], &fns).map_err(OracleError::from)).collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reduced pipeline on a grid.

/// Output of the reduced pipeline for one driver path.
pub struct ReducedRun {
    pub path: SamplePath,
    pub solution: GridSolution,
}

/// Integrates the reduced SDE along `path` (every step kept) and
/// reconstructs the dependent variables at the snapshot times.
pub fn reduced_solution(
    sys: &ReducedSystem,
    compiled: &CompiledSystem,
    grid: &GridSpec,
    path: &DriverPath,
    snapshots: usize,
    guards: &Guards,
) -> Result<ReducedRun, OracleError> {
    let xs = grid.nodes();
    let guards = Guards { record_every: 1, ..guards.clone() };
    let sample = integrate_stratonovich(compiled, &sys.initial, path, &guards);
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut warm: Option<Vec<Jet>> = None;
    let mut status = sample.status;
    for s in snapshot_steps(path.steps(), snapshots) {
        let Some(a) = sample.states.get(s) else { break };
        match compiled.recon.on_grid(a, &xs, 0, warm.as_deref()) {
            Ok(jets) => {
                values.push((0..sys.space.n()).map(|j| jets.iter().map(|jet| jet[j][0]).collect()).collect());
                times.push(sample.times[s]);
                warm = Some(jets);
            }
            Err(_) => {
                status = PathStatus::Exploded { t: sample.times[s], cause: Blowup::Chart };
                break;
            }
        }
    }
    let solution = GridSolution {
        names: sys.space.dep.clone(),
        xs,
        times,
        values,
        left: boundary_name(grid.left),
        right: boundary_name(grid.right),
        status,
        warnings: Vec::new(),
    };
    Ok(ReducedRun { path: sample, solution })
}

/// Dirichlet data from a reduced path: the state is interpolated linearly
/// between steps and reconstructed at x.
pub fn path_boundary<'a>(compiled: &'a CompiledSystem, sample: &'a SamplePath, dt: f64) -> impl Fn(f64, f64) -> Result<Vec<f64>, String> + Sync + 'a {
    move |t: f64, x: f64| {
        let pos = t / dt;
        let i = (pos.floor() as usize).min(sample.states.len().saturating_sub(1));
        let w = (pos - i as f64).clamp(0.0, 1.0);
        let a: Vec<f64> = match sample.states.get(i + 1) {
            Some(next) if w > 0.0 => sample.states[i].iter().zip(next).map(|(p, q)| p + w * (q - p)).collect(),
            _ => sample.states[i].clone(),
        };
        let jet = compiled.recon.jet_at(x, &a, 0, None).map_err(|e| e.to_string())?;
        Ok(jet.iter().map(|c| c[0]).collect())
    }
}

// ---------------------------------------------------------------------------
// Closed forms of the worked examples.

/// HJM primitive and forward curve for state (a, b, c, d) and initial
/// primitive f: V = e^{−c} f(x−a)/(1 + d f(x−a)) − b and U = ∂_x V.
pub fn hjm_closed_form(f: impl Fn(f64) -> f64, fp: impl Fn(f64) -> f64, state: &[f64], x: f64) -> (f64, f64) {
    let (a, b, c, d) = (state[0], state[1], state[2], state[3]);
    let y = x - a;
    let den = 1.0 + d * f(y);
    ((-c).exp() * f(y) / den - b, (-c).exp() * fp(y) / (den * den))
}

/// Hunter–Saxton profile (u, v) at x for state (a, b, c). The implicit
/// system collapses to one equation for the Lagrangian label
/// s = e^{−a}x − b f(s) − (b²/4) g(s) − c, solved by Newton from s = x.
pub fn hunter_saxton_closed_form(
    f: impl Fn(u32, f64) -> f64,
    g: impl Fn(u32, f64) -> f64,
    state: &[f64],
    x: f64,
) -> Result<(f64, f64), OracleError> {
    let (a, b, c) = (state[0], state[1], state[2]);
    let target = (-a).exp() * x - c;
    let q = b * b / 4.0;
    let mut s = target;
    for _ in 0..100 {
        let r = s + b * f(0, s) + q * g(0, s) - target;
        if r.abs() < 1e-14 {
            break;
        }
        let dr = 1.0 + b * f(1, s) + q * g(1, s);
        if dr <= 0.0 {
            return Err(OracleError::NewtonDiverged { x });
        }
        s -= r / dr;
    }
    let r = s + b * f(0, s) + q * g(0, s) - target;
    if !(r.abs() < 1e-12) {
        return Err(OracleError::NewtonDiverged { x });
    }
    let v = (-a).exp() * g(0, s);
    let u = f(0, s) + b / 2.0 * g(0, s);
    Ok((u, v))
}

/// Solution of u'' + λu' + μu = 0 with u(0) = u0, u'(0) = u1, by the
/// sign of λ² − 4μ.
pub fn second_order_branch(lambda: f64, mu: f64, u0: f64, u1: f64, x: f64) -> f64 {
    let disc = lambda * lambda - 4.0 * mu;
    let scale = lambda.abs().max(mu.abs().sqrt()).max(1.0);
    if disc.abs() <= 1e-14 * scale * scale {
        let r = -lambda / 2.0;
        return (u0 + (u1 - r * u0) * x) * (r * x).exp();
    }
    if disc > 0.0 {
        let sq = disc.sqrt();
        let (c, d) = ((-lambda + sq) / 2.0, (-lambda - sq) / 2.0);
        let a = (u1 - d * u0) / (c - d);
        let bb = (c * u0 - u1) / (c - d);
        a * (c * x).exp() + bb * (d * x).exp()
    } else {
        let r = -lambda / 2.0;
        let o = (-disc).sqrt() / 2.0;
        let b = (u1 - r * u0) / o;
        (r * x).exp() * (u0 * (o * x).cos() + b * (o * x).sin())
    }
}

// ---------------------------------------------------------------------------
// Metrics.

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotMetrics {
    pub t: f64,
    pub l2: f64,
    pub linf: f64,
    pub rel_l2: f64,
}

/// Grid norms of `a − b` per common snapshot, all components together, on
/// nodes at least `margin` (a fraction of the domain length) from either end.
/// The relative norm divides by the norm of `b`.
pub fn compare(a: &GridSolution, b: &GridSolution, margin: f64) -> Result<Vec<SnapshotMetrics>, OracleError> {
    if a.xs.len() != b.xs.len() || a.xs.iter().zip(&b.xs).any(|(p, q)| (p - q).abs() > 1e-12) {
        return Err(OracleError::GridMismatch(format!("{} vs {} nodes", a.xs.len(), b.xs.len())));
    }
    if a.names.len() != b.names.len() {
        return Err(OracleError::GridMismatch("different numbers of components".into()));
    }
    let n = a.times.len().min(b.times.len());
    let (x0, x1) = (a.xs[0], a.xs[a.xs.len() - 1]);
    let lo = x0 + margin * (x1 - x0) - 1e-12;
    let hi = x1 - margin * (x1 - x0) + 1e-12;
    let dx = if a.xs.len() > 1 { a.xs[1] - a.xs[0] } else { 1.0 };
    let keep: Vec<usize> = (0..a.xs.len()).filter(|&i| a.xs[i] >= lo && a.xs[i] <= hi).collect();
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        if (a.times[s] - b.times[s]).abs() > 1e-9 {
            return Err(OracleError::GridMismatch(format!("snapshot {s} at t = {} vs {}", a.times[s], b.times[s])));
        }
        let (mut e2, mut ref2, mut linf) = (0.0, 0.0, 0.0f64);
        for (ca, cb) in a.values[s].iter().zip(&b.values[s]) {
            for &i in &keep {
                let e = ca[i] - cb[i];
                e2 += e * e;
                ref2 += cb[i] * cb[i];
                linf = linf.max(e.abs());
            }
        }
        let l2 = (e2 * dx).sqrt();
        let rel_l2 = if ref2 > 0.0 { (e2 / ref2).sqrt() } else if e2 == 0.0 { 0.0 } else { f64::INFINITY };
        out.push(SnapshotMetrics { t: a.times[s], l2, linf, rel_l2 });
    }
    Ok(out)
}

/// Jet values of every point-value parameter, keyed by name, read off a
/// grid solution by the same one-sided differences the solver uses.
pub fn grid_point_values(model: &SpdeModel, sol: &[Vec<f64>], xs: &[f64]) -> Result<BTreeMap<String, f64>, OracleError> {
    let disc = Discretization::new(&to_stratonovich(model)?, xs)?;
    let dx = xs[1] - xs[0];
    Ok(disc.points.iter().map(|(p, _)| p.name.clone()).zip(disc.point_values(sol, dx)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bundled, parse_model, DriverKind};
    use crate::sim::{make_driver_path, DriverSpec};

    fn transport_model() -> SpdeModel {
        parse_model(
            "[model]\nname = transport\n[variables]\nindependent = x\ndependent = u\n[generators]\nG = u_x\n\
             [drivers]\nt = time: G\n[initial]\nu = sin(x)\n[grid]\nx0 = 0\nx1 = 3\ndx = 0.01\nleft = evolve\nright = evolve\n",
        )
        .unwrap()
    }

    #[test]
    fn deterministic_transport_matches_shift() {
        let m = transport_model();
        let xs = m.grid.nodes();
        let spec = DriverSpec::independent(vec![DriverKind::Time]);
        let path = make_driver_path(&spec, 0.5, 1e-4, 0, 0).unwrap();
        let init = initial_grid(&m, &xs).unwrap();
        let sol = fd_solve_spde(&m, &m.grid, &init, &path, None, &FdOptions::default()).unwrap();
        assert_eq!(sol.status, PathStatus::Completed);
        assert!((sol.times.last().unwrap() - 0.5).abs() < 1e-12);
        // Inflow from the right end is unknown; compare where the exact
        // characteristics stay inside the domain.
        let err = xs
            .iter()
            .zip(&sol.last()[0])
            .filter(|(x, _)| **x <= 2.5)
            .map(|(x, u)| (u - (x + 0.5).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 5e-3, "L∞ error {err}");
    }

    #[test]
    fn zero_generators_are_stationary() {
        let m = parse_model(
            "[model]\nname = still\n[variables]\nindependent = x\ndependent = u\n[generators]\nG = u_x\n\
             [drivers]\nt = time: 0\n[initial]\nu = exp(-x^2)\n[grid]\nx0 = -1\nx1 = 1\ndx = 0.05\n",
        )
        .unwrap();
        let xs = m.grid.nodes();
        let spec = DriverSpec::independent(vec![DriverKind::Time]);
        let path = make_driver_path(&spec, 0.1, 1e-3, 0, 0).unwrap();
        let init = initial_grid(&m, &xs).unwrap();
        let sol = fd_solve_spde(&m, &m.grid, &init, &path, None, &FdOptions::default()).unwrap();
        assert_eq!(sol.last(), init.as_slice());
        let metrics = compare(&sol, &sol, 0.0).unwrap();
        assert!(metrics.iter().all(|m| m.l2 == 0.0 && m.linf == 0.0 && m.rel_l2 == 0.0));
    }

    #[test]
    fn hjm_without_volatility_is_transport() {
        let mut m = parse_model(bundled("hjm").unwrap()).unwrap();
        m.params = vec![("Psi0".into(), crate::expr::q(0))];
        let xs = m.grid.nodes();
        let spec = DriverSpec::independent(vec![DriverKind::Time, DriverKind::Wiener]);
        let path = make_driver_path(&spec, 0.1, 1e-4, 1, 0).unwrap();
        let init = initial_grid(&m, &xs).unwrap();
        let sol = fd_solve_spde(&m, &m.grid, &init, &path, None, &FdOptions::default()).unwrap();
        // U = v_x transports: U(t, x) = f'(x + t), with v(t, 0) = 0.
        let t = 0.1;
        let fp = |x: f64| 0.5 * (-x).exp();
        let v = &sol.last()[0];
        let dx = m.grid.dx;
        let mut err = 0.0f64;
        for i in 1..xs.len() - 1 {
            if xs[i] > 1.8 {
                break;
            }
            err = err.max(((v[i + 1] - v[i - 1]) / (2.0 * dx) - fp(xs[i] + t)).abs());
        }
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn shifted_sine_norm_is_first_order() {
        let xs: Vec<f64> = (0..=600).map(|i| i as f64 * 0.01).collect();
        let mk = |shift: f64| GridSolution {
            names: vec!["u".into()],
            xs: xs.clone(),
            times: vec![0.0],
            values: vec![vec![xs.iter().map(|x| (x + shift).sin()).collect()]],
            left: "evolve",
            right: "evolve",
            status: PathStatus::Completed,
            warnings: vec![],
        };
        let m = compare(&mk(0.01), &mk(0.0), 0.0).unwrap();
        assert!((m[0].linf - 0.01).abs() < 1e-4, "{}", m[0].linf);
        let other = GridSolution { xs: xs.iter().map(|x| x * 2.0).collect(), ..mk(0.0) };
        assert!(matches!(compare(&other, &mk(0.0), 0.0), Err(OracleError::GridMismatch(_))));
    }

    #[test]
    fn branch_formulas_cover_all_cases() {
        // Compare each branch with a fine RK4 integration.
        for (lam, mu) in [(1.0, -2.0), (0.4, 3.0), (2.0, 1.0)] {
            let (u0, u1) = (1.0, -0.5);
            let mut y = [u0, u1];
            let n = 20000;
            let h = 2.0 / n as f64;
            let rhs = |y: [f64; 2]| [y[1], -lam * y[1] - mu * y[0]];
            for _ in 0..n {
                let k1 = rhs(y);
                let k2 = rhs([y[0] + h / 2.0 * k1[0], y[1] + h / 2.0 * k1[1]]);
                let k3 = rhs([y[0] + h / 2.0 * k2[0], y[1] + h / 2.0 * k2[1]]);
                let k4 = rhs([y[0] + h * k3[0], y[1] + h * k3[1]]);
                for c in 0..2 {
                    y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
                }
            }
            let got = second_order_branch(lam, mu, u0, u1, 2.0);
            assert!((got - y[0]).abs() < 1e-10, "λ={lam}, μ={mu}: {got} vs {}", y[0]);
        }
    }
}
