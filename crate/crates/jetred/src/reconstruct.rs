//! Numeric reconstruction of U_t(x) from the reduced state, and compiled
//! SDE coefficients.

use std::collections::{BTreeMap, HashMap};
use std::sync::RwLock;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::calculus::total_derivative;
use crate::coords::JetCoord;
use crate::expr::{compile, EvalError, Expr, NumExpr};
use crate::functions::FunctionTable;
use crate::model::DriverKind;
use crate::reduction::{ReducedSystem, Reconstruction};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReconstructError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("Newton did not converge at x = {x}")]
    NewtonDiverged { x: f64 },
    #[error("the state left the reconstruction chart at x = {x}")]
    LeftChart { x: f64 },
    #[error("singular implicit system at x = {x}")]
    Singular { x: f64 },
}

/// Jet of the reconstructed solution at one point: `jet[j][q]` = u^j_(q)(x).
pub type Jet = Vec<Vec<f64>>;

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_ITERS: usize = 50;

struct Transported {
    n: usize,
    /// Numerators N_j of the residuals over [x, u…, state…].
    num: Vec<NumExpr>,
    jac: Vec<Vec<NumExpr>>,
    /// Denominators of the residuals; their sign defines the chart.
    den: Vec<NumExpr>,
    linear: bool,
    /// D_x^q N_j over [x, jets up to q, state], with u_(q) set to zero.
    higher: Vec<Vec<NumExpr>>,
    /// Initial functions f^j over [x, state].
    init: Vec<NumExpr>,
}

enum Kind {
    Transported(Box<Transported>),
    LinearOde { order: usize },
}

pub struct Reconstructor {
    kind: Kind,
    n: usize,
    h: usize,
    /// State at which chart signs are referenced.
    origin: Vec<f64>,
    reference: RwLock<HashMap<u64, Vec<f64>>>,
    fns: FunctionTable,
    max_order: u32,
}

fn det(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        m[(0, 0)]
    } else {
        m.determinant()
    }
}

impl Reconstructor {
    /// Compiles reconstruction for jets up to `max_order`.
    pub fn new(sys: &ReducedSystem, max_order: u32) -> Result<Self, ReconstructError> {
        let n = sys.space.n();
        let h = sys.h();
        let params = sys.param_map();
        let state = sys.state_coords();
        let kind = match &sys.reconstruction {
            Reconstruction::LinearOde { order } => Kind::LinearOde { order: *order as usize },
            Reconstruction::Transported { residuals, initial, .. } => {
                let x = JetCoord::x(0);
                let us: Vec<JetCoord> = (0..n).map(JetCoord::u).collect();
                let mut slots = vec![x.clone()];
                slots.extend(us.iter().cloned());
                slots.extend(state.iter().cloned());
                let mut nums = Vec::new();
                let mut dens = Vec::new();
                for r in residuals {
                    let (nu, de) = r.subs(&params).num_den();
                    nums.push(Expr::from_poly(nu));
                    dens.push(Expr::from_poly(de));
                }
                let jac_e: Vec<Vec<Expr>> = nums.iter().map(|nj| us.iter().map(|u| nj.diff(u)).collect()).collect();
                let linear = jac_e.iter().flatten().all(|e| us.iter().all(|u| !e.depends_on(u)));
                let num = nums.iter().map(|e| compile(e, &slots)).collect::<Result<Vec<_>, _>>()?;
                let jac = jac_e
                    .iter()
                    .map(|row| row.iter().map(|e| compile(e, &slots)).collect::<Result<Vec<_>, _>>())
                    .collect::<Result<Vec<_>, _>>()?;
                let den = dens.iter().map(|e| compile(e, &slots)).collect::<Result<Vec<_>, _>>()?;
                let mut higher = Vec::new();
                let mut cur = nums.clone();
                for q in 1..=max_order {
                    cur = cur
                        .iter()
                        .map(|e| total_derivative(e, 0, &sys.space))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| EvalError::Domain(e.to_string()))?;
                    let zero: BTreeMap<JetCoord, Expr> = (0..n).map(|j| (JetCoord::ux(j, q), Expr::zero())).collect();
                    let qslots = jet_slots(n, q, &state);
                    higher.push(cur.iter().map(|e| compile(&e.subs(&zero), &qslots)).collect::<Result<Vec<_>, _>>()?);
                }
                let mut islots = vec![x];
                islots.extend(state.iter().cloned());
                let init = initial
                    .iter()
                    .map(|f| compile(&f.subs(&params), &islots))
                    .collect::<Result<Vec<_>, _>>()?;
                Kind::Transported(Box::new(Transported { n, num, jac, den, linear, higher, init }))
            }
        };
        // Chart signs are referenced where every flow is the identity.
        let origin = match &sys.reconstruction {
            Reconstruction::Transported { flows, .. } => sys
                .state
                .iter()
                .zip(&sys.initial)
                .map(|(name, v)| if flows.iter().any(|f| f.param == *name) { 0.0 } else { *v })
                .collect(),
            Reconstruction::LinearOde { .. } => sys.initial.clone(),
        };
        Ok(Reconstructor { kind, n, h, origin, reference: RwLock::default(), fns: sys.functions.clone(), max_order })
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    /// Whether the implicit system is solved in closed form.
    pub fn is_linear(&self) -> bool {
        match &self.kind {
            Kind::Transported(t) => t.linear,
            Kind::LinearOde { .. } => true,
        }
    }

    fn initial_guess(&self, t: &Transported, x: f64, a: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut inp = Vec::with_capacity(1 + self.h);
        inp.push(x);
        inp.extend_from_slice(a);
        t.init.iter().map(|f| f.eval(&inp, &self.fns)).collect()
    }

    fn eval_system(&self, t: &Transported, x: f64, u: &[f64], a: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), EvalError> {
        let mut inp = Vec::with_capacity(1 + t.n + self.h);
        inp.push(x);
        inp.extend_from_slice(u);
        inp.extend_from_slice(a);
        let r = t.num.iter().map(|e| e.eval(&inp, &self.fns)).collect::<Result<Vec<_>, _>>()?;
        let mut j = DMatrix::zeros(t.n, t.n);
        for (i, row) in t.jac.iter().enumerate() {
            for (k, e) in row.iter().enumerate() {
                j[(i, k)] = e.eval(&inp, &self.fns)?;
            }
        }
        Ok((r, j))
    }

    fn chart_signs(&self, t: &Transported, x: f64, u: &[f64], a: &[f64]) -> Result<Vec<f64>, ReconstructError> {
        let (_, j) = self.eval_system(t, x, u, a)?;
        self.signs_with(t, x, u, a, &j)
    }

    /// Chart signs given the Jacobian at (x, u, a).
    fn signs_with(&self, t: &Transported, x: f64, u: &[f64], a: &[f64], j: &DMatrix<f64>) -> Result<Vec<f64>, ReconstructError> {
        let mut inp = Vec::with_capacity(1 + t.n + self.h);
        inp.push(x);
        inp.extend_from_slice(u);
        inp.extend_from_slice(a);
        let mut s = vec![det(j).signum()];
        for d in &t.den {
            s.push(d.eval(&inp, &self.fns)?.signum());
        }
        Ok(s)
    }

    /// Chart signs at the origin state, cached per x.
    fn reference_signs(&self, t: &Transported, x: f64) -> Result<Vec<f64>, ReconstructError> {
        let key = x.to_bits();
        if let Some(s) = self.reference.read().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(s.clone());
        }
        let ref_u = self.initial_guess(t, x, &self.origin)?;
        let s = self.chart_signs(t, x, &ref_u, &self.origin)?;
        self.reference.write().unwrap_or_else(|e| e.into_inner()).insert(key, s.clone());
        Ok(s)
    }

    /// Solves the implicit system for u at one point.
    fn solve_u(&self, t: &Transported, x: f64, a: &[f64], guess: Option<&[f64]>) -> Result<(Vec<f64>, DMatrix<f64>), ReconstructError> {
        let n = t.n;
        let (u, j) = if t.linear {
            let zero = vec![0.0; n];
            let (r0, j) = self.eval_system(t, x, &zero, a)?;
            let sol = j.clone().lu().solve(&DVector::from_vec(r0.iter().map(|v| -v).collect())).ok_or(ReconstructError::Singular { x })?;
            (sol.iter().cloned().collect(), j)
        } else {
            let start = match guess {
                Some(g) => g.to_vec(),
                None => self.initial_guess(t, x, a)?,
            };
            self.newton(t, x, a, start)?
        };
        if u.iter().any(|v| !v.is_finite()) {
            return Err(ReconstructError::LeftChart { x });
        }
        // Chart: Jacobian and denominators keep the signs they have at the
        // origin state.
        let want = self.reference_signs(t, x)?;
        let got = self.signs_with(t, x, &u, a, &j)?;
        if want != got {
            return Err(ReconstructError::LeftChart { x });
        }
        Ok((u, j))
    }

    fn newton(&self, t: &Transported, x: f64, a: &[f64], mut u: Vec<f64>) -> Result<(Vec<f64>, DMatrix<f64>), ReconstructError> {
        let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let (mut r, mut j) = self.eval_system(t, x, &u, a)?;
        for _ in 0..NEWTON_ITERS {
            let nr = norm(&r);
            if nr < NEWTON_TOL {
                return Ok((u, j));
            }
            let step = j
                .clone()
                .lu()
                .solve(&DVector::from_vec(r.iter().map(|v| -v).collect()))
                .ok_or(ReconstructError::Singular { x })?;
            let mut lambda = 1.0;
            loop {
                let trial: Vec<f64> = u.iter().zip(step.iter()).map(|(a, d)| a + lambda * d).collect();
                if let Ok((rt, jt)) = self.eval_system(t, x, &trial, a) {
                    if rt.iter().all(|v| v.is_finite()) && norm(&rt) < nr {
                        u = trial;
                        r = rt;
                        j = jt;
                        break;
                    }
                }
                lambda *= 0.5;
                if lambda < 1e-6 {
                    return Err(ReconstructError::NewtonDiverged { x });
                }
            }
        }
        if norm(&r) < NEWTON_TOL {
            Ok((u, j))
        } else {
            Err(ReconstructError::NewtonDiverged { x })
        }
    }

    /// Jet up to `order` at x for state a.
    pub fn jet_at(&self, x: f64, a: &[f64], order: u32, guess: Option<&[f64]>) -> Result<Jet, ReconstructError> {
        assert!(order <= self.max_order, "reconstruction compiled for order {}", self.max_order);
        match &self.kind {
            Kind::LinearOde { order: n } => Ok(linear_ode_jet(&a[..*n], &a[*n..2 * n], x, order)),
            Kind::Transported(t) => {
                let (u, jm) = self.solve_u(t, x, a, guess)?;
                let mut jet: Jet = u.iter().map(|v| vec![*v]).collect();
                if order == 0 {
                    return Ok(jet);
                }
                let mut base = vec![x];
                base.extend_from_slice(&u);
                base.extend_from_slice(a);
                let lu = jm.lu();
                for q in 1..=order {
                    let mut inp = vec![x];
                    for col in &jet {
                        inp.extend_from_slice(col);
                        inp.push(0.0);
                    }
                    inp.extend_from_slice(a);
                    let rhs = t.higher[q as usize - 1]
                        .iter()
                        .map(|e| e.eval(&inp, &self.fns).map(|v| -v))
                        .collect::<Result<Vec<_>, _>>()?;
                    let sol = lu.solve(&DVector::from_vec(rhs)).ok_or(ReconstructError::Singular { x })?;
                    for (j, v) in sol.iter().enumerate() {
                        jet[j].push(*v);
                    }
                }
                Ok(jet)
            }
        }
    }

    /// Jets on a grid, marching left to right. `warm[i]` seeds Newton at
    /// grid point i; otherwise the previous point's solution is used after
    /// the initial curve fails.
    pub fn on_grid(&self, a: &[f64], xs: &[f64], order: u32, warm: Option<&[Jet]>) -> Result<Vec<Jet>, ReconstructError> {
        let mut out: Vec<Jet> = Vec::with_capacity(xs.len());
        for (i, &x) in xs.iter().enumerate() {
            let guess: Option<Vec<f64>> = warm.and_then(|w| w.get(i)).map(|j| j.iter().map(|c| c[0]).collect());
            let res = match self.jet_at(x, a, order, guess.as_deref()) {
                Err(ReconstructError::NewtonDiverged { .. }) if i > 0 => {
                    let prev: Vec<f64> = out[i - 1].iter().map(|c| c[0]).collect();
                    self.jet_at(x, a, order, Some(&prev))
                }
                r => r,
            }?;
            out.push(res);
        }
        Ok(out)
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Slot order for jets up to q: x, then for each j the values u^j … u^j_(q),
/// then the state.
fn jet_slots(n: usize, q: u32, state: &[JetCoord]) -> Vec<JetCoord> {
    let mut s = vec![JetCoord::x(0)];
    for j in 0..n {
        for k in 0..=q {
            s.push(JetCoord::ux(j, k));
        }
    }
    s.extend(state.iter().cloned());
    s
}

/// Companion matrix of u_(n) + Σ μ^k u_(k) = 0 acting on (u, …, u_(n−1)).
pub fn companion(mu: &[f64]) -> DMatrix<f64> {
    let n = mu.len();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        c[(i, i + 1)] = 1.0;
    }
    for k in 0..n {
        c[(n - 1, k)] = -mu[k];
    }
    c
}

/// u_(q)(x) for q ≤ order from the boundary jet y0 = (u(0), …, u_(n−1)(0)).
pub fn linear_ode_jet(mu: &[f64], y0: &[f64], x: f64, order: u32) -> Jet {
    let c = companion(mu);
    let mut y = (&c * x).exp() * DVector::from_column_slice(y0);
    let mut col = Vec::with_capacity(order as usize + 1);
    for _ in 0..=order {
        col.push(y[0]);
        y = &c * y;
    }
    vec![col]
}

pub fn reconstruct_linear_ode(mu: &[f64], y0: &[f64], xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| linear_ode_jet(mu, y0, x, 0)[0][0]).collect()
}

// ---------------------------------------------------------------------------
// Compiled SDE coefficients.

/// Coefficients of the reduced SDE compiled over [state…, point values…].
pub struct CompiledSystem {
    pub drivers: Vec<(DriverKind, Vec<NumExpr>)>,
    pub h: usize,
    pub recon: Reconstructor,
    points: Vec<(JetCoord, f64)>,
    fns: FunctionTable,
}

impl CompiledSystem {
    pub fn new(sys: &ReducedSystem) -> Result<Self, ReconstructError> {
        let params = sys.param_map();
        let mut slots = sys.state_coords();
        slots.extend(sys.point_values.iter().map(|p| JetCoord::param(&p.name)));
        let drivers = sys
            .drivers
            .iter()
            .map(|d| {
                let c = d.coeffs.iter().map(|e| compile(&e.subs(&params), &slots)).collect::<Result<Vec<_>, _>>()?;
                Ok((d.kind, c))
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        let order = sys.point_values.iter().map(|p| p.coord.order()).max().unwrap_or(0).max(1);
        let recon = Reconstructor::new(sys, order.max(2))?;
        let points = sys.point_values.iter().map(|p| (p.coord.clone(), p.at)).collect();
        Ok(CompiledSystem { drivers, h: sys.h(), recon, points, fns: sys.functions.clone() })
    }

    pub fn has_point_values(&self) -> bool {
        !self.points.is_empty()
    }

    /// Coefficient matrix `out[α][l]` at state a.
    pub fn coefficients(&self, a: &[f64], out: &mut [Vec<f64>]) -> Result<(), ReconstructError> {
        let mut inp = a.to_vec();
        for (c, at) in &self.points {
            let (j, q) = match c {
                JetCoord::Dep { j, sigma } => (*j, sigma.order()),
                _ => unreachable!("point values refer to dependent coordinates"),
            };
            let jet = self.recon.jet_at(*at, a, q, None)?;
            inp.push(jet[j][q as usize]);
        }
        for ((_, cs), row) in self.drivers.iter().zip(out.iter_mut()) {
            for (e, slot) in cs.iter().zip(row.iter_mut()) {
                *slot = e.eval(&inp, &self.fns)?;
            }
        }
        Ok(())
    }
}

/// Output observables evaluated on reconstructed jets.
pub struct Observables {
    names: Vec<String>,
    exprs: Vec<NumExpr>,
    order: u32,
    n: usize,
    h: usize,
    fns: FunctionTable,
}

impl Observables {
    /// The model outputs, or the dependent variables when none are given.
    pub fn new(sys: &ReducedSystem) -> Result<Self, ReconstructError> {
        let n = sys.space.n();
        let outs: Vec<(String, Expr)> = if sys.output.is_empty() {
            (0..n).map(|j| (sys.space.dep[j].clone(), Expr::u(j))).collect()
        } else {
            sys.output.clone()
        };
        let order = outs.iter().map(|(_, e)| e.max_order()).max().unwrap_or(0);
        let slots = jet_slots(n, order, &sys.state_coords());
        let params = sys.param_map();
        let exprs = outs.iter().map(|(_, e)| compile(&e.subs(&params), &slots)).collect::<Result<Vec<_>, _>>()?;
        Ok(Observables {
            names: outs.into_iter().map(|(n, _)| n).collect(),
            exprs,
            order,
            n,
            h: sys.h(),
            fns: sys.functions.clone(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn eval(&self, x: f64, jet: &Jet, a: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut inp = Vec::with_capacity(1 + self.n * (self.order as usize + 1) + self.h);
        inp.push(x);
        for col in jet {
            inp.extend_from_slice(&col[..=self.order as usize]);
        }
        inp.extend_from_slice(a);
        self.exprs.iter().map(|e| e.eval(&inp, &self.fns)).collect()
    }
}
