//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when any
//! criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use jetred::calculus::{evolution_bracket, lie_closure, ClosureError, ClosureOptions, EvolutionField, LieAlgebra};
use jetred::expr::{q, qfrac, FnProvider, Q};
use jetred::flows::{catalog_flow, characteristic_field, propose_h, verify_flow, FlowVerdict};
use jetred::functions::FunctionTable;
use jetred::model::{bundled, parse_model, SpdeModel};
use jetred::oracle::{
    compare, fd_solve_spde, hjm_closed_form, initial_grid, path_boundary, reduced_solution, second_order_branch,
    snapshot_steps, FdOptions, ReducedRun, SnapshotMetrics,
};
use jetred::phi::{default_coords, random_solvable_algebra, solve_constants, solve_phi, solve_phi_with_drift, verify_phi, PhiTable};
use jetred::reconstruct::{companion, reconstruct_linear_ode, CompiledSystem};
use jetred::reduction::{build_ode_constraint_sde, build_reduced_sde, ode_constraint_tangency, LinearOdeConstraint, ReducedSystem};
use jetred::sim::{
    guard_grid, integrate_stratonovich, make_driver_path, simulate_paths, DriverPath, DriverSpec, FnSystem, Guards,
    PathStatus,
};
use jetred::{equal, parse_expr, Expr, JetCoord, ParseContext, Space, Verdict};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("bracket tables", c1_bracket_tables),
        ("non-closure chain", c2_non_closure),
        ("phi tables", c3_phi_tables),
        ("flow verification", c4_flows),
        ("filtering tangency", c5_filtering),
        ("HJM end-to-end", c6_hjm),
        ("Hunter-Saxton end-to-end", c7_hunter_saxton),
        ("integrator soundness", c8_integrator),
        ("explosion behavior", c9_explosion),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS criterion {} ({name}, {secs:.1} s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} ({name}, {secs:.1} s): {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// Helpers.

fn ctx(space: &Space) -> ParseContext {
    ParseContext { auto_declare: true, ..ParseContext::new(space.clone()) }
}

fn expr(space: &Space, s: &str) -> Expr {
    parse_expr(s, &ctx(space)).unwrap_or_else(|e| panic!("parse {s}: {e}"))
}

fn fields(space: &Space, comps: &[&[&str]]) -> Vec<EvolutionField> {
    comps.iter().map(|f| EvolutionField::new(f.iter().map(|s| expr(space, s)).collect())).collect()
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn canonical(a: &Expr, b: &Expr) -> bool {
    matches!(equal(a, b), Ok(Verdict::EqualCanonical))
}

fn within(limit: Duration, start: Instant, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure!(took <= limit, "{what} took {took:?}, limit {limit:?}");
    Ok(())
}

/// Checks λ against the expected nonzero constants and every bracket
/// against Σ λ^k G_k canonically.
fn check_table(
    gens: &[EvolutionField],
    space: &Space,
    alg: &LieAlgebra,
    relations: &[(usize, usize, usize, Q)],
) -> Result<(), String> {
    let h = gens.len();
    ensure!(alg.dim() == h, "closure has dimension {}, expected {h}", alg.dim());
    let mut want = vec![vec![vec![q(0); h]; h]; h];
    for (i, j, k, c) in relations {
        want[*i][*j][*k] = c.clone();
        want[*j][*i][*k] = -c.clone();
    }
    ensure!(alg.lambda == want, "structure constants differ");
    for i in 0..h {
        for j in 0..h {
            let br = evolution_bracket(&gens[i], &gens[j], space).map_err(|e| e.to_string())?;
            let rhs = EvolutionField::combination(&want[i][j], gens, space.n());
            for (a, b) in br.components.iter().zip(&rhs.components) {
                ensure!(canonical(a, b), "[G{},G{}] = {} is not canonically the tabulated combination", i + 1, j + 1, a.display(space));
            }
        }
    }
    Ok(())
}

fn check_phi(t: &PhiTable, lambda: &[Vec<Vec<Q>>], space: &Space, want: &[&[&str]]) -> Result<(), String> {
    for (i, row) in want.iter().enumerate() {
        for (l, s) in row.iter().enumerate() {
            let w = expr(space, s);
            ensure!(canonical(&t.entries[i][l], &w), "phi[{i}][{l}] = {}, expected {s}", t.entries[i][l].display(space));
        }
    }
    ensure!(matches!(verify_phi(t, lambda), jetred::phi::PhiVerdict::EqualCanonical), "verify_phi rejected the table");
    Ok(())
}

fn model(name: &str) -> SpdeModel {
    parse_model(bundled(name).expect("bundled model")).expect("bundled model parses")
}

fn max_rel(ms: &[SnapshotMetrics]) -> f64 {
    ms.iter().map(|m| m.rel_l2).fold(0.0, f64::max)
}

fn hjm_space() -> Space {
    Space::new(["x"], ["v"])
}

fn hs_space() -> Space {
    Space::new(["x"], ["u", "v"])
}

const HJM_GENS: [&[&str]; 4] = [&["v_x"], &["1"], &["v"], &["v^2"]];
const HS_GENS: [&[&str]; 5] =
    [&["x*u_x", "x*v_x + v"], &["u*u_x - v/2", "u*v_x"], &["u_x", "v_x"], &["1", "0"], &["0", "1"]];

// ---------------------------------------------------------------------------
// 1. Bracket tables.

fn c1_bracket_tables() -> Outcome {
    let limit = Duration::from_secs(1);
    let sp = Space::scalar();
    let start = Instant::now();
    let g = fields(&sp, &[&["1"], &["u"], &["u^2"]]);
    let alg = lie_closure(&g, &ClosureOptions::default(), &sp).map_err(|e| e.to_string())?;
    check_table(&g, &sp, &alg, &[(0, 1, 0, q(1)), (0, 2, 1, q(2)), (1, 2, 2, q(1))])?;
    within(limit, start, "{1, u, u^2}")?;

    let sp = hjm_space();
    let start = Instant::now();
    let g = fields(&sp, &HJM_GENS);
    let alg = lie_closure(&g, &ClosureOptions::default(), &sp).map_err(|e| e.to_string())?;
    check_table(&g, &sp, &alg, &[(1, 2, 1, q(1)), (1, 3, 2, q(2)), (2, 3, 3, q(1))])?;
    within(limit, start, "HJM")?;

    let sp = hs_space();
    let start = Instant::now();
    let g = fields(&sp, &HS_GENS);
    let alg = lie_closure(&g, &ClosureOptions::default(), &sp).map_err(|e| e.to_string())?;
    check_table(
        &g,
        &sp,
        &alg,
        &[(0, 1, 1, q(1)), (0, 2, 2, q(1)), (0, 4, 4, q(-1)), (1, 3, 2, q(-1)), (1, 4, 3, qfrac(1, 2))],
    )?;
    within(limit, start, "Hunter-Saxton")?;
    Ok("3, 4 and 5 dimensional tables reproduced canonically".into())
}

// ---------------------------------------------------------------------------
// 2. Non-closure.

fn c2_non_closure() -> Outcome {
    let start = Instant::now();
    let sp = Space::scalar();
    let g = fields(&sp, &[&["x*u_xx"], &["u_x"]]);
    let mut cur = g[1].clone();
    let mut fact = 1i64;
    for n in 1..=4u32 {
        fact *= n as i64;
        cur = evolution_bracket(&g[0], &cur, &sp).map_err(|e| e.to_string())?;
        let want = Expr::ux(0, n + 1).scale(&q(fact));
        ensure!(canonical(&cur.components[0], &want), "depth {n}: {}", cur.components[0].display(&sp));
    }
    match lie_closure(&g, &ClosureOptions::default(), &sp) {
        Err(ClosureError::NotClosed(_)) => {}
        Err(e) => return Err(format!("unexpected error {e}")),
        Ok(a) => return Err(format!("closed with dimension {}", a.dim())),
    }
    within(Duration::from_secs(1), start, "non-closure")?;
    Ok("[x u_xx, .]^n u_x = n! u_(n+1) for n = 1..4, NotClosed".into())
}

// ---------------------------------------------------------------------------
// 3. φ tables.

fn c3_phi_tables() -> Outcome {
    let start = Instant::now();
    let sp = Space::scalar();
    let alg = lie_closure(&fields(&sp, &[&["1"], &["u"], &["u^2"]]), &ClosureOptions::default(), &sp).map_err(|e| e.to_string())?;
    let t = solve_phi(&alg, &[0, 1, 2], &names(&["a1", "a2", "a3"])).map_err(|e| e.to_string())?;
    check_phi(&t, &alg.lambda, &sp, &[&["-1", "0", "0"], &["a1", "-1", "0"], &["-a1^2", "2*a1", "-exp(-a2)"]])?;

    let sp = hjm_space();
    let alg = lie_closure(&fields(&sp, &HJM_GENS), &ClosureOptions::default(), &sp).map_err(|e| e.to_string())?;
    let t = solve_phi(&alg, &[0, 1, 2, 3], &names(&["a", "b", "c", "d"])).map_err(|e| e.to_string())?;
    check_phi(
        &t,
        &alg.lambda,
        &sp,
        &[&["-1", "0", "0", "0"], &["0", "-1", "0", "0"], &["0", "b", "-1", "0"], &["0", "-b^2", "2*b", "-exp(-c)"]],
    )?;

    let sp = hs_space();
    let alg = lie_closure(&fields(&sp, &HS_GENS[..3]), &ClosureOptions::default(), &sp).map_err(|e| e.to_string())?;
    let t = solve_phi(&alg, &[0, 1, 2], &names(&["a", "b", "c"])).map_err(|e| e.to_string())?;
    check_phi(&t, &alg.lambda, &sp, &[&["-1", "0", "0"], &["0", "-exp(-a)", "0"], &["0", "0", "-exp(-a)"]])?;

    let sp = Space::scalar();
    let g = fields(&sp, &[&["sigma^2/2*x*u_xx + beta*u_x"], &["x*u_x"], &["u"]]);
    let alg = lie_closure(&g, &ClosureOptions::default(), &sp).map_err(|e| e.to_string())?;
    let t = solve_phi_with_drift(&alg, 0, &names(&["a", "b", "c"])).map_err(|e| e.to_string())?;
    check_phi(&t, &alg.lambda, &sp, &[&["exp(-b)", "0", "0"], &["0", "-1", "0"], &["0", "0", "-1"]])?;

    let mut dims = [0usize; 5];
    for seed in 0..50u64 {
        let dim = 1 + (seed as usize % 4);
        let l = random_solvable_algebra(dim, 1000 + seed);
        LieAlgebra::from_constants(l.clone()).check_constants()?;
        let order: Vec<usize> = (0..dim).collect();
        let t = solve_constants(&l, &order, &default_coords(dim, false)).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure!(verify_phi(&t, &l).passed(), "random algebra {seed} (dim {dim}) fails verify_phi");
        dims[dim] += 1;
    }
    within(Duration::from_secs(10), start, "phi tables")?;
    Ok(format!("four displayed tables canonical; 50 random solvable algebras (dims 1..4: {:?}) verified", &dims[1..]))
}

// ---------------------------------------------------------------------------
// 4. Flows.

fn c4_flows() -> Outcome {
    let scalar = Space::scalar();
    let mut cases: Vec<(Space, EvolutionField)> = Vec::new();
    for g in ["u*u_x", "u^2", "x*u_x", "u + 1", "u_x", "1", "u", "x*u"] {
        cases.push((scalar.clone(), EvolutionField::scalar(expr(&scalar, g))));
    }
    let hjm = hjm_space();
    for g in fields(&hjm, &HJM_GENS) {
        cases.push((hjm.clone(), g));
    }
    let hs = hs_space();
    for g in fields(&hs, &HS_GENS) {
        cases.push((hs.clone(), g));
    }
    let fns = FunctionTable::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for (sp, f) in &cases {
        let label = f.display(sp);
        let h = propose_h(f, sp).ok_or_else(|| format!("no characteristic drift for {label}"))?;
        let flow = catalog_flow(f, &h, "a", sp).ok_or_else(|| format!("{label} is not in the catalog"))?;
        let cf = characteristic_field(f, &h, 3, sp).map_err(|e| e.to_string())?;
        match verify_flow(&cf, &flow, 3, sp) {
            FlowVerdict::Fail { coord, detail } => return Err(format!("{label}: {coord:?}: {detail}")),
            FlowVerdict::EqualNumeric | FlowVerdict::EqualCanonical => {}
        }
        let a = JetCoord::param("a");
        for (c, e) in &flow.pullbacks {
            ensure!(e.subs_one(&a, &Expr::zero()) == Expr::coord(c.clone()), "{label}: pullback of {c:?} at a = 0 is not the identity");
        }
        // Φ_s ∘ Φ_t = Φ_{s+t} at random points.
        let fb = catalog_flow(f, &h, "b", sp).expect("same catalog entry");
        let fs = catalog_flow(f, &h, "s", sp).expect("same catalog entry");
        for _ in 0..20 {
            let mut pt = BTreeMap::new();
            for c in flow.pullbacks.keys() {
                pt.insert(c.clone(), rng.random_range(-0.5..0.5));
            }
            let (ta, tb) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            pt.insert(JetCoord::param("a"), ta);
            pt.insert(JetCoord::param("b"), tb);
            pt.insert(JetCoord::param("s"), ta + tb);
            for (c, e) in &fs.pullbacks {
                let lhs = flow.pull(&fb.pullbacks[c], sp).map_err(|e| e.to_string())?.eval(&pt, &fns).map_err(|e| e.to_string())?;
                let rhs: f64 = e.eval(&pt, &fns).map_err(|e| e.to_string())?;
                let err = (lhs - rhs).abs() / rhs.abs().max(1.0);
                worst = worst.max(err);
                ensure!(err <= 1e-10, "{label}: group law off by {err:e} at {c:?}");
            }
        }
    }
    Ok(format!("{} catalog flows verified to order 3; worst group-law error {worst:.1e}", cases.len()))
}

// ---------------------------------------------------------------------------
// 5. Filtering tangency.

fn c5_filtering() -> Outcome {
    let m = model("filtering");
    let sp = m.space.clone();
    let c = LinearOdeConstraint::new(&["mu", "lambda"]);
    let gens: Vec<EvolutionField> = m.generators.iter().map(|(_, f)| f.clone()).collect();
    let tang = ode_constraint_tangency(&gens, &c, &sp).map_err(|e| e.to_string())?;
    let p = |s: &str| expr(&sp, s);
    // (V(μ), V(λ)) and the x = 0 values of (V(u), V(u_x)) per generator.
    let want: [(&str, [&str; 2], [&str; 2]); 5] = [
        ("F", ["-lambda*mu", "-lambda^2 + 2*mu"], ["0", "-(lambda*u_x@0 + mu*u@0)"]),
        ("G1", ["2*mu", "lambda"], ["0", "u_x@0"]),
        ("G2", ["0", "0"], ["u@0", "u_x@0"]),
        ("G3", ["0", "0"], ["u_x@0", "-(lambda*u_x@0 + mu*u@0)"]),
        ("G4", ["-lambda", "-2"], ["0", "u@0"]),
    ];
    for ((name, mu, bd), t) in want.iter().zip(&tang) {
        for k in 0..2 {
            ensure!(canonical(&t.mu_rates[k], &p(mu[k])), "{name}: rate {k} is {}", t.mu_rates[k].display(&sp));
            ensure!(canonical(&t.boundary_rates[k], &p(bd[k])), "{name}: boundary rate {k} is {}", t.boundary_rates[k].display(&sp));
        }
    }
    // The (L, M) part of the reduced SDE.
    let sys = build_ode_constraint_sde(&m).map_err(|e| e.to_string())?;
    let pos = |n: &str| sys.state.iter().position(|s| s == n).ok_or_else(|| format!("no state {n}"));
    let (im, il) = (pos("mu")?, pos("lambda")?);
    let drv = |n: &str| sys.drivers.iter().find(|d| d.name == n).ok_or_else(|| format!("no driver {n}"));
    let checks = [
        ("t", il, "sigma2/2*(-lambda^2 + 2*mu) + alpha*lambda - 2*gamma"),
        ("t", im, "-sigma2/2*lambda*mu + 2*alpha*mu - gamma*lambda"),
        ("S1", il, "0"),
        ("S1", im, "0"),
        ("S2", il, "lambda"),
        ("S2", im, "2*mu"),
    ];
    for (d, i, w) in checks {
        let got = &drv(d)?.coeffs[i];
        ensure!(canonical(got, &p(w)), "d{} along {d}: {}", sys.state[i], got.display(&sp));
    }
    // Branch formulas against the matrix exponential of the companion matrix.
    let xs: Vec<f64> = (0..=500).map(|i| i as f64 * 0.01).collect();
    let mut worst: f64 = 0.0;
    for (lam, mu) in [(1.0, -2.0), (0.6, 1.3), (-0.4, 2.0), (2.0, 1.0), (-1.0, 0.25), (0.3, -0.05)] {
        for (u0, u1) in [(1.0, -2.0), (0.3, 0.7)] {
            let expm = reconstruct_linear_ode(&[mu, lam], &[u0, u1], &xs);
            for (x, e) in xs.iter().zip(&expm) {
                let b = second_order_branch(lam, mu, u0, u1, *x);
                let err = (b - e).abs() / e.abs().max(1.0);
                worst = worst.max(err);
                ensure!(err <= 1e-9, "λ={lam} μ={mu} x={x}: branch {b} vs expm {e}");
            }
        }
    }
    // Independent check of the exponential itself on one case.
    let c2 = companion(&[-2.0, 1.0]);
    let y = (&c2 * 5.0).exp() * DVector::from_column_slice(&[1.0, -2.0]);
    ensure!((y[0] - (-10.0f64).exp()).abs() < 1e-12, "expm check: {}", y[0]);
    Ok(format!("five generator fields and the (L, M) system canonical; branch vs expm worst {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 6. HJM end-to-end.

struct Comparison {
    metrics: Vec<SnapshotMetrics>,
    reduced: ReducedRun,
    path: DriverPath,
    fd_time: Duration,
}

fn run_pair(m: &SpdeModel, sys: &ReducedSystem, path: DriverPath) -> Result<Comparison, String> {
    let cs = CompiledSystem::new(sys).map_err(|e| e.to_string())?;
    let red = reduced_solution(sys, &cs, &m.grid, &path, 10, &Guards::default()).map_err(|e| e.to_string())?;
    ensure!(red.solution.status == PathStatus::Completed, "reduced path exploded: {:?}", red.solution.status);
    let init = initial_grid(m, &m.grid.nodes()).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let fd = {
        let bd = path_boundary(&cs, &red.path, path.dt);
        fd_solve_spde(m, &m.grid, &init, &path, Some(&bd), &FdOptions::default()).map_err(|e| e.to_string())?
    };
    let fd_time = start.elapsed();
    ensure!(fd.status == PathStatus::Completed, "FD solution blew up: {:?}", fd.status);
    let metrics = compare(&red.solution, &fd, 0.05).map_err(|e| e.to_string())?;
    Ok(Comparison { metrics, reduced: red, path, fd_time })
}

fn c6_hjm() -> Outcome {
    let start = Instant::now();
    let m = model("hjm");
    ensure!(m.param_value("Psi0") == Some(&qfrac(1, 5)), "bundled HJM has Psi0 != 0.2");
    let sys = build_reduced_sde(&m).map_err(|e| e.to_string())?;
    let spec = DriverSpec::for_system(&sys).map_err(|e| e.to_string())?;
    let fine = make_driver_path(&spec, m.sim.t_final, m.sim.dt / 2.0, m.sim.seed, 0).map_err(|e| e.to_string())?;
    let base = run_pair(&m, &sys, fine.coarsen(2))?;
    let err = max_rel(&base.metrics);
    ensure!(err <= 5e-2, "relative L2 {err:e} above 5e-2");
    within(Duration::from_secs(60), start, "HJM base run")?;

    // Reconstruction against the closed form at every snapshot.
    let f = |x: f64| 0.5 * (1.0 - (-x).exp());
    let fp = |x: f64| 0.5 * (-x).exp();
    let sol = &base.reduced.solution;
    let steps = snapshot_steps(base.path.steps(), 10);
    let mut worst: f64 = 0.0;
    for (k, s) in steps.iter().enumerate() {
        let a = &base.reduced.path.states[*s];
        for (i, x) in sol.xs.iter().enumerate() {
            let (v, _) = hjm_closed_form(f, fp, a, *x);
            worst = worst.max((sol.values[k][0][i] - v).abs());
        }
    }
    ensure!(worst <= 1e-10, "reconstruction differs from closed form by {worst:e}");

    // Refinement: halve dx and dt on the same Brownian path.
    let mut fm = m.clone();
    fm.grid.dx /= 2.0;
    let refined = run_pair(&fm, &sys, fine)?;
    let err_fine = max_rel(&refined.metrics);
    ensure!(err_fine <= 1.1 * err, "refined error {err_fine:e} exceeds base error {err:e}");
    Ok(format!(
        "rel L2 {err:.2e} (refined {err_fine:.2e}); closed form within {worst:.1e}; base FD {:.1} s",
        base.fd_time.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 7. Hunter–Saxton end-to-end.

fn c7_hunter_saxton() -> Outcome {
    let m = model("hunter-saxton");
    ensure!(m.wiener_count() == 1, "expected one Wiener driver");
    ensure!(m.param_value("K") == Some(&qfrac(3, 10)) && m.param_value("H") == Some(&qfrac(1, 5)), "K, H differ");
    let sys = build_reduced_sde(&m).map_err(|e| e.to_string())?;
    ensure!(sys.state == names(&["a", "b", "c"]), "state {:?}", sys.state);
    let spec = DriverSpec::for_system(&sys).map_err(|e| e.to_string())?;
    let path = make_driver_path(&spec, m.sim.t_final, m.sim.dt, m.sim.seed, 0).map_err(|e| e.to_string())?;
    let run = run_pair(&m, &sys, path)?;
    let err = max_rel(&run.metrics);
    ensure!(err <= 5e-2, "relative L2 {err:e} above 5e-2");

    // Residuals of the implicit reconstruction at each snapshot.
    let fns = FunctionTable::standard();
    let f = |x: f64| fns.call("bump_cdf4", &[0], &[x]).unwrap();
    let g = |x: f64| fns.call("bump_cdf8", &[0], &[x]).unwrap();
    let sol = &run.reduced.solution;
    let mut worst: f64 = 0.0;
    for (k, s) in snapshot_steps(run.path.steps(), 10).iter().enumerate() {
        let st = &run.reduced.path.states[*s];
        let (a, b, c) = (st[0], st[1], st[2]);
        for (i, x) in sol.xs.iter().enumerate() {
            let (u, v) = (sol.values[k][0][i], sol.values[k][1][i]);
            let arg = (-a).exp() * x - b * u + b * b * a.exp() / 4.0 * v - c;
            let r1 = u - b * a.exp() / 2.0 * v - f(arg);
            let r2 = a.exp() * v - g(arg);
            worst = worst.max(r1.abs()).max(r2.abs());
        }
    }
    ensure!(worst <= 1e-10, "implicit residual {worst:e}");

    // B_T against the trapezoid rule for ∫ e^{−A} ds.
    let states = &run.reduced.path.states;
    let dt = run.path.dt;
    let quad: f64 = states.windows(2).map(|w| 0.5 * dt * ((-w[0][0]).exp() + (-w[1][0]).exp())).sum();
    let bt = states.last().unwrap()[1];
    let gap = (bt - quad).abs();
    ensure!(gap <= 1e-6, "B_T = {bt}, quadrature {quad}");
    Ok(format!("rel L2 {err:.2e}; residual {worst:.1e}; |B_T - quadrature| {gap:.1e}"))
}

// ---------------------------------------------------------------------------
// 8. Integrator soundness.

fn c8_integrator() -> Outcome {
    use jetred::model::DriverKind;
    let sys = FnSystem { dim: 1, drivers: 1, f: |a: &[f64], out: &mut [Vec<f64>]| out[0][0] = a[0] };
    let spec = DriverSpec::independent(vec![DriverKind::Wiener]);
    let dts = [1e-2, 5e-3, 2.5e-3];
    let mut err = [0.0; 3];
    let paths = 200;
    for i in 0..paths {
        let fine = make_driver_path(&spec, 1.0, dts[2], 42, i).map_err(|e| e.to_string())?;
        let w: f64 = fine.increments.iter().map(|d| d[0]).sum();
        let exact = w.exp();
        for (k, factor) in [4, 2, 1].into_iter().enumerate() {
            let p = if factor == 1 { fine.clone() } else { fine.coarsen(factor) };
            let s = integrate_stratonovich(&sys, &[1.0], &p, &Guards::default());
            ensure!(s.status == PathStatus::Completed, "path {i} exploded");
            err[k] += (s.last()[0] - exact).abs() / paths as f64;
        }
    }
    let lx: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ly: Vec<f64> = err.iter().map(|e| e.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / 3.0, ly.iter().sum::<f64>() / 3.0);
    let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    ensure!(slope >= 0.5, "empirical strong order {slope:.3} (errors {err:?})");

    // dA = M A dt against the matrix exponential.
    let mm = DMatrix::from_row_slice(2, 2, &[-0.3, 1.0, -1.2, 0.1]);
    let lin = FnSystem {
        dim: 2,
        drivers: 1,
        f: move |a: &[f64], out: &mut [Vec<f64>]| {
            out[0][0] = -0.3 * a[0] + a[1];
            out[0][1] = -1.2 * a[0] + 0.1 * a[1];
        },
    };
    let tspec = DriverSpec::independent(vec![DriverKind::Time]);
    let exact = (&mm * 2.0).exp() * DVector::from_column_slice(&[1.0, 0.5]);
    let mut det = Vec::new();
    for dt in [2e-2, 1e-2, 5e-3] {
        let p = make_driver_path(&tspec, 2.0, dt, 0, 0).map_err(|e| e.to_string())?;
        let s = integrate_stratonovich(&lin, &[1.0, 0.5], &p, &Guards::default());
        let last = s.last();
        let e = ((last[0] - exact[0]).powi(2) + (last[1] - exact[1]).powi(2)).sqrt();
        ensure!(e <= dt * dt, "dt {dt}: error {e:e} above dt^2");
        det.push(e);
    }
    let ratios = [det[0] / det[1], det[1] / det[2]];
    ensure!(ratios.iter().all(|r| (3.5..=4.5).contains(r)), "deterministic error ratios {ratios:?}");
    Ok(format!("strong order {slope:.2} (errors {:.2e}, {:.2e}, {:.2e}); deterministic ratios {:.2}, {:.2}", err[0], err[1], err[2], ratios[0], ratios[1]))
}

// ---------------------------------------------------------------------------
// 9. Explosion.

fn c9_explosion() -> Outcome {
    let text = bundled("hjm").unwrap().replace("Psi0 = 1/5", "Psi0 = 3/2");
    let m = parse_model(&text).map_err(|e| e.to_string())?;
    ensure!(m.param_value("Psi0") == Some(&qfrac(3, 2)), "Psi0 not set");
    let sys = build_reduced_sde(&m).map_err(|e| e.to_string())?;
    let cs = CompiledSystem::new(&sys).map_err(|e| e.to_string())?;
    let spec = DriverSpec::for_system(&sys).map_err(|e| e.to_string())?;
    let guards = Guards { chart: guard_grid(&m.grid.nodes(), 64), record_every: 100_000, ..Guards::default() };
    let (dt, paths, seed) = (1e-3, 200, 1);
    let long = simulate_paths(&cs, &spec, &sys.initial, 2.0, dt, seed, paths, &guards).map_err(|e| e.to_string())?;
    let frac = |t: f64| long.iter().filter(|s| s.status.exploded_by(t)).count() as f64 / paths as f64;
    let fr: Vec<f64> = [0.5, 1.0, 2.0].iter().map(|&t| frac(t)).collect();
    ensure!(fr[2] > 0.0, "no path exploded by T = 2");
    for k in 0..2 {
        let p = fr[k + 1].max(fr[k]);
        let slack = 3.0 * (p * (1.0 - p) / paths as f64).sqrt();
        ensure!(fr[k + 1] + slack >= fr[k], "fraction decreases: {fr:?}");
    }
    // A separate run to the shorter horizon sees the same explosions.
    let short = simulate_paths(&cs, &spec, &sys.initial, 0.5, dt, seed, paths, &guards).map_err(|e| e.to_string())?;
    let fs = short.iter().filter(|s| s.status != PathStatus::Completed).count() as f64 / paths as f64;
    ensure!(fs == fr[0], "T = 0.5 run gives {fs}, prefix of T = 2 run gives {}", fr[0]);
    Ok(format!("exploded fractions at T = 0.5, 1, 2: {:.3}, {:.3}, {:.3}", fr[0], fr[1], fr[2]))
}
