use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use jetred::calculus::{lie_closure, q_string, ClosureError, ClosureOptions, EvolutionField, LieAlgebra, Provenance};
use jetred::model::{bundled, parse_model, SpdeModel, BUNDLED};
use jetred::oracle::{compare, fd_solve_spde, initial_grid, path_boundary, reduced_solution, FdOptions, GridSolution};
use jetred::reconstruct::{CompiledSystem, Observables};
use jetred::reduction::{
    build_reduced_sde, check_transversality, ode_constraint_tangency, LinearOdeConstraint, ReducedSystem,
};
use jetred::sim::{guard_grid, simulate_paths, DriverSpec, Guards, PathStatus, SamplePath};
use serde_json::{json, Value};

use crate::error::CliError;
use crate::Format;

/// Chart-guard resolution used while simulating.
const GUARD_POINTS: usize = 64;

fn load(path: &Path) -> Result<SpdeModel, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.display().to_string(), source })?;
    Ok(parse_model(&text)?)
}

fn print_json(v: &Value) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn basis_names(model: &SpdeModel, alg: &LieAlgebra, gens: &[usize]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for p in &alg.provenance {
        let n = match p {
            Provenance::Generator(i) => model.generators[gens[*i]].0.clone(),
            Provenance::Bracket(i, j) => format!("[{},{}]", names[*i], names[*j]),
        };
        names.push(n);
    }
    names
}

fn combination(coeffs: &[jetred::expr::Q], names: &[String]) -> String {
    let terms: Vec<String> = coeffs
        .iter()
        .zip(names)
        .filter(|(c, _)| !num_is_zero(c))
        .map(|(c, n)| {
            let s = q_string(c);
            match s.as_str() {
                "1" => n.clone(),
                "-1" => format!("-{n}"),
                _ => format!("{s}*{n}"),
            }
        })
        .collect();
    if terms.is_empty() {
        "0".into()
    } else {
        terms.join(" + ").replace("+ -", "- ")
    }
}

fn num_is_zero(q: &jetred::expr::Q) -> bool {
    *q.numer() == 0.into()
}

fn sample_points(model: &SpdeModel) -> Vec<f64> {
    let (a, b) = (model.grid.x0, model.grid.x1);
    (1..=9).map(|k| a + (b - a) * k as f64 / 10.0).collect()
}

pub fn check(path: &Path, format: Format) -> Result<u8, CliError> {
    let model = load(path)?;
    let sp = &model.space;
    let gens: Vec<usize> = (0..model.generators.len()).collect();
    let fields: Vec<EvolutionField> = model.generators.iter().map(|(_, g)| g.clone()).collect();
    let mut report = json!({
        "model": model.name,
        "generators": model.generators.iter().map(|(n, g)| json!({"name": n, "field": g.to_strings(sp)})).collect::<Vec<_>>(),
        "mode": if model.constraint.is_some() { "ode-constraint" } else { "transported" },
    });
    let mut lines = vec![format!("model {}", model.name)];
    let closure = lie_closure(&fields, &ClosureOptions::default(), sp);
    let mut ok = true;
    match &closure {
        Ok(alg) => {
            let names = basis_names(&model, alg, &gens);
            let table: Vec<Vec<String>> =
                (0..alg.dim()).map(|i| (0..alg.dim()).map(|j| combination(&alg.lambda[i][j], &names)).collect()).collect();
            lines.push(format!("closed: dimension {}", alg.dim()));
            for i in 0..alg.dim() {
                for j in i + 1..alg.dim() {
                    lines.push(format!("  [{},{}] = {}", names[i], names[j], table[i][j]));
                }
            }
            report["closure"] = json!({
                "status": "closed",
                "dim": alg.dim(),
                "names": names,
                "table": table,
                "algebra": alg.to_json(sp),
            });
        }
        Err(e) => {
            let mut detail = json!({"status": "not_closed", "reason": e.to_string()});
            if let ClosureError::NotClosed(nc) = e {
                detail["witness"] = json!(nc.chain.iter().map(|f| f.to_strings(sp)).collect::<Vec<_>>());
                detail["depth"] = json!(nc.depth);
            }
            lines.push(e.to_string());
            if let ClosureError::NotClosed(nc) = e {
                for f in &nc.chain {
                    lines.push(format!("  {}", f.display(sp)));
                }
            }
            report["closure"] = detail;
            // A linear-ODE constraint does not need a closed algebra.
            ok = model.constraint.is_some();
        }
    }
    if let Some(spec) = &model.constraint {
        let c = LinearOdeConstraint { order: spec.order, mu: spec.coefficients.clone() };
        let used = model.used_generators();
        let used_fields: Vec<EvolutionField> = used.iter().map(|&k| model.generators[k].1.clone()).collect();
        let boundary = c.boundary_names(sp);
        match ode_constraint_tangency(&used_fields, &c, sp) {
            Ok(t) => {
                let scalar = jetred::coords::Space::scalar();
                let rows: Vec<Value> = used
                    .iter()
                    .zip(&t)
                    .map(|(&k, tg)| {
                        let mut m = serde_json::Map::new();
                        for (name, r) in c.mu.iter().zip(&tg.mu_rates).chain(boundary.iter().zip(&tg.boundary_rates)) {
                            m.insert(name.clone(), Value::String(r.display(&scalar).to_string()));
                        }
                        json!({"generator": model.generators[k].0, "rates": m})
                    })
                    .collect();
                lines.push("tangent to the constraint".into());
                report["tangency"] = json!({"status": "tangent", "fields": rows});
            }
            Err(e) => {
                lines.push(format!("not tangent: {e}"));
                report["tangency"] = json!({"status": "failed", "reason": e.to_string()});
                ok = false;
            }
        }
    } else if let Ok(alg) = &closure {
        let tr = check_transversality(&model, &alg.basis, &sample_points(&model))?;
        let names = basis_names(&model, alg, &gens);
        let relation = tr.relation.as_ref().map(|c| {
            let terms: Vec<String> =
                c.iter().zip(&names).filter(|(v, _)| **v != 0.0).map(|(v, n)| format!("{v:+.6}*{n}")).collect();
            format!("{} = 0", terms.join(" "))
        });
        if tr.transversal() {
            lines.push(format!("transversal at x = {}", tr.point.unwrap_or_default()));
        } else {
            lines.push("not transversal at the sample points".into());
            if let Some(r) = &relation {
                lines.push(format!("  on the jet of the initial curve: {r}"));
            }
        }
        report["transversality"] = json!({
            "transversal": tr.transversal(),
            "rows": tr.rows.as_ref().map(|r| r.iter().map(|(j, s)| json!({"dependent": sp.dep[*j], "order": s})).collect::<Vec<_>>()),
            "point": tr.point,
            "ranks": tr.ranks.iter().map(|(x, r)| json!({"x": x, "rank": r})).collect::<Vec<_>>(),
            "required": tr.h,
            "relation": relation,
        });
        ok &= tr.transversal();
    }
    report["ok"] = json!(ok);
    match format {
        Format::Json => print_json(&report)?,
        Format::Text => println!("{}", lines.join("\n")),
    }
    Ok(if ok { 0 } else { 3 })
}

pub fn phi(path: &Path) -> Result<u8, CliError> {
    let model = load(path)?;
    if model.constraint.is_some() {
        return Err(CliError::Math("constraint models have no flow coordinates".into()));
    }
    let sys = build_reduced_sde(&model)?;
    let table = sys.phi.as_ref().ok_or_else(|| CliError::Math("every driver vanishes; there is no algebra".into()))?;
    let mut v = table.to_json();
    v["fields"] = json!((0..table.h()).map(|i| table.field_string(i)).collect::<Vec<_>>());
    print_json(&v)?;
    Ok(0)
}

pub fn reduce(path: &Path, format: Format) -> Result<u8, CliError> {
    let model = load(path)?;
    let sys = build_reduced_sde(&model)?;
    match format {
        Format::Json => {
            let mut v = sys.to_json();
            v["model"] = json!(model.name);
            v["equations"] = json!(sys.equations());
            print_json(&v)?;
        }
        Format::Text => {
            for e in sys.equations() {
                println!("{e}");
            }
        }
    }
    Ok(0)
}

pub struct SimArgs {
    pub t_final: Option<f64>,
    pub dt: Option<f64>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub bound: Option<f64>,
    pub record_every: usize,
    pub snapshots: usize,
    pub out: Option<PathBuf>,
}

fn status_json(s: &PathStatus) -> Value {
    serde_json::to_value(s).unwrap_or(Value::Null)
}

fn write_path_csv<W: Write>(w: &mut csv::Writer<W>, index: Option<usize>, sample: &SamplePath) -> Result<(), CliError> {
    for (t, a) in sample.times.iter().zip(&sample.states) {
        let mut rec: Vec<String> = index.map(|i| vec![i.to_string()]).unwrap_or_default();
        rec.push(t.to_string());
        rec.extend(a.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    Ok(())
}

pub fn simulate(path: &Path, args: SimArgs) -> Result<u8, CliError> {
    let model = load(path)?;
    let sys = build_reduced_sde(&model)?;
    let compiled = CompiledSystem::new(&sys)?;
    let t_final = args.t_final.unwrap_or(model.sim.t_final);
    let dt = args.dt.unwrap_or(model.sim.dt);
    let seed = args.seed.unwrap_or(model.sim.seed);
    let paths = args.paths.unwrap_or(model.sim.paths);
    let guards = Guards {
        bound: args.bound.unwrap_or(model.sim.bound),
        chart: guard_grid(&model.grid.nodes(), GUARD_POINTS),
        record_every: args.record_every.max(1),
    };
    let spec = DriverSpec::for_system(&sys)?;
    let samples = simulate_paths(&compiled, &spec, &sys.initial, t_final, dt, seed, paths, &guards)?;
    let exploded = samples.iter().filter(|s| s.status != PathStatus::Completed).count();
    let manifest = json!({
        "model": model.name,
        "scheme": "stratonovich-heun",
        "seed": seed,
        "dt": dt,
        "t_final": t_final,
        "paths": paths,
        "bound": guards.bound,
        "state": sys.state,
        "initial": sys.initial,
        "drivers": sys.drivers.iter().map(|d| d.name.clone()).collect::<Vec<_>>(),
        "correlation": sys.correlation,
        "equations": sys.equations(),
        "note": "the drivers' quadratic covariations are assumed nondegenerate; this is not checked",
        "exploded": exploded,
        "exploded_fraction": exploded as f64 / paths.max(1) as f64,
        "status": samples.iter().map(|s| status_json(&s.status)).collect::<Vec<_>>(),
    });
    let mut header: Vec<String> = vec!["t".into()];
    header.extend(sys.state.iter().cloned());
    match &args.out {
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            let mut h = vec!["path".to_string()];
            h.extend(header);
            w.write_record(&h)?;
            for (i, s) in samples.iter().enumerate() {
                write_path_csv(&mut w, Some(i), s)?;
            }
            w.flush()?;
        }
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let obs = Observables::new(&sys)?;
            let xs = model.grid.nodes();
            for (i, s) in samples.iter().enumerate() {
                let mut w = csv::Writer::from_path(dir.join(format!("path_{i}.csv")))?;
                w.write_record(&header)?;
                write_path_csv(&mut w, None, s)?;
                w.flush()?;
                if args.snapshots > 0 {
                    write_curves(&dir.join(format!("curve_{i}.csv")), &compiled, &obs, s, &xs, args.snapshots)?;
                }
            }
            fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        }
    }
    Ok(0)
}

/// Reconstructed observables at evenly spaced recorded states.
fn write_curves(
    file: &Path,
    compiled: &CompiledSystem,
    obs: &Observables,
    sample: &SamplePath,
    xs: &[f64],
    snapshots: usize,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(file)?;
    let mut header = vec!["t".to_string(), "x".to_string()];
    header.extend(obs.names().iter().cloned());
    w.write_record(&header)?;
    let n = sample.states.len();
    let mut picks: Vec<usize> = (0..=snapshots).map(|k| k * (n - 1) / snapshots.max(1)).collect();
    picks.dedup();
    let mut warm = None;
    for k in picks {
        let a = &sample.states[k];
        // Past a chart exit there is nothing to reconstruct.
        let Ok(jets) = compiled.recon.on_grid(a, xs, obs.order(), warm.as_deref()) else { break };
        for (x, jet) in xs.iter().zip(&jets) {
            let vals = obs.eval(*x, jet, a).map_err(|e| CliError::Runtime(e.to_string()))?;
            let mut rec = vec![sample.times[k].to_string(), x.to_string()];
            rec.extend(vals.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        warm = Some(jets);
    }
    w.flush()?;
    Ok(())
}

pub struct ValidateArgs {
    pub dx: Option<f64>,
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
    pub seed: Option<u64>,
    pub snapshots: usize,
    pub margin: f64,
    pub out: Option<PathBuf>,
}

fn write_grid_csv(file: &Path, sol: &GridSolution) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(file)?;
    let mut header = vec!["t".to_string(), "x".to_string()];
    header.extend(sol.names.iter().cloned());
    w.write_record(&header)?;
    for (t, snap) in sol.times.iter().zip(&sol.values) {
        for (i, x) in sol.xs.iter().enumerate() {
            let mut rec = vec![t.to_string(), x.to_string()];
            rec.extend(snap.iter().map(|c| c[i].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn validate(path: &Path, args: ValidateArgs) -> Result<u8, CliError> {
    let mut model = load(path)?;
    if let Some(dx) = args.dx {
        if !(dx > 0.0) {
            return Err(CliError::InvalidInput("--dx must be positive".into()));
        }
        model.grid.dx = dx;
    }
    let dt = args.dt.unwrap_or(model.sim.dt);
    let t_final = args.t_final.unwrap_or(model.sim.t_final);
    let seed = args.seed.unwrap_or(model.sim.seed);
    let sys = build_reduced_sde(&model)?;
    let compiled = CompiledSystem::new(&sys)?;
    let spec = DriverSpec::for_system(&sys)?;
    let driver = jetred::sim::make_driver_path(&spec, t_final, dt, seed, 0)?;
    let guards = Guards { bound: model.sim.bound, ..Guards::default() };
    let reduced = reduced_solution(&sys, &compiled, &model.grid, &driver, args.snapshots, &guards)?;
    let initial = match initial_grid(&model, &model.grid.nodes()) {
        Ok(v) => v,
        Err(_) => reduced_initial(&sys, &reduced.solution)?,
    };
    let boundary = path_boundary(&compiled, &reduced.path, dt);
    let opts = FdOptions { snapshots: args.snapshots, ..FdOptions::default() };
    let fd = fd_solve_spde(&model, &model.grid, &initial, &driver, Some(&boundary), &opts)?;
    let metrics = compare(&reduced.solution, &fd, args.margin)?;
    let max_rel = metrics.iter().map(|m| m.rel_l2).fold(0.0, f64::max);
    let exploded = reduced.solution.status != PathStatus::Completed || fd.status != PathStatus::Completed;
    let report = json!({
        "model": model.name,
        "dx": model.grid.dx,
        "dt": dt,
        "t_final": t_final,
        "seed": seed,
        "margin": args.margin,
        "boundary": {"left": fd.left, "right": fd.right},
        "reduced_status": status_json(&reduced.solution.status),
        "fd_status": status_json(&fd.status),
        "warnings": fd.warnings,
        "metrics": metrics,
        "max_rel_l2": max_rel,
    });
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_grid_csv(&dir.join("reduced.csv"), &reduced.solution)?;
        write_grid_csv(&dir.join("fd.csv"), &fd)?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    }
    print_json(&report)?;
    if exploded {
        eprintln!("error: a solution exploded before t-final");
        return Ok(4);
    }
    Ok(0)
}

fn reduced_initial(sys: &ReducedSystem, sol: &GridSolution) -> Result<Vec<Vec<f64>>, CliError> {
    sol.values
        .first()
        .cloned()
        .ok_or_else(|| CliError::Runtime(format!("the initial state {:?} cannot be reconstructed", sys.initial)))
}

pub fn example(name: &str, out: Option<&Path>) -> Result<u8, CliError> {
    let text = bundled(name)
        .ok_or_else(|| CliError::InvalidInput(format!("unknown example `{name}`; choose one of {}", BUNDLED.join(", "))))?;
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(0)
}
