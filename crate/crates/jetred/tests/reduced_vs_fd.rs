//! Reduced pipeline against the finite-difference solver for the models that
//! the acceptance run does not cover.

use jetred::model::{bundled, parse_model, SpdeModel};
use jetred::oracle::{compare, fd_solve_spde, initial_grid, path_boundary, reduced_solution, second_order_branch, snapshot_steps, FdOptions};
use jetred::reconstruct::CompiledSystem;
use jetred::reduction::{build_reduced_sde, ReducedSystem};
use jetred::sim::{make_driver_path, DriverPath, DriverSpec, Guards, PathStatus};

fn model(name: &str) -> SpdeModel {
    parse_model(bundled(name).unwrap()).unwrap()
}

fn setup(m: &SpdeModel) -> (ReducedSystem, DriverPath) {
    let sys = build_reduced_sde(m).unwrap();
    let spec = DriverSpec::for_system(&sys).unwrap();
    let path = make_driver_path(&spec, m.sim.t_final, m.sim.dt, m.sim.seed, 0).unwrap();
    (sys, path)
}

fn max_rel_l2(m: &SpdeModel, sys: &ReducedSystem, path: &DriverPath, init: &[Vec<f64>]) -> f64 {
    let cs = CompiledSystem::new(sys).unwrap();
    let red = reduced_solution(sys, &cs, &m.grid, path, 10, &Guards::default()).unwrap();
    assert_eq!(red.solution.status, PathStatus::Completed);
    let bd = path_boundary(&cs, &red.path, path.dt);
    let fd = fd_solve_spde(m, &m.grid, init, path, Some(&bd), &FdOptions::default()).unwrap();
    assert_eq!(fd.status, PathStatus::Completed);
    compare(&red.solution, &fd, 0.05).unwrap().iter().map(|s| s.rel_l2).fold(0.0, f64::max)
}

#[test]
fn filtering_agrees_with_fd() {
    let m = model("filtering");
    let (sys, path) = setup(&m);
    let state = |n: &str| sys.state.iter().position(|s| s == n).unwrap();
    let (im, il, iu, iux) = (state("mu"), state("lambda"), state("u@0"), state("u_x@0"));
    let xs = m.grid.nodes();
    let a = &sys.initial;
    let init = vec![xs.iter().map(|&x| second_order_branch(a[il], a[im], a[iu], a[iux], x)).collect::<Vec<_>>()];
    let err = max_rel_l2(&m, &sys, &path, &init);
    assert!(err <= 5e-2, "relative L2 {err}");

    // Reconstruction along the path matches the closed-form branches.
    let cs = CompiledSystem::new(&sys).unwrap();
    let red = reduced_solution(&sys, &cs, &m.grid, &path, 10, &Guards::default()).unwrap();
    for (k, s) in snapshot_steps(path.steps(), 10).iter().enumerate() {
        let a = &red.path.states[*s];
        for (i, &x) in xs.iter().enumerate() {
            let want = second_order_branch(a[il], a[im], a[iu], a[iux], x);
            let got = red.solution.values[k][0][i];
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "t index {k}, x = {x}: {got} vs {want}");
        }
    }
}

#[test]
fn zakai_agrees_with_fd() {
    let m = model("zakai");
    let (sys, path) = setup(&m);
    let init = initial_grid(&m, &m.grid.nodes()).unwrap();
    let err = max_rel_l2(&m, &sys, &path, &init);
    assert!(err <= 5e-2, "relative L2 {err}");
}
