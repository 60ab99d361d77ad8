//! Driver paths and Stratonovich integration of the reduced SDE.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::DriverKind;
use crate::reconstruct::{CompiledSystem, Jet};
use crate::reduction::ReducedSystem;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("correlation matrix must be {0}x{0}")]
    CorrelationShape(usize),
    #[error("correlation matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("time step and horizon must be positive")]
    BadGrid,
}

/// RNG words reserved per step; far more than any step consumes.
const STEP_WORDS: u128 = 1 << 16;

/// Kinds of the drivers and the Cholesky factor of the Wiener correlation.
#[derive(Debug, Clone)]
pub struct DriverSpec {
    pub kinds: Vec<DriverKind>,
    pub rho: Vec<Vec<f64>>,
    chol: DMatrix<f64>,
}

impl DriverSpec {
    pub fn new(kinds: Vec<DriverKind>, rho: Vec<Vec<f64>>) -> Result<Self, SimError> {
        let w = kinds.iter().filter(|k| **k == DriverKind::Wiener).count();
        if rho.len() != w || rho.iter().any(|r| r.len() != w) {
            return Err(SimError::CorrelationShape(w));
        }
        let m = DMatrix::from_fn(w, w, |i, j| rho[i][j]);
        let chol = if w == 0 {
            m
        } else {
            m.cholesky().ok_or(SimError::NotPositiveDefinite)?.l()
        };
        Ok(DriverSpec { kinds, rho, chol })
    }

    /// Independent Wiener drivers.
    pub fn independent(kinds: Vec<DriverKind>) -> Self {
        let w = kinds.iter().filter(|k| **k == DriverKind::Wiener).count();
        let rho = (0..w).map(|i| (0..w).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        DriverSpec::new(kinds, rho).expect("identity is positive definite")
    }

    /// Drivers and correlation of a reduced system.
    pub fn for_system(sys: &ReducedSystem) -> Result<Self, SimError> {
        DriverSpec::new(sys.drivers.iter().map(|d| d.kind).collect(), sys.correlation.clone())
    }

    pub fn wiener_count(&self) -> usize {
        self.chol.nrows()
    }
}

/// Increments of every driver on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriverPath {
    pub dt: f64,
    pub seed: u64,
    pub path_index: u64,
    /// `increments[step][driver]`.
    pub increments: Vec<Vec<f64>>,
}

impl DriverPath {
    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    pub fn t_final(&self) -> f64 {
        self.dt * self.steps() as f64
    }

    pub fn time(&self, step: usize) -> f64 {
        self.dt * step as f64
    }

    /// Running sums of each driver, starting at 0.
    pub fn cumulative(&self) -> Vec<Vec<f64>> {
        let d = self.increments.first().map_or(0, Vec::len);
        let mut acc = vec![0.0; d];
        let mut out = vec![acc.clone()];
        for inc in &self.increments {
            for (s, v) in acc.iter_mut().zip(inc) {
                *s += v;
            }
            out.push(acc.clone());
        }
        out
    }

    /// The same path seen with a step `factor` times larger.
    pub fn coarsen(&self, factor: usize) -> DriverPath {
        assert!(factor > 0 && self.steps().is_multiple_of(factor), "factor must divide the step count");
        let increments = self
            .increments
            .chunks(factor)
            .map(|c| {
                let mut s = vec![0.0; c[0].len()];
                for inc in c {
                    for (a, v) in s.iter_mut().zip(inc) {
                        *a += v;
                    }
                }
                s
            })
            .collect();
        DriverPath { dt: self.dt * factor as f64, seed: self.seed, path_index: self.path_index, increments }
    }

    /// The first `steps` increments.
    pub fn truncate(&self, steps: usize) -> DriverPath {
        DriverPath { increments: self.increments[..steps.min(self.steps())].to_vec(), ..self.clone() }
    }
}

/// Number of steps of size dt covering [0, t_final].
pub fn step_count(t_final: f64, dt: f64) -> usize {
    (t_final / dt).round().max(1.0) as usize
}

/// Increments are a pure function of (seed, path index, step index): the
/// stream selects the path and the word position the step.
pub fn make_driver_path(spec: &DriverSpec, t_final: f64, dt: f64, seed: u64, path_index: u64) -> Result<DriverPath, SimError> {
    if !(dt > 0.0 && t_final > 0.0) {
        return Err(SimError::BadGrid);
    }
    let steps = step_count(t_final, dt);
    let w = spec.wiener_count();
    let sq = dt.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    let mut z = vec![0.0; w];
    let mut increments = Vec::with_capacity(steps);
    for step in 0..steps {
        rng.set_word_pos(step as u128 * STEP_WORDS);
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        let mut wi = 0;
        let mut inc = Vec::with_capacity(spec.kinds.len());
        for k in &spec.kinds {
            match k {
                DriverKind::Time => inc.push(dt),
                DriverKind::Wiener => {
                    let v: f64 = (0..=wi).map(|c| spec.chol[(wi, c)] * z[c]).sum();
                    inc.push(sq * v);
                    wi += 1;
                }
            }
        }
        increments.push(inc);
    }
    Ok(DriverPath { dt, seed, path_index, increments })
}

/// Right-hand side of dA = c_α(A) ∘ dS^α.
pub trait Coefficients: Sync {
    fn dim(&self) -> usize;
    fn drivers(&self) -> usize;
    /// Fills `out[α][l]`.
    fn eval(&self, a: &[f64], out: &mut [Vec<f64>]) -> Result<(), String>;
    /// Whether the reconstruction is still defined on the guard grid.
    /// `warm` carries solver state between calls.
    fn in_chart(&self, _a: &[f64], _xs: &[f64], _warm: &mut Option<Vec<Jet>>) -> bool {
        true
    }
}

impl Coefficients for CompiledSystem {
    fn dim(&self) -> usize {
        self.h
    }

    fn drivers(&self) -> usize {
        self.drivers.len()
    }

    fn eval(&self, a: &[f64], out: &mut [Vec<f64>]) -> Result<(), String> {
        self.coefficients(a, out).map_err(|e| e.to_string())
    }

    fn in_chart(&self, a: &[f64], xs: &[f64], warm: &mut Option<Vec<Jet>>) -> bool {
        if xs.is_empty() {
            return true;
        }
        match self.recon.on_grid(a, xs, 0, warm.as_deref()) {
            Ok(j) => {
                *warm = Some(j);
                true
            }
            Err(_) => false,
        }
    }
}

/// A closure-backed system, handy for hand-built SDEs.
pub struct FnSystem<F> {
    pub dim: usize,
    pub drivers: usize,
    pub f: F,
}

impl<F> Coefficients for FnSystem<F>
where
    F: Fn(&[f64], &mut [Vec<f64>]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn drivers(&self) -> usize {
        self.drivers
    }

    fn eval(&self, a: &[f64], out: &mut [Vec<f64>]) -> Result<(), String> {
        (self.f)(a, out);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Blowup {
    Bound,
    Evaluation,
    Chart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PathStatus {
    Completed,
    Exploded { t: f64, cause: Blowup },
}

impl PathStatus {
    pub fn exploded_by(&self, t: f64) -> bool {
        matches!(self, PathStatus::Exploded { t: te, .. } if *te <= t + 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplePath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub status: PathStatus,
}

impl SamplePath {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("a path holds its initial state")
    }
}

#[derive(Debug, Clone)]
pub struct Guards {
    /// Explosion when any |A^l| exceeds this.
    pub bound: f64,
    /// Points where the reconstruction must stay defined.
    pub chart: Vec<f64>,
    /// Keep every k-th state (the final one is always kept).
    pub record_every: usize,
}

impl Default for Guards {
    fn default() -> Self {
        Guards { bound: 1e6, chart: Vec::new(), record_every: 1 }
    }
}

/// At most `max` evenly spaced points of `xs`, both ends included.
pub fn guard_grid(xs: &[f64], max: usize) -> Vec<f64> {
    if xs.len() <= max {
        return xs.to_vec();
    }
    let m = max.max(2);
    (0..m).map(|i| xs[i * (xs.len() - 1) / (m - 1)]).collect()
}

fn step_sum(c: &[Vec<f64>], inc: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (row, ds) in c.iter().zip(inc) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v * ds;
        }
    }
}

/// Stratonovich–Heun: predictor A + c(A)ΔS, corrector averaging the
/// coefficients at both ends.
pub fn integrate_stratonovich<C: Coefficients + ?Sized>(sys: &C, a0: &[f64], path: &DriverPath, guards: &Guards) -> SamplePath {
    let h = sys.dim();
    let every = guards.record_every.max(1);
    let mut c = vec![vec![0.0; h]; sys.drivers()];
    let mut k1 = vec![0.0; h];
    let mut k2 = vec![0.0; h];
    let mut a = a0.to_vec();
    let mut pred = vec![0.0; h];
    let mut warm = None;
    let mut times = vec![0.0];
    let mut states = vec![a.clone()];
    let mut status = PathStatus::Completed;
    for (step, inc) in path.increments.iter().enumerate() {
        let t = path.time(step + 1);
        let res = sys.eval(&a, &mut c).and_then(|_| {
            step_sum(&c, inc, &mut k1);
            for l in 0..h {
                pred[l] = a[l] + k1[l];
            }
            sys.eval(&pred, &mut c)
        });
        if res.is_err() {
            status = PathStatus::Exploded { t, cause: Blowup::Evaluation };
            break;
        }
        step_sum(&c, inc, &mut k2);
        for l in 0..h {
            a[l] += 0.5 * (k1[l] + k2[l]);
        }
        if a.iter().any(|v| !v.is_finite() || v.abs() > guards.bound) {
            status = PathStatus::Exploded { t, cause: Blowup::Bound };
            break;
        }
        if !sys.in_chart(&a, &guards.chart, &mut warm) {
            status = PathStatus::Exploded { t, cause: Blowup::Chart };
            break;
        }
        if (step + 1) % every == 0 || step + 1 == path.steps() {
            times.push(t);
            states.push(a.clone());
        }
    }
    SamplePath { times, states, status }
}

/// Independent paths `0..paths`, integrated in parallel.
pub fn simulate_paths<C: Coefficients + ?Sized>(
    sys: &C,
    spec: &DriverSpec,
    a0: &[f64],
    t_final: f64,
    dt: f64,
    seed: u64,
    paths: usize,
    guards: &Guards,
) -> Result<Vec<SamplePath>, SimError> {
    (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            let path = make_driver_path(spec, t_final, dt, seed, p)?;
            Ok(integrate_stratonovich(sys, a0, &path, guards))
        })
        .collect()
}
