//! Levenberg-Marquardt identification of one drift coefficient pair.
//!
//! The fitter works on any [`ResidualModel`]; [`FitProblem`] is the model
//! backed by the forward solver, where the residual of observation `i` at
//! time `t_k` is `sqrt(w_k) (p(x_i, t_k; alpha) - c_i / K)`.

use std::thread;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fvsolver::{solve_forward, SolverOptions};
use crate::model::{interpolate, DensitySnapshot, DriftPair, FadeParams, ObservationSet, SpaceTimeGrid};

/// How the penalty evolves between iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltySchedule {
    /// `rho_{k+1} = rho_k / 2` regardless of the step taken.
    Halving,
    /// Halve after a full step, double after any backtracking.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    /// Relative forward-difference step, floored at `FD_FLOOR`.
    pub fd_delta: f64,
    pub armijo_rho: f64,
    pub armijo_sigma: f64,
    pub penalty0: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub armijo_cap: usize,
    pub schedule: PenaltySchedule,
}

pub const FD_FLOOR: f64 = 1e-9;

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            fd_delta: 1e-6,
            armijo_rho: 0.5,
            armijo_sigma: 1e-4,
            penalty0: 1e-2,
            tol: 1e-8,
            max_iter: 100,
            armijo_cap: 40,
            schedule: PenaltySchedule::Halving,
        }
    }
}

impl FitSettings {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (
                self.armijo_rho > 0.0 && self.armijo_rho < 1.0,
                "armijo_rho must lie in (0, 1)",
            ),
            (
                self.armijo_sigma > 0.0 && self.armijo_sigma < 0.5,
                "armijo_sigma must lie in (0, 1/2)",
            ),
            (self.penalty0 > 0.0, "penalty0 must be > 0"),
            (self.fd_delta > 0.0, "fd_delta must be > 0"),
            (self.tol > 0.0, "tol must be > 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::invalid(msg));
            }
        }
        Ok(())
    }

    fn step_for(&self, value: f64) -> f64 {
        (self.fd_delta * value.abs()).max(FD_FLOOR)
    }
}

/// A two-parameter least-squares model.
pub trait ResidualModel: Sync {
    /// Weighted residual vector; the objective is half its squared norm.
    fn residuals(&self, alpha: [f64; 2]) -> Result<Vec<f64>>;
    /// Whether `alpha` satisfies the box constraints.
    fn feasible(&self, alpha: [f64; 2]) -> bool;
    fn settings(&self) -> &FitSettings;
}

/// Drift fit against observed concentrations.
#[derive(Debug, Clone)]
pub struct FitProblem {
    /// Observations on density scale (`c / K`).
    pub observations: ObservationSet,
    pub base_params: FadeParams,
    /// Spatial grid and time partition; every observation time must be a level.
    pub grid: SpaceTimeGrid,
    pub initial: DensitySnapshot,
    pub free: DriftPair,
    pub settings: FitSettings,
    pub solver: SolverOptions,
}

impl FitProblem {
    /// Builds a problem from observations in concentration units.
    pub fn new(
        concentrations: &ObservationSet,
        base_params: FadeParams,
        grid: SpaceTimeGrid,
        initial: DensitySnapshot,
        free: DriftPair,
    ) -> Result<Self> {
        let densities = concentrations.scaled(base_params.mass_constant());
        Self::from_densities(densities, base_params, grid, initial, free)
    }

    /// Builds a problem from observations already on density scale.
    pub fn from_densities(
        densities: ObservationSet,
        base_params: FadeParams,
        grid: SpaceTimeGrid,
        initial: DensitySnapshot,
        free: DriftPair,
    ) -> Result<Self> {
        densities.check_domain(base_params.x_left(), base_params.x_right())?;
        let problem = FitProblem {
            observations: densities,
            base_params,
            grid,
            initial,
            free,
            settings: FitSettings::default(),
            solver: SolverOptions::default(),
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        self.settings.validate()?;
        if self.grid.x_left() != self.base_params.x_left() || self.grid.x_right() != self.base_params.x_right() {
            return Err(Error::invalid("grid and parameters cover different domains"));
        }
        let levels = self.grid.times();
        for t in self.observations.times() {
            if !levels.iter().any(|&g| (g - t).abs() <= 1e-9 * (1.0 + t)) {
                return Err(Error::invalid(format!(
                    "observation time {t} is not a level of the time partition"
                )));
            }
        }
        Ok(())
    }

    pub fn params_at(&self, alpha: [f64; 2]) -> Result<FadeParams> {
        let drift = self.base_params.drift().with_pair(self.free, alpha);
        self.base_params.with_drift(drift)
    }

    /// Model densities at every observation, in group order.
    pub fn predict(&self, alpha: [f64; 2]) -> Result<Vec<f64>> {
        let wrap = |e: Error| Error::ForwardSolve {
            alpha,
            source: Box::new(e),
        };
        let params = self.params_at(alpha).map_err(wrap)?;
        let times = self.observations.times();
        let sol = solve_forward(&params, &self.grid, &self.initial, &times, &self.solver).map_err(wrap)?;
        let mut out = Vec::with_capacity(self.observations.len());
        for g in self.observations.groups() {
            let snap = sol
                .at_time(g.time)
                .ok_or_else(|| wrap(Error::invalid(format!("no snapshot at t = {}", g.time))))?;
            out.extend(g.points.iter().map(|&(x, _)| interpolate(snap.values(), &self.grid, x)));
        }
        Ok(out)
    }
}

impl ResidualModel for FitProblem {
    fn residuals(&self, alpha: [f64; 2]) -> Result<Vec<f64>> {
        let model = self.predict(alpha)?;
        let mut r = Vec::with_capacity(model.len());
        let mut it = model.into_iter();
        for g in self.observations.groups() {
            let sw = g.weight.sqrt();
            for &(_, obs) in &g.points {
                let m = it.next().expect("one prediction per observation");
                r.push(sw * (m - obs));
            }
        }
        Ok(r)
    }

    fn feasible(&self, alpha: [f64; 2]) -> bool {
        if !alpha.iter().all(|v| v.is_finite()) {
            return false;
        }
        let drift = self.base_params.drift().with_pair(self.free, alpha);
        let x = self
            .free
            .endpoint(self.base_params.x_left(), self.base_params.x_right());
        drift.velocity(x) >= 0.0
    }

    fn settings(&self) -> &FitSettings {
        &self.settings
    }
}

fn half_norm_sq(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// `(1/2) sum_k w_k sum_i (p - p_obs)^2`.
pub fn objective<M: ResidualModel + ?Sized>(alpha: [f64; 2], problem: &M) -> Result<f64> {
    Ok(half_norm_sq(&problem.residuals(alpha)?))
}

/// Forward-difference Jacobian and the residual at `alpha`.
pub fn fd_jacobian<M: ResidualModel + ?Sized>(alpha: [f64; 2], problem: &M) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let r = problem.residuals(alpha)?;
    let j = jacobian_at(alpha, &r, problem)?;
    Ok((j, DVector::from_vec(r)))
}

fn jacobian_at<M: ResidualModel + ?Sized>(alpha: [f64; 2], r0: &[f64], problem: &M) -> Result<DMatrix<f64>> {
    let settings = problem.settings();
    let mut shifted = [alpha; 2];
    let mut deltas = [0.0; 2];
    for c in 0..2 {
        deltas[c] = settings.step_for(alpha[c]);
        shifted[c][c] += deltas[c];
        if !problem.feasible(shifted[c]) {
            return Err(Error::invalid(format!(
                "finite-difference point {:?} violates the drift constraint",
                shifted[c]
            )));
        }
    }
    let (c0, c1) = thread::scope(|s| {
        let h = s.spawn(|| problem.residuals(shifted[1]));
        let first = problem.residuals(shifted[0]);
        (first, h.join().expect("jacobian worker panicked"))
    });
    let cols = [c0?, c1?];
    let mut j = DMatrix::zeros(r0.len(), 2);
    for c in 0..2 {
        if cols[c].len() != r0.len() {
            return Err(Error::DimensionMismatch {
                expected: r0.len(),
                got: cols[c].len(),
            });
        }
        for (row, (a, b)) in cols[c].iter().zip(r0).enumerate() {
            j[(row, c)] = (a - b) / deltas[c];
        }
    }
    Ok(j)
}

/// `d = -(J^T J + penalty I)^{-1} J^T r`.
pub fn lm_direction(j: &DMatrix<f64>, r: &DVector<f64>, penalty: f64) -> Result<[f64; 2]> {
    if !(penalty >= 0.0) {
        return Err(Error::invalid(format!("penalty {penalty} must be >= 0")));
    }
    if j.ncols() != 2 || j.nrows() != r.len() {
        return Err(Error::DimensionMismatch {
            expected: r.len(),
            got: j.nrows(),
        });
    }
    let jtj = j.transpose() * j;
    let g = j.transpose() * r;
    let a = Matrix2::new(jtj[(0, 0)] + penalty, jtj[(0, 1)], jtj[(1, 0)], jtj[(1, 1)] + penalty);
    let scale = a.abs().max().max(f64::MIN_POSITIVE);
    let det = a.determinant();
    if !(det.abs() > 1e-14 * scale * scale) {
        return Err(Error::SingularSystem {
            pivot_ratio: det.abs() / (scale * scale),
            hint: "increase the penalty".into(),
        });
    }
    let inv = a.try_inverse().ok_or_else(|| Error::SingularSystem {
        pivot_ratio: 0.0,
        hint: "increase the penalty".into(),
    })?;
    let d = -(inv * Vector2::new(g[0], g[1]));
    Ok([d[0], d[1]])
}

/// Result of one Armijo search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoStep {
    /// Backtrack power `m`.
    pub power: usize,
    /// `rho^m`.
    pub length: f64,
    pub alpha: [f64; 2],
    pub objective: f64,
}

/// Smallest `m >= 0` with
/// `f(alpha + rho^m d) <= f(alpha) + sigma rho^m d^T g`, where `g = J^T r`.
///
/// Infeasible trial points count as failed powers.
pub fn armijo_step<M: ResidualModel + ?Sized>(
    alpha: [f64; 2],
    d: [f64; 2],
    problem: &M,
    f0: f64,
    gradient: [f64; 2],
) -> Result<ArmijoStep> {
    let s = problem.settings();
    if !d.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("search direction is not finite"));
    }
    if d == [0.0, 0.0] {
        return Ok(ArmijoStep {
            power: 0,
            length: 1.0,
            alpha,
            objective: f0,
        });
    }
    let slope = d[0] * gradient[0] + d[1] * gradient[1];
    let mut length = 1.0;
    for m in 0..=s.armijo_cap {
        let trial = [alpha[0] + length * d[0], alpha[1] + length * d[1]];
        if problem.feasible(trial) {
            let f = objective(trial, problem)?;
            if f <= f0 + s.armijo_sigma * length * slope {
                return Ok(ArmijoStep {
                    power: m,
                    length,
                    alpha: trial,
                    objective: f,
                });
            }
        }
        length *= s.armijo_rho;
    }
    Err(Error::LineSearch {
        attempts: s.armijo_cap + 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitIteration {
    pub alpha: [f64; 2],
    pub objective: f64,
    pub penalty: f64,
    pub step: f64,
    pub direction: [f64; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub iterations: Vec<FitIteration>,
}

impl FitTrace {
    pub fn objectives(&self) -> Vec<f64> {
        self.iterations.iter().map(|it| it.objective).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOutcome {
    pub alpha: [f64; 2],
    pub objective: f64,
    pub converged: bool,
    pub trace: FitTrace,
}

#[derive(Debug, thiserror::Error)]
#[error("fit stopped after {} iterations: {error}", trace.iterations.len())]
pub struct FitError {
    #[source]
    pub error: Error,
    pub trace: FitTrace,
}

/// Runs the damped Gauss-Newton iteration from `alpha0`.
///
/// Stops once the accepted step `rho^m |d|` is at most `tol` or after
/// `max_iter` iterations; `converged` tells which.
pub fn fit<M: ResidualModel + ?Sized>(problem: &M, alpha0: [f64; 2]) -> std::result::Result<FitOutcome, FitError> {
    let mut trace = FitTrace::default();
    let fail = |error: Error, trace: &FitTrace| FitError {
        error,
        trace: trace.clone(),
    };
    let s = *problem.settings();
    s.validate().map_err(|e| fail(e, &trace))?;
    if !problem.feasible(alpha0) {
        return Err(fail(
            Error::invalid(format!("initial point {alpha0:?} violates the drift constraint")),
            &trace,
        ));
    }
    let mut alpha = alpha0;
    let mut r = problem.residuals(alpha).map_err(|e| fail(e, &trace))?;
    let mut f = half_norm_sq(&r);
    let mut penalty = s.penalty0;
    for _ in 0..s.max_iter {
        let j = jacobian_at(alpha, &r, problem).map_err(|e| fail(e, &trace))?;
        let rv = DVector::from_column_slice(&r);
        let g = j.transpose() * &rv;
        let d = lm_direction(&j, &rv, penalty).map_err(|e| fail(e, &trace))?;
        let acc = armijo_step(alpha, d, problem, f, [g[0], g[1]]).map_err(|e| fail(e, &trace))?;
        trace.iterations.push(FitIteration {
            alpha,
            objective: f,
            penalty,
            step: acc.length,
            direction: d,
        });
        let moved = acc.length * d[0].hypot(d[1]);
        if acc.alpha != alpha {
            alpha = acc.alpha;
            r = problem.residuals(alpha).map_err(|e| fail(e, &trace))?;
            f = half_norm_sq(&r);
        }
        if moved <= s.tol {
            return Ok(FitOutcome {
                alpha,
                objective: f,
                converged: true,
                trace,
            });
        }
        penalty = match s.schedule {
            PenaltySchedule::Halving => penalty / 2.0,
            PenaltySchedule::Adaptive if acc.power == 0 => penalty / 2.0,
            PenaltySchedule::Adaptive => penalty * 2.0,
        };
    }
    Ok(FitOutcome {
        alpha,
        objective: f,
        converged: false,
        trace,
    })
}
