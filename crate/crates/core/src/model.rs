//! Value types shared by the solver, the fitter and the sampler.
//!
//! Everything here is immutable once constructed. Constructors validate the
//! parameter ranges; the rest of the crate relies on those checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-linear drift `a(x)`.
///
/// `a(x) = a0 - a1 x` for `x <= x_mid` and `a2 - a3 x` beyond it. The two
/// branches need not meet at `x_mid`; evaluation exactly at the breakpoint
/// takes the left branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub x_mid: f64,
}

impl DriftParams {
    pub fn new(a0: f64, a1: f64, a2: f64, a3: f64, x_mid: f64) -> Result<Self> {
        let d = DriftParams { a0, a1, a2, a3, x_mid };
        if ![a0, a1, a2, a3, x_mid].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("drift coefficients must be finite"));
        }
        Ok(d)
    }

    /// Spatially constant drift `v` (both branches equal).
    pub fn constant(v: f64) -> Self {
        DriftParams {
            a0: v,
            a1: 0.0,
            a2: v,
            a3: 0.0,
            x_mid: 0.0,
        }
    }

    /// Evaluates the drift without a domain check.
    #[inline]
    pub fn velocity(&self, x: f64) -> f64 {
        if x <= self.x_mid {
            self.a0 - self.a1 * x
        } else {
            self.a2 - self.a3 * x
        }
    }

    /// Jump `a(x_mid+) - a(x_mid-)` across the breakpoint.
    pub fn jump(&self) -> f64 {
        (self.a2 - self.a3 * self.x_mid) - (self.a0 - self.a1 * self.x_mid)
    }

    /// True when the drift is non-negative at both domain ends, i.e. `x_left`
    /// is an inflow and `x_right` an outflow boundary.
    pub fn boundary_inflow_ok(&self, x_left: f64, x_right: f64) -> bool {
        self.velocity(x_left) >= 0.0 && self.velocity(x_right) >= 0.0
    }

    pub fn pair(&self, pair: DriftPair) -> [f64; 2] {
        match pair {
            DriftPair::Left => [self.a0, self.a1],
            DriftPair::Right => [self.a2, self.a3],
        }
    }

    pub fn with_pair(&self, pair: DriftPair, values: [f64; 2]) -> Self {
        let mut d = *self;
        match pair {
            DriftPair::Left => {
                d.a0 = values[0];
                d.a1 = values[1];
            }
            DriftPair::Right => {
                d.a2 = values[0];
                d.a3 = values[1];
            }
        }
        d
    }
}

/// Which coefficient pair of the drift is being fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftPair {
    /// `(a0, a1)`, the branch left of `x_mid`.
    Left,
    /// `(a2, a3)`, the branch right of `x_mid`.
    Right,
}

impl DriftPair {
    /// The domain endpoint whose drift this pair controls.
    pub fn endpoint(&self, x_left: f64, x_right: f64) -> f64 {
        match self {
            DriftPair::Left => x_left,
            DriftPair::Right => x_right,
        }
    }
}

/// Model parameters of the fractional advection-dispersion problem.
///
/// `lambda` is the order of the fractional integral (the derivative order is
/// `2 - lambda`), `gamma` the weight of the left-sided integral, `b` the
/// diffusion coefficient and `mass_constant` the factor with `c = K p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadeParams {
    lambda: f64,
    gamma: f64,
    b: f64,
    drift: DriftParams,
    x_left: f64,
    x_right: f64,
    mass_constant: f64,
}

impl FadeParams {
    pub fn new(
        lambda: f64,
        gamma: f64,
        b: f64,
        drift: DriftParams,
        x_left: f64,
        x_right: f64,
        mass_constant: f64,
    ) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::invalid(format!("lambda = {lambda} not in (0, 1)")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid(format!("gamma = {gamma} not in [0, 1]")));
        }
        // b = 0 is admitted for pure-advection runs.
        if !(b >= 0.0 && b.is_finite()) {
            return Err(Error::invalid(format!("b = {b} must be finite and >= 0")));
        }
        if !(x_left < x_right) || !x_left.is_finite() || !x_right.is_finite() {
            return Err(Error::invalid(format!("domain [{x_left}, {x_right}] is empty")));
        }
        if !(mass_constant > 0.0 && mass_constant.is_finite()) {
            return Err(Error::invalid(format!("mass constant K = {mass_constant} must be > 0")));
        }
        if !(x_left..=x_right).contains(&drift.x_mid) {
            return Err(Error::OutOfDomain {
                what: "x_mid",
                value: drift.x_mid,
                lo: x_left,
                hi: x_right,
            });
        }
        Ok(FadeParams {
            lambda,
            gamma,
            b,
            drift,
            x_left,
            x_right,
            mass_constant,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn b(&self) -> f64 {
        self.b
    }
    pub fn drift(&self) -> &DriftParams {
        &self.drift
    }
    pub fn x_left(&self) -> f64 {
        self.x_left
    }
    pub fn x_right(&self) -> f64 {
        self.x_right
    }
    pub fn mass_constant(&self) -> f64 {
        self.mass_constant
    }

    /// Stability index of the associated stable law, `alpha = 2 - lambda`.
    pub fn alpha(&self) -> f64 {
        2.0 - self.lambda
    }

    /// Skewness of the associated stable law, `beta = 2 gamma - 1`.
    pub fn beta(&self) -> f64 {
        2.0 * self.gamma - 1.0
    }

    pub fn with_drift(&self, drift: DriftParams) -> Result<Self> {
        FadeParams::new(
            self.lambda,
            self.gamma,
            self.b,
            drift,
            self.x_left,
            self.x_right,
            self.mass_constant,
        )
    }

    pub fn with_b(&self, b: f64) -> Result<Self> {
        FadeParams::new(
            self.lambda,
            self.gamma,
            b,
            self.drift,
            self.x_left,
            self.x_right,
            self.mass_constant,
        )
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_left && x <= self.x_right
    }
}

/// Drift velocity at `x`, rejecting points outside the model domain.
pub fn eval_drift(params: &FadeParams, x: f64) -> Result<f64> {
    if !params.contains(x) {
        return Err(Error::OutOfDomain {
            what: "x",
            value: x,
            lo: params.x_left,
            hi: params.x_right,
        });
    }
    Ok(params.drift.velocity(x))
}

/// Uniform spatial partition plus a strictly increasing time partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid {
    x_left: f64,
    x_right: f64,
    intervals: usize,
    h: f64,
    times: Vec<f64>,
}

impl SpaceTimeGrid {
    /// `intervals` is `I`; the grid has `I + 1` nodes.
    pub fn uniform(x_left: f64, x_right: f64, intervals: usize, times: Vec<f64>) -> Result<Self> {
        if intervals < 2 {
            return Err(Error::invalid("need at least two spatial intervals"));
        }
        if !(x_left < x_right) {
            return Err(Error::invalid(format!("domain [{x_left}, {x_right}] is empty")));
        }
        check_times(&times)?;
        Ok(SpaceTimeGrid {
            x_left,
            x_right,
            intervals,
            h: (x_right - x_left) / intervals as f64,
            times,
        })
    }

    /// Builds a grid from explicit node positions. Only uniform spacing is
    /// accepted (relative tolerance 1e-9).
    pub fn from_nodes(nodes: &[f64], times: Vec<f64>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::invalid("need at least three nodes"));
        }
        let intervals = nodes.len() - 1;
        let h = (nodes[intervals] - nodes[0]) / intervals as f64;
        for w in nodes.windows(2) {
            let d = w[1] - w[0];
            if (d - h).abs() > 1e-9 * h.abs() {
                return Err(Error::NonUniformGrid { expected: h, found: d });
            }
        }
        Self::uniform(nodes[0], nodes[intervals], intervals, times)
    }

    /// Uniform time steps `0, T/N, ..., T`.
    pub fn uniform_times(t_end: f64, steps: usize) -> Vec<f64> {
        if steps == 0 {
            return vec![0.0];
        }
        let dt = t_end / steps as f64;
        let mut t: Vec<f64> = (0..=steps).map(|n| n as f64 * dt).collect();
        t[steps] = t_end;
        t
    }

    /// Time levels from 0 through every target, each gap between
    /// consecutive targets cut into equal steps of at most `max_dt`.
    pub fn levels_through(targets: &[f64], max_dt: f64) -> Result<Vec<f64>> {
        if !(max_dt > 0.0) {
            return Err(Error::invalid(format!("max_dt = {max_dt} must be > 0")));
        }
        let mut t: Vec<f64> = targets.to_vec();
        if t.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("target times must be finite and >= 0"));
        }
        t.sort_by(f64::total_cmp);
        t.dedup();
        let mut levels = vec![0.0];
        let mut last = 0.0;
        for &target in t.iter().filter(|&&v| v > 0.0) {
            let steps = Self::steps_for(target - last, max_dt);
            let dt = (target - last) / steps as f64;
            levels.extend((1..steps).map(|n| last + n as f64 * dt));
            levels.push(target);
            last = target;
        }
        Ok(levels)
    }

    /// Number of steps so that `T / N <= max_dt`.
    pub fn steps_for(t_end: f64, max_dt: f64) -> usize {
        ((t_end / max_dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn x_left(&self) -> f64 {
        self.x_left
    }
    pub fn x_right(&self) -> f64 {
        self.x_right
    }
    /// `I`, the number of spatial intervals.
    pub fn intervals(&self) -> usize {
        self.intervals
    }
    pub fn node_count(&self) -> usize {
        self.intervals + 1
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.intervals {
            self.x_right
        } else {
            self.x_left + i as f64 * self.h
        }
    }

    /// Dual point `x_{i+1/2}` for `i = 0..I`.
    pub fn dual(&self, i: usize) -> f64 {
        self.x_left + (i as f64 + 0.5) * self.h
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.intervals).map(|i| self.node(i)).collect()
    }

    pub fn with_times(&self, times: Vec<f64>) -> Result<Self> {
        Self::uniform(self.x_left, self.x_right, self.intervals, times)
    }

    /// Index `i` of the cell `[x_i, x_{i+1}]` holding `x` (the last cell for `x_right`).
    pub(crate) fn cell_of(&self, x: f64) -> usize {
        let s = ((x - self.x_left) / self.h).floor();
        (s.max(0.0) as usize).min(self.intervals - 1)
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.first() != Some(&0.0) {
        return Err(Error::invalid("time partition must start at t0 = 0"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("time partition must be strictly increasing"));
    }
    Ok(())
}

/// Nodal values of the piecewise-linear density at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySnapshot {
    values: Vec<f64>,
    time: f64,
}

impl DensitySnapshot {
    /// Boundary values must be zero and all values non-negative.
    pub fn new(values: Vec<f64>, time: f64) -> Result<Self> {
        if values.len() < 3 {
            return Err(Error::invalid("a snapshot needs at least three nodes"));
        }
        let last = values.len() - 1;
        if values[0] != 0.0 || values[last] != 0.0 {
            return Err(Error::invalid("density must vanish at both boundary nodes"));
        }
        if let Some((node, &value)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::NegativeDensity { node, value });
        }
        Ok(DensitySnapshot { values, time })
    }

    pub fn zeros(node_count: usize, time: f64) -> Self {
        DensitySnapshot {
            values: vec![0.0; node_count],
            time,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn time(&self) -> f64 {
        self.time
    }

    /// Trapezoid integral over the grid, exact for the piecewise-linear field.
    pub fn mass(&self, h: f64) -> f64 {
        let n = self.values.len();
        h * (self.values[1..n - 1].iter().sum::<f64>() + 0.5 * (self.values[0] + self.values[n - 1]))
    }

    /// First moment of the piecewise-linear density.
    pub fn first_moment(&self, grid: &SpaceTimeGrid) -> f64 {
        // exact for products of linear pieces: integral of x p(x) over [x_i, x_{i+1}]
        let h = grid.h();
        self.values
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let xa = grid.node(i);
                h * (w[0] * (2.0 * xa + (xa + h)) + w[1] * (xa + 2.0 * (xa + h))) / 6.0
            })
            .sum()
    }
}

/// Hat-function interpolation of the snapshot at `x`.
pub fn eval_piecewise_linear(snapshot: &DensitySnapshot, grid: &SpaceTimeGrid, x: f64) -> Result<f64> {
    if snapshot.values.len() != grid.node_count() {
        return Err(Error::DimensionMismatch {
            expected: grid.node_count(),
            got: snapshot.values.len(),
        });
    }
    if !(x >= grid.x_left && x <= grid.x_right) {
        return Err(Error::OutOfDomain {
            what: "x",
            value: x,
            lo: grid.x_left,
            hi: grid.x_right,
        });
    }
    Ok(interpolate(&snapshot.values, grid, x))
}

#[inline]
pub(crate) fn interpolate(values: &[f64], grid: &SpaceTimeGrid, x: f64) -> f64 {
    let i = grid.cell_of(x);
    let s = ((x - grid.node(i)) / grid.h).clamp(0.0, 1.0);
    values[i] * (1.0 - s) + values[i + 1] * s
}

/// Observations taken at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationGroup {
    pub time: f64,
    pub weight: f64,
    /// `(x, c)` pairs.
    pub points: Vec<(f64, f64)>,
}

/// Observed concentrations grouped by observation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    groups: Vec<ObservationGroup>,
}

impl ObservationSet {
    pub fn new(mut groups: Vec<ObservationGroup>) -> Result<Self> {
        if groups.iter().all(|g| g.points.is_empty()) {
            return Err(Error::NoObservations);
        }
        groups.sort_by(|a, b| a.time.total_cmp(&b.time));
        for w in groups.windows(2) {
            if w[0].time == w[1].time {
                return Err(Error::invalid(format!(
                    "observation time {} appears in two groups",
                    w[0].time
                )));
            }
        }
        for g in &groups {
            if !(g.weight > 0.0 && g.weight.is_finite()) {
                return Err(Error::invalid(format!(
                    "weight {} at t = {} must be > 0",
                    g.weight, g.time
                )));
            }
            if !(g.time > 0.0) {
                return Err(Error::invalid(format!("observation time {} must be > 0", g.time)));
            }
            if let Some(&(x, c)) = g.points.iter().find(|(x, c)| !(*c >= 0.0) || !x.is_finite()) {
                return Err(Error::invalid(format!(
                    "invalid observation ({x}, {c}) at t = {}",
                    g.time
                )));
            }
        }
        Ok(ObservationSet { groups })
    }

    pub fn groups(&self) -> &[ObservationGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.points.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn times(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.time).collect()
    }

    /// Every location must lie inside `[x_left, x_right]`.
    pub fn check_domain(&self, x_left: f64, x_right: f64) -> Result<()> {
        for g in &self.groups {
            for &(x, _) in &g.points {
                if !(x >= x_left && x <= x_right) {
                    return Err(Error::OutOfDomain {
                        what: "observation x",
                        value: x,
                        lo: x_left,
                        hi: x_right,
                    });
                }
            }
        }
        Ok(())
    }

    /// Divides every concentration by `k` (concentration to density scale).
    pub fn scaled(&self, k: f64) -> ObservationSet {
        ObservationSet {
            groups: self
                .groups
                .iter()
                .map(|g| ObservationGroup {
                    time: g.time,
                    weight: g.weight,
                    points: g.points.iter().map(|&(x, c)| (x, c / k)).collect(),
                })
                .collect(),
        }
    }

    pub fn with_weights(&self, weights: &[f64]) -> Result<ObservationSet> {
        if weights.len() != self.groups.len() {
            return Err(Error::DimensionMismatch {
                expected: self.groups.len(),
                got: weights.len(),
            });
        }
        let groups = self
            .groups
            .iter()
            .zip(weights)
            .map(|(g, &w)| ObservationGroup { weight: w, ..g.clone() })
            .collect();
        ObservationSet::new(groups)
    }
}

/// Published day-224 drift fit.
pub fn day224_params() -> FadeParams {
    FadeParams::new(
        0.80,
        0.9999,
        0.1859783,
        DriftParams {
            a0: 0.110,
            a1: 0.00032,
            a2: 0.0003,
            a3: 0.00019,
            x_mid: 9.375,
        },
        0.0,
        300.0,
        56778.24,
    )
    .expect("published parameters are valid")
}

/// Published day-328 drift fit.
pub fn day328_params() -> FadeParams {
    FadeParams::new(
        0.79,
        0.9999,
        0.2233695,
        DriftParams {
            a0: 0.105,
            a1: 0.00030,
            a2: 0.0005,
            a3: 0.00018,
            x_mid: 9.375,
        },
        0.0,
        300.0,
        37195.05,
    )
    .expect("published parameters are valid")
}
