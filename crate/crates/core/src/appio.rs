//! Data files, run configuration, reports and the subcommands behind the
//! `levyflow` binary.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fvsolver::{initial_point_source, solve_forward, LinearSolve, SolverOptions, CLAMP_TOLERANCE};
use crate::invfit::{fit, FitProblem, FitSettings, FitTrace, PenaltySchedule};
use crate::model::{
    interpolate, DensitySnapshot, DriftPair, DriftParams, FadeParams, ObservationGroup, ObservationSet, SpaceTimeGrid,
};
use crate::sampler::{
    empirical_density, interval_probability_ci, read_batch_csv, sample_partitioned, write_batch_csv, EmpiricalCdf,
    IntervalEstimate,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Deserialize)]
struct ObservationRow {
    time: f64,
    x: f64,
    concentration: f64,
    weight: Option<f64>,
}

/// Reads `time,x,concentration[,weight]` rows and groups them by time.
pub fn load_observations(path: impl AsRef<Path>) -> Result<ObservationSet> {
    let file = File::open(path.as_ref())?;
    parse_observations(BufReader::new(file))
}

pub fn parse_observations<R: Read>(input: R) -> Result<ObservationSet> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::NoObservations);
    }
    for need in ["time", "x", "concentration"] {
        if !headers.iter().any(|h| h == need) {
            return Err(Error::Data {
                line: 1,
                message: format!("missing column `{need}`"),
            });
        }
    }
    let mut groups: BTreeMap<u64, ObservationGroup> = BTreeMap::new();
    let mut weights: BTreeMap<u64, Option<f64>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: ObservationRow = record.deserialize(Some(&headers)).map_err(|e| Error::Data {
            line,
            message: e.to_string(),
        })?;
        let bad = |message: String| Error::Data { line, message };
        if !(row.time > 0.0 && row.time.is_finite()) {
            return Err(bad(format!("time {} must be > 0", row.time)));
        }
        if !row.x.is_finite() {
            return Err(bad(format!("x {} is not finite", row.x)));
        }
        if !(row.concentration >= 0.0 && row.concentration.is_finite()) {
            return Err(bad(format!("concentration {} must be >= 0", row.concentration)));
        }
        let key = row.time.to_bits();
        let group = groups.entry(key).or_insert_with(|| ObservationGroup {
            time: row.time,
            weight: 1.0,
            points: Vec::new(),
        });
        if group.points.iter().any(|&(x, _)| x == row.x) {
            return Err(bad(format!("duplicate observation at time {}, x {}", row.time, row.x)));
        }
        group.points.push((row.x, row.concentration));
        let seen = weights.entry(key).or_insert(row.weight);
        match (*seen, row.weight) {
            (Some(a), Some(b)) if a != b => {
                return Err(bad(format!("conflicting weights {a} and {b} at time {}", row.time)));
            }
            (None, Some(b)) if group.points.len() > 1 => {
                return Err(bad(format!("weight {b} given for only part of time {}", row.time)));
            }
            _ => {}
        }
        if let Some(w) = row.weight {
            if !(w > 0.0) {
                return Err(bad(format!("weight {w} must be > 0")));
            }
            group.weight = w;
        }
    }
    if groups.is_empty() {
        return Err(Error::NoObservations);
    }
    ObservationSet::new(groups.into_values().collect())
}

/// Writes an observation set in the format [`parse_observations`] reads.
pub fn write_observations<W: Write>(set: &ObservationSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "x", "concentration", "weight"])?;
    for g in set.groups() {
        for &(x, c) in &g.points {
            w.write_record([g.time.to_string(), x.to_string(), c.to_string(), g.weight.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Trapezoid integral of the observed concentrations, extended with zero at
/// both domain ends.
pub fn estimate_mass_constant(group: &ObservationGroup, x_left: f64, x_right: f64) -> Result<f64> {
    if group.points.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least two observations at t = {} to estimate K",
            group.time
        )));
    }
    let mut pts = group.points.clone();
    if pts.iter().any(|&(x, _)| x < x_left || x > x_right) {
        return Err(Error::invalid("observation outside the domain"));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut xs = vec![(x_left, 0.0)];
    xs.extend(pts);
    xs.push((x_right, 0.0));
    let k: f64 = xs.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
    if !(k > 0.0) {
        return Err(Error::invalid("observed concentrations integrate to zero"));
    }
    Ok(k)
}

fn default_intervals() -> usize {
    600
}
fn default_max_dt() -> f64 {
    1.0
}
fn default_substeps() -> usize {
    4
}
fn default_clamp() -> f64 {
    CLAMP_TOLERANCE
}
fn default_true() -> bool {
    true
}
fn default_sample_size() -> usize {
    1000
}
fn default_seed() -> u64 {
    1
}
fn default_bins() -> usize {
    60
}
fn default_one() -> usize {
    1
}

/// Flat key-value run configuration (TOML syntax).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub b: f64,
    #[serde(default)]
    pub a0: f64,
    #[serde(default)]
    pub a1: f64,
    #[serde(default)]
    pub a2: f64,
    #[serde(default)]
    pub a3: f64,
    #[serde(default)]
    pub x_mid: f64,
    pub x_left: f64,
    pub x_right: f64,
    /// `K`; estimated per observation time when fitting without it.
    pub mass_constant: Option<f64>,
    /// Point source location; defaults to the first interior node.
    pub source: Option<f64>,

    #[serde(default = "default_intervals")]
    pub intervals: usize,
    pub t_end: Option<f64>,
    #[serde(default = "default_max_dt")]
    pub max_dt: f64,
    pub output_times: Option<Vec<f64>>,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub linear_solver: LinearChoice,
    #[serde(default = "default_clamp")]
    pub clamp_tolerance: f64,

    pub pair: Option<PairArg>,
    pub fd_delta: Option<f64>,
    pub armijo_rho: Option<f64>,
    pub armijo_sigma: Option<f64>,
    pub penalty0: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub armijo_cap: Option<usize>,
    pub penalty_schedule: Option<PenaltySchedule>,
    /// One weight per observation time, overriding the data file.
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub group_mode: GroupMode,

    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub sample_time: Option<f64>,
    /// Sample from the renormalised density instead of putting the mass lost
    /// at the boundaries on the right end.
    #[serde(default = "default_true")]
    pub normalize_sample: bool,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default = "default_one")]
    pub sample_workers: usize,

    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearChoice {
    #[default]
    Lu,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairArg {
    A01,
    A23,
}

impl PairArg {
    pub fn pair(self) -> DriftPair {
        match self {
            PairArg::A01 => DriftPair::Left,
            PairArg::A23 => DriftPair::Right,
        }
    }
}

/// Whether several observation times are fitted together or one by one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupMode {
    #[default]
    Joint,
    Separate,
}

impl RunConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.params_with_k(1.0).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.intervals < 2 {
            return Err(Error::Config("intervals must be >= 2".into()));
        }
        if !(cfg.max_dt > 0.0) {
            return Err(Error::Config("max_dt must be > 0".into()));
        }
        if cfg.substeps == 0 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        if let Some(data) = &cfg.data {
            if !data.exists() {
                return Err(Error::Config(format!("data file {} not found", data.display())));
            }
        }
        cfg.fit_settings()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn drift(&self) -> DriftParams {
        DriftParams {
            a0: self.a0,
            a1: self.a1,
            a2: self.a2,
            a3: self.a3,
            x_mid: self.x_mid,
        }
    }

    fn params_with_k(&self, k: f64) -> Result<FadeParams> {
        let drift = DriftParams::new(self.a0, self.a1, self.a2, self.a3, self.x_mid)?;
        FadeParams::new(self.lambda, self.gamma, self.b, drift, self.x_left, self.x_right, k)
    }

    /// Model parameters; requires `mass_constant`.
    pub fn params(&self) -> Result<FadeParams> {
        let k = self
            .mass_constant
            .ok_or_else(|| Error::Config("mass_constant is required for this command".into()))?;
        self.params_with_k(k)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            substeps: self.substeps,
            linear: match self.linear_solver {
                LinearChoice::Lu => LinearSolve::DenseLu,
                LinearChoice::Iterative => SolverOptions::iterative().linear,
            },
            clamp_tolerance: self.clamp_tolerance,
        }
    }

    pub fn fit_settings(&self) -> FitSettings {
        let d = FitSettings::default();
        FitSettings {
            fd_delta: self.fd_delta.unwrap_or(d.fd_delta),
            armijo_rho: self.armijo_rho.unwrap_or(d.armijo_rho),
            armijo_sigma: self.armijo_sigma.unwrap_or(d.armijo_sigma),
            penalty0: self.penalty0.unwrap_or(d.penalty0),
            tol: self.tol.unwrap_or(d.tol),
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            armijo_cap: self.armijo_cap.unwrap_or(d.armijo_cap),
            schedule: self.penalty_schedule.unwrap_or(d.schedule),
        }
    }

    /// Grid over the configured domain with time levels through `targets`.
    pub fn grid_through(&self, targets: &[f64]) -> Result<SpaceTimeGrid> {
        let times = SpaceTimeGrid::levels_through(targets, self.max_dt)?;
        SpaceTimeGrid::uniform(self.x_left, self.x_right, self.intervals, times)
    }

    pub fn initial(&self, grid: &SpaceTimeGrid) -> Result<DensitySnapshot> {
        initial_point_source(grid, self.source.unwrap_or_else(|| grid.node(1)))
    }

    fn output_times(&self) -> Result<Vec<f64>> {
        match (&self.output_times, self.t_end) {
            (Some(t), _) if !t.is_empty() => Ok(t.clone()),
            (_, Some(t)) => Ok(vec![t]),
            _ => Err(Error::Config("set t_end or output_times".into())),
        }
    }
}

/// Hex SHA-256 of the serialized values.
pub fn param_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Constant-coefficient stable fits used to seed the drift fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendixSeed {
    Day224,
    Day328,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StableFit {
    pub velocity: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub mu: f64,
    pub diffusion: f64,
    pub mass_constant: f64,
}

impl AppendixSeed {
    pub fn values(self) -> StableFit {
        match self {
            AppendixSeed::Day224 => StableFit {
                velocity: 0.196051,
                alpha: 1.0915,
                beta: 0.99,
                sigma: 5.137167,
                mu: 43.915430,
                diffusion: 0.1859783,
                mass_constant: 56778.24,
            },
            AppendixSeed::Day328 => StableFit {
                velocity: 0.2276768,
                alpha: 1.050998,
                beta: 0.99,
                sigma: 5.380654,
                mu: 74.677975,
                diffusion: 0.2233695,
                mass_constant: 37195.05,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedRow {
    pub time: f64,
    pub x: f64,
    pub observed: f64,
    pub fitted: Option<f64>,
    pub mass_constant: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupFit {
    pub times: Vec<f64>,
    pub mass_constants: Vec<f64>,
    pub alpha0: [f64; 2],
    pub alpha: [f64; 2],
    pub drift: DriftParams,
    pub converged: bool,
    pub objective: Option<f64>,
    pub trace: FitTrace,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub pair: DriftPair,
    pub fits: Vec<GroupFit>,
    pub table: Vec<FittedRow>,
    pub elapsed_seconds: f64,
    pub config: RunConfig,
}

impl RunReport {
    pub fn succeeded(&self) -> bool {
        self.fits.iter().all(|f| f.error.is_none())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveSummary {
    pub version: String,
    pub params: FadeParams,
    pub intervals: usize,
    pub steps: usize,
    pub source: f64,
    pub masses: Vec<(f64, f64)>,
    pub files: Vec<PathBuf>,
    pub elapsed_seconds: f64,
}

/// Solves and writes `snapshot_t<T>.csv` (`x,p,c`) and `plot_t<T>.dat`
/// (`x c`, positive `c` only) per output time plus `solve.json`.
pub fn run_solve(cfg: &RunConfig, out_dir: &Path) -> Result<SolveSummary> {
    let start = Instant::now();
    let params = cfg.params()?;
    let times = cfg.output_times()?;
    let grid = cfg.grid_through(&times)?;
    let initial = cfg.initial(&grid)?;
    let sol = solve_forward(&params, &grid, &initial, &times, &cfg.solver_options())?;
    let k = params.mass_constant();
    let mut files = Vec::new();
    let mut masses = Vec::new();
    for snap in &sol.snapshots {
        let label = snap.time();
        let path = out_dir.join(format!("snapshot_t{label}.csv"));
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record(["x", "p", "c"])?;
        for (x, p) in grid.nodes().iter().zip(snap.values()) {
            w.write_record([x.to_string(), p.to_string(), (k * p).to_string()])?;
        }
        w.flush()?;
        files.push(path);

        let path = out_dir.join(format!("plot_t{label}.dat"));
        let mut w = create(&path)?;
        writeln!(w, "# x c  (t = {label}; rows with c > 0 only, ready for a log axis)")?;
        for (x, p) in grid.nodes().iter().zip(snap.values()) {
            if *p > 0.0 {
                writeln!(w, "{x} {}", k * p)?;
            }
        }
        w.flush()?;
        files.push(path);
        masses.push((label, snap.mass(grid.h())));
    }
    let summary = SolveSummary {
        version: TOOL_VERSION.into(),
        params,
        intervals: grid.intervals(),
        steps: grid.times().len() - 1,
        source: cfg.source.unwrap_or_else(|| grid.node(1)),
        masses,
        files,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    let path = out_dir.join("solve.json");
    serde_json::to_writer_pretty(create(&path)?, &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct FitRequest {
    pub data: Option<PathBuf>,
    pub pair: Option<PairArg>,
    pub appendix_seed: Option<AppendixSeed>,
}

/// Fits the drift pair and writes `fit_report.json` and
/// `fitted_vs_observed.csv`. The report is returned even when a fit fails;
/// check [`RunReport::succeeded`].
pub fn run_fit(cfg: &RunConfig, req: &FitRequest, out_dir: &Path) -> Result<RunReport> {
    let start = Instant::now();
    let data = req
        .data
        .clone()
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| Error::Config("no data file given".into()))?;
    let mut obs = load_observations(&data)?;
    if let Some(w) = &cfg.weights {
        obs = obs
            .with_weights(w)
            .map_err(|e| Error::Config(format!("weights: {e}")))?;
    }
    obs.check_domain(cfg.x_left, cfg.x_right)?;
    let pair = req.pair.or(cfg.pair).unwrap_or(PairArg::A01).pair();
    let idle = match pair {
        DriftPair::Left => cfg.x_mid <= cfg.x_left,
        DriftPair::Right => cfg.x_mid >= cfg.x_right,
    };
    if idle {
        eprintln!(
            "warning: with x_mid = {} the fitted pair governs no part of the domain",
            cfg.x_mid
        );
    }

    let mut base_cfg = cfg.clone();
    let mut alpha0 = cfg.drift().pair(pair);
    if let Some(seed) = req.appendix_seed {
        let s = seed.values();
        alpha0 = [s.velocity, 0.0];
        base_cfg.b = s.diffusion;
    }
    let base_drift = cfg.drift().with_pair(pair, alpha0);
    base_cfg.a0 = base_drift.a0;
    base_cfg.a1 = base_drift.a1;
    base_cfg.a2 = base_drift.a2;
    base_cfg.a3 = base_drift.a3;

    let mut ks = Vec::new();
    for g in obs.groups() {
        ks.push(match cfg.mass_constant {
            Some(k) => k,
            None => estimate_mass_constant(g, cfg.x_left, cfg.x_right)?,
        });
    }
    let batches: Vec<Vec<usize>> = match cfg.group_mode {
        GroupMode::Joint => vec![(0..obs.groups().len()).collect()],
        GroupMode::Separate => (0..obs.groups().len()).map(|i| vec![i]).collect(),
    };

    let mut fits = Vec::new();
    let mut table = Vec::new();
    for members in batches {
        let groups: Vec<ObservationGroup> = members.iter().map(|&i| obs.groups()[i].clone()).collect();
        let dens = ObservationSet::new(
            members
                .iter()
                .map(|&i| {
                    let g = &obs.groups()[i];
                    ObservationGroup {
                        points: g.points.iter().map(|&(x, c)| (x, c / ks[i])).collect(),
                        ..g.clone()
                    }
                })
                .collect(),
        )?;
        let times: Vec<f64> = groups.iter().map(|g| g.time).collect();
        let member_k: Vec<f64> = members.iter().map(|&i| ks[i]).collect();
        let base = base_cfg.params_with_k(member_k[0])?;
        let grid = cfg.grid_through(&times)?;
        let initial = cfg.initial(&grid)?;
        let mut problem = FitProblem::from_densities(dens, base, grid, initial, pair)?;
        problem.settings = cfg.fit_settings();
        problem.solver = cfg.solver_options();

        let (alpha, converged, objective, trace, error) = match fit(&problem, alpha0) {
            Ok(out) => {
                let error = (!out.converged)
                    .then(|| format!("no convergence within {} iterations", out.trace.iterations.len()));
                (out.alpha, out.converged, Some(out.objective), out.trace, error)
            }
            Err(e) => {
                let last = e.trace.iterations.last().map(|it| it.alpha).unwrap_or(alpha0);
                let obj = e.trace.iterations.last().map(|it| it.objective);
                (last, false, obj, e.trace, Some(e.error.to_string()))
            }
        };
        let fitted = problem.predict(alpha).ok();
        let mut idx = 0;
        for (g, k) in groups.iter().zip(&member_k) {
            for &(x, c) in &g.points {
                table.push(FittedRow {
                    time: g.time,
                    x,
                    observed: c,
                    fitted: fitted.as_ref().map(|f| k * f[idx]),
                    mass_constant: *k,
                });
                idx += 1;
            }
        }
        fits.push(GroupFit {
            times,
            mass_constants: member_k,
            alpha0,
            alpha,
            drift: base.drift().with_pair(pair, alpha),
            converged,
            objective,
            trace,
            error,
        });
    }

    let report = RunReport {
        tool: "levyflow".into(),
        version: TOOL_VERSION.into(),
        pair,
        fits,
        table,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    serde_json::to_writer_pretty(create(&out_dir.join("fit_report.json"))?, &report)?;
    let mut w = csv::Writer::from_writer(create(&out_dir.join("fitted_vs_observed.csv"))?);
    w.write_record(["time", "x", "observed", "fitted"])?;
    for r in &report.table {
        w.write_record([
            r.time.to_string(),
            r.x.to_string(),
            r.observed.to_string(),
            r.fitted.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct SampleRequest {
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub time: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSummary {
    pub n: usize,
    pub seed: u64,
    pub time: f64,
    pub mass: f64,
    pub normalized: bool,
    pub params_sha256: String,
    pub sample_file: PathBuf,
    pub histogram_file: PathBuf,
}

/// Solves to the sample time and writes `sample.csv` and `histogram.csv`
/// (`bin_left,bin_right,density,fitted_pdf`).
pub fn run_sample(cfg: &RunConfig, req: &SampleRequest, out_dir: &Path) -> Result<SampleSummary> {
    let n = req.n.unwrap_or(cfg.sample_size);
    if n == 0 {
        return Err(Error::Config("sample size must be >= 1".into()));
    }
    let seed = req.seed.unwrap_or(cfg.seed);
    let t = req
        .time
        .or(cfg.sample_time)
        .or(cfg.t_end)
        .or_else(|| cfg.output_times.as_ref().and_then(|t| t.last().copied()))
        .ok_or_else(|| Error::Config("set --time, sample_time or t_end".into()))?;
    if !(t > 0.0) {
        return Err(Error::Config(format!("sample time {t} must be > 0")));
    }
    let params = cfg.params_with_k(cfg.mass_constant.unwrap_or(1.0))?;
    let grid = cfg.grid_through(&[t])?;
    let initial = cfg.initial(&grid)?;
    let sol = solve_forward(&params, &grid, &initial, &[t], &cfg.solver_options())?;
    let snap = &sol.snapshots[0];
    let raw = EmpiricalCdf::from_snapshot(snap, &grid)?;
    let mass = raw.total();
    let cdf = if cfg.normalize_sample { raw.normalized()? } else { raw };
    if cdf.mass_mismatch() {
        eprintln!(
            "warning: density integrates to {mass:.6}; the missing mass is sampled at x = {}",
            cfg.x_right
        );
    }
    let batch = sample_partitioned(&cdf, n, seed, t, cfg.sample_workers.max(1))?;
    let hash = param_hash(&(
        params,
        grid.intervals(),
        grid.times().len(),
        cfg.source,
        cfg.normalize_sample,
    ))?;

    let sample_file = out_dir.join("sample.csv");
    let mut w = create(&sample_file)?;
    write_batch_csv(&batch, &hash, &mut w)?;
    w.flush()?;

    let bins = cfg.histogram_bins.max(1);
    let width = (cfg.x_right - cfg.x_left) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| cfg.x_left + k as f64 * width).collect();
    let dens = empirical_density(&batch, &edges)?;
    let scale = if cfg.normalize_sample { 1.0 / mass } else { 1.0 };
    let histogram_file = out_dir.join("histogram.csv");
    let mut hw = csv::Writer::from_writer(create(&histogram_file)?);
    hw.write_record(["bin_left", "bin_right", "density", "fitted_pdf"])?;
    for k in 0..bins {
        let mid = 0.5 * (edges[k] + edges[k + 1]);
        let pdf = scale * interpolate(snap.values(), &grid, mid);
        hw.write_record([
            edges[k].to_string(),
            edges[k + 1].to_string(),
            dens[k].to_string(),
            pdf.to_string(),
        ])?;
    }
    hw.flush()?;
    Ok(SampleSummary {
        n,
        seed,
        time: t,
        mass,
        normalized: cfg.normalize_sample,
        params_sha256: hash,
        sample_file,
        histogram_file,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalReport {
    pub sample: PathBuf,
    pub a: f64,
    pub b: f64,
    #[serde(flatten)]
    pub interval: IntervalEstimate,
}

/// Parses `a,b`.
pub fn parse_interval(text: &str) -> Result<(f64, f64)> {
    let (a, b) = text
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("interval `{text}` is not of the form a,b")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("interval bound `{s}`: {e}")))
    };
    let (a, b) = (parse(a)?, parse(b)?);
    if !(a < b) {
        return Err(Error::Config(format!("interval ({a}, {b}) needs a < b")));
    }
    Ok((a, b))
}

/// Interval probability of a stored batch; writes `<sample>.interval.json`.
pub fn run_report(sample: &Path, a: f64, b: f64, confidence: f64) -> Result<IntervalReport> {
    if !(a < b) {
        return Err(Error::Config(format!("interval ({a}, {b}) needs a < b")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Config(format!("confidence {confidence} must lie in (0, 1)")));
    }
    let file = File::open(sample).map_err(|e| Error::Config(format!("{}: {e}", sample.display())))?;
    let (batch, _) = read_batch_csv(BufReader::new(file))?;
    let interval = interval_probability_ci(&batch, a, b, confidence)?;
    let report = IntervalReport {
        sample: sample.to_path_buf(),
        a,
        b,
        interval,
    };
    let mut json = sample.as_os_str().to_owned();
    json.push(".interval.json");
    serde_json::to_writer_pretty(create(Path::new(&json))?, &report)?;
    Ok(report)
}

/// Exit status for an error: 2 for bad input or configuration, 1 otherwise.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Data { .. } | Error::NoObservations | Error::Csv(_) | Error::Io(_) => 2,
        _ => 1,
    }
}
