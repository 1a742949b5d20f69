//! Inverse-CDF sampling of a density snapshot and interval probabilities.
//!
//! The CDF is the trapezoid recursion over the grid, and the inverse is the
//! exact inverse of its piecewise-linear interpolant. Probability mass the
//! CDF does not reach (lost through the boundaries) lands on the last grid
//! point, as `u >= F(y_n)` maps there.

use std::io::{BufRead, Write};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{DensitySnapshot, SpaceTimeGrid};

/// Total masses further than this from 1 set [`EmpiricalCdf::mass_mismatch`].
pub const MASS_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    grid_points: Vec<f64>,
    cdf_values: Vec<f64>,
    densities: Vec<f64>,
}

/// Trapezoid CDF: `F(y_0) = 0`, `F(y_r) = F(y_{r-1}) + (y_r - y_{r-1})(p_r + p_{r-1}) / 2`.
pub fn build_cdf(grid_points: &[f64], densities: &[f64]) -> Result<EmpiricalCdf> {
    if grid_points.len() != densities.len() {
        return Err(Error::DimensionMismatch {
            expected: grid_points.len(),
            got: densities.len(),
        });
    }
    if grid_points.len() < 2 {
        return Err(Error::invalid("a CDF needs at least two grid points"));
    }
    if let Some(w) = grid_points.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(Error::invalid(format!(
            "grid points must increase strictly ({} then {})",
            w[0], w[1]
        )));
    }
    if let Some((i, p)) = densities
        .iter()
        .enumerate()
        .find(|(_, p)| !(**p >= 0.0 && p.is_finite()))
    {
        return Err(Error::invalid(format!(
            "density {p} at point {i} must be finite and >= 0"
        )));
    }
    let mut cdf_values = Vec::with_capacity(densities.len());
    cdf_values.push(0.0);
    for r in 1..densities.len() {
        let step = (grid_points[r] - grid_points[r - 1]) * (densities[r] + densities[r - 1]) / 2.0;
        cdf_values.push(cdf_values[r - 1] + step);
    }
    let total = *cdf_values.last().expect("at least two points");
    if total > 1.0 + MASS_TOLERANCE {
        return Err(Error::invalid(format!("densities integrate to {total} > 1")));
    }
    Ok(EmpiricalCdf {
        grid_points: grid_points.to_vec(),
        cdf_values,
        densities: densities.to_vec(),
    })
}

impl EmpiricalCdf {
    pub fn from_snapshot(snapshot: &DensitySnapshot, grid: &SpaceTimeGrid) -> Result<Self> {
        build_cdf(&grid.nodes(), snapshot.values())
    }

    pub fn grid_points(&self) -> &[f64] {
        &self.grid_points
    }

    pub fn cdf_values(&self) -> &[f64] {
        &self.cdf_values
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn total(&self) -> f64 {
        *self.cdf_values.last().expect("non-empty")
    }

    /// Set when the densities do not integrate to 1.
    pub fn mass_mismatch(&self) -> bool {
        (self.total() - 1.0).abs() > MASS_TOLERANCE
    }

    /// The same CDF with densities divided by the total mass.
    pub fn normalized(&self) -> Result<Self> {
        let total = self.total();
        if !(total > 0.0) {
            return Err(Error::invalid("cannot normalise a CDF with zero mass"));
        }
        let densities: Vec<f64> = self.densities.iter().map(|p| p / total).collect();
        build_cdf(&self.grid_points, &densities)
    }

    /// Piecewise-linear interpolant of the knot values; 0 below `y_0` and
    /// `F(y_n)` above `y_n`.
    pub fn eval(&self, x: f64) -> f64 {
        let y = &self.grid_points;
        let n = y.len() - 1;
        if x <= y[0] {
            return 0.0;
        }
        if x >= y[n] {
            return self.cdf_values[n];
        }
        let r = y.partition_point(|&v| v <= x) - 1;
        let s = (x - y[r]) / (y[r + 1] - y[r]);
        self.cdf_values[r] + s * (self.cdf_values[r + 1] - self.cdf_values[r])
    }

    /// CDF of the law the sampler draws from: [`eval`](Self::eval) plus the
    /// unreached mass as an atom at `y_n`.
    pub fn sampled_law(&self, x: f64) -> f64 {
        if x >= *self.grid_points.last().expect("non-empty") {
            1.0
        } else {
            self.eval(x)
        }
    }
}

/// Inverse of the piecewise-linear CDF.
///
/// Flat segments map to their left end; `u >= F(y_n)` maps to `y_n`.
pub fn inverse_cdf(cdf: &EmpiricalCdf, u: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::OutOfDomain {
            what: "u",
            value: u,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(invert(cdf, u))
}

#[inline]
fn invert(cdf: &EmpiricalCdf, u: f64) -> f64 {
    let (y, f) = (&cdf.grid_points, &cdf.cdf_values);
    let n = y.len() - 1;
    if u < f[0] {
        return y[0];
    }
    if u >= f[n] {
        return y[n];
    }
    // last r with f[r] <= u; then f[r] <= u < f[r + 1]
    let r = f.partition_point(|&v| v <= u) - 1;
    let rise = f[r + 1] - f[r];
    let x = y[r] + (u - f[r]) * (y[r + 1] - y[r]) / rise;
    x.clamp(y[r], y[r + 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub values: Vec<f64>,
    pub seed: u64,
    pub time: f64,
}

fn uniforms(rng: &mut ChaCha8Rng, cdf: &EmpiricalCdf, out: &mut [f64]) {
    for v in out.iter_mut() {
        let u: f64 = rng.random();
        *v = invert(cdf, u);
    }
}

/// `n` draws from `cdf` on one ChaCha8 stream seeded with `seed`.
pub fn sample(cdf: &EmpiricalCdf, n: usize, seed: u64, time: f64) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::invalid("sample size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; n];
    uniforms(&mut rng, cdf, &mut values);
    Ok(SampleBatch { values, seed, time })
}

/// Like [`sample`], split over `workers` threads.
///
/// The index range is cut into `workers` contiguous chunks of
/// `ceil(n / workers)`; chunk `c` draws from the generator seeded with
/// `seed` on ChaCha stream `c`. The output depends on `workers` but not on
/// thread scheduling; `workers = 1` reproduces [`sample`].
pub fn sample_partitioned(cdf: &EmpiricalCdf, n: usize, seed: u64, time: f64, workers: usize) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::invalid("sample size must be >= 1"));
    }
    if workers == 0 {
        return Err(Error::invalid("worker count must be >= 1"));
    }
    let mut values = vec![0.0; n];
    let chunk = n.div_ceil(workers);
    thread::scope(|s| {
        for (c, part) in values.chunks_mut(chunk).enumerate() {
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                uniforms(&mut rng, cdf, part);
            });
        }
    });
    Ok(SampleBatch { values, seed, time })
}

/// Stable variates in the `S(alpha, beta, sigma, mu)` parameterisation with
/// characteristic exponent
/// `-sigma^a |t|^a (1 - i beta sign(t) tan(pi a / 2)) + i mu t` (`a != 1`),
/// by the Chambers-Mallows-Stuck construction.
pub fn stable_oracle_sample(alpha: f64, beta: f64, mu: f64, sigma: f64, n: usize, seed: u64) -> Result<SampleBatch> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::invalid(format!("stability index {alpha} must lie in (0, 2]")));
    }
    if !(-1.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("skewness {beta} must lie in [-1, 1]")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) || !mu.is_finite() {
        return Err(Error::invalid("scale must be > 0 and location finite"));
    }
    if n == 0 {
        return Err(Error::invalid("sample size must be >= 1"));
    }
    use std::f64::consts::{FRAC_PI_2, PI};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n);
    let unit_one = alpha == 1.0;
    let (b, s) = if unit_one {
        (0.0, 0.0)
    } else {
        let t = beta * (PI * alpha / 2.0).tan();
        (t.atan() / alpha, (1.0 + t * t).powf(1.0 / (2.0 * alpha)))
    };
    while values.len() < n {
        let u: f64 = rng.random();
        let e: f64 = rng.random();
        if u == 0.0 {
            continue;
        }
        let v = PI * (u - 0.5);
        let w = -(1.0 - e).ln();
        if w == 0.0 {
            continue;
        }
        let x = if unit_one {
            let k = FRAC_PI_2 + beta * v;
            (k * v.tan() - beta * ((FRAC_PI_2 * w * v.cos()) / k).ln()) / FRAC_PI_2
        } else {
            let av = alpha * (v + b);
            s * av.sin() / v.cos().powf(1.0 / alpha) * ((v - av).cos() / w).powf((1.0 - alpha) / alpha)
        };
        let y = if unit_one {
            sigma * x + beta * sigma * sigma.ln() / FRAC_PI_2 + mu
        } else {
            sigma * x + mu
        };
        if y.is_finite() {
            values.push(y);
        }
    }
    Ok(SampleBatch {
        values,
        seed,
        time: f64::NAN,
    })
}

/// Scale of the stable marginal after `t` days of diffusion with
/// coefficient `b`: `sigma^alpha = b t |cos(pi alpha / 2)|`.
pub fn stable_scale(b: f64, alpha: f64, t: f64) -> f64 {
    (b * t * (std::f64::consts::PI * alpha / 2.0).cos().abs()).powf(1.0 / alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub half_width: f64,
    pub confidence: f64,
    pub n: usize,
}

/// Normal-approximation interval `p +- z sqrt(p (1 - p) / N)`.
pub fn ci_half_width(p: f64, n: usize, confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!("confidence {confidence} must lie in (0, 1)")));
    }
    if n == 0 {
        return Err(Error::invalid("empty sample"));
    }
    let z = Normal::standard().inverse_cdf(1.0 - (1.0 - confidence) / 2.0);
    Ok(z * (p * (1.0 - p) / n as f64).sqrt())
}

/// Fraction of the batch in the open interval `(a, b)` with its interval.
pub fn interval_probability_ci(batch: &SampleBatch, a: f64, b: f64, confidence: f64) -> Result<IntervalEstimate> {
    if !(a < b) {
        return Err(Error::invalid(format!("interval ({a}, {b}) is empty")));
    }
    let n = batch.values.len();
    if n == 0 {
        return Err(Error::invalid("empty sample"));
    }
    let hits = batch.values.iter().filter(|&&v| v > a && v < b).count();
    let estimate = hits as f64 / n as f64;
    let half_width = ci_half_width(estimate, n, confidence)?;
    Ok(IntervalEstimate {
        estimate,
        lower: estimate - half_width,
        upper: estimate + half_width,
        half_width,
        confidence,
        n,
    })
}

/// Histogram density `count / (N width)` per bin `[e_k, e_{k+1})`, the last
/// bin closed.
pub fn empirical_density(batch: &SampleBatch, bin_edges: &[f64]) -> Result<Vec<f64>> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("bin edges must increase strictly"));
    }
    let n = batch.values.len();
    let bins = bin_edges.len() - 1;
    let last = bin_edges[bins];
    let mut counts = vec![0usize; bins];
    for &v in &batch.values {
        if v < bin_edges[0] || v > last {
            continue;
        }
        let k = if v == last {
            bins - 1
        } else {
            bin_edges.partition_point(|&e| e <= v) - 1
        };
        counts[k] += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            if n == 0 {
                0.0
            } else {
                c as f64 / (n as f64 * (bin_edges[k + 1] - bin_edges[k]))
            }
        })
        .collect())
}

/// Kolmogorov-Smirnov distance between the batch and a CDF `g` whose only
/// possible jump is at `atom`, if any (`g_left` gives left limits there).
pub fn ks_distance(values: &[f64], g: impl Fn(f64) -> f64, g_left: impl Fn(f64) -> f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < v.len() {
        let x = v[i];
        let mut j = i;
        while j < v.len() && v[j] == x {
            j += 1;
        }
        d = d.max((j as f64 / n - g(x)).abs()).max((i as f64 / n - g_left(x)).abs());
        i = j;
    }
    d
}

/// KS distance between a batch and the law it was drawn from.
pub fn ks_against_cdf(batch: &SampleBatch, cdf: &EmpiricalCdf) -> f64 {
    ks_distance(&batch.values, |x| cdf.sampled_law(x), |x| cdf.eval(x))
}

/// Writes the batch as one `y` column preceded by `#` metadata lines.
pub fn write_batch_csv<W: Write>(batch: &SampleBatch, param_hash: &str, mut out: W) -> Result<()> {
    writeln!(out, "# seed={}", batch.seed)?;
    writeln!(out, "# time={}", batch.time)?;
    writeln!(out, "# params_sha256={param_hash}")?;
    writeln!(out, "y")?;
    for v in &batch.values {
        writeln!(out, "{v}")?;
    }
    Ok(())
}

/// Reads what [`write_batch_csv`] wrote; the parameter hash is returned
/// alongside when present.
pub fn read_batch_csv<R: BufRead>(input: R) -> Result<(SampleBatch, Option<String>)> {
    let mut seed = 0;
    let mut time = f64::NAN;
    let mut hash = None;
    let mut values = Vec::new();
    let mut header_seen = false;
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = k + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Data { line: line_no, message };
        if let Some(meta) = t.strip_prefix('#') {
            if let Some((key, val)) = meta.trim().split_once('=') {
                match key.trim() {
                    "seed" => seed = val.trim().parse().map_err(|e| bad(format!("seed: {e}")))?,
                    "time" => time = val.trim().parse().map_err(|e| bad(format!("time: {e}")))?,
                    "params_sha256" => hash = Some(val.trim().to_string()),
                    _ => {}
                }
            }
            continue;
        }
        if !header_seen {
            if t != "y" {
                return Err(bad(format!("expected header `y`, found `{t}`")));
            }
            header_seen = true;
            continue;
        }
        let v: f64 = t.parse().map_err(|e| bad(format!("`{t}`: {e}")))?;
        values.push(v);
    }
    if values.is_empty() {
        return Err(Error::invalid("sample file holds no values"));
    }
    Ok((SampleBatch { values, seed, time }, hash))
}
