//! Stiffness matrix of the fractional diffusion term.
//!
//! With hat functions on a uniform grid of spacing `h`, the flux difference
//! across cell `i` produced by node `j` has the closed form
//!
//! ```text
//! z_ij = b h^(lambda-1) / Gamma(lambda+1) * c(i - j)
//! ```
//!
//! where `c` depends only on the offset `i - j` once `|i - j| >= 2`. The
//! matrix is therefore dense but Toeplitz in its tails, and is stored as the
//! diagonal, the two adjacent diagonals and one array per tail, O(I) scalars.

use nalgebra::DMatrix;
use statrs::function::gamma::gamma as gamma_fn;

use crate::error::{Error, Result};
use crate::model::{FadeParams, SpaceTimeGrid};

/// Parameters a stiffness matrix was assembled from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub lambda: f64,
    pub gamma: f64,
    pub b: f64,
    pub h: f64,
}

/// `b h^(lambda-1) / Gamma(lambda+1)`.
fn prefactor(lambda: f64, b: f64, h: f64) -> f64 {
    b * h.powf(lambda - 1.0) / gamma_fn(lambda + 1.0)
}

/// Dimensionless entry for row-minus-column offset `k`.
///
/// Valid for `lambda` in `(0, 1]`; the closed forms stay finite at 1, which
/// the limit tests use.
pub(crate) fn offset_coefficient(k: i64, lambda: f64, gamma: f64) -> f64 {
    let p = |s: f64| s.powf(lambda);
    let g = gamma;
    match k {
        0 => 2f64.powf(-lambda) + 2.0 * p(0.5) - p(1.5),
        1 => 3.0 * p(1.5) * g - 3.0 * p(0.5) * g - p(2.5) * g - 2f64.powf(-lambda) * (1.0 - g),
        -1 => 3.0 * p(1.5) * (1.0 - g) - 3.0 * p(0.5) * (1.0 - g) - p(2.5) * (1.0 - g) - 2f64.powf(-lambda) * g,
        k if k >= 2 => {
            let d = k as f64;
            g * (p(d + 0.5) - 2.0 * p(d - 0.5) + p(d - 1.5)) - g * (p(d + 1.5) - 2.0 * p(d + 0.5) + p(d - 0.5))
        }
        k => {
            let d = (-k) as f64;
            (1.0 - g) * (2.0 * p(d + 0.5) - p(d - 0.5) - p(d + 1.5))
                - (1.0 - g) * (2.0 * p(d - 0.5) - p(d - 1.5) - p(d + 0.5))
        }
    }
}

fn check_coefficients(lambda: f64, gamma: f64, b: f64, h: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::invalid(format!("lambda = {lambda} not in (0, 1)")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma = {gamma} not in [0, 1]")));
    }
    if !(b >= 0.0 && b.is_finite()) {
        return Err(Error::invalid(format!("b = {b} must be >= 0")));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("h = {h} must be > 0")));
    }
    Ok(())
}

/// Closed-form entry `z_ij` for interior node indices `1 <= i, j <= I - 1`.
pub fn stiffness_entry(i: usize, j: usize, intervals: usize, lambda: f64, gamma: f64, b: f64, h: f64) -> Result<f64> {
    let max = intervals.saturating_sub(1);
    if i == 0 || j == 0 || i > max || j > max {
        return Err(Error::IndexOutOfRange { i, j, max });
    }
    check_coefficients(lambda, gamma, b, h)?;
    Ok(prefactor(lambda, b, h) * offset_coefficient(i as i64 - j as i64, lambda, gamma))
}

/// Band storage of the `(I-1) x (I-1)` stiffness matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StiffnessMatrix {
    dim: usize,
    diag: f64,
    sub_adjacent: f64,
    super_adjacent: f64,
    /// `lower_band[k - 2]` holds `z_{i, i-k}`.
    lower_band: Vec<f64>,
    /// `upper_band[k - 2]` holds `z_{i, i+k}`.
    upper_band: Vec<f64>,
    provenance: Provenance,
}

impl StiffnessMatrix {
    pub fn assemble(grid: &SpaceTimeGrid, params: &FadeParams) -> Result<Self> {
        if grid.x_left() != params.x_left() || grid.x_right() != params.x_right() {
            return Err(Error::invalid(format!(
                "grid [{}, {}] does not match model domain [{}, {}]",
                grid.x_left(),
                grid.x_right(),
                params.x_left(),
                params.x_right()
            )));
        }
        Self::build(grid.intervals(), params.lambda(), params.gamma(), params.b(), grid.h())
    }

    pub fn build(intervals: usize, lambda: f64, gamma: f64, b: f64, h: f64) -> Result<Self> {
        if intervals < 2 {
            return Err(Error::invalid("need at least two intervals"));
        }
        check_coefficients(lambda, gamma, b, h)?;
        let dim = intervals - 1;
        let scale = prefactor(lambda, b, h);
        let tail = dim.saturating_sub(2);
        let lower_band = (0..tail)
            .map(|k| scale * offset_coefficient(k as i64 + 2, lambda, gamma))
            .collect();
        let upper_band = (0..tail)
            .map(|k| scale * offset_coefficient(-(k as i64 + 2), lambda, gamma))
            .collect();
        Ok(StiffnessMatrix {
            dim,
            diag: scale * offset_coefficient(0, lambda, gamma),
            sub_adjacent: scale * offset_coefficient(1, lambda, gamma),
            super_adjacent: scale * offset_coefficient(-1, lambda, gamma),
            lower_band,
            upper_band,
            provenance: Provenance { lambda, gamma, b, h },
        })
    }

    /// Matrix dimension `I - 1`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn diag(&self) -> f64 {
        self.diag
    }
    pub fn sub_adjacent(&self) -> f64 {
        self.sub_adjacent
    }
    pub fn super_adjacent(&self) -> f64 {
        self.super_adjacent
    }
    pub fn lower_band(&self) -> &[f64] {
        &self.lower_band
    }
    pub fn upper_band(&self) -> &[f64] {
        &self.upper_band
    }

    /// Number of stored scalars.
    pub fn stored_len(&self) -> usize {
        3 + self.lower_band.len() + self.upper_band.len()
    }

    /// Entry by row-minus-column offset.
    #[inline]
    pub fn at_offset(&self, k: isize) -> f64 {
        match k {
            0 => self.diag,
            1 => self.sub_adjacent,
            -1 => self.super_adjacent,
            k if k >= 2 => self.lower_band[k as usize - 2],
            k => self.upper_band[(-k) as usize - 2],
        }
    }

    /// Entry `z_ij` for interior node indices `1 <= i, j <= I - 1`.
    pub fn entry(&self, i: usize, j: usize) -> Result<f64> {
        if i == 0 || j == 0 || i > self.dim || j > self.dim {
            return Err(Error::IndexOutOfRange { i, j, max: self.dim });
        }
        Ok(self.at_offset(i as isize - j as isize))
    }

    /// `Z v` from the band arrays; `v[r]` is the coefficient of node `r + 1`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.matvec_into(v, &mut out)?;
        Ok(out)
    }

    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim;
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: v.len(),
            });
        }
        if out.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: out.len(),
            });
        }
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = self.diag * v[r];
            if r >= 1 {
                acc += self.sub_adjacent * v[r - 1];
            }
            if r + 1 < n {
                acc += self.super_adjacent * v[r + 1];
            }
            // columns r-2, r-3, ..., 0 against lower_band[0], [1], ...
            if r >= 2 {
                acc += self.lower_band[..r - 1]
                    .iter()
                    .zip(v[..r - 1].iter().rev())
                    .map(|(z, x)| z * x)
                    .sum::<f64>();
            }
            if r + 2 < n {
                acc += self.upper_band[..n - r - 2]
                    .iter()
                    .zip(&v[r + 2..])
                    .map(|(z, x)| z * x)
                    .sum::<f64>();
            }
            *o = acc;
        }
        Ok(())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim;
        DMatrix::from_fn(n, n, |r, c| self.at_offset(r as isize - c as isize))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::day224_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const L224: f64 = 0.8;
    const G224: f64 = 0.9999;
    const B224: f64 = 0.1859783;

    #[test]
    fn diagonal_matches_symbolic_expression() {
        for &(lambda, gamma) in &[(0.3, 0.0), (0.5, 0.5), (0.8, 0.9999), (0.95, 1.0)] {
            let (b, h) = (0.7f64, 0.25f64);
            let expected = b * h.powf(lambda - 1.0) / gamma_fn(lambda + 1.0)
                * (2f64.powf(-lambda) + 2.0 * 0.5f64.powf(lambda) - 1.5f64.powf(lambda));
            let got = stiffness_entry(3, 3, 8, lambda, gamma, b, h).unwrap();
            assert!((got - expected).abs() <= 1e-15 * expected.abs());
        }
    }

    #[test]
    fn adjacent_entries_equal_at_half() {
        let sub = stiffness_entry(3, 2, 8, 0.6, 0.5, 1.3, 0.4).unwrap();
        let sup = stiffness_entry(2, 3, 8, 0.6, 0.5, 1.3, 0.4).unwrap();
        assert!((sub - sup).abs() < 1e-15 * sub.abs());
    }

    #[test]
    fn toeplitz_example() {
        let a = stiffness_entry(5, 2, 10, L224, G224, B224, 0.5).unwrap();
        let b = stiffness_entry(6, 3, 10, L224, G224, B224, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn entry_index_errors() {
        assert!(matches!(
            stiffness_entry(0, 1, 5, 0.5, 0.5, 1.0, 1.0),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(stiffness_entry(1, 5, 5, 0.5, 0.5, 1.0, 1.0).is_err());
        assert!(stiffness_entry(1, 1, 5, 1.0, 0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn small_dense_expansion() {
        let z = StiffnessMatrix::build(4, 0.5, 1.0, 1.0, 1.0).unwrap();
        let d = z.to_dense();
        assert_eq!(d.shape(), (3, 3));
        for i in 1..=3 {
            for j in 1..=3 {
                let e = stiffness_entry(i, j, 4, 0.5, 1.0, 1.0, 1.0).unwrap();
                assert!((d[(i - 1, j - 1)] - e).abs() <= 1e-14 * e.abs().max(1e-300));
            }
        }
        let z3 = StiffnessMatrix::build(3, 0.5, 0.2, 1.0, 1.0).unwrap();
        let d3 = z3.to_dense();
        assert_eq!(d3[(0, 0)], z3.diag());
        assert_eq!(d3[(0, 1)], z3.super_adjacent());
        assert_eq!(d3[(1, 0)], z3.sub_adjacent());
        assert_eq!(d3[(1, 1)], z3.diag());
    }

    #[test]
    fn day224_storage_is_linear() {
        let p = day224_params();
        let grid = SpaceTimeGrid::uniform(0.0, 300.0, 600, vec![0.0, 1.0]).unwrap();
        let z = StiffnessMatrix::assemble(&grid, &p).unwrap();
        assert_eq!(z.dim(), 599);
        assert!(z.lower_band().len() <= 600 && z.upper_band().len() <= 600);
        assert!(z.stored_len() <= 3 * 600);
    }

    #[test]
    fn day224_dense_entry() {
        let z = StiffnessMatrix::build(20, L224, G224, B224, 300.0 / 20.0).unwrap();
        let d = z.to_dense();
        let e = stiffness_entry(10, 3, 20, L224, G224, B224, 15.0).unwrap();
        assert_eq!(d[(9, 2)], e);
        assert_eq!(z.entry(10, 3).unwrap(), e);
    }

    #[test]
    fn limit_lambda_to_one() {
        let n = 12;
        let near = StiffnessMatrix::build(n, 1.0 - 1e-6, 0.5, 1.0, 1.0).unwrap().to_dense();
        for r in 0..n - 1 {
            for c in 0..n - 1 {
                let limit = offset_coefficient(r as i64 - c as i64, 1.0, 0.5);
                assert!((near[(r, c)] - limit).abs() < 1e-5, "({r},{c})");
            }
        }
        // the symmetric first-order limit vanishes identically
        assert!(offset_coefficient(0, 1.0, 0.5).abs() < 1e-15);
        assert!(offset_coefficient(1, 1.0, 0.5).abs() < 1e-15);
        assert!(offset_coefficient(4, 1.0, 0.5).abs() < 1e-15);
    }

    #[test]
    fn matvec_zero_and_unit_columns() {
        let z = StiffnessMatrix::build(9, 0.8, 0.7, 1.0, 0.3).unwrap();
        assert!(z.matvec(&[0.0; 8]).unwrap().iter().all(|&v| v == 0.0));
        let d = z.to_dense();
        for k in 0..8 {
            let mut e = vec![0.0; 8];
            e[k] = 1.0;
            let col = z.matvec(&e).unwrap();
            for r in 0..8 {
                assert_eq!(col[r], d[(r, k)]);
            }
        }
        assert!(matches!(
            z.matvec(&[1.0; 7]),
            Err(Error::DimensionMismatch { expected: 8, got: 7 })
        ));
    }

    #[test]
    fn matvec_matches_dense_day224() {
        let p = day224_params();
        let grid = SpaceTimeGrid::uniform(0.0, 300.0, 50, vec![0.0, 1.0]).unwrap();
        let z = StiffnessMatrix::assemble(&grid, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..49).map(|_| rng.random_range(-1.0..1.0)).collect();
        // dense oracle straight from the entry formula
        let mut expect = vec![0.0; 49];
        for i in 1..=49 {
            for j in 1..=49 {
                expect[i - 1] += stiffness_entry(i, j, 50, p.lambda(), p.gamma(), p.b(), grid.h()).unwrap() * v[j - 1];
            }
        }
        let got = z.matvec(&v).unwrap();
        let scale = expect.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn skew_pairing_swaps_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let lambda = rng.random_range(0.05..0.95);
            let gamma = rng.random_range(0.0..1.0);
            let n = rng.random_range(3..12);
            let a = StiffnessMatrix::build(n, lambda, gamma, 1.0, 0.5).unwrap().to_dense();
            let b = StiffnessMatrix::build(n, lambda, 1.0 - gamma, 1.0, 0.5)
                .unwrap()
                .to_dense();
            for r in 0..n - 1 {
                for c in 0..n - 1 {
                    assert!((a[(r, c)] - b[(c, r)]).abs() <= 1e-13 * (1.0 + a[(r, c)].abs()));
                }
            }
        }
    }

    #[test]
    fn scaling_in_b_and_h() {
        let base = stiffness_entry(5, 2, 10, 0.4, 0.3, 1.0, 1.0).unwrap();
        let scaled = stiffness_entry(5, 2, 10, 0.4, 0.3, 2.5, 1.0).unwrap();
        assert!((scaled - 2.5 * base).abs() < 1e-14);
        let h_scaled = stiffness_entry(5, 2, 10, 0.4, 0.3, 1.0, 0.2).unwrap();
        assert!((h_scaled - 0.2f64.powf(-0.6) * base).abs() < 1e-13 * h_scaled.abs());
    }
}
