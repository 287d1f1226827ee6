//! Sieve basis families evaluated on a time grid in `[0, 1]`.
//!
//! Basis functions are indexed from 1, so `b_1` is the first function of a
//! family. Both families are nested: the first `c` rows of a basis matrix with
//! truncation `c' > c` equal the basis matrix with truncation `c`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    Fourier,
    Chebyshev2,
}

impl BasisFamily {
    /// Value of the `j`-th basis function at `t`.
    pub fn eval(self, j: usize, t: f64) -> Result<f64> {
        match self {
            BasisFamily::Fourier => eval_fourier(j, t),
            BasisFamily::Chebyshev2 => eval_chebyshev2(j, t),
        }
    }

    /// The vector `b(t) = (b_1(t), .., b_c(t))`.
    pub fn eval_all(self, c: usize, t: f64) -> Result<Vec<f64>> {
        check_t(t)?;
        match self {
            BasisFamily::Fourier => (1..=c).map(|j| eval_fourier(j, t)).collect(),
            BasisFamily::Chebyshev2 => {
                let mut out = Vec::with_capacity(c);
                chebyshev2_run(c, t, |v| out.push(v));
                Ok(out)
            }
        }
    }
}

impl fmt::Display for BasisFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisFamily::Fourier => f.write_str("fourier"),
            BasisFamily::Chebyshev2 => f.write_str("chebyshev2"),
        }
    }
}

impl FromStr for BasisFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fourier" => Ok(BasisFamily::Fourier),
            "chebyshev2" | "chebyshev" => Ok(BasisFamily::Chebyshev2),
            other => Err(Error::Validation(format!("unknown basis family `{other}`"))),
        }
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} lies outside [0, 1]")));
    }
    Ok(())
}

fn check_index(j: usize) -> Result<()> {
    if j == 0 {
        return Err(Error::Domain("basis index is 1-based; got 0".into()));
    }
    Ok(())
}

/// Fourier basis: `1`, then `√2 sin(πjt)` for even `j` and `√2 cos(π(j−1)t)`
/// for odd `j > 1`.
pub fn eval_fourier(j: usize, t: f64) -> Result<f64> {
    check_index(j)?;
    check_t(t)?;
    Ok(fourier_unchecked(j, t))
}

fn fourier_unchecked(j: usize, t: f64) -> f64 {
    if j == 1 {
        1.0
    } else if j % 2 == 0 {
        SQRT_2 * (PI * j as f64 * t).sin()
    } else {
        SQRT_2 * (PI * (j - 1) as f64 * t).cos()
    }
}

/// Second-kind Chebyshev family on `[0, 1]`:
/// `b_1(t) = 2 (1 − (2t − 1)²)^{1/4} / √π`, `b_2 = 2t b_1`,
/// `b_j = 2t b_{j−1} − b_{j−2}`, evaluated forward from `b_1`.
pub fn eval_chebyshev2(j: usize, t: f64) -> Result<f64> {
    check_index(j)?;
    check_t(t)?;
    let mut last = 0.0;
    chebyshev2_run(j, t, |v| last = v);
    Ok(last)
}

/// Feeds `b_1(t), .., b_count(t)` to `sink` in order.
fn chebyshev2_run(count: usize, t: f64, mut sink: impl FnMut(f64)) {
    if count == 0 {
        return;
    }
    let u = 2.0 * (t - 0.5);
    // Clamp guards the endpoints against a rounding-negative radicand.
    let radicand = (1.0 - u * u).max(0.0);
    let b1 = 2.0 * radicand.sqrt().sqrt() / PI.sqrt();
    sink(b1);
    if count == 1 {
        return;
    }
    let mut prev = b1;
    let mut cur = 2.0 * t * b1;
    sink(cur);
    for _ in 3..=count {
        let next = 2.0 * t * cur - prev;
        prev = cur;
        cur = next;
        sink(cur);
    }
}

/// Ordered observation times in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("time grid is empty".into()));
        }
        if let Some(&bad) = points.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("grid point {bad} lies outside [0, 1]")));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation(
                "time grid must be strictly increasing".into(),
            ));
        }
        Ok(Self { points })
    }

    /// `t_k = (k − 1) / T` for `k = 1..T`.
    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Validation("time grid is empty".into()));
        }
        Self::new((0..len).map(|k| k as f64 / len as f64).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;

    fn try_from(points: Vec<f64>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.points
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub c: usize,
}

impl BasisSpec {
    pub fn new(family: BasisFamily, c: usize) -> Result<Self> {
        if c == 0 {
            return Err(Error::Validation("basis truncation c must be >= 1".into()));
        }
        Ok(Self { family, c })
    }
}

/// `B ∈ ℝ^{c×T}` with entry `(h, k) = b_h(t_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisMatrix {
    spec: BasisSpec,
    grid: TimeGrid,
    values: DMatrix<f64>,
}

pub fn basis_matrix(spec: BasisSpec, grid: &TimeGrid) -> BasisMatrix {
    let t_len = grid.len();
    let mut values = DMatrix::zeros(spec.c, t_len);
    for (k, &t) in grid.points().iter().enumerate() {
        // Grid points are validated on construction, so evaluation cannot fail.
        match spec.family {
            BasisFamily::Fourier => {
                for h in 0..spec.c {
                    values[(h, k)] = fourier_unchecked(h + 1, t);
                }
            }
            BasisFamily::Chebyshev2 => {
                let mut h = 0;
                chebyshev2_run(spec.c, t, |v| {
                    values[(h, k)] = v;
                    h += 1;
                });
            }
        }
    }
    BasisMatrix {
        spec,
        grid: grid.clone(),
        values,
    }
}

impl BasisMatrix {
    #[cfg(test)]
    pub(crate) fn from_values(spec: BasisSpec, grid: TimeGrid, values: DMatrix<f64>) -> Self {
        assert_eq!((values.nrows(), values.ncols()), (spec.c, grid.len()));
        BasisMatrix { spec, grid, values }
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    pub fn family(&self) -> BasisFamily {
        self.spec.family
    }

    pub fn c(&self) -> usize {
        self.spec.c
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Leading `c` rows, i.e. the same family truncated at `c`.
    pub fn truncate(&self, c: usize) -> Result<BasisMatrix> {
        if c == 0 || c > self.spec.c {
            return Err(Error::Validation(format!(
                "cannot truncate a c = {} basis to c = {c}",
                self.spec.c
            )));
        }
        Ok(BasisMatrix {
            spec: BasisSpec {
                family: self.spec.family,
                c,
            },
            grid: self.grid.clone(),
            values: self.values.rows(0, c).into_owned(),
        })
    }

    /// Largest absolute entry, the grid analogue of `sup_h sup_t |b_h(t)|`.
    pub fn xi(&self) -> f64 {
        self.values.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }

    /// Operator norm of `(1/T) B Bᵀ − I_c`.
    pub fn gram_deviation(&self) -> f64 {
        let t_len = self.grid.len() as f64;
        let mut gram = &self.values * self.values.transpose() / t_len;
        for h in 0..self.spec.c {
            gram[(h, h)] -= 1.0;
        }
        let eig = gram.symmetric_eigen();
        eig.eigenvalues.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }

    /// Headerless CSV, `c` rows by `T` columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for h in 0..self.values.nrows() {
            let row: Vec<String> = self.values.row(h).iter().map(|&v| fmt_f64(v)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}
