//! Uniform grids over queue states and bids, and the probability objects
//! that live on them.
//!
//! A grid point `x_m = m * step` stands for the cell `[x_m - step/2, x_m + step/2)`
//! clipped to `[0, inf)`. Continuous densities are discretized by integrating
//! over those cells, so grid functions behave like point samples.

use std::fmt;
use std::io::{Read, Write};
use std::marker::PhantomData;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker for the queue-length axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueueAxis;

/// Marker for the bid (currency) axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BidAxis;

/// Uniform grid `{m * step : 0 <= m < count}`.
#[derive(Clone, Copy, PartialEq)]
pub struct Grid<A> {
    step: f64,
    count: usize,
    _axis: PhantomData<A>,
}

pub type StateGrid = Grid<QueueAxis>;
pub type BidGrid = Grid<BidAxis>;

impl<A> fmt::Debug for Grid<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("step", &self.step)
            .field("count", &self.count)
            .finish()
    }
}

impl<A> Grid<A> {
    pub fn new(step: f64, count: usize) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "step must be positive, got {step}"
            )));
        }
        if count < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points, got {count}"
            )));
        }
        Ok(Self {
            step,
            count,
            _axis: PhantomData,
        })
    }

    #[inline]
    pub fn step(&self) -> f64 {
        self.step
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn point(&self, m: usize) -> f64 {
        m as f64 * self.step
    }

    #[inline]
    pub fn max(&self) -> f64 {
        self.point(self.count - 1)
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        (0..self.count).map(move |m| self.point(m))
    }

    /// Index of the grid point nearest to `x`, saturating at both ends.
    pub fn nearest_index(&self, x: f64) -> usize {
        if x <= 0.0 {
            return 0;
        }
        let m = (x / self.step).round();
        if m >= (self.count - 1) as f64 {
            self.count - 1
        } else {
            m as usize
        }
    }

    /// Whether `x` sits on a grid point (relative tolerance 1e-9 of a step).
    pub fn is_on_grid(&self, x: f64) -> bool {
        let r = x / self.step;
        x >= 0.0 && (r - r.round()).abs() < 1e-9 && r.round() < self.count as f64
    }

    pub(crate) fn check_same(&self, other: &Self, what: &str) -> Result<()> {
        if self.count != other.count || (self.step - other.step).abs() > 1e-15 * self.step {
            return Err(Error::GridMismatch(format!(
                "{what}: {self:?} vs {other:?}"
            )));
        }
        Ok(())
    }
}

/// Probability mass over the points of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Pmf<A> {
    grid: Grid<A>,
    weights: Vec<f64>,
}

/// Queue-length distribution (arrival law, regeneration law, stationary law).
pub type QueueDist = Pmf<QueueAxis>;

const MASS_TOL: f64 = 1e-9;
const RENORM_TOL: f64 = 1e-12;

impl<A> Pmf<A> {
    /// Builds a pmf from explicit weights; they must be nonnegative and sum to 1.
    pub fn new(grid: Grid<A>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.count() {
            return Err(Error::InvalidDistribution(format!(
                "expected {} weights, got {}",
                grid.count(),
                weights.len()
            )));
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
        {
            return Err(Error::InvalidDistribution(format!("weight {i} is {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(Self { grid, weights })
    }

    /// Internal constructor for operator outputs: clamps tiny negative
    /// rounding and renormalizes when the mass drifts by more than 1e-12.
    pub(crate) fn from_raw(grid: Grid<A>, mut weights: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), grid.count());
        for w in weights.iter_mut() {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > RENORM_TOL && total > 0.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        Self { grid, weights }
    }

    pub fn point_mass(grid: Grid<A>, index: usize) -> Result<Self> {
        if index >= grid.count() {
            return Err(Error::InvalidDistribution(format!(
                "point mass index {index} outside grid of {}",
                grid.count()
            )));
        }
        let mut weights = vec![0.0; grid.count()];
        weights[index] = 1.0;
        Ok(Self { grid, weights })
    }

    /// Discretizes the uniform law on `[lo, hi]`: each point receives the
    /// fraction of `[lo, hi]` covered by its cell.
    pub fn discretize_uniform(lo: f64, hi: f64, grid: Grid<A>) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::InvalidDistribution(format!(
                "uniform interval needs lo < hi, got [{lo}, {hi}]"
            )));
        }
        if lo < 0.0 || hi > grid.max() + 1e-12 * grid.max() {
            return Err(Error::InvalidDistribution(format!(
                "uniform interval [{lo}, {hi}] outside grid [0, {}]",
                grid.max()
            )));
        }
        let h = grid.step();
        let width = hi - lo;
        let weights = (0..grid.count())
            .map(|m| {
                let x = grid.point(m);
                let cell_lo = (x - 0.5 * h).max(0.0);
                let cell_hi = x + 0.5 * h;
                let overlap = cell_hi.min(hi) - cell_lo.max(lo);
                overlap.max(0.0) / width
            })
            .collect();
        Ok(Self::from_raw(grid, weights))
    }

    #[inline]
    pub fn grid(&self) -> &Grid<A> {
        &self.grid
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    /// Running sum of the weights; the last entry is 1 up to rounding.
    pub fn cdf(&self) -> Vec<f64> {
        cdf_of(&self.weights)
    }

    /// `sum_m w_m * x_m`.
    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(m, w)| w * self.grid.point(m))
            .sum()
    }

    /// Total-variation distance `0.5 * sum |p - q|`.
    pub fn tv_distance(&self, other: &Self) -> f64 {
        0.5 * self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Grid index drawn by inverse-cdf from a single uniform `u` in `[0, 1)`.
    pub fn index_for_uniform(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (m, w) in self.weights.iter().enumerate() {
            if *w > 0.0 {
                last_positive = m;
            }
            acc += w;
            if u < acc {
                return m;
            }
        }
        last_positive
    }

    /// Largest grid point carrying positive mass.
    pub fn support_max(&self) -> f64 {
        let m = self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
        self.grid.point(m)
    }

    pub fn write_csv<W: Write>(&self, writer: W, value_header: &str) -> Result<()> {
        write_curve(
            writer,
            ["grid_point", value_header],
            self.grid.points(),
            &self.weights,
        )
    }

    pub fn write_cdf_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_curve(
            writer,
            ["grid_point", "cdf"],
            self.grid.points(),
            &self.cdf(),
        )
    }
}

/// Running sum of `weights`.
pub fn cdf_of(weights: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect()
}

/// Cumulative bid distribution sampled on the bid grid.
///
/// Off-grid values are linearly interpolated; beyond the last grid point the
/// cdf is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BidCdf {
    grid: BidGrid,
    values: Vec<f64>,
}

impl BidCdf {
    pub fn new(grid: BidGrid, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.count() {
            return Err(Error::InvalidDistribution(format!(
                "expected {} cdf values, got {}",
                grid.count(),
                values.len()
            )));
        }
        for (m, v) in values.iter().enumerate() {
            if !(v.is_finite() && (-MASS_TOL..=1.0 + MASS_TOL).contains(v)) {
                return Err(Error::InvalidDistribution(format!("cdf value {m} is {v}")));
            }
        }
        if let Some(m) = values.windows(2).position(|w| w[1] < w[0] - MASS_TOL) {
            return Err(Error::InvalidDistribution(format!(
                "cdf decreases between bid indices {m} and {}",
                m + 1
            )));
        }
        let last = *values.last().expect("grid has >= 2 points");
        if (last - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidDistribution(format!(
                "cdf must end at 1, ends at {last}"
            )));
        }
        clean_cdf(&mut values);
        Ok(Self { grid, values })
    }

    /// Samples `f` on the grid, clamps to `[0, 1]` and closes the support at the
    /// last grid point (last value forced to 1).
    pub fn from_fn(grid: BidGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut values: Vec<f64> = grid.points().map(|x| f(x).clamp(0.0, 1.0)).collect();
        *values.last_mut().expect("grid has >= 2 points") = 1.0;
        Self::new(grid, values)
    }

    /// `x -> min(slope * x, 1)`, closed at the top of the grid.
    pub fn linear_ramp(grid: BidGrid, slope: f64) -> Result<Self> {
        Self::from_fn(grid, |x| (slope * x).min(1.0))
    }

    /// All mass at bid 0.
    pub fn point_at_zero(grid: BidGrid) -> Self {
        Self {
            grid,
            values: vec![1.0; grid.count()],
        }
    }

    /// Cumulative sums of a pmf over the bid grid.
    pub fn from_pmf(pmf: &Pmf<BidAxis>) -> Self {
        let mut values = pmf.cdf();
        clean_cdf(&mut values);
        Self {
            grid: *pmf.grid(),
            values,
        }
    }

    /// Mixture `(1 - lambda) * self + lambda * other`.
    pub fn mix(&self, other: &Self, lambda: f64) -> Result<Self> {
        self.grid.check_same(&other.grid, "cdf mixture")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
            .collect();
        Self::new(self.grid, values)
    }

    #[inline]
    pub fn grid(&self) -> &BidGrid {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Linearly interpolated cdf at `x >= 0`; 1 beyond the grid.
    pub fn eval(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return self.values[0];
        }
        let r = x / self.grid.step();
        let k = r.floor();
        if k >= (self.grid.count() - 1) as f64 {
            return 1.0;
        }
        let k = k as usize;
        let t = r - k as f64;
        let v = self.values[k] + t * (self.values[k + 1] - self.values[k]);
        v.clamp(0.0, 1.0)
    }

    /// `sum_m (1 - rho(x_m)) * step`.
    pub fn mean(&self) -> f64 {
        self.values.iter().map(|v| 1.0 - v).sum::<f64>() * self.grid.step()
    }

    /// Differences of the cdf as a pmf on the bid grid.
    pub fn to_pmf(&self) -> Pmf<BidAxis> {
        let mut prev = 0.0;
        let weights = self
            .values
            .iter()
            .map(|v| {
                let w = v - prev;
                prev = *v;
                w
            })
            .collect();
        Pmf::from_raw(self.grid, weights)
    }

    /// Smallest grid index whose cdf value reaches `u`.
    pub fn quantile_index(&self, u: f64) -> usize {
        self.values
            .partition_point(|v| *v < u)
            .min(self.grid.count() - 1)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        self.grid.point(self.quantile_index(u))
    }

    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_curve(writer, ["bid", "cdf"], self.grid.points(), &self.values)
    }
}

fn clean_cdf(values: &mut [f64]) {
    let mut running = 0.0f64;
    for v in values.iter_mut() {
        running = running.max(v.clamp(0.0, 1.0));
        *v = running;
    }
    if let Some(last) = values.last_mut() {
        *last = 1.0;
    }
}

/// Parametric description of a queue-axis law, as written in configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistSpec {
    Uniform {
        lo: f64,
        hi: f64,
    },
    Point {
        at: f64,
    },
    /// Masses at grid points; `points` must lie on the state grid.
    Tabulated {
        points: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl DistSpec {
    pub fn discretize(&self, grid: StateGrid) -> Result<QueueDist> {
        match self {
            DistSpec::Uniform { lo, hi } => Pmf::discretize_uniform(*lo, *hi, grid),
            DistSpec::Point { at } => {
                if !grid.is_on_grid(*at) {
                    return Err(Error::InvalidDistribution(format!(
                        "point mass at {at} is not a grid point"
                    )));
                }
                Pmf::point_mass(grid, grid.nearest_index(*at))
            }
            DistSpec::Tabulated { points, weights } => {
                if points.len() != weights.len() || points.is_empty() {
                    return Err(Error::InvalidDistribution(
                        "tabulated law needs equally many points and weights".into(),
                    ));
                }
                let mut dense = vec![0.0; grid.count()];
                for (x, w) in points.iter().zip(weights) {
                    if !grid.is_on_grid(*x) {
                        return Err(Error::InvalidDistribution(format!(
                            "tabulated point {x} is not a grid point"
                        )));
                    }
                    dense[grid.nearest_index(*x)] += w;
                }
                Pmf::new(grid, dense)
            }
        }
    }
}

/// A queue-axis law: its parametric form (used for continuous sampling in the
/// simulator) together with its discretization on the state grid (used by the
/// solver).
#[derive(Clone, Debug, PartialEq)]
pub struct Law {
    spec: DistSpec,
    pmf: QueueDist,
}

impl Law {
    pub fn new(spec: DistSpec, grid: StateGrid) -> Result<Self> {
        let pmf = spec.discretize(grid)?;
        Ok(Self { spec, pmf })
    }

    pub fn uniform(lo: f64, hi: f64, grid: StateGrid) -> Result<Self> {
        Self::new(DistSpec::Uniform { lo, hi }, grid)
    }

    pub fn point(at: f64, grid: StateGrid) -> Result<Self> {
        Self::new(DistSpec::Point { at }, grid)
    }

    pub fn tabulated(points: Vec<f64>, weights: Vec<f64>, grid: StateGrid) -> Result<Self> {
        Self::new(DistSpec::Tabulated { points, weights }, grid)
    }

    #[inline]
    pub fn spec(&self) -> &DistSpec {
        &self.spec
    }

    #[inline]
    pub fn pmf(&self) -> &QueueDist {
        &self.pmf
    }

    /// Draws from the continuous law (uniform) or exactly from the atoms
    /// (point, tabulated).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.spec {
            DistSpec::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            DistSpec::Point { at } => *at,
            DistSpec::Tabulated { .. } => {
                let m = self.pmf.index_for_uniform(rng.random::<f64>());
                self.pmf.grid().point(m)
            }
        }
    }
}

/// Writes a two-column curve with a header row. Floats use the shortest
/// representation that round-trips exactly.
pub fn write_curve<W: Write>(
    writer: W,
    header: [&str; 2],
    xs: impl Iterator<Item = f64>,
    ys: &[f64],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for (x, y) in xs.zip(ys) {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a two-column curve written by [`write_curve`].
pub fn read_curve<R: Read>(reader: R) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::Reader::from_reader(reader);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        if record.len() != 2 {
            return Err(Error::InvalidDistribution(format!(
                "row {} has {} columns, expected 2",
                line + 2,
                record.len()
            )));
        }
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| {
                Error::InvalidDistribution(format!("row {}: cannot parse `{s}`: {e}", line + 2))
            })
        };
        xs.push(parse(&record[0])?);
        ys.push(parse(&record[1])?);
    }
    Ok((xs, ys))
}
