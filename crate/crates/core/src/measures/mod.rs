//! Empirical probability measures on R^d and their time-indexed flows.
//!
//! A [`ParticleCloud`] is a uniform-weight empirical measure. Its mean and
//! second moment are cached at construction and summed in lexicographic
//! particle order, so two clouds holding the same multiset of points have
//! bit-identical moments regardless of particle ordering.

pub mod io;

use std::cmp::Ordering;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::SeedStream;

/// Default number of random directions used by the sliced estimator.
pub const DEFAULT_PROJECTIONS: usize = 64;

/// Seed used by [`w2`] when it falls back to the sliced estimator.
const FLOW_DISTANCE_SEED: u64 = 0x5eed_f10e;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("a particle cloud needs at least one particle")]
    Empty,
    #[error("particle {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("point buffer of length {len} is not a multiple of dimension {dim}")]
    Shape { len: usize, dim: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },
    #[error("exact 1D distance requested for dimension {0}")]
    NotOneDimensional(usize),
    #[error("sliced estimator needs at least one projection")]
    NoProjections,
    #[error("truncation level must be positive, got {0}")]
    TruncationLevel(f64),
    #[error("time grids differ")]
    GridMismatch,
    #[error("flow has {clouds} clouds for a grid with {knots} knots")]
    FlowLength { clouds: usize, knots: usize },
    #[error("time grid needs a positive horizon and at least one step")]
    BadGrid,
}

/// Uniform grid `0 = t_0 < ... < t_N = T`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, MeasureError> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
            return Err(MeasureError::BadGrid);
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn knots(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.knots()).map(|k| self.time(k)).collect()
    }

    /// Trapezoidal quadrature weight of knot `k`, in units of `dt`.
    pub fn trapezoid_weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.steps {
            0.5
        } else {
            1.0
        }
    }
}

/// Uniform-weight empirical measure of `n` points in R^d.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    dim: usize,
    points: Vec<f64>,
    mean: DVector<f64>,
    m2: f64,
    sorted_1d: OnceLock<Vec<f64>>,
}

impl PartialEq for ParticleCloud {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.points == other.points
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

impl ParticleCloud {
    /// Builds a cloud from a row-major `n × dim` buffer.
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(MeasureError::Shape {
                len: points.len(),
                dim,
            });
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(MeasureError::Empty);
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(MeasureError::NonFinite { index: pos / dim });
        }
        let mut order: Vec<usize> = (0..n).collect();
        if dim == 1 {
            order.sort_by(|&a, &b| points[a].total_cmp(&points[b]));
        } else {
            order.sort_by(|&a, &b| lex_cmp(&points[a * dim..(a + 1) * dim], &points[b * dim..(b + 1) * dim]));
        }
        let mut mean = DVector::zeros(dim);
        let mut sq = 0.0;
        for &p in &order {
            let row = &points[p * dim..(p + 1) * dim];
            for (j, v) in row.iter().enumerate() {
                mean[j] += v;
                sq += v * v;
            }
        }
        mean /= n as f64;
        let m2 = (sq / n as f64).sqrt();
        let sorted_1d = OnceLock::new();
        if dim == 1 {
            let _ = sorted_1d.set(order.iter().map(|&p| points[p]).collect());
        }
        Ok(Self {
            dim,
            points,
            mean,
            m2,
            sorted_1d,
        })
    }

    pub fn from_rows(rows: &[DVector<f64>]) -> Result<Self, MeasureError> {
        let dim = rows.first().map(|r| r.len()).ok_or(MeasureError::Empty)?;
        let mut points = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(MeasureError::Dimension {
                    left: dim,
                    right: r.len(),
                });
            }
            points.extend(r.iter());
        }
        Self::new(dim, points)
    }

    pub fn from_values(values: &[f64]) -> Result<Self, MeasureError> {
        Self::new(1, values.to_vec())
    }

    pub fn point_mass(at: &DVector<f64>) -> Self {
        Self::new(at.len(), at.iter().copied().collect()).expect("finite point mass")
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, p: usize) -> &[f64] {
        &self.points[p * self.dim..(p + 1) * self.dim]
    }

    pub fn point_vec(&self, p: usize) -> DVector<f64> {
        DVector::from_column_slice(self.point(p))
    }

    /// Row-major `n × d` coordinates.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn into_points(self) -> Vec<f64> {
        self.points
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// `M_2 = (mean |x|^2)^{1/2}`.
    pub fn moment2(&self) -> f64 {
        self.m2
    }

    /// Coordinates in ascending order (d = 1 only).
    pub fn sorted_values(&self) -> Result<&[f64], MeasureError> {
        if self.dim != 1 {
            return Err(MeasureError::NotOneDimensional(self.dim));
        }
        Ok(self.sorted_1d.get_or_init(|| {
            let mut v = self.points.clone();
            v.sort_by(f64::total_cmp);
            v
        }))
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.points)
    }

    pub fn map_points(&self, mut f: impl FnMut(&[f64], &mut [f64])) -> Result<Self, MeasureError> {
        let mut out = vec![0.0; self.points.len()];
        for (src, dst) in self.points.chunks(self.dim).zip(out.chunks_mut(self.dim)) {
            f(src, dst);
        }
        Self::new(self.dim, out)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map_points(|s, d| {
            for (a, b) in s.iter().zip(d) {
                *b = factor * a;
            }
        })
        .expect("scaling a finite cloud by a finite factor")
    }

    pub fn shifted(&self, by: &DVector<f64>) -> Self {
        self.map_points(|s, d| {
            for (j, (a, b)) in s.iter().zip(d).enumerate() {
                *b = a + by[j];
            }
        })
        .expect("shifting a finite cloud")
    }

    /// Projection `<x_p, direction>` of every particle.
    pub fn project(&self, direction: &[f64]) -> Vec<f64> {
        self.points
            .chunks(self.dim)
            .map(|row| row.iter().zip(direction).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Draws `n` particles uniformly with replacement.
    pub fn resample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Self {
        let m = self.len();
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let p = rng.random_range(0..m);
            out.extend_from_slice(self.point(p));
        }
        Self::new(self.dim, out).expect("resampling preserves finiteness")
    }

    /// Keeps the listed particles, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, MeasureError> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &p in indices {
            out.extend_from_slice(self.point(p));
        }
        Self::new(self.dim, out)
    }
}

/// Returns `M_2(μ)`.
pub fn moment2(cloud: &ParticleCloud) -> f64 {
    cloud.moment2()
}

/// Push-forward of the cloud by `x ↦ n x / max(M_2(μ), n)`.
///
/// Clouds with `M_2 ≤ n` are returned unchanged (bit for bit).
pub fn truncate_phi_n(cloud: &ParticleCloud, n: f64) -> Result<ParticleCloud, MeasureError> {
    if !(n > 0.0) {
        return Err(MeasureError::TruncationLevel(n));
    }
    let m2 = cloud.moment2();
    if m2 <= n {
        Ok(cloud.clone())
    } else {
        Ok(cloud.scaled(n / m2))
    }
}

/// Cloud made of the rows of an `N × d` state matrix.
pub fn empirical_from_states(states: &DMatrix<f64>) -> Result<ParticleCloud, MeasureError> {
    let mut points = Vec::with_capacity(states.nrows() * states.ncols());
    for r in 0..states.nrows() {
        points.extend(states.row(r).iter());
    }
    ParticleCloud::new(states.ncols(), points)
}

/// Squared W2 between two sorted samples with uniform weights.
///
/// Equal sizes pair order statistics; otherwise the two quantile functions
/// are merged on the union of their breakpoints, which is exact for
/// piecewise-constant quantiles.
pub fn w2_squared_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        return s / n as f64;
    }
    // Integer breakpoints on the common grid 1/(n m).
    let total = (n * m) as u128;
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos: u128 = 0;
    let mut acc = 0.0;
    while pos < total {
        let next_a = (i as u128 + 1) * m as u128;
        let next_b = (j as u128 + 1) * n as u128;
        let next = next_a.min(next_b);
        let width = (next - pos) as f64;
        let diff = a[i] - b[j];
        acc += width * diff * diff;
        pos = next;
        if next == next_a {
            i += 1;
        }
        if next == next_b {
            j += 1;
        }
    }
    acc / total as f64
}

/// Exact W2 between two one-dimensional clouds.
pub fn wasserstein2_1d(a: &ParticleCloud, b: &ParticleCloud) -> Result<f64, MeasureError> {
    if a.dim() != 1 || b.dim() != 1 {
        if a.dim() != b.dim() {
            return Err(MeasureError::Dimension {
                left: a.dim(),
                right: b.dim(),
            });
        }
        return Err(MeasureError::NotOneDimensional(a.dim()));
    }
    Ok(w2_squared_sorted(a.sorted_values()?, b.sorted_values()?).sqrt())
}

/// Sliced estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicedEstimate {
    /// Square root of the mean squared projected distance.
    pub value: f64,
    /// Mean of squared projected distances.
    pub squared: f64,
    /// Standard error of `squared`.
    pub squared_std_error: f64,
}

pub fn sliced_w2_with_error(
    a: &ParticleCloud,
    b: &ParticleCloud,
    n_projections: usize,
    seed: u64,
) -> Result<SlicedEstimate, MeasureError> {
    if a.dim() != b.dim() {
        return Err(MeasureError::Dimension {
            left: a.dim(),
            right: b.dim(),
        });
    }
    if n_projections == 0 {
        return Err(MeasureError::NoProjections);
    }
    if a.dim() == 1 {
        let sq = w2_squared_sorted(a.sorted_values()?, b.sorted_values()?);
        return Ok(SlicedEstimate {
            value: sq.sqrt(),
            squared: sq,
            squared_std_error: 0.0,
        });
    }
    let d = a.dim();
    let mut rng = SeedStream::new(seed).named("sliced").rng();
    let mut values = Vec::with_capacity(n_projections);
    let mut dir = vec![0.0; d];
    for _ in 0..n_projections {
        let norm = loop {
            for v in dir.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let n: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                break n;
            }
        };
        for v in dir.iter_mut() {
            *v /= norm;
        }
        let mut pa = a.project(&dir);
        let mut pb = b.project(&dir);
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        values.push(w2_squared_sorted(&pa, &pb));
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    Ok(SlicedEstimate {
        value: mean.sqrt(),
        squared: mean,
        squared_std_error: (var / k).sqrt(),
    })
}

/// Sliced W2 estimator; deterministic given `seed`.
pub fn sliced_w2(
    a: &ParticleCloud,
    b: &ParticleCloud,
    n_projections: usize,
    seed: u64,
) -> Result<f64, MeasureError> {
    Ok(sliced_w2_with_error(a, b, n_projections, seed)?.value)
}

/// W2: exact in one dimension, sliced with the default projection count otherwise.
pub fn w2(a: &ParticleCloud, b: &ParticleCloud) -> Result<f64, MeasureError> {
    if a.dim() == 1 && b.dim() == 1 {
        wasserstein2_1d(a, b)
    } else {
        sliced_w2(a, b, DEFAULT_PROJECTIONS, FLOW_DISTANCE_SEED)
    }
}

/// Time-indexed family of clouds on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    grid: TimeGrid,
    clouds: Vec<ParticleCloud>,
}

impl MeasureFlow {
    pub fn new(grid: TimeGrid, clouds: Vec<ParticleCloud>) -> Result<Self, MeasureError> {
        if clouds.len() != grid.knots() {
            return Err(MeasureError::FlowLength {
                clouds: clouds.len(),
                knots: grid.knots(),
            });
        }
        let d = clouds[0].dim();
        if let Some(c) = clouds.iter().find(|c| c.dim() != d) {
            return Err(MeasureError::Dimension {
                left: d,
                right: c.dim(),
            });
        }
        Ok(Self { grid, clouds })
    }

    /// Every knot carries the same cloud.
    pub fn constant(grid: TimeGrid, cloud: ParticleCloud) -> Self {
        Self {
            clouds: vec![cloud; grid.knots()],
            grid,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.clouds[0].dim()
    }

    pub fn at(&self, k: usize) -> &ParticleCloud {
        &self.clouds[k]
    }

    pub fn clouds(&self) -> &[ParticleCloud] {
        &self.clouds
    }

    pub fn into_clouds(self) -> Vec<ParticleCloud> {
        self.clouds
    }

    pub fn means(&self) -> Vec<DVector<f64>> {
        self.clouds.iter().map(|c| c.mean().clone()).collect()
    }

    pub fn map_clouds(
        &self,
        mut f: impl FnMut(usize, &ParticleCloud) -> Result<ParticleCloud, MeasureError>,
    ) -> Result<Self, MeasureError> {
        let clouds = self
            .clouds
            .iter()
            .enumerate()
            .map(|(k, c)| f(k, c))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(self.grid, clouds)
    }

    /// Largest `W2(μ_{t_k}, μ_{t_{k+1}}) / sqrt(dt)` over consecutive knots.
    pub fn holder_constant(&self) -> Result<f64, MeasureError> {
        let sdt = self.grid.dt().sqrt();
        let mut c: f64 = 0.0;
        for pair in self.clouds.windows(2) {
            c = c.max(w2(&pair[0], &pair[1])? / sdt);
        }
        Ok(c)
    }
}

/// `max_k W2(a_k, b_k)`, the discretised sup-in-time distance between flows.
pub fn flow_distance(a: &MeasureFlow, b: &MeasureFlow) -> Result<f64, MeasureError> {
    Ok(knot_distances(a, b)?.into_iter().fold(0.0, f64::max))
}

/// Per-knot W2 between two flows on the same grid.
pub fn knot_distances(a: &MeasureFlow, b: &MeasureFlow) -> Result<Vec<f64>, MeasureError> {
    if a.grid != b.grid {
        return Err(MeasureError::GridMismatch);
    }
    a.clouds
        .iter()
        .zip(&b.clouds)
        .map(|(x, y)| w2(x, y))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn cloud(v: &[f64]) -> ParticleCloud {
        ParticleCloud::from_values(v).unwrap()
    }

    #[test]
    fn moment2_examples() {
        assert_eq!(moment2(&cloud(&[0.0])), 0.0);
        assert_eq!(moment2(&cloud(&[3.0])), 3.0);
        assert_eq!(moment2(&cloud(&[1.0, -1.0])), 1.0);
    }

    #[test]
    fn empty_and_non_finite_clouds_are_rejected() {
        assert_eq!(ParticleCloud::new(1, vec![]), Err(MeasureError::Empty));
        assert_eq!(
            ParticleCloud::new(2, vec![0.0, 1.0, f64::NAN, 0.0]),
            Err(MeasureError::NonFinite { index: 1 })
        );
        assert!(matches!(ParticleCloud::new(2, vec![0.0; 3]), Err(MeasureError::Shape { .. })));
    }

    #[test]
    fn truncation_examples() {
        let out = truncate_phi_n(&cloud(&[3.0]), 1.0).unwrap();
        assert_abs_diff_eq!(out.point(0)[0], 1.0, epsilon = 1e-15);
        let same = truncate_phi_n(&cloud(&[0.5]), 1.0).unwrap();
        assert_eq!(same, cloud(&[0.5]));
        assert_eq!(
            truncate_phi_n(&cloud(&[0.5]), 0.0),
            Err(MeasureError::TruncationLevel(0.0))
        );
    }

    #[test]
    fn truncation_of_random_cloud_matches_recomputed_scale() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<f64> = (0..100).map(|_| 5.0 * rand::Rng::random::<f64>(&mut rng) - 0.5).collect();
        let c = cloud(&pts);
        // independent recomputation of M2
        let m2 = (pts.iter().map(|v| v * v).sum::<f64>() / 100.0).sqrt();
        assert!(m2 > 2.0);
        let out = truncate_phi_n(&c, 2.0).unwrap();
        let out_m2 = (out.points().iter().map(|v| v * v).sum::<f64>() / 100.0).sqrt();
        assert!(out_m2 <= 2.0 + 1e-12);
        for (a, b) in out.points().iter().zip(&pts) {
            assert_abs_diff_eq!(*a, b * 2.0 / m2, epsilon = 1e-12);
        }
    }

    #[test]
    fn w2_1d_examples() {
        assert_eq!(wasserstein2_1d(&cloud(&[0.0]), &cloud(&[1.0])).unwrap(), 1.0);
        assert_eq!(wasserstein2_1d(&cloud(&[0.0, 2.0]), &cloud(&[3.0, 1.0])).unwrap(), 1.0);
        let two_d = ParticleCloud::new(2, vec![0.0, 0.0]).unwrap();
        assert_eq!(
            wasserstein2_1d(&cloud(&[0.0]), &two_d),
            Err(MeasureError::Dimension { left: 1, right: 2 })
        );
    }

    #[test]
    fn unequal_counts_use_quantile_merge() {
        // {0,1} vs {0,0.5,1}: quantile functions differ on (1/3,1/2) by 0.5 and on (1/2,2/3) by 0.5
        let d2 = w2_squared_sorted(&[0.0, 1.0], &[0.0, 0.5, 1.0]);
        assert_abs_diff_eq!(d2, 2.0 * (1.0 / 6.0) * 0.25, epsilon = 1e-15);
        // replicating a cloud leaves the measure unchanged
        let d = w2_squared_sorted(&[0.0, 1.0, 4.0], &[0.0, 0.0, 1.0, 1.0, 4.0, 4.0]);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn sliced_examples() {
        let a = ParticleCloud::new(2, vec![0.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(sliced_w2(&a, &a, 16, 1).unwrap(), 0.0);
        assert_eq!(sliced_w2(&a, &a, 0, 1), Err(MeasureError::NoProjections));
        let x = cloud(&[0.3, -1.0, 2.0]);
        let y = cloud(&[1.0, 0.0, 0.5]);
        assert_eq!(sliced_w2(&x, &y, 8, 9).unwrap(), wasserstein2_1d(&x, &y).unwrap());
    }

    #[test]
    fn flow_distance_examples() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let f = MeasureFlow::new(grid, vec![cloud(&[0.0, 1.0]), cloud(&[1.0, 2.0]), cloud(&[0.0, 0.0])]).unwrap();
        assert_eq!(flow_distance(&f, &f).unwrap(), 0.0);
        let g = MeasureFlow::new(grid, vec![cloud(&[0.0, 1.0]), cloud(&[1.0, 2.0]), cloud(&[1.0, 1.0])]).unwrap();
        assert_eq!(flow_distance(&f, &g).unwrap(), 1.0);
        let other = MeasureFlow::constant(TimeGrid::new(1.0, 3).unwrap(), cloud(&[0.0]));
        assert_eq!(flow_distance(&f, &other), Err(MeasureError::GridMismatch));
    }

    #[test]
    fn empirical_from_states_is_order_insensitive_in_moments() {
        let s1 = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -0.1, 0.3, 7.0, 1e-3]);
        let s2 = DMatrix::from_row_slice(3, 2, &[7.0, 1e-3, 1.0, 2.0, -0.1, 0.3]);
        let a = empirical_from_states(&s1).unwrap();
        let b = empirical_from_states(&s2).unwrap();
        assert_eq!(a.mean(), b.mean());
        assert_eq!(a.moment2(), b.moment2());
        assert_eq!(sliced_w2(&a, &b, 16, 3).unwrap(), 0.0);
        let single = empirical_from_states(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).unwrap();
        assert_eq!(single.len(), 1);
        let dup = empirical_from_states(&DMatrix::from_row_slice(2, 1, &[1.0, 1.0])).unwrap();
        assert_eq!(wasserstein2_1d(&dup, &cloud(&[1.0])).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn w2_is_a_metric_in_1d(
            a in prop::collection::vec(-5.0f64..5.0, 1..12),
            b in prop::collection::vec(-5.0f64..5.0, 1..12),
            c in prop::collection::vec(-5.0f64..5.0, 1..12),
        ) {
            let (a, b, c) = (cloud(&a), cloud(&b), cloud(&c));
            let ab = wasserstein2_1d(&a, &b).unwrap();
            prop_assert_eq!(ab, wasserstein2_1d(&b, &a).unwrap());
            let ac = wasserstein2_1d(&a, &c).unwrap();
            let cb = wasserstein2_1d(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
            prop_assert!(wasserstein2_1d(&a, &a).unwrap() == 0.0);
        }

        #[test]
        fn truncation_caps_moment_and_is_idempotent(
            pts in prop::collection::vec(-10.0f64..10.0, 1..40),
            n in 0.01f64..5.0,
        ) {
            let c = cloud(&pts);
            let once = truncate_phi_n(&c, n).unwrap();
            prop_assert!(once.moment2() <= n * (1.0 + 1e-12));
            let twice = truncate_phi_n(&once, n).unwrap();
            for (x, y) in once.points().iter().zip(twice.points()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn truncation_is_lipschitz_along_small_perturbations(
            pts in prop::collection::vec(-10.0f64..10.0, 2..30),
            eps in 1e-6f64..1e-2,
        ) {
            let c = cloud(&pts);
            let shifted = c.shifted(&DVector::from_element(1, eps));
            let a = truncate_phi_n(&c, 1.0).unwrap();
            let b = truncate_phi_n(&shifted, 1.0).unwrap();
            let d_in = wasserstein2_1d(&c, &shifted).unwrap();
            let d_out = wasserstein2_1d(&a, &b).unwrap();
            // φ_n is 2-Lipschitz for W2 on clouds
            prop_assert!(d_out <= 2.0 * d_in + 1e-12);
        }
    }
}
