//! Riccati and mean-ODE oracles for linear-quadratic instances.
//!
//! For `dX = (b0 + A X + B α) dt + Σ dW` and
//! `J = E[∫ ½αᵀRα + ½(X − h)ᵀQ(X − h) dt + ½(X_T − h_T)ᵀQ_T(X_T − h_T)]`
//! the value is `½xᵀP x + sᵀx + r` with
//!
//! ```text
//! −Ṗ = AᵀP + PA − P S P + Q,             P(T) = Q_T,   S = B R⁻¹ Bᵀ
//! −ṡ = (A − S P)ᵀ s + P b0 − Q h,        s(T) = −Q_T h_T
//! −ṙ = ½ tr(ΣΣᵀP) + sᵀb0 − ½ sᵀS s + ½ hᵀQ h,   r(T) = ½ h_TᵀQ_T h_T
//! ```
//!
//! and the optimally controlled mean solves `ṁ = (A − S P) m − S s + b0`.

use std::sync::Arc;

use crate::measures::TimeGrid;
use crate::model::{Cooperation, InitialLaw, Matrix, PopulationSpec, Vector};

use super::FbsdeError;

/// Integration substeps per grid step.
pub const REFINEMENT: usize = 10;
/// Norm of `P` beyond which the Riccati solution is declared blown up.
pub const BLOWUP_NORM: f64 = 1e8;

pub type TargetFn = Arc<dyn Fn(f64) -> Vector + Send + Sync>;

#[derive(Clone)]
pub struct LqSpec {
    pub a: Matrix,
    pub b: Matrix,
    pub b0: Vector,
    pub sigma: Matrix,
    pub r: Matrix,
    pub q: Matrix,
    pub qt: Matrix,
    /// Tracking target `h(t)`.
    pub target: TargetFn,
    pub x0_mean: Vector,
    /// `E[X_0 X_0ᵀ]`.
    pub x0_second: Matrix,
}

/// Mean and second-moment matrix of the built-in initial laws.
pub fn law_moments(law: &InitialLaw) -> Result<(Vector, Matrix), FbsdeError> {
    match law {
        InitialLaw::Gaussian { mean, cov_sqrt } => Ok((mean.clone(), cov_sqrt * cov_sqrt.transpose() + mean * mean.transpose())),
        InitialLaw::PointMass(v) => Ok((v.clone(), v * v.transpose())),
        InitialLaw::Uniform { lower, upper } => {
            let mean = (lower + upper) / 2.0;
            let mut second = &mean * mean.transpose();
            for j in 0..lower.len() {
                second[(j, j)] += (upper[j] - lower[j]).powi(2) / 12.0;
            }
            Ok((mean, second))
        }
        InitialLaw::Mixture(parts) => {
            let total: f64 = parts.iter().map(|(w, _)| w).sum();
            let d = law.dim();
            let mut mean = Vector::zeros(d);
            let mut second = Matrix::zeros(d, d);
            for (w, l) in parts {
                let (m, s) = law_moments(l)?;
                mean += m * (w / total);
                second += s * (w / total);
            }
            Ok((mean, second))
        }
        InitialLaw::Custom { .. } => Err(FbsdeError::Oracle("custom initial laws have no closed-form moments".into())),
    }
}

impl LqSpec {
    /// Oracle input for an LQ population whose coefficients ignore all measures.
    pub fn from_population(pop: &PopulationSpec) -> Result<Self, FbsdeError> {
        let lq = pop
            .lq
            .as_ref()
            .ok_or_else(|| FbsdeError::Oracle(format!("population {} is not linear-quadratic", pop.name)))?;
        let zero = |m: &Matrix| m.iter().all(|v| *v == 0.0);
        let coupled = !zero(&lq.own_target)
            || !zero(&lq.own_mean_drift)
            || lq.measure_gain != 0.0
            || lq.others.iter().any(|c| !zero(&c.drift) || !zero(&c.target));
        if coupled {
            return Err(FbsdeError::Oracle(format!(
                "population {} has measure coupling; use the coupled mean oracles",
                pop.name
            )));
        }
        if !pop.actions.is_full() {
            return Err(FbsdeError::Oracle("the Riccati oracle needs an unconstrained action set".into()));
        }
        let (x0_mean, x0_second) = law_moments(&lq.initial_law)?;
        let d = lq.dim();
        Ok(Self {
            a: lq.a.clone(),
            b: lq.b.clone(),
            b0: lq.b0.clone(),
            sigma: lq.sigma.clone(),
            r: lq.r.clone(),
            q: lq.q.clone(),
            qt: lq.qt.clone(),
            target: Arc::new(move |_| Vector::zeros(d)),
            x0_mean,
            x0_second,
        })
    }

    pub fn with_target(mut self, target: TargetFn) -> Self {
        self.target = target;
        self
    }

    fn s_matrix(&self) -> Result<Matrix, FbsdeError> {
        let r_inv = self
            .r
            .clone()
            .cholesky()
            .ok_or_else(|| FbsdeError::Oracle("R must be positive definite".into()))?
            .inverse();
        Ok(&self.b * r_inv * self.b.transpose())
    }
}

/// Riccati solution sampled on the fine integration grid.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    /// Fine times `t_0 < … < t_{REFINEMENT·N}`.
    pub times: Vec<f64>,
    pub p: Vec<Matrix>,
    pub s: Vec<Vector>,
    pub r: Vec<f64>,
    pub mean: Vec<Vector>,
    pub value: f64,
}

impl RiccatiSolution {
    pub fn p_knot(&self, k: usize) -> &Matrix {
        &self.p[k * REFINEMENT]
    }

    pub fn s_knot(&self, k: usize) -> &Vector {
        &self.s[k * REFINEMENT]
    }

    pub fn mean_knot(&self, k: usize) -> &Vector {
        &self.mean[k * REFINEMENT]
    }

    /// `P(t)` by linear interpolation on the fine grid.
    pub fn p_at(&self, t: f64) -> Matrix {
        interpolate(&self.times, &self.p, t)
    }

    pub fn mean_at(&self, t: f64) -> Vector {
        interpolate(&self.times, &self.mean, t)
    }

    /// Adjoint `Y = P x + s` at grid knot `k`.
    pub fn adjoint(&self, k: usize, x: &Vector) -> Vector {
        self.p_knot(k) * x + self.s_knot(k)
    }
}

fn interpolate<T>(times: &[f64], values: &[T], t: f64) -> T
where
    T: Clone + std::ops::Mul<f64, Output = T> + std::ops::Add<T, Output = T>,
{
    let last = times.len() - 1;
    if t <= times[0] {
        return values[0].clone();
    }
    if t >= times[last] {
        return values[last].clone();
    }
    let h = times[1] - times[0];
    let i = (((t - times[0]) / h).floor() as usize).min(last - 1);
    let w = (t - times[i]) / h;
    values[i].clone() * (1.0 - w) + values[i + 1].clone() * w
}

fn rk4<T>(y: &T, t: f64, h: f64, f: &impl Fn(f64, &T) -> T) -> T
where
    T: Clone + std::ops::Add<T, Output = T> + std::ops::Mul<f64, Output = T>,
{
    let k1 = f(t, y);
    let k2 = f(t + h / 2.0, &(y.clone() + k1.clone() * (h / 2.0)));
    let k3 = f(t + h / 2.0, &(y.clone() + k2.clone() * (h / 2.0)));
    let k4 = f(t + h, &(y.clone() + k3.clone() * h));
    y.clone() + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// RK4 integration of the Riccati system backward and the mean ODE forward,
/// on `grid` refined `REFINEMENT` times.
pub fn solve_lq_riccati(lq: &LqSpec, grid: &TimeGrid) -> Result<RiccatiSolution, FbsdeError> {
    let d = lq.a.nrows();
    let s_mat = lq.s_matrix()?;
    let fine = grid.steps() * REFINEMENT;
    let h = grid.horizon() / fine as f64;
    let times: Vec<f64> = (0..=fine).map(|j| j as f64 * h).collect();
    let sigma_sq = &lq.sigma * lq.sigma.transpose();

    // state (P, s, r) packed into one (d + 2) × d matrix:
    // rows 0..d hold P, row d holds sᵀ, entry (d+1, 0) holds r
    let pack = |p: &Matrix, s: &Vector, r: f64| {
        let mut m = Matrix::zeros(d + 2, d);
        m.rows_mut(0, d).copy_from(p);
        m.row_mut(d).copy_from(&s.transpose());
        m[(d + 1, 0)] = r;
        m
    };
    let rhs = |t: f64, m: &Matrix| {
        let p = m.rows(0, d).into_owned();
        let s = m.row(d).transpose();
        let ht = (lq.target)(t);
        let closed = &lq.a - &s_mat * &p;
        // d/dt, so signs are flipped relative to the module docs
        let dp = -(lq.a.transpose() * &p + &p * &lq.a - &p * &s_mat * &p + &lq.q);
        let ds = -(closed.transpose() * &s + &p * &lq.b0 - &lq.q * &ht);
        let dr = -(0.5 * (&sigma_sq * &p).trace() + s.dot(&lq.b0) - 0.5 * s.dot(&(&s_mat * &s))
            + 0.5 * ht.dot(&(&lq.q * &ht)));
        pack(&dp, &ds, dr)
    };
    let h_t = (lq.target)(grid.horizon());
    let mut state = pack(&lq.qt, &(-(&lq.qt * &h_t)), 0.5 * h_t.dot(&(&lq.qt * &h_t)));
    let mut packed = vec![state.clone(); fine + 1];
    for j in (0..fine).rev() {
        state = rk4(&state, times[j + 1], -h, &rhs);
        let p_norm = state.rows(0, d).norm();
        if !p_norm.is_finite() || p_norm > BLOWUP_NORM {
            return Err(FbsdeError::HorizonTooLong { time: times[j] });
        }
        packed[j] = state.clone();
    }
    let p: Vec<Matrix> = packed.iter().map(|m| m.rows(0, d).into_owned()).collect();
    let s: Vec<Vector> = packed.iter().map(|m| m.row(d).transpose()).collect();
    let r: Vec<f64> = packed.iter().map(|m| m[(d + 1, 0)]).collect();

    // mean ODE; P and s at half steps by averaging neighbours
    let mut mean = Vec::with_capacity(fine + 1);
    let mut m = lq.x0_mean.clone();
    mean.push(m.clone());
    for j in 0..fine {
        let field = |t: f64, m: &Vector| {
            let w = ((t - times[j]) / h).clamp(0.0, 1.0);
            let pt = &p[j] * (1.0 - w) + &p[j + 1] * w;
            let st = &s[j] * (1.0 - w) + &s[j + 1] * w;
            (&lq.a - &s_mat * &pt) * m - &s_mat * st + &lq.b0
        };
        m = rk4(&m, times[j], h, &field);
        mean.push(m.clone());
    }
    let value = 0.5 * (&p[0] * &lq.x0_second).trace() + s[0].dot(&lq.x0_mean) + r[0];
    Ok(RiccatiSolution {
        grid: *grid,
        times,
        p,
        s,
        r,
        mean,
        value,
    })
}

/// Equilibrium mean paths of competitive scalar LQ populations coupled
/// through their means, sampled at the grid knots.
///
/// Each population solves its own Riccati equation; the means and the
/// linear terms then satisfy a linear two-point boundary problem, solved by
/// superposition over the unknown initial linear terms.
pub fn coupled_scalar_means(pops: &[&PopulationSpec], grid: &TimeGrid) -> Result<Vec<Vec<f64>>, FbsdeError> {
    let n = pops.len();
    let mut lqs = Vec::with_capacity(n);
    for p in pops {
        let lq = p
            .lq
            .as_ref()
            .ok_or_else(|| FbsdeError::Oracle(format!("population {} is not linear-quadratic", p.name)))?;
        if lq.dim() != 1 || lq.control_dim() != 1 || lq.cooperation != Cooperation::Competitive || lq.measure_gain != 0.0
        {
            return Err(FbsdeError::Oracle(
                "coupled mean oracle needs scalar competitive populations with measure-free b1".into(),
            ));
        }
        if !p.actions.is_full() {
            return Err(FbsdeError::Oracle("coupled mean oracle needs unconstrained actions".into()));
        }
        if lq.others.len() != n - 1 {
            return Err(FbsdeError::Oracle("coupling list does not match the population count".into()));
        }
        lqs.push(lq);
    }
    // per-population scalars and the coupling matrices over the full mean vector
    let sc = |m: &Matrix| m[(0, 0)];
    let mut drift_c = Matrix::zeros(n, n);
    let mut target_c = Matrix::zeros(n, n);
    for (i, lq) in lqs.iter().enumerate() {
        drift_c[(i, i)] = sc(&lq.own_mean_drift);
        target_c[(i, i)] = sc(&lq.own_target);
        let mut slot = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            drift_c[(i, j)] = sc(&lq.others[slot].drift);
            target_c[(i, j)] = sc(&lq.others[slot].target);
            slot += 1;
        }
    }
    let a: Vec<f64> = lqs.iter().map(|l| sc(&l.a)).collect();
    let smat: Vec<f64> = lqs.iter().map(|l| sc(&l.b).powi(2) / sc(&l.r)).collect();
    let q: Vec<f64> = lqs.iter().map(|l| sc(&l.q)).collect();
    let qt: Vec<f64> = lqs.iter().map(|l| sc(&l.qt)).collect();
    let b0: Vec<f64> = lqs.iter().map(|l| l.b0[0]).collect();
    let m0: Vec<f64> = lqs
        .iter()
        .map(|l| law_moments(&l.initial_law).map(|(m, _)| m[0]))
        .collect::<Result<_, _>>()?;

    let fine = grid.steps() * REFINEMENT;
    let h = grid.horizon() / fine as f64;
    let times: Vec<f64> = (0..=fine).map(|j| j as f64 * h).collect();

    // Riccati per population, backward
    let mut p_path = vec![Vector::from_vec(qt.clone()); fine + 1];
    let riccati = |_t: f64, p: &Vector| {
        Vector::from_fn(n, |i, _| -(2.0 * a[i] * p[i] - smat[i] * p[i] * p[i] + q[i]))
    };
    for j in (0..fine).rev() {
        let next = rk4(&p_path[j + 1], times[j + 1], -h, &riccati);
        if next.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_NORM) {
            return Err(FbsdeError::HorizonTooLong { time: times[j] });
        }
        p_path[j] = next;
    }

    // forward linear system in z = (m, s)
    let flow = |j: usize, z: &Vector, t: f64| {
        let w = ((t - times[j]) / h).clamp(0.0, 1.0);
        let p = &p_path[j] * (1.0 - w) + &p_path[j + 1] * w;
        let m = z.rows(0, n).into_owned();
        let s = z.rows(n, n).into_owned();
        let hv = &target_c * &m;
        let shared = &drift_c * &m;
        let mut out = Vector::zeros(2 * n);
        for i in 0..n {
            let closed = a[i] - smat[i] * p[i];
            let b0_eff = b0[i] + shared[i];
            out[i] = closed * m[i] - smat[i] * s[i] + b0_eff;
            out[n + i] = -(closed * s[i] + p[i] * b0_eff - q[i] * hv[i]);
        }
        out
    };
    let integrate = |s0: &Vector, m_init: &[f64]| {
        let mut z = Vector::zeros(2 * n);
        for i in 0..n {
            z[i] = m_init[i];
            z[n + i] = s0[i];
        }
        let mut path = vec![z.clone()];
        for j in 0..fine {
            z = rk4(&z, times[j], h, &|t, y| flow(j, y, t));
            path.push(z.clone());
        }
        path
    };
    // terminal residual s(T) + Q_T h(T), affine in s(0)
    let residual = |path: &[Vector]| {
        let z = path.last().expect("non-empty path");
        let m = z.rows(0, n).into_owned();
        let hv = &target_c * &m;
        Vector::from_fn(n, |i, _| z[n + i] + qt[i] * hv[i])
    };
    let base = residual(&integrate(&Vector::zeros(n), &m0));
    let mut jac = Matrix::zeros(n, n);
    for c in 0..n {
        let mut e = Vector::zeros(n);
        e[c] = 1.0;
        let col = residual(&integrate(&e, &m0)) - &base;
        jac.set_column(c, &col);
    }
    let s0 = jac
        .lu()
        .solve(&(-base))
        .ok_or_else(|| FbsdeError::Oracle("coupled mean boundary problem is singular".into()))?;
    let path = integrate(&s0, &m0);
    Ok((0..n)
        .map(|i| (0..=grid.steps()).map(|k| path[k * REFINEMENT][i]).collect())
        .collect())
}

/// Scalar mean-field control oracle for `dX = α dt + σ dW`,
/// `f = ½α² + ½q(x − c·E X)²`, `g = ½q_T(x − c·E X)²`.
///
/// The adjoint is `Y = P (X − E X) + R E X` with
/// `Ṗ = P² − q`, `P(T) = q_T`, `Ṙ = R² − q(1 − c)²`, `R(T) = q_T(1 − c)²`
/// and the mean solves `ṁ = −R m`.
#[derive(Debug, Clone)]
pub struct ScalarMftc {
    pub p: Vec<f64>,
    pub r: Vec<f64>,
    pub mean: Vec<f64>,
}

pub fn mftc_scalar(q: f64, qt: f64, c: f64, m0: f64, grid: &TimeGrid) -> Result<ScalarMftc, FbsdeError> {
    let fine = grid.steps() * REFINEMENT;
    let h = grid.horizon() / fine as f64;
    let k2 = q * (1.0 - c).powi(2);
    let mut pr = vec![Vector::from_vec(vec![qt, qt * (1.0 - c).powi(2)]); fine + 1];
    let rhs = |_t: f64, v: &Vector| Vector::from_vec(vec![v[0] * v[0] - q, v[1] * v[1] - k2]);
    for j in (0..fine).rev() {
        let next = rk4(&pr[j + 1], (j + 1) as f64 * h, -h, &rhs);
        if next.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_NORM) {
            return Err(FbsdeError::HorizonTooLong { time: j as f64 * h });
        }
        pr[j] = next;
    }
    let mut mean = vec![m0];
    let mut m = Vector::from_element(1, m0);
    for j in 0..fine {
        let field = |t: f64, m: &Vector| {
            let w = ((t - j as f64 * h) / h).clamp(0.0, 1.0);
            let r = pr[j][1] * (1.0 - w) + pr[j + 1][1] * w;
            m * (-r)
        };
        m = rk4(&m, j as f64 * h, h, &field);
        mean.push(m[0]);
    }
    let knots = grid.knots();
    Ok(ScalarMftc {
        p: (0..knots).map(|k| pr[k * REFINEMENT][0]).collect(),
        r: (0..knots).map(|k| pr[k * REFINEMENT][1]).collect(),
        mean: (0..knots).map(|k| mean[k * REFINEMENT]).collect(),
    })
}
