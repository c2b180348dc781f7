//! Reduced Hamiltonian, its minimizer over the action set, and adjoint drivers.
//!
//! A [`KnotHamiltonian`] freezes time and measure arguments for one
//! population: all measure-dependent matrices are evaluated once, so the
//! per-particle work is pure linear algebra plus calls into the cost closures.
//!
//! Two measure contexts are kept. `raw` feeds `b1`, `b1_bar`, `s1`, `s1_bar`
//! and the own-law mean; `cost_ctx` feeds `b0`, `b2`, `s0` and the costs. They
//! coincide unless the caller truncates the laws (see `fixedpoint::truncated_solve`).

use nalgebra::Cholesky;
use thiserror::Error;

use crate::model::{
    ActionKind, Cooperation, LDerivative, MeasureContext, Matrix, ModelConstants, PopulationSpec, Vector,
};

/// Projected-gradient stopping threshold on the gradient-map norm.
pub const MINIMIZER_TOL: f64 = 1e-10;
pub const MINIMIZER_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HamiltonianError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(
        "minimizer did not converge in {iterations} iterations (gradient-map residual {residual:.3e}); \
         the declared convexity or Lipschitz constant is likely wrong"
    )]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("the measure derivative of the Hamiltonian is only defined for cooperative populations")]
    NotCooperative,
}

enum QuadraticPath {
    /// `α̂ = −Q⁻¹(b2ᵀy + ℓ)`.
    Full { q_inv: Matrix, q_inv_b2t: Matrix },
    /// Diagonal `Q` on a box: clamp the unconstrained solution.
    DiagonalBox { diag: Vector },
    /// Other quadratic cases use projected gradient with step `1/‖Q‖`.
    Projected { q: Matrix, step: f64 },
}

/// Hamiltonian data of population `i` at one time knot.
pub struct KnotHamiltonian<'a> {
    pub pop: &'a PopulationSpec,
    pub raw: MeasureContext<'a>,
    pub cost_ctx: MeasureContext<'a>,
    pub b0: Vector,
    pub b1: Matrix,
    pub b1_bar: Option<Matrix>,
    pub b2: Matrix,
    pub s0: Matrix,
    pub s1: Vec<Matrix>,
    pub s1_bar: Option<Vec<Matrix>>,
    constants: ModelConstants,
    drift_const: Vector,
    sigma_const: Matrix,
    b1t: Matrix,
    b2t: Matrix,
    b2_norm: f64,
    quadratic: Option<QuadraticPath>,
}

fn check_shape(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<(), HamiltonianError> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(HamiltonianError::Dimension(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn is_diagonal(q: &Matrix) -> bool {
    (0..q.nrows()).all(|i| (0..q.ncols()).all(|j| i == j || q[(i, j)] == 0.0))
}

/// `[tr(m[l]ᵀ z)]_l`.
fn trace_contract(m: &[Matrix], z: &Matrix) -> Vector {
    Vector::from_iterator(m.len(), m.iter().map(|ml| ml.dot(z)))
}

impl<'a> KnotHamiltonian<'a> {
    pub fn new(
        pop: &'a PopulationSpec,
        raw: MeasureContext<'a>,
        cost_ctx: Option<MeasureContext<'a>>,
        constants: ModelConstants,
    ) -> Result<Self, HamiltonianError> {
        let d = pop.state_dim;
        let k = pop.control_dim();
        let cost_ctx = cost_ctx.unwrap_or_else(|| raw.clone());
        let b0 = (pop.drift.b0)(&cost_ctx);
        let b1 = (pop.drift.b1)(&raw);
        let b2 = (pop.drift.b2)(&cost_ctx);
        let b1_bar = pop.drift.b1_bar.as_ref().map(|f| f(&raw));
        let s0 = (pop.diffusion.s0)(&cost_ctx);
        let s1 = pop
            .diffusion
            .s1
            .as_ref()
            .map(|f| f(&raw))
            .unwrap_or_default();
        let s1_bar = pop.diffusion.s1_bar.as_ref().map(|f| f(&raw));
        if b0.len() != d {
            return Err(HamiltonianError::Dimension(format!("b0 has length {}, expected {d}", b0.len())));
        }
        check_shape("b1", &b1, d, d)?;
        check_shape("b2", &b2, d, k)?;
        check_shape("s0", &s0, d, d)?;
        if let Some(m) = &b1_bar {
            check_shape("b1_bar", m, d, d)?;
        }
        for (name, list) in [("s1", Some(&s1)), ("s1_bar", s1_bar.as_ref())] {
            if let Some(list) = list {
                if !list.is_empty() && list.len() != d {
                    return Err(HamiltonianError::Dimension(format!("{name} must hold {d} matrices")));
                }
                for m in list {
                    check_shape(name, m, d, d)?;
                }
            }
        }
        let own_mean = raw.own.mean().clone();
        let mut drift_const = b0.clone();
        if let Some(m) = &b1_bar {
            drift_const += m * &own_mean;
        }
        let mut sigma_const = s0.clone();
        if let Some(list) = &s1_bar {
            for (l, m) in list.iter().enumerate() {
                sigma_const += m * own_mean[l];
            }
        }
        let quadratic = match &pop.costs.quadratic {
            None => None,
            Some(qc) => {
                let q = &qc.hessian;
                match pop.actions.kind() {
                    ActionKind::Full => {
                        let chol = Cholesky::new(q.clone()).ok_or_else(|| {
                            HamiltonianError::Dimension("quadratic control Hessian is not positive definite".into())
                        })?;
                        let q_inv = chol.inverse();
                        let q_inv_b2t = &q_inv * b2.transpose();
                        Some(QuadraticPath::Full { q_inv, q_inv_b2t })
                    }
                    ActionKind::Box { .. } if is_diagonal(q) => Some(QuadraticPath::DiagonalBox { diag: q.diagonal() }),
                    _ => {
                        let l = q.clone().symmetric_eigen().eigenvalues.max().max(1e-12);
                        Some(QuadraticPath::Projected { q: q.clone(), step: 1.0 / l })
                    }
                }
            }
        };
        let b2_norm = b2.norm();
        Ok(Self {
            pop,
            b1t: b1.transpose(),
            b2t: b2.transpose(),
            raw,
            cost_ctx,
            b0,
            b1,
            b1_bar,
            b2,
            s0,
            s1,
            s1_bar,
            constants,
            drift_const,
            sigma_const,
            b2_norm,
            quadratic,
        })
    }

    pub fn t(&self) -> f64 {
        self.raw.t
    }

    pub fn b2_norm(&self) -> f64 {
        self.b2_norm
    }

    pub fn drift(&self, x: &Vector, alpha: &Vector) -> Vector {
        &self.drift_const + &self.b1 * x + &self.b2 * alpha
    }

    pub fn sigma(&self, x: &Vector) -> Matrix {
        let mut s = self.sigma_const.clone();
        for (l, m) in self.s1.iter().enumerate() {
            s += m * x[l];
        }
        s
    }

    /// `σ` does not depend on the state.
    pub fn additive_noise(&self) -> bool {
        self.s1.is_empty() || self.s1.iter().all(|m| m.iter().all(|v| *v == 0.0))
    }

    pub fn running_cost(&self, x: &Vector, alpha: &Vector) -> f64 {
        (self.pop.costs.f)(&self.cost_ctx, x, alpha)
    }

    pub fn terminal_cost(&self, x: &Vector) -> f64 {
        (self.pop.costs.g)(&self.cost_ctx, x)
    }

    pub fn terminal_gradient(&self, x: &Vector) -> Vector {
        (self.pop.costs.dg_dx)(&self.cost_ctx, x)
    }

    /// `H^(r) = ⟨b, y⟩ + f`.
    pub fn reduced(&self, x: &Vector, y: &Vector, alpha: &Vector) -> Result<f64, HamiltonianError> {
        self.check_args(x, y, alpha)?;
        Ok(self.drift(x, alpha).dot(y) + self.running_cost(x, alpha))
    }

    /// `H = ⟨b, y⟩ + tr(σᵀ z) + f`.
    pub fn full(&self, x: &Vector, y: &Vector, z: &Matrix, alpha: &Vector) -> Result<f64, HamiltonianError> {
        Ok(self.reduced(x, y, alpha)? + self.sigma(x).dot(z))
    }

    fn check_args(&self, x: &Vector, y: &Vector, alpha: &Vector) -> Result<(), HamiltonianError> {
        let d = self.pop.state_dim;
        let k = self.pop.control_dim();
        if x.len() != d || y.len() != d || alpha.len() != k {
            return Err(HamiltonianError::Dimension(format!(
                "x, y, alpha have lengths {}, {}, {}; expected {d}, {d}, {k}",
                x.len(),
                y.len(),
                alpha.len()
            )));
        }
        Ok(())
    }

    /// `∂_α H^(r) = b2ᵀy + ∂_α f`.
    pub fn grad_alpha(&self, x: &Vector, y: &Vector, alpha: &Vector) -> Vector {
        &self.b2t * y + (self.pop.costs.df_dalpha)(&self.cost_ctx, x, alpha)
    }

    /// Unique minimizer of `α ↦ H^(r)(x, y, α)` over the action set.
    pub fn minimize(&self, x: &Vector, y: &Vector) -> Result<Vector, HamiltonianError> {
        let actions = &self.pop.actions;
        match (&self.quadratic, &self.pop.costs.quadratic) {
            (Some(QuadraticPath::Full { q_inv, q_inv_b2t }), Some(qc)) => {
                let lin = (qc.linear)(&self.cost_ctx, x);
                Ok(-(q_inv_b2t * y) - q_inv * lin)
            }
            (Some(QuadraticPath::DiagonalBox { diag }), Some(qc)) => {
                let lin = &self.b2t * y + (qc.linear)(&self.cost_ctx, x);
                let free = Vector::from_iterator(lin.len(), lin.iter().zip(diag.iter()).map(|(l, q)| -l / q));
                Ok(actions.project(&free))
            }
            (Some(QuadraticPath::Projected { q, step }), Some(qc)) => {
                let lin = &self.b2t * y + (qc.linear)(&self.cost_ctx, x);
                projected_gradient(actions, *step, |a| q * a + &lin)
            }
            _ => self.minimize_iterative(x, y),
        }
    }

    /// Projected gradient with step `1/(λ + L)`, ignoring any quadratic fast path.
    pub fn minimize_iterative(&self, x: &Vector, y: &Vector) -> Result<Vector, HamiltonianError> {
        let step = 1.0 / (self.constants.convexity_lambda + self.constants.lipschitz_l);
        let b2ty = &self.b2t * y;
        projected_gradient(&self.pop.actions, step, |a| {
            &b2ty + (self.pop.costs.df_dalpha)(&self.cost_ctx, x, a)
        })
    }

    /// `∂_x H = b1ᵀy + [tr(s1[l]ᵀ z)]_l + ∂_x f`.
    pub fn dx(&self, x: &Vector, y: &Vector, z: &Matrix, alpha: &Vector) -> Vector {
        let mut out = &self.b1t * y + (self.pop.costs.df_dx)(&self.cost_ctx, x, alpha);
        if !self.s1.is_empty() {
            out += trace_contract(&self.s1, z);
        }
        out
    }

    /// Mean-field part of the MKV driver:
    /// `b1_barᵀ E[Y] + [tr(s1_bar[l]ᵀ E[Z])]_l + copy_average`.
    pub fn dmu(&self, mean_y: &Vector, mean_z: &Matrix, copy_average: &Vector) -> Result<Vector, HamiltonianError> {
        if self.pop.cooperation != Cooperation::Cooperative {
            return Err(HamiltonianError::NotCooperative);
        }
        let mut out = copy_average.clone();
        if let Some(m) = &self.b1_bar {
            out += m.transpose() * mean_y;
        }
        if let Some(list) = &self.s1_bar {
            out += trace_contract(list, mean_z);
        }
        Ok(out)
    }

    /// `Ẽ[∂_μ f(t, x̃, μ, ν, α̃)(v)]` over the supplied copy particles.
    pub fn copy_average(&self, copies_x: &[Vector], copies_alpha: &[Vector], v: &Vector) -> Vector {
        let d = self.pop.state_dim;
        match &self.pop.costs.df_dmu {
            None => Vector::zeros(d),
            Some(ld) => average_l_derivative(ld, &self.cost_ctx, copies_x, copies_alpha, v, d),
        }
    }

    /// Explicit growth bound `λ⁻¹(|b2||y| + |∂_α f(x, 0_A)|)` on `|α̂ − 0_A|`.
    pub fn growth_bound(&self, x: &Vector, y: &Vector) -> f64 {
        let anchor = self.pop.actions.anchor();
        let grad = (self.pop.costs.df_dalpha)(&self.cost_ctx, x, anchor);
        (self.b2_norm * y.norm() + grad.norm()) / self.constants.convexity_lambda
    }

    pub fn constants(&self) -> &ModelConstants {
        &self.constants
    }
}

/// Average of an L-derivative over copy particles, evaluated at `v`.
pub fn average_l_derivative(
    ld: &LDerivative,
    ctx: &MeasureContext,
    copies_x: &[Vector],
    copies_alpha: &[Vector],
    v: &Vector,
    d: usize,
) -> Vector {
    let mut acc = Vector::zeros(d);
    if copies_x.is_empty() {
        return acc;
    }
    let empty = Vector::zeros(0);
    for (q, x) in copies_x.iter().enumerate() {
        let a = copies_alpha.get(q).unwrap_or(&empty);
        acc += ld.eval(ctx, x, a, v);
    }
    acc / copies_x.len() as f64
}

fn projected_gradient(
    actions: &crate::model::ActionSet,
    step: f64,
    grad: impl Fn(&Vector) -> Vector,
) -> Result<Vector, HamiltonianError> {
    let mut a = actions.project(actions.anchor());
    let mut residual = f64::INFINITY;
    for _ in 0..MINIMIZER_MAX_ITER {
        let next = actions.project(&(&a - grad(&a) * step));
        residual = (&next - &a).norm() / step;
        a = next;
        if residual <= MINIMIZER_TOL {
            return Ok(a);
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(HamiltonianError::NonConvergence {
        iterations: MINIMIZER_MAX_ITER,
        residual,
    })
}
