//! Linear-quadratic population family.
//!
//! ```text
//! dX = (b0 + A x + M μ̄ + Σ_j N_j ν̄_j + B α) dt + Σ dW
//! f  = ½ αᵀRα + ½ (x − h)ᵀ Q (x − h),   g = ½ (x − h)ᵀ Q_T (x − h)
//! h  = C μ̄ + Σ_j D_j ν̄_j
//! ```
//!
//! For cooperative populations `M` is the mean-of-own-law matrix `b1_bar`;
//! for competitive ones it is folded into `b0`.

use std::sync::Arc;

use super::{
    ActionSet, Cooperation, Costs, Diffusion, Drift, InitialLaw, LDerivative, MeasureContext, Matrix,
    ModelError, PopulationSpec, QuadraticControlCost, Vector,
};

/// Mean coupling to another population, addressed by its position in `ctx.others`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqCoupling {
    pub drift: Matrix,
    pub target: Matrix,
}

#[derive(Clone, Debug)]
pub struct LqPopulation {
    pub a: Matrix,
    pub b: Matrix,
    pub b0: Vector,
    pub own_mean_drift: Matrix,
    pub sigma: Matrix,
    pub r: Matrix,
    pub q: Matrix,
    pub qt: Matrix,
    pub own_target: Matrix,
    pub others: Vec<LqCoupling>,
    /// Makes `b1 = A (1 + gain · tanh M_2(μ))`, breaking measure independence.
    pub measure_gain: f64,
    pub cooperation: Cooperation,
    pub initial_law: InitialLaw,
    pub actions: Option<ActionSet>,
}

impl LqPopulation {
    /// Scalar instance with `A = 0`, `B = R = 1`: `dX = α dt + s dW`,
    /// `f = ½α² + ½q(x − h)²`, `g = ½q_T(x − h)²`.
    pub fn scalar(q: f64, qt: f64, sigma: f64, initial_law: InitialLaw) -> Self {
        let one = Matrix::from_element(1, 1, 1.0);
        Self {
            a: Matrix::zeros(1, 1),
            b: one.clone(),
            b0: Vector::zeros(1),
            own_mean_drift: Matrix::zeros(1, 1),
            sigma: one.clone() * sigma,
            r: one,
            q: Matrix::from_element(1, 1, q),
            qt: Matrix::from_element(1, 1, qt),
            own_target: Matrix::zeros(1, 1),
            others: Vec::new(),
            measure_gain: 0.0,
            cooperation: Cooperation::Competitive,
            initial_law,
            actions: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn check(&self) -> Result<(), ModelError> {
        let d = self.dim();
        let k = self.control_dim();
        let square = |m: &Matrix, n: usize| m.nrows() == n && m.ncols() == n;
        let ok = square(&self.a, d)
            && self.b.nrows() == d
            && self.b0.len() == d
            && square(&self.own_mean_drift, d)
            && square(&self.sigma, d)
            && square(&self.r, k)
            && square(&self.q, d)
            && square(&self.qt, d)
            && square(&self.own_target, d)
            && self.others.iter().all(|c| square(&c.drift, d) && square(&c.target, d))
            && self.initial_law.dim() == d;
        if !ok {
            return Err(ModelError::Invalid("LQ population matrices have inconsistent shapes".into()));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(ModelError::Invalid("LQ control cost R must be positive definite".into()));
        }
        Ok(())
    }

    /// Tracking target `h = C μ̄ + Σ_j D_j ν̄_j`.
    pub fn target(&self, ctx: &MeasureContext) -> Vector {
        let mut h = &self.own_target * ctx.own.mean();
        for (j, c) in self.others.iter().enumerate() {
            h += &c.target * ctx.others[j].mean();
        }
        h
    }

    pub fn to_population(&self, name: impl Into<String>) -> Result<PopulationSpec, ModelError> {
        self.check()?;
        let d = self.dim();
        let k = self.control_dim();
        let cooperative = self.cooperation == Cooperation::Cooperative;
        let me = Arc::new(self.clone());

        let b0 = {
            let me = me.clone();
            Arc::new(move |ctx: &MeasureContext| {
                let mut v = me.b0.clone();
                if !cooperative {
                    v += &me.own_mean_drift * ctx.own.mean();
                }
                for (j, c) in me.others.iter().enumerate() {
                    v += &c.drift * ctx.others[j].mean();
                }
                v
            })
        };
        let b1 = {
            let me = me.clone();
            Arc::new(move |ctx: &MeasureContext| {
                if me.measure_gain == 0.0 {
                    me.a.clone()
                } else {
                    &me.a * (1.0 + me.measure_gain * ctx.own.moment2().tanh())
                }
            })
        };
        let b = me.b.clone();
        let mut drift = Drift::affine(b0, b1, Arc::new(move |_| b.clone()));
        if cooperative {
            let m = me.own_mean_drift.clone();
            drift = drift.with_mean_term(Arc::new(move |_| m.clone()));
        }
        let diffusion = Diffusion::additive(me.sigma.clone());

        let f = {
            let me = me.clone();
            Arc::new(move |ctx: &MeasureContext, x: &Vector, a: &Vector| {
                let e = x - me.target(ctx);
                0.5 * a.dot(&(&me.r * a)) + 0.5 * e.dot(&(&me.q * &e))
            })
        };
        let df_dx = {
            let me = me.clone();
            Arc::new(move |ctx: &MeasureContext, x: &Vector, _a: &Vector| &me.q * (x - me.target(ctx)))
        };
        let df_dalpha = {
            let me = me.clone();
            Arc::new(move |_ctx: &MeasureContext, _x: &Vector, a: &Vector| &me.r * a)
        };
        let g = {
            let me = me.clone();
            Arc::new(move |ctx: &MeasureContext, x: &Vector| {
                let e = x - me.target(ctx);
                0.5 * e.dot(&(&me.qt * &e))
            })
        };
        let dg_dx = {
            let me = me.clone();
            Arc::new(move |ctx: &MeasureContext, x: &Vector| &me.qt * (x - me.target(ctx)))
        };
        let (df_dmu, dg_dmu) = if cooperative {
            let mf = me.clone();
            let mg = me.clone();
            (
                Some(LDerivative::VIndependent(Arc::new(
                    move |ctx: &MeasureContext, x: &Vector, _a: &Vector| {
                        -(mf.own_target.transpose() * (&mf.q * (x - mf.target(ctx))))
                    },
                ))),
                Some(LDerivative::VIndependent(Arc::new(
                    move |ctx: &MeasureContext, x: &Vector, _a: &Vector| {
                        -(mg.own_target.transpose() * (&mg.qt * (x - mg.target(ctx))))
                    },
                ))),
            )
        } else {
            (None, None)
        };
        let quadratic = Some(QuadraticControlCost {
            hessian: me.r.clone(),
            linear: Arc::new(move |_, _| Vector::zeros(k)),
        });
        let actions = me.actions.clone().unwrap_or_else(|| ActionSet::full(k));
        if actions.dim() != k {
            return Err(ModelError::Invalid("action set dimension differs from B".into()));
        }
        Ok(PopulationSpec {
            name: name.into(),
            state_dim: d,
            drift,
            diffusion,
            costs: Costs {
                f,
                df_dx,
                df_dalpha,
                g,
                dg_dx,
                df_dmu,
                dg_dmu,
                quadratic,
            },
            actions,
            cooperation: me.cooperation,
            initial_law: me.initial_law.clone(),
            lq: Some((*me).clone()),
        })
    }
}
