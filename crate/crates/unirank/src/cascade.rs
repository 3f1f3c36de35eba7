//! The disjointly trained baseline: an encoder trained on retrieval alone,
//! then a ranker trained on the encoder's frozen top-k slates.
//!
//! Also home to the convex toy that compares joint and disjoint optima of
//! two coupled quadratics in closed form.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::listwise::LtModel;
use crate::metrics::RankingSystem;
use crate::numerics::Rng;
use crate::pipeline::TwoStage;
use crate::trainer::{fit, ConvergenceLog, SystemKind, TrainingConfig};
use crate::tte::TteModel;
use crate::world::World;

/// Trained cascade. `l1` is frozen for the whole second phase.
#[derive(Clone, Debug)]
pub struct CascadeModel {
    pub l1: TteModel,
    pub l2: LtModel,
    pub log: ConvergenceLog,
}

impl CascadeModel {
    /// Serving pipeline over `world` with slate size `k`.
    pub fn system(&self, world: &World, k: usize) -> Result<TwoStage> {
        TwoStage::new(SystemKind::Cascade.tag(), self.l1.clone(), self.l2.clone(), world, k)
    }
}

/// Retrieval phase for the first half of the steps, ranking phase for the rest.
pub fn train_disjoint(world: &World, config: &TrainingConfig) -> Result<CascadeModel> {
    let f = fit(world, config, SystemKind::Cascade)?;
    Ok(CascadeModel { l1: f.tte, l2: f.lt, log: f.log })
}

/// L1 top-k for `query`, reordered by L2.
pub fn cascade_rank(model: &CascadeModel, world: &World, query: usize, k: usize) -> Result<Vec<usize>> {
    Ok(model.system(world, k)?.rank(world, query)?.ranking)
}

/// Two convex quadratics over a shared `θ = [u; v]`:
/// `L1(u) = ½ (u − a)ᵀ A (u − a)` on the first `a.len()` coordinates and
/// `L2(θ) = ½ (θ − b)ᵀ B (θ − b)` on all of them.
/// The combined objective is `λ1 L1 + λ2 L2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub a_mat: DMatrix<f64>,
    pub a: DVector<f64>,
    pub b_mat: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lambda: [f64; 2],
}

/// Combined loss at both optima.
#[derive(Clone, Debug, PartialEq)]
pub struct JointComparison {
    pub joint: f64,
    pub disjoint: f64,
    pub theta_joint: DVector<f64>,
    pub theta_disjoint: DVector<f64>,
}

fn random_spd(n: usize, rng: &mut Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.normal());
    m.transpose() * &m + DMatrix::identity(n, n) * 0.1
}

impl ToySpec {
    /// Random well-conditioned instance with `n1` retrieval and `n2` ranking coordinates.
    pub fn random(n1: usize, n2: usize, rng: &mut Rng) -> Self {
        let n = n1 + n2;
        Self {
            a_mat: random_spd(n1, rng),
            a: DVector::from_fn(n1, |_, _| rng.normal()),
            b_mat: random_spd(n, rng),
            b: DVector::from_fn(n, |_, _| rng.normal()),
            lambda: [rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0)],
        }
    }

    /// Same instance with `L2`'s minimiser moved so its `u` block equals `a`:
    /// both objectives then share a minimiser.
    pub fn aligned(mut self) -> Self {
        let n1 = self.a.len();
        self.b.rows_mut(0, n1).copy_from(&self.a);
        self
    }

    fn n1(&self) -> usize {
        self.a.len()
    }

    fn validate(&self) -> Result<()> {
        let (n1, n) = (self.a.len(), self.b.len());
        if n1 == 0 || n1 >= n {
            return Err(Error::InvalidArgument(format!("need 0 < dim(u) = {n1} < dim(θ) = {n}")));
        }
        if self.a_mat.shape() != (n1, n1) || self.b_mat.shape() != (n, n) {
            return Err(Error::InvalidArgument("quadratic shapes do not match their centres".into()));
        }
        if self.lambda.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        for (name, m) in [("A", &self.a_mat), ("B", &self.b_mat)] {
            if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                return Err(Error::Degenerate(format!("{name} is not symmetric")));
            }
            if m.clone().cholesky().is_none() {
                return Err(Error::Degenerate(format!("{name} is not positive definite")));
            }
        }
        Ok(())
    }

    pub fn l1(&self, theta: &DVector<f64>) -> f64 {
        let du = theta.rows(0, self.n1()) - &self.a;
        0.5 * du.dot(&(&self.a_mat * &du))
    }

    pub fn l2(&self, theta: &DVector<f64>) -> f64 {
        let d = theta - &self.b;
        0.5 * d.dot(&(&self.b_mat * &d))
    }

    pub fn combined(&self, theta: &DVector<f64>) -> f64 {
        self.lambda[0] * self.l1(theta) + self.lambda[1] * self.l2(theta)
    }
}

/// Closed-form joint and disjoint optima of the combined objective.
///
/// Joint: minimise `λ1 L1 + λ2 L2` over all of `θ`.
/// Disjoint: `u = argmin L1 = a`, then `v = argmin_v L2(a, v)`.
pub fn joint_loss_comparison(spec: &ToySpec) -> Result<JointComparison> {
    spec.validate()?;
    let (n1, n) = (spec.n1(), spec.b.len());
    let [l1, l2] = spec.lambda;

    let mut h = &spec.b_mat * l2;
    let mut rhs = &spec.b_mat * &spec.b * l2;
    {
        let mut block = h.view_mut((0, 0), (n1, n1));
        block += &spec.a_mat * l1;
    }
    {
        let mut top = rhs.rows_mut(0, n1);
        top += &spec.a_mat * &spec.a * l1;
    }
    let theta_joint = h.cholesky().ok_or_else(|| Error::Degenerate("joint Hessian".into()))?.solve(&rhs);

    let b_vv = spec.b_mat.view((n1, n1), (n - n1, n - n1)).into_owned();
    let b_vu = spec.b_mat.view((n1, 0), (n - n1, n1)).into_owned();
    let shift = b_vu * (&spec.a - spec.b.rows(0, n1));
    let chol = b_vv.cholesky().ok_or_else(|| Error::Degenerate("ranking block".into()))?;
    let v = spec.b.rows(n1, n - n1) - chol.solve(&shift);
    let mut theta_disjoint = DVector::zeros(n);
    theta_disjoint.rows_mut(0, n1).copy_from(&spec.a);
    theta_disjoint.rows_mut(n1, n - n1).copy_from(&v);

    Ok(JointComparison {
        joint: spec.combined(&theta_joint),
        disjoint: spec.combined(&theta_disjoint),
        theta_joint,
        theta_disjoint,
    })
}
