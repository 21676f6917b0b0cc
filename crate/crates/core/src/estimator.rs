//! Joint state and input filter with Mahalanobis bad-data detection.
//!
//! One cycle of the filter at step `k`:
//!
//! 1. Stack the previous state estimate `x̂_{k-1}`, the input measurement
//!    `z_{u,k-1}` and the fresh state measurement `z_{x,k}` against the
//!    unknowns `[x_{k-1}; u_{k-1}]` with design
//!    `𝒪 = [[I, 0], [0, D], [C·A_d, C·B_d]]` and block weight
//!    `diag(P_{x,k-1}, R_u, C·Q·Cᵀ + R_x)`, and solve by WLS. This yields the
//!    input estimate `û_{k-1}` and the joint covariance `U`.
//! 2. Test the WLS residual with a Mahalanobis distance.
//! 3. Predict with `[A_d B_d]` and the full joint covariance, then apply a
//!    standard Kalman update with `z_{x,k}`.
//!
//! `z_{x,k}` enters both step 1 and step 3 and the noise `w_{k-1}` is
//! counted in both `E_x` and the prediction covariance. Both are
//! deliberate.
//!
//! The module also carries the two baselines used for comparison: a
//! single-time WLS snapshot and a random-walk tracking filter.

use std::sync::Arc;

use nalgebra::Cholesky;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::model::DiscreteModel;
use crate::numerics::{self, NumericsError};
use crate::{Mat, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl EstimatorError {
    /// True when the error signals unobservable inputs.
    pub fn is_rank_deficient(&self) -> bool {
        matches!(self, EstimatorError::Numerics(NumericsError::RankDeficient { .. }))
    }
}

type Result<T> = std::result::Result<T, EstimatorError>;

fn check_len(name: &'static str, v: &Vector, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(EstimatorError::DimensionMismatch(format!(
            "{name} has length {}, expected {len}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EstimatorError::NonFinite(name));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Bad-data configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// `ζ = sqrt(χ²_{1-α}(dof))`.
    ChiSquare { alpha: f64 },
    Fixed(f64),
}

/// What the filter does with a step whose residual test fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BddPolicy {
    /// Raise the alert but keep the normal update.
    #[default]
    AlertOnly,
    /// Skip the measurement update and carry the prediction forward.
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BddConfig {
    pub threshold: Threshold,
    pub policy: BddPolicy,
}

impl Default for BddConfig {
    fn default() -> Self {
        Self {
            threshold: Threshold::ChiSquare { alpha: 0.01 },
            policy: BddPolicy::AlertOnly,
        }
    }
}

impl Threshold {
    /// Resolves the threshold for a residual with `dof` degrees of freedom.
    /// With no redundancy the residual is identically zero and nothing can
    /// be detected, so the threshold is infinite.
    pub fn resolve(&self, dof: usize) -> Result<f64> {
        match *self {
            Threshold::Fixed(z) if z >= 0.0 => Ok(z),
            Threshold::Fixed(z) => Err(EstimatorError::InvalidConfig(format!("threshold {z} < 0"))),
            Threshold::ChiSquare { alpha } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(EstimatorError::InvalidConfig(format!("alpha {alpha} outside (0, 1)")));
                }
                if dof == 0 {
                    return Ok(f64::INFINITY);
                }
                Ok(chi_square_quantile(1.0 - alpha, dof).sqrt())
            }
        }
    }
}

/// Quantile of the chi-square distribution.
pub fn chi_square_quantile(p: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("dof > 0")
        .inverse_cdf(p)
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// Joint estimate of `[x_{k-1}; u_{k-1}]` with covariance
/// `U = [[P_x, P_xu], [P_ux, P_u]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEstimate {
    pub x_hat: Vector,
    pub u_hat: Vector,
    pub cov: Mat,
    /// Time index the estimate refers to (`k-1`).
    pub step: u64,
}

impl JointEstimate {
    fn n(&self) -> usize {
        self.x_hat.len()
    }
    fn m(&self) -> usize {
        self.u_hat.len()
    }
    pub fn p_x(&self) -> Mat {
        self.cov.view((0, 0), (self.n(), self.n())).into_owned()
    }
    pub fn p_xu(&self) -> Mat {
        self.cov.view((0, self.n()), (self.n(), self.m())).into_owned()
    }
    pub fn p_ux(&self) -> Mat {
        self.cov.view((self.n(), 0), (self.m(), self.n())).into_owned()
    }
    pub fn p_u(&self) -> Mat {
        self.cov.view((self.n(), self.n()), (self.m(), self.m())).into_owned()
    }
    /// `[x̂; û]`.
    pub fn stacked(&self) -> Vector {
        numerics::vstack(&[&self.x_hat, &self.u_hat])
    }
    pub(crate) fn from_stacked(theta: &Vector, cov: Mat, n: usize, step: u64) -> Self {
        let m = theta.len() - n;
        Self {
            x_hat: theta.rows(0, n).into_owned(),
            u_hat: theta.rows(n, m).into_owned(),
            cov,
            step,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BddReport {
    pub distance: f64,
    pub threshold: f64,
    pub flagged: bool,
    pub residual: Vector,
    pub residual_cov: Mat,
    /// Degrees of freedom of the residual (observations minus unknowns).
    pub dof: usize,
    /// Set when the projected covariance still failed Cholesky and the
    /// distance was normalized by the diagonal only.
    pub diagonal_fallback: bool,
}

// ---------------------------------------------------------------------------
// Filter context and state
// ---------------------------------------------------------------------------

/// Immutable per-model data shared by every step of a filter.
#[derive(Debug, Clone)]
pub struct DsieContext {
    pub model: DiscreteModel,
    pub bdd: BddConfig,
    design: Mat,
    e_x: Mat,
    zeta: f64,
    dof: usize,
}

impl DsieContext {
    pub fn new(model: DiscreteModel, bdd: BddConfig) -> Result<Self> {
        let design = model.joint_design();
        let e_x = &model.c * &model.q * model.c.transpose() + &model.r_x;
        let dof = (model.l() + model.p()).saturating_sub(model.m());
        let zeta = bdd.threshold.resolve(dof)?;
        Ok(Self {
            model,
            bdd,
            design,
            e_x,
            zeta,
            dof,
        })
    }

    /// `𝒪`.
    pub fn design(&self) -> &Mat {
        &self.design
    }

    /// `E_x = C·Q·Cᵀ + R_x`.
    pub fn e_x(&self) -> &Mat {
        &self.e_x
    }

    pub fn threshold(&self) -> f64 {
        self.zeta
    }

    pub fn dof(&self) -> usize {
        self.dof
    }
}

/// Posterior `x̂_k`, `P_{x,k}` plus the last joint estimate.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub ctx: Arc<DsieContext>,
    pub x_hat: Vector,
    pub p_x: Mat,
    pub step: u64,
    pub last: Option<JointEstimate>,
}

impl FilterState {
    pub fn new(ctx: Arc<DsieContext>, x0: Vector, p0: Mat) -> Result<Self> {
        let n = ctx.model.n();
        check_len("initial state", &x0, n)?;
        if p0.shape() != (n, n) {
            return Err(EstimatorError::DimensionMismatch(format!(
                "initial covariance is {}x{}, expected {n}x{n}",
                p0.nrows(),
                p0.ncols()
            )));
        }
        if p0.iter().any(|v| !v.is_finite()) {
            return Err(EstimatorError::NonFinite("initial covariance"));
        }
        Ok(Self {
            ctx,
            x_hat: x0,
            p_x: numerics::symmetrize_psd(&p0),
            step: 0,
            last: None,
        })
    }

    pub fn model(&self) -> &DiscreteModel {
        &self.ctx.model
    }
}

/// Joint WLS estimate of `[x_{k-1}; u_{k-1}]` and its residual test.
pub fn estimate_input(
    prev: &FilterState,
    z_u_prev: &Vector,
    z_x_now: &Vector,
) -> Result<(JointEstimate, BddReport)> {
    let ctx = &prev.ctx;
    let model = &ctx.model;
    check_len("z_u", z_u_prev, model.l())?;
    check_len("z_x", z_x_now, model.p())?;
    check_len("x_hat", &prev.x_hat, model.n())?;

    let p_x = regularized(&prev.p_x);
    let weight = numerics::block_diag(&[&p_x, &model.r_u, &ctx.e_x]);
    let stacked = numerics::vstack(&[&prev.x_hat, z_u_prev, z_x_now]);
    let sol = numerics::wls_solve(&ctx.design, &weight, &stacked)?;
    let joint = JointEstimate::from_stacked(
        &sol.estimate,
        numerics::symmetrize_psd(&sol.covariance),
        model.n(),
        prev.step,
    );
    let report = detect_bad_data(&joint, &stacked, &ctx.design, &weight, ctx.zeta);
    Ok((joint, report))
}

/// Symmetric PSD, nudged to PD when a Cholesky probe fails.
fn regularized(p: &Mat) -> Mat {
    let sym = numerics::symmetrize_psd(p);
    if sym.nrows() == 0 || Cholesky::new(sym.clone()).is_some() {
        return sym;
    }
    let n = sym.nrows();
    let jitter = (sym.trace().abs() / n as f64).max(f64::MIN_POSITIVE) * 1e-12;
    sym + Mat::identity(n, n) * jitter
}

/// Residual `r = z - 𝒪θ̂` tested against `S = R - 𝒪U𝒪ᵀ`.
///
/// `S` is singular by construction (rank = observations − unknowns), so its
/// eigenvalues are floored at `1e-10·trace(S)` before the Cholesky solve.
/// The residual has no component along the floored directions, so this
/// matches the pseudo-inverse form `rᵀS⁺r = rᵀR⁻¹r`.
pub fn detect_bad_data(
    joint: &JointEstimate,
    stacked: &Vector,
    design: &Mat,
    weight: &Mat,
    threshold: f64,
) -> BddReport {
    let theta = joint.stacked();
    let residual = stacked - design * &theta;
    let dof = design.nrows().saturating_sub(design.ncols());
    let residual_cov = numerics::symmetrize(&(weight - design * &joint.cov * design.transpose()));
    if dof == 0 {
        return BddReport {
            distance: 0.0,
            threshold,
            flagged: false,
            residual,
            residual_cov,
            dof,
            diagonal_fallback: false,
        };
    }
    let floor = 1e-10 * residual_cov.trace().abs();
    let projected = numerics::project_pd(&residual_cov, floor);
    let (distance, diagonal_fallback) = match numerics::mahalanobis(&residual, &projected) {
        Ok(d) => (d, false),
        Err(_) => {
            let d2: f64 = residual
                .iter()
                .zip(residual_cov.diagonal().iter())
                .map(|(r, s)| r * r / s.max(floor).max(f64::MIN_POSITIVE))
                .sum();
            (d2.sqrt(), true)
        }
    };
    BddReport {
        distance,
        threshold,
        flagged: distance >= threshold,
        residual,
        residual_cov,
        dof,
        diagonal_fallback,
    }
}

/// `x̂_{k|k-1} = A_d x̂ + B_d û`, `P_{k|k-1} = [A_d B_d] U [A_d B_d]ᵀ + Q`.
pub fn predict(joint: &JointEstimate, model: &DiscreteModel) -> (Vector, Mat) {
    let (n, m) = (model.n(), model.m());
    let mut g = Mat::zeros(n, n + m);
    g.view_mut((0, 0), (n, n)).copy_from(&model.a_d);
    g.view_mut((0, n), (n, m)).copy_from(&model.b_d);
    let x_pred = &g * joint.stacked();
    let p_pred = &g * &joint.cov * g.transpose() + &model.q;
    (x_pred, numerics::symmetrize_psd(&p_pred))
}

/// Output of the measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub x_hat: Vector,
    pub p_x: Mat,
    /// `z_x − C·x_pred`.
    pub innovation: Vector,
    /// `C·P_pred·Cᵀ + R_x`.
    pub innovation_cov: Mat,
}

/// Kalman update `x̂ = x_pred + K(z − C x_pred)`, `P = (I − KC)P_pred`.
pub fn update(x_pred: &Vector, p_pred: &Mat, z_x_now: &Vector, model: &DiscreteModel) -> Result<Posterior> {
    let n = model.n();
    check_len("z_x", z_x_now, model.p())?;
    check_len("x_pred", x_pred, n)?;
    if model.p() == 0 {
        return Ok(Posterior {
            x_hat: x_pred.clone(),
            p_x: p_pred.clone(),
            innovation: Vector::zeros(0),
            innovation_cov: Mat::zeros(0, 0),
        });
    }
    let c = &model.c;
    let s = numerics::symmetrize(&(c * p_pred * c.transpose() + &model.r_x));
    let chol = Cholesky::new(s.clone()).ok_or(NumericsError::NotPositiveDefinite)?;
    // K = P Cᵀ S⁻¹ = (S⁻¹ C P)ᵀ
    let gain = chol.solve(&(c * p_pred)).transpose();
    let innovation = z_x_now - c * x_pred;
    let x_hat = x_pred + &gain * &innovation;
    let p_x = (Mat::identity(n, n) - &gain * c) * p_pred;
    Ok(Posterior {
        x_hat,
        p_x: numerics::symmetrize_psd(&p_x),
        innovation,
        innovation_cov: s,
    })
}

/// Outcome of one full filter cycle.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: FilterState,
    pub joint: JointEstimate,
    pub bdd: BddReport,
    /// `None` when the update was skipped under [`BddPolicy::Hold`].
    pub posterior: Option<Posterior>,
}

/// Input estimation, residual test, prediction and update for one step.
pub fn dsie_step(state: &FilterState, z_u_prev: &Vector, z_x_now: &Vector) -> Result<StepOutput> {
    let (joint, bdd) = estimate_input(state, z_u_prev, z_x_now)?;
    finish_step(state, joint, bdd, z_x_now)
}

/// Prediction and update from an already-computed joint estimate; the
/// distributed filter enters here with a fused estimate.
pub fn finish_step(
    state: &FilterState,
    joint: JointEstimate,
    bdd: BddReport,
    z_x_now: &Vector,
) -> Result<StepOutput> {
    let model = state.model();
    let (x_pred, p_pred) = predict(&joint, model);
    let hold = bdd.flagged && state.ctx.bdd.policy == BddPolicy::Hold;
    let (x_hat, p_x, posterior) = if hold {
        (x_pred, p_pred, None)
    } else {
        let post = update(&x_pred, &p_pred, z_x_now, model)?;
        (post.x_hat.clone(), post.p_x.clone(), Some(post))
    };
    Ok(StepOutput {
        state: FilterState {
            ctx: state.ctx.clone(),
            x_hat,
            p_x,
            step: state.step + 1,
            last: Some(joint.clone()),
        },
        joint,
        bdd,
        posterior,
    })
}

// ---------------------------------------------------------------------------
// WLS snapshot baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEstimate {
    pub x_hat: Vector,
    pub u_hat: Vector,
    pub cov: Mat,
    pub bdd: BddReport,
}

/// Static WLS over `[z_x; z_u]` with design `[[C, 0], [0, D]]`.
pub fn wls_snapshot(z_x: &Vector, z_u: &Vector, model: &DiscreteModel, threshold: Threshold) -> Result<SnapshotEstimate> {
    let (n, m, p, l) = (model.n(), model.m(), model.p(), model.l());
    check_len("z_x", z_x, p)?;
    check_len("z_u", z_u, l)?;
    let mut h = Mat::zeros(p + l, n + m);
    h.view_mut((0, 0), (p, n)).copy_from(&model.c);
    h.view_mut((p, n), (l, m)).copy_from(&model.d);
    let weight = numerics::block_diag(&[&model.r_x, &model.r_u]);
    let z = numerics::vstack(&[z_x, z_u]);
    let sol = numerics::wls_solve(&h, &weight, &z)?;
    let joint = JointEstimate::from_stacked(&sol.estimate, sol.covariance, n, 0);
    let dof = (p + l).saturating_sub(n + m);
    let bdd = detect_bad_data(&joint, &z, &h, &weight, threshold.resolve(dof)?);
    Ok(SnapshotEstimate {
        x_hat: joint.x_hat,
        u_hat: joint.u_hat,
        cov: joint.cov,
        bdd,
    })
}

// ---------------------------------------------------------------------------
// Tracking (random-walk) baseline
// ---------------------------------------------------------------------------

/// Forecasting-aided tracking filter: identity transition over `[x; u]`.
#[derive(Debug, Clone)]
pub struct TseState {
    pub model: Arc<DiscreteModel>,
    pub s_hat: Vector,
    pub p: Mat,
    pub q_tse: Mat,
    pub threshold: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TseReport {
    pub distance: f64,
    pub threshold: f64,
    pub flagged: bool,
}

impl TseState {
    pub fn new(model: Arc<DiscreteModel>, s0: Vector, p0: Mat, q_tse: Mat, threshold: Threshold) -> Result<Self> {
        let dim = model.n() + model.m();
        check_len("initial tracking state", &s0, dim)?;
        if p0.shape() != (dim, dim) || q_tse.shape() != (dim, dim) {
            return Err(EstimatorError::DimensionMismatch(format!(
                "tracking covariances must be {dim}x{dim}"
            )));
        }
        let zeta = threshold.resolve(model.p() + model.l())?;
        Ok(Self {
            model,
            s_hat: s0,
            p: p0,
            q_tse,
            threshold: zeta,
            step: 0,
        })
    }

    pub fn x_hat(&self) -> Vector {
        self.s_hat.rows(0, self.model.n()).into_owned()
    }

    pub fn u_hat(&self) -> Vector {
        self.s_hat.rows(self.model.n(), self.model.m()).into_owned()
    }
}

/// One random-walk predict/update over the stacked measurement `[z_x; z_u]`.
/// The distance is the Mahalanobis norm of the innovation.
pub fn tse_step(state: &TseState, z_x: &Vector, z_u: &Vector) -> Result<(TseState, TseReport)> {
    let model = &state.model;
    let (n, m, p, l) = (model.n(), model.m(), model.p(), model.l());
    check_len("z_x", z_x, p)?;
    check_len("z_u", z_u, l)?;
    let dim = n + m;
    let p_pred = &state.p + &state.q_tse;

    let mut h = Mat::zeros(p + l, dim);
    h.view_mut((0, 0), (p, n)).copy_from(&model.c);
    h.view_mut((p, n), (l, m)).copy_from(&model.d);
    let r = numerics::block_diag(&[&model.r_x, &model.r_u]);
    let z = numerics::vstack(&[z_x, z_u]);

    if p + l == 0 {
        let next = TseState {
            p: numerics::symmetrize_psd(&p_pred),
            step: state.step + 1,
            ..state.clone()
        };
        let report = TseReport {
            distance: 0.0,
            threshold: state.threshold,
            flagged: false,
        };
        return Ok((next, report));
    }

    let s = numerics::symmetrize(&(&h * &p_pred * h.transpose() + &r));
    let chol = Cholesky::new(s.clone()).ok_or(NumericsError::NotPositiveDefinite)?;
    let innovation = &z - &h * &state.s_hat;
    let distance = numerics::mahalanobis(&innovation, &s)?;
    let gain = chol.solve(&(&h * &p_pred)).transpose();
    let s_hat = &state.s_hat + &gain * &innovation;
    let p_new = (Mat::identity(dim, dim) - &gain * &h) * &p_pred;
    let next = TseState {
        model: state.model.clone(),
        s_hat,
        p: numerics::symmetrize_psd(&p_new),
        q_tse: state.q_tse.clone(),
        threshold: state.threshold,
        step: state.step + 1,
    };
    Ok((
        next,
        TseReport {
            distance,
            threshold: state.threshold,
            flagged: distance >= state.threshold,
        },
    ))
}
