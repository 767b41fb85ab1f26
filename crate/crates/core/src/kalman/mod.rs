//! Kalman and extended Kalman filter cells expressed as tape operations.
//!
//! The filter is a deterministic recurrence over the Gaussian belief
//! `(mu, Sigma)`. Each step performs the observation update on the
//! current prior and then the dynamics prediction for the next step;
//! the recurrence begins with the observation update on the supplied
//! initial prior, with no prediction before it. Unrolling the
//! recurrence on one tape makes `backward` backpropagation through
//! time over the whole sequence.

use std::sync::Arc;

use crate::graph::{GraphError, NodeId, Tape};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KalmanError {
    #[error("{name} must be {rows}x{cols}, got {shape:?}")]
    Dimension {
        name: &'static str,
        rows: usize,
        cols: usize,
        shape: Vec<usize>,
    },
    #[error("{name} must be symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { name: &'static str, asymmetry: f64 },
    #[error("{name} must be positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { name: &'static str, min_eig: f64 },
    #[error("{name} must be positive definite: {source}")]
    NotPd {
        name: &'static str,
        source: linalg::LinalgError,
    },
}

/// Which system matrices are optimized rather than held fixed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LearnableFlags {
    pub a: bool,
    pub b_w: bool,
    pub q: bool,
    pub c_z: bool,
    pub c_y: bool,
}

/// System matrices of the linear-Gaussian state-space model
/// `x' = A x + B_w w`, `z = C_z x + v`, `y = C_y x`.
#[derive(Debug, Clone)]
pub struct KalmanParams {
    pub a: Tensor,
    pub b_w: Tensor,
    pub q: Tensor,
    pub c_z: Tensor,
    pub c_y: Tensor,
    pub sigma0: Tensor,
    pub learnable: LearnableFlags,
}

impl KalmanParams {
    pub fn new(
        a: Tensor,
        b_w: Tensor,
        q: Tensor,
        c_z: Tensor,
        c_y: Tensor,
        sigma0: Tensor,
    ) -> Result<Self, KalmanError> {
        let n = a.shape().first().copied().unwrap_or(0);
        let check = |name, t: &Tensor, rows: usize, cols: usize| {
            if t.shape() != [rows, cols] {
                Err(KalmanError::Dimension {
                    name,
                    rows,
                    cols,
                    shape: t.shape().to_vec(),
                })
            } else {
                Ok(())
            }
        };
        check("A", &a, n, n)?;
        let nq = if b_w.is_matrix() { b_w.cols() } else { 0 };
        check("B_w", &b_w, n, nq)?;
        check("Q", &q, nq, nq)?;
        let d = if c_z.is_matrix() { c_z.rows() } else { 0 };
        check("C_z", &c_z, d, n)?;
        let p = if c_y.is_matrix() { c_y.rows() } else { 0 };
        check("C_y", &c_y, p, n)?;
        check("Sigma0", &sigma0, n, n)?;

        require_symmetric("Q", &q)?;
        require_symmetric("Sigma0", &sigma0)?;
        let q_min = linalg::min_eigenvalue(&q).map_err(|source| KalmanError::NotPd {
            name: "Q",
            source,
        })?;
        if q_min < -1e-9 {
            return Err(KalmanError::NotPsd {
                name: "Q",
                min_eig: q_min,
            });
        }
        linalg::cholesky(&sigma0).map_err(|source| KalmanError::NotPd {
            name: "Sigma0",
            source,
        })?;
        Ok(KalmanParams {
            a,
            b_w,
            q,
            c_z,
            c_y,
            sigma0,
            learnable: LearnableFlags::default(),
        })
    }

    pub fn with_learnable(mut self, learnable: LearnableFlags) -> Self {
        self.learnable = learnable;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c_z.rows()
    }

    pub fn label_dim(&self) -> usize {
        self.c_y.rows()
    }
}

fn require_symmetric(name: &'static str, t: &Tensor) -> Result<(), KalmanError> {
    let mut worst = 0.0f64;
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            worst = worst.max((t.at(i, j) - t.at(j, i)).abs());
        }
    }
    if worst >= 1e-9 {
        return Err(KalmanError::NotSymmetric {
            name,
            asymmetry: worst,
        });
    }
    Ok(())
}

/// Gaussian belief as a pair of tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct FilterState {
    pub mu: NodeId,
    pub sigma: NodeId,
}

/// Differentiable dynamics map with its Jacobian provider.
#[derive(Clone)]
pub struct DynamicsFn {
    f: Arc<dyn Fn(&Tensor) -> Tensor + Send + Sync>,
    jacobian: Arc<dyn Fn(&Tensor) -> Tensor + Send + Sync>,
}

impl std::fmt::Debug for DynamicsFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("DynamicsFn")
    }
}

impl DynamicsFn {
    pub fn new(
        f: impl Fn(&Tensor) -> Tensor + Send + Sync + 'static,
        jacobian: impl Fn(&Tensor) -> Tensor + Send + Sync + 'static,
    ) -> Self {
        DynamicsFn {
            f: Arc::new(f),
            jacobian: Arc::new(jacobian),
        }
    }

    /// Linear dynamics `f(x) = A x`, whose Jacobian is `A` everywhere.
    pub fn linear(a: Tensor) -> Self {
        let a2 = a.clone();
        DynamicsFn::new(
            move |x| a.matmul(x).expect("linear dynamics dims"),
            move |_| a2.clone(),
        )
    }

    pub fn eval(&self, x: &Tensor) -> Tensor {
        (self.f)(x)
    }

    pub fn jacobian_at(&self, x: &Tensor) -> Tensor {
        (self.jacobian)(x)
    }
}

/// Linear (KF) or linearized (EKF) prediction.
#[derive(Clone)]
pub enum FilterMode {
    Kf,
    Ekf(DynamicsFn),
}

/// System matrices registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct KalmanNodes {
    pub a: NodeId,
    pub b_w: NodeId,
    pub q: NodeId,
    pub c_z: NodeId,
    pub c_y: NodeId,
}

impl KalmanNodes {
    /// Registers each matrix as a trainable parameter or a constant
    /// according to the learnable flags.
    pub fn register(tape: &mut Tape, params: &KalmanParams) -> Result<Self, GraphError> {
        let q = Self::reg(tape, &params.q, params.learnable.q)?;
        Self::register_with_q(tape, params, q)
    }

    /// Same as [`KalmanNodes::register`] but with the process-noise
    /// covariance supplied by the caller, e.g. a positive definite
    /// reparameterization built from a packed Cholesky vector.
    pub fn register_with_q(
        tape: &mut Tape,
        params: &KalmanParams,
        q: NodeId,
    ) -> Result<Self, GraphError> {
        Ok(KalmanNodes {
            a: Self::reg(tape, &params.a, params.learnable.a)?,
            b_w: Self::reg(tape, &params.b_w, params.learnable.b_w)?,
            q,
            c_z: Self::reg(tape, &params.c_z, params.learnable.c_z)?,
            c_y: Self::reg(tape, &params.c_y, params.learnable.c_y)?,
        })
    }

    fn reg(tape: &mut Tape, t: &Tensor, learn: bool) -> Result<NodeId, GraphError> {
        if learn {
            tape.parameter(t.clone())
        } else {
            tape.constant(t.clone())
        }
    }
}

/// Initial prior belief as constant nodes.
pub fn init_state(
    tape: &mut Tape,
    mu0: &Tensor,
    sigma0: &Tensor,
) -> Result<FilterState, GraphError> {
    Ok(FilterState {
        mu: tape.constant(mu0.clone())?,
        sigma: tape.constant(sigma0.clone())?,
    })
}

fn symmetrized(tape: &mut Tape, m: NodeId) -> Result<NodeId, GraphError> {
    let mt = tape.transpose(m)?;
    let s = tape.add(m, mt)?;
    tape.scale(s, 0.5)
}

/// Dynamics step: `mu' = A mu` (or `f(mu)`), `Sigma' = A Sigma A^T + B_w Q B_w^T`,
/// symmetrized.
///
/// In EKF mode the mean propagates through the nonlinear map, while the
/// covariance uses the Jacobian at the current mean, held constant for
/// the step so no second derivatives of the dynamics arise.
pub fn predict(
    tape: &mut Tape,
    state: &FilterState,
    nodes: &KalmanNodes,
    mode: &FilterMode,
) -> Result<FilterState, GraphError> {
    let (mu_next, a_t) = match mode {
        FilterMode::Kf => (tape.matmul(nodes.a, state.mu)?, nodes.a),
        FilterMode::Ekf(dynamics) => {
            let mu_val = tape.value(state.mu).clone();
            let jac = dynamics.jacobian_at(&mu_val);
            let f_val = dynamics.eval(&mu_val);
            let mu_next = tape.map_with_jacobian(state.mu, f_val, jac.clone())?;
            (mu_next, tape.constant(jac)?)
        }
    };
    let a_sigma = tape.matmul(a_t, state.sigma)?;
    let a_tr = tape.transpose(a_t)?;
    let asa = tape.matmul(a_sigma, a_tr)?;
    let bq = tape.matmul(nodes.b_w, nodes.q)?;
    let b_tr = tape.transpose(nodes.b_w)?;
    let bqb = tape.matmul(bq, b_tr)?;
    let raw = tape.add(asa, bqb)?;
    let sigma_next = symmetrized(tape, raw)?;
    Ok(FilterState {
        mu: mu_next,
        sigma: sigma_next,
    })
}

/// Observation update with measurement `z` and observation covariance `R`.
///
/// The Kalman gain solve goes through the SPD path, so a non-positive
/// innovation covariance is reported rather than silently inverted.
pub fn update(
    tape: &mut Tape,
    prior: &FilterState,
    z: NodeId,
    r: NodeId,
    nodes: &KalmanNodes,
) -> Result<FilterState, GraphError> {
    let n = tape.value(prior.mu).numel();
    let c_sigma = tape.matmul(nodes.c_z, prior.sigma)?;
    let c_tr = tape.transpose(nodes.c_z)?;
    let csc = tape.matmul(c_sigma, c_tr)?;
    let innovation_cov = tape.add(csc, r)?;
    // K = Sigma' C^T S^{-1} = (S^{-1} C Sigma')^T for symmetric Sigma'
    let k_tr = tape.spd_solve(innovation_cov, c_sigma)?;
    let gain = tape.transpose(k_tr)?;
    let predicted_obs = tape.matmul(nodes.c_z, prior.mu)?;
    let residual = tape.sub(z, predicted_obs)?;
    let correction = tape.matmul(gain, residual)?;
    let mu = tape.add(prior.mu, correction)?;
    let kc = tape.matmul(gain, nodes.c_z)?;
    let eye = tape.constant(Tensor::eye(n))?;
    let closed = tape.sub(eye, kc)?;
    let raw = tape.matmul(closed, prior.sigma)?;
    let sigma = symmetrized(tape, raw)?;
    Ok(FilterState { mu, sigma })
}

/// One observation step: forms `R_t = L_t L_t^T` from the packed vector
/// `l_hat_t` and applies the update to the prior. The caller runs
/// [`predict`] afterwards to obtain the next step's prior.
pub fn kf_cell(
    tape: &mut Tape,
    prior: &FilterState,
    z: NodeId,
    l_hat: NodeId,
    nodes: &KalmanNodes,
) -> Result<FilterState, GraphError> {
    let l = tape.lower_triangular_expdiag(l_hat)?;
    let l_tr = tape.transpose(l)?;
    let r = tape.matmul(l, l_tr)?;
    update(tape, prior, z, r, nodes)
}

/// Jacobian of the dynamics at the current mean, as a constant node.
pub fn ekf_linearize(
    tape: &mut Tape,
    state: &FilterState,
    dynamics: &DynamicsFn,
) -> Result<NodeId, GraphError> {
    let jac = dynamics.jacobian_at(tape.value(state.mu));
    tape.constant(jac)
}

/// Label-space projection `(C_y mu, C_y Sigma C_y^T)`.
pub fn output(
    tape: &mut Tape,
    state: &FilterState,
    nodes: &KalmanNodes,
) -> Result<(NodeId, NodeId), GraphError> {
    let y = tape.matmul(nodes.c_y, state.mu)?;
    let cs = tape.matmul(nodes.c_y, state.sigma)?;
    let c_tr = tape.transpose(nodes.c_y)?;
    let cov = tape.matmul(cs, c_tr)?;
    Ok((y, cov))
}

/// Unrolls the filter over `T` observations, returning the posterior
/// belief after each update. `init` is the prior for the first step.
pub fn unroll(
    tape: &mut Tape,
    zs: &[NodeId],
    l_hats: &[NodeId],
    init: FilterState,
    nodes: &KalmanNodes,
    mode: &FilterMode,
) -> Result<Vec<FilterState>, GraphError> {
    assert_eq!(zs.len(), l_hats.len(), "one l_hat per observation");
    assert!(!zs.is_empty(), "unroll needs at least one observation");
    let mut posteriors = Vec::with_capacity(zs.len());
    let mut prior = init;
    for (t, (&z, &l_hat)) in zs.iter().zip(l_hats).enumerate() {
        let post = kf_cell(tape, &prior, z, l_hat, nodes)?;
        if t + 1 < zs.len() {
            prior = predict(tape, &post, nodes, mode)?;
        }
        posteriors.push(post);
    }
    Ok(posteriors)
}

#[cfg(test)]
mod tests;
