//! Independent verification oracles.
//!
//! The filter recursion is cross-checked against exact Gaussian
//! conditioning on the dense joint distribution of all states and
//! observations, built directly from the system matrices with no shared
//! code path. Used by the `gradcheck` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::Tape;
use crate::kalman::{self, FilterMode, KalmanNodes, KalmanParams};
use crate::linalg::{self, LinalgError};
use crate::tensor::Tensor;

/// Linear-Gaussian system with per-step observation covariances.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: Tensor,
    pub b_w: Tensor,
    pub q: Tensor,
    pub c_z: Tensor,
    pub mu0: Tensor,
    pub sigma0: Tensor,
    pub r_per_step: Vec<Tensor>,
}

/// Exact filtered marginal at one step.
#[derive(Debug, Clone)]
pub struct OracleMarginal {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Conditional distribution of the `target` coordinates of a joint
/// Gaussian given observed values of the `observed` coordinates.
pub fn condition(
    mean: &Tensor,
    cov: &Tensor,
    target: &[usize],
    observed: &[usize],
    values: &Tensor,
) -> Result<(Tensor, Tensor), LinalgError> {
    let pick_vec = |idx: &[usize]| Tensor::vector(idx.iter().map(|&i| mean.data()[i]).collect());
    let pick_mat = |rows: &[usize], cols: &[usize]| {
        let mut out = Tensor::zeros(&[rows.len(), cols.len()]);
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                out.set(i, j, cov.at(r, c));
            }
        }
        out
    };
    let mu_t = pick_vec(target);
    let mu_o = pick_vec(observed);
    let s_tt = pick_mat(target, target);
    let s_to = pick_mat(target, observed);
    let s_oo = pick_mat(observed, observed);

    let delta = values.sub(&mu_o)?;
    let delta_col = delta.reshaped(vec![observed.len(), 1])?;
    // S_oo^{-1} (z - mu_o) and S_oo^{-1} S_ot
    let solve_rhs = linalg::spd_solve(&s_oo, &delta_col)?;
    let s_ot = s_to.transpose()?;
    let solve_cross = linalg::spd_solve(&s_oo, &s_ot)?;

    let gain_term = s_to.matmul(&solve_rhs)?;
    let mu_cond = mu_t.add(&Tensor::vector(gain_term.data().to_vec()))?;
    let reduction = s_to.matmul(&solve_cross)?;
    let sigma_cond = s_tt.sub(&reduction)?.symmetrize()?;
    Ok((mu_cond, sigma_cond))
}

/// Filtered marginals `p(x_t | z_{1:t})` computed from the dense joint
/// covariance over all states and observations.
///
/// The joint is assembled from the model structure alone: `x_1` has the
/// initial prior, `x_{t+1} = A x_t + B_w w_t`, and `z_t = C_z x_t + v_t`
/// with `Cov(v_t) = R_t`. No filter recursion is involved.
pub fn filtered_marginals(
    sys: &LinearSystem,
    zs: &[Tensor],
) -> Result<Vec<OracleMarginal>, LinalgError> {
    let t_len = zs.len();
    assert_eq!(sys.r_per_step.len(), t_len);
    let n = sys.a.rows();
    let d = sys.c_z.rows();
    let dim = t_len * (n + d);
    let x_off = |t: usize| t * n;
    let z_off = |t: usize| t_len * n + t * d;

    // state means and pairwise state covariances
    let mut means = vec![0.0; dim];
    let mut mu_t = sys.mu0.clone();
    for t in 0..t_len {
        means[x_off(t)..x_off(t) + n].copy_from_slice(mu_t.data());
        mu_t = sys.a.matmul(&mu_t)?;
    }
    // cov_x[s][t] = Cov(x_{s+1}, x_{t+1}) for s <= t
    let mut cov_x: Vec<Vec<Tensor>> = vec![vec![Tensor::zeros(&[n, n]); t_len]; t_len];
    cov_x[0][0] = sys.sigma0.clone();
    let bqb = sys
        .b_w
        .matmul(&sys.q)?
        .matmul(&sys.b_w.transpose()?)?;
    for t in 0..t_len - 1 {
        // Var(x_{t+2}) = A Var A^T + B Q B^T
        let av = sys.a.matmul(&cov_x[t][t])?;
        cov_x[t + 1][t + 1] = av.matmul(&sys.a.transpose()?)?.add(&bqb)?;
        // Cov(x_{s+1}, x_{t+2}) = Cov(x_{s+1}, x_{t+1}) A^T
        for s in 0..=t {
            cov_x[s][t + 1] = cov_x[s][t].matmul(&sys.a.transpose()?)?;
        }
    }

    let mut joint = Tensor::zeros(&[dim, dim]);
    let put = |joint: &mut Tensor, r0: usize, c0: usize, block: &Tensor| {
        for i in 0..block.rows() {
            for j in 0..block.cols() {
                joint.set(r0 + i, c0 + j, block.at(i, j));
            }
        }
    };
    for s in 0..t_len {
        for t in s..t_len {
            let block = &cov_x[s][t];
            put(&mut joint, x_off(s), x_off(t), block);
            if t != s {
                let tr = block.transpose()?;
                put(&mut joint, x_off(t), x_off(s), &tr);
            }
        }
    }
    // observation blocks: Cov(z_s, x_t) = C Cov(x_s, x_t); Var(z_t) adds R_t
    for s in 0..t_len {
        for t in 0..t_len {
            let cov_xsxt = if s <= t {
                cov_x[s][t].clone()
            } else {
                cov_x[t][s].transpose()?
            };
            let zx = sys.c_z.matmul(&cov_xsxt)?;
            put(&mut joint, z_off(s), x_off(t), &zx);
            let xz = zx.transpose()?;
            put(&mut joint, x_off(t), z_off(s), &xz);
            let zz = zx.matmul(&sys.c_z.transpose()?)?;
            let zz = if s == t { zz.add(&sys.r_per_step[s])? } else { zz };
            put(&mut joint, z_off(s), z_off(t), &zz);
        }
    }
    for t in 0..t_len {
        let mz = sys.c_z.matmul(&Tensor::vector(
            means[x_off(t)..x_off(t) + n].to_vec(),
        ))?;
        means[z_off(t)..z_off(t) + d].copy_from_slice(mz.data());
    }
    let mean_vec = Tensor::vector(means);

    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let target: Vec<usize> = (x_off(t)..x_off(t) + n).collect();
        let observed: Vec<usize> = (0..=t).flat_map(|s| z_off(s)..z_off(s) + d).collect();
        let mut obs_values = Vec::with_capacity(observed.len());
        for z in zs.iter().take(t + 1) {
            obs_values.extend_from_slice(z.data());
        }
        let (mu, sigma) = condition(
            &mean_vec,
            &joint,
            &target,
            &observed,
            &Tensor::vector(obs_values),
        )?;
        out.push(OracleMarginal { mu, sigma });
    }
    Ok(out)
}

/// Draws one sample from `N(mean, cov)` via the Cholesky factor.
pub fn sample_gaussian(
    mean: &Tensor,
    chol_lower: &Tensor,
    rng: &mut impl Rng,
) -> Tensor {
    let n = mean.numel();
    let std_normal: Vec<f64> = (0..n)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng))
        .collect();
    let correlated = chol_lower
        .matmul(&Tensor::vector(std_normal))
        .expect("chol dims");
    mean.add(&correlated).expect("same dims")
}

/// Worst-case result of comparing the unrolled filter against the
/// dense-joint conditioning oracle over randomized systems.
#[derive(Debug, Clone)]
pub struct UnrollComparison {
    pub systems: usize,
    pub worst_abs_err: f64,
    pub worst_system: usize,
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, rng.gen_range(-scale..scale));
        }
    }
    let mut a = m.matmul(&m.transpose().expect("square")).expect("square");
    for i in 0..n {
        let v = a.at(i, i) + 0.3 * scale * scale;
        a.set(i, i, v);
    }
    a
}

/// Runs `systems` random linear-Gaussian problems (state dim <= 4,
/// observation dim <= 2, T <= 5) through [`kalman::unroll`] and the
/// oracle, returning the worst absolute deviation over all posterior
/// means and covariances.
pub fn unroll_vs_oracle(systems: usize, seed: u64) -> Result<UnrollComparison, crate::graph::GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cmp = UnrollComparison {
        systems,
        worst_abs_err: 0.0,
        worst_system: 0,
    };
    for sys_idx in 0..systems {
        let n = rng.gen_range(1..=4usize);
        let d = rng.gen_range(1..=2usize.min(n));
        let q_dim = rng.gen_range(1..=n);
        let t_len = rng.gen_range(1..=5usize);

        let a = Tensor::new(
            vec![n, n],
            (0..n * n).map(|_| rng.gen_range(-0.6..0.6)).collect(),
        )
        .expect("sized");
        let b_w = Tensor::new(
            vec![n, q_dim],
            (0..n * q_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .expect("sized");
        let q = random_spd(&mut rng, q_dim, 0.7);
        let c_z = Tensor::new(
            vec![d, n],
            (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .expect("sized");
        let mu0 = Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let sigma0 = random_spd(&mut rng, n, 0.8);

        // packed covariance parameters drive both routes so the filter
        // and the oracle see the identical R_t
        let packed_len = d * (d + 1) / 2;
        let l_hats: Vec<Tensor> = (0..t_len)
            .map(|_| {
                Tensor::vector(
                    (0..packed_len)
                        .map(|_| rng.gen_range(-0.5..0.5))
                        .collect(),
                )
            })
            .collect();
        let zs: Vec<Tensor> = (0..t_len)
            .map(|_| Tensor::vector((0..d).map(|_| rng.gen_range(-1.5..1.5)).collect()))
            .collect();

        // filter route
        let params = KalmanParams::new(
            a.clone(),
            b_w.clone(),
            q.clone(),
            c_z.clone(),
            Tensor::eye(n),
            sigma0.clone(),
        )
        .expect("valid random system");
        let mut tape = Tape::new();
        let nodes = KalmanNodes::register(&mut tape, &params)?;
        let init = kalman::init_state(&mut tape, &mu0, &sigma0)?;
        let z_nodes: Vec<_> = zs
            .iter()
            .map(|z| tape.constant(z.clone()))
            .collect::<Result<_, _>>()?;
        let l_nodes: Vec<_> = l_hats
            .iter()
            .map(|l| tape.constant(l.clone()))
            .collect::<Result<_, _>>()?;
        let posteriors = kalman::unroll(&mut tape, &z_nodes, &l_nodes, init, &nodes, &FilterMode::Kf)?;

        // oracle route: reconstruct the effective R_t the same way the
        // cell does, then condition the dense joint
        let r_per_step: Vec<Tensor> = l_nodes
            .iter()
            .map(|&ln| {
                let mut t2 = Tape::new();
                let c = t2.constant(tape.value(ln).clone()).expect("finite");
                let l = t2.lower_triangular_expdiag(c).expect("triangular");
                let lt = t2.transpose(l).expect("matrix");
                let r = t2.matmul(l, lt).expect("dims");
                t2.value(r).clone()
            })
            .collect();
        let sys = LinearSystem {
            a,
            b_w,
            q,
            c_z,
            mu0,
            sigma0,
            r_per_step,
        };
        let oracle = filtered_marginals(&sys, &zs).expect("oracle conditioning");

        for (post, truth) in posteriors.iter().zip(&oracle) {
            let mu_err = tape
                .value(post.mu)
                .sub(&truth.mu)
                .expect("dims")
                .max_abs();
            let sig_err = tape
                .value(post.sigma)
                .sub(&truth.sigma)
                .expect("dims")
                .max_abs();
            let err = mu_err.max(sig_err);
            if err > cmp.worst_abs_err {
                cmp.worst_abs_err = err;
                cmp.worst_system = sys_idx;
            }
        }
    }
    Ok(cmp)
}
