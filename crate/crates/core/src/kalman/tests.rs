use super::*;
use crate::graph::{grad_check, Tape};
use crate::linalg::{cholesky, min_eigenvalue};
use crate::oracle;
use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_system(q_var: f64) -> KalmanParams {
    KalmanParams::new(
        Tensor::from_rows(&[&[1.0]]),
        Tensor::from_rows(&[&[1.0]]),
        Tensor::from_rows(&[&[q_var]]),
        Tensor::from_rows(&[&[1.0]]),
        Tensor::from_rows(&[&[1.0]]),
        Tensor::from_rows(&[&[1.0]]),
    )
    .unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let m = random_matrix(rng, n, n, 1.0);
    let mut a = m.matmul(&m.transpose().unwrap()).unwrap();
    for i in 0..n {
        let v = a.at(i, i) + 0.5;
        a.set(i, i, v);
    }
    a
}

#[test]
fn params_reject_dimension_mismatch() {
    let err = KalmanParams::new(
        Tensor::eye(2),
        Tensor::zeros(&[3, 1]),
        Tensor::eye(1),
        Tensor::zeros(&[1, 2]),
        Tensor::zeros(&[1, 2]),
        Tensor::eye(2),
    )
    .unwrap_err();
    assert!(matches!(err, KalmanError::Dimension { name: "B_w", .. }));
}

#[test]
fn params_reject_indefinite_q() {
    let err = KalmanParams::new(
        Tensor::eye(2),
        Tensor::eye(2),
        Tensor::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]),
        Tensor::zeros(&[1, 2]),
        Tensor::zeros(&[1, 2]),
        Tensor::eye(2),
    )
    .unwrap_err();
    assert!(matches!(err, KalmanError::NotPsd { name: "Q", .. }));
}

#[test]
fn predict_identity_dynamics_keeps_state() {
    let params = scalar_system(0.0);
    let mut tape = Tape::new();
    let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
    let state = init_state(&mut tape, &Tensor::vector(vec![0.7]), &Tensor::from_rows(&[&[2.0]])).unwrap();
    let next = predict(&mut tape, &state, &nodes, &FilterMode::Kf).unwrap();
    assert_eq!(tape.value(next.mu).data(), &[0.7]);
    assert_eq!(tape.value(next.sigma).data(), &[2.0]);
}

#[test]
fn predict_additive_noise() {
    // A = I, B_w = I, Q = I over a 2-state system: Sigma' = Sigma + I
    let params = KalmanParams::new(
        Tensor::eye(2),
        Tensor::eye(2),
        Tensor::eye(2),
        Tensor::zeros(&[1, 2]),
        Tensor::zeros(&[1, 2]),
        Tensor::eye(2),
    )
    .unwrap();
    let mut tape = Tape::new();
    let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
    let sigma = Tensor::from_rows(&[&[1.5, 0.2], &[0.2, 1.1]]);
    let state = init_state(&mut tape, &Tensor::zeros(&[2]), &sigma).unwrap();
    let next = predict(&mut tape, &state, &nodes, &FilterMode::Kf).unwrap();
    let want = sigma.add(&Tensor::eye(2)).unwrap();
    for (g, w) in tape.value(next.sigma).data().iter().zip(want.data()) {
        assert_relative_eq!(g, w, epsilon = 1e-14);
    }
}

#[test]
fn predict_covariance_matches_monte_carlo_pushforward() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let n = 3;
    let q_dim = 2;
    let a = random_matrix(&mut rng, n, n, 0.8);
    let b_w = random_matrix(&mut rng, n, q_dim, 0.9);
    let q = random_spd(&mut rng, q_dim);
    let sigma = random_spd(&mut rng, n);
    let mu = Tensor::vector(vec![0.4, -0.2, 0.9]);

    let params = KalmanParams::new(
        a.clone(),
        b_w.clone(),
        q.clone(),
        Tensor::zeros(&[1, n]),
        Tensor::zeros(&[1, n]),
        Tensor::eye(n),
    )
    .unwrap();
    let mut tape = Tape::new();
    let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
    let state = init_state(&mut tape, &mu, &sigma).unwrap();
    let next = predict(&mut tape, &state, &nodes, &FilterMode::Kf).unwrap();
    let predicted = tape.value(next.sigma).clone();
    let predicted_mu = tape.value(next.mu).clone();

    let chol_sigma = cholesky(&sigma).unwrap();
    let chol_q = cholesky(&q).unwrap();
    let zero_q = Tensor::zeros(&[q_dim]);
    let samples = 1_000_000;
    let mut sum = vec![0.0; n];
    let mut sum_outer = vec![0.0; n * n];
    for _ in 0..samples {
        let x = oracle::sample_gaussian(&mu, &chol_sigma, &mut rng);
        let w = oracle::sample_gaussian(&zero_q, &chol_q, &mut rng);
        let pushed = a.matmul(&x).unwrap().add(&b_w.matmul(&w).unwrap()).unwrap();
        for i in 0..n {
            sum[i] += pushed.data()[i];
            for j in 0..n {
                sum_outer[i * n + j] += pushed.data()[i] * pushed.data()[j];
            }
        }
    }
    let inv = 1.0 / samples as f64;
    let scale = predicted.max_abs();
    for i in 0..n {
        assert!((sum[i] * inv - predicted_mu.data()[i]).abs() < 0.01 * scale.sqrt().max(1.0));
        for j in 0..n {
            let emp = sum_outer[i * n + j] * inv - (sum[i] * inv) * (sum[j] * inv);
            let diff = (emp - predicted.at(i, j)).abs();
            assert!(
                diff < 0.01 * scale,
                "entry ({i},{j}): empirical {emp} vs predicted {}",
                predicted.at(i, j)
            );
        }
    }
}

#[test]
fn update_scalar_hand_case() {
    // prior (0, 1), C = 1, R = 1, z = 2: K = 0.5, mu = 1, Sigma = 0.5
    let params = scalar_system(0.0);
    let mut tape = Tape::new();
    let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
    let prior = init_state(&mut tape, &Tensor::vector(vec![0.0]), &Tensor::from_rows(&[&[1.0]])).unwrap();
    let z = tape.constant(Tensor::vector(vec![2.0])).unwrap();
    let r = tape.constant(Tensor::from_rows(&[&[1.0]])).unwrap();
    let post = update(&mut tape, &prior, z, r, &nodes).unwrap();
    assert_relative_eq!(tape.value(post.mu).data()[0], 1.0, epsilon = 1e-14);
    assert_relative_eq!(tape.value(post.sigma).data()[0], 0.5, epsilon = 1e-14);
}

#[test]
fn update_with_uninformative_observation_keeps_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 3;
    let d = 2;
    let params = KalmanParams::new(
        random_matrix(&mut rng, n, n, 0.5),
        Tensor::eye(n),
        Tensor::eye(n),
        random_matrix(&mut rng, d, n, 1.0),
        Tensor::eye(n),
        Tensor::eye(n),
    )
    .unwrap();
    let mut tape = Tape::new();
    let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
    let sigma = random_spd(&mut rng, n);
    let mu = Tensor::vector(vec![0.3, -1.0, 0.6]);
    let prior = init_state(&mut tape, &mu, &sigma).unwrap();
    let z = tape.constant(Tensor::vector(vec![5.0, -3.0])).unwrap();
    let r = tape.constant(Tensor::eye(d).scale(1e12)).unwrap();
    let post = update(&mut tape, &prior, z, r, &nodes).unwrap();
    for (p, m) in tape.value(post.mu).data().iter().zip(mu.data()) {
        assert_relative_eq!(p, m, max_relative = 1e-6, epsilon = 1e-6);
    }
    for (p, s) in tape.value(post.sigma).data().iter().zip(sigma.data()) {
        assert_relative_eq!(p, s, max_relative = 1e-6, epsilon = 1e-6);
    }
}

#[test]
fn update_with_tiny_r_and_identity_projection_pins_mean_to_observation() {
    let n = 2;
    let params = KalmanParams::new(
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::eye(n),
    )
    .unwrap();
    let mut tape = Tape::new();
    let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
    let prior = init_state(&mut tape, &Tensor::vector(vec![1.0, -1.0]), &Tensor::eye(n)).unwrap();
    let z_val = Tensor::vector(vec![0.25, 0.75]);
    let z = tape.constant(z_val.clone()).unwrap();
    let r = tape.constant(Tensor::eye(n).scale(1e-12)).unwrap();
    let post = update(&mut tape, &prior, z, r, &nodes).unwrap();
    for (p, zv) in tape.value(post.mu).data().iter().zip(z_val.data()) {
        assert_relative_eq!(p, zv, max_relative = 1e-6, epsilon = 1e-6);
    }
}

#[test]
fn update_matches_joint_gaussian_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let n = rng.gen_range(1..=4);
        let d = rng.gen_range(1..=2.min(n));
        let sigma = random_spd(&mut rng, n);
        let mu = Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let c_z = random_matrix(&mut rng, d, n, 1.0);
        let r = random_spd(&mut rng, d);
        let z = Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let params = KalmanParams::new(
            Tensor::eye(n),
            Tensor::eye(n),
            Tensor::eye(n),
            c_z.clone(),
            Tensor::eye(n),
            Tensor::eye(n),
        )
        .unwrap();
        let mut tape = Tape::new();
        let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
        let prior = init_state(&mut tape, &mu, &sigma).unwrap();
        let zn = tape.constant(z.clone()).unwrap();
        let rn = tape.constant(r.clone()).unwrap();
        let post = update(&mut tape, &prior, zn, rn, &nodes).unwrap();

        // joint over (x, z): direct Gaussian conditioning
        let dim = n + d;
        let mut joint = Tensor::zeros(&[dim, dim]);
        let cs = c_z.matmul(&sigma).unwrap();
        let csc = cs.matmul(&c_z.transpose().unwrap()).unwrap().add(&r).unwrap();
        for i in 0..n {
            for j in 0..n {
                joint.set(i, j, sigma.at(i, j));
            }
            for j in 0..d {
                joint.set(i, n + j, cs.at(j, i));
                joint.set(n + j, i, cs.at(j, i));
            }
        }
        for i in 0..d {
            for j in 0..d {
                joint.set(n + i, n + j, csc.at(i, j));
            }
        }
        let mut mean = mu.data().to_vec();
        mean.extend_from_slice(c_z.matmul(&mu).unwrap().data());
        let (mu_c, sigma_c) = oracle::condition(
            &Tensor::vector(mean),
            &joint,
            &(0..n).collect::<Vec<_>>(),
            &(n..n + d).collect::<Vec<_>>(),
            &z,
        )
        .unwrap();
        for (a, b) in tape.value(post.mu).data().iter().zip(mu_c.data()) {
            assert!((a - b).abs() < 1e-10, "mean {a} vs {b}");
        }
        for (a, b) in tape.value(post.sigma).data().iter().zip(sigma_c.data()) {
            assert!((a - b).abs() < 1e-10, "cov {a} vs {b}");
        }
    }
}

#[test]
fn kf_cell_zero_packed_vector_is_unit_covariance_update() {
    let params = scalar_system(0.0);
    let mut tape = Tape::new();
    let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
    let prior = init_state(&mut tape, &Tensor::vector(vec![0.0]), &Tensor::from_rows(&[&[1.0]])).unwrap();
    let z = tape.constant(Tensor::vector(vec![2.0])).unwrap();
    let l_hat = tape.constant(Tensor::vector(vec![0.0])).unwrap();
    let post = kf_cell(&mut tape, &prior, z, l_hat, &nodes).unwrap();
    // exp(0) = 1 so R = 1: same numbers as the hand case
    assert_relative_eq!(tape.value(post.mu).data()[0], 1.0, epsilon = 1e-14);
    assert_relative_eq!(tape.value(post.sigma).data()[0], 0.5, epsilon = 1e-14);
}

#[test]
fn packed_covariance_is_positive_definite_for_any_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..20 {
        let mut tape = Tape::new();
        let l_hat = tape
            .constant(Tensor::vector((0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()))
            .unwrap();
        let l = tape.lower_triangular_expdiag(l_hat).unwrap();
        let lt = tape.transpose(l).unwrap();
        let r = tape.matmul(l, lt).unwrap();
        let min_eig = min_eigenvalue(tape.value(r)).unwrap();
        assert!(min_eig > 0.0, "min eigenvalue {min_eig}");
    }
}

#[test]
fn ekf_linearize_linear_dynamics_returns_a_exactly() {
    let a = Tensor::from_rows(&[&[0.9, 0.1], &[-0.2, 0.8]]);
    let dynamics = DynamicsFn::linear(a.clone());
    let mut tape = Tape::new();
    let state = init_state(&mut tape, &Tensor::vector(vec![0.3, -0.4]), &Tensor::eye(2)).unwrap();
    let jac = ekf_linearize(&mut tape, &state, &dynamics).unwrap();
    assert_eq!(tape.value(jac), &a);
}

#[test]
fn dynamics_jacobian_matches_finite_differences() {
    // mildly nonlinear two-state map with analytic Jacobian
    let dynamics = DynamicsFn::new(
        |x| {
            let (a, b) = (x.data()[0], x.data()[1]);
            Tensor::vector(vec![a + 0.1 * a * b, b + 0.05 * a * a])
        },
        |x| {
            let (a, b) = (x.data()[0], x.data()[1]);
            Tensor::from_rows(&[&[1.0 + 0.1 * b, 0.1 * a], &[0.1 * a, 1.0]])
        },
    );
    let x0 = Tensor::vector(vec![0.7, -0.3]);
    let jac = dynamics.jacobian_at(&x0);
    let eps = 1e-6;
    for j in 0..2 {
        let mut up = x0.clone();
        up.data_mut()[j] += eps;
        let mut down = x0.clone();
        down.data_mut()[j] -= eps;
        let fd = dynamics.eval(&up).sub(&dynamics.eval(&down)).unwrap().scale(1.0 / (2.0 * eps));
        for i in 0..2 {
            assert!((fd.data()[i] - jac.at(i, j)).abs() < 1e-8);
        }
    }
}

#[test]
fn output_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 3;
    let sigma = random_spd(&mut rng, n);
    let mu = Tensor::vector(vec![1.0, 2.0, 3.0]);

    // identity projection returns the belief unchanged
    let params = KalmanParams::new(
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::eye(n),
    )
    .unwrap();
    let mut tape = Tape::new();
    let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
    let state = init_state(&mut tape, &mu, &sigma).unwrap();
    let (y, cov) = output(&mut tape, &state, &nodes).unwrap();
    assert_eq!(tape.value(y), &mu);
    assert_eq!(tape.value(cov), &sigma);

    // zero projection collapses to zero
    let params0 = KalmanParams::new(
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::zeros(&[2, n]),
        Tensor::eye(n),
    )
    .unwrap();
    let mut tape0 = Tape::new();
    let nodes0 = KalmanNodes::register(&mut tape0, &params0).unwrap();
    let state0 = init_state(&mut tape0, &mu, &sigma).unwrap();
    let (y0, cov0) = output(&mut tape0, &state0, &nodes0).unwrap();
    assert_eq!(tape0.value(y0), &Tensor::zeros(&[2]));
    assert_eq!(tape0.value(cov0), &Tensor::zeros(&[2, 2]));

    // random projection stays positive semidefinite
    let c_y = random_matrix(&mut rng, 2, n, 1.0);
    let paramsr = KalmanParams::new(
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::eye(n),
        Tensor::eye(n),
        c_y,
        Tensor::eye(n),
    )
    .unwrap();
    let mut taper = Tape::new();
    let nodesr = KalmanNodes::register(&mut taper, &paramsr).unwrap();
    let stater = init_state(&mut taper, &mu, &sigma).unwrap();
    let (_, covr) = output(&mut taper, &stater, &nodesr).unwrap();
    assert!(min_eigenvalue(taper.value(covr)).unwrap() >= -1e-12);
}

#[test]
fn unroll_single_step_is_one_update() {
    let params = scalar_system(0.5);
    let mut tape = Tape::new();
    let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
    let init = init_state(&mut tape, &Tensor::vector(vec![0.0]), &Tensor::from_rows(&[&[1.0]])).unwrap();
    let z = tape.constant(Tensor::vector(vec![2.0])).unwrap();
    let l_hat = tape.constant(Tensor::vector(vec![0.0])).unwrap();
    let posts = unroll(&mut tape, &[z], &[l_hat], init, &nodes, &FilterMode::Kf).unwrap();
    assert_eq!(posts.len(), 1);
    assert_relative_eq!(tape.value(posts[0].mu).data()[0], 1.0, epsilon = 1e-14);
}

#[test]
fn covariance_contracts_at_every_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..10 {
        let n = rng.gen_range(2..=4);
        let d = rng.gen_range(1..=2);
        let params = KalmanParams::new(
            random_matrix(&mut rng, n, n, 0.6),
            random_matrix(&mut rng, n, n, 0.6),
            random_spd(&mut rng, n),
            random_matrix(&mut rng, d, n, 1.0),
            Tensor::eye(n),
            Tensor::eye(n),
        )
        .unwrap();
        let mut tape = Tape::new();
        let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
        let mut prior = init_state(
            &mut tape,
            &Tensor::zeros(&[n]),
            &random_spd(&mut rng, n),
        )
        .unwrap();
        for _ in 0..5 {
            let z = tape
                .constant(Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .unwrap();
            let l_hat = tape
                .constant(Tensor::vector(
                    (0..d * (d + 1) / 2).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                ))
                .unwrap();
            let prior_sigma = tape.value(prior.sigma).clone();
            let post = kf_cell(&mut tape, &prior, z, l_hat, &nodes).unwrap();
            let shrink = prior_sigma.sub(tape.value(post.sigma)).unwrap();
            assert!(
                min_eigenvalue(&shrink).unwrap() >= -1e-9,
                "posterior exceeded prior in PSD order"
            );
            prior = predict(&mut tape, &post, &nodes, &FilterMode::Kf).unwrap();
        }
    }
}

#[test]
fn covariances_stay_symmetric_over_long_unroll() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 4;
    let d = 2;
    let a = Tensor::from_rows(&[
        &[1.0, 0.0, 1.0, 0.0],
        &[0.0, 1.0, 0.0, 1.0],
        &[-0.05, 0.0, 0.9, 0.0],
        &[0.0, -0.05, 0.0, 0.9],
    ]);
    let b_w = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
    let params = KalmanParams::new(
        a,
        b_w,
        Tensor::eye(2).scale(0.25),
        Tensor::from_rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]),
        Tensor::from_rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]),
        Tensor::eye(n),
    )
    .unwrap();
    let mut tape = Tape::new();
    let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
    let init = init_state(&mut tape, &Tensor::zeros(&[n]), &Tensor::eye(n)).unwrap();
    let zs: Vec<_> = (0..100)
        .map(|_| {
            tape.constant(Tensor::vector(vec![
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ]))
            .unwrap()
        })
        .collect();
    let l_hats: Vec<_> = (0..100)
        .map(|_| {
            tape.constant(Tensor::vector(vec![
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-1.0..1.0),
            ]))
            .unwrap()
        })
        .collect();
    let posts = unroll(&mut tape, &zs, &l_hats, init, &nodes, &FilterMode::Kf).unwrap();
    for post in posts {
        let s = tape.value(post.sigma);
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                asym = asym.max((s.at(i, j) - s.at(j, i)).abs());
            }
        }
        assert!(asym < 1e-9, "asymmetry {asym}");
        assert!(min_eigenvalue(s).unwrap() >= -1e-9);
    }
}

#[test]
fn unroll_gradient_matches_finite_differences() {
    // d(loss)/dA through a 3-step unroll
    let a0 = Tensor::from_rows(&[&[0.9, 0.2], &[-0.1, 0.8]]);
    let zs = [
        Tensor::vector(vec![0.4]),
        Tensor::vector(vec![-0.3]),
        Tensor::vector(vec![0.8]),
    ];
    let report = grad_check(&[a0], 1e-5, |tape, p| {
        let b_w = tape.constant(Tensor::from_rows(&[&[1.0], &[0.5]]))?;
        let q = tape.constant(Tensor::from_rows(&[&[0.3]]))?;
        let c_z = tape.constant(Tensor::from_rows(&[&[1.0, 0.0]]))?;
        let c_y = tape.constant(Tensor::from_rows(&[&[1.0, 0.0]]))?;
        let nodes = KalmanNodes {
            a: p[0],
            b_w,
            q,
            c_z,
            c_y,
        };
        let init = init_state(tape, &Tensor::vector(vec![0.1, -0.2]), &Tensor::eye(2))?;
        let z_nodes: Vec<_> = zs
            .iter()
            .map(|z| tape.constant(z.clone()))
            .collect::<Result<_, _>>()?;
        let l_nodes: Vec<_> = (0..3)
            .map(|_| tape.constant(Tensor::vector(vec![0.1])))
            .collect::<Result<_, _>>()?;
        let posts = unroll(tape, &z_nodes, &l_nodes, init, &nodes, &FilterMode::Kf)?;
        let last = posts.last().unwrap();
        tape.sum_squares(last.mu)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "worst {}", report.max_rel_err);
}

#[test]
fn ekf_on_linear_dynamics_is_bitwise_equal_to_kf() {
    let a = Tensor::from_rows(&[&[0.95, 0.1], &[0.0, 0.9]]);
    let params = KalmanParams::new(
        a.clone(),
        Tensor::eye(2),
        Tensor::eye(2).scale(0.2),
        Tensor::from_rows(&[&[1.0, 0.0]]),
        Tensor::from_rows(&[&[1.0, 0.0]]),
        Tensor::eye(2),
    )
    .unwrap();
    let zs = [0.5, -0.2, 0.9, 0.1];

    let run = |mode: FilterMode| {
        let mut tape = Tape::new();
        let nodes = KalmanNodes::register(&mut tape, &params).unwrap();
        let init = init_state(&mut tape, &Tensor::vector(vec![0.2, -0.1]), &Tensor::eye(2)).unwrap();
        let z_nodes: Vec<_> = zs
            .iter()
            .map(|&z| tape.constant(Tensor::vector(vec![z])).unwrap())
            .collect();
        let l_nodes: Vec<_> = (0..zs.len())
            .map(|_| tape.constant(Tensor::vector(vec![-0.2])).unwrap())
            .collect();
        let posts = unroll(&mut tape, &z_nodes, &l_nodes, init, &nodes, &mode).unwrap();
        posts
            .iter()
            .flat_map(|s| {
                tape.value(s.mu)
                    .data()
                    .iter()
                    .chain(tape.value(s.sigma).data())
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };

    let kf_bits = run(FilterMode::Kf);
    let ekf_bits = run(FilterMode::Ekf(DynamicsFn::linear(a)));
    assert_eq!(kf_bits, ekf_bits);
}
