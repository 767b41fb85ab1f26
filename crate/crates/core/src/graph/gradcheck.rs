//! Finite-difference verification of tape adjoints.
//!
//! `grad_check` compares analytic gradients against central differences
//! for an arbitrary graph builder; `op_fd_suite` runs it over randomized
//! instances of every differentiable primitive and is the backbone of
//! the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NodeId, Padding, Result, Tape};
use crate::tensor::Tensor;

/// Relative-error floor: below this magnitude both gradients are treated
/// as equal-scale so finite-difference rounding noise does not dominate.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_FLOOR)
}

/// Central-difference check of every parameter coordinate.
///
/// `build` must be deterministic: called repeatedly with perturbed
/// parameter values, it must construct the same graph each time. The
/// parameters are registered by this harness in `inits` order before
/// `build` runs.
pub fn grad_check<F>(inits: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let loss_at = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values
            .iter()
            .map(|t| tape.parameter(t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inits
        .iter()
        .map(|t| tape.parameter(t.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
    };
    let mut work: Vec<Tensor> = inits.to_vec();
    for (p, init) in inits.iter().enumerate() {
        let analytic = grads.wrt(ids[p]).clone();
        for c in 0..init.numel() {
            let base = init.data()[c];
            work[p].data_mut()[c] = base + eps;
            let up = loss_at(&work)?;
            work[p].data_mut()[c] = base - eps;
            let down = loss_at(&work)?;
            work[p].data_mut()[c] = base;
            let fd = (up - down) / (2.0 * eps);
            let re = rel_err(analytic.data()[c], fd);
            if re > report.max_rel_err {
                report.max_rel_err = re;
                report.worst_param = p;
                report.worst_coord = c;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckScale {
    Tiny,
    Small,
}

impl CheckScale {
    fn instances(self) -> usize {
        match self {
            CheckScale::Tiny => 20,
            CheckScale::Small => 40,
        }
    }
}

/// Outcome of the finite-difference sweep for one op.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: String,
    pub instances: usize,
    pub worst: f64,
    pub threshold: f64,
    pub location: String,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.threshold
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product::<usize>().max(1);
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("sized")
}

/// Uniform samples bounded away from zero, for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product::<usize>().max(1);
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let mag = rng.gen_range(0.2..1.2);
                if rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
    )
    .expect("sized")
}

/// Samples with every pairwise gap above `min_gap`, so an `eps`
/// perturbation cannot flip a pooling argmax.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize], min_gap: f64) -> Tensor {
    loop {
        let t = uniform(rng, shape, -1.0, 1.0);
        let mut sorted = t.data().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        if sorted.windows(2).all(|w| w[1] - w[0] > min_gap) {
            return t;
        }
    }
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let m = uniform(rng, &[n, n], -1.0, 1.0);
    let mut a = m
        .matmul(&m.transpose().expect("matrix"))
        .expect("square product");
    for i in 0..n {
        let v = a.at(i, i) + n as f64;
        a.set(i, i, v);
    }
    a
}

/// Weighted-sum scalar head so the adjoint of `out` is the weight tensor.
fn weighted_loss(tape: &mut Tape, out: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = tape.constant(weights.clone())?;
    let prod = tape.mul_elem(out, w)?;
    tape.sum(prod)
}

type Builder = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

struct Instance {
    inits: Vec<Tensor>,
    build: Builder,
}

fn one_check(
    name: &str,
    scale: CheckScale,
    threshold: f64,
    seed: u64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Instance,
) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = OpCheck {
        op: name.to_string(),
        instances: scale.instances(),
        worst: 0.0,
        threshold,
        location: String::from("-"),
    };
    for i in 0..scale.instances() {
        let inst = make(&mut rng);
        let report = grad_check(&inst.inits, 1e-5, inst.build)?;
        if report.max_rel_err > check.worst {
            check.worst = report.max_rel_err;
            check.location = format!(
                "instance {} param {} coord {}",
                i, report.worst_param, report.worst_coord
            );
        }
    }
    Ok(check)
}

/// Runs the finite-difference sweep over every differentiable primitive.
///
/// With `inject_fault` set, an extra group built on a deliberately broken
/// relu adjoint is appended; a healthy harness must flag it.
pub fn op_fd_suite(scale: CheckScale, inject_fault: bool) -> Result<Vec<OpCheck>> {
    let mut checks = Vec::new();
    let w2 = |rng: &mut ChaCha8Rng, shape: &[usize]| uniform(rng, shape, -1.0, 1.0);

    checks.push(one_check("matmul", scale, 1e-6, 11, |rng| {
        let a = uniform(rng, &[2, 3], -1.0, 1.0);
        let b = uniform(rng, &[3, 2], -1.0, 1.0);
        let w = w2(rng, &[2, 2]);
        Instance {
            inits: vec![a, b],
            build: Box::new(move |tape, p| {
                let out = tape.matmul(p[0], p[1])?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    checks.push(one_check("matmul_vec", scale, 1e-6, 12, |rng| {
        let a = uniform(rng, &[3, 4], -1.0, 1.0);
        let x = uniform(rng, &[4], -1.0, 1.0);
        let w = w2(rng, &[3]);
        Instance {
            inits: vec![a, x],
            build: Box::new(move |tape, p| {
                let out = tape.matmul(p[0], p[1])?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    checks.push(one_check("add_sub_scale", scale, 1e-6, 13, |rng| {
        let a = uniform(rng, &[2, 3], -1.0, 1.0);
        let b = uniform(rng, &[2, 3], -1.0, 1.0);
        let c = uniform(rng, &[2, 3], -1.0, 1.0);
        let w = w2(rng, &[2, 3]);
        Instance {
            inits: vec![a, b],
            build: Box::new(move |tape, p| {
                let s = tape.add(p[0], p[1])?;
                let cc = tape.constant(c.clone())?;
                let d = tape.sub(s, cc)?;
                let sc = tape.scale(d, 1.7)?;
                weighted_loss(tape, sc, &w)
            }),
        }
    })?);

    checks.push(one_check("mul_elem", scale, 1e-6, 14, |rng| {
        let a = uniform(rng, &[5], -1.0, 1.0);
        let b = uniform(rng, &[5], -1.0, 1.0);
        let w = w2(rng, &[5]);
        Instance {
            inits: vec![a, b],
            build: Box::new(move |tape, p| {
                let out = tape.mul_elem(p[0], p[1])?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    checks.push(one_check("reshape_transpose", scale, 1e-6, 15, |rng| {
        let a = uniform(rng, &[6], -1.0, 1.0);
        let w = w2(rng, &[3, 2]);
        Instance {
            inits: vec![a],
            build: Box::new(move |tape, p| {
                let m = tape.reshape(p[0], vec![2, 3])?;
                let t = tape.transpose(m)?;
                weighted_loss(tape, t, &w)
            }),
        }
    })?);

    checks.push(one_check("concat_slice_gather", scale, 1e-6, 16, |rng| {
        let a = uniform(rng, &[3], -1.0, 1.0);
        let b = uniform(rng, &[4], -1.0, 1.0);
        let w = w2(rng, &[3]);
        Instance {
            inits: vec![a, b],
            build: Box::new(move |tape, p| {
                let cat = tape.concat(p[0], p[1])?;
                let sl = tape.slice(cat, 1, 5)?;
                let g = tape.gather(sl, &[0, 2, 4])?;
                weighted_loss(tape, g, &w)
            }),
        }
    })?);

    checks.push(one_check("sum_squares", scale, 1e-6, 17, |rng| {
        let a = uniform(rng, &[2, 2], -1.0, 1.0);
        Instance {
            inits: vec![a],
            build: Box::new(move |tape, p| tape.sum_squares(p[0])),
        }
    })?);

    checks.push(one_check("relu", scale, 1e-6, 18, |rng| {
        let a = away_from_zero(rng, &[7]);
        let w = w2(rng, &[7]);
        Instance {
            inits: vec![a],
            build: Box::new(move |tape, p| {
                let out = tape.relu(p[0])?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    checks.push(one_check("exp", scale, 1e-6, 19, |rng| {
        let a = uniform(rng, &[5], -1.0, 1.0);
        let w = w2(rng, &[5]);
        Instance {
            inits: vec![a],
            build: Box::new(move |tape, p| {
                let out = tape.exp(p[0])?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    checks.push(one_check("ln", scale, 1e-6, 20, |rng| {
        let a = uniform(rng, &[5], 0.5, 2.0);
        let w = w2(rng, &[5]);
        Instance {
            inits: vec![a],
            build: Box::new(move |tape, p| {
                let out = tape.ln(p[0])?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    checks.push(one_check("sigmoid_tanh", scale, 1e-6, 21, |rng| {
        let a = uniform(rng, &[6], -2.0, 2.0);
        let w = w2(rng, &[6]);
        Instance {
            inits: vec![a],
            build: Box::new(move |tape, p| {
                let s = tape.sigmoid(p[0])?;
                let t = tape.tanh(s)?;
                weighted_loss(tape, t, &w)
            }),
        }
    })?);

    checks.push(one_check("dropout", scale, 1e-6, 22, |rng| {
        let a = uniform(rng, &[8], -1.0, 1.0);
        let w = w2(rng, &[8]);
        let mask_seed: u64 = rng.gen();
        Instance {
            inits: vec![a],
            build: Box::new(move |tape, p| {
                // fixed seed so rebuilds draw the identical mask
                let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                let out = tape.dropout(p[0], 0.8, &mut mask_rng)?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    for (name, padding, seed) in [
        ("conv2d_same", Padding::Same, 23u64),
        ("conv2d_valid", Padding::Valid, 24u64),
    ] {
        checks.push(one_check(name, scale, 1e-6, seed, |rng| {
            let input = uniform(rng, &[6, 5, 2], -1.0, 1.0);
            let kernel = uniform(rng, &[3, 3, 2, 3], -1.0, 1.0);
            let stride = if rng.gen::<bool>() { (1, 1) } else { (2, 2) };
            let (oh, ow) = match padding {
                Padding::Same => (6usize.div_ceil(stride.0), 5usize.div_ceil(stride.1)),
                Padding::Valid => ((6 - 3) / stride.0 + 1, (5 - 3) / stride.1 + 1),
            };
            let w = w2(rng, &[oh, ow, 3]);
            Instance {
                inits: vec![input, kernel],
                build: Box::new(move |tape, p| {
                    let out = tape.conv2d(p[0], p[1], stride, padding)?;
                    weighted_loss(tape, out, &w)
                }),
            }
        })?);
    }

    checks.push(one_check("channel_bias", scale, 1e-6, 25, |rng| {
        let input = uniform(rng, &[4, 4, 3], -1.0, 1.0);
        let bias = uniform(rng, &[3], -1.0, 1.0);
        let w = w2(rng, &[4, 4, 3]);
        Instance {
            inits: vec![input, bias],
            build: Box::new(move |tape, p| {
                let out = tape.channel_bias(p[0], p[1])?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    checks.push(one_check("max_pool", scale, 1e-6, 26, |rng| {
        let input = well_separated(rng, &[4, 4, 2], 1e-3);
        let w = w2(rng, &[2, 2, 2]);
        Instance {
            inits: vec![input],
            build: Box::new(move |tape, p| {
                let out = tape.max_pool(p[0], (2, 2), (2, 2))?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    checks.push(one_check("response_norm", scale, 1e-6, 27, |rng| {
        let x = uniform(rng, &[3, 3, 2], -1.0, 1.0);
        let mean = uniform(rng, &[] as &[usize], -0.5, 0.5);
        let log_var = uniform(rng, &[] as &[usize], -0.5, 0.5);
        let w = w2(rng, &[3, 3, 2]);
        Instance {
            inits: vec![x, mean, log_var],
            build: Box::new(move |tape, p| {
                let out = tape.response_norm(p[0], p[1], p[2])?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    checks.push(one_check("spd_solve", scale, 1e-5, 28, |rng| {
        let a = spd(rng, 4);
        let b = uniform(rng, &[4, 2], -1.0, 1.0);
        let w = w2(rng, &[4, 2]);
        Instance {
            inits: vec![a, b],
            build: Box::new(move |tape, p| {
                let out = tape.spd_solve(p[0], p[1])?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    checks.push(one_check("lower_triangular_expdiag", scale, 1e-6, 29, |rng| {
        let packed = uniform(rng, &[6], -1.0, 1.0);
        let w = w2(rng, &[3, 3]);
        Instance {
            inits: vec![packed],
            build: Box::new(move |tape, p| {
                let out = tape.lower_triangular_expdiag(p[0])?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    checks.push(one_check("map_with_jacobian", scale, 1e-6, 30, |rng| {
        let x = uniform(rng, &[3], -1.0, 1.0);
        let w = w2(rng, &[3]);
        Instance {
            inits: vec![x],
            build: Box::new(move |tape, p| {
                let xv = tape.value(p[0]).clone();
                let (x0, x1, x2) = (xv.data()[0], xv.data()[1], xv.data()[2]);
                let value = Tensor::vector(vec![x0 * x0, x0 * x1, x1 * x1 + x2]);
                let jac = Tensor::from_rows(&[
                    &[2.0 * x0, 0.0, 0.0],
                    &[x1, x0, 0.0],
                    &[0.0, 2.0 * x1, 1.0],
                ]);
                let out = tape.map_with_jacobian(p[0], value, jac)?;
                weighted_loss(tape, out, &w)
            }),
        }
    })?);

    if inject_fault {
        checks.push(one_check("relu[injected-fault]", scale, 1e-6, 31, |rng| {
            let a = away_from_zero(rng, &[7]);
            let w = w2(rng, &[7]);
            Instance {
                inits: vec![a],
                build: Box::new(move |tape, p| {
                    let out = tape.relu_with_broken_adjoint(p[0])?;
                    weighted_loss(tape, out, &w)
                }),
            }
        })?);
    }

    Ok(checks)
}
