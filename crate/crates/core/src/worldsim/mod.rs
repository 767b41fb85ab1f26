//! Seeded synthetic worlds: spring-drag disk tracking and dot-texture
//! ego-motion, with rendering and dataset serialization.
//!
//! Generation is a pure function of (config, seed). Sequence `i` draws
//! from its own RNG stream seeded `base_seed + i`, so parallel and
//! serial generation produce identical bytes.

mod render;

pub use render::{render_ego_frame, render_frame, Disk};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kalman::{DynamicsFn, KalmanError, KalmanParams};
use crate::linalg::spectral_radius_2x2;
use crate::pack::{PackError, TensorPack};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("unstable disk dynamics: per-axis spectral radius {spectral_radius} >= 1")]
    UnstableDynamics { spectral_radius: f64 },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error("dataset is not a {expected} file (format tag {got:?})")]
    WrongFormat { expected: &'static str, got: String },
}

/// Disk-tracking world. Positions are in pixels with the origin at the
/// frame center, so the spring equilibrium is the zero state and the
/// dynamics stay strictly linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiskWorldConfig {
    pub image_size: usize,
    pub num_distractors: usize,
    pub steps: usize,
    pub spring_k: f64,
    pub drag_c: f64,
    pub dt: f64,
    pub process_noise_std: f64,
    pub target_radius: f64,
    pub distractor_radius_min: f64,
    pub distractor_radius_max: f64,
    pub seed: u64,
}

impl Default for DiskWorldConfig {
    fn default() -> Self {
        DiskWorldConfig::for_image_size(32)
    }
}

impl DiskWorldConfig {
    /// Defaults with radii scaled to the frame size.
    pub fn for_image_size(image_size: usize) -> Self {
        let s = image_size as f64;
        DiskWorldConfig {
            image_size,
            num_distractors: 30,
            steps: 100,
            spring_k: 0.05,
            drag_c: 0.1,
            dt: 1.0,
            process_noise_std: 0.5,
            target_radius: s / 16.0,
            distractor_radius_min: s / 32.0,
            distractor_radius_max: s / 8.0,
            seed: 0,
        }
    }
}

/// Position and velocity of one disk, in pixels and pixels per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl DiskState {
    pub fn as_vector(&self) -> Tensor {
        Tensor::vector(vec![
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
        ])
    }

    pub fn from_vector(v: &Tensor) -> Self {
        DiskState {
            position: [v.data()[0], v.data()[1]],
            velocity: [v.data()[2], v.data()[3]],
        }
    }
}

/// The discrete spring-drag dynamics as filter-ready matrices. State
/// order is `(px, py, vx, vy)`; noise enters the velocity rows only.
pub fn disk_dynamics_matrices(
    config: &DiskWorldConfig,
) -> Result<(Tensor, Tensor, Tensor), WorldError> {
    let dt = config.dt;
    let k = config.spring_k;
    let c = config.drag_c;
    let axis = Tensor::from_rows(&[&[1.0, dt], &[-k * dt, 1.0 - c * dt]]);
    let radius = spectral_radius_2x2(&axis);
    // the marginally stable force-free integrator (radius exactly 1) is a
    // legitimate model; genuine growth is not
    if radius > 1.0 {
        return Err(WorldError::UnstableDynamics {
            spectral_radius: radius,
        });
    }
    let a = Tensor::from_rows(&[
        &[1.0, 0.0, dt, 0.0],
        &[0.0, 1.0, 0.0, dt],
        &[-k * dt, 0.0, 1.0 - c * dt, 0.0],
        &[0.0, -k * dt, 0.0, 1.0 - c * dt],
    ]);
    let b_w = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
    let q = Tensor::eye(2).scale(config.process_noise_std * config.process_noise_std);
    Ok((a, b_w, q))
}

/// Filter parameters for the tracking task: the simulator matrices with
/// position observations and position labels. Nothing is learnable; the
/// model parameters are assumed known.
pub fn tracking_kalman_params(config: &DiskWorldConfig) -> Result<KalmanParams, WorldError> {
    let (a, b_w, q) = disk_dynamics_matrices(config)?;
    let c_pos = Tensor::from_rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
    Ok(KalmanParams::new(
        a,
        b_w,
        q,
        c_pos.clone(),
        c_pos,
        Tensor::eye(4),
    )?)
}

/// One dynamics step `x <- A x + B_w w` with `w ~ N(0, Q)` drawn from
/// the supplied stream.
pub fn step_disk(
    state: &DiskState,
    a: &Tensor,
    b_w: &Tensor,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> DiskState {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let w = Tensor::vector(vec![
        noise_std * normal.sample(rng),
        noise_std * normal.sample(rng),
    ]);
    let pushed = a
        .matmul(&state.as_vector())
        .expect("dynamics dims")
        .add(&b_w.matmul(&w).expect("noise dims"))
        .expect("same dims");
    DiskState::from_vector(&pushed)
}

/// Image sequence stored compactly as f32, `T x H x W x C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSeq {
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageSeq {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Frame `t` widened to an f64 tensor for graph consumption.
    pub fn frame(&self, t: usize) -> Tensor {
        let len = self.frame_len();
        let slice = &self.data[t * len..(t + 1) * len];
        Tensor::new(
            vec![self.height, self.width, self.channels],
            slice.iter().map(|&v| v as f64).collect(),
        )
        .expect("sized frame")
    }
}

/// One (images, labels, initial state) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub images: ImageSeq,
    /// `T x p` labels.
    pub labels: Tensor,
    /// Ground-truth state at the first step.
    pub init_state: Tensor,
}

impl SequenceSample {
    pub fn label_at(&self, t: usize) -> Tensor {
        let p = self.labels.cols();
        Tensor::vector(self.labels.data()[t * p..(t + 1) * p].to_vec())
    }
}

/// Which world generated a dataset, echoed into the serialized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task")]
pub enum TaskConfig {
    Tracking(DiskWorldConfig),
    Ego(EgoWorldConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub sequences: Vec<SequenceSample>,
    pub config: TaskConfig,
    pub base_seed: u64,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// `(T, H, W, C, p, n)` of the common sequence layout.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize, usize) {
        let s = &self.sequences[0];
        (
            s.images.steps,
            s.images.height,
            s.images.width,
            s.images.channels,
            s.labels.cols(),
            s.init_state.numel(),
        )
    }

    /// Concatenates datasets with identical sequence layout; the config
    /// echo keeps the first dataset's config.
    pub fn merge(parts: Vec<SequenceDataset>) -> Result<SequenceDataset, WorldError> {
        let mut iter = parts.into_iter();
        let mut merged = iter
            .next()
            .ok_or_else(|| WorldError::BadConfig("merge of zero datasets".into()))?;
        let dims = merged.dims();
        for part in iter {
            if part.dims() != dims {
                return Err(WorldError::BadConfig(format!(
                    "layout mismatch in merge: {:?} vs {:?}",
                    part.dims(),
                    dims
                )));
            }
            merged.sequences.extend(part.sequences);
        }
        Ok(merged)
    }
}

fn sample_distractor_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // uniform RGB, excluding a ball around pure red so the target stays
    // identifiable in principle
    loop {
        let c = [
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        ];
        let d2 = (c[0] - 1.0) * (c[0] - 1.0) + c[1] * c[1] + c[2] * c[2];
        if d2 >= 0.3 * 0.3 {
            return c;
        }
    }
}

fn sample_disk_init(config: &DiskWorldConfig, rng: &mut ChaCha8Rng) -> DiskState {
    let half = config.image_size as f64 / 2.0;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    DiskState {
        position: [
            rng.gen_range(-0.8 * half..0.8 * half),
            rng.gen_range(-0.8 * half..0.8 * half),
        ],
        velocity: [normal.sample(rng), normal.sample(rng)],
    }
}

fn generate_tracking_sequence(
    config: &DiskWorldConfig,
    seed: u64,
) -> Result<SequenceSample, WorldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b_w, _q) = disk_dynamics_matrices(config)?;
    let t_len = config.steps;
    let hw = config.image_size;

    let mut target = sample_disk_init(config, &mut rng);
    let mut distractors: Vec<Disk> = (0..config.num_distractors)
        .map(|_| {
            let state = sample_disk_init(config, &mut rng);
            let radius =
                rng.gen_range(config.distractor_radius_min..=config.distractor_radius_max);
            let color = sample_distractor_color(&mut rng);
            Disk {
                center: state.position,
                radius,
                color,
                velocity: state.velocity,
            }
        })
        .collect();

    let init_state = target.as_vector();
    let mut labels = vec![0.0; t_len * 2];
    let mut data = vec![0.0f32; t_len * hw * hw * 3];
    let frame_len = hw * hw * 3;
    for t in 0..t_len {
        labels[t * 2] = target.position[0];
        labels[t * 2 + 1] = target.position[1];
        let target_disk = Disk {
            center: target.position,
            radius: config.target_radius,
            color: [1.0, 0.0, 0.0],
            velocity: target.velocity,
        };
        render_frame(
            &target_disk,
            &distractors,
            hw,
            &mut data[t * frame_len..(t + 1) * frame_len],
        );
        if t + 1 < t_len {
            target = step_disk(&target, &a, &b_w, config.process_noise_std, &mut rng);
            for disk in &mut distractors {
                let state = DiskState {
                    position: disk.center,
                    velocity: disk.velocity,
                };
                let next = step_disk(&state, &a, &b_w, config.process_noise_std, &mut rng);
                disk.center = next.position;
                disk.velocity = next.velocity;
            }
        }
    }
    Ok(SequenceSample {
        images: ImageSeq {
            steps: t_len,
            height: hw,
            width: hw,
            channels: 3,
            data,
        },
        labels: Tensor::new(vec![t_len, 2], labels).expect("sized"),
        init_state,
    })
}

/// Generates `count` tracking sequences; sequence `i` uses the stream
/// seeded `config.seed + i`.
pub fn generate_tracking_dataset(
    config: &DiskWorldConfig,
    count: usize,
) -> Result<SequenceDataset, WorldError> {
    if count == 0 {
        return Err(WorldError::BadConfig("count must be at least 1".into()));
    }
    let sequences: Vec<SequenceSample> = (0..count)
        .into_par_iter()
        .map(|i| generate_tracking_sequence(config, config.seed + i as u64))
        .collect::<Result<_, _>>()?;
    Ok(SequenceDataset {
        sequences,
        config: TaskConfig::Tracking(config.clone()),
        base_seed: config.seed,
    })
}

/// Dot-texture ego-motion world. Poses live in world units; rendering
/// maps them through `pixels_per_unit` into an ego-centric view with
/// the heading pointing up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoWorldConfig {
    pub image_size: usize,
    pub steps: usize,
    pub dt: f64,
    pub velocity_noise_std: f64,
    pub turn_noise_std: f64,
    pub dot_density: f64,
    pub dot_radius_px: f64,
    pub pixels_per_unit: f64,
    pub seed: u64,
}

impl Default for EgoWorldConfig {
    fn default() -> Self {
        EgoWorldConfig {
            image_size: 32,
            steps: 50,
            dt: 0.2,
            velocity_noise_std: 0.02,
            turn_noise_std: 0.02,
            dot_density: 0.5,
            dot_radius_px: 1.5,
            pixels_per_unit: 8.0,
            seed: 0,
        }
    }
}

/// Unicycle step on the five-state vector `(x, y, theta, v, omega)`.
pub fn ego_dynamics(state: &Tensor, dt: f64) -> (Tensor, Tensor) {
    let (x, y, theta, v, omega) = (
        state.data()[0],
        state.data()[1],
        state.data()[2],
        state.data()[3],
        state.data()[4],
    );
    let next = Tensor::vector(vec![
        x + v * theta.cos() * dt,
        y + v * theta.sin() * dt,
        theta + omega * dt,
        v,
        omega,
    ]);
    let jac = Tensor::from_rows(&[
        &[1.0, 0.0, -v * theta.sin() * dt, theta.cos() * dt, 0.0],
        &[0.0, 1.0, v * theta.cos() * dt, theta.sin() * dt, 0.0],
        &[0.0, 0.0, 1.0, 0.0, dt],
        &[0.0, 0.0, 0.0, 1.0, 0.0],
        &[0.0, 0.0, 0.0, 0.0, 1.0],
    ]);
    (next, jac)
}

/// The unicycle as a filter-ready dynamics map.
pub fn ego_dynamics_fn(dt: f64) -> DynamicsFn {
    DynamicsFn::new(
        move |x| ego_dynamics(x, dt).0,
        move |x| ego_dynamics(x, dt).1,
    )
}

/// Filter parameters for the ego task: unicycle state, velocity
/// observations, pose labels. The process-noise covariance is marked
/// learnable, matching how the odometry filter is trained.
pub fn ego_kalman_params(config: &EgoWorldConfig) -> Result<KalmanParams, WorldError> {
    let b_w = Tensor::from_rows(&[
        &[0.0, 0.0],
        &[0.0, 0.0],
        &[0.0, 0.0],
        &[1.0, 0.0],
        &[0.0, 1.0],
    ]);
    let q = Tensor::from_rows(&[
        &[config.velocity_noise_std * config.velocity_noise_std, 0.0],
        &[0.0, config.turn_noise_std * config.turn_noise_std],
    ]);
    let c_z = Tensor::from_rows(&[
        &[0.0, 0.0, 0.0, 1.0, 0.0],
        &[0.0, 0.0, 0.0, 0.0, 1.0],
    ]);
    let c_y = Tensor::from_rows(&[
        &[1.0, 0.0, 0.0, 0.0, 0.0],
        &[0.0, 1.0, 0.0, 0.0, 0.0],
        &[0.0, 0.0, 1.0, 0.0, 0.0],
    ]);
    let mut params = KalmanParams::new(
        Tensor::eye(5),
        b_w,
        q,
        c_z,
        c_y,
        Tensor::eye(5),
    )?;
    params.learnable.q = true;
    Ok(params)
}

/// Integrates raw velocity observations through the unicycle map from
/// the ground-truth initial pose: the dead-reckoning baseline.
///
/// `zs[t]` estimates the velocity over the step leading into frame
/// `t + 1`, so the first pose is the initial pose itself and `zs[0]`
/// is not consumed.
pub fn dead_reckon_poses(init_state: &Tensor, zs: &[Tensor], dt: f64) -> Vec<Tensor> {
    let mut pose = Tensor::vector(init_state.data()[..3].to_vec());
    let mut out = Vec::with_capacity(zs.len());
    out.push(pose.clone());
    for z in zs.iter().skip(1) {
        let (x, y, theta) = (pose.data()[0], pose.data()[1], pose.data()[2]);
        let (v, omega) = (z.data()[0], z.data()[1]);
        pose = Tensor::vector(vec![
            x + v * theta.cos() * dt,
            y + v * theta.sin() * dt,
            theta + omega * dt,
        ]);
        out.push(pose.clone());
    }
    out
}

fn generate_ego_sequence(config: &EgoWorldConfig, seed: u64) -> Result<SequenceSample, WorldError> {
    if !(0.0 < config.dot_density && config.dot_density < 1.0) {
        return Err(WorldError::BadConfig(format!(
            "dot_density must be in (0, 1), got {}",
            config.dot_density
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = config.steps;
    let hw = config.image_size;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // initial state: origin pose with random heading and gentle motion
    let theta0 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let v0 = rng.gen_range(0.5..1.2);
    let omega0 = rng.gen_range(-0.3..0.3);
    let mut state = Tensor::vector(vec![0.0, 0.0, theta0, v0, omega0]);

    // dot field sized to cover the whole reachable area plus the view
    let view_half = hw as f64 / (2.0 * config.pixels_per_unit);
    let reach = 1.5 * config.dt * t_len as f64;
    let extent = reach + 2.0 * view_half + 1.0;
    let num_dots = (config.dot_density * (2.0 * extent) * (2.0 * extent)).round() as usize;
    let dots: Vec<[f64; 2]> = (0..num_dots)
        .map(|_| {
            [
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
            ]
        })
        .collect();

    // states s_0 .. s_T, frames rendered at each
    let mut states = Vec::with_capacity(t_len + 1);
    states.push(state.clone());
    for _ in 0..t_len {
        let (mut next, _) = ego_dynamics(&state, config.dt);
        next.data_mut()[3] += config.velocity_noise_std * normal.sample(&mut rng);
        next.data_mut()[4] += config.turn_noise_std * normal.sample(&mut rng);
        states.push(next.clone());
        state = next;
    }
    let frames: Vec<Vec<f32>> = states
        .iter()
        .map(|s| {
            let mut frame = vec![0.0f32; hw * hw * 3];
            render_ego_frame(
                &dots,
                [s.data()[0], s.data()[1], s.data()[2]],
                config,
                &mut frame,
            );
            frame
        })
        .collect();

    // item t (1-based) pairs frame t with frame t-1: 6 channels
    let frame_px = hw * hw;
    let mut data = vec![0.0f32; t_len * frame_px * 6];
    for t in 1..=t_len {
        let dst = &mut data[(t - 1) * frame_px * 6..t * frame_px * 6];
        let cur = &frames[t];
        let prev = &frames[t - 1];
        for p in 0..frame_px {
            dst[p * 6..p * 6 + 3].copy_from_slice(&cur[p * 3..p * 3 + 3]);
            dst[p * 6 + 3..p * 6 + 6].copy_from_slice(&prev[p * 3..p * 3 + 3]);
        }
    }
    let mut labels = vec![0.0; t_len * 3];
    for t in 1..=t_len {
        labels[(t - 1) * 3..t * 3].copy_from_slice(&states[t].data()[..3]);
    }
    Ok(SequenceSample {
        images: ImageSeq {
            steps: t_len,
            height: hw,
            width: hw,
            channels: 6,
            data,
        },
        labels: Tensor::new(vec![t_len, 3], labels).expect("sized"),
        init_state: states[1].clone(),
    })
}

/// Generates `count` ego-motion sequences with per-sequence streams.
pub fn generate_ego_dataset(
    config: &EgoWorldConfig,
    count: usize,
) -> Result<SequenceDataset, WorldError> {
    if count == 0 {
        return Err(WorldError::BadConfig("count must be at least 1".into()));
    }
    let sequences: Vec<SequenceSample> = (0..count)
        .into_par_iter()
        .map(|i| generate_ego_sequence(config, config.seed + i as u64))
        .collect::<Result<_, _>>()?;
    Ok(SequenceDataset {
        sequences,
        config: TaskConfig::Ego(config.clone()),
        base_seed: config.seed,
    })
}

/// Per-step velocity targets for encoder pretraining, recovered by
/// finite-differencing consecutive pose labels. The first step has no
/// preceding label, so targets start at step 1 (0-based).
pub fn velocity_targets_from_labels(sample: &SequenceSample, dt: f64) -> Vec<(usize, Tensor)> {
    let t_len = sample.labels.rows();
    let mut out = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 1..t_len {
        let prev = sample.label_at(t - 1);
        let cur = sample.label_at(t);
        let (dx, dy) = (
            cur.data()[0] - prev.data()[0],
            cur.data()[1] - prev.data()[1],
        );
        let heading = prev.data()[2];
        let v = (dx * heading.cos() + dy * heading.sin()) / dt;
        let omega = (cur.data()[2] - prev.data()[2]) / dt;
        out.push((t, Tensor::vector(vec![v, omega])));
    }
    out
}

const DATASET_FORMAT_TAG: &str = "bkf-dataset";

/// Serializes a dataset into a single TensorPack file. Images stay f32;
/// labels and states are f64.
pub fn save_dataset(ds: &SequenceDataset, path: impl AsRef<std::path::Path>) -> Result<(), WorldError> {
    let mut pack = TensorPack::new();
    pack.insert_text("meta/format", DATASET_FORMAT_TAG)?;
    pack.insert_text(
        "meta/config",
        &serde_json::to_string(&ds.config).expect("config serializes"),
    )?;
    pack.insert_tensor("meta/base_seed", &Tensor::scalar(ds.base_seed as f64))?;
    pack.insert_tensor("meta/count", &Tensor::scalar(ds.len() as f64))?;
    for (i, seq) in ds.sequences.iter().enumerate() {
        let im = &seq.images;
        pack.insert_f32(
            &format!("seq{i:05}/images"),
            vec![im.steps, im.height, im.width, im.channels],
            im.data.clone(),
        )?;
        pack.insert_tensor(&format!("seq{i:05}/labels"), &seq.labels)?;
        pack.insert_tensor(&format!("seq{i:05}/init"), &seq.init_state)?;
    }
    pack.write_to(path)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<std::path::Path>) -> Result<SequenceDataset, WorldError> {
    let pack = TensorPack::read_from(path)?;
    let tag = pack.text("meta/format")?;
    if tag != DATASET_FORMAT_TAG {
        return Err(WorldError::WrongFormat {
            expected: DATASET_FORMAT_TAG,
            got: tag,
        });
    }
    let config: TaskConfig = serde_json::from_str(&pack.text("meta/config")?)
        .map_err(|e| WorldError::BadConfig(format!("config echo unreadable: {e}")))?;
    let base_seed = pack.tensor("meta/base_seed")?.item() as u64;
    let count = pack.tensor("meta/count")?.item() as usize;
    let mut sequences = Vec::with_capacity(count);
    for i in 0..count {
        let entry = pack.require(&format!("seq{i:05}/images"))?;
        let crate::pack::TensorData::F32(img) = &entry.data else {
            return Err(WorldError::BadConfig("image payload must be f32".into()));
        };
        let dims = entry.dims.clone();
        sequences.push(SequenceSample {
            images: ImageSeq {
                steps: dims[0],
                height: dims[1],
                width: dims[2],
                channels: dims[3],
                data: img.clone(),
            },
            labels: pack.tensor(&format!("seq{i:05}/labels"))?,
            init_state: pack.tensor(&format!("seq{i:05}/init"))?,
        });
    }
    Ok(SequenceDataset {
        sequences,
        config,
        base_seed,
    })
}

#[cfg(test)]
mod tests;
