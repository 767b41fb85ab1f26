//! Rasterization of disk scenes and ego-centric dot fields.
//!
//! Pixels are composited painter-style in draw order with 2x2 subpixel
//! coverage averaging, so sub-pixel motion shows up in the intensities.

use super::EgoWorldConfig;

/// A renderable disk: world-pixel center, radius, color, and the
/// velocity it carries between steps.
#[derive(Debug, Clone)]
pub struct Disk {
    pub center: [f64; 2],
    pub radius: f64,
    pub color: [f64; 3],
    pub velocity: [f64; 2],
}

/// Fraction of the pixel at `(row, col)` covered by the disk, sampled
/// on a 2x2 subpixel grid. World origin is the frame center; x runs
/// along columns, y along rows.
fn coverage(row: usize, col: usize, size: usize, center: [f64; 2], radius: f64) -> f64 {
    let half = size as f64 / 2.0;
    let r2 = radius * radius;
    let mut hits = 0u8;
    for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
        let x = col as f64 + ox - half;
        let y = row as f64 + oy - half;
        let dx = x - center[0];
        let dy = y - center[1];
        if dx * dx + dy * dy <= r2 {
            hits += 1;
        }
    }
    f64::from(hits) / 4.0
}

fn blend_disk(frame: &mut [f32], size: usize, center: [f64; 2], radius: f64, color: [f64; 3]) {
    let half = size as f64 / 2.0;
    let lo_row = ((center[1] - radius + half - 1.0).floor().max(0.0)) as usize;
    let hi_row = ((center[1] + radius + half + 1.0).ceil().min(size as f64)) as usize;
    let lo_col = ((center[0] - radius + half - 1.0).floor().max(0.0)) as usize;
    let hi_col = ((center[0] + radius + half + 1.0).ceil().min(size as f64)) as usize;
    for row in lo_row..hi_row {
        for col in lo_col..hi_col {
            let cov = coverage(row, col, size, center, radius);
            if cov == 0.0 {
                continue;
            }
            let px = (row * size + col) * 3;
            for ch in 0..3 {
                let old = f64::from(frame[px + ch]);
                frame[px + ch] = (old * (1.0 - cov) + color[ch] * cov) as f32;
            }
        }
    }
}

/// Renders the target first, then the distractors in list order, so
/// distractors occlude the target. `frame` is `size x size x 3` and is
/// cleared to black first; all values stay in [0, 1].
pub fn render_frame(target: &Disk, distractors: &[Disk], size: usize, frame: &mut [f32]) {
    debug_assert_eq!(frame.len(), size * size * 3);
    frame.fill(0.0);
    blend_disk(frame, size, target.center, target.radius, target.color);
    for disk in distractors {
        blend_disk(frame, size, disk.center, disk.radius, disk.color);
    }
}

/// Renders the dot field seen from `pose = (x, y, theta)`: the vehicle
/// sits at the frame center with its heading pointing up, so forward
/// motion slides the texture down the image. Dots are white disks.
pub fn render_ego_frame(
    dots: &[[f64; 2]],
    pose: [f64; 3],
    config: &EgoWorldConfig,
    frame: &mut [f32],
) {
    let size = config.image_size;
    debug_assert_eq!(frame.len(), size * size * 3);
    frame.fill(0.0);
    let ppu = config.pixels_per_unit;
    let view_half = size as f64 / (2.0 * ppu);
    let cull = view_half + config.dot_radius_px / ppu + 0.5;
    let (sin_t, cos_t) = pose[2].sin_cos();
    for dot in dots {
        let dx = dot[0] - pose[0];
        let dy = dot[1] - pose[1];
        // vehicle frame: forward = +u, left = +w
        let u = cos_t * dx + sin_t * dy;
        let w = -sin_t * dx + cos_t * dy;
        if u.abs() > cull || w.abs() > cull {
            continue;
        }
        // forward maps up (-y in image), left maps left (-x)
        let px = [-w * ppu, -u * ppu];
        blend_disk(frame, size, px, config.dot_radius_px, [1.0, 1.0, 1.0]);
    }
}
