use nalgebra::{Matrix3, Vector3};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::{Bernoulli, Normal};

use crate::kinematics::capsule::Capsule;
use crate::kinematics::rot6d::{rot_x, rot_y, yaw_of};

/// Label noise model constants.
pub const NOISE_SIGMA: f64 = 0.02;
pub const OUTLIER_SIGMA: f64 = 0.20;
pub const OUTLIER_RATE: f64 = 0.02;
pub const LABEL_THRESHOLD: f64 = 0.10;
/// Occlusion tolerance along the ray, meters.
pub const OCCLUSION_TOL: f64 = 0.005;

/// Head-mounted depth sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorRig {
    /// Sensor origin in the head joint frame, meters.
    pub mount_offset: [f64; 3],
    /// Downward tilt of the optical axis relative to the head's forward axis.
    pub mount_pitch: f64,
    pub fov_half_angle: f64,
    pub max_range: f64,
}

impl Default for SensorRig {
    fn default() -> Self {
        Self {
            mount_offset: [0.0, 0.0, 0.13],
            mount_pitch: 0.7,
            fov_half_angle: 1.0,
            max_range: 3.0,
        }
    }
}

/// World placement of the sensor for one frame. Clouds are stored relative
/// to `origin` and rotated by `-yaw` about +y, so +y stays up and +z is the
/// wearer's heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorPose {
    pub origin: Vector3<f64>,
    pub yaw: f64,
    /// Optical axis in world coordinates (unit).
    pub axis: Vector3<f64>,
}

impl SensorPose {
    pub fn yaw_matrix(&self) -> Matrix3<f64> {
        rot_y(self.yaw)
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.yaw_matrix().transpose() * (p - self.origin)
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.origin + self.yaw_matrix() * p
    }
}

impl SensorRig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.fov_half_angle > 0.0 && self.fov_half_angle <= std::f64::consts::FRAC_PI_2) {
            return Err(crate::Error::Config(format!(
                "fov_half_angle {} outside (0, pi/2]",
                self.fov_half_angle
            )));
        }
        if !(self.max_range > 0.0) {
            return Err(crate::Error::Config("max_range must be positive".into()));
        }
        Ok(())
    }

    pub fn pose(&self, head_pos: &Vector3<f64>, head_rot: &Matrix3<f64>) -> SensorPose {
        let origin = head_pos + head_rot * Vector3::from(self.mount_offset);
        let axis = head_rot * rot_x(self.mount_pitch) * Vector3::z();
        SensorPose {
            origin,
            yaw: yaw_of(head_rot),
            axis,
        }
    }

    /// Points inside the view cone and range that no capsule hides.
    ///
    /// A point is hidden when the ray from the sensor enters any capsule more
    /// than [`OCCLUSION_TOL`] before reaching the point. Capsules containing
    /// the sensor itself are ignored.
    pub fn visible_points(
        &self,
        raw: &[Vector3<f64>],
        sensor: &SensorPose,
        caps: &[Capsule],
    ) -> Vec<Vector3<f64>> {
        let cos_fov = self.fov_half_angle.cos();
        let blockers: Vec<&Capsule> = caps.iter().filter(|c| !c.contains(&sensor.origin)).collect();
        raw.iter()
            .filter(|q| {
                let d = *q - sensor.origin;
                let dist = d.norm();
                if dist <= 1e-9 || dist > self.max_range {
                    return false;
                }
                let dir = d / dist;
                if dir.dot(&sensor.axis) < cos_fov {
                    return false;
                }
                !blockers.iter().any(|c| {
                    c.ray_entry(&sensor.origin, &dir)
                        .is_some_and(|t| t >= 0.0 && t < dist - OCCLUSION_TOL)
                })
            })
            .copied()
            .collect()
    }

    /// Far point on the optical axis standing in for an empty view.
    pub fn sentinel(&self, sensor: &SensorPose) -> Vector3<f64> {
        sensor.origin + sensor.axis * self.max_range
    }
}

/// Draws `count` indices with replacement, each with probability proportional
/// to its point's distance from `origin`. `None` when no point has positive
/// depth.
pub fn depth_weighted_indices(
    points: &[Vector3<f64>],
    origin: &Vector3<f64>,
    count: usize,
    rng: &mut impl Rng,
) -> Option<Vec<usize>> {
    let w: Vec<f64> = points.iter().map(|p| (p - origin).norm()).collect();
    let dist = WeightedIndex::new(&w).ok()?;
    Some((0..count).map(|_| dist.sample(rng)).collect())
}

/// Depth-proportional resampling to exactly `count` points, or `count`
/// copies of the sentinel when nothing is visible. Output stays in world
/// coordinates; the flag reports whether the sentinel was used.
pub fn depth_weighted_sample(
    points: &[Vector3<f64>],
    origin: &Vector3<f64>,
    count: usize,
    sentinel: Vector3<f64>,
    rng: &mut impl Rng,
) -> (Vec<Vector3<f64>>, bool) {
    match depth_weighted_indices(points, origin, count, rng) {
        Some(idx) => (idx.into_iter().map(|i| points[i]).collect(), false),
        None => (vec![sentinel; count], true),
    }
}

/// Adds isotropic Gaussian noise to every point plus wide outlier noise to an
/// independent Bernoulli subset. Returns which points became outliers.
pub fn corrupt(points: &mut [Vector3<f64>], rng: &mut impl Rng) -> Vec<bool> {
    let base = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let wide = Normal::new(0.0, OUTLIER_SIGMA).expect("valid sigma");
    let pick = Bernoulli::new(OUTLIER_RATE).expect("valid rate");
    points
        .iter_mut()
        .map(|p| {
            for c in p.iter_mut() {
                *c += base.sample(rng);
            }
            let out = pick.sample(rng);
            if out {
                for c in p.iter_mut() {
                    *c += wide.sample(rng);
                }
            }
            out
        })
        .collect()
}

/// Nearest joint within [`LABEL_THRESHOLD`] (inclusive), else the background
/// class `J`.
pub fn label_points(points: &[Vector3<f64>], joints: &[Vector3<f64>]) -> Vec<u16> {
    points
        .iter()
        .map(|p| {
            let (k, d) = crate::kinematics::closest_joint(p, joints);
            if d <= LABEL_THRESHOLD {
                k as u16
            } else {
                joints.len() as u16
            }
        })
        .collect()
}

/// Sensor profile of the held-out domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftProfile {
    /// Noise std along the viewing ray as a multiple of [`NOISE_SIGMA`].
    pub radial_noise_factor: f64,
    /// Fraction of the lowest points dropped and refilled from the rest.
    pub drop_lowest: f64,
    /// Constant push away from the sensor, meters.
    pub radial_bias: f64,
}

impl Default for ShiftProfile {
    fn default() -> Self {
        Self {
            radial_noise_factor: 1.5,
            drop_lowest: 0.05,
            radial_bias: 0.01,
        }
    }
}

/// Applies the shift profile to sensor-frame points (sensor at the origin).
/// Returns the new points and, for each, the index of the input point it came
/// from.
pub fn shift_points(
    points: &[Vector3<f64>],
    profile: &ShiftProfile,
    rng: &mut impl Rng,
) -> (Vec<Vector3<f64>>, Vec<usize>) {
    let n = points.len();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].y.total_cmp(&points[b].y).then(a.cmp(&b)));
    let drop = ((n as f64 * profile.drop_lowest).round() as usize).min(n - 1);
    let mut keep: Vec<usize> = order[drop..].to_vec();
    keep.sort_unstable();
    let mut src = keep.clone();
    for _ in 0..drop {
        src.push(keep[rng.gen_range(0..keep.len())]);
    }
    let extra = NOISE_SIGMA * (profile.radial_noise_factor.powi(2) - 1.0).max(0.0).sqrt();
    let radial = Normal::new(0.0, extra).expect("valid sigma");
    let out = src
        .iter()
        .map(|&i| {
            let p = points[i];
            let r = p.norm();
            if r < 1e-9 {
                return p;
            }
            p + (p / r) * (radial.sample(rng) + profile.radial_bias)
        })
        .collect();
    (out, src)
}
