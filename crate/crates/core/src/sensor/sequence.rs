use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::motion::{gen_motion, Motion, Protocol, ThreePointFrame};
use super::rig::{
    corrupt, depth_weighted_indices, label_points, shift_points, SensorPose, SensorRig,
    ShiftProfile,
};
use crate::error::{Error, Result};
use crate::kinematics::capsule::{body_capsules, sample_capsules};
use crate::kinematics::fk::{reanchor, Pose};
use crate::kinematics::rot6d::rot_y;
use crate::kinematics::skeleton::{BodyShape, Skeleton, MAX_RADIUS, MIN_RADIUS};

pub const DEFAULT_FRAMES: usize = 196;
pub const DEFAULT_POINTS: usize = 100;
/// Raw surface samples drawn per frame before visibility culling.
pub const RAW_SURFACE_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Mocap,
    PseudoReal,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Mocap => "mocap",
            Domain::PseudoReal => "pseudo_real",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mocap" => Ok(Domain::Mocap),
            "pseudo_real" => Ok(Domain::PseudoReal),
            _ => Err(Error::Config(format!("unknown domain `{s}`"))),
        }
    }
}

/// `P` points in the sensor-normalized frame, labelled when simulated.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCloud {
    pub points: Vec<[f32; 3]>,
    pub labels: Option<Vec<u16>>,
    /// Nothing was visible; the points are copies of the far sentinel.
    pub sentinel: bool,
}

impl SampledCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        let p = self.points[i];
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }
}

/// Sensor placement stored with each frame: origin and heading.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SensorFrame {
    pub origin: [f32; 3],
    pub yaw: f32,
}

impl SensorFrame {
    pub fn origin(&self) -> Vector3<f64> {
        Vector3::new(self.origin[0] as f64, self.origin[1] as f64, self.origin[2] as f64)
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.origin() + rot_y(self.yaw as f64) * p
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        rot_y(self.yaw as f64).transpose() * (p - self.origin())
    }
}

/// An aligned bundle of `N` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub protocol: Protocol,
    pub domain: Domain,
    pub fps: f32,
    /// Body scale of the subject, assumed known from height calibration.
    pub scale: f32,
    pub x: Vec<ThreePointFrame>,
    pub clouds: Vec<SampledCloud>,
    pub sensor: Vec<SensorFrame>,
    /// Stored synthesis output, when one has been attached.
    pub synth: Option<Vec<Pose>>,
    pub gt: Option<Vec<Pose>>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.clouds.first().map_or(0, SampledCloud::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.len();
        let bad = |what: &str, got: usize| {
            Err(Error::InvalidArgument(format!("sequence has {n} frames but {got} {what}")))
        };
        if self.clouds.len() != n {
            return bad("clouds", self.clouds.len());
        }
        if self.sensor.len() != n {
            return bad("sensor frames", self.sensor.len());
        }
        if let Some(s) = &self.synth {
            if s.len() != n {
                return bad("synthesized poses", s.len());
            }
        }
        if let Some(g) = &self.gt {
            if g.len() != n {
                return bad("ground-truth poses", g.len());
            }
        }
        let p = self.num_points();
        if self.clouds.iter().any(|c| c.len() != p) {
            return Err(Error::InvalidArgument("clouds differ in point count".into()));
        }
        Ok(())
    }
}

/// Simulation settings shared by all generated sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub frames: usize,
    pub points: usize,
    pub raw_points: usize,
    pub rig: SensorRig,
    pub shift: ShiftProfile,
    pub scale_range: (f64, f64),
    /// Multiplicative jitter applied to each default radius.
    pub radius_jitter: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            frames: DEFAULT_FRAMES,
            points: DEFAULT_POINTS,
            raw_points: RAW_SURFACE_POINTS,
            rig: SensorRig::default(),
            shift: ShiftProfile::default(),
            scale_range: (0.9, 1.1),
            radius_jitter: 0.15,
        }
    }
}

/// Randomized subject: scale and per-bone radii around the defaults.
pub fn random_shape(defaults: &BodyShape, cfg: &SimConfig, rng: &mut impl Rng) -> BodyShape {
    let scale = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
    let radii = defaults
        .radii
        .iter()
        .map(|r| {
            let f = 1.0 + rng.gen_range(-cfg.radius_jitter..=cfg.radius_jitter);
            (r * f).clamp(MIN_RADIUS, MAX_RADIUS)
        })
        .collect();
    BodyShape { radii, scale }
}

/// Samples one frame's cloud from posed capsules. Returns sensor-frame points
/// and labels (computed before noise).
pub fn simulate_cloud(
    cfg: &SimConfig,
    skel: &Skeleton,
    shape: &BodyShape,
    joints: &[Vector3<f64>],
    sensor: &SensorPose,
    rng: &mut impl Rng,
) -> SampledCloud {
    let caps = body_capsules(skel, shape, joints);
    let raw: Vec<Vector3<f64>> = sample_capsules(&caps, rng, cfg.raw_points)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let visible = cfg.rig.visible_points(&raw, sensor, &caps);
    let (mut pts, labels, sentinel) = match depth_weighted_indices(&visible, &sensor.origin, cfg.points, rng) {
        Some(idx) => {
            let pts: Vec<Vector3<f64>> = idx.iter().map(|&i| visible[i]).collect();
            let labels = label_points(&pts, joints);
            (pts, labels, false)
        }
        None => (
            vec![cfg.rig.sentinel(sensor); cfg.points],
            vec![skel.num_joints() as u16; cfg.points],
            true,
        ),
    };
    corrupt(&mut pts, rng);
    SampledCloud {
        points: pts
            .iter()
            .map(|p| {
                let l = sensor.to_local(p);
                [l.x as f32, l.y as f32, l.z as f32]
            })
            .collect(),
        labels: Some(labels),
        sentinel,
    }
}

/// Re-expresses a simulated cloud under the held-out sensor profile and strips
/// its labels.
pub fn domain_shift(cloud: &SampledCloud, profile: &ShiftProfile, rng: &mut impl Rng) -> SampledCloud {
    domain_shift_indexed(cloud, profile, rng).0
}

/// As [`domain_shift`], also returning the source index of every output point.
pub fn domain_shift_indexed(
    cloud: &SampledCloud,
    profile: &ShiftProfile,
    rng: &mut impl Rng,
) -> (SampledCloud, Vec<usize>) {
    let pts: Vec<Vector3<f64>> = (0..cloud.len()).map(|i| cloud.point(i)).collect();
    let (out, src) = shift_points(&pts, profile, rng);
    (
        SampledCloud {
            points: out.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
            labels: None,
            sentinel: cloud.sentinel,
        },
        src,
    )
}

/// A simulated sequence together with the motion it came from.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub sample: SequenceSample,
    pub motion: Motion,
    pub shape: BodyShape,
}

/// Generates one mocap-domain sequence: motion, 3-point input, clouds with
/// labels, ground truth.
pub fn simulate_sequence(
    cfg: &SimConfig,
    skel: &Skeleton,
    default_shape: &BodyShape,
    protocol: Protocol,
    rng: &mut impl Rng,
) -> Result<Simulated> {
    cfg.rig.validate()?;
    let shape = random_shape(default_shape, cfg, rng);
    let motion = gen_motion(skel, shape.scale, protocol, cfg.frames, rng)?;
    let head = skel.tracked()?[0];
    let mut clouds = Vec::with_capacity(cfg.frames);
    let mut sensor = Vec::with_capacity(cfg.frames);
    for out in &motion.fk {
        let sp = cfg.rig.pose(&out.positions[head], &out.globals[head]);
        clouds.push(simulate_cloud(cfg, skel, &shape, &out.positions, &sp, rng));
        sensor.push(SensorFrame {
            origin: [sp.origin.x as f32, sp.origin.y as f32, sp.origin.z as f32],
            yaw: sp.yaw as f32,
        });
    }
    // ground truth in the head-anchored convention used for predictions
    let gt = motion
        .poses
        .iter()
        .zip(&motion.x)
        .map(|(p, x)| reanchor(skel, p, shape.scale, &x.rotation(0).to_matrix()?, head, x.position(0)))
        .collect::<Result<Vec<_>>>()?;
    let sample = SequenceSample {
        protocol,
        domain: Domain::Mocap,
        fps: super::motion::FPS as f32,
        scale: shape.scale as f32,
        x: motion.x.clone(),
        clouds,
        sensor,
        synth: None,
        gt: Some(gt),
    };
    Ok(Simulated {
        sample,
        motion,
        shape,
    })
}

/// Turns a simulated sequence into the held-out domain: shifted clouds, no
/// labels, no ground truth.
pub fn to_pseudo_real(sample: &SequenceSample, profile: &ShiftProfile, rng: &mut impl Rng) -> SequenceSample {
    SequenceSample {
        domain: Domain::PseudoReal,
        clouds: sample
            .clouds
            .iter()
            .map(|c| domain_shift(c, profile, rng))
            .collect(),
        gt: None,
        ..sample.clone()
    }
}

/// Per-sequence RNG stream: `seed + index`.
pub fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(index))
}
