//! Procedural motion standing in for motion capture.
//!
//! Every protocol draws its parameters once per sequence and then evaluates
//! smooth functions of time, so trajectories are at least C¹.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kinematics::fk::{fk_matrices, FkOutput, Pose};
use crate::kinematics::rot6d::{matrix_to_rot6d, rot_x, rot_y, rot_z, Rot6D};
use crate::kinematics::skeleton::Skeleton;

pub const FPS: f64 = 30.0;
pub const X_DIM: usize = 54;
/// Reals per tracked device in a [`ThreePointFrame`].
pub const DEVICE_DIM: usize = 18;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Walk,
    Kick,
    KneeStrike,
    LiftLeg,
    Idle,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::Walk,
        Protocol::Kick,
        Protocol::KneeStrike,
        Protocol::LiftLeg,
        Protocol::Idle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Walk => "walk",
            Protocol::Kick => "kick",
            Protocol::KneeStrike => "knee_strike",
            Protocol::LiftLeg => "lift_leg",
            Protocol::Idle => "idle",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownProtocol(s.to_string()))
    }
}

/// Head, left wrist and right wrist: position, linear acceleration, 6D
/// rotation and 6D rotational acceleration each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreePointFrame(pub [f32; X_DIM]);

impl Default for ThreePointFrame {
    fn default() -> Self {
        Self([0.0; X_DIM])
    }
}

impl ThreePointFrame {
    pub fn position(&self, device: usize) -> Vector3<f64> {
        let o = device * DEVICE_DIM;
        Vector3::new(self.0[o] as f64, self.0[o + 1] as f64, self.0[o + 2] as f64)
    }

    pub fn acceleration(&self, device: usize) -> Vector3<f64> {
        let o = device * DEVICE_DIM + 3;
        Vector3::new(self.0[o] as f64, self.0[o + 1] as f64, self.0[o + 2] as f64)
    }

    pub fn rotation(&self, device: usize) -> Rot6D {
        let o = device * DEVICE_DIM + 6;
        Rot6D(std::array::from_fn(|k| self.0[o + k]))
    }

    pub fn rot_acceleration(&self, device: usize) -> [f32; 6] {
        let o = device * DEVICE_DIM + 12;
        std::array::from_fn(|k| self.0[o + k])
    }
}

/// Builds 3-point frames from per-frame device positions and rotations,
/// with accelerations from second differences at [`FPS`]. The first and last
/// frames reuse their neighbour's acceleration.
pub fn three_point_frames(
    positions: &[[Vector3<f64>; 3]],
    rotations: &[[Matrix3<f64>; 3]],
) -> Vec<ThreePointFrame> {
    let n = positions.len();
    let vec6 = |m: &Matrix3<f64>| matrix_to_rot6d(m).0.map(|v| v as f64);
    let pos: Vec<[[f64; 3]; 3]> = positions
        .iter()
        .map(|f| f.map(|p| [p.x, p.y, p.z]))
        .collect();
    let rot: Vec<[[f64; 6]; 3]> = rotations.iter().map(|f| f.map(|m| vec6(&m))).collect();
    let acc3 = second_difference(&pos);
    let acc6 = second_difference(&rot);
    (0..n)
        .map(|t| {
            let mut x = [0.0f32; X_DIM];
            for d in 0..3 {
                let o = d * DEVICE_DIM;
                for k in 0..3 {
                    x[o + k] = pos[t][d][k] as f32;
                    x[o + 3 + k] = acc3[t][d][k] as f32;
                }
                for k in 0..6 {
                    x[o + 6 + k] = rot[t][d][k] as f32;
                    x[o + 12 + k] = acc6[t][d][k] as f32;
                }
            }
            ThreePointFrame(x)
        })
        .collect()
}

/// `(v[t+1] - 2 v[t] + v[t-1]) * FPS²` per component; ends copy the nearest
/// interior value, fewer than three samples give zeros.
pub fn second_difference<const K: usize>(v: &[[[f64; K]; 3]]) -> Vec<[[f64; K]; 3]> {
    let n = v.len();
    let mut out = vec![[[0.0; K]; 3]; n];
    if n < 3 {
        return out;
    }
    for t in 1..n - 1 {
        for d in 0..3 {
            for k in 0..K {
                out[t][d][k] = (v[t + 1][d][k] - 2.0 * v[t][d][k] + v[t - 1][d][k]) * FPS * FPS;
            }
        }
    }
    out[0] = out[1];
    out[n - 1] = out[n - 2];
    out
}

/// Ground-truth trajectory of one generated sequence.
#[derive(Debug, Clone)]
pub struct Motion {
    pub protocol: Protocol,
    pub poses: Vec<Pose>,
    pub x: Vec<ThreePointFrame>,
    pub fk: Vec<FkOutput>,
}

/// Joint angles the generators animate, radians.
#[derive(Debug, Clone, Copy, Default)]
struct Articulation {
    heading: f64,
    root: [f64; 3],
    pelvis_twist: f64,
    hip_flex: [f64; 2],
    hip_abd: [f64; 2],
    knee: [f64; 2],
    ankle: [f64; 2],
    spine_lean: f64,
    spine_twist: f64,
    head_pitch: f64,
    head_yaw: f64,
    arm_down: [f64; 2],
    arm_swing: [f64; 2],
    elbow: [f64; 2],
}

struct JointMap {
    hips: [usize; 2],
    knees: [usize; 2],
    ankles: [usize; 2],
    spine: [usize; 3],
    neck: usize,
    head: usize,
    shoulders: [usize; 2],
    elbows: [usize; 2],
}

impl JointMap {
    fn new(skel: &Skeleton) -> Result<Self> {
        let f = |n: &str| {
            skel.index_of(n)
                .ok_or_else(|| Error::SkeletonMismatch(format!("motion generator needs joint `{n}`")))
        };
        Ok(Self {
            hips: [f("left_hip")?, f("right_hip")?],
            knees: [f("left_knee")?, f("right_knee")?],
            ankles: [f("left_ankle")?, f("right_ankle")?],
            spine: [f("spine1")?, f("spine2")?, f("spine3")?],
            neck: f("neck")?,
            head: f("head")?,
            shoulders: [f("left_shoulder")?, f("right_shoulder")?],
            elbows: [f("left_elbow")?, f("right_elbow")?],
        })
    }

    fn locals(&self, j: usize, a: &Articulation) -> Vec<Matrix3<f64>> {
        let mut m = vec![Matrix3::identity(); j];
        m[0] = rot_y(a.pelvis_twist);
        for s in 0..2 {
            // left side is +x: abduction turns the left leg toward +x
            let abd = if s == 0 { a.hip_abd[s] } else { -a.hip_abd[s] };
            m[self.hips[s]] = rot_z(abd) * rot_x(-a.hip_flex[s]);
            m[self.knees[s]] = rot_x(a.knee[s]);
            m[self.ankles[s]] = rot_x(-a.ankle[s]);
            let down = if s == 0 { -a.arm_down[s] } else { a.arm_down[s] };
            m[self.shoulders[s]] = rot_x(-a.arm_swing[s]) * rot_z(down);
            let el = if s == 0 { -a.elbow[s] } else { a.elbow[s] };
            m[self.elbows[s]] = rot_y(el);
        }
        for &k in &self.spine {
            m[k] = rot_y(a.spine_twist / 3.0) * rot_x(a.spine_lean / 3.0);
        }
        m[self.neck] = rot_x(0.4 * a.head_pitch);
        m[self.head] = rot_y(a.head_yaw) * rot_x(0.6 * a.head_pitch);
        m
    }
}

/// Smooth bump on `[0, 1]`: zero value and slope at both ends, 1 at 0.5.
fn bump(tau: f64) -> f64 {
    if (0.0..=1.0).contains(&tau) {
        0.5 - 0.5 * (TAU * tau).cos()
    } else {
        0.0
    }
}

/// One discrete leg action inside a sequence.
#[derive(Debug, Clone, Copy)]
struct Event {
    start: f64,
    duration: f64,
    side: usize,
    amp: f64,
    amp2: f64,
    variant: bool,
}

fn schedule(
    rng: &mut impl Rng,
    total: f64,
    gap: (f64, f64),
    duration: (f64, f64),
    amp: (f64, f64),
    amp2: (f64, f64),
) -> Vec<Event> {
    let mut out = Vec::new();
    let mut t = rng.gen_range(0.0..gap.1 * 0.5);
    let mut side = rng.gen_range(0..2usize);
    while t < total {
        let d = rng.gen_range(duration.0..duration.1);
        out.push(Event {
            start: t,
            duration: d,
            side,
            amp: rng.gen_range(amp.0..amp.1),
            amp2: rng.gen_range(amp2.0..amp2.1),
            variant: rng.gen_bool(0.5),
        });
        if rng.gen_bool(0.7) {
            side = 1 - side;
        }
        t += d + rng.gen_range(gap.0..gap.1);
    }
    out
}

fn active(events: &[Event], t: f64) -> Option<(Event, f64)> {
    events
        .iter()
        .find(|e| t >= e.start && t <= e.start + e.duration)
        .map(|e| (*e, (t - e.start) / e.duration))
}

/// Per-sequence random parameters shared by all protocols.
struct Common {
    heading: f64,
    start: [f64; 2],
    pitch: f64,
    pitch_amp: f64,
    yaw_amp: f64,
    phase: [f64; 3],
    arm_down: f64,
}

impl Common {
    fn draw(rng: &mut impl Rng) -> Self {
        Self {
            heading: rng.gen_range(-PI..PI),
            start: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            pitch: rng.gen_range(0.25..0.6),
            pitch_amp: rng.gen_range(0.0..0.12),
            yaw_amp: rng.gen_range(0.0..0.3),
            phase: [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)],
            arm_down: rng.gen_range(1.2..1.4),
        }
    }

    fn base(&self, t: f64, height: f64, moving: bool) -> Articulation {
        let wobble = if moving { 1.0 } else { 0.0 };
        Articulation {
            heading: self.heading,
            root: [self.start[0], height, self.start[1]],
            head_pitch: self.pitch + wobble * self.pitch_amp * (0.9 * t + self.phase[0]).sin(),
            head_yaw: wobble * self.yaw_amp * (0.5 * t + self.phase[1]).sin(),
            arm_down: [self.arm_down; 2],
            elbow: [0.25; 2],
            ..Default::default()
        }
    }
}

/// Generates `frames` frames of `protocol` for a body of the given scale.
pub fn gen_motion(
    skel: &Skeleton,
    scale: f64,
    protocol: Protocol,
    frames: usize,
    rng: &mut impl Rng,
) -> Result<Motion> {
    let map = JointMap::new(skel)?;
    let tracked = skel.tracked()?;
    let j = skel.num_joints();
    let rest = fk_matrices(
        skel,
        Vector3::zeros(),
        &Matrix3::identity(),
        &vec![Matrix3::identity(); j],
        scale,
    );
    // lowest rest-pose joint sits one foot radius above the floor
    let height = -rest.positions.iter().map(|p| p.y).fold(f64::INFINITY, f64::min) + 0.04;
    let total = frames as f64 / FPS;
    let c = Common::draw(rng);

    let arts: Vec<Articulation> = match protocol {
        Protocol::Idle => (0..frames).map(|_| c.base(0.0, height, false)).collect(),
        Protocol::Walk => {
            let speed = rng.gen_range(0.8..1.4);
            let stride = rng.gen_range(1.1..1.5) * scale;
            let freq = speed / stride;
            let turn = rng.gen_range(-0.25..0.25);
            let hip_amp = rng.gen_range(0.3..0.5);
            let knee_amp = rng.gen_range(0.6..1.0);
            let arm_amp = rng.gen_range(0.2..0.45);
            let phase0 = rng.gen_range(0.0..TAU);
            let mut pos = c.start;
            (0..frames)
                .map(|i| {
                    let t = i as f64 / FPS;
                    let mut a = c.base(t, height, true);
                    a.heading = c.heading + turn * t;
                    if i > 0 {
                        pos[0] += speed * a.heading.sin() / FPS;
                        pos[1] += speed * a.heading.cos() / FPS;
                    }
                    let ph = TAU * freq * t + phase0;
                    a.root = [pos[0], height - 0.03 + 0.02 * (2.0 * ph).cos(), pos[1]];
                    a.pelvis_twist = 0.08 * ph.sin();
                    for s in 0..2 {
                        let p = ph + PI * s as f64;
                        a.hip_flex[s] = hip_amp * p.sin();
                        // knee bends while the leg swings forward
                        a.knee[s] = 0.1 + knee_amp * (p - 0.3).cos().max(0.0).powi(2);
                        a.ankle[s] = 0.15 * (p + 0.5).sin();
                        a.arm_swing[s] = -arm_amp * p.sin();
                    }
                    a.spine_lean = 0.05;
                    a
                })
                .collect()
        }
        Protocol::Kick => {
            let events = schedule(rng, total, (0.3, 1.0), (0.6, 0.95), (0.9, 1.5), (0.9, 1.5));
            let guard = rng.gen_range(0.3..0.7);
            (0..frames)
                .map(|i| {
                    let t = i as f64 / FPS;
                    let mut a = c.base(t, height, true);
                    a.arm_swing = [guard; 2];
                    a.elbow = [1.4; 2];
                    a.arm_down = [1.1; 2];
                    if let Some((e, tau)) = active(&events, t) {
                        let b = bump(tau);
                        a.hip_flex[e.side] = e.amp * b;
                        // chamber the knee, snap it out at the top
                        a.knee[e.side] = e.amp2 * b * (1.0 - 0.85 * (PI * tau).sin().powi(4));
                        a.ankle[e.side] = -0.4 * b;
                        a.spine_lean = -0.2 * b;
                        let other = 1 - e.side;
                        a.knee[other] = 0.15 * b;
                        a.hip_flex[other] = 0.1 * b;
                        a.root[1] -= 0.03 * b;
                    }
                    a
                })
                .collect()
        }
        Protocol::KneeStrike => {
            let events = schedule(rng, total, (0.2, 0.8), (0.5, 0.8), (1.1, 1.6), (1.6, 2.2));
            (0..frames)
                .map(|i| {
                    let t = i as f64 / FPS;
                    let mut a = c.base(t, height, true);
                    a.arm_swing = [0.7; 2];
                    a.elbow = [1.2; 2];
                    a.arm_down = [1.0; 2];
                    if let Some((e, tau)) = active(&events, t) {
                        let b = bump(tau);
                        a.hip_flex[e.side] = e.amp * b;
                        a.knee[e.side] = e.amp2 * b;
                        a.spine_lean = 0.25 * b;
                        a.arm_swing = [0.7 - 0.4 * b; 2];
                        a.elbow = [1.2 + 0.4 * b; 2];
                    }
                    a
                })
                .collect()
        }
        Protocol::LiftLeg => {
            let events = schedule(rng, total, (0.3, 1.0), (1.2, 2.0), (0.7, 1.2), (0.4, 0.8));
            (0..frames)
                .map(|i| {
                    let t = i as f64 / FPS;
                    let mut a = c.base(t, height, true);
                    a.arm_down = [0.9; 2];
                    if let Some((e, tau)) = active(&events, t) {
                        let b = bump(tau);
                        if e.variant {
                            // sideways lift
                            a.hip_abd[e.side] = e.amp2 * b;
                            a.hip_abd[1 - e.side] = -0.1 * b;
                        } else {
                            a.hip_flex[e.side] = e.amp * b;
                            a.knee[e.side] = 0.9 * e.amp * b;
                        }
                        a.arm_down = [0.9 - 0.3 * b; 2];
                    }
                    a
                })
                .collect()
        }
    };

    let mut poses = Vec::with_capacity(frames);
    let mut fks = Vec::with_capacity(frames);
    let mut dev_pos = Vec::with_capacity(frames);
    let mut dev_rot = Vec::with_capacity(frames);
    for a in &arts {
        let local = map.locals(j, a);
        let root_rot = rot_y(a.heading);
        let root_pos = Vector3::from(a.root);
        let out = fk_matrices(skel, root_pos, &root_rot, &local, scale);
        dev_pos.push(tracked.map(|k| out.positions[k]));
        dev_rot.push(tracked.map(|k| out.globals[k]));
        poses.push(Pose {
            local_rot: local.iter().map(matrix_to_rot6d).collect(),
            root_pos: a.root.map(|v| v as f32),
            root_rot: matrix_to_rot6d(&root_rot),
        });
        fks.push(out);
    }
    Ok(Motion {
        protocol,
        poses,
        x: three_point_frames(&dev_pos, &dev_rot),
        fk: fks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unknown_protocol() {
        assert!(matches!("dance".parse::<Protocol>(), Err(Error::UnknownProtocol(_))));
        for p in Protocol::ALL {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
        }
    }

    #[test]
    fn quadratic_trajectory_has_constant_acceleration() {
        let pos: Vec<[Vector3<f64>; 3]> = (0..10)
            .map(|t| {
                let s = t as f64 / FPS;
                [Vector3::new(0.5 * 2.0 * s * s, 0.0, 0.0); 3]
            })
            .collect();
        let rot = vec![[Matrix3::identity(); 3]; 10];
        for f in three_point_frames(&pos, &rot) {
            assert!((f.acceleration(0).x - 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn idle_is_static() {
        let (s, _) = Skeleton::smpl22();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = gen_motion(&s, 1.0, Protocol::Idle, 20, &mut rng).unwrap();
        for f in &m.x {
            assert_eq!(f.0, m.x[0].0);
            for d in 0..3 {
                assert_eq!(f.acceleration(d), Vector3::zeros());
                assert_eq!(f.rot_acceleration(d), [0.0; 6]);
            }
        }
        assert!(m.poses.iter().all(|p| *p == m.poses[0]));
    }

    #[test]
    fn feet_stay_near_floor_when_standing() {
        let (s, _) = Skeleton::smpl22();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = gen_motion(&s, 1.0, Protocol::Idle, 1, &mut rng).unwrap();
        let low = m.fk[0].positions.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        assert!((low - 0.04).abs() < 1e-9);
    }
}
