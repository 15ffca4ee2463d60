//! Sequence files.

use std::path::Path;

use super::container::{bytes_f32, f32_bytes, Container};
use crate::error::{Error, Result};
use crate::kinematics::{Pose, Rot6D};
use crate::sensor::motion::{Protocol, ThreePointFrame, X_DIM};
use crate::sensor::sequence::{Domain, SampledCloud, SensorFrame, SequenceSample};

pub const SEQUENCE_FORMAT: &str = "xrmbt-sequence";
pub const SEQUENCE_VERSION: u32 = 1;

const POSE_ROOT: usize = 9;

fn pose_floats(poses: &[Pose]) -> Vec<f32> {
    let mut out = Vec::new();
    for p in poses {
        out.extend(p.root_pos);
        out.extend(p.root_rot.0);
        for r in &p.local_rot {
            out.extend(r.0);
        }
    }
    out
}

fn floats_pose(v: &[f32], frames: usize, joints: usize) -> Vec<Pose> {
    let stride = POSE_ROOT + joints * 6;
    (0..frames)
        .map(|f| {
            let s = &v[f * stride..(f + 1) * stride];
            let six = |o: usize| Rot6D(s[o..o + 6].try_into().expect("six values"));
            Pose {
                root_pos: [s[0], s[1], s[2]],
                root_rot: six(3),
                local_rot: (0..joints).map(|j| six(POSE_ROOT + j * 6)).collect(),
            }
        })
        .collect()
}

fn pose_joints(seq: &SequenceSample) -> Result<usize> {
    let mut joints = None;
    for p in seq.synth.iter().chain(&seq.gt).flatten() {
        match joints {
            None => joints = Some(p.local_rot.len()),
            Some(j) if j != p.local_rot.len() => {
                return Err(Error::InvalidArgument("poses differ in joint count".into()));
            }
            _ => {}
        }
    }
    Ok(joints.unwrap_or(0))
}

pub fn sequence_to_container(seq: &SequenceSample) -> Result<Container> {
    seq.validate()?;
    let (n, p) = (seq.len(), seq.num_points());
    let j = pose_joints(seq)?;
    let labelled = seq.clouds.iter().all(|c| c.labels.is_some()) && n > 0;
    if !labelled && seq.clouds.iter().any(|c| c.labels.is_some()) {
        return Err(Error::InvalidArgument("labels present on some frames only".into()));
    }
    let mut c = Container::new(SEQUENCE_FORMAT, SEQUENCE_VERSION);
    c.set("frames", n);
    c.set("points", p);
    c.set("joints", j);
    c.set("fps", seq.fps);
    c.set("scale", seq.scale);
    c.set("domain", seq.domain);
    c.set("protocol", seq.protocol);
    c.set("labels", labelled);
    c.set("synth", seq.synth.is_some());
    c.set("gt", seq.gt.is_some());
    c.block("x", f32_bytes(seq.x.iter().flat_map(|x| x.0)));
    c.block(
        "sensor",
        f32_bytes(seq.sensor.iter().flat_map(|s| [s.origin[0], s.origin[1], s.origin[2], s.yaw])),
    );
    c.block("points", f32_bytes(seq.clouds.iter().flat_map(|c| c.points.iter().flatten().copied())));
    if labelled {
        let bytes = seq
            .clouds
            .iter()
            .flat_map(|c| c.labels.as_ref().expect("checked").iter())
            .flat_map(|l| l.to_le_bytes())
            .collect();
        c.block("labels", bytes);
    }
    c.block("sentinel", seq.clouds.iter().map(|c| c.sentinel as u8).collect());
    if let Some(s) = &seq.synth {
        c.block("synth", f32_bytes(pose_floats(s)));
    }
    if let Some(g) = &seq.gt {
        c.block("gt", f32_bytes(pose_floats(g)));
    }
    Ok(c)
}

pub fn sequence_from_container(mut c: Container, path: &Path) -> Result<SequenceSample> {
    let n: usize = c.field("frames", path)?;
    let p: usize = c.field("points", path)?;
    let j: usize = c.field("joints", path)?;
    let fps: f32 = c.field("fps", path)?;
    let scale: f32 = c.field("scale", path)?;
    let domain: Domain = c.field("domain", path)?;
    let protocol: Protocol = c.field("protocol", path)?;
    let labelled: bool = c.field("labels", path)?;
    let has_synth: bool = c.field("synth", path)?;
    let has_gt: bool = c.field("gt", path)?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };

    let x = bytes_f32(&c.take_block("x", path)?, n * X_DIM, path, "x")?;
    let sensor = bytes_f32(&c.take_block("sensor", path)?, n * 4, path, "sensor")?;
    let points = bytes_f32(&c.take_block("points", path)?, n * p * 3, path, "points")?;
    let labels = if labelled {
        let b = c.take_block("labels", path)?;
        if b.len() != n * p * 2 {
            return Err(bad(format!("labels block holds {} bytes, expected {}", b.len(), n * p * 2)));
        }
        Some(b.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect::<Vec<_>>())
    } else {
        None
    };
    let sentinel = c.take_block("sentinel", path)?;
    if sentinel.len() != n || sentinel.iter().any(|&b| b > 1) {
        return Err(bad("malformed sentinel block".into()));
    }
    let stride = POSE_ROOT + j * 6;
    let mut poses = |name: &str, present: bool| -> Result<Option<Vec<Pose>>> {
        if !present {
            return Ok(None);
        }
        let v = bytes_f32(&c.take_block(name, path)?, n * stride, path, name)?;
        Ok(Some(floats_pose(&v, n, j)))
    };
    let synth = poses("synth", has_synth)?;
    let gt = poses("gt", has_gt)?;
    if let Some((name, _)) = c.blocks.first() {
        return Err(bad(format!("unexpected block `{name}`")));
    }

    let clouds = (0..n)
        .map(|f| SampledCloud {
            points: (0..p)
                .map(|i| {
                    let o = (f * p + i) * 3;
                    [points[o], points[o + 1], points[o + 2]]
                })
                .collect(),
            labels: labels.as_ref().map(|l| l[f * p..(f + 1) * p].to_vec()),
            sentinel: sentinel[f] == 1,
        })
        .collect();
    let seq = SequenceSample {
        protocol,
        domain,
        fps,
        scale,
        x: x.chunks_exact(X_DIM)
            .map(|c| ThreePointFrame(c.try_into().expect("X_DIM values")))
            .collect(),
        clouds,
        sensor: sensor
            .chunks_exact(4)
            .map(|s| SensorFrame {
                origin: [s[0], s[1], s[2]],
                yaw: s[3],
            })
            .collect(),
        synth,
        gt,
    };
    seq.validate()?;
    Ok(seq)
}

pub fn save_sequence(seq: &SequenceSample, path: &Path) -> Result<()> {
    sequence_to_container(seq)?.save(path)
}

pub fn load_sequence(path: &Path) -> Result<SequenceSample> {
    let c = Container::load(path, SEQUENCE_FORMAT, SEQUENCE_VERSION)?;
    sequence_from_container(c, path)
}
