use std::path::Path;

use nalgebra::Vector3;
use serde::Deserialize;

use crate::error::{Error, Result};

pub const MIN_RADIUS: f64 = 0.02;
pub const MAX_RADIUS: f64 = 0.20;
pub const MIN_SCALE: f64 = 0.85;
pub const MAX_SCALE: f64 = 1.15;

const SMPL22: &str = include_str!("../../assets/smpl22.toml");

/// Kinematic tree. Joint 0 is the root and is its own parent; every other
/// joint's parent has a smaller index.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<usize>,
    offsets: Vec<Vector3<f64>>,
    lower: Vec<bool>,
}

/// Per-subject body proxy: one capsule radius per bone (indexed by the
/// bone's child joint; entry 0 is unused) and a uniform scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyShape {
    pub radii: Vec<f64>,
    pub scale: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDef {
    name: String,
    parent: String,
    offset: [f64; 3],
    radius: f64,
    #[serde(default)]
    lower: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    #[serde(default = "one")]
    scale: f64,
    joint: Vec<JointDef>,
}

fn one() -> f64 {
    1.0
}

impl Skeleton {
    pub fn new(
        names: Vec<String>,
        parents: Vec<usize>,
        offsets: Vec<Vector3<f64>>,
        lower: Vec<bool>,
    ) -> Result<Self> {
        let j = names.len();
        if j == 0 {
            return Err(Error::Config("skeleton has no joints".into()));
        }
        if parents.len() != j || offsets.len() != j || lower.len() != j {
            return Err(Error::Config(format!(
                "skeleton arrays disagree: {} names, {} parents, {} offsets, {} lower flags",
                j,
                parents.len(),
                offsets.len(),
                lower.len()
            )));
        }
        if parents[0] != 0 {
            return Err(Error::Config("joint 0 must be the root (its own parent)".into()));
        }
        for k in 1..j {
            if parents[k] >= k {
                return Err(Error::Config(format!(
                    "joint {} ({}) has parent {}; parents must precede children",
                    k, names[k], parents[k]
                )));
            }
            let len = offsets[k].norm();
            if !(len > 0.0) || !len.is_finite() {
                return Err(Error::Config(format!("bone to joint {} has zero length", names[k])));
            }
        }
        for (a, name) in names.iter().enumerate() {
            if names[..a].contains(name) {
                return Err(Error::Config(format!("duplicate joint name {name}")));
            }
        }
        Ok(Self {
            names,
            parents,
            offsets,
            lower,
        })
    }

    /// The default 22-joint body with its default shape.
    pub fn smpl22() -> (Skeleton, BodyShape) {
        Self::from_toml_str(SMPL22).expect("built-in skeleton is valid")
    }

    /// Four joints: pelvis, spine, head, one leg. Small enough for exhaustive
    /// gradient checks.
    pub fn toy4() -> (Skeleton, BodyShape) {
        let skel = Skeleton::new(
            ["pelvis", "spine", "head", "knee"].map(String::from).to_vec(),
            vec![0, 0, 1, 0],
            vec![
                Vector3::zeros(),
                Vector3::new(0.0, 0.3, 0.0),
                Vector3::new(0.0, 0.3, 0.05),
                Vector3::new(0.1, -0.45, 0.0),
            ],
            vec![false, false, false, true],
        )
        .expect("toy skeleton is valid");
        let shape = BodyShape {
            radii: vec![0.1, 0.12, 0.1, 0.07],
            scale: 1.0,
        };
        (skel, shape)
    }

    pub fn from_toml_str(text: &str) -> Result<(Skeleton, BodyShape)> {
        let file: SkeletonFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("skeleton: {e}")))?;
        let names: Vec<String> = file.joint.iter().map(|d| d.name.clone()).collect();
        let mut parents = Vec::with_capacity(names.len());
        for d in &file.joint {
            let p = names
                .iter()
                .position(|n| *n == d.parent)
                .ok_or_else(|| Error::Config(format!("unknown parent `{}` of {}", d.parent, d.name)))?;
            parents.push(p);
        }
        let skel = Skeleton::new(
            names,
            parents,
            file.joint.iter().map(|d| Vector3::from(d.offset)).collect(),
            file.joint.iter().map(|d| d.lower).collect(),
        )?;
        let shape = BodyShape {
            radii: file.joint.iter().map(|d| d.radius).collect(),
            scale: file.scale,
        };
        shape.validate(&skel)?;
        Ok((skel, shape))
    }

    pub fn load(path: &Path) -> Result<(Skeleton, BodyShape)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn num_joints(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn offsets(&self) -> &[Vector3<f64>] {
        &self.offsets
    }

    pub fn is_lower(&self, j: usize) -> bool {
        self.lower[j]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn lower_joints(&self) -> Vec<usize> {
        (0..self.num_joints()).filter(|&j| self.lower[j]).collect()
    }

    pub fn upper_joints(&self) -> Vec<usize> {
        (0..self.num_joints()).filter(|&j| !self.lower[j]).collect()
    }

    /// Head, left wrist and right wrist, the joints the headset and
    /// controllers track.
    pub fn tracked(&self) -> Result<[usize; 3]> {
        let find = |n: &str| {
            self.index_of(n)
                .ok_or_else(|| Error::SkeletonMismatch(format!("no `{n}` joint to track")))
        };
        Ok([find("head")?, find("left_wrist")?, find("right_wrist")?])
    }

    /// CRC32 of the topology and rest offsets, used to match checkpoints and
    /// datasets to a skeleton.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for k in 0..self.num_joints() {
            h.update(self.names[k].as_bytes());
            h.update(&(self.parents[k] as u32).to_le_bytes());
            for c in self.offsets[k].iter() {
                h.update(&(*c as f32).to_le_bytes());
            }
            h.update(&[self.lower[k] as u8]);
        }
        h.finalize()
    }
}

impl BodyShape {
    pub fn validate(&self, skel: &Skeleton) -> Result<()> {
        if self.radii.len() != skel.num_joints() {
            return Err(Error::Config(format!(
                "{} radii for {} joints",
                self.radii.len(),
                skel.num_joints()
            )));
        }
        for (k, &r) in self.radii.iter().enumerate().skip(1) {
            if !(MIN_RADIUS..=MAX_RADIUS).contains(&r) {
                return Err(Error::Config(format!(
                    "radius {r} of bone {} outside [{MIN_RADIUS}, {MAX_RADIUS}]",
                    skel.names[k]
                )));
            }
        }
        if !(MIN_SCALE..=MAX_SCALE).contains(&self.scale) {
            return Err(Error::Config(format!(
                "scale {} outside [{MIN_SCALE}, {MAX_SCALE}]",
                self.scale
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_body() {
        let (s, shape) = Skeleton::smpl22();
        assert_eq!(s.num_joints(), 22);
        assert_eq!(
            s.parents(),
            &[0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19]
        );
        assert_eq!(s.lower_joints(), vec![1, 2, 4, 5, 7, 8, 10, 11]);
        assert_eq!(s.tracked().unwrap(), [15, 20, 21]);
        shape.validate(&s).unwrap();
    }

    #[test]
    fn rejects_bad_trees() {
        let off = vec![Vector3::zeros(), Vector3::x()];
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(Skeleton::new(names.clone(), vec![1, 0], off.clone(), vec![false; 2]).is_err());
        assert!(Skeleton::new(names.clone(), vec![0, 1], off, vec![false; 2]).is_err());
        let zero = vec![Vector3::zeros(), Vector3::zeros()];
        assert!(Skeleton::new(names, vec![0, 0], zero, vec![false; 2]).is_err());
    }

    #[test]
    fn rejects_out_of_range_shape() {
        let (s, mut shape) = Skeleton::smpl22();
        shape.radii[3] = 0.25;
        assert!(shape.validate(&s).is_err());
        shape.radii[3] = 0.1;
        shape.scale = 1.2;
        assert!(shape.validate(&s).is_err());
    }

    #[test]
    fn unknown_parent_is_a_config_error() {
        let text = r#"
            [[joint]]
            name = "root"
            parent = "root"
            offset = [0, 0, 0]
            radius = 0.1
            [[joint]]
            name = "tip"
            parent = "nope"
            offset = [0, 1, 0]
            radius = 0.1
        "#;
        assert!(matches!(Skeleton::from_toml_str(text), Err(Error::Config(_))));
    }
}
