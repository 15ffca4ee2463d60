use nalgebra::Vector3;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::fk::{fk_scaled, Pose};
use super::skeleton::{BodyShape, Skeleton};
use crate::error::Result;

/// Segment `a`→`b` swept by a sphere of `radius`. `joint` is the bone's child
/// joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
    pub joint: usize,
}

/// Distance from `p` to segment `a`→`b` and the clamped segment parameter.
pub fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> (f64, f64) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((a + ab * t - p).norm(), t)
}

impl Capsule {
    pub fn axis_distance(&self, p: &Vector3<f64>) -> f64 {
        segment_distance(p, &self.a, &self.b).0
    }

    /// Signed distance to the surface, negative inside.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.axis_distance(p) - self.radius
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.signed_distance(p) < 0.0
    }

    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    pub fn lateral_area(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.radius * self.length()
    }

    /// Smallest ray parameter at which the ray `origin + t * dir` enters the
    /// capsule (`dir` unit length). May be negative when `origin` is inside.
    pub fn ray_entry(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let r2 = self.radius * self.radius;
        let mut best: Option<f64> = None;
        let mut keep = |t: f64| {
            if best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        };
        // lateral surface of the infinite cylinder, restricted to the segment
        let ba = self.b - self.a;
        let oa = origin - self.a;
        let baba = ba.dot(&ba);
        let bard = ba.dot(dir);
        let baoa = ba.dot(&oa);
        let qa = baba - bard * bard;
        if qa > 1e-12 * baba {
            let qb = baba * dir.dot(&oa) - baoa * bard;
            let qc = baba * oa.dot(&oa) - baoa * baoa - r2 * baba;
            let h = qb * qb - qa * qc;
            if h >= 0.0 {
                let t = (-qb - h.sqrt()) / qa;
                let y = baoa + t * bard;
                if y > 0.0 && y < baba {
                    keep(t);
                }
            }
        }
        // end spheres
        for c in [self.a, self.b] {
            let oc = origin - c;
            let qb = dir.dot(&oc);
            let qc = oc.dot(&oc) - r2;
            let h = qb * qb - qc;
            if h >= 0.0 {
                keep(-qb - h.sqrt());
            }
        }
        best
    }

    /// Point on the lateral surface at segment parameter `t` and angle `phi`.
    pub fn lateral_point(&self, t: f64, phi: f64) -> Vector3<f64> {
        let axis = (self.b - self.a).normalize();
        let helper = if axis.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let u = axis.cross(&helper).normalize();
        let v = axis.cross(&u);
        self.a + (self.b - self.a) * t + (u * phi.cos() + v * phi.sin()) * self.radius
    }
}

/// One capsule per non-root bone of the posed, scaled body.
pub fn body_capsules(skel: &Skeleton, shape: &BodyShape, positions: &[Vector3<f64>]) -> Vec<Capsule> {
    (1..skel.num_joints())
        .map(|k| Capsule {
            a: positions[skel.parents()[k]],
            b: positions[k],
            radius: shape.radii[k],
            joint: k,
        })
        .collect()
}

/// Uniform samples over the union of capsule lateral surfaces; capsules are
/// chosen with probability proportional to lateral area. Returns points
/// with the index of the generating capsule.
pub fn sample_capsules(
    caps: &[Capsule],
    rng: &mut impl Rng,
    count: usize,
) -> Vec<(Vector3<f64>, usize)> {
    if caps.is_empty() || count == 0 {
        return Vec::new();
    }
    let dist = WeightedIndex::new(caps.iter().map(Capsule::lateral_area))
        .expect("capsules have positive area");
    (0..count)
        .map(|_| {
            let c = dist.sample(rng);
            let t: f64 = rng.gen();
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            (caps[c].lateral_point(t, phi), c)
        })
        .collect()
}

/// `count` points on the body surface proxy of `pose`.
pub fn surface_sample(
    skel: &Skeleton,
    pose: &Pose,
    shape: &BodyShape,
    rng: &mut impl Rng,
    count: usize,
) -> Result<Vec<Vector3<f64>>> {
    let pos = fk_scaled(skel, pose, shape.scale)?;
    let caps = body_capsules(skel, shape, &pos);
    Ok(sample_capsules(&caps, rng, count)
        .into_iter()
        .map(|(p, _)| p)
        .collect())
}

/// Nearest joint and its distance; ties resolve to the lowest index.
pub fn closest_joint(point: &Vector3<f64>, joints: &[Vector3<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, j) in joints.iter().enumerate() {
        let d = (point - j).norm();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_capsule(radius: f64) -> Capsule {
        Capsule {
            a: Vector3::zeros(),
            b: Vector3::new(0.0, 1.0, 0.0),
            radius,
            joint: 1,
        }
    }

    #[test]
    fn ray_hits_cylinder_side() {
        let c = unit_capsule(0.1);
        let t = c.ray_entry(&Vector3::new(-1.0, 0.5, 0.0), &Vector3::x()).unwrap();
        assert!((t - 0.9).abs() < 1e-12);
    }

    #[test]
    fn ray_along_axis_hits_end_cap() {
        let c = unit_capsule(0.1);
        let t = c.ray_entry(&Vector3::new(0.0, 3.0, 0.0), &-Vector3::y()).unwrap();
        assert!((t - 1.9).abs() < 1e-12);
        assert!(c.ray_entry(&Vector3::new(0.5, 3.0, 0.0), &-Vector3::y()).is_none());
    }

    #[test]
    fn lateral_points_are_on_surface() {
        let c = Capsule {
            a: Vector3::new(0.1, 0.2, 0.3),
            b: Vector3::new(-0.3, 0.5, 0.1),
            radius: 0.07,
            joint: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (p, _) in sample_capsules(&[c], &mut rng, 1000) {
            assert!((c.axis_distance(&p) - 0.07).abs() < 1e-9);
        }
    }

    #[test]
    fn closest_joint_ties_and_coincidence() {
        let js = vec![
            Vector3::new(5.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(9.0, 9.0, 9.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
        ];
        assert_eq!(closest_joint(&Vector3::new(0.0, 2.0, 0.0), &js), (3, 0.0));
        assert_eq!(closest_joint(&Vector3::zeros(), &js).0, 1);
    }
}
