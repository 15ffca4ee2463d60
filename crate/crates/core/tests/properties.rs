use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xrmbt::graph::Graph;
use xrmbt::io::Container;
use xrmbt::kinematics::capsule::{body_capsules, sample_capsules};
use xrmbt::kinematics::fk::fk_matrices;
use xrmbt::kinematics::{Pose, Rot6D, Skeleton};
use xrmbt::losses::{pc_loss, spc_loss, JointEvidence};
use xrmbt::metrics::{jitter_ratio, mpjpe, mpjve};
use xrmbt::mpe::apply_offset;
use xrmbt::sensor::motion::{gen_motion, Protocol};
use xrmbt::sensor::rig::{corrupt, label_points, SensorRig, LABEL_THRESHOLD};
use xrmbt::sensor::sequence::{sequence_rng, simulate_sequence, SimConfig};
use xrmbt::spc::{SpcConfig, SpcNet};
use xrmbt::synthesis::{synth_noisy_oracle, OracleConfig, SynthMlp, SynthMlpConfig};
use xrmbt::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn vec3() -> impl Strategy<Value = Vector3<f64>> {
    (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    (vec3(), 0.0..std::f64::consts::PI).prop_filter_map("axis", |(a, ang)| {
        (a.norm() > 1e-3).then(|| *Rotation3::from_scaled_axis(a.normalize() * ang).matrix())
    })
}

fn random_pose(j: usize) -> impl Strategy<Value = Pose> {
    prop::collection::vec(rotation(), j).prop_map(move |rots| Pose {
        local_rot: rots.iter().map(Rot6D::from_matrix).collect(),
        root_pos: [0.0; 3],
        root_rot: Rot6D::IDENTITY,
    })
}

fn orthonormal(m: &Matrix3<f64>, tol: f64) -> bool {
    (m.transpose() * m - Matrix3::identity()).abs().max() < tol && (m.determinant() - 1.0).abs() < tol
}

fn sorted(mut v: Vec<Vector3<f64>>) -> Vec<[u64; 3]> {
    let mut keys: Vec<[u64; 3]> = v.drain(..).map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]).collect();
    keys.sort_unstable();
    keys
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 2usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = Tensor::<f32>::from_fn([rows, cols], |_| rand::Rng::gen_range(&mut r, -5.0..5.0));
        let mut g = Graph::<f32>::new();
        let x = g.constant(t).unwrap();
        let s = g.softmax(x).unwrap();
        let out = g.value(s);
        for i in 0..rows {
            let row = out.row(i);
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn fk_follows_rigid_root_motion(pose in random_pose(4), r in rotation(), t in vec3(), scale in 0.85..1.15f64) {
        let (skel, _) = Skeleton::toy4();
        let local = pose.local_matrices().unwrap();
        let base = fk_matrices(&skel, Vector3::zeros(), &Matrix3::identity(), &local, scale);
        let moved = fk_matrices(&skel, t, &r, &local, scale);
        for (a, b) in base.positions.iter().zip(&moved.positions) {
            prop_assert!((r * a + t - b).norm() < 1e-9);
        }
    }

    #[test]
    fn bone_lengths_do_not_depend_on_pose(pose in random_pose(22), scale in 0.85..1.15f64) {
        let (skel, _) = Skeleton::smpl22();
        let out = fk_matrices(&skel, Vector3::zeros(), &Matrix3::identity(), &pose.local_matrices().unwrap(), scale);
        for k in 1..skel.num_joints() {
            let len = (out.positions[k] - out.positions[skel.parents()[k]]).norm();
            prop_assert!((len - skel.offsets()[k].norm() * scale).abs() < 1e-6);
        }
    }

    #[test]
    fn surface_samples_sit_on_their_capsule(pose in random_pose(22), seed in any::<u64>()) {
        let (skel, shape) = Skeleton::smpl22();
        let out = fk_matrices(&skel, Vector3::zeros(), &Matrix3::identity(), &pose.local_matrices().unwrap(), shape.scale);
        let caps = body_capsules(&skel, &shape, &out.positions);
        for (p, c) in sample_capsules(&caps, &mut rng(seed), 200) {
            let d = caps[c].axis_distance(&p);
            prop_assert!((d - caps[c].radius).abs() <= 1e-6, "{d} vs {}", caps[c].radius);
        }
    }

    #[test]
    fn labels_name_the_nearest_joint_within_threshold(seed in any::<u64>(), pose in random_pose(22)) {
        let (skel, shape) = Skeleton::smpl22();
        let joints = fk_matrices(&skel, Vector3::zeros(), &Matrix3::identity(), &pose.local_matrices().unwrap(), 1.0).positions;
        let caps = body_capsules(&skel, &shape, &joints);
        let clean: Vec<_> = sample_capsules(&caps, &mut rng(seed), 300).into_iter().map(|(p, _)| p).collect();
        let labels = label_points(&clean, &joints);
        let mut noisy = clean.clone();
        let outlier = corrupt(&mut noisy, &mut rng(seed ^ 1));
        for i in 0..clean.len() {
            let dists: Vec<f64> = joints.iter().map(|j| (clean[i] - j).norm()).collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let l = labels[i] as usize;
            if l == joints.len() {
                prop_assert!(min > LABEL_THRESHOLD);
                continue;
            }
            prop_assert!(dists[l] <= LABEL_THRESHOLD && dists[l] == min);
            if !outlier[i] {
                // noise only moves a point as far as its own displacement
                let moved = (noisy[i] - clean[i]).norm();
                prop_assert!((noisy[i] - joints[l]).norm() <= LABEL_THRESHOLD + moved + 1e-12);
            }
        }
    }

    #[test]
    fn occlusion_ignores_point_order(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let (skel, shape) = Skeleton::smpl22();
        let m = gen_motion(&skel, 1.0, Protocol::Kick, 12, &mut rng(seed)).unwrap();
        let out = &m.fk[(seed % 12) as usize];
        let head = skel.tracked().unwrap()[0];
        let rig = SensorRig::default();
        let sensor = rig.pose(&out.positions[head], &out.globals[head]);
        let caps = body_capsules(&skel, &shape, &out.positions);
        let raw: Vec<_> = sample_capsules(&caps, &mut rng(seed), 256).into_iter().map(|(p, _)| p).collect();
        let mut shuffled = raw.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng(perm_seed));
        let a = rig.visible_points(&raw, &sensor, &caps);
        let b = rig.visible_points(&shuffled, &sensor, &caps);
        prop_assert_eq!(sorted(a), sorted(b));
    }

    #[test]
    fn generated_motion_keeps_bone_lengths(seed in any::<u64>(), p in 0usize..4, scale in 0.85..1.15f64) {
        let (skel, _) = Skeleton::smpl22();
        let protocol = [Protocol::Idle, Protocol::Walk, Protocol::Kick, Protocol::Walk][p];
        let m = gen_motion(&skel, scale, protocol, 24, &mut rng(seed)).unwrap();
        for out in &m.fk {
            for k in 1..skel.num_joints() {
                let len = (out.positions[k] - out.positions[skel.parents()[k]]).norm();
                prop_assert!((len - skel.offsets()[k].norm() * scale).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn spc_is_permutation_equivariant(seed in any::<u64>(), perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle()) {
        let net = SpcNet::<f32>::init(SpcConfig::new(4, 8), &mut rng(seed));
        let mut r = rng(seed ^ 7);
        let cloud: Vec<[f32; 3]> = (0..8).map(|_| std::array::from_fn(|_| rand::Rng::gen_range(&mut r, -1.0..1.0))).collect();
        let x: [f32; 54] = std::array::from_fn(|_| rand::Rng::gen_range(&mut r, -1.0..1.0));
        let hist: Vec<f32> = (0..128).map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect();
        let a = net.forward(&x, &cloud, &hist).unwrap();
        let permuted: Vec<[f32; 3]> = perm.iter().map(|&i| cloud[i]).collect();
        let b = net.forward(&x, &permuted, &hist).unwrap();
        prop_assert_eq!(&a.global, &b.global);
        for (row, &src) in perm.iter().enumerate() {
            prop_assert_eq!(b.probs.row(row), a.probs.row(src));
        }
        for i in 0..8 {
            let s: f64 = a.probs.row(i).iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
            prop_assert!(a.probs.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn offsets_always_give_valid_rotations(y in prop::collection::vec(-1.0..1.0f32, 24), off in prop::collection::vec(-10.0..10.0f32, 24)) {
        if let Ok(z) = apply_offset(&y, &off) {
            for c in z.chunks(6) {
                let m = Rot6D(c.try_into().unwrap()).to_matrix().unwrap();
                prop_assert!(orthonormal(&m, 1e-5));
                // already normalized: the stored columns are the frame itself
                for k in 0..3 {
                    prop_assert!((m[(k, 0)] - c[k] as f64).abs() < 1e-6);
                    prop_assert!((m[(k, 1)] - c[3 + k] as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn spc_loss_is_translation_invariant(
        pos in prop::collection::vec(vec3(), 4),
        cen in prop::collection::vec(vec3(), 4),
        active in prop::collection::vec(any::<bool>(), 4),
        shift in vec3(),
    ) {
        let ev = |c: &[Vector3<f64>]| JointEvidence { support: vec![10.0; 4], centroid: c.to_vec(), active: active.clone() };
        let a = spc_loss(&[ev(&cen)], &[pos.clone()], 0.1).unwrap();
        let moved_c: Vec<_> = cen.iter().map(|c| c + shift).collect();
        let moved_p: Vec<_> = pos.iter().map(|p| p + shift).collect();
        let b = spc_loss(&[ev(&moved_c)], &[moved_p], 0.1).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn spc_loss_shrinks_toward_the_centroid(
        pos in prop::collection::vec(vec3(), 4),
        cen in prop::collection::vec(vec3(), 4),
        k in 0usize..4,
        steps in prop::collection::vec(0.0..1.0f64, 2),
    ) {
        let e = JointEvidence { support: vec![10.0; 4], centroid: cen.clone(), active: vec![true; 4] };
        let (lo, hi) = (steps[0].min(steps[1]), steps[0].max(steps[1]));
        let at = |s: f64| {
            let mut p = pos.clone();
            p[k] = pos[k] + (cen[k] - pos[k]) * s;
            spc_loss(std::slice::from_ref(&e), &[p], 0.1).unwrap()
        };
        prop_assert!(at(hi) <= at(lo) + 1e-12);
    }

    #[test]
    fn pc_loss_is_zero_exactly_inside(pose in random_pose(4), pts in prop::collection::vec(vec3(), 1..20)) {
        let (skel, shape) = Skeleton::toy4();
        let joints = fk_matrices(&skel, Vector3::zeros(), &Matrix3::identity(), &pose.local_matrices().unwrap(), 1.0).positions;
        let caps = body_capsules(&skel, &shape, &joints);
        let cloud: Vec<_> = pts.iter().map(|p| p * 0.3).collect();
        let l = pc_loss(&[cloud.clone()], &[joints.clone()], &skel, &shape).unwrap();
        prop_assert!(l >= 0.0);
        let inside = cloud.iter().all(|q| caps.iter().any(|c| c.axis_distance(q) <= c.radius));
        prop_assert_eq!(l == 0.0, inside);
    }

    #[test]
    fn metrics_ignore_shared_rigid_motion(seed in any::<u64>(), r in rotation(), t in vec3()) {
        let mut g = rng(seed);
        let mut seq = || -> Vec<Vec<Vector3<f64>>> {
            (0..8).map(|f| (0..4).map(|k| Vector3::new((f * k) as f64 * 0.01, 0.0, 0.0) + Vector3::from_fn(|_, _| rand::Rng::gen_range(&mut g, -0.5..0.5))).collect()).collect()
        };
        let (pred, gt) = (seq(), seq());
        let move_all = |s: &Vec<Vec<Vector3<f64>>>| -> Vec<Vec<Vector3<f64>>> { s.iter().map(|f| f.iter().map(|p| r * p + t).collect()).collect() };
        let (mp, mg) = (move_all(&pred), move_all(&gt));
        let all = [0, 1, 2, 3];
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
        prop_assert!(close(mpjpe(&pred, &gt, &all).unwrap(), mpjpe(&mp, &mg, &all).unwrap()));
        prop_assert!(close(mpjve(&pred, &gt, &all, 30.0).unwrap(), mpjve(&mp, &mg, &all, 30.0).unwrap()));
        prop_assert!(close(jitter_ratio(&pred, &gt, &all, 30.0).unwrap(), jitter_ratio(&mp, &mg, &all, 30.0).unwrap()));
    }

    #[test]
    fn mpjpe_obeys_the_triangle_inequality(seed in any::<u64>()) {
        let mut g = rng(seed);
        let mut seq = || -> Vec<Vec<Vector3<f64>>> {
            (0..5).map(|_| (0..4).map(|_| Vector3::from_fn(|_, _| rand::Rng::gen_range(&mut g, -1.0..1.0))).collect()).collect()
        };
        let (a, b, c) = (seq(), seq(), seq());
        let all = [0, 1, 2, 3];
        let m = |x: &[Vec<Vector3<f64>>], y: &[Vec<Vector3<f64>>]| mpjpe(x, y, &all).unwrap();
        prop_assert!(m(&a, &c) <= m(&a, &b) + m(&b, &c) + 1e-12);
    }

    #[test]
    fn any_payload_flip_is_detected(data in prop::collection::vec(any::<u8>(), 1..64), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut c = Container::new("probe", 1);
        c.set("n", data.len());
        c.block("data", data.clone());
        let mut bytes = c.to_bytes();
        let path = std::path::Path::new("probe");
        prop_assert_eq!(Container::from_bytes(&bytes, path, "probe", 1).unwrap(), c);
        let start = bytes.len() - data.len();
        let i = start + at.index(data.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(Container::from_bytes(&bytes, path, "probe", 1).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synthesis_outputs_reconstruct_orthonormally(seed in any::<u64>()) {
        let (skel, shape) = Skeleton::smpl22();
        let cfg = SimConfig { frames: 10, points: 16, ..SimConfig::default() };
        let s = simulate_sequence(&cfg, &skel, &shape, Protocol::Kick, &mut sequence_rng(seed, 0)).unwrap().sample;
        let oracle = synth_noisy_oracle(&skel, &s.x, s.gt.as_ref().unwrap(), s.scale as f64, &OracleConfig::default(), &mut rng(seed)).unwrap();
        let mlp = SynthMlp::<f32>::init(SynthMlpConfig::new(22), &mut rng(seed)).predict(&skel, &s.x, s.scale as f64).unwrap();
        for pose in oracle.iter().chain(&mlp) {
            prop_assert_eq!(pose.local_rot.len(), 22);
            for r in pose.local_rot.iter().chain([&pose.root_rot]) {
                prop_assert!(orthonormal(&r.to_matrix().unwrap(), 1e-5));
            }
        }
    }
}

/// Labeled, non-outlier points stay within the labeling radius plus three
/// noise standard deviations of their joint, up to the Gaussian tail.
#[test]
fn labeled_points_mostly_within_three_sigma_band() {
    let (skel, shape) = Skeleton::smpl22();
    let (mut far, mut n) = (0usize, 0usize);
    for seed in 0..20 {
        let m = gen_motion(&skel, 1.0, Protocol::Walk, 4, &mut rng(seed)).unwrap();
        for out in &m.fk {
            let caps = body_capsules(&skel, &shape, &out.positions);
            let clean: Vec<_> = sample_capsules(&caps, &mut rng(seed + 100), 500).into_iter().map(|(p, _)| p).collect();
            let labels = label_points(&clean, &out.positions);
            let mut noisy = clean;
            let outlier = corrupt(&mut noisy, &mut rng(seed + 200));
            for i in 0..noisy.len() {
                let l = labels[i] as usize;
                if l < skel.num_joints() && !outlier[i] {
                    n += 1;
                    far += ((noisy[i] - out.positions[l]).norm() > LABEL_THRESHOLD + 0.06) as usize;
                }
            }
        }
    }
    // the norm of 3-d noise exceeds 3 sigma about 3% of the time, and only
    // points already near the threshold can cross it
    let rate = far as f64 / n as f64;
    assert!(n > 1000 && rate < 0.01, "{far} of {n}");
}
