use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xrmbt::dataset::{generate, DataConfig, Datasets};
use xrmbt::graph::Graph;
use xrmbt::kinematics::{BodyShape, Skeleton};
use xrmbt::losses::{total_node, LossNodes};
use xrmbt::synthesis::{OracleConfig, SynthMlp, SynthMlpConfig, Synthesizer};
use xrmbt::tensor::Tensor;
use xrmbt::trainer::{assemble_batch, build_step, evaluate, train, Batch, Mode, Model, TrainConfig};

fn small(seed: u64) -> (Skeleton, BodyShape, Datasets) {
    let (skel, shape) = Skeleton::smpl22();
    let cfg = DataConfig {
        train_mocap: 3,
        train_real: 3,
        test_mocap: 2,
        test_real: 2,
        frames: 16,
        points: 24,
        ..DataConfig::default()
    };
    let data = generate(&cfg, &skel, &shape, &OracleConfig::default(), seed).unwrap();
    (skel, shape, data)
}

fn quick(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        iterations: 5,
        batch_mocap: 8,
        batch_real: 8,
        ..TrainConfig::desk()
    }
}

/// Gradients of the labelled terms only (rotation, position, registration
/// cross-entropy), flattened over both networks.
fn labelled_gradients(model: &Model, batch: &Batch, skel: &Skeleton, shape: &BodyShape, cfg: &TrainConfig) -> (Vec<f32>, f64) {
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g).unwrap();
    let nodes = build_step(&mut g, model, &bound, batch, skel, shape, cfg).unwrap().unwrap();
    let spc_value = g.value(nodes.spc.unwrap()).data()[0] as f64;
    let labelled = LossNodes { spc: None, ..nodes };
    let total = total_node(&mut g, &labelled, &cfg.weights).unwrap();
    g.backward(total).unwrap();
    let mut out = Vec::new();
    if let (Some(spc), Some(b)) = (&model.spc, &bound.spc) {
        out.extend(spc.params.gradients(&g, b).iter().flat_map(|t| t.data().to_vec()));
    }
    let (mpe, b) = (model.mpe.as_ref().unwrap(), bound.mpe.as_ref().unwrap());
    out.extend(mpe.params.gradients(&g, b).iter().flat_map(|t| t.data().to_vec()));
    (out, spc_value)
}

fn scramble_rows(t: &mut Tensor<f64>, from: usize, rng: &mut ChaCha8Rng) {
    for r in from..t.rows() {
        for v in t.row_mut(r) {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

#[test]
fn labelled_losses_ignore_unlabelled_rows() {
    let (skel, shape, data) = small(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [Mode::MpeSpcDecoderSpcloss, Mode::MpeSpcDecoderPcloss] {
        let cfg = quick(mode);
        let mut model = Model::init(mode, 22, 24, &mut rng);
        // move off the zero-initialized output so every weight gets a gradient
        for t in model.mpe.as_mut().unwrap().params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        }
        let batch = assemble_batch(&cfg, &skel, &Synthesizer::Oracle(OracleConfig::default()), &data.train_mocap, &data.train_real, &mut rng).unwrap();
        assert!(batch.real_clips > 0);
        let (fm, p, c, k) = (batch.mocap_frames(), batch.points, batch.mocap_clips, cfg.history_samples);
        let mut other = batch.clone();
        scramble_rows(&mut other.x, fm, &mut rng);
        scramble_rows(&mut other.y, fm, &mut rng);
        scramble_rows(&mut other.points_local, fm * p, &mut rng);
        scramble_rows(&mut other.points_world, fm * p, &mut rng);
        scramble_rows(&mut other.hist_x, c * k, &mut rng);
        scramble_rows(&mut other.hist_points, c * k * p, &mut rng);
        let (a, la) = labelled_gradients(&model, &batch, &skel, &shape, &cfg);
        let (b, lb) = labelled_gradients(&model, &other, &skel, &shape, &cfg);
        assert!(a.iter().any(|&v| v != 0.0));
        assert_eq!(a, b, "{mode:?}");
        // the self-supervised term does see the change
        assert_ne!(la, lb);
    }
}

#[test]
fn training_leaves_synthesis_untouched() {
    let (skel, shape, data) = small(4);
    let net = SynthMlp::<f32>::init(SynthMlpConfig::new(22), &mut ChaCha8Rng::seed_from_u64(9));
    let synth = Synthesizer::Mlp(net.clone());
    let before = synth.checksum();
    assert_ne!(before, 0);
    let out = train(&quick(Mode::MpeSpcDecoderSpcloss), &skel, &shape, &data, &synth, None).unwrap();
    assert!(out.aborted.is_none());
    assert_eq!(synth.checksum(), before);
    let Synthesizer::Mlp(after) = &synth else { unreachable!() };
    assert_eq!(after.params.tensors(), net.params.tensors());
}

#[test]
fn zero_iterations_reproduce_synthesis() {
    let (skel, shape, data) = small(5);
    let synth = Synthesizer::Oracle(OracleConfig::default());
    let base = Model::init(Mode::SynthesisOnly, 22, 24, &mut ChaCha8Rng::seed_from_u64(0));
    let want = evaluate(&base, &skel, &shape, &data.test_mocap, &synth, 11).unwrap();
    for mode in [Mode::Mpe, Mode::MpeSpcDecoder, Mode::MpeSpcDecoderSpcloss] {
        let cfg = TrainConfig {
            iterations: 0,
            ..quick(mode)
        };
        let out = train(&cfg, &skel, &shape, &data, &synth, None).unwrap();
        assert!(out.log.is_empty());
        let got = evaluate(&out.model, &skel, &shape, &data.test_mocap, &synth, 11).unwrap();
        assert_eq!(got, want, "{mode:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let (skel, shape, data) = small(6);
    let synth = Synthesizer::Oracle(OracleConfig::default());
    let cfg = quick(Mode::MpeSpcDecoderSpcloss);
    let a = train(&cfg, &skel, &shape, &data, &synth, None).unwrap();
    let b = train(&cfg, &skel, &shape, &data, &synth, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.checksum(), b.model.checksum());
    let c = train(&TrainConfig { seed: 1, ..cfg }, &skel, &shape, &data, &synth, None).unwrap();
    assert_ne!(a.model.checksum(), c.model.checksum());
}
