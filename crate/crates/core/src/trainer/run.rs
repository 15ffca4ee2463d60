use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{assemble_batch, build_step, evaluate, Mode, Model, TrainConfig};
use crate::dataset::Datasets;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kinematics::{BodyShape, Skeleton};
use crate::losses::total_node;
use crate::metrics::MetricReport;
use crate::optim::{adam_step, AdamConfig, AdamState, ParamStore};
use crate::synthesis::Synthesizer;
use crate::tensor::Tensor;

/// Loss values of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub l_rot: f64,
    pub l_pos: f64,
    pub l_ce: Option<f64>,
    pub l_spc: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The last parameters whose loss and gradients were finite.
    pub model: Model,
    pub log: Vec<LogRow>,
    /// Step and message of a numerical failure that stopped training.
    pub aborted: Option<(usize, String)>,
}

fn all_finite(grads: &[Tensor<f32>]) -> bool {
    grads.iter().all(Tensor::all_finite)
}

struct Opt {
    state: AdamState,
}

impl Opt {
    fn new(p: &ParamStore) -> Self {
        Self {
            state: AdamState::new(p),
        }
    }
}

/// Trains `cfg.mode` on the labelled and unlabelled training splits. Starts
/// from `init` when given (its networks must match the mode), else from a
/// fresh initialization drawn from `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    skel: &Skeleton,
    shape: &BodyShape,
    data: &Datasets,
    synth: &Synthesizer,
    init: Option<Model>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let j = skel.num_joints();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let points = data
        .train_mocap
        .first()
        .map(|s| s.num_points())
        .ok_or_else(|| Error::EmptyDataset("labelled training split".into()))?;
    let mut model = match init {
        Some(m) => {
            if m.mode.has_spc() != cfg.mode.has_spc() || m.mode.has_mpe() != cfg.mode.has_mpe() {
                return Err(Error::Config(format!(
                    "cannot continue a {} model as {}",
                    m.mode, cfg.mode
                )));
            }
            if m.joints != j || (m.spc.is_some() && m.points != points) {
                return Err(Error::SkeletonMismatch("model does not fit the data".into()));
            }
            Model { mode: cfg.mode, ..m }
        }
        None => Model::init(cfg.mode, j, points, &mut rng),
    };
    let mut log = Vec::new();
    if !cfg.mode.has_mpe() {
        return Ok(TrainOutcome {
            model,
            log,
            aborted: None,
        });
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut spc_opt = model.spc.as_ref().map(|n| Opt::new(&n.params));
    let mut mpe_opt = model.mpe.as_ref().map(|n| Opt::new(&n.params));
    for step in 0..cfg.iterations {
        let batch = assemble_batch(cfg, skel, synth, &data.train_mocap, &data.train_real, &mut rng)?;
        let mut g = Graph::<f32>::new();
        let bound = model.bind(&mut g)?;
        let nodes = build_step(&mut g, &model, &bound, &batch, skel, shape, cfg)?
            .expect("modes with a pose network build a loss");
        let total = match total_node(&mut g, &nodes, &cfg.weights) {
            Ok(t) => t,
            Err(e) if e.is_numerical() => {
                return Ok(TrainOutcome {
                    model,
                    log,
                    aborted: Some((step, e.to_string())),
                });
            }
            Err(e) => return Err(e),
        };
        let c = nodes.values(&g);
        let row = LogRow {
            step,
            l_rot: c.rot.unwrap_or(0.0),
            l_pos: c.pos.unwrap_or(0.0),
            l_ce: c.ce,
            l_spc: c.spc,
            total: g.value(total).data()[0] as f64,
        };
        if !row.total.is_finite() {
            return Ok(TrainOutcome {
                model,
                log,
                aborted: Some((step, "non-finite total loss".into())),
            });
        }
        g.backward(total)?;
        let spc_grads = match (&model.spc, &bound.spc) {
            (Some(n), Some(b)) => Some(n.params.gradients(&g, b)),
            _ => None,
        };
        let mpe_grads = match (&model.mpe, &bound.mpe) {
            (Some(n), Some(b)) => Some(n.params.gradients(&g, b)),
            _ => None,
        };
        if !spc_grads.iter().chain(&mpe_grads).all(|gr| all_finite(gr)) {
            return Ok(TrainOutcome {
                model,
                log,
                aborted: Some((step, "non-finite gradient".into())),
            });
        }
        if let (Some(n), Some(o), Some(gr)) = (model.spc.as_mut(), spc_opt.as_mut(), &spc_grads) {
            adam_step(&mut n.params, gr, &mut o.state, &adam)?;
        }
        if let (Some(n), Some(o), Some(gr)) = (model.mpe.as_mut(), mpe_opt.as_mut(), &mpe_grads) {
            adam_step(&mut n.params, gr, &mut o.state, &adam)?;
        }
        log.push(row);
    }
    Ok(TrainOutcome {
        model,
        log,
        aborted: None,
    })
}

/// Continues training `model` under `cfg`, typically with a
/// self-supervised mode on the unlabelled split.
pub fn finetune(
    model: Model,
    cfg: &TrainConfig,
    skel: &Skeleton,
    shape: &BodyShape,
    data: &Datasets,
    synth: &Synthesizer,
) -> Result<TrainOutcome> {
    train(cfg, skel, shape, data, synth, Some(model))
}

/// One rung of the ablation ladder.
#[derive(Debug, Clone)]
pub struct LadderEntry {
    pub mode: Mode,
    pub model: Model,
    pub log: Vec<LogRow>,
    /// Scores on the labelled-domain test split.
    pub test_mocap: MetricReport,
    /// Scores on the held-out-domain test split, when it has sequences.
    pub test_real: Option<MetricReport>,
}

/// Trains and evaluates each mode with the same seeds. Test sequences of the
/// labelled domain are synthesized by `synth` from `cfg.eval_seed`; the
/// held-out domain uses its stored synthesis.
pub fn run_ablation_ladder(
    cfg: &TrainConfig,
    modes: &[Mode],
    skel: &Skeleton,
    shape: &BodyShape,
    data: &Datasets,
    synth: &Synthesizer,
) -> Result<Vec<LadderEntry>> {
    modes
        .iter()
        .map(|&mode| {
            let c = TrainConfig { mode, ..*cfg };
            let out = train(&c, skel, shape, data, synth, None)?;
            if let Some((step, msg)) = &out.aborted {
                return Err(Error::NonFinite(format!("{mode} at step {step}: {msg}")));
            }
            let test_mocap = evaluate(&out.model, skel, shape, &data.test_mocap, synth, cfg.eval_seed)?;
            let test_real = if data.test_real.is_empty() {
                None
            } else {
                Some(evaluate(
                    &out.model,
                    skel,
                    shape,
                    &data.test_real,
                    &Synthesizer::Stored,
                    cfg.eval_seed,
                )?)
            };
            Ok(LadderEntry {
                mode,
                model: out.model,
                log: out.log,
                test_mocap,
                test_real,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, DataConfig};
    use crate::synthesis::OracleConfig;

    fn tiny() -> (Skeleton, BodyShape, Datasets) {
        let (skel, shape) = Skeleton::smpl22();
        let cfg = DataConfig {
            train_mocap: 2,
            train_real: 2,
            test_mocap: 1,
            test_real: 1,
            frames: 10,
            points: 16,
            ..DataConfig::default()
        };
        let data = generate(&cfg, &skel, &shape, &OracleConfig::default(), 3).unwrap();
        (skel, shape, data)
    }

    #[test]
    fn training_is_reproducible_and_lowers_the_loss() {
        let (skel, shape, data) = tiny();
        let cfg = TrainConfig {
            mode: Mode::MpeSpcDecoderSpcloss,
            iterations: 30,
            lr: 1e-3,
            batch_mocap: 8,
            batch_real: 4,
            ..TrainConfig::desk()
        };
        let synth = Synthesizer::Oracle(OracleConfig::default());
        let a = train(&cfg, &skel, &shape, &data, &synth, None).unwrap();
        let b = train(&cfg, &skel, &shape, &data, &synth, None).unwrap();
        assert!(a.aborted.is_none());
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_eq!(a.log, b.log);
        let head: f64 = a.log[..5].iter().map(|r| r.l_ce.unwrap()).sum();
        let tail: f64 = a.log[25..].iter().map(|r| r.l_ce.unwrap()).sum();
        assert!(tail < head, "ce {head} -> {tail}");
    }

    #[test]
    fn synthesis_only_has_nothing_to_train() {
        let (skel, shape, data) = tiny();
        let cfg = TrainConfig {
            mode: Mode::SynthesisOnly,
            ..TrainConfig::desk()
        };
        let out = train(&cfg, &skel, &shape, &data, &Synthesizer::Oracle(OracleConfig::default()), None).unwrap();
        assert!(out.log.is_empty() && out.model.num_params() == 0);
    }

    #[test]
    fn finetune_rejects_mismatched_networks() {
        let (skel, shape, data) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::init(Mode::Mpe, 22, 16, &mut rng);
        let cfg = TrainConfig {
            mode: Mode::MpeSpcDecoderSpcloss,
            ..TrainConfig::desk()
        };
        let synth = Synthesizer::Oracle(OracleConfig::default());
        assert!(finetune(m, &cfg, &skel, &shape, &data, &synth).is_err());
    }
}
