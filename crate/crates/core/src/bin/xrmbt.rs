use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xrmbt::config::{RunConfig, SEED_ENV};
use xrmbt::dataset::{generate, Datasets, Split};
use xrmbt::error::{Error, Result};
use xrmbt::features::canonical_x;
use xrmbt::io::{
    export_ply, load_checkpoint, load_datasets, load_sequence, log_csv, pose_csv, save_checkpoint,
    save_datasets, Checkpoint,
};
use xrmbt::kinematics::{BodyShape, Skeleton};
use xrmbt::metrics::{format_table, MetricReport};
use xrmbt::synthesis::{SynthInput, Synthesizer};
use xrmbt::trainer::{evaluate, run_ablation_ladder, train, Mode, Model};
use xrmbt::sensor::sequence::sequence_rng;

#[derive(Parser)]
#[command(name = "xrmbt", version, about = "Body tracking from 3-point input and depth point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (and the XRMBT_SEED variable).
    #[arg(long)]
    seed: Option<u64>,
    /// Skeleton TOML; the built-in 22-joint skeleton when omitted.
    #[arg(long)]
    skeleton: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test splits as sequence files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train one mode; writes a checkpoint and a CSV log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint on a test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// test_mocap or test_real.
        #[arg(long, default_value = "test_mocap")]
        split: String,
        /// CSV report path; the table is printed either way.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every mode of the ablation ladder.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Write one frame of a sequence as a labelled PLY cloud.
    ExportPly {
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Label points with this model's registration instead of stored labels.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write world coordinates instead of sensor coordinates.
        #[arg(long)]
        world: bool,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Predict poses for a sequence and write them as CSV.
    ExportPose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sequence: PathBuf,
        /// Synthesis-only output when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    let cfg = cfg.with_env_seed(env.as_deref())?;
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_skeleton(c: &Common) -> Result<(Skeleton, BodyShape)> {
    match &c.skeleton {
        Some(p) => Skeleton::load(p),
        None => Ok(Skeleton::smpl22()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn checked_model(path: &Path, skel: &Skeleton) -> Result<Model> {
    let ck = load_checkpoint(path)?;
    if ck.skeleton != skel.fingerprint() || ck.model.joints != skel.num_joints() {
        return Err(Error::SkeletonMismatch(format!(
            "{} was trained on a different skeleton",
            path.display()
        )));
    }
    Ok(ck.model)
}

fn test_split(data: &Datasets, name: &str) -> Result<Split> {
    let s = match name {
        "test_mocap" => Split::TestMocap,
        "test_real" => Split::TestReal,
        _ => return Err(Error::Config(format!("unknown split `{name}` (test_mocap, test_real)"))),
    };
    if data.split(s).is_empty() {
        return Err(Error::EmptyDataset(name.to_string()));
    }
    Ok(s)
}

/// Synthesis stage for a split: the oracle on simulated data, the stored
/// output on the held-out domain.
fn synth_for(cfg: &RunConfig, split: Split) -> Synthesizer {
    match split {
        Split::TrainReal | Split::TestReal => Synthesizer::Stored,
        _ => Synthesizer::Oracle(cfg.oracle),
    }
}

fn report_text(rows: &[(&str, &MetricReport)]) -> String {
    let mut s = format_table(rows);
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let (skel, shape) = load_skeleton(&common)?;
            let data = generate(&cfg.data, &skel, &shape, &cfg.oracle, cfg.seed)?;
            mkdir(&out)?;
            save_datasets(&data, &out)?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            for s in Split::ALL {
                println!("{}: {} sequences", s.as_str(), data.split(s).len());
            }
        }
        Command::Train {
            common,
            data,
            out,
            mode,
            iterations,
            init,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            cfg.validate()?;
            let (skel, shape) = load_skeleton(&common)?;
            let data = load_datasets(&data)?;
            let init = init.map(|p| checked_model(&p, &skel)).transpose()?;
            let synth = Synthesizer::Oracle(cfg.oracle);
            let outcome = train(&cfg.train, &skel, &shape, &data, &synth, init)?;
            mkdir(&out)?;
            let ck = Checkpoint {
                model: outcome.model,
                skeleton: skel.fingerprint(),
                steps: outcome.log.len(),
            };
            save_checkpoint(&ck, &out.join("model.ckpt"))?;
            write(&out.join("log.csv"), &log_csv(&outcome.log))?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            if let Some((step, msg)) = outcome.aborted {
                return Err(Error::NonFinite(format!("training stopped at step {step}: {msg}")));
            }
            println!("trained {} for {} steps", cfg.train.mode, ck.steps);
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
            out,
        } => {
            let cfg = load_config(&common)?;
            let (skel, shape) = load_skeleton(&common)?;
            let data = load_datasets(&data)?;
            let model = checked_model(&checkpoint, &skel)?;
            let s = test_split(&data, &split)?;
            let report = evaluate(&model, &skel, &shape, data.split(s), &synth_for(&cfg, s), cfg.train.eval_seed)?;
            let label = model.mode.as_str();
            print!("{}", report_text(&[(label, &report)]));
            if let Some(out) = out {
                write(&out, &report.to_csv(label))?;
            }
        }
        Command::Ablate {
            common,
            data,
            out,
            iterations,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            cfg.validate()?;
            let (skel, shape) = load_skeleton(&common)?;
            let data = load_datasets(&data)?;
            let synth = Synthesizer::Oracle(cfg.oracle);
            let ladder = run_ablation_ladder(&cfg.train, &Mode::ALL, &skel, &shape, &data, &synth)?;
            mkdir(&out)?;
            let mut csv_mocap = String::new();
            let mut csv_real = String::new();
            for e in &ladder {
                let d = out.join(e.mode.as_str());
                mkdir(&d)?;
                let ck = Checkpoint {
                    model: e.model.clone(),
                    skeleton: skel.fingerprint(),
                    steps: e.log.len(),
                };
                save_checkpoint(&ck, &d.join("model.ckpt"))?;
                write(&d.join("log.csv"), &log_csv(&e.log))?;
                let m = e.test_mocap.to_csv(e.mode.as_str());
                csv_mocap.push_str(if csv_mocap.is_empty() { &m } else { m.split_once('\n').map_or("", |x| x.1) });
                if let Some(r) = &e.test_real {
                    let r = r.to_csv(e.mode.as_str());
                    csv_real.push_str(if csv_real.is_empty() { &r } else { r.split_once('\n').map_or("", |x| x.1) });
                }
            }
            write(&out.join("report_test_mocap.csv"), &csv_mocap)?;
            if !csv_real.is_empty() {
                write(&out.join("report_test_real.csv"), &csv_real)?;
            }
            let rows: Vec<_> = ladder.iter().map(|e| (e.mode.as_str(), &e.test_mocap)).collect();
            let table = report_text(&rows);
            write(&out.join("table.txt"), &table)?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            print!("{table}");
        }
        Command::ExportPly {
            sequence,
            frame,
            checkpoint,
            world,
            out,
        } => {
            let seq = load_sequence(&sequence)?;
            let cloud = seq
                .clouds
                .get(frame)
                .ok_or_else(|| Error::Config(format!("frame {frame} of a {}-frame sequence", seq.len())))?;
            let labels: Vec<u16> = match checkpoint {
                Some(p) => {
                    let model = load_checkpoint(&p)?.model;
                    let spc = model
                        .spc
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("mode {} has no registration", model.mode)))?;
                    let xs = seq.x[..=frame].iter().map(canonical_x).collect::<Result<Vec<_>>>()?;
                    let clouds: Vec<&[[f32; 3]]> = seq.clouds[..=frame].iter().map(|c| c.points.as_slice()).collect();
                    let regs = spc.sequence(&xs, &clouds)?;
                    regs[frame].argmax().into_iter().map(|l| l as u16).collect()
                }
                None => cloud
                    .labels
                    .clone()
                    .ok_or_else(|| Error::Config("sequence has no labels; pass --checkpoint".into()))?,
            };
            let points: Vec<[f32; 3]> = if world {
                xrmbt::features::world_points(cloud, &seq.sensor[frame])
                    .iter()
                    .map(|p| [p.x as f32, p.y as f32, p.z as f32])
                    .collect()
            } else {
                cloud.points.clone()
            };
            export_ply(&points, &labels, &out)?;
        }
        Command::ExportPose {
            common,
            sequence,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&common)?;
            let (skel, _) = load_skeleton(&common)?;
            let seq = load_sequence(&sequence)?;
            let model = match checkpoint {
                Some(p) => checked_model(&p, &skel)?,
                None => Model::init(Mode::SynthesisOnly, skel.num_joints(), seq.num_points(), &mut sequence_rng(0, 0)),
            };
            let synth = if seq.synth.is_some() {
                Synthesizer::Stored
            } else {
                Synthesizer::Oracle(cfg.oracle)
            };
            let y = synth.synthesize(&skel, SynthInput::of(&seq), &mut sequence_rng(cfg.train.eval_seed, 0))?;
            let pred = model.predict(&skel, &seq, &y)?;
            write(&out, &pose_csv(&skel, &pred.poses, seq.scale as f64)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                e if e.is_numerical() => 3,
                _ => 1,
            })
        }
    }
}
