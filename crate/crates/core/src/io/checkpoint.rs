//! Model checkpoints: mode, sizes, skeleton fingerprint and every parameter
//! tensor as its own block.

use std::path::Path;

use super::container::{bytes_f32, f32_bytes, Container};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{Mode, Model};

pub const CHECKPOINT_FORMAT: &str = "xrmbt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model plus the facts needed to check it fits a skeleton.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub skeleton: u32,
    /// Optimizer steps taken.
    pub steps: usize,
}

fn store_blocks(c: &mut Container, store: &ParamStore) {
    for (name, t) in store.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        c.set(&format!("shape.{name}"), shape.join(","));
        c.block(name, f32_bytes(t.data().iter().copied()));
    }
}

pub fn checkpoint_to_container(ck: &Checkpoint) -> Container {
    let m = &ck.model;
    let mut c = Container::new(CHECKPOINT_FORMAT, CHECKPOINT_VERSION);
    c.set("mode", m.mode);
    c.set("joints", m.joints);
    c.set("points", m.points);
    c.set("skeleton", format!("{:08x}", ck.skeleton));
    c.set("steps", ck.steps);
    for net in [m.spc.as_ref().map(|n| &n.params), m.mpe.as_ref().map(|n| &n.params)]
        .into_iter()
        .flatten()
    {
        store_blocks(&mut c, net);
    }
    c
}

pub fn checkpoint_from_container(mut c: Container, path: &Path) -> Result<Checkpoint> {
    let mode: Mode = c.field("mode", path)?;
    let joints: usize = c.field("joints", path)?;
    let points: usize = c.field("points", path)?;
    let steps: usize = c.field("steps", path)?;
    let skel: String = c.field("skeleton", path)?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let skeleton = u32::from_str_radix(&skel, 16).map_err(|_| bad(format!("bad skeleton `{skel}`")))?;
    let mut spc = ParamStore::new();
    let mut mpe = ParamStore::new();
    for (name, bytes) in std::mem::take(&mut c.blocks) {
        let shape: Vec<usize> = c
            .get(&format!("shape.{name}"))
            .ok_or_else(|| bad(format!("no shape for `{name}`")))?
            .split(',')
            .map(|s| s.parse().map_err(|_| bad(format!("bad shape for `{name}`"))))
            .collect::<Result<_>>()?;
        let n = shape.iter().product();
        let t = Tensor::new(shape, bytes_f32(&bytes, n, path, &name)?)?;
        let store = if name.starts_with("spc.") {
            &mut spc
        } else if name.starts_with("mpe.") {
            &mut mpe
        } else {
            return Err(bad(format!("unknown parameter `{name}`")));
        };
        store.add(name, t);
    }
    let pick = |s: ParamStore| (!s.is_empty()).then_some(s);
    let model = Model::from_params(mode, joints, points, pick(spc), pick(mpe))?;
    Ok(Checkpoint {
        model,
        skeleton,
        steps,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint_to_container(ck).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::load(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
    checkpoint_from_container(c, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for mode in Mode::ALL {
            let ck = Checkpoint {
                model: Model::init(mode, 4, 8, &mut rng),
                skeleton: 0xdead_beef,
                steps: 12,
            };
            let path = dir.path().join(format!("{mode}.ckpt"));
            save_checkpoint(&ck, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back.model.mode, mode);
            assert_eq!(back.model.checksum(), ck.model.checksum());
            assert_eq!((back.skeleton, back.steps), (0xdead_beef, 12));
            let bytes = checkpoint_to_container(&back).to_bytes();
            assert_eq!(bytes, std::fs::read(&path).unwrap());
        }
    }
}
