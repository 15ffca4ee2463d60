//! On-disk formats. Binary files share one container: a `key=value` text
//! manifest with a schema version and CRC32, then little-endian f32 blocks.

pub mod checkpoint;
pub mod container;
pub mod csv;
pub mod ply;
pub mod sequence;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use container::Container;
pub use csv::{log_csv, pose_csv};
pub use ply::{export_ply, parse_ply, ply_string};
pub use sequence::{load_sequence, save_sequence};

use std::fs;
use std::path::Path;

use crate::dataset::{Datasets, Split};
use crate::error::{Error, Result};

/// Writes each split to `dir/<split>/<index>.seq`.
pub fn save_datasets(data: &Datasets, dir: &Path) -> Result<()> {
    for split in Split::ALL {
        let d = dir.join(split.as_str());
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (i, s) in data.split(split).iter().enumerate() {
            save_sequence(s, &d.join(format!("{i:05}.seq")))?;
        }
    }
    Ok(())
}

/// Reads a directory written by [`save_datasets`]; missing splits are empty.
pub fn load_datasets(dir: &Path) -> Result<Datasets> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let mut out = Datasets::default();
    for split in Split::ALL {
        let d = dir.join(split.as_str());
        if !d.is_dir() {
            continue;
        }
        let mut files: Vec<_> = fs::read_dir(&d)
            .map_err(|e| Error::io(&d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "seq"))
            .collect();
        files.sort();
        *out.split_mut(split) = files.iter().map(|p| load_sequence(p)).collect::<Result<_>>()?;
    }
    Ok(out)
}
