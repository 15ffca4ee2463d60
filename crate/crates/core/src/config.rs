//! Run configuration: a TOML file layered over a preset, then environment
//! and command-line overrides.
//!
//! ```toml
//! preset = "desk"
//! seed = 7
//!
//! [data]
//! train_mocap = 50
//!
//! [train]
//! iterations = 500
//! weights = { w_spc = 0.01 }
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::dataset::DataConfig;
use crate::error::{Error, Result};
use crate::synthesis::OracleConfig;
use crate::trainer::TrainConfig;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "XRMBT_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    /// Seeds data generation and, unless `train.seed` is set, training.
    pub seed: u64,
    pub data: DataConfig,
    pub oracle: OracleConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_toml_str("").expect("empty config is valid")
    }
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn layered<T: Serialize + DeserializeOwned>(base: &T, over: Option<&Value>, what: &str) -> Result<T> {
    let mut table = Table::try_from(base).map_err(|e| Error::Config(format!("[{what}]: {e}")))?;
    match over {
        None => {}
        Some(Value::Table(t)) => merge(&mut table, t),
        Some(_) => return Err(Error::Config(format!("[{what}] must be a table"))),
    }
    Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("[{what}]: {e}")))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let root: Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for k in root.keys() {
            if !["preset", "seed", "data", "oracle", "train"].contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        let preset = match root.get("preset") {
            None => "desk".to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::Config("preset must be a string".into())),
        };
        let seed = match root.get("seed") {
            None => 0,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => return Err(Error::Config("seed must be a non-negative integer".into())),
        };
        let base = TrainConfig {
            seed,
            ..TrainConfig::preset(&preset)?
        };
        let cfg = Self {
            preset,
            seed,
            data: layered(&DataConfig::default(), root.get("data"), "data")?,
            oracle: layered(&OracleConfig::default(), root.get("oracle"), "oracle")?,
            train: layered(&base, root.get("train"), "train")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Replaces both seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Applies [`SEED_ENV`] if set, given its value.
    pub fn with_env_seed(self, value: Option<&str>) -> Result<Self> {
        match value {
            None => Ok(self),
            Some(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not a seed")))?;
                Ok(self.with_seed(seed))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.oracle.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        let mut t = Table::new();
        t.insert("preset".into(), Value::String(self.preset.clone()));
        t.insert("seed".into(), Value::Integer(self.seed as i64));
        let mut put = |k: &str, v: Result<Table, toml::ser::Error>| {
            t.insert(k.into(), Value::Table(v.expect("configs serialize")));
        };
        put("data", Table::try_from(&self.data));
        put("oracle", Table::try_from(self.oracle));
        put("train", Table::try_from(self.train));
        toml::to_string(&t).expect("tables serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Mode;

    #[test]
    fn layers_over_the_preset() {
        let c = RunConfig::from_toml_str(
            "seed = 5\n[train]\niterations = 10\nmode = \"mpe\"\nweights = { w_spc = 0.5 }\n[data]\npoints = 32\n",
        )
        .unwrap();
        assert_eq!(c.train.iterations, 10);
        assert_eq!(c.train.mode, Mode::Mpe);
        assert_eq!(c.train.weights.w_spc, 0.5);
        assert_eq!(c.train.weights.w_rot, 1.0);
        assert_eq!(c.train.batch_mocap, 32);
        assert_eq!((c.seed, c.train.seed), (5, 5));
        assert_eq!(c.data.points, 32);
        let full = RunConfig::from_toml_str("preset = \"full\"").unwrap();
        assert_eq!(full.train.batch_mocap, 128);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "nonsense = 1",
            "[train]\nlr = -1.0",
            "[train]\nmode = \"agrol\"",
            "[data]\nframes = 2",
            "preset = \"huge\"",
            "seed = -3",
            "[train]\nunknown = 1",
            "this is not toml",
        ] {
            assert!(matches!(RunConfig::from_toml_str(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn env_seed_and_round_trip() {
        let c = RunConfig::default().with_env_seed(Some("42")).unwrap();
        assert_eq!((c.seed, c.train.seed), (42, 42));
        assert!(RunConfig::default().with_env_seed(Some("x")).is_err());
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }
}
