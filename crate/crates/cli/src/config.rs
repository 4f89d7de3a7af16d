//! The TOML experiment file.
//!
//! ```toml
//! out_dir = "runs/demo"
//! user_field = "user"
//!
//! [data]
//! path = "synthetic.csv"
//! label = "label"
//! timestamp = "ts"
//! features = ["user", "d1", "d2"]
//!
//! [data.split]
//! train = 0.8
//! valid = 0.1
//! test = 0.1
//!
//! [train]
//! variant = "cascade"
//! max_epochs = 5
//! ```
//!
//! Relative paths are resolved against the directory holding the file.
//! Every `[train]` key is optional and falls back to the library default.

use std::path::{Path, PathBuf};

use rat_core::data::SchemaSpec;
use rat_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Where commands put their outputs unless `--out` says otherwise.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Column holding the user id, needed for long-tail segments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_field: Option<String>,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(flatten)]
    pub schema: SchemaSpec,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from(".")
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve(mut self, base: &Path) -> Self {
        if self.data.path.is_relative() {
            self.data.path = base.join(&self.data.path);
        }
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
        self
    }
}
