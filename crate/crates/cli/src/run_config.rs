//! Run configuration: an optional JSON file with flag overrides on top.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use clap::builder::{PossibleValuesParser, TypedValueParser};
use hanme_core::encoders::EncoderKind;
use hanme_core::trainer::{PacingKind, TrainConfig};
use hanme_core::{Error, Result};
use serde::Deserialize;

/// Contents of a `--config` file. Every key is optional; training keys are
/// those of [`TrainConfig`].
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Format {
                file: path.display().to_string(),
                msg: e.to_string(),
            }
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            file: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset directory; pass --data".into()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory; pass --out".into()))
    }
}

fn encoder_parser() -> impl TypedValueParser<Value = EncoderKind> {
    PossibleValuesParser::new(["multihop", "direct", "terminal-only"])
        .map(|s| EncoderKind::parse(&s).expect("listed value"))
}

fn pacing_parser() -> impl TypedValueParser<Value = PacingKind> {
    PossibleValuesParser::new(["off", "linear", "root", "geometric"])
        .map(|s| PacingKind::parse(&s).expect("listed value"))
}

/// Flags shared by `train` and `extract`. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// JSON run configuration; flags take precedence over its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Metapath as dash-separated node types, e.g. movie-actor-movie.
    /// Repeat for several; defaults to one round trip per linked type.
    #[arg(long = "metapath", value_name = "TYPES")]
    pub metapaths: Vec<String>,
    #[arg(long, value_parser = encoder_parser())]
    pub encoder: Option<EncoderKind>,
    /// Teleport rate of the multi-hop encoder, in (0, 1).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Loss-aware training schedule pacing function.
    #[arg(long, value_parser = pacing_parser())]
    pub lts: Option<PacingKind>,
    /// Fraction of training nodes used in the first epoch.
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// Epoch offset at which every training node is in use.
    #[arg(long = "pace-T", value_name = "T")]
    pub pace_t: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Projected width per head.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "weight-decay")]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Epochs without a validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long = "max-epochs")]
    pub max_epochs: Option<usize>,
    /// Single-threaded, bit-reproducible kernels.
    #[arg(long)]
    pub strict: bool,
}

impl RunFlags {
    /// Load the config file, if any, and apply every flag given.
    pub fn resolve(&self, out: Option<&Path>) -> Result<RunConfig> {
        let mut rc = RunConfig::load(self.config.as_deref())?;
        if let Some(d) = &self.data {
            rc.data = Some(d.clone());
        }
        if let Some(o) = out {
            rc.out = Some(o.to_path_buf());
        }
        let t = &mut rc.train;
        if !self.metapaths.is_empty() {
            t.model.metapaths = self
                .metapaths
                .iter()
                .map(|m| m.split('-').map(str::to_string).collect())
                .collect();
        }
        if let Some(v) = self.encoder {
            t.model.encoder = v;
        }
        if let Some(v) = self.gamma {
            t.model.gamma = v;
        }
        if let Some(v) = self.lts {
            t.pacing.kind = v;
        }
        if let Some(v) = self.lambda0 {
            t.pacing.lambda0 = v;
        }
        if let Some(v) = self.pace_t {
            t.pacing.pace_t = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.heads {
            t.model.heads = v;
        }
        if let Some(v) = self.hidden {
            t.model.hidden = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.dropout {
            t.model.dropout = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.max_epochs {
            t.max_epochs = v;
        }
        t.strict |= self.strict;
        t.validate()?;
        Ok(rc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            r#"{"data": "d", "encoder": "direct", "heads": 2, "pacing": {"kind": "root", "T": 7}}"#,
        )
        .unwrap();
        let flags = RunFlags {
            config: Some(path),
            heads: Some(3),
            metapaths: vec!["movie-actor-movie".into()],
            ..RunFlags::default()
        };
        let rc = flags.resolve(Some(Path::new("o"))).unwrap();
        assert_eq!(rc.data.as_deref(), Some(Path::new("d")));
        assert_eq!(rc.out.as_deref(), Some(Path::new("o")));
        assert_eq!(rc.train.model.encoder, EncoderKind::Direct);
        assert_eq!(rc.train.model.heads, 3);
        assert_eq!(rc.train.pacing.kind, PacingKind::Root);
        assert_eq!(rc.train.pacing.pace_t, 7);
        assert_eq!(rc.train.model.metapaths, vec![vec!["movie", "actor", "movie"]]);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let flags = RunFlags {
            gamma: Some(1.5),
            ..RunFlags::default()
        };
        assert!(flags.resolve(None).unwrap_err().is_validation());
    }
}
