//! Effective configuration of each command. A config file supplies the
//! base values, flags override them, and the merged result is written next
//! to the command's outputs so the run can be repeated with `--config`.

use std::path::{Path, PathBuf};

use lesionloc::dataset::{Cooccurrence, SyntheticConfig};
use lesionloc::mining::PoolConfig;
use lesionloc::model::BackboneConfig;
use lesionloc::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackbonePreset {
    /// Small network for 64×64 inputs; 16×16×64 features.
    #[default]
    Desk,
    /// Five stride-2 blocks; 224×224 inputs give 7×7 features.
    Reference224,
}

impl BackbonePreset {
    pub fn config(self, image_size: usize) -> BackboneConfig {
        match self {
            BackbonePreset::Desk => BackboneConfig::desk_sized(image_size),
            BackbonePreset::Reference224 => {
                let mut c = BackboneConfig::reference_224(64);
                c.input_size = image_size;
                c
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    Train,
    Val,
    #[default]
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub n_samples: usize,
    pub classes: usize,
    pub image_size: usize,
    pub seed: u64,
    pub noise_level: f64,
    /// Per-class label probability.
    pub label_prob: f64,
    /// Share of images forced to carry no label.
    pub no_finding_frac: f64,
    /// When set, every image carries exactly these labels.
    pub fixed_labels: Option<Vec<usize>>,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            n_samples: 2500,
            classes: 5,
            image_size: 64,
            seed: 0,
            noise_level: 0.15,
            label_prob: 0.25,
            no_finding_frac: 0.15,
            fixed_labels: None,
            train_frac: 0.7,
            val_frac: 0.15,
        }
    }
}

impl GenDataConfig {
    pub fn synthetic(&self) -> SyntheticConfig {
        let mut s = SyntheticConfig::new(self.n_samples, self.classes, self.image_size);
        s.noise_level = self.noise_level;
        s.cooccurrence = match &self.fixed_labels {
            Some(l) => Cooccurrence::Fixed(l.clone()),
            None => Cooccurrence::Independent {
                prob: self.label_prob,
                no_finding_frac: self.no_finding_frac,
            },
        };
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    pub backbone: BackbonePreset,
    pub image_size: usize,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            data: PathBuf::new(),
            backbone: BackbonePreset::Desk,
            image_size: 64,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub name: String,
    pub mean: Option<f64>,
    #[serde(default)]
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalClsConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub split: SplitName,
    pub references: Vec<ReferenceSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalLocConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub split: SplitName,
    pub iou_thresholds: Vec<f64>,
    pub folds: usize,
    /// IoU threshold whose accuracy the CAM threshold search maximizes.
    pub objective_t: f64,
    pub references: Vec<(f64, ReferenceSpec)>,
}

impl Default for EvalLocConfig {
    fn default() -> Self {
        EvalLocConfig {
            data: PathBuf::new(),
            checkpoint: PathBuf::new(),
            split: SplitName::Test,
            iou_thresholds: lesionloc::eval::LOC_IOU_THRESHOLDS.to_vec(),
            folds: 10,
            objective_t: 0.3,
            references: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub split: SplitName,
    /// `thresholds.json` written by `eval-loc`; overrides `cam_threshold`
    /// for the classes it covers.
    pub thresholds: Option<PathBuf>,
    pub cam_threshold: f64,
    pub limit: Option<usize>,
    /// Integer upscaling of rendered overlays.
    pub scale: u32,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            data: PathBuf::new(),
            checkpoint: PathBuf::new(),
            split: SplitName::Test,
            thresholds: None,
            cam_threshold: lesionloc::eval::DEFAULT_CAM_THRESHOLD,
            limit: Some(16),
            scale: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineInspectConfig {
    pub data: PathBuf,
    pub image_size: usize,
    pub split: SplitName,
    /// Sample id of the anchor; the first labelled sample when absent.
    pub anchor: Option<String>,
    pub seed: u64,
    pub epoch: usize,
    pub triplets: usize,
    pub ramp_epochs: usize,
    pub curriculum_floor: f64,
    pub pool: PoolConfig,
}

impl Default for MineInspectConfig {
    fn default() -> Self {
        MineInspectConfig {
            data: PathBuf::new(),
            image_size: 64,
            split: SplitName::Train,
            anchor: None,
            seed: 0,
            epoch: 0,
            triplets: 10,
            ramp_epochs: 10,
            curriculum_floor: 0.1,
            pool: PoolConfig::default(),
        }
    }
}

/// Everything a command needs to be repeated, tagged by command name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    GenData(GenDataConfig),
    Train(TrainRunConfig),
    EvalCls(EvalClsConfig),
    EvalLoc(EvalLocConfig),
    Localize(LocalizeConfig),
    MineInspect(MineInspectConfig),
}

impl RunConfig {
    pub fn command(&self) -> &'static str {
        match self {
            RunConfig::GenData(_) => "gen-data",
            RunConfig::Train(_) => "train",
            RunConfig::EvalCls(_) => "eval-cls",
            RunConfig::EvalLoc(_) => "eval-loc",
            RunConfig::Localize(_) => "localize",
            RunConfig::MineInspect(_) => "mine-inspect",
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Reads a config file for `command`. Accepts either a tagged run config
/// (as echoed by a previous run) or the bare parameter object.
pub fn load_config_file<T>(path: &Path, command: &str, unwrap: fn(RunConfig) -> Option<T>) -> Result<T, CliError>
where
    T: serde::de::DeserializeOwned,
{
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: invalid JSON: {e}", path.display())))?;
    if value.get("command").is_some() {
        let run: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let found = run.command();
        return unwrap(run).ok_or_else(|| {
            CliError::Usage(format!("{} holds a {found} config, not {command}", path.display()))
        });
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips() {
        let c = RunConfig::Train(TrainRunConfig {
            data: "d".into(),
            ..TrainRunConfig::default()
        });
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(c.to_json().contains("\"command\": \"train\""));
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"max_epochs": 3}}"#).unwrap();
        let c = load_config_file(&p, "train", |r| match r {
            RunConfig::Train(t) => Some(t),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.train.max_epochs, 3);
        assert_eq!(c.train.margin, 0.5);
        assert_eq!(c.image_size, 64);
    }

    #[test]
    fn wrong_command_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, RunConfig::GenData(GenDataConfig::default()).to_json()).unwrap();
        let r = load_config_file(&p, "train", |r| match r {
            RunConfig::Train(t) => Some(t),
            _ => None,
        });
        assert!(matches!(r, Err(CliError::Usage(m)) if m.contains("gen-data")));
    }
}
