//! Command-line front end for the lesion localization pipeline.
//!
//! Every command writes into an exclusively locked output directory and
//! echoes the fully resolved configuration as `run_config.json`, so a run can
//! be repeated with `--config <out>/run_config.json`.

pub mod commands;
pub mod config;
pub mod layout;
pub mod overlay;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use config::*;
use layout::{default_out, OutDir};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lesionloc::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("output directory {0} is locked by another run (remove its .lock file if that run is gone)")]
    Locked(PathBuf),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// 1 for bad input or environment, 2 for failures inside the computation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(lesionloc::Error::NonFinite { .. }) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lesionloc", version, about = "Multi-label lesion classification and weakly supervised localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; flags given on the command line override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $LESIONLOC_OUT_ROOT/<command>, or runs/<command>].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with its manifest and patient split.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints and logs.
    Train(TrainArgs),
    /// Per-class and mean ROC AUC of a checkpoint.
    EvalCls(EvalClsArgs),
    /// Localization accuracy with cross-validated CAM thresholds.
    EvalLoc(EvalLocArgs),
    /// Render heatmap overlays and predicted boxes.
    Localize(LocalizeArgs),
    /// Show the candidate pool and sampled triplets for one anchor.
    MineInspect(MineInspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, visible_alias = "n")]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_level: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory as written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backbone: Option<BackbonePreset>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay_epoch: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Auxiliary losses to enable: a comma list of `dl` and `rv`, or `none`.
    #[arg(long)]
    pub toggles: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalClsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitName>,
}

#[derive(Debug, Args)]
pub struct EvalLocArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitName>,
    /// IoU thresholds, comma separated.
    #[arg(long = "T", value_delimiter = ',')]
    pub iou_thresholds: Option<Vec<f64>>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// IoU threshold whose accuracy the CAM threshold search maximizes.
    #[arg(long)]
    pub objective_t: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitName>,
    /// thresholds.json from eval-loc; overrides --cam-threshold per class.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long)]
    pub cam_threshold: Option<f64>,
    /// Number of images to render; 0 renders the whole split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub scale: Option<u32>,
}

#[derive(Debug, Args)]
pub struct MineInspectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, value_enum)]
    pub split: Option<SplitName>,
    #[arg(long)]
    pub anchor: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epoch: Option<usize>,
    #[arg(long)]
    pub triplets: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Parses `dl,rv`, `dl`, `rv` or `none` into `(use_dl, use_rv)`.
pub fn parse_toggles(s: &str) -> Result<(bool, bool), CliError> {
    let (mut dl, mut rv) = (false, false);
    for t in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match t {
            "dl" => dl = true,
            "rv" => rv = true,
            "none" => {}
            other => return Err(CliError::Usage(format!("unknown toggle {other:?}; expected dl, rv or none"))),
        }
    }
    Ok((dl, rv))
}

fn base<T: Default + serde::de::DeserializeOwned>(
    common: &Common,
    command: &str,
    unwrap: fn(RunConfig) -> Option<T>,
) -> Result<T, CliError> {
    match &common.config {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Usage(format!("config file {} does not exist", p.display())));
            }
            load_config_file(p, command, unwrap)
        }
        None => Ok(T::default()),
    }
}

/// Resolves the flags and config file of a subcommand into its run config.
pub fn resolve(command: &Command) -> Result<(RunConfig, &Common), CliError> {
    Ok(match command {
        Command::GenData(a) => {
            let mut c: GenDataConfig = base(&a.common, "gen-data", |r| match r {
                RunConfig::GenData(c) => Some(c),
                _ => None,
            })?;
            set(&mut c.n_samples, a.n_samples);
            set(&mut c.classes, a.classes);
            set(&mut c.image_size, a.image_size);
            set(&mut c.seed, a.seed);
            set(&mut c.noise_level, a.noise_level);
            (RunConfig::GenData(c), &a.common)
        }
        Command::Train(a) => {
            let mut c: TrainRunConfig = base(&a.common, "train", |r| match r {
                RunConfig::Train(c) => Some(c),
                _ => None,
            })?;
            set(&mut c.data, a.data.clone());
            set(&mut c.backbone, a.backbone);
            set(&mut c.image_size, a.image_size);
            set(&mut c.train.max_epochs, a.epochs);
            set(&mut c.train.batch_size, a.batch_size);
            set(&mut c.train.lr_initial, a.lr);
            set(&mut c.train.lr_decay_epoch, a.lr_decay_epoch);
            set(&mut c.train.margin, a.margin);
            set(&mut c.train.seed, a.seed);
            if let Some(t) = &a.toggles {
                (c.train.use_dl, c.train.use_rv) = parse_toggles(t)?;
            }
            c.train.validate()?;
            (RunConfig::Train(c), &a.common)
        }
        Command::EvalCls(a) => {
            let mut c: EvalClsConfig = base(&a.common, "eval-cls", |r| match r {
                RunConfig::EvalCls(c) => Some(c),
                _ => None,
            })?;
            set(&mut c.data, a.data.clone());
            set(&mut c.checkpoint, a.checkpoint.clone());
            set(&mut c.split, a.split);
            (RunConfig::EvalCls(c), &a.common)
        }
        Command::EvalLoc(a) => {
            let mut c: EvalLocConfig = base(&a.common, "eval-loc", |r| match r {
                RunConfig::EvalLoc(c) => Some(c),
                _ => None,
            })?;
            set(&mut c.data, a.data.clone());
            set(&mut c.checkpoint, a.checkpoint.clone());
            set(&mut c.split, a.split);
            set(&mut c.iou_thresholds, a.iou_thresholds.clone());
            set(&mut c.folds, a.folds);
            set(&mut c.objective_t, a.objective_t);
            (RunConfig::EvalLoc(c), &a.common)
        }
        Command::Localize(a) => {
            let mut c: LocalizeConfig = base(&a.common, "localize", |r| match r {
                RunConfig::Localize(c) => Some(c),
                _ => None,
            })?;
            set(&mut c.data, a.data.clone());
            set(&mut c.checkpoint, a.checkpoint.clone());
            set(&mut c.split, a.split);
            if a.thresholds.is_some() {
                c.thresholds = a.thresholds.clone();
            }
            set(&mut c.cam_threshold, a.cam_threshold);
            if let Some(n) = a.limit {
                c.limit = (n > 0).then_some(n);
            }
            set(&mut c.scale, a.scale);
            (RunConfig::Localize(c), &a.common)
        }
        Command::MineInspect(a) => {
            let mut c: MineInspectConfig = base(&a.common, "mine-inspect", |r| match r {
                RunConfig::MineInspect(c) => Some(c),
                _ => None,
            })?;
            set(&mut c.data, a.data.clone());
            set(&mut c.image_size, a.image_size);
            set(&mut c.split, a.split);
            if a.anchor.is_some() {
                c.anchor = a.anchor.clone();
            }
            set(&mut c.seed, a.seed);
            set(&mut c.epoch, a.epoch);
            set(&mut c.triplets, a.triplets);
            (RunConfig::MineInspect(c), &a.common)
        }
    })
}

fn execute(cli: &Cli) -> Result<String, CliError> {
    let (run, common) = resolve(&cli.command)?;
    let root = common.out.clone().unwrap_or_else(|| default_out(run.command()));
    let out = OutDir::acquire(&root)?;
    match &run {
        RunConfig::GenData(c) => commands::gen_data(c, &out),
        RunConfig::Train(c) => commands::train(c, &out),
        RunConfig::EvalCls(c) => commands::eval_cls(c, &out),
        RunConfig::EvalLoc(c) => commands::eval_loc(c, &out),
        RunConfig::Localize(c) => commands::localize(c, &out),
        RunConfig::MineInspect(c) => commands::mine_inspect(c, &out),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
