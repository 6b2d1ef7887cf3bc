use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use klora_core::{FixedReading, ScaleMode, ScheduleParams, SoloPolicy};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "klora",
    version,
    about = "Top-K selection schedules for fusing a content LoRA with a style LoRA"
)]
pub struct Cli {
    /// Print machine-readable JSON reports instead of plain text.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum Command {
    /// Print per-layer scores, gamma, K and magnitude histograms.
    Analyze(AnalyzeArgs),
    /// Build the Top-K schedule and write a fusion manifest.
    Schedule(ScheduleArgs),
    /// Write one merged checkpoint per step from a manifest.
    Merge(MergeArgs),
    /// Render a manifest's grid as SVG or PPM.
    Heatmap(HeatmapArgs),
    /// Build a baseline or sweep schedule.
    Ablate(AblateArgs),
}

fn finite_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not a finite number"))
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleArg {
    Linear,
    Modular,
    None,
}

impl From<ScaleArg> for ScaleMode {
    fn from(v: ScaleArg) -> Self {
        match v {
            ScaleArg::Linear => ScaleMode::Linear,
            ScaleArg::Modular => ScaleMode::Modular,
            ScaleArg::None => ScaleMode::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoloArg {
    SoloPass,
    Drop,
}

/// Inputs and scheduling parameters shared by most subcommands.
#[derive(Debug, Args, Serialize)]
pub struct ParamArgs {
    /// Number of denoising steps in the grid.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Slope of the linear step scale.
    #[arg(long, default_value_t = 1.5, value_parser = finite_f64, allow_hyphen_values = true)]
    pub alpha: f64,
    /// Offset of the linear step scale.
    #[arg(long, default_value_t = 0.5, value_parser = finite_f64, allow_hyphen_values = true)]
    pub beta: f64,
    /// Slope of the modular step scale.
    #[arg(long, default_value_t = 1.5, value_parser = finite_f64, allow_hyphen_values = true)]
    pub alpha_prime: f64,
    /// Offset of the modular step scale.
    #[arg(long, default_value_t = 1.3, value_parser = finite_f64, allow_hyphen_values = true)]
    pub beta_prime: f64,
    #[arg(long, value_enum, default_value_t = ScaleArg::Linear)]
    pub scale_mode: ScaleArg,
    /// Fixed K instead of rank_content * rank_style.
    #[arg(long = "k", value_parser = positive_usize)]
    pub k_override: Option<usize>,
    /// Handling of layers present in only one adapter.
    #[arg(long, value_enum, default_value_t = SoloArg::SoloPass)]
    pub solo_policy: SoloArg,
    /// Ignore `.alpha` tensors when reconstructing deltas.
    #[arg(long)]
    pub no_lora_alpha: bool,
}

impl ParamArgs {
    pub fn to_params(&self) -> ScheduleParams {
        ScheduleParams {
            total_steps: self.steps,
            alpha: self.alpha,
            beta: self.beta,
            scale_mode: self.scale_mode.into(),
            alpha_prime: self.alpha_prime,
            beta_prime: self.beta_prime,
            k_override: self.k_override,
            apply_lora_alpha: !self.no_lora_alpha,
            solo_policy: match self.solo_policy {
                SoloArg::SoloPass => SoloPolicy::SoloPass,
                SoloArg::Drop => SoloPolicy::Drop,
            },
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: ParamArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    Svg,
    Ppm,
}

impl From<ImageFormat> for klora_core::HeatmapFormat {
    fn from(v: ImageFormat) -> Self {
        match v {
            ImageFormat::Svg => klora_core::HeatmapFormat::Svg,
            ImageFormat::Ppm => klora_core::HeatmapFormat::Ppm,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct HeatmapOpts {
    /// Also render the grid to this file.
    #[arg(long)]
    #[serde(skip)]
    pub heatmap: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ImageFormat::Svg)]
    pub heatmap_format: ImageFormat,
    /// Pixel size of one grid cell.
    #[arg(long, default_value_t = 4, value_parser = positive_usize)]
    pub cell_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    /// Manifest output path.
    #[arg(short, long)]
    #[serde(skip)]
    pub output: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: ParamArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub heatmap: HeatmapOpts,
}

#[derive(Debug, Args, Serialize)]
pub struct MergeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    /// Directory receiving `step_NNN.safetensors` files.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Only write steps where the selection differs from the previous step.
    #[arg(long)]
    pub boundaries_only: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = ImageFormat::Svg)]
    pub format: ImageFormat,
    #[arg(long, default_value_t = 4, value_parser = positive_usize)]
    pub cell_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Same choice for every layer, decided by the step scale alone.
    Fixed,
    /// Independent random choice per cell.
    Random,
    /// Random subset of content layers active per step.
    Subset,
    /// Top-K comparison without step scale or gamma.
    NoScale,
    /// One Top-K schedule per value of --k-values.
    KSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedReadingArg {
    /// Content while the scale is at most 1.
    EarlyContent,
    /// Content while the scale exceeds 1.
    ContentAboveOne,
}

impl From<FixedReadingArg> for FixedReading {
    fn from(v: FixedReadingArg) -> Self {
        match v {
            FixedReadingArg::EarlyContent => FixedReading::EarlyContent,
            FixedReadingArg::ContentAboveOne => FixedReading::ContentAboveOne,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub mode: AblationMode,
    #[arg(long)]
    pub content: PathBuf,
    /// Required by every mode except `subset`.
    #[arg(long)]
    pub style: Option<PathBuf>,
    /// Manifest path, or a directory for `k-sweep`.
    #[arg(short, long)]
    #[serde(skip)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability of a Content cell in `random` mode.
    #[arg(long, default_value_t = 1.0 / 3.0, value_parser = finite_f64)]
    pub p_content: f64,
    /// Share of layers active per step in `subset` mode.
    #[arg(long, default_value_t = 0.5, value_parser = finite_f64)]
    pub fraction: f64,
    /// Comma-separated K values for `k-sweep`.
    #[arg(long, value_delimiter = ',', value_parser = positive_usize, default_value = "8,32,128")]
    pub k_values: Vec<usize>,
    #[arg(long, value_enum, default_value_t = FixedReadingArg::EarlyContent)]
    pub fixed_reading: FixedReadingArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: ParamArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub heatmap: HeatmapOpts,
}
