mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use c3d::{KernelConfig, NormalGradMode, S0Law, ScaleMode};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "c3d", version, about = "Continuous 3D loss between depth maps and LIDAR clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a scene to ground-truth depth, HSV image and simulated LIDAR.
    Synth(SynthArgs),
    /// Evaluate the loss of a depth map against a LIDAR cloud.
    EvalLoss(EvalArgs),
    /// Compare analytic depth gradients with finite differences.
    GradCheck(GradCheckArgs),
    /// Refine a depth map by descent on the loss.
    Refine(RefineArgs),
    /// Depth metrics of a prediction against ground truth.
    Metrics(MetricsArgs),
    /// Evaluate the unpruned double sum by naive accumulation.
    BruteForce(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    PlaneAndBoxes,
    ReflectiveHole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GradMode {
    Detached,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    Depth,
    Fixed,
}

fn parse_s0(text: &str) -> std::result::Result<S0Law, String> {
    match text.split_once(':') {
        None if text == "sampled" => Ok(S0Law::DEFAULT_SAMPLED),
        Some(("fixed", v)) => v
            .parse()
            .map(|s0| S0Law::Fixed { s0 })
            .map_err(|e| format!("bad fixed s0 {v:?}: {e}")),
        _ => Err(format!("expected fixed:<value> or sampled, got {text:?}")),
    }
}

/// Kernel flags; anything omitted keeps the library default.
#[derive(Args, Debug, Clone)]
pub struct KernelArgs {
    /// Amplitude of the geometric kernel.
    #[arg(long)]
    kernel_sigma: Option<f64>,
    /// Base length scale law: fixed:<value> or sampled.
    #[arg(long, value_parser = parse_s0)]
    s0: Option<S0Law>,
    /// HSV kernel length scale.
    #[arg(long)]
    sv: Option<f64>,
    /// HSV kernel amplitude.
    #[arg(long)]
    sigma_v: Option<f64>,
    /// Normal kernel regularizer.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Chebyshev pixel radius for pair pruning.
    #[arg(long)]
    prune_radius: Option<usize>,
    #[arg(long)]
    no_normal_kernel: bool,
    #[arg(long)]
    no_hsv_kernel: bool,
    /// Whether depth gradients flow through the predicted normals.
    #[arg(long, value_enum, visible_alias = "mode")]
    normal_grad: Option<GradMode>,
    /// Half-width of the grid normal window.
    #[arg(long)]
    normal_window: Option<usize>,
    /// Length scale grows with depth, or stays at s0.
    #[arg(long, value_enum)]
    scale_mode: Option<Scale>,
    /// LIDAR points deeper than this are cropped.
    #[arg(long, default_value_t = 80.0)]
    max_depth: f64,
}

impl KernelArgs {
    pub fn config(&self) -> Result<KernelConfig> {
        let mut c = KernelConfig::default();
        if let Some(v) = self.kernel_sigma {
            c.sigma_g = v;
        }
        if let Some(v) = self.s0 {
            c.s0_law = v;
        }
        if let Some(v) = self.sv {
            c.s_v = v;
        }
        if let Some(v) = self.sigma_v {
            c.sigma_v = v;
        }
        if let Some(v) = self.epsilon {
            c.epsilon = v;
        }
        if let Some(v) = self.prune_radius {
            c.prune_radius = v;
        }
        if let Some(v) = self.normal_window {
            c.normal_window = v;
        }
        c.use_normal_kernel = !self.no_normal_kernel;
        c.use_hsv_kernel = !self.no_hsv_kernel;
        if let Some(m) = self.normal_grad {
            c.normal_grad_mode = match m {
                GradMode::Detached => NormalGradMode::Detached,
                GradMode::Full => NormalGradMode::Full,
            };
        }
        if let Some(s) = self.scale_mode {
            c.scale_mode = match s {
                Scale::Depth => ScaleMode::DepthProportional,
                Scale::Fixed => ScaleMode::Fixed,
            };
        }
        c.validate()?;
        if !(self.max_depth > 0.0) {
            bail!("--max-depth must be positive, got {}", self.max_depth);
        }
        Ok(c)
    }

    pub fn max_depth(&self) -> f64 {
        self.max_depth
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene description (TOML); requires --calib.
    #[arg(long, conflicts_with = "preset", requires = "calib")]
    scene: Option<PathBuf>,
    /// Camera intrinsics (TOML).
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Built-in seeded scene with its own camera, LIDAR pattern and corruption.
    #[arg(long, value_enum, required_unless_present = "scene")]
    preset: Option<Preset>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct InputArgs {
    /// Depth PNG (16-bit, meters * 256, 0 = invalid).
    #[arg(long)]
    depth: PathBuf,
    /// HSV PNG (16-bit RGB holding h, s, v).
    #[arg(long)]
    hsv: Option<PathBuf>,
    /// LIDAR cloud (binary PLY).
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    calib: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Seeds the s0 draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the per-pixel depth gradient (eval-loss only).
    #[arg(long)]
    grad_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    /// Image side length of each random scene.
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 40)]
    lidar_points: usize,
    #[command(flatten)]
    kernel: KernelArgs,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Ground-truth depth PNG for before/after metrics.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    backtrack: Option<f64>,
    #[arg(long)]
    anchor_weight: Option<f64>,
    #[arg(long)]
    anchor_delta: Option<f64>,
    /// Also refine with and without the normal kernel and write paired metrics.
    #[arg(long, requires = "gt")]
    ablation: bool,
    #[command(flatten)]
    kernel: KernelArgs,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 80.0)]
    cap: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = std::io::stdout().lock();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, &mut out),
        Command::EvalLoss(a) => commands::eval_loss(&a, &mut out),
        Command::GradCheck(a) => commands::grad_check(&a, &mut out),
        Command::Refine(a) => commands::refine(&a, &mut out),
        Command::Metrics(a) => commands::metrics(&a, &mut out),
        Command::BruteForce(a) => commands::brute_force(&a, &mut out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
