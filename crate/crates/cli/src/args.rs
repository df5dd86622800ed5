use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use platerim_core::evalsuite::AblationVariant;
use platerim_core::trainer::AttackMode;

#[derive(Debug, Parser)]
#[command(name = "platerim", version, about = "Adversarial plate-rim patches against a toy plate reader")]
pub struct Cli {
    /// Master seed; every random choice in a run derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON settings file (sections: train, loss, eval, victims, render, synthetic, stats).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a seeded synthetic dataset: PNG images plus a manifest.
    RenderSynthetic(RenderArgs),
    /// Train the toy detector and reader on freshly rendered plates.
    TrainVictims(VictimArgs),
    /// Optimize a rim patch.
    Train(TrainArgs),
    /// Score a patch against its control on one split.
    Eval(EvalArgs),
    /// Train and score the four ablation variants with a shared control.
    Ablate(AblateArgs),
    /// Distance-correlation dependence of reader metrics on camera pose.
    Stats(StatsArgs),
    /// Composite a patch onto one image.
    Apply(ApplyArgs),
    /// Serve the corner-labeling HTTP interface over a manifest.
    LabelServe(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    /// Extra images tagged as a test split.
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Shared plate text; random texts when absent.
    #[arg(long)]
    pub text: Option<String>,
    /// Leave corners out of the manifest, for manual labeling.
    #[arg(long)]
    pub unlabeled: bool,
}

#[derive(Debug, Args)]
pub struct VictimArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Rendered plate images.
    #[arg(long, default_value_t = 3000)]
    pub count: usize,
    /// Rendered plate-free scenes (default: count / 6).
    #[arg(long)]
    pub negatives: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Disrupt,
    Impersonate,
}

impl From<ModeArg> for AttackMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Disrupt => AttackMode::Disrupt,
            ModeArg::Impersonate => AttackMode::Impersonate,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    /// The test-tagged entries if there are any, the validation split otherwise.
    #[default]
    Auto,
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Victim weights written by train-victims.
    #[arg(long)]
    pub victims: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// True plate text; images showing another text are left out.
    #[arg(long)]
    pub truth: Option<String>,
    /// Attack target text (default: drawn from the truth and the seed).
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patch_h: Option<usize>,
    #[arg(long)]
    pub patch_w: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Patch file (.spat).
    #[arg(long)]
    pub patch: PathBuf,
    /// Target text (default: read from train_report.json beside the patch).
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::Auto)]
    pub split: SplitArg,
    /// Compositing variant the patch was trained under.
    #[arg(long, default_value = "full")]
    pub variant: AblationVariant,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Comma-separated subset of full,no_homography,no_tv,neither.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<AblationVariant>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Per-image records of the attack condition (eval.csv).
    #[arg(long)]
    pub eval_csv: PathBuf,
    /// Per-image records of the control condition (control.csv).
    #[arg(long)]
    pub control_csv: Option<PathBuf>,
    #[arg(long)]
    pub n_perm: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub patch: PathBuf,
    /// Manifest holding the image; use with --id.
    #[arg(long, requires = "id", conflicts_with_all = ["image", "corners"])]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub id: Option<String>,
    /// Image file; use with --corners.
    #[arg(long, requires = "corners")]
    pub image: Option<PathBuf>,
    /// Plate corners TL,TR,BR,BL as x1,y1,...,x4,y4 in image pixels.
    #[arg(long, value_delimiter = ',', num_args = 1, allow_hyphen_values = true)]
    pub corners: Option<Vec<f64>>,
    /// Darkening factor in [0, 0.2].
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    /// Stretch the patch over the rim's bounding box instead of warping it.
    #[arg(long)]
    pub rectangular: bool,
    /// Also read the composited image with these victims.
    #[arg(long)]
    pub victims: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 8077)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Required to bind a non-loopback address; the server has no authentication.
    #[arg(long)]
    pub allow_remote: bool,
    /// Directory of client assets served at `/` (default: the built-in page).
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}
