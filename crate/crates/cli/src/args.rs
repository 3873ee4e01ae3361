use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sfcnn::pipeline::{ArchConfig, Arm, RunConfig, SweepParam};

#[derive(Debug, Parser)]
#[command(
    name = "sfcnn",
    version,
    about = "Sales forecasting with convolutional networks over commodity logs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic logs.csv, items.csv and truth.json.
    Synth(SynthArgs),
    /// Train one model per region.
    Train(TrainArgs),
    /// Forecast every (item, region) with saved models.
    Predict(PredictArgs),
    /// Compute per-region MSE for models, prediction files and baselines.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate across a grid of one setting.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub brands: Option<usize>,
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub suppliers: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub indicators: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub promo_rate: Option<f64>,
    #[arg(long)]
    pub base_level: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub synth: SynthFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    /// Weight decay and transfer from all regions.
    CnnWdTl,
    /// Weight decay, regions trained separately.
    CnnWd,
    /// Neither weight decay nor transfer.
    Cnn,
}

impl From<Variant> for Arm {
    fn from(v: Variant) -> Self {
        match v {
            Variant::CnnWdTl => Arm::CnnWdTl,
            Variant::CnnWd => Arm::CnnWd,
            Variant::Cnn => Arm::Cnn,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataFlags {
    #[arg(long)]
    pub logs: Option<PathBuf>,
    #[arg(long)]
    pub items: Option<PathBuf>,
    /// Data Frame length in days.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Days between training end points.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Add the supplier matrix to every Data Frame.
    #[arg(long)]
    pub include_supplier: bool,
    /// Last day of input history (YYYY-MM-DD).
    #[arg(long)]
    pub forecast_start: Option<NaiveDate>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long, value_delimiter = ',')]
    pub filter_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub pool_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub maps: Option<Vec<usize>>,
    #[arg(long)]
    pub dense_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// 128 maps per order and 1024 dense units.
    #[arg(long = "paper-scale")]
    pub full_scale: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Sample weight decay rate.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Adamax step size.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Directory for model files and the training log.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// A model file, or a directory holding `model_<region>.sfcnn` files.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub logs: Option<PathBuf>,
    #[arg(long)]
    pub items: Option<PathBuf>,
    #[arg(long)]
    pub forecast_start: Option<NaiveDate>,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    Naive,
    MovingAverage,
    ArLs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Prediction CSVs to score; repeatable.
    #[arg(long)]
    pub predictions: Vec<PathBuf>,
    /// Method names for the prediction files, in order.
    #[arg(long)]
    pub method: Vec<String>,
    /// Model file or directory to score on the data.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub logs: Option<PathBuf>,
    #[arg(long)]
    pub items: Option<PathBuf>,
    #[arg(long)]
    pub forecast_start: Option<NaiveDate>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub baselines: Vec<BaselineKind>,
    #[arg(long, default_value_t = 4)]
    pub ma_weeks: usize,
    #[arg(long, default_value_t = 2)]
    pub ar_order: usize,
    /// Output metrics JSON; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Check this many random small architectures instead of the default one.
    #[arg(long)]
    pub random: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    /// Negate one analytic gradient to confirm the check fails.
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepTarget {
    Horizon,
    #[value(name = "T", alias = "window")]
    Window,
    Beta,
}

impl From<SweepTarget> for SweepParam {
    fn from(t: SweepTarget) -> Self {
        match t {
            SweepTarget::Horizon => SweepParam::Horizon,
            SweepTarget::Window => SweepParam::Window,
            SweepTarget::Beta => SweepParam::Beta,
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_enum)]
    pub param: SweepTarget,
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl SynthFlags {
    pub fn apply(&self, c: &mut RunConfig) {
        let s = &mut c.synth;
        set(&mut s.seed, self.seed);
        set(&mut s.num_regions, self.regions);
        set(&mut s.num_items, self.items);
        set(&mut s.num_brands, self.brands);
        set(&mut s.num_categories, self.categories);
        set(&mut s.num_suppliers, self.suppliers);
        set(&mut s.num_days, self.days);
        set(&mut s.num_indicators, self.indicators);
        set(&mut s.noise, self.noise);
        set(&mut s.promo_rate, self.promo_rate);
        set(&mut s.base_level, self.base_level);
    }
}

impl DataFlags {
    pub fn apply(&self, c: &mut RunConfig) {
        if self.logs.is_some() {
            c.paths.logs.clone_from(&self.logs);
        }
        if self.items.is_some() {
            c.paths.items.clone_from(&self.items);
        }
        set(&mut c.data.window, self.window);
        set(&mut c.data.horizon, self.horizon);
        set(&mut c.data.stride, self.stride);
        c.data.include_supplier |= self.include_supplier;
        if self.forecast_start.is_some() {
            c.forecast_start = self.forecast_start;
        }
    }
}

impl ModelFlags {
    pub fn apply(&self, c: &mut RunConfig) {
        if self.full_scale {
            c.arch = ArchConfig::full_scale();
        }
        let a = &mut c.arch;
        set(&mut a.filter_sizes, self.filter_sizes.clone());
        set(&mut a.pool_sizes, self.pool_sizes.clone());
        set(&mut a.maps, self.maps.clone());
        set(&mut a.dense_dim, self.dense_dim);
        set(&mut a.dropout, self.dropout);
        let t = &mut c.train;
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.pretrain_epochs, self.pretrain_epochs);
        set(&mut t.finetune_epochs, self.finetune_epochs);
        set(&mut t.beta, self.beta);
        set(&mut t.optimizer.alpha, self.alpha);
        set(&mut t.seed, self.seed);
        if let Some(v) = self.variant {
            c.train = sfcnn::pipeline::arm_config(&c.train, v.into());
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
