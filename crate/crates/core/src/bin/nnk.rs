//! Command-line front end. Every subcommand accepts `--config <json>`;
//! flags override values from the file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use nnkernel::ann::{AnnIndex, GraphIndex, DEFAULT_MAX_DEGREE};
use nnkernel::train::{self, EvalMode};
use nnkernel::{Checkpoint, Dataset, Error, LossKind, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "nnk",
    version,
    about = "Nearest-neighbour Gaussian kernel training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an embedding network and its kernel bank.
    Train {
        #[command(flatten)]
        common: Common,
        /// Where to write the checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Optional JSON file for the loss curves and refresh diagnostics.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Classification accuracy or transfer metrics for a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "classification")]
        mode: Mode,
        /// Write the JSON report here as well as printing the table.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Pick the kernel width with the lowest validation loss.
    TuneSigma {
        #[command(flatten)]
        common: Common,
        /// Comma-separated candidate widths.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        grid: Option<Vec<f64>>,
    },
    /// Build a graph index over raw features, or over embeddings when a
    /// checkpoint is given.
    IndexBuild {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_DEGREE)]
        max_degree: usize,
    },
    /// Mean neighbour distance and kernel value of a checkpoint's network.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Add labelled examples to a checkpoint's bank without training.
    Enroll {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output checkpoint; defaults to overwriting the input.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Classification,
    Transfer,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Kernel,
    Softmax,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature file (CSV or NNKF).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    sigma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learn_kernel_weights: Option<bool>,
    #[arg(long)]
    freeze_network: Option<bool>,
    #[arg(long)]
    dropout_active: Option<bool>,
    #[arg(long, allow_negative_numbers = true)]
    update_interval: Option<f64>,
    #[arg(long)]
    k_train: Option<usize>,
    #[arg(long)]
    backtrack_budget: Option<usize>,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    hidden_dropout: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    embedding_dropout: Option<f64>,
    #[arg(long, value_enum)]
    loss: Option<Loss>,
    #[arg(long, value_delimiter = ',')]
    k_values: Option<Vec<usize>>,
    #[arg(long)]
    tune_sigma: Option<bool>,
    #[arg(long, allow_negative_numbers = true)]
    val_fraction: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    test_fraction: Option<f64>,
}

macro_rules! apply {
    ($src:expr => $($dst:expr),+ $(,)?) => {
        if let Some(v) = $src.clone() {
            $($dst = v;)+
        }
    };
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        apply!(self.data.clone().map(Some) => c.paths.data);
        apply!(self.sigma => c.kernel.sigma);
        apply!(self.learning_rate => c.train.learning_rate);
        apply!(self.batch_size => c.train.batch_size);
        apply!(self.weight_decay => c.train.weight_decay);
        apply!(self.epochs => c.train.epochs);
        apply!(self.seed => c.train.seed, c.search.seed);
        apply!(self.learn_kernel_weights => c.train.learn_kernel_weights);
        apply!(self.freeze_network => c.train.freeze_network);
        apply!(self.dropout_active => c.train.dropout_active);
        apply!(self.update_interval => c.schedule.update_interval);
        apply!(self.k_train => c.schedule.k_train);
        apply!(self.backtrack_budget => c.search.backtrack_budget);
        apply!(self.hidden => c.model.hidden);
        apply!(self.embedding_dim => c.model.embedding_dim);
        apply!(self.hidden_dropout => c.model.hidden_dropout);
        apply!(self.embedding_dropout => c.model.embedding_dropout);
        apply!(self.k_values => c.k_values);
        apply!(self.tune_sigma => c.tune_sigma);
        apply!(self.val_fraction => c.val_fraction);
        apply!(self.test_fraction => c.test_fraction);
        if let Some(loss) = self.loss {
            c.loss = match loss {
                Loss::Kernel => LossKind::Kernel,
                Loss::Softmax => LossKind::Softmax,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("no {what} path given (flag or config paths)")))
}

fn load_data(config: &RunConfig) -> Result<Dataset> {
    let mut data = Dataset::load(required(&config.paths.data, "data")?)?;
    train::prepare_splits(config, &mut data)?;
    info!(
        "loaded {} rows, {} features, {} classes",
        data.len(),
        data.dim(),
        data.num_classes()
    );
    Ok(data)
}

fn checkpoint_path(flag: &Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    Ok(required(&flag.clone().or_else(|| config.paths.checkpoint.clone()), "checkpoint")?.to_path_buf())
}

/// Dataset without split tags, for commands that use every row.
fn load_all_rows(config: &RunConfig) -> Result<Dataset> {
    Dataset::load(required(&config.paths.data, "data")?)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            common,
            checkpoint,
            history,
        } => {
            let config = common.config()?;
            let out = checkpoint_path(&checkpoint, &config)?;
            let data = load_data(&config)?;
            let outcome = train::train(&config, &data)?;
            outcome.checkpoint.save(&out)?;
            if let Some(path) = history {
                std::fs::write(path, serde_json::to_string_pretty(&outcome.history)?)?;
            }
            let last = outcome.history.epochs.last();
            println!(
                "trained {} epochs (best {:?}), final train loss {:.5}; checkpoint {}",
                outcome.history.epochs.len(),
                outcome.history.best_epoch,
                last.map_or(f64::NAN, |e| e.train_loss),
                out.display()
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            mode,
            report,
        } => {
            let config = common.config()?;
            let ck = Checkpoint::load(checkpoint_path(&checkpoint, &config)?)?;
            let mut data = load_all_rows(&config)?;
            if common.val_fraction.is_some() || common.test_fraction.is_some() {
                train::prepare_splits(&config, &mut data)?;
            }
            let mode = match mode {
                Mode::Classification => EvalMode::Classification,
                Mode::Transfer => EvalMode::Transfer,
            };
            let result = train::evaluate(&ck, &data, mode)?;
            if let Some(path) = report.or(config.paths.report) {
                std::fs::write(path, result.to_json()?)?;
            }
            print!("{result}");
        }
        Command::TuneSigma { common, grid } => {
            let config = common.config()?;
            let data = load_data(&config)?;
            let grid = grid.unwrap_or_else(|| config.sigma_grid.clone());
            println!("{}", train::tune_sigma(&config, &data, &grid)?);
        }
        Command::IndexBuild {
            common,
            checkpoint,
            output,
            max_degree,
        } => {
            let config = common.config()?;
            let data = load_all_rows(&config)?;
            let points = match checkpoint.or(config.paths.checkpoint.clone()) {
                Some(path) => Checkpoint::load(path)?.model.embed(data.features.view())?,
                None => data.features.clone(),
            };
            let out = required(&output.or(config.paths.index.clone()), "index output")?.to_path_buf();
            let graph = GraphIndex::build(points.view(), max_degree)?;
            graph.save(&out)?;
            let mode = if matches!(AnnIndex::build(points.view(), max_degree)?, AnnIndex::Exact) {
                " (small enough that searches run exactly)"
            } else {
                ""
            };
            println!(
                "indexed {} points of dimension {}{mode}; {}",
                points.nrows(),
                points.ncols(),
                out.display()
            );
        }
        Command::Diagnose { common, checkpoint } => {
            let config = common.config()?;
            let ck = Checkpoint::load(checkpoint_path(&checkpoint, &config)?)?;
            let data = load_all_rows(&config)?;
            println!("{}", serde_json::to_string_pretty(&train::diagnose(&ck, &data)?)?);
        }
        Command::Enroll {
            common,
            checkpoint,
            output,
        } => {
            let config = common.config()?;
            let input = checkpoint_path(&checkpoint, &config)?;
            let ck = Checkpoint::load(&input)?;
            let data = load_all_rows(&config)?;
            let enrolled = train::enroll(&ck, &data)?;
            let out = output.unwrap_or(input);
            enrolled.save(&out)?;
            println!(
                "bank grew from {} to {} centres, {} classes; {}",
                ck.bank.len(),
                enrolled.bank.len(),
                enrolled.bank.num_classes(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
