use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use attnwise::data::{Dataset, Split};
use attnwise::gradcheck::standard_suite;
use attnwise::harness::{self, dump_activations, resolve_model, TrainConfig};
use attnwise::models::{load_checkpoint, Model};
use attnwise::optim::OptimizerMode;

mod fetch;

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

#[derive(Parser)]
#[command(
    name = "attnwise",
    version,
    about = "Element-wise attention experiments on Fashion-MNIST and CIFAR-10"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, a checkpoint and the run config.
    Train {
        /// key=value run config; optional when --model is given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in model id or spec file; overrides the config.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        train_limit: Option<usize>,
        #[arg(long)]
        scale_divisor: Option<usize>,
        /// Disable the skip connection of every attention layer.
        #[arg(long)]
        no_skip: bool,
        /// Separate optimizer group for attention arrays at this rate.
        #[arg(long, num_args = 0..=1, default_missing_value = "0.1")]
        segregated_lr: Option<f64>,
        /// Exit with status 2 if the run collapses.
        #[arg(long)]
        fail_on_collapse: bool,
    },
    /// Test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "fashion-mnist")]
        dataset: String,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        batch_size: usize,
    },
    /// Print the parameter total and per-layer breakdown.
    CountParams {
        /// Built-in model id or spec file.
        #[arg(long)]
        model: String,
        #[arg(long)]
        scale_divisor: Option<usize>,
        #[arg(long)]
        no_skip: bool,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Write every attention stage for one test image as PGM/PPM files.
    DumpActivations {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_index: usize,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, default_value = "dumps")]
        out: PathBuf,
    },
    /// Download and unpack a dataset.
    FetchData {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "data")]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = matches!(e.downcast_ref(), Some(attnwise::Error::NonFinite { .. }));
            ExitCode::from(if numerical { EXIT_NUMERICAL } else { EXIT_VALIDATION })
        }
    }
}

fn dataset_for(model: &Model<f32>, name: Option<&str>) -> anyhow::Result<Dataset> {
    match name {
        Some(n) => Ok(Dataset::parse(n)?),
        None if model.spec().input == attnwise::models::CIFAR10_SHAPE => Ok(Dataset::Cifar10),
        None => Ok(Dataset::FashionMnist),
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Train {
            config,
            model,
            seed,
            out,
            data_dir,
            epochs,
            batch_size,
            train_limit,
            scale_divisor,
            no_skip,
            segregated_lr,
            fail_on_collapse,
        } => {
            let mut cfg = match (&config, &model) {
                (Some(path), _) => TrainConfig::load(path)?,
                (None, Some(id)) => {
                    let spec = resolve_model(id)?;
                    let dataset = if spec.input == attnwise::models::CIFAR10_SHAPE {
                        Dataset::Cifar10
                    } else {
                        Dataset::FashionMnist
                    };
                    TrainConfig::new(spec, dataset)
                }
                (None, None) => bail!("train needs --config or --model"),
            };
            if let (Some(_), Some(id)) = (&config, &model) {
                cfg.model = resolve_model(id)?;
            }
            if no_skip {
                cfg.model = cfg.model.with_skip(false);
            }
            if let Some(d) = scale_divisor {
                cfg.model = cfg.model.with_scale_divisor(d);
            }
            if let Some(attn_lr) = segregated_lr {
                let lr = match cfg.optimizer {
                    OptimizerMode::Single { lr } | OptimizerMode::Segregated { lr, .. } => lr,
                };
                cfg.optimizer = OptimizerMode::Segregated { attn_lr, lr };
            }
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.out_dir = out.unwrap_or(cfg.out_dir);
            cfg.data_dir = data_dir.unwrap_or(cfg.data_dir);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.train_limit = train_limit.or(cfg.train_limit);
            cfg.validate()?;
            let outcome = harness::run_training(&cfg)?;
            let last = outcome.final_test();
            println!(
                "final test accuracy {:.2}%, first-layer grad avg {:.3e}, collapsed {}",
                last.accuracy_pct, last.first_layer_grad_avg, outcome.collapsed
            );
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            if outcome.collapsed && fail_on_collapse {
                eprintln!("error: training collapsed");
                return Ok(ExitCode::from(EXIT_NUMERICAL));
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            data_dir,
            batch_size,
        } => {
            let mut model = load_checkpoint(&checkpoint)?;
            let dataset = Dataset::parse(&dataset)?;
            let test = dataset.load(&data_dir, Split::Test)?;
            let eval = harness::evaluate(&mut model, &test, batch_size, attnwise::Mode::Eval)?;
            println!("test accuracy {:.6}%", eval.accuracy_pct);
            println!("test loss {:.6} over {} batches", eval.loss, eval.batches);
        }
        Command::CountParams {
            model,
            scale_divisor,
            no_skip,
        } => {
            let mut spec = resolve_model(&model)?;
            if let Some(d) = scale_divisor {
                spec = spec.with_scale_divisor(d);
            }
            if no_skip {
                spec = spec.with_skip(false);
            }
            let count = Model::<f32>::build(&spec)?.count_params();
            println!("{}", count.total);
            eprintln!("{spec}");
            for (name, n) in &count.per_layer {
                eprintln!("  {name:<12} {n:>10}");
            }
        }
        Command::Gradcheck { seeds } => {
            let mut failed = 0;
            println!("{:<6} {:<28} {:>14} {:>8}", "seed", "case", "max rel err", "status");
            for seed in seeds {
                for case in standard_suite(seed)? {
                    let ok = case.report.passed();
                    failed += !ok as usize;
                    println!(
                        "{seed:<6} {:<28} {:>14.3e} {:>8}",
                        case.name,
                        case.report.max_rel_error(),
                        if ok { "ok" } else { "FAIL" }
                    );
                }
            }
            if failed > 0 {
                eprintln!("error: {failed} gradient checks failed");
                return Ok(ExitCode::from(EXIT_NUMERICAL));
            }
        }
        Command::DumpActivations {
            checkpoint,
            image_index,
            dataset,
            data_dir,
            out,
        } => {
            let mut model = load_checkpoint(&checkpoint)?;
            if !model.spec().is_attention() {
                bail!("dump-activations needs an attention model checkpoint");
            }
            let dataset = dataset_for(&model, dataset.as_deref())?;
            let test = dataset.load(&data_dir, Split::Test)?;
            if image_index >= test.len() {
                bail!("image index {image_index} out of range (test set has {})", test.len());
            }
            let (image, labels) = test.gather(&[image_index]);
            let files = dump_activations(&mut model, &image, &out)
                .with_context(|| format!("dumping into {}", out.display()))?;
            println!(
                "wrote {} images for test image {image_index} (label {})",
                files.len(),
                labels[0]
            );
            for f in files {
                println!("{}", f.path.display());
            }
        }
        Command::FetchData { dataset, dir } => {
            let dataset = Dataset::parse(&dataset)?;
            fetch::fetch(dataset, &dir)?;
            println!("{} ready under {}", dataset.name(), dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
