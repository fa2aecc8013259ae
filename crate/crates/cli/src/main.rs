use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use sma_core::config::RunConfig;
use sma_core::data::{generate_synthetic, load_samples, split_grouped, write_dataset, DatasetManifest, SequenceSample, CLASS_NAMES};
use sma_core::format::read_tensor_file;
use sma_core::gradsuite::{format_table, run_suite};
use sma_core::train::{evaluate, load_model, train_run};
use sma_core::{Error, OpKind};

#[derive(Parser)]
#[command(name = "smanet", version, about = "Train and evaluate multi-scale aggregation sequence classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; must be empty or absent.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, logs and the config echo.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `test`, `train` or `all`.
        #[arg(long, default_value = "test")]
        split: String,
        /// Build the model from this config instead of the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check every backward rule against finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Predict the class of one sequence file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
    /// Numerical check failed without an error value.
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::read(p),
        None => Ok(RunConfig::default()),
    }
}

fn class_name(k: usize, class: usize) -> &'static str {
    if k == 2 {
        ["open", "closed"][class]
    } else {
        CLASS_NAMES[class]
    }
}

fn cmd_gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
        if entries.next().is_some() {
            return Err(Failure::Usage(format!("output directory {} is not empty", out.display())));
        }
    }
    let dataset = generate_synthetic(&cfg.data)?;
    let manifest = write_dataset(&dataset, out)?;
    let counts = manifest.class_counts(3);
    for (k, c) in counts.iter().enumerate() {
        println!("{} {c}", CLASS_NAMES[k]);
    }
    println!("total {}", manifest.entries.len());
    Ok(())
}

fn select(manifest: &DatasetManifest, config: &RunConfig, split: &str) -> Result<DatasetManifest, Failure> {
    if split == "all" {
        return Ok(manifest.clone());
    }
    let (train, test) = split_grouped(manifest, config.test_fraction, config.split_seed)?;
    match split {
        "train" => Ok(train),
        "test" => Ok(test),
        other => Err(Failure::Usage(format!("unknown split `{other}`; expected test, train or all"))),
    }
}

fn load_split(data: &Path, config: &RunConfig, split: &str) -> Result<Vec<SequenceSample>, Failure> {
    let manifest = DatasetManifest::read(data)?;
    let part = select(&manifest, config, split)?;
    Ok(load_samples(&part, config.model.num_classes)?)
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, epochs: Option<usize>, seed: Option<u64>, resume: Option<&Path>) -> CliResult {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let train = load_split(data, &cfg, "train")?;
    let val = load_split(data, &cfg, "test")?;
    println!("train {} sequences, validation {} sequences", train.len(), val.len());
    let (_, summary) = train_run(out, &cfg, &train, &val, resume)?;
    for (i, (loss, bacc)) in summary.train_losses.iter().zip(&summary.val_bacc).enumerate() {
        let epoch = summary.epochs_completed - summary.train_losses.len() + i + 1;
        println!("epoch {epoch} loss {loss:.6} val_b_acc {bacc:.6}");
    }
    if summary.best_epoch > 0 {
        println!("best epoch {} val_b_acc {:.6}", summary.best_epoch, summary.best_bacc);
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: &str, config: Option<&Path>) -> CliResult {
    let override_cfg = config.map(RunConfig::read).transpose()?;
    let (model, store, stored) = load_model(checkpoint, override_cfg.as_ref().map(|c| &c.model))?;
    let mut run = override_cfg.unwrap_or(stored);
    run.model = model.config().clone();
    let samples = load_split(data, &run, split)?;
    let eval = evaluate(&model, &store, &samples, split)?;
    let report = eval.report.to_string();
    print!("{report}");
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let path = dir.join(format!("eval_{split}.txt"));
    fs::write(&path, report).map_err(|e| Failure::Usage(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

fn cmd_gradcheck(fault: Option<&str>) -> CliResult {
    let fault = fault
        .map(|name| {
            OpKind::from_name(name).ok_or_else(|| {
                let known: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
                Failure::Usage(format!("unknown op `{name}`; expected one of {}", known.join(", ")))
            })
        })
        .transpose()?;
    let start = Instant::now();
    let rows = run_suite(fault)?;
    print!("{}", format_table(&rows));
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("{} of {} checks passed in {:.2}s", rows.len() - failed, rows.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} gradient checks exceed the tolerance")));
    }
    Ok(())
}

fn row(values: &[f32]) -> String {
    values.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ")
}

fn cmd_predict(checkpoint: &Path, sequence: &Path) -> CliResult {
    let (model, store, _) = load_model(checkpoint, None)?;
    let cfg = model.config();
    let seq = read_tensor_file(sequence)?;
    let dims = seq.dims();
    if dims.len() != 3 || dims[0] != cfg.seq_len || dims[1] != cfg.input_size || dims[2] != cfg.input_size {
        return Err(Error::Shape {
            op: "predict",
            detail: format!(
                "sequence has dims {dims:?} but the checkpoint expects [{},{},{}]",
                cfg.seq_len, cfg.input_size, cfg.input_size
            ),
        }
        .into());
    }
    let p = model.predict(&store, seq.data())?;
    let k = cfg.num_classes;
    println!("class {}", class_name(k, p.class_for(cfg.inference)));
    for (t, r) in p.probs_slice.data().chunks(k).enumerate() {
        println!("slice {} {}", t + 1, row(r));
    }
    for (t, r) in p.probs_seq.data().chunks(k).enumerate() {
        println!("sequence {} {}", t + 1, row(r));
    }
    println!("final {}", row(p.probs_final.data()));
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { config, out, seed } => cmd_gen_data(config.as_deref(), &out, seed),
        Command::Train {
            config,
            data,
            out,
            epochs,
            seed,
            resume,
        } => cmd_train(config.as_deref(), &data, &out, epochs, seed, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            split,
            config,
        } => cmd_eval(&checkpoint, &data, &split, config.as_deref()),
        Command::Gradcheck { inject_fault } => cmd_gradcheck(inject_fault.as_deref()),
        Command::Predict { checkpoint, sequence } => cmd_predict(&checkpoint, &sequence),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
