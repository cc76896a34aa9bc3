//! `rgbd-fusion` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
//! (non-finite loss, failed gradient check), 3 I/O or file-format error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rgbd_fusion::autodiff::Fault;
use rgbd_fusion::checkpoint;
use rgbd_fusion::harness::ablate::{ablation_csv, ablation_grid, render_ablation};
use rgbd_fusion::harness::bench::{attention_scaling, scaling_csv};
use rgbd_fusion::harness::checks::{render_report, run_gradchecks};
use rgbd_fusion::harness::eval::{dump_maps, evaluate, infer_files};
use rgbd_fusion::harness::{ablate, generate_dataset, image_io, load_or_generate, train_to_dir, write_dataset};
use rgbd_fusion::harness::{Profile, RunConfig};
use rgbd_fusion::metrics::{render_csv, render_table};
use rgbd_fusion::{Enhancement, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "rgbd-fusion", version, about = "Transformer-based RGB-D saliency fusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Run configuration overrides; flags win over `--config`, which wins over the profile.
#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of fusion blocks.
    #[arg(long = "t", global = true, value_name = "N")]
    t: Option<usize>,
    #[arg(long, global = true)]
    channels: Option<usize>,
    #[arg(long, global = true)]
    input_size: Option<usize>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Directory holding `train/` and `test/` sample folders.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Enhance every scale from the raw pyramid instead of progressively.
    #[arg(long, global = true)]
    non_progressive: bool,
    /// Plain multi-scale multi-modal fusion: no enhancement, no fusion blocks.
    #[arg(long, global = true, conflicts_with = "non_progressive")]
    baseline_msmmf: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    /// Flip the sign of the softmax backward rule.
    SoftmaxSign,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as `<out>/train` and `<out>/test`.
    GenData,
    /// Train and write `loss.csv` and `model.ckpt` into `--out`.
    Train,
    /// Score a checkpoint on the train or test split.
    Eval {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Write final maps as `<out>/maps/NNNN_pred.pgm`.
        #[arg(long)]
        dump_maps: bool,
    },
    /// Saliency map for one RGB (P6) and depth (P5) pair.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PPM")]
        rgb: PathBuf,
        #[arg(long, value_name = "PGM")]
        depth: PathBuf,
        #[arg(long, value_name = "PGM")]
        output: PathBuf,
    },
    /// Train and test every ablation variant; writes `<out>/ablation.csv`.
    Ablate {
        /// Seeds per variant.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Finite-difference check of every op and block.
    Gradcheck {
        /// Corrupt a backward rule to see the suite catch it.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Attention wall time and peak buffer versus sequence length, as CSV.
    BenchAttn {
        #[arg(long, default_value_t = 32)]
        c: usize,
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let profile = match common.profile {
        Some(ProfileArg::Paper) => Profile::Paper,
        _ => Profile::Desk,
    };
    let mut run = RunConfig::profile(profile);
    if let Some(path) = &common.config {
        let mut text = fs::read_to_string(path)?;
        if common.profile.is_some() {
            // the last profile entry is applied first, so the flag beats the file
            text.push_str(&format!(
                "\nprofile = {}\n",
                if profile == Profile::Paper { "paper" } else { "desk" }
            ));
        }
        run.apply_text(&text).map_err(|e| e.context(path.display()))?;
    }
    if let Some(v) = common.seed {
        run.seed = v;
    }
    if let Some(v) = common.t {
        run.fusion_blocks = v;
    }
    if let Some(v) = common.channels {
        run.channels = v;
    }
    if let Some(v) = common.input_size {
        run.input_size = v;
    }
    if let Some(v) = common.iters {
        run.iterations = v;
    }
    if let Some(v) = &common.out {
        run.out_dir = v.clone();
    }
    if let Some(v) = &common.data {
        run.data_dir = Some(v.clone());
    }
    if common.non_progressive {
        run.enhancement = Enhancement::NonProgressive;
    }
    if common.baseline_msmmf {
        run = run.into_baseline();
    }
    run.validate()?;
    Ok(run)
}

fn checkpoint_path(run: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| run.out_dir.join("model.ckpt"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let run = resolve(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let train = generate_dataset(run.train_samples, run.input_size, run.seed)?;
            let test = generate_dataset(run.test_samples, run.input_size, run.seed + 1)?;
            write_dataset(&run.out_dir.join("train"), &train)?;
            write_dataset(&run.out_dir.join("test"), &test)?;
            println!(
                "wrote {} training and {} test samples ({}x{}) to {}",
                train.len(),
                test.len(),
                run.input_size,
                run.input_size,
                run.out_dir.display()
            );
        }
        Command::Train => {
            let (train, _) = load_or_generate(&run)?;
            let outcome = train_to_dir(&run, &train)?;
            if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
                println!(
                    "trained {} iterations: total loss {:.4} -> {:.4}; wrote {}",
                    outcome.log.len(),
                    first.total,
                    last.total,
                    run.out_dir.join("model.ckpt").display()
                );
            }
        }
        Command::Eval {
            checkpoint: ckpt,
            split,
            dump_maps: dump,
        } => {
            let model = checkpoint::load_model(&checkpoint_path(&run, &ckpt), run.model())?;
            let (train, test) = load_or_generate(&run)?;
            let (samples, name) = match split {
                Split::Train => (train, "train"),
                Split::Test => (test, "test"),
            };
            let (report, maps) = evaluate(&model, &samples)?;
            let rows = [(name.to_string(), report)];
            print!("{}", render_table(&rows));
            write(&run.out_dir.join(format!("metrics_{name}.csv")), &render_csv(&rows))?;
            if dump || run.dump_maps {
                dump_maps(&run.out_dir.join("maps"), &maps, &samples)?;
            }
        }
        Command::Infer {
            checkpoint: ckpt,
            rgb,
            depth,
            output,
        } => {
            let model = checkpoint::load_model(&checkpoint_path(&run, &ckpt), run.model())?;
            let map = infer_files(&model, &rgb, &depth)?;
            image_io::write(&output, &map)?;
            println!("wrote {}", output.display());
        }
        Command::Ablate { seeds } => {
            let run = RunConfig {
                ablate_seeds: seeds.unwrap_or(run.ablate_seeds),
                ..run
            };
            run.validate()?;
            let (train, test) = load_or_generate(&run)?;
            let rows = ablate(&run, &train, &test, &ablation_grid())?;
            print!("{}", render_ablation(&rows));
            write(&run.out_dir.join("ablation.csv"), &ablation_csv(&rows))?;
        }
        Command::Gradcheck { inject_fault } => {
            let fault = inject_fault.map(|FaultArg::SoftmaxSign| Fault::SoftmaxBackwardSign);
            let results = run_gradchecks(fault)?;
            print!("{}", render_report(&results));
            let failed: Vec<&str> = results
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.name.as_str())
                .collect();
            if !failed.is_empty() {
                return Err(Error::Numeric(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )));
            }
        }
        Command::BenchAttn { c, n, reps } => {
            let points = attention_scaling(c, &n, reps, run.seed)?;
            print!("{}", scaling_csv(&points));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
