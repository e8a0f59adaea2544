use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use borderdet::pipeline::commands::{self, Analysis, Globals};
use borderdet::pipeline::Stage;
use borderdet::training::ShapeKind;
use borderdet::Error;

#[derive(Parser)]
#[command(name = "borderdet", version, about = "BorderAlign / BorderDet on synthetic shapes")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the data, initialisation and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and val splits under <out-dir>/data.
    GenerateData,
    /// Train from scratch; writes model.bdet and logs.
    Train {
        /// Directory holding train/ and val/ (generated in memory if absent).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate on val every this many iterations (0 disables).
        #[arg(long, default_value_t = 500)]
        eval_every: usize,
    },
    /// AP of both stages on the val split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Detections for a TNS4 image batch or a dataset directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::Refined)]
        stage: StageArg,
    },
    /// Extreme-point distances or the IoU histogram.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ShapeArg::Ellipse)]
        shape: ShapeArg,
    },
    /// Median wall time of one kernel; writes bench.csv.
    Bench {
        #[arg(long, default_value = "border_align")]
        op: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        batches: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,2,4,10,32")]
        pool_sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Oracle and gradient suites.
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Coarse,
    Refined,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisArg {
    Extreme,
    Iou,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Ellipse,
    Rectangle,
    All,
}

fn run(cli: Cli) -> borderdet::Result<bool> {
    let g = Globals::new(cli.config.as_deref(), cli.seed, Some(&cli.out_dir))?;
    match cli.command {
        Command::GenerateData => {
            println!("wrote {}", commands::generate_data(&g)?.display());
        }
        Command::Train { data, eval_every } => {
            println!("wrote {}", commands::train_command(&g, data.as_deref(), eval_every, false)?.display());
        }
        Command::Eval { checkpoint, data } => {
            let r = commands::eval_command(&g, &checkpoint, data.as_deref())?;
            for (name, e) in [("coarse", &r.coarse), ("refined", &r.refined)] {
                let aps: Vec<String> = e.ap.iter().map(|a| format!("{:.1}", a * 100.0)).collect();
                println!("{name:8} mAP {:.1}  AP@[.5 .6 .7 .75 .8 .9] {}", e.mean_ap * 100.0, aps.join(" "));
            }
        }
        Command::Infer { checkpoint, input, stage } => {
            let stage = match stage {
                StageArg::Coarse => Stage::Coarse,
                StageArg::Refined => Stage::Refined,
            };
            let d = commands::infer_command(&g, &checkpoint, &input, stage)?;
            println!("{} detections over {} images", d.iter().map(|i| i.detections.len()).sum::<usize>(), d.len());
        }
        Command::Analyze { kind, checkpoint, data, shape } => {
            let kind = match kind {
                AnalysisArg::Extreme => Analysis::Extreme,
                AnalysisArg::Iou => Analysis::Iou,
            };
            let shape = match shape {
                ShapeArg::Ellipse => Some(ShapeKind::Ellipse),
                ShapeArg::Rectangle => Some(ShapeKind::Rectangle),
                ShapeArg::All => None,
            };
            println!("wrote {}", commands::analyze_command(&g, kind, &checkpoint, data.as_deref(), shape)?.display());
        }
        Command::Bench { op, batches, pool_sizes, repeats } => {
            println!("wrote {}", commands::bench_command(&g, &op, &batches, &pool_sizes, repeats)?.display());
        }
        Command::Verify => {
            let r = commands::verify_command(&g)?;
            for c in &r.checks {
                println!("{} {:<22} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            for c in &r.gradients {
                let status = if c.passed { "PASS" } else { "FAIL" };
                println!("{status} grad {:<17} max rel err {:.2e} ({} entries)", c.name, c.max_rel_err, c.checked);
            }
            return Ok(r.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Input(_) | Error::Json(_) | Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
