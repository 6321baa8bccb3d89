//! `slimdet`: inspect, compress, run and score small SSD detectors.
//!
//! Exit status is 0 on success, 2 for usage or input errors and 1 for
//! internal failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use slimdet::cost::CostUnits;

use slimdet_cli::commands;

#[derive(Parser, Debug)]
#[command(name = "slimdet", version, about = "Compression toolkit for small SSD-style detectors")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for zoo weight initialisation and seeded passes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Units::Macs)]
    cost_units: Units,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Units {
    Macs,
    Flops2x,
}

impl From<Units> for CostUnits {
    fn from(u: Units) -> Self {
        match u {
            Units::Macs => CostUnits::Macs,
            Units::Flops2x => CostUnits::Flops2x,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer shapes, receptive fields and cost.
    Inspect {
        /// `zoo:<name>` or a graph JSON file.
        #[arg(long)]
        model: String,
    },
    /// Apply a pass pipeline and write the resulting model.
    Transform {
        #[arg(long)]
        model: String,
        /// Weight file; required unless the model comes from the zoo.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// JSON list of `{"pass", "params", "seed"}` entries.
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        out_graph: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        /// Where to write the JSON report (also written on failure).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a detector on input tensors and write detections as JSON lines.
    Infer {
        #[arg(long)]
        model: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Tensor files matching the model input shape.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// Prior configuration JSON; defaults to the three-level layout.
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.45)]
        nms_iou: f64,
        #[arg(long, default_value_t = 200)]
        max_keep: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average precision of a detections file against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        det: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        #[arg(long, default_value_t = 0.5)]
        ioa: f64,
        /// Only score this class; all classes are pooled when absent.
        #[arg(long)]
        class: Option<usize>,
        /// 11-point interpolation instead of the all-point envelope.
        #[arg(long)]
        eleven_point: bool,
    },
    /// Emit prior boxes from a config or by clustering ground truth.
    Priors {
        #[arg(long, value_enum)]
        mode: PriorMode,
        /// Prior configuration JSON (ssd mode) or level layout (cluster mode).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ground-truth file (cluster mode).
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        scales: usize,
        #[arg(long, default_value_t = 4)]
        per_scale: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Built-in model builders.
    Zoo {
        #[command(subcommand)]
        action: ZooAction,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PriorMode {
    Ssd,
    Cluster,
}

#[derive(Subcommand, Debug)]
enum ZooAction {
    /// List model names.
    List,
    /// Write a model's graph JSON and weight file.
    Emit {
        #[arg(long)]
        model: String,
        #[arg(long)]
        out_graph: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long, value_enum, default_value_t = Init::HeNormal)]
        init: Init,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Init {
    HeNormal,
    HeNormalRandomBn,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = commands::Context { json: cli.json, seed: cli.seed, units: cli.cost_units.into() };
    let result = match cli.command {
        Command::Inspect { model } => commands::inspect(&ctx, &model),
        Command::Transform { model, weights, pipeline, out_graph, out_weights, report } => commands::transform(
            &ctx,
            commands::TransformArgs { model, weights, pipeline, out_graph, out_weights, report },
        ),
        Command::Infer { model, weights, inputs, priors, score_threshold, nms_iou, max_keep, out } => commands::infer(
            &ctx,
            commands::InferArgs { model, weights, inputs, priors, score_threshold, nms_iou, max_keep, out },
        ),
        Command::Eval { gt, det, iou, ioa, class, eleven_point } => {
            commands::eval(&ctx, commands::EvalArgs { gt, det, iou, ioa, class, eleven_point })
        }
        Command::Priors { mode, config, gt, scales, per_scale, out } => commands::priors(
            &ctx,
            commands::PriorsArgs { cluster: matches!(mode, PriorMode::Cluster), config, gt, scales, per_scale, out },
        ),
        Command::Zoo { action: ZooAction::List } => commands::zoo_list(&ctx),
        Command::Zoo { action: ZooAction::Emit { model, out_graph, out_weights, init } } => {
            let scheme = match init {
                Init::HeNormal => slimdet::zoo::InitScheme::HeNormal,
                Init::HeNormalRandomBn => slimdet::zoo::InitScheme::HeNormalRandomBn,
            };
            commands::zoo_emit(&ctx, &model, &out_graph, &out_weights, scheme)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
