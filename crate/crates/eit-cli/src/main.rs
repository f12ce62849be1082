//! `eit` — dataset generation, reconstruction, correction-model training,
//! evaluation, timing, and figure export for the EIT inverse problem.

mod commands;
mod common;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "eit",
    about = "EIT reconstruction with truncated L-BFGS and learned correction operators",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the structured disk mesh and export it as JSON.
    Mesh {
        #[arg(long, default_value_t = 13)]
        rings: usize,
        #[arg(long, default_value_t = 64)]
        boundary: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a dataset: phantoms, D2N measurements, truncated
    /// reconstructions, rasterized pairs.
    Generate {
        /// four_circles or shepp_logan
        #[arg(long)]
        distribution: String,
        #[arg(long)]
        count: usize,
        /// Truncation iterations K of the reconstruction operator.
        #[arg(long, default_value_t = 350)]
        iters: usize,
        /// Multiplicative measurement noise level (0.01 = 1%).
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 13)]
        mesh_rings: usize,
        #[arg(long, default_value_t = 64)]
        mesh_boundary: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Export PNG previews for the first N samples.
        #[arg(long, default_value_t = 0)]
        previews: usize,
    },
    /// Reconstruct a medium from one measurement blob with L-BFGS.
    Reconstruct {
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        iters: usize,
        /// Tikhonov weight (0 disables).
        #[arg(long, default_value_t = 0.0)]
        l2: f64,
        /// Gradient infinity-norm stopping tolerance.
        #[arg(long, default_value_t = 1e-10)]
        gtol: f64,
        #[arg(long, default_value_t = 13)]
        mesh_rings: usize,
        #[arg(long, default_value_t = 64)]
        mesh_boundary: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-iteration trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train a correction operator (resnet or ddpm).
    Train {
        /// resnet or ddpm
        model: String,
        #[arg(long)]
        dataset: PathBuf,
        /// corrector (initial-guess input) or direct (measurement input)
        #[arg(long, default_value = "corrector")]
        mode: String,
        /// JSON file overriding architecture/training defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Checkpoint path (JSON manifest; a .f32 blob lands beside it).
        #[arg(long)]
        out: PathBuf,
        /// Training-curve CSV.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Draw conditional posterior samples from a DDPM checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Dataset sample index to condition on.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix; writes <prefix>.samples.f64, .mean.f64, .json.
        #[arg(long)]
        out: PathBuf,
        /// Also export PNGs.
        #[arg(long, default_value_t = false)]
        png: bool,
    },
    /// Run one method over the test split (or evaluate stored predictions).
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        /// lbfgs2500, lbfgs2500_l2, resnet_direct, ddpm_direct,
        /// lbfgsK_resnet, lbfgsK_ddpm
        #[arg(long)]
        method: Option<String>,
        /// Evaluate stored predictions instead of running a method.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        resnet_checkpoint: Option<PathBuf>,
        #[arg(long)]
        ddpm_checkpoint: Option<PathBuf>,
        /// Iteration cap for the full L-BFGS baselines.
        #[arg(long, default_value_t = 2500)]
        baseline_iters: usize,
        #[arg(long, default_value_t = 10)]
        posterior_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the one-row CSV table.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Persist per-sample reconstructions here.
        #[arg(long)]
        predictions_out: Option<PathBuf>,
    },
    /// Wall-clock inference timing and the L-BFGS linearity fit.
    Timing {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        resnet_checkpoint: Option<PathBuf>,
        #[arg(long)]
        ddpm_checkpoint: Option<PathBuf>,
        /// Truncation K used by the combined methods.
        #[arg(long, default_value_t = 350)]
        method_k: usize,
        #[arg(long, default_value_t = 2500)]
        baseline_iters: usize,
        #[arg(long, default_value_t = 10)]
        posterior_samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export comparison grids (and DDPM variability panels) as PNG.
    Figures {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        /// DDPM checkpoint for the no-averaging variability panel.
        #[arg(long)]
        ddpm_checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        variability_samples: usize,
    },
    /// Merge per-method reports in a run directory into one CSV table.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_thread_pool() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(value) = std::env::var("EIT_THREADS") {
            if let Ok(n) = value.parse::<usize>() {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Mesh { rings, boundary, out } => commands::cmd_mesh(rings, boundary, &out),
        Command::Generate {
            distribution,
            count,
            iters,
            noise,
            seed,
            mesh_rings,
            mesh_boundary,
            image_size,
            out,
            previews,
        } => commands::cmd_generate(
            &distribution,
            count,
            iters,
            noise,
            seed,
            mesh_rings,
            mesh_boundary,
            image_size,
            &out,
            previews,
        ),
        Command::Reconstruct {
            measurement,
            iters,
            l2,
            gtol,
            mesh_rings,
            mesh_boundary,
            out,
            trace,
        } => commands::cmd_reconstruct(
            &measurement,
            iters,
            l2,
            gtol,
            mesh_rings,
            mesh_boundary,
            &out,
            trace.as_deref(),
        ),
        Command::Train {
            model,
            dataset,
            mode,
            config,
            epochs,
            batch_size,
            seed,
            out,
            curves,
        } => commands::cmd_train(
            &model,
            &dataset,
            &mode,
            config.as_deref(),
            epochs,
            batch_size,
            seed,
            &out,
            curves.as_deref(),
        ),
        Command::Sample {
            checkpoint,
            dataset,
            index,
            n,
            seed,
            out,
            png,
        } => commands::cmd_sample(&checkpoint, &dataset, index, n, seed, &out, png),
        Command::Evaluate {
            dataset,
            method,
            predictions,
            resnet_checkpoint,
            ddpm_checkpoint,
            baseline_iters,
            posterior_samples,
            seed,
            out,
            csv,
            predictions_out,
        } => commands::cmd_evaluate(
            &dataset,
            method.as_deref(),
            predictions.as_deref(),
            resnet_checkpoint.as_deref(),
            ddpm_checkpoint.as_deref(),
            baseline_iters,
            posterior_samples,
            seed,
            &out,
            csv.as_deref(),
            predictions_out.as_deref(),
        ),
        Command::Timing {
            dataset,
            resnet_checkpoint,
            ddpm_checkpoint,
            method_k,
            baseline_iters,
            posterior_samples,
            out,
        } => commands::cmd_timing(
            &dataset,
            resnet_checkpoint.as_deref(),
            ddpm_checkpoint.as_deref(),
            method_k,
            baseline_iters,
            posterior_samples,
            &out,
        ),
        Command::Figures {
            dataset,
            predictions,
            out,
            rows,
            ddpm_checkpoint,
            variability_samples,
        } => commands::cmd_figures(
            &dataset,
            &predictions,
            &out,
            rows,
            ddpm_checkpoint.as_deref(),
            variability_samples,
        ),
        Command::Report { run_dir, out } => commands::cmd_report(&run_dir, &out),
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(common::exit_code_for(&err))
        }
    }
}
