//! The `cpaem` command-line interface.
//!
//! Single command per process; every run that writes an output file also
//! writes a `<output>.run.json` sidecar with the fully resolved argument
//! vector, and `cpaem replay <sidecar>` re-executes it. Exit codes: 1 for
//! usage and I/O errors, 2 for numerical failures (including a failed
//! `oracle-check`), 3 for resource limits.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::em::{em_fit, EmConfig};
use crate::error::{Error, Result};
use crate::geometry::enumerate_partition;
use crate::inference::{log_marginal, map_latent, posterior_logdensity, posterior_summary, InferenceContext};
use crate::network::{random_network, GenerativeNetwork, NoiseModel};
use crate::{io, oracle};

/// Exact inference and EM training for piecewise-affine generative networks.
#[derive(Debug, Parser)]
#[command(name = "cpaem", version, about)]
pub struct Cli {
    /// RNG seed for anything stochastic (initialization, datasets, oracles).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for internal parallelism (default: CPAEM_THREADS env
    /// var, then hardware parallelism). Results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Latent bounding-box radius; default 8·max √diag(Σ_z).
    #[arg(long, global = true)]
    pub bounding_radius: Option<f64>,

    /// Chatty progress output on stderr.
    #[arg(long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

/// Dataset kinds for `gen-data`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    /// Radius-1 circle with additive Gaussian noise.
    Circle,
    /// Sinusoid over a uniform abscissa (parameters are a reconstruction,
    /// not ground truth).
    Wave,
    /// Samples from a model file: z ~ N(0, Σ_z), x = g(z) + ε.
    FromModel,
}

/// Quantities `oracle-check` can verify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckWhat {
    /// Marginal likelihood p(x) against Monte-Carlo integration.
    Marginal,
    /// Posterior mean against self-normalized importance sampling.
    Posterior,
    /// Posterior mean and second moments against importance sampling.
    Moments,
    /// Prior region masses against code-match frequencies.
    Mass,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a randomly initialized network file.
    GenNet {
        /// Architecture, e.g. "1-8-2 relu" or "1-4-4-2 leaky_relu:0.2":
        /// dash-separated widths (latent first), then the hidden activation.
        spec: String,
        /// Output model JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Isotropic observation noise variance stored in the model file.
        #[arg(long, default_value_t = 0.01)]
        var_x: f64,
        /// Isotropic latent prior variance stored in the model file.
        #[arg(long, default_value_t = 1.0)]
        var_z: f64,
        /// Omit the noise block from the model file.
        #[arg(long)]
        no_noise: bool,
    },
    /// Generate a toy dataset CSV.
    GenData {
        /// Dataset kind.
        #[arg(value_enum)]
        kind: DataKind,
        /// Number of observations.
        #[arg(long)]
        n: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Noise standard deviation (circle and wave).
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
        /// Wave amplitude.
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        /// Wave angular frequency.
        #[arg(long, default_value_t = 3.0)]
        frequency: f64,
        /// Model file (required for from-model).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Enumerate the latent partition of a model and dump it as JSON.
    Partition {
        /// Model JSON path.
        #[arg(long)]
        model: PathBuf,
        /// Output JSON path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Region-count cap.
        #[arg(long, default_value_t = 100_000)]
        max_regions: usize,
    },
    /// Exact log-marginal likelihood log p(x) per observation.
    Marginal {
        /// Model JSON path.
        #[arg(long)]
        model: PathBuf,
        /// Dataset CSV (one observation per row).
        #[arg(long, required_unless_present = "grid")]
        data: Option<PathBuf>,
        /// The dataset CSV has a header row to skip.
        #[arg(long)]
        header: bool,
        /// Instead of a dataset, evaluate on a grid "lo,hi,count" per
        /// observation axis (D ≤ 2) and emit x…,logp rows.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Isotropic observation variance when the model file has no noise block.
        #[arg(long, default_value_t = 0.01)]
        var_x: f64,
        /// Isotropic prior variance when the model file has no noise block.
        #[arg(long, default_value_t = 1.0)]
        var_z: f64,
    },
    /// Exact posterior report for one observation: per-region weights,
    /// posterior moments, MAP point, and optionally a latent density grid.
    Posterior {
        /// Model JSON path.
        #[arg(long)]
        model: PathBuf,
        /// Observation, comma-separated, e.g. "0.1,0.2".
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        /// Write a latent-grid density CSV here (S ≤ 2).
        #[arg(long)]
        grid_out: Option<PathBuf>,
        /// Grid points per latent axis.
        #[arg(long, default_value_t = 201)]
        grid_n: usize,
        /// Isotropic observation variance when the model file has no noise block.
        #[arg(long, default_value_t = 0.01)]
        var_x: f64,
        /// Isotropic prior variance when the model file has no noise block.
        #[arg(long, default_value_t = 1.0)]
        var_z: f64,
    },
    /// Fit a model to data by exact EM.
    TrainEm {
        /// Initial model JSON path.
        #[arg(long)]
        model: PathBuf,
        /// Training dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// The dataset CSV has a header row to skip.
        #[arg(long)]
        header: bool,
        /// Output path for the fitted model JSON.
        #[arg(long)]
        out: PathBuf,
        /// Output path for the NLL trace CSV (iteration,nll,card_omega,wall_ms).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Maximum EM iterations.
        #[arg(long, default_value_t = 50)]
        iters: usize,
        /// Stop when the NLL improves by less than this.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Comma-separated parameter groups to update.
        #[arg(long, default_value = "biases,weights,sigma_x")]
        update: String,
        /// Learn a full (non-isotropic) observation covariance.
        #[arg(long)]
        full_sigma_x: bool,
        /// Region-count cap per enumeration.
        #[arg(long, default_value_t = 100_000)]
        max_regions: usize,
        /// Isotropic observation variance when the model file has no noise block.
        #[arg(long, default_value_t = 0.01)]
        var_x: f64,
        /// Isotropic prior variance when the model file has no noise block.
        #[arg(long, default_value_t = 1.0)]
        var_z: f64,
    },
    /// Cross-check analytical quantities against brute-force oracles.
    OracleCheck {
        /// Model JSON path.
        #[arg(long)]
        model: PathBuf,
        /// Observation, comma-separated (not needed for --what mass).
        #[arg(long, allow_hyphen_values = true)]
        x: Option<String>,
        /// Which quantity to verify.
        #[arg(long, value_enum)]
        what: CheckWhat,
        /// Oracle sample count.
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        /// Isotropic observation variance when the model file has no noise block.
        #[arg(long, default_value_t = 0.01)]
        var_x: f64,
        /// Isotropic prior variance when the model file has no noise block.
        #[arg(long, default_value_t = 1.0)]
        var_z: f64,
    },
    /// Re-execute a run from its sidecar JSON.
    Replay {
        /// A `<output>.run.json` sidecar written by a previous run.
        sidecar: PathBuf,
    },
}

/// A run's resolved configuration, echoed next to every output file.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunSidecar {
    /// The subcommand name.
    pub command: String,
    /// The fully resolved argument vector (defaults filled in); replaying
    /// it reproduces the run.
    pub argv: Vec<String>,
}

/// Restore the default SIGPIPE disposition so that piping output into a
/// pager that exits early (`cpaem posterior ... | head`) terminates the
/// process quietly, as other command-line tools do, instead of panicking
/// on the first write to the closed pipe.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

/// Entry point: parse, dispatch, translate errors to exit codes.
pub fn main_entry() -> i32 {
    reset_sigpipe();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Configure the rayon pool and dispatch the parsed command.
pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.or_else(|| {
        std::env::var("CPAEM_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
    });
    if let Some(t) = threads {
        if t > 0 {
            // Ignore the error if a pool already exists (repeat calls in-process).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
    }
    dispatch(&cli)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenNet { spec, out, var_x, var_z, no_noise } => {
            cmd_gen_net(cli, spec, out, *var_x, *var_z, *no_noise)
        }
        Command::GenData { kind, n, out, noise_std, amplitude, frequency, model } => {
            cmd_gen_data(cli, *kind, *n, out, *noise_std, *amplitude, *frequency, model.as_deref())
        }
        Command::Partition { model, out, max_regions } => {
            cmd_partition(cli, model, out.as_deref(), *max_regions)
        }
        Command::Marginal { model, data, header, grid, out, var_x, var_z } => cmd_marginal(
            cli,
            model,
            data.as_deref(),
            *header,
            grid.as_deref(),
            out.as_deref(),
            *var_x,
            *var_z,
        ),
        Command::Posterior { model, x, grid_out, grid_n, var_x, var_z } => {
            cmd_posterior(cli, model, x, grid_out.as_deref(), *grid_n, *var_x, *var_z)
        }
        Command::TrainEm {
            model,
            data,
            header,
            out,
            trace,
            iters,
            tol,
            update,
            full_sigma_x,
            max_regions,
            var_x,
            var_z,
        } => cmd_train_em(
            cli,
            model,
            data,
            *header,
            out,
            trace.as_deref(),
            *iters,
            *tol,
            update,
            *full_sigma_x,
            *max_regions,
            *var_x,
            *var_z,
        ),
        Command::OracleCheck { model, x, what, n, var_x, var_z } => {
            cmd_oracle_check(cli, model, x.as_deref(), *what, *n, *var_x, *var_z)
        }
        Command::Replay { sidecar } => cmd_replay(sidecar),
    }
}

fn verbose_log(cli: &Cli, msg: impl AsRef<str>) {
    if cli.verbose {
        eprintln!("[cpaem] {}", msg.as_ref());
    }
}

/// The noise model a command should use: the model file's own block when
/// present, otherwise isotropic defaults from the flags.
fn resolve_noise(
    net: &GenerativeNetwork,
    from_file: Option<NoiseModel>,
    var_x: f64,
    var_z: f64,
) -> Result<NoiseModel> {
    match from_file {
        Some(n) => Ok(n),
        None => NoiseModel::isotropic(net.output_dim(), var_x, net.latent_dim(), var_z),
    }
}

fn resolve_radius(cli: &Cli, noise: &NoiseModel) -> f64 {
    cli.bounding_radius
        .unwrap_or_else(|| 8.0 * noise.sigma_z().diagonal().map(f64::sqrt).max())
}

/// Output paths must land in an existing directory — validated before any
/// heavy compute starts.
fn validate_out_path(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(parent) = parent {
        if !parent.is_dir() {
            return Err(Error::InvalidInput(format!(
                "output directory {} does not exist",
                parent.display()
            )));
        }
    }
    Ok(())
}

fn global_argv(cli: &Cli) -> Vec<String> {
    let mut argv = vec!["--seed".into(), cli.seed.to_string()];
    if let Some(t) = cli.threads {
        argv.extend(["--threads".into(), t.to_string()]);
    }
    if let Some(r) = cli.bounding_radius {
        argv.extend(["--bounding-radius".into(), io::format_float(r)]);
    }
    if cli.verbose {
        argv.push("--verbose".into());
    }
    argv
}

/// Write `<output>.run.json` next to an output file.
fn write_sidecar(out: &Path, command: &str, mut argv: Vec<String>, cli: &Cli) -> Result<()> {
    argv.extend(global_argv(cli));
    let sidecar = RunSidecar { command: command.to_string(), argv };
    let path = out.with_extension("run.json");
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_net(
    cli: &Cli,
    spec: &str,
    out: &Path,
    var_x: f64,
    var_z: f64,
    no_noise: bool,
) -> Result<()> {
    validate_out_path(out)?;
    let (dims, activation) = io::parse_net_spec(spec)?;
    let net = random_network(&dims, activation, cli.seed)?;
    let noise = if no_noise {
        None
    } else {
        Some(NoiseModel::isotropic(net.output_dim(), var_x, net.latent_dim(), var_z)?)
    };
    io::save_model(out, &net, noise.as_ref())?;
    verbose_log(cli, format!("wrote {} ({} layers)", out.display(), net.depth()));
    let mut argv = vec![
        "gen-net".to_string(),
        spec.to_string(),
        "--out".into(),
        out.display().to_string(),
        "--var-x".into(),
        io::format_float(var_x),
        "--var-z".into(),
        io::format_float(var_z),
    ];
    if no_noise {
        argv.push("--no-noise".into());
    }
    write_sidecar(out, "gen-net", argv, cli)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    cli: &Cli,
    kind: DataKind,
    n: usize,
    out: &Path,
    noise_std: f64,
    amplitude: f64,
    frequency: f64,
    model: Option<&Path>,
) -> Result<()> {
    validate_out_path(out)?;
    let data = match kind {
        DataKind::Circle => io::circle_dataset(n, noise_std, cli.seed)?,
        DataKind::Wave => io::wave_dataset(n, amplitude, frequency, noise_std, cli.seed)?,
        DataKind::FromModel => {
            let model = model.ok_or_else(|| {
                Error::InvalidInput("gen-data from-model requires --model".into())
            })?;
            let (net, noise) = io::load_model(model)?;
            let noise = resolve_noise(&net, noise, 0.01, 1.0)?;
            io::model_dataset(&net, &noise, n, cli.seed)?
        }
    };
    io::write_csv(out, &data)?;
    verbose_log(cli, format!("wrote {} ({} rows)", out.display(), data.len()));
    let mut argv = vec![
        "gen-data".to_string(),
        match kind {
            DataKind::Circle => "circle",
            DataKind::Wave => "wave",
            DataKind::FromModel => "from-model",
        }
        .to_string(),
        "--n".into(),
        n.to_string(),
        "--out".into(),
        out.display().to_string(),
        "--noise-std".into(),
        io::format_float(noise_std),
        "--amplitude".into(),
        io::format_float(amplitude),
        "--frequency".into(),
        io::format_float(frequency),
    ];
    if let Some(m) = model {
        argv.extend(["--model".into(), m.display().to_string()]);
    }
    write_sidecar(out, "gen-data", argv, cli)
}

fn cmd_partition(cli: &Cli, model: &Path, out: Option<&Path>, max_regions: usize) -> Result<()> {
    if let Some(out) = out {
        validate_out_path(out)?;
    }
    let (net, noise) = io::load_model(model)?;
    let noise = resolve_noise(&net, noise, 0.01, 1.0)?;
    let radius = resolve_radius(cli, &noise);
    let partition = enumerate_partition(&net, radius, max_regions)?;
    verbose_log(
        cli,
        format!("{} regions at bounding radius {radius}", partition.len()),
    );
    let json = io::partition_to_json(&partition)?;
    match out {
        Some(path) => {
            std::fs::write(path, json + "\n")?;
            let argv = vec![
                "partition".to_string(),
                "--model".into(),
                model.display().to_string(),
                "--out".into(),
                path.display().to_string(),
                "--max-regions".into(),
                max_regions.to_string(),
            ];
            write_sidecar(path, "partition", argv, cli)?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

/// Parse a grid spec "lo,hi,count".
fn parse_grid(grid: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = grid.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidInput(format!(
            "grid spec must be \"lo,hi,count\", got {grid:?}"
        )));
    }
    let lo = parts[0]
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidInput(format!("bad grid bound {:?}", parts[0])))?;
    let hi = parts[1]
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidInput(format!("bad grid bound {:?}", parts[1])))?;
    let count = parts[2]
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::InvalidInput(format!("bad grid count {:?}", parts[2])))?;
    if !(hi > lo) || count < 2 {
        return Err(Error::InvalidInput(
            "grid needs hi > lo and at least two points".into(),
        ));
    }
    Ok((lo, hi, count))
}

/// The prior mass outside the bounding box — the truncation error bound on
/// every reported p(x).
fn tail_mass(ctx: &InferenceContext) -> f64 {
    (1.0 - ctx.params.iter().map(|p| p.prior_mass).sum::<f64>()).max(0.0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_marginal(
    cli: &Cli,
    model: &Path,
    data: Option<&Path>,
    header: bool,
    grid: Option<&str>,
    out: Option<&Path>,
    var_x: f64,
    var_z: f64,
) -> Result<()> {
    if let Some(out) = out {
        validate_out_path(out)?;
    }
    let (net, noise) = io::load_model(model)?;
    let noise = resolve_noise(&net, noise, var_x, var_z)?;
    let radius = resolve_radius(cli, &noise);
    let partition = enumerate_partition(&net, radius, 100_000)?;
    let ctx = InferenceContext::new(partition, &noise)?;
    eprintln!(
        "prior tail mass outside bounding box (error bound on p(x)): {:.3e}",
        tail_mass(&ctx)
    );

    let rows: Vec<DVector<f64>> = match (grid, data) {
        (Some(grid), _) => {
            let d = net.output_dim();
            if d > 2 {
                return Err(Error::InvalidInput(
                    "--grid is only available for D ≤ 2".into(),
                ));
            }
            let (lo, hi, count) = parse_grid(grid)?;
            let axis: Vec<f64> = (0..count)
                .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
                .collect();
            let mut rows = Vec::new();
            if d == 1 {
                for &x1 in &axis {
                    let x = DVector::from_column_slice(&[x1]);
                    let lp = log_marginal(&ctx, &x)?;
                    rows.push(DVector::from_column_slice(&[x1, lp]));
                }
            } else {
                for &x1 in &axis {
                    for &x2 in &axis {
                        let x = DVector::from_column_slice(&[x1, x2]);
                        let lp = log_marginal(&ctx, &x)?;
                        rows.push(DVector::from_column_slice(&[x1, x2, lp]));
                    }
                }
            }
            rows
        }
        (None, Some(data_path)) => {
            let data = io::read_csv(data_path, header)?;
            if data[0].len() != net.output_dim() {
                return Err(Error::InvalidInput(format!(
                    "dataset has {} columns, model outputs {}",
                    data[0].len(),
                    net.output_dim()
                )));
            }
            let mut rows = Vec::with_capacity(data.len());
            for x in &data {
                rows.push(DVector::from_column_slice(&[log_marginal(&ctx, x)?]));
            }
            rows
        }
        (None, None) => unreachable!("clap enforces --data unless --grid is given"),
    };

    let csv = io::csv_to_string(&rows);
    match out {
        Some(path) => {
            std::fs::write(path, csv)?;
            let mut argv = vec![
                "marginal".to_string(),
                "--model".into(),
                model.display().to_string(),
            ];
            if let Some(d) = data {
                argv.extend(["--data".into(), d.display().to_string()]);
            }
            if header {
                argv.push("--header".into());
            }
            if let Some(g) = grid {
                argv.extend(["--grid".into(), g.to_string()]);
            }
            argv.extend([
                "--out".into(),
                path.display().to_string(),
                "--var-x".into(),
                io::format_float(var_x),
                "--var-z".into(),
                io::format_float(var_z),
            ]);
            write_sidecar(path, "marginal", argv, cli)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_posterior(
    cli: &Cli,
    model: &Path,
    x_text: &str,
    grid_out: Option<&Path>,
    grid_n: usize,
    var_x: f64,
    var_z: f64,
) -> Result<()> {
    if let Some(out) = grid_out {
        validate_out_path(out)?;
    }
    let (net, noise) = io::load_model(model)?;
    let noise = resolve_noise(&net, noise, var_x, var_z)?;
    let x = io::parse_vector(x_text)?;
    if x.len() != net.output_dim() {
        return Err(Error::InvalidInput(format!(
            "--x has {} components, model outputs {}",
            x.len(),
            net.output_dim()
        )));
    }
    let radius = resolve_radius(cli, &noise);
    let partition = enumerate_partition(&net, radius, 100_000)?;
    let ctx = InferenceContext::new(partition, &noise)?;
    eprintln!(
        "prior tail mass outside bounding box (error bound on p(x)): {:.3e}",
        tail_mass(&ctx)
    );

    let summary = posterior_summary(&ctx, &x)?;
    let map = map_latent(&ctx, &x)?;
    println!("log_marginal {}", io::format_float(summary.log_marginal));
    println!(
        "posterior_mean {}",
        summary
            .mean
            .iter()
            .map(|v| io::format_float(*v))
            .collect::<Vec<_>>()
            .join(",")
    );
    println!(
        "map_latent {}",
        map.z
            .iter()
            .map(|v| io::format_float(*v))
            .collect::<Vec<_>>()
            .join(",")
    );
    println!("regions {}", ctx.len());
    println!("code,mass,log_kappa,mu");
    for (i, stats) in summary.regions.iter().enumerate() {
        println!(
            "{},{},{},{}",
            ctx.params[i].code,
            io::format_float(stats.mass),
            io::format_float(stats.log_kappa),
            stats
                .mu
                .iter()
                .map(|v| io::format_float(*v))
                .collect::<Vec<_>>()
                .join(";")
        );
    }

    if let Some(path) = grid_out {
        let s = net.latent_dim();
        if s > 2 {
            return Err(Error::InvalidInput(
                "--grid-out is only available for S ≤ 2".into(),
            ));
        }
        if grid_n < 2 {
            return Err(Error::InvalidInput("--grid-n must be ≥ 2".into()));
        }
        let axis: Vec<f64> = (0..grid_n)
            .map(|i| -radius + 2.0 * radius * i as f64 / (grid_n - 1) as f64)
            .collect();
        let mut rows = Vec::new();
        if s == 1 {
            for &z1 in &axis {
                let z = DVector::from_column_slice(&[z1]);
                let dens = posterior_logdensity(&ctx, &net, &z, &x)?.exp();
                rows.push(DVector::from_column_slice(&[z1, dens]));
            }
        } else {
            for &z1 in &axis {
                for &z2 in &axis {
                    let z = DVector::from_column_slice(&[z1, z2]);
                    let dens = posterior_logdensity(&ctx, &net, &z, &x)?.exp();
                    rows.push(DVector::from_column_slice(&[z1, z2, dens]));
                }
            }
        }
        io::write_csv(path, &rows)?;
        let argv = vec![
            "posterior".to_string(),
            "--model".into(),
            model.display().to_string(),
            "--x".into(),
            x_text.to_string(),
            "--grid-out".into(),
            path.display().to_string(),
            "--grid-n".into(),
            grid_n.to_string(),
            "--var-x".into(),
            io::format_float(var_x),
            "--var-z".into(),
            io::format_float(var_z),
        ];
        write_sidecar(path, "posterior", argv, cli)?;
    }
    Ok(())
}

/// Parse the `--update` list into EM config flags.
fn parse_update_flags(update: &str, cfg: &mut EmConfig) -> Result<()> {
    cfg.update_biases = false;
    cfg.update_weights = false;
    cfg.update_sigma_x = false;
    cfg.update_sigma_z = false;
    for token in update.split(',') {
        match token.trim() {
            "biases" => cfg.update_biases = true,
            "weights" => cfg.update_weights = true,
            "sigma_x" => cfg.update_sigma_x = true,
            "sigma_z" => cfg.update_sigma_z = true,
            "" => {}
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown update group {other:?} (expected biases, weights, sigma_x, sigma_z)"
                )))
            }
        }
    }
    if !(cfg.update_biases || cfg.update_weights || cfg.update_sigma_x || cfg.update_sigma_z) {
        return Err(Error::InvalidInput("--update selects no parameter group".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_em(
    cli: &Cli,
    model: &Path,
    data_path: &Path,
    header: bool,
    out: &Path,
    trace_path: Option<&Path>,
    iters: usize,
    tol: f64,
    update: &str,
    full_sigma_x: bool,
    max_regions: usize,
    var_x: f64,
    var_z: f64,
) -> Result<()> {
    validate_out_path(out)?;
    if let Some(t) = trace_path {
        validate_out_path(t)?;
    }
    let (net, noise) = io::load_model(model)?;
    let noise = resolve_noise(&net, noise, var_x, var_z)?;
    let data = io::read_csv(data_path, header)?;
    if data[0].len() != net.output_dim() {
        return Err(Error::InvalidInput(format!(
            "dataset has {} columns, model outputs {}",
            data[0].len(),
            net.output_dim()
        )));
    }
    let mut cfg = EmConfig {
        max_iters: iters,
        tol,
        bounding_radius: Some(resolve_radius(cli, &noise)),
        max_regions,
        isotropic_sigma_x: !full_sigma_x,
        ..EmConfig::default()
    };
    parse_update_flags(update, &mut cfg)?;

    let fit = em_fit(&net, &noise, &data, &cfg)?;
    io::save_model(out, &fit.net, Some(&fit.noise))?;
    if let Some(trace_path) = trace_path {
        let mut text = String::from("iteration,nll,card_omega,wall_ms\n");
        for row in &fit.trace {
            text.push_str(&format!(
                "{},{},{},{}\n",
                row.iteration,
                io::format_float(row.nll),
                row.regions,
                io::format_float(row.wall_ms)
            ));
        }
        std::fs::write(trace_path, text)?;
    }
    let first = fit.trace.first().expect("trace is never empty");
    let last = fit.trace.last().expect("trace is never empty");
    println!(
        "iterations {} regions {} nll_initial {} nll_final {} converged {}",
        last.iteration,
        last.regions,
        io::format_float(first.nll),
        io::format_float(last.nll),
        fit.converged
    );
    verbose_log(cli, format!("wrote fitted model to {}", out.display()));

    let mut argv = vec![
        "train-em".to_string(),
        "--model".into(),
        model.display().to_string(),
        "--data".into(),
        data_path.display().to_string(),
    ];
    if header {
        argv.push("--header".into());
    }
    argv.extend(["--out".into(), out.display().to_string()]);
    if let Some(t) = trace_path {
        argv.extend(["--trace".into(), t.display().to_string()]);
    }
    argv.extend([
        "--iters".into(),
        iters.to_string(),
        "--tol".into(),
        io::format_float(tol),
        "--update".into(),
        update.to_string(),
    ]);
    if full_sigma_x {
        argv.push("--full-sigma-x".into());
    }
    argv.extend([
        "--max-regions".into(),
        max_regions.to_string(),
        "--var-x".into(),
        io::format_float(var_x),
        "--var-z".into(),
        io::format_float(var_z),
    ]);
    write_sidecar(out, "train-em", argv, cli)
}

struct CheckLine {
    name: String,
    analytic: f64,
    estimate: f64,
    stderr: f64,
}

impl CheckLine {
    fn passes(&self) -> bool {
        (self.analytic - self.estimate).abs() <= 3.0 * self.stderr
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_oracle_check(
    cli: &Cli,
    model: &Path,
    x_text: Option<&str>,
    what: CheckWhat,
    n: usize,
    var_x: f64,
    var_z: f64,
) -> Result<()> {
    let (net, noise) = io::load_model(model)?;
    let noise = resolve_noise(&net, noise, var_x, var_z)?;
    let radius = resolve_radius(cli, &noise);
    let partition = enumerate_partition(&net, radius, 100_000)?;
    let ctx = InferenceContext::new(partition, &noise)?;
    let s = net.latent_dim();

    let need_x = |x_text: Option<&str>| -> Result<DVector<f64>> {
        let text = x_text.ok_or_else(|| {
            Error::InvalidInput(format!("--what {what:?} requires --x").to_lowercase())
        })?;
        let x = io::parse_vector(text)?;
        if x.len() != net.output_dim() {
            return Err(Error::InvalidInput(format!(
                "--x has {} components, model outputs {}",
                x.len(),
                net.output_dim()
            )));
        }
        Ok(x)
    };

    let mut lines: Vec<CheckLine> = Vec::new();
    match what {
        CheckWhat::Marginal => {
            let x = need_x(x_text)?;
            let exact = log_marginal(&ctx, &x)?.exp();
            let est = oracle::mc_marginal(&net, &noise, &x, n, cli.seed)?;
            lines.push(CheckLine {
                name: "p(x)".into(),
                analytic: exact,
                estimate: est.value,
                stderr: est.stderr,
            });
        }
        CheckWhat::Posterior | CheckWhat::Moments => {
            let x = need_x(x_text)?;
            let summary = posterior_summary(&ctx, &x)?;
            let est = oracle::is_posterior_moments(&net, &noise, &x, n, cli.seed)?;
            for i in 0..s {
                lines.push(CheckLine {
                    name: format!("mean[{i}]"),
                    analytic: summary.mean[i],
                    estimate: est.value[i],
                    stderr: est.stderr[i],
                });
            }
            if what == CheckWhat::Moments {
                for i in 0..s {
                    for j in 0..s {
                        lines.push(CheckLine {
                            name: format!("second[{i},{j}]"),
                            analytic: summary.second[(i, j)],
                            estimate: est.value[s + i * s + j],
                            stderr: est.stderr[s + i * s + j],
                        });
                    }
                }
            }
            eprintln!("importance sampling ESS: {:.1}", est.ess);
        }
        CheckWhat::Mass => {
            // The five regions with the largest prior mass.
            let mut order: Vec<usize> = (0..ctx.len()).collect();
            order.sort_by(|&a, &b| {
                ctx.params[b]
                    .prior_mass
                    .partial_cmp(&ctx.params[a].prior_mass)
                    .expect("masses are finite")
            });
            for &i in order.iter().take(5) {
                let est = oracle::mc_region_mass(
                    &net,
                    &noise,
                    &ctx.params[i].code,
                    n,
                    cli.seed ^ i as u64,
                )?;
                lines.push(CheckLine {
                    name: format!("mass[{}]", ctx.params[i].code),
                    analytic: ctx.params[i].prior_mass,
                    estimate: est.value,
                    stderr: est.stderr,
                });
            }
        }
    }

    let mut all_pass = true;
    for line in &lines {
        let ok = line.passes();
        all_pass &= ok;
        println!(
            "{} analytic {} oracle {} stderr {} {}",
            line.name,
            io::format_float(line.analytic),
            io::format_float(line.estimate),
            io::format_float(line.stderr),
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!("overall {}", if all_pass { "PASS" } else { "FAIL" });
    if !all_pass {
        return Err(Error::Numerical(
            "oracle check failed at 3 standard errors".into(),
        ));
    }
    Ok(())
}

fn cmd_replay(sidecar: &Path) -> Result<()> {
    let text = std::fs::read_to_string(sidecar).map_err(|e| {
        Error::InvalidInput(format!("cannot read {}: {e}", sidecar.display()))
    })?;
    let sidecar: RunSidecar = serde_json::from_str(&text)?;
    if sidecar.argv.first().map(String::as_str) == Some("replay") {
        return Err(Error::InvalidInput("refusing to replay a replay".into()));
    }
    let mut argv = vec!["cpaem".to_string()];
    argv.extend(sidecar.argv.iter().cloned());
    let cli = Cli::try_parse_from(&argv)
        .map_err(|e| Error::InvalidInput(format!("sidecar argv does not parse: {e}")))?;
    dispatch(&cli)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_spec_parsing() {
        assert_eq!(parse_grid("-2,2,5").unwrap(), (-2.0, 2.0, 5));
        assert!(parse_grid("2,-2,5").is_err());
        assert!(parse_grid("0,1,1").is_err());
        assert!(parse_grid("0,1").is_err());
        assert!(parse_grid("a,1,5").is_err());
    }

    #[test]
    fn update_flag_parsing() {
        let mut cfg = EmConfig::default();
        parse_update_flags("biases,weights,sigma_x,sigma_z", &mut cfg).unwrap();
        assert!(cfg.update_biases && cfg.update_weights && cfg.update_sigma_x && cfg.update_sigma_z);
        parse_update_flags("biases", &mut cfg).unwrap();
        assert!(cfg.update_biases && !cfg.update_weights && !cfg.update_sigma_x);
        assert!(parse_update_flags("sigma_y", &mut cfg).is_err());
        assert!(parse_update_flags("", &mut cfg).is_err());
    }

    #[test]
    fn cli_parses_the_documented_invocations() {
        for argv in [
            vec!["cpaem", "gen-net", "1-8-2 relu", "--out", "m.json", "--seed", "7"],
            vec!["cpaem", "gen-data", "circle", "--n", "100", "--out", "d.csv", "--seed", "3"],
            vec!["cpaem", "partition", "--model", "m.json"],
            vec!["cpaem", "marginal", "--model", "m.json", "--data", "d.csv"],
            vec!["cpaem", "marginal", "--model", "m.json", "--grid", "-2,2,41"],
            vec!["cpaem", "posterior", "--model", "m.json", "--x", "0.1,0.2"],
            vec![
                "cpaem", "train-em", "--model", "m.json", "--data", "d.csv", "--out", "t.json",
                "--trace", "nll.csv", "--iters", "30",
                "--update", "sigma_x,biases,weights",
            ],
            vec![
                "cpaem", "oracle-check", "--model", "m.json", "--x", "0.1,0.2", "--what",
                "marginal", "--n", "1000000", "--seed", "7",
            ],
            vec!["cpaem", "replay", "out.run.json"],
        ] {
            Cli::try_parse_from(&argv).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
        }
        // --data is required without --grid.
        assert!(Cli::try_parse_from(["cpaem", "marginal", "--model", "m.json"]).is_err());
    }
}
