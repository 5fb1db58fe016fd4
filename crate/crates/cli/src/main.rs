//! `geoflow`: registration and network-geometry pipelines from the command line.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure (an
//! `error.txt` of `key=value` lines is left in the output directory).

mod commands;
mod selftest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "geoflow", version, about = "Diffeomorphic registration and network geometry diagnostics")]
pub struct Cli {
    /// File of `key=value` lines supplying flags; explicit flags win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// LDDMM registration of two images.
    Register(RegisterArgs),
    /// Geodesic shooting registration (optimises the initial momentum).
    Shoot(ImageArgs),
    /// Metamorphosis: deformation plus an intensity source.
    Morph(MorphArgs),
    /// Train a small network.
    NetTrain(NetArgs),
    /// Influence of every training point on test losses.
    NetInfluence(InfluenceArgs),
    /// Two-level training with validation-driven sample weights.
    NetReweight(ReweightArgs),
    /// Curve-length complexity of a residual network.
    NetComplexity(ComplexityArgs),
    /// Singular values of a network's input-output Jacobian.
    NetIsometry(IsometryArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ImageArgs {
    /// Source image (.pgm or raw GEOF1).
    #[arg(long)]
    pub source: PathBuf,
    /// Target image (.pgm or raw GEOF1).
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Kernel length scale in grid cells.
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1)]
    pub kernel_power: u32,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    /// Relative energy decrease that counts as converged.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub image: ImageArgs,
}

#[derive(Args, Debug, Clone)]
pub struct MorphArgs {
    #[command(flatten)]
    pub image: ImageArgs,
    /// Variance of the intensity source; small values approach pure LDDMM.
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    /// Alternate between the velocity and source blocks.
    #[arg(long)]
    pub alternate: bool,
}

#[derive(Args, Debug, Clone)]
pub struct NetArgs {
    /// Training CSV: feature columns, then `label`.
    #[arg(long)]
    pub train: PathBuf,
    /// Hidden layer widths, comma separated (empty for a linear model).
    #[arg(long, default_value = "")]
    pub hidden: String,
    #[arg(long, value_parser = ["bce", "squared"], default_value = "bce")]
    pub loss: String,
    #[arg(long)]
    pub no_bias: bool,
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    /// Gradient norm that counts as converged.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct InfluenceArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Test CSV whose losses the influences refer to.
    #[arg(long, alias = "test-csv")]
    pub test: PathBuf,
    /// Hessian damping; defaults to 1e-3 · trace(H)/d.
    #[arg(long)]
    pub damping: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct ReweightArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Clean validation CSV.
    #[arg(long, alias = "valid-csv")]
    pub valid: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub outer_iters: usize,
    #[arg(long, default_value_t = 0.5)]
    pub inner_lr: f64,
}

#[derive(Args, Debug, Clone)]
pub struct ComplexityArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Number of residual blocks (width = feature count).
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
}

#[derive(Args, Debug, Clone)]
pub struct IsometryArgs {
    /// Layer widths including input and output, comma separated.
    #[arg(long, default_value = "4,4,4")]
    pub widths: String,
    /// Use residual blocks (all widths equal).
    #[arg(long)]
    pub residual: bool,
    /// Probe input, comma separated; zeros by default.
    #[arg(long)]
    pub probe: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SelftestArgs {
    /// Also write the results to `selftest.csv` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical { out: Option<PathBuf>, kind: &'static str, message: String },
}

impl From<geoflow::GeoError> for Failure {
    fn from(e: geoflow::GeoError) -> Self {
        if e.is_numerical() {
            Failure::Numerical { out: None, kind: kind_of(&e), message: e.to_string() }
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn kind_of(e: &geoflow::GeoError) -> &'static str {
    use geoflow::GeoError::*;
    match e {
        NonFinite { .. } => "non_finite",
        NotConverged { .. } => "not_converged",
        SolveFailed { .. } => "solve_failed",
        Diverged { .. } => "diverged",
        _ => "error",
    }
}

/// Splices `--key value` pairs from the config file into `argv` for every
/// key not already given on the command line.
fn merge_config(argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = if let Some(p) = argv[pos].strip_prefix("--config=") {
        p.to_string()
    } else {
        argv.get(pos + 1).cloned().ok_or("--config needs a path")?
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let given: Vec<&str> = argv.iter().filter_map(|a| a.strip_prefix("--")).map(|a| a.split('=').next().unwrap()).collect();
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("{path}:{}: expected key=value", n + 1))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        if k == "config" {
            return Err(format!("{path}:{}: nested config", n + 1));
        }
        if given.contains(&k.as_str()) {
            continue;
        }
        match v {
            "true" => extra.push(format!("--{k}")),
            "false" => {}
            _ => extra.push(format!("--{k}={v}")),
        }
    }
    // Flags must follow the subcommand name to reach its parser.
    let mut out = argv;
    out.extend(extra);
    Ok(out)
}

pub fn write_error(out: &Path, kind: &str, message: &str) {
    let _ = std::fs::create_dir_all(out);
    let body = format!("status=error\nkind={kind}\nmessage={}\n", message.replace('\n', " "));
    let _ = std::fs::write(out.join("error.txt"), body);
}

fn out_dir(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::Register(a) => Some(&a.image.out),
        Command::Shoot(a) => Some(&a.out),
        Command::Morph(a) => Some(&a.image.out),
        Command::NetTrain(a) => Some(&a.out),
        Command::NetInfluence(a) => Some(&a.net.out),
        Command::NetReweight(a) => Some(&a.net.out),
        Command::NetComplexity(a) => Some(&a.net.out),
        Command::NetIsometry(a) => Some(&a.out),
        Command::Selftest(a) => a.out.as_deref(),
    }
}

fn main() -> ExitCode {
    let argv = match merge_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical { out, kind, message }) => {
            eprintln!("numerical failure ({kind}): {message}");
            if let Some(dir) = out.as_deref().or(out_dir(&cli.command)) {
                write_error(dir, kind, &message);
            }
            ExitCode::from(2)
        }
    }
}
