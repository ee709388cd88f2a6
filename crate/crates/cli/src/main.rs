use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blowup_core::groundstate::{solve_ground_state, RadialMesh};
use blowup_core::harness::{read_fit_rows, run_blowup_experiment, Context, ExperimentConfig, RateFitReport, StopReason};
use blowup_core::suite::{load_or_solve_rho, run_suite, Suite};
use blowup_core::{Error, GridSpec};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "blowup-lab", version, about = "Critical-mass blow-up experiments for the inhomogeneous NLS")]
struct Cli {
    /// Directory for cached ground states and ρ profiles.
    #[arg(long, global = true, env = "BLOWUP_LAB_CACHE", default_value = "blowup-lab-cache")]
    cache: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for Q and ρ, cache them and print the ground-state metadata.
    Groundstate {
        #[arg(long)]
        dim: usize,
        /// Grid points per axis for the cached sample of Q.
        #[arg(long, default_value_t = 512)]
        points: usize,
        #[arg(long, default_value_t = 16.0)]
        half_width: f64,
    },
    /// Run a blow-up experiment from a JSON configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the configuration.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a verification suite.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Dimensions to check; both when omitted.
        #[arg(long)]
        dim: Option<usize>,
        /// Where to write the JUnit XML report.
        #[arg(long)]
        junit: Option<PathBuf>,
    },
    /// Fit blow-up rates to a modulation CSV written by `run`.
    Fit {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        e0: f64,
        /// κ of the model, for the predicted ε decay exponent.
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        #[arg(long, default_value_t = 1.0)]
        decades: f64,
        /// Samples with smaller λ are left out.
        #[arg(long, default_value_t = 0.0)]
        lambda_min: f64,
    },
}

enum Outcome {
    Pass,
    Fail,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_config_error(e: &Error) -> bool {
    e.is_config() || matches!(e, Error::Io(_) | Error::Csv(_) | Error::Format(_))
}

fn dispatch(cli: &Cli) -> Result<Outcome, Error> {
    match &cli.command {
        Command::Groundstate { dim, points, half_width } => groundstate(&cli.cache, *dim, *points, *half_width),
        Command::Run { config, output } => run(&cli.cache, config, output.as_deref()),
        Command::Verify { suite, dim, junit } => verify(&cli.cache, suite, *dim, junit.as_deref()),
        Command::Fit {
            trajectory,
            dim,
            e0,
            kappa,
            decades,
            lambda_min,
        } => fit(trajectory, *dim, *e0, *kappa, *decades, *lambda_min),
    }
}

fn groundstate(cache: &Path, dim: usize, points: usize, half_width: f64) -> Result<Outcome, Error> {
    let grid = GridSpec::new(dim, points, half_width)?;
    let bundle = solve_ground_state(dim, RadialMesh::default())?;
    let path = bundle.write_cache(cache, &grid)?;
    load_or_solve_rho(&bundle, Some(cache))?;
    let mut meta = bundle.metadata();
    meta["cache"] = serde_json::json!(path.display().to_string());
    println!("{}", serde_json::to_string_pretty(&meta)?);
    Ok(Outcome::Pass)
}

fn run(cache: &Path, config: &Path, output: Option<&Path>) -> Result<Outcome, Error> {
    let text = std::fs::read_to_string(config)?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(dir) = output {
        cfg.output_dir = Some(dir.to_path_buf());
    }
    cfg.validate()?;
    let ctx = Context::with_cache(cfg.dim, Some(cache))?;
    let result = run_blowup_experiment(&cfg, &ctx)?;
    println!("{}", serde_json::to_string_pretty(&result.summary)?);
    let completed = matches!(
        result.summary.stop,
        StopReason::LambdaFloor | StopReason::Rebound | StopReason::SMax
    );
    if !completed {
        eprintln!("run stopped early: {:?}", result.summary.stop);
    }
    if let Some(e) = &result.summary.fit_error {
        eprintln!("rate fit failed: {e}");
    }
    Ok(if completed && result.summary.fit.is_some() {
        Outcome::Pass
    } else {
        Outcome::Fail
    })
}

fn verify(cache: &Path, suite: &str, dim: Option<usize>, junit: Option<&Path>) -> Result<Outcome, Error> {
    let suite: Suite = suite.parse()?;
    let dims = match dim {
        Some(d) if (1..=2).contains(&d) => vec![d],
        Some(d) => return Err(Error::UnsupportedDimension(d)),
        None => vec![1, 2],
    };
    let mut all_passed = true;
    let mut xml = String::new();
    for d in dims {
        let report = run_suite(suite, d, Some(cache))?;
        print!("{}", report.summary());
        all_passed &= report.passed();
        xml.push_str(&report.to_junit_xml());
    }
    if let Some(path) = junit {
        // Several suites are wrapped in one <testsuites> element.
        let body: String = xml
            .lines()
            .filter(|l| !l.starts_with("<?xml"))
            .map(|l| format!("{l}\n"))
            .collect();
        std::fs::write(
            path,
            format!("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<testsuites>\n{body}</testsuites>\n"),
        )?;
    }
    Ok(if all_passed { Outcome::Pass } else { Outcome::Fail })
}

fn fit(path: &Path, dim: usize, e0: f64, kap: f64, decades: f64, lambda_min: f64) -> Result<Outcome, Error> {
    if !(e0 > 0.0) {
        return Err(Error::Config(format!("e0 must be positive, got {e0}")));
    }
    let bundle = solve_ground_state(dim, RadialMesh::default())?;
    let rows = read_fit_rows(path)?;
    match RateFitReport::from_rows(&rows, bundle.virial_sq(), e0, kap, decades, lambda_min) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(Outcome::Pass)
        }
        Err(e) => {
            eprintln!("fit failed: {e}");
            Ok(Outcome::Fail)
        }
    }
}
