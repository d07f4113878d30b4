use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use affordgrasp::pipeline::{self, PipelineConfig};
use affordgrasp::scene::{self, ExpectedOutcome};
use affordgrasp::Error;

/// Task-oriented grasp selection on RGB-D scenes.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on one scene directory.
    Run {
        #[command(flatten)]
        scene: SceneArgs,
        /// Report JSON path; the heatmap PNG is written beside it.
        #[arg(long)]
        out: PathBuf,
        /// Also write the ranked grasp list here.
        #[arg(long)]
        ranked: Option<PathBuf>,
    },
    /// Evaluate a suite of fixture directories (or a single scene).
    Eval {
        #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
        suite: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for per-scene reports and `suite.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write only the affordance heatmap PNG and its JSON sidecar.
    Heatmap {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the bundled synthetic suite and failure fixtures.
    GenFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Defaults to the task in the scene's expected.json.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

const EXIT_USAGE: u8 = 2;
const EXIT_BACKEND: u8 = 3;

fn error_exit(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::BackendUnavailable(_) => ExitCode::from(EXIT_BACKEND),
        _ => ExitCode::from(EXIT_USAGE),
    }
}

fn load_config(path: Option<&Path>) -> affordgrasp::Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn resolve_task(args: &SceneArgs) -> affordgrasp::Result<String> {
    if let Some(t) = &args.task {
        return Ok(t.clone());
    }
    let path = args.scene.join(scene::EXPECTED_FILE);
    if !path.is_file() {
        return Err(Error::Usage(format!("--task is required ({} has no {})", args.scene.display(), scene::EXPECTED_FILE)));
    }
    let expected: ExpectedOutcome = scene::read_json(&path)?;
    Ok(expected.task)
}

fn run_one(args: &SceneArgs) -> affordgrasp::Result<pipeline::PipelineOutcome> {
    let config = load_config(args.config.as_deref())?;
    let task = resolve_task(args)?;
    pipeline::run_scene(&args.scene, &task, &config)
}

fn execute(cli: Cli) -> affordgrasp::Result<u8> {
    match cli.command {
        Command::Run { scene, out, ranked } => {
            let mut outcome = run_one(&scene)?;
            pipeline::write_outputs(&mut outcome, &out)?;
            if let Some(path) = ranked {
                scene::write_atomic(&path, &scene::to_pretty_json(&outcome.report.ranked)?)?;
            }
            print!("{}", outcome.report.summary());
            Ok(outcome.report.exit_code() as u8)
        }
        Command::Heatmap { scene, out } => {
            let config = load_config(scene.config.as_deref())?;
            let outcome = run_one(&scene)?;
            match (&outcome.heatmap, &outcome.report.decomposition) {
                (Some(h), Some(d)) => {
                    pipeline::write_heatmap(h, d, &config.heatmap, &out)?;
                    println!("wrote {}", out.display());
                    Ok(0)
                }
                _ => {
                    print!("{}", outcome.report.summary());
                    Ok(outcome.report.exit_code().max(4) as u8)
                }
            }
        }
        Command::Eval { suite, scene, config, out } => {
            let config = load_config(config.as_deref())?;
            let dir = suite.or(scene).expect("clap enforces one of --suite/--scene");
            let report = pipeline::run_suite(&dir, &config, out.as_deref())?;
            if let Some(out) = &out {
                scene::write_atomic(&out.join("suite.json"), &scene::to_pretty_json(&report)?)?;
            }
            print!("{}", report.summary());
            Ok(if report.all_passed() { 0 } else { 4 })
        }
        Command::GenFixtures { out, seed } => {
            let written = scene::write_bundled(&out, seed)?;
            println!("wrote {} fixtures under {}", written.len(), out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => error_exit(&e),
    }
}
