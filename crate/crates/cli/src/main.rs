use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mergelens::analysis::{
    correlation_matrix_at, evaluate_behavior, load_behavior_suites, BehaviorReport,
    CorrelationMethod, Granularity,
};
use mergelens::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mergelens::merge::MergeRecipe;
use mergelens::pipeline::{
    run_pipeline, run_stage, validate_manifest, PipelineError, RunOptions, Stage,
};
use mergelens::probe::{load_probe_tasks, run_probe_suite, ProbeConfig, ProbeReport};
use mergelens::toy::{generate, save_dataset, DataSpec, ToyArchitecture};
use mergelens::Exec;

/// Merge checkpoints and compare merged models with their parents.
#[derive(Parser, Debug)]
#[command(name = "mergelens", version, about)]
struct Cli {
    /// Worker threads; 1 runs sequentially, 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Merge checkpoints with a recipe. Paths in the recipe are relative to it.
    Merge {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a synthetic dataset (.json or .csv by extension).
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train linear probes on a model's last hidden layer.
    Probe {
        #[arg(long)]
        model: PathBuf,
        /// Probe task manifest.
        #[arg(long)]
        tasks: PathBuf,
        /// Architecture JSON; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Probe training config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the checkpoint's file stem.
        #[arg(long)]
        model_id: Option<String>,
        /// Report path (.json or .csv by extension).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model's accuracy on behavior suites.
    Behave {
        #[arg(long)]
        model: PathBuf,
        /// Behavior suites file.
        #[arg(long)]
        suites: PathBuf,
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        model_id: Option<String>,
        /// Report path (.json or .csv by extension).
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate probe reports with behavior reports across models.
    Correlate {
        #[arg(long, num_args = 1.., required = true)]
        probe: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        behavior: Vec<PathBuf>,
        #[arg(long, default_value = "pearson")]
        method: CorrelationMethod,
        /// `grouped` (phenomenon by suite means) or `task` (task by task).
        #[arg(long, default_value = "grouped")]
        granularity: Granularity,
        /// Matrix path: .json, or .csv (wide; long with --long).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        long: bool,
    },
    /// Run the full pipeline, or one stage of it, from a manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; overrides the manifest's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the manifest's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run only this stage; earlier stages' outputs must exist.
        #[arg(long)]
        stage: Option<Stage>,
    },
}

/// Exit 2: bad arguments or configuration. Exit 1: the operation failed.
enum Failure {
    Usage(String),
    Stage(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Stage(m) => f.write_str(m),
        }
    }
}

fn usage(e: impl fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn stage(e: impl fmt::Display) -> Failure {
    Failure::Stage(e.to_string())
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn create_parent(path: &Path) -> Result<(), Failure> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| stage(format!("{}: {e}", dir.display()))),
        None => Ok(()),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    create_parent(path)?;
    fs::write(path, contents).map_err(|e| stage(format!("{}: {e}", path.display())))
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn exec_for(jobs: usize) -> Result<Exec, Failure> {
    if jobs == 1 {
        return Ok(Exec::Sequential);
    }
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| usage(format!("--jobs: {e}")))?;
    }
    Ok(Exec::default())
}

fn load_model(path: &Path, arch: Option<&Path>) -> Result<(Checkpoint, ToyArchitecture), Failure> {
    let model = load_checkpoint(path).map_err(usage)?;
    let arch = match arch {
        Some(p) => parse_json(p)?,
        None => ToyArchitecture::from_checkpoint(&model)
            .ok_or_else(|| {
                usage(format!(
                    "{}: no recorded architecture; pass --arch",
                    path.display()
                ))
            })?
            .map_err(usage)?,
    };
    Ok((model, arch))
}

fn model_id(given: Option<String>, path: &Path) -> String {
    given.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    })
}

fn merge(recipe_path: &Path, out: &Path, exec: Exec) -> Result<(), Failure> {
    let recipe = MergeRecipe::from_json(&read(recipe_path)?).map_err(usage)?;
    let plan = recipe.validate().map_err(usage)?;
    let dir = recipe_path.parent().unwrap_or(Path::new(""));
    let load = |p: &String| load_checkpoint(dir.join(p)).map_err(usage);
    let parents = recipe
        .parents
        .iter()
        .map(load)
        .collect::<Result<Vec<_>, _>>()?;
    let base = recipe.base.as_ref().map(load).transpose()?;
    let refs: Vec<&Checkpoint> = parents.iter().collect();
    let merged = plan.execute(&refs, base.as_ref(), exec).map_err(stage)?;
    create_parent(out)?;
    save_checkpoint(&merged, out).map_err(stage)
}

fn gen_data(spec: &Path, out: &Path) -> Result<(), Failure> {
    let spec: DataSpec = parse_json(spec)?;
    let data = generate(&spec).map_err(usage)?;
    create_parent(out)?;
    save_dataset(&data, out).map_err(stage)
}

fn correlate(
    probe: &[PathBuf],
    behavior: &[PathBuf],
    method: CorrelationMethod,
    granularity: Granularity,
    out: &Path,
    long: bool,
) -> Result<(), Failure> {
    let probe = probe
        .iter()
        .map(|p| {
            ProbeReport::from_json(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let behavior = behavior
        .iter()
        .map(|p| {
            BehaviorReport::from_json(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let m = correlation_matrix_at(
        &ProbeReport::combine(&probe),
        &BehaviorReport::combine(&behavior),
        method,
        granularity,
    );
    let text = match (is_csv(out), long) {
        (true, true) => m.to_long_csv(),
        (true, false) => m.to_wide_csv(),
        (false, _) => m.to_json(),
    };
    write(out, &text)
}

fn run(
    manifest: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    only: Option<Stage>,
    exec: Exec,
) -> Result<(), Failure> {
    let mut m = validate_manifest(manifest).map_err(usage)?;
    if let Some(s) = seed {
        m.seed = s;
    }
    let out_dir = match out.or_else(|| m.output_dir.as_ref().map(|d| m.resolve(d))) {
        Some(d) => d,
        None => return Err(usage("no output directory: pass --out or set `output_dir`")),
    };
    let options = RunOptions { out_dir, exec };
    let to_failure = |e: PipelineError| match e {
        PipelineError::Manifest(e) => usage(e),
        e => stage(e),
    };
    match only {
        Some(s) => {
            let t = run_stage(&m, &options, s).map_err(to_failure)?;
            eprintln!("{}: {:.3}s", t.stage, t.seconds);
        }
        None => {
            let report = run_pipeline(&m, &options).map_err(to_failure)?;
            for t in &report.provenance.stage_timings {
                eprintln!("{}: {:.3}s", t.stage, t.seconds);
            }
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let exec = exec_for(cli.jobs)?;
    match cli.command {
        Command::Merge { recipe, out } => merge(&recipe, &out, exec),
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Probe {
            model,
            tasks,
            arch,
            config,
            model_id: id,
            out,
        } => {
            let (ckpt, arch) = load_model(&model, arch.as_deref())?;
            let tasks = load_probe_tasks(&tasks).map_err(usage)?;
            let config: ProbeConfig = match config {
                Some(p) => parse_json(&p)?,
                None => ProbeConfig::default(),
            };
            let report =
                run_probe_suite(&model_id(id, &model), &ckpt, &arch, &tasks, &config, exec)
                    .map_err(stage)?;
            write(
                &out,
                &if is_csv(&out) {
                    report.to_csv()
                } else {
                    report.to_json()
                },
            )
        }
        Command::Behave {
            model,
            suites,
            arch,
            model_id: id,
            out,
        } => {
            let (ckpt, arch) = load_model(&model, arch.as_deref())?;
            let suites = load_behavior_suites(&suites).map_err(usage)?;
            let report = evaluate_behavior(&model_id(id, &model), &ckpt, &arch, &suites, exec)
                .map_err(stage)?;
            write(
                &out,
                &if is_csv(&out) {
                    report.to_csv()
                } else {
                    report.to_json()
                },
            )
        }
        Command::Correlate {
            probe,
            behavior,
            method,
            granularity,
            out,
            long,
        } => correlate(&probe, &behavior, method, granularity, &out, long),
        Command::Run {
            manifest,
            out,
            seed,
            stage: only,
        } => run(&manifest, out, seed, only, exec),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(match f {
                Failure::Usage(_) => 2,
                Failure::Stage(_) => 1,
            })
        }
    }
}
