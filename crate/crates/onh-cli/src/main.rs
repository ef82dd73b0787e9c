//! `onh` — command-line driver for the ONH phenotyping pipeline:
//! phantom generation, parameter extraction, point clouds, classifier
//! training/evaluation, critical-point maps, and group statistics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use onh_core::cloud::{build_cloud, save_cloud, PointCloud};
use onh_core::criticals::{
    average_geometry, density, extract_critical_points, project_criticals, tissue_breakdown,
    write_breakdown_json, write_density_csv, TissueGrouping, DENSITY_RADIUS_UM,
};
use onh_core::frame::build_frame;
use onh_core::params::{extract_all, OnhParameters};
use onh_core::phantom::{cohort_configs, generate, generate_with_truth, CohortSpec};
use onh_core::pointnet::{auc, load_model, predict_score, save_model, train, TrainConfig};
use onh_core::stats::{summarize, write_summary_csv, write_summary_json};
use onh_core::volume::{load_volume, save_volume, LabelVolume, SeverityGroup};

/// Exit code 1: the computation itself failed; 2: usage or I/O problem.
struct CliError {
    exit: u8,
    code: String,
    message: String,
}

impl CliError {
    fn usage(code: &str, message: impl Into<String>) -> CliError {
        CliError { exit: 2, code: code.to_string(), message: message.into() }
    }

    fn compute(code: &str, message: impl Into<String>) -> CliError {
        CliError { exit: 1, code: code.to_string(), message: message.into() }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "onh", about = "Optic nerve head phenotyping pipeline", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Seed for all randomized steps.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Optional JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom cohort as .onhv volumes.
    Phantom(PhantomArgs),
    /// Extract the geometric parameter battery to CSV.
    Params(ParamsArgs),
    /// Build a normalized point cloud (.onhpc) from a volume.
    Cloud(CloudArgs),
    /// Train the point-cloud classifier on a labeled cohort.
    Train(TrainArgs),
    /// Score a cohort with a trained model.
    Eval(EvalArgs),
    /// Critical points, average geometry projection, and density maps.
    Criticals(CriticalsArgs),
    /// Group summary statistics (ANOVA + Tukey + boxplot tables).
    Stats(StatsArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the per-group eye counts of the cohort config.
    #[arg(long)]
    per_group: Option<usize>,
    /// Also write analytic ground-truth parameters (truth.csv).
    #[arg(long)]
    truth: bool,
}

#[derive(Args)]
struct ParamsArgs {
    /// Input .onhv file or directory of volumes.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CloudArgs {
    /// Input .onhv file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output .onhpc path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of labeled .onhv volumes.
    #[arg(long)]
    data: PathBuf,
    /// Classification task, e.g. normal-mild or moderate-advanced.
    #[arg(long)]
    task: String,
    /// Output directory (model.onhpn, eval.json, config echo).
    #[arg(long)]
    out: PathBuf,
    /// Override the number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model file (.onhpn).
    #[arg(long)]
    model: PathBuf,
    /// Directory of labeled .onhv volumes.
    #[arg(long)]
    data: PathBuf,
    /// Classification task, e.g. normal-mild.
    #[arg(long)]
    task: String,
    /// Output directory (scores.csv, metrics.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CriticalsArgs {
    /// Trained model file (.onhpn).
    #[arg(long)]
    model: PathBuf,
    /// Directory of labeled .onhv volumes (the test set).
    #[arg(long)]
    data: PathBuf,
    /// Task tag recorded with the average geometry.
    #[arg(long)]
    task: String,
    /// Output directory (density.csv, breakdown.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Directory of labeled .onhv volumes.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (summary.csv, summary.json).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // ignore failure: the global pool may already exist
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let result = match &cli.cmd {
        Cmd::Phantom(args) => cmd_phantom(&cli, args),
        Cmd::Params(args) => cmd_params(args),
        Cmd::Cloud(args) => cmd_cloud(args),
        Cmd::Train(args) => cmd_train(&cli, args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Criticals(args) => cmd_criticals(args),
        Cmd::Stats(args) => cmd_stats(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let json = serde_json::json!({ "error": { "code": e.code, "message": e.message } });
            eprintln!("{json}");
            ExitCode::from(e.exit)
        }
    }
}

// ---- shared plumbing ------------------------------------------------------

fn load_config_or_default<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::usage("cli/config-read", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage("cli/config-parse", format!("{}: {e}", p.display())))
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::usage("cli/create-dir", format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| CliError::usage("cli/write", format!("{}: {e}", path.display())))
}

/// Echo the effective configuration into the output directory so a run
/// is reproducible from its artifacts alone.
fn echo_config<T: Serialize>(dir: &Path, name: &str, cfg: &T) -> Result<(), CliError> {
    let json = serde_json::to_vec_pretty(cfg)
        .map_err(|e| CliError::compute("cli/config-echo", e.to_string()))?;
    write_file(&dir.join(name), &json)
}

/// Timestamps live only here so every other artifact stays
/// byte-identical across reruns.
fn append_run_log(dir: &Path, line: &str) -> Result<(), CliError> {
    use std::io::Write;
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("run.log"))
        .map_err(|e| CliError::usage("cli/run-log", e.to_string()))?;
    writeln!(f, "{ts} {line}").map_err(|e| CliError::usage("cli/run-log", e.to_string()))
}

fn load_volume_checked(path: &Path) -> Result<LabelVolume, CliError> {
    if !path.exists() {
        return Err(CliError::usage("cli/missing-input", format!("no such file: {}", path.display())));
    }
    load_volume(path).map_err(|e| CliError::compute("volume/load", format!("{}: {e}", path.display())))
}

/// All .onhv volumes in a directory, sorted by file name for
/// deterministic output ordering.
fn load_volume_dir(dir: &Path) -> Result<Vec<(PathBuf, LabelVolume)>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::usage(
            "cli/missing-input",
            format!("no such directory: {}", dir.display()),
        ));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::usage("cli/read-dir", format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "onhv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::usage(
            "cli/missing-input",
            format!("no .onhv volumes in {}", dir.display()),
        ));
    }
    paths
        .into_iter()
        .map(|p| load_volume_checked(&p).map(|v| (p, v)))
        .collect()
}

fn parse_task(task: &str) -> Result<(SeverityGroup, SeverityGroup), CliError> {
    let mut parts = task.splitn(2, '-');
    let a = parts.next().and_then(SeverityGroup::from_str_opt);
    let b = parts.next().and_then(SeverityGroup::from_str_opt);
    match (a, b) {
        (Some(a), Some(b)) if a != b => Ok((a, b)),
        _ => Err(CliError::usage(
            "cli/bad-task",
            format!("task must be two distinct groups like normal-mild, got '{task}'"),
        )),
    }
}

/// Labeled clouds for the two task groups, one per volume that carries a
/// matching severity.
fn task_clouds(
    volumes: &[(PathBuf, LabelVolume)],
    task: (SeverityGroup, SeverityGroup),
) -> Result<Vec<PointCloud>, CliError> {
    let mut clouds = Vec::new();
    for (path, v) in volumes {
        let Ok(group) = v.severity() else { continue };
        if group != task.0 && group != task.1 {
            continue;
        }
        let frame = build_frame(v)
            .map_err(|e| CliError::compute("frame/build", format!("{}: {e}", path.display())))?;
        let cloud = build_cloud(v, &frame)
            .map_err(|e| CliError::compute("cloud/build", format!("{}: {e}", path.display())))?;
        clouds.push(cloud);
    }
    if clouds.is_empty() {
        return Err(CliError::compute("cli/empty-task", "no volumes match the task groups"));
    }
    Ok(clouds)
}

// ---- subcommands ----------------------------------------------------------

fn cmd_phantom(cli: &Cli, args: &PhantomArgs) -> CliResult {
    let mut spec: CohortSpec = load_config_or_default(&cli.config)?;
    spec.seed = cli.seed;
    if let Some(n) = args.per_group {
        spec.n_normal = n;
        spec.n_mild = n;
        spec.n_moderate = n;
        spec.n_advanced = n;
    }
    ensure_dir(&args.out)?;
    echo_config(&args.out, "phantom.config.json", &spec)?;
    let mut truth_rows = Vec::new();
    for (cfg, group) in cohort_configs(&spec) {
        let id = cfg
            .subject
            .as_ref()
            .map(|s| s.id.clone())
            .unwrap_or_else(|| "phantom".to_string());
        if args.truth {
            let (volume, truth) = generate_with_truth(&cfg)
                .map_err(|e| CliError::compute("phantom/generate", format!("{id}: {e}")))?;
            save_volume(&volume, args.out.join(format!("{id}.onhv")))
                .map_err(|e| CliError::compute("volume/save", format!("{id}: {e}")))?;
            truth_rows.push(format!("{id},{},{}", group.as_str(), truth.csv_row()));
        } else {
            let volume = generate(&cfg)
                .map_err(|e| CliError::compute("phantom/generate", format!("{id}: {e}")))?;
            save_volume(&volume, args.out.join(format!("{id}.onhv")))
                .map_err(|e| CliError::compute("volume/save", format!("{id}: {e}")))?;
        }
    }
    if args.truth {
        let mut csv = format!("id,group,{}\n", OnhParameters::csv_header());
        for row in truth_rows {
            csv.push_str(&row);
            csv.push('\n');
        }
        write_file(&args.out.join("truth.csv"), csv.as_bytes())?;
    }
    append_run_log(&args.out, "phantom")
}

fn cmd_params(args: &ParamsArgs) -> CliResult {
    let volumes = if args.input.is_dir() {
        load_volume_dir(&args.input)?
    } else {
        vec![(args.input.clone(), load_volume_checked(&args.input)?)]
    };
    let mut csv = format!("id,group,{}\n", OnhParameters::csv_header());
    let mut diagnostics = Vec::new();
    for (path, v) in &volumes {
        let id = v
            .subject_meta
            .as_ref()
            .map(|m| m.id.clone())
            .unwrap_or_else(|| path.file_stem().unwrap_or_default().to_string_lossy().into_owned());
        let group = v.severity().map(|g| g.as_str().to_string()).unwrap_or_default();
        let (params, diags) = extract_all(v);
        csv.push_str(&format!("{id},{group},{}\n", params.csv_row()));
        for d in diags {
            diagnostics.push(serde_json::json!({
                "id": id,
                "parameter": d.parameter,
                "message": d.message,
            }));
        }
    }
    write_file(&args.out, csv.as_bytes())?;
    if !diagnostics.is_empty() {
        let path = args.out.with_extension("diagnostics.json");
        let json = serde_json::to_vec_pretty(&diagnostics)
            .map_err(|e| CliError::compute("cli/diagnostics", e.to_string()))?;
        write_file(&path, &json)?;
    }
    Ok(())
}

fn cmd_cloud(args: &CloudArgs) -> CliResult {
    let volume = load_volume_checked(&args.input)?;
    let frame = build_frame(&volume).map_err(|e| CliError::compute("frame/build", e.to_string()))?;
    let cloud = build_cloud(&volume, &frame).map_err(|e| CliError::compute("cloud/build", e.to_string()))?;
    save_cloud(&cloud, &args.out).map_err(|e| CliError::compute("cloud/save", e.to_string()))
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> CliResult {
    let task = parse_task(&args.task)?;
    let mut cfg: TrainConfig = load_config_or_default(&cli.config)?;
    cfg.seed = cli.seed;
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    let volumes = load_volume_dir(&args.data)?;
    let clouds = task_clouds(&volumes, task)?;
    let (model, report) =
        train(&clouds, &cfg).map_err(|e| CliError::compute("pointnet/train", e.to_string()))?;
    ensure_dir(&args.out)?;
    echo_config(&args.out, "train.config.json", &cfg)?;
    save_model(&model, &args.out.join("model.onhpn"))
        .map_err(|e| CliError::compute("pointnet/save", e.to_string()))?;
    let json = serde_json::to_vec_pretty(&report)
        .map_err(|e| CliError::compute("pointnet/report", e.to_string()))?;
    write_file(&args.out.join("eval.json"), &json)?;
    append_run_log(&args.out, &format!("train {}", args.task))
}

fn cmd_eval(args: &EvalArgs) -> CliResult {
    let task = parse_task(&args.task)?;
    if !args.model.exists() {
        return Err(CliError::usage(
            "cli/missing-input",
            format!("no such file: {}", args.model.display()),
        ));
    }
    let model = load_model(&args.model).map_err(|e| CliError::compute("pointnet/load", e.to_string()))?;
    let volumes = load_volume_dir(&args.data)?;
    let clouds = task_clouds(&volumes, task)?;
    let mut csv = String::from("eye_id,group,score,prediction\n");
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for cloud in &clouds {
        let score = predict_score(&model, cloud)
            .map_err(|e| CliError::compute("pointnet/forward", format!("{}: {e}", cloud.eye_id)))?;
        let group = cloud.label.expect("task-filtered clouds are labeled");
        let predicted = if score > 0.0 { task.1 } else { task.0 };
        csv.push_str(&format!(
            "{},{},{score},{}\n",
            cloud.eye_id,
            group.as_str(),
            predicted.as_str()
        ));
        scores.push(score);
        labels.push(u8::from(group == task.1));
    }
    let auc_value = auc(&scores, &labels).map_err(|e| CliError::compute("pointnet/auc", e.to_string()))?;
    ensure_dir(&args.out)?;
    write_file(&args.out.join("scores.csv"), csv.as_bytes())?;
    let metrics = serde_json::json!({ "task": args.task, "n": scores.len(), "auc": auc_value });
    write_file(
        &args.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)
            .map_err(|e| CliError::compute("cli/metrics", e.to_string()))?
            .as_bytes(),
    )?;
    append_run_log(&args.out, &format!("eval {}", args.task))
}

fn cmd_criticals(args: &CriticalsArgs) -> CliResult {
    let task = parse_task(&args.task)?;
    if !args.model.exists() {
        return Err(CliError::usage(
            "cli/missing-input",
            format!("no such file: {}", args.model.display()),
        ));
    }
    let model = load_model(&args.model).map_err(|e| CliError::compute("pointnet/load", e.to_string()))?;
    let volumes = load_volume_dir(&args.data)?;
    let clouds = task_clouds(&volumes, task)?;
    let sets = clouds
        .iter()
        .map(|c| extract_critical_points(&model, c))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::compute("criticals/extract", e.to_string()))?;
    let task_volumes: Vec<LabelVolume> = volumes
        .iter()
        .filter(|(_, v)| v.severity().is_ok_and(|g| g == task.0 || g == task.1))
        .map(|(_, v)| v.clone())
        .collect();
    let geo = average_geometry(&task_volumes, &args.task)
        .map_err(|e| CliError::compute("criticals/geometry", e.to_string()))?;
    let mut projected = project_criticals(&sets, &geo)
        .map_err(|e| CliError::compute("criticals/project", e.to_string()))?;
    density(&mut projected, DENSITY_RADIUS_UM);
    let breakdown = tissue_breakdown(&sets, &TissueGrouping::default())
        .map_err(|e| CliError::compute("criticals/breakdown", e.to_string()))?;
    ensure_dir(&args.out)?;
    let mut csv = Vec::new();
    write_density_csv(&projected, &mut csv)
        .map_err(|e| CliError::compute("criticals/density-csv", e.to_string()))?;
    write_file(&args.out.join("density.csv"), &csv)?;
    let mut json = Vec::new();
    write_breakdown_json(&breakdown, &mut json)
        .map_err(|e| CliError::compute("criticals/breakdown-json", e.to_string()))?;
    write_file(&args.out.join("breakdown.json"), &json)?;
    append_run_log(&args.out, &format!("criticals {}", args.task))
}

fn cmd_stats(args: &StatsArgs) -> CliResult {
    let volumes = load_volume_dir(&args.data)?;
    let mut eyes = Vec::new();
    for (_, v) in &volumes {
        let Ok(group) = v.severity() else { continue };
        let (params, _) = extract_all(v);
        eyes.push((params, group));
    }
    if eyes.is_empty() {
        return Err(CliError::compute("cli/empty-task", "no labeled volumes for statistics"));
    }
    let report = summarize(&eyes);
    ensure_dir(&args.out)?;
    let mut csv = Vec::new();
    write_summary_csv(&report, &mut csv).map_err(|e| CliError::compute("stats/csv", e.to_string()))?;
    write_file(&args.out.join("summary.csv"), &csv)?;
    let mut json = Vec::new();
    write_summary_json(&report, &mut json)
        .map_err(|e| CliError::compute("stats/json", e.to_string()))?;
    write_file(&args.out.join("summary.json"), &json)?;
    append_run_log(&args.out, "stats")
}
