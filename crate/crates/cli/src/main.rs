//! `tdd` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format, 3 numeric failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tdd_core::eval::{roc_series, separability_stats, AucReport, Separability};
use tdd_core::exec::init_threads;
use tdd_core::hsi::load_cube;
use tdd_core::sim::{simulate_traces, write_dataset};
use tdd_core::{
    auc_report, grx, infer, normalize_cube, train, BinaryMask, Checkpoint, Error, ErrorClass, Exec,
    HsiCube, ScoreMap, TrainConfig,
};

const CONTAINER_FORMAT: &str = "hsi-bsq-f32le/1";
const CHECKPOINT_FORMAT: &str = "tb-f32le/1+ckpt-json/1";
const CSV_FORMAT: &str = "tdd-csv/1";

#[derive(Parser)]
#[command(name = "tdd", version, about = "One-step hyperspectral anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a training dataset from a background cube.
    Simulate(SimulateArgs),
    /// Train a detector on a background cube.
    Train(TrainArgs),
    /// Score a cube with a trained checkpoint.
    Infer(InferArgs),
    /// Score a cube with the global RX baseline.
    Grx(GrxArgs),
    /// Evaluate a score map against ground truth.
    Eval(EvalArgs),
    /// Merge AUC CSV files and check the derived-metric identities.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    cube: PathBuf,
    /// Output directory for samples and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Training config; only its `sim` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long, default_value_t = 100)]
    n_samples: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cube: PathBuf,
    /// Checkpoint path or stem.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Score-map container path.
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the training patch size.
    #[arg(long)]
    patch_size: Option<usize>,
    /// Defaults to the patch size.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct GrxArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// AUC CSV files written by `eval`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Merged CSV path.
    #[arg(long)]
    out: PathBuf,
}

type Result<T> = std::result::Result<T, Error>;

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |e| Error::Data(format!("{context}: {e}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

/// `<stem>.prov.json` next to an output; container suffixes are stripped.
fn provenance_path(out: &Path) -> PathBuf {
    let s = out.to_string_lossy();
    let stem = [".hsi.json", ".hsi.bin", ".ckpt.json", ".tb.json", ".tb.bin", ".csv"]
        .iter()
        .find_map(|suf| s.strip_suffix(suf))
        .unwrap_or(&s);
    PathBuf::from(format!("{stem}.prov.json"))
}

fn write_provenance(path: &Path, seed: Option<u64>, outputs: &[PathBuf]) -> Result<()> {
    let prov = json!({
        "command_line": std::env::args().collect::<Vec<_>>(),
        "seed": seed,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "formats": {
            "container": CONTAINER_FORMAT,
            "checkpoint": CHECKPOINT_FORMAT,
            "csv": CSV_FORMAT,
        },
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&prov).expect("provenance serializes");
    write_file(path, text.as_bytes())
}

/// 8-bit binary PGM scaled by the map's min and max.
fn pgm(map: &ScoreMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.normalized().iter().map(|v| (v * 255.0).round() as u8));
    out
}

fn preview_path(out: &Path) -> PathBuf {
    let s = out.to_string_lossy();
    let stem = s.strip_suffix(".hsi.json").or_else(|| s.strip_suffix(".hsi.bin")).unwrap_or(&s);
    PathBuf::from(format!("{stem}.pgm"))
}

fn save_map(map: &ScoreMap, out: &Path, seed: Option<u64>) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    map.save(out)?;
    let preview = preview_path(out);
    write_file(&preview, &pgm(map))?;
    write_provenance(&provenance_path(out), seed, &[out.to_path_buf(), preview])
}

fn load_normalized(path: &Path) -> Result<HsiCube> {
    Ok(normalize_cube(&load_cube(path)?))
}

fn stem_name(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or("").to_string()
}

fn simulate(a: SimulateArgs, exec: Exec) -> Result<()> {
    let mut sim = match &a.config {
        Some(p) => TrainConfig::load(p)?.sim,
        None => Default::default(),
    };
    if let Some(p) = a.patch_size {
        sim.patch_size = p;
    }
    sim.validate()?;
    let cube = load_normalized(&a.cube)?;
    let traces = simulate_traces(&cube, &sim, a.n_samples, a.seed, exec)?;
    fs::create_dir_all(&a.out).map_err(io_err(format!("creating {}", a.out.display())))?;
    let manifest = write_dataset(&a.out, &traces, a.seed)?;
    write_provenance(&a.out.join("provenance.json"), Some(a.seed), &[manifest])
}

fn train_cmd(a: TrainArgs, exec: Exec) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.patch_size {
        cfg.sim.patch_size = p;
    }
    if let Some(n) = a.n_samples {
        cfg.n_samples = n;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let cube = load_normalized(&a.cube)?;
    let source = a.cube.display().to_string();
    let run = match train(&cube, &cfg, &source, exec) {
        Ok(run) => run,
        Err(Error::NonFiniteLoss { step, last_good }) => {
            let (stem, _) = Checkpoint::paths(&a.out);
            let rescue = PathBuf::from(format!("{}.last_good", stem.display()));
            last_good.save(&rescue)?;
            eprintln!("last finite checkpoint written to {}", rescue.display());
            return Err(Error::NonFiniteLoss { step, last_good });
        }
        Err(e) => return Err(e),
    };
    run.checkpoint.save(&a.out)?;
    let (stem, sidecar) = Checkpoint::paths(&a.out);
    let losses = PathBuf::from(format!("{}.loss.csv", stem.display()));
    let mut csv = String::from("step,loss\n");
    for (i, l) in run.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.6}\n"));
    }
    write_file(&losses, csv.as_bytes())?;
    write_provenance(&provenance_path(&sidecar), Some(cfg.seed), &[sidecar, losses])
}

fn infer_cmd(a: InferArgs, exec: Exec) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let p = a.patch_size.unwrap_or(ckpt.meta.patch_size);
    let cube = load_normalized(&a.cube)?;
    let map = infer(&cube, &ckpt, p, a.stride.unwrap_or(p), exec)?;
    save_map(&map, &a.out, Some(ckpt.seed))
}

fn grx_cmd(a: GrxArgs) -> Result<()> {
    let map = grx(&load_cube(&a.cube)?, None)?;
    save_map(&map, &a.out, None)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let scores = ScoreMap::load(&a.scores)?;
    let gt = BinaryMask::load(&a.gt)?;
    let series = roc_series(&scores, &gt)?;
    let report = auc_report(&series);
    let sep = separability_stats(&scores, &gt)?;
    let method = stem_name(&a.scores);
    let aucs = a.out.join("aucs.csv");
    let roc = a.out.join("roc.csv");
    let sep_path = a.out.join("separability.csv");
    write_file(
        &aucs,
        format!("{}\n{}\n", AucReport::CSV_HEADER, report.csv_row(&stem_name(&a.gt), &method)).as_bytes(),
    )?;
    write_file(&roc, series.to_csv().as_bytes())?;
    write_file(
        &sep_path,
        format!("{}\n{}\n", Separability::CSV_HEADER, sep.csv_row(&method)).as_bytes(),
    )?;
    write_provenance(&a.out.join("provenance.json"), None, &[aucs, roc, sep_path])
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let mut out = format!("{},violations\n", AucReport::CSV_HEADER);
    let mut flagged = 0;
    for path in &a.inputs {
        let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let (dataset, method, r) = AucReport::parse_csv_row(line)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let bad = r.identity_violations(5e-4, 5e-3);
            if !bad.is_empty() {
                flagged += 1;
                eprintln!("{dataset}/{method}: identity violated for {}", bad.join(", "));
            }
            out.push_str(&format!("{},{}\n", r.csv_row(&dataset, &method), bad.join(";")));
        }
    }
    write_file(&a.out, out.as_bytes())?;
    if flagged > 0 {
        eprintln!("{flagged} row(s) flagged");
    }
    write_provenance(&provenance_path(&a.out), None, std::slice::from_ref(&a.out))
}

fn threads_from_env() -> std::result::Result<usize, String> {
    match std::env::var("TDD_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("TDD_THREADS must be a non-negative integer, found {v:?}")),
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = match threads_from_env() {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    init_threads(threads);
    let exec = Exec::Parallel;
    let result = match cli.command {
        Command::Simulate(a) => simulate(a, exec),
        Command::Train(a) => train_cmd(a, exec),
        Command::Infer(a) => infer_cmd(a, exec),
        Command::Grx(a) => grx_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
