mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vadkit::data_io::{generate_synthetic, load_split, DatasetManifest, Split};
use vadkit::evaluation::{global_auc, global_roc, run_ablation, write_roc_csv, AblationSpec};
use vadkit::scoring::{read_scores_csv, score_clips, score_gap, write_scores_csv, ClipGap};
use vadkit::trainer::{resume, Checkpoint, FINAL_CHECKPOINT, TRAIN_LOG};

use config::{keys_help, RunConfig};

/// Files every command leaves in its run directory.
const OUTPUTS_FILE: &str = "outputs.json";
const SCORES_FILE: &str = "scores.csv";

#[derive(Parser)]
#[command(name = "vadkit", version, about = "Frame-prediction video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic moving-shapes benchmark.
    #[command(after_help = keys_help())]
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        test_clips: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a predictor on the normal clips of a dataset.
    #[command(after_help = keys_help())]
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write per-frame PSNR and anomaly scores of a split.
    #[command(after_help = keys_help())]
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Predictions per warm-up; 1 is standard sliding-window scoring.
        #[arg(long)]
        q: Option<usize>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Global AUC and score gap of a scores file, or an ablation grid.
    #[command(after_help = keys_help())]
    Eval {
        #[command(flatten)]
        common: Common,
        /// Scores CSV written by `score`.
        #[arg(long, required_unless_present = "ablation")]
        scores: Option<PathBuf>,
        /// `full` for the four-variant grid, or a comma list of
        /// single_path, multi_path, no_nt, full.
        #[arg(long, requires = "data")]
        ablation: Option<String>,
        /// Dataset for the ablation runs.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated seeds for the ablation runs.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[command(flatten)]
        train: TrainFlags,
    },
}

#[derive(Args)]
struct Common {
    /// Run directory for every artifact.
    #[arg(long)]
    out: PathBuf,
    /// Flat TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Frames per prediction window.
    #[arg(long)]
    p: Option<usize>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda_nt: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, String> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        set(&mut c.seed, self.seed);
        set(&mut c.input_len, self.p);
        Ok(c)
    }
}

impl TrainFlags {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.batch_size, self.batch);
        set(&mut c.learning_rate, self.lr);
        set(&mut c.weight_decay, self.wd);
        set(&mut c.epochs, self.epochs);
        set(&mut c.lambda_nt, self.lambda_nt);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

type Outcome = Result<Vec<String>, String>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (out, result) = match &cli.command {
        Command::Synth { common, .. }
        | Command::Train { common, .. }
        | Command::Score { common, .. }
        | Command::Eval { common, .. } => (common.out.clone(), run(&cli.command)),
    };
    match result {
        Ok(files) => {
            if let Err(e) = write_outputs(&out, files) {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: &Command) -> Outcome {
    match command {
        Command::Synth { common, clips, test_clips, frames } => {
            let mut c = common.resolve()?;
            set(&mut c.num_clips, *clips);
            set(&mut c.num_test_clips, *test_clips);
            set(&mut c.frames_per_clip, *frames);
            cmd_synth(&c, &common.out)
        }
        Command::Train { common, data, train, resume } => {
            let mut c = common.resolve()?;
            train.apply(&mut c);
            cmd_train(&c, data, resume.as_deref(), &common.out)
        }
        Command::Score { common, data, checkpoint, q, split } => {
            let mut c = common.resolve()?;
            set(&mut c.q, *q);
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(format!("unknown split {other}; use train or test")),
            };
            cmd_score(&c, data, checkpoint, split, &common.out)
        }
        Command::Eval { common, scores, ablation, data, seeds, train } => {
            let mut c = common.resolve()?;
            train.apply(&mut c);
            match (ablation, data) {
                (Some(grid), Some(data)) => cmd_ablation(&c, data, grid, seeds, &common.out),
                _ => cmd_eval(scores.as_deref().expect("clap enforces"), &common.out),
            }
        }
    }
}

fn create_dir(out: &Path) -> Result<(), String> {
    std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    std::fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

fn write_outputs(out: &Path, mut files: Vec<String>) -> Result<(), String> {
    files.sort();
    files.dedup();
    write_json(&out.join(OUTPUTS_FILE), &files)
}

fn cmd_synth(c: &RunConfig, out: &Path) -> Outcome {
    let manifest = generate_synthetic(&c.synth(), out).map_err(|e| e.to_string())?;
    println!("{}", out.join(vadkit::data_io::MANIFEST_FILE).display());
    let mut files = vec![vadkit::data_io::MANIFEST_FILE.to_string()];
    for split in [Split::Train, Split::Test] {
        for id in manifest.clips(split) {
            files.push(format!("{}/{id}/", split.dir_name()));
        }
    }
    Ok(files)
}

fn cmd_train(c: &RunConfig, data: &Path, from: Option<&Path>, out: &Path) -> Outcome {
    let manifest = DatasetManifest::load(data).map_err(|e| e.to_string())?;
    create_dir(out)?;
    write_json(&out.join("config.json"), c)?;
    let state = match from {
        Some(path) => {
            let mut state = Checkpoint::load(path).map_err(|e| e.to_string())?;
            state.config.epochs = c.epochs;
            state
        }
        None => Checkpoint::fresh(c.network(), c.train()).map_err(|e| e.to_string())?,
    };
    let trained = resume(&manifest, state, Some(out), &mut |r| {
        eprintln!(
            "epoch {:>3}  total {:.5}  int {:.5}  gd {:.5}  nt {:.5}",
            r.epoch, r.loss.total, r.loss.intensity, r.loss.gradient, r.loss.noise_tolerance
        );
    })
    .map_err(|e| e.to_string())?;
    println!("{}", out.join(FINAL_CHECKPOINT).display());
    let mut files = vec!["config.json".into(), TRAIN_LOG.into(), FINAL_CHECKPOINT.into()];
    files.extend((1..=trained.epoch).map(vadkit::trainer::epoch_checkpoint_name));
    Ok(files)
}

fn cmd_score(c: &RunConfig, data: &Path, checkpoint: &Path, split: Split, out: &Path) -> Outcome {
    let manifest = DatasetManifest::load(data).map_err(|e| e.to_string())?;
    let state = Checkpoint::load(checkpoint).map_err(|e| e.to_string())?;
    let clips = load_split(&manifest, split).map_err(|e| e.to_string())?;
    create_dir(out)?;
    let timer = Instant::now();
    let series = score_clips(&state.network, &clips, c.q).map_err(|e| e.to_string())?;
    let seconds = timer.elapsed().as_secs_f64();
    let frames: usize = series.iter().map(|s| s.len()).sum();
    eprintln!(
        "scored {frames} frames with q={} in {seconds:.2}s ({:.2} ms per frame)",
        c.q,
        1e3 * seconds / frames.max(1) as f64
    );
    let path = out.join(SCORES_FILE);
    write_scores_csv(&path, &series).map_err(|e| e.to_string())?;
    println!("{}", path.display());
    Ok(vec![SCORES_FILE.into()])
}

#[derive(Serialize)]
struct EvalReport {
    auc: f64,
    delta_s: f64,
    frames: usize,
    clips: Vec<ClipGap>,
}

fn cmd_eval(scores: &Path, out: &Path) -> Outcome {
    let series = read_scores_csv(scores).map_err(|e| e.to_string())?;
    if series.iter().any(|s| s.labels.is_none()) {
        return Err(format!("{} has clips without frame labels", scores.display()));
    }
    create_dir(out)?;
    let gap = score_gap("scores", &series).map_err(|e| e.to_string())?;
    let report = EvalReport {
        auc: global_auc(&series).map_err(|e| e.to_string())?,
        delta_s: gap.delta_s,
        frames: series.iter().map(|s| s.len()).sum(),
        clips: gap.clips,
    };
    write_json(&out.join("eval.json"), &report)?;
    let roc = global_roc(&series).map_err(|e| e.to_string())?;
    write_roc_csv(&out.join("roc.csv"), &roc).map_err(|e| e.to_string())?;
    println!("auc {:.4}  delta_s {:.4}", report.auc, report.delta_s);
    Ok(vec!["eval.json".into(), "roc.csv".into()])
}

fn parse_grid(grid: &str) -> Result<Vec<AblationSpec>, String> {
    if grid == "full" {
        return Ok(AblationSpec::grid());
    }
    grid.split(',')
        .map(|name| {
            AblationSpec::grid()
                .into_iter()
                .find(|s| s.name == name.trim())
                .ok_or_else(|| format!("unknown ablation variant {name}"))
        })
        .collect()
}

fn cmd_ablation(c: &RunConfig, data: &Path, grid: &str, seeds: &[u64], out: &Path) -> Outcome {
    let specs = parse_grid(grid)?;
    let manifest = DatasetManifest::load(data).map_err(|e| e.to_string())?;
    create_dir(out)?;
    let timings = Mutex::new(Vec::new());
    let report = run_ablation(&manifest, &c.network(), &c.train(), &specs, seeds, &|run, t| {
        eprintln!("{} seed {}: auc {:.4} delta_s {:.4} ({:.0}s)", run.variant, run.seed, run.auc, run.delta_s, t.wall_time_s);
        timings.lock().unwrap().push(t.clone());
    })
    .map_err(|e| e.to_string())?;
    let mut timings = timings.into_inner().unwrap();
    timings.sort_by_key(|t| (specs.iter().position(|s| s.name == t.variant), t.seed));
    report.write_json(&out.join("ablation.json")).map_err(|e| e.to_string())?;
    report.write_csv(&out.join("ablation.csv")).map_err(|e| e.to_string())?;
    write_json(&out.join("ablation_timing.json"), &timings)?;
    for v in &report.variants {
        println!("{:<12} mean auc {:.4}", v.spec.name, v.mean_auc);
    }
    Ok(vec!["ablation.json".into(), "ablation.csv".into(), "ablation_timing.json".into()])
}
