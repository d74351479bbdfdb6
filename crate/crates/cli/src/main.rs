//! Command-line front end: tracking, training, evaluation, synthetic data
//! generation, gradient checking, and solver fuzzing.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error, 3 data
//! error. Log verbosity comes from `RUST_LOG`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fusemot::assoc::{
    random_instance, read_instance, solve_brute_force, solve_exact, write_instance,
};
use fusemot::config::{DropoutSection, RunConfig};
use fusemot::error::Error;
use fusemot::gradsuite;
use fusemot::ingest::{
    generate_synthetic, load_dataset_dir, parse_labels, save_dataset, write_tracks,
    ScenarioConfig,
};
use fusemot::metrics::{GtBox, HypBox, MetricReport, MetricTotals, SequenceEvaluator};
use fusemot::model::{ModelOptions, TrackModel};
use fusemot::tracker::{run_sequence, train_loop, TrackerSettings, TrainSettings};

#[derive(Parser)]
#[command(name = "fusemot", version, about = "Multi-modality multi-object tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track sequences with a trained checkpoint and write KITTI-format results.
    Track(TrackArgs),
    /// Train a model on sequences with ground-truth tracks.
    Train(TrainArgs),
    /// Evaluate tracking results against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic multi-sensor dataset.
    Synth(SynthArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Fuzz the exact assignment solver against the brute-force oracle.
    LpFuzz(LpFuzzArgs),
}

#[derive(Args)]
struct TrackArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (one sequence, or subdirectories of sequences).
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for per-sequence result files.
    #[arg(long)]
    out: PathBuf,
    /// Sensor mask: none, lose-image, or lose-cloud (overrides config).
    #[arg(long)]
    mask: Option<String>,
    /// Seed override (model initialization before checkpoint load).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory with ground-truth tracks.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Epoch override.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning-rate override.
    #[arg(long)]
    lr: Option<f64>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Loss log path (defaults to <out>.log).
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of per-sequence result files (<sequence>.txt).
    #[arg(long)]
    results: PathBuf,
    /// Ground-truth dataset directory.
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario description (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; the sequence lands in a subdirectory named after
    /// the scenario.
    #[arg(long)]
    out: PathBuf,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random seeds per checked item.
    #[arg(long, default_value_t = gradsuite::DEFAULT_SEEDS)]
    seeds: u64,
    /// Maximum relative error tolerated.
    #[arg(long, default_value_t = gradsuite::DEFAULT_TOLERANCE)]
    tol: f64,
    /// Negative control: corrupt one backward rule; the check must fail.
    #[arg(long)]
    corrupt_backward: bool,
}

#[derive(Args)]
struct LpFuzzArgs {
    /// Number of random instances.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory for dumped disagreeing instances.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Re-run a previously dumped instance instead of fuzzing.
    #[arg(long)]
    replay: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Track(args) => cmd_track(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::LpFuzz(args) => cmd_lpfuzz(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::MissingKey(_) => 2,
        _ => 3,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_toml_str(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

fn parse_mask(name: &str) -> Result<DropoutSection, Error> {
    match name {
        "none" => Ok(DropoutSection::default()),
        "lose-image" => Ok(DropoutSection::lose_image()),
        "lose-cloud" => Ok(DropoutSection::lose_cloud()),
        other => Err(Error::Config(format!(
            "unknown mask {other:?}; expected none, lose-image, or lose-cloud"
        ))),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn cmd_track(args: TrackArgs) -> Result<u8, Error> {
    let cfg = load_config(&args.config)?;
    let mask = match &args.mask {
        Some(m) => {
            let mask = parse_mask(m)?;
            log::info!("mask schedule override: {m}");
            mask
        }
        None => cfg.dropout.clone(),
    };
    if !args.checkpoint.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            args.checkpoint.display()
        )));
    }
    let seed = args.seed.unwrap_or(cfg.training.seed);
    let mut model = TrackModel::new(ModelOptions::from_config(&cfg)?, seed);
    model.load(fs::File::open(&args.checkpoint)?)?;
    let settings = TrackerSettings::from_config(&cfg);

    let datasets = load_dataset_dir(&args.data)?;
    let started = Instant::now();
    let mut windows = 0usize;
    for ds in &datasets {
        let run = run_sequence(&model, ds, &mask, &settings)?;
        windows += ds.frames.len();
        let mut buf = Vec::new();
        write_tracks(&run.records, &mut buf)?;
        let path = args.out.join(format!("{}.txt", ds.id));
        write_atomic(&path, &buf)?;
        log::info!(
            "sequence {}: {} frames, {} emitted boxes",
            ds.id,
            ds.frames.len(),
            run.records.len()
        );
    }
    println!(
        "tracked {} sequences, {} windows in {:.2}s",
        datasets.len(),
        windows,
        started.elapsed().as_secs_f64()
    );
    Ok(0)
}

fn cmd_train(args: TrainArgs) -> Result<u8, Error> {
    let mut cfg = load_config(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.training.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.training.learning_rate = lr;
    }
    if let Some(s) = args.seed {
        cfg.training.seed = s;
    }
    cfg.validate()?;

    let datasets = load_dataset_dir(&args.data)?;
    let mut model = TrackModel::new(ModelOptions::from_config(&cfg)?, cfg.training.seed);
    let settings = TrainSettings::from_config(&cfg);
    let started = Instant::now();
    let outcome = train_loop(&mut model, &datasets, &settings)?;

    let mut ckpt = Vec::new();
    model.save(&mut ckpt)?;
    write_atomic(&args.out, &ckpt)?;

    let log_path = args.loss_log.clone().unwrap_or_else(|| {
        let mut p = args.out.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    });
    let mut log_text = String::new();
    for s in &outcome.steps {
        log_text.push_str(&format!(
            "step {} link {:.6} start {:.6} end {:.6} true {:.6} total {:.6}\n",
            s.step, s.losses.link, s.losses.start, s.losses.end, s.losses.truth, s.losses.total
        ));
    }
    write_atomic(&log_path, log_text.as_bytes())?;

    println!(
        "trained {} steps in {:.2}s, final loss {:.6}, checkpoint {}",
        outcome.steps.len(),
        started.elapsed().as_secs_f64(),
        outcome.final_loss(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<u8, Error> {
    let datasets = load_dataset_dir(&args.gt)?;
    let mut rows = Vec::new();
    let mut merged = MetricTotals::default();
    let mut seen = Vec::new();
    for ds in &datasets {
        let result_path = args.results.join(format!("{}.txt", ds.id));
        if !result_path.exists() {
            return Err(Error::Data(format!(
                "no results for sequence {} (expected {})",
                ds.id,
                result_path.display()
            )));
        }
        seen.push(format!("{}.txt", ds.id));
        let hyp_records = parse_labels(std::io::BufReader::new(fs::File::open(&result_path)?))?;
        let mut eval = SequenceEvaluator::new(fusemot::metrics::MATCH_IOU);
        for frame in &ds.frames {
            let gt: Vec<GtBox> = frame.gt.iter().map(GtBox::from_record).collect();
            let hyp: Vec<HypBox> = hyp_records
                .iter()
                .filter(|r| r.frame == frame.index)
                .map(HypBox::from_record)
                .collect();
            eval.observe(&gt, &hyp);
        }
        let totals = eval.finish();
        rows.push((ds.id.clone(), totals.report()));
        merged.merge(&totals);
    }
    // Result files without a ground-truth sequence are a mismatch.
    for entry in fs::read_dir(&args.results)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".txt") && !seen.contains(&name) {
            return Err(Error::Data(format!(
                "results file {name} has no matching ground-truth sequence"
            )));
        }
    }
    rows.push(("TOTAL".into(), merged.report()));
    print!("{}", MetricReport::format_table(&rows));
    Ok(0)
}

fn cmd_synth(args: SynthArgs) -> Result<u8, Error> {
    let mut scenario = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read scenario {}: {e}", p.display()))
            })?;
            ScenarioConfig::from_toml_str(&text)?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(s) = args.seed {
        scenario.seed = s;
    }
    let dataset = generate_synthetic(&scenario)?;
    let dir = args.out.join(&scenario.name);
    save_dataset(&dataset, &dir)?;
    write_atomic(
        &dir.join("scenario.toml"),
        scenario.to_toml_string().as_bytes(),
    )?;
    let detections: usize = dataset.frames.iter().map(|f| f.detections.len()).sum();
    println!(
        "wrote sequence {} ({} frames, {} detections) to {}",
        scenario.name,
        dataset.frames.len(),
        detections,
        dir.display()
    );
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<u8, Error> {
    let started = Instant::now();
    let report = gradsuite::run_suite(args.seeds, args.tol, args.corrupt_backward)?;
    print!("{}", report.format_table());
    let verdict = if report.all_pass() { "PASS" } else { "FAIL" };
    println!(
        "gradcheck {verdict}: {} items, {} seeds each, tol {:.0e}, max err {:.3e}, {:.2}s",
        report.items.len(),
        args.seeds,
        args.tol,
        report
            .items
            .iter()
            .map(|i| i.max_rel_error)
            .fold(0.0f64, f64::max),
        started.elapsed().as_secs_f64()
    );
    Ok(u8::from(!report.all_pass()))
}

fn cmd_lpfuzz(args: LpFuzzArgs) -> Result<u8, Error> {
    if let Some(path) = &args.replay {
        let problem = read_instance(fs::File::open(path)?)?;
        let exact = solve_exact(&problem)?;
        let brute = solve_brute_force(&problem)?;
        let agree = (exact.objective - brute.objective).abs() <= 1e-9;
        println!(
            "replay {}: exact {:.12}, brute {:.12}, {}",
            path.display(),
            exact.objective,
            brute.objective,
            if agree { "agree" } else { "DISAGREE" }
        );
        return Ok(u8::from(!agree));
    }

    if args.count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let started = Instant::now();
    let mut disagreements = 0usize;
    let mut infeasible = 0usize;
    for i in 0..args.count {
        let problem = random_instance(&mut rng, 4, 4);
        let exact = solve_exact(&problem)?;
        let brute = solve_brute_force(&problem)?;
        let objectives_agree = (exact.objective - brute.objective).abs() <= 1e-9;
        let feasible =
            exact.is_feasible(problem.n, problem.m) && brute.is_feasible(problem.n, problem.m);
        if !feasible {
            infeasible += 1;
        }
        if !objectives_agree {
            disagreements += 1;
            let dir = args
                .dump
                .clone()
                .unwrap_or_else(|| PathBuf::from("lpfuzz-failures"));
            fs::create_dir_all(&dir)?;
            let path = dir.join(format!("instance-{i:05}.txt"));
            let mut buf = Vec::new();
            write_instance(&problem, &mut buf)?;
            fs::write(&path, &buf)?;
            // A dumped instance must reproduce from disk.
            let reloaded = read_instance(fs::File::open(&path)?)?;
            let re_exact = solve_exact(&reloaded)?;
            let re_brute = solve_brute_force(&reloaded)?;
            let reproduces = (re_exact.objective - re_brute.objective).abs() > 1e-9;
            log::warn!(
                "instance {i}: exact {:.12} vs brute {:.12}, dumped to {} (reproduces: {reproduces})",
                exact.objective,
                brute.objective,
                path.display()
            );
        }
    }
    let agreement = 100.0 * (args.count - disagreements) as f64 / args.count as f64;
    println!(
        "lp-fuzz: {} instances, {agreement:.2}% objective agreement, {} infeasible, {:.2}s",
        args.count,
        infeasible,
        started.elapsed().as_secs_f64()
    );
    Ok(u8::from(disagreements > 0 || infeasible > 0))
}
