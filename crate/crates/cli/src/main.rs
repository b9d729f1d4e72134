use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use trackforge::classifier::ClassifierModel;
use trackforge::evaluation::{evaluate, learning_curve, ConstantScorer, TestFrame};
use trackforge::experiment::{self, run_comparison, ComparisonConfig};
use trackforge::logs::{read_detections, read_sim_frames, LogWriter, DETECTIONS_FILE};
use trackforge::model::DetectorId;
use trackforge::pipeline::{
    build_test_set, train_offline, LearnInput, LearnOutcome, Monitor, OnlineLearner, RunConfig,
    SensorCombination,
};
use trackforge::simulator::{ScenarioConfig, SimFrame, Simulator};

/// Environment variable holding the log filter, e.g. `debug`.
const LOG_ENV: &str = "TRACKFORGE_LOG_LEVEL";

#[derive(Debug, Parser)]
#[command(
    name = "trackforge",
    version,
    about = "Online learning of a 3D LiDAR human classifier from tracked multisensor detections"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and write its detection and ground-truth logs.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the online learning loop and write per-iteration models and CSVs.
    Learn(LearnArgs),
    /// Train the supervised baseline on ground-truth labeled clusters.
    TrainOffline {
        /// Log directory written by `simulate`.
        #[arg(long)]
        logs: PathBuf,
        /// Samples per class.
        #[arg(long, default_value_t = 2100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate model files on an annotated test log.
    Eval {
        /// Model files; an argument of the form `name=path` names its group.
        #[arg(long = "model", required = true, num_args = 1..)]
        models: Vec<String>,
        /// Log directory written by `simulate`.
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 100)]
        test_frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare all sensor combinations over several seeds.
    Report {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 100)]
        test_frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct LearnArgs {
    /// Scenario to simulate on the fly.
    #[arg(long, required_unless_present = "logs", conflicts_with = "logs")]
    scenario: Option<PathBuf>,
    /// Log directory to replay instead of simulating.
    #[arg(long)]
    logs: Option<PathBuf>,
    /// Test log directory for the learning curve; a scenario run builds
    /// its own held-out world when absent.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    test_frames: usize,
    /// Static detectors and motion prior, e.g. `camera,leg` or `prior`.
    #[arg(long, default_value = "camera,leg")]
    sensors: SensorCombination,
    #[arg(long)]
    sigma_t: Option<f64>,
    /// Positives and negatives per training batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_iterations: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Give every static detection probability 0.5.
    #[arg(long)]
    literal_confidence: bool,
    #[arg(long)]
    async_retrain: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            scenario,
            seed,
            out,
        } => simulate(&scenario, seed, &out),
        Command::Learn(args) => learn(&args),
        Command::TrainOffline {
            logs,
            per_class,
            seed,
            out,
        } => offline(&logs, per_class, seed, &out),
        Command::Eval {
            models,
            test,
            test_frames,
            out,
        } => eval(&models, &test, test_frames, &out),
        Command::Report {
            scenario,
            seeds,
            test_frames,
            out,
        } => report(&scenario, seeds, test_frames, &out),
    }
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    ScenarioConfig::load(path).with_context(|| format!("loading scenario {}", path.display()))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn simulate(scenario: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_scenario(scenario)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut writer =
        LogWriter::create(out).with_context(|| format!("creating logs in {}", out.display()))?;
    for frame in Simulator::new(cfg)? {
        writer.write(&frame)?;
    }
    let n = writer.finish()?;
    info!("wrote {n} frames to {}", out.display());
    Ok(())
}

/// Test frames of a log directory, spread evenly over the log.
fn test_from_logs(dir: &Path, count: usize) -> Result<Vec<TestFrame<f64>>> {
    let frames = read_frames(dir)?;
    let total = frames.len();
    // Replayed logs carry no sensor geometry; every recorded human counts.
    Ok(build_test_set(frames, total, count, |_| true))
}

fn read_frames(dir: &Path) -> Result<Vec<SimFrame>> {
    read_sim_frames(dir)
        .with_context(|| format!("opening logs in {}", dir.display()))?
        .collect::<Result<_, _>>()
        .with_context(|| format!("reading logs in {}", dir.display()))
}

#[derive(Serialize)]
struct IterationRow {
    iteration: u64,
    stamp: f64,
    store_positives: usize,
    store_negatives: usize,
    support_vectors: usize,
    smo_iterations: usize,
    converged: bool,
    model: String,
}

#[derive(Serialize)]
struct StabilityRow {
    iteration: usize,
    correct: usize,
    increment: usize,
    stability: usize,
}

#[derive(Serialize)]
struct CurveCsvRow<'a> {
    iteration: u64,
    sensors: &'a str,
    #[serde(rename = "AP")]
    ap: f64,
    #[serde(rename = "ACC")]
    acc: f64,
}

fn model_file(iteration: u64) -> String {
    format!("model_iter{iteration}.tfsvm")
}

fn learn(args: &LearnArgs) -> Result<()> {
    let mut run = RunConfig {
        combination: args.sensors,
        seed: args.seed,
        async_retrain: args.async_retrain,
        ..RunConfig::default()
    };
    if let Some(s) = args.sigma_t {
        run.labels.sigma_t = s;
    }
    if let Some(b) = args.batch_size {
        run.labels.pos_batch = b;
        run.labels.neg_batch = b;
    }
    if let Some(m) = args.max_iterations {
        run.labels.max_iterations = m;
    }
    out_dir(&args.out)?;
    let learner = OnlineLearner::new(run.clone(), Monitor::FirstBatch)?;
    let (outcome, test) = match (&args.scenario, &args.logs) {
        (Some(path), _) => {
            let mut cfg = load_scenario(path)?;
            cfg.seed = args.seed;
            cfg.literal_confidence |= args.literal_confidence;
            let outcome = drive(
                learner,
                Simulator::new(cfg.clone())?.map(|f| Ok(LearnInput::from_sim(&f))),
            )?;
            let test = match &args.test {
                Some(dir) => test_from_logs(dir, args.test_frames)?,
                None => experiment::test_set(&cfg, args.seed, args.test_frames)?,
            };
            (outcome, Some(test))
        }
        (None, Some(dir)) => {
            let path = dir.join(DETECTIONS_FILE);
            let records =
                read_detections(&path).with_context(|| format!("opening {}", path.display()))?;
            let literal = args.literal_confidence;
            let inputs = records.map(move |r| {
                let r = r?;
                let mut detections = r.to_detections();
                if literal {
                    for d in detections
                        .iter_mut()
                        .filter(|d| matches!(d.detector, DetectorId::UpperBody | DetectorId::Leg))
                    {
                        d.confidence = 0.5;
                    }
                }
                Ok(LearnInput::without_truth(r.stamp(), detections))
            });
            let outcome = drive(learner, inputs)?;
            let test = args
                .test
                .as_deref()
                .map(|d| test_from_logs(d, args.test_frames))
                .transpose()?;
            (outcome, test)
        }
        (None, None) => bail!("either --scenario or --logs is required"),
    };
    write_outcome(
        &args.out,
        &outcome,
        &run.combination.name(),
        test.as_deref(),
    )
}

fn drive(
    mut learner: OnlineLearner,
    inputs: impl Iterator<Item = Result<LearnInput, trackforge::logs::LogError>>,
) -> Result<LearnOutcome> {
    for input in inputs {
        learner.ingest(&input?)?;
        if learner.is_halted() {
            break;
        }
    }
    Ok(learner.finish()?)
}

fn write_outcome(
    out: &Path,
    outcome: &LearnOutcome,
    sensors: &str,
    test: Option<&[TestFrame<f64>]>,
) -> Result<()> {
    let mut rows = Vec::new();
    for (rec, model) in outcome.iterations.iter().zip(&outcome.models) {
        let name = model_file(rec.iteration);
        write_file(&out.join(&name), &model.save())?;
        rows.push(IterationRow {
            iteration: rec.iteration,
            stamp: rec.stamp,
            store_positives: rec.store_positives,
            store_negatives: rec.store_negatives,
            support_vectors: rec.support_vectors,
            smo_iterations: rec.smo_iterations,
            converged: rec.converged,
            model: name,
        });
    }
    write_csv(&out.join("iterations.csv"), &rows)?;

    let s = &outcome.stability;
    let running = s.running();
    let increments = s.increments();
    let stability: Vec<StabilityRow> = s
        .correct
        .iter()
        .enumerate()
        .map(|(k, &correct)| StabilityRow {
            iteration: k + 1,
            correct,
            increment: if k == 0 { 0 } else { increments[k - 1] },
            stability: running[k],
        })
        .collect();
    write_csv(&out.join("stability.csv"), &stability)?;

    if let Some(test) = test {
        let numbered: Vec<(u64, &ClassifierModel<f64>)> =
            outcome.models.iter().map(|m| (m.iteration, m)).collect();
        let mut curve = vec![CurveCsvRow {
            iteration: 0,
            sensors,
            ap: 0.0,
            acc: 0.0,
        }];
        let untrained = evaluate(&ConstantScorer(0.5), test, 0.5)?;
        curve[0].ap = untrained.ap;
        curve[0].acc = untrained.accuracy;
        for r in learning_curve(&numbered, test)? {
            curve.push(CurveCsvRow {
                iteration: r.iteration,
                sensors,
                ap: r.ap,
                acc: r.accuracy,
            });
        }
        write_csv(&out.join("learning_curve.csv"), &curve)?;
    }
    let a = &outcome.audit;
    info!(
        "{} frames, {} models, {} positive and {} negative labels, halted: {}",
        outcome.frames,
        outcome.models.len(),
        a.positives,
        a.negatives,
        outcome.halted
    );
    if let Some(p) = a.positive_precision() {
        info!("positive label precision {p:.4}");
    }
    Ok(())
}

fn offline(logs: &Path, per_class: usize, seed: u64, out: &Path) -> Result<()> {
    let frames = read_frames(logs)?;
    let model = train_offline(frames, per_class, &Default::default(), seed)?;
    out_dir(out)?;
    let path = out.join("model_offline.tfsvm");
    write_file(&path, &model.save())?;
    info!(
        "wrote {} ({} support vectors)",
        path.display(),
        model.support_vectors.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct MetricRow<'a> {
    group: &'a str,
    iteration: u64,
    #[serde(rename = "AP")]
    ap: f64,
    #[serde(rename = "ACC")]
    acc: f64,
}

#[derive(Serialize)]
struct PrRow<'a> {
    group: &'a str,
    threshold: f64,
    precision: f64,
    recall: f64,
}

fn eval(models: &[String], test: &Path, test_frames: usize, out: &Path) -> Result<()> {
    let frames = test_from_logs(test, test_frames)?;
    let mut loaded = Vec::new();
    for arg in models {
        let (group, path) = match arg.split_once('=') {
            Some((g, p)) => (g.to_owned(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(arg);
                let stem = p
                    .file_stem()
                    .map_or_else(|| arg.clone(), |s| s.to_string_lossy().into_owned());
                (stem, p)
            }
        };
        let bytes = fs::read(&path).with_context(|| format!("reading model {}", path.display()))?;
        let model = ClassifierModel::<f64>::load(&bytes)
            .with_context(|| format!("loading model {}", path.display()))?;
        loaded.push((group, model));
    }
    out_dir(out)?;
    let mut metrics = Vec::new();
    let mut pr = Vec::new();
    let results: Vec<_> = loaded
        .iter()
        .map(|(g, m)| evaluate(m, &frames, 0.5).map(|r| (g, m.iteration, r)))
        .collect::<Result<_, _>>()?;
    for (group, iteration, m) in &results {
        info!("{group}: AP {:.4} ACC {:.4}", m.ap, m.accuracy);
        metrics.push(MetricRow {
            group,
            iteration: *iteration,
            ap: m.ap,
            acc: m.accuracy,
        });
        pr.extend(m.curve.iter().map(|p| PrRow {
            group,
            threshold: p.threshold,
            precision: p.precision,
            recall: p.recall,
        }));
    }
    write_csv(&out.join("metrics.csv"), &metrics)?;
    write_csv(&out.join("pr_curves.csv"), &pr)
}

#[derive(Serialize)]
struct SummaryRow {
    sensors: String,
    mean_ap: f64,
    mean_acc: f64,
}

fn report(scenario: &Path, seeds: Vec<u64>, test_frames: usize, out: &Path) -> Result<()> {
    let cfg = ComparisonConfig {
        test_frames,
        ..ComparisonConfig::new(load_scenario(scenario)?, seeds)
    };
    out_dir(out)?;
    let report = run_comparison(&cfg)?;
    write_csv(&out.join("comparison.csv"), &report.rows())?;
    let mut summary: Vec<SummaryRow> = cfg
        .combinations
        .iter()
        .map(|&c| SummaryRow {
            sensors: c.name(),
            mean_ap: report.mean_final_ap(c),
            mean_acc: report.mean_final_accuracy(c),
        })
        .collect();
    summary.push(SummaryRow {
        sensors: "offline".into(),
        mean_ap: report.mean_offline_ap(),
        mean_acc: mean(report.baselines.iter().map(|b| b.offline.accuracy)),
    });
    summary.push(SummaryRow {
        sensors: "untrained".into(),
        mean_ap: report.mean_untrained_ap(),
        mean_acc: mean(report.baselines.iter().map(|b| b.untrained.accuracy)),
    });
    for r in &summary {
        info!(
            "{:<16} AP {:.4} ACC {:.4}",
            r.sensors, r.mean_ap, r.mean_acc
        );
    }
    write_csv(&out.join("summary.csv"), &summary)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}
