//! Multi-seed comparison of sensor combinations on one scenario.
//!
//! Every combination of a seed sees the same simulated world; only the
//! detector streams fed to the loop differ. Runs execute in parallel.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::evaluation::{
    evaluate, learning_curve, ConstantScorer, CurveRow, EvalError, Metrics, TestFrame,
};
use crate::pipeline::{
    build_test_set, learn, train_offline, LabelAudit, Monitor, PipelineError, RunConfig,
    SensorCombination,
};
use crate::simulator::{ScenarioConfig, SimError, Simulator};

/// Seed offset of the held-out test world.
pub const TEST_SEED_OFFSET: u64 = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonConfig {
    pub scenario: ScenarioConfig,
    pub seeds: Vec<u64>,
    pub combinations: Vec<SensorCombination>,
    pub run: RunConfig,
    pub test_frames: usize,
    /// Samples per class of the supervised baseline.
    pub offline_per_class: usize,
    pub threads: usize,
}

impl ComparisonConfig {
    pub fn new(scenario: ScenarioConfig, seeds: Vec<u64>) -> Self {
        Self {
            scenario,
            seeds,
            combinations: SensorCombination::COMPARISON.to_vec(),
            run: RunConfig::default(),
            test_frames: 100,
            offline_per_class: 2100,
            threads: thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub combination: SensorCombination,
    pub curve: Vec<CurveRow>,
    /// Metrics of the last model, or of the untrained scorer when none was trained.
    pub last: Metrics,
    pub audit: LabelAudit,
    pub models: Vec<ClassifierModel<f64>>,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedBaselines {
    pub seed: u64,
    pub offline: Metrics,
    pub untrained: Metrics,
    pub offline_model: ClassifierModel<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub runs: Vec<RunResult>,
    pub baselines: Vec<SeedBaselines>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl ComparisonReport {
    pub fn mean_final_ap(&self, c: SensorCombination) -> f64 {
        mean(
            self.runs
                .iter()
                .filter(|r| r.combination == c)
                .map(|r| r.last.ap),
        )
    }

    pub fn mean_final_accuracy(&self, c: SensorCombination) -> f64 {
        mean(
            self.runs
                .iter()
                .filter(|r| r.combination == c)
                .map(|r| r.last.accuracy),
        )
    }

    pub fn mean_untrained_ap(&self) -> f64 {
        mean(self.baselines.iter().map(|b| b.untrained.ap))
    }

    pub fn mean_offline_ap(&self) -> f64 {
        mean(self.baselines.iter().map(|b| b.offline.ap))
    }
}

/// Scenario of one seed; the population and every sensor draw follow it.
pub fn seeded(scenario: &ScenarioConfig, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        ..scenario.clone()
    }
}

/// Seconds between consecutive test frames.
pub const TEST_FRAME_SPACING: f64 = 2.0;

/// Held-out annotated frames for a training seed, taken every
/// [`TEST_FRAME_SPACING`] seconds of a world with a different seed.
pub fn test_set(
    scenario: &ScenarioConfig,
    seed: u64,
    frames: usize,
) -> Result<Vec<TestFrame<f64>>, SimError> {
    let mut cfg = seeded(scenario, seed.wrapping_add(TEST_SEED_OFFSET));
    cfg.duration = cfg.duration.min(frames as f64 * TEST_FRAME_SPACING);
    let lidar = cfg.sensors.cluster3d.clone();
    let sim = Simulator::new(cfg)?;
    let total = sim.frame_count();
    Ok(build_test_set(sim, total, frames, move |p| lidar.covers(p)))
}

/// One online run and its learning curve on `test`.
pub fn run_one(
    scenario: &ScenarioConfig,
    seed: u64,
    combination: SensorCombination,
    run: &RunConfig,
    test: &[TestFrame<f64>],
) -> Result<RunResult, ExperimentError> {
    let config = RunConfig {
        combination,
        seed,
        ..run.clone()
    };
    let outcome = learn(
        Simulator::new(seeded(scenario, seed))?,
        &config,
        Monitor::FirstBatch,
    )?;
    let numbered: Vec<(u64, ClassifierModel<f64>)> = outcome
        .models
        .iter()
        .map(|m| (m.iteration, m.clone()))
        .collect();
    let curve = learning_curve(&numbered, test)?;
    let last = match outcome.models.last() {
        Some(m) => evaluate(m, test, 0.5)?,
        None => evaluate(&ConstantScorer(0.5), test, 0.5)?,
    };
    Ok(RunResult {
        seed,
        combination,
        curve,
        last,
        audit: outcome.audit,
        models: outcome.models,
        frames: outcome.frames,
    })
}

fn baselines(
    cfg: &ComparisonConfig,
    seed: u64,
    test: &[TestFrame<f64>],
) -> Result<SeedBaselines, ExperimentError> {
    let sim = Simulator::new(seeded(&cfg.scenario, seed))?;
    let offline_model = train_offline(sim, cfg.offline_per_class, &cfg.run.classifier, seed)?;
    Ok(SeedBaselines {
        seed,
        offline: evaluate(&offline_model, test, 0.5)?,
        untrained: evaluate(&ConstantScorer(0.5), test, 0.5)?,
        offline_model,
    })
}

enum Job {
    Online(u64, SensorCombination),
    Baseline(u64),
}

enum Done {
    Online(Box<RunResult>),
    Baseline(Box<SeedBaselines>),
}

pub fn run_comparison(cfg: &ComparisonConfig) -> Result<ComparisonReport, ExperimentError> {
    let tests: Vec<Vec<TestFrame<f64>>> = cfg
        .seeds
        .iter()
        .map(|&s| test_set(&cfg.scenario, s, cfg.test_frames))
        .collect::<Result<_, _>>()?;
    let mut jobs = Vec::new();
    for (k, &seed) in cfg.seeds.iter().enumerate() {
        jobs.push((k, Job::Baseline(seed)));
        for &c in &cfg.combinations {
            jobs.push((k, Job::Online(seed, c)));
        }
    }
    let workers = cfg.threads.max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<(usize, Result<Done, ExperimentError>)> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some((k, job)) = jobs.get(i) else { break };
                        let test = &tests[*k];
                        let r = match *job {
                            Job::Online(seed, c) => run_one(&cfg.scenario, seed, c, &cfg.run, test)
                                .map(|r| Done::Online(Box::new(r))),
                            Job::Baseline(seed) => {
                                baselines(cfg, seed, test).map(|b| Done::Baseline(Box::new(b)))
                            }
                        };
                        out.push((i, r));
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut ordered: Vec<_> = results;
    ordered.sort_by_key(|r| r.0);
    let mut report = ComparisonReport {
        runs: Vec::new(),
        baselines: Vec::new(),
    };
    for (_, r) in ordered {
        match r? {
            Done::Online(r) => report.runs.push(*r),
            Done::Baseline(b) => report.baselines.push(*b),
        }
    }
    Ok(report)
}

/// Flat per-iteration rows for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub sensors: String,
    pub iteration: u64,
    pub ap: f64,
    pub acc: f64,
}

impl ComparisonReport {
    pub fn rows(&self) -> Vec<ComparisonRow> {
        let mut rows = Vec::new();
        for b in &self.baselines {
            rows.push(ComparisonRow {
                seed: b.seed,
                sensors: "untrained".into(),
                iteration: 0,
                ap: b.untrained.ap,
                acc: b.untrained.accuracy,
            });
            rows.push(ComparisonRow {
                seed: b.seed,
                sensors: "offline".into(),
                iteration: 1,
                ap: b.offline.ap,
                acc: b.offline.accuracy,
            });
        }
        for r in &self.runs {
            for c in &r.curve {
                rows.push(ComparisonRow {
                    seed: r.seed,
                    sensors: r.combination.name(),
                    iteration: c.iteration,
                    ap: c.ap,
                    acc: c.accuracy,
                });
            }
        }
        rows
    }
}
