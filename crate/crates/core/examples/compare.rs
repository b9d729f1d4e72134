use std::time::Instant;

use trackforge::experiment::{run_comparison, ComparisonConfig};
use trackforge::simulator::ScenarioConfig;

fn main() {
    let seeds: Vec<u64> = std::env::args().nth(1).map_or(vec![1, 2, 3, 4, 5], |s| {
        s.split(',').map(|v| v.parse().unwrap()).collect()
    });
    let duration: f64 = std::env::args()
        .nth(2)
        .map_or(600.0, |s| s.parse().unwrap());
    let scenario = ScenarioConfig {
        duration,
        ..ScenarioConfig::reference(0)
    };
    let t0 = Instant::now();
    let report = run_comparison(&ComparisonConfig::new(scenario, seeds)).unwrap();
    for r in &report.runs {
        println!(
            "seed {} {:<16} iters {} frames {} ap {:.4} acc {:.4} labels +{} ({:.3}) -{} ({:.3}) curve {:?}",
            r.seed,
            r.combination.name(),
            r.models.len(),
            r.frames,
            r.last.ap,
            r.last.accuracy,
            r.audit.positives,
            r.audit.positive_precision().unwrap_or(f64::NAN),
            r.audit.negatives,
            r.audit.negative_precision().unwrap_or(f64::NAN),
            r.curve.iter().map(|c| (c.ap * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    for b in &report.baselines {
        println!(
            "seed {} offline ap {:.4} acc {:.4} untrained ap {:.4}",
            b.seed, b.offline.ap, b.offline.accuracy, b.untrained.ap
        );
    }
    for c in trackforge::pipeline::SensorCombination::COMPARISON {
        println!(
            "{:<16} mean ap {:.4} acc {:.4}",
            c.name(),
            report.mean_final_ap(c),
            report.mean_final_accuracy(c)
        );
    }
    println!(
        "offline {:.4} untrained {:.4} elapsed {:?}",
        report.mean_offline_ap(),
        report.mean_untrained_ap(),
        t0.elapsed()
    );
}
