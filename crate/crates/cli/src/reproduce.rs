//! The built-in experiment grid, one CSV per figure plus comparison tables.

use std::collections::BTreeMap;
use std::path::PathBuf;

use log::{info, warn};
use serde::Serialize;

use peerweave::analytics::ProbAssignment;
use peerweave::catalog::{by_figure, CatalogEntry, Figure, Generator, Measure, Reported};
use peerweave::engine::{run_scenario, Metrics, SimConfig};
use peerweave::model::Topology;

use crate::error::CliError;
use crate::{csv_string, output, Cli, Format};

pub const DEFAULT_RUNS: u32 = 1000;
pub const FIGURES: [Figure; 4] = [Figure::PathNumber, Figure::Coupling, Figure::Division, Figure::DoubleSending];

/// Everything needed to re-derive one row of the comparison table.
#[derive(Debug, Serialize)]
struct ScenarioRecord {
    name: String,
    figure: Figure,
    generator: Generator,
    seed: u64,
    runs: u32,
    sim: SimConfig,
    topology: Topology,
    probs: ProbAssignment,
    analytic: Option<f64>,
    reported: Vec<Reported>,
}

#[derive(Debug, Serialize)]
struct ComparisonRow {
    scenario: String,
    figure: &'static str,
    measure: &'static str,
    analytic: Option<f64>,
    empirical: f64,
    reported: Option<f64>,
    reproducible: Option<bool>,
}

#[derive(Debug, Serialize)]
struct CheckRow {
    check: String,
    observed: String,
    expected: String,
    pass: bool,
}

struct Ran {
    entry: CatalogEntry,
    metrics: Metrics,
    analytic: Option<f64>,
}

fn fmt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

fn rate(ran: &[Ran], name: &str) -> Option<(f64, u32)> {
    ran.iter().find(|r| r.entry.name == name).map(|r| (r.metrics.success_rate, r.metrics.runs))
}

fn time(ran: &[Ran], name: &str) -> Option<f64> {
    ran.iter().find(|r| r.entry.name == name).map(|r| r.metrics.mean_task_time)
}

/// Allowed shortfall when comparing two independent rates: three standard
/// errors of their difference.
fn slack(a: (f64, u32), b: (f64, u32)) -> f64 {
    let var = |(p, n): (f64, u32)| p * (1.0 - p) / n as f64;
    3.0 * (var(a) + var(b)).sqrt()
}

fn not_below(checks: &mut Vec<CheckRow>, label: String, hi: Option<(f64, u32)>, lo: Option<(f64, u32)>) {
    if let (Some(hi), Some(lo)) = (hi, lo) {
        let tol = slack(hi, lo);
        checks.push(CheckRow {
            check: label,
            observed: format!("{:.4} vs {:.4}", hi.0, lo.0),
            expected: format!(">= within {tol:.4}"),
            pass: hi.0 >= lo.0 - tol,
        });
    }
}

fn shape_checks(ran: &[Ran]) -> Vec<CheckRow> {
    let mut checks = Vec::new();
    for conn in ["separate", "layer2full", "layer23full", "layer234full"] {
        for (a, b) in [(3, 2), (4, 3)] {
            let label = format!("path-number: {a}basic-{conn} >= {b}basic-{conn}");
            not_below(
                &mut checks,
                label,
                rate(ran, &format!("{a}basic-{conn}")),
                rate(ran, &format!("{b}basic-{conn}")),
            );
        }
    }
    for n in [2, 3, 4] {
        let order = ["separate", "layer2full", "layer23full", "layer234full"];
        for w in order.windows(2) {
            let label = format!("path-number: {n}basic-{} >= {n}basic-{}", w[1], w[0]);
            not_below(
                &mut checks,
                label,
                rate(ran, &format!("{n}basic-{}", w[1])),
                rate(ran, &format!("{n}basic-{}", w[0])),
            );
        }
    }
    for k in 1..=3 {
        let label = format!("coupling: 0common >= {k}common");
        not_below(&mut checks, label, rate(ran, "coupling-0common"), rate(ran, &format!("coupling-{k}common")));
    }
    for w in [1, 2, 4, 8].windows(2) {
        let label = format!("division: {}layer >= {}layer", w[1], w[0]);
        not_below(
            &mut checks,
            label,
            rate(ran, &format!("division-{}layer", w[1])),
            rate(ran, &format!("division-{}layer", w[0])),
        );
    }
    if let (Some(single), Some(double)) = (time(ran, "no-double-sending"), time(ran, "double-sending")) {
        let ratio = double / single;
        checks.push(CheckRow {
            check: "double-sending: mean time ratio".into(),
            observed: format!("{ratio:.4}"),
            expected: "[0.35, 0.60]".into(),
            pass: (0.35..=0.60).contains(&ratio),
        });
    }
    if let (Some(sep), Some(l2), Some(l234)) =
        (time(ran, "4basic-separate"), time(ran, "4basic-layer2full"), time(ran, "4basic-layer234full"))
    {
        checks.push(CheckRow {
            check: "path-number: 4basic mean time layer2full > separate".into(),
            observed: format!("{l2:.4} vs {sep:.4}"),
            expected: ">".into(),
            pass: l2 > sep,
        });
        checks.push(CheckRow {
            check: "path-number: 4basic mean time layer234full < layer2full".into(),
            observed: format!("{l234:.4} vs {l2:.4}"),
            expected: "<".into(),
            pass: l234 < l2,
        });
    }
    checks
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv_writer();
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

pub fn run(cli: &Cli, suite: &str) -> Result<(), CliError> {
    if suite != "reference" && suite != "paper" {
        return Err(CliError::Config(format!("unknown suite {suite:?}; the only suite is \"reference\"")));
    }
    let runs = cli.runs.unwrap_or(DEFAULT_RUNS);
    let seed = cli.seed.unwrap_or(0);
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("reproduce"));
    let mut ran = Vec::new();
    let mut failed = Vec::new();
    let mut records = Vec::new();
    for figure in FIGURES {
        let mut rows = Vec::new();
        for entry in by_figure(figure) {
            info!("running {}", entry.name);
            let scenario = match entry.scenario(runs, seed) {
                Ok(s) => s,
                Err(e) => {
                    failed.push(format!("{}: {e}", entry.name));
                    continue;
                }
            };
            let metrics = match run_scenario(&scenario) {
                Ok(m) => m,
                Err(e) => {
                    failed.push(format!("{}: {e}", entry.name));
                    continue;
                }
            };
            let analytic = entry.analytic().ok();
            if let Some(a) = analytic {
                let tol = (4.0 * Metrics::binomial_sigma(a, runs)).max(0.02);
                if (metrics.success_rate - a).abs() > tol {
                    failed.push(format!(
                        "{}: success rate {:.4} is more than {tol:.4} from exact {a:.4}",
                        entry.name, metrics.success_rate
                    ));
                }
            }
            records.push(ScenarioRecord {
                name: entry.name.clone(),
                figure,
                generator: entry.generator.clone(),
                seed,
                runs,
                sim: scenario.sim.clone(),
                topology: scenario.topology.clone(),
                probs: scenario.probs.clone(),
                analytic,
                reported: entry.reported.clone(),
            });
            rows.push(metrics.clone());
            ran.push(Ran { entry, metrics, analytic });
        }
        output::write_file(&dir.join(format!("{}.csv", figure.name())), csv_string(&rows)?.as_bytes())?;
    }

    let mut comparison = Vec::new();
    for r in &ran {
        let success = r.entry.reported(Measure::SuccessRate);
        comparison.push(ComparisonRow {
            scenario: r.entry.name.clone(),
            figure: r.entry.figure.name(),
            measure: "success_rate",
            analytic: r.analytic,
            empirical: r.metrics.success_rate,
            reported: success.map(|s| s.value),
            reproducible: success.map(|s| s.reproducible),
        });
        let t = r.entry.reported(Measure::MeanTaskTime);
        comparison.push(ComparisonRow {
            scenario: r.entry.name.clone(),
            figure: r.entry.figure.name(),
            measure: "mean_task_time_s",
            analytic: None,
            empirical: r.metrics.mean_task_time,
            reported: t.map(|t| t.value),
            reproducible: t.map(|t| t.reproducible),
        });
    }
    let checks = shape_checks(&ran);
    for c in checks.iter().filter(|c| !c.pass) {
        warn!("shape check failed: {} ({} , expected {})", c.check, c.observed, c.expected);
    }
    output::write_file(&dir.join("comparison.csv"), to_csv(&comparison)?.as_bytes())?;
    output::write_file(&dir.join("checks.csv"), to_csv(&checks)?.as_bytes())?;
    let json = serde_json::to_string_pretty(&records).expect("records serialize") + "\n";
    output::write_file(&dir.join("scenarios.json"), json.as_bytes())?;

    match cli.format {
        Format::Json => {
            let by_name: BTreeMap<&str, &ComparisonRow> =
                comparison.iter().filter(|c| c.measure == "success_rate").map(|c| (c.scenario.as_str(), c)).collect();
            println!("{}", serde_json::to_string_pretty(&by_name).expect("comparison serializes"));
        }
        Format::Csv => {
            println!(
                "{:<24} {:>10} {:>10} {:>10} {:>10} {:>10}",
                "scenario", "exact", "success", "reported", "mean_s", "reported_s"
            );
            for r in &ran {
                let rep = |m| r.entry.reported(m).map(|x| x.value);
                println!(
                    "{:<24} {:>10} {:>10.4} {:>10} {:>10.3} {:>10}",
                    r.entry.name,
                    fmt(r.analytic),
                    r.metrics.success_rate,
                    fmt(rep(Measure::SuccessRate)),
                    r.metrics.mean_task_time,
                    fmt(rep(Measure::MeanTaskTime))
                );
            }
            let passed = checks.iter().filter(|c| c.pass).count();
            println!("shape checks: {passed}/{} passed (see checks.csv)", checks.len());
            println!("wrote {}", dir.display());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::SuiteFailed(format!("{} scenario(s) failed:\n  {}", failed.len(), failed.join("\n  "))))
    }
}
