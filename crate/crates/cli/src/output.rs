use std::path::Path;

use serde_json::Value;

use peerweave::engine::Metrics;

use crate::error::CliError;
use crate::{csv_string, Cli, Format};

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Metrics as JSON without the per-run times.
pub fn metrics_json(rows: &[Metrics]) -> Value {
    Value::Array(
        rows.iter()
            .map(|m| {
                let mut v = serde_json::to_value(m).expect("metrics serialize");
                if let Value::Object(map) = &mut v {
                    map.remove("task_times");
                    map.insert("digest".into(), Value::String(m.digest_hex()));
                    map.remove("event_trace_digest");
                }
                v
            })
            .collect(),
    )
}

pub fn render(format: Format, rows: &[Metrics]) -> Result<String, CliError> {
    match format {
        Format::Csv => csv_string(rows),
        Format::Json => Ok(serde_json::to_string_pretty(&metrics_json(rows)).expect("json renders") + "\n"),
    }
}

/// Writes to `--out` when given, standard output otherwise.
pub fn emit_metrics(cli: &Cli, rows: &[Metrics]) -> Result<(), CliError> {
    let text = render(cli.format, rows)?;
    match &cli.out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn summary_table(rows: &[Metrics], exact: &[Option<f64>]) -> String {
    let mut out =
        format!("{:<24} {:>8} {:>10} {:>10} {:>10} {:>10}", "scenario", "runs", "success", "exact", "mean_s", "p95_s");
    for (m, e) in rows.iter().zip(exact) {
        let e = e.map_or("-".to_string(), |e| format!("{e:.4}"));
        out.push_str(&format!(
            "\n{:<24} {:>8} {:>10.4} {:>10} {:>10.3} {:>10.3}",
            m.scenario, m.runs, m.success_rate, e, m.mean_task_time, m.p95_task_time
        ));
    }
    out
}
