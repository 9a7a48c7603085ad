use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use flsim_core::engine::output::fmt_g17;
use flsim_core::engine::{read_rounds, RoundReport, ROUNDS_FILE, SUMMARY_FILE};

use crate::{CliResult, Failure, ReportFormat};

fn load(dir: &Path) -> Result<Vec<RoundReport>, Failure> {
    let path = dir.join(ROUNDS_FILE);
    let reports = read_rounds(&path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    if reports.is_empty() {
        return Err(Failure::input(format!("{} has no rounds", path.display())));
    }
    Ok(reports)
}

/// Experiment label from summary.json, if one was written.
fn experiment_name(dir: &Path) -> Option<String> {
    let text = fs::read_to_string(dir.join(SUMMARY_FILE)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("experiment")?.as_str().map(str::to_string)
}

fn csv(reports: &[RoundReport], out: &mut dyn Write) -> io::Result<()> {
    let ids: BTreeSet<u32> = reports
        .iter()
        .flat_map(|r| r.per_client.iter().map(|c| c.client_id))
        .collect();
    let mut header = String::from("round,global_acc,global_loss,wire_bytes");
    for id in &ids {
        header.push_str(&format!(",client_{id}_acc,client_{id}_loss"));
    }
    writeln!(out, "{header}")?;
    for r in reports {
        let mut line = format!(
            "{},{},{},{}",
            r.round,
            fmt_g17(r.global_acc),
            fmt_g17(r.global_loss),
            r.wire_bytes
        );
        for id in &ids {
            match r.per_client.iter().find(|c| c.client_id == *id) {
                Some(c) => line.push_str(&format!(",{},{}", fmt_g17(c.test_acc), fmt_g17(c.test_loss))),
                None => line.push_str(",,"),
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub(crate) fn cmd_report(dir: &Path, format: ReportFormat, out: &mut dyn Write) -> CliResult {
    let reports = load(dir)?;
    match format {
        ReportFormat::Csv => csv(&reports, out)?,
        ReportFormat::Summary => {
            let last = reports.last().expect("non-empty");
            let name = experiment_name(dir).unwrap_or_else(|| "unknown".into());
            writeln!(
                out,
                "experiment={name} rounds={} clients={} accuracy={:.4} loss={:.4} wire_bytes={}",
                last.round,
                last.per_client.len(),
                last.global_acc,
                last.global_loss,
                reports.iter().map(|r| r.wire_bytes).sum::<u64>()
            )?;
        }
    }
    Ok(())
}
