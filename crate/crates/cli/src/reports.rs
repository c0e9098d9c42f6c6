//! Per-run report files. Each evaluation writes its own section
//! (`<section>.json` and `<section>.md`); `report.json` and `report.md`
//! gather whichever sections exist.

use std::path::Path;

use albumfill_core::engine::CONFIG_FILE;
use albumfill_core::judge::{JudgeReport, DIMENSIONS};
use serde_json::{json, Map, Value};

use crate::error::CliError;

pub const SECTIONS: [&str; 3] = ["retrieval", "completion", "judge"];
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

fn section_file(section: &str, ext: &str) -> String {
    format!("{section}_report.{ext}")
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_section(
    run_dir: &Path,
    section: &str,
    value: &Value,
    markdown: &str,
) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).expect("report serialises") + "\n";
    write(&run_dir.join(section_file(section, "json")), &body)?;
    write(&run_dir.join(section_file(section, "md")), markdown)?;
    assemble(run_dir)?;
    Ok(())
}

/// Rebuilds `report.json` and `report.md` from the sections on disk.
pub fn assemble(run_dir: &Path) -> Result<Value, CliError> {
    let run_id = run_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut report = Map::new();
    report.insert("run_id".into(), json!(run_id));
    if let Ok(text) = std::fs::read_to_string(run_dir.join(CONFIG_FILE)) {
        if let Ok(config) = serde_json::from_str::<Value>(&text) {
            report.insert("config".into(), config);
        }
    }
    let mut md = format!("# Run {run_id}\n");
    let mut found = 0;
    for section in SECTIONS {
        let path = run_dir.join(section_file(section, "json"));
        let Ok(text) = std::fs::read_to_string(&path) else {
            continue;
        };
        let value: Value = serde_json::from_str(&text).map_err(|e| CliError::io(&path, e))?;
        report.insert(section.into(), value);
        if let Ok(part) = std::fs::read_to_string(run_dir.join(section_file(section, "md"))) {
            md.push_str(&format!("\n## {}\n\n{part}", capitalise(section)));
        }
        found += 1;
    }
    if found == 0 {
        return Err(CliError::new(
            "no_report",
            format!("{}: no evaluation has been run yet", run_dir.display()),
        ));
    }
    let value = Value::Object(report);
    write(
        &run_dir.join(REPORT_JSON),
        &(serde_json::to_string_pretty(&value).expect("report serialises") + "\n"),
    )?;
    write(&run_dir.join(REPORT_MD), &md)?;
    Ok(value)
}

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

pub fn judge_markdown(report: &JudgeReport) -> String {
    let mut out = String::from("| Judge | N |");
    for (_, name, _) in DIMENSIONS {
        out.push_str(&format!(" {name} |"));
    }
    out.push_str("\n|---|---:|");
    out.push_str(&"---:|".repeat(DIMENSIONS.len()));
    out.push_str(&format!("\n| {} | {} |", report.judge_model, report.judged));
    for (field, _, _) in DIMENSIONS {
        match report.mean(field) {
            Some(v) => out.push_str(&format!(" {v:.2} |")),
            None => out.push_str(" \u{2014} |"),
        }
    }
    out.push('\n');
    if report.excluded > 0 {
        out.push_str(&format!(
            "\n{} case(s) excluded after an unparseable reply or failed call.\n",
            report.excluded
        ));
    }
    out.push_str(&format!("\nPrompt version: {}\n", report.prompt_version));
    out
}
