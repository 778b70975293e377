use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Keys whose values are percentages, written with exactly two decimals.
const PERCENT_KEYS: [&str; 5] = ["accuracy", "aupr", "auroc", "fpr90", "fpr95"];

/// A `[0, 1]` metric as a percentage rounded to two decimals.
pub fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub defense: String,
    pub attack: String,
    pub budget: usize,
    pub ratio: f64,
    pub malicious: usize,
    pub clean: usize,
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    pub fpr90: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictimSummary {
    pub accuracy: f64,
    pub content_hash: String,
    /// Whether the victim hash after evaluation equals the hash at load time.
    pub unchanged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub defense: String,
    pub alpha: f64,
    pub c_rec: f64,
    pub c_dev: f64,
    pub threshold: f64,
}

/// Mean scoring-mask reconstruction error after an MAE epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsPoint {
    pub epoch: usize,
    pub clean_mean: f64,
    pub noise_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub embed: usize,
    pub auroc: f64,
}

/// Wall-clock seconds per stage. Kept out of the canonical report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub stages: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub victim: VictimSummary,
    pub detectors: Vec<DetectorSummary>,
    pub rows: Vec<ReportRow>,
    pub mae_dynamics: Vec<DynamicsPoint>,
    pub embedding_sweep: Vec<SweepPoint>,
    #[serde(skip)]
    pub runtime: RuntimeReport,
}

impl ExperimentReport {
    pub fn row(&self, defense: &str, attack: &str, budget: usize, ratio: f64) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.defense == defense && r.attack == attack && r.budget == budget && r.ratio == ratio)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!("report schema version {} is not supported", r.schema_version)));
        }
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::invalid(format!("unknown report format `{other}`"))),
        }
    }
}

/// Sorted keys, two-space indent, percentages with two decimals and all
/// other floats in shortest round-trip form.
pub fn canonical_json(report: &ExperimentReport) -> Result<String> {
    let v = serde_json::to_value(report)?;
    let mut out = String::new();
    write_value(&mut out, &v, None, 0);
    out.push('\n');
    Ok(out)
}

fn write_value(out: &mut String, v: &Value, key: Option<&str>, depth: usize) {
    let pad = |out: &mut String, d: usize| out.extend(std::iter::repeat("  ").take(d));
    match v {
        Value::Object(m) if m.is_empty() => out.push_str("{}"),
        Value::Object(m) => {
            // serde_json's map is a BTreeMap, so iteration is already sorted
            out.push_str("{\n");
            for (i, (k, x)) in m.iter().enumerate() {
                pad(out, depth + 1);
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_value(out, x, Some(k), depth + 1);
                out.push_str(if i + 1 < m.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push('}');
        }
        Value::Array(a) if a.is_empty() => out.push_str("[]"),
        Value::Array(a) => {
            out.push_str("[\n");
            for (i, x) in a.iter().enumerate() {
                pad(out, depth + 1);
                write_value(out, x, key, depth + 1);
                out.push_str(if i + 1 < a.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push(']');
        }
        Value::Number(n) if key.is_some_and(|k| PERCENT_KEYS.contains(&k)) => {
            let _ = write!(out, "{:.2}", n.as_f64().unwrap_or(f64::NAN));
        }
        other => out.push_str(&other.to_string()),
    }
}

fn csv_text(report: &ExperimentReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["defense", "attack", "budget", "ratio", "malicious", "clean", "auroc", "aupr", "fpr95", "fpr90"])
        .map_err(io)?;
    for r in &report.rows {
        w.write_record([
            r.defense.clone(),
            r.attack.clone(),
            r.budget.to_string(),
            r.ratio.to_string(),
            r.malicious.to_string(),
            r.clean.to_string(),
            format!("{:.2}", r.auroc),
            format!("{:.2}", r.aupr),
            format!("{:.2}", r.fpr95),
            format!("{:.2}", r.fpr90),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(format!("csv: {e}")))
}

/// One table per (budget, ratio): defenses down, attacks across, each attack
/// spanning AUROC/AUPR/FPR95 columns.
fn markdown_text(report: &ExperimentReport) -> String {
    let mut out = format!("# {}\n\nVictim accuracy: {:.2}%\n", report.name, report.victim.accuracy);
    let mut attacks: Vec<&str> = Vec::new();
    let mut defenses: Vec<&str> = Vec::new();
    let mut cells: Vec<(usize, f64)> = Vec::new();
    for r in &report.rows {
        if !attacks.contains(&r.attack.as_str()) {
            attacks.push(&r.attack);
        }
        if !defenses.contains(&r.defense.as_str()) {
            defenses.push(&r.defense);
        }
        if !cells.contains(&(r.budget, r.ratio)) {
            cells.push((r.budget, r.ratio));
        }
    }
    for (budget, ratio) in cells {
        let _ = write!(out, "\n## B = {budget}, malicious ratio = {ratio}\n\n| Method |");
        for a in &attacks {
            let _ = write!(out, " {a} AUROC↑ | {a} AUPR↑ | {a} FPR95↓ |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(3 * attacks.len()));
        out.push('\n');
        for d in &defenses {
            let _ = write!(out, "| {d} |");
            for a in &attacks {
                match report.row(d, a, budget, ratio) {
                    Some(r) => {
                        let _ = write!(out, " {:.2} | {:.2} | {:.2} |", r.auroc, r.aupr, r.fpr95);
                    }
                    None => out.push_str(" - | - | - |"),
                }
            }
            out.push('\n');
        }
    }
    if !report.mae_dynamics.is_empty() {
        out.push_str("\n## MAE reconstruction error\n\n| Epoch | Clean | Noise |\n|---:|---:|---:|\n");
        for p in &report.mae_dynamics {
            let _ = writeln!(out, "| {} | {:.5} | {:.5} |", p.epoch, p.clean_mean, p.noise_mean);
        }
    }
    if !report.embedding_sweep.is_empty() {
        out.push_str("\n## Embedding size\n\n| Embed | Reconstruction AUROC |\n|---:|---:|\n");
        for p in &report.embedding_sweep {
            let _ = writeln!(out, "| {} | {:.2} |", p.embed, p.auroc);
        }
    }
    out
}

/// Writes `report.json`, `report.csv` and/or `report.md` into `dir`, plus
/// `runtime.json` when timings are present. Returns the written paths.
pub fn emit_report(report: &ExperimentReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    for f in formats {
        match f {
            ReportFormat::Json => put("report.json", canonical_json(report)?)?,
            ReportFormat::Csv => put("report.csv", csv_text(report)?)?,
            ReportFormat::Markdown => put("report.md", markdown_text(report))?,
        }
    }
    if !report.runtime.stages.is_empty() {
        put("runtime.json", serde_json::to_string_pretty(&report.runtime)? + "\n")?;
    }
    Ok(written)
}
