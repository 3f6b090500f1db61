//! Tabular reports in CSV and markdown.

use std::path::Path;

use lesionbench_core::metrics::{EvalReport, MetricKind, Metrics};

use crate::bench::BenchReport;
use crate::error::{io, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 cells")
    }

    pub fn to_markdown(&self) -> String {
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        let mut out = line(&self.header);
        out.push_str(&line(&vec!["---".to_string(); self.header.len()]));
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }
}

/// Several tables written one after another (the per-type blocks).
pub fn stacked_csv(tables: &[Table]) -> String {
    tables.iter().map(Table::to_csv).collect()
}

pub fn stacked_markdown(tables: &[Table]) -> String {
    tables.iter().map(Table::to_markdown).collect::<Vec<_>>().join("\n")
}

/// Two decimals; undefined values print as `-`.
pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Three significant digits with trailing zeros dropped, e.g. `8.23M`,
/// `12.5M`, `13M`.
pub fn fmt_param_count(n: u64) -> String {
    let (value, suffix) = match n {
        0..1_000 => return n.to_string(),
        1_000..1_000_000 => (n as f64 / 1e3, "K"),
        _ => (n as f64 / 1e6, "M"),
    };
    let int_digits = value.log10().floor() as i32 + 1;
    let decimals = (3 - int_digits).max(0) as usize;
    let mut s = format!("{value:.decimals$}");
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    format!("{s}{suffix}")
}

pub fn fmt_mm_ss(d: std::time::Duration) -> String {
    let s = d.as_secs_f64().round() as u64;
    format!("{:02}:{:02}", s / 60, s % 60)
}

/// DICE, SENSITIVITY and PRECISION blocks with one column per report and
/// one row per lesion type, ending with `Total`.
pub fn supplementary_tables(reports: &[EvalReport], region: usize) -> Vec<Table> {
    [MetricKind::Dice, MetricKind::Sensitivity, MetricKind::Precision]
        .into_iter()
        .map(|kind| {
            let mut header = vec![kind.heading().to_string()];
            header.extend(reports.iter().map(|r| r.meta.model.clone()));
            let columns: Vec<Vec<(String, Option<f64>)>> = reports.iter().map(|r| r.supplementary_rows(kind, region)).collect();
            // a type present in any report gets a row in all columns
            let mut labels: Vec<String> = Vec::new();
            for col in &columns {
                for (l, _) in col {
                    if !labels.contains(l) {
                        labels.push(l.clone());
                    }
                }
            }
            let order = |l: &String| columns.iter().find_map(|c| c.iter().position(|(x, _)| x == l)).unwrap_or(usize::MAX);
            labels.sort_by_key(order);
            let rows = labels
                .iter()
                .map(|l| {
                    let mut row = vec![l.clone()];
                    row.extend(columns.iter().map(|c| fmt_metric(c.iter().find(|(x, _)| x == l).and_then(|(_, v)| *v))));
                    row
                })
                .collect();
            Table { header, rows }
        })
        .collect()
}

pub const TABLE2_HEADER: [&str; 7] = [
    "model",
    "num parameters",
    "batch sampler",
    "loss function",
    "val precision",
    "val sensitivity",
    "val hard-dice",
];

/// One row per report with overall metrics of `region`.
pub fn performance_table(reports: &[EvalReport], region: usize) -> Table {
    Table {
        header: TABLE2_HEADER.iter().map(|s| s.to_string()).collect(),
        rows: reports
            .iter()
            .map(|r| {
                let m: &Metrics = &r.overall[region];
                vec![
                    r.meta.model.clone(),
                    r.meta.num_parameters.to_string(),
                    r.meta.sampler.clone(),
                    r.meta.loss.clone(),
                    fmt_metric(m.precision),
                    fmt_metric(m.sensitivity),
                    fmt_metric(m.dice),
                ]
            })
            .collect(),
    }
}

/// Per-region dice rows (whole / core / enhancing for BraTS labels).
pub fn region_dice_table(reports: &[EvalReport]) -> Table {
    let mut header: Vec<String> = ["model", "batch-sampler", "loss_function"].iter().map(|s| s.to_string()).collect();
    if let Some(r) = reports.first() {
        header.extend(r.regions.iter().cloned());
    }
    Table {
        header,
        rows: reports
            .iter()
            .map(|r| {
                let mut row = vec![r.meta.model.clone(), r.meta.sampler.clone(), r.meta.loss.clone()];
                row.extend(r.overall.iter().map(|m| fmt_metric(m.dice)));
                row
            })
            .collect(),
    }
}

pub const TIME_ROW: &str = "Inference time (minutes:seconds)";
pub const PARAMS_ROW: &str = "Number of parameters";

/// Models as columns; inference time and parameter count as rows.
pub fn inference_table(benches: &[BenchReport]) -> Table {
    let mut header = vec![String::new()];
    header.extend(benches.iter().map(|b| b.model.clone()));
    let mut time = vec![TIME_ROW.to_string()];
    time.extend(benches.iter().map(|b| fmt_mm_ss(b.elapsed)));
    let mut params = vec![PARAMS_ROW.to_string()];
    params.extend(benches.iter().map(|b| fmt_param_count(b.num_parameters)));
    Table {
        header,
        rows: vec![time, params],
    }
}

/// Per-case metrics, one column per region and metric.
pub fn case_table(report: &EvalReport) -> Table {
    let mut header = vec!["case_id".to_string(), "diagnosis".to_string()];
    for region in &report.regions {
        for m in ["dice", "precision", "sensitivity"] {
            header.push(format!("{region}_{m}"));
        }
    }
    let num = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    let rows = report
        .cases
        .iter()
        .map(|c| {
            let mut row = vec![c.case_id.clone(), c.diagnosis.tag().to_string()];
            for m in &c.metrics {
                row.extend([num(m.dice), num(m.precision), num(m.sensitivity)]);
            }
            row
        })
        .collect();
    Table { header, rows }
}

pub fn write_table(dir: &Path, stem: &str, table: &Table) -> Result<()> {
    write_text(dir, &format!("{stem}.csv"), &table.to_csv())?;
    write_text(dir, &format!("{stem}.md"), &table.to_markdown())
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(io(&path))
}

/// Everything `evaluate` emits for one report.
pub fn write_eval_outputs(dir: &Path, report: &EvalReport) -> Result<()> {
    let reports = std::slice::from_ref(report);
    write_table(dir, "performance", &performance_table(reports, 0))?;
    if report.regions.len() > 1 {
        write_table(dir, "regions", &region_dice_table(reports))?;
    }
    let blocks = supplementary_tables(reports, 0);
    write_text(dir, "per_type.csv", &stacked_csv(&blocks))?;
    write_text(dir, "per_type.md", &stacked_markdown(&blocks))?;
    write_table(dir, "cases", &case_table(report))?;
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    write_text(dir, "report.json", &json)
}
