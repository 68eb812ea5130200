//! Run-level outputs recomputed from the persisted cell records: the
//! approach × dataset grid, per-cell metric table, negative-awareness
//! table, long-form CSV and metrics.json.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellEntry, CellStatus, RunManifest};
use crate::correct::CorrectionLog;
use crate::corpus::TaskKind;
use crate::error::{Error, Result};
use crate::generate::GenerationRecord;
use crate::metrics::{score, MetricReport, Prf};
use crate::util::{jsonl_bytes, read_jsonl, write_if_changed};

pub const TRUE_RATE_COLUMN: &str = "True negative awareness rate";
pub const FAKE_RATE_COLUMN: &str = "Fake negative awareness rate";
/// Rendering of a rate whose denominator is zero.
pub const UNDEFINED: &str = "—";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub cell: String,
    pub dataset: String,
    pub task: TaskKind,
    pub corpus: String,
    pub retriever: String,
    pub backend: String,
    pub metrics: MetricReport,
}

impl CellMetrics {
    fn approach(&self) -> String {
        format!("{} / {} / {}", self.corpus, self.retriever, self.backend)
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub cells: Vec<CellMetrics>,
    pub markdown: String,
    pub csv: String,
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    cell: &'a str,
    #[serde(flatten)]
    row: &'a T,
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn opt_pct(x: Option<f64>) -> String {
    x.map_or(UNDEFINED.to_string(), pct)
}

fn md_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn md_header(cols: &[&str]) -> String {
    let mut s = md_row(&cols.iter().map(|c| c.to_string()).collect::<Vec<_>>());
    s += &md_row(&vec!["---".to_string(); cols.len()]);
    s
}

fn first_seen<'a>(items: impl Iterator<Item = String> + 'a) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

pub fn render_markdown(run_id: &str, cells: &[CellMetrics]) -> String {
    let datasets = first_seen(cells.iter().map(|c| c.dataset.clone()));
    let approaches = first_seen(cells.iter().map(CellMetrics::approach));
    let mut s = format!("# Run `{run_id}`\n\n## Task performance\n\n");
    s += "Micro F1 (macro F1 for natural language inference), percent. `n/a` marks cells that did not finish.\n\n";
    let mut cols = vec!["Approach"];
    cols.extend(datasets.iter().map(String::as_str));
    s += &md_header(&cols);
    for a in &approaches {
        let mut row = vec![a.clone()];
        for d in &datasets {
            row.push(
                cells
                    .iter()
                    .find(|c| &c.dataset == d && &c.approach() == a)
                    .map_or("n/a".to_string(), |c| pct(c.metrics.primary())),
            );
        }
        s += &md_row(&row);
    }

    s += "\n## Per-cell metrics\n\n";
    s += &md_header(&[
        "Cell", "Records", "Precision", "Recall", "F1", "Weighted F1", "Macro F1", "AUROC", "AUPRC",
    ]);
    for c in cells {
        let m = &c.metrics;
        s += &md_row(&[
            c.cell.clone(),
            m.records.to_string(),
            pct(m.micro.precision),
            pct(m.micro.recall),
            pct(m.micro.f1),
            opt_pct(m.weighted.map(|w| w.f1)),
            opt_pct(m.macro_f1),
            opt_pct(m.auroc),
            opt_pct(m.auprc),
        ]);
    }

    let aware: Vec<_> = cells.iter().filter(|c| c.metrics.awareness.is_some()).collect();
    if !aware.is_empty() {
        s += "\n## Negative awareness\n\n";
        s += &md_header(&["Dataset", "Approach", TRUE_RATE_COLUMN, FAKE_RATE_COLUMN, "l_t", "t", "l_f", "f"]);
        for c in aware {
            let a = c.metrics.awareness.expect("filtered");
            s += &md_row(&[
                c.dataset.clone(),
                c.approach(),
                opt_pct(a.true_rate),
                opt_pct(a.fake_rate),
                a.counts.l_t.to_string(),
                a.counts.t.to_string(),
                a.counts.l_f.to_string(),
                a.counts.f.to_string(),
            ]);
        }
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per (cell, metric). Values use the shortest representation that
/// parses back to the same `f64`.
pub fn metric_rows(m: &MetricReport) -> Vec<(String, String)> {
    let mut rows = Vec::new();
    let mut prf = |prefix: &str, p: &Prf| {
        rows.push((format!("{prefix}_precision"), p.precision.to_string()));
        rows.push((format!("{prefix}_recall"), p.recall.to_string()));
        rows.push((format!("{prefix}_f1"), p.f1.to_string()));
    };
    prf("micro", &m.micro);
    if let Some(w) = &m.weighted {
        prf("weighted", w);
    }
    for (name, p) in &m.elements {
        prf(name, p);
    }
    if let Some(x) = m.macro_f1 {
        rows.push(("macro_f1".into(), x.to_string()));
    }
    if let Some(x) = m.auroc {
        rows.push(("auroc".into(), x.to_string()));
    }
    if let Some(x) = m.auprc {
        rows.push(("auprc".into(), x.to_string()));
    }
    if let Some(a) = &m.awareness {
        let r = |x: Option<f64>| x.map_or(UNDEFINED.to_string(), |v| v.to_string());
        rows.push(("true_negative_awareness_rate".into(), r(a.true_rate)));
        rows.push(("fake_negative_awareness_rate".into(), r(a.fake_rate)));
    }
    rows
}

pub fn render_csv(cells: &[CellMetrics]) -> String {
    let mut s = String::from("cell,dataset,task,corpus,retriever,backend,metric,value\n");
    for c in cells {
        for (metric, value) in metric_rows(&c.metrics) {
            let fields = [
                c.cell.as_str(),
                c.dataset.as_str(),
                c.task.as_str(),
                c.corpus.as_str(),
                c.retriever.as_str(),
                c.backend.as_str(),
                metric.as_str(),
                value.as_str(),
            ];
            s += &fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",");
            s.push('\n');
        }
    }
    s
}

fn cell_metrics(e: &CellEntry, records: &[GenerationRecord]) -> Result<CellMetrics> {
    Ok(CellMetrics {
        cell: e.id.clone(),
        dataset: e.dataset.clone(),
        task: e.task,
        corpus: e.corpus.clone(),
        retriever: e.retriever.clone(),
        backend: e.backend.clone(),
        metrics: score(e.task, records, e.label_space.as_ref())?,
    })
}

/// Recompute every metric from the records of done cells and (re)write
/// the run-level files. Files whose content is unchanged are not touched.
pub fn report(run_dir: &Path) -> Result<RunReport> {
    let manifest = RunManifest::load(&run_dir.join("manifest.json"))?;
    let done: Vec<&CellEntry> = manifest.cells.iter().filter(|c| c.status == CellStatus::Done).collect();
    if done.is_empty() {
        return Err(Error::Metric(format!("run `{}` has no finished cells", manifest.run_id)));
    }
    let mut cells = Vec::new();
    let mut all_records = Vec::new();
    let mut all_corrections = Vec::new();
    for e in done {
        let records: Vec<GenerationRecord> = read_jsonl(&run_dir.join(&e.artifacts.records))?;
        let corrections_path = run_dir.join(&e.artifacts.corrections);
        let corrections: Vec<CorrectionLog> = if corrections_path.is_file() {
            read_jsonl(&corrections_path)?
        } else {
            Vec::new()
        };
        cells.push(cell_metrics(e, &records)?);
        for r in &records {
            all_records.push(serde_json::to_value(Tagged { cell: &e.id, row: r })?);
        }
        for c in &corrections {
            all_corrections.push(serde_json::to_value(Tagged { cell: &e.id, row: c })?);
        }
    }
    let markdown = render_markdown(&manifest.run_id, &cells);
    let csv = render_csv(&cells);
    let mut metrics = serde_json::to_vec_pretty(&cells)?;
    metrics.push(b'\n');
    write_if_changed(&run_dir.join("records.jsonl"), &jsonl_bytes(&all_records)?)?;
    write_if_changed(&run_dir.join("corrections.jsonl"), &jsonl_bytes(&all_corrections)?)?;
    write_if_changed(&run_dir.join("metrics.json"), &metrics)?;
    write_if_changed(&run_dir.join("report.md"), markdown.as_bytes())?;
    write_if_changed(&run_dir.join("report.csv"), csv.as_bytes())?;
    Ok(RunReport { cells, markdown, csv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Awareness, AwarenessCounts};

    fn cell(dataset: &str, corpus: &str, f1: f64, awareness: Option<Awareness>) -> CellMetrics {
        CellMetrics {
            cell: format!("{dataset}__{corpus}"),
            dataset: dataset.into(),
            task: TaskKind::TextClassification,
            corpus: corpus.into(),
            retriever: "bm25".into(),
            backend: "echo".into(),
            metrics: MetricReport {
                task: TaskKind::TextClassification,
                records: 10,
                failed: 0,
                micro: Prf {
                    precision: f1,
                    recall: f1,
                    f1,
                },
                weighted: None,
                macro_f1: None,
                elements: Default::default(),
                auroc: None,
                auprc: None,
                awareness,
            },
        }
    }

    #[test]
    fn single_cell_grid_has_one_row() {
        let md = render_markdown("r", &[cell("ade", "labeled", 0.964, None)]);
        let grid: Vec<_> = md
            .split("## Per-cell")
            .next()
            .unwrap()
            .lines()
            .filter(|l| l.starts_with("| ") && !l.starts_with("| Approach") && !l.starts_with("| ---"))
            .collect();
        assert_eq!(grid, ["| labeled / bm25 / echo | 96.40 |"]);
        assert!(!md.contains(TRUE_RATE_COLUMN));
    }

    #[test]
    fn undefined_rate_renders_dash() {
        let a = Awareness {
            true_rate: None,
            fake_rate: Some(1.0),
            counts: AwarenessCounts { l_t: 0, l_f: 3, t: 0, f: 3 },
        };
        let c = cell("ade", "negative", 1.0, Some(a));
        let md = render_markdown("r", &[c.clone()]);
        assert!(md.contains(&format!("| {TRUE_RATE_COLUMN} | {FAKE_RATE_COLUMN} |")));
        assert!(md.contains("| ade | negative / bm25 / echo | — | 100.00 | 0 | 0 | 3 | 3 |"));
        let csv = render_csv(&[c]);
        assert!(csv.contains("true_negative_awareness_rate,—\n"));
        assert!(csv.contains("fake_negative_awareness_rate,1\n"));
    }

    #[test]
    fn grid_missing_cell_is_na() {
        let md = render_markdown("r", &[cell("a", "labeled", 1.0, None), cell("b", "unlabeled", 0.5, None)]);
        assert!(md.contains("| labeled / bm25 / echo | 100.00 | n/a |"));
        assert!(md.contains("| unlabeled / bm25 / echo | n/a | 50.00 |"));
    }

    #[test]
    fn csv_quotes_commas() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("x\"y"), "\"x\"\"y\"");
    }
}
