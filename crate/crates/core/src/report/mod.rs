//! CSV/JSON result files and SVG rendering of a results directory.
//!
//! CSV files use `,` delimiters, `.` decimals and a header row; floats are
//! written at full precision. SVG value labels print three decimals.

pub mod svg;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{Delta, FoldMetrics, GapReport, SweepPoint, LABELS};

pub const FOLD_METRICS_CSV: &str = "fold_metrics.csv";
pub const GAP_REPORT_JSON: &str = "gap_report.json";
pub const GAP_REPORT_CSV: &str = "gap_report.csv";
pub const SWEEP_CURVES_CSV: &str = "sweep_curves.csv";
pub const IMPROVEMENT_CSV: &str = "improvement.csv";

/// Dice of one fold model on one evaluation set and label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub evaluation_dataset: String,
    pub modality: String,
    pub fold: usize,
    pub label: String,
    pub dice: f64,
}

impl FoldRow {
    pub fn set_name(&self) -> String {
        format!("{} {}", self.evaluation_dataset, self.modality)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: u8,
    pub n: usize,
    pub evaluation_set: String,
    pub label: String,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub method: u8,
    pub evaluation_set: String,
    pub label: String,
    pub baseline: f64,
    pub finetuned: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GapCsvRow<'a> {
    evaluation_dataset: &'a str,
    modality: &'a str,
    label: &'a str,
    mean: f64,
    sd: f64,
    folds: usize,
}

pub fn fold_rows(training_dataset: &str, unseen_dataset: Option<&str>, folds: &[FoldMetrics]) -> Vec<FoldRow> {
    let mut rows = vec![];
    for f in folds {
        let mut sets = vec![(training_dataset, "train", f.train), (training_dataset, "test", f.test)];
        if let (Some(name), Some(u)) = (unseen_dataset, f.unseen) {
            sets.push((name, "all", u));
        }
        for (dataset, modality, scores) in sets {
            for (label, dice) in LABELS.iter().zip(scores.values()) {
                rows.push(FoldRow {
                    evaluation_dataset: dataset.into(),
                    modality: modality.into(),
                    fold: f.fold,
                    label: label.to_string(),
                    dice,
                });
            }
        }
    }
    rows
}

pub fn sweep_rows(points: &[SweepPoint]) -> Vec<SweepRow> {
    let mut rows = vec![];
    for p in points {
        for (set, scores) in crate::experiments::SetScores::NAMES.iter().zip(p.scores.sets()) {
            for (label, dice) in LABELS.iter().zip(scores.values()) {
                rows.push(SweepRow {
                    method: p.method as u8,
                    n: p.n,
                    evaluation_set: set.to_string(),
                    label: label.to_string(),
                    dice,
                });
            }
        }
    }
    rows
}

pub fn delta_rows(method: u8, deltas: &[Delta]) -> Vec<DeltaRow> {
    deltas
        .iter()
        .map(|d| DeltaRow {
            method,
            evaluation_set: d.evaluation_set.clone(),
            label: d.label.clone(),
            baseline: d.baseline,
            finetuned: d.finetuned,
            delta: d.delta,
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse { path: path.to_path_buf(), message: e.to_string() }
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().collect::<std::result::Result<Vec<R>, _>>().map_err(|e| csv_err(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `gap_report.json` and its flat `gap_report.csv` companion.
pub fn write_gap_report(dir: &Path, report: &GapReport) -> Result<()> {
    write_json(&dir.join(GAP_REPORT_JSON), report)?;
    let rows: Vec<GapCsvRow> = report
        .rows
        .iter()
        .map(|r| GapCsvRow {
            evaluation_dataset: &r.evaluation_dataset,
            modality: &r.modality,
            label: &r.label,
            mean: r.mean,
            sd: r.sd,
            folds: r.folds,
        })
        .collect();
    write_csv(&dir.join(GAP_REPORT_CSV), &rows)
}

#[derive(Debug, Default)]
pub struct RenderSummary {
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn write_svg(path: PathBuf, doc: String, summary: &mut RenderSummary) -> Result<()> {
    std::fs::write(&path, doc).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    summary.written.push(path);
    Ok(())
}

/// Renders every plot whose CSV exists in `dir`; missing inputs become warnings.
pub fn render_plots(dir: &Path) -> Result<RenderSummary> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("results directory {} does not exist", dir.display())));
    }
    let mut summary = RenderSummary::default();
    let folds = dir.join(FOLD_METRICS_CSV);
    if folds.exists() {
        let rows: Vec<FoldRow> = read_csv(&folds)?;
        write_svg(dir.join("boxplot.svg"), svg::boxplot(&rows), &mut summary)?;
    } else {
        summary.warnings.push(format!("{FOLD_METRICS_CSV} missing; boxplot skipped"));
    }
    let sweep = dir.join(SWEEP_CURVES_CSV);
    if sweep.exists() {
        let rows: Vec<SweepRow> = read_csv(&sweep)?;
        let mut methods: Vec<u8> = rows.iter().map(|r| r.method).collect();
        methods.sort_unstable();
        methods.dedup();
        for m in methods {
            write_svg(dir.join(format!("sweep_method{m}.svg")), svg::sweep_curves(&rows, m), &mut summary)?;
        }
    } else {
        summary.warnings.push(format!("{SWEEP_CURVES_CSV} missing; sweep curves skipped"));
    }
    let deltas = dir.join(IMPROVEMENT_CSV);
    if deltas.exists() {
        let rows: Vec<DeltaRow> = read_csv(&deltas)?;
        let mut methods: Vec<u8> = rows.iter().map(|r| r.method).collect();
        methods.sort_unstable();
        methods.dedup();
        for m in methods {
            write_svg(dir.join(format!("delta_method{m}.svg")), svg::delta_bars(&rows, m), &mut summary)?;
        }
    } else {
        summary.warnings.push(format!("{IMPROVEMENT_CSV} missing; delta bars skipped"));
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{FinetuneMethod, LabelScores, SetScores};

    fn scores(base: f64) -> LabelScores {
        LabelScores { labels: base, rv: base - 0.031, lv: base + 0.0417, myo: base - 0.0123 }
    }

    fn folds() -> Vec<FoldMetrics> {
        (0..4)
            .map(|i| FoldMetrics {
                fold: i,
                train_patients: vec![],
                test_patients: vec![],
                best_epoch: Some(3),
                epochs_run: 5,
                train: scores(0.91 + 0.0031 * i as f64),
                test: scores(0.88 - 0.0047 * i as f64),
                unseen: Some(scores(0.75 + 0.0023 * i as f64)),
            })
            .collect()
    }

    fn sweep() -> Vec<SweepPoint> {
        let mut points = vec![];
        for method in [FinetuneMethod::Retrain, FinetuneMethod::BOnly] {
            for (i, n) in crate::experiments::n_schedule(2, 12, 10).into_iter().enumerate() {
                let t = i as f64 * 0.01;
                points.push(SweepPoint {
                    method,
                    n,
                    added_patients: vec![],
                    best_epoch: None,
                    epochs_run: 0,
                    scores: SetScores { a_train: scores(0.9), a_test: scores(0.87 - t / 10.0), b_unseen: scores(0.7 + t) },
                });
            }
        }
        points
    }

    fn xml_texts<'a>(doc: &'a roxmltree::Document, class: &str) -> Vec<&'a str> {
        doc.descendants()
            .filter(|n| n.attribute("class") == Some(class))
            .filter_map(|n| n.text())
            .collect()
    }

    #[test]
    fn csv_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let rows = fold_rows("A", Some("B"), &folds());
        assert_eq!(rows.len(), 4 * 3 * 4);
        let path = dir.path().join(FOLD_METRICS_CSV);
        write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "evaluation_dataset,modality,fold,label,dice");
        assert!(!text.contains(';'));
        assert_eq!(read_csv::<FoldRow>(&path).unwrap(), rows);
    }

    #[test]
    fn plots_are_xml_with_expected_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_csv(&dir.path().join(FOLD_METRICS_CSV), &fold_rows("A", Some("B"), &folds())).unwrap();
        write_csv(&dir.path().join(SWEEP_CURVES_CSV), &sweep_rows(&sweep())).unwrap();
        let base = SetScores { a_train: scores(0.9), a_test: scores(0.87), b_unseen: scores(0.7) };
        let best = SetScores { b_unseen: scores(0.79), ..base };
        let deltas = delta_rows(3, &crate::experiments::improvement_summary(&base, &best));
        write_csv(&dir.path().join(IMPROVEMENT_CSV), &deltas).unwrap();
        let summary = render_plots(dir.path()).unwrap();
        assert!(summary.warnings.is_empty(), "{:?}", summary.warnings);
        assert_eq!(summary.written.len(), 4);

        let text = std::fs::read_to_string(dir.path().join("boxplot.svg")).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let groups: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("boxgroup")).collect();
        assert_eq!(groups.len(), 4 * 3);
        for g in groups {
            assert_eq!(g.children().filter(|c| c.attribute("class") == Some("point")).count(), 4);
        }

        let text = std::fs::read_to_string(dir.path().join("sweep_method1.svg")).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let curves: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("curve")).collect();
        assert_eq!(curves.len(), 4 * 3);
        for c in curves {
            assert_eq!(c.children().filter(|m| m.attribute("class") == Some("marker")).count(), 10);
        }

        let text = std::fs::read_to_string(dir.path().join("delta_method3.svg")).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let labels = xml_texts(&doc, "value");
        assert_eq!(labels.len(), 12);
        let mut labels: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        let mut expected: Vec<String> = deltas.iter().map(|r| format!("{:+.3}", r.delta)).collect();
        labels.sort();
        expected.sort();
        assert_eq!(labels, expected);
    }

    #[test]
    fn svg_labels_match_csv_at_printed_precision() {
        let dir = tempfile::tempdir().unwrap();
        let rows = sweep_rows(&sweep());
        write_csv(&dir.path().join(SWEEP_CURVES_CSV), &rows).unwrap();
        render_plots(dir.path()).unwrap();
        let back: Vec<SweepRow> = read_csv(&dir.path().join(SWEEP_CURVES_CSV)).unwrap();
        let text = std::fs::read_to_string(dir.path().join("sweep_method3.svg")).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let titles: Vec<&str> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("marker"))
            .flat_map(|m| m.children().filter_map(|c| c.text()))
            .collect();
        let expected: Vec<String> = LABELS
            .iter()
            .flat_map(|label| {
                let back = &back;
                crate::experiments::SetScores::NAMES.iter().flat_map(move |set| {
                    back.iter()
                        .filter(move |r| r.method == 3 && r.label == *label && r.evaluation_set == *set)
                        .map(|r| format!("n={} {:.3}", r.n, r.dice))
                })
            })
            .collect();
        assert_eq!(titles, expected);
    }

    #[test]
    fn partial_results_warn() {
        let dir = tempfile::tempdir().unwrap();
        let summary = render_plots(dir.path()).unwrap();
        assert!(summary.written.is_empty());
        assert_eq!(summary.warnings.len(), 3);
        assert!(render_plots(&dir.path().join("absent")).is_err());
    }
}
