//! Evaluation reports and their JSON and CSV renderings.

use std::io::Write;

use panelcap_core::detection::MapReport;
use panelcap_core::eval::{AggregateReport, FigureEvalRecord, MetricScores};
use serde::Serialize;

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoresRow {
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub meteor: f64,
    pub bertscore: f64,
}

impl From<MetricScores> for ScoresRow {
    fn from(s: MetricScores) -> Self {
        Self {
            bleu4: s.bleu4,
            rouge_l: s.rouge_l,
            meteor: s.meteor,
            bertscore: s.bertscore,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FigureRow {
    pub figure_id: String,
    pub pairs: usize,
    #[serde(flatten)]
    pub scores: ScoresRow,
}

impl From<&FigureEvalRecord> for FigureRow {
    fn from(r: &FigureEvalRecord) -> Self {
        Self {
            figure_id: r.figure_id.clone(),
            pairs: r.pairs.len(),
            scores: r.scores.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaptionReport {
    pub per_figure: Vec<FigureRow>,
    pub dataset: ScoresRow,
    /// Figures entering the dataset mean.
    pub figures: usize,
    /// Figures without ground-truth panels.
    pub excluded_figures: usize,
    /// Share of ground-truth figures whose output has at least one labeled
    /// line and a `[DET]` terminator.
    pub parse_rate: f64,
    pub missing_predictions: usize,
    pub skipped_records: usize,
}

impl CaptionReport {
    pub fn new(records: &[FigureEvalRecord], agg: &AggregateReport, parse_rate: f64, missing: usize, skipped: usize) -> Self {
        Self {
            per_figure: records.iter().map(FigureRow::from).collect(),
            dataset: agg.scores.into(),
            figures: agg.figures,
            excluded_figures: agg.skipped,
            parse_rate,
            missing_predictions: missing,
            skipped_records: skipped,
        }
    }

    fn summary(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("bleu4", self.dataset.bleu4),
            ("rougeL", self.dataset.rouge_l),
            ("meteor", self.dataset.meteor),
            ("bertscore", self.dataset.bertscore),
            ("parse_rate", self.parse_rate),
            ("figures", self.figures as f64),
            ("excluded_figures", self.excluded_figures as f64),
            ("missing_predictions", self.missing_predictions as f64),
            ("skipped_records", self.skipped_records as f64),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    #[serde(rename = "mAP@0.5:0.95")]
    pub map_50_95: f64,
    #[serde(rename = "mAP@0.5")]
    pub map_50: f64,
    pub per_threshold: Vec<(f64, f64)>,
    pub figures: usize,
    pub missing_predictions: usize,
    pub skipped_records: usize,
}

impl DetectionReport {
    pub fn new(m: &MapReport, thresholds: &[f64], figures: usize, missing: usize, skipped: usize) -> Self {
        Self {
            map_50_95: m.map_range,
            map_50: m.map_50,
            per_threshold: thresholds.iter().copied().zip(m.per_threshold.iter().copied()).collect(),
            figures,
            missing_predictions: missing,
            skipped_records: skipped,
        }
    }

    fn summary(&self) -> Vec<(String, f64)> {
        let mut rows = vec![("mAP@0.5:0.95".to_string(), self.map_50_95), ("mAP@0.5".to_string(), self.map_50)];
        rows.extend(self.per_threshold.iter().map(|(t, ap)| (format!("AP@{t:.2}"), *ap)));
        rows.push(("figures".into(), self.figures as f64));
        rows.push(("missing_predictions".into(), self.missing_predictions as f64));
        rows.push(("skipped_records".into(), self.skipped_records as f64));
        rows
    }
}

fn write_rows<W: Write, K: AsRef<str>>(w: W, rows: &[(K, f64)]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["metric", "value"])?;
    for (k, v) in rows {
        c.write_record([k.as_ref(), &v.to_string()])?;
    }
    c.flush()?;
    Ok(())
}

fn write_json<W: Write, T: Serialize>(mut w: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

/// JSON writes the full report; CSV writes a `metric,value` summary.
pub fn write_caption<W: Write>(w: W, r: &CaptionReport, f: Format) -> Result<()> {
    match f {
        Format::Json => write_json(w, r),
        Format::Csv => write_rows(w, &r.summary()),
    }
}

pub fn write_detection<W: Write>(w: W, r: &DetectionReport, f: Format) -> Result<()> {
    match f {
        Format::Json => write_json(w, r),
        Format::Csv => write_rows(w, &r.summary()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub splits: Vec<crate::dataset::StatsRow>,
}

pub fn write_stats<W: Write>(w: W, r: &StatsReport, f: Format) -> Result<()> {
    match f {
        Format::Json => write_json(w, r),
        Format::Csv => {
            let mut c = csv::Writer::from_writer(w);
            for row in &r.splits {
                c.serialize(row)?;
            }
            c.flush()?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_summary_shape() {
        let r = DetectionReport {
            map_50_95: 0.5,
            map_50: 0.75,
            per_threshold: vec![(0.5, 0.75)],
            figures: 2,
            missing_predictions: 0,
            skipped_records: 0,
        };
        let mut out = Vec::new();
        write_detection(&mut out, &r, Format::Csv).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("metric,value\nmAP@0.5:0.95,0.5\nmAP@0.5,0.75\nAP@0.50,0.75\n"));
        let mut json = Vec::new();
        write_detection(&mut json, &r, Format::Json).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
        assert_eq!(v["mAP@0.5"], 0.75);
    }
}
