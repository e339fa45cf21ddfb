//! Prediction files: one JSONL record per figure with the raw generated text
//! and the detector output.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use panelcap_core::detection::ScoredBox;
use panelcap_core::model::Prediction;
use serde::{Deserialize, Serialize};

use crate::dataset::{parse_box, parse_label, Loaded};
use crate::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub label: String,
    pub bbox_xyxy: [f64; 4],
    pub score: f64,
}

impl DetectionRecord {
    pub fn to_scored(&self) -> Result<ScoredBox> {
        if !(self.score.is_finite()) {
            return Err(Error::Invalid(format!("non-finite score {}", self.score)));
        }
        Ok(ScoredBox {
            label: parse_label(&self.label)?,
            bbox: parse_box(self.bbox_xyxy)?,
            score: self.score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub figure_id: String,
    pub raw_output: String,
    #[serde(default)]
    pub detections: Vec<DetectionRecord>,
}

impl PredictionRecord {
    /// Detections ordered by descending score.
    pub fn from_prediction(figure_id: &str, p: &Prediction) -> Self {
        let mut detections: Vec<DetectionRecord> = p
            .detections
            .iter()
            .map(|d| DetectionRecord {
                label: d.label().to_string(),
                bbox_xyxy: d.bbox.to_xyxy(),
                score: d.score,
            })
            .collect();
        detections.sort_by(|a, b| b.score.total_cmp(&a.score));
        Self {
            figure_id: figure_id.into(),
            raw_output: p.raw_output.clone(),
            detections,
        }
    }
}

/// Element of a detection answer in the `[0, 1000]` integer-class format:
/// `{"class": 0, "bbox_2d": [x0, y0, x1, y1]}`, class 0 meaning panel A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box2d {
    pub class: i64,
    pub bbox_2d: [f64; 4],
    #[serde(default)]
    pub score: Option<f64>,
}

/// Converts a `[0, 1000]` class-integer answer into detection records.
/// Entries without a score get 1.0.
pub fn from_box2d(items: &[Box2d]) -> Result<Vec<DetectionRecord>> {
    items
        .iter()
        .map(|b| {
            let label = u8::try_from(b.class)
                .ok()
                .filter(|c| *c < 26)
                .map(|c| char::from(b'A' + c))
                .ok_or_else(|| Error::Invalid(format!("class {} outside [0, 25]", b.class)))?;
            let [x0, y0, x1, y1] = b.bbox_2d.map(|v| v / 1000.0);
            let rec = DetectionRecord {
                label: label.to_string(),
                bbox_xyxy: [x0, y0, x1, y1],
                score: b.score.unwrap_or(1.0),
            };
            rec.to_scored()?;
            Ok(rec)
        })
        .collect()
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads predictions keyed by figure id. Malformed lines and repeated ids
/// (after the first) are skipped.
pub fn read_predictions(path: &Path) -> Result<Loaded<PredictionRecord>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Loaded::default();
    let mut seen = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PredictionRecord>(&line) {
            Ok(r) if seen.insert(r.figure_id.clone(), ()).is_none() => out.items.push(r),
            Ok(r) => out.skipped.push(format!("{}:{}: duplicate figure id {}", path.display(), n + 1, r.figure_id)),
            Err(e) => out.skipped.push(format!("{}:{}: {e}", path.display(), n + 1)),
        }
    }
    Ok(out)
}
