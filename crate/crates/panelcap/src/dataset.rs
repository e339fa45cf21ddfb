//! JSONL dataset files and PNG images.
//!
//! One record per line:
//! `{"v":1,"figure_id":"train-00000","image":"images/train-00000.png","panels":[{"label":"A","bbox_xyxy":[x0,y0,x1,y1],"caption":"..."}]}`.
//! Relative image paths resolve against the JSONL file's directory.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use panelcap_core::datagen::{Dataset, FigureRecord, SplitStats};
use panelcap_core::detection::{BoxN, PanelAnnotation};
use panelcap_core::image::GrayImage;
use panelcap_core::structured::PanelLabel;
use serde::{Deserialize, Serialize};

use crate::{io_err, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides where generated images are written.
pub const CACHE_ENV: &str = "PANELCAP_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub label: String,
    pub bbox_xyxy: [f64; 4],
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub v: u32,
    pub figure_id: String,
    pub image: String,
    pub panels: Vec<PanelRecord>,
}

pub fn parse_label(s: &str) -> Result<PanelLabel> {
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => PanelLabel::new(c).ok_or_else(|| Error::Invalid(format!("bad panel label {s:?}"))),
        _ => Err(Error::Invalid(format!("bad panel label {s:?}"))),
    }
}

pub fn parse_box(b: [f64; 4]) -> Result<BoxN> {
    let [x0, y0, x1, y1] = b;
    if !b.iter().all(|v| v.is_finite()) || x1 <= x0 || y1 <= y0 {
        return Err(Error::Invalid(format!("bad box {b:?}")));
    }
    BoxN::from_xyxy(x0, y0, x1, y1).ok_or_else(|| Error::Invalid(format!("box {b:?} is empty inside [0,1]")))
}

impl PanelRecord {
    pub fn from_annotation(p: &PanelAnnotation) -> Self {
        Self {
            label: p.label.to_string(),
            bbox_xyxy: p.bbox.to_xyxy(),
            caption: p.caption.clone(),
        }
    }

    pub fn to_annotation(&self) -> Result<PanelAnnotation> {
        if self.caption.trim().is_empty() {
            return Err(Error::Invalid("empty caption".into()));
        }
        Ok(PanelAnnotation {
            label: parse_label(&self.label)?,
            bbox: parse_box(self.bbox_xyxy)?,
            caption: self.caption.clone(),
        })
    }
}

pub fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.pixels().to_vec())
        .ok_or_else(|| Error::Invalid("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_png(path: &Path) -> Result<GrayImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(GrayImage::from_raw(w as usize, h as usize, img.into_raw())?)
}

/// Image directory for a dataset written to `out`: `$PANELCAP_CACHE` if set,
/// else `out/images`.
pub fn image_dir(out: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => out.join("images"),
    }
}

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Writes `{out}/{split}.jsonl` and one PNG per figure into `images`.
pub fn write_split(out: &Path, split: &str, figures: &[FigureRecord], images: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    fs::create_dir_all(images).map_err(io_err(images))?;
    let path = out.join(format!("{split}.jsonl"));
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    for f in figures {
        let png = images.join(format!("{}.png", f.figure_id));
        save_png(&f.image, &png)?;
        let rec = DatasetRecord {
            v: SCHEMA_VERSION,
            figure_id: f.figure_id.clone(),
            image: relative_to(&png, out),
            panels: f.panels.iter().map(PanelRecord::from_annotation).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(path)
}

pub fn write_dataset(out: &Path, ds: &Dataset) -> Result<Vec<PathBuf>> {
    let images = image_dir(out);
    ds.splits().iter().map(|(name, figs)| write_split(out, name, figs, &images)).collect()
}

pub fn record_to_figure(rec: &DatasetRecord, base: &Path) -> Result<FigureRecord> {
    if rec.v != SCHEMA_VERSION {
        return Err(Error::Invalid(format!("{}: schema version {} (expected {SCHEMA_VERSION})", rec.figure_id, rec.v)));
    }
    let img_path = {
        let p = Path::new(&rec.image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    Ok(FigureRecord {
        figure_id: rec.figure_id.clone(),
        image: load_png(&img_path)?,
        panels: rec.panels.iter().map(PanelRecord::to_annotation).collect::<Result<_>>()?,
    })
}

/// Records that parsed, plus a description of every skipped line.
#[derive(Debug)]
pub struct Loaded<T> {
    pub items: Vec<T>,
    pub skipped: Vec<String>,
}

impl<T> Default for Loaded<T> {
    fn default() -> Self {
        Self {
            items: Vec::new(),
            skipped: Vec::new(),
        }
    }
}

/// Reads a dataset split, skipping malformed records.
pub fn read_split(path: &Path) -> Result<Loaded<FigureRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Loaded::default();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<DatasetRecord>(&line)
            .map_err(Error::from)
            .and_then(|r| record_to_figure(&r, base));
        match parsed {
            Ok(f) => out.items.push(f),
            Err(e) => out.skipped.push(format!("{}:{}: {e}", path.display(), n + 1)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub split: String,
    pub figures: usize,
    pub pairs: usize,
}

impl From<&SplitStats> for StatsRow {
    fn from(s: &SplitStats) -> Self {
        Self {
            split: s.split.clone(),
            figures: s.figures,
            pairs: s.pairs,
        }
    }
}
