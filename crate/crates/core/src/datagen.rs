//! Synthetic compound figures: a grid of framed panels, each with a letter
//! label in its top-left corner and one of four plot-like glyphs, captioned
//! from a template that names the glyph and its visible variant.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detection::{BoxN, PanelAnnotation};
use crate::image::GrayImage;
use crate::structured::PanelLabel;
use crate::{Error, Result};

/// Bumped whenever rendering or sampling changes the generated bytes.
pub const GENERATOR_VERSION: u32 = 1;

pub const IMAGE_SIZE: usize = 128;
pub const MARGIN: usize = 4;
pub const GAP: usize = 6;
pub const MAX_PANELS: usize = 8;
pub const FRAME_INTENSITY: u8 = 120;
pub const LABEL_INTENSITY: u8 = 255;
/// Distractor texture stays strictly below this intensity.
pub const DISTRACTOR_MAX: u8 = 35;

pub const GRIDS: [(usize, usize); 4] = [(2, 2), (2, 3), (3, 2), (3, 3)];

#[rustfmt::skip]
const FONT: [[u8; 7]; 26] = [
    [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // A
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
    [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
    [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
    [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
    [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
    [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
    [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
    [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
    [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F], // Z
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GlyphClass {
    Bars,
    Scatter,
    Heatgrid,
    Curve,
}

impl GlyphClass {
    pub const ALL: [GlyphClass; 4] = [Self::Bars, Self::Scatter, Self::Heatgrid, Self::Curve];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Bars => "bars",
            Self::Scatter => "scatter",
            Self::Heatgrid => "heatgrid",
            Self::Curve => "curve",
        }
    }

    /// The caption word every template for this class contains.
    pub fn keyword(self) -> &'static str {
        match self {
            Self::Bars => "bar",
            Self::Scatter => "scatter",
            Self::Heatgrid => "heatmap",
            Self::Curve => "curve",
        }
    }

    /// Which class, if any, draws pixels of this intensity.
    pub fn from_intensity(v: u8) -> Option<Self> {
        match v {
            200 => Some(Self::Bars),
            170 => Some(Self::Scatter),
            40..=110 => Some(Self::Heatgrid),
            230 => Some(Self::Curve),
            _ => None,
        }
    }

    /// Caption for the variant (`0` or `1`); `hard` selects near-synonym wording.
    pub fn caption(self, variant: u8, hard: bool) -> &'static str {
        TEMPLATES[hard as usize][self.index()][(variant & 1) as usize]
    }
}

const TEMPLATES: [[[&str; 2]; 4]; 2] = [
    [
        [
            "bar chart showing increasing values across four groups",
            "bar chart showing decreasing values across four groups",
        ],
        [
            "scatter plot showing a positive correlation between variables",
            "scatter plot showing a negative correlation between variables",
        ],
        [
            "heatmap with a coarse grid of intensity values",
            "heatmap with a fine grid of intensity values",
        ],
        [
            "line curve rising steadily over the measured range",
            "line curve falling steadily over the measured range",
        ],
    ],
    [
        [
            "bar graph depicting growing values among four groups",
            "bar graph depicting shrinking values among four groups",
        ],
        [
            "scatter diagram indicating a positive association between variables",
            "scatter diagram indicating a negative association between variables",
        ],
        [
            "heatmap showing a coarse mesh of intensity levels",
            "heatmap showing a fine mesh of intensity levels",
        ],
        [
            "smooth curve climbing steadily across the observed range",
            "smooth curve descending steadily across the observed range",
        ],
    ],
];

/// Every caption word, in first-seen template order.
pub fn caption_vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    for set in &TEMPLATES {
        for class in set {
            for t in class {
                for w in t.split_whitespace() {
                    if !words.contains(&w) {
                        words.push(w);
                    }
                }
            }
        }
    }
    words
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticFigureSpec {
    pub rows: usize,
    pub cols: usize,
    /// Glyph class and variant per panel, in reading order (labels A, B, …).
    pub panels: Vec<(GlyphClass, u8)>,
    pub hard: bool,
}

impl SyntheticFigureSpec {
    pub fn validate(&self) -> Result<()> {
        if !GRIDS.contains(&(self.rows, self.cols)) {
            return Err(Error::InvalidArgument(format!("unsupported grid {}x{}", self.rows, self.cols)));
        }
        let cap = MAX_PANELS.min(self.rows * self.cols);
        if self.panels.is_empty() || self.panels.len() > cap {
            return Err(Error::InvalidArgument(format!(
                "{} panels for a grid holding 1..={cap}",
                self.panels.len()
            )));
        }
        if self.panels.iter().any(|p| p.1 > 1) {
            return Err(Error::InvalidArgument("glyph variant must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn random(rng: &mut ChaCha8Rng, hard: bool) -> Self {
        let (rows, cols) = GRIDS[rng.gen_range(0..GRIDS.len())];
        let n = rng.gen_range(1..=MAX_PANELS.min(rows * cols));
        let panels = (0..n)
            .map(|_| (GlyphClass::ALL[rng.gen_range(0..4)], rng.gen_range(0..2u8)))
            .collect();
        Self { rows, cols, panels, hard }
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` of panel `k`.
    pub fn cell(&self, k: usize) -> (usize, usize, usize, usize) {
        let w = (IMAGE_SIZE - 2 * MARGIN - (self.cols - 1) * GAP) / self.cols;
        let h = (IMAGE_SIZE - 2 * MARGIN - (self.rows - 1) * GAP) / self.rows;
        let (r, c) = (k / self.cols, k % self.cols);
        let x0 = MARGIN + c * (w + GAP);
        let y0 = MARGIN + r * (h + GAP);
        (x0, y0, x0 + w, y0 + h)
    }
}

/// One synthetic figure with its panel annotations in reading order.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureRecord {
    pub figure_id: String,
    pub image: GrayImage,
    pub panels: Vec<PanelAnnotation>,
}

impl FigureRecord {
    pub fn captions(&self) -> Vec<(PanelLabel, &str)> {
        self.panels.iter().map(|p| (p.label, p.caption.as_str())).collect()
    }
}

fn draw_label(img: &mut GrayImage, label: PanelLabel, x: usize, y: usize) {
    for (dy, bits) in FONT[label.index()].iter().enumerate() {
        for dx in 0..5 {
            if bits & (0x10 >> dx) != 0 {
                img.set(x + dx, y + dy, LABEL_INTENSITY);
            }
        }
    }
}

fn draw_frame(img: &mut GrayImage, (x0, y0, x1, y1): (usize, usize, usize, usize)) {
    img.fill_rect(x0, y0, x1, y0 + 1, FRAME_INTENSITY);
    img.fill_rect(x0, y1 - 1, x1, y1, FRAME_INTENSITY);
    img.fill_rect(x0, y0, x0 + 1, y1, FRAME_INTENSITY);
    img.fill_rect(x1 - 1, y0, x1, y1, FRAME_INTENSITY);
}

/// Draws a glyph into the content rectangle `[x0, x1) × [y0, y1)`.
fn draw_glyph(img: &mut GrayImage, class: GlyphClass, variant: u8, area: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) {
    let (x0, y0, x1, y1) = area;
    let (w, h) = (x1 - x0, y1 - y0);
    match class {
        GlyphClass::Bars => {
            let slot = w / 4;
            for i in 0..4 {
                let rank = if variant == 0 { i } else { 3 - i };
                let frac = (rank as f64 + 1.0) / 4.0 * rng.gen_range(0.85..1.0);
                let bh = ((h as f64 * frac) as usize).clamp(2, h);
                let bx = x0 + i * slot + 1;
                img.fill_rect(bx, y1 - bh, bx + slot - 2, y1, 200);
            }
        }
        GlyphClass::Scatter => {
            for _ in 0..14 {
                let t: f64 = rng.gen();
                let jitter: f64 = rng.gen_range(-0.12..0.12);
                let up = if variant == 0 { t } else { 1.0 - t };
                let fy = (1.0 - up + jitter).clamp(0.0, 1.0);
                let px = x0 + (t * (w - 2) as f64) as usize;
                let py = y0 + (fy * (h - 2) as f64) as usize;
                img.fill_rect(px, py, px + 2, py + 2, 170);
            }
        }
        GlyphClass::Heatgrid => {
            let n = if variant == 0 { 3 } else { 6 };
            for by in 0..n {
                for bx in 0..n {
                    let v = rng.gen_range(40..=110u8);
                    img.fill_rect(x0 + bx * w / n, y0 + by * h / n, x0 + (bx + 1) * w / n, y0 + (by + 1) * h / n, v);
                }
            }
        }
        GlyphClass::Curve => {
            let bend = rng.gen_range(0.5..0.9);
            for dx in 0..w {
                let t = dx as f64 / (w - 1).max(1) as f64;
                let f = libm::pow(t, bend);
                let up = if variant == 0 { f } else { 1.0 - f };
                let py = y0 + ((1.0 - up) * (h - 2) as f64) as usize;
                img.fill_rect(x0 + dx, py, x0 + dx + 1, py + 2, 230);
            }
        }
    }
}

fn add_distractors(img: &mut GrayImage, rng: &mut ChaCha8Rng) {
    let phase = rng.gen_range(0..7usize);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.get(x, y) != 0 {
                continue;
            }
            let stripe = (x + 2 * y + phase) % 7 == 0;
            if stripe || rng.gen_bool(0.12) {
                img.set(x, y, rng.gen_range(8..DISTRACTOR_MAX));
            }
        }
    }
}

/// Renders a figure. Deterministic in `(spec, rng state)`.
pub fn generate_figure(figure_id: &str, spec: &SyntheticFigureSpec, rng: &mut ChaCha8Rng) -> Result<FigureRecord> {
    spec.validate()?;
    let mut image = GrayImage::new(IMAGE_SIZE, IMAGE_SIZE);
    let mut panels = Vec::with_capacity(spec.panels.len());
    for (k, &(class, variant)) in spec.panels.iter().enumerate() {
        let label = PanelLabel::from_index(k).expect("at most 8 panels");
        let cell = spec.cell(k);
        let (x0, y0, x1, y1) = cell;
        draw_frame(&mut image, cell);
        draw_label(&mut image, label, x0 + 2, y0 + 2);
        draw_glyph(&mut image, class, variant, (x0 + 2, y0 + 11, x1 - 2, y1 - 2), rng);
        let s = IMAGE_SIZE as f64;
        let bbox = BoxN::from_xyxy(x0 as f64 / s, y0 as f64 / s, x1 as f64 / s, y1 as f64 / s)
            .ok_or_else(|| Error::InvalidArgument("empty panel cell".into()))?;
        panels.push(PanelAnnotation {
            label,
            bbox,
            caption: class.caption(variant, spec.hard).into(),
        });
    }
    if spec.hard {
        add_distractors(&mut image, rng);
    }
    Ok(FigureRecord {
        figure_id: figure_id.into(),
        image,
        panels,
    })
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Generates `n` figures of one split. Each split draws from its own
/// ChaCha stream of `seed`, so splits never share random state.
pub fn generate_split(split: &str, n: usize, seed: u64, hard: bool) -> Result<Vec<FigureRecord>> {
    let stream = SPLITS
        .iter()
        .position(|s| *s == split)
        .map_or_else(|| 3 + split.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)), |i| i as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * stream + hard as u64);
    let prefix = if hard { format!("{split}-hard") } else { split.into() };
    (0..n)
        .map(|i| {
            let spec = SyntheticFigureSpec::random(&mut rng, hard);
            generate_figure(&format!("{prefix}-{i:05}"), &spec, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<FigureRecord>,
    pub val: Vec<FigureRecord>,
    pub test: Vec<FigureRecord>,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &[FigureRecord]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

pub fn make_dataset(n_train: usize, n_val: usize, n_test: usize, seed: u64, hard: bool) -> Result<Dataset> {
    Ok(Dataset {
        train: generate_split("train", n_train, seed, hard)?,
        val: generate_split("val", n_val, seed, hard)?,
        test: generate_split("test", n_test, seed, hard)?,
    })
}

/// Figure and panel-caption pair counts of one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitStats {
    pub split: String,
    pub figures: usize,
    pub pairs: usize,
}

pub fn stats(dataset: &Dataset) -> Vec<SplitStats> {
    dataset
        .splits()
        .iter()
        .map(|(name, figs)| SplitStats {
            split: (*name).into(),
            figures: figs.len(),
            pairs: figs.iter().map(|f| f.panels.len()).sum(),
        })
        .collect()
}
