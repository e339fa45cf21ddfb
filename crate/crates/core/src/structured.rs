//! The structured caption format that links generation to detection.
//!
//! A generation is one `L: caption` line per panel, in emission order, followed
//! by a standalone `[DET]` line. Parsing is total and lenient: any line matching
//!
//! ```text
//! ^\s*([A-Za-z])\s*:\s*(.*\S)\s*$
//! ```
//!
//! becomes a caption (the label is uppercased), other lines are skipped, and
//! everything after the first line that trims to `[DET]` is ignored.
//! Serialization is strict: `L: text` lines and a final `[DET]` line.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub const DET_TOKEN: &str = "[DET]";

/// Version of the prompt constants below.
pub const PROMPT_VERSION: u32 = 1;

pub const PROMPT_CAPTIONING: &str = "You are given a scientific compound figure.
Task: detect subfigures and, for each detected subfigure that shows a visible alphabetic label A to Z or a to z, write exactly one short scientific caption.
Formatting rules:
1) Output one line per subfigure in ascending label order A, B, C, ...
2) Use uppercase labels and the exact format: \"A: <caption>\".
3) After listing all subfigure captions, output a single [DET] token on a NEW line.
Return ONLY the caption lines followed by the final [DET]; no extra text.";

pub const PROMPT_DETECTION: &str = "You are given a scientific compound figure containing multiple sub-panels A, B, C, ...
Detect all sub-panels and output ONLY a JSON array.
Each element must be an object with fields:
- \"class\": an integer in [0, 25] where A maps to 0, B maps to 1, ..., Z maps to 25
- \"bbox_2d\": [x_min, y_min, x_max, y_max] using normalized coordinates in range [0, 1000]
Rules:
- Do not output any text outside the JSON array.
- bbox_2d must satisfy x_min < x_max and y_min < y_max.
- Include every detected panel; multiple boxes may share the same class.";

pub fn captioning_prompt() -> &'static str {
    PROMPT_CAPTIONING
}

pub fn detection_prompt() -> &'static str {
    PROMPT_DETECTION
}

/// Prefixes a prompt with worked example outputs (few-shot prompting).
pub fn with_exemplars(prompt: &str, exemplars: &[&str]) -> String {
    let mut out = String::new();
    for (i, ex) in exemplars.iter().enumerate() {
        out.push_str(&alloc::format!("Example {}:\n{}\n\n", i + 1, ex.trim_end()));
    }
    out.push_str(prompt);
    out
}

/// An uppercase panel letter `A`–`Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PanelLabel(u8);

impl PanelLabel {
    /// Accepts `a`–`z` and `A`–`Z`; lowercase is uppercased.
    pub fn new(c: char) -> Option<Self> {
        if c.is_ascii_alphabetic() {
            Some(Self(c.to_ascii_uppercase() as u8))
        } else {
            None
        }
    }

    /// `0` for `A` through `25` for `Z`.
    pub fn from_index(i: usize) -> Option<Self> {
        (i < 26).then(|| Self(b'A' + i as u8))
    }

    pub fn index(self) -> usize {
        (self.0 - b'A') as usize
    }

    pub fn as_char(self) -> char {
        self.0 as char
    }
}

impl fmt::Display for PanelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledCaption {
    pub label: PanelLabel,
    text: String,
}

impl LabeledCaption {
    /// Trims `text`; returns `None` if it is empty or spans several lines.
    pub fn new(label: PanelLabel, text: &str) -> Option<Self> {
        let text = text.trim();
        if text.is_empty() || text.contains(['\n', '\r']) {
            return None;
        }
        Some(Self {
            label,
            text: text.into(),
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StructuredOutput {
    pub lines: Vec<LabeledCaption>,
    pub det_terminated: bool,
}

impl StructuredOutput {
    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// First caption emitted for `label`, if any.
    pub fn first_for(&self, label: PanelLabel) -> Option<&str> {
        self.lines
            .iter()
            .find(|l| l.label == label)
            .map(|l| l.text())
    }
}

fn parse_line(line: &str) -> Option<LabeledCaption> {
    let line = line.trim();
    let mut chars = line.chars();
    let label = PanelLabel::new(chars.next()?)?;
    let rest = chars.as_str().trim_start();
    let text = rest.strip_prefix(':')?;
    LabeledCaption::new(label, text)
}

pub fn parse_structured(raw: &str) -> StructuredOutput {
    let mut out = StructuredOutput::default();
    for line in raw.split('\n') {
        if line.trim() == DET_TOKEN {
            out.det_terminated = true;
            break;
        }
        if let Some(c) = parse_line(line) {
            out.lines.push(c);
        }
    }
    out
}

pub fn serialize_structured(s: &StructuredOutput) -> String {
    let mut lines: Vec<String> = s
        .lines
        .iter()
        .map(|l| alloc::format!("{}: {}", l.label, l.text))
        .collect();
    if s.det_terminated {
        lines.push(DET_TOKEN.into());
    }
    lines.join("\n")
}
