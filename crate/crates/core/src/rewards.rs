//! Sequence-level rewards for self-critical training: a text-similarity
//! reward against reference captions and a crop/caption agreement reward
//! computed on ground-truth panel crops.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::datagen::GlyphClass;
use crate::detection::PanelAnnotation;
use crate::eval::tokenize;
use crate::image::GrayImage;
use crate::structured::StructuredOutput;
use crate::{Error, Result};

/// Symmetric F-style caption similarity in `[0, 1]`.
pub trait TextScorer {
    fn score(&self, candidate: &str, reference: &str) -> f64;
}

/// Unit-norm image and text embeddings in a shared space.
pub trait CropTextAligner {
    fn embed_image(&self, image: &GrayImage) -> Vec<f64>;
    fn embed_text(&self, text: &str) -> Vec<f64>;
}

/// F1 of a greedy one-to-one matching between candidate and reference
/// tokens (multiset intersection).
#[derive(Debug, Clone, Copy, Default)]
pub struct UnigramF1;

impl TextScorer for UnigramF1 {
    fn score(&self, candidate: &str, reference: &str) -> f64 {
        let c = tokenize(candidate);
        let r = tokenize(reference);
        if c.is_empty() || r.is_empty() {
            return 0.0;
        }
        let mut used = vec![false; r.len()];
        let mut matches = 0usize;
        for w in &c {
            if let Some(j) = (0..r.len()).find(|&j| !used[j] && r[j] == *w) {
                used[j] = true;
                matches += 1;
            }
        }
        if matches == 0 {
            return 0.0;
        }
        let p = matches as f64 / c.len() as f64;
        let rec = matches as f64 / r.len() as f64;
        2.0 * p * rec / (p + rec)
    }
}

/// Embeds crops by their dominant glyph intensity band and captions by the
/// first glyph keyword they contain. Crops without glyph pixels and captions
/// without a keyword land on two separate "unknown" axes, so neither matches
/// anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlyphAligner;

const UNKNOWN_IMAGE: usize = 4;
const UNKNOWN_TEXT: usize = 5;

fn one_hot(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; 6];
    v[i] = 1.0;
    v
}

impl GlyphAligner {
    pub fn classify(image: &GrayImage) -> Option<GlyphClass> {
        let mut counts = [0usize; 4];
        for &p in image.pixels() {
            if let Some(c) = GlyphClass::from_intensity(p) {
                counts[c.index()] += 1;
            }
        }
        let best = (0..4).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
        (counts[best] > 0).then(|| GlyphClass::ALL[best])
    }
}

impl CropTextAligner for GlyphAligner {
    fn embed_image(&self, image: &GrayImage) -> Vec<f64> {
        one_hot(Self::classify(image).map_or(UNKNOWN_IMAGE, GlyphClass::index))
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        let class = tokens
            .iter()
            .find_map(|t| GlyphClass::ALL.into_iter().find(|c| c.keyword() == t));
        one_hot(class.map_or(UNKNOWN_TEXT, GlyphClass::index))
    }
}

/// Cosine similarity clamped below at 0.
pub fn clamped_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.5 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 || !(self.alpha + self.beta).is_finite() {
            return Err(Error::InvalidArgument(alloc::format!(
                "reward weights alpha={} beta={} must be nonnegative with a positive sum",
                self.alpha,
                self.beta
            )));
        }
        Ok(())
    }
}

/// Ground-truth panels with distinct labels (first occurrence kept).
fn distinct_labels(gts: &[PanelAnnotation]) -> Vec<&PanelAnnotation> {
    let mut seen = BTreeSet::new();
    gts.iter().filter(|g| seen.insert(g.label)).collect()
}

/// Mean over ground-truth labels of the scorer value between the first
/// predicted caption for that label and the reference; missing captions score 0.
pub fn reward_bert(pred: &StructuredOutput, gts: &[PanelAnnotation], scorer: &dyn TextScorer) -> f64 {
    let labels = distinct_labels(gts);
    if labels.is_empty() {
        return 0.0;
    }
    labels
        .iter()
        .map(|g| pred.first_for(g.label).map_or(0.0, |c| scorer.score(c, &g.caption)))
        .sum::<f64>()
        / labels.len() as f64
}

/// Mean over ground-truth labels of the clamped cosine between the crop under
/// the ground-truth box and the first predicted caption for that label.
/// Predicted boxes are never consulted.
pub fn reward_clip(image: &GrayImage, pred: &StructuredOutput, gts: &[PanelAnnotation], aligner: &dyn CropTextAligner) -> f64 {
    let labels = distinct_labels(gts);
    if labels.is_empty() {
        return 0.0;
    }
    labels
        .iter()
        .map(|g| match pred.first_for(g.label) {
            Some(c) => clamped_cosine(&aligner.embed_image(&image.crop(&g.bbox)), &aligner.embed_text(c)),
            None => 0.0,
        })
        .sum::<f64>()
        / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub bert: f64,
    pub clip: f64,
    pub total: f64,
}

/// `alpha · R_text + beta · R_crop`.
pub fn combined_reward(
    image: &GrayImage,
    pred: &StructuredOutput,
    gts: &[PanelAnnotation],
    w: &RewardWeights,
    scorer: &dyn TextScorer,
    aligner: &dyn CropTextAligner,
) -> RewardBreakdown {
    let bert = if w.alpha == 0.0 { 0.0 } else { reward_bert(pred, gts, scorer) };
    let clip = if w.beta == 0.0 { 0.0 } else { reward_clip(image, pred, gts, aligner) };
    RewardBreakdown {
        bert,
        clip,
        total: w.alpha * bert + w.beta * clip,
    }
}
