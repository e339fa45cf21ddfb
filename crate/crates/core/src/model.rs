//! The joint model: caption branch, detector with its own patch backbone,
//! and the fusion module between them; plus one-pass inference.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::captioner::{extract_interface, greedy_decode, CaptionModel, Vocab};
use crate::detection::{to_detections, Detection, DetectionHead};
use crate::fusion::{fuse, FusionParams};
use crate::image::GrayImage;
use crate::nn::normal;
use crate::structured::{parse_structured, StructuredOutput};
use crate::{Error, Result, Tensor};

/// Parameter name prefixes of the caption branch.
pub const CAPTIONER_PREFIXES: [&str; 2] = ["vision.", "captioner."];
/// Parameter name prefixes of the detection branch.
pub const DETECTOR_PREFIXES: [&str; 2] = ["detector.", "fusion."];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub caption_layers: usize,
    pub det_layers: usize,
    /// Detector queries `N_d`.
    pub queries: usize,
    /// Longest token sequence the decoder accepts, BOS included.
    pub max_len: usize,
    /// Self-attention blocks over patch tokens in each vision encoder.
    pub vision_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            patch: 16,
            dim: 64,
            heads: 4,
            caption_layers: 2,
            det_layers: 2,
            queries: 30,
            max_len: 128,
            vision_layers: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub backbone: crate::captioner::VisionEncoder,
    pub queries: ParamId,
    pub fusion: FusionParams,
    pub head: DetectionHead,
}

impl Detector {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            backbone: crate::captioner::VisionEncoder::new(store, "detector.backbone", cfg, rng)?,
            queries: store.register("detector.queries", normal(rng, cfg.queries, cfg.dim, 1.0))?,
            fusion: FusionParams::new(store, "fusion", cfg.dim, cfg.heads, rng)?,
            head: DetectionHead::new(store, "detector.head", cfg.dim, cfg.heads, cfg.det_layers, rng)?,
        })
    }

    /// Returns `(logits [N_d × 27], boxes [N_d × 4])`.
    pub fn forward(&self, g: &mut Graph, patches: &Tensor, h_det: Var, h_cap: Var) -> Result<(Var, Var)> {
        let feats = self.backbone.forward(g, patches)?;
        let q = g.param(self.queries);
        let fused = fuse(g, &self.fusion, q, h_det, h_cap)?;
        self.head.forward(g, feats, fused)
    }
}

#[derive(Debug, Clone)]
pub struct FigModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub captioner: CaptionModel,
    pub detector: Detector,
}

impl FigModel {
    /// Registers all parameters in a fresh store, initialized from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<(Self, ParamStore)> {
        if config.max_len < 2 {
            return Err(Error::InvalidArgument("max_len must be at least 2".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let captioner = CaptionModel::new(&mut store, &config, vocab.len(), &mut rng)?;
        let detector = Detector::new(&mut store, &config, &mut rng)?;
        Ok((
            Self {
                config,
                vocab,
                captioner,
                detector,
            },
            store,
        ))
    }

    pub fn patches(&self, image: &GrayImage) -> Result<Tensor> {
        if image.width() != self.config.image_size || image.height() != self.config.image_size {
            return Err(Error::InvalidArgument(alloc::format!(
                "expected a {0}x{0} image, got {1}x{2}",
                self.config.image_size,
                image.width(),
                image.height()
            )));
        }
        image.patches(self.config.patch)
    }

    /// Caption ids for ground-truth panels, ending in `[DET] <eos>`.
    pub fn encode_panels(&self, panels: &[crate::detection::PanelAnnotation]) -> Vec<usize> {
        let caps: Vec<_> = panels.iter().map(|p| (p.label, p.caption.as_str())).collect();
        self.vocab.encode_captions(&caps)
    }

    /// Whether a parameter belongs to the caption branch.
    pub fn is_captioner_param(name: &str) -> bool {
        CAPTIONER_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    pub fn is_detector_param(name: &str) -> bool {
        DETECTOR_PREFIXES.iter().any(|p| name.starts_with(p))
    }
}

/// Output of one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub tokens: Vec<usize>,
    pub raw_output: String,
    pub structured: StructuredOutput,
    /// One per detector query.
    pub detections: Vec<Detection>,
    pub det_found: bool,
}

/// Greedy captioning, then detection conditioned on the generated `[DET]`
/// and caption-token states.
pub fn infer(model: &FigModel, store: &ParamStore, image: &GrayImage, max_new_tokens: usize) -> Result<Prediction> {
    let patches = model.patches(image)?;
    let gen = greedy_decode(&model.captioner, store, &patches, max_new_tokens)?;
    let iface = extract_interface(&gen.tokens, &gen.hidden)?;
    let mut g = Graph::new(store);
    let h_det = g.constant(iface.h_det)?;
    let h_cap = g.constant(iface.h_cap)?;
    let (logits, boxes) = model.detector.forward(&mut g, &patches, h_det, h_cap)?;
    let raw_output = model.vocab.decode_text(&gen.tokens);
    Ok(Prediction {
        structured: parse_structured(&raw_output),
        detections: to_detections(g.value(logits), g.value(boxes)),
        tokens: gen.tokens,
        raw_output,
        det_found: iface.det_found,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameters_split_cleanly_between_branches() {
        let cfg = ModelConfig {
            image_size: 16,
            patch: 8,
            dim: 8,
            heads: 2,
            caption_layers: 1,
            det_layers: 1,
            queries: 3,
            max_len: 16,
            vision_layers: 1,
        };
        let (_, store) = FigModel::new(cfg, Vocab::new(["x"]), 0).unwrap();
        for (_, p) in store.iter() {
            assert!(FigModel::is_captioner_param(&p.name) ^ FigModel::is_detector_param(&p.name), "{}", p.name);
        }
        assert!(store.by_name("fusion.w_bg").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn untrained_inference_runs_end_to_end() {
        let cfg = ModelConfig {
            image_size: 16,
            patch: 8,
            dim: 8,
            heads: 2,
            caption_layers: 1,
            det_layers: 1,
            queries: 3,
            max_len: 16,
            vision_layers: 1,
        };
        let (m, store) = FigModel::new(cfg, Vocab::new(["x"]), 0).unwrap();
        let p = infer(&m, &store, &GrayImage::new(16, 16), 15).unwrap();
        assert_eq!(p.detections.len(), 3);
        assert!(infer(&m, &store, &GrayImage::new(8, 8), 4).is_err());
    }
}
