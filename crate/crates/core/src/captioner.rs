//! The caption branch: vocabulary, patch encoder, a small autoregressive
//! decoder, greedy and nucleus decoding, and extraction of the `[DET]` and
//! caption-token hidden states consumed by the detector.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::model::ModelConfig;
use crate::nn::{normal, AttentionBlock, FeedForward, Linear};
use crate::structured::{PanelLabel, DET_TOKEN};
use crate::tensor::{argmax, softmax};
use crate::{Error, Result, Tensor};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const DET: usize = 3;
pub const NEWLINE: usize = 4;
pub const COLON: usize = 5;
/// `A` is 6, `Z` is 31.
pub const LABEL_BASE: usize = 6;
pub const UNK: usize = 32;
pub const FIRST_WORD: usize = 33;

const SPECIALS: [&str; 6] = ["<bos>", "<eos>", "<pad>", DET_TOKEN, "<nl>", ":"];

/// Word-level vocabulary with a fixed reserved prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by `words` in first-seen order.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..26).map(|i| PanelLabel::from_index(i).unwrap().as_char().to_string()));
        tokens.push("<unk>".into());
        let mut v = Self {
            index: tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
            tokens,
        };
        for w in words {
            if !v.index.contains_key(w) {
                v.index.insert(w.into(), v.tokens.len());
                v.tokens.push(w.into());
            }
        }
        v
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < FIRST_WORD {
            return Err(Error::InvalidArgument("vocabulary is missing reserved tokens".into()));
        }
        let v = Self::new(tokens[FIRST_WORD..].iter().map(String::as_str));
        if v.tokens != tokens {
            return Err(Error::InvalidArgument(
                "vocabulary reserved tokens or word order do not match".into(),
            ));
        }
        Ok(v)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Unknown words map to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn label_id(label: PanelLabel) -> usize {
        LABEL_BASE + label.index()
    }

    /// `label : words… <nl>` per caption, then `[DET]` and `<eos>`.
    pub fn encode_captions<S: AsRef<str>>(&self, captions: &[(PanelLabel, S)]) -> Vec<usize> {
        let mut ids = Vec::new();
        for (label, text) in captions {
            ids.push(Self::label_id(*label));
            ids.push(COLON);
            ids.extend(text.as_ref().split_whitespace().map(|w| self.id(w)));
            ids.push(NEWLINE);
        }
        ids.push(DET);
        ids.push(EOS);
        ids
    }

    /// Renders generated ids as structured text, stopping at `<eos>`.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        let mut lines: Vec<String> = Vec::new();
        let mut line = String::new();
        for &id in ids {
            match id {
                EOS => break,
                BOS | PAD => {}
                NEWLINE => lines.push(core::mem::take(&mut line)),
                DET => {
                    if !line.is_empty() {
                        lines.push(core::mem::take(&mut line));
                    }
                    lines.push(DET_TOKEN.into());
                }
                COLON => line.push(':'),
                _ => {
                    if !line.is_empty() {
                        line.push(' ');
                    }
                    line.push_str(self.token(id).unwrap_or("<unk>"));
                }
            }
        }
        if !line.is_empty() {
            lines.push(line);
        }
        lines.join("\n")
    }
}

/// Patch embedding, learned row and column position embeddings, then
/// self-attention over patches and one feed-forward block.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub patch: usize,
    pub grid: usize,
    pub embed: Linear,
    pub row_pos: ParamId,
    pub col_pos: ParamId,
    pub layers: Vec<AttentionBlock>,
    pub ffn: FeedForward,
}

impl VisionEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.patch == 0 || !cfg.image_size.is_multiple_of(cfg.patch) {
            return Err(Error::InvalidArgument(format!(
                "patch {} does not tile image size {}",
                cfg.patch, cfg.image_size
            )));
        }
        let grid = cfg.image_size / cfg.patch;
        let d = cfg.dim;
        Ok(Self {
            patch: cfg.patch,
            grid,
            embed: Linear::new(store, &format!("{prefix}.patch"), cfg.patch * cfg.patch, d, true, rng)?,
            row_pos: store.register(format!("{prefix}.row_pos"), normal(rng, grid, d, 0.1))?,
            col_pos: store.register(format!("{prefix}.col_pos"), normal(rng, grid, d, 0.1))?,
            layers: (0..cfg.vision_layers)
                .map(|l| AttentionBlock::new(store, &format!("{prefix}.layer{l}"), d, cfg.heads, rng))
                .collect::<Result<_>>()?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d, 2 * d, rng)?,
        })
    }

    /// `patches` is `[grid² × patch²]` in row-major tile order; returns `[grid² × d]`.
    pub fn forward(&self, g: &mut Graph, patches: &Tensor) -> Result<Var> {
        let n = self.grid * self.grid;
        if patches.shape() != (n, self.patch * self.patch) {
            return Err(Error::ShapeMismatch {
                op: "vision encoder",
                left: (n, self.patch * self.patch),
                right: patches.shape(),
            });
        }
        let x = g.constant(patches.clone())?;
        let x = self.embed.forward(g, x)?;
        let rows: Vec<usize> = (0..n).map(|i| i / self.grid).collect();
        let cols: Vec<usize> = (0..n).map(|i| i % self.grid).collect();
        let r = g.embed(self.row_pos, &rows)?;
        let c = g.embed(self.col_pos, &cols)?;
        let x = g.add(x, r)?;
        let mut x = g.add(x, c)?;
        for b in &self.layers {
            x = b.forward(g, x, x, false)?;
        }
        self.ffn.forward(g, x)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attn: AttentionBlock,
    pub cross_attn: AttentionBlock,
    pub ffn: FeedForward,
}

/// Autoregressive caption decoder conditioned on image features.
#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub vision: VisionEncoder,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub out: Linear,
    pub vocab_size: usize,
    pub dim: usize,
    pub max_len: usize,
}

impl CaptionModel {
    /// Registers `vision.*` and `captioner.*` parameters.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.dim;
        let vision = VisionEncoder::new(store, "vision", cfg, rng)?;
        let tok_emb = store.register("captioner.tok_emb", normal(rng, vocab_size, d, 0.1))?;
        let pos_emb = store.register("captioner.pos_emb", normal(rng, cfg.max_len, d, 0.1))?;
        let blocks = (0..cfg.caption_layers)
            .map(|l| {
                Ok(DecoderBlock {
                    self_attn: AttentionBlock::new(store, &format!("captioner.block{l}.self"), d, cfg.heads, rng)?,
                    cross_attn: AttentionBlock::new(store, &format!("captioner.block{l}.cross"), d, cfg.heads, rng)?,
                    ffn: FeedForward::new(store, &format!("captioner.block{l}.ffn"), d, 2 * d, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::new(store, "captioner.out", d, vocab_size, true, rng)?;
        Ok(Self {
            vision,
            tok_emb,
            pos_emb,
            blocks,
            out,
            vocab_size,
            dim: d,
            max_len: cfg.max_len,
        })
    }

    /// Teacher-forced pass over `inputs`; returns final-block hidden states
    /// `[T × d]` and logits `[T × V]`. Row `t` predicts the token after `inputs[t]`.
    pub fn teacher_forced(&self, g: &mut Graph, feats: Var, inputs: &[usize]) -> Result<(Var, Var)> {
        if inputs.is_empty() || inputs.len() > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} outside 1..={}",
                inputs.len(),
                self.max_len
            )));
        }
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let t = g.embed(self.tok_emb, inputs)?;
        let p = g.embed(self.pos_emb, &positions)?;
        let mut x = g.add(t, p)?;
        for b in &self.blocks {
            x = b.self_attn.forward(g, x, x, true)?;
            x = b.cross_attn.forward(g, x, feats, false)?;
            x = b.ffn.forward(g, x)?;
        }
        let logits = self.out.forward(g, x)?;
        Ok((x, logits))
    }
}

/// Mean token cross entropy over non-PAD targets.
pub fn caption_ce_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let (t, _) = g.value(logits).shape();
    if t != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "caption_ce_loss",
            left: (t, 0),
            right: (targets.len(), 0),
        });
    }
    let masked: Vec<Option<usize>> = targets.iter().map(|&y| (y != PAD).then_some(y)).collect();
    g.cross_entropy(logits, &masked)
}

/// Teacher-forcing split of a target sequence: inputs are `[BOS, y_1 … y_{T-1}]`.
pub fn shift_right(targets: &[usize]) -> Vec<usize> {
    let mut inputs = Vec::with_capacity(targets.len());
    inputs.push(BOS);
    inputs.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
    inputs
}

/// Incremental decoder state: cached image keys/values per block and
/// self-attention keys/values of every fed position.
pub struct DecodeSession<'m> {
    model: &'m CaptionModel,
    store: &'m ParamStore,
    cross_kv: Vec<(Tensor, Tensor)>,
    self_kv: Vec<(Tensor, Tensor)>,
    pos: usize,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m CaptionModel, store: &'m ParamStore, patches: &Tensor) -> Result<Self> {
        let mut g = Graph::new(store);
        let feats = model.vision.forward(&mut g, patches)?;
        let mut cross_kv = Vec::with_capacity(model.blocks.len());
        for b in &model.blocks {
            let (k, v) = b.cross_attn.attn.project_keys(&mut g, feats)?;
            cross_kv.push((g.value(k).clone(), g.value(v).clone()));
        }
        let empty = (Tensor::zeros(0, model.dim), Tensor::zeros(0, model.dim));
        Ok(Self {
            model,
            store,
            cross_kv,
            self_kv: alloc::vec![empty; model.blocks.len()],
            pos: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token; returns its final-block hidden state `[1 × d]` and
    /// the next-token logits.
    pub fn feed(&mut self, token: usize) -> Result<(Tensor, Vec<f64>)> {
        let m = self.model;
        if self.pos >= m.max_len {
            return Err(Error::InvalidArgument(format!("decoder context of {} is full", m.max_len)));
        }
        if token >= m.vocab_size {
            return Err(Error::InvalidArgument(format!("token id {token} outside vocabulary")));
        }
        let mut g = Graph::new(self.store);
        let t = g.embed(m.tok_emb, &[token])?;
        let p = g.embed(m.pos_emb, &[self.pos])?;
        let mut x = g.add(t, p)?;
        for (l, b) in m.blocks.iter().enumerate() {
            let (k, v) = b.self_attn.attn.project_keys(&mut g, x)?;
            let cache = &mut self.self_kv[l];
            cache.0.append_rows(g.value(k))?;
            cache.1.append_rows(g.value(v))?;
            let kc = g.constant(cache.0.clone())?;
            let vc = g.constant(cache.1.clone())?;
            // The new position is the last key, so no mask is needed.
            x = b.self_attn.forward_projected(&mut g, x, kc, vc, false)?;
            let kx = g.constant(self.cross_kv[l].0.clone())?;
            let vx = g.constant(self.cross_kv[l].1.clone())?;
            x = b.cross_attn.forward_projected(&mut g, x, kx, vx, false)?;
            x = b.ffn.forward(&mut g, x)?;
        }
        let logits = m.out.forward(&mut g, x)?;
        self.pos += 1;
        Ok((g.value(x).clone(), g.value(logits).data().to_vec()))
    }
}

/// A decoded sequence. `hidden` row `k` is the final-block state at the
/// position where `tokens[k]` was fed back in.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub hidden: Tensor,
    /// Per-step log-probability of the chosen token under the sampling
    /// distribution (empty for greedy decoding).
    pub logprobs: Vec<f64>,
}

fn decode_with(
    model: &CaptionModel,
    store: &ParamStore,
    patches: &Tensor,
    max_new_tokens: usize,
    mut choose: impl FnMut(&[f64]) -> Result<(usize, Option<f64>)>,
) -> Result<Generation> {
    let max_new = max_new_tokens.min(model.max_len - 1);
    let mut session = DecodeSession::new(model, store, patches)?;
    let mut gen = Generation {
        tokens: Vec::new(),
        hidden: Tensor::zeros(0, model.dim),
        logprobs: Vec::new(),
    };
    if max_new == 0 {
        return Ok(gen);
    }
    let (_, mut logits) = session.feed(BOS)?;
    while gen.tokens.len() < max_new {
        let (tok, lp) = choose(&logits)?;
        gen.tokens.push(tok);
        if let Some(lp) = lp {
            gen.logprobs.push(lp);
        }
        let (h, next) = session.feed(tok)?;
        gen.hidden.append_rows(&h)?;
        logits = next;
        if tok == EOS {
            break;
        }
    }
    Ok(gen)
}

/// Argmax decoding until `<eos>` or `max_new_tokens`.
pub fn greedy_decode(model: &CaptionModel, store: &ParamStore, patches: &Tensor, max_new_tokens: usize) -> Result<Generation> {
    decode_with(model, store, patches, max_new_tokens, |logits| Ok((argmax(logits), None)))
}

/// Indices of the smallest probability-sorted prefix whose mass reaches
/// `top_p` (ties sorted by index).
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = 0;
    for &i in &order {
        mass += probs[i];
        keep += 1;
        // Tolerance so that a prefix summing to exactly `top_p` in exact
        // arithmetic is not extended by rounding.
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    order.truncate(keep);
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_p: 0.8,
            temperature: 0.7,
            max_new_tokens: 127,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Samples one token from temperature-scaled, nucleus-truncated logits;
/// returns the token and its log-probability under the truncated distribution.
pub fn sample_token(logits: &[f64], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> (usize, f64) {
    let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    let probs = softmax(&scaled);
    let keep = nucleus(&probs, cfg.top_p);
    let total: f64 = keep.iter().map(|&i| probs[i]).sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut chosen = keep[keep.len() - 1];
    for &i in &keep {
        acc += probs[i];
        if u < acc {
            chosen = i;
            break;
        }
    }
    (chosen, libm::log(probs[chosen] / total))
}

/// Nucleus sampling with temperature.
pub fn sample_decode(
    model: &CaptionModel,
    store: &ParamStore,
    patches: &Tensor,
    cfg: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Generation> {
    cfg.validate()?;
    decode_with(model, store, patches, cfg.max_new_tokens, |logits| {
        let (t, lp) = sample_token(logits, cfg, rng);
        Ok((t, Some(lp)))
    })
}

/// Positions (into a generated token list) of the first `[DET]` and of the
/// caption tokens before it: label and word tokens, never ids below 6.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterfaceIndices {
    pub det: Option<usize>,
    pub caption: Vec<usize>,
}

pub fn interface_indices(tokens: &[usize]) -> InterfaceIndices {
    let det = tokens.iter().position(|&t| t == DET);
    let end = det.unwrap_or(tokens.len());
    InterfaceIndices {
        det,
        caption: (0..end).filter(|&i| tokens[i] >= LABEL_BASE).collect(),
    }
}

/// Detector-facing features of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Interface {
    /// `[1 × d]`; zero when no `[DET]` was generated.
    pub h_det: Tensor,
    /// `[N_t × d]`.
    pub h_cap: Tensor,
    pub det_found: bool,
}

pub fn extract_interface(tokens: &[usize], hidden: &Tensor) -> Result<Interface> {
    let idx = interface_indices(tokens);
    let d = hidden.cols();
    let h_det = match idx.det {
        Some(k) => hidden.select_rows(&[k])?,
        None => Tensor::zeros(1, d),
    };
    Ok(Interface {
        h_det,
        h_cap: hidden.select_rows(&idx.caption)?,
        det_found: idx.det.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check, random};
    use alloc::vec;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch: 8,
            dim: 8,
            heads: 2,
            caption_layers: 2,
            det_layers: 1,
            queries: 3,
            max_len: 24,
            vision_layers: 1,
        }
    }

    fn tiny(seed: u64) -> (ParamStore, CaptionModel, Vocab) {
        let vocab = Vocab::new(["bar", "chart", "rising", "scatter", "plot"]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = CaptionModel::new(&mut store, &tiny_config(), vocab.len(), &mut rng).unwrap();
        (store, m, vocab)
    }

    fn label(c: char) -> PanelLabel {
        PanelLabel::new(c).unwrap()
    }

    #[test]
    fn vocab_layout_and_round_trip() {
        let v = Vocab::new(["bar", "chart", "bar"]);
        assert_eq!(v.token(DET), Some("[DET]"));
        assert_eq!(v.token(LABEL_BASE), Some("A"));
        assert_eq!(v.token(31), Some("Z"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.id("bar"), FIRST_WORD);
        assert_eq!(v.len(), FIRST_WORD + 2);
        assert_eq!(v.id("nope"), UNK);
        assert_eq!(Vocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
        let mut bad = v.tokens().to_vec();
        bad.swap(0, 1);
        assert!(Vocab::from_tokens(bad).is_err());
    }

    #[test]
    fn encode_then_decode_is_structured_text() {
        let v = Vocab::new(["bar", "chart", "rising"]);
        let ids = v.encode_captions(&[(label('A'), "bar chart"), (label('B'), "rising")]);
        assert_eq!(ids.last(), Some(&EOS));
        assert_eq!(v.decode_text(&ids), "A: bar chart\nB: rising\n[DET]");
        let parsed = crate::structured::parse_structured(&v.decode_text(&ids));
        assert_eq!(parsed.lines.len(), 2);
        assert!(parsed.det_terminated);
    }

    #[test]
    fn uniform_and_confident_ce() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = g.constant(Tensor::zeros(3, 32)).unwrap();
        let loss = caption_ce_loss(&mut g, l, &[1, 5, 7]).unwrap();
        assert!((g.value(loss).item() - libm::log(32.0)).abs() < 1e-12);
        let mut t = Tensor::zeros(2, 32);
        t.set(0, 4, 20.0);
        t.set(1, 9, 20.0);
        let l = g.constant(t).unwrap();
        let loss = caption_ce_loss(&mut g, l, &[4, 9]).unwrap();
        assert!(g.value(loss).item() < 1e-6);
        assert!(caption_ce_loss(&mut g, l, &[4]).is_err());
    }

    #[test]
    fn ce_matches_direct_formula_and_masks_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random(&mut rng, 4, 6).scale(3.0);
        let targets = [1, PAD, 4, 0];
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = g.constant(logits.clone()).unwrap();
        let loss = caption_ce_loss(&mut g, l, &targets).unwrap();
        let mut total = 0.0;
        let mut count = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            if y == PAD {
                continue;
            }
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| libm::exp(*v)).sum();
            total -= libm::log(libm::exp(row[y]) / z);
            count += 1.0;
        }
        assert!((g.value(loss).item() - total / count).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let (mut store, m, v) = tiny(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patches = random(&mut rng, 4, 64);
        let targets = v.encode_captions(&[(label('A'), "bar chart")]);
        let f = move |g: &mut Graph| -> Result<Var> {
            let feats = m.vision.forward(g, &patches)?;
            let (_, logits) = m.teacher_forced(g, feats, &shift_right(&targets))?;
            caption_ce_loss(g, logits, &targets)
        };
        fd_check(&mut store, &f, 1e-4);
    }

    #[test]
    fn incremental_decoding_matches_teacher_forcing() {
        let (store, m, v) = tiny(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let patches = random(&mut rng, 4, 64);
        let tokens = v.encode_captions(&[(label('A'), "bar chart"), (label('B'), "plot")]);
        let inputs = shift_right(&tokens);
        let mut g = Graph::new(&store);
        let feats = m.vision.forward(&mut g, &patches).unwrap();
        let (hidden, logits) = m.teacher_forced(&mut g, feats, &inputs).unwrap();
        let mut s = DecodeSession::new(&m, &store, &patches).unwrap();
        for (t, &tok) in inputs.iter().enumerate() {
            let (h, l) = s.feed(tok).unwrap();
            for (a, b) in h.row(0).iter().zip(g.value(hidden).row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in l.iter().zip(g.value(logits).row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn greedy_is_deterministic_and_respects_budget() {
        let (store, m, _) = tiny(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let patches = random(&mut rng, 4, 64);
        let a = greedy_decode(&m, &store, &patches, 10).unwrap();
        let b = greedy_decode(&m, &store, &patches, 10).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= 10);
        assert_eq!(a.hidden.rows(), a.tokens.len());
        let empty = greedy_decode(&m, &store, &patches, 0).unwrap();
        assert!(empty.tokens.is_empty());
    }

    #[test]
    fn nucleus_keeps_smallest_sufficient_prefix() {
        assert_eq!(nucleus(&[0.5, 0.3, 0.15, 0.05], 0.8), vec![0, 1]);
        assert_eq!(nucleus(&[0.05, 0.15, 0.3, 0.5], 0.8), vec![3, 2]);
        assert_eq!(nucleus(&[0.5, 0.3, 0.15, 0.05], 1.0).len(), 4);
        assert_eq!(nucleus(&[0.5, 0.3, 0.15, 0.05], 0.1), vec![0]);
    }

    #[test]
    fn sampled_logprob_is_renormalized_nucleus_probability() {
        let logits = [libm::log(0.5), libm::log(0.3), libm::log(0.15), libm::log(0.05)];
        let cfg = SamplingConfig {
            top_p: 0.8,
            temperature: 1.0,
            max_new_tokens: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (t, lp) = sample_token(&logits, &cfg, &mut rng);
            assert!(t < 2);
            let expect = [0.5 / 0.8, 0.3 / 0.8][t];
            assert!((libm::exp(lp) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_seeded_and_cold_limit_is_greedy() {
        let (store, m, _) = tiny(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let patches = random(&mut rng, 4, 64);
        let cfg = SamplingConfig {
            top_p: 0.9,
            temperature: 1.0,
            max_new_tokens: 12,
        };
        let a = sample_decode(&m, &store, &patches, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_decode(&m, &store, &patches, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logprobs.len(), a.tokens.len());
        let cold = SamplingConfig {
            top_p: 1.0,
            temperature: 1e-4,
            max_new_tokens: 12,
        };
        let s = sample_decode(&m, &store, &patches, &cold, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let gr = greedy_decode(&m, &store, &patches, 12).unwrap();
        assert_eq!(s.tokens, gr.tokens);
        let bad = SamplingConfig { top_p: 0.0, ..cold };
        assert!(sample_decode(&m, &store, &patches, &bad, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn interface_extraction() {
        let hidden = Tensor::from_vec(6, 2, (0..12).map(|v| v as f64).collect()).unwrap();
        // A : word <nl> [DET] <eos>
        let tokens = [LABEL_BASE, COLON, FIRST_WORD, NEWLINE, DET, EOS];
        let i = extract_interface(&tokens, &hidden).unwrap();
        assert!(i.det_found);
        assert_eq!(i.h_det.row(0), hidden.row(4));
        assert_eq!(i.h_cap.rows(), 2);
        assert_eq!(i.h_cap.row(1), hidden.row(2));

        let no_det = extract_interface(&tokens[..4], &hidden.select_rows(&[0, 1, 2, 3]).unwrap()).unwrap();
        assert!(!no_det.det_found);
        assert_eq!(no_det.h_det, Tensor::zeros(1, 2));

        // Tokens after [DET] never count.
        let crafted = [LABEL_BASE + 1, COLON, UNK, FIRST_WORD, NEWLINE, LABEL_BASE, DET, FIRST_WORD];
        assert_eq!(interface_indices(&crafted).caption, vec![0, 2, 3, 5]);
    }
}
