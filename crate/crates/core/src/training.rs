//! Four-stage schedule: caption pretraining, detector pretraining on
//! teacher-forced caption features, joint supervised training, and joint
//! training with a self-critical reward term.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, ParamStore, Var};
use crate::captioner::{
    caption_ce_loss, extract_interface, greedy_decode, interface_indices, nucleus, sample_decode, shift_right,
    SamplingConfig,
};
use crate::datagen::FigureRecord;
use crate::detection::{detection_loss_graph, DetLossWeights, PanelAnnotation};
use crate::model::FigModel;
use crate::rewards::{combined_reward, CropTextAligner, GlyphAligner, RewardBreakdown, RewardWeights, TextScorer, UnigramF1};
use crate::structured::parse_structured;
use crate::tensor::softmax;
use crate::{Error, Result, Tensor};

/// REINFORCE loss with a greedy baseline: `-(r_sample - r_greedy) · Σ logp`.
pub fn scst_loss(sample_logprobs: &[f64], r_sample: f64, r_greedy: f64) -> f64 {
    let adv = r_sample - r_greedy;
    if sample_logprobs.is_empty() || adv == 0.0 {
        return 0.0;
    }
    -adv * sample_logprobs.iter().sum::<f64>()
}

/// Graph form of [`scst_loss`]. `logits` are teacher-forced over
/// `shift_right(tokens)`; each step's log-probability is taken under the
/// same temperature-scaled nucleus distribution the tokens were drawn from.
/// The advantage is a constant.
pub fn scst_loss_graph(g: &mut Graph, logits: Var, tokens: &[usize], advantage: f64, sampling: &SamplingConfig) -> Result<Var> {
    if tokens.is_empty() || advantage == 0.0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let lv = g.value(logits);
    if lv.rows() != tokens.len() {
        return Err(Error::ShapeMismatch {
            op: "scst_loss_graph",
            left: lv.shape(),
            right: (tokens.len(), 0),
        });
    }
    let mut mask = Tensor::full(lv.rows(), lv.cols(), -1e9);
    for (t, &tok) in tokens.iter().enumerate() {
        let scaled: Vec<f64> = lv.row(t).iter().map(|l| l / sampling.temperature).collect();
        let row = mask.row_mut(t);
        for i in nucleus(&softmax(&scaled), sampling.top_p) {
            row[i] = 0.0;
        }
        row[tok] = 0.0;
    }
    let scaled = g.scale(logits, 1.0 / sampling.temperature)?;
    let mask = g.constant(mask)?;
    let masked = g.add(scaled, mask)?;
    let logp = g.log_softmax(masked)?;
    let picks: Vec<(usize, usize)> = tokens.iter().copied().enumerate().collect();
    let sum = g.pick_sum(logp, &picks)?;
    g.scale(sum, -advantage)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW moments with a step count per parameter, so a parameter first
/// trained in a later stage starts with fresh bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: Vec<u64>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.tensor.rows(), p.tensor.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: vec![0; store.len()],
        }
    }

    /// Updates trainable parameters only; frozen ones keep values and moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, trainable: &[bool], cfg: &AdamConfig) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let i = id.0;
            if !trainable[i] {
                continue;
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
            let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
            let g = grads.get(id).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= cfg.lr * (mh / (libm::sqrt(vh) + cfg.eps) + cfg.weight_decay * p[k]);
            }
        }
    }
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub store: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    /// Shuffles training order.
    pub data_rng: ChaCha8Rng,
    /// Draws rollouts.
    pub sample_rng: ChaCha8Rng,
    /// `completed[s - 1]` is set once stage `s` has finished.
    pub completed: [bool; 4],
}

impl TrainState {
    pub fn new(store: ParamStore, seed: u64) -> Self {
        let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
        data_rng.set_stream(0);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
        sample_rng.set_stream(1);
        Self {
            adam: AdamState::new(&store),
            store,
            step: 0,
            data_rng,
            sample_rng,
            completed: [false; 4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub stage: u8,
    pub lambda_cap: f64,
    pub lambda_det: f64,
    pub lambda_rl: f64,
    pub reward: RewardWeights,
    pub sampling: SamplingConfig,
    pub det_weights: DetLossWeights,
    pub adam: AdamConfig,
    /// Optimizer steps.
    pub steps: usize,
    /// Figures per micro-batch.
    pub batch_size: usize,
    /// Micro-batches summed into one optimizer step.
    pub grad_accum: usize,
    /// Global gradient-norm clip over trainable parameters.
    pub clip_norm: Option<f64>,
    /// Cosine decay from `adam.lr` down to `lr_floor · adam.lr` over the
    /// stage; `None` keeps the rate constant.
    pub lr_floor: Option<f64>,
}

impl StageConfig {
    pub fn new(stage: u8) -> Self {
        Self {
            stage,
            lambda_cap: 0.2,
            lambda_det: 1.0,
            lambda_rl: 1.0,
            reward: RewardWeights::default(),
            sampling: SamplingConfig::default(),
            det_weights: DetLossWeights::default(),
            adam: AdamConfig::default(),
            steps: 100,
            batch_size: 8,
            grad_accum: 1,
            clip_norm: Some(1.0),
            lr_floor: Some(0.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.stage) {
            return Err(Error::InvalidArgument(format!("stage {} outside 1..=4", self.stage)));
        }
        for (name, v) in [("lambda_cap", self.lambda_cap), ("lambda_det", self.lambda_det), ("lambda_rl", self.lambda_rl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::InvalidArgument("batch_size and grad_accum must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.adam.lr)));
        }
        if let Some(f) = self.lr_floor {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!("lr_floor {f} outside [0, 1]")));
            }
        }
        self.reward.validate()?;
        self.sampling.validate()?;
        self.det_weights.validate()
    }

    /// Per-parameter trainable flags for this stage.
    pub fn trainable_mask(&self, store: &ParamStore) -> Vec<bool> {
        store
            .iter()
            .map(|(_, p)| match self.stage {
                1 => FigModel::is_captioner_param(&p.name),
                2 => FigModel::is_detector_param(&p.name),
                _ => true,
            })
            .collect()
    }

    /// Learning rate for optimizer step `k` (0-based) of this stage.
    pub fn lr_at(&self, k: usize) -> f64 {
        match self.lr_floor {
            None => self.adam.lr,
            Some(f) => {
                let t = if self.steps > 1 { k as f64 / (self.steps - 1) as f64 } else { 0.0 };
                let cos = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t));
                self.adam.lr * (f + (1.0 - f) * cos)
            }
        }
    }

    /// Stages that must have completed before this one.
    pub fn prerequisites(&self) -> core::ops::Range<u8> {
        1..self.stage
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLog {
    pub stage: u8,
    /// Global optimizer step after this update.
    pub step: u64,
    pub loss: f64,
    pub l_cap: f64,
    pub l_det: f64,
    pub l_rl: f64,
    /// Mean sampled and greedy rewards (stage 4 with rollouts only).
    pub reward_sample: f64,
    pub reward_greedy: f64,
    pub grad_norm: f64,
    /// Learning rate used for this update.
    pub lr: f64,
}

/// `(h_det, H_cap)` read off a teacher-forced pass over ground-truth
/// tokens, using the same positions `extract_interface` uses for generated
/// sequences. `hidden` comes from `teacher_forced` over `shift_right(targets)`.
pub fn interface_vars(g: &mut Graph, hidden: Var, targets: &[usize]) -> Result<(Var, Var, bool)> {
    let idx = interface_indices(targets);
    // Target k is fed back at input position k + 1.
    let det = match idx.det {
        Some(k) if k + 1 < targets.len() => Some(k + 1),
        _ => None,
    };
    let h_det = match det {
        Some(r) => g.select_rows(hidden, &[r])?,
        None => {
            let d = g.value(hidden).cols();
            g.constant(Tensor::zeros(1, d))?
        }
    };
    let rows: Vec<usize> = idx.caption.iter().map(|k| k + 1).collect();
    let h_cap = g.select_rows(hidden, &rows)?;
    Ok((h_det, h_cap, det.is_some()))
}

/// Teacher-forced detector conditioning for one figure.
pub fn teacher_force_hidden(model: &FigModel, store: &ParamStore, image: &crate::image::GrayImage, targets: &[usize]) -> Result<(Tensor, Tensor)> {
    let patches = model.patches(image)?;
    let mut g = Graph::new(store);
    let feats = model.captioner.vision.forward(&mut g, &patches)?;
    let (hidden, _) = model.captioner.teacher_forced(&mut g, feats, &shift_right(targets))?;
    let (h_det, h_cap, _) = interface_vars(&mut g, hidden, targets)?;
    Ok((g.value(h_det).clone(), g.value(h_cap).clone()))
}

/// Reward of a generation against a figure's ground truth. Predicted boxes
/// are not an input.
pub fn sequence_reward(
    model: &FigModel,
    fig: &FigureRecord,
    tokens: &[usize],
    w: &RewardWeights,
    scorer: &dyn TextScorer,
    aligner: &dyn CropTextAligner,
) -> RewardBreakdown {
    let pred = parse_structured(&model.vocab.decode_text(tokens));
    combined_reward(&fig.image, &pred, &fig.panels, w, scorer, aligner)
}

struct FigureLoss {
    l_cap: f64,
    l_det: f64,
    l_rl: f64,
    r_sample: f64,
    r_greedy: f64,
}

fn check_panels(panels: &[PanelAnnotation]) -> Result<()> {
    if panels.is_empty() {
        return Err(Error::InvalidArgument("training figure without panels".into()));
    }
    Ok(())
}

/// Runs one stage in place and returns per-step logs.
pub fn run_stage(model: &FigModel, state: &mut TrainState, cfg: &StageConfig, data: &[FigureRecord]) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    for s in cfg.prerequisites() {
        if !state.completed[s as usize - 1] {
            return Err(Error::StageOrder {
                stage: cfg.stage,
                missing: format!("stage {s}"),
            });
        }
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for f in data {
        check_panels(&f.panels)?;
    }
    let trainable = cfg.trainable_mask(&state.store);
    let targets: Vec<Vec<usize>> = data.iter().map(|f| model.encode_panels(&f.panels)).collect();

    // With the caption branch frozen its interface features are constants.
    let frozen_iface: Option<Vec<(Tensor, Tensor)>> = if cfg.stage == 2 {
        Some(
            data.iter()
                .zip(&targets)
                .map(|(f, t)| teacher_force_hidden(model, &state.store, &f.image, t))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let (w_cap, w_det, w_rl) = match cfg.stage {
        1 => (1.0, 0.0, 0.0),
        2 => (0.0, 1.0, 0.0),
        3 => (cfg.lambda_cap, cfg.lambda_det, 0.0),
        _ => (cfg.lambda_cap, cfg.lambda_det, cfg.lambda_rl),
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut logs = Vec::with_capacity(cfg.steps);
    let per_step = cfg.batch_size * cfg.grad_accum;
    for k in 0..cfg.steps {
        let mut grads = Gradients::zeros_like(&state.store);
        let mut acc = FigureLoss {
            l_cap: 0.0,
            l_det: 0.0,
            l_rl: 0.0,
            r_sample: 0.0,
            r_greedy: 0.0,
        };
        for _ in 0..per_step {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut state.data_rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let fl = figure_loss(
                model,
                state,
                &trainable,
                cfg,
                (w_cap, w_det, w_rl),
                &data[i],
                &targets[i],
                frozen_iface.as_ref().map(|v| &v[i]),
                &mut grads,
            )?;
            acc.l_cap += fl.l_cap;
            acc.l_det += fl.l_det;
            acc.l_rl += fl.l_rl;
            acc.r_sample += fl.r_sample;
            acc.r_greedy += fl.r_greedy;
        }
        let n = per_step as f64;
        grads.scale(1.0 / n);
        let grad_norm = grads.global_norm();
        if let Some(c) = cfg.clip_norm {
            if grad_norm > c {
                grads.scale(c / grad_norm);
            }
        }
        let adam = AdamConfig {
            lr: cfg.lr_at(k),
            ..cfg.adam
        };
        state.adam.step(&mut state.store, &grads, &trainable, &adam);
        state.step += 1;
        let (l_cap, l_det, l_rl) = (acc.l_cap / n, acc.l_det / n, acc.l_rl / n);
        logs.push(StepLog {
            stage: cfg.stage,
            step: state.step,
            loss: w_cap * l_cap + w_det * l_det + w_rl * l_rl,
            l_cap,
            l_det,
            l_rl,
            reward_sample: acc.r_sample / n,
            reward_greedy: acc.r_greedy / n,
            grad_norm,
            lr: adam.lr,
        });
    }
    state.completed[cfg.stage as usize - 1] = true;
    Ok(logs)
}

#[allow(clippy::too_many_arguments)]
fn figure_loss(
    model: &FigModel,
    state: &mut TrainState,
    trainable: &[bool],
    cfg: &StageConfig,
    (w_cap, w_det, w_rl): (f64, f64, f64),
    fig: &FigureRecord,
    targets: &[usize],
    frozen_iface: Option<&(Tensor, Tensor)>,
    grads: &mut Gradients,
) -> Result<FigureLoss> {
    let patches = model.patches(&fig.image)?;
    let mut out = FigureLoss {
        l_cap: 0.0,
        l_det: 0.0,
        l_rl: 0.0,
        r_sample: 0.0,
        r_greedy: 0.0,
    };

    // Rollouts run on current parameters before the graph borrows them.
    let rollout = if w_rl > 0.0 {
        let sample = sample_decode(&model.captioner, &state.store, &patches, &cfg.sampling, &mut state.sample_rng)?;
        let greedy = greedy_decode(&model.captioner, &state.store, &patches, cfg.sampling.max_new_tokens)?;
        let rs = sequence_reward(model, fig, &sample.tokens, &cfg.reward, &UnigramF1, &GlyphAligner).total;
        let rg = sequence_reward(model, fig, &greedy.tokens, &cfg.reward, &UnigramF1, &GlyphAligner).total;
        out.r_sample = rs;
        out.r_greedy = rg;
        Some((sample.tokens, rs - rg))
    } else {
        None
    };

    let mut g = Graph::with_trainable(&state.store, trainable);
    let mut terms: Vec<Var> = Vec::new();
    let needs_caption = w_cap > 0.0 || (w_det > 0.0 && frozen_iface.is_none()) || rollout.is_some();
    let feats = if needs_caption {
        Some(model.captioner.vision.forward(&mut g, &patches)?)
    } else {
        None
    };

    let mut iface = None;
    if let Some(feats) = feats {
        if w_cap > 0.0 || frozen_iface.is_none() {
            let (hidden, logits) = model.captioner.teacher_forced(&mut g, feats, &shift_right(targets))?;
            if w_cap > 0.0 {
                let ce = caption_ce_loss(&mut g, logits, targets)?;
                out.l_cap = g.value(ce).item();
                terms.push(g.scale(ce, w_cap)?);
            }
            if w_det > 0.0 && frozen_iface.is_none() {
                let (h_det, h_cap, _) = interface_vars(&mut g, hidden, targets)?;
                iface = Some((h_det, h_cap));
            }
        }
        if let Some((tokens, adv)) = &rollout {
            if !tokens.is_empty() {
                let (_, logits) = model.captioner.teacher_forced(&mut g, feats, &shift_right(tokens))?;
                let rl = scst_loss_graph(&mut g, logits, tokens, *adv, &cfg.sampling)?;
                out.l_rl = g.value(rl).item();
                terms.push(g.scale(rl, w_rl)?);
            }
        }
    }

    if w_det > 0.0 {
        let (h_det, h_cap) = match (frozen_iface, iface) {
            (Some((d, c)), _) => (g.constant(d.clone())?, g.constant(c.clone())?),
            (None, Some(v)) => v,
            (None, None) => return Err(Error::InvalidArgument("missing detector conditioning".into())),
        };
        let (logits, boxes) = model.detector.forward(&mut g, &patches, h_det, h_cap)?;
        let det = detection_loss_graph(&mut g, logits, boxes, &fig.panels, &cfg.det_weights)?;
        out.l_det = g.value(det.total).item();
        terms.push(g.scale(det.total, w_det)?);
    }

    let mut loss = match terms.first() {
        Some(&t) => t,
        None => return Ok(out),
    };
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    g.backward(loss, grads)?;
    Ok(out)
}

/// Mean greedy-decoding reward over figures.
pub fn mean_reward(model: &FigModel, store: &ParamStore, data: &[FigureRecord], w: &RewardWeights, max_new_tokens: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("figures"));
    }
    let mut total = 0.0;
    for f in data {
        let patches = model.patches(&f.image)?;
        let gen = greedy_decode(&model.captioner, store, &patches, max_new_tokens)?;
        total += sequence_reward(model, f, &gen.tokens, w, &UnigramF1, &GlyphAligner).total;
    }
    Ok(total / data.len() as f64)
}

/// Sequence log-likelihood of `tokens` under the sampling distribution.
pub fn sequence_logprob(model: &FigModel, store: &ParamStore, image: &crate::image::GrayImage, tokens: &[usize], sampling: &SamplingConfig) -> Result<f64> {
    let patches = model.patches(image)?;
    let mut g = Graph::new(store);
    let feats = model.captioner.vision.forward(&mut g, &patches)?;
    let (_, logits) = model.captioner.teacher_forced(&mut g, feats, &shift_right(tokens))?;
    let l = scst_loss_graph(&mut g, logits, tokens, -1.0, sampling)?;
    Ok(g.value(l).item())
}

/// Greedy interface check used by tests and tooling: whether the generated
/// sequence contains `[DET]`.
pub fn generates_det(model: &FigModel, store: &ParamStore, image: &crate::image::GrayImage, max_new_tokens: usize) -> Result<bool> {
    let patches = model.patches(image)?;
    let gen = greedy_decode(&model.captioner, store, &patches, max_new_tokens)?;
    Ok(extract_interface(&gen.tokens, &gen.hidden)?.det_found)
}
