//! Panel boxes, bipartite matching, the set-based detection loss, the query
//! decoder head and COCO-style mAP.
//!
//! Boxes are normalized `(cx, cy, w, h)` in image-fraction units. Classes are
//! the 26 panel letters plus a trailing no-object class.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::nn::{AttentionBlock, FeedForward, Linear};
use crate::structured::PanelLabel;
use crate::{Error, Result, Tensor};

/// 26 letters + no-object.
pub const NUM_CLASSES: usize = 27;
pub const NO_OBJECT: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxN {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxN {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Option<Self> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let size = |v: f64| v > 0.0 && v <= 1.0;
        (unit(cx) && unit(cy) && size(w) && size(h)).then_some(Self { cx, cy, w, h })
    }

    /// From corners; corners are clipped to `[0, 1]` first.
    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> Option<Self> {
        let c = |v: f64| v.clamp(0.0, 1.0);
        let (x0, y0, x1, y1) = (c(x0), c(y0), c(x1), c(y1));
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// Corners `[x0, y0, x1, y1]` clipped to `[0, 1]`.
    pub fn to_xyxy(&self) -> [f64; 4] {
        let c = |v: f64| v.clamp(0.0, 1.0);
        [
            c(self.cx - self.w / 2.0),
            c(self.cy - self.h / 2.0),
            c(self.cx + self.w / 2.0),
            c(self.cy + self.h / 2.0),
        ]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.to_xyxy();
        (x1 - x0) * (y1 - y0)
    }
}

fn overlap(a: &BoxN, b: &BoxN) -> (f64, f64, f64) {
    let [ax0, ay0, ax1, ay1] = a.to_xyxy();
    let [bx0, by0, bx1, by1] = b.to_xyxy();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    (inter, union, hull)
}

pub fn iou(a: &BoxN, b: &BoxN) -> f64 {
    let (inter, union, _) = overlap(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BoxN, b: &BoxN) -> f64 {
    let (inter, union, hull) = overlap(a, b);
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoxN,
    pub class_probs: Vec<f64>,
    pub score: f64,
}

impl Detection {
    /// Most probable panel letter, ignoring the no-object class.
    pub fn label(&self) -> PanelLabel {
        let best = crate::tensor::argmax(&self.class_probs[..NO_OBJECT]);
        PanelLabel::from_index(best).expect("26 letter classes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelAnnotation {
    pub label: PanelLabel,
    pub bbox: BoxN,
    pub caption: alloc::string::String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetLossWeights {
    pub lambda_cls: f64,
    pub lambda_bbox: f64,
    pub lambda_giou: f64,
}

impl Default for DetLossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_bbox: 5.0,
            lambda_giou: 2.0,
        }
    }
}

impl DetLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_bbox, self.lambda_giou];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) || all.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidArgument(format!("bad detection loss weights {all:?}")));
        }
        Ok(())
    }
}

/// Minimum-cost assignment for a rectangular cost matrix (rows = predictions,
/// cols = ground truths). Returns `min(rows, cols)` pairs sorted by row.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n_rows = cost.len();
    let n_cols = cost.first().map_or(0, |r| r.len());
    if n_rows == 0 || n_cols == 0 {
        return Vec::new();
    }
    if n_rows <= n_cols {
        let mut pairs = assign(n_rows, n_cols, |i, j| cost[i][j]);
        pairs.sort_unstable();
        pairs
    } else {
        let mut pairs: Vec<(usize, usize)> = assign(n_cols, n_rows, |i, j| cost[j][i])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        pairs
    }
}

/// Shortest augmenting path with potentials; requires `n <= m`.
fn assign(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) assigned to column j; 0 = free.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DetLossComponents {
    pub cls: f64,
    pub bbox: f64,
    pub giou: f64,
}

/// Matching cost between one prediction and one ground truth.
pub fn match_cost(probs: &[f64], bbox: &BoxN, gt: &PanelAnnotation, w: &DetLossWeights) -> f64 {
    let l1: f64 = bbox
        .as_array()
        .iter()
        .zip(gt.bbox.as_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    w.lambda_cls * -probs[gt.label.index()] + w.lambda_bbox * l1 + w.lambda_giou * (1.0 - giou(bbox, &gt.bbox))
}

fn cost_matrix(probs: &[Vec<f64>], boxes: &[BoxN], gts: &[PanelAnnotation], w: &DetLossWeights) -> Vec<Vec<f64>> {
    probs
        .iter()
        .zip(boxes)
        .map(|(p, b)| gts.iter().map(|gt| match_cost(p, b, gt, w)).collect())
        .collect()
}

/// Set-based detection loss on plain values.
///
/// `L_cls` is the mean cross entropy over all predictions (unmatched ones
/// target no-object); `L_bbox` (L1 on `cxcywh`, summed over coordinates) and
/// `L_giou` (`1 − GIoU`) are averaged over matched pairs.
pub fn detection_loss(preds: &[Detection], gts: &[PanelAnnotation], w: &DetLossWeights) -> (f64, DetLossComponents) {
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.class_probs.clone()).collect();
    let boxes: Vec<BoxN> = preds.iter().map(|p| p.bbox).collect();
    let matching = hungarian_match(&cost_matrix(&probs, &boxes, gts, w));
    let mut targets = vec![NO_OBJECT; preds.len()];
    for &(i, j) in &matching {
        targets[i] = gts[j].label.index();
    }
    let cls = if preds.is_empty() {
        0.0
    } else {
        preds
            .iter()
            .zip(&targets)
            .map(|(p, &t)| -libm::log(p.class_probs[t]))
            .sum::<f64>()
            / preds.len() as f64
    };
    let (mut bbox, mut gi) = (0.0, 0.0);
    for &(i, j) in &matching {
        bbox += boxes[i]
            .as_array()
            .iter()
            .zip(gts[j].bbox.as_array())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
        gi += 1.0 - giou(&boxes[i], &gts[j].bbox);
    }
    if !matching.is_empty() {
        bbox /= matching.len() as f64;
        gi /= matching.len() as f64;
    }
    let c = DetLossComponents { cls, bbox, giou: gi };
    (w.lambda_cls * cls + w.lambda_bbox * bbox + w.lambda_giou * gi, c)
}

/// Differentiable GIoU for aligned rows of `pred` (a graph node) and `gt`
/// (constants), both `[M × 4]` in `cxcywh`. Returns `[M × 1]`.
pub fn giou_rows(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    let m = gt.rows();
    let zeros = g.constant(Tensor::zeros(m, 1))?;
    let ones = g.constant(Tensor::full(m, 1, 1.0))?;
    let corners = |g: &mut Graph, b: Var| -> Result<[Var; 4]> {
        let cx = g.slice_cols(b, 0, 1)?;
        let cy = g.slice_cols(b, 1, 1)?;
        let w = g.slice_cols(b, 2, 1)?;
        let h = g.slice_cols(b, 3, 1)?;
        let hw = g.scale(w, 0.5)?;
        let hh = g.scale(h, 0.5)?;
        let raw = [g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?];
        let mut out = raw;
        for (o, r) in out.iter_mut().zip(raw) {
            let lo = g.max(r, zeros)?;
            *o = g.min(lo, ones)?;
        }
        Ok(out)
    };
    let gtv = g.constant(gt.clone())?;
    let [px0, py0, px1, py1] = corners(g, pred)?;
    let [gx0, gy0, gx1, gy1] = corners(g, gtv)?;

    let ix0 = g.max(px0, gx0)?;
    let iy0 = g.max(py0, gy0)?;
    let ix1 = g.min(px1, gx1)?;
    let iy1 = g.min(py1, gy1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw)?;
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;

    let pw = g.sub(px1, px0)?;
    let ph = g.sub(py1, py0)?;
    let pa = g.mul(pw, ph)?;
    let gw = g.sub(gx1, gx0)?;
    let gh = g.sub(gy1, gy0)?;
    let ga = g.mul(gw, gh)?;
    let sum = g.add(pa, ga)?;
    let union = g.sub(sum, inter)?;
    let iou = g.div(inter, union)?;

    let hx0 = g.min(px0, gx0)?;
    let hy0 = g.min(py0, gy0)?;
    let hx1 = g.max(px1, gx1)?;
    let hy1 = g.max(py1, gy1)?;
    let hw = g.sub(hx1, hx0)?;
    let hh = g.sub(hy1, hy0)?;
    let hull = g.mul(hw, hh)?;
    let gap = g.sub(hull, union)?;
    let frac = g.div(gap, hull)?;
    g.sub(iou, frac)
}

/// Result of the differentiable detection loss.
pub struct DetLossOutput {
    pub total: Var,
    pub components: DetLossComponents,
    pub matching: Vec<(usize, usize)>,
}

/// Differentiable version of [`detection_loss`] on decoder outputs:
/// `logits` is `[N_d × 27]`, `boxes` is `[N_d × 4]` (sigmoid outputs).
pub fn detection_loss_graph(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    gts: &[PanelAnnotation],
    w: &DetLossWeights,
) -> Result<DetLossOutput> {
    let lv = g.value(logits).clone();
    let bv = g.value(boxes).clone();
    let n = lv.rows();
    let probs: Vec<Vec<f64>> = (0..n).map(|r| crate::tensor::softmax(lv.row(r))).collect();
    let pred_boxes: Vec<BoxN> = (0..n).map(|r| row_box(bv.row(r))).collect();
    let matching = hungarian_match(&cost_matrix(&probs, &pred_boxes, gts, w));

    let mut targets: Vec<Option<usize>> = vec![Some(NO_OBJECT); n];
    for &(i, j) in &matching {
        targets[i] = Some(gts[j].label.index());
    }
    let cls = g.cross_entropy(logits, &targets)?;
    let mut total = g.scale(cls, w.lambda_cls)?;
    let mut components = DetLossComponents {
        cls: g.value(cls).item(),
        ..Default::default()
    };
    if !matching.is_empty() {
        let m = matching.len();
        let idx: Vec<usize> = matching.iter().map(|p| p.0).collect();
        let mut gt_t = Tensor::zeros(m, 4);
        for (r, &(_, j)) in matching.iter().enumerate() {
            gt_t.row_mut(r).copy_from_slice(&gts[j].bbox.as_array());
        }
        let sel = g.select_rows(boxes, &idx)?;
        let gt_c = g.constant(gt_t.clone())?;
        let diff = g.sub(sel, gt_c)?;
        let l1 = g.abs(diff)?;
        let l1 = g.sum(l1)?;
        let l_bbox = g.scale(l1, 1.0 / m as f64)?;
        let gi = giou_rows(g, sel, &gt_t)?;
        let gi = g.mean(gi)?;
        let l_giou = g.scale(gi, -1.0)?;
        let l_giou = g.add_scalar(l_giou, 1.0)?;
        components.bbox = g.value(l_bbox).item();
        components.giou = g.value(l_giou).item();
        let wb = g.scale(l_bbox, w.lambda_bbox)?;
        let wg = g.scale(l_giou, w.lambda_giou)?;
        total = g.add(total, wb)?;
        total = g.add(total, wg)?;
    }
    Ok(DetLossOutput {
        total,
        components,
        matching,
    })
}

/// A box head output row as a box. Sigmoid outputs always lie in `(0, 1)`;
/// underflow to exactly 0 is nudged so the box stays valid.
pub fn row_box(r: &[f64]) -> BoxN {
    let tiny = 1e-9;
    BoxN {
        cx: r[0].clamp(0.0, 1.0),
        cy: r[1].clamp(0.0, 1.0),
        w: r[2].clamp(tiny, 1.0),
        h: r[3].clamp(tiny, 1.0),
    }
}

/// The query decoder: per layer, cross-attention from queries to image
/// features (residual + layer norm) and a feed-forward block; then a 27-way
/// class head and a sigmoid box head.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub layers: Vec<(AttentionBlock, FeedForward)>,
    pub class_head: Linear,
    pub box_hidden: Linear,
    pub box_out: Linear,
}

impl DetectionHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                Ok((
                    AttentionBlock::new(store, &format!("{prefix}.layer{l}.cross"), dim, heads, rng)?,
                    FeedForward::new(store, &format!("{prefix}.layer{l}.ffn"), dim, 2 * dim, rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            class_head: Linear::new(store, &format!("{prefix}.class"), dim, NUM_CLASSES, true, rng)?,
            box_hidden: Linear::new(store, &format!("{prefix}.box.hidden"), dim, dim, true, rng)?,
            box_out: Linear::new(store, &format!("{prefix}.box.out"), dim, 4, true, rng)?,
        })
    }

    /// Returns `(logits [N_d × 27], boxes [N_d × 4])`.
    pub fn forward(&self, g: &mut Graph, image_feats: Var, queries: Var) -> Result<(Var, Var)> {
        let mut q = queries;
        for (cross, ffn) in &self.layers {
            q = cross.forward(g, q, image_feats, false)?;
            q = ffn.forward(g, q)?;
        }
        let logits = self.class_head.forward(g, q)?;
        let h = self.box_hidden.forward(g, q)?;
        let h = g.relu(h)?;
        let b = self.box_out.forward(g, h)?;
        let boxes = g.sigmoid(b)?;
        Ok((logits, boxes))
    }
}

/// Converts head outputs to detections (one per query).
pub fn to_detections(logits: &Tensor, boxes: &Tensor) -> Vec<Detection> {
    (0..logits.rows())
        .map(|r| {
            let probs = crate::tensor::softmax(logits.row(r));
            let score = probs[..NO_OBJECT].iter().copied().fold(0.0, f64::max);
            Detection {
                bbox: row_box(boxes.row(r)),
                class_probs: probs,
                score,
            }
        })
        .collect()
}

/// A scored, labeled box, the unit of mAP evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub label: PanelLabel,
    pub bbox: BoxN,
    pub score: f64,
}

impl From<&Detection> for ScoredBox {
    fn from(d: &Detection) -> Self {
        Self {
            label: d.label(),
            bbox: d.bbox,
            score: d.score,
        }
    }
}

/// `0.50, 0.55, …, 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Detections kept per figure, highest score first.
pub const MAX_DETS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    /// Mean AP over the requested thresholds.
    pub map_range: f64,
    /// AP at IoU 0.5.
    pub map_50: f64,
    pub per_threshold: Vec<f64>,
    /// Set when there was no ground truth at all; the mAP values are then 0.
    pub no_ground_truth: bool,
}

/// COCO-style mAP: per class, predictions ranked by score are greedily
/// matched to the highest-IoU unmatched ground truth of the same figure;
/// AP is the 101-point interpolated precision. Classes are averaged over
/// those present in the ground truth, then thresholds are averaged.
pub fn compute_map(all_preds: &[Vec<ScoredBox>], all_gts: &[Vec<(PanelLabel, BoxN)>], thresholds: &[f64]) -> MapReport {
    let mut classes: Vec<PanelLabel> = all_gts.iter().flatten().map(|g| g.0).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return MapReport {
            map_range: 0.0,
            map_50: 0.0,
            per_threshold: vec![0.0; thresholds.len()],
            no_ground_truth: true,
        };
    }
    let mean_ap = |t: f64| -> f64 {
        classes
            .iter()
            .map(|&c| average_precision(all_preds, all_gts, c, t))
            .sum::<f64>()
            / classes.len() as f64
    };
    let per_threshold: Vec<f64> = thresholds.iter().map(|&t| mean_ap(t)).collect();
    let map_range = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().sum::<f64>() / per_threshold.len() as f64
    };
    let map_50 = thresholds
        .iter()
        .position(|&t| (t - 0.5).abs() < 1e-12)
        .map_or_else(|| mean_ap(0.5), |i| per_threshold[i]);
    MapReport {
        map_range,
        map_50,
        per_threshold,
        no_ground_truth: false,
    }
}

fn average_precision(
    all_preds: &[Vec<ScoredBox>],
    all_gts: &[Vec<(PanelLabel, BoxN)>],
    class: PanelLabel,
    threshold: f64,
) -> f64 {
    // (score, is_true_positive) in figure order, then stable-sorted by score.
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0;
    for (fig, gts) in all_gts.iter().enumerate() {
        let gts: Vec<&BoxN> = gts.iter().filter(|g| g.0 == class).map(|g| &g.1).collect();
        n_gt += gts.len();
        let Some(preds) = all_preds.get(fig) else { continue };
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
        order.truncate(MAX_DETS);
        let mut taken = vec![false; gts.len()];
        for i in order {
            let p = &preds[i];
            if p.label != class {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(&p.bbox, gt);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            ranked.push((p.score, best.is_some()));
        }
    }
    if n_gt == 0 {
        return 0.0;
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0.0, 0.0);
    for &(_, hit) in &ranked {
        if hit {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        precision.push(tp / (tp + fp));
        recall.push(tp / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            ap += precision[idx];
        }
    }
    ap / 101.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Gradients, ParamId};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoxN {
        BoxN::new(cx, cy, w, h).unwrap()
    }

    fn ann(c: char, bx: BoxN) -> PanelAnnotation {
        PanelAnnotation {
            label: PanelLabel::new(c).unwrap(),
            bbox: bx,
            caption: "x".into(),
        }
    }

    #[test]
    fn giou_identical_and_touching() {
        let a = b(0.3, 0.3, 0.2, 0.2);
        assert_eq!(giou(&a, &a), 1.0);
        let l = b(0.25, 0.5, 0.5, 1.0);
        let r = b(0.75, 0.5, 0.5, 1.0);
        assert_eq!(iou(&l, &r), 0.0);
        assert_eq!(giou(&l, &r), 0.0);
    }

    #[test]
    fn giou_matches_corner_arithmetic() {
        // (0.2,0.2)-(0.4,0.4) vs (0.3,0.3)-(0.5,0.5): inter 0.01, union 0.07, hull 0.09.
        let v = giou(&b(0.3, 0.3, 0.2, 0.2), &b(0.4, 0.4, 0.2, 0.2));
        let expect = 0.01 / 0.07 - (0.09 - 0.07) / 0.09;
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, k: usize) -> f64 {
            if row == cost.len() {
                return if used.iter().filter(|u| **u).count() == k { 0.0 } else { f64::INFINITY };
            }
            // A row may stay unassigned when there are more rows than columns.
            let mut best = if cost.len() > used.len() {
                rec(cost, row + 1, used, k)
            } else {
                f64::INFINITY
            };
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + rec(cost, row + 1, used, k));
                    used[j] = false;
                }
            }
            best
        }
        let k = cost.len().min(cost[0].len());
        rec(cost, 0, &mut vec![false; cost[0].len()], k)
    }

    #[test]
    fn hungarian_small_cases() {
        assert_eq!(hungarian_match(&[vec![0.0, 9.0], vec![9.0, 0.0]]), [(0, 0), (1, 1)]);
        assert_eq!(hungarian_match(&[vec![3.0]]), [(0, 0)]);
        assert!(hungarian_match(&[]).is_empty());
        assert!(hungarian_match(&[vec![]]).is_empty());
    }

    #[test]
    fn hungarian_equals_permutation_minimum_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let cost: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..5).map(|_| rng.gen_range(0..20) as f64).collect())
                .collect();
            let m = hungarian_match(&cost);
            let total: f64 = m.iter().map(|&(i, j)| cost[i][j]).sum();
            assert_eq!(total, brute_force_min(&cost));
        }
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal_on_rectangles(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let m = hungarian_match(&cost);
            prop_assert_eq!(m.len(), rows.min(cols));
            let mut rs: Vec<usize> = m.iter().map(|p| p.0).collect();
            let mut cs: Vec<usize> = m.iter().map(|p| p.1).collect();
            rs.dedup(); cs.sort_unstable(); cs.dedup();
            prop_assert_eq!(rs.len(), m.len());
            prop_assert_eq!(cs.len(), m.len());
            let total: f64 = m.iter().map(|&(i, j)| cost[i][j]).sum();
            prop_assert!((total - brute_force_min(&cost)).abs() < 1e-9);
        }

        #[test]
        fn giou_properties(a in (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.6, 0.01f64..0.6),
                           c in (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.6, 0.01f64..0.6)) {
            let x = BoxN::from_xyxy(a.0 - a.2 / 2.0, a.1 - a.3 / 2.0, a.0 + a.2 / 2.0, a.1 + a.3 / 2.0);
            let y = BoxN::from_xyxy(c.0 - c.2 / 2.0, c.1 - c.3 / 2.0, c.0 + c.2 / 2.0, c.1 + c.3 / 2.0);
            if let (Some(x), Some(y)) = (x, y) {
                let g = giou(&x, &y);
                prop_assert_eq!(g, giou(&y, &x));
                prop_assert!(g <= iou(&x, &y) + 1e-15);
                prop_assert!((-1.0..=1.0).contains(&g));
                prop_assert!((giou(&x, &x) - 1.0).abs() < 1e-12);
            }
        }
    }

    fn one_hot_detection(class: usize, bx: BoxN, margin: f64) -> Detection {
        let mut logits = vec![0.0; NUM_CLASSES];
        logits[class] = margin;
        let probs = crate::tensor::softmax(&logits);
        Detection {
            bbox: bx,
            score: probs[..NO_OBJECT].iter().copied().fold(0.0, f64::max),
            class_probs: probs,
        }
    }

    #[test]
    fn perfect_predictions_have_near_zero_loss() {
        let gts = [ann('A', b(0.25, 0.25, 0.4, 0.4)), ann('B', b(0.75, 0.75, 0.4, 0.4))];
        let preds = [
            one_hot_detection(1, gts[1].bbox, 20.0),
            one_hot_detection(NO_OBJECT, b(0.5, 0.5, 0.1, 0.1), 20.0),
            one_hot_detection(0, gts[0].bbox, 20.0),
        ];
        let (total, c) = detection_loss(&preds, &gts, &DetLossWeights::default());
        assert_eq!(c.bbox, 0.0);
        assert!(c.giou.abs() < 1e-15);
        assert!(total < 1e-6, "{total}");
    }

    #[test]
    fn no_ground_truth_is_pure_no_object_loss() {
        let uniform = Detection {
            bbox: b(0.5, 0.5, 0.2, 0.2),
            class_probs: vec![1.0 / 27.0; 27],
            score: 1.0 / 27.0,
        };
        let (total, c) = detection_loss(&[uniform.clone(), uniform], &[], &DetLossWeights::default());
        assert!((c.cls - libm::log(27.0)).abs() < 1e-12);
        assert!((total - 2.0 * libm::log(27.0)).abs() < 1e-12);
    }

    fn random_detection(rng: &mut ChaCha8Rng) -> Detection {
        let logits: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let probs = crate::tensor::softmax(&logits);
        Detection {
            bbox: b(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)),
            score: probs[..NO_OBJECT].iter().copied().fold(0.0, f64::max),
            class_probs: probs,
        }
    }

    /// Exhaustive oracle: enumerate every injective assignment of gts to preds,
    /// keep the one with minimum matching cost, recompute each loss term.
    fn brute_force_loss(preds: &[Detection], gts: &[PanelAnnotation], w: &DetLossWeights) -> f64 {
        fn perms(n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in 0..n {
                if !cur.contains(&i) {
                    cur.push(i);
                    perms(n, k, cur, out);
                    cur.pop();
                }
            }
        }
        let mut all = Vec::new();
        perms(preds.len(), gts.len(), &mut Vec::new(), &mut all);
        let best = all
            .iter()
            .min_by(|a, b| {
                let c = |p: &Vec<usize>| -> f64 {
                    p.iter().enumerate().map(|(j, &i)| match_cost(&preds[i].class_probs, &preds[i].bbox, &gts[j], w)).sum()
                };
                c(a).total_cmp(&c(b))
            })
            .unwrap();
        let mut cls = 0.0;
        for (i, p) in preds.iter().enumerate() {
            let target = best.iter().position(|&x| x == i).map_or(NO_OBJECT, |j| gts[j].label.index());
            cls -= libm::log(p.class_probs[target]);
        }
        cls /= preds.len() as f64;
        let mut l1 = 0.0;
        let mut gl = 0.0;
        for (j, &i) in best.iter().enumerate() {
            let (p, q) = (preds[i].bbox, gts[j].bbox);
            l1 += (p.cx - q.cx).abs() + (p.cy - q.cy).abs() + (p.w - q.w).abs() + (p.h - q.h).abs();
            gl += 1.0 - giou(&p, &q);
        }
        let m = best.len() as f64;
        w.lambda_cls * cls + w.lambda_bbox * l1 / m + w.lambda_giou * gl / m
    }

    #[test]
    fn loss_matches_exhaustive_oracle_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = DetLossWeights::default();
        for _ in 0..20 {
            let preds: Vec<Detection> = (0..3).map(|_| random_detection(&mut rng)).collect();
            let gts = [ann('A', b(0.3, 0.3, 0.2, 0.3)), ann('C', b(0.6, 0.7, 0.3, 0.2))];
            let (total, _) = detection_loss(&preds, &gts, &w);
            assert!((total - brute_force_loss(&preds, &gts, &w)).abs() < 1e-12);
            let rp: Vec<Detection> = preds.iter().rev().cloned().collect();
            let rg = [gts[1].clone(), gts[0].clone()];
            let (t2, _) = detection_loss(&rp, &rg, &w);
            assert!((total - t2).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_loss_agrees_with_value_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let logits = crate::nn::normal(&mut rng, 4, NUM_CLASSES, 1.0);
        let pre = crate::nn::normal(&mut rng, 4, 4, 1.0);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = g.constant(logits.clone()).unwrap();
        let p = g.constant(pre).unwrap();
        let boxes = g.sigmoid(p).unwrap();
        let gts = [ann('B', b(0.4, 0.4, 0.3, 0.3)), ann('A', b(0.7, 0.2, 0.2, 0.2))];
        let w = DetLossWeights::default();
        let out = detection_loss_graph(&mut g, l, boxes, &gts, &w).unwrap();
        let dets = to_detections(&logits, g.value(boxes));
        let (total, c) = detection_loss(&dets, &gts, &w);
        assert!((g.value(out.total).item() - total).abs() < 1e-12);
        assert!((out.components.giou - c.giou).abs() < 1e-12);
    }

    #[test]
    fn giou_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut store = ParamStore::new();
        store.register("logits", crate::nn::normal(&mut rng, 3, NUM_CLASSES, 1.0)).unwrap();
        store.register("pre", crate::nn::normal(&mut rng, 3, 4, 0.5)).unwrap();
        let gts = [ann('A', b(0.4, 0.45, 0.3, 0.35)), ann('D', b(0.7, 0.3, 0.2, 0.25))];
        let w = DetLossWeights::default();
        let eval = |store: &ParamStore, grads: Option<&mut Gradients>| -> f64 {
            let mut g = Graph::new(store);
            let l = g.param(ParamId(0));
            let p = g.param(ParamId(1));
            let bx = g.sigmoid(p).unwrap();
            let out = detection_loss_graph(&mut g, l, bx, &gts, &w).unwrap();
            if let Some(gr) = grads {
                g.backward(out.total, gr).unwrap();
            }
            g.value(out.total).item()
        };
        let mut grads = Gradients::zeros_like(&store);
        eval(&store, Some(&mut grads));
        let h = 1e-6;
        for id in [ParamId(0), ParamId(1)] {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let plus = eval(&store, None);
                store.get_mut(id).data_mut()[k] = orig - h;
                let minus = eval(&store, None);
                store.get_mut(id).data_mut()[k] = orig;
                let num = (plus - minus) / (2.0 * h);
                let ana = grads.get(id).data()[k];
                assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-2), "{num} vs {ana}");
            }
        }
    }

    fn sb(c: char, bx: BoxN, score: f64) -> ScoredBox {
        ScoredBox {
            label: PanelLabel::new(c).unwrap(),
            bbox: bx,
            score,
        }
    }

    #[test]
    fn map_perfect_and_empty() {
        let gts = vec![vec![(PanelLabel::new('A').unwrap(), b(0.25, 0.25, 0.4, 0.4))], vec![
            (PanelLabel::new('A').unwrap(), b(0.5, 0.5, 0.3, 0.3)),
            (PanelLabel::new('B').unwrap(), b(0.2, 0.8, 0.3, 0.3)),
        ]];
        let perfect: Vec<Vec<ScoredBox>> = gts
            .iter()
            .map(|f| f.iter().map(|(l, bx)| sb(l.as_char(), *bx, 1.0)).collect())
            .collect();
        let r = compute_map(&perfect, &gts, &default_thresholds());
        assert_eq!(r.map_range, 1.0);
        assert_eq!(r.map_50, 1.0);
        let r = compute_map(&[vec![], vec![]], &gts, &default_thresholds());
        assert_eq!(r.map_range, 0.0);
        let r = compute_map(&[vec![]], &[vec![]], &default_thresholds());
        assert!(r.no_ground_truth);
    }

    #[test]
    fn map_matches_hand_staircase() {
        // One gt; a true positive at IoU 0.6 and a false positive.
        let gt = b(0.5, 0.5, 0.4, 0.4);
        // Same height, shifted right: IoU = overlap / union = (0.4-d)/(0.4+d) = 0.6 at d = 0.1.
        let tp_box = b(0.6, 0.5, 0.4, 0.4);
        assert!((iou(&tp_box, &gt) - 0.6).abs() < 1e-12);
        let fp_box = b(0.1, 0.1, 0.1, 0.1);
        let gts = vec![vec![(PanelLabel::new('A').unwrap(), gt)]];
        // True positive ranked first: precision [1, 1/2], recall [1, 1] -> AP 1.
        let r = compute_map(&[vec![sb('A', tp_box, 0.9), sb('A', fp_box, 0.8)]], &gts, &[0.5]);
        assert_eq!(r.map_50, 1.0);
        // False positive first: precision [0, 1/2] -> envelope 1/2 at every recall level.
        let r = compute_map(&[vec![sb('A', tp_box, 0.7), sb('A', fp_box, 0.8)]], &gts, &[0.5]);
        assert!((r.map_50 - 0.5).abs() < 1e-12);
        // At 0.65 the only candidate is below threshold.
        let r = compute_map(&[vec![sb('A', tp_box, 0.9)]], &gts, &[0.65]);
        assert_eq!(r.map_range, 0.0);
    }

    #[test]
    fn adding_a_top_ranked_correct_prediction_never_lowers_ap() {
        let gts = vec![vec![
            (PanelLabel::new('A').unwrap(), b(0.25, 0.25, 0.3, 0.3)),
            (PanelLabel::new('A').unwrap(), b(0.75, 0.75, 0.3, 0.3)),
        ]];
        let base = vec![sb('A', b(0.5, 0.5, 0.1, 0.1), 0.6), sb('A', b(0.75, 0.75, 0.3, 0.3), 0.5)];
        let before = compute_map(core::slice::from_ref(&base), &gts, &default_thresholds()).map_range;
        let mut more = base;
        more.push(sb('A', b(0.25, 0.25, 0.3, 0.3), 0.9));
        let after = compute_map(&[more], &gts, &default_thresholds()).map_range;
        assert!(after >= before);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let head = DetectionHead::new(&mut store, "det.head", 8, 2, 2, &mut rng).unwrap();
        let feats = crate::testutil::random(&mut rng, 6, 8);
        let queries = crate::testutil::random(&mut rng, 4, 8);
        let gts = [ann('A', b(0.3, 0.4, 0.3, 0.3)), ann('B', b(0.7, 0.6, 0.25, 0.3))];
        let f = move |g: &mut Graph| -> Result<Var> {
            let fv = g.constant(feats.clone())?;
            let qv = g.constant(queries.clone())?;
            let (l, bx) = head.forward(g, fv, qv)?;
            Ok(detection_loss_graph(g, l, bx, &gts, &DetLossWeights::default())?.total)
        };
        crate::testutil::fd_check(&mut store, &f, 1e-4);
    }

    #[test]
    fn head_boxes_are_always_valid() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = DetectionHead::new(&mut store, "det.head", 8, 2, 2, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let feats = g.constant(crate::nn::normal(&mut rng, 6, 8, 3.0)).unwrap();
        let q = g.constant(crate::nn::normal(&mut rng, 5, 8, 3.0)).unwrap();
        let (l, bx) = head.forward(&mut g, feats, q).unwrap();
        let dets = to_detections(g.value(l), g.value(bx));
        assert_eq!(dets.len(), 5);
        for d in dets {
            assert!(BoxN::new(d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h).is_some());
            assert!((d.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
