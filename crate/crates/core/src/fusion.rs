//! Gated fusion of caption-token states into detector queries.
//!
//! ```text
//! F_txt = H_cap · W_txt
//! Q'    = LN(Q  + Attn(Q,  h_det))
//! Q''   = LN(Q' + Attn(Q', F_txt))
//! [b, g_raw] = Q'' · W_bg + c_bg,   g = tanh(g_raw)
//! Q'''  = Q'' ⊙ (1 + g) + b
//! ```
//!
//! `W_bg` and `c_bg` start at zero, so the modulation starts as the identity.

use alloc::format;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::nn::AttentionBlock;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputs {
    /// `Q`, `[N_d × d]`.
    pub queries: Tensor,
    /// `h_det`, `[1 × d]`.
    pub det_feature: Tensor,
    /// `H_cap`, `[N_t × d]`; may have zero rows.
    pub caption_tokens: Tensor,
}

impl FusionInputs {
    pub fn new(queries: Tensor, det_feature: Tensor, caption_tokens: Tensor) -> Result<Self> {
        let d = queries.cols();
        if queries.rows() == 0 {
            return Err(Error::Empty("fusion queries"));
        }
        if det_feature.shape() != (1, d) {
            return Err(Error::ShapeMismatch {
                op: "fusion det feature",
                left: queries.shape(),
                right: det_feature.shape(),
            });
        }
        if caption_tokens.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "fusion caption tokens",
                left: queries.shape(),
                right: caption_tokens.shape(),
            });
        }
        if !(queries.is_finite() && det_feature.is_finite() && caption_tokens.is_finite()) {
            return Err(Error::NonFinite { op: "fusion inputs" });
        }
        Ok(Self {
            queries,
            det_feature,
            caption_tokens,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub w_txt: ParamId,
    pub det_attn: AttentionBlock,
    pub text_attn: AttentionBlock,
    /// `[d × 2d]`
    pub w_bg: ParamId,
    /// `[1 × 2d]`
    pub c_bg: ParamId,
    pub dim: usize,
}

impl FusionParams {
    /// Registers parameters under `{prefix}.`; the gate starts at zero.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w_txt: store.register(format!("{prefix}.w_txt"), crate::nn::xavier(rng, dim, dim))?,
            det_attn: AttentionBlock::new(store, &format!("{prefix}.det_attn"), dim, heads, rng)?,
            text_attn: AttentionBlock::new(store, &format!("{prefix}.text_attn"), dim, heads, rng)?,
            w_bg: store.register(format!("{prefix}.w_bg"), Tensor::zeros(dim, 2 * dim))?,
            c_bg: store.register(format!("{prefix}.c_bg"), Tensor::zeros(1, 2 * dim))?,
            dim,
        })
    }

    /// Zeroes `W_bg` and `c_bg`, turning the modulation into the identity.
    pub fn disable_gate(&self, store: &mut ParamStore) {
        store.get_mut(self.w_bg).fill(0.0);
        store.get_mut(self.c_bg).fill(0.0);
    }
}

/// `F_txt = H_cap · W_txt`.
pub fn project_text(g: &mut Graph, h_cap: Var, w_txt: Var) -> Result<Var> {
    g.matmul(h_cap, w_txt)
}

/// `LN(Q + MHA(Q, F, F))`; an empty `F` contributes zero attention.
pub fn cross_attend(g: &mut Graph, block: &AttentionBlock, q: Var, f: Var) -> Result<Var> {
    block.forward(g, q, f, false)
}

/// `Q2 ⊙ (1 + tanh(g_raw)) + b` with `[b, g_raw] = Q2 · W_bg + c_bg`.
pub fn gated_modulate(g: &mut Graph, q2: Var, w_bg: Var, c_bg: Var) -> Result<Var> {
    let d = g.value(q2).cols();
    if g.value(w_bg).shape() != (d, 2 * d) || g.value(c_bg).shape() != (1, 2 * d) {
        return Err(Error::ShapeMismatch {
            op: "gated_modulate",
            left: g.value(q2).shape(),
            right: g.value(w_bg).shape(),
        });
    }
    let bg = g.matmul(q2, w_bg)?;
    let bg = g.add_row(bg, c_bg)?;
    let b = g.slice_cols(bg, 0, d)?;
    let g_raw = g.slice_cols(bg, d, d)?;
    let gate = g.tanh(g_raw)?;
    let factor = g.add_scalar(gate, 1.0)?;
    let scaled = g.mul(q2, factor)?;
    g.add(scaled, b)
}

/// The full fusion pipeline; returns `Q'''`, `[N_d × d]`.
pub fn fuse(g: &mut Graph, p: &FusionParams, queries: Var, h_det: Var, h_cap: Var) -> Result<Var> {
    let w_txt = g.param(p.w_txt);
    let f_txt = project_text(g, h_cap, w_txt)?;
    let q1 = cross_attend(g, &p.det_attn, queries, h_det)?;
    let q2 = cross_attend(g, &p.text_attn, q1, f_txt)?;
    let (w_bg, c_bg) = (g.param(p.w_bg), g.param(p.c_bg));
    gated_modulate(g, q2, w_bg, c_bg)
}

/// Runs [`fuse`] on plain inputs and returns the value.
pub fn fuse_values(store: &ParamStore, p: &FusionParams, inputs: &FusionInputs) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let q = g.constant(inputs.queries.clone())?;
    let h = g.constant(inputs.det_feature.clone())?;
    let c = g.constant(inputs.caption_tokens.clone())?;
    let out = fuse(&mut g, p, q, h, c)?;
    Ok(g.value(out).clone())
}
