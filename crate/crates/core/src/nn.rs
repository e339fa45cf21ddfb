//! Building blocks shared by the captioner, the fusion module and the detector.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::{Error, Result, Tensor};

pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("sized buffer")
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            std * libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), xavier(rng, fan_in, fan_out))?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(1, fan_out))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Weight and bias start at exactly zero.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), Tensor::zeros(fan_in, fan_out))?;
        let bias = Some(store.register(format!("{name}.bias"), Tensor::zeros(1, fan_out))?);
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(1, dim, 1.0))?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(1, dim))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }
}

/// Multi-head scaled dot-product attention with full-width projections whose
/// columns are split evenly across heads.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "head count {heads} must divide model width {dim}"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            dim,
            heads,
        })
    }

    /// Attention output before the residual connection, `[N_q × d]`.
    ///
    /// With zero keys the result is the zero matrix (no output projection or
    /// bias is applied), so an empty context leaves the residual stream alone.
    pub fn attend(&self, g: &mut Graph, queries: Var, keys: Var, causal: bool) -> Result<Var> {
        let (nq, qd) = g.value(queries).shape();
        let (nk, kd) = g.value(keys).shape();
        if qd != self.dim || kd != self.dim {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: (nq, qd),
                right: (nk, kd),
            });
        }
        let (k, v) = self.project_keys(g, keys)?;
        self.attend_projected(g, queries, k, v, causal)
    }

    /// Key and value projections of a context, for reuse across queries.
    pub fn project_keys(&self, g: &mut Graph, keys: Var) -> Result<(Var, Var)> {
        if g.value(keys).rows() == 0 {
            return Ok((keys, keys));
        }
        Ok((self.key.forward(g, keys)?, self.value.forward(g, keys)?))
    }

    /// [`Self::attend`] given already projected keys and values.
    pub fn attend_projected(&self, g: &mut Graph, queries: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let nq = g.value(queries).rows();
        let nk = g.value(k).rows();
        if nk == 0 {
            return g.constant(Tensor::zeros(nq, self.dim));
        }
        let q = self.query.forward(g, queries)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * hd, hd)?,
                    g.slice_cols(k, h * hd, hd)?,
                    g.slice_cols(v, h * hd, hd)?,
                )
            };
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let weights = if causal {
                // Queries are the trailing `nq` positions of the key sequence.
                g.causal_softmax(scores, nk - nq)?
            } else {
                g.softmax(scores)?
            };
            outs.push(g.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.output.forward(g, merged)
    }
}

/// Attention followed by residual add and layer norm (post-norm).
#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, causal: bool) -> Result<Var> {
        let a = self.attn.attend(g, queries, keys, causal)?;
        let r = g.add(queries, a)?;
        self.norm.forward(g, r)
    }

    pub fn forward_projected(&self, g: &mut Graph, queries: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let a = self.attn.attend_projected(g, queries, k, v, causal)?;
        let r = g.add(queries, a)?;
        self.norm.forward(g, r)
    }
}

/// Two-layer ReLU MLP with residual add and layer norm.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub norm: LayerNorm,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.down.forward(g, h)?;
        let r = g.add(x, h)?;
        self.norm.forward(g, r)
    }
}
