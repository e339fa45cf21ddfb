//! Binary checkpoints: model shape, vocabulary, parameters and optimizer
//! state, all little-endian, values stored as `f32`.
//!
//! ```text
//! magic "PCAPCKPT", u32 version
//! 9 × u32 model config
//! u32 n, n × (u32 len, utf8) vocabulary
//! u32 n, n × (u32 len, name, u32 rows, u32 cols, rows·cols × f32)
//! u64 step, u8 completed-stage bits
//! n × (u64 adam t, f32 m…, f32 v…)
//! 2 × ([u8; 32] seed, u64 stream, u128 word position)
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::ParamStore;
use crate::captioner::Vocab;
use crate::model::{FigModel, ModelConfig};
use crate::training::{AdamState, TrainState};
use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"PCAPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub state: TrainState,
}

impl Checkpoint {
    /// Rebuilds the model structure and checks the stored parameters match it.
    pub fn model(&self) -> Result<FigModel> {
        let (model, fresh) = FigModel::new(self.config, self.vocab.clone(), 0)?;
        if fresh.len() != self.state.store.len() {
            return Err(Error::Checkpoint(alloc::format!(
                "{} parameters stored, model has {}",
                self.state.store.len(),
                fresh.len()
            )));
        }
        for ((_, a), (_, b)) in fresh.iter().zip(self.state.store.iter()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Checkpoint(alloc::format!("parameter `{}` does not match the model", b.name)));
            }
        }
        Ok(model)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint("value exceeds u32".into()))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn put_rng(out: &mut Vec<u8>, r: &ChaCha8Rng) {
    out.extend_from_slice(&r.get_seed());
    out.extend_from_slice(&r.get_stream().to_le_bytes());
    out.extend_from_slice(&r.get_word_pos().to_le_bytes());
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let c = &ckpt.config;
    for v in [c.image_size, c.patch, c.dim, c.heads, c.caption_layers, c.det_layers, c.queries, c.max_len, c.vision_layers] {
        put_u32(&mut out, v)?;
    }
    put_u32(&mut out, ckpt.vocab.len())?;
    for t in ckpt.vocab.tokens() {
        put_str(&mut out, t)?;
    }
    let st = &ckpt.state;
    put_u32(&mut out, st.store.len())?;
    for (_, p) in st.store.iter() {
        put_str(&mut out, &p.name)?;
        put_u32(&mut out, p.tensor.rows())?;
        put_u32(&mut out, p.tensor.cols())?;
        put_f32s(&mut out, &p.tensor);
    }
    out.extend_from_slice(&st.step.to_le_bytes());
    let bits = st.completed.iter().enumerate().fold(0u8, |b, (i, &c)| b | ((c as u8) << i));
    out.push(bits);
    for i in 0..st.store.len() {
        out.extend_from_slice(&st.adam.t[i].to_le_bytes());
        put_f32s(&mut out, &st.adam.m[i]);
        put_f32s(&mut out, &st.adam.v[i]);
    }
    put_rng(&mut out, &st.data_rng);
    put_rng(&mut out, &st.sample_rng);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        core::str::from_utf8(self.take(n)?)
            .map(String::from)
            .map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    fn rng(&mut self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.array()?;
        let stream = self.u64()?;
        let pos = u128::from_le_bytes(self.array()?);
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(stream);
        r.set_word_pos(pos);
        Ok(r)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::Checkpoint(alloc::format!("unsupported version {version}")));
    }
    let mut c = [0usize; 9];
    for v in &mut c {
        *v = r.u32()?;
    }
    let config = ModelConfig {
        image_size: c[0],
        patch: c[1],
        dim: c[2],
        heads: c[3],
        caption_layers: c[4],
        det_layers: c[5],
        queries: c[6],
        max_len: c[7],
        vision_layers: c[8],
    };
    let nv = r.u32()?;
    let tokens = (0..nv).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::from_tokens(tokens)?;
    let np = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..np {
        let name = r.string()?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let t = r.tensor(rows, cols)?;
        store.register(name, t)?;
    }
    let step = r.u64()?;
    let bits = r.take(1)?[0];
    let mut completed = [false; 4];
    for (i, c) in completed.iter_mut().enumerate() {
        *c = bits & (1 << i) != 0;
    }
    let mut adam = AdamState::new(&store);
    for (i, (_, p)) in store.iter().enumerate() {
        adam.t[i] = r.u64()?;
        adam.m[i] = r.tensor(p.tensor.rows(), p.tensor.cols())?;
        adam.v[i] = r.tensor(p.tensor.rows(), p.tensor.cols())?;
    }
    let data_rng = r.rng()?;
    let sample_rng = r.rng()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config,
        vocab,
        state: TrainState {
            store,
            adam,
            step,
            data_rng,
            sample_rng,
            completed,
        },
    })
}
