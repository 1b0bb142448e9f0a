use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add_xavier(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[d]).expect("gain shape")),
            bias: store.add_zeros(format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Pointwise projection of values plus observation indicators,
/// `[B, T, 2l] -> [B, T, d]`.
#[derive(Debug, Clone)]
pub struct TokenEmbedding {
    pub proj: Linear,
    pub n_vars: usize,
}

impl TokenEmbedding {
    pub fn new(store: &mut ParamStore, n_vars: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        Self { proj: Linear::new(store, "token", 2 * n_vars, d_model, rng), n_vars }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != 2 * self.n_vars {
            return Err(Error::ShapeMismatch(format!("token input {s:?} for {} variables", self.n_vars)));
        }
        self.proj.forward(tape, store, x)
    }
}

/// Values with nulls zero-filled followed by indicator channels, row-major
/// `[rows, 2l]` for `rows` observations of `l` variables.
pub fn token_input(values: &[f64], mask: &[bool], n_vars: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * 2);
    for (v, m) in values.chunks(n_vars).zip(mask.chunks(n_vars)) {
        out.extend(v.iter().zip(m).map(|(&x, &o)| if o { x } else { 0.0 }));
        out.extend(m.iter().map(|&o| if o { 1.0 } else { 0.0 }));
    }
    out
}

/// Additive causal mask `[T, T]`: zero on and below the diagonal, `-inf` above.
pub fn causal_mask(t: usize) -> Tensor {
    let data = (0..t * t).map(|k| if k % t > k / t { f64::NEG_INFINITY } else { 0.0 }).collect();
    Tensor::from_vec(&[t, t], data).expect("mask shape")
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::InvalidConfig(format!("{n_heads} heads do not divide d_model {d_model}")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng),
            n_heads,
            d_model,
        })
    }

    /// `[B, T, d] -> [B*H, T, d/H]`
    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (b, t) = (tape.shape(x)[0], tape.shape(x)[1]);
        let dh = self.d_model / self.n_heads;
        let x = tape.reshape(x, &[b, t, self.n_heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * self.n_heads, t, dh])
    }

    /// Attention weights `[B*H, Tq, Tk]` and output `[B, Tq, d]`.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Var)> {
        let (qs, ms) = (tape.shape(queries).to_vec(), tape.shape(memory).to_vec());
        if qs.len() != 3 || ms.len() != 3 || qs[0] != ms[0] || qs[2] != self.d_model || ms[2] != self.d_model {
            return Err(Error::ShapeMismatch(format!("attention over {qs:?} and {ms:?}")));
        }
        if qs[1] == 0 || ms[1] == 0 {
            return Err(Error::ShapeMismatch("attention needs nonempty sequences".into()));
        }
        let (b, tq, tk) = (qs[0], qs[1], ms[1]);
        let dh = self.d_model / self.n_heads;
        let q = self.q.forward(tape, store, queries)?;
        let k = self.k.forward(tape, store, memory)?;
        let v = self.v.forward(tape, store, memory)?;
        let q = self.split_heads(tape, q)?;
        let k = self.split_heads(tape, k)?;
        let v = self.split_heads(tape, v)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            if m.shape() != [tq, tk] {
                return Err(Error::ShapeMismatch(format!("mask {:?} for {tq}x{tk} scores", m.shape())));
            }
            let full: Vec<f64> = std::iter::repeat(m.data()).take(b * self.n_heads).flatten().copied().collect();
            let mv = tape.constant(Tensor::from_vec(&[b * self.n_heads, tq, tk], full)?);
            scores = tape.add(scores, mv)?;
        }
        let weights = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.reshape(ctx, &[b, self.n_heads, tq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, tq, self.d_model])?;
        Ok((weights, self.out.forward(tape, store, ctx)?))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: Var, memory: Var, mask: Option<&Tensor>) -> Result<Var> {
        Ok(self.forward_with_weights(tape, store, queries, memory, mask)?.1)
    }
}

pub fn self_attention(tape: &mut Tape, store: &ParamStore, attn: &MultiHeadAttention, x: Var, causal: bool) -> Result<Var> {
    let mask = causal.then(|| causal_mask(tape.shape(x)[1]));
    attn.forward(tape, store, x, x, mask.as_ref())
}

pub fn cross_attention(tape: &mut Tape, store: &ParamStore, attn: &MultiHeadAttention, queries: Var, memory: Var) -> Result<Var> {
    attn.forward(tape, store, queries, memory, None)
}

/// Pointwise `d -> width -> d` network with relu.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), d_model, width, rng),
            l2: Linear::new(store, &format!("{name}.l2"), width, d_model, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, store, h)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub norm3: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, width, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        })
    }
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, width, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
        })
    }
}

/// Post-norm residual sublayer: `norm(x + dropout(sub))`.
fn residual(tape: &mut Tape, store: &ParamStore, norm: &LayerNorm, x: Var, sub: Var, dropout: f64) -> Result<Var> {
    let sub = tape.dropout(sub, dropout)?;
    let s = tape.add(x, sub)?;
    norm.forward(tape, store, s)
}

pub fn encoder_forward(tape: &mut Tape, store: &ParamStore, layers: &[EncoderLayer], x0: Var, dropout: f64) -> Result<Var> {
    let mut x = x0;
    for layer in layers {
        let a = self_attention(tape, store, &layer.attn, x, false)?;
        x = residual(tape, store, &layer.norm1, x, a, dropout)?;
        let f = layer.ff.forward(tape, store, x)?;
        x = residual(tape, store, &layer.norm2, x, f, dropout)?;
    }
    Ok(x)
}

pub fn decoder_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layers: &[DecoderLayer],
    x0: Var,
    memory: Var,
    dropout: f64,
) -> Result<Var> {
    let mut x = x0;
    for layer in layers {
        let a = self_attention(tape, store, &layer.self_attn, x, true)?;
        x = residual(tape, store, &layer.norm1, x, a, dropout)?;
        let c = cross_attention(tape, store, &layer.cross_attn, x, memory)?;
        x = residual(tape, store, &layer.norm2, x, c, dropout)?;
        let f = layer.ff.forward(tape, store, x)?;
        x = residual(tape, store, &layer.norm3, x, f, dropout)?;
    }
    Ok(x)
}
