//! Transformer building blocks over the tape. Each block owns the ids of its
//! parameters; construction registers them in a fixed order under a name
//! prefix so checkpoints are stable.

use crate::error::Result;
use crate::numerics::{init, AttnSpan, Graph, ParamId, ParamStore, Rng, Segment, Tensor, Var};

const LN_EPS: f32 = 1e-5;

/// Inverted dropout. Inactive when no rng is supplied or `p == 0`.
pub struct Dropout<'r> {
    p: f32,
    rng: Option<&'r mut Rng>,
}

impl<'r> Dropout<'r> {
    pub fn train(p: f32, rng: &'r mut Rng) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    pub fn eval() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.p);
        let mask = (0..g.value(x).numel())
            .map(|_| if rng.uniform() < self.p { 0.0 } else { keep })
            .collect();
        g.mask_mul(x, mask)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let w = store.add(format!("{name}/w"), init::xavier(fan_in, fan_out, rng))?;
        let b = store.add(format!("{name}/b"), Tensor::zeros(&[1, fan_out]))?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}/gamma"), Tensor::full(&[1, d], 1.0))?;
        let beta = store.add(format!("{name}/beta"), Tensor::zeros(&[1, d]))?;
        Ok(Norm { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}/q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}/k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}/v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}/o"), d, d, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, spans: &[AttnSpan], causal: bool) -> Result<Var> {
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let a = g.attention(q, k, v, self.heads, spans, causal)?;
        self.o.forward(g, a)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ffn: usize, rng: &mut Rng) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}/up"), d, d_ffn, rng)?,
            down: Linear::new(store, &format!("{name}/down"), d_ffn, d, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h)?;
        let h = drop.apply(g, h)?;
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, d_ffn: usize, rng: &mut Rng) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: Norm::new(store, &format!("{name}/ln1"), d)?,
            attn: Attention::new(store, &format!("{name}/attn"), d, heads, rng)?,
            ln2: Norm::new(store, &format!("{name}/ln2"), d)?,
            ffn: FeedForward::new(store, &format!("{name}/ffn"), d, d_ffn, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, spans: &[AttnSpan], drop: &mut Dropout) -> Result<Var> {
        let n = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, n, n, spans, false)?;
        let a = drop.apply(g, a)?;
        let x = g.add(x, a)?;
        let n = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, n, drop)?;
        let f = drop.apply(g, f)?;
        g.add(x, f)
    }
}

/// Pre-norm block with causal self-attention and cross-attention.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross: Attention,
    ln3: Norm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, d_ffn: usize, rng: &mut Rng) -> Result<Self> {
        Ok(DecoderLayer {
            ln1: Norm::new(store, &format!("{name}/ln1"), d)?,
            self_attn: Attention::new(store, &format!("{name}/self"), d, heads, rng)?,
            ln2: Norm::new(store, &format!("{name}/ln2"), d)?,
            cross: Attention::new(store, &format!("{name}/cross"), d, heads, rng)?,
            ln3: Norm::new(store, &format!("{name}/ln3"), d)?,
            ffn: FeedForward::new(store, &format!("{name}/ffn"), d, d_ffn, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        y: Var,
        memory: Var,
        self_spans: &[AttnSpan],
        cross_spans: &[AttnSpan],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let n = self.ln1.forward(g, y)?;
        let a = self.self_attn.forward(g, n, n, self_spans, true)?;
        let a = drop.apply(g, a)?;
        let y = g.add(y, a)?;
        let n = self.ln2.forward(g, y)?;
        let c = self.cross.forward(g, n, memory, cross_spans, false)?;
        let c = drop.apply(g, c)?;
        let y = g.add(y, c)?;
        let n = self.ln3.forward(g, y)?;
        let f = self.ffn.forward(g, n, drop)?;
        let f = drop.apply(g, f)?;
        g.add(y, f)
    }
}

/// A stack of encoder layers with a final norm.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    layers: Vec<EncoderLayer>,
    final_ln: Norm,
}

impl EncoderStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        d: usize,
        heads: usize,
        d_ffn: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}/{i}"), d, heads, d_ffn, rng))
            .collect::<Result<_>>()?;
        let final_ln = Norm::new(store, &format!("{name}/ln"), d)?;
        Ok(EncoderStack { layers, final_ln })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, segs: &[Segment], drop: &mut Dropout) -> Result<Var> {
        let spans = self_spans(segs);
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h, &spans, drop)?;
        }
        self.final_ln.forward(g, h)
    }
}

pub fn self_spans(segs: &[Segment]) -> Vec<AttnSpan> {
    segs.iter()
        .map(|s| AttnSpan {
            q_start: s.start,
            q_len: s.len,
            k_start: s.start,
            k_len: s.len,
        })
        .collect()
}

/// Sinusoidal encodings for positions restarting at 0 in every segment.
pub fn positional_encoding(segs: &[Segment], d: usize) -> Tensor {
    let rows: usize = segs.iter().map(|s| s.len).sum();
    let mut t = Tensor::zeros(&[rows, d]);
    let mut r = 0;
    for s in segs {
        for pos in 0..s.len {
            let row = t.row_slice_mut(r);
            for i in 0..d / 2 {
                let freq = (10000f64).powf(-(2.0 * i as f64) / d as f64);
                let angle = pos as f64 * freq;
                row[2 * i] = angle.sin() as f32;
                row[2 * i + 1] = angle.cos() as f32;
            }
            r += 1;
        }
    }
    t
}

/// Token embeddings scaled by √d, optionally plus position encodings.
pub fn embed_tokens(
    g: &mut Graph,
    table: ParamId,
    ids: &[usize],
    segs: &[Segment],
    positional: bool,
) -> Result<Var> {
    let tv = g.param(table);
    let d = g.shape(tv)[1];
    let e = g.embedding(tv, ids)?;
    let e = g.scale(e, (d as f32).sqrt())?;
    if !positional {
        return Ok(e);
    }
    let pe = g.constant(positional_encoding(segs, d))?;
    g.add(e, pe)
}

/// Consecutive segments for sequences of the given lengths.
pub fn segments(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|len| {
            let s = Segment { start, len };
            start += len;
            s
        })
        .collect()
}
