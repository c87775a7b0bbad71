use super::config::ModelConfig;
use super::layers::{embed_tokens, segments, self_spans, DecoderLayer, Dropout, EncoderStack, Norm};
use crate::corpus::{tokenize, DialogExample, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::ki::{KiConfig, KiHead};
use crate::numerics::{init, AttnSpan, Graph, ParamId, ParamStore, Rng, Segment, Tensor, Var};

/// Encoder-decoder transformer with the output projection tied to the
/// token embedding table.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    embed: ParamId,
    encoder: EncoderStack,
    decoder: Vec<DecoderLayer>,
    dec_ln: Norm,
}

impl Seq2Seq {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = store.add("embed", init::normal(&[cfg.vocab_size, d], (d as f32).powf(-0.5), rng))?;
        let encoder = EncoderStack::new(store, "enc", cfg.n_layers, d, cfg.n_heads, cfg.d_ffn, rng)?;
        let decoder = (0..cfg.n_layers)
            .map(|i| DecoderLayer::new(store, &format!("dec/{i}"), d, cfg.n_heads, cfg.d_ffn, rng))
            .collect::<Result<_>>()?;
        let dec_ln = Norm::new(store, "dec/ln", d)?;
        Ok(Seq2Seq {
            embed,
            encoder,
            decoder,
            dec_ln,
        })
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    /// Encoder rows for a packed batch of sources.
    pub fn encode(&self, g: &mut Graph, srcs: &[&[usize]], drop: &mut Dropout) -> Result<(Var, Vec<Segment>)> {
        let segs = segments(srcs.iter().map(|s| s.len()));
        let ids: Vec<usize> = srcs.iter().flat_map(|s| s.iter().copied()).collect();
        let x = embed_tokens(g, self.embed, &ids, &segs, true)?;
        let x = drop.apply(g, x)?;
        let h = self.encoder.forward(g, x, &segs, drop)?;
        Ok((h, segs))
    }

    /// Final decoder rows for packed decoder inputs; `memory_of[i]` is the
    /// encoder segment that input `i` attends to.
    pub fn decode(
        &self,
        g: &mut Graph,
        memory: Var,
        memory_of: &[Segment],
        inputs: &[&[usize]],
        drop: &mut Dropout,
    ) -> Result<(Var, Vec<Segment>)> {
        let segs = segments(inputs.iter().map(|s| s.len()));
        let ids: Vec<usize> = inputs.iter().flat_map(|s| s.iter().copied()).collect();
        let spans = self_spans(&segs);
        let cross: Vec<AttnSpan> = segs
            .iter()
            .zip(memory_of)
            .map(|(s, m)| AttnSpan {
                q_start: s.start,
                q_len: s.len,
                k_start: m.start,
                k_len: m.len,
            })
            .collect();
        let y = embed_tokens(g, self.embed, &ids, &segs, true)?;
        let mut y = drop.apply(g, y)?;
        for layer in &self.decoder {
            y = layer.forward(g, y, memory, &spans, &cross, drop)?;
        }
        Ok((self.dec_ln.forward(g, y)?, segs))
    }

    pub fn logits(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let e = g.param(self.embed);
        g.matmul_t(h, e)
    }
}

/// One training pair in id space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prepared {
    /// Context turns (each closed by eos) followed by the utterance.
    pub src: Vec<usize>,
    /// Row of the first utterance token inside `src`.
    pub utt_offset: usize,
    pub utt_len: usize,
    /// `bos y1 .. yn`
    pub dec_in: Vec<usize>,
    /// `y1 .. yn eos`
    pub target: Vec<usize>,
}

impl Prepared {
    pub fn num_tokens(&self) -> usize {
        self.src.len() + self.target.len()
    }
}

/// Source ids: the most recent context tokens that fit, each turn closed by
/// eos, followed by the full utterance.
pub fn source_ids(context: &[String], utterance: &str, vocab: &Vocabulary, max_len: usize) -> Result<(Vec<usize>, usize)> {
    let utt = vocab.encode(&tokenize(utterance));
    if utt.is_empty() {
        return Err(Error::DegenerateInput("utterance has no tokens".into()));
    }
    if utt.len() > max_len {
        return Err(Error::TooLong {
            len: utt.len(),
            max: max_len,
        });
    }
    let mut ctx = Vec::new();
    for turn in context {
        ctx.extend(vocab.encode(&tokenize(turn)));
        ctx.push(EOS);
    }
    let room = max_len - utt.len();
    let ctx = if ctx.len() > room { ctx[ctx.len() - room..].to_vec() } else { ctx };
    let offset = ctx.len();
    let mut src = ctx;
    src.extend(utt);
    Ok((src, offset))
}

pub fn prepare(ex: &DialogExample, vocab: &Vocabulary, max_len: usize) -> Result<Prepared> {
    let (src, utt_offset) = source_ids(&ex.context, &ex.utterance, vocab, max_len)?;
    let mut resp = vocab.encode(&tokenize(&ex.response));
    resp.truncate(max_len - 1);
    let mut dec_in = vec![BOS];
    dec_in.extend(&resp);
    let mut target = resp;
    target.push(EOS);
    Ok(Prepared {
        utt_len: src.len() - utt_offset,
        src,
        utt_offset,
        dec_in,
        target,
    })
}

/// Teacher-forced forward pass over a packed batch.
pub struct BatchForward {
    pub memory: Var,
    pub src_segs: Vec<Segment>,
    /// Mean NLL per target token.
    pub nll: Var,
    pub nll_sum: f64,
    pub n_tokens: usize,
}

/// A dialog model, optionally carrying a KI head in the same parameter store.
#[derive(Debug, Clone)]
pub struct DialogModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    net: Seq2Seq,
    ki: Option<KiHead>,
    /// Fingerprint of the vocabulary the model was trained with.
    pub vocab_fingerprint: Option<String>,
}

impl DialogModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed).fork("init");
        let net = Seq2Seq::register(&mut store, &config, &mut rng)?;
        Ok(DialogModel {
            config,
            store,
            net,
            ki: None,
            vocab_fingerprint: None,
        })
    }

    /// Same dialog parameters as `new(config, seed)`, plus a KI head drawn
    /// from its own stream.
    pub fn with_ki(config: ModelConfig, ki: KiConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        let mut rng = Rng::new(seed).fork("ki-init");
        let head = KiHead::register(&mut m.store, &m.config, m.net.embed, ki, &mut rng)?;
        m.ki = Some(head);
        Ok(m)
    }

    pub fn net(&self) -> &Seq2Seq {
        &self.net
    }

    pub fn ki(&self) -> Option<&KiHead> {
        self.ki.as_ref()
    }

    pub fn embedding_table(&self) -> &Tensor {
        self.store.get(self.net.embed)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::DegenerateInput("empty sequence".into()));
        }
        if len > self.config.max_len {
            return Err(Error::TooLong {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Contextual encoder rows H(X), one per source token.
    pub fn encode(&self, src: &[usize]) -> Result<Tensor> {
        self.check_len(src.len())?;
        let mut g = Graph::new(&self.store);
        let (h, _) = self.net.encode(&mut g, &[src], &mut Dropout::eval())?;
        Ok(g.value(h).clone())
    }

    /// Decoder logits for teacher-forced `dec_in` given `src`.
    pub fn logits(&self, src: &[usize], dec_in: &[usize]) -> Result<Tensor> {
        self.check_len(src.len())?;
        self.check_len(dec_in.len())?;
        let mut g = Graph::new(&self.store);
        let mut drop = Dropout::eval();
        let (mem, segs) = self.net.encode(&mut g, &[src], &mut drop)?;
        let (h, _) = self.net.decode(&mut g, mem, &segs, &[dec_in], &mut drop)?;
        let l = self.net.logits(&mut g, h)?;
        Ok(g.value(l).clone())
    }

    /// Mean NLL of `y` (bos-prefixed, eos-suffixed) given `src`.
    pub fn nll_loss(&self, src: &[usize], y: &[usize]) -> Result<f32> {
        if y.len() < 2 || y[0] != BOS || y[y.len() - 1] != EOS {
            return Err(Error::DegenerateInput("target must be bos ... eos".into()));
        }
        let p = Prepared {
            src: src.to_vec(),
            utt_offset: 0,
            utt_len: src.len(),
            dec_in: y[..y.len() - 1].to_vec(),
            target: y[1..].to_vec(),
        };
        let mut g = Graph::new(&self.store);
        let f = self.forward_batch(&mut g, &[&p], &mut Dropout::eval())?;
        Ok(g.value(f.nll).item())
    }

    pub fn forward_batch(&self, g: &mut Graph, batch: &[&Prepared], drop: &mut Dropout) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for p in batch {
            self.check_len(p.src.len())?;
            self.check_len(p.dec_in.len())?;
        }
        let srcs: Vec<&[usize]> = batch.iter().map(|p| p.src.as_slice()).collect();
        let (memory, src_segs) = self.net.encode(g, &srcs, drop)?;
        let ins: Vec<&[usize]> = batch.iter().map(|p| p.dec_in.as_slice()).collect();
        let (h, _) = self.net.decode(g, memory, &src_segs, &ins, drop)?;
        let logits = self.net.logits(g, h)?;
        let lp = g.log_softmax(logits)?;
        let targets: Vec<usize> = batch.iter().flat_map(|p| p.target.iter().copied()).collect();
        let picked = g.pick_cols(lp, &targets)?;
        let total = g.sum(picked)?;
        let n = targets.len();
        let nll = g.scale(total, -1.0 / n as f32)?;
        let nll_sum = -(g.value(total).item() as f64);
        Ok(BatchForward {
            memory,
            src_segs,
            nll,
            nll_sum,
            n_tokens: n,
        })
    }

    /// Summed NLL and token count over prepared pairs, in inference mode.
    pub fn nll_totals(&self, data: &[Prepared], token_budget: usize) -> Result<(f64, usize)> {
        let mut sum = 0.0;
        let mut count = 0;
        for batch in super::train::pack_batches(data, token_budget) {
            let refs: Vec<&Prepared> = batch.iter().map(|&i| &data[i]).collect();
            let mut g = Graph::new(&self.store);
            let f = self.forward_batch(&mut g, &refs, &mut Dropout::eval())?;
            sum += f.nll_sum;
            count += f.n_tokens;
        }
        Ok((sum, count))
    }

    /// exp(total response NLL / total response tokens); eos counts as a token.
    pub fn perplexity(&self, examples: &[DialogExample], vocab: &Vocabulary) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let data = examples
            .iter()
            .map(|e| prepare(e, vocab, self.config.max_len))
            .collect::<Result<Vec<_>>>()?;
        let (sum, count) = self.nll_totals(&data, 512)?;
        Ok((sum / count as f64).exp())
    }

    pub(crate) fn set_ki(&mut self, head: Option<KiHead>) {
        self.ki = head;
    }
}
