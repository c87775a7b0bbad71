use super::beam::{beam_search, DecodeParams, StepScorer};
use super::layers::Dropout;
use super::seq2seq::{source_ids, DialogModel, Seq2Seq};
use crate::corpus::{Vocabulary, BOS};
use crate::error::Result;
use crate::numerics::{Graph, OpKind, Segment, Var};

/// Scores prefixes with the dialog network only. It never touches the KI
/// head, so KI-trained and plain models run the same ops at inference.
struct NetScorer<'n, 'g, 'p> {
    net: &'n Seq2Seq,
    g: &'g mut Graph<'p>,
    memory: Var,
    mem_seg: Segment,
}

impl StepScorer for NetScorer<'_, '_, '_> {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
        let inputs: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let mem_of = vec![self.mem_seg; refs.len()];
        let (h, segs) = self.net.decode(self.g, self.memory, &mem_of, &refs, &mut Dropout::eval())?;
        let last: Vec<usize> = segs.iter().map(|s| s.start + s.len - 1).collect();
        let h_last = self.g.gather_rows(h, &last)?;
        let logits = self.net.logits(self.g, h_last)?;
        let lp = self.g.log_softmax(logits)?;
        let t = self.g.value(lp);
        Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
    }
}

impl DialogModel {
    fn run_generate(&self, g: &mut Graph<'_>, src: &[usize], params: &DecodeParams) -> Result<Vec<usize>> {
        let (memory, segs) = self.net().encode(g, &[src], &mut Dropout::eval())?;
        let mut p = params.clone();
        p.max_len = p.max_len.min(self.config.max_len);
        let mut scorer = NetScorer {
            net: self.net(),
            g,
            memory,
            mem_seg: segs[0],
        };
        beam_search(&mut scorer, &p)
    }

    /// Beam-search response ids (no bos/eos) for source ids `src`.
    pub fn generate(&self, src: &[usize], params: &DecodeParams) -> Result<Vec<usize>> {
        self.encode_check(src)?;
        let mut g = Graph::new(&self.store);
        self.run_generate(&mut g, src, params)
    }

    /// As [`generate`](Self::generate), also returning the executed op trace.
    pub fn generate_traced(&self, src: &[usize], params: &DecodeParams) -> Result<(Vec<usize>, Vec<OpKind>)> {
        self.encode_check(src)?;
        let mut g = Graph::traced(&self.store);
        let out = self.run_generate(&mut g, src, params)?;
        Ok((out, g.take_trace().unwrap_or_default()))
    }

    /// Generate a response string for a context and utterance.
    pub fn respond(&self, context: &[String], utterance: &str, vocab: &Vocabulary, params: &DecodeParams) -> Result<String> {
        let (src, _) = source_ids(context, utterance, vocab, self.config.max_len)?;
        let ids = self.generate(&src, params)?;
        Ok(vocab.decode_text(&ids))
    }

    fn encode_check(&self, src: &[usize]) -> Result<()> {
        if src.len() > self.config.max_len {
            return Err(crate::Error::TooLong {
                len: src.len(),
                max: self.config.max_len,
            });
        }
        if src.is_empty() {
            return Err(crate::Error::DegenerateInput("empty source".into()));
        }
        Ok(())
    }
}
