use serde::{Deserialize, Serialize};

use super::text::{Segment, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, LayerNorm, Linear, TransformerBlock};
use crate::numcore::{named_rng, Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub width: usize,
    pub blocks: usize,
    pub context: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            width: 128,
            blocks: 2,
            context: 128,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LmOutput {
    /// `[n, vocab]`
    pub logits: Var,
    /// Last-layer hidden states `[n, width]`.
    pub hidden: Var,
}

/// Small causal transformer language model.
#[derive(Clone, Debug)]
pub struct TinyLm {
    pub cfg: LmConfig,
    pub vocab_size: usize,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl TinyLm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, seed: u64, cfg: &LmConfig, vocab_size: usize) -> Result<Self> {
        if cfg.width == 0 || cfg.context == 0 || vocab_size == 0 {
            return Err(Error::Config("language model dims must be positive".into()));
        }
        let d = cfg.width;
        let tok = store.add_init(
            "lm.tok",
            &[vocab_size, d],
            Init::Normal { std: 0.1 },
            &mut named_rng(seed, "lm.tok"),
        )?;
        let pos = store.add_init(
            "lm.pos",
            &[cfg.context, d],
            Init::Normal { std: 0.02 },
            &mut named_rng(seed, "lm.pos"),
        )?;
        let blocks = (0..cfg.blocks)
            .map(|i| TransformerBlock::new(store, seed, &format!("lm.block{i}"), d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            tok,
            pos,
            blocks,
            norm: LayerNorm::new(store, seed, "lm.norm", d)?,
            head: Linear::new(store, seed, "lm.head", d, vocab_size, true)?,
        })
    }

    /// Runs the sequence with `visual` (`[num_visual, width]`) spliced in at
    /// the placeholder span.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParamStore<R>,
        seq: &TokenSequence,
        visual: Option<Var>,
    ) -> Result<LmOutput> {
        let n = seq.len();
        if n == 0 {
            return Err(Error::EmptyText);
        }
        if n > self.cfg.context {
            return Err(Error::Capacity {
                len: n,
                limit: self.cfg.context,
            });
        }
        if let Some(&bad) = seq.ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::shape(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let nv = seq.num_visual();
        if seq.tags[nv..].contains(&Segment::Visual) {
            return Err(Error::contract("visual tokens must form one leading span"));
        }
        let table = g.param(s, self.tok);
        let mut pieces = Vec::new();
        if nv > 0 {
            let v = visual.ok_or_else(|| Error::contract("sequence has a visual span but no visual tokens"))?;
            if g.shape(v) != [nv, self.cfg.width] {
                return Err(Error::shape(format!(
                    "visual tokens {:?} do not fill a span of {nv} x {}",
                    g.shape(v),
                    self.cfg.width
                )));
            }
            pieces.push(v);
        }
        if nv < n {
            pieces.push(g.embedding(table, &seq.ids[nv..])?);
        }
        let x = if pieces.len() == 1 {
            pieces[0]
        } else {
            g.concat(&pieces, 0)?
        };
        let pos_table = g.param(s, self.pos);
        let idx: Vec<usize> = (0..n).collect();
        let pos = g.gather_rows(pos_table, &idx)?;
        let mut x = g.add(x, pos)?;
        let mask = g.constant(causal_mask::<R>(n))?;
        for b in &self.blocks {
            x = b.forward(g, s, x, Some(mask))?;
        }
        let hidden = self.norm.forward(g, s, x)?;
        let logits = self.head.forward(g, s, hidden)?;
        Ok(LmOutput { logits, hidden })
    }

    /// Token ids of `text` and the mean of their embedding rows.
    pub fn embed_text<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParamStore<R>,
        vocab: &Vocab,
        text: &str,
    ) -> Result<(Vec<usize>, Var)> {
        let ids = vocab.tokenize(text)?;
        let table = g.param(s, self.tok);
        let rows = g.embedding(table, &ids)?;
        let mean = g.mean_axis(rows, 0)?;
        Ok((ids, mean))
    }

    /// Greedy continuation of `seq` until `<seg>`, `<eos>` or `max_new` tokens.
    /// The visual tokens are fixed values, so each step builds a fresh graph.
    pub fn generate<R: Real>(
        &self,
        s: &ParamStore<R>,
        seq: &TokenSequence,
        visual: Option<&Tensor<R>>,
        max_new: usize,
    ) -> Result<TokenSequence> {
        let mut seq = seq.clone();
        for _ in 0..max_new {
            if seq.len() >= self.cfg.context {
                break;
            }
            let mut g = Graph::new();
            let v = visual.map(|t| g.constant(t.clone())).transpose()?;
            let out = self.forward(&mut g, s, &seq, v)?;
            let logits = g.value(out.logits);
            let row = logits.row(seq.len() - 1);
            let next = argmax(row);
            seq.push(next);
            if next == Vocab::SEG || next == Vocab::EOS {
                break;
            }
        }
        Ok(seq)
    }
}

fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
