use crate::databench::vocabulary;
use crate::dssl::{
    global_normalized, patch_embed_visual, patch_tokens_llm, pbsd_loss, semantic_token, similarity, DsslHeads,
    MemoryQueue, PatchBox,
};
use crate::encoders::{Backbone, BackboneFeatures, MultiLevelFeatures, TinyLm, TokenSequence, VisualEncoder, Vocab};
use crate::error::{Error, Result};
use crate::ltc::{Ltc, MlpProjector, Projector};
use crate::numcore::{Graph, ParamStore, Real, Tensor, Var};
use crate::seghead::{loss_term, seg_loss, text_loss, LossComponents, LossWeights, SegHead};

use super::config::{ModelConfig, ProjectorKind};

/// All trainable parts of the pipeline. Layers hold parameter ids; values
/// live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub encoder: VisualEncoder,
    pub backbone: Backbone,
    pub projector: Projector,
    pub lm: TinyLm,
    pub heads: DsslHeads,
    pub seg: SegHead,
}

/// One training example with its task texts already filled in.
#[derive(Clone, Debug)]
pub struct Example<'a, R: Real> {
    /// `[S, S, 3]` at the model's input size.
    pub image: &'a Tensor<R>,
    /// `[S, S]` binary.
    pub mask: &'a Tensor<R>,
    pub instruction: &'a str,
    pub answer: &'a str,
    pub normal_text: &'a str,
    pub has_seg: bool,
}

/// Greedy prediction for one image.
#[derive(Clone, Debug)]
pub struct Prediction<R: Real> {
    pub answer: String,
    /// Defect probabilities `[S, S]`, absent when no `<seg>` was produced.
    pub probs: Option<Tensor<R>>,
}

impl Model {
    pub fn new<R: Real>(store: &mut ParamStore<R>, seed: u64, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = vocabulary();
        let encoder = VisualEncoder::new(store, seed, &cfg.encoder)?;
        let backbone = Backbone::new(store, seed, &cfg.backbone)?;
        let c = cfg.encoder.width;
        let projector = match cfg.projector {
            ProjectorKind::Ltc => Projector::Ltc(Ltc::new(store, seed, &cfg.ltc, c, cfg.lm.width)?),
            ProjectorKind::Mlp => Projector::Mlp(MlpProjector::new(store, seed, cfg.ltc.rho, c, cfg.lm.width)?),
        };
        let lm = TinyLm::new(store, seed, &cfg.lm, vocab.len())?;
        let heads = DsslHeads::new(store, seed, cfg.backbone.width, c, cfg.lm.width)?;
        let seg = SegHead::new(store, seed, &cfg.seghead, cfg.lm.width, cfg.backbone.width)?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            encoder,
            backbone,
            projector,
            lm,
            heads,
            seg,
        })
    }

    /// A fresh model and its parameter store.
    pub fn build<R: Real>(seed: u64, cfg: &ModelConfig) -> Result<(Self, ParamStore<R>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, seed, cfg)?;
        Ok((model, store))
    }

    pub fn image_size(&self) -> usize {
        self.cfg.encoder.image_size
    }

    /// Tokenised `instruction` followed by `answer`. Answers that do not end
    /// in `<seg>` get a closing `<eos>`.
    pub fn sequence(&self, instruction: &str, answer: &str) -> Result<TokenSequence> {
        let instr = self.vocab.tokenize(instruction)?;
        let mut ans = if answer.trim().is_empty() {
            Vec::new()
        } else {
            self.vocab.tokenize(answer)?
        };
        if !ans.is_empty() && ans.last() != Some(&Vocab::SEG) {
            ans.push(Vocab::EOS);
        }
        TokenSequence::new(self.cfg.visual_tokens(), &instr, &ans)
    }

    pub fn visual_tokens<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParamStore<R>,
        image: Var,
    ) -> Result<(MultiLevelFeatures, Var)> {
        let feats = self.encoder.encode(g, s, image)?;
        let tokens = self.projector.project(g, s, &feats)?;
        Ok((feats, tokens))
    }

    /// Detached `(z, theta)` queue entry of one image.
    pub fn queue_entry<R: Real>(
        &self,
        s: &ParamStore<R>,
        image: &Tensor<R>,
        normal_text: &str,
    ) -> Result<(Vec<R>, Vec<R>)> {
        let mut g = Graph::new();
        let x = g.constant(image.clone())?;
        let bf = self.backbone.forward(&mut g, s, x)?;
        let z = global_normalized(&mut g, s, &self.heads.g_beta, bf.f)?;
        let feats = self.encoder.encode(&mut g, s, x)?;
        let theta = semantic_token(&mut g, s, &self.heads, &self.lm, &self.vocab, &feats, Some(normal_text))?;
        Ok((g.value(z).data().to_vec(), g.value(theta).data().to_vec()))
    }

    /// Loss components of one example. The patch-similarity term is computed
    /// only for segmentation tasks with a queue and non-empty `boxes`.
    pub fn example_losses<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParamStore<R>,
        ex: &Example<'_, R>,
        queue: Option<&MemoryQueue<R>>,
        boxes: &[PatchBox],
        w: &LossWeights,
    ) -> Result<LossComponents> {
        let size = self.image_size();
        if ex.image.shape() != [size, size, 3] || ex.mask.shape() != [size, size] {
            return Err(Error::shape(format!(
                "example image {:?} / mask {:?} do not match the model input {size}x{size}",
                ex.image.shape(),
                ex.mask.shape()
            )));
        }
        let seq = self.sequence(ex.instruction, ex.answer)?;
        if ex.has_seg != seq.seg_position().is_some() {
            return Err(Error::contract(
                "segmentation tasks must carry exactly one <seg> in the answer",
            ));
        }
        let x = g.constant(ex.image.clone())?;
        let (out, txt) = (|| -> Result<_> {
            let (_, visual) = self.visual_tokens(g, s, x)?;
            let out = self.lm.forward(g, s, &seq, Some(visual))?;
            let txt = text_loss(g, out.logits, &seq)?;
            Ok((out, txt))
        })()
        .map_err(|e| loss_term("txt", Err(e)).unwrap_err())?;
        let mut c = LossComponents {
            txt: Some(txt),
            ..LossComponents::default()
        };
        if !ex.has_seg {
            return Ok(c);
        }
        let bf = self.backbone.forward(g, s, x)?;
        if w.seg > 0.0 {
            let seg = (|| {
                let prompt = self
                    .seg
                    .extract_seg_embedding(g, s, out.hidden, &seq)?
                    .ok_or_else(|| Error::contract("segmentation answer without <seg>"))?;
                let pred = self.seg.decode_mask(g, s, &prompt, &bf, size, size)?;
                seg_loss(g, &pred, ex.mask, w)
            })();
            c.seg = Some(loss_term("seg", seg)?);
        }
        if let (Some(q), false) = (queue, boxes.is_empty()) {
            if w.pbsd > 0.0 {
                let pbsd = (|| {
                    let p = self.pbsd_visual(g, s, &bf, boxes, q)?;
                    let qd = self.pbsd_textual(g, s, ex.image, boxes, q)?;
                    pbsd_loss(g, p, qd, &q.positives())
                })();
                c.pbsd = Some(loss_term("pbsd", pbsd)?);
            }
        }
        Ok(c)
    }

    /// Visual patch-to-queue distribution `[boxes, entries]`. It is the
    /// teacher side of the patch loss and receives no gradient from it.
    pub fn pbsd_visual<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParamStore<R>,
        bf: &BackboneFeatures,
        boxes: &[PatchBox],
        q: &MemoryQueue<R>,
    ) -> Result<Var> {
        let size = self.image_size();
        let v = patch_embed_visual(g, s, &self.heads, bf, boxes, size, size)?;
        let z = g.constant(q.z.clone())?;
        similarity(g, v, z, self.cfg.dssl.tau)
    }

    /// Patch-token-to-queue distribution `[boxes, entries]`.
    pub fn pbsd_textual<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParamStore<R>,
        image: &Tensor<R>,
        boxes: &[PatchBox],
        q: &MemoryQueue<R>,
    ) -> Result<Var> {
        let t = patch_tokens_llm(g, s, image, boxes, &self.encoder, &self.projector)?;
        let theta = g.constant(q.theta.clone())?;
        similarity(g, t, theta, self.cfg.dssl.tau)
    }

    /// Greedy answer to `instruction`; when it contains `<seg>` the mask is
    /// decoded from that token.
    pub fn predict<R: Real>(
        &self,
        s: &ParamStore<R>,
        image: &Tensor<R>,
        instruction: &str,
        max_new: usize,
    ) -> Result<Prediction<R>> {
        let size = self.image_size();
        if image.shape() != [size, size, 3] {
            return Err(Error::shape(format!(
                "predict: image {:?} does not match the model input {size}x{size}",
                image.shape()
            )));
        }
        let prompt = self.sequence(instruction, "")?;
        let visual = {
            let mut g = Graph::new();
            let x = g.constant(image.clone())?;
            let (_, v) = self.visual_tokens(&mut g, s, x)?;
            g.value(v).clone()
        };
        let seq = self.lm.generate(s, &prompt, Some(&visual), max_new)?;
        let answer = self.vocab.decode(&seq.ids[prompt.len()..]);
        if seq.seg_position().is_none() {
            return Ok(Prediction { answer, probs: None });
        }
        let mut g = Graph::new();
        let v = g.constant(visual)?;
        let out = self.lm.forward(&mut g, s, &seq, Some(v))?;
        let prompt = self
            .seg
            .extract_seg_embedding(&mut g, s, out.hidden, &seq)?
            .expect("sequence holds <seg>");
        let x = g.constant(image.clone())?;
        let bf = self.backbone.forward(&mut g, s, x)?;
        let pred = self.seg.decode_mask(&mut g, s, &prompt, &bf, size, size)?;
        let probs = pred.probs(&mut g)?;
        Ok(Prediction {
            answer,
            probs: Some(g.value(probs).clone()),
        })
    }
}

/// Bilinear resize of an `[H, W]` or `[H, W, C]` tensor (pixel-centre
/// alignment). Returns the input unchanged when the size already matches.
pub fn resize<R: Real>(t: &Tensor<R>, out_h: usize, out_w: usize) -> Result<Tensor<R>> {
    let (h, w, c) = match *t.shape() {
        [h, w] => (h, w, 0),
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::shape(format!("resize: expected [H, W] or [H, W, C], got {s:?}"))),
    };
    if h == out_h && w == out_w {
        return Ok(t.clone());
    }
    let ch = c.max(1);
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut pts = Vec::with_capacity(out_h * out_w * 2);
    for oy in 0..out_h {
        for ox in 0..out_w {
            pts.push(R::lit((oy as f64 + 0.5) * sy - 0.5));
            pts.push(R::lit((ox as f64 + 0.5) * sx - 0.5));
        }
    }
    let data = crate::numcore::bilinear_forward(t.data(), h, w, ch, &pts, out_h * out_w);
    if c == 0 {
        Tensor::new(&[out_h, out_w], data)
    } else {
        Tensor::new(&[out_h, out_w, c], data)
    }
}
