//! Multimodal transformer over a lexical segment followed by an acoustic
//! segment, with masked language and masked audio prediction heads.
//!
//! Slot layout is `[CLS] tokens… [SEP] acoustic…`. The `[SEP]` slot and the
//! acoustic segment are present only when the input carries audio. Position
//! indices restart at 0 for the acoustic segment, and every slot adds a
//! modality embedding (0 lexical, 1 acoustic) before the embedding layer norm.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CLS, MASK, SEP};
use crate::error::{bail, Result};
use crate::graph::{Graph, SeqLayout, Var};
use crate::nn::{dropout, Encoder, EncoderConfig, LayerNorm, Linear, Mlp, Mode, INIT_STD};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::CoreRng;
use crate::tensor::Tensor;

pub const PREFIX: &str = "mm";
pub const LEXICAL: u8 = 0;
pub const ACOUSTIC: u8 = 1;

/// Parameters that start fresh when a language-only checkpoint seeds the multimodal model.
pub const FRESH_PREFIXES: [&str; 3] = ["mm.embeddings.modality", "mm.adapter", "mm.mam_head"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub p_lex: f64,
    pub p_audio: f64,
    pub span: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { p_lex: 0.15, p_audio: 0.10, span: 3 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_lex) || !(0.0..=1.0).contains(&self.p_audio) {
            bail!(Config, "mask probabilities must lie in [0, 1]");
        }
        if self.span == 0 {
            bail!(Config, "mask span must be at least 1");
        }
        Ok(())
    }
}

/// One assembled sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalInput<R> {
    /// ids of the lexical segment: `[CLS]`, tokens, then `[SEP]` when audio follows
    pub lexical: Vec<u32>,
    pub n_tokens: usize,
    /// `[n_blocks × d_a]` acoustic token embeddings
    pub acoustic: Tensor<R>,
    /// acoustic slots whose embedding is replaced by the zero vector
    pub acoustic_zeroed: Vec<bool>,
    pub position_ids: Vec<usize>,
    pub modality_ids: Vec<u8>,
}

impl<R: Real> MultimodalInput<R> {
    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }

    pub fn n_acoustic(&self) -> usize {
        self.acoustic_zeroed.len()
    }

    /// Slot index of the `k`-th acoustic token.
    pub fn acoustic_slot(&self, k: usize) -> usize {
        self.lexical.len() + k
    }

    /// Slot indices of the lexical tokens, excluding `[CLS]` and `[SEP]`.
    pub fn token_slots(&self) -> core::ops::Range<usize> {
        1..1 + self.n_tokens
    }
}

pub fn assemble<R: Real>(token_ids: &[u32], acoustic: Tensor<R>) -> Result<MultimodalInput<R>> {
    let n_ac = if acoustic.is_empty() { 0 } else { acoustic.rows() };
    if token_ids.is_empty() && n_ac == 0 {
        bail!(InvalidInput, "both modalities are empty");
    }
    let mut lexical = Vec::with_capacity(token_ids.len() + 2);
    lexical.push(CLS);
    lexical.extend_from_slice(token_ids);
    if n_ac > 0 {
        lexical.push(SEP);
    }
    let mut position_ids: Vec<usize> = (0..lexical.len()).collect();
    position_ids.extend(0..n_ac);
    let mut modality_ids = vec![LEXICAL; lexical.len()];
    modality_ids.extend(core::iter::repeat_n(ACOUSTIC, n_ac));
    Ok(MultimodalInput { lexical, n_tokens: token_ids.len(), acoustic, acoustic_zeroed: vec![false; n_ac], position_ids, modality_ids })
}

pub fn text_only<R: Real>(token_ids: &[u32]) -> Result<MultimodalInput<R>> {
    assemble(token_ids, Tensor::zeros(&[0, 0]))
}

/// Masked positions and their prediction targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskPlan {
    /// masked lexical slot indices
    pub lexical: Vec<usize>,
    pub lexical_targets: Vec<u32>,
    /// masked acoustic token indices (0-based within the acoustic segment)
    pub acoustic: Vec<usize>,
    /// raw block values for each entry of `acoustic`
    pub acoustic_targets: Vec<Vec<f32>>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.lexical.is_empty() && self.acoustic.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample<R> {
    pub input: MultimodalInput<R>,
    pub plan: MaskPlan,
}

/// Union of `[s, s + span)` over the span starts, clipped to `len`, sorted.
pub fn span_cover(starts: &[usize], len: usize, span: usize) -> Vec<usize> {
    let mut hit = vec![false; len];
    for &s in starts {
        for i in s..(s + span).min(len) {
            hit[i] = true;
        }
    }
    (0..len).filter(|&i| hit[i]).collect()
}

/// Replaces each lexical token by `[MASK]` with probability `p_lex`, and zeroes
/// each acoustic span starting at a slot drawn with probability `p_audio`.
/// `blocks` supplies the raw block values used as reconstruction targets.
pub fn apply_masks<R: Real>(
    input: &MultimodalInput<R>,
    blocks: &[&[f32]],
    cfg: &MaskConfig,
    rng: &mut CoreRng,
) -> Result<MaskedExample<R>> {
    cfg.validate()?;
    let n_ac = input.n_acoustic();
    if blocks.len() != n_ac {
        bail!(Shape, "{} block targets for {} acoustic slots", blocks.len(), n_ac);
    }
    let mut out = input.clone();
    let mut plan = MaskPlan::default();
    for s in input.token_slots() {
        if rng.gen::<f64>() < cfg.p_lex {
            plan.lexical.push(s);
            plan.lexical_targets.push(input.lexical[s]);
            out.lexical[s] = MASK;
        }
    }
    let starts: Vec<usize> = (0..n_ac).filter(|_| rng.gen::<f64>() < cfg.p_audio).collect();
    plan.acoustic = span_cover(&starts, n_ac, cfg.span);
    for &k in &plan.acoustic {
        out.acoustic_zeroed[k] = true;
        plan.acoustic_targets.push(blocks[k].to_vec());
    }
    Ok(MaskedExample { input: out, plan })
}

/// Mean over masked blocks of the per-block mean squared error; `None` when nothing is masked.
pub fn mam_loss<R: Real>(decoded: &Tensor<R>, originals: &[Vec<f32>]) -> Result<Option<f64>> {
    if originals.is_empty() {
        return Ok(None);
    }
    if decoded.rows() != originals.len() || originals.iter().any(|o| o.len() != decoded.cols()) {
        bail!(Shape, "decoded {:?} vs {} targets", decoded.shape(), originals.len());
    }
    let mut total = 0.0;
    for (i, o) in originals.iter().enumerate() {
        let se: f64 = decoded.row(i).iter().zip(o).map(|(&a, &b)| { let e = a.f64() - b as f64; e * e }).sum();
        total += se / o.len() as f64;
    }
    Ok(Some(total / originals.len() as f64))
}

/// Mean softmax cross-entropy; `None` when nothing is masked.
pub fn mlm_loss<R: Real>(logits: &Tensor<R>, targets: &[u32]) -> Result<Option<f64>> {
    if targets.is_empty() {
        return Ok(None);
    }
    if logits.rows() != targets.len() {
        bail!(Shape, "{} logit rows for {} targets", logits.rows(), targets.len());
    }
    let v = logits.cols();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t as usize >= v {
            bail!(InvalidInput, "target id {t} outside vocabulary of {v}");
        }
        let row = logits.row(i);
        let top = (0..v).fold(0, |a, j| if row[j] > row[a] { j } else { a });
        let mx = row[top].f64();
        let rest: f64 = (0..v).filter(|&j| j != top).map(|j| libm::exp(row[j].f64() - mx)).sum();
        total += (mx - row[t as usize].f64()) + libm::log1p(rest);
    }
    Ok(Some(total / targets.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmShape {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    /// acoustic embedding width; `None` builds the language-only model
    pub d_acoustic: Option<usize>,
    /// flattened block length predicted by the audio head
    pub block_len: usize,
}

#[derive(Debug, Clone)]
pub struct MmModel {
    pub shape: MmShape,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub modality: ParamId,
    pub embed_norm: LayerNorm,
    pub adapter: Option<Linear>,
    pub encoder: Encoder,
    pub mlm_head: Mlp,
    pub mam_head: Option<Mlp>,
}

/// Encoder output for a padded batch.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub hidden: Var,
    pub seq: usize,
}

impl Encoded {
    pub fn row(&self, b: usize, slot: usize) -> usize {
        b * self.seq + slot
    }
}

pub struct AltLoss {
    pub total: Var,
    pub mlm: Option<Var>,
    pub mam: Option<Var>,
}

impl MmModel {
    pub fn new<R: Real>(store: &mut ParamStore<R>, shape: MmShape, seed: u64) -> Result<Self> {
        let d = shape.encoder.d_model;
        if shape.vocab_size <= CLS.max(SEP).max(MASK) as usize {
            bail!(Config, "vocabulary of {} cannot hold the special tokens", shape.vocab_size);
        }
        let e = format!("{PREFIX}.embeddings");
        Ok(MmModel {
            shape,
            tokens: store.normal(&format!("{e}.token"), &[shape.vocab_size, d], INIT_STD, seed),
            positions: store.normal(&format!("{e}.position"), &[shape.encoder.max_positions, d], INIT_STD, seed),
            modality: store.normal(&format!("{e}.modality"), &[2, d], INIT_STD, seed),
            embed_norm: LayerNorm::new(store, &format!("{e}.norm"), d),
            adapter: shape.d_acoustic.map(|da| Linear::new(store, &format!("{PREFIX}.adapter"), da, d, seed)),
            encoder: Encoder::new(store, &format!("{PREFIX}.encoder"), shape.encoder, seed)?,
            mlm_head: Mlp::new(store, &format!("{PREFIX}.mlm_head"), d, d, shape.vocab_size, seed),
            mam_head: shape.d_acoustic.map(|_| Mlp::new(store, &format!("{PREFIX}.mam_head"), d, d, shape.block_len, seed)),
        })
    }

    pub fn d_model(&self) -> usize {
        self.shape.encoder.d_model
    }

    /// Runs the embedding layer and encoder over a right-padded batch.
    pub fn encode<R: Real>(&self, g: &mut Graph<R>, mode: &mut Mode, inputs: &[&MultimodalInput<R>]) -> Result<Encoded> {
        if inputs.is_empty() {
            bail!(InvalidInput, "empty batch");
        }
        let seq = inputs.iter().map(|x| x.len()).max().unwrap_or(0);
        let max_pos = self.shape.encoder.max_positions;
        if seq > max_pos {
            bail!(InvalidInput, "sequence of {seq} slots exceeds max_positions {max_pos}");
        }
        let n_lex: usize = inputs.iter().map(|x| x.lexical.len()).sum();
        let n_ac: usize = inputs.iter().map(|x| x.n_acoustic()).sum();
        let mut lex_ids = Vec::with_capacity(n_lex);
        for x in inputs {
            for &t in &x.lexical {
                if t as usize >= self.shape.vocab_size {
                    bail!(InvalidInput, "token id {t} outside vocabulary of {}", self.shape.vocab_size);
                }
                lex_ids.push(t as usize);
            }
        }
        let table = g.param(self.tokens);
        let lex = g.gather(table, &lex_ids);
        let pool = if n_ac == 0 {
            lex
        } else {
            let Some(adapter) = self.adapter else {
                bail!(InvalidInput, "language-only model received acoustic input");
            };
            let da = adapter.d_in;
            let mut data = Vec::with_capacity(n_ac * da);
            let mut keep = Vec::with_capacity(n_ac * da);
            for x in inputs.iter().filter(|x| x.n_acoustic() > 0) {
                if x.acoustic.cols() != da {
                    bail!(Shape, "acoustic width {} vs adapter input {da}", x.acoustic.cols());
                }
                data.extend_from_slice(x.acoustic.data());
                for &z in &x.acoustic_zeroed {
                    keep.extend(core::iter::repeat_n(if z { R::zero() } else { R::one() }, da));
                }
            }
            let mut a = g.constant(Tensor::new(&[n_ac, da], data));
            if keep.iter().any(|&k| k == R::zero()) {
                a = g.mul_const(a, Tensor::new(&[n_ac, da], keep));
            }
            let a = adapter.forward(g, a);
            g.concat_rows(&[lex, a])
        };
        let mut order = vec![0usize; inputs.len() * seq];
        let mut pos = vec![0usize; inputs.len() * seq];
        let mut modality = vec![0usize; inputs.len() * seq];
        let mut key_mask = vec![false; inputs.len() * seq];
        let (mut lo, mut ao) = (0, n_lex);
        for (b, x) in inputs.iter().enumerate() {
            for s in 0..x.len() {
                let r = b * seq + s;
                order[r] = if s < x.lexical.len() { lo + s } else { ao + s - x.lexical.len() };
                pos[r] = x.position_ids[s];
                modality[r] = x.modality_ids[s] as usize;
                key_mask[r] = true;
            }
            lo += x.lexical.len();
            ao += x.n_acoustic();
        }
        let content = g.gather(pool, &order);
        let pt = g.param(self.positions);
        let pe = g.gather(pt, &pos);
        let mt = g.param(self.modality);
        let me = g.gather(mt, &modality);
        let h = g.add(content, pe);
        let h = g.add(h, me);
        let h = self.embed_norm.forward(g, h);
        let h = dropout(g, mode, h, self.shape.encoder.dropout_rate);
        let layout = SeqLayout { batch: inputs.len(), seq, key_mask };
        let hidden = self.encoder.forward(g, mode, h, &layout)?;
        Ok(Encoded { hidden, seq })
    }

    /// `[B × d_model]` final hidden states at `[CLS]`.
    pub fn cls<R: Real>(&self, g: &mut Graph<R>, mode: &mut Mode, inputs: &[&MultimodalInput<R>]) -> Result<Var> {
        let enc = self.encode(g, mode, inputs)?;
        let rows: Vec<usize> = (0..inputs.len()).map(|b| enc.row(b, 0)).collect();
        Ok(g.gather(enc.hidden, &rows))
    }

    /// `[B × d_model]` mean of the final hidden states over lexical tokens of text-only inputs.
    pub fn pooled_text<R: Real>(&self, g: &mut Graph<R>, mode: &mut Mode, token_lists: &[&[u32]]) -> Result<Var> {
        let inputs = token_lists
            .iter()
            .map(|t| {
                if t.is_empty() {
                    bail!(InvalidInput, "empty token sequence");
                }
                text_only(t)
            })
            .collect::<Result<Vec<MultimodalInput<R>>>>()?;
        let refs: Vec<&MultimodalInput<R>> = inputs.iter().collect();
        let enc = self.encode(g, mode, &refs)?;
        let segments = inputs.iter().enumerate().map(|(b, x)| x.token_slots().map(|s| enc.row(b, s)).collect()).collect();
        Ok(g.segment_mean(enc.hidden, segments))
    }

    /// Joint masked prediction loss `L_MLM + L_MAM` over a batch of masked examples.
    pub fn alt_loss<R: Real>(&self, g: &mut Graph<R>, mode: &mut Mode, batch: &[&MaskedExample<R>]) -> Result<AltLoss> {
        if batch.iter().all(|e| e.plan.is_empty()) {
            bail!(InvalidInput, "no masked positions in batch");
        }
        let inputs: Vec<&MultimodalInput<R>> = batch.iter().map(|e| &e.input).collect();
        let enc = self.encode(g, mode, &inputs)?;
        let mut lex_rows = Vec::new();
        let mut lex_targets = Vec::new();
        let mut ac_rows = Vec::new();
        let mut ac_targets = Vec::new();
        for (b, e) in batch.iter().enumerate() {
            for (&s, &t) in e.plan.lexical.iter().zip(&e.plan.lexical_targets) {
                lex_rows.push(enc.row(b, s));
                lex_targets.push(t as usize);
            }
            for (&k, t) in e.plan.acoustic.iter().zip(&e.plan.acoustic_targets) {
                if t.len() != self.shape.block_len {
                    bail!(Shape, "block target of {} values vs head output {}", t.len(), self.shape.block_len);
                }
                ac_rows.push(enc.row(b, e.input.acoustic_slot(k)));
                ac_targets.extend(t.iter().map(|&v| R::of(v as f64)));
            }
        }
        let mlm = if lex_rows.is_empty() {
            None
        } else {
            let h = g.gather(enc.hidden, &lex_rows);
            let logits = self.mlm_head.forward(g, h);
            Some(g.cross_entropy(logits, &lex_targets))
        };
        let mam = if ac_rows.is_empty() {
            None
        } else {
            let Some(head) = self.mam_head else {
                bail!(InvalidInput, "language-only model has no audio head");
            };
            let h = g.gather(enc.hidden, &ac_rows);
            let decoded = head.forward(g, h);
            let n = ac_rows.len();
            Some(g.mse(decoded, Tensor::new(&[n, self.shape.block_len], ac_targets)))
        };
        let total = match (mlm, mam) {
            (Some(a), Some(b)) => g.add(a, b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!(),
        };
        Ok(AltLoss { total, mlm, mam })
    }
}
