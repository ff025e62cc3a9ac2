//! Staged training: language-only masked modeling (stage 0), contrastive
//! acoustic-language pretraining (stage 1), joint masked audio/language
//! modeling (stage 2) and supervised fine-tuning (stage 3), plus evaluation,
//! the end-to-end gradient checks and the ablation harness.
//!
//! All stages train in `f32` and draw every random choice from streams keyed
//! by `(seed, label)`, so a configuration and seed fully determine the result.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calp::{eligible, sample_triples, CalpProjections};
use crate::config::{GradCheckConfig, Modality, RunConfig};
use crate::corpus::{binarize, synth_corpus, Dataset, ManifestRecord, Split, Utterance, Vocab, EMOTIONS};
use crate::error::{bail, Result};
use crate::features::{extract_blocks, log_mel, normalize, AcousticBlock, FeatureConfig, LogMel, PatchGeometry};
use crate::gradcheck::{grad_check, GradCheckReport, Probe};
use crate::graph::{CalpSpec, Graph};
use crate::heads::{metrics, predict, ConfusionCounts, EmotionHead, Metrics};
use crate::mmtx::{apply_masks, assemble, text_only, MaskConfig, MaskedExample, MmModel, MmShape, MultimodalInput, FRESH_PREFIXES};
use crate::nn::{EncoderConfig, Mode};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamGrads, ParamStore};
use crate::real::Real;
use crate::rng::{derive_rng, shuffle, standard_normal, CoreRng};
use crate::spectran::{SpecTran, SpecTranConfig};
use crate::tensor::Tensor;

pub type Store = ParamStore<f32>;

const EVAL_BATCH: usize = 32;

/// Turns decoded audio and manifest records into a training dataset. The
/// vocabulary is built from training-split transcripts unless one is given.
pub fn prepare_dataset(
    records: &[ManifestRecord],
    label_names: &[String],
    audio: &[Vec<f32>],
    features: &FeatureConfig,
    vocab: Option<Vocab>,
    min_count: usize,
) -> Result<Dataset> {
    let mels = audio.iter().map(|a| log_mel(a, features)).collect::<Result<Vec<_>>>()?;
    prepare_from_log_mels(records, label_names, mels, features, vocab, min_count)
}

/// As [`prepare_dataset`], from unnormalized log-mel frames.
pub fn prepare_from_log_mels(
    records: &[ManifestRecord],
    label_names: &[String],
    mels: Vec<LogMel>,
    features: &FeatureConfig,
    vocab: Option<Vocab>,
    min_count: usize,
) -> Result<Dataset> {
    features.validate()?;
    if records.len() != mels.len() {
        bail!(Shape, "{} records but {} feature matrices", records.len(), mels.len());
    }
    if records.is_empty() {
        bail!(NotEnoughData, "empty corpus");
    }
    let vocab = match vocab {
        Some(v) => v,
        None => {
            let mut texts: Vec<&str> = records.iter().filter(|r| r.split == Split::Train).map(|r| r.transcript.as_str()).collect();
            if texts.is_empty() {
                texts = records.iter().map(|r| r.transcript.as_str()).collect();
            }
            Vocab::build(&texts, min_count)?
        }
    };
    let mut utterances = Vec::with_capacity(records.len());
    for (r, lm) in records.iter().zip(mels) {
        let labels = label_names
            .iter()
            .map(|k| match r.labels.get(k) {
                Some(&v) => Ok(binarize(v) as f32),
                None => bail!(InvalidInput, "utterance `{}` lacks label `{k}`", r.id),
            })
            .collect::<Result<Vec<f32>>>()?;
        let lm = normalize(lm, features.normalization);
        utterances.push(Utterance {
            id: r.id.clone(),
            token_ids: vocab.encode(&r.transcript),
            labels,
            split: r.split,
            blocks: extract_blocks(&lm, features, &r.id),
        });
    }
    Ok(Dataset { utterances, label_names: label_names.to_vec(), vocab })
}

/// Label columns in canonical emotion order, then any others by name.
pub fn label_order(names: &[String]) -> Vec<String> {
    let mut ordered: Vec<String> = EMOTIONS.iter().map(|s| s.to_string()).filter(|e| names.contains(e)).collect();
    let rest: Vec<String> = names.iter().filter(|n| !ordered.contains(n)).cloned().collect();
    ordered.extend(rest);
    ordered
}

/// The synthetic corpus of the configuration, featurized.
pub fn synth_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let corpus = synth_corpus(&cfg.data.synth)?;
    let names: Vec<String> = corpus[0].record.labels.keys().cloned().collect();
    let ordered = label_order(&names);
    let records: Vec<ManifestRecord> = corpus.iter().map(|u| u.record.clone()).collect();
    let audio: Vec<Vec<f32>> = corpus.into_iter().map(|u| u.samples).collect();
    prepare_dataset(&records, &ordered, &audio, &cfg.features, None, cfg.data.vocab_min_count)
}

/// Log of one training stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub seed: u64,
    pub steps: usize,
    /// training loss at every step
    pub loss: Vec<f64>,
    /// secondary curves as `(step, value)` pairs
    pub curves: BTreeMap<String, Vec<(usize, f64)>>,
    pub events: Vec<String>,
}

impl StageLog {
    fn new(stage: &str, seed: u64) -> Self {
        StageLog { stage: stage.to_string(), seed, ..StageLog::default() }
    }

    fn point(&mut self, curve: &str, step: usize, value: f64) {
        self.curves.entry(curve.to_string()).or_default().push((step, value));
    }

    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.loss.len()).max(1);
        self.loss[self.loss.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }
}

/// Shuffled passes over a fixed index list.
struct Sampler {
    items: Vec<usize>,
    pos: usize,
    rng: CoreRng,
}

impl Sampler {
    fn new(items: Vec<usize>, rng: CoreRng) -> Self {
        let mut s = Sampler { items, pos: 0, rng };
        shuffle(&mut s.rng, &mut s.items);
        s
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let n = n.min(self.items.len());
        if self.pos + n > self.items.len() {
            shuffle(&mut self.rng, &mut self.items);
            self.pos = 0;
        }
        let b = self.items[self.pos..self.pos + n].to_vec();
        self.pos += n;
        b
    }
}

fn adam(lr: f64, clip_norm: Option<f64>) -> Adam<f32> {
    Adam::new(AdamConfig { lr, clip_norm, ..AdamConfig::default() })
}

fn finite(loss: f64, stage: &str, step: usize) -> Result<f64> {
    if !loss.is_finite() {
        bail!(NonFinite, "{stage} loss at step {step}");
    }
    Ok(loss)
}

pub fn mm_shape(cfg: &RunConfig, vocab_size: usize, with_audio: bool) -> MmShape {
    MmShape {
        encoder: cfg.mm,
        vocab_size,
        d_acoustic: with_audio.then_some(cfg.spectran.encoder.d_model),
        block_len: cfg.features.block_len(),
    }
}

/// The full model: spectral transformer, multimodal transformer and emotion head.
#[derive(Debug, Clone)]
pub struct Calm {
    pub spectran: SpecTran,
    pub mm: MmModel,
    pub head: EmotionHead,
}

impl Calm {
    pub fn build(store: &mut Store, cfg: &RunConfig, vocab_size: usize, n_classes: usize) -> Result<Calm> {
        let spectran = SpecTran::new(store, &cfg.spectran, &cfg.features, cfg.seed)?;
        let mm = MmModel::new(store, mm_shape(cfg, vocab_size, true), cfg.seed)?;
        let head = EmotionHead::new(store, &cfg.finetune.task, cfg.mm.d_model, n_classes, cfg.seed);
        Ok(Calm { spectran, mm, head })
    }

    /// Rebuilds the model around a checkpoint; every checkpoint tensor must fit.
    pub fn from_checkpoint(ckpt: &Store, cfg: &RunConfig, vocab_size: usize, n_classes: usize) -> Result<(Store, Calm)> {
        let mut store = Store::new();
        let calm = Calm::build(&mut store, cfg, vocab_size, n_classes)?;
        check_compatible(&store, ckpt)?;
        store.load_from(ckpt, &[]);
        Ok((store, calm))
    }
}

fn check_compatible(model: &Store, ckpt: &Store) -> Result<()> {
    for (name, t) in ckpt.iter() {
        if let Some(m) = model.by_name(name) {
            if m.shape() != t.shape() {
                bail!(Shape, "checkpoint tensor `{name}` has shape {:?}, model expects {:?}", t.shape(), m.shape());
            }
        }
    }
    Ok(())
}

/// Eval-mode acoustic token embeddings of every utterance, in dataset order.
pub fn acoustic_embeddings(spectran: &SpecTran, store: &Store, ds: &Dataset) -> Result<Vec<Tensor<f32>>> {
    ds.utterances.iter().map(|u| spectran.embed_utterance(store, &u.blocks)).collect()
}

pub fn build_input(u: &Utterance, acoustic: Option<&Tensor<f32>>, modality: Modality) -> Result<MultimodalInput<f32>> {
    let emb = || acoustic.cloned().ok_or_else(|| crate::error::CoreError::InvalidInput(format!("no acoustic embedding for `{}`", u.id)));
    match modality {
        Modality::Text => text_only(&u.token_ids),
        Modality::Audio => assemble(&[], emb()?),
        Modality::Both => assemble(&u.token_ids, emb()?),
    }
}

fn mask_until_nonempty(
    inputs: &[MultimodalInput<f32>],
    blocks: &[Vec<&[f32]>],
    mask: &MaskConfig,
    rng: &mut CoreRng,
) -> Result<Vec<MaskedExample<f32>>> {
    if mask.p_lex == 0.0 && mask.p_audio == 0.0 {
        bail!(Config, "masking probabilities are both zero");
    }
    for _ in 0..1000 {
        let ex = inputs
            .iter()
            .zip(blocks)
            .map(|(x, b)| apply_masks(x, b, mask, rng))
            .collect::<Result<Vec<_>>>()?;
        if ex.iter().any(|e| !e.plan.is_empty()) {
            return Ok(ex);
        }
    }
    bail!(InvalidInput, "could not draw a nonempty mask")
}

/// Stage 0: masked language modeling on training transcripts with the
/// text-only multimodal transformer.
pub fn stage0_lm(ds: &Dataset, cfg: &RunConfig) -> Result<(Store, StageLog)> {
    cfg.validate()?;
    let mut store = Store::new();
    let mm = MmModel::new(&mut store, mm_shape(cfg, ds.vocab.len(), false), cfg.seed)?;
    let train: Vec<usize> = ds.split_indices(Split::Train).into_iter().filter(|&i| !ds.utterances[i].token_ids.is_empty()).collect();
    if train.is_empty() {
        bail!(NotEnoughData, "no training transcripts");
    }
    let mut log = StageLog::new("pretrain-lm", cfg.seed);
    let inputs: Vec<MultimodalInput<f32>> = ds.utterances.iter().map(|u| text_only(&u.token_ids).ok()).map(|x| x.unwrap_or_else(|| text_only(&[crate::corpus::UNK]).unwrap())).collect();
    let mask = MaskConfig { p_lex: cfg.lm.p_lex, p_audio: 0.0, span: 1 };
    let mut sampler = Sampler::new(train, derive_rng(cfg.seed, "stage0.batches"));
    let mut mask_rng = derive_rng(cfg.seed, "stage0.masks");
    let mut mode = Mode::train(derive_rng(cfg.seed, "stage0.dropout"));
    let mut opt = adam(cfg.lm.lr, cfg.lm.clip_norm);
    for step in 0..cfg.lm.steps {
        let idx = sampler.next_batch(cfg.lm.batch_size);
        let batch: Vec<MultimodalInput<f32>> = idx.iter().map(|&i| inputs[i].clone()).collect();
        let empty: Vec<Vec<&[f32]>> = vec![Vec::new(); batch.len()];
        let ex = mask_until_nonempty(&batch, &empty, &mask, &mut mask_rng)?;
        let refs: Vec<&MaskedExample<f32>> = ex.iter().collect();
        let (loss, grads) = {
            let mut g = Graph::new(&store);
            let l = mm.alt_loss(&mut g, &mut mode, &refs)?;
            (g.value(l.total).item() as f64, g.backward(l.total).params())
        };
        log.loss.push(finite(loss, "pretrain-lm", step)?);
        opt.step(&mut store, &grads)?;
    }
    log.steps = cfg.lm.steps;
    Ok((store, log))
}

/// Mean masked-token cross-entropy on a split under a fixed mask draw.
pub fn mlm_eval(lm: &Store, ds: &Dataset, cfg: &RunConfig, split: Split) -> Result<f64> {
    let mut store = Store::new();
    let mm = MmModel::new(&mut store, mm_shape(cfg, ds.vocab.len(), false), cfg.seed)?;
    check_compatible(&store, lm)?;
    store.load_from(lm, &[]);
    let idx: Vec<usize> = ds.split_indices(split).into_iter().filter(|&i| !ds.utterances[i].token_ids.is_empty()).collect();
    if idx.is_empty() {
        bail!(NotEnoughData, "no transcripts in the {} split", split.as_str());
    }
    let mask = MaskConfig { p_lex: cfg.lm.p_lex.max(0.15), p_audio: 0.0, span: 1 };
    let mut rng = derive_rng(cfg.seed, "mlm-eval");
    let (mut total, mut n) = (0.0, 0usize);
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = chunk.iter().map(|&i| text_only(&ds.utterances[i].token_ids)).collect::<Result<Vec<_>>>()?;
        let empty: Vec<Vec<&[f32]>> = vec![Vec::new(); batch.len()];
        let ex = mask_until_nonempty(&batch, &empty, &mask, &mut rng)?;
        let masked: usize = ex.iter().map(|e| e.plan.lexical.len()).sum();
        let refs: Vec<&MaskedExample<f32>> = ex.iter().collect();
        let mut g = Graph::new(&store);
        let l = mm.alt_loss(&mut g, &mut Mode::eval(), &refs)?;
        total += g.value(l.total).item() as f64 * masked as f64;
        n += masked;
    }
    Ok(total / n as f64)
}

/// Pooled final hidden states of the frozen language model, per utterance.
fn pooled_language(lm: &Store, ds: &Dataset, cfg: &RunConfig) -> Result<Vec<Option<Vec<f32>>>> {
    let mut store = Store::new();
    let mm = MmModel::new(&mut store, mm_shape(cfg, ds.vocab.len(), false), cfg.seed)?;
    check_compatible(&store, lm)?;
    if store.load_from(lm, &[]).is_empty() {
        bail!(Config, "language checkpoint holds no language-model tensors");
    }
    let mut out = vec![None; ds.utterances.len()];
    let idx: Vec<usize> = (0..ds.utterances.len()).filter(|&i| !ds.utterances[i].token_ids.is_empty()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let lists: Vec<&[u32]> = chunk.iter().map(|&i| ds.utterances[i].token_ids.as_slice()).collect();
        let mut g = Graph::new(&store);
        let p = mm.pooled_text(&mut g, &mut Mode::eval(), &lists)?;
        for (r, &i) in chunk.iter().enumerate() {
            out[i] = Some(g.value(p).row(r).to_vec());
        }
    }
    Ok(out)
}

struct CalpParts<'a> {
    spectran: &'a SpecTran,
    projections: &'a CalpProjections,
    pooled: &'a [Option<Vec<f32>>],
}

/// In-batch audio→text top-1 retrieval averaged over `batches` seeded batches.
fn retrieval_top1(store: &Store, parts: &CalpParts, ds: &Dataset, pool_global: &[usize], m: usize, batches: usize, seed: u64) -> Result<f64> {
    let refs: Vec<&Utterance> = pool_global.iter().map(|&i| &ds.utterances[i]).collect();
    let local: Vec<usize> = (0..refs.len()).collect();
    let mut rng = derive_rng(seed, "calp.retrieval");
    let (mut hits, mut total) = (0usize, 0usize);
    for _ in 0..batches {
        let triples = sample_triples(&refs, &local, m, &mut rng)?;
        let blocks: Vec<&AcousticBlock> = triples.iter().map(|t| &refs[t.utterance].blocks[t.block]).collect();
        let mut text = Vec::with_capacity(m * parts.projections.language.d_in);
        for t in &triples {
            text.extend_from_slice(parts.pooled[pool_global[t.utterance]].as_ref().expect("eligible utterances have text"));
        }
        let mut g = Graph::new(store);
        let e = parts.spectran.embed_blocks(&mut g, &mut Mode::eval(), &blocks)?;
        let u = parts.projections.project_audio(&mut g, e);
        let tv = g.constant(Tensor::new(&[m, parts.projections.language.d_in], text));
        let v = parts.projections.project_language(&mut g, tv);
        let (u, v) = (g.value(u), g.value(v));
        for i in 0..m {
            let sims: Vec<f32> = (0..m).map(|j| crate::real::dot(u.row(i), v.row(j))).collect();
            let best = (0..m).fold(0, |a, j| if sims[j] > sims[a] { j } else { a });
            hits += (best == i) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Stage 1: trains the spectral transformer and both projections under the
/// composite contrastive loss. The language model is frozen; with `alpha = 0`
/// it is not needed at all.
pub fn stage1_calp(ds: &Dataset, lm: Option<&Store>, cfg: &RunConfig) -> Result<(Store, StageLog)> {
    cfg.validate()?;
    let c = cfg.calp;
    let mut store = Store::new();
    let spectran = SpecTran::new(&mut store, &cfg.spectran, &cfg.features, cfg.seed)?;
    let projections = CalpProjections::new(&mut store, spectran.d_model(), cfg.mm.d_model, c.d_shared, cfg.seed);
    let use_language = c.alpha > 0.0;
    let pooled = match (use_language, lm) {
        (true, Some(lm)) => pooled_language(lm, ds, cfg)?,
        (true, None) => bail!(Config, "contrastive pretraining with alpha > 0 needs a language-model checkpoint"),
        (false, Some(lm)) => pooled_language(lm, ds, cfg)?,
        (false, None) => vec![None; ds.utterances.len()],
    };
    let mut log = StageLog::new("pretrain-calp", cfg.seed);

    let train_idx = ds.split_indices(Split::Train);
    let train: Vec<&Utterance> = train_idx.iter().map(|&i| &ds.utterances[i]).collect();
    let pool = eligible(&train);
    log.events.push(format!("{} of {} training utterances skipped (fewer than two full blocks)", train.len() - pool.len(), train.len()));
    if pool.len() < c.batch_size {
        bail!(NotEnoughData, "{} eligible utterances for contrastive batches of {}", pool.len(), c.batch_size);
    }

    let held: Vec<usize> = ds.utterances.iter().enumerate().filter(|(_, u)| u.split != Split::Train).map(|(i, _)| i).collect();
    let held_refs: Vec<&Utterance> = held.iter().map(|&i| &ds.utterances[i]).collect();
    let mut eval_pool: Vec<usize> = eligible(&held_refs).into_iter().map(|k| held[k]).collect();
    if eval_pool.len() < c.batch_size {
        log.events.push(format!("held-out pool of {} is smaller than the batch; retrieval measured on training utterances", eval_pool.len()));
        eval_pool = pool.iter().map(|&k| train_idx[k]).collect();
    }
    let can_retrieve = pooled.iter().any(|p| p.is_some());

    let mut rng = derive_rng(cfg.seed, "stage1.triples");
    let mut mode = Mode::train(derive_rng(cfg.seed, "stage1.dropout"));
    let mut opt = adam(c.lr, c.clip_norm);
    let spec = c.spec();
    let m = c.batch_size;
    let d_lang = cfg.mm.d_model;
    for step in 0..c.steps {
        if can_retrieve && c.eval_interval > 0 && step % c.eval_interval == 0 {
            let parts = CalpParts { spectran: &spectran, projections: &projections, pooled: &pooled };
            let r = retrieval_top1(&store, &parts, ds, &eval_pool, m, c.eval_batches, cfg.seed)?;
            log.point("retrieval_top1", step, r);
        }
        let triples = sample_triples(&train, &pool, m, &mut rng)?;
        let mut blocks: Vec<&AcousticBlock> = triples.iter().map(|t| &train[t.utterance].blocks[t.block]).collect();
        blocks.extend(triples.iter().map(|t| &train[t.utterance].blocks[t.block + 1]));
        let (loss, grads) = {
            let mut g = Graph::new(&store);
            let e = spectran.embed_blocks(&mut g, &mut mode, &blocks)?;
            let first: Vec<usize> = (0..m).collect();
            let next: Vec<usize> = (m..2 * m).collect();
            let et = g.gather(e, &first);
            let et1 = g.gather(e, &next);
            let u = projections.project_audio(&mut g, et);
            let w = projections.project_audio(&mut g, et1);
            let v = if use_language {
                let mut text = Vec::with_capacity(m * d_lang);
                for t in &triples {
                    text.extend_from_slice(pooled[train_idx[t.utterance]].as_ref().expect("eligible utterances have text"));
                }
                let tv = g.constant(Tensor::new(&[m, d_lang], text));
                projections.project_language(&mut g, tv)
            } else {
                w
            };
            let l = g.calp(u, w, v, spec);
            (g.value(l).item() as f64, g.backward(l).params())
        };
        log.loss.push(finite(loss, "pretrain-calp", step)?);
        opt.step(&mut store, &grads)?;
    }
    if can_retrieve {
        let parts = CalpParts { spectran: &spectran, projections: &projections, pooled: &pooled };
        let r = retrieval_top1(&store, &parts, ds, &eval_pool, m, c.eval_batches, cfg.seed)?;
        log.point("retrieval_top1", c.steps, r);
    }
    log.steps = c.steps;
    Ok((store, log))
}

/// Final in-batch retrieval accuracy recorded by a contrastive stage log.
pub fn final_retrieval(log: &StageLog) -> Option<f64> {
    log.curves.get("retrieval_top1").and_then(|c| c.last()).map(|&(_, v)| v)
}

/// Stage 2: joint masked language and masked audio modeling on bimodal inputs.
/// The multimodal transformer starts from the language model except for the
/// modality table, the acoustic adapter and the audio head; the spectral
/// transformer comes from stage 1 (or its initialization) and stays frozen.
pub fn stage2_alt(ds: &Dataset, lm: Option<&Store>, audio: Option<&Store>, cfg: &RunConfig) -> Result<(Store, StageLog)> {
    cfg.validate()?;
    let mut store = Store::new();
    let spectran = SpecTran::new(&mut store, &cfg.spectran, &cfg.features, cfg.seed)?;
    let mm = MmModel::new(&mut store, mm_shape(cfg, ds.vocab.len(), true), cfg.seed)?;
    let mut log = StageLog::new("pretrain-alt", cfg.seed);
    if let Some(a) = audio {
        check_compatible(&store, a)?;
        let n = store.load_from(a, &["mm.", "calp.", "head."]).len();
        log.events.push(format!("{n} spectral-transformer tensors loaded"));
    } else {
        log.events.push(String::from("spectral transformer left at initialization"));
    }
    if let Some(l) = lm {
        check_compatible(&store, l)?;
        let mut skip: Vec<&str> = FRESH_PREFIXES.to_vec();
        skip.extend(["spectran.", "calp.", "head."]);
        let n = store.load_from(l, &skip).len();
        log.events.push(format!("{n} language-model tensors loaded"));
    }
    let cache = acoustic_embeddings(&spectran, &store, ds)?;
    let train = ds.split_indices(Split::Train);
    if train.is_empty() {
        bail!(NotEnoughData, "empty training split");
    }
    let inputs: Vec<MultimodalInput<f32>> =
        ds.utterances.iter().zip(&cache).map(|(u, e)| assemble(&u.token_ids, e.clone())).collect::<Result<_>>()?;
    let mask = cfg.alt.mask();
    let mut sampler = Sampler::new(train, derive_rng(cfg.seed, "stage2.batches"));
    let mut mask_rng = derive_rng(cfg.seed, "stage2.masks");
    let mut mode = Mode::train(derive_rng(cfg.seed, "stage2.dropout"));
    let mut opt = adam(cfg.alt.lr, cfg.alt.clip_norm);
    for step in 0..cfg.alt.steps {
        let idx = sampler.next_batch(cfg.alt.batch_size);
        let batch: Vec<MultimodalInput<f32>> = idx.iter().map(|&i| inputs[i].clone()).collect();
        let blocks: Vec<Vec<&[f32]>> = idx.iter().map(|&i| ds.utterances[i].blocks.iter().map(|b| b.values.as_slice()).collect()).collect();
        let ex = mask_until_nonempty(&batch, &blocks, &mask, &mut mask_rng)?;
        let refs: Vec<&MaskedExample<f32>> = ex.iter().collect();
        let (loss, parts, grads) = {
            let mut g = Graph::new(&store);
            let l = mm.alt_loss(&mut g, &mut mode, &refs)?;
            let parts = (l.mlm.map(|v| g.value(v).item() as f64), l.mam.map(|v| g.value(v).item() as f64));
            (g.value(l.total).item() as f64, parts, g.backward(l.total).params())
        };
        log.loss.push(finite(loss, "pretrain-alt", step)?);
        if let Some(v) = parts.0 {
            log.point("mlm", step, v);
        }
        if let Some(v) = parts.1 {
            log.point("mam", step, v);
        }
        opt.step(&mut store, &grads)?;
    }
    log.steps = cfg.alt.steps;
    Ok((store, log))
}

/// Deterministic per-class subsample; the stratum of an utterance is its
/// first positive label (or "none"). Each non-empty stratum keeps at least one.
pub fn stratified_subset(ds: &Dataset, idx: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return idx.to_vec();
    }
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        let key = ds.utterances[i].labels.iter().position(|&y| y > 0.5).unwrap_or(usize::MAX);
        strata.entry(key).or_default().push(i);
    }
    let mut rng = derive_rng(seed, "supervision");
    let mut out = Vec::new();
    for (_, mut members) in strata {
        shuffle(&mut rng, &mut members);
        let keep = libm::ceil(fraction * members.len() as f64) as usize;
        out.extend_from_slice(&members[..keep.clamp(1, members.len())]);
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub split: Split,
    pub modality: Modality,
    pub metrics: Metrics,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub seed: u64,
    pub modality: Modality,
    pub freeze: bool,
    pub n_train: usize,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub val: Vec<Metrics>,
    pub train: EvalResult,
    pub test: EvalResult,
    pub events: Vec<String>,
}

/// Model plus cached inputs for repeated forward passes over a dataset.
struct Bound<'a> {
    calm: &'a Calm,
    ds: &'a Dataset,
    cache: Option<Vec<Tensor<f32>>>,
    modality: Modality,
}

impl Bound<'_> {
    fn input(&self, i: usize) -> Result<MultimodalInput<f32>> {
        build_input(&self.ds.utterances[i], self.cache.as_ref().map(|c| &c[i]), self.modality)
    }

    fn cls_rows(&self, store: &Store, idx: &[usize]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(EVAL_BATCH) {
            let inputs = chunk.iter().map(|&i| self.input(i)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&MultimodalInput<f32>> = inputs.iter().collect();
            let mut g = Graph::new(store);
            let c = self.calm.mm.cls(&mut g, &mut Mode::eval(), &refs)?;
            out.extend((0..chunk.len()).map(|r| g.value(c).row(r).to_vec()));
        }
        Ok(out)
    }

    fn evaluate(&self, store: &Store, idx: &[usize], split: Split, threshold: f64) -> Result<EvalResult> {
        let feats = self.cls_rows(store, idx)?;
        let mut counts = ConfusionCounts::new(self.ds.n_classes());
        for (&i, f) in idx.iter().zip(&feats) {
            let z = self.calm.head.logits(store, f)?;
            let y: Vec<bool> = self.ds.utterances[i].labels.iter().map(|&v| v > 0.5).collect();
            counts.add(&y, &predict(&z, threshold))?;
        }
        Ok(EvalResult { split, modality: self.modality, metrics: metrics(&counts)?, counts })
    }
}

fn cache_for(calm: &Calm, store: &Store, ds: &Dataset, modality: Modality) -> Result<Option<Vec<Tensor<f32>>>> {
    match modality {
        Modality::Text => Ok(None),
        _ => acoustic_embeddings(&calm.spectran, store, ds).map(Some),
    }
}

/// Stage 3: trains the emotion head on `[CLS]` (and the multimodal transformer
/// too when `freeze` is off). The spectral transformer is never updated here.
pub fn stage3_finetune(ds: &Dataset, backbone: Option<&Store>, cfg: &RunConfig) -> Result<(Store, FinetuneReport)> {
    cfg.validate()?;
    let f = &cfg.finetune;
    let mut store = Store::new();
    let calm = Calm::build(&mut store, cfg, ds.vocab.len(), ds.n_classes())?;
    let mut events = Vec::new();
    if let Some(b) = backbone {
        check_compatible(&store, b).map_err(|e| crate::error::CoreError::Shape(format!("label count or architecture mismatch: {e}")))?;
        let n = store.load_from(b, &["head.", "calp."]).len();
        events.push(format!("{n} backbone tensors loaded"));
    } else {
        events.push(String::from("no pretraining: backbone left at initialization"));
    }
    let bound = Bound { calm: &calm, ds, cache: cache_for(&calm, &store, ds, f.modality)?, modality: f.modality };
    let all_train = ds.split_indices(Split::Train);
    let train = stratified_subset(ds, &all_train, f.supervision_fraction, cfg.seed);
    if train.is_empty() {
        bail!(NotEnoughData, "empty training split");
    }
    events.push(format!("{} of {} training utterances used", train.len(), all_train.len()));
    let val = ds.split_indices(Split::Val);
    let test = ds.split_indices(Split::Test);

    let per_epoch = train.len().div_ceil(f.batch_size);
    let total = f.steps.unwrap_or(f.epochs * per_epoch);
    let frozen_feats: Option<BTreeMap<usize, Vec<f32>>> = if f.freeze {
        let rows = bound.cls_rows(&store, &train)?;
        Some(train.iter().copied().zip(rows).collect())
    } else {
        None
    };
    let mut order = train.clone();
    let mut rng = derive_rng(cfg.seed, "stage3.batches");
    let mut mode = Mode::train(derive_rng(cfg.seed, "stage3.dropout"));
    let mut opt = adam(f.lr, f.clip_norm);
    let d = cfg.mm.d_model;
    let (mut step, mut epoch_losses, mut val_metrics) = (0usize, Vec::new(), Vec::new());
    while step < total {
        shuffle(&mut rng, &mut order);
        let mut sum = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(f.batch_size) {
            if step >= total {
                break;
            }
            let labels: Vec<f32> = chunk.iter().flat_map(|&i| ds.utterances[i].labels.iter().copied()).collect();
            let (loss, grads) = {
                let mut g = Graph::new(&store);
                let cls = match &frozen_feats {
                    Some(feats) => {
                        let rows: Vec<f32> = chunk.iter().flat_map(|i| feats[i].iter().copied()).collect();
                        g.constant(Tensor::new(&[chunk.len(), d], rows))
                    }
                    None => {
                        let inputs = chunk.iter().map(|&i| bound.input(i)).collect::<Result<Vec<_>>>()?;
                        let refs: Vec<&MultimodalInput<f32>> = inputs.iter().collect();
                        calm.mm.cls(&mut g, &mut mode, &refs)?
                    }
                };
                let z = calm.head.forward(&mut g, cls);
                let l = g.bce_logits(z, &labels);
                (g.value(l).item() as f64, g.backward(l).params())
            };
            sum += finite(loss, "finetune", step)?;
            n += 1;
            opt.step(&mut store, &grads)?;
            step += 1;
        }
        epoch_losses.push(sum / n.max(1) as f64);
        if !val.is_empty() {
            val_metrics.push(bound.evaluate(&store, &val, Split::Val, f.threshold)?.metrics);
        }
    }
    if test.is_empty() {
        bail!(NotEnoughData, "empty test split");
    }
    let report = FinetuneReport {
        seed: cfg.seed,
        modality: f.modality,
        freeze: f.freeze,
        n_train: train.len(),
        steps: total,
        epoch_losses,
        val: val_metrics,
        train: bound.evaluate(&store, &train, Split::Train, f.threshold)?,
        test: bound.evaluate(&store, &test, Split::Test, f.threshold)?,
        events,
    };
    Ok((store, report))
}

/// Eval-mode metrics of a fine-tuned checkpoint on one split.
pub fn evaluate(ckpt: &Store, ds: &Dataset, cfg: &RunConfig, split: Split, modality: Modality) -> Result<EvalResult> {
    let (store, calm) = Calm::from_checkpoint(ckpt, cfg, ds.vocab.len(), ds.n_classes())?;
    let idx = ds.split_indices(split);
    if idx.is_empty() {
        bail!(NotEnoughData, "empty {} split", split.as_str());
    }
    let bound = Bound { calm: &calm, ds, cache: cache_for(&calm, &store, ds, modality)?, modality };
    bound.evaluate(&store, &idx, split, cfg.finetune.threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// stages 0 to 3
    Full,
    /// stage 0, stage 2 and fine-tuning
    Stage2Only,
    /// fine-tuning from initialization
    SupervisedOnly,
}

/// Runs one pipeline variant end to end and returns the fine-tuning report.
pub fn run_pipeline(ds: &Dataset, cfg: &RunConfig, pipeline: Pipeline) -> Result<FinetuneReport> {
    let backbone = match pipeline {
        Pipeline::SupervisedOnly => None,
        Pipeline::Stage2Only => {
            let (lm, _) = stage0_lm(ds, cfg)?;
            Some(stage2_alt(ds, Some(&lm), None, cfg)?.0)
        }
        Pipeline::Full => {
            let (lm, _) = stage0_lm(ds, cfg)?;
            let (audio, _) = stage1_calp(ds, Some(&lm), cfg)?;
            Some(stage2_alt(ds, Some(&lm), Some(&audio), cfg)?.0)
        }
    };
    Ok(stage3_finetune(ds, backbone.as_ref(), cfg)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub full: Vec<f64>,
    pub stage2_only: Vec<f64>,
    pub supervised_only: Vec<f64>,
    /// fine-tuned test WA after contrastive pretraining with the configured weight
    pub alpha_on: Vec<f64>,
    /// the same with the language term removed
    pub alpha_off: Vec<f64>,
    pub retrieval_top1: Vec<f64>,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl AblationReport {
    pub fn pipeline_ordered(&self) -> bool {
        mean(&self.full) >= mean(&self.stage2_only) && mean(&self.stage2_only) >= mean(&self.supervised_only)
    }

    pub fn alpha_ordered(&self) -> bool {
        mean(&self.alpha_on) >= mean(&self.alpha_off)
    }
}

/// Per-seed configuration used by the ablation harness.
pub fn seeded(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    if cfg.ablation.vary_corpus {
        c.data.synth.seed = cfg.data.synth.seed.wrapping_add(seed);
    }
    c
}

/// Pipeline ordering and contrastive-weight comparison over the configured
/// seeds. Stage outputs are shared between variants of the same seed.
pub fn pipeline_ablation(cfg: &RunConfig) -> Result<AblationReport> {
    let mut r = AblationReport {
        seeds: cfg.ablation.seeds.clone(),
        full: vec![],
        stage2_only: vec![],
        supervised_only: vec![],
        alpha_on: vec![],
        alpha_off: vec![],
        retrieval_top1: vec![],
    };
    for &seed in &cfg.ablation.seeds {
        let c = seeded(cfg, seed);
        let ds = synth_dataset(&c)?;
        let (lm, _) = stage0_lm(&ds, &c)?;
        let (audio_on, calp_log) = stage1_calp(&ds, Some(&lm), &c)?;
        r.retrieval_top1.push(final_retrieval(&calp_log).unwrap_or(0.0));
        let (full, _) = stage2_alt(&ds, Some(&lm), Some(&audio_on), &c)?;
        let (s2, _) = stage2_alt(&ds, Some(&lm), None, &c)?;
        let mut pipe_cfg = c.clone();
        cfg.ablation.pipeline_finetune.apply(&mut pipe_cfg.finetune);
        r.full.push(stage3_finetune(&ds, Some(&full), &pipe_cfg)?.1.test.metrics.wa);
        r.stage2_only.push(stage3_finetune(&ds, Some(&s2), &pipe_cfg)?.1.test.metrics.wa);
        r.supervised_only.push(stage3_finetune(&ds, None, &pipe_cfg)?.1.test.metrics.wa);

        let mut off = c.clone();
        off.calp.alpha = 0.0;
        let (audio_off, _) = stage1_calp(&ds, None, &off)?;
        let mut audio_cfg = c.clone();
        audio_cfg.finetune.modality = cfg.ablation.alpha_modality;
        cfg.ablation.alpha_finetune.apply(&mut audio_cfg.finetune);
        r.alpha_on.push(stage3_finetune(&ds, Some(&audio_on), &audio_cfg)?.1.test.metrics.wa);
        r.alpha_off.push(stage3_finetune(&ds, Some(&audio_off), &audio_cfg)?.1.test.metrics.wa);
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSweepRow {
    pub geometry: PatchGeometry,
    pub n_patches: usize,
    pub calp_final_loss: f64,
    pub retrieval_top1: Option<f64>,
    pub test_wa: f64,
}

/// Contrastive pretraining plus audio-only fine-tuning for every configured
/// patch geometry. Robustness is reported, not asserted.
pub fn patch_sweep(cfg: &RunConfig) -> Result<Vec<PatchSweepRow>> {
    let ds = synth_dataset(cfg)?;
    let (lm, _) = stage0_lm(&ds, cfg)?;
    let mut rows = Vec::new();
    for &geometry in &cfg.ablation.geometries {
        let mut c = cfg.clone();
        c.features.patch = geometry;
        c.features.validate()?;
        if c.spectran.encoder.max_positions < c.features.n_patches() + 1 {
            c.spectran.encoder.max_positions = c.features.n_patches() + 1;
        }
        c.finetune.modality = Modality::Audio;
        let (audio, log) = stage1_calp(&ds, Some(&lm), &c)?;
        let (_, rep) = stage3_finetune(&ds, Some(&audio), &c)?;
        rows.push(PatchSweepRow {
            geometry,
            n_patches: c.features.n_patches(),
            calp_final_loss: log.tail_mean(20),
            retrieval_top1: final_retrieval(&log),
            test_wa: rep.test.metrics.wa,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
    pub passed: bool,
    /// the probe with the largest relative error
    pub worst: Option<Probe>,
}

fn perturb<R: Real>(store: &mut ParamStore<R>, seed: u64) {
    let mut rng = derive_rng(seed, "gradcheck.perturb");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += R::of(0.3 * standard_normal(&mut rng));
        }
    }
}

fn random_tensor<R: Real>(rows: usize, cols: usize, rng: &mut CoreRng) -> Tensor<R> {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| R::of(standard_normal(rng))).collect())
}

fn corrupt<R: Real>(store: &ParamStore<R>, mut grads: ParamGrads<R>) -> ParamGrads<R> {
    let ids: Vec<_> = store.ids().filter(|&id| grads.get(id).is_some()).collect();
    for id in ids {
        let g = grads.get(id).expect("checked").map(|v| v * R::of(1.5) + R::of(1e-3));
        grads.set(id, g);
    }
    grads
}

fn tiny_encoder(d: usize, max_positions: usize) -> EncoderConfig {
    EncoderConfig { n_layers: 1, d_model: d, n_heads: 2, d_ff: 2 * d, dropout_rate: 0.0, max_positions }
}

/// Finite-difference checks of the contrastive loss through the spectral
/// transformer and projections, the joint masked loss through the multimodal
/// encoder, and the emotion loss through encoder and head, at toy sizes.
pub fn gradcheck_suite<R: Real>(gc: &GradCheckConfig, seed: u64) -> Result<Vec<GradCheckEntry>> {
    let h = gc.step();
    let mut out = Vec::new();
    let mut record = |name: &str, rep: GradCheckReport| {
        let worst = rep.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).cloned();
        out.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_error: rep.max_rel_error,
            probes: rep.probes.len(),
            passed: rep.max_rel_error <= gc.tolerance,
            worst,
        });
    };
    let mut data_rng = derive_rng(seed, "gradcheck.data");

    // contrastive loss, M = 4
    {
        let mut features = FeatureConfig::default();
        features.patch = PatchGeometry::new(25, 16, 25, 16);
        let mut store = ParamStore::<R>::new();
        let st_cfg = SpecTranConfig { encoder: tiny_encoder(8, 16) };
        let spectran = SpecTran::new(&mut store, &st_cfg, &features, seed)?;
        let proj = CalpProjections::new(&mut store, 8, 6, 4, seed);
        perturb(&mut store, seed);
        let m = 4;
        let blocks: Vec<AcousticBlock> = (0..2 * m)
            .map(|b| AcousticBlock {
                values: (0..features.block_len()).map(|_| standard_normal(&mut data_rng) as f32).collect(),
                start_frame: 30 * b,
                utterance_id: String::from("toy"),
                padded: false,
            })
            .collect();
        let refs: Vec<&AcousticBlock> = blocks.iter().collect();
        let text: Tensor<R> = random_tensor(m, 6, &mut data_rng);
        let spec = CalpSpec { tau: 0.5, alpha: 0.25, include_positive: false };
        let rep = grad_check(
            &mut store,
            |s: &ParamStore<R>| {
                let mut g = Graph::new(s);
                let e = spectran.embed_blocks(&mut g, &mut Mode::eval(), &refs)?;
                let a = g.gather(e, &[0, 1, 2, 3]);
                let b = g.gather(e, &[4, 5, 6, 7]);
                let u = proj.project_audio(&mut g, a);
                let w = proj.project_audio(&mut g, b);
                let tv = g.constant(text.clone());
                let v = proj.project_language(&mut g, tv);
                let l = g.calp(u, w, v, spec);
                let grads = g.backward(l).params();
                Ok((g.value(l).item(), if gc.corrupt_gradient { corrupt(s, grads) } else { grads }))
            },
            gc.probes,
            h,
            &mut derive_rng(seed, "gradcheck.calp"),
        )?;
        record("calp_loss", rep);
    }

    // joint masked loss through the multimodal encoder
    let vocab = 12;
    // short reconstruction targets keep per-weight gradients well above roundoff
    let block_len = 48;
    let shape = MmShape { encoder: tiny_encoder(8, 16), vocab_size: vocab, d_acoustic: Some(4), block_len };
    {
        let mut store = ParamStore::<R>::new();
        let mm = MmModel::new(&mut store, shape, seed)?;
        perturb(&mut store, seed + 1);
        let mask = MaskConfig { p_lex: 0.5, p_audio: 0.4, span: 3 };
        let mut ex = Vec::new();
        for (nt, na) in [(4usize, 3usize), (3, 4)] {
            let toks: Vec<u32> = (0..nt).map(|_| data_rng.gen_range(5..vocab as u32)).collect();
            let x = assemble(&toks, random_tensor::<R>(na, 4, &mut data_rng))?;
            let blocks: Vec<Vec<f32>> = (0..na).map(|_| (0..block_len).map(|_| standard_normal(&mut data_rng) as f32).collect()).collect();
            let b: Vec<&[f32]> = blocks.iter().map(|v| v.as_slice()).collect();
            let mut e = apply_masks(&x, &b, &mask, &mut data_rng)?;
            // guarantee both terms are present
            if e.plan.lexical.is_empty() {
                e.plan.lexical.push(1);
                e.plan.lexical_targets.push(x.lexical[1]);
                e.input.lexical[1] = crate::corpus::MASK;
            }
            if e.plan.acoustic.is_empty() {
                e.plan.acoustic.push(0);
                e.plan.acoustic_targets.push(blocks[0].clone());
                e.input.acoustic_zeroed[0] = true;
            }
            ex.push(e);
        }
        let refs: Vec<&MaskedExample<R>> = ex.iter().collect();
        let rep = grad_check(
            &mut store,
            |s: &ParamStore<R>| {
                let mut g = Graph::new(s);
                let l = mm.alt_loss(&mut g, &mut Mode::eval(), &refs)?;
                let grads = g.backward(l.total).params();
                Ok((g.value(l.total).item(), if gc.corrupt_gradient { corrupt(s, grads) } else { grads }))
            },
            gc.probes,
            h,
            &mut derive_rng(seed, "gradcheck.alt"),
        )?;
        record("alt_loss", rep);
    }

    // emotion loss through encoder and head
    {
        let mut store = ParamStore::<R>::new();
        let mm = MmModel::new(&mut store, shape, seed)?;
        let head = EmotionHead::new(&mut store, "emotion", 8, 3, seed);
        perturb(&mut store, seed + 2);
        let inputs: Vec<MultimodalInput<R>> = (0..3)
            .map(|k| assemble(&[5 + k as u32, 7], random_tensor::<R>(2 + k, 4, &mut data_rng)))
            .collect::<Result<_>>()?;
        let refs: Vec<&MultimodalInput<R>> = inputs.iter().collect();
        let labels: Vec<R> = (0..9).map(|i| R::of(((i * 7) % 3 == 0) as u8 as f64)).collect();
        let rep = grad_check(
            &mut store,
            |s: &ParamStore<R>| {
                let mut g = Graph::new(s);
                let c = mm.cls(&mut g, &mut Mode::eval(), &refs)?;
                let z = head.forward(&mut g, c);
                let l = g.bce_logits(z, &labels);
                let grads = g.backward(l).params();
                Ok((g.value(l).item(), if gc.corrupt_gradient { corrupt(s, grads) } else { grads }))
            },
            gc.probes,
            h,
            &mut derive_rng(seed, "gradcheck.bce"),
        )?;
        record("bce_loss", rep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Precision;

    fn small(n: usize) -> RunConfig {
        let mut c = RunConfig::tiny();
        c.data.synth.n_utterances = n;
        c.lm.steps = 40;
        c.calp.steps = 20;
        c.calp.batch_size = 8;
        c.calp.eval_interval = 10;
        c.calp.eval_batches = 2;
        c.alt.steps = 20;
        c.finetune.steps = Some(20);
        c
    }

    #[test]
    fn sampler_visits_every_item_once_per_pass() {
        let mut s = Sampler::new((0..10).collect(), derive_rng(0, "t"));
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn language_pretraining_learns_and_is_deterministic() {
        let mut c = small(60);
        c.lm.steps = 120;
        let ds = synth_dataset(&c).unwrap();
        let (a, la) = stage0_lm(&ds, &c).unwrap();
        let (b, lb) = stage0_lm(&ds, &c).unwrap();
        assert_eq!(la.loss, lb.loss);
        assert_eq!(a, b);
        let uniform = (ds.vocab.len() as f64).ln();
        assert!(la.tail_mean(20) < uniform - 0.3, "{} vs {uniform}", la.tail_mean(20));
        assert!(mlm_eval(&a, &ds, &c, Split::Train).unwrap() < uniform);
    }

    #[test]
    fn zero_steps_leave_initialization() {
        let mut c = small(60);
        c.lm.steps = 0;
        let ds = synth_dataset(&c).unwrap();
        let (trained, log) = stage0_lm(&ds, &c).unwrap();
        assert!(log.loss.is_empty());
        let mut fresh = Store::new();
        MmModel::new(&mut fresh, mm_shape(&c, ds.vocab.len(), false), c.seed).unwrap();
        assert_eq!(trained, fresh);
    }

    #[test]
    fn contrastive_stage_checks_inputs_and_logs_retrieval() {
        let c = small(60);
        let ds = synth_dataset(&c).unwrap();
        assert!(stage1_calp(&ds, None, &c).is_err());
        let mut off = c.clone();
        off.calp.alpha = 0.0;
        let (_, log) = stage1_calp(&ds, None, &off).unwrap();
        assert_eq!(log.loss.len(), 20);
        assert!(final_retrieval(&log).is_none());
        let (lm, _) = stage0_lm(&ds, &c).unwrap();
        let (store, log) = stage1_calp(&ds, Some(&lm), &c).unwrap();
        let r = final_retrieval(&log).unwrap();
        assert!((0.0..=1.0).contains(&r));
        assert!(store.iter().all(|(n, _)| n.starts_with("spectran.") || n.starts_with("calp.")));
        let mut big = c.clone();
        big.calp.batch_size = 1000;
        assert!(matches!(stage1_calp(&ds, Some(&lm), &big), Err(crate::error::CoreError::NotEnoughData(_))));
    }

    #[test]
    fn joint_stage_reports_both_curves_and_audio_only_masking() {
        let c = small(60);
        let ds = synth_dataset(&c).unwrap();
        let (lm, _) = stage0_lm(&ds, &c).unwrap();
        let (store, log) = stage2_alt(&ds, Some(&lm), None, &c).unwrap();
        assert!(log.curves.contains_key("mlm") && log.curves.contains_key("mam"));
        // the stage starts from the language model outside the fresh modules
        let shared = "mm.embeddings.token";
        assert_ne!(store.by_name(shared), lm.by_name(shared), "token table should train");
        let mut audio_only = c.clone();
        audio_only.alt.p_lex = 0.0;
        let (_, log) = stage2_alt(&ds, Some(&lm), None, &audio_only).unwrap();
        assert!(!log.curves.contains_key("mlm"));
        assert_eq!(log.curves["mam"].len(), 20);
    }

    #[test]
    fn frozen_finetune_only_moves_the_head() {
        let mut c = small(60);
        c.finetune.freeze = true;
        c.finetune.lr = 1e-2;
        let ds = synth_dataset(&c).unwrap();
        let (lm, _) = stage0_lm(&ds, &c).unwrap();
        let (backbone, _) = stage2_alt(&ds, Some(&lm), None, &c).unwrap();
        let (tuned, report) = stage3_finetune(&ds, Some(&backbone), &c).unwrap();
        for (name, t) in backbone.iter() {
            assert_eq!(tuned.by_name(name), Some(t), "{name} changed");
        }
        let head_moved = tuned.iter().filter(|(n, _)| n.starts_with("head.")).count();
        assert!(head_moved > 0);
        assert_eq!(report.steps, 20);
        assert!(!report.val.is_empty());
    }

    #[test]
    fn backbone_with_other_label_count_is_rejected() {
        let c = small(60);
        let ds = synth_dataset(&c).unwrap();
        let mut other = Store::new();
        Calm::build(&mut other, &c, ds.vocab.len(), ds.n_classes() + 1).unwrap();
        assert!(stage3_finetune(&ds, Some(&other), &c).is_err());
    }

    #[test]
    fn small_training_set_is_memorized() {
        let mut c = small(40);
        c.finetune.steps = Some(500);
        c.finetune.lr = 3e-3;
        c.finetune.freeze = false;
        let ds = synth_dataset(&c).unwrap();
        assert_eq!(ds.split_indices(Split::Train).len(), 32);
        let (_, report) = stage3_finetune(&ds, None, &c).unwrap();
        assert!(report.train.metrics.wa >= 0.95, "{:?}", report.train.metrics);
    }

    #[test]
    fn evaluation_is_repeatable_and_modality_aware() {
        let c = small(60);
        let ds = synth_dataset(&c).unwrap();
        let (store, report) = stage3_finetune(&ds, None, &c).unwrap();
        let a = evaluate(&store, &ds, &c, Split::Test, Modality::Both).unwrap();
        let b = evaluate(&store, &ds, &c, Split::Test, Modality::Both).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics, report.test.metrics);
        let t = evaluate(&store, &ds, &c, Split::Test, Modality::Text).unwrap();
        assert_eq!(t.modality, Modality::Text);
        assert_eq!(t.counts.n_samples(), a.counts.n_samples());
    }

    #[test]
    fn supervision_subset_is_stratified_and_deterministic() {
        let c = small(120);
        let ds = synth_dataset(&c).unwrap();
        let train = ds.split_indices(Split::Train);
        assert_eq!(stratified_subset(&ds, &train, 1.0, 0), train);
        let a = stratified_subset(&ds, &train, 0.2, 3);
        assert_eq!(a, stratified_subset(&ds, &train, 0.2, 3));
        assert!(a.len() < train.len() / 3);
        for k in 0..ds.n_classes() {
            assert!(a.iter().any(|&i| ds.utterances[i].labels[k] > 0.5), "class {k} missing");
        }
    }

    #[test]
    fn gradient_suite_passes_and_catches_corruption() {
        let gc = GradCheckConfig::default();
        let r64 = gradcheck_suite::<f64>(&gc, 0).unwrap();
        assert_eq!(r64.len(), 3);
        for e in &r64 {
            assert!(e.passed, "{e:?}");
        }
        let bad = gradcheck_suite::<f64>(&GradCheckConfig { corrupt_gradient: true, ..gc }, 0).unwrap();
        assert!(bad.iter().all(|e| !e.passed));
        let r32 = gradcheck_suite::<f32>(&GradCheckConfig { precision: Precision::F32, ..gc }, 0).unwrap();
        let worst = |r: &[GradCheckEntry]| r.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
        assert!(worst(&r64) < worst(&r32));
    }
}
