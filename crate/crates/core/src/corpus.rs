//! Manifest records, vocabulary, tokenization and the synthetic paired
//! audio-text corpus.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::features::AcousticBlock;
use crate::rng::{derive_rng, shuffle, standard_normal, CoreRng};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One manifest line. Labels hold raw values (Likert 0–3 or binary); they are
/// binarized when the manifest is loaded, never written back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub audio_path: String,
    pub transcript: String,
    pub labels: BTreeMap<String, f64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// label names in the column order used by every label vector
    pub label_names: Vec<String>,
}

/// An emotion is present iff its score is nonzero.
pub fn binarize(value: f64) -> f64 {
    if value > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl Manifest {
    /// Validates records given with their 1-based source line numbers.
    pub fn from_records(records: Vec<(usize, ManifestRecord)>) -> Result<Manifest> {
        let mut ids = BTreeSet::new();
        let mut label_names: Option<Vec<String>> = None;
        for (line, r) in &records {
            if r.id.is_empty() {
                bail!(InvalidInput, "line {line}: empty id");
            }
            if !ids.insert(r.id.clone()) {
                bail!(InvalidInput, "line {line}: duplicate id `{}`", r.id);
            }
            for (k, &v) in &r.labels {
                if !(0.0..=3.0).contains(&v) {
                    bail!(InvalidInput, "line {line}: label `{k}` = {v} outside [0, 3]");
                }
            }
            let keys: Vec<String> = r.labels.keys().cloned().collect();
            match &label_names {
                None => label_names = Some(keys),
                Some(k) if *k != keys => {
                    bail!(InvalidInput, "line {line}: label keys {:?} differ from {:?}", keys, k)
                }
                _ => {}
            }
        }
        let label_names = label_names.unwrap_or_default();
        Ok(Manifest { records: records.into_iter().map(|(_, r)| r).collect(), label_names })
    }

    pub fn label_vector(&self, r: &ManifestRecord) -> Vec<f32> {
        self.label_names.iter().map(|k| binarize(r.labels[k]) as f32).collect()
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.split).or_insert(0) += 1;
        }
        m
    }
}

/// Lowercases and splits on anything that is not alphanumeric or an apostrophe.
/// Punctuation never forms a token; digits are kept as ordinary characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(core::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Tokens with count ≥ `min_count`, most frequent first (ties by token),
    /// after the five specials.
    pub fn build<S: AsRef<str>>(transcripts: &[S], min_count: usize) -> Result<Vocab> {
        if min_count == 0 {
            bail!(Config, "min_count must be at least 1");
        }
        if transcripts.is_empty() {
            bail!(NotEnoughData, "empty corpus");
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in transcripts {
            for tok in tokenize(t.as_ref()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(t, c)| *c >= min_count && !SPECIALS.contains(&t.as_str())).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(t, _)| t)).collect();
        Vocab::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(|t| t.as_str()) != Some(*s) {
                bail!(InvalidInput, "vocabulary must start with {:?}", SPECIALS);
            }
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                bail!(InvalidInput, "duplicate vocabulary token `{t}`");
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Out-of-vocabulary tokens map to `[UNK]`; no `[CLS]`/`[SEP]` are added.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t).filter(|&i| i >= 5).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).unwrap_or(SPECIALS[UNK as usize]).to_string()).collect()
    }
}

/// Corpus record ready for training: tokens, binary labels and acoustic blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub token_ids: Vec<u32>,
    pub labels: Vec<f32>,
    pub split: Split,
    pub blocks: Vec<AcousticBlock>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub label_names: Vec<String>,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len()).filter(|&i| self.utterances[i].split == split).collect()
    }
}

pub const EMOTIONS: [&str; 8] = ["happiness", "sadness", "anger", "fear", "disgust", "surprise", "neutral", "contempt"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    /// transcripts come from the utterance's class template pool
    ClassInformative,
    /// transcripts come from one pool shared by all classes
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_utterances: usize,
    pub n_classes: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub text_mode: TextMode,
    pub templates_per_class: usize,
    pub n_speakers: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub filler_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_utterances: 400,
            n_classes: 6,
            snr_db: 10.0,
            seed: 0,
            text_mode: TextMode::ClassInformative,
            templates_per_class: 4,
            n_speakers: 12,
            min_seconds: 1.5,
            max_seconds: 3.0,
            filler_prob: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub record: ManifestRecord,
    pub samples: Vec<f32>,
    pub class: usize,
    pub template: usize,
    pub speaker: usize,
}

const N_BANDS: usize = 32;
const SAMPLE_RATE: f64 = 16_000.0;
const FUNCTION_WORDS: [&str; 12] =
    ["i", "really", "the", "was", "so", "that", "it", "we", "felt", "today", "just", "about"];
const FILLERS: [&str; 5] = ["um", "uh", "like", "well", "yeah"];
const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn band_hz(b: usize) -> f64 {
    200.0 * libm::pow(6400.0 / 200.0, b as f64 / (N_BANDS - 1) as f64)
}

fn fixed_rng(label: &str, idx: usize) -> CoreRng {
    derive_rng(0x5EED_CA11 + idx as u64, label)
}

fn pick_bands(rng: &mut CoreRng, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..N_BANDS).collect();
    shuffle(rng, &mut all);
    let mut v = all[..k].to_vec();
    v.sort_unstable();
    v
}

/// Seed-independent spectral prototype of a class: three mel-spread bands.
pub fn class_bands(n_classes: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for c in 0..n_classes {
        let mut rng = fixed_rng("class-prototype", c);
        let mut bands = pick_bands(&mut rng, 3);
        while out.contains(&bands) {
            bands = pick_bands(&mut rng, 3);
        }
        out.push(bands);
    }
    out
}

fn pseudo_word(rng: &mut CoreRng) -> String {
    let syl = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syl {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    w
}

/// Template `k` of class `c` as a word sequence; seed-independent.
pub fn template_words(c: usize, k: usize) -> Vec<String> {
    let mut kw_rng = fixed_rng("class-keywords", c);
    let keywords: Vec<String> = (0..6).map(|_| format!("{}{}", pseudo_word(&mut kw_rng), c)).collect();
    let mut rng = fixed_rng("template", c * 1000 + k);
    let len = rng.gen_range(5..=7);
    let n_kw = rng.gen_range(2..=3);
    let mut words: Vec<String> =
        (0..len - n_kw).map(|_| FUNCTION_WORDS[rng.gen_range(0..FUNCTION_WORDS.len())].to_string()).collect();
    for _ in 0..n_kw {
        let pos = rng.gen_range(0..=words.len());
        words.insert(pos, keywords[rng.gen_range(0..keywords.len())].clone());
    }
    words
}

fn add_band(buf: &mut [f64], hz: f64, amp: f64, rng: &mut CoreRng) {
    let phase = rng.gen::<f64>() * core::f64::consts::TAU;
    let am_rate = 2.0 + 3.0 * rng.gen::<f64>();
    let am_phase = rng.gen::<f64>() * core::f64::consts::TAU;
    let w = core::f64::consts::TAU * hz / SAMPLE_RATE;
    let wa = core::f64::consts::TAU * am_rate / SAMPLE_RATE;
    for (n, s) in buf.iter_mut().enumerate() {
        let env = 1.0 + 0.3 * libm::sin(wa * n as f64 + am_phase);
        *s += amp * env * libm::sin(w * n as f64 + phase);
    }
}

/// Deterministic paired corpus. Each utterance carries a class prototype,
/// a template signature matching its transcript, a speaker timbre shared by
/// all utterances of that speaker, and white noise at `snr_db`.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<SynthUtterance>> {
    if cfg.n_classes < 2 {
        bail!(Config, "n_classes must be at least 2");
    }
    if cfg.n_utterances < cfg.n_classes {
        bail!(Config, "n_utterances {} < n_classes {}", cfg.n_utterances, cfg.n_classes);
    }
    if !cfg.snr_db.is_finite() {
        bail!(Config, "snr_db must be finite");
    }
    if cfg.templates_per_class == 0 || cfg.n_speakers == 0 {
        bail!(Config, "templates_per_class and n_speakers must be positive");
    }
    if !(cfg.min_seconds >= 0.05 && cfg.max_seconds >= cfg.min_seconds) {
        bail!(Config, "invalid duration range {}..{}", cfg.min_seconds, cfg.max_seconds);
    }
    let n = cfg.n_utterances;
    let names: Vec<String> = (0..cfg.n_classes)
        .map(|c| if c < EMOTIONS.len() { EMOTIONS[c].to_string() } else { format!("class{c}") })
        .collect();
    let prototypes = class_bands(cfg.n_classes);
    let n_templates = cfg.n_classes * cfg.templates_per_class;
    let template_bands: Vec<Vec<usize>> =
        (0..n_templates).map(|t| pick_bands(&mut fixed_rng("template-signature", t), 2)).collect();
    let speaker_bands: Vec<Vec<usize>> =
        (0..cfg.n_speakers).map(|s| pick_bands(&mut fixed_rng("speaker-timbre", s), 2)).collect();
    let speaker_tilt: Vec<f64> = (0..cfg.n_speakers)
        .map(|s| {
            let mut r = fixed_rng("speaker-tilt", s);
            0.6 + 0.8 * r.gen::<f64>()
        })
        .collect();

    let mut rng = derive_rng(cfg.seed, "synth");
    let mut classes: Vec<usize> = (0..n).map(|i| i % cfg.n_classes).collect();
    shuffle(&mut rng, &mut classes);
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut rng, &mut order);
    let n_hold = n / 10;
    let mut split = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_hold {
            split[i] = Split::Test;
        } else if rank < 2 * n_hold {
            split[i] = Split::Val;
        }
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let c = classes[i];
        let template = match cfg.text_mode {
            TextMode::ClassInformative => c * cfg.templates_per_class + rng.gen_range(0..cfg.templates_per_class),
            TextMode::Decoupled => rng.gen_range(0..n_templates),
        };
        let speaker = rng.gen_range(0..cfg.n_speakers);
        let seconds = cfg.min_seconds + (cfg.max_seconds - cfg.min_seconds) * rng.gen::<f64>();
        let n_samples = (seconds * SAMPLE_RATE) as usize;

        let mut sig = vec![0.0f64; n_samples];
        for &b in &prototypes[c] {
            add_band(&mut sig, band_hz(b), 1.0, &mut rng);
        }
        for &b in &template_bands[template] {
            add_band(&mut sig, band_hz(b), 0.7, &mut rng);
        }
        for (j, &b) in speaker_bands[speaker].iter().enumerate() {
            let amp = if j == 0 { speaker_tilt[speaker] } else { 1.6 - speaker_tilt[speaker] };
            add_band(&mut sig, band_hz(b), amp, &mut rng);
        }
        let rms = libm::sqrt(sig.iter().map(|v| v * v).sum::<f64>() / n_samples.max(1) as f64).max(1e-12);
        let gain = 0.1 / rms;
        let noise_rms = 0.1 / libm::pow(10.0, cfg.snr_db / 20.0);
        let samples: Vec<f32> = sig
            .iter()
            .map(|v| {
                let x = v * gain + noise_rms * standard_normal(&mut rng);
                (x.clamp(-1.0, 1.0)) as f32
            })
            .collect();

        let (tc, tk) = (template / cfg.templates_per_class, template % cfg.templates_per_class);
        let mut words = template_words(tc, tk);
        let mut j = 0;
        while j <= words.len() {
            if rng.gen::<f64>() < cfg.filler_prob {
                words.insert(j, FILLERS[rng.gen_range(0..FILLERS.len())].to_string());
                j += 1;
            }
            j += 1;
        }
        let transcript = words.join(" ");
        let id = format!("utt{i:05}");
        let labels = names.iter().enumerate().map(|(k, nm)| (nm.clone(), if k == c { 1.0 } else { 0.0 })).collect();
        out.push(SynthUtterance {
            record: ManifestRecord { audio_path: format!("audio/{id}.wav"), id, transcript, labels, split: split[i] },
            samples,
            class: c,
            template,
            speaker,
        });
    }
    Ok(out)
}
