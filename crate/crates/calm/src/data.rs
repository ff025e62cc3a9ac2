//! Dataset loading from a manifest on disk or from the synthetic generator.

use std::fs;
use std::path::{Path, PathBuf};

use calm_core::config::RunConfig;
use calm_core::corpus::{synth_corpus, ManifestRecord, Vocab};
use calm_core::features::log_mel;
use calm_core::train::{label_order, prepare_dataset, prepare_from_log_mels};
use calm_core::corpus::Dataset;

use crate::audio::{read_wav, write_wav};
use crate::error::{io_err, Result};
use crate::{cache, manifest};

pub const MANIFEST: &str = "manifest.jsonl";

/// Loads the configured corpus. A given vocabulary (e.g. from an upstream
/// checkpoint) is reused so token ids stay consistent across stages.
pub fn load_dataset(cfg: &RunConfig, vocab: Option<Vocab>) -> Result<Dataset> {
    match &cfg.data.manifest {
        Some(path) => load_manifest_dataset(Path::new(path), cfg, vocab),
        None => {
            let corpus = synth_corpus(&cfg.data.synth)?;
            let names: Vec<String> = corpus[0].record.labels.keys().cloned().collect();
            let records: Vec<ManifestRecord> = corpus.iter().map(|u| u.record.clone()).collect();
            let audio: Vec<Vec<f32>> = corpus.into_iter().map(|u| u.samples).collect();
            Ok(prepare_dataset(&records, &label_order(&names), &audio, &cfg.features, vocab, cfg.data.vocab_min_count)?)
        }
    }
}

fn load_manifest_dataset(path: &Path, cfg: &RunConfig, vocab: Option<Vocab>) -> Result<Dataset> {
    let m = manifest::load_manifest(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let cache_dir = cfg.data.feature_cache.as_ref().map(PathBuf::from);
    if let Some(d) = &cache_dir {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut mels = Vec::with_capacity(m.records.len());
    for r in &m.records {
        let cached = cache_dir.as_ref().map(|d| d.join(format!("{}.feat", r.id)));
        let lm = match &cached {
            Some(p) if p.exists() => cache::read(p, &cfg.features)?,
            _ => {
                let lm = log_mel(&read_wav(&base.join(&r.audio_path))?, &cfg.features)?;
                if let Some(p) = &cached {
                    cache::write(p, &lm)?;
                }
                lm
            }
        };
        mels.push(lm);
    }
    Ok(prepare_from_log_mels(&m.records, &m.label_names, mels, &cfg.features, vocab, cfg.data.vocab_min_count)?)
}

/// Writes the synthetic corpus as a manifest plus WAV files; returns the
/// manifest path.
pub fn write_synth(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(io_err(&audio_dir))?;
    let corpus = synth_corpus(&cfg.data.synth)?;
    let mut records = Vec::with_capacity(corpus.len());
    for u in &corpus {
        let mut r = u.record.clone();
        r.audio_path = format!("audio/{}.wav", r.id);
        write_wav(&dir.join(&r.audio_path), &u.samples)?;
        records.push(r);
    }
    let path = dir.join(MANIFEST);
    manifest::write_manifest(&path, &records)?;
    Ok(path)
}
