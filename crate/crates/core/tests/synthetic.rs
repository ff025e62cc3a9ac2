//! Behavior of the training stages on the synthetic corpus.

use calm_core::config::{Modality, RunConfig};
use calm_core::corpus::{synth_corpus, Split, SynthConfig, TextMode};
use calm_core::features::{log_mel, FeatureConfig};
use calm_core::train::{evaluate, stage0_lm, stage2_alt, stage3_finetune, synth_dataset};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn nearest_centroid_on_mean_log_mel_separates_two_classes() {
    let cfg = SynthConfig { n_classes: 2, snr_db: 30.0, n_utterances: 200, ..SynthConfig::default() };
    let fc = FeatureConfig::default();
    let corpus = synth_corpus(&cfg).unwrap();
    let feats: Vec<Vec<f64>> = corpus.iter().map(|u| log_mel(&u.samples, &fc).unwrap().mean_frame()).collect();
    let mut centroids = vec![vec![0.0; 64]; 2];
    let mut counts = [0usize; 2];
    for (u, f) in corpus.iter().zip(&feats) {
        if u.record.split == Split::Train {
            counts[u.class] += 1;
            centroids[u.class].iter_mut().zip(f).for_each(|(c, v)| *c += v);
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let held: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].record.split != Split::Train).collect();
    let correct = held
        .iter()
        .filter(|&&i| {
            let pred = if dist(&feats[i], &centroids[0]) <= dist(&feats[i], &centroids[1]) { 0 } else { 1 };
            pred == corpus[i].class
        })
        .count();
    assert!(correct as f64 / held.len() as f64 >= 0.95, "{correct}/{}", held.len());
}

#[test]
fn masked_audio_modeling_alone_reduces_its_loss() {
    let mut cfg = RunConfig::tiny();
    cfg.data.synth.n_utterances = 120;
    cfg.lm.steps = 50;
    cfg.alt.steps = 200;
    cfg.alt.p_lex = 0.0;
    let ds = synth_dataset(&cfg).unwrap();
    let (lm, _) = stage0_lm(&ds, &cfg).unwrap();
    let (_, log) = stage2_alt(&ds, Some(&lm), None, &cfg).unwrap();
    assert!(!log.curves.contains_key("mlm"));
    let mam: Vec<f64> = log.curves["mam"].iter().map(|p| p.1).collect();
    assert!(mean(&mam[180..]) < mean(&mam[..20]), "{} vs {}", mean(&mam[180..]), mean(&mam[..20]));
}

#[test]
fn training_language_model_beats_uniform_baseline() {
    let mut cfg = RunConfig::tiny();
    cfg.lm.steps = 200;
    let ds = synth_dataset(&cfg).unwrap();
    let (_, log) = stage0_lm(&ds, &cfg).unwrap();
    assert!(log.tail_mean(20) < (ds.vocab.len() as f64).ln());
}

#[test]
fn one_fifth_of_the_labels_still_beats_chance_by_twenty_points() {
    let mut cfg = RunConfig::tiny();
    cfg.finetune.supervision_fraction = 0.2;
    cfg.finetune.lr = 3e-3;
    cfg.finetune.steps = Some(300);
    let ds = synth_dataset(&cfg).unwrap();
    let (_, report) = stage3_finetune(&ds, None, &cfg).unwrap();
    assert!(report.n_train < 80);
    assert!(report.test.metrics.wa >= 0.7, "{:?}", report.test.metrics);
}

#[test]
fn decoupled_text_carries_no_label_information() {
    let mut cfg = RunConfig::tiny();
    cfg.data.synth.text_mode = TextMode::Decoupled;
    cfg.finetune.modality = Modality::Text;
    cfg.finetune.lr = 3e-3;
    let ds = synth_dataset(&cfg).unwrap();
    let (store, _) = stage3_finetune(&ds, None, &cfg).unwrap();
    let wa = evaluate(&store, &ds, &cfg, Split::Test, Modality::Text).unwrap().metrics.wa;
    assert!((wa - 0.5).abs() <= 0.1, "{wa}");
}

#[test]
fn both_modalities_match_or_beat_either_alone() {
    let mut cfg = RunConfig::tiny();
    cfg.finetune.lr = 3e-3;
    let ds = synth_dataset(&cfg).unwrap();
    let (store, _) = stage3_finetune(&ds, None, &cfg).unwrap();
    let wa = |m| evaluate(&store, &ds, &cfg, Split::Test, m).unwrap().metrics.wa;
    let (both, audio, text) = (wa(Modality::Both), wa(Modality::Audio), wa(Modality::Text));
    assert!(both >= audio && both >= text, "both {both} audio {audio} text {text}");
}
