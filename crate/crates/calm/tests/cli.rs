//! The command-line driver end to end on a small synthetic corpus written to disk.

use std::fs;
use std::path::{Path, PathBuf};

use calm::cli::main_with_args;
use calm::report::read_report;

const SMALL: &str = r#"{
    "data": {"synth": {"n_utterances": 60}},
    "lm": {"steps": 20},
    "calp": {"steps": 20, "batch_size": 8, "eval_interval": 10, "eval_batches": 2},
    "alt": {"steps": 10},
    "finetune": {"steps": 20}
}"#;

struct Run {
    root: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new(config: &str) -> Run {
        let root = tempfile::tempdir().unwrap();
        let path = root.path().join("config.json");
        fs::write(&path, config).unwrap();
        Run { root, config: path }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn calm(&self, out: &str, args: &[&str]) -> i32 {
        let out = self.dir(out);
        let mut argv = vec!["calm", "--preset", "tiny", "--config", self.config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        argv.extend_from_slice(args);
        main_with_args(argv)
    }
}

fn with_manifest(manifest: &Path, cache: &Path) -> String {
    let mut v: serde_json::Value = serde_json::from_str(SMALL).unwrap();
    v["data"]["manifest"] = manifest.to_str().unwrap().into();
    v["data"]["feature_cache"] = cache.to_str().unwrap().into();
    v.to_string()
}

#[test]
fn staged_pipeline_from_a_manifest_on_disk() {
    let synth = Run::new(SMALL);
    assert_eq!(synth.calm("synth", &["synth"]), 0);
    let manifest = synth.dir("synth").join("manifest.jsonl");
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 60);
    assert_eq!(fs::read_dir(synth.dir("synth").join("audio")).unwrap().count(), 60);
    let report = read_report(&synth.dir("synth").join("report.json")).unwrap();
    assert_eq!(report.result["splits"], serde_json::json!({"train": 48, "val": 6, "test": 6}));

    let run = Run::new(&with_manifest(&manifest, &synth.dir("cache")));
    assert_eq!(run.calm("lm", &["pretrain-lm"]), 0);
    assert_eq!(fs::read_dir(synth.dir("cache")).unwrap().count(), 60, "one feature cache per utterance");
    assert_eq!(run.calm("calp", &["pretrain-calp", "--lm", run.dir("lm").to_str().unwrap()]), 0);
    let (lm, calp) = (run.dir("lm"), run.dir("calp"));
    assert_eq!(run.calm("alt", &["pretrain-alt", "--lm", lm.to_str().unwrap(), "--calp", calp.to_str().unwrap()]), 0);
    assert_eq!(run.calm("ft", &["finetune", "--backbone", run.dir("alt").to_str().unwrap()]), 0);
    assert_eq!(run.calm("eval", &["eval", "--checkpoint", run.dir("ft").to_str().unwrap(), "--split", "test"]), 0);

    for stage in ["lm", "calp", "alt", "ft"] {
        let d = run.dir(stage);
        for f in ["report.json", "config.resolved.json", "checkpoint/index.json", "checkpoint/tensors.bin", "checkpoint/vocab.txt", "checkpoint/config.json"] {
            assert!(d.join(f).exists(), "{stage}/{f}");
        }
        let r = read_report(&d.join("report.json")).unwrap();
        assert!(r.checkpoint_id.is_some() && r.config_hash.len() == 64 && r.wall_clock_seconds >= 0.0);
    }
    let lm_vocab = fs::read_to_string(run.dir("lm/checkpoint/vocab.txt")).unwrap();
    assert_eq!(fs::read_to_string(run.dir("ft/checkpoint/vocab.txt")).unwrap(), lm_vocab);
    let calp = read_report(&run.dir("calp/report.json")).unwrap();
    assert!(calp.result["retrieval_top1"].is_number());
    let ft = read_report(&run.dir("ft/report.json")).unwrap();
    let eval = read_report(&run.dir("eval/report.json")).unwrap();
    assert_eq!(eval.result["evaluation"]["metrics"], ft.result["test"]["metrics"]);
    assert_eq!(eval.result["checkpoint"], serde_json::json!(ft.checkpoint_id.unwrap()));
}

#[test]
fn flags_and_failures_map_to_exit_codes() {
    let run = Run::new(SMALL);
    assert_eq!(run.calm("gc", &["gradcheck"]), 0);
    let r = read_report(&run.dir("gc/report.json")).unwrap();
    assert_eq!(r.result["passed"], true);
    assert_eq!(run.calm("gc-bad", &["gradcheck", "--corrupt-gradient"]), 1);
    assert_eq!(read_report(&run.dir("gc-bad/report.json")).unwrap().result["passed"], false);
    // the language weight needs a language model
    assert_eq!(run.calm("calp", &["pretrain-calp"]), 2);
    assert_eq!(run.calm("x", &["eval", "--checkpoint", run.dir("missing").to_str().unwrap()]), 2);
    assert_eq!(run.calm("x", &["no-such-command"]), 2);
    assert_eq!(run.calm("x", &["finetune", "--supervision-fraction", "0"]), 2);

    assert_eq!(run.calm("seeded", &["--seed", "11", "gradcheck"]), 0);
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.dir("seeded/config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 11);
    assert_eq!(resolved["calp"]["batch_size"], 8);
}

#[test]
fn finetune_modalities_and_frozen_backbone() {
    let run = Run::new(SMALL);
    assert_eq!(run.calm("lm", &["pretrain-lm"]), 0);
    assert_eq!(run.calm("alt", &["pretrain-alt", "--lm", run.dir("lm").to_str().unwrap()]), 0);
    let frozen_cfg = Run::new(&SMALL.replace(r#""finetune": {"steps": 20}"#, r#""finetune": {"steps": 20, "freeze": true}"#));
    let out = run.dir("frozen");
    let code = main_with_args([
        "calm", "--preset", "tiny", "--config", frozen_cfg.config.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "finetune", "--backbone", run.dir("alt").to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let before = calm::checkpoint::load(&run.dir("alt/checkpoint")).unwrap();
    let after = calm::checkpoint::load(&out.join("checkpoint")).unwrap();
    for (name, t) in before.store.iter() {
        assert_eq!(after.store.by_name(name), Some(t), "{name} changed under a frozen backbone");
    }
    for modality in ["audio", "text"] {
        let name = format!("ft-{modality}");
        assert_eq!(run.calm(&name, &["finetune", "--modality", modality, "--unfreeze", "--steps", "5"]), 0);
        let r = read_report(&run.dir(&name).join("report.json")).unwrap();
        assert_eq!(r.result["modality"], modality);
        assert_eq!(r.result["freeze"], false);
        assert_eq!(r.result["steps"], 5);
    }
}

#[test]
fn bad_manifests_and_audio_are_reported() {
    let run = Run::new(SMALL);
    let dir = run.dir("data");
    fs::create_dir_all(&dir).unwrap();
    let manifest = dir.join("m.jsonl");
    fs::write(
        &manifest,
        r#"{"id":"a","audio_path":"a.wav","transcript":"hi","labels":{"happiness":1},"split":"train"}
{"id":"b","audio_path":"b.wav","transcript":"hi","labels":{"happiness":1},"split":"holdout"}
"#,
    )
    .unwrap();
    let err = calm::manifest::load_manifest(&manifest).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");

    // an 8 kHz file is rejected when the corpus is loaded
    fs::write(&manifest, r#"{"id":"a","audio_path":"a.wav","transcript":"hi","labels":{"happiness":1},"split":"train"}"#).unwrap();
    let spec = hound::WavSpec { sample_rate: 8000, ..calm::audio::spec() };
    let mut w = hound::WavWriter::create(dir.join("a.wav"), spec).unwrap();
    for _ in 0..8000 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let mut cfg = calm_core::config::RunConfig::tiny();
    cfg.data.manifest = Some(manifest.to_str().unwrap().to_string());
    let err = calm::data::load_dataset(&cfg, None).unwrap_err().to_string();
    assert!(err.contains("16 kHz"), "{err}");
}
