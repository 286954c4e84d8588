use std::collections::BTreeMap;
use std::f32::consts::PI;

use unitprompt::datasets::{build_dataset, group_tasks, load_manifest, ManifestEntry, SegmentOptions, SegmentedDataset, Split};
use unitprompt::featio::{load_wav, logmel, read_features, write_features, write_wav, AudioBuffer, FeatureConfig, SAMPLE_RATE};
use unitprompt::inference::{predict_segments, score, SegmentPrediction, VotingConfig};
use unitprompt::prompts::{compose, init_pool, PromptLengths, PromptMode, TaskSpec};
use unitprompt::quantizer::{kmeans_fit, write_codebook, KMeansOptions};
use unitprompt::trainer::Verbalizers;
use unitprompt::ulm::{forward, init_backbone, with_bos, Readout, UlmConfig};
use unitprompt::verbalizer::{predict_class, Verbalizer};
use unitprompt::Exec;

fn tone(freq: f32, secs: f32) -> AudioBuffer {
    let n = (secs * SAMPLE_RATE as f32) as usize;
    let samples = (0..n)
        .map(|i| 0.3 * (2.0 * PI * freq * i as f32 / SAMPLE_RATE as f32).sin() + 0.01 * ((i * 7919) % 13) as f32 / 13.0)
        .collect();
    AudioBuffer::new(samples, SAMPLE_RATE).unwrap()
}

/// wav → features → codebook → manifest of feature files → segments.
#[test]
fn audio_to_segments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FeatureConfig::default();
    let mut feats = Vec::new();
    let mut entries = String::new();
    for (i, freq) in [220.0, 440.0, 880.0, 1760.0].into_iter().enumerate() {
        let wav = dir.path().join(format!("p{i}.wav"));
        write_wav(&wav, &tone(freq, 2.0)).unwrap();
        let m = logmel(&load_wav(&wav).unwrap(), &cfg).unwrap();
        assert_eq!(m.frames(), 1 + (32_000 - 400) / 320);
        let path = dir.path().join(format!("p{i}.ulmf"));
        write_features(&m, &path).unwrap();
        assert_eq!(read_features(&path).unwrap(), m);
        feats.push(m);
        let label = if i % 2 == 0 { "hc" } else { "pd" };
        let split = ["train", "train", "val", "test"][i];
        entries.push_str(&format!(
            r#"{{"patient_id":"p{i}","path":"p{i}.ulmf","label":"{label}","disease":"PD","language":"es","split":"{split}"}}"#
        ));
        entries.push('\n');
    }
    let fit = kmeans_fit(
        &feats,
        KMeansOptions {
            k: 8,
            seed: 1,
            ..Default::default()
        },
    )
    .unwrap();
    write_codebook(&fit.codebook, &dir.path().join("cb.ulmc")).unwrap();
    let manifest = dir.path().join("m.jsonl");
    std::fs::write(&manifest, entries).unwrap();

    let loaded = load_manifest(&manifest).unwrap();
    let tasks = group_tasks(&loaded, &BTreeMap::new()).unwrap();
    let opts = SegmentOptions {
        segment_units: 25,
        dedup: false,
        codebook: Some(&fit.codebook),
        exec: Exec::Parallel,
    };
    let ds = build_dataset(&tasks[0].0, &tasks[0].1, opts).unwrap();
    // 99 frames per recording → 3 segments of 25, remainder dropped.
    assert_eq!(ds.segments.len(), 4 * 3);
    assert!(ds.max_unit().unwrap() < 8);
    let seq = build_dataset(&tasks[0].0, &tasks[0].1, SegmentOptions { exec: Exec::Sequential, ..opts }).unwrap();
    assert_eq!(ds, seq);

    let dedup = build_dataset(&tasks[0].0, &tasks[0].1, SegmentOptions { dedup: true, ..opts }).unwrap();
    assert!(dedup.segments.iter().all(|s| s.units.units.windows(2).all(|w| w[0] != w[1])));
    assert_eq!(ds.subset(Split::Test).patients.len(), 1);
}

#[test]
fn ulmf_entry_without_codebook_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = logmel(&tone(300.0, 1.0), &FeatureConfig::default()).unwrap();
    let path = dir.path().join("a.ulmf");
    write_features(&m, &path).unwrap();
    let e = ManifestEntry {
        patient_id: "a".into(),
        path,
        label: "x".into(),
        disease: "D".into(),
        language: "l".into(),
        split: Split::Train,
    };
    let task = TaskSpec::new("D", "l", &["x", "y"]);
    let opts = SegmentOptions {
        segment_units: 10,
        dedup: false,
        codebook: None,
        exec: Exec::Sequential,
    };
    assert!(matches!(build_dataset(&task, &[e], opts), Err(unitprompt::Error::Config(_))));
}

fn toy() -> (SegmentedDataset, unitprompt::ulm::UlmParameters<f64>, unitprompt::prompts::PromptPool<f64>, Verbalizers<f64>) {
    let synth = unitprompt::datasets::SynthConfig {
        n_patients_per_class: 3,
        segments_per_patient: 3,
        k: 10,
        segment_units: 20,
        ..Default::default()
    };
    let data = unitprompt::datasets::synth_generate(&synth).unwrap().dataset;
    let cfg = UlmConfig::tiny(10);
    let model = init_backbone::<f64>(&cfg, 2).unwrap();
    let pool = init_pool(std::slice::from_ref(&data.task), PromptLengths::default(), PromptMode::Both, &cfg, 3).unwrap();
    let mut vbs = Verbalizers::new();
    vbs.insert(data.task.id(), Verbalizer::new(&data.task, cfg.vocab_size, 4));
    (data, model, pool, vbs)
}

#[test]
fn predictions_match_manual_path() {
    let (data, model, pool, vbs) = toy();
    let preds = predict_segments(&data, &model, &pool, &vbs, PromptMode::Both, Exec::Parallel).unwrap();
    assert_eq!(preds.len(), data.segments.len());
    assert_eq!(preds, predict_segments(&data, &model, &pool, &vbs, PromptMode::Both, Exec::Sequential).unwrap());

    let seg = &data.segments[4];
    let prompt = compose(&data.task, &pool, PromptMode::Both).unwrap();
    let out = forward(&with_bos(&seg.units.units, &model.config), &model, &prompt, None, Readout::All, false).unwrap();
    let vb = &vbs[&data.task.id()];
    let z = vb.weight.dot(&out.last_logits()) + &vb.bias;
    let (class, probs) = predict_class(z.view());
    assert_eq!(preds[4].predicted, class);
    for (a, b) in preds[4].probabilities.iter().zip(probs.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(preds.iter().all(|p| (p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6));

    let empty = SegmentedDataset::empty(data.task.clone());
    assert!(predict_segments(&empty, &model, &pool, &vbs, PromptMode::Both, Exec::Parallel).unwrap().is_empty());
    let other = SegmentedDataset::empty(TaskSpec::new("MDD", "zh", &["a", "b"]));
    assert!(predict_segments(&other, &model, &pool, &vbs, PromptMode::Both, Exec::Parallel).is_err());
}

#[test]
fn unanimous_correct_segments_give_correct_patients() {
    let (data, _, _, _) = toy();
    let oracle: Vec<SegmentPrediction> = data
        .segments
        .iter()
        .map(|s| SegmentPrediction {
            patient_id: s.units.patient_id.clone(),
            segment_index: s.units.segment_index,
            predicted: s.label,
            probabilities: vec![0.5, 0.5],
        })
        .collect();
    let r = score(&data, &oracle, &VotingConfig::default()).unwrap();
    assert_eq!(r.segment.accuracy, 1.0);
    assert_eq!(r.patient.accuracy, 1.0);
    assert_eq!(r.patients.len(), data.patients.len());
    let csv = r.csv();
    assert!(csv.contains("\nsegment,") && csv.contains("\npatient,"));
    assert!(r.text().contains("[segment]") && r.text().contains("[patient]"));
}
