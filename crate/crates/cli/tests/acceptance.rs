//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use unitprompt::datasets::{synth_generate, Split, SynthConfig};
use unitprompt::featio::FeatureMatrix;
use unitprompt::inference::{metrics_from_counts, vote, Level, SegmentPrediction, VotingConfig};
use unitprompt::prompts::{compose, init_pool, PromptApplication, PromptLengths, PromptMode};
use unitprompt::quantizer::{kmeans_fit, KMeansOptions};
use unitprompt::trainer::{fit, FitOptions, TaskSplits, TrainConfig, Verbalizers};
use unitprompt::ulm::{forward, init_backbone, with_bos, Readout, UlmConfig};
use unitprompt::verbalizer::Verbalizer;
use unitprompt::Exec;

struct Outcome {
    pass: bool,
    detail: String,
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_unitprompt"));
    c.env_remove("UNITPROMPT_SEED");
    c
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn unitprompt");
    assert!(
        out.status.success(),
        "{cmd:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .trim()
        .to_string()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let out = run_ok(bin().args(["gradcheck"]));
    let err: f64 = field(&out, "max_rel_err").parse().unwrap();
    let prefix: usize = field(&out, "prefix_len").parse().unwrap();
    let elapsed = t.elapsed();
    Outcome {
        pass: err <= 1e-4 && field(&out, "pass") == "true" && prefix == 6 && elapsed < Duration::from_secs(60),
        detail: format!("max_rel_err={err:.3e} (<= 1e-4), L_p={prefix}, {:.1}s", elapsed.as_secs_f64()),
    }
}

fn benchmark(noise: f64) -> SynthConfig {
    SynthConfig {
        noise,
        ..Default::default()
    }
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let data = synth_generate(&benchmark(0.2)).unwrap().dataset;
    let (train, val) = (data.subset(Split::Train), data.subset(Split::Val));
    let cfg = UlmConfig::desk(32);
    let model = init_backbone::<f32>(&cfg, 0).unwrap();
    let initial = init_backbone::<f32>(&cfg, 0).unwrap();
    let pool0 = init_pool::<f32>(std::slice::from_ref(&data.task), PromptLengths::default(), PromptMode::Both, &cfg, 1).unwrap();
    let mut vbs0 = Verbalizers::new();
    vbs0.insert(data.task.id(), Verbalizer::new(&data.task, cfg.vocab_size, 2));
    let (mut pool, mut vbs) = (pool0.clone(), vbs0.clone());
    let opts = FitOptions {
        max_steps: Some(50),
        ..Default::default()
    };
    let out = fit(
        &[TaskSplits { train: &train, val: &val }],
        &model,
        &mut pool,
        &mut vbs,
        &TrainConfig::default(),
        opts,
        |_| {},
    )
    .unwrap();

    let mut backbone_same = true;
    let mut expected = Vec::new();
    initial.visit(&mut |_, t| expected.push(t.iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
    let mut i = 0;
    model.visit(&mut |_, t| {
        backbone_same &= t.iter().map(|v| v.to_bits()).collect::<Vec<_>>() == expected[i];
        i += 1;
    });
    let mut before = Vec::new();
    pool0.visit(&mut |n, t| before.push((n, t.to_owned())));
    for vb in vbs0.values() {
        vb.visit(&mut |n, t| before.push((n, t.to_owned())));
    }
    let mut after = Vec::new();
    pool.visit(&mut |n, t| after.push((n, t.to_owned())));
    for vb in vbs.values() {
        vb.visit(&mut |n, t| after.push((n, t.to_owned())));
    }
    let unchanged: Vec<&String> = before
        .iter()
        .zip(&after)
        .filter(|((_, a), (_, b))| a == b)
        .map(|((n, _), _)| n)
        .collect();
    let elapsed = t.elapsed();
    Outcome {
        pass: out.state.step == 50
            && backbone_same
            && unchanged.is_empty()
            && before.len() == after.len()
            && elapsed < Duration::from_secs(60),
        detail: format!(
            "steps={}, backbone bitwise equal={backbone_same}, unchanged trainable tensors={}/{}, {:.1}s",
            out.state.step,
            unchanged.len(),
            after.len(),
            elapsed.as_secs_f64()
        ),
    }
}

fn criterion_3() -> Outcome {
    let cfg = UlmConfig::desk(32);
    let model = init_backbone::<f32>(&cfg, 5).unwrap();
    let data = synth_generate(&benchmark(0.2)).unwrap().dataset;
    let mut all_equal = true;
    let mut checked = 0;
    for seg in data.segments.iter().take(8) {
        let toks = with_bos(&seg.units.units, &cfg);
        let plain = forward(&toks, &model, &PromptApplication::none(), None, Readout::All, false).unwrap();
        for mode in [PromptMode::InputPrefix, PromptMode::DeepPrefix] {
            let pool = init_pool::<f32>(std::slice::from_ref(&data.task), PromptLengths::zero(), mode, &cfg, 6).unwrap();
            let prompt = compose(&data.task, &pool, mode).unwrap();
            let out = forward(&toks, &model, &prompt, None, Readout::All, false).unwrap();
            all_equal &= out.next_unit_logits == plain.next_unit_logits && out.hidden_states == plain.hidden_states;
            checked += 1;
        }
    }
    Outcome {
        pass: all_equal,
        detail: format!("{checked} forwards (input-prefix and deep-prefix) exactly equal to the plain backbone: {all_equal}"),
    }
}

struct Metrics {
    segment_accuracy: f64,
    patient_accuracy: f64,
}

fn parse_metrics(path: &Path) -> Metrics {
    let text = std::fs::read_to_string(path).unwrap();
    let acc = |level: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(&format!("{level},")))
            .and_then(|l| l.split(',').nth(1))
            .unwrap()
            .parse()
            .unwrap()
    };
    Metrics {
        segment_accuracy: acc("segment"),
        patient_accuracy: acc("patient"),
    }
}

/// synth → train → eval through the binary; returns the run directory.
fn pipeline(dir: &Path, noise: f64, extra_config: &str) -> PathBuf {
    let config = dir.join("run.toml");
    std::fs::write(&config, extra_config).unwrap();
    let c = config.to_str().unwrap();
    let data = dir.join("data");
    let train = dir.join("train");
    let eval = dir.join("eval");
    let noise = noise.to_string();
    run_ok(bin().args(["--config", c, "synth", "--noise", &noise, "--out"]).arg(&data));
    run_ok(
        bin()
            .args(["--config", c, "train", "--manifest"])
            .arg(data.join("manifest.jsonl"))
            .arg("--out")
            .arg(&train),
    );
    run_ok(
        bin()
            .args(["--config", c, "eval", "--manifest"])
            .arg(data.join("manifest.jsonl"))
            .arg("--checkpoint")
            .arg(train.join("checkpoint.bin"))
            .arg("--out")
            .arg(&eval),
    );
    dir.to_path_buf()
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let run = pipeline(dir.path(), 0.2, "");
    let elapsed = t.elapsed();
    let m = parse_metrics(&run.join("eval/metrics.csv"));
    let epochs = std::fs::read_to_string(run.join("train/train_log.csv")).unwrap().lines().count() - 1;
    Outcome {
        pass: m.patient_accuracy >= 0.90 && elapsed <= Duration::from_secs(15 * 60),
        detail: format!(
            "patient accuracy={:.4} (>= 0.90), segment accuracy={:.4}, {epochs} epochs, {:.0}s",
            m.patient_accuracy,
            m.segment_accuracy,
            elapsed.as_secs_f64()
        ),
    }
}

fn criterion_5() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = pipeline(dir.path(), 0.35, "");
    let m = parse_metrics(&run.join("eval/metrics.csv"));
    let uplift = m.patient_accuracy - m.segment_accuracy;
    Outcome {
        pass: uplift >= 0.05,
        detail: format!(
            "segment={:.4} patient={:.4} uplift={uplift:.4} (>= 0.05)",
            m.segment_accuracy, m.patient_accuracy
        ),
    }
}

fn criterion_6() -> Outcome {
    // (TP, FP, FN) chosen so that precision and recall hit the table values exactly.
    let fixtures = [
        ("MDD", (243, 81, 57), 0.75, 0.81, 0.78),
        ("AD", (70, 30, 30), 0.70, 0.70, 0.70),
        ("PD", (108, 117, 12), 0.48, 0.90, 0.63),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, (tp, fp, fn_), p, r, f1) in fixtures {
        let m = metrics_from_counts(tp, fp, 100, fn_, Level::Segment);
        let ok = (m.precision - p).abs() < 1e-12 && (m.recall - r).abs() < 1e-12 && (m.f1 - f1).abs() <= 0.005;
        pass &= ok;
        parts.push(format!("{name} P={:.2} R={:.2} F1={:.4} vs {f1}", m.precision, m.recall, m.f1));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_7() -> Outcome {
    let mut checked = 0u64;
    let mut mismatches = 0u64;
    let mut rho_one_positive = 0u64;
    // rho = q/4; counting oracle in integers: positives * 4 > q * n.
    for q in 0..=4u64 {
        let cfg = VotingConfig {
            rho: q as f64 / 4.0,
            positive_class: 1,
        };
        for n in 1..=12usize {
            for bits in 0u32..(1 << n) {
                let preds: Vec<SegmentPrediction> = (0..n)
                    .map(|j| SegmentPrediction {
                        patient_id: "p".into(),
                        segment_index: j,
                        predicted: ((bits >> j) & 1) as usize,
                        probabilities: vec![0.5, 0.5],
                    })
                    .collect();
                let positives = bits.count_ones() as u64;
                let oracle = usize::from(positives * 4 > q * n as u64);
                let got = vote(&preds, &cfg).unwrap();
                checked += 1;
                mismatches += u64::from(got != oracle);
                if q == 4 && got != 0 {
                    rho_one_positive += 1;
                }
            }
        }
    }
    Outcome {
        pass: mismatches == 0 && rho_one_positive == 0,
        detail: format!("{checked} vectors, {mismatches} mismatches, rho=1 positives={rho_one_positive}"),
    }
}

fn criterion_8() -> Outcome {
    let centers = [[0.0f32, 0.0], [6.0, 0.0], [0.0, 6.0]];
    let mut worst_agreement = 1.0f64;
    let mut monotone = true;
    let runs = 10;
    for run in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + run);
        let noise = Normal::new(0.0f32, 0.05).unwrap();
        let mut data = Array2::<f32>::zeros((300, 2));
        let truth: Vec<usize> = (0..300).map(|i| i % 3).collect();
        for (i, &c) in truth.iter().enumerate() {
            data[[i, 0]] = centers[c][0] + noise.sample(&mut rng);
            data[[i, 1]] = centers[c][1] + noise.sample(&mut rng);
        }
        let m = FeatureMatrix::new(data, 50.0, "blobs").unwrap();
        let opts = KMeansOptions {
            k: 3,
            seed: run,
            ..Default::default()
        };
        let fit = kmeans_fit(std::slice::from_ref(&m), opts).unwrap();
        monotone &= fit.inertia_history.windows(2).all(|w| w[1] <= w[0]);
        let assigned = unitprompt::quantizer::kmeans_assign(&m, &fit.codebook, Exec::Sequential).unwrap();
        // Best agreement over all 6 label permutations.
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .map(|p| assigned.iter().zip(&truth).filter(|(a, t)| p[**a] == **t).count())
            .max()
            .unwrap();
        worst_agreement = worst_agreement.min(best as f64 / 300.0);
    }
    Outcome {
        pass: worst_agreement >= 0.99 && monotone,
        detail: format!("{runs} runs, worst agreement={worst_agreement:.4} (>= 0.99), inertia non-increasing={monotone}"),
    }
}

fn criterion_9() -> Outcome {
    let config = "seed = 7\n[synth]\nn_patients_per_class = 8\nsegments_per_patient = 4\nsegment_units = 60\n[data]\nsegment_units = 60\n[train]\nmax_epochs = 3\n";
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), 0.2, config);
    pipeline(b.path(), 0.2, config);
    let files = [
        "data/manifest.jsonl",
        "train/checkpoint.bin",
        "train/train_log.csv",
        "eval/metrics.csv",
        "eval/metrics.txt",
        "eval/patients.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap())
        .collect();
    Outcome {
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs", files.len())
        } else {
            format!("differing: {differing:?}")
        },
    }
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient check", criterion_1),
        ("2 freeze invariant", criterion_2),
        ("3 empty-prompt equivalence", criterion_3),
        ("4 synthetic learnability", criterion_4),
        ("5 voting uplift", criterion_5),
        ("6 F1 arithmetic fixtures", criterion_6),
        ("7 voting oracle", criterion_7),
        ("8 k-means recovery", criterion_8),
        ("9 determinism", criterion_9),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        });
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {name}: {tag} — {}", outcome.detail);
        if !outcome.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
