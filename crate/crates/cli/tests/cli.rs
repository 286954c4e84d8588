use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_unitprompt"));
    c.env_remove("UNITPROMPT_SEED");
    c
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(
        &p,
        "[synth]\nn_patients_per_class = 5\nsegments_per_patient = 2\nsegment_units = 20\n[data]\nsegment_units = 20\n[train]\nmax_epochs = 1\n",
    )
    .unwrap();
    p.to_string_lossy().into_owned()
}

fn resolved_seed(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("resolved_config.toml")).unwrap();
    text.lines().find(|l| l.starts_with("seed = ")).unwrap().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = bin().arg("--config").arg(&bad).arg("gradcheck").output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    assert_eq!(code(&bin().arg("nonsense").output().unwrap()), 2);
    assert_eq!(code(&bin().args(["synth", "--noise", "1.5"]).output().unwrap()), 2);

    let missing = dir.path().join("nope.jsonl");
    let o = bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.path().join("nope.bin"))
        .arg("--manifest")
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);

    let o = bin().args(["gradcheck", "--tolerance", "0"]).output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("pass = false"));
}

#[test]
fn seed_precedence_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = |name: &str| dir.path().join(name);

    assert!(bin().args(["--config", &cfg, "synth", "--out"]).arg(out("a")).status().unwrap().success());
    assert_eq!(resolved_seed(&out("a")), "seed = 0");
    let env = bin()
        .env("UNITPROMPT_SEED", "5")
        .args(["--config", &cfg, "synth", "--out"])
        .arg(out("b"))
        .status()
        .unwrap();
    assert!(env.success());
    assert_eq!(resolved_seed(&out("b")), "seed = 5");
    let flag = bin()
        .env("UNITPROMPT_SEED", "5")
        .args(["--config", &cfg, "--seed", "9", "synth", "--out"])
        .arg(out("c"))
        .status()
        .unwrap();
    assert!(flag.success());
    assert_eq!(resolved_seed(&out("c")), "seed = 9");
    let bad_env = bin().env("UNITPROMPT_SEED", "x").args(["synth", "--out"]).arg(out("d")).output().unwrap();
    assert_eq!(code(&bad_env), 2);

    // The echo parses back into the same configuration.
    let echo = out("c").join("resolved_config.toml");
    assert!(bin().arg("--config").arg(&echo).args(["synth", "--out"]).arg(out("e")).status().unwrap().success());
    assert_eq!(
        std::fs::read(&echo).unwrap(),
        std::fs::read(out("e").join("resolved_config.toml")).unwrap()
    );
    assert_ne!(
        std::fs::read(out("a").join("manifest.jsonl")).unwrap(),
        std::fs::read(out("c").join("manifest.jsonl")).unwrap()
    );
}

#[test]
fn train_eval_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let d = dir.path();
    assert!(bin().args(["--config", &cfg, "synth", "--out"]).arg(d.join("data")).status().unwrap().success());
    let manifest = d.join("data/manifest.jsonl");
    let o = bin()
        .args(["--config", &cfg, "--threads", "1", "train", "--precision", "f64", "--manifest"])
        .arg(&manifest)
        .arg("--out")
        .arg(d.join("train"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l == "epoch,train_loss,val_loss,lr"));
    let log = std::fs::read_to_string(d.join("train/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert_eq!(log.lines().nth(1).unwrap().split(',').count(), 4);

    for (name, extra) in [("eval", None), ("base", Some("--baseline"))] {
        let mut c = bin();
        c.args(["--config", &cfg, "eval", "--manifest"])
            .arg(&manifest)
            .arg("--checkpoint")
            .arg(d.join("train/checkpoint.bin"))
            .arg("--out")
            .arg(d.join(name));
        if let Some(e) = extra {
            c.arg(e);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(d.join(name).join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "level,accuracy,precision,recall,f1,tp,fp,tn,fn");
        assert!(lines[1].starts_with("segment,") && lines[2].starts_with("patient,"));
    }
}
