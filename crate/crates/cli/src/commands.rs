use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use unitprompt::datasets::{
    build_dataset, group_tasks, load_manifest, write_synth, write_unit_file, SegmentOptions, SegmentedDataset, Split,
    synth_generate, ManifestEntry,
};
use unitprompt::featio::{load_wav, logmel, read_features, write_features};
use unitprompt::inference::{evaluate, majority_baseline, score, EvalReport, MetricsReport};
use unitprompt::prompts::{init_pool, TaskSpec};
use unitprompt::quantizer::{dedup_units, encode, kmeans_fit, read_codebook, write_codebook, KMeansOptions};
use unitprompt::trainer::{
    fit, load_checkpoint, pretrain_backbone, read_checkpoint_dtype, save_checkpoint, Checkpoint, FitOptions, TaskSplits,
    Verbalizers,
};
use unitprompt::ulm::{grad_check, init_backbone, UlmConfig};
use unitprompt::verbalizer::Verbalizer;
use unitprompt::{Exec, Real};

use crate::config::{ConfigError, Precision, RunConfig};

/// Expands directories into their files with extension `ext`, sorted.
fn expand(inputs: &[PathBuf], ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == ext))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(ConfigError(format!("no .{ext} inputs given")).into());
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned())
}

pub fn features(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let wavs = expand(inputs, "wav")?;
    cfg.echo(out)?;
    for wav in wavs {
        let audio = load_wav(&wav)?;
        let mut m = logmel(&audio, &cfg.features)?;
        m.source_tag = stem(&wav);
        let dst = out.join(format!("{}.ulmf", stem(&wav)));
        write_features(&m, &dst)?;
        println!("{} -> {} ({} frames)", wav.display(), dst.display(), m.frames());
    }
    Ok(())
}

pub fn quantize(cfg: &RunConfig, inputs: &[PathBuf], out: &Path, exec: Exec) -> Result<()> {
    let files = expand(inputs, "ulmf")?;
    let feats = files.iter().map(|f| read_features(f)).collect::<unitprompt::Result<Vec<_>>>()?;
    let opts = KMeansOptions {
        k: cfg.quantizer.k,
        max_iters: cfg.quantizer.max_iters,
        tol: cfg.quantizer.tol,
        seed: cfg.seed,
        exec,
    };
    let fit = kmeans_fit(&feats, opts)?;
    if let Some(dir) = out.parent() {
        cfg.echo(if dir.as_os_str().is_empty() { Path::new(".") } else { dir })?;
    }
    write_codebook(&fit.codebook, out)?;
    println!(
        "k={} iterations={} inertia={:.6}",
        fit.codebook.k(),
        fit.iterations,
        fit.codebook.inertia
    );
    Ok(())
}

pub fn encode_cmd(cfg: &RunConfig, inputs: &[PathBuf], codebook: &Path, out: &Path, dedup: bool, exec: Exec) -> Result<()> {
    let files = expand(inputs, "ulmf")?;
    let cb = read_codebook(codebook)?;
    cfg.echo(out)?;
    for f in files {
        let m = read_features(&f)?;
        let mut seq = encode(&m, &cb, &stem(&f), exec)?;
        if dedup {
            seq = dedup_units(&seq);
        }
        let dst = out.join(format!("{}.units", stem(&f)));
        write_unit_file(&dst, cb.k(), seq.len(), std::slice::from_ref(&seq))?;
        println!("{} -> {} ({} units)", f.display(), dst.display(), seq.len());
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = synth_generate(&cfg.synth)?;
    cfg.echo(out)?;
    let manifest = write_synth(&data, out)?;
    let bg = data.background.iter().filter(|b| **b).count();
    println!(
        "{}: {} patients, {} segments ({} background)",
        manifest.display(),
        data.dataset.patients.len(),
        data.dataset.segments.len(),
        bg
    );
    Ok(())
}

/// Largest `k` declared by the unit files (or codebook) behind `entries`.
fn declared_units(entries: &[ManifestEntry], codebook_k: Option<usize>) -> Result<usize> {
    let mut k = codebook_k.unwrap_or(0);
    for e in entries {
        if e.path.extension().is_some_and(|x| x == "ulmf") {
            continue;
        }
        let text = fs::read_to_string(&e.path).with_context(|| format!("reading {}", e.path.display()))?;
        let header = text.lines().next().unwrap_or_default();
        let declared = header
            .trim_start_matches('#')
            .split_whitespace()
            .find_map(|t| t.strip_prefix("k=").and_then(|v| v.parse::<usize>().ok()))
            .with_context(|| format!("{}: bad unit-file header", e.path.display()))?;
        k = k.max(declared);
    }
    Ok(k)
}

fn load_entries(manifests: &[PathBuf]) -> Result<Vec<ManifestEntry>> {
    if manifests.is_empty() {
        return Err(ConfigError("no manifest given (--manifest or data.manifests)".into()).into());
    }
    let mut all = Vec::new();
    for m in manifests {
        all.extend(load_manifest(m)?);
    }
    Ok(all)
}

fn datasets(cfg: &RunConfig, tasks: Vec<(TaskSpec, Vec<ManifestEntry>)>, exec: Exec) -> Result<Vec<SegmentedDataset>> {
    let cb = cfg.data.codebook.as_deref().map(read_codebook).transpose()?;
    let opts = SegmentOptions {
        segment_units: cfg.data.segment_units,
        dedup: cfg.quantizer.dedup,
        codebook: cb.as_ref(),
        exec,
    };
    tasks
        .iter()
        .map(|(t, e)| build_dataset(t, e, opts).map_err(Into::into))
        .collect()
}

pub fn train(cfg: &RunConfig, manifests: &[PathBuf], out: &Path, exec: Exec) -> Result<()> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, manifests, out, exec),
        Precision::F64 => train_as::<f64>(cfg, manifests, out, exec),
    }
}

fn train_as<F: Real>(cfg: &RunConfig, manifests: &[PathBuf], out: &Path, exec: Exec) -> Result<()> {
    let entries = load_entries(manifests)?;
    let grouped = group_tasks(&entries, &cfg.data.classes)?;
    let cb_k = match &cfg.data.codebook {
        Some(p) => Some(read_codebook(p)?.k()),
        None => None,
    };
    let k = declared_units(&entries, cb_k)?;
    let all = datasets(cfg, grouped, exec)?;
    let mut model_cfg: UlmConfig = cfg.model.clone();
    if model_cfg.vocab_size == 0 {
        model_cfg.vocab_size = k + 1;
    }
    model_cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    let mut resolved = cfg.clone();
    resolved.model = model_cfg.clone();
    resolved.echo(out)?;

    let splits: Vec<(SegmentedDataset, SegmentedDataset)> =
        all.iter().map(|d| (d.subset(Split::Train), d.subset(Split::Val))).collect();
    let tasks: Vec<TaskSpec> = all.iter().map(|d| d.task.clone()).collect();
    let seed = cfg.seed;
    let mut model = init_backbone::<F>(&model_cfg, seed)?;
    if cfg.pretrain.epochs > 0 {
        let train_sets: Vec<&SegmentedDataset> = splits.iter().map(|s| &s.0).collect();
        for (e, loss) in pretrain_backbone(&mut model, &train_sets, &cfg.pretrain, exec)?.iter().enumerate() {
            println!("pretrain,{},{loss:.8}", e + 1);
        }
    }
    let mut pool = init_pool::<F>(&tasks, cfg.prompt.lengths, cfg.prompt.mode, &model_cfg, seed.wrapping_add(1))?;
    let mut verbalizers = Verbalizers::new();
    for (i, t) in tasks.iter().enumerate() {
        verbalizers.insert(
            t.id(),
            Verbalizer::new(t, model_cfg.vocab_size, seed.wrapping_add(2 + i as u64)),
        );
    }
    let task_splits: Vec<TaskSplits<'_>> = splits.iter().map(|(t, v)| TaskSplits { train: t, val: v }).collect();
    let opts = FitOptions {
        mode: cfg.prompt.mode,
        exec,
        max_steps: None,
    };
    let mut log = String::from("epoch,train_loss,val_loss,lr\n");
    println!("epoch,train_loss,val_loss,lr");
    let outcome = fit(&task_splits, &model, &mut pool, &mut verbalizers, &cfg.train, opts, |e| {
        let line = e.csv_line();
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    let log_path = out.join("train_log.csv");
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    let ck = Checkpoint {
        model,
        tasks,
        pool,
        verbalizers,
        state: outcome.state,
        train_config: cfg.train.clone(),
    };
    let ck_path = out.join("checkpoint.bin");
    save_checkpoint(&ck_path, &ck)?;
    println!("best epoch {}; checkpoint {}", outcome.best_epoch, ck_path.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, manifests: &[PathBuf], checkpoint: &Path, out: &Path, split: Split, baseline: bool, exec: Exec) -> Result<()> {
    match read_checkpoint_dtype(checkpoint)?.as_str() {
        "f32" => eval_as::<f32>(cfg, manifests, checkpoint, out, split, baseline, exec),
        "f64" => eval_as::<f64>(cfg, manifests, checkpoint, out, split, baseline, exec),
        other => bail!("unsupported checkpoint dtype {other}"),
    }
}

fn task_dir(task: &TaskSpec) -> String {
    format!("{}_{}", task.disease, task.language)
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn eval_as<F: Real>(
    cfg: &RunConfig,
    manifests: &[PathBuf],
    checkpoint: &Path,
    out: &Path,
    split: Split,
    baseline: bool,
    exec: Exec,
) -> Result<()> {
    let ck: Checkpoint<F> = load_checkpoint(checkpoint)?;
    let entries = load_entries(manifests)?;
    let order: BTreeMap<String, Vec<String>> = ck.tasks.iter().map(|t| (t.id(), t.classes.clone())).collect();
    let grouped = group_tasks(&entries, &order)?;
    for (t, _) in &grouped {
        if !order.contains_key(&t.id()) {
            bail!(unitprompt::Error::UnknownId(format!("task {} is not in the checkpoint", t.id())));
        }
    }
    let all = datasets(cfg, grouped, exec)?;
    cfg.echo(out)?;
    let mut summary = String::new();
    for ds in &all {
        let data = ds.subset(split);
        if data.segments.is_empty() {
            bail!("task {}: no {} segments to evaluate", ds.task.id(), split.as_str());
        }
        let report: EvalReport = if baseline {
            score(&data, &majority_baseline(&ds.subset(Split::Train), &data), &cfg.voting)?
        } else {
            evaluate(&data, &ck.model, &ck.pool, &ck.verbalizers, cfg.prompt.mode, &cfg.voting, exec)?
        };
        let dir = if all.len() == 1 { out.to_path_buf() } else { out.join(task_dir(&ds.task)) };
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("metrics.csv"), report.csv())?;
        fs::write(dir.join("metrics.txt"), report.text())?;
        let mut preds = String::from("patient_id,label,predicted,n_segments\n");
        for p in &report.patients {
            preds.push_str(&format!("{},{},{},{}\n", p.patient_id, p.label, p.predicted, p.n_segments));
        }
        fs::write(dir.join("patients.csv"), preds)?;
        summary.push_str(&format!("task {}\n{}\n", ds.task.id(), report.text()));
        println!("task {}", ds.task.id());
        println!("{}", MetricsReport::CSV_HEADER);
        println!("{}\n{}", report.segment.csv_line(), report.patient.csv_line());
    }
    if all.len() > 1 {
        fs::write(out.join("metrics.txt"), summary)?;
    }
    Ok(())
}

/// Returns whether the check passed.
pub fn gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<bool> {
    let report = grad_check(&cfg.gradcheck)?;
    let text = format!(
        "max_rel_err = {:e}\npass = {}\nchecked = {}\nworst = {}\nmax_rel_err_prompt = {:e}\nmax_rel_err_verbalizer = {:e}\nmax_rel_err_backbone = {:e}\nprefix_len = {}\n",
        report.max_rel_err,
        report.pass,
        report.checked,
        report.worst,
        report.max_rel_err_prompt,
        report.max_rel_err_verbalizer,
        report.max_rel_err_backbone,
        report.prefix_len
    );
    print!("{text}");
    if let Some(dir) = out {
        cfg.echo(dir)?;
        fs::write(dir.join("gradcheck.txt"), &text)?;
    }
    Ok(report.pass)
}
