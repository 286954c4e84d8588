//! Trains prompts on the synthetic benchmark and prints both metric levels.
//!
//! `cargo run --release --example synth_run -- [noise] [seed] [max_epochs]`

use std::time::Instant;

use unitprompt::datasets::{synth_generate, Split, SynthConfig};
use unitprompt::inference::{evaluate, VotingConfig};
use unitprompt::prompts::{init_pool, PromptLengths, PromptMode};
use unitprompt::trainer::{fit, FitOptions, TaskSplits, TrainConfig, Verbalizers};
use unitprompt::ulm::{init_backbone, UlmConfig};
use unitprompt::verbalizer::Verbalizer;
use unitprompt::Exec;

fn main() -> unitprompt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let noise = args.first().map_or(0.2, |s| s.parse().expect("noise"));
    let seed = args.get(1).map_or(0, |s| s.parse().expect("seed"));
    let max_epochs = args.get(2).map_or(300, |s| s.parse().expect("max_epochs"));
    let synth = SynthConfig {
        noise,
        seed,
        ..Default::default()
    };
    let data = synth_generate(&synth)?.dataset;
    let (train, val, test) = (data.subset(Split::Train), data.subset(Split::Val), data.subset(Split::Test));
    let cfg = UlmConfig::desk(synth.k);
    let model = init_backbone::<f32>(&cfg, seed)?;
    let mode = PromptMode::Both;
    let mut pool = init_pool(std::slice::from_ref(&data.task), PromptLengths::default(), mode, &cfg, seed + 1)?;
    let mut vbs = Verbalizers::new();
    vbs.insert(data.task.id(), Verbalizer::new(&data.task, cfg.vocab_size, seed + 2));
    let train_cfg = TrainConfig {
        max_epochs,
        seed,
        ..Default::default()
    };
    let start = Instant::now();
    let tasks = [TaskSplits { train: &train, val: &val }];
    let opts = FitOptions {
        mode,
        exec: Exec::Parallel,
        max_steps: None,
    };
    let out = fit(&tasks, &model, &mut pool, &mut vbs, &train_cfg, opts, |log| {
        println!("{} ({:.1}s)", log.csv_line(), start.elapsed().as_secs_f64());
    })?;
    println!("best epoch {}", out.best_epoch);
    let report = evaluate(&test, &model, &pool, &vbs, mode, &VotingConfig::default(), Exec::Parallel)?;
    print!("{}", report.csv());
    Ok(())
}
