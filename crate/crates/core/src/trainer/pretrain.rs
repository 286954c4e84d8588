//! Optional next-unit pre-training of the backbone on unlabeled segments.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, cross_entropy, derive_seed, TrainConfig, TrainState};
use crate::datasets::SegmentedDataset;
use crate::prompts::PromptApplication;
use crate::ulm::{backward, forward, softmax, with_bos, Dropout, Readout, UlmParameters};
use crate::{Error, Exec, Real, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// 0 leaves the backbone at its random initialization.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 0,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Trains every backbone tensor on mean next-unit cross-entropy and
/// re-freezes it. Returns the mean training loss of each epoch.
pub fn pretrain_backbone<F: Real>(
    model: &mut UlmParameters<F>,
    data: &[&SegmentedDataset],
    cfg: &PretrainConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("pretrain needs batch_size >= 1 and lr > 0".into()));
    }
    let segments: Vec<&[usize]> = data
        .iter()
        .flat_map(|d| d.segments.iter().map(|s| s.units.units.as_slice()))
        .filter(|s| !s.is_empty())
        .collect();
    if cfg.epochs > 0 && segments.is_empty() {
        return Err(Error::Invalid("no segments to pre-train on".into()));
    }
    let units = model.config.units();
    if let Some(&u) = segments.iter().flat_map(|s| s.iter()).find(|&&u| u >= units) {
        return Err(Error::TokenOutOfVocab { token: u, vocab: units });
    }
    let opt = TrainConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut state = TrainState::<F>::new(&opt);
    let mut history = Vec::with_capacity(cfg.epochs);
    model.frozen = false;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..segments.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64, 0xB0])));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let step = state.step;
            let weight = 1.0 / batch.len() as f64;
            let frozen_view: &UlmParameters<F> = model;
            let results = exec.map(batch, |pos, &si| -> Result<(f64, UlmParameters<F>)> {
                let tokens = with_bos(segments[si], &frozen_view.config);
                let dropout = Dropout {
                    seed: derive_seed(&[cfg.seed, step, pos as u64, 0xB1]),
                };
                let out = forward(&tokens, frozen_view, &PromptApplication::none(), Some(dropout), Readout::All, true)?;
                let targets = &tokens[1..];
                let scale = weight / targets.len() as f64;
                let mut d = Array2::<F>::zeros(out.next_unit_logits.raw_dim());
                let mut loss = 0.0;
                for (t, &y) in targets.iter().enumerate() {
                    let row = out.next_unit_logits.row(t);
                    loss += cross_entropy(row, y)?;
                    let mut p = softmax(row);
                    p[y] -= F::one();
                    d.row_mut(t).assign(&p.mapv(|v| v * F::from_f64(scale)));
                }
                let g = backward(frozen_view, &out, d.view(), true)?;
                Ok((loss / targets.len() as f64, g.backbone.expect("requested")))
            });
            let mut grad = model.zeros_like();
            for r in results {
                let (loss, g) = r?;
                total += loss;
                grad.accumulate(&g);
            }
            let mut grads = Vec::new();
            grad.visit(&mut |n, t| grads.push((n, t)));
            let mut params = Vec::new();
            model.visit_mut(&mut |n, t| params.push((n, t)));
            adam_step(&mut state, &opt, params, &grads)?;
        }
        let mean = total / segments.len() as f64;
        log::debug!("pretrain epoch {},{mean:.6}", epoch + 1);
        history.push(mean);
    }
    model.frozen = true;
    Ok(history)
}
