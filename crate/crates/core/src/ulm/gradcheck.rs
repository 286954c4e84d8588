//! Central finite-difference check of the hand-written reverse pass.

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward, forward, init_backbone, softmax, with_bos, Readout, UlmConfig, UlmParameters};
use crate::prompts::{compose, init_pool, PromptLengths, PromptMode, PromptPool, TaskSpec};
use crate::verbalizer::Verbalizer;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub model: UlmConfig,
    pub lengths: PromptLengths,
    pub mode: PromptMode,
    pub batch: usize,
    pub seq_len: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Prompt entries are redrawn with this std so attention is far from uniform.
    pub prompt_std: f64,
    /// Weight of the next-unit term, which exercises the all-rows readout.
    pub lm_weight: f64,
    /// Randomly chosen entries checked per backbone tensor.
    pub backbone_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: UlmConfig::tiny(10),
            lengths: PromptLengths {
                disease: 2,
                language: 2,
                class: 1,
            },
            mode: PromptMode::Both,
            batch: 2,
            seq_len: 7,
            epsilon: 1e-5,
            tolerance: 1e-4,
            prompt_std: 0.5,
            lm_weight: 0.5,
            backbone_samples: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: String,
    pub max_rel_err_prompt: f64,
    pub max_rel_err_verbalizer: f64,
    pub max_rel_err_backbone: f64,
    pub prefix_len: usize,
}

struct Problem {
    model: UlmParameters<f64>,
    task: TaskSpec,
    pool: PromptPool<f64>,
    vb: Verbalizer<f64>,
    batch: Vec<(Vec<usize>, usize)>,
    mode: PromptMode,
    lm_weight: f64,
}

struct Analytic {
    pool: PromptPool<f64>,
    vb: Verbalizer<f64>,
    backbone: UlmParameters<f64>,
}

fn ce(z: ndarray::ArrayView1<f64>, y: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}

impl Problem {
    fn loss(&self, analytic: Option<&mut Analytic>) -> Result<f64> {
        let prompt = compose(&self.task, &self.pool, self.mode)?;
        let w = 1.0 / self.batch.len() as f64;
        let record = analytic.is_some();
        let mut analytic = analytic;
        let mut total = 0.0;
        for (units, label) in &self.batch {
            let tokens = with_bos(units, &self.model.config);

            let out = forward(&tokens, &self.model, &prompt, None, Readout::Last, record)?;
            let z = self.vb.classify(&out)?;
            total += w * ce(z.view(), *label);
            if let Some(a) = analytic.as_deref_mut() {
                let mut dz = softmax(z.view());
                dz[*label] -= 1.0;
                dz *= w;
                let d_last = self.vb.backward(out.last_logits(), dz.view(), &mut a.vb);
                let mut d_logits = Array2::zeros(out.next_unit_logits.raw_dim());
                d_logits.row_mut(0).assign(&d_last);
                let g = backward(&self.model, &out, d_logits.view(), true)?;
                a.pool.scatter_gradients(&self.task, &g)?;
                a.backbone.accumulate(g.backbone.as_ref().expect("requested"));
            }

            if self.lm_weight > 0.0 {
                let out = forward(&tokens, &self.model, &prompt, None, Readout::All, record)?;
                let scale = w * self.lm_weight / (tokens.len() - 1) as f64;
                let mut d_logits = Array2::zeros(out.next_unit_logits.raw_dim());
                for (t, &y) in tokens[1..].iter().enumerate() {
                    let row = out.next_unit_logits.row(t);
                    total += scale * ce(row, y);
                    let mut p = softmax(row);
                    p[y] -= 1.0;
                    d_logits.row_mut(t).assign(&(p * scale));
                }
                if let Some(a) = analytic.as_deref_mut() {
                    let g = backward(&self.model, &out, d_logits.view(), true)?;
                    a.pool.scatter_gradients(&self.task, &g)?;
                    a.backbone.accumulate(g.backbone.as_ref().expect("requested"));
                }
            }
        }
        Ok(total)
    }

    /// Adds `delta` to entry `idx` of the `which`-th tensor of group `group`.
    fn nudge(&mut self, group: Group, which: usize, idx: usize, delta: f64) {
        let mut i = 0;
        let mut apply = |_: String, mut t: ndarray::ArrayViewMutD<'_, f64>| {
            if i == which {
                let v = t.iter_mut().nth(idx).expect("index in range");
                *v += delta;
            }
            i += 1;
        };
        match group {
            Group::Prompt => self.pool.visit_mut(&mut apply),
            Group::Verbalizer => self.vb.visit_mut(&mut apply),
            Group::Backbone => self.model.visit_mut(&mut apply),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Group {
    Prompt,
    Verbalizer,
    Backbone,
}

fn collect(f: impl FnOnce(&mut dyn FnMut(String, ndarray::ArrayViewD<'_, f64>))) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    f(&mut |n, t| out.push((n, t.to_owned())));
    out
}

/// Compares analytic and central-difference gradients of the task loss.
///
/// Every prompt and verbalizer entry is checked; each backbone tensor
/// contributes `backbone_samples` random entries.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.dropout_p = 0.0;
    model_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = init_backbone::<f64>(&model_cfg, rng.random())?;
    let task = TaskSpec::new("dx", "lang", &["neg", "pos"]);
    let mut pool = init_pool::<f64>(std::slice::from_ref(&task), cfg.lengths, cfg.mode, &model_cfg, rng.random())?;
    let scale = cfg.prompt_std / crate::prompts::INIT_STD;
    pool.visit_mut(&mut |_, mut t| t.mapv_inplace(|v| v * scale));
    let vb = Verbalizer::new(&task, model_cfg.vocab_size, rng.random());
    let units = model_cfg.units();
    let batch = (0..cfg.batch.max(1))
        .map(|b| {
            let seq = (0..cfg.seq_len).map(|_| rng.random_range(0..units)).collect();
            (seq, b % 2)
        })
        .collect();
    let prefix_len = pool.prefix_len(&task);
    let mut p = Problem {
        model,
        task,
        pool,
        vb,
        batch,
        mode: cfg.mode,
        lm_weight: cfg.lm_weight,
    };

    let mut analytic = Analytic {
        pool: p.pool.zeros_like(),
        vb: p.vb.zeros_like(),
        backbone: p.model.zeros_like(),
    };
    p.loss(Some(&mut analytic))?;
    let groups = [
        (Group::Prompt, collect(|f| analytic.pool.visit(f))),
        (Group::Verbalizer, collect(|f| analytic.vb.visit(f))),
        (Group::Backbone, collect(|f| analytic.backbone.visit(f))),
    ];

    let eps = cfg.epsilon;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: false,
        checked: 0,
        worst: String::new(),
        max_rel_err_prompt: 0.0,
        max_rel_err_verbalizer: 0.0,
        max_rel_err_backbone: 0.0,
        prefix_len,
    };
    for (group, tensors) in &groups {
        for (which, (name, grad)) in tensors.iter().enumerate() {
            let n = grad.len();
            let indices: Vec<usize> = if *group == Group::Backbone {
                (0..cfg.backbone_samples.min(n)).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            for idx in indices {
                p.nudge(*group, which, idx, eps);
                let up = p.loss(None)?;
                p.nudge(*group, which, idx, -2.0 * eps);
                let down = p.loss(None)?;
                p.nudge(*group, which, idx, eps);
                let numeric = (up - down) / (2.0 * eps);
                let a = *grad.iter().nth(idx).expect("index in range");
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                report.checked += 1;
                let slot = match group {
                    Group::Prompt => &mut report.max_rel_err_prompt,
                    Group::Verbalizer => &mut report.max_rel_err_verbalizer,
                    Group::Backbone => &mut report.max_rel_err_backbone,
                };
                *slot = slot.max(rel);
                if rel > report.max_rel_err || report.worst.is_empty() {
                    report.max_rel_err = rel;
                    report.worst = format!("{name}[{idx}]");
                }
            }
        }
    }
    report.pass = report.max_rel_err <= cfg.tolerance;
    Ok(report)
}
