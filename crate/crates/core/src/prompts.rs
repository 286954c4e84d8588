//! Trainable prompt pool and prefix composition.
//!
//! A task's prefix is `[disease ‖ language ‖ class_1 ‖ … ‖ class_C]`. Entries are
//! keyed by symbol and shared between every task using that symbol. Each entry
//! holds an input-prefix block (`L × d_model`, placed before BOS) and/or one
//! key/value block per Transformer layer, depending on [`PromptMode`].

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ulm::{Gradients, UlmConfig};
use crate::{Error, Real, Result};

/// Standard deviation of prompt initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Embedded rows before BOS only.
    InputPrefix,
    /// Per-layer key/value prefixes only.
    DeepPrefix,
    /// Both of the above.
    #[default]
    Both,
}

impl PromptMode {
    pub fn uses_input(self) -> bool {
        matches!(self, PromptMode::InputPrefix | PromptMode::Both)
    }

    pub fn uses_deep(self) -> bool {
        matches!(self, PromptMode::DeepPrefix | PromptMode::Both)
    }

    fn covers(self, other: PromptMode) -> bool {
        (!other.uses_input() || self.uses_input()) && (!other.uses_deep() || self.uses_deep())
    }
}

/// Rows contributed by one disease, one language and one class entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptLengths {
    pub disease: usize,
    pub language: usize,
    pub class: usize,
}

impl Default for PromptLengths {
    fn default() -> Self {
        Self {
            disease: 8,
            language: 4,
            class: 4,
        }
    }
}

impl PromptLengths {
    pub fn zero() -> Self {
        Self {
            disease: 0,
            language: 0,
            class: 0,
        }
    }

    /// Composed prefix length for a task with `n_classes` classes.
    pub fn prefix_len(&self, n_classes: usize) -> usize {
        self.disease + self.language + n_classes * self.class
    }
}

/// One classification task: which disease, in which language, over which
/// classes (in canonical order).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskSpec {
    pub disease: String,
    pub language: String,
    pub classes: Vec<String>,
}

impl TaskSpec {
    pub fn new(disease: &str, language: &str, classes: &[&str]) -> Self {
        Self {
            disease: disease.to_string(),
            language: language.to_string(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
        }
    }

    /// Stable identifier, `disease/language`.
    pub fn id(&self) -> String {
        format!("{}/{}", self.disease, self.language)
    }

    pub fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<_> = self.classes.iter().collect();
        if distinct.len() != self.classes.len() {
            return Err(Error::Config(format!("task {}: duplicate class symbols", self.id())));
        }
        if self.classes.len() < 2 {
            return Err(Error::Config(format!("task {}: needs at least two classes", self.id())));
        }
        Ok(())
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }
}

/// Per-layer key and value prefix rows, in the projected key/value space.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepPrefix<F> {
    pub key: Array2<F>,
    pub value: Array2<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEntry<F> {
    pub input: Option<Array2<F>>,
    pub deep: Vec<DeepPrefix<F>>,
}

impl<F: Real> PromptEntry<F> {
    fn zeros(len: usize, d: usize, n_layers: usize, mode: PromptMode) -> Self {
        Self {
            input: mode.uses_input().then(|| Array2::zeros((len, d))),
            deep: if mode.uses_deep() {
                (0..n_layers)
                    .map(|_| DeepPrefix {
                        key: Array2::zeros((len, d)),
                        value: Array2::zeros((len, d)),
                    })
                    .collect()
            } else {
                Vec::new()
            },
        }
    }

    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        if let Some(t) = &self.input {
            out.push(("input".to_string(), t.view().into_dyn()));
        }
        for (l, dp) in self.deep.iter().enumerate() {
            out.push((format!("deep.{l}.key"), dp.key.view().into_dyn()));
            out.push((format!("deep.{l}.value"), dp.value.view().into_dyn()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        if let Some(t) = &mut self.input {
            out.push(("input".to_string(), t.view_mut().into_dyn()));
        }
        for (l, dp) in self.deep.iter_mut().enumerate() {
            out.push((format!("deep.{l}.key"), dp.key.view_mut().into_dyn()));
            out.push((format!("deep.{l}.value"), dp.value.view_mut().into_dyn()));
        }
        out
    }
}

/// Keyed store of disease, language and class prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool<F> {
    pub lengths: PromptLengths,
    pub mode: PromptMode,
    pub d_model: usize,
    pub n_layers: usize,
    pub disease: BTreeMap<String, PromptEntry<F>>,
    pub language: BTreeMap<String, PromptEntry<F>>,
    pub class: BTreeMap<String, PromptEntry<F>>,
}

/// Which table an entry lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    Disease,
    Language,
    Class,
}

impl PromptKind {
    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Disease => "disease",
            PromptKind::Language => "language",
            PromptKind::Class => "class",
        }
    }
}

/// Composed prompt for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptApplication<F> {
    pub mode: PromptMode,
    pub input: Option<Array2<F>>,
    pub deep: Option<Vec<DeepPrefix<F>>>,
}

impl<F: Real> PromptApplication<F> {
    /// No prompt at all: the plain language model.
    pub fn none() -> Self {
        Self {
            mode: PromptMode::InputPrefix,
            input: None,
            deep: None,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.as_ref().map_or(0, |a| a.nrows())
    }

    pub fn deep_len(&self) -> usize {
        self.deep
            .as_ref()
            .and_then(|d| d.first())
            .map_or(0, |d| d.key.nrows())
    }
}

/// Builds a pool covering every symbol used by `tasks`.
///
/// Entries are drawn i.i.d. from `N(0, INIT_STD²)` in table order (disease,
/// language, class; each sorted by symbol), input block first and then the
/// per-layer key/value blocks.
pub fn init_pool<F: Real>(
    tasks: &[TaskSpec],
    lengths: PromptLengths,
    mode: PromptMode,
    cfg: &UlmConfig,
    seed: u64,
) -> Result<PromptPool<F>> {
    if tasks.is_empty() {
        return Err(Error::Config("prompt pool needs at least one task".into()));
    }
    for t in tasks {
        t.validate()?;
    }
    let d = cfg.d_model;
    let n_layers = cfg.n_layers;
    let diseases: BTreeSet<&str> = tasks.iter().map(|t| t.disease.as_str()).collect();
    let languages: BTreeSet<&str> = tasks.iter().map(|t| t.language.as_str()).collect();
    let classes: BTreeSet<&str> = tasks
        .iter()
        .flat_map(|t| t.classes.iter().map(String::as_str))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut build = |keys: &BTreeSet<&str>, len: usize| -> BTreeMap<String, PromptEntry<F>> {
        keys.iter()
            .map(|k| {
                let mut e = PromptEntry::zeros(len, d, n_layers, mode);
                for (_, mut t) in e.tensors_mut() {
                    t.mapv_inplace(|_| F::from_f64(normal.sample(&mut rng)));
                }
                (k.to_string(), e)
            })
            .collect()
    };
    let disease = build(&diseases, lengths.disease);
    let language = build(&languages, lengths.language);
    let class = build(&classes, lengths.class);
    Ok(PromptPool {
        lengths,
        mode,
        d_model: d,
        n_layers,
        disease,
        language,
        class,
    })
}

impl<F: Real> PromptPool<F> {
    /// Same layout, all zeros. Used as the gradient container.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &BTreeMap<String, PromptEntry<F>>, len: usize| {
            m.keys()
                .map(|k| (k.clone(), PromptEntry::zeros(len, self.d_model, self.n_layers, self.mode)))
                .collect()
        };
        Self {
            lengths: self.lengths,
            mode: self.mode,
            d_model: self.d_model,
            n_layers: self.n_layers,
            disease: z(&self.disease, self.lengths.disease),
            language: z(&self.language, self.lengths.language),
            class: z(&self.class, self.lengths.class),
        }
    }

    fn entry(&self, kind: PromptKind, key: &str) -> Result<&PromptEntry<F>> {
        let table = match kind {
            PromptKind::Disease => &self.disease,
            PromptKind::Language => &self.language,
            PromptKind::Class => &self.class,
        };
        table
            .get(key)
            .ok_or_else(|| Error::UnknownId(format!("{} prompt {key:?}", kind.name())))
    }

    fn entry_mut(&mut self, kind: PromptKind, key: &str) -> Result<&mut PromptEntry<F>> {
        let table = match kind {
            PromptKind::Disease => &mut self.disease,
            PromptKind::Language => &mut self.language,
            PromptKind::Class => &mut self.class,
        };
        table
            .get_mut(key)
            .ok_or_else(|| Error::UnknownId(format!("{} prompt {key:?}", kind.name())))
    }

    /// Entry keys of `task` in composition order.
    fn segments(task: &TaskSpec) -> Vec<(PromptKind, &str)> {
        let mut out = vec![
            (PromptKind::Disease, task.disease.as_str()),
            (PromptKind::Language, task.language.as_str()),
        ];
        out.extend(task.classes.iter().map(|c| (PromptKind::Class, c.as_str())));
        out
    }

    pub fn prefix_len(&self, task: &TaskSpec) -> usize {
        self.lengths.prefix_len(task.classes.len())
    }

    /// Visits every non-empty tensor as `prompt.<kind>.<symbol>.<part>`, in
    /// table order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        for (kind, table) in [("disease", &self.disease), ("language", &self.language), ("class", &self.class)] {
            for (key, e) in table {
                for (part, t) in e.tensors() {
                    if !t.is_empty() {
                        f(format!("prompt.{kind}.{key}.{part}"), t);
                    }
                }
            }
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, ArrayViewMutD<'a, F>)) {
        for (kind, table) in [
            ("disease", &mut self.disease),
            ("language", &mut self.language),
            ("class", &mut self.class),
        ] {
            for (key, e) in table.iter_mut() {
                for (part, t) in e.tensors_mut() {
                    if !t.is_empty() {
                        f(format!("prompt.{kind}.{key}.{part}"), t);
                    }
                }
            }
        }
    }

    /// Adds a forward pass's prefix gradients back into the entries of `task`.
    pub fn scatter_gradients(&mut self, task: &TaskSpec, grads: &Gradients<F>) -> Result<()> {
        let lengths = self.lengths;
        let mut row = 0;
        for (kind, key) in Self::segments(task) {
            let len = match kind {
                PromptKind::Disease => lengths.disease,
                PromptKind::Language => lengths.language,
                PromptKind::Class => lengths.class,
            };
            let e = self.entry_mut(kind, key)?;
            if let (Some(dst), Some(src)) = (e.input.as_mut(), grads.input_prefix.as_ref()) {
                *dst += &src.slice(s![row..row + len, ..]);
            }
            if let Some(deep) = grads.deep_prefix.as_ref() {
                for (dst, src) in e.deep.iter_mut().zip(deep) {
                    dst.key += &src.key.slice(s![row..row + len, ..]);
                    dst.value += &src.value.slice(s![row..row + len, ..]);
                }
            }
            row += len;
        }
        Ok(())
    }
}

/// Concatenates the prefix of `task` for `mode`.
pub fn compose<F: Real>(task: &TaskSpec, pool: &PromptPool<F>, mode: PromptMode) -> Result<PromptApplication<F>> {
    if !pool.mode.covers(mode) {
        return Err(Error::Config(format!(
            "pool built for {:?} cannot compose {:?}",
            pool.mode, mode
        )));
    }
    let entries = PromptPool::<F>::segments(task)
        .into_iter()
        .map(|(kind, key)| pool.entry(kind, key))
        .collect::<Result<Vec<_>>>()?;
    let input = mode.uses_input().then(|| {
        let views: Vec<_> = entries
            .iter()
            .map(|e| e.input.as_ref().expect("mode checked").view())
            .collect();
        ndarray::concatenate(Axis(0), &views).expect("equal widths")
    });
    let deep = mode.uses_deep().then(|| {
        (0..pool.n_layers)
            .map(|l| {
                let keys: Vec<_> = entries.iter().map(|e| e.deep[l].key.view()).collect();
                let values: Vec<_> = entries.iter().map(|e| e.deep[l].value.view()).collect();
                DeepPrefix {
                    key: ndarray::concatenate(Axis(0), &keys).expect("equal widths"),
                    value: ndarray::concatenate(Axis(0), &values).expect("equal widths"),
                }
            })
            .collect()
    });
    Ok(PromptApplication { mode, input, deep })
}
