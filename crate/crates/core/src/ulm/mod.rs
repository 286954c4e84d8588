//! Causal Transformer unit language model used as the frozen backbone.
//!
//! The network is a pre-layer-norm decoder: learned token and position
//! embeddings, `n_layers` blocks of masked multi-head self-attention and a
//! GELU feed-forward network, a final layer norm and an untied projection to
//! next-unit logits. Prompts enter in two places (see [`crate::prompts`]):
//! as embedded rows placed before BOS, and as per-layer key/value rows that
//! every position may attend to.
//!
//! Gradients are computed by hand-written reverse passes over a
//! [`ForwardRecord`]; the record stores every activation and dropout mask the
//! reverse pass needs, so gradients are exact for the recorded computation.

mod backward;
mod forward;
mod gradcheck;
mod layers;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

pub use backward::{backward, Gradients};
pub use forward::{forward, Dropout, ForwardOutput, ForwardRecord, Readout};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::softmax;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UlmConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout_p: f64,
    /// Number of units K plus one BOS token.
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for UlmConfig {
    fn default() -> Self {
        Self::desk(100)
    }
}

impl UlmConfig {
    /// Desk-scale default for a codebook with `k` units.
    pub fn desk(k: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ffn: 256,
            dropout_p: 0.1,
            vocab_size: k + 1,
            max_positions: 512,
        }
    }

    /// The 12-layer, 16-head, 1024/4096 configuration of the GSLM unit LM.
    pub fn paper_scale(k: usize) -> Self {
        Self {
            n_layers: 12,
            n_heads: 16,
            d_model: 1024,
            d_ffn: 4096,
            dropout_p: 0.1,
            vocab_size: k + 1,
            max_positions: 3072,
        }
    }

    /// Small configuration used by gradient checks.
    pub fn tiny(k: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 16,
            d_ffn: 32,
            dropout_p: 0.0,
            vocab_size: k + 1,
            max_positions: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1");
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_ffn == 0 {
            return bad("n_heads, d_model and d_ffn must be >= 1");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model not divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must be in [0, 1)");
        }
        if self.vocab_size < 3 {
            return bad("vocab_size must cover at least two units plus BOS");
        }
        if self.max_positions < 2 {
            return bad("max_positions must be >= 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Index of the BOS token, which follows the K unit ids.
    pub fn bos(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn units(&self) -> usize {
        self.vocab_size - 1
    }
}

/// Weights of one Transformer block. Matrices are stored input-major
/// (`x.dot(w)` applies them).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gamma: Array1<F>,
    pub ln1_beta: Array1<F>,
    pub w_q: Array2<F>,
    pub b_q: Array1<F>,
    pub w_k: Array2<F>,
    pub b_k: Array1<F>,
    pub w_v: Array2<F>,
    pub b_v: Array1<F>,
    pub w_o: Array2<F>,
    pub b_o: Array1<F>,
    pub ln2_gamma: Array1<F>,
    pub ln2_beta: Array1<F>,
    pub w_ff1: Array2<F>,
    pub b_ff1: Array1<F>,
    pub w_ff2: Array2<F>,
    pub b_ff2: Array1<F>,
}

/// Backbone weights. Also used as the container for backbone gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct UlmParameters<F> {
    pub config: UlmConfig,
    pub token_embedding: Array2<F>,
    pub position_embedding: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_gamma: Array1<F>,
    pub lnf_beta: Array1<F>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
    /// Marks every tensor as excluded from optimization.
    pub frozen: bool,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(ln1_gamma, ln1_beta, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_gamma, ln2_beta, w_ff1, b_ff1, w_ff2, b_ff2)
    };
}

impl<F: Real> LayerParams<F> {
    fn zeros(cfg: &UlmConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ffn;
        Self {
            ln1_gamma: Array1::zeros(d),
            ln1_beta: Array1::zeros(d),
            w_q: Array2::zeros((d, d)),
            b_q: Array1::zeros(d),
            w_k: Array2::zeros((d, d)),
            b_k: Array1::zeros(d),
            w_v: Array2::zeros((d, d)),
            b_v: Array1::zeros(d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2_gamma: Array1::zeros(d),
            ln2_beta: Array1::zeros(d),
            w_ff1: Array2::zeros((d, f)),
            b_ff1: Array1::zeros(f),
            w_ff2: Array2::zeros((f, d)),
            b_ff2: Array1::zeros(d),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        macro_rules! go {
            ($($n:ident),*) => { $( f(format!("{prefix}.{}", stringify!($n)), self.$n.view().into_dyn()); )* };
        }
        layer_fields!(go);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, F>)) {
        macro_rules! go {
            ($($n:ident),*) => { $( f(format!("{prefix}.{}", stringify!($n)), self.$n.view_mut().into_dyn()); )* };
        }
        layer_fields!(go);
    }
}

impl<F: Real> UlmParameters<F> {
    /// All-zero tensors shaped for `cfg`, including layer norm scales.
    pub fn zeros(cfg: &UlmConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        Ok(Self {
            config: cfg.clone(),
            token_embedding: Array2::zeros((v, d)),
            position_embedding: Array2::zeros((cfg.max_positions, d)),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            lnf_gamma: Array1::zeros(d),
            lnf_beta: Array1::zeros(d),
            w_out: Array2::zeros((d, v)),
            b_out: Array1::zeros(v),
            frozen: true,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.config).expect("config already validated");
        z.frozen = self.frozen;
        z
    }

    /// Visits every tensor with its stable dotted name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        f("backbone.token_embedding".into(), self.token_embedding.view().into_dyn());
        f("backbone.position_embedding".into(), self.position_embedding.view().into_dyn());
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("backbone.layers.{i}"), f);
        }
        f("backbone.lnf_gamma".into(), self.lnf_gamma.view().into_dyn());
        f("backbone.lnf_beta".into(), self.lnf_beta.view().into_dyn());
        f("backbone.w_out".into(), self.w_out.view().into_dyn());
        f("backbone.b_out".into(), self.b_out.view().into_dyn());
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, ArrayViewMutD<'a, F>)) {
        f("backbone.token_embedding".into(), self.token_embedding.view_mut().into_dyn());
        f("backbone.position_embedding".into(), self.position_embedding.view_mut().into_dyn());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("backbone.layers.{i}"), f);
        }
        f("backbone.lnf_gamma".into(), self.lnf_gamma.view_mut().into_dyn());
        f("backbone.lnf_beta".into(), self.lnf_beta.view_mut().into_dyn());
        f("backbone.w_out".into(), self.w_out.view_mut().into_dyn());
        f("backbone.b_out".into(), self.b_out.view_mut().into_dyn());
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n));
        names
    }

    /// Adds `other` elementwise into `self`.
    pub fn accumulate(&mut self, other: &Self) {
        let mut theirs = Vec::new();
        other.visit(&mut |_, t| theirs.push(t));
        let mut i = 0;
        self.visit_mut(&mut |_, mut t| {
            t += &theirs[i];
            i += 1;
        });
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Deterministically initializes a backbone.
///
/// Projections draw from `U(-sqrt(3/fan_in), sqrt(3/fan_in))`, embeddings
/// from `U(-EMBED_SCALE, EMBED_SCALE)`; biases are zero, layer norm scales are
/// one and shifts zero. Tensors are filled in [`UlmParameters::visit`] order
/// from a single ChaCha stream.
pub fn init_backbone<F: Real>(cfg: &UlmConfig, seed: u64) -> Result<UlmParameters<F>> {
    let mut p = UlmParameters::<F>::zeros(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut(&mut |name, mut t| {
        let leaf = name.rsplit('.').next().unwrap_or_default();
        let scale = if leaf.ends_with("embedding") {
            Some(EMBED_SCALE)
        } else if leaf.starts_with("w_") {
            let fan_in = t.shape()[0] as f64;
            Some((3.0 / fan_in).sqrt())
        } else {
            None
        };
        match scale {
            Some(a) => t.mapv_inplace(|_| F::from_f64(rng.random_range(-a..a))),
            None if leaf.ends_with("gamma") => t.fill(F::one()),
            None => t.fill(F::zero()),
        }
    });
    Ok(p)
}

/// `[BOS, units...]` as model tokens.
pub fn with_bos(units: &[usize], cfg: &UlmConfig) -> Vec<usize> {
    let mut t = Vec::with_capacity(units.len() + 1);
    t.push(cfg.bos());
    t.extend_from_slice(units);
    t
}

/// Half-width of the uniform embedding initialization.
pub const EMBED_SCALE: f64 = 0.2;

/// Converts parameters between precisions.
pub fn cast_params<A: Real, B: Real>(p: &UlmParameters<A>) -> UlmParameters<B> {
    let mut out = UlmParameters::<B>::zeros(&p.config).expect("validated");
    out.frozen = p.frozen;
    let mut src = Vec::new();
    p.visit(&mut |_, t| src.push(t));
    let mut i = 0;
    out.visit_mut(&mut |_, mut t| {
        t.zip_mut_with(&src[i], |o, s| *o = B::from_f64(s.as_f64()));
        i += 1;
    });
    out
}
