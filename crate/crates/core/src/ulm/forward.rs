use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{causal_softmax, dropout_mask, gelu, layer_norm, LnCache};
use super::{LayerParams, UlmParameters};
use crate::prompts::PromptApplication;
use crate::{Error, Real, Result};

/// Which positions need next-unit logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    /// Every real (non-prompt) position.
    All,
    /// Only the last position. The final block then computes its attention and
    /// feed-forward output for that single row.
    Last,
}

/// Train-mode dropout; masks are drawn from a ChaCha stream seeded per call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dropout {
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerRecord<F> {
    pub q0: usize,
    pub ln1: LnCache<F>,
    pub a: Array2<F>,
    pub q: Array2<F>,
    pub k_full: Array2<F>,
    pub v_full: Array2<F>,
    pub probs: Vec<Array2<F>>,
    pub ctx: Array2<F>,
    pub attn_mask: Option<Array2<F>>,
    pub ln2: LnCache<F>,
    pub b: Array2<F>,
    pub u: Array2<F>,
    pub g: Array2<F>,
    pub ffn_mask: Option<Array2<F>>,
}

/// Activations retained by [`forward`] for the reverse pass.
#[derive(Clone, Debug)]
pub struct ForwardRecord<F> {
    pub(crate) tokens: Vec<usize>,
    pub(crate) input_len: usize,
    pub(crate) deep_len: usize,
    pub(crate) emb_mask: Option<Array2<F>>,
    pub(crate) layers: Vec<LayerRecord<F>>,
    pub(crate) lnf: LnCache<F>,
    /// Final normalized rows that produced logits.
    pub(crate) z: Array2<F>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    /// Output of the last block (before the final layer norm) for the rows it
    /// computed: all `prefix_len + seq_len` rows, or only the last row under
    /// [`Readout::Last`].
    pub hidden_states: Array2<F>,
    /// Next-unit logits, one row per read-out real position.
    pub next_unit_logits: Array2<F>,
    /// Real-token index (0 = BOS) of the first logits row.
    pub first_position: usize,
    pub record: Option<ForwardRecord<F>>,
}

impl<F: Real> ForwardOutput<F> {
    /// Logits at the last real position.
    pub fn last_logits(&self) -> ndarray::ArrayView1<'_, F> {
        self.next_unit_logits.row(self.next_unit_logits.nrows() - 1)
    }
}

/// Runs the backbone over `tokens` (BOS already prepended) with `prompt`.
///
/// Sequence layout is `[input prompt rows ; token rows]`, with learned
/// positions `0..len`. Deep-prefix key/value rows are prepended to each
/// block's keys and values without positions and are visible to every row.
pub fn forward<F: Real>(
    tokens: &[usize],
    params: &UlmParameters<F>,
    prompt: &PromptApplication<F>,
    dropout: Option<Dropout>,
    readout: Readout,
    record: bool,
) -> Result<ForwardOutput<F>> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::Invalid("forward needs at least one token".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfVocab {
            token: bad,
            vocab: cfg.vocab_size,
        });
    }
    let input_len = prompt.input_len();
    let deep_len = prompt.deep_len();
    if let Some(deep) = &prompt.deep {
        if deep.len() != cfg.n_layers {
            return Err(Error::Dimension(format!(
                "deep prefix has {} layers, model has {}",
                deep.len(),
                cfg.n_layers
            )));
        }
    }
    let seq = input_len + tokens.len();
    if seq > cfg.max_positions {
        return Err(Error::PositionOverflow {
            len: seq,
            max: cfg.max_positions,
        });
    }
    let d = cfg.d_model;
    let p_drop = match dropout {
        Some(_) if cfg.dropout_p > 0.0 => cfg.dropout_p,
        _ => 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(dropout.map_or(0, |d| d.seed));

    let mut x = Array2::<F>::zeros((seq, d));
    if let Some(inp) = &prompt.input {
        if inp.ncols() != d {
            return Err(Error::Dimension(format!("input prefix width {} != d_model {d}", inp.ncols())));
        }
        x.slice_mut(s![..input_len, ..]).assign(inp);
    }
    for (i, &t) in tokens.iter().enumerate() {
        x.row_mut(input_len + i).assign(&params.token_embedding.row(t));
    }
    x += &params.position_embedding.slice(s![..seq, ..]);
    let emb_mask = (p_drop > 0.0).then(|| dropout_mask::<F>(&mut rng, seq, d, p_drop));
    if let Some(m) = &emb_mask {
        x *= m;
    }

    let n_layers = params.layers.len();
    let mut layer_records = Vec::with_capacity(if record { n_layers } else { 0 });
    for (li, layer) in params.layers.iter().enumerate() {
        let q0 = if li + 1 == n_layers && readout == Readout::Last {
            seq - 1
        } else {
            0
        };
        let (deep_k, deep_v) = match &prompt.deep {
            Some(dp) => (Some(&dp[li].key), Some(&dp[li].value)),
            None => (None, None),
        };
        let (y, rec) = block_forward(layer, cfg.n_heads, &x, q0, deep_k, deep_v, p_drop, &mut rng);
        if record {
            layer_records.push(rec);
        }
        x = y;
    }

    let (z, lnf) = layer_norm(x.view(), params.lnf_gamma.view(), params.lnf_beta.view());
    // Rows of `x` now cover sequence positions `out0..seq`.
    let out0 = seq - x.nrows();
    let first_real_row = input_len.saturating_sub(out0);
    let z_real = z.slice(s![first_real_row.., ..]);
    let logits = z_real.dot(&params.w_out) + &params.b_out;
    let first_position = out0 + first_real_row - input_len;

    let record = record.then(|| ForwardRecord {
        tokens: tokens.to_vec(),
        input_len,
        deep_len,
        emb_mask,
        layers: layer_records,
        lnf,
        z: z_real.to_owned(),
    });
    Ok(ForwardOutput {
        hidden_states: x,
        next_unit_logits: logits,
        first_position,
        record,
    })
}

#[allow(clippy::too_many_arguments)]
fn block_forward<F: Real>(
    p: &LayerParams<F>,
    n_heads: usize,
    x: &Array2<F>,
    q0: usize,
    deep_k: Option<&Array2<F>>,
    deep_v: Option<&Array2<F>>,
    p_drop: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<F>, LayerRecord<F>) {
    let seq = x.nrows();
    let d = x.ncols();
    let dh = d / n_heads;
    let ld = deep_k.map_or(0, |k| k.nrows());

    let (a, ln1) = layer_norm(x.view(), p.ln1_gamma.view(), p.ln1_beta.view());
    let a_q = a.slice(s![q0.., ..]);
    let q = a_q.dot(&p.w_q) + &p.b_q;
    let k = a.dot(&p.w_k) + &p.b_k;
    let v = a.dot(&p.w_v) + &p.b_v;
    let (k_full, v_full) = match (deep_k, deep_v) {
        (Some(dk), Some(dv)) => (
            ndarray::concatenate(Axis(0), &[dk.view(), k.view()]).expect("widths match"),
            ndarray::concatenate(Axis(0), &[dv.view(), v.view()]).expect("widths match"),
        ),
        _ => (k, v),
    };

    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let sq = seq - q0;
    let mut ctx = Array2::<F>::zeros((sq, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k_full.slice(cols).t());
        scores *= scale;
        causal_softmax(&mut scores, ld, q0);
        ctx.slice_mut(cols).assign(&scores.dot(&v_full.slice(cols)));
        probs.push(scores);
    }
    let mut attn = ctx.dot(&p.w_o) + &p.b_o;
    let attn_mask = (p_drop > 0.0).then(|| dropout_mask::<F>(rng, sq, d, p_drop));
    if let Some(m) = &attn_mask {
        attn *= m;
    }
    let h_res = &x.slice(s![q0.., ..]) + &attn;

    let (b, ln2) = layer_norm(h_res.view(), p.ln2_gamma.view(), p.ln2_beta.view());
    let u = b.dot(&p.w_ff1) + &p.b_ff1;
    let g = u.mapv(gelu);
    let mut ffn = g.dot(&p.w_ff2) + &p.b_ff2;
    let ffn_mask = (p_drop > 0.0).then(|| dropout_mask::<F>(rng, sq, d, p_drop));
    if let Some(m) = &ffn_mask {
        ffn *= m;
    }
    let y = h_res + ffn;
    let rec = LayerRecord {
        q0,
        ln1,
        a,
        q,
        k_full,
        v_full,
        probs,
        ctx,
        attn_mask,
        ln2,
        b,
        u,
        g,
        ffn_mask,
    };
    (y, rec)
}
