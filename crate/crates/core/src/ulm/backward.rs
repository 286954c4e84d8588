use ndarray::{s, Array2, ArrayView2, Axis};

use super::forward::{ForwardOutput, LayerRecord};
use super::layers::{gelu_grad, layer_norm_backward};
use super::{LayerParams, UlmParameters};
use crate::prompts::DeepPrefix;
use crate::{Error, Real, Result};

/// Gradients produced by [`backward`].
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    /// dL/d(input prompt rows), present when the forward used an input prefix.
    pub input_prefix: Option<Array2<F>>,
    /// dL/d(per-layer key/value prefix rows), present for deep prefixes.
    pub deep_prefix: Option<Vec<DeepPrefix<F>>>,
    /// Backbone gradients, when requested.
    pub backbone: Option<UlmParameters<F>>,
}

/// Reverse pass for a recorded forward.
///
/// `d_logits` must match `out.next_unit_logits` in shape. Backbone gradients
/// are only materialized when `with_backbone` is set; prompt gradients are
/// always returned.
pub fn backward<F: Real>(
    params: &UlmParameters<F>,
    out: &ForwardOutput<F>,
    d_logits: ArrayView2<F>,
    with_backbone: bool,
) -> Result<Gradients<F>> {
    let rec = out
        .record
        .as_ref()
        .ok_or_else(|| Error::Invalid("backward without forward record".into()))?;
    if d_logits.dim() != out.next_unit_logits.dim() {
        return Err(Error::Dimension(format!(
            "d_logits {:?} vs logits {:?}",
            d_logits.dim(),
            out.next_unit_logits.dim()
        )));
    }
    let cfg = &params.config;
    let mut gb = with_backbone.then(|| params.zeros_like());

    // Output projection and final layer norm.
    let rows = out.hidden_states.nrows();
    let real_rows = d_logits.nrows();
    let mut dz = Array2::<F>::zeros((rows, cfg.d_model));
    dz.slice_mut(s![rows - real_rows.., ..])
        .assign(&d_logits.dot(&params.w_out.t()));
    if let Some(g) = gb.as_mut() {
        g.w_out += &rec.z.t().dot(&d_logits);
        g.b_out += &d_logits.sum_axis(Axis(0));
    }
    let mut dx = {
        let lnf = gb.as_mut().map(|g| (&mut g.lnf_gamma, &mut g.lnf_beta));
        layer_norm_backward(dz.view(), &rec.lnf, params.lnf_gamma.view(), lnf)
    };

    let mut deep = rec.deep_len.gt(&0).then(Vec::new);
    for (li, (layer, lrec)) in params.layers.iter().zip(&rec.layers).enumerate().rev() {
        let lg = gb.as_mut().map(|g| &mut g.layers[li]);
        let (dx_in, dk_pre, dv_pre) = block_backward(layer, lrec, cfg.n_heads, rec.deep_len, dx.view(), lg);
        if let Some(d) = deep.as_mut() {
            d.push(DeepPrefix {
                key: dk_pre,
                value: dv_pre,
            });
        }
        dx = dx_in;
    }
    if let Some(d) = deep.as_mut() {
        d.reverse();
    }

    if let Some(m) = &rec.emb_mask {
        dx *= m;
    }
    let n_in = rec.input_len;
    if let Some(g) = gb.as_mut() {
        let seq = dx.nrows();
        let mut pos = g.position_embedding.slice_mut(s![..seq, ..]);
        pos += &dx;
        for (i, &t) in rec.tokens.iter().enumerate() {
            let mut row = g.token_embedding.row_mut(t);
            row += &dx.row(n_in + i);
        }
    }
    let input_prefix = (n_in > 0).then(|| dx.slice(s![..n_in, ..]).to_owned());
    Ok(Gradients {
        input_prefix,
        deep_prefix: deep,
        backbone: gb,
    })
}

/// Returns (dL/dx for all block input rows, dK prefix, dV prefix).
fn block_backward<F: Real>(
    p: &LayerParams<F>,
    r: &LayerRecord<F>,
    n_heads: usize,
    ld: usize,
    dy: ArrayView2<F>,
    mut g: Option<&mut LayerParams<F>>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let q0 = r.q0;
    let seq = r.a.nrows();
    let d = r.a.ncols();
    let dh = d / n_heads;

    // y = h + drop(ffn(ln2(h)))
    let mut d_ffn = dy.to_owned();
    if let Some(m) = &r.ffn_mask {
        d_ffn *= m;
    }
    let mut du = d_ffn.dot(&p.w_ff2.t());
    du.zip_mut_with(&r.u, |v, &u| *v = *v * gelu_grad(u));
    let db = du.dot(&p.w_ff1.t());
    if let Some(g) = g.as_deref_mut() {
        g.w_ff2 += &r.g.t().dot(&d_ffn);
        g.b_ff2 += &d_ffn.sum_axis(Axis(0));
        g.w_ff1 += &r.b.t().dot(&du);
        g.b_ff1 += &du.sum_axis(Axis(0));
    }
    let ln2g = g.as_deref_mut().map(|g| (&mut g.ln2_gamma, &mut g.ln2_beta));
    let dh_res = layer_norm_backward(db.view(), &r.ln2, p.ln2_gamma.view(), ln2g) + dy;

    // h = x[q0..] + drop(attn(ln1(x)))
    let mut d_attn = dh_res.clone();
    if let Some(m) = &r.attn_mask {
        d_attn *= m;
    }
    let d_ctx = d_attn.dot(&p.w_o.t());
    if let Some(g) = g.as_deref_mut() {
        g.w_o += &r.ctx.t().dot(&d_attn);
        g.b_o += &d_attn.sum_axis(Axis(0));
    }

    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::<F>::zeros(r.q.raw_dim());
    let mut dk_full = Array2::<F>::zeros(r.k_full.raw_dim());
    let mut dv_full = Array2::<F>::zeros(r.v_full.raw_dim());
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let probs = &r.probs[h];
        let dctx_h = d_ctx.slice(cols);
        let mut ds = dctx_h.dot(&r.v_full.slice(cols).t());
        dv_full.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
            let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<F>();
            drow.zip_mut_with(&prow, |dv, &pv| *dv = pv * (*dv - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&r.k_full.slice(cols)));
        dk_full.slice_mut(cols).assign(&ds.t().dot(&r.q.slice(cols)));
    }
    let dk_pre = dk_full.slice(s![..ld, ..]).to_owned();
    let dv_pre = dv_full.slice(s![..ld, ..]).to_owned();
    let dk = dk_full.slice(s![ld.., ..]);
    let dv = dv_full.slice(s![ld.., ..]);

    let mut da = dk.dot(&p.w_k.t()) + dv.dot(&p.w_v.t());
    {
        let mut tail = da.slice_mut(s![q0.., ..]);
        tail += &dq.dot(&p.w_q.t());
    }
    if let Some(g) = g.as_deref_mut() {
        let a_q = r.a.slice(s![q0.., ..]);
        g.w_q += &a_q.t().dot(&dq);
        g.b_q += &dq.sum_axis(Axis(0));
        g.w_k += &r.a.t().dot(&dk);
        g.b_k += &dk.sum_axis(Axis(0));
        g.w_v += &r.a.t().dot(&dv);
        g.b_v += &dv.sum_axis(Axis(0));
    }
    let ln1g = g.map(|g| (&mut g.ln1_gamma, &mut g.ln1_beta));
    let mut dx = layer_norm_backward(da.view(), &r.ln1, p.ln1_gamma.view(), ln1g);
    debug_assert_eq!(dx.nrows(), seq);
    {
        let mut tail = dx.slice_mut(s![q0.., ..]);
        tail += &dh_res;
    }
    (dx, dk_pre, dv_pre)
}
