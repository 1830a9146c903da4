//! Forward pass with cached activations and its exact reverse pass.
//!
//! Layout: pixel-major matrices, row `p = h * W + w`.
//!
//! ```text
//! A1 = tanh(im2col(x) W1 + b1)            P x hidden
//! F  = tanh(im2col(A1) W2 + b2)           P x d
//! E  = F + PE                             per-pixel embeddings
//! A  = softmax_rows((Q0 Wq)(E Wk)^T / sqrt d)
//! X  = Q0 + (A E Wv) Wo
//! Q  = X + tanh(X Wf1 + bf1) Wf2 + bf2    per-segment embeddings
//! p  = softmax_rows(Q Wc^T + bc)
//! M  = tanh(Q Wm1 + bm1) Wm2 + bm2        mask embeddings
//! L  = M E^T                              N x P mask logits
//! ```

use ndarray::{Array2, ArrayView2, Axis};

use super::params::{MaskActivation, ModelParams, Weights};
use crate::error::{shape_err, Error, Result};
use crate::synthdata::Image;

/// Model output for one image: N (class distribution, soft mask) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub height: usize,
    pub width: usize,
    pub activation: MaskActivation,
    /// N x (K + 1), column 0 is "no object".
    pub class_probs: Array2<f64>,
    /// N x (H * W).
    pub mask_logits: Array2<f64>,
    /// N x (H * W), values in [0, 1].
    pub masks: Array2<f64>,
}

/// Activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    cols1: Array2<f64>,
    act1: Array2<f64>,
    cols2: Array2<f64>,
    feat: Array2<f64>,
    pixel: Array2<f64>,
    q_proj: Array2<f64>,
    k_proj: Array2<f64>,
    values: Array2<f64>,
    attn: Array2<f64>,
    context: Array2<f64>,
    resid: Array2<f64>,
    ffn_hidden: Array2<f64>,
    segment: Array2<f64>,
    mask_hidden: Array2<f64>,
    mask_embed: Array2<f64>,
    class_probs: Array2<f64>,
}

pub(crate) fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    logits
}

/// Backprop through a row-wise softmax given its output and upstream grad.
pub(crate) fn softmax_rows_backward(probs: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    let mut out = probs * upstream;
    for (mut row, p) in out.rows_mut().into_iter().zip(probs.rows()) {
        let dot = row.sum();
        row.zip_mut_with(&p, |g, &pv| *g -= pv * dot);
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn tanh_backward(out: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    let mut g = upstream.clone();
    g.zip_mut_with(out, |g, &y| *g *= 1.0 - y * y);
    g
}

fn add_row(mut m: Array2<f64>, bias: &Array2<f64>) -> Array2<f64> {
    m += &bias.row(0);
    m
}

fn col_sum(m: &Array2<f64>) -> Array2<f64> {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// 3x3 zero-padded patches: P x (9 * channels), column `(ky * 3 + kx) * C + c`.
fn im2col(input: ArrayView2<f64>, height: usize, width: usize) -> Array2<f64> {
    let c = input.ncols();
    let mut cols = Array2::zeros((height * width, 9 * c));
    for y in 0..height {
        for x in 0..width {
            let mut row = cols.row_mut(y * width + x);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    let src = input.row(sy as usize * width + sx as usize);
                    let base = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        row[base + ch] = src[ch];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`.
fn col2im(cols: &Array2<f64>, height: usize, width: usize, channels: usize) -> Array2<f64> {
    let mut out = Array2::zeros((height * width, channels));
    for y in 0..height {
        for x in 0..width {
            let row = cols.row(y * width + x);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    let mut dst = out.row_mut(sy as usize * width + sx as usize);
                    let base = (ky * 3 + kx) * channels;
                    for ch in 0..channels {
                        dst[ch] += row[base + ch];
                    }
                }
            }
        }
    }
    out
}

/// Fixed sinusoidal grid encoding, P x d. Channel groups of four carry
/// sin/cos of the row and column at angular frequency pi / 2^(k+1).
pub fn positional_encoding(height: usize, width: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((height * width, dim));
    for y in 0..height {
        for x in 0..width {
            let mut row = pe.row_mut(y * width + x);
            for j in 0..dim {
                let freq = std::f64::consts::PI / f64::powi(2.0, (j / 4) as i32 + 1);
                row[j] = match j % 4 {
                    0 => (y as f64 * freq).sin(),
                    1 => (y as f64 * freq).cos(),
                    2 => (x as f64 * freq).sin(),
                    _ => (x as f64 * freq).cos(),
                };
            }
        }
    }
    pe
}

fn finite(layer: &str, m: &Array2<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer.into() })
    }
}

pub fn forward(params: &ModelParams, image: &Image) -> Result<(PredictionSet, ForwardCache)> {
    let cfg = &params.config;
    if image.channels != cfg.channels || image.height != cfg.height || image.width != cfg.width {
        return Err(shape_err(
            format!("{}x{}x{}", cfg.channels, cfg.height, cfg.width),
            format!("{}x{}x{}", image.channels, image.height, image.width),
        ));
    }
    let (h, w, d) = (cfg.height, cfg.width, cfg.dim);
    let p = h * w;
    let wt = &params.weights;

    let input = Array2::from_shape_fn((p, cfg.channels), |(px, c)| image.data[c * p + px]);
    let cols1 = im2col(input.view(), h, w);
    let act1 = add_row(cols1.dot(&wt.conv1_w), &wt.conv1_b).mapv(f64::tanh);
    finite("backbone.conv1", &act1)?;
    let cols2 = im2col(act1.view(), h, w);
    let feat = add_row(cols2.dot(&wt.conv2_w), &wt.conv2_b).mapv(f64::tanh);
    finite("backbone.conv2", &feat)?;
    let pixel = &feat + &positional_encoding(h, w, d);

    let scale = 1.0 / (d as f64).sqrt();
    let q_proj = wt.query.dot(&wt.attn_q);
    let k_proj = pixel.dot(&wt.attn_k);
    let values = pixel.dot(&wt.attn_v);
    let attn = softmax_rows(q_proj.dot(&k_proj.t()) * scale);
    let context = attn.dot(&values);
    let resid = &wt.query + &context.dot(&wt.attn_o);
    finite("decoder.attention", &resid)?;
    let ffn_hidden = add_row(resid.dot(&wt.ffn_w1), &wt.ffn_b1).mapv(f64::tanh);
    let segment = add_row(&resid + &ffn_hidden.dot(&wt.ffn_w2), &wt.ffn_b2);
    finite("decoder.ffn", &segment)?;

    let class_logits = add_row(segment.dot(&wt.cls_w.t()), &wt.cls_b);
    let class_probs = softmax_rows(class_logits);
    finite("classifier", &class_probs)?;

    let mask_hidden = add_row(segment.dot(&wt.mask_w1), &wt.mask_b1).mapv(f64::tanh);
    let mask_embed = add_row(mask_hidden.dot(&wt.mask_w2), &wt.mask_b2);
    let mask_logits = mask_embed.dot(&pixel.t());
    finite("mask_head", &mask_logits)?;
    let masks = match cfg.mask_activation {
        MaskActivation::Softmax => softmax_rows(mask_logits.t().to_owned()).t().to_owned(),
        MaskActivation::Sigmoid => mask_logits.mapv(sigmoid),
    };

    let preds = PredictionSet {
        height: h,
        width: w,
        activation: cfg.mask_activation,
        class_probs,
        mask_logits,
        masks,
    };
    let cache = ForwardCache {
        cols1,
        act1,
        cols2,
        feat,
        pixel,
        q_proj,
        k_proj,
        values,
        attn,
        context,
        resid,
        ffn_hidden,
        segment,
        mask_hidden,
        mask_embed,
        class_probs: preds.class_probs.clone(),
    };
    Ok((preds, cache))
}

/// Forward pass without keeping the cache.
pub fn predict(params: &ModelParams, image: &Image) -> Result<PredictionSet> {
    forward(params, image).map(|(p, _)| p)
}

impl PredictionSet {
    pub fn num_queries(&self) -> usize {
        self.class_probs.nrows()
    }

    pub fn num_outputs(&self) -> usize {
        self.class_probs.ncols()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Chains a gradient w.r.t. `masks` through the mask activation.
    pub fn mask_logit_grad(&self, d_masks: &Array2<f64>) -> Array2<f64> {
        match self.activation {
            MaskActivation::Softmax => softmax_rows_backward(&self.masks.t().to_owned(), &d_masks.t().to_owned())
                .t()
                .to_owned(),
            MaskActivation::Sigmoid => {
                let mut g = d_masks.clone();
                g.zip_mut_with(&self.masks, |g, &m| *g *= m * (1.0 - m));
                g
            }
        }
    }
}

/// Reverse pass. `d_probs` is the loss gradient w.r.t. `class_probs`,
/// `d_mask_logits` w.r.t. `mask_logits`. Returns gradients shaped like the
/// parameters.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    d_probs: &Array2<f64>,
    d_mask_logits: &Array2<f64>,
) -> Result<Weights> {
    let cfg = &params.config;
    let (n, p, d) = (cfg.queries, cfg.pixels(), cfg.dim);
    let k1 = params.num_outputs();
    let probs = &cache.class_probs;
    if probs.dim() != (n, k1) {
        return Err(shape_err(format!("cache for {n}x{k1} outputs"), format!("{:?}", probs.dim())));
    }
    if d_probs.dim() != (n, k1) {
        return Err(shape_err(format!("{n}x{k1}"), format!("{:?}", d_probs.dim())));
    }
    if d_mask_logits.dim() != (n, p) {
        return Err(shape_err(format!("{n}x{p}"), format!("{:?}", d_mask_logits.dim())));
    }
    let wt = &params.weights;
    let mut g = wt.zeros_like();

    // classifier
    let d_class_logits = softmax_rows_backward(probs, d_probs);
    g.cls_w = d_class_logits.t().dot(&cache.segment);
    g.cls_b = col_sum(&d_class_logits);
    let mut d_segment = d_class_logits.dot(&wt.cls_w);

    // mask head
    let d_mask_embed = d_mask_logits.dot(&cache.pixel);
    let mut d_pixel = d_mask_logits.t().dot(&cache.mask_embed);
    g.mask_w2 = cache.mask_hidden.t().dot(&d_mask_embed);
    g.mask_b2 = col_sum(&d_mask_embed);
    let d_mask_pre = tanh_backward(&cache.mask_hidden, &d_mask_embed.dot(&wt.mask_w2.t()));
    g.mask_w1 = cache.segment.t().dot(&d_mask_pre);
    g.mask_b1 = col_sum(&d_mask_pre);
    d_segment += &d_mask_pre.dot(&wt.mask_w1.t());

    // feed-forward
    g.ffn_w2 = cache.ffn_hidden.t().dot(&d_segment);
    g.ffn_b2 = col_sum(&d_segment);
    let d_ffn_pre = tanh_backward(&cache.ffn_hidden, &d_segment.dot(&wt.ffn_w2.t()));
    g.ffn_w1 = cache.resid.t().dot(&d_ffn_pre);
    g.ffn_b1 = col_sum(&d_ffn_pre);
    let d_resid = &d_segment + &d_ffn_pre.dot(&wt.ffn_w1.t());

    // cross-attention
    let mut d_query = d_resid.clone();
    g.attn_o = cache.context.t().dot(&d_resid);
    let d_context = d_resid.dot(&wt.attn_o.t());
    let d_attn = d_context.dot(&cache.values.t());
    let d_values = cache.attn.t().dot(&d_context);
    let scale = 1.0 / (d as f64).sqrt();
    let d_scores = softmax_rows_backward(&cache.attn, &d_attn) * scale;
    let d_q_proj = d_scores.dot(&cache.k_proj);
    let d_k_proj = d_scores.t().dot(&cache.q_proj);
    g.attn_q = wt.query.t().dot(&d_q_proj);
    d_query += &d_q_proj.dot(&wt.attn_q.t());
    g.attn_k = cache.pixel.t().dot(&d_k_proj);
    g.attn_v = cache.pixel.t().dot(&d_values);
    d_pixel += &d_k_proj.dot(&wt.attn_k.t());
    d_pixel += &d_values.dot(&wt.attn_v.t());
    g.query = d_query;

    // backbone
    let d_pre2 = tanh_backward(&cache.feat, &d_pixel);
    g.conv2_w = cache.cols2.t().dot(&d_pre2);
    g.conv2_b = col_sum(&d_pre2);
    let d_act1 = col2im(&d_pre2.dot(&wt.conv2_w.t()), cfg.height, cfg.width, cfg.hidden);
    let d_pre1 = tanh_backward(&cache.act1, &d_act1);
    g.conv1_w = cache.cols1.t().dot(&d_pre1);
    g.conv1_b = col_sum(&d_pre1);
    Ok(g)
}
