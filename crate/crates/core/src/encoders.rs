//! Modality-specific encoders.
//!
//! The EHR side is a transformer over projected time steps plus sinusoidal
//! positions. Its bottom `shared_layers` are one set of weights read by both
//! the shared and the distinct branch, so their gradients sum across the two
//! branches. Each branch then runs its own upper layers and mean-pools over
//! time.
//!
//! The image side is a strided convolutional trunk with global average
//! pooling and two linear heads, one per representation.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvGeometry, Graph, Var};
use crate::data::{EhrSequence, Image};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Sinusoidal table: `(t, 2k) = sin(t / 10000^{2k/d})`, `(t, 2k+1) = cos(·)`.
pub fn positional_encoding(t_len: usize, d_model: usize) -> Result<Matrix> {
    if t_len == 0 {
        return Err(Error::InvalidInput(
            "sequence length must be positive".into(),
        ));
    }
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "positional encoding width must be even and positive, got {d_model}"
        )));
    }
    let mut pe = Matrix::zeros(t_len, d_model);
    for t in 0..t_len {
        for k in 0..d_model / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * k as f64 / d_model as f64);
            pe.set(t, 2 * k, angle.sin());
            pe.set(t, 2 * k + 1, angle.cos());
        }
    }
    Ok(pe)
}

pub const SHARED_BRANCH: &str = "ehr.branch_shared";
pub const DISTINCT_BRANCH: &str = "ehr.branch_distinct";

pub(crate) fn shared_layer_prefix(i: usize) -> String {
    format!("ehr.shared_layer{i}")
}

fn init_transformer_layer(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &ModelConfig,
) {
    let d = cfg.d_model;
    for proj in ["wq", "wk", "wv", "wo"] {
        store.init_weight(rng, &format!("{prefix}.attn.{proj}"), d, d);
        store.init_zeros(&format!("{prefix}.attn.b{}", &proj[1..]), 1, d);
    }
    for ln in ["ln1", "ln2"] {
        store.init_ones(&format!("{prefix}.{ln}.gamma"), 1, d);
        store.init_zeros(&format!("{prefix}.{ln}.beta"), 1, d);
    }
    store.init_weight(rng, &format!("{prefix}.ffn.w1"), d, cfg.ffn_width);
    store.init_zeros(&format!("{prefix}.ffn.b1"), 1, cfg.ffn_width);
    store.init_weight(rng, &format!("{prefix}.ffn.w2"), cfg.ffn_width, d);
    store.init_zeros(&format!("{prefix}.ffn.b2"), 1, d);
}

pub fn init_ehr_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    store.init_weight(rng, "ehr.embed.w", cfg.n_features, cfg.d_model);
    store.init_zeros("ehr.embed.b", 1, cfg.d_model);
    for i in 0..cfg.shared_layers {
        init_transformer_layer(store, rng, &shared_layer_prefix(i), cfg);
    }
    for branch in [SHARED_BRANCH, DISTINCT_BRANCH] {
        for i in 0..cfg.branch_layers {
            init_transformer_layer(store, rng, &format!("{branch}.layer{i}"), cfg);
        }
    }
}

/// Single-branch variant used by the EHR-only and concatenation baselines.
pub fn init_ehr_single(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    store.init_weight(rng, "ehr.embed.w", cfg.n_features, cfg.d_model);
    store.init_zeros("ehr.embed.b", 1, cfg.d_model);
    for i in 0..cfg.shared_layers + cfg.branch_layers {
        init_transformer_layer(store, rng, &shared_layer_prefix(i), cfg);
    }
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(store, w)?;
    let bv = g.param(store, b)?;
    let y = g.matmul(x, wv);
    Ok(g.add_row(y, bv))
}

fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    let n = g.layer_norm(x);
    let scaled = g.mul_row(n, gamma);
    Ok(g.add_row(scaled, beta))
}

/// Post-norm encoder layer: `LN(x + MHA(x))`, then `LN(h + FFN(h))`.
fn transformer_layer(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Var> {
    let p = |s: &str| format!("{prefix}.{s}");
    let q = linear(g, store, x, &p("attn.wq"), &p("attn.bq"))?;
    let k = linear(g, store, x, &p("attn.wk"), &p("attn.bk"))?;
    let v = linear(g, store, x, &p("attn.wv"), &p("attn.bv"))?;
    let attn = g.multi_head_attention(q, k, v, cfg.heads);
    let attn = linear(g, store, attn, &p("attn.wo"), &p("attn.bo"))?;
    let h = g.add(x, attn);
    let h = layer_norm(g, store, h, &p("ln1"))?;
    let f = linear(g, store, h, &p("ffn.w1"), &p("ffn.b1"))?;
    let f = g.gelu(f);
    let f = linear(g, store, f, &p("ffn.w2"), &p("ffn.b2"))?;
    let out = g.add(h, f);
    layer_norm(g, store, out, &p("ln2"))
}

/// Projected tokens plus positions, after truncation to `max_seq_len`.
fn embed_ehr(g: &mut Graph, store: &ParamStore, x: &EhrSequence, cfg: &ModelConfig) -> Result<Var> {
    if x.n_features() != cfg.n_features {
        return Err(Error::InvalidInput(format!(
            "EHR has {} features, the encoder expects {}",
            x.n_features(),
            cfg.n_features
        )));
    }
    if !x.values().is_finite() {
        return Err(Error::InvalidInput(
            "EHR sequence has non-finite entries".into(),
        ));
    }
    // Longer sequences keep their most recent steps.
    let values = x.values();
    let t_len = values.rows().min(cfg.max_seq_len);
    let start = values.rows() - t_len;
    let window = Matrix::from_vec(
        t_len,
        values.cols(),
        values.data()[start * values.cols()..].to_vec(),
    )?;
    let input = g.constant(window);
    let tokens = linear(g, store, input, "ehr.embed.w", "ehr.embed.b")?;
    if cfg.positional_encoding {
        let pe = g.constant(positional_encoding(t_len, cfg.d_model)?);
        Ok(g.add(tokens, pe))
    } else {
        Ok(tokens)
    }
}

/// Shared and distinct EHR representations, each `1 × d`.
pub fn ehr_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: &EhrSequence,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let mut h = embed_ehr(g, store, x, cfg)?;
    for i in 0..cfg.shared_layers {
        h = transformer_layer(g, store, h, &shared_layer_prefix(i), cfg)?;
    }
    let mut outs = [h, h];
    for (out, branch) in outs.iter_mut().zip([SHARED_BRANCH, DISTINCT_BRANCH]) {
        for i in 0..cfg.branch_layers {
            *out = transformer_layer(g, store, *out, &format!("{branch}.layer{i}"), cfg)?;
        }
        *out = g.mean_rows(*out);
    }
    Ok((outs[0], outs[1]))
}

/// One mean-pooled `1 × d` EHR vector from the single-branch stack.
pub fn ehr_single_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: &EhrSequence,
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut h = embed_ehr(g, store, x, cfg)?;
    for i in 0..cfg.shared_layers + cfg.branch_layers {
        h = transformer_layer(g, store, h, &shared_layer_prefix(i), cfg)?;
    }
    Ok(g.mean_rows(h))
}

pub fn init_image_trunk(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    let mut c_in = cfg.image_channels;
    for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
        store.init_weight(rng, &format!("cxr.conv{i}.w"), 9 * c_in, c_out);
        store.init_zeros(&format!("cxr.conv{i}.b"), 1, c_out);
        c_in = c_out;
    }
}

pub fn init_image_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    init_image_trunk(store, rng, cfg);
    let c_last = cfg.trunk_width();
    for head in ["head_shared", "head_distinct"] {
        store.init_weight(rng, &format!("cxr.{head}.w"), c_last, cfg.d_model);
        store.init_zeros(&format!("cxr.{head}.b"), 1, cfg.d_model);
    }
}

/// Conv trunk followed by global average pooling, `1 × trunk_width`.
pub fn image_trunk_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: &Image,
    cfg: &ModelConfig,
) -> Result<Var> {
    if x.channels() != cfg.image_channels {
        return Err(Error::InvalidInput(format!(
            "image has {} channels, the encoder expects {}",
            x.channels(),
            cfg.image_channels
        )));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("image has non-finite entries".into()));
    }
    let (mut h, mut w, mut c) = (x.height(), x.width(), x.channels());
    let mut act = g.constant(x.to_matrix());
    for i in 0..cfg.conv_channels.len() {
        let geom = ConvGeometry {
            height: h,
            width: w,
            channels: c,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let cols = g.im2col(act, geom);
        let conv = linear(
            g,
            store,
            cols,
            &format!("cxr.conv{i}.w"),
            &format!("cxr.conv{i}.b"),
        )?;
        act = g.gelu(conv);
        h = geom.out_height();
        w = geom.out_width();
        c = cfg.conv_channels[i];
    }
    Ok(g.mean_rows(act))
}

/// Shared and distinct image representations, each `1 × d`.
pub fn image_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: &Image,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let pooled = image_trunk_forward(g, store, x, cfg)?;
    let shared = linear(g, store, pooled, "cxr.head_shared.w", "cxr.head_shared.b")?;
    let distinct = linear(
        g,
        store,
        pooled,
        "cxr.head_distinct.w",
        "cxr.head_distinct.b",
    )?;
    Ok((shared, distinct))
}

/// Evaluates the EHR encoder outside of training.
pub fn encode_ehr(
    x: &EhrSequence,
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let (s, d) = ehr_forward(&mut g, store, x, cfg)?;
    Ok((g.value(s).data().to_vec(), g.value(d).data().to_vec()))
}

/// Evaluates the image encoder; an absent image stays absent.
pub fn encode_image(
    x: Option<&Image>,
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let Some(img) = x else { return Ok(None) };
    let mut g = Graph::new();
    let (s, d) = image_forward(&mut g, store, img, cfg)?;
    Ok(Some((
        g.value(s).data().to_vec(),
        g.value(d).data().to_vec(),
    )))
}
