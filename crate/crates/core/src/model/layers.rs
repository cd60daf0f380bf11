//! Building blocks of the two towers and the gate.

use crate::autograd::{Graph, Var};
use crate::error::{GtnError, Result};
use crate::model::config::{ModelConfig, Reduction};
use crate::model::params::BoundParams;
use crate::rng::Rng;
use crate::tensor::{Mask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dropout state threaded through a forward pass.
pub struct Dropout<'a> {
    pub p: f64,
    pub mode: Mode,
    pub rng: &'a mut Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        g.dropout(x, self.p, self.rng, self.mode == Mode::Train)
    }
}

/// Fixed sinusoidal encoding: even columns `sin(pos / 10000^(2i/d))`, odd
/// columns the matching cosine.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d_model);
    for pos in 0..len {
        for col in 0..d_model {
            let pair = (col / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / d_model as f64);
            data.push(if col % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            });
        }
    }
    Tensor::new(vec![len, d_model], data).expect("positional_encoding: zero extent")
}

/// Lower-triangular (inclusive) `n×n` mask.
pub fn causal_mask(n: usize) -> Mask {
    let allowed = (0..n).flat_map(|i| (0..n).map(move |j| j <= i)).collect();
    Mask::new(vec![n, n], allowed).expect("causal_mask: n must be >= 1")
}

/// `1×padded_len` key mask hiding positions at or after `true_len`.
pub fn padding_mask(true_len: usize, padded_len: usize) -> Result<Mask> {
    if true_len == 0 {
        return Err(GtnError::Param("true_len must be >= 1".into()));
    }
    if true_len > padded_len {
        return Err(GtnError::Param(format!(
            "true_len {true_len} exceeds padded length {padded_len}"
        )));
    }
    Mask::new(
        vec![1, padded_len],
        (0..padded_len).map(|j| j < true_len).collect(),
    )
}

/// Attention mask for the step tower: padding keys always hidden, causal
/// constraint optional. `None` when nothing is masked.
pub fn step_mask(true_len: usize, padded_len: usize, causal: bool) -> Result<Option<Mask>> {
    let pad = padding_mask(true_len, padded_len)?.broadcast_to(&[padded_len, padded_len])?;
    let mask = if causal {
        pad.and(&causal_mask(padded_len))?
    } else {
        pad
    };
    Ok((mask.count_allowed() < padded_len * padded_len).then_some(mask))
}

/// `tanh(x·W_e + b_e) + PE`, positional encoding added after the nonlinearity.
pub fn embed_step(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let (len, channels) = g.value(x).dims2()?;
    if channels != cfg.n_channels {
        return Err(GtnError::Shape {
            op: "embed_step",
            lhs: vec![len, channels],
            rhs: vec![len, cfg.n_channels],
        });
    }
    if len > cfg.max_len {
        return Err(GtnError::Length {
            len,
            max_len: cfg.max_len,
        });
    }
    let proj = g.linear(x, p.get("step.embed.w")?, p.get("step.embed.b")?)?;
    let act = g.tanh(proj);
    let pe = g.constant(positional_encoding(len, cfg.d_model));
    g.add(act, pe)
}

/// Channel tokens: each channel's first `true_len` values, zero-padded to
/// `max_len`. Returns a `C×max_len` matrix.
pub fn channel_tokens(values: &Tensor, true_len: usize, max_len: usize) -> Result<Tensor> {
    let (len, channels) = values.dims2()?;
    if true_len > max_len {
        return Err(GtnError::Length {
            len: true_len,
            max_len,
        });
    }
    if true_len == 0 || true_len > len {
        return Err(GtnError::Param(format!(
            "true_len {true_len} invalid for series of length {len}"
        )));
    }
    let mut data = vec![0.0; channels * max_len];
    for t in 0..true_len {
        for (c, &v) in values.row(t).iter().enumerate() {
            data[c * max_len + t] = v;
        }
    }
    Tensor::new(vec![channels, max_len], data)
}

/// `tanh(tokens·W_c + b_c)`; no positional encoding.
pub fn embed_channel(g: &mut Graph, p: &BoundParams, tokens: Var) -> Result<Var> {
    let proj = g.linear(tokens, p.get("channel.embed.w")?, p.get("channel.embed.b")?)?;
    Ok(g.tanh(proj))
}

/// Multi-head scaled dot-product self-attention. Returns the projected
/// output and each head's attention matrix.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    mask: Option<&Mask>,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d_model = g.value(x).dims2()?.1;
    if d_model % n_heads != 0 {
        return Err(GtnError::Config(format!(
            "d_model {d_model} is not divisible by n_heads {n_heads}"
        )));
    }
    let d_head = d_model / n_heads;
    let proj = |g: &mut Graph, name: &str| -> Result<Var> {
        g.linear(
            x,
            p.get(&format!("{prefix}.attn.{name}.w"))?,
            p.get(&format!("{prefix}.attn.{name}.b"))?,
        )
    };
    let q = proj(g, "q")?;
    let k = proj(g, "k")?;
    let v = proj(g, "v")?;
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut heads = Vec::with_capacity(n_heads);
    let mut maps = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let qh = g.slice(q, 1, lo, hi)?;
        let kh = g.slice(k, 1, lo, hi)?;
        let vh = g.slice(v, 1, lo, hi)?;
        let kt = g.t(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, 1, mask)?;
        heads.push(g.matmul(attn, vh)?);
        maps.push(attn);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(&heads, 1)?
    };
    let out = g.linear(
        merged,
        p.get(&format!("{prefix}.attn.o.w"))?,
        p.get(&format!("{prefix}.attn.o.b"))?,
    )?;
    Ok((out, maps))
}

/// Post-norm encoder layer: attention and feed-forward sub-layers, each
/// wrapped in dropout, residual add and layer norm.
pub fn encoder_layer(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    mask: Option<&Mask>,
    dropout: &mut Dropout<'_>,
) -> Result<(Var, Vec<Var>)> {
    let (attn, maps) = multi_head_attention(g, p, prefix, x, mask, cfg.n_heads)?;
    let attn = dropout.apply(g, attn)?;
    let res = g.add(x, attn)?;
    let x1 = g.layer_norm(
        res,
        p.get(&format!("{prefix}.ln1.gamma"))?,
        p.get(&format!("{prefix}.ln1.beta"))?,
        cfg.ln_eps,
    )?;

    let hidden = g.linear(
        x1,
        p.get(&format!("{prefix}.ffn.1.w"))?,
        p.get(&format!("{prefix}.ffn.1.b"))?,
    )?;
    let hidden = g.relu(hidden);
    let ff = g.linear(
        hidden,
        p.get(&format!("{prefix}.ffn.2.w"))?,
        p.get(&format!("{prefix}.ffn.2.b"))?,
    )?;
    let ff = dropout.apply(g, ff)?;
    let res = g.add(x1, ff)?;
    let out = g.layer_norm(
        res,
        p.get(&format!("{prefix}.ln2.gamma"))?,
        p.get(&format!("{prefix}.ln2.beta"))?,
        cfg.ln_eps,
    )?;
    Ok((out, maps))
}

/// `cfg.n_layers` encoder layers sharing one mask. Returns the output and
/// the attention matrices indexed `[layer][head]`.
pub fn encoder_tower(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    tower: &str,
    x: Var,
    mask: Option<&Mask>,
    dropout: &mut Dropout<'_>,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let mut h = x;
    let mut maps = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let (out, m) = encoder_layer(g, p, cfg, &format!("{tower}.layer{l}"), h, mask, dropout)?;
        h = out;
        maps.push(m);
    }
    Ok((h, maps))
}

/// Reduces an encoder output to one feature vector `tanh(flat·W + b)` of
/// shape `1×d_tower`. Rows at or after `true_len` are zeroed and the
/// matrix is zero-extended to `rows` before flattening.
pub fn tower_feature(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    tower: &str,
    enc: Var,
    true_len: usize,
    rows: usize,
) -> Result<Var> {
    let (n, d) = g.value(enc).dims2()?;
    if n > rows || true_len == 0 || true_len > n {
        return Err(GtnError::InvalidShape(format!(
            "{tower} tower output has {n} rows (true length {true_len}), configured for {rows}"
        )));
    }
    let flat = match cfg.reduction {
        Reduction::Flatten => {
            let mut h = enc;
            if true_len < n {
                let keep = Tensor::new(
                    vec![n, d],
                    (0..n * d)
                        .map(|i| if i / d < true_len { 1.0 } else { 0.0 })
                        .collect(),
                )?;
                h = g.mul_const(h, &keep)?;
            }
            if n < rows {
                let pad = g.constant(Tensor::zeros(&[rows - n, d]));
                h = g.concat(&[h, pad], 0)?;
            }
            g.reshape(h, &[1, rows * d])?
        }
        Reduction::Mean => {
            let w = Tensor::new(
                vec![1, n],
                (0..n)
                    .map(|i| {
                        if i < true_len {
                            1.0 / true_len as f64
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )?;
            let w = g.constant(w);
            g.matmul(w, enc)?
        }
    };
    let proj = g.linear(
        flat,
        p.get(&format!("{tower}.feature.w"))?,
        p.get(&format!("{tower}.feature.b"))?,
    )?;
    Ok(g.tanh(proj))
}

/// Output of [`gate_merge`].
pub struct Gated {
    /// `Concat(g1·C, g2·S)`, shape `1×2·d_tower`.
    pub fused: Var,
    /// `(g1, g2)` as a `1×2` probability vector.
    pub gate: Var,
}

/// `h = Concat(C, S)·W + b`, `(g1, g2) = softmax(h)`,
/// `y = Concat(g1·C, g2·S)`.
pub fn gate_merge(g: &mut Graph, p: &BoundParams, channel: Var, step: Var) -> Result<Gated> {
    let both = g.concat(&[channel, step], 1)?;
    let h = g.linear(both, p.get("gate.w")?, p.get("gate.b")?)?;
    let gate = g.softmax(h, 1, None)?;
    let g1 = g.slice(gate, 1, 0, 1)?;
    let g2 = g.slice(gate, 1, 1, 2)?;
    let c = g.mul_scalar(channel, g1)?;
    let s = g.mul_scalar(step, g2)?;
    let fused = g.concat(&[c, s], 1)?;
    Ok(Gated { fused, gate })
}
