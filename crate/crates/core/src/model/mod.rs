//! Two-tower gated transformer: step-wise and channel-wise encoders fused by a learned gate.
//!
//! A sample `x` (time × channels) feeds two encoder towers. The step tower
//! embeds each time step (`tanh` projection plus sinusoidal position) and
//! attends across steps; the channel tower transposes `x`, embeds each
//! channel's whole series and attends across channels. Each tower output is
//! reduced to a feature vector (`S` for steps, `C` for channels). The gated
//! variant weighs the two with a learned two-way softmax before the
//! classifier; the other variants drop a tower or the gate.

mod config;
pub mod layers;
mod params;

pub use config::{ModelConfig, Reduction, Variant};
pub use layers::Mode;
pub use params::{param_specs, BoundParams, GtnParams, Init, ParamSpec};

use crate::autograd::{Graph, Var};
use crate::error::{GtnError, Result};
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;
use layers::Dropout;

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `1×n_classes`
    pub logits: Var,
    /// Classifier input.
    pub fused: Var,
    /// `1×2` gate probabilities (gated variant only).
    pub gate: Option<Var>,
    pub channel_feature: Option<Var>,
    pub step_feature: Option<Var>,
    /// Step-tower input after positional encoding.
    pub step_embedding: Option<Var>,
    /// Attention matrices `[layer][head]`.
    pub step_attention: Vec<Vec<Var>>,
    pub channel_attention: Vec<Vec<Var>>,
    pub true_len: usize,
}

/// Intermediate quantities captured from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// `[layer][head]`, each `T×T` over the evaluated rows.
    pub step_attention: Vec<Vec<Tensor>>,
    /// `[layer][head]`, each `C×C`.
    pub channel_attention: Vec<Vec<Tensor>>,
    /// `(g1, g2)`: weight on the channel feature, weight on the step feature.
    pub gate_weights: Option<(f64, f64)>,
    pub channel_feature: Option<Vec<f64>>,
    pub step_feature: Option<Vec<f64>>,
    pub fused_feature: Vec<f64>,
    /// `true_len × d_model` rows of the step embedding.
    pub embedding_outputs: Option<Tensor>,
}

impl ForwardOutput {
    pub fn record(&self, g: &Graph) -> AttentionRecord {
        let maps = |m: &[Vec<Var>]| -> Vec<Vec<Tensor>> {
            m.iter()
                .map(|layer| layer.iter().map(|&v| g.value(v).clone()).collect())
                .collect()
        };
        let vec_of = |v: Option<Var>| v.map(|v| g.value(v).data().to_vec());
        AttentionRecord {
            step_attention: maps(&self.step_attention),
            channel_attention: maps(&self.channel_attention),
            gate_weights: self.gate.map(|v| {
                let d = g.value(v).data();
                (d[0], d[1])
            }),
            channel_feature: vec_of(self.channel_feature),
            step_feature: vec_of(self.step_feature),
            fused_feature: g.value(self.fused).data().to_vec(),
            embedding_outputs: self.step_embedding.map(|v| {
                let e = g.value(v);
                let d = e.shape()[1];
                Tensor::new(
                    vec![self.true_len, d],
                    e.data()[..self.true_len * d].to_vec(),
                )
                .expect("embedding rows")
            }),
        }
    }
}

/// Builds the full network for one sample. `values` is `L×C` with
/// `true_len <= L <= max_len`; rows at or after `true_len` are padding.
pub fn forward(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    values: &Tensor,
    true_len: usize,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardOutput> {
    let mut dropout = Dropout {
        p: cfg.dropout_p,
        mode,
        rng,
    };
    let (padded_len, _) = values.dims2()?;
    // validates true_len against the padded length
    let step_mask = layers::step_mask(true_len, padded_len, cfg.use_causal_mask_step)?;

    let (mut step_feature, mut step_embedding, mut step_attention) = (None, None, Vec::new());
    if cfg.variant.has_step_tower() {
        let x = g.constant(values.clone());
        let emb = layers::embed_step(g, p, cfg, x)?;
        let (enc, maps) =
            layers::encoder_tower(g, p, cfg, "step", emb, step_mask.as_ref(), &mut dropout)?;
        step_feature = Some(layers::tower_feature(
            g,
            p,
            cfg,
            "step",
            enc,
            true_len,
            cfg.max_len,
        )?);
        step_embedding = Some(emb);
        step_attention = maps;
    }

    let (mut channel_feature, mut channel_attention) = (None, Vec::new());
    if cfg.variant.has_channel_tower() {
        if values.dims2()?.1 != cfg.n_channels {
            return Err(GtnError::Shape {
                op: "embed_channel",
                lhs: values.shape().to_vec(),
                rhs: vec![padded_len, cfg.n_channels],
            });
        }
        let tokens = g.constant(layers::channel_tokens(values, true_len, cfg.max_len)?);
        let emb = layers::embed_channel(g, p, tokens)?;
        let mask = cfg
            .use_causal_mask_channel
            .then(|| layers::causal_mask(cfg.n_channels));
        let (enc, maps) =
            layers::encoder_tower(g, p, cfg, "channel", emb, mask.as_ref(), &mut dropout)?;
        channel_feature = Some(layers::tower_feature(
            g,
            p,
            cfg,
            "channel",
            enc,
            cfg.n_channels,
            cfg.n_channels,
        )?);
        channel_attention = maps;
    }

    let mut gate = None;
    let fused = match (cfg.variant, channel_feature, step_feature) {
        (Variant::Gated, Some(c), Some(s)) => {
            let gated = layers::gate_merge(g, p, c, s)?;
            gate = Some(gated.gate);
            gated.fused
        }
        (Variant::Concat, Some(c), Some(s)) => g.concat(&[c, s], 1)?,
        (_, Some(c), None) => c,
        (_, None, Some(s)) => s,
        _ => unreachable!("variant builds at least one tower"),
    };
    let logits = g.linear(fused, p.get("classifier.w")?, p.get("classifier.b")?)?;
    Ok(ForwardOutput {
        logits,
        fused,
        gate,
        channel_feature,
        step_feature,
        step_embedding,
        step_attention,
        channel_attention,
        true_len,
    })
}

/// Result of an eval-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub record: AttentionRecord,
}

impl Inference {
    /// Arg-max class; ties go to the lowest index.
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gtn {
    pub config: ModelConfig,
    pub params: GtnParams,
}

impl Gtn {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = GtnParams::init(&config, seed)?;
        Ok(Gtn { config, params })
    }

    pub fn from_params(config: ModelConfig, params: GtnParams) -> Result<Self> {
        config.validate()?;
        let tensors = params
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        let params = GtnParams::from_tensors(&config, tensors)?;
        Ok(Gtn { config, params })
    }

    /// Eval-mode forward of a single sample.
    pub fn infer(&self, values: &Tensor, true_len: usize) -> Result<Inference> {
        let mut session = self.session();
        session.infer(values, true_len)
    }

    /// Reusable eval context: parameters are bound once and the tape is
    /// rewound between samples.
    pub fn session(&self) -> InferenceSession<'_> {
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph, false);
        let base = graph.len();
        InferenceSession {
            model: self,
            graph,
            bound,
            base,
            rng: Rng::new(0, Purpose::Dropout),
        }
    }
}

pub struct InferenceSession<'a> {
    model: &'a Gtn,
    graph: Graph,
    bound: BoundParams,
    base: usize,
    rng: Rng,
}

impl InferenceSession<'_> {
    pub fn infer(&mut self, values: &Tensor, true_len: usize) -> Result<Inference> {
        self.graph.truncate(self.base);
        let out = forward(
            &mut self.graph,
            &self.bound,
            &self.model.config,
            values,
            true_len,
            Mode::Eval,
            &mut self.rng,
        )?;
        Ok(Inference {
            logits: self.graph.value(out.logits).data().to_vec(),
            record: out.record(&self.graph),
        })
    }
}
