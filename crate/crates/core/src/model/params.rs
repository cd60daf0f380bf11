use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::error::{GtnError, Result};
use crate::model::config::ModelConfig;
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: String, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    }
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(spec(
        format!("{prefix}.w"),
        &[fan_in, fan_out],
        Init::Xavier,
    ));
    out.push(spec(format!("{prefix}.b"), &[fan_out], Init::Zeros));
}

fn encoder_specs(out: &mut Vec<ParamSpec>, tower: &str, cfg: &ModelConfig) {
    let d = cfg.d_model;
    for l in 0..cfg.n_layers {
        let p = format!("{tower}.layer{l}");
        for proj in ["q", "k", "v", "o"] {
            linear_specs(out, &format!("{p}.attn.{proj}"), d, d);
        }
        out.push(spec(format!("{p}.ln1.gamma"), &[d], Init::Ones));
        out.push(spec(format!("{p}.ln1.beta"), &[d], Init::Zeros));
        linear_specs(out, &format!("{p}.ffn.1"), d, cfg.d_ff);
        linear_specs(out, &format!("{p}.ffn.2"), cfg.d_ff, d);
        out.push(spec(format!("{p}.ln2.gamma"), &[d], Init::Ones));
        out.push(spec(format!("{p}.ln2.beta"), &[d], Init::Zeros));
    }
}

/// Every learnable tensor implied by `cfg`, in initialization order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    if cfg.variant.has_step_tower() {
        linear_specs(&mut out, "step.embed", cfg.n_channels, cfg.d_model);
        encoder_specs(&mut out, "step", cfg);
        linear_specs(&mut out, "step.feature", cfg.step_flat_width(), cfg.d_tower);
    }
    if cfg.variant.has_channel_tower() {
        linear_specs(&mut out, "channel.embed", cfg.max_len, cfg.d_model);
        encoder_specs(&mut out, "channel", cfg);
        linear_specs(
            &mut out,
            "channel.feature",
            cfg.channel_flat_width(),
            cfg.d_tower,
        );
    }
    if cfg.variant == crate::model::Variant::Gated {
        linear_specs(&mut out, "gate", 2 * cfg.d_tower, 2);
    }
    linear_specs(&mut out, "classifier", cfg.fused_width(), cfg.n_classes);
    out
}

/// The named learnable tensors of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct GtnParams {
    tensors: BTreeMap<String, Tensor>,
}

impl GtnParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed, Purpose::Init);
        let mut tensors = BTreeMap::new();
        for s in param_specs(cfg) {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
                Init::Xavier => {
                    let limit = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                    let n = s.shape[0] * s.shape[1];
                    let data = (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
                    Tensor::new(s.shape.clone(), data)?
                }
            };
            tensors.insert(s.name, t);
        }
        Ok(GtnParams { tensors })
    }

    /// Wraps externally supplied tensors after checking them against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let specs = param_specs(cfg);
        if specs.len() != tensors.len() {
            return Err(GtnError::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for s in &specs {
            let t = tensors
                .get(&s.name)
                .ok_or_else(|| GtnError::Checkpoint(format!("missing parameter {}", s.name)))?;
            if t.shape() != s.shape {
                return Err(GtnError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            if !t.is_finite() {
                return Err(GtnError::NonFinite(format!("parameter {}", s.name)));
            }
        }
        Ok(GtnParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Name-ordered iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Places every parameter on `graph`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), graph.leaf(t.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }
}

/// Parameter handles on one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| GtnError::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig::new(3, 10, 4, Variant::Gated);
        let p = GtnParams::init(&cfg, 1).unwrap();
        assert_eq!(p.get("step.embed.w").unwrap().shape(), &[3, 64]);
        assert_eq!(p.get("channel.embed.w").unwrap().shape(), &[10, 64]);
        assert_eq!(p.get("step.feature.w").unwrap().shape(), &[640, 128]);
        assert_eq!(p.get("channel.feature.w").unwrap().shape(), &[192, 128]);
        assert_eq!(p.get("gate.w").unwrap().shape(), &[256, 2]);
        assert_eq!(p.get("classifier.w").unwrap().shape(), &[256, 4]);
        assert_eq!(p.get("step.layer1.ffn.1.w").unwrap().shape(), &[64, 256]);
    }

    #[test]
    fn single_tower_has_no_other_tower() {
        let cfg = ModelConfig::new(3, 10, 2, Variant::Channel);
        let p = GtnParams::init(&cfg, 1).unwrap();
        assert!(p
            .iter()
            .all(|(k, _)| !k.starts_with("step.") && !k.starts_with("gate")));
        assert_eq!(p.get("classifier.w").unwrap().shape(), &[128, 2]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::new(2, 5, 2, Variant::Gated);
        let a = GtnParams::init(&cfg, 9).unwrap();
        let b = GtnParams::init(&cfg, 9).unwrap();
        let c = GtnParams::init(&cfg, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = a.get("gate.w").unwrap();
        let limit = (6.0f64 / 258.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(a.get("gate.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a
            .get("step.layer0.ln1.gamma")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn from_tensors_rejects_mismatch() {
        let cfg = ModelConfig::new(2, 5, 2, Variant::Step);
        let p = GtnParams::init(&cfg, 1).unwrap();
        let mut map: BTreeMap<String, Tensor> =
            p.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        GtnParams::from_tensors(&cfg, map.clone()).unwrap();
        map.insert("classifier.b".into(), Tensor::zeros(&[3]));
        assert!(GtnParams::from_tensors(&cfg, map).is_err());
    }
}
