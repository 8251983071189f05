//! Miniature post-norm transformer encoder for sequence classification.
//!
//! Each layer is `LN(x + MHA°(x))` followed by `LN(h + FFN°(h))`, where
//!
//! ```text
//! MHA°(X) = Σ_i ξ_i · Attn(X, Wq_i, Wk_i, Wv_i) · Wo_i
//! FFN°(X) = GELU(X·W1) · diag(ν) · W2
//! Attn    = softmax((X·Wq)(X·Wk)ᵀ / √d_A) · (X·Wv)
//! ```
//!
//! The gates ξ (one per head) and ν (one per FFN neuron) are ordinary
//! inputs to the forward pass. At 1 they leave the model untouched; their
//! gradients are the sensitivity signal used for scoring, and setting them
//! to 0 removes a unit without touching the weights.

mod forward;
mod student;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use forward::{
    attn_head, bind_gates, bind_params, bind_vars, encoder_forward, ffn_gated, forward, mha_gated, predict, GateVars,
    HeadVars, LayerVars, ParamVars,
};
pub use student::{
    apply_unstructured, compact, drop_layer_indices, init_student, prunable_tensors, StudentInit,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    /// Hidden size d.
    pub hidden: usize,
    /// Heads per layer A.
    pub heads: usize,
    /// Per-head size d_A.
    pub head_dim: usize,
    /// FFN inner size d_I.
    pub ffn: usize,
    pub layers: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_len: 64,
            hidden: 64,
            heads: 4,
            head_dim: 16,
            ffn: 128,
            layers: 6,
            classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("hidden", self.hidden),
            ("head_dim", self.head_dim),
            ("classes", self.classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("model.classes must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `d × d_A`
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `d_A × d`
    pub wo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// `d × d_I`
    pub w1: Tensor,
    /// `d_I × d`
    pub w2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl LayerParams {
    pub fn ffn_width(&self) -> usize {
        self.w1.last_dim()
    }
}

/// Weights of one encoder. Per-layer head and neuron counts may differ from
/// `config` after compaction; `config` keeps the nominal sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub emb_ln_gain: Tensor,
    pub emb_ln_bias: Tensor,
    pub layers: Vec<LayerParams>,
    /// `d × K`
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect()).expect("shape")
}

impl ModelParams {
    /// Fresh weights: projections ~ N(0, 1/fan_in), embeddings ~ N(0, 1),
    /// layer norms at identity, zero classifier bias.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let da = config.head_dim;
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let tok_emb = gaussian(rng, &[config.vocab_size, d], 1.0);
        let pos_emb = gaussian(rng, &[config.max_len, d], 0.1);
        let layers = (0..config.layers)
            .map(|_| {
                let heads = (0..config.heads)
                    .map(|_| HeadParams {
                        wq: gaussian(rng, &[d, da], inv(d)),
                        wk: gaussian(rng, &[d, da], inv(d)),
                        wv: gaussian(rng, &[d, da], inv(d)),
                        wo: gaussian(rng, &[da, d], inv(da * config.heads.max(1))),
                    })
                    .collect();
                LayerParams {
                    heads,
                    w1: gaussian(rng, &[d, config.ffn], inv(d)),
                    w2: gaussian(rng, &[config.ffn, d], inv(config.ffn.max(1))),
                    ln1_gain: Tensor::full(&[d], 1.0),
                    ln1_bias: Tensor::zeros(&[d]),
                    ln2_gain: Tensor::full(&[d], 1.0),
                    ln2_bias: Tensor::zeros(&[d]),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            emb_ln_gain: Tensor::full(&[d], 1.0),
            emb_ln_bias: Tensor::zeros(&[d]),
            layers,
            cls_w: gaussian(rng, &[d, config.classes], inv(d)),
            cls_b: Tensor::zeros(&[config.classes]),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn classes(&self) -> usize {
        self.cls_b.numel()
    }

    /// Visits every tensor in canonical order with its checkpoint name.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("embeddings.token", &self.tok_emb);
        f("embeddings.position", &self.pos_emb);
        f("embeddings.ln.gain", &self.emb_ln_gain);
        f("embeddings.ln.bias", &self.emb_ln_bias);
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                f(&format!("layers.{l}.heads.{h}.wq"), &head.wq);
                f(&format!("layers.{l}.heads.{h}.wk"), &head.wk);
                f(&format!("layers.{l}.heads.{h}.wv"), &head.wv);
                f(&format!("layers.{l}.heads.{h}.wo"), &head.wo);
            }
            f(&format!("layers.{l}.w1"), &layer.w1);
            f(&format!("layers.{l}.w2"), &layer.w2);
            f(&format!("layers.{l}.ln1.gain"), &layer.ln1_gain);
            f(&format!("layers.{l}.ln1.bias"), &layer.ln1_bias);
            f(&format!("layers.{l}.ln2.gain"), &layer.ln2_gain);
            f(&format!("layers.{l}.ln2.bias"), &layer.ln2_bias);
        }
        f("classifier.weight", &self.cls_w);
        f("classifier.bias", &self.cls_b);
    }

    /// Mutable tensors in the same canonical order as [`ModelParams::visit`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.emb_ln_gain,
            &mut self.emb_ln_bias,
        ];
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.push(&mut head.wq);
                out.push(&mut head.wk);
                out.push(&mut head.wv);
                out.push(&mut head.wo);
            }
            out.push(&mut layer.w1);
            out.push(&mut layer.w2);
            out.push(&mut layer.ln1_gain);
            out.push(&mut layer.ln1_bias);
            out.push(&mut layer.ln2_gain);
            out.push(&mut layer.ln2_bias);
        }
        out.push(&mut self.cls_w);
        out.push(&mut self.cls_b);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Rebuilds a model from named tensors as produced by
    /// [`ModelParams::named_tensors`].
    pub fn from_named(config: ModelConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let map: std::collections::HashMap<&str, &Tensor> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let get = |name: &str| -> Result<Tensor> {
            map.get(name)
                .map(|t| (*t).clone())
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
        };
        let mut layers = Vec::new();
        for l in 0.. {
            if !map.contains_key(format!("layers.{l}.w1").as_str()) {
                break;
            }
            let mut heads = Vec::new();
            for h in 0.. {
                let p = format!("layers.{l}.heads.{h}");
                if !map.contains_key(format!("{p}.wq").as_str()) {
                    break;
                }
                heads.push(HeadParams {
                    wq: get(&format!("{p}.wq"))?,
                    wk: get(&format!("{p}.wk"))?,
                    wv: get(&format!("{p}.wv"))?,
                    wo: get(&format!("{p}.wo"))?,
                });
            }
            layers.push(LayerParams {
                heads,
                w1: get(&format!("layers.{l}.w1"))?,
                w2: get(&format!("layers.{l}.w2"))?,
                ln1_gain: get(&format!("layers.{l}.ln1.gain"))?,
                ln1_bias: get(&format!("layers.{l}.ln1.bias"))?,
                ln2_gain: get(&format!("layers.{l}.ln2.gain"))?,
                ln2_bias: get(&format!("layers.{l}.ln2.bias"))?,
            });
        }
        let params = Self {
            config,
            tok_emb: get("embeddings.token")?,
            pos_emb: get("embeddings.position")?,
            emb_ln_gain: get("embeddings.ln.gain")?,
            emb_ln_bias: get("embeddings.ln.bias")?,
            layers,
            cls_w: get("classifier.weight")?,
            cls_b: get("classifier.bias")?,
        };
        params.check_shapes()?;
        Ok(params)
    }

    /// Verifies every tensor against the hidden size and per-layer widths.
    pub fn check_shapes(&self) -> Result<()> {
        let d = self.config.hidden;
        let bad = |what: String| Err(Error::Dimension(what));
        if self.tok_emb.shape() != [self.config.vocab_size, d] {
            return bad(format!("token embedding {:?}", self.tok_emb.shape()));
        }
        if self.pos_emb.shape() != [self.config.max_len, d] {
            return bad(format!("position embedding {:?}", self.pos_emb.shape()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for head in &layer.heads {
                let da = head.wq.last_dim();
                if head.wq.shape() != [d, da]
                    || head.wk.shape() != [d, da]
                    || head.wv.shape() != [d, da]
                    || head.wo.shape() != [da, d]
                {
                    return bad(format!("layer {l} head projection shapes"));
                }
            }
            let di = layer.ffn_width();
            if layer.w1.shape() != [d, di] || layer.w2.shape() != [di, d] {
                return bad(format!("layer {l} ffn shapes"));
            }
        }
        if self.cls_w.shape() != [d, self.classes()] {
            return bad(format!("classifier {:?}", self.cls_w.shape()));
        }
        Ok(())
    }
}

/// Head gates ξ and neuron gates ν, one vector of each per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSet {
    pub xi: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
}

impl GateSet {
    pub fn ones(params: &ModelParams) -> Self {
        Self {
            xi: params.layers.iter().map(|l| vec![1.0; l.heads.len()]).collect(),
            nu: params.layers.iter().map(|l| vec![1.0; l.ffn_width()]).collect(),
        }
    }

    pub fn all_ones(&self) -> bool {
        self.values().all(|g| g == 1.0)
    }

    pub fn is_binary(&self) -> bool {
        self.values().all(|g| g == 0.0 || g == 1.0)
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.xi.iter().chain(&self.nu).flatten().copied()
    }

    /// All-ones gates with every unit of a structured mask switched off.
    pub fn masked(params: &ModelParams, mask: &crate::units::SparsityMask) -> Result<Self> {
        use crate::units::{MaskKind, UnitKind};
        if mask.kind != MaskKind::Structured {
            return Err(Error::Mask("gates take structured masks only".into()));
        }
        let mut g = Self::ones(params);
        for u in &mask.removed {
            let slot = match u.kind {
                UnitKind::Head => g.xi.get_mut(u.layer).and_then(|l| l.get_mut(u.index)),
                UnitKind::Neuron => g.nu.get_mut(u.layer).and_then(|l| l.get_mut(u.index)),
                UnitKind::Parameter => None,
            };
            *slot.ok_or_else(|| Error::Mask(format!("mask refers to unknown unit {u}")))? = 0.0;
        }
        Ok(g)
    }

    pub fn matches(&self, params: &ModelParams) -> bool {
        self.xi.len() == params.num_layers()
            && self.nu.len() == params.num_layers()
            && params.layers.iter().enumerate().all(|(l, layer)| {
                self.xi[l].len() == layer.heads.len() && self.nu[l].len() == layer.ffn_width()
            })
    }
}
