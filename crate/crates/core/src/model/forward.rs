use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{GateSet, ModelParams};

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub heads: Vec<HeadVars>,
    pub w1: Var,
    pub w2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// A model's tensors bound as leaves of one tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub emb_ln_gain: Var,
    pub emb_ln_bias: Var,
    pub layers: Vec<LayerVars>,
    pub cls_w: Var,
    pub cls_b: Var,
    vocab_size: usize,
    max_len: usize,
    all: Vec<Var>,
}

impl ParamVars {
    /// Leaves in the canonical order of [`ModelParams::visit`].
    pub fn vars(&self) -> &[Var] {
        &self.all
    }
}

pub fn bind_params(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> ParamVars {
    let leaves: Vec<Var> = params
        .tensors()
        .into_iter()
        .map(|t| tape.leaf(t, requires_grad))
        .collect();
    bind_vars(params, &leaves).expect("one leaf per tensor")
}

/// Assembles already-bound leaves, given in the canonical order of
/// [`ModelParams::visit`], into the structure of `params`.
pub fn bind_vars(params: &ModelParams, vars: &[Var]) -> Result<ParamVars> {
    let mut expected = 0;
    params.visit(&mut |_, _| expected += 1);
    if vars.len() != expected {
        return Err(Error::Contract(format!(
            "{} leaves for a model with {expected} tensors",
            vars.len()
        )));
    }
    let mut it = vars.iter().copied();
    let mut next = || it.next().expect("length checked");
    let tok_emb = next();
    let pos_emb = next();
    let emb_ln_gain = next();
    let emb_ln_bias = next();
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let heads = layer
            .heads
            .iter()
            .map(|_| HeadVars {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
            })
            .collect();
        layers.push(LayerVars {
            heads,
            w1: next(),
            w2: next(),
            ln1_gain: next(),
            ln1_bias: next(),
            ln2_gain: next(),
            ln2_bias: next(),
        });
    }
    let cls_w = next();
    let cls_b = next();
    Ok(ParamVars {
        tok_emb,
        pos_emb,
        emb_ln_gain,
        emb_ln_bias,
        layers,
        cls_w,
        cls_b,
        vocab_size: params.config.vocab_size,
        max_len: params.config.max_len,
        all: vars.to_vec(),
    })
}

/// Gate leaves: one scalar per head, one vector per layer for the neurons.
#[derive(Debug, Clone)]
pub struct GateVars {
    pub xi: Vec<Vec<Var>>,
    pub nu: Vec<Var>,
}

pub fn bind_gates(
    tape: &mut Tape,
    gates: &GateSet,
    params: &ModelParams,
    requires_grad: bool,
) -> Result<GateVars> {
    if !gates.matches(params) {
        return Err(Error::Contract(
            "gate set does not match the model's heads and neurons".into(),
        ));
    }
    Ok(GateVars {
        xi: gates
            .xi
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&g| tape.leaf(Tensor::scalar(g), requires_grad))
                    .collect()
            })
            .collect(),
        nu: gates
            .nu
            .iter()
            .map(|layer| tape.leaf(Tensor::vector(layer.clone()), requires_grad))
            .collect(),
    })
}

/// `softmax((X·Wq)(X·Wk)ᵀ / √d_A) · (X·Wv)`.
pub fn attn_head(tape: &mut Tape, x: Var, h: &HeadVars) -> Result<Var> {
    let q = tape.matmul(x, h.wq)?;
    let k = tape.matmul(x, h.wk)?;
    let v = tape.matmul(x, h.wv)?;
    let da = tape.value(q).last_dim() as f64;
    let scores = tape.matmul_nt(q, k)?;
    let weights = tape.softmax_t(scores, da.sqrt())?;
    tape.matmul(weights, v)
}

/// `Σ_i ξ_i · attn_head_i(X) · Wo_i`; `None` when the layer has no heads.
/// Without gates every ξ is taken as exactly 1.
pub fn mha_gated(
    tape: &mut Tape,
    x: Var,
    layer: &LayerVars,
    xi: Option<&[Var]>,
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (i, head) in layer.heads.iter().enumerate() {
        let o = attn_head(tape, x, head)?;
        let mut contrib = tape.matmul(o, head.wo)?;
        if let Some(g) = xi {
            contrib = tape.scale_by(contrib, g[i])?;
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, contrib)?,
            None => contrib,
        });
    }
    Ok(acc)
}

/// `GELU(X·W1) · diag(ν) · W2`; `None` when the layer has no neurons.
pub fn ffn_gated(tape: &mut Tape, x: Var, layer: &LayerVars, nu: Option<Var>) -> Result<Option<Var>> {
    if tape.value(layer.w1).last_dim() == 0 {
        return Ok(None);
    }
    let inner = tape.matmul(x, layer.w1)?;
    let mut act = tape.gelu(inner);
    if let Some(g) = nu {
        act = tape.col_scale(act, g)?;
    }
    Ok(Some(tape.matmul(act, layer.w2)?))
}

/// Logits `[1, K]` for one token sequence. `gates = None` is the plain,
/// ungated encoder.
pub fn forward(
    tape: &mut Tape,
    p: &ParamVars,
    gates: Option<&GateVars>,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > p.max_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds maximum {}",
            tokens.len(),
            p.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= p.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of {}",
            p.vocab_size
        )));
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = tape.gather(p.tok_emb, tokens)?;
    let pos = tape.gather(p.pos_emb, &positions)?;
    let x0 = tape.add(tok, pos)?;
    let mut x = tape.layer_norm(x0, p.emb_ln_gain, p.emb_ln_bias)?;

    for (l, layer) in p.layers.iter().enumerate() {
        let xi = gates.map(|g| g.xi[l].as_slice());
        let res = match mha_gated(tape, x, layer, xi)? {
            Some(m) => tape.add(x, m)?,
            None => x,
        };
        let h = tape.layer_norm(res, layer.ln1_gain, layer.ln1_bias)?;
        let res = match ffn_gated(tape, h, layer, gates.map(|g| g.nu[l]))? {
            Some(f) => tape.add(h, f)?,
            None => h,
        };
        x = tape.layer_norm(res, layer.ln2_gain, layer.ln2_bias)?;
    }

    let pooled = tape.row(x, 0)?;
    let z = tape.matmul(pooled, p.cls_w)?;
    tape.add_row(z, p.cls_b)
}

/// Logits (length K) of a single sequence.
pub fn encoder_forward(
    tokens: &[usize],
    params: &ModelParams,
    gates: Option<&GateSet>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = bind_params(&mut tape, params, false);
    let g = gates
        .map(|g| bind_gates(&mut tape, g, params, false))
        .transpose()?;
    let z = forward(&mut tape, &p, g.as_ref(), tokens)?;
    tape.check_finite()?;
    tape.value(z).reshape(&[params.classes()])
}

/// Logits for every sequence, in input order.
pub fn predict<'a>(
    params: &ModelParams,
    gates: Option<&GateSet>,
    sequences: impl IntoIterator<Item = &'a [usize]>,
) -> Result<Vec<Tensor>> {
    sequences
        .into_iter()
        .map(|s| encoder_forward(s, params, gates))
        .collect()
}
