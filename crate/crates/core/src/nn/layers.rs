use rand::Rng;

use super::graph::{Bound, Graph, NodeId};
use super::params::{init_uniform, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Dense affine layer. Holds slot indices into an owning [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: usize,
    pub bias: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = params.push(
            format!("{name}.weight"),
            init_uniform(rng, fan_in, fan_out, fan_in),
        );
        let bias = bias.then(|| {
            params.push(
                format!("{name}.bias"),
                init_uniform(rng, 1, fan_out, fan_in),
            )
        });
        Self {
            name: name.to_string(),
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let cols = g.value(x).cols();
        if cols != self.fan_in {
            return Err(Error::shape(
                &self.name,
                format!("expected {} input features, got {cols}", self.fan_in),
            ));
        }
        let y = g.matmul(x, p.id(self.weight));
        Ok(match self.bias {
            Some(b) => g.add_bias(y, p.id(b)),
            None => y,
        })
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`.
    pub fn init<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(params, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: NodeId) -> Result<NodeId> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i < last {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }
}

/// Single-head self-attention sublayer: `softmax(QK^T/sqrt(d) + mask) V Wo`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl SelfAttention {
    pub fn init<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::init(params, &format!("{name}.query"), width, width, false, rng),
            key: Linear::init(params, &format!("{name}.key"), width, width, false, rng),
            value: Linear::init(params, &format!("{name}.value"), width, width, false, rng),
            out: Linear::init(params, &format!("{name}.out"), width, width, false, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId, seq_len: usize, causal: bool) -> Result<NodeId> {
        let rows = g.value(x).rows();
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape(
                &self.query.name,
                format!("{rows} token rows do not split into sequences of {seq_len}"),
            ));
        }
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let a = g.attention(q, k, v, seq_len, causal);
        self.out.forward(g, p, a)
    }
}

/// Residual block: `x + attn(x)`, then `x + ff(x)` with a GELU feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub attn: SelfAttention,
    pub ff: Mlp,
}

impl AttentionBlock {
    pub fn init<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, width: usize, ff_width: usize, rng: &mut R) -> Self {
        Self {
            attn: SelfAttention::init(params, &format!("{name}.attn"), width, rng),
            ff: Mlp::init(params, &format!("{name}.ff"), &[width, ff_width, width], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId, seq_len: usize, causal: bool) -> Result<NodeId> {
        let a = self.attn.forward(g, p, x, seq_len, causal)?;
        let x = g.add(x, a);
        let f = self.ff.forward(g, p, x)?;
        Ok(g.add(x, f))
    }
}

/// Evaluates an MLP outside of training (no gradient tracking).
pub fn forward_mlp(mlp: &Mlp, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.bind(params, false);
    let xi = g.input(x.clone());
    let y = mlp.forward(&mut g, &p, xi)?;
    Ok(g.value(y).clone())
}

/// Evaluates one attention block on a `seq_len`-token sequence (or a stack of
/// them).
pub fn forward_attention_block(
    block: &AttentionBlock,
    params: &ParamSet,
    tokens: &Tensor,
    seq_len: usize,
    causal: bool,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.bind(params, false);
    let xi = g.input(tokens.clone());
    let y = block.forward(&mut g, &p, xi, seq_len, causal)?;
    Ok(g.value(y).clone())
}

/// Evaluates only the attention sublayer (no residual, no feed-forward).
pub fn forward_self_attention(
    attn: &SelfAttention,
    params: &ParamSet,
    tokens: &Tensor,
    seq_len: usize,
    causal: bool,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.bind(params, false);
    let xi = g.input(tokens.clone());
    let y = attn.forward(&mut g, &p, xi, seq_len, causal)?;
    Ok(g.value(y).clone())
}
