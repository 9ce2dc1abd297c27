use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::{Scalar, Tensor};

/// Index of one named parameter tensor inside a [`Params`] set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered set of named parameter tensors. The construction order is the
/// canonical flattening used by the optimizer, pseudo-gradients, and top-k
/// chunking, so it must stay identical across replicas and runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Largest absolute elementwise difference across all tensors.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .fold(0.0, |acc, (a, b)| acc.max(a.max_abs_diff(b)))
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients mirror the parameter set; they accumulate in place during the
/// backward pass.
pub type Grads<S> = Params<S>;

/// Identifiers for one transformer block's tensors.
#[derive(Clone, Debug)]
pub struct LayerIds {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

/// Map from model roles to parameter ids. Construction order defines the
/// canonical parameter flattening.
#[derive(Clone, Debug)]
pub struct Layout {
    pub t_s: ParamId,
    pub pos: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_norm: ParamId,
    pub head: ParamId,
}

impl Layout {
    /// Build zero-valued parameters in canonical order.
    pub fn build<S: Scalar>(cfg: &ModelConfig) -> (Layout, Params<S>) {
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let mut params = Params::new();
        let t_s = params.push("embed.t_s", Tensor::zeros(&[cfg.vocab, d]));
        let pos = params.push("embed.pos", Tensor::zeros(&[cfg.seq_len, d]));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let layer = LayerIds {
                attn_norm: params.push(format!("layer{l}.attn_norm.g"), Tensor::scalar_filled(&[d], S::one())),
                wq: params.push(format!("layer{l}.attn.wq"), Tensor::zeros(&[d, d])),
                wk: params.push(format!("layer{l}.attn.wk"), Tensor::zeros(&[d, d])),
                wv: params.push(format!("layer{l}.attn.wv"), Tensor::zeros(&[d, d])),
                wo: params.push(format!("layer{l}.attn.wo"), Tensor::zeros(&[d, d])),
                ffn_norm: params.push(format!("layer{l}.ffn_norm.g"), Tensor::scalar_filled(&[d], S::one())),
                w_gate: params.push(format!("layer{l}.ffn.w_gate"), Tensor::zeros(&[d, f])),
                w_up: params.push(format!("layer{l}.ffn.w_up"), Tensor::zeros(&[d, f])),
                w_down: params.push(format!("layer{l}.ffn.w_down"), Tensor::zeros(&[f, d])),
            };
            layers.push(layer);
        }
        let final_norm = params.push("final_norm.g", Tensor::scalar_filled(&[d], S::one()));
        let head = params.push("head.w", Tensor::zeros(&[d, cfg.vocab]));
        (
            Layout {
                t_s,
                pos,
                layers,
                final_norm,
                head,
            },
            params,
        )
    }
}

/// Rebuild a parameter set from (name, tensor) pairs, validating that the
/// result matches the canonical layout for `cfg` exactly once each.
pub fn params_from_named<S: Scalar>(
    cfg: &ModelConfig,
    mut named: Vec<(String, Tensor<S>)>,
) -> Result<Params<S>> {
    let (_, mut params) = Layout::build::<S>(cfg);
    let mut seen = vec![false; params.len()];
    for (name, tensor) in named.drain(..) {
        let id = params
            .id_of(&name)
            .ok_or_else(|| Error::Partition(format!("unknown parameter {name}")))?;
        if seen[id.0] {
            return Err(Error::Partition(format!("duplicate parameter {name}")));
        }
        if params.get(id).shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "params_from_named",
                lhs: params.get(id).shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *params.get_mut(id) = tensor;
        seen[id.0] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Partition(format!(
            "missing parameter {}",
            params.name(ParamId(missing))
        )));
    }
    Ok(params)
}
