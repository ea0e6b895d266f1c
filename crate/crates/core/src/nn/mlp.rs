use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::init::{orthogonal_init, uniform_fan_in};
use crate::nn::param::ParamStore;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Stack of `Linear → [LayerNorm] → Mish` hidden layers and a final
/// `Linear` without activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub normed: bool,
    pub orthogonal: bool,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        Self {
            input,
            hidden: hidden.to_vec(),
            output,
            normed: true,
            orthogonal: false,
        }
    }

    pub fn orthogonal(mut self) -> Self {
        self.orthogonal = true;
        self
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct LayerIds {
    weight: usize,
    bias: usize,
    norm: Option<(usize, usize)>,
}

/// How parameters enter the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    prefix: String,
    layers: Vec<LayerIds>,
}

impl Mlp {
    /// Registers `{prefix}.{i}.weight`, `.bias` and (for normed hidden
    /// layers) `.ln.weight` / `.ln.bias` in `store`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        spec: MlpSpec,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let widths = spec.widths();
        let n_layers = widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            let w = if spec.orthogonal {
                orthogonal_init(fan_out, fan_in, rng)
            } else {
                uniform_fan_in(&[fan_out, fan_in], fan_in, rng)
            };
            let b = if spec.orthogonal {
                Tensor::zeros(&[fan_out])
            } else {
                uniform_fan_in(&[fan_out], fan_in, rng)
            };
            let weight = store.insert(format!("{prefix}.{i}.weight"), w);
            let bias = store.insert(format!("{prefix}.{i}.bias"), b);
            let hidden = i + 1 < n_layers;
            let norm = (hidden && spec.normed).then(|| {
                (
                    store.insert(format!("{prefix}.{i}.ln.weight"), Tensor::full(&[fan_out], T::one())),
                    store.insert(format!("{prefix}.{i}.ln.bias"), Tensor::zeros(&[fan_out])),
                )
            });
            layers.push(LayerIds { weight, bias, norm });
        }
        Self {
            spec,
            prefix: prefix.to_string(),
            layers,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Parameter indices of the final linear layer (weight, bias).
    pub fn output_layer(&self) -> (usize, usize) {
        let l = self.layers.last().expect("at least one layer");
        (l.weight, l.bias)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        binding: Binding,
    ) -> Result<Var> {
        let width = g.value(x).cols();
        if width != self.spec.input {
            return Err(shape_err(format!("{}.0 input", self.prefix), self.spec.input, width));
        }
        let bind = |g: &mut Graph<T>, idx: usize| match binding {
            Binding::Trainable => g.param(store, idx),
            Binding::Frozen => g.frozen(store, idx),
        };
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = bind(g, layer.weight);
            let b = bind(g, layer.bias);
            h = g
                .matmul_t(h, w)
                .map_err(|e| shape_err(format!("{}.{i}", self.prefix), self.spec.widths()[i], e))?;
            h = g.add_row(h, b)?;
            if i < last {
                if let Some((gain, beta)) = layer.norm {
                    let gv = bind(g, gain);
                    let bv = bind(g, beta);
                    h = g.layer_norm(h, gv, bv, T::of(LAYER_NORM_EPS))?;
                }
                h = g.mish(h);
            }
        }
        Ok(h)
    }

    /// Forward pass without keeping a tape around.
    pub fn eval<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, store, xv, Binding::Frozen)?;
        Ok(g.value(y).clone())
    }
}
