//! Fully connected networks built on the tape.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::Result;
use crate::optim::{Bound, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Affine layers `widths[i] → widths[i+1]`, with the activation between
/// layers and a linear output. Weights are stored as `[in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(prefix: &str, widths: &[usize], activation: Activation) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        Self {
            prefix: prefix.to_string(),
            widths: widths.to_vec(),
            activation,
        }
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Glorot-uniform weights (He-uniform for ReLU), zero biases.
    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let limit = match self.activation {
                Activation::Tanh => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
            };
            let w = Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-limit..limit));
            params.insert(self.weight_name(l), w);
            params.insert(self.bias_name(l), Tensor::zeros(&[fan_out]));
        }
    }

    /// Forward a `[batch, in]` input; returns `[batch, out]`.
    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.forward_split(bound, x).map(|(_, out)| out)
    }

    /// Forward, also returning the activation feeding the final layer.
    pub fn forward_split<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let mut h = x;
        let mut penultimate = x;
        for l in 0..self.layers() {
            if l + 1 == self.layers() {
                penultimate = h;
            }
            h = h
                .matmul(bound.get(&self.weight_name(l)))?
                .add_row(bound.get(&self.bias_name(l)))?;
            if l + 1 < self.layers() {
                h = match self.activation {
                    Activation::Tanh => h.tanh()?,
                    Activation::Relu => h.relu()?,
                };
            }
        }
        Ok((penultimate, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng;

    #[test]
    fn init_creates_expected_shapes() {
        let mlp = Mlp::new("m", &[4, 3, 2], Activation::Tanh);
        let mut p = ParamSet::new();
        mlp.init(&mut p, &mut rng::rng(0));
        assert_eq!(p.get("m.l0.w").unwrap().shape(), &[4, 3]);
        assert_eq!(p.get("m.l1.b").unwrap().shape(), &[2]);
        assert_eq!(p.num_scalars(), 4 * 3 + 3 + 3 * 2 + 2);
    }

    #[test]
    fn forward_maps_batch_to_output_width() {
        let mlp = Mlp::new("m", &[4, 8, 2], Activation::Relu);
        let mut p = ParamSet::new();
        mlp.init(&mut p, &mut rng::rng(1));
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let x = tape.constant(Tensor::ones(&[5, 4]));
        let (pen, out) = mlp.forward_split(&bound, x).unwrap();
        assert_eq!(out.shape(), vec![5, 2]);
        assert_eq!(pen.shape(), vec![5, 8]);
    }
}
