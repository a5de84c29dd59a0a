//! Fixed feed-forward layer sequence with a recorded forward trace.

use rand::Rng;

use super::ops::{self, Padding};
use super::optim::{Gradients, ParamSet};
use super::{shape_err, Scalar, Tensor, TensorError};

/// One layer of the chain. Parameterized layers name their entries in the
/// [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv3d { kernels: String, bias: String, padding: Padding },
    Relu,
    MaxPool3d { window: [usize; 3] },
    Flatten,
    Dense { weights: String, bias: String },
    Dropout { keep_prob: f64 },
}

/// Static feed-forward sequence of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub layers: Vec<Layer>,
}

/// Per-layer bookkeeping recorded on the forward pass.
#[derive(Debug, Clone)]
enum LayerAux {
    None,
    Pool(Vec<usize>),
    DropoutMask(Vec<Scalar>),
    /// Dropout skipped (evaluation mode): gradient passes through.
    Identity,
}

/// Recorded forward pass: the input to every layer plus the final output.
/// Required by [`Chain::backward`]; constructing one without running
/// [`Chain::forward`] is impossible, which is the "no backward before
/// forward" guarantee.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Tensor>,
    aux: Vec<LayerAux>,
    output: Tensor,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl Chain {
    pub fn new(layers: Vec<Layer>) -> Self {
        Chain { layers }
    }

    /// Run the chain. `dropout_rng` enables training-mode dropout; pass
    /// `None` for evaluation (dropout becomes the identity).
    pub fn forward<R: Rng>(
        &self,
        params: &ParamSet,
        input: &Tensor,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Trace, TensorError> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for layer in &self.layers {
            inputs.push(current.clone());
            let (next, a) = match layer {
                Layer::Conv3d { kernels, bias, padding } => {
                    let out =
                        ops::conv3d(&current, params.value(kernels)?, params.value(bias)?, *padding)?;
                    (out, LayerAux::None)
                }
                Layer::Relu => (ops::relu(&current), LayerAux::None),
                Layer::MaxPool3d { window } => {
                    let (out, argmax) = ops::maxpool3d(&current, *window)?;
                    (out, LayerAux::Pool(argmax))
                }
                Layer::Flatten => (current.reshaped(&[current.len()]), LayerAux::None),
                Layer::Dense { weights, bias } => {
                    let out = ops::dense(&current, params.value(weights)?, params.value(bias)?)?;
                    (out, LayerAux::None)
                }
                Layer::Dropout { keep_prob } => match dropout_rng.as_deref_mut() {
                    Some(rng) => {
                        let (out, mask) = ops::dropout(&current, *keep_prob, rng);
                        (out, LayerAux::DropoutMask(mask))
                    }
                    None => (current.clone(), LayerAux::Identity),
                },
            };
            aux.push(a);
            current = next;
        }
        Ok(Trace { inputs, aux, output: current })
    }

    /// Reverse pass from a gradient on the chain output. Returns gradients
    /// for every parameter (zero for parameters the chain does not use) and
    /// the gradient with respect to the chain input.
    pub fn backward(
        &self,
        params: &ParamSet,
        trace: &Trace,
        d_output: &Tensor,
    ) -> Result<(Gradients, Tensor), TensorError> {
        if trace.inputs.len() != self.layers.len() {
            return Err(shape_err(
                "backward",
                format!(
                    "trace has {} layers, chain has {}",
                    trace.inputs.len(),
                    self.layers.len()
                ),
            ));
        }
        let mut grads = Gradients::zeros_like(params);
        let mut d_current = d_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            d_current = match layer {
                Layer::Conv3d { kernels, bias, padding } => {
                    let (dx, dk, db) =
                        ops::conv3d_backward(input, params.value(kernels)?, *padding, &d_current);
                    grads.accumulate(kernels, &dk);
                    grads.accumulate(bias, &db);
                    dx
                }
                Layer::Relu => ops::relu_backward(input, &d_current),
                Layer::MaxPool3d { .. } => match &trace.aux[i] {
                    LayerAux::Pool(argmax) => {
                        ops::maxpool3d_backward(input.shape(), argmax, &d_current)
                    }
                    _ => unreachable!("pool layer without pool aux"),
                },
                Layer::Flatten => d_current.reshaped(input.shape()),
                Layer::Dense { weights, bias } => {
                    let (dx, dw, db) = ops::dense_backward(input, params.value(weights)?, &d_current);
                    grads.accumulate(weights, &dw);
                    grads.accumulate(bias, &db);
                    dx
                }
                Layer::Dropout { .. } => match &trace.aux[i] {
                    LayerAux::DropoutMask(mask) => ops::dropout_backward(mask, &d_current),
                    LayerAux::Identity => d_current,
                    _ => unreachable!("dropout layer without dropout aux"),
                },
            };
        }
        Ok((grads, d_current))
    }

    /// Forward output, cross-entropy loss against `label`, and parameter
    /// gradients in one call.
    pub fn loss_and_grads<R: Rng>(
        &self,
        params: &ParamSet,
        input: &Tensor,
        label: usize,
        dropout_rng: Option<&mut R>,
    ) -> Result<(Scalar, Gradients), TensorError> {
        let trace = self.forward(params, input, dropout_rng)?;
        let (loss, d_logits) = ops::softmax_cross_entropy(trace.output(), label)?;
        let (grads, _) = self.backward(params, &trace, &d_logits)?;
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn param_sum_chain() -> (Chain, ParamSet) {
        // loss-like scalar: dense with all-one input reads off the weights.
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(&[3, 1], vec![2.0, -1.0, 0.5]));
        params.insert("b", Tensor::zeros(&[1]));
        let chain = Chain::new(vec![Layer::Dense { weights: "w".into(), bias: "b".into() }]);
        (chain, params)
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let (chain, params) = param_sum_chain();
        let input = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]);
        let trace = chain
            .forward::<ChaCha8Rng>(&params, &input, None)
            .unwrap();
        let (grads, _) = chain
            .backward(&params, &trace, &Tensor::from_vec(&[1], vec![1.0]))
            .unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[1.0]);
    }

    #[test]
    fn zero_upstream_gradient_yields_zero_grads() {
        let (chain, params) = param_sum_chain();
        let input = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]);
        let trace = chain.forward::<ChaCha8Rng>(&params, &input, None).unwrap();
        let (grads, _) = chain
            .backward(&params, &trace, &Tensor::from_vec(&[1], vec![0.0]))
            .unwrap();
        assert!(grads.get("w").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let (chain, mut params) = param_sum_chain();
        params.insert("orphan", Tensor::from_vec(&[2], vec![5.0, 5.0]));
        let input = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]);
        let trace = chain.forward::<ChaCha8Rng>(&params, &input, None).unwrap();
        let (grads, _) = chain
            .backward(&params, &trace, &Tensor::from_vec(&[1], vec![1.0]))
            .unwrap();
        assert_eq!(grads.get("orphan").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn mismatched_trace_is_rejected() {
        let (chain, params) = param_sum_chain();
        let input = Tensor::from_vec(&[3], vec![1.0; 3]);
        let trace = chain.forward::<ChaCha8Rng>(&params, &input, None).unwrap();
        let longer = Chain::new(vec![
            Layer::Dense { weights: "w".into(), bias: "b".into() },
            Layer::Relu,
        ]);
        assert!(longer
            .backward(&params, &trace, &Tensor::from_vec(&[1], vec![1.0]))
            .is_err());
    }
}
