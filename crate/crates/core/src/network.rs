//! Layer stacks built from a [`NetworkConfig`], with forward and backward
//! passes and flat parameter access for the optimizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::comp_layer::{
    comp_backward_input, comp_backward_params, comp_forward, dense_layer_backward,
    dense_layer_forward, CompFilterBank, CompLayerGrads,
};
use crate::config::{LayerSpec, NetworkConfig};
use crate::error::{invalid, Result};
use crate::gaussian::{GaussianComponent, KernelGeometry};
use crate::tensor::{
    argmax_scores, fully_connected, fully_connected_backward, maxpool, maxpool_backward, relu,
    relu_backward, softmax_xent, DenseFilterBank, FcParams, PoolIndex, Tensor4,
};

/// Deviation of the Gaussian initialization of dense conv and
/// fully-connected weights.

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    CompConv(CompFilterBank),
    DenseConv(DenseFilterBank),
    Relu,
    MaxPool { window: usize, stride: usize },
    FullyConnected(FcParams),
    SoftmaxLoss,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::CompConv(b) => 4 * b.component_count() + b.bias().len(),
            Layer::DenseConv(b) => b.weights.len() + b.bias.len(),
            Layer::FullyConnected(fc) => fc.weights.len() + fc.bias.len(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrads {
    CompConv(CompLayerGrads),
    Dense { weights: Vec<f64>, bias: Vec<f64> },
    None,
}

/// Activations saved by a forward pass for the backward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    /// `inputs[i]` is the tensor entering layer `i`; the last entry holds the
    /// class scores.
    pub inputs: Vec<Tensor4>,
    pools: Vec<Option<PoolIndex>>,
}

impl ForwardTrace {
    pub fn scores(&self) -> &Tensor4 {
        self.inputs.last().expect("trace has at least the input")
    }

    /// Pooling winners per layer; `None` for layers that are not pools.
    pub fn pools(&self) -> &[Option<PoolIndex>] {
        &self.pools
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<Layer>,
}

impl Network {
    /// Builds and initializes every layer from `config` using `seed`. Dense
    /// convolution weights are `N(0, 2 / fan_in)`, fully-connected weights
    /// `N(0, 1 / fan_in)`, biases zero.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let shapes = config.shapes()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layers.len());
        for (spec, &(c, h, w)) in config.layers.iter().zip(&shapes) {
            let layer = match *spec {
                LayerSpec::CompConv {
                    features,
                    kernel,
                    components,
                } => Layer::CompConv(CompFilterBank::init(
                    features,
                    c,
                    KernelGeometry::new(kernel[1], kernel[0])?,
                    (components[1], components[0]),
                    &mut rng,
                )?),
                LayerSpec::DenseConv { features, kernel } => {
                    let n = features * c * kernel[0] * kernel[1];
                    let std = (2.0 / (c * kernel[0] * kernel[1]) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("valid deviation");
                    let weights = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    Layer::DenseConv(DenseFilterBank::new(
                        features,
                        c,
                        kernel[0],
                        kernel[1],
                        weights,
                        vec![0.0; features],
                    )?)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Maxpool { window, stride } => Layer::MaxPool { window, stride },
                LayerSpec::FullyConnected { outputs } => {
                    let inputs = c * h * w;
                    let normal =
                        Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("valid deviation");
                    let weights = (0..inputs * outputs)
                        .map(|_| normal.sample(&mut rng))
                        .collect();
                    Layer::FullyConnected(FcParams::new(
                        inputs,
                        outputs,
                        weights,
                        vec![0.0; outputs],
                    )?)
                }
                LayerSpec::SoftmaxLoss => Layer::SoftmaxLoss,
            };
            layers.push(layer);
        }
        Ok(Network { config, layers })
    }

    /// Assembles a network from explicit layers, checking them against the
    /// config.
    pub fn from_layers(config: NetworkConfig, layers: Vec<Layer>) -> Result<Self> {
        let shapes = config.shapes()?;
        config.validate()?;
        if layers.len() != config.layers.len() {
            return Err(invalid(format!(
                "{} layers for a {}-layer config",
                layers.len(),
                config.layers.len()
            )));
        }
        for (i, ((spec, layer), &(c, h, w))) in
            config.layers.iter().zip(&layers).zip(&shapes).enumerate()
        {
            let ok = match (spec, layer) {
                (
                    LayerSpec::CompConv {
                        features, kernel, ..
                    },
                    Layer::CompConv(b),
                ) => {
                    b.validate()?;
                    b.features() == *features
                        && b.channels() == c
                        && b.geometry() == KernelGeometry::new(kernel[1], kernel[0])?
                }
                (LayerSpec::DenseConv { features, kernel }, Layer::DenseConv(b)) => {
                    b.f == *features && b.s == c && b.kh == kernel[0] && b.kw == kernel[1]
                }
                (LayerSpec::Relu, Layer::Relu) => true,
                (
                    LayerSpec::Maxpool { window, stride },
                    Layer::MaxPool {
                        window: w2,
                        stride: s2,
                    },
                ) => window == w2 && stride == s2,
                (LayerSpec::FullyConnected { outputs }, Layer::FullyConnected(fc)) => {
                    fc.outputs == *outputs && fc.inputs == c * h * w
                }
                (LayerSpec::SoftmaxLoss, Layer::SoftmaxLoss) => true,
                _ => false,
            };
            if !ok {
                return Err(invalid(format!(
                    "layer {} ({}) does not match its config stanza",
                    i + 1,
                    spec.kind()
                )));
            }
        }
        Ok(Network { config, layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Indices of the compositional layers, in order.
    pub fn comp_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::CompConv(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn comp_banks_mut(&mut self) -> impl Iterator<Item = &mut CompFilterBank> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::CompConv(b) => Some(b),
            _ => None,
        })
    }

    pub fn comp_banks(&self) -> impl Iterator<Item = &CompFilterBank> {
        self.layers.iter().filter_map(|l| match l {
            Layer::CompConv(b) => Some(b),
            _ => None,
        })
    }

    pub fn project_constraints(&mut self) {
        for bank in self.comp_banks_mut() {
            bank.project_constraints();
        }
    }

    pub fn validate(&self) -> Result<()> {
        for bank in self.comp_banks() {
            bank.validate()?;
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.config.classes()
    }

    pub fn forward(&self, input: &Tensor4) -> Result<ForwardTrace> {
        let (c, h, w) = (
            self.config.input.channels,
            self.config.input.height,
            self.config.input.width,
        );
        if (input.c(), input.h(), input.w()) != (c, h, w) {
            return Err(invalid(format!(
                "network expects {}x{}x{} samples, got {:?}",
                c,
                h,
                w,
                input.dims()
            )));
        }
        let mut inputs = vec![input.clone()];
        let mut pools = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = inputs.last().expect("non-empty");
            let (y, pool) = match layer {
                Layer::CompConv(b) => (comp_forward(x, b)?, None),
                Layer::DenseConv(b) => (dense_layer_forward(x, b)?, None),
                Layer::Relu => (relu(x), None),
                Layer::MaxPool { window, stride } => {
                    let (y, idx) = maxpool(x, *window, *stride)?;
                    (y, Some(idx))
                }
                Layer::FullyConnected(fc) => (fully_connected(x, fc)?, None),
                Layer::SoftmaxLoss => break,
            };
            inputs.push(y);
            pools.push(pool);
        }
        Ok(ForwardTrace { inputs, pools })
    }

    pub fn scores(&self, input: &Tensor4) -> Result<Tensor4> {
        let mut trace = self.forward(input)?;
        Ok(trace.inputs.pop().expect("non-empty"))
    }

    /// Mean loss over the batch and the gradient of every layer.
    pub fn loss_and_grads(
        &self,
        input: &Tensor4,
        labels: &[usize],
    ) -> Result<(f64, Vec<LayerGrads>)> {
        let trace = self.forward(input)?;
        let (loss, mut grad) = softmax_xent(trace.scores(), labels)?;
        // the loss layer has no trace entry of its own
        let depth = self.layers.len() - 1;
        let mut grads = vec![LayerGrads::None; self.layers.len()];
        for i in (0..depth).rev() {
            let x = &trace.inputs[i];
            let need_input = i > 0;
            match &self.layers[i] {
                Layer::CompConv(b) => {
                    grads[i] = LayerGrads::CompConv(comp_backward_params(x, &grad, b)?);
                    if need_input {
                        grad = comp_backward_input(&grad, b)?;
                    }
                }
                Layer::DenseConv(b) => {
                    let g = dense_layer_backward(x, &grad, b)?;
                    grads[i] = LayerGrads::Dense {
                        weights: g.weights,
                        bias: g.bias,
                    };
                    grad = g.input;
                }
                Layer::Relu => grad = relu_backward(&grad, x)?,
                Layer::MaxPool { .. } => {
                    grad = maxpool_backward(&grad, trace.pools[i].as_ref().expect("pool index"))?
                }
                Layer::FullyConnected(fc) => {
                    let g = fully_connected_backward(x, fc, &grad)?;
                    grads[i] = LayerGrads::Dense {
                        weights: g.weights,
                        bias: g.bias,
                    };
                    grad = g.input;
                }
                Layer::SoftmaxLoss => {}
            }
        }
        Ok((loss, grads))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// All trainable parameters in a fixed order: per compositional
    /// component `(weight, mu_x, mu_y, sigma)` then the biases; dense
    /// weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            match layer {
                Layer::CompConv(b) => {
                    for c in b.components() {
                        out.extend_from_slice(&[c.weight, c.mu_x, c.mu_y, c.sigma]);
                    }
                    out.extend_from_slice(b.bias());
                }
                Layer::DenseConv(b) => {
                    out.extend_from_slice(&b.weights);
                    out.extend_from_slice(&b.bias);
                }
                Layer::FullyConnected(fc) => {
                    out.extend_from_slice(&fc.weights);
                    out.extend_from_slice(&fc.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Inverse of [`Network::params`]; does not project constraints.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(invalid(format!(
                "{} parameters for a network with {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut it = params.iter().copied();
        let mut fill = |dst: &mut [f64]| {
            for d in dst.iter_mut() {
                *d = it.next().expect("length checked");
            }
        };
        for layer in &mut self.layers {
            match layer {
                Layer::CompConv(b) => {
                    for c in b.components_mut() {
                        let mut v = [0.0; 4];
                        fill(&mut v);
                        *c = GaussianComponent::new(v[0], v[1], v[2], v[3]);
                    }
                    fill(b.bias_mut());
                }
                Layer::DenseConv(b) => {
                    fill(&mut b.weights);
                    fill(&mut b.bias);
                }
                Layer::FullyConnected(fc) => {
                    fill(&mut fc.weights);
                    fill(&mut fc.bias);
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Flattens per-layer gradients in the order of [`Network::params`].
    pub fn flatten_grads(&self, grads: &[LayerGrads]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for g in grads {
            match g {
                LayerGrads::CompConv(cg) => {
                    for c in cg.groups.iter().flatten() {
                        out.extend_from_slice(&[c.weight, c.mu_x, c.mu_y, c.sigma]);
                    }
                    out.extend_from_slice(&cg.bias);
                }
                LayerGrads::Dense { weights, bias } => {
                    out.extend_from_slice(weights);
                    out.extend_from_slice(bias);
                }
                LayerGrads::None => {}
            }
        }
        out
    }

    /// Mean loss and accuracy over a dataset, evaluated in batches.
    pub fn evaluate(&self, images: &Tensor4, labels: &[usize], batch: usize) -> Result<(f64, f64)> {
        if images.n() == 0 {
            return Err(invalid("cannot evaluate on an empty dataset"));
        }
        let batch = batch.max(1);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut start = 0;
        while start < images.n() {
            let end = (start + batch).min(images.n());
            let idx: Vec<usize> = (start..end).collect();
            let x = images.gather(&idx);
            let y = &labels[start..end];
            let scores = self.scores(&x)?;
            let (loss, _) = softmax_xent(&scores, y)?;
            loss_sum += loss * (end - start) as f64;
            correct += argmax_scores(&scores)
                .iter()
                .zip(y)
                .filter(|(p, l)| p == l)
                .count();
            start = end;
        }
        Ok((
            loss_sum / images.n() as f64,
            correct as f64 / images.n() as f64,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CIFAR10_COMPOSITIONAL;

    #[test]
    fn cifar_net_builds_with_expected_params() {
        let cfg = NetworkConfig::parse(CIFAR10_COMPOSITIONAL).unwrap();
        let net = Network::new(cfg, 1).unwrap();
        // 32*3*4 + 32*32*9 components, 4 params each, plus biases and ip1
        let comps = 32 * 3 * 4 + 32 * 32 * 9;
        assert_eq!(net.param_count(), comps * 4 + 64 + 32 * 7 * 7 * 10 + 10);
        let p = net.params();
        let mut other = Network::new(net.config().clone(), 2).unwrap();
        assert_ne!(other.params(), p);
        other.set_params(&p).unwrap();
        assert_eq!(other, net);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let cfg = NetworkConfig::parse(CIFAR10_COMPOSITIONAL).unwrap();
        let net = Network::new(cfg, 1).unwrap();
        assert!(net.forward(&Tensor4::zeros(1, 1, 32, 32)).is_err());
    }
}
