use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{Mat, RngStream};
use crate::neural::GradBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative given the preactivation `pre` and output `out`.
    /// The ReLU subgradient at exactly zero is zero.
    #[inline]
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

/// One affine layer followed by an activation. `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Multi-layer perceptron used as a learnable feature map.
///
/// Rows of the input matrix are samples; `forward` returns one feature
/// vector per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    layers: Vec<Layer>,
}

/// Per-layer values kept from a forward pass for the backward pass.
struct Trace {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
    output: Mat,
}

impl FeatureMap {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "feature map needs at least one layer".into(),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows() {
                return Err(dim_err(
                    "FeatureMap::new bias",
                    l.weight.rows(),
                    l.bias.len(),
                ));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(dim_err(
                    "FeatureMap::new layer chain",
                    layers[i - 1].weight.rows(),
                    l.weight.cols(),
                ));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("feature map parameters"));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero biases.
    ///
    /// `layer_dims` lists the input dimension first and the feature dimension
    /// last; `activations` has one entry per layer.
    pub fn init(
        layer_dims: &[usize],
        activations: &[Activation],
        rng: &mut RngStream,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "layer_dims needs an input and at least one output dimension".into(),
            ));
        }
        if activations.len() != layer_dims.len() - 1 {
            return Err(dim_err(
                "FeatureMap::init activations",
                layer_dims.len() - 1,
                activations.len(),
            ));
        }
        let layers = layer_dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Mat::from_fn(fan_out, fan_in, |_, _| rng.uniform_range(-limit, limit));
                Layer {
                    weight,
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Self::new(layers)
    }

    /// `layer_dims` with ReLU hidden layers and the given output activation.
    pub fn relu_mlp(layer_dims: &[usize], output: Activation, rng: &mut RngStream) -> Result<Self> {
        let n = layer_dims.len().saturating_sub(1);
        let mut acts = vec![Activation::Relu; n];
        if let Some(last) = acts.last_mut() {
            *last = output;
        }
        Self::init(layer_dims, &acts, rng)
    }

    /// A single identity-activation layer with `W = I`, `b = 0`.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Layer {
                weight: Mat::identity(dim),
                bias: vec![0.0; dim],
                activation: Activation::Identity,
            }],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.rows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * (l.weight.cols() + 1))
            .sum()
    }

    pub fn forward(&self, inputs: &Mat) -> Result<Mat> {
        self.check_input(inputs)?;
        let mut h = inputs.clone();
        for layer in &self.layers {
            h = affine(&h, layer)?;
            let act = layer.activation;
            if act != Activation::Identity {
                h.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        Ok(h)
    }

    fn forward_trace(&self, inputs: &Mat) -> Result<Trace> {
        self.check_input(inputs)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = inputs.clone();
        for layer in &self.layers {
            let z = affine(&h, layer)?;
            let act = layer.activation;
            let out = z.map(|v| act.apply(v));
            layer_inputs.push(h);
            pre.push(z);
            h = out;
        }
        Ok(Trace {
            inputs: layer_inputs,
            pre,
            output: h,
        })
    }

    /// Gradient of `⟨upstream, forward(inputs)⟩` with respect to every
    /// parameter.
    pub fn backward(&self, inputs: &Mat, upstream: &Mat) -> Result<GradBuffer> {
        let mut grads = GradBuffer::zeros_for(self);
        self.backward_into(inputs, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Like [`FeatureMap::backward`] but adds into `grads`; the caller zeroes.
    pub fn backward_into(
        &self,
        inputs: &Mat,
        upstream: &Mat,
        grads: &mut GradBuffer,
    ) -> Result<()> {
        if !grads.matches(self) {
            return Err(dim_err(
                "backward_into",
                "grad buffer shaped like the map",
                "mismatch",
            ));
        }
        let trace = self.forward_trace(inputs)?;
        if upstream.shape() != trace.output.shape() {
            return Err(dim_err(
                "backward upstream",
                format!("{:?}", trace.output.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let last = self.layers.len() - 1;
        let mut g = upstream.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let pre = &trace.pre[li];
            let out = if li == last {
                &trace.output
            } else {
                &trace.inputs[li + 1]
            };
            let act = layer.activation;
            if act != Activation::Identity {
                for ((gv, &p), &o) in g
                    .as_mut_slice()
                    .iter_mut()
                    .zip(pre.as_slice())
                    .zip(out.as_slice())
                {
                    *gv *= act.derivative(p, o);
                }
            }
            let x = &trace.inputs[li];
            let dw = g.t_matmul(x)?;
            grads.weights[li].add_assign_scaled(&dw, 1.0)?;
            for (b, s) in grads.biases[li].iter_mut().zip(g.col_sums()) {
                *b += s;
            }
            if li > 0 {
                g = g.matmul(&layer.weight)?;
            }
        }
        Ok(())
    }

    fn check_input(&self, inputs: &Mat) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(dim_err(
                "FeatureMap::forward input cols",
                self.input_dim(),
                inputs.cols(),
            ));
        }
        Ok(())
    }

    /// All parameters flattened layer by layer: weights (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(dim_err("set_params", self.param_count(), params.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.rows() * l.weight.cols();
            l.weight
                .as_mut_slice()
                .copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}

fn affine(h: &Mat, layer: &Layer) -> Result<Mat> {
    let mut z = h.matmul_t(&layer.weight)?;
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}
