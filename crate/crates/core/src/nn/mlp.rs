use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<S: Real>(self, z: S) -> S {
        match self {
            Activation::Elu => {
                if z > S::zero() {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    pub fn derivative<S: Real>(self, z: S, y: S) -> S {
        match self {
            Activation::Elu => {
                if z > S::zero() {
                    S::one()
                } else {
                    y + S::one()
                }
            }
            Activation::Tanh => S::one() - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "elu" => Some(Activation::Elu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Architecture of a dense network. The activation applies to hidden layers;
/// the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self { input_dim, hidden_dims, output_dim, activation: Activation::Elu }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("network input/output dims must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("network needs at least one hidden layer".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer dims must be >= 1".into()));
        }
        Ok(())
    }

    /// `(in, out)` for every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// One affine layer: `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Real> Dense<S> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { weight: Array2::zeros((out_dim, in_dim)), bias: Array1::zeros(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Network parameters together with the architecture they instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S> {
    spec: MlpSpec,
    layers: Vec<Dense<S>>,
}

/// Activations recorded by [`Mlp::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    /// Input to every layer; `layer_inputs[0]` is the network input.
    layer_inputs: Vec<Array2<S>>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<Array2<S>>,
}

impl<S> ForwardCache<S> {
    pub fn batch_size(&self) -> usize {
        self.layer_inputs[0].nrows()
    }
}

/// Gradients shaped like the network parameters, plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<S> {
    pub layers: Vec<Dense<S>>,
    pub input: Array2<S>,
}

impl<S: Real> MlpGrads<S> {
    pub fn slices(&self) -> Vec<&[S]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn scale(&mut self, k: S) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|v| v * k);
            l.bias.mapv_inplace(|v| v * k);
        }
        self.input.mapv_inplace(|v| v * k);
    }
}

impl<S: Real> Mlp<S> {
    /// Uniform fan-in initialisation (`|w| <= 1/sqrt(fan_in)`), zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    S::lit(rng.random_range(-bound..bound))
                });
                Dense { weight, bias: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_shapes().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect();
        Ok(Self { spec, layers })
    }

    /// Build from explicit layers; shapes must chain according to `spec`.
    pub fn from_layers(spec: MlpSpec, layers: Vec<Dense<S>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (k, (&(i, o), l)) in shapes.iter().zip(&layers).enumerate() {
            if l.weight.dim() != (o, i) || l.bias.len() != o {
                return Err(Error::Shape(format!(
                    "layer {k}: expected {o}x{i} weight and {o} bias, got {:?} and {}",
                    l.weight.dim(),
                    l.bias.len()
                )));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<S>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Zero the output layer so the network initially predicts exactly zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weight.fill(S::zero());
        last.bias.fill(S::zero());
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn check_input(&self, inputs: &ArrayView2<S>) -> Result<()> {
        if inputs.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if inputs.ncols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input width {} != network input_dim {}",
                inputs.ncols(),
                self.spec.input_dim
            )));
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, inputs: ArrayView2<S>) -> Result<Array2<S>> {
        self.check_input(&inputs)?;
        let act = self.spec.activation;
        let last = self.layers.len() - 1;
        let mut h = affine(&self.layers[0], inputs);
        for (k, layer) in self.layers.iter().enumerate().skip(1) {
            h.mapv_inplace(|z| act.apply(z));
            h = affine(layer, h.view());
            debug_assert!(k <= last);
        }
        Ok(h)
    }

    pub fn forward(&self, inputs: ArrayView2<S>) -> Result<(Array2<S>, ForwardCache<S>)> {
        self.check_input(&inputs)?;
        let act = self.spec.activation;
        let n = self.layers.len();
        let mut layer_inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n - 1);
        layer_inputs.push(inputs.to_owned());
        for layer in &self.layers[..n - 1] {
            let z = affine(layer, layer_inputs.last().expect("non-empty").view());
            let y = z.mapv(|v| act.apply(v));
            pre_activations.push(z);
            layer_inputs.push(y);
        }
        let out = affine(&self.layers[n - 1], layer_inputs[n - 1].view());
        Ok((out, ForwardCache { layer_inputs, pre_activations }))
    }

    /// Reverse-mode gradients of `sum(grad_output ⊙ forward(inputs))`.
    pub fn backward(&self, cache: &ForwardCache<S>, grad_output: ArrayView2<S>) -> Result<MlpGrads<S>> {
        let n = self.layers.len();
        if cache.layer_inputs.len() != n || cache.pre_activations.len() + 1 != n {
            return Err(Error::Shape("forward cache does not match network depth".into()));
        }
        for (k, (x, l)) in cache.layer_inputs.iter().zip(&self.layers).enumerate() {
            if x.ncols() != l.in_dim() {
                return Err(Error::Shape(format!("cache layer {k} width mismatch")));
            }
        }
        let batch = cache.batch_size();
        if grad_output.dim() != (batch, self.spec.output_dim) {
            return Err(Error::Shape(format!(
                "grad_output {:?} != ({batch}, {})",
                grad_output.dim(),
                self.spec.output_dim
            )));
        }
        let act = self.spec.activation;
        let mut grads: Vec<Dense<S>> = Vec::with_capacity(n);
        let mut g = grad_output.to_owned();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let x = &cache.layer_inputs[k];
            let weight = g.t().dot(x);
            let bias = g.sum_axis(Axis(0));
            grads.push(Dense { weight, bias });
            let mut g_in = g.dot(&layer.weight);
            if k > 0 {
                let z = &cache.pre_activations[k - 1];
                let y = &cache.layer_inputs[k];
                ndarray::Zip::from(&mut g_in)
                    .and(z)
                    .and(y)
                    .for_each(|gi, &zv, &yv| *gi *= act.derivative(zv, yv));
            }
            g = g_in;
        }
        grads.reverse();
        Ok(MlpGrads { layers: grads, input: g })
    }
}

fn affine<S: Real>(layer: &Dense<S>, x: ArrayView2<S>) -> Array2<S> {
    let mut z = x.dot(&layer.weight.t());
    z += &layer.bias;
    z
}
