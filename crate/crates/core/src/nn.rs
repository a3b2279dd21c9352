//! Dense feed-forward modules with exact reverse-mode gradients.
//!
//! Parameter gradients are summed over the rows of the batch; input
//! gradients are returned per row. Everything is double precision.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy_slice, dot, Matrix};
use crate::math;
use crate::rng::substream;

/// Hidden-layer nonlinearity. `Relu` is available but is not smooth, which
/// makes the latent gradient discontinuous for the sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

/// Output-layer link. `Sigmoid` is reserved for binary treatment heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width first, output width last.
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        hidden_activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let spec = MlpSpec {
            layer_widths,
            hidden_activation,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least an input and an output width, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Layer {
                weights: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        MlpParams { layers }
    }

    /// Check that the shapes agree with `spec`.
    pub fn check(&self, spec: &MlpSpec) -> Result<()> {
        if self.layers.len() != spec.n_layers() {
            return Err(Error::Dimension(format!(
                "params have {} layers, spec has {}",
                self.layers.len(),
                spec.n_layers()
            )));
        }
        for (l, (layer, w)) in self.layers.iter().zip(spec.layer_widths.windows(2)).enumerate() {
            if layer.weights.shape() != (w[1], w[0]) || layer.bias.len() != w[1] {
                return Err(Error::Dimension(format!(
                    "layer {l}: weights {:?} / bias {} do not match widths {} -> {}",
                    layer.weights.shape(),
                    layer.bias.len(),
                    w[0],
                    w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer: weights (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(spec: &MlpSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::Dimension(format!(
                "{} values for a network with {} parameters",
                flat.len(),
                spec.param_count()
            )));
        }
        let mut p = MlpParams::zeros(spec);
        p.for_each_mut(|i, v| *v = flat[i]);
        Ok(p)
    }

    /// Visit every parameter mutably with its flat index.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut i = 0;
        for l in &mut self.layers {
            for v in l.weights.as_mut_slice().iter_mut().chain(l.bias.iter_mut()) {
                f(i, v);
                i += 1;
            }
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(usize, f64)) {
        let mut i = 0;
        for l in &self.layers {
            for &v in l.weights.as_slice().iter().chain(l.bias.iter()) {
                f(i, v);
                i += 1;
            }
        }
    }

    /// `self += alpha * other` (shapes must match).
    pub fn axpy(&mut self, alpha: f64, other: &MlpParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.axpy(alpha, &b.weights);
            axpy_slice(&mut a.bias, alpha, &b.bias);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.for_each_mut(|_, v| *v *= alpha);
    }

    pub fn sum_sq(&self) -> f64 {
        let mut s = 0.0;
        self.for_each(|_, v| s += v * v);
        s
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.sum_sq())
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, v| ok &= v.is_finite());
        ok
    }

    /// Zero every entry whose mask bit is `false`.
    pub fn apply_mask(&mut self, keep: &[bool]) {
        self.for_each_mut(|i, v| {
            if !keep[i] {
                *v = 0.0;
            }
        });
    }
}

/// Pre-activations and activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `pre[l]` is the affine output of layer `l`.
    pub pre: Vec<Matrix>,
    /// `post[0]` is the input; `post[l + 1]` the activation of layer `l`.
    pub post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.post.last().unwrap()
    }
}

/// Uniform fan-in scaled initialisation: weights of layer `l` are drawn from
/// `U[-scale / sqrt(fan_in), scale / sqrt(fan_in)]`, biases are zero.
pub fn init_params(spec: &MlpSpec, seed: u64, scale: f64) -> Result<MlpParams> {
    spec.validate()?;
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::Config(format!(
            "initialisation scale must be finite and non-negative, got {scale}"
        )));
    }
    let mut rng = substream(seed, 0);
    let mut params = MlpParams::zeros(spec);
    if scale == 0.0 {
        return Ok(params);
    }
    for layer in &mut params.layers {
        let bound = scale / math::sqrt(layer.weights.cols() as f64);
        for w in layer.weights.as_mut_slice() {
            let u: f64 = rng.random();
            *w = bound * (2.0 * u - 1.0);
        }
    }
    Ok(params)
}

#[inline]
fn hidden(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Tanh => math::tanh(x),
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Sigmoid => math::expit(x),
    }
}

/// Derivative of the hidden activation given pre- and post-activation.
#[inline]
fn hidden_deriv(act: Activation, pre: f64, post: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - post * post,
        Activation::Relu => {
            if pre > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => post * (1.0 - post),
    }
}

fn affine(input: &Matrix, layer: &Layer) -> Matrix {
    let n = input.rows();
    let out = layer.weights.rows();
    let mut z = Matrix::zeros(n, out);
    for i in 0..n {
        let x = input.row(i);
        let zr = z.row_mut(i);
        for (o, zo) in zr.iter_mut().enumerate() {
            *zo = layer.bias[o] + dot(layer.weights.row(o), x);
        }
    }
    z
}

fn check_input(spec: &MlpSpec, params: &MlpParams, input: &Matrix) -> Result<()> {
    spec.validate()?;
    params.check(spec)?;
    if input.cols() != spec.input_dim() {
        return Err(Error::Dimension(format!(
            "network expects {} input columns, got {}",
            spec.input_dim(),
            input.cols()
        )));
    }
    if !input.is_finite() {
        return Err(Error::Numeric("non-finite network input".into()));
    }
    Ok(())
}

/// Forward pass keeping every intermediate for [`mlp_backward`].
pub fn mlp_forward(
    spec: &MlpSpec,
    params: &MlpParams,
    input: &Matrix,
) -> Result<(Matrix, ForwardTrace)> {
    check_input(spec, params, input)?;
    let n_layers = params.layers.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers + 1);
    post.push(input.clone());
    for (l, layer) in params.layers.iter().enumerate() {
        let z = affine(post.last().unwrap(), layer);
        let a = if l + 1 == n_layers {
            match spec.output_activation {
                OutputActivation::Identity => z.clone(),
                OutputActivation::Sigmoid => z.map(math::expit),
            }
        } else {
            z.map(|v| hidden(spec.hidden_activation, v))
        };
        pre.push(z);
        post.push(a);
    }
    let out = post.last().unwrap().clone();
    Ok((out, ForwardTrace { pre, post }))
}

/// Forward pass without a trace.
pub fn mlp_eval(spec: &MlpSpec, params: &MlpParams, input: &Matrix) -> Result<Matrix> {
    check_input(spec, params, input)?;
    let n_layers = params.layers.len();
    let mut cur = affine(input, &params.layers[0]);
    for l in 0..n_layers {
        if l + 1 == n_layers {
            if spec.output_activation == OutputActivation::Sigmoid {
                cur = cur.map(math::expit);
            }
        } else {
            let act = spec.hidden_activation;
            for v in cur.as_mut_slice() {
                *v = hidden(act, *v);
            }
            cur = affine(&cur, &params.layers[l + 1]);
        }
    }
    Ok(cur)
}

fn check_trace(spec: &MlpSpec, params: &MlpParams, trace: &ForwardTrace) -> Result<usize> {
    params.check(spec)?;
    if trace.pre.len() != spec.n_layers() || trace.post.len() != spec.n_layers() + 1 {
        return Err(Error::Dimension(format!(
            "trace holds {} layers, spec has {}",
            trace.pre.len(),
            spec.n_layers()
        )));
    }
    let n = trace.post[0].rows();
    for (l, w) in spec.layer_widths.iter().enumerate() {
        if trace.post[l].cols() != *w || trace.post[l].rows() != n {
            return Err(Error::Dimension(format!(
                "trace activation {l} has shape {:?}, expected {n}x{w}",
                trace.post[l].shape()
            )));
        }
    }
    Ok(n)
}

/// Reverse pass from the gradient of a scalar with respect to the network
/// output. Returns batch-summed parameter gradients and per-row input
/// gradients.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &MlpParams,
    trace: &ForwardTrace,
    output_grad: &Matrix,
) -> Result<(MlpParams, Matrix)> {
    let n = check_trace(spec, params, trace)?;
    output_grad.check_shape(n, spec.output_dim(), "output gradient")?;
    let delta = match spec.output_activation {
        OutputActivation::Identity => output_grad.clone(),
        OutputActivation::Sigmoid => {
            let out = trace.output();
            let mut d = output_grad.clone();
            for (g, &s) in d.as_mut_slice().iter_mut().zip(out.as_slice()) {
                *g *= s * (1.0 - s);
            }
            d
        }
    };
    backprop(spec, params, trace, delta)
}

/// Reverse pass seeded with the gradient with respect to the output layer's
/// pre-activation (the logits for a sigmoid head).
pub fn mlp_backward_preactivation(
    spec: &MlpSpec,
    params: &MlpParams,
    trace: &ForwardTrace,
    preact_grad: &Matrix,
) -> Result<(MlpParams, Matrix)> {
    let n = check_trace(spec, params, trace)?;
    preact_grad.check_shape(n, spec.output_dim(), "pre-activation gradient")?;
    backprop(spec, params, trace, preact_grad.clone())
}

fn backprop(
    spec: &MlpSpec,
    params: &MlpParams,
    trace: &ForwardTrace,
    mut delta: Matrix,
) -> Result<(MlpParams, Matrix)> {
    let n = delta.rows();
    let mut grads = MlpParams::zeros(spec);
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let input = &trace.post[l];
        let g = &mut grads.layers[l];
        for i in 0..n {
            let d = delta.row(i);
            let x = input.row(i);
            for (o, &dv) in d.iter().enumerate() {
                if dv != 0.0 {
                    axpy_slice(g.weights.row_mut(o), dv, x);
                    g.bias[o] += dv;
                }
            }
        }
        let mut prev = Matrix::zeros(n, layer.weights.cols());
        for i in 0..n {
            let d = delta.row(i);
            let pr = prev.row_mut(i);
            for (o, &dv) in d.iter().enumerate() {
                if dv != 0.0 {
                    axpy_slice(pr, dv, layer.weights.row(o));
                }
            }
        }
        if l > 0 {
            let pre = &trace.pre[l - 1];
            let post = &trace.post[l];
            for ((p, &z), &a) in prev
                .as_mut_slice()
                .iter_mut()
                .zip(pre.as_slice())
                .zip(post.as_slice())
            {
                *p *= hidden_deriv(spec.hidden_activation, z, a);
            }
        }
        delta = prev;
    }
    Ok((grads, delta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(widths: &[usize]) -> MlpSpec {
        MlpSpec::new(widths.to_vec(), Activation::Tanh, OutputActivation::Identity).unwrap()
    }

    #[test]
    fn spec_rejects_degenerate_widths() {
        assert!(MlpSpec::new(vec![3], Activation::Tanh, OutputActivation::Identity).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Tanh, OutputActivation::Identity).is_err());
    }

    #[test]
    fn zero_scale_gives_zero_params() {
        let p = init_params(&spec(&[3, 4, 1]), 1, 0.0).unwrap();
        assert_eq!(p.sum_sq(), 0.0);
    }

    #[test]
    fn init_is_deterministic() {
        let s = spec(&[3, 4, 1]);
        assert_eq!(init_params(&s, 11, 1.0).unwrap(), init_params(&s, 11, 1.0).unwrap());
        assert_ne!(init_params(&s, 11, 1.0).unwrap(), init_params(&s, 12, 1.0).unwrap());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let s = spec(&[3, 4, 1]);
        let p = init_params(&s, 7, 1.0).unwrap();
        for layer in &p.layers {
            let bound = 1.0 / (layer.weights.cols() as f64).sqrt();
            assert!(layer.weights.as_slice().iter().all(|w| w.abs() <= bound));
            assert!(layer.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_rejects_negative_scale() {
        assert!(matches!(init_params(&spec(&[2, 1]), 0, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_output_bias() {
        let s = spec(&[2, 3, 2]);
        let mut p = MlpParams::zeros(&s);
        p.layers[1].bias = vec![0.5, -1.5];
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.1]]).unwrap();
        let (y, _) = mlp_forward(&s, &p, &x).unwrap();
        for i in 0..2 {
            assert_eq!(y.row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn single_affine_layer() {
        let s = spec(&[2, 1]);
        let mut p = MlpParams::zeros(&s);
        p.layers[0].weights = Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap();
        p.layers[0].bias = vec![0.25];
        let x = Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let (y, trace) = mlp_forward(&s, &p, &x).unwrap();
        assert_eq!(y.get(0, 0), 2.0 - 3.0 + 0.25);

        let g = Matrix::from_rows(&[vec![0.5]]).unwrap();
        let (pg, ig) = mlp_backward(&s, &p, &trace, &g).unwrap();
        assert_eq!(pg.layers[0].weights.row(0), &[0.5, 1.5]);
        assert_eq!(pg.layers[0].bias, vec![0.5]);
        assert_eq!(ig.row(0), &[1.0, -0.5]);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let s = spec(&[2, 1]);
        let p = MlpParams::zeros(&s);
        assert!(matches!(
            mlp_forward(&s, &p, &Matrix::zeros(1, 3)),
            Err(Error::Dimension(_))
        ));
        let bad = Matrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(mlp_forward(&s, &p, &bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let s = spec(&[3, 5, 2]);
        let p = init_params(&s, 3, 1.0).unwrap();
        let x = Matrix::filled(4, 3, 0.3);
        let (_, trace) = mlp_forward(&s, &p, &x).unwrap();
        let (pg, ig) = mlp_backward(&s, &p, &trace, &Matrix::zeros(4, 2)).unwrap();
        assert_eq!(pg.sum_sq(), 0.0);
        assert_eq!(ig.sum_sq(), 0.0);
    }

    #[test]
    fn eval_matches_forward() {
        let s = MlpSpec::new(vec![3, 6, 4, 1], Activation::Sigmoid, OutputActivation::Sigmoid).unwrap();
        let p = init_params(&s, 5, 1.5).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, -0.4, 2.0], vec![1.0, 1.0, -1.0]]).unwrap();
        assert_eq!(mlp_eval(&s, &p, &x).unwrap(), mlp_forward(&s, &p, &x).unwrap().0);
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let s = spec(&[2, 3, 1]);
        let p = init_params(&s, 1, 1.0).unwrap();
        let (_, trace) = mlp_forward(&s, &p, &Matrix::zeros(2, 2)).unwrap();
        let other = spec(&[2, 4, 1]);
        let q = init_params(&other, 1, 1.0).unwrap();
        assert!(mlp_backward(&other, &q, &trace, &Matrix::zeros(2, 1)).is_err());
        assert!(mlp_backward(&s, &p, &trace, &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let s = spec(&[3, 4, 2]);
        let p = init_params(&s, 9, 1.0).unwrap();
        let q = MlpParams::from_flat(&s, &p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.param_count(), s.param_count());
    }
}
