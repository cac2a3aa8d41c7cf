//! Dense networks with hand-derived reverse-mode gradients, softmax
//! cross-entropy, Adam and a finite-difference checker.
//!
//! Every network is evaluated on a row-major batch so that the per-node and
//! per-edge networks of the GNN run as a handful of matrix products.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Activations retained by [`DenseNet::forward_batch`]: the batch input
/// followed by every layer's output.
#[derive(Debug, Clone)]
pub struct NetTrace {
    rows: usize,
    acts: Vec<Vec<f64>>,
}

impl NetTrace {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace holds the input")
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.acts.pop().expect("trace holds the input")
    }
}

/// `c = beta * c + a * b` for row-major operands given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserted extents bound every element touched by the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

impl Layer {
    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(rows * self.outputs);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias);
        }
        gemm(
            rows,
            self.inputs,
            self.outputs,
            x,
            (self.inputs, 1),
            &self.weight,
            (1, self.inputs),
            1.0,
            &mut y,
            self.outputs,
        );
        if self.activation == Activation::Relu {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        y
    }
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases, `hidden` activation on every layer
    /// except the last, which is linear.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "a network needs input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                Layer {
                    inputs: fan_in,
                    outputs: fan_out,
                    weight: (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect(),
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n { Activation::Identity } else { hidden },
                }
            })
            .collect();
        DenseNet { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network without layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Shape(format!("layer {i} tensors do not match {}x{}", l.outputs, l.inputs)));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs, previous layer gives {}",
                    l.inputs,
                    layers[i - 1].outputs
                )));
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weight: vec![0.0; l.weight.len()],
                bias: vec![0.0; l.bias.len()],
                ..*l
            })
            .collect();
        DenseNet { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weight and bias tensors, layer by layer.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x, 1)?.into_output())
    }

    /// Runs `rows` inputs at once; `x` is row-major `rows x input_width`.
    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Result<NetTrace> {
        if x.len() != rows * self.input_width() {
            return Err(Error::Shape(format!(
                "input of length {} for {rows} rows of width {}",
                x.len(),
                self.input_width()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let y = layer.forward(acts.last().expect("input"), rows);
            acts.push(y);
        }
        Ok(NetTrace { rows, acts })
    }

    /// Propagates `d_out` back through a traced batch, accumulating parameter
    /// gradients into `grads`. Returns the input gradient when `want_input`
    /// is set and an empty vector otherwise.
    pub fn backward(&self, trace: &NetTrace, d_out: &[f64], grads: &mut DenseNet, want_input: bool) -> Result<Vec<f64>> {
        let rows = trace.rows;
        if trace.acts.len() != self.layers.len() + 1 || d_out.len() != rows * self.output_width() {
            return Err(Error::Shape("trace or upstream gradient does not match the network".into()));
        }
        if grads.widths() != self.widths() {
            return Err(Error::Shape("gradient accumulator has different widths".into()));
        }
        let mut delta = d_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace.acts[i + 1];
            let input = &trace.acts[i];
            if layer.activation == Activation::Relu {
                for (d, &y) in delta.iter_mut().zip(out) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let g = &mut grads.layers[i];
            gemm(
                layer.outputs,
                rows,
                layer.inputs,
                &delta,
                (1, layer.outputs),
                input,
                (layer.inputs, 1),
                1.0,
                &mut g.weight,
                layer.inputs,
            );
            for row in delta.chunks_exact(layer.outputs.max(1)).take(rows) {
                for (b, d) in g.bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            if i == 0 && !want_input {
                return Ok(Vec::new());
            }
            let mut d_in = vec![0.0; rows * layer.inputs];
            gemm(
                rows,
                layer.outputs,
                layer.inputs,
                &delta,
                (layer.outputs, 1),
                &layer.weight,
                (layer.inputs, 1),
                0.0,
                &mut d_in,
                layer.inputs,
            );
            delta = d_in;
        }
        Ok(delta)
    }

    /// Adds `other` into `self` tensor by tensor.
    pub fn accumulate(&mut self, other: &DenseNet) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Cross-entropy of `softmax(logits)` against `target` and its gradient with
/// respect to the logits.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target class {target} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let loss = log_sum - (logits[target] - max);
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = usize>, config: AdamConfig) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { config, m, v, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. A non-finite gradient aborts the step
    /// before any parameter changes.
    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[&Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} parameter / {} gradient tensors for {} moment tensors",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!("tensor {i} length mismatch")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient tensor {i}")));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that two vanishing
/// gradients compare equal.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn check_gradient<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64, floor: f64) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: x.len(),
    };
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric, floor);
        if err > worst.max_rel_error {
            worst.max_rel_error = err;
            worst.worst_index = i;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(n: usize, activation: Activation) -> Layer {
        let mut weight = vec![0.0; n * n];
        for i in 0..n {
            weight[i * n + i] = 1.0;
        }
        Layer { inputs: n, outputs: n, weight, bias: vec![0.0; n], activation }
    }

    #[test]
    fn identity_and_relu_layers() {
        let id = DenseNet::from_layers(vec![identity_layer(3, Activation::Identity)]).unwrap();
        assert_eq!(id.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
        let relu = DenseNet::from_layers(vec![identity_layer(2, Activation::Relu)]).unwrap();
        assert_eq!(relu.forward(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DenseNet::new(&[2, 3, 1], Activation::Relu, &mut rng);
        assert_eq!(net.forward(&[0.3, -0.7]).unwrap().len(), 1);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
        assert_eq!(net.layers()[1].activation, Activation::Identity);
    }

    #[test]
    fn square_head_derivative() {
        let net = DenseNet::from_layers(vec![identity_layer(1, Activation::Identity)]).unwrap();
        let trace = net.forward_batch(&[3.0], 1).unwrap();
        let y = trace.output()[0];
        let mut grads = net.zeros_like();
        let dx = net.backward(&trace, &[2.0 * y], &mut grads, true).unwrap();
        assert_eq!(dx, vec![6.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::new(&[3, 4, 2], Activation::Relu, &mut rng);
        let trace = net.forward_batch(&[0.1, 0.2, 0.3, -1.0, 0.5, 2.0], 2).unwrap();
        let mut grads = net.zeros_like();
        net.backward(&trace, &[0.0; 4], &mut grads, false).unwrap();
        assert!(grads.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    fn flatten(net: &DenseNet) -> Vec<f64> {
        net.tensors().into_iter().flatten().copied().collect()
    }

    fn unflatten(net: &mut DenseNet, flat: &[f64]) {
        let mut k = 0;
        for t in net.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[k..k + n]);
            k += n;
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = DenseNet::new(&[4, 6, 5, 3], Activation::Relu, &mut rng);
            let rows = 5;
            let x: Vec<f64> = (0..rows * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..3)).collect();
            let loss_of = |net: &DenseNet| -> f64 {
                let out = net.forward_batch(&x, rows).unwrap().into_output();
                out.chunks(3).zip(&targets).map(|(z, &t)| softmax_xent(z, t).unwrap().0).sum()
            };
            let trace = net.forward_batch(&x, rows).unwrap();
            let mut d_out = Vec::new();
            for (z, &t) in trace.output().chunks(3).zip(&targets) {
                d_out.extend(softmax_xent(z, t).unwrap().1);
            }
            let mut grads = net.zeros_like();
            net.backward(&trace, &d_out, &mut grads, false).unwrap();
            let analytic = flatten(&grads);
            let mut probe = net.clone();
            let report = check_gradient(
                |p| {
                    unflatten(&mut probe, p);
                    loss_of(&probe)
                },
                &flatten(&net),
                &analytic,
                1e-5,
                1e-6,
            );
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = DenseNet::new(&[3, 7, 2], Activation::Relu, &mut rng);
        let x = [0.4, -0.3, 0.9];
        let trace = net.forward_batch(&x, 1).unwrap();
        let mut grads = net.zeros_like();
        let dx = net.backward(&trace, &[1.0, -2.0], &mut grads, true).unwrap();
        let report = check_gradient(
            |p| {
                let y = net.forward(p).unwrap();
                y[0] - 2.0 * y[1]
            },
            &x,
            &dx,
            1e-5,
            1e-6,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn softmax_xent_examples() {
        let (loss, grad) = softmax_xent(&[0.0, 0.0], 0).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[0], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[1], 0.5, epsilon = 1e-15);
        let (loss, grad) = softmax_xent(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss < 1e-300 + 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
        assert!(softmax_xent(&[0.0, 1.0], 2).is_err());
        let (_, grad) = softmax_xent(&[0.3, -2.0, 5.0, 1.0], 2).unwrap();
        assert!(grad.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = vec![1.0, -2.0];
        let g = vec![0.3, 7.0];
        let mut adam = AdamState::new([2], AdamConfig::default());
        adam.step(&mut [&mut w], &[&g]).unwrap();
        assert_abs_diff_eq!(w[0], 1.0 - 1e-3, epsilon = 1e-9);
        assert_abs_diff_eq!(w[1], -2.0 - 1e-3, epsilon = 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut w = vec![0.5, 0.25];
        let g = vec![0.0, 0.0];
        let mut adam = AdamState::new([2], AdamConfig::default());
        for _ in 0..50 {
            adam.step(&mut [&mut w], &[&g]).unwrap();
        }
        assert_eq!(w, vec![0.5, 0.25]);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut w = vec![0.0];
        let mut adam = AdamState::new([1], AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..200 {
            let g = vec![2.0 * (w[0] - 5.0)];
            adam.step(&mut [&mut w], &[&g]).unwrap();
        }
        assert!((w[0] - 5.0).abs() < 0.1, "w = {}", w[0]);
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut w = vec![1.0];
        let mut adam = AdamState::new([1], AdamConfig::default());
        let err = adam.step(&mut [&mut w], &[&vec![f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(w, vec![1.0]);
        assert_eq!(adam.steps(), 0);
    }
}
