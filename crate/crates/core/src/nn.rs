//! Trainable layers, the feature generator, the neural classifier and Adam.
//!
//! Parameters live outside the autodiff graph. Each forward pass binds them as
//! leaves of a fresh [`Graph`]; after `backward` the bound handles are used to
//! pull gradients back into the owning [`Param`]s.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// A trainable matrix with its accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub requires_grad: bool,
    /// Set once a backward pass has deposited a gradient since the last reset.
    pub has_grad: bool,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param {
            value,
            grad,
            requires_grad: true,
            has_grad: false,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Var {
        g.leaf(self.value.clone(), self.requires_grad)
    }

    /// Adds the gradient accumulated at `var` (if any) into this parameter.
    pub fn absorb(&mut self, g: &Graph, var: Var) {
        if !self.requires_grad {
            return;
        }
        if let Some(grad) = g.grad(var) {
            self.grad.add_assign(grad);
            self.has_grad = true;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
        self.has_grad = false;
    }
}

pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Param>) {
    params.into_iter().for_each(Param::zero_grad);
}

/// Sets `requires_grad` to `!frozen` on every parameter.
pub fn freeze<'a>(params: impl IntoIterator<Item = &'a mut Param>, frozen: bool) {
    params
        .into_iter()
        .for_each(|p| p.requires_grad = !frozen);
}

/// Anything that owns trainable parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grads(&mut self) {
        zero_grads(self.params_mut());
    }

    fn freeze(&mut self, frozen: bool) {
        freeze(self.params_mut(), frozen);
    }
}

/// `y = x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    weight: Var,
    bias: Var,
}

impl Linear {
    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Matrix::from_fn(in_dim, out_dim, |_, _| rng.random_range(-limit..limit));
        Self::from_parts(weight, Matrix::zeros(1, out_dim))
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self::from_parts(Matrix::zeros(in_dim, out_dim), Matrix::zeros(1, out_dim))
    }

    pub fn from_parts(weight: Matrix, bias: Matrix) -> Self {
        Linear {
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundLinear {
        BoundLinear {
            weight: self.weight.bind(g),
            bias: self.bias.bind(g),
        }
    }

    pub fn absorb(&mut self, g: &Graph, bound: &BoundLinear) {
        self.weight.absorb(g, bound.weight);
        self.bias.absorb(g, bound.bias);
    }
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xw = g.matmul(x, self.weight)?;
        g.add_row(xw, self.bias)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Layer sizes of the generator and neural classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub classes: usize,
}

impl Default for NetDims {
    fn default() -> Self {
        NetDims {
            input: 2048,
            hidden: 1024,
            embed: 512,
            classes: 31,
        }
    }
}

/// Two-layer feature generator: `z = W2 · dropout(relu(W1 · x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub layer1: Linear,
    pub layer2: Linear,
    pub dropout_retain: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGenerator {
    layer1: BoundLinear,
    layer2: BoundLinear,
    in_dim: usize,
    retain: f64,
}

impl Generator {
    pub fn new(dims: &NetDims, dropout_retain: f64, rng: &mut impl Rng) -> Self {
        Generator {
            layer1: Linear::new(dims.input, dims.hidden, rng),
            layer2: Linear::new(dims.hidden, dims.embed, rng),
            dropout_retain,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layer1.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.layer2.out_dim()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundGenerator {
        BoundGenerator {
            layer1: self.layer1.bind(g),
            layer2: self.layer2.bind(g),
            in_dim: self.in_dim(),
            retain: self.dropout_retain,
        }
    }

    pub fn absorb(&mut self, g: &Graph, bound: &BoundGenerator) {
        self.layer1.absorb(g, &bound.layer1);
        self.layer2.absorb(g, &bound.layer2);
    }

    /// Evaluation-mode embedding of a feature matrix, without gradients.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let z = bound.forward(&mut g, xv, false, &mut NoRng)?;
        Ok(g.value(z).clone())
    }

    fn bind_frozen(&self, g: &mut Graph) -> BoundGenerator {
        let c = |g: &mut Graph, l: &Linear| BoundLinear {
            weight: g.constant(l.weight.value.clone()),
            bias: g.constant(l.bias.value.clone()),
        };
        BoundGenerator {
            layer1: c(g, &self.layer1),
            layer2: c(g, &self.layer2),
            in_dim: self.in_dim(),
            retain: self.dropout_retain,
        }
    }
}

impl BoundGenerator {
    /// Inverted dropout is applied to the hidden layer only when `training`.
    pub fn forward(&self, g: &mut Graph, x: Var, training: bool, rng: &mut impl Rng) -> Result<Var> {
        let (rows, cols) = g.shape(x);
        if cols != self.in_dim {
            return Err(Error::Dimension {
                op: "generator_forward",
                left: (rows, cols),
                right: (self.in_dim, 0),
            });
        }
        let h = self.layer1.forward(g, x)?;
        let mut h = g.relu(h);
        if training && self.retain < 1.0 {
            let shape = g.shape(h);
            let keep = self.retain;
            let mask = Matrix::from_fn(shape.0, shape.1, |_, _| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let mask = g.constant(mask);
            h = g.mul(h, mask)?;
        }
        self.layer2.forward(g, h)
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.layer1.params();
        p.extend(self.layer2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.layer1.params_mut();
        p.extend(self.layer2.params_mut());
        p
    }
}

/// Two-layer MLP classifier over embeddings, producing row probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralClassifier {
    pub layer1: Linear,
    pub layer2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundClassifier {
    layer1: BoundLinear,
    layer2: BoundLinear,
    in_dim: usize,
}

impl NeuralClassifier {
    pub fn new(dims: &NetDims, rng: &mut impl Rng) -> Self {
        NeuralClassifier {
            layer1: Linear::new(dims.embed, dims.embed, rng),
            layer2: Linear::new(dims.embed, dims.classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.layer2.out_dim()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundClassifier {
        BoundClassifier {
            layer1: self.layer1.bind(g),
            layer2: self.layer2.bind(g),
            in_dim: self.layer1.in_dim(),
        }
    }

    pub fn absorb(&mut self, g: &Graph, bound: &BoundClassifier) {
        self.layer1.absorb(g, &bound.layer1);
        self.layer2.absorb(g, &bound.layer2);
    }

    /// Probabilities for a batch of embeddings, without gradients.
    pub fn predict(&self, z: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let bound = BoundClassifier {
            layer1: BoundLinear {
                weight: g.constant(self.layer1.weight.value.clone()),
                bias: g.constant(self.layer1.bias.value.clone()),
            },
            layer2: BoundLinear {
                weight: g.constant(self.layer2.weight.value.clone()),
                bias: g.constant(self.layer2.bias.value.clone()),
            },
            in_dim: self.layer1.in_dim(),
        };
        let zv = g.constant(z.clone());
        let p = bound.forward(&mut g, zv)?;
        Ok(g.value(p).clone())
    }
}

impl BoundClassifier {
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let (rows, cols) = g.shape(z);
        if cols != self.in_dim {
            return Err(Error::Dimension {
                op: "classifier_forward",
                left: (rows, cols),
                right: (self.in_dim, 0),
            });
        }
        let h = self.layer1.forward(g, z)?;
        let h = g.relu(h);
        let logits = self.layer2.forward(g, h)?;
        Ok(g.row_softmax(logits))
    }
}

impl Module for NeuralClassifier {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.layer1.params();
        p.extend(self.layer2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.layer1.params_mut();
        p.extend(self.layer2.params_mut());
        p
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to every parameter that requires a gradient.
    ///
    /// Frozen parameters are skipped. The parameter list must be passed in the
    /// same order on every call, since moments are matched by position.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if self.first.is_empty() {
            for p in params.iter() {
                let (r, c) = p.value.shape();
                self.first.push(Matrix::zeros(r, c));
                self.second.push(Matrix::zeros(r, c));
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (k, p) in params.iter().enumerate() {
            if p.requires_grad && !p.has_grad {
                return Err(Error::Contract(format!(
                    "active parameter {k} has no gradient"
                )));
            }
            if p.value.shape() != self.first[k].shape() {
                return Err(Error::Contract(format!(
                    "parameter {k} changed shape since the optimizer was created"
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.requires_grad {
                continue;
            }
            let Param { value, grad, .. } = &mut **p;
            for (((w, &g), m), v) in value
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Stand-in RNG for code paths that never draw (evaluation mode).
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation mode draws no random numbers")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation mode draws no random numbers")
    }

    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("evaluation mode draws no random numbers")
    }
}
