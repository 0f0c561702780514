//! Small neural-network building blocks: layers, seeded initializers and
//! the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform sample in `[lo, hi)` drawn in f64 and narrowed to `A`.
pub fn uniform<A: Scalar>(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> A {
    A::from_f64_(rng.gen_range(lo..hi))
}

/// Tensor with entries uniform in `[-scale, scale)`.
pub fn uniform_tensor<A: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<A> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| uniform(rng, -scale, scale)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Fan-in scaled uniform init, `scale = sqrt(1 / fan_in)`.
pub fn fan_in_tensor<A: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<A> {
    uniform_tensor(rng, shape, (1.0 / fan_in as f64).sqrt())
}

/// Standard normal via Box-Muller, so only `gen_range` is relied upon.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Random matrix with orthonormal rows (`rows <= cols`), scaled by `gain`.
pub fn orthogonal_tensor<A: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    gain: f64,
) -> Tensor<A> {
    assert!(rows <= cols);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| normal(rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for x in &mut v {
            *x /= norm;
        }
        basis.push(v);
    }
    let data = basis
        .into_iter()
        .flatten()
        .map(|x| A::from_f64_(x * gain))
        .collect();
    Tensor::new(vec![rows, cols], data)
}

/// Fully-connected layer, weight `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<A: Scalar> {
    pub weight: Tensor<A>,
    pub bias: Tensor<A>,
}

impl<A: Scalar> Linear<A> {
    pub fn seeded(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: fan_in_tensor(rng, &[out_dim, in_dim], in_dim),
            bias: fan_in_tensor(rng, &[out_dim], in_dim),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<A>) -> BoundLinear<'t, A> {
        BoundLinear {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

pub struct BoundLinear<'t, A: Scalar> {
    pub weight: Var<'t, A>,
    pub bias: Var<'t, A>,
}

impl<'t, A: Scalar> BoundLinear<'t, A> {
    pub fn forward(&self, x: Var<'t, A>) -> Var<'t, A> {
        self.weight.matvec(x).add(self.bias)
    }
}

/// Convolution layer, weight `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<A: Scalar> {
    pub weight: Tensor<A>,
    pub bias: Tensor<A>,
    pub stride: usize,
    pub pad: usize,
}

impl<A: Scalar> Conv2d<A> {
    pub fn seeded(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        Self {
            weight: fan_in_tensor(rng, &[out_ch, in_ch, k, k], fan_in),
            bias: fan_in_tensor(rng, &[out_ch], fan_in),
            stride,
            pad,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<A>) -> BoundConv2d<'t, A> {
        BoundConv2d {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

pub struct BoundConv2d<'t, A: Scalar> {
    pub weight: Var<'t, A>,
    pub bias: Var<'t, A>,
    stride: usize,
    pad: usize,
}

impl<'t, A: Scalar> BoundConv2d<'t, A> {
    pub fn forward(&self, x: Var<'t, A>) -> Var<'t, A> {
        x.conv2d(self.weight, self.bias, self.stride, self.pad)
    }
}

/// Adam optimizer over a flat list of parameter tensors.
pub struct Adam<A: Scalar> {
    pub lr: A,
    beta1: A,
    beta2: A,
    eps: A,
    step_count: u64,
    m: Vec<Tensor<A>>,
    v: Vec<Tensor<A>>,
}

impl<A: Scalar> Adam<A> {
    pub fn new(lr: A) -> Self {
        Self {
            lr,
            beta1: A::from_f64_(0.9),
            beta2: A::from_f64_(0.999),
            eps: A::from_f64_(1e-8),
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<A>], grads: &[Tensor<A>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = A::one() - self.beta1.powi(t);
        let bc2 = A::one() - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            for i in 0..g.len() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (A::one() - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (A::one() - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p.data_mut()[i] = p.data()[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
