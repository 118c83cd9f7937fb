//! Dense building blocks with explicit backward passes, a parameter visitor
//! used by the optimizer and the checkpoint writer, and an Adam optimizer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::real::Real;

/// Anything holding trainable tensors. Visiting order is fixed and defines
/// the flat layout used by optimizers and checkpoints.
pub trait Parameters<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real> Parameters<T> for Array2<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(prefix, self.as_slice().expect("standard layout"));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(prefix, self.as_slice_mut().expect("standard layout"));
    }
}

impl<T: Real> Parameters<T> for Array1<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(prefix, self.as_slice().expect("standard layout"));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(prefix, self.as_slice_mut().expect("standard layout"));
    }
}

pub fn param_count<T: Real>(p: &dyn Parameters<T>) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, s| n += s.len());
    n
}

pub fn flatten<T: Real>(p: &dyn Parameters<T>) -> Vec<T> {
    let mut out = Vec::new();
    p.visit("", &mut |_, s| out.extend_from_slice(s));
    out
}

/// Overwrites every tensor of `p` from a flat buffer in visiting order.
pub fn unflatten<T: Real>(p: &mut dyn Parameters<T>, flat: &[T]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, s| {
        s.copy_from_slice(&flat[offset..offset + s.len()]);
        offset += s.len();
    });
    assert_eq!(offset, flat.len(), "flat buffer length");
}

/// Copies values between two structurally identical parameter sets of
/// possibly different precision.
pub fn cast_into<T: Real, U: Real>(src: &dyn Parameters<T>, dst: &mut dyn Parameters<U>) {
    let flat: Vec<U> = flatten(src).into_iter().map(|x| U::lit(x.as_f64())).collect();
    unflatten(dst, &flat);
}

pub fn all_finite<T: Real>(p: &dyn Parameters<T>) -> bool {
    let mut ok = true;
    p.visit("", &mut |_, s| ok &= s.iter().all(|x| x.is_finite()));
    ok
}

/// Fully connected layer, `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Uniform init with variance `gain^2 / fan_in`, zero bias.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: uniform_matrix(fan_in, fan_out, gain, rng),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = Array2::from_shape_fn((x.nrows(), self.fan_out()), |(_, j)| self.bias[j]);
        general_mat_mul(T::one(), &x, &self.weight, T::one(), &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) {
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    /// Single-vector forward.
    pub fn forward_vec(&self, x: ArrayView1<T>) -> Array1<T> {
        x.dot(&self.weight) + &self.bias
    }
}

impl<T: Real> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.weight.visit(&join(prefix, "weight"), f);
        self.bias.visit(&join(prefix, "bias"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.weight.visit_mut(&join(prefix, "weight"), f);
        self.bias.visit_mut(&join(prefix, "bias"), f);
    }
}

pub fn uniform_matrix<T: Real, R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<T> {
    let bound = gain * (3.0 / rows.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || T::lit(rng.random_range(-bound..=bound)))
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn relu_inplace<T: Real>(x: &mut Array2<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// `dy` masked by the sign of the stored ReLU output.
pub fn relu_backward<T: Real>(out: &Array2<T>, dy: &mut Array2<T>) {
    Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
}

pub fn leaky_relu<T: Real>(x: &Array2<T>) -> Array2<T> {
    let slope = T::lit(LEAKY_SLOPE);
    x.mapv(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Real>(pre: &Array2<T>, dy: &mut Array2<T>) {
    let slope = T::lit(LEAKY_SLOPE);
    Zip::from(dy).and(pre).for_each(|d, &p| {
        if p <= T::zero() {
            *d *= slope;
        }
    });
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Adam with bias correction over a flat parameter layout.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place given a flat gradient in visiting order.
    pub fn step(&mut self, params: &mut dyn Parameters<T>, grad: &[T]) {
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        params.visit_mut("", &mut |_, s| {
            for (i, p) in s.iter_mut().enumerate() {
                let k = offset + i;
                let g = grad[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
            offset += s.len();
        });
    }

    /// Same update applied to a plain slice.
    pub fn step_slice(&mut self, params: &mut [T], grad: &[T]) {
        let mut arr = Array1::from_vec(params.to_vec());
        self.step(&mut arr, grad);
        params.copy_from_slice(arr.as_slice().unwrap());
    }
}
