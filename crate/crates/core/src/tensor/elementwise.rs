//! Elementwise arithmetic, activations, and reductions.

use crate::error::{Error, Result};

use super::{grad_slot, Scalar, Tape, TensorId};

/// Supported activation kinds for [`Tape::activation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    SoftmaxLastAxis,
}

impl<T: Scalar> Tape<T> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let requires = self.any_requires_grad(&[a, b]);
        let backward = requires.then(|| {
            Box::new(move |nodes: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                for id in [a, b] {
                    if nodes[id.0].requires_grad {
                        let slot = grad_slot(grads, id, g.len());
                        for (s, &gi) in slot.iter_mut().zip(g) {
                            *s += gi;
                        }
                    }
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, shape, requires, backward))
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s shape; `y` is
    /// broadcast over the leading axes.
    pub fn add_broadcast(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != ys[..] {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                lhs: xs,
                rhs: ys,
            });
        }
        let inner: usize = ys.iter().product();
        let yd = self.data(y);
        let data: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + yd[i % inner])
            .collect();
        let requires = self.any_requires_grad(&[x, y]);
        let backward = requires.then(|| {
            Box::new(move |nodes: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                if nodes[x.0].requires_grad {
                    let slot = grad_slot(grads, x, g.len());
                    for (s, &gi) in slot.iter_mut().zip(g) {
                        *s += gi;
                    }
                }
                if nodes[y.0].requires_grad {
                    let slot = grad_slot(grads, y, inner);
                    for (i, &gi) in g.iter().enumerate() {
                        slot[i % inner] += gi;
                    }
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, xs, requires, backward))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let requires = self.any_requires_grad(&[a, b]);
        let backward = requires.then(|| {
            Box::new(move |nodes: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                if nodes[a.0].requires_grad {
                    let bd = &nodes[b.0].data;
                    let slot = grad_slot(grads, a, g.len());
                    for i in 0..g.len() {
                        slot[i] += g[i] * bd[i];
                    }
                }
                if nodes[b.0].requires_grad {
                    let ad = &nodes[a.0].data;
                    let slot = grad_slot(grads, b, g.len());
                    for i in 0..g.len() {
                        slot[i] += g[i] * ad[i];
                    }
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, shape, requires, backward))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: TensorId, c: T) -> TensorId {
        let data: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires_grad(x);
        let backward = requires.then(|| {
            Box::new(move |_: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let slot = grad_slot(grads, x, g.len());
                for i in 0..g.len() {
                    slot[i] += g[i] * c;
                }
            }) as super::BackwardFn<T>
        });
        self.push(data, shape, requires, backward)
    }

    /// Apply an activation function. Relu/gelu/tanh are elementwise; softmax
    /// normalizes over the last axis.
    pub fn activation(&mut self, x: TensorId, kind: Activation) -> TensorId {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Gelu => self.gelu(x),
            Activation::Tanh => self.tanh(x),
            Activation::SoftmaxLastAxis => self.softmax_last_axis(x),
        }
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires_grad(x);
        let backward = requires.then(|| {
            Box::new(move |nodes: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let xd = &nodes[x.0].data;
                let slot = grad_slot(grads, x, g.len());
                for i in 0..g.len() {
                    if xd[i] > T::zero() {
                        slot[i] += g[i];
                    }
                }
            }) as super::BackwardFn<T>
        });
        self.push(data, shape, requires, backward)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let data: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| {
                let u = c * (v + a * v * v * v);
                half * v * (T::one() + u.tanh())
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires_grad(x);
        let backward = requires.then(|| {
            Box::new(move |nodes: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let xd = &nodes[x.0].data;
                let slot = grad_slot(grads, x, g.len());
                let three = T::from_f64(3.0);
                for i in 0..g.len() {
                    let v = xd[i];
                    let u = c * (v + a * v * v * v);
                    let t = u.tanh();
                    let du = c * (T::one() + three * a * v * v);
                    let d = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                    slot[i] += g[i] * d;
                }
            }) as super::BackwardFn<T>
        });
        self.push(data, shape, requires, backward)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data: Vec<T> = self.data(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires_grad(x);
        let backward = requires.then(|| {
            let out = data.clone();
            Box::new(move |_: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let slot = grad_slot(grads, x, g.len());
                for i in 0..g.len() {
                    slot[i] += g[i] * (T::one() - out[i] * out[i]);
                }
            }) as super::BackwardFn<T>
        });
        self.push(data, shape, requires, backward)
    }

    /// Softmax over the last axis; output slices are strictly positive and
    /// sum to one. Numerically stabilized by max subtraction.
    pub fn softmax_last_axis(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("softmax needs at least one axis");
        let mut data = vec![T::zero(); self.data(x).len()];
        for (row_out, row_in) in data.chunks_mut(n).zip(self.data(x).chunks(n)) {
            let m = row_in.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let requires = self.requires_grad(x);
        let backward = requires.then(|| {
            let probs = data.clone();
            Box::new(move |_: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let slot = grad_slot(grads, x, g.len());
                for r in 0..g.len() / n {
                    let p = &probs[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut dot = T::zero();
                    for i in 0..n {
                        dot += gr[i] * p[i];
                    }
                    for i in 0..n {
                        slot[r * n + i] += p[i] * (gr[i] - dot);
                    }
                }
            }) as super::BackwardFn<T>
        });
        self.push(data, shape, requires, backward)
    }

    /// Sum every element into a scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut sum = T::zero();
        for &v in self.data(x) {
            sum += v;
        }
        let len = self.data(x).len();
        let requires = self.requires_grad(x);
        let backward = requires.then(|| {
            Box::new(move |_: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let slot = grad_slot(grads, x, len);
                for s in slot.iter_mut() {
                    *s += g[0];
                }
            }) as super::BackwardFn<T>
        });
        self.push(vec![sum], vec![1], requires, backward)
    }

    /// Mean along one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "mean_axis",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let inv = T::one() / T::from_f64(n as f64);
        let xd = self.data(x);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += xd[base + i];
                }
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let requires = self.requires_grad(x);
        let backward = requires.then(|| {
            Box::new(move |nodes: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let len = nodes[x.0].data.len();
                let slot = grad_slot(grads, x, len);
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for i in 0..inner {
                            slot[base + i] += g[o * inner + i] * inv;
                        }
                    }
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, out_shape, requires, backward))
    }
}
