//! Batch and layer normalization.

use crate::error::{Error, Result};

use super::{grad_slot, Scalar, Tape, TensorId};

/// Running statistics for batch normalization, stored outside the tape as
/// model buffers.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> Tape<T> {
    /// Batch normalization over `[B, C, ...]`: per-channel statistics over the
    /// batch and spatial axes. Train mode normalizes with batch statistics and
    /// updates `stats` in place with momentum; eval mode normalizes with the
    /// running statistics and leaves them untouched.
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut BnStats<T>,
        train: bool,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::invalid(
                "batchnorm",
                format!("expected at least [B, C], got {:?}", xs),
            ));
        }
        let (b_n, c_n) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c_n] || self.shape(beta) != [c_n] || stats.mean.len() != c_n {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                lhs: xs,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let n = b_n * spatial;
        let eps = T::from_f64(BN_EPS);
        let inv_n = T::one() / T::from_f64(n as f64);

        let (mean, var) = if train {
            let xd = self.data(x);
            let mut mean = vec![T::zero(); c_n];
            let mut var = vec![T::zero(); c_n];
            for b in 0..b_n {
                for c in 0..c_n {
                    let base = (b * c_n + c) * spatial;
                    let mut acc = T::zero();
                    for &v in &xd[base..base + spatial] {
                        acc += v;
                    }
                    mean[c] += acc;
                }
            }
            for m in mean.iter_mut() {
                *m *= inv_n;
            }
            for b in 0..b_n {
                for c in 0..c_n {
                    let base = (b * c_n + c) * spatial;
                    let m = mean[c];
                    let mut acc = T::zero();
                    for &v in &xd[base..base + spatial] {
                        let d = v - m;
                        acc += d * d;
                    }
                    var[c] += acc;
                }
            }
            for v in var.iter_mut() {
                *v *= inv_n;
            }
            // Running stats use the unbiased variance, as is conventional.
            let momentum = T::from_f64(BN_MOMENTUM);
            let keep = T::one() - momentum;
            let unbias = if n > 1 {
                T::from_f64(n as f64 / (n as f64 - 1.0))
            } else {
                T::one()
            };
            for c in 0..c_n {
                stats.mean[c] = keep * stats.mean[c] + momentum * mean[c];
                stats.var[c] = keep * stats.var[c] + momentum * var[c] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };

        let mut data = vec![T::zero(); self.data(x).len()];
        {
            let xd = self.data(x);
            let gd = self.data(gamma);
            let bd = self.data(beta);
            for b in 0..b_n {
                for c in 0..c_n {
                    let base = (b * c_n + c) * spatial;
                    let m = mean[c];
                    let inv_std = T::one() / (var[c] + eps).sqrt();
                    let (g, be) = (gd[c], bd[c]);
                    for i in 0..spatial {
                        data[base + i] = (xd[base + i] - m) * inv_std * g + be;
                    }
                }
            }
        }

        let requires = self.any_requires_grad(&[x, gamma, beta]);
        let backward = requires.then(|| {
            let mean = mean.clone();
            let var = var.clone();
            Box::new(move |nodes: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let xd = &nodes[x.0].data;
                let gd = &nodes[gamma.0].data;
                // Per-channel reductions shared by all three gradients.
                let mut sum_g = vec![T::zero(); c_n];
                let mut sum_gxh = vec![T::zero(); c_n];
                for b in 0..b_n {
                    for c in 0..c_n {
                        let base = (b * c_n + c) * spatial;
                        let m = mean[c];
                        let inv_std = T::one() / (var[c] + eps).sqrt();
                        for i in 0..spatial {
                            let xh = (xd[base + i] - m) * inv_std;
                            sum_g[c] += g[base + i];
                            sum_gxh[c] += g[base + i] * xh;
                        }
                    }
                }
                if nodes[gamma.0].requires_grad {
                    let slot = grad_slot(grads, gamma, c_n);
                    for c in 0..c_n {
                        slot[c] += sum_gxh[c];
                    }
                }
                if nodes[beta.0].requires_grad {
                    let slot = grad_slot(grads, beta, c_n);
                    for c in 0..c_n {
                        slot[c] += sum_g[c];
                    }
                }
                if nodes[x.0].requires_grad {
                    let slot = grad_slot(grads, x, xd.len());
                    for b in 0..b_n {
                        for c in 0..c_n {
                            let base = (b * c_n + c) * spatial;
                            let m = mean[c];
                            let inv_std = T::one() / (var[c] + eps).sqrt();
                            let ga = gd[c];
                            if train {
                                for i in 0..spatial {
                                    let xh = (xd[base + i] - m) * inv_std;
                                    let t = g[base + i]
                                        - sum_g[c] * inv_n
                                        - xh * sum_gxh[c] * inv_n;
                                    slot[base + i] += ga * inv_std * t;
                                }
                            } else {
                                for i in 0..spatial {
                                    slot[base + i] += ga * inv_std * g[base + i];
                                }
                            }
                        }
                    }
                }
            }) as super::BackwardFn<T>
        });
        let shape = xs;
        Ok(self.push(data, shape, requires, backward))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layernorm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::invalid("layernorm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: xs,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::from_f64(BN_EPS);
        let inv_d = T::one() / T::from_f64(d as f64);
        let rows = self.data(x).len() / d;
        let mut data = vec![T::zero(); rows * d];
        let mut means = vec![T::zero(); rows];
        let mut inv_stds = vec![T::zero(); rows];
        {
            let xd = self.data(x);
            let gd = self.data(gamma);
            let bd = self.data(beta);
            for r in 0..rows {
                let xr = &xd[r * d..(r + 1) * d];
                let mut m = T::zero();
                for &v in xr {
                    m += v;
                }
                m *= inv_d;
                let mut var = T::zero();
                for &v in xr {
                    let dv = v - m;
                    var += dv * dv;
                }
                var *= inv_d;
                let inv_std = T::one() / (var + eps).sqrt();
                means[r] = m;
                inv_stds[r] = inv_std;
                let or = &mut data[r * d..(r + 1) * d];
                for i in 0..d {
                    or[i] = (xr[i] - m) * inv_std * gd[i] + bd[i];
                }
            }
        }
        let requires = self.any_requires_grad(&[x, gamma, beta]);
        let backward = requires.then(|| {
            Box::new(move |nodes: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let xd = &nodes[x.0].data;
                let gd = &nodes[gamma.0].data;
                if nodes[gamma.0].requires_grad {
                    let slot = grad_slot(grads, gamma, d);
                    for r in 0..rows {
                        let m = means[r];
                        let is = inv_stds[r];
                        for i in 0..d {
                            slot[i] += g[r * d + i] * (xd[r * d + i] - m) * is;
                        }
                    }
                }
                if nodes[beta.0].requires_grad {
                    let slot = grad_slot(grads, beta, d);
                    for r in 0..rows {
                        for i in 0..d {
                            slot[i] += g[r * d + i];
                        }
                    }
                }
                if nodes[x.0].requires_grad {
                    let slot = grad_slot(grads, x, rows * d);
                    for r in 0..rows {
                        let m = means[r];
                        let is = inv_stds[r];
                        let mut sum_t = T::zero();
                        let mut sum_txh = T::zero();
                        for i in 0..d {
                            let t = g[r * d + i] * gd[i];
                            let xh = (xd[r * d + i] - m) * is;
                            sum_t += t;
                            sum_txh += t * xh;
                        }
                        for i in 0..d {
                            let t = g[r * d + i] * gd[i];
                            let xh = (xd[r * d + i] - m) * is;
                            slot[r * d + i] += is * (t - sum_t * inv_d - xh * sum_txh * inv_d);
                        }
                    }
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, xs, requires, backward))
    }
}
