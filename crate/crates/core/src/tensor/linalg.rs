//! Affine maps, batched matrix products, and shape plumbing.

use crate::error::{Error, Result};

use super::{grad_slot, Scalar, Tape, TensorId};

impl<T: Scalar> Tape<T> {
    /// Affine map along the last axis: `out[..., o] = bias[o] + sum_i x[..., i] * w[o, i]`.
    pub fn linear(
        &mut self,
        x: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [out_f] {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![out_f],
                });
            }
        }
        let rows = self.data(x).len() / in_f;
        let mut data = vec![T::zero(); rows * out_f];
        {
            let xd = self.data(x);
            let wd = self.data(weight);
            for r in 0..rows {
                let xr = &xd[r * in_f..(r + 1) * in_f];
                let or = &mut data[r * out_f..(r + 1) * out_f];
                for (o, out) in or.iter_mut().enumerate() {
                    let wr = &wd[o * in_f..(o + 1) * in_f];
                    let mut acc = T::zero();
                    for i in 0..in_f {
                        acc += xr[i] * wr[i];
                    }
                    *out = acc;
                }
            }
            if let Some(b) = bias {
                let bd = self.data(b);
                for r in 0..rows {
                    for o in 0..out_f {
                        data[r * out_f + o] += bd[o];
                    }
                }
            }
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = out_f;
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let requires = self.any_requires_grad(&parents);
        let backward = requires.then(|| {
            Box::new(move |nodes: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                if nodes[x.0].requires_grad {
                    let wd = &nodes[weight.0].data;
                    let slot = grad_slot(grads, x, rows * in_f);
                    for r in 0..rows {
                        let gr = &g[r * out_f..(r + 1) * out_f];
                        let xr = &mut slot[r * in_f..(r + 1) * in_f];
                        for o in 0..out_f {
                            let wr = &wd[o * in_f..(o + 1) * in_f];
                            let go = gr[o];
                            for i in 0..in_f {
                                xr[i] += go * wr[i];
                            }
                        }
                    }
                }
                if nodes[weight.0].requires_grad {
                    let xd = &nodes[x.0].data;
                    let slot = grad_slot(grads, weight, out_f * in_f);
                    for r in 0..rows {
                        let gr = &g[r * out_f..(r + 1) * out_f];
                        let xr = &xd[r * in_f..(r + 1) * in_f];
                        for o in 0..out_f {
                            let go = gr[o];
                            let wr = &mut slot[o * in_f..(o + 1) * in_f];
                            for i in 0..in_f {
                                wr[i] += go * xr[i];
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    if nodes[b.0].requires_grad {
                        let slot = grad_slot(grads, b, out_f);
                        for r in 0..rows {
                            for o in 0..out_f {
                                slot[o] += g[r * out_f + o];
                            }
                        }
                    }
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, out_shape, requires, backward))
    }

    /// Batched matrix product: `a` is `[..., M, K]`, `b` is `[..., K, N]` with
    /// identical leading axes; the result is `[..., M, N]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let ok = ash.len() >= 2
            && ash.len() == bsh.len()
            && ash[..ash.len() - 2] == bsh[..bsh.len() - 2]
            && ash[ash.len() - 1] == bsh[bsh.len() - 2];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = bsh[bsh.len() - 1];
        let batches: usize = ash[..ash.len() - 2].iter().product();
        let mut data = vec![T::zero(); batches * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for g in 0..batches {
                let ab = &ad[g * m * k..(g + 1) * m * k];
                let bb = &bd[g * k * n..(g + 1) * k * n];
                let ob = &mut data[g * m * n..(g + 1) * m * n];
                for mi in 0..m {
                    for ki in 0..k {
                        let av = ab[mi * k + ki];
                        let br = &bb[ki * n..(ki + 1) * n];
                        let or = &mut ob[mi * n..(mi + 1) * n];
                        for ni in 0..n {
                            or[ni] += av * br[ni];
                        }
                    }
                }
            }
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let requires = self.any_requires_grad(&[a, b]);
        let backward = requires.then(|| {
            Box::new(move |nodes: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                if nodes[a.0].requires_grad {
                    let bd = &nodes[b.0].data;
                    let slot = grad_slot(grads, a, batches * m * k);
                    for gi in 0..batches {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bd[gi * k * n..(gi + 1) * k * n];
                        let ab = &mut slot[gi * m * k..(gi + 1) * m * k];
                        for mi in 0..m {
                            for ki in 0..k {
                                let mut acc = T::zero();
                                let gr = &gb[mi * n..(mi + 1) * n];
                                let br = &bb[ki * n..(ki + 1) * n];
                                for ni in 0..n {
                                    acc += gr[ni] * br[ni];
                                }
                                ab[mi * k + ki] += acc;
                            }
                        }
                    }
                }
                if nodes[b.0].requires_grad {
                    let ad = &nodes[a.0].data;
                    let slot = grad_slot(grads, b, batches * k * n);
                    for gi in 0..batches {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &ad[gi * m * k..(gi + 1) * m * k];
                        let bb = &mut slot[gi * k * n..(gi + 1) * k * n];
                        for mi in 0..m {
                            let gr = &gb[mi * n..(mi + 1) * n];
                            for ki in 0..k {
                                let av = ab[mi * k + ki];
                                let br = &mut bb[ki * n..(ki + 1) * n];
                                for ni in 0..n {
                                    br[ni] += av * gr[ni];
                                }
                            }
                        }
                    }
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, out_shape, requires, backward))
    }

    /// Reorder axes. `perm` must be a permutation of `0..rank`.
    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let rank = xs.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{:?} is not a permutation of 0..{}", perm, rank),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let in_strides = row_major_strides(&xs);
        // stride in the input for each output axis
        let map_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let numel = self.data(x).len();
        let mut data = vec![T::zero(); numel];
        {
            let xd = self.data(x);
            let mut idx = vec![0usize; rank];
            for slot in data.iter_mut() {
                let mut src = 0;
                for d in 0..rank {
                    src += idx[d] * map_strides[d];
                }
                *slot = xd[src];
                increment(&mut idx, &out_shape);
            }
        }
        let requires = self.requires_grad(x);
        let out_shape_cl = out_shape.clone();
        let backward = requires.then(|| {
            Box::new(move |_: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let slot = grad_slot(grads, x, numel);
                let mut idx = vec![0usize; rank];
                for &gv in g.iter() {
                    let mut src = 0;
                    for d in 0..rank {
                        src += idx[d] * map_strides[d];
                    }
                    slot[src] += gv;
                    increment(&mut idx, &out_shape_cl);
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, out_shape, requires, backward))
    }

    /// Reinterpret the shape; element count must be unchanged.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        let requires = self.requires_grad(x);
        let backward = requires.then(|| {
            Box::new(move |_: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let slot = grad_slot(grads, x, g.len());
                for (s, &gi) in slot.iter_mut().zip(g) {
                    *s += gi;
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, shape.to_vec(), requires, backward))
    }

    /// Concatenate tensors of equal rank along `axis`; all other extents must
    /// match.
    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no tensors given"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first),
            ));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut data = vec![T::zero(); outer * axis_total * tail];
        let blocks: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * tail).collect();
        let row = axis_total * tail;
        for o in 0..outer {
            let mut offset = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let pd = self.data(p);
                let blk = blocks[pi];
                data[o * row + offset..o * row + offset + blk]
                    .copy_from_slice(&pd[o * blk..(o + 1) * blk]);
                offset += blk;
            }
        }
        let parts_vec = parts.to_vec();
        let requires = self.any_requires_grad(parts);
        let backward = requires.then(|| {
            Box::new(move |nodes: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                for o in 0..outer {
                    let mut offset = 0;
                    for (pi, &p) in parts_vec.iter().enumerate() {
                        let blk = blocks[pi];
                        if nodes[p.0].requires_grad {
                            let len = nodes[p.0].data.len();
                            let slot = grad_slot(grads, p, len);
                            for i in 0..blk {
                                slot[o * blk + i] += g[o * row + offset + i];
                            }
                        }
                        offset += blk;
                    }
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, out_shape, requires, backward))
    }

    /// Tile a tensor along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: TensorId, batch: usize) -> Result<TensorId> {
        if batch == 0 {
            return Err(Error::invalid("broadcast_batch", "batch must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let block = self.data(x).len();
        let mut data = Vec::with_capacity(batch * block);
        for _ in 0..batch {
            data.extend_from_slice(self.data(x));
        }
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&xs);
        let requires = self.requires_grad(x);
        let backward = requires.then(|| {
            Box::new(move |_: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let slot = grad_slot(grads, x, block);
                for b in 0..batch {
                    for i in 0..block {
                        slot[i] += g[b * block + i];
                    }
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, out_shape, requires, backward))
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return;
        }
        idx[d] = 0;
    }
}
