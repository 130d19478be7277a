//! 3-D convolution and pooling.

use crate::error::{Error, Result};

use super::{grad_slot, Scalar, Tape, TensorId};

/// Output extent of a strided window op: `floor((x + 2p - k)/s) + 1`.
pub fn out_extent(x: usize, k: usize, stride: usize, padding: usize) -> usize {
    (x + 2 * padding - k) / stride + 1
}

/// Valid output range for a kernel offset `t = k_idx - padding`, where the
/// input coordinate is `o*s + t`. Returns `o_min..o_max_exclusive`.
fn out_range(extent_in: usize, extent_out: usize, s: usize, t: isize) -> (usize, usize) {
    let o_min = if t >= 0 {
        0
    } else {
        ((-t) as usize).div_ceil(s)
    };
    let hi = extent_in as isize - 1 - t;
    if hi < 0 {
        return (0, 0);
    }
    let o_max = ((hi as usize) / s + 1).min(extent_out);
    (o_min.min(o_max), o_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

impl<T: Scalar> Tape<T> {
    /// 3-D cross-correlation over `[B, Cin, D, H, W]` input with a cubic
    /// `[Cout, Cin, k, k, k]` kernel.
    pub fn conv3d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (b_n, cin, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if wcin != cin || ws[3] != k || ws[4] != k {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: xs,
                rhs: ws,
            });
        }
        if k % 2 == 0 {
            return Err(Error::invalid("conv3d", format!("kernel size {} must be odd", k)));
        }
        if stride == 0 {
            return Err(Error::invalid("conv3d", "stride must be >= 1"));
        }
        for (e, name) in [(d, "depth"), (h, "height"), (w, "width")] {
            if e + 2 * padding < k {
                return Err(Error::invalid(
                    "conv3d",
                    format!("padded {} extent {} is smaller than kernel {}", name, e + 2 * padding, k),
                ));
            }
        }
        if let Some(bid) = bias {
            if self.shape(bid) != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv3d",
                    lhs: self.shape(bid).to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let od = out_extent(d, k, stride, padding);
        let oh = out_extent(h, k, stride, padding);
        let ow = out_extent(w, k, stride, padding);
        let out_spatial = od * oh * ow;
        let mut data = vec![T::zero(); b_n * cout * out_spatial];

        {
            let xd = self.data(input);
            let wd = self.data(weight);
            let bd = bias.map(|bid| self.data(bid).to_vec());
            conv3d_forward(
                xd, wd, bd.as_deref(), &mut data,
                b_n, cin, cout, (d, h, w), (od, oh, ow), k, stride, padding,
            );
        }

        let out_shape = vec![b_n, cout, od, oh, ow];
        let mut parents = vec![input, weight];
        if let Some(bid) = bias {
            parents.push(bid);
        }
        let requires = self.any_requires_grad(&parents);
        let backward = requires.then(|| {
            Box::new(move |nodes: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let dims = (d, h, w);
                let odims = (od, oh, ow);
                if nodes[input.0].requires_grad {
                    let wd = &nodes[weight.0].data;
                    let slot = grad_slot(grads, input, b_n * cin * d * h * w);
                    conv3d_backward_input(wd, g, slot, b_n, cin, cout, dims, odims, k, stride, padding);
                }
                if nodes[weight.0].requires_grad {
                    let xd = &nodes[input.0].data;
                    let slot = grad_slot(grads, weight, cout * cin * k * k * k);
                    conv3d_backward_weight(xd, g, slot, b_n, cin, cout, dims, odims, k, stride, padding);
                }
                if let Some(bid) = bias {
                    if nodes[bid.0].requires_grad {
                        let slot = grad_slot(grads, bid, cout);
                        for b in 0..b_n {
                            for co in 0..cout {
                                let base = (b * cout + co) * out_spatial;
                                let mut acc = T::zero();
                                for &gv in &g[base..base + out_spatial] {
                                    acc += gv;
                                }
                                slot[co] += acc;
                            }
                        }
                    }
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, out_shape, requires, backward))
    }

    /// Cubic-window pooling. Max pooling supports zero padding (padded cells
    /// never win); average pooling is unpadded. Axes of extent 1 are passed
    /// through so degenerate 1-D/2-D inputs pool along their live axes.
    pub fn pool3d(
        &mut self,
        input: TensorId,
        kind: PoolKind,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 5 {
            return Err(Error::invalid(
                "pool3d",
                format!("expected rank-5 input, got shape {:?}", xs),
            ));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("pool3d", "kernel and stride must be >= 1"));
        }
        if kind == PoolKind::Average && padding != 0 {
            return Err(Error::invalid("pool3d", "average pooling does not support padding"));
        }
        if padding > 0 && 2 * padding >= kernel {
            return Err(Error::invalid(
                "pool3d",
                format!("padding {} too large for kernel {}", padding, kernel),
            ));
        }
        let (b_n, c_n) = (xs[0], xs[1]);
        let dims = [xs[2], xs[3], xs[4]];
        let mut k_ax = [kernel; 3];
        let mut s_ax = [stride; 3];
        let mut p_ax = [padding; 3];
        for a in 0..3 {
            if dims[a] == 1 {
                k_ax[a] = 1;
                s_ax[a] = 1;
                p_ax[a] = 0;
            } else if dims[a] + 2 * padding < kernel {
                return Err(Error::invalid(
                    "pool3d",
                    format!(
                        "kernel {} larger than padded input extent {}",
                        kernel,
                        dims[a] + 2 * padding
                    ),
                ));
            }
        }
        let odims = [
            out_extent(dims[0], k_ax[0], s_ax[0], p_ax[0]),
            out_extent(dims[1], k_ax[1], s_ax[1], p_ax[1]),
            out_extent(dims[2], k_ax[2], s_ax[2], p_ax[2]),
        ];
        let out_spatial = odims[0] * odims[1] * odims[2];
        let in_spatial = dims[0] * dims[1] * dims[2];
        let channels = b_n * c_n;
        let mut data = vec![T::zero(); channels * out_spatial];
        // Flat input index of the window max, per output cell (max pooling only).
        let mut argmax = vec![0usize; if kind == PoolKind::Max { channels * out_spatial } else { 0 }];
        let window = (k_ax[0] * k_ax[1] * k_ax[2]) as f64;
        let inv_window = T::from_f64(1.0 / window);

        {
            let xd = self.data(input);
            for ch in 0..channels {
                let x_ch = &xd[ch * in_spatial..(ch + 1) * in_spatial];
                let o_ch = &mut data[ch * out_spatial..(ch + 1) * out_spatial];
                for od in 0..odims[0] {
                    for oh in 0..odims[1] {
                        for ow in 0..odims[2] {
                            let oi = (od * odims[1] + oh) * odims[2] + ow;
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0usize;
                            let mut sum = T::zero();
                            for kd in 0..k_ax[0] {
                                let id = (od * s_ax[0] + kd) as isize - p_ax[0] as isize;
                                if id < 0 || id >= dims[0] as isize {
                                    continue;
                                }
                                for kh in 0..k_ax[1] {
                                    let ih = (oh * s_ax[1] + kh) as isize - p_ax[1] as isize;
                                    if ih < 0 || ih >= dims[1] as isize {
                                        continue;
                                    }
                                    for kw in 0..k_ax[2] {
                                        let iw = (ow * s_ax[2] + kw) as isize - p_ax[2] as isize;
                                        if iw < 0 || iw >= dims[2] as isize {
                                            continue;
                                        }
                                        let ii = ((id as usize) * dims[1] + ih as usize) * dims[2]
                                            + iw as usize;
                                        let v = x_ch[ii];
                                        sum += v;
                                        if v > best {
                                            best = v;
                                            best_idx = ii;
                                        }
                                    }
                                }
                            }
                            match kind {
                                PoolKind::Max => {
                                    o_ch[oi] = best;
                                    argmax[ch * out_spatial + oi] = best_idx;
                                }
                                PoolKind::Average => {
                                    o_ch[oi] = sum * inv_window;
                                }
                            }
                        }
                    }
                }
            }
        }

        let out_shape = vec![b_n, c_n, odims[0], odims[1], odims[2]];
        let requires = self.requires_grad(input);
        let backward = requires.then(|| {
            Box::new(move |_: &[super::Tensor<T>], g: &[T], grads: &mut super::GradStore<T>| {
                let slot = grad_slot(grads, input, channels * in_spatial);
                match kind {
                    PoolKind::Max => {
                        for ch in 0..channels {
                            for oi in 0..out_spatial {
                                let flat = ch * out_spatial + oi;
                                slot[ch * in_spatial + argmax[flat]] += g[flat];
                            }
                        }
                    }
                    PoolKind::Average => {
                        for ch in 0..channels {
                            let g_ch = &g[ch * out_spatial..(ch + 1) * out_spatial];
                            let s_ch = &mut slot[ch * in_spatial..(ch + 1) * in_spatial];
                            for od in 0..odims[0] {
                                for oh in 0..odims[1] {
                                    for ow in 0..odims[2] {
                                        let gv =
                                            g_ch[(od * odims[1] + oh) * odims[2] + ow] * inv_window;
                                        for kd in 0..k_ax[0] {
                                            let id = od * s_ax[0] + kd;
                                            for kh in 0..k_ax[1] {
                                                let ih = oh * s_ax[1] + kh;
                                                for kw in 0..k_ax[2] {
                                                    let iw = ow * s_ax[2] + kw;
                                                    s_ch[(id * dims[1] + ih) * dims[2] + iw] += gv;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }) as super::BackwardFn<T>
        });
        Ok(self.push(data, out_shape, requires, backward))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
    b_n: usize,
    cin: usize,
    cout: usize,
    (d, h, wd): (usize, usize, usize),
    (od, oh, ow): (usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
) {
    let in_spatial = d * h * wd;
    let out_spatial = od * oh * ow;
    let ksq = k * k * k;
    for b in 0..b_n {
        for co in 0..cout {
            let o_ch = &mut out[(b * cout + co) * out_spatial..(b * cout + co + 1) * out_spatial];
            if let Some(bd) = bias {
                let bv = bd[co];
                for v in o_ch.iter_mut() {
                    *v = bv;
                }
            }
            for ci in 0..cin {
                let x_ch = &x[(b * cin + ci) * in_spatial..(b * cin + ci + 1) * in_spatial];
                let w_k = &w[(co * cin + ci) * ksq..(co * cin + ci + 1) * ksq];
                for kd in 0..k {
                    let td = kd as isize - p as isize;
                    let (d0, d1) = out_range(d, od, s, td);
                    for kh in 0..k {
                        let th = kh as isize - p as isize;
                        let (h0, h1) = out_range(h, oh, s, th);
                        for kw in 0..k {
                            let tw = kw as isize - p as isize;
                            let (w0, w1) = out_range(wd, ow, s, tw);
                            if w0 >= w1 {
                                continue;
                            }
                            let wv = w_k[(kd * k + kh) * k + kw];
                            for o_d in d0..d1 {
                                let id = (o_d as isize * s as isize + td) as usize;
                                for o_h in h0..h1 {
                                    let ih = (o_h as isize * s as isize + th) as usize;
                                    let x_row = &x_ch[(id * h + ih) * wd..(id * h + ih + 1) * wd];
                                    let o_row =
                                        &mut o_ch[(o_d * oh + o_h) * ow..(o_d * oh + o_h + 1) * ow];
                                    if s == 1 {
                                        let xi0 = (w0 as isize + tw) as usize;
                                        let xr = &x_row[xi0..xi0 + (w1 - w0)];
                                        let or = &mut o_row[w0..w1];
                                        for i in 0..or.len() {
                                            or[i] += wv * xr[i];
                                        }
                                    } else {
                                        for o_w in w0..w1 {
                                            let iw = (o_w as isize * s as isize + tw) as usize;
                                            o_row[o_w] += wv * x_row[iw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward_input<T: Scalar>(
    w: &[T],
    g: &[T],
    dx: &mut [T],
    b_n: usize,
    cin: usize,
    cout: usize,
    (d, h, wd): (usize, usize, usize),
    (od, oh, ow): (usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
) {
    let in_spatial = d * h * wd;
    let out_spatial = od * oh * ow;
    let ksq = k * k * k;
    for b in 0..b_n {
        for co in 0..cout {
            let g_ch = &g[(b * cout + co) * out_spatial..(b * cout + co + 1) * out_spatial];
            for ci in 0..cin {
                let dx_ch = &mut dx[(b * cin + ci) * in_spatial..(b * cin + ci + 1) * in_spatial];
                let w_k = &w[(co * cin + ci) * ksq..(co * cin + ci + 1) * ksq];
                for kd in 0..k {
                    let td = kd as isize - p as isize;
                    let (d0, d1) = out_range(d, od, s, td);
                    for kh in 0..k {
                        let th = kh as isize - p as isize;
                        let (h0, h1) = out_range(h, oh, s, th);
                        for kw in 0..k {
                            let tw = kw as isize - p as isize;
                            let (w0, w1) = out_range(wd, ow, s, tw);
                            if w0 >= w1 {
                                continue;
                            }
                            let wv = w_k[(kd * k + kh) * k + kw];
                            for o_d in d0..d1 {
                                let id = (o_d as isize * s as isize + td) as usize;
                                for o_h in h0..h1 {
                                    let ih = (o_h as isize * s as isize + th) as usize;
                                    let g_row =
                                        &g_ch[(o_d * oh + o_h) * ow..(o_d * oh + o_h + 1) * ow];
                                    let dx_row =
                                        &mut dx_ch[(id * h + ih) * wd..(id * h + ih + 1) * wd];
                                    if s == 1 {
                                        let xi0 = (w0 as isize + tw) as usize;
                                        let dxr = &mut dx_row[xi0..xi0 + (w1 - w0)];
                                        let gr = &g_row[w0..w1];
                                        for i in 0..gr.len() {
                                            dxr[i] += wv * gr[i];
                                        }
                                    } else {
                                        for o_w in w0..w1 {
                                            let iw = (o_w as isize * s as isize + tw) as usize;
                                            dx_row[iw] += wv * g_row[o_w];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward_weight<T: Scalar>(
    x: &[T],
    g: &[T],
    dw: &mut [T],
    b_n: usize,
    cin: usize,
    cout: usize,
    (d, h, wd): (usize, usize, usize),
    (od, oh, ow): (usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
) {
    let in_spatial = d * h * wd;
    let out_spatial = od * oh * ow;
    let ksq = k * k * k;
    for b in 0..b_n {
        for co in 0..cout {
            let g_ch = &g[(b * cout + co) * out_spatial..(b * cout + co + 1) * out_spatial];
            for ci in 0..cin {
                let x_ch = &x[(b * cin + ci) * in_spatial..(b * cin + ci + 1) * in_spatial];
                let dw_k = &mut dw[(co * cin + ci) * ksq..(co * cin + ci + 1) * ksq];
                for kd in 0..k {
                    let td = kd as isize - p as isize;
                    let (d0, d1) = out_range(d, od, s, td);
                    for kh in 0..k {
                        let th = kh as isize - p as isize;
                        let (h0, h1) = out_range(h, oh, s, th);
                        for kw in 0..k {
                            let tw = kw as isize - p as isize;
                            let (w0, w1) = out_range(wd, ow, s, tw);
                            if w0 >= w1 {
                                continue;
                            }
                            let mut acc = T::zero();
                            for o_d in d0..d1 {
                                let id = (o_d as isize * s as isize + td) as usize;
                                for o_h in h0..h1 {
                                    let ih = (o_h as isize * s as isize + th) as usize;
                                    let g_row =
                                        &g_ch[(o_d * oh + o_h) * ow..(o_d * oh + o_h + 1) * ow];
                                    let x_row =
                                        &x_ch[(id * h + ih) * wd..(id * h + ih + 1) * wd];
                                    if s == 1 {
                                        let xi0 = (w0 as isize + tw) as usize;
                                        let xr = &x_row[xi0..xi0 + (w1 - w0)];
                                        let gr = &g_row[w0..w1];
                                        for i in 0..gr.len() {
                                            acc += xr[i] * gr[i];
                                        }
                                    } else {
                                        for o_w in w0..w1 {
                                            let iw = (o_w as isize * s as isize + tw) as usize;
                                            acc += x_row[iw] * g_row[o_w];
                                        }
                                    }
                                }
                            }
                            dw_k[(kd * k + kh) * k + kw] += acc;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_zero_input_yields_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![0.0; 2 * 3 * 4 * 4 * 4], &[2, 3, 4, 4, 4], false).unwrap();
        let w = tape
            .leaf((0..2 * 3 * 27).map(|i| i as f64 * 0.1).collect(), &[2, 3, 3, 3, 3], false)
            .unwrap();
        let b = tape.leaf(vec![1.5, -0.5], &[2], false).unwrap();
        let y = tape.conv3d(x, w, Some(b), 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 4, 4, 4]);
        for bi in 0..2 {
            for (co, expect) in [(0usize, 1.5f64), (1, -0.5)] {
                let base = (bi * 2 + co) * 64;
                assert!(tape.data(y)[base..base + 64].iter().all(|&v| v == expect));
            }
        }
    }

    #[test]
    fn conv_pointwise_scaling() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0; 8], &[1, 1, 2, 2, 2], false).unwrap();
        let w = tape.leaf(vec![2.0], &[1, 1, 1, 1, 1], false).unwrap();
        let b = tape.leaf(vec![0.0], &[1], false).unwrap();
        let y = tape.conv3d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2, 2]);
        assert!(tape.data(y).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![0.0; 3 * 8], &[1, 3, 2, 2, 2], false).unwrap();
        let w = tape.leaf(vec![0.0; 4 * 4], &[4, 4, 1, 1, 1], false).unwrap();
        let err = tape.conv3d(x, w, None, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 2, 2, 2]") && msg.contains("[4, 4, 1, 1, 1]"), "{msg}");
    }

    #[test]
    fn maxpool_constant_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![2.5; 5 * 5 * 5], &[1, 1, 5, 5, 5], false).unwrap();
        let y = tape.pool3d(x, PoolKind::Max, 3, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2, 2]);
        assert!(tape.data(y).iter().all(|&v| v == 2.5));
    }

    #[test]
    fn maxpool_degenerate_1d() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 1, 1, 4], false).unwrap();
        let y = tape.pool3d(x, PoolKind::Max, 2, 2, 0).unwrap();
        assert_eq!(tape.data(y), &[2.0, 4.0]);
    }

    #[test]
    fn pool_rejects_oversized_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0; 8], &[1, 1, 2, 2, 2], false).unwrap();
        assert!(tape.pool3d(x, PoolKind::Max, 3, 1, 0).is_err());
    }

    #[test]
    fn conv_matches_direct_summation_oracle() {
        let mut rng_state = 0x5eedu64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x: Vec<f64> = (0..2 * 3 * 64).map(|_| next()).collect();
        let w: Vec<f64> = (0..4 * 3 * 27).map(|_| next()).collect();
        let b: Vec<f64> = (0..4).map(|_| next()).collect();
        let (expect, oshape) = crate::oracles::conv3d_reference(
            &x,
            &[2, 3, 4, 4, 4],
            &w,
            &[4, 3, 3, 3, 3],
            &b,
            1,
            1,
        );
        let mut tape = Tape::<f64>::new();
        let xi = tape.leaf(x, &[2, 3, 4, 4, 4], false).unwrap();
        let wi = tape.leaf(w, &[4, 3, 3, 3, 3], false).unwrap();
        let bi = tape.leaf(b, &[4], false).unwrap();
        let y = tape.conv3d(xi, wi, Some(bi), 1, 1).unwrap();
        assert_eq!(tape.shape(y), &oshape);
        for (a, e) in tape.data(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_matches_window_scan_oracle_exactly() {
        let vals: Vec<f64> = (0..125).map(|i| ((i * 73) % 411) as f64 * 0.37 - 40.0).collect();
        let (expect, oshape) = crate::oracles::pool3d_reference(&vals, &[1, 1, 5, 5, 5], true, 3, 2);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vals, &[1, 1, 5, 5, 5], false).unwrap();
        let y = tape.pool3d(x, PoolKind::Max, 3, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &oshape);
        assert_eq!(tape.data(y), expect.as_slice());
    }

    #[test]
    fn avgpool_window() {
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let x = tape.leaf(vals, &[1, 1, 2, 2, 2], true).unwrap();
        let y = tape.pool3d(x, PoolKind::Average, 2, 2, 0).unwrap();
        assert_eq!(tape.data(y), &[3.5]);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.125; 8]);
    }
}
