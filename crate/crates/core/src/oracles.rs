//! Independent brute-force reference implementations.
//!
//! These deliberately share no code with the tensor engine: plain nested
//! loops and textbook formulas, written for clarity rather than speed. Tests
//! compare the engine's outputs against them on random instances.

/// Direct-summation 3-D cross-correlation. Returns (data, shape).
#[allow(clippy::too_many_arguments)]
pub fn conv3d_reference(
    input: &[f64],
    ishape: &[usize; 5],
    weight: &[f64],
    wshape: &[usize; 5],
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [b_n, cin, d, h, w] = *ishape;
    let [cout, _, k, _, _] = *wshape;
    let od = (d + 2 * padding - k) / stride + 1;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; b_n * cout * od * oh * ow];
    for b in 0..b_n {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = (z * stride + kd) as isize - padding as isize;
                                        let ih = (y * stride + kh) as isize - padding as isize;
                                        let iw = (x * stride + kw) as isize - padding as isize;
                                        if id < 0
                                            || ih < 0
                                            || iw < 0
                                            || id >= d as isize
                                            || ih >= h as isize
                                            || iw >= w as isize
                                        {
                                            continue;
                                        }
                                        let xi = (((b * cin + ci) * d + id as usize) * h
                                            + ih as usize)
                                            * w
                                            + iw as usize;
                                        let wi = (((co * cin + ci) * k + kd) * k + kh) * k + kw;
                                        acc += input[xi] * weight[wi];
                                    }
                                }
                            }
                        }
                        let oi = (((b * cout + co) * od + z) * oh + y) * ow + x;
                        out[oi] = acc;
                    }
                }
            }
        }
    }
    (out, [b_n, cout, od, oh, ow])
}

/// Window-scan pooling over `[B, C, D, H, W]`, no padding.
pub fn pool3d_reference(
    input: &[f64],
    ishape: &[usize; 5],
    max: bool,
    kernel: usize,
    stride: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [b_n, c_n, d, h, w] = *ishape;
    let od = (d - kernel) / stride + 1;
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = vec![0.0; b_n * c_n * od * oh * ow];
    for ch in 0..b_n * c_n {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut vals = Vec::new();
                    for kd in 0..kernel {
                        for kh in 0..kernel {
                            for kw in 0..kernel {
                                let ii = ((ch * d + z * stride + kd) * h + y * stride + kh) * w
                                    + x * stride
                                    + kw;
                                vals.push(input[ii]);
                            }
                        }
                    }
                    let v = if max {
                        vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    };
                    out[((ch * od + z) * oh + y) * ow + x] = v;
                }
            }
        }
    }
    (out, [b_n, c_n, od, oh, ow])
}

/// Double-loop dot-product affine map over the trailing axis.
pub fn linear_reference(
    input: &[f64],
    rows: usize,
    in_f: usize,
    weight: &[f64],
    out_f: usize,
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; rows * out_f];
    for r in 0..rows {
        for o in 0..out_f {
            let mut acc = bias[o];
            for i in 0..in_f {
                acc += input[r * in_f + i] * weight[o * in_f + i];
            }
            out[r * out_f + o] = acc;
        }
    }
    out
}

/// Direct softmax-then-log cross entropy (no max-subtraction trick).
pub fn cross_entropy_reference(logits: &[f64], b_n: usize, k_n: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for b in 0..b_n {
        let row = &logits[b * k_n..(b + 1) * k_n];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        let p = row[labels[b]].exp() / denom;
        total += -p.ln();
    }
    total / b_n as f64
}

/// Mann-Whitney rank-statistic AUC with midrank tie handling. An independent
/// route to the pair-counting definition.
pub fn auc_rank_reference(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}
