//! Fused operations with hand-written backward rules: the sequence kernels
//! that would otherwise expand into thousands of scalar tape nodes.

use super::linalg::gemm;
use super::tape::record;
use super::{invalid, Result, Tensor, TensorError};

fn expect_rank2(op: &'static str, name: &str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return invalid(op, format!("{name} must be rank 2, got {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Depthwise causal convolution over time.
///
/// `x: [T, D]`, `weight: [K, D]`, `bias: [1, D]`. Output row `t` is
/// `bias + sum_k weight[k] * x[t - (K-1) + k]`, with rows before 0 treated
/// as zero (left padding of `K - 1`).
pub fn causal_conv1d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "causal_conv1d";
    let (t_len, d) = expect_rank2(OP, "input", x)?;
    let (k, dw) = expect_rank2(OP, "weight", weight)?;
    if dw != d {
        return Err(mismatch(OP, x, weight));
    }
    if bias.shape() != [1, d] {
        return Err(mismatch(OP, x, bias));
    }
    if k == 0 {
        return invalid(OP, "kernel width must be at least 1");
    }
    let (xs, ws, bs) = (x.shared_data(), weight.shared_data(), bias.shared_data());
    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        let row = &mut out[t * d..(t + 1) * d];
        row.copy_from_slice(&bs);
        for j in 0..k {
            // tap j reads x[t + j - (k - 1)]
            let Some(s) = (t + j).checked_sub(k - 1) else {
                continue;
            };
            let (xr, wr) = (&xs[s * d..(s + 1) * d], &ws[j * d..(j + 1) * d]);
            for c in 0..d {
                row[c] += wr[c] * xr[c];
            }
        }
    }
    record(
        OP,
        &[x, weight, bias],
        vec![t_len, d],
        out,
        move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; t_len * d]);
            let mut gw = needs[1].then(|| vec![0.0; k * d]);
            let mut gb = needs[2].then(|| vec![0.0; d]);
            for t in 0..t_len {
                let gr = &g[t * d..(t + 1) * d];
                if let Some(gb) = gb.as_mut() {
                    for c in 0..d {
                        gb[c] += gr[c];
                    }
                }
                for j in 0..k {
                    let Some(s) = (t + j).checked_sub(k - 1) else {
                        continue;
                    };
                    if let Some(gx) = gx.as_mut() {
                        for c in 0..d {
                            gx[s * d + c] += ws[j * d + c] * gr[c];
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        for c in 0..d {
                            gw[j * d + c] += xs[s * d + c] * gr[c];
                        }
                    }
                }
            }
            vec![gx, gw, gb]
        },
    )
}

/// Input-dependent diagonal state-space scan.
///
/// Shapes: `u, delta: [T, D]`, `a: [D, N]`, `b, c: [T, N]`. Per channel `d`
/// and state `n`, with `h_0 = 0`:
///
/// ```text
/// h_t = exp(delta[t,d] * a[d,n]) * h_{t-1} + delta[t,d] * b[t,n] * u[t,d]
/// y[t,d] = sum_n c[t,n] * h_t[d,n]
/// ```
///
/// The forward pass keeps every state for the reverse sweep, so memory is
/// `O(T * D * N)` while recorded.
pub fn selective_scan(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
) -> Result<Tensor> {
    const OP: &str = "selective_scan";
    let (t_len, d) = expect_rank2(OP, "u", u)?;
    if delta.shape() != u.shape() {
        return Err(mismatch(OP, u, delta));
    }
    let (da, n) = expect_rank2(OP, "a", a)?;
    if da != d {
        return Err(mismatch(OP, u, a));
    }
    if b.shape() != [t_len, n] {
        return Err(mismatch(OP, a, b));
    }
    if c.shape() != [t_len, n] {
        return Err(mismatch(OP, a, c));
    }
    let (us, ds, as_, bs, cs) = (
        u.shared_data(),
        delta.shared_data(),
        a.shared_data(),
        b.shared_data(),
        c.shared_data(),
    );
    let track = [u, delta, a, b, c].iter().any(|t| t.is_tracked());
    let mut states = if track {
        vec![0.0; t_len * d * n]
    } else {
        Vec::new()
    };
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; t_len * d];
    for t in 0..t_len {
        let (bt, ct) = (&bs[t * n..(t + 1) * n], &cs[t * n..(t + 1) * n]);
        for ch in 0..d {
            let dt = ds[t * d + ch];
            let du = dt * us[t * d + ch];
            let hr = &mut h[ch * n..(ch + 1) * n];
            let ar = &as_[ch * n..(ch + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                hr[s] = (dt * ar[s]).exp() * hr[s] + du * bt[s];
                acc += ct[s] * hr[s];
            }
            y[t * d + ch] = acc;
        }
        if track {
            states[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
        }
    }
    record(OP, &[u, delta, a, b, c], vec![t_len, d], y, move |g, _| {
        let mut gu = vec![0.0; t_len * d];
        let mut gd = vec![0.0; t_len * d];
        let mut ga = vec![0.0; d * n];
        let mut gb = vec![0.0; t_len * n];
        let mut gc = vec![0.0; t_len * n];
        let mut dh = vec![0.0; d * n];
        for t in (0..t_len).rev() {
            let h_t = &states[t * d * n..(t + 1) * d * n];
            for ch in 0..d {
                let gy = g[t * d + ch];
                let dt = ds[t * d + ch];
                let ut = us[t * d + ch];
                for s in 0..n {
                    let i = ch * n + s;
                    let h_prev = if t > 0 {
                        states[(t - 1) * d * n + i]
                    } else {
                        0.0
                    };
                    let abar = (dt * as_[i]).exp();
                    dh[i] += cs[t * n + s] * gy;
                    gc[t * n + s] += gy * h_t[i];
                    let d_abar = dh[i] * h_prev;
                    let bt = bs[t * n + s];
                    gd[t * d + ch] += d_abar * abar * as_[i] + dh[i] * bt * ut;
                    ga[i] += d_abar * abar * dt;
                    gb[t * n + s] += dh[i] * dt * ut;
                    gu[t * d + ch] += dh[i] * dt * bt;
                    dh[i] *= abar;
                }
            }
        }
        vec![Some(gu), Some(gd), Some(ga), Some(gb), Some(gc)]
    })
}

/// Per-token choice among linear maps: row `t` of the output is
/// `x[t] * weights[route[t]] + biases[route[t]]`.
///
/// `x: [T, I]`, every weight `[I, O]`, every bias `[1, O]`.
pub fn routed_linear(
    x: &Tensor,
    route: &[usize],
    weights: &[&Tensor],
    biases: &[&Tensor],
) -> Result<Tensor> {
    const OP: &str = "routed_linear";
    let (t_len, i_dim) = expect_rank2(OP, "input", x)?;
    if route.len() != t_len {
        return invalid(OP, format!("{} routes for {t_len} tokens", route.len()));
    }
    if weights.is_empty() || weights.len() != biases.len() {
        return invalid(
            OP,
            format!("{} weights and {} biases", weights.len(), biases.len()),
        );
    }
    let (wi, o_dim) = expect_rank2(OP, "weight", weights[0])?;
    if wi != i_dim {
        return Err(mismatch(OP, x, weights[0]));
    }
    for (w, bias) in weights.iter().zip(biases) {
        if w.shape() != weights[0].shape() {
            return Err(mismatch(OP, weights[0], w));
        }
        if bias.shape() != [1, o_dim] {
            return Err(mismatch(OP, weights[0], bias));
        }
    }
    let experts = weights.len();
    if let Some(bad) = route.iter().find(|&&e| e >= experts) {
        return invalid(
            OP,
            format!("route {bad} out of range for {experts} experts"),
        );
    }

    let groups: Vec<Vec<usize>> = (0..experts)
        .map(|e| (0..t_len).filter(|&t| route[t] == e).collect())
        .collect();
    let xs = x.shared_data();
    let ws: Vec<_> = weights.iter().map(|w| w.shared_data()).collect();
    let bs: Vec<_> = biases.iter().map(|b| b.shared_data()).collect();
    let gather = |src: &[f64], rows: &[usize], width: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        out
    };

    let mut out = vec![0.0; t_len * o_dim];
    for (e, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let xe = gather(&xs, rows, i_dim);
        let ye = gemm(rows.len(), i_dim, o_dim, &xe, false, &ws[e], false);
        for (k, &r) in rows.iter().enumerate() {
            for j in 0..o_dim {
                out[r * o_dim + j] = ye[k * o_dim + j] + bs[e][j];
            }
        }
    }

    let mut inputs: Vec<&Tensor> = vec![x];
    inputs.extend(weights.iter().copied());
    inputs.extend(biases.iter().copied());
    record(OP, &inputs, vec![t_len, o_dim], out, move |g, needs| {
        let mut gx = needs[0].then(|| vec![0.0; t_len * i_dim]);
        let mut gws: Vec<Option<Vec<f64>>> = Vec::with_capacity(experts);
        let mut gbs: Vec<Option<Vec<f64>>> = Vec::with_capacity(experts);
        for (e, rows) in groups.iter().enumerate() {
            let need_w = needs[1 + e];
            let need_b = needs[1 + experts + e];
            if rows.is_empty() {
                gws.push(need_w.then(|| vec![0.0; i_dim * o_dim]));
                gbs.push(need_b.then(|| vec![0.0; o_dim]));
                continue;
            }
            let ge = gather(g, rows, o_dim);
            gws.push(need_w.then(|| {
                let xe = gather(&xs, rows, i_dim);
                gemm(i_dim, rows.len(), o_dim, &xe, true, &ge, false)
            }));
            gbs.push(need_b.then(|| {
                let mut gb = vec![0.0; o_dim];
                for row in ge.chunks(o_dim) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                gb
            }));
            if let Some(gx) = gx.as_mut() {
                let gxe = gemm(rows.len(), o_dim, i_dim, &ge, false, &ws[e], true);
                for (k, &r) in rows.iter().enumerate() {
                    gx[r * i_dim..(r + 1) * i_dim]
                        .copy_from_slice(&gxe[k * i_dim..(k + 1) * i_dim]);
                }
            }
        }
        let mut grads = vec![gx];
        grads.extend(gws);
        grads.extend(gbs);
        grads
    })
}

/// Pairwise squared Euclidean distances: `x: [M, d]`, `y: [N, d]` give
/// `[M, N]` with entry `|x_i - y_j|^2`.
pub fn sq_dist(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    const OP: &str = "sq_dist";
    let (m, d) = expect_rank2(OP, "x", x)?;
    let (n, dy) = expect_rank2(OP, "y", y)?;
    if d != dy {
        return Err(mismatch(OP, x, y));
    }
    let (xs, ys) = (x.shared_data(), y.shared_data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let xi = &xs[i * d..(i + 1) * d];
        for j in 0..n {
            let yj = &ys[j * d..(j + 1) * d];
            out[i * n + j] = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    record(OP, &[x, y], vec![m, n], out, move |g, needs| {
        let mut gx = needs[0].then(|| vec![0.0; m * d]);
        let mut gy = needs[1].then(|| vec![0.0; n * d]);
        for i in 0..m {
            for j in 0..n {
                let gij = 2.0 * g[i * n + j];
                if gij == 0.0 {
                    continue;
                }
                for k in 0..d {
                    let diff = gij * (xs[i * d + k] - ys[j * d + k]);
                    if let Some(gx) = gx.as_mut() {
                        gx[i * d + k] += diff;
                    }
                    if let Some(gy) = gy.as_mut() {
                        gy[j * d + k] -= diff;
                    }
                }
            }
        }
        vec![gx, gy]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_is_causal_with_left_padding() {
        // width 2: y[t] = w0 * x[t-1] + w1 * x[t] + b
        let x = t(&[3, 1], &[1., 2., 3.]);
        let w = t(&[2, 1], &[10., 1.]);
        let b = t(&[1, 1], &[0.5]);
        let y = causal_conv1d(&x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![1.5, 12.5, 23.5]);
    }

    #[test]
    fn scan_single_step() {
        // T=1: y = sum_n c_n * delta * b_n * u
        let u = t(&[1, 1], &[2.0]);
        let dl = t(&[1, 1], &[0.5]);
        let a = t(&[1, 2], &[-1.0, -2.0]);
        let b = t(&[1, 2], &[1.0, 3.0]);
        let c = t(&[1, 2], &[4.0, 5.0]);
        let y = selective_scan(&u, &dl, &a, &b, &c).unwrap();
        assert_eq!(y.to_vec(), vec![4.0 * 1.0 + 5.0 * 3.0]);
    }

    #[test]
    fn routed_linear_picks_expert_per_row() {
        let x = t(&[3, 1], &[1., 2., 3.]);
        let w0 = t(&[1, 2], &[1., 0.]);
        let w1 = t(&[1, 2], &[0., 1.]);
        let b0 = t(&[1, 2], &[0., 0.]);
        let b1 = t(&[1, 2], &[100., 100.]);
        let y = routed_linear(&x, &[0, 1, 0], &[&w0, &w1], &[&b0, &b1]).unwrap();
        assert_eq!(y.to_vec(), vec![1., 0., 100., 102., 3., 0.]);
        assert!(routed_linear(&x, &[0, 2, 0], &[&w0, &w1], &[&b0, &b1]).is_err());
        assert!(routed_linear(&x, &[0, 1], &[&w0, &w1], &[&b0, &b1]).is_err());
    }

    #[test]
    fn sq_dist_values() {
        let x = t(&[2, 2], &[0., 0., 1., 1.]);
        let y = t(&[1, 2], &[1., 0.]);
        assert_eq!(sq_dist(&x, &y).unwrap().to_vec(), vec![1., 1.]);
        assert!(sq_dist(&x, &t(&[1, 3], &[0.; 3])).is_err());
    }
}
