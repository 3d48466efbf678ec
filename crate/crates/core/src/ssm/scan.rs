//! Discretization and the linear recurrence over explicit `[T, D, N]`
//! coefficient arrays. The layers use the fused kernel in
//! [`crate::tensor::selective_scan`]; these functions expose the individual
//! steps and the parallel formulation.

use rayon::prelude::*;

use super::SsmError;
use crate::tensor::Tensor;

/// Discretized coefficients of a diagonal SSM, both shaped `[T, D, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    pub abar: Tensor,
    pub bbar: Tensor,
}

impl Discretized {
    fn dims(&self) -> (usize, usize, usize) {
        let s = self.abar.shape();
        (s[0], s[1], s[2])
    }
}

fn expect_shape(what: &'static str, t: &Tensor, expected: &[usize]) -> Result<(), SsmError> {
    if t.shape() != expected {
        return Err(SsmError::Shape {
            what,
            expected: expected.to_vec(),
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Zero-order-hold discretization in the usual selective-SSM form:
/// `abar[t,d,n] = exp(delta[t,d] * a[d,n])` and
/// `bbar[t,d,n] = delta[t,d] * b[t,n]`.
///
/// `a: [D, N]`, `b: [T, N]`, `delta: [T, D]` with every step positive.
pub fn discretize(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<Discretized, SsmError> {
    if a.rank() != 2 || delta.rank() != 2 {
        return Err(SsmError::Shape {
            what: "a/delta rank",
            expected: vec![2],
            got: vec![a.rank(), delta.rank()],
        });
    }
    let (d, n) = (a.shape()[0], a.shape()[1]);
    let t_len = delta.shape()[0];
    expect_shape("delta", delta, &[t_len, d])?;
    expect_shape("b", b, &[t_len, n])?;
    if let Some(i) = delta.data().iter().position(|&v| v <= 0.0 || v.is_nan()) {
        return Err(SsmError::NonPositiveStep {
            token: i / d,
            channel: i % d,
            value: delta.data()[i],
        });
    }
    let (av, bv, dv) = (a.data(), b.data(), delta.data());
    let mut abar = Vec::with_capacity(t_len * d * n);
    let mut bbar = Vec::with_capacity(t_len * d * n);
    for t in 0..t_len {
        for ch in 0..d {
            let dt = dv[t * d + ch];
            for s in 0..n {
                abar.push((dt * av[ch * n + s]).exp());
                bbar.push(dt * bv[t * n + s]);
            }
        }
    }
    Ok(Discretized {
        abar: Tensor::from_vec(vec![t_len, d, n], abar)?,
        bbar: Tensor::from_vec(vec![t_len, d, n], bbar)?,
    })
}

fn check_scan_inputs(
    disc: &Discretized,
    c: &Tensor,
    u: &Tensor,
) -> Result<(usize, usize, usize), SsmError> {
    let (t_len, d, n) = disc.dims();
    expect_shape("bbar", &disc.bbar, &[t_len, d, n])?;
    expect_shape("c", c, &[t_len, n])?;
    expect_shape("u", u, &[t_len, d])?;
    Ok((t_len, d, n))
}

/// Every hidden state `h_t`, `t = 1..=T`, as a `[T, D, N]` buffer:
/// `h_t = abar_t * h_{t-1} + bbar_t * u_t` from `h_0 = 0`.
pub fn scan_states(disc: &Discretized, u: &Tensor) -> Result<Vec<f64>, SsmError> {
    let (t_len, d, n) = disc.dims();
    expect_shape("u", u, &[t_len, d])?;
    let (ab, bb, uv) = (disc.abar.data(), disc.bbar.data(), u.data());
    let lanes = d * n;
    let mut states = vec![0.0; t_len * lanes];
    let mut h = vec![0.0; lanes];
    for t in 0..t_len {
        for ch in 0..d {
            let ut = uv[t * d + ch];
            for s in 0..n {
                let i = ch * n + s;
                h[i] = ab[t * lanes + i] * h[i] + bb[t * lanes + i] * ut;
            }
        }
        states[t * lanes..(t + 1) * lanes].copy_from_slice(&h);
    }
    Ok(states)
}

fn readout(states: &[f64], c: &[f64], t_len: usize, d: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; t_len * d];
    for t in 0..t_len {
        for ch in 0..d {
            let h = &states[(t * d + ch) * n..(t * d + ch + 1) * n];
            y[t * d + ch] = h
                .iter()
                .zip(&c[t * n..(t + 1) * n])
                .map(|(h, c)| c * h)
                .sum();
        }
    }
    y
}

/// Runs the recurrence step by step and reads out `y[t,d] = <c_t, h_t[d]>`.
pub fn scan_sequential(disc: &Discretized, c: &Tensor, u: &Tensor) -> Result<Tensor, SsmError> {
    let (t_len, d, n) = check_scan_inputs(disc, c, u)?;
    let states = scan_states(disc, u)?;
    Ok(Tensor::from_vec(
        vec![t_len, d],
        readout(&states, c.data(), t_len, d, n),
    )?)
}

/// An affine map `h -> a * h + b` of one lane.
pub type Affine = (f64, f64);

/// Composition of two affine steps, `first` applied before `second`:
/// `(a1, b1) ∘ (a2, b2) = (a1 * a2, a2 * b1 + b2)`. Associative, with
/// identity `(1, 0)`.
#[inline]
pub fn combine(first: Affine, second: Affine) -> Affine {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// Same result as [`scan_sequential`], computed as a three-phase parallel
/// prefix scan under [`combine`]: local scans of time chunks run in
/// parallel, chunk carries are combined in order, then every chunk applies
/// its incoming carry in parallel.
pub fn scan_parallel(disc: &Discretized, c: &Tensor, u: &Tensor) -> Result<Tensor, SsmError> {
    let (t_len, d, n) = check_scan_inputs(disc, c, u)?;
    let lanes = d * n;
    let (ab, bb, uv) = (disc.abar.data(), disc.bbar.data(), u.data());
    if t_len == 0 {
        return Ok(Tensor::from_vec(vec![0, d], Vec::new())?);
    }

    let chunk = t_len
        .div_ceil(rayon::current_num_threads().max(1) * 2)
        .max(16);
    // (prefix multiplier, prefix offset) per step, relative to the chunk start
    let mut pa = vec![0.0; t_len * lanes];
    let mut pb = vec![0.0; t_len * lanes];
    pa.par_chunks_mut(chunk * lanes)
        .zip(pb.par_chunks_mut(chunk * lanes))
        .enumerate()
        .for_each(|(k, (pa, pb))| {
            let t0 = k * chunk;
            let steps = pa.len() / lanes;
            for j in 0..steps {
                let t = t0 + j;
                for ch in 0..d {
                    let ut = uv[t * d + ch];
                    for s in 0..n {
                        let i = ch * n + s;
                        let step: Affine = (ab[t * lanes + i], bb[t * lanes + i] * ut);
                        let acc = if j == 0 {
                            step
                        } else {
                            combine((pa[(j - 1) * lanes + i], pb[(j - 1) * lanes + i]), step)
                        };
                        pa[j * lanes + i] = acc.0;
                        pb[j * lanes + i] = acc.1;
                    }
                }
            }
        });

    // state entering each chunk
    let n_chunks = t_len.div_ceil(chunk);
    let mut carries = vec![vec![0.0; lanes]; n_chunks];
    for k in 1..n_chunks {
        let last = (k * chunk - 1) * lanes;
        for i in 0..lanes {
            carries[k][i] = pa[last + i] * carries[k - 1][i] + pb[last + i];
        }
    }

    let mut states = pb;
    states
        .par_chunks_mut(chunk * lanes)
        .zip(pa.par_chunks(chunk * lanes))
        .zip(carries.par_iter())
        .enumerate()
        .for_each(|(k, ((hb, pa), carry))| {
            if k == 0 {
                return;
            }
            for (j, (h, a)) in hb.iter_mut().zip(pa).enumerate() {
                *h += a * carry[j % lanes];
            }
        });
    Ok(Tensor::from_vec(
        vec![t_len, d],
        readout(&states, c.data(), t_len, d, n),
    )?)
}
