//! Reference implementations used as test oracles. Nothing here calls into
//! the code paths it is used to check.
#![allow(dead_code)]

pub mod suite;

use alignmamba::params::{Bound, ParamStore};
use alignmamba::tensor::{Tape, Tensor};
use rand::Rng;

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `|a - n| / max(|a|, |n|)` over whole vectors, in the 2-norm.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `point`, one input vector at a time.
pub fn fd_grad(f: &dyn Fn(&[Vec<f64>]) -> f64, point: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut g = vec![0.0; point[i].len()];
        for j in 0..point[i].len() {
            let orig = x[i][j];
            x[i][j] = orig + h;
            let up = f(&x);
            x[i][j] = orig - h;
            let down = f(&x);
            x[i][j] = orig;
            g[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Fixed pseudo-random projection weights, so a gradient check on a
/// tensor-valued function sees every output.
pub fn probe_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| ((k as f64 + 1.0) * 0.618_033_988_75).fract() - 0.5)
        .collect()
}

/// Worst relative error between tape gradients and central differences of
/// `sum(f(inputs) * w)` for fixed weights `w`.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor) -> f64 {
    gradcheck_against(inputs, &f, &f)
}

/// Tape gradients of `tracked` against central differences of `reference`,
/// both projected on the same weights.
pub fn gradcheck_against(
    inputs: &[Tensor],
    tracked: impl Fn(&[Tensor]) -> Tensor,
    reference: impl Fn(&[Tensor]) -> Tensor,
) -> f64 {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let ts: Vec<Tensor> = vals
            .iter()
            .zip(&shapes)
            .map(|(v, s)| Tensor::from_vec(s.clone(), v.clone()).unwrap())
            .collect();
        let out = reference(&ts);
        let w = probe_weights(out.numel());
        out.data().iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let point: Vec<Vec<f64>> = inputs.iter().map(|t| t.to_vec()).collect();
    let numeric = fd_grad(&eval, &point, 1e-6);

    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = tracked(&leaves);
    let w = Tensor::from_vec(out.shape().to_vec(), probe_weights(out.numel())).unwrap();
    let loss = out.mul(&w).unwrap().sum_all().unwrap();
    let grads = tape.backward(&loss).unwrap();
    leaves
        .iter()
        .zip(&numeric)
        .map(|(l, n)| {
            let a = grads.get(l).unwrap_or_else(|| vec![0.0; l.numel()]);
            rel_err(&a, n)
        })
        .fold(0.0, f64::max)
}

/// [`gradcheck`] for a layer: differentiates with respect to every
/// parameter in `store` and the input `x`, with finite-difference step `h`.
/// Some parameters (the state matrix, step-size weights) get gradients near
/// 1e-8, where rounding in a 1e-6 step swamps the difference, so layers
/// need a larger step than [`gradcheck`].
pub fn layer_gradcheck(
    store: &ParamStore,
    x: &Tensor,
    h: f64,
    f: impl Fn(&Bound, &Tensor) -> Tensor,
) -> f64 {
    let ids: Vec<_> = store.ids().collect();
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut s = store.clone();
        for (id, v) in ids.iter().zip(vals) {
            s.set(*id, v.clone());
        }
        let xv = Tensor::from_vec(x.shape().to_vec(), vals[ids.len()].clone()).unwrap();
        let out = f(&s.bind(), &xv);
        let w = probe_weights(out.numel());
        out.data().iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let mut point: Vec<Vec<f64>> = ids.iter().map(|&id| store.value(id).to_vec()).collect();
    point.push(x.to_vec());
    let numeric = fd_grad(&eval, &point, h);

    let tape = Tape::new();
    let p = store.bind_on(&tape);
    let xl = tape.leaf(x.clone());
    let out = f(&p, &xl);
    let w = Tensor::from_vec(out.shape().to_vec(), probe_weights(out.numel())).unwrap();
    let grads = tape
        .backward(&out.mul(&w).unwrap().sum_all().unwrap())
        .unwrap();
    let mut tracked: Vec<Tensor> = p.tensors().to_vec();
    tracked.push(xl);
    tracked
        .iter()
        .zip(&numeric)
        .map(|(t, n)| rel_err(&grads.get(t).unwrap_or_else(|| vec![0.0; t.numel()]), n))
        .fold(0.0, f64::max)
}

/// All permutations of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

/// Exact OT cost between two uniform measures of equal size `n`: an
/// optimal coupling sits at a permutation matrix, so the minimum over all
/// `n!` assignments is the optimum.
pub fn exact_ot(cost: &[f64], n: usize) -> f64 {
    permutations(n)
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(i, &j)| cost[i * n + j])
                .sum::<f64>()
                / n as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// Optimal value of `<P, C> - eps * H(P)` over couplings of two uniform
/// measures, `H(P) = -sum P log P`, by plain Sinkhorn on the Gibbs kernel.
/// `cost` is row-major `[n, m]`.
pub fn entropic_ot(cost: &[f64], n: usize, m: usize, eps: f64) -> f64 {
    let k: Vec<f64> = cost.iter().map(|c| (-c / eps).exp()).collect();
    let (mut u, mut v) = (vec![1.0; n], vec![1.0; m]);
    for _ in 0..20_000 {
        for i in 0..n {
            let s: f64 = (0..m).map(|j| k[i * m + j] * v[j]).sum();
            u[i] = (1.0 / n as f64) / s;
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| k[i * m + j] * u[i]).sum();
            v[j] = (1.0 / m as f64) / s;
        }
    }
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = u[i] * k[i * m + j] * v[j];
            value += p * cost[i * m + j] + eps * p * p.ln();
        }
    }
    value
}

/// Biased squared MMD with `k(x, y) = exp(-gamma |x - y|^2)`, as a plain
/// triple loop.
pub fn naive_mmd(x: &[Vec<f64>], y: &[Vec<f64>], gamma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        (-gamma * a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>()).exp()
    };
    let mean = |u: &[Vec<f64>], v: &[Vec<f64>]| {
        let mut s = 0.0;
        for a in u {
            for b in v {
                s += k(a, b);
            }
        }
        s / (u.len() * v.len()) as f64
    };
    mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
}

/// `1 - cos(x_i, y_j)` entry by entry.
pub fn cosine_cost_naive(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut out = Vec::new();
    for a in x {
        for b in y {
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            out.push(1.0 - dot / (norm(a) * norm(b)));
        }
    }
    out
}

/// The diagonal selective SSM recurrence written out directly:
/// `h = exp(delta * a) * h + delta * b * u`, `y = <c, h>`.
///
/// `u, delta: [T][D]`, `a: [D][N]`, `b, c: [T][N]`; returns `[T][D]`.
pub fn unrolled_scan(
    u: &[Vec<f64>],
    delta: &[Vec<f64>],
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    c: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let (d, n) = (a.len(), a[0].len());
    let mut h = vec![vec![0.0; n]; d];
    let mut ys = Vec::with_capacity(u.len());
    for t in 0..u.len() {
        let mut y = vec![0.0; d];
        for ch in 0..d {
            for s in 0..n {
                h[ch][s] =
                    (delta[t][ch] * a[ch][s]).exp() * h[ch][s] + delta[t][ch] * b[t][s] * u[t][ch];
                y[ch] += c[t][s] * h[ch][s];
            }
        }
        ys.push(y);
    }
    ys
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}
