use std::ops::Range;
use std::sync::Arc;

use super::tape::record;
use super::{invalid, numel, Result, Tensor, TensorError};

/// How an operand's elements map onto the broadcast output.
#[derive(Clone)]
enum Operand {
    Same,
    Scalar,
    Gather(Arc<Vec<usize>>),
}

impl Operand {
    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Operand::Same => i,
            Operand::Scalar => 0,
            Operand::Gather(map) => map[i],
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn gather_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let src_strides = strides(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut map = Vec::with_capacity(numel(out));
    let mut idx = vec![0usize; out.len()];
    for _ in 0..numel(out) {
        map.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum());
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Operand, Operand)> {
    if a == b {
        return Ok((a.to_vec(), Operand::Same, Operand::Same));
    }
    let (na, nb) = (numel(a), numel(b));
    if nb == 1 && (na != 1 || a.len() >= b.len()) {
        return Ok((a.to_vec(), Operand::Same, Operand::Scalar));
    }
    if na == 1 {
        return Ok((b.to_vec(), Operand::Scalar, Operand::Same));
    }
    let mismatch = || TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        out.push(match (x, y) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch()),
        });
    }
    let oa = if a == out.as_slice() {
        Operand::Same
    } else {
        Operand::Gather(Arc::new(gather_map(a, &out)))
    };
    let ob = if b == out.as_slice() {
        Operand::Same
    } else {
        Operand::Gather(Arc::new(gather_map(b, &out)))
    };
    Ok((out, oa, ob))
}

type Partial = fn(f64, f64, f64) -> f64;

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
    da: Partial,
    db: Partial,
) -> Result<Tensor> {
    let (shape, ia, ib) = broadcast(op, &a.shape, &b.shape)?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match (&ia, &ib) {
        (Operand::Same, Operand::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        _ => (0..numel(&shape))
            .map(|i| f(ad[ia.index(i)], bd[ib.index(i)]))
            .collect(),
    };
    let (sa, sb) = (a.shared_data(), b.shared_data());
    let out_keep = data.clone();
    record(op, &[a, b], shape, data, move |g, needs| {
        let mut ga = needs[0].then(|| vec![0.0; sa.len()]);
        let mut gb = needs[1].then(|| vec![0.0; sb.len()]);
        for (i, &gi) in g.iter().enumerate() {
            let (ja, jb) = (ia.index(i), ib.index(i));
            let (x, y, o) = (sa[ja], sb[jb], out_keep[i]);
            if let Some(ga) = ga.as_mut() {
                ga[ja] += gi * da(x, y, o);
            }
            if let Some(gb) = gb.as_mut() {
                gb[jb] += gi * db(x, y, o);
            }
        }
        vec![ga, gb]
    })
}

fn unary<F, D>(op: &'static str, a: &Tensor, f: F, df: D) -> Result<Tensor>
where
    F: Fn(f64) -> f64,
    D: Fn(f64, f64) -> f64 + Send + 'static,
{
    let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
    let src = a.shared_data();
    let out_keep = data.clone();
    record(op, &[a], a.shape.clone(), data, move |g, _| {
        let ga = g
            .iter()
            .zip(src.iter().zip(&out_keep))
            .map(|(gi, (&x, &o))| gi * df(x, o))
            .collect();
        vec![Some(ga)]
    })
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return invalid(
            op,
            format!("axis {axis} out of range for shape {:?}", t.shape),
        );
    }
    Ok(())
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            "add",
            self,
            other,
            |x, y| x + y,
            |_, _, _| 1.0,
            |_, _, _| 1.0,
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            "sub",
            self,
            other,
            |x, y| x - y,
            |_, _, _| 1.0,
            |_, _, _| -1.0,
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary("mul", self, other, |x, y| x * y, |_, y, _| y, |x, _, _| x)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            "div",
            self,
            other,
            |x, y| x / y,
            |_, y, _| 1.0 / y,
            |x, y, _| -x / (y * y),
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary("exp", self, f64::exp, |_, o| o)
    }

    pub fn log(&self) -> Result<Tensor> {
        unary("log", self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        unary("softplus", self, softplus, |x, _| sigmoid(x))
    }

    pub fn silu(&self) -> Result<Tensor> {
        unary("silu", self, silu, |x, _| silu_grad(x))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary("sigmoid", self, sigmoid, |_, o| o * (1.0 - o))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        unary("tanh", self, f64::tanh, |_, o| 1.0 - o * o)
    }

    pub fn neg(&self) -> Result<Tensor> {
        unary("neg", self, |x| -x, |_, _| -1.0)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&self) -> Result<Tensor> {
        unary("abs", self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        unary("sqrt", self, f64::sqrt, |_, o| 0.5 / o)
    }

    pub fn square(&self) -> Result<Tensor> {
        unary("square", self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(&self, k: f64) -> Result<Tensor> {
        unary("scale", self, |x| k * x, move |_, _| k)
    }

    pub fn add_scalar(&self, k: f64) -> Result<Tensor> {
        unary("add_scalar", self, |x| x + k, |_, _| 1.0)
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Result<Tensor> {
        unary(
            "clamp_min",
            self,
            |x| x.max(floor),
            move |x, _| if x > floor { 1.0 } else { 0.0 },
        )
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum(&self, axes: &[usize]) -> Result<Tensor> {
        for &ax in axes {
            check_axis("sum", self, ax)?;
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let map = Arc::new(gather_map(&out_shape, &self.shape));
        let mut data = vec![0.0; numel(&out_shape)];
        for (i, &v) in self.data().iter().enumerate() {
            data[map[i]] += v;
        }
        let n_in = self.numel();
        record("sum", &[self], out_shape, data, move |g, _| {
            vec![Some((0..n_in).map(|i| g[map[i]]).collect())]
        })
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Tensor> {
        let count: usize = axes
            .iter()
            .map(|&a| self.shape.get(a).copied().unwrap_or(1))
            .product();
        if count == 0 {
            return invalid("mean", "mean over an empty axis");
        }
        self.sum(axes)?.scale(1.0 / count as f64)
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        record("sum", &[self], vec![], vec![total], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return invalid("mean", "mean of an empty tensor");
        }
        self.sum_all()?.scale(1.0 / self.numel() as f64)
    }

    /// Like [`Tensor::sum_all`], but adds the elements in ascending order, so
    /// the result depends only on the multiset of values.
    pub fn sum_all_sorted(&self) -> Result<Tensor> {
        let mut v = self.to_vec();
        v.sort_by(f64::total_cmp);
        let total: f64 = v.iter().sum();
        let n = self.numel();
        record("sum_sorted", &[self], vec![], vec![total], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all_sorted(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return invalid("mean", "mean of an empty tensor");
        }
        self.sum_all_sorted()?.scale(1.0 / self.numel() as f64)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self, axis)?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let s = out.clone();
        record("softmax", &[self], self.shape.clone(), out, move |g, _| {
            let mut gx = vec![0.0; s.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * s[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = s[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("log_softmax", self, axis)?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (x[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = x[at(j)] - lse;
                }
            }
        }
        let ls = out.clone();
        record(
            "log_softmax",
            &[self],
            self.shape.clone(),
            out,
            move |g, _| {
                let mut gx = vec![0.0; ls.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let gsum: f64 = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = g[at(j)] - ls[at(j)].exp() * gsum;
                        }
                    }
                }
                vec![Some(gx)]
            },
        )
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return invalid("concat", "no tensors to concatenate");
        };
        check_axis("concat", first, axis)?;
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        record("concat", &refs, shape, data, move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = lens
                .iter()
                .zip(needs)
                .map(|(&len, &need)| need.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gp, &len) in grads.iter_mut().zip(&lens) {
                    let block = &g[pos..pos + len * inner];
                    if let Some(gp) = gp {
                        gp.extend_from_slice(block);
                    }
                    pos += len * inner;
                }
            }
            grads
        })
    }

    /// Sub-block selected by one half-open range per axis.
    pub fn slice(&self, ranges: &[Range<usize>]) -> Result<Tensor> {
        if ranges.len() != self.rank() {
            return invalid(
                "slice",
                format!("{} ranges for rank-{} tensor", ranges.len(), self.rank()),
            );
        }
        for (ax, (r, &d)) in ranges.iter().zip(&self.shape).enumerate() {
            if r.start > r.end || r.end > d {
                return invalid(
                    "slice",
                    format!("range {r:?} out of bounds for axis {ax} of size {d}"),
                );
            }
        }
        let shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let src_strides = strides(&self.shape);
        let offset: usize = ranges
            .iter()
            .zip(&src_strides)
            .map(|(r, s)| r.start * s)
            .sum();
        // flat source index of every output element
        let mut map = Vec::with_capacity(numel(&shape));
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..numel(&shape) {
            map.push(
                offset
                    + idx
                        .iter()
                        .zip(&src_strides)
                        .map(|(i, s)| i * s)
                        .sum::<usize>(),
            );
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let src = self.data();
        let data = map.iter().map(|&j| src[j]).collect();
        let n_in = self.numel();
        record("slice", &[self], shape, data, move |g, _| {
            let mut gx = vec![0.0; n_in];
            for (gi, &j) in g.iter().zip(&map) {
                gx[j] += gi;
            }
            vec![Some(gx)]
        })
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn rows(&self, range: Range<usize>) -> Result<Tensor> {
        if self.rank() != 2 {
            return invalid("rows", format!("expected rank 2, got {:?}", self.shape));
        }
        self.slice(&[range, 0..self.shape[1]])
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn cols(&self, range: Range<usize>) -> Result<Tensor> {
        if self.rank() != 2 {
            return invalid("cols", format!("expected rank 2, got {:?}", self.shape));
        }
        self.slice(&[0..self.shape[0], range])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        record("reshape", &[self], shape.to_vec(), self.to_vec(), |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return invalid(
                "transpose",
                format!("expected rank 2, got {:?}", self.shape),
            );
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let src = self.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        record("transpose", &[self], vec![c, r], data, move |g, _| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(gx)]
        })
    }

    /// For a `[R, C]` tensor, selects column `index[r]` of every row r,
    /// giving `[R, 1]`.
    pub fn pick(&self, index: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || index.len() != self.shape[0] {
            return invalid(
                "pick",
                format!("{} indices for shape {:?}", index.len(), self.shape),
            );
        }
        let c = self.shape[1];
        if let Some(bad) = index.iter().find(|&&j| j >= c) {
            return invalid("pick", format!("column {bad} out of range for {c} columns"));
        }
        let src = self.data();
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &j)| src[r * c + j])
            .collect();
        let index = index.to_vec();
        let n_in = self.numel();
        record("pick", &[self], vec![index.len(), 1], data, move |g, _| {
            let mut gx = vec![0.0; n_in];
            for (r, &j) in index.iter().enumerate() {
                gx[r * c + j] = g[r];
            }
            vec![Some(gx)]
        })
    }
}
