//! Log-domain Sinkhorn with geometric ε-scaling, for uniform marginals.

use serde::{Deserialize, Serialize};

use super::{AlignError, CostMatrix};

/// Coupling between two uniform token measures.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values
            .chunks(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.values.chunks(self.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Largest deviation of a row or column sum from its uniform target.
    pub fn marginal_violation(&self) -> f64 {
        let a = 1.0 / self.rows as f64;
        let b = 1.0 / self.cols as f64;
        let r = self.row_sums().into_iter().map(|s| (s - a).abs());
        let c = self.col_sums().into_iter().map(|s| (s - b).abs());
        r.chain(c).fold(0.0, f64::max)
    }

    /// `<P, C>_F`
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        self.values.iter().zip(c.values()).map(|(p, c)| p * c).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornOptions {
    /// Iteration cap at the final ε.
    pub max_iter: usize,
    /// Target max marginal violation at the final ε.
    pub tol: f64,
    /// Iterations spent at each intermediate ε.
    pub stage_iter: usize,
    /// Whether hitting `max_iter` is an error. When false the last iterate
    /// is rounded onto the feasible set and returned.
    pub fail_on_cap: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            max_iter: 1000,
            tol: 1e-6,
            stage_iter: 10,
            fail_on_cap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtSolution {
    /// `<P, C>`; the entropy term is not included.
    pub distance: f64,
    pub plan: TransportPlan,
    /// Iterations at the final ε.
    pub iterations: usize,
    /// Violation before the plan was rounded onto the feasible set.
    pub violation: f64,
}

/// The ε values visited: `max(C)`, halved each stage, ending at `blur`.
pub fn epsilon_schedule(max_cost: f64, blur: f64) -> Vec<f64> {
    let mut eps = Vec::new();
    let mut e = max_cost;
    while e > blur {
        eps.push(e);
        e *= 0.5;
    }
    eps.push(blur);
    eps
}

fn logsumexp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

struct Potentials<'a> {
    c: &'a CostMatrix,
    f: Vec<f64>,
    g: Vec<f64>,
    log_a: f64,
    log_b: f64,
}

impl Potentials<'_> {
    fn step(&mut self, eps: f64) {
        let (m, n) = (self.c.rows(), self.c.cols());
        let cv = self.c.values();
        for i in 0..m {
            let row = &cv[i * n..(i + 1) * n];
            let g = &self.g;
            self.f[i] =
                eps * self.log_a - eps * logsumexp(row.iter().zip(g).map(|(c, g)| (g - c) / eps));
        }
        for j in 0..n {
            let f = &self.f;
            self.g[j] =
                eps * self.log_b - eps * logsumexp((0..m).map(|i| (f[i] - cv[i * n + j]) / eps));
        }
    }

    fn plan(&self, eps: f64) -> Vec<f64> {
        let n = self.c.cols();
        self.c
            .values()
            .iter()
            .enumerate()
            .map(|(k, c)| ((self.f[k / n] + self.g[k % n] - c) / eps).exp())
            .collect()
    }

    /// Columns are exact after `step`; only rows can be off.
    fn row_violation(&self, plan: &[f64]) -> f64 {
        let a = self.log_a.exp();
        plan.chunks(self.c.cols())
            .map(|r| (r.iter().sum::<f64>() - a).abs())
            .fold(0.0, f64::max)
    }
}

/// Projects a near-feasible plan onto the uniform transport polytope
/// (Altschuler, Weed & Rigollet 2017, Algorithm 2).
fn round_to_feasible(p: &mut [f64], m: usize, n: usize) {
    let (a, b) = (1.0 / m as f64, 1.0 / n as f64);
    for row in p.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        if s > a {
            row.iter_mut().for_each(|v| *v *= a / s);
        }
    }
    let mut cols = vec![0.0; n];
    for row in p.chunks(n) {
        cols.iter_mut().zip(row).for_each(|(c, v)| *c += v);
    }
    for row in p.chunks_mut(n) {
        for (v, &s) in row.iter_mut().zip(&cols) {
            if s > b {
                *v *= b / s;
            }
        }
    }
    let err_r: Vec<f64> = p.chunks(n).map(|r| a - r.iter().sum::<f64>()).collect();
    let mut err_c = vec![b; n];
    for row in p.chunks(n) {
        err_c.iter_mut().zip(row).for_each(|(c, v)| *c -= v);
    }
    let total: f64 = err_r.iter().sum();
    if total > 0.0 {
        for (i, row) in p.chunks_mut(n).enumerate() {
            for (v, ec) in row.iter_mut().zip(&err_c) {
                *v += err_r[i] * ec / total;
            }
        }
    }
}

/// Entropic OT between uniform measures on the rows and columns of `c`,
/// with final regularization `blur`.
pub fn sinkhorn_ot(c: &CostMatrix, blur: f64) -> Result<(f64, TransportPlan), AlignError> {
    let sol = sinkhorn_with(c, blur, &SinkhornOptions::default())?;
    Ok((sol.distance, sol.plan))
}

pub fn sinkhorn_with(
    c: &CostMatrix,
    blur: f64,
    opts: &SinkhornOptions,
) -> Result<OtSolution, AlignError> {
    if !(blur > 0.0 && blur.is_finite()) {
        return Err(AlignError::InvalidConfig(format!(
            "blur must be positive, got {blur}"
        )));
    }
    let (m, n) = (c.rows(), c.cols());
    if m == 1 || n == 1 {
        // a single row or column admits exactly one coupling
        let values = vec![1.0 / (m * n) as f64; m * n];
        let plan = TransportPlan {
            rows: m,
            cols: n,
            values,
        };
        return Ok(OtSolution {
            distance: plan.cost(c),
            plan,
            iterations: 0,
            violation: 0.0,
        });
    }

    let mut pot = Potentials {
        c,
        f: vec![0.0; m],
        g: vec![0.0; n],
        log_a: -(m as f64).ln(),
        log_b: -(n as f64).ln(),
    };
    let schedule = epsilon_schedule(c.max(), blur);
    let (&eps, stages) = schedule.split_last().expect("schedule is nonempty");
    for &e in stages {
        for _ in 0..opts.stage_iter {
            pot.step(e);
        }
    }
    let mut violation = f64::INFINITY;
    let mut iterations = 0;
    let mut plan = Vec::new();
    while iterations < opts.max_iter {
        pot.step(eps);
        iterations += 1;
        plan = pot.plan(eps);
        violation = pot.row_violation(&plan);
        if violation < opts.tol {
            break;
        }
    }
    if !(violation < opts.tol) && (opts.fail_on_cap || !violation.is_finite()) {
        return Err(AlignError::NotConverged {
            iterations,
            violation,
        });
    }
    round_to_feasible(&mut plan, m, n);
    let plan = TransportPlan {
        rows: m,
        cols: n,
        values: plan,
    };
    Ok(OtSolution {
        distance: plan.cost(c),
        plan,
        iterations,
        violation,
    })
}
