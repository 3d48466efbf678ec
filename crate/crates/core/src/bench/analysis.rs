use std::collections::BTreeMap;
use std::fmt;

use super::{BenchSample, KernelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Growth {
    Linear,
    Quadratic,
}

impl Growth {
    /// Accepted `t(2T) / t(T)` range.
    pub fn doubling_range(self) -> (f64, f64) {
        match self {
            Growth::Linear => (1.5, 2.8),
            Growth::Quadratic => (3.0, 6.0),
        }
    }
}

impl fmt::Display for Growth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Growth::Linear => "linear",
            Growth::Quadratic => "quadratic",
        })
    }
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub length: usize,
    pub median_ms: f64,
    pub median_peak_bytes: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSummary {
    pub kernel: KernelKind,
    /// Lengths that completed, ascending.
    pub points: Vec<Point>,
    pub oom_at: Option<usize>,
}

impl KernelSummary {
    pub fn at(&self, length: usize) -> Option<&Point> {
        self.points.iter().find(|p| p.length == length)
    }

    /// Least-squares slope of `log(time)` against `log(length)`.
    pub fn time_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .map(|p| (p.length as f64, p.median_ms))
            .collect();
        loglog_slope(&pts)
    }
}

/// Per-kernel medians, in first-seen kernel order.
pub fn summarize(samples: &[BenchSample]) -> Vec<KernelSummary> {
    let mut order = Vec::new();
    let mut cells: BTreeMap<(KernelKind, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut oom: BTreeMap<KernelKind, usize> = BTreeMap::new();
    for s in samples {
        if !order.contains(&s.kernel) {
            order.push(s.kernel);
        }
        if s.oom {
            let e = oom.entry(s.kernel).or_insert(s.length);
            *e = (*e).min(s.length);
            continue;
        }
        let c = cells.entry((s.kernel, s.length)).or_default();
        c.0.push(s.time_ms);
        c.1.push(s.peak_bytes as f64);
    }
    order
        .into_iter()
        .map(|kernel| KernelSummary {
            kernel,
            points: cells
                .iter_mut()
                .filter(|((k, _), _)| *k == kernel)
                .map(|((_, length), (t, b))| Point {
                    length: *length,
                    median_ms: median(t),
                    median_peak_bytes: median(b),
                })
                .collect(),
            oom_at: oom.get(&kernel).copied(),
        })
        .collect()
}

/// Least-squares slope in log-log space; `None` with fewer than two
/// distinct positive points.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "ok" } else { "FAILED" };
        write!(f, "{tag:>6}  {}: {}", self.name, self.detail)
    }
}

fn check(name: String, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

pub const MIN_SLOPE_GAP: f64 = 0.7;
pub const MIN_MEMORY_GROWTH_4X: f64 = 8.0;
/// Doubling ratios are checked from this length up when the sweep reaches
/// it, and over every doubling otherwise.
pub const DOUBLING_FROM: usize = 4096;

/// `(T, 2T)` pairs among the completed lengths.
fn doublings(s: &KernelSummary) -> Vec<(usize, f64)> {
    let all: Vec<(usize, f64)> = s
        .points
        .iter()
        .filter_map(|p| {
            s.at(2 * p.length)
                .map(|q| (p.length, q.median_ms / p.median_ms))
        })
        .collect();
    let large: Vec<_> = all
        .iter()
        .copied()
        .filter(|(t, _)| *t >= DOUBLING_FROM)
        .collect();
    if large.is_empty() {
        all
    } else {
        large
    }
}

/// Scaling checks for a sweep, given the growth each kernel is claimed to
/// have. Kernels without a tag are only checked for monotonicity.
pub fn check_trends(samples: &[BenchSample], tags: &[(KernelKind, Growth)]) -> Vec<Check> {
    let summaries = summarize(samples);
    let tag_of = |k: KernelKind| tags.iter().find(|(t, _)| *t == k).map(|(_, g)| *g);
    let mut out = Vec::new();

    for s in &summaries {
        let bad: Vec<usize> = s
            .points
            .windows(2)
            .filter(|w| w[1].median_ms < w[0].median_ms)
            .map(|w| w[1].length)
            .collect();
        out.push(check(
            format!("{} monotone time", s.kernel),
            bad.is_empty(),
            if bad.is_empty() {
                format!("{} lengths", s.points.len())
            } else {
                format!("median time drops at {bad:?}")
            },
        ));

        let Some(growth) = tag_of(s.kernel) else {
            continue;
        };
        let (lo, hi) = growth.doubling_range();
        let ratios = doublings(s);
        let ok = !ratios.is_empty() && ratios.iter().all(|(_, r)| (lo..=hi).contains(r));
        let shown: Vec<String> = ratios
            .iter()
            .map(|(t, r)| format!("{t}->{}: {r:.2}", 2 * t))
            .collect();
        out.push(check(
            format!("{} doubling ratio ({growth})", s.kernel),
            ok,
            format!("want [{lo}, {hi}], got [{}]", shown.join(", ")),
        ));

        if growth == Growth::Quadratic {
            let base = s.points.first();
            let grown = base.and_then(|b| s.at(4 * b.length));
            let (ok, detail) = match (base, grown) {
                (Some(b), Some(g)) => {
                    let r = g.median_peak_bytes / b.median_peak_bytes;
                    (
                        r >= MIN_MEMORY_GROWTH_4X,
                        format!(
                            "peak({}) / peak({}) = {r:.2}, want >= {MIN_MEMORY_GROWTH_4X}",
                            g.length, b.length
                        ),
                    )
                }
                _ => (false, "no completed pair (T, 4T)".to_string()),
            };
            out.push(check(
                format!("{} memory at 4x length", s.kernel),
                ok,
                detail,
            ));
        }
    }

    for q in summaries
        .iter()
        .filter(|s| tag_of(s.kernel) == Some(Growth::Quadratic))
    {
        for l in summaries
            .iter()
            .filter(|s| tag_of(s.kernel) == Some(Growth::Linear))
        {
            let (ok, detail) = match (q.time_slope(), l.time_slope()) {
                (Some(sq), Some(sl)) => (
                    sq - sl >= MIN_SLOPE_GAP,
                    format!(
                        "{sq:.3} - {sl:.3} = {:.3}, want >= {MIN_SLOPE_GAP}",
                        sq - sl
                    ),
                ),
                _ => (false, "too few completed lengths to fit".to_string()),
            };
            out.push(check(
                format!("slope gap {} vs {}", q.kernel, l.kernel),
                ok,
                detail,
            ));
        }
    }
    out
}
