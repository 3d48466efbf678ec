//! CSV and SVG output for sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::analysis::summarize;
use super::{BenchError, BenchSample, KernelKind};

pub const CSV_HEADER: &str = "kernel,length,trial,time_ms,peak_bytes,oom";

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> BenchError + '_ {
    move |source| BenchError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn emit_csv(samples: &[BenchSample], path: &Path) -> Result<(), BenchError> {
    if samples.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for s in samples {
        w.serialize(s).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchSample>, BenchError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let found = r
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if found != CSV_HEADER {
        return Err(BenchError::Header {
            path: path.to_path_buf(),
            found,
        });
    }
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(csv_err(path))
}

const W: f64 = 720.0;
const H: f64 = 480.0;
const MARGIN: f64 = 64.0;

fn color(k: KernelKind) -> &'static str {
    match k {
        KernelKind::MambaFusion => "#1f77b4",
        KernelKind::MoeMambaFusion => "#2ca02c",
        KernelKind::AttentionFusion => "#d62728",
    }
}

struct Axis {
    lo: f64,
    hi: f64,
    from: f64,
    to: f64,
}

impl Axis {
    /// Log scale over `[lo, hi]`, padded to whole decades.
    fn log(lo: f64, hi: f64, from: f64, to: f64) -> Axis {
        let lo = lo.log10().floor();
        let hi = hi.log10().ceil().max(lo + 1.0);
        Axis { lo, hi, from, to }
    }

    fn map(&self, v: f64) -> f64 {
        self.from + (v.log10() - self.lo) / (self.hi - self.lo) * (self.to - self.from)
    }
}

/// Log-log chart of median time against length, one polyline per kernel.
/// A kernel that ran out of memory gets an `x` marker at that length on the
/// top edge.
pub fn emit_svg(samples: &[BenchSample], path: &Path) -> Result<(), BenchError> {
    if samples.is_empty() {
        return Err(BenchError::Empty);
    }
    let svg = render_svg(samples);
    fs::write(path, svg).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn render_svg(samples: &[BenchSample]) -> String {
    let summaries = summarize(samples);
    let lengths = samples.iter().map(|s| s.length as f64);
    let (lmin, lmax) = lengths.fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let times = summaries
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.median_ms.max(1e-6)));
    let (tmin, tmax) = times.fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let (tmin, tmax) = if tmin.is_finite() {
        (tmin, tmax)
    } else {
        (1.0, 10.0)
    };
    let x = Axis::log(lmin, lmax, MARGIN, W - MARGIN);
    let y = Axis::log(tmin, tmax, H - MARGIN, MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for d in (x.lo as i32)..=(x.hi as i32) {
        let px = x.map(10f64.powi(d));
        let _ = writeln!(
            s,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">1e{d}</text>"#,
            H - MARGIN + 18.0
        );
    }
    for d in (y.lo as i32)..=(y.hi as i32) {
        let py = y.map(10f64.powi(d));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{py:.1}" text-anchor="end">1e{d}</text>"#,
            MARGIN - 6.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">sequence length</text>"#,
        W / 2.0,
        H - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">median time (ms)</text>"#,
        H / 2.0,
        H / 2.0
    );

    for (i, k) in summaries.iter().enumerate() {
        let c = color(k.kernel);
        let pts: Vec<String> = k
            .points
            .iter()
            .map(|p| {
                format!(
                    "{:.1},{:.1}",
                    x.map(p.length as f64),
                    y.map(p.median_ms.max(1e-6))
                )
            })
            .collect();
        let _ = writeln!(s, r#"<g class="series" data-kernel="{}">"#, k.kernel);
        if !pts.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (px, py) = p.split_once(',').expect("formatted pair");
                let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{c}"/>"#);
            }
        }
        if let Some(t) = k.oom_at {
            let (px, py) = (x.map(t as f64), MARGIN);
            let _ = writeln!(
                s,
                r#"<path class="oom" d="M{:.1} {:.1} L{:.1} {:.1} M{:.1} {:.1} L{:.1} {:.1}" stroke="{c}" stroke-width="2"/>"#,
                px - 5.0,
                py - 5.0,
                px + 5.0,
                py + 5.0,
                px - 5.0,
                py + 5.0,
                px + 5.0,
                py - 5.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" fill="{c}">OOM</text>"#,
                px + 8.0,
                py + 4.0
            );
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{c}" stroke-width="2"/>"#,
            MARGIN + 12.0,
            MARGIN + 32.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            MARGIN + 38.0,
            ly + 4.0,
            k.kernel
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}
