use std::fs;
use std::path::{Path, PathBuf};

use alignmamba::bench::{self, BenchError, Growth, KernelKind, SweepConfig, DEFAULT_LENGTHS};
use alignmamba::data::{generate, load_dataset, save_dataset, DataError, Dataset, Split};
use alignmamba::model::{
    evaluate, load_checkpoint, save_checkpoint, train_with, write_metrics_csv, AlignMamba,
    EvalResult, ModelError,
};
use serde::Serialize;

use crate::config::{check_compatible, RunConfig};
use crate::{CliError, SweepParam};

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    load_dataset(dir).map_err(usage)
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false)
}

pub fn gen_data(config: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let ds = generate(&cfg.data).map_err(usage)?;
    save_dataset(&ds, out, Some(&cfg.data), force).map_err(|e| match e {
        DataError::DirNotEmpty(_) => usage(e),
        e => failed(e),
    })?;
    let count = |s| ds.indices(s).len();
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        ds.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

const TRAIN_OUTPUTS: [&str; 4] = ["manifest.json", "params", "metrics.csv", "config.json"];

/// Refuses a non-empty directory without `force`; with it, removes only
/// files a previous training run wrote.
fn prepare_train_dir(out: &Path, force: bool) -> Result<(), CliError> {
    if is_nonempty_dir(out) {
        if !force {
            return Err(usage(format!(
                "{} exists and is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
        for name in TRAIN_OUTPUTS {
            let p = out.join(name);
            let res = if p.is_dir() {
                fs::remove_dir_all(&p)
            } else if p.exists() {
                fs::remove_file(&p)
            } else {
                Ok(())
            };
            res.map_err(|e| failed(format!("{}: {e}", p.display())))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| failed(format!("{}: {e}", out.display())))
}

pub fn train(config: &Path, data: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let ds = load_data(data)?;
    let model_cfg = cfg.effective_model();
    check_compatible(&model_cfg, &ds)?;
    prepare_train_dir(out, force)?;

    let mut model = AlignMamba::new(model_cfg, cfg.train.seed).map_err(usage)?;
    let report = train_with(&mut model, &ds, &cfg.train, |m| {
        if m.split == Split::Val {
            eprintln!(
                "epoch {:>3}  val task {:.4}  ot {:.4}  mmd {:.4}  acc {:.3}",
                m.epoch, m.loss_task, m.loss_ot, m.loss_mmd, m.accuracy
            );
        }
    })
    .map_err(|e| match e {
        ModelError::Config(_) => usage(e),
        e => failed(e),
    })?;

    save_checkpoint(&model, out).map_err(failed)?;
    write_metrics_csv(&out.join("metrics.csv"), &report.metrics).map_err(failed)?;
    let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, json + "\n")
        .map_err(|e| failed(format!("{}: {e}", cfg_path.display())))?;

    let last = |split| {
        report
            .metrics
            .iter()
            .rev()
            .find(|m| m.split == split)
            .map(|m| m.accuracy)
    };
    println!(
        "trained {} epochs{}; train accuracy {}, val accuracy {}",
        report.epochs_run,
        if report.stopped_early {
            " (early stop)"
        } else {
            ""
        },
        last(Split::Train).unwrap_or(f64::NAN),
        last(Split::Val).unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, split: &str) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint).map_err(usage)?;
    let ds = load_data(data)?;
    check_compatible(&model.config, &ds)
        .map_err(|e| usage(format!("checkpoint does not fit this dataset: {e}")))?;
    let split = Split::parse(split).ok_or_else(|| usage(format!("unknown split {split:?}")))?;
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(usage(format!("split {} is empty", split.name())));
    }
    let r = evaluate(&model, &samples).map_err(failed)?;
    println!("split {}", split.name());
    println!("samples {}", samples.len());
    println!("accuracy {}", r.accuracy);
    println!("f1 {}", r.f1);
    Ok(())
}

pub struct SweepArgs {
    pub config: PathBuf,
    pub param: SweepParam,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    param: &'static str,
    value: f64,
    accuracy: f64,
    f1: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn train_and_validate(cfg: &RunConfig, ds: &Dataset, seed: u64) -> Result<EvalResult, CliError> {
    let mut model = AlignMamba::new(cfg.effective_model(), seed).map_err(usage)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    train_with(&mut model, ds, &train_cfg, |_| {}).map_err(failed)?;
    evaluate(&model, &ds.split(Split::Val)).map_err(failed)
}

pub fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    if args.out.exists() && !args.force {
        return Err(usage(format!(
            "{} exists (pass --force to overwrite)",
            args.out.display()
        )));
    }
    let ds = match &args.data {
        Some(dir) => load_data(dir)?,
        None => generate(&cfg.data).map_err(usage)?,
    };
    check_compatible(&cfg.effective_model(), &ds)?;
    let seeds = if args.seeds.is_empty() {
        (0..3).map(|k| cfg.train.seed.wrapping_add(k)).collect()
    } else {
        args.seeds.clone()
    };

    let mut rows = Vec::with_capacity(args.grid.len());
    for &value in &args.grid {
        let mut c = cfg.clone();
        match args.param {
            SweepParam::LambdaOt => c.model.align.lambda_ot = value,
            SweepParam::LambdaMmd => c.model.align.lambda_mmd = value,
        }
        c.validate()
            .map_err(|e| usage(format!("--grid value {value}: {e}")))?;
        let (mut acc, mut f1) = (Vec::new(), Vec::new());
        for &seed in &seeds {
            let r = train_and_validate(&c, &ds, seed)?;
            eprintln!(
                "{} = {value}  seed {seed}  val accuracy {}  f1 {}",
                args.param.name(),
                r.accuracy,
                r.f1
            );
            acc.push(r.accuracy);
            f1.push(r.f1);
        }
        rows.push(SweepRow {
            param: args.param.name(),
            value,
            accuracy: median(acc),
            f1: median(f1),
        });
    }

    let mut w = csv::Writer::from_path(&args.out)
        .map_err(|e| failed(format!("{}: {e}", args.out.display())))?;
    for r in &rows {
        w.serialize(r)
            .map_err(|e| failed(format!("{}: {e}", args.out.display())))?;
        println!("{},{},{},{}", r.param, r.value, r.accuracy, r.f1);
    }
    w.flush()
        .map_err(|e| failed(format!("{}: {e}", args.out.display())))
}

pub struct BenchArgs {
    pub kernels: Vec<KernelKind>,
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub d_model: usize,
    pub mem_budget_mib: usize,
    pub seed: u64,
    pub csv: Option<PathBuf>,
    pub svg: Option<PathBuf>,
    pub check: bool,
    pub tags: Vec<(KernelKind, Growth)>,
}

pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let cfg = SweepConfig {
        kernels: if args.kernels.is_empty() {
            KernelKind::ALL.to_vec()
        } else {
            args.kernels.clone()
        },
        lengths: if args.lengths.is_empty() {
            DEFAULT_LENGTHS.to_vec()
        } else {
            args.lengths.clone()
        },
        trials: args.trials,
        d_model: args.d_model,
        mem_budget: (args.mem_budget_mib > 0).then(|| args.mem_budget_mib << 20),
        seed: args.seed,
        ..SweepConfig::default()
    };
    let samples = bench::run_sweep_with(&cfg, |s| {
        if s.oom {
            eprintln!("{} T={}: out of memory", s.kernel, s.length);
        }
    })
    .map_err(|e| match e {
        BenchError::InvalidConfig(_) => usage(e),
        e => failed(e),
    })?;

    println!(
        "{:<18} {:>7} {:>12} {:>14}",
        "kernel", "length", "median_ms", "median_peak_mib"
    );
    for s in bench::summarize(&samples) {
        for p in &s.points {
            println!(
                "{:<18} {:>7} {:>12.3} {:>14.2}",
                s.kernel.name(),
                p.length,
                p.median_ms,
                p.median_peak_bytes / (1u64 << 20) as f64
            );
        }
        if let Some(t) = s.oom_at {
            println!("{:<18} {:>7} {:>12} {:>14}", s.kernel.name(), t, "OOM", "-");
        }
    }
    if let Some(p) = &args.csv {
        bench::emit_csv(&samples, p).map_err(failed)?;
    }
    if let Some(p) = &args.svg {
        bench::emit_svg(&samples, p).map_err(failed)?;
    }

    if args.check {
        let tags: Vec<(KernelKind, Growth)> = cfg
            .kernels
            .iter()
            .map(|&k| {
                let g = args
                    .tags
                    .iter()
                    .rev()
                    .find(|(t, _)| *t == k)
                    .map_or(k.expected_growth(), |(_, g)| *g);
                (k, g)
            })
            .collect();
        let checks = bench::check_trends(&samples, &tags);
        for c in &checks {
            println!("{c}");
        }
        let bad = checks.iter().filter(|c| !c.passed).count();
        if bad > 0 {
            return Err(failed(format!(
                "{bad} of {} trend checks failed",
                checks.len()
            )));
        }
    }
    Ok(())
}
