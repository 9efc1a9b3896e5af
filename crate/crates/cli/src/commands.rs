use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fusion_probe::checkpoint;
use fusion_probe::eval::{evaluate, export_csv, export_embeddings, EvalReport};
use fusion_probe::gradsuite::{check_all_heads, check_probe, SuiteConfig};
use fusion_probe::store::{validate_manifest, EmbeddingStore, Manifest};
use fusion_probe::synth::{generate, SynthConfig};
use fusion_probe::train::{log_jsonl, train as train_head, TrainRun};
use fusion_probe::Error;

use crate::config::RunConfig;
use crate::{Failure, EXIT_NUMERICAL, EXIT_VALIDATION};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

/// Loads and validates a manifest; any issue is a validation failure.
fn open_store(path: &Path) -> Result<EmbeddingStore, Failure> {
    let manifest = Manifest::load(path)?;
    validate_manifest(&manifest).map_err(|e| Failure {
        code: EXIT_VALIDATION,
        message: e.to_string(),
    })?;
    Ok(EmbeddingStore::new(manifest))
}

pub fn validate(manifest: &Path) -> Result<(), Failure> {
    let manifest = Manifest::load(manifest)?;
    match validate_manifest(&manifest) {
        Ok(report) => {
            print!("{report}");
            println!("ok");
            Ok(())
        }
        Err(errors) => Err(Failure {
            code: EXIT_VALIDATION,
            message: errors.to_string(),
        }),
    }
}

pub fn synth(bench: Option<&str>, config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let cfg = match (bench, config) {
        (Some("order"), None) => SynthConfig::order_bench(),
        (Some("shift"), None) => SynthConfig::shift_bench(),
        (Some(other), None) => return Err(Failure::usage(format!("unknown bench `{other}` (expected order or shift)"))),
        (None, Some(path)) => SynthConfig::load(path).map_err(|e| Failure::usage(e.to_string()))?,
        _ => return Err(Failure::usage("give exactly one of --bench or --config")),
    };
    cfg.validate()?;
    let manifest = generate(&cfg, out)?;
    println!(
        "wrote {} videos of `{}` to {}",
        manifest.records.len(),
        manifest.dataset,
        out.display()
    );
    Ok(())
}

fn write_run(dir: &Path, run: &TrainRun) -> Result<(), Failure> {
    checkpoint::save(&run.best, &dir.join("best.fpck"))?;
    checkpoint::save(&run.last, &dir.join("final.fpck"))?;
    write(&dir.join("train_log.jsonl"), log_jsonl(&run.log)?)
}

fn run_summary(run: &TrainRun) -> String {
    let last = run.log.last().expect("at least one epoch");
    format!(
        "{} epochs, final loss {:.4}, train acc {:.3}, best epoch {}",
        run.log.len(),
        last.loss,
        last.train_acc,
        run.best_epoch
    )
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let store = open_store(cfg.manifest()?)?;
    let out = cfg.out()?;
    create_dir(out)?;
    write(&out.join("config.json"), serde_json::to_string_pretty(cfg).map_err(Error::from)? + "\n")?;
    let run = train_head(&store, &cfg.head, &cfg.train, cfg.trained_view.as_deref())?;
    write_run(out, &run)?;
    println!("{}: {}", cfg.head.kind, run_summary(&run));
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<(), Failure> {
    write(&dir.join("report.json"), report.to_json()?)?;
    write(&dir.join("report.csv"), report.to_csv())
}

fn print_report(report: &EvalReport) {
    for v in &report.views {
        let role = if v.view == report.trained_view { "trained" } else { "novel" };
        println!(
            "{:<12} {:<8} balanced {:.4}  top1 {:.4}  top{} {:.4}",
            v.view, role, v.balanced_acc, v.top1, v.top5_k, v.top5
        );
    }
    if let Some(c) = &report.cross_view {
        println!("{:<12} {:<8} balanced {:.4}  top1 {:.4}", "cross_view", "mean", c.balanced_acc, c.top1);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

pub fn eval(checkpoint_path: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    let model = checkpoint::load(checkpoint_path)?;
    let store = open_store(cfg.manifest()?)?;
    let report = evaluate(&model, &store, cfg.trained_view()?)?;
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        write_report(out, &report)?;
    }
    print_report(&report);
    Ok(())
}

pub const SWEEP_METRICS: [&str; 3] = ["balanced_acc", "top1", "top5"];

/// Rows `head,view,metric,value`: every head × test view × metric.
pub fn sweep_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("head,view,metric,value\n");
    for r in reports {
        for v in &r.views {
            for (metric, value) in SWEEP_METRICS.iter().zip([v.balanced_acc, v.top1, v.top5]) {
                let _ = writeln!(out, "{},{},{metric},{value:.6}", r.head, v.view);
            }
        }
    }
    out
}

pub fn sweep(cfg: &RunConfig) -> Result<(), Failure> {
    if cfg.heads.is_empty() {
        return Err(Failure::usage("the head list is empty"));
    }
    let store = open_store(cfg.manifest()?)?;
    let trained_view = cfg.trained_view()?;
    let out = cfg.out()?;
    create_dir(out)?;
    write(&out.join("config.json"), serde_json::to_string_pretty(cfg).map_err(Error::from)? + "\n")?;
    let mut reports = Vec::new();
    for &kind in &cfg.heads {
        let mut head = cfg.head.clone();
        head.kind = kind;
        let run = train_head(&store, &head, &cfg.train, Some(trained_view))?;
        let report = evaluate(&run.best, &store, trained_view)?;
        let dir = out.join(kind.name());
        create_dir(&dir)?;
        write_run(&dir, &run)?;
        write_report(&dir, &report)?;
        let cross = report.cross_view.as_ref().map(|c| c.balanced_acc);
        println!(
            "{:<20} overall {:.4}  trained {:.4}  cross_view {}",
            kind.name(),
            report.overall.balanced_acc,
            report.trained().map_or(f64::NAN, |v| v.balanced_acc),
            cross.map_or("-".to_string(), |c| format!("{c:.4}")),
        );
        reports.push(report);
    }
    write(&out.join("sweep.csv"), sweep_csv(&reports))
}

pub fn export(checkpoint_path: &Path, manifest: &Path, out: &Path) -> Result<(), Failure> {
    let model = checkpoint::load(checkpoint_path)?;
    let store = open_store(manifest)?;
    let rows = export_embeddings(&model, &store)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(out, export_csv(&rows))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

pub fn gradcheck(seeds: u64) -> Result<(), Failure> {
    let suite = SuiteConfig::default();
    let mut failed = 0;
    for check in check_all_heads(seeds, &suite)? {
        println!(
            "{:<20} seed {}  max rel err {:.3e}  {}",
            check.kind.name(),
            check.seed,
            check.report.max_relative_error,
            if check.passed { "ok" } else { "FAIL" }
        );
        failed += usize::from(!check.passed);
    }
    for seed in 0..seeds {
        let report = check_probe(seed, suite.dim, suite.classes)?;
        let passed = report.passed(suite.tolerance);
        println!(
            "{:<20} seed {seed}  max rel err {:.3e}  {}",
            "probe",
            report.max_relative_error,
            if passed { "ok" } else { "FAIL" }
        );
        failed += usize::from(!passed);
    }
    if failed > 0 {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("{failed} gradient checks exceeded relative error {}", suite.tolerance),
        });
    }
    Ok(())
}
