//! End-to-end acceptance gate. Each criterion prints one PASS or FAIL line;
//! the test fails at the end if any criterion failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fusion_probe::autodiff::Tensor;
use fusion_probe::eval::{argmax, mean_of, predict_video, random_baseline, topk_accuracy, ConfusionMatrix};
use fusion_probe::fusion::{FusionHead, FusionHeadConfig, FusionKind};
use fusion_probe::gradsuite::{check_all_heads, SuiteConfig};
use fusion_probe::store::{EmbeddingStore, SampleMode, Split};
use fusion_probe::synth::{generate, oracle_accuracy, SynthConfig};
use fusion_probe::train::{adamw_update, cosine_lr, AdamWConfig};
use fusion_probe::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn fprobe(args: &[&str]) -> Result<Duration, String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_fprobe"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(start.elapsed())
    } else {
        Err(format!("fprobe {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn random_clip(rng: &mut ChaCha8Rng, t: usize, n: usize, d: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![t, n, d], |_| rng.random_range(-2.0f32..2.0))
}

fn head(kind: FusionKind, d: usize, seed: u64, positions: bool) -> (FusionHead, fusion_probe::fusion::ParamSet) {
    let cfg = FusionHeadConfig {
        num_heads: 2,
        seed,
        use_positions: positions,
        ..FusionHeadConfig::new(kind, d)
    };
    FusionHead::new(&cfg).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks = check_all_heads(3, &SuiteConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.report.max_relative_error).fold(0.0, f64::max);
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| format!("{}@{}", c.kind, c.seed)).collect();
    check(
        checks.len() == 13 * 3 && failed.is_empty() && elapsed < Duration::from_secs(60),
        format!("{} checks, worst rel err {worst:.2e}, {:.1}s, failed {failed:?}", checks.len(), elapsed.as_secs_f64()),
    )
}

fn identity_at_init() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = Vec::new();
    for i in 0..10 {
        let x = random_clip(&mut rng, 16, 5, 16);
        for (attn, pool) in [(FusionKind::SelfAttnAllAvg, FusionKind::AvgPool), (FusionKind::SelfAttnAllMax, FusionKind::MaxPool)] {
            let (ha, pa) = head(attn, 16, i, true);
            let (hp, pp) = head(pool, 16, i, true);
            let a = ha.fuse(&pa, &x, Some(0)).unwrap();
            let b = hp.fuse(&pp, &x, Some(0)).unwrap();
            if !a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()) {
                mismatches.push(format!("{attn}#{i}"));
            }
        }
    }
    check(mismatches.is_empty(), format!("10 clips x 2 pairs, mismatches {mismatches:?}"))
}

fn permutation_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (t, n, d) = (6, 5, 8);
    let x = random_clip(&mut rng, t, n, d);
    let order = [3, 0, 5, 1, 4, 2];
    let row = n * d;
    let permuted: Vec<f32> = order.iter().flat_map(|&f| x.data()[f * row..][..row].to_vec()).collect();
    let y = Tensor::new(vec![t, n, d], permuted).unwrap();

    let (mut worst_invariant, mut weakest_witness) = (0.0f32, f32::INFINITY);
    for kind in FusionKind::ALL {
        let (h, mut p) = head(kind, d, 4, false);
        for v in p.iter_mut().flat_map(|p| p.value.data_mut().iter_mut()) {
            *v += rng.random_range(-0.5f32..0.5);
        }
        let diff = h.fuse(&p, &x, Some(0)).unwrap().max_abs_diff(&h.fuse(&p, &y, Some(0)).unwrap());
        if kind.is_sequential() {
            weakest_witness = weakest_witness.min(diff);
        } else {
            worst_invariant = worst_invariant.max(diff);
        }
    }
    check(
        worst_invariant < 1e-5 && weakest_witness > 1e-3,
        format!("invariant heads max diff {worst_invariant:.1e}, lstm/tcn min diff {weakest_witness:.3}"),
    )
}

fn random_baseline_rows() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (classes, seed) in [(34, 1), (33, 2)] {
        let b = random_baseline(classes, 10_000, seed).map_err(|e| e.to_string())?;
        let chance = 1.0 / classes as f64;
        ok &= (b.top1 - chance).abs() <= 0.01 && (b.balanced - chance).abs() <= 0.01;
        parts.push(format!("C={classes} top1 {:.2}% balanced {:.2}%", 100.0 * b.top1, 100.0 * b.balanced));
    }
    check(ok, parts.join(", "))
}

fn order_bench(work: &Path) -> Outcome {
    let data = work.join("order");
    let out = work.join("order_sweep");
    let mut elapsed = fprobe(&["synth", "--bench", "order", "--out", s(&data)])?;
    elapsed += fprobe(&[
        "sweep", "--manifest", s(&data.join("manifest.json")), "--config", s(&configs().join("order_sweep.json")),
        "--out", s(&out),
    ])?;
    let mut ok = elapsed < Duration::from_secs(120);
    let mut parts = Vec::new();
    for kind in [FusionKind::AvgPool, FusionKind::MaxPool, FusionKind::SelfAttnAllAvg, FusionKind::Lstm] {
        let report = read_json(&out.join(kind.to_string()).join("report.json"));
        let acc = report["overall"]["balanced_acc"].as_f64().unwrap();
        let band = oracle_accuracy("order_bench", kind).map_err(|e| e.to_string())?;
        ok &= band.contains(acc);
        parts.push(format!("{kind} {acc:.3}"));
    }
    check(ok, format!("{}, {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

fn shift_bench(work: &Path) -> Outcome {
    let data = work.join("shift");
    let out = work.join("shift_sweep");
    fprobe(&["synth", "--bench", "shift", "--out", s(&data)])?;
    fprobe(&[
        "sweep", "--manifest", s(&data.join("manifest.json")), "--config", s(&configs().join("shift_sweep.json")),
        "--out", s(&out),
    ])?;
    let shipped = read_json(&configs().join("shift_sweep.json"));
    let mut ok = true;
    let mut parts = Vec::new();
    for name in shipped["heads"].as_array().unwrap() {
        let kind: FusionKind = name.as_str().unwrap().parse().map_err(|e| format!("{e}"))?;
        let report = read_json(&out.join(kind.to_string()).join("report.json"));
        let trained_view = report["trained_view"].as_str().unwrap();
        let trained = report["views"]
            .as_array()
            .unwrap()
            .iter()
            .find(|v| v["view"] == trained_view)
            .and_then(|v| v["balanced_acc"].as_f64())
            .unwrap();
        let novel = report["cross_view"]["balanced_acc"].as_f64().unwrap();
        let band = oracle_accuracy("shift_bench", kind).map_err(|e| e.to_string())?;
        ok &= trained >= novel && band.contains(trained - novel);
        parts.push(format!("{kind} {trained:.2}/{novel:.2}"));
    }
    check(ok && parts.len() == 13, format!("trained/novel: {}", parts.join(", ")))
}

fn oracle_topk(logits: &[Vec<f32>], labels: &[usize], k: usize) -> f64 {
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(l, y)| {
            let mut ids: Vec<usize> = (0..l.len()).collect();
            ids.sort_by(|&a, &b| l[b].partial_cmp(&l[a]).unwrap().then(a.cmp(&b)));
            ids[..k].contains(y)
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn oracle_balanced(classes: usize, labels: &[usize], predicted: &[usize]) -> f64 {
    let recalls: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let total = labels.iter().filter(|&&y| y == c).count();
            let right = labels.iter().zip(predicted).filter(|(&y, &p)| y == c && p == c).count();
            (total > 0).then(|| right as f64 / total as f64)
        })
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

fn metric_oracle(work: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut disagreements = 0;
    for _ in 0..200 {
        let classes = rng.random_range(2..=12);
        let n = rng.random_range(1..=60);
        let logits: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..classes).map(|_| rng.random_range(0..4) as f32 * 0.5).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let predicted: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
        let cm = ConfusionMatrix::from_pairs(classes, labels.iter().copied().zip(predicted.iter().copied()));
        let k5 = classes.min(5);
        let same = topk_accuracy(&logits, &labels, 1).unwrap() == oracle_topk(&logits, &labels, 1)
            && topk_accuracy(&logits, &labels, k5).unwrap() == oracle_topk(&logits, &labels, k5)
            && cm.balanced_accuracy().unwrap() == oracle_balanced(classes, &labels, &predicted);
        disagreements += usize::from(!same);
    }

    let mut cfg = SynthConfig::shift_bench();
    cfg.videos_per_class_per_view = 4;
    cfg.split.train = 2;
    cfg.split.val = 1;
    cfg.frames = 20;
    let store = EmbeddingStore::new(generate(&cfg, &work.join("metric")).map_err(|e| e.to_string())?);
    let mut worst = 0.0f64;
    for (kind, seed) in [(FusionKind::CrossAttnAll, 1), (FusionKind::Lstm, 2), (FusionKind::SelfAttnClsMax, 3)] {
        let head = FusionHeadConfig {
            num_heads: 4,
            seed,
            ..FusionHeadConfig::new(kind, 32)
        };
        let model = Model::new(ModelConfig::new(head, 4)).unwrap();
        for record in store.manifest().records_in(Split::Test).take(4) {
            let p = predict_video(&model, &store, record).unwrap();
            let clips = store.sample(record, &model.config.sampling, SampleMode::EvalEquidistant, 0).unwrap();
            if clips.len() != 3 {
                return Err(format!("expected 3 clips, got {}", clips.len()));
            }
            let per_clip: Vec<Tensor<f32>> = clips.iter().map(|c| model.logits(c).unwrap()).collect();
            let mut sum = vec![0.0f64; 4];
            for l in &per_clip {
                sum.iter_mut().zip(l.data()).for_each(|(s, v)| *s += f64::from(*v));
            }
            for (got, s) in p.logits.iter().zip(&sum) {
                worst = worst.max((f64::from(*got) - s / 3.0).abs());
            }
            let mean = mean_of(&per_clip).unwrap();
            worst = worst.max(mean.iter().zip(&p.logits).map(|(a, b)| f64::from((a - b).abs())).fold(0.0, f64::max));
        }
    }
    check(
        disagreements == 0 && worst < 1e-6,
        format!("200 sets, {disagreements} disagreements; 3-clip averaging max err {worst:.1e}"),
    )
}

fn schedule_and_optimizer() -> Outcome {
    let total = 900;
    let trace = [0, total / 2, total].map(|step| cosine_lr(step, total, 1e-3, 0.0).unwrap());
    let cosine_ok = trace[0] == 1e-3 && (trace[1] - 5e-4).abs() < 1e-18 && trace[2] == 0.0;

    let cfg = AdamWConfig::default();
    let grads = [0.3, -1.2, 0.05];
    let lr = 1e-3;
    let (mut p_ref, mut m_ref, mut v_ref) = (1.5f64, 0.0, 0.0);
    let (mut p, mut m, mut v) = ([1.5f64], [0.0], [0.0]);
    let mut worst = 0.0f64;
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        p_ref -= lr * cfg.weight_decay * p_ref;
        m_ref = cfg.beta1 * m_ref + (1.0 - cfg.beta1) * g;
        v_ref = cfg.beta2 * v_ref + (1.0 - cfg.beta2) * g * g;
        let m_hat = m_ref / (1.0 - cfg.beta1.powi(t));
        let v_hat = v_ref / (1.0 - cfg.beta2.powi(t));
        p_ref -= lr * m_hat / (v_hat.sqrt() + cfg.eps);

        adamw_update(&mut p, &[*g], &mut m, &mut v, t as u64, lr, true, &cfg);
        worst = worst.max((p[0] - p_ref).abs());
    }
    check(
        cosine_ok && worst < 1e-7,
        format!("lr trace {trace:?}; AdamW 3-step max err {worst:.1e}"),
    )
}

fn determinism(work: &Path) -> Outcome {
    let manifest = work.join("order/manifest.json");
    let run = |dir: &Path| {
        fprobe(&[
            "train", "--manifest", s(&manifest), "--head", "self_attn_all_avg", "--trained-view", "front",
            "--epochs", "3", "--seed", "7", "--out", s(dir),
        ])
    };
    let (a, b) = (work.join("det_a"), work.join("det_b"));
    run(&a)?;
    run(&b)?;
    let mut differing = Vec::new();
    for file in ["best.fpck", "final.fpck", "train_log.jsonl"] {
        if std::fs::read(a.join(file)).unwrap() != std::fs::read(b.join(file)).unwrap() {
            differing.push(file);
        }
    }
    check(differing.is_empty(), format!("two runs, differing files {differing:?}"))
}

#[test]
fn acceptance() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let criteria: [(&str, Box<dyn Fn() -> Outcome>); 9] = [
        ("gradient suite", Box::new(gradient_suite)),
        ("identity at init", Box::new(identity_at_init)),
        ("permutation properties", Box::new(permutation_properties)),
        ("random baseline", Box::new(random_baseline_rows)),
        ("order bench", Box::new(|| order_bench(w))),
        ("shift bench", Box::new(|| shift_bench(w))),
        ("metric oracle", Box::new(|| metric_oracle(w))),
        ("schedule and optimizer", Box::new(schedule_and_optimizer)),
        ("determinism", Box::new(|| determinism(w))),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(detail) => {
                println!("FAIL criterion {}: {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
