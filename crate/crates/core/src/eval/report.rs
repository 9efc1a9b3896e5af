use std::fmt::Write as _;

use serde::Serialize;

use super::metrics::{argmax, topk_accuracy, ConfusionMatrix};
use super::predict::{predict_video, VideoPrediction};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::store::{EmbeddingStore, Manifest, Split};

/// Classes ordered by descending train-split frequency (ties by id); the first
/// `⌈C/2⌉` are common, the rest rare.
pub fn split_common_rare(manifest: &Manifest) -> (Vec<usize>, Vec<usize>) {
    let mut counts = vec![0usize; manifest.class_count()];
    for r in manifest.records_in(Split::Train) {
        counts[r.class_id] += 1;
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(counts[c]), c));
    let rare = order.split_off(counts.len().div_ceil(2));
    (order, rare)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub view: String,
    pub samples: usize,
    pub balanced_acc: f64,
    pub top1: f64,
    pub top5: f64,
    /// `k` used for `top5`; smaller than 5 when there are fewer classes.
    pub top5_k: usize,
    pub classes_present: usize,
    pub common_balanced_acc: Option<f64>,
    pub rare_balanced_acc: Option<f64>,
    pub confusion: ConfusionMatrix,
}

impl ViewMetrics {
    pub fn from_predictions(
        view: &str,
        preds: &[&VideoPrediction],
        classes: usize,
        common: &[usize],
        rare: &[usize],
    ) -> Result<Self> {
        let confusion = ConfusionMatrix::from_pairs(classes, preds.iter().map(|p| (p.class_id, p.predicted)));
        let logits: Vec<Vec<f32>> = preds.iter().map(|p| p.logits.clone()).collect();
        let labels: Vec<usize> = preds.iter().map(|p| p.class_id).collect();
        let k = classes.min(5);
        Ok(Self {
            view: view.to_string(),
            samples: preds.len(),
            balanced_acc: confusion.balanced_accuracy()?,
            top1: topk_accuracy(&logits, &labels, 1)?,
            top5: topk_accuracy(&logits, &labels, k)?,
            top5_k: k,
            classes_present: confusion.recalls().len(),
            common_balanced_acc: confusion.balanced_accuracy_over(common).ok(),
            rare_balanced_acc: confusion.balanced_accuracy_over(rare).ok(),
            confusion,
        })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_opt<'a>(values: impl Iterator<Item = &'a Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.map(|x| *x).collect::<Option<Vec<_>>>()?;
    (!v.is_empty()).then(|| mean(v.into_iter()))
}

/// Unweighted mean over novel views.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossView {
    pub views: Vec<String>,
    pub balanced_acc: f64,
    pub top1: f64,
    pub top5: f64,
    pub common_balanced_acc: Option<f64>,
    pub rare_balanced_acc: Option<f64>,
}

impl CrossView {
    pub fn from_views(views: &[&ViewMetrics]) -> Option<Self> {
        if views.is_empty() {
            return None;
        }
        Some(Self {
            views: views.iter().map(|v| v.view.clone()).collect(),
            balanced_acc: mean(views.iter().map(|v| v.balanced_acc)),
            top1: mean(views.iter().map(|v| v.top1)),
            top5: mean(views.iter().map(|v| v.top5)),
            common_balanced_acc: mean_opt(views.iter().map(|v| &v.common_balanced_acc)),
            rare_balanced_acc: mean_opt(views.iter().map(|v| &v.rare_balanced_acc)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub head: String,
    pub trained_view: String,
    pub classes: Vec<String>,
    pub common_classes: Vec<usize>,
    pub rare_classes: Vec<usize>,
    /// One entry per view present in the test split, in manifest order.
    pub views: Vec<ViewMetrics>,
    /// All test videos pooled across views.
    pub overall: ViewMetrics,
    pub cross_view: Option<CrossView>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn view(&self, name: &str) -> Option<&ViewMetrics> {
        self.views.iter().find(|v| v.view == name)
    }

    pub fn trained(&self) -> Option<&ViewMetrics> {
        self.view(&self.trained_view)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Flat per-view table for plotting.
    pub fn to_csv(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("view,role,samples,balanced_acc,top1,top5,common_balanced_acc,rare_balanced_acc\n");
        let mut row = |view: &str, role: &str, samples: String, b: f64, t1: f64, t5: f64, c: Option<f64>, r: Option<f64>| {
            let _ = writeln!(
                out,
                "{view},{role},{samples},{b:.6},{t1:.6},{t5:.6},{},{}",
                fmt_opt(c),
                fmt_opt(r)
            );
        };
        for v in &self.views {
            let role = if v.view == self.trained_view { "trained" } else { "novel" };
            row(&v.view, role, v.samples.to_string(), v.balanced_acc, v.top1, v.top5, v.common_balanced_acc, v.rare_balanced_acc);
        }
        let o = &self.overall;
        row("all", "overall", o.samples.to_string(), o.balanced_acc, o.top1, o.top5, o.common_balanced_acc, o.rare_balanced_acc);
        if let Some(c) = &self.cross_view {
            row("cross_view", "novel_mean", String::new(), c.balanced_acc, c.top1, c.top5, c.common_balanced_acc, c.rare_balanced_acc);
        }
        out
    }
}

/// Builds the report from already computed predictions.
pub fn report_from_predictions(
    model: &Model,
    manifest: &Manifest,
    trained_view: &str,
    preds: &[VideoPrediction],
) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Data("no test predictions".into()));
    }
    let classes = manifest.class_count();
    let (common, rare) = split_common_rare(manifest);
    let mut warnings = Vec::new();
    let present: Vec<String> = manifest
        .views
        .iter()
        .filter(|v| preds.iter().any(|p| &p.view == *v))
        .cloned()
        .collect();
    let mut views = Vec::new();
    for view in &present {
        let subset: Vec<&VideoPrediction> = preds.iter().filter(|p| &p.view == view).collect();
        views.push(ViewMetrics::from_predictions(view, &subset, classes, &common, &rare)?);
    }
    if !present.iter().any(|v| v == trained_view) {
        warnings.push(format!("trained view `{trained_view}` has no test records"));
    }
    let novel: Vec<&ViewMetrics> = views.iter().filter(|v| v.view != trained_view).collect();
    let cross_view = CrossView::from_views(&novel);
    if cross_view.is_none() {
        warnings.push("no novel view in the test split; cross-view section is empty".into());
    }
    for v in &views {
        if v.classes_present < classes {
            warnings.push(format!(
                "view `{}`: {} of {classes} classes have test samples; absent classes are excluded from balanced accuracy",
                v.view, v.classes_present
            ));
        }
    }
    let all: Vec<&VideoPrediction> = preds.iter().collect();
    Ok(EvalReport {
        dataset: manifest.dataset.clone(),
        head: if model.config.clip_level {
            "clip_level".into()
        } else {
            model.config.head.kind.name().into()
        },
        trained_view: trained_view.to_string(),
        classes: manifest.classes.clone(),
        common_classes: common.clone(),
        rare_classes: rare.clone(),
        overall: ViewMetrics::from_predictions("all", &all, classes, &common, &rare)?,
        views,
        cross_view,
        warnings,
    })
}

/// Predicts every test video (manifest order) and aggregates per view.
pub fn evaluate(model: &Model, store: &EmbeddingStore, trained_view: &str) -> Result<EvalReport> {
    let manifest = store.manifest();
    check_classes(model, manifest)?;
    let records: Vec<_> = manifest.records_in(Split::Test).collect();
    if records.is_empty() {
        return Err(Error::Data("manifest has no `test` split records to evaluate".into()));
    }
    let preds = records
        .into_iter()
        .map(|r| predict_video(model, store, r))
        .collect::<Result<Vec<_>>>()?;
    report_from_predictions(model, manifest, trained_view, &preds)
}

pub(crate) fn check_classes(model: &Model, manifest: &Manifest) -> Result<()> {
    if model.config.classes != manifest.class_count() {
        return Err(Error::Data(format!(
            "model predicts {} classes, manifest has {}",
            model.config.classes,
            manifest.class_count()
        )));
    }
    if model.config.head.model_dim != manifest.dim as usize {
        return Err(Error::Data(format!(
            "model expects dim {}, manifest has {}",
            model.config.head.model_dim, manifest.dim
        )));
    }
    Ok(())
}

/// One exported row: mean fused feature over the eval clips, view, label, prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportRow {
    pub feature: Vec<f32>,
    pub view: String,
    pub class_id: usize,
    pub prediction: usize,
}

pub fn export_embeddings(model: &Model, store: &EmbeddingStore) -> Result<Vec<ExportRow>> {
    let manifest = store.manifest();
    check_classes(model, manifest)?;
    let records: Vec<_> = manifest.records_in(Split::Test).collect();
    if records.is_empty() {
        return Err(Error::Data("manifest has no `test` split records to export".into()));
    }
    records
        .into_iter()
        .map(|r| {
            let p = predict_video(model, store, r)?;
            Ok(ExportRow {
                prediction: argmax(&p.logits),
                feature: p.feature,
                view: p.view,
                class_id: p.class_id,
            })
        })
        .collect()
}

pub fn export_csv(rows: &[ExportRow]) -> String {
    let dim = rows.first().map_or(0, |r| r.feature.len());
    let mut out = String::new();
    for i in 0..dim {
        let _ = write!(out, "f{i},");
    }
    out.push_str("view,class_id,prediction\n");
    for r in rows {
        for v in &r.feature {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{},{}", r.view, r.class_id, r.prediction);
    }
    out
}
