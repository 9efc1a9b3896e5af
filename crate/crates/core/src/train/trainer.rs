use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{AdamW, AdamWConfig};
use super::schedule::cosine_lr;
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::eval::{argmax, predict_video, ConfusionMatrix};
use crate::fusion::FusionHeadConfig;
use crate::model::{Model, ModelConfig};
use crate::store::{ClipSampling, EmbeddingStore, SampleMode, Split, TokenClip, VideoRecord, WindowLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub frames_per_clip: usize,
    pub eta_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Random training clips drawn from each video per epoch.
    pub clips_per_video: usize,
    pub window: WindowLayout,
    /// Equidistant clips averaged at evaluation time.
    pub eval_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.02,
            epochs: 60,
            batch_size: 32,
            frames_per_clip: 16,
            eta_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            shuffle: true,
            clips_per_video: 1,
            window: WindowLayout::Contiguous,
            eval_clips: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("frames_per_clip", self.frames_per_clip),
            ("clips_per_video", self.clips_per_video),
            ("eval_clips", self.eval_clips),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0 && self.eta_min >= 0.0) {
            return Err(Error::Config("lr and eps must be positive, weight_decay and eta_min non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn sampling(&self) -> ClipSampling {
        ClipSampling {
            num_clips: self.eval_clips,
            frames_per_clip: self.frames_per_clip,
            window: self.window,
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub val_balanced_acc: Option<f64>,
}

pub fn log_jsonl(log: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Highest validation balanced accuracy (earliest epoch on ties); the final model when there is no validation split.
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub log: Vec<EpochRecord>,
    /// Learning rate used at every optimizer step.
    pub lr_trace: Vec<f64>,
}

/// Training records of the train split, restricted to `view` when given.
pub fn training_records<'a>(store: &'a EmbeddingStore, view: Option<&str>) -> Vec<&'a VideoRecord> {
    store
        .manifest()
        .records_in(Split::Train)
        .filter(|r| view.is_none_or(|v| r.view == v))
        .collect()
}

pub fn model_config_for(store: &EmbeddingStore, head: &FusionHeadConfig, cfg: &TrainConfig) -> Result<ModelConfig> {
    let manifest = store.manifest();
    let mut head = head.clone();
    let dim = manifest.dim as usize;
    if head.model_dim == 0 {
        head.model_dim = dim;
    } else if head.model_dim != dim {
        return Err(Error::Config(format!(
            "head model_dim {} does not match the manifest dim {dim}",
            head.model_dim
        )));
    }
    Ok(ModelConfig {
        head,
        classes: manifest.class_count(),
        clip_level: manifest.is_clip_level,
        sampling: cfg.sampling(),
    })
}

fn balanced_on(model: &Model, store: &EmbeddingStore, records: &[&VideoRecord]) -> Result<Option<f64>> {
    if records.is_empty() {
        return Ok(None);
    }
    let mut confusion = ConfusionMatrix::new(model.config.classes);
    for r in records {
        confusion.add(r.class_id, predict_video(model, store, r)?.predicted);
    }
    confusion.balanced_accuracy().map(Some)
}

struct Accumulator {
    grads: Vec<Option<Tensor<f32>>>,
    loss: f64,
    correct: usize,
}

fn accumulate(model: &Model, clip: &TokenClip, acc: &mut Accumulator) -> Result<()> {
    let g = Graph::<f32>::new();
    let vars = model.params.bind(&g, true);
    let out = model.forward(&vars, g.constant(clip.tokens.clone()), clip.cls_index)?;
    let loss = out.logits.cross_entropy(clip.class_id)?;
    acc.loss += f64::from(loss.value().data()[0]);
    if argmax(out.logits.value().data()) == clip.class_id {
        acc.correct += 1;
    }
    let grads = g.backward(loss)?;
    for (slot, var) in acc.grads.iter_mut().zip(&vars) {
        let Some(gr) = grads.wrt(*var) else { continue };
        match slot {
            Some(total) => {
                for (t, v) in total.data_mut().iter_mut().zip(gr.data()) {
                    *t += v;
                }
            }
            None => *slot = Some(gr.clone()),
        }
    }
    Ok(())
}

/// Trains a fusion head and probe on the train split (optionally one view only).
pub fn train(
    store: &EmbeddingStore,
    head: &FusionHeadConfig,
    cfg: &TrainConfig,
    view: Option<&str>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let records = training_records(store, view);
    if records.is_empty() {
        return Err(Error::Data(match view {
            Some(v) => format!("no `train` split records for view `{v}`"),
            None => "manifest has no `train` split records".into(),
        }));
    }
    let val: Vec<&VideoRecord> = store
        .manifest()
        .records_in(Split::Val)
        .filter(|r| view.is_none_or(|v| r.view == v))
        .collect();

    let mut model = Model::new(model_config_for(store, head, cfg)?)?;
    let mut opt = AdamW::new(&model.params, cfg.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clip_sampling = ClipSampling {
        num_clips: 1,
        ..cfg.sampling()
    };
    let per_epoch = records.len() * cfg.clips_per_video;
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut lr_trace = Vec::with_capacity(total_steps);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<(usize, u64)> = (0..per_epoch)
            .map(|i| (i / cfg.clips_per_video, rng.random::<u64>()))
            .collect();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut correct) = (0.0, 0);
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = Accumulator {
                grads: vec![None; model.params.len()],
                loss: 0.0,
                correct: 0,
            };
            for &(idx, clip_seed) in batch {
                let clip = store
                    .sample(records[idx], &clip_sampling, SampleMode::TrainRandom, clip_seed)?
                    .remove(0);
                accumulate(&model, &clip, &mut acc)?;
            }
            let scale = 1.0 / batch.len() as f32;
            for g in acc.grads.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.eta_min)?;
            lr_trace.push(lr);
            opt.step(&mut model.params, &acc.grads, lr)?;
            step += 1;
            loss_sum += acc.loss;
            correct += acc.correct;
        }
        let val_balanced_acc = balanced_on(&model, store, &val)?;
        if let Some(score) = val_balanced_acc {
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, model.clone()));
            }
        }
        log.push(EpochRecord {
            epoch,
            step,
            lr,
            loss: loss_sum / per_epoch as f64,
            train_acc: correct as f64 / per_epoch as f64,
            val_balanced_acc,
        });
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (cfg.epochs, model.clone()),
    };
    Ok(TrainRun {
        best,
        best_epoch,
        last: model,
        log,
        lr_trace,
    })
}
