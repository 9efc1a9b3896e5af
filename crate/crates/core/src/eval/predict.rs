use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::store::{EmbeddingStore, SampleMode, VideoRecord};

use super::metrics::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    pub video_id: String,
    pub view: String,
    pub class_id: usize,
    /// Mean of the per-clip logits.
    pub logits: Vec<f32>,
    /// Mean of the per-clip fused features.
    pub feature: Vec<f32>,
    pub predicted: usize,
}

/// Elementwise mean of equally shaped tensors.
pub fn mean_of(tensors: &[Tensor<f32>]) -> Result<Vec<f32>> {
    let first = tensors.first().ok_or_else(|| Error::Data("nothing to average".into()))?;
    let mut acc = vec![0.0f32; first.numel()];
    for t in tensors {
        if t.shape() != first.shape() {
            return Err(Error::shape("mean_of", "tensors differ in shape"));
        }
        for (a, v) in acc.iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    let n = tensors.len() as f32;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Scores one video by averaging logits over equidistant evaluation clips.
pub fn predict_video(model: &Model, store: &EmbeddingStore, record: &VideoRecord) -> Result<VideoPrediction> {
    let clips = store.sample(record, &model.config.sampling, SampleMode::EvalEquidistant, 0)?;
    let mut features = Vec::with_capacity(clips.len());
    let mut logits = Vec::with_capacity(clips.len());
    for clip in &clips {
        let (f, l) = model.infer(clip)?;
        features.push(f);
        logits.push(l);
    }
    let logits = mean_of(&logits)?;
    Ok(VideoPrediction {
        video_id: record.video_id.clone(),
        view: record.view.clone(),
        class_id: record.class_id,
        predicted: argmax(&logits),
        feature: mean_of(&features)?,
        logits,
    })
}
