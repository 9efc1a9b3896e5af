use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedding::EmbeddingFile;
use super::manifest::{Manifest, VideoRecord};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// One uniformly random window per requested clip.
    TrainRandom,
    /// Windows with start offsets evenly spaced over the video; seed-independent.
    EvalEquidistant,
}

/// How the frames of one window are laid out in the video.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowLayout {
    /// Consecutive frames (stride 1).
    #[default]
    Contiguous,
    /// Stride `max(1, F / frames_per_clip)`, spreading one clip across the video.
    Strided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSampling {
    pub num_clips: usize,
    pub frames_per_clip: usize,
    #[serde(default)]
    pub window: WindowLayout,
}

impl Default for ClipSampling {
    fn default() -> Self {
        Self {
            num_clips: 3,
            frames_per_clip: 16,
            window: WindowLayout::Contiguous,
        }
    }
}

/// Frame indices of each sampled clip. Videos shorter than a window are loop-padded.
pub fn clip_frame_indices(
    frame_count: usize,
    sampling: &ClipSampling,
    mode: SampleMode,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if frame_count == 0 {
        return Err(Error::Data("video has no frames".into()));
    }
    if sampling.frames_per_clip == 0 || sampling.num_clips == 0 {
        return Err(Error::Config("frames_per_clip and num_clips must be >= 1".into()));
    }
    let stride = match sampling.window {
        WindowLayout::Contiguous => 1,
        WindowLayout::Strided => (frame_count / sampling.frames_per_clip).max(1),
    };
    let span = (sampling.frames_per_clip - 1) * stride + 1;
    let max_start = frame_count.saturating_sub(span);

    let starts: Vec<usize> = match mode {
        SampleMode::EvalEquidistant if sampling.num_clips == 1 => vec![max_start / 2],
        SampleMode::EvalEquidistant => (0..sampling.num_clips)
            .map(|i| i * max_start / (sampling.num_clips - 1))
            .collect(),
        SampleMode::TrainRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..sampling.num_clips)
                .map(|_| rng.random_range(0..=max_start))
                .collect()
        }
    };
    Ok(starts
        .into_iter()
        .map(|s| {
            (0..sampling.frames_per_clip)
                .map(|j| (s + j * stride) % frame_count)
                .collect()
        })
        .collect())
}

/// Token embeddings of one sampled clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenClip {
    /// `[T, N, D]`
    pub tokens: Tensor<f32>,
    pub cls_index: Option<usize>,
    pub video_id: String,
    pub view: String,
    pub class_id: usize,
}

impl TokenClip {
    pub fn frames(&self) -> usize {
        self.tokens.shape()[0]
    }

    /// Builds a clip from explicit frame indices of a loaded video.
    pub fn gather(record: &VideoRecord, file: &EmbeddingFile, frames: &[usize]) -> Result<Self> {
        let (n, d) = (file.header.tokens as usize, file.header.dim as usize);
        let mut data = Vec::with_capacity(frames.len() * n * d);
        for &f in frames {
            if f >= file.header.frame_count as usize {
                return Err(Error::Data(format!(
                    "frame {f} out of range for {} ({} frames)",
                    record.video_id, file.header.frame_count
                )));
            }
            data.extend_from_slice(file.frame(f));
        }
        Ok(Self {
            tokens: Tensor::new(vec![frames.len(), n, d], data)?,
            cls_index: file.header.cls_index.map(usize::from),
            video_id: record.video_id.clone(),
            view: record.view.clone(),
            class_id: record.class_id,
        })
    }
}

/// Samples clips from a loaded video.
///
/// For clip-level embeddings every stored entry is already a whole clip, so each
/// sampled [`TokenClip`] has `T == 1`.
pub fn sample_clips(
    record: &VideoRecord,
    file: &EmbeddingFile,
    sampling: &ClipSampling,
    mode: SampleMode,
    clip_level: bool,
    seed: u64,
) -> Result<Vec<TokenClip>> {
    let sampling = if clip_level {
        ClipSampling {
            frames_per_clip: 1,
            window: WindowLayout::Contiguous,
            ..*sampling
        }
    } else {
        *sampling
    };
    clip_frame_indices(file.header.frame_count as usize, &sampling, mode, seed)?
        .iter()
        .map(|frames| TokenClip::gather(record, file, frames))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    All,
    Cls,
}

/// `All` returns `[T, N, D]` unchanged; `Cls` returns the CLS token of each frame as `[T, 1, D]`.
pub fn select_tokens(clip: &TokenClip, mode: TokenMode) -> Result<Tensor<f32>> {
    match mode {
        TokenMode::All => Ok(clip.tokens.clone()),
        TokenMode::Cls => {
            let cls = clip.cls_index.ok_or(Error::NoCls)?;
            let shape = clip.tokens.shape();
            let (t, n, d) = (shape[0], shape[1], shape[2]);
            let data = (0..t)
                .flat_map(|f| clip.tokens.data()[(f * n + cls) * d..][..d].iter().copied())
                .collect();
            Tensor::new(vec![t, 1, d], data)
        }
    }
}

/// Read-only cache of embedding files referenced by a manifest. Safe to share across threads.
#[derive(Debug)]
pub struct EmbeddingStore {
    manifest: Manifest,
    cache: RwLock<HashMap<PathBuf, Arc<EmbeddingFile>>>,
}

impl EmbeddingStore {
    pub fn new(manifest: Manifest) -> Self {
        Self {
            manifest,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn load(&self, record: &VideoRecord) -> Result<Arc<EmbeddingFile>> {
        let path = self.manifest.resolve(record);
        if let Some(hit) = self.cache.read().expect("cache lock").get(&path) {
            return Ok(Arc::clone(hit));
        }
        let file = EmbeddingFile::read(&path)?;
        let h = &file.header;
        if (h.frame_count, h.tokens, h.dim)
            != (record.frame_count, self.manifest.tokens_per_frame, self.manifest.dim)
        {
            return Err(Error::Format {
                path,
                detail: "header does not match the manifest".into(),
            });
        }
        let file = Arc::new(file);
        self.cache
            .write()
            .expect("cache lock")
            .insert(path, Arc::clone(&file));
        Ok(file)
    }

    pub fn sample(
        &self,
        record: &VideoRecord,
        sampling: &ClipSampling,
        mode: SampleMode,
        seed: u64,
    ) -> Result<Vec<TokenClip>> {
        let file = self.load(record)?;
        sample_clips(record, &file, sampling, mode, self.manifest.is_clip_level, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{EmbeddingHeader, Split};

    fn eval(frames: usize, clips: usize, fpc: usize) -> Vec<Vec<usize>> {
        let s = ClipSampling {
            num_clips: clips,
            frames_per_clip: fpc,
            window: WindowLayout::Contiguous,
        };
        clip_frame_indices(frames, &s, SampleMode::EvalEquidistant, 0).unwrap()
    }

    #[test]
    fn equidistant_starts() {
        let starts: Vec<usize> = eval(48, 3, 16).iter().map(|c| c[0]).collect();
        assert_eq!(starts, vec![0, 16, 32]);
        assert_eq!(eval(48, 3, 16)[2], (32..48).collect::<Vec<_>>());
    }

    #[test]
    fn short_videos_loop_pad() {
        let clip = &eval(10, 1, 16)[0];
        let expected: Vec<usize> = (0..10).chain(0..6).collect();
        assert_eq!(clip, &expected);
    }

    #[test]
    fn degenerate_spacing_repeats_clip() {
        let clips = eval(16, 3, 16);
        assert!(clips.iter().all(|c| c == &(0..16).collect::<Vec<_>>()));
    }

    #[test]
    fn zero_frames_is_an_error() {
        let s = ClipSampling::default();
        assert!(clip_frame_indices(0, &s, SampleMode::EvalEquidistant, 0).is_err());
    }

    #[test]
    fn train_random_is_seeded_and_in_range() {
        let s = ClipSampling {
            num_clips: 4,
            frames_per_clip: 16,
            window: WindowLayout::Contiguous,
        };
        let a = clip_frame_indices(48, &s, SampleMode::TrainRandom, 7).unwrap();
        let b = clip_frame_indices(48, &s, SampleMode::TrainRandom, 7).unwrap();
        assert_eq!(a, b);
        for clip in &a {
            assert!(clip[0] <= 32);
            assert!(clip.windows(2).all(|w| w[1] == w[0] + 1));
        }
        let eval_a = clip_frame_indices(48, &s, SampleMode::EvalEquidistant, 1).unwrap();
        let eval_b = clip_frame_indices(48, &s, SampleMode::EvalEquidistant, 99).unwrap();
        assert_eq!(eval_a, eval_b);
    }

    #[test]
    fn strided_window_spreads_over_video() {
        let s = ClipSampling {
            num_clips: 1,
            frames_per_clip: 4,
            window: WindowLayout::Strided,
        };
        let clip = &clip_frame_indices(16, &s, SampleMode::EvalEquidistant, 0).unwrap()[0];
        // span 13 of 16 frames, centered start
        assert_eq!(clip, &vec![1, 5, 9, 13]);
    }

    fn clip(cls: Option<usize>) -> TokenClip {
        TokenClip {
            tokens: Tensor::from_fn(vec![2, 3, 4], |i| i as f32),
            cls_index: cls,
            video_id: "v".into(),
            view: "front".into(),
            class_id: 0,
        }
    }

    #[test]
    fn select_cls_slices_token() {
        let c = clip(Some(0));
        let cls = select_tokens(&c, TokenMode::Cls).unwrap();
        assert_eq!(cls.shape(), &[2, 1, 4]);
        assert_eq!(&cls.data()[..4], &c.tokens.data()[..4]);
        assert_eq!(&cls.data()[4..], &c.tokens.data()[12..16]);
        assert_eq!(select_tokens(&c, TokenMode::All).unwrap(), c.tokens);
        assert!(matches!(select_tokens(&clip(None), TokenMode::Cls), Err(Error::NoCls)));
    }

    #[test]
    fn clip_level_sampling_yields_single_frame_clips() {
        let header = EmbeddingHeader {
            frame_count: 5,
            tokens: 1,
            dim: 2,
            cls_index: None,
        };
        let file = EmbeddingFile::new(header, (0..10).map(|i| i as f32).collect()).unwrap();
        let record = VideoRecord {
            video_id: "v".into(),
            view: "front".into(),
            class_id: 0,
            split: Split::Test,
            path: "v.fpeb".into(),
            frame_count: 5,
        };
        let clips = sample_clips(
            &record,
            &file,
            &ClipSampling::default(),
            SampleMode::EvalEquidistant,
            true,
            0,
        )
        .unwrap();
        assert_eq!(clips.len(), 3);
        assert!(clips.iter().all(|c| c.frames() == 1));
        assert_eq!(clips[2].tokens.data(), &[8.0, 9.0]);
    }
}
