//! On-disk embeddings, the dataset manifest and clip sampling.

mod embedding;
mod manifest;
mod sampling;

pub use embedding::{
    read_header, EmbeddingFile, EmbeddingHeader, DTYPE_F32_LE, EMBEDDING_MAGIC, FORMAT_VERSION,
    HEADER_LEN, NO_CLS,
};
pub use manifest::{
    validate_manifest, IssueCode, Manifest, ManifestReport, Split, ValidationErrors,
    ValidationIssue, VideoRecord,
};
pub use sampling::{
    clip_frame_indices, sample_clips, select_tokens, ClipSampling, EmbeddingStore, SampleMode,
    TokenClip, TokenMode, WindowLayout,
};
