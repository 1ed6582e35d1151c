//! Downstream evaluations on top of trained checkpoints: sliding-window
//! speaker diarization scored by DER, code-sequence phone recognition
//! scored by PER, and the disentanglement metrics (NMI, purity, embedding
//! cosine similarity).

mod codes;
mod diarize;
mod metrics;
mod phones;

pub use codes::{extract_codes, format_code_lines, parse_code_lines, CodeSequence, ExtractedCodes};
pub use diarize::{
    build_reference_codes, der, diarize, format_rttm, parse_rttm, DerReport,
    DiarizationSegment, ReferenceCodes, DEFAULT_OVERLAP_S, DEFAULT_WINDOW_S,
};
pub use metrics::{cosine, nmi_and_purity, speaker_similarity};
pub use phones::{
    build_code_to_phone_map, frame_phone_labels, per, recognize_phones, PerReport, UNK_PHONE,
};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("{0}")]
    BadInput(String),
    #[error("diarization wants exactly 2 enrolled speakers, got {0}")]
    SpeakerCount(usize),
    #[error("empty enrollment for speaker `{0}`")]
    EmptyEnrollment(String),
    #[error("length mismatch: {0} codes vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty reference")]
    EmptyReference,
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}
