use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV header in {path}: {detail}")]
    WavHeader { path: PathBuf, detail: String },

    #[error("unsupported channel count {channels} in {path} (mono required)")]
    WavChannels { path: PathBuf, channels: u16 },

    #[error("unsupported sample rate {rate} Hz in {path} ({expected} Hz required)")]
    WavSampleRate { path: PathBuf, rate: u32, expected: u32 },

    #[error("unsupported encoding in {path}: {detail} (PCM16 required)")]
    WavEncoding { path: PathBuf, detail: String },

    #[error("sample {value} at index {index} outside [-1, 1]; enable clipping to write anyway")]
    SampleOutOfRange { value: f64, index: usize },

    #[error("waveform too short: {len} samples, need at least {min}")]
    WaveformTooShort { len: usize, min: usize },

    #[error("shape mismatch: {detail}")]
    ShapeMismatch { detail: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("distribution not normalized: row sum {sum} (tolerance {tol})")]
    NotNormalized { sum: f64, tol: f64 },

    #[error("state id {state} out of range (< {num_states} required)")]
    StateOutOfRange { state: usize, num_states: usize },

    #[error("utterance too short: {frames} frames cannot fit the minimum path of {min_frames}")]
    UtteranceTooShort { frames: usize, min_frames: usize },

    #[error("empty {what}")]
    Empty { what: String },

    #[error("sampling requested on a single-mode model")]
    SingleModeModel,

    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },

    #[error("zero variance: all {n} values equal {value}")]
    ZeroVariance { n: usize, value: f64 },

    #[error("held-out and evaluation sets overlap on id {id}")]
    OverlappingIds { id: String },

    #[error("invalid configuration: {detail}")]
    InvalidConfig { detail: String },

    #[error("artifact {path} was produced under config hash {found}, expected {expected}")]
    ConfigHashMismatch { path: PathBuf, found: String, expected: String },

    #[error("missing artifact: {path} ({hint})")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("output directory {path} is not empty (pass --force to overwrite)")]
    OutputNotEmpty { path: PathBuf },

    #[error("checkpoint format error in {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("attack aborted: {detail}")]
    AttackAborted { detail: String },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code class per the CLI contract: artifact/precondition errors are 2.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

pub type Result<T> = std::result::Result<T, Error>;
