//! Band-pass preprocessing, per-recording inference and diagnosis voting.

pub mod filter;
pub mod pipeline;
pub mod synth;

pub use filter::{bandpass, Bandpass, Biquad, FilterConfig};
pub use pipeline::{
    classify, diagnose, diagnose_recordings, infer, infer_all, infer_with, parse_bin, parse_csv, to_bin, to_csv,
    Class, Diagnosis, Inference, Recording, RecordingResult, RECORDING_LEN, SAMPLE_RATE_HZ, VOTES_PER_DIAGNOSIS,
};
