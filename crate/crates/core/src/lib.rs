//! An end-to-end temporal attention network for EEG-based auditory spatial
//! attention decoding, built from scratch: dense tensors, hand-derived
//! backpropagation, signal preprocessing, and a leakage-safe cross-validation
//! harness, all deterministic under a fixed seed.

pub mod dataio;
pub mod dsp;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

pub use dataio::{DatasetManifest, EegRecording, Label, SynthConfig};
pub use model::{ModelConfig, ParamGrads, TanetParams};
pub use preprocess::{FirFilter, PreprocConfig, Window, WindowSet};
pub use tensor::{ElemOp, Tensor, TensorError};
pub use training::{CvOptions, CvReport, FoldReport, TrainConfig};

/// Worker-thread cap from the `TANET_THREADS` environment variable.
/// 0 or 1 means sequential; unset leaves the pool default.
pub fn worker_threads() -> Option<usize> {
    std::env::var("TANET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
}

/// Applies the `TANET_THREADS` cap to the global thread pool. Call once at
/// startup; later calls are ignored. Thread count never affects results —
/// all reductions happen in a fixed order — only wall time.
pub fn init_thread_pool() {
    if let Some(n) = worker_threads() {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}
