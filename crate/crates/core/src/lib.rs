//! Meta-learned implicit human capture.
//!
//! A capture subject is represented as a neural signed-distance and radiance
//! field in a canonical body space, encoded by a multiresolution hash grid and
//! two small MLPs. Observation-space rays are bent into the canonical space by
//! a skinned template mesh, rendered with unbiased SDF-based volume rendering,
//! and supervised with photometric, mask, eikonal, and sparsity losses.
//!
//! The crate covers the full pipeline:
//!
//! * [`difftape`]: reverse-mode autodiff over a flat parameter vector.
//! * [`field`]: hash-encoded SDF + radiance network with exact spatial
//!   gradients recorded on the tape.
//! * [`template`]: skeleton forward kinematics, linear blend skinning, and
//!   template-guided ray warping.
//! * [`renderer`]: cameras, ray sampling with empty-space skipping, volume
//!   rendering, and the training loss.
//! * [`meta`]: Reptile-style meta-learning of a weight initialization over a
//!   multi-view, multi-pose corpus.
//! * [`adapt`]: fine-tuning on sparse or monocular views, with occlusion-aware
//!   virtual ray supervision from proxy renders.
//! * [`synth`]: a synthetic articulated-body dataset generator with analytic
//!   ground truth.
//! * [`evalgeo`]: isosurface mesh extraction and image/geometry metrics.
//! * [`cli`]: the `metacap` command-line entry points.

pub mod adapt;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod difftape;
pub mod evalgeo;
pub mod field;
pub mod linalg;
pub mod mesh;
pub mod meta;
pub mod renderer;
pub mod rng;
pub mod synth;
pub mod template;
pub mod train;

/// Crate-wide error type. Variants map onto the CLI exit-code contract.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad command-line usage or malformed configuration.
    #[error("usage: {0}")]
    Usage(String),
    /// Input data failed validation (datasets, checkpoints, meshes).
    #[error("invalid data: {0}")]
    Data(String),
    /// A numerical failure (non-finite loss, singular transform, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code for this error: 2 usage, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Data(_) => 3,
            Error::Numerical(_) => 4,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Data(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Number of worker threads to use for data-parallel sections.
///
/// Resolution order: explicit `--threads` flag, `METACAP_THREADS`, detected
/// parallelism. Deterministic mode forces a single chunk regardless.
pub fn resolve_threads(flag: Option<usize>) -> usize {
    let n = flag
        .or_else(|| {
            std::env::var("METACAP_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    n.max(1)
}
