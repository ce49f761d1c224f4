//! Temporal working memory over embedding streams.
//!
//! Given per-frame visual embeddings, a query embedding and (optionally) an
//! audio track, the library keeps a small buffer of the frames that are
//! both relevant to the query and distinct from each other, and a buffer of
//! the audio segments that best match those frames. Every numeric routine
//! is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix `f64`.

pub mod align;
pub mod audio;
pub mod bench;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod visual;

pub use error::{Result, TwmError};
pub use io::{CommitMode, Modality, TwmConfig};
pub use scalar::Scalar;

pub type Matrix = tensor::DenseMatrix<f64>;
pub type Sequence = io::EmbeddingSequence<f64>;
pub type Query = io::QueryEmbedding<f64>;
pub type Projection = align::ProjectionLayer<f64>;
pub type Buffer = visual::WorkingBuffer<f64>;
pub type Spectrogram = audio::MelSpec<f64>;
pub type Segments = audio::AudioSegmentSet<f64>;
pub type Encoder = audio::AudioEncoder<f64>;

pub type Matrix32 = tensor::DenseMatrix<f32>;
pub type Sequence32 = io::EmbeddingSequence<f32>;
pub type Query32 = io::QueryEmbedding<f32>;
pub type Projection32 = align::ProjectionLayer<f32>;
