//! End-to-end search: visual working memory first, then the auditory
//! buffer conditioned on the frames it kept.

use serde::Serialize;

use crate::align::ProjectionLayer;
use std::path::Path;

use crate::audio::{
    load_waveform, mel_spectrogram, segment_audio, segment_audio_by_duration, select_audio, AudioEncoder,
    AudioSegmentSet, AudioSelection, FusedSegments, MelSpec, TWMM_MAGIC, TWMS_MAGIC,
};
use crate::error::{Result, TwmError};
use crate::io::read_bytes;
use crate::io::{EmbeddingSequence, QueryEmbedding, TwmConfig};
use crate::scalar::Scalar;
use crate::visual::{select_visual, VisualSelection};

/// An audio stream ready for selection.
#[derive(Debug, Clone, Copy)]
pub struct AudioInput<'a, T> {
    pub segments: &'a AudioSegmentSet<T>,
    pub encoder: &'a AudioEncoder<T>,
}

#[derive(Debug, Clone)]
pub struct SearchResult<T> {
    pub visual: VisualSelection<T>,
    pub audio: Option<(FusedSegments<T>, AudioSelection<T>)>,
}

/// Indices and audio spans of a [`SearchResult`], for writing out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchSummary {
    pub frames: Vec<usize>,
    pub segments: Vec<usize>,
    pub segment_spans_s: Vec<(f64, f64)>,
    pub segment_scores: Vec<f64>,
}

/// Selects frames, then (with audio) encodes every segment using the kept
/// frames as attention queries and keeps the best-matching segments.
pub fn neural_search<T: Scalar>(
    video: &EmbeddingSequence<T>,
    audio: Option<AudioInput<'_, T>>,
    query: &QueryEmbedding<T>,
    projection: &ProjectionLayer<T>,
    config: &TwmConfig,
) -> Result<SearchResult<T>> {
    let visual = select_visual(video, query, projection, config)?;
    let audio = match audio {
        None => None,
        Some(a) => {
            let q_visual = visual.buffer.to_matrix()?;
            let fused = a.encoder.encode(&q_visual, a.segments, &config.pool_kernels)?;
            let sel = select_audio(
                &fused.embeddings,
                &visual.buffer,
                config.audio_buffer_capacity,
                Some(&a.encoder.output),
            )?;
            Some((fused, sel))
        }
    };
    Ok(SearchResult { visual, audio })
}

impl<T: Scalar> SearchResult<T> {
    pub fn summary(&self, segments: Option<&AudioSegmentSet<T>>) -> SearchSummary {
        let (idx, scores) = match &self.audio {
            Some((_, sel)) => (sel.buffer.indices(), sel.scores.iter().map(|s| s.as_f64()).collect()),
            None => (Vec::new(), Vec::new()),
        };
        let spans = match segments {
            Some(s) => idx.iter().map(|&i| s.span_s(i)).collect(),
            None => Vec::new(),
        };
        SearchSummary {
            frames: self.visual.buffer.indices(),
            segments: idx,
            segment_spans_s: spans,
            segment_scores: scores,
        }
    }
}

/// How raw audio becomes segments.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFrontend {
    /// Sample rate for raw `f32` input; WAV headers carry their own.
    pub raw_sample_rate: Option<u32>,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    /// Segment length in seconds; when absent `n_segments` is used.
    pub segment_seconds: Option<f64>,
    pub n_segments: usize,
    pub patch_len: usize,
}

impl Default for AudioFrontend {
    fn default() -> Self {
        Self {
            raw_sample_rate: None,
            n_fft: 512,
            hop: 160,
            n_mels: 64,
            segment_seconds: None,
            n_segments: 6,
            patch_len: 8,
        }
    }
}

impl AudioFrontend {
    pub fn from_config(config: &TwmConfig) -> Self {
        Self {
            n_segments: config.n_audio_segments,
            patch_len: config.patch_len,
            ..Self::default()
        }
    }

    /// Segments a spectrogram; a segment count above the frame count is
    /// reduced to one segment per frame.
    pub fn segment<T: Scalar>(&self, spec: &MelSpec<T>) -> Result<AudioSegmentSet<T>> {
        match self.segment_seconds {
            Some(s) => segment_audio_by_duration(spec, s, self.patch_len),
            None => {
                let n = self.n_segments.min(spec.n_frames());
                if n < self.n_segments {
                    log::warn!("audio has {} frames; using {n} segments instead of {}", spec.n_frames(), self.n_segments);
                }
                segment_audio(spec, n, self.patch_len)
            }
        }
    }

    /// Loads segments from a TWMS file, a TWMM spectrogram, a WAV file or
    /// raw `f32` samples (detected by content).
    pub fn load_segments<T: Scalar>(&self, path: impl AsRef<Path>) -> Result<AudioSegmentSet<T>> {
        let path = path.as_ref();
        let bytes = read_bytes(path)?;
        if bytes.starts_with(TWMS_MAGIC) {
            return AudioSegmentSet::from_bytes(&bytes);
        }
        let spec = if bytes.starts_with(TWMM_MAGIC) {
            MelSpec::from_bytes(&bytes)?
        } else {
            let wave = load_waveform(path, self.raw_sample_rate)?;
            mel_spectrogram(&wave, self.n_fft, self.hop, self.n_mels)?
        };
        self.segment(&spec)
    }
}

/// Default encoder for a stream when none is supplied: seeded uniform init.
pub fn default_encoder<T: Scalar>(
    visual_dim: usize,
    segments: &AudioSegmentSet<T>,
    config: &TwmConfig,
    seed: u64,
) -> Result<AudioEncoder<T>> {
    if visual_dim == 0 {
        return Err(TwmError::InvalidInput("visual dim must be >= 1".into()));
    }
    Ok(AudioEncoder::init(visual_dim, segments.patch_dim(), config.d_k, seed))
}

impl SearchSummary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}
