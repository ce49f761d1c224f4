//! Auditory working memory.
//!
//! Pipeline: waveform → log-Mel spectrogram → `n` contiguous segments of
//! flattened Mel patches → visual-query attention over each segment (an
//! inter-segment branch whose keys are standardized with clip-wide
//! statistics and an intra-segment branch standardized per segment) →
//! multi-kernel mean pooling → one fused embedding per segment → cosine
//! selection against the visual buffer.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::align::{cosine_grad_wrt_first, infonce_sim_grads, ProjectionLayer};
use crate::error::{Result, TwmError};
use crate::io::{read_bytes, write_bytes, ByteReader, ByteWriter};
use crate::scalar::Scalar;
use crate::tensor::{
    cosine_sim, dot, matmul, matmul_transposed, softmax_unchecked, DenseMatrix, SeededRng,
};
use crate::visual::WorkingBuffer;

pub const TWMM_MAGIC: &[u8; 4] = b"TWMM";
pub const TWMS_MAGIC: &[u8; 4] = b"TWMS";

/// Floor applied before the log so silence maps to `ln(1e-10)`.
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono PCM samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(TwmError::InvalidInput("sample_rate must be > 0".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(TwmError::NonFinite("waveform"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Pure sine of the given frequency and amplitude.
    pub fn tone(freq_hz: f64, amplitude: f64, seconds: f64, sample_rate: u32) -> Self {
        let n = (seconds * sample_rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| T::lit(amplitude * (2.0 * PI * freq_hz * i as f64 / sample_rate as f64).sin()))
            .collect();
        Self {
            samples,
            sample_rate,
        }
    }
}

/// Reads a 16-bit PCM mono WAV, or raw little-endian `f32` samples when
/// `raw_sample_rate` is given.
pub fn load_waveform<T: Scalar>(path: impl AsRef<Path>, raw_sample_rate: Option<u32>) -> Result<Waveform<T>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"RIFF") {
        let mut reader = hound::WavReader::new(std::io::Cursor::new(&bytes))
            .map_err(|e| TwmError::InvalidInput(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(TwmError::InvalidInput(format!(
                "{}: expected 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
                path.display(),
                spec.channels,
                spec.bits_per_sample,
                spec.sample_format
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| T::lit(v as f64 / 32768.0)))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| TwmError::InvalidInput(format!("{}: {e}", path.display())))?;
        return Waveform::new(samples, spec.sample_rate);
    }
    let Some(sr) = raw_sample_rate else {
        return Err(TwmError::UnrecognizedFormat);
    };
    if bytes.len() % 4 != 0 {
        return Err(TwmError::Corrupt {
            expected: bytes.len() / 4 * 4 + 4,
            found: bytes.len(),
        });
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Waveform::new(samples, sr)
}

/// Writes a 16-bit PCM mono WAV (samples clipped to `[-1, 1]`).
pub fn save_wav<T: Scalar>(wave: &Waveform<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => TwmError::io(path, io),
        other => TwmError::InvalidInput(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &wave.samples {
        let v = (s.as_f64().clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(to_io)?;
    }
    w.finalize().map_err(to_io)
}

/// HTK mel scale: `2595·log10(1 + f/700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_mels + 2` filter edge frequencies equally spaced in mel from 0 Hz to
/// Nyquist; filter `m` rises from edge `m`, peaks at edge `m+1` and falls to
/// edge `m+2`.
pub fn mel_edges_hz(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filter weights, `n_mels × (n_fft/2 + 1)`, linear in Hz
/// between mel-spaced edges, peak 1, no area normalization.
pub fn mel_filterbank<T: Scalar>(n_mels: usize, n_fft: usize, sample_rate: u32) -> DenseMatrix<T> {
    let n_bins = n_fft / 2 + 1;
    let edges = mel_edges_hz(n_mels, sample_rate);
    let mut fb = DenseMatrix::zeros(n_mels, n_bins);
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb.set(m, b, T::lit(w));
        }
    }
    fb
}

/// Log-Mel spectrogram, `n_frames × n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec<T> {
    pub values: DenseMatrix<T>,
    /// Seconds between frame starts.
    pub hop_s: f64,
    pub sample_rate: u32,
}

impl<T: Scalar> MelSpec<T> {
    pub fn n_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.cols()
    }

    /// Frame-start span covered: `n_frames · hop_s`.
    pub fn duration_s(&self) -> f64 {
        self.n_frames() as f64 * self.hop_s
    }

    /// TWMM: magic, version, reserved `u16`, `n_frames: u32`,
    /// `n_mels: u32`, `sample_rate: u32`, `hop_s: f64`, values `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_header(TWMM_MAGIC);
        w.u16(0);
        w.u32(self.n_frames());
        w.u32(self.n_mels());
        w.u32(self.sample_rate as usize);
        w.f64(self.hop_s);
        for &v in self.values.data() {
            w.f32(v.as_f32());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 28;
        let mut r = ByteReader::open(bytes, TWMM_MAGIC, HEADER)?;
        let _reserved = r.u16();
        let n_frames = r.u32();
        let n_mels = r.u32();
        let sample_rate = r.u32() as u32;
        let hop_s = r.f64();
        if n_mels == 0 || sample_rate == 0 || !(hop_s.is_finite() && hop_s > 0.0) {
            return Err(TwmError::InvalidHeader(format!(
                "n_mels={n_mels}, sample_rate={sample_rate}, hop_s={hop_s}"
            )));
        }
        let count = crate::io::checked_size(&[n_frames, n_mels])?;
        r.expect_total(HEADER + crate::io::checked_size(&[count, 4])?)?;
        let data = (0..count).map(|_| T::lit(r.f32() as f64)).collect();
        Ok(Self {
            values: DenseMatrix::from_vec(n_frames, n_mels, data)?,
            hop_s,
            sample_rate,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_bytes(path.as_ref())?)
    }
}

/// Periodic Hann window → |STFT|² → triangular HTK-mel filterbank →
/// natural log with floor [`LOG_FLOOR`]. No padding: frame `t` covers
/// samples `[t·hop, t·hop + n_fft)`, so
/// `n_frames = ⌊(len − n_fft)/hop⌋ + 1`. Power (magnitude squared) means
/// doubling the amplitude adds `ln 4` to every unfloored value.
pub fn mel_spectrogram<T: Scalar>(
    wave: &Waveform<T>,
    n_fft: usize,
    hop: usize,
    n_mels: usize,
) -> Result<MelSpec<T>> {
    if wave.sample_rate == 0 {
        return Err(TwmError::InvalidInput("sample_rate must be > 0".into()));
    }
    if !n_fft.is_power_of_two() || n_fft < 2 {
        return Err(TwmError::InvalidInput(format!("n_fft must be a power of two, got {n_fft}")));
    }
    if hop == 0 || hop > n_fft {
        return Err(TwmError::InvalidInput(format!("hop must be in 1..={n_fft}, got {hop}")));
    }
    let n_bins = n_fft / 2 + 1;
    if n_mels == 0 || n_mels > n_bins {
        return Err(TwmError::InvalidInput(format!(
            "n_mels must be in 1..={n_bins} for n_fft={n_fft}, got {n_mels}"
        )));
    }
    if wave.samples.len() < n_fft {
        return Err(TwmError::InvalidInput(format!(
            "waveform of {} samples is shorter than n_fft={n_fft}",
            wave.samples.len()
        )));
    }
    let n_frames = (wave.samples.len() - n_fft) / hop + 1;
    let window: Vec<T> = (0..n_fft)
        .map(|i| T::lit(0.5 - 0.5 * (2.0 * PI * i as f64 / n_fft as f64).cos()))
        .collect();
    let fb = mel_filterbank::<T>(n_mels, n_fft, wave.sample_rate);
    // nonzero support of each triangle
    let support: Vec<(usize, usize)> = (0..n_mels)
        .map(|m| {
            let row = fb.row(m);
            let lo = row.iter().position(|&w| w != T::zero()).unwrap_or(0);
            let hi = row.iter().rposition(|&w| w != T::zero()).map_or(0, |h| h + 1);
            (lo, hi.max(lo))
        })
        .collect();
    let fft = FftPlanner::<T>::new().plan_fft_forward(n_fft);
    let floor = T::lit(LOG_FLOOR);

    let mut values = DenseMatrix::zeros(n_frames, n_mels);
    let mut frame = vec![Complex::new(T::zero(), T::zero()); n_fft];
    let mut power = vec![T::zero(); n_bins];
    for t in 0..n_frames {
        let start = t * hop;
        for (i, c) in frame.iter_mut().enumerate() {
            *c = Complex::new(wave.samples[start + i] * window[i], T::zero());
        }
        fft.process(&mut frame);
        for (p, c) in power.iter_mut().zip(&frame) {
            *p = c.norm_sqr();
        }
        for (m, &(lo, hi)) in support.iter().enumerate() {
            let energy = dot(&fb.row(m)[lo..hi], &power[lo..hi]);
            values.set(t, m, energy.max(floor).ln());
        }
    }
    Ok(MelSpec {
        values,
        hop_s: hop as f64 / wave.sample_rate as f64,
        sample_rate: wave.sample_rate,
    })
}

/// Patch embeddings grouped into contiguous temporal segments.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegmentSet<T> {
    /// One `n_patches × patch_dim` matrix per segment.
    pub segments: Vec<DenseMatrix<T>>,
    /// `n + 1` nondecreasing boundaries in seconds.
    pub boundaries_s: Vec<f64>,
}

impl<T: Scalar> AudioSegmentSet<T> {
    pub fn new(segments: Vec<DenseMatrix<T>>, boundaries_s: Vec<f64>) -> Result<Self> {
        if segments.is_empty() {
            return Err(TwmError::InvalidInput("no audio segments".into()));
        }
        if boundaries_s.len() != segments.len() + 1 {
            return Err(TwmError::DimMismatch {
                context: "segment boundaries",
                left: segments.len() + 1,
                right: boundaries_s.len(),
            });
        }
        if boundaries_s.windows(2).any(|w| w[1] < w[0]) || boundaries_s.iter().any(|b| !b.is_finite()) {
            return Err(TwmError::InvalidInput("segment boundaries must be finite and nondecreasing".into()));
        }
        let dim = segments[0].cols();
        for s in &segments {
            if s.rows() == 0 {
                return Err(TwmError::InvalidInput("empty audio segment".into()));
            }
            if s.cols() != dim || dim == 0 {
                return Err(TwmError::DimMismatch {
                    context: "segment patch dim",
                    left: dim,
                    right: s.cols(),
                });
            }
        }
        Ok(Self {
            segments,
            boundaries_s,
        })
    }

    pub fn n(&self) -> usize {
        self.segments.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.segments[0].cols()
    }

    /// `[start, end)` of segment `i` in seconds.
    pub fn span_s(&self, i: usize) -> (f64, f64) {
        (self.boundaries_s[i], self.boundaries_s[i + 1])
    }

    /// TWMS: magic, version, reserved `u16`, `n: u32`, `patch_dim: u32`,
    /// boundaries `(n+1)·f64`, then per segment `n_patches: u32` and its
    /// patches as `f32` row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_header(TWMS_MAGIC);
        w.u16(0);
        w.u32(self.n());
        w.u32(self.patch_dim());
        for &b in &self.boundaries_s {
            w.f64(b);
        }
        for s in &self.segments {
            w.u32(s.rows());
            for &v in s.data() {
                w.f32(v.as_f32());
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, TWMS_MAGIC, 16)?;
        let _reserved = r.u16();
        let n = r.u32();
        let dim = r.u32();
        if n == 0 || dim == 0 {
            return Err(TwmError::InvalidHeader(format!("n={n}, patch_dim={dim}")));
        }
        r.require(crate::io::checked_size(&[n + 1, 8])?)?;
        let boundaries: Vec<f64> = (0..=n).map(|_| r.f64()).collect();
        let mut segments = Vec::with_capacity(n);
        for _ in 0..n {
            r.require(4)?;
            let rows = r.u32();
            let count = crate::io::checked_size(&[rows, dim])?;
            r.require(crate::io::checked_size(&[count, 4])?)?;
            let data = (0..count).map(|_| T::lit(r.f32() as f64)).collect();
            segments.push(DenseMatrix::from_vec(rows, dim, data)?);
        }
        r.expect_total(r.position())?;
        Self::new(segments, boundaries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_bytes(path.as_ref())?)
    }
}

/// Frame ranges of `n` contiguous segments; earlier segments absorb the
/// remainder.
pub fn segment_frame_ranges(n_frames: usize, n: usize) -> Vec<(usize, usize)> {
    let base = n_frames / n;
    let rem = n_frames % n;
    let mut start = 0;
    (0..n)
        .map(|i| {
            let len = base + usize::from(i < rem);
            let r = (start, start + len);
            start += len;
            r
        })
        .collect()
}

/// Splits the spectrogram into `n` contiguous segments and each segment
/// into patches of `patch_len` frames (last patch zero-padded), flattened
/// frame-major to `patch_len · n_mels` values.
pub fn segment_audio<T: Scalar>(spec: &MelSpec<T>, n: usize, patch_len: usize) -> Result<AudioSegmentSet<T>> {
    if n == 0 || patch_len == 0 {
        return Err(TwmError::InvalidInput("segment count and patch_len must be >= 1".into()));
    }
    let n_frames = spec.n_frames();
    if n > n_frames {
        return Err(TwmError::InvalidInput(format!(
            "cannot split {n_frames} frames into {n} segments"
        )));
    }
    let n_mels = spec.n_mels();
    let ranges = segment_frame_ranges(n_frames, n);
    let mut segments = Vec::with_capacity(n);
    for &(start, end) in &ranges {
        let n_patches = (end - start).div_ceil(patch_len);
        let mut m = DenseMatrix::zeros(n_patches, patch_len * n_mels);
        for p in 0..n_patches {
            let row = m.row_mut(p);
            for f in 0..patch_len {
                let frame = start + p * patch_len + f;
                if frame >= end {
                    break;
                }
                row[f * n_mels..(f + 1) * n_mels].copy_from_slice(spec.values.row(frame));
            }
        }
        segments.push(m);
    }
    let mut boundaries: Vec<f64> = ranges.iter().map(|&(s, _)| s as f64 * spec.hop_s).collect();
    boundaries.push(n_frames as f64 * spec.hop_s);
    AudioSegmentSet::new(segments, boundaries)
}

/// Segments of roughly `segment_s` seconds: `n = round(duration/segment_s)`,
/// at least 1 and at most one per frame.
pub fn segment_audio_by_duration<T: Scalar>(
    spec: &MelSpec<T>,
    segment_s: f64,
    patch_len: usize,
) -> Result<AudioSegmentSet<T>> {
    if !(segment_s.is_finite() && segment_s > 0.0) {
        return Err(TwmError::InvalidInput(format!("segment length must be > 0 s, got {segment_s}")));
    }
    let n = ((spec.duration_s() / segment_s).round() as usize).clamp(1, spec.n_frames().max(1));
    segment_audio(spec, n, patch_len)
}

/// Key width and softmax scale `1/√d_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub d_k: usize,
    pub scale: f64,
}

impl AttentionConfig {
    pub fn new(d_k: usize) -> Result<Self> {
        if d_k == 0 {
            return Err(TwmError::InvalidInput("d_k must be >= 1".into()));
        }
        Ok(Self {
            d_k,
            scale: 1.0 / (d_k as f64).sqrt(),
        })
    }
}

/// `softmax(Q·Kᵀ·scale)·V`, returning the output and the weight matrix.
pub fn scaled_dot_attention<T: Scalar>(
    q: &DenseMatrix<T>,
    k: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
    scale: T,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    if q.cols() != k.cols() {
        return Err(TwmError::ShapeMismatch {
            op: "attention query/key",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    if k.rows() != v.rows() || k.rows() == 0 {
        return Err(TwmError::ShapeMismatch {
            op: "attention key/value",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    let mut weights = matmul_transposed(q, k)?.map(|x| x * scale);
    if !weights.is_finite() {
        return Err(TwmError::NonFiniteLogit);
    }
    for r in 0..weights.rows() {
        let row = softmax_unchecked(weights.row(r));
        weights.row_mut(r).copy_from_slice(&row);
    }
    let out = matmul(&weights, v)?;
    Ok((out, weights))
}

/// Per-feature mean and reciprocal standard deviation (population); a
/// feature with (near) zero spread gets scale 1.
#[derive(Debug, Clone)]
struct FeatureStats<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> FeatureStats<T> {
    fn over(mats: &[&DenseMatrix<T>]) -> Self {
        let dim = mats[0].cols();
        let count = T::from_usize_lossy(mats.iter().map(|m| m.rows()).sum());
        let mut mean = vec![T::zero(); dim];
        for m in mats {
            for row in m.iter_rows() {
                for (a, &x) in mean.iter_mut().zip(row) {
                    *a = *a + x;
                }
            }
        }
        mean.iter_mut().for_each(|a| *a = *a / count);
        let mut var = vec![T::zero(); dim];
        for m in mats {
            for row in m.iter_rows() {
                for ((a, &x), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    *a = *a + (x - mu) * (x - mu);
                }
            }
        }
        let tiny = T::lit(1e-12);
        let inv_std = var
            .into_iter()
            .map(|v| {
                let sd = (v / count).sqrt();
                if sd > tiny {
                    T::one() / sd
                } else {
                    T::one()
                }
            })
            .collect();
        Self { mean, inv_std }
    }

    fn apply(&self, m: &DenseMatrix<T>) -> DenseMatrix<T> {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for ((x, &mu), &s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *x = (*x - mu) * s;
            }
        }
        out
    }
}

/// Attention of the visual queries over one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAttention<T> {
    /// `softmax(Q·Kᵀ/√d_k)·V`, one row per visual query.
    pub attended: DenseMatrix<T>,
    /// Attention weights, queries × patches; rows sum to 1.
    pub weights: DenseMatrix<T>,
    /// Patch values `V`, patches × d_k.
    pub values: DenseMatrix<T>,
    /// Per-patch attended features `p·ā_j·V_j`, where `ā_j` is the mean
    /// attention patch `j` receives; equals `V` under uniform attention.
    pub patch_features: DenseMatrix<T>,
}

/// Output of the intra-segment branch: per-segment blocks and their
/// row-wise concatenation in segment order.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraAttention<T> {
    pub blocks: Vec<SegmentAttention<T>>,
    pub concatenated: DenseMatrix<T>,
}

/// Trainable audio encoder: single-head query/key/value maps plus the
/// output projection from the attention space into the visual space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AudioEncoder<T> {
    /// `d_k × visual_dim`
    pub w_q: DenseMatrix<T>,
    /// `d_k × patch_dim`
    pub w_k: DenseMatrix<T>,
    /// `d_k × patch_dim`
    pub w_v: DenseMatrix<T>,
    /// `d_k → visual_dim`
    pub output: ProjectionLayer<T>,
}

fn uniform_matrix<T: Scalar>(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix<T> {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::lit(rng.uniform(-bound, bound))).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("finite init")
}

impl<T: Scalar> AudioEncoder<T> {
    /// Uniform ±1/√fan_in initialization in the order q, k, v, output.
    pub fn init(visual_dim: usize, patch_dim: usize, d_k: usize, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, 7);
        let w_q = uniform_matrix(d_k, visual_dim, &mut rng);
        let w_k = uniform_matrix(d_k, patch_dim, &mut rng);
        let w_v = uniform_matrix(d_k, patch_dim, &mut rng);
        let output = ProjectionLayer::init_uniform(d_k, visual_dim, &mut rng);
        Self { w_q, w_k, w_v, output }
    }

    pub fn d_k(&self) -> usize {
        self.w_q.rows()
    }

    pub fn visual_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.w_k.cols()
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig::new(self.d_k()).expect("d_k >= 1")
    }

    fn check_inputs(&self, q_visual: &DenseMatrix<T>, segments: &AudioSegmentSet<T>) -> Result<()> {
        if q_visual.rows() == 0 {
            return Err(TwmError::NoVisualContext);
        }
        if q_visual.cols() != self.visual_dim() {
            return Err(TwmError::DimMismatch {
                context: "query role: visual dim",
                left: self.visual_dim(),
                right: q_visual.cols(),
            });
        }
        if segments.patch_dim() != self.patch_dim() {
            return Err(TwmError::DimMismatch {
                context: "key/value role: patch dim",
                left: self.patch_dim(),
                right: segments.patch_dim(),
            });
        }
        Ok(())
    }

    fn queries(&self, q_visual: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        matmul_transposed(q_visual, &self.w_q)
    }

    fn attend(&self, q: &DenseMatrix<T>, patches: &DenseMatrix<T>, stats: &FeatureStats<T>) -> Result<SegmentAttention<T>> {
        let keys = matmul_transposed(&stats.apply(patches), &self.w_k)?;
        let values = matmul_transposed(patches, &self.w_v)?;
        let scale = T::lit(self.attention_config().scale);
        let (attended, weights) = scaled_dot_attention(q, &keys, &values, scale)?;
        let patch_features = patch_features(&weights, &values);
        Ok(SegmentAttention {
            attended,
            weights,
            values,
            patch_features,
        })
    }

    pub fn n_params(&self) -> usize {
        self.w_q.data().len() + self.w_k.data().len() + self.w_v.data().len() + self.output.n_params()
    }

    /// Parameters in the order q, k, v, output weights, output bias.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(self.w_q.data());
        out.extend_from_slice(self.w_k.data());
        out.extend_from_slice(self.w_v.data());
        out.extend(self.output.to_flat());
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let (q, rest) = flat.split_at(self.w_q.data().len());
        let (k, rest) = rest.split_at(self.w_k.data().len());
        let (v, out) = rest.split_at(self.w_v.data().len());
        self.w_q.data_mut().copy_from_slice(q);
        self.w_k.data_mut().copy_from_slice(k);
        self.w_v.data_mut().copy_from_slice(v);
        self.output.set_flat(out);
    }

    pub fn is_finite(&self) -> bool {
        self.w_q.is_finite() && self.w_k.is_finite() && self.w_v.is_finite() && self.output.is_finite()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), serde_json::to_string(self)?.as_bytes())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let enc: Self = serde_json::from_slice(&read_bytes(path.as_ref())?)?;
        let d_k = enc.d_k();
        if enc.w_k.rows() != d_k || enc.w_v.rows() != d_k || enc.w_v.cols() != enc.w_k.cols() || enc.output.in_dim() != d_k {
            return Err(TwmError::InvalidInput("inconsistent audio encoder shapes".into()));
        }
        if !enc.is_finite() {
            return Err(TwmError::NonFinite("audio encoder"));
        }
        Ok(enc)
    }

    /// Embeds every segment and fuses the two branches.
    pub fn encode(
        &self,
        q_visual: &DenseMatrix<T>,
        segments: &AudioSegmentSet<T>,
        kernels: &[usize],
    ) -> Result<FusedSegments<T>> {
        let inter = inter_segment_attention(self, q_visual, segments)?;
        let intra = intra_segment_attention(self, q_visual, segments)?;
        fuse(&inter, &intra, kernels)
    }

    /// InfoNCE of a visual anchor against the projected segment embeddings
    /// (positive segment first, the others as negatives) and its gradient
    /// with respect to [`Self::to_flat`].
    pub fn alignment_loss_grad(
        &self,
        example: &AudioAlignExample<T>,
        kernels: &[usize],
        tau: T,
    ) -> Result<(T, Vec<T>)> {
        let segs = &example.segments;
        self.check_inputs(&example.q_visual, segs)?;
        if segs.n() < 2 {
            return Err(TwmError::InsufficientNegatives(segs.n()));
        }
        if example.positive >= segs.n() {
            return Err(TwmError::IndexOutOfRange {
                index: example.positive,
                len: segs.n(),
            });
        }
        if example.anchor.len() != self.visual_dim() {
            return Err(TwmError::DimMismatch {
                context: "audio alignment anchor",
                left: self.visual_dim(),
                right: example.anchor.len(),
            });
        }
        let half = T::lit(0.5);
        let q = self.queries(&example.q_visual)?;
        let global = FeatureStats::over(&segs.segments.iter().collect::<Vec<_>>());

        struct Branch<T> {
            std_patches: DenseMatrix<T>,
            keys: DenseMatrix<T>,
            att: SegmentAttention<T>,
        }
        let mut branches: Vec<[Branch<T>; 2]> = Vec::with_capacity(segs.n());
        let mut gammas = Vec::with_capacity(segs.n());
        let mut fused = Vec::with_capacity(segs.n());
        let mut projected = Vec::with_capacity(segs.n());
        for patches in &segs.segments {
            let local = FeatureStats::over(&[patches]);
            let make = |stats: &FeatureStats<T>| -> Result<Branch<T>> {
                let std_patches = stats.apply(patches);
                let keys = matmul_transposed(&std_patches, &self.w_k)?;
                let att = self.attend(&q, patches, stats)?;
                Ok(Branch { std_patches, keys, att })
            };
            let pair = [make(&global)?, make(&local)?];
            let gamma = pooled_mean_weights::<T>(patches.rows(), kernels);
            let mut u = vec![T::zero(); self.d_k()];
            for b in &pair {
                for (j, &g) in gamma.iter().enumerate() {
                    for (acc, &f) in u.iter_mut().zip(b.att.patch_features.row(j)) {
                        *acc = *acc + half * g * f;
                    }
                }
            }
            projected.push(self.output.project(&u)?);
            fused.push(u);
            gammas.push(gamma);
            branches.push(pair);
        }

        // Positive first, then the remaining segments in order.
        let order: Vec<usize> = std::iter::once(example.positive)
            .chain((0..segs.n()).filter(|&i| i != example.positive))
            .collect();
        let sims: Vec<T> = order
            .iter()
            .map(|&i| cosine_sim(&projected[i], &example.anchor))
            .collect::<Result<_>>()?;
        let (loss, sim_grads) = infonce_sim_grads(&sims, tau);

        let d_k = self.d_k();
        let mut g_q = DenseMatrix::<T>::zeros(q.rows(), d_k);
        let mut g_wk = DenseMatrix::<T>::zeros(d_k, self.patch_dim());
        let mut g_wv = DenseMatrix::<T>::zeros(d_k, self.patch_dim());
        let mut g_out_w = DenseMatrix::<T>::zeros(self.output.out_dim(), d_k);
        let mut g_out_b = vec![T::zero(); self.output.out_dim()];
        let scale = T::lit(self.attention_config().scale);
        let m_inv = T::one() / T::from_usize_lossy(q.rows());

        for (&i, &gs) in order.iter().zip(&sim_grads) {
            let dz: Vec<T> = cosine_grad_wrt_first(&projected[i], &example.anchor)?
                .into_iter()
                .map(|d| d * gs)
                .collect();
            for (r, &dzr) in dz.iter().enumerate() {
                g_out_b[r] = g_out_b[r] + dzr;
                for (w, &u) in g_out_w.row_mut(r).iter_mut().zip(&fused[i]) {
                    *w = *w + dzr * u;
                }
            }
            // du = W_outᵀ dz; each branch receives half.
            let mut du = vec![T::zero(); d_k];
            for (r, &dzr) in dz.iter().enumerate() {
                for (acc, &w) in du.iter_mut().zip(self.output.weights().row(r)) {
                    *acc = *acc + w * dzr;
                }
            }
            let de: Vec<T> = du.iter().map(|&x| x * half).collect();
            let patches = &segs.segments[i];
            let p = patches.rows();
            let p_t = T::from_usize_lossy(p);
            for b in &branches[i] {
                let a = &b.att.weights;
                let v = &b.att.values;
                // ā_j and its gradient
                let mut dv = DenseMatrix::<T>::zeros(p, d_k);
                let mut d_abar = vec![T::zero(); p];
                for j in 0..p {
                    let abar = (0..q.rows()).map(|r| a.get(r, j)).sum::<T>() * m_inv;
                    let g = gammas[i][j];
                    for (dst, &e) in dv.row_mut(j).iter_mut().zip(&de) {
                        *dst = p_t * abar * g * e;
                    }
                    d_abar[j] = p_t * g * dot(v.row(j), &de);
                }
                // dS = A ⊙ (dA − rowsum(dA ⊙ A)), dA[r, j] = d_abar[j]/m
                let mut ds = DenseMatrix::<T>::zeros(q.rows(), p);
                for r in 0..q.rows() {
                    let row = a.row(r);
                    let inner: T = row.iter().zip(&d_abar).map(|(&w, &d)| w * d * m_inv).sum();
                    for j in 0..p {
                        ds.set(r, j, row[j] * (d_abar[j] * m_inv - inner));
                    }
                }
                // dQ += scale·dS·K ; dK = scale·dSᵀ·Q
                let dq = matmul(&ds, &b.keys)?;
                for (acc, &x) in g_q.data_mut().iter_mut().zip(dq.data()) {
                    *acc = *acc + scale * x;
                }
                let dk = matmul(&ds.transpose(), &q)?;
                // dW_k += dKᵀ·std_patches ; dW_v += dVᵀ·patches
                let gk = matmul(&dk.transpose(), &b.std_patches)?;
                for (acc, &x) in g_wk.data_mut().iter_mut().zip(gk.data()) {
                    *acc = *acc + scale * x;
                }
                let gv = matmul(&dv.transpose(), patches)?;
                for (acc, &x) in g_wv.data_mut().iter_mut().zip(gv.data()) {
                    *acc = *acc + x;
                }
            }
        }
        let g_wq = matmul(&g_q.transpose(), &example.q_visual)?;

        let mut flat = Vec::with_capacity(self.n_params());
        flat.extend_from_slice(g_wq.data());
        flat.extend_from_slice(g_wk.data());
        flat.extend_from_slice(g_wv.data());
        flat.extend_from_slice(g_out_w.data());
        flat.extend_from_slice(&g_out_b);
        Ok((loss, flat))
    }
}

/// One audio↔visual training example: a clip's segments, the visual rows
/// used as attention queries, a visual anchor embedding and the index of
/// the segment that belongs with it.
#[derive(Debug, Clone)]
pub struct AudioAlignExample<T> {
    pub segments: AudioSegmentSet<T>,
    pub q_visual: DenseMatrix<T>,
    pub anchor: Vec<T>,
    pub positive: usize,
}

fn patch_features<T: Scalar>(weights: &DenseMatrix<T>, values: &DenseMatrix<T>) -> DenseMatrix<T> {
    let (m, p) = weights.shape();
    let p_t = T::from_usize_lossy(p);
    let m_inv = T::one() / T::from_usize_lossy(m);
    let mut out = values.clone();
    for j in 0..p {
        let abar = (0..m).map(|r| weights.get(r, j)).sum::<T>() * m_inv;
        for x in out.row_mut(j) {
            *x = *x * p_t * abar;
        }
    }
    out
}

/// Inter-segment branch: for every segment `i`, the visual queries attend
/// over that segment's patches with keys standardized by clip-wide
/// statistics, so each segment's weighting is calibrated against the whole
/// audio stream.
pub fn inter_segment_attention<T: Scalar>(
    encoder: &AudioEncoder<T>,
    q_visual: &DenseMatrix<T>,
    segments: &AudioSegmentSet<T>,
) -> Result<Vec<SegmentAttention<T>>> {
    encoder.check_inputs(q_visual, segments)?;
    let q = encoder.queries(q_visual)?;
    let global = FeatureStats::over(&segments.segments.iter().collect::<Vec<_>>());
    segments
        .segments
        .iter()
        .map(|patches| encoder.attend(&q, patches, &global))
        .collect()
}

/// Intra-segment branch: keys standardized with the segment's own
/// statistics, so each block depends on its segment alone. Blocks are
/// concatenated in segment order.
pub fn intra_segment_attention<T: Scalar>(
    encoder: &AudioEncoder<T>,
    q_visual: &DenseMatrix<T>,
    segments: &AudioSegmentSet<T>,
) -> Result<IntraAttention<T>> {
    encoder.check_inputs(q_visual, segments)?;
    let q = encoder.queries(q_visual)?;
    let blocks: Vec<SegmentAttention<T>> = segments
        .segments
        .iter()
        .map(|patches| encoder.attend(&q, patches, &FeatureStats::over(&[patches])))
        .collect::<Result<_>>()?;
    let d = encoder.d_k();
    let mut data = Vec::with_capacity(blocks.len() * q.rows() * d);
    for b in &blocks {
        data.extend_from_slice(b.attended.data());
    }
    let concatenated = DenseMatrix::from_vec(blocks.len() * q.rows(), d, data)?;
    Ok(IntraAttention { blocks, concatenated })
}

/// Mean pooling over the row (patch) axis at each kernel width with
/// stride = width; a trailing partial window is averaged over the rows it
/// has. Pooled maps are stacked in kernel order. Kernels wider than the row
/// count are skipped and returned; if every kernel is skipped the whole
/// segment is pooled as one window.
pub fn multi_kernel_pool<T: Scalar>(features: &DenseMatrix<T>, kernels: &[usize]) -> (DenseMatrix<T>, Vec<usize>) {
    let (p, d) = features.shape();
    let mut skipped = Vec::new();
    let mut widths: Vec<usize> = Vec::new();
    for &w in kernels {
        if w > p || w == 0 {
            skipped.push(w);
        } else {
            widths.push(w);
        }
    }
    if widths.is_empty() {
        widths.push(p.max(1));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for w in widths {
        let mut start = 0;
        while start < p {
            let end = (start + w).min(p);
            let inv = T::one() / T::from_usize_lossy(end - start);
            let mut acc = vec![T::zero(); d];
            for r in start..end {
                for (a, &x) in acc.iter_mut().zip(features.row(r)) {
                    *a = *a + x;
                }
            }
            data.extend(acc.into_iter().map(|a| a * inv));
            rows += 1;
            start = end;
        }
    }
    (DenseMatrix::from_vec(rows, d, data).expect("pooled finite"), skipped)
}

/// Weights `γ_j` such that the row-mean of [`multi_kernel_pool`] equals
/// `Σ_j γ_j · row_j`.
pub fn pooled_mean_weights<T: Scalar>(p: usize, kernels: &[usize]) -> Vec<T> {
    let mut widths: Vec<usize> = kernels.iter().copied().filter(|&w| w >= 1 && w <= p).collect();
    if widths.is_empty() {
        widths.push(p.max(1));
    }
    let mut gamma = vec![0.0f64; p];
    let mut rows = 0usize;
    for w in widths {
        let mut start = 0;
        while start < p {
            let end = (start + w).min(p);
            let share = 1.0 / (end - start) as f64;
            for g in &mut gamma[start..end] {
                *g += share;
            }
            rows += 1;
            start = end;
        }
    }
    gamma.into_iter().map(|g| T::lit(g / rows as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedSegments<T> {
    /// One embedding per segment (mean of its fused pooled map), `d_k` wide.
    pub embeddings: Vec<Vec<T>>,
    /// Per segment: `½(pool(inter) + pool(intra))`.
    pub pooled: Vec<DenseMatrix<T>>,
    /// `(segment, kernel)` pairs skipped for being wider than the segment.
    pub skipped: Vec<(usize, usize)>,
}

/// Pools both branches' patch features with every kernel and averages the
/// two pooled maps element-wise; each segment embedding is the row mean of
/// its fused map.
pub fn fuse<T: Scalar>(
    inter: &[SegmentAttention<T>],
    intra: &IntraAttention<T>,
    kernels: &[usize],
) -> Result<FusedSegments<T>> {
    if kernels.is_empty() {
        return Err(TwmError::InvalidInput("fuse needs at least one pooling kernel".into()));
    }
    if inter.len() != intra.blocks.len() {
        return Err(TwmError::DimMismatch {
            context: "fuse segment count",
            left: inter.len(),
            right: intra.blocks.len(),
        });
    }
    let half = T::lit(0.5);
    let mut out = FusedSegments {
        embeddings: Vec::with_capacity(inter.len()),
        pooled: Vec::with_capacity(inter.len()),
        skipped: Vec::new(),
    };
    for (i, (a, b)) in inter.iter().zip(&intra.blocks).enumerate() {
        if a.patch_features.shape() != b.patch_features.shape() {
            return Err(TwmError::ShapeMismatch {
                op: "fuse branches",
                lhs: a.patch_features.shape(),
                rhs: b.patch_features.shape(),
            });
        }
        let (pa, skipped) = multi_kernel_pool(&a.patch_features, kernels);
        let (pb, _) = multi_kernel_pool(&b.patch_features, kernels);
        for &w in &skipped {
            log::warn!("segment {i}: pooling kernel {w} exceeds {} patches, skipped", a.patch_features.rows());
            out.skipped.push((i, w));
        }
        let data: Vec<T> = pa.data().iter().zip(pb.data()).map(|(&x, &y)| half * (x + y)).collect();
        let map = DenseMatrix::from_vec(pa.rows(), pa.cols(), data)?;
        let inv = T::one() / T::from_usize_lossy(map.rows());
        let mut emb = vec![T::zero(); map.cols()];
        for row in map.iter_rows() {
            for (e, &x) in emb.iter_mut().zip(row) {
                *e = *e + x;
            }
        }
        emb.iter_mut().for_each(|e| *e = *e * inv);
        out.embeddings.push(emb);
        out.pooled.push(map);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AudioSelection<T> {
    /// Auditory buffer: segment index → fused embedding, in temporal order.
    pub buffer: WorkingBuffer<T>,
    /// Per-segment max cosine against the visual buffer.
    pub scores: Vec<T>,
}

/// Scores each segment by its best cosine against any visual-buffer
/// embedding (after `projection`, when given) and keeps the top `capacity`
/// segments; ties go to the earlier segment.
pub fn select_audio<T: Scalar>(
    fused: &[Vec<T>],
    visual_buffer: &WorkingBuffer<T>,
    capacity: usize,
    projection: Option<&ProjectionLayer<T>>,
) -> Result<AudioSelection<T>> {
    if visual_buffer.is_empty() {
        return Err(TwmError::NoVisualContext);
    }
    if capacity == 0 {
        return Err(TwmError::InvalidInput("audio buffer capacity must be >= 1".into()));
    }
    let scores: Vec<T> = fused
        .iter()
        .map(|e| {
            let z = match projection {
                Some(p) => p.project(e)?,
                None => e.clone(),
            };
            let mut best = T::neg_infinity();
            for v in visual_buffer.embeddings() {
                best = best.max(cosine_sim(&z, v)?);
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..fused.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut buffer = WorkingBuffer::new(capacity.min(fused.len()));
    for &i in order.iter().take(capacity) {
        buffer.insert(i, fused[i].clone())?;
    }
    Ok(AudioSelection { buffer, scores })
}
