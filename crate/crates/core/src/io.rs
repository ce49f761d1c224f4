//! Embedding sequences, queries and configs, plus their on-disk formats.
//!
//! TWM1 binary layout (little-endian):
//!
//! | offset | size        | field                                  |
//! |--------|-------------|----------------------------------------|
//! | 0      | 4           | magic `"TWM1"`                         |
//! | 4      | 2           | format version, `u16` = 1              |
//! | 6      | 1           | modality (0 visual, 1 audio, 2 text)   |
//! | 7      | 1           | reserved, 0                            |
//! | 8      | 4           | `n_items: u32`                         |
//! | 12     | 4           | `dim: u32`                             |
//! | 16     | 8·n         | timestamps, `f64` seconds              |
//! | …      | 4·n·dim     | embeddings, `f32`, row-major           |
//!
//! The JSON form is `{"modality", "dim", "timestamps"?, "embeddings"}`;
//! missing timestamps default to the item index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TwmError};
use crate::scalar::Scalar;
use crate::tensor::{norm, DenseMatrix};

pub const TWM1_MAGIC: &[u8; 4] = b"TWM1";
pub const FORMAT_VERSION: u16 = 1;
pub const TWM1_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
            Modality::Text => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Visual),
            1 => Ok(Modality::Audio),
            2 => Ok(Modality::Text),
            other => Err(TwmError::InvalidHeader(format!("unknown modality {other}"))),
        }
    }
}

/// Time-ordered per-item embeddings (frames or audio patches).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence<T> {
    modality: Modality,
    embeddings: DenseMatrix<T>,
    timestamps_s: Vec<f64>,
}

impl<T: Scalar> EmbeddingSequence<T> {
    pub fn new(
        modality: Modality,
        embeddings: DenseMatrix<T>,
        timestamps_s: Option<Vec<f64>>,
    ) -> Result<Self> {
        let (n, dim) = embeddings.shape();
        if n == 0 {
            return Err(TwmError::InvalidInput("embedding sequence is empty".into()));
        }
        if dim == 0 {
            return Err(TwmError::InvalidInput("embedding dim is 0".into()));
        }
        if !embeddings.is_finite() {
            return Err(TwmError::NonFinite("embeddings"));
        }
        let timestamps_s = timestamps_s.unwrap_or_else(|| (0..n).map(|i| i as f64).collect());
        if timestamps_s.len() != n {
            return Err(TwmError::DimMismatch {
                context: "timestamps",
                left: n,
                right: timestamps_s.len(),
            });
        }
        if timestamps_s.iter().any(|t| !t.is_finite()) {
            return Err(TwmError::NonFinite("timestamps"));
        }
        if timestamps_s.windows(2).any(|w| w[1] < w[0]) {
            return Err(TwmError::InvalidInput("timestamps must be nondecreasing".into()));
        }
        Ok(Self {
            modality,
            embeddings,
            timestamps_s,
        })
    }

    pub fn from_rows<R: AsRef<[T]>>(modality: Modality, rows: &[R]) -> Result<Self> {
        Self::new(modality, DenseMatrix::from_rows(rows)?, None)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn n_items(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &DenseMatrix<T> {
        &self.embeddings
    }

    pub fn timestamps_s(&self) -> &[f64] {
        &self.timestamps_s
    }

    pub fn item(&self, i: usize) -> &[T] {
        self.embeddings.row(i)
    }
}

/// Query vector in the target (text) space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct QueryEmbedding<T> {
    vector: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_text: Option<String>,
}

impl<T: Scalar> QueryEmbedding<T> {
    pub fn new(vector: Vec<T>, source_text: Option<String>) -> Result<Self> {
        if vector.is_empty() {
            return Err(TwmError::InvalidInput("query vector is empty".into()));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(TwmError::NonFinite("query"));
        }
        if norm(&vector) == T::zero() {
            return Err(TwmError::ZeroNorm);
        }
        Ok(Self {
            vector,
            source_text,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn vector(&self) -> &[T] {
        &self.vector
    }

    pub fn source_text(&self) -> Option<&str> {
        self.source_text.as_deref()
    }

    /// Same direction, scaled by `c`.
    pub fn scaled(&self, c: T) -> Result<Self> {
        Self::new(
            self.vector.iter().map(|&v| v * c).collect(),
            self.source_text.clone(),
        )
    }
}

/// Which frames an iteration of the visual search commits to the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommitMode {
    /// Every frame drawn from the window around the midpoint.
    #[default]
    CommitWindow,
    /// Only the top-scoring frame of the iteration.
    CommitArgmax,
}

impl std::str::FromStr for CommitMode {
    type Err = TwmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "commit-window" => Ok(CommitMode::CommitWindow),
            "commit-argmax" => Ok(CommitMode::CommitArgmax),
            other => Err(TwmError::InvalidConfig(format!("unknown commit mode {other:?}"))),
        }
    }
}

fn default_tau() -> f64 {
    0.07
}
fn default_n_audio_segments() -> usize {
    6
}
fn default_audio_buffer_capacity() -> usize {
    1
}
fn default_pool_kernels() -> Vec<usize> {
    vec![2, 4, 8]
}
fn default_seed() -> u64 {
    42
}
fn default_patch_len() -> usize {
    8
}
fn default_d_k() -> usize {
    64
}

/// Search hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwmConfig {
    pub k: usize,
    pub iterations: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_n_audio_segments")]
    pub n_audio_segments: usize,
    #[serde(default = "default_audio_buffer_capacity")]
    pub audio_buffer_capacity: usize,
    #[serde(default = "default_pool_kernels")]
    pub pool_kernels: Vec<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub commit_mode: CommitMode,
    /// Mel frames per audio patch.
    #[serde(default = "default_patch_len")]
    pub patch_len: usize,
    /// Attention key/value width of the audio encoder.
    #[serde(default = "default_d_k")]
    pub d_k: usize,
}

impl TwmConfig {
    /// Config with the given search parameters and defaults elsewhere.
    pub fn new(k: usize, iterations: usize, alpha1: f64, alpha2: f64) -> Self {
        Self {
            k,
            iterations,
            alpha1,
            alpha2,
            tau: default_tau(),
            n_audio_segments: default_n_audio_segments(),
            audio_buffer_capacity: default_audio_buffer_capacity(),
            pool_kernels: default_pool_kernels(),
            seed: default_seed(),
            commit_mode: CommitMode::default(),
            patch_len: default_patch_len(),
            d_k: default_d_k(),
        }
    }

    /// 60 s clips: k = 11, 6 iterations, twelve 5 s audio segments, one kept.
    pub fn music_avqa() -> Self {
        Self {
            n_audio_segments: 12,
            audio_buffer_capacity: 1,
            ..Self::new(11, 6, 0.2, 0.8)
        }
    }

    /// Short 21 fps clips: k = 3, 3 iterations, balanced weights.
    pub fn msr_vtt() -> Self {
        Self::new(3, 3, 0.5, 0.5)
    }

    /// Long 30 fps clips: k = 5, 7 iterations, diversity-leaning weights.
    pub fn cmd() -> Self {
        Self::new(5, 7, 0.6, 0.4)
    }

    /// `music-avqa`, `msr-vtt` or `cmd`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "music-avqa" => Ok(Self::music_avqa()),
            "msr-vtt" => Ok(Self::msr_vtt()),
            "cmd" => Ok(Self::cmd()),
            other => Err(TwmError::InvalidConfig(format!(
                "unknown preset '{other}' (expected music-avqa, msr-vtt or cmd)"
            ))),
        }
    }

    pub fn with_mode(mut self, mode: CommitMode) -> Self {
        self.commit_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TwmError::InvalidConfig(msg));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.alpha1.is_finite() && self.alpha2.is_finite()) {
            return bad("alpha weights must be finite".into());
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return bad("alpha weights must be non-negative".into());
        }
        if (self.alpha1 + self.alpha2 - 1.0).abs() > 1e-9 {
            return bad(format!(
                "alpha1 + alpha2 must equal 1, got {} + {}",
                self.alpha1, self.alpha2
            ));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.n_audio_segments == 0 {
            return bad("n_audio_segments must be >= 1".into());
        }
        if self.audio_buffer_capacity == 0 {
            return bad("audio_buffer_capacity must be >= 1".into());
        }
        if self.pool_kernels.is_empty() || self.pool_kernels.contains(&0) {
            return bad("pool_kernels must be non-empty positive widths".into());
        }
        if self.patch_len == 0 {
            return bad("patch_len must be >= 1".into());
        }
        if self.d_k == 0 {
            return bad("d_k must be >= 1".into());
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<TwmConfig> {
    let cfg: TwmConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sorted index list as a one-line JSON array.
pub fn indices_json(indices: &[usize]) -> String {
    let mut s = serde_json::to_string(indices).expect("indices serialize");
    s.push('\n');
    s
}

pub fn load_config(path: impl AsRef<Path>) -> Result<TwmConfig> {
    parse_config(&read_text(path.as_ref())?)
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| TwmError::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| TwmError::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| TwmError::io(path, e))
}

/// Little-endian append-only encoder shared by the binary formats.
#[derive(Default)]
pub(crate) struct ByteWriter(Vec<u8>);

impl ByteWriter {
    pub fn with_header(magic: &[u8; 4]) -> Self {
        let mut w = Self(Vec::new());
        w.0.extend_from_slice(magic);
        w.u16(FORMAT_VERSION);
        w
    }
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("size fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

/// Bounds-checked little-endian decoder. Reads past the end report the
/// byte count the caller declared up front.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Checks the magic and version, leaving the cursor after them.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], min_len: usize) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(TwmError::UnrecognizedFormat);
        }
        if buf.len() < min_len {
            return Err(TwmError::Corrupt {
                expected: min_len,
                found: buf.len(),
            });
        }
        let mut r = Self { buf, pos: 4 };
        let version = r.u16();
        if version != FORMAT_VERSION {
            return Err(TwmError::InvalidHeader(format!("unsupported version {version}")));
        }
        Ok(r)
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Fails unless exactly `expected` bytes make up the buffer.
    pub fn expect_total(&self, expected: usize) -> Result<()> {
        if self.buf.len() != expected {
            return Err(TwmError::Corrupt {
                expected,
                found: self.buf.len(),
            });
        }
        Ok(())
    }

    /// Fails unless at least `needed` more bytes are available.
    pub fn require(&self, needed: usize) -> Result<()> {
        match self.pos.checked_add(needed) {
            Some(end) if end <= self.buf.len() => Ok(()),
            _ => Err(TwmError::Corrupt {
                expected: self.pos.saturating_add(needed),
                found: self.buf.len(),
            }),
        }
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
    pub fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    pub fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    pub fn u32(&mut self) -> usize {
        u32::from_le_bytes(self.take()) as usize
    }
    pub fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
    pub fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

/// `a * b * c` or an invalid-header error on overflow.
pub(crate) fn checked_size(parts: &[usize]) -> Result<usize> {
    parts
        .iter()
        .try_fold(1usize, |acc, &p| acc.checked_mul(p))
        .ok_or_else(|| TwmError::InvalidHeader("declared sizes overflow".into()))
}

pub fn encode_twm1<T: Scalar>(seq: &EmbeddingSequence<T>) -> Vec<u8> {
    let mut w = ByteWriter::with_header(TWM1_MAGIC);
    w.u8(seq.modality.code());
    w.u8(0);
    w.u32(seq.n_items());
    w.u32(seq.dim());
    for &t in &seq.timestamps_s {
        w.f64(t);
    }
    for &v in seq.embeddings.data() {
        w.f32(v.as_f32());
    }
    w.finish()
}

pub fn decode_twm1<T: Scalar>(bytes: &[u8]) -> Result<EmbeddingSequence<T>> {
    let mut r = ByteReader::open(bytes, TWM1_MAGIC, TWM1_HEADER_LEN)?;
    let modality = Modality::from_code(r.u8())?;
    let _reserved = r.u8();
    let n = r.u32();
    let dim = r.u32();
    if n == 0 || dim == 0 {
        return Err(TwmError::InvalidHeader(format!("n_items={n}, dim={dim}")));
    }
    let expected = checked_size(&[n, 8])?
        .checked_add(checked_size(&[n, dim, 4])?)
        .and_then(|s| s.checked_add(TWM1_HEADER_LEN))
        .ok_or_else(|| TwmError::InvalidHeader("declared sizes overflow".into()))?;
    r.expect_total(expected)?;
    let timestamps: Vec<f64> = (0..n).map(|_| r.f64()).collect();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        let v = r.f32();
        if !v.is_finite() {
            return Err(TwmError::NonFinite("embeddings"));
        }
        data.push(T::lit(v as f64));
    }
    EmbeddingSequence::new(modality, DenseMatrix::from_vec(n, dim, data)?, Some(timestamps))
}

#[derive(Serialize, Deserialize)]
struct EmbeddingJson {
    modality: Modality,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamps: Option<Vec<f64>>,
    embeddings: Vec<Vec<f64>>,
}

pub fn encode_json<T: Scalar>(seq: &EmbeddingSequence<T>) -> String {
    let doc = EmbeddingJson {
        modality: seq.modality,
        dim: seq.dim(),
        timestamps: Some(seq.timestamps_s.clone()),
        embeddings: seq
            .embeddings
            .iter_rows()
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("embedding JSON serializes")
}

pub fn decode_json<T: Scalar>(text: &str) -> Result<EmbeddingSequence<T>> {
    let doc: EmbeddingJson = serde_json::from_str(text)?;
    if doc.dim == 0 {
        return Err(TwmError::InvalidHeader("dim=0".into()));
    }
    if let Some(bad) = doc.embeddings.iter().find(|r| r.len() != doc.dim) {
        return Err(TwmError::DimMismatch {
            context: "json embeddings",
            left: doc.dim,
            right: bad.len(),
        });
    }
    let rows: Vec<Vec<T>> = doc
        .embeddings
        .iter()
        .map(|r| r.iter().map(|&v| T::lit(v)).collect())
        .collect();
    let matrix = if rows.is_empty() {
        DenseMatrix::zeros(0, doc.dim)
    } else {
        DenseMatrix::from_rows(&rows)?
    };
    EmbeddingSequence::new(doc.modality, matrix, doc.timestamps)
}

/// Decodes either encoding, dispatching on content rather than extension.
pub fn parse_embeddings<T: Scalar>(bytes: &[u8]) -> Result<EmbeddingSequence<T>> {
    if bytes.starts_with(TWM1_MAGIC) {
        return decode_twm1(bytes);
    }
    if first_non_ws(bytes) == Some(b'{') {
        let text = std::str::from_utf8(bytes).map_err(|_| TwmError::UnrecognizedFormat)?;
        return decode_json(text);
    }
    Err(TwmError::UnrecognizedFormat)
}

fn first_non_ws(bytes: &[u8]) -> Option<u8> {
    bytes.iter().copied().find(|b| !b.is_ascii_whitespace())
}

pub fn load_embeddings<T: Scalar>(path: impl AsRef<Path>) -> Result<EmbeddingSequence<T>> {
    parse_embeddings(&read_bytes(path.as_ref())?)
}

/// Writes the TWM1 binary encoding.
pub fn save_embeddings<T: Scalar>(seq: &EmbeddingSequence<T>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_twm1(seq))
}

pub fn save_embeddings_json<T: Scalar>(
    seq: &EmbeddingSequence<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_bytes(path.as_ref(), encode_json(seq).as_bytes())
}

/// Accepts `{"vector": [...], "source_text"?}` JSON, or any embedding file
/// holding exactly one item.
pub fn parse_query<T: Scalar>(bytes: &[u8]) -> Result<QueryEmbedding<T>> {
    if first_non_ws(bytes) == Some(b'{') {
        let value: serde_json::Value = serde_json::from_slice(bytes)?;
        if value.get("vector").is_some() {
            let q: QueryEmbedding<T> = serde_json::from_value(value)?;
            return QueryEmbedding::new(q.vector, q.source_text);
        }
    }
    let seq = parse_embeddings::<T>(bytes)?;
    if seq.n_items() != 1 {
        return Err(TwmError::InvalidInput(format!(
            "query file must hold exactly one embedding, found {}",
            seq.n_items()
        )));
    }
    QueryEmbedding::new(seq.item(0).to_vec(), None)
}

pub fn load_query<T: Scalar>(path: impl AsRef<Path>) -> Result<QueryEmbedding<T>> {
    parse_query(&read_bytes(path.as_ref())?)
}

pub fn save_query<T: Scalar>(query: &QueryEmbedding<T>, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(query)?;
    write_bytes(path.as_ref(), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use proptest::prelude::*;

    fn sample(n: usize, dim: usize, seed: u64) -> EmbeddingSequence<f64> {
        let mut rng = SeededRng::new(seed);
        // f32-representable values so the binary round-trip is exact.
        let data = (0..n * dim).map(|_| rng.normal() as f32 as f64).collect();
        let ts = (0..n).map(|i| i as f64 * 0.5).collect();
        EmbeddingSequence::new(
            Modality::Visual,
            DenseMatrix::from_vec(n, dim, data).unwrap(),
            Some(ts),
        )
        .unwrap()
    }

    #[test]
    fn binary_round_trip_3x4() {
        let seq = sample(3, 4, 1);
        let back: EmbeddingSequence<f64> = decode_twm1(&encode_twm1(&seq)).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_twm1(&sample(2, 2, 0));
        bytes[..4].copy_from_slice(b"XXXX");
        let err = parse_embeddings::<f64>(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "unrecognized format");
    }

    #[test]
    fn truncated_payload_reports_expected_size() {
        let bytes = encode_twm1(&sample(3, 4, 2));
        let full = bytes.len();
        let err = decode_twm1::<f64>(&bytes[..full - 3]).unwrap_err();
        assert!(
            err.to_string().starts_with(&format!("corrupt file: expected {full} bytes")),
            "{err}"
        );
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_twm1::<f64>(&longer), Err(TwmError::Corrupt { .. })));
    }

    #[test]
    fn zero_dim_header_is_invalid() {
        let mut bytes = encode_twm1(&sample(1, 1, 3));
        bytes[12..16].copy_from_slice(&0u32.to_le_bytes());
        let err = decode_twm1::<f64>(&bytes).unwrap_err();
        assert!(err.to_string().starts_with("invalid header"), "{err}");
    }

    #[test]
    fn one_by_one_file_size() {
        let bytes = encode_twm1(&sample(1, 1, 4));
        // fixed header + one f64 timestamp + one f32 value
        assert_eq!(bytes.len(), TWM1_HEADER_LEN + 8 + 4);
    }

    #[test]
    fn save_is_deterministic_and_stable_under_reload() {
        let dir = tempfile::tempdir().unwrap();
        let seq = sample(5, 3, 9);
        let (a, b, c) = (
            dir.path().join("a.twm"),
            dir.path().join("b.twm"),
            dir.path().join("c.twm"),
        );
        save_embeddings(&seq, &a).unwrap();
        save_embeddings(&seq, &b).unwrap();
        let first = fs::read(&a).unwrap();
        assert_eq!(first, fs::read(&b).unwrap());
        let reloaded: EmbeddingSequence<f64> = load_embeddings(&a).unwrap();
        save_embeddings(&reloaded, &c).unwrap();
        assert_eq!(first, fs::read(&c).unwrap());
    }

    #[test]
    fn json_and_binary_agree_within_f32() {
        let mut rng = SeededRng::new(11);
        let data: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let seq = EmbeddingSequence::new(
            Modality::Audio,
            DenseMatrix::from_vec(3, 4, data).unwrap(),
            None,
        )
        .unwrap();
        let from_bin: EmbeddingSequence<f64> = parse_embeddings(&encode_twm1(&seq)).unwrap();
        let from_json: EmbeddingSequence<f64> =
            parse_embeddings(encode_json(&seq).as_bytes()).unwrap();
        assert_eq!(from_bin.timestamps_s(), from_json.timestamps_s());
        for (a, b) in from_bin.embeddings().data().iter().zip(from_json.embeddings().data()) {
            assert!((a - b).abs() <= b.abs() * f32::EPSILON as f64);
        }
    }

    #[test]
    fn json_timestamps_default_to_index() {
        let text = r#"{"modality":"visual","dim":2,"embeddings":[[1,0],[0,1],[1,1]]}"#;
        let seq: EmbeddingSequence<f64> = parse_embeddings(text.as_bytes()).unwrap();
        assert_eq!(seq.timestamps_s(), &[0.0, 1.0, 2.0]);
        assert_eq!(seq.modality(), Modality::Visual);
    }

    #[test]
    fn json_row_length_checked() {
        let text = r#"{"modality":"visual","dim":2,"embeddings":[[1,0],[0]]}"#;
        assert!(parse_embeddings::<f64>(text.as_bytes()).is_err());
    }

    #[test]
    fn decreasing_timestamps_rejected() {
        let m = DenseMatrix::from_vec(2, 1, vec![1.0f64, 2.0]).unwrap();
        assert!(EmbeddingSequence::new(Modality::Visual, m, Some(vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn query_from_json_or_single_row() {
        let q: QueryEmbedding<f64> =
            parse_query(br#"{"vector":[0.0,2.0],"source_text":"a dog"}"#).unwrap();
        assert_eq!(q.vector(), &[0.0, 2.0]);
        assert_eq!(q.source_text(), Some("a dog"));
        let seq = sample(1, 3, 5);
        let q2: QueryEmbedding<f64> = parse_query(&encode_twm1(&seq)).unwrap();
        assert_eq!(q2.vector(), seq.item(0));
        assert!(parse_query::<f64>(&encode_twm1(&sample(2, 3, 5))).is_err());
        assert!(matches!(
            parse_query::<f64>(br#"{"vector":[0.0,0.0]}"#),
            Err(TwmError::ZeroNorm)
        ));
    }

    #[test]
    fn config_presets_validate() {
        for (text, k, it) in [
            (r#"{"k":11,"iterations":6,"alpha1":0.2,"alpha2":0.8}"#, 11, 6),
            (r#"{"k":3,"iterations":3,"alpha1":0.5,"alpha2":0.5}"#, 3, 3),
        ] {
            let cfg = parse_config(text).unwrap();
            assert_eq!((cfg.k, cfg.iterations), (k, it));
            assert_eq!(cfg.n_audio_segments, 6);
            assert_eq!(cfg.audio_buffer_capacity, 1);
            assert_eq!(cfg.pool_kernels, vec![2, 4, 8]);
            assert_eq!(cfg.seed, 42);
            assert_eq!(cfg.commit_mode, CommitMode::CommitWindow);
        }
        for preset in [TwmConfig::music_avqa(), TwmConfig::msr_vtt(), TwmConfig::cmd()] {
            preset.validate().unwrap();
        }
    }

    #[test]
    fn config_rejects_bad_weights_and_tau() {
        let err = parse_config(r#"{"k":3,"iterations":3,"alpha1":0.7,"alpha2":0.7}"#).unwrap_err();
        assert!(matches!(err, TwmError::InvalidConfig(_)));
        let err =
            parse_config(r#"{"k":3,"iterations":3,"alpha1":0.5,"alpha2":0.5,"tau":0}"#).unwrap_err();
        assert!(err.to_string().contains("tau"));
        assert!(parse_config(r#"{"k":0,"iterations":3,"alpha1":0.5,"alpha2":0.5}"#).is_err());
        assert!(parse_config(r#"{"k":3,"iterations":3,"alpha1":0.5,"alpha2":0.5,"bogus":1}"#).is_err());
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_identity(n in 1usize..6, dim in 1usize..6, seed in any::<u64>()) {
            let seq = sample(n, dim, seed);
            let bytes = encode_twm1(&seq);
            prop_assert_eq!(bytes.len(), TWM1_HEADER_LEN + 8 * n + 4 * n * dim);
            let back: EmbeddingSequence<f64> = decode_twm1(&bytes).unwrap();
            prop_assert_eq!(encode_twm1(&back), bytes);
            prop_assert_eq!(back, seq);
        }

        #[test]
        fn any_wrong_length_is_rejected(cut in 1usize..20) {
            let bytes = encode_twm1(&sample(2, 3, 8));
            let cut = cut.min(bytes.len() - 1);
            prop_assert!(decode_twm1::<f64>(&bytes[..bytes.len() - cut]).is_err());
        }
    }
}
