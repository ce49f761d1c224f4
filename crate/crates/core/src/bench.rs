//! Planted-relevance benchmark.
//!
//! Each scenario hides query-aligned spans in a sequence of random frames.
//! Selections are scored by how many planted frames they keep, against a
//! uniform-stride baseline at the same budget and an exhaustive oracle.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{Pair, ProjectionLayer};
use crate::audio::{segment_frame_ranges, select_audio};
use crate::error::{Result, TwmError};
use crate::io::{read_bytes, write_bytes, EmbeddingSequence, Modality, QueryEmbedding, TwmConfig};
use crate::scalar::Scalar;
use crate::tensor::{normalized, DenseMatrix, SeededRng};
use crate::visual::{relevance, select_visual, uniform_indices, WorkingBuffer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedScenario {
    pub n_frames: usize,
    pub dim: usize,
    /// Half-open `[start, end)` frame ranges, sorted and disjoint.
    pub planted_spans: Vec<(usize, usize)>,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Parameters for drawing random scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioGen {
    pub min_frames: usize,
    pub max_frames: usize,
    pub dim: usize,
    pub n_spans: usize,
    /// Total planted fraction of the sequence, split evenly across spans.
    pub planted_fraction: f64,
    pub noise_sigma: f64,
}

impl Default for ScenarioGen {
    fn default() -> Self {
        Self {
            min_frames: 210,
            max_frames: 630,
            dim: 64,
            n_spans: 1,
            planted_fraction: 0.1,
            noise_sigma: 0.2,
        }
    }
}

impl ScenarioGen {
    /// One scenario per seed: length uniform in `[min_frames, max_frames]`,
    /// spans placed uniformly at random in disjoint equal slots.
    pub fn scenario(&self, seed: u64) -> PlantedScenario {
        let mut rng = SeededRng::derive(seed, 100);
        let n = rng.range(self.min_frames, self.max_frames + 1);
        let spans = self.n_spans.max(1);
        let span_len = (((n as f64) * self.planted_fraction / spans as f64).round() as usize).max(1);
        let slot = n / spans;
        let planted_spans = (0..spans)
            .map(|s| {
                let room = slot.saturating_sub(span_len);
                let start = s * slot + rng.range(0, room + 1);
                (start, (start + span_len).min(n))
            })
            .collect();
        PlantedScenario {
            n_frames: n,
            dim: self.dim,
            planted_spans,
            noise_sigma: self.noise_sigma,
            seed,
        }
    }

    /// Seeds `base_seed, base_seed + 1, …`.
    pub fn scenarios(&self, count: usize, base_seed: u64) -> Vec<PlantedScenario> {
        (0..count as u64).map(|i| self.scenario(base_seed.wrapping_add(i))).collect()
    }
}

impl PlantedScenario {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(TwmError::InvalidInput(format!("scenario dim must be >= 2, got {}", self.dim)));
        }
        if self.n_frames == 0 {
            return Err(TwmError::InvalidInput("scenario needs at least one frame".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(TwmError::InvalidInput(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        let mut prev_end = 0;
        for &(s, e) in &self.planted_spans {
            if s >= e || e > self.n_frames || s < prev_end {
                return Err(TwmError::InvalidInput(format!(
                    "planted span [{s}, {e}) must be non-empty, in range and after the previous span"
                )));
            }
            prev_end = e;
        }
        Ok(())
    }

    pub fn is_planted(&self, i: usize) -> bool {
        self.planted_spans.iter().any(|&(s, e)| (s..e).contains(&i))
    }

    pub fn planted_count(&self) -> usize {
        self.planted_spans.iter().map(|&(s, e)| e - s).sum()
    }
}

/// A generated scenario with its ground truth.
#[derive(Debug, Clone)]
pub struct PlantedInstance<T> {
    pub sequence: EmbeddingSequence<T>,
    pub query: QueryEmbedding<T>,
    /// Sorted planted frame indices.
    pub planted: Vec<usize>,
}

/// Planted frames are `q + ε`, others `r + ε` for a fresh random unit `r`;
/// `ε` has i.i.d. `N(0, σ²/dim)` components (expected norm about `σ`);
/// every frame is then unit-normalized. The query is a random unit vector.
pub fn generate_scenario<T: Scalar>(spec: &PlantedScenario) -> Result<PlantedInstance<T>> {
    spec.validate()?;
    let dim = spec.dim;
    let mut rng = SeededRng::derive(spec.seed, 101);
    let unit = |rng: &mut SeededRng| loop {
        let v: Vec<f64> = rng.normal_vec(dim);
        if let Ok(u) = normalized(&v) {
            return u;
        }
    };
    let q = unit(&mut rng);
    let per = spec.noise_sigma / (dim as f64).sqrt();
    let mut data = Vec::with_capacity(spec.n_frames * dim);
    for i in 0..spec.n_frames {
        let base = if spec.is_planted(i) { q.clone() } else { unit(&mut rng) };
        let noisy: Vec<f64> = base.iter().map(|&b| b + per * rng.normal()).collect();
        let frame = normalized(&noisy).unwrap_or(base);
        data.extend(frame.into_iter().map(T::lit));
    }
    let matrix = DenseMatrix::from_vec(spec.n_frames, dim, data)?;
    let planted = (0..spec.n_frames).filter(|&i| spec.is_planted(i)).collect();
    Ok(PlantedInstance {
        sequence: EmbeddingSequence::new(Modality::Visual, matrix, None)?,
        query: QueryEmbedding::new(q.into_iter().map(T::lit).collect(), None)?,
        planted,
    })
}

/// The `budget` most relevant frames (α₂ = 1), ties to the lower index,
/// returned sorted.
pub fn oracle_topk<T: Scalar>(
    seq: &EmbeddingSequence<T>,
    query: &QueryEmbedding<T>,
    projection: &ProjectionLayer<T>,
    budget: usize,
) -> Result<Vec<usize>> {
    if budget > seq.n_items() {
        return Err(TwmError::InvalidInput(format!(
            "budget {budget} exceeds {} frames",
            seq.n_items()
        )));
    }
    let scores: Vec<T> = (0..seq.n_items())
        .map(|i| relevance(seq.item(i), query, projection))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..seq.n_items()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut top = order[..budget].to_vec();
    top.sort_unstable();
    Ok(top)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    /// Visual and auditory working memory.
    Full,
    /// Visual search only; audio segments picked uniformly.
    VwmOnly,
    /// Uniform frames; audio selected against them.
    AwmOnly,
    /// Uniform frames and uniform audio.
    None,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [Self::Full, Self::VwmOnly, Self::AwmOnly, Self::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::VwmOnly => "vwm_only",
            Self::AwmOnly => "awm_only",
            Self::None => "none",
        }
    }

    fn visual_search(self) -> bool {
        matches!(self, Self::Full | Self::VwmOnly)
    }

    fn audio_search(self) -> bool {
        matches!(self, Self::Full | Self::AwmOnly)
    }
}

impl fmt::Display for AblationArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationArm {
    type Err = TwmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| TwmError::InvalidInput(format!("unknown ablation arm '{s}' (expected full, vwm_only, awm_only or none)")))
    }
}

/// One scenario under one arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionMetrics {
    pub scenario: usize,
    pub seed: u64,
    pub arm: AblationArm,
    pub n_frames: usize,
    pub buffer_size: usize,
    /// Planted frames kept ÷ min(buffer size, planted count).
    pub planted_recall: f64,
    /// Fraction of planted spans with at least one kept frame.
    pub span_coverage: f64,
    /// `planted_recall` of uniform-stride sampling at the same budget.
    pub baseline_recall: f64,
    /// `planted_recall` of the exhaustive top-budget oracle.
    pub oracle_recall: f64,
    /// Fraction of kept audio segments overlapping a planted span.
    pub audio_hit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: AblationArm,
    pub scenarios: usize,
    pub mean_planted_recall: f64,
    pub mean_span_coverage: f64,
    pub mean_buffer_size: f64,
    pub mean_baseline_recall: f64,
    pub mean_oracle_recall: f64,
    pub mean_audio_hit: f64,
    /// Scenarios where the arm's recall beats / loses to / ties the baseline.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided exact sign-test p-value for "arm beats baseline".
    pub sign_test_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    /// Grouped by arm (in request order), then scenario order.
    pub rows: Vec<SelectionMetrics>,
    pub summary: Vec<ArmSummary>,
}

fn recall(selected: &[usize], spec: &PlantedScenario) -> f64 {
    let denom = selected.len().min(spec.planted_count());
    if denom == 0 {
        return 0.0;
    }
    let hits = selected.iter().filter(|&&i| spec.is_planted(i)).count();
    hits as f64 / denom as f64
}

fn coverage(selected: &[usize], spec: &PlantedScenario) -> f64 {
    if spec.planted_spans.is_empty() {
        return 0.0;
    }
    let covered = spec
        .planted_spans
        .iter()
        .filter(|&&(s, e)| selected.iter().any(|i| (s..e).contains(i)))
        .count();
    covered as f64 / spec.planted_spans.len() as f64
}

/// `P(X ≥ wins)` for `X ~ Binomial(wins + losses, ½)`.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let ln_half_n = n as f64 * 0.5f64.ln();
    // ln C(n, k) built incrementally
    let mut ln_c = 0.0f64;
    let mut total = 0.0f64;
    for k in 0..=n {
        if k > 0 {
            ln_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            total += (ln_c + ln_half_n).exp();
        }
    }
    total.min(1.0)
}

/// Synthetic audio for a scenario: one embedding per contiguous segment,
/// the normalized mean of its frames, in the visual space.
fn audio_segments<T: Scalar>(seq: &EmbeddingSequence<T>, n_segments: usize) -> Vec<(usize, usize, Vec<T>)> {
    let n = n_segments.clamp(1, seq.n_items());
    segment_frame_ranges(seq.n_items(), n)
        .into_iter()
        .map(|(s, e)| {
            let mut mean = vec![T::zero(); seq.dim()];
            for i in s..e {
                for (m, &x) in mean.iter_mut().zip(seq.item(i)) {
                    *m = *m + x;
                }
            }
            let emb = normalized(&mean).unwrap_or(mean);
            (s, e, emb)
        })
        .collect()
}

fn run_one<T: Scalar>(
    index: usize,
    spec: &PlantedScenario,
    config: &TwmConfig,
    arms: &[AblationArm],
) -> Result<Vec<SelectionMetrics>> {
    let inst = generate_scenario::<T>(spec)?;
    let seq = &inst.sequence;
    let projection = ProjectionLayer::identity(spec.dim);
    let twm = select_visual(seq, &inst.query, &projection, config)?;
    let twm_idx = twm.buffer.indices();
    let budget = twm_idx.len();
    let uniform = uniform_indices(seq.n_items(), budget);
    let oracle = oracle_topk(seq, &inst.query, &projection, budget)?;
    let baseline_recall = recall(&uniform, spec);
    let oracle_recall = recall(&oracle, spec);
    let segments = audio_segments(seq, config.n_audio_segments);
    let fused: Vec<Vec<T>> = segments.iter().map(|(_, _, e)| e.clone()).collect();

    arms.iter()
        .map(|&arm| {
            let (visual_idx, visual_buf) = if arm.visual_search() {
                (twm_idx.clone(), twm.buffer.clone())
            } else {
                (uniform.clone(), WorkingBuffer::from_indices(seq, &uniform)?)
            };
            let capacity = config.audio_buffer_capacity.min(fused.len());
            let audio_idx = if arm.audio_search() {
                select_audio(&fused, &visual_buf, capacity, None)?.buffer.indices()
            } else {
                uniform_indices(fused.len(), capacity)
            };
            let audio_hits = audio_idx
                .iter()
                .filter(|&&a| {
                    let (s, e, _) = segments[a];
                    spec.planted_spans.iter().any(|&(ps, pe)| ps < e && s < pe)
                })
                .count();
            Ok(SelectionMetrics {
                scenario: index,
                seed: spec.seed,
                arm,
                n_frames: spec.n_frames,
                buffer_size: visual_idx.len(),
                planted_recall: recall(&visual_idx, spec),
                span_coverage: coverage(&visual_idx, spec),
                baseline_recall,
                oracle_recall,
                audio_hit: audio_hits as f64 / audio_idx.len().max(1) as f64,
            })
        })
        .collect()
}

fn summarize(arm: AblationArm, rows: &[&SelectionMetrics]) -> ArmSummary {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&SelectionMetrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    let wins = rows.iter().filter(|r| r.planted_recall > r.baseline_recall).count();
    let losses = rows.iter().filter(|r| r.planted_recall < r.baseline_recall).count();
    ArmSummary {
        arm,
        scenarios: rows.len(),
        mean_planted_recall: mean(|r| r.planted_recall),
        mean_span_coverage: mean(|r| r.span_coverage),
        mean_buffer_size: mean(|r| r.buffer_size as f64),
        mean_baseline_recall: mean(|r| r.baseline_recall),
        mean_oracle_recall: mean(|r| r.oracle_recall),
        mean_audio_hit: mean(|r| r.audio_hit),
        wins,
        losses,
        ties: rows.len() - wins - losses,
        sign_test_p: sign_test_p(wins, losses),
    }
}

/// Runs every scenario under each arm. Scenarios run in parallel; all arms
/// of a scenario share one generated instance, and results are merged in
/// scenario order.
pub fn run_bench<T: Scalar>(
    scenarios: &[PlantedScenario],
    config: &TwmConfig,
    arms: &[AblationArm],
) -> Result<BenchReport> {
    if scenarios.is_empty() {
        return Err(TwmError::InvalidInput("no scenarios".into()));
    }
    if arms.is_empty() {
        return Err(TwmError::InvalidInput("no ablation arms".into()));
    }
    config.validate()?;
    let per_scenario: Vec<Vec<SelectionMetrics>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(i, s)| run_one::<T>(i, s, config, arms))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(scenarios.len() * arms.len());
    let mut summary = Vec::with_capacity(arms.len());
    for (a, &arm) in arms.iter().enumerate() {
        let arm_rows: Vec<&SelectionMetrics> = per_scenario.iter().map(|r| &r[a]).collect();
        summary.push(summarize(arm, &arm_rows));
        rows.extend(arm_rows.into_iter().cloned());
    }
    Ok(BenchReport { rows, summary })
}

pub const CSV_HEADER: &str =
    "scenario,seed,arm,n_frames,buffer_size,planted_recall,span_coverage,baseline_recall,oracle_recall,audio_hit";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.scenario,
                r.seed,
                r.arm,
                r.n_frames,
                r.buffer_size,
                r.planted_recall,
                r.span_coverage,
                r.baseline_recall,
                r.oracle_recall,
                r.audio_hit
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }

    /// Fixed-width aggregate table for terminals.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<9} {:>5} {:>8} {:>8} {:>8} {:>8} {:>7} {:>10}\n",
            "arm", "n", "recall", "baseline", "oracle", "coverage", "audio", "sign_p"
        );
        for s in &self.summary {
            out.push_str(&format!(
                "{:<9} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>7.4} {:>10.3e}\n",
                s.arm.as_str(),
                s.scenarios,
                s.mean_planted_recall,
                s.mean_baseline_recall,
                s.mean_oracle_recall,
                s.mean_span_coverage,
                s.mean_audio_hit,
                s.sign_test_p
            ));
        }
        out
    }

    /// Writes `results.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| TwmError::io(dir, e))?;
        write_bytes(&dir.join("results.csv"), self.to_csv().as_bytes())?;
        write_bytes(&dir.join("summary.json"), self.summary_json().as_bytes())
    }
}

pub fn load_scenarios(path: impl AsRef<Path>) -> Result<Vec<PlantedScenario>> {
    let scenarios: Vec<PlantedScenario> = serde_json::from_slice(&read_bytes(path.as_ref())?)?;
    for s in &scenarios {
        s.validate()?;
    }
    Ok(scenarios)
}

/// Random `dim × dim` orthogonal matrix (Gram-Schmidt on Gaussian rows).
pub fn random_rotation(dim: usize, rng: &mut SeededRng) -> DenseMatrix<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = rng.normal_vec(dim);
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, &y)| *x -= d * y);
        }
        if let Ok(u) = normalized(&v) {
            rows.push(u);
        }
    }
    DenseMatrix::from_rows(&rows).expect("finite rotation")
}

/// Pairs `(v, R·v)` for random unit `v` and one random rotation `R`: a
/// linear map aligns them perfectly.
pub fn rotation_pairs<T: Scalar>(n: usize, dim: usize, seed: u64) -> Vec<Pair<T>> {
    let mut rng = SeededRng::derive(seed, 200);
    let rot = random_rotation(dim, &mut rng);
    (0..n)
        .map(|_| {
            let v = normalized(&rng.normal_vec::<f64>(dim)).expect("nonzero");
            let t: Vec<f64> = (0..dim)
                .map(|r| rot.row(r).iter().zip(&v).map(|(a, b)| a * b).sum())
                .collect();
            (v.into_iter().map(T::lit).collect(), t.into_iter().map(T::lit).collect())
        })
        .collect()
}
