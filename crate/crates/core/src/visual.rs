//! Query-guided frame search and the visual working buffer.
//!
//! Each frame is scored `S = α₁·D + α₂·R`, where `R` is the cosine between
//! the projected frame and the query and `D = 1 − max cos` against frames
//! already held in the buffer. The search starts from `k` stratified frames,
//! then repeatedly takes the best-scoring candidate as a midpoint, draws `k`
//! frames uniformly from a window of width `N/k` around it (skipping frames
//! already buffered) and commits them.

use serde::Serialize;

use crate::align::ProjectionLayer;
use crate::error::{Result, TwmError};
use crate::io::{CommitMode, EmbeddingSequence, QueryEmbedding, TwmConfig};
use crate::scalar::Scalar;
use crate::tensor::{cosine_sim, DenseMatrix};

/// Bounded, deduplicated, index-ordered set of selected items.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingBuffer<T> {
    entries: Vec<(usize, Vec<T>)>,
    capacity: usize,
}

impl<T: Scalar> WorkingBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            capacity,
        }
    }

    /// Buffer holding the listed items of `seq` (duplicates collapse).
    pub fn from_indices(seq: &EmbeddingSequence<T>, indices: &[usize]) -> Result<Self> {
        let mut buf = Self::new(indices.len());
        for &i in indices {
            check_index(i, seq.n_items())?;
            buf.insert(i, seq.item(i).to_vec())?;
        }
        Ok(buf)
    }

    /// Inserts in index order. Returns `false` when the index is already
    /// present; a new index beyond capacity is an error.
    pub fn insert(&mut self, index: usize, embedding: Vec<T>) -> Result<bool> {
        match self.entries.binary_search_by_key(&index, |(i, _)| *i) {
            Ok(_) => Ok(false),
            Err(pos) => {
                if self.entries.len() >= self.capacity {
                    return Err(TwmError::InvalidInput(format!(
                        "working buffer full at capacity {}",
                        self.capacity
                    )));
                }
                self.entries.insert(pos, (index, embedding));
                Ok(true)
            }
        }
    }

    pub fn contains(&self, index: usize) -> bool {
        self.entries.binary_search_by_key(&index, |(i, _)| *i).is_ok()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[(usize, Vec<T>)] {
        &self.entries
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|(i, _)| *i).collect()
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &[T]> {
        self.entries.iter().map(|(_, e)| e.as_slice())
    }

    /// Embeddings stacked as rows, in index order.
    pub fn to_matrix(&self) -> Result<DenseMatrix<T>> {
        DenseMatrix::from_rows(&self.entries.iter().map(|(_, e)| e.as_slice()).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct ScoredFrame<T> {
    pub index: usize,
    pub distinctiveness: T,
    pub relevance: T,
    pub score: T,
}

fn check_index(index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(TwmError::IndexOutOfRange { index, len });
    }
    Ok(())
}

fn check_dims<T: Scalar>(
    seq_dim: usize,
    query: &QueryEmbedding<T>,
    projection: &ProjectionLayer<T>,
) -> Result<()> {
    if projection.in_dim() != seq_dim {
        return Err(TwmError::DimMismatch {
            context: "projection input vs frame dim",
            left: projection.in_dim(),
            right: seq_dim,
        });
    }
    if projection.out_dim() != query.dim() {
        return Err(TwmError::DimMismatch {
            context: "projection output vs query dim",
            left: projection.out_dim(),
            right: query.dim(),
        });
    }
    Ok(())
}

/// Cosine between the projected frame and the query.
pub fn relevance<T: Scalar>(
    frame_emb: &[T],
    query: &QueryEmbedding<T>,
    projection: &ProjectionLayer<T>,
) -> Result<T> {
    check_dims(frame_emb.len(), query, projection)?;
    cosine_sim(&projection.project(frame_emb)?, query.vector())
}

/// `1 − max cos(frame, entry)` over buffer entries, clamped to `[0, 1]`;
/// 1 for an empty buffer.
pub fn distinctiveness<T: Scalar>(frame_emb: &[T], buffer: &WorkingBuffer<T>) -> Result<T> {
    distinctiveness_excluding(frame_emb, buffer, None)
}

fn distinctiveness_excluding<T: Scalar>(
    frame_emb: &[T],
    buffer: &WorkingBuffer<T>,
    skip: Option<usize>,
) -> Result<T> {
    let mut best: Option<T> = None;
    for (i, e) in buffer.entries() {
        if Some(*i) == skip {
            continue;
        }
        let c = cosine_sim(frame_emb, e)?;
        best = Some(best.map_or(c, |b| b.max(c)));
    }
    match best {
        None => {
            if frame_emb.iter().all(|v| *v == T::zero()) {
                return Err(TwmError::ZeroNorm);
            }
            Ok(T::one())
        }
        Some(m) => Ok((T::one() - m).max(T::zero()).min(T::one())),
    }
}

/// Scores the listed frames. A frame's own buffer entry, if any, is
/// excluded from its distinctiveness.
pub fn score_frames<T: Scalar>(
    candidates: &EmbeddingSequence<T>,
    indices: &[usize],
    query: &QueryEmbedding<T>,
    projection: &ProjectionLayer<T>,
    buffer: &WorkingBuffer<T>,
    config: &TwmConfig,
) -> Result<Vec<ScoredFrame<T>>> {
    check_dims(candidates.dim(), query, projection)?;
    let (a1, a2) = (T::lit(config.alpha1), T::lit(config.alpha2));
    indices
        .iter()
        .map(|&index| {
            check_index(index, candidates.n_items())?;
            let emb = candidates.item(index);
            let relevance = cosine_sim(&projection.project(emb)?, query.vector())?;
            let distinctiveness = distinctiveness_excluding(emb, buffer, Some(index))?;
            Ok(ScoredFrame {
                index,
                distinctiveness,
                relevance,
                score: a1 * distinctiveness + a2 * relevance,
            })
        })
        .collect()
}

/// `count` items spread evenly over `items`: the element at
/// `⌊(j + ½)·len/count⌋` for `j < count`, or all items when `count ≥ len`.
pub fn stratified_pick(items: &[usize], count: usize) -> Vec<usize> {
    let len = items.len();
    if count >= len {
        return items.to_vec();
    }
    (0..count).map(|j| items[((2 * j + 1) * len) / (2 * count)]).collect()
}

/// Uniform-stride sampling of `budget` frames out of `n`.
pub fn uniform_indices(n: usize, budget: usize) -> Vec<usize> {
    stratified_pick(&(0..n).collect::<Vec<_>>(), budget)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct IterationTrace<T> {
    pub iteration: usize,
    /// Candidates scored this iteration.
    pub candidates: Vec<usize>,
    pub scores: Vec<ScoredFrame<T>>,
    pub midpoint: usize,
    /// Inclusive window bounds after clamping.
    pub window: (usize, usize),
    /// Frames drawn from the window; the next iteration's candidates.
    pub drawn: Vec<usize>,
    /// Frames newly inserted into the buffer.
    pub committed: Vec<usize>,
    pub buffer: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct SelectionTrace<T> {
    pub n_items: usize,
    pub k: usize,
    pub half_width: usize,
    pub mode: CommitMode,
    pub initial_candidates: Vec<usize>,
    pub iterations: Vec<IterationTrace<T>>,
    /// True when the loop stopped before the iteration cap.
    pub converged: bool,
}

impl<T: Scalar> SelectionTrace<T> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

#[derive(Debug, Clone)]
pub struct VisualSelection<T> {
    pub buffer: WorkingBuffer<T>,
    pub trace: SelectionTrace<T>,
}

/// Iterative midpoint-expansion search.
///
/// Per iteration: score the candidates (in commit-argmax mode only those
/// not yet buffered), take the argmax as midpoint (ties → lowest index),
/// open the window `[m − ⌊N/2k⌋, m + ⌊N/2k⌋] ∩ [0, N−1]`, and draw up to
/// `k` frames from its unbuffered positions: the midpoint itself when
/// unbuffered, the rest stratified. Commit-window inserts every drawn frame,
/// commit-argmax only the midpoint. The drawn frames become the next
/// candidates. Stops after `config.iterations` or when an iteration commits
/// nothing new.
pub fn select_visual<T: Scalar>(
    seq: &EmbeddingSequence<T>,
    query: &QueryEmbedding<T>,
    projection: &ProjectionLayer<T>,
    config: &TwmConfig,
) -> Result<VisualSelection<T>> {
    config.validate()?;
    check_dims(seq.dim(), query, projection)?;
    let n = seq.n_items();
    let k = config.k;
    let half = n / (2 * k);
    let mut buffer = WorkingBuffer::new((k * config.iterations).min(n));
    let mut candidates = uniform_indices(n, k);
    let mut trace = SelectionTrace {
        n_items: n,
        k,
        half_width: half,
        mode: config.commit_mode,
        initial_candidates: candidates.clone(),
        iterations: Vec::new(),
        converged: false,
    };

    for iteration in 1..=config.iterations {
        let eligible: Vec<usize> = match config.commit_mode {
            CommitMode::CommitWindow => candidates.clone(),
            CommitMode::CommitArgmax => candidates
                .iter()
                .copied()
                .filter(|&i| !buffer.contains(i))
                .collect(),
        };
        if eligible.is_empty() {
            trace.converged = true;
            break;
        }
        let scores = score_frames(seq, &eligible, query, projection, &buffer, config)?;
        let midpoint = argmax_lowest_index(&scores);

        let lo = midpoint.saturating_sub(half);
        let hi = (midpoint + half).min(n - 1);
        let free: Vec<usize> = (lo..=hi).filter(|&i| !buffer.contains(i)).collect();
        let mut drawn = if free.contains(&midpoint) {
            let rest: Vec<usize> = free.iter().copied().filter(|&i| i != midpoint).collect();
            let mut d = vec![midpoint];
            d.extend(stratified_pick(&rest, k - 1));
            d
        } else {
            stratified_pick(&free, k)
        };
        drawn.sort_unstable();

        let to_commit: &[usize] = match config.commit_mode {
            CommitMode::CommitWindow => &drawn,
            CommitMode::CommitArgmax => std::slice::from_ref(&midpoint),
        };
        let mut committed = Vec::new();
        for &i in to_commit {
            if buffer.insert(i, seq.item(i).to_vec())? {
                committed.push(i);
            }
        }
        debug_assert!(buffer.indices().windows(2).all(|w| w[0] < w[1]));

        let stalled = committed.is_empty();
        trace.iterations.push(IterationTrace {
            iteration,
            candidates: eligible,
            scores,
            midpoint,
            window: (lo, hi),
            drawn: drawn.clone(),
            committed,
            buffer: buffer.indices(),
        });
        candidates = drawn;
        if stalled {
            trace.converged = true;
            break;
        }
    }
    Ok(VisualSelection { buffer, trace })
}

fn argmax_lowest_index<T: Scalar>(scores: &[ScoredFrame<T>]) -> usize {
    let mut best = &scores[0];
    for s in &scores[1..] {
        if s.score > best.score || (s.score == best.score && s.index < best.index) {
            best = s;
        }
    }
    best.index
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Modality;
    use crate::tensor::SeededRng;
    use proptest::prelude::*;

    fn random_seq(n: usize, dim: usize, seed: u64) -> EmbeddingSequence<f64> {
        let mut rng = SeededRng::new(seed);
        let data = rng.normal_vec(n * dim);
        EmbeddingSequence::new(Modality::Visual, DenseMatrix::from_vec(n, dim, data).unwrap(), None)
            .unwrap()
    }

    fn query_of(v: &[f64]) -> QueryEmbedding<f64> {
        QueryEmbedding::new(v.to_vec(), None).unwrap()
    }

    #[test]
    fn relevance_identity_cases() {
        let id = ProjectionLayer::identity(2);
        let q = query_of(&[0.0, 3.0]);
        assert!((relevance(&[0.0, 3.0], &q, &id).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(relevance(&[2.0, 0.0], &q, &id).unwrap(), 0.0);
    }

    #[test]
    fn relevance_matches_direct_recomputation() {
        let mut rng = SeededRng::new(31);
        let layer = ProjectionLayer::init_uniform(5, 3, &mut rng);
        let frame: Vec<f64> = rng.normal_vec(5);
        let q = query_of(&rng.normal_vec::<f64>(3));
        // W·x + b, then cosine, spelled out.
        let w = layer.weights();
        let z: Vec<f64> = (0..3)
            .map(|r| (0..5).map(|c| w.get(r, c) * frame[c]).sum::<f64>() + layer.bias()[r])
            .collect();
        let zq: f64 = z.iter().zip(q.vector()).map(|(a, b)| a * b).sum();
        let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nq = q.vector().iter().map(|v| v * v).sum::<f64>().sqrt();
        let want = zq / (nz * nq);
        assert!((relevance(&frame, &q, &layer).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn relevance_of_zero_projection_is_error() {
        let layer = ProjectionLayer::new(DenseMatrix::zeros(2, 2), vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            relevance(&[1.0, 1.0], &query_of(&[1.0, 0.0]), &layer),
            Err(TwmError::ZeroNorm)
        ));
    }

    #[test]
    fn distinctiveness_cases() {
        let mut buf = WorkingBuffer::<f64>::new(4);
        assert_eq!(distinctiveness(&[1.0, 2.0], &buf).unwrap(), 1.0);
        buf.insert(3, vec![1.0, 2.0]).unwrap();
        assert!(distinctiveness(&[1.0, 2.0], &buf).unwrap().abs() < 1e-15);
        let mut ortho = WorkingBuffer::new(1);
        ortho.insert(0, vec![1.0, 0.0]).unwrap();
        assert_eq!(distinctiveness(&[0.0, 1.0], &ortho).unwrap(), 1.0);
        // opposite direction clamps to 1
        assert_eq!(distinctiveness(&[-1.0, 0.0], &ortho).unwrap(), 1.0);
        assert!(distinctiveness(&[0.0, 0.0], &ortho).is_err());
        assert!(distinctiveness(&[0.0, 0.0], &WorkingBuffer::new(1)).is_err());
    }

    #[test]
    fn buffer_dedups_orders_and_bounds() {
        let mut buf = WorkingBuffer::new(3);
        assert!(buf.insert(5, vec![1.0]).unwrap());
        assert!(buf.insert(1, vec![1.0]).unwrap());
        assert!(!buf.insert(5, vec![2.0]).unwrap());
        assert!(buf.insert(3, vec![1.0]).unwrap());
        assert_eq!(buf.indices(), vec![1, 3, 5]);
        assert!(buf.insert(0, vec![1.0]).is_err());
        assert!(!buf.insert(3, vec![1.0]).unwrap());
    }

    #[test]
    fn score_weights() {
        let seq = random_seq(6, 4, 2);
        let id = ProjectionLayer::identity(4);
        let q = query_of(seq.item(4));
        let buf = WorkingBuffer::new(1);
        let idx: Vec<usize> = (0..6).collect();
        let rel_only = score_frames(&seq, &idx, &q, &id, &buf, &TwmConfig::new(2, 1, 0.0, 1.0)).unwrap();
        assert!(rel_only.iter().all(|s| s.score == s.relevance));
        let d_only = score_frames(&seq, &idx, &q, &id, &buf, &TwmConfig::new(2, 1, 1.0, 0.0)).unwrap();
        assert!(d_only.iter().all(|s| s.score == 1.0));
        let err = score_frames(&seq, &[6], &q, &id, &buf, &TwmConfig::msr_vtt()).unwrap_err();
        assert!(err.to_string().contains("index 6"), "{err}");
    }

    #[test]
    fn score_is_convex_combination() {
        let (a1, a2, d, r) = (0.2f64, 0.8, 0.5, 0.25);
        assert!((a1 * d + a2 * r - 0.30).abs() < 1e-12);
        // and through score_frames: frame orthogonal-ish to buffer
        let seq = EmbeddingSequence::from_rows(
            Modality::Visual,
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
        )
        .unwrap();
        let mut buf = WorkingBuffer::new(2);
        buf.insert(0, seq.item(0).to_vec()).unwrap();
        let id = ProjectionLayer::identity(2);
        let cfg = TwmConfig::new(1, 1, 0.2, 0.8);
        let s = &score_frames(&seq, &[2], &query_of(&[0.0, 1.0]), &id, &buf, &cfg).unwrap()[0];
        let want_d = 1.0 - std::f64::consts::FRAC_1_SQRT_2;
        let want_r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.distinctiveness - want_d).abs() < 1e-15);
        assert!((s.relevance - want_r).abs() < 1e-15);
        assert!((s.score - (0.2 * want_d + 0.8 * want_r)).abs() < 1e-12);
    }

    #[test]
    fn stratified_positions() {
        assert_eq!(uniform_indices(10, 2), vec![2, 7]);
        assert_eq!(uniform_indices(9, 9), (0..9).collect::<Vec<_>>());
        assert_eq!(uniform_indices(3, 5), vec![0, 1, 2]);
        assert_eq!(stratified_pick(&[5, 6, 8, 9], 1), vec![8]);
        assert!(stratified_pick(&[1, 2], 0).is_empty());
    }

    #[test]
    fn exhaustive_first_pass_keeps_argmax() {
        let seq = random_seq(9, 5, 3);
        let q = query_of(&SeededRng::new(4).normal_vec::<f64>(5));
        let id = ProjectionLayer::identity(5);
        let want = (0..9)
            .max_by(|&a, &b| {
                let ra = relevance(seq.item(a), &q, &id).unwrap();
                let rb = relevance(seq.item(b), &q, &id).unwrap();
                ra.partial_cmp(&rb).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        for mode in [CommitMode::CommitWindow, CommitMode::CommitArgmax] {
            let cfg = TwmConfig::new(9, 1, 0.0, 1.0).with_mode(mode);
            let sel = select_visual(&seq, &q, &id, &cfg).unwrap();
            assert_eq!(sel.buffer.indices(), vec![want]);
            assert_eq!(sel.trace.iterations[0].candidates, (0..9).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ten_frames_two_iterations_matches_hand_trace() {
        // Frame 7 carries the query; others are generic.
        let mut rows: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[1 + i % 3] = 1.0;
                v[0] = 0.1 * i as f64;
                v
            })
            .collect();
        rows[7] = vec![1.0, 0.0, 0.0, 0.0];
        let seq = EmbeddingSequence::from_rows(Modality::Visual, &rows).unwrap();
        let q = query_of(&[1.0, 0.0, 0.0, 0.0]);
        let cfg = TwmConfig::new(2, 2, 0.0, 1.0);
        let sel = select_visual(&seq, &q, &ProjectionLayer::identity(4), &cfg).unwrap();
        let t = &sel.trace;
        // Hand simulation:
        // init ⌊0.5·5⌋=2, ⌊1.5·5⌋=7; half-width ⌊10/4⌋=2.
        assert_eq!(t.initial_candidates, vec![2, 7]);
        assert_eq!(t.half_width, 2);
        // it 1: argmax 7; window [5,9], all free; draw 7 plus the middle of
        // {5,6,8,9} → 8.
        let it1 = &t.iterations[0];
        assert_eq!((it1.midpoint, it1.window), (7, (5, 9)));
        assert_eq!(it1.drawn, vec![7, 8]);
        assert_eq!(it1.buffer, vec![7, 8]);
        // it 2: candidates {7, 8}; 7 wins again; free {5,6,9}; stratified 2 → 5, 9.
        let it2 = &t.iterations[1];
        assert_eq!(it2.candidates, vec![7, 8]);
        assert_eq!(it2.midpoint, 7);
        assert_eq!(it2.drawn, vec![5, 9]);
        assert_eq!(sel.buffer.indices(), vec![5, 7, 8, 9]);
        assert!(!t.converged);
    }

    #[test]
    fn argmax_mode_commits_one_per_iteration() {
        let seq = random_seq(100, 6, 12);
        let q = query_of(&SeededRng::new(13).normal_vec::<f64>(6));
        let cfg = TwmConfig::new(5, 4, 0.3, 0.7).with_mode(CommitMode::CommitArgmax);
        let sel = select_visual(&seq, &q, &ProjectionLayer::identity(6), &cfg).unwrap();
        for it in &sel.trace.iterations {
            assert_eq!(it.committed, vec![it.midpoint]);
        }
        assert!(sel.buffer.len() <= 4);
    }

    #[test]
    fn dimension_errors() {
        let seq = random_seq(5, 3, 0);
        let q = query_of(&[1.0, 0.0]);
        assert!(matches!(
            select_visual(&seq, &q, &ProjectionLayer::identity(3), &TwmConfig::msr_vtt()),
            Err(TwmError::DimMismatch { .. })
        ));
    }

    fn arb_case() -> impl Strategy<Value = (usize, usize, usize, u64, bool)> {
        (1usize..80, 1usize..8, 1usize..6, any::<u64>(), any::<bool>())
    }

    proptest! {
        #[test]
        fn buffer_invariants_hold((n, k, iters, seed, argmax) in arb_case()) {
            let seq = random_seq(n, 4, seed);
            let q = query_of(&SeededRng::new(seed ^ 1).normal_vec::<f64>(4));
            let mode = if argmax { CommitMode::CommitArgmax } else { CommitMode::CommitWindow };
            let cfg = TwmConfig::new(k, iters, 0.4, 0.6).with_mode(mode);
            let sel = select_visual(&seq, &q, &ProjectionLayer::identity(4), &cfg).unwrap();
            let idx = sel.buffer.indices();
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.len() <= (k * iters).min(n));
            prop_assert!(!idx.is_empty());
            let half = n / (2 * k);
            for it in &sel.trace.iterations {
                prop_assert!(it.buffer.windows(2).all(|w| w[0] < w[1]));
                for &d in &it.drawn {
                    prop_assert!(d.abs_diff(it.midpoint) <= half);
                }
                prop_assert!(it.drawn.len() <= k);
            }
            // determinism
            let again = select_visual(&seq, &q, &ProjectionLayer::identity(4), &cfg).unwrap();
            prop_assert_eq!(again.buffer, sel.buffer);
            prop_assert_eq!(again.trace, sel.trace);
        }

        #[test]
        fn exact_query_frame_is_kept_once_seen(n in 4usize..120, k in 1usize..6, seed in any::<u64>(), target in any::<prop::sample::Index>()) {
            let seq = random_seq(n, 5, seed);
            let t = target.index(n);
            let q = query_of(seq.item(t));
            let cfg = TwmConfig::new(k, 4, 0.0, 1.0);
            let sel = select_visual(&seq, &q, &ProjectionLayer::identity(5), &cfg).unwrap();
            let seen = sel.trace.initial_candidates.contains(&t)
                || sel.trace.iterations.iter().any(|it| it.drawn.contains(&t));
            if seen {
                prop_assert!(sel.buffer.contains(t));
            }
        }
    }
}
