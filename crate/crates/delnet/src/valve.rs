//! Task-similarity valve: decides whether an incoming degradation stream
//! is a task the library already knows or a new one.
//!
//! A batch of backbone features is summarized into a 7-statistic task
//! vector; candidate vectors are compared against every registered task
//! with a weighted blend of cosine, inverse-euclidean, and Pearson
//! similarity. Scores above 0.85 mean "old", below 0.5 mean "new", and
//! the band in between is resolved against a slowly adapting threshold
//! seeded at 0.75 and clamped to [0.65, 0.90].

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const HARD_OLD: f64 = 0.85;
pub const HARD_NEW: f64 = 0.5;
pub const THRESHOLD_INIT: f64 = 0.75;
pub const THRESHOLD_MIN: f64 = 0.65;
pub const THRESHOLD_MAX: f64 = 0.90;
/// Update speed `e` and clip bound `f` of the threshold recurrence.
pub const THRESHOLD_RATE: f64 = 0.05;
pub const THRESHOLD_CLIP: f64 = 0.05;
/// Threshold updates start once more than this many ambiguous scores exist.
pub const HISTORY_TRIGGER: usize = 3;

/// Degenerate-statistics guard: below this, std is treated as zero.
const SIGMA_EPS: f64 = 1e-12;

// ─── task vectors ───────────────────────────────────────────────────────

/// Order-free summary of a flattened feature map:
/// [mean, std, max, min, l2_norm, skewness, kurtosis].
/// Std is population std; kurtosis is excess kurtosis. Skewness and
/// kurtosis are defined as 0 when std < 1e-12.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    pub stats: [f64; 7],
}

impl TaskVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.stats
    }
}

pub fn extract_task_vector(features: &Tensor) -> Result<TaskVector> {
    let xs = features.data();
    if xs.is_empty() {
        return Err(Error::invalid("extract_task_vector", "empty feature map"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    let mut sq = 0.0;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &x in xs {
        max = max.max(x);
        min = min.min(x);
        sq += x * x;
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let std = m2.sqrt();
    let (skew, kurt) = if std < SIGMA_EPS {
        (0.0, 0.0)
    } else {
        (m3 / (std * std * std), m4 / (m2 * m2) - 3.0)
    };
    Ok(TaskVector { stats: [mean, std, max, min, sq.sqrt(), skew, kurt] })
}

/// Component-wise average of several task vectors (e.g. the first few
/// batches of an episode).
pub fn mean_task_vector(vectors: &[TaskVector]) -> Result<TaskVector> {
    if vectors.is_empty() {
        return Err(Error::invalid("mean_task_vector", "no vectors"));
    }
    let mut stats = [0.0; 7];
    for v in vectors {
        for (acc, x) in stats.iter_mut().zip(v.stats) {
            *acc += x;
        }
    }
    for s in &mut stats {
        *s /= vectors.len() as f64;
    }
    Ok(TaskVector { stats })
}

// ─── similarity ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub s_cos: f64,
    pub s_euc: f64,
    pub s_pear: f64,
    pub s_sum: f64,
    pub best_match_task: Option<usize>,
}

/// s_sum = 0.5 s_cos + 0.3 s_euc + 0.2 s_pear.
pub fn weighted_sum(s_cos: f64, s_euc: f64, s_pear: f64) -> f64 {
    0.5 * s_cos + 0.3 * s_euc + 0.2 * s_pear
}

/// Cosine, inverse-euclidean, and Pearson similarity of two task
/// vectors. Degenerate operands (zero vector for cosine, zero variance
/// for Pearson) contribute 0, nudging degenerate comparisons toward
/// "new task".
pub fn combined_similarity(t1: &TaskVector, t2: &TaskVector) -> SimilarityReport {
    let a = &t1.stats;
    let b = &t2.stats;
    let dim = a.len() as f64;

    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s_cos = if na < SIGMA_EPS || nb < SIGMA_EPS { 0.0 } else { dot / (na * nb) };

    let d_euc: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let s_euc = 1.0 / (1.0 + d_euc);

    let ma: f64 = a.iter().sum::<f64>() / dim;
    let mb: f64 = b.iter().sum::<f64>() / dim;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / dim;
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / dim;
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / dim;
    let s_pear = if va.sqrt() < SIGMA_EPS || vb.sqrt() < SIGMA_EPS {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    };

    SimilarityReport {
        s_cos,
        s_euc,
        s_pear,
        s_sum: weighted_sum(s_cos, s_euc, s_pear),
        best_match_task: None,
    }
}

// ─── signature registry ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureNormalization {
    /// Z-score each of the 7 dimensions against the registered vectors'
    /// mean/std before comparing; raw l2_norm otherwise dominates cosine.
    RegistryZ,
    Raw,
}

/// Stored task vectors, one per registered task, with the normalization
/// applied before any similarity computation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignatureRegistry {
    vectors: Vec<TaskVector>,
    normalization: SignatureNormalization,
}

impl SignatureRegistry {
    pub fn new(normalization: SignatureNormalization) -> SignatureRegistry {
        SignatureRegistry { vectors: Vec::new(), normalization }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[TaskVector] {
        &self.vectors
    }

    /// Register a task's vector; the returned id is its index.
    pub fn register(&mut self, v: TaskVector) -> usize {
        self.vectors.push(v);
        self.vectors.len() - 1
    }

    /// Overwrite a stored vector (e.g. re-extracted after training).
    pub fn replace(&mut self, task: usize, v: TaskVector) -> Result<()> {
        let slot = self
            .vectors
            .get_mut(task)
            .ok_or_else(|| Error::invalid("registry replace", format!("no task {task}")))?;
        *slot = v;
        Ok(())
    }

    /// Best similarity of `candidate` over all registered tasks (max
    /// s_sum, ties to the lower task id), with `best_match_task` set.
    /// Registry statistics for z-scoring come from stored vectors only.
    pub fn best_match(&self, candidate: &TaskVector) -> Option<SimilarityReport> {
        if self.vectors.is_empty() {
            return None;
        }
        let (stored, cand) = match self.normalization {
            SignatureNormalization::Raw => (self.vectors.clone(), candidate.clone()),
            SignatureNormalization::RegistryZ => {
                let (mean, std) = self.dimension_stats();
                let z = |v: &TaskVector| {
                    let mut stats = [0.0; 7];
                    for i in 0..7 {
                        stats[i] = (v.stats[i] - mean[i]) / std[i];
                    }
                    TaskVector { stats }
                };
                (self.vectors.iter().map(&z).collect(), z(candidate))
            }
        };
        let mut best: Option<SimilarityReport> = None;
        for (id, s) in stored.iter().enumerate() {
            let mut rep = combined_similarity(&cand, s);
            rep.best_match_task = Some(id);
            let better = match &best {
                None => true,
                Some(b) => rep.s_sum > b.s_sum,
            };
            if better {
                best = Some(rep);
            }
        }
        best
    }

    /// Per-dimension mean and std over stored vectors; std floors at 1
    /// when degenerate so z-scoring stays a pure shift.
    fn dimension_stats(&self) -> ([f64; 7], [f64; 7]) {
        let n = self.vectors.len() as f64;
        let mut mean = [0.0; 7];
        for v in &self.vectors {
            for i in 0..7 {
                mean[i] += v.stats[i];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = [0.0; 7];
        for v in &self.vectors {
            for i in 0..7 {
                let d = v.stats[i] - mean[i];
                std[i] += d * d;
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s < SIGMA_EPS {
                *s = 1.0;
            }
        }
        (mean, std)
    }
}

// ─── dynamic threshold ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Clip the displacement target − current into [−f, f]. Default: the
    /// literal recurrence saturates its clip for any plausible target and
    /// drifts monotonically.
    Delta,
    /// Clip the target itself into [−f, f], as the recurrence reads.
    Literal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdState {
    current: f64,
    /// Ambiguous-band similarity scores, append-only.
    history: Vec<f64>,
    mode: ThresholdMode,
}

impl ThresholdState {
    pub fn new(mode: ThresholdMode) -> ThresholdState {
        ThresholdState { current: THRESHOLD_INIT, history: Vec::new(), mode }
    }

    /// Rebuild a state mid-stream (tests, checkpoint restore).
    pub fn from_parts(mode: ThresholdMode, current: f64, history: Vec<f64>) -> Result<ThresholdState> {
        if !(THRESHOLD_MIN..=THRESHOLD_MAX).contains(&current) {
            return Err(Error::invalid(
                "threshold from_parts",
                format!("current {current} outside [{THRESHOLD_MIN}, {THRESHOLD_MAX}]"),
            ));
        }
        Ok(ThresholdState { current, history, mode })
    }

    pub fn current(&self) -> f64 {
        self.current
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn mode(&self) -> ThresholdMode {
        self.mode
    }

    pub fn observe(&mut self, s_sum: f64) {
        self.history.push(s_sum);
    }

    /// One threshold update:
    ///   target  = median(history) − 0.25 · population_std(history)
    ///   delta   = clip(target − current)  (delta mode)
    ///           | clip(target)            (literal mode)
    ///   current = clamp(current + 0.05 · delta, 0.65, 0.90)
    /// Per-update movement is therefore at most 0.05 · 0.05 = 0.0025.
    pub fn update(&mut self) -> Result<f64> {
        if self.history.len() <= HISTORY_TRIGGER {
            return Err(Error::InsufficientHistory {
                have: self.history.len(),
                min: HISTORY_TRIGGER + 1,
            });
        }
        let target = median(&self.history) - 0.25 * population_std(&self.history);
        let raw = match self.mode {
            ThresholdMode::Delta => target - self.current,
            ThresholdMode::Literal => target,
        };
        let delta = raw.clamp(-THRESHOLD_CLIP, THRESHOLD_CLIP);
        self.current =
            (self.current + THRESHOLD_RATE * delta).clamp(THRESHOLD_MIN, THRESHOLD_MAX);
        Ok(self.current)
    }
}

/// Median with the even-length convention: mean of the two middle values.
fn median(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

// ─── classification ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    New,
    Old { task: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValveDecision {
    pub verdict: Verdict,
    /// s_sum backing the decision; 1.0 for the first-task bootstrap.
    pub similarity: f64,
    /// Threshold in effect after any update this decision triggered.
    pub threshold_after: f64,
}

/// Resolve a similarity report into new/old. Ambiguous scores
/// (0.5 ≤ s ≤ 0.85) are compared against the current threshold, then
/// appended to its history; once more than three are stored, each new
/// one triggers a threshold update.
pub fn classify_task(
    report: Option<&SimilarityReport>,
    state: &mut ThresholdState,
    registered_count: usize,
) -> Result<ValveDecision> {
    if registered_count == 0 {
        // First task ever: new by definition, bootstrap score 1.0.
        return Ok(ValveDecision {
            verdict: Verdict::New,
            similarity: 1.0,
            threshold_after: state.current(),
        });
    }
    let report = report
        .ok_or_else(|| Error::invalid("classify_task", "registered tasks but no report"))?;
    let s = report.s_sum;
    let old_verdict = || -> Result<Verdict> {
        let task = report
            .best_match_task
            .ok_or_else(|| Error::invalid("classify_task", "Old decision without best match"))?;
        Ok(Verdict::Old { task })
    };
    let verdict = if s > HARD_OLD {
        old_verdict()?
    } else if s < HARD_NEW {
        Verdict::New
    } else {
        let v = if s >= state.current() { old_verdict()? } else { Verdict::New };
        state.observe(s);
        if state.history().len() > HISTORY_TRIGGER {
            state.update()?;
        }
        v
    };
    Ok(ValveDecision { verdict, similarity: s, threshold_after: state.current() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn tv(stats: [f64; 7]) -> TaskVector {
        TaskVector { stats }
    }

    #[test]
    fn constant_features_vector() {
        let t = Tensor::full(vec![1, 1, 2, 2], 2.0);
        let v = extract_task_vector(&t).unwrap();
        // [mean, std, max, min, l2, skew, kurt] for 4 copies of 2.0.
        assert_eq!(v.stats[0], 2.0);
        assert_eq!(v.stats[1], 0.0);
        assert_eq!(v.stats[2], 2.0);
        assert_eq!(v.stats[3], 2.0);
        assert!((v.stats[4] - 4.0).abs() < 1e-12); // 2 * sqrt(4)
        assert_eq!(v.stats[5], 0.0);
        assert_eq!(v.stats[6], 0.0);
    }

    #[test]
    fn two_point_vector_hand_computed() {
        let t = Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap();
        let v = extract_task_vector(&t).unwrap();
        assert_eq!(v.stats[0], 0.0);
        assert!((v.stats[1] - 1.0).abs() < 1e-15);
        assert_eq!(v.stats[2], 1.0);
        assert_eq!(v.stats[3], -1.0);
        assert!((v.stats[4] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(v.stats[5], 0.0);
        assert!((v.stats[6] + 2.0).abs() < 1e-12, "excess kurtosis of a 2-point set is -2");
    }

    #[test]
    fn extraction_is_deterministic_and_rejects_empty() {
        let t = Tensor::new(vec![4], vec![0.3, -0.1, 0.9, 0.5]).unwrap();
        let a = extract_task_vector(&t).unwrap();
        let b = extract_task_vector(&t).unwrap();
        for i in 0..7 {
            assert_eq!(a.stats[i].to_bits(), b.stats[i].to_bits());
        }
        assert!(extract_task_vector(&Tensor::zeros(vec![0])).is_err());
    }

    #[test]
    fn extraction_is_permutation_invariant() {
        let mut rng = CounterRng::keyed(31, &[0]);
        for trial in 0..50 {
            let n = 16 + rng.index(64);
            let data: Vec<f64> = (0..n).map(|_| rng.range(-2.0, 2.0)).collect();
            let mut shuffled = data.clone();
            // Fisher-Yates with the crate rng.
            for i in (1..shuffled.len()).rev() {
                let j = rng.index(i + 1);
                shuffled.swap(i, j);
            }
            let a = extract_task_vector(&Tensor::new(vec![n], data).unwrap()).unwrap();
            let b = extract_task_vector(&Tensor::new(vec![n], shuffled).unwrap()).unwrap();
            for i in 0..7 {
                assert!(
                    (a.stats[i] - b.stats[i]).abs() < 1e-9,
                    "trial {trial} stat {i}: {} vs {}",
                    a.stats[i],
                    b.stats[i]
                );
            }
        }
    }

    #[test]
    fn self_similarity_is_one() {
        let v = tv([0.5, 1.2, 3.0, -0.4, 2.2, 0.1, -1.0]);
        let rep = combined_similarity(&v, &v);
        assert!((rep.s_cos - 1.0).abs() < 1e-12);
        assert_eq!(rep.s_euc, 1.0);
        assert!((rep.s_pear - 1.0).abs() < 1e-12);
        assert!((rep.s_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_examples() {
        assert!((weighted_sum(0.8, 0.5, 0.6) - 0.67).abs() < 1e-12);
        // Orthogonal vectors, unit distance, zero Pearson.
        assert!((weighted_sum(0.0, 0.5, 0.0) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn similarity_is_symmetric() {
        let mut rng = CounterRng::keyed(32, &[1]);
        for _ in 0..200 {
            let a = tv(std::array::from_fn(|_| rng.range(-3.0, 3.0)));
            let b = tv(std::array::from_fn(|_| rng.range(-3.0, 3.0)));
            let ab = combined_similarity(&a, &b);
            let ba = combined_similarity(&b, &a);
            assert!((ab.s_cos - ba.s_cos).abs() < 1e-12);
            assert!((ab.s_euc - ba.s_euc).abs() < 1e-12);
            assert!((ab.s_pear - ba.s_pear).abs() < 1e-12);
        }
    }

    #[test]
    fn s_euc_decreases_with_distance() {
        let origin = tv([0.0; 7]);
        let mut prev = f64::INFINITY;
        for k in 1..20 {
            let v = tv([k as f64 * 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
            let rep = combined_similarity(&origin, &v);
            assert!(rep.s_euc < prev);
            prev = rep.s_euc;
        }
    }

    #[test]
    fn degenerate_operands_contribute_zero() {
        let zero = tv([0.0; 7]);
        let constant = tv([2.0; 7]);
        let normal = tv([1.0, 2.0, 3.0, -1.0, 0.5, 0.2, 0.4]);
        assert_eq!(combined_similarity(&zero, &normal).s_cos, 0.0);
        // A constant vector has zero variance: Pearson is defined as 0.
        assert_eq!(combined_similarity(&constant, &normal).s_pear, 0.0);
    }

    #[test]
    fn report_composition_identity_holds_exactly() {
        let mut rng = CounterRng::keyed(33, &[2]);
        for _ in 0..500 {
            let a = tv(std::array::from_fn(|_| rng.range(-2.0, 2.0)));
            let b = tv(std::array::from_fn(|_| rng.range(-2.0, 2.0)));
            let rep = combined_similarity(&a, &b);
            assert_eq!(
                rep.s_sum.to_bits(),
                weighted_sum(rep.s_cos, rep.s_euc, rep.s_pear).to_bits()
            );
        }
    }

    // ─── threshold ──────────────────────────────────────────────────────

    #[test]
    fn worked_threshold_update() {
        let mut state = ThresholdState::from_parts(
            ThresholdMode::Delta,
            0.75,
            vec![0.6, 0.65, 0.7, 0.72],
        )
        .unwrap();
        let next = state.update().unwrap();
        // median 0.675, population std ~0.046570, target ~0.663357;
        // displacement -0.0866 clips to -0.05 -> current drops by 0.0025.
        assert!((next - 0.7475).abs() < 1e-12, "got {next}");
    }

    #[test]
    fn literal_mode_saturates_upward() {
        let mut state = ThresholdState::from_parts(
            ThresholdMode::Literal,
            0.75,
            vec![0.6, 0.65, 0.7, 0.72],
        )
        .unwrap();
        let next = state.update().unwrap();
        // Target ~0.663 clips to +0.05 -> drifts up by the max step.
        assert!((next - 0.7525).abs() < 1e-12, "got {next}");
    }

    #[test]
    fn identical_history_at_current_is_a_fixed_point() {
        let mut state =
            ThresholdState::from_parts(ThresholdMode::Delta, 0.75, vec![0.75; 5]).unwrap();
        let next = state.update().unwrap();
        assert_eq!(next, 0.75);
    }

    #[test]
    fn update_requires_history() {
        let mut state = ThresholdState::new(ThresholdMode::Delta);
        assert!(matches!(state.update(), Err(Error::InsufficientHistory { .. })));
        for s in [0.6, 0.7, 0.8] {
            state.observe(s);
        }
        assert!(state.update().is_err(), "exactly 3 entries is still insufficient");
        state.observe(0.65);
        assert!(state.update().is_ok());
    }

    #[test]
    fn threshold_stays_bounded_with_small_steps() {
        let mut rng = CounterRng::keyed(34, &[3]);
        let mut state = ThresholdState::new(ThresholdMode::Delta);
        for _ in 0..2000 {
            state.observe(rng.range(0.5, 0.85));
            if state.history().len() > HISTORY_TRIGGER {
                let before = state.current();
                let after = state.update().unwrap();
                assert!((THRESHOLD_MIN..=THRESHOLD_MAX).contains(&after));
                assert!((after - before).abs() <= 0.0025 + 1e-15);
            }
        }
    }

    // ─── classification ─────────────────────────────────────────────────

    fn report(s_sum: f64) -> SimilarityReport {
        // Component split is irrelevant to classification; only s_sum and
        // the match id are read.
        SimilarityReport { s_cos: 0.0, s_euc: 0.0, s_pear: 0.0, s_sum, best_match_task: Some(0) }
    }

    #[test]
    fn bootstrap_first_task() {
        let mut state = ThresholdState::new(ThresholdMode::Delta);
        let d = classify_task(None, &mut state, 0).unwrap();
        assert_eq!(d.verdict, Verdict::New);
        assert_eq!(d.similarity, 1.0);
        assert_eq!(d.threshold_after, 0.75);
    }

    #[test]
    fn hard_bands() {
        let mut state = ThresholdState::new(ThresholdMode::Delta);
        let d = classify_task(Some(&report(0.9)), &mut state, 2).unwrap();
        assert_eq!(d.verdict, Verdict::Old { task: 0 });
        let d = classify_task(Some(&report(0.3)), &mut state, 2).unwrap();
        assert_eq!(d.verdict, Verdict::New);
        // Hard-band scores never enter the ambiguous history.
        assert!(state.history().is_empty());
    }

    #[test]
    fn ambiguous_band_uses_threshold_and_feeds_history() {
        let mut state = ThresholdState::new(ThresholdMode::Delta);
        let d = classify_task(Some(&report(0.7)), &mut state, 1).unwrap();
        assert_eq!(d.verdict, Verdict::New, "0.7 < threshold 0.75");
        assert_eq!(state.history(), &[0.7]);
        let d = classify_task(Some(&report(0.76)), &mut state, 1).unwrap();
        assert_eq!(d.verdict, Verdict::Old { task: 0 }, "0.76 >= threshold 0.75");
        assert_eq!(state.history().len(), 2);
    }

    #[test]
    fn fourth_ambiguous_observation_triggers_update() {
        let mut state = ThresholdState::new(ThresholdMode::Delta);
        for s in [0.6, 0.65, 0.7] {
            classify_task(Some(&report(s)), &mut state, 1).unwrap();
            assert_eq!(state.current(), 0.75, "no update before trigger");
        }
        let d = classify_task(Some(&report(0.72)), &mut state, 1).unwrap();
        assert_eq!(state.history().len(), 4);
        assert!((state.current() - 0.7475).abs() < 1e-12, "worked example via classify");
        assert_eq!(d.threshold_after, state.current());
    }

    #[test]
    fn decision_is_monotone_in_similarity() {
        let mut rng = CounterRng::keyed(35, &[4]);
        for _ in 0..200 {
            let current = rng.range(THRESHOLD_MIN, THRESHOLD_MAX);
            let s2 = rng.range(0.0, 1.0);
            let s1 = s2 + rng.range(0.0, 1.0 - s2);
            let is_old = |s: f64| -> bool {
                let mut state =
                    ThresholdState::from_parts(ThresholdMode::Delta, current, vec![]).unwrap();
                matches!(
                    classify_task(Some(&report(s)), &mut state, 1).unwrap().verdict,
                    Verdict::Old { .. }
                )
            };
            if is_old(s2) {
                assert!(is_old(s1), "s1 {s1} >= s2 {s2} must also be Old (current {current})");
            }
        }
    }

    #[test]
    fn old_without_match_id_is_an_internal_error() {
        let mut state = ThresholdState::new(ThresholdMode::Delta);
        let rep =
            SimilarityReport { s_cos: 0.0, s_euc: 0.0, s_pear: 0.0, s_sum: 0.9, best_match_task: None };
        assert!(classify_task(Some(&rep), &mut state, 1).is_err());
    }

    // ─── registry ───────────────────────────────────────────────────────

    #[test]
    fn registry_picks_max_similarity_with_low_id_ties() {
        let mut reg = SignatureRegistry::new(SignatureNormalization::Raw);
        reg.register(tv([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        reg.register(tv([0.9, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let cand = tv([1.0, 0.05, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let rep = reg.best_match(&cand).unwrap();
        assert_eq!(rep.best_match_task, Some(0));

        // Exact tie: duplicate stored vectors -> the lower id wins.
        let mut reg = SignatureRegistry::new(SignatureNormalization::Raw);
        let v = tv([1.0, 2.0, 3.0, 4.0, 5.0, 0.5, -0.5]);
        reg.register(v.clone());
        reg.register(v.clone());
        let rep = reg.best_match(&v).unwrap();
        assert_eq!(rep.best_match_task, Some(0));
    }

    #[test]
    fn registry_z_scoring_tames_scale_imbalance() {
        // Two stored tasks identical except in a huge-magnitude dimension.
        // Raw cosine sees nearly parallel vectors; z-scored similarity
        // separates them.
        let mut reg = SignatureRegistry::new(SignatureNormalization::RegistryZ);
        reg.register(tv([0.1, 1.0, 2.0, 0.0, 500.0, 0.3, 0.1]));
        reg.register(tv([0.2, 1.1, 1.9, 0.1, 900.0, -0.3, -0.1]));
        let near_first = tv([0.1, 1.0, 2.0, 0.0, 510.0, 0.3, 0.1]);
        let rep = reg.best_match(&near_first).unwrap();
        assert_eq!(rep.best_match_task, Some(0));

        let near_second = tv([0.2, 1.1, 1.9, 0.1, 890.0, -0.3, -0.1]);
        let rep = reg.best_match(&near_second).unwrap();
        assert_eq!(rep.best_match_task, Some(1));
    }

    #[test]
    fn registry_replace_updates_in_place() {
        let mut reg = SignatureRegistry::new(SignatureNormalization::Raw);
        let id = reg.register(tv([1.0; 7]));
        reg.replace(id, tv([2.0; 7])).unwrap();
        assert_eq!(reg.vectors()[id].stats, [2.0; 7]);
        assert!(reg.replace(5, tv([0.0; 7])).is_err());
    }
}
