//! Exemplar selection for knowledge injection: split QA pairs by answer
//! frequency, cluster the questions of each frequent answer with k-means and
//! keep the question nearest each centroid.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::semantic::SentenceVector;
use crate::util::fnv1a64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnowledgeError {
    #[error("frequency threshold must be at least 1")]
    ZeroThreshold,
    #[error("k = {k} is invalid for {points} points")]
    InvalidK { k: usize, points: usize },
    #[error("point {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("no embedding for high-frequency record {0:?}")]
    MissingEmbedding(String),
    #[error("per-cluster target must be at least 1")]
    ZeroClusterTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One question/answer row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Lowercase + trim; the key answers are grouped by.
pub fn normalize_answer(answer: &str) -> String {
    answer.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrequencyPartition {
    /// Normalized answer to its records, for answers seen more than `threshold` times.
    pub high_freq: BTreeMap<String, Vec<QARecord>>,
    pub low_freq: Vec<QARecord>,
    pub threshold: usize,
}

impl FrequencyPartition {
    pub fn high_freq_count(&self) -> usize {
        self.high_freq.values().map(Vec::len).sum()
    }
}

/// Answer counts, most frequent first, ties by answer text.
pub fn answer_frequencies(records: &[QARecord]) -> Vec<(String, usize)> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in records {
        *counts.entry(normalize_answer(&r.answer)).or_insert(0) += 1;
    }
    let mut out: Vec<_> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Records whose normalized answer occurs more than `threshold` times go to
/// `high_freq`; the rest to `low_freq`, in input order.
pub fn frequency_split(records: &[QARecord], threshold: usize) -> Result<FrequencyPartition, KnowledgeError> {
    if threshold == 0 {
        return Err(KnowledgeError::ZeroThreshold);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in records {
        *counts.entry(normalize_answer(&r.answer)).or_insert(0) += 1;
    }
    let mut part = FrequencyPartition {
        threshold,
        ..Default::default()
    };
    for r in records {
        let key = normalize_answer(&r.answer);
        if counts[&key] > threshold {
            part.high_freq.entry(key).or_default().push(r.clone());
        } else {
            part.low_freq.push(r.clone());
        }
    }
    Ok(part)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step; non-increasing.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means with k-means++ seeding and Lloyd iterations.
///
/// Stops when assignments stop changing or after `max_iters` rounds. A
/// cluster that loses all members is re-seeded with the point farthest from
/// its current centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult, KnowledgeError> {
    if k == 0 || k > points.len() {
        return Err(KnowledgeError::InvalidK { k, points: points.len() });
    }
    let dim = points[0].len();
    if let Some((index, p)) = points.iter().enumerate().find(|(_, p)| p.len() != dim) {
        return Err(KnowledgeError::DimensionMismatch {
            index,
            expected: dim,
            got: p.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if u < acc && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments = vec![usize::MAX; points.len()];
    let mut inertia_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            inertia += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        inertia_history.push(inertia);
        if !changed {
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // only take from clusters that keep a member; k <= n guarantees one exists
                let far = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| counts[assignments[*i]] > 1)
                    .map(|(i, p)| (i, sq_dist(p, &centroids[assignments[i]])))
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .expect("some cluster has two members");
                centroids[c] = points[far].clone();
                counts[assignments[far]] -= 1;
                counts[c] = 1;
                // the donor keeps its old centroid for this round
                assignments[far] = c;
            }
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        inertia_history,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Target records per cluster: `k = clamp(ceil(n / target), 1, n)`.
    pub per_cluster_target: usize,
    pub max_iters: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            per_cluster_target: 5,
            max_iters: 100,
        }
    }
}

impl SelectionConfig {
    pub fn k_for(&self, group_size: usize) -> usize {
        group_size.div_ceil(self.per_cluster_target).clamp(1, group_size.max(1))
    }
}

/// Exemplars chosen for one frequent answer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSelection {
    pub answer: String,
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// One record per cluster, in cluster order.
    pub chosen: Vec<QARecord>,
    /// Assignment of each group member (in group order) to a cluster.
    pub assignments: Vec<usize>,
}

/// Seed for one answer group; independent of the order groups are processed in.
pub fn group_seed(seed: u64, answer: &str) -> u64 {
    fnv1a64(&[&seed.to_le_bytes(), answer.as_bytes()])
}

/// Clusters each frequent-answer group by question embedding and picks the
/// record nearest each centroid (ties to the lowest id). Embeddings are
/// unit-normalized before clustering.
pub fn select_exemplars(
    partition: &FrequencyPartition,
    embeddings: &HashMap<String, SentenceVector>,
    cfg: &SelectionConfig,
    seed: u64,
) -> Result<Vec<ClusterSelection>, KnowledgeError> {
    if cfg.per_cluster_target == 0 {
        return Err(KnowledgeError::ZeroClusterTarget);
    }
    let mut out = Vec::with_capacity(partition.high_freq.len());
    for (answer, records) in &partition.high_freq {
        let points = records
            .iter()
            .map(|r| {
                embeddings
                    .get(&r.id)
                    .ok_or_else(|| KnowledgeError::MissingEmbedding(r.id.clone()))
                    .map(|v| v.normalized().map(SentenceVector::into_inner).unwrap_or_else(|_| v.values().to_vec()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let k = cfg.k_for(records.len());
        let km = kmeans(&points, k, group_seed(seed, answer), cfg.max_iters)?;

        let mut chosen = Vec::with_capacity(k);
        for (c, centroid) in km.centroids.iter().enumerate() {
            let best = records
                .iter()
                .zip(&points)
                .zip(&km.assignments)
                .filter(|(_, &a)| a == c)
                .map(|((r, p), _)| (r, sq_dist(p, centroid)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.id.cmp(&b.0.id)));
            if let Some((r, _)) = best {
                chosen.push(r.clone());
            }
        }
        out.push(ClusterSelection {
            answer: answer.clone(),
            k,
            centroids: km.centroids,
            chosen,
            assignments: km.assignments,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, answer: &str) -> QARecord {
        QARecord {
            id: id.into(),
            question: format!("question {id}"),
            answer: answer.into(),
            image_ref: None,
            split: None,
        }
    }

    #[test]
    fn frequency_examples() {
        let mut rs = Vec::new();
        for i in 0..5 {
            rs.push(rec(&format!("y{i}"), "yes"));
        }
        for i in 0..4 {
            rs.push(rec(&format!("n{i}"), " No"));
        }
        rs.push(rec("s", "sacroiliac"));
        let p = frequency_split(&rs, 3).unwrap();
        assert_eq!(p.high_freq.keys().collect::<Vec<_>>(), vec!["no", "yes"]);
        assert_eq!(p.low_freq, vec![rec("s", "sacroiliac")]);

        let p = frequency_split(&rs, 10).unwrap();
        assert!(p.high_freq.is_empty());
        assert_eq!(p.low_freq.len(), rs.len());

        let two = vec![rec("a", "x"), rec("b", "X ")];
        assert_eq!(frequency_split(&two, 1).unwrap().high_freq["x"].len(), 2);
        assert_eq!(frequency_split(&two, 0), Err(KnowledgeError::ZeroThreshold));
        assert_eq!(frequency_split(&[], 1).unwrap().high_freq_count(), 0);

        let f = answer_frequencies(&rs);
        assert_eq!(f[0], ("yes".to_string(), 5));
        assert_eq!(f[2], ("sacroiliac".to_string(), 1));
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = vec![vec![0.0], vec![0.1], vec![0.2]];
        let r = kmeans(&pts, 1, 3, 50).unwrap();
        assert!((r.centroids[0][0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn kmeans_k_equals_n() {
        let pts = vec![vec![0.0, 1.0], vec![0.5, 0.5], vec![2.0, -1.0]];
        let r = kmeans(&pts, 3, 1, 50).unwrap();
        assert_eq!(r.inertia(), 0.0);
        let mut a = r.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 3);
    }

    /// Brute force over all 2-partitions of five 1-D points.
    #[test]
    fn kmeans_two_blobs_match_best_partition() {
        let pts: Vec<Vec<f64>> = [0.0, 0.02, 0.04, 0.9, 0.92].iter().map(|&x| vec![x]).collect();
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..(1 << 5) - 1 {
            let mut inertia = 0.0;
            for side in [0, 1] {
                let members: Vec<f64> = (0..5).filter(|i| (mask >> i) & 1 == side).map(|i| pts[i as usize][0]).collect();
                let m = members.iter().sum::<f64>() / members.len() as f64;
                inertia += members.iter().map(|x| (x - m).powi(2)).sum::<f64>();
            }
            if inertia < best.0 {
                best = (inertia, mask);
            }
        }
        for seed in 0..10 {
            let r = kmeans(&pts, 2, seed, 100).unwrap();
            assert_eq!(r.assignments[0], r.assignments[1]);
            assert_eq!(r.assignments[1], r.assignments[2]);
            assert_eq!(r.assignments[3], r.assignments[4]);
            assert_ne!(r.assignments[0], r.assignments[3]);
            assert!((r.inertia() - best.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert_eq!(kmeans(&pts, 3, 0, 10), Err(KnowledgeError::InvalidK { k: 3, points: 2 }));
        assert_eq!(kmeans(&pts, 0, 0, 10), Err(KnowledgeError::InvalidK { k: 0, points: 2 }));
        let bad = vec![vec![0.0], vec![1.0, 2.0]];
        assert!(matches!(kmeans(&bad, 1, 0, 10), Err(KnowledgeError::DimensionMismatch { index: 1, .. })));
    }

    #[test]
    fn kmeans_handles_duplicate_points() {
        let pts = vec![vec![1.0, 0.0]; 6];
        let r = kmeans(&pts, 3, 2, 20).unwrap();
        assert_eq!(r.inertia(), 0.0);
    }

    #[test]
    fn every_cluster_keeps_a_member() {
        let pts = vec![vec![0.0], vec![0.0], vec![0.0], vec![1.0], vec![1.0]];
        for seed in 0..20 {
            let r = kmeans(&pts, 4, seed, 7).unwrap();
            for c in 0..4 {
                assert!(r.assignments.contains(&c), "seed {seed} cluster {c}");
            }
        }
    }

    #[test]
    fn k_rule() {
        let c = SelectionConfig { per_cluster_target: 3, max_iters: 10 };
        assert_eq!(c.k_for(3), 1);
        assert_eq!(c.k_for(1), 1);
        assert_eq!(c.k_for(7), 3);
    }

    fn embeddings(pairs: &[(&str, Vec<f64>)]) -> HashMap<String, SentenceVector> {
        pairs
            .iter()
            .map(|(id, v)| (id.to_string(), SentenceVector::new(v.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn selection_picks_nearest_to_mean() {
        let rs = vec![rec("a", "yes"), rec("b", "yes"), rec("c", "yes")];
        let part = frequency_split(&rs, 1).unwrap();
        let emb = embeddings(&[("a", vec![1.0, 0.0]), ("b", vec![0.8, 0.6]), ("c", vec![0.6, 0.8])]);
        let cfg = SelectionConfig { per_cluster_target: 3, max_iters: 50 };
        let sel = select_exemplars(&part, &emb, &cfg, 0).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].k, 1);
        // brute force: the mean of the three unit vectors is closest to b
        let mean = [(1.0 + 0.8 + 0.6) / 3.0, (0.0 + 0.6 + 0.8) / 3.0];
        let best = ["a", "b", "c"]
            .iter()
            .min_by(|x, y| {
                let d = |id: &str| sq_dist(emb[id].values(), &mean);
                d(x).total_cmp(&d(y))
            })
            .unwrap();
        assert_eq!(sel[0].chosen[0].id, *best);
    }

    #[test]
    fn selection_tie_breaks_on_id_and_needs_embeddings() {
        let rs = vec![rec("z", "yes"), rec("m", "yes")];
        let part = frequency_split(&rs, 1).unwrap();
        let emb = embeddings(&[("z", vec![0.0, 1.0]), ("m", vec![0.0, 1.0])]);
        let cfg = SelectionConfig { per_cluster_target: 5, max_iters: 10 };
        let sel = select_exemplars(&part, &emb, &cfg, 7).unwrap();
        assert_eq!(sel[0].chosen[0].id, "m");

        let missing = embeddings(&[("z", vec![0.0, 1.0])]);
        assert_eq!(
            select_exemplars(&part, &missing, &cfg, 7),
            Err(KnowledgeError::MissingEmbedding("m".into()))
        );
    }

    #[test]
    fn single_record_group() {
        let part = FrequencyPartition {
            high_freq: BTreeMap::from([("yes".to_string(), vec![rec("only", "yes")])]),
            low_freq: vec![],
            threshold: 1,
        };
        let emb = embeddings(&[("only", vec![0.3, 0.4])]);
        let sel = select_exemplars(&part, &emb, &SelectionConfig::default(), 1).unwrap();
        assert_eq!(sel[0].k, 1);
        assert_eq!(sel[0].chosen[0].id, "only");
    }

    proptest! {
        #[test]
        fn inertia_never_increases(
            pts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 2..40),
            k in 1usize..6, seed in any::<u64>(),
        ) {
            prop_assume!(k <= pts.len());
            let r = kmeans(&pts, k, seed, 100).unwrap();
            for w in r.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
        }

        #[test]
        fn partition_is_complete(
            answers in prop::collection::vec(0u8..6, 0..60), threshold in 1usize..8,
        ) {
            let rs: Vec<QARecord> = answers.iter().enumerate().map(|(i, a)| rec(&i.to_string(), &format!("a{a}"))).collect();
            let p = frequency_split(&rs, threshold).unwrap();
            prop_assert_eq!(p.high_freq_count() + p.low_freq.len(), rs.len());
            let mut ids: Vec<&str> = p.high_freq.values().flatten().chain(&p.low_freq).map(|r| r.id.as_str()).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), rs.len());
            for group in p.high_freq.values() {
                prop_assert!(group.len() > threshold);
            }
        }
    }
}
