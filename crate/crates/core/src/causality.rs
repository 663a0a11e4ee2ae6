//! Instance-level attribution, type-level aggregation and pattern-based
//! synergy analysis.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ModelError;
use crate::eventseq::{write_json_file, CausalMatrix, DataError, Dataset, EventSequence};
use crate::isahp::IsahpModel;
use crate::mhp::HexpModel;
use crate::simulate::{find_patterns, Pattern, SimError};

#[derive(Debug, Error)]
pub enum CausalityError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pattern(#[from] SimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("pattern {pattern:?} does not place type {target} after its wildcard")]
    NoTarget { pattern: String, target: usize },
    #[error("pattern {0:?} has no synergistic match in the data")]
    NoSynergisticMatch(String),
    #[error("attribution covers {found} sequences, dataset has {expected}")]
    Mismatch { expected: usize, found: usize },
}

/// Instance-level scores of one sequence as sparse `(i, j, α)` triplets
/// with `t_j < t_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceAttribution {
    pub seq_id: String,
    pub types: Vec<usize>,
    pub pairs: Vec<(usize, usize, f64)>,
}

impl SequenceAttribution {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.pairs.iter().find(|p| p.0 == i && p.1 == j).map(|p| p.2)
    }
}

/// Type-level means; `None` marks a type pair that never occurred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
}

impl Aggregate {
    /// Dense matrix with absent pairs set to `absent`.
    pub fn to_matrix(&self, absent: f64) -> CausalMatrix {
        CausalMatrix::from_rows(
            self.mean
                .iter()
                .map(|r| r.iter().map(|v| v.unwrap_or(absent)).collect())
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub num_types: usize,
    pub sequences: Vec<SequenceAttribution>,
    pub aggregate: Aggregate,
}

impl AttributionResult {
    pub fn from_sequences(num_types: usize, sequences: Vec<SequenceAttribution>) -> Self {
        let aggregate = aggregate(&sequences, num_types);
        Self {
            num_types,
            sequences,
            aggregate,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<(), DataError> {
        write_json_file(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DataError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// `ᾱ[k][k'] = (1/N_{k,k'}) Σ α_{i,j}` over pairs with `k_i = k`, `k_j = k'`.
pub fn aggregate(sequences: &[SequenceAttribution], num_types: usize) -> Aggregate {
    let mut sum = vec![vec![0.0; num_types]; num_types];
    let mut counts = vec![vec![0usize; num_types]; num_types];
    for s in sequences {
        for &(i, j, a) in &s.pairs {
            let (k, k2) = (s.types[i], s.types[j]);
            sum[k][k2] += a;
            counts[k][k2] += 1;
        }
    }
    let mean = sum
        .iter()
        .zip(&counts)
        .map(|(row, c)| row.iter().zip(c).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect())
        .collect();
    Aggregate { mean, counts }
}

fn sparse(seq: &EventSequence, dense: impl Fn(usize, usize) -> f64) -> SequenceAttribution {
    let ev = seq.events();
    let mut pairs = Vec::new();
    for i in 0..ev.len() {
        for j in 0..i {
            if ev[j].t < ev[i].t {
                pairs.push((i, j, dense(i, j)));
            }
        }
    }
    SequenceAttribution {
        seq_id: seq.seq_id().to_string(),
        types: seq.types().collect(),
        pairs,
    }
}

/// One forward pass per sequence.
pub fn attribute(model: &IsahpModel, ds: &Dataset) -> Result<AttributionResult, CausalityError> {
    let seqs: Vec<SequenceAttribution> = ds
        .sequences()
        .par_iter()
        .map(|s| {
            let a = model.attribution(s)?;
            Ok(sparse(s, |i, j| a.get(i, j)))
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(AttributionResult::from_sequences(model.num_types(), seqs))
}

/// The baseline's instance score is the branching ratio of the type pair,
/// identical for every instance of that pair.
pub fn hexp_attribution(model: &HexpModel, ds: &Dataset) -> AttributionResult {
    let b = model.params().branching_matrix();
    let seqs = ds
        .sequences()
        .iter()
        .map(|s| {
            let ev = s.events();
            sparse(s, |i, j| b.get(ev[i].k, ev[j].k))
        })
        .collect();
    AttributionResult::from_sequences(model.num_types(), seqs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyReport {
    pub pattern: String,
    pub synergy_wildcard: usize,
    pub synergistic_matches: usize,
    pub other_matches: usize,
    pub synergistic_mean: f64,
    pub other_mean: Option<f64>,
    /// `None` when no non-synergistic match exists.
    pub ratio: Option<f64>,
}

/// Running mean; a constant stream yields that constant exactly.
#[derive(Default)]
struct Mean {
    n: usize,
    m: f64,
}

impl Mean {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.m += (x - self.m) / self.n as f64;
    }
}

/// Mean score from the pattern's first event to its first `target_type`
/// slot after the wildcard, for matches whose wildcard is
/// `synergy_wildcard`, divided by the same mean over the other matches.
pub fn synergy_ratio(
    ar: &AttributionResult,
    ds: &Dataset,
    pattern: &str,
    synergy_wildcard: usize,
    target_type: usize,
) -> Result<SynergyReport, CausalityError> {
    if ar.sequences.len() != ds.len() {
        return Err(CausalityError::Mismatch {
            expected: ds.len(),
            found: ar.sequences.len(),
        });
    }
    let pat = Pattern::parse(pattern)?;
    let target_pos = pat.position_of(target_type).ok_or_else(|| CausalityError::NoTarget {
        pattern: pattern.to_string(),
        target: target_type,
    })?;
    let (mut syn, mut other) = (Mean::default(), Mean::default());
    for m in find_patterns(ds, pattern)? {
        let sa = &ar.sequences[m.seq_index];
        let Some(a) = sa.get(m.start + target_pos, m.start) else {
            continue;
        };
        if m.wildcard == synergy_wildcard {
            syn.push(a);
        } else {
            other.push(a);
        }
    }
    if syn.n == 0 {
        return Err(CausalityError::NoSynergisticMatch(pattern.to_string()));
    }
    let other_mean = (other.n > 0).then_some(other.m);
    Ok(SynergyReport {
        pattern: pattern.to_string(),
        synergy_wildcard,
        synergistic_matches: syn.n,
        other_matches: other.n,
        synergistic_mean: syn.m,
        other_mean,
        ratio: other_mean.map(|o| syn.m / o),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventseq::Event;
    use crate::isahp::IsahpConfig;
    use crate::mhp::HexpConfig;
    use crate::simulate::MhpParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(id: &str, ev: &[(f64, usize)]) -> EventSequence {
        EventSequence::new(id, ev.iter().map(|&(t, k)| Event::new(t, k)).collect(), None).unwrap()
    }

    /// Double loop over every ordered event pair of dense matrices.
    pub(crate) fn brute_aggregate(dense: &[(Vec<usize>, Vec<f64>, Vec<Vec<f64>>)], k: usize) -> Aggregate {
        let mut sum = vec![vec![0.0; k]; k];
        let mut counts = vec![vec![0usize; k]; k];
        for (types, times, a) in dense {
            for i in 0..types.len() {
                for j in 0..types.len() {
                    if times[j] < times[i] {
                        sum[types[i]][types[j]] += a[i][j];
                        counts[types[i]][types[j]] += 1;
                    }
                }
            }
        }
        let mean = (0..k)
            .map(|a| (0..k).map(|b| (counts[a][b] > 0).then(|| sum[a][b] / counts[a][b] as f64)).collect())
            .collect();
        Aggregate { mean, counts }
    }

    #[test]
    fn single_pair_average() {
        let s = SequenceAttribution {
            seq_id: "s".into(),
            types: vec![0, 1],
            pairs: vec![(1, 0, 0.5)],
        };
        let agg = aggregate(&[s], 2);
        assert_eq!(agg.mean[1][0], Some(0.5));
        assert_eq!(agg.counts[1][0], 1);
        assert_eq!(agg.mean[0][1], None);
        assert_eq!(agg.to_matrix(-1.0).get(0, 1), -1.0);
    }

    #[test]
    fn constant_field_averages_to_constant() {
        let s = SequenceAttribution {
            seq_id: "s".into(),
            types: vec![0, 1, 0, 1],
            pairs: vec![(1, 0, 0.3), (2, 0, 0.3), (2, 1, 0.3), (3, 0, 0.3), (3, 1, 0.3), (3, 2, 0.3)],
        };
        let agg = aggregate(&[s], 2);
        for row in &agg.mean {
            for v in row.iter().flatten() {
                assert!((v - 0.3).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn random_instances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let k = rng.random_range(1..4);
            let mut dense = Vec::new();
            let mut sparse_seqs = Vec::new();
            for s in 0..3 {
                let n = rng.random_range(0..7);
                let mut t: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..4u8))).collect();
                t.sort_by(f64::total_cmp);
                let ev: Vec<(f64, usize)> = t.iter().map(|&x| (x, rng.random_range(0..k))).collect();
                let a: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
                let es = seq(&format!("s{s}"), &ev);
                sparse_seqs.push(sparse(&es, |i, j| a[i][j]));
                dense.push((es.types().collect(), t, a));
            }
            assert_eq!(aggregate(&sparse_seqs, k), brute_aggregate(&dense, k));
        }
    }

    #[test]
    fn scaling_scores_scales_means() {
        let s = SequenceAttribution {
            seq_id: "s".into(),
            types: vec![0, 1, 1],
            pairs: vec![(1, 0, 0.2), (2, 0, 0.6), (2, 1, 0.1)],
        };
        let mut scaled = s.clone();
        for p in &mut scaled.pairs {
            p.2 *= 3.0;
        }
        let (a, b) = (aggregate(&[s], 2), aggregate(&[scaled], 2));
        for (ra, rb) in a.mean.iter().zip(&b.mean) {
            for (x, y) in ra.iter().zip(rb) {
                assert_eq!(x.map(|v| v * 3.0).map(|v| (v * 1e12).round()), y.map(|v| (v * 1e12).round()));
            }
        }
    }

    fn tiny_isahp() -> (IsahpModel, Dataset) {
        let ds = Dataset::new(
            vec![
                seq("a", &[(0.2, 0), (0.9, 1), (1.4, 0)]),
                seq("b", &[(0.5, 1), (0.5, 0), (2.0, 1)]),
            ],
            2,
            None,
        )
        .unwrap();
        (IsahpModel::init(&ds, IsahpConfig::default(), 3).unwrap(), ds)
    }

    #[test]
    fn attribution_matches_heads_and_mask() {
        let (m, ds) = tiny_isahp();
        let ar = attribute(&m, &ds).unwrap();
        for (s, sa) in ds.sequences().iter().zip(&ar.sequences) {
            let c = m.candidates(s).unwrap();
            let ev = s.events();
            for i in 0..ev.len() {
                for j in 0..ev.len() {
                    match c.heads(i, j, ev[i].k) {
                        Some((a, _)) => assert_eq!(sa.get(i, j), Some(a)),
                        None => assert_eq!(sa.get(i, j), None),
                    }
                }
            }
        }
        // the simultaneous pair in "b" has no entry
        assert_eq!(ar.sequences[1].get(1, 0), None);
        assert_eq!(attribute(&m, &ds).unwrap(), ar);
    }

    #[test]
    fn attribution_json_round_trip() {
        let (m, ds) = tiny_isahp();
        let ar = attribute(&m, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("attr.json");
        ar.write_json(&p).unwrap();
        let back = AttributionResult::read_json(&p).unwrap();
        assert_eq!(back, ar);
        assert_eq!(aggregate(&back.sequences, 2), ar.aggregate);
    }

    fn synergy_data() -> Dataset {
        // 0 # 3 2 windows: wildcard 1 in "a", wildcard 4 in "b" and "c"
        Dataset::new(
            vec![
                seq("a", &[(0.1, 0), (0.2, 1), (0.3, 3), (0.4, 2)]),
                seq("b", &[(0.1, 0), (0.2, 4), (0.3, 3), (0.4, 2)]),
                seq("c", &[(0.5, 2), (1.1, 0), (1.2, 2), (1.3, 3), (1.4, 2)]),
            ],
            5,
            None,
        )
        .unwrap()
    }

    #[test]
    fn constant_scores_give_unit_ratio() {
        let ds = synergy_data();
        let seqs = ds.sequences().iter().map(|s| sparse(s, |_, _| 0.37)).collect();
        let ar = AttributionResult::from_sequences(5, seqs);
        let r = synergy_ratio(&ar, &ds, "0#32", 1, 3).unwrap();
        assert_eq!(r.ratio, Some(1.0));
        assert_eq!((r.synergistic_matches, r.other_matches), (1, 2));
    }

    #[test]
    fn ratio_uses_source_to_target_scores() {
        let ds = synergy_data();
        let seqs = ds
            .sequences()
            .iter()
            .map(|s| {
                let id = s.seq_id().to_string();
                sparse(s, |i, j| match (id.as_str(), i, j) {
                    ("a", 2, 0) => 0.9,
                    ("b", 2, 0) => 0.2,
                    ("c", 3, 1) => 0.4,
                    _ => 5.0,
                })
            })
            .collect();
        let ar = AttributionResult::from_sequences(5, seqs);
        let r = synergy_ratio(&ar, &ds, "0#32", 1, 3).unwrap();
        assert!((r.ratio.unwrap() - 0.9 / 0.3).abs() < 1e-12);
    }

    #[test]
    fn undefined_and_missing_cases() {
        let ds = synergy_data();
        let seqs = ds.sequences().iter().map(|s| sparse(s, |_, _| 1.0)).collect();
        let ar = AttributionResult::from_sequences(5, seqs);
        let only = ds.subset(&[0]);
        let ar_only = AttributionResult::from_sequences(5, vec![ar.sequences[0].clone()]);
        assert_eq!(synergy_ratio(&ar_only, &only, "0#32", 1, 3).unwrap().ratio, None);
        assert!(matches!(
            synergy_ratio(&ar, &ds, "0#32", 0, 3),
            Err(CausalityError::NoSynergisticMatch(_))
        ));
        assert!(matches!(synergy_ratio(&ar, &ds, "0#32", 1, 4), Err(CausalityError::NoTarget { .. })));
    }

    #[test]
    fn hexp_adapter_ratio_is_exactly_one() {
        let ds = synergy_data();
        let mut p = MhpParams {
            mu: vec![0.1; 5],
            alpha: vec![vec![0.1; 5]; 5],
            gamma: vec![vec![1.0; 5]; 5],
        };
        p.alpha[3][0] = 0.7 / 3.0;
        p.gamma[3][0] = 1.3;
        let m = HexpModel::from_params(&p, HexpConfig::default()).unwrap();
        let r = synergy_ratio(&hexp_attribution(&m, &ds), &ds, "0#32", 1, 3).unwrap();
        assert_eq!(r.ratio, Some(1.0));
    }
}
