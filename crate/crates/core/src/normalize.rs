//! Per-dimension standardization and l2 normalization.

use serde::{Deserialize, Serialize};

use crate::episode::{Dataset, Episode, FeatureVector, TRAIN_SPLIT};
use crate::error::{Error, Result};
use crate::linalg::norm;

/// Lower clamp applied to every per-dimension standard deviation.
pub const SIGMA_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// True if any dimension had its deviation raised to [`SIGMA_EPS`].
    pub fn clamped(&self) -> bool {
        self.sigma.iter().any(|&s| s <= SIGMA_EPS)
    }

    /// Mean and population standard deviation of `vectors`, two-pass.
    pub fn from_vectors<'a, I>(vectors: I) -> Result<NormStats>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let vectors: Vec<&[f64]> = vectors.into_iter().collect();
        if vectors.len() < 2 {
            return Err(Error::TooFew {
                what: "vectors for statistics",
                needed: 2,
                found: vectors.len(),
            });
        }
        let d = vectors[0].len();
        if let Some(v) = vectors.iter().find(|v| v.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: v.len(),
            });
        }
        let n = vectors.len() as f64;
        let mut mu = vec![0.0; d];
        for v in &vectors {
            for (m, x) in mu.iter_mut().zip(v.iter()) {
                *m += x;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for v in &vectors {
            for ((s, x), m) in var.iter_mut().zip(v.iter()).zip(&mu) {
                let c = x - m;
                *s += c * c;
            }
        }
        let sigma = var.into_iter().map(|s| (s / n).sqrt().max(SIGMA_EPS)).collect();
        Ok(NormStats { mu, sigma })
    }
}

/// Statistics over the union of both support classes.
pub fn support_stats<'a, I>(supports: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    NormStats::from_vectors(supports)
}

pub fn standardize(f: &[f64], stats: &NormStats) -> Result<FeatureVector> {
    if f.len() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            found: f.len(),
        });
    }
    Ok(f.iter()
        .zip(&stats.mu)
        .zip(&stats.sigma)
        .map(|((x, m), s)| (x - m) / s)
        .collect())
}

pub fn l2_normalize(f: &[f64]) -> Result<FeatureVector> {
    let n = norm(f);
    if n == 0.0 {
        return Err(Error::ZeroNorm("l2_normalize input"));
    }
    Ok(f.iter().map(|x| x / n).collect())
}

/// Statistics pooled over every support and query of the train split.
pub fn trainset_stats(d: &Dataset) -> Result<NormStats> {
    let vectors: Vec<&[f64]> = d
        .split(TRAIN_SPLIT)
        .flat_map(|e| {
            e.supports()
                .chain(e.queries.iter().map(|q| q.features.as_slice()))
        })
        .collect();
    if vectors.is_empty() {
        return Err(Error::InvalidArgument("train split is empty".into()));
    }
    NormStats::from_vectors(vectors)
}

/// Standardize a whole episode with the statistics of its own supports.
/// Queries are transformed but never enter the statistics.
pub fn standardize_episode(e: &Episode) -> Result<(Episode, NormStats)> {
    let stats = support_stats(e.supports())?;
    let out = e.map_features(|v| standardize(v, &stats))?;
    Ok((out, stats))
}

/// Feature normalization applied per episode before a classifier runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    L2,
    SupportStandardize,
    TrainsetStandardize,
    L2ThenSupportStandardize,
    SupportStandardizeThenL2,
}

impl Normalization {
    pub const ALL: [Normalization; 6] = [
        Normalization::None,
        Normalization::L2,
        Normalization::SupportStandardize,
        Normalization::TrainsetStandardize,
        Normalization::L2ThenSupportStandardize,
        Normalization::SupportStandardizeThenL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::L2 => "l2",
            Normalization::SupportStandardize => "support_standardize",
            Normalization::TrainsetStandardize => "trainset_standardize",
            Normalization::L2ThenSupportStandardize => "l2_then_support_standardize",
            Normalization::SupportStandardizeThenL2 => "support_standardize_then_l2",
        }
    }

    pub fn parse(s: &str) -> Result<Normalization> {
        Normalization::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown normalization `{s}`")))
    }

    pub fn needs_trainset_stats(self) -> bool {
        self == Normalization::TrainsetStandardize
    }

    /// Transform an episode. `trainset` must be provided for
    /// [`Normalization::TrainsetStandardize`].
    pub fn apply(self, e: &Episode, trainset: Option<&NormStats>) -> Result<Episode> {
        match self {
            Normalization::None => Ok(e.clone()),
            Normalization::L2 => e.map_features(l2_normalize),
            Normalization::SupportStandardize => standardize_episode(e).map(|(out, _)| out),
            Normalization::TrainsetStandardize => {
                let stats = trainset.ok_or_else(|| {
                    Error::InvalidArgument("train-set statistics required".into())
                })?;
                e.map_features(|v| standardize(v, stats))
            }
            Normalization::L2ThenSupportStandardize => {
                let normed = e.map_features(l2_normalize)?;
                standardize_episode(&normed).map(|(out, _)| out)
            }
            Normalization::SupportStandardizeThenL2 => {
                let (std, _) = standardize_episode(e)?;
                std.map_features(l2_normalize)
            }
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{Label, Query};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_stats() {
        let a = [1.0, 3.0];
        let b = [3.0, 5.0];
        let s = support_stats([&a[..], &b[..]]).unwrap();
        assert_eq!(s.mu, vec![2.0, 4.0]);
        assert_eq!(s.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn identical_supports_clamp() {
        let a = [0.5, -2.0, 7.0];
        let s = support_stats([&a[..], &a[..], &a[..]]).unwrap();
        assert_eq!(s.sigma, vec![SIGMA_EPS; 3]);
        assert!(s.clamped());
    }

    #[test]
    fn too_few_supports() {
        let a = [1.0];
        assert!(support_stats([&a[..]]).is_err());
    }

    #[test]
    fn stats_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vs: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let s = support_stats(vs.iter().map(Vec::as_slice)).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = vs.iter().map(|v| v[j]).collect();
            let m = col.iter().sum::<f64>() / 12.0;
            let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 12.0;
            assert!((s.mu[j] - m).abs() < 1e-12);
            assert!((s.sigma[j] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_examples() {
        let s = NormStats {
            mu: vec![2.0, 4.0],
            sigma: vec![1.0, 1.0],
        };
        assert_eq!(standardize(&[3.0, 5.0], &s).unwrap(), vec![1.0, 1.0]);
        assert_eq!(standardize(&[2.0, 4.0], &s).unwrap(), vec![0.0, 0.0]);
        assert!(standardize(&[1.0], &s).is_err());
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
    }

    fn episode(id: &str, split: &str, vs: &[[f64; 2]]) -> Episode {
        Episode {
            id: id.into(),
            split: split.into(),
            positives: vec![vs[0].to_vec(), vs[1].to_vec()],
            negatives: vec![vs[2].to_vec(), vs[3].to_vec()],
            queries: vec![Query {
                features: vs[4].to_vec(),
                label: Label::Positive,
            }],
            concept_id: None,
        }
    }

    #[test]
    fn trainset_single_episode_equals_pooled() {
        let vs = [[1.0, 2.0], [2.0, 0.0], [0.0, 1.0], [4.0, 4.0], [3.0, 3.0]];
        let ds = Dataset::new(vec![episode("a", "train", &vs)]).unwrap();
        let s = trainset_stats(&ds).unwrap();
        let direct = support_stats(vs.iter().map(|v| &v[..])).unwrap();
        assert_eq!(s, direct);
    }

    #[test]
    fn trainset_two_episodes_pooled_and_ignores_other_splits() {
        let a = [[1.0, 5.0], [2.0, 5.0], [0.0, 5.0], [4.0, 5.0], [3.0, 5.0]];
        let b = [[7.0, 5.0], [8.0, 5.0], [9.0, 5.0], [6.0, 5.0], [5.0, 5.0]];
        let c = [[100.0, 1.0]; 5];
        let ds = Dataset::new(vec![
            episode("a", "train", &a),
            episode("b", "train", &b),
            episode("c", "test", &c),
        ])
        .unwrap();
        let s = trainset_stats(&ds).unwrap();
        let pooled: Vec<f64> = a.iter().chain(&b).map(|v| v[0]).collect();
        let m = pooled.iter().sum::<f64>() / 10.0;
        let sd = (pooled.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 10.0).sqrt();
        assert!((s.mu[0] - m).abs() < 1e-12);
        assert!((s.sigma[0] - sd).abs() < 1e-12);
        // constant dimension
        assert_eq!(s.sigma[1], SIGMA_EPS);
    }

    #[test]
    fn trainset_requires_train_split() {
        let vs = [[1.0, 2.0], [2.0, 0.0], [0.0, 1.0], [4.0, 4.0], [3.0, 3.0]];
        let ds = Dataset::new(vec![episode("a", "test", &vs)]).unwrap();
        assert!(trainset_stats(&ds).is_err());
    }

    #[test]
    fn queries_do_not_move_stats() {
        let vs = [[1.0, 2.0], [2.0, 0.0], [0.0, 1.0], [4.0, 4.0], [3.0, 3.0]];
        let mut e = episode("a", "train", &vs);
        let (_, s1) = standardize_episode(&e).unwrap();
        e.queries[0].features = vec![1e6, -1e6];
        let (_, s2) = standardize_episode(&e).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn normalization_names_round_trip() {
        for n in Normalization::ALL {
            assert_eq!(Normalization::parse(n.name()).unwrap(), n);
        }
        assert!(Normalization::parse("bogus").is_err());
    }
}
