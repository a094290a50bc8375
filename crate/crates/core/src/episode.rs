//! Episode data model and the line-delimited episode file format.
//!
//! Each line of an episode file is one JSON object:
//!
//! ```text
//! {"id":"train-0","split":"train","positives":[[..],..],"negatives":[[..],..],
//!  "queries":[{"features":[..],"label":"pos"},..],"concept_id":"train-c3"}
//! ```
//!
//! `concept_id` is optional. Numbers are written in shortest round-trip
//! decimal form, so a write/parse cycle reproduces every value bit-exactly.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type FeatureVector = Vec<f64>;

pub const TRAIN_SPLIT: &str = "train";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

impl Label {
    pub fn flipped(self) -> Label {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
        }
    }

    /// +1 for positive, -1 for negative.
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }

    /// Score-to-label rule shared by every classifier: ties go to positive.
    pub fn from_score(score: f64) -> Label {
        if score >= 0.0 {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "pos",
            Label::Negative => "neg",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub features: FeatureVector,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub split: String,
    pub positives: Vec<FeatureVector>,
    pub negatives: Vec<FeatureVector>,
    pub queries: Vec<Query>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_id: Option<String>,
}

/// A single reason an episode fails validation.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ClassCountMismatch { positives: usize, negatives: usize },
    TooFewSupports { per_class: usize },
    NoQueries,
    Dimension { location: String, expected: usize, found: usize },
    NonFinite { location: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ClassCountMismatch { positives, negatives } => write!(
                f,
                "class-count mismatch: {positives} positives vs {negatives} negatives"
            ),
            Violation::TooFewSupports { per_class } => {
                write!(f, "need at least 2 supports per class, got {per_class}")
            }
            Violation::NoQueries => f.write_str("episode has no queries"),
            Violation::Dimension {
                location,
                expected,
                found,
            } => write!(f, "{location}: dimension {found}, expected {expected}"),
            Violation::NonFinite { location } => write!(f, "{location}: non-finite feature"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl Episode {
    /// Number of supports per class (`K`), taken from the positive side.
    pub fn k(&self) -> usize {
        self.positives.len()
    }

    /// Feature dimension, read from the first vector present.
    pub fn dim(&self) -> Option<usize> {
        self.positives
            .first()
            .or_else(|| self.negatives.first())
            .or_else(|| self.queries.first().map(|q| &q.features))
            .map(Vec::len)
    }

    /// All supports with their labels, positives first.
    pub fn labeled_supports(&self) -> Vec<(&[f64], Label)> {
        self.positives
            .iter()
            .map(|v| (v.as_slice(), Label::Positive))
            .chain(self.negatives.iter().map(|v| (v.as_slice(), Label::Negative)))
            .collect()
    }

    pub fn supports(&self) -> impl Iterator<Item = &[f64]> {
        self.positives
            .iter()
            .chain(self.negatives.iter())
            .map(Vec::as_slice)
    }

    /// Apply `f` to every feature vector (supports and queries).
    pub fn map_features<F>(&self, mut f: F) -> Result<Episode>
    where
        F: FnMut(&[f64]) -> Result<FeatureVector>,
    {
        Ok(Episode {
            id: self.id.clone(),
            split: self.split.clone(),
            positives: self.positives.iter().map(|v| f(v)).collect::<Result<_>>()?,
            negatives: self.negatives.iter().map(|v| f(v)).collect::<Result<_>>()?,
            queries: self
                .queries
                .iter()
                .map(|q| {
                    Ok(Query {
                        features: f(&q.features)?,
                        label: q.label,
                    })
                })
                .collect::<Result<_>>()?,
            concept_id: self.concept_id.clone(),
        })
    }
}

/// Check the episode invariants; `expected_dim` pins D when known.
pub fn validate_episode(e: &Episode, expected_dim: Option<usize>) -> ValidationReport {
    let mut violations = Vec::new();
    let (np, nn) = (e.positives.len(), e.negatives.len());
    if np != nn {
        violations.push(Violation::ClassCountMismatch {
            positives: np,
            negatives: nn,
        });
    }
    if np.min(nn) < 2 {
        violations.push(Violation::TooFewSupports {
            per_class: np.min(nn),
        });
    }
    if e.queries.is_empty() {
        violations.push(Violation::NoQueries);
    }

    let dim = expected_dim.or_else(|| e.dim());
    let mut check = |location: String, v: &[f64]| {
        if let Some(d) = dim {
            if v.len() != d {
                violations.push(Violation::Dimension {
                    location: location.clone(),
                    expected: d,
                    found: v.len(),
                });
            }
        }
        if !v.iter().all(|x| x.is_finite()) {
            violations.push(Violation::NonFinite { location });
        }
    };
    for (i, v) in e.positives.iter().enumerate() {
        check(format!("positives[{i}]"), v);
    }
    for (i, v) in e.negatives.iter().enumerate() {
        check(format!("negatives[{i}]"), v);
    }
    for (i, q) in e.queries.iter().enumerate() {
        check(format!("queries[{i}]"), &q.features);
    }
    ValidationReport { violations }
}

/// A validated collection of episodes sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Validate every episode, enforce a single dimension and unique ids.
    pub fn new(episodes: Vec<Episode>) -> Result<Dataset> {
        let dim = episodes
            .first()
            .and_then(Episode::dim)
            .ok_or_else(|| Error::InvalidArgument("dataset has no episodes".into()))?;
        let mut seen = HashSet::new();
        for (i, e) in episodes.iter().enumerate() {
            let report = validate_episode(e, Some(dim));
            if !report.is_valid() {
                return Err(Error::InvalidEpisode {
                    line: i + 1,
                    id: e.id.clone(),
                    violations: report.violations,
                });
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        Ok(Dataset { dim, episodes })
    }

    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Episode> + 'a {
        self.episodes.iter().filter(move |e| e.split == name)
    }

    /// Split names in order of first appearance.
    pub fn split_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for e in &self.episodes {
            if !names.contains(&e.split) {
                names.push(e.split.clone());
            }
        }
        names
    }

    pub fn get(&self, id: &str) -> Option<&Episode> {
        self.episodes.iter().find(|e| e.id == id)
    }
}

pub fn parse_episode_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    parse_episodes(reader).map_err(|e| match e {
        Error::InvalidArgument(_) => Error::EmptyFile {
            path: path.to_path_buf(),
        },
        other => other,
    })
}

/// Parse line-delimited episodes from any reader. Blank lines are skipped.
pub fn parse_episodes<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut episodes: Vec<Episode> = Vec::new();
    let mut dim: Option<usize> = None;
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let episode: Episode = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let d = match (dim, episode.dim()) {
            (Some(d), Some(found)) if d != found => {
                return Err(Error::DatasetDimension {
                    line: line_no,
                    expected: d,
                    found,
                });
            }
            (Some(d), _) => d,
            (None, Some(found)) => {
                dim = Some(found);
                found
            }
            (None, None) => 0,
        };
        let report = validate_episode(&episode, Some(d));
        if !report.is_valid() {
            return Err(Error::InvalidEpisode {
                line: line_no,
                id: episode.id,
                violations: report.violations,
            });
        }
        if !seen.insert(episode.id.clone()) {
            return Err(Error::DuplicateId(episode.id));
        }
        episodes.push(episode);
    }
    match dim {
        Some(dim) => Ok(Dataset { dim, episodes }),
        None => Err(Error::InvalidArgument("no episodes".into())),
    }
}

pub fn write_episodes<W: Write>(mut writer: W, episodes: &[Episode]) -> Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut writer, e)
            .map_err(|err| Error::NonFinite(format!("episode `{}`: {err}", e.id)))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_episode_file(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let file = File::create(path)?;
    write_episodes(BufWriter::new(file), &dataset.episodes)
}

/// Keep `m` supports per class, drawn uniformly without replacement.
/// Survivors keep their original relative order; queries are untouched.
pub fn split_supports<R: Rng + ?Sized>(e: &Episode, m: usize, rng: &mut R) -> Result<Episode> {
    let k = e.positives.len().min(e.negatives.len());
    if m < 2 || m > k {
        return Err(Error::InvalidArgument(format!(
            "supports per class must be in [2, {k}], got {m}"
        )));
    }
    let pick = |pool: &[FeatureVector], rng: &mut R| -> Vec<FeatureVector> {
        let mut idx = rand::seq::index::sample(rng, pool.len(), m).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].clone()).collect()
    };
    let positives = pick(&e.positives, rng);
    let negatives = pick(&e.negatives, rng);
    Ok(Episode {
        positives,
        negatives,
        ..e.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy(k: usize, d: usize) -> Episode {
        let v = |s: f64, i: usize| (0..d).map(|j| s * (1.0 + i as f64) + j as f64 * 0.1).collect();
        Episode {
            id: "e0".into(),
            split: "train".into(),
            positives: (0..k).map(|i| v(1.0, i)).collect(),
            negatives: (0..k).map(|i| v(-1.0, i)).collect(),
            queries: vec![
                Query {
                    features: v(1.0, 9),
                    label: Label::Positive,
                },
                Query {
                    features: v(-1.0, 9),
                    label: Label::Negative,
                },
            ],
            concept_id: None,
        }
    }

    #[test]
    fn valid_six_by_six() {
        assert!(validate_episode(&toy(6, 4), None).is_valid());
    }

    #[test]
    fn class_count_mismatch() {
        let mut e = toy(6, 4);
        e.negatives.pop();
        let r = validate_episode(&e, None);
        assert_eq!(
            r.violations,
            vec![Violation::ClassCountMismatch {
                positives: 6,
                negatives: 5
            }]
        );
    }

    #[test]
    fn non_finite_feature() {
        let mut e = toy(6, 4);
        e.queries[1].features[2] = f64::NAN;
        let r = validate_episode(&e, None);
        assert_eq!(
            r.violations,
            vec![Violation::NonFinite {
                location: "queries[1]".into()
            }]
        );
    }

    #[test]
    fn no_queries_and_too_few() {
        let mut e = toy(1, 3);
        e.queries.clear();
        let r = validate_episode(&e, None);
        assert!(r.violations.contains(&Violation::NoQueries));
        assert!(r.violations.contains(&Violation::TooFewSupports { per_class: 1 }));
    }

    #[test]
    fn dimension_violation_is_reported() {
        let mut e = toy(2, 3);
        e.negatives[0].push(0.0);
        let r = validate_episode(&e, Some(3));
        assert_eq!(r.violations.len(), 1);
        assert!(matches!(r.violations[0], Violation::Dimension { found: 4, .. }));
    }

    #[test]
    fn parse_single_line() {
        let line = r#"{"id":"a","split":"train","positives":[[1,2],[3,4]],"negatives":[[0,1],[1,0]],"queries":[{"features":[1,1],"label":"pos"}]}"#;
        let ds = parse_episodes(line.as_bytes()).unwrap();
        assert_eq!(ds.dim, 2);
        assert_eq!(ds.episodes.len(), 1);
        assert_eq!(ds.episodes[0].concept_id, None);
    }

    #[test]
    fn parse_dimension_mismatch() {
        let text = concat!(
            r#"{"id":"a","split":"train","positives":[[1,2],[3,4]],"negatives":[[0,1],[1,0]],"queries":[{"features":[1,1],"label":"pos"}]}"#,
            "\n",
            r#"{"id":"b","split":"train","positives":[[1,2,3],[3,4,5]],"negatives":[[0,1,0],[1,0,0]],"queries":[{"features":[1,1,1],"label":"neg"}]}"#,
        );
        let err = parse_episodes(text.as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            Error::DatasetDimension {
                line: 2,
                expected: 2,
                found: 3
            }
        ));
    }

    #[test]
    fn parse_malformed_reports_line() {
        let text = format!(
            "{}\n{{not json\n",
            r#"{"id":"a","split":"train","positives":[[1,2],[3,4]],"negatives":[[0,1],[1,0]],"queries":[{"features":[1,1],"label":"pos"}]}"#
        );
        let err = parse_episodes(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn parse_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "\n").unwrap();
        assert!(matches!(parse_episode_file(&p), Err(Error::EmptyFile { .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = toy(2, 2);
        assert!(matches!(Dataset::new(vec![e.clone(), e]), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn split_supports_full_is_identity() {
        let e = toy(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(split_supports(&e, 6, &mut rng).unwrap(), e);
    }

    #[test]
    fn split_supports_subset_and_deterministic() {
        let e = toy(6, 3);
        let a = split_supports(&e, 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = split_supports(&e, 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.positives.len(), 2);
        assert_eq!(a.negatives.len(), 2);
        assert!(a.positives.iter().all(|v| e.positives.contains(v)));
        assert!(a.negatives.iter().all(|v| e.negatives.contains(v)));
        assert_eq!(a.queries, e.queries);
    }

    #[test]
    fn split_supports_range() {
        let e = toy(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(split_supports(&e, 1, &mut rng).is_err());
        assert!(split_supports(&e, 7, &mut rng).is_err());
    }
}
