//! Bongard-style episodes in feature space.
//!
//! A concept is a unit direction `c`. Every episode draws a shared offset
//! `o` (norm close to `beta`) and a per-dimension positive gain `g`, then
//!
//! ```text
//! positive = g * (o + alpha c + eps)
//! negative = g * (o - alpha c + eps),    eps ~ N(0, noise^2 I)
//! ```
//!
//! Both nuisances are shared by all images of one episode, which is what
//! support-set standardization removes. `gain_spread = 0` turns the gain
//! off. Splits draw concepts from disjoint pools.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::episode::{Dataset, Episode, FeatureVector, Label, Query};
use crate::error::{Error, Result};
use crate::linalg::norm;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerSplit {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl PerSplit {
    pub fn get(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }
}

impl Default for PerSplit {
    fn default() -> Self {
        PerSplit {
            train: 0,
            val: 0,
            test: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeSpec {
    pub dim: usize,
    /// Width of the raw-input corpus fed to the encoder.
    pub raw_dim: usize,
    pub k: usize,
    pub queries_per_class: usize,
    pub alpha: f64,
    pub beta: f64,
    pub noise: f64,
    /// Std of the log per-dimension gain.
    pub gain_spread: f64,
    pub episodes: PerSplit,
    /// Concepts per split.
    pub pools: PerSplit,
    /// Most episodes any one concept may appear in.
    pub max_reuse: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            dim: 64,
            raw_dim: 128,
            k: 6,
            queries_per_class: 1,
            alpha: 1.0,
            beta: 5.0,
            noise: 0.5,
            gain_spread: 1.0,
            episodes: PerSplit {
                train: 2000,
                val: 200,
                test: 500,
            },
            pools: PerSplit {
                train: 200,
                val: 50,
                test: 100,
            },
            max_reuse: 50,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.queries_per_class == 0 {
            return bad("queries_per_class must be positive".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("noise", self.noise),
            ("gain_spread", self.gain_spread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for split in SPLITS {
            let (n, pool) = (self.episodes.get(split), self.pools.get(split));
            if n > pool.saturating_mul(self.max_reuse) {
                return Err(Error::PoolTooSmall {
                    split: split.into(),
                    pool,
                    episodes: n,
                    reuse: self.max_reuse,
                });
            }
        }
        Ok(())
    }
}

/// One generated episode with its hidden nuisance draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub episode: Episode,
    pub offset: Vec<f64>,
    pub gain: Vec<f64>,
}

fn normal_vec<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Unit vector drawn uniformly from the sphere.
pub fn random_concept<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> FeatureVector {
    loop {
        let v = normal_vec(dim, 1.0, rng);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn generate_episode<R: Rng + ?Sized>(
    spec: &EpisodeSpec,
    concept: &[f64],
    id: &str,
    split: &str,
    rng: &mut R,
) -> Result<Draw> {
    if concept.len() != spec.dim {
        return Err(Error::DimensionMismatch {
            expected: spec.dim,
            found: concept.len(),
        });
    }
    let d = spec.dim;
    let offset = normal_vec(d, spec.beta / (d as f64).sqrt(), rng);
    let gain: Vec<f64> = normal_vec(d, spec.gain_spread, rng)
        .into_iter()
        .map(f64::exp)
        .collect();
    let image = |label: Label, rng: &mut R| -> FeatureVector {
        let s = label.sign() * spec.alpha;
        (0..d)
            .map(|j| {
                let eps: f64 = StandardNormal.sample(rng);
                gain[j] * (offset[j] + s * concept[j] + spec.noise * eps)
            })
            .collect()
    };
    let positives = (0..spec.k).map(|_| image(Label::Positive, rng)).collect();
    let negatives = (0..spec.k).map(|_| image(Label::Negative, rng)).collect();
    let mut queries = Vec::with_capacity(2 * spec.queries_per_class);
    for label in [Label::Positive, Label::Negative] {
        for _ in 0..spec.queries_per_class {
            queries.push(Query {
                features: image(label, rng),
                label,
            });
        }
    }
    Ok(Draw {
        episode: Episode {
            id: id.into(),
            split: split.into(),
            positives,
            negatives,
            queries,
            concept_id: None,
        },
        offset,
        gain,
    })
}

/// Fixed random map `raw = z + 0.5 tanh(z)`, `z = M f`; injective when
/// `raw_dim >= dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMap {
    pub m: Vec<f64>,
    pub raw_dim: usize,
    pub dim: usize,
}

impl RawMap {
    pub fn new<R: Rng + ?Sized>(dim: usize, raw_dim: usize, rng: &mut R) -> RawMap {
        RawMap {
            m: normal_vec(raw_dim * dim, 1.0 / (dim as f64).sqrt(), rng),
            raw_dim,
            dim,
        }
    }

    pub fn apply(&self, f: &[f64]) -> Result<FeatureVector> {
        if f.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: f.len(),
            });
        }
        Ok(self
            .m
            .chunks_exact(self.dim)
            .map(|row| {
                let z: f64 = row.iter().zip(f).map(|(a, b)| a * b).sum();
                z + 0.5 * z.tanh()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub dataset: Dataset,
    /// Same episodes (ids and labels) pushed through [`RawMap`].
    pub raw: Option<Dataset>,
    pub concepts: Vec<(String, FeatureVector)>,
}

fn episode_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser over seed ^ index
    let mut z = (seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(spec: &EpisodeSpec, with_raw: bool) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut concepts = Vec::new();
    let mut pools = Vec::new();
    for split in SPLITS {
        let start = concepts.len();
        for i in 0..spec.pools.get(split) {
            concepts.push((format!("{split}-c{i:04}"), random_concept(spec.dim, &mut rng)));
        }
        pools.push(start..concepts.len());
    }
    let raw_map = with_raw.then(|| RawMap::new(spec.dim, spec.raw_dim, &mut rng));

    let mut episodes = Vec::new();
    let mut index = 0u64;
    for (split, pool) in SPLITS.iter().zip(pools) {
        let n = spec.episodes.get(split);
        if n == 0 {
            continue;
        }
        // balanced assignment: every concept used ceil(n / pool) times at most
        let mut order: Vec<usize> = pool.clone().collect();
        order.shuffle(&mut rng);
        for i in 0..n {
            let c = order[i % order.len()];
            let mut erng = ChaCha8Rng::seed_from_u64(episode_seed(spec.seed, index));
            index += 1;
            let id = format!("{split}-{i:05}");
            let mut draw = generate_episode(spec, &concepts[c].1, &id, split, &mut erng)?;
            draw.episode.concept_id = Some(concepts[c].0.clone());
            episodes.push(draw.episode);
        }
    }
    let raw = match &raw_map {
        Some(map) => Some(Dataset::new(
            episodes
                .iter()
                .map(|e| e.map_features(|f| map.apply(f)))
                .collect::<Result<_>>()?,
        )?),
        None => None,
    };
    Ok(Generated {
        dataset: Dataset::new(episodes)?,
        raw,
        concepts,
    })
}
