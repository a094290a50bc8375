use serde::{Deserialize, Serialize};

use super::Labeled;
use crate::episode::{Episode, Label};
use crate::error::{Error, Result};
use crate::linalg::{check_dim, cosine, mean};

/// Class means of the positive and negative supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypePair {
    pub p: Vec<f64>,
    pub n: Vec<f64>,
}

impl PrototypePair {
    pub fn fit(supports: &[Labeled<'_>]) -> Result<PrototypePair> {
        let of = |want: Label| {
            mean(supports.iter().filter(|(_, l)| *l == want).map(|(v, _)| *v)).ok_or(
                Error::TooFew {
                    what: "supports in each class",
                    needed: 1,
                    found: 0,
                },
            )
        };
        let p = of(Label::Positive)?;
        let n = of(Label::Negative)?;
        check_dim(&p, &n)?;
        Ok(PrototypePair { p, n })
    }

    pub fn swapped(&self) -> PrototypePair {
        PrototypePair {
            p: self.n.clone(),
            n: self.p.clone(),
        }
    }
}

pub fn prototype_fit(e: &Episode) -> Result<PrototypePair> {
    PrototypePair::fit(&e.labeled_supports())
}

/// `score = cos(q, p) - cos(q, n)`; ties go to positive.
pub fn prototype_classify(pp: &PrototypePair, query: &[f64]) -> Result<(Label, f64)> {
    let score = cosine(query, &pp.p)? - cosine(query, &pp.n)?;
    Ok((Label::from_score(score), score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::*;

    #[test]
    fn mean_of_positives() {
        let a = [1.0, 0.0];
        let b = [3.0, 0.0];
        let c = [0.0, 1.0];
        let pp = PrototypePair::fit(&[(&a, Positive), (&b, Positive), (&c, Negative)]).unwrap();
        assert_eq!(pp.p, vec![2.0, 0.0]);
        assert_eq!(pp.n, vec![0.0, 1.0]);
    }

    #[test]
    fn empty_class_errors() {
        let a = [1.0, 0.0];
        assert!(PrototypePair::fit(&[(&a, Positive)]).is_err());
    }

    #[test]
    fn classify_examples() {
        let pp = PrototypePair {
            p: vec![1.0, 0.0],
            n: vec![0.0, 1.0],
        };
        assert_eq!(prototype_classify(&pp, &[0.9, 0.1]).unwrap().0, Positive);

        let tie = PrototypePair {
            p: vec![1.0, 0.0],
            n: vec![-1.0, 0.0],
        };
        let (label, score) = prototype_classify(&tie, &[0.0, 1.0]).unwrap();
        assert_eq!(score, 0.0);
        assert_eq!(label, Positive);
    }

    #[test]
    fn zero_norm_rejected() {
        let pp = PrototypePair {
            p: vec![0.0, 0.0],
            n: vec![0.0, 1.0],
        };
        assert!(prototype_classify(&pp, &[1.0, 1.0]).is_err());
        let pp = PrototypePair {
            p: vec![1.0, 0.0],
            n: vec![0.0, 1.0],
        };
        assert!(prototype_classify(&pp, &[0.0, 0.0]).is_err());
    }
}
