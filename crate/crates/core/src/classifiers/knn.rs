use super::Labeled;
use crate::episode::Label;
use crate::error::{Error, Result};
use crate::linalg::cosine;

pub const DEFAULT_K: usize = 5;

/// Majority label among the `k` supports most cosine-similar to `query`.
/// Equal similarities are ordered by support index.
pub fn knn_classify(supports: &[Labeled<'_>], query: &[f64], k: usize) -> Result<Label> {
    if k == 0 || k % 2 == 0 || k > supports.len() {
        return Err(Error::InvalidArgument(format!(
            "k must be odd and in [1, {}], got {k}",
            supports.len()
        )));
    }
    let mut sims = supports
        .iter()
        .enumerate()
        .map(|(i, (v, label))| Ok((cosine(query, v)?, i, *label)))
        .collect::<Result<Vec<_>>>()?;
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let votes: f64 = sims[..k].iter().map(|(_, _, l)| l.sign()).sum();
    Ok(Label::from_score(votes))
}
