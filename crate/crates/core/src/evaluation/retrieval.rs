use super::TextEmbedder;
use crate::linalg;
use crate::world::DatasetBundle;
use crate::{NeatError, Result};
use serde::{Deserialize, Serialize};

/// Recall at 1, 5 and 10 (in percent) for both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub i2t: [f64; 3],
    pub t2i: [f64; 3],
    pub rsum: f64,
    pub count: usize,
}

impl RetrievalMetrics {
    /// Mean of the two R@1 values.
    pub fn mean_r1(&self) -> f64 {
        (self.i2t[0] + self.t2i[0]) / 2.0
    }
}

/// Rank of `target` in `scores`: how many entries beat it, counting ties at
/// a lower index as beating it.
fn rank_of(scores: impl Iterator<Item = f64>, target: usize, target_score: f64) -> usize {
    scores
        .enumerate()
        .filter(|&(j, s)| s > target_score || (s == target_score && j < target))
        .count()
}

/// Recall from a square text-by-image similarity matrix whose diagonal
/// holds the true pairs.
pub fn retrieval_from_similarity(sim: &[Vec<f64>]) -> Result<RetrievalMetrics> {
    let n = sim.len();
    if n == 0 || sim.iter().any(|r| r.len() != n) {
        return Err(NeatError::invalid(
            "retrieval needs a non-empty square similarity matrix",
        ));
    }
    let mut t2i_ranks = Vec::with_capacity(n);
    let mut i2t_ranks = Vec::with_capacity(n);
    for i in 0..n {
        t2i_ranks.push(rank_of(sim[i].iter().copied(), i, sim[i][i]));
        i2t_ranks.push(rank_of((0..n).map(|t| sim[t][i]), i, sim[i][i]));
    }
    let recall = |ranks: &[usize]| {
        [1, 5, 10].map(|k| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
    };
    let i2t = recall(&i2t_ranks);
    let t2i = recall(&t2i_ranks);
    Ok(RetrievalMetrics {
        i2t,
        t2i,
        rsum: i2t.iter().sum::<f64>() + t2i.iter().sum::<f64>(),
        count: n,
    })
}

pub fn retrieval_from_embeddings(
    texts: &[Vec<f64>],
    images: &[Vec<f64>],
) -> Result<RetrievalMetrics> {
    if texts.len() != images.len() {
        return Err(NeatError::invalid("retrieval pairing must be one-to-one"));
    }
    let sim: Vec<Vec<f64>> = texts
        .iter()
        .map(|t| images.iter().map(|v| linalg::dot(t, v)).collect())
        .collect();
    retrieval_from_similarity(&sim)
}

/// Text-to-image and image-to-text recall over the caption/scene pairs of
/// a bundle in which each scene has exactly one caption.
pub fn retrieval_eval(
    embedder: &dyn TextEmbedder,
    bundle: &DatasetBundle,
) -> Result<RetrievalMetrics> {
    let texts: Vec<String> = bundle
        .captions
        .iter()
        .map(|c| c.quad.caption.clone())
        .collect();
    let images = paired_images(bundle)?;
    retrieval_from_embeddings(&embedder.embed(&texts)?, &images)
}

/// Scene features in caption order, checking that the pairing is bijective.
pub(crate) fn paired_images(bundle: &DatasetBundle) -> Result<Vec<Vec<f64>>> {
    let mut seen = std::collections::HashSet::new();
    bundle
        .captions
        .iter()
        .map(|c| {
            if !seen.insert(c.scene_id) {
                return Err(NeatError::Validation(format!(
                    "scene {} has more than one caption",
                    c.scene_id
                )));
            }
            bundle
                .scene(c.scene_id)
                .map(|s| s.feature.clone())
                .ok_or_else(|| {
                    NeatError::Validation(format!("caption {} has no scene", c.caption_id))
                })
        })
        .collect()
}
