use super::TextEmbedder;
use crate::linalg;
use crate::world::{ConceptId, DatasetBundle, McqType, SplitKind};
use crate::{NeatError, Result};
use serde::{Deserialize, Serialize};

fn percent(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

fn scene_feature(bundle: &DatasetBundle, scene_id: u64) -> Result<&[f64]> {
    bundle
        .scene(scene_id)
        .map(|s| s.feature.as_slice())
        .ok_or_else(|| NeatError::Validation(format!("missing scene {scene_id}")))
}

/// Index of the text most similar to `image`; ties go to the lower index.
fn pick(image: &[f64], texts: &[Vec<f64>]) -> usize {
    linalg::argmax(
        &texts
            .iter()
            .map(|t| linalg::dot(image, t))
            .collect::<Vec<_>>(),
    )
}

/// Accuracies in percent per choice-set type and overall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McqMetrics {
    pub affirmed: f64,
    pub negated: f64,
    pub hybrid: f64,
    pub total: f64,
    /// Item counts per type, in the order affirmed, negated, hybrid.
    pub counts: [usize; 3],
}

pub fn mcq_eval(embedder: &dyn TextEmbedder, bundle: &DatasetBundle) -> Result<McqMetrics> {
    let texts: Vec<String> = bundle
        .mcq
        .iter()
        .flat_map(|m| m.choices.iter().map(|c| c.caption.clone()))
        .collect();
    let emb = embedder.embed(&texts)?;
    let mut counts = [0usize; 3];
    let mut hits = [0usize; 3];
    let mut offset = 0;
    for item in &bundle.mcq {
        let n = item.choices.len();
        if n != 4 || item.correct_index >= n {
            return Err(NeatError::Validation(format!(
                "mcq item for scene {} is malformed",
                item.scene_id
            )));
        }
        let slot = match item.mcq_type {
            McqType::Affirmed => 0,
            McqType::Negated => 1,
            McqType::Hybrid => 2,
        };
        counts[slot] += 1;
        if pick(
            scene_feature(bundle, item.scene_id)?,
            &emb[offset..offset + n],
        ) == item.correct_index
        {
            hits[slot] += 1;
        }
        offset += n;
    }
    Ok(McqMetrics {
        affirmed: percent(hits[0], counts[0]),
        negated: percent(hits[1], counts[1]),
        hybrid: percent(hits[2], counts[2]),
        total: percent(hits.iter().sum(), counts.iter().sum()),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBinary {
    pub concept: ConceptId,
    pub count: usize,
    pub aff_accuracy: f64,
    pub neg_accuracy: f64,
}

/// Presence/absence accuracy per concept, for the affirmative pairing and
/// for the "shows" / "does not show" pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub per_concept: Vec<ConceptBinary>,
    pub aff_accuracy: f64,
    pub neg_accuracy: f64,
}

pub fn binary_neg_eval(
    embedder: &dyn TextEmbedder,
    bundle: &DatasetBundle,
) -> Result<BinaryMetrics> {
    let texts: Vec<String> = bundle
        .binary
        .iter()
        .flat_map(|b| b.aff_statements.iter().chain(&b.neg_statements).cloned())
        .collect();
    let emb = embedder.embed(&texts)?;
    let mut per: std::collections::BTreeMap<ConceptId, [usize; 3]> = Default::default();
    for (k, item) in bundle.binary.iter().enumerate() {
        let image = scene_feature(bundle, item.scene_id)?;
        let e = &emb[4 * k..4 * k + 4];
        let entry = per.entry(item.concept).or_default();
        entry[0] += 1;
        entry[1] += (pick(image, &e[..2]) == item.aff_correct) as usize;
        entry[2] += (pick(image, &e[2..]) == item.neg_correct) as usize;
    }
    let n = bundle.binary.len();
    let (aff, neg) = per.values().fold((0, 0), |(a, b), c| (a + c[1], b + c[2]));
    Ok(BinaryMetrics {
        per_concept: per
            .into_iter()
            .map(|(concept, c)| ConceptBinary {
                concept,
                count: c[0],
                aff_accuracy: percent(c[1], c[0]),
                neg_accuracy: percent(c[2], c[0]),
            })
            .collect(),
        aff_accuracy: percent(aff, n),
        neg_accuracy: percent(neg, n),
    })
}

/// Top-1 results on a template classification bundle. On `cls_neg` the
/// true class's caption is correct; on `cls_rev_neg` it is the reversed,
/// false caption, so ranking it first counts as an error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClsMetrics {
    pub top1_accuracy: f64,
    pub top1_error_rate: f64,
    pub count: usize,
}

pub fn template_cls_eval(
    embedder: &dyn TextEmbedder,
    bundle: &DatasetBundle,
) -> Result<ClsMetrics> {
    let reversed = match bundle.split {
        SplitKind::ClsNeg => false,
        SplitKind::ClsRevNeg => true,
        other => {
            return Err(NeatError::invalid(format!(
                "{} is not a classification bundle",
                other.as_str()
            )))
        }
    };
    let texts: Vec<String> = bundle
        .cls
        .iter()
        .flat_map(|c| c.candidates.iter().map(|q| q.caption.clone()))
        .collect();
    let emb = embedder.embed(&texts)?;
    let mut offset = 0;
    let mut class_first = 0;
    for item in &bundle.cls {
        let n = item.candidates.len();
        if item.class >= n {
            return Err(NeatError::Validation(format!(
                "candidate set for scene {} misses its class",
                item.scene_id
            )));
        }
        class_first += (pick(
            scene_feature(bundle, item.scene_id)?,
            &emb[offset..offset + n],
        ) == item.class) as usize;
        offset += n;
    }
    let rate = percent(class_first, bundle.cls.len());
    let (top1_accuracy, top1_error_rate) = if reversed {
        (100.0 - rate, rate)
    } else {
        (rate, 100.0 - rate)
    };
    Ok(ClsMetrics {
        top1_accuracy,
        top1_error_rate,
        count: bundle.cls.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::testing::{Fixed, TableEmbedder};
    use crate::world::{build_split, generate_world, World};
    use std::collections::HashMap;

    fn world() -> World {
        generate_world(10, 32, 5).unwrap()
    }

    fn random(seed: u64) -> TableEmbedder {
        TableEmbedder {
            table: HashMap::new(),
            dim: 32,
            seed,
        }
    }

    /// Scene feature for the true text, its negation for every other one.
    fn oracle<'a>(items: impl Iterator<Item = (&'a [f64], usize, usize)>) -> Fixed {
        let mut out = Vec::new();
        for (f, n, correct) in items {
            for k in 0..n {
                out.push(if k == correct {
                    f.to_vec()
                } else {
                    f.iter().map(|x| -x).collect()
                });
            }
        }
        Fixed(out)
    }

    #[test]
    fn mcq_oracle_and_chance() {
        let w = world();
        let b = build_split(&w, SplitKind::McqNeg, 300, 1).unwrap();
        let o = oracle(b.mcq.iter().map(|m| {
            (
                b.scene(m.scene_id).unwrap().feature.as_slice(),
                4,
                m.correct_index,
            )
        }));
        assert_eq!(mcq_eval(&o, &b).unwrap().total, 100.0);
        let r = mcq_eval(&random(3), &b).unwrap();
        assert!((r.total - 25.0).abs() < 8.0, "{r:?}");
        assert_eq!(r.counts.iter().sum::<usize>(), 300);
        let weighted = (r.affirmed * r.counts[0] as f64
            + r.negated * r.counts[1] as f64
            + r.hybrid * r.counts[2] as f64)
            / 300.0;
        assert!((weighted - r.total).abs() < 1e-9);
    }

    #[test]
    fn binary_oracle_and_order_invariance() {
        let w = world();
        let mut b = build_split(&w, SplitKind::BinaryNeg, 80, 2).unwrap();
        let mut vecs = Vec::new();
        for it in &b.binary {
            let f = &b.scene(it.scene_id).unwrap().feature;
            for correct in [it.aff_correct, it.neg_correct] {
                vecs.extend(oracle(std::iter::once((f.as_slice(), 2, correct))).0);
            }
        }
        let m = binary_neg_eval(&Fixed(vecs), &b).unwrap();
        assert_eq!((m.aff_accuracy, m.neg_accuracy), (100.0, 100.0));
        assert_eq!(m.per_concept.iter().map(|c| c.count).sum::<usize>(), 80);

        let enc = random(7);
        let before = binary_neg_eval(&enc, &b).unwrap();
        for it in b.binary.iter_mut() {
            it.aff_statements.swap(0, 1);
            it.aff_correct = 1 - it.aff_correct;
            it.neg_statements.swap(0, 1);
            it.neg_correct = 1 - it.neg_correct;
        }
        assert_eq!(binary_neg_eval(&enc, &b).unwrap(), before);
    }

    #[test]
    fn cls_oracle_and_chance() {
        let w = world();
        let neg = build_split(&w, SplitKind::ClsNeg, 200, 3).unwrap();
        let rev = build_split(&w, SplitKind::ClsRevNeg, 200, 3).unwrap();
        let feats = |b: &DatasetBundle, c: &crate::world::ClsItem| {
            b.scene(c.scene_id).unwrap().feature.clone()
        };
        let o: Vec<Vec<f64>> = neg
            .cls
            .iter()
            .flat_map(|c| oracle(std::iter::once((feats(&neg, c).as_slice(), 10, c.class))).0)
            .collect();
        let m = template_cls_eval(&Fixed(o), &neg).unwrap();
        assert_eq!((m.top1_accuracy, m.top1_error_rate), (100.0, 0.0));
        // an oracle for the reversed bundle never ranks the false caption first
        let o: Vec<Vec<f64>> = rev
            .cls
            .iter()
            .flat_map(|c| {
                oracle(std::iter::once((
                    feats(&rev, c).as_slice(),
                    10,
                    (c.class + 1) % 10,
                )))
                .0
            })
            .collect();
        let m = template_cls_eval(&Fixed(o), &rev).unwrap();
        assert_eq!(m.top1_error_rate, 0.0);
        let r = template_cls_eval(&random(2), &neg).unwrap();
        assert!((r.top1_accuracy - 10.0).abs() < 7.0, "{r:?}");
        let r = template_cls_eval(&random(2), &rev).unwrap();
        assert!((r.top1_error_rate - 10.0).abs() < 7.0, "{r:?}");
        assert!(template_cls_eval(
            &random(2),
            &build_split(&w, SplitKind::McqNeg, 3, 1).unwrap()
        )
        .is_err());
    }
}
