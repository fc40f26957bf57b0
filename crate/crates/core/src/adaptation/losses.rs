use super::{AdaptationConfig, HardestRule, LossFlags};
use crate::linalg;
use crate::{NeatError, Result};
use serde::{Deserialize, Serialize};

/// Penalized similarity: `(tP·v)(1 − α·max(tN·v, 0))`, or plain `tP·v`
/// when there is no negated part.
pub fn negation_separated_similarity(tp: &[f64], tn: Option<&[f64]>, v: &[f64], alpha: f64) -> f64 {
    let s = linalg::dot(tp, v);
    match tn {
        Some(tn) => s * (1.0 - alpha * linalg::dot(tn, v).max(0.0)),
        None => s,
    }
}

/// Embeddings of one adaptation batch plus the indices chosen from them.
///
/// `positives`, `negatives` and `reversed` are `None` for items whose
/// caption has no negation. Candidate and hardest-negative indices point
/// into `visual`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchState {
    pub texts: Vec<Vec<f64>>,
    pub positives: Vec<Option<Vec<f64>>>,
    pub negatives: Vec<Option<Vec<f64>>>,
    pub reversed: Vec<Option<Vec<f64>>>,
    pub visual: Vec<Vec<f64>>,
    pub candidates: Vec<usize>,
    pub hardest: Vec<Option<usize>>,
}

impl BatchState {
    /// Builds a batch and runs candidate and hardest-negative selection.
    pub fn new(
        texts: Vec<Vec<f64>>,
        positives: Vec<Option<Vec<f64>>>,
        negatives: Vec<Option<Vec<f64>>>,
        reversed: Vec<Option<Vec<f64>>>,
        visual: Vec<Vec<f64>>,
        config: &AdaptationConfig,
    ) -> Result<Self> {
        let b = texts.len();
        if b < 2 {
            return Err(NeatError::invalid(
                "an adaptation batch needs at least 2 items",
            ));
        }
        if [
            positives.len(),
            negatives.len(),
            reversed.len(),
            visual.len(),
        ]
        .iter()
        .any(|&n| n != b)
        {
            return Err(NeatError::invalid("batch fields have different lengths"));
        }
        let mut batch = BatchState {
            texts,
            positives,
            negatives,
            reversed,
            visual,
            candidates: vec![],
            hardest: vec![],
        };
        batch.candidates = select_candidates(&batch, config.alpha)?;
        batch.hardest = hardest_negatives(&batch, config.hardest)?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// The query used for selection: the positive part, or the caption itself.
    pub fn query(&self, i: usize) -> &[f64] {
        self.positives[i].as_deref().unwrap_or(&self.texts[i])
    }
}

/// For each item, the visual index maximizing the negation-separated
/// similarity. Ties go to the smallest index.
pub fn select_candidates(batch: &BatchState, alpha: f64) -> Result<Vec<usize>> {
    if batch.len() < 2 {
        return Err(NeatError::invalid(
            "candidate selection needs at least 2 items",
        ));
    }
    Ok((0..batch.len())
        .map(|i| {
            let q = batch.query(i);
            let tn = batch.negatives[i].as_deref();
            let scores: Vec<f64> = batch
                .visual
                .iter()
                .map(|v| negation_separated_similarity(q, tn, v, alpha))
                .collect();
            linalg::argmax(&scores)
        })
        .collect())
}

/// For each item with a reversed caption, the visual index among the other
/// items' candidates that is least (or, with [`HardestRule::MaxSimilarity`],
/// most) similar to the reversed caption. The item's own candidate is never
/// chosen; when every item picked the same candidate, the rest of the pool
/// is searched instead. Ties go to the smallest index.
pub fn hardest_negatives(batch: &BatchState, rule: HardestRule) -> Result<Vec<Option<usize>>> {
    if batch.candidates.len() != batch.len() {
        return Err(NeatError::invalid(
            "hardest negatives need selected candidates",
        ));
    }
    let mut pool: Vec<usize> = batch.candidates.clone();
    pool.sort_unstable();
    pool.dedup();
    Ok((0..batch.len())
        .map(|i| {
            let tr = batch.reversed[i].as_deref()?;
            let own = batch.candidates[i];
            let mut options: Vec<usize> = pool.iter().copied().filter(|&j| j != own).collect();
            if options.is_empty() {
                options = (0..batch.visual.len()).filter(|&j| j != own).collect();
            }
            let mut best = options[0];
            let mut best_s = linalg::dot(tr, &batch.visual[best]);
            for &j in &options[1..] {
                let s = linalg::dot(tr, &batch.visual[j]);
                let better = match rule {
                    HardestRule::MinSimilarity => s < best_s,
                    HardestRule::MaxSimilarity => s > best_s,
                };
                if better {
                    best = j;
                    best_s = s;
                }
            }
            Some(best)
        })
        .collect())
}

/// Gradient of a batch loss with respect to each embedding that receives one.
/// Rows for absent parts stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub texts: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub reversed: Vec<Vec<f64>>,
}

impl BatchGrad {
    pub fn zeros(b: usize, d: usize) -> Self {
        BatchGrad {
            texts: vec![vec![0.0; d]; b],
            positives: vec![vec![0.0; d]; b],
            reversed: vec![vec![0.0; d]; b],
        }
    }

    fn for_batch(batch: &BatchState) -> Self {
        Self::zeros(batch.len(), batch.texts[0].len())
    }

    fn add_scaled(&mut self, other: &BatchGrad, w: f64) {
        for (a, b) in [
            (&mut self.texts, &other.texts),
            (&mut self.positives, &other.positives),
            (&mut self.reversed, &other.reversed),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                linalg::axpy(w, y, x);
            }
        }
    }
}

/// Entropy of `softmax(anchor·Tᵀ/τ)`; accumulates `weight · ∂H/∂tⱼ` into `grad`.
fn entropy_row(
    anchor: &[f64],
    texts: &[Vec<f64>],
    tau: f64,
    weight: f64,
    grad: &mut [Vec<f64>],
) -> f64 {
    let logits: Vec<f64> = texts.iter().map(|t| linalg::dot(anchor, t) / tau).collect();
    let mut p = vec![0.0; logits.len()];
    linalg::softmax(&logits, &mut p);
    let h = linalg::entropy(&p);
    for (j, g) in grad.iter_mut().enumerate() {
        if p[j] > 0.0 {
            // ∂H/∂zⱼ = −pⱼ(ln pⱼ + H)
            let dz = -p[j] * (p[j].ln() + h);
            linalg::axpy(weight * dz / tau, anchor, g);
        }
    }
    h
}

/// Mean row entropy of `softmax(vᵢ·T̂ᵀ/τ₁)` over the paired visual items,
/// with its gradient with respect to each text embedding.
pub fn plain_entropy_loss(
    texts: &[Vec<f64>],
    visual: &[Vec<f64>],
    tau1: f64,
) -> (f64, Vec<Vec<f64>>) {
    let mut grad = vec![vec![0.0; texts.first().map_or(0, Vec::len)]; texts.len()];
    if visual.is_empty() {
        return (0.0, grad);
    }
    let w = 1.0 / visual.len() as f64;
    let total: f64 = visual
        .iter()
        .map(|v| entropy_row(v, texts, tau1, w, &mut grad))
        .sum();
    (total * w, grad)
}

/// Mean row entropy with each item's selected candidate as the anchor.
pub fn refined_entropy_loss(batch: &BatchState, tau1: f64) -> (f64, BatchGrad) {
    let mut grad = BatchGrad::for_batch(batch);
    let w = 1.0 / batch.len() as f64;
    let total: f64 = batch
        .candidates
        .iter()
        .map(|&c| entropy_row(&batch.visual[c], &batch.texts, tau1, w, &mut grad.texts))
        .sum();
    (total * w, grad)
}

/// Mean of `(t̄ᵢ·v̂ᵢ − t̄ᵢ·v̂ᵢ⁻)/τ₂` over items that have a reversed caption.
pub fn semantics_reversion_loss(batch: &BatchState, tau2: f64) -> (f64, BatchGrad) {
    let mut grad = BatchGrad::for_batch(batch);
    let items: Vec<(usize, &[f64], usize)> = (0..batch.len())
        .filter_map(|i| Some((i, batch.reversed[i].as_deref()?, batch.hardest[i]?)))
        .collect();
    if items.is_empty() {
        log::warn!("no item in the batch has a reversed caption; reversion term is zero");
        return (0.0, grad);
    }
    let w = 1.0 / (items.len() as f64 * tau2);
    let mut total = 0.0;
    for (i, tr, h) in items {
        let (vc, vh) = (&batch.visual[batch.candidates[i]], &batch.visual[h]);
        total += linalg::dot(tr, vc) - linalg::dot(tr, vh);
        linalg::axpy(w, vc, &mut grad.reversed[i]);
        linalg::axpy(-w, vh, &mut grad.reversed[i]);
    }
    (total * w, grad)
}

/// `‖a − b‖` with its gradient with respect to `a` (zero at `a = b`).
fn distance_and_unit(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = linalg::norm(&diff);
    if n == 0.0 {
        return (0.0, vec![0.0; a.len()]);
    }
    (n, diff.into_iter().map(|x| x / n).collect())
}

/// Mean of `λ‖t̂ᵢ − tᵢᴾ‖ + (2 − ‖t̂ᵢ − t̄ᵢ‖)` over items with a
/// decomposition; each term is skipped when its part is absent.
pub fn textual_debias_loss(batch: &BatchState, lambda: f64) -> (f64, BatchGrad) {
    let mut grad = BatchGrad::for_batch(batch);
    let count = (0..batch.len())
        .filter(|&i| batch.positives[i].is_some() || batch.reversed[i].is_some())
        .count();
    if count == 0 {
        return (0.0, grad);
    }
    let w = 1.0 / count as f64;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let t = &batch.texts[i];
        if let Some(tp) = &batch.positives[i] {
            let (d, u) = distance_and_unit(t, tp);
            total += lambda * d;
            linalg::axpy(w * lambda, &u, &mut grad.texts[i]);
            linalg::axpy(-w * lambda, &u, &mut grad.positives[i]);
        }
        if let Some(tr) = &batch.reversed[i] {
            let (d, u) = distance_and_unit(t, tr);
            total += 2.0 - d;
            linalg::axpy(-w, &u, &mut grad.texts[i]);
            linalg::axpy(w, &u, &mut grad.reversed[i]);
        }
    }
    (total * w, grad)
}

/// Values of the individual terms and their enabled-sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ent: f64,
    pub l_sr: f64,
    pub l_tri: f64,
    pub total: f64,
    pub flags: LossFlags,
}

/// Sum of the enabled terms and its gradient.
pub fn total_loss(
    batch: &BatchState,
    config: &AdaptationConfig,
    flags: LossFlags,
) -> Result<(LossBreakdown, BatchGrad)> {
    if !flags.any() {
        return Err(NeatError::invalid("at least one loss term must be enabled"));
    }
    let mut grad = BatchGrad::for_batch(batch);
    let mut out = LossBreakdown {
        l_ent: 0.0,
        l_sr: 0.0,
        l_tri: 0.0,
        total: 0.0,
        flags,
    };
    if flags.ent {
        let (v, g) = refined_entropy_loss(batch, config.tau1);
        out.l_ent = v;
        out.total += v;
        grad.add_scaled(&g, 1.0);
    }
    if flags.sr {
        let (v, g) = semantics_reversion_loss(batch, config.tau2);
        out.l_sr = v;
        out.total += v;
        grad.add_scaled(&g, 1.0);
    }
    if flags.tri {
        let (v, g) = textual_debias_loss(batch, config.lambda);
        out.l_tri = v;
        out.total += v;
        grad.add_scaled(&g, 1.0);
    }
    Ok((out, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;

    fn unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..D).map(|_| rng.random_range(-1.0..1.0)).collect();
        linalg::normalized(&v)
    }

    /// Random batch where roughly a quarter of the items have no negation.
    fn random_batch(seed: u64, b: usize) -> BatchState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut texts = vec![];
        let (mut pos, mut neg, mut rev, mut vis) = (vec![], vec![], vec![], vec![]);
        for _ in 0..b {
            texts.push(unit(&mut rng));
            vis.push(unit(&mut rng));
            if rng.random_bool(0.75) {
                pos.push(Some(unit(&mut rng)));
                neg.push(Some(unit(&mut rng)));
                rev.push(Some(unit(&mut rng)));
            } else {
                pos.push(None);
                neg.push(None);
                rev.push(None);
            }
        }
        BatchState::new(texts, pos, neg, rev, vis, &AdaptationConfig::default()).unwrap()
    }

    // Independent oracles

    fn oracle_candidates(b: &BatchState, alpha: f64) -> Vec<usize> {
        let mut out = vec![];
        for i in 0..b.len() {
            let tp = b.positives[i].clone().unwrap_or_else(|| b.texts[i].clone());
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, v) in b.visual.iter().enumerate() {
                let base: f64 = tp.iter().zip(v).map(|(x, y)| x * y).sum();
                let s = match &b.negatives[i] {
                    Some(tn) => {
                        let pen: f64 = tn.iter().zip(v).map(|(x, y)| x * y).sum();
                        base * (1.0 - alpha * if pen > 0.0 { pen } else { 0.0 })
                    }
                    None => base,
                };
                if s > best.0 {
                    best = (s, j);
                }
            }
            out.push(best.1);
        }
        out
    }

    fn oracle_hardest(b: &BatchState) -> Vec<Option<usize>> {
        (0..b.len())
            .map(|i| {
                let tr = b.reversed[i].as_ref()?;
                let own = b.candidates[i];
                let mut set: Vec<usize> =
                    b.candidates.iter().copied().filter(|&c| c != own).collect();
                if set.is_empty() {
                    set = (0..b.len()).filter(|&c| c != own).collect();
                }
                let mut best = (f64::INFINITY, usize::MAX);
                for j in 0..b.len() {
                    if !set.contains(&j) {
                        continue;
                    }
                    let s: f64 = tr.iter().zip(&b.visual[j]).map(|(x, y)| x * y).sum();
                    if s < best.0 {
                        best = (s, j);
                    }
                }
                Some(best.1)
            })
            .collect()
    }

    fn oracle_entropy(anchors: &[&Vec<f64>], texts: &[Vec<f64>], tau: f64) -> f64 {
        let mut total = 0.0;
        for a in anchors {
            let z: Vec<f64> = texts
                .iter()
                .map(|t| t.iter().zip(a.iter()).map(|(x, y)| x * y).sum::<f64>() / tau)
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            total += -e
                .iter()
                .map(|x| x / s)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
        }
        total / anchors.len() as f64
    }

    #[test]
    fn similarity_examples() {
        let tp = [1.0, 0.0];
        let v = [0.8, 0.6];
        let tn = [0.625, 0.0];
        assert!((negation_separated_similarity(&tp, Some(&tn), &v, 1.0) - 0.4).abs() < 1e-12);
        let tn = [-0.375, 0.0];
        assert!((negation_separated_similarity(&tp, Some(&tn), &v, 1.0) - 0.8).abs() < 1e-12);
        assert_eq!(negation_separated_similarity(&tp, None, &v, 1.0), 0.8);
        assert_eq!(
            negation_separated_similarity(&tp, Some(&[0.9, 0.1]), &v, 0.0),
            0.8
        );
    }

    #[test]
    fn selection_matches_brute_force_on_100_batches() {
        for seed in 0..100 {
            let b = random_batch(seed, 2 + (seed as usize % 15));
            assert_eq!(b.candidates, oracle_candidates(&b, 1.0), "seed {seed}");
            assert_eq!(b.hardest, oracle_hardest(&b), "seed {seed}");
            for (i, h) in b.hardest.iter().enumerate() {
                if let Some(h) = h {
                    assert_ne!(*h, b.candidates[i]);
                    assert!(*h < b.len());
                }
            }
        }
    }

    #[test]
    fn alpha_zero_is_nearest_neighbour_on_positive() {
        for seed in 0..20 {
            let b = random_batch(seed, 9);
            let plain: Vec<usize> = (0..b.len())
                .map(|i| {
                    linalg::argmax(
                        &b.visual
                            .iter()
                            .map(|v| linalg::dot(b.query(i), v))
                            .collect::<Vec<_>>(),
                    )
                })
                .collect();
            assert_eq!(select_candidates(&b, 0.0).unwrap(), plain);
        }
    }

    #[test]
    fn single_item_batches_are_rejected() {
        let v = vec![vec![1.0, 0.0]];
        assert!(BatchState::new(
            v.clone(),
            vec![None],
            vec![None],
            vec![None],
            v,
            &AdaptationConfig::default()
        )
        .is_err());
    }

    #[test]
    fn two_item_batch_forces_the_other_column() {
        let e = |x: f64| linalg::normalized(&[x, 1.0]);
        let b = BatchState::new(
            vec![e(1.0), e(-1.0)],
            vec![Some(e(5.0)), Some(e(4.0))],
            vec![Some(e(-5.0)), Some(e(-4.0))],
            vec![Some(e(-5.0)), Some(e(-4.0))],
            vec![e(3.0), e(-3.0)],
            &AdaptationConfig::default(),
        )
        .unwrap();
        assert_eq!(b.candidates, vec![0, 0]);
        assert_eq!(b.hardest, vec![Some(1), Some(1)]);
    }

    #[test]
    fn hardest_rule_can_be_flipped() {
        let b = random_batch(3, 12);
        let max = hardest_negatives(&b, HardestRule::MaxSimilarity).unwrap();
        for i in 0..b.len() {
            if let (Some(lo), Some(hi), Some(tr)) = (b.hardest[i], max[i], &b.reversed[i]) {
                assert!(linalg::dot(tr, &b.visual[lo]) <= linalg::dot(tr, &b.visual[hi]));
            }
        }
    }

    #[test]
    fn entropy_limits_and_oracle() {
        let b = random_batch(1, 8);
        let (h, _) = plain_entropy_loss(&b.texts, &b.visual, 1e9);
        assert!((h - (8f64).ln()).abs() < 1e-6);
        let v = vec![b.texts[2].clone()];
        let (h, _) = plain_entropy_loss(&b.texts, &v, 1e-4);
        assert!(h < 1e-6);
        let anchors: Vec<&Vec<f64>> = b.visual.iter().collect();
        let (h, _) = plain_entropy_loss(&b.texts, &b.visual, 0.1);
        assert!((h - oracle_entropy(&anchors, &b.texts, 0.1)).abs() < 1e-9);
        let anchors: Vec<&Vec<f64>> = b.candidates.iter().map(|&c| &b.visual[c]).collect();
        assert!(
            (refined_entropy_loss(&b, 0.03).0 - oracle_entropy(&anchors, &b.texts, 0.03)).abs()
                < 1e-9
        );
    }

    #[test]
    fn one_way_softmax_has_zero_entropy() {
        let t = vec![linalg::normalized(&[1.0, 2.0])];
        assert_eq!(plain_entropy_loss(&t, &t, 0.03).0, 0.0);
    }

    #[test]
    fn reversion_scales_with_inverse_temperature() {
        let b = random_batch(5, 10);
        let a = semantics_reversion_loss(&b, 0.07).0;
        let c = semantics_reversion_loss(&b, 0.14).0;
        assert!((a - 2.0 * c).abs() < 1e-12);
    }

    #[test]
    fn reversion_is_zero_when_candidate_equals_negative_feature() {
        let mut b = random_batch(6, 4);
        let c = b.candidates[0];
        for h in b.hardest.iter_mut().flatten() {
            *h = c;
        }
        b.candidates = vec![c; 4];
        assert_eq!(semantics_reversion_loss(&b, 0.07).0, 0.0);
    }

    #[test]
    fn reversion_without_any_reversal_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Vec<_> = (0..3).map(|_| unit(&mut rng)).collect();
        let b = BatchState::new(
            t.clone(),
            vec![None; 3],
            vec![None; 3],
            vec![None; 3],
            t,
            &AdaptationConfig::default(),
        )
        .unwrap();
        assert_eq!(semantics_reversion_loss(&b, 0.07).0, 0.0);
        assert_eq!(textual_debias_loss(&b, 5.0).0, 0.0);
    }

    #[test]
    fn debias_by_hand() {
        let x = vec![1.0, 0.0];
        let y = vec![0.0, 1.0];
        let b = BatchState::new(
            vec![x.clone(), x.clone()],
            vec![Some(x.clone()), Some(y.clone())],
            vec![Some(y.clone()), Some(y.clone())],
            vec![Some(vec![-1.0, 0.0]), Some(y.clone())],
            vec![x.clone(), y.clone()],
            &AdaptationConfig::default(),
        )
        .unwrap();
        // item 0: 5·0 + (2 − 2) = 0; item 1: 5·√2 + (2 − √2)
        let expected = (5.0 * 2f64.sqrt() + 2.0 - 2f64.sqrt()) / 2.0;
        assert!((textual_debias_loss(&b, 5.0).0 - expected).abs() < 1e-9);
    }

    #[test]
    fn total_is_sum_of_enabled_terms() {
        let b = random_batch(9, 10);
        let cfg = AdaptationConfig::default();
        let (all, _) = total_loss(&b, &cfg, LossFlags::ALL).unwrap();
        let ent = refined_entropy_loss(&b, cfg.tau1).0;
        let sr = semantics_reversion_loss(&b, cfg.tau2).0;
        let tri = textual_debias_loss(&b, cfg.lambda).0;
        assert_eq!(all.total, ent + sr + tri);
        assert_eq!(
            total_loss(&b, &cfg, LossFlags::ENT_ONLY).unwrap().0.total,
            ent
        );
        assert!(total_loss(&b, &cfg, LossFlags::NONE).is_err());
    }

    #[test]
    fn ablation_grid_has_six_distinct_rows() {
        let mut rows = LossFlags::ABLATION_GRID.to_vec();
        rows.dedup();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0], LossFlags::NONE);
        assert_eq!(rows[5], LossFlags::ALL);
    }

    fn permute<T: Clone>(v: &[T], p: &[usize]) -> Vec<T> {
        p.iter().map(|&i| v[i].clone()).collect()
    }

    proptest! {
        #[test]
        fn losses_are_permutation_invariant(seed in 0u64..1000, rot in 1usize..7) {
            let b = random_batch(seed, 7);
            let p: Vec<usize> = (0..7).map(|i| (i + rot) % 7).collect();
            let q = BatchState::new(
                permute(&b.texts, &p), permute(&b.positives, &p), permute(&b.negatives, &p),
                permute(&b.reversed, &p), permute(&b.visual, &p), &AdaptationConfig::default(),
            ).unwrap();
            // candidate indices are relabelled by the inverse permutation
            let relabel: Vec<usize> = b.candidates.iter().map(|&c| p.iter().position(|&x| x == c).unwrap()).collect();
            prop_assert_eq!(q.candidates.clone(), permute(&relabel, &p));
            let cfg = AdaptationConfig::default();
            let (x, _) = total_loss(&b, &cfg, LossFlags::ALL).unwrap();
            let (y, _) = total_loss(&q, &cfg, LossFlags::ALL).unwrap();
            prop_assert!((x.l_ent - y.l_ent).abs() < 1e-9);
            prop_assert!((x.l_tri - y.l_tri).abs() < 1e-9);
            prop_assert!((x.l_sr - y.l_sr).abs() < 1e-9);
        }

        #[test]
        fn gradients_match_finite_differences_on_embeddings(seed in 0u64..200) {
            let b = random_batch(seed, 6);
            let cfg = AdaptationConfig { tau1: 0.5, ..AdaptationConfig::default() };
            let (_, g) = total_loss(&b, &cfg, LossFlags::ALL).unwrap();
            let f = |b: &BatchState| total_loss(b, &cfg, LossFlags::ALL).unwrap().0.total;
            let h = 1e-6;
            for i in 0..b.len() {
                for k in 0..D {
                    let mut plus = b.clone();
                    let mut minus = b.clone();
                    plus.texts[i][k] += h;
                    minus.texts[i][k] -= h;
                    let num = (f(&plus) - f(&minus)) / (2.0 * h);
                    prop_assert!((num - g.texts[i][k]).abs() < 1e-5 * (1.0 + num.abs()));
                    if let Some(r) = plus.reversed[i].as_mut() {
                        r[k] += h;
                        minus.reversed[i].as_mut().unwrap()[k] -= h;
                        minus.texts[i][k] += h;
                        plus.texts[i][k] -= h;
                        let num = (f(&plus) - f(&minus)) / (2.0 * h);
                        prop_assert!((num - g.reversed[i][k]).abs() < 1e-5 * (1.0 + num.abs()));
                    }
                }
            }
        }
    }
}
