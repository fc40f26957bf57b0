use super::losses::{total_loss, BatchState, LossBreakdown};
use super::{AdaptMode, AdaptationConfig, LossFlags};
use crate::language::Decomposer;
use crate::model::{
    AdamW, AdamWConfig, Checkpoint, GradMode, LnParameterSet, TextEncoder, TokenSequence,
};
use crate::world::DatasetBundle;
use crate::{NeatError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// One caption ready for adaptation: its tokens, the tokens of its
/// positive, negative and reversed parts (absent for affirmative captions)
/// and the paired scene feature.
#[derive(Debug, Clone)]
pub struct AdaptItem {
    pub caption: TokenSequence,
    pub parts: Option<[TokenSequence; 3]>,
    pub visual: Vec<f64>,
}

/// Decomposes every caption of `bundle` and pairs it with its scene.
pub fn prepare_items(
    encoder: &TextEncoder,
    bundle: &DatasetBundle,
    decomposer: &dyn Decomposer,
) -> Result<Vec<AdaptItem>> {
    bundle
        .captions
        .iter()
        .map(|rec| {
            let scene = bundle.scene(rec.scene_id).ok_or_else(|| {
                NeatError::Validation(format!("caption {} has no scene", rec.caption_id))
            })?;
            let parts = match decomposer.decompose(&rec.quad.caption) {
                Ok(d) => Some(
                    [d.positive_part, d.negative_part, d.reversed].map(|t| encoder.tokenize(&t)),
                ),
                Err(NeatError::NoNegationFound(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(AdaptItem {
                caption: encoder.tokenize(&rec.quad.caption),
                parts,
                visual: scene.feature.clone(),
            })
        })
        .collect()
}

/// Splits `0..n` into consecutive batches of `batch_size` (clamped to `n`).
/// A trailing single item is merged into the previous batch.
pub fn batch_ranges(n: usize, batch_size: usize) -> Result<Vec<Range<usize>>> {
    if n < 2 {
        return Err(NeatError::invalid("adaptation needs at least 2 captions"));
    }
    let size = batch_size.clamp(2, n);
    let mut out: Vec<Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch_id: usize,
    pub loss: LossBreakdown,
    /// Selected candidates as caption indices into the bundle.
    pub candidates: Vec<usize>,
}

/// Online predictions for one batch, made right after its update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPrediction {
    pub batch_id: usize,
    pub items: Vec<usize>,
    pub text_embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
    /// Empty for offline runs.
    pub predictions: Vec<BatchPrediction>,
}

impl AdaptOutcome {
    /// Caption embeddings in bundle order as logged by an online run.
    pub fn online_embeddings(&self, n: usize) -> Option<Vec<Vec<f64>>> {
        let mut out = vec![None; n];
        for p in &self.predictions {
            for (&i, e) in p.items.iter().zip(&p.text_embeddings) {
                *out.get_mut(i)? = Some(e.clone());
            }
        }
        out.into_iter().collect()
    }
}

/// Where each item's sequences sit in the flattened encoder batch.
struct Slots {
    part: Vec<Option<usize>>,
    num_parts: usize,
}

fn flatten(items: &[&AdaptItem]) -> (Vec<TokenSequence>, Slots) {
    let b = items.len();
    let mut seqs: Vec<TokenSequence> = items.iter().map(|it| it.caption.clone()).collect();
    let mut part = Vec::with_capacity(b);
    let mut k = 0;
    for it in items {
        part.push(it.parts.as_ref().map(|_| {
            k += 1;
            k - 1
        }));
    }
    for which in 0..3 {
        seqs.extend(
            items
                .iter()
                .filter_map(|it| it.parts.as_ref().map(|p| p[which].clone())),
        );
    }
    (seqs, Slots { part, num_parts: k })
}

/// Batch-local indices chosen during a loss evaluation.
struct Selection {
    candidates: Vec<usize>,
    #[cfg(test)]
    hardest: Vec<Option<usize>>,
}

/// One loss evaluation and LN gradient on a batch.
fn batch_gradient(
    encoder: &TextEncoder,
    items: &[&AdaptItem],
    config: &AdaptationConfig,
    flags: LossFlags,
) -> Result<(LossBreakdown, Vec<f64>, Selection)> {
    let b = items.len();
    let (seqs, slots) = flatten(items);
    let visual: Vec<Vec<f64>> = items.iter().map(|it| it.visual.clone()).collect();
    let mut record = None;
    let (_, grad) = encoder.value_and_grad(&seqs, GradMode::LnOnly, |emb| {
        let m = slots.num_parts;
        let at = |which: usize, i: usize| slots.part[i].map(|k| emb[b + which * m + k].clone());
        let batch = BatchState::new(
            emb[..b].to_vec(),
            (0..b).map(|i| at(0, i)).collect(),
            (0..b).map(|i| at(1, i)).collect(),
            (0..b).map(|i| at(2, i)).collect(),
            visual,
            config,
        )?;
        let (breakdown, g) = total_loss(&batch, config, flags)?;
        let d = emb[0].len();
        let mut d_emb = g.texts;
        d_emb.resize(b + 3 * m, vec![0.0; d]);
        for i in 0..b {
            if let Some(k) = slots.part[i] {
                d_emb[b + k] = g.positives[i].clone();
                d_emb[b + 2 * m + k] = g.reversed[i].clone();
            }
        }
        record = Some((
            breakdown,
            Selection {
                candidates: batch.candidates,
                #[cfg(test)]
                hardest: batch.hardest,
            },
        ));
        Ok((breakdown.total, d_emb))
    })?;
    let (breakdown, selection) = record.expect("loss closure ran");
    Ok((breakdown, grad, selection))
}

/// Loss breakdown and its exact gradient with respect to every layer-norm
/// gain and bias, for one batch. Candidates and hardest negatives are
/// selected from the current embeddings, as in an adaptation step.
pub fn batch_loss_and_gradient(
    encoder: &TextEncoder,
    items: &[&AdaptItem],
    config: &AdaptationConfig,
    flags: LossFlags,
) -> Result<(LossBreakdown, LnParameterSet)> {
    let (breakdown, grad, _) = batch_gradient(encoder, items, config, flags)?;
    Ok((breakdown, LnParameterSet::gather(&encoder.params, &grad)))
}

struct Runner<'a> {
    encoder: TextEncoder,
    optimizer: AdamW,
    config: &'a AdaptationConfig,
    items: &'a [AdaptItem],
    steps: Vec<StepRecord>,
}

impl<'a> Runner<'a> {
    fn new(
        checkpoint: &Checkpoint,
        items: &'a [AdaptItem],
        config: &'a AdaptationConfig,
    ) -> Result<Self> {
        config.validate()?;
        if !config.losses.any() {
            return Err(NeatError::invalid("at least one loss term must be enabled"));
        }
        let encoder = checkpoint.encoder.clone();
        let optimizer = AdamW::new(
            AdamWConfig {
                learning_rate: config.learning_rate,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            encoder.params.ln_indices(),
        );
        Ok(Runner {
            encoder,
            optimizer,
            config,
            items,
            steps: Vec::new(),
        })
    }

    fn step(&mut self, epoch: usize, batch_id: usize, idx: &[usize]) -> Result<()> {
        let batch: Vec<&AdaptItem> = idx.iter().map(|&i| &self.items[i]).collect();
        let (loss, grad, sel) =
            batch_gradient(&self.encoder, &batch, self.config, self.config.losses).map_err(
                |e| match e {
                    NeatError::NonFinite(m) => {
                        NeatError::NonFinite(format!("batch {batch_id} (epoch {epoch}): {m}"))
                    }
                    other => other,
                },
            )?;
        self.optimizer.step(&mut self.encoder.params.values, &grad);
        if let Some(t) = self.encoder.params.first_non_finite() {
            return Err(NeatError::NonFinite(format!(
                "batch {batch_id} (epoch {epoch}): tensor {}",
                t.name
            )));
        }
        log::debug!("epoch {epoch} batch {batch_id} loss {:.5}", loss.total);
        self.steps.push(StepRecord {
            epoch,
            batch_id,
            loss,
            candidates: sel.candidates.iter().map(|&c| idx[c]).collect(),
        });
        Ok(())
    }

    fn finish(self, checkpoint: &Checkpoint, predictions: Vec<BatchPrediction>) -> AdaptOutcome {
        AdaptOutcome {
            checkpoint: Checkpoint::new(self.encoder, checkpoint.meta.clone()),
            steps: self.steps,
            predictions,
        }
    }
}

/// Update-then-predict over batches in bundle order.
pub fn adapt_online(
    checkpoint: &Checkpoint,
    items: &[AdaptItem],
    config: &AdaptationConfig,
) -> Result<AdaptOutcome> {
    let mut run = Runner::new(checkpoint, items, config)?;
    let mut predictions = Vec::new();
    for (batch_id, range) in batch_ranges(items.len(), config.batch_size)?
        .into_iter()
        .enumerate()
    {
        let idx: Vec<usize> = range.collect();
        run.step(0, batch_id, &idx)?;
        let seqs: Vec<TokenSequence> = idx.iter().map(|&i| items[i].caption.clone()).collect();
        let text_embeddings = run.encoder.encode_batch(&seqs)?;
        predictions.push(BatchPrediction {
            batch_id,
            items: idx,
            text_embeddings,
        });
    }
    Ok(run.finish(checkpoint, predictions))
}

/// Several epochs of updates over shuffled batches; nothing is predicted
/// until all updates are done.
pub fn adapt_offline(
    checkpoint: &Checkpoint,
    items: &[AdaptItem],
    config: &AdaptationConfig,
) -> Result<AdaptOutcome> {
    let mut run = Runner::new(checkpoint, items, config)?;
    let ranges = batch_ranges(items.len(), config.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for epoch in 0..config.offline_epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        for (batch_id, range) in ranges.iter().enumerate() {
            run.step(epoch, batch_id, &order[range.clone()])?;
        }
    }
    Ok(run.finish(checkpoint, Vec::new()))
}

pub fn adapt(
    checkpoint: &Checkpoint,
    items: &[AdaptItem],
    config: &AdaptationConfig,
) -> Result<AdaptOutcome> {
    match config.mode {
        AdaptMode::Online => adapt_online(checkpoint, items, config),
        AdaptMode::Offline => adapt_offline(checkpoint, items, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::RuleDecomposer;
    use crate::linalg;
    use crate::model::{Architecture, TrainingMeta};
    use crate::world::{build_split, generate_world, SplitKind};
    use rand::Rng;

    fn batch_loss(
        encoder: &TextEncoder,
        items: &[&AdaptItem],
        config: &AdaptationConfig,
        flags: LossFlags,
    ) -> f64 {
        batch_gradient(encoder, items, config, flags)
            .unwrap()
            .0
            .total
    }

    fn setup(n: usize) -> (Checkpoint, Vec<AdaptItem>) {
        let world = generate_world(8, 32, 1).unwrap();
        let bundle = build_split(&world, SplitKind::RetrievalNeg, n, 2).unwrap();
        let enc = TextEncoder::new(Architecture::default(), 4).unwrap();
        let items = prepare_items(&enc, &bundle, &RuleDecomposer).unwrap();
        (Checkpoint::new(enc, TrainingMeta::default()), items)
    }

    #[test]
    fn batching() {
        assert_eq!(batch_ranges(10, 4).unwrap(), vec![0..4, 4..8, 8..10]);
        assert_eq!(batch_ranges(9, 4).unwrap(), vec![0..4, 4..9]);
        assert_eq!(batch_ranges(5, 256).unwrap(), vec![0..5]);
        assert!(batch_ranges(1, 4).is_err());
    }

    /// Analytic LN gradients of each loss and their sum against central
    /// differences through the whole encoder.
    #[test]
    fn ln_gradients_match_finite_differences() {
        let (ck, items) = setup(40);
        let cfg = AdaptationConfig {
            tau1: 0.3,
            ..AdaptationConfig::default()
        };
        let ln = ck.encoder.params.ln_indices();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let flag_sets = [
            LossFlags::ENT_ONLY,
            LossFlags {
                ent: false,
                sr: true,
                tri: false,
            },
            LossFlags {
                ent: false,
                sr: false,
                tri: true,
            },
            LossFlags::ALL,
        ];
        for batch_no in 0..5 {
            let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..items.len())).collect();
            let batch: Vec<&AdaptItem> = idx.iter().map(|&i| &items[i]).collect();
            for flags in flag_sets {
                let (_, grad, _) = batch_gradient(&ck.encoder, &batch, &cfg, flags).unwrap();
                for _ in 0..20 {
                    let p = ln[rng.random_range(0..ln.len())];
                    let h = 1e-5;
                    let mut enc = ck.encoder.clone();
                    enc.params.values[p] += h;
                    let up = batch_loss(&enc, &batch, &cfg, flags);
                    enc.params.values[p] -= 2.0 * h;
                    let down = batch_loss(&enc, &batch, &cfg, flags);
                    let num = (up - down) / (2.0 * h);
                    let err = (num - grad[p]).abs() / num.abs().max(grad[p].abs()).max(1e-6);
                    assert!(
                        err <= 1e-4,
                        "batch {batch_no} {flags:?} coord {p}: fd {num} vs {}",
                        grad[p]
                    );
                }
            }
        }
    }

    #[test]
    fn only_layer_norms_change() {
        let (ck, items) = setup(24);
        let cfg = AdaptationConfig {
            batch_size: 8,
            offline_epochs: 2,
            ..AdaptationConfig::default()
        };
        let out = adapt_offline(&ck, &items, &cfg).unwrap();
        let ln: std::collections::HashSet<usize> =
            ck.encoder.params.ln_indices().into_iter().collect();
        let before = &ck.encoder.params.values;
        let after = &out.checkpoint.encoder.params.values;
        let mut ln_changed = false;
        for (i, (a, b)) in before.iter().zip(after).enumerate() {
            if ln.contains(&i) {
                ln_changed |= a != b;
            } else {
                assert_eq!(a.to_bits(), b.to_bits(), "parameter {i} moved");
            }
        }
        assert!(ln_changed);
        assert_eq!(out.steps.len(), 2 * 3);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (ck, items) = setup(20);
        let cfg = AdaptationConfig {
            batch_size: 8,
            learning_rate: 0.0,
            mode: AdaptMode::Online,
            ..AdaptationConfig::default()
        };
        let out = adapt(&ck, &items, &cfg).unwrap();
        assert_eq!(out.checkpoint.to_bytes().unwrap(), ck.to_bytes().unwrap());
        let frozen: Vec<TokenSequence> = items.iter().map(|i| i.caption.clone()).collect();
        assert_eq!(
            out.online_embeddings(items.len()).unwrap(),
            ck.encoder.encode_batch(&frozen).unwrap()
        );
    }

    #[test]
    fn zero_epochs_is_identity_and_runs_are_deterministic() {
        let (ck, items) = setup(20);
        let cfg = AdaptationConfig {
            batch_size: 8,
            offline_epochs: 0,
            ..AdaptationConfig::default()
        };
        assert_eq!(
            adapt_offline(&ck, &items, &cfg).unwrap().checkpoint.hash(),
            ck.hash()
        );
        let cfg = AdaptationConfig {
            offline_epochs: 2,
            ..cfg
        };
        let a = adapt_offline(&ck, &items, &cfg).unwrap();
        let b = adapt_offline(&ck, &items, &cfg).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.checkpoint.hash(), b.checkpoint.hash());
    }

    #[test]
    fn online_loss_is_finite_and_logs_every_item() {
        let (ck, items) = setup(30);
        let cfg = AdaptationConfig {
            batch_size: 8,
            mode: AdaptMode::Online,
            ..AdaptationConfig::default()
        };
        let out = adapt(&ck, &items, &cfg).unwrap();
        assert!(out.steps.iter().all(|s| s.loss.total.is_finite()));
        let ids: Vec<usize> = out.predictions.iter().map(|p| p.batch_id).collect();
        assert_eq!(ids, (0..ids.len()).collect::<Vec<_>>());
        assert!(out.online_embeddings(items.len()).is_some());
    }

    #[test]
    fn reversion_step_moves_reversed_captions_the_right_way() {
        let (ck, items) = setup(40);
        let batch: Vec<&AdaptItem> = items
            .iter()
            .filter(|it| it.parts.is_some())
            .take(16)
            .collect();
        let flags = LossFlags {
            ent: false,
            sr: true,
            tri: false,
        };
        let cfg = AdaptationConfig::default();
        let (_, grad, sel) = batch_gradient(&ck.encoder, &batch, &cfg, flags).unwrap();
        let visual: Vec<Vec<f64>> = batch.iter().map(|it| it.visual.clone()).collect();
        // selection is held fixed; only the reversed embeddings move
        let sums = |enc: &TextEncoder| {
            let rev: Vec<TokenSequence> = batch
                .iter()
                .map(|it| it.parts.as_ref().unwrap()[2].clone())
                .collect();
            let e = enc.encode_batch(&rev).unwrap();
            let pos: f64 = (0..batch.len())
                .map(|i| linalg::dot(&e[i], &visual[sel.candidates[i]]))
                .sum();
            let neg: f64 = (0..batch.len())
                .map(|i| linalg::dot(&e[i], &visual[sel.hardest[i].unwrap()]))
                .sum();
            (pos, neg)
        };
        let mut enc = ck.encoder.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), enc.params.ln_indices());
        opt.step(&mut enc.params.values, &grad);
        let (pos0, neg0) = sums(&ck.encoder);
        let (pos1, neg1) = sums(&enc);
        assert!(pos1 < pos0, "{pos0} -> {pos1}");
        assert!(neg1 >= neg0, "{neg0} -> {neg1}");
    }

    #[test]
    fn affirmative_captions_join_only_the_entropy_term() {
        let (ck, mut items) = setup(12);
        assert!(items.iter().all(|i| i.parts.is_some()));
        let world = generate_world(8, 32, 1).unwrap();
        let aff = build_split(&world, SplitKind::PretrainAffirmative, 12, 3).unwrap();
        let aff_items = prepare_items(&ck.encoder, &aff, &RuleDecomposer).unwrap();
        assert!(aff_items.iter().all(|i| i.parts.is_none()));
        items.extend(aff_items);
        let cfg = AdaptationConfig {
            batch_size: 24,
            ..AdaptationConfig::default()
        };
        let out = adapt_offline(&ck, &items, &cfg).unwrap();
        assert!(out.steps.iter().all(|s| s.loss.total.is_finite()));
    }
}
