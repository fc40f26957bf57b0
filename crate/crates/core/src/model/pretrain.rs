//! Contrastive pretraining of the text encoder against frozen scene features.

use super::checkpoint::{Checkpoint, TrainingMeta};
use super::encoder::{GradMode, TextEncoder};
use super::optim::{AdamW, AdamWConfig};
use super::params::Architecture;
use crate::linalg;
use crate::world::{DatasetBundle, SplitKind, World};
use crate::{NeatError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 400,
            batch_size: 64,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Symmetric InfoNCE over a batch of paired text and image embeddings.
///
/// Returns the loss, its gradient with respect to each text embedding and
/// its derivative with respect to the log logit scale.
pub fn symmetric_info_nce(
    texts: &[Vec<f64>],
    images: &[Vec<f64>],
    log_scale: f64,
) -> (f64, Vec<Vec<f64>>, f64) {
    let b = texts.len();
    let clamped = log_scale.min(MAX_LOGIT_SCALE.ln());
    let s = clamped.exp();
    let sims: Vec<Vec<f64>> = texts
        .iter()
        .map(|t| images.iter().map(|v| linalg::dot(t, v)).collect())
        .collect();
    let mut g = vec![vec![0.0; b]; b];
    let mut loss = 0.0;
    let mut p = vec![0.0; b];
    // text -> image
    for i in 0..b {
        let logits: Vec<f64> = sims[i].iter().map(|x| s * x).collect();
        linalg::softmax(&logits, &mut p);
        loss -= p[i].ln();
        for j in 0..b {
            g[i][j] += 0.5 * (p[j] - if i == j { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    // image -> text
    for j in 0..b {
        let logits: Vec<f64> = (0..b).map(|i| s * sims[i][j]).collect();
        linalg::softmax(&logits, &mut p);
        loss -= p[j].ln();
        for i in 0..b {
            g[i][j] += 0.5 * (p[i] - if i == j { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    loss *= 0.5 / b as f64;
    let mut d_texts = vec![vec![0.0; texts[0].len()]; b];
    let mut d_log_scale = 0.0;
    for i in 0..b {
        for j in 0..b {
            linalg::axpy(s * g[i][j], &images[j], &mut d_texts[i]);
            d_log_scale += g[i][j] * s * sims[i][j];
        }
    }
    if log_scale > MAX_LOGIT_SCALE.ln() {
        d_log_scale = 0.0;
    }
    (loss, d_texts, d_log_scale)
}

/// Trains every text-encoder parameter on an affirmative bundle.
/// Returns the checkpoint and the per-step loss curve.
pub fn pretrain_dual_encoder(
    world: &World,
    bundle: &DatasetBundle,
    arch: Architecture,
    config: &PretrainConfig,
) -> Result<(Checkpoint, Vec<f64>)> {
    if bundle.split != SplitKind::PretrainAffirmative {
        return Err(NeatError::invalid(format!(
            "pretraining needs an affirmative bundle, got {:?}",
            bundle.split
        )));
    }
    if arch.embed_dim != world.dim {
        return Err(NeatError::DimensionMismatch {
            expected: world.dim,
            found: arch.embed_dim,
        });
    }
    if config.batch_size < 2 || bundle.captions.len() < config.batch_size {
        return Err(NeatError::invalid(
            "pretraining batch must hold at least 2 items and fit in the bundle",
        ));
    }
    let mut encoder = TextEncoder::new(arch, config.seed)?;
    let seqs: Vec<_> = bundle
        .captions
        .iter()
        .map(|c| encoder.tokenize(&c.quad.caption))
        .collect();
    let images: Vec<&[f64]> = bundle
        .captions
        .iter()
        .map(|c| bundle.scene(c.scene_id).map(|s| s.feature.as_slice()))
        .collect::<Option<_>>()
        .ok_or_else(|| NeatError::Validation("caption without scene".into()))?;

    let all: Vec<usize> = (0..encoder.params.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        all,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5_eed0_fa11);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    let ls_index = encoder.layout().logit_scale.start;
    for step in 0..config.steps {
        if order.len() < config.batch_size {
            let mut fresh: Vec<usize> = (0..seqs.len()).collect();
            fresh.shuffle(&mut rng);
            order = fresh;
        }
        let idx: Vec<usize> = order.drain(..config.batch_size).collect();
        let batch_seqs: Vec<_> = idx.iter().map(|&i| seqs[i].clone()).collect();
        let batch_imgs: Vec<Vec<f64>> = idx.iter().map(|&i| images[i].to_vec()).collect();
        let log_scale = encoder.logit_scale();
        let mut d_log_scale = 0.0;
        let (loss, mut grad) = encoder
            .value_and_grad(&batch_seqs, GradMode::Full, |t| {
                let (l, dt, dls) = symmetric_info_nce(t, &batch_imgs, log_scale);
                d_log_scale = dls;
                Ok((l, dt))
            })
            .map_err(|e| match e {
                NeatError::NonFinite(m) => {
                    NeatError::NonFinite(format!("pretraining diverged at step {step}: {m}"))
                }
                other => other,
            })?;
        grad[ls_index] += d_log_scale;
        opt.step(&mut encoder.params.values, &grad);
        losses.push(loss);
        if step % 100 == 0 {
            log::debug!("pretrain step {step} loss {loss:.4}");
        }
    }
    let tail = losses[losses.len().saturating_sub(10)..].to_vec();
    let meta = TrainingMeta {
        seed: config.seed,
        steps: config.steps,
        loss_tail: tail,
        note: "pretrained".into(),
    };
    Ok((Checkpoint::new(encoder, meta), losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        linalg::normalized(&v)
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let texts: Vec<_> = (0..5).map(|_| unit(&mut rng, 8)).collect();
        let images: Vec<_> = (0..5).map(|_| unit(&mut rng, 8)).collect();
        let ls = 1.3;
        let (_, dt, dls) = symmetric_info_nce(&texts, &images, ls);
        let h = 1e-6;
        for i in 0..5 {
            for c in 0..8 {
                let mut p = texts.clone();
                p[i][c] += h;
                let mut m = texts.clone();
                m[i][c] -= h;
                let num = (symmetric_info_nce(&p, &images, ls).0
                    - symmetric_info_nce(&m, &images, ls).0)
                    / (2.0 * h);
                assert!((num - dt[i][c]).abs() < 1e-7, "{num} vs {}", dt[i][c]);
            }
        }
        let num = (symmetric_info_nce(&texts, &images, ls + h).0
            - symmetric_info_nce(&texts, &images, ls - h).0)
            / (2.0 * h);
        assert!((num - dls).abs() < 1e-7);
    }

    #[test]
    fn rejects_non_affirmative_bundle() {
        let w = crate::world::generate_world(12, 32, 1).unwrap();
        let b = crate::world::build_split(&w, SplitKind::RetrievalNeg, 64, 1).unwrap();
        assert!(
            pretrain_dual_encoder(&w, &b, Architecture::default(), &PretrainConfig::default())
                .is_err()
        );
    }
}
