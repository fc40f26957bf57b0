//! Browser bindings for a pocket-sized version of the pipeline.
//!
//! [`Demo`] pretrains a tiny text encoder on a seeded world when it is
//! constructed, then exposes three operations to the page: decomposing a
//! caption, ranking a scene gallery with plain and negation-separated
//! similarity, and adapting the layer norms on negated captions.

use neat_core::adaptation::{
    adapt, negation_separated_similarity, prepare_items, AdaptMode, AdaptationConfig,
};
use neat_core::evaluation::{retrieval_eval, template_cls_eval};
use neat_core::language::{decompose, RuleDecomposer};
use neat_core::linalg;
use neat_core::model::{pretrain_dual_encoder, Architecture, Checkpoint, PretrainConfig};
use neat_core::world::{build_split, generate_world, DatasetBundle, SplitKind, World};
use neat_core::{NeatError, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const CONCEPTS: usize = 12;
const DIM: usize = 32;
const PRETRAIN_SCENES: usize = 300;
const PRETRAIN_STEPS: usize = 150;
const GALLERY: usize = 48;
const TOP: usize = 5;

#[derive(Serialize)]
struct Parts {
    positive: String,
    negative: String,
    reversed: String,
    source: String,
}

#[derive(Serialize)]
struct Ranked {
    scene_id: u64,
    concepts: Vec<String>,
    score: f64,
}

#[derive(Serialize)]
struct Ranking {
    negation: Option<String>,
    plain: Vec<Ranked>,
    separated: Vec<Ranked>,
}

#[derive(Serialize)]
struct Metrics {
    rsum: f64,
    rev_error: f64,
}

#[derive(Serialize)]
struct AdaptReport {
    steps: usize,
    first_loss: f64,
    last_loss: f64,
    before: Metrics,
    after: Metrics,
}

fn js(e: NeatError) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(value)?)
}

/// Splits a caption into positive, negative and reversed parts (JSON).
pub fn decompose_json(caption: &str) -> Result<String> {
    let d = decompose(caption)?;
    to_json(&Parts {
        positive: d.positive_part,
        negative: d.negative_part,
        reversed: d.reversed,
        source: format!("{:?}", d.source),
    })
}

#[wasm_bindgen(js_name = decompose)]
pub fn decompose_caption(caption: &str) -> std::result::Result<String, JsError> {
    decompose_json(caption).map_err(js)
}

#[wasm_bindgen]
pub struct Demo {
    world: World,
    frozen: Checkpoint,
    current: Checkpoint,
    gallery: DatasetBundle,
    rev: DatasetBundle,
}

impl Demo {
    pub fn build(seed: u64) -> Result<Demo> {
        let world = generate_world(CONCEPTS, DIM, seed)?;
        let pre = build_split(
            &world,
            SplitKind::PretrainAffirmative,
            PRETRAIN_SCENES,
            seed ^ 1,
        )?;
        let arch = Architecture {
            embed_dim: DIM,
            ..Architecture::default()
        };
        let cfg = PretrainConfig {
            steps: PRETRAIN_STEPS,
            batch_size: 32,
            seed,
            ..PretrainConfig::default()
        };
        let (frozen, _) = pretrain_dual_encoder(&world, &pre, arch, &cfg)?;
        Ok(Demo {
            gallery: build_split(&world, SplitKind::RetrievalNeg, GALLERY, seed ^ 2)?,
            rev: build_split(&world, SplitKind::ClsRevNeg, 96, seed ^ 3)?,
            current: frozen.clone(),
            frozen,
            world,
        })
    }

    fn names(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&c| self.world.name(c).to_string())
            .collect()
    }

    pub fn rank_json(&self, caption: &str, alpha: f64) -> Result<String> {
        let enc = &self.current.encoder;
        let t = enc.encode_text(caption)?;
        let split = match decompose(caption) {
            Ok(d) => Some((
                enc.encode_text(&d.positive_part)?,
                enc.encode_text(&d.negative_part)?,
                d.negative_part,
            )),
            Err(NeatError::NoNegationFound(_)) => None,
            Err(e) => return Err(e),
        };
        let top = |score: &dyn Fn(&[f64]) -> f64| {
            let mut all: Vec<Ranked> = self
                .gallery
                .scenes
                .iter()
                .map(|s| Ranked {
                    scene_id: s.scene_id,
                    concepts: self.names(&s.present),
                    score: score(&s.feature),
                })
                .collect();
            all.sort_by(|a, b| b.score.total_cmp(&a.score));
            all.truncate(TOP);
            all
        };
        let plain = top(&|v| linalg::dot(&t, v));
        let separated = match &split {
            Some((tp, tn, _)) => top(&|v| negation_separated_similarity(tp, Some(tn), v, alpha)),
            None => top(&|v| linalg::dot(&t, v)),
        };
        to_json(&Ranking {
            negation: split.map(|s| s.2),
            plain,
            separated,
        })
    }

    fn metrics(&self, ck: &Checkpoint) -> Result<Metrics> {
        Ok(Metrics {
            rsum: retrieval_eval(&ck.encoder, &self.gallery)?.rsum,
            rev_error: template_cls_eval(&ck.encoder, &self.rev)?.top1_error_rate,
        })
    }

    pub fn adapt_json(&mut self, epochs: usize, learning_rate: f64) -> Result<String> {
        let items = prepare_items(&self.current.encoder, &self.gallery, &RuleDecomposer)?;
        let config = AdaptationConfig {
            mode: AdaptMode::Offline,
            offline_epochs: epochs,
            learning_rate,
            batch_size: 16,
            ..AdaptationConfig::image()
        };
        config.validate()?;
        let before = self.metrics(&self.current)?;
        let out = adapt(&self.current, &items, &config)?;
        let after = self.metrics(&out.checkpoint)?;
        self.current = out.checkpoint;
        to_json(&AdaptReport {
            steps: out.steps.len(),
            first_loss: out.steps.first().map_or(f64::NAN, |s| s.loss.total),
            last_loss: out.steps.last().map_or(f64::NAN, |s| s.loss.total),
            before,
            after,
        })
    }
}

#[wasm_bindgen]
impl Demo {
    /// Generates a world and pretrains the encoder; takes a few seconds.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsError> {
        Demo::build(seed as u64).map_err(js)
    }

    /// Concept names, as a JSON array.
    pub fn concepts(&self) -> String {
        let ids: Vec<usize> = (0..self.world.num_concepts()).collect();
        serde_json::to_string(&self.names(&ids)).unwrap_or_default()
    }

    /// Top scenes for `caption` under plain and negation-separated similarity.
    pub fn rank(&self, caption: &str, alpha: f64) -> std::result::Result<String, JsError> {
        self.rank_json(caption, alpha).map_err(js)
    }

    /// Runs offline adaptation on the gallery captions, keeping the result.
    pub fn adapt(
        &mut self,
        epochs: u32,
        learning_rate: f64,
    ) -> std::result::Result<String, JsError> {
        self.adapt_json(epochs as usize, learning_rate).map_err(js)
    }

    /// Restores the pretrained layer norms.
    pub fn reset(&mut self) {
        self.current = self.frozen.clone();
    }
}
