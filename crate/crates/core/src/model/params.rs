use super::tokenizer::Tokenizer;
use crate::{NeatError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Shape of the text encoder. Immutable once a model exists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub embed_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        let max_len = 16;
        Architecture {
            vocab_size: Tokenizer::new(max_len).vocab_size(),
            max_len,
            d_model: 64,
            heads: 4,
            blocks: 2,
            ffn_dim: 128,
            embed_dim: 32,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(NeatError::invalid(
                "d_model must be a positive multiple of heads",
            ));
        }
        if self.blocks == 0 || self.embed_dim == 0 || self.ffn_dim == 0 || self.max_len < 2 {
            return Err(NeatError::invalid("degenerate architecture"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// Gain or bias of a layer norm: the only tensors adaptation may touch.
    pub is_ln: bool,
}

impl TensorInfo {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub ln_attn_gain: Range<usize>,
    pub ln_attn_bias: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln_ffn_gain: Range<usize>,
    pub ln_ffn_bias: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tok: Range<usize>,
    pub pos: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub ln_final_gain: Range<usize>,
    pub ln_final_bias: Range<usize>,
    pub proj: Range<usize>,
    pub logit_scale: Range<usize>,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    offset: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], is_ln: bool) -> Range<usize> {
        let len = shape.iter().product();
        let info = TensorInfo {
            name,
            shape: shape.to_vec(),
            offset: self.offset,
            len,
            is_ln,
        };
        self.offset += len;
        let r = info.range();
        self.tensors.push(info);
        r
    }
}

impl Layout {
    pub fn new(arch: &Architecture) -> (Layout, Vec<TensorInfo>) {
        let d = arch.d_model;
        let f = arch.ffn_dim;
        let mut b = Builder {
            tensors: Vec::new(),
            offset: 0,
        };
        let tok = b.add("token_embedding".into(), &[arch.vocab_size, d], false);
        let pos = b.add("position_embedding".into(), &[arch.max_len, d], false);
        let mut blocks = Vec::with_capacity(arch.blocks);
        for i in 0..arch.blocks {
            let p = |s: &str| format!("block{i}.{s}");
            blocks.push(BlockLayout {
                ln_attn_gain: b.add(p("pre_attention.gain"), &[d], true),
                ln_attn_bias: b.add(p("pre_attention.bias"), &[d], true),
                wq: b.add(p("attn.wq"), &[d, d], false),
                bq: b.add(p("attn.bq"), &[d], false),
                wk: b.add(p("attn.wk"), &[d, d], false),
                bk: b.add(p("attn.bk"), &[d], false),
                wv: b.add(p("attn.wv"), &[d, d], false),
                bv: b.add(p("attn.bv"), &[d], false),
                wo: b.add(p("attn.wo"), &[d, d], false),
                bo: b.add(p("attn.bo"), &[d], false),
                ln_ffn_gain: b.add(p("pre_ffn.gain"), &[d], true),
                ln_ffn_bias: b.add(p("pre_ffn.bias"), &[d], true),
                w1: b.add(p("ffn.w1"), &[d, f], false),
                b1: b.add(p("ffn.b1"), &[f], false),
                w2: b.add(p("ffn.w2"), &[f, d], false),
                b2: b.add(p("ffn.b2"), &[d], false),
            });
        }
        let ln_final_gain = b.add("final.gain".into(), &[d], true);
        let ln_final_bias = b.add("final.bias".into(), &[d], true);
        let proj = b.add("projection".into(), &[d, arch.embed_dim], false);
        let logit_scale = b.add("logit_scale".into(), &[1], false);
        let layout = Layout {
            tok,
            pos,
            blocks,
            ln_final_gain,
            ln_final_bias,
            proj,
            logit_scale,
        };
        (layout, b.tensors)
    }
}

/// Flat parameter vector plus the table describing it.
///
/// Values are kept `f32`-representable so that checkpoints (stored as `f32`)
/// reproduce the in-memory model exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    pub tensors: Vec<TensorInfo>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ln_tensors(&self) -> impl Iterator<Item = &TensorInfo> {
        self.tensors.iter().filter(|t| t.is_ln)
    }

    /// Indices of every layer-norm coordinate, in declaration order.
    pub fn ln_indices(&self) -> Vec<usize> {
        self.ln_tensors().flat_map(|t| t.range()).collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn round_to_f32(&mut self) {
        for v in self.values.iter_mut() {
            *v = *v as f32 as f64;
        }
    }

    /// First tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&TensorInfo> {
        self.tensors
            .iter()
            .find(|t| self.values[t.range()].iter().any(|v| !v.is_finite()))
    }
}

pub(crate) fn init_params(arch: &Architecture, seed: u64) -> (Layout, ParamStore) {
    let (layout, tensors) = Layout::new(arch);
    let total = tensors.iter().map(|t| t.len).sum();
    let mut values = vec![0.0; total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |r: &Range<usize>, std: f64, values: &mut [f64]| {
        let dist = Normal::new(0.0, std).expect("valid std");
        for v in &mut values[r.clone()] {
            *v = dist.sample(&mut rng);
        }
    };
    let d = arch.d_model as f64;
    let residual = 1.0 / (2.0 * arch.blocks as f64).sqrt();
    fill(&layout.tok, 0.1, &mut values);
    fill(&layout.pos, 0.1, &mut values);
    for b in &layout.blocks {
        for w in [&b.wq, &b.wk, &b.wv] {
            fill(w, 1.0 / d.sqrt(), &mut values);
        }
        fill(&b.wo, residual / d.sqrt(), &mut values);
        fill(&b.w1, 1.0 / d.sqrt(), &mut values);
        fill(&b.w2, residual / (arch.ffn_dim as f64).sqrt(), &mut values);
        for g in [&b.ln_attn_gain, &b.ln_ffn_gain] {
            values[g.clone()].iter_mut().for_each(|v| *v = 1.0);
        }
    }
    values[layout.ln_final_gain.clone()]
        .iter_mut()
        .for_each(|v| *v = 1.0);
    fill(&layout.proj, 1.0 / d.sqrt(), &mut values);
    values[layout.logit_scale.start] = (1.0f64 / 0.07).ln();
    let mut store = ParamStore { values, tensors };
    store.round_to_f32();
    (layout, store)
}

/// Gain and bias of one layer-norm site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnSite {
    /// e.g. `block0.pre_attention`, `block1.pre_ffn`, `final`.
    pub label: String,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

/// The adaptable parameter subset (or a gradient with the same shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnParameterSet {
    pub sites: Vec<LnSite>,
}

impl LnParameterSet {
    /// Gathers LN tensors from a flat vector laid out like `store`.
    pub fn gather(store: &ParamStore, flat: &[f64]) -> Self {
        let mut sites: Vec<LnSite> = Vec::new();
        for t in store.ln_tensors() {
            let (label, kind) = t
                .name
                .rsplit_once('.')
                .expect("ln tensor names end in .gain/.bias");
            if kind == "gain" {
                sites.push(LnSite {
                    label: label.to_string(),
                    gain: flat[t.range()].to_vec(),
                    bias: Vec::new(),
                });
            } else {
                let site = sites.last_mut().expect("gain precedes bias");
                debug_assert_eq!(site.label, label);
                site.bias = flat[t.range()].to_vec();
            }
        }
        LnParameterSet { sites }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.sites
            .iter()
            .flat_map(|s| s.gain.iter().chain(&s.bias))
            .copied()
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.sites.iter().map(|s| s.gain.len() + s.bias.len()).sum()
    }

    /// Writes these values back into `store`; shapes must match.
    pub fn scatter(&self, store: &mut ParamStore) -> Result<()> {
        let ln: Vec<TensorInfo> = store.ln_tensors().cloned().collect();
        if ln.len() != 2 * self.sites.len() {
            return Err(NeatError::ArchitectureMismatch(format!(
                "{} LN sites in file, {} in model",
                self.sites.len(),
                ln.len() / 2
            )));
        }
        for (site, pair) in self.sites.iter().zip(ln.chunks(2)) {
            for (t, values) in pair.iter().zip([&site.gain, &site.bias]) {
                if !t.name.starts_with(&site.label) || t.len != values.len() {
                    return Err(NeatError::ArchitectureMismatch(format!(
                        "site {} does not fit tensor {}",
                        site.label, t.name
                    )));
                }
                store.values[t.range()].copy_from_slice(values);
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for s in &mut self.sites {
            s.gain
                .iter_mut()
                .chain(s.bias.iter_mut())
                .for_each(|v| *v *= factor);
        }
    }
}
