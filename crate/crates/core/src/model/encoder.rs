//! Pre-norm transformer text encoder with exact reverse-mode gradients.
//!
//! Each sequence is processed on its active (non-padding) positions only,
//! which is the same computation as masking padded keys out of attention.
//! The embedding is read at the end-marker position after the final layer
//! norm, projected to the joint space and L2-normalized.

use super::params::{init_params, Architecture, Layout, LnParameterSet, ParamStore};
use super::tokenizer::{TokenSequence, Tokenizer};
use crate::linalg::{self, matmul, matmul_at_acc, matmul_bt};
use crate::{NeatError, Result};
use std::collections::HashMap;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Which gradients a backward pass accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Every parameter (pretraining).
    Full,
    /// Layer-norm gains and biases only; other entries stay zero.
    LnOnly,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    arch: Architecture,
    layout: Layout,
    pub params: ParamStore,
    tokenizer: Tokenizer,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
}

struct SeqCache {
    ids: Vec<u32>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    z: Vec<f64>,
    y_norm: f64,
    out: Vec<f64>,
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], d: usize) -> (Vec<f64>, LnCache) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[r * d + c] = xh;
            y[r * d + c] = gain[c] * xh + bias[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates the input gradient into `dx` and, when given, the gain/bias gradients.
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    gain: &[f64],
    d: usize,
    mut dparams: Option<(&mut [f64], &mut [f64])>,
    dx: &mut [f64],
) {
    let n = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        if let Some((dg, db)) = dparams.as_mut() {
            for c in 0..d {
                dg[c] += dyr[c] * xh[c];
                db[c] += dyr[c];
            }
        }
        for c in 0..d {
            dxhat[c] = dyr[c] * gain[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] += rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
}

fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn bias_grad(g: &[f64], acc: &mut [f64]) {
    for row in g.chunks_exact(acc.len()) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

impl TextEncoder {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let tokenizer = Tokenizer::new(arch.max_len);
        if tokenizer.vocab_size() != arch.vocab_size {
            return Err(NeatError::ArchitectureMismatch(format!(
                "vocabulary has {} entries, architecture declares {}",
                tokenizer.vocab_size(),
                arch.vocab_size
            )));
        }
        let (layout, params) = init_params(&arch, seed);
        Ok(TextEncoder {
            arch,
            layout,
            params,
            tokenizer,
        })
    }

    /// Rebuilds an encoder around existing parameter values.
    pub fn from_params(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        let mut enc = TextEncoder::new(arch, 0)?;
        if values.len() != enc.params.len() {
            return Err(NeatError::ArchitectureMismatch(format!(
                "expected {} parameters, got {}",
                enc.params.len(),
                values.len()
            )));
        }
        enc.params.values = values;
        Ok(enc)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        self.tokenizer.tokenize(text)
    }

    pub fn logit_scale(&self) -> f64 {
        self.params.values[self.layout.logit_scale.start]
    }

    pub fn ln_parameters(&self) -> LnParameterSet {
        LnParameterSet::gather(&self.params, &self.params.values)
    }

    pub fn set_ln_parameters(&mut self, ln: &LnParameterSet) -> Result<()> {
        ln.scatter(&mut self.params)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.first_non_finite() {
            Some(t) => Err(NeatError::NonFinite(format!("parameter tensor {}", t.name))),
            None => Ok(()),
        }
    }

    fn p(&self, r: &std::ops::Range<usize>) -> &[f64] {
        &self.params.values[r.clone()]
    }

    fn validate_tokens(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len < 2 || seq.len > self.arch.max_len || seq.ids.len() != self.arch.max_len {
            return Err(NeatError::invalid(format!(
                "token sequence has length {} / {}",
                seq.len,
                seq.ids.len()
            )));
        }
        if let Some(bad) = seq
            .ids
            .iter()
            .find(|&&i| i as usize >= self.arch.vocab_size)
        {
            return Err(NeatError::invalid(format!(
                "token id {bad} outside vocabulary"
            )));
        }
        Ok(())
    }

    fn forward_seq(&self, seq: &TokenSequence) -> SeqCache {
        let d = self.arch.d_model;
        let heads = self.arch.heads;
        let hd = self.arch.head_dim();
        let ff = self.arch.ffn_dim;
        let ids = seq.active().to_vec();
        let n = ids.len();
        let scale = 1.0 / (hd as f64).sqrt();

        let tok = self.p(&self.layout.tok);
        let pos = self.p(&self.layout.pos);
        let mut x = vec![0.0; n * d];
        for (i, &id) in ids.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            let t = &tok[id as usize * d..(id as usize + 1) * d];
            let p = &pos[i * d..(i + 1) * d];
            for c in 0..d {
                row[c] = t[c] + p[c];
            }
        }

        let mut blocks = Vec::with_capacity(self.arch.blocks);
        for bl in &self.layout.blocks {
            let (h1, ln1) = layer_norm(&x, self.p(&bl.ln_attn_gain), self.p(&bl.ln_attn_bias), d);
            let mut q = vec![0.0; n * d];
            let mut k = vec![0.0; n * d];
            let mut v = vec![0.0; n * d];
            matmul(&h1, self.p(&bl.wq), n, d, d, &mut q);
            add_bias(&mut q, self.p(&bl.bq));
            matmul(&h1, self.p(&bl.wk), n, d, d, &mut k);
            add_bias(&mut k, self.p(&bl.bk));
            matmul(&h1, self.p(&bl.wv), n, d, d, &mut v);
            add_bias(&mut v, self.p(&bl.bv));

            let mut att = vec![0.0; heads * n * n];
            let mut o = vec![0.0; n * d];
            let mut logits = vec![0.0; n];
            for h in 0..heads {
                let off = h * hd;
                for i in 0..n {
                    let qi = &q[i * d + off..i * d + off + hd];
                    for j in 0..n {
                        logits[j] = scale * linalg::dot(qi, &k[j * d + off..j * d + off + hd]);
                    }
                    let a = &mut att[(h * n + i) * n..(h * n + i + 1) * n];
                    linalg::softmax(&logits, a);
                    let oi = &mut o[i * d + off..i * d + off + hd];
                    for j in 0..n {
                        let w = a[j];
                        for (oc, vc) in oi.iter_mut().zip(&v[j * d + off..j * d + off + hd]) {
                            *oc += w * vc;
                        }
                    }
                }
            }
            let mut attn_out = vec![0.0; n * d];
            matmul(&o, self.p(&bl.wo), n, d, d, &mut attn_out);
            add_bias(&mut attn_out, self.p(&bl.bo));
            for (xv, a) in x.iter_mut().zip(&attn_out) {
                *xv += a;
            }

            let (h2, ln2) = layer_norm(&x, self.p(&bl.ln_ffn_gain), self.p(&bl.ln_ffn_bias), d);
            let mut u = vec![0.0; n * ff];
            matmul(&h2, self.p(&bl.w1), n, d, ff, &mut u);
            add_bias(&mut u, self.p(&bl.b1));
            let act: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mut f = vec![0.0; n * d];
            matmul(&act, self.p(&bl.w2), n, ff, d, &mut f);
            add_bias(&mut f, self.p(&bl.b2));
            for (xv, fv) in x.iter_mut().zip(&f) {
                *xv += fv;
            }
            blocks.push(BlockCache {
                ln1,
                h1,
                q,
                k,
                v,
                att,
                o,
                ln2,
                h2,
                u,
                act,
            });
        }

        let last = &x[(n - 1) * d..n * d];
        let (z, lnf) = layer_norm(
            last,
            self.p(&self.layout.ln_final_gain),
            self.p(&self.layout.ln_final_bias),
            d,
        );
        let e = self.arch.embed_dim;
        let mut y = vec![0.0; e];
        matmul(&z, self.p(&self.layout.proj), 1, d, e, &mut y);
        let y_norm = linalg::norm(&y);
        let out = y.iter().map(|v| v / y_norm).collect();
        SeqCache {
            ids,
            blocks,
            lnf,
            z,
            y_norm,
            out,
        }
    }

    /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(embedding).
    fn backward_seq(&self, cache: &SeqCache, d_out: &[f64], mode: GradMode, grad: &mut [f64]) {
        let d = self.arch.d_model;
        let heads = self.arch.heads;
        let hd = self.arch.head_dim();
        let ff = self.arch.ffn_dim;
        let e = self.arch.embed_dim;
        let n = cache.ids.len();
        let scale = 1.0 / (hd as f64).sqrt();
        let full = mode == GradMode::Full;
        let lay = &self.layout;

        // normalization: out = y / |y|
        let proj_dot = linalg::dot(&cache.out, d_out);
        let dy: Vec<f64> = d_out
            .iter()
            .zip(&cache.out)
            .map(|(g, o)| (g - o * proj_dot) / cache.y_norm)
            .collect();
        if full {
            matmul_at_acc(&cache.z, &dy, 1, d, e, &mut grad[lay.proj.clone()]);
        }
        let mut dz = vec![0.0; d];
        matmul_bt(&dy, self.p(&lay.proj), 1, e, d, &mut dz);

        let mut dx = vec![0.0; n * d];
        {
            let (dg, db) = split_pair(grad, &lay.ln_final_gain, &lay.ln_final_bias);
            layer_norm_backward(
                &dz,
                &cache.lnf,
                self.p(&lay.ln_final_gain),
                d,
                Some((dg, db)),
                &mut dx[(n - 1) * d..],
            );
        }

        for (bl, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            // x_out = x_mid + W2 gelu(W1 LN2(x_mid) + b1) + b2
            let df = &dx;
            if full {
                matmul_at_acc(&bc.act, df, n, ff, d, &mut grad[bl.w2.clone()]);
                bias_grad(df, &mut grad[bl.b2.clone()]);
            }
            let mut dact = vec![0.0; n * ff];
            matmul_bt(df, self.p(&bl.w2), n, d, ff, &mut dact);
            for (g, &u) in dact.iter_mut().zip(&bc.u) {
                *g *= gelu_grad(u);
            }
            if full {
                matmul_at_acc(&bc.h2, &dact, n, d, ff, &mut grad[bl.w1.clone()]);
                bias_grad(&dact, &mut grad[bl.b1.clone()]);
            }
            let mut dh2 = vec![0.0; n * d];
            matmul_bt(&dact, self.p(&bl.w1), n, ff, d, &mut dh2);
            let mut dx_mid = dx.clone();
            {
                let (dg, db) = split_pair(grad, &bl.ln_ffn_gain, &bl.ln_ffn_bias);
                layer_norm_backward(
                    &dh2,
                    &bc.ln2,
                    self.p(&bl.ln_ffn_gain),
                    d,
                    Some((dg, db)),
                    &mut dx_mid,
                );
            }

            // x_mid = x_in + Wo attn(LN1(x_in)) + bo
            let da = &dx_mid;
            if full {
                matmul_at_acc(&bc.o, da, n, d, d, &mut grad[bl.wo.clone()]);
                bias_grad(da, &mut grad[bl.bo.clone()]);
            }
            let mut d_o = vec![0.0; n * d];
            matmul_bt(da, self.p(&bl.wo), n, d, d, &mut d_o);

            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut datt = vec![0.0; n];
            for h in 0..heads {
                let off = h * hd;
                for i in 0..n {
                    let a = &bc.att[(h * n + i) * n..(h * n + i + 1) * n];
                    let doi = &d_o[i * d + off..i * d + off + hd];
                    for j in 0..n {
                        datt[j] = linalg::dot(doi, &bc.v[j * d + off..j * d + off + hd]);
                        let dvj = &mut dv[j * d + off..j * d + off + hd];
                        for (g, o) in dvj.iter_mut().zip(doi) {
                            *g += a[j] * o;
                        }
                    }
                    let s: f64 = a.iter().zip(&datt).map(|(p, g)| p * g).sum();
                    for j in 0..n {
                        let ds = a[j] * (datt[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..hd {
                            dq[i * d + off + c] += ds * bc.k[j * d + off + c];
                            dk[j * d + off + c] += ds * bc.q[i * d + off + c];
                        }
                    }
                }
            }
            if full {
                matmul_at_acc(&bc.h1, &dq, n, d, d, &mut grad[bl.wq.clone()]);
                matmul_at_acc(&bc.h1, &dk, n, d, d, &mut grad[bl.wk.clone()]);
                matmul_at_acc(&bc.h1, &dv, n, d, d, &mut grad[bl.wv.clone()]);
                bias_grad(&dq, &mut grad[bl.bq.clone()]);
                bias_grad(&dk, &mut grad[bl.bk.clone()]);
                bias_grad(&dv, &mut grad[bl.bv.clone()]);
            }
            let mut dh1 = vec![0.0; n * d];
            let mut tmp = vec![0.0; n * d];
            for (g, w) in [(&dq, &bl.wq), (&dk, &bl.wk), (&dv, &bl.wv)] {
                matmul_bt(g, self.p(w), n, d, d, &mut tmp);
                for (a, b) in dh1.iter_mut().zip(&tmp) {
                    *a += b;
                }
            }
            let mut dx_in = dx_mid.clone();
            {
                let (dg, db) = split_pair(grad, &bl.ln_attn_gain, &bl.ln_attn_bias);
                layer_norm_backward(
                    &dh1,
                    &bc.ln1,
                    self.p(&bl.ln_attn_gain),
                    d,
                    Some((dg, db)),
                    &mut dx_in,
                );
            }
            dx = dx_in;
        }

        if full {
            for (i, &id) in cache.ids.iter().enumerate() {
                let row = &dx[i * d..(i + 1) * d];
                linalg::axpy(
                    1.0,
                    row,
                    &mut grad
                        [lay.tok.start + id as usize * d..lay.tok.start + (id as usize + 1) * d],
                );
                linalg::axpy(
                    1.0,
                    row,
                    &mut grad[lay.pos.start + i * d..lay.pos.start + (i + 1) * d],
                );
            }
        }
    }

    /// Unit-norm embedding of one token sequence.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        self.check_finite()?;
        self.validate_tokens(seq)?;
        Ok(self.forward_seq(seq).out)
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        self.encode(&self.tokenize(text))
    }

    /// Batched encoding; identical inputs are computed once.
    pub fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<Vec<f64>>> {
        self.check_finite()?;
        let mut memo: HashMap<&[u32], Vec<f64>> = HashMap::new();
        let mut out = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.validate_tokens(s)?;
            let v = memo
                .entry(s.active())
                .or_insert_with(|| self.forward_seq(s).out);
            out.push(v.clone());
        }
        Ok(out)
    }

    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Vec<f64>>> {
        let seqs: Vec<TokenSequence> = texts.iter().map(|t| self.tokenize(t.as_ref())).collect();
        self.encode_batch(&seqs)
    }

    /// Encodes `seqs`, evaluates `loss` on the embeddings and backpropagates.
    ///
    /// `loss` returns the scalar and its gradient with respect to each
    /// embedding. The returned gradient vector is laid out like
    /// [`ParamStore::values`]; in [`GradMode::LnOnly`] only layer-norm entries
    /// are populated.
    pub fn value_and_grad<F>(
        &self,
        seqs: &[TokenSequence],
        mode: GradMode,
        loss: F,
    ) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
    {
        self.check_finite()?;
        let mut unique: Vec<SeqCache> = Vec::new();
        let mut slot_of: HashMap<&[u32], usize> = HashMap::new();
        let mut slots = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.validate_tokens(s)?;
            let slot = *slot_of.entry(s.active()).or_insert_with(|| {
                unique.push(self.forward_seq(s));
                unique.len() - 1
            });
            slots.push(slot);
        }
        let embeddings: Vec<Vec<f64>> = slots.iter().map(|&k| unique[k].out.clone()).collect();
        let (value, d_emb) = loss(&embeddings)?;
        if !value.is_finite() {
            return Err(NeatError::NonFinite(format!("loss evaluated to {value}")));
        }
        if d_emb.len() != seqs.len() {
            return Err(NeatError::invalid(
                "loss gradient count does not match the batch",
            ));
        }
        let e = self.arch.embed_dim;
        let mut per_unique = vec![vec![0.0; e]; unique.len()];
        for (&k, g) in slots.iter().zip(&d_emb) {
            linalg::axpy(1.0, g, &mut per_unique[k]);
        }
        let mut grad = vec![0.0; self.params.len()];
        for (cache, g) in unique.iter().zip(&per_unique) {
            if g.iter().any(|&v| v != 0.0) {
                self.backward_seq(cache, g, mode, &mut grad);
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(NeatError::NonFinite("gradient".into()));
        }
        Ok((value, grad))
    }

    /// Exact gradient of `loss` with respect to every layer-norm gain and bias.
    pub fn loss_gradient_wrt_ln<F>(
        &self,
        seqs: &[TokenSequence],
        loss: F,
    ) -> Result<(f64, LnParameterSet)>
    where
        F: FnOnce(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
    {
        let (value, grad) = self.value_and_grad(seqs, GradMode::LnOnly, loss)?;
        Ok((value, LnParameterSet::gather(&self.params, &grad)))
    }
}

fn split_pair<'a>(
    grad: &'a mut [f64],
    a: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = grad.split_at_mut(b.start);
    (&mut left[a.clone()], &mut right[..b.end - b.start])
}
