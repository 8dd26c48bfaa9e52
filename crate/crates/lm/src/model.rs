//! A small pre-norm decoder-only transformer with hand-written gradients.
//!
//! Per layer: `x += Wo·Attn(LN1(x))`, `x += W2·gelu(W1·LN2(x) + b1) + b2`;
//! then a final layer norm and an untied output projection. Attention
//! projections have no bias. LoRA pairs, when present, add
//! `(alpha/r)·B(A·x)` to their projection.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use trajforge_core::rng;
use trajforge_core::TokenSequence;

use crate::config::{ModelConfig, Proj, TrainMode};
use crate::error::{LmError, Result};
use crate::lora::{LoraAdapter, LoraPair};
use crate::tensor::{
    axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul_t, matmul_t_backward, softmax_in_place,
    Scalar, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

impl<F: Scalar> Layer<F> {
    fn zeros(c: &ModelConfig) -> Self {
        let (d, ff) = (c.d_model, c.ffn_dim());
        Layer {
            ln1_g: Tensor::zeros(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln2_g: Tensor::zeros(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[ff, d]),
            b1: Tensor::zeros(&[ff]),
            w2: Tensor::zeros(&[d, ff]),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn proj(&self, p: Proj) -> &Tensor<F> {
        match p {
            Proj::Q => &self.wq,
            Proj::K => &self.wk,
            Proj::V => &self.wv,
            Proj::O => &self.wo,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<F>); 12] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 12] {
        let Layer { ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2 } = self;
        [
            ("ln1_g", ln1_g),
            ("ln1_b", ln1_b),
            ("wq", wq),
            ("wk", wk),
            ("wv", wv),
            ("wo", wo),
            ("ln2_g", ln2_g),
            ("ln2_b", ln2_b),
            ("w1", w1),
            ("b1", b1),
            ("w2", w2),
            ("b2", b2),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub layers: Vec<Layer<F>>,
    pub lnf_g: Tensor<F>,
    pub lnf_b: Tensor<F>,
    pub lm_head: Tensor<F>,
}

/// Gradients for one step: base parameters (absent when frozen) and adapter.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub model: Option<ModelParams<F>>,
    pub lora: Option<LoraAdapter<F>>,
}

impl<F: Scalar> Grads<F> {
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = self.model.as_ref().map(|m| m.named()).unwrap_or_default();
        if let Some(l) = &self.lora {
            out.extend(l.named());
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = self.model.as_mut().map(|m| m.named_mut()).unwrap_or_default();
        if let Some(l) = &mut self.lora {
            out.extend(l.named_mut());
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.sum_squares()).sum::<f64>().sqrt()
    }
}

pub(crate) struct ProjCache<F> {
    /// Dropout mask (already divided by the keep probability).
    mask: Option<Vec<F>>,
    /// `A·x` rows, `n x r`.
    xa: Vec<F>,
}

struct LayerCache<F> {
    x_in: Vec<F>,
    ln1: Vec<F>,
    ln1_stats: Vec<(F, F)>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    lora: [Option<ProjCache<F>>; 4],
    att: Vec<F>,
    attn_out: Vec<F>,
    attn_mask: Option<Vec<F>>,
    x_mid: Vec<F>,
    ln2: Vec<F>,
    ln2_stats: Vec<(F, F)>,
    h1: Vec<F>,
    act: Vec<F>,
    ffn_mask: Option<Vec<F>>,
}

struct Cache<F> {
    tokens: Vec<u32>,
    layers: Vec<LayerCache<F>>,
    x_final: Vec<F>,
    lnf: Vec<F>,
    lnf_stats: Vec<(F, F)>,
}

fn dropout_mask<F: Scalar>(len: usize, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Option<Vec<F>> {
    let rng = rng.as_deref_mut()?;
    if p <= 0.0 {
        return None;
    }
    let keep = F::of(1.0 / (1.0 - p));
    Some((0..len).map(|_| if rng.random::<f64>() < p { F::zero() } else { keep }).collect())
}

/// `y = W x (+ scale·B(A·(mask⊙x)))` for `n` rows.
pub(crate) fn project<F: Scalar>(
    x: &[F],
    n: usize,
    w: &Tensor<F>,
    lora: Option<(&LoraPair<F>, F, f64)>,
    rng: &mut Option<&mut dyn RngCore>,
) -> (Vec<F>, Option<ProjCache<F>>) {
    let (out, inp) = (w.rows(), w.cols());
    let mut y = vec![F::zero(); n * out];
    matmul_t(x, n, inp, &w.data, out, &mut y);
    let Some((pair, scale, p)) = lora else { return (y, None) };
    let r = pair.a.rows();
    let mask = dropout_mask::<F>(n * inp, p, rng);
    let xd: Vec<F> = match &mask {
        Some(m) => x.iter().zip(m).map(|(a, b)| *a * *b).collect(),
        None => x.to_vec(),
    };
    let mut xa = vec![F::zero(); n * r];
    matmul_t(&xd, n, inp, &pair.a.data, r, &mut xa);
    for t in 0..n {
        let xat = &xa[t * r..(t + 1) * r];
        for o in 0..out {
            y[t * out + o] += scale * dot(pair.b.row(o), xat);
        }
    }
    (y, Some(ProjCache { mask, xa }))
}

#[allow(clippy::too_many_arguments)]
fn project_backward<F: Scalar>(
    dy: &[F],
    x: &[F],
    n: usize,
    w: &Tensor<F>,
    dw: Option<&mut Tensor<F>>,
    lora: Option<(&LoraPair<F>, F, &ProjCache<F>)>,
    dlora: Option<&mut LoraPair<F>>,
    dx: &mut [F],
) {
    let (out, inp) = (w.rows(), w.cols());
    matmul_t_backward(dy, x, n, inp, &w.data, out, Some(&mut *dx), dw.map(|t| &mut t.data[..]));
    let Some((pair, scale, cache)) = lora else { return };
    let r = pair.a.rows();
    let dys: Vec<F> = dy.iter().map(|g| *g * scale).collect();
    let mut dxa = vec![F::zero(); n * r];
    let (da, db) = match dlora {
        Some(d) => (Some(&mut d.a.data[..]), Some(&mut d.b.data[..])),
        None => (None, None),
    };
    matmul_t_backward(&dys, &cache.xa, n, r, &pair.b.data, out, Some(&mut dxa), db);
    match &cache.mask {
        None => matmul_t_backward(&dxa, x, n, inp, &pair.a.data, r, Some(dx), da),
        Some(m) => {
            let xd: Vec<F> = x.iter().zip(m).map(|(a, b)| *a * *b).collect();
            let mut dxd = vec![F::zero(); n * inp];
            matmul_t_backward(&dxa, &xd, n, inp, &pair.a.data, r, Some(&mut dxd), da);
            for ((g, gd), mi) in dx.iter_mut().zip(&dxd).zip(m) {
                *g += *gd * *mi;
            }
        }
    }
}

impl<F: Scalar> ModelParams<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, d, s) = (config.vocab_size, config.d_model, config.max_seq_len);
        ModelParams {
            config: config.clone(),
            tok_emb: Tensor::zeros(&[v, d]),
            pos_emb: Tensor::zeros(&[s, d]),
            layers: (0..config.n_layers).map(|_| Layer::zeros(config)).collect(),
            lnf_g: Tensor::zeros(&[d]),
            lnf_b: Tensor::zeros(&[d]),
            lm_head: Tensor::zeros(&[v, d]),
        }
    }

    /// Deterministic initialization from a seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, &mut rng::stream(seed, "init", 0))
    }

    /// Weights `N(0, 0.02²)`, residual output projections scaled down by
    /// `sqrt(2·layers)`, positions `N(0, 0.01²)`, norms at unit gain.
    pub fn init_with<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let normal = |std: f64| Normal::new(0.0, std).expect("valid std");
        let fill = |t: &mut Tensor<F>, dist: Normal<f64>, rng: &mut R| {
            t.data.iter_mut().for_each(|x| *x = F::of(dist.sample(rng)));
        };
        let resid = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        fill(&mut p.tok_emb, normal(0.02), rng);
        fill(&mut p.pos_emb, normal(0.01), rng);
        for l in &mut p.layers {
            l.ln1_g.data.fill(F::one());
            l.ln2_g.data.fill(F::one());
            fill(&mut l.wq, normal(0.02), rng);
            fill(&mut l.wk, normal(0.02), rng);
            fill(&mut l.wv, normal(0.02), rng);
            fill(&mut l.wo, normal(resid), rng);
            fill(&mut l.w1, normal(0.02), rng);
            fill(&mut l.w2, normal(resid), rng);
        }
        p.lnf_g.data.fill(F::one());
        fill(&mut p.lm_head, normal(0.02), rng);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// `(name, tensor)` for every parameter, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let ModelParams { tok_emb, pos_emb, layers, lnf_g, lnf_b, lm_head, .. } = self;
        let mut out = vec![("tok_emb".to_string(), tok_emb), ("pos_emb".to_string(), pos_emb)];
        for (i, l) in layers.iter_mut().enumerate() {
            out.extend(l.named_mut().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("lnf_g".into(), lnf_g));
        out.push(("lnf_b".into(), lnf_b));
        out.push(("lm_head".into(), lm_head));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(LmError::SequenceTooLong { id: None, len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(LmError::TokenOutOfRange { token: t, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    fn check_adapter(&self, adapter: Option<&LoraAdapter<F>>) -> Result<()> {
        if let Some(a) = adapter {
            if a.layers.len() != self.layers.len() {
                return Err(LmError::ShapeMismatch("adapter layer count differs from model".into()));
            }
            for l in &a.layers {
                for pair in l.pairs.iter().flatten() {
                    if pair.a.cols() != self.config.d_model || pair.b.rows() != self.config.d_model {
                        return Err(LmError::ShapeMismatch("adapter width differs from model".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Logits for every position of `prefix`, `len x vocab`.
    pub fn forward_logits(&self, adapter: Option<&LoraAdapter<F>>, prefix: &TokenSequence) -> Result<Tensor<F>> {
        let tokens = prefix.ids();
        if tokens.is_empty() {
            return Err(LmError::SequenceTooShort { len: 0, min: 1 });
        }
        self.check_tokens(tokens)?;
        self.check_adapter(adapter)?;
        let (logits, _) = self.forward_cached(adapter, tokens, tokens.len(), None);
        Ok(Tensor::from_vec(&[tokens.len(), self.config.vocab_size], logits))
    }

    /// Forward pass keeping every activation the backward pass needs.
    /// Logits are produced for the first `n_out` positions only.
    fn forward_cached(
        &self,
        adapter: Option<&LoraAdapter<F>>,
        tokens: &[u32],
        n_out: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> (Vec<F>, Cache<F>) {
        let c = &self.config;
        let (n, d, nh, hd, ff) = (tokens.len(), c.d_model, c.n_heads, c.head_dim(), c.ffn_dim());
        let att_scale = F::of(1.0 / (hd as f64).sqrt());
        let mut x = vec![F::zero(); n * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            row.copy_from_slice(self.tok_emb.row(tok as usize));
            axpy(F::one(), self.pos_emb.row(t), row);
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let lora_for = |p: Proj| {
                adapter.and_then(|a| a.layers[li].get(p).map(|pair| (pair, a.scale(), a.config.dropout)))
            };
            let mut ln1 = vec![F::zero(); n * d];
            let mut ln1_stats = vec![(F::zero(), F::zero()); n];
            layer_norm(&x, n, d, &layer.ln1_g.data, &layer.ln1_b.data, &mut ln1, &mut ln1_stats);
            let (q, cq) = project(&ln1, n, &layer.wq, lora_for(Proj::Q), &mut rng);
            let (k, ck) = project(&ln1, n, &layer.wk, lora_for(Proj::K), &mut rng);
            let (v, cv) = project(&ln1, n, &layer.wv, lora_for(Proj::V), &mut rng);

            let mut att = vec![F::zero(); nh * n * n];
            let mut attn_out = vec![F::zero(); n * d];
            for h in 0..nh {
                let off = h * hd;
                for t in 0..n {
                    let qt = &q[t * d + off..t * d + off + hd];
                    let row = &mut att[(h * n + t) * n..(h * n + t) * n + t + 1];
                    for (u, s) in row.iter_mut().enumerate() {
                        *s = dot(qt, &k[u * d + off..u * d + off + hd]) * att_scale;
                    }
                    softmax_in_place(row);
                    let out = &mut attn_out[t * d + off..t * d + off + hd];
                    for (u, &p) in row.iter().enumerate() {
                        axpy(p, &v[u * d + off..u * d + off + hd], out);
                    }
                }
            }
            let (mut proj_o, co) = project(&attn_out, n, &layer.wo, lora_for(Proj::O), &mut rng);
            let attn_mask = dropout_mask::<F>(n * d, c.dropout, &mut rng);
            if let Some(m) = &attn_mask {
                proj_o.iter_mut().zip(m).for_each(|(a, b)| *a *= *b);
            }
            let mut x_mid = x.clone();
            x_mid.iter_mut().zip(&proj_o).for_each(|(a, b)| *a += *b);

            let mut ln2 = vec![F::zero(); n * d];
            let mut ln2_stats = vec![(F::zero(), F::zero()); n];
            layer_norm(&x_mid, n, d, &layer.ln2_g.data, &layer.ln2_b.data, &mut ln2, &mut ln2_stats);
            let mut h1 = vec![F::zero(); n * ff];
            matmul_t(&ln2, n, d, &layer.w1.data, ff, &mut h1);
            for t in 0..n {
                axpy(F::one(), &layer.b1.data, &mut h1[t * ff..(t + 1) * ff]);
            }
            let act: Vec<F> = h1.iter().map(|&z| gelu(z)).collect();
            let mut f = vec![F::zero(); n * d];
            matmul_t(&act, n, ff, &layer.w2.data, d, &mut f);
            for t in 0..n {
                axpy(F::one(), &layer.b2.data, &mut f[t * d..(t + 1) * d]);
            }
            let ffn_mask = dropout_mask::<F>(n * d, c.dropout, &mut rng);
            if let Some(m) = &ffn_mask {
                f.iter_mut().zip(m).for_each(|(a, b)| *a *= *b);
            }
            let mut x_out = x_mid.clone();
            x_out.iter_mut().zip(&f).for_each(|(a, b)| *a += *b);

            layers.push(LayerCache {
                x_in: std::mem::replace(&mut x, x_out),
                ln1,
                ln1_stats,
                q,
                k,
                v,
                lora: [cq, ck, cv, co],
                att,
                attn_out,
                attn_mask,
                x_mid,
                ln2,
                ln2_stats,
                h1,
                act,
                ffn_mask,
            });
        }
        let mut lnf = vec![F::zero(); n * d];
        let mut lnf_stats = vec![(F::zero(), F::zero()); n];
        layer_norm(&x, n, d, &self.lnf_g.data, &self.lnf_b.data, &mut lnf, &mut lnf_stats);
        let vsz = c.vocab_size;
        let mut logits = vec![F::zero(); n_out * vsz];
        matmul_t(&lnf[..n_out * d], n_out, d, &self.lm_head.data, vsz, &mut logits);
        (logits, Cache { tokens: tokens.to_vec(), layers, x_final: x, lnf, lnf_stats })
    }

    fn backward(&self, adapter: Option<&LoraAdapter<F>>, cache: &Cache<F>, dlogits: &[F], grads: &mut Grads<F>) {
        let c = &self.config;
        let n = cache.tokens.len();
        let (d, nh, hd, ff, vsz) = (c.d_model, c.n_heads, c.head_dim(), c.ffn_dim(), c.vocab_size);
        let n_out = dlogits.len() / vsz;
        let att_scale = F::of(1.0 / (hd as f64).sqrt());

        let mut dlnf = vec![F::zero(); n * d];
        matmul_t_backward(
            dlogits,
            &cache.lnf[..n_out * d],
            n_out,
            d,
            &self.lm_head.data,
            vsz,
            Some(&mut dlnf[..n_out * d]),
            grads.model.as_mut().map(|g| &mut g.lm_head.data[..]),
        );
        let mut dx = vec![F::zero(); n * d];
        {
            let (dg, db) = match grads.model.as_mut() {
                Some(g) => (Some(&mut g.lnf_g.data[..]), Some(&mut g.lnf_b.data[..])),
                None => (None, None),
            };
            layer_norm_backward(&dlnf, &cache.x_final, n, d, &self.lnf_g.data, &cache.lnf_stats, &mut dx, dg, db);
        }

        for (li, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let lora_pair = |p: Proj| -> Option<(&LoraPair<F>, F, &ProjCache<F>)> {
                let a = adapter?;
                Some((a.layers[li].get(p)?, a.scale(), lc.lora[p as usize].as_ref()?))
            };
            let mut gl = grads.model.as_mut().map(|g| &mut g.layers[li]);

            // feed-forward block; dx is the gradient at the layer output
            let mut df = dx.clone();
            if let Some(m) = &lc.ffn_mask {
                df.iter_mut().zip(m).for_each(|(a, b)| *a *= *b);
            }
            if let Some(g) = gl.as_deref_mut() {
                for t in 0..n {
                    axpy(F::one(), &df[t * d..(t + 1) * d], &mut g.b2.data);
                }
            }
            let mut dact = vec![F::zero(); n * ff];
            matmul_t_backward(
                &df,
                &lc.act,
                n,
                ff,
                &layer.w2.data,
                d,
                Some(&mut dact),
                gl.as_deref_mut().map(|g| &mut g.w2.data[..]),
            );
            let dh1: Vec<F> = dact.iter().zip(&lc.h1).map(|(g, &z)| *g * gelu_grad(z)).collect();
            if let Some(g) = gl.as_deref_mut() {
                for t in 0..n {
                    axpy(F::one(), &dh1[t * ff..(t + 1) * ff], &mut g.b1.data);
                }
            }
            let mut dln2 = vec![F::zero(); n * d];
            matmul_t_backward(
                &dh1,
                &lc.ln2,
                n,
                d,
                &layer.w1.data,
                ff,
                Some(&mut dln2),
                gl.as_deref_mut().map(|g| &mut g.w1.data[..]),
            );
            let mut dx_mid = dx;
            {
                let (dg, db) = match gl.as_deref_mut() {
                    Some(g) => (Some(&mut g.ln2_g.data[..]), Some(&mut g.ln2_b.data[..])),
                    None => (None, None),
                };
                layer_norm_backward(&dln2, &lc.x_mid, n, d, &layer.ln2_g.data, &lc.ln2_stats, &mut dx_mid, dg, db);
            }

            // attention block
            let mut dproj = dx_mid.clone();
            if let Some(m) = &lc.attn_mask {
                dproj.iter_mut().zip(m).for_each(|(a, b)| *a *= *b);
            }
            let mut lora_grads = grads.lora.as_mut().map(|g| &mut g.layers[li]);
            let mut dattn = vec![F::zero(); n * d];
            project_backward(
                &dproj,
                &lc.attn_out,
                n,
                &layer.wo,
                gl.as_deref_mut().map(|g| &mut g.wo),
                lora_pair(Proj::O),
                lora_grads.as_mut().and_then(|g| g.pairs[Proj::O as usize].as_mut()),
                &mut dattn,
            );

            let mut dq = vec![F::zero(); n * d];
            let mut dk = vec![F::zero(); n * d];
            let mut dv = vec![F::zero(); n * d];
            let mut dp = vec![F::zero(); n];
            for h in 0..nh {
                let off = h * hd;
                for t in 0..n {
                    let p_row = &lc.att[(h * n + t) * n..(h * n + t) * n + t + 1];
                    let dout = &dattn[t * d + off..t * d + off + hd];
                    let mut weighted = F::zero();
                    for u in 0..=t {
                        dp[u] = dot(dout, &lc.v[u * d + off..u * d + off + hd]);
                        weighted += p_row[u] * dp[u];
                        axpy(p_row[u], dout, &mut dv[u * d + off..u * d + off + hd]);
                    }
                    let qt = &lc.q[t * d + off..t * d + off + hd];
                    for u in 0..=t {
                        let ds = p_row[u] * (dp[u] - weighted) * att_scale;
                        if ds != F::zero() {
                            axpy(ds, &lc.k[u * d + off..u * d + off + hd], &mut dq[t * d + off..t * d + off + hd]);
                            axpy(ds, qt, &mut dk[u * d + off..u * d + off + hd]);
                        }
                    }
                }
            }
            let mut dln1 = vec![F::zero(); n * d];
            for (p, dy) in [(Proj::Q, &dq), (Proj::K, &dk), (Proj::V, &dv)] {
                let dw = gl.as_deref_mut().map(|g| match p {
                    Proj::Q => &mut g.wq,
                    Proj::K => &mut g.wk,
                    _ => &mut g.wv,
                });
                project_backward(dy, &lc.ln1, n, layer.proj(p), dw, lora_pair(p), lora_grads.as_mut().and_then(|g| g.pairs[p as usize].as_mut()), &mut dln1);
            }
            let mut dx_in = dx_mid;
            {
                let (dg, db) = match gl.as_deref_mut() {
                    Some(g) => (Some(&mut g.ln1_g.data[..]), Some(&mut g.ln1_b.data[..])),
                    None => (None, None),
                };
                layer_norm_backward(&dln1, &lc.x_in, n, d, &layer.ln1_g.data, &lc.ln1_stats, &mut dx_in, dg, db);
            }
            dx = dx_in;
        }

        if let Some(g) = grads.model.as_mut() {
            for (t, &tok) in cache.tokens.iter().enumerate() {
                let row = &dx[t * d..(t + 1) * d];
                let tok = tok as usize;
                axpy(F::one(), row, &mut g.tok_emb.data[tok * d..(tok + 1) * d]);
                axpy(F::one(), row, &mut g.pos_emb.data[t * d..(t + 1) * d]);
            }
        }
    }

    /// Mean next-token cross entropy (nats per predicted token) over the
    /// batch and its gradient. In `LoraOnly` mode only adapter gradients are
    /// produced.
    pub fn loss_and_grad(
        &self,
        adapter: Option<&LoraAdapter<F>>,
        batch: &[TokenSequence],
        mode: TrainMode,
    ) -> Result<(f64, Grads<F>)> {
        self.loss_and_grad_with(adapter, batch, mode, None)
    }

    /// As [`loss_and_grad`](Self::loss_and_grad), with dropout drawn from
    /// `rng` when given.
    pub fn loss_and_grad_with(
        &self,
        adapter: Option<&LoraAdapter<F>>,
        batch: &[TokenSequence],
        mode: TrainMode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(f64, Grads<F>)> {
        if mode == TrainMode::LoraOnly && adapter.is_none() {
            return Err(LmError::MissingAdapter);
        }
        self.check_adapter(adapter)?;
        for s in batch {
            if s.len() < 2 {
                return Err(LmError::SequenceTooShort { len: s.len(), min: 2 });
            }
            self.check_tokens(s.ids())?;
        }
        let mut grads = Grads {
            model: (mode == TrainMode::Full).then(|| self.zeros_like()),
            lora: adapter.map(|a| a.zeros_like()),
        };
        let n_pred: usize = batch.iter().map(|s| s.len() - 1).sum();
        if n_pred == 0 {
            return Ok((0.0, grads));
        }
        let inv = F::of(1.0 / n_pred as f64);
        let vsz = self.config.vocab_size;
        let mut total = 0.0f64;
        for s in batch {
            let ids = s.ids();
            let n_out = ids.len() - 1;
            let (mut logits, cache) = self.forward_cached(adapter, ids, n_out, rng.as_mut().map(|r| &mut **r as &mut dyn RngCore));
            for t in 0..n_out {
                let row = &mut logits[t * vsz..(t + 1) * vsz];
                softmax_in_place(row);
                let target = ids[t + 1] as usize;
                total -= row[target].to_f64().unwrap().max(f64::MIN_POSITIVE).ln();
                row[target] -= F::one();
                row.iter_mut().for_each(|g| *g *= inv);
            }
            self.backward(adapter, &cache, &logits, &mut grads);
        }
        Ok((total / n_pred as f64, grads))
    }

    /// Mean next-token cross entropy without gradients.
    pub fn loss(&self, adapter: Option<&LoraAdapter<F>>, batch: &[TokenSequence]) -> Result<f64> {
        let vsz = self.config.vocab_size;
        let mut total = 0.0;
        let mut count = 0usize;
        for s in batch {
            let ids = s.ids();
            if ids.len() < 2 {
                return Err(LmError::SequenceTooShort { len: ids.len(), min: 2 });
            }
            self.check_tokens(ids)?;
            let (mut logits, _) = self.forward_cached(adapter, ids, ids.len() - 1, None);
            for t in 0..ids.len() - 1 {
                let row = &mut logits[t * vsz..(t + 1) * vsz];
                softmax_in_place(row);
                total -= row[ids[t + 1] as usize].to_f64().unwrap().max(f64::MIN_POSITIVE).ln();
            }
            count += ids.len() - 1;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }
}
