//! Incremental decoding with a key/value cache.

use crate::error::{LmError, Result};
use crate::lora::LoraAdapter;
use crate::model::{project, ModelParams};
use crate::config::Proj;
use crate::tensor::{axpy, dot, gelu, layer_norm, matmul_t, softmax_in_place, Scalar};

/// Feeds tokens one at a time, reusing the keys and values of earlier
/// positions. Produces the same logits as [`ModelParams::forward_logits`].
pub struct Session<'m, F> {
    model: &'m ModelParams<F>,
    adapter: Option<&'m LoraAdapter<F>>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    logits: Vec<F>,
    len: usize,
}

impl<'m, F: Scalar> Session<'m, F> {
    pub fn new(model: &'m ModelParams<F>, adapter: Option<&'m LoraAdapter<F>>) -> Result<Self> {
        if let Some(a) = adapter {
            if a.layers.len() != model.layers.len() {
                return Err(LmError::ShapeMismatch("adapter layer count differs from model".into()));
            }
        }
        let n = model.layers.len();
        Ok(Session { model, adapter, keys: vec![Vec::new(); n], values: vec![Vec::new(); n], logits: Vec::new(), len: 0 })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops every position from `len` on.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        let (d, v) = (self.model.config.d_model, self.model.config.vocab_size);
        for (k, vv) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(len * d);
            vv.truncate(len * d);
        }
        self.logits.truncate(len * v);
        self.len = len;
    }

    /// Logits predicting the token after the last one fed.
    pub fn last_logits(&self) -> Option<&[F]> {
        let v = self.model.config.vocab_size;
        (self.len > 0).then(|| &self.logits[(self.len - 1) * v..self.len * v])
    }

    pub fn extend(&mut self, tokens: &[u32]) -> Result<&[F]> {
        for &t in tokens {
            self.push(t)?;
        }
        self.last_logits().ok_or(LmError::SequenceTooShort { len: 0, min: 1 })
    }

    pub fn push(&mut self, token: u32) -> Result<&[F]> {
        let m = self.model;
        let c = &m.config;
        if self.len >= c.max_seq_len {
            return Err(LmError::SequenceTooLong { id: None, len: self.len + 1, max: c.max_seq_len });
        }
        if token as usize >= c.vocab_size {
            return Err(LmError::TokenOutOfRange { token, vocab: c.vocab_size });
        }
        let (d, nh, hd, ff, pos) = (c.d_model, c.n_heads, c.head_dim(), c.ffn_dim(), self.len);
        let att_scale = F::of(1.0 / (hd as f64).sqrt());
        let mut x = m.tok_emb.row(token as usize).to_vec();
        axpy(F::one(), m.pos_emb.row(pos), &mut x);
        let mut stats = [(F::zero(), F::zero())];
        let mut scores = vec![F::zero(); pos + 1];
        for (li, layer) in m.layers.iter().enumerate() {
            let lora_for = |p: Proj| {
                self.adapter.and_then(|a| a.layers[li].get(p).map(|pair| (pair, a.scale(), 0.0)))
            };
            let mut ln = vec![F::zero(); d];
            layer_norm(&x, 1, d, &layer.ln1_g.data, &layer.ln1_b.data, &mut ln, &mut stats);
            let (q, _) = project(&ln, 1, &layer.wq, lora_for(Proj::Q), &mut None);
            let (k, _) = project(&ln, 1, &layer.wk, lora_for(Proj::K), &mut None);
            let (v, _) = project(&ln, 1, &layer.wv, lora_for(Proj::V), &mut None);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let (keys, values) = (&self.keys[li], &self.values[li]);
            let mut attn = vec![F::zero(); d];
            for h in 0..nh {
                let off = h * hd;
                for (u, s) in scores.iter_mut().enumerate() {
                    *s = dot(&q[off..off + hd], &keys[u * d + off..u * d + off + hd]) * att_scale;
                }
                softmax_in_place(&mut scores);
                for (u, &p) in scores.iter().enumerate() {
                    axpy(p, &values[u * d + off..u * d + off + hd], &mut attn[off..off + hd]);
                }
            }
            let (o, _) = project(&attn, 1, &layer.wo, lora_for(Proj::O), &mut None);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += *b);

            layer_norm(&x, 1, d, &layer.ln2_g.data, &layer.ln2_b.data, &mut ln, &mut stats);
            let mut h1 = vec![F::zero(); ff];
            matmul_t(&ln, 1, d, &layer.w1.data, ff, &mut h1);
            axpy(F::one(), &layer.b1.data, &mut h1);
            let act: Vec<F> = h1.iter().map(|&z| gelu(z)).collect();
            let mut f = vec![F::zero(); d];
            matmul_t(&act, 1, ff, &layer.w2.data, d, &mut f);
            axpy(F::one(), &layer.b2.data, &mut f);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += *b);
        }
        let mut ln = vec![F::zero(); d];
        layer_norm(&x, 1, d, &m.lnf_g.data, &m.lnf_b.data, &mut ln, &mut stats);
        let vsz = c.vocab_size;
        let start = self.logits.len();
        self.logits.resize(start + vsz, F::zero());
        matmul_t(&ln, 1, d, &m.lm_head.data, vsz, &mut self.logits[start..]);
        self.len += 1;
        Ok(&self.logits[start..])
    }
}
