//! Temperature sampling and autoregressive continuation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use trajforge_core::encode::EOS;
use trajforge_core::{TokenId, TokenSequence};
use trajforge_lm::{LoraAdapter, ModelParams, Session};

use crate::error::{GenError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Attempts per trajectory before giving up.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { temperature: 1.2, max_new_tokens: 200, max_retries: 10, seed: 0 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GenError::InvalidConfig(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Anything that yields next-token logits for a context.
pub trait NextToken {
    fn context_limit(&self) -> usize;
    fn next_logits(&mut self, context: &[TokenId]) -> Result<Vec<f32>>;
}

/// A model behind a key/value cache that is reused across calls sharing a
/// prefix (prompt re-use across retries and trajectories).
pub struct CachedModel<'m> {
    session: Session<'m, f32>,
    fed: Vec<TokenId>,
    limit: usize,
}

impl<'m> CachedModel<'m> {
    pub fn new(model: &'m ModelParams<f32>, adapter: Option<&'m LoraAdapter<f32>>) -> Result<Self> {
        Ok(CachedModel { session: Session::new(model, adapter)?, fed: Vec::new(), limit: model.config.max_seq_len })
    }
}

impl NextToken for CachedModel<'_> {
    fn context_limit(&self) -> usize {
        self.limit
    }

    fn next_logits(&mut self, context: &[TokenId]) -> Result<Vec<f32>> {
        let common = self.fed.iter().zip(context).take_while(|(a, b)| a == b).count();
        let keep = common;
        self.session.truncate(keep);
        self.fed.truncate(keep);
        if keep < context.len() {
            self.session.extend(&context[keep..])?;
            self.fed.extend_from_slice(&context[keep..]);
        }
        self.session
            .last_logits()
            .map(<[f32]>::to_vec)
            .ok_or(GenError::Model(trajforge_lm::LmError::SequenceTooShort { len: 0, min: 1 }))
    }
}

/// Draws a token from `softmax(logits / temperature)`.
pub fn sample_next<R: Rng + ?Sized>(logits: &[f32], temperature: f64, rng: &mut R) -> Result<TokenId> {
    if !(temperature > 0.0) {
        return Err(GenError::InvalidConfig(format!("temperature must be positive, got {temperature}")));
    }
    if logits.is_empty() || logits.iter().any(|x| !x.is_finite()) {
        return Err(GenError::NonFiniteLogits);
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = logits.iter().map(|&l| ((l as f64 - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(i as TokenId);
        }
        u -= w;
    }
    // rounding left a sliver past the last bucket; land on the last nonzero weight
    Ok(weights.iter().rposition(|&w| w > 0.0).unwrap() as TokenId)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Continuation {
    pub tokens: TokenSequence,
    /// False when generation stopped on the token budget or context limit.
    pub ended: bool,
}

/// Extends `prompt` until `<EOS>`, the token budget, or the context limit.
pub fn generate_sequence<R: Rng + ?Sized>(
    model: &mut dyn NextToken,
    prompt: &TokenSequence,
    gc: &GenConfig,
    rng: &mut R,
) -> Result<Continuation> {
    let mut tokens = prompt.0.clone();
    let limit = model.context_limit();
    let mut new = 0;
    while new < gc.max_new_tokens && tokens.len() < limit {
        let logits = model.next_logits(&tokens)?;
        let t = sample_next(&logits, gc.temperature, rng)?;
        tokens.push(t);
        new += 1;
        if t == EOS {
            return Ok(Continuation { tokens: TokenSequence(tokens), ended: true });
        }
    }
    Ok(Continuation { tokens: TokenSequence(tokens), ended: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use trajforge_core::rng;

    fn freq(logits: &[f32], t: f64, draws: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "sample-test", 0);
        let mut counts = vec![0usize; logits.len()];
        for _ in 0..draws {
            counts[sample_next(logits, t, &mut r).unwrap() as usize] += 1;
        }
        counts.into_iter().map(|c| c as f64 / draws as f64).collect()
    }

    #[test]
    fn symmetric_logits() {
        for t in [0.3, 1.0, 5.0] {
            let f = freq(&[2.5, 2.5], t, 10_000, 1);
            assert!((f[0] - 0.5).abs() < 0.02, "{f:?}");
        }
    }

    #[test]
    fn low_temperature_is_greedy() {
        let f = freq(&[5.0, 0.0], 0.01, 10_000, 2);
        assert!(f[0] * 10_000.0 >= 9_990.0);
    }

    #[test]
    fn analytic_softmax() {
        let f = freq(&[3f32.ln(), 0.0], 1.0, 10_000, 3);
        assert!((f[0] - 0.75).abs() < 0.02, "{f:?}");
    }

    #[test]
    fn rejects_bad_input() {
        let mut r = rng::stream(0, "x", 0);
        assert!(matches!(sample_next(&[1.0, f32::NAN], 1.0, &mut r), Err(GenError::NonFiniteLogits)));
        assert!(matches!(sample_next(&[1.0, f32::INFINITY], 1.0, &mut r), Err(GenError::NonFiniteLogits)));
        assert!(matches!(sample_next(&[1.0], 0.0, &mut r), Err(GenError::InvalidConfig(_))));
        assert!(GenConfig { temperature: -1.0, ..Default::default() }.validate().is_err());
    }

    /// Emits a fixed script of tokens, one per call.
    struct Script(Vec<TokenId>, usize);

    impl NextToken for Script {
        fn context_limit(&self) -> usize {
            64
        }
        fn next_logits(&mut self, _: &[TokenId]) -> Result<Vec<f32>> {
            let mut l = vec![-50.0; 10];
            l[self.0[self.1.min(self.0.len() - 1)] as usize] = 50.0;
            self.1 += 1;
            Ok(l)
        }
    }

    #[test]
    fn continuation_keeps_prompt_and_stops() {
        let prompt = TokenSequence(vec![0, 3, 4, 5]);
        let gc = GenConfig::default();
        let mut r = rng::stream(0, "x", 0);
        let out = generate_sequence(&mut Script(vec![7, 8, EOS], 0), &prompt, &gc, &mut r).unwrap();
        assert_eq!(out.tokens.0, vec![0, 3, 4, 5, 7, 8, EOS]);
        assert!(out.ended);
        let gc = GenConfig { max_new_tokens: 5, ..gc };
        let out = generate_sequence(&mut Script(vec![7], 0), &prompt, &gc, &mut r).unwrap();
        assert_eq!(out.tokens.len(), 9);
        assert!(!out.ended);
    }
}
