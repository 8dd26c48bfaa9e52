//! Central finite-difference check of [`ModelParams::loss_and_grad`].

use trajforge_core::TokenSequence;

use crate::config::TrainMode;
use crate::error::Result;
use crate::lora::LoraAdapter;
use crate::model::ModelParams;

/// Analytic vs numeric gradient for one parameter block.
#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`, or 0 when both vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

fn rel(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Checks every trainable block under `mode` using steps of `eps`.
pub fn check_gradients(
    model: &ModelParams<f64>,
    adapter: Option<&LoraAdapter<f64>>,
    batch: &[TokenSequence],
    mode: TrainMode,
    eps: f64,
) -> Result<Vec<BlockCheck>> {
    let (_, grads) = model.loss_and_grad(adapter, batch, mode)?;
    let mut out = Vec::new();
    let mut m = model.clone();
    let mut a = adapter.cloned();
    let loss = |m: &ModelParams<f64>, a: Option<&LoraAdapter<f64>>| m.loss(a, batch);

    if let Some(g) = &grads.model {
        for (b, (name, gt)) in g.named().into_iter().enumerate() {
            let mut numeric = vec![0.0; gt.len()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = m.named()[b].1.data[i];
                m.named_mut()[b].1.data[i] = orig + eps;
                let up = loss(&m, a.as_ref())?;
                m.named_mut()[b].1.data[i] = orig - eps;
                let down = loss(&m, a.as_ref())?;
                m.named_mut()[b].1.data[i] = orig;
                *slot = (up - down) / (2.0 * eps);
            }
            out.push(BlockCheck { rel_error: rel(&gt.data, &numeric), analytic_norm: gt.sum_squares().sqrt(), name });
        }
    }
    if let (Some(g), Some(ad)) = (&grads.lora, a.as_mut()) {
        for (b, (name, gt)) in g.named().into_iter().enumerate() {
            let mut numeric = vec![0.0; gt.len()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = ad.named()[b].1.data[i];
                ad.named_mut()[b].1.data[i] = orig + eps;
                let up = loss(&m, Some(ad))?;
                ad.named_mut()[b].1.data[i] = orig - eps;
                let down = loss(&m, Some(ad))?;
                ad.named_mut()[b].1.data[i] = orig;
                *slot = (up - down) / (2.0 * eps);
            }
            out.push(BlockCheck { rel_error: rel(&gt.data, &numeric), analytic_norm: gt.sum_squares().sqrt(), name });
        }
    }
    Ok(out)
}
