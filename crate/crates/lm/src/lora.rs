//! Low-rank adapters: a frozen weight `W0` is used as `W0 x + (alpha/r) B (A x)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{LoraConfig, ModelConfig, Proj};
use crate::error::{LmError, Result};
use crate::tensor::{dot, Scalar, Tensor};

/// `A` is `r x in`, `B` is `out x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<F> {
    pub a: Tensor<F>,
    pub b: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLora<F> {
    pub pairs: [Option<LoraPair<F>>; 4],
}

impl<F> LayerLora<F> {
    pub fn get(&self, p: Proj) -> Option<&LoraPair<F>> {
        self.pairs[p as usize].as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<F> {
    pub config: LoraConfig,
    pub layers: Vec<LayerLora<F>>,
}

impl<F: Scalar> LoraAdapter<F> {
    /// `A ~ N(0, 1/in)` and `B = 0`, so the adapter starts as the identity.
    pub fn init<R: Rng + ?Sized>(model: &ModelConfig, config: LoraConfig, rng: &mut R) -> Result<Self> {
        config.validate(model)?;
        let d = model.d_model;
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let layers = (0..model.n_layers)
            .map(|_| {
                let mut pairs: [Option<LoraPair<F>>; 4] = Default::default();
                for p in Proj::ALL {
                    if config.targets.contains(&p) {
                        let a = (0..config.rank * d).map(|_| F::of(normal.sample(rng))).collect();
                        pairs[p as usize] = Some(LoraPair {
                            a: Tensor::from_vec(&[config.rank, d], a),
                            b: Tensor::zeros(&[d, config.rank]),
                        });
                    }
                }
                LayerLora { pairs }
            })
            .collect();
        Ok(LoraAdapter { config, layers })
    }

    /// An adapter of the right shape with every matrix zero.
    pub fn zeros(model: &ModelConfig, config: LoraConfig) -> Result<Self> {
        config.validate(model)?;
        let d = model.d_model;
        let layers = (0..model.n_layers)
            .map(|_| LayerLora {
                pairs: Proj::ALL.map(|p| {
                    config.targets.contains(&p).then(|| LoraPair {
                        a: Tensor::zeros(&[config.rank, d]),
                        b: Tensor::zeros(&[d, config.rank]),
                    })
                }),
            })
            .collect();
        Ok(LoraAdapter { config, layers })
    }

    pub fn scale(&self) -> F {
        F::of(self.config.scale())
    }

    pub fn zeros_like(&self) -> Self {
        LoraAdapter {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerLora {
                    pairs: l.pairs.clone().map(|p| {
                        p.map(|p| LoraPair { a: Tensor::zeros(&p.a.shape), b: Tensor::zeros(&p.b.shape) })
                    }),
                })
                .collect(),
        }
    }

    /// `(name, tensor)` for every adapter matrix, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for p in Proj::ALL {
                if let Some(pair) = l.get(p) {
                    out.push((format!("lora.{i}.{}.a", p.name()), &pair.a));
                    out.push((format!("lora.{i}.{}.b", p.name()), &pair.b));
                }
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (p, pair) in Proj::ALL.iter().zip(l.pairs.iter_mut()) {
                if let Some(pair) = pair {
                    out.push((format!("lora.{i}.{}.a", p.name()), &mut pair.a));
                    out.push((format!("lora.{i}.{}.b", p.name()), &mut pair.b));
                }
            }
        }
        out
    }

    pub fn cast<G: Scalar>(&self) -> LoraAdapter<G> {
        LoraAdapter {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerLora {
                    pairs: l.pairs.clone().map(|p| p.map(|p| LoraPair { a: p.a.cast(), b: p.b.cast() })),
                })
                .collect(),
        }
    }

    /// The dense update `(alpha/r) B A` for one projection.
    pub fn delta(&self, layer: usize, p: Proj) -> Option<Tensor<F>> {
        let pair = self.layers.get(layer)?.get(p)?;
        let (out, r, inp) = (pair.b.rows(), pair.a.rows(), pair.a.cols());
        let s = self.scale();
        let mut w = Tensor::zeros(&[out, inp]);
        for o in 0..out {
            for i in 0..inp {
                let mut acc = F::zero();
                for k in 0..r {
                    acc += pair.b.data[o * r + k] * pair.a.data[k * inp + i];
                }
                w.data[o * inp + i] = s * acc;
            }
        }
        Some(w)
    }
}

/// `W0 x + (alpha/r) B (A x)` computed without forming `B A`.
pub fn lora_forward<F: Scalar>(
    w0: &Tensor<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
    x: &[F],
    alpha: F,
    r: usize,
) -> Result<Vec<F>> {
    let (out, inp) = (w0.rows(), w0.cols());
    if w0.shape.len() != 2 || a.shape != [r, inp] || b.shape != [out, r] || x.len() != inp {
        return Err(LmError::ShapeMismatch(format!(
            "W0 {:?}, A {:?}, B {:?}, x [{}], rank {r}",
            w0.shape,
            a.shape,
            b.shape,
            x.len()
        )));
    }
    let ax: Vec<F> = (0..r).map(|k| dot(a.row(k), x)).collect();
    let s = alpha / F::of(r as f64);
    Ok((0..out).map(|o| dot(w0.row(o), x) + s * dot(b.row(o), &ax)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_b_gives_base_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w0 = random(&[6, 5], &mut rng);
        let a = random(&[2, 5], &mut rng);
        let b = Tensor::zeros(&[6, 2]);
        let x: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let y = lora_forward(&w0, &a, &b, &x, 4.0, 2).unwrap();
        let base: Vec<f64> = (0..6).map(|o| dot(w0.row(o), &x)).collect();
        assert_eq!(y, base);
    }

    #[test]
    fn zero_base_with_alpha_equal_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w0 = Tensor::zeros(&[4, 3]);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let x = vec![0.3, -1.2, 0.8];
        let y = lora_forward(&w0, &a, &b, &x, 2.0, 2).unwrap();
        for o in 0..4 {
            let bax: f64 = (0..2).map(|k| b.data[o * 2 + k] * dot(a.row(k), &x)).sum();
            assert!((y[o] - bax).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_dense_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w0, a, b) = (random(&[8, 8], &mut rng), random(&[3, 8], &mut rng), random(&[8, 3], &mut rng));
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (alpha, r) = (6.0, 3);
        let y = lora_forward(&w0, &a, &b, &x, alpha, r).unwrap();
        // oracle: materialize W0 + (alpha/r) B A, then multiply
        for o in 0..8 {
            let mut acc = 0.0;
            for i in 0..8 {
                let ba: f64 = (0..r).map(|k| b.data[o * r + k] * a.data[k * 8 + i]).sum();
                acc += (w0.data[o * 8 + i] + alpha / r as f64 * ba) * x[i];
            }
            assert!((y[o] - acc).abs() <= 1e-6 * acc.abs().max(1e-12), "{} vs {acc}", y[o]);
        }
    }

    #[test]
    fn shape_errors() {
        let w0 = Tensor::<f64>::zeros(&[4, 3]);
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(lora_forward(&w0, &a, &b, &[0.0; 2], 1.0, 2).is_err());
        assert!(lora_forward(&w0, &a, &Tensor::zeros(&[3, 2]), &[0.0; 3], 1.0, 2).is_err());
        assert!(lora_forward(&w0, &a, &b, &[0.0; 3], 1.0, 3).is_err());
    }
}
