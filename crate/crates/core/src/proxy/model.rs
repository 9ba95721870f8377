//! The residual MLP: `A_0 = x`, `h_k = W1_k LN(A_{k-1})`,
//! `A_k = A_{k-1} + W2_k phi(h_k)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mx_block::QuantStats;
use crate::real::Real;
use crate::tensor::{
    activation_bwd, activation_fwd, layernorm_bwd, layernorm_fwd, matmul_q_t, vec_add, Activation,
    LnCache, QuantPoint, QuantRole, Tensor, VecOps, LAYERNORM_EPS,
};

use super::config::{InitScheme, ModelConfig, QuantConfig};
use super::data::Stream;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    /// `w1_rows x d_model`
    pub w1: Tensor<T>,
    /// `d_model x hidden`
    pub w2: Tensor<T>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

/// Parameters, gradients and optimizer moments all share this layout.
/// Flattened order: for each layer `w1`, `w2`, `gamma`, `beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> Params<T> {
    pub fn zeros_like(other: &Params<T>) -> Self {
        Params {
            layers: other
                .layers
                .iter()
                .map(|l| LayerParams {
                    w1: Tensor::zeros(&l.w1.shape),
                    w2: Tensor::zeros(&l.w2.shape),
                    gamma: l.gamma.as_ref().map(|g| vec![T::ZERO; g.len()]),
                    beta: l.beta.as_ref().map(|b| vec![T::ZERO; b.len()]),
                })
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 4);
        for l in &self.layers {
            out.push(&l.w1.data[..]);
            out.push(&l.w2.data[..]);
            if let Some(g) = &l.gamma {
                out.push(&g[..]);
            }
            if let Some(b) = &l.beta {
                out.push(&b[..]);
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 4);
        for l in &mut self.layers {
            out.push(&mut l.w1.data[..]);
            out.push(&mut l.w2.data[..]);
            if let Some(g) = &mut l.gamma {
                out.push(&mut g[..]);
            }
            if let Some(b) = &mut l.beta {
                out.push(&mut b[..]);
            }
        }
        out
    }

    /// Names in flattening order, e.g. `layers.0.w1`.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push(format!("layers.{k}.w1"));
            out.push(format!("layers.{k}.w2"));
            if l.gamma.is_some() {
                out.push(format!("layers.{k}.ln.gamma"));
            }
            if l.beta.is_some() {
                out.push(format!("layers.{k}.ln.beta"));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn flatten_f64(&self) -> Vec<f64> {
        self.slices()
            .into_iter()
            .flat_map(|s| s.iter().map(|x| x.to_f64()))
            .collect()
    }

    pub fn load_f64(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for s in self.slices_mut() {
            for x in s {
                *x = T::from_f64(*it.next().unwrap());
            }
        }
        Ok(())
    }

    /// Euclidean norm accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| {
                let v = x.to_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let t = |x: &Tensor<T>| Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        };
        let v = |x: &Vec<T>| x.iter().map(|v| U::from_f64(v.to_f64())).collect();
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w1: t(&l.w1),
                    w2: t(&l.w2),
                    gamma: l.gamma.as_ref().map(v),
                    beta: l.beta.as_ref().map(v),
                })
                .collect(),
        }
    }
}

/// Student or teacher network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

fn init_matrix<T: Real>(rows: usize, cols: usize, scheme: InitScheme, stream: &mut Stream) -> Tensor<T> {
    let fan_in = cols as f64;
    let fan_out = rows as f64;
    let mut t = Tensor::zeros(&[rows, cols]);
    match scheme {
        InitScheme::KaimingUniform => {
            let bound = 1.0 / fan_in.sqrt();
            for x in &mut t.data {
                *x = T::from_f64(stream.uniform_range(-bound, bound));
            }
        }
        InitScheme::XavierNormalGain05 => {
            let std = 0.5 * (2.0 / (fan_in + fan_out)).sqrt();
            for x in &mut t.data {
                *x = T::from_f64(std * stream.normal());
            }
        }
    }
    t
}

fn build<T: Real>(cfg: &ModelConfig, seed: u64, layernorm: bool) -> Result<Model<T>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let hidden = cfg.hidden();
    let layers = (0..cfg.depth)
        .map(|k| {
            let mut s1 = Stream::new(seed, 2 * k as u64);
            let mut s2 = Stream::new(seed, 2 * k as u64 + 1);
            LayerParams {
                w1: init_matrix(cfg.w1_rows(), d, cfg.init, &mut s1),
                w2: init_matrix(d, hidden, cfg.init, &mut s2),
                gamma: layernorm.then(|| vec![T::ONE; d]),
                beta: layernorm.then(|| vec![T::ZERO; d]),
            }
        })
        .collect();
    let mut config = cfg.clone();
    config.layernorm = layernorm;
    Ok(Model {
        config,
        params: Params { layers },
    })
}

/// Student initialized from `cfg.seed`.
pub fn build_student<T: Real>(cfg: &ModelConfig) -> Result<Model<T>> {
    build(cfg, cfg.seed, cfg.layernorm)
}

/// Same architecture without layer normalization, from its own seed.
pub fn build_teacher<T: Real>(cfg: &ModelConfig, teacher_seed: u64) -> Result<Model<T>> {
    build(cfg, teacher_seed, false)
}

struct LayerCache<T> {
    ln: Option<LnCache<T>>,
    /// Input of the W1 matmul (LN output, or the residual stream).
    n: Tensor<T>,
    h: Tensor<T>,
    z: Tensor<T>,
}

pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
}

/// Last-bin counts gathered during one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTelemetry {
    /// Keyed by LN tensor name, e.g. `layers.0.ln.gamma`.
    pub ln: BTreeMap<String, QuantStats>,
    /// Keyed by activation site, e.g. `layers.0.w1_input`.
    pub activations: BTreeMap<String, QuantStats>,
}

impl ForwardTelemetry {
    pub fn activation_total(&self) -> QuantStats {
        let mut total = QuantStats::default();
        self.activations.values().for_each(|s| total.merge(*s));
        total
    }
}

pub struct ForwardOutput<T> {
    pub output: Tensor<T>,
    pub cache: ForwardCache<T>,
    pub telemetry: ForwardTelemetry,
}

impl<T: Real> Model<T> {
    pub fn forward(&self, x: &Tensor<T>, quant: &QuantConfig) -> Result<ForwardOutput<T>> {
        let d = self.config.d_model;
        if x.shape.len() != 2 || x.shape[1] != d {
            return Err(Error::ShapeMismatch(format!(
                "input shape {:?}, expected [batch, {d}]",
                x.shape
            )));
        }
        let vec_ops = quant.vec_ops();
        let q_w = quant.point(QuantRole::FwdWeight);
        let q_a = quant.point(QuantRole::FwdActivation);
        let q_ln = quant.point(QuantRole::LnAffine);
        let mut telemetry = ForwardTelemetry::default();
        let mut caches = Vec::with_capacity(self.params.layers.len());
        let mut a = x.clone();
        for (k, layer) in self.params.layers.iter().enumerate() {
            let (n, ln) = match (&layer.gamma, &layer.beta) {
                (Some(g), Some(b)) => {
                    let out = layernorm_fwd(&a, g, b, LAYERNORM_EPS, &q_ln, vec_ops)?;
                    if quant.format(QuantRole::LnAffine).is_mx() {
                        telemetry.ln.insert(format!("layers.{k}.ln.gamma"), out.gamma_stats);
                        telemetry.ln.insert(format!("layers.{k}.ln.beta"), out.beta_stats);
                    }
                    (out.y, Some(out.cache))
                }
                _ => (a.clone(), None),
            };
            let mm1 = matmul_q_t(&n, false, &layer.w1, true, &q_a, &q_w)?;
            let h = mm1.product;
            let z = activation_fwd(self.config.activation, &h)?;
            let mm2 = matmul_q_t(&z, false, &layer.w2, true, &q_a, &q_w)?;
            if q_a.format.is_mx() {
                telemetry.activations.insert(format!("layers.{k}.w1_input"), mm1.stats_a);
                telemetry.activations.insert(format!("layers.{k}.w2_input"), mm2.stats_a);
            }
            a = vec_add(&a, &mm2.product, vec_ops)?;
            caches.push(LayerCache { ln, n, h, z });
        }
        Ok(ForwardOutput {
            output: a,
            cache: ForwardCache { layers: caches },
            telemetry,
        })
    }

    /// Unquantized working-precision forward pass (teacher targets).
    pub fn forward_plain(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, &QuantConfig::default())?.output)
    }

    /// Gradients of the loss with respect to every parameter given the
    /// upstream gradient `dout` of the network output.
    pub fn backward(&self, cache: &ForwardCache<T>, dout: &Tensor<T>, quant: &QuantConfig) -> Result<Params<T>> {
        let q_go = quant.point(QuantRole::GradOutput);
        let q_gi = quant.point(QuantRole::GradInput);
        let q_bw = quant.point(QuantRole::BwdWeight);
        let act = self.config.activation;
        let mut grads = Params::zeros_like(&self.params);
        let mut da = dout.clone();
        for (k, layer) in self.params.layers.iter().enumerate().rev() {
            let c = &cache.layers[k];
            let g = &mut grads.layers[k];
            // dW2 = du^T z, dz = du W2
            g.w2 = matmul_q_t(&da, true, &c.z, false, &q_go, &q_gi)?.product;
            let dz = matmul_q_t(&da, false, &layer.w2, false, &q_go, &q_bw)?.product;
            let dh = activation_bwd(act, &c.h, &dz)?;
            // dW1 = dh^T n, dn = dh W1
            g.w1 = matmul_q_t(&dh, true, &c.n, false, &q_go, &q_gi)?.product;
            let dn = matmul_q_t(&dh, false, &layer.w1, false, &q_go, &q_bw)?.product;
            let dx = match &c.ln {
                Some(ln_cache) => {
                    let lg = layernorm_bwd(ln_cache, &dn)?;
                    g.gamma = Some(lg.dgamma);
                    g.beta = Some(lg.dbeta);
                    lg.dx
                }
                None => dn,
            };
            da = vec_add(&da, &dx, VecOps::Working)?;
        }
        Ok(grads)
    }
}

/// Cast of a single quant point for external inspection.
pub fn quant_point(quant: &QuantConfig, role: QuantRole) -> QuantPoint {
    quant.point(role)
}

pub fn activation_of<T>(m: &Model<T>) -> Activation {
    m.config.activation
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::mse_loss;

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig::new(1, 4, Activation::Relu);
        let m = build_student::<f64>(&cfg).unwrap();
        assert_eq!(m.params.layers[0].w1.shape, vec![16, 4]);
        assert_eq!(m.params.layers[0].w2.shape, vec![4, 16]);
        assert!(m.params.layers[0].gamma.is_some());
        let t = build_teacher::<f64>(&cfg, 9).unwrap();
        assert!(t.params.layers[0].gamma.is_none());
        assert_ne!(t.params.layers[0].w1, m.params.layers[0].w1);
    }

    #[test]
    fn swiglu_w1_doubles_hidden() {
        let cfg = ModelConfig::new(1, 384, Activation::Swiglu);
        let m = build_student::<f32>(&cfg).unwrap();
        assert_eq!(m.params.layers[0].w1.shape, vec![2048, 384]);
        assert_eq!(m.params.layers[0].w2.shape, vec![384, 1024]);
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::new(2, 8, Activation::Gelu);
        assert_eq!(build_student::<f32>(&cfg).unwrap(), build_student::<f32>(&cfg).unwrap());
    }

    #[test]
    fn kaiming_bounds_respected() {
        let cfg = ModelConfig::new(1, 16, Activation::Relu);
        let m = build_student::<f64>(&cfg).unwrap();
        let b1 = 1.0 / 16f64.sqrt();
        let b2 = 1.0 / 64f64.sqrt();
        assert!(m.params.layers[0].w1.data.iter().all(|x| x.abs() <= b1));
        assert!(m.params.layers[0].w2.data.iter().all(|x| x.abs() <= b2));
    }

    #[test]
    fn zero_weights_without_layernorm_is_identity() {
        let mut cfg = ModelConfig::new(3, 4, Activation::Gelu);
        cfg.layernorm = false;
        let mut m = build_student::<f64>(&cfg).unwrap();
        for s in m.params.slices_mut() {
            s.iter_mut().for_each(|x| *x = 0.0);
        }
        let x = Tensor::from_f64(&[2, 4], &[0.5, -1.0, 2.0, 3.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(m.forward_plain(&x).unwrap(), x);
    }

    #[test]
    fn student_equal_to_teacher_has_zero_loss() {
        let mut cfg = ModelConfig::new(2, 6, Activation::Relu);
        cfg.layernorm = false;
        let teacher = build_teacher::<f64>(&cfg, 5).unwrap();
        let mut student = build_student::<f64>(&cfg).unwrap();
        student.params = teacher.params.clone();
        let x = Tensor::from_f64(&[3, 6], &(0..18).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let y = teacher.forward_plain(&x).unwrap();
        let out = student.forward(&x, &QuantConfig::default()).unwrap();
        assert_eq!(mse_loss(&out.output, &y).unwrap().0, 0.0);
    }

    #[test]
    fn flatten_round_trip_and_names() {
        let cfg = ModelConfig::new(2, 4, Activation::Relu);
        let m = build_student::<f64>(&cfg).unwrap();
        let flat = m.params.flatten_f64();
        assert_eq!(flat.len(), m.params.num_params());
        let mut p = Params::zeros_like(&m.params);
        p.load_f64(&flat).unwrap();
        assert_eq!(p, m.params);
        assert_eq!(m.params.names()[2], "layers.0.ln.gamma");
        assert_eq!(m.params.names().len(), m.params.slices().len());
    }
}
