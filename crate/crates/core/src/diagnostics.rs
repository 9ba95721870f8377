//! Gradient-noise measurements and instability analytics: the ζ lower
//! bound, gradient alignment, loss spikes, top Hessian eigenvalue and the
//! linear stability margin.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proxy::data::Stream;
use crate::proxy::model::Model;
use crate::proxy::config::QuantConfig;
use crate::proxy::train::{evaluate, PairedRecord, StepRecord};
use crate::real::Real;
use crate::tensor::Tensor;

/// `eps_norm / g_norm`, a lower bound on the operator norm of the
/// multiplicative noise ζ in `g_lp = (1 + ζ) g_hp`.
pub fn zeta_lower_bound(eps_norm: f64, g_norm: f64) -> Result<f64> {
    if !(g_norm > 0.0) {
        return Err(Error::UndefinedRatio(format!("gradient norm is {g_norm}")));
    }
    Ok(eps_norm / g_norm)
}

/// Cosine similarity of two flattened gradients.
pub fn cosine_alignment(g1: &[f64], g2: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} elements", g1.len(), g2.len())));
    }
    let (mut dot, mut n1, mut n2) = (0.0, 0.0, 0.0);
    for (&a, &b) in g1.iter().zip(g2) {
        dot += a * b;
        n1 += a * a;
        n2 += b * b;
    }
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::UndefinedRatio("zero gradient vector".into()));
    }
    Ok((dot / (n1 * n2).sqrt()).clamp(-1.0, 1.0))
}

pub const DEFAULT_SPIKE_FACTOR: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeReport {
    pub spike_steps: Vec<usize>,
    pub factor: f64,
}

/// Steps `t >= 1` with `loss[t] > factor * loss[t-1]`.
pub fn detect_spikes(losses: &[f64], factor: f64) -> Result<SpikeReport> {
    if losses.is_empty() {
        return Err(Error::invalid("empty loss series"));
    }
    if let Some(i) = losses.iter().position(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::invalid(format!("loss[{i}] = {} is not positive and finite", losses[i])));
    }
    let spike_steps = (1..losses.len()).filter(|&t| losses[t] > factor * losses[t - 1]).collect();
    Ok(SpikeReport { spike_steps, factor })
}

pub const EMA_HALF_LIFE: f64 = 100.0;

/// Exponential moving average with the given half-life in steps, seeded
/// with the first finite value. Non-finite inputs repeat the previous
/// average.
pub fn ema(series: &[f64], half_life: f64) -> Vec<f64> {
    let alpha = 1.0 - 0.5f64.powf(1.0 / half_life);
    let mut out = Vec::with_capacity(series.len());
    let mut acc: Option<f64> = None;
    for &x in series {
        if x.is_finite() {
            acc = Some(match acc {
                None => x,
                Some(a) => a + alpha * (x - a),
            });
        }
        out.push(acc.unwrap_or(f64::NAN));
    }
    out
}

/// `|1 - eta * lambda| + eta * zeta * lambda`; values above 1 indicate the
/// linearized update can grow.
pub fn stability_margin(eta: f64, lambda_max: f64, zeta_lower: f64) -> f64 {
    (1.0 - eta * lambda_max).abs() + eta * zeta_lower * lambda_max
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub lambda_max: f64,
    pub eta: f64,
    pub zeta_lower: f64,
    pub margin: f64,
}

impl StabilityReport {
    pub fn new(eta: f64, lambda_max: f64, zeta_lower: f64) -> Self {
        StabilityReport {
            lambda_max,
            eta,
            zeta_lower,
            margin: stability_margin(eta, lambda_max, zeta_lower),
        }
    }
}

/// Anything that can return a loss gradient at an arbitrary flat parameter
/// vector.
pub trait GradientOracle {
    fn params(&self) -> Vec<f64>;
    fn gradient(&mut self, w: &[f64]) -> Result<Vec<f64>>;
}

/// `L(w) = 0.5 * sum_i d_i w_i^2` around a fixed point `w`.
#[derive(Clone, Debug)]
pub struct DiagonalQuadratic {
    pub diag: Vec<f64>,
    pub w: Vec<f64>,
    pub scale: f64,
}

impl GradientOracle for DiagonalQuadratic {
    fn params(&self) -> Vec<f64> {
        self.w.clone()
    }

    fn gradient(&mut self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(w.iter().zip(&self.diag).map(|(w, d)| self.scale * d * w).collect())
    }
}

/// The training loss of a model on one fixed batch, evaluated in f64 with
/// no quantization.
pub struct ModelOracle {
    model: Model<f64>,
    x: Tensor<f64>,
    y: Tensor<f64>,
}

impl ModelOracle {
    pub fn new<T: Real>(model: &Model<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<Self> {
        Ok(ModelOracle {
            model: Model {
                config: model.config.clone(),
                params: model.params.cast(),
            },
            x: Tensor::from_f64(&x.shape, &x.to_f64())?,
            y: Tensor::from_f64(&y.shape, &y.to_f64())?,
        })
    }
}

impl GradientOracle for ModelOracle {
    fn params(&self) -> Vec<f64> {
        self.model.params.flatten_f64()
    }

    fn gradient(&mut self, w: &[f64]) -> Result<Vec<f64>> {
        self.model.params.load_f64(w)?;
        Ok(evaluate(&self.model, &self.x, &self.y, &QuantConfig::default())?
            .grads
            .flatten_f64())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIterOptions {
    pub max_iter: usize,
    /// Stop when successive estimates differ by less than this fraction.
    pub rel_tol: f64,
    /// Finite-difference step is `delta_rel * |w| / |v|`.
    pub delta_rel: f64,
    pub seed: u64,
}

impl Default for PowerIterOptions {
    fn default() -> Self {
        PowerIterOptions {
            max_iter: 30,
            rel_tol: 1e-3,
            delta_rel: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaEstimate {
    pub lambda_max: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Hessian-vector product by central differences of the gradient.
pub fn hvp(oracle: &mut dyn GradientOracle, w: &[f64], v: &[f64], delta_rel: f64) -> Result<Vec<f64>> {
    let vn = norm(v);
    if vn == 0.0 {
        return Err(Error::UndefinedRatio("zero direction".into()));
    }
    let wn = norm(w);
    // at the origin fall back to an absolute step
    let delta = delta_rel * if wn > 0.0 { wn } else { 1.0 } / vn;
    let plus: Vec<f64> = w.iter().zip(v).map(|(w, v)| w + delta * v).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(w, v)| w - delta * v).collect();
    let gp = oracle.gradient(&plus)?;
    let gm = oracle.gradient(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * delta)).collect())
}

/// Power iteration for the dominant Hessian eigenvalue at the oracle's
/// current parameters. The Rayleigh quotient of the iterate is the estimate.
pub fn estimate_lambda_max(oracle: &mut dyn GradientOracle, opts: &PowerIterOptions) -> Result<LambdaEstimate> {
    let w = oracle.params();
    if w.is_empty() {
        return Err(Error::invalid("no parameters"));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite parameters"));
    }
    let mut stream = Stream::new(opts.seed, 0);
    let mut v: Vec<f64> = (0..w.len()).map(|_| stream.normal()).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut lambda = f64::NAN;
    for it in 1..=opts.max_iter {
        let hv = hvp(oracle, &w, &v, opts.delta_rel)?;
        let next: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        let hn = norm(&hv);
        if hn == 0.0 || !hn.is_finite() {
            return Ok(LambdaEstimate {
                lambda_max: next,
                iterations: it,
                converged: hn == 0.0,
            });
        }
        v = hv.iter().map(|x| x / hn).collect();
        let done = lambda.is_finite() && (next - lambda).abs() <= opts.rel_tol * next.abs();
        lambda = next;
        if done {
            return Ok(LambdaEstimate {
                lambda_max: lambda,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(LambdaEstimate {
        lambda_max: lambda,
        iterations: opts.max_iter,
        converged: false,
    })
}

/// One row of an analysis report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub metric: String,
    pub value: f64,
    pub tensor_name: String,
}

impl MetricRow {
    fn new(step: usize, metric: &str, value: f64, tensor_name: &str) -> Self {
        MetricRow {
            step,
            metric: metric.to_string(),
            value,
            tensor_name: tensor_name.to_string(),
        }
    }
}

fn is_ln_tensor(name: &str) -> bool {
    name.contains(".ln.")
}

/// Last-bin fractions per step: every layernorm tensor individually, their
/// mean, and the mean across all activation sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverflowPoint {
    pub step: usize,
    pub ln: BTreeMap<String, f64>,
    pub ln_mean: f64,
    pub activation_mean: f64,
}

pub fn ln_overflow_report(records: &[StepRecord]) -> Vec<OverflowPoint> {
    records
        .iter()
        .map(|r| {
            let ln: BTreeMap<String, f64> = r
                .last_bin_fraction
                .iter()
                .filter(|(k, _)| is_ln_tensor(k))
                .map(|(k, v)| (k.clone(), *v))
                .collect();
            let acts: Vec<f64> = r
                .last_bin_fraction
                .iter()
                .filter(|(k, _)| !is_ln_tensor(k))
                .map(|(_, v)| *v)
                .collect();
            let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            OverflowPoint {
                step: r.step,
                ln_mean: mean(&ln.values().copied().collect::<Vec<_>>()),
                activation_mean: mean(&acts),
                ln,
            }
        })
        .collect()
}

/// Report rows for a single-run log: loss, gradient norm, learning rate,
/// spikes, and last-bin telemetry.
pub fn run_report(records: &[StepRecord]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for r in records {
        rows.push(MetricRow::new(r.step, "loss", r.loss, ""));
        rows.push(MetricRow::new(r.step, "grad_norm", r.grad_norm, ""));
        rows.push(MetricRow::new(r.step, "lr", r.lr, ""));
    }
    for p in ln_overflow_report(records) {
        for (name, v) in &p.ln {
            rows.push(MetricRow::new(p.step, "last_bin_fraction", *v, name));
        }
        if records.iter().any(|r| !r.last_bin_fraction.is_empty()) {
            rows.push(MetricRow::new(p.step, "ln_last_bin_mean", p.ln_mean, "all"));
            rows.push(MetricRow::new(p.step, "activation_last_bin_mean", p.activation_mean, "all"));
        }
    }
    let losses: Vec<f64> = records
        .iter()
        .map(|r| r.loss)
        .take_while(|l| l.is_finite() && *l > 0.0)
        .collect();
    if let Ok(spikes) = detect_spikes(&losses, DEFAULT_SPIKE_FACTOR) {
        for s in spikes.spike_steps {
            rows.push(MetricRow::new(records[s].step, "spike", 1.0, ""));
        }
    }
    rows.sort_by_key(|r| r.step);
    rows
}

/// Report rows for a paired log, copied straight from the records plus the
/// smoothed ζ trajectory.
pub fn paired_report(records: &[PairedRecord]) -> Vec<MetricRow> {
    let zeta: Vec<f64> = records.iter().map(|r| r.zeta_lower).collect();
    let smooth = ema(&zeta, EMA_HALF_LIFE);
    let mut rows = Vec::new();
    for (r, z) in records.iter().zip(smooth) {
        rows.push(MetricRow::new(r.step, "eps_norm", r.eps_norm, ""));
        rows.push(MetricRow::new(r.step, "g_norm", r.g_norm, ""));
        rows.push(MetricRow::new(r.step, "zeta_lower", r.zeta_lower, ""));
        rows.push(MetricRow::new(r.step, "zeta_lower_ema", z, ""));
        rows.push(MetricRow::new(r.step, "cosine", r.cosine, ""));
        rows.push(MetricRow::new(r.step, "loss_hp", r.loss_hp, ""));
        rows.push(MetricRow::new(r.step, "loss_lp", r.loss_lp, ""));
    }
    rows
}

/// CSV with columns `step,metric,value,tensor_name`.
pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,metric,value,tensor_name")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.metric, r.value, r.tensor_name)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeta_examples() {
        assert_eq!(zeta_lower_bound(1.0, 0.5).unwrap(), 2.0);
        assert_eq!(zeta_lower_bound(0.0, 3.0).unwrap(), 0.0);
        assert!(matches!(zeta_lower_bound(1.0, 0.0), Err(Error::UndefinedRatio(_))));
    }

    #[test]
    fn cosine_examples() {
        let g = [1.0, -2.0, 0.5];
        let g3: Vec<f64> = g.iter().map(|x| 3.0 * x).collect();
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert!((cosine_alignment(&g, &g3).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_alignment(&g, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_alignment(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_alignment(&g, &g).unwrap(), 1.0);
        assert!(cosine_alignment(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn spike_examples() {
        assert_eq!(detect_spikes(&[1.0, 0.9, 120.0, 1.0], 100.0).unwrap().spike_steps, vec![2]);
        assert!(detect_spikes(&[5.0, 4.0, 3.0, 2.0], 100.0).unwrap().spike_steps.is_empty());
        assert!(detect_spikes(&[1.0, 99.0], 100.0).unwrap().spike_steps.is_empty());
        assert!(detect_spikes(&[1.0, 100.0], 100.0).unwrap().spike_steps.is_empty());
        assert!(detect_spikes(&[1.0, 0.0], 100.0).is_err());
        assert!(detect_spikes(&[], 100.0).is_err());
    }

    #[test]
    fn margin_examples() {
        assert_eq!(stability_margin(1e-3, 1000.0, 0.0), 0.0);
        assert_eq!(stability_margin(1e-3, 1000.0, 2.0), 2.0);
        assert!((stability_margin(1e-4, 1000.0, 0.5) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn ema_half_life() {
        let mut s = vec![0.0];
        s.extend(std::iter::repeat_n(1.0, 100));
        let e = ema(&s, 100.0);
        assert!((e[100] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quadratic_eigenvalue() {
        let mut q = DiagonalQuadratic {
            diag: vec![1.0, 2.0, 5.0],
            w: vec![0.3, -0.2, 0.1],
            scale: 1.0,
        };
        let est = estimate_lambda_max(&mut q, &PowerIterOptions::default()).unwrap();
        assert!((est.lambda_max - 5.0).abs() < 0.05, "{est:?}");
        q.scale = 2.0;
        let est2 = estimate_lambda_max(&mut q, &PowerIterOptions::default()).unwrap();
        assert!((est2.lambda_max / est.lambda_max - 2.0).abs() < 0.04);
    }
}
